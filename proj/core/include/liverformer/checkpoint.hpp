// checkpoint.hpp — parameter snapshots on disk.
//
// Binary layout, little-endian throughout:
//   "LFCK" | u32 version=1 | u32 tensor count |
//   per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 values
// Values are stored as float32 regardless of the in-memory scalar type. A
// JSON manifest sidecar at <path>.json lists names and shapes for humans;
// the loader never reads it.
//
// Loading requires the file and the registry to agree exactly: same tensor
// names, same shapes, nothing missing, nothing extra.

#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "liverformer/model.hpp"
#include "liverformer/nifti.hpp"

namespace liverformer {

struct CheckpointError : VolumeError {
    using VolumeError::VolumeError;
};
struct BadCheckpoint : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointMismatch : CheckpointError {
    using CheckpointError::CheckpointError;
};

namespace detail {

inline void ck_append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

struct CkReader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    std::uint32_t u32() {
        if (pos + 4 > bytes.size()) throw BadCheckpoint("checkpoint truncated");
        std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string str(std::size_t n) {
        if (pos + n > bytes.size()) throw BadCheckpoint("checkpoint truncated");
        std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        return s;
    }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), {'L', 'F', 'C', 'K'});
    detail::ck_append_u32(out, 1);
    detail::ck_append_u32(out, static_cast<std::uint32_t>(reg.all().size()));
    nlohmann::json manifest;
    manifest["format"] = "lfck-v1";
    manifest["tensors"] = nlohmann::json::array();
    for (const ad::Tensor<T>& p : reg.all()) {
        detail::ck_append_u32(out, static_cast<std::uint32_t>(p.name().size()));
        out.insert(out.end(), p.name().begin(), p.name().end());
        detail::ck_append_u32(out, static_cast<std::uint32_t>(p.shape().size()));
        nlohmann::json shape = nlohmann::json::array();
        for (std::size_t d : p.shape()) {
            detail::ck_append_u32(out, static_cast<std::uint32_t>(d));
            shape.push_back(d);
        }
        for (T v : p.value()) {
            detail::ck_append_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
        manifest["tensors"].push_back({{"name", p.name()}, {"shape", shape}});
    }
    manifest["total_elements"] = reg.total_elements();
    write_file_bytes(path, out);
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes(path + ".json",
                     std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Overwrites every registry parameter with the stored values. Gradients and
/// graph state are untouched.
template <typename T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    detail::CkReader rd{bytes};
    if (rd.str(4) != "LFCK") throw BadCheckpoint("not a checkpoint: " + path);
    const std::uint32_t version = rd.u32();
    if (version != 1) {
        throw BadCheckpoint("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = rd.u32();
    if (count != reg.all().size()) {
        throw CheckpointMismatch("checkpoint holds " + std::to_string(count) +
                                 " tensors, registry has " +
                                 std::to_string(reg.all().size()));
    }
    std::unordered_set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = rd.str(rd.u32());
        if (!seen.insert(name).second) {
            throw BadCheckpoint("duplicate tensor in checkpoint: " + name);
        }
        ad::Tensor<T>* p = reg.find(name);
        if (!p) throw CheckpointMismatch("checkpoint tensor not in registry: " + name);
        const std::uint32_t ndim = rd.u32();
        ad::Shape shape(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = rd.u32();
        if (shape != p->shape()) {
            throw CheckpointMismatch("shape mismatch for " + name + ": file " +
                                     ad::shape_str(shape) + ", registry " +
                                     ad::shape_str(p->shape()));
        }
        std::vector<T>& value = p->value();
        for (std::size_t j = 0; j < value.size(); ++j) {
            value[j] = static_cast<T>(rd.f32());
        }
    }
    if (rd.pos != bytes.size()) throw BadCheckpoint("trailing bytes in checkpoint");
}

}  // namespace liverformer
