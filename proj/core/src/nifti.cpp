// nifti.cpp — NIfTI-1 byte-level parsing/serialization and PGM export.

#include "liverformer/nifti.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace liverformer {

namespace {

// Little-endian primitive readers with optional byte swap.
template <typename T>
T read_le(const std::uint8_t* p, bool swap) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, p, sizeof(T));
    if (swap) std::reverse(buf, buf + sizeof(T));
    T out;
    std::memcpy(&out, buf, sizeof(T));
    return out;
}

template <typename T>
void write_le(std::vector<std::uint8_t>& out, std::size_t offset, T value) {
    std::memcpy(out.data() + offset, &value, sizeof(T));
}

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kMinFileSize = 352;  // header + 4-byte extension flag

std::size_t datatype_size(std::int16_t dt) {
    switch (dt) {
        case kDtUint8:
        case kDtInt8:
            return 1;
        case kDtInt16:
        case kDtUint16:
            return 2;
        case kDtInt32:
        case kDtFloat32:
            return 4;
        case kDtFloat64:
            return 8;
        default:
            return 0;
    }
}

double decode_voxel(const std::uint8_t* p, std::int16_t dt, bool swap) {
    switch (dt) {
        case kDtUint8:
            return static_cast<double>(*p);
        case kDtInt8:
            return static_cast<double>(static_cast<std::int8_t>(*p));
        case kDtInt16:
            return static_cast<double>(read_le<std::int16_t>(p, swap));
        case kDtUint16:
            return static_cast<double>(read_le<std::uint16_t>(p, swap));
        case kDtInt32:
            return static_cast<double>(read_le<std::int32_t>(p, swap));
        case kDtFloat32:
            return static_cast<double>(read_le<float>(p, swap));
        case kDtFloat64:
            return read_le<double>(p, swap);
        default:
            return 0.0;
    }
}

struct DecodedBody {
    NiftiHeader hdr;
    Dims dims;
    Vec3 spacing;
    Vec3 origin;
    const std::uint8_t* body = nullptr;
    std::size_t voxel_size = 0;
};

DecodedBody decode_common(const std::vector<std::uint8_t>& bytes) {
    DecodedBody out;
    out.hdr = parse_nifti_header(bytes);
    const NiftiHeader& h = out.hdr;

    out.dims = Dims{static_cast<std::size_t>(h.dim[3]), static_cast<std::size_t>(h.dim[2]),
                    static_cast<std::size_t>(h.dim[1])};
    out.spacing = Vec3{static_cast<double>(h.pixdim[3]), static_cast<double>(h.pixdim[2]),
                       static_cast<double>(h.pixdim[1])};
    out.origin = Vec3{static_cast<double>(h.qoffset[2]), static_cast<double>(h.qoffset[1]),
                      static_cast<double>(h.qoffset[0])};

    out.voxel_size = datatype_size(h.datatype);
    // Compare as double first: an absurd vox_offset must not reach the
    // float-to-integer cast, which is undefined out of range.
    if (static_cast<double>(h.vox_offset) > static_cast<double>(bytes.size())) {
        throw TruncatedFile("vox_offset " + std::to_string(h.vox_offset) +
                            " points past the end of the file");
    }
    std::size_t offset = static_cast<std::size_t>(std::max(0.0f, h.vox_offset));
    if (offset < kMinFileSize) offset = kMinFileSize;

    const std::size_t need = out.dims.voxels() * out.voxel_size;
    if (bytes.size() < offset || bytes.size() - offset < need) {
        throw TruncatedFile("data body shorter than header promises (" +
                            std::to_string(bytes.size()) + " bytes, need " +
                            std::to_string(offset + need) + ")");
    }
    out.body = bytes.data() + offset;
    return out;
}

std::vector<std::uint8_t> write_common(Dims dims, Vec3 spacing, Vec3 origin,
                                       std::int16_t datatype, std::int16_t bitpix,
                                       std::size_t body_bytes) {
    std::vector<std::uint8_t> out(kMinFileSize + body_bytes, 0);
    write_le<std::int32_t>(out, 0, 348);
    // dim[8] at offset 40
    write_le<std::int16_t>(out, 40, 3);
    write_le<std::int16_t>(out, 42, static_cast<std::int16_t>(dims.w));
    write_le<std::int16_t>(out, 44, static_cast<std::int16_t>(dims.h));
    write_le<std::int16_t>(out, 46, static_cast<std::int16_t>(dims.d));
    for (int i = 4; i < 8; ++i) write_le<std::int16_t>(out, 40 + 2 * i, 1);
    write_le<std::int16_t>(out, 70, datatype);
    write_le<std::int16_t>(out, 72, bitpix);
    // pixdim[8] at offset 76; pixdim[0] is the quaternion sign factor
    write_le<float>(out, 76, 1.0f);
    write_le<float>(out, 80, static_cast<float>(spacing[2]));
    write_le<float>(out, 84, static_cast<float>(spacing[1]));
    write_le<float>(out, 88, static_cast<float>(spacing[0]));
    write_le<float>(out, 108, 352.0f);  // vox_offset
    write_le<float>(out, 112, 0.0f);    // scl_slope
    write_le<float>(out, 116, 0.0f);    // scl_inter
    write_le<float>(out, 268, static_cast<float>(origin[2]));  // qoffset_x
    write_le<float>(out, 272, static_cast<float>(origin[1]));  // qoffset_y
    write_le<float>(out, 276, static_cast<float>(origin[0]));  // qoffset_z
    out[344] = 'n';
    out[345] = '+';
    out[346] = '1';
    out[347] = '\0';
    // bytes 348..351: extension flag, all zero (no extensions)
    return out;
}

}  // namespace

NiftiHeader parse_nifti_header(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kMinFileSize) {
        throw TruncatedFile("file is " + std::to_string(bytes.size()) +
                            " bytes; a NIfTI-1 file needs at least 352");
    }

    NiftiHeader h;
    std::memcpy(h.magic, bytes.data() + 344, 4);
    const bool single = std::memcmp(h.magic, "n+1\0", 4) == 0;
    const bool paired = std::memcmp(h.magic, "ni1\0", 4) == 0;
    if (!single && !paired) {
        throw BadMagic("magic bytes are not \"n+1\" or \"ni1\"");
    }

    const std::int32_t hdr_native = read_le<std::int32_t>(bytes.data(), false);
    const std::int32_t hdr_swapped = read_le<std::int32_t>(bytes.data(), true);
    if (hdr_native == 348) {
        h.swapped = false;
    } else if (hdr_swapped == 348) {
        h.swapped = true;
    } else {
        throw MalformedHeader("sizeof_hdr is not 348 in either byte order");
    }
    h.sizeof_hdr = 348;
    const bool swap = h.swapped;

    for (int i = 0; i < 8; ++i) {
        h.dim[i] = read_le<std::int16_t>(bytes.data() + 40 + 2 * i, swap);
        h.pixdim[i] = read_le<float>(bytes.data() + 76 + 4 * i, swap);
    }
    h.datatype = read_le<std::int16_t>(bytes.data() + 70, swap);
    h.bitpix = read_le<std::int16_t>(bytes.data() + 72, swap);
    h.vox_offset = read_le<float>(bytes.data() + 108, swap);
    h.scl_slope = read_le<float>(bytes.data() + 112, swap);
    h.scl_inter = read_le<float>(bytes.data() + 116, swap);
    h.qoffset[0] = read_le<float>(bytes.data() + 268, swap);
    h.qoffset[1] = read_le<float>(bytes.data() + 272, swap);
    h.qoffset[2] = read_le<float>(bytes.data() + 276, swap);

    if (h.dim[0] < 1 || h.dim[0] > 7) {
        throw MalformedHeader("dim[0] = " + std::to_string(h.dim[0]) + " outside 1..7");
    }
    if (h.dim[0] != 3) {
        throw UnsupportedDatatype("only 3D volumes are supported (dim[0] = " +
                                  std::to_string(h.dim[0]) + ")");
    }
    for (int i = 1; i <= 3; ++i) {
        if (h.dim[i] < 1) {
            throw MalformedHeader("dim[" + std::to_string(i) + "] = " +
                                  std::to_string(h.dim[i]) + " is not positive");
        }
    }

    const std::size_t vsize = datatype_size(h.datatype);
    if (vsize == 0) {
        throw UnsupportedDatatype("datatype code " + std::to_string(h.datatype));
    }
    if (h.bitpix != static_cast<std::int16_t>(8 * vsize)) {
        throw UnsupportedDatatype("bitpix " + std::to_string(h.bitpix) +
                                  " does not match datatype code " + std::to_string(h.datatype));
    }
    for (int i = 1; i <= 3; ++i) {
        if (!(h.pixdim[i] > 0.0f) || !std::isfinite(h.pixdim[i])) {
            throw NonPositiveSpacing("pixdim[" + std::to_string(i) + "] must be finite and > 0");
        }
    }
    if (!std::isfinite(h.vox_offset) || h.vox_offset < 0.0f) {
        throw MalformedHeader("vox_offset is negative or non-finite");
    }
    if (!std::isfinite(h.scl_slope) || !std::isfinite(h.scl_inter)) {
        throw MalformedHeader("scl_slope/scl_inter are non-finite");
    }
    return h;
}

ImageVolume read_image_nifti(const std::vector<std::uint8_t>& bytes) {
    DecodedBody dec = decode_common(bytes);
    const NiftiHeader& h = dec.hdr;

    ImageVolume v(dec.dims, dec.spacing);
    v.origin = dec.origin;
    const bool apply_scl = h.scl_slope != 0.0f;
    const std::size_t n = dec.dims.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        double raw = decode_voxel(dec.body + i * dec.voxel_size, h.datatype, h.swapped);
        if (apply_scl) raw = raw * h.scl_slope + h.scl_inter;
        v.data[i] = static_cast<float>(raw);
    }
    v.validate();
    return v;
}

LabelVolume read_label_nifti(const std::vector<std::uint8_t>& bytes) {
    DecodedBody dec = decode_common(bytes);
    const NiftiHeader& h = dec.hdr;

    if (h.datatype == kDtFloat32 || h.datatype == kDtFloat64) {
        throw UnsupportedDatatype("label volumes must use an integer datatype");
    }
    if (h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
        throw UnsupportedDatatype("label volumes must not carry a scl_slope rescale");
    }

    LabelVolume v(dec.dims, dec.spacing);
    v.origin = dec.origin;
    const std::size_t n = dec.dims.voxels();
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = decode_voxel(dec.body + i * dec.voxel_size, h.datatype, h.swapped);
        if (raw < 0.0 || raw > static_cast<double>(kMaxLabel) ||
            raw != std::floor(raw)) {
            throw MalformedHeader("label value " + std::to_string(raw) +
                                  " is not an integer in 0..9");
        }
        v.data[i] = static_cast<std::uint8_t>(raw);
    }
    return v;
}

std::vector<std::uint8_t> write_nifti(const ImageVolume& v) {
    v.validate();
    auto out = write_common(v.dims, v.spacing, v.origin, kDtFloat32, 32,
                            v.data.size() * sizeof(float));
    std::memcpy(out.data() + kMinFileSize, v.data.data(), v.data.size() * sizeof(float));
    return out;
}

std::vector<std::uint8_t> write_nifti(const LabelVolume& v) {
    v.validate();
    auto out = write_common(v.dims, v.spacing, v.origin, kDtUint8, 8, v.data.size());
    std::memcpy(out.data() + kMinFileSize, v.data.data(), v.data.size());
    return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw VolumeError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw VolumeError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw VolumeError("short write to " + path);
}

namespace {

template <typename T>
std::vector<std::uint8_t> export_slice_impl(const VoxelGrid<T>& v, SliceAxis axis,
                                            std::size_t index) {
    std::size_t rows = 0, cols = 0, extent = 0;
    switch (axis) {
        case SliceAxis::Axial:
            extent = v.dims.d, rows = v.dims.h, cols = v.dims.w;
            break;
        case SliceAxis::Coronal:
            extent = v.dims.h, rows = v.dims.d, cols = v.dims.w;
            break;
        case SliceAxis::Sagittal:
            extent = v.dims.w, rows = v.dims.d, cols = v.dims.h;
            break;
    }
    if (index >= extent) {
        throw IndexOutOfRange("slice index " + std::to_string(index) + " >= extent " +
                              std::to_string(extent));
    }

    auto sample = [&](std::size_t r, std::size_t c) -> double {
        switch (axis) {
            case SliceAxis::Axial:
                return static_cast<double>(v.at(index, r, c));
            case SliceAxis::Coronal:
                return static_cast<double>(v.at(r, index, c));
            default:
                return static_cast<double>(v.at(r, c, index));
        }
    };

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const double x = sample(r, c);
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }

    std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + rows * cols);
    const double range = hi - lo;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            std::uint8_t px = 0;
            if (range > 0.0) {
                const double scaled = (sample(r, c) - lo) / range * 255.0;
                px = static_cast<std::uint8_t>(std::lround(scaled));
            }
            out.push_back(px);
        }
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> export_slice(const ImageVolume& v, SliceAxis axis, std::size_t index) {
    return export_slice_impl(v, axis, index);
}
std::vector<std::uint8_t> export_slice(const LabelVolume& v, SliceAxis axis, std::size_t index) {
    return export_slice_impl(v, axis, index);
}

}  // namespace liverformer
