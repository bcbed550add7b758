// volume.hpp — 3D scalar grids with physical-spacing metadata.
//
// Conventions used throughout the library:
//   * dims are (D, H, W); data is contiguous with W fastest-varying,
//     i.e. index(d, h, w) = (d * H + h) * W + w.
//   * spacing is (sz, sy, sx) in mm per voxel, matching the (D, H, W) axes.
//   * label values 0..9: 0 = background, 1..9 = Couinaud I, II, III, IVa,
//     IVb, V, VI, VII, VIII in that fixed order.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace liverformer {

struct VolumeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimsMismatch : VolumeError {
    using VolumeError::VolumeError;
};

struct Dims {
    std::size_t d = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t voxels() const { return d * h * w; }
    bool operator==(const Dims&) const = default;
    std::string str() const {
        return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

using Vec3 = std::array<double, 3>;  // (z, y, x) components, matching (d, h, w)

constexpr int kNumClasses = 10;  // background + 9 Couinaud sub-segments
constexpr std::uint8_t kMaxLabel = 9;

/// Display names for label values 1..9, indexed by class id.
inline const char* couinaud_segment_name(int cls) {
    static const char* names[kNumClasses] = {
        "background", "I", "II", "III", "IVa", "IVb", "V", "VI", "VII", "VIII"};
    return (cls >= 0 && cls < kNumClasses) ? names[cls] : "?";
}

template <typename T>
struct VoxelGrid {
    Dims dims;
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    std::vector<T> data;

    VoxelGrid() = default;
    VoxelGrid(Dims dm, Vec3 sp, T fill = T{})
        : dims(dm), spacing(sp), data(dm.voxels(), fill) {}

    std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
        return (d * dims.h + h) * dims.w + w;
    }
    T& at(std::size_t d, std::size_t h, std::size_t w) { return data[index(d, h, w)]; }
    const T& at(std::size_t d, std::size_t h, std::size_t w) const { return data[index(d, h, w)]; }
};

struct ImageVolume : VoxelGrid<float> {
    using VoxelGrid<float>::VoxelGrid;

    // Throws VolumeError if the size/spacing/finiteness invariants are broken.
    void validate() const;
};

struct LabelVolume : VoxelGrid<std::uint8_t> {
    using VoxelGrid<std::uint8_t>::VoxelGrid;

    void validate() const;
};

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
    if (!(a == b)) {
        throw DimsMismatch(std::string(what) + ": dims " + a.str() + " vs " + b.str());
    }
}

inline void ImageVolume::validate() const {
    if (data.size() != dims.voxels()) {
        throw VolumeError("image data length " + std::to_string(data.size()) +
                          " != voxel count " + std::to_string(dims.voxels()));
    }
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw VolumeError("non-positive or non-finite spacing");
        }
    }
    for (float v : data) {
        if (!std::isfinite(v)) {
            throw VolumeError("non-finite intensity value");
        }
    }
}

inline void LabelVolume::validate() const {
    if (data.size() != dims.voxels()) {
        throw VolumeError("label data length " + std::to_string(data.size()) +
                          " != voxel count " + std::to_string(dims.voxels()));
    }
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            throw VolumeError("non-positive or non-finite spacing");
        }
    }
    for (std::uint8_t v : data) {
        if (v > kMaxLabel) {
            throw VolumeError("label value " + std::to_string(int(v)) + " outside 0..9");
        }
    }
}

}  // namespace liverformer
