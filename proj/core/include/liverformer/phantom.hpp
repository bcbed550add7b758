// phantom.hpp — procedural nine-segment test volumes.
//
// An ellipsoid "liver" is cut by three oblique planes plus one axial plane
// into the nine Couinaud regions. Geometry alone decides the label; the
// image gives every segment the same intensity distribution, so nothing in
// the voxel values leaks the segment identity. Bright tubes along the
// plane/surface intersection curves stand in for the hepatic and portal
// vascular landmarks. A seeded diffeomorphic warp then bends each case away
// from the shared geometry, and additive noise finishes the image.
//
// Geometry lives in normalized box coordinates u in (-0.5, 0.5)^3 per axis
// (u = (index + 0.5) / extent - 0.5); plane normals and offsets are stated
// in those units. All randomness flows from one seed in a fixed draw order,
// so every case is a pure function of (config, seed).

#pragma once

#include <cstdint>
#include <vector>

#include "liverformer/augment.hpp"
#include "liverformer/volume.hpp"

namespace liverformer {

struct PhantomError : VolumeError {
    using VolumeError::VolumeError;
};
struct DegenerateGeometry : PhantomError {
    using PhantomError::PhantomError;
};

struct PlaneSpec {
    Vec3 normal{0.0, 0.0, 1.0};  // (d, h, w); normalized internally
    double offset = 0.0;         // signed distance of the plane from the center
};

struct PhantomConfig {
    Dims dims{16, 64, 64};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 semi_axes{0.40, 0.42, 0.44};  // ellipsoid semi-axes, fraction of each extent

    // Cut 1 separates the left-lateral pair (II, III); cut 2 separates the
    // middle column (I, IVa, IVb) from the right lobe; cut 3 splits
    // anterior/posterior within each side; the axial plane splits
    // superior/inferior.
    PlaneSpec plane1{{0.05, 0.18, 0.98}, -0.14};
    PlaneSpec plane2{{-0.04, 0.22, 0.97}, 0.02};
    PlaneSpec plane3{{0.06, 0.98, -0.08}, -0.06};
    PlaneSpec axial{{1.0, 0.0, 0.0}, 0.0};

    double segment_intensity_mean = 0.55;
    double segment_intensity_std = 0.05;
    double background_intensity = 0.10;
    double vessel_intensity = 0.85;
    double vessel_radius = 1.2;   // voxels
    double noise_std = 0.015;
    double warp_magnitude = 2.0;  // max |velocity| in voxels
    double warp_smoothing = 6.0;  // sigma (voxels) smoothing the velocity noise

    void validate() const;
};

/// Deterministic phantom for (cfg, seed); id is "phantom_<seed>". Throws
/// DegenerateGeometry when any of the nine segments is empty, before or
/// after the warp. When vessel_mask is given it receives a 0/1 grid marking
/// the warped vessel tubes, letting callers study parenchyma voxels alone.
LabeledCase generate_phantom(const PhantomConfig& cfg, std::uint64_t seed,
                             VoxelGrid<std::uint8_t>* vessel_mask = nullptr);

/// n phantoms seeded base_seed .. base_seed + n - 1.
std::vector<LabeledCase> generate_dataset(std::size_t n, const PhantomConfig& cfg,
                                          std::uint64_t base_seed);

}  // namespace liverformer
