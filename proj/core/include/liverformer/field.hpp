// field.hpp — dense vector fields on the voxel grid and the warping,
// exponentiation, inversion, and composition operations built on them.
//
// A field stores one displacement vector per voxel, in voxel units, as three
// separate component planes ordered (d, h, w). A DisplacementField u defines
// the map φ(p) = p + u(p): warping a volume samples the source at p + u(p).
// A VelocityField v is a stationary velocity; φ = exp(v) and φ⁻¹ = exp(−v),
// which makes the forward and inverse transforms mutually consistent by
// construction.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "liverformer/volume.hpp"

namespace liverformer {

struct FieldError : VolumeError {
    using VolumeError::VolumeError;
};

struct VectorField {
    Dims dims;
    std::array<std::vector<float>, 3> comp;  // [0]=d, [1]=h, [2]=w components

    VectorField() = default;
    explicit VectorField(Dims dm) : dims(dm) {
        for (auto& c : comp) c.assign(dm.voxels(), 0.0f);
    }

    std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
        return (d * dims.h + h) * dims.w + w;
    }

    // Throws FieldError if component sizes disagree with dims or any value
    // is non-finite.
    void validate() const;

    float max_abs() const;
};

struct DisplacementField : VectorField {
    using VectorField::VectorField;
};

struct VelocityField : VectorField {
    using VectorField::VectorField;
};

/// Flips the sign of every component; exp(negate(v)) is the inverse of exp(v).
VelocityField negate(const VelocityField& v);

/// Trilinear sample of all three components at continuous voxel position
/// (pd, ph, pw), clamp-to-edge outside the grid.
std::array<double, 3> sample_field(const VectorField& f, double pd, double ph, double pw);

/// out(p) = trilinear(x, p + u(p)), clamp-to-edge.
ImageVolume warp_image(const ImageVolume& x, const DisplacementField& u);

/// Nearest-neighbor variant for label maps; never invents a class ID.
LabelVolume warp_labels(const LabelVolume& s, const DisplacementField& u);

/// Scaling and squaring: start from v / 2^steps and self-compose `steps`
/// times, returning φ − Id. steps must be ≥ 1.
DisplacementField exp_velocity(const VelocityField& v, int steps = 6);

/// Fixed-point inverse: iterate u_inv(p) ← −u(p + u_inv(p)).
DisplacementField invert_field(const DisplacementField& u, int iters = 20);

/// (φ1 ∘ φ2)(p) = φ1(p + u2(p)); returned as a displacement, i.e.
/// out(p) = u2(p) + u1(p + u2(p)) with u1 sampled trilinearly.
DisplacementField compose_fields(const DisplacementField& f1, const DisplacementField& f2);

/// Separable Gaussian smoothing of each component, sigma in voxels.
/// sigma ≤ 0 leaves the field unchanged.
void gaussian_smooth_inplace(VectorField& f, double sigma);

/// Separable Gaussian smoothing of a scalar volume, sigma in voxels.
ImageVolume gaussian_smooth(const ImageVolume& v, double sigma);

// Serialization: header-free little-endian blob of 3 uint32 dims (D, H, W)
// followed by the three component planes as float32, plus a text sidecar at
// path + ".txt" describing the layout. read_field ignores the sidecar.
void write_field(const std::string& path, const VectorField& f);
DisplacementField read_displacement_field(const std::string& path);
VelocityField read_velocity_field(const std::string& path);

}  // namespace liverformer
