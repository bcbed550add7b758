// registration.hpp — deformable registration via log-domain demons.
//
// register_images(fixed, moving, cfg) returns a stationary velocity v such
// that warping `moving` with exp(v) approximates `fixed`; exp(−v) is the
// matching inverse transform. Intensities are expected in [0, 1].

#pragma once

#include "liverformer/field.hpp"
#include "liverformer/volume.hpp"

namespace liverformer {

struct RegistrationConfig {
    int pyramid_levels = 3;
    int iterations_per_level = 30;
    double smoothing_sigma = 2.0;      // voxels, applied to the velocity each iteration
    double force_normalization = 1.0;  // weight on the squared intensity difference
    int exp_steps = 6;

    // Throws FieldError unless all values are positive and exp_steps >= 1.
    void validate() const;
};

VelocityField register_images(const ImageVolume& fixed, const ImageVolume& moving,
                              const RegistrationConfig& cfg = {});

}  // namespace liverformer
