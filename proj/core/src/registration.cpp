#include "liverformer/registration.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace liverformer {

namespace {

// 2x box downsample per axis, odd trailing blocks average fewer voxels.
ImageVolume downsample2x(const ImageVolume& v) {
    const Dims od{(v.dims.d + 1) / 2, (v.dims.h + 1) / 2, (v.dims.w + 1) / 2};
    ImageVolume out(od, Vec3{v.spacing[0] * 2, v.spacing[1] * 2, v.spacing[2] * 2});
    out.origin = v.origin;
    for (std::size_t d = 0; d < od.d; ++d) {
        for (std::size_t h = 0; h < od.h; ++h) {
            for (std::size_t w = 0; w < od.w; ++w) {
                double sum = 0.0;
                int n = 0;
                for (std::size_t dd = 2 * d; dd < std::min(2 * d + 2, v.dims.d); ++dd) {
                    for (std::size_t hh = 2 * h; hh < std::min(2 * h + 2, v.dims.h); ++hh) {
                        for (std::size_t ww = 2 * w; ww < std::min(2 * w + 2, v.dims.w); ++ww) {
                            sum += v.at(dd, hh, ww);
                            ++n;
                        }
                    }
                }
                out.at(d, h, w) = static_cast<float>(sum / n);
            }
        }
    }
    return out;
}

// Upsample a coarse velocity to the given fine grid. Coarse voxel j covers
// fine voxels {2j, 2j+1}, so fine index i maps to coarse coordinate
// (i - 0.5) / 2; displacement values double because the voxel size halves.
VelocityField upsample_velocity(const VelocityField& coarse, const Dims& fine) {
    VelocityField out(fine);
    std::size_t i = 0;
    for (std::size_t d = 0; d < fine.d; ++d) {
        const double cd = (static_cast<double>(d) - 0.5) / 2.0;
        for (std::size_t h = 0; h < fine.h; ++h) {
            const double ch = (static_cast<double>(h) - 0.5) / 2.0;
            for (std::size_t w = 0; w < fine.w; ++w, ++i) {
                const double cw = (static_cast<double>(w) - 0.5) / 2.0;
                const auto s = sample_field(coarse, cd, ch, cw);
                out.comp[0][i] = static_cast<float>(2.0 * s[0]);
                out.comp[1][i] = static_cast<float>(2.0 * s[1]);
                out.comp[2][i] = static_cast<float>(2.0 * s[2]);
            }
        }
    }
    return out;
}

// Central-difference gradient in voxel units, one-sided at the boundary.
std::array<std::vector<float>, 3> image_gradient(const ImageVolume& v) {
    std::array<std::vector<float>, 3> g;
    for (auto& c : g) c.assign(v.dims.voxels(), 0.0f);
    const Dims& dm = v.dims;
    for (std::size_t d = 0; d < dm.d; ++d) {
        for (std::size_t h = 0; h < dm.h; ++h) {
            for (std::size_t w = 0; w < dm.w; ++w) {
                const std::size_t i = v.index(d, h, w);
                {
                    const std::size_t lo = d > 0 ? d - 1 : 0;
                    const std::size_t hi = d + 1 < dm.d ? d + 1 : dm.d - 1;
                    g[0][i] = (v.at(hi, h, w) - v.at(lo, h, w)) / static_cast<float>(hi - lo == 0 ? 1 : hi - lo);
                }
                {
                    const std::size_t lo = h > 0 ? h - 1 : 0;
                    const std::size_t hi = h + 1 < dm.h ? h + 1 : dm.h - 1;
                    g[1][i] = (v.at(d, hi, w) - v.at(d, lo, w)) / static_cast<float>(hi - lo == 0 ? 1 : hi - lo);
                }
                {
                    const std::size_t lo = w > 0 ? w - 1 : 0;
                    const std::size_t hi = w + 1 < dm.w ? w + 1 : dm.w - 1;
                    g[2][i] = (v.at(d, h, hi) - v.at(d, h, lo)) / static_cast<float>(hi - lo == 0 ? 1 : hi - lo);
                }
            }
        }
    }
    return g;
}

}  // namespace

void RegistrationConfig::validate() const {
    if (pyramid_levels < 1 || iterations_per_level < 1 || exp_steps < 1 ||
        !(smoothing_sigma > 0.0) || !(force_normalization > 0.0)) {
        throw FieldError("registration config values must be positive");
    }
}

VelocityField register_images(const ImageVolume& fixed, const ImageVolume& moving,
                              const RegistrationConfig& cfg) {
    cfg.validate();
    require_same_dims(fixed.dims, moving.dims, "register_images");

    // Cap the pyramid so the coarsest level keeps at least 4 voxels per axis.
    int levels = cfg.pyramid_levels;
    {
        const std::size_t min_dim =
            std::min({fixed.dims.d, fixed.dims.h, fixed.dims.w});
        while (levels > 1 && (min_dim >> (levels - 1)) < 4) --levels;
    }

    std::vector<ImageVolume> fixed_pyr{fixed}, moving_pyr{moving};
    for (int l = 1; l < levels; ++l) {
        fixed_pyr.push_back(downsample2x(fixed_pyr.back()));
        moving_pyr.push_back(downsample2x(moving_pyr.back()));
    }

    VelocityField v(fixed_pyr.back().dims);
    for (int l = levels - 1; l >= 0; --l) {
        const ImageVolume& f = fixed_pyr[static_cast<std::size_t>(l)];
        const ImageVolume& m = moving_pyr[static_cast<std::size_t>(l)];
        if (!(v.dims == f.dims)) v = upsample_velocity(v, f.dims);

        const auto grad = image_gradient(f);
        const double alpha = cfg.force_normalization;
        const std::size_t n = f.dims.voxels();

        for (int it = 0; it < cfg.iterations_per_level; ++it) {
            const DisplacementField u = exp_velocity(v, cfg.exp_steps);
            const ImageVolume warped = warp_image(m, u);
            for (std::size_t i = 0; i < n; ++i) {
                const double diff = static_cast<double>(warped.data[i]) - f.data[i];
                const double gd = grad[0][i], gh = grad[1][i], gw = grad[2][i];
                const double denom = gd * gd + gh * gh + gw * gw + alpha * diff * diff;
                if (denom < 1e-12) continue;
                const double step = -diff / denom;
                v.comp[0][i] += static_cast<float>(step * gd);
                v.comp[1][i] += static_cast<float>(step * gh);
                v.comp[2][i] += static_cast<float>(step * gw);
            }
            gaussian_smooth_inplace(v, cfg.smoothing_sigma);
        }
    }
    return v;
}

}  // namespace liverformer
