#include "liverformer/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace liverformer {

namespace {

Dims resampled_dims(const Dims& dims, const Vec3& spacing, double target) {
    auto scaled = [&](std::size_t n, double s) {
        const auto r = static_cast<std::size_t>(
            std::llround(static_cast<double>(n) * s / target));
        return std::max<std::size_t>(1, r);
    };
    return Dims{scaled(dims.d, spacing[0]), scaled(dims.h, spacing[1]),
                scaled(dims.w, spacing[2])};
}

// Continuous source coordinate of a target voxel center along one axis.
// scale = target_spacing / source_spacing; equal spacings give scale == 1.0
// exactly, which makes the identity resample bit-exact.
inline double source_coord(std::size_t i, double scale) {
    return (static_cast<double>(i) + 0.5) * scale - 0.5;
}

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
    if (i < 0) return 0;
    if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
    return static_cast<std::size_t>(i);
}

}  // namespace

ImageVolume resample_image(const ImageVolume& v, double target_spacing) {
    v.validate();
    const Dims out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
    ImageVolume out(out_dims, Vec3{target_spacing, target_spacing, target_spacing});
    out.origin = v.origin;

    const double scale_d = target_spacing / v.spacing[0];
    const double scale_h = target_spacing / v.spacing[1];
    const double scale_w = target_spacing / v.spacing[2];

    for (std::size_t od = 0; od < out_dims.d; ++od) {
        const double cd = source_coord(od, scale_d);
        const double fd = std::floor(cd);
        const double td = cd - fd;
        const std::size_t d0 = clamp_index(static_cast<std::ptrdiff_t>(fd), v.dims.d);
        const std::size_t d1 = clamp_index(static_cast<std::ptrdiff_t>(fd) + 1, v.dims.d);
        for (std::size_t oh = 0; oh < out_dims.h; ++oh) {
            const double ch = source_coord(oh, scale_h);
            const double fh = std::floor(ch);
            const double th = ch - fh;
            const std::size_t h0 = clamp_index(static_cast<std::ptrdiff_t>(fh), v.dims.h);
            const std::size_t h1 = clamp_index(static_cast<std::ptrdiff_t>(fh) + 1, v.dims.h);
            for (std::size_t ow = 0; ow < out_dims.w; ++ow) {
                const double cw = source_coord(ow, scale_w);
                const double fw = std::floor(cw);
                const double tw = cw - fw;
                const std::size_t w0 = clamp_index(static_cast<std::ptrdiff_t>(fw), v.dims.w);
                const std::size_t w1 = clamp_index(static_cast<std::ptrdiff_t>(fw) + 1, v.dims.w);

                const double c000 = v.at(d0, h0, w0), c001 = v.at(d0, h0, w1);
                const double c010 = v.at(d0, h1, w0), c011 = v.at(d0, h1, w1);
                const double c100 = v.at(d1, h0, w0), c101 = v.at(d1, h0, w1);
                const double c110 = v.at(d1, h1, w0), c111 = v.at(d1, h1, w1);

                const double c00 = c000 + (c001 - c000) * tw;
                const double c01 = c010 + (c011 - c010) * tw;
                const double c10 = c100 + (c101 - c100) * tw;
                const double c11 = c110 + (c111 - c110) * tw;
                const double c0 = c00 + (c01 - c00) * th;
                const double c1 = c10 + (c11 - c10) * th;
                out.at(od, oh, ow) = static_cast<float>(c0 + (c1 - c0) * td);
            }
        }
    }
    return out;
}

LabelVolume resample_labels(const LabelVolume& v, double target_spacing) {
    v.validate();
    const Dims out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
    LabelVolume out(out_dims, Vec3{target_spacing, target_spacing, target_spacing});
    out.origin = v.origin;

    const double scale_d = target_spacing / v.spacing[0];
    const double scale_h = target_spacing / v.spacing[1];
    const double scale_w = target_spacing / v.spacing[2];

    // Nearest neighbor: floor(c + 0.5), ties toward the higher index.
    auto nearest = [](double c, std::size_t n) {
        return clamp_index(static_cast<std::ptrdiff_t>(std::floor(c + 0.5)), n);
    };

    for (std::size_t od = 0; od < out_dims.d; ++od) {
        const std::size_t sd = nearest(source_coord(od, scale_d), v.dims.d);
        for (std::size_t oh = 0; oh < out_dims.h; ++oh) {
            const std::size_t sh = nearest(source_coord(oh, scale_h), v.dims.h);
            for (std::size_t ow = 0; ow < out_dims.w; ++ow) {
                const std::size_t sw = nearest(source_coord(ow, scale_w), v.dims.w);
                out.at(od, oh, ow) = v.at(sd, sh, sw);
            }
        }
    }
    return out;
}

ImageVolume normalize_intensity(const ImageVolume& v, double level, double width) {
    if (!(width > 0.0)) {
        throw NonPositiveWidth("window width must be > 0, got " + std::to_string(width));
    }
    ImageVolume out = v;
    const double lo = level - width / 2.0;
    for (float& x : out.data) {
        const double t = (static_cast<double>(x) - lo) / width;
        x = static_cast<float>(std::clamp(t, 0.0, 1.0));
    }
    return out;
}

ImageVolume normalize_minmax(const ImageVolume& v) {
    ImageVolume out = v;
    if (out.data.empty()) return out;
    const auto [lo_it, hi_it] = std::minmax_element(out.data.begin(), out.data.end());
    const double lo = *lo_it, hi = *hi_it;
    const double range = hi - lo;
    for (float& x : out.data) {
        x = range > 0.0 ? static_cast<float>((x - lo) / range) : 0.0f;
    }
    return out;
}

namespace {

// Shared crop/pad placement. For each axis returns (src_start, dst_start,
// copy_count): shrinking removes floor(r/2) voxels at the low end and the
// remainder at the high end; growing pads floor(p/2) low, remainder high.
struct AxisFit {
    std::size_t src_start, dst_start, count;
};

AxisFit fit_axis(std::size_t src, std::size_t dst) {
    if (src >= dst) {
        const std::size_t r = src - dst;
        return {r / 2, 0, dst};
    }
    const std::size_t p = dst - src;
    return {0, p / 2, src};
}

template <typename T>
VoxelGrid<T> crop_or_pad_grid(const VoxelGrid<T>& v, Dims target, T pad_value) {
    VoxelGrid<T> out(target, v.spacing, pad_value);
    out.origin = v.origin;
    const AxisFit fd = fit_axis(v.dims.d, target.d);
    const AxisFit fh = fit_axis(v.dims.h, target.h);
    const AxisFit fw = fit_axis(v.dims.w, target.w);
    for (std::size_t d = 0; d < fd.count; ++d) {
        for (std::size_t h = 0; h < fh.count; ++h) {
            const T* src = &v.at(fd.src_start + d, fh.src_start + h, fw.src_start);
            T* dst = &out.at(fd.dst_start + d, fh.dst_start + h, fw.dst_start);
            std::copy(src, src + fw.count, dst);
        }
    }
    return out;
}

}  // namespace

ImageVolume crop_or_pad(const ImageVolume& v, Dims target, float pad_value) {
    ImageVolume out;
    static_cast<VoxelGrid<float>&>(out) = crop_or_pad_grid<float>(v, target, pad_value);
    return out;
}

LabelVolume crop_or_pad(const LabelVolume& v, Dims target) {
    LabelVolume out;
    static_cast<VoxelGrid<std::uint8_t>&>(out) = crop_or_pad_grid<std::uint8_t>(v, target, 0);
    return out;
}

ImageVolume preprocess_image(const ImageVolume& v, const PreprocessConfig& cfg) {
    ImageVolume r = resample_image(v, cfg.target_spacing);
    ImageVolume n = cfg.normalization == NormalizationMode::Window
                        ? normalize_intensity(r, cfg.window_level, cfg.window_width)
                        : normalize_minmax(r);
    return crop_or_pad(n, cfg.target_dims, 0.0f);
}

LabelVolume preprocess_labels(const LabelVolume& v, const PreprocessConfig& cfg) {
    return crop_or_pad(resample_labels(v, cfg.target_spacing), cfg.target_dims);
}

}  // namespace liverformer
