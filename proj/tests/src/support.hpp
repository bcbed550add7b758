// Shared test utilities: independent brute-force oracles and the
// finite-difference gradient checker. Everything here is deliberately the
// slow, obvious implementation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "liverformer/ad/tensor.hpp"
#include "liverformer/field.hpp"
#include "liverformer/metrics.hpp"
#include "liverformer/rng.hpp"
#include "liverformer/volume.hpp"

namespace testsupport {

using liverformer::BinaryMask;
using liverformer::Dims;
using liverformer::DisplacementField;
using liverformer::ImageVolume;
using liverformer::LabelVolume;
using liverformer::Rng;
using liverformer::Vec3;

inline ImageVolume random_image(Dims dims, Rng& rng, const Vec3& spacing = {1, 1, 1}) {
    ImageVolume v(dims, spacing);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform());
    return v;
}

inline LabelVolume random_labels(Dims dims, Rng& rng, int classes = 10,
                                 const Vec3& spacing = {1, 1, 1}) {
    LabelVolume v(dims, spacing);
    for (auto& x : v.data) {
        x = static_cast<std::uint8_t>(rng.index(static_cast<std::uint64_t>(classes)));
    }
    return v;
}

/// Random blob mask: union of a few balls, so surfaces are nontrivial but
/// nonempty with probability 1.
inline BinaryMask random_blob_mask(Dims dims, Rng& rng, int balls = 3) {
    BinaryMask m(dims);
    for (int b = 0; b < balls; ++b) {
        const double cd = rng.uniform(0.0, static_cast<double>(dims.d));
        const double ch = rng.uniform(0.0, static_cast<double>(dims.h));
        const double cw = rng.uniform(0.0, static_cast<double>(dims.w));
        const double r = rng.uniform(1.0, 0.35 * static_cast<double>(
                                                    std::min({dims.d, dims.h, dims.w})));
        for (std::size_t d = 0; d < dims.d; ++d)
            for (std::size_t h = 0; h < dims.h; ++h)
                for (std::size_t w = 0; w < dims.w; ++w) {
                    const double dd = static_cast<double>(d) - cd;
                    const double dh = static_cast<double>(h) - ch;
                    const double dw = static_cast<double>(w) - cw;
                    if (dd * dd + dh * dh + dw * dw <= r * r) m.data[m.index(d, h, w)] = 1;
                }
    }
    return m;
}

inline std::size_t oracle_count(const BinaryMask& m) {
    std::size_t n = 0;
    for (auto v : m.data) n += (v != 0);
    return n;
}

inline double oracle_dice(const BinaryMask& x, const BinaryMask& y) {
    std::size_t nx = 0, ny = 0, both = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const bool a = x.data[i] != 0, b = y.data[i] != 0;
        nx += a;
        ny += b;
        both += (a && b);
    }
    if (nx + ny == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

struct OraclePoint {
    double d, h, w;  // physical (mm)
};

/// Foreground voxels with a 6-neighbor that is background or outside.
inline std::vector<OraclePoint> oracle_surface(const BinaryMask& m, const Vec3& sp) {
    std::vector<OraclePoint> pts;
    const auto bg = [&](std::ptrdiff_t d, std::ptrdiff_t h, std::ptrdiff_t w) {
        if (d < 0 || h < 0 || w < 0 || d >= static_cast<std::ptrdiff_t>(m.dims.d) ||
            h >= static_cast<std::ptrdiff_t>(m.dims.h) ||
            w >= static_cast<std::ptrdiff_t>(m.dims.w))
            return true;
        return m.data[m.index(static_cast<std::size_t>(d), static_cast<std::size_t>(h),
                              static_cast<std::size_t>(w))] == 0;
    };
    for (std::size_t d = 0; d < m.dims.d; ++d)
        for (std::size_t h = 0; h < m.dims.h; ++h)
            for (std::size_t w = 0; w < m.dims.w; ++w) {
                if (m.data[m.index(d, h, w)] == 0) continue;
                const auto sd = static_cast<std::ptrdiff_t>(d);
                const auto sh = static_cast<std::ptrdiff_t>(h);
                const auto sw = static_cast<std::ptrdiff_t>(w);
                if (bg(sd - 1, sh, sw) || bg(sd + 1, sh, sw) || bg(sd, sh - 1, sw) ||
                    bg(sd, sh + 1, sw) || bg(sd, sh, sw - 1) || bg(sd, sh, sw + 1)) {
                    pts.push_back({static_cast<double>(d) * sp[0],
                                   static_cast<double>(h) * sp[1],
                                   static_cast<double>(w) * sp[2]});
                }
            }
    return pts;
}

inline double point_dist(const OraclePoint& a, const OraclePoint& b) {
    const double dd = a.d - b.d, dh = a.h - b.h, dw = a.w - b.w;
    return std::sqrt(dd * dd + dh * dh + dw * dw);
}

/// Directed nearest-surface distances from every point of `from` to `to`.
inline std::vector<double> oracle_directed(const std::vector<OraclePoint>& from,
                                           const std::vector<OraclePoint>& to) {
    std::vector<double> out;
    out.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) best = std::min(best, point_dist(p, q));
        out.push_back(best);
    }
    return out;
}

inline double oracle_msd(const BinaryMask& x, const BinaryMask& y, const Vec3& sp) {
    const auto sx = oracle_surface(x, sp), sy = oracle_surface(y, sp);
    const auto dxy = oracle_directed(sx, sy), dyx = oracle_directed(sy, sx);
    double sum = 0;
    for (double v : dxy) sum += v;
    for (double v : dyx) sum += v;
    return sum / static_cast<double>(dxy.size() + dyx.size());
}

/// Nearest-rank 95th percentile of the union of both directed multisets.
inline double oracle_hd95(const BinaryMask& x, const BinaryMask& y, const Vec3& sp) {
    const auto sx = oracle_surface(x, sp), sy = oracle_surface(y, sp);
    auto all = oracle_directed(sx, sy);
    const auto dyx = oracle_directed(sy, sx);
    all.insert(all.end(), dyx.begin(), dyx.end());
    std::sort(all.begin(), all.end());
    const std::size_t n = all.size();
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(n)));
    return all[std::max<std::size_t>(k, 1) - 1];
}

inline double oracle_hd_max(const BinaryMask& x, const BinaryMask& y, const Vec3& sp) {
    const auto sx = oracle_surface(x, sp), sy = oracle_surface(y, sp);
    double best = 0;
    for (double v : oracle_directed(sx, sy)) best = std::max(best, v);
    for (double v : oracle_directed(sy, sx)) best = std::max(best, v);
    return best;
}

/// Per-voxel distance to the nearest surface voxel center, brute force.
inline std::vector<double> oracle_distance_grid(const BinaryMask& m, const Vec3& sp) {
    const auto surf = oracle_surface(m, sp);
    std::vector<double> out(m.dims.voxels());
    for (std::size_t d = 0; d < m.dims.d; ++d)
        for (std::size_t h = 0; h < m.dims.h; ++h)
            for (std::size_t w = 0; w < m.dims.w; ++w) {
                const OraclePoint p{static_cast<double>(d) * sp[0],
                                    static_cast<double>(h) * sp[1],
                                    static_cast<double>(w) * sp[2]};
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : surf) best = std::min(best, point_dist(p, q));
                out[m.index(d, h, w)] = best;
            }
    return out;
}

inline double clampd(double v, double lo, double hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

/// Textbook trilinear lookup with clamp-to-edge, voxel coordinates.
inline float oracle_trilinear(const ImageVolume& v, double pd, double ph, double pw) {
    const auto cl = [](std::ptrdiff_t i, std::size_t n) {
        if (i < 0) return std::size_t{0};
        if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
        return static_cast<std::size_t>(i);
    };
    const double fd = std::floor(pd), fh = std::floor(ph), fw = std::floor(pw);
    const double td = pd - fd, th = ph - fh, tw = pw - fw;
    double acc = 0;
    for (int bd = 0; bd <= 1; ++bd)
        for (int bh = 0; bh <= 1; ++bh)
            for (int bw = 0; bw <= 1; ++bw) {
                const std::size_t d = cl(static_cast<std::ptrdiff_t>(fd) + bd, v.dims.d);
                const std::size_t h = cl(static_cast<std::ptrdiff_t>(fh) + bh, v.dims.h);
                const std::size_t w = cl(static_cast<std::ptrdiff_t>(fw) + bw, v.dims.w);
                const double wt = (bd ? td : 1 - td) * (bh ? th : 1 - th) * (bw ? tw : 1 - tw);
                acc += wt * v.data[v.index(d, h, w)];
            }
    return static_cast<float>(acc);
}

inline std::uint8_t oracle_nearest(const LabelVolume& v, double pd, double ph, double pw) {
    const auto cl = [](double c, std::size_t n) {
        const auto i = static_cast<std::ptrdiff_t>(std::floor(c + 0.5));
        if (i < 0) return std::size_t{0};
        if (i >= static_cast<std::ptrdiff_t>(n)) return n - 1;
        return static_cast<std::size_t>(i);
    };
    return v.data[v.index(cl(pd, v.dims.d), cl(ph, v.dims.h), cl(pw, v.dims.w))];
}

// ------------------------------------------------------- gradient checking

/// Central finite differences on a scalar function of one tensor coordinate.
/// Pass rule: |analytic - numeric| <= tol * max(1, |analytic| + |numeric|).
struct GradCheck {
    double tol = 1e-6;
    double worst_rel = 0.0;

    bool check(double analytic, double numeric) {
        const double denom = std::max(1.0, std::abs(analytic) + std::abs(numeric));
        const double rel = std::abs(analytic - numeric) / denom;
        worst_rel = std::max(worst_rel, rel);
        return rel <= tol;
    }
};

/// Weighted-sum loss over an op output makes any op's gradient scalar-valued.
/// `build` must construct the graph from scratch on every call so forward
/// values reflect the perturbed input.
inline bool fd_check_tensor(
    liverformer::ad::Tensor<double>& input,
    const std::function<liverformer::ad::Tensor<double>()>& build_loss, GradCheck& gc,
    std::size_t max_coords = SIZE_MAX, Rng* coord_rng = nullptr) {
    using liverformer::ad::backward;
    using liverformer::ad::Tensor;

    Tensor<double> loss = build_loss();
    backward(loss);
    std::vector<double> analytic = input.grad();
    input.zero_grad();

    std::vector<std::size_t> coords(input.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coords && coord_rng) {
        coord_rng->shuffle(coords);
        coords.resize(max_coords);
    }

    bool ok = true;
    for (const std::size_t i : coords) {
        const double x0 = input.value()[i];
        const double h = 1e-4 * std::max(1.0, std::abs(x0));
        input.value()[i] = x0 + h;
        const double up = build_loss().value()[0];
        input.value()[i] = x0 - h;
        const double dn = build_loss().value()[0];
        input.value()[i] = x0;
        ok = gc.check(analytic[i], (up - dn) / (2.0 * h)) && ok;
    }
    return ok;
}

}  // namespace testsupport
