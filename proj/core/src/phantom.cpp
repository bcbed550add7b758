#include "liverformer/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "liverformer/field.hpp"
#include "liverformer/rng.hpp"

namespace liverformer {

void PhantomConfig::validate() const {
    if (dims.voxels() == 0) throw PhantomError("phantom: empty dims");
    for (int i = 0; i < 3; ++i) {
        if (!(semi_axes[i] > 0.0) || semi_axes[i] > 0.5) {
            throw PhantomError("phantom: semi_axes must be in (0, 0.5]");
        }
        if (!(spacing[i] > 0.0)) throw PhantomError("phantom: non-positive spacing");
    }
    if (segment_intensity_std < 0.0 || noise_std < 0.0 || vessel_radius < 0.0 ||
        warp_magnitude < 0.0) {
        throw PhantomError("phantom: negative std, radius, or warp magnitude");
    }
    if (warp_magnitude > 0.0 && !(warp_smoothing > 0.0)) {
        throw PhantomError("phantom: warp needs positive smoothing sigma");
    }
}

namespace {

struct UnitPlane {
    std::array<double, 3> normal;  // unit length, (d, h, w)
    double offset;
};

UnitPlane normalize_plane(const PlaneSpec& p) {
    const double len = std::sqrt(p.normal[0] * p.normal[0] + p.normal[1] * p.normal[1] +
                                 p.normal[2] * p.normal[2]);
    if (!(len > 0.0)) throw PhantomError("phantom: zero-length plane normal");
    return {{p.normal[0] / len, p.normal[1] / len, p.normal[2] / len}, p.offset};
}

double signed_dist(const UnitPlane& p, const std::array<double, 3>& u) {
    return p.normal[0] * u[0] + p.normal[1] * u[1] + p.normal[2] * u[2] - p.offset;
}

// d1 picks the left-lateral pair, d2 the middle column, d3
// anterior/posterior, q superior/inferior. The nine cells of this decision
// tree are exactly the nine segment labels.
std::uint8_t segment_label(double d1, double d2, double d3, double q) {
    if (d1 < 0.0) return q < 0.0 ? 2 : 3;                   // II : III
    if (d2 < 0.0) {
        if (d3 < 0.0) return 1;                             // I
        return q < 0.0 ? 4 : 5;                             // IVa : IVb
    }
    if (d3 < 0.0) return q < 0.0 ? 8 : 7;                   // VII : VI
    return q < 0.0 ? 9 : 6;                                 // VIII : V
}

struct Geometry {
    Dims dims;
    Vec3 semi_axes;
    UnitPlane p1, p2, p3, ax;

    std::array<double, 3> to_unit(double d, double h, double w) const {
        return {(d + 0.5) / static_cast<double>(dims.d) - 0.5,
                (h + 0.5) / static_cast<double>(dims.h) - 0.5,
                (w + 0.5) / static_cast<double>(dims.w) - 0.5};
    }

    bool inside(const std::array<double, 3>& u) const {
        const double e0 = u[0] / semi_axes[0];
        const double e1 = u[1] / semi_axes[1];
        const double e2 = u[2] / semi_axes[2];
        return e0 * e0 + e1 * e1 + e2 * e2 <= 1.0;
    }
};

LabelVolume base_labels(const Geometry& g, Vec3 spacing) {
    LabelVolume labels(g.dims, spacing);
    for (std::size_t d = 0; d < g.dims.d; ++d) {
        for (std::size_t h = 0; h < g.dims.h; ++h) {
            for (std::size_t w = 0; w < g.dims.w; ++w) {
                const auto u = g.to_unit(static_cast<double>(d), static_cast<double>(h),
                                         static_cast<double>(w));
                if (!g.inside(u)) continue;
                labels.at(d, h, w) =
                    segment_label(signed_dist(g.p1, u), signed_dist(g.p2, u),
                                  signed_dist(g.p3, u), signed_dist(g.ax, u));
            }
        }
    }
    return labels;
}

void require_all_segments(const LabelVolume& labels, const char* stage) {
    std::array<std::size_t, kNumClasses> counts{};
    for (std::uint8_t v : labels.data) ++counts[v];
    for (int c = 1; c <= kMaxLabel; ++c) {
        if (counts[c] == 0) {
            throw DegenerateGeometry(std::string("phantom: segment ") +
                                     couinaud_segment_name(c) + " empty " + stage);
        }
    }
}

// Stamps a tube of the given voxel radius along the closed curve where the
// plane meets the ellipsoid surface. Work happens in sphere space (u divided
// by the semi-axes) where the curve is an exact circle.
void stamp_vessel_ring(const Geometry& g, const UnitPlane& plane,
                       double radius_vox, std::vector<std::uint8_t>& vessel,
                       const LabelVolume& labels) {
    std::array<double, 3> m = {plane.normal[0] * g.semi_axes[0],
                               plane.normal[1] * g.semi_axes[1],
                               plane.normal[2] * g.semi_axes[2]};
    const double mlen = std::sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2]);
    if (!(mlen > 0.0)) return;
    for (auto& v : m) v /= mlen;
    const double rho = plane.offset / mlen;
    if (std::abs(rho) >= 1.0) return;  // plane misses the ellipsoid: no landmark
    const double rc = std::sqrt(1.0 - rho * rho);

    // Orthonormal basis spanning the circle's plane.
    std::array<double, 3> ref = std::abs(m[0]) < 0.9 ? std::array<double, 3>{1, 0, 0}
                                                     : std::array<double, 3>{0, 1, 0};
    std::array<double, 3> e1 = {m[1] * ref[2] - m[2] * ref[1],
                                m[2] * ref[0] - m[0] * ref[2],
                                m[0] * ref[1] - m[1] * ref[0]};
    const double e1len = std::sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]);
    for (auto& v : e1) v /= e1len;
    std::array<double, 3> e2 = {m[1] * e1[2] - m[2] * e1[1],
                                m[2] * e1[0] - m[0] * e1[2],
                                m[0] * e1[1] - m[1] * e1[0]};

    const int samples = 720;
    const double two_pi = 6.283185307179586476925286766559;
    const int reach = static_cast<int>(std::ceil(radius_vox));
    const std::array<double, 3> extent = {static_cast<double>(g.dims.d),
                                          static_cast<double>(g.dims.h),
                                          static_cast<double>(g.dims.w)};
    for (int s = 0; s < samples; ++s) {
        const double th = two_pi * static_cast<double>(s) / samples;
        std::array<double, 3> pos;  // continuous voxel coordinates
        for (int i = 0; i < 3; ++i) {
            const double y = rho * m[i] + rc * (std::cos(th) * e1[i] + std::sin(th) * e2[i]);
            pos[i] = (y * g.semi_axes[i] + 0.5) * extent[i] - 0.5;
        }
        const int d0 = static_cast<int>(std::floor(pos[0])) - reach;
        const int h0 = static_cast<int>(std::floor(pos[1])) - reach;
        const int w0 = static_cast<int>(std::floor(pos[2])) - reach;
        for (int d = d0; d <= d0 + 2 * reach + 1; ++d) {
            if (d < 0 || d >= static_cast<int>(g.dims.d)) continue;
            for (int h = h0; h <= h0 + 2 * reach + 1; ++h) {
                if (h < 0 || h >= static_cast<int>(g.dims.h)) continue;
                for (int w = w0; w <= w0 + 2 * reach + 1; ++w) {
                    if (w < 0 || w >= static_cast<int>(g.dims.w)) continue;
                    const double dd = d - pos[0], dh = h - pos[1], dw = w - pos[2];
                    if (dd * dd + dh * dh + dw * dw > radius_vox * radius_vox) continue;
                    const std::size_t idx =
                        labels.index(static_cast<std::size_t>(d), static_cast<std::size_t>(h),
                                     static_cast<std::size_t>(w));
                    if (labels.data[idx] == 0) continue;  // tubes stay inside the organ
                    vessel[idx] = 1;
                }
            }
        }
    }
}

// Nearest-neighbor label pullback can strand satellite voxels at jagged
// boundaries even though the continuous deformation is bijective. Reassign
// every voxel outside its class's largest 6-connected component to the
// majority label among its 6 neighbors (own class excluded, smallest label
// wins ties) until each class is a single component again.
void absorb_satellites(LabelVolume& labels) {
    const Dims dims = labels.dims;
    const std::size_t n = dims.voxels();
    const std::size_t sd = dims.h * dims.w, sh = dims.w;
    std::vector<std::uint32_t> comp(n);
    std::vector<std::size_t> stack;

    for (int pass = 0; pass < 32; ++pass) {
        std::fill(comp.begin(), comp.end(), 0u);
        std::uint32_t next_id = 0;
        std::vector<std::size_t> comp_size;
        std::vector<std::uint8_t> comp_class;
        for (std::size_t start = 0; start < n; ++start) {
            if (labels.data[start] == 0 || comp[start] != 0) continue;
            const std::uint8_t cls = labels.data[start];
            ++next_id;
            comp[start] = next_id;
            std::size_t size = 0;
            stack.assign(1, start);
            while (!stack.empty()) {
                const std::size_t i = stack.back();
                stack.pop_back();
                ++size;
                const std::size_t d = i / sd, h = (i / sh) % dims.h, w = i % dims.w;
                const std::array<std::size_t, 6> nb = {
                    d > 0 ? i - sd : i,          d + 1 < dims.d ? i + sd : i,
                    h > 0 ? i - sh : i,          h + 1 < dims.h ? i + sh : i,
                    w > 0 ? i - 1 : i,           w + 1 < dims.w ? i + 1 : i};
                for (const std::size_t j : nb) {
                    if (j == i || comp[j] != 0 || labels.data[j] != cls) continue;
                    comp[j] = next_id;
                    stack.push_back(j);
                }
            }
            comp_size.push_back(size);
            comp_class.push_back(cls);
        }

        std::array<std::uint32_t, kNumClasses> keep{};
        std::array<std::size_t, kNumClasses> keep_size{};
        for (std::uint32_t id = 1; id <= next_id; ++id) {
            const std::uint8_t cls = comp_class[id - 1];
            if (comp_size[id - 1] > keep_size[cls]) {
                keep_size[cls] = comp_size[id - 1];
                keep[cls] = id;
            }
        }

        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint8_t cls = labels.data[i];
            if (cls == 0 || comp[i] == keep[cls]) continue;
            const std::size_t d = i / sd, h = (i / sh) % dims.h, w = i % dims.w;
            std::array<std::size_t, kNumClasses> votes{};
            if (d > 0) ++votes[labels.data[i - sd]];
            if (d + 1 < dims.d) ++votes[labels.data[i + sd]];
            if (h > 0) ++votes[labels.data[i - sh]];
            if (h + 1 < dims.h) ++votes[labels.data[i + sh]];
            if (w > 0) ++votes[labels.data[i - 1]];
            if (w + 1 < dims.w) ++votes[labels.data[i + 1]];
            votes[cls] = 0;
            std::size_t best = 0;
            for (std::size_t c = 1; c < kNumClasses; ++c) {
                if (votes[c] > votes[best]) best = c;
            }
            if (votes[best] == 0) continue;  // buried inside its fragment; next pass
            labels.data[i] = static_cast<std::uint8_t>(best);
            changed = true;
        }
        if (!changed) return;
    }
    throw PhantomError("phantom: segment fragments persisted after warp cleanup");
}

}  // namespace

LabeledCase generate_phantom(const PhantomConfig& cfg, std::uint64_t seed,
                             VoxelGrid<std::uint8_t>* vessel_mask) {
    cfg.validate();
    Geometry g{cfg.dims, cfg.semi_axes, normalize_plane(cfg.plane1),
               normalize_plane(cfg.plane2), normalize_plane(cfg.plane3),
               normalize_plane(cfg.axial)};

    LabelVolume labels = base_labels(g, cfg.spacing);
    require_all_segments(labels, "before warp");

    Rng rng(seed);
    const std::size_t n = cfg.dims.voxels();

    // Parenchyma: one shared distribution for every segment, so intensity
    // carries no segment information. Each segment's draws are re-centered
    // to the exact target mean; without this, finite-sample drift of order
    // std/sqrt(n) would leave small per-segment mean offsets, and the
    // construction promises equality, not just equality in expectation.
    ImageVolume image(cfg.dims, cfg.spacing, static_cast<float>(cfg.background_intensity));
    {
        std::array<double, kNumClasses> sum{};
        std::array<std::size_t, kNumClasses> cnt{};
        std::vector<double> draw(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (labels.data[i] == 0) continue;
            draw[i] = rng.normal(cfg.segment_intensity_mean, cfg.segment_intensity_std);
            sum[labels.data[i]] += draw[i];
            ++cnt[labels.data[i]];
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint8_t c = labels.data[i];
            if (c == 0) continue;
            const double shift = cfg.segment_intensity_mean - sum[c] / cnt[c];
            image.data[i] = static_cast<float>(std::clamp(draw[i] + shift, 0.0, 1.0));
        }
    }

    std::vector<std::uint8_t> vessel(n, 0);
    if (cfg.vessel_radius > 0.0) {
        stamp_vessel_ring(g, g.p1, cfg.vessel_radius, vessel, labels);
        stamp_vessel_ring(g, g.p2, cfg.vessel_radius, vessel, labels);
        stamp_vessel_ring(g, g.p3, cfg.vessel_radius, vessel, labels);
        stamp_vessel_ring(g, g.ax, cfg.vessel_radius, vessel, labels);
        for (std::size_t i = 0; i < n; ++i) {
            if (vessel[i]) image.data[i] = static_cast<float>(cfg.vessel_intensity);
        }
    }

    LabelVolume vessel_labels(cfg.dims, cfg.spacing);
    vessel_labels.data = vessel;

    if (cfg.warp_magnitude > 0.0) {
        // Random smooth deformation built from a few global sine modes.
        // Smoothed white noise does not work here: rescaling by the global
        // peak leaves the field near zero almost everywhere, so the labels
        // never actually move. Global modes keep the typical displacement a
        // healthy fraction of the peak. Frequencies are capped so no mode is
        // narrower than about 4 * warp_smoothing voxels.
        VelocityField vel(cfg.dims);
        const std::array<std::size_t, 3> extent{cfg.dims.d, cfg.dims.h, cfg.dims.w};
        std::array<std::uint64_t, 3> max_freq{};
        for (int a = 0; a < 3; ++a) {
            const double cap =
                static_cast<double>(extent[a]) / (4.0 * cfg.warp_smoothing);
            max_freq[a] = std::clamp<std::uint64_t>(
                static_cast<std::uint64_t>(cap), 1, 3);
        }
        constexpr int kModes = 3;
        constexpr double kTwoPi = 2.0 * std::numbers::pi;
        for (auto& compv : vel.comp) {
            for (int m = 0; m < kModes; ++m) {
                const double amp = rng.normal();
                std::array<double, 3> omega{}, phase{};
                for (int a = 0; a < 3; ++a) {
                    const double f = 1.0 + static_cast<double>(rng.index(max_freq[a]));
                    omega[a] = kTwoPi * f / static_cast<double>(extent[a]);
                    phase[a] = rng.uniform(0.0, kTwoPi);
                }
                std::size_t i = 0;
                for (std::size_t d = 0; d < cfg.dims.d; ++d) {
                    const double sd = std::sin(omega[0] * (static_cast<double>(d) + 0.5) +
                                               phase[0]);
                    for (std::size_t h = 0; h < cfg.dims.h; ++h) {
                        const double sdh =
                            sd * std::sin(omega[1] * (static_cast<double>(h) + 0.5) +
                                          phase[1]);
                        for (std::size_t w = 0; w < cfg.dims.w; ++w, ++i) {
                            const double sw =
                                std::sin(omega[2] * (static_cast<double>(w) + 0.5) +
                                         phase[2]);
                            compv[i] += static_cast<float>(amp * sdh * sw);
                        }
                    }
                }
            }
        }
        const float peak = vel.max_abs();
        if (peak > 0.0f) {
            const float scale = static_cast<float>(cfg.warp_magnitude) / peak;
            for (auto& compv : vel.comp) {
                for (auto& v : compv) v *= scale;
            }
        }
        const DisplacementField u = exp_velocity(vel);
        image = warp_image(image, u);
        labels = warp_labels(labels, u);
        absorb_satellites(labels);
        vessel_labels = warp_labels(vessel_labels, u);
        require_all_segments(labels, "after warp");
    }

    if (cfg.noise_std > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            const double v = image.data[i] + rng.normal(0.0, cfg.noise_std);
            image.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    if (vessel_mask) {
        VoxelGrid<std::uint8_t> mask(cfg.dims, cfg.spacing);
        mask.data = vessel_labels.data;
        *vessel_mask = std::move(mask);
    }

    LabeledCase out;
    out.id = "phantom_" + std::to_string(seed);
    out.image = std::move(image);
    out.labels = std::move(labels);
    return out;
}

std::vector<LabeledCase> generate_dataset(std::size_t n, const PhantomConfig& cfg,
                                          std::uint64_t base_seed) {
    std::vector<LabeledCase> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(generate_phantom(cfg, base_seed + i));
    }
    return out;
}

}  // namespace liverformer
