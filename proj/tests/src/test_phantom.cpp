#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include <doctest.h>

#include "liverformer/phantom.hpp"
#include "support.hpp"

using namespace liverformer;

namespace {

int component_count(const LabelVolume& lab, int cls) {
    const Dims dm = lab.dims;
    std::vector<std::uint8_t> seen(dm.voxels(), 0);
    int comps = 0;
    for (std::size_t start = 0; start < dm.voxels(); ++start) {
        if (lab.data[start] != cls || seen[start]) continue;
        ++comps;
        std::queue<std::size_t> q;
        q.push(start);
        seen[start] = 1;
        while (!q.empty()) {
            const std::size_t i = q.front();
            q.pop();
            const std::size_t w = i % dm.w;
            const std::size_t h = (i / dm.w) % dm.h;
            const std::size_t d = i / (dm.w * dm.h);
            const long nb[6][3] = {{(long)d - 1, (long)h, (long)w},
                                   {(long)d + 1, (long)h, (long)w},
                                   {(long)d, (long)h - 1, (long)w},
                                   {(long)d, (long)h + 1, (long)w},
                                   {(long)d, (long)h, (long)w - 1},
                                   {(long)d, (long)h, (long)w + 1}};
            for (const auto& nn : nb) {
                if (nn[0] < 0 || nn[1] < 0 || nn[2] < 0 || nn[0] >= (long)dm.d ||
                    nn[1] >= (long)dm.h || nn[2] >= (long)dm.w) {
                    continue;
                }
                const std::size_t j =
                    ((std::size_t)nn[0] * dm.h + (std::size_t)nn[1]) * dm.w +
                    (std::size_t)nn[2];
                if (seen[j] || lab.data[j] != cls) continue;
                seen[j] = 1;
                q.push(j);
            }
        }
    }
    return comps;
}

std::vector<std::uint8_t> dilate6(const std::vector<std::uint8_t>& mask, Dims dm,
                                  int rounds) {
    std::vector<std::uint8_t> cur = mask;
    for (int r = 0; r < rounds; ++r) {
        std::vector<std::uint8_t> nx = cur;
        for (std::size_t d = 0; d < dm.d; ++d)
            for (std::size_t h = 0; h < dm.h; ++h)
                for (std::size_t w = 0; w < dm.w; ++w) {
                    const std::size_t i = (d * dm.h + h) * dm.w + w;
                    if (!cur[i]) continue;
                    if (d > 0) nx[i - dm.h * dm.w] = 1;
                    if (d + 1 < dm.d) nx[i + dm.h * dm.w] = 1;
                    if (h > 0) nx[i - dm.w] = 1;
                    if (h + 1 < dm.h) nx[i + dm.w] = 1;
                    if (w > 0) nx[i - 1] = 1;
                    if (w + 1 < dm.w) nx[i + 1] = 1;
                }
        cur.swap(nx);
    }
    return cur;
}

// Interior of each segment: voxels whose 6-neighborhood stays in the same
// class, applied `rounds` times. Keeps the samples away from partial-volume
// boundaries.
std::vector<std::uint8_t> same_class_interior(const LabelVolume& lab, int rounds) {
    const Dims dm = lab.dims;
    std::vector<std::uint8_t> in(dm.voxels(), 1);
    for (int r = 0; r < rounds; ++r) {
        std::vector<std::uint8_t> nx(dm.voxels(), 0);
        for (std::size_t d = 1; d + 1 < dm.d; ++d)
            for (std::size_t h = 1; h + 1 < dm.h; ++h)
                for (std::size_t w = 1; w + 1 < dm.w; ++w) {
                    const std::size_t i = lab.index(d, h, w);
                    if (!in[i]) continue;
                    const int c = lab.data[i];
                    if (lab.at(d - 1, h, w) == c && lab.at(d + 1, h, w) == c &&
                        lab.at(d, h - 1, w) == c && lab.at(d, h + 1, w) == c &&
                        lab.at(d, h, w - 1) == c && lab.at(d, h, w + 1) == c &&
                        in[i - dm.h * dm.w] && in[i + dm.h * dm.w] && in[i - dm.w] &&
                        in[i + dm.w] && in[i - 1] && in[i + 1]) {
                        nx[i] = 1;
                    }
                }
        in.swap(nx);
    }
    return in;
}

}  // namespace

TEST_CASE("phantom generation is a pure function of config and seed") {
    const PhantomConfig cfg;
    VoxelGrid<std::uint8_t> va, vb;
    const LabeledCase a = generate_phantom(cfg, 7, &va);
    const LabeledCase b = generate_phantom(cfg, 7, &vb);
    CHECK(a.id == "phantom_7");
    CHECK(a.image.data == b.image.data);
    CHECK(a.labels.data == b.labels.data);
    CHECK(va.data == vb.data);
    CHECK(a.provenance.kind == Provenance::Kind::Original);
}

TEST_CASE("different seeds give different geometry and intensities") {
    const PhantomConfig cfg;
    const LabeledCase a = generate_phantom(cfg, 0);
    const LabeledCase b = generate_phantom(cfg, 1);

    std::size_t label_diffs = 0;
    for (std::size_t i = 0; i < a.labels.data.size(); ++i) {
        label_diffs += (a.labels.data[i] != b.labels.data[i]);
    }
    CHECK(label_diffs > 100);  // the warp must actually move boundaries
    CHECK(a.image.data != b.image.data);
}

TEST_CASE("all nine segments are present with non-trivial volume") {
    const PhantomConfig cfg;
    for (std::uint64_t seed : {0, 1, 2}) {
        const LabeledCase c = generate_phantom(cfg, seed);
        std::array<std::size_t, 10> count{};
        for (std::uint8_t v : c.labels.data) count[v]++;
        std::size_t fg = 0;
        for (int k = 1; k <= 9; ++k) fg += count[k];
        REQUIRE(fg > 0);
        for (int k = 1; k <= 9; ++k) {
            INFO("seed ", seed, " segment ", couinaud_segment_name(k));
            CHECK(count[k] >= fg / 100);
        }
    }
}

TEST_CASE("each segment is one 6-connected component") {
    const PhantomConfig cfg;
    for (std::uint64_t seed : {0, 1, 2, 3}) {
        const LabeledCase c = generate_phantom(cfg, seed);
        for (int cls = 1; cls <= 9; ++cls) {
            INFO("seed ", seed, " segment ", couinaud_segment_name(cls));
            CHECK(component_count(c.labels, cls) == 1);
        }
    }
}

TEST_CASE("segment intensities are indistinguishable, pooled over seeds") {
    // Labels must be recoverable from geometry only. Pool parenchyma voxels
    // (vessel mask dilated by 1 excluded, interior eroded by 1) over five
    // seeds and require every pairwise segment-mean difference to stay
    // under a tenth of the pooled standard deviation. Margin at the time
    // this was pinned: max diff 0.0021 against a 0.0034 budget.
    const PhantomConfig cfg;
    double sum[10] = {0}, sum2[10] = {0};
    std::size_t n[10] = {0};
    double all_sum = 0, all_sum2 = 0;
    std::size_t all_n = 0;

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        VoxelGrid<std::uint8_t> vmask;
        const LabeledCase c = generate_phantom(cfg, seed, &vmask);
        const std::vector<std::uint8_t> excl = dilate6(vmask.data, c.labels.dims, 1);
        const std::vector<std::uint8_t> in = same_class_interior(c.labels, 1);
        for (std::size_t i = 0; i < c.labels.data.size(); ++i) {
            const int cls = c.labels.data[i];
            if (cls == 0 || excl[i] || !in[i]) continue;
            const double v = c.image.data[i];
            sum[cls] += v;
            sum2[cls] += v * v;
            n[cls]++;
            all_sum += v;
            all_sum2 += v * v;
            all_n++;
        }
    }

    REQUIRE(all_n > 1000);
    const double mean_all = all_sum / static_cast<double>(all_n);
    const double var_all =
        all_sum2 / static_cast<double>(all_n) - mean_all * mean_all;
    const double budget = 0.1 * std::sqrt(var_all);

    double max_diff = 0.0;
    for (int a = 1; a <= 9; ++a) {
        REQUIRE(n[a] > 50);
        for (int b = a + 1; b <= 9; ++b) {
            const double diff = std::abs(sum[a] / static_cast<double>(n[a]) -
                                         sum[b] / static_cast<double>(n[b]));
            max_diff = std::max(max_diff, diff);
        }
    }
    INFO("max pairwise mean diff ", max_diff, ", budget ", budget);
    CHECK(max_diff <= budget);
}

TEST_CASE("no segment pair separates across seeds at the 99.5 percent level") {
    // Per-seed interior means are the samples: sixteen seeds, vessel mask
    // dilated by 1 excluded, interior eroded by 2, two-sample t for each of
    // the 36 segment pairs. Critical value 2.750 is t(30) at 0.995; the
    // statistic measured 1.44 when this threshold was pinned.
    const int S = 16;
    const PhantomConfig cfg;
    std::vector<std::array<double, 10>> seed_mean(S);

    for (int s = 0; s < S; ++s) {
        VoxelGrid<std::uint8_t> vmask;
        const LabeledCase c = generate_phantom(cfg, static_cast<std::uint64_t>(s), &vmask);
        const std::vector<std::uint8_t> excl = dilate6(vmask.data, c.labels.dims, 1);
        const std::vector<std::uint8_t> in = same_class_interior(c.labels, 2);
        double sum[10] = {0};
        std::size_t n[10] = {0};
        for (std::size_t i = 0; i < c.labels.data.size(); ++i) {
            const int cls = c.labels.data[i];
            if (cls == 0 || excl[i] || !in[i]) continue;
            sum[cls] += c.image.data[i];
            n[cls]++;
        }
        for (int cls = 1; cls <= 9; ++cls) {
            REQUIRE(n[cls] > 10);
            seed_mean[s][cls] = sum[cls] / static_cast<double>(n[cls]);
        }
    }

    double max_t = 0.0;
    for (int a = 1; a <= 9; ++a) {
        for (int b = a + 1; b <= 9; ++b) {
            double ma = 0, mb = 0;
            for (int s = 0; s < S; ++s) {
                ma += seed_mean[s][a];
                mb += seed_mean[s][b];
            }
            ma /= S;
            mb /= S;
            double va = 0, vb = 0;
            for (int s = 0; s < S; ++s) {
                va += (seed_mean[s][a] - ma) * (seed_mean[s][a] - ma);
                vb += (seed_mean[s][b] - mb) * (seed_mean[s][b] - mb);
            }
            va /= (S - 1);
            vb /= (S - 1);
            const double t = std::abs(ma - mb) / std::sqrt(va / S + vb / S);
            max_t = std::max(max_t, t);
        }
    }
    INFO("max |t| over segment pairs ", max_t);
    CHECK(max_t <= 2.750);
}

TEST_CASE("vessel mask marks bright tubes inside the liver") {
    const PhantomConfig cfg;
    VoxelGrid<std::uint8_t> vmask;
    const LabeledCase c = generate_phantom(cfg, 4, &vmask);
    REQUIRE(vmask.dims == c.labels.dims);

    std::size_t count = 0, on_liver = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < vmask.data.size(); ++i) {
        if (!vmask.data[i]) continue;
        count++;
        sum += c.image.data[i];
        on_liver += (c.labels.data[i] != 0);
    }
    REQUIRE(count > 0);
    CHECK(sum / static_cast<double>(count) > cfg.segment_intensity_mean);
    CHECK(on_liver * 10 >= count * 9);  // tubes live on the segment geometry
}

TEST_CASE("background stays dark") {
    const PhantomConfig cfg;
    VoxelGrid<std::uint8_t> vmask;
    const LabeledCase c = generate_phantom(cfg, 2, &vmask);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.labels.data.size(); ++i) {
        if (c.labels.data[i] != 0 || vmask.data[i]) continue;
        sum += c.image.data[i];
        n++;
    }
    REQUIRE(n > 0);
    CHECK(sum / static_cast<double>(n) < cfg.background_intensity + 0.1);
}

TEST_CASE("generate_dataset numbers its cases from the base seed") {
    const PhantomConfig cfg;
    const auto cases = generate_dataset(3, cfg, 5);
    REQUIRE(cases.size() == 3);
    CHECK(cases[0].id == "phantom_5");
    CHECK(cases[1].id == "phantom_6");
    CHECK(cases[2].id == "phantom_7");

    const LabeledCase direct = generate_phantom(cfg, 6);
    CHECK(cases[1].image.data == direct.image.data);
    CHECK(cases[1].labels.data == direct.labels.data);
}

TEST_CASE("config validation and degenerate geometry") {
    PhantomConfig cfg;

    SUBCASE("semi-axes out of range") {
        cfg.semi_axes = {0.0, 0.42, 0.44};
        CHECK_THROWS_AS(cfg.validate(), PhantomError);
        cfg.semi_axes = {0.6, 0.42, 0.44};
        CHECK_THROWS_AS(cfg.validate(), PhantomError);
    }
    SUBCASE("negative noise") {
        cfg.noise_std = -0.1;
        CHECK_THROWS_AS(cfg.validate(), PhantomError);
    }
    SUBCASE("warp without smoothing") {
        cfg.warp_smoothing = 0.0;
        CHECK_THROWS_AS(cfg.validate(), PhantomError);
    }
    SUBCASE("an ellipsoid too small to hold nine segments") {
        cfg.semi_axes = {0.02, 0.02, 0.02};
        CHECK_THROWS_AS(generate_phantom(cfg, 0), DegenerateGeometry);
    }
}
