// metrics.hpp — overlap and surface-distance metrics for segmentations,
// the per-class report, and the paired t-test used for method comparisons.
//
// Surfaces are voxel centers of foreground voxels that touch background (or
// the volume edge) through a 6-connected face. Distances are Euclidean
// between voxel centers, in mm via the grid spacing. HD95 uses the
// nearest-rank 95th percentile over the union of both directed
// nearest-surface distance multisets.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "liverformer/volume.hpp"

namespace liverformer {

struct MetricsError : VolumeError {
    using VolumeError::VolumeError;
};
struct EmptyMask : MetricsError {
    using MetricsError::MetricsError;
};
struct EmptyReference : MetricsError {
    using MetricsError::MetricsError;
};
struct LengthMismatch : MetricsError {
    using MetricsError::MetricsError;
};
struct TooFewPairs : MetricsError {
    using MetricsError::MetricsError;
};

struct BinaryMask {
    Dims dims;
    std::vector<std::uint8_t> data;  // 0 = background, nonzero = foreground

    BinaryMask() = default;
    explicit BinaryMask(Dims dm) : dims(dm), data(dm.voxels(), 0) {}

    std::size_t index(std::size_t d, std::size_t h, std::size_t w) const {
        return (d * dims.h + h) * dims.w + w;
    }
};

/// Binary mask of one class value in a label volume.
BinaryMask class_mask(const LabelVolume& labels, int cls);

std::size_t count_foreground(const BinaryMask& m);

struct SurfacePoint {
    std::size_t d, h, w;
};

struct SurfacePointSet {
    std::vector<SurfacePoint> points;
    Vec3 spacing{1.0, 1.0, 1.0};  // physical position = coordinate · spacing
};

/// Foreground voxels with a 6-neighbor that is background or out of volume.
/// Throws EmptyMask if the mask has no foreground.
SurfacePointSet extract_surface(const BinaryMask& mask, const Vec3& spacing);

/// Exact per-voxel Euclidean distance (mm) to the nearest surface voxel
/// center of `mask`, via the three-pass squared-parabola transform with
/// anisotropic spacing. Throws EmptyMask.
VoxelGrid<double> distance_transform(const BinaryMask& mask, const Vec3& spacing);

/// 2|X∩Y| / (|X|+|Y|); both empty → 1.0. Throws DimsMismatch.
double dice(const BinaryMask& x, const BinaryMask& y);

/// Symmetric mean surface distance in mm: both directed distance sums over
/// the surface point sets, divided by the total point count. Throws
/// EmptyMask when either mask is empty.
double msd(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing);

/// Nearest-rank 95th percentile of the union of both directed
/// nearest-surface distance multisets, in mm.
double hd95(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing);

/// Maximum directed nearest-surface distance (the classic Hausdorff), mm.
/// Reported as an auxiliary figure, never a headline metric.
double hausdorff_max(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing);

/// |X| / |Y| by voxel count. Throws EmptyReference when Y is empty.
double volume_ratio(const BinaryMask& x, const BinaryMask& y);

struct PairedTTestResult {
    double t_statistic = 0.0;
    int degrees_of_freedom = 0;
    double p_value = 1.0;
    // Zero-variance, nonzero-mean differences: p = 0 and this flag set.
    bool infinite_t = false;
};

/// Two-sided paired t-test on d = a − b. All-zero differences give t = 0,
/// p = 1. Throws LengthMismatch, TooFewPairs (need at least 2 pairs).
PairedTTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct ClassRow {
    int cls = 0;  // 1..9
    bool in_pred = false, in_truth = false;
    double dice = 0.0;
    bool dist_defined = false;  // requires both masks nonempty
    double msd_mm = 0.0, hd95_mm = 0.0, hd_max_mm = 0.0;
    bool vr_defined = false;  // requires nonempty truth
    double vr = 0.0;
};

struct SummaryStat {
    double mean = 0.0;
    double stddev = 0.0;  // sample std (n − 1); 0 when n < 2
    int n = 0;
};

SummaryStat summarize(const std::vector<double>& values);

struct MetricsReport {
    std::vector<ClassRow> rows;        // classes present in pred or truth
    std::vector<int> skipped_classes;  // absent from both, flagged not scored
    SummaryStat dice, msd_mm, hd95_mm, vr;  // across rows where defined
};

/// Per-class metrics treating each segment as an independent binary problem,
/// background excluded. Throws DimsMismatch; throws MetricsError when the
/// two volumes disagree on spacing.
MetricsReport build_report(const LabelVolume& pred, const LabelVolume& truth);

// Report renderers. The text table uses the "mean ± std" form with three
// decimal places; CSV carries one row per class plus a summary row; JSON
// carries everything including flags and the auxiliary max-Hausdorff.
std::string report_to_text(const MetricsReport& r);
std::string report_to_csv(const MetricsReport& r);
std::string report_to_json(const MetricsReport& r);

struct AggregateRow {
    int cls = 0;
    SummaryStat dice, msd_mm, hd95_mm, vr;  // across cases where defined
};

struct AggregateReport {
    std::vector<AggregateRow> per_class;  // classes 1..9 that appear in any case
    SummaryStat dice_all;                 // across every (case, class) dice value
};

AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports);
std::string aggregate_to_text(const AggregateReport& r);

}  // namespace liverformer
