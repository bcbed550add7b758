#include "liverformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <nlohmann/json.hpp>

namespace liverformer {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_grid(const BinaryMask& a, const BinaryMask& b, const char* what) {
    require_same_dims(a.dims, b.dims, what);
}

// Lower-envelope distance transform along one line with sample positions
// x_i = i·step. Parabolas with infinite height are dropped; if none remain
// the line stays infinite.
void dt_line(std::vector<double>& f, double step) {
    const std::size_t n = f.size();
    static thread_local std::vector<std::size_t> v;
    static thread_local std::vector<double> z, out;
    v.clear();
    z.assign(n + 1, 0.0);
    out.assign(n, kInf);

    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double xq = static_cast<double>(q) * step;
        while (!v.empty()) {
            const std::size_t p = v.back();
            const double xp = static_cast<double>(p) * step;
            const double s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2 * xq - 2 * xp);
            if (s <= z[v.size() - 1]) {
                v.pop_back();
            } else {
                z[v.size()] = s;
                break;
            }
        }
        if (v.empty()) z[0] = -kInf;
        v.push_back(q);
        z[v.size()] = kInf;
    }
    if (v.empty()) return;  // all-infinite line

    std::size_t k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double xq = static_cast<double>(q) * step;
        while (z[k + 1] < xq) ++k;
        const double xv = static_cast<double>(v[k]) * step;
        out[q] = (xq - xv) * (xq - xv) + f[v[k]];
    }
    f = out;
}

void dt_axis(std::vector<double>& grid, const Dims& dims, int axis, double step) {
    const std::size_t n = axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w;
    std::vector<double> line(n);
    auto at = [&](std::size_t d, std::size_t h, std::size_t w) {
        return (d * dims.h + h) * dims.w + w;
    };
    const std::size_t outer0 = axis == 0 ? dims.h : dims.d;
    const std::size_t outer1 = axis == 2 ? dims.h : dims.w;
    for (std::size_t a = 0; a < outer0; ++a) {
        for (std::size_t b = 0; b < outer1; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                line[i] = grid[axis == 0 ? at(i, a, b) : axis == 1 ? at(a, i, b) : at(a, b, i)];
            }
            dt_line(line, step);
            for (std::size_t i = 0; i < n; ++i) {
                grid[axis == 0 ? at(i, a, b) : axis == 1 ? at(a, i, b) : at(a, b, i)] = line[i];
            }
        }
    }
}

// Directed nearest-surface distances (mm) from every surface point of `from`
// to the surface of `to`.
std::vector<double> directed_distances(const BinaryMask& from, const BinaryMask& to,
                                       const Vec3& spacing) {
    const SurfacePointSet sx = extract_surface(from, spacing);
    const VoxelGrid<double> dt = distance_transform(to, spacing);
    std::vector<double> out;
    out.reserve(sx.points.size());
    for (const SurfacePoint& p : sx.points) {
        out.push_back(dt.at(p.d, p.h, p.w));
    }
    return out;
}

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string fmt_mean_std(const SummaryStat& s) {
    if (s.n == 0) return "n/a";
    return fmt3(s.mean) + " ± " + fmt3(s.stddev);
}

// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                               a * std::log(x) + b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return bt * betacf(a, b, x) / a;
    }
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

BinaryMask class_mask(const LabelVolume& labels, int cls) {
    BinaryMask m(labels.dims);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        m.data[i] = labels.data[i] == cls ? 1 : 0;
    }
    return m;
}

std::size_t count_foreground(const BinaryMask& m) {
    std::size_t n = 0;
    for (std::uint8_t v : m.data) n += v != 0;
    return n;
}

SurfacePointSet extract_surface(const BinaryMask& mask, const Vec3& spacing) {
    SurfacePointSet out;
    out.spacing = spacing;
    const Dims& dm = mask.dims;
    auto bg = [&](std::ptrdiff_t d, std::ptrdiff_t h, std::ptrdiff_t w) {
        if (d < 0 || h < 0 || w < 0 || d >= static_cast<std::ptrdiff_t>(dm.d) ||
            h >= static_cast<std::ptrdiff_t>(dm.h) || w >= static_cast<std::ptrdiff_t>(dm.w)) {
            return true;
        }
        return mask.data[mask.index(static_cast<std::size_t>(d), static_cast<std::size_t>(h),
                                    static_cast<std::size_t>(w))] == 0;
    };
    bool any_fg = false;
    for (std::size_t d = 0; d < dm.d; ++d) {
        for (std::size_t h = 0; h < dm.h; ++h) {
            for (std::size_t w = 0; w < dm.w; ++w) {
                if (mask.data[mask.index(d, h, w)] == 0) continue;
                any_fg = true;
                const auto pd = static_cast<std::ptrdiff_t>(d);
                const auto ph = static_cast<std::ptrdiff_t>(h);
                const auto pw = static_cast<std::ptrdiff_t>(w);
                if (bg(pd - 1, ph, pw) || bg(pd + 1, ph, pw) || bg(pd, ph - 1, pw) ||
                    bg(pd, ph + 1, pw) || bg(pd, ph, pw - 1) || bg(pd, ph, pw + 1)) {
                    out.points.push_back({d, h, w});
                }
            }
        }
    }
    if (!any_fg) throw EmptyMask("extract_surface: mask has no foreground");
    return out;
}

VoxelGrid<double> distance_transform(const BinaryMask& mask, const Vec3& spacing) {
    const SurfacePointSet surf = extract_surface(mask, spacing);  // throws EmptyMask
    VoxelGrid<double> grid(mask.dims, spacing, kInf);
    for (const SurfacePoint& p : surf.points) {
        grid.at(p.d, p.h, p.w) = 0.0;
    }
    dt_axis(grid.data, grid.dims, 0, spacing[0]);
    dt_axis(grid.data, grid.dims, 1, spacing[1]);
    dt_axis(grid.data, grid.dims, 2, spacing[2]);
    for (double& v : grid.data) v = std::sqrt(v);
    return grid;
}

double dice(const BinaryMask& x, const BinaryMask& y) {
    require_same_grid(x, y, "dice");
    std::size_t nx = 0, ny = 0, both = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const bool a = x.data[i] != 0, b = y.data[i] != 0;
        nx += a;
        ny += b;
        both += a && b;
    }
    if (nx + ny == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

double msd(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing) {
    require_same_grid(x, y, "msd");
    const std::vector<double> dxy = directed_distances(x, y, spacing);
    const std::vector<double> dyx = directed_distances(y, x, spacing);
    double sum = 0.0;
    for (double v : dxy) sum += v;
    for (double v : dyx) sum += v;
    return sum / static_cast<double>(dxy.size() + dyx.size());
}

double hd95(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing) {
    require_same_grid(x, y, "hd95");
    std::vector<double> all = directed_distances(x, y, spacing);
    const std::vector<double> dyx = directed_distances(y, x, spacing);
    all.insert(all.end(), dyx.begin(), dyx.end());
    std::sort(all.begin(), all.end());
    const std::size_t n = all.size();
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(n)));
    return all[std::max<std::size_t>(rank, 1) - 1];
}

double hausdorff_max(const BinaryMask& x, const BinaryMask& y, const Vec3& spacing) {
    require_same_grid(x, y, "hausdorff_max");
    double m = 0.0;
    for (double v : directed_distances(x, y, spacing)) m = std::max(m, v);
    for (double v : directed_distances(y, x, spacing)) m = std::max(m, v);
    return m;
}

double volume_ratio(const BinaryMask& x, const BinaryMask& y) {
    require_same_grid(x, y, "volume_ratio");
    const std::size_t ny = count_foreground(y);
    if (ny == 0) throw EmptyReference("volume_ratio: reference mask is empty");
    return static_cast<double>(count_foreground(x)) / static_cast<double>(ny);
}

PairedTTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw LengthMismatch("paired_t_test: " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + " samples");
    }
    const std::size_t n = a.size();
    if (n < 2) throw TooFewPairs("paired_t_test: need at least 2 pairs");

    double mean = 0.0;
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) {
        d[i] = a[i] - b[i];
        mean += d[i];
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : d) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n - 1);

    PairedTTestResult r;
    r.degrees_of_freedom = static_cast<int>(n) - 1;
    if (var == 0.0) {
        if (mean == 0.0) {
            r.t_statistic = 0.0;
            r.p_value = 1.0;
        } else {
            r.t_statistic = mean > 0 ? kInf : -kInf;
            r.p_value = 0.0;
            r.infinite_t = true;
        }
        return r;
    }
    const double se = std::sqrt(var / static_cast<double>(n));
    r.t_statistic = mean / se;
    const double df = static_cast<double>(r.degrees_of_freedom);
    r.p_value = reg_inc_beta(df / 2.0, 0.5, df / (df + r.t_statistic * r.t_statistic));
    return r;
}

SummaryStat summarize(const std::vector<double>& values) {
    SummaryStat s;
    s.n = static_cast<int>(values.size());
    if (s.n == 0) return s;
    for (double v : values) s.mean += v;
    s.mean /= s.n;
    if (s.n >= 2) {
        double var = 0.0;
        for (double v : values) var += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(var / (s.n - 1));
    }
    return s;
}

MetricsReport build_report(const LabelVolume& pred, const LabelVolume& truth) {
    require_same_dims(pred.dims, truth.dims, "build_report");
    if (pred.spacing != truth.spacing) {
        throw MetricsError("build_report: spacing mismatch");
    }
    MetricsReport rep;
    std::vector<double> dices, msds, hd95s, vrs;
    for (int cls = 1; cls <= kMaxLabel; ++cls) {
        const BinaryMask mp = class_mask(pred, cls);
        const BinaryMask mt = class_mask(truth, cls);
        const std::size_t np = count_foreground(mp), nt = count_foreground(mt);
        if (np == 0 && nt == 0) {
            rep.skipped_classes.push_back(cls);
            continue;
        }
        ClassRow row;
        row.cls = cls;
        row.in_pred = np > 0;
        row.in_truth = nt > 0;
        row.dice = dice(mp, mt);
        dices.push_back(row.dice);
        if (np > 0 && nt > 0) {
            row.dist_defined = true;
            row.msd_mm = msd(mp, mt, truth.spacing);
            row.hd95_mm = hd95(mp, mt, truth.spacing);
            row.hd_max_mm = hausdorff_max(mp, mt, truth.spacing);
            msds.push_back(row.msd_mm);
            hd95s.push_back(row.hd95_mm);
        }
        if (nt > 0) {
            row.vr_defined = true;
            row.vr = static_cast<double>(np) / static_cast<double>(nt);
            vrs.push_back(row.vr);
        }
        rep.rows.push_back(row);
    }
    rep.dice = summarize(dices);
    rep.msd_mm = summarize(msds);
    rep.hd95_mm = summarize(hd95s);
    rep.vr = summarize(vrs);
    return rep;
}

std::string report_to_text(const MetricsReport& r) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %8s %10s %10s %8s\n", "segment", "dice",
                  "msd_mm", "hd95_mm", "vr");
    out += buf;
    for (const ClassRow& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%-10s %8s %10s %10s %8s\n",
                      couinaud_segment_name(row.cls), fmt3(row.dice).c_str(),
                      row.dist_defined ? fmt3(row.msd_mm).c_str() : "n/a",
                      row.dist_defined ? fmt3(row.hd95_mm).c_str() : "n/a",
                      row.vr_defined ? fmt3(row.vr).c_str() : "n/a");
        out += buf;
    }
    out += "mean ± std: dice " + fmt_mean_std(r.dice) + ", msd_mm " +
           fmt_mean_std(r.msd_mm) + ", hd95_mm " + fmt_mean_std(r.hd95_mm) + ", vr " +
           fmt_mean_std(r.vr) + "\n";
    if (!r.skipped_classes.empty()) {
        out += "skipped (absent from both volumes):";
        for (int cls : r.skipped_classes) {
            out += " ";
            out += couinaud_segment_name(cls);
        }
        out += "\n";
    }
    return out;
}

std::string report_to_csv(const MetricsReport& r) {
    std::string out = "class,segment,in_pred,in_truth,dice,msd_mm,hd95_mm,hd_max_mm,vr\n";
    char buf[256];
    for (const ClassRow& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%d,%s,%d,%d,%.6f,%s,%s,%s,%s\n", row.cls,
                      couinaud_segment_name(row.cls), row.in_pred ? 1 : 0,
                      row.in_truth ? 1 : 0, row.dice,
                      row.dist_defined ? fmt3(row.msd_mm).c_str() : "",
                      row.dist_defined ? fmt3(row.hd95_mm).c_str() : "",
                      row.dist_defined ? fmt3(row.hd_max_mm).c_str() : "",
                      row.vr_defined ? fmt3(row.vr).c_str() : "");
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "summary,mean_std,,,%s,%s,%s,,%s\n",
                  fmt_mean_std(r.dice).c_str(), fmt_mean_std(r.msd_mm).c_str(),
                  fmt_mean_std(r.hd95_mm).c_str(), fmt_mean_std(r.vr).c_str());
    out += buf;
    return out;
}

std::string report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const ClassRow& row : r.rows) {
        nlohmann::json jr;
        jr["class"] = row.cls;
        jr["segment"] = couinaud_segment_name(row.cls);
        jr["in_pred"] = row.in_pred;
        jr["in_truth"] = row.in_truth;
        jr["dice"] = row.dice;
        if (row.dist_defined) {
            jr["msd_mm"] = row.msd_mm;
            jr["hd95_mm"] = row.hd95_mm;
            jr["hd_max_mm"] = row.hd_max_mm;
        }
        if (row.vr_defined) jr["vr"] = row.vr;
        j["rows"].push_back(jr);
    }
    j["skipped_classes"] = r.skipped_classes;
    auto stat = [](const SummaryStat& s) {
        return nlohmann::json{{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
    };
    j["summary"] = {{"dice", stat(r.dice)},
                    {"msd_mm", stat(r.msd_mm)},
                    {"hd95_mm", stat(r.hd95_mm)},
                    {"vr", stat(r.vr)}};
    return j.dump(2) + "\n";
}

AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports) {
    AggregateReport agg;
    std::vector<double> all_dice;
    for (int cls = 1; cls <= kMaxLabel; ++cls) {
        std::vector<double> dices, msds, hd95s, vrs;
        for (const MetricsReport& rep : reports) {
            for (const ClassRow& row : rep.rows) {
                if (row.cls != cls) continue;
                dices.push_back(row.dice);
                all_dice.push_back(row.dice);
                if (row.dist_defined) {
                    msds.push_back(row.msd_mm);
                    hd95s.push_back(row.hd95_mm);
                }
                if (row.vr_defined) vrs.push_back(row.vr);
            }
        }
        if (dices.empty()) continue;
        AggregateRow row;
        row.cls = cls;
        row.dice = summarize(dices);
        row.msd_mm = summarize(msds);
        row.hd95_mm = summarize(hd95s);
        row.vr = summarize(vrs);
        agg.per_class.push_back(row);
    }
    agg.dice_all = summarize(all_dice);
    return agg;
}

std::string aggregate_to_text(const AggregateReport& r) {
    std::string out;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-10s %17s %17s %17s %17s\n", "segment", "dice",
                  "msd_mm", "hd95_mm", "vr");
    out += buf;
    for (const AggregateRow& row : r.per_class) {
        std::snprintf(buf, sizeof buf, "%-10s %17s %17s %17s %17s\n",
                      couinaud_segment_name(row.cls), fmt_mean_std(row.dice).c_str(),
                      fmt_mean_std(row.msd_mm).c_str(), fmt_mean_std(row.hd95_mm).c_str(),
                      fmt_mean_std(row.vr).c_str());
        out += buf;
    }
    out += "overall dice: " + fmt_mean_std(r.dice_all) + "\n";
    return out;
}

}  // namespace liverformer
