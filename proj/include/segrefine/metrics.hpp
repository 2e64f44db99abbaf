// Per-class overlap metrics (IoU / DSC / RVD), the paired Wilcoxon
// signed-rank test, and the three-variant label-quality report.
//
// Conventions fixed here and relied on by the report:
//   - a class absent from BOTH maps scores dsc = iou = 1.0 (correct absence);
//   - rvd is undefined (std::nullopt, never NaN) when the reference mask is
//     empty, and is expressed in percent;
//   - "±" in rendered tables is the population standard deviation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/labelmap.hpp"

namespace segrefine {

// ---------------------------------------------------------------------------
// Pixel counts
// ---------------------------------------------------------------------------

/// Per-class set cardinalities of a (prediction, reference) mask pair.
struct ClassCounts {
    std::int64_t num_classes = 0;
    std::vector<std::int64_t> intersection;  // |A_l ∩ B_l|
    std::vector<std::int64_t> pred;          // |A_l|
    std::vector<std::int64_t> gt;            // |B_l|

    std::int64_t union_count(std::int64_t cls) const {
        return pred[static_cast<std::size_t>(cls)] + gt[static_cast<std::size_t>(cls)] -
               intersection[static_cast<std::size_t>(cls)];
    }
};

inline ClassCounts confusion_counts(const LabelMap& pred, const LabelMap& gt,
                                    std::int64_t num_classes) {
    if (num_classes < 1) throw ConfigError("confusion_counts: num_classes must be >= 1");
    if (pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("confusion_counts: map shapes differ (" + std::to_string(pred.h) +
                         "x" + std::to_string(pred.w) + " vs " + std::to_string(gt.h) + "x" +
                         std::to_string(gt.w) + ")");
    }
    ClassCounts c;
    c.num_classes = num_classes;
    c.intersection.assign(static_cast<std::size_t>(num_classes), 0);
    c.pred.assign(static_cast<std::size_t>(num_classes), 0);
    c.gt.assign(static_cast<std::size_t>(num_classes), 0);
    const std::size_t n = pred.v.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t a = pred.v[i], b = gt.v[i];
        if (a >= num_classes || b >= num_classes) {
            throw ShapeError("confusion_counts: label value " +
                             std::to_string(int(std::max(a, b))) + " out of range for " +
                             std::to_string(num_classes) + " classes");
        }
        ++c.pred[a];
        ++c.gt[b];
        if (a == b) ++c.intersection[a];
    }
    return c;
}

// ---------------------------------------------------------------------------
// Per-class metrics
// ---------------------------------------------------------------------------

/// Dice similarity 2I/(|A|+|B|); 1.0 when the class is absent from both maps.
inline double dsc(const ClassCounts& c, std::int64_t cls) {
    const auto i = static_cast<std::size_t>(cls);
    const std::int64_t denom = c.pred[i] + c.gt[i];
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.intersection[i]) / static_cast<double>(denom);
}

/// Jaccard index I/U; 1.0 when the class is absent from both maps.
inline double iou(const ClassCounts& c, std::int64_t cls) {
    const std::int64_t u = c.union_count(cls);
    if (u == 0) return 1.0;
    return static_cast<double>(c.intersection[static_cast<std::size_t>(cls)]) /
           static_cast<double>(u);
}

/// Relative volume difference 100*||A|-|B||/|B| in percent; undefined
/// (nullopt) when the reference mask is empty.
inline std::optional<double> rvd(const ClassCounts& c, std::int64_t cls) {
    const auto i = static_cast<std::size_t>(cls);
    if (c.gt[i] == 0) return std::nullopt;
    return 100.0 * static_cast<double>(std::llabs(c.pred[i] - c.gt[i])) /
           static_cast<double>(c.gt[i]);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test (paired, two-sided)
// ---------------------------------------------------------------------------

struct WilcoxonResult {
    double statistic = 0.0;  // W = min(W+, W-); half-integral under ties
    double p_value = 1.0;    // two-sided
    std::size_t n = 0;       // pairs remaining after dropping zero differences
    bool exact = false;      // true: exact sign-enumeration distribution
};

/// Paired two-sided test on a[i]-b[i]. Zero differences are dropped; if all
/// are zero the result is "no difference" (p=1). Requires >= 6 nonzero pairs
/// otherwise. Ties in |difference| get average ranks. Exact distribution via
/// subset-sum DP for n <= exact_cutoff, else normal approximation with
/// tie-corrected variance and a 0.5 continuity correction. The cutoff is
/// exposed so the two modes can be compared on the same data.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b,
                                           std::size_t exact_cutoff = 12) {
    if (a.size() != b.size()) {
        throw ShapeError("wilcoxon_signed_rank: length mismatch (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
    }
    std::vector<double> d;
    d.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
            throw NumericalError("wilcoxon_signed_rank: non-finite input at index " +
                                 std::to_string(i));
        }
        const double di = a[i] - b[i];
        if (di != 0.0) d.push_back(di);
    }
    if (d.empty()) return WilcoxonResult{0.0, 1.0, 0, true};
    const std::size_t n = d.size();
    if (n < 6) {
        throw ConfigError("wilcoxon_signed_rank: only " + std::to_string(n) +
                          " nonzero differences; need >= 6");
    }

    // Rank |d| ascending with average ranks for ties. Ranks are kept doubled
    // so they stay integral under ties (average of consecutive integers).
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::fabs(d[x]) < std::fabs(d[y]);
    });
    std::vector<std::int64_t> rank2(n, 0);  // doubled rank per sorted position
    double tie_term = 0.0;                  // sum of t^3 - t over tie groups
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && std::fabs(d[order[j]]) == std::fabs(d[order[i]])) ++j;
        // positions i+1 .. j (1-based) share the average rank (i+1+j)/2
        const auto r2 = static_cast<std::int64_t>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) rank2[k] = r2;
        const auto t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }

    std::int64_t w2_plus = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (d[order[k]] > 0.0) w2_plus += rank2[k];
    }
    const auto total2 = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n + 1);
    const std::int64_t w2_minus = total2 - w2_plus;
    const double w_plus = static_cast<double>(w2_plus) / 2.0;
    const double w_minus = static_cast<double>(w2_minus) / 2.0;

    WilcoxonResult res;
    res.statistic = std::min(w_plus, w_minus);
    res.n = n;

    if (n <= exact_cutoff && n <= 62) {
        // ways[s] = number of sign assignments whose positive doubled-rank sum
        // is s; counts stay exact in 64 bits for any n <= 62.
        std::vector<std::uint64_t> ways(static_cast<std::size_t>(total2) + 1, 0);
        ways[0] = 1;
        for (std::size_t k = 0; k < n; ++k) {
            const std::int64_t r = rank2[k];
            for (std::int64_t s = total2; s >= r; --s) {
                ways[static_cast<std::size_t>(s)] += ways[static_cast<std::size_t>(s - r)];
            }
        }
        std::uint64_t c_le = 0, c_ge = 0;
        for (std::int64_t s = 0; s <= total2; ++s) {
            if (s <= w2_plus) c_le += ways[static_cast<std::size_t>(s)];
            if (s >= w2_plus) c_ge += ways[static_cast<std::size_t>(s)];
        }
        const double denom = std::ldexp(1.0, static_cast<int>(n));
        res.p_value = std::min(1.0, 2.0 * static_cast<double>(std::min(c_le, c_ge)) / denom);
        res.exact = true;
    } else {
        const auto nd = static_cast<double>(n);
        const double mu = nd * (nd + 1.0) / 4.0;
        const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
        const double z = (res.statistic - mu + 0.5) / std::sqrt(var);
        // two-sided p = 2*Phi(z) for z <= 0; Phi(z) = erfc(-z/sqrt(2))/2
        res.p_value = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
        res.exact = false;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

// Canonical variant names; the row order in rendered reports follows the
// order the caller passes variants in.
inline constexpr const char* kVariantInitial = "Initial Weak labels";
inline constexpr const char* kVariantBaseline = "Dual branches without transfer learning";
inline constexpr const char* kVariantTransfer = "Dual Branches with transfer learning";

/// Metrics of one sample: per-class vectors indexed by class id (background
/// included; reports render foreground classes only).
struct SampleMetrics {
    std::string id;
    std::vector<double> iou;
    std::vector<double> dsc;
    std::vector<std::optional<double>> rvd;  // percent; nullopt = gt empty
};

inline SampleMetrics sample_metrics(const std::string& id, const LabelMap& pred,
                                    const LabelMap& gt, std::int64_t num_classes) {
    const ClassCounts c = confusion_counts(pred, gt, num_classes);
    SampleMetrics m;
    m.id = id;
    for (std::int64_t cls = 0; cls < num_classes; ++cls) {
        m.iou.push_back(iou(c, cls));
        m.dsc.push_back(dsc(c, cls));
        m.rvd.push_back(rvd(c, cls));
    }
    return m;
}

struct VariantMetrics {
    std::string variant;
    std::vector<SampleMetrics> samples;
};

struct ClassStat {
    double mean = 0.0;
    double stddev = 0.0;    // population std (divide by count)
    std::size_t count = 0;  // samples the stat is over (rvd skips undefined)
};

struct VariantReport {
    std::string variant;
    std::vector<ClassStat> iou;  // indexed by class id
    std::vector<ClassStat> dsc;
    std::vector<ClassStat> rvd;
};

/// Two-sided Wilcoxon p on per-sample DSC, per class; nullopt when the test
/// is undecidable (fewer than 6 nonzero paired differences).
struct PairedComparison {
    std::string variant_a;
    std::string variant_b;
    std::vector<std::optional<double>> dsc_p;  // indexed by class id
};

struct RefinementReport {
    std::vector<std::string> class_names;  // index = class id; [0] = background
    std::size_t sample_count = 0;
    std::vector<VariantReport> variants;
    std::vector<PairedComparison> comparisons;

    std::string render_text() const;
    nlohmann::json to_json() const;
};

namespace detail {

inline ClassStat stat_of(const std::vector<double>& xs) {
    ClassStat s;
    s.count = xs.size();
    if (xs.empty()) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(xs.size()));
    return s;
}

inline std::string fmt1(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

inline std::string fmt_p(double p) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.4g", p);
    return buf;
}

/// Terminal columns occupied, not bytes: UTF-8 continuation bytes (used by
/// the ± sign) take no column of their own.
inline std::size_t display_width(const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) {
        if ((ch & 0xC0) != 0x80) ++w;
    }
    return w;
}

inline std::string pad_left(const std::string& s, std::size_t width) {
    const std::size_t w = display_width(s);
    return w >= width ? s : std::string(width - w, ' ') + s;
}

inline std::string pad_right(const std::string& s, std::size_t width) {
    const std::size_t w = display_width(s);
    return w >= width ? s : s + std::string(width - w, ' ');
}

inline std::string center(const std::string& s, std::size_t width) {
    const std::size_t w = display_width(s);
    if (w >= width) return s;
    const std::size_t left = (width - w) / 2;
    return std::string(left, ' ') + s + std::string(width - w - left, ' ');
}

}  // namespace detail

/// Aggregates paired per-sample metrics into the three-row comparison report.
/// Samples are matched across variants by id (a deterministic sorted fold);
/// any id present in one variant but not another is an error. p-values are
/// computed on per-sample DSC for the with-transfer variant against the
/// initial and no-transfer variants when those are present.
inline RefinementReport aggregate_report(std::vector<VariantMetrics> variants,
                                         const std::vector<std::string>& class_names) {
    if (variants.empty()) throw ConfigError("aggregate_report: no variants given");
    const auto C = static_cast<std::int64_t>(class_names.size());
    if (C < 2) throw ConfigError("aggregate_report: need background plus >= 1 class");

    for (auto& v : variants) {
        if (v.samples.empty()) {
            throw ConfigError("aggregate_report: variant '" + v.variant + "' has no samples");
        }
        std::sort(v.samples.begin(), v.samples.end(),
                  [](const SampleMetrics& x, const SampleMetrics& y) { return x.id < y.id; });
        for (std::size_t i = 0; i < v.samples.size(); ++i) {
            const auto& s = v.samples[i];
            if (i > 0 && s.id == v.samples[i - 1].id) {
                throw ConfigError("aggregate_report: duplicate sample id '" + s.id +
                                  "' in variant '" + v.variant + "'");
            }
            if (static_cast<std::int64_t>(s.iou.size()) != C ||
                static_cast<std::int64_t>(s.dsc.size()) != C ||
                static_cast<std::int64_t>(s.rvd.size()) != C) {
                throw ShapeError("aggregate_report: sample '" + s.id + "' in variant '" +
                                 v.variant + "' does not carry " + std::to_string(C) +
                                 " per-class values");
            }
        }
    }
    for (std::size_t v = 1; v < variants.size(); ++v) {
        if (variants[v].samples.size() != variants[0].samples.size()) {
            throw ConfigError("aggregate_report: variant '" + variants[v].variant + "' has " +
                              std::to_string(variants[v].samples.size()) + " samples but '" +
                              variants[0].variant + "' has " +
                              std::to_string(variants[0].samples.size()));
        }
        for (std::size_t i = 0; i < variants[v].samples.size(); ++i) {
            if (variants[v].samples[i].id != variants[0].samples[i].id) {
                throw ConfigError("aggregate_report: unpaired sample ids ('" +
                                  variants[v].samples[i].id + "' in '" + variants[v].variant +
                                  "' vs '" + variants[0].samples[i].id + "' in '" +
                                  variants[0].variant + "')");
            }
        }
    }

    RefinementReport rep;
    rep.class_names = class_names;
    rep.sample_count = variants[0].samples.size();

    for (const auto& v : variants) {
        VariantReport vr;
        vr.variant = v.variant;
        for (std::int64_t cls = 0; cls < C; ++cls) {
            std::vector<double> ious, dscs, rvds;
            for (const auto& s : v.samples) {
                ious.push_back(s.iou[static_cast<std::size_t>(cls)]);
                dscs.push_back(s.dsc[static_cast<std::size_t>(cls)]);
                if (s.rvd[static_cast<std::size_t>(cls)].has_value()) {
                    rvds.push_back(*s.rvd[static_cast<std::size_t>(cls)]);
                }
            }
            vr.iou.push_back(detail::stat_of(ious));
            vr.dsc.push_back(detail::stat_of(dscs));
            vr.rvd.push_back(detail::stat_of(rvds));
        }
        rep.variants.push_back(std::move(vr));
    }

    const VariantMetrics* transfer = nullptr;
    for (const auto& v : variants) {
        if (v.variant == kVariantTransfer) transfer = &v;
    }
    if (transfer != nullptr) {
        for (const auto& v : variants) {
            if (v.variant != kVariantInitial && v.variant != kVariantBaseline) continue;
            PairedComparison cmp;
            cmp.variant_a = transfer->variant;
            cmp.variant_b = v.variant;
            for (std::int64_t cls = 0; cls < C; ++cls) {
                std::vector<double> da, db;
                for (std::size_t i = 0; i < transfer->samples.size(); ++i) {
                    da.push_back(transfer->samples[i].dsc[static_cast<std::size_t>(cls)]);
                    db.push_back(v.samples[i].dsc[static_cast<std::size_t>(cls)]);
                }
                try {
                    cmp.dsc_p.push_back(wilcoxon_signed_rank(da, db).p_value);
                } catch (const ConfigError&) {
                    cmp.dsc_p.push_back(std::nullopt);  // < 6 nonzero differences
                }
            }
            rep.comparisons.push_back(std::move(cmp));
        }
    }
    return rep;
}

inline std::string RefinementReport::render_text() const {
    // Layout: a 39-char row-label column, then one 40-char group per
    // foreground class holding three 12-char cells (IoU/DSC/RVD).
    constexpr std::size_t kLabelW = 39;
    constexpr std::size_t kCellW = 12;
    const std::size_t group_w = 3 * kCellW + 2 * 2;

    std::string out;
    out += "Label-quality comparison (mean±std over " + std::to_string(sample_count) +
           " paired samples; population std; % units)\n";

    std::string h1(kLabelW, ' ');
    std::string h2 = detail::pad_right("variant", kLabelW);
    for (std::size_t cls = 1; cls < class_names.size(); ++cls) {
        h1 += "  " + detail::center(class_names[cls], group_w);
        h2 += "  " + detail::pad_left("IoU (%)", kCellW) + "  " +
              detail::pad_left("DSC (%)", kCellW) + "  " + detail::pad_left("RVD (%)", kCellW);
    }
    out += h1 + "\n" + h2 + "\n";
    out += std::string(h2.size(), '-') + "\n";

    for (const auto& v : variants) {
        std::string row = detail::pad_right(v.variant, kLabelW);
        for (std::size_t cls = 1; cls < class_names.size(); ++cls) {
            const auto cell = [&](const ClassStat& s, double scale) {
                if (s.count == 0) return detail::pad_left("--", kCellW);
                return detail::pad_left(
                    detail::fmt1(s.mean * scale) + "±" + detail::fmt1(s.stddev * scale), kCellW);
            };
            row += "  " + cell(v.iou[cls], 100.0) + "  " + cell(v.dsc[cls], 100.0) + "  " +
                   cell(v.rvd[cls], 1.0);
        }
        out += row + "\n";
    }

    if (!comparisons.empty()) {
        out += "\nWilcoxon signed-rank on per-sample DSC (two-sided):\n";
        for (const auto& c : comparisons) {
            std::string line = "  vs " + c.variant_b + ":";
            for (std::size_t cls = 1; cls < class_names.size(); ++cls) {
                line += "  " + class_names[cls] + " p=";
                line += c.dsc_p[cls].has_value() ? detail::fmt_p(*c.dsc_p[cls]) : "--";
            }
            out += line + "\n";
        }
    }
    return out;
}

inline nlohmann::json RefinementReport::to_json() const {
    nlohmann::json j;
    j["schema"] = "segrefine-report-v1";
    j["classes"] = class_names;
    j["samples"] = sample_count;
    j["std"] = "population";
    j["units"] = {{"iou", "fraction"}, {"dsc", "fraction"}, {"rvd", "percent"}};
    j["variants"] = nlohmann::json::array();
    for (const auto& v : variants) {
        nlohmann::json jv;
        jv["name"] = v.variant;
        nlohmann::json per;
        for (std::size_t cls = 1; cls < class_names.size(); ++cls) {
            const auto stat_json = [](const ClassStat& s) {
                nlohmann::json js;
                if (s.count == 0) {
                    js["mean"] = nullptr;
                    js["std"] = nullptr;
                } else {
                    js["mean"] = s.mean;
                    js["std"] = s.stddev;
                }
                js["count"] = s.count;
                return js;
            };
            per[class_names[cls]] = {{"iou", stat_json(v.iou[cls])},
                                     {"dsc", stat_json(v.dsc[cls])},
                                     {"rvd", stat_json(v.rvd[cls])}};
        }
        jv["per_class"] = per;
        j["variants"].push_back(jv);
    }
    j["p_values"] = nlohmann::json::array();
    for (const auto& c : comparisons) {
        nlohmann::json jc;
        jc["a"] = c.variant_a;
        jc["b"] = c.variant_b;
        jc["metric"] = "dsc";
        nlohmann::json per;
        for (std::size_t cls = 1; cls < class_names.size(); ++cls) {
            if (c.dsc_p[cls].has_value()) {
                per[class_names[cls]] = *c.dsc_p[cls];
            } else {
                per[class_names[cls]] = nullptr;
            }
        }
        jc["per_class"] = per;
        j["p_values"].push_back(jc);
    }
    return j;
}

}  // namespace segrefine
