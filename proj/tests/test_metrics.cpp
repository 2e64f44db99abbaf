// Metrics vs. independent oracles: per-pixel brute-force tallies for the
// confusion counts, full 2^n sign enumeration for the exact Wilcoxon
// distribution, and a golden snapshot of the rendered report.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segrefine/metrics.hpp"
#include "segrefine/rng.hpp"

using namespace segrefine;

namespace {

// --- oracle 1: per-pixel tally, one full image pass per class -------------
// Deliberately structured unlike the implementation (per-class passes with
// boolean membership tests instead of one pass over joint labels).
struct TallyOracle {
    std::vector<long long> inter, na, nb;
};

TallyOracle oracle_tally(const LabelMap& pred, const LabelMap& gt, int num_classes) {
    TallyOracle t;
    t.inter.assign(num_classes, 0);
    t.na.assign(num_classes, 0);
    t.nb.assign(num_classes, 0);
    for (int c = 0; c < num_classes; ++c) {
        for (std::int64_t y = 0; y < pred.h; ++y) {
            for (std::int64_t x = 0; x < pred.w; ++x) {
                const bool in_a = pred.at(y, x) == c;
                const bool in_b = gt.at(y, x) == c;
                if (in_a) ++t.na[c];
                if (in_b) ++t.nb[c];
                if (in_a && in_b) ++t.inter[c];
            }
        }
    }
    return t;
}

// --- oracle 2: exact Wilcoxon p by enumerating all 2^n sign patterns ------
// Average ranks come from direct counting (doubled to stay integral):
// rank2_i = 2*#{|d_j| < |d_i|} + #{|d_j| == |d_i|} + 1.
std::vector<long long> oracle_rank2(const std::vector<double>& d) {
    const std::size_t n = d.size();
    std::vector<long long> r(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        long long less = 0, eq = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::fabs(d[j]) < std::fabs(d[i])) ++less;
            if (std::fabs(d[j]) == std::fabs(d[i])) ++eq;
        }
        r[i] = 2 * less + eq + 1;
    }
    return r;
}

struct EnumOracle {
    double statistic;
    double p;
};

// diffs must already be nonzero
EnumOracle oracle_wilcoxon(const std::vector<double>& diffs) {
    const std::size_t n = diffs.size();
    REQUIRE(n <= 20);
    const auto rank2 = oracle_rank2(diffs);
    long long w2_obs = 0, total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total2 += rank2[i];
        if (diffs[i] > 0.0) w2_obs += rank2[i];
    }
    unsigned long long c_le = 0, c_ge = 0;
    const unsigned long long masks = 1ULL << n;
    for (unsigned long long m = 0; m < masks; ++m) {
        long long w2 = 0;
        for (std::size_t k = 0; k < n; ++k) {
            if (m & (1ULL << k)) w2 += rank2[k];
        }
        if (w2 <= w2_obs) ++c_le;
        if (w2 >= w2_obs) ++c_ge;
    }
    EnumOracle out;
    out.statistic = static_cast<double>(std::min(w2_obs, total2 - w2_obs)) / 2.0;
    out.p = std::min(1.0, 2.0 * static_cast<double>(std::min(c_le, c_ge)) /
                              static_cast<double>(masks));
    return out;
}

LabelMap random_map(Rng& rng, std::int64_t h, std::int64_t w, int num_classes) {
    LabelMap m(h, w);
    for (auto& v : m.v) {
        v = static_cast<std::uint8_t>(rng.uniform_int(static_cast<std::uint64_t>(num_classes)));
    }
    return m;
}

}  // namespace

TEST_CASE("confusion_counts equals brute-force tally on random pairs") {
    Rng rng(derive_seed(11, "metrics-tally"));
    for (int trial = 0; trial < 100; ++trial) {
        const int C = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5 classes
        const LabelMap pred = random_map(rng, 16, 16, C);
        const LabelMap gt = random_map(rng, 16, 16, C);
        const ClassCounts c = confusion_counts(pred, gt, C);
        const TallyOracle t = oracle_tally(pred, gt, C);
        for (int cls = 0; cls < C; ++cls) {
            REQUIRE(c.intersection[cls] == t.inter[cls]);
            REQUIRE(c.pred[cls] == t.na[cls]);
            REQUIRE(c.gt[cls] == t.nb[cls]);
            // structural invariants
            REQUIRE(c.intersection[cls] <= std::min(c.pred[cls], c.gt[cls]));
            REQUIRE(c.union_count(cls) == c.pred[cls] + c.gt[cls] - c.intersection[cls]);
        }
    }
}

TEST_CASE("confusion_counts rejects bad inputs") {
    LabelMap a(4, 4), b(4, 5);
    REQUIRE_THROWS_AS(confusion_counts(a, b, 2), ShapeError);
    LabelMap c(4, 4), d(4, 4);
    c.at(1, 1) = 3;
    REQUIRE_THROWS_AS(confusion_counts(c, d, 2), ShapeError);
}

TEST_CASE("metric worked examples") {
    SECTION("identical nonempty masks") {
        LabelMap m(4, 4, 1);
        const auto c = confusion_counts(m, m, 2);
        REQUIRE(dsc(c, 1) == 1.0);
        REQUIRE(iou(c, 1) == 1.0);
        REQUIRE(rvd(c, 1).has_value());
        REQUIRE(*rvd(c, 1) == 0.0);
    }
    SECTION("|A|=|B|=100, I=50") {
        // 20x20 grid: gt class 1 on rows 0..4 (100 px); pred class 1 on rows
        // 2..7 shifted to overlap exactly 50 px (rows 2..4 overlap = 60...)
        // Build explicitly instead: pred covers columns 0..99 of the flat
        // index, gt covers 50..149.
        LabelMap pred(20, 20), gt(20, 20);
        for (int i = 0; i < 100; ++i) pred.v[i] = 1;
        for (int i = 50; i < 150; ++i) gt.v[i] = 1;
        const auto c = confusion_counts(pred, gt, 2);
        REQUIRE(c.pred[1] == 100);
        REQUIRE(c.gt[1] == 100);
        REQUIRE(c.intersection[1] == 50);
        REQUIRE(dsc(c, 1) == Catch::Approx(0.5));
        REQUIRE(iou(c, 1) == Catch::Approx(1.0 / 3.0));
        REQUIRE(*rvd(c, 1) == 0.0);
    }
    SECTION("disjoint equal-size masks: RVD is volume-only") {
        LabelMap pred(4, 8), gt(4, 8);
        for (std::int64_t y = 0; y < 4; ++y) {
            for (std::int64_t x = 0; x < 4; ++x) pred.at(y, x) = 1;
            for (std::int64_t x = 4; x < 8; ++x) gt.at(y, x) = 1;
        }
        const auto c = confusion_counts(pred, gt, 2);
        REQUIRE(dsc(c, 1) == 0.0);
        REQUIRE(iou(c, 1) == 0.0);
        REQUIRE(*rvd(c, 1) == 0.0);
    }
    SECTION("class absent from both maps scores 1.0") {
        LabelMap pred(4, 4), gt(4, 4);
        const auto c = confusion_counts(pred, gt, 3);
        REQUIRE(dsc(c, 2) == 1.0);
        REQUIRE(iou(c, 2) == 1.0);
        REQUIRE_FALSE(rvd(c, 2).has_value());  // undefined, not NaN
    }
    SECTION("all-0 pred vs all-1 gt: zero foreground intersection") {
        LabelMap pred(4, 4, 0), gt(4, 4, 1);
        const auto c = confusion_counts(pred, gt, 2);
        REQUIRE(c.intersection[1] == 0);
        REQUIRE(dsc(c, 1) == 0.0);
        REQUIRE(*rvd(c, 1) == 100.0);  // |0 - 16| / 16
    }
}

TEST_CASE("iou <= dsc <= 2*iou/(1+iou) on random masks") {
    Rng rng(derive_seed(12, "metrics-relation"));
    for (int trial = 0; trial < 200; ++trial) {
        const int C = 2 + static_cast<int>(rng.uniform_int(3));
        const LabelMap pred = random_map(rng, 12, 12, C);
        const LabelMap gt = random_map(rng, 12, 12, C);
        const auto c = confusion_counts(pred, gt, C);
        for (int cls = 0; cls < C; ++cls) {
            const double j = iou(c, cls), s = dsc(c, cls);
            REQUIRE(j >= 0.0);
            REQUIRE(s <= 1.0);
            REQUIRE(j <= s + 1e-12);
            REQUIRE(s <= 2.0 * j / (1.0 + j) + 1e-12);
        }
    }
}

TEST_CASE("wilcoxon: all-zero differences give p=1") {
    const std::vector<double> a{0.5, 0.7, 0.2, 0.9, 0.4, 0.6, 0.8};
    const auto r = wilcoxon_signed_rank(a, a);
    REQUIRE(r.p_value == 1.0);
    REQUIRE(r.n == 0);
    REQUIRE(r.statistic == 0.0);
}

TEST_CASE("wilcoxon: input contract violations") {
    const std::vector<double> a{1, 2, 3, 4, 5, 6};
    SECTION("length mismatch") {
        const std::vector<double> b{1, 2, 3};
        REQUIRE_THROWS_AS(wilcoxon_signed_rank(a, b), ShapeError);
    }
    SECTION("too few nonzero differences") {
        std::vector<double> b = a;
        b[0] += 1;
        b[1] -= 1;  // only 2 nonzero diffs
        REQUIRE_THROWS_AS(wilcoxon_signed_rank(a, b), ConfigError);
    }
    SECTION("non-finite input") {
        std::vector<double> b = a;
        b[2] = std::nan("");
        REQUIRE_THROWS_AS(wilcoxon_signed_rank(a, b), NumericalError);
    }
}

TEST_CASE("wilcoxon exact mode: uniform-shift example") {
    // a = 1..10, b = a+1: all differences are -1, tied ranks average 5.5,
    // W+ = 0. Of the 1024 sign patterns exactly one is as extreme on each
    // side, so the two-sided p is 2/1024.
    std::vector<double> a(10), b(10);
    for (int i = 0; i < 10; ++i) {
        a[i] = i + 1;
        b[i] = i + 2;
    }
    const auto r = wilcoxon_signed_rank(a, b);
    REQUIRE(r.exact);
    REQUIRE(r.n == 10);
    REQUIRE(r.statistic == 0.0);
    REQUIRE(r.p_value == 2.0 / 1024.0);

    std::vector<double> diffs(10, -1.0);
    const auto o = oracle_wilcoxon(diffs);
    REQUIRE(o.p == r.p_value);
    REQUIRE(o.statistic == r.statistic);
}

TEST_CASE("wilcoxon exact mode matches 2^n enumeration on random inputs") {
    Rng rng(derive_seed(13, "metrics-wilcoxon-enum"));
    int done = 0;
    while (done < 60) {
        const std::size_t n = 6 + rng.uniform_int(7);  // 6..12 pairs
        std::vector<double> a(n), b(n), diffs;
        for (std::size_t i = 0; i < n; ++i) {
            // dyadic values keep a[i]-b[i] exact, so the oracle sees the
            // same differences (and the same tie structure) as the test
            // subject; small supports force plenty of rank ties
            b[i] = static_cast<double>(rng.uniform_int(256)) / 256.0;
            const double d =
                (static_cast<double>(rng.uniform_int(7)) - 3.0) * 0.125;  // -0.375..0.375
            a[i] = b[i] + d;
            if (d != 0.0) diffs.push_back(d);
        }
        if (diffs.size() < 6) continue;
        const auto r = wilcoxon_signed_rank(a, b);
        const auto o = oracle_wilcoxon(diffs);
        REQUIRE(r.exact);
        REQUIRE(r.n == diffs.size());
        REQUIRE(r.statistic == o.statistic);
        REQUIRE(r.p_value == o.p);  // identical counts -> identical doubles
        ++done;
    }
}

TEST_CASE("wilcoxon normal approximation tracks exact mode at n=12") {
    // Continuous draws: distinct |differences|, so no rank ties. (With heavy
    // ties the exact distribution has atoms of several percent and no normal
    // curve tracks it this closely; the enumeration test above covers ties.)
    Rng rng(derive_seed(14, "metrics-wilcoxon-approx"));
    int done = 0;
    while (done < 50) {
        std::vector<double> a(12), b(12);
        for (int i = 0; i < 12; ++i) {
            b[i] = rng.uniform(0.0, 1.0);
            a[i] = b[i] + rng.uniform(-0.5, 0.5);
        }
        const auto exact = wilcoxon_signed_rank(a, b);
        const auto approx = wilcoxon_signed_rank(a, b, /*exact_cutoff=*/0);
        REQUIRE(exact.exact);
        REQUIRE_FALSE(approx.exact);
        REQUIRE(exact.statistic == approx.statistic);
        CAPTURE(exact.p_value, approx.p_value, exact.statistic);
        REQUIRE(std::fabs(exact.p_value - approx.p_value) <= 0.02);
        ++done;
    }
}

TEST_CASE("wilcoxon large-n approximation is sane") {
    // 100 alternating-magnitude positive shifts: p must be tiny; and a
    // balanced +/- pattern must not be significant.
    std::vector<double> a(100), b(100);
    for (int i = 0; i < 100; ++i) {
        b[i] = 0.5;
        a[i] = 0.5 + 0.01 * (1 + (i % 7));
    }
    const auto strong = wilcoxon_signed_rank(a, b);
    REQUIRE_FALSE(strong.exact);
    REQUIRE(strong.p_value < 1e-10);

    for (int i = 0; i < 100; ++i) {
        a[i] = 0.5 + ((i % 2 == 0) ? 0.01 : -0.01) * (1 + (i % 5));
    }
    const auto balanced = wilcoxon_signed_rank(a, b);
    REQUIRE(balanced.p_value > 0.2);
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

namespace {

// Fixture: 8x8 maps, gt rows 0-1 class 1, rows 2-3 class 2, rows 4-5 class 3,
// rows 6-7 background. Variants corrupt decreasing numbers of pixels.
LabelMap fixture_gt(bool with_class3) {
    LabelMap m(8, 8);
    for (std::int64_t x = 0; x < 8; ++x) {
        m.at(0, x) = 1;
        m.at(1, x) = 1;
        m.at(2, x) = 2;
        m.at(3, x) = 2;
        if (with_class3) {
            m.at(4, x) = 3;
            m.at(5, x) = 3;
        }
    }
    return m;
}

LabelMap fixture_pred(const LabelMap& gt, int muscle_drop, int sat_to_vat) {
    LabelMap m = gt;
    for (int i = 0; i < muscle_drop; ++i) m.at(0, i) = 0;       // class 1 -> 0
    for (int i = 0; i < sat_to_vat; ++i) m.at(2, i) = 3;        // class 2 -> 3
    return m;
}

std::vector<VariantMetrics> fixture_variants() {
    const std::vector<std::string> ids{"s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7", "s8"};
    VariantMetrics initial{kVariantInitial, {}};
    VariantMetrics baseline{kVariantBaseline, {}};
    VariantMetrics transfer{kVariantTransfer, {}};
    for (int k = 0; k < 9; ++k) {
        const bool with_c3 = k != 8;  // s8 has no class-3 region at all
        const LabelMap gt = fixture_gt(with_c3);
        initial.samples.push_back(
            sample_metrics(ids[k], fixture_pred(gt, 4 + k % 3, 3), gt, 4));
        baseline.samples.push_back(
            sample_metrics(ids[k], fixture_pred(gt, 2 + k % 2, 1), gt, 4));
        transfer.samples.push_back(sample_metrics(ids[k], fixture_pred(gt, k % 2, 0), gt, 4));
    }
    return {initial, baseline, transfer};
}

const std::vector<std::string> kClassNames{"background", "muscle", "sat", "vat"};

}  // namespace

TEST_CASE("aggregate_report: single variant, constant metric") {
    VariantMetrics v{kVariantInitial, {}};
    for (int i = 0; i < 5; ++i) {
        SampleMetrics s;
        s.id = "id" + std::to_string(i);
        s.iou = {1.0, 0.9};
        s.dsc = {1.0, 0.9};
        s.rvd = {std::nullopt, 5.0};
        v.samples.push_back(s);
    }
    const auto rep = aggregate_report({v}, {"background", "fg"});
    REQUIRE(rep.variants.size() == 1);
    REQUIRE(rep.comparisons.empty());
    REQUIRE(rep.variants[0].dsc[1].mean == Catch::Approx(0.9));
    REQUIRE(rep.variants[0].dsc[1].stddev == 0.0);
    REQUIRE(rep.variants[0].rvd[1].count == 5);
    const std::string text = rep.render_text();
    REQUIRE(text.find("90.0±0.0") != std::string::npos);
    REQUIRE(text.find("Wilcoxon") == std::string::npos);
}

TEST_CASE("aggregate_report: undefined RVD renders as --") {
    VariantMetrics v{kVariantInitial, {}};
    for (int i = 0; i < 3; ++i) {
        SampleMetrics s;
        s.id = "id" + std::to_string(i);
        s.iou = {1.0, 1.0};
        s.dsc = {1.0, 1.0};
        s.rvd = {std::nullopt, std::nullopt};  // class absent from every gt
        v.samples.push_back(s);
    }
    const auto rep = aggregate_report({v}, {"background", "fg"});
    REQUIRE(rep.variants[0].rvd[1].count == 0);
    REQUIRE(rep.render_text().find("--") != std::string::npos);
}

TEST_CASE("aggregate_report: pairing violations") {
    auto variants = fixture_variants();
    SECTION("unpaired id") {
        variants[1].samples[3].id = "sX";
        REQUIRE_THROWS_AS(aggregate_report(variants, kClassNames), ConfigError);
    }
    SECTION("missing sample") {
        variants[2].samples.pop_back();
        REQUIRE_THROWS_AS(aggregate_report(variants, kClassNames), ConfigError);
    }
    SECTION("duplicate id") {
        variants[0].samples[1].id = variants[0].samples[0].id;
        REQUIRE_THROWS_AS(aggregate_report(variants, kClassNames), ConfigError);
    }
}

TEST_CASE("aggregate_report: three-variant fixture") {
    const auto rep = aggregate_report(fixture_variants(), kClassNames);
    REQUIRE(rep.sample_count == 9);
    REQUIRE(rep.variants.size() == 3);
    REQUIRE(rep.comparisons.size() == 2);

    // transfer must dominate initial on muscle DSC, and the p-values must be
    // small (every sample improves).
    const auto& init = rep.variants[0];
    const auto& xfer = rep.variants[2];
    REQUIRE(xfer.dsc[1].mean > init.dsc[1].mean);
    REQUIRE(xfer.dsc[2].mean > init.dsc[2].mean);
    for (const auto& cmp : rep.comparisons) {
        REQUIRE(cmp.dsc_p[1].has_value());
        REQUIRE(*cmp.dsc_p[1] < 0.05);
    }

    const auto j = rep.to_json();
    REQUIRE(j["schema"] == "segrefine-report-v1");
    REQUIRE(j["samples"] == 9);
    REQUIRE(j["variants"].size() == 3);
    REQUIRE(j["p_values"].size() == 2);
    REQUIRE(j["variants"][2]["name"] == kVariantTransfer);
    const double jm = j["variants"][2]["per_class"]["muscle"]["dsc"]["mean"];
    REQUIRE(jm == Catch::Approx(xfer.dsc[1].mean));
}

TEST_CASE("report text matches golden snapshot") {
    const auto rep = aggregate_report(fixture_variants(), kClassNames);
    const std::string text = rep.render_text();

    const char* regen = std::getenv("SEGREFINE_REGEN_GOLDEN");
    const std::string path = std::string(SEGREFINE_TEST_DIR) + "/golden/report_fixture.txt";
    if (regen != nullptr && std::string(regen) == "1") {
        std::ofstream out(path, std::ios::binary);
        out << text;
        SUCCEED("golden file regenerated");
        return;
    }
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    REQUIRE(text == ss.str());
}
