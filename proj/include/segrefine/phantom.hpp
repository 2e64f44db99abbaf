// Procedural phantom slices with known ground truth, and the corruption
// operators that degrade ground truth into "weak" labels.
//
// Anatomy (class ids fixed across the library):
//   0 background, 1 muscle-analog (two lateral lobes), 2 SAT-analog (outer
//   annulus), 3 VAT-analog (interior blobs).
// Class intensities come from overlapping Gaussians, so thresholding alone
// cannot separate them.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "segrefine/errors.hpp"
#include "segrefine/labelmap.hpp"
#include "segrefine/rng.hpp"
#include "segrefine/tensor.hpp"

namespace segrefine {

inline constexpr std::uint8_t kClassBackground = 0;
inline constexpr std::uint8_t kClassMuscle = 1;
inline constexpr std::uint8_t kClassSat = 2;
inline constexpr std::uint8_t kClassVat = 3;
inline constexpr std::int64_t kNumClasses = 4;

/// Fixed class display names, index = class id.
inline const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names{"background", "muscle", "sat", "vat"};
    return names;
}

struct PhantomSample {
    Tensor<float> image;  // [1,H,W], values in [0,1]
    LabelMap gt;
};

namespace detail {

struct Ellipse {
    double cy, cx, ry, rx;
    bool contains(double y, double x) const {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dy * dy + dx * dx <= 1.0;
    }
};

inline void paint_ellipse(LabelMap& m, const Ellipse& e, std::uint8_t cls,
                          const Ellipse* clip, bool only_background) {
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(e.cy - e.ry) - 1);
    const auto y1 = std::min<std::int64_t>(m.h - 1, static_cast<std::int64_t>(e.cy + e.ry) + 1);
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(e.cx - e.rx) - 1);
    const auto x1 = std::min<std::int64_t>(m.w - 1, static_cast<std::int64_t>(e.cx + e.rx) + 1);
    for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
            if (!e.contains(double(y), double(x))) continue;
            if (clip != nullptr && !clip->contains(double(y), double(x))) continue;
            if (only_background && m.at(y, x) != kClassBackground) continue;
            m.at(y, x) = cls;
        }
    }
}

}  // namespace detail

/// Deterministic phantom for one seed. Geometry is rejection-resampled until
/// every class covers >= 1% of the pixels, then intensities are drawn.
inline PhantomSample generate_phantom(std::uint64_t seed, std::int64_t h, std::int64_t w) {
    if (h < 32 || w < 32) {
        throw ConfigError("generate_phantom: dims " + std::to_string(h) + "x" +
                          std::to_string(w) + " too small to fit the anatomy (need >= 32)");
    }
    Rng rng(seed);
    const auto hd = static_cast<double>(h), wd = static_cast<double>(w);
    const std::int64_t min_pixels = std::max<std::int64_t>(1, h * w / 100);

    LabelMap gt;
    bool accepted = false;
    for (int attempt = 0; attempt < 64 && !accepted; ++attempt) {
        gt = LabelMap(h, w, kClassBackground);

        // body outline and the SAT annulus between body and interior
        detail::Ellipse body;
        body.cy = hd * (0.5 + rng.uniform(-0.03, 0.03));
        body.cx = wd * (0.5 + rng.uniform(-0.03, 0.03));
        body.ry = hd * rng.uniform(0.38, 0.44);
        body.rx = wd * rng.uniform(0.40, 0.47);
        const double s_in = rng.uniform(0.72, 0.82);
        detail::Ellipse inner{body.cy, body.cx, body.ry * s_in, body.rx * s_in};
        detail::paint_ellipse(gt, body, kClassSat, nullptr, false);
        detail::paint_ellipse(gt, inner, kClassBackground, nullptr, false);

        // two lateral muscle lobes inside the interior
        for (double side : {-1.0, 1.0}) {
            detail::Ellipse lobe;
            lobe.cy = inner.cy + inner.ry * rng.uniform(-0.12, 0.12);
            lobe.cx = inner.cx + side * inner.rx * rng.uniform(0.50, 0.60);
            lobe.ry = inner.ry * rng.uniform(0.36, 0.48);
            lobe.rx = inner.rx * rng.uniform(0.18, 0.26);
            detail::paint_ellipse(gt, lobe, kClassMuscle, &inner, true);
        }

        // 2-4 central VAT blobs, never overwriting muscle. Sized so VAT
        // covers a few percent of the slice; much smaller and the SAT->VAT
        // corruption mode would swamp the class entirely.
        const int blobs = 2 + static_cast<int>(rng.uniform_int(3));
        for (int b = 0; b < blobs; ++b) {
            detail::Ellipse blob;
            blob.cy = inner.cy + inner.ry * rng.uniform(-0.50, 0.50);
            blob.cx = inner.cx + inner.rx * rng.uniform(-0.30, 0.30);
            blob.ry = inner.ry * rng.uniform(0.22, 0.36);
            blob.rx = inner.rx * rng.uniform(0.22, 0.36);
            detail::paint_ellipse(gt, blob, kClassVat, &inner, true);
        }

        std::vector<std::int64_t> counts(kNumClasses, 0);
        for (std::uint8_t v : gt.v) ++counts[v];
        accepted = std::all_of(counts.begin(), counts.end(),
                               [&](std::int64_t c) { return c >= min_pixels; });
    }
    if (!accepted) {
        throw NumericalError("generate_phantom: geometry rejection did not converge for seed " +
                             std::to_string(seed));
    }

    // class-conditional intensities: bg/muscle/SAT/VAT overlap deliberately
    static constexpr double kMeans[kNumClasses] = {0.3, 0.5, 0.7, 0.6};
    static constexpr double kSigma = 0.08;
    std::vector<float> img(gt.v.size());
    for (std::size_t i = 0; i < gt.v.size(); ++i) {
        const double val = rng.normal(kMeans[gt.v[i]], kSigma);
        img[i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }

    PhantomSample out;
    out.image = Tensor<float>::from_data({1, h, w}, img);
    out.gt = std::move(gt);
    return out;
}

// ---------------------------------------------------------------------------
// Corruption into weak labels
// ---------------------------------------------------------------------------

/// Knobs of the weak-label corruption model. Defaults are calibrated so the
/// per-class DSC of corrupted vs. true labels lands in [0.60, 0.85] on the
/// default corpus (the regime the refinement loop starts from).
struct CorruptionConfig {
    double p_drop = 0.5;              // chance of deleting one muscle component
    double swap_fraction = 0.22;      // fraction of SAT area relabeled as VAT
    std::int64_t boundary_noise_px = 1;  // max morphological jitter radius
    std::uint64_t seed = 0;

    void validate() const {
        if (p_drop < 0.0 || p_drop > 1.0) {
            throw ConfigError("CorruptionConfig: p_drop must be in [0,1]");
        }
        if (swap_fraction < 0.0 || swap_fraction > 1.0) {
            throw ConfigError("CorruptionConfig: swap_fraction must be in [0,1]");
        }
        if (boundary_noise_px < 0) {
            throw ConfigError("CorruptionConfig: boundary_noise_px must be >= 0");
        }
    }
};

/// 4-connected components of one class, as lists of flat pixel indices.
/// Component order is deterministic (by smallest contained index).
inline std::vector<std::vector<std::int64_t>> connected_components(const LabelMap& m,
                                                                   std::uint8_t cls) {
    std::vector<std::vector<std::int64_t>> comps;
    std::vector<char> seen(m.v.size(), 0);
    std::vector<std::int64_t> stack;
    for (std::int64_t start = 0; start < m.numel(); ++start) {
        if (m.v[static_cast<std::size_t>(start)] != cls || seen[static_cast<std::size_t>(start)]) {
            continue;
        }
        comps.emplace_back();
        auto& comp = comps.back();
        stack.assign(1, start);
        seen[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            const std::int64_t p = stack.back();
            stack.pop_back();
            comp.push_back(p);
            const std::int64_t y = p / m.w, x = p % m.w;
            const std::int64_t ns[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& n : ns) {
                if (n[0] < 0 || n[0] >= m.h || n[1] < 0 || n[1] >= m.w) continue;
                const std::int64_t q = n[0] * m.w + n[1];
                if (!seen[static_cast<std::size_t>(q)] &&
                    m.v[static_cast<std::size_t>(q)] == cls) {
                    seen[static_cast<std::size_t>(q)] = 1;
                    stack.push_back(q);
                }
            }
        }
    }
    return comps;
}

namespace detail {

inline void dilate_class(LabelMap& m, std::uint8_t cls) {
    const LabelMap src = m;
    for (std::int64_t y = 0; y < m.h; ++y) {
        for (std::int64_t x = 0; x < m.w; ++x) {
            if (src.at(y, x) == cls) continue;
            const bool touch = (y > 0 && src.at(y - 1, x) == cls) ||
                               (y + 1 < m.h && src.at(y + 1, x) == cls) ||
                               (x > 0 && src.at(y, x - 1) == cls) ||
                               (x + 1 < m.w && src.at(y, x + 1) == cls);
            if (touch) m.at(y, x) = cls;
        }
    }
}

inline void erode_class(LabelMap& m, std::uint8_t cls) {
    const LabelMap src = m;
    for (std::int64_t y = 0; y < m.h; ++y) {
        for (std::int64_t x = 0; x < m.w; ++x) {
            if (src.at(y, x) != cls) continue;
            const bool edge = y == 0 || y + 1 == m.h || x == 0 || x + 1 == m.w ||
                              src.at(y - 1, x) != cls || src.at(y + 1, x) != cls ||
                              src.at(y, x - 1) != cls || src.at(y, x + 1) != cls;
            if (edge) m.at(y, x) = kClassBackground;
        }
    }
}

}  // namespace detail

/// Degrades a ground-truth map into a weak label: maybe drops one muscle
/// component, relabels a contiguous angular SAT sector as VAT, then jitters
/// each foreground boundary by a random radius up to boundary_noise_px.
/// The input map is never modified; absent classes make the ops no-ops.
inline LabelMap corrupt_label(const LabelMap& gt, const CorruptionConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    LabelMap weak = gt;

    // mode 1: miss a muscle component entirely
    const bool drop = rng.uniform() < cfg.p_drop;
    if (drop) {
        const auto comps = connected_components(weak, kClassMuscle);
        if (!comps.empty()) {
            const auto pick = rng.uniform_int(comps.size());
            for (const std::int64_t p : comps[static_cast<std::size_t>(pick)]) {
                weak.v[static_cast<std::size_t>(p)] = kClassBackground;
            }
        }
    }

    // mode 2: relabel an angular SAT sector as VAT. The sector is contiguous
    // by construction: SAT pixels sorted by angle from a random ray, first
    // round(fraction * area) taken.
    if (cfg.swap_fraction > 0.0) {
        std::vector<std::int64_t> sat;
        double cy = 0.0, cx = 0.0;
        for (std::int64_t p = 0; p < weak.numel(); ++p) {
            if (weak.v[static_cast<std::size_t>(p)] == kClassSat) {
                sat.push_back(p);
                cy += static_cast<double>(p / weak.w);
                cx += static_cast<double>(p % weak.w);
            }
        }
        if (!sat.empty()) {
            cy /= static_cast<double>(sat.size());
            cx /= static_cast<double>(sat.size());
            const double theta0 = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const auto target = static_cast<std::int64_t>(
                std::llround(cfg.swap_fraction * static_cast<double>(sat.size())));
            std::vector<std::pair<double, std::int64_t>> by_angle;
            by_angle.reserve(sat.size());
            for (const std::int64_t p : sat) {
                const double ang = std::atan2(static_cast<double>(p / weak.w) - cy,
                                              static_cast<double>(p % weak.w) - cx);
                double off = ang - theta0;
                while (off < 0.0) off += 2.0 * 3.14159265358979323846;
                by_angle.emplace_back(off, p);
            }
            std::sort(by_angle.begin(), by_angle.end());
            for (std::int64_t i = 0; i < target && i < std::ssize(by_angle); ++i) {
                weak.v[static_cast<std::size_t>(by_angle[static_cast<std::size_t>(i)].second)] =
                    kClassVat;
            }
        }
    }

    // mode 3: per-class boundary jitter, radius drawn in [0, boundary_noise_px]
    for (const std::uint8_t cls : {kClassMuscle, kClassSat, kClassVat}) {
        const auto radius = static_cast<std::int64_t>(
            rng.uniform_int(static_cast<std::uint64_t>(cfg.boundary_noise_px) + 1));
        const bool grow = rng.uniform() < 0.5;
        for (std::int64_t r = 0; r < radius; ++r) {
            if (grow) {
                detail::dilate_class(weak, cls);
            } else {
                detail::erode_class(weak, cls);
            }
        }
    }
    return weak;
}

}  // namespace segrefine
