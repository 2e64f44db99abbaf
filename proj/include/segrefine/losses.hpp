// Training objectives: generalized Dice loss over one-hot references with
// per-batch inverse-square-frequency class weights, a mean-squared
// cross-consistency term between the two decoders, a normalized-entropy
// confidence term, and their ramped weighted sum for mixed-supervision
// fine-tuning.
//
// Each loss is a custom graph op with an analytic backward rule; internal
// reductions accumulate in double regardless of T.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "segrefine/labelmap.hpp"
#include "segrefine/nn_ops.hpp"
#include "segrefine/tensor.hpp"

namespace segrefine {

struct LossWeights {
    double lambda_cc = 0.3;
    double lambda_conf = 0.1;
    int rampup_epochs = 10;
};

/// Linear ramp: lambda * min(1, epoch/rampup); full weight immediately when
/// rampup is 0. `epoch` is 0-based and phase-relative.
inline double effective_lambda(double lambda, int rampup_epochs, int epoch) {
    if (lambda == 0.0) return 0.0;
    if (rampup_epochs <= 0) return lambda;
    const double f = static_cast<double>(epoch) / static_cast<double>(rampup_epochs);
    return lambda * (f < 1.0 ? f : 1.0);
}

namespace detail {
template <typename T>
void check_probs_simplex(const char* op, const Tensor<T>& probs) {
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    const std::int64_t hw = probs.dim(2) * probs.dim(3);
    const double tol = 64.0 * static_cast<double>(std::numeric_limits<T>::epsilon()) *
                       static_cast<double>(c);
    const auto& pv = probs.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const T* base = pv.data() + i * c * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            double s = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) s += static_cast<double>(base[ch * hw + p]);
            if (std::abs(s - 1.0) > tol) {
                throw NumericalError(std::string(op) +
                                     ": input is not a per-pixel probability simplex "
                                     "(channel sum " + std::to_string(s) + ")");
            }
        }
    }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Generalized Dice loss

/// loss = 1 - 2*(sum_l w_l sum_n r*p) / (sum_l w_l sum_n (r+p) + eps_den)
/// with w_l = 1/((sum_n r_ln)^2 + eps_w), weights computed from the reference
/// batch itself. w_l depends only on the labels, so the gradient in p is
/// exact with w treated constant. eps_den is kept far below eps_w so a
/// perfect prediction scores ~0 instead of an eps_w-sized floor.
template <typename T>
Tensor<T> generalized_dice_loss(const Tensor<T>& probs, const std::vector<LabelMap>& reference,
                                double eps_w = 1e-6, double eps_den = 1e-12) {
    if (probs.rank() != 4) throw ShapeError("generalized_dice_loss: probs must be [N,C,H,W]");
    if (reference.empty()) throw ShapeError("generalized_dice_loss: empty batch");
    const std::int64_t n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    if (static_cast<std::int64_t>(reference.size()) != n) {
        throw ShapeError("generalized_dice_loss: batch size mismatch (probs " +
                         std::to_string(n) + ", reference " +
                         std::to_string(reference.size()) + ")");
    }
    for (const auto& m : reference) {
        if (m.h != h || m.w != w) {
            throw ShapeError("generalized_dice_loss: reference map size mismatch");
        }
    }
    detail::check_probs_simplex("generalized_dice_loss", probs);

    const auto counts = class_pixel_counts(reference, c);  // validates values < C
    auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
    for (std::int64_t l = 0; l < c; ++l) {
        const double cl = static_cast<double>(counts[static_cast<std::size_t>(l)]);
        (*weights)[static_cast<std::size_t>(l)] = 1.0 / (cl * cl + eps_w);
    }

    const std::int64_t hw = h * w;
    const auto& pv = probs.data();
    double num = 0.0, den = eps_den;
    for (std::int64_t l = 0; l < c; ++l) {
        double inter = 0.0, psum = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const auto& m = reference[static_cast<std::size_t>(i)];
            const T* plane = pv.data() + (i * c + l) * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                const double pd = static_cast<double>(plane[p]);
                psum += pd;
                if (m.v[static_cast<std::size_t>(p)] == l) inter += pd;
            }
        }
        const double wl = (*weights)[static_cast<std::size_t>(l)];
        num += wl * inter;
        den += wl * (static_cast<double>(counts[static_cast<std::size_t>(l)]) + psum);
    }
    const double loss = 1.0 - 2.0 * num / den;
    auto out = Tensor<T>::scalar(static_cast<T>(loss));

    auto pi = probs.impl();
    auto ref = std::make_shared<std::vector<LabelMap>>(reference);
    detail::attach_node<T>("generalized_dice_loss", out, {probs},
                           [pi, ref, weights, num, den, n, c, hw](const TensorImpl<T>& o) {
        auto& dp = detail::ensure_grad(*pi);
        const double go = static_cast<double>(o.grad[0]);
        for (std::int64_t l = 0; l < c; ++l) {
            const double wl = (*weights)[static_cast<std::size_t>(l)];
            for (std::int64_t i = 0; i < n; ++i) {
                const auto& m = (*ref)[static_cast<std::size_t>(i)];
                T* gplane = dp.data() + (i * c + l) * hw;
                for (std::int64_t p = 0; p < hw; ++p) {
                    const double r = m.v[static_cast<std::size_t>(p)] == l ? 1.0 : 0.0;
                    const double d = -2.0 * wl * (r * den - num) / (den * den);
                    gplane[p] += static_cast<T>(go * d);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Cross-consistency loss

/// Mean over every element of (p_strong - p_weak)^2. Symmetric; gradients
/// flow to both inputs.
template <typename T>
Tensor<T> cross_consistency_loss(const Tensor<T>& probs_a, const Tensor<T>& probs_b) {
    if (probs_a.shape() != probs_b.shape()) {
        throw ShapeError("cross_consistency_loss: shape mismatch " +
                         shape_str(probs_a.shape()) + " vs " + shape_str(probs_b.shape()));
    }
    const auto& av = probs_a.data();
    const auto& bv = probs_b.data();
    const std::int64_t m = probs_a.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    auto out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m)));

    auto ai = probs_a.impl();
    auto bi = probs_b.impl();
    detail::attach_node<T>("cross_consistency_loss", out, {probs_a, probs_b},
                           [ai, bi, m](const TensorImpl<T>& o) {
        const double go = static_cast<double>(o.grad[0]);
        const double inv_m = 1.0 / static_cast<double>(m);
        const bool need_a = ai->requires_grad || ai->grad_fn;
        const bool need_b = bi->requires_grad || bi->grad_fn;
        if (need_a) detail::ensure_grad(*ai);
        if (need_b) detail::ensure_grad(*bi);
        for (std::int64_t i = 0; i < m; ++i) {
            const double d = static_cast<double>(ai->data[i]) - static_cast<double>(bi->data[i]);
            const double g = go * 2.0 * d * inv_m;
            if (need_a) ai->grad[i] += static_cast<T>(g);
            if (need_b) bi->grad[i] -= static_cast<T>(g);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Confidence loss

/// Mean per-pixel Shannon entropy normalized by log C, clamped to [0,1]:
/// 0 at one-hot predictions, 1 at uniform ones. log eps keeps log finite at
/// p=0; the clamp absorbs the tiny negative it would otherwise produce at
/// exact one-hots.
template <typename T>
Tensor<T> confidence_loss(const Tensor<T>& probs, double log_eps = 1e-8) {
    if (probs.rank() != 4) throw ShapeError("confidence_loss: probs must be [N,C,H,W]");
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    const std::int64_t hw = probs.dim(2) * probs.dim(3);
    const std::int64_t npix = n * hw;
    const double logc = std::log(static_cast<double>(c));
    const auto& pv = probs.data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T* base = pv.data() + i * c * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            double e = 0.0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double pd = static_cast<double>(base[ch * hw + p]);
                e -= pd * std::log(pd + log_eps);
            }
            acc += e;
        }
    }
    const double raw = acc / (static_cast<double>(npix) * logc);
    const bool clamped = raw < 0.0 || raw > 1.0;
    const double value = raw < 0.0 ? 0.0 : (raw > 1.0 ? 1.0 : raw);
    auto out = Tensor<T>::scalar(static_cast<T>(value));

    auto pi = probs.impl();
    detail::attach_node<T>("confidence_loss", out, {probs},
                           [pi, n, c, hw, npix, logc, log_eps, clamped](const TensorImpl<T>& o) {
        if (clamped) return;  // flat region of the clamp
        auto& dp = detail::ensure_grad(*pi);
        const double go = static_cast<double>(o.grad[0]);
        const double scale = go / (static_cast<double>(npix) * logc);
        for (std::int64_t i = 0; i < n; ++i) {
            const T* base = pi->data.data() + i * c * hw;
            T* gbase = dp.data() + i * c * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double pd = static_cast<double>(base[ch * hw + p]);
                    const double d = -(std::log(pd + log_eps) + pd / (pd + log_eps));
                    gbase[ch * hw + p] += static_cast<T>(scale * d);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Phase-2 composite

template <typename T>
struct Phase2Loss {
    Tensor<T> total;
    double gdl_strong = 0.0;
    double gdl_weak = 0.0;
    double cross_consistency = 0.0;
    double confidence = 0.0;
    double lambda_cc_eff = 0.0;
    double lambda_conf_eff = 0.0;
};

/// total = GDL(strong branch on strong batch) + GDL(weak branch on weak batch)
///       + l_cc(t)*CC(strong vs weak probs on the weak batch)
///       + l_conf(t)*(conf(strong probs)+conf(weak probs))/2.
/// Ramped-to-zero terms are left out of the graph entirely, so with zero
/// lambdas the total is bitwise the plain two-term supervised sum.
template <typename T>
Phase2Loss<T> phase2_total_loss(const Tensor<T>& strong_logits_on_strong,
                                const Tensor<T>& weak_logits_on_weak,
                                const Tensor<T>& strong_probs_on_weak,
                                const Tensor<T>& weak_probs_on_weak,
                                const std::vector<LabelMap>& strong_labels,
                                const std::vector<LabelMap>& weak_labels,
                                const LossWeights& weights, int epoch) {
    Phase2Loss<T> out;
    out.lambda_cc_eff = effective_lambda(weights.lambda_cc, weights.rampup_epochs, epoch);
    out.lambda_conf_eff = effective_lambda(weights.lambda_conf, weights.rampup_epochs, epoch);

    auto gdl_s = generalized_dice_loss(softmax_channels(strong_logits_on_strong), strong_labels);
    auto gdl_w = generalized_dice_loss(softmax_channels(weak_logits_on_weak), weak_labels);
    out.gdl_strong = static_cast<double>(gdl_s.item());
    out.gdl_weak = static_cast<double>(gdl_w.item());
    Tensor<T> total = add(gdl_s, gdl_w);

    auto cc = cross_consistency_loss(strong_probs_on_weak, weak_probs_on_weak);
    out.cross_consistency = static_cast<double>(cc.item());
    if (out.lambda_cc_eff > 0.0) {
        total = add(total, scale(cc, static_cast<T>(out.lambda_cc_eff)));
    }

    auto conf_s = confidence_loss(strong_probs_on_weak);
    auto conf_w = confidence_loss(weak_probs_on_weak);
    out.confidence =
        (static_cast<double>(conf_s.item()) + static_cast<double>(conf_w.item())) / 2.0;
    if (out.lambda_conf_eff > 0.0) {
        auto half = scale(add(conf_s, conf_w), static_cast<T>(out.lambda_conf_eff * 0.5));
        total = add(total, half);
    }
    out.total = total;
    return out;
}

}  // namespace segrefine
