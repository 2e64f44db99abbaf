// Loss terms vs. hand oracles: generalized Dice with per-batch class weights,
// cross-consistency MSE, normalized-entropy confidence, ramped composite.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "segrefine/losses.hpp"
#include "segrefine/rng.hpp"

using namespace segrefine;

namespace {

std::vector<LabelMap> checker_labels(std::int64_t n, std::int64_t h, std::int64_t w,
                                     std::int64_t c) {
    std::vector<LabelMap> maps;
    for (std::int64_t i = 0; i < n; ++i) {
        LabelMap m(h, w);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                m.at(y, x) = static_cast<std::uint8_t>((x + y + i) % c);
        maps.push_back(std::move(m));
    }
    return maps;
}

// Direct scalar evaluation of the generalized Dice formula, independent of
// the tensor path.
double gdl_oracle(const std::vector<double>& probs, const std::vector<LabelMap>& ref,
                  std::int64_t c, double eps_w = 1e-6, double eps_den = 1e-12) {
    const std::int64_t n = static_cast<std::int64_t>(ref.size());
    const std::int64_t hw = ref[0].numel();
    std::vector<double> counts(static_cast<std::size_t>(c), 0.0);
    for (const auto& m : ref)
        for (auto v : m.v) counts[v] += 1.0;
    double num = 0.0, den = eps_den;
    for (std::int64_t l = 0; l < c; ++l) {
        const double wl = 1.0 / (counts[static_cast<std::size_t>(l)] * counts[static_cast<std::size_t>(l)] + eps_w);
        double inter = 0.0, psum = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                const double pd = probs[static_cast<std::size_t>((i * c + l) * hw + p)];
                psum += pd;
                if (ref[static_cast<std::size_t>(i)].v[static_cast<std::size_t>(p)] == l) inter += pd;
            }
        num += wl * inter;
        den += wl * (counts[static_cast<std::size_t>(l)] + psum);
    }
    return 1.0 - 2.0 * num / den;
}

}  // namespace

TEST_CASE("gdl: exact one-hot prediction scores ~0") {
    auto ref = checker_labels(2, 8, 8, 4);
    auto probs = one_hot_batch<double>(ref, 4);
    const double loss = generalized_dice_loss(probs, ref).item();
    REQUIRE(loss >= 0.0);
    REQUIRE(loss <= 1e-6);
}

TEST_CASE("gdl: uniform probs match the direct-formula oracle") {
    auto ref = checker_labels(2, 6, 6, 4);
    auto probs = TensorD::full({2, 4, 6, 6}, 0.25);
    const double got = generalized_dice_loss(probs, ref).item();
    const double want = gdl_oracle(probs.data(), ref, 4);
    REQUIRE(got == Catch::Approx(want).margin(1e-6));
}

TEST_CASE("gdl: random softmax probs match the oracle") {
    Rng rng(55);
    auto logits = TensorD::zeros({2, 4, 5, 5});
    for (auto& v : logits.mutable_data()) v = rng.uniform(-2.0, 2.0);
    auto probs = softmax_channels(logits);
    std::vector<LabelMap> ref;
    for (int i = 0; i < 2; ++i) {
        LabelMap m(5, 5);
        for (auto& v : m.v) v = static_cast<std::uint8_t>(rng.uniform_int(4));
        ref.push_back(std::move(m));
    }
    const double got = generalized_dice_loss(probs, ref).item();
    const double want = gdl_oracle(probs.data(), ref, 4);
    REQUIRE(got == Catch::Approx(want).margin(1e-6));
    REQUIRE(got >= 0.0);
    REQUIRE(got <= 1.0 + 1e-4);
}

TEST_CASE("gdl: a class absent from the reference stays finite") {
    auto ref = checker_labels(1, 4, 4, 2);  // classes 0,1 only; C=4
    auto probs = TensorD::full({1, 4, 4, 4}, 0.25);
    const double loss = generalized_dice_loss(probs, ref).item();
    REQUIRE(std::isfinite(loss));
}

TEST_CASE("gdl: input validation") {
    auto ref = checker_labels(1, 4, 4, 4);
    auto probs = TensorD::full({1, 4, 4, 4}, 0.25);
    REQUIRE_THROWS_AS(generalized_dice_loss(probs, {}), ShapeError);  // empty batch
    auto two = checker_labels(2, 4, 4, 4);
    REQUIRE_THROWS_AS(generalized_dice_loss(probs, two), ShapeError);  // batch mismatch

    LabelMap bad(4, 4);
    bad.v.assign(16, 7);  // class 7 >= C=4
    REQUIRE_THROWS_AS(generalized_dice_loss(probs, {bad}), ShapeError);

    auto not_probs = TensorD::full({1, 4, 4, 4}, 0.3);  // channel sum 1.2
    REQUIRE_THROWS_AS(generalized_dice_loss(not_probs, ref), NumericalError);
}

TEST_CASE("cross-consistency: zero on identical inputs, 2/C on disjoint one-hots") {
    auto ref = checker_labels(2, 4, 4, 4);
    auto a = one_hot_batch<double>(ref, 4);
    REQUIRE(cross_consistency_loss(a, a).item() == 0.0);

    // Shift every label by one class: one-hots disagree at every pixel, and
    // each pixel contributes 2 squared units over C channels.
    auto shifted = ref;
    for (auto& m : shifted)
        for (auto& v : m.v) v = static_cast<std::uint8_t>((v + 1) % 4);
    auto b = one_hot_batch<double>(shifted, 4);
    REQUIRE(cross_consistency_loss(a, b).item() == Catch::Approx(2.0 / 4.0).margin(1e-12));
}

TEST_CASE("cross-consistency: symmetric bitwise, rejects shape mismatch") {
    Rng rng(66);
    auto a = TensorD::zeros({2, 3, 4, 4});
    auto b = TensorD::zeros({2, 3, 4, 4});
    for (auto& v : a.mutable_data()) v = rng.uniform();
    for (auto& v : b.mutable_data()) v = rng.uniform();
    REQUIRE(cross_consistency_loss(a, b).item() == cross_consistency_loss(b, a).item());
    auto c = TensorD::zeros({2, 3, 4, 5});
    REQUIRE_THROWS_AS(cross_consistency_loss(a, c), ShapeError);
}

TEST_CASE("confidence: 0 at one-hot, 1 at uniform, ln2/ln4 at half-half") {
    auto ref = checker_labels(1, 4, 4, 4);
    auto onehot = one_hot_batch<double>(ref, 4);
    const double at_onehot = confidence_loss(onehot).item();
    REQUIRE(at_onehot >= 0.0);
    REQUIRE(at_onehot <= 1e-6);

    auto uniform = TensorD::full({1, 4, 4, 4}, 0.25);
    const double at_uniform = confidence_loss(uniform).item();
    REQUIRE(at_uniform == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(at_uniform <= 1.0);

    auto half = TensorD::zeros({1, 4, 2, 2});
    for (std::int64_t p = 0; p < 4; ++p) {
        half.mutable_data()[static_cast<std::size_t>(0 * 4 + p)] = 0.5;
        half.mutable_data()[static_cast<std::size_t>(1 * 4 + p)] = 0.5;
    }
    REQUIRE(confidence_loss(half).item() ==
            Catch::Approx(std::log(2.0) / std::log(4.0)).margin(1e-4));
}

TEST_CASE("effective lambda ramps linearly and monotonically") {
    REQUIRE(effective_lambda(0.3, 10, 0) == 0.0);
    REQUIRE(effective_lambda(0.3, 10, 5) == Catch::Approx(0.15));
    REQUIRE(effective_lambda(0.3, 10, 10) == Catch::Approx(0.3));
    REQUIRE(effective_lambda(0.3, 10, 50) == Catch::Approx(0.3));
    REQUIRE(effective_lambda(0.3, 0, 0) == Catch::Approx(0.3));  // no ramp
    double prev = -1.0;
    for (int t = 0; t < 30; ++t) {
        const double cur = effective_lambda(0.25, 12, t);
        REQUIRE(cur >= prev);
        prev = cur;
    }
}

namespace {
struct Phase2Fixture {
    TensorD strong_logits, weak_logits, strong_probs, weak_probs;
    std::vector<LabelMap> strong_labels, weak_labels;

    explicit Phase2Fixture(std::uint64_t seed) {
        Rng rng(seed);
        auto rand_logits = [&](Shape s) {
            auto t = TensorD::zeros(std::move(s));
            for (auto& v : t.mutable_data()) v = rng.uniform(-2.0, 2.0);
            return t;
        };
        strong_logits = rand_logits({2, 4, 6, 6});
        weak_logits = rand_logits({2, 4, 6, 6});
        strong_probs = softmax_channels(rand_logits({2, 4, 6, 6}));
        weak_probs = softmax_channels(weak_logits);
        strong_labels = checker_labels(2, 6, 6, 4);
        weak_labels = checker_labels(2, 6, 6, 3);
    }
};
}  // namespace

TEST_CASE("phase2: zero lambdas give bitwise the two-term supervised sum") {
    Phase2Fixture f(77);
    LossWeights w;
    w.lambda_cc = 0.0;
    w.lambda_conf = 0.0;
    auto got = phase2_total_loss(f.strong_logits, f.weak_logits, f.strong_probs,
                                 f.weak_probs, f.strong_labels, f.weak_labels, w, 50);
    auto plain = add(generalized_dice_loss(softmax_channels(f.strong_logits), f.strong_labels),
                     generalized_dice_loss(softmax_channels(f.weak_logits), f.weak_labels));
    REQUIRE(got.total.item() == plain.item());
    REQUIRE(got.lambda_cc_eff == 0.0);
    REQUIRE(got.lambda_conf_eff == 0.0);
}

TEST_CASE("phase2: epoch 0 of a 10-epoch ramp is supervised-only") {
    Phase2Fixture f(78);
    LossWeights w;  // defaults: 0.3 / 0.1 / rampup 10
    auto got = phase2_total_loss(f.strong_logits, f.weak_logits, f.strong_probs,
                                 f.weak_probs, f.strong_labels, f.weak_labels, w, 0);
    auto plain = add(generalized_dice_loss(softmax_channels(f.strong_logits), f.strong_labels),
                     generalized_dice_loss(softmax_channels(f.weak_logits), f.weak_labels));
    REQUIRE(got.total.item() == plain.item());
}

TEST_CASE("phase2: random batch matches a flat recomputation of the four terms") {
    Phase2Fixture f(79);
    LossWeights w;
    const int epoch = 7;  // mid-ramp
    auto got = phase2_total_loss(f.strong_logits, f.weak_logits, f.strong_probs,
                                 f.weak_probs, f.strong_labels, f.weak_labels, w, epoch);

    const double lcc = 0.3 * 7.0 / 10.0;
    const double lconf = 0.1 * 7.0 / 10.0;
    double flat = 0.0;
    {
        NoGradGuard guard;
        auto sp = softmax_channels(f.strong_logits);
        auto wp = softmax_channels(f.weak_logits);
        flat += gdl_oracle(sp.data(), f.strong_labels, 4);
        flat += gdl_oracle(wp.data(), f.weak_labels, 4);
        double cc = 0.0;
        for (std::size_t i = 0; i < f.strong_probs.data().size(); ++i) {
            const double d = f.strong_probs.data()[i] - f.weak_probs.data()[i];
            cc += d * d;
        }
        cc /= static_cast<double>(f.strong_probs.numel());
        flat += lcc * cc;
        auto entropy = [](const TensorD& probs) {
            double acc = 0.0;
            for (double p : probs.data()) acc -= p * std::log(p + 1e-8);
            return acc / (static_cast<double>(probs.numel() / 4) * std::log(4.0));
        };
        flat += lconf * (entropy(f.strong_probs) + entropy(f.weak_probs)) / 2.0;
    }
    REQUIRE(got.total.item() == Catch::Approx(flat).margin(1e-5));
    REQUIRE(got.lambda_cc_eff == Catch::Approx(lcc));
    REQUIRE(got.lambda_conf_eff == Catch::Approx(lconf));
    // Breakdown is consistent with the total.
    const double rebuilt = got.gdl_strong + got.gdl_weak +
                           got.lambda_cc_eff * got.cross_consistency +
                           got.lambda_conf_eff * got.confidence;
    REQUIRE(got.total.item() == Catch::Approx(rebuilt).margin(1e-9));
}
