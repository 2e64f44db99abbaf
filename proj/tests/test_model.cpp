// Dual-branch network: construction, shapes, determinism, parameter count,
// branch selection, encoder freeze, decoder cloning.
#include <catch2/catch_amalgamated.hpp>

#include <cstdint>

#include "segrefine/adam.hpp"
#include "segrefine/losses.hpp"
#include "segrefine/model.hpp"
#include "segrefine/rng.hpp"

using namespace segrefine;

namespace {
TensorF random_images(std::int64_t n, std::int64_t h, std::int64_t w, std::uint64_t seed) {
    Rng rng(seed);
    auto t = TensorF::zeros({n, 1, h, w});
    for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform());
    return t;
}

std::vector<LabelMap> random_labels(std::int64_t n, std::int64_t h, std::int64_t w,
                                    std::int64_t c, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LabelMap> maps;
    for (std::int64_t i = 0; i < n; ++i) {
        LabelMap m(h, w);
        for (auto& v : m.v) v = static_cast<std::uint8_t>(rng.uniform_int(static_cast<std::uint64_t>(c)));
        maps.push_back(std::move(m));
    }
    return maps;
}
}  // namespace

TEST_CASE("default config forward produces [N,C,H,W] logits") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 7);
    auto images = random_images(1, 64, 64, 1);
    auto out = net.forward(images, Branch::Both);
    REQUIRE(out.strong.shape() == Shape{1, 4, 64, 64});
    REQUIRE(out.weak.shape() == Shape{1, 4, 64, 64});
    // Independent decoder init: same architecture, different values.
    REQUIRE(out.strong.data() != out.weak.data());
}

TEST_CASE("same seed builds bit-identical parameters") {
    auto a = DualBranchNet<float>::build(ModelConfig{}, 99);
    auto b = DualBranchNet<float>::build(ModelConfig{}, 99);
    auto pa = a.all_params();
    auto pb = b.all_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->name == pb[i]->name);
        REQUIRE(pa[i]->value.data() == pb[i]->value.data());
    }
    auto c = DualBranchNet<float>::build(ModelConfig{}, 100);
    REQUIRE(c.all_params()[0]->value.data() != pa[0]->value.data());
}

TEST_CASE("parameter count equals the hand-computed closed form") {
    // Per unit: conv w = oc*ic*k^2, conv b = oc, norm gamma+beta = 2*oc.
    auto unit = [](std::int64_t ic, std::int64_t oc, std::int64_t k, bool normed) {
        return oc * ic * k * k + oc + (normed ? 2 * oc : 0);
    };
    // Encoder: stem 1->16; per stage a stride-2 conv then 2 residual blocks
    // of two 3x3 convs at the stage width.
    const std::int64_t encoder = unit(1, 16, 3, true)                       // stem
                                 + unit(16, 16, 3, true) + 4 * unit(16, 16, 3, true)
                                 + unit(16, 32, 3, true) + 4 * unit(32, 32, 3, true)
                                 + unit(32, 64, 3, true) + 4 * unit(64, 64, 3, true);
    // Decoder: 64->32, 32->16, 16->16 3x3 convs after upsampling, 1x1 head.
    const std::int64_t decoder = unit(64, 32, 3, true) + unit(32, 16, 3, true) +
                                 unit(16, 16, 3, true) + unit(16, 4, 1, false);
    REQUIRE(encoder == 220752);
    REQUIRE(decoder == 25604);

    auto net = DualBranchNet<float>::build(ModelConfig{}, 1);
    REQUIRE(net.parameter_count() == encoder + 2 * decoder);
    REQUIRE(net.parameter_count() == 271960);
}

TEST_CASE("indivisible input size is a configuration error") {
    ModelConfig cfg;
    cfg.input_h = 60;  // 60 % 8 != 0
    REQUIRE_THROWS_AS(DualBranchNet<float>::build(cfg, 1), ConfigError);

    ModelConfig cfg2;
    cfg2.stage_widths = {10, 20, 40};  // width 10 % groups 4 != 0
    REQUIRE_THROWS_AS(DualBranchNet<float>::build(cfg2, 1), ConfigError);

    ModelConfig cfg3;
    cfg3.num_classes = 1;
    REQUIRE_THROWS_AS(DualBranchNet<float>::build(cfg3, 1), ConfigError);
}

TEST_CASE("wrong spatial size at forward is an error") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 7);
    REQUIRE_THROWS_AS(net.forward(random_images(1, 32, 32, 1), Branch::Strong), ShapeError);
}

TEST_CASE("decoder parameter lists are shape-symmetric") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 3);
    const auto& s = net.decoder_strong().params;
    const auto& w = net.decoder_weak().params;
    REQUIRE(s.size() == w.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        REQUIRE(s[i].name == w[i].name);
        REQUIRE(s[i].value.shape() == w[i].value.shape());
    }
}

TEST_CASE("encoder activation is identical across branch selections") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 5);
    auto images = random_images(2, 64, 64, 8);
    NoGradGuard guard;
    auto e1 = net.encode(images);
    auto e2 = net.encode(images);
    REQUIRE(e1.data() == e2.data());
    REQUIRE(e1.shape() == Shape{2, 64, 8, 8});  // 64 / 2^3

    // Branch selection routes the same encoding; decoding twice from the
    // same encoding matches forward(Both).
    auto both = net.forward(images, Branch::Both);
    auto s = net.forward(images, Branch::Strong);
    auto w = net.forward(images, Branch::Weak);
    REQUIRE(both.strong.data() == s.strong.data());
    REQUIRE(both.weak.data() == w.weak.data());
    REQUIRE_FALSE(s.weak.defined());
    REQUIRE_FALSE(w.strong.defined());
}

TEST_CASE("copy_decoder makes branches bitwise equal until they diverge") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 11);
    auto images = random_images(1, 64, 64, 12);
    net.copy_decoder_weak_to_strong();
    {
        NoGradGuard guard;
        auto out = net.forward(images, Branch::Both);
        REQUIRE(out.strong.data() == out.weak.data());
    }
    // Value copy, not aliasing: mutating one leaves the other fixed.
    auto& sw = net.decoder_strong().params[0].value;
    const auto weak_before = net.decoder_weak().params[0].value.data();
    sw.mutable_data()[0] += 1.0f;
    REQUIRE(net.decoder_weak().params[0].value.data() == weak_before);
    {
        NoGradGuard guard;
        auto out = net.forward(images, Branch::Both);
        REQUIRE(out.strong.data() != out.weak.data());
    }
}

TEST_CASE("freeze_encoder: 10 adam steps leave encoder bitwise unchanged") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 21);
    net.freeze_encoder();
    REQUIRE_FALSE(net.encoder().trainable);
    REQUIRE(net.decoder_strong().trainable);
    REQUIRE(net.decoder_weak().trainable);

    std::vector<std::vector<float>> encoder_before;
    for (const auto& p : net.encoder().params) encoder_before.push_back(p.value.data());
    std::vector<float> decoder_before = net.decoder_strong().params[0].value.data();

    auto images = random_images(2, 64, 64, 31);
    auto labels = random_labels(2, 64, 64, 4, 32);
    Adam<float> opt(net.params_of({"decoder_strong", "decoder_weak"}), {});
    for (int step = 0; step < 10; ++step) {
        auto out = net.forward(images, Branch::Both);
        auto loss = add(generalized_dice_loss(softmax_channels(out.strong), labels),
                        generalized_dice_loss(softmax_channels(out.weak), labels));
        backward(loss);
        opt.step();
        opt.zero_grad();
    }
    for (std::size_t i = 0; i < encoder_before.size(); ++i) {
        REQUIRE(net.encoder().params[i].value.data() == encoder_before[i]);
    }
    REQUIRE(net.decoder_strong().params[0].value.data() != decoder_before);
}

TEST_CASE("frozen encoder still feeds decoders; updates are skipped, not grads asserted") {
    auto net = DualBranchNet<float>::build(ModelConfig{}, 22);
    net.freeze_encoder();
    auto images = random_images(1, 64, 64, 41);
    auto labels = random_labels(1, 64, 64, 4, 42);
    auto out = net.forward(images, Branch::Weak);
    backward(generalized_dice_loss(softmax_channels(out.weak), labels));
    // Decoder grads exist; training proceeds through the frozen trunk.
    for (const auto& p : net.decoder_weak().params) REQUIRE(p.value.has_grad());
}
