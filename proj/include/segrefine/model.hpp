// Dual-branch segmentation network: one shared residual encoder feeding two
// architecturally identical decoders ("strong" and "weak"). Parameters live
// in three groups — encoder, decoder_strong, decoder_weak — so the encoder
// can be frozen and one decoder cloned onto the other.
//
// Topology for the default config (1x64x64 input, widths 16/32/64, C=4):
//   stem   conv3x3 1->16                                   @64x64
//   stage s: conv3x3 stride2 (downsample) then 2 residual
//            blocks (conv-norm-relu x2 + identity skip)    @32,16,8
//   decoder: 3x (upsample2x -> conv3x3 -> norm -> relu)
//            64->32 @16, 32->16 @32, 16->16 @64, then 1x1 conv -> C logits.
// No encoder->decoder skip connections: decoders see only the bottleneck.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segrefine/adam.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/nn_ops.hpp"
#include "segrefine/rng.hpp"
#include "segrefine/tensor.hpp"

namespace segrefine {

enum class Branch { Strong, Weak, Both };

inline const char* branch_name(Branch b) {
    switch (b) {
        case Branch::Strong: return "strong";
        case Branch::Weak: return "weak";
        default: return "both";
    }
}

struct ModelConfig {
    std::int64_t in_channels = 1;
    std::int64_t num_classes = 4;
    std::int64_t input_h = 64;
    std::int64_t input_w = 64;
    std::vector<std::int64_t> stage_widths{16, 32, 64};
    std::int64_t blocks_per_stage = 2;
    std::int64_t norm_groups = 4;
    double norm_eps = 1e-5;

    void validate() const {
        if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
        if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
        if (stage_widths.empty()) throw ConfigError("model: at least one stage required");
        if (blocks_per_stage < 1) throw ConfigError("model: blocks_per_stage must be >= 1");
        const std::int64_t stages = static_cast<std::int64_t>(stage_widths.size());
        const std::int64_t factor = std::int64_t{1} << stages;
        if (input_h % factor != 0 || input_w % factor != 0) {
            throw ConfigError("model: input size " + std::to_string(input_h) + "x" +
                              std::to_string(input_w) + " not divisible by 2^" +
                              std::to_string(stages));
        }
        for (auto wd : stage_widths) {
            if (wd < 1 || wd % norm_groups != 0) {
                throw ConfigError("model: stage width " + std::to_string(wd) +
                                  " not divisible by norm_groups " +
                                  std::to_string(norm_groups));
            }
        }
    }
};

template <typename T>
struct ParamGroup {
    std::string id;
    std::vector<Param<T>> params;
    bool trainable = true;

    Param<T>& by_name(const std::string& name) {
        for (auto& p : params) {
            if (p.name == name) return p;
        }
        throw ConfigError("parameter group '" + id + "' has no parameter '" + name + "'");
    }

    void set_trainable(bool v) {
        trainable = v;
        for (auto& p : params) {
            p.trainable = v;
            p.value.set_requires_grad(v);
        }
    }
};

template <typename T>
struct ForwardResult {
    Tensor<T> strong;  // undefined unless requested
    Tensor<T> weak;
};

template <typename T>
class DualBranchNet {
public:
    // A conv (optionally followed by group norm + relu) described by indices
    // into its group's parameter vector.
    struct ConvUnit {
        std::size_t w, b, gamma, beta;
        std::int64_t stride, pad;
        bool normed;  // false for the 1x1 head
    };

    static DualBranchNet build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        DualBranchNet net;
        net.cfg_ = cfg;
        Rng rng(derive_seed(seed, "model-init"));

        net.encoder_.id = "encoder";
        auto& enc_plan = net.encoder_plan_;
        net.add_conv_unit(net.encoder_, enc_plan, "stem", cfg.in_channels,
                          cfg.stage_widths[0], 3, 1, 1, true, rng);
        for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
            const std::int64_t in_w = s == 0 ? cfg.stage_widths[0] : cfg.stage_widths[s - 1];
            const std::int64_t out_w = cfg.stage_widths[s];
            const std::string stage = "stage" + std::to_string(s);
            net.add_conv_unit(net.encoder_, enc_plan, stage + ".down", in_w, out_w, 3,
                              2, 1, true, rng);
            for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b) {
                const std::string blk = stage + ".block" + std::to_string(b);
                net.add_conv_unit(net.encoder_, enc_plan, blk + ".c1", out_w, out_w, 3,
                                  1, 1, true, rng);
                net.add_conv_unit(net.encoder_, enc_plan, blk + ".c2", out_w, out_w, 3,
                                  1, 1, true, rng);
            }
        }

        net.decoder_strong_.id = "decoder_strong";
        net.build_decoder(net.decoder_strong_, net.decoder_plan_, rng);
        net.decoder_weak_.id = "decoder_weak";
        std::vector<ConvUnit> weak_plan;
        net.build_decoder(net.decoder_weak_, weak_plan, rng);
        // Identical build order means identical unit indices for both decoders.
        return net;
    }

    const ModelConfig& config() const { return cfg_; }

    ParamGroup<T>& encoder() { return encoder_; }
    ParamGroup<T>& decoder_strong() { return decoder_strong_; }
    ParamGroup<T>& decoder_weak() { return decoder_weak_; }
    const ParamGroup<T>& encoder() const { return encoder_; }
    const ParamGroup<T>& decoder_strong() const { return decoder_strong_; }
    const ParamGroup<T>& decoder_weak() const { return decoder_weak_; }

    std::vector<ParamGroup<T>*> groups() {
        return {&encoder_, &decoder_strong_, &decoder_weak_};
    }

    std::int64_t parameter_count() const {
        std::int64_t total = 0;
        for (const auto* g : {&encoder_, &decoder_strong_, &decoder_weak_}) {
            for (const auto& p : g->params) total += p.value.numel();
        }
        return total;
    }

    /// Pointers for optimizer construction, in stable declaration order.
    std::vector<Param<T>*> params_of(std::initializer_list<const char*> group_ids) {
        std::vector<Param<T>*> out;
        for (const char* id : group_ids) {
            ParamGroup<T>& g = group_by_id(id);
            for (auto& p : g.params) out.push_back(&p);
        }
        return out;
    }

    std::vector<Param<T>*> all_params() {
        return params_of({"encoder", "decoder_strong", "decoder_weak"});
    }

    ParamGroup<T>& group_by_id(const std::string& id) {
        for (auto* g : groups()) {
            if (g->id == id) return *g;
        }
        throw ConfigError("no parameter group '" + id + "'");
    }

    void freeze_encoder() { encoder_.set_trainable(false); }

    /// Deep value copy weak -> strong (phase-1 handoff). Shapes are identical
    /// by construction.
    void copy_decoder_weak_to_strong() {
        for (std::size_t i = 0; i < decoder_weak_.params.size(); ++i) {
            auto& src = decoder_weak_.params[i];
            auto& dst = decoder_strong_.params[i];
            if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
                throw ConfigError("decoder parameter lists out of sync at '" + src.name + "'");
            }
            dst.value.mutable_data() = src.value.data();
        }
    }

    Tensor<T> encode(const Tensor<T>& images) {
        if (images.rank() != 4 || images.dim(1) != cfg_.in_channels ||
            images.dim(2) != cfg_.input_h || images.dim(3) != cfg_.input_w) {
            throw ShapeError("forward: expected [N," + std::to_string(cfg_.in_channels) +
                             "," + std::to_string(cfg_.input_h) + "," +
                             std::to_string(cfg_.input_w) + "] input, got " +
                             shape_str(images.shape()));
        }
        std::size_t u = 0;
        Tensor<T> x = run_unit(encoder_, encoder_plan_[u++], images);  // stem
        for (std::size_t s = 0; s < cfg_.stage_widths.size(); ++s) {
            x = run_unit(encoder_, encoder_plan_[u++], x);  // downsample
            for (std::int64_t b = 0; b < cfg_.blocks_per_stage; ++b) {
                Tensor<T> t = run_unit(encoder_, encoder_plan_[u], x);
                t = run_unit(encoder_, encoder_plan_[u + 1], t);
                u += 2;
                x = add(x, t);
            }
        }
        return x;
    }

    Tensor<T> decode(ParamGroup<T>& decoder, const Tensor<T>& encoding) {
        Tensor<T> x = encoding;
        for (std::size_t u = 0; u < decoder_plan_.size(); ++u) {
            const ConvUnit& unit = decoder_plan_[u];
            if (unit.normed) x = upsample2x_nearest(x);
            x = run_unit(decoder, unit, x);
        }
        return x;
    }

    ForwardResult<T> forward(const Tensor<T>& images, Branch branch) {
        Tensor<T> enc = encode(images);
        ForwardResult<T> out;
        if (branch == Branch::Strong || branch == Branch::Both) {
            out.strong = decode(decoder_strong_, enc);
        }
        if (branch == Branch::Weak || branch == Branch::Both) {
            out.weak = decode(decoder_weak_, enc);
        }
        return out;
    }

private:
    // He fan-in init for the conv, identity affine for the norm.
    void add_conv_unit(ParamGroup<T>& group, std::vector<ConvUnit>& plan,
                       const std::string& name, std::int64_t ic, std::int64_t oc,
                       std::int64_t k, std::int64_t stride, std::int64_t pad,
                       bool normed, Rng& rng) {
        ConvUnit unit;
        unit.stride = stride;
        unit.pad = pad;
        unit.normed = normed;
        const double stddev = std::sqrt(2.0 / static_cast<double>(ic * k * k));
        unit.w = push_param(group, name + ".w",
                            Tensor<T>::randn({oc, ic, k, k}, rng, stddev));
        unit.b = push_param(group, name + ".b", Tensor<T>::zeros({oc}));
        if (normed) {
            unit.gamma = push_param(group, name + ".gamma", Tensor<T>::ones({oc}));
            unit.beta = push_param(group, name + ".beta", Tensor<T>::zeros({oc}));
        } else {
            unit.gamma = unit.beta = 0;
        }
        plan.push_back(unit);
    }

    void build_decoder(ParamGroup<T>& group, std::vector<ConvUnit>& plan, Rng& rng) {
        const auto& widths = cfg_.stage_widths;
        std::int64_t in_w = widths.back();
        for (std::size_t s = widths.size(); s-- > 0;) {
            // Mirror the encoder widths; the last block stays at the stem width.
            const std::int64_t out_w = s == 0 ? widths[0] : widths[s - 1];
            add_conv_unit(group, plan, "up" + std::to_string(widths.size() - s), in_w,
                          out_w, 3, 1, 1, true, rng);
            in_w = out_w;
        }
        add_conv_unit(group, plan, "head", in_w, cfg_.num_classes, 1, 1, 0, false, rng);
    }

    std::size_t push_param(ParamGroup<T>& group, std::string name, Tensor<T> value) {
        value.set_requires_grad(true);
        group.params.push_back(Param<T>{std::move(name), std::move(value), true});
        return group.params.size() - 1;
    }

    Tensor<T> run_unit(ParamGroup<T>& group, const ConvUnit& unit, const Tensor<T>& x) {
        Tensor<T> y = conv2d(x, group.params[unit.w].value, group.params[unit.b].value,
                             unit.stride, unit.pad);
        if (unit.normed) {
            y = group_norm(y, group.params[unit.gamma].value,
                           group.params[unit.beta].value, cfg_.norm_groups,
                           static_cast<T>(cfg_.norm_eps));
            y = relu(y);
        }
        return y;
    }

    ModelConfig cfg_;
    ParamGroup<T> encoder_, decoder_strong_, decoder_weak_;
    std::vector<ConvUnit> encoder_plan_;
    std::vector<ConvUnit> decoder_plan_;
};

}  // namespace segrefine
