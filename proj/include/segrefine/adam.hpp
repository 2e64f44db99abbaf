// Adam with bias-corrected moments over named parameter groups.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "segrefine/errors.hpp"
#include "segrefine/tensor.hpp"

namespace segrefine {

/// A named, optionally frozen parameter. Freezing is expressed as
/// trainable=false plus requires_grad=false on the tensor; the optimizer
/// additionally skips non-trainable groups so a stale gradient can never
/// produce an update.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
class Adam {
public:
    struct Slot {
        std::string name;
        std::vector<T> m;
        std::vector<T> v;
    };

    Adam() = default;

    Adam(std::vector<Param<T>*> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        slots_.reserve(params_.size());
        for (auto* p : params_) {
            Slot s;
            s.name = p->name;
            s.m.assign(p->value.data().size(), T(0));
            s.v.assign(p->value.data().size(), T(0));
            slots_.push_back(std::move(s));
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return step_; }
    const std::vector<Slot>& slots() const { return slots_; }

    /// One update over every trainable group. All trainable groups must carry
    /// a populated gradient; a missing one indicates a broken backward pass.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t gi = 0; gi < params_.size(); ++gi) {
            Param<T>* p = params_[gi];
            if (!p->trainable) continue;
            if (!p->value.has_grad()) {
                throw AutogradError("adam: trainable parameter '" + p->name +
                                    "' has no gradient");
            }
            const auto& g = p->value.grad();
            auto& data = p->value.mutable_data();
            auto& m = slots_[gi].m;
            auto& v = slots_[gi].v;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double gd = static_cast<double>(g[i]);
                const double md = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gd;
                const double vd = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gd * gd;
                m[i] = static_cast<T>(md);
                v[i] = static_cast<T>(vd);
                const double mhat = md / bc1;
                const double vhat = vd / bc2;
                data[i] = static_cast<T>(static_cast<double>(data[i]) -
                                         cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->value.zero_grad();
    }

    /// Restores moment buffers and the step counter (checkpoint resume).
    /// Slots are positional — optimizer construction order is deterministic —
    /// with every name and size verified before anything is written, so a
    /// mismatched checkpoint cannot leave a partial restore. Positional
    /// matching also stays unambiguous when two parameter groups reuse the
    /// same relative names (the two decoders do).
    void load_state(std::uint64_t step, const std::vector<Slot>& slots) {
        if (slots.size() != slots_.size()) {
            throw IoError("adam: checkpoint has " + std::to_string(slots.size()) +
                          " optimizer slots, expected " + std::to_string(slots_.size()));
        }
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            if (slots[i].name != slots_[i].name) {
                throw IoError("adam: optimizer slot " + std::to_string(i) + " is '" +
                              slots[i].name + "', expected '" + slots_[i].name + "'");
            }
            if (slots[i].m.size() != slots_[i].m.size() ||
                slots[i].v.size() != slots_[i].v.size()) {
                throw IoError("adam: optimizer slot '" + slots_[i].name +
                              "' has mismatched size");
            }
        }
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            slots_[i].m = slots[i].m;
            slots_[i].v = slots[i].v;
        }
        step_ = step;
    }

private:
    std::vector<Param<T>*> params_;
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t step_ = 0;
};

}  // namespace segrefine
