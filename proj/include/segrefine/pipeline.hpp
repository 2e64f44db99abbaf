// Training driver: pretext phase on weak labels, encoder-frozen fine-tuning
// with iterative weak-label replacement, and the compute-matched joint
// baseline. One TrainRun is a single logical thread of control; all batch
// order comes from one run-level Rng whose state checkpoints verbatim, so a
// resumed run continues bitwise (single-threaded mode).
#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "segrefine/adam.hpp"
#include "segrefine/checkpoint.hpp"
#include "segrefine/corpus.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/losses.hpp"
#include "segrefine/metrics.hpp"
#include "segrefine/model.hpp"
#include "segrefine/rng.hpp"

namespace segrefine {

struct TrainConfig {
    int phase1_epochs = 100;
    int phase2_epochs = 100;
    int batch_size = 8;
    // Replacement fires at phase-relative epochs {s, s+p, s+2p, ...};
    // start=0 is the off switch (no events ever).
    int replacement_start_epoch = 5;
    int replacement_period = 5;
    LossWeights loss;
    AdamConfig adam;
    std::uint64_t seed = 1;
    std::vector<int> snapshot_epochs{0, 5, 10, 100};  // global epochs; consumed by callers
    std::string phase1_branch = "weak";                // "weak" | "both"
    int checkpoint_period = 10;                        // epochs between saves; 0 = final only

    int total_epochs() const { return phase1_epochs + phase2_epochs; }

    void validate() const {
        if (phase1_epochs < 0) throw ConfigError("train: phase1_epochs must be >= 0");
        if (phase2_epochs < 0) throw ConfigError("train: phase2_epochs must be >= 0");
        if (total_epochs() < 1) throw ConfigError("train: at least one epoch required");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (replacement_period < 1) throw ConfigError("train: replacement_period must be >= 1");
        if (replacement_start_epoch < 0) {
            throw ConfigError("train: replacement_start_epoch must be >= 0");
        }
        if (replacement_start_epoch >= 1 && replacement_start_epoch > phase2_epochs) {
            throw ConfigError("train: replacement_start_epoch exceeds phase2_epochs "
                              "(use 0 to disable replacement)");
        }
        if (loss.lambda_cc < 0 || loss.lambda_conf < 0) {
            throw ConfigError("train: loss weights must be >= 0");
        }
        if (loss.rampup_epochs < 0) throw ConfigError("train: rampup_epochs must be >= 0");
        if (!(adam.lr > 0)) throw ConfigError("train: lr must be positive");
        if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1) {
            throw ConfigError("train: betas must lie in [0, 1)");
        }
        if (!(adam.eps > 0)) throw ConfigError("train: adam eps must be positive");
        if (phase1_branch != "weak" && phase1_branch != "both") {
            throw ConfigError("train: phase1_branch must be 'weak' or 'both'");
        }
        for (const int e : snapshot_epochs) {
            if (e < 0) throw ConfigError("train: snapshot epochs must be >= 0");
        }
        if (checkpoint_period < 0) throw ConfigError("train: checkpoint_period must be >= 0");
    }
};

/// True when `phase_epoch` (1-based, relative to the phase the schedule
/// governs) is a weak-label replacement epoch.
inline bool is_replacement_epoch(int phase_epoch, const TrainConfig& cfg) {
    if (cfg.replacement_start_epoch < 1) return false;
    return phase_epoch >= cfg.replacement_start_epoch &&
           (phase_epoch - cfg.replacement_start_epoch) % cfg.replacement_period == 0;
}

struct EpochRecord {
    int epoch = 0;  // global, 1-based
    int phase = 0;  // 1 pretext, 2 fine-tune, 0 joint baseline
    double total = 0.0;
    double gdl_strong = 0.0;
    double gdl_weak = 0.0;
    double cross_consistency = 0.0;
    double confidence = 0.0;
};

struct ReplacementRecord {
    int epoch = 0;                 // global epoch the replacement ran at
    std::vector<double> mean_dsc;  // current weak labels vs hidden gt, per class
};

/// Loss trajectory plus the label-quality trajectory at each replacement.
/// Serialization excludes wall-clock timings: history must be identical for a
/// fixed seed, and it rides inside checkpoints across resume.
struct RunHistory {
    std::vector<EpochRecord> epochs;
    std::vector<ReplacementRecord> replacements;
    std::vector<double> epoch_seconds;  // this process only; never serialized

    nlohmann::json to_json() const {
        nlohmann::json je = nlohmann::json::array();
        for (const auto& e : epochs) {
            je.push_back({{"epoch", e.epoch},
                          {"phase", e.phase},
                          {"total", e.total},
                          {"gdl_strong", e.gdl_strong},
                          {"gdl_weak", e.gdl_weak},
                          {"cross_consistency", e.cross_consistency},
                          {"confidence", e.confidence}});
        }
        nlohmann::json jr = nlohmann::json::array();
        for (const auto& r : replacements) {
            jr.push_back({{"epoch", r.epoch}, {"mean_dsc", r.mean_dsc}});
        }
        return {{"schema", "segrefine-history-v1"}, {"epochs", je}, {"replacements", jr}};
    }

    static RunHistory from_json(const nlohmann::json& j) {
        if (!j.is_object() || j.value("schema", "") != "segrefine-history-v1") {
            throw ConfigError("history: unknown schema");
        }
        RunHistory h;
        for (const auto& e : j.at("epochs")) {
            h.epochs.push_back({e.at("epoch").get<int>(), e.at("phase").get<int>(),
                                e.at("total").get<double>(), e.at("gdl_strong").get<double>(),
                                e.at("gdl_weak").get<double>(),
                                e.at("cross_consistency").get<double>(),
                                e.at("confidence").get<double>()});
        }
        for (const auto& r : j.at("replacements")) {
            h.replacements.push_back(
                {r.at("epoch").get<int>(), r.at("mean_dsc").get<std::vector<double>>()});
        }
        return h;
    }
};

enum class Variant : std::uint8_t { Transfer = 0, Baseline = 1 };

/// Canonical report row name for a trained variant.
inline const char* variant_name(Variant v) {
    return v == Variant::Transfer ? kVariantTransfer : kVariantBaseline;
}

/// FNV-1a over the raw float bits of every parameter, in declaration order.
inline std::uint64_t parameter_hash(const ParamGroup<float>& g) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : g.params) {
        for (const float f : p.value.data()) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
            for (int b = 0; b < 4; ++b) {
                h ^= (bits >> (8 * b)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

class TrainRun {
public:
    DualBranchNet<float> net;
    Corpus corpus;  // working copy; weak-pool labels mutate in place
    ModelConfig model;
    TrainConfig cfg;
    Variant variant = Variant::Transfer;
    std::uint64_t config_digest = 0;
    Rng rng;
    RunHistory history;
    int epochs_done = 0;      // global epochs completed
    std::uint8_t phase = 1;   // 1 pretext, 2 fine-tune; 0 for baseline runs
    std::optional<Adam<float>> opt;
    std::string last_checkpoint;                 // set by the hook; cited on divergence
    std::function<void(TrainRun&)> epoch_hook;   // fires after every completed epoch

    TrainRun(Corpus c, ModelConfig mcfg, TrainConfig tcfg, Variant v,
             std::uint64_t digest = 0)
        : corpus(std::move(c)), model(std::move(mcfg)), cfg(std::move(tcfg)), variant(v),
          config_digest(digest) {
        cfg.validate();
        model.validate();
        if (model.input_h != corpus.h || model.input_w != corpus.w) {
            throw ConfigError("train: model expects " + std::to_string(model.input_h) + "x" +
                              std::to_string(model.input_w) + " input, corpus is " +
                              std::to_string(corpus.h) + "x" + std::to_string(corpus.w));
        }
        if (model.num_classes != corpus.num_classes) {
            throw ConfigError("train: model/corpus class count mismatch");
        }
        weak_pool_ = corpus.pool(Split::WeakTrain);
        strong_pool_ = corpus.pool(Split::StrongTrain);
        if (weak_pool_.empty()) throw ConfigError("train: weak pool is empty");
        const bool needs_strong = variant == Variant::Baseline || cfg.phase2_epochs > 0;
        if (needs_strong && strong_pool_.empty()) {
            throw ConfigError("train: strong pool is empty");
        }
        net = DualBranchNet<float>::build(model, derive_seed(cfg.seed, "model"));
        rng = Rng(derive_seed(cfg.seed, "train"));
        phase = variant == Variant::Transfer ? 1 : 0;
        for (const std::size_t i : weak_pool_) {
            initial_weak_.emplace_back(corpus.samples[i].id, corpus.samples[i].label);
        }
    }

    /// Audit copies of the weak labels as they were at run start, by id.
    const std::vector<std::pair<std::string, LabelMap>>& initial_weak() const {
        return initial_weak_;
    }
    const LabelMap& initial_weak_label(const std::string& id) const {
        for (const auto& [sid, m] : initial_weak_) {
            if (sid == id) return m;
        }
        throw ConfigError("no initial weak label for id '" + id + "'");
    }

    void run() {
        if (variant == Variant::Baseline) {
            run_baseline();
            return;
        }
        if (phase == 1) run_phase1();
        run_phase2();
    }

    /// Pretext: encoder + weak decoder trained with GDL on the weak labels
    /// only ("both" additionally drives the strong decoder with the same
    /// labels). Weak labels are never modified here. Ends by entering phase 2:
    /// weak->strong decoder copy (pointless and skipped for "both"), encoder
    /// freeze, fresh optimizer over the two decoders.
    void run_phase1() {
        if (variant != Variant::Transfer) {
            throw ConfigError("run_phase1: baseline runs use run_baseline()");
        }
        if (phase != 1) throw ConfigError("run_phase1: pretext phase already complete");
        if (!opt) opt.emplace(phase_params(1), cfg.adam);
        for (int e = epochs_done + 1; e <= cfg.phase1_epochs; ++e) run_weak_epoch(e);
        enter_phase2();
    }

    /// Fine-tune: frozen encoder, one strong + one weak batch per step, full
    /// composite loss, weak-label replacement on the configured schedule.
    void run_phase2() {
        if (variant != Variant::Transfer) {
            throw ConfigError("run_phase2: baseline runs use run_baseline()");
        }
        if (phase != 2) throw ConfigError("run_phase2: pretext phase has not completed");
        if (!opt) opt.emplace(phase_params(2), cfg.adam);
        for (int e = epochs_done + 1; e <= cfg.total_epochs(); ++e) {
            run_pair_epoch(e, 2, e - cfg.phase1_epochs, e - cfg.phase1_epochs);
            const std::uint64_t h = parameter_hash(net.encoder());
            if (h != encoder_hash_) {
                throw AutogradError("frozen encoder mutated during epoch " +
                                    std::to_string(e));
            }
        }
    }

    /// Compute-matched joint baseline: one phase, encoder trainable, full
    /// composite loss, and replacement events on the same global epochs as
    /// the transfer variant (compute parity covers refinement rounds too).
    void run_baseline() {
        if (variant != Variant::Baseline) {
            throw ConfigError("run_baseline: transfer runs use run_phase1/run_phase2()");
        }
        if (!opt) opt.emplace(phase_params(0), cfg.adam);
        for (int e = epochs_done + 1; e <= cfg.total_epochs(); ++e) {
            run_pair_epoch(e, 0, e, e - cfg.phase1_epochs);
        }
    }

    /// Every weak-pool label becomes argmax(softmax(strong-decoder logits)),
    /// ties to the lowest class index. Deterministic (no RNG), so running it
    /// twice against the same net is a no-op the second time. Strong and
    /// validation pools are never touched.
    void replace_weak_labels() {
        auto maps = predict_for(weak_pool_);
        for (std::size_t k = 0; k < weak_pool_.size(); ++k) {
            Sample& s = corpus.samples[weak_pool_[k]];
            s.label = std::move(maps[k]);
            s.provenance = Provenance::WeakRefined;
        }
    }

    /// Strong-branch argmax predictions for a pool, in corpus (id) order.
    std::vector<LabelMap> predict_pool(Split split) {
        return predict_for(corpus.pool(split));
    }

    /// Mean DSC of the current weak labels against hidden gt, per class.
    std::vector<double> weak_label_dsc() const {
        const auto C = corpus.num_classes;
        std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
        for (const std::size_t i : weak_pool_) {
            const auto counts =
                confusion_counts(corpus.samples[i].label, corpus.samples[i].gt, C);
            for (std::int64_t c = 0; c < C; ++c) {
                mean[static_cast<std::size_t>(c)] += dsc(counts, c);
            }
        }
        for (auto& m : mean) m /= static_cast<double>(weak_pool_.size());
        return mean;
    }

    CheckpointData make_checkpoint() const {
        CheckpointData ck;
        ck.config_digest = config_digest;
        ck.variant = static_cast<std::uint8_t>(variant);
        ck.phase = phase;
        ck.epoch = epochs_done;
        ck.rng_state = rng.state();
        ck.tensors = snapshot_parameters(net);
        if (opt) {
            ck.opt_step = opt->step_count();
            ck.opt_slots = opt->slots();
        }
        for (const std::size_t i : weak_pool_) {
            ck.weak_labels.emplace_back(corpus.samples[i].id, corpus.samples[i].label);
        }
        ck.history_json = history.to_json().dump();
        return ck;
    }

    /// Restores a checkpoint into this freshly constructed run. Everything is
    /// verified — variant, phase, epoch range, parameter names/shapes,
    /// optimizer slots, weak-label ids/dims, history — before the first value
    /// is written, so failure leaves the run untouched.
    void resume(const CheckpointData& ck) {
        if (ck.config_digest != config_digest) {
            throw ConfigError("resume: checkpoint config digest mismatch");
        }
        if (ck.variant != static_cast<std::uint8_t>(variant)) {
            throw ConfigError("resume: checkpoint belongs to the other variant");
        }
        const bool phase_ok = variant == Variant::Transfer ? (ck.phase == 1 || ck.phase == 2)
                                                           : ck.phase == 0;
        if (!phase_ok) throw ConfigError("resume: invalid phase tag for variant");
        if (ck.epoch < 0 || ck.epoch > cfg.total_epochs()) {
            throw ConfigError("resume: epoch counter out of range");
        }
        if (ck.phase == 1 && ck.epoch > cfg.phase1_epochs) {
            throw ConfigError("resume: pretext checkpoint past phase1_epochs");
        }
        if (ck.phase == 2 && ck.epoch < cfg.phase1_epochs) {
            throw ConfigError("resume: fine-tune checkpoint before phase1_epochs");
        }
        // Verification phase: nothing below may mutate the run until every
        // check has passed.
        verify_parameters(net, ck.tensors);
        // Slot layout depends only on which groups the phase optimizes, not
        // on trainable flags, so the fresh optimizer can be built pre-freeze.
        Adam<float> fresh(phase_params(ck.phase), cfg.adam);
        const bool restore_opt = !(ck.opt_slots.empty() && ck.opt_step == 0);
        if (restore_opt) {
            const auto& want = fresh.slots();
            if (ck.opt_slots.size() != want.size()) {
                throw IoError("resume: checkpoint has " + std::to_string(ck.opt_slots.size()) +
                              " optimizer slots, expected " + std::to_string(want.size()));
            }
            for (std::size_t i = 0; i < want.size(); ++i) {
                if (ck.opt_slots[i].name != want[i].name ||
                    ck.opt_slots[i].m.size() != want[i].m.size() ||
                    ck.opt_slots[i].v.size() != want[i].v.size()) {
                    throw IoError("resume: optimizer slot " + std::to_string(i) +
                                  " does not match '" + want[i].name + "'");
                }
            }
        }
        if (ck.weak_labels.size() != weak_pool_.size()) {
            throw ConfigError("resume: checkpoint covers " +
                              std::to_string(ck.weak_labels.size()) + " weak labels, pool has " +
                              std::to_string(weak_pool_.size()));
        }
        for (std::size_t k = 0; k < weak_pool_.size(); ++k) {
            const Sample& s = corpus.samples[weak_pool_[k]];
            const auto& [id, m] = ck.weak_labels[k];
            if (id != s.id) {
                throw ConfigError("resume: weak label '" + id + "' where '" + s.id +
                                  "' was expected");
            }
            if (m.h != s.gt.h || m.w != s.gt.w) {
                throw ShapeError("resume: weak label '" + id + "' has wrong dimensions");
            }
        }
        RunHistory h = RunHistory::from_json(nlohmann::json::parse(ck.history_json));
        if (h.epochs.size() != static_cast<std::size_t>(ck.epoch)) {
            throw ConfigError("resume: history has " + std::to_string(h.epochs.size()) +
                              " epochs, counter says " + std::to_string(ck.epoch));
        }

        if (ck.phase == 2) net.freeze_encoder();
        restore_parameters(net, ck.tensors);
        opt = std::move(fresh);
        if (restore_opt) opt->load_state(ck.opt_step, ck.opt_slots);
        const int elapsed = static_cast<int>(ck.epoch) - cfg.phase1_epochs;
        const bool replaced = cfg.replacement_start_epoch >= 1 &&
                              elapsed >= cfg.replacement_start_epoch;
        for (std::size_t k = 0; k < weak_pool_.size(); ++k) {
            Sample& s = corpus.samples[weak_pool_[k]];
            s.label = ck.weak_labels[k].second;
            s.provenance = replaced ? Provenance::WeakRefined : Provenance::WeakInitial;
        }
        rng.set_state(ck.rng_state);
        history = std::move(h);
        epochs_done = static_cast<int>(ck.epoch);
        phase = ck.phase;
        if (phase == 2) encoder_hash_ = parameter_hash(net.encoder());
    }

private:
    std::vector<std::size_t> strong_pool_, weak_pool_;  // corpus order
    std::vector<std::pair<std::string, LabelMap>> initial_weak_;
    std::uint64_t encoder_hash_ = 0;

    std::vector<Param<float>*> phase_params(std::uint8_t ph) {
        if (ph == 1) {
            return cfg.phase1_branch == "both"
                       ? net.all_params()
                       : net.params_of({"encoder", "decoder_weak"});
        }
        if (ph == 2) return net.params_of({"decoder_strong", "decoder_weak"});
        return net.all_params();
    }

    void enter_phase2() {
        if (cfg.phase1_branch == "weak") net.copy_decoder_weak_to_strong();
        net.freeze_encoder();
        encoder_hash_ = parameter_hash(net.encoder());
        opt.emplace(phase_params(2), cfg.adam);
        phase = 2;
    }

    Tensor<float> make_images(const std::vector<std::size_t>& idx) const {
        const std::int64_t n = static_cast<std::int64_t>(idx.size());
        auto images = Tensor<float>::zeros({n, 1, corpus.h, corpus.w});
        auto& iv = images.mutable_data();
        const std::size_t plane = static_cast<std::size_t>(corpus.h * corpus.w);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto& src = corpus.samples[idx[k]].image.data();
            std::copy(src.begin(), src.end(), iv.begin() + static_cast<std::ptrdiff_t>(k * plane));
        }
        return images;
    }

    std::vector<LabelMap> labels_of(const std::vector<std::size_t>& idx) const {
        std::vector<LabelMap> out;
        out.reserve(idx.size());
        for (const std::size_t i : idx) out.push_back(corpus.samples[i].label);
        return out;
    }

    std::size_t steps_per_epoch() const {
        const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
        return (weak_pool_.size() + b - 1) / b;
    }

    /// Weak batch k is the k-th chunk of the per-epoch weak shuffle; the
    /// strong batch walks its own shuffle round-robin so every step sees a
    /// full strong batch even when the strong pool is small.
    std::vector<std::size_t> weak_batch(const std::vector<std::size_t>& order,
                                        std::size_t k) const {
        const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
        const std::size_t lo = k * b;
        const std::size_t hi = std::min(order.size(), lo + b);
        return {order.begin() + static_cast<std::ptrdiff_t>(lo),
                order.begin() + static_cast<std::ptrdiff_t>(hi)};
    }

    std::vector<std::size_t> strong_batch(const std::vector<std::size_t>& order,
                                          std::size_t k) const {
        const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
        std::vector<std::size_t> out(b);
        for (std::size_t j = 0; j < b; ++j) out[j] = order[(k * b + j) % order.size()];
        return out;
    }

    void run_weak_epoch(int global_epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order = weak_pool_;
        rng.shuffle(order);
        EpochRecord rec{global_epoch, 1, 0, 0, 0, 0, 0};
        const std::size_t steps = steps_per_epoch();
        try {
            for (std::size_t k = 0; k < steps; ++k) {
                const auto idx = weak_batch(order, k);
                const auto images = make_images(idx);
                const auto labels = labels_of(idx);
                opt->zero_grad();
                Tensor<float> total;
                if (cfg.phase1_branch == "both") {
                    auto fr = net.forward(images, Branch::Both);
                    auto gdl_s = generalized_dice_loss(softmax_channels(fr.strong), labels);
                    auto gdl_w = generalized_dice_loss(softmax_channels(fr.weak), labels);
                    rec.gdl_strong += static_cast<double>(gdl_s.item());
                    rec.gdl_weak += static_cast<double>(gdl_w.item());
                    total = add(gdl_s, gdl_w);
                } else {
                    auto fr = net.forward(images, Branch::Weak);
                    total = generalized_dice_loss(softmax_channels(fr.weak), labels);
                    rec.gdl_weak += static_cast<double>(total.item());
                }
                check_finite(total, global_epoch, k);
                rec.total += static_cast<double>(total.item());
                backward(total);
                opt->step();
            }
        } catch (const NumericalError& e) {
            throw NumericalError(divergence_message(global_epoch, e.what()));
        }
        finish_epoch(rec, steps, t0, /*replace_epoch=*/0);
    }

    // `phase_epoch` drives the loss ramp (1-based within the schedule that
    // owns the epoch); `replace_epoch` drives label replacement and is the
    // same phase-2-relative index for both variants, so their replacement
    // events land on identical global epochs.
    void run_pair_epoch(int global_epoch, int phase_tag, int phase_epoch, int replace_epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> weak_order = weak_pool_;  // weak shuffled first: contract
        rng.shuffle(weak_order);
        std::vector<std::size_t> strong_order = strong_pool_;
        rng.shuffle(strong_order);
        EpochRecord rec{global_epoch, phase_tag, 0, 0, 0, 0, 0};
        const std::size_t steps = steps_per_epoch();
        const int ramp_epoch = phase_epoch - 1;  // 0-based for the lambda ramp
        try {
            for (std::size_t k = 0; k < steps; ++k) {
                const auto widx = weak_batch(weak_order, k);
                const auto sidx = strong_batch(strong_order, k);
                const auto weak_images = make_images(widx);
                const auto strong_images = make_images(sidx);
                const auto weak_labels = labels_of(widx);
                const auto strong_labels = labels_of(sidx);
                opt->zero_grad();
                auto fs = net.forward(strong_images, Branch::Strong);
                auto fw = net.forward(weak_images, Branch::Both);
                auto parts = phase2_total_loss(fs.strong, fw.weak,
                                               softmax_channels(fw.strong),
                                               softmax_channels(fw.weak), strong_labels,
                                               weak_labels, cfg.loss, ramp_epoch);
                check_finite(parts.total, global_epoch, k);
                rec.total += static_cast<double>(parts.total.item());
                rec.gdl_strong += parts.gdl_strong;
                rec.gdl_weak += parts.gdl_weak;
                rec.cross_consistency += parts.cross_consistency;
                rec.confidence += parts.confidence;
                backward(parts.total);
                opt->step();
            }
        } catch (const NumericalError& e) {
            throw NumericalError(divergence_message(global_epoch, e.what()));
        }
        finish_epoch(rec, steps, t0, replace_epoch);
    }

    void finish_epoch(EpochRecord& rec, std::size_t steps,
                      std::chrono::steady_clock::time_point t0, int replace_epoch) {
        const double n = static_cast<double>(steps);
        rec.total /= n;
        rec.gdl_strong /= n;
        rec.gdl_weak /= n;
        rec.cross_consistency /= n;
        rec.confidence /= n;
        history.epochs.push_back(rec);
        if (replace_epoch >= 1 && is_replacement_epoch(replace_epoch, cfg)) {
            replace_weak_labels();
            history.replacements.push_back({rec.epoch, weak_label_dsc()});
        }
        history.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        epochs_done = rec.epoch;
        if (epoch_hook) epoch_hook(*this);
    }

    void check_finite(const Tensor<float>& total, int epoch, std::size_t step) const {
        if (!std::isfinite(static_cast<double>(total.item()))) {
            throw NumericalError("non-finite loss at step " + std::to_string(step + 1) +
                                 " of epoch " + std::to_string(epoch));
        }
    }

    std::string divergence_message(int epoch, const char* detail) const {
        std::string msg = "training diverged in epoch " + std::to_string(epoch) + ": " + detail;
        msg += last_checkpoint.empty() ? " (no checkpoint written yet)"
                                       : "; last checkpoint: " + last_checkpoint;
        return msg;
    }

    std::vector<LabelMap> predict_for(const std::vector<std::size_t>& pool) {
        NoGradGuard no_grad;
        std::vector<LabelMap> out;
        out.reserve(pool.size());
        const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t lo = 0; lo < pool.size(); lo += b) {
            const std::size_t hi = std::min(pool.size(), lo + b);
            const std::vector<std::size_t> idx(pool.begin() + static_cast<std::ptrdiff_t>(lo),
                                               pool.begin() + static_cast<std::ptrdiff_t>(hi));
            const auto probs =
                softmax_channels(net.forward(make_images(idx), Branch::Strong).strong);
            const auto& pv = probs.data();
            const std::int64_t c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
            for (std::size_t j = 0; j < idx.size(); ++j) {
                LabelMap m(h, w);
                const float* base = pv.data() + static_cast<std::ptrdiff_t>(j) * c * h * w;
                for (std::int64_t p = 0; p < h * w; ++p) {
                    float best = base[p];
                    std::uint8_t cls = 0;  // ties resolve to the lowest class
                    for (std::int64_t ch = 1; ch < c; ++ch) {
                        const float v = base[ch * h * w + p];
                        if (v > best) {
                            best = v;
                            cls = static_cast<std::uint8_t>(ch);
                        }
                    }
                    m.v[static_cast<std::size_t>(p)] = cls;
                }
                out.push_back(std::move(m));
            }
        }
        return out;
    }
};

}  // namespace segrefine
