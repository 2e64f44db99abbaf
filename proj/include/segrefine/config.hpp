// Run configuration file: one JSON document with model / data / corruption /
// train / losses / paths sections. Every field is optional and defaults to
// the values below; unknown keys are rejected so typos cannot silently
// change a run. The canonical digest (FNV-1a over the fully materialized
// dump) rides inside checkpoints and reports for provenance.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/model.hpp"
#include "segrefine/phantom.hpp"
#include "segrefine/pipeline.hpp"
#include "segrefine/rng.hpp"

namespace segrefine {

struct DataConfig {
    std::int64_t count = 260;
    std::int64_t height = 64;
    std::int64_t width = 64;
    std::int64_t n_strong = 20;
    std::int64_t n_validation = 40;
    std::uint64_t seed = 1234;

    void validate() const {
        if (count < 1) throw ConfigError("data: count must be >= 1");
        if (n_strong < 0 || n_validation < 0) {
            throw ConfigError("data: pool sizes must be >= 0");
        }
        if (n_strong + n_validation >= count) {
            throw ConfigError("data: no samples left for the weak pool");
        }
    }
};

struct PathsConfig {
    std::int64_t snapshot_count = 4;  // weak samples rendered per snapshot epoch

    void validate() const {
        if (snapshot_count < 0) throw ConfigError("paths: snapshot_count must be >= 0");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const char* section,
                                std::initializer_list<const char*> known) {
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* k : known) {
            if (key == k) ok = true;
        }
        if (!ok) {
            throw ConfigError(std::string("config: unknown key '") + key + "' in section '" +
                              section + "'");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config: key '") + key + "' has the wrong type");
    }
}

}  // namespace detail

struct RunConfigFile {
    ModelConfig model;
    DataConfig data;
    CorruptionConfig corruption;
    TrainConfig train;
    PathsConfig paths;

    /// Parses a config document. Fields absent from the JSON keep their
    /// defaults; `model.input_h/input_w` additionally default to the data
    /// dimensions so the two sections cannot drift apart silently.
    static RunConfigFile from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("config: document must be a JSON object");
        detail::reject_unknown_keys(j, "<top>", {"model", "data", "corruption", "train",
                                                 "losses", "paths"});
        RunConfigFile c;
        bool model_h_given = false, model_w_given = false;

        if (j.contains("model")) {
            const auto& m = j.at("model");
            detail::reject_unknown_keys(m, "model",
                                        {"in_channels", "num_classes", "input_h", "input_w",
                                         "stage_widths", "blocks_per_stage", "norm_groups",
                                         "norm_eps"});
            detail::read_field(m, "in_channels", c.model.in_channels);
            detail::read_field(m, "num_classes", c.model.num_classes);
            detail::read_field(m, "input_h", c.model.input_h);
            detail::read_field(m, "input_w", c.model.input_w);
            detail::read_field(m, "stage_widths", c.model.stage_widths);
            detail::read_field(m, "blocks_per_stage", c.model.blocks_per_stage);
            detail::read_field(m, "norm_groups", c.model.norm_groups);
            detail::read_field(m, "norm_eps", c.model.norm_eps);
            model_h_given = m.contains("input_h");
            model_w_given = m.contains("input_w");
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            detail::reject_unknown_keys(
                d, "data", {"count", "height", "width", "n_strong", "n_validation", "seed"});
            detail::read_field(d, "count", c.data.count);
            detail::read_field(d, "height", c.data.height);
            detail::read_field(d, "width", c.data.width);
            detail::read_field(d, "n_strong", c.data.n_strong);
            detail::read_field(d, "n_validation", c.data.n_validation);
            detail::read_field(d, "seed", c.data.seed);
        }
        if (j.contains("corruption")) {
            const auto& k = j.at("corruption");
            detail::reject_unknown_keys(
                k, "corruption", {"p_drop", "swap_fraction", "boundary_noise_px", "seed"});
            detail::read_field(k, "p_drop", c.corruption.p_drop);
            detail::read_field(k, "swap_fraction", c.corruption.swap_fraction);
            detail::read_field(k, "boundary_noise_px", c.corruption.boundary_noise_px);
            detail::read_field(k, "seed", c.corruption.seed);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::reject_unknown_keys(
                t, "train",
                {"phase1_epochs", "phase2_epochs", "batch_size", "replacement_start_epoch",
                 "replacement_period", "seed", "snapshot_epochs", "phase1_branch",
                 "checkpoint_period", "lr", "beta1", "beta2", "adam_eps"});
            detail::read_field(t, "phase1_epochs", c.train.phase1_epochs);
            detail::read_field(t, "phase2_epochs", c.train.phase2_epochs);
            detail::read_field(t, "batch_size", c.train.batch_size);
            detail::read_field(t, "replacement_start_epoch", c.train.replacement_start_epoch);
            detail::read_field(t, "replacement_period", c.train.replacement_period);
            detail::read_field(t, "seed", c.train.seed);
            detail::read_field(t, "snapshot_epochs", c.train.snapshot_epochs);
            detail::read_field(t, "phase1_branch", c.train.phase1_branch);
            detail::read_field(t, "checkpoint_period", c.train.checkpoint_period);
            detail::read_field(t, "lr", c.train.adam.lr);
            detail::read_field(t, "beta1", c.train.adam.beta1);
            detail::read_field(t, "beta2", c.train.adam.beta2);
            detail::read_field(t, "adam_eps", c.train.adam.eps);
        }
        if (j.contains("losses")) {
            const auto& l = j.at("losses");
            detail::reject_unknown_keys(l, "losses",
                                        {"lambda_cc", "lambda_conf", "rampup_epochs"});
            detail::read_field(l, "lambda_cc", c.train.loss.lambda_cc);
            detail::read_field(l, "lambda_conf", c.train.loss.lambda_conf);
            detail::read_field(l, "rampup_epochs", c.train.loss.rampup_epochs);
        }
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            detail::reject_unknown_keys(p, "paths", {"snapshot_count"});
            detail::read_field(p, "snapshot_count", c.paths.snapshot_count);
        }

        if (!model_h_given) c.model.input_h = c.data.height;
        if (!model_w_given) c.model.input_w = c.data.width;
        c.validate();
        return c;
    }

    /// Empty path = all defaults.
    static RunConfigFile load(const std::filesystem::path& path) {
        if (path.empty()) {
            RunConfigFile c;
            c.validate();
            return c;
        }
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open config '" + path.string() + "'");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("config: " + std::string(e.what()),
                             static_cast<std::uint64_t>(e.byte));
        }
        return from_json(j);
    }

    void validate() const {
        model.validate();
        data.validate();
        corruption.validate();
        train.validate();
        paths.validate();
    }

    /// Fully materialized document: every field present, keys sorted by the
    /// serializer. Identical configs dump identically.
    nlohmann::json to_json() const {
        return {
            {"model",
             {{"in_channels", model.in_channels},
              {"num_classes", model.num_classes},
              {"input_h", model.input_h},
              {"input_w", model.input_w},
              {"stage_widths", model.stage_widths},
              {"blocks_per_stage", model.blocks_per_stage},
              {"norm_groups", model.norm_groups},
              {"norm_eps", model.norm_eps}}},
            {"data",
             {{"count", data.count},
              {"height", data.height},
              {"width", data.width},
              {"n_strong", data.n_strong},
              {"n_validation", data.n_validation},
              {"seed", data.seed}}},
            {"corruption",
             {{"p_drop", corruption.p_drop},
              {"swap_fraction", corruption.swap_fraction},
              {"boundary_noise_px", corruption.boundary_noise_px},
              {"seed", corruption.seed}}},
            {"train",
             {{"phase1_epochs", train.phase1_epochs},
              {"phase2_epochs", train.phase2_epochs},
              {"batch_size", train.batch_size},
              {"replacement_start_epoch", train.replacement_start_epoch},
              {"replacement_period", train.replacement_period},
              {"seed", train.seed},
              {"snapshot_epochs", train.snapshot_epochs},
              {"phase1_branch", train.phase1_branch},
              {"checkpoint_period", train.checkpoint_period},
              {"lr", train.adam.lr},
              {"beta1", train.adam.beta1},
              {"beta2", train.adam.beta2},
              {"adam_eps", train.adam.eps}}},
            {"losses",
             {{"lambda_cc", train.loss.lambda_cc},
              {"lambda_conf", train.loss.lambda_conf},
              {"rampup_epochs", train.loss.rampup_epochs}}},
            {"paths", {{"snapshot_count", paths.snapshot_count}}}};
    }

    std::uint64_t digest() const { return fnv1a64(to_json().dump()); }
};

}  // namespace segrefine
