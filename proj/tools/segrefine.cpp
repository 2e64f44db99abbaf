// Command-line surface: synthetic dataset generation, two-variant training,
// label-quality evaluation, and Table-style report emission.
// Exit codes: 0 success, 1 config/IO error, 2 numerical divergence.
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segrefine/checkpoint.hpp"
#include "segrefine/config.hpp"
#include "segrefine/corpus.hpp"
#include "segrefine/errors.hpp"
#include "segrefine/metrics.hpp"
#include "segrefine/phantom.hpp"
#include "segrefine/pipeline.hpp"
#include "segrefine/png.hpp"

namespace fs = std::filesystem;
using namespace segrefine;

namespace {

std::vector<double> pool_label_dsc(const Corpus& corpus, Split split) {
    const auto pool = corpus.pool(split);
    std::vector<double> mean(static_cast<std::size_t>(corpus.num_classes), 0.0);
    for (const std::size_t i : pool) {
        const auto c =
            confusion_counts(corpus.samples[i].label, corpus.samples[i].gt, corpus.num_classes);
        for (std::int64_t cls = 0; cls < corpus.num_classes; ++cls) {
            mean[static_cast<std::size_t>(cls)] += dsc(c, cls);
        }
    }
    for (auto& m : mean) m /= static_cast<double>(pool.size());
    return mean;
}

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

// --- gen-data ---------------------------------------------------------------

int cmd_gen_data(const fs::path& out_dir, const fs::path& config_path,
                 std::optional<std::uint64_t> seed) {
    RunConfigFile cfg = RunConfigFile::load(config_path);
    if (seed) cfg.data.seed = *seed;

    auto samples =
        generate_samples(cfg.data.count, cfg.data.height, cfg.data.width, cfg.data.seed);
    Corpus corpus = split_corpus(std::move(samples), cfg.data.n_strong, cfg.data.n_validation,
                                 cfg.corruption, cfg.data.seed);
    write_dataset(corpus, out_dir);

    const auto n_strong = corpus.pool(Split::StrongTrain).size();
    const auto n_weak = corpus.pool(Split::WeakTrain).size();
    const auto n_val = corpus.pool(Split::Validation).size();
    std::printf("wrote %zu samples to %s (strong %zu, weak %zu, validation %zu)\n",
                corpus.samples.size(), out_dir.string().c_str(), n_strong, n_weak, n_val);
    const auto d = pool_label_dsc(corpus, Split::WeakTrain);
    const auto names = class_names();
    std::printf("initial weak-label DSC vs gt:");
    for (std::int64_t c = 1; c < corpus.num_classes; ++c) {
        std::printf(" %s=%.3f", names[static_cast<std::size_t>(c)].c_str(),
                    d[static_cast<std::size_t>(c)]);
    }
    std::printf("\n");
    return 0;
}

// --- train ------------------------------------------------------------------

void write_snapshots(const TrainRun& run, const fs::path& out_dir, int epoch,
                     const std::vector<std::size_t>& snapshot_idx) {
    if (snapshot_idx.empty()) return;
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d", epoch);
    const fs::path dir = out_dir / "snapshots" / name;
    fs::create_directories(dir);
    for (const std::size_t i : snapshot_idx) {
        const Sample& s = run.corpus.samples[i];
        write_label_png(dir / (s.id + ".png"), s.label);
    }
}

int cmd_train(const fs::path& data_dir, const fs::path& out_dir, const std::string& variant_str,
              const fs::path& config_path, const fs::path& resume_path) {
    RunConfigFile cfg = RunConfigFile::load(config_path);
    Variant variant;
    if (variant_str == "transfer") {
        variant = Variant::Transfer;
    } else if (variant_str == "baseline") {
        variant = Variant::Baseline;
    } else {
        throw ConfigError("train: --variant must be 'transfer' or 'baseline'");
    }

    Corpus corpus = read_dataset(data_dir);
    const std::uint64_t digest = cfg.digest();
    TrainRun run(std::move(corpus), cfg.model, cfg.train, variant, digest);
    if (!resume_path.empty()) {
        run.resume(load_checkpoint(resume_path));
        std::printf("resumed from %s at epoch %d\n", resume_path.string().c_str(),
                    run.epochs_done);
    }

    fs::create_directories(out_dir / "checkpoints");
    std::vector<std::size_t> snapshot_idx = run.corpus.pool(Split::WeakTrain);
    if (static_cast<std::int64_t>(snapshot_idx.size()) > cfg.paths.snapshot_count) {
        snapshot_idx.resize(static_cast<std::size_t>(cfg.paths.snapshot_count));
    }
    const auto& snaps = cfg.train.snapshot_epochs;
    const auto wants_snapshot = [&](int e) {
        return std::find(snaps.begin(), snaps.end(), e) != snaps.end();
    };
    if (run.epochs_done == 0 && wants_snapshot(0)) {
        write_snapshots(run, out_dir, 0, snapshot_idx);
    }

    run.epoch_hook = [&](TrainRun& r) {
        const int e = r.epochs_done;
        if (wants_snapshot(e)) write_snapshots(r, out_dir, e, snapshot_idx);
        const bool periodic =
            cfg.train.checkpoint_period > 0 && e % cfg.train.checkpoint_period == 0;
        if (periodic || e == cfg.train.total_epochs()) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d.dbck", e);
            const fs::path p = out_dir / "checkpoints" / name;
            save_checkpoint(p, r.make_checkpoint());
            r.last_checkpoint = p.string();
        }
    };

    run.run();

    save_checkpoint(out_dir / "checkpoints" / "final.dbck", run.make_checkpoint());
    std::vector<std::pair<std::string, LabelMap>> refined;
    for (const std::size_t i : run.corpus.pool(Split::WeakTrain)) {
        refined.emplace_back(run.corpus.samples[i].id, run.corpus.samples[i].label);
    }
    write_label_overlay(out_dir / "refined", refined, run.corpus.num_classes);

    nlohmann::json run_meta = {{"schema", "segrefine-run-v1"},
                               {"variant", variant_name(variant)},
                               {"config_digest", hex64(digest)},
                               {"seed", cfg.train.seed},
                               {"epochs", run.epochs_done}};
    write_text_file(out_dir / "run.json", run_meta.dump(2) + "\n");
    write_text_file(out_dir / "history.json", run.history.to_json().dump(2) + "\n");
    nlohmann::json timings = {{"epoch_seconds", run.history.epoch_seconds}};
    write_text_file(out_dir / "timings.json", timings.dump(2) + "\n");
    write_text_file(out_dir / "config.json", cfg.to_json().dump(2) + "\n");

    const auto d = run.weak_label_dsc();
    const auto names = class_names();
    std::printf("%s: %d epochs, %zu replacements; final weak-label DSC:", variant_name(variant),
                run.epochs_done, run.history.replacements.size());
    for (std::int64_t c = 1; c < run.corpus.num_classes; ++c) {
        std::printf(" %s=%.3f", names[static_cast<std::size_t>(c)].c_str(),
                    d[static_cast<std::size_t>(c)]);
    }
    std::printf("\n");
    return 0;
}

// --- evaluate ---------------------------------------------------------------

nlohmann::json metrics_to_json(const SampleMetrics& m) {
    nlohmann::json rvds = nlohmann::json::array();
    for (const auto& r : m.rvd) {
        if (r) {
            rvds.push_back(*r);
        } else {
            rvds.push_back(nullptr);
        }
    }
    return {{"id", m.id}, {"iou", m.iou}, {"dsc", m.dsc}, {"rvd", rvds}};
}

int cmd_evaluate(const fs::path& data_dir, const std::string& labels_spec,
                 const fs::path& out_file, std::string variant) {
    Corpus corpus = read_dataset(data_dir);
    const auto pool = corpus.pool(Split::WeakTrain);

    std::vector<std::pair<std::string, LabelMap>> labels;
    if (labels_spec == "gt") {
        if (variant.empty()) variant = "Ground truth";
        for (const std::size_t i : pool) {
            labels.emplace_back(corpus.samples[i].id, corpus.samples[i].gt);
        }
    } else if (labels_spec == "initial") {
        if (variant.empty()) variant = kVariantInitial;
        for (const std::size_t i : pool) {
            labels.emplace_back(corpus.samples[i].id, corpus.samples[i].label);
        }
    } else {
        fs::path overlay_dir = labels_spec;
        if (fs::exists(overlay_dir / "refined" / "overlay.json")) {
            // A train output directory: use its refined labels and variant.
            if (variant.empty() && fs::exists(overlay_dir / "run.json")) {
                std::ifstream in(overlay_dir / "run.json");
                const auto meta = nlohmann::json::parse(in);
                variant = meta.value("variant", "");
            }
            overlay_dir /= "refined";
        }
        if (variant.empty()) {
            throw ConfigError("evaluate: --variant is required for a bare overlay directory");
        }
        labels = read_label_overlay(overlay_dir, corpus.h, corpus.w, corpus.num_classes);
    }

    // The weak pool defines the evaluation set; ids must match it exactly.
    std::vector<std::pair<std::string, const LabelMap*>> by_id;
    for (const auto& [id, m] : labels) by_id.emplace_back(id, &m);
    std::sort(by_id.begin(), by_id.end());
    const auto find_idx = [&](const std::string& id) -> std::ptrdiff_t {
        const auto it = std::lower_bound(
            by_id.begin(), by_id.end(), id,
            [](const auto& a, const std::string& b) { return a.first < b; });
        return (it != by_id.end() && it->first == id) ? it - by_id.begin() : -1;
    };
    std::vector<std::string> missing, unknown;
    std::vector<bool> used(by_id.size(), false);
    for (const std::size_t i : pool) {
        const auto k = find_idx(corpus.samples[i].id);
        if (k < 0) {
            missing.push_back(corpus.samples[i].id);
        } else {
            used[static_cast<std::size_t>(k)] = true;
        }
    }
    for (std::size_t k = 0; k < by_id.size(); ++k) {
        if (!used[k]) unknown.push_back(by_id[k].first);
    }
    if (!missing.empty() || !unknown.empty()) {
        std::string msg = "evaluate: label set does not match the weak pool";
        if (!missing.empty()) {
            msg += "; missing ids:";
            for (const auto& id : missing) msg += " " + id;
        }
        if (!unknown.empty()) {
            msg += "; unknown ids:";
            for (const auto& id : unknown) msg += " " + id;
        }
        throw ConfigError(msg);
    }

    nlohmann::json samples = nlohmann::json::array();
    for (const std::size_t i : pool) {
        const Sample& s = corpus.samples[i];
        const LabelMap& pred = *by_id[static_cast<std::size_t>(find_idx(s.id))].second;
        samples.push_back(metrics_to_json(sample_metrics(s.id, pred, s.gt, corpus.num_classes)));
    }
    nlohmann::json doc = {{"schema", "segrefine-eval-v1"},
                          {"variant", variant},
                          {"class_names", class_names()},
                          {"units", {{"iou", "fraction"}, {"dsc", "fraction"}, {"rvd", "percent"}}},
                          {"samples", samples}};
    write_text_file(out_file, doc.dump(2) + "\n");
    std::printf("evaluated %zu samples (variant '%s') -> %s\n", pool.size(), variant.c_str(),
                out_file.string().c_str());
    return 0;
}

// --- report -----------------------------------------------------------------

VariantMetrics eval_from_json(const nlohmann::json& doc, std::vector<std::string>& class_names_out) {
    if (doc.value("schema", "") != "segrefine-eval-v1") {
        throw ConfigError("report: not an evaluation file (wrong schema)");
    }
    VariantMetrics v;
    v.variant = doc.at("variant").get<std::string>();
    const auto names = doc.at("class_names").get<std::vector<std::string>>();
    if (class_names_out.empty()) {
        class_names_out = names;
    } else if (class_names_out != names) {
        throw ConfigError("report: evaluation files disagree on class names");
    }
    for (const auto& s : doc.at("samples")) {
        SampleMetrics m;
        m.id = s.at("id").get<std::string>();
        m.iou = s.at("iou").get<std::vector<double>>();
        m.dsc = s.at("dsc").get<std::vector<double>>();
        for (const auto& r : s.at("rvd")) {
            m.rvd.push_back(r.is_null() ? std::nullopt
                                        : std::optional<double>(r.get<double>()));
        }
        v.samples.push_back(std::move(m));
    }
    return v;
}

int cmd_report(const std::vector<fs::path>& run_specs, const fs::path& out_file,
               fs::path json_file) {
    std::vector<fs::path> eval_files;
    for (const auto& spec : run_specs) {
        if (fs::is_directory(spec)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::directory_iterator(spec)) {
                const auto name = e.path().filename().string();
                if (e.is_regular_file() && name.rfind("eval", 0) == 0 &&
                    e.path().extension() == ".json") {
                    found.push_back(e.path());
                }
            }
            if (found.empty()) {
                throw ConfigError("report: no eval*.json files in '" + spec.string() + "'");
            }
            std::sort(found.begin(), found.end());
            eval_files.insert(eval_files.end(), found.begin(), found.end());
        } else if (fs::is_regular_file(spec)) {
            eval_files.push_back(spec);
        } else {
            throw IoError("report: '" + spec.string() + "' does not exist");
        }
    }

    std::vector<std::string> names;
    std::vector<VariantMetrics> variants;
    for (const auto& f : eval_files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw IoError("cannot open '" + f.string() + "'");
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("report: '" + f.string() + "': " + e.what(),
                             static_cast<std::uint64_t>(e.byte));
        }
        auto v = eval_from_json(doc, names);
        for (const auto& existing : variants) {
            if (existing.variant == v.variant) {
                throw ConfigError("report: duplicate evaluation for variant '" + v.variant +
                                  "' (one per variant)");
            }
        }
        variants.push_back(std::move(v));
    }

    // Canonical row order: initial, baseline, transfer, then anything else.
    const auto rank = [](const std::string& v) {
        if (v == kVariantInitial) return 0;
        if (v == kVariantBaseline) return 1;
        if (v == kVariantTransfer) return 2;
        return 3;
    };
    std::stable_sort(variants.begin(), variants.end(),
                     [&](const auto& a, const auto& b) { return rank(a.variant) < rank(b.variant); });

    const RefinementReport rep = aggregate_report(variants, names);
    const std::string text = rep.render_text();
    std::fputs(text.c_str(), stdout);
    write_text_file(out_file, text);
    if (json_file.empty()) {
        json_file = out_file;
        json_file.replace_extension(".json");
        if (json_file == out_file) {
            throw ConfigError("report: --out already ends in .json; pass --json explicitly");
        }
    }
    write_text_file(json_file, rep.to_json().dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-branch weak-label refinement pipeline"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
    fs::path gen_out, gen_config;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--config", gen_config, "JSON config file");
    gen->add_option("--seed", gen_seed, "overrides data.seed from the config");

    auto* train = app.add_subcommand("train", "train a variant and refine weak labels");
    fs::path tr_data, tr_out, tr_config, tr_resume;
    std::string tr_variant = "transfer";
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--out", tr_out, "run output directory")->required();
    train->add_option("--variant", tr_variant, "transfer|baseline");
    train->add_option("--config", tr_config, "JSON config file");
    train->add_option("--resume", tr_resume, "checkpoint file to continue from");

    auto* ev = app.add_subcommand("evaluate", "score labels against hidden ground truth");
    fs::path ev_data, ev_out;
    std::string ev_labels, ev_variant;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--labels", ev_labels,
                   "'initial', 'gt', a train run directory, or a label overlay directory")
        ->required();
    ev->add_option("--out", ev_out, "evaluation JSON to write")->required();
    ev->add_option("--variant", ev_variant, "variant name recorded in the evaluation");

    auto* rep = app.add_subcommand("report", "render the variant comparison table");
    std::vector<fs::path> rp_runs;
    fs::path rp_out, rp_json;
    rep->add_option("--runs", rp_runs, "evaluation files or directories containing eval*.json")
        ->required()
        ->expected(-1);
    rep->add_option("--out", rp_out, "text report to write")->required();
    rep->add_option("--json", rp_json, "JSON report to write (default: --out with .json)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_config, gen_seed);
        if (train->parsed()) return cmd_train(tr_data, tr_out, tr_variant, tr_config, tr_resume);
        if (ev->parsed()) return cmd_evaluate(ev_data, ev_labels, ev_out, ev_variant);
        if (rep->parsed()) return cmd_report(rp_runs, rp_out, rp_json);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
