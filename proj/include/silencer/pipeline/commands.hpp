#pragma once

#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "silencer/classifier/checkpoint.hpp"
#include "silencer/error.hpp"
#include "silencer/pipeline/artifacts.hpp"
#include "silencer/pipeline/config.hpp"
#include "silencer/pipeline/stages.hpp"

namespace silencer::pipeline {

enum ExitCode : int {
    kExitOk = 0,
    kExitOther = 1,
    kExitConfig = 2,
    kExitDimension = 3,
    kExitNumerical = 4,
    kExitArtifact = 5,
    kExitContract = 6,
};

inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const DimensionError*>(&e)) return kExitDimension;
    if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
    if (dynamic_cast<const ArtifactError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitArtifact;
    if (dynamic_cast<const ContractError*>(&e)) return kExitContract;
    return kExitOther;
}

/// Upstream artifact locations; empty entries default to the run directory.
struct Inputs {
    fs::path model;
    fs::path corpus;
    fs::path classifier;
    fs::path attribution;
};

inline fs::path input_or(const fs::path& given, const RunConfig& cfg, const char* name) {
    return given.empty() ? fs::path(cfg.out_dir) / name : given;
}

inline fs::path cmd_build_model(const RunConfig& cfg) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const moe::MoEModel model = build_model(cfg);
    dir.write_json(kModelFile, moe::to_json(model.weights()), Provenance::of(cfg));
    return dir.path(kModelFile);
}

inline fs::path cmd_gen_corpus(const RunConfig& cfg, const Inputs& in = {}) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const moe::MoEModel model = load_model_artifact(input_or(in.model, cfg, kModelFile));
    traces::TraceCorpus corpus = generate_corpus(cfg, model);
    const Provenance prov = Provenance::of(cfg);
    corpus.header.metadata["config_hash"] = prov.config_hash;
    corpus.header.metadata["seed"] = std::to_string(prov.seed);
    const std::vector<char> bytes = traces::encode_corpus(corpus);
    dir.write(kCorpusFile, std::string(bytes.begin(), bytes.end()), prov);
    return dir.path(kCorpusFile);
}

inline fs::path cmd_train_classifier(const RunConfig& cfg, const Inputs& in = {}) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const traces::TraceCorpus corpus = load_corpus_artifact(input_or(in.corpus, cfg, kCorpusFile));
    const TrainingOutcome t = train_classifiers(cfg, corpus);
    const Provenance prov = Provenance::of(cfg);
    dir.write_json(kClassifierFile, classifier::to_json(t.flat), prov);
    if (t.hierarchical) {
        dir.write_json(kHierarchicalFile, classifier::to_json(*t.hierarchical), prov);
    }
    dir.write_json(kTrainingFile, to_json(t), prov);
    return dir.path(kClassifierFile);
}

inline fs::path cmd_attribute(const RunConfig& cfg, const Inputs& in = {}) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const classifier::TraceClassifier clf = load_classifier_artifact(input_or(in.classifier, cfg, kClassifierFile));
    const fs::path corpus_path = input_or(in.corpus, cfg, kCorpusFile);
    const traces::TraceCorpus corpus = load_corpus_artifact(corpus_path);
    const auto& d = clf.dims();
    if (corpus.header.num_layers != d.num_layers || corpus.header.num_experts != d.num_experts ||
        corpus.header.top_k != d.top_k) {
        throw DimensionError(corpus_path.string() + " has (L=" + std::to_string(corpus.header.num_layers) +
                             ", N=" + std::to_string(corpus.header.num_experts) +
                             ", K=" + std::to_string(corpus.header.top_k) + ") but the classifier expects (L=" +
                             std::to_string(d.num_layers) + ", N=" + std::to_string(d.num_experts) +
                             ", K=" + std::to_string(d.top_k) + ")");
    }
    const AttributionOutcome a = attribute(cfg, clf, corpus);
    const Provenance prov = Provenance::of(cfg);
    dir.write_csv(kScoresFile, scores_csv(a.table), prov);
    dir.write_csv("ranking_local.csv", ranking_csv(a.local), prov);
    dir.write_csv("ranking_global.csv", ranking_csv(a.global), prov);
    dir.write_csv("ranking_layer.csv", ranking_csv(a.layer), prov);
    dir.write_json(kAttributionFile, to_json(a, cfg.attribution_prompts, d.top_k), prov);
    return dir.path(kScoresFile);
}

/// Fails with DimensionError before any attack step when the ranking and the
/// model disagree on shape.
inline fs::path cmd_attack(const RunConfig& cfg, const Inputs& in = {}) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const fs::path model_path = input_or(in.model, cfg, kModelFile);
    const fs::path attribution_path = input_or(in.attribution, cfg, kAttributionFile);
    const moe::MoEModel model = load_model_artifact(model_path);
    const attribution::SafetyScoreTable table =
        score_table_from_json(read_json(attribution_path), attribution_path);
    require_table_matches(table, model, attribution_path.string(), model_path.string());
    const AttributionOutcome a = rank_all(table);
    const EvalSet eval = make_eval_set(cfg, model);
    const AttackOutcome attacks = run_attacks(cfg, model, a, eval);
    const Provenance prov = Provenance::of(cfg);
    dir.write_json(kAttackFile, to_json(attacks, eval), prov);
    dir.write_csv(kAttackCurveFile, attack_curve_csv(attacks), prov);
    return dir.path(kAttackFile);
}

inline fs::path cmd_trajectory(const RunConfig& cfg, const Inputs& in = {}) {
    RunDir dir(cfg.out_dir);
    dir.write_config(cfg);
    const fs::path model_path = input_or(in.model, cfg, kModelFile);
    const fs::path clf_path = input_or(in.classifier, cfg, kClassifierFile);
    const moe::MoEModel model = load_model_artifact(model_path);
    const classifier::TraceClassifier clf = load_classifier_artifact(clf_path);
    require_classifier_matches(clf, model, clf_path.string(), model_path.string());
    const EvalSet eval = make_eval_set(cfg, model);
    dir.write_csv(kTrajectoryFile, trajectory_csv(trajectory(cfg, clf, model, eval)), Provenance::of(cfg));
    return dir.path(kTrajectoryFile);
}

namespace detail {

inline void require_same(const Provenance& expected, const Provenance& found, const fs::path& path) {
    if (!(expected == found)) {
        throw ArtifactError(path.string() + " was produced by config " + found.config_hash + " (seed " +
                            std::to_string(found.seed) + "), expected " + expected.config_hash + " (seed " +
                            std::to_string(expected.seed) + ")");
    }
}

inline const json& peak_step(const json& report) {
    return report.at("steps").at(report.at("peak_step").get<std::size_t>());
}

} // namespace detail

/// Consolidated summary of a run directory. Refuses artifacts whose config hash
/// differs from the directory's config.json.
inline fs::path cmd_report(const fs::path& run_dir) {
    const fs::path cfg_path = run_dir / kConfigFile;
    RunConfig cfg;
    try {
        cfg = run_config_from_json(read_json(cfg_path));
    } catch (const ConfigError& e) {
        throw ArtifactError(cfg_path.string() + ": " + e.what());
    }
    const Provenance prov = Provenance::of(cfg);

    const json model_j = read_json(run_dir / kModelFile);
    detail::require_same(prov, provenance_from_json(model_j, run_dir / kModelFile), run_dir / kModelFile);
    const moe::PlantSpec plant = moe::plant_from_json(model_j.at("plant"));

    const traces::TraceCorpus corpus = load_corpus_artifact(run_dir / kCorpusFile);
    detail::require_same(prov, provenance_from_corpus(corpus, run_dir / kCorpusFile), run_dir / kCorpusFile);

    const json clf_j = read_json(run_dir / kClassifierFile);
    detail::require_same(prov, provenance_from_json(clf_j, run_dir / kClassifierFile), run_dir / kClassifierFile);
    const json training = read_json(run_dir / kTrainingFile);
    detail::require_same(prov, provenance_from_json(training, run_dir / kTrainingFile), run_dir / kTrainingFile);

    const json attr = read_json(run_dir / kAttributionFile);
    detail::require_same(prov, provenance_from_json(attr, run_dir / kAttributionFile), run_dir / kAttributionFile);
    for (const char* name : {kScoresFile, "ranking_local.csv", "ranking_global.csv", "ranking_layer.csv"}) {
        detail::require_same(prov, provenance_from_csv(read_file(run_dir / name), run_dir / name), run_dir / name);
    }
    const json attack = read_json(run_dir / kAttackFile);
    detail::require_same(prov, provenance_from_json(attack, run_dir / kAttackFile), run_dir / kAttackFile);
    detail::require_same(prov, provenance_from_csv(read_file(run_dir / kAttackCurveFile), run_dir / kAttackCurveFile),
                         run_dir / kAttackCurveFile);
    const std::string traj = read_file(run_dir / kTrajectoryFile);
    detail::require_same(prov, provenance_from_csv(traj, run_dir / kTrajectoryFile), run_dir / kTrajectoryFile);

    const attribution::SafetyScoreTable table = score_table_from_json(attr, run_dir / kAttributionFile);
    const auto local = attribution::rank(table, attribution::Scope::Local);
    const std::size_t m = plant.safety_experts.size();
    const double precision = attribution::precision_at(local, plant.safety_experts, m);

    std::vector<std::pair<std::string, std::string>> metrics;
    const auto add = [&](std::string key, std::string value) { metrics.emplace_back(std::move(key), std::move(value)); };
    add("config_hash", prov.config_hash);
    add("seed", std::to_string(prov.seed));
    add("model_id", corpus.header.model_id);
    add("corpus_traces", std::to_string(corpus.traces.size()));
    add("flat_valid_accuracy", fmt(training.at("flat").at("best_valid_accuracy").get<double>()));
    if (!training.at("hierarchical").is_null()) {
        add("hierarchical_valid_accuracy",
            fmt(training.at("hierarchical").at("best_valid_accuracy").get<double>()));
    }
    if (!training.at("control_accuracy").is_null()) {
        add("shuffled_label_control_accuracy", fmt(training.at("control_accuracy").get<double>()));
    }
    add("safety_experts", std::to_string(table.safety_expert_count()));
    add("precision_at_" + std::to_string(m), fmt(precision));
    for (const json& r : attack.at("reports")) {
        const std::string s = r.at("strategy").get<std::string>();
        const json& peak = detail::peak_step(r);
        add(s + "_baseline_asr", fmt(r.at("steps").at(0).at("asr").get<double>()));
        add(s + "_peak_asr", fmt(peak.at("asr").get<double>()));
        add(s + "_peak_masked", std::to_string(peak.at("mask").size()));
        add(s + "_peak_local_fraction", fmt(peak.at("local_fraction").get<double>()));
        add(s + "_peak_perplexity_ratio", fmt(peak.at("perplexity_ratio").get<double>()));
        add(s + "_final_masked", std::to_string(r.at("steps").back().at("mask").size()));
        add(s + "_termination", r.at("termination").get<std::string>());
    }

    std::string csv = "metric,value\n";
    for (const auto& [k, v] : metrics) csv += k + "," + v + "\n";

    std::string md = "# Run summary\n\n";
    md += "| metric | value |\n|---|---|\n";
    for (const auto& [k, v] : metrics) md += "| " + k + " | " + v + " |\n";
    md += "\n## Planted safety experts\n\n";
    for (const auto& e : plant.safety_experts) md += "- " + moe::to_string(e) + "\n";
    md += "\n## Top of the local ranking\n\n| rank | layer | expert | score |\n|---|---|---|---|\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, local.entries.size()); ++i) {
        const auto& e = local.entries[i];
        md += "| " + std::to_string(i + 1) + " | " + std::to_string(e.layer) + " | " + std::to_string(e.expert) +
              " | " + fmt(e.score) + " |\n";
    }
    for (const json& r : attack.at("reports")) {
        md += "\n## Attack: " + r.at("strategy").get<std::string>() + " (" + r.at("termination").get<std::string>() +
              ")\n\n| step | masked | local fraction | ASR | perplexity ratio |\n|---|---|---|---|---|\n";
        for (const json& s : r.at("steps")) {
            md += "| " + std::to_string(s.at("step").get<std::size_t>()) + " | " +
                  std::to_string(s.at("mask").size()) + " | " + fmt(s.at("local_fraction").get<double>()) + " | " +
                  fmt(s.at("asr").get<double>()) + " | " + fmt(s.at("perplexity_ratio").get<double>()) + " |\n";
        }
    }
    md += "\n## Artifacts\n\n";
    for (const char* name : {kModelFile, kCorpusFile, kClassifierFile, kTrainingFile, kScoresFile, kAttributionFile,
                             kAttackFile, kAttackCurveFile, kTrajectoryFile}) {
        md += "- " + std::string(name) + "\n";
    }

    RunDir dir(run_dir);
    dir.write(kSummaryCsv, prov.csv_line() + csv, prov);
    dir.write(kSummaryMarkdown, "<!-- config_hash=" + prov.config_hash + " seed=" + std::to_string(prov.seed) +
                                    " -->\n" + md,
              prov);
    return dir.path(kSummaryMarkdown);
}

inline fs::path cmd_run_all(const RunConfig& cfg) {
    cmd_build_model(cfg);
    cmd_gen_corpus(cfg);
    cmd_train_classifier(cfg);
    cmd_attribute(cfg);
    cmd_attack(cfg);
    cmd_trajectory(cfg);
    return cmd_report(cfg.out_dir);
}

} // namespace silencer::pipeline
