#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "silencer/error.hpp"
#include "silencer/pipeline/config.hpp"
#include "silencer/pipeline/stages.hpp"
#include "silencer/traces/trace_io.hpp"

namespace silencer::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kModelFile = "model.json";
inline constexpr const char* kCorpusFile = "corpus.trace";
inline constexpr const char* kClassifierFile = "classifier.json";
inline constexpr const char* kHierarchicalFile = "classifier_hierarchical.json";
inline constexpr const char* kTrainingFile = "training.json";
inline constexpr const char* kScoresFile = "scores.csv";
inline constexpr const char* kAttributionFile = "attribution.json";
inline constexpr const char* kAttackFile = "attack.json";
inline constexpr const char* kAttackCurveFile = "attack_curve.csv";
inline constexpr const char* kTrajectoryFile = "trajectory.csv";
inline constexpr const char* kSummaryMarkdown = "summary.md";
inline constexpr const char* kSummaryCsv = "summary.csv";
inline constexpr const char* kManifestFile = "manifest.json";

/// Config hash and seed stamped on every output.
struct Provenance {
    std::string config_hash;
    std::uint64_t seed = 0;

    static Provenance of(const RunConfig& cfg) { return {pipeline::config_hash(cfg), cfg.seed}; }

    json to_json() const { return {{"config_hash", config_hash}, {"seed", seed}}; }

    std::string csv_line() const { return "# config_hash=" + config_hash + " seed=" + std::to_string(seed) + "\n"; }

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ArtifactError("missing artifact " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json read_json(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ArtifactError(path.string() + ": malformed JSON: " + e.what());
    }
}

inline Provenance provenance_from_json(const json& j, const fs::path& path) {
    if (!j.contains("provenance")) {
        throw ArtifactError(path.string() + ": no provenance record");
    }
    const json& p = j.at("provenance");
    return {p.at("config_hash").get<std::string>(), p.at("seed").get<std::uint64_t>()};
}

/// Reads the "# config_hash=... seed=..." line that starts every CSV artifact.
inline Provenance provenance_from_csv(const std::string& text, const fs::path& path) {
    char hash[64] = {};
    unsigned long long seed = 0;
    if (std::sscanf(text.c_str(), "# config_hash=%63s seed=%llu", hash, &seed) != 2) {
        throw ArtifactError(path.string() + ": no provenance line");
    }
    return {hash, seed};
}

inline Provenance provenance_from_corpus(const traces::TraceCorpus& corpus, const fs::path& path) {
    const auto& m = corpus.header.metadata;
    if (!m.count("config_hash") || !m.count("seed")) {
        throw ArtifactError(path.string() + ": no provenance metadata");
    }
    return {m.at("config_hash"), std::stoull(m.at("seed"))};
}

/// Output directory of a run. Every write is recorded in manifest.json with its
/// content hash.
class RunDir {
public:
    explicit RunDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

    const fs::path& root() const { return root_; }
    fs::path path(const std::string& name) const { return root_ / name; }

    void write(const std::string& name, const std::string& bytes, const Provenance& prov) {
        const fs::path p = path(name);
        {
            std::ofstream out(p, std::ios::binary | std::ios::trunc);
            if (!out) {
                throw Error("cannot open " + p.string() + " for writing");
            }
            out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            if (!out) {
                throw Error("failed writing " + p.string());
            }
        }
        json manifest = json::object();
        if (fs::exists(path(kManifestFile))) {
            manifest = read_json(path(kManifestFile));
        }
        manifest["files"][name] = {{"fnv1a64", hex64(fnv1a(bytes))},
                                   {"bytes", bytes.size()},
                                   {"config_hash", prov.config_hash},
                                   {"seed", prov.seed}};
        const std::string text = manifest.dump(2) + "\n";
        std::ofstream out(path(kManifestFile), std::ios::binary | std::ios::trunc);
        out << text;
    }

    void write_json(const std::string& name, json j, const Provenance& prov) {
        j["provenance"] = prov.to_json();
        write(name, j.dump() + "\n", prov);
    }

    void write_csv(const std::string& name, const std::string& body, const Provenance& prov) {
        write(name, prov.csv_line() + body, prov);
    }

    void write_config(const RunConfig& cfg) {
        write(kConfigFile, to_json(cfg).dump(2) + "\n", Provenance::of(cfg));
    }

private:
    fs::path root_;
};

// ---- serialization of stage results ----

inline json to_json(const TrainingReport& r) {
    json epochs = json::array();
    for (const auto& e : r.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_accuracy", e.valid_accuracy}});
    }
    return {{"epochs", epochs},
            {"step_losses", r.step_losses},
            {"best_valid_accuracy", r.best_valid_accuracy},
            {"best_epoch", r.best_epoch},
            {"early_stopped", r.early_stopped}};
}

inline json to_json(const TrainingOutcome& t) {
    return {{"train_size", t.train_size},
            {"valid_size", t.valid_size},
            {"flat", to_json(t.flat_report)},
            {"hierarchical", t.hierarchical_report ? to_json(*t.hierarchical_report) : json(nullptr)},
            {"control_accuracy", t.control_accuracy ? json(*t.control_accuracy) : json(nullptr)}};
}

inline json experts_to_json(const std::vector<moe::LocalExpert>& es) {
    json out = json::array();
    for (const auto& e : es) out.push_back({e.layer, e.expert});
    return out;
}

inline json to_json(const AttributionOutcome& a, attribution::PromptFilter filter, std::size_t top_k) {
    const auto& t = a.table;
    json scores = json::array();
    for (std::size_t l = 0; l < t.num_layers; ++l) {
        json row = json::array();
        for (std::size_t e = 0; e < t.num_experts; ++e) row.push_back(t.at(l, e));
        scores.push_back(row);
    }
    json local = json::array();
    for (const auto& e : a.local.entries) local.push_back({e.layer, e.expert, e.score});
    json global = json::array();
    for (const auto& e : a.global.entries) global.push_back({e.expert, e.score});
    json layer = json::array();
    for (const auto& e : a.layer.entries) layer.push_back({e.layer, e.score});
    return {{"dims", {{"num_layers", t.num_layers}, {"num_experts", t.num_experts}, {"top_k", top_k}}},
            {"prompts", attribution::to_string(filter)},
            {"n_prompts", t.n_prompts},
            {"safety_expert_count", t.safety_expert_count()},
            {"scores", scores},
            {"ranking", {{"local", local}, {"global", global}, {"layer", layer}}}};
}

inline attribution::SafetyScoreTable score_table_from_json(const json& j, const fs::path& path) {
    try {
        attribution::SafetyScoreTable t;
        t.num_layers = j.at("dims").at("num_layers").get<std::size_t>();
        t.num_experts = j.at("dims").at("num_experts").get<std::size_t>();
        t.n_prompts = j.at("n_prompts").get<std::size_t>();
        const json& rows = j.at("scores");
        if (rows.size() != t.num_layers) {
            throw DimensionError(path.string() + ": expected " + std::to_string(t.num_layers) +
                                 " score rows, found " + std::to_string(rows.size()));
        }
        for (const auto& row : rows) {
            if (row.size() != t.num_experts) {
                throw DimensionError(path.string() + ": expected " + std::to_string(t.num_experts) +
                                     " scores per layer, found " + std::to_string(row.size()));
            }
            for (const auto& v : row) t.scores.push_back(v.get<double>());
        }
        return t;
    } catch (const json::exception& e) {
        throw ArtifactError(path.string() + ": malformed score table: " + e.what());
    }
}

inline std::string scores_csv(const attribution::SafetyScoreTable& t) {
    std::string out = "layer,expert,score\n";
    for (std::size_t l = 0; l < t.num_layers; ++l) {
        for (std::size_t e = 0; e < t.num_experts; ++e) {
            out += std::to_string(l) + "," + std::to_string(e) + "," + fmt(t.at(l, e)) + "\n";
        }
    }
    return out;
}

inline std::string ranking_csv(const attribution::ExpertRanking& r) {
    std::string out;
    switch (r.scope) {
    case attribution::Scope::Local: out = "rank,layer,expert,score\n"; break;
    case attribution::Scope::Global: out = "rank,expert,score\n"; break;
    case attribution::Scope::Layer: out = "rank,layer,score\n"; break;
    }
    for (std::size_t i = 0; i < r.entries.size(); ++i) {
        const auto& e = r.entries[i];
        out += std::to_string(i + 1) + ",";
        if (e.layer != attribution::kAll) out += std::to_string(e.layer) + ",";
        if (e.expert != attribution::kAll) out += std::to_string(e.expert) + ",";
        out += fmt(e.score) + "\n";
    }
    return out;
}

inline json to_json(const silencing::AttackReport& r) {
    json steps = json::array();
    for (const auto& s : r.steps) {
        steps.push_back({{"step", s.step},
                         {"mask", experts_to_json(s.mask)},
                         {"added", experts_to_json(s.added)},
                         {"local_fraction", s.local_fraction},
                         {"safety_fraction", s.safety_fraction},
                         {"asr", s.asr},
                         {"perplexity_ratio", s.perplexity_ratio},
                         {"refuse", s.counts.refuse},
                         {"comply", s.counts.comply},
                         {"incoherent", s.counts.incoherent}});
    }
    return {{"strategy", silencing::to_string(r.strategy)},
            {"termination", r.termination},
            {"peak_step", r.peak_step},
            {"safety_expert_count", r.safety_expert_count},
            {"skipped", experts_to_json(r.skipped)},
            {"steps", steps}};
}

inline json to_json(const AttackOutcome& a, const EvalSet& eval) {
    json reports = json::array();
    for (const auto& r : a.reports) reports.push_back(to_json(r));
    return {{"eval_prompts", eval.malicious.size()},
            {"baseline_perplexity", eval.probe.baseline_perplexity()},
            {"incoherence_factor", eval.probe.incoherence_factor()},
            {"random_count_rule", a.random_count_rule},
            {"reports", reports}};
}

inline std::string attack_curve_csv(const AttackOutcome& a) {
    std::string out = "strategy,step,masked,local_fraction,safety_fraction,asr,perplexity_ratio,refuse,comply,incoherent\n";
    for (const auto& r : a.reports) {
        for (const auto& s : r.steps) {
            out += silencing::to_string(r.strategy) + "," + std::to_string(s.step) + "," +
                   std::to_string(s.mask.size()) + "," + fmt(s.local_fraction) + "," + fmt(s.safety_fraction) + "," +
                   fmt(s.asr) + "," + fmt(s.perplexity_ratio) + "," + std::to_string(s.counts.refuse) + "," +
                   std::to_string(s.counts.comply) + "," + std::to_string(s.counts.incoherent) + "\n";
        }
    }
    return out;
}

inline std::string trajectory_csv(const Trajectory& t) {
    std::string out = "# pair=" + std::to_string(t.pair_index) +
                      " first_divergence=" + std::to_string(t.first_divergence) + "\n";
    out += "position,malicious_token,benign_token,divergent,p_malicious,p_benign\n";
    for (const auto& r : t.rows) {
        out += std::to_string(r.position) + "," + std::to_string(r.malicious_token) + "," +
               std::to_string(r.benign_token) + "," + (r.divergent ? "1" : "0") + "," +
               fmt(r.malicious_probability) + "," + fmt(r.benign_probability) + "\n";
    }
    return out;
}

// ---- loading upstream artifacts ----

inline moe::MoEModel load_model_artifact(const fs::path& path) {
    const json j = read_json(path);
    try {
        return moe::model_from_json(j);
    } catch (const json::exception& e) {
        throw ArtifactError(path.string() + ": malformed model checkpoint: " + e.what());
    } catch (const ConfigError& e) {
        throw ArtifactError(path.string() + ": " + e.what());
    }
}

inline classifier::TraceClassifier load_classifier_artifact(const fs::path& path) {
    const json j = read_json(path);
    try {
        return classifier::classifier_from_json(j);
    } catch (const json::exception& e) {
        throw ArtifactError(path.string() + ": malformed classifier checkpoint: " + e.what());
    } catch (const ConfigError& e) {
        throw ArtifactError(path.string() + ": " + e.what());
    }
}

inline traces::TraceCorpus load_corpus_artifact(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ArtifactError("missing artifact " + path.string());
    }
    return traces::read_corpus(path.string());
}

} // namespace silencer::pipeline
