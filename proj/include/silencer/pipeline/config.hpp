#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "silencer/classifier/checkpoint.hpp"
#include "silencer/error.hpp"
#include "silencer/moe/checkpoint.hpp"
#include "silencer/silencing/silencing.hpp"
#include "silencer/traces/twin.hpp"

namespace silencer::pipeline {

using nlohmann::json;

inline constexpr int kRunConfigVersion = 1;

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Independent seed for one stage of a run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage) {
    std::uint64_t z = seed ^ fnv1a(stage);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct PlantConfig {
    std::size_t num_experts = 3;
    std::size_t num_triggers = 6;
    moe::PlantLayout layout = moe::PlantLayout::DistinctIndices;
    double steer_strength = 1.0;
    /// Explicit plant; when set it replaces the sampled one.
    std::optional<moe::PlantSpec> explicit_plant;
};

struct CorpusConfig {
    std::size_t pairs = 200;
    traces::LengthRange lengths{6, 16};
    double train_fraction = 0.8;
    std::size_t eval_pairs = 100;
    std::size_t utility_sequences = 100;
    std::size_t utility_length = 24;
};

struct TrainingConfig {
    classifier::ClassifierConfig classifier;
    /// Also train the hierarchical variant for comparison.
    bool hierarchical = true;
    /// Also train on permuted labels as a chance-level control.
    bool shuffled_control = false;
};

struct AttackPlan {
    silencing::AttackConfig attack;
    double global_max_silenced_fraction = 0.75;
    std::vector<silencing::Strategy> strategies{silencing::Strategy::Adaptive, silencing::Strategy::OneShot,
                                                silencing::Strategy::Random, silencing::Strategy::Global};
};

struct RunConfig {
    std::uint64_t seed = 1;
    moe::MoEConfig model;
    moe::BuildParams build;
    /// Load this checkpoint instead of building a planted model.
    std::string model_path;
    PlantConfig plant;
    CorpusConfig corpus;
    TrainingConfig training;
    attribution::PromptFilter attribution_prompts = attribution::PromptFilter::MaliciousOnly;
    AttackPlan attack;
    /// Index into the eval twins; unset picks the first pair with one divergent position.
    std::optional<std::size_t> trajectory_pair;
    std::string out_dir = "run";

    void validate() const;
};

inline std::string to_string(moe::PlantLayout l) {
    return l == moe::PlantLayout::SharedIndex ? "shared" : "distinct";
}

inline moe::PlantLayout plant_layout_from_string(const std::string& s) {
    if (s == "distinct") return moe::PlantLayout::DistinctIndices;
    if (s == "shared") return moe::PlantLayout::SharedIndex;
    throw ConfigError("unknown plant layout '" + s + "'");
}

namespace detail {

inline void require_object(const json& j, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + ": expected an object");
    }
}

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    require_object(j, where);
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

} // namespace detail

inline void RunConfig::validate() const {
    model.validate();
    if (plant.num_experts == 0 || plant.num_triggers == 0) {
        throw ConfigError("plant: num_experts and num_triggers must be positive");
    }
    if (corpus.pairs < 2 || corpus.eval_pairs < 1 || corpus.utility_sequences < 1) {
        throw ConfigError("corpus: need at least 2 pairs, 1 eval pair and 1 utility sequence");
    }
    if (!(corpus.train_fraction > 0.0 && corpus.train_fraction < 1.0)) {
        throw ConfigError("corpus: train_fraction must lie in (0, 1)");
    }
    if (corpus.lengths.min < 4 || corpus.lengths.max > 64 || corpus.lengths.min > corpus.lengths.max) {
        throw ConfigError("corpus: lengths must satisfy 4 <= min_length <= max_length <= 64");
    }
    if (corpus.utility_length < 2) {
        throw ConfigError("corpus: utility_length must be at least 2");
    }
    training.classifier.validate();
    attack.attack.validate();
    if (!(attack.global_max_silenced_fraction > 0.0 && attack.global_max_silenced_fraction <= 1.0)) {
        throw ConfigError("attack: global_max_silenced_fraction must lie in (0, 1]");
    }
    if (trajectory_pair && *trajectory_pair >= corpus.eval_pairs) {
        throw ConfigError("trajectory: pair index outside the eval set");
    }
}

/// Canonical JSON form. Stage seeds are derived from `seed`, so the per-module
/// seed fields are not part of the file.
inline json to_json(const RunConfig& c) {
    json model = moe::to_json(c.model);
    model.erase("seed");
    json plant = {{"num_experts", c.plant.num_experts},
                  {"num_triggers", c.plant.num_triggers},
                  {"layout", to_string(c.plant.layout)},
                  {"steer_strength", c.plant.steer_strength}};
    if (c.plant.explicit_plant) {
        plant["explicit"] = moe::to_json(*c.plant.explicit_plant);
    }
    json classifier = classifier::to_json(c.training.classifier);
    classifier.erase("seed");
    classifier["hierarchical"] = c.training.hierarchical;
    classifier["shuffled_control"] = c.training.shuffled_control;
    const auto& a = c.attack.attack;
    json strategies = json::array();
    for (auto s : c.attack.strategies) strategies.push_back(silencing::to_string(s));
    json trajectory = json::object();
    if (c.trajectory_pair) trajectory["pair"] = *c.trajectory_pair;
    return {{"format", "silencer-run-config"},
            {"version", kRunConfigVersion},
            {"seed", c.seed},
            {"out_dir", c.out_dir},
            {"model", model},
            {"model_path", c.model_path},
            {"build", moe::to_json(c.build)},
            {"plant", plant},
            {"corpus",
             {{"pairs", c.corpus.pairs},
              {"min_length", c.corpus.lengths.min},
              {"max_length", c.corpus.lengths.max},
              {"train_fraction", c.corpus.train_fraction},
              {"eval_pairs", c.corpus.eval_pairs},
              {"utility_sequences", c.corpus.utility_sequences},
              {"utility_length", c.corpus.utility_length}}},
            {"classifier", classifier},
            {"attribution", {{"prompts", attribution::to_string(c.attribution_prompts)}}},
            {"attack",
             {{"one_shot_fraction", a.one_shot_fraction},
              {"random_fraction", a.random_fraction},
              {"max_silenced_fraction", a.max_silenced_fraction},
              {"global_max_silenced_fraction", c.attack.global_max_silenced_fraction},
              {"incoherence_factor", a.incoherence_factor},
              {"step_size", a.step_size},
              {"patience_steps", a.patience_steps},
              {"strategies", strategies}}},
            {"trajectory", trajectory}};
}

/// Parses a run config. Missing keys keep their defaults; unknown keys are errors.
inline RunConfig run_config_from_json(const json& j) {
    using detail::check_keys;
    using detail::read;
    RunConfig c;
    try {
        check_keys(j,
                   {"format", "version", "seed", "out_dir", "model", "model_path", "build", "plant", "corpus",
                    "classifier", "attribution", "attack", "trajectory"},
                   "config");
        if (j.value("format", std::string{"silencer-run-config"}) != "silencer-run-config") {
            throw ConfigError("config: not a silencer run config");
        }
        const int version = j.value("version", kRunConfigVersion);
        if (version != kRunConfigVersion) {
            throw ConfigError("config: unsupported version " + std::to_string(version));
        }
        read(j, "seed", c.seed);
        read(j, "out_dir", c.out_dir);
        read(j, "model_path", c.model_path);
        if (j.contains("model")) {
            const json& m = j.at("model");
            check_keys(m, {"vocab_size", "embed_dim", "num_layers", "num_experts", "top_k", "expert_hidden_dim"},
                       "config.model");
            c.model = moe::moe_config_from_json(m);
        }
        if (j.contains("build")) {
            json defaults = moe::to_json(moe::BuildParams{});
            std::set<std::string> keys;
            for (const auto& [k, _] : defaults.items()) keys.insert(k);
            check_keys(j.at("build"), keys, "config.build");
            c.build = moe::build_params_from_json(j.at("build"));
        }
        if (j.contains("plant")) {
            const json& p = j.at("plant");
            check_keys(p, {"num_experts", "num_triggers", "layout", "steer_strength", "explicit"}, "config.plant");
            read(p, "num_experts", c.plant.num_experts);
            read(p, "num_triggers", c.plant.num_triggers);
            if (p.contains("layout")) c.plant.layout = plant_layout_from_string(p.at("layout").get<std::string>());
            read(p, "steer_strength", c.plant.steer_strength);
            if (p.contains("explicit")) c.plant.explicit_plant = moe::plant_from_json(p.at("explicit"));
        }
        if (j.contains("corpus")) {
            const json& p = j.at("corpus");
            check_keys(p,
                       {"pairs", "min_length", "max_length", "train_fraction", "eval_pairs", "utility_sequences",
                        "utility_length"},
                       "config.corpus");
            read(p, "pairs", c.corpus.pairs);
            read(p, "min_length", c.corpus.lengths.min);
            read(p, "max_length", c.corpus.lengths.max);
            read(p, "train_fraction", c.corpus.train_fraction);
            read(p, "eval_pairs", c.corpus.eval_pairs);
            read(p, "utility_sequences", c.corpus.utility_sequences);
            read(p, "utility_length", c.corpus.utility_length);
        }
        if (j.contains("classifier")) {
            json p = j.at("classifier");
            check_keys(p,
                       {"embed_dim", "hidden_dim", "variant", "learning_rate", "beta1", "beta2", "epsilon",
                        "max_epochs", "patience", "batch_size", "hierarchical", "shuffled_control"},
                       "config.classifier");
            read(p, "hierarchical", c.training.hierarchical);
            read(p, "shuffled_control", c.training.shuffled_control);
            p.erase("hierarchical");
            p.erase("shuffled_control");
            c.training.classifier = classifier::classifier_config_from_json(p);
        }
        if (j.contains("attribution")) {
            const json& p = j.at("attribution");
            check_keys(p, {"prompts"}, "config.attribution");
            if (p.contains("prompts")) {
                c.attribution_prompts = attribution::prompt_filter_from_string(p.at("prompts").get<std::string>());
            }
        }
        if (j.contains("attack")) {
            const json& p = j.at("attack");
            check_keys(p,
                       {"one_shot_fraction", "random_fraction", "max_silenced_fraction",
                        "global_max_silenced_fraction", "incoherence_factor", "step_size", "patience_steps",
                        "strategies"},
                       "config.attack");
            auto& a = c.attack.attack;
            read(p, "one_shot_fraction", a.one_shot_fraction);
            read(p, "random_fraction", a.random_fraction);
            read(p, "max_silenced_fraction", a.max_silenced_fraction);
            read(p, "global_max_silenced_fraction", c.attack.global_max_silenced_fraction);
            read(p, "incoherence_factor", a.incoherence_factor);
            read(p, "step_size", a.step_size);
            read(p, "patience_steps", a.patience_steps);
            if (p.contains("strategies")) {
                c.attack.strategies.clear();
                for (const auto& s : p.at("strategies")) {
                    const auto strategy = silencing::strategy_from_string(s.get<std::string>());
                    if (std::find(c.attack.strategies.begin(), c.attack.strategies.end(), strategy) !=
                        c.attack.strategies.end()) {
                        throw ConfigError("config.attack: strategy '" + s.get<std::string>() + "' listed twice");
                    }
                    c.attack.strategies.push_back(strategy);
                }
            }
        }
        if (j.contains("trajectory")) {
            const json& p = j.at("trajectory");
            check_keys(p, {"pair"}, "config.trajectory");
            if (p.contains("pair")) c.trajectory_pair = p.at("pair").get<std::size_t>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const PreconditionError& e) {
        throw ConfigError(e.what());
    }
    try {
        c.validate();
    } catch (const PreconditionError& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config file " + path);
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// Hash of everything that affects results. The output directory is excluded so
/// identical runs in different places share a hash.
inline std::string config_hash(const RunConfig& c) {
    json j = to_json(c);
    j.erase("out_dir");
    return hex64(fnv1a(j.dump()));
}

/// Seeds of the individual stages, all derived from the run seed.
struct StageSeeds {
    std::uint64_t model = 0;
    std::uint64_t plant = 0;
    std::uint64_t corpus = 0;
    std::uint64_t split = 0;
    std::uint64_t classifier = 0;
    std::uint64_t hierarchical = 0;
    std::uint64_t control = 0;
    std::uint64_t eval = 0;
    std::uint64_t utility = 0;
    std::uint64_t random = 0;
};

inline StageSeeds stage_seeds(const RunConfig& c) {
    StageSeeds s;
    // the model and plant use the run seed directly so model ids read naturally
    s.model = c.seed;
    s.plant = c.seed;
    s.corpus = derive_seed(c.seed, "corpus");
    s.split = derive_seed(c.seed, "split");
    s.classifier = derive_seed(c.seed, "classifier");
    s.hierarchical = derive_seed(c.seed, "hierarchical");
    s.control = derive_seed(c.seed, "control");
    s.eval = derive_seed(c.seed, "eval");
    s.utility = derive_seed(c.seed, "utility");
    s.random = derive_seed(c.seed, "random");
    return s;
}

} // namespace silencer::pipeline
