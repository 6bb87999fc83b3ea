#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "silencer/attribution/attribution.hpp"
#include "silencer/classifier/train.hpp"
#include "silencer/moe/checkpoint.hpp"
#include "silencer/pipeline/config.hpp"
#include "silencer/silencing/silencing.hpp"
#include "silencer/traces/collect.hpp"
#include "silencer/traces/twin.hpp"

// In-memory stages of a run. The CLI wraps each one with artifact IO; the
// acceptance suite calls them directly.
namespace silencer::pipeline {

using classifier::TraceClassifier;
using classifier::TrainingReport;

inline moe::PlantSpec plant_for(const RunConfig& cfg) {
    if (cfg.plant.explicit_plant) {
        return *cfg.plant.explicit_plant;
    }
    moe::MoEConfig mc = cfg.model;
    mc.seed = stage_seeds(cfg).model;
    return moe::make_plant(mc, cfg.plant.num_experts, cfg.plant.num_triggers, stage_seeds(cfg).plant,
                           cfg.plant.layout, cfg.plant.steer_strength);
}

/// Planted model for the config, or the checkpoint named by `model_path`.
inline moe::MoEModel build_model(const RunConfig& cfg) {
    if (!cfg.model_path.empty()) {
        return moe::load_model(cfg.model_path);
    }
    moe::MoEConfig mc = cfg.model;
    mc.seed = stage_seeds(cfg).model;
    return moe::build_planted_model(mc, plant_for(cfg), cfg.build);
}

inline std::vector<traces::TwinPair> corpus_pairs(const RunConfig& cfg, const moe::MoEModel& model) {
    return traces::generate_twin_corpus(model.config(), model.plant(), cfg.corpus.pairs, cfg.corpus.lengths,
                                        stage_seeds(cfg).corpus);
}

inline traces::TraceCorpus generate_corpus(const RunConfig& cfg, const moe::MoEModel& model) {
    return traces::collect_traces(model, corpus_pairs(cfg, model));
}

inline classifier::TraceDims dims_of(const traces::TraceCorpus& corpus) {
    return {corpus.header.num_layers, corpus.header.num_experts, corpus.header.top_k};
}

struct TrainingOutcome {
    TraceClassifier flat;
    TrainingReport flat_report;
    std::optional<TraceClassifier> hierarchical;
    std::optional<TrainingReport> hierarchical_report;
    /// Accuracy on the true validation labels of a model trained on permuted labels.
    std::optional<double> control_accuracy;
    std::size_t train_size = 0;
    std::size_t valid_size = 0;
};

inline std::pair<traces::TraceCorpus, traces::TraceCorpus> split_corpus(const RunConfig& cfg,
                                                                        const traces::TraceCorpus& corpus) {
    return traces::split(corpus, cfg.corpus.train_fraction, stage_seeds(cfg).split);
}

inline TrainingOutcome train_classifiers(const RunConfig& cfg, const traces::TraceCorpus& corpus) {
    const StageSeeds seeds = stage_seeds(cfg);
    const auto [train_set, valid_set] = split_corpus(cfg, corpus);
    const classifier::TraceDims dims = dims_of(corpus);

    classifier::ClassifierConfig flat_cfg = cfg.training.classifier;
    flat_cfg.variant = classifier::Variant::Flat;
    flat_cfg.seed = seeds.classifier;
    TrainingOutcome out{TraceClassifier(flat_cfg, dims), {}, std::nullopt, std::nullopt, std::nullopt,
                        train_set.traces.size(), valid_set.traces.size()};
    out.flat_report = classifier::train(out.flat, train_set, valid_set);

    if (cfg.training.hierarchical) {
        classifier::ClassifierConfig hc = cfg.training.classifier;
        hc.variant = classifier::Variant::Hierarchical;
        hc.seed = seeds.hierarchical;
        out.hierarchical.emplace(hc, dims);
        out.hierarchical_report = classifier::train(*out.hierarchical, train_set, valid_set);
    }
    if (cfg.training.shuffled_control) {
        TraceClassifier control(flat_cfg, dims);
        classifier::train(control, classifier::shuffle_labels(train_set, seeds.control),
                          classifier::shuffle_labels(valid_set, seeds.control + 1));
        out.control_accuracy = control.accuracy(valid_set.traces);
    }
    return out;
}

struct AttributionOutcome {
    attribution::SafetyScoreTable table;
    attribution::ExpertRanking local;
    attribution::ExpertRanking global;
    attribution::ExpertRanking layer;
};

inline AttributionOutcome rank_all(attribution::SafetyScoreTable table) {
    AttributionOutcome out;
    out.local = attribution::rank(table, attribution::Scope::Local);
    out.global = attribution::rank(table, attribution::Scope::Global);
    out.layer = attribution::rank(table, attribution::Scope::Layer);
    out.table = std::move(table);
    return out;
}

inline AttributionOutcome attribute(const RunConfig& cfg, const TraceClassifier& clf,
                                    const traces::TraceCorpus& corpus) {
    return rank_all(attribution::aggregate_corpus(clf, corpus, cfg.attribution_prompts));
}

/// Held-out prompts for attacks and trajectories, plus the utility probe.
struct EvalSet {
    std::vector<traces::TwinPair> pairs;
    silencing::Prompts malicious;
    moe::UtilityProbe probe;
};

inline EvalSet make_eval_set(const RunConfig& cfg, const moe::MoEModel& model) {
    const StageSeeds seeds = stage_seeds(cfg);
    auto pairs = traces::generate_twin_corpus(model.config(), model.plant(), cfg.corpus.eval_pairs,
                                              cfg.corpus.lengths, seeds.eval);
    silencing::Prompts malicious;
    for (const auto& p : pairs) malicious.push_back(p.malicious);
    moe::UtilityProbe probe(model,
                            traces::generate_utility_set(model.config(), model.plant(), cfg.corpus.utility_sequences,
                                                         cfg.corpus.utility_length, seeds.utility),
                            cfg.attack.attack.incoherence_factor);
    return {std::move(pairs), std::move(malicious), std::move(probe)};
}

/// Throws DimensionError unless the table was computed for `model`'s shape.
inline void require_table_matches(const attribution::SafetyScoreTable& table, const moe::MoEModel& model,
                                  const std::string& table_source, const std::string& model_source) {
    const auto& mc = model.config();
    if (table.num_layers != mc.num_layers || table.num_experts != mc.num_experts) {
        throw DimensionError(table_source + " has (L=" + std::to_string(table.num_layers) +
                             ", N=" + std::to_string(table.num_experts) + ") but " + model_source + " has (L=" +
                             std::to_string(mc.num_layers) + ", N=" + std::to_string(mc.num_experts) + ")");
    }
}

inline void require_classifier_matches(const TraceClassifier& clf, const moe::MoEModel& model,
                                       const std::string& clf_source, const std::string& model_source) {
    const auto& d = clf.dims();
    const auto& mc = model.config();
    if (d.num_layers != mc.num_layers || d.num_experts != mc.num_experts || d.top_k != mc.top_k) {
        throw DimensionError(clf_source + " expects (L=" + std::to_string(d.num_layers) + ", N=" +
                             std::to_string(d.num_experts) + ", K=" + std::to_string(d.top_k) + ") but " +
                             model_source + " has (L=" + std::to_string(mc.num_layers) + ", N=" +
                             std::to_string(mc.num_experts) + ", K=" + std::to_string(mc.top_k) + ")");
    }
}

struct AttackOutcome {
    std::vector<silencing::AttackReport> reports;
    /// How the random baseline's mask size was chosen.
    std::string random_count_rule;

    const silencing::AttackReport* find(silencing::Strategy s) const {
        for (const auto& r : reports) {
            if (r.strategy == s) return &r;
        }
        return nullptr;
    }
};

/// Runs the configured strategies. The random baseline silences as many experts
/// as the adaptive run's peak mask when adaptive is part of the plan.
inline AttackOutcome run_attacks(const RunConfig& cfg, const moe::MoEModel& model, const AttributionOutcome& attr,
                                 const EvalSet& eval) {
    require_table_matches(attr.table, model, "score table", "model");
    const silencing::AttackContext ctx{model, eval.malicious, eval.probe, silencing::positive_experts(attr.table)};
    const silencing::AttackConfig& ac = cfg.attack.attack;
    AttackOutcome out;
    std::optional<std::size_t> adaptive_peak;
    for (silencing::Strategy s : cfg.attack.strategies) {
        switch (s) {
        case silencing::Strategy::Adaptive:
            out.reports.push_back(silencing::adaptive_silence(ctx, attr.local, ac));
            adaptive_peak = out.reports.back().peak().mask.size();
            break;
        case silencing::Strategy::OneShot:
            out.reports.push_back(silencing::one_shot_silence(ctx, attr.local, ac.one_shot_fraction));
            break;
        case silencing::Strategy::Global: {
            silencing::AttackConfig gc = ac;
            gc.max_silenced_fraction = cfg.attack.global_max_silenced_fraction;
            out.reports.push_back(silencing::global_silence(ctx, attr.global, gc));
            break;
        }
        case silencing::Strategy::Random:
            break;
        }
    }
    if (std::find(cfg.attack.strategies.begin(), cfg.attack.strategies.end(), silencing::Strategy::Random) !=
        cfg.attack.strategies.end()) {
        const std::uint64_t seed = stage_seeds(cfg).random;
        if (adaptive_peak && *adaptive_peak > 0) {
            out.random_count_rule = "matched to adaptive peak mask";
            out.reports.push_back(silencing::random_silence_count(ctx, *adaptive_peak, seed));
        } else {
            out.random_count_rule = "random_fraction";
            out.reports.push_back(silencing::random_silence(ctx, ac.random_fraction, seed));
        }
    }
    return out;
}

struct TrajectoryRow {
    std::size_t position = 0;
    moe::TokenId malicious_token = 0;
    moe::TokenId benign_token = 0;
    bool divergent = false;
    double malicious_probability = 0.0;
    double benign_probability = 0.0;
};

struct Trajectory {
    std::size_t pair_index = 0;
    std::size_t first_divergence = 0;
    std::vector<TrajectoryRow> rows;
};

inline std::size_t pick_trajectory_pair(const RunConfig& cfg, const std::vector<traces::TwinPair>& pairs) {
    if (cfg.trajectory_pair) {
        if (*cfg.trajectory_pair >= pairs.size()) {
            throw PreconditionError("trajectory: pair index outside the eval set");
        }
        return *cfg.trajectory_pair;
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].divergence_positions.size() == 1) return i;
    }
    throw PreconditionError("trajectory: no eval pair diverges at exactly one position");
}

/// Per-token refusal probability of both members of one eval twin pair.
inline Trajectory trajectory(const RunConfig& cfg, const TraceClassifier& clf, const moe::MoEModel& model,
                             const EvalSet& eval) {
    require_classifier_matches(clf, model, "classifier", "model");
    Trajectory out;
    out.pair_index = pick_trajectory_pair(cfg, eval.pairs);
    const traces::TwinPair& pair = eval.pairs[out.pair_index];
    out.first_divergence = pair.first_divergence();
    const auto pm = clf.trajectory(model.route(pair.malicious));
    const auto pb = clf.trajectory(model.route(pair.benign));
    for (std::size_t t = 0; t < pair.malicious.size(); ++t) {
        const bool divergent = std::find(pair.divergence_positions.begin(), pair.divergence_positions.end(), t) !=
                               pair.divergence_positions.end();
        out.rows.push_back({t, pair.malicious[t], pair.benign[t], divergent, pm[t], pb[t]});
    }
    return out;
}

} // namespace silencer::pipeline
