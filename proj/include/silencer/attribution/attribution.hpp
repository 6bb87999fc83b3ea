#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "silencer/classifier/classifier.hpp"
#include "silencer/error.hpp"
#include "silencer/moe/config.hpp"
#include "silencer/numerics/exact_sum.hpp"
#include "silencer/traces/trace.hpp"

namespace silencer::attribution {

using classifier::TraceClassifier;
using traces::RoutingTrace;

/// Gradient x input attribution of one prompt.
struct PromptAttribution {
    std::uint32_t prompt_id = 0;
    double logit = 0.0;
    /// s_{t,l,k} per selection occurrence, order (t, l, k).
    std::vector<double> occurrence;
    /// S_{l,e} summed over occurrences, indexed l * N + e.
    std::vector<double> scores;
};

inline void require_finite_params(const TraceClassifier& clf) {
    for (const numerics::Tensor* t : clf.params().tensors()) {
        for (double v : t->data()) {
            if (!std::isfinite(v)) {
                throw NumericalError("attribution: classifier has non-finite parameters");
            }
        }
    }
}

/// Scores every selected-expert occurrence by <dz/dv, v>, where z is the raw
/// refusal logit and v the occurrence's embedding, then sums per (layer, expert).
inline PromptAttribution attribute_prompt(const TraceClassifier& clf, const RoutingTrace& trace) {
    require_finite_params(clf);
    if (trace.length() == 0) {
        throw PreconditionError("attribution: empty trace " + std::to_string(trace.prompt_id));
    }
    const auto& dims = clf.dims();
    const std::size_t d = clf.config().embed_dim;
    numerics::Tape tape;
    const numerics::Var x = tape.leaf(clf.featurize(trace));
    const classifier::ForwardGraph g = clf.forward_features(tape, x, trace.length());
    const numerics::Gradients grads = tape.backward(g.logits);
    const numerics::Tensor gx = grads[x];
    const numerics::Tensor& xv = tape.value(x);

    PromptAttribution out;
    out.prompt_id = trace.prompt_id;
    out.logit = tape.value(g.logits)[0];
    out.occurrence.assign(trace.selections.size(), 0.0);
    out.scores.assign(dims.num_layers * dims.num_experts, 0.0);
    for (std::size_t t = 0; t < trace.length(); ++t) {
        for (std::size_t l = 0; l < dims.num_layers; ++l) {
            for (std::size_t k = 0; k < dims.top_k; ++k) {
                const std::size_t col = (l * dims.top_k + k) * d;
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    s += gx.at(t, col + j) * xv.at(t, col + j);
                }
                out.occurrence[trace.index(t, l, k)] = s;
                out.scores[l * dims.num_experts + trace.expert(t, l, k)] += s;
            }
        }
    }
    return out;
}

enum class PromptFilter { MaliciousOnly, All };

inline std::string to_string(PromptFilter f) { return f == PromptFilter::All ? "all" : "malicious"; }

inline PromptFilter prompt_filter_from_string(const std::string& s) {
    if (s == "malicious") return PromptFilter::MaliciousOnly;
    if (s == "all") return PromptFilter::All;
    throw ConfigError("unknown prompt filter '" + s + "'");
}

/// Corpus-level safety scores, one entry per local expert.
struct SafetyScoreTable {
    std::size_t num_layers = 0;
    std::size_t num_experts = 0;
    std::vector<double> scores;
    std::size_t n_prompts = 0;
    /// Per-prompt scores, kept only when requested.
    std::vector<PromptAttribution> breakdown;

    double at(std::size_t layer, std::size_t expert) const { return scores.at(layer * num_experts + expert); }

    /// Local experts with a positive score.
    std::size_t safety_expert_count() const {
        return static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [](double s) { return s > 0.0; }));
    }

    double total() const {
        double s = 0.0;
        for (double v : scores) s += v;
        return s;
    }
};

/// Sum of prompt scores over the filtered corpus. Sums are correctly rounded, so
/// the table does not depend on corpus order.
inline SafetyScoreTable aggregate_corpus(const TraceClassifier& clf, const traces::TraceCorpus& corpus,
                                         PromptFilter filter = PromptFilter::MaliciousOnly,
                                         bool keep_breakdown = false) {
    const auto& dims = clf.dims();
    corpus.require_dims(dims.num_layers, dims.num_experts, dims.top_k, "attribution corpus");
    SafetyScoreTable table;
    table.num_layers = dims.num_layers;
    table.num_experts = dims.num_experts;
    std::vector<numerics::ExactSum> sums(dims.num_layers * dims.num_experts);
    for (const RoutingTrace& tr : corpus.traces) {
        if (filter == PromptFilter::MaliciousOnly && tr.label != traces::Label::Malicious) {
            continue;
        }
        PromptAttribution a = attribute_prompt(clf, tr);
        for (std::size_t i = 0; i < a.scores.size(); ++i) {
            sums[i].add(a.scores[i]);
        }
        ++table.n_prompts;
        if (keep_breakdown) {
            table.breakdown.push_back(std::move(a));
        }
    }
    if (table.n_prompts == 0) {
        throw PreconditionError("attribution: no prompts left after the " + to_string(filter) + " filter");
    }
    for (const auto& s : sums) {
        table.scores.push_back(s.value());
    }
    return table;
}

enum class Scope { Local, Global, Layer };

inline std::string to_string(Scope s) {
    switch (s) {
    case Scope::Local: return "local";
    case Scope::Global: return "global";
    case Scope::Layer: return "layer";
    }
    return "?";
}

/// Marks the aggregated-over coordinate in GLOBAL and LAYER entries.
inline constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();

struct RankEntry {
    std::size_t layer = 0;
    std::size_t expert = 0;
    double score = 0.0;

    friend bool operator==(const RankEntry&, const RankEntry&) = default;
};

struct ExpertRanking {
    Scope scope = Scope::Local;
    std::vector<RankEntry> entries;

    /// First `m` entries as local experts (LOCAL scope only).
    std::vector<moe::LocalExpert> top_local(std::size_t m) const {
        if (scope != Scope::Local) {
            throw PreconditionError("top_local needs a local ranking");
        }
        std::vector<moe::LocalExpert> out;
        for (std::size_t i = 0; i < std::min(m, entries.size()); ++i) {
            out.push_back({entries[i].layer, entries[i].expert});
        }
        return out;
    }
};

/// Sorted descending by score; ties broken by (layer, expert) ascending.
inline ExpertRanking rank(const SafetyScoreTable& table, Scope scope) {
    const std::size_t L = table.num_layers;
    const std::size_t N = table.num_experts;
    ExpertRanking r;
    r.scope = scope;
    switch (scope) {
    case Scope::Local:
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t e = 0; e < N; ++e) r.entries.push_back({l, e, table.at(l, e)});
        break;
    case Scope::Global:
        for (std::size_t e = 0; e < N; ++e) {
            double s = 0.0;
            for (std::size_t l = 0; l < L; ++l) s += table.at(l, e);
            r.entries.push_back({kAll, e, s});
        }
        break;
    case Scope::Layer:
        for (std::size_t l = 0; l < L; ++l) {
            double s = 0.0;
            for (std::size_t e = 0; e < N; ++e) s += table.at(l, e);
            r.entries.push_back({l, kAll, s});
        }
        break;
    }
    std::stable_sort(r.entries.begin(), r.entries.end(), [](const RankEntry& a, const RankEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.expert < b.expert;
    });
    return r;
}

/// Local ranking built from a known expert list, in the given order, followed by
/// every other local expert in (layer, expert) order. Used for oracle runs.
inline ExpertRanking oracle_ranking(const std::vector<moe::LocalExpert>& first, std::size_t L, std::size_t N) {
    ExpertRanking r;
    const double top = static_cast<double>(first.size());
    for (std::size_t i = 0; i < first.size(); ++i) {
        r.entries.push_back({first[i].layer, first[i].expert, top - static_cast<double>(i)});
    }
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t e = 0; e < N; ++e) {
            if (std::find(first.begin(), first.end(), moe::LocalExpert{l, e}) == first.end()) {
                r.entries.push_back({l, e, 0.0});
            }
        }
    }
    return r;
}

/// Same entries, worst first.
inline ExpertRanking reversed(ExpertRanking r) {
    std::reverse(r.entries.begin(), r.entries.end());
    return r;
}

/// Fraction of the first `m` LOCAL entries that belong to `truth`.
inline double precision_at(const ExpertRanking& ranking, const std::vector<moe::LocalExpert>& truth, std::size_t m) {
    if (m == 0) {
        throw PreconditionError("precision_at: m must be positive");
    }
    std::size_t hits = 0;
    for (const moe::LocalExpert& e : ranking.top_local(m)) {
        hits += std::find(truth.begin(), truth.end(), e) != truth.end() ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(m);
}

} // namespace silencer::attribution
