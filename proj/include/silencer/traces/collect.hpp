#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/moe/model.hpp"
#include "silencer/numerics/rng.hpp"
#include "silencer/traces/trace.hpp"
#include "silencer/traces/twin.hpp"

namespace silencer::traces {

/// One labeled trace per prompt; labels come from pair membership. Pair i yields
/// prompt ids 2i (malicious) and 2i+1 (benign), both with pair_id i.
inline TraceCorpus collect_traces(const moe::MoEModel& model, const std::vector<TwinPair>& pairs) {
    TraceCorpus corpus;
    corpus.header = header_for(model.config(), model.model_id());
    corpus.traces.reserve(2 * pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto pair_id = static_cast<std::uint32_t>(i);
        RoutingTrace mal = model.route(pairs[i].malicious);
        mal.prompt_id = 2 * pair_id;
        mal.pair_id = pair_id;
        mal.label = Label::Malicious;
        RoutingTrace ben = model.route(pairs[i].benign);
        ben.prompt_id = 2 * pair_id + 1;
        ben.pair_id = pair_id;
        ben.label = Label::Benign;
        corpus.traces.push_back(std::move(mal));
        corpus.traces.push_back(std::move(ben));
    }
    return corpus;
}

/// Class-balanced split into (train, valid). Traces sharing a pair_id stay
/// together; traces without a twin are split per class so both halves balance.
inline std::pair<TraceCorpus, TraceCorpus> split(const TraceCorpus& corpus, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw PreconditionError("split: fraction must lie strictly between 0 and 1");
    }
    // groups of trace indices by pair id, in first-appearance order
    std::map<std::uint32_t, std::size_t> group_of;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < corpus.traces.size(); ++i) {
        const auto [it, fresh] = group_of.try_emplace(corpus.traces[i].pair_id, members.size());
        if (fresh) {
            members.push_back({i});
        } else {
            members[it->second].push_back(i);
        }
    }
    std::vector<std::size_t> twins;
    std::vector<std::size_t> lone_mal;
    std::vector<std::size_t> lone_ben;
    for (std::size_t g = 0; g < members.size(); ++g) {
        const auto& m = members[g];
        const bool twin = m.size() == 2 && corpus.traces[m[0]].label != corpus.traces[m[1]].label;
        if (twin) {
            twins.push_back(g);
            continue;
        }
        for (std::size_t idx : m) {
            (corpus.traces[idx].label == Label::Malicious ? lone_mal : lone_ben).push_back(idx);
        }
    }
    if (lone_mal.size() != lone_ben.size()) {
        throw PreconditionError("split: corpus is not class-balanced");
    }
    numerics::Rng rng(seed);
    rng.shuffle(twins);
    rng.shuffle(lone_mal);
    rng.shuffle(lone_ben);

    const auto train_count = [fraction](std::size_t n) {
        return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    };
    const std::size_t train_twins = train_count(twins.size());
    const std::size_t train_lone = train_count(lone_mal.size());

    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> valid_idx;
    for (std::size_t i = 0; i < twins.size(); ++i) {
        auto& dst = i < train_twins ? train_idx : valid_idx;
        dst.insert(dst.end(), members[twins[i]].begin(), members[twins[i]].end());
    }
    for (std::size_t i = 0; i < lone_mal.size(); ++i) {
        auto& dst = i < train_lone ? train_idx : valid_idx;
        dst.push_back(lone_mal[i]);
        dst.push_back(lone_ben[i]);
    }
    if (train_idx.empty() || valid_idx.empty()) {
        throw PreconditionError("split: corpus too small to produce two balanced, nonempty splits");
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(valid_idx.begin(), valid_idx.end());
    TraceCorpus train{corpus.header, {}};
    TraceCorpus valid{corpus.header, {}};
    for (std::size_t i : train_idx) train.traces.push_back(corpus.traces[i]);
    for (std::size_t i : valid_idx) valid.traces.push_back(corpus.traces[i]);
    return {std::move(train), std::move(valid)};
}

enum class TokenPosition { First, Last };

/// Expert selection counts, indexed l * N + e, over traces of `label` at the first
/// or last token.
inline std::vector<double> expert_histogram(const TraceCorpus& corpus, Label label, TokenPosition where) {
    const std::size_t L = corpus.header.num_layers;
    const std::size_t N = corpus.header.num_experts;
    const std::size_t K = corpus.header.top_k;
    std::vector<double> counts(L * N, 0.0);
    for (const RoutingTrace& tr : corpus.traces) {
        if (tr.label != label || tr.length() == 0) {
            continue;
        }
        const std::size_t t = where == TokenPosition::First ? 0 : tr.length() - 1;
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t k = 0; k < K; ++k) {
                counts[l * N + tr.expert(t, l, k)] += 1.0;
            }
        }
    }
    return counts;
}

/// L1 distance between malicious and benign expert histograms at one position.
inline double routing_divergence(const TraceCorpus& corpus, TokenPosition where) {
    const auto mal = expert_histogram(corpus, Label::Malicious, where);
    const auto ben = expert_histogram(corpus, Label::Benign, where);
    double d = 0.0;
    for (std::size_t i = 0; i < mal.size(); ++i) {
        d += std::abs(mal[i] - ben[i]);
    }
    return d;
}

} // namespace silencer::traces
