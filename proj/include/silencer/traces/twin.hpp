#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/moe/config.hpp"
#include "silencer/numerics/rng.hpp"

namespace silencer::traces {

using moe::TokenId;

/// A malicious prompt and its benign counterpart; they differ exactly at
/// `divergence_positions`, where the malicious member carries trigger tokens.
struct TwinPair {
    std::vector<TokenId> malicious;
    std::vector<TokenId> benign;
    std::vector<std::size_t> divergence_positions;

    std::size_t first_divergence() const {
        return *std::min_element(divergence_positions.begin(), divergence_positions.end());
    }

    friend bool operator==(const TwinPair&, const TwinPair&) = default;
};

/// First-order Markov chain over the non-trigger tokens. It is the toy model's
/// "language": benign templates and the perplexity utility set are drawn from it.
class BenignLanguage {
public:
    BenignLanguage(const moe::MoEConfig& cfg, const moe::PlantSpec& plant) : vocab_(cfg.vocab_size) {
        for (TokenId t = 0; t < cfg.vocab_size; ++t) {
            if (!plant.is_trigger(t)) {
                benign_.push_back(t);
            }
        }
        if (benign_.size() < 2) {
            throw PreconditionError("vocabulary too small to build benign templates without trigger tokens");
        }
        numerics::Rng rng(cfg.seed ^ 0x6c616e6775616765ULL);
        transition_.assign(vocab_ * vocab_, 0.0);
        const std::size_t n = benign_.size();
        const std::size_t favoured = std::min<std::size_t>(4, n);
        for (TokenId from = 0; from < vocab_; ++from) {
            double* row = &transition_[from * vocab_];
            for (TokenId to : benign_) {
                row[to] = kSmoothing / static_cast<double>(n);
            }
            if (plant.is_trigger(from)) {
                for (TokenId to : benign_) {
                    row[to] = 1.0 / static_cast<double>(n);
                }
                continue;
            }
            std::vector<double> w(favoured);
            double total = 0.0;
            for (double& v : w) {
                v = 0.2 + rng.uniform();
                total += v;
            }
            for (std::size_t j = 0; j < favoured; ++j) {
                row[benign_[rng.index(n)]] += (1.0 - kSmoothing) * w[j] / total;
            }
        }
    }

    const std::vector<TokenId>& tokens() const { return benign_; }
    std::size_t vocab_size() const { return vocab_; }

    double probability(TokenId from, TokenId to) const { return transition_[from * vocab_ + to]; }

    std::vector<TokenId> sample(std::size_t length, numerics::Rng& rng) const {
        std::vector<TokenId> seq;
        seq.reserve(length);
        seq.push_back(benign_[rng.index(benign_.size())]);
        while (seq.size() < length) {
            const double* row = &transition_[seq.back() * vocab_];
            double u = rng.uniform();
            TokenId next = benign_.back();
            for (TokenId to : benign_) {
                u -= row[to];
                if (u < 0.0) {
                    next = to;
                    break;
                }
            }
            seq.push_back(next);
        }
        return seq;
    }

private:
    static constexpr double kSmoothing = 0.1;

    std::size_t vocab_;
    std::vector<TokenId> benign_;
    std::vector<double> transition_;
};

struct LengthRange {
    std::size_t min = 6;
    std::size_t max = 16;
};

/// Twin corpus: each pair shares a benign template; the malicious member replaces
/// 1-2 random non-initial positions with trigger tokens. Deterministic given seed.
inline std::vector<TwinPair> generate_twin_corpus(const moe::MoEConfig& cfg, const moe::PlantSpec& plant,
                                                  std::size_t n_pairs, LengthRange lengths, std::uint64_t seed) {
    if (n_pairs < 1) {
        throw PreconditionError("generate_twin_corpus: n_pairs must be at least 1");
    }
    if (lengths.min < 4 || lengths.max > 64 || lengths.min > lengths.max) {
        throw PreconditionError("generate_twin_corpus: length range must lie within [4, 64]");
    }
    plant.validate(cfg);
    const BenignLanguage language(cfg, plant);
    numerics::Rng rng(seed);
    std::vector<TwinPair> pairs;
    pairs.reserve(n_pairs);
    for (std::size_t p = 0; p < n_pairs; ++p) {
        const std::size_t len = lengths.min + rng.index(lengths.max - lengths.min + 1);
        TwinPair pair;
        pair.benign = language.sample(len, rng);
        pair.malicious = pair.benign;
        const std::size_t substitutions = 1 + rng.index(2);
        while (pair.divergence_positions.size() < substitutions) {
            const std::size_t pos = 1 + rng.index(len - 1);
            if (std::find(pair.divergence_positions.begin(), pair.divergence_positions.end(), pos) ==
                pair.divergence_positions.end()) {
                pair.divergence_positions.push_back(pos);
            }
        }
        std::sort(pair.divergence_positions.begin(), pair.divergence_positions.end());
        for (std::size_t pos : pair.divergence_positions) {
            pair.malicious[pos] = plant.trigger_tokens[rng.index(plant.trigger_tokens.size())];
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

/// Benign sequences for perplexity measurement, drawn from the same language.
inline std::vector<std::vector<TokenId>> generate_utility_set(const moe::MoEConfig& cfg, const moe::PlantSpec& plant,
                                                              std::size_t count, std::size_t length,
                                                              std::uint64_t seed) {
    if (count == 0 || length < 2) {
        throw PreconditionError("generate_utility_set: need count >= 1 and length >= 2");
    }
    const BenignLanguage language(cfg, plant);
    numerics::Rng rng(seed);
    std::vector<std::vector<TokenId>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(language.sample(length, rng));
    }
    return out;
}

} // namespace silencer::traces
