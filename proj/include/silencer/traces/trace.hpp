#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/moe/config.hpp"

namespace silencer::traces {

using moe::TokenId;

/// Class label of a prompt: 1 marks the refusal-bound (malicious) split.
enum class Label : std::uint8_t { Benign = 0, Malicious = 1 };

/// Routing decisions for one prompt: for each token t and layer l, the top-K
/// selected expert indices (sorted by descending gate probability) and,
/// optionally, their gate probabilities.
struct RoutingTrace {
    std::uint32_t prompt_id = 0;
    /// Twin-pair identifier; traces sharing it are kept in the same split.
    std::uint32_t pair_id = 0;
    Label label = Label::Benign;
    std::vector<TokenId> tokens;
    std::size_t num_layers = 0;
    std::size_t top_k = 0;
    std::vector<std::uint16_t> selections;
    /// Empty when not recorded.
    std::vector<double> gates;

    std::size_t length() const { return tokens.size(); }
    bool has_gates() const { return !gates.empty(); }

    std::size_t index(std::size_t t, std::size_t l, std::size_t k) const { return (t * num_layers + l) * top_k + k; }
    std::size_t expert(std::size_t t, std::size_t l, std::size_t k) const { return selections[index(t, l, k)]; }
    double gate(std::size_t t, std::size_t l, std::size_t k) const { return gates[index(t, l, k)]; }

    /// Check internal consistency and bounds against (L, N, K, vocab).
    void validate(std::size_t L, std::size_t N, std::size_t K, std::size_t vocab) const {
        const std::string who = "trace " + std::to_string(prompt_id);
        if (num_layers != L || top_k != K) {
            throw DimensionError(who + ": expected (L, K) = (" + std::to_string(L) + ", " + std::to_string(K) +
                                 "), found (" + std::to_string(num_layers) + ", " + std::to_string(top_k) + ")");
        }
        if (selections.size() != tokens.size() * L * K) {
            throw DimensionError(who + ": selection count does not equal T*L*K");
        }
        if (!gates.empty() && gates.size() != selections.size()) {
            throw DimensionError(who + ": gate count does not equal selection count");
        }
        for (TokenId tok : tokens) {
            if (tok >= vocab) {
                throw DimensionError(who + ": token " + std::to_string(tok) + " outside vocabulary of " +
                                     std::to_string(vocab));
            }
        }
        for (std::uint16_t s : selections) {
            if (s >= N) {
                throw DimensionError(who + ": expert index " + std::to_string(s) + " outside [0, " +
                                     std::to_string(N) + ")");
            }
        }
        for (double g : gates) {
            // stored as float32; extremely small gate probabilities may underflow to 0
            if (!(g >= 0.0 && g <= 1.0)) {
                throw DimensionError(who + ": gate probability outside [0, 1]");
            }
        }
    }

    friend bool operator==(const RoutingTrace&, const RoutingTrace&) = default;
};

struct CorpusHeader {
    std::string model_id;
    std::size_t num_layers = 0;
    std::size_t num_experts = 0;
    std::size_t top_k = 0;
    std::size_t vocab_size = 0;
    /// Free-form creation metadata (config hash, seed, tool version, ...).
    std::map<std::string, std::string> metadata;

    friend bool operator==(const CorpusHeader&, const CorpusHeader&) = default;
};

inline CorpusHeader header_for(const moe::MoEConfig& cfg, std::string model_id) {
    CorpusHeader h;
    h.model_id = std::move(model_id);
    h.num_layers = cfg.num_layers;
    h.num_experts = cfg.num_experts;
    h.top_k = cfg.top_k;
    h.vocab_size = cfg.vocab_size;
    return h;
}

struct TraceCorpus {
    CorpusHeader header;
    std::vector<RoutingTrace> traces;

    std::size_t count(Label label) const {
        std::size_t n = 0;
        for (const RoutingTrace& t : traces) {
            n += t.label == label ? 1 : 0;
        }
        return n;
    }

    bool balanced() const { return count(Label::Malicious) == count(Label::Benign); }

    void validate() const {
        for (const RoutingTrace& t : traces) {
            t.validate(header.num_layers, header.num_experts, header.top_k, header.vocab_size);
        }
    }

    /// Throw DimensionError unless the corpus matches the expected (L, N, K).
    void require_dims(std::size_t L, std::size_t N, std::size_t K, const std::string& context) const {
        if (header.num_layers != L || header.num_experts != N || header.top_k != K) {
            throw DimensionError(context + ": corpus has (L, N, K) = (" + std::to_string(header.num_layers) + ", " +
                                 std::to_string(header.num_experts) + ", " + std::to_string(header.top_k) +
                                 "), expected (" + std::to_string(L) + ", " + std::to_string(N) + ", " +
                                 std::to_string(K) + ")");
        }
    }

    friend bool operator==(const TraceCorpus&, const TraceCorpus&) = default;
};

} // namespace silencer::traces
