#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/numerics/rng.hpp"

namespace silencer::moe {

using TokenId = std::uint32_t;

struct MoEConfig {
    std::size_t vocab_size = 64;
    std::size_t embed_dim = 32;
    std::size_t num_layers = 6;
    std::size_t num_experts = 8;
    std::size_t top_k = 2;
    std::size_t expert_hidden_dim = 64;
    std::uint64_t seed = 0;

    std::size_t local_expert_count() const { return num_layers * num_experts; }

    void validate() const {
        if (top_k < 1 || top_k >= num_experts) {
            throw PreconditionError("MoEConfig: need 1 <= top_k < num_experts");
        }
        if (num_layers < 2) {
            throw PreconditionError("MoEConfig: need at least 2 layers");
        }
        if (vocab_size < 8) {
            throw PreconditionError("MoEConfig: vocab_size must be at least 8");
        }
        if (embed_dim < 4) {
            throw PreconditionError("MoEConfig: embed_dim must be at least 4 (two channels are reserved)");
        }
        if (expert_hidden_dim < 1) {
            throw PreconditionError("MoEConfig: expert_hidden_dim must be positive");
        }
        if (num_experts > 65535) {
            throw PreconditionError("MoEConfig: expert indices must fit in 16 bits");
        }
    }

    friend bool operator==(const MoEConfig&, const MoEConfig&) = default;
};

/// A (layer, expert-index) pair.
struct LocalExpert {
    std::size_t layer = 0;
    std::size_t expert = 0;

    friend auto operator<=>(const LocalExpert&, const LocalExpert&) = default;
};

inline std::string to_string(const LocalExpert& e) {
    return "(" + std::to_string(e.layer) + ", " + std::to_string(e.expert) + ")";
}

/// Ground-truth safety circuit installed into the toy model.
struct PlantSpec {
    std::vector<TokenId> trigger_tokens;
    std::vector<LocalExpert> safety_experts;
    double steer_strength = 1.0;

    void validate(const MoEConfig& cfg) const {
        if (trigger_tokens.empty()) {
            throw PreconditionError("PlantSpec: trigger token set is empty");
        }
        if (safety_experts.empty()) {
            throw PreconditionError("PlantSpec: no safety experts");
        }
        for (TokenId t : trigger_tokens) {
            if (t >= cfg.vocab_size) {
                throw PreconditionError("PlantSpec: trigger token " + std::to_string(t) + " outside vocabulary");
            }
        }
        for (const LocalExpert& e : safety_experts) {
            if (e.layer >= cfg.num_layers || e.expert >= cfg.num_experts) {
                throw PreconditionError("PlantSpec: safety expert " + to_string(e) + " outside (L, N) bounds");
            }
        }
        if (std::set<TokenId>(trigger_tokens.begin(), trigger_tokens.end()).size() + 2 > cfg.vocab_size) {
            throw PreconditionError("PlantSpec: trigger set leaves too few benign tokens");
        }
    }

    bool is_trigger(TokenId t) const {
        return std::find(trigger_tokens.begin(), trigger_tokens.end(), t) != trigger_tokens.end();
    }

    friend bool operator==(const PlantSpec&, const PlantSpec&) = default;
};

enum class PlantLayout {
    /// Every planted expert sits in a different layer and has a different expert index.
    DistinctIndices,
    /// All planted experts share one expert index, spread over different layers.
    SharedIndex,
};

/// Seeded plant: `num_triggers` trigger tokens and `num_experts` planted experts in
/// distinct layers.
inline PlantSpec make_plant(const MoEConfig& cfg, std::size_t num_experts, std::size_t num_triggers,
                            std::uint64_t seed, PlantLayout layout = PlantLayout::DistinctIndices,
                            double steer_strength = 1.0) {
    cfg.validate();
    if (num_experts == 0 || num_experts > cfg.num_layers) {
        throw PreconditionError("make_plant: need 1 <= planted experts <= num_layers");
    }
    if (layout == PlantLayout::DistinctIndices && num_experts > cfg.num_experts) {
        throw PreconditionError("make_plant: more planted experts than expert indices");
    }
    if (num_triggers == 0 || num_triggers + 2 > cfg.vocab_size) {
        throw PreconditionError("make_plant: invalid trigger count");
    }
    numerics::Rng rng(seed ^ 0x706c616e74ULL);
    std::vector<std::size_t> layers(cfg.num_layers);
    std::vector<std::size_t> experts(cfg.num_experts);
    std::vector<TokenId> tokens(cfg.vocab_size);
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i] = i;
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i] = i;
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<TokenId>(i);
    rng.shuffle(layers);
    rng.shuffle(experts);
    rng.shuffle(tokens);

    PlantSpec plant;
    plant.steer_strength = steer_strength;
    plant.trigger_tokens.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(num_triggers));
    std::sort(plant.trigger_tokens.begin(), plant.trigger_tokens.end());
    for (std::size_t i = 0; i < num_experts; ++i) {
        const std::size_t e = layout == PlantLayout::SharedIndex ? experts[0] : experts[i];
        plant.safety_experts.push_back({layers[i], e});
    }
    std::sort(plant.safety_experts.begin(), plant.safety_experts.end());
    return plant;
}

enum class MaskScope { Local, Global };

/// Set of silenced (layer, expert) pairs.
class SilencingMask {
public:
    SilencingMask() = default;

    /// Local-scope mask over explicit pairs.
    static SilencingMask local(std::vector<LocalExpert> entries) {
        SilencingMask m;
        m.entries_.insert(entries.begin(), entries.end());
        return m;
    }

    /// Global-scope mask: each expert index is silenced at every layer.
    static SilencingMask global(const std::vector<std::size_t>& expert_indices, std::size_t num_layers) {
        SilencingMask m;
        m.scope_ = MaskScope::Global;
        for (std::size_t e : expert_indices) {
            for (std::size_t l = 0; l < num_layers; ++l) {
                m.entries_.insert({l, e});
            }
        }
        return m;
    }

    void add(LocalExpert e) { entries_.insert(e); }

    bool contains(std::size_t layer, std::size_t expert) const { return entries_.count({layer, expert}) != 0; }
    bool contains(LocalExpert e) const { return entries_.count(e) != 0; }
    bool empty() const { return entries_.empty(); }
    std::size_t size() const { return entries_.size(); }
    MaskScope scope() const { return scope_; }
    const std::set<LocalExpert>& entries() const { return entries_; }

    std::size_t masked_in_layer(std::size_t layer) const {
        return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(),
                                                      [layer](const LocalExpert& e) { return e.layer == layer; }));
    }

    bool is_subset_of(const SilencingMask& other) const {
        return std::includes(other.entries_.begin(), other.entries_.end(), entries_.begin(), entries_.end());
    }

    /// Throws when an entry is out of bounds or a layer would be fully silenced.
    void validate(const MoEConfig& cfg) const {
        for (const LocalExpert& e : entries_) {
            if (e.layer >= cfg.num_layers || e.expert >= cfg.num_experts) {
                throw DimensionError("mask entry " + to_string(e) + " outside (L, N) = (" +
                                     std::to_string(cfg.num_layers) + ", " + std::to_string(cfg.num_experts) + ")");
            }
        }
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            if (masked_in_layer(l) >= cfg.num_experts) {
                throw PreconditionError("mask silences every expert of layer " + std::to_string(l));
            }
        }
    }

    friend bool operator==(const SilencingMask&, const SilencingMask&) = default;

private:
    std::set<LocalExpert> entries_;
    MaskScope scope_ = MaskScope::Local;
};

} // namespace silencer::moe
