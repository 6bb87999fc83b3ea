#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/moe/config.hpp"
#include "silencer/numerics/rng.hpp"
#include "silencer/numerics/tensor.hpp"
#include "silencer/traces/trace.hpp"
#include "silencer/traces/twin.hpp"

namespace silencer::moe {

using numerics::Tensor;

/// Construction knobs for the planted toy model. The defaults are what the
/// pipeline and the tests use.
struct BuildParams {
    /// Weight of the causal mean-pooled prefix added to each token embedding.
    double mix_weight = 1.0;
    double router_scale = 1.0;
    /// Router weight on the trigger channel for planted experts.
    double plant_router_gain = 200.0;
    /// Negative router bias of planted experts; keeps them idle without a trigger.
    double plant_router_penalty = 8.0;
    double expert_scale = 1.0;
    double refuse_gain = 40.0;
    /// Refusal-channel level at which the REFUSE logit reaches zero.
    double refuse_threshold = 1.0;
    double lm_ridge = 1e-3;
    std::size_t lm_fit_sequences = 256;
    std::size_t lm_fit_length = 16;
    std::size_t contract_pairs = 200;
    double contract_accuracy = 0.95;
    std::size_t max_attempts = 5;
    double steer_growth = 1.5;

    friend bool operator==(const BuildParams&, const BuildParams&) = default;
};

/// All parameters of the toy model. Shared immutably between masked views.
struct ModelWeights {
    MoEConfig config;
    PlantSpec plant;
    BuildParams params;
    Tensor token_embedding;           // V x D
    std::vector<Tensor> router_weight; // per layer, D x N
    std::vector<Tensor> router_bias;   // per layer, 1 x N
    std::vector<Tensor> expert_w_in;   // per (layer, expert), D x H
    std::vector<Tensor> expert_b_in;   // 1 x H
    std::vector<Tensor> expert_w_out;  // H x D
    std::vector<Tensor> expert_b_out;  // 1 x D
    Tensor lm_head;                    // D x V
    Tensor lm_bias;                    // 1 x V

    std::size_t expert_slot(std::size_t layer, std::size_t expert) const {
        return layer * config.num_experts + expert;
    }
    /// Hidden-state channel read by the REFUSE logit.
    std::size_t refusal_channel() const { return config.embed_dim - 1; }
    /// Hidden-state channel carrying trigger-token presence.
    std::size_t trigger_channel() const { return config.embed_dim - 2; }

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

struct ForwardResult {
    /// T x (V + 1); column V is the REFUSE logit.
    Tensor logits;
    /// T x D hidden states after the last layer.
    Tensor hidden;
    std::optional<traces::RoutingTrace> trace;
};

enum class Verdict { Refuse, Comply, Incoherent };

inline const char* to_string(Verdict v) {
    switch (v) {
    case Verdict::Refuse: return "REFUSE";
    case Verdict::Comply: return "COMPLY";
    case Verdict::Incoherent: return "INCOHERENT";
    }
    return "?";
}

/// A toy sparse-MoE model: shared weights plus the active silencing mask.
/// Immutable; apply_mask returns a new view.
class MoEModel {
public:
    explicit MoEModel(std::shared_ptr<const ModelWeights> weights, SilencingMask mask = {})
        : weights_(std::move(weights)), mask_(std::move(mask)) {
        mask_.validate(weights_->config);
    }

    const MoEConfig& config() const { return weights_->config; }
    const PlantSpec& plant() const { return weights_->plant; }
    const ModelWeights& weights() const { return *weights_; }
    std::shared_ptr<const ModelWeights> shared_weights() const { return weights_; }
    const SilencingMask& mask() const { return mask_; }

    std::string model_id() const { return "toy-moe/seed=" + std::to_string(config().seed); }

    /// Same weights, different silencing mask. Throws if a layer would be emptied.
    MoEModel apply_mask(SilencingMask mask) const { return MoEModel(weights_, std::move(mask)); }

    ForwardResult forward(const std::vector<TokenId>& tokens, bool record = false) const;

    /// Routing only (no output head).
    traces::RoutingTrace route(const std::vector<TokenId>& tokens) const { return *forward(tokens, true).trace; }

    /// REFUSE iff the REFUSE logit is the argmax at the final position.
    Verdict behavioral_verdict(const std::vector<TokenId>& tokens) const;

    /// exp of the mean next-token negative log-likelihood over the sequences.
    double perplexity(const std::vector<std::vector<TokenId>>& sequences) const;

private:
    std::shared_ptr<const ModelWeights> weights_;
    SilencingMask mask_;
};

namespace detail {

inline Tensor random_tensor(numerics::Rng& rng, std::size_t r, std::size_t c, double stddev) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) {
        v = rng.normal(0.0, stddev);
    }
    return t;
}

/// Causal mean-pooled prefix mixing: u_t = emb(tok_t) + w * mean_{s<=t} emb(tok_s).
inline Tensor embed_with_prefix(const ModelWeights& w, const std::vector<TokenId>& tokens) {
    const std::size_t D = w.config.embed_dim;
    Tensor h = Tensor::matrix(tokens.size(), D);
    std::vector<double> running(D, 0.0);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto emb = w.token_embedding.row(tokens[t]);
        for (std::size_t j = 0; j < D; ++j) {
            running[j] += emb[j];
            h.at(t, j) = emb[j] + w.params.mix_weight * running[j] / static_cast<double>(t + 1);
        }
    }
    return h;
}

inline void expert_forward(const ModelWeights& w, std::size_t slot, std::span<const double> x, double gate,
                           std::span<double> out) {
    const Tensor& w_in = w.expert_w_in[slot];
    const Tensor& b_in = w.expert_b_in[slot];
    const Tensor& w_out = w.expert_w_out[slot];
    const Tensor& b_out = w.expert_b_out[slot];
    const std::size_t D = w.config.embed_dim;
    const std::size_t H = w.config.expert_hidden_dim;
    std::vector<double> hidden(b_in.values());
    for (std::size_t i = 0; i < D; ++i) {
        const double xi = x[i];
        const double* row = w_in.data().data() + i * H;
        for (std::size_t j = 0; j < H; ++j) {
            hidden[j] += xi * row[j];
        }
    }
    for (std::size_t j = 0; j < D; ++j) {
        out[j] += gate * b_out[j];
    }
    for (std::size_t j = 0; j < H; ++j) {
        const double a = std::max(hidden[j], 0.0) * gate;
        if (a == 0.0) {
            continue;
        }
        const double* row = w_out.data().data() + j * D;
        for (std::size_t i = 0; i < D; ++i) {
            out[i] += a * row[i];
        }
    }
}

} // namespace detail

inline ForwardResult MoEModel::forward(const std::vector<TokenId>& tokens, bool record) const {
    const ModelWeights& w = *weights_;
    const MoEConfig& cfg = w.config;
    if (tokens.empty()) {
        throw PreconditionError("forward: empty token sequence");
    }
    for (TokenId t : tokens) {
        if (t >= cfg.vocab_size) {
            throw PreconditionError("forward: token " + std::to_string(t) + " outside vocabulary");
        }
    }
    const std::size_t T = tokens.size();
    const std::size_t D = cfg.embed_dim;
    const std::size_t N = cfg.num_experts;
    const std::size_t K = cfg.top_k;

    ForwardResult result;
    if (record) {
        traces::RoutingTrace tr;
        tr.tokens = tokens;
        tr.num_layers = cfg.num_layers;
        tr.top_k = K;
        tr.selections.resize(T * cfg.num_layers * K);
        tr.gates.resize(T * cfg.num_layers * K);
        result.trace = std::move(tr);
    }

    Tensor h = detail::embed_with_prefix(w, tokens);
    std::vector<double> logits(N);
    std::vector<std::size_t> order(N);
    std::vector<double> delta(D);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        std::vector<bool> masked(N);
        for (std::size_t e = 0; e < N; ++e) {
            masked[e] = mask_.contains(l, e);
        }
        const Tensor& rw = w.router_weight[l];
        const Tensor& rb = w.router_bias[l];
        for (std::size_t t = 0; t < T; ++t) {
            const auto x = h.row(t);
            for (std::size_t e = 0; e < N; ++e) {
                logits[e] = rb[e];
            }
            for (std::size_t i = 0; i < D; ++i) {
                const double xi = x[i];
                for (std::size_t e = 0; e < N; ++e) {
                    logits[e] += xi * rw.at(i, e);
                }
            }
            const std::vector<double> probs = numerics::masked_softmax(logits, masked);
            order.clear();
            for (std::size_t e = 0; e < N; ++e) {
                if (!masked[e]) {
                    order.push_back(e);
                }
            }
            // descending probability, ties to the lower expert index
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
            // fewer than K survivors: route to all of them
            const std::size_t chosen = std::min(K, order.size());
            std::fill(delta.begin(), delta.end(), 0.0);
            for (std::size_t k = 0; k < chosen; ++k) {
                detail::expert_forward(w, w.expert_slot(l, order[k]), x, probs[order[k]], delta);
            }
            if (record) {
                traces::RoutingTrace& tr = *result.trace;
                for (std::size_t k = 0; k < K; ++k) {
                    const std::size_t src = std::min(k, chosen - 1);
                    tr.selections[tr.index(t, l, k)] = static_cast<std::uint16_t>(order[src]);
                    tr.gates[tr.index(t, l, k)] = probs[order[src]];
                }
            }
            auto row = h.row(t);
            for (std::size_t i = 0; i < D; ++i) {
                row[i] += delta[i];
            }
        }
    }
    h.require_finite("moe forward");

    const std::size_t V = cfg.vocab_size;
    Tensor vocab = numerics::matmul(h, w.lm_head);
    result.logits = Tensor::matrix(T, V + 1);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t v = 0; v < V; ++v) {
            result.logits.at(t, v) = vocab.at(t, v) + w.lm_bias[v];
        }
        result.logits.at(t, V) =
            w.params.refuse_gain * (h.at(t, w.refusal_channel()) - w.params.refuse_threshold);
    }
    result.hidden = std::move(h);
    return result;
}

inline Verdict MoEModel::behavioral_verdict(const std::vector<TokenId>& tokens) const {
    const ForwardResult r = forward(tokens);
    const auto last = r.logits.row(r.logits.rows() - 1);
    const std::size_t V = config().vocab_size;
    const double best_vocab = *std::max_element(last.begin(), last.begin() + static_cast<std::ptrdiff_t>(V));
    return last[V] > best_vocab ? Verdict::Refuse : Verdict::Comply;
}

inline double MoEModel::perplexity(const std::vector<std::vector<TokenId>>& sequences) const {
    const std::size_t V = config().vocab_size;
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) {
            continue;
        }
        const ForwardResult r = forward(seq);
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const auto row = r.logits.row(t);
            const double hi = *std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(V));
            double z = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                z += std::exp(row[v] - hi);
            }
            nll += -(row[seq[t + 1]] - hi - std::log(z));
            ++count;
        }
    }
    if (count == 0) {
        throw PreconditionError("perplexity: no sequence with at least two tokens");
    }
    return std::exp(nll / static_cast<double>(count));
}

/// Fraction of correct behavioral verdicts on a twin corpus.
struct BehaviorReport {
    double malicious_refusal_rate = 0.0;
    double benign_compliance_rate = 0.0;
};

inline BehaviorReport measure_behavior(const MoEModel& model, const std::vector<traces::TwinPair>& pairs) {
    BehaviorReport r;
    for (const traces::TwinPair& p : pairs) {
        r.malicious_refusal_rate += model.behavioral_verdict(p.malicious) == Verdict::Refuse ? 1.0 : 0.0;
        r.benign_compliance_rate += model.behavioral_verdict(p.benign) == Verdict::Comply ? 1.0 : 0.0;
    }
    r.malicious_refusal_rate /= static_cast<double>(pairs.size());
    r.benign_compliance_rate /= static_cast<double>(pairs.size());
    return r;
}

namespace detail {

inline std::shared_ptr<ModelWeights> sample_weights(const MoEConfig& cfg, const PlantSpec& plant,
                                                    const BuildParams& params) {
    auto w = std::make_shared<ModelWeights>();
    w->config = cfg;
    w->plant = plant;
    w->params = params;
    const std::size_t V = cfg.vocab_size;
    const std::size_t D = cfg.embed_dim;
    const std::size_t N = cfg.num_experts;
    const std::size_t H = cfg.expert_hidden_dim;
    const std::size_t L = cfg.num_layers;
    const std::size_t ref = w->refusal_channel();
    const std::size_t trig = w->trigger_channel();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D - 2));
    numerics::Rng rng(cfg.seed);

    w->token_embedding = random_tensor(rng, V, D, inv_sqrt_d);
    for (std::size_t v = 0; v < V; ++v) {
        w->token_embedding.at(v, ref) = 0.0;
        w->token_embedding.at(v, trig) = plant.is_trigger(static_cast<TokenId>(v)) ? 1.0 : 0.0;
    }

    for (std::size_t l = 0; l < L; ++l) {
        Tensor rw = random_tensor(rng, D, N, params.router_scale);
        Tensor rb = Tensor::matrix(1, N);
        for (std::size_t e = 0; e < N; ++e) {
            rw.at(ref, e) = 0.0;
            rw.at(trig, e) = 0.0;
        }
        w->router_weight.push_back(std::move(rw));
        w->router_bias.push_back(std::move(rb));
        for (std::size_t e = 0; e < N; ++e) {
            w->expert_w_in.push_back(random_tensor(rng, D, H, inv_sqrt_d));
            w->expert_b_in.push_back(random_tensor(rng, 1, H, 0.1));
            Tensor w_out = random_tensor(rng, H, D, params.expert_scale / std::sqrt(static_cast<double>(H)));
            for (std::size_t j = 0; j < H; ++j) {
                w_out.at(j, ref) = 0.0;
                w_out.at(j, trig) = 0.0;
            }
            w->expert_w_out.push_back(std::move(w_out));
            w->expert_b_out.push_back(Tensor::matrix(1, D));
        }
    }
    for (const LocalExpert& p : plant.safety_experts) {
        w->router_weight[p.layer].at(trig, p.expert) = params.plant_router_gain;
        w->router_bias[p.layer][p.expert] = -params.plant_router_penalty;
        w->expert_b_out[w->expert_slot(p.layer, p.expert)][ref] = plant.steer_strength;
    }
    w->lm_head = Tensor::matrix(D, V);
    w->lm_bias = Tensor::matrix(1, V);
    return w;
}

/// Ridge-regress the vocabulary head onto centered log transition probabilities
/// of the benign language, using the unmasked model's final hidden states.
inline void fit_language_head(ModelWeights& w) {
    const MoEConfig& cfg = w.config;
    const traces::BenignLanguage language(cfg, w.plant);
    const auto sequences = traces::generate_utility_set(cfg, w.plant, w.params.lm_fit_sequences,
                                                        w.params.lm_fit_length, cfg.seed ^ 0x6c6d666974ULL);
    const std::size_t D = cfg.embed_dim;
    const std::size_t V = cfg.vocab_size;
    const std::size_t F = D + 1;
    Tensor gram = Tensor::matrix(F, F);
    Tensor rhs = Tensor::matrix(F, V);
    std::size_t n = 0;
    const MoEModel model(std::shared_ptr<const ModelWeights>(&w, [](const ModelWeights*) {}));
    std::vector<double> target(V);
    for (const auto& seq : sequences) {
        const Tensor hidden = model.forward(seq).hidden;
        for (std::size_t t = 0; t < seq.size(); ++t) {
            std::vector<double> x(hidden.row(t).begin(), hidden.row(t).end());
            x.push_back(1.0);
            double mean = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                const double p = language.probability(seq[t], static_cast<TokenId>(v));
                target[v] = p > 0.0 ? std::log(p) : std::log(1e-6);
                mean += target[v];
            }
            mean /= static_cast<double>(V);
            for (std::size_t i = 0; i < F; ++i) {
                for (std::size_t j = 0; j < F; ++j) {
                    gram.at(i, j) += x[i] * x[j];
                }
                for (std::size_t v = 0; v < V; ++v) {
                    rhs.at(i, v) += x[i] * (target[v] - mean);
                }
            }
            ++n;
        }
    }
    // reserved channels are identically zero on benign text
    for (std::size_t c : {w.refusal_channel(), w.trigger_channel()}) {
        gram.at(c, c) += 1.0;
    }
    const Tensor solution = numerics::solve_spd(gram, rhs, w.params.lm_ridge * static_cast<double>(n));
    for (std::size_t i = 0; i < D; ++i) {
        for (std::size_t v = 0; v < V; ++v) {
            w.lm_head.at(i, v) = solution.at(i, v);
        }
    }
    for (std::size_t v = 0; v < V; ++v) {
        w.lm_bias[v] = solution.at(D, v);
    }
    for (std::size_t c : {w.refusal_channel(), w.trigger_channel()}) {
        for (std::size_t v = 0; v < V; ++v) {
            w.lm_head.at(c, v) = 0.0;
        }
    }
}

} // namespace detail

/// Build a toy model with a planted safety circuit:
///  - trigger tokens light up a reserved trigger channel; routers of the planted
///    experts read that channel, so trigger-bearing prefixes route to them;
///  - planted experts write `steer_strength` into the refusal channel, which the
///    REFUSE logit reads;
///  - all remaining weights are seeded random, and the vocabulary head is fitted
///    to the benign language.
/// The result must refuse trigger prompts and comply on their twins with at least
/// `params.contract_accuracy`; otherwise the steer strength is scaled and the build
/// retried, failing with ContractError after `params.max_attempts`.
inline MoEModel build_planted_model(const MoEConfig& cfg, const PlantSpec& plant, const BuildParams& params = {}) {
    cfg.validate();
    plant.validate(cfg);
    const auto check_pairs =
        traces::generate_twin_corpus(cfg, plant, params.contract_pairs, {6, 16}, cfg.seed ^ 0x636f6e7472616374ULL);
    PlantSpec attempt = plant;
    BehaviorReport last;
    for (std::size_t i = 0; i < params.max_attempts; ++i) {
        auto w = detail::sample_weights(cfg, attempt, params);
        detail::fit_language_head(*w);
        MoEModel model(std::shared_ptr<const ModelWeights>(std::move(w)));
        last = measure_behavior(model, check_pairs);
        if (last.malicious_refusal_rate >= params.contract_accuracy &&
            last.benign_compliance_rate >= params.contract_accuracy) {
            return model;
        }
        attempt.steer_strength *= params.steer_growth;
    }
    throw ContractError("planted model failed its behavioral contract after " + std::to_string(params.max_attempts) +
                        " attempts: malicious refusal " + std::to_string(last.malicious_refusal_rate) +
                        ", benign compliance " + std::to_string(last.benign_compliance_rate));
}

/// Reference for incoherence judgments: a held-out benign utility set and the
/// unmasked model's perplexity on it.
class UtilityProbe {
public:
    UtilityProbe(const MoEModel& reference, std::vector<std::vector<TokenId>> utility_set,
                 double incoherence_factor = 2.0)
        : utility_(std::move(utility_set)), factor_(incoherence_factor) {
        if (incoherence_factor <= 0.0) {
            throw PreconditionError("incoherence_factor must be positive");
        }
        baseline_ = reference.apply_mask({}).perplexity(utility_);
    }

    double baseline_perplexity() const { return baseline_; }
    double incoherence_factor() const { return factor_; }
    const std::vector<std::vector<TokenId>>& utility_set() const { return utility_; }

    double perplexity_ratio(const MoEModel& model) const { return model.perplexity(utility_) / baseline_; }
    bool incoherent(double ratio) const { return ratio > factor_; }

private:
    std::vector<std::vector<TokenId>> utility_;
    double factor_;
    double baseline_ = 0.0;
};

/// Verdict given an already measured perplexity ratio for the model's mask.
inline Verdict judge_with_ratio(const MoEModel& model, const std::vector<TokenId>& tokens, double ratio,
                                const UtilityProbe& probe) {
    if (probe.incoherent(ratio)) {
        return Verdict::Incoherent;
    }
    return model.behavioral_verdict(tokens);
}

inline Verdict judge(const MoEModel& model, const std::vector<TokenId>& tokens, const UtilityProbe& probe) {
    return judge_with_ratio(model, tokens, probe.perplexity_ratio(model), probe);
}

} // namespace silencer::moe
