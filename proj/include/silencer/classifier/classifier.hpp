#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/numerics/rng.hpp"
#include "silencer/numerics/tape.hpp"
#include "silencer/numerics/tensor.hpp"
#include "silencer/traces/trace.hpp"

namespace silencer::classifier {

using numerics::Tape;
using numerics::Tensor;
using numerics::Var;
using traces::RoutingTrace;

enum class Variant { Flat, Hierarchical };

inline std::string to_string(Variant v) { return v == Variant::Flat ? "flat" : "hierarchical"; }

inline Variant variant_from_string(const std::string& s) {
    if (s == "flat") return Variant::Flat;
    if (s == "hierarchical") return Variant::Hierarchical;
    throw ConfigError("unknown classifier variant '" + s + "'");
}

struct ClassifierConfig {
    std::size_t embed_dim = 16;
    std::size_t hidden_dim = 64;
    Variant variant = Variant::Flat;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t max_epochs = 30;
    std::size_t patience = 5;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const {
        if (embed_dim == 0 || hidden_dim == 0) {
            throw ConfigError("classifier: embed_dim and hidden_dim must be at least 1");
        }
        if (!(learning_rate > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
            !(epsilon > 0.0)) {
            throw ConfigError("classifier: invalid optimizer hyperparameters");
        }
        if (batch_size == 0 || max_epochs == 0) {
            throw ConfigError("classifier: batch_size and max_epochs must be at least 1");
        }
    }
};

/// Trace geometry the classifier is bound to.
struct TraceDims {
    std::size_t num_layers = 0;
    std::size_t num_experts = 0;
    std::size_t top_k = 0;

    friend bool operator==(const TraceDims&, const TraceDims&) = default;
};

/// LSTM cell weights, gate order (i, f, g, o) along the 4H columns.
struct LstmWeights {
    Tensor w_x;
    Tensor w_h;
    Tensor b;
};

/// All trainable tensors. The embedding table has one row per local expert,
/// row l * N + e.
struct ClassifierParams {
    Tensor embedding;
    std::optional<LstmWeights> inner; // hierarchical only: runs over layers
    LstmWeights outer;                // runs over tokens
    Tensor w_c;
    Tensor b_c;

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out{&embedding};
        if (inner) {
            for (Tensor* t : {&inner->w_x, &inner->w_h, &inner->b}) out.push_back(t);
        }
        for (Tensor* t : {&outer.w_x, &outer.w_h, &outer.b, &w_c, &b_c}) out.push_back(t);
        return out;
    }
    std::vector<const Tensor*> tensors() const {
        std::vector<const Tensor*> out;
        for (Tensor* t : const_cast<ClassifierParams*>(this)->tensors()) out.push_back(t);
        return out;
    }
};

namespace detail {

inline LstmWeights init_lstm(std::size_t in, std::size_t hidden, numerics::Rng& rng) {
    const double a = 1.0 / std::sqrt(static_cast<double>(hidden));
    LstmWeights w{Tensor::matrix(in, 4 * hidden), Tensor::matrix(hidden, 4 * hidden), Tensor::matrix(1, 4 * hidden)};
    for (double& v : w.w_x.data()) v = rng.uniform(-a, a);
    for (double& v : w.w_h.data()) v = rng.uniform(-a, a);
    // forget-gate bias starts at 1
    for (std::size_t j = hidden; j < 2 * hidden; ++j) w.b[j] = 1.0;
    return w;
}

struct BoundLstm {
    Var w_x, w_h, b;
};

struct Bound {
    Var embedding;
    std::optional<BoundLstm> inner;
    BoundLstm outer;
    Var w_c, b_c;
};

inline Var put(Tape& tape, const Tensor& t, bool grad) { return grad ? tape.leaf(t) : tape.constant(t); }

inline BoundLstm bind(Tape& tape, const LstmWeights& w, bool grad) {
    return {put(tape, w.w_x, grad), put(tape, w.w_h, grad), put(tape, w.b, grad)};
}

/// One LSTM step; returns (h', c').
inline std::pair<Var, Var> lstm_step(const BoundLstm& w, std::size_t hidden, Var x, Var h, Var c) {
    using namespace numerics;
    const Var pre = add_row(add(matmul(x, w.w_x), matmul(h, w.w_h)), w.b);
    const Var i = sigmoid(slice_cols(pre, 0, hidden));
    const Var f = sigmoid(slice_cols(pre, hidden, hidden));
    const Var g = numerics::tanh(slice_cols(pre, 2 * hidden, hidden));
    const Var o = sigmoid(slice_cols(pre, 3 * hidden, hidden));
    const Var c_next = add(mul(f, c), mul(i, g));
    const Var h_next = mul(o, numerics::tanh(c_next));
    return {h_next, c_next};
}

} // namespace detail

/// Recorded graph of a batched forward pass.
struct ForwardGraph {
    /// Parameter nodes, in ClassifierParams::tensors() order.
    std::vector<Var> params;
    /// (B * Tmax) x (L*K*d) features, row b * Tmax + t.
    Var features;
    /// B x 1 refusal logits from each trace's final hidden state.
    Var logits;
    /// Outer hidden state after each step, B x H.
    std::vector<Var> hidden;
};

/// LSTM trace classifier (flat or hierarchical) with a linear refusal head.
class TraceClassifier {
public:
    TraceClassifier(ClassifierConfig cfg, TraceDims dims) : cfg_(cfg), dims_(dims) {
        cfg_.validate();
        if (dims_.num_layers == 0 || dims_.num_experts == 0 || dims_.top_k == 0) {
            throw DimensionError("classifier: trace dimensions must be positive");
        }
        numerics::Rng rng(cfg_.seed ^ 0xc1a551f1e5ULL);
        const std::size_t d = cfg_.embed_dim;
        const std::size_t H = cfg_.hidden_dim;
        params_.embedding = Tensor::matrix(dims_.num_layers * dims_.num_experts, d);
        for (double& v : params_.embedding.data()) v = rng.normal(0.0, 0.1);
        if (cfg_.variant == Variant::Hierarchical) {
            params_.inner = detail::init_lstm(dims_.top_k * d, H, rng);
            params_.outer = detail::init_lstm(H, H, rng);
        } else {
            params_.outer = detail::init_lstm(feature_width(), H, rng);
        }
        const double a = 1.0 / std::sqrt(static_cast<double>(H));
        params_.w_c = Tensor::matrix(H, 1);
        for (double& v : params_.w_c.data()) v = rng.uniform(-a, a);
        params_.b_c = Tensor::matrix(1, 1);
    }

    TraceClassifier(ClassifierConfig cfg, TraceDims dims, ClassifierParams params)
        : cfg_(cfg), dims_(dims), params_(std::move(params)) {
        cfg_.validate();
        check_param_shapes();
    }

    const ClassifierConfig& config() const { return cfg_; }
    const TraceDims& dims() const { return dims_; }
    const ClassifierParams& params() const { return params_; }
    ClassifierParams& mutable_params() { return params_; }

    std::size_t feature_width() const { return dims_.num_layers * dims_.top_k * cfg_.embed_dim; }

    void require_dims(const RoutingTrace& tr) const {
        if (tr.num_layers != dims_.num_layers || tr.top_k != dims_.top_k) {
            throw DimensionError("classifier expects traces with (L, K) = (" + std::to_string(dims_.num_layers) +
                                 ", " + std::to_string(dims_.top_k) + "), found (" + std::to_string(tr.num_layers) +
                                 ", " + std::to_string(tr.top_k) + ")");
        }
        if (tr.selections.size() != tr.length() * tr.num_layers * tr.top_k) {
            throw DimensionError("trace " + std::to_string(tr.prompt_id) + ": selection count does not equal T*L*K");
        }
        for (std::uint16_t s : tr.selections) {
            if (s >= dims_.num_experts) {
                throw DimensionError("trace " + std::to_string(tr.prompt_id) + ": expert " + std::to_string(s) +
                                     " outside classifier range N = " + std::to_string(dims_.num_experts));
            }
        }
    }

    /// Embedding-table row of every selection, order (t, l, k).
    std::vector<std::size_t> embedding_ids(const RoutingTrace& tr) const {
        require_dims(tr);
        std::vector<std::size_t> ids(tr.selections.size());
        for (std::size_t t = 0; t < tr.length(); ++t) {
            for (std::size_t l = 0; l < dims_.num_layers; ++l) {
                for (std::size_t k = 0; k < dims_.top_k; ++k) {
                    ids[tr.index(t, l, k)] = l * dims_.num_experts + tr.expert(t, l, k);
                }
            }
        }
        return ids;
    }

    /// x_1..x_T as a T x (L*K*d) matrix.
    Tensor featurize(const RoutingTrace& tr) const {
        Tape tape;
        const Var table = tape.constant(params_.embedding);
        const std::vector<std::size_t> ids = embedding_ids(tr);
        return tape.value(numerics::gather_concat(table, tr.length(), dims_.num_layers * dims_.top_k, ids));
    }

    /// Record a batched forward pass. Parameters are leaves when `param_grad`.
    ForwardGraph forward(Tape& tape, std::span<const RoutingTrace* const> batch, bool param_grad) const {
        if (batch.empty()) {
            throw PreconditionError("classifier: empty batch");
        }
        std::size_t tmax = 0;
        std::vector<std::size_t> lengths;
        for (const RoutingTrace* tr : batch) {
            if (tr->length() == 0) {
                throw PreconditionError("classifier: empty trace " + std::to_string(tr->prompt_id));
            }
            lengths.push_back(tr->length());
            tmax = std::max(tmax, tr->length());
        }
        const std::size_t LK = dims_.num_layers * dims_.top_k;
        std::vector<std::size_t> ids(batch.size() * tmax * LK, 0);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const std::vector<std::size_t> own = embedding_ids(*batch[b]);
            std::copy(own.begin(), own.end(), ids.begin() + static_cast<std::ptrdiff_t>(b * tmax * LK));
        }
        ForwardGraph g;
        const detail::Bound bound = bind(tape, param_grad, g.params);
        g.features = numerics::gather_concat(bound.embedding, batch.size() * tmax, LK, std::move(ids));
        run(bound, g, lengths, tmax);
        return g;
    }

    /// Forward pass of one trace from a given feature matrix (T x L*K*d), with
    /// parameters held constant. `features` must be a node on `tape`.
    ForwardGraph forward_features(Tape& tape, Var features, std::size_t length) const {
        if (tape.value(features).rows() != length || tape.value(features).cols() != feature_width()) {
            throw DimensionError("classifier: feature matrix must be " + std::to_string(length) + " x " +
                                 std::to_string(feature_width()));
        }
        ForwardGraph g;
        const detail::Bound bound = bind(tape, false, g.params);
        g.features = features;
        run(bound, g, {length}, length);
        return g;
    }

    /// Refusal logit z of one trace.
    double logit(const RoutingTrace& tr) const {
        Tape tape;
        const RoutingTrace* one = &tr;
        return tape.value(forward(tape, std::span(&one, 1), false).logits)[0];
    }

    /// Refusal probability after each token, from the head applied to h_t.
    std::vector<double> trajectory(const RoutingTrace& tr) const {
        Tape tape;
        const RoutingTrace* one = &tr;
        const ForwardGraph g = forward(tape, std::span(&one, 1), false);
        std::vector<double> out;
        for (Var h : g.hidden) {
            const Tensor z = numerics::matmul(tape.value(h), params_.w_c);
            out.push_back(numerics::sigmoid(z[0] + params_.b_c[0]));
        }
        return out;
    }

    /// Logits for many traces, batched.
    std::vector<double> logits(std::span<const RoutingTrace> traces) const {
        std::vector<double> out;
        out.reserve(traces.size());
        for (std::size_t begin = 0; begin < traces.size(); begin += cfg_.batch_size) {
            std::vector<const RoutingTrace*> batch;
            for (std::size_t i = begin; i < std::min(traces.size(), begin + cfg_.batch_size); ++i) {
                batch.push_back(&traces[i]);
            }
            Tape tape;
            const Tensor& z = tape.value(forward(tape, batch, false).logits);
            out.insert(out.end(), z.data().begin(), z.data().end());
        }
        return out;
    }

    /// Fraction of traces whose predicted label (z > 0 means malicious) is correct.
    double accuracy(std::span<const RoutingTrace> traces) const {
        if (traces.empty()) {
            throw PreconditionError("accuracy of an empty set");
        }
        const std::vector<double> z = logits(traces);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            const bool predicted = z[i] > 0.0;
            correct += predicted == (traces[i].label == traces::Label::Malicious) ? 1 : 0;
        }
        return static_cast<double>(correct) / static_cast<double>(traces.size());
    }

private:
    detail::Bound bind(Tape& tape, bool grad, std::vector<Var>& vars) const {
        detail::Bound b;
        b.embedding = detail::put(tape, params_.embedding, grad);
        vars.push_back(b.embedding);
        if (params_.inner) {
            b.inner = detail::bind(tape, *params_.inner, grad);
            for (Var v : {b.inner->w_x, b.inner->w_h, b.inner->b}) vars.push_back(v);
        }
        b.outer = detail::bind(tape, params_.outer, grad);
        b.w_c = detail::put(tape, params_.w_c, grad);
        b.b_c = detail::put(tape, params_.b_c, grad);
        for (Var v : {b.outer.w_x, b.outer.w_h, b.outer.b, b.w_c, b.b_c}) vars.push_back(v);
        return b;
    }

    void run(const detail::Bound& w, ForwardGraph& g, const std::vector<std::size_t>& lengths,
             std::size_t tmax) const {
        Tape& tape = *g.features.tape;
        const std::size_t B = lengths.size();
        const std::size_t H = cfg_.hidden_dim;
        const std::size_t Kd = dims_.top_k * cfg_.embed_dim;
        Var h = tape.constant(Tensor::matrix(B, H));
        Var c = tape.constant(Tensor::matrix(B, H));
        for (std::size_t t = 0; t < tmax; ++t) {
            std::vector<std::size_t> rows(B);
            std::vector<bool> live(B);
            bool all_live = true;
            for (std::size_t b = 0; b < B; ++b) {
                rows[b] = b * tmax + t;
                live[b] = t < lengths[b];
                all_live = all_live && live[b];
            }
            const Var x = numerics::gather_rows(g.features, rows);
            Var input = x;
            if (w.inner) {
                // inner recurrence over layers summarizes the token's routing path
                Var hi = tape.constant(Tensor::matrix(B, H));
                Var ci = tape.constant(Tensor::matrix(B, H));
                for (std::size_t l = 0; l < dims_.num_layers; ++l) {
                    std::tie(hi, ci) = detail::lstm_step(*w.inner, H, numerics::slice_cols(x, l * Kd, Kd), hi, ci);
                }
                input = hi;
            }
            auto [h_next, c_next] = detail::lstm_step(w.outer, H, input, h, c);
            if (!all_live) {
                h_next = numerics::select_rows(live, h_next, h);
                c_next = numerics::select_rows(live, c_next, c);
            }
            h = h_next;
            c = c_next;
            g.hidden.push_back(h);
        }
        g.logits = numerics::add_row(numerics::matmul(h, w.w_c), w.b_c);
    }

    void check_param_shapes() const {
        using numerics::Shape;
        const std::size_t d = cfg_.embed_dim;
        const std::size_t H = cfg_.hidden_dim;
        const auto expect = [](bool ok, const std::string& what) {
            if (!ok) throw DimensionError("classifier parameters: " + what + " has the wrong shape");
        };
        const auto lstm = [&](const LstmWeights& w, std::size_t in, const std::string& name) {
            expect(w.w_x.shape() == Shape{in, 4 * H}, name + ".w_x");
            expect(w.w_h.shape() == Shape{H, 4 * H}, name + ".w_h");
            expect(w.b.shape() == Shape{1, 4 * H}, name + ".b");
        };
        expect(params_.embedding.shape() == Shape{dims_.num_layers * dims_.num_experts, d}, "embedding");
        const bool hier = cfg_.variant == Variant::Hierarchical;
        expect(params_.inner.has_value() == hier, "inner recurrence");
        if (hier) {
            lstm(*params_.inner, dims_.top_k * d, "inner");
            lstm(params_.outer, H, "outer");
        } else {
            lstm(params_.outer, feature_width(), "outer");
        }
        expect(params_.w_c.shape() == Shape{H, 1}, "w_c");
        expect(params_.b_c.shape() == Shape{1, 1}, "b_c");
        for (const Tensor* t : params_.tensors()) t->require_finite("classifier parameters");
    }

    ClassifierConfig cfg_;
    TraceDims dims_;
    ClassifierParams params_;
};

} // namespace silencer::classifier
