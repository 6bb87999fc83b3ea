#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "silencer/classifier/classifier.hpp"
#include "silencer/error.hpp"
#include "silencer/numerics/rng.hpp"
#include "silencer/traces/trace.hpp"

namespace silencer::classifier {

/// Adam with bias correction over a fixed list of tensors.
class Adam {
public:
    Adam(const ClassifierConfig& cfg, const std::vector<Tensor*>& params)
        : lr_(cfg.learning_rate), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.epsilon) {
        for (const Tensor* p : params) {
            m_.emplace_back(p->shape());
            v_.emplace_back(p->shape());
        }
    }

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw PreconditionError("adam: parameter list changed between steps");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                p[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
            }
            p.require_finite("parameters after adam update");
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double valid_accuracy = 0.0;
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;
    /// Mean loss of every optimizer step, in order.
    std::vector<double> step_losses;
    double best_valid_accuracy = 0.0;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
};

/// One Adam step on a batch; returns the batch loss before the update.
inline double train_step(TraceClassifier& clf, Adam& opt, std::span<const RoutingTrace* const> batch) {
    Tape tape;
    const ForwardGraph g = clf.forward(tape, batch, true);
    std::vector<double> labels;
    for (const RoutingTrace* tr : batch) {
        labels.push_back(tr->label == traces::Label::Malicious ? 1.0 : 0.0);
    }
    const Var loss = numerics::bce_with_logits(g.logits, labels);
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value)) {
        throw NumericalError("training loss is not finite (" + std::to_string(value) + ") after " +
                             std::to_string(opt.steps()) + " steps");
    }
    const numerics::Gradients grads = tape.backward(loss);
    std::vector<Tensor> gs;
    for (Var p : g.params) gs.push_back(grads[p]);
    opt.step(clf.mutable_params().tensors(), gs);
    return value;
}

/// Minibatch Adam on per-trace BCE with early stopping on validation accuracy.
/// The parameters of the best validation epoch are restored at the end.
inline TrainingReport train(TraceClassifier& clf, const traces::TraceCorpus& train_set,
                            const traces::TraceCorpus& valid_set) {
    if (train_set.traces.empty() || valid_set.traces.empty()) {
        throw PreconditionError("train: training and validation corpora must be nonempty");
    }
    const TraceDims& d = clf.dims();
    train_set.require_dims(d.num_layers, d.num_experts, d.top_k, "training corpus");
    valid_set.require_dims(d.num_layers, d.num_experts, d.top_k, "validation corpus");
    const ClassifierConfig& cfg = clf.config();

    Adam opt(cfg, clf.mutable_params().tensors());
    numerics::Rng rng(cfg.seed ^ 0x7a1e5eedULL);
    std::vector<std::size_t> order(train_set.traces.size());
    std::iota(order.begin(), order.end(), 0);

    TrainingReport report;
    ClassifierParams best = clf.params();
    report.best_valid_accuracy = -1.0;
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            std::vector<const RoutingTrace*> batch;
            for (std::size_t i = begin; i < std::min(order.size(), begin + cfg.batch_size); ++i) {
                batch.push_back(&train_set.traces[order[i]]);
            }
            const double loss = train_step(clf, opt, batch);
            report.step_losses.push_back(loss);
            loss_sum += loss;
            ++batches;
        }
        const double acc = clf.accuracy(valid_set.traces);
        report.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
        if (acc > report.best_valid_accuracy) {
            report.best_valid_accuracy = acc;
            report.best_epoch = epoch;
            best = clf.params();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            report.early_stopped = true;
            break;
        }
    }
    clf.mutable_params() = best;
    return report;
}

/// Copy of `corpus` with labels permuted uniformly at random (a permutation-test
/// control: no classifier should beat chance on it).
inline traces::TraceCorpus shuffle_labels(traces::TraceCorpus corpus, std::uint64_t seed) {
    std::vector<traces::Label> labels;
    for (const auto& tr : corpus.traces) labels.push_back(tr.label);
    numerics::Rng rng(seed);
    rng.shuffle(labels);
    for (std::size_t i = 0; i < labels.size(); ++i) corpus.traces[i].label = labels[i];
    return corpus;
}

} // namespace silencer::classifier
