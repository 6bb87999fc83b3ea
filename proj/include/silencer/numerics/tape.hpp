#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "silencer/error.hpp"
#include "silencer/numerics/tensor.hpp"

namespace silencer::numerics {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;
};

/// Gradients of one backward pass, indexed by node.
class Gradients {
public:
    Gradients(const Tape* tape, std::vector<Tensor> grads, std::vector<Shape> shapes)
        : tape_(tape), grads_(std::move(grads)), shapes_(std::move(shapes)) {}

    /// Gradient with respect to `v`; zero when `v` does not influence the output.
    Tensor operator[](Var v) const {
        check(v);
        if (grads_[v.id].size() == 0) {
            return Tensor(shapes_[v.id]);
        }
        return grads_[v.id];
    }

private:
    void check(Var v) const {
        if (v.tape != tape_ || v.id >= grads_.size()) {
            throw PreconditionError("gradient requested for a node that is not on this tape");
        }
    }

    const Tape* tape_;
    std::vector<Tensor> grads_;
    std::vector<Shape> shapes_;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so the
/// node vector is already topologically sorted; backward walks it in reverse.
/// A tape is confined to one thread.
class Tape {
public:
    using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor>& grads)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var leaf(Tensor value) { return push(std::move(value), true, {}); }

    /// Non-differentiable input; its gradient is always zero.
    Var constant(Tensor value) { return push(std::move(value), false, {}); }

    const Tensor& value(Var v) const {
        check(v);
        return nodes_[v.id].value;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.id].requires_grad;
    }

    /// Record an op. `backward` is only kept when some input requires a gradient.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
        value.require_finite(op);
        bool needs = false;
        for (Var in : inputs) {
            check(in);
            needs = needs || nodes_[in.id].requires_grad;
        }
        Var out = push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
        return out;
    }

    /// Reverse accumulation from a scalar (1x1 or single-element) output.
    Gradients backward(Var output) const {
        check(output);
        if (nodes_[output.id].value.size() != 1) {
            throw PreconditionError("backward: output node is not a scalar, shape " +
                                    to_string(nodes_[output.id].value.shape()));
        }
        std::vector<Tensor> grads(nodes_.size());
        std::vector<Shape> shapes;
        shapes.reserve(nodes_.size());
        for (const Node& n : nodes_) {
            shapes.push_back(n.value.shape());
        }
        grads[output.id] = Tensor(nodes_[output.id].value.shape(), 1.0);
        for (std::size_t i = output.id + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (!n.backward || grads[i].size() == 0) {
                continue;
            }
            n.backward(grads[i], grads);
        }
        return Gradients(this, std::move(grads), std::move(shapes));
    }

    /// Accumulate `g` into `grads[id]`, allocating on first touch. Used by op backward functions.
    static void accumulate(std::vector<Tensor>& grads, std::size_t id, const Tensor& g) {
        if (grads[id].size() == 0) {
            grads[id] = g;
        } else {
            grads[id] += g;
        }
    }

    static Tensor& slot(std::vector<Tensor>& grads, std::size_t id, const Shape& shape) {
        if (grads[id].size() == 0) {
            grads[id] = Tensor(shape);
        }
        return grads[id];
    }

private:
    struct Node {
        Tensor value;
        bool requires_grad;
        BackwardFn backward;
    };

    Var push(Tensor value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward)});
        return Var{this, nodes_.size() - 1};
    }

    void check(Var v) const {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw PreconditionError("node is not on this tape");
        }
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Every op takes and returns Vars on the same tape.

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vars) {
    Tape* t = vars.begin()->tape;
    for (Var v : vars) {
        if (v.tape != t || t == nullptr) {
            throw PreconditionError("operands live on different tapes");
        }
    }
    return *t;
}

} // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape({a, b});
    Tensor out = numerics::matmul(t.value(a), t.value(b));
    return t.record(
        std::move(out), {a, b},
        [&t, a, b](const Tensor& g, std::vector<Tensor>& grads) {
            if (t.requires_grad(a)) {
                Tape::accumulate(grads, a.id, numerics::matmul_nt(g, t.value(b)));
            }
            if (t.requires_grad(b)) {
                Tape::accumulate(grads, b.id, numerics::matmul_tn(t.value(a), g));
            }
        },
        "matmul");
}

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape({a, b});
    t.value(a).require_same_shape(t.value(b), "add");
    Tensor out = t.value(a);
    out += t.value(b);
    return t.record(
        std::move(out), {a, b},
        [&t, a, b](const Tensor& g, std::vector<Tensor>& grads) {
            if (t.requires_grad(a)) {
                Tape::accumulate(grads, a.id, g);
            }
            if (t.requires_grad(b)) {
                Tape::accumulate(grads, b.id, g);
            }
        },
        "add");
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape({a, b});
    t.value(a).require_same_shape(t.value(b), "sub");
    Tensor out = t.value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= t.value(b)[i];
    }
    return t.record(
        std::move(out), {a, b},
        [&t, a, b](const Tensor& g, std::vector<Tensor>& grads) {
            if (t.requires_grad(a)) {
                Tape::accumulate(grads, a.id, g);
            }
            if (t.requires_grad(b)) {
                Tensor neg = g;
                neg *= -1.0;
                Tape::accumulate(grads, b.id, neg);
            }
        },
        "sub");
}

/// a (rows x n) + bias (1 x n), bias broadcast over rows.
inline Var add_row(Var a, Var bias) {
    Tape& t = detail::same_tape({a, bias});
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(bias);
    if (bv.size() != av.cols()) {
        throw DimensionError("add_row: bias width " + std::to_string(bv.size()) + " vs " + std::to_string(av.cols()));
    }
    Tensor out = av;
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < av.cols(); ++c) {
            out.at(r, c) += bv[c];
        }
    }
    return t.record(
        std::move(out), {a, bias},
        [&t, a, bias](const Tensor& g, std::vector<Tensor>& grads) {
            if (t.requires_grad(a)) {
                Tape::accumulate(grads, a.id, g);
            }
            if (t.requires_grad(bias)) {
                Tensor& gb = Tape::slot(grads, bias.id, t.value(bias).shape());
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < g.cols(); ++c) {
                        gb[c] += g.at(r, c);
                    }
                }
            }
        },
        "add_row");
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape({a, b});
    t.value(a).require_same_shape(t.value(b), "mul");
    Tensor out = t.value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= t.value(b)[i];
    }
    return t.record(
        std::move(out), {a, b},
        [&t, a, b](const Tensor& g, std::vector<Tensor>& grads) {
            if (t.requires_grad(a)) {
                Tensor& ga = Tape::slot(grads, a.id, g.shape());
                const Tensor& bv = t.value(b);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * bv[i];
                }
            }
            if (t.requires_grad(b)) {
                Tensor& gb = Tape::slot(grads, b.id, g.shape());
                const Tensor& av = t.value(a);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[i] += g[i] * av[i];
                }
            }
        },
        "mul");
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    out *= s;
    return t.record(
        std::move(out), {a},
        [a, s](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor scaled = g;
            scaled *= s;
            Tape::accumulate(grads, a.id, scaled);
        },
        "scale");
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.data()) {
        v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    // record() appends exactly one node, so the output id is known in advance
    const std::size_t self = t.size();
    return t.record(
        std::move(out), {a},
        [&t, a, self](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& ga = Tape::slot(grads, a.id, g.shape());
            const Tensor& y = t.value(Var{&t, self});
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        },
        "sigmoid");
}

inline Var tanh(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.data()) {
        v = std::tanh(v);
    }
    const std::size_t self = t.size();
    return t.record(
        std::move(out), {a},
        [&t, a, self](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& ga = Tape::slot(grads, a.id, g.shape());
            const Tensor& y = t.value(Var{&t, self});
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        },
        "tanh");
}

/// Columns [begin, begin + count) of a 2-D node.
inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    if (begin + count > av.cols()) {
        throw DimensionError("slice_cols out of range");
    }
    Tensor out = Tensor::matrix(av.rows(), count);
    for (std::size_t r = 0; r < av.rows(); ++r) {
        for (std::size_t c = 0; c < count; ++c) {
            out.at(r, c) = av.at(r, begin + c);
        }
    }
    return t.record(
        std::move(out), {a},
        [&t, a, begin, count](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& ga = Tape::slot(grads, a.id, t.value(a).shape());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < count; ++c) {
                    ga.at(r, begin + c) += g.at(r, c);
                }
            }
        },
        "slice_cols");
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw PreconditionError("concat_cols of nothing");
    }
    Tape& t = *parts.front().tape;
    const std::size_t rows = t.value(parts.front()).rows();
    std::size_t width = 0;
    for (Var p : parts) {
        if (p.tape != &t || t.value(p).rows() != rows) {
            throw DimensionError("concat_cols: row count mismatch");
        }
        width += t.value(p).cols();
    }
    Tensor out = Tensor::matrix(rows, width);
    std::size_t offset = 0;
    for (Var p : parts) {
        const Tensor& pv = t.value(p);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pv.cols(); ++c) {
                out.at(r, offset + c) = pv.at(r, c);
            }
        }
        offset += pv.cols();
    }
    return t.record(
        std::move(out), parts,
        [&t, parts](const Tensor& g, std::vector<Tensor>& grads) {
            std::size_t off = 0;
            for (Var p : parts) {
                const Tensor& pv = t.value(p);
                if (t.requires_grad(p)) {
                    Tensor& gp = Tape::slot(grads, p.id, pv.shape());
                    for (std::size_t r = 0; r < pv.rows(); ++r) {
                        for (std::size_t c = 0; c < pv.cols(); ++c) {
                            gp.at(r, c) += g.at(r, off + c);
                        }
                    }
                }
                off += pv.cols();
            }
        },
        "concat_cols");
}

/// Row-wise select: row r comes from `a` when keep[r], else from `b`.
/// Used to freeze recurrent state on padded time steps.
inline Var select_rows(const std::vector<bool>& keep, Var a, Var b) {
    Tape& t = detail::same_tape({a, b});
    t.value(a).require_same_shape(t.value(b), "select_rows");
    if (keep.size() != t.value(a).rows()) {
        throw DimensionError("select_rows: mask length does not match row count");
    }
    Tensor out = t.value(b);
    const Tensor& av = t.value(a);
    for (std::size_t r = 0; r < keep.size(); ++r) {
        if (keep[r]) {
            for (std::size_t c = 0; c < av.cols(); ++c) {
                out.at(r, c) = av.at(r, c);
            }
        }
    }
    return t.record(
        std::move(out), {a, b},
        [&t, keep, a, b](const Tensor& g, std::vector<Tensor>& grads) {
            for (int side = 0; side < 2; ++side) {
                Var target = side == 0 ? a : b;
                if (!t.requires_grad(target)) {
                    continue;
                }
                Tensor& gt = Tape::slot(grads, target.id, g.shape());
                for (std::size_t r = 0; r < keep.size(); ++r) {
                    if (keep[r] == (side == 0)) {
                        for (std::size_t c = 0; c < g.cols(); ++c) {
                            gt.at(r, c) += g.at(r, c);
                        }
                    }
                }
            }
        },
        "select_rows");
}

/// Gather rows of `a` by index (rows may repeat).
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    Tensor out = Tensor::matrix(index.size(), av.cols());
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= av.rows()) {
            throw DimensionError("gather_rows index out of range");
        }
        for (std::size_t c = 0; c < av.cols(); ++c) {
            out.at(r, c) = av.at(index[r], c);
        }
    }
    return t.record(
        std::move(out), {a},
        [&t, a, index = std::move(index)](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& ga = Tape::slot(grads, a.id, t.value(a).shape());
            for (std::size_t r = 0; r < index.size(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    ga.at(index[r], c) += g.at(r, c);
                }
            }
        },
        "gather_rows");
}

/// Embedding lookup with concatenation: `ids` is rows x slots; output row r is
/// table[ids(r,0)] ++ table[ids(r,1)] ++ ... (width slots * table.cols()).
inline Var gather_concat(Var table, std::size_t rows, std::size_t slots, std::vector<std::size_t> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value(table);
    const std::size_t d = tv.cols();
    if (ids.size() != rows * slots) {
        throw DimensionError("gather_concat: id count does not match rows x slots");
    }
    Tensor out = Tensor::matrix(rows, slots * d);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t s = 0; s < slots; ++s) {
            const std::size_t id = ids[r * slots + s];
            if (id >= tv.rows()) {
                throw DimensionError("gather_concat: embedding id " + std::to_string(id) + " out of range");
            }
            for (std::size_t j = 0; j < d; ++j) {
                out.at(r, s * d + j) = tv.at(id, j);
            }
        }
    }
    return t.record(
        std::move(out), {table},
        [&t, table, rows, slots, d, ids = std::move(ids)](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& gt = Tape::slot(grads, table.id, t.value(table).shape());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t s = 0; s < slots; ++s) {
                    const std::size_t id = ids[r * slots + s];
                    for (std::size_t j = 0; j < d; ++j) {
                        gt.at(id, j) += g.at(r, s * d + j);
                    }
                }
            }
        },
        "gather_concat");
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    Tensor out = Tensor::scalar(t.value(a).sum());
    return t.record(
        std::move(out), {a},
        [&t, a](const Tensor& g, std::vector<Tensor>& grads) {
            Tape::accumulate(grads, a.id, Tensor(t.value(a).shape(), g[0]));
        },
        "sum");
}

/// Numerically stable binary cross-entropy with logits, averaged over rows of
/// `logits` (rows x 1). Entries with weight 0 are ignored; the mean divides by the
/// weight total. Uses max(z,0) - z*y + log1p(exp(-|z|)).
inline Var bce_with_logits(Var logits, std::vector<double> labels, std::vector<double> weights = {}) {
    Tape& t = *logits.tape;
    const Tensor& z = t.value(logits);
    if (labels.size() != z.size()) {
        throw DimensionError("bce_with_logits: label count does not match logits");
    }
    if (weights.empty()) {
        weights.assign(labels.size(), 1.0);
    }
    double total_w = 0.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double zi = z[i];
        loss += weights[i] * (std::max(zi, 0.0) - zi * labels[i] + std::log1p(std::exp(-std::abs(zi))));
        total_w += weights[i];
    }
    if (total_w <= 0.0) {
        throw PreconditionError("bce_with_logits: zero total weight");
    }
    return t.record(
        Tensor::scalar(loss / total_w), {logits},
        [&t, logits, labels = std::move(labels), weights = std::move(weights), total_w](const Tensor& g,
                                                                                         std::vector<Tensor>& grads) {
            const Tensor& zv = t.value(logits);
            Tensor& gz = Tape::slot(grads, logits.id, zv.shape());
            for (std::size_t i = 0; i < zv.size(); ++i) {
                const double zi = zv[i];
                const double s = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
                gz[i] += g[0] * weights[i] * (s - labels[i]) / total_w;
            }
        },
        "bce_with_logits");
}

/// Scalar BCE with logits outside any tape.
inline double bce_with_logits(double z, double label) {
    return std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

} // namespace silencer::numerics
