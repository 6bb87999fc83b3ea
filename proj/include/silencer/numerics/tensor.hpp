#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "silencer/error.hpp"

namespace silencer::numerics {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major tensor of doubles. Value type; copies are deep.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(volume(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (volume(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + to_string(shape_));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }

    /// Build a 2-D tensor from nested rows, e.g. {{1, 2}, {3, 4}}.
    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.front().size() : 0;
        Tensor t = matrix(r, c);
        for (std::size_t i = 0; i < r; ++i) {
            if (rows[i].size() != c) {
                throw DimensionError("ragged rows in Tensor::from_rows");
            }
            std::copy(rows[i].begin(), rows[i].end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
        }
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    /// Rows/cols of a 2-D tensor; a 1-D tensor is treated as a single row.
    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : size()); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void require_finite(const char* where) const {
        if (!all_finite()) {
            throw NumericalError(std::string("non-finite value produced by ") + where);
        }
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += other.data_[i];
        }
        return *this;
    }

    Tensor& operator*=(double s) {
        for (double& v : data_) {
            v *= s;
        }
        return *this;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    void require_same_shape(const Tensor& other, const char* op) const {
        if (shape_ != other.shape_) {
            throw DimensionError(std::string("shape mismatch in ") + op + ": " + to_string(shape_) + " vs " +
                                 to_string(other.shape_));
        }
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t volume(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Plain matrix product of 2-D tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    const std::size_t p = b.cols();
    Tensor out = Tensor::matrix(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = &out.at(i, 0);
        for (std::size_t k = 0; k < m; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* brow = b.data().data() + k * p;
            for (std::size_t j = 0; j < p; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
        throw DimensionError("matmul_nt shape mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
    }
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    const std::size_t p = b.rows();
    Tensor out = Tensor::matrix(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a.data().data() + i * m;
        for (std::size_t j = 0; j < p; ++j) {
            const double* brow = b.data().data() + j * m;
            double acc = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                acc += arow[k] * brow[k];
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

/// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
        throw DimensionError("matmul_tn shape mismatch: " + to_string(a.shape()) + "^T x " + to_string(b.shape()));
    }
    const std::size_t n = a.rows();
    const std::size_t m = a.cols();
    const std::size_t p = b.cols();
    Tensor out = Tensor::matrix(m, p);
    for (std::size_t i = 0; i < n; ++i) {
        const double* brow = b.data().data() + i * p;
        for (std::size_t k = 0; k < m; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) {
                continue;
            }
            double* orow = &out.at(k, 0);
            for (std::size_t j = 0; j < p; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError("transpose expects a 2-D tensor, got " + to_string(a.shape()));
    }
    Tensor out = Tensor::matrix(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

/// Stabilized softmax over `logits` where entries with `masked[i] == true` are the
/// silenced sentinel: they receive probability exactly 0 and do not take part in
/// the max or the normalizer. Throws if every entry is masked.
inline std::vector<double> masked_softmax(std::span<const double> logits, const std::vector<bool>& masked) {
    if (masked.size() != logits.size()) {
        throw DimensionError("mask length " + std::to_string(masked.size()) + " does not match logits length " +
                             std::to_string(logits.size()));
    }
    double hi = -INFINITY;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!masked[i]) {
            if (!std::isfinite(logits[i])) {
                throw NumericalError("non-finite logit passed to softmax");
            }
            hi = std::max(hi, logits[i]);
        }
    }
    if (hi == -INFINITY) {
        throw PreconditionError("softmax: every entry along the axis is masked");
    }
    std::vector<double> out(logits.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!masked[i]) {
            out[i] = std::exp(logits[i] - hi);
            total += out[i];
        }
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
    return masked_softmax(logits, std::vector<bool>(logits.size(), false));
}

/// Softmax of a 2-D tensor along `axis` (0 = down columns, 1 = along rows) with an
/// optional mask of identical shape.
inline Tensor softmax(const Tensor& z, std::size_t axis, const std::vector<bool>& mask = {}) {
    if (z.rank() != 2 || axis > 1) {
        throw DimensionError("softmax expects a 2-D tensor and axis 0 or 1");
    }
    if (!mask.empty() && mask.size() != z.size()) {
        throw DimensionError("softmax mask size does not match tensor");
    }
    const std::size_t outer = axis == 1 ? z.rows() : z.cols();
    const std::size_t inner = axis == 1 ? z.cols() : z.rows();
    Tensor out(z.shape());
    std::vector<double> lane(inner);
    std::vector<bool> lane_mask(inner, false);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t idx = axis == 1 ? o * z.cols() + i : i * z.cols() + o;
            lane[i] = z[idx];
            lane_mask[i] = mask.empty() ? false : mask[idx];
        }
        const std::vector<double> p = masked_softmax(lane, lane_mask);
        for (std::size_t i = 0; i < inner; ++i) {
            out[axis == 1 ? o * z.cols() + i : i * z.cols() + o] = p[i];
        }
    }
    return out;
}

/// Solve (A + ridge*I) X = B for symmetric positive-definite A via Cholesky.
inline Tensor solve_spd(const Tensor& a, const Tensor& b, double ridge = 0.0) {
    const std::size_t n = a.rows();
    if (a.rank() != 2 || a.cols() != n || b.rows() != n) {
        throw DimensionError("solve_spd shape mismatch: " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    Tensor l = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.at(i, j) + (i == j ? ridge : 0.0);
            for (std::size_t k = 0; k < j; ++k) {
                s -= l.at(i, k) * l.at(j, k);
            }
            if (i == j) {
                if (s <= 0.0) {
                    throw NumericalError("solve_spd: matrix is not positive definite");
                }
                l.at(i, i) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    const std::size_t m = b.cols();
    Tensor x = Tensor::matrix(n, m);
    for (std::size_t c = 0; c < m; ++c) {
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b.at(i, c);
            for (std::size_t k = 0; k < i; ++k) {
                s -= l.at(i, k) * y[k];
            }
            y[i] = s / l.at(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = y[i];
            for (std::size_t k = i + 1; k < n; ++k) {
                s -= l.at(k, i) * x.at(k, c);
            }
            x.at(i, c) = s / l.at(i, i);
        }
    }
    return x;
}

} // namespace silencer::numerics
