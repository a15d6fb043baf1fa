#pragma once

// Dense-array numeric engine with reverse-mode autodiff.
//
// Tensors are rank-2 (rows x cols) buffers of 64-bit floats with value
// semantics over a shared payload; a row vector is 1 x d and a scalar is
// 1 x 1. Gradients do not live on the tensor: a Tape records executed ops
// as backward closures and owns the per-tensor gradient buffers, so one
// frozen parameter set can serve many concurrent tapes. Replaying the tape
// in reverse visits each op exactly once; tensors with no path to the loss
// simply never get a buffer (their gradient is exactly zero).
//
// Forward math is plain loops except matmul, which maps the row-major
// buffers into Eigen for the GEMM.

#include "liger/common.hpp"
#include "liger/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace liger {

namespace detail {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;
}  // namespace detail

// ----------------------------- Tensor -----------------------------

struct TensorData {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int rows, int cols, bool requires_grad = false) {
        check_dims(rows, cols);
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->rows = rows;
        t.d_->cols = cols;
        t.d_->v.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(int rows, int cols, std::vector<double> values, bool requires_grad = false) {
        check_dims(rows, cols);
        if (values.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
            throw DimensionError("Tensor::from: value count does not match shape");
        }
        Tensor t = zeros(rows, cols, requires_grad);
        t.d_->v = std::move(values);
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from(1, 1, {value}, requires_grad);
    }

    static Tensor randn(int rows, int cols, Rng& rng, double stddev, bool requires_grad = true) {
        Tensor t = zeros(rows, cols, requires_grad);
        for (auto& x : t.d_->v) x = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    int rows() const { return d_->rows; }
    int cols() const { return d_->cols; }
    std::size_t size() const { return d_->v.size(); }
    std::vector<int> shape() const { return {d_->rows, d_->cols}; }

    double* data() { return d_->v.data(); }
    const double* data() const { return d_->v.data(); }
    std::vector<double>& values() { return d_->v; }
    const std::vector<double>& values() const { return d_->v; }

    double& at(int r, int c) { return d_->v[static_cast<std::size_t>(r) * d_->cols + c]; }
    double at(int r, int c) const { return d_->v[static_cast<std::size_t>(r) * d_->cols + c]; }

    // Value of a 1x1 tensor.
    double item() const {
        if (size() != 1) throw ContractError("Tensor::item: tensor is not scalar");
        return d_->v[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    bool has_nonfinite() const { return !all_finite(d_->v); }

    // Deep copy with a fresh payload.
    Tensor clone() const {
        Tensor t = zeros(rows(), cols(), d_->requires_grad);
        t.d_->v = d_->v;
        return t;
    }

    const TensorData* ptr() const { return d_.get(); }
    std::shared_ptr<TensorData> payload() const { return d_; }

private:
    static void check_dims(int rows, int cols) {
        if (rows < 0 || cols < 0) throw DimensionError("Tensor: negative dimension");
    }

    std::shared_ptr<TensorData> d_;
};

// ----------------------------- GradTape -----------------------------

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void(Tape&)> op) { ops_.push_back(std::move(op)); }

    // Gradient buffer for t, created zero-filled on first touch.
    std::vector<double>& grad(const Tensor& t) {
        auto& slot = grads_[t.ptr()];
        if (slot.empty() && t.size() != 0) slot.assign(t.size(), 0.0);
        return slot;
    }

    // Null when the tensor never received any gradient (i.e. it is zero).
    const std::vector<double>* grad_if(const TensorData* d) const {
        auto it = grads_.find(d);
        return it == grads_.end() ? nullptr : &it->second;
    }
    const std::vector<double>* grad_if(const Tensor& t) const { return grad_if(t.ptr()); }

    // Seeds d(loss)/d(loss) = 1 and replays the op record in reverse.
    void backward(const Tensor& loss) {
        if (loss.size() != 1) throw ContractError("backward: loss must be scalar");
        grad(loss)[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
    }

    std::size_t op_count() const { return ops_.size(); }

    void clear() {
        ops_.clear();
        grads_.clear();
    }

    static Tape*& current_slot() {
        thread_local Tape* current = nullptr;
        return current;
    }
    static Tape* current() { return current_slot(); }

private:
    std::vector<std::function<void(Tape&)>> ops_;
    std::unordered_map<const TensorData*, std::vector<double>> grads_;
};

// Suspends recording for the current thread (eval-mode forward passes).
class NoTapeScope {
public:
    NoTapeScope() : prev_(Tape::current_slot()) { Tape::current_slot() = nullptr; }
    ~NoTapeScope() { Tape::current_slot() = prev_; }
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape* prev_;
};

// Installs a tape as the recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(Tape::current_slot()) { Tape::current_slot() = &t; }
    ~TapeScope() { Tape::current_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (Tape::current() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void mark_and_record(Tensor& out, bool rec, std::function<void(Tape&)> op) {
    out.set_requires_grad(rec);
    if (rec) Tape::current()->record(std::move(op));
}

}  // namespace detail

// ----------------------------- elementwise ops -----------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()));
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    bool rec = detail::should_record({&a, &b});
    detail::mark_and_record(out, rec, [a, b, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        if (a.requires_grad()) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        }
        if (b.requires_grad()) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    bool rec = detail::should_record({&a, &b});
    detail::mark_and_record(out, rec, [a, b, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        if (a.requires_grad()) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
        }
        if (b.requires_grad()) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= (*g)[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    bool rec = detail::should_record({&a, &b});
    detail::mark_and_record(out, rec, [a, b, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        if (a.requires_grad()) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * a.data()[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out, s](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * s;
    });
    return out;
}

// mat[i,:] + row for every i.
inline Tensor add_row_broadcast(const Tensor& mat, const Tensor& row) {
    if (row.rows() != 1 || row.cols() != mat.cols()) {
        throw DimensionError("add_row_broadcast: row must be 1 x cols(mat)");
    }
    Tensor out = Tensor::zeros(mat.rows(), mat.cols());
    const int c = mat.cols();
    for (int i = 0; i < mat.rows(); ++i) {
        for (int j = 0; j < c; ++j) out.at(i, j) = mat.at(i, j) + row.at(0, j);
    }
    bool rec = detail::should_record({&mat, &row});
    detail::mark_and_record(out, rec, [mat, row, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        const int c = mat.cols();
        if (mat.requires_grad()) {
            auto& gm = t.grad(mat);
            for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += (*g)[i];
        }
        if (row.requires_grad()) {
            auto& gr = t.grad(row);
            for (int i = 0; i < mat.rows(); ++i) {
                for (int j = 0; j < c; ++j) gr[static_cast<std::size_t>(j)] += (*g)[static_cast<std::size_t>(i) * c + j];
            }
        }
    });
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            if (a.data()[i] > 0.0) ga[i] += (*g)[i];
        }
    });
    return out;
}

// Identity forward, blocks gradient flow.
inline Tensor stop_gradient(const Tensor& a) {
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    out.values() = a.values();
    return out;
}

// ----------------------------- matmul & friends -----------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions disagree: " + std::to_string(a.cols()) + " vs " +
                             std::to_string(b.rows()));
    }
    Tensor out = Tensor::zeros(a.rows(), b.cols());
    {
        detail::MapC ma(a.data(), a.rows(), a.cols());
        detail::MapC mb(b.data(), b.rows(), b.cols());
        detail::MapM mo(out.data(), out.rows(), out.cols());
        mo.noalias() = ma * mb;
    }
    bool rec = detail::should_record({&a, &b});
    detail::mark_and_record(out, rec, [a, b, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        detail::MapC mg(g->data(), out.rows(), out.cols());
        if (a.requires_grad()) {
            auto& ga = t.grad(a);
            detail::MapM mga(ga.data(), a.rows(), a.cols());
            detail::MapC mb(b.data(), b.rows(), b.cols());
            mga.noalias() += mg * mb.transpose();
        }
        if (b.requires_grad()) {
            auto& gb = t.grad(b);
            detail::MapM mgb(gb.data(), b.rows(), b.cols());
            detail::MapC ma(a.data(), a.rows(), a.cols());
            mgb.noalias() += ma.transpose() * mg;
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    Tensor out = Tensor::zeros(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    }
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (int i = 0; i < a.rows(); ++i) {
            for (int j = 0; j < a.cols(); ++j) {
                ga[static_cast<std::size_t>(i) * a.cols() + j] += (*g)[static_cast<std::size_t>(j) * a.rows() + i];
            }
        }
    });
    return out;
}

// ----------------------------- reductions -----------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s);
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[0];
    });
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean_all: empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = Tensor::scalar(s * inv);
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out, inv](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[0] * inv;
    });
    return out;
}

// ----------------------------- slicing / concatenation -----------------------------

inline Tensor slice_rows(const Tensor& a, int r0, int n) {
    if (r0 < 0 || n < 0 || r0 + n > a.rows()) throw IndexError("slice_rows: range out of bounds");
    Tensor out = Tensor::zeros(n, a.cols());
    std::copy_n(a.data() + static_cast<std::size_t>(r0) * a.cols(), static_cast<std::size_t>(n) * a.cols(),
                out.data());
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out, r0, n](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        const std::size_t c = static_cast<std::size_t>(a.cols());
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i) {
            ga[static_cast<std::size_t>(r0) * c + i] += (*g)[i];
        }
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int n) {
    if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw IndexError("slice_cols: range out of bounds");
    Tensor out = Tensor::zeros(a.rows(), n);
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, c0 + j);
    }
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out, c0, n](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        for (int i = 0; i < a.rows(); ++i) {
            for (int j = 0; j < n; ++j) {
                ga[static_cast<std::size_t>(i) * a.cols() + c0 + j] += (*g)[static_cast<std::size_t>(i) * n + j];
            }
        }
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int cols = parts.front().cols();
    int rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Tensor out = Tensor::zeros(rows, cols);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data(), p.size(), out.data() + off);
        off += p.size();
    }
    bool rec = false;
    for (const auto& p : parts) rec = rec || detail::should_record({&p});
    detail::mark_and_record(out, rec, [parts, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                auto& gp = t.grad(p);
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += (*g)[off + i];
            }
            off += p.size();
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const int rows = parts.front().rows();
    int cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Tensor out = Tensor::zeros(rows, cols);
    int coff = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < p.cols(); ++j) out.at(i, coff + j) = p.at(i, j);
        }
        coff += p.cols();
    }
    bool rec = false;
    for (const auto& p : parts) rec = rec || detail::should_record({&p});
    detail::mark_and_record(out, rec, [parts, out, rows](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        int coff = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) {
                auto& gp = t.grad(p);
                for (int i = 0; i < rows; ++i) {
                    for (int j = 0; j < p.cols(); ++j) {
                        gp[static_cast<std::size_t>(i) * p.cols() + j] +=
                            (*g)[static_cast<std::size_t>(i) * out.cols() + coff + j];
                    }
                }
            }
            coff += p.cols();
        }
    });
    return out;
}

// ----------------------------- softmax family -----------------------------

inline Tensor softmax_rows(const Tensor& a) {
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    const int c = a.cols();
    for (int i = 0; i < a.rows(); ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < c; ++j) out.at(i, j) *= inv;
    }
    bool rec = detail::should_record({&a});
    detail::mark_and_record(out, rec, [a, out](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& ga = t.grad(a);
        const int c = a.cols();
        for (int i = 0; i < a.rows(); ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += (*g)[base + j] * out.data()[base + j];
            for (int j = 0; j < c; ++j) {
                ga[base + j] += out.data()[base + j] * ((*g)[base + j] - dot);
            }
        }
    });
    return out;
}

// Mean over rows of -log softmax(logits)[target]. Targets index into columns.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    const int n = logits.rows();
    const int v = logits.cols();
    if (static_cast<int>(targets.size()) != n) {
        throw DimensionError("softmax_cross_entropy: one target per row required");
    }
    for (int t : targets) {
        if (t < 0 || t >= v) throw IndexError("softmax_cross_entropy: target index " + std::to_string(t) + " out of range [0," + std::to_string(v) + ")");
    }
    // Cache the probabilities for the backward pass.
    std::vector<double> probs(static_cast<std::size_t>(n) * v);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(logits.at(i, j) - mx);
            probs[static_cast<std::size_t>(i) * v + j] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < v; ++j) probs[static_cast<std::size_t>(i) * v + j] *= inv;
        total += -(logits.at(i, targets[static_cast<std::size_t>(i)]) - mx - std::log(z));
    }
    Tensor out = Tensor::scalar(total / n);
    bool rec = detail::should_record({&logits});
    detail::mark_and_record(out, rec, [logits, out, targets, probs = std::move(probs), n, v](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& gl = t.grad(logits);
        const double s = (*g)[0] / n;
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * v;
            for (int j = 0; j < v; ++j) gl[base + j] += s * probs[base + j];
            gl[base + targets[static_cast<std::size_t>(i)]] -= s;
        }
    });
    return out;
}

// ----------------------------- normalization -----------------------------

// Row-wise layer normalization with learnable affine (gain, bias are 1 x d).
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6) {
    if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
        throw DimensionError("layer_norm_rows: gain/bias must be 1 x cols(x)");
    }
    const int n = x.rows();
    const int d = x.cols();
    Tensor out = Tensor::zeros(n, d);
    std::vector<double> xhat(static_cast<std::size_t>(n) * d);
    std::vector<double> inv_std(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x.at(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mu;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            const double h = (x.at(i, j) - mu) * is;
            xhat[static_cast<std::size_t>(i) * d + j] = h;
            out.at(i, j) = h * gain.at(0, j) + bias.at(0, j);
        }
    }
    bool rec = detail::should_record({&x, &gain, &bias});
    detail::mark_and_record(out, rec,
                            [x, gain, bias, out, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * d;
            if (gain.requires_grad()) {
                auto& gg = t.grad(gain);
                for (int j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += (*g)[base + j] * xhat[base + j];
            }
            if (bias.requires_grad()) {
                auto& gb = t.grad(bias);
                for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += (*g)[base + j];
            }
            if (x.requires_grad()) {
                auto& gx = t.grad(x);
                double m1 = 0.0;  // mean of dxhat
                double m2 = 0.0;  // mean of dxhat * xhat
                for (int j = 0; j < d; ++j) {
                    const double dxh = (*g)[base + j] * gain.at(0, j);
                    m1 += dxh;
                    m2 += dxh * xhat[base + j];
                }
                m1 /= d;
                m2 /= d;
                const double is = inv_std[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j) {
                    const double dxh = (*g)[base + j] * gain.at(0, j);
                    gx[base + j] += is * (dxh - m1 - xhat[base + j] * m2);
                }
            }
        }
    });
    return out;
}

// Rows scaled to unit L2 norm. Zero rows are rejected.
inline Tensor l2_normalize_rows(const Tensor& x) {
    const int n = x.rows();
    const int d = x.cols();
    Tensor out = Tensor::zeros(n, d);
    std::vector<double> norms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
        const double nrm = std::sqrt(s);
        if (nrm == 0.0) throw DegenerateInputError("l2_normalize_rows: zero-norm row " + std::to_string(i));
        norms[static_cast<std::size_t>(i)] = nrm;
        for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) / nrm;
    }
    bool rec = detail::should_record({&x});
    detail::mark_and_record(out, rec, [x, out, norms = std::move(norms), n, d](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& gx = t.grad(x);
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += (*g)[base + j] * out.data()[base + j];
            const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) {
                gx[base + j] += inv * ((*g)[base + j] - out.data()[base + j] * dot);
            }
        }
    });
    return out;
}

// ----------------------------- cosine similarity -----------------------------

// a . b / (|a| |b|) for two tensors with identical shape treated as flat vectors.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "cosine_similarity");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a.data()[i] * b.data()[i];
        na2 += a.data()[i] * a.data()[i];
        nb2 += b.data()[i] * b.data()[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm input");
    const double na = std::sqrt(na2);
    const double nb = std::sqrt(nb2);
    const double cosv = dot / (na * nb);
    Tensor out = Tensor::scalar(cosv);
    bool rec = detail::should_record({&a, &b});
    detail::mark_and_record(out, rec, [a, b, out, na, nb, cosv](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        const double go = (*g)[0];
        if (a.requires_grad()) {
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] += go * (b.data()[i] / (na * nb) - cosv * a.data()[i] / (na * na));
            }
        }
        if (b.requires_grad()) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i) {
                gb[i] += go * (a.data()[i] / (na * nb) - cosv * b.data()[i] / (nb * nb));
            }
        }
    });
    return out;
}

// ----------------------------- dropout -----------------------------

// Inverted dropout: train-time scaling by 1/(1-rate), eval is the identity.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    const double keep = 1.0 - rate;
    const double inv_keep = 1.0 / keep;
    std::vector<double> mask(x.size());
    Tensor out = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        mask[i] = rng.uniform() < keep ? inv_keep : 0.0;
        out.data()[i] = x.data()[i] * mask[i];
    }
    bool rec = detail::should_record({&x});
    detail::mark_and_record(out, rec, [x, out, mask = std::move(mask)](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * mask[i];
    });
    return out;
}

// ----------------------------- embedding lookup -----------------------------

// Gathers table rows; backward scatter-adds into the table rows.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& indices) {
    const int d = table.cols();
    const int n = static_cast<int>(indices.size());
    for (int idx : indices) {
        if (idx < 0 || idx >= table.rows()) {
            throw IndexError("embedding_lookup: row " + std::to_string(idx) + " out of range [0," +
                             std::to_string(table.rows()) + ")");
        }
    }
    Tensor out = Tensor::zeros(n, d);
    for (int i = 0; i < n; ++i) {
        std::copy_n(table.data() + static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * d, d,
                    out.data() + static_cast<std::size_t>(i) * d);
    }
    bool rec = detail::should_record({&table});
    detail::mark_and_record(out, rec, [table, out, indices, n, d](Tape& t) {
        const auto* g = t.grad_if(out);
        if (!g) return;
        auto& gt = t.grad(table);
        for (int i = 0; i < n; ++i) {
            const std::size_t src = static_cast<std::size_t>(i) * d;
            const std::size_t dst = static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * d;
            for (int j = 0; j < d; ++j) gt[dst + j] += (*g)[src + j];
        }
    });
    return out;
}

}  // namespace liger
