#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Reverse-mode automatic differentiation on a per-forward-pass tape.
//
// Every forward computation in the library is written once against this tape;
// inference simply never calls backward(). Parameters are bound lazily with
// Tape::param and deduplicated by address, so a weight used in several places
// accumulates one gradient.
// ---------------------------------------------------------------------------

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool has_grad = false;
        bool needs_grad = false;
        std::function<void(Tape&)> backward;  // empty for leaves and constants
    };

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

    Var<T> constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    /// Bind a parameter tensor. Repeated calls with the same tensor return the
    /// same node so gradients accumulate across uses.
    Var<T> param(const Tensor<T>& t) {
        auto it = param_ids_.find(&t);
        if (it != param_ids_.end()) return {this, it->second};
        Var<T> v = push(t, true, nullptr);
        param_ids_.emplace(&t, v.id);
        return v;
    }

    /// Leaf input we want gradients for (finite-difference checks mostly).
    Var<T> input(const Tensor<T>& t) { return param(t); }

    const Tensor<T>& value(Var<T> v) const { return nodes_[size_t(v.id)].value; }
    const std::vector<int64_t>& shape(Var<T> v) const { return value(v).shape(); }

    /// Gradient of the last backward() w.r.t. a bound parameter, or nullptr if
    /// the parameter never received one.
    const Tensor<T>* grad_of(const Tensor<T>& t) const {
        auto it = param_ids_.find(&t);
        if (it == param_ids_.end()) return nullptr;
        const Node& n = nodes_[size_t(it->second)];
        return n.has_grad ? &n.grad : nullptr;
    }

    const Tensor<T>& grad(Var<T> v) const { return nodes_[size_t(v.id)].grad; }
    bool has_grad(Var<T> v) const { return nodes_[size_t(v.id)].has_grad; }

    /// Accumulation buffer for a node's gradient, or nullptr when the node does
    /// not require gradients. Backward lambdas add into the returned tensor.
    Tensor<T>* grad_acc(int id) {
        Node& n = nodes_[size_t(id)];
        if (!n.needs_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.has_grad = true;
        }
        return &n.grad;
    }

    void backward(Var<T> root) {
        PRISM_CHECK_VALUE(root.tape == this, "backward: var from another tape");
        PRISM_CHECK_SHAPE(value(root).numel() == 1, "backward: root must be scalar");
        Node& rn = nodes_[size_t(root.id)];
        rn.grad = Tensor<T>::ones(rn.value.shape());
        rn.has_grad = true;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.has_grad && n.needs_grad && n.backward) n.backward(*this);
        }
    }

    Var<T> make(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                std::function<void(Tape&)> backward) {
        bool needs = false;
        for (const Var<T>& v : inputs) {
            PRISM_CHECK_VALUE(v.tape == this, "op mixes tapes");
            needs = needs || nodes_[size_t(v.id)].needs_grad;
        }
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    /// Variant for ops with a runtime-sized input list.
    Var<T> make_multi(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward) {
        return push(std::move(value), needs_grad, needs_grad ? std::move(backward) : nullptr);
    }

    bool wants_grad(Var<T> v) const { return nodes_[size_t(v.id)].needs_grad; }

    size_t size() const { return nodes_.size(); }

private:
    Var<T> push(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return {this, int(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor<T>*, int> param_ids_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Each returns a new node whose backward lambda accumulates
// into its inputs via Tape::grad_acc.
// ---------------------------------------------------------------------------

namespace ops_detail {

template <typename T>
const Tensor<T>& val(Var<T> v) {
    return v.tape->value(v);
}

}  // namespace ops_detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    using ops_detail::val;
    PRISM_CHECK_SHAPE(val(a).same_shape(val(b)), "add: shape mismatch");
    Tensor<T> out = val(a);
    out.add_(val(b));
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia)) ga->add_(g);
        if (auto* gb = t.grad_acc(ib)) gb->add_(g);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    using ops_detail::val;
    PRISM_CHECK_SHAPE(val(a).same_shape(val(b)), "sub: shape mismatch");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= val(b)[i];
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia)) ga->add_(g);
        if (auto* gb = t.grad_acc(ib))
            for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    using ops_detail::val;
    PRISM_CHECK_SHAPE(val(a).same_shape(val(b)), "mul: shape mismatch");
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= val(b)[i];
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>&va = t.value({&t, ia});
        const Tensor<T>& vb = t.value({&t, ib});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * vb[i];
        if (auto* gb = t.grad_acc(ib))
            for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * va[i];
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    out.scale_(s);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        if (auto* ga = t.grad_acc(ia)) ga->add_(t.grad({&t, io}));
    });
}

template <typename T>
Var<T> neg(Var<T> a) {
    return scale(a, T(-1));
}

template <typename T>
Var<T> reshape(Var<T> a, std::vector<int64_t> shape) {
    using ops_detail::val;
    Tensor<T> out = val(a).reshaped(shape);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0),
                      "matmul: incompatible shapes " + A.shape_str() + " " + B.shape_str());
    const int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
    Tensor<T> out({M, N});
    MatMap<T>(out.data(), M, N).noalias() =
        ConstMatMap<T>(A.data(), M, K) * ConstMatMap<T>(B.data(), K, N);
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        ConstMatMap<T> G(g.data(), M, N);
        ConstMatMap<T> Av(t.value({&t, ia}).data(), M, K);
        ConstMatMap<T> Bv(t.value({&t, ib}).data(), K, N);
        if (auto* ga = t.grad_acc(ia)) MatMap<T>(ga->data(), M, K).noalias() += G * Bv.transpose();
        if (auto* gb = t.grad_acc(ib)) MatMap<T>(gb->data(), K, N).noalias() += Av.transpose() * G;
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2, "transpose: rank-2 only");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out({N, M});
    MatMap<T>(out.data(), N, M) = ConstMatMap<T>(A.data(), M, N).transpose();
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            MatMap<T>(ga->data(), M, N) += ConstMatMap<T>(g.data(), N, M).transpose();
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], T(0));
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& v = t.value({&t, ia});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (v[i] > T(0)) (*ga)[i] += g[i];
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& s = t.value({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * s[i] * (T(1) - s[i]);
    });
}

/// Natural log; input must be strictly positive.
template <typename T>
Var<T> log_op(Var<T> a) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& v = t.value({&t, ia});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] / v[i];
    });
}

/// Elementwise max(x, lo). Gradient is zero where the clamp is active.
template <typename T>
Var<T> clamp_min(Var<T> a, T lo) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], lo);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& v = t.value({&t, ia});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (v[i] > lo) (*ga)[i] += g[i];
    });
}

/// sqrt with a hard zero gradient at 0 so exact hits stay exact.
template <typename T>
Var<T> sqrt_op(Var<T> a) {
    using ops_detail::val;
    Tensor<T> out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(std::max(out[i], T(0)));
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& r = t.value({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < g.numel(); ++i)
                if (r[i] > T(0)) (*ga)[i] += g[i] / (T(2) * r[i]);
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    using ops_detail::val;
    Tensor<T> out = Tensor<T>::scalar(val(a).sum());
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const T g = t.grad({&t, io})[0];
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const int64_t n = ops_detail::val(a).numel();
    PRISM_CHECK_SHAPE(n > 0, "mean of empty tensor");
    return scale(sum(a), T(1) / T(n));
}

/// Row sums of a [M x N] matrix -> [M].
template <typename T>
Var<T> row_sum(Var<T> a) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2, "row_sum: rank-2 only");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out({M});
    for (int64_t i = 0; i < M; ++i) {
        T s = 0;
        for (int64_t j = 0; j < N; ++j) s += A.at(i, j);
        out[i] = s;
    }
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j) ga->at(i, j) += g[i];
    });
}

/// Broadcast-add a row vector b[N] to every row of A[M x N].
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.ndim() == 2 && B.numel() == A.dim(1), "add_rowvec: shape mismatch");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out = A;
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) out.at(i, j) += B[j];
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia)) ga->add_(g);
        if (auto* gb = t.grad_acc(ib))
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j) (*gb)[j] += g.at(i, j);
    });
}

/// Scale row i of A[M x N] by v[i].
template <typename T>
Var<T> mul_colvec(Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.ndim() == 2 && B.numel() == A.dim(0), "mul_colvec: shape mismatch");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out = A;
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) out.at(i, j) *= B[i];
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& Av = t.value({&t, ia});
        const Tensor<T>& Bv = t.value({&t, ib});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j) ga->at(i, j) += g.at(i, j) * Bv[i];
        if (auto* gb = t.grad_acc(ib))
            for (int64_t i = 0; i < M; ++i) {
                T s = 0;
                for (int64_t j = 0; j < N; ++j) s += g.at(i, j) * Av.at(i, j);
                (*gb)[i] += s;
            }
    });
}

/// Scale column j of A[M x N] by v[j].
template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.ndim() == 2 && B.numel() == A.dim(1), "mul_rowvec: shape mismatch");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out = A;
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < N; ++j) out.at(i, j) *= B[j];
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& Av = t.value({&t, ia});
        const Tensor<T>& Bv = t.value({&t, ib});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < N; ++j) ga->at(i, j) += g.at(i, j) * Bv[j];
        if (auto* gb = t.grad_acc(ib))
            for (int64_t j = 0; j < N; ++j) {
                T s = 0;
                for (int64_t i = 0; i < M; ++i) s += g.at(i, j) * Av.at(i, j);
                (*gb)[j] += s;
            }
    });
}

/// Row-wise softmax with an optional binary key mask over columns. Masked
/// columns are excluded from the normalization (their output is exactly 0).
/// A fully masked row yields an all-zero row.
template <typename T>
Var<T> masked_softmax_rows(Var<T> a, const Tensor<T>& mask) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2, "softmax: rank-2 only");
    const int64_t M = A.dim(0), N = A.dim(1);
    PRISM_CHECK_SHAPE(mask.numel() == 0 || mask.numel() == N, "softmax: bad mask length");
    const bool use_mask = mask.numel() == N;
    auto keep = [&](int64_t j) { return !use_mask || mask[j] != T(0); };

    Tensor<T> out({M, N});
    for (int64_t i = 0; i < M; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < N; ++j)
            if (keep(j)) mx = std::max(mx, A.at(i, j));
        if (!std::isfinite(double(mx))) continue;  // fully masked row stays zero
        T z = 0;
        for (int64_t j = 0; j < N; ++j)
            if (keep(j)) {
                const T e = std::exp(A.at(i, j) - mx);
                out.at(i, j) = e;
                z += e;
            }
        for (int64_t j = 0; j < N; ++j)
            if (keep(j)) out.at(i, j) /= z;
    }
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& p = t.value({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i) {
                T dot = 0;
                for (int64_t j = 0; j < N; ++j) dot += g.at(i, j) * p.at(i, j);
                for (int64_t j = 0; j < N; ++j)
                    ga->at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
            }
    });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
    return masked_softmax_rows(a, Tensor<T>());
}

/// Select rows of X[M x C] by index -> [K x C]. Backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int64_t> idx) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2, "gather_rows: rank-2 only");
    const int64_t M = A.dim(0), C = A.dim(1), K = int64_t(idx.size());
    for (int64_t i : idx) PRISM_CHECK_SHAPE(i >= 0 && i < M, "gather_rows: index out of range");
    Tensor<T> out({K, C});
    for (int64_t k = 0; k < K; ++k)
        for (int64_t c = 0; c < C; ++c) out.at(k, c) = A.at(idx[size_t(k)], c);
    auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t k = 0; k < K; ++k)
                for (int64_t c = 0; c < C; ++c) ga->at((*ix)[size_t(k)], c) += g.at(k, c);
    });
}

/// Concatenate rank-2 tensors along columns.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    PRISM_CHECK_SHAPE(!parts.empty(), "concat_cols: empty input");
    Tape<T>* tape = parts[0].tape;
    const int64_t M = tape->value(parts[0]).dim(0);
    int64_t N = 0;
    for (const auto& p : parts) {
        const Tensor<T>& v = p.tape->value(p);
        PRISM_CHECK_SHAPE(v.ndim() == 2 && v.dim(0) == M, "concat_cols: row mismatch");
        N += v.dim(1);
    }
    Tensor<T> out({M, N});
    int64_t off = 0;
    for (const auto& p : parts) {
        const Tensor<T>& v = tape->value(p);
        for (int64_t i = 0; i < M; ++i)
            for (int64_t j = 0; j < v.dim(1); ++j) out.at(i, off + j) = v.at(i, j);
        off += v.dim(1);
    }
    std::vector<int> in_ids;
    std::vector<int64_t> widths;
    bool any = false;
    for (const auto& p : parts) {
        PRISM_CHECK_VALUE(p.tape == tape, "concat_cols: op mixes tapes");
        in_ids.push_back(p.id);
        widths.push_back(tape->value(p).dim(1));
        any = any || tape->wants_grad(p);
    }
    const int io = int(tape->size());
    auto ids = std::make_shared<std::vector<int>>(std::move(in_ids));
    auto ws = std::make_shared<std::vector<int64_t>>(std::move(widths));
    return tape->make_multi(std::move(out), any, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        int64_t o = 0;
        for (size_t k = 0; k < ids->size(); ++k) {
            const int64_t w = (*ws)[k];
            if (auto* ga = t.grad_acc((*ids)[k]))
                for (int64_t i = 0; i < M; ++i)
                    for (int64_t j = 0; j < w; ++j) ga->at(i, j) += g.at(i, o + j);
            o += w;
        }
    });
}

/// Columns [start, start+len) of A[M x N].
template <typename T>
Var<T> slice_cols(Var<T> a, int64_t start, int64_t len) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2 && start >= 0 && start + len <= A.dim(1),
                      "slice_cols: out of range");
    const int64_t M = A.dim(0);
    Tensor<T> out({M, len});
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < len; ++j) out.at(i, j) = A.at(i, start + j);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i)
                for (int64_t j = 0; j < len; ++j) ga->at(i, start + j) += g.at(i, j);
    });
}

/// Per-row dot product of equal-shaped [K x C] matrices -> [K].
template <typename T>
Var<T> rows_dot(Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.same_shape(B) && A.ndim() == 2, "rows_dot: shape mismatch");
    const int64_t K = A.dim(0), C = A.dim(1);
    Tensor<T> out({K});
    for (int64_t k = 0; k < K; ++k) {
        T s = 0;
        for (int64_t c = 0; c < C; ++c) s += A.at(k, c) * B.at(k, c);
        out[k] = s;
    }
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& Av = t.value({&t, ia});
        const Tensor<T>& Bv = t.value({&t, ib});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t k = 0; k < K; ++k)
                for (int64_t c = 0; c < C; ++c) ga->at(k, c) += g[k] * Bv.at(k, c);
        if (auto* gb = t.grad_acc(ib))
            for (int64_t k = 0; k < K; ++k)
                for (int64_t c = 0; c < C; ++c) gb->at(k, c) += g[k] * Av.at(k, c);
    });
}

/// Rows of A where mask[i] != 0, rows of B elsewhere. The copy is bitwise.
template <typename T>
Var<T> where_rows(const Tensor<T>& mask, Var<T> a, Var<T> b) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    PRISM_CHECK_SHAPE(A.same_shape(B) && A.ndim() == 2 && mask.numel() == A.dim(0),
                      "where_rows: shape mismatch");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out = B;
    for (int64_t i = 0; i < M; ++i)
        if (mask[i] != T(0))
            for (int64_t j = 0; j < N; ++j) out.at(i, j) = A.at(i, j);
    auto mk = std::make_shared<Tensor<T>>(mask);
    const int ia = a.id, ib = b.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        Tensor<T>* ga = t.grad_acc(ia);
        Tensor<T>* gb = t.grad_acc(ib);
        for (int64_t i = 0; i < M; ++i) {
            const bool from_a = (*mk)[i] != T(0);
            if (from_a && ga)
                for (int64_t j = 0; j < N; ++j) ga->at(i, j) += g.at(i, j);
            if (!from_a && gb)
                for (int64_t j = 0; j < N; ++j) gb->at(i, j) += g.at(i, j);
        }
    });
}

/// L2-normalize each row; rows shorter than eps are scaled by 1/eps.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a, T eps = T(1e-12)) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 2, "l2_normalize_rows: rank-2 only");
    const int64_t M = A.dim(0), N = A.dim(1);
    Tensor<T> out({M, N});
    std::vector<T> norms(static_cast<size_t>(M));
    for (int64_t i = 0; i < M; ++i) {
        T s = 0;
        for (int64_t j = 0; j < N; ++j) s += A.at(i, j) * A.at(i, j);
        const T nrm = std::max(std::sqrt(s), eps);
        norms[size_t(i)] = nrm;
        for (int64_t j = 0; j < N; ++j) out.at(i, j) = A.at(i, j) / nrm;
    }
    auto ns = std::make_shared<std::vector<T>>(std::move(norms));
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& y = t.value({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t i = 0; i < M; ++i) {
                T dot = 0;
                for (int64_t j = 0; j < N; ++j) dot += g.at(i, j) * y.at(i, j);
                const T inv = T(1) / (*ns)[size_t(i)];
                for (int64_t j = 0; j < N; ++j)
                    ga->at(i, j) += (g.at(i, j) - y.at(i, j) * dot) * inv;
            }
    });
}

/// Layer normalization across each row of X[M x N] with learned gamma/beta.
template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    using ops_detail::val;
    const Tensor<T>& X = val(x);
    PRISM_CHECK_SHAPE(X.ndim() == 2, "layer_norm: rank-2 only");
    const int64_t M = X.dim(0), N = X.dim(1);
    PRISM_CHECK_SHAPE(val(gamma).numel() == N && val(beta).numel() == N,
                      "layer_norm: gamma/beta size");
    Tensor<T> out({M, N});
    Tensor<T> xhat({M, N});
    std::vector<T> inv_std(static_cast<size_t>(M));
    const Tensor<T>& G = val(gamma);
    const Tensor<T>& B = val(beta);
    for (int64_t i = 0; i < M; ++i) {
        T mu = 0;
        for (int64_t j = 0; j < N; ++j) mu += X.at(i, j);
        mu /= T(N);
        T var = 0;
        for (int64_t j = 0; j < N; ++j) {
            const T d = X.at(i, j) - mu;
            var += d * d;
        }
        var /= T(N);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[size_t(i)] = is;
        for (int64_t j = 0; j < N; ++j) {
            const T h = (X.at(i, j) - mu) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = G[j] * h + B[j];
        }
    }
    auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    const int ix = x.id, ig = gamma.id, ib = beta.id, io = int(x.tape->size());
    return x.tape->make(std::move(out), {x, gamma, beta}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& Gv = t.value({&t, ig});
        if (auto* gg = t.grad_acc(ig))
            for (int64_t j = 0; j < N; ++j) {
                T s = 0;
                for (int64_t i = 0; i < M; ++i) s += g.at(i, j) * xh->at(i, j);
                (*gg)[j] += s;
            }
        if (auto* gb = t.grad_acc(ib))
            for (int64_t j = 0; j < N; ++j) {
                T s = 0;
                for (int64_t i = 0; i < M; ++i) s += g.at(i, j);
                (*gb)[j] += s;
            }
        if (auto* gx = t.grad_acc(ix))
            for (int64_t i = 0; i < M; ++i) {
                T m1 = 0, m2 = 0;
                for (int64_t j = 0; j < N; ++j) {
                    const T gy = g.at(i, j) * Gv[j];
                    m1 += gy;
                    m2 += gy * xh->at(i, j);
                }
                m1 /= T(N);
                m2 /= T(N);
                const T is = (*istd)[size_t(i)];
                for (int64_t j = 0; j < N; ++j) {
                    const T gy = g.at(i, j) * Gv[j];
                    gx->at(i, j) += (gy - m1 - xh->at(i, j) * m2) * is;
                }
            }
    });
}

/// Group normalization over [C x H x W]: channels are split into `groups`
/// groups and each group is normalized over (C/groups * H * W) elements.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
    using ops_detail::val;
    const Tensor<T>& X = val(x);
    PRISM_CHECK_SHAPE(X.ndim() == 3, "group_norm: expects [C x H x W]");
    const int64_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
    PRISM_CHECK_SHAPE(groups > 0 && C % groups == 0, "group_norm: C not divisible by groups");
    PRISM_CHECK_SHAPE(val(gamma).numel() == C && val(beta).numel() == C,
                      "group_norm: gamma/beta size");
    const int64_t gc = C / groups;          // channels per group
    const int64_t gsz = gc * H * W;         // elements per group
    const int64_t hw = H * W;

    Tensor<T> out({C, H, W});
    Tensor<T> xhat({C, H, W});
    std::vector<T> inv_std(static_cast<size_t>(groups));
    const Tensor<T>& G = val(gamma);
    const Tensor<T>& B = val(beta);
    for (int g = 0; g < groups; ++g) {
        const int64_t c0 = g * gc;
        T mu = 0;
        for (int64_t c = c0; c < c0 + gc; ++c)
            for (int64_t p = 0; p < hw; ++p) mu += X[c * hw + p];
        mu /= T(gsz);
        T var = 0;
        for (int64_t c = c0; c < c0 + gc; ++c)
            for (int64_t p = 0; p < hw; ++p) {
                const T d = X[c * hw + p] - mu;
                var += d * d;
            }
        var /= T(gsz);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[size_t(g)] = is;
        for (int64_t c = c0; c < c0 + gc; ++c)
            for (int64_t p = 0; p < hw; ++p) {
                const T h = (X[c * hw + p] - mu) * is;
                xhat[c * hw + p] = h;
                out[c * hw + p] = G[c] * h + B[c];
            }
    }
    auto xh = std::make_shared<Tensor<T>>(std::move(xhat));
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    const int ix = x.id, ig = gamma.id, ib = beta.id, io = int(x.tape->size());
    const int ngroups = groups;
    return x.tape->make(std::move(out), {x, gamma, beta}, [=](Tape<T>& t) {
        const Tensor<T>& gr = t.grad({&t, io});
        const Tensor<T>& Gv = t.value({&t, ig});
        if (auto* gg = t.grad_acc(ig))
            for (int64_t c = 0; c < C; ++c) {
                T s = 0;
                for (int64_t p = 0; p < hw; ++p) s += gr[c * hw + p] * (*xh)[c * hw + p];
                (*gg)[c] += s;
            }
        if (auto* gb = t.grad_acc(ib))
            for (int64_t c = 0; c < C; ++c) {
                T s = 0;
                for (int64_t p = 0; p < hw; ++p) s += gr[c * hw + p];
                (*gb)[c] += s;
            }
        if (auto* gx = t.grad_acc(ix))
            for (int g = 0; g < ngroups; ++g) {
                const int64_t c0 = g * gc;
                T m1 = 0, m2 = 0;
                for (int64_t c = c0; c < c0 + gc; ++c)
                    for (int64_t p = 0; p < hw; ++p) {
                        const T gy = gr[c * hw + p] * Gv[c];
                        m1 += gy;
                        m2 += gy * (*xh)[c * hw + p];
                    }
                m1 /= T(gsz);
                m2 /= T(gsz);
                const T is = (*istd)[size_t(g)];
                for (int64_t c = c0; c < c0 + gc; ++c)
                    for (int64_t p = 0; p < hw; ++p) {
                        const T gy = gr[c * hw + p] * Gv[c];
                        (*gx)[c * hw + p] += (gy - m1 - (*xh)[c * hw + p] * m2) * is;
                    }
            }
    });
}

/// Nearest-neighbor 2x upsampling of [C x H x W].
template <typename T>
Var<T> upsample_nearest2x(Var<T> a) {
    using ops_detail::val;
    const Tensor<T>& A = val(a);
    PRISM_CHECK_SHAPE(A.ndim() == 3, "upsample: expects [C x H x W]");
    const int64_t C = A.dim(0), H = A.dim(1), W = A.dim(2);
    Tensor<T> out({C, 2 * H, 2 * W});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < 2 * H; ++y)
            for (int64_t x = 0; x < 2 * W; ++x) out.at(c, y, x) = A.at(c, y / 2, x / 2);
    const int ia = a.id, io = int(a.tape->size());
    return a.tape->make(std::move(out), {a}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        if (auto* ga = t.grad_acc(ia))
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < 2 * H; ++y)
                    for (int64_t x = 0; x < 2 * W; ++x) ga->at(c, y / 2, x / 2) += g.at(c, y, x);
    });
}

/// Rotary position encoding. feats [N x d] (d even) is rotated in 2-D blocks:
/// block k of row i turns by theta = -(freqs(k,0)*coords(i,0) +
/// freqs(k,1)*coords(i,1)). With this sign, dot products of rotated queries
/// and keys depend on freqs . (query_pos - key_pos). Gradients flow to both
/// the features and the frequency table; coords are constants.
template <typename T>
Var<T> rope_rotate(Var<T> feats, Var<T> freqs, const Tensor<T>& coords) {
    using ops_detail::val;
    const Tensor<T>& F = val(feats);
    const Tensor<T>& B = val(freqs);
    PRISM_CHECK_SHAPE(F.ndim() == 2 && F.dim(1) % 2 == 0, "rope: feature dim must be even");
    const int64_t N = F.dim(0), D = F.dim(1), K = D / 2;
    PRISM_CHECK_SHAPE(B.ndim() == 2 && B.dim(0) == K && B.dim(1) == 2, "rope: freqs must be [d/2 x 2]");
    PRISM_CHECK_SHAPE(coords.ndim() == 2 && coords.dim(0) == N && coords.dim(1) == 2,
                      "rope: coords must be [N x 2]");
    Tensor<T> out({N, D});
    for (int64_t i = 0; i < N; ++i) {
        const T cx = coords.at(i, 0), cy = coords.at(i, 1);
        for (int64_t k = 0; k < K; ++k) {
            const T th = -(B.at(k, 0) * cx + B.at(k, 1) * cy);
            const T c = std::cos(th), s = std::sin(th);
            const T u = F.at(i, 2 * k), v = F.at(i, 2 * k + 1);
            out.at(i, 2 * k) = u * c - v * s;
            out.at(i, 2 * k + 1) = u * s + v * c;
        }
    }
    auto cds = std::make_shared<Tensor<T>>(coords);
    const int ifeat = feats.id, ifreq = freqs.id, io = int(feats.tape->size());
    return feats.tape->make(std::move(out), {feats, freqs}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        const Tensor<T>& y = t.value({&t, io});
        const Tensor<T>& Bv = t.value({&t, ifreq});
        Tensor<T>* gf = t.grad_acc(ifeat);
        Tensor<T>* gb = t.grad_acc(ifreq);
        for (int64_t i = 0; i < N; ++i) {
            const T cx = cds->at(i, 0), cy = cds->at(i, 1);
            for (int64_t k = 0; k < K; ++k) {
                const T th = -(Bv.at(k, 0) * cx + Bv.at(k, 1) * cy);
                const T c = std::cos(th), s = std::sin(th);
                const T gu = g.at(i, 2 * k), gv = g.at(i, 2 * k + 1);
                if (gf) {
                    gf->at(i, 2 * k) += gu * c + gv * s;
                    gf->at(i, 2 * k + 1) += -gu * s + gv * c;
                }
                if (gb) {
                    // d(out)/d(theta): (u', v') -> (-v', u')
                    const T dth = gu * (-y.at(i, 2 * k + 1)) + gv * y.at(i, 2 * k);
                    gb->at(k, 0) += dth * (-cx);
                    gb->at(k, 1) += dth * (-cy);
                }
            }
        }
    });
}

// -------------------------- convolution ------------------------------------

namespace conv_detail {

/// im2col for [Cin x H x W] -> [Cin*kh*kw, Ho*Wo].
template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, Tensor<T>& cols) {
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    T* col = cols.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int64_t ox = 0; ox < Wo; ++ox) *col++ = T(0);
                        continue;
                    }
                    const T* row = x.data() + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        const int64_t ix = ox * stride - pad + kx;
                        *col++ = (ix >= 0 && ix < W) ? row[ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const Tensor<T>& cols, int kh, int kw, int stride, int pad, Tensor<T>& gx) {
    const int64_t C = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    const T* col = cols.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx)
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        col += Wo;
                        continue;
                    }
                    T* row = gx.data() + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) row[ix] += *col;
                        ++col;
                    }
                }
}

}  // namespace conv_detail

/// 2-D convolution: x [Cin x H x W], w [Cout x Cin x kh x kw], b [Cout].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
    using ops_detail::val;
    const Tensor<T>& X = val(x);
    const Tensor<T>& Wt = val(w);
    PRISM_CHECK_SHAPE(X.ndim() == 3 && Wt.ndim() == 4 && X.dim(0) == Wt.dim(1),
                      "conv2d: shape mismatch");
    const int64_t Cin = X.dim(0), H = X.dim(1), W = X.dim(2);
    const int64_t Cout = Wt.dim(0), kh = Wt.dim(2), kw = Wt.dim(3);
    PRISM_CHECK_SHAPE(val(b).numel() == Cout, "conv2d: bias size");
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    PRISM_CHECK_SHAPE(Ho > 0 && Wo > 0, "conv2d: output would be empty");
    const int64_t K = Cin * kh * kw, L = Ho * Wo;

    Tensor<T> cols({K, L});
    conv_detail::im2col(X, int(kh), int(kw), stride, pad, cols);
    Tensor<T> out({Cout, Ho, Wo});
    MatMap<T>(out.data(), Cout, L).noalias() =
        ConstMatMap<T>(Wt.data(), Cout, K) * ConstMatMap<T>(cols.data(), K, L);
    const Tensor<T>& B = val(b);
    for (int64_t co = 0; co < Cout; ++co) {
        T* p = out.data() + co * L;
        for (int64_t i = 0; i < L; ++i) p[i] += B[co];
    }

    const int ix = x.id, iw = w.id, ib = b.id, io = int(x.tape->size());
    const int st = stride, pd = pad;
    return x.tape->make(std::move(out), {x, w, b}, [=](Tape<T>& t) {
        const Tensor<T>& g = t.grad({&t, io});
        ConstMatMap<T> G(g.data(), Cout, L);
        const Tensor<T>& Xv = t.value({&t, ix});
        const Tensor<T>& Wv = t.value({&t, iw});
        if (auto* gb = t.grad_acc(ib))
            for (int64_t co = 0; co < Cout; ++co) {
                T s = 0;
                const T* p = g.data() + co * L;
                for (int64_t i = 0; i < L; ++i) s += p[i];
                (*gb)[co] += s;
            }
        if (auto* gw = t.grad_acc(iw)) {
            Tensor<T> cols2({K, L});
            conv_detail::im2col(Xv, int(kh), int(kw), st, pd, cols2);
            MatMap<T>(gw->data(), Cout, K).noalias() +=
                G * ConstMatMap<T>(cols2.data(), K, L).transpose();
        }
        if (auto* gx = t.grad_acc(ix)) {
            Tensor<T> gcols({K, L});
            MatMap<T>(gcols.data(), K, L).noalias() =
                ConstMatMap<T>(Wv.data(), Cout, K).transpose() * G;
            conv_detail::col2im_acc(gcols, int(kh), int(kw), st, pd, *gx);
        }
    });
}

// operator sugar
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
    return add(a, b);
}
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
    return sub(a, b);
}
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
    return mul(a, b);
}

}  // namespace prism
