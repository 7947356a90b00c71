#pragma once

#include <string>
#include <utility>
#include <vector>

#include "prism/tape.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Small layer structs. Each owns its weight tensors and exposes
//   reg(store, prefix)      -- enumerate parameters (ordered, named)
//   forward(tape, ...)      -- build the op graph on a tape
// Parameter order in the store is the serialization order.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>*>> entries;

    void add(const std::string& name, Tensor<T>& t) {
        for (const auto& e : entries)
            PRISM_CHECK_VALUE(e.first != name, "duplicate parameter name: " + name);
        entries.emplace_back(name, &t);
    }

    Tensor<T>* find(const std::string& name) {
        for (auto& e : entries)
            if (e.first == name) return e.second;
        return nullptr;
    }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.second->numel();
        return n;
    }
};

template <typename T>
struct Linear {
    Tensor<T> w;  // [in x out]
    Tensor<T> b;  // [out]

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, T w_std = T(-1))
        : w(random_normal<T>({in, out}, rng,
                             w_std >= T(0) ? w_std : T(std::sqrt(2.0 / double(in))))),
          b(Tensor<T>::zeros({out})) {}

    static Linear zeros(int64_t in, int64_t out) {
        Linear l;
        l.w = Tensor<T>::zeros({in, out});
        l.b = Tensor<T>::zeros({out});
        return l;
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        return add_rowvec(matmul(x, tape.param(w)), tape.param(b));
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w;  // [out x in x k x k]
    Tensor<T> b;  // [out]
    int stride = 1;
    int pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t in, int64_t out, int kernel, int stride_, int pad_, Rng& rng)
        : w(random_normal<T>({out, in, kernel, kernel}, rng,
                             T(std::sqrt(2.0 / double(in * kernel * kernel))))),
          b(Tensor<T>::zeros({out})),
          stride(stride_),
          pad(pad_) {}

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        return conv2d(x, tape.param(w), tape.param(b), stride, pad);
    }
};

template <typename T>
struct GroupNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    int groups = 1;

    GroupNormLayer() = default;
    GroupNormLayer(int64_t channels, int groups_)
        : gamma(Tensor<T>::ones({channels})), beta(Tensor<T>::zeros({channels})), groups(groups_) {
        PRISM_CHECK_VALUE(channels % groups_ == 0, "group norm: channels % groups != 0");
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        ps.add(prefix + ".gamma", gamma);
        ps.add(prefix + ".beta", beta);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        return group_norm(x, tape.param(gamma), tape.param(beta), groups);
    }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;

    LayerNormLayer() = default;
    explicit LayerNormLayer(int64_t dim)
        : gamma(Tensor<T>::ones({dim})), beta(Tensor<T>::zeros({dim})) {}

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        ps.add(prefix + ".gamma", gamma);
        ps.add(prefix + ".beta", beta);
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        return layer_norm_rows(x, tape.param(gamma), tape.param(beta));
    }
};

}  // namespace prism
