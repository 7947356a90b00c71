#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prism/sadpa.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Progressive pruning stack. Each layer runs self attention per image, cross
// attention in both directions (computed from the two post-self feature sets
// before either is replaced, keeping A/B swap symmetry exact), scores every
// position with a small relevance head, and shrinks the running masks with a
// cumulative AND. All parameters are shared between the two images; pruned
// rows keep their features frozen through every later layer.
// ---------------------------------------------------------------------------

template <typename T>
struct NmiHead {
    Linear<T> l1;  // C -> C
    Linear<T> l2;  // C -> 1, zero-initialized so training starts at sigma = 0.5

    NmiHead() = default;
    NmiHead(int64_t C, Rng& rng) : l1(C, C, rng), l2(Linear<T>::zeros(C, 1)) {}

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        l1.reg(ps, prefix + ".l1");
        l2.reg(ps, prefix + ".l2");
    }
};

// sigma = sigmoid(MLP(F)), one score per row, strictly inside (0,1).
template <typename T>
Var<T> estimate_nmi(Tape<T>& tape, Var<T> f, const NmiHead<T>& head) {
    return sigmoid(head.l2.forward(tape, relu(head.l1.forward(tape, f))));
}

// M[i] = M_prev[i] AND (sigma[i] >= theta_p). Hard selection: masks are data,
// not graph nodes; gradients reach the scores only through their own loss.
template <typename T>
Tensor<T> update_mask(const Tensor<T>& sigma, T theta_p, const Tensor<T>& m_prev) {
    PRISM_CHECK_SHAPE(sigma.numel() == m_prev.numel(), "update_mask: size mismatch");
    Tensor<T> out({m_prev.numel()});
    for (int64_t i = 0; i < m_prev.numel(); ++i)
        out[i] = (m_prev[i] != T(0) && sigma[i] >= theta_p) ? T(1) : T(0);
    return out;
}

template <typename T>
struct MpmLayerParams {
    SadpaParams<T> self_blk;
    SadpaParams<T> cross_blk;
    NmiHead<T> nmi;

    MpmLayerParams() = default;
    MpmLayerParams(int64_t C, int heads, Rng& rng)
        : self_blk(C, heads, true, rng), cross_blk(C, heads, false, rng), nmi(C, rng) {}

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        self_blk.reg(ps, prefix + ".self");
        cross_blk.reg(ps, prefix + ".cross");
        nmi.reg(ps, prefix + ".nmi");
    }
};

template <typename T>
struct MpmParams {
    std::vector<MpmLayerParams<T>> layers;

    MpmParams() = default;
    MpmParams(int64_t C, int heads, int L, Rng& rng) {
        PRISM_CHECK_VALUE(L >= 1, "mpm: need at least one layer");
        layers.reserve(size_t(L));
        for (int l = 0; l < L; ++l) layers.emplace_back(C, heads, rng);
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        for (std::size_t l = 0; l < layers.size(); ++l)
            layers[l].reg(ps, prefix + "." + std::to_string(l));
    }
};

template <typename T>
struct MpmLayerOut {
    Var<T> f_a, f_b;
    Tensor<T> m_a, m_b;      // updated masks
    Var<T> sigma_a, sigma_b; // [N x 1]
};

template <typename T>
MpmLayerOut<T> mpm_layer(Tape<T>& tape, Var<T> f_a, Var<T> f_b, const Tensor<T>& m_a,
                         const Tensor<T>& m_b, int64_t h, int64_t w, T theta_p,
                         const MpmLayerParams<T>& p) {
    auto sa = sadpa_forward(tape, f_a, f_a, m_a, m_a, h, w, p.self_blk).out;
    auto sb = sadpa_forward(tape, f_b, f_b, m_b, m_b, h, w, p.self_blk).out;
    auto ca = sadpa_forward(tape, sa, sb, m_a, m_b, h, w, p.cross_blk).out;
    auto cb = sadpa_forward(tape, sb, sa, m_b, m_a, h, w, p.cross_blk).out;

    MpmLayerOut<T> out;
    out.f_a = ca;
    out.f_b = cb;
    out.sigma_a = estimate_nmi(tape, ca, p.nmi);
    out.sigma_b = estimate_nmi(tape, cb, p.nmi);
    out.m_a = update_mask(tape.value(out.sigma_a), theta_p, m_a);
    out.m_b = update_mask(tape.value(out.sigma_b), theta_p, m_b);
    if (mask_empty(out.m_a))
        throw DegeneratePruningError("every position of image A was pruned");
    if (mask_empty(out.m_b))
        throw DegeneratePruningError("every position of image B was pruned");
    return out;
}

template <typename T>
struct MpmResult {
    Var<T> f_a, f_b;                    // final transformed features [N x C]
    std::vector<Tensor<T>> masks_a;     // L+1 masks, [0] = initial all-ones
    std::vector<Tensor<T>> masks_b;
    std::vector<Var<T>> sigma_a;        // L score vectors [N x 1]
    std::vector<Var<T>> sigma_b;
};

template <typename T>
MpmResult<T> mpm_stack(Tape<T>& tape, Var<T> f_a, Var<T> f_b, int64_t h, int64_t w, T theta_p,
                       const MpmParams<T>& p) {
    const int64_t N = tape.shape(f_a)[0];
    PRISM_CHECK_SHAPE(N == h * w && tape.shape(f_b)[0] == N, "mpm: token/grid mismatch");
    MpmResult<T> res;
    res.masks_a.push_back(Tensor<T>::ones({N}));
    res.masks_b.push_back(Tensor<T>::ones({N}));
    for (const auto& layer : p.layers) {
        auto out = mpm_layer(tape, f_a, f_b, res.masks_a.back(), res.masks_b.back(), h, w,
                             theta_p, layer);
        f_a = out.f_a;
        f_b = out.f_b;
        res.masks_a.push_back(out.m_a);
        res.masks_b.push_back(out.m_b);
        res.sigma_a.push_back(out.sigma_a);
        res.sigma_b.push_back(out.sigma_b);
    }
    res.f_a = f_a;
    res.f_b = f_b;
    return res;
}

}  // namespace prism
