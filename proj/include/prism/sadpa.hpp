#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "prism/nn.hpp"
#include "prism/rope.hpp"
#include "prism/tape.hpp"
#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Scale-aware dynamic pruning attention.
//
// Queries come from the source token matrix [N_s x C]. Keys/values are a
// 3-level pyramid over the target map built with strided convolutions
// (kernel = stride = 4, 2, 1). The coarsest level sees the unmasked map;
// the two finer levels convolve the mask-zeroed map and carry an exclusion
// mask (nearest-neighbor downsample of the target mask) so pruned tokens
// never enter their softmax. Per-level messages are fused with the source
// by a small FFN with residual + layer norm; fully pruned source rows pass
// through bitwise unchanged.
// ---------------------------------------------------------------------------

// Top-left nearest-neighbor mask downsample: out(y, x) = m(y*r, x*r).
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& m, int64_t h, int64_t w, int64_t r) {
    PRISM_CHECK_SHAPE(m.numel() == h * w, "downsample_mask: mask size != h*w");
    PRISM_CHECK_VALUE(r >= 1 && h % r == 0 && w % r == 0,
                      "downsample_mask: grid not divisible by ratio");
    const int64_t ho = h / r, wo = w / r;
    Tensor<T> out({ho * wo});
    for (int64_t y = 0; y < ho; ++y)
        for (int64_t x = 0; x < wo; ++x) out[y * wo + x] = m[(y * r) * w + (x * r)];
    return out;
}

template <typename T>
bool mask_empty(const Tensor<T>& m) {
    for (int64_t i = 0; i < m.numel(); ++i)
        if (m[i] != T(0)) return false;
    return true;
}

template <typename T>
struct KvPyramidLevel {
    Var<T> kv;       // [N_i x C]; keys and values share one projection
    Tensor<T> mask;  // [N_i] binary exclusion mask (all ones at level 1)
    int64_t ratio = 1;
    int64_t grid_h = 0, grid_w = 0;
};

template <typename T>
struct SadpaParams {
    int64_t channels = 0;
    int heads = 1;
    bool self_mode = false;

    Linear<T> q_proj;                       // C -> C
    std::array<Conv2dLayer<T>, 3> kv_conv;  // ratios 4, 2, 1
    Linear<T> ffn1;                         // 4C -> 2C
    Linear<T> ffn2;                         // 2C -> C
    LayerNormLayer<T> norm;                 // C
    RopeParams<T> rope;                     // self mode only

    SadpaParams() = default;
    SadpaParams(int64_t C, int heads_, bool self_mode_, Rng& rng)
        : channels(C), heads(heads_), self_mode(self_mode_) {
        PRISM_CHECK_VALUE(heads_ >= 1 && C % heads_ == 0, "sadpa: channels % heads != 0");
        q_proj = Linear<T>(C, C, rng);
        const int ratios[3] = {4, 2, 1};
        for (int i = 0; i < 3; ++i) kv_conv[i] = Conv2dLayer<T>(C, C, ratios[i], ratios[i], 0, rng);
        ffn1 = Linear<T>(4 * C, 2 * C, rng);
        ffn2 = Linear<T>(2 * C, C, rng);
        norm = LayerNormLayer<T>(C);
        if (self_mode) {
            const int64_t d_head = C / heads_;
            PRISM_CHECK_VALUE(d_head % 2 == 0, "sadpa: head dim must be even for rotation");
            rope = RopeParams<T>(d_head);
        }
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        q_proj.reg(ps, prefix + ".q");
        kv_conv[0].reg(ps, prefix + ".kv4");
        kv_conv[1].reg(ps, prefix + ".kv2");
        kv_conv[2].reg(ps, prefix + ".kv1");
        ffn1.reg(ps, prefix + ".ffn1");
        ffn2.reg(ps, prefix + ".ffn2");
        norm.reg(ps, prefix + ".norm");
        if (self_mode) rope.reg(ps, prefix + ".rope");
    }
};

namespace sadpa_detail {

// [N x C] tokens (row-major over an h x w grid) -> [C x h x w] map.
template <typename T>
Var<T> tokens_to_map(Var<T> tokens, int64_t h, int64_t w) {
    const int64_t C = tokens.tape->shape(tokens)[1];
    return reshape(transpose(tokens), {C, h, w});
}

// [C x h x w] map -> [h*w x C] tokens.
template <typename T>
Var<T> map_to_tokens(Var<T> map) {
    const auto s = map.tape->shape(map);
    return transpose(reshape(map, {s[0], s[1] * s[2]}));
}

}  // namespace sadpa_detail

// Target pyramid. `f_t` is the token matrix [h*w x C]; `m_t` its flat mask.
template <typename T>
std::array<KvPyramidLevel<T>, 3> build_kv_pyramid(Tape<T>& tape, Var<T> f_t, const Tensor<T>& m_t,
                                                  int64_t h, int64_t w, const SadpaParams<T>& p) {
    PRISM_CHECK_SHAPE(h % 4 == 0 && w % 4 == 0, "sadpa: grid must be divisible by 4");
    PRISM_CHECK_SHAPE(m_t.numel() == h * w, "sadpa: target mask size != h*w");
    auto raw_map = sadpa_detail::tokens_to_map(f_t, h, w);
    auto masked_map =
        sadpa_detail::tokens_to_map(mul_colvec(f_t, tape.constant(m_t)), h, w);

    std::array<KvPyramidLevel<T>, 3> lv;
    const int64_t ratios[3] = {4, 2, 1};
    for (int i = 0; i < 3; ++i) {
        const int64_t r = ratios[i];
        auto kv_map = p.kv_conv[i].forward(tape, i == 0 ? raw_map : masked_map);
        lv[i].kv = sadpa_detail::map_to_tokens(kv_map);
        lv[i].ratio = r;
        lv[i].grid_h = h / r;
        lv[i].grid_w = w / r;
        lv[i].mask = i == 0 ? Tensor<T>::ones({(h / r) * (w / r)}) : downsample_mask(m_t, h, w, r);
    }
    return lv;
}

// Multi-head scaled dot-product attention of `q` [N_s x C] against one level.
// Keys with mask 0 are excluded from the softmax entirely. When `rope` is
// given, q/k are rotated per head by their grid coordinates before scoring
// (values stay unrotated).
template <typename T>
Var<T> attend(Tape<T>& tape, Var<T> q, const KvPyramidLevel<T>& level, int heads,
              const RopeParams<T>* rope = nullptr, const Tensor<T>* q_coords = nullptr) {
    const int64_t C = tape.shape(q)[1];
    PRISM_CHECK_SHAPE(C == tape.shape(level.kv)[1], "attend: channel mismatch");
    PRISM_CHECK_SHAPE(heads >= 1 && C % heads == 0, "attend: channels % heads != 0");
    if (mask_empty(level.mask)) throw EmptyKeyError("attend: every key at this level is pruned");

    const int64_t d = C / heads;
    Tensor<T> k_coords;
    if (rope) {
        PRISM_CHECK_VALUE(q_coords != nullptr, "attend: rotation requires query coordinates");
        k_coords = pooled_coords<T>(level.grid_h * level.ratio, level.grid_w * level.ratio,
                                    level.ratio);
    }
    const T inv_sqrt_d = T(1.0 / std::sqrt(double(d)));
    std::vector<Var<T>> head_out;
    head_out.reserve(size_t(heads));
    for (int hd = 0; hd < heads; ++hd) {
        auto qh = slice_cols(q, hd * d, d);
        auto kh = slice_cols(level.kv, hd * d, d);
        auto vh = kh;
        if (rope) {
            qh = rope->rotate(tape, qh, *q_coords);
            kh = rope->rotate(tape, kh, k_coords);
        }
        auto logits = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
        auto attnw = masked_softmax_rows(logits, level.mask);
        head_out.push_back(matmul(attnw, vh));
    }
    return heads == 1 ? head_out[0] : concat_cols(head_out);
}

template <typename T>
struct SadpaOut {
    Var<T> out;                       // [N_s x C]
    std::array<Var<T>, 3> messages;   // pre-FFN, rows zeroed where the source mask is 0
    std::array<bool, 3> level_used{}; // false when a fine level had no live keys
};

// One attention block. `f_s`/`f_t` are token matrices over the same h x w
// grid, `m_s`/`m_t` their flat masks. Self mode requires f_s and f_t to be
// the same tokens and applies the rotary encoding; cross mode applies none.
template <typename T>
SadpaOut<T> sadpa_forward(Tape<T>& tape, Var<T> f_s, Var<T> f_t, const Tensor<T>& m_s,
                          const Tensor<T>& m_t, int64_t h, int64_t w, const SadpaParams<T>& p) {
    const int64_t N_s = tape.shape(f_s)[0], C = tape.shape(f_s)[1];
    PRISM_CHECK_SHAPE(C == p.channels, "sadpa: channel mismatch with params");
    PRISM_CHECK_SHAPE(N_s == h * w && m_s.numel() == N_s, "sadpa: source grid mismatch");

    auto pyramid = build_kv_pyramid(tape, f_t, m_t, h, w, p);
    auto q = p.q_proj.forward(tape, f_s);
    const Tensor<T> q_coords = grid_coords<T>(h, w);
    auto msk = tape.constant(m_s);

    SadpaOut<T> res;
    std::vector<Var<T>> ffn_in;
    for (int i = 0; i < 3; ++i) {
        Var<T> m_i;
        if (mask_empty(pyramid[i].mask)) {
            m_i = tape.constant(Tensor<T>::zeros({N_s, C}));
            res.level_used[size_t(i)] = false;
        } else {
            m_i = attend(tape, q, pyramid[i], p.heads, p.self_mode ? &p.rope : nullptr,
                         p.self_mode ? &q_coords : nullptr);
            m_i = mul_colvec(m_i, msk);  // pruned sources emit no message
            res.level_used[size_t(i)] = true;
        }
        res.messages[size_t(i)] = m_i;
        ffn_in.push_back(m_i);
    }
    ffn_in.push_back(f_s);

    auto fused = p.ffn2.forward(tape, relu(p.ffn1.forward(tape, concat_cols(ffn_in))));
    auto normed = p.norm.forward(tape, fused + f_s);
    res.out = where_rows(m_s, normed, f_s);
    return res;
}

}  // namespace prism
