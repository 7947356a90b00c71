#pragma once

// Coarse match assignment (weighted dual-softmax + mutual-nearest-neighbor
// selection) and sub-pixel refinement on the fine feature maps.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "prism/core.hpp"
#include "prism/tape.hpp"
#include "prism/tensor.hpp"

namespace prism {

/// S = scale * F_A F_B^T. Callers L2-normalize rows first; the pipeline
/// passes scale = 1/tau so smaller temperatures sharpen the softmax.
template <typename T>
Var<T> similarity(Tape<T>& tape, Var<T> f_a, Var<T> f_b, T sim_scale) {
    PRISM_CHECK_VALUE(sim_scale > T(0), "similarity: scale must be positive");
    const auto& sa = tape.shape(f_a);
    const auto& sb = tape.shape(f_b);
    PRISM_CHECK_SHAPE(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[1],
                      "similarity: feature matrices must be [M x C], [N x C]");
    return scale(matmul(f_a, transpose(f_b)), sim_scale);
}

/// P(i,j) = sigma_A(i) * sigma_B(j) * rowSoftmax(S)(i,j) * colSoftmax(S)(i,j).
/// Both softmax factors lie in [0,1], so P(i,j) <= sigma_A(i)*sigma_B(j).
template <typename T>
Var<T> weighted_dual_softmax(Tape<T>& tape, Var<T> s, Var<T> sigma_a, Var<T> sigma_b) {
    const auto& ss = tape.shape(s);
    PRISM_CHECK_SHAPE(ss.size() == 2, "weighted_dual_softmax: S must be rank-2");
    PRISM_CHECK_SHAPE(tape.value(sigma_a).numel() == ss[0],
                      "weighted_dual_softmax: sigma_A length must match rows of S");
    PRISM_CHECK_SHAPE(tape.value(sigma_b).numel() == ss[1],
                      "weighted_dual_softmax: sigma_B length must match cols of S");
    Var<T> row = softmax_rows(s);
    Var<T> col = transpose(softmax_rows(transpose(s)));
    return mul_colvec(mul_rowvec(mul(row, col), sigma_b), sigma_a);
}

template <typename T>
struct CoarseMatch {
    int64_t i = 0;  ///< patch index in A
    int64_t j = 0;  ///< patch index in B
    T confidence = T(0);
};

/// Mutual-nearest-neighbor selection: (i,j) is kept iff P(i,j) > theta_c,
/// j is the argmax of row i, i is the argmax of column j, and neither
/// position is pruned. Ties resolve to the lowest index.
template <typename T>
std::vector<CoarseMatch<T>> select_coarse(const Tensor<T>& p, T theta_c,
                                          const Tensor<T>& mask_a, const Tensor<T>& mask_b) {
    PRISM_CHECK_SHAPE(p.ndim() == 2, "select_coarse: P must be rank-2");
    const int64_t m = p.dim(0), n = p.dim(1);
    PRISM_CHECK_SHAPE(mask_a.numel() == m && mask_b.numel() == n,
                      "select_coarse: mask sizes must match P");
    std::vector<CoarseMatch<T>> out;
    if (m == 0 || n == 0) return out;

    std::vector<int64_t> row_arg(size_t(m), 0);
    std::vector<int64_t> col_arg(size_t(n), 0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 1; j < n; ++j)
            if (p.at(i, j) > p.at(i, row_arg[size_t(i)])) row_arg[size_t(i)] = j;
    for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 1; i < m; ++i)
            if (p.at(i, j) > p.at(col_arg[size_t(j)], j)) col_arg[size_t(j)] = i;

    for (int64_t i = 0; i < m; ++i) {
        const int64_t j = row_arg[size_t(i)];
        if (col_arg[size_t(j)] != i) continue;
        if (!(p.at(i, j) > theta_c)) continue;
        if (mask_a[i] == T(0) || mask_b[j] == T(0)) continue;
        out.push_back({i, j, p.at(i, j)});
    }
    return out;
}

namespace matcher_detail {

/// [C x H x W] map -> [H*W x C] token matrix (row r*W+c holds the vector at (r,c)).
template <typename T>
Var<T> map_to_tokens(Tape<T>& tape, Var<T> map) {
    const auto& s = tape.shape(map);
    PRISM_CHECK_SHAPE(s.size() == 3, "map_to_tokens: expected [C x H x W]");
    return transpose(reshape(map, {s[0], s[1] * s[2]}));
}

/// Window offset table: row (dy+hw)*w + (dx+hw) holds (dx, dy), hw = (w-1)/2.
template <typename T>
Tensor<T> offset_grid(int window) {
    PRISM_CHECK_VALUE(window >= 3 && window % 2 == 1, "offset_grid: window must be odd and >= 3");
    const int hw = (window - 1) / 2;
    Tensor<T> u({int64_t(window) * window, 2});
    for (int dy = -hw; dy <= hw; ++dy)
        for (int dx = -hw; dx <= hw; ++dx) {
            const int64_t k = int64_t(dy + hw) * window + (dx + hw);
            u.at(k, 0) = T(dx);
            u.at(k, 1) = T(dy);
        }
    return u;
}

}  // namespace matcher_detail

/// Refinement output. `offsets` stays on the tape so the fine loss can
/// backpropagate into both fine feature maps; everything else is plain data.
template <typename T>
struct FineMatchSet {
    std::vector<int64_t> kept;  ///< indices into the coarse list that survived the bounds check
    Var<T> offsets;             ///< [K x 2] (dx, dy) in fine-grid units, |d| <= (w-1)/2
    Tensor<T> phi;              ///< [K] heatmap std in full-resolution pixels (detached)
    Tensor<T> p_a;              ///< [K x 2] patch center in A, full-resolution (x, y)
    Tensor<T> anchor_b;         ///< [K x 2] window anchor in B, full-resolution (x, y)
    Tensor<T> p_b;              ///< [K x 2] anchor_b + 2 * offsets, full-resolution (x, y)
    Tensor<T> confidence;       ///< [K] coarse confidences carried over
    int64_t dropped = 0;        ///< coarse matches whose window fell outside either map
};

/// Sub-pixel refinement. Coarse cell (r,c) anchors a w x w window at fine
/// index (4c+2, 4r+2); the center vector of window A is correlated with all
/// of window B, a softmax over the w^2 scores gives a heatmap, and its
/// expectation is the sub-pixel offset. Fine maps have stride 2, so cell
/// centers sit at (8c+4, 8r+4) and window anchors at (8c+5, 8r+5) in image
/// coordinates. Matches whose window would leave either map are dropped.
template <typename T>
FineMatchSet<T> refine(Tape<T>& tape, const std::vector<CoarseMatch<T>>& coarse,
                       Var<T> fine_a, Var<T> fine_b, int window) {
    PRISM_CHECK_VALUE(window >= 3 && window % 2 == 1, "refine: window must be odd and >= 3");
    const auto& sa = tape.shape(fine_a);
    const auto& sb = tape.shape(fine_b);
    PRISM_CHECK_SHAPE(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0],
                      "refine: fine maps must be [C x H x W] with matching C");
    PRISM_CHECK_SHAPE(sa[1] % 4 == 0 && sa[2] % 4 == 0 && sb[1] % 4 == 0 && sb[2] % 4 == 0,
                      "refine: fine map extents must be multiples of 4");
    const int64_t c_f = sa[0];
    const int64_t hf_a = sa[1], wf_a = sa[2], hf_b = sb[1], wf_b = sb[2];
    const int64_t wc_a = wf_a / 4, wc_b = wf_b / 4;
    const int64_t cells_a = (hf_a / 4) * wc_a, cells_b = (hf_b / 4) * wc_b;
    const int hw = (window - 1) / 2;
    const int64_t w2 = int64_t(window) * window;

    FineMatchSet<T> out;
    std::vector<int64_t> idx_a, idx_b;
    std::vector<T> pa_rows, anchor_rows, conf_rows;
    for (size_t mi = 0; mi < coarse.size(); ++mi) {
        const auto& cm = coarse[mi];
        PRISM_CHECK_SHAPE(cm.i >= 0 && cm.i < cells_a && cm.j >= 0 && cm.j < cells_b,
                          "refine: coarse index outside the patch grid");
        const int64_t ra = cm.i / wc_a, ca = cm.i % wc_a;
        const int64_t rb = cm.j / wc_b, cb = cm.j % wc_b;
        const int64_t ya = 4 * ra + 2, xa = 4 * ca + 2;
        const int64_t yb = 4 * rb + 2, xb = 4 * cb + 2;
        const bool fits = ya - hw >= 0 && ya + hw < hf_a && xa - hw >= 0 && xa + hw < wf_a &&
                          yb - hw >= 0 && yb + hw < hf_b && xb - hw >= 0 && xb + hw < wf_b;
        if (!fits) {
            ++out.dropped;
            continue;
        }
        out.kept.push_back(int64_t(mi));
        for (int dy = -hw; dy <= hw; ++dy)
            for (int dx = -hw; dx <= hw; ++dx) {
                idx_a.push_back(ya * wf_a + xa);
                idx_b.push_back((yb + dy) * wf_b + (xb + dx));
            }
        pa_rows.push_back(T(8 * ca + 4));
        pa_rows.push_back(T(8 * ra + 4));
        anchor_rows.push_back(T(8 * cb + 5));
        anchor_rows.push_back(T(8 * rb + 5));
        conf_rows.push_back(cm.confidence);
    }
    const int64_t k = int64_t(out.kept.size());

    Var<T> tok_a = matcher_detail::map_to_tokens(tape, fine_a);
    Var<T> tok_b = matcher_detail::map_to_tokens(tape, fine_b);
    Var<T> corr = reshape(rows_dot(gather_rows(tok_a, idx_a), gather_rows(tok_b, idx_b)), {k, w2});
    Var<T> heat = softmax_rows(scale(corr, T(1) / std::sqrt(T(c_f))));
    Var<T> grid = tape.constant(matcher_detail::offset_grid<T>(window));
    out.offsets = matmul(heat, grid);

    const Tensor<T>& hv = tape.value(heat);
    const Tensor<T>& ov = tape.value(out.offsets);
    out.phi = Tensor<T>({k});
    out.p_a = Tensor<T>::from({k, 2}, std::move(pa_rows));
    out.anchor_b = Tensor<T>::from({k, 2}, std::move(anchor_rows));
    out.confidence = Tensor<T>::from({k}, std::move(conf_rows));
    out.p_b = Tensor<T>({k, 2});
    for (int64_t r = 0; r < k; ++r) {
        T m2 = 0;
        for (int dy = -hw; dy <= hw; ++dy)
            for (int dx = -hw; dx <= hw; ++dx)
                m2 += hv.at(r, int64_t(dy + hw) * window + (dx + hw)) * T(dx * dx + dy * dy);
        const T var = m2 - ov.at(r, 0) * ov.at(r, 0) - ov.at(r, 1) * ov.at(r, 1);
        out.phi[r] = T(2) * std::sqrt(var > T(0) ? var : T(0));
        out.p_b.at(r, 0) = out.anchor_b.at(r, 0) + T(2) * ov.at(r, 0);
        out.p_b.at(r, 1) = out.anchor_b.at(r, 1) + T(2) * ov.at(r, 1);
    }
    return out;
}

/// One match per line: `x_A y_A x_B y_B confidence`, 6 significant digits.
template <typename T>
void write_matches(std::ostream& os, const FineMatchSet<T>& m) {
    const int64_t k = m.confidence.numel();
    char buf[192];
    for (int64_t r = 0; r < k; ++r) {
        std::snprintf(buf, sizeof(buf), "%.6g %.6g %.6g %.6g %.6g\n", double(m.p_a.at(r, 0)),
                      double(m.p_a.at(r, 1)), double(m.p_b.at(r, 0)), double(m.p_b.at(r, 1)),
                      double(m.confidence[r]));
        os << buf;
    }
}

/// Parse the match file format back into (x_A, y_A, x_B, y_B, confidence) rows.
inline std::vector<std::array<double, 5>> read_matches(std::istream& is) {
    std::vector<std::array<double, 5>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::array<double, 5> r{};
        if (!(ls >> r[0] >> r[1] >> r[2] >> r[3] >> r[4]))
            throw IoError("match file: malformed line '" + line + "'");
        rows.push_back(r);
    }
    return rows;
}

}  // namespace prism
