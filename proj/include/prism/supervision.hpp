#pragma once

// Ground-truth correspondence labels (homography or depth+pose, MNN-filtered)
// and the three training losses.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "prism/core.hpp"
#include "prism/geometry.hpp"
#include "prism/matcher.hpp"
#include "prism/tape.hpp"
#include "prism/tensor.hpp"

namespace prism {

struct SupervisionLabels {
    std::vector<std::pair<int64_t, int64_t>> gt_coarse;  ///< mutually-nearest (i in A, j in B)
    std::vector<int64_t> a_match, a_nomatch;             ///< partition of A's coarse grid
    std::vector<int64_t> b_match, b_nomatch;             ///< partition of B's coarse grid
    /// Continuous warp of each matched A center into B, aligned with gt_coarse.
    std::vector<std::array<double, 2>> fine_targets;
};

struct SupervisionStats {
    int64_t empty_gt_coarse = 0;    ///< coarse loss evaluated with no labels
    int64_t empty_fine = 0;         ///< fine loss evaluated with no matches
    int64_t empty_prune_terms = 0;  ///< omitted mean terms (a side of the partition was empty)
    int64_t clamped_logs = 0;       ///< probabilities pushed up to the 1e-9 floor
};

namespace supervision_detail {

/// Project every coarse-cell center of the source grid into the target image
/// and record the containing target cell, or -1 when the point leaves the
/// target image, the source depth is invalid, or (depth mode) the reprojected
/// depth disagrees with the target depth map by more than 20%.
inline std::vector<int64_t> cell_candidates(const GroundTruthGeometry& g, int64_t hc_s,
                                            int64_t wc_s, int64_t hc_t, int64_t wc_t,
                                            int ratio,
                                            std::vector<std::array<double, 2>>* warped) {
    const double w_img = double(wc_t) * ratio, h_img = double(hc_t) * ratio;
    std::vector<int64_t> cand(size_t(hc_s * wc_s), -1);
    if (warped) warped->assign(size_t(hc_s * wc_s), {0.0, 0.0});
    for (int64_t r = 0; r < hc_s; ++r)
        for (int64_t c = 0; c < wc_s; ++c) {
            const int64_t i = r * wc_s + c;
            const Vec2 center(double(ratio) * c + ratio / 2.0, double(ratio) * r + ratio / 2.0);
            auto proj = project_point(g, center);
            if (!proj) continue;
            const Vec2 q = proj->point;
            if (!(q.x() >= 0.0 && q.x() < w_img && q.y() >= 0.0 && q.y() < h_img)) continue;
            if (g.kind == GroundTruthGeometry::Kind::PoseDepth) {
                const double d_t = depth_at(g.depth_b, q);
                if (d_t <= 0.0) continue;
                if (std::abs(proj->target_depth - d_t) > 0.2 * d_t) continue;
            }
            cand[size_t(i)] = int64_t(std::floor(q.y() / ratio)) * wc_t +
                              int64_t(std::floor(q.x() / ratio));
            if (warped) (*warped)[size_t(i)] = {q.x(), q.y()};
        }
    return cand;
}

}  // namespace supervision_detail

/// Label the coarse grids of an image pair: centers are projected both ways,
/// snapped to the containing cell, and kept when mutually nearest. Cells whose
/// projection fails are unmatchable; matched/unmatchable sets partition each grid.
inline SupervisionLabels ground_truth_coarse(const GroundTruthGeometry& g, int64_t hc_a,
                                             int64_t wc_a, int64_t hc_b, int64_t wc_b,
                                             int ratio = 8) {
    PRISM_CHECK_VALUE(hc_a > 0 && wc_a > 0 && hc_b > 0 && wc_b > 0 && ratio > 0,
                      "ground_truth_coarse: grid shapes must be positive");
    std::vector<std::array<double, 2>> warped;
    std::vector<int64_t> cand_a =
        supervision_detail::cell_candidates(g, hc_a, wc_a, hc_b, wc_b, ratio, &warped);
    std::vector<int64_t> cand_b =
        supervision_detail::cell_candidates(g.swapped(), hc_b, wc_b, hc_a, wc_a, ratio, nullptr);

    SupervisionLabels out;
    std::vector<char> a_in(size_t(hc_a * wc_a), 0), b_in(size_t(hc_b * wc_b), 0);
    for (int64_t i = 0; i < hc_a * wc_a; ++i) {
        const int64_t j = cand_a[size_t(i)];
        if (j < 0 || cand_b[size_t(j)] != i) continue;
        out.gt_coarse.push_back({i, j});
        out.fine_targets.push_back(warped[size_t(i)]);
        a_in[size_t(i)] = 1;
        b_in[size_t(j)] = 1;
    }
    for (int64_t i = 0; i < hc_a * wc_a; ++i)
        (a_in[size_t(i)] ? out.a_match : out.a_nomatch).push_back(i);
    for (int64_t j = 0; j < hc_b * wc_b; ++j)
        (b_in[size_t(j)] ? out.b_match : out.b_nomatch).push_back(j);
    return out;
}

/// L_c = -(1/|gt|) sum log P(i,j) over labeled matches, with P floored at 1e-9.
template <typename T>
Var<T> coarse_loss(Tape<T>& tape, Var<T> p,
                   const std::vector<std::pair<int64_t, int64_t>>& gt,
                   SupervisionStats* stats = nullptr) {
    const auto& ps = tape.shape(p);
    PRISM_CHECK_SHAPE(ps.size() == 2, "coarse_loss: P must be rank-2");
    if (gt.empty()) {
        if (stats) ++stats->empty_gt_coarse;
        return tape.constant(Tensor<T>::zeros({1}));
    }
    std::vector<int64_t> idx;
    idx.reserve(gt.size());
    for (const auto& [i, j] : gt) {
        PRISM_CHECK_SHAPE(i >= 0 && i < ps[0] && j >= 0 && j < ps[1],
                          "coarse_loss: label outside P");
        idx.push_back(i * ps[1] + j);
    }
    Var<T> picked = gather_rows(reshape(p, {ps[0] * ps[1], 1}), idx);
    if (stats) {
        const Tensor<T>& v = tape.value(picked);
        for (int64_t t = 0; t < v.numel(); ++t)
            if (v[t] < T(1e-9)) ++stats->clamped_logs;
    }
    return neg(mean(log_op(clamp_min(picked, T(1e-9)))));
}

/// Predicted sub-pixel points of B for a refined match set: anchor + 2*offset.
template <typename T>
Var<T> predicted_pb(Tape<T>& tape, const FineMatchSet<T>& m) {
    return tape.constant(m.anchor_b) + scale(m.offsets, T(2));
}

/// Fine targets for the coarse matches that survived refinement, as a [K x 2]
/// tensor aligned with `kept` (indices into the labeled match list).
template <typename T>
Tensor<T> fine_targets_for(const SupervisionLabels& labels, const std::vector<int64_t>& kept) {
    Tensor<T> out({int64_t(kept.size()), 2});
    for (size_t k = 0; k < kept.size(); ++k) {
        PRISM_CHECK_SHAPE(kept[k] >= 0 && size_t(kept[k]) < labels.fine_targets.size(),
                          "fine_targets_for: kept index outside the label list");
        out.at(int64_t(k), 0) = T(labels.fine_targets[size_t(kept[k])][0]);
        out.at(int64_t(k), 1) = T(labels.fine_targets[size_t(kept[k])][1]);
    }
    return out;
}

/// L_f = (1/K) sum (1/phi_k^2) * ||pred_k - target_k||_2, phi held constant.
/// phi^2 is floored at 0.25 (a half-pixel heatmap std; an untrained head
/// often produces near-one-hot heatmaps with phi ~ 0, and an unbounded
/// 1/phi^2 would let the fine term drown the other losses) and the squared
/// distance at 1e-18 so a perfect prediction keeps finite gradients.
template <typename T>
Var<T> fine_loss(Tape<T>& tape, Var<T> pred_b, const Tensor<T>& targets, const Tensor<T>& phi,
                 SupervisionStats* stats = nullptr) {
    const auto& ps = tape.shape(pred_b);
    PRISM_CHECK_SHAPE(ps.size() == 2 && ps[1] == 2, "fine_loss: predictions must be [K x 2]");
    PRISM_CHECK_SHAPE(targets.ndim() == 2 && targets.dim(0) == ps[0] && targets.dim(1) == 2,
                      "fine_loss: target shape must match predictions");
    PRISM_CHECK_SHAPE(phi.numel() == ps[0], "fine_loss: one phi per match");
    const int64_t k = ps[0];
    if (k == 0) {
        if (stats) ++stats->empty_fine;
        return tape.constant(Tensor<T>::zeros({1}));
    }
    Tensor<T> w({k});
    for (int64_t t = 0; t < k; ++t) {
        const T p2 = phi[t] * phi[t];
        w[t] = T(1) / (p2 > T(0.25) ? p2 : T(0.25));
    }
    Var<T> diff = pred_b - tape.constant(targets);
    Var<T> norms = sqrt_op(clamp_min(row_sum(mul(diff, diff)), T(1e-18)));
    return mean(mul(norms, tape.constant(w)));
}

namespace supervision_detail {

/// mean over idx of log(sigma) (or log(1-sigma)); nullopt when idx is empty.
template <typename T>
std::optional<Var<T>> log_mean_term(Tape<T>& tape, Var<T> sigma,
                                    const std::vector<int64_t>& idx, bool complement,
                                    SupervisionStats* stats) {
    if (idx.empty()) {
        if (stats) ++stats->empty_prune_terms;
        return std::nullopt;
    }
    Var<T> g = gather_rows(sigma, idx);
    if (complement) g = add_scalar(neg(g), T(1));
    if (stats) {
        const Tensor<T>& v = tape.value(g);
        for (int64_t t = 0; t < v.numel(); ++t)
            if (v[t] < T(1e-9)) ++stats->clamped_logs;
    }
    return mean(log_op(clamp_min(g, T(1e-9))));
}

template <typename T>
Var<T> prune_image_loss(Tape<T>& tape, Var<T> sigma, const std::vector<int64_t>& matched,
                        const std::vector<int64_t>& unmatched, SupervisionStats* stats) {
    auto tm = log_mean_term(tape, sigma, matched, false, stats);
    auto tn = log_mean_term(tape, sigma, unmatched, true, stats);
    if (tm && tn) return neg(*tm + *tn);
    if (tm) return neg(*tm);
    if (tn) return neg(*tn);
    return tape.constant(Tensor<T>::zeros({1}));
}

}  // namespace supervision_detail

/// L_p = (1/L) sum_l (L_p^A(l) + L_p^B(l)) / 2 where, per image,
/// L_p(l) = -(mean over matched of log sigma_l + mean over unmatched of log(1-sigma_l)).
/// Sigma is floored at 1e-9 on both sides via the log clamps.
template <typename T>
Var<T> pruning_loss(Tape<T>& tape, const std::vector<Var<T>>& sigma_a,
                    const std::vector<Var<T>>& sigma_b, const SupervisionLabels& labels,
                    SupervisionStats* stats = nullptr) {
    PRISM_CHECK_VALUE(!sigma_a.empty() && sigma_a.size() == sigma_b.size(),
                      "pruning_loss: need one sigma per layer for both images");
    const int64_t layers = int64_t(sigma_a.size());
    Var<T> acc = tape.constant(Tensor<T>::zeros({1}));
    for (int64_t l = 0; l < layers; ++l) {
        acc = acc + supervision_detail::prune_image_loss(tape, sigma_a[size_t(l)],
                                                         labels.a_match, labels.a_nomatch, stats);
        acc = acc + supervision_detail::prune_image_loss(tape, sigma_b[size_t(l)],
                                                         labels.b_match, labels.b_nomatch, stats);
    }
    return scale(acc, T(1) / T(2 * layers));
}

/// L = w_c*L_c + w_f*L_f + w_p*L_p (unit weights by default).
template <typename T>
Var<T> total_loss(Var<T> l_c, Var<T> l_f, Var<T> l_p, T w_c = T(1), T w_f = T(1), T w_p = T(1)) {
    return scale(l_c, w_c) + scale(l_f, w_f) + scale(l_p, w_p);
}

}  // namespace prism
