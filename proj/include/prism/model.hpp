#pragma once

// Whole-model assembly: backbone features for both images, the masked
// attention/pruning stack on coarse tokens, weighted dual-softmax match
// probabilities, and sub-pixel refinement on the fine maps. Everything here
// is glue; the pieces live in backbone.hpp, mpm.hpp and matcher.hpp.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prism/backbone.hpp"
#include "prism/checkpoint.hpp"
#include "prism/config.hpp"
#include "prism/matcher.hpp"
#include "prism/mpm.hpp"
#include "prism/tape.hpp"

namespace prism {

template <typename T>
struct PrismModel {
    Config cfg;
    BackboneParams<T> backbone;
    MpmParams<T> mpm;

    PrismModel() = default;
    PrismModel(const Config& c, Rng& rng)
        : cfg(c),
          backbone(c.c_coarse, c.c_fine, 2, rng),
          mpm(c.c_coarse, c.heads, c.mpm_layers, rng) {}

    /// Parameter enumeration; the entry order is the checkpoint layout.
    ParamStore<T> param_store() {
        ParamStore<T> ps;
        backbone.reg(ps, "backbone");
        mpm.reg(ps, "mpm");
        return ps;
    }
};

inline PrismModel<float> make_model(const Config& cfg) {
    Rng rng(cfg.seed);
    return PrismModel<float>(cfg, rng);
}

/// Rebuild a model from a checkpoint: the config snapshot stored in the
/// manifest decides the architecture, then the arrays are loaded into it.
inline std::pair<PrismModel<float>, CheckpointMeta> load_model(const std::string& path) {
    const CheckpointMeta meta = peek_checkpoint(path);
    const Config cfg = Config::from_snapshot(meta.config);
    std::pair<PrismModel<float>, CheckpointMeta> out{make_model(cfg), meta};
    ParamStore<float> ps = out.first.param_store();
    load_checkpoint(path, ps);
    return out;
}

template <typename T>
struct ForwardOut {
    FeatureBundle<T> feat_a, feat_b;  // coarse [C_c x H/8 x W/8], fine [C_f x H/2 x W/2]
    MpmResult<T> mpm;                 // transformed tokens, masks, sigma stacks
    Var<T> p;                         // match probabilities [N x N]
    int64_t hc = 0, wc = 0;           // coarse grid extent
};

/// Build the full differentiable graph for one grayscale image pair. Both
/// images must share the same size (the attention stack ties the two grids).
template <typename T>
ForwardOut<T> model_forward(Tape<T>& tape, const PrismModel<T>& m, const Tensor<T>& gray_a,
                            const Tensor<T>& gray_b) {
    PRISM_CHECK_SHAPE(gray_a.ndim() == 2 && gray_b.ndim() == 2, "model_forward: images must be [H x W]");
    PRISM_CHECK_SHAPE(gray_a.dim(0) == gray_b.dim(0) && gray_a.dim(1) == gray_b.dim(1),
                      "model_forward: image sizes must match");

    ForwardOut<T> out;
    out.feat_a = extract_features(tape, tape.constant(gray_to_input(gray_a)), m.backbone);
    out.feat_b = extract_features(tape, tape.constant(gray_to_input(gray_b)), m.backbone);
    const auto cs = tape.shape(out.feat_a.coarse);
    out.hc = cs[1];
    out.wc = cs[2];

    auto tok_a = matcher_detail::map_to_tokens(tape, out.feat_a.coarse);
    auto tok_b = matcher_detail::map_to_tokens(tape, out.feat_b.coarse);
    out.mpm = mpm_stack(tape, tok_a, tok_b, out.hc, out.wc, T(m.cfg.theta_p), m.mpm);

    auto na = l2_normalize_rows(out.mpm.f_a);
    auto nb = l2_normalize_rows(out.mpm.f_b);
    auto s = similarity(tape, na, nb, T(1.0 / m.cfg.tau));
    out.p = weighted_dual_softmax(tape, s, out.mpm.sigma_a.back(), out.mpm.sigma_b.back());
    return out;
}

template <typename T>
struct MatchOutput {
    std::vector<CoarseMatch<T>> coarse;  // surviving mutual-nearest cells
    FineMatchSet<T> fine;                // refined full-resolution matches
    std::vector<Tensor<T>> masks_a;      // per-layer hard masks, [0] = all ones
    std::vector<Tensor<T>> masks_b;
    int64_t hc = 0, wc = 0;
};

/// Inference entry point: match two grayscale images end to end.
template <typename T>
MatchOutput<T> match_images(const PrismModel<T>& m, const Tensor<T>& gray_a,
                            const Tensor<T>& gray_b, std::optional<T> theta_c = std::nullopt) {
    Tape<T> tape;
    auto fwd = model_forward(tape, m, gray_a, gray_b);
    MatchOutput<T> out;
    out.coarse = select_coarse(tape.value(fwd.p), theta_c.value_or(T(m.cfg.theta_c)),
                               fwd.mpm.masks_a.back(), fwd.mpm.masks_b.back());
    out.fine = refine(tape, out.coarse, fwd.feat_a.fine, fwd.feat_b.fine, m.cfg.refine_window);
    out.masks_a = fwd.mpm.masks_a;
    out.masks_b = fwd.mpm.masks_b;
    out.hc = fwd.hc;
    out.wc = fwd.wc;
    return out;
}

}  // namespace prism
