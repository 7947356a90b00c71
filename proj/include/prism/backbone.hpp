#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prism/nn.hpp"
#include "prism/tape.hpp"
#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Residual encoder + top-down fusion. The encoder downsamples 1/2 (stem),
// then runs three residual stages at strides 1, 2, 2 to reach 1/8; the coarse
// map is a 1x1 projection of the last stage. The fine map walks back up with
// lateral 1x1 projections and nearest-neighbor upsampling to 1/2 resolution.
// Group normalization throughout keeps single-image forward passes
// batch-independent and deterministic.
// ---------------------------------------------------------------------------

template <typename T>
struct ResidualBlock {
    Conv2dLayer<T> conv1, conv2;
    GroupNormLayer<T> n1, n2;
    Conv2dLayer<T> skip;  // 1x1, used only when stride or width changes
    bool has_skip = false;

    ResidualBlock() = default;
    ResidualBlock(int64_t in, int64_t out, int stride, int groups, Rng& rng)
        : conv1(in, out, 3, stride, 1, rng),
          conv2(out, out, 3, 1, 1, rng),
          n1(out, groups),
          n2(out, groups),
          has_skip(stride != 1 || in != out) {
        if (has_skip) skip = Conv2dLayer<T>(in, out, 1, stride, 0, rng);
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        conv1.reg(ps, prefix + ".c1");
        n1.reg(ps, prefix + ".n1");
        conv2.reg(ps, prefix + ".c2");
        n2.reg(ps, prefix + ".n2");
        if (has_skip) skip.reg(ps, prefix + ".skip");
    }

    Var<T> forward(Tape<T>& tape, Var<T> x) const {
        auto y = relu(n1.forward(tape, conv1.forward(tape, x)));
        y = n2.forward(tape, conv2.forward(tape, y));
        auto s = has_skip ? skip.forward(tape, x) : x;
        return relu(y + s);
    }
};

template <typename T>
struct BackboneParams {
    int64_t c_coarse = 0, c_fine = 0;
    int blocks_per_stage = 2;
    int groups = 8;

    Conv2dLayer<T> stem;  // 7x7 stride 2
    GroupNormLayer<T> stem_norm;
    std::vector<ResidualBlock<T>> stage1, stage2, stage3;
    Conv2dLayer<T> coarse_proj;          // 1x1: c3 -> C_c at 1/8
    Conv2dLayer<T> top_proj;             // 1x1: C_c -> C_f
    Conv2dLayer<T> lat2, lat1;           // 1x1 laterals onto C_f
    Conv2dLayer<T> smooth2, smooth1;     // 3x3 after each merge

    BackboneParams() = default;
    BackboneParams(int64_t C_c, int64_t C_f, int blocks, Rng& rng, int groups_ = 8)
        : c_coarse(C_c), c_fine(C_f), blocks_per_stage(blocks), groups(groups_) {
        PRISM_CHECK_VALUE(C_c % 4 == 0 && C_c >= 16, "backbone: coarse width must be >= 16, mult of 4");
        PRISM_CHECK_VALUE(blocks >= 1, "backbone: need at least one block per stage");
        const int64_t c1 = C_c / 2, c2 = (3 * C_c) / 4, c3 = C_c;
        PRISM_CHECK_VALUE(c1 % groups == 0 && c2 % groups == 0 && C_f % groups == 0,
                          "backbone: widths must divide the norm groups");
        stem = Conv2dLayer<T>(3, c1, 7, 2, 3, rng);
        stem_norm = GroupNormLayer<T>(c1, groups);
        auto make_stage = [&](std::vector<ResidualBlock<T>>& st, int64_t in, int64_t out,
                              int stride) {
            st.emplace_back(in, out, stride, groups, rng);
            for (int b = 1; b < blocks; ++b) st.emplace_back(out, out, 1, groups, rng);
        };
        make_stage(stage1, c1, c1, 1);
        make_stage(stage2, c1, c2, 2);
        make_stage(stage3, c2, c3, 2);
        coarse_proj = Conv2dLayer<T>(c3, C_c, 1, 1, 0, rng);
        top_proj = Conv2dLayer<T>(C_c, C_f, 1, 1, 0, rng);
        lat2 = Conv2dLayer<T>(c2, C_f, 1, 1, 0, rng);
        lat1 = Conv2dLayer<T>(c1, C_f, 1, 1, 0, rng);
        smooth2 = Conv2dLayer<T>(C_f, C_f, 3, 1, 1, rng);
        smooth1 = Conv2dLayer<T>(C_f, C_f, 3, 1, 1, rng);
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) {
        stem.reg(ps, prefix + ".stem");
        stem_norm.reg(ps, prefix + ".stem_norm");
        auto reg_stage = [&](std::vector<ResidualBlock<T>>& st, const std::string& name) {
            for (std::size_t b = 0; b < st.size(); ++b)
                st[b].reg(ps, prefix + "." + name + "." + std::to_string(b));
        };
        reg_stage(stage1, "s1");
        reg_stage(stage2, "s2");
        reg_stage(stage3, "s3");
        coarse_proj.reg(ps, prefix + ".coarse");
        top_proj.reg(ps, prefix + ".top");
        lat2.reg(ps, prefix + ".lat2");
        lat1.reg(ps, prefix + ".lat1");
        smooth2.reg(ps, prefix + ".smooth2");
        smooth1.reg(ps, prefix + ".smooth1");
    }
};

template <typename T>
struct FeatureBundle {
    Var<T> coarse;  // [C_c x H/8 x W/8]
    Var<T> fine;    // [C_f x H/2 x W/2]
};

template <typename T>
FeatureBundle<T> extract_features(Tape<T>& tape, Var<T> image, const BackboneParams<T>& p) {
    const auto s = tape.shape(image);
    PRISM_CHECK_SHAPE(s.size() == 3 && s[0] == 3, "backbone: image must be [3 x H x W]");
    PRISM_CHECK_SHAPE(s[1] % 32 == 0 && s[2] % 32 == 0,
                      "backbone: image sides must be divisible by 32");

    auto x = relu(p.stem_norm.forward(tape, p.stem.forward(tape, image)));  // 1/2
    for (const auto& b : p.stage1) x = b.forward(tape, x);
    auto f1 = x;  // 1/2, width c1
    for (const auto& b : p.stage2) x = b.forward(tape, x);
    auto f2 = x;  // 1/4, width c2
    for (const auto& b : p.stage3) x = b.forward(tape, x);

    auto coarse = p.coarse_proj.forward(tape, x);  // 1/8, C_c

    auto t2 = upsample_nearest2x(p.top_proj.forward(tape, coarse)) + p.lat2.forward(tape, f2);
    t2 = p.smooth2.forward(tape, t2);  // 1/4, C_f
    auto t1 = upsample_nearest2x(t2) + p.lat1.forward(tape, f1);
    auto fine = p.smooth1.forward(tape, t1);  // 1/2, C_f

    return {coarse, fine};
}

// Grayscale [H x W] in [0,1] -> the 3-channel input layout.
template <typename T>
Tensor<T> gray_to_input(const Tensor<T>& img) {
    PRISM_CHECK_SHAPE(img.ndim() == 2, "gray_to_input: expects [H x W]");
    const int64_t H = img.dim(0), W = img.dim(1);
    Tensor<T> out({3, H, W});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) out.at(c, y, x) = img.at(y, x);
    return out;
}

}  // namespace prism
