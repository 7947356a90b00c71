#pragma once

#include <cmath>
#include <cstdint>

#include "prism/nn.hpp"
#include "prism/tape.hpp"
#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// 2D rotary position embedding over normalized grid coordinates.
//
// Each 2-wide feature block k is rotated by theta_k = -b_k . (x, y), so the
// attention logit between a query at p and a key at s depends only on p - s:
//   <rotate(q, p), rotate(k, s)> = q^T R(b . (p - s)) k.
// Queries and keys are rotated separately by their own coordinates; no score
// matrix is materialized. Frequencies b_k are learned, one table per
// self-attention block, shared across heads.
// ---------------------------------------------------------------------------

template <typename T>
struct RopeParams {
    Tensor<T> freqs;  // [d/2 x 2], row k = b_k

    RopeParams() = default;

    // Log-spaced magnitudes from pi to 32*pi, alternating between the x and y
    // axes. Coordinates live in [0,1], so the slowest rotation spans half a
    // turn across the image and the fastest resolves fractions of a cell.
    explicit RopeParams(int64_t head_dim) {
        PRISM_CHECK_VALUE(head_dim >= 2 && head_dim % 2 == 0,
                          "rope: head dim must be even and >= 2");
        const int64_t rows = head_dim / 2;
        freqs = Tensor<T>::zeros({rows, 2});
        const double lo = M_PI, hi = 32.0 * M_PI;
        const int64_t per_axis = (rows + 1) / 2;
        for (int64_t k = 0; k < rows; ++k) {
            const int64_t axis = k % 2;
            const int64_t idx = k / 2;
            const double frac = per_axis > 1 ? double(idx) / double(per_axis - 1) : 0.0;
            freqs.at(k, axis) = T(lo * std::pow(hi / lo, frac));
        }
    }

    void reg(ParamStore<T>& ps, const std::string& prefix) { ps.add(prefix + ".freqs", freqs); }

    Var<T> rotate(Tape<T>& tape, Var<T> feats, const Tensor<T>& coords) const {
        return rope_rotate(feats, tape.param(freqs), coords);
    }
};

// Normalized center coordinates (x, y) of every cell of an hc x wc grid,
// row-major: cell (r, c) -> ((c + 0.5) / wc, (r + 0.5) / hc).
template <typename T>
Tensor<T> grid_coords(int64_t hc, int64_t wc) {
    PRISM_CHECK_VALUE(hc >= 1 && wc >= 1, "grid_coords: empty grid");
    Tensor<T> out({hc * wc, 2});
    for (int64_t r = 0; r < hc; ++r)
        for (int64_t c = 0; c < wc; ++c) {
            out.at(r * wc + c, 0) = T((double(c) + 0.5) / double(wc));
            out.at(r * wc + c, 1) = T((double(r) + 0.5) / double(hc));
        }
    return out;
}

// Centers of rho x rho blocks of the same grid, still normalized by the FULL
// grid extent so pooled keys and unpooled queries share one coordinate frame.
// Block (r, c) covers cells [rho*r, rho*r + rho) x [rho*c, rho*c + rho) and
// its center is ((rho*c + rho/2) / wc, (rho*r + rho/2) / hc). rho = 1 reduces
// to grid_coords.
template <typename T>
Tensor<T> pooled_coords(int64_t hc, int64_t wc, int64_t rho) {
    PRISM_CHECK_VALUE(rho >= 1, "pooled_coords: rho must be >= 1");
    const int64_t hp = hc / rho, wp = wc / rho;
    PRISM_CHECK_VALUE(hp >= 1 && wp >= 1, "pooled_coords: grid smaller than pool");
    Tensor<T> out({hp * wp, 2});
    for (int64_t r = 0; r < hp; ++r)
        for (int64_t c = 0; c < wp; ++c) {
            out.at(r * wp + c, 0) = T((double(rho * c) + double(rho) / 2.0) / double(wc));
            out.at(r * wp + c, 1) = T((double(rho * r) + double(rho) / 2.0) / double(hc));
        }
    return out;
}

}  // namespace prism
