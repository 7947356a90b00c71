#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "prism/geometry.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Synthetic data: procedural textures, bounded homography sampling, warping,
// and small multi-plane scenes with depth for two-view pose ground truth.
// Everything is deterministic under the caller's Rng.
// ---------------------------------------------------------------------------

/// Multi-octave value noise plus a faint checkerboard and a few solid
/// rectangles; gives matchable structure at several scales with no assets.
inline Image procedural_texture(int64_t H, int64_t W, Rng& rng) {
    Image img = Image::zeros({H, W});

    double amp_total = 0.0;
    for (int octave = 0; octave < 4; ++octave) {
        const int64_t cell = 32 >> octave;  // 32, 16, 8, 4 px lattices
        const double amp = 1.0 / double(1 << octave);
        amp_total += amp;
        const int64_t gw = W / cell + 2, gh = H / cell + 2;
        Tensor<float> lattice({gh, gw});
        for (int64_t i = 0; i < lattice.numel(); ++i) lattice[i] = float(rng.uniform());
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double gx = double(x) / double(cell), gy = double(y) / double(cell);
                const int64_t x0 = int64_t(gx), y0 = int64_t(gy);
                const double ax = gx - double(x0), ay = gy - double(y0);
                const double v =
                    (1 - ay) * ((1 - ax) * lattice.at(y0, x0) + ax * lattice.at(y0, x0 + 1)) +
                    ay * ((1 - ax) * lattice.at(y0 + 1, x0) + ax * lattice.at(y0 + 1, x0 + 1));
                img.at(y, x) += float(amp * v);
            }
    }
    img.scale_(float(1.0 / amp_total));

    const int64_t check = 16 + 8 * rng.uniform_int(0, 2);
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            if (((x / check) + (y / check)) % 2 == 0)
                img.at(y, x) = 0.85f * img.at(y, x) + 0.15f;

    const int nrect = int(rng.uniform_int(4, 8));
    for (int r = 0; r < nrect; ++r) {
        const int64_t rw = rng.uniform_int(6, std::max<int64_t>(7, W / 4));
        const int64_t rh = rng.uniform_int(6, std::max<int64_t>(7, H / 4));
        const int64_t x0 = rng.uniform_int(0, std::max<int64_t>(0, W - rw - 1));
        const int64_t y0 = rng.uniform_int(0, std::max<int64_t>(0, H - rh - 1));
        const float v = float(rng.uniform());
        for (int64_t y = y0; y < y0 + rh; ++y)
            for (int64_t x = x0; x < x0 + rw; ++x)
                img.at(y, x) = 0.35f * img.at(y, x) + 0.65f * v;
    }
    return img;
}

struct SyntheticPairSpec {
    uint64_t seed = 0;
    int64_t height = 128, width = 128;
    double max_rotation_deg = 15.0;
    double scale_min = 0.8, scale_max = 1.25;
    double max_translation_frac = 0.1;  // of each image side
    double perspective_eps = 2e-4;
    double brightness_jitter = 0.1;  // additive, in [0,1] intensity units
    double contrast_jitter = 0.1;    // multiplicative, around 1

    void validate() const {
        PRISM_CHECK_VALUE(scale_min > 0 && scale_max >= scale_min, "scale bounds invalid");
        PRISM_CHECK_VALUE(height >= 16 && width >= 16, "image too small");
        PRISM_CHECK_VALUE(perspective_eps >= 0 && max_translation_frac >= 0 &&
                              max_rotation_deg >= 0,
                          "negative jitter bound");
    }
};

/// Sample an invertible homography about the image center within the spec
/// bounds. Resamples on numerical degeneracy (condition number > 1e8).
inline Mat3 sample_homography(const SyntheticPairSpec& spec, Rng& rng) {
    spec.validate();
    const double cx = double(spec.width) / 2.0, cy = double(spec.height) / 2.0;
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double th = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg) * M_PI / 180.0;
        const double s = rng.uniform(spec.scale_min, spec.scale_max);
        const double tx = rng.uniform(-1.0, 1.0) * spec.max_translation_frac * double(spec.width);
        const double ty = rng.uniform(-1.0, 1.0) * spec.max_translation_frac * double(spec.height);
        const double px = rng.uniform(-spec.perspective_eps, spec.perspective_eps);
        const double py = rng.uniform(-spec.perspective_eps, spec.perspective_eps);

        Mat3 M = Mat3::Identity();
        M(0, 0) = s * std::cos(th);
        M(0, 1) = -s * std::sin(th);
        M(1, 0) = s * std::sin(th);
        M(1, 1) = s * std::cos(th);
        M(2, 0) = px;
        M(2, 1) = py;

        Mat3 Tc = Mat3::Identity(), Tb = Mat3::Identity();
        Tc(0, 2) = -cx;
        Tc(1, 2) = -cy;
        Tb(0, 2) = cx + tx;
        Tb(1, 2) = cy + ty;
        Mat3 H = Tb * M * Tc;
        if (condition_number(H) <= 1e8 && std::abs(H.determinant()) > 1e-12) return H;
    }
    throw ValueError("could not sample a well-conditioned homography within bounds");
}

/// Render B(q) = bilinear(A, H^-1 q) over pixel centers; outside taps are 0.
inline Image warp_image(const Image& a, const Mat3& H) {
    const Mat3 Hinv = H.inverse();
    const int64_t Ht = a.dim(0), Wt = a.dim(1);
    Image b({Ht, Wt});
    for (int64_t y = 0; y < Ht; ++y)
        for (int64_t x = 0; x < Wt; ++x) {
            const Vec2 p = apply_homography(Hinv, {double(x) + 0.5, double(y) + 0.5});
            b.at(y, x) = bilinear_sample(a, p.x(), p.y());
        }
    return b;
}

/// v -> clamp(c*v + (1-c)*0.5 + b). Written so c=1, b=0 is an exact identity.
inline void photometric_jitter(Image& img, double contrast, double brightness) {
    const float c = float(contrast);
    const float off = float((1.0 - contrast) * 0.5 + brightness);
    for (int64_t i = 0; i < img.numel(); ++i)
        img[i] = std::min(1.0f, std::max(0.0f, c * img[i] + off));
}

struct SyntheticPair {
    Image a, b;
    GroundTruthGeometry gt;
};

/// Deterministic pair generation: A is a procedural texture (or the provided
/// base), B is A warped by a sampled homography plus photometric jitter.
inline SyntheticPair generate_pair(const SyntheticPairSpec& spec, const Image* base = nullptr) {
    spec.validate();
    Rng root(spec.seed);
    Rng tex_rng = root.fork(0);
    Rng hom_rng = root.fork(1);
    Rng photo_rng = root.fork(2);

    SyntheticPair out;
    out.a = base ? *base : procedural_texture(spec.height, spec.width, tex_rng);
    PRISM_CHECK_SHAPE(out.a.dim(0) == spec.height && out.a.dim(1) == spec.width,
                      "base image does not match spec size");
    const Mat3 H = sample_homography(spec, hom_rng);
    out.b = warp_image(out.a, H);
    const double contrast =
        photo_rng.uniform(1.0 - spec.contrast_jitter, 1.0 + spec.contrast_jitter);
    const double brightness =
        photo_rng.uniform(-spec.brightness_jitter, spec.brightness_jitter);
    photometric_jitter(out.b, contrast, brightness);
    out.gt = GroundTruthGeometry::homography(H);
    return out;
}

// ---------------------------------------------------------------------------
// Two-view scenes with metric depth: a few fronto-parallel textured planes at
// distinct depths, rendered into both cameras by their plane-induced
// homographies with z-buffer compositing. Gives non-planar structure so an
// essential matrix is well defined.
// ---------------------------------------------------------------------------

struct SceneSpec {
    uint64_t seed = 0;
    int64_t height = 128, width = 128;
    int planes = 3;
    double depth_near = 4.0, depth_far = 10.0;
    double focal = 120.0;
    double max_rotation_deg = 6.0;   // camera B orientation jitter
    double max_baseline = 1.0;       // camera B position jitter (world units)
};

struct SyntheticScene {
    Image a, b;
    GroundTruthGeometry gt;  // pose + depth
};

namespace synth_detail {

inline Mat3 rotation_xyz(double rx, double ry, double rz) {
    Mat3 Rx = Mat3::Identity(), Ry = Mat3::Identity(), Rz = Mat3::Identity();
    Rx(1, 1) = std::cos(rx); Rx(1, 2) = -std::sin(rx);
    Rx(2, 1) = std::sin(rx); Rx(2, 2) = std::cos(rx);
    Ry(0, 0) = std::cos(ry); Ry(0, 2) = std::sin(ry);
    Ry(2, 0) = -std::sin(ry); Ry(2, 2) = std::cos(ry);
    Rz(0, 0) = std::cos(rz); Rz(0, 1) = -std::sin(rz);
    Rz(1, 0) = std::sin(rz); Rz(1, 1) = std::cos(rz);
    return Rz * Ry * Rx;
}

}  // namespace synth_detail

/// Render a multi-plane scene into two cameras. Camera A is the world frame
/// (R=I, t=0) and camera B is jittered. The scene is a full-frame background
/// plane at depth_far plus smaller fronto-parallel patches at nearer depths,
/// so the visible geometry is genuinely non-planar (an essential matrix is
/// well defined). Each plane's texture is pinned to camera A's pixel grid:
/// world point of texel (u, v) on plane z = d is d * K^-1 (u, v, 1).
inline SyntheticScene generate_scene(const SceneSpec& spec) {
    PRISM_CHECK_VALUE(spec.planes >= 2, "scene needs at least two planes for parallax");
    Rng root(spec.seed);
    Rng tex_rng = root.fork(0);
    Rng cam_rng = root.fork(1);
    Rng rect_rng = root.fork(2);

    const int64_t H = spec.height, W = spec.width;
    Mat3 K = Mat3::Identity();
    K(0, 0) = spec.focal;
    K(1, 1) = spec.focal;
    K(0, 2) = double(W) / 2.0;
    K(1, 2) = double(H) / 2.0;

    const Mat3 R_A = Mat3::Identity();
    const Vec3 t_A = Vec3::Zero();
    const double j = spec.max_rotation_deg * M_PI / 180.0;
    const Mat3 R_B = synth_detail::rotation_xyz(cam_rng.uniform(-j, j), cam_rng.uniform(-j, j),
                                                cam_rng.uniform(-j, j));
    const Vec3 c_B(cam_rng.uniform(-spec.max_baseline, spec.max_baseline),
                   cam_rng.uniform(-spec.max_baseline, spec.max_baseline),
                   cam_rng.uniform(-spec.max_baseline, spec.max_baseline) * 0.3);
    const Vec3 t_B = -R_B * c_B;  // world-to-camera for camera center c_B

    struct Plane {
        double depth;
        double x0, y0, x1, y1;  // valid texel region (camera-A pixel coords)
        Image tex;
    };
    std::vector<Plane> planes;
    // background: farthest, covers the full frame
    planes.push_back({spec.depth_far, 0.0, 0.0, double(W), double(H),
                      procedural_texture(H, W, tex_rng)});
    for (int k = 1; k < spec.planes; ++k) {
        const double frac = double(k) / double(spec.planes);
        const double d = spec.depth_far + frac * (spec.depth_near - spec.depth_far);
        const double rw = rect_rng.uniform(0.25, 0.45) * double(W);
        const double rh = rect_rng.uniform(0.25, 0.45) * double(H);
        const double x0 = rect_rng.uniform(0.05, 0.9) * (double(W) - rw);
        const double y0 = rect_rng.uniform(0.05, 0.9) * (double(H) - rh);
        planes.push_back({d, x0, y0, x0 + rw, y0 + rh, procedural_texture(H, W, tex_rng)});
    }

    SyntheticScene out;
    out.a = Image::zeros({H, W});
    out.b = Image::zeros({H, W});
    Tensor<float> depth_a = Tensor<float>::zeros({H, W});
    Tensor<float> depth_b = Tensor<float>::zeros({H, W});

    const Mat3 Kinv = K.inverse();
    struct Cam {
        Mat3 R;
        Vec3 center;  // in world coords
        Image* img;
        Tensor<float>* depth;
    };
    Cam cams[2] = {{R_A, Vec3::Zero(), &out.a, &depth_a}, {R_B, c_B, &out.b, &depth_b}};

    for (Cam& cam : cams)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const Vec3 ray =
                    cam.R.transpose() * (Kinv * Vec3(double(x) + 0.5, double(y) + 0.5, 1.0));
                double best_z = 0.0;
                float best_v = 0.0f;
                for (const Plane& pl : planes) {
                    if (std::abs(ray.z()) < 1e-12) continue;
                    const double s = (pl.depth - cam.center.z()) / ray.z();
                    if (s <= 0) continue;
                    const Vec3 Xw = cam.center + s * ray;
                    const double tx = K(0, 0) * Xw.x() / pl.depth + K(0, 2);
                    const double ty = K(1, 1) * Xw.y() / pl.depth + K(1, 2);
                    if (tx < pl.x0 || tx >= pl.x1 || ty < pl.y0 || ty >= pl.y1) continue;
                    const double z_cam = (cam.R * Xw).z() - (cam.R * cam.center).z();
                    if (z_cam <= 0) continue;
                    if (best_z == 0.0 || z_cam < best_z) {
                        best_z = z_cam;
                        best_v = bilinear_sample(pl.tex, tx, ty);
                    }
                }
                cam.img->at(y, x) = best_v;
                cam.depth->at(y, x) = float(best_z);
            }

    out.gt = GroundTruthGeometry::pose_depth(K, K, R_A, t_A, R_B, t_B, std::move(depth_a),
                                             std::move(depth_b));
    return out;
}

}  // namespace prism
