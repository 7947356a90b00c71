#pragma once

// Evaluation metrics: homography corner error, exact cumulative-error AUC,
// robust homography / relative-pose estimation from point matches, and a
// small plain-text + PNG reporting layer for the eval CLI.
//
// The estimators are deliberately minimal: Hartley-normalized DLT (resp.
// eight-point) inside a fixed-iteration seeded RANSAC loop, followed by a
// refit on the consensus set. They are meant to score matches, not to be a
// general-purpose SfM toolbox, so there is no iterative polishing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prism/core.hpp"
#include "prism/geometry.hpp"
#include "prism/image.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean distance between the four image corners warped by `h_est` and by
/// `h_gt`. Corners are (0,0), (w,0), (0,h), (w,h). Both homographies must be
/// invertible; the metric is symmetric in its two arguments.
inline double corner_error(const Mat3& h_est, const Mat3& h_gt, int64_t width, int64_t height) {
    PRISM_CHECK_VALUE(width > 0 && height > 0, "corner_error: image size must be positive");
    PRISM_CHECK_VALUE(std::abs(h_est.determinant()) > 1e-12, "corner_error: estimated homography is singular");
    PRISM_CHECK_VALUE(std::abs(h_gt.determinant()) > 1e-12, "corner_error: reference homography is singular");
    const double w = double(width), h = double(height);
    const Vec2 corners[4] = {Vec2(0, 0), Vec2(w, 0), Vec2(0, h), Vec2(w, h)};
    double total = 0.0;
    for (const Vec2& c : corners) {
        total += (apply_homography(h_est, c) - apply_homography(h_gt, c)).norm();
    }
    return total / 4.0;
}

/// Area under the cumulative error curve frac(err <= t) for t in [0, T],
/// normalized by T. Computed exactly from the sorted step function, no
/// binning. Errors must be non-negative and non-empty; T must be positive.
inline double auc(std::vector<double> errors, double threshold) {
    PRISM_CHECK_VALUE(threshold > 0.0, "auc: threshold must be positive");
    PRISM_CHECK_VALUE(!errors.empty(), "auc: no errors given");
    for (double e : errors) {
        PRISM_CHECK_VALUE(e >= 0.0 && std::isfinite(e), "auc: errors must be finite and >= 0");
    }
    std::sort(errors.begin(), errors.end());
    const auto n = double(errors.size());
    // The CDF jumps to (k+1)/n at errors[k]; integrate the flat segments
    // between consecutive jump points, clipped to [0, T].
    double area = 0.0;
    for (size_t k = 0; k < errors.size(); ++k) {
        const double lo = std::min(errors[k], threshold);
        const double hi = (k + 1 < errors.size()) ? std::min(errors[k + 1], threshold) : threshold;
        area += (hi - lo) * double(k + 1) / n;
    }
    return area / threshold;
}

/// Relative pose of camera B w.r.t. camera A; `t` is unit length (scale is
/// unobservable from an essential matrix).
struct RelativePose {
    Mat3 r = Mat3::Identity();
    Vec3 t = Vec3(0, 0, 1);
};

/// Pose error in degrees: max of the rotation angle between the two rotations
/// and the (sign-agnostic) angle between the two translation directions.
inline double pose_error_deg(const RelativePose& est, const RelativePose& gt) {
    PRISM_CHECK_VALUE(est.t.norm() > 1e-12 && gt.t.norm() > 1e-12, "pose_error_deg: zero translation");
    const double tr = (est.r.transpose() * gt.r).trace();
    const double cr = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
    const double rot = std::acos(cr);
    const double ct = std::abs(est.t.normalized().dot(gt.t.normalized()));
    const double trans = std::acos(std::clamp(ct, 0.0, 1.0));
    return std::max(rot, trans) * 180.0 / M_PI;
}

// ---------------------------------------------------------------------------
// Robust estimation
// ---------------------------------------------------------------------------

struct RansacOptions {
    int iterations = 256;
    double inlier_px = 2.0;  // reprojection / Sampson threshold in pixels
    uint64_t seed = 7;
};

namespace eval_detail {

/// Hartley normalization: translate centroid to the origin and scale so the
/// mean distance from it is sqrt(2). Returns the 3x3 conditioning transform.
inline Mat3 conditioning_transform(const std::vector<Vec2>& pts, const std::vector<int>& idx) {
    Vec2 mean = Vec2::Zero();
    for (int i : idx) mean += pts[size_t(i)];
    mean /= double(idx.size());
    double dist = 0.0;
    for (int i : idx) dist += (pts[size_t(i)] - mean).norm();
    dist /= double(idx.size());
    const double s = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
    Mat3 t = Mat3::Identity();
    t(0, 0) = s;
    t(1, 1) = s;
    t(0, 2) = -s * mean.x();
    t(1, 2) = -s * mean.y();
    return t;
}

/// Direct linear transform for a homography mapping pa[i] -> pb[i] over the
/// selected indices (at least 4). Returns a matrix with unit Frobenius norm.
inline Mat3 fit_homography_dlt(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                               const std::vector<int>& idx) {
    const Mat3 ta = conditioning_transform(pa, idx);
    const Mat3 tb = conditioning_transform(pb, idx);
    Eigen::MatrixXd a(2 * idx.size(), 9);
    for (size_t r = 0; r < idx.size(); ++r) {
        const Vec2 u = (ta * pa[size_t(idx[r])].homogeneous()).hnormalized();
        const Vec2 v = (tb * pb[size_t(idx[r])].homogeneous()).hnormalized();
        a.row(2 * r) << u.x(), u.y(), 1, 0, 0, 0, -v.x() * u.x(), -v.x() * u.y(), -v.x();
        a.row(2 * r + 1) << 0, 0, 0, u.x(), u.y(), 1, -v.y() * u.x(), -v.y() * u.y(), -v.y();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const Eigen::VectorXd h = svd.matrixV().col(8);
    Mat3 hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    Mat3 out = tb.inverse() * hn * ta;
    const double norm = out.norm();
    PRISM_CHECK_VALUE(norm > 1e-12, "fit_homography_dlt: degenerate sample");
    return out / norm;
}

/// Eight-point essential matrix from normalized (calibrated) coordinates,
/// projected onto the essential manifold via SVD.
inline Mat3 fit_essential(const std::vector<Vec2>& xa, const std::vector<Vec2>& xb,
                          const std::vector<int>& idx) {
    const Mat3 ta = conditioning_transform(xa, idx);
    const Mat3 tb = conditioning_transform(xb, idx);
    Eigen::MatrixXd a(idx.size(), 9);
    for (size_t r = 0; r < idx.size(); ++r) {
        const Vec2 u = (ta * xa[size_t(idx[r])].homogeneous()).hnormalized();
        const Vec2 v = (tb * xb[size_t(idx[r])].homogeneous()).hnormalized();
        a.row(r) << v.x() * u.x(), v.x() * u.y(), v.x(),
                    v.y() * u.x(), v.y() * u.y(), v.y(),
                    u.x(), u.y(), 1.0;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const Eigen::VectorXd e = svd.matrixV().col(8);
    Mat3 en;
    en << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
    Mat3 f = tb.transpose() * en * ta;
    Eigen::JacobiSVD<Mat3> svd3(f, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return svd3.matrixU() * Eigen::Vector3d(1, 1, 0).asDiagonal() * svd3.matrixV().transpose();
}

/// First-order (Sampson) approximation of the squared epipolar distance.
inline double sampson_sq(const Mat3& e, const Vec2& xa, const Vec2& xb) {
    const Vec3 pa = xa.homogeneous();
    const Vec3 pb = xb.homogeneous();
    const Vec3 ea = e * pa;
    const Vec3 eb = e.transpose() * pb;
    const double num = pb.dot(ea);
    const double den = ea.x() * ea.x() + ea.y() * ea.y() + eb.x() * eb.x() + eb.y() * eb.y();
    if (den < 1e-18) return 1e30;
    return num * num / den;
}

/// Linear triangulation with P_A = [I|0], P_B = [R|t]. Returns depths in both
/// cameras (z_A, z_B).
inline std::array<double, 2> triangulated_depths(const Mat3& r, const Vec3& t,
                                                 const Vec2& xa, const Vec2& xb) {
    Eigen::Matrix<double, 3, 4> pa = Eigen::Matrix<double, 3, 4>::Zero();
    pa.block<3, 3>(0, 0) = Mat3::Identity();
    Eigen::Matrix<double, 3, 4> pb;
    pb.block<3, 3>(0, 0) = r;
    pb.col(3) = t;
    Eigen::Matrix4d a;
    a.row(0) = xa.x() * pa.row(2) - pa.row(0);
    a.row(1) = xa.y() * pa.row(2) - pa.row(1);
    a.row(2) = xb.x() * pb.row(2) - pb.row(0);
    a.row(3) = xb.y() * pb.row(2) - pb.row(1);
    Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
    Eigen::Vector4d x = svd.matrixV().col(3);
    if (std::abs(x(3)) < 1e-15) return {0.0, 0.0};
    const Vec3 xw = x.head<3>() / x(3);
    return {xw.z(), (r * xw + t).z()};
}

/// Draw `k` distinct indices from [0, n).
inline std::vector<int> sample_indices(Rng& rng, int n, int k) {
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[size_t(i)] = i;
    for (int i = 0; i < k; ++i) {
        const int j = int(rng.uniform_int(i, n - 1));
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }
    pool.resize(size_t(k));
    return pool;
}

}  // namespace eval_detail

/// Robust homography from pixel matches pa[i] <-> pb[i]. RANSAC with a
/// 4-point DLT model and forward-transfer inlier test, then a refit on the
/// best consensus set. Throws NoPoseError when no usable model exists.
inline Mat3 estimate_homography(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                                const RansacOptions& opts = {}) {
    PRISM_CHECK_SHAPE(pa.size() == pb.size(), "estimate_homography: match lists differ in length");
    const int n = int(pa.size());
    if (n < 4) throw NoPoseError("estimate_homography: need at least 4 matches, got " + std::to_string(n));
    PRISM_CHECK_VALUE(opts.iterations > 0 && opts.inlier_px > 0, "estimate_homography: bad RANSAC options");

    Rng rng(opts.seed);
    const double th2 = opts.inlier_px * opts.inlier_px;
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[size_t(i)] = i;

    std::vector<int> best;
    for (int it = 0; it < opts.iterations; ++it) {
        const std::vector<int> sample = (n == 4) ? all : eval_detail::sample_indices(rng, n, 4);
        Mat3 h;
        try {
            h = eval_detail::fit_homography_dlt(pa, pb, sample);
        } catch (const ValueError&) {
            continue;  // collinear sample
        }
        if (std::abs(h.determinant()) < 1e-12) continue;
        std::vector<int> inliers;
        for (int i = 0; i < n; ++i) {
            const Vec3 q = h * pa[size_t(i)].homogeneous();
            if (std::abs(q.z()) < 1e-12) continue;
            if ((q.hnormalized() - pb[size_t(i)]).squaredNorm() < th2) inliers.push_back(i);
        }
        if (inliers.size() > best.size()) best = std::move(inliers);
        if (int(best.size()) == n) break;
    }
    if (best.size() < 4) throw NoPoseError("estimate_homography: consensus set too small");
    Mat3 h = eval_detail::fit_homography_dlt(pa, pb, best);
    if (std::abs(h.determinant()) < 1e-12) throw NoPoseError("estimate_homography: refit degenerate");
    return h;
}

/// Robust relative pose from pixel matches. Pixels are first mapped through
/// the inverse intrinsics; the essential matrix is estimated with the
/// eight-point algorithm inside RANSAC (Sampson inlier test, threshold
/// expressed in pixels and divided by the mean focal length), refit on the
/// consensus set, and decomposed into the chirality-consistent (R, t).
inline RelativePose estimate_pose(const std::vector<Vec2>& pa, const std::vector<Vec2>& pb,
                                  const Mat3& k_a, const Mat3& k_b,
                                  const RansacOptions& opts = {}) {
    PRISM_CHECK_SHAPE(pa.size() == pb.size(), "estimate_pose: match lists differ in length");
    const int n = int(pa.size());
    if (n < 8) throw NoPoseError("estimate_pose: need at least 8 matches, got " + std::to_string(n));
    PRISM_CHECK_VALUE(opts.iterations > 0 && opts.inlier_px > 0, "estimate_pose: bad RANSAC options");
    PRISM_CHECK_VALUE(std::abs(k_a.determinant()) > 1e-12 && std::abs(k_b.determinant()) > 1e-12,
                      "estimate_pose: singular intrinsics");

    std::vector<Vec2> xa(static_cast<size_t>(n)), xb(static_cast<size_t>(n));
    const Mat3 kai = k_a.inverse(), kbi = k_b.inverse();
    for (int i = 0; i < n; ++i) {
        xa[size_t(i)] = (kai * pa[size_t(i)].homogeneous()).hnormalized();
        xb[size_t(i)] = (kbi * pb[size_t(i)].homogeneous()).hnormalized();
    }
    const double focal = (k_a(0, 0) + k_a(1, 1) + k_b(0, 0) + k_b(1, 1)) / 4.0;
    const double th = opts.inlier_px / focal;
    const double th2 = th * th;

    Rng rng(opts.seed);
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[size_t(i)] = i;

    std::vector<int> best;
    for (int it = 0; it < opts.iterations; ++it) {
        const std::vector<int> sample = (n == 8) ? all : eval_detail::sample_indices(rng, n, 8);
        const Mat3 e = eval_detail::fit_essential(xa, xb, sample);
        std::vector<int> inliers;
        for (int i = 0; i < n; ++i) {
            if (eval_detail::sampson_sq(e, xa[size_t(i)], xb[size_t(i)]) < th2) inliers.push_back(i);
        }
        if (inliers.size() > best.size()) best = std::move(inliers);
        if (int(best.size()) == n) break;
    }
    if (best.size() < 8) throw NoPoseError("estimate_pose: consensus set too small");
    // Repeated matches shrink the effective constraint count: require eight
    // distinct correspondences, not merely eight indices.
    std::vector<std::array<double, 4>> uniq;
    for (int i : best) {
        uniq.push_back({xa[size_t(i)].x(), xa[size_t(i)].y(), xb[size_t(i)].x(), xb[size_t(i)].y()});
    }
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (uniq.size() < 8) throw NoPoseError("estimate_pose: fewer than 8 distinct matches in consensus");
    const Mat3 e = eval_detail::fit_essential(xa, xb, best);

    Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    if (u.determinant() < 0) u = -u;
    if (v.determinant() < 0) v = -v;
    Mat3 w;
    w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Mat3 rots[2] = {u * w * v.transpose(), u * w.transpose() * v.transpose()};
    const Vec3 ts[2] = {u.col(2), -u.col(2)};

    RelativePose result;
    int best_front = -1;
    for (const Mat3& r : rots) {
        for (const Vec3& t : ts) {
            int front = 0;
            for (int i : best) {
                const auto z = eval_detail::triangulated_depths(r, t, xa[size_t(i)], xb[size_t(i)]);
                if (z[0] > 0 && z[1] > 0) ++front;
            }
            if (front > best_front) {
                best_front = front;
                result.r = r;
                result.t = t.normalized();
            }
        }
    }
    if (best_front <= 0) throw NoPoseError("estimate_pose: no candidate pose places points in front");
    return result;
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Plain-text AUC table, one row per threshold. `unit` is appended to the
/// threshold column header (e.g. "px" or "deg").
inline std::string format_auc_table(const std::vector<double>& thresholds,
                                    const std::vector<double>& auc_values,
                                    const std::string& unit, int64_t pairs, int64_t failures) {
    PRISM_CHECK_SHAPE(thresholds.size() == auc_values.size(), "format_auc_table: length mismatch");
    std::string out = "threshold(" + unit + ")  auc\n";
    char buf[96];
    for (size_t i = 0; i < thresholds.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%-15.6g %.4f\n", thresholds[i], auc_values[i]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "pairs: %lld  estimation failures: %lld\n",
                  static_cast<long long>(pairs), static_cast<long long>(failures));
    out += buf;
    return out;
}

/// Render the cumulative error curve frac(err <= t), t in [0, max_t], as a
/// grayscale plot. White background, light quartile grid, dark axes + curve.
inline Image render_error_curve(const std::vector<double>& errors, double max_t,
                                int64_t width = 480, int64_t height = 320) {
    PRISM_CHECK_VALUE(max_t > 0.0, "render_error_curve: max_t must be positive");
    PRISM_CHECK_VALUE(!errors.empty(), "render_error_curve: no errors given");
    PRISM_CHECK_VALUE(width >= 64 && height >= 64, "render_error_curve: canvas too small");
    std::vector<double> sorted = errors;
    std::sort(sorted.begin(), sorted.end());

    Image img = Image::full({height, width}, 1.0f);
    const int64_t left = 40, right = width - 12, top = 12, bottom = height - 24;
    for (int q = 1; q <= 4; ++q) {  // horizontal grid at 25% steps
        const int64_t y = bottom - (bottom - top) * q / 4;
        for (int64_t x = left; x <= right; ++x) img.at(y, x) = 0.85f;
    }
    for (int64_t x = left; x <= right; ++x) img.at(bottom, x) = 0.3f;
    for (int64_t y = top; y <= bottom; ++y) img.at(y, left) = 0.3f;

    const auto frac_leq = [&](double t) {
        const auto it = std::upper_bound(sorted.begin(), sorted.end(), t);
        return double(it - sorted.begin()) / double(sorted.size());
    };
    int64_t prev_y = bottom;
    for (int64_t x = left; x <= right; ++x) {
        const double t = max_t * double(x - left) / double(right - left);
        const double f = frac_leq(t);
        const int64_t y = bottom - int64_t(std::lround(f * double(bottom - top)));
        const int64_t y_lo = std::min(prev_y, y), y_hi = std::max(prev_y, y);
        for (int64_t yy = y_lo; yy <= y_hi; ++yy) img.at(yy, x) = 0.0f;  // join CDF jumps
        prev_y = y;
    }
    return img;
}

}  // namespace prism
