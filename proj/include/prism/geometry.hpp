#pragma once

#include <Eigen/Dense>

#include <optional>

#include "prism/image.hpp"

namespace prism {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

/// Apply a homography to a continuous image point.
inline Vec2 apply_homography(const Mat3& H, const Vec2& p) {
    Vec3 q = H * Vec3(p.x(), p.y(), 1.0);
    PRISM_CHECK_VALUE(std::abs(q.z()) > 1e-12, "homography maps point to infinity");
    return {q.x() / q.z(), q.y() / q.z()};
}

inline double condition_number(const Mat3& H) {
    Eigen::JacobiSVD<Mat3> svd(H);
    const double smin = svd.singularValues()(2);
    if (smin <= 0.0) return std::numeric_limits<double>::infinity();
    return svd.singularValues()(0) / smin;
}

inline bool is_orthonormal(const Mat3& R, double tol = 1e-9) {
    return ((R.transpose() * R) - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - 1.0) <= 1e-6;
}

/// Ground truth for one image pair: either a homography relating A to B, or
/// full two-view geometry (intrinsics + world-to-camera poses + depth maps).
struct GroundTruthGeometry {
    enum class Kind { Homography, PoseDepth };
    Kind kind = Kind::Homography;

    Mat3 H = Mat3::Identity();  // maps continuous A coords to B coords

    Mat3 K_A = Mat3::Identity(), K_B = Mat3::Identity();
    Mat3 R_A = Mat3::Identity(), R_B = Mat3::Identity();
    Vec3 t_A = Vec3::Zero(), t_B = Vec3::Zero();
    Tensor<float> depth_a, depth_b;  // [H x W], 0 marks invalid

    static GroundTruthGeometry homography(const Mat3& H) {
        PRISM_CHECK_VALUE(std::abs(H.determinant()) > 1e-12, "homography is singular");
        GroundTruthGeometry g;
        g.kind = Kind::Homography;
        g.H = H;
        return g;
    }

    static GroundTruthGeometry pose_depth(const Mat3& K_A, const Mat3& K_B, const Mat3& R_A,
                                          const Vec3& t_A, const Mat3& R_B, const Vec3& t_B,
                                          Tensor<float> depth_a, Tensor<float> depth_b) {
        PRISM_CHECK_VALUE(is_orthonormal(R_A) && is_orthonormal(R_B),
                          "pose rotations must be orthonormal with det +1");
        GroundTruthGeometry g;
        g.kind = Kind::PoseDepth;
        g.K_A = K_A;
        g.K_B = K_B;
        g.R_A = R_A;
        g.t_A = t_A;
        g.R_B = R_B;
        g.t_B = t_B;
        g.depth_a = std::move(depth_a);
        g.depth_b = std::move(depth_b);
        return g;
    }

    /// Swap the roles of the two images (inverts the geometry).
    GroundTruthGeometry swapped() const {
        GroundTruthGeometry g = *this;
        if (kind == Kind::Homography) {
            g.H = H.inverse();
        } else {
            std::swap(g.K_A, g.K_B);
            std::swap(g.R_A, g.R_B);
            std::swap(g.t_A, g.t_B);
            std::swap(g.depth_a, g.depth_b);
        }
        return g;
    }

    /// Camera-B-from-camera-A motion (world-to-camera convention).
    void relative_pose(Mat3& R_rel, Vec3& t_rel) const {
        PRISM_CHECK_VALUE(kind == Kind::PoseDepth, "relative pose requires pose ground truth");
        R_rel = R_B * R_A.transpose();
        t_rel = t_B - R_rel * t_A;
    }
};

/// Depth at a continuous point, looked up at the containing pixel; <= 0 or
/// out-of-range means invalid.
inline double depth_at(const Tensor<float>& depth, const Vec2& p) {
    const int64_t ix = int64_t(std::floor(p.x())), iy = int64_t(std::floor(p.y()));
    if (ix < 0 || iy < 0 || ix >= depth.dim(1) || iy >= depth.dim(0)) return 0.0;
    return double(depth.at(iy, ix));
}

struct Projection {
    Vec2 point;          // continuous coords in the target image
    double target_depth; // z in the target camera
};

/// Project a continuous point of image A into image B. For pose geometry the
/// source depth map supplies the ray length; returns nullopt when the source
/// depth is invalid or the point lands behind the target camera.
inline std::optional<Projection> project_point(const GroundTruthGeometry& g, const Vec2& p_a) {
    if (g.kind == GroundTruthGeometry::Kind::Homography)
        return Projection{apply_homography(g.H, p_a), 1.0};

    const double d = depth_at(g.depth_a, p_a);
    if (d <= 0.0) return std::nullopt;
    const Vec3 x_a = d * (g.K_A.inverse() * Vec3(p_a.x(), p_a.y(), 1.0));
    Mat3 R_rel;
    Vec3 t_rel;
    g.relative_pose(R_rel, t_rel);
    const Vec3 x_b = R_rel * x_a + t_rel;
    if (x_b.z() <= 1e-9) return std::nullopt;
    const Vec3 q = g.K_B * x_b;
    return Projection{Vec2(q.x() / q.z(), q.y() / q.z()), x_b.z()};
}

}  // namespace prism
