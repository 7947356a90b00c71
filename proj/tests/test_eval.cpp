#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "prism/eval.hpp"
#include "prism/image.hpp"

using namespace prism;

namespace {

Mat3 rot_axis_angle(double deg, Vec3 axis) {
    return Eigen::AngleAxisd(deg * M_PI / 180.0, axis.normalized()).toRotationMatrix();
}

Mat3 translation_h(double tx, double ty) {
    Mat3 t = Mat3::Identity();
    t(0, 2) = tx;
    t(1, 2) = ty;
    return t;
}

// Projective divide written out by hand, independent of apply_homography.
double corner_error_oracle(const Mat3& ha, const Mat3& hb, double w, double h) {
    const double cx[4] = {0, w, 0, w};
    const double cy[4] = {0, 0, h, h};
    double total = 0;
    for (int k = 0; k < 4; ++k) {
        const double za = ha(2, 0) * cx[k] + ha(2, 1) * cy[k] + ha(2, 2);
        const double xa = (ha(0, 0) * cx[k] + ha(0, 1) * cy[k] + ha(0, 2)) / za;
        const double ya = (ha(1, 0) * cx[k] + ha(1, 1) * cy[k] + ha(1, 2)) / za;
        const double zb = hb(2, 0) * cx[k] + hb(2, 1) * cy[k] + hb(2, 2);
        const double xb = (hb(0, 0) * cx[k] + hb(0, 1) * cy[k] + hb(0, 2)) / zb;
        const double yb = (hb(1, 0) * cx[k] + hb(1, 1) * cy[k] + hb(1, 2)) / zb;
        total += std::sqrt((xa - xb) * (xa - xb) + (ya - yb) * (ya - yb));
    }
    return total / 4.0;
}

Mat3 random_mild_homography(Rng& rng) {
    Mat3 h = Mat3::Identity();
    h(0, 0) = rng.uniform(0.9, 1.1);
    h(1, 1) = rng.uniform(0.9, 1.1);
    h(0, 1) = rng.uniform(-0.05, 0.05);
    h(1, 0) = rng.uniform(-0.05, 0.05);
    h(0, 2) = rng.uniform(-6.0, 6.0);
    h(1, 2) = rng.uniform(-6.0, 6.0);
    h(2, 0) = rng.uniform(-1e-4, 1e-4);
    h(2, 1) = rng.uniform(-1e-4, 1e-4);
    return h;
}

struct Scene {
    std::vector<Vec2> pa, pb;
};

// Forward-project random 3D points through camera A at the origin and camera
// B at (R, t); the known pose is the oracle the estimator must recover.
Scene make_scene(const Mat3& k, const Mat3& r, const Vec3& t, int n, uint64_t seed) {
    Rng rng(seed);
    Scene s;
    while (int(s.pa.size()) < n) {
        const Vec3 x(rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 1.5), rng.uniform(4.0, 9.0));
        const Vec3 xb = r * x + t;
        if (xb.z() < 0.5) continue;
        s.pa.push_back((k * x).hnormalized());
        s.pb.push_back((k * xb).hnormalized());
    }
    return s;
}

Mat3 test_intrinsics() {
    Mat3 k = Mat3::Identity();
    k(0, 0) = 460;
    k(1, 1) = 460;
    k(0, 2) = 320;
    k(1, 2) = 240;
    return k;
}

}  // namespace

TEST_CASE("corner error pins translations and matches a projective oracle") {
    CHECK(corner_error(Mat3::Identity(), Mat3::Identity(), 64, 64) == 0.0);

    Rng rng(600);
    // Post-composing a pure translation moves every warped corner by exactly
    // that offset, so the mean corner distance is the translation length. With
    // an affine base the divide is by exactly 1 and the pin is bitwise.
    Mat3 affine = random_mild_homography(rng);
    affine(2, 0) = 0.0;
    affine(2, 1) = 0.0;
    CHECK(corner_error(translation_h(3, 0) * affine, affine, 64, 48) == 3.0);
    CHECK(corner_error(translation_h(0, -3) * affine, affine, 64, 48) == 3.0);
    const Mat3 base = random_mild_homography(rng);
    CHECK(corner_error(translation_h(3, 0) * base, base, 64, 48) ==
          doctest::Approx(3.0).epsilon(1e-12));

    for (int trial = 0; trial < 30; ++trial) {
        const Mat3 ha = random_mild_homography(rng);
        const Mat3 hb = random_mild_homography(rng);
        const double got = corner_error(ha, hb, 64, 48);
        CHECK(got == doctest::Approx(corner_error_oracle(ha, hb, 64, 48)).epsilon(1e-10));
        CHECK(corner_error(hb, ha, 64, 48) == got);  // symmetric in est/gt
    }

    Mat3 singular = Mat3::Zero();
    singular(0, 0) = 1;
    CHECK_THROWS_AS(corner_error(singular, Mat3::Identity(), 64, 64), ValueError);
    CHECK_THROWS_AS(corner_error(Mat3::Identity(), singular, 64, 64), ValueError);
    CHECK_THROWS_AS(corner_error(Mat3::Identity(), Mat3::Identity(), 0, 64), ValueError);
}

TEST_CASE("auc integrates the exact step cdf") {
    CHECK(auc({0, 0, 0, 0, 0}, 5.0) == 1.0);

    // A constant error e contributes (T - e) / T once t passes e.
    CHECK(auc({3, 3, 3}, 3.0) == 0.0);
    CHECK(auc({3, 3, 3}, 10.0) == 0.7);

    // Errors {1, 2, 4} at T = 4: segments 1*(1/3) + 2*(2/3), over 4.
    CHECK(auc({1, 2, 4}, 4.0) == doctest::Approx(5.0 / 12.0).epsilon(1e-12));
    CHECK(auc({4, 1, 2}, 4.0) == auc({1, 2, 4}, 4.0));  // order-free

    Rng rng(601);
    std::vector<double> errors;
    for (int i = 0; i < 40; ++i) errors.push_back(rng.uniform(0.0, 12.0));
    double prev = 0.0;
    for (double t : {1.0, 2.0, 4.0, 8.0, 16.0, 64.0}) {
        const double a = auc(errors, t);
        CHECK(a >= prev - 1e-12);  // averaging a CDF over a longer span never shrinks it
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        prev = a;
    }

    CHECK_THROWS_AS(auc({}, 3.0), ValueError);
    CHECK_THROWS_AS(auc({1.0}, 0.0), ValueError);
    CHECK_THROWS_AS(auc({1.0}, -2.0), ValueError);
    CHECK_THROWS_AS(auc({-0.5}, 3.0), ValueError);
}

TEST_CASE("pose error measures rotation and translation angles") {
    RelativePose gt;
    gt.r = rot_axis_angle(20, Vec3(0.2, 0.9, -0.3));
    gt.t = Vec3(0.3, -0.4, 0.8).normalized();
    CHECK(pose_error_deg(gt, gt) == 0.0);

    RelativePose est = gt;
    est.r = rot_axis_angle(10, Vec3(1, 2, -1)) * gt.r;
    CHECK(pose_error_deg(est, gt) == doctest::Approx(10.0).epsilon(1e-9));

    est = gt;
    est.t = -gt.t;  // direction is sign-agnostic
    CHECK(pose_error_deg(est, gt) < 1e-5);

    // Swinging t about a perpendicular axis changes its direction by exactly
    // the rotation angle; the max picks it over the 5-degree rotation term.
    est.r = rot_axis_angle(5, Vec3(0, 1, 0)) * gt.r;
    est.t = rot_axis_angle(12, gt.t.cross(Vec3(0, 0, 1))) * gt.t;
    CHECK(pose_error_deg(est, gt) == doctest::Approx(12.0).epsilon(1e-9));

    RelativePose bad = gt;
    bad.t = Vec3::Zero();
    CHECK_THROWS_AS(pose_error_deg(bad, gt), ValueError);
}

TEST_CASE("homography estimation recovers exact and contaminated warps") {
    Rng rng(602);
    const Mat3 h_true = random_mild_homography(rng);
    std::vector<Vec2> pa, pb;
    for (int i = 0; i < 40; ++i) {
        const Vec2 p(rng.uniform(4.0, 60.0), rng.uniform(4.0, 60.0));
        pa.push_back(p);
        pb.push_back(apply_homography(h_true, p));
    }
    CHECK(corner_error(estimate_homography(pa, pb), h_true, 64, 64) < 1e-6);

    // Minimal noise-free sample.
    std::vector<Vec2> qa(pa.begin(), pa.begin() + 4), qb(pb.begin(), pb.begin() + 4);
    CHECK(corner_error(estimate_homography(qa, qb), h_true, 64, 64) < 1e-6);

    // 30% gross outliers must not perturb the consensus fit.
    std::vector<Vec2> ca = pa, cb = pb;
    for (int i = 0; i < 12; ++i) {
        ca.push_back(Vec2(rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)));
        cb.push_back(Vec2(rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)) + Vec2(25, -18));
    }
    CHECK(corner_error(estimate_homography(ca, cb), h_true, 64, 64) < 1e-6);

    CHECK_THROWS_AS(estimate_homography({Vec2(0, 0), Vec2(1, 0), Vec2(0, 1)},
                                        {Vec2(0, 0), Vec2(1, 0), Vec2(0, 1)}),
                    NoPoseError);
    CHECK_THROWS_AS(estimate_homography(pa, qb), ShapeError);
}

TEST_CASE("essential pose estimation recovers synthetic viewpoints") {
    const Mat3 k = test_intrinsics();

    RelativePose gt;
    gt.r = rot_axis_angle(8, Vec3(0.3, 1.0, 0.2));
    gt.t = Vec3(0.7, 0.2, -0.1).normalized();
    Scene s = make_scene(k, gt.r, gt.t, 50, 603);
    CHECK(pose_error_deg(estimate_pose(s.pa, s.pb, k, k), gt) < 0.1);

    // Rotation-dominant view change: 10 degrees about the optical axis.
    gt.r = rot_axis_angle(10, Vec3(0, 0, 1));
    gt.t = Vec3(0.5, -0.3, 0.8).normalized();
    s = make_scene(k, gt.r, gt.t, 60, 604);
    CHECK(pose_error_deg(estimate_pose(s.pa, s.pb, k, k), gt) < 0.1);

    // Minimal eight-point sample, still noise-free.
    Scene m = make_scene(k, gt.r, gt.t, 8, 605);
    CHECK(pose_error_deg(estimate_pose(m.pa, m.pb, k, k), gt) < 0.1);

    std::vector<Vec2> seven(m.pa.begin(), m.pa.begin() + 7);
    CHECK_THROWS_AS(estimate_pose(seven, seven, k, k), NoPoseError);

    // A consensus set of identical matches carries no epipolar constraint.
    std::vector<Vec2> same_a(10, Vec2(320, 240)), same_b(10, Vec2(330, 250));
    CHECK_THROWS_AS(estimate_pose(same_a, same_b, k, k), NoPoseError);
}

TEST_CASE("pose estimation stays sub 0.1 degree across seeded viewpoints") {
    const Mat3 k = test_intrinsics();
    RansacOptions opts;
    opts.iterations = 64;
    for (int trial = 0; trial < 100; ++trial) {
        Rng rig(700 + uint64_t(trial));
        const Vec3 axis(rig.uniform(-1.0, 1.0), rig.uniform(-1.0, 1.0), rig.uniform(-1.0, 1.0));
        RelativePose gt;
        gt.r = rot_axis_angle(rig.uniform(2.0, 20.0), axis.norm() > 1e-6 ? axis : Vec3(0, 1, 0));
        gt.t = Vec3(rig.uniform(-1.0, 1.0), rig.uniform(-1.0, 1.0), rig.uniform(-0.5, 0.5));
        if (gt.t.norm() < 1e-3) gt.t = Vec3(1, 0, 0);
        gt.t.normalize();
        // 30 noise-free matches: the consensus set is the whole input, well
        // above the eight-match floor, so recovery must be near-exact.
        const Scene s = make_scene(k, gt.r, gt.t, 30, 9000 + uint64_t(trial));
        opts.seed = 40 + uint64_t(trial);
        CHECK(pose_error_deg(estimate_pose(s.pa, s.pb, k, k, opts), gt) < 0.1);
    }
}

TEST_CASE("report table and error curve render") {
    const std::string table = format_auc_table({3, 5, 10}, {0.5, 0.625, 0.75}, "px", 12, 1);
    CHECK(table.find("threshold(px)") != std::string::npos);
    CHECK(table.find("0.5000") != std::string::npos);
    CHECK(table.find("0.6250") != std::string::npos);
    CHECK(table.find("pairs: 12") != std::string::npos);
    CHECK(table.find("estimation failures: 1") != std::string::npos);
    CHECK_THROWS_AS(format_auc_table({3, 5}, {0.5}, "px", 1, 0), ShapeError);

    const Image img = render_error_curve({1, 2, 4}, 5.0);
    CHECK(img.dim(0) == 320);
    CHECK(img.dim(1) == 480);

    // The curve starts on the x axis (no error is <= 0) and reaches the top
    // of the plot box once t passes the largest error.
    const int64_t left = 40, right = 480 - 12, top = 12, bottom = 320 - 24;
    const auto top_dark = [&](int64_t x) {
        for (int64_t y = 0; y < img.dim(0); ++y)
            if (img.at(y, x) == 0.0f) return y;
        return int64_t(-1);
    };
    CHECK(top_dark(left) == bottom);
    CHECK(top_dark(right) == top);
    int64_t prev = top_dark(left);
    for (int64_t x = left; x <= right; ++x) {
        const int64_t y = top_dark(x);
        CHECK(y <= prev);  // cumulative curve never descends
        prev = y;
    }

    int64_t dark = 0;
    for (int64_t i = 0; i < img.numel(); ++i)
        if (img[i] < 0.5f) ++dark;
    CHECK(dark > 0);
    CHECK(dark < img.numel() / 5);  // line plot on a light background

    const std::string path = "eval_curve_test.png";
    save_png_gray(path, img);
    const Image back = load_png_gray(path);
    CHECK(back.same_shape(img));
    std::remove(path.c_str());

    CHECK_THROWS_AS(render_error_curve({}, 5.0), ValueError);
    CHECK_THROWS_AS(render_error_curve({1.0}, 0.0), ValueError);
}
