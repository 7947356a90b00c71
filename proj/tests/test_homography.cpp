#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "prism/dataset.hpp"
#include "prism/synth.hpp"

using namespace prism;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

double quad_area(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    auto cross = [](const Vec2& u, const Vec2& v) { return u.x() * v.y() - u.y() * v.x(); };
    return 0.5 * std::abs(cross(a, b) + cross(b, c) + cross(c, d) + cross(d, a));
}

}  // namespace

TEST_CASE("apply_homography identity and translation") {
    CHECK((apply_homography(Mat3::Identity(), {3.0, 4.0}) - Vec2(3, 4)).norm() == 0.0);
    Mat3 T = Mat3::Identity();
    T(0, 2) = 2.5;
    T(1, 2) = -1.0;
    CHECK((apply_homography(T, {3.0, 4.0}) - Vec2(5.5, 3.0)).norm() < 1e-15);
}

TEST_CASE("sampled homography respects exact scale bounds") {
    SyntheticPairSpec spec;
    spec.width = spec.height = 64;
    spec.scale_min = spec.scale_max = 2.0;
    spec.perspective_eps = 0.0;
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Mat3 H = sample_homography(spec, rng);
        // unit square around the center, warped corner by corner
        const Vec2 c(32.0, 32.0);
        auto w = [&](double dx, double dy) {
            return apply_homography(H, {c.x() + dx, c.y() + dy});
        };
        const double area =
            quad_area(w(-0.5, -0.5), w(0.5, -0.5), w(0.5, 0.5), w(-0.5, 0.5));
        CHECK(area == doctest::Approx(4.0).epsilon(1e-9));
    }
    // with perspective jitter the area is 4x only approximately
    spec.perspective_eps = 2e-4;
    Mat3 H = sample_homography(spec, rng);
    const double area = quad_area(apply_homography(H, {31.5, 31.5}),
                                  apply_homography(H, {32.5, 31.5}),
                                  apply_homography(H, {32.5, 32.5}),
                                  apply_homography(H, {31.5, 32.5}));
    CHECK(area == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("degenerate sampler bounds are rejected") {
    SyntheticPairSpec spec;
    spec.scale_min = 0.0;
    spec.scale_max = 0.0;
    Rng rng(6);
    CHECK_THROWS_AS(sample_homography(spec, rng), ValueError);
}

TEST_CASE("generate_pair is bitwise deterministic under seed") {
    SyntheticPairSpec spec;
    spec.seed = 77;
    spec.width = spec.height = 64;
    auto p1 = generate_pair(spec);
    auto p2 = generate_pair(spec);
    CHECK(max_abs_diff(p1.a, p2.a) == 0.0f);
    CHECK(max_abs_diff(p1.b, p2.b) == 0.0f);
    CHECK((p1.gt.H - p2.gt.H).cwiseAbs().maxCoeff() == 0.0);

    spec.seed = 78;
    auto p3 = generate_pair(spec);
    CHECK(max_abs_diff(p1.a, p3.a) > 0.0f);
}

TEST_CASE("zero jitter bounds give identity H and B == A bitwise") {
    SyntheticPairSpec spec;
    spec.seed = 9;
    spec.width = spec.height = 48;
    spec.max_rotation_deg = 0.0;
    spec.scale_min = spec.scale_max = 1.0;
    spec.max_translation_frac = 0.0;
    spec.perspective_eps = 0.0;
    spec.brightness_jitter = 0.0;
    spec.contrast_jitter = 0.0;
    auto p = generate_pair(spec);
    CHECK((p.gt.H - Mat3::Identity()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(max_abs_diff(p.a, p.b) == 0.0f);
}

TEST_CASE("integer translation warps pixels exactly") {
    Rng rng(13);
    Image a = procedural_texture(32, 32, rng);
    Mat3 T = Mat3::Identity();
    T(0, 2) = 8.0;  // B(x) = A(x - 8)
    Image b = warp_image(a, T);
    for (int64_t y = 0; y < 32; ++y)
        for (int64_t x = 0; x < 32; ++x) {
            const float expect = x >= 8 ? a.at(y, x - 8) : 0.0f;
            CHECK(b.at(y, x) == expect);
        }
}

TEST_CASE("rendered warp agrees with stored H within half a pixel") {
    // place a small blob, warp, and compare the blob centroid with H * p
    SyntheticPairSpec spec;
    spec.width = spec.height = 96;
    spec.perspective_eps = 0.0;
    spec.max_rotation_deg = 10.0;
    spec.scale_min = 0.9;
    spec.scale_max = 1.1;
    spec.max_translation_frac = 0.08;
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        Mat3 H = sample_homography(spec, rng);
        const Vec2 p(41.5, 52.5);
        Image a = Image::zeros({96, 96});
        for (int64_t dy = -1; dy <= 1; ++dy)
            for (int64_t dx = -1; dx <= 1; ++dx)
                a.at(52 + dy, 41 + dx) = (dx == 0 && dy == 0) ? 1.0f : 0.5f;
        Image b = warp_image(a, H);
        double mass = 0, mx = 0, my = 0;
        for (int64_t y = 0; y < 96; ++y)
            for (int64_t x = 0; x < 96; ++x) {
                mass += b.at(y, x);
                mx += (double(x) + 0.5) * b.at(y, x);
                my += (double(y) + 0.5) * b.at(y, x);
            }
        REQUIRE(mass > 0.0);
        const Vec2 expect = apply_homography(H, p);
        CHECK(std::abs(mx / mass - expect.x()) < 0.5);
        CHECK(std::abs(my / mass - expect.y()) < 0.5);
    }
}

TEST_CASE("homography text file round trips to full precision") {
    const auto dir = fresh_dir("prism_test_homog");
    Rng rng(31);
    Mat3 H;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) H(r, c) = rng.normal();
    const auto path = (dir / "x.homog").string();
    save_homog(path, H);
    Mat3 back = load_homog(path);
    CHECK((back - H).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("dataset index and pair round trip") {
    const auto root = fresh_dir("prism_test_dataset").string();
    CHECK(index_dataset(root).empty());

    SyntheticPairSpec spec;
    spec.seed = 3;
    spec.width = spec.height = 48;
    auto p = generate_pair(spec);
    save_pair(root, "pair_0000", p.a, p.b, p.gt);

    auto scene = generate_scene([] {
        SceneSpec s;
        s.seed = 4;
        s.height = 48;
        s.width = 48;
        return s;
    }());
    save_pair(root, "pair_0001", scene.a, scene.b, scene.gt);

    auto entries = index_dataset(root);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].name == "pair_0000");
    CHECK(entries[0].kind == GroundTruthGeometry::Kind::Homography);
    CHECK(entries[1].kind == GroundTruthGeometry::Kind::PoseDepth);

    auto lp = load_pair(entries[0]);
    CHECK((lp.gt.H - p.gt.H).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(lp.a.same_shape(p.a));
    CHECK(max_abs_diff(lp.a, p.a) <= 0.5f / 255.0f + 1e-6f);

    auto ls = load_pair(entries[1]);
    CHECK((ls.gt.R_B - scene.gt.R_B).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((ls.gt.t_B - scene.gt.t_B).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(max_abs_diff(ls.gt.depth_a, scene.gt.depth_a) == 0.0f);

    // strict mode flags a pair with missing geometry by name
    std::filesystem::create_directories(std::filesystem::path(root) / "pairs" / "broken");
    save_png_gray((std::filesystem::path(root) / "pairs" / "broken" / "a.png").string(), p.a);
    save_png_gray((std::filesystem::path(root) / "pairs" / "broken" / "b.png").string(), p.b);
    CHECK_THROWS_WITH_AS(index_dataset(root), doctest::Contains("broken"), IoError);
    CHECK(index_dataset(root, /*strict=*/false).size() == 2);
}

TEST_CASE("pose file round trip") {
    const auto dir = fresh_dir("prism_test_pose");
    SceneSpec s;
    s.seed = 5;
    s.height = 32;
    s.width = 32;
    auto scene = generate_scene(s);
    const auto path = (dir / "gt.pose").string();
    save_pose(path, scene.gt);
    auto back = load_pose(path);
    CHECK((back.K_A - scene.gt.K_A).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((back.R_B - scene.gt.R_B).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((back.t_B - scene.gt.t_B).cwiseAbs().maxCoeff() < 1e-15);

    std::ofstream(path) << "K_A 1 0 0 0 1 0 0 0 1 R_A";
    CHECK_THROWS_AS(load_pose(path), IoError);
}

TEST_CASE("scene generation: valid poses, parallax, and depth consistency") {
    SceneSpec s;
    s.seed = 17;
    s.height = 64;
    s.width = 64;
    auto scene = generate_scene(s);
    CHECK(is_orthonormal(scene.gt.R_B));

    // both depth maps mostly valid, with at least two distinct depths in A
    int valid_a = 0, valid_b = 0;
    std::set<float> depths;
    for (int64_t i = 0; i < scene.gt.depth_a.numel(); ++i) {
        valid_a += scene.gt.depth_a[i] > 0;
        valid_b += scene.gt.depth_b[i] > 0;
        if (scene.gt.depth_a[i] > 0) depths.insert(scene.gt.depth_a[i]);
    }
    CHECK(valid_a == 64 * 64);  // background covers camera A fully
    CHECK(valid_b > 64 * 64 / 2);
    CHECK(depths.size() >= 2);

    // projecting an A point with its depth lands on a B pixel whose stored
    // depth matches the transported depth (away from occlusions)
    int checked = 0, consistent = 0;
    for (int64_t y = 4; y < 60; y += 4)
        for (int64_t x = 4; x < 60; x += 4) {
            const Vec2 pa(double(x) + 0.5, double(y) + 0.5);
            auto proj = project_point(scene.gt, pa);
            if (!proj) continue;
            const double db = depth_at(scene.gt.depth_b, proj->point);
            if (db <= 0) continue;
            ++checked;
            consistent += std::abs(db - proj->target_depth) <= 0.2 * db;
        }
    REQUIRE(checked > 50);
    CHECK(double(consistent) / double(checked) > 0.8);
}

TEST_CASE("project_point matches apply_homography in homography mode") {
    Mat3 H = Mat3::Identity();
    H(0, 0) = 1.2;
    H(0, 2) = 3.0;
    H(1, 2) = -2.0;
    auto g = GroundTruthGeometry::homography(H);
    auto proj = project_point(g, {10.0, 20.0});
    REQUIRE(proj.has_value());
    CHECK((proj->point - apply_homography(H, {10.0, 20.0})).norm() == 0.0);

    // swapping inverts: project there and back
    auto g2 = g.swapped();
    auto back = project_point(g2, proj->point);
    REQUIRE(back.has_value());
    CHECK((back->point - Vec2(10.0, 20.0)).norm() < 1e-9);
}

TEST_CASE("degenerate geometry is rejected") {
    Mat3 Z = Mat3::Zero();
    CHECK_THROWS_AS(GroundTruthGeometry::homography(Z), ValueError);
    Mat3 notrot = Mat3::Identity() * 2.0;
    CHECK_THROWS_AS(GroundTruthGeometry::pose_depth(Mat3::Identity(), Mat3::Identity(), notrot,
                                                    Vec3::Zero(), Mat3::Identity(), Vec3::Zero(),
                                                    Tensor<float>(), Tensor<float>()),
                    ValueError);
}
