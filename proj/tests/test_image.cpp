#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "prism/image.hpp"

using namespace prism;

namespace {

std::filesystem::path tmpdir() {
    auto p = std::filesystem::temp_directory_path() / "prism_test_image";
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("png gray round trip is byte-exact") {
    Rng rng(11);
    Image img({17, 23});
    for (int64_t i = 0; i < img.numel(); ++i) img[i] = float(rng.uniform());
    const auto path = (tmpdir() / "rt.png").string();
    save_png_gray(path, img);
    Image back = load_png_gray(path);
    REQUIRE(back.same_shape(img));
    for (int64_t i = 0; i < img.numel(); ++i)
        CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);

    // quantized values survive a second cycle exactly
    save_png_gray(path, back);
    Image back2 = load_png_gray(path);
    CHECK(max_abs_diff(back, back2) == 0.0f);
}

TEST_CASE("png rgb writes and reloads as luma") {
    Tensor<float> rgb = Tensor<float>::zeros({3, 8, 9});
    for (int64_t y = 0; y < 8; ++y)
        for (int64_t x = 0; x < 9; ++x) rgb.at(0, y, x) = 1.0f;  // pure red
    const auto path = (tmpdir() / "rgb.png").string();
    save_png_rgb(path, rgb);
    Image back = load_png_gray(path);
    CHECK(back.dim(0) == 8);
    CHECK(back.dim(1) == 9);
    CHECK(back.at(3, 3) == doctest::Approx(0.299).epsilon(0.01));
}

TEST_CASE("png read failures raise IoError") {
    CHECK_THROWS_AS(load_png_gray("/nonexistent/nope.png"), IoError);
    const auto bad = (tmpdir() / "bad.png").string();
    std::ofstream(bad) << "this is not a png";
    CHECK_THROWS_AS(load_png_gray(bad), IoError);
}

TEST_CASE("bilinear sampling hits pixel centers exactly") {
    Image img = Image::from({2, 3}, {0.1f, 0.5f, 0.9f, 0.2f, 0.6f, 1.0f});
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 3; ++x)
            CHECK(bilinear_sample(img, double(x) + 0.5, double(y) + 0.5) == img.at(y, x));
}

TEST_CASE("bilinear sampling interpolates linearly and zeros outside") {
    Image img = Image::from({1, 2}, {0.0f, 1.0f});
    CHECK(bilinear_sample(img, 1.0, 0.5) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(bilinear_sample(img, 0.75, 0.5) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(bilinear_sample(img, -5.0, 0.5) == 0.0f);
    CHECK(bilinear_sample(img, 0.5, 9.0) == 0.0f);
    // half outside: the out-of-bounds tap contributes zero
    CHECK(bilinear_sample(img, 0.25, 0.5) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(sample_in_bounds(img, 1.0, 0.5));
    CHECK(!sample_in_bounds(img, 0.25, 0.5));
}

TEST_CASE("depth raster round trip is bitwise") {
    Rng rng(12);
    Tensor<float> d({9, 7});
    for (int64_t i = 0; i < d.numel(); ++i) d[i] = float(rng.uniform() * 10.0);
    const auto path = (tmpdir() / "d.depth").string();
    save_depth(path, d);
    Tensor<float> back = load_depth(path);
    REQUIRE(back.same_shape(d));
    for (int64_t i = 0; i < d.numel(); ++i) CHECK(back[i] == d[i]);
}

TEST_CASE("depth loader rejects malformed files") {
    const auto dir = tmpdir();
    const auto trunc = (dir / "trunc.depth").string();
    {
        Tensor<float> d = Tensor<float>::ones({4, 4});
        save_depth(trunc, d);
        std::filesystem::resize_file(trunc, 3 * 4 + 5);  // cut into the raster
    }
    CHECK_THROWS_AS(load_depth(trunc), IoError);

    const auto badhdr = (dir / "badhdr.depth").string();
    {
        std::ofstream out(badhdr, std::ios::binary);
        const int32_t hdr[3] = {4, 4, 2};
        out.write(reinterpret_cast<const char*>(hdr), sizeof(hdr));
        std::vector<float> z(16, 0.0f);
        out.write(reinterpret_cast<const char*>(z.data()), 16 * 4);
    }
    CHECK_THROWS_AS(load_depth(badhdr), IoError);
    CHECK_THROWS_AS(load_depth("/nonexistent/d.depth"), IoError);
}
