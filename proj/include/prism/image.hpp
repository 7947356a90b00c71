#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "prism/tensor.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// Grayscale images are Tensor<float> of shape [H x W] with values in [0, 1].
//
// Continuous coordinates use the pixel-area convention: pixel (ix, iy) covers
// [ix, ix+1) x [iy, iy+1), so its center sits at (ix+0.5, iy+0.5) and the
// image domain is [0, W) x [0, H). A stride-s feature cell with index m is
// centered at s*m + s/2 under the same convention.
// ---------------------------------------------------------------------------

using Image = Tensor<float>;

/// Bilinear sample at continuous (x, y); taps outside the image contribute 0.
template <typename T>
T bilinear_sample(const Tensor<T>& img, double x, double y) {
    const int64_t H = img.dim(0), W = img.dim(1);
    const double fx = x - 0.5, fy = y - 0.5;
    const int64_t x0 = int64_t(std::floor(fx)), y0 = int64_t(std::floor(fy));
    const double ax = fx - double(x0), ay = fy - double(y0);
    auto tap = [&](int64_t yy, int64_t xx) -> double {
        if (xx < 0 || xx >= W || yy < 0 || yy >= H) return 0.0;
        return double(img.at(yy, xx));
    };
    const double v = (1 - ay) * ((1 - ax) * tap(y0, x0) + ax * tap(y0, x0 + 1)) +
                     ay * ((1 - ax) * tap(y0 + 1, x0) + ax * tap(y0 + 1, x0 + 1));
    return T(v);
}

/// True when (x, y) lies inside the pixel-center hull, i.e. bilinear_sample
/// needs no zero padding (taps with exactly zero weight are allowed outside).
template <typename T>
bool sample_in_bounds(const Tensor<T>& img, double x, double y) {
    const double W = double(img.dim(1)), H = double(img.dim(0));
    return x >= 0.5 && x <= W - 0.5 && y >= 0.5 && y <= H - 0.5;
}

namespace png_detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace png_detail

/// Load a PNG as grayscale [H x W] in [0,1]. Color inputs are converted with
/// the usual luma weights; 16-bit inputs are narrowed; alpha is dropped.
inline Image load_png_gray(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open PNG for reading: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
        png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_filler(png, 0xFF, PNG_FILLER_AFTER);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int64_t W = png_get_image_width(png, info);
    const int64_t H = png_get_image_height(png, info);
    std::vector<png_byte> row(size_t(W) * 4);
    Image out({H, W});
    for (int64_t y = 0; y < H; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int64_t x = 0; x < W; ++x) {
            const double r = row[size_t(4 * x)], g = row[size_t(4 * x + 1)],
                         b = row[size_t(4 * x + 2)];
            out.at(y, x) = float((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

/// Save [H x W] values as 8-bit grayscale, clamping to [0,1].
inline void save_png_gray(const std::string& path, const Image& img) {
    PRISM_CHECK_SHAPE(img.ndim() == 2, "save_png_gray: expects [H x W]");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open PNG for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed to encode " + path);
    }
    png_init_io(png, fp);
    const int64_t H = img.dim(0), W = img.dim(1);
    png_set_IHDR(png, info, png_uint_32(W), png_uint_32(H), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(W));
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            const float v = std::min(1.0f, std::max(0.0f, img.at(y, x)));
            row[size_t(x)] = png_byte(std::lround(v * 255.0f));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

/// Save [3 x H x W] values as 8-bit RGB, clamping to [0,1].
inline void save_png_rgb(const std::string& path, const Tensor<float>& img) {
    PRISM_CHECK_SHAPE(img.ndim() == 3 && img.dim(0) == 3, "save_png_rgb: expects [3 x H x W]");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open PNG for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed to encode " + path);
    }
    png_init_io(png, fp);
    const int64_t H = img.dim(1), W = img.dim(2);
    png_set_IHDR(png, info, png_uint_32(W), png_uint_32(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(size_t(W) * 3);
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                const float v = std::min(1.0f, std::max(0.0f, img.at(c, y, x)));
                row[size_t(3 * x + c)] = png_byte(std::lround(v * 255.0f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Depth rasters: three little-endian int32 header words (H, W, 1) followed by
// H*W little-endian float32 samples, row-major.

inline void save_depth(const std::string& path, const Tensor<float>& depth) {
    PRISM_CHECK_SHAPE(depth.ndim() == 2, "save_depth: expects [H x W]");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open depth file for writing: " + path);
    const int32_t hdr[3] = {int32_t(depth.dim(0)), int32_t(depth.dim(1)), 1};
    bool ok = std::fwrite(hdr, sizeof(hdr), 1, fp) == 1;
    ok = ok && std::fwrite(depth.data(), sizeof(float), size_t(depth.numel()), fp) ==
                   size_t(depth.numel());
    std::fclose(fp);
    if (!ok) throw IoError("short write on depth file: " + path);
}

inline Tensor<float> load_depth(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open depth file for reading: " + path);
    int32_t hdr[3] = {0, 0, 0};
    if (std::fread(hdr, sizeof(hdr), 1, fp) != 1) {
        std::fclose(fp);
        throw IoError("truncated depth header: " + path);
    }
    if (hdr[0] <= 0 || hdr[1] <= 0 || hdr[2] != 1) {
        std::fclose(fp);
        throw IoError("bad depth header (H, W, 1): " + path);
    }
    Tensor<float> depth({hdr[0], hdr[1]});
    if (std::fread(depth.data(), sizeof(float), size_t(depth.numel()), fp) !=
        size_t(depth.numel())) {
        std::fclose(fp);
        throw IoError("truncated depth raster: " + path);
    }
    std::fclose(fp);
    return depth;
}

}  // namespace prism
