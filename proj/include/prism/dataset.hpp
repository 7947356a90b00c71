#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "prism/geometry.hpp"

namespace prism {

// ---------------------------------------------------------------------------
// On-disk dataset layout:
//   root/pairs/<name>/a.png
//   root/pairs/<name>/b.png
//   root/pairs/<name>/gt.homog              (9 whitespace reals, row-major)
// or
//   root/pairs/<name>/gt.pose               (labeled K_A/K_B/R_A/t_A/R_B/t_B)
//   root/pairs/<name>/a.depth, b.depth      (binary raster, see image.hpp)
// ---------------------------------------------------------------------------

inline void save_homog(const std::string& path, const Mat3& H) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write homography file: " + path);
    out.precision(17);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) out << H(r, c) << (c == 2 ? "" : " ");
        out << "\n";
    }
    if (!out) throw IoError("short write on homography file: " + path);
}

inline Mat3 load_homog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read homography file: " + path);
    Mat3 H;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            if (!(in >> H(r, c)))
                throw IoError("homography file needs 9 numbers: " + path);
    return H;
}

namespace dataset_detail {

inline void write_block(std::ostream& out, const std::string& label, const double* v, int n) {
    out << label << "\n";
    for (int i = 0; i < n; ++i) out << v[i] << ((i + 1) % 3 == 0 ? "\n" : " ");
}

inline std::vector<double> read_block(std::istream& in, const std::string& want, int n,
                                      const std::string& path) {
    std::string label;
    if (!(in >> label) || label != want)
        throw IoError("pose file: expected block '" + want + "' in " + path);
    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        if (!(in >> v[size_t(i)]))
            throw IoError("pose file: block '" + want + "' needs " + std::to_string(n) +
                          " numbers in " + path);
    return v;
}

}  // namespace dataset_detail

/// Pose text format: six labeled blocks in fixed order, row-major numbers.
inline void save_pose(const std::string& path, const GroundTruthGeometry& g) {
    PRISM_CHECK_VALUE(g.kind == GroundTruthGeometry::Kind::PoseDepth,
                      "save_pose: geometry has no pose");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write pose file: " + path);
    out.precision(17);
    using dataset_detail::write_block;
    auto mat = [&](const std::string& label, const Mat3& M) {
        double v[9];
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) v[3 * r + c] = M(r, c);
        write_block(out, label, v, 9);
    };
    auto vec = [&](const std::string& label, const Vec3& t) {
        double v[3] = {t.x(), t.y(), t.z()};
        write_block(out, label, v, 3);
    };
    mat("K_A", g.K_A);
    mat("K_B", g.K_B);
    mat("R_A", g.R_A);
    vec("t_A", g.t_A);
    mat("R_B", g.R_B);
    vec("t_B", g.t_B);
    if (!out) throw IoError("short write on pose file: " + path);
}

/// Loads pose blocks only; depth rasters are read separately by the caller.
inline GroundTruthGeometry load_pose(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read pose file: " + path);
    using dataset_detail::read_block;
    auto mat = [&](const std::string& label) {
        auto v = read_block(in, label, 9, path);
        Mat3 M;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) M(r, c) = v[size_t(3 * r + c)];
        return M;
    };
    auto vec = [&](const std::string& label) {
        auto v = read_block(in, label, 3, path);
        return Vec3(v[0], v[1], v[2]);
    };
    const Mat3 K_A = mat("K_A"), K_B = mat("K_B");
    const Mat3 R_A = mat("R_A");
    const Vec3 t_A = vec("t_A");
    const Mat3 R_B = mat("R_B");
    const Vec3 t_B = vec("t_B");
    return GroundTruthGeometry::pose_depth(K_A, K_B, R_A, t_A, R_B, t_B, Tensor<float>(),
                                           Tensor<float>());
}

struct DatasetEntry {
    std::string name;
    std::string dir;
    GroundTruthGeometry::Kind kind = GroundTruthGeometry::Kind::Homography;
};

struct LoadedPair {
    std::string name;
    Image a, b;
    GroundTruthGeometry gt;
};

/// Scan root/pairs/* and index what is there. With strict=true a malformed
/// entry throws; otherwise it is reported to stderr and skipped.
inline std::vector<DatasetEntry> index_dataset(const std::string& root, bool strict = true) {
    namespace fs = std::filesystem;
    const fs::path pairs = fs::path(root) / "pairs";
    std::vector<DatasetEntry> entries;
    if (!fs::exists(pairs)) return entries;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(pairs))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        auto complain = [&](const std::string& what) {
            const std::string msg = "dataset pair '" + d.filename().string() + "': " + what;
            if (strict) throw IoError(msg);
            std::fprintf(stderr, "warning: skipping %s\n", msg.c_str());
        };
        if (!fs::exists(d / "a.png") || !fs::exists(d / "b.png")) {
            complain("missing a.png/b.png");
            continue;
        }
        DatasetEntry entry{d.filename().string(), d.string(),
                           GroundTruthGeometry::Kind::Homography};
        if (fs::exists(d / "gt.homog")) {
            entries.push_back(std::move(entry));
        } else if (fs::exists(d / "gt.pose")) {
            if (!fs::exists(d / "a.depth") || !fs::exists(d / "b.depth")) {
                complain("gt.pose without a.depth/b.depth");
                continue;
            }
            entry.kind = GroundTruthGeometry::Kind::PoseDepth;
            entries.push_back(std::move(entry));
        } else {
            complain("missing geometry file (gt.homog or gt.pose)");
        }
    }
    return entries;
}

inline LoadedPair load_pair(const DatasetEntry& entry) {
    namespace fs = std::filesystem;
    LoadedPair p;
    p.name = entry.name;
    p.a = load_png_gray((fs::path(entry.dir) / "a.png").string());
    p.b = load_png_gray((fs::path(entry.dir) / "b.png").string());
    if (entry.kind == GroundTruthGeometry::Kind::Homography) {
        p.gt = GroundTruthGeometry::homography(load_homog((fs::path(entry.dir) / "gt.homog").string()));
    } else {
        p.gt = load_pose((fs::path(entry.dir) / "gt.pose").string());
        p.gt.depth_a = load_depth((fs::path(entry.dir) / "a.depth").string());
        p.gt.depth_b = load_depth((fs::path(entry.dir) / "b.depth").string());
    }
    return p;
}

/// Write one pair directory (used by the dataset generator and tests).
inline void save_pair(const std::string& root, const std::string& name, const Image& a,
                      const Image& b, const GroundTruthGeometry& gt) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::path(root) / "pairs" / name;
    fs::create_directories(dir);
    save_png_gray((dir / "a.png").string(), a);
    save_png_gray((dir / "b.png").string(), b);
    if (gt.kind == GroundTruthGeometry::Kind::Homography) {
        save_homog((dir / "gt.homog").string(), gt.H);
    } else {
        save_pose((dir / "gt.pose").string(), gt);
        save_depth((dir / "a.depth").string(), gt.depth_a);
        save_depth((dir / "b.depth").string(), gt.depth_b);
    }
}

}  // namespace prism
