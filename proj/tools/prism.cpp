// prism command-line front end: training, matching, evaluation, mask export,
// dataset synthesis, and a built-in selftest. Every subcommand is a thin
// shell over the library; the interesting logic lives in include/prism.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "prism/config.hpp"
#include "prism/dataset.hpp"
#include "prism/eval.hpp"
#include "prism/image.hpp"
#include "prism/matcher.hpp"
#include "prism/mi.hpp"
#include "prism/model.hpp"
#include "prism/supervision.hpp"
#include "prism/synth.hpp"
#include "prism/train.hpp"

namespace fs = std::filesystem;
using namespace prism;

namespace {

std::vector<double> parse_thresholds(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ValueError("bad threshold list '" + csv + "' (expected e.g. 3,5,10)");
        }
        if (out.back() <= 0) throw ValueError("thresholds must be positive: " + csv);
    }
    if (out.empty()) throw ValueError("empty threshold list");
    return out;
}

void fine_to_points(const FineMatchSet<float>& fine, std::vector<Vec2>& pa, std::vector<Vec2>& pb) {
    for (std::size_t k = 0; k < fine.kept.size(); ++k) {
        pa.emplace_back(fine.p_a.at(int64_t(k), 0), fine.p_a.at(int64_t(k), 1));
        pb.emplace_back(fine.p_b.at(int64_t(k), 0), fine.p_b.at(int64_t(k), 1));
    }
}

// Pairs whose estimation fails get an error beyond every threshold; they stay
// in the denominator of the cumulative curve instead of being dropped.
constexpr double kFailedPairError = 1e12;

void write_report(const std::string& report_path, const std::string& table,
                  const std::vector<double>& errors, double max_threshold) {
    if (report_path.empty()) return;
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write report: " + report_path);
    out << table;
    const std::string curve = fs::path(report_path).replace_extension(".png").string();
    save_png_gray(curve, render_error_curve(errors, max_threshold));
    std::cout << "report -> " << report_path << "\ncurve  -> " << curve << "\n";
}

int run_train(const std::string& config_path, const std::string& out_dir) {
    const Config cfg = load_config(config_path);
    PrismModel<float> model = make_model(cfg);
    std::cout << "training " << cfg.preset << " preset for " << cfg.steps << " steps (seed "
              << cfg.seed << ")\n";
    const TrainResult res = train_model(model, cfg, out_dir, &std::cout);
    if (!res.log.empty())
        std::cout << "final loss " << res.log.back().total << "\n";
    std::cout << "checkpoint -> " << res.checkpoint << "\n";
    return 0;
}

int run_match(const std::string& ckpt, const std::string& image_a, const std::string& image_b,
              const std::string& out_path, std::optional<double> theta_c,
              std::optional<double> theta_p) {
    auto [model, meta] = load_model(ckpt);
    if (theta_p) model.cfg.theta_p = *theta_p;
    const Image a = load_png_gray(image_a);
    const Image b = load_png_gray(image_b);
    std::optional<float> tc;
    if (theta_c) tc = float(*theta_c);
    const auto res = match_images<float>(model, a, b, tc);
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write matches: " + out_path);
    write_matches(out, res.fine);
    std::cout << res.fine.kept.size() << " matches (" << res.coarse.size() << " coarse, "
              << res.fine.dropped << " at the border) -> " << out_path << "\n";
    return 0;
}

int run_eval_homography(const std::string& ckpt, const std::string& root,
                        const std::string& thresholds_csv, const std::string& report_path) {
    auto [model, meta] = load_model(ckpt);
    const std::vector<double> thresholds = parse_thresholds(thresholds_csv);
    std::vector<double> errors;
    int64_t failures = 0;
    for (const auto& entry : index_dataset(root)) {
        if (entry.kind != GroundTruthGeometry::Kind::Homography) continue;
        const LoadedPair pair = load_pair(entry);
        const auto res = match_images<float>(model, pair.a, pair.b);
        std::vector<Vec2> pa, pb;
        fine_to_points(res.fine, pa, pb);
        double err = kFailedPairError;
        try {
            const Mat3 h = estimate_homography(pa, pb);
            err = corner_error(h, pair.gt.H, pair.a.dim(1), pair.a.dim(0));
        } catch (const NoPoseError&) {
            ++failures;
        }
        errors.push_back(err);
        std::cout << entry.name << ": " << pa.size() << " matches, corner error "
                  << (err == kFailedPairError ? std::string("n/a") : std::to_string(err)) << "\n";
    }
    if (errors.empty()) throw ValueError("dataset has no homography pairs: " + root);
    std::vector<double> aucs;
    for (double t : thresholds) aucs.push_back(auc(errors, t));
    const std::string table =
        format_auc_table(thresholds, aucs, "px", int64_t(errors.size()), failures);
    std::cout << table;
    write_report(report_path, table, errors, thresholds.back());
    return 0;
}

int run_eval_pose(const std::string& ckpt, const std::string& root,
                  const std::string& thresholds_csv, const std::string& report_path) {
    auto [model, meta] = load_model(ckpt);
    const std::vector<double> thresholds = parse_thresholds(thresholds_csv);
    std::vector<double> errors;
    int64_t failures = 0;
    for (const auto& entry : index_dataset(root)) {
        if (entry.kind != GroundTruthGeometry::Kind::PoseDepth) continue;
        const LoadedPair pair = load_pair(entry);
        const auto res = match_images<float>(model, pair.a, pair.b);
        std::vector<Vec2> pa, pb;
        fine_to_points(res.fine, pa, pb);
        Mat3 r_gt;
        Vec3 t_gt;
        pair.gt.relative_pose(r_gt, t_gt);
        double err = kFailedPairError;
        try {
            const RelativePose est = estimate_pose(pa, pb, pair.gt.K_A, pair.gt.K_B);
            if (t_gt.norm() > 1e-9) {
                err = pose_error_deg(est, RelativePose{r_gt, t_gt.normalized()});
            } else {
                // Translation direction is undefined for a zero baseline;
                // score the rotation alone.
                const double tr = (est.r.transpose() * r_gt).trace();
                err = std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0)) * 180.0 / M_PI;
            }
        } catch (const NoPoseError&) {
            ++failures;
        }
        errors.push_back(err);
        std::cout << entry.name << ": " << pa.size() << " matches, pose error "
                  << (err == kFailedPairError ? std::string("n/a") : std::to_string(err)) << "\n";
    }
    if (errors.empty()) throw ValueError("dataset has no pose pairs: " + root);
    std::vector<double> aucs;
    for (double t : thresholds) aucs.push_back(auc(errors, t));
    const std::string table =
        format_auc_table(thresholds, aucs, "deg", int64_t(errors.size()), failures);
    std::cout << table;
    write_report(report_path, table, errors, thresholds.back());
    return 0;
}

int run_export_masks(const std::string& ckpt, const std::string& image_a,
                     const std::string& image_b, const std::string& out_dir,
                     std::optional<double> theta_p) {
    auto [model, meta] = load_model(ckpt);
    if (theta_p) model.cfg.theta_p = *theta_p;
    const Image a = load_png_gray(image_a);
    const Image b = load_png_gray(image_b);
    const auto res = match_images<float>(model, a, b);
    fs::create_directories(out_dir);
    const auto dump = [&](const std::vector<Tensor<float>>& masks, const std::string& tag) {
        for (std::size_t l = 0; l < masks.size(); ++l) {
            Image img({res.hc, res.wc});
            for (int64_t i = 0; i < img.numel(); ++i) img[i] = masks[l][i];
            char name[48];
            std::snprintf(name, sizeof(name), "mask_%s_%02zu.png", tag.c_str(), l);
            save_png_gray((fs::path(out_dir) / name).string(), img);
        }
    };
    dump(res.masks_a, "a");
    dump(res.masks_b, "b");
    std::cout << "wrote " << res.masks_a.size() + res.masks_b.size() << " masks ("
              << res.hc << "x" << res.wc << " grid, layer 00 = pre-pruning) -> " << out_dir << "\n";
    return 0;
}

int run_make_dataset(const std::string& out_dir, int pairs, int scenes, int64_t size,
                     uint64_t seed) {
    Rng root(seed);
    char name[32];
    for (int i = 0; i < pairs; ++i) {
        SyntheticPairSpec spec;
        spec.seed = root.fork(uint64_t(i)).next_u64();
        spec.height = size;
        spec.width = size;
        const SyntheticPair pair = generate_pair(spec);
        std::snprintf(name, sizeof(name), "pair_%04d", i);
        save_pair(out_dir, name, pair.a, pair.b, pair.gt);
    }
    for (int i = 0; i < scenes; ++i) {
        SceneSpec spec;
        spec.seed = root.fork(uint64_t(1000 + i)).next_u64();
        spec.height = size;
        spec.width = size;
        const SyntheticScene scene = generate_scene(spec);
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        save_pair(out_dir, name, scene.a, scene.b, scene.gt);
    }
    std::cout << "wrote " << pairs << " homography pairs and " << scenes << " pose scenes -> "
              << out_dir << "\n";
    return 0;
}

// Built-in oracle sweep: fast, self-contained checks of the pinned values the
// library is built around. Exits nonzero if any of them drifts.
int run_selftest() {
    int failed = 0;
    const auto check = [&](const char* name, bool ok) {
        std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
        if (!ok) ++failed;
    };

    {
        Tape<double> tape;
        auto p = weighted_dual_softmax(tape, tape.constant(Tensor<double>::full({1, 1}, 3.7)),
                                       tape.constant(Tensor<double>::ones({1})),
                                       tape.constant(Tensor<double>::ones({1})));
        check("dual softmax collapses to 1 on a 1x1 grid", tape.value(p)[0] == 1.0);
    }
    {
        Tensor<double> s({2, 2});
        s.at(0, 0) = 10;
        s.at(1, 1) = 10;
        Tape<double> tape;
        auto p = weighted_dual_softmax(tape, tape.constant(s),
                                       tape.constant(Tensor<double>::ones({2})),
                                       tape.constant(Tensor<double>::ones({2})));
        const double m = std::exp(10.0) / (std::exp(10.0) + 1.0);
        check("dual softmax diagonal matches the closed form",
              std::abs(tape.value(p).at(0, 0) - m * m) < 1e-12);
    }
    {
        check("step-cdf auc of {1,2,4} at T=4 is 5/12",
              std::abs(auc({1, 2, 4}, 4.0) - 5.0 / 12.0) < 1e-12);
        Mat3 t = Mat3::Identity();
        t(0, 2) = 3.0;
        check("corner error of a 3px shift is exactly 3",
              corner_error(t, Mat3::Identity(), 64, 64) == 3.0);
    }
    {
        Tensor<double> indep = Tensor<double>::full({2, 2}, 0.25);
        Tensor<double> corr = Tensor<double>::zeros({2, 2});
        corr.at(0, 0) = 0.5;
        corr.at(1, 1) = 0.5;
        check("normalized mi: independent -> 0, identical -> 1",
              std::abs(normalized_mi(DiscreteJoint(indep))) < 1e-12 &&
                  std::abs(normalized_mi(DiscreteJoint(corr)) - 1.0) < 1e-12);
    }
    {
        SupervisionLabels labels;
        labels.a_match = {0};
        labels.a_nomatch = {1};
        labels.b_match = {0};
        labels.b_nomatch = {1};
        Tape<float> tape;
        std::vector<Var<float>> sa = {tape.constant(Tensor<float>::full({2, 1}, 0.5f))};
        std::vector<Var<float>> sb = {tape.constant(Tensor<float>::full({2, 1}, 0.5f))};
        const float lp = tape.value(pruning_loss(tape, sa, sb, labels))[0];
        check("pruning loss at sigma=0.5 is 2 ln 2",
              std::abs(lp - 2.0f * float(std::log(2.0))) < 1e-6f);
    }
    {
        Config cfg;
        cfg.c_coarse = 32;
        cfg.c_fine = 16;
        cfg.mpm_layers = 1;
        cfg.seed = 5;
        PrismModel<float> model = make_model(cfg);
        ParamStore<float> ps = model.param_store();
        const fs::path dir = fs::temp_directory_path() / "prism_selftest";
        fs::create_directories(dir);
        CheckpointMeta meta;
        meta.config = cfg.snapshot();
        save_checkpoint((dir / "st.prism").string(), ps, meta);
        auto [twin, tm] = load_model((dir / "st.prism").string());
        ParamStore<float> tp = twin.param_store();
        bool equal = ps.entries.size() == tp.entries.size();
        for (std::size_t i = 0; equal && i < ps.entries.size(); ++i)
            for (int64_t k = 0; equal && k < ps.entries[i].second->numel(); ++k)
                equal = (*ps.entries[i].second)[k] == (*tp.entries[i].second)[k];
        check("checkpoint round trip is bitwise", equal);

        SyntheticPairSpec spec;
        spec.seed = 12;
        spec.height = 64;
        spec.width = 64;
        const SyntheticPair pair = generate_pair(spec);
        const auto m1 = match_images<float>(model, pair.a, pair.b, 0.0f);
        const auto m2 = match_images<float>(twin, pair.a, pair.b, 0.0f);
        bool same = m1.coarse.size() == m2.coarse.size() && !m1.coarse.empty();
        for (int64_t i = 0; same && i < m1.fine.p_b.numel(); ++i)
            same = m1.fine.p_b[i] == m2.fine.p_b[i];
        check("matching is deterministic across a reload", same);
        fs::remove_all(dir);
    }

    std::cout << (failed ? "selftest FAILED\n" : "selftest passed\n");
    return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prism: detector-free image matching with progressive patch pruning"};
    app.require_subcommand(0, 1);

    auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints");
    std::string t_config, t_out;
    train_cmd->add_option("--config", t_config, "key=value config file")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--out", t_out, "output directory")->required();

    auto* match_cmd = app.add_subcommand("match", "Match two images, write x_A y_A x_B y_B conf");
    std::string m_ckpt, m_a, m_b, m_out;
    double m_theta_c = -1, m_theta_p = -1;
    match_cmd->add_option("--checkpoint", m_ckpt)->required()->check(CLI::ExistingFile);
    match_cmd->add_option("--image-a", m_a)->required()->check(CLI::ExistingFile);
    match_cmd->add_option("--image-b", m_b)->required()->check(CLI::ExistingFile);
    match_cmd->add_option("--out", m_out, "output matches file")->required();
    auto* m_tc = match_cmd->add_option("--theta-c", m_theta_c, "match confidence floor");
    auto* m_tp = match_cmd->add_option("--theta-p", m_theta_p, "pruning threshold override");

    auto* eh_cmd = app.add_subcommand("eval-homography", "Corner-error AUC over a dataset");
    std::string eh_ckpt, eh_root, eh_thresholds = "3,5,10", eh_report;
    eh_cmd->add_option("--checkpoint", eh_ckpt)->required()->check(CLI::ExistingFile);
    eh_cmd->add_option("--dataset", eh_root)->required()->check(CLI::ExistingDirectory);
    eh_cmd->add_option("--thresholds", eh_thresholds, "comma-separated px thresholds");
    eh_cmd->add_option("--report", eh_report, "write the table here (+ .png curve)");

    auto* ep_cmd = app.add_subcommand("eval-pose", "Pose angular-error AUC over a dataset");
    std::string ep_ckpt, ep_root, ep_thresholds = "5,10,20", ep_report;
    ep_cmd->add_option("--checkpoint", ep_ckpt)->required()->check(CLI::ExistingFile);
    ep_cmd->add_option("--dataset", ep_root)->required()->check(CLI::ExistingDirectory);
    ep_cmd->add_option("--thresholds", ep_thresholds, "comma-separated degree thresholds");
    ep_cmd->add_option("--report", ep_report, "write the table here (+ .png curve)");

    auto* em_cmd = app.add_subcommand("export-masks", "Write per-layer pruning masks as PNGs");
    std::string em_ckpt, em_a, em_b, em_out;
    double em_theta_p = -1;
    em_cmd->add_option("--checkpoint", em_ckpt)->required()->check(CLI::ExistingFile);
    em_cmd->add_option("--image-a", em_a)->required()->check(CLI::ExistingFile);
    em_cmd->add_option("--image-b", em_b)->required()->check(CLI::ExistingFile);
    em_cmd->add_option("--out", em_out, "output directory")->required();
    auto* em_tp = em_cmd->add_option("--theta-p", em_theta_p, "pruning threshold override");

    auto* md_cmd = app.add_subcommand("make-dataset", "Synthesize a pair dataset on disk");
    std::string md_out;
    int md_pairs = 8, md_scenes = 0;
    int64_t md_size = 128;
    uint64_t md_seed = 7;
    md_cmd->add_option("--out", md_out)->required();
    md_cmd->add_option("--pairs", md_pairs, "homography pairs to write");
    md_cmd->add_option("--scenes", md_scenes, "pose+depth scenes to write");
    md_cmd->add_option("--size", md_size, "square image side");
    md_cmd->add_option("--seed", md_seed);

    auto* st_cmd = app.add_subcommand("selftest", "Run the built-in oracle sweep");

    CLI11_PARSE(app, argc, argv);
    if (app.get_subcommands().empty()) {
        std::cout << app.help();
        return 0;
    }

    try {
        if (*train_cmd) return run_train(t_config, t_out);
        if (*match_cmd)
            return run_match(m_ckpt, m_a, m_b, m_out,
                             *m_tc ? std::optional<double>(m_theta_c) : std::nullopt,
                             *m_tp ? std::optional<double>(m_theta_p) : std::nullopt);
        if (*eh_cmd) return run_eval_homography(eh_ckpt, eh_root, eh_thresholds, eh_report);
        if (*ep_cmd) return run_eval_pose(ep_ckpt, ep_root, ep_thresholds, ep_report);
        if (*em_cmd)
            return run_export_masks(em_ckpt, em_a, em_b, em_out,
                                    *em_tp ? std::optional<double>(em_theta_p) : std::nullopt);
        if (*md_cmd) return run_make_dataset(md_out, md_pairs, md_scenes, md_size, md_seed);
        if (*st_cmd) return run_selftest();
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
