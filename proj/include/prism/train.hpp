#pragma once

// Training loop: synthetic (or on-disk) pairs, the full forward graph, the
// three supervision terms, and AdamW with decoupled weight decay. The loop is
// deterministic for a fixed config; a non-finite loss aborts with a
// diagnostics dump rather than silently writing a poisoned checkpoint.

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "prism/checkpoint.hpp"
#include "prism/config.hpp"
#include "prism/dataset.hpp"
#include "prism/model.hpp"
#include "prism/supervision.hpp"
#include "prism/synth.hpp"

namespace prism {

struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    int64_t t = 0;
    std::vector<Tensor<float>> m, v;

    AdamW(const ParamStore<float>& ps, double lr_, double wd) : lr(lr_), weight_decay(wd) {
        PRISM_CHECK_VALUE(lr_ >= 0.0 && wd >= 0.0, "adamw: lr and weight decay must be >= 0");
        for (const auto& e : ps.entries) {
            m.push_back(Tensor<float>::zeros(e.second->shape()));
            v.push_back(Tensor<float>::zeros(e.second->shape()));
        }
    }

    /// One decoupled-decay update from the gradients accumulated on `tape`.
    /// Parameters the graph never touched keep a zero gradient.
    void step(ParamStore<float>& ps, const Tape<float>& tape) {
        PRISM_CHECK_SHAPE(ps.entries.size() == m.size(), "adamw: store changed size");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t i = 0; i < ps.entries.size(); ++i) {
            Tensor<float>& w = *ps.entries[i].second;
            const Tensor<float>* g = tape.grad_of(w);
            for (int64_t k = 0; k < w.numel(); ++k) {
                const double gk = g ? double((*g)[k]) : 0.0;
                const double mk = beta1 * double(m[i][k]) + (1.0 - beta1) * gk;
                const double vk = beta2 * double(v[i][k]) + (1.0 - beta2) * gk * gk;
                m[i][k] = float(mk);
                v[i][k] = float(vk);
                const double update = (mk / bc1) / (std::sqrt(vk / bc2) + eps) +
                                      weight_decay * double(w[k]);
                w[k] = float(double(w[k]) - lr * update);
            }
        }
    }
};

struct StepLog {
    int64_t step = 0;
    double total = 0, coarse = 0, fine = 0, prune = 0;
    int64_t gt_matches = 0;
};

struct TrainResult {
    std::vector<StepLog> log;  // one entry per step
    SupervisionStats stats;    // accumulated warning counters
    std::string checkpoint;    // path of the final checkpoint
};

namespace train_detail {

inline void dump_diagnostics(const std::string& path, const StepLog& entry,
                             const ParamStore<float>& ps) {
    std::ofstream out(path);
    out << "non-finite loss at step " << entry.step << "\n"
        << "total " << entry.total << " coarse " << entry.coarse << " fine " << entry.fine
        << " prune " << entry.prune << "\n";
    for (const auto& [name, tensor] : ps.entries) {
        float peak = 0.0f;
        int64_t bad = 0;
        for (int64_t k = 0; k < tensor->numel(); ++k) {
            if (!std::isfinite((*tensor)[k])) ++bad;
            peak = std::max(peak, std::abs((*tensor)[k]));
        }
        out << name << " max_abs " << peak << " non_finite " << bad << "\n";
    }
}

}  // namespace train_detail

/// Run `cfg.steps` optimization steps and write the final checkpoint to
/// `out_dir`/model.prism. Progress lines go to `log` every cfg.log_every
/// steps (and for the last step); every step is recorded in the result.
inline TrainResult train_model(PrismModel<float>& model, const Config& cfg,
                               const std::string& out_dir, std::ostream* log = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    ParamStore<float> ps = model.param_store();
    AdamW opt(ps, cfg.lr, cfg.weight_decay);

    std::vector<LoadedPair> disk;
    if (!cfg.dataset.empty()) {
        for (const auto& entry : index_dataset(cfg.dataset)) disk.push_back(load_pair(entry));
        PRISM_CHECK_VALUE(!disk.empty(), "train: dataset at " + cfg.dataset + " holds no pairs");
    }
    Rng data_rng = Rng(cfg.seed).fork(1);  // distinct stream from the init draw

    TrainResult result;
    const auto save = [&](const std::string& name, int64_t step) {
        CheckpointMeta meta;
        meta.step = step;
        meta.config = cfg.snapshot();
        const std::string path = (fs::path(out_dir) / name).string();
        save_checkpoint(path, ps, meta);
        return path;
    };

    for (int64_t step = 0; step < cfg.steps; ++step) {
        Image a, b;
        GroundTruthGeometry gt;
        if (!disk.empty()) {
            const LoadedPair& pair = disk[std::size_t(step) % disk.size()];
            a = pair.a;
            b = pair.b;
            gt = pair.gt;
        } else {
            SyntheticPairSpec spec;
            spec.seed = data_rng.next_u64();
            spec.height = cfg.image_size;
            spec.width = cfg.image_size;
            SyntheticPair pair = generate_pair(spec);
            a = pair.a;
            b = pair.b;
            gt = pair.gt;
        }

        Tape<float> tape;
        auto fwd = model_forward(tape, model, a, b);
        const SupervisionLabels labels = ground_truth_coarse(gt, fwd.hc, fwd.wc, fwd.hc, fwd.wc);

        auto lc = coarse_loss(tape, fwd.p, labels.gt_coarse, &result.stats);
        // Refinement is supervised at the labeled cells; at inference time the
        // same head runs on the predicted ones.
        std::vector<CoarseMatch<float>> cells;
        for (const auto& [i, j] : labels.gt_coarse) cells.push_back({i, j, 1.0f});
        auto fine = refine(tape, cells, fwd.feat_a.fine, fwd.feat_b.fine, cfg.refine_window);
        auto lf = fine_loss(tape, predicted_pb(tape, fine),
                            fine_targets_for<float>(labels, fine.kept), fine.phi, &result.stats);
        auto lp = pruning_loss(tape, fwd.mpm.sigma_a, fwd.mpm.sigma_b, labels, &result.stats);
        auto total = total_loss(lc, lf, lp, float(cfg.w_coarse), float(cfg.w_fine),
                                float(cfg.w_prune));

        StepLog entry;
        entry.step = step;
        entry.total = double(tape.value(total)[0]);
        entry.coarse = double(tape.value(lc)[0]);
        entry.fine = double(tape.value(lf)[0]);
        entry.prune = double(tape.value(lp)[0]);
        entry.gt_matches = int64_t(labels.gt_coarse.size());
        result.log.push_back(entry);

        if (!std::isfinite(entry.total) || !std::isfinite(entry.coarse) ||
            !std::isfinite(entry.fine) || !std::isfinite(entry.prune)) {
            const std::string diag = (fs::path(out_dir) / "diagnostics.txt").string();
            train_detail::dump_diagnostics(diag, entry, ps);
            throw ValueError("train: non-finite loss at step " + std::to_string(step) +
                             ", diagnostics written to " + diag);
        }

        tape.backward(total);
        opt.step(ps, tape);

        if (log && (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps))) {
            char line[160];
            std::snprintf(line, sizeof(line),
                          "step=%" PRId64 " loss=%.6f l_c=%.6f l_f=%.6f l_p=%.6f gt=%" PRId64 "\n",
                          entry.step, entry.total, entry.coarse, entry.fine, entry.prune,
                          entry.gt_matches);
            (*log) << line << std::flush;
        }
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < cfg.steps) {
            char name[48];
            std::snprintf(name, sizeof(name), "step_%06" PRId64 ".prism", step + 1);
            save(name, step + 1);
        }
    }

    result.checkpoint = save("model.prism", cfg.steps);
    return result;
}

}  // namespace prism
