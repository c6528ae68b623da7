#pragma once

// Train-and-score helpers shared by the ablation command and the acceptance runner.

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "panflow/data.hpp"
#include "panflow/flow.hpp"
#include "panflow/metrics.hpp"
#include "panflow/parallel.hpp"
#include "panflow/trainer.hpp"

namespace panflow::experiments {

inline const std::vector<std::string> kReferenceColumns = {"psnr", "ssim", "sam", "ergas"};

inline std::vector<double> reference_row(const RasterImage& pred, const RasterImage& ref, int scale) {
    return {metrics::psnr(pred, ref), metrics::ssim(pred, ref), metrics::sam(pred, ref),
            metrics::ergas(pred, ref, 1.0 / static_cast<double>(scale))};
}

/// Reference metrics of the tau = 0 output, clamped to [0, 1], on every triple.
template <class T>
metrics::MetricReport evaluate_tau0(const PanFlowModel<T>& model, const std::vector<SceneTriple>& test) {
    std::vector<std::vector<double>> rows(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
        const auto b = make_batch<T>(test[i]);
        auto out = from_tensor(model.sample(b.lrms, b.pan, 0.0, 0));
        clamp_unit(out);
        rows[i] = reference_row(out, test[i].hrms, model.config().scale);
    });
    metrics::MetricReport report(kReferenceColumns);
    for (std::size_t i = 0; i < test.size(); ++i) report.add(test[i].id, rows[i]);
    return report;
}

inline metrics::MetricReport evaluate_bicubic(const std::vector<SceneTriple>& test, int scale) {
    metrics::MetricReport report(kReferenceColumns);
    for (const auto& t : test) report.add(t.id, reference_row(bicubic_upsample(t.lrms, scale), t.hrms, scale));
    return report;
}

struct Outcome {
    std::string name;
    ModelConfig model;
    std::size_t params = 0;
    double bpd_init = 0.0;
    double bpd_final = 0.0;
    std::vector<double> means;  // kReferenceColumns order
    double seconds = 0.0;

    double psnr() const { return means.at(0); }
};

/// Trains a fresh model from cfg (seeded by cfg.seed) and scores its tau = 0 output.
template <class T = float>
Outcome train_and_score(const std::string& name, const TrainConfig& cfg, const std::vector<SceneTriple>& train_set,
                        const std::vector<SceneTriple>& test_set, const TrainHooks& hooks = {},
                        PanFlowModel<T>* trained = nullptr) {
    const auto start = std::chrono::steady_clock::now();
    PanFlowModel<T> model(cfg.model, cfg.seed);
    Outcome out;
    out.name = name;
    out.model = cfg.model;
    out.params = model.param_count();
    out.bpd_init = mean_bits_per_dim(model, train_set);
    train(model, train_set, cfg, hooks);
    out.bpd_final = mean_bits_per_dim(model, train_set);
    out.means = evaluate_tau0(model, test_set).means();
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (trained) *trained = std::move(model);
    return out;
}

/// Named model variants for one ablation axis, all derived from `base`.
inline std::vector<std::pair<std::string, ModelConfig>> ablation_variants(const std::string& what, const ModelConfig& base) {
    std::vector<std::pair<std::string, ModelConfig>> out;
    if (what == "stages") {
        for (int k = 1; k <= 4; ++k) {
            ModelConfig m = base;
            m.blocks = k;
            out.emplace_back("K=" + std::to_string(k), m);
        }
    } else if (what == "conditions") {
        const std::pair<const char*, std::pair<bool, bool>> masks[] = {
            {"none", {false, false}}, {"lrms-only", {true, false}}, {"pan-only", {false, true}}, {"both", {true, true}}};
        for (const auto& [label, mask] : masks) {
            ModelConfig m = base;
            m.use_lrms = mask.first;
            m.use_pan = mask.second;
            out.emplace_back(label, m);
        }
    } else if (what == "sharing") {
        for (bool share : {true, false}) {
            ModelConfig m = base;
            m.share_params = share;
            out.emplace_back(share ? "shared" : "unshared", m);
        }
    } else {
        throw ConfigError("unknown ablation '" + what + "' (expected stages, conditions or sharing)");
    }
    return out;
}

inline void write_outcomes_csv(std::ostream& os, const std::vector<Outcome>& rows) {
    os << "variant,blocks,share_params,use_lrms,use_pan,params,bpd_init,bpd_final";
    for (const auto& c : kReferenceColumns) os << ',' << c;
    os << ",seconds\n" << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.name << ',' << r.model.blocks << ',' << r.model.share_params << ',' << r.model.use_lrms << ','
           << r.model.use_pan << ',' << r.params << ',' << r.bpd_init << ',' << r.bpd_final;
        for (double v : r.means) os << ',' << v;
        os << ',' << r.seconds << '\n';
    }
}

} // namespace panflow::experiments
