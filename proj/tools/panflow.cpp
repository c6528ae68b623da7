// panflow: command-line front end for synthesis, training, sampling, evaluation,
// verification and ablations.
//
// Exit codes: 0 success, 1 I/O or format failure, 2 usage error (bad flags, config or
// input geometry), 3 numeric failure, 4 verification failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "panflow/checkpoint.hpp"
#include "panflow/data.hpp"
#include "panflow/experiments.hpp"
#include "panflow/flow.hpp"
#include "panflow/metrics.hpp"
#include "panflow/parallel.hpp"
#include "panflow/trainer.hpp"
#include "panflow/verify.hpp"

namespace fs = std::filesystem;
using namespace panflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitVerify = 4;

struct VerificationFailed : Error {
    using Error::Error;
};

void print_resolved(const std::string& cmd, const std::vector<std::pair<std::string, std::string>>& kv) {
    std::cout << "# panflow " << cmd << '\n';
    for (const auto& [k, v] : kv) std::cout << "# " << k << " = " << v << '\n';
    std::cout << "# threads = " << thread_limit() << std::endl;
}

std::string num(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    int count = 64;
    int bands = 4;
    int size = 128;
    int scale = 4;
    std::uint64_t seed = 0;
    std::string split = "train";
};

int cmd_synth(const SynthArgs& a) {
    print_resolved("synth", {{"out", a.out}, {"count", std::to_string(a.count)}, {"bands", std::to_string(a.bands)},
                             {"size", std::to_string(a.size)}, {"scale", std::to_string(a.scale)},
                             {"seed", std::to_string(a.seed)}, {"split", a.split}});
    if (a.count < 0) throw ConfigError("--count must be >= 0");
    if (a.scale < 1 || a.size < 1 || a.size % a.scale != 0) throw ConfigError("--size must be a positive multiple of --scale");
    SyntheticSceneConfig sc;
    sc.bands = a.bands;
    sc.size = a.size;
    sc.seed = a.seed;
    const auto triples = synthesize_triples(a.count, sc, a.scale, a.split);
    const auto manifest = write_dataset(a.out, triples, a.split, a.seed);
    std::cout << "wrote " << manifest.entries.size() << " triples and " << (fs::path(a.out) / "manifest.tsv").string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    std::string loss_csv;
    std::string init;
    std::vector<std::string> overrides;
};

template <class T>
int run_training(const TrainConfig& cfg, const std::vector<SceneTriple>& data, const TrainArgs& a) {
    PanFlowModel<T> model(cfg.model, cfg.seed);
    if (!a.init.empty()) {
        model = load_checkpoint<float>(a.init).template cast<T>();
        if (!(model.config() == cfg.model)) throw ConfigError("--init checkpoint config differs from the training config");
    }
    const std::string csv_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write " + csv_path);
    csv << kLossCsvHeader << '\n';
    TrainHooks hooks;
    hooks.csv = &csv;
    hooks.on_epoch = [](const LossReport& r) {
        std::cout << "epoch " << r.epoch << (std::isnan(r.mean_l1) ? " nll_bpd " : " l1 ")
                  << (std::isnan(r.mean_l1) ? r.mean_nll_bits_per_dim : r.mean_l1) << " lr " << r.lr << " ("
                  << std::fixed << std::setprecision(1) << r.seconds << " s)" << std::defaultfloat << std::endl;
    };
    TrainConfig run = cfg;
    if (run.checkpoint_path.empty()) run.checkpoint_path = a.out;
    try {
        if constexpr (std::is_same_v<T, float>) {
            train(model, data, run, hooks);
        } else {
            // Checkpoints hold 32-bit values; intermediate saves go through a float copy.
            TrainConfig inner = run;
            inner.checkpoint_path.clear();
            train(model, data, inner, hooks);
        }
    } catch (const TrainingAborted&) {
        if constexpr (!std::is_same_v<T, float>) save_checkpoint(model.template cast<float>(), run.checkpoint_path);
        throw;
    }
    save_checkpoint(model.template cast<float>(), a.out);
    std::cout << "final mean bits/dim " << mean_bits_per_dim(model, data) << "\nwrote " << a.out << " and " << csv_path << '\n';
    return kExitOk;
}

int cmd_train(const TrainArgs& a) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    cfg.validate();
    std::vector<std::pair<std::string, std::string>> kv = {{"data", a.data}, {"config", a.config}, {"out", a.out}};
    std::istringstream resolved(format_config(cfg));
    for (std::string line; std::getline(resolved, line);) {
        const auto eq = line.find(" = ");
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    }
    print_resolved("train", kv);
    const auto data = load_dataset(read_manifest(a.data), cfg.model.scale);
    if (data.empty()) throw ConfigError("manifest " + a.data + " lists no triples");
    if (data.front().hrms.channels != static_cast<std::size_t>(cfg.model.bands)) {
        throw ConfigError("data has " + std::to_string(data.front().hrms.channels) + " bands, config says " +
                          std::to_string(cfg.model.bands));
    }
    return cfg.dtype == "float64" ? run_training<double>(cfg, data, a) : run_training<float>(cfg, data, a);
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string model;
    std::string lrms;
    std::string pan;
    std::string out;
    int num = 1;
    double tau = 0.8;
    std::uint64_t seed = 0;
    std::string select = "max-prob";
};

int cmd_sample(const SampleArgs& a) {
    print_resolved("sample", {{"model", a.model}, {"lrms", a.lrms}, {"pan", a.pan}, {"out", a.out},
                              {"num", std::to_string(a.num)}, {"tau", num(a.tau)}, {"seed", std::to_string(a.seed)},
                              {"select", a.select}});
    if (a.num < 1) throw ConfigError("--num must be >= 1");
    if (a.tau < 0.0) throw ConfigError("--tau must be >= 0");
    const auto model = load_checkpoint<float>(a.model);
    const auto lrms_img = read_raster(a.lrms);
    const auto pan_img = read_raster(a.pan);
    const auto& c = model.config();
    if (lrms_img.channels != static_cast<std::size_t>(c.bands) || pan_img.channels != 1 ||
        lrms_img.height * static_cast<std::size_t>(c.scale) != pan_img.height ||
        lrms_img.width * static_cast<std::size_t>(c.scale) != pan_img.width) {
        throw ShapeError("input geometry LRMS " + lrms_img.shape_string() + ", PAN " + pan_img.shape_string() +
                         " does not match the checkpoint (bands " + std::to_string(c.bands) + ", scale " +
                         std::to_string(c.scale) + ")");
    }
    const auto lrms = to_tensor<float>(lrms_img);
    const auto pan = to_tensor<float>(pan_img);
    fs::create_directories(a.out);

    // tau = 0 collapses every seed onto the same point, so there is a single candidate.
    const std::size_t count = a.tau == 0.0 ? 1 : static_cast<std::size_t>(a.num);
    std::vector<Tensor<float>> candidates(count);
    parallel_for(count, [&](std::size_t i) { candidates[i] = model.sample(lrms, pan, a.tau, a.seed + i); });
    const auto [best, scores] = model.select_max_probability(std::span<const Tensor<float>>(candidates), lrms, pan);

    std::ofstream table(fs::path(a.out) / "log_prob.csv");
    table << "index,seed,log_prob,selected\n" << std::setprecision(17);
    for (std::size_t i = 0; i < count; ++i) {
        table << i << ',' << a.seed + i << ',' << scores[i] << ',' << (i == best ? 1 : 0) << '\n';
        if (count > 1) write_raster(from_tensor(candidates[i]), fs::path(a.out) / ("candidate_" + std::to_string(i) + ".pfnr"));
        std::cout << "candidate " << i << " seed " << a.seed + i << " log_prob " << scores[i] << (i == best ? "  <- selected" : "")
                  << '\n';
    }
    write_raster(from_tensor(candidates[best]), fs::path(a.out) / "selected.pfnr");
    std::cout << "selected candidate " << best << " -> " << (fs::path(a.out) / "selected.pfnr").string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string pred;
    std::string ref;
    std::string out;
    std::string baseline;
    bool full_res = false;
    int scale = 4;
};

int cmd_eval(const EvalArgs& a) {
    print_resolved("eval", {{"pred", a.pred}, {"ref", a.ref}, {"out", a.out.empty() ? "(stdout)" : a.out},
                            {"baseline", a.baseline.empty() ? "(none)" : a.baseline},
                            {"full_res", a.full_res ? "true" : "false"}, {"scale", std::to_string(a.scale)}});
    if (a.pred.empty() == a.baseline.empty()) throw ConfigError("give exactly one of --pred or --baseline");
    if (!a.baseline.empty() && a.baseline != "bicubic") throw ConfigError("unknown baseline '" + a.baseline + "'");
    const auto data = load_dataset(read_manifest(a.ref), a.scale);

    std::map<std::string, fs::path> pred_files;
    if (!a.pred.empty()) {
        for (const auto& e : fs::directory_iterator(a.pred)) {
            if (e.path().extension() == ".pfnr") pred_files[e.path().stem().string()] = e.path();
        }
        std::set<std::string> ids;
        for (const auto& t : data) {
            ids.insert(t.id);
            if (!pred_files.count(t.id)) throw ConfigError("no prediction " + t.id + ".pfnr in " + a.pred);
        }
        for (const auto& [id, path] : pred_files) {
            if (!ids.count(id)) throw ConfigError("prediction " + path.string() + " has no manifest entry");
        }
    }

    std::vector<std::string> columns = experiments::kReferenceColumns;
    if (a.full_res) columns.insert(columns.end(), {"d_lambda", "d_s", "qnr"});
    std::vector<std::vector<double>> rows(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const auto& t = data[i];
        const RasterImage pred = a.pred.empty() ? bicubic_upsample(t.lrms, a.scale) : read_raster(pred_files.at(t.id));
        if (!pred.same_shape(t.hrms)) {
            throw ShapeError("prediction " + t.id + " is " + pred.shape_string() + ", reference " + t.hrms.shape_string());
        }
        rows[i] = experiments::reference_row(pred, t.hrms, a.scale);
        if (a.full_res) {
            const double dl = metrics::d_lambda(pred, t.lrms, a.scale);
            const double ds = metrics::d_s(pred, t.lrms, t.pan, a.scale);
            rows[i].insert(rows[i].end(), {dl, ds, metrics::qnr(dl, ds)});
        }
    });
    metrics::MetricReport report(columns);
    for (std::size_t i = 0; i < data.size(); ++i) report.add(data[i].id, rows[i]);
    if (a.out.empty()) {
        report.write_csv(std::cout);
    } else {
        std::ofstream os(a.out);
        if (!os) throw Error("cannot write " + a.out);
        report.write_csv(os);
        std::cout << "wrote " << a.out << " (" << report.count() << " images)\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
    std::string level = "fast";
    std::string model;
    std::string scratch;
};

int cmd_verify(const VerifyArgs& a) {
    const fs::path scratch = a.scratch.empty() ? fs::temp_directory_path() / "panflow_verify" : fs::path(a.scratch);
    print_resolved("verify", {{"level", a.level}, {"model", a.model.empty() ? "(none)" : a.model}, {"scratch", scratch.string()}});
    auto results = verify::run_suite(a.level == "full", scratch, &std::cout);
    if (!a.model.empty()) {
        results.push_back(verify::timed("checkpoint integrity " + a.model, [&] { return verify::checkpoint_integrity(a.model); }));
        std::cout << results.back() << '\n';
    }
    std::size_t failed = 0;
    for (const auto& r : results) failed += r.pass ? 0 : 1;
    std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
    if (failed > 0) {
        std::string names;
        for (const auto& r : results) {
            if (!r.pass) names += (names.empty() ? "" : ", ") + r.name;
        }
        throw VerificationFailed("failed: " + names);
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string what;
    std::string data;
    std::string test;
    std::string config;
    std::string out;
    std::vector<std::string> overrides;
};

int cmd_ablate(const AblateArgs& a) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    cfg.validate();
    print_resolved("ablate", {{"what", a.what}, {"data", a.data}, {"test", a.test.empty() ? a.data : a.test},
                              {"config", a.config}, {"out", a.out.empty() ? "(stdout)" : a.out},
                              {"seed", std::to_string(cfg.seed)}, {"pretrain_epochs", std::to_string(cfg.pretrain_epochs)},
                              {"nll_epochs", std::to_string(cfg.nll_epochs)}, {"lr0", num(cfg.lr0)},
                              {"hidden_channels", std::to_string(cfg.model.hidden_channels)}});
    const auto variants = experiments::ablation_variants(a.what, cfg.model);
    const auto train_set = load_dataset(read_manifest(a.data), cfg.model.scale);
    const auto test_set = a.test.empty() ? train_set : load_dataset(read_manifest(a.test), cfg.model.scale);
    if (train_set.empty() || test_set.empty()) throw ConfigError("ablation needs non-empty train and test manifests");

    if (a.what == "sharing") {
        for (bool share : {true, false}) {
            std::cout << (share ? "shared  " : "unshared") << " param counts K=1..4:";
            for (int k = 1; k <= 4; ++k) {
                ModelConfig m = cfg.model;
                m.blocks = k;
                m.share_params = share;
                std::cout << ' ' << PanFlowModel<float>(m).param_count();
            }
            std::cout << '\n';
        }
    }
    std::vector<experiments::Outcome> rows;
    const double bicubic = experiments::evaluate_bicubic(test_set, cfg.model.scale).mean("psnr");
    for (const auto& [name, model] : variants) {
        TrainConfig run = cfg;
        run.model = model;
        run.checkpoint_path.clear();
        rows.push_back(experiments::train_and_score<float>(name, run, train_set, test_set));
        std::cout << name << ": params " << rows.back().params << ", psnr " << rows.back().psnr() << " dB (bicubic "
                  << bicubic << "), bpd " << rows.back().bpd_init << " -> " << rows.back().bpd_final << std::endl;
    }
    if (a.out.empty()) {
        experiments::write_outcomes_csv(std::cout, rows);
    } else {
        std::ofstream os(a.out);
        if (!os) throw Error("cannot write " + a.out);
        experiments::write_outcomes_csv(os, rows);
        std::cout << "wrote " << a.out << '\n';
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"panflow: conditional normalizing flow for pan-sharpening"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write synthetic (HRMS, LRMS, PAN) triples and a manifest");
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--count", synth.count, "Number of triples")->capture_default_str();
    s->add_option("--bands", synth.bands, "Spectral bands (even)")->capture_default_str();
    s->add_option("--size", synth.size, "HRMS and PAN side length")->capture_default_str();
    s->add_option("--scale", synth.scale, "Resolution ratio between PAN and LRMS")->capture_default_str();
    s->add_option("--seed", synth.seed, "Scene seed")->capture_default_str();
    s->add_option("--split", synth.split, "Split tag and id prefix")->capture_default_str();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Run L1 pretraining then NLL training");
    t->add_option("--data", tr.data, "Training manifest")->required();
    t->add_option("--config", tr.config, "key = value config file");
    t->add_option("--out", tr.out, "Checkpoint path (.pfnm)")->required();
    t->add_option("--loss-csv", tr.loss_csv, "Loss report CSV (default: <out>.loss.csv)");
    t->add_option("--init", tr.init, "Start from this checkpoint instead of a fresh model");
    t->add_option("--set", tr.overrides, "Override a config key (key=value), repeatable");

    SampleArgs sa;
    auto* sp = app.add_subcommand("sample", "Draw HRMS candidates and pick the most probable");
    sp->add_option("--model", sa.model, "Checkpoint")->required();
    sp->add_option("--lrms", sa.lrms, "LRMS raster")->required();
    sp->add_option("--pan", sa.pan, "PAN raster")->required();
    sp->add_option("--out", sa.out, "Output directory")->required();
    sp->add_option("--num", sa.num, "Number of candidates")->capture_default_str();
    sp->add_option("--tau", sa.tau, "Latent temperature")->capture_default_str();
    sp->add_option("--seed", sa.seed, "Seed of the first candidate; candidate i uses seed + i")->capture_default_str();
    sp->add_option("--select", sa.select, "Selection rule")->check(CLI::IsMember({"max-prob"}))->capture_default_str();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Score predictions against a manifest");
    e->add_option("--pred", ev.pred, "Directory of <id>.pfnr predictions");
    e->add_option("--baseline", ev.baseline, "Score a built-in baseline instead of --pred")->check(CLI::IsMember({"bicubic"}));
    e->add_option("--ref", ev.ref, "Reference manifest")->required();
    e->add_option("--out", ev.out, "CSV path (default: stdout)");
    e->add_option("--scale", ev.scale, "Resolution ratio")->capture_default_str();
    e->add_flag("--full-res", ev.full_res, "Add the no-reference D_lambda, D_s and QNR columns");

    VerifyArgs ve;
    auto* v = app.add_subcommand("verify", "Run the property checks");
    v->add_option("--level", ve.level, "fast or full")->check(CLI::IsMember({"fast", "full"}))->capture_default_str();
    v->add_option("--model", ve.model, "Also check this checkpoint file for corruption");
    v->add_option("--scratch", ve.scratch, "Directory for temporary files");

    AblateArgs ab;
    auto* a = app.add_subcommand("ablate", "Train and compare model variants");
    a->add_option("--what", ab.what, "stages, conditions or sharing")
        ->required()
        ->check(CLI::IsMember({"stages", "conditions", "sharing"}));
    a->add_option("--data", ab.data, "Training manifest")->required();
    a->add_option("--test", ab.test, "Evaluation manifest (default: the training manifest)");
    a->add_option("--config", ab.config, "key = value config file");
    a->add_option("--out", ab.out, "CSV path (default: stdout)");
    a->add_option("--set", ab.overrides, "Override a config key (key=value), repeatable");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        thread_limit();  // reject a malformed PANFLOW_THREADS up front
        if (*s) return cmd_synth(synth);
        if (*t) return cmd_train(tr);
        if (*sp) return cmd_sample(sa);
        if (*e) return cmd_eval(ev);
        if (*v) return cmd_verify(ve);
        if (*a) return cmd_ablate(ab);
    } catch (const VerificationFailed& err) {
        std::cerr << "verification failed: " << err.what() << '\n';
        return kExitVerify;
    } catch (const ConfigError& err) {
        std::cerr << "usage error: " << err.what() << '\n';
        return kExitUsage;
    } catch (const ShapeError& err) {
        std::cerr << "usage error: " << err.what() << '\n';
        return kExitUsage;
    } catch (const NumericError& err) {
        std::cerr << "numeric failure: " << err.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return kExitIo;
    }
    return kExitUsage;
}
