#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "panflow/autograd.hpp"
#include "panflow/checkpoint.hpp"
#include "panflow/data.hpp"
#include "panflow/flow.hpp"
#include "panflow/ops.hpp"

namespace panflow {

struct TrainConfig {
    double lr0 = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 4;
    int pretrain_epochs = 100;
    int nll_epochs = 50;
    int lr_decay_every = 200;
    double lr_decay_factor = 0.5;
    double clip_norm = 10.0;  // global gradient norm bound in the NLL stage; 0 disables
    std::uint64_t seed = 0;
    std::string dtype = "float32";
    int checkpoint_every = 0;  // epochs between checkpoints; 0 writes only at the end
    std::string checkpoint_path;
    bool finite_checks = false;  // per-op NaN/Inf assertions during training (the loss is always checked)
    ModelConfig model;

    void validate() const {
        if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
        if (!(eps > 0.0)) throw ConfigError("eps must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (pretrain_epochs < 0 || nll_epochs < 0) throw ConfigError("epoch counts must be >= 0");
        if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
        if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0)) throw ConfigError("lr_decay_factor must lie in (0, 1)");
        if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
        if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
        if (dtype != "float32" && dtype != "float64") throw ConfigError("dtype must be float32 or float64, got " + dtype);
        model.validate();
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key " + key + ": expected a boolean, got '" + v + "'");
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    N out{};
    is >> out;
    if (!is || !(is >> std::ws).eof()) throw ConfigError("key " + key + ": cannot parse '" + v + "'");
    return out;
}

} // namespace detail

/// Applies one `key = value` assignment; unknown keys are rejected.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_number;
    if (key == "lr0") c.lr0 = parse_number<double>(key, value);
    else if (key == "beta1") c.beta1 = parse_number<double>(key, value);
    else if (key == "beta2") c.beta2 = parse_number<double>(key, value);
    else if (key == "eps") c.eps = parse_number<double>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, value);
    else if (key == "pretrain_epochs") c.pretrain_epochs = parse_number<int>(key, value);
    else if (key == "nll_epochs") c.nll_epochs = parse_number<int>(key, value);
    else if (key == "lr_decay_every") c.lr_decay_every = parse_number<int>(key, value);
    else if (key == "lr_decay_factor") c.lr_decay_factor = parse_number<double>(key, value);
    else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "dtype") c.dtype = value;
    else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, value);
    else if (key == "checkpoint_path") c.checkpoint_path = value;
    else if (key == "finite_checks") c.finite_checks = parse_bool(key, value);
    else if (key == "bands") c.model.bands = parse_number<int>(key, value);
    else if (key == "scale") c.model.scale = parse_number<int>(key, value);
    else if (key == "blocks") c.model.blocks = parse_number<int>(key, value);
    else if (key == "share_params") c.model.share_params = parse_bool(key, value);
    else if (key == "hidden_channels") c.model.hidden_channels = parse_number<int>(key, value);
    else if (key == "clamp_alpha") c.model.clamp_alpha = parse_number<double>(key, value);
    else if (key == "use_lrms") c.model.use_lrms = parse_bool(key, value);
    else if (key == "use_pan") c.model.use_pan = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

/// Flat `key = value` text; `#` starts a comment.
inline TrainConfig parse_train_config(std::istream& in) {
    TrainConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    c.validate();
    return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    return parse_train_config(in);
}

/// The fully resolved configuration in the same key = value syntax.
inline std::string format_config(const TrainConfig& c) {
    std::ostringstream os;
    os << std::setprecision(17) << std::boolalpha;
    os << "lr0 = " << c.lr0 << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2 << "\neps = " << c.eps
       << "\nbatch_size = " << c.batch_size << "\npretrain_epochs = " << c.pretrain_epochs
       << "\nnll_epochs = " << c.nll_epochs << "\nlr_decay_every = " << c.lr_decay_every
       << "\nlr_decay_factor = " << c.lr_decay_factor << "\nclip_norm = " << c.clip_norm << "\nseed = " << c.seed
       << "\ndtype = " << c.dtype << "\ncheckpoint_every = " << c.checkpoint_every
       << "\ncheckpoint_path = " << c.checkpoint_path << "\nfinite_checks = " << c.finite_checks
       << "\nbands = " << c.model.bands << "\nscale = " << c.model.scale << "\nblocks = " << c.model.blocks
       << "\nshare_params = " << c.model.share_params << "\nhidden_channels = " << c.model.hidden_channels
       << "\nclamp_alpha = " << c.model.clamp_alpha << "\nuse_lrms = " << c.model.use_lrms
       << "\nuse_pan = " << c.model.use_pan << "\n";
    return os.str();
}

/// lr0 * factor^floor(epoch / decay_every).
inline double lr_schedule(int epoch, const TrainConfig& c) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    return c.lr0 * std::pow(c.lr_decay_factor, epoch / c.lr_decay_every);
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::int64_t t = 0;

    AdamState() = default;
    explicit AdamState(const std::vector<Parameter<T>>& params) {
        for (const auto& p : params) {
            m.push_back(Tensor<T>::zeros_like(p.value));
            v.push_back(Tensor<T>::zeros_like(p.value));
        }
    }
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam update using each parameter's accumulated gradient.
template <class T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr, const AdamHyper& h = {}) {
    if (state.m.size() != params.size()) state = AdamState<T>(params);
    ++state.t;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        T* m = state.m[k].data();
        T* v = state.v[k].data();
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad[i];
            const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            p.value[i] = static_cast<T>(p.value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps));
        }
    }
}

template <class T>
double grad_global_norm(const std::vector<Parameter<T>>& params) {
    double acc = 0.0;
    for (const auto& p : params) {
        for (T g : p.grad.values()) acc += static_cast<double>(g) * g;
    }
    return std::sqrt(acc);
}

/// Rescales all gradients so their global norm is at most max_norm; returns the norm before.
template <class T>
double clip_grad_norm(std::vector<Parameter<T>>& params, double max_norm) {
    const double norm = grad_global_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            for (auto& g : p.grad.storage()) g = static_cast<T>(g * s);
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
struct Batch {
    Tensor<T> hrms;
    Tensor<T> lrms;
    Tensor<T> pan;

    std::size_t size() const { return hrms.size(0); }
    std::size_t dims() const { return hrms.numel() / hrms.size(0); }
};

template <class T>
Batch<T> make_batch(const std::vector<SceneTriple>& data, std::span<const std::size_t> indices) {
    std::vector<const RasterImage*> h, l, p;
    for (std::size_t i : indices) {
        h.push_back(&data.at(i).hrms);
        l.push_back(&data.at(i).lrms);
        p.push_back(&data.at(i).pan);
    }
    return {to_batch<T>(h), to_batch<T>(l), to_batch<T>(p)};
}

template <class T>
Batch<T> make_batch(const SceneTriple& t) {
    return {to_tensor<T>(t.hrms), to_tensor<T>(t.lrms), to_tensor<T>(t.pan)};
}

/// Mean over the batch of -log p(H | L, P), in nats, as a graph node.
template <class T>
Var<T> nll_loss(const PanFlowModel<T>& model, const Batch<T>& b, const typename PanFlowModel<T>::Bound& bound) {
    auto r = model.forward_graph(Var<T>::constant(b.hrms), model.condition(b.lrms, b.pan), bound);
    const T log_norm = static_cast<T>(0.5 * static_cast<double>(b.dims()) * std::log(2.0 * std::numbers::pi));
    auto per_sample = ops::sub(ops::scale(ops::square_sum_per_sample(r.z), T(0.5)), r.logdet);
    return ops::add_constant(ops::mean(per_sample), log_norm);
}

/// Mean absolute error between the tau = 0 reconstruction model_inverse(0, L, P) and H.
template <class T>
Var<T> l1_pretrain_loss(const PanFlowModel<T>& model, const Batch<T>& b, const typename PanFlowModel<T>::Bound& bound) {
    auto zero = Var<T>::constant(Tensor<T>(b.hrms.shape()));
    auto recon = model.inverse_graph(zero, model.condition(b.lrms, b.pan), bound);
    return ops::mean_abs_diff(recon, Var<T>::constant(b.hrms));
}

template <class T>
double nll_loss(const PanFlowModel<T>& model, const Batch<T>& b) {
    return static_cast<double>(nll_loss(model, b, model.bind_constant()).value().item());
}

template <class T>
double l1_pretrain_loss(const PanFlowModel<T>& model, const Batch<T>& b) {
    return static_cast<double>(l1_pretrain_loss(model, b, model.bind_constant()).value().item());
}

inline double nats_to_bits_per_dim(double nll, std::size_t dims) {
    return nll / (static_cast<double>(dims) * std::numbers::ln2);
}

/// Mean NLL in bits per dimension over a dataset, evaluated in chunks of batch_size.
template <class T>
double mean_bits_per_dim(const PanFlowModel<T>& model, const std::vector<SceneTriple>& data, std::size_t batch_size = 4) {
    if (data.empty()) throw Error("mean_bits_per_dim on an empty dataset");
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size(); i += batch_size) {
        idx.clear();
        for (std::size_t j = i; j < std::min(data.size(), i + batch_size); ++j) idx.push_back(j);
        const auto b = make_batch<T>(data, idx);
        total += nll_loss(model, b) * static_cast<double>(idx.size());
    }
    return nats_to_bits_per_dim(total / static_cast<double>(data.size()), data.front().hrms.data.size());
}

// ---------------------------------------------------------------------------
// Training loop

struct LossReport {
    int epoch = 0;
    double mean_nll_bits_per_dim = std::numeric_limits<double>::quiet_NaN();
    double mean_l1 = std::numeric_limits<double>::quiet_NaN();
    double lr = 0.0;
    double seconds = 0.0;

    /// Equality of everything except wall time; NaN fields compare equal to NaN.
    bool same_losses(const LossReport& o) const {
        auto eq = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
        return epoch == o.epoch && eq(mean_nll_bits_per_dim, o.mean_nll_bits_per_dim) && eq(mean_l1, o.mean_l1) && lr == o.lr;
    }
};

inline constexpr const char* kLossCsvHeader = "epoch,nll_bpd,l1,lr,seconds";

inline void write_loss_row(std::ostream& os, const LossReport& r) {
    auto num = [&](double v) {
        if (std::isnan(v)) os << "nan";
        else os << std::setprecision(10) << v;
    };
    os << r.epoch << ',';
    num(r.mean_nll_bits_per_dim);
    os << ',';
    num(r.mean_l1);
    os << ',';
    num(r.lr);
    os << ',';
    num(r.seconds);
    os << '\n';
}

/// Raised when a training loss becomes non-finite; the model holds the last good parameters.
class TrainingAborted : public NumericError {
public:
    using NumericError::NumericError;
};

struct TrainHooks {
    std::ostream* csv = nullptr;                          // rows appended after each epoch (no header)
    std::function<void(const LossReport&)> on_epoch;      // progress reporting
};

namespace detail {

class FiniteCheckScope {
public:
    explicit FiniteCheckScope(bool enabled) : saved_(finite_checks_enabled()) { set_finite_checks(enabled); }
    ~FiniteCheckScope() { set_finite_checks(saved_); }
    FiniteCheckScope(const FiniteCheckScope&) = delete;
    FiniteCheckScope& operator=(const FiniteCheckScope&) = delete;

private:
    bool saved_;
};

template <class T>
std::vector<Tensor<T>> snapshot(const PanFlowModel<T>& model) {
    std::vector<Tensor<T>> out;
    for (const auto& p : model.params()) out.push_back(p.value);
    return out;
}

template <class T>
void restore(PanFlowModel<T>& model, const std::vector<Tensor<T>>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) model.params()[i].value = values[i];
    model.zero_grads();
}

// Finds the first sample whose own loss is non-finite, for the error message.
template <class T>
std::string locate_bad_sample(const PanFlowModel<T>& model, const std::vector<SceneTriple>& data,
                              std::span<const std::size_t> idx, bool nll) {
    for (std::size_t i : idx) {
        try {
            const auto b = make_batch<T>(data[i]);
            const double v = nll ? nll_loss(model, b) : l1_pretrain_loss(model, b);
            if (!std::isfinite(v)) return "sample " + std::to_string(i) + " (" + data[i].id + ")";
        } catch (const NumericError&) {
            return "sample " + std::to_string(i) + " (" + data[i].id + ")";
        }
    }
    return "batch";
}

} // namespace detail

/// pretrain_epochs of L1 followed by nll_epochs of NLL. Epochs are numbered globally
/// (the NLL stage continues the count) and drive the learning-rate schedule. Adam
/// moments restart at the stage boundary. Deterministic given cfg.seed.
template <class T>
std::vector<LossReport> train(PanFlowModel<T>& model, const std::vector<SceneTriple>& data, const TrainConfig& cfg,
                              const TrainHooks& hooks = {}) {
    cfg.validate();
    if (!(model.config() == cfg.model)) throw ConfigError("model configuration differs from the training configuration");
    const int total_epochs = cfg.pretrain_epochs + cfg.nll_epochs;
    std::vector<LossReport> reports;
    if (total_epochs == 0) return reports;
    if (data.empty()) throw ConfigError("training set is empty");
    for (const auto& t : data) {
        if (!t.hrms.same_shape(data.front().hrms)) throw ShapeError("training set geometry is not uniform at " + t.id);
    }

    detail::FiniteCheckScope checks(cfg.finite_checks);
    const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.eps};
    AdamState<T> adam(model.params());
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t dims = data.front().hrms.data.size();
    auto good = detail::snapshot(model);

    auto save = [&] {
        if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    };

    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        const bool nll_stage = epoch >= cfg.pretrain_epochs;
        if (epoch == cfg.pretrain_epochs) adam = AdamState<T>(model.params());
        const auto start = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, cfg);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
            const std::span<const std::size_t> idx(order.data() + i, std::min(order.size() - i, static_cast<std::size_t>(cfg.batch_size)));
            const auto batch = make_batch<T>(data, idx);
            model.zero_grads();
            double value = std::numeric_limits<double>::quiet_NaN();
            std::string detail_msg;
            try {
                GradTape<T> tape;
                const auto bound = model.bind(&tape);
                auto loss = nll_stage ? nll_loss(model, batch, bound) : l1_pretrain_loss(model, batch, bound);
                value = static_cast<double>(loss.value().item());
                if (std::isfinite(value)) tape.backward(loss);
            } catch (const NumericError& e) {
                detail_msg = e.what();
            }
            const bool grads_ok = std::isfinite(value) && std::isfinite(grad_global_norm(model.params()));
            if (!grads_ok) {
                const std::string where = detail::locate_bad_sample(model, data, idx, nll_stage);
                detail::restore(model, good);
                save();
                throw TrainingAborted("non-finite " + std::string(nll_stage ? "NLL" : "L1") + " loss at epoch " +
                                      std::to_string(epoch) + ", " + where +
                                      (detail_msg.empty() ? "" : ": " + detail_msg) + "; kept last good parameters");
            }
            if (nll_stage) clip_grad_norm(model.params(), cfg.clip_norm);
            adam_step(model.params(), adam, lr, hyper);
            loss_sum += value * static_cast<double>(idx.size());
        }
        good = detail::snapshot(model);
        LossReport r;
        r.epoch = epoch;
        r.lr = lr;
        const double mean = loss_sum / static_cast<double>(data.size());
        if (nll_stage) r.mean_nll_bits_per_dim = nats_to_bits_per_dim(mean, dims);
        else r.mean_l1 = mean;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        reports.push_back(r);
        if (hooks.csv) {
            write_loss_row(*hooks.csv, r);
            hooks.csv->flush();
        }
        if (hooks.on_epoch) hooks.on_epoch(r);
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) save();
    }
    model.zero_grads();
    save();
    return reports;
}

} // namespace panflow
