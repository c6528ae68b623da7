#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "panflow/autograd.hpp"
#include "panflow/ops.hpp"
#include "panflow/tensor.hpp"

namespace panflow {

struct ModelConfig {
    int bands = 4;
    int scale = 4;
    int blocks = 4;
    bool share_params = true;
    int hidden_channels = 64;
    double clamp_alpha = 1.9;
    // Ablation masks: a disabled condition is fed to the subnets as zeros.
    bool use_lrms = true;
    bool use_pan = true;

    int cond_channels() const { return bands + 1; }
    int half() const { return bands / 2; }

    void validate() const {
        if (bands < 2 || bands % 2 != 0) {
            throw ConfigError("band count must be even and >= 2, got " + std::to_string(bands));
        }
        if (scale < 1) throw ConfigError("scale must be >= 1");
        if (blocks < 1) throw ConfigError("blocks must be >= 1");
        if (hidden_channels < bands) {
            throw ConfigError("hidden_channels (" + std::to_string(hidden_channels) +
                              ") must be >= bands (" + std::to_string(bands) + ")");
        }
        if (!(clamp_alpha > 0.0)) throw ConfigError("clamp_alpha must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Natural-log density of a standard normal, per batch sample.
template <class T>
std::vector<double> gaussian_logpdf(const Tensor<T>& z) {
    if (z.dim() == 0) throw ShapeError("gaussian_logpdf needs a batch axis");
    const std::size_t batch = z.size(0);
    const std::size_t d = z.numel() / batch;
    const double log_norm = 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
    std::vector<double> out(batch);
    for (std::size_t n = 0; n < batch; ++n) {
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = z[n * d + i];
            sq += v * v;
        }
        out[n] = -log_norm - 0.5 * sq;
    }
    return out;
}

/// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax_first(std::span<const double> values) {
    if (values.empty()) throw Error("argmax over an empty candidate list");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

template <class T>
class PanFlowModel {
public:
    /// Subnet roles inside one coupling block.
    enum Role : std::size_t { s1 = 0, t1 = 1, s2 = 2, t2 = 3 };
    static constexpr const char* role_name(std::size_t r) {
        constexpr const char* names[] = {"s1", "t1", "s2", "t2"};
        return names[r];
    }

    struct Result {
        Tensor<T> z;
        std::vector<T> logdet;
    };

    /// Graph-level output of a forward pass; logdet has one entry per sample.
    struct GraphResult {
        Var<T> z;
        Var<T> logdet;
    };

    /// Parameters bound to a tape (or as constants) for one pass.
    using Bound = std::vector<Var<T>>;

    /// Per-pass state: the conditioning map and, for every stored subnet, the part of
    /// conv_in that only sees the condition. With shared parameters that part is
    /// identical in every block, so it is evaluated once per pass.
    struct Pass {
        const Bound* bound = nullptr;
        Var<T> cond;
        std::vector<Var<T>> latent_weight;  // conv_in weight restricted to the latent channels
        std::vector<Var<T>> cond_term;      // conv_in(cond) with bias, N x hidden x H x W
        Var<T> zero_bias;
    };

    Pass prepare(const Bound& bound, const Var<T>& cond) const {
        kernels::require_4d(cond.shape(), "condition");
        if (cond.shape()[1] != static_cast<std::size_t>(config_.cond_channels())) {
            throw ShapeError("condition " + shape_str(cond.shape()) + " should have " +
                             std::to_string(config_.cond_channels()) + " channels");
        }
        Pass pass;
        pass.bound = &bound;
        pass.cond = cond;
        pass.zero_bias = Var<T>::constant(Tensor<T>(Shape{static_cast<std::size_t>(config_.hidden_channels)}));
        const auto half = static_cast<std::size_t>(config_.half());
        for (std::size_t b = 0; b < stored_blocks(); ++b) {
            for (std::size_t r = 0; r < 4; ++r) {
                const std::size_t i = (b * 4 + r) * kTensorsPerSubnet;
                auto [w_latent, w_cond] = ops::channel_split(bound[i], half);
                pass.latent_weight.push_back(w_latent);
                pass.cond_term.push_back(ops::conv2d(cond, w_cond, bound[i + 1]));
            }
        }
        return pass;
    }

    explicit PanFlowModel(ModelConfig config, std::uint64_t seed = 0) : config_(config) {
        config_.validate();
        build();
        initialize(seed);
    }

    const ModelConfig& config() const noexcept { return config_; }
    std::vector<Parameter<T>>& params() noexcept { return params_; }
    const std::vector<Parameter<T>>& params() const noexcept { return params_; }

    std::size_t param_count() const {
        std::size_t total = 0;
        for (const auto& p : params_) total += p.value.numel();
        return total;
    }

    std::size_t stored_blocks() const { return config_.share_params ? 1 : static_cast<std::size_t>(config_.blocks); }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Conditioning map: L upsampled by the scale factor, concatenated with P.
    Var<T> condition(const Tensor<T>& lrms, const Tensor<T>& pan) const {
        kernels::require_4d(lrms.shape(), "LRMS");
        kernels::require_4d(pan.shape(), "PAN");
        const auto s = static_cast<std::size_t>(config_.scale);
        if (lrms.size(1) != static_cast<std::size_t>(config_.bands) || pan.size(1) != 1 ||
            lrms.size(0) != pan.size(0) || lrms.size(2) * s != pan.size(2) ||
            lrms.size(3) * s != pan.size(3)) {
            throw ShapeError("condition geometry mismatch: LRMS " + shape_str(lrms.shape()) + ", PAN " +
                             shape_str(pan.shape()) + ", bands " + std::to_string(config_.bands) +
                             ", scale " + std::to_string(config_.scale));
        }
        Tensor<T> l = config_.use_lrms ? lrms : Tensor<T>(lrms.shape());
        Tensor<T> p = config_.use_pan ? pan : Tensor<T>(pan.shape());
        auto up = ops::upsample_nearest(Var<T>::constant(std::move(l)), s);
        return ops::channel_concat(up, Var<T>::constant(std::move(p)));
    }

    Bound bind(GradTape<T>* tape) {
        Bound bound;
        bound.reserve(params_.size());
        for (auto& p : params_) bound.push_back(tape ? tape->param(p) : Var<T>::constant(p.value));
        return bound;
    }

    Bound bind_constant() const {
        Bound bound;
        bound.reserve(params_.size());
        for (const auto& p : params_) bound.push_back(Var<T>::constant(p.value));
        return bound;
    }

    /// One conditional affine coupling block applied to h (N x B x H x W).
    GraphResult block_forward(std::size_t block, const Var<T>& h, const Pass& pass) const {
        check_latent(h, pass.cond);
        try {
            const auto half = static_cast<std::size_t>(config_.half());
            auto [h1, h2] = ops::channel_split(h, half);
            auto sc1 = ops::soft_clamp(subnet(block, s1, h2, pass), alpha());
            auto y1 = ops::add(ops::mul(h1, ops::exp(sc1)), subnet(block, t1, h2, pass));
            auto sc2 = ops::soft_clamp(subnet(block, s2, y1, pass), alpha());
            auto y2 = ops::add(ops::mul(h2, ops::exp(sc2)), subnet(block, t2, y1, pass));
            auto logdet = ops::add(ops::sum_per_sample(sc1), ops::sum_per_sample(sc2));
            return {ops::channel_concat(y1, y2), logdet};
        } catch (const NumericError& e) {
            throw NumericError("coupling block " + std::to_string(block) + ": " + e.what());
        }
    }

    /// Exact inverse of block_forward: undoes the second coupling, then the first.
    Var<T> block_inverse(std::size_t block, const Var<T>& y, const Pass& pass) const {
        check_latent(y, pass.cond);
        try {
            const auto half = static_cast<std::size_t>(config_.half());
            auto [y1, y2] = ops::channel_split(y, half);
            auto sc2 = ops::soft_clamp(subnet(block, s2, y1, pass), alpha());
            auto h2 = ops::mul(ops::sub(y2, subnet(block, t2, y1, pass)), ops::exp(ops::scale(sc2, T{-1})));
            auto sc1 = ops::soft_clamp(subnet(block, s1, h2, pass), alpha());
            auto h1 = ops::mul(ops::sub(y1, subnet(block, t1, h2, pass)), ops::exp(ops::scale(sc1, T{-1})));
            return ops::channel_concat(h1, h2);
        } catch (const NumericError& e) {
            throw NumericError("coupling block " + std::to_string(block) + " (inverse): " + e.what());
        }
    }

    /// An odd number of inter-block reversals leaves z in reversed channel order; one more
    /// reversal at the end restores it so that the identity-initialized flow maps H to itself.
    bool restore_order() const { return config_.blocks % 2 == 0; }

    /// H -> z through all K blocks, reversing channel order between blocks.
    GraphResult forward_graph(const Var<T>& hrms, const Var<T>& cond, const Bound& bound) const {
        const Pass pass = prepare(bound, cond);
        Var<T> h = hrms;
        Var<T> logdet;
        for (std::size_t k = 0; k < static_cast<std::size_t>(config_.blocks); ++k) {
            if (k > 0) h = ops::channel_reverse(h);
            auto r = block_forward(k, h, pass);
            h = r.z;
            logdet = k == 0 ? r.logdet : ops::add(logdet, r.logdet);
        }
        if (restore_order()) h = ops::channel_reverse(h);
        return {h, logdet};
    }

    Var<T> inverse_graph(const Var<T>& z, const Var<T>& cond, const Bound& bound) const {
        const Pass pass = prepare(bound, cond);
        Var<T> h = restore_order() ? ops::channel_reverse(z) : z;
        for (std::size_t k = static_cast<std::size_t>(config_.blocks); k-- > 0;) {
            h = block_inverse(k, h, pass);
            if (k > 0) h = ops::channel_reverse(h);
        }
        return h;
    }

    Result forward(const Tensor<T>& hrms, const Tensor<T>& lrms, const Tensor<T>& pan) const {
        check_hrms(hrms, pan);
        auto r = forward_graph(Var<T>::constant(hrms), condition(lrms, pan), bind_constant());
        const auto& ld = r.logdet.value();
        return {r.z.value(), std::vector<T>(ld.values().begin(), ld.values().end())};
    }

    Tensor<T> inverse(const Tensor<T>& z, const Tensor<T>& lrms, const Tensor<T>& pan) const {
        check_hrms(z, pan);
        return inverse_graph(Var<T>::constant(z), condition(lrms, pan), bind_constant()).value();
    }

    /// Single-block forward on tensors with an explicit conditioning map.
    Result block_forward(std::size_t block, const Tensor<T>& h, const Tensor<T>& cond) const {
        const Bound bound = bind_constant();
        auto r = block_forward(block, Var<T>::constant(h), prepare(bound, Var<T>::constant(cond)));
        const auto& ld = r.logdet.value();
        return {r.z.value(), std::vector<T>(ld.values().begin(), ld.values().end())};
    }

    Tensor<T> block_inverse(std::size_t block, const Tensor<T>& y, const Tensor<T>& cond) const {
        const Bound bound = bind_constant();
        return block_inverse(block, Var<T>::constant(y), prepare(bound, Var<T>::constant(cond))).value();
    }

    /// log p(H | L, P) per sample, in nats.
    std::vector<double> log_prob(const Tensor<T>& hrms, const Tensor<T>& lrms, const Tensor<T>& pan) const {
        auto r = forward(hrms, lrms, pan);
        auto lp = gaussian_logpdf(r.z);
        for (std::size_t n = 0; n < lp.size(); ++n) lp[n] += static_cast<double>(r.logdet[n]);
        return lp;
    }

    /// Draws z ~ tau * N(0, I) from the given seed and maps it back to image space.
    Tensor<T> sample(const Tensor<T>& lrms, const Tensor<T>& pan, double tau, std::uint64_t seed) const {
        if (tau < 0.0) throw ConfigError("temperature must be >= 0");
        kernels::require_4d(pan.shape(), "PAN");
        Tensor<T> z(Shape{pan.size(0), static_cast<std::size_t>(config_.bands), pan.size(2), pan.size(3)});
        if (tau > 0.0) {
            std::mt19937_64 rng(seed);
            std::normal_distribution<double> normal(0.0, 1.0);
            for (auto& v : z.storage()) v = static_cast<T>(tau * normal(rng));
        }
        return inverse(z, lrms, pan);
    }

    /// Picks the candidate with the highest log p(H | L, P); ties go to the lowest index.
    std::pair<std::size_t, std::vector<double>> select_max_probability(std::span<const Tensor<T>> candidates,
                                                                       const Tensor<T>& lrms,
                                                                       const Tensor<T>& pan) const {
        if (candidates.empty()) throw Error("select_max_probability: empty candidate list");
        std::vector<double> scores;
        scores.reserve(candidates.size());
        for (const auto& c : candidates) scores.push_back(log_prob(c, lrms, pan).at(0));
        return {argmax_first(scores), std::move(scores)};
    }

    template <class U>
    PanFlowModel<U> cast() const {
        PanFlowModel<U> out(config_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            out.params()[i].value = params_[i].value.template cast<U>();
        }
        return out;
    }

private:
    static constexpr std::size_t kTensorsPerSubnet = 4;  // conv_in w/b, conv_out w/b

    T alpha() const { return static_cast<T>(config_.clamp_alpha); }

    std::size_t base_index(std::size_t block, std::size_t role) const {
        const std::size_t stored = config_.share_params ? 0 : block;
        return (stored * 4 + role) * kTensorsPerSubnet;
    }

    /// conv_in -> half instance norm -> leaky ReLU -> conv_out, where conv_in acts on the
    /// concatenation of the latent half and the condition.
    Var<T> subnet(std::size_t block, std::size_t role, const Var<T>& latent, const Pass& pass) const {
        const std::size_t j = (config_.share_params ? 0 : block) * 4 + role;
        const std::size_t i = base_index(block, role);
        const Bound& bound = *pass.bound;
        auto hidden = ops::add(ops::conv2d(latent, pass.latent_weight[j], pass.zero_bias), pass.cond_term[j]);
        const auto split = static_cast<std::size_t>(config_.hidden_channels / 2);
        auto [normed, rest] = ops::channel_split(hidden, split);
        hidden = ops::channel_concat(ops::instance_norm(normed), rest);
        hidden = ops::leaky_relu(hidden, T(0.2));
        return ops::conv2d(hidden, bound[i + 2], bound[i + 3]);
    }

    void check_latent(const Var<T>& h, const Var<T>& cond) const {
        kernels::require_4d(h.shape(), "latent");
        kernels::require_4d(cond.shape(), "condition");
        const auto& hs = h.shape();
        const auto& cs = cond.shape();
        if (hs[1] != static_cast<std::size_t>(config_.bands) ||
            cs[1] != static_cast<std::size_t>(config_.cond_channels()) || hs[0] != cs[0] ||
            hs[2] != cs[2] || hs[3] != cs[3]) {
            throw ShapeError("latent " + shape_str(hs) + " incompatible with condition " + shape_str(cs) +
                             " for " + std::to_string(config_.bands) + " bands");
        }
    }

    void check_hrms(const Tensor<T>& hrms, const Tensor<T>& pan) const {
        kernels::require_4d(hrms.shape(), "HRMS");
        if (hrms.size(1) != static_cast<std::size_t>(config_.bands) || hrms.size(0) != pan.size(0) ||
            hrms.size(2) != pan.size(2) || hrms.size(3) != pan.size(3)) {
            throw ShapeError("HRMS " + shape_str(hrms.shape()) + " does not match PAN " +
                             shape_str(pan.shape()) + " with " + std::to_string(config_.bands) + " bands");
        }
    }

    void build() {
        const auto half = static_cast<std::size_t>(config_.half());
        const auto hidden = static_cast<std::size_t>(config_.hidden_channels);
        const std::size_t in = half + static_cast<std::size_t>(config_.cond_channels());
        for (std::size_t b = 0; b < stored_blocks(); ++b) {
            for (std::size_t r = 0; r < 4; ++r) {
                const std::string prefix = "cacb" + std::to_string(b) + "/" + role_name(r) + "/";
                params_.emplace_back(prefix + "conv_in/weight", Tensor<T>(Shape{hidden, in, 3, 3}));
                params_.emplace_back(prefix + "conv_in/bias", Tensor<T>(Shape{hidden}));
                params_.emplace_back(prefix + "conv_out/weight", Tensor<T>(Shape{half, hidden, 3, 3}));
                params_.emplace_back(prefix + "conv_out/bias", Tensor<T>(Shape{half}));
            }
        }
    }

    /// Kaiming-normal conv_in; conv_out starts at exactly zero so the flow is the identity.
    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < params_.size(); i += kTensorsPerSubnet) {
            auto& w = params_[i].value;
            const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
            const double stddev = std::sqrt(2.0 / ((1.0 + 0.04) * fan_in));
            for (auto& v : w.storage()) v = static_cast<T>(stddev * normal(rng));
        }
    }

    ModelConfig config_;
    std::vector<Parameter<T>> params_;
};

/// Overwrites every parameter (including conv_out) with N(0, stddev^2) draws.
/// Used to exercise non-trivial flows in verification.
template <class T>
void randomize_parameters(PanFlowModel<T>& model, std::uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& p : model.params()) {
        for (auto& v : p.value.storage()) v = static_cast<T>(normal(rng));
    }
}

} // namespace panflow
