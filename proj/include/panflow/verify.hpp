#pragma once

// Property checks run by `panflow verify` and by the acceptance runner. Every check reports
// the measured quantity next to the tolerance it was held to.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <random>
#include <string>
#include <vector>

#include "panflow/checkpoint.hpp"
#include "panflow/data.hpp"
#include "panflow/flow.hpp"
#include "panflow/metrics.hpp"
#include "panflow/oracles.hpp"
#include "panflow/trainer.hpp"

namespace panflow::verify {

struct CheckResult {
    std::string name;
    double measured = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    double seconds = 0.0;
    std::string note;
};

inline std::ostream& operator<<(std::ostream& os, const CheckResult& r) {
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": measured " << std::setprecision(6) << r.measured
       << " vs tolerance " << r.tolerance << " (" << std::fixed << std::setprecision(2) << r.seconds << " s)"
       << std::defaultfloat;
    if (!r.note.empty()) os << "  " << r.note;
    return os;
}

/// Times fn and turns a thrown exception into a failed check carrying its message.
inline CheckResult timed(const std::string& name, const std::function<CheckResult()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    CheckResult r;
    try {
        r = fn();
    } catch (const std::exception& e) {
        r.pass = false;
        r.note = std::string("exception: ") + e.what();
    }
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

template <class T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(shape);
    for (auto& v : t.storage()) v = static_cast<T>(u(rng));
    return t;
}

/// A random (H, L, P) problem of the given geometry, values in [0, 1].
template <class T>
struct Problem {
    Tensor<T> hrms, lrms, pan;
};

template <class T>
Problem<T> random_problem(const ModelConfig& c, std::size_t batch, std::size_t size, std::mt19937_64& rng) {
    const auto b = static_cast<std::size_t>(c.bands);
    const auto lr = size / static_cast<std::size_t>(c.scale);
    return {random_tensor<T>({batch, b, size, size}, rng), random_tensor<T>({batch, b, lr, lr}, rng),
            random_tensor<T>({batch, 1, size, size}, rng)};
}

// ---------------------------------------------------------------------------
// Flow properties

/// max ||inverse(forward(H)) - H||_inf over `trials` random parameterizations and inputs.
template <class T>
CheckResult invertibility(ModelConfig c, int trials, double tol, std::uint64_t seed = 1) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t));
        PanFlowModel<T> model(c, seed + static_cast<std::uint64_t>(t));
        randomize_parameters(model, seed * 1000 + static_cast<std::uint64_t>(t), 0.1);
        const auto p = random_problem<T>(c, 1, 8, rng);
        const auto z = model.forward(p.hrms, p.lrms, p.pan).z;
        worst = std::max(worst, static_cast<double>(max_abs_diff(model.inverse(z, p.lrms, p.pan), p.hrms)));
    }
    return {"", worst, tol, worst < tol, 0.0, std::to_string(trials) + " trials"};
}

/// Analytic total log-det vs the central-difference Jacobian of the composed map.
inline CheckResult logdet_exactness(ModelConfig c, int parameterizations, double tol, std::uint64_t seed = 7) {
    double worst = 0.0;
    for (int t = 0; t < parameterizations; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t));
        PanFlowModel<double> model(c, seed + static_cast<std::uint64_t>(t));
        randomize_parameters(model, seed * 1000 + static_cast<std::uint64_t>(t), 0.2);
        const auto p = random_problem<double>(c, 1, 4, rng);
        const double analytic = model.forward(p.hrms, p.lrms, p.pan).logdet.at(0);
        const double brute = oracle::model_logdet_bruteforce(model, p.hrms, p.lrms, p.pan, 1e-5);
        worst = std::max(worst, oracle::relative_error(analytic, brute));
    }
    return {"", worst, tol, worst < tol, 0.0, std::to_string(parameterizations) + " parameterizations, d=32"};
}

/// Every parameter of a small model: analytic NLL gradient vs central differences.
inline CheckResult nll_gradient(ModelConfig c, double tol, std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    PanFlowModel<double> model(c, seed);
    randomize_parameters(model, seed + 100, 0.1);
    const auto p = random_problem<double>(c, 2, 4, rng);
    const Batch<double> batch{p.hrms, p.lrms, p.pan};
    model.zero_grads();
    {
        GradTape<double> tape;
        const auto bound = model.bind(&tape);
        tape.backward(nll_loss(model, batch, bound));
    }
    std::vector<Tensor<double>> analytic;
    for (const auto& prm : model.params()) analytic.push_back(prm.grad);
    const auto r = oracle::check_gradients(model, [&] { return nll_loss(model, batch); }, analytic, 1e-5);
    return {"", r.max_rel_error, tol, r.max_rel_error < tol, 0.0,
            std::to_string(r.checked) + " parameters (" + std::to_string(r.kinked) + " re-differenced at a smaller step), worst " +
                r.worst};
}

/// Fresh model: z == H, logdet == 0, NLL equal to the closed-form Gaussian NLL of the batch.
/// The measured value is the largest of the three discrepancies.
inline CheckResult identity_init(ModelConfig c, std::uint64_t seed = 11) {
    std::mt19937_64 rng(seed);
    PanFlowModel<double> model(c, seed);
    const auto p = random_problem<double>(c, 2, 8, rng);
    const auto r = model.forward(p.hrms, p.lrms, p.pan);
    const double dz = max_abs_diff(r.z, p.hrms);
    double dlog = 0.0;
    for (double v : r.logdet) dlog = std::max(dlog, std::abs(v));
    const std::size_t d = p.hrms.numel() / 2;
    double closed = 0.0;
    for (std::size_t n = 0; n < 2; ++n) {
        double sq = 0.0;
        for (std::size_t i = 0; i < d; ++i) sq += p.hrms[n * d + i] * p.hrms[n * d + i];
        closed += 0.5 * sq + 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
    }
    closed /= 2.0;
    const double dnll = std::abs(nll_loss(model, Batch<double>{p.hrms, p.lrms, p.pan}) - closed);
    const bool ok = dz < 1e-12 && dlog == 0.0 && dnll < 1e-9;
    std::ostringstream note;
    note << "|z-H|=" << dz << " |logdet|=" << dlog << " |nll-gauss|=" << dnll;
    return {"", std::max({dz, dlog, dnll}), 1e-9, ok, 0.0, note.str()};
}

/// Parameter count as a function of K for both sharing modes.
inline CheckResult sharing_counts(ModelConfig c, int max_blocks = 4) {
    std::vector<std::size_t> shared, unshared;
    for (int k = 1; k <= max_blocks; ++k) {
        c.blocks = k;
        c.share_params = true;
        shared.push_back(PanFlowModel<double>(c).param_count());
        c.share_params = false;
        unshared.push_back(PanFlowModel<double>(c).param_count());
    }
    bool ok = true;
    std::ostringstream note;
    note << "shared";
    for (auto v : shared) note << ' ' << v;
    note << " / unshared";
    for (auto v : unshared) note << ' ' << v;
    for (std::size_t i = 1; i < shared.size(); ++i) ok = ok && shared[i] == shared[0] && unshared[i] > unshared[i - 1];
    return {"", ok ? 0.0 : 1.0, 0.0, ok, 0.0, note.str()};
}

// ---------------------------------------------------------------------------
// Kernels and metrics

inline CheckResult conv_oracle(double tol, std::uint64_t seed = 5) {
    std::mt19937_64 rng(seed);
    const auto x = random_tensor<double>({2, 4, 8, 8}, rng, -1, 1);
    const auto w = random_tensor<double>({3, 4, 3, 3}, rng, -1, 1);
    const auto b = random_tensor<double>({3}, rng, -1, 1);
    const double err = max_abs_diff(kernels::conv2d_forward(x, w, b), oracle::conv2d(x, w, b));
    return {"", err, tol, err < tol, 0.0, "2x4x8x8, 3x3 kernel"};
}

inline RasterImage random_image(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng, double lo = 0.05) {
    std::uniform_real_distribution<float> u(static_cast<float>(lo), 1.0f);
    RasterImage img{h, w, c, std::vector<float>(h * w * c)};
    for (auto& v : img.data) v = u(rng);
    return img;
}

/// Ideal values on identical inputs, the exact arithmetic examples, and agreement with the
/// direct-formula oracles on random pairs. Measured value: largest deviation found.
inline CheckResult metric_identities(double tol = 1e-10, std::uint64_t seed = 9) {
    std::mt19937_64 rng(seed);
    const auto x = random_image(32, 32, 4, rng);
    auto y = x;
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (auto& v : y.data) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    double worst = 0.0;
    std::ostringstream note;
    auto track = [&](const char* what, double got, double want) {
        const double e = std::abs(got - want);
        if (e > worst) {
            worst = e;
            note.str("");
            note << "worst: " << what;
        }
    };
    track("psnr(x,x)", metrics::psnr(x, x), metrics::kPsnrCap);
    track("ssim(x,x)", metrics::ssim(x, x), 1.0);
    track("sam(x,x)", metrics::sam(x, x), 0.0);
    track("ergas(x,x)", metrics::ergas(x, x, 0.25), 0.0);
    track("qnr(0,0)", metrics::qnr(0.0, 0.0), 1.0);
    track("psnr oracle", metrics::psnr(x, y), oracle::psnr_direct(x, y));
    track("ssim oracle", metrics::ssim(x, y), oracle::ssim_direct(x, y));
    track("sam oracle", metrics::sam(x, y), oracle::sam_direct(x, y));
    track("ergas oracle", metrics::ergas(y, x, 0.25), oracle::ergas_direct(y, x, 0.25));

    track("psnr 20 dB", metrics::psnr_from_mse(0.01), 20.0);
    // 0 vs 0.25 everywhere: MSE 1/16 exactly, and peak 2.5 makes peak^2 / MSE exactly 100.
    RasterImage a{4, 4, 1, std::vector<float>(16, 0.0f)}, b{4, 4, 1, std::vector<float>(16, 0.25f)};
    track("psnr 20 dB (raster)", metrics::psnr(a, b, 2.5), 20.0);
    RasterImage o1{2, 2, 2, {1, 0, 1, 0, 1, 0, 1, 0}}, o2{2, 2, 2, {0, 1, 0, 1, 0, 1, 0, 1}};
    track("sam pi/2", metrics::sam(o1, o2), std::numbers::pi / 2.0);
    // RMSE = mean: reference 1, fused 0 or 2 alternating, ratio 1/4 -> 25.
    RasterImage ref{2, 2, 1, {1, 1, 1, 1}}, fus{2, 2, 1, {0, 2, 0, 2}};
    track("ergas 25", metrics::ergas(fus, ref, 0.25), 25.0);
    return {"", worst, tol, worst <= tol, 0.0, note.str()};
}

// ---------------------------------------------------------------------------
// Serialization

/// PFNR and PFNM round trips compared byte for byte, plus structured errors for damage.
inline CheckResult serialization(const std::filesystem::path& dir, std::uint64_t seed = 13) {
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(seed);
    std::vector<std::string> failures;
    const auto img = random_image(16, 12, 3, rng, 0.0);
    const auto raster_path = dir / "roundtrip.pfnr";
    write_raster(img, raster_path);
    const auto back = read_raster(raster_path);
    if (!(back == img) || io::read_file(raster_path) != encode_raster(back)) failures.push_back("raster round trip");

    auto expect_code = [&](const char* what, FormatError::Code code, const std::function<void()>& fn) {
        try {
            fn();
            failures.push_back(std::string(what) + ": accepted");
        } catch (const FormatError& e) {
            if (e.code() != code) failures.push_back(std::string(what) + ": got " + to_string(e.code()));
        } catch (const std::exception& e) {
            failures.push_back(std::string(what) + ": unstructured error " + e.what());
        }
    };
    auto bytes = encode_raster(img);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    expect_code("raster magic", FormatError::Code::bad_magic, [&] { decode_raster(bad_magic); });
    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    expect_code("raster truncation", FormatError::Code::truncated, [&] { decode_raster(truncated); });

    ModelConfig c;
    c.hidden_channels = 8;
    c.share_params = false;
    c.blocks = 2;
    PanFlowModel<float> model(c, seed);
    randomize_parameters(model, seed, 0.1);
    const auto model_path = dir / "roundtrip.pfnm";
    save_checkpoint(model, model_path);
    const auto loaded = load_checkpoint<float>(model_path);
    bool same = loaded.config() == model.config();
    for (std::size_t i = 0; same && i < model.params().size(); ++i) {
        same = loaded.params()[i].value.storage() == model.params()[i].value.storage();
    }
    if (!same || encode_checkpoint(loaded) != io::read_file(model_path)) failures.push_back("checkpoint round trip");

    auto ck = io::read_file(model_path);
    auto flipped = ck;
    flipped[flipped.size() / 2] ^= 0x40;
    expect_code("checkpoint tamper", FormatError::Code::checksum_mismatch, [&] { decode_checkpoint<float>(flipped); });
    auto short_ck = ck;
    short_ck.resize(7);
    expect_code("checkpoint truncation", FormatError::Code::truncated, [&] { decode_checkpoint<float>(short_ck); });

    std::ostringstream note;
    for (const auto& f : failures) note << f << "; ";
    return {"", static_cast<double>(failures.size()), 0.0, failures.empty(), 0.0, note.str()};
}

/// A checkpoint file on disk must decode cleanly (magic, checksum, layout).
inline CheckResult checkpoint_integrity(const std::filesystem::path& path) {
    try {
        const auto m = load_checkpoint<float>(path);
        return {"", 0.0, 0.0, true, 0.0, std::to_string(m.param_count()) + " parameters"};
    } catch (const FormatError& e) {
        return {"", 1.0, 0.0, false, 0.0, std::string(to_string(e.code())) + ": " + e.what()};
    }
}

// ---------------------------------------------------------------------------
// Suites

/// Small models that keep the brute-force checks cheap; both sharing modes.
inline ModelConfig tiny_config(bool share, int blocks) {
    ModelConfig c;
    c.bands = 2;
    c.scale = 2;
    c.blocks = blocks;
    c.share_params = share;
    c.hidden_channels = 4;
    return c;
}

inline ModelConfig invertibility_config(bool share) {
    ModelConfig c;
    c.bands = 4;
    c.scale = 4;
    c.blocks = 4;
    c.share_params = share;
    c.hidden_channels = 8;
    return c;
}

inline std::vector<CheckResult> run_suite(bool full, const std::filesystem::path& scratch, std::ostream* log = nullptr) {
    std::vector<CheckResult> out;
    auto add = [&](const std::string& name, const std::function<CheckResult()>& fn) {
        out.push_back(timed(name, fn));
        if (log) *log << out.back() << std::endl;
    };
    for (bool share : {true, false}) {
        const std::string tag = share ? " [shared]" : " [unshared]";
        add("invertibility 64-bit" + tag, [&] { return invertibility<double>(invertibility_config(share), full ? 100 : 20, 1e-8); });
        add("invertibility 32-bit" + tag, [&] { return invertibility<float>(invertibility_config(share), full ? 100 : 20, 1e-3); });
        add("identity init" + tag, [&] { return identity_init(invertibility_config(share)); });
        if (full) {
            add("log-det vs Jacobian" + tag, [&] { return logdet_exactness(tiny_config(share, 4), 10, 1e-4); });
            add("NLL gradient vs finite differences" + tag, [&] { return nll_gradient(tiny_config(share, 2), 1e-4); });
        }
    }
    add("parameter sharing counts", [&] { return sharing_counts(invertibility_config(true)); });
    add("conv2d vs direct oracle", [&] { return conv_oracle(1e-12); });
    add("metric identities and oracles", [&] { return metric_identities(1e-10); });
    add("serialization round trips and corruption", [&] { return serialization(scratch); });
    return out;
}

} // namespace panflow::verify
