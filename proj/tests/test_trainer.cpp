#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "panflow/trainer.hpp"
#include "panflow/verify.hpp"

using namespace panflow;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig c;
    c.model.bands = 2;
    c.model.scale = 2;
    c.model.blocks = 2;
    c.model.hidden_channels = 4;
    c.pretrain_epochs = 2;
    c.nll_epochs = 2;
    c.batch_size = 3;
    c.lr0 = 1e-3;
    c.seed = 17;
    return c;
}

std::vector<SceneTriple> tiny_dataset(int count = 5) {
    SyntheticSceneConfig s;
    s.bands = 2;
    s.size = 8;
    s.seed = 4;
    return synthesize_triples(count, s, 2);
}

} // namespace

TEST(LrSchedule, StepDecay) {
    const TrainConfig c;
    EXPECT_DOUBLE_EQ(lr_schedule(0, c), 5e-5);
    EXPECT_DOUBLE_EQ(lr_schedule(199, c), 5e-5);
    EXPECT_DOUBLE_EQ(lr_schedule(200, c), 2.5e-5);
    EXPECT_DOUBLE_EQ(lr_schedule(399, c), 2.5e-5);
    EXPECT_DOUBLE_EQ(lr_schedule(400, c), 1.25e-5);
    for (int e = 1; e < 2000; ++e) EXPECT_LE(lr_schedule(e, c), lr_schedule(e - 1, c));
    EXPECT_THROW(lr_schedule(-1, c), ConfigError);
}

TEST(Adam, FirstStepIsLrTimesSign) {
    std::vector<Parameter<double>> ps;
    ps.emplace_back("p", Tensor<double>({3}, std::vector<double>{0.0, 1.0, -2.0}));
    ps[0].grad = Tensor<double>({3}, 1.0);
    AdamState<double> st(ps);
    EXPECT_EQ(st.t, 0);
    adam_step(ps, st, 1e-3);
    EXPECT_EQ(st.t, 1);
    const double delta = -1e-3 * (1.0 / (1.0 + 1e-8));
    EXPECT_NEAR(ps[0].value[0], delta, 1e-15);
    EXPECT_NEAR(ps[0].value[1], 1.0 + delta, 1e-15);
    EXPECT_NEAR(ps[0].value[2], -2.0 + delta, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    std::vector<Parameter<double>> ps;
    ps.emplace_back("p", Tensor<double>({4}, std::vector<double>{0.1, -0.2, 0.3, 0.4}));
    const auto before = ps[0].value;
    AdamState<double> st(ps);
    for (int i = 0; i < 5; ++i) adam_step(ps, st, 1e-2);
    EXPECT_EQ(ps[0].value, before);
    EXPECT_EQ(st.t, 5);
}

TEST(Adam, DescendsOnParabola) {
    std::vector<Parameter<double>> ps;
    ps.emplace_back("p", Tensor<double>({1}, 1.0));
    AdamState<double> st(ps);
    double f = 1.0;
    for (int i = 0; i < 10; ++i) {
        ps[0].grad[0] = 2.0 * ps[0].value[0];
        adam_step(ps, st, 0.05);
        const double next = ps[0].value[0] * ps[0].value[0];
        EXPECT_LT(next, f);
        f = next;
    }
}

TEST(Adam, MatchesReferenceRecurrence) {
    std::vector<Parameter<double>> ps;
    ps.emplace_back("p", Tensor<double>({1}, 0.5));
    AdamState<double> st(ps);
    double p = 0.5, m = 0.0, v = 0.0;
    const double grads[] = {0.3, -1.2, 0.7, 0.0, 2.5};
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[t - 1];
        ps[0].grad[0] = g;
        adam_step(ps, st, 0.01);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        p -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        EXPECT_NEAR(ps[0].value[0], p, 1e-15);
    }
}

TEST(ClipGradNorm, RescalesOnlyAboveBound) {
    std::vector<Parameter<double>> ps;
    ps.emplace_back("a", Tensor<double>({2}));
    ps[0].grad = Tensor<double>({2}, std::vector<double>{3.0, 4.0});
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 10.0), 5.0);
    EXPECT_DOUBLE_EQ(ps[0].grad[0], 3.0);
    EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(grad_global_norm(ps), 1.0, 1e-15);
}

TEST(NllLoss, GaussianAtOrigin) {
    ModelConfig c = verify::tiny_config(true, 2);
    PanFlowModel<double> model(c, 1);
    std::mt19937_64 rng(2);
    auto p = verify::random_problem<double>(c, 1, 4, rng);
    p.hrms = Tensor<double>(p.hrms.shape());
    const double d = static_cast<double>(p.hrms.numel());
    EXPECT_NEAR(nll_loss(model, Batch<double>{p.hrms, p.lrms, p.pan}), 0.5 * d * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(NllLoss, DuplicatedBatchEqualsSingle) {
    ModelConfig c = verify::tiny_config(false, 2);
    PanFlowModel<double> model(c, 1);
    randomize_parameters(model, 3, 0.1);
    std::mt19937_64 rng(3);
    const auto p = verify::random_problem<double>(c, 1, 4, rng);
    auto twice = [](const Tensor<double>& t) {
        Shape s = t.shape();
        s[0] = 2;
        Tensor<double> out(s);
        std::copy(t.data(), t.data() + t.numel(), out.data());
        std::copy(t.data(), t.data() + t.numel(), out.data() + t.numel());
        return out;
    };
    const double one = nll_loss(model, Batch<double>{p.hrms, p.lrms, p.pan});
    const double two = nll_loss(model, Batch<double>{twice(p.hrms), twice(p.lrms), twice(p.pan)});
    EXPECT_NEAR(one, two, 1e-12 * std::abs(one));
}

TEST(NllLoss, IdentityInitMatchesClosedForm) {
    for (bool share : {true, false}) {
        const auto r = verify::identity_init(verify::invertibility_config(share));
        EXPECT_TRUE(r.pass) << r.note;
    }
}

TEST(NllLoss, GradientMatchesFiniteDifferences) {
    const auto r = verify::nll_gradient(verify::tiny_config(true, 2), 1e-4);
    EXPECT_TRUE(r.pass) << r.measured << " " << r.note;
}

TEST(L1Loss, IdentityModelGivesMeanAbs) {
    ModelConfig c = verify::tiny_config(true, 3);
    PanFlowModel<double> model(c, 1);
    std::mt19937_64 rng(5);
    const auto p = verify::random_problem<double>(c, 2, 4, rng);
    double mean_abs = 0.0;
    for (double v : p.hrms.values()) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(p.hrms.numel());
    EXPECT_NEAR(l1_pretrain_loss(model, Batch<double>{p.hrms, p.lrms, p.pan}), mean_abs, 1e-15);
}

TEST(L1Loss, MatchesOracleAndVanishesOnExactReconstruction) {
    ModelConfig c = verify::tiny_config(false, 2);
    PanFlowModel<double> model(c, 1);
    randomize_parameters(model, 8, 0.1);
    std::mt19937_64 rng(6);
    const auto p = verify::random_problem<double>(c, 2, 4, rng);
    const auto recon = model.inverse(Tensor<double>(p.hrms.shape()), p.lrms, p.pan);
    double oracle = 0.0;
    for (std::size_t i = 0; i < recon.numel(); ++i) oracle += std::abs(recon[i] - p.hrms[i]);
    oracle /= static_cast<double>(recon.numel());
    EXPECT_NEAR(l1_pretrain_loss(model, Batch<double>{p.hrms, p.lrms, p.pan}), oracle, 1e-14);
    EXPECT_EQ(l1_pretrain_loss(model, Batch<double>{recon, p.lrms, p.pan}), 0.0);
}

TEST(BitsPerDim, Conversion) {
    EXPECT_DOUBLE_EQ(nats_to_bits_per_dim(std::numbers::ln2 * 10.0, 10), 1.0);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
    auto cfg = tiny_train_config();
    cfg.pretrain_epochs = 0;
    cfg.nll_epochs = 0;
    PanFlowModel<double> model(cfg.model, 2);
    const auto before = detail::snapshot(model);
    EXPECT_TRUE(train(model, tiny_dataset(), cfg).empty());
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(model.params()[i].value, before[i]);
}

TEST(Train, DeterministicReplayAndReports) {
    const auto cfg = tiny_train_config();
    const auto data = tiny_dataset();
    PanFlowModel<double> a(cfg.model, 2), b(cfg.model, 2);
    std::ostringstream csv;
    TrainHooks hooks;
    hooks.csv = &csv;
    const auto ra = train(a, data, cfg, hooks);
    const auto rb = train(b, data, cfg);
    ASSERT_EQ(ra.size(), 4u);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        EXPECT_TRUE(ra[i].same_losses(rb[i]));
        EXPECT_EQ(ra[i].epoch, static_cast<int>(i));
        EXPECT_EQ(std::isnan(ra[i].mean_l1), i >= 2);
        EXPECT_EQ(std::isnan(ra[i].mean_nll_bits_per_dim), i < 2);
    }
    for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    std::size_t lines = 0;
    for (char ch : csv.str()) lines += ch == '\n';
    EXPECT_EQ(lines, 4u);
}

TEST(Train, L1StageReducesReconstructionError) {
    auto cfg = tiny_train_config();
    cfg.pretrain_epochs = 15;
    cfg.nll_epochs = 0;
    cfg.lr0 = 3e-3;
    cfg.lr_decay_every = 1000;
    const auto data = tiny_dataset(6);
    PanFlowModel<double> model(cfg.model, 2);
    const auto r = train(model, data, cfg);
    EXPECT_LT(r.back().mean_l1, 0.7 * r.front().mean_l1);
}

TEST(Train, NllStageReducesBitsPerDim) {
    auto cfg = tiny_train_config();
    cfg.pretrain_epochs = 0;
    cfg.nll_epochs = 10;
    cfg.lr0 = 3e-3;
    const auto data = tiny_dataset(6);
    PanFlowModel<double> model(cfg.model, 2);
    const double before = mean_bits_per_dim(model, data);
    train(model, data, cfg);
    EXPECT_LT(mean_bits_per_dim(model, data), before - 0.05);
}

TEST(Train, RejectsBadInputs) {
    auto cfg = tiny_train_config();
    PanFlowModel<double> model(cfg.model, 2);
    EXPECT_THROW(train(model, {}, cfg), ConfigError);
    auto other = cfg;
    other.model.blocks = 3;
    EXPECT_THROW(train(model, tiny_dataset(), other), ConfigError);
    auto data = tiny_dataset(2);
    SyntheticSceneConfig s;
    s.bands = 2;
    s.size = 4;
    data.push_back(synthesize_triples(1, s, 2, "small").front());
    EXPECT_THROW(train(model, data, cfg), ShapeError);
}

TEST(Train, NonFiniteLossAbortsAndKeepsLastGoodParameters) {
    auto cfg = tiny_train_config();
    cfg.pretrain_epochs = 1;
    cfg.nll_epochs = 0;
    auto data = tiny_dataset(3);
    data[1].hrms.data[0] = std::numeric_limits<float>::infinity();
    PanFlowModel<double> model(cfg.model, 2);
    const auto before = detail::snapshot(model);
    try {
        train(model, data, cfg);
        FAIL() << "expected TrainingAborted";
    } catch (const TrainingAborted& e) {
        EXPECT_NE(std::string(e.what()).find(data[1].id), std::string::npos) << e.what();
    }
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(model.params()[i].value, before[i]);
}

TEST(TrainConfig, ParsesKeyValueText) {
    std::istringstream in("# desk run\nlr0 = 1e-3\nbatch_size=2 \nblocks = 2 # fewer\nshare_params = false\ndtype = float64\n");
    const auto c = parse_train_config(in);
    EXPECT_DOUBLE_EQ(c.lr0, 1e-3);
    EXPECT_EQ(c.batch_size, 2);
    EXPECT_EQ(c.model.blocks, 2);
    EXPECT_FALSE(c.model.share_params);
    EXPECT_EQ(c.dtype, "float64");
    std::istringstream again(format_config(c));
    const auto d = parse_train_config(again);
    EXPECT_EQ(format_config(d), format_config(c));
}

TEST(TrainConfig, RejectsInvalidValues) {
    auto parse = [](const std::string& text) {
        std::istringstream in(text);
        return parse_train_config(in);
    };
    EXPECT_THROW(parse("learning_rate = 1\n"), ConfigError);
    EXPECT_THROW(parse("lr0 = abc\n"), ConfigError);
    EXPECT_THROW(parse("lr0 = -1\n"), ConfigError);
    EXPECT_THROW(parse("lr_decay_factor = 1.5\n"), ConfigError);
    EXPECT_THROW(parse("bands = 3\n"), ConfigError);
    EXPECT_THROW(parse("dtype = float16\n"), ConfigError);
    EXPECT_THROW(parse("no equals sign\n"), ConfigError);
}
