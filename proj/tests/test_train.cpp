#include <gtest/gtest.h>

#include "gdflow/train.hpp"

using namespace gdflow;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 10;
    cfg.K = 3;
    cfg.k = 4;
    cfg.heads = 2;
    cfg.key_dim = 3;
    cfg.integrator.dt = 0.5;
    cfg.integrator.t_end = 1.0;
    return cfg;
}

TrainConfig tiny_train(int64_t iters) {
    TrainConfig t;
    t.iterations = iters;
    t.batch_size = 2;
    t.patch_size = 64;
    t.sigma_lo = t.sigma_hi = 0.02;
    t.val_interval = 5;
    t.seed = 9;
    return t;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    Tensor w({2}, {1.0, -2.0});
    w.set_requires_grad(true);
    AdamState st;
    adam_step({{"w", w}}, st, 1e-3);
    EXPECT_EQ(w.values(), (std::vector<double>{1.0, -2.0}));
    EXPECT_EQ(st.t, 1);
}

TEST(Adam, UnitGradientSingleStep) {
    // one step from zero state with gradient 1: update = -lr / (1 + eps)
    Tensor w = Tensor::scalar(0.0);
    w.set_requires_grad(true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = mul(w, Tensor::scalar(1.0));
        tape.backward(loss);
    }
    AdamState st;
    const double lr = 1e-3;
    adam_step({{"w", w}}, st, lr);
    EXPECT_NEAR(w.item(), -lr / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    Tensor w = Tensor::scalar(0.0);
    w.set_requires_grad(true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = mul(w, Tensor::scalar(std::numeric_limits<double>::infinity()));
        tape.backward(loss);
    }
    AdamState st;
    try {
        adam_step({{"spike", w}}, st, 1e-3);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("spike"), std::string::npos);
    }
}

TEST(Plateau, ImprovingHistoryKeepsRate) {
    TrainConfig t;
    t.lr_init = 1e-3;
    t.plateau_patience = 3;
    EXPECT_DOUBLE_EQ(plateau_lr({1.0, 0.9, 0.8, 0.7, 0.6}, t), 1e-3);
}

TEST(Plateau, FlatHistoryFiresOnce) {
    TrainConfig t;
    t.lr_init = 1e-3;
    t.plateau_factor = 0.5;
    t.plateau_patience = 3;
    // first entry sets best; the next `patience` entries stall, firing once
    EXPECT_DOUBLE_EQ(plateau_lr({1.0, 1.0, 1.0, 1.0}, t), 5e-4);
}

TEST(Plateau, ClampsAtMinimum) {
    TrainConfig t;
    t.lr_init = 1e-3;
    t.lr_min = 1e-6;
    t.plateau_factor = 0.1;
    t.plateau_patience = 1;
    std::vector<double> flat(50, 1.0);
    EXPECT_DOUBLE_EQ(plateau_lr(flat, t), 1e-6);
}

TEST(Train, ZeroIterationsKeepsInitialization) {
    auto cfg = tiny_config();
    auto params = init_params(cfg, 1);
    auto reference = init_params(cfg, 1);
    std::vector<PointCloud> data = {synth(SynthShape::Sphere, 256, 2)};
    std::vector<PointCloud> val = {synth(SynthShape::Sphere, 256, 3)};
    int checkpoints = 0;
    TrainSinks sinks;
    sinks.checkpoint = [&](const ModelParams& p, bool) {
        ++checkpoints;
        auto a = p.named();
        auto b = reference.named();
        for (size_t i = 0; i < a.size(); ++i)
            EXPECT_EQ(a[i].second.values(), b[i].second.values());
    };
    auto res = train(cfg, params, data, val, tiny_train(0), sinks);
    EXPECT_GE(checkpoints, 1);
    EXPECT_EQ(res.iterations, 0);
}

TEST(Train, DeterministicLogsUnderSameSeed) {
    auto run = [] {
        auto cfg = tiny_config();
        auto params = init_params(cfg, 1);
        std::vector<PointCloud> data = {synth(SynthShape::Sphere, 256, 2)};
        std::vector<PointCloud> val = {synth(SynthShape::Torus, 256, 3)};
        std::string log;
        TrainSinks sinks;
        sinks.log_line = [&](const std::string& line) { log += line + "\n"; };
        train(cfg, params, data, val, tiny_train(6), sinks);
        return log;
    };
    const std::string a = run(), b = run();
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b);
}

TEST(Train, BestCheckpointTracksBestValidation) {
    auto cfg = tiny_config();
    auto params = init_params(cfg, 1);
    std::vector<PointCloud> data = {synth(SynthShape::Sphere, 256, 2)};
    std::vector<PointCloud> val = {synth(SynthShape::Sphere, 256, 3)};
    double best_at_checkpoint = -1.0;
    TrainSinks sinks;
    sinks.checkpoint = [&](const ModelParams& p, bool is_best) {
        if (is_best) {
            best_at_checkpoint = detail::validation_cd(
                {{add_noise(val[0], {0.02, 12345}), val[0]}}, p, cfg);
        }
    };
    auto res = train(cfg, params, data, val, tiny_train(10), sinks);
    EXPECT_LE(res.best_val_cd, res.initial_val_cd);
    EXPECT_LE(res.best_val_cd, res.final_val_cd + 1e-12);
    EXPECT_GE(best_at_checkpoint, 0.0);
}

TEST(Train, ShortRunReducesValidationCd) {
    auto cfg = tiny_config();
    auto params = init_params(cfg, 1);
    std::vector<PointCloud> data = {synth(SynthShape::Sphere, 512, 2),
                                    synth(SynthShape::Torus, 512, 4)};
    std::vector<PointCloud> val = {synth(SynthShape::Sphere, 512, 5)};
    auto t = tiny_train(40);
    t.patch_size = 128;
    t.batch_size = 2;
    auto res = train(cfg, params, data, val, t);
    EXPECT_LT(res.final_val_cd, res.initial_val_cd);
}

TEST(Train, EmptyDatasetRejected) {
    auto cfg = tiny_config();
    auto params = init_params(cfg, 1);
    std::vector<PointCloud> val = {synth(SynthShape::Sphere, 256, 3)};
    EXPECT_THROW(train(cfg, params, {}, val, tiny_train(1)), ValueError);
}
