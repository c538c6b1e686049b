#include <gtest/gtest.h>

#include "cvnn/data.hpp"
#include "cvnn/model.hpp"
#include "cvnn/train.hpp"

using namespace cvnn;

namespace {

class LinearNet : public Network<double> {
public:
    LinearNet(std::size_t in, std::size_t out, std::uint64_t seed)
        : dense_("dense", in, out, policy(seed)) {}

    Var<double> forward(Tape<double>& tape, const Tensor<double>& x, bool) override {
        return dense_.forward(tape, tape.constant(x));
    }
    void collect_parameters(std::vector<Parameter<double>*>& out) override { dense_.collect(out); }
    void collect_buffers(std::vector<Buffer<double>*>&) override {}
    std::vector<LayerCost> flops(const Shape&) const override {
        return {{"dense", dense_.real_multiplies()}};
    }
    Dense<double>& dense() { return dense_; }

private:
    static InitPolicy policy(std::uint64_t seed) {
        InitPolicy p;
        p.root_seed = seed;
        return p;
    }
    Dense<double> dense_;
};

Dataset<double> two_clusters(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset<double> d;
    d.x = Tensor<double>(Shape{n, 2});
    for (std::size_t k = 0; k < n; ++k) {
        const int y = int(k % 2);
        d.labels.push_back(y);
        d.x[2 * k] = (y ? 2.0 : -2.0) + 0.5 * rng.normal();
        d.x[2 * k + 1] = 0.5 * rng.normal();
    }
    return d;
}

std::vector<double> flat(Network<double>& net) {
    std::vector<double> v;
    for (auto* p : net.parameters()) {
        v.insert(v.end(), p->re.vec().begin(), p->re.vec().end());
        if (p->is_complex) v.insert(v.end(), p->im.vec().begin(), p->im.vec().end());
    }
    return v;
}

}  // namespace

TEST(Schedule, PiecewiseConstantDefault) {
    const LrSchedule s;
    EXPECT_DOUBLE_EQ(s.at(0), 0.01);
    EXPECT_DOUBLE_EQ(s.at(5), 0.01);
    EXPECT_DOUBLE_EQ(s.at(10), 0.1);
    EXPECT_DOUBLE_EQ(s.at(119), 0.1);
    EXPECT_DOUBLE_EQ(s.at(130), 0.01);
    EXPECT_DOUBLE_EQ(s.at(160), 0.001);
    EXPECT_DOUBLE_EQ(s.at(1000), 0.001);
}

TEST(Schedule, ParseRoundTripAndErrors) {
    const LrSchedule s = LrSchedule::parse("0:0.5,3:0.25");
    EXPECT_DOUBLE_EQ(s.at(2), 0.5);
    EXPECT_DOUBLE_EQ(s.at(3), 0.25);
    EXPECT_EQ(LrSchedule::parse(LrSchedule().str()).points(), LrSchedule().points());
    EXPECT_THROW(LrSchedule::parse("1:0.1"), std::invalid_argument);
    EXPECT_THROW(LrSchedule::parse("0:0.1,0:0.2"), std::invalid_argument);
    EXPECT_THROW(LrSchedule::parse("0=0.1"), std::invalid_argument);
    EXPECT_THROW(LrSchedule::parse("0:-1"), std::invalid_argument);
}

TEST(Nesterov, TwoStepsByHand) {
    Parameter<double> p("p", Tensor<double>(Shape{1}));
    Optimizer<double> opt(OptimizerKind::sgd_nesterov, 0.9);
    std::vector<Parameter<double>*> ps{&p};
    p.grad_re[0] = 1;
    sgd_nesterov_step<double>(ps, opt, 0.1);
    EXPECT_NEAR(p.re[0], -0.19, 1e-15);
    sgd_nesterov_step<double>(ps, opt, 0.1);
    EXPECT_NEAR(p.re[0], -0.461, 1e-15);
    // Zero gradient coasts on momentum: v = 0.9 * -0.19.
    p.grad_re[0] = 0;
    sgd_nesterov_step<double>(ps, opt, 0.1);
    EXPECT_NEAR(p.re[0], -0.461 + 0.9 * 0.9 * -0.19, 1e-15);
}

TEST(Nesterov, ZeroMomentumIsPlainSgd) {
    Parameter<double> z("z", ComplexTensor<double>(Tensor<double>(Shape{2}, {1.0, 2.0}),
                                                   Tensor<double>(Shape{2}, {3.0, 4.0})));
    z.grad_re = Tensor<double>(Shape{2}, {0.5, -1.0});
    z.grad_im = Tensor<double>(Shape{2}, {2.0, 0.0});
    Optimizer<double> opt(OptimizerKind::sgd_nesterov, 0.0);
    std::vector<Parameter<double>*> ps{&z};
    opt.step(ps, 0.1);
    EXPECT_DOUBLE_EQ(z.re[0], 0.95);
    EXPECT_DOUBLE_EQ(z.re[1], 2.1);
    EXPECT_DOUBLE_EQ(z.im[0], 2.8);
    EXPECT_DOUBLE_EQ(z.im[1], 4.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Parameter<double> p("p", Tensor<double>(Shape{3}, {0.0, 0.0, 5.0}));
    p.grad_re = Tensor<double>(Shape{3}, {0.3, -200.0, 0.0});
    Optimizer<double> opt(OptimizerKind::adam);
    std::vector<Parameter<double>*> ps{&p};
    adam_step<double>(ps, opt, 0.01);
    EXPECT_NEAR(p.re[0], -0.01, 1e-9);
    EXPECT_NEAR(p.re[1], 0.01, 1e-9);
    EXPECT_EQ(p.re[2], 5.0);
    EXPECT_THROW(sgd_nesterov_step<double>(ps, opt, 0.01), std::logic_error);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    Parameter<double> p("p", Tensor<double>(Shape{2}, {1.0, -1.0}));
    Optimizer<double> opt(OptimizerKind::adam);
    std::vector<Parameter<double>*> ps{&p};
    for (int k = 0; k < 5; ++k) opt.step(ps, 0.1);
    EXPECT_EQ(p.re[0], 1.0);
    EXPECT_EQ(p.re[1], -1.0);
}

TEST(Optimizer, NonFiniteGradientRejectedBeforeMutation) {
    Parameter<double> a("a", Tensor<double>(Shape{1}, 1.0)), b("b", Tensor<double>(Shape{1}, 2.0));
    a.grad_re[0] = 1;
    b.grad_re[0] = std::nan("");
    Optimizer<double> opt(OptimizerKind::sgd_nesterov);
    std::vector<Parameter<double>*> ps{&a, &b};
    try {
        opt.step(ps, 0.1);
        FAIL();
    } catch (const NanGuardError& e) {
        EXPECT_EQ(e.where(), "b");
    }
    EXPECT_EQ(a.re[0], 1.0);
    EXPECT_EQ(opt.steps(), 0u);
}

TEST(Losses, StandardValues) {
    EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{2, 5}, 0.3), {1, 4}), std::log(5.0), 1e-14);
    EXPECT_LT(cross_entropy(Tensor<double>(Shape{1, 3}, {-50.0, 50.0, -50.0}), {1}), 1e-40);
    EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{1, 2}, {1000.0, 0.0}), {1}), 1000.0, 1e-9);
    EXPECT_THROW(cross_entropy(Tensor<double>(Shape{1, 3}), {3}), std::exception);
    EXPECT_NEAR(bce_multilabel(Tensor<double>(Shape{2, 2}), Tensor<double>(Shape{2, 2}, 1.0)),
                std::log(2.0), 1e-14);
    const Tensor<double> x(Shape{2, 2}, {1.0, 2.0, 3.0, 4.0});
    EXPECT_EQ(mse(x, x), 0.0);
    EXPECT_DOUBLE_EQ(mse(x, Tensor<double>(Shape{2, 2})), 7.5);
}

TEST(AveragePrecision, HandCases) {
    EXPECT_DOUBLE_EQ(average_precision({0.9, 0.1}, {1, 0}), 1.0);
    EXPECT_DOUBLE_EQ(average_precision({0.1, 0.9}, {1, 0}), 0.5);
    EXPECT_DOUBLE_EQ(average_precision({0.3, 0.2, 0.7}, {1, 1, 1}), 1.0);
    // Ties keep input order: the negative listed first ranks first.
    EXPECT_DOUBLE_EQ(average_precision({0.5, 0.5}, {0, 1}), 0.5);
    EXPECT_THROW(average_precision({0.5, 0.2}, {0, 0}), std::invalid_argument);
    EXPECT_THROW(average_precision({0.5}, {0, 1}), std::invalid_argument);
}

TEST(AveragePrecision, BoundedAndMonotoneInvariant) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> s(30), e(30);
        std::vector<int> l(30);
        for (int i = 0; i < 30; ++i) {
            s[i] = rng.normal();
            e[i] = std::exp(3 * s[i]) - 7;
            l[i] = rng.uniform() < 0.3;
        }
        l[0] = 1;
        const double ap = average_precision(s, l);
        EXPECT_GE(ap, 0.0);
        EXPECT_LE(ap, 1.0);
        EXPECT_DOUBLE_EQ(ap, average_precision(e, l));
    }
}

TEST(Flops, EmptyAndDense) {
    EXPECT_EQ(total_multiplies({}), 0u);
    LinearNet net(7, 3, 1);
    EXPECT_EQ(total_multiplies(model_flops<double>(net, Shape{1, 7})), 21u);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
    LinearNet net(2, 2, 2);
    const auto before = flat(net);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.schedule = LrSchedule::constant(0.0);
    Trainer<double> tr(net, cfg);
    const auto data = two_clusters(40, 3);
    const auto hist = tr.run(data, data);
    EXPECT_EQ(hist.size(), 1u);
    EXPECT_EQ(flat(net), before);
}

TEST(Trainer, ClipsBeforeEveryStep) {
    LinearNet net(2, 2, 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.schedule = LrSchedule::constant(0.5);
    Trainer<double> tr(net, cfg);
    auto params = net.parameters();
    for (auto* p : params) p->re.vec()[0] = 30;  // large scores give large gradients
    std::vector<std::string> events;
    double worst = 0;
    tr.set_trace([&](const char* ev) {
        events.emplace_back(ev);
        if (events.back() == "step") worst = std::max(worst, gradient_norm<double>(params));
    });
    const auto data = two_clusters(32, 4);
    tr.run(data, data);
    ASSERT_EQ(events.size() % 4, 0u);
    for (std::size_t i = 0; i < events.size(); i += 4) {
        EXPECT_EQ(events[i], "forward");
        EXPECT_EQ(events[i + 1], "backward");
        EXPECT_EQ(events[i + 2], "clip");
        EXPECT_EQ(events[i + 3], "step");
    }
    EXPECT_LE(worst, 1.0 + 1e-12);
}

TEST(Trainer, FirstStepDescendsAtSmallLearningRate) {
    ModelSpec s;
    s.variant = "custom";
    s.start_filters = 2;
    s.blocks_per_stage = 1;
    s.in_channels = 1;
    s.image_size = 8;
    s.n_classes = 2;
    auto net = build_model<double>(s, 5);
    GratingParams gp;
    gp.size = 8;
    const auto data = synthetic_image_task<double>(16, 6, gp);
    Batch<double> b = data.gather(std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
    auto loss_of = [&] {
        Tape<double> t;
        return net->loss(t, net->forward(t, b.x, true), b).value()[0];
    };
    Tape<double> t;
    Var<double> l = net->loss(t, net->forward(t, b.x, true), b);
    const double before = l.value()[0];
    t.backward(l);
    auto params = net->parameters();
    Optimizer<double> opt(OptimizerKind::sgd_nesterov);
    opt.step(params, 1e-4);
    EXPECT_LT(loss_of(), before);
}

TEST(Trainer, SeparableToySetReachesFullAccuracy) {
    LinearNet net(2, 2, 7);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.batch_size = 16;
    cfg.schedule = LrSchedule::constant(0.1);
    cfg.seed = 8;
    Trainer<double> tr(net, cfg);
    const auto data = two_clusters(200, 9);
    tr.run(data, data);
    EXPECT_GE(evaluate<double>(net, data, 64).metric, 0.99);
}

TEST(Trainer, ReproducibleGivenSeed) {
    auto go = [] {
        LinearNet net(2, 2, 10);
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.batch_size = 8;
        cfg.seed = 11;
        Trainer<double> tr(net, cfg);
        const auto data = two_clusters(40, 12);
        std::vector<double> trail;
        for (const auto& r : tr.run(data, data)) trail.push_back(r.train_loss);
        const auto w = flat(net);
        trail.insert(trail.end(), w.begin(), w.end());
        return trail;
    };
    EXPECT_EQ(go(), go());
}

TEST(Trainer, EarlyStoppingHonorsPatience) {
    LinearNet net(2, 2, 13);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.patience = 2;
    cfg.schedule = LrSchedule::constant(0.0);
    Trainer<double> tr(net, cfg);
    const auto data = two_clusters(20, 14);
    EXPECT_EQ(tr.run(data, data).size(), 3u);
    EXPECT_TRUE(tr.stopped());
}

TEST(Trainer, NanGuardRecordsRowAndRethrows) {
    LinearNet net(2, 2, 15);
    net.dense().weight().re[0] = std::nan("");
    TrainConfig cfg;
    cfg.epochs = 3;
    Trainer<double> tr(net, cfg);
    const auto data = two_clusters(20, 16);
    std::vector<EpochRecord> seen;
    EXPECT_THROW(tr.run(data, data, [&](const EpochRecord& r, bool) { seen.push_back(r); }),
                 NanGuardError);
    ASSERT_EQ(seen.size(), 1u);
    EXPECT_EQ(seen[0].status, "nan_guard:loss");
}

TEST(Trainer, NaiveNormalizationStressFlagsCondition) {
    // The stream keeps feeding eccentric activations through stacked naive standardizations.
    constexpr double kConditionLimit = 100.0;
    bool flagged = false;
    try {
        const auto c = ellipticity_harness(1000, 20, StandardizeMode::naive, 17);
        flagged = !std::isfinite(c.back()) || c.back() > kConditionLimit;
    } catch (const NanGuardError&) {
        flagged = true;
    }
    EXPECT_TRUE(flagged);
    const auto full = ellipticity_harness(1000, 20, StandardizeMode::full, 17);
    EXPECT_LT(full.back(), kConditionLimit);
}
