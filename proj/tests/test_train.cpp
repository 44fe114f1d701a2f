#include "propagate/error.hpp"
#include "propagate/train.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

using namespace propagate;
using namespace propagate::train;
using dynamics::ModelKind;

namespace {

TrainConfig quick()
{
    TrainConfig cfg;
    cfg.adam_iters = 40;
    cfg.lbfgs_iters = 30;
    return cfg;
}

const ModelKind kAll[] = {ModelKind::ode, ModelKind::ode_no_feedback, ModelKind::ude, ModelKind::node};

} // namespace

TEST(Coordinates, RoundTrip)
{
    for (auto kind : kAll) {
        auto p = initial_params(kind, 2.0, 4);
        p.mech.alpha0 = 0.3;
        p.mech.K = 5e4;
        const auto x = encode(p);
        const auto q = decode(kind, x, 2.0);
        EXPECT_EQ(q.nn, p.nn);
        if (kind == ModelKind::node) {
            continue; // no mechanistic coordinates
        }
        EXPECT_NEAR(q.mech.alpha0, p.mech.alpha0, 1e-15);
        EXPECT_NEAR(q.mech.K, p.mech.K, 1e-9);
        EXPECT_EQ(q.mech.kappa, p.mech.kappa);
        EXPECT_EQ(q.nn, p.nn);
    }
    EXPECT_EQ(encode(initial_params(ModelKind::ode, 1, 0)).size(), 5u);
    EXPECT_EQ(encode(initial_params(ModelKind::ode_no_feedback, 1, 0)).size(), 4u);
    EXPECT_EQ(encode(initial_params(ModelKind::ude, 1, 0)).size(), 35u);
    EXPECT_EQ(encode(initial_params(ModelKind::node, 1, 0)).size(), 337u);
    EXPECT_THROW(decode(ModelKind::ode, std::vector<double>(4), 1.0), ShapeError);
}

TEST(Problem, InitialStateAndWindow)
{
    const auto& s = testsupport::small();
    const auto p = make_problem(s, 20);
    EXPECT_EQ(p.grid.size(), 20u);
    EXPECT_EQ(p.M0, std::max(s.smoothed[0], 1.0));
    EXPECT_EQ(p.ctx.t_data_max, s.t[19]);
    // forcing is held constant past the window
    EXPECT_EQ((*p.ctx.eta)(s.t_max()), s.smoothed[19]);
    EXPECT_THROW(make_problem(s, 2), ShapeError);
    EXPECT_THROW(make_problem(s, s.size() + 1), ShapeError);
}

TEST(Loss, ConstantTrajectoryClosedForm)
{
    const auto& s = testsupport::small();
    const auto problem = make_problem(s, 0);
    auto p = initial_params(ModelKind::node, s.t_max(), 0);
    std::fill(p.nn.begin(), p.nn.end(), 0.0); // dM/dt = 0
    double want = 0.0;
    for (double y : s.smoothed) {
        want += (problem.M0 - y) * (problem.M0 - y);
    }
    want /= static_cast<double>(s.size());
    EXPECT_NEAR(mse_loss(p, problem), want, 1e-9 * want);
}

TEST(Loss, PublishedConstantsFinite)
{
    const auto& s = testsupport::codered();
    const auto problem = make_problem(s, 0);
    const double l = mse_loss(initial_params(ModelKind::ode, s.t_max(), 0), problem);
    EXPECT_GT(l, 0.0);
    EXPECT_LT(l, kSentinelLoss);
}

TEST(Loss, DivergenceGivesSentinel)
{
    const auto& s = testsupport::small();
    auto problem = make_problem(s, 0);
    auto p = initial_params(ModelKind::ode, s.t_max(), 0);
    p.mech.kappa = 1e300; // feedback overflows
    EXPECT_EQ(mse_loss(p, problem), kSentinelLoss);
    std::vector<double> g(5, 1.0);
    EXPECT_EQ(loss_and_gradient(ModelKind::ode, problem, encode(p), g), kSentinelLoss);
    EXPECT_EQ(g, std::vector<double>(5, 0.0));
}

class Gradient : public ::testing::TestWithParam<ModelKind> {};

TEST_P(Gradient, MatchesCentralDifferences)
{
    const auto kind = GetParam();
    const auto& s = testsupport::small();
    const auto problem = make_problem(s, 0);
    auto x = encode(initial_params(kind, s.t_max(), 6));
    if (!dynamics::is_neural(kind)) {
        x[0] += 0.2; // away from the starting point
    }
    std::vector<double> g(x.size());
    const double f = loss_and_gradient(kind, problem, x, g);
    ASSERT_LT(f, kSentinelLoss);
    EXPECT_DOUBLE_EQ(f, mse_loss(decode(kind, x, problem.ctx.params.t_max), problem));

    std::mt19937_64 gen(2);
    std::vector<double> scratch(x.size());
    const double h = kind == ModelKind::node ? 1e-6 : 1e-5;
    const double tol = kind == ModelKind::node ? 1e-4 : 1e-5;
    for (int k = 0; k < 15; ++k) {
        const auto i = static_cast<std::size_t>(gen() % x.size());
        auto up = x, dn = x;
        up[i] += h;
        dn[i] -= h;
        const double fd = (loss_and_gradient(kind, problem, up, scratch) -
                           loss_and_gradient(kind, problem, dn, scratch)) /
                          (2 * h);
        const double scale = std::max({std::abs(fd), std::abs(g[i]), 1e-3 * f});
        EXPECT_NEAR(g[i], fd, tol * scale) << "coordinate " << i;
    }
}

INSTANTIATE_TEST_SUITE_P(AllModels, Gradient, ::testing::ValuesIn(kAll),
                         [](const auto& info) { return std::string(dynamics::to_string(info.param)); });

TEST(Fit, HybridDescendsAndTracksBest)
{
    const auto& s = testsupport::small();
    const auto cfg = quick();
    const auto r = fit(ModelKind::ude, s, cfg);
    EXPECT_LT(r.final_loss, r.initial_loss);
    double trace_min = r.initial_loss;
    for (const auto& rec : r.loss_trace) {
        trace_min = std::min(trace_min, rec.loss);
    }
    EXPECT_LE(r.final_loss, trace_min);
    EXPECT_DOUBLE_EQ(r.final_loss, mse_loss(r.params, make_problem(s, 0)));
    // phase boundary: Adam iterations first, L-BFGS after
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
        EXPECT_EQ(r.loss_trace[i].iteration, i);
        EXPECT_EQ(r.loss_trace[i].phase, i < cfg.adam_iters ? "adam" : "lbfgs");
    }
    for (std::size_t i = cfg.adam_iters + 1; i < r.loss_trace.size(); ++i) {
        EXPECT_LE(r.loss_trace[i].loss, r.loss_trace[i - 1].loss);
    }
    EXPECT_EQ(r.trajectory.t, s.t);
}

TEST(Fit, NeuralDeterministic)
{
    const auto& s = testsupport::small();
    const auto a = fit(ModelKind::node, s, quick());
    const auto b = fit(ModelKind::node, s, quick());
    EXPECT_EQ(a.params.nn, b.params.nn);
    EXPECT_EQ(a.trajectory.M, b.trajectory.M);
    EXPECT_EQ(a.final_loss, b.final_loss);
    ASSERT_EQ(a.loss_trace.size(), b.loss_trace.size());
    for (std::size_t i = 0; i < a.loss_trace.size(); ++i) {
        EXPECT_EQ(a.loss_trace[i].loss, b.loss_trace[i].loss);
    }
}

TEST(Fit, MechanisticStartsFromPublishedValues)
{
    const auto& s = testsupport::small();
    auto cfg = quick();
    cfg.lbfgs_iters = 0;
    const auto r = fit(ModelKind::ode, s, cfg);
    const auto want = dynamics::published_params(s.t_max());
    // exact up to the exp(log(x)) round trip
    EXPECT_NEAR(r.params.mech.alpha0, want.alpha0, 1e-15 * want.alpha0 * 4);
    EXPECT_NEAR(r.params.mech.beta, want.beta, 1e-15 * want.beta * 4);
    EXPECT_NEAR(r.params.mech.K, want.K, 1e-15 * want.K * 4);
    EXPECT_NEAR(r.params.mech.kappa, want.kappa, 1e-15 * want.kappa * 4);
    EXPECT_NEAR(r.params.mech.p_decay, want.p_decay, 1e-15 * want.p_decay * 4);
    EXPECT_EQ(r.params.mech.t_max, want.t_max);
    EXPECT_EQ(r.initial_loss, r.final_loss);
}

TEST(Fit, AllDivergingRaises)
{
    auto s = testsupport::small();
    for (auto& v : s.smoothed) {
        v = 1e200;
    }
    try {
        fit(ModelKind::ode, s, quick());
        FAIL() << "expected FitFailure";
    } catch (const FitFailure& e) {
        EXPECT_TRUE(std::all_of(e.trace().begin(), e.trace().end(),
                                [](const LossRecord& r) { return r.loss == kSentinelLoss; }));
    }
}

TEST(Checkpoint, MechanisticHasFiveNamedConstants)
{
    const auto& s = testsupport::small();
    auto cfg = quick();
    cfg.lbfgs_iters = 3;
    const auto r = fit(ModelKind::ode, s, cfg);
    std::stringstream buf;
    write_checkpoint(buf, r, 0);
    const std::string text = buf.str();
    std::size_t consts = 0;
    for (std::size_t pos = 0; (pos = text.find("\nconst ", pos)) != std::string::npos; ++pos) {
        ++consts;
    }
    EXPECT_EQ(consts, 5u);
    const auto back = read_checkpoint(buf);
    EXPECT_EQ(back.params.kind, ModelKind::ode);
    EXPECT_EQ(back.params.mech, r.params.mech);
    EXPECT_EQ(back.max_eta, r.max_eta);
}

TEST(Checkpoint, NeuralRoundTrip)
{
    const auto& s = testsupport::small();
    auto cfg = quick();
    cfg.adam_iters = 3;
    cfg.lbfgs_iters = 2;
    for (auto kind : {ModelKind::ude, ModelKind::node}) {
        cfg.seed = 12;
        const auto r = fit(kind, s, cfg);
        std::stringstream buf;
        write_checkpoint(buf, r, 12);
        const auto back = read_checkpoint(buf);
        EXPECT_EQ(back.params.kind, kind);
        EXPECT_EQ(back.params.nn, r.params.nn);
        EXPECT_EQ(back.params.nn.size(), kind == ModelKind::node ? 337u : 31u);
        EXPECT_EQ(back.params.mech, r.params.mech);
        EXPECT_EQ(back.seed, 12u);
        EXPECT_EQ(back.t_data_max, r.t_data_max);
    }
}

TEST(Checkpoint, Rejects)
{
    std::istringstream none("# nothing\n");
    EXPECT_THROW(read_checkpoint(none), InputError);
    std::istringstream missing("model ode\nconst alpha0 1\nnorm max_eta 1\nnorm t_data_max 1\nnorm t_max 1\n");
    EXPECT_THROW(read_checkpoint(missing), InputError);
    std::istringstream wrong_shape("model ude\nconst alpha0 1\nconst beta 1\nconst K 1\nconst p_decay 1\n"
                                   "norm max_eta 1\nnorm t_data_max 1\nnorm t_max 1\nwidths 1 3 1\nseed 0\n"
                                   "0\n0\n0\n0\n0\n0\n0\n0\n0\n0\n");
    EXPECT_THROW(read_checkpoint(wrong_shape), ArtifactError);
}

TEST(Csv, Writers)
{
    FitResult r;
    r.loss_trace = {{0, "adam", 2.5}, {1, "lbfgs", 1.25}};
    r.trajectory.t = {0.5, 1.0};
    r.trajectory.M = {3.0, 4.5};
    std::ostringstream a, b;
    write_loss_trace_csv(a, r);
    write_trajectory_csv(b, r.trajectory);
    EXPECT_EQ(a.str(), "iteration,phase,loss\n0,adam,2.5\n1,lbfgs,1.25\n");
    EXPECT_EQ(b.str(), "time_days,M\n0.5,3\n1,4.5\n");
}
