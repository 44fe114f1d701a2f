#include "propagate/dynamics.hpp"

#include "propagate/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>

namespace propagate::dynamics {

namespace {

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void require_finite_state(double M, double t)
{
    if (!std::isfinite(M)) {
        throw EvaluationError(fmt::format("non-finite state {} at t={}", M, t));
    }
}

void require_finite_output(double out, double t)
{
    if (!std::isfinite(out)) {
        throw EvaluationError(fmt::format("non-finite network output at t={}", t));
    }
}

struct Positive {
    double alpha0, beta, kappa, K, p_decay;
};

Positive positive(const MechanisticParams& p)
{
    return {std::abs(p.alpha0), std::abs(p.beta), std::abs(p.kappa), std::abs(p.K),
            std::abs(p.p_decay)};
}

// alpha(t) M (1 - M/K) - beta M^2, the part shared by the ODE and the UDE.
double logistic_minus_suppression(double M, double t, const MechanisticParams& params)
{
    const auto p = positive(params);
    const double at = p.alpha0 * std::exp(-p.p_decay * t / params.t_max);
    return at * M * (1.0 - M / p.K) - p.beta * M * M;
}

// Pullback of logistic_minus_suppression; returns bar * d/dM.
double logistic_minus_suppression_pullback(double M, double t, const MechanisticParams& params,
                                           double bar, MechanisticGrad& g)
{
    const auto p = positive(params);
    const double decay = std::exp(-p.p_decay * t / params.t_max);
    const double at = p.alpha0 * decay;
    const double logistic = M * (1.0 - M / p.K);

    g.alpha0 += bar * sign_of(params.alpha0) * decay * logistic;
    g.p_decay += bar * sign_of(params.p_decay) * at * logistic * (-t / params.t_max);
    g.K += bar * sign_of(params.K) * at * M * M / (p.K * p.K);
    g.beta += bar * sign_of(params.beta) * (-M * M);
    return bar * (at * (1.0 - 2.0 * M / p.K) - 2.0 * p.beta * M);
}

double clamp_state(double M, const RhsContext& ctx)
{
    return std::clamp(M, 0.0, kStateClampFactor * ctx.max_eta);
}

bool state_interior(double M, const RhsContext& ctx)
{
    return M > 0.0 && M < kStateClampFactor * ctx.max_eta;
}

bool output_interior(double out)
{
    return out > -kNeuralOutputBound && out < kNeuralOutputBound;
}

void require_params(std::span<const double> params, const nn::Mlp& net)
{
    if (params.size() != net.param_count()) {
        throw ShapeError(fmt::format("network expects {} parameters, context has {}",
                                     net.param_count(), params.size()));
    }
}

} // namespace

std::string_view to_string(ModelKind kind)
{
    switch (kind) {
    case ModelKind::ode: return "ode";
    case ModelKind::ode_no_feedback: return "ode_no_feedback";
    case ModelKind::ude: return "ude";
    case ModelKind::node: return "node";
    }
    return "unknown";
}

ModelKind parse_model_kind(std::string_view name)
{
    for (auto k : {ModelKind::ode, ModelKind::ode_no_feedback, ModelKind::ude, ModelKind::node}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw InputError(fmt::format("unknown model '{}'", name));
}

bool is_neural(ModelKind kind) { return kind == ModelKind::ude || kind == ModelKind::node; }

MechanisticParams published_params(double t_max)
{
    MechanisticParams p;
    p.t_max = t_max;
    return p;
}

RhsContext make_context(const ingest::IntensitySeries& series, MechanisticParams params)
{
    series.validate();
    RhsContext ctx;
    ctx.eta = std::make_shared<const ingest::Interpolant>(ingest::make_interpolant(series));
    ctx.max_eta = *std::max_element(series.smoothed.begin(), series.smoothed.end());
    if (!(ctx.max_eta > 0.0)) {
        throw ShapeError("smoothed signal is identically zero");
    }
    ctx.t_data_max = series.t_max();
    ctx.params = params;
    return ctx;
}

const nn::Mlp& ude_network()
{
    static const nn::Mlp net(nn::ude_spec());
    return net;
}

const nn::Mlp& node_network()
{
    static const nn::Mlp net(nn::node_spec());
    return net;
}

double alpha_at(const MechanisticParams& params, double t)
{
    return std::abs(params.alpha0) * std::exp(-std::abs(params.p_decay) * t / params.t_max);
}

double rhs_ode(double M, double t, const RhsContext& ctx)
{
    require_finite_state(M, t);
    const double m = std::max(M, 0.0);
    const double kappa = std::abs(ctx.params.kappa);
    return logistic_minus_suppression(m, t, ctx.params) + (*ctx.eta)(t) +
           kappa * m * std::log1p(m);
}

double ude_feedback(std::span<const double> nn_params, double m)
{
    const double out = ude_network().forward1(nn_params, std::span<const double>(&m, 1));
    if (!std::isfinite(out)) {
        throw EvaluationError("non-finite feedback network output");
    }
    return std::clamp(out, -kNeuralOutputBound, kNeuralOutputBound);
}

double rhs_ude(double M, double t, const RhsContext& ctx)
{
    require_finite_state(M, t);
    const auto& net = ude_network();
    require_params(ctx.nn_params, net);
    const double mc = clamp_state(M, ctx);
    const double m = mc / ctx.max_eta;
    const double out = net.forward1(ctx.nn_params, std::span<const double>(&m, 1));
    require_finite_output(out, t);
    return logistic_minus_suppression(mc, t, ctx.params) + (*ctx.eta)(t) +
           std::clamp(out, -kNeuralOutputBound, kNeuralOutputBound);
}

double rhs_node(double M, double t, const RhsContext& ctx)
{
    require_finite_state(M, t);
    const auto& net = node_network();
    require_params(ctx.nn_params, net);
    const std::array<double, 2> input{clamp_state(M, ctx) / ctx.max_eta, t / ctx.t_data_max};
    const double out = net.forward1(ctx.nn_params, input);
    require_finite_output(out, t);
    return std::clamp(out, -kNeuralOutputBound, kNeuralOutputBound);
}

double rhs(ModelKind kind, double M, double t, const RhsContext& ctx)
{
    switch (kind) {
    case ModelKind::ode:
    case ModelKind::ode_no_feedback: return rhs_ode(M, t, ctx);
    case ModelKind::ude: return rhs_ude(M, t, ctx);
    case ModelKind::node: return rhs_node(M, t, ctx);
    }
    return 0.0;
}

double rhs_ode_pullback(double M, double t, const RhsContext& ctx, double bar, MechanisticGrad& dparams)
{
    require_finite_state(M, t);
    const double m = std::max(M, 0.0);
    const double kappa = std::abs(ctx.params.kappa);
    const double log_term = std::log1p(m);
    double dm = logistic_minus_suppression_pullback(m, t, ctx.params, bar, dparams);
    dm += bar * kappa * (log_term + m / (1.0 + m));
    dparams.kappa += bar * sign_of(ctx.params.kappa) * m * log_term;
    return M > 0.0 ? dm : 0.0;
}

double rhs_ude_pullback(double M, double t, const RhsContext& ctx, double bar,
                        MechanisticGrad& dparams, std::span<double> dnn)
{
    require_finite_state(M, t);
    const auto& net = ude_network();
    require_params(ctx.nn_params, net);
    const double mc = clamp_state(M, ctx);
    const double m = mc / ctx.max_eta;
    const std::span<const double> input(&m, 1);

    double dmc = logistic_minus_suppression_pullback(mc, t, ctx.params, bar, dparams);
    const double out = net.forward1(ctx.nn_params, input);
    require_finite_output(out, t);
    if (output_interior(out)) {
        double dm_norm = 0.0;
        net.backward(ctx.nn_params, input, std::span<const double>(&bar, 1), dnn,
                     std::span<double>(&dm_norm, 1));
        dmc += dm_norm / ctx.max_eta;
    }
    return state_interior(M, ctx) ? dmc : 0.0;
}

double rhs_node_pullback(double M, double t, const RhsContext& ctx, double bar, std::span<double> dnn)
{
    require_finite_state(M, t);
    const auto& net = node_network();
    require_params(ctx.nn_params, net);
    const std::array<double, 2> input{clamp_state(M, ctx) / ctx.max_eta, t / ctx.t_data_max};
    const double out = net.forward1(ctx.nn_params, input);
    require_finite_output(out, t);
    if (!output_interior(out)) {
        return 0.0;
    }
    std::array<double, 2> din{};
    net.backward(ctx.nn_params, input, std::span<const double>(&bar, 1), dnn, din);
    return state_interior(M, ctx) ? din[0] / ctx.max_eta : 0.0;
}

} // namespace propagate::dynamics
