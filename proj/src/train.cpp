#include "propagate/train.hpp"

#include "propagate/error.hpp"
#include "propagate/optim.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <iterator>
#include <map>
#include <ostream>
#include <sstream>
#include <string_view>

namespace propagate::train {

using dynamics::ModelKind;

namespace {

const dynamics::MechanisticParams kReference{};

constexpr std::size_t kMechSlots = 5; // alpha0, beta, kappa, K, p_decay

std::size_t network_size(ModelKind kind)
{
    switch (kind) {
    case ModelKind::ude: return dynamics::ude_network().param_count();
    case ModelKind::node: return dynamics::node_network().param_count();
    default: return 0;
    }
}

std::size_t trainable_size(ModelKind kind)
{
    switch (kind) {
    case ModelKind::ode: return 5;
    case ModelKind::ode_no_feedback: return 4;
    case ModelKind::ude: return network_size(kind) + 4;
    case ModelKind::node: return network_size(kind);
    }
    return 0;
}

// Maps the physical gradient (mechanistic slots then network) onto
// optimizer coordinates at decoded parameters `p`.
void chain_to_trainable(ModelKind kind, const ModelParams& p, std::span<const double> phys,
                        std::span<double> grad)
{
    const double d_alpha = phys[0], d_beta = phys[1], d_kappa = phys[2], d_K = phys[3],
                 d_p = phys[4];
    switch (kind) {
    case ModelKind::ode:
        grad[0] = d_alpha * p.mech.alpha0;
        grad[1] = d_beta * p.mech.beta;
        grad[2] = d_K * p.mech.K;
        grad[3] = d_kappa * kReference.kappa;
        grad[4] = d_p * kReference.p_decay;
        break;
    case ModelKind::ode_no_feedback:
        grad[0] = d_alpha * p.mech.alpha0;
        grad[1] = d_beta * p.mech.beta;
        grad[2] = d_K * p.mech.K;
        grad[3] = d_p * kReference.p_decay;
        break;
    case ModelKind::ude: {
        const auto n = network_size(kind);
        std::copy(phys.begin() + kMechSlots, phys.end(), grad.begin());
        grad[n + 0] = d_alpha * kReference.alpha0;
        grad[n + 1] = d_beta * kReference.beta;
        grad[n + 2] = d_K * kReference.K;
        grad[n + 3] = d_p * kReference.p_decay;
        break;
    }
    case ModelKind::node:
        std::copy(phys.begin() + kMechSlots, phys.end(), grad.begin());
        break;
    }
}

void add_mech(std::span<double> theta_bar, const dynamics::MechanisticGrad& g)
{
    theta_bar[0] += g.alpha0;
    theta_bar[1] += g.beta;
    theta_bar[2] += g.kappa;
    theta_bar[3] += g.K;
    theta_bar[4] += g.p_decay;
}

integrate::RhsFunction rhs_function(ModelKind kind, const dynamics::RhsContext& ctx)
{
    return [kind, &ctx](double M, double t) { return dynamics::rhs(kind, M, t, ctx); };
}

} // namespace

std::vector<double> encode(const ModelParams& p)
{
    switch (p.kind) {
    case ModelKind::ode:
        return {std::log(std::abs(p.mech.alpha0)), std::log(std::abs(p.mech.beta)),
                std::log(std::abs(p.mech.K)), p.mech.kappa / kReference.kappa,
                p.mech.p_decay / kReference.p_decay};
    case ModelKind::ode_no_feedback:
        return {std::log(std::abs(p.mech.alpha0)), std::log(std::abs(p.mech.beta)),
                std::log(std::abs(p.mech.K)), p.mech.p_decay / kReference.p_decay};
    case ModelKind::ude: {
        std::vector<double> x(p.nn);
        x.push_back(p.mech.alpha0 / kReference.alpha0);
        x.push_back(p.mech.beta / kReference.beta);
        x.push_back(p.mech.K / kReference.K);
        x.push_back(p.mech.p_decay / kReference.p_decay);
        return x;
    }
    case ModelKind::node: return p.nn;
    }
    return {};
}

ModelParams decode(ModelKind kind, std::span<const double> x, double t_max)
{
    if (x.size() != trainable_size(kind)) {
        throw ShapeError(fmt::format("model '{}' has {} trainable values, got {}",
                                     dynamics::to_string(kind), trainable_size(kind), x.size()));
    }
    ModelParams p;
    p.kind = kind;
    p.mech = dynamics::published_params(t_max);
    switch (kind) {
    case ModelKind::ode:
        p.mech.alpha0 = std::exp(x[0]);
        p.mech.beta = std::exp(x[1]);
        p.mech.K = std::exp(x[2]);
        p.mech.kappa = x[3] * kReference.kappa;
        p.mech.p_decay = x[4] * kReference.p_decay;
        break;
    case ModelKind::ode_no_feedback:
        p.mech.alpha0 = std::exp(x[0]);
        p.mech.beta = std::exp(x[1]);
        p.mech.K = std::exp(x[2]);
        p.mech.kappa = 0.0;
        p.mech.p_decay = x[3] * kReference.p_decay;
        break;
    case ModelKind::ude: {
        const auto n = network_size(kind);
        p.nn.assign(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n));
        p.mech.alpha0 = x[n + 0] * kReference.alpha0;
        p.mech.beta = x[n + 1] * kReference.beta;
        p.mech.K = x[n + 2] * kReference.K;
        p.mech.p_decay = x[n + 3] * kReference.p_decay;
        p.mech.kappa = 0.0;
        break;
    }
    case ModelKind::node:
        p.nn.assign(x.begin(), x.end());
        p.mech.kappa = 0.0;
        break;
    }
    return p;
}

ModelParams initial_params(ModelKind kind, double t_max, std::uint64_t seed)
{
    ModelParams p;
    p.kind = kind;
    p.mech = dynamics::published_params(t_max);
    if (kind != ModelKind::ode) {
        p.mech.kappa = 0.0;
    }
    if (kind == ModelKind::ude) {
        p.nn = nn::init_params(nn::ude_spec(), seed);
    } else if (kind == ModelKind::node) {
        p.nn = nn::init_params(nn::node_spec(), seed);
    }
    return p;
}

TrainingProblem make_problem(const ingest::IntensitySeries& data, std::size_t train_count,
                             std::size_t substeps_per_interval)
{
    data.validate();
    if (train_count == 0) {
        train_count = data.size();
    }
    if (train_count < 3 || train_count > data.size()) {
        throw ShapeError(fmt::format("training window of {} points is outside [3, {}]", train_count,
                                     data.size()));
    }
    const auto window = data.head(train_count);
    TrainingProblem problem;
    problem.ctx = dynamics::make_context(window, dynamics::published_params(window.t_max()));
    problem.grid = window.t;
    problem.target = window.smoothed;
    problem.M0 = std::max((*problem.ctx.eta)(problem.grid.front()), 1.0);
    problem.solve.substeps_per_interval = substeps_per_interval;
    return problem;
}

dynamics::RhsContext bind(const TrainingProblem& problem, const ModelParams& params)
{
    dynamics::RhsContext ctx = problem.ctx;
    ctx.params = params.mech;
    ctx.params.t_max = problem.ctx.params.t_max;
    ctx.nn_params = params.nn;
    return ctx;
}

double mse_loss(const ModelParams& params, const TrainingProblem& problem)
{
    const auto ctx = bind(problem, params);
    try {
        const auto traj = integrate::solve_fixed(rhs_function(params.kind, ctx), problem.M0,
                                                 problem.grid, problem.solve);
        double sum = 0.0;
        for (std::size_t i = 0; i < traj.M.size(); ++i) {
            const double e = traj.M[i] - problem.target[i];
            sum += e * e;
        }
        const double loss = sum / static_cast<double>(traj.M.size());
        return std::isfinite(loss) ? loss : kSentinelLoss;
    } catch (const SolverError&) {
        return kSentinelLoss;
    } catch (const EvaluationError&) {
        return kSentinelLoss;
    }
}

double loss_and_gradient(ModelKind kind, const TrainingProblem& problem, std::span<const double> x,
                         std::span<double> grad)
{
    if (grad.size() != x.size()) {
        throw ShapeError("gradient buffer size differs from parameter count");
    }
    const auto params = decode(kind, x, problem.ctx.params.t_max);
    const auto ctx = bind(problem, params);
    std::fill(grad.begin(), grad.end(), 0.0);

    try {
        const integrate::FixedStepTape tape(rhs_function(kind, ctx), problem.M0, problem.grid,
                                            problem.solve);
        const auto& M = tape.trajectory().M;
        const auto n = M.size();
        std::vector<double> M_bar(n);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = M[i] - problem.target[i];
            sum += e * e;
            M_bar[i] = 2.0 * e / static_cast<double>(n);
        }
        const double loss = sum / static_cast<double>(n);
        if (!std::isfinite(loss)) {
            return kSentinelLoss;
        }

        std::vector<double> phys(kMechSlots + params.nn.size(), 0.0);
        const std::span<double> nn_bar(phys.data() + kMechSlots, params.nn.size());
        integrate::RhsPullback pullback = [&](double Ms, double t, double bar, std::span<double> theta_bar) {
            dynamics::MechanisticGrad g;
            double dM = 0.0;
            switch (kind) {
            case ModelKind::ode:
            case ModelKind::ode_no_feedback:
                dM = dynamics::rhs_ode_pullback(Ms, t, ctx, bar, g);
                break;
            case ModelKind::ude:
                dM = dynamics::rhs_ude_pullback(Ms, t, ctx, bar, g, nn_bar);
                break;
            case ModelKind::node:
                dM = dynamics::rhs_node_pullback(Ms, t, ctx, bar, nn_bar);
                break;
            }
            add_mech(theta_bar, g);
            return dM;
        };
        tape.adjoint(pullback, M_bar, phys);
        chain_to_trainable(kind, params, phys, grad);
        if (!std::all_of(grad.begin(), grad.end(), [](double v) { return std::isfinite(v); })) {
            std::fill(grad.begin(), grad.end(), 0.0);
            return kSentinelLoss;
        }
        return loss;
    } catch (const SolverError&) {
        return kSentinelLoss;
    } catch (const EvaluationError&) {
        return kSentinelLoss;
    }
}

integrate::Trajectory simulate(const ModelParams& params, const TrainingProblem& problem,
                               std::span<const double> grid, bool* fell_back)
{
    const auto ctx = bind(problem, params);
    const auto rhs = rhs_function(params.kind, ctx);
    auto cfg = dynamics::is_neural(params.kind) ? integrate::SolveConfig::neural()
                                                : integrate::SolveConfig::mechanistic();
    cfg.substeps_per_interval = problem.solve.substeps_per_interval;
    if (fell_back != nullptr) {
        *fell_back = false;
    }
    try {
        return integrate::solve_adaptive(rhs, problem.M0, grid, cfg);
    } catch (const SolverError&) {
        if (fell_back != nullptr) {
            *fell_back = true;
        }
    } catch (const EvaluationError&) {
        if (fell_back != nullptr) {
            *fell_back = true;
        }
    }
    return integrate::solve_fixed(rhs, problem.M0, grid, cfg);
}

FitResult fit(ModelKind kind, const ingest::IntensitySeries& data, const TrainConfig& cfg,
              std::size_t train_count)
{
    const auto started = std::chrono::steady_clock::now();
    const auto problem = make_problem(data, train_count, cfg.substeps_per_interval);

    FitResult result;
    result.train_count = problem.grid.size();
    result.max_eta = problem.ctx.max_eta;
    result.t_data_max = problem.ctx.t_data_max;

    std::vector<double> x = encode(initial_params(kind, problem.ctx.params.t_max, cfg.seed));
    std::vector<double> grad(x.size());
    std::vector<double> best_x = x;
    double best = kSentinelLoss;
    bool any_finite = false;
    double first_loss = kSentinelLoss;

    auto objective = [&](std::span<const double> xs, std::span<double> g) {
        const double f = loss_and_gradient(kind, problem, xs, g);
        if (result.evaluations++ == 0) {
            first_loss = f;
        }
        if (f < kSentinelLoss) {
            any_finite = true;
        }
        if (f < best) {
            best = f;
            best_x.assign(xs.begin(), xs.end());
        }
        return f;
    };

    std::size_t iteration = 0;
    const bool neural = dynamics::is_neural(kind);
    if (neural) {
        optim::AdamState adam(x.size());
        for (std::size_t i = 0; i < cfg.adam_iters; ++i) {
            const double f = objective(x, grad);
            result.loss_trace.push_back({iteration++, "adam", f});
            optim::adam_step(adam, x, grad, cfg.adam_lr);
        }
        x = best_x;
    }
    if (cfg.lbfgs_iters > 0) {
        optim::LbfgsOptions opts;
        opts.iterations = cfg.lbfgs_iters;
        opts.memory = cfg.lbfgs_memory;
        const auto lb = optim::lbfgs_minimize(objective, x, opts);
        for (double f : lb.trace) {
            result.loss_trace.push_back({iteration++, "lbfgs", f});
        }
    }
    if (result.evaluations == 0) {
        objective(x, grad);
    }
    result.initial_loss = first_loss;
    if (!any_finite) {
        throw FitFailure(fmt::format("every evaluation of the {} loss failed", dynamics::to_string(kind)),
                         result.loss_trace);
    }

    result.params = decode(kind, best_x, problem.ctx.params.t_max);
    result.final_loss = best;
    result.trajectory = simulate(result.params, problem, data.t, &result.simulation_fallback);
    result.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

namespace {

struct NamedConstant {
    const char* name;
    double dynamics::MechanisticParams::*field;
};

constexpr NamedConstant kConstants[] = {
    {"alpha0", &dynamics::MechanisticParams::alpha0},
    {"beta", &dynamics::MechanisticParams::beta},
    {"kappa", &dynamics::MechanisticParams::kappa},
    {"K", &dynamics::MechanisticParams::K},
    {"p_decay", &dynamics::MechanisticParams::p_decay},
};

// Constants a model actually trains; only those go into its checkpoint.
bool stores_constant(ModelKind kind, std::string_view name)
{
    switch (kind) {
    case ModelKind::ode: return true;
    case ModelKind::ode_no_feedback:
    case ModelKind::ude: return name != "kappa";
    case ModelKind::node: return false;
    }
    return false;
}

double parse_double(const std::string& token, const std::string& what)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(token, &used);
        if (used != token.size() || !std::isfinite(v)) {
            throw std::invalid_argument(token);
        }
        return v;
    } catch (const std::exception&) {
        throw InputError(fmt::format("checkpoint: bad value '{}' for {}", token, what));
    }
}

} // namespace

void write_checkpoint(std::ostream& out, const FitResult& fit, std::uint64_t seed)
{
    const auto kind = fit.params.kind;
    out << "# propagate checkpoint\n";
    out << "model " << dynamics::to_string(kind) << '\n';
    for (const auto& c : kConstants) {
        if (stores_constant(kind, c.name)) {
            out << fmt::format("const {} {}\n", c.name, fit.params.mech.*c.field);
        }
    }
    out << fmt::format("norm max_eta {}\n", fit.max_eta);
    out << fmt::format("norm t_data_max {}\n", fit.t_data_max);
    out << fmt::format("norm t_max {}\n", fit.params.mech.t_max);
    if (dynamics::is_neural(kind)) {
        const auto spec = kind == ModelKind::ude ? nn::ude_spec() : nn::node_spec();
        nn::write_checkpoint(out, nn::Checkpoint{spec, seed, fit.params.nn});
    } else {
        out << "seed " << seed << '\n';
    }
}

LoadedModel read_checkpoint(std::istream& in)
{
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (in.bad()) {
        throw InputError("checkpoint: stream unreadable");
    }
    LoadedModel out;
    bool have_kind = false;
    std::map<std::string, double> constants;
    std::istringstream lines(text);
    std::string line;
    std::size_t network_at = std::string::npos;
    std::size_t offset = 0;
    while (std::getline(lines, line)) {
        const auto line_start = offset;
        offset += line.size() + 1;
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key) || key.front() == '#') {
            continue;
        }
        if (key == "widths") {
            network_at = line_start;
            break;
        }
        std::string a, b;
        if (key == "model" && ls >> a) {
            out.params.kind = dynamics::parse_model_kind(a);
            have_kind = true;
        } else if (key == "const" && ls >> a >> b) {
            constants[a] = parse_double(b, a);
        } else if (key == "norm" && ls >> a >> b) {
            const double v = parse_double(b, a);
            if (a == "max_eta") {
                out.max_eta = v;
            } else if (a == "t_data_max") {
                out.t_data_max = v;
            } else if (a == "t_max") {
                out.params.mech.t_max = v;
            } else {
                throw InputError(fmt::format("checkpoint: unknown normalisation '{}'", a));
            }
        } else if (key == "seed" && ls >> a) {
            out.seed = static_cast<std::uint64_t>(parse_double(a, "seed"));
        } else {
            throw InputError(fmt::format("checkpoint: unrecognised line '{}'", line));
        }
    }
    if (!have_kind) {
        throw InputError("checkpoint: missing 'model' line");
    }

    const auto kind = out.params.kind;
    const double t_max = out.params.mech.t_max;
    out.params.mech = dynamics::published_params(t_max);
    out.params.mech.kappa = kind == ModelKind::ode ? out.params.mech.kappa : 0.0;
    for (const auto& c : kConstants) {
        const auto it = constants.find(c.name);
        if (stores_constant(kind, c.name)) {
            if (it == constants.end()) {
                throw InputError(fmt::format("checkpoint: missing constant '{}'", c.name));
            }
            out.params.mech.*c.field = it->second;
        } else if (it != constants.end()) {
            throw InputError(fmt::format("checkpoint: constant '{}' does not belong to model '{}'",
                                         c.name, dynamics::to_string(kind)));
        }
    }

    if (dynamics::is_neural(kind)) {
        if (network_at == std::string::npos) {
            throw InputError("checkpoint: neural model without a network block");
        }
        std::istringstream rest(text.substr(network_at));
        auto net = nn::read_checkpoint(rest);
        const auto expected = kind == ModelKind::ude ? nn::ude_spec() : nn::node_spec();
        if (!(net.spec == expected)) {
            throw ArtifactError("checkpoint: network shape does not match the model");
        }
        out.params.nn = std::move(net.params);
        out.seed = net.seed;
    } else if (network_at != std::string::npos) {
        throw ArtifactError("checkpoint: mechanistic model with a network block");
    }
    if (!(out.max_eta > 0.0) || !(out.t_data_max > 0.0) || !(t_max > 0.0)) {
        throw InputError("checkpoint: normalisation constants must be positive");
    }
    return out;
}

void write_loss_trace_csv(std::ostream& out, const FitResult& fit)
{
    out << "iteration,phase,loss\n";
    for (const auto& r : fit.loss_trace) {
        out << fmt::format("{},{},{}\n", r.iteration, r.phase, r.loss);
    }
}

void write_trajectory_csv(std::ostream& out, const integrate::Trajectory& trajectory)
{
    out << "time_days,M\n";
    for (std::size_t i = 0; i < trajectory.t.size(); ++i) {
        out << fmt::format("{},{}\n", trajectory.t[i], trajectory.M[i]);
    }
}

} // namespace propagate::train
