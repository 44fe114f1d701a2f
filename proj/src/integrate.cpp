#include "propagate/integrate.hpp"

#include "propagate/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace propagate::integrate {

namespace {

void check_grid(std::span<const double> grid, double M0)
{
    if (grid.empty()) {
        throw ShapeError("integration grid is empty");
    }
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (!(grid[i] > grid[i - 1])) {
            throw ShapeError(fmt::format("integration grid not increasing at index {}", i));
        }
    }
    if (!(M0 >= 0.0) || !std::isfinite(M0)) {
        throw ShapeError("initial state must be finite and non-negative");
    }
}

double smallest_interval(std::span<const double> grid)
{
    double h = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < grid.size(); ++i) {
        h = std::min(h, grid[i] - grid[i - 1]);
    }
    return h;
}

// Dormand-Prince 5(4) tableau.
namespace dp {
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
// b(5th) - b(4th)
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
} // namespace dp

// Evaluates the rhs, mapping model evaluation failures to NaN so the
// adaptive controller can shrink the step.
double eval_or_nan(const RhsFunction& rhs, double y, double t)
{
    try {
        return rhs(y, t);
    } catch (const EvaluationError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

} // namespace

void SolveConfig::validate() const
{
    if (!(abstol > 0.0) || !(reltol > 0.0)) {
        throw ShapeError("solver tolerances must be positive");
    }
    if (!(min_step > 0.0) || (max_step > 0.0 && max_step < min_step)) {
        throw ShapeError("solver needs 0 < min_step <= max_step");
    }
    if (substeps_per_interval < 1 || max_steps < 1) {
        throw ShapeError("solver step counts must be at least 1");
    }
}

Trajectory solve_adaptive(const RhsFunction& rhs, double M0, std::span<const double> grid,
                          const SolveConfig& cfg)
{
    cfg.validate();
    check_grid(grid, M0);

    Trajectory out;
    out.t.assign(grid.begin(), grid.end());
    out.M.reserve(grid.size());
    out.M.push_back(M0);
    if (grid.size() == 1) {
        return out;
    }

    const double h_max = cfg.max_step > 0.0 ? cfg.max_step : smallest_interval(grid) / 4.0;
    double t = grid.front();
    double y = M0;
    double h = h_max;
    double k1 = rhs(y, t);
    ++out.rhs_evals;
    if (!std::isfinite(k1)) {
        throw SolverError(SolverError::Kind::divergence, t, "non-finite derivative at start");
    }
    std::size_t attempts = 0;

    for (std::size_t target = 1; target < grid.size(); ++target) {
        const double t_end = grid[target];
        while (t < t_end) {
            if (++attempts > cfg.max_steps) {
                throw SolverError(SolverError::Kind::budget, t,
                                  fmt::format("step budget of {} exhausted at t={}", cfg.max_steps, t));
            }
            double step = std::min(h, h_max);
            bool lands = false;
            if (t + step >= t_end || t_end - (t + step) < cfg.min_step) {
                step = t_end - t;
                lands = true;
            }

            const double k2 = eval_or_nan(rhs, y + step * dp::a21 * k1, t + dp::c2 * step);
            const double k3 = eval_or_nan(rhs, y + step * (dp::a31 * k1 + dp::a32 * k2), t + dp::c3 * step);
            const double k4 = eval_or_nan(
                rhs, y + step * (dp::a41 * k1 + dp::a42 * k2 + dp::a43 * k3), t + dp::c4 * step);
            const double k5 = eval_or_nan(
                rhs, y + step * (dp::a51 * k1 + dp::a52 * k2 + dp::a53 * k3 + dp::a54 * k4),
                t + dp::c5 * step);
            const double k6 = eval_or_nan(
                rhs,
                y + step * (dp::a61 * k1 + dp::a62 * k2 + dp::a63 * k3 + dp::a64 * k4 + dp::a65 * k5),
                t + step);
            const double y_new =
                y + step * (dp::b1 * k1 + dp::b3 * k3 + dp::b4 * k4 + dp::b5 * k5 + dp::b6 * k6);
            const double t_new = lands ? t_end : t + step;
            const double k7 = std::isfinite(y_new) ? eval_or_nan(rhs, y_new, t_new)
                                                   : std::numeric_limits<double>::quiet_NaN();
            out.rhs_evals += 6;

            const double err_abs =
                step * std::abs(dp::e1 * k1 + dp::e3 * k3 + dp::e4 * k4 + dp::e5 * k5 + dp::e6 * k6 + dp::e7 * k7);
            const double scale = cfg.abstol + cfg.reltol * std::max(std::abs(y), std::abs(y_new));
            double err = err_abs / scale;
            if (!std::isfinite(err)) {
                err = std::numeric_limits<double>::infinity();
            }

            if (err <= 1.0) {
                t = t_new;
                if (y_new < 0.0) {
                    y = 0.0;
                    k1 = rhs(y, t);
                    ++out.rhs_evals;
                } else {
                    y = y_new;
                    k1 = k7;
                }
                const double factor = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
                // A landing step shorter than the controller's h says nothing new about h.
                if (!(lands && step < h)) {
                    h = step * factor;
                }
            } else {
                ++out.rejected_steps;
                const double factor = std::isfinite(err) ? std::clamp(0.9 * std::pow(err, -0.2), 0.2, 1.0) : 0.2;
                h = step * factor;
                if (h < cfg.min_step) {
                    throw SolverError(SolverError::Kind::stiffness, t,
                                      fmt::format("step size underflow at t={} (h={:.3g})", t, h));
                }
            }
        }
        out.M.push_back(y);
    }
    return out;
}

Trajectory solve_fixed(const RhsFunction& rhs, double M0, std::span<const double> grid,
                       const SolveConfig& cfg)
{
    return FixedStepTape(rhs, M0, grid, cfg).trajectory();
}

FixedStepTape::FixedStepTape(const RhsFunction& rhs, double M0, std::span<const double> grid,
                             const SolveConfig& cfg)
{
    cfg.validate();
    check_grid(grid, M0);
    per_interval_ = cfg.substeps_per_interval;

    trajectory_.t.assign(grid.begin(), grid.end());
    trajectory_.M.reserve(grid.size());
    trajectory_.M.push_back(M0);
    substeps_.reserve((grid.size() - 1) * per_interval_);

    double y = M0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        const double t0 = grid[i - 1];
        const double h = (grid[i] - t0) / static_cast<double>(per_interval_);
        for (std::size_t s = 0; s < per_interval_; ++s) {
            const double t = t0 + static_cast<double>(s) * h;
            Substep st{};
            st.t = t;
            st.h = h;
            st.y = y;
            const double k1 = rhs(y, t);
            st.y2 = y + 0.5 * h * k1;
            const double k2 = rhs(st.y2, t + 0.5 * h);
            st.y3 = y + 0.5 * h * k2;
            const double k3 = rhs(st.y3, t + 0.5 * h);
            st.y4 = y + h * k3;
            const double k4 = rhs(st.y4, t + h);
            st.pre = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            trajectory_.rhs_evals += 4;
            if (!std::isfinite(st.pre)) {
                throw SolverError(SolverError::Kind::divergence, t,
                                  fmt::format("state diverged near t={}", t));
            }
            y = std::max(st.pre, 0.0);
            substeps_.push_back(st);
        }
        trajectory_.M.push_back(y);
    }
}

void FixedStepTape::adjoint(const RhsPullback& pullback, std::span<const double> M_bar,
                            std::span<double> theta_bar) const
{
    const auto n = trajectory_.t.size();
    if (M_bar.size() != n) {
        throw ShapeError(fmt::format("adjoint seed has {} entries, trajectory has {}", M_bar.size(), n));
    }
    double y_bar = 0.0;
    for (std::size_t i = n; i-- > 1;) {
        y_bar += M_bar[i];
        for (std::size_t s = per_interval_; s-- > 0;) {
            const auto& st = substeps_[(i - 1) * per_interval_ + s];
            // floor: gradient passes only where the update stayed positive
            if (!(st.pre > 0.0)) {
                y_bar = 0.0;
                continue;
            }
            if (y_bar == 0.0) {
                continue;
            }
            const double h = st.h;
            double k1_bar = y_bar * h / 6.0;
            double k2_bar = y_bar * h / 3.0;
            double k3_bar = y_bar * h / 3.0;
            const double k4_bar = y_bar * h / 6.0;
            double y_in_bar = y_bar;

            const double y4_bar = pullback(st.y4, st.t + h, k4_bar, theta_bar);
            y_in_bar += y4_bar;
            k3_bar += h * y4_bar;

            const double y3_bar = pullback(st.y3, st.t + 0.5 * h, k3_bar, theta_bar);
            y_in_bar += y3_bar;
            k2_bar += 0.5 * h * y3_bar;

            const double y2_bar = pullback(st.y2, st.t + 0.5 * h, k2_bar, theta_bar);
            y_in_bar += y2_bar;
            k1_bar += 0.5 * h * y2_bar;

            y_in_bar += pullback(st.y, st.t, k1_bar, theta_bar);
            y_bar = y_in_bar;
        }
    }
}

} // namespace propagate::integrate
