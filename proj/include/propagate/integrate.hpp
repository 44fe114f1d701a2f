#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace propagate::integrate {

struct SolveConfig {
    double abstol = 1e-6;
    double reltol = 1e-6;
    double max_step = 0.0; // <= 0 selects a quarter of the smallest grid interval
    double min_step = 1e-12;
    std::size_t max_steps = 1'000'000;
    std::size_t substeps_per_interval = 4;

    // Throws ShapeError when the invariants do not hold.
    void validate() const;

    static SolveConfig mechanistic() { return {}; }
    static SolveConfig neural()
    {
        SolveConfig cfg;
        cfg.abstol = 1e-3;
        cfg.reltol = 1e-3;
        return cfg;
    }
};

struct Trajectory {
    std::vector<double> t;
    std::vector<double> M;
    std::size_t rejected_steps = 0;
    std::size_t rhs_evals = 0;
};

using RhsFunction = std::function<double(double M, double t)>;

// Returns bar * df/dM and accumulates bar * df/dtheta into theta_bar.
using RhsPullback =
    std::function<double(double M, double t, double bar, std::span<double> theta_bar)>;

/// Dormand-Prince 5(4) with embedded error control. Steps land exactly on
/// every grid point; the state is floored at zero after each accepted step.
///
/// Throws SolverError (stiffness) when error control pushes the step below
/// min_step and SolverError (budget) when max_steps is exhausted.
Trajectory solve_adaptive(const RhsFunction& rhs, double M0, std::span<const double> grid,
                          const SolveConfig& cfg);

/// Classical RK4 with substeps_per_interval equal substeps per grid
/// interval, flooring at zero after each substep. Throws SolverError
/// (divergence) on a non-finite state.
Trajectory solve_fixed(const RhsFunction& rhs, double M0, std::span<const double> grid,
                       const SolveConfig& cfg);

/// solve_fixed that also records the stage states needed to run the
/// discrete adjoint afterwards.
class FixedStepTape {
  public:
    FixedStepTape(const RhsFunction& rhs, double M0, std::span<const double> grid,
                  const SolveConfig& cfg);

    const Trajectory& trajectory() const noexcept { return trajectory_; }

    /// Reverse pass of the recorded solve. `M_bar[i]` is dL/dM(t_i); the
    /// result accumulates dL/dtheta into theta_bar. The initial state is
    /// treated as a constant.
    void adjoint(const RhsPullback& pullback, std::span<const double> M_bar,
                 std::span<double> theta_bar) const;

  private:
    struct Substep {
        double t;
        double h;
        double y;   // state at substep start (stage 1 input)
        double y2;  // stage inputs 2..4
        double y3;
        double y4;
        double pre; // RK4 update before flooring
    };

    Trajectory trajectory_;
    std::vector<Substep> substeps_;
    std::size_t per_interval_ = 1;
};

} // namespace propagate::integrate
