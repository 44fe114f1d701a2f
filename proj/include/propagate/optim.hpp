#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace propagate::optim {

// Objective value at x; writes the gradient into `grad` (same length as x).
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;     // accepted updates so far
    std::size_t rejected = 0; // updates skipped for a non-finite gradient

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One bias-corrected Adam update of `params` in place. A gradient with a
/// non-finite entry leaves both state and params untouched and returns false.
bool adam_step(AdamState& state, std::span<double> params, std::span<const double> grad, double lr,
               const AdamOptions& options = {});

struct LbfgsOptions {
    std::size_t iterations = 200;
    std::size_t memory = 10;
    double armijo_c = 1e-4;
    std::size_t max_backtracks = 30;
    double gradient_tolerance = 1e-8;
    double curvature_floor = 1e-10; // pairs with y's <= this are dropped
};

enum class LbfgsStop { iterations, gradient, line_search };

struct LbfgsResult {
    std::vector<double> x; // best point evaluated
    double f = 0.0;
    std::size_t iterations = 0;
    std::size_t evaluations = 0;
    LbfgsStop stop = LbfgsStop::iterations;
    bool no_progress = false;   // the very first line search failed
    std::vector<double> trace;  // objective after each accepted step
};

/// Limited-memory BFGS (two-loop recursion) with backtracking Armijo line
/// search. Never returns a point worse than x0.
LbfgsResult lbfgs_minimize(const Objective& objective, std::span<const double> x0,
                           const LbfgsOptions& options = {});

} // namespace propagate::optim
