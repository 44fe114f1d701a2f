#pragma once

#include "propagate/dynamics.hpp"
#include "propagate/error.hpp"
#include "propagate/ingest.hpp"
#include "propagate/integrate.hpp"
#include "propagate/neuralnet.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace propagate::train {

inline constexpr double kSentinelLoss = 1e12;

struct TrainConfig {
    std::size_t adam_iters = 300;
    double adam_lr = 5e-4;
    std::size_t lbfgs_iters = 200;
    std::size_t lbfgs_memory = 10;
    std::uint64_t seed = 0;
    std::size_t substeps_per_interval = 4;
};

// Everything needed to evaluate one model: kind, constants and network weights.
struct ModelParams {
    dynamics::ModelKind kind = dynamics::ModelKind::ode;
    dynamics::MechanisticParams mech;
    nn::ParamVector nn; // empty for the mechanistic models
};

/// Optimizer coordinates for a model.
///   ode:             [ln alpha0, ln beta, ln K, kappa/kappa_ref, p_decay/p_ref]
///   ode_no_feedback: [ln alpha0, ln beta, ln K, p_decay/p_ref]
///   ude:             [31 network weights, alpha0/ref, beta/ref, K/ref, p_decay/ref]
///   node:            [337 network weights]
/// References are the published constants; the scaled ude constants go
/// through |.| at evaluation, so any real value is admissible.
std::vector<double> encode(const ModelParams& params);
ModelParams decode(dynamics::ModelKind kind, std::span<const double> x, double t_max);

// Starting point of a fit: published constants and, for neural models,
// Glorot-initialised weights from `seed`.
ModelParams initial_params(dynamics::ModelKind kind, double t_max, std::uint64_t seed);

/// One least-squares problem: the forcing built from the first
/// `train_count` points of the data, the matching grid and targets.
struct TrainingProblem {
    dynamics::RhsContext ctx;   // forcing + normalisation; params are filled per evaluation
    std::vector<double> grid;   // training times
    std::vector<double> target; // smoothed signal at those times
    double M0 = 1.0;            // max(eta(t0), 1)
    integrate::SolveConfig solve;
};

TrainingProblem make_problem(const ingest::IntensitySeries& data, std::size_t train_count,
                             std::size_t substeps_per_interval = 4);

dynamics::RhsContext bind(const TrainingProblem& problem, const ModelParams& params);

/// Mean squared error of the fixed-step trajectory against the targets.
/// A failed solve yields kSentinelLoss.
double mse_loss(const ModelParams& params, const TrainingProblem& problem);

/// Loss and exact reverse-mode gradient in optimizer coordinates. A failed
/// solve yields kSentinelLoss with a zero gradient.
double loss_and_gradient(dynamics::ModelKind kind, const TrainingProblem& problem,
                         std::span<const double> x, std::span<double> grad);

/// Simulates a model from the problem's initial state over `grid` with the
/// adaptive solver (model-specific tolerances). Falls back to the fixed-step
/// solver if the adaptive one fails; `fell_back` reports that.
integrate::Trajectory simulate(const ModelParams& params, const TrainingProblem& problem,
                               std::span<const double> grid, bool* fell_back = nullptr);

struct LossRecord {
    std::size_t iteration = 0;
    std::string phase; // "adam" or "lbfgs"
    double loss = 0.0;
};

struct FitResult {
    ModelParams params; // best-ever iterate
    integrate::Trajectory trajectory;
    std::vector<LossRecord> loss_trace;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double wall_time = 0.0; // seconds
    std::size_t train_count = 0;
    std::size_t evaluations = 0;
    bool simulation_fallback = false;
    // Normalisation used during training, kept for re-simulation.
    double max_eta = 1.0;
    double t_data_max = 1.0;
};

// Thrown by fit when no evaluated loss was finite; carries the trace.
class FitFailure : public FitError {
  public:
    FitFailure(const std::string& what, std::vector<LossRecord> trace)
        : FitError(what), trace_(std::move(trace))
    {}
    const std::vector<LossRecord>& trace() const noexcept { return trace_; }

  private:
    std::vector<LossRecord> trace_;
};

/// Fits `kind` on the first `train_count` points (0 means all) and
/// simulates the full horizon of `data`.
///   ude/node: Adam (adam_iters) then L-BFGS (lbfgs_iters) from init_params(seed)
///   ode/ode_no_feedback: L-BFGS from the published constants
/// Throws FitFailure if every evaluated loss was the sentinel.
FitResult fit(dynamics::ModelKind kind, const ingest::IntensitySeries& data, const TrainConfig& cfg,
              std::size_t train_count = 0);

// Model checkpoint: model kind, named constants, normalisation, and for the
// neural models the network block.
void write_checkpoint(std::ostream& out, const FitResult& fit, std::uint64_t seed);

struct LoadedModel {
    ModelParams params;
    double max_eta = 1.0;
    double t_data_max = 1.0;
    std::uint64_t seed = 0;
};
LoadedModel read_checkpoint(std::istream& in);

void write_loss_trace_csv(std::ostream& out, const FitResult& fit);
void write_trajectory_csv(std::ostream& out, const integrate::Trajectory& trajectory);

} // namespace propagate::train
