#pragma once

#include "propagate/ingest.hpp"
#include "propagate/neuralnet.hpp"

#include <array>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace propagate::dynamics {

enum class ModelKind { ode, ode_no_feedback, ude, node };

std::string_view to_string(ModelKind kind);
// Throws InputError for unknown names.
ModelKind parse_model_kind(std::string_view name);
bool is_neural(ModelKind kind);

inline constexpr double kStateClampFactor = 5.0;   // neural models clamp M to [0, 5 max_eta]
inline constexpr double kNeuralOutputBound = 1000.0;

// Mechanistic constants. Rates are per day, K and M are in intensity units.
struct MechanisticParams {
    double alpha0 = 0.0501;
    double beta = 1e-4;
    double kappa = 0.005;
    double K = 1e5;
    double p_decay = 0.48;
    double t_max = 1.0;

    bool operator==(const MechanisticParams&) const = default;
};

// Published Code Red fit with the given horizon.
MechanisticParams published_params(double t_max);

// Gradient slots matching MechanisticParams order (t_max is not trainable).
struct MechanisticGrad {
    double alpha0 = 0.0;
    double beta = 0.0;
    double kappa = 0.0;
    double K = 0.0;
    double p_decay = 0.0;
};

struct RhsContext {
    std::shared_ptr<const ingest::Interpolant> eta;
    double max_eta = 1.0;    // max of the smoothed signal
    double t_data_max = 1.0; // last observation time, days
    MechanisticParams params;
    nn::ParamVector nn_params; // empty for the mechanistic models
};

// Builds a context whose forcing is the smoothed signal of `series`.
RhsContext make_context(const ingest::IntensitySeries& series, MechanisticParams params);

/// alpha(t) = |alpha0| exp(-|p_decay| t / t_max)
double alpha_at(const MechanisticParams& params, double t);

/// Mechanistic right-hand side with the state floored at zero:
/// alpha(t) M (1 - M/K) + eta(t) - beta M^2 + kappa M log(1 + M).
/// Throws EvaluationError for non-finite M.
double rhs_ode(double M, double t, const RhsContext& ctx);

/// Hybrid right-hand side: the kappa feedback is replaced by the clamped
/// output of the 1-10-1 network evaluated at M / max_eta, with M clamped to
/// [0, 5 max_eta].
double rhs_ude(double M, double t, const RhsContext& ctx);

/// Pure network right-hand side from the 2-16-16-1 network at
/// (M / max_eta, t / t_data_max), output clamped to +-1000.
double rhs_node(double M, double t, const RhsContext& ctx);

double rhs(ModelKind kind, double M, double t, const RhsContext& ctx);

// Pullbacks: return bar * df/dM and accumulate bar * df/dparams. Subgradients
// pass through clamp interiors and are zero at and beyond clamp boundaries.
double rhs_ode_pullback(double M, double t, const RhsContext& ctx, double bar,
                        MechanisticGrad& dparams);
double rhs_ude_pullback(double M, double t, const RhsContext& ctx, double bar,
                        MechanisticGrad& dparams, std::span<double> dnn);
double rhs_node_pullback(double M, double t, const RhsContext& ctx, double bar,
                         std::span<double> dnn);

// The feedback network output the UDE adds, after clamping, at normalized m.
double ude_feedback(std::span<const double> nn_params, double m);

const nn::Mlp& ude_network();
const nn::Mlp& node_network();

} // namespace propagate::dynamics
