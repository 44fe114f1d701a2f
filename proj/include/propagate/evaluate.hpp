#pragma once

#include "propagate/dynamics.hpp"
#include "propagate/ingest.hpp"
#include "propagate/train.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace propagate::evaluate {

inline constexpr double kMapeGuard = 1e-8;

struct MetricBundle {
    double rmse = 0.0;
    double mae = 0.0;
    double mape = 0.0;             // percent
    std::optional<double> pearson; // empty when either series is constant
};

/// Throws ShapeError unless both series have the same length >= 2.
MetricBundle metrics(std::span<const double> y, std::span<const double> yhat);

struct ArmResult {
    std::string label; // unique within a report
    dynamics::ModelKind model = dynamics::ModelKind::ode;
    bool failed = false;
    std::string failure;
    MetricBundle fit;                      // against the arm's scoring target, full horizon
    std::optional<MetricBundle> forecast;  // forecast region only
    std::optional<MetricBundle> training;  // training region only
    std::optional<double> improvement_pct; // ablation: RMSE reduction vs the baseline arm
    std::optional<double> fraction;        // forecast arms
    std::optional<double> noise_level;     // noise arms
    std::size_t train_count = 0;
    double final_loss = 0.0;
    std::vector<double> t;
    std::vector<double> observed;
    std::vector<double> predicted;
};

struct ExperimentReport {
    std::string experiment; // "ablation", "forecast" or "noise"
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> config; // resolved settings, in order
    std::vector<ArmResult> arms;
    std::vector<std::string> notices; // skipped fractions and similar

    bool all_failed() const;
};

inline constexpr dynamics::ModelKind kComparedModels[] = {
    dynamics::ModelKind::ode, dynamics::ModelKind::ude, dynamics::ModelKind::node};

/// No-feedback ODE, log-feedback ODE and neural-feedback UDE on the full
/// series; improvement is relative to the no-feedback arm.
ExperimentReport run_ablation(const ingest::IntensitySeries& data, const train::TrainConfig& cfg);

/// For each fraction p, trains every compared model on the first floor(p N)
/// points and simulates the whole horizon. Fractions leaving fewer than
/// kMinTrainingPoints points are skipped with a notice.
inline constexpr std::size_t kMinTrainingPoints = 10;
ExperimentReport run_forecast(const ingest::IntensitySeries& data, std::span<const double> fractions,
                              const train::TrainConfig& cfg);

/// Additive Gaussian corruption of the smoothed series with sigma equal to
/// level * std(smoothed), floored at zero. Level 0 returns the input.
ingest::IntensitySeries corrupt(const ingest::IntensitySeries& data, double level, std::uint64_t seed);

/// Refits each compared model on the corrupted series and scores it against
/// the same corrupted series. Throws InputError for levels outside [0, 1].
ExperimentReport run_noise(const ingest::IntensitySeries& data, std::span<const double> levels,
                           const train::TrainConfig& cfg, std::uint64_t seed);

// One row per arm x region x metric: arm,model,region,metric,value.
void write_report_csv(std::ostream& out, const ExperimentReport& report);
// time_days,observed,predicted
void write_arm_csv(std::ostream& out, const ArmResult& arm);
// metric,value for a single fit.
void write_metrics_csv(std::ostream& out, const MetricBundle& m);

} // namespace propagate::evaluate
