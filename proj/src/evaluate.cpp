#include "propagate/evaluate.hpp"

#include "propagate/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>

namespace propagate::evaluate {

using dynamics::ModelKind;

namespace {

double uniform01(std::mt19937_64& gen)
{
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Box-Muller, spelled out so the stream is identical across standard libraries.
double standard_normal(std::mt19937_64& gen)
{
    const double u1 = 1.0 - uniform01(gen); // (0, 1]
    const double u2 = uniform01(gen);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double stddev(std::span<const double> v)
{
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= n;
    double ss = 0.0;
    for (double x : v) {
        ss += (x - mean) * (x - mean);
    }
    return std::sqrt(ss / n);
}

// Fits one model and scores the full-horizon trajectory against `target`.
ArmResult run_arm(std::string label, ModelKind kind, const ingest::IntensitySeries& data,
                  std::span<const double> target, const train::TrainConfig& cfg,
                  std::size_t train_count)
{
    ArmResult arm;
    arm.label = std::move(label);
    arm.model = kind;
    arm.t = data.t;
    arm.observed.assign(target.begin(), target.end());
    try {
        const auto r = train::fit(kind, data, cfg, train_count);
        arm.train_count = r.train_count;
        arm.final_loss = r.final_loss;
        arm.predicted = r.trajectory.M;
        arm.fit = metrics(target, arm.predicted);
    } catch (const Error& e) {
        arm.failed = true;
        arm.failure = e.what();
        arm.predicted.assign(target.size(), std::nan(""));
    }
    return arm;
}

std::string format_value(double v)
{
    return std::isfinite(v) ? fmt::format("{}", v) : std::string("nan");
}

} // namespace

MetricBundle metrics(std::span<const double> y, std::span<const double> yhat)
{
    if (y.size() != yhat.size()) {
        throw ShapeError(fmt::format("metrics: {} observations vs {} predictions", y.size(), yhat.size()));
    }
    if (y.size() < 2) {
        throw ShapeError("metrics: need at least 2 points");
    }
    const double n = static_cast<double>(y.size());
    MetricBundle m;
    double se = 0.0, ae = 0.0, pe = 0.0;
    double my = 0.0, mh = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double e = yhat[i] - y[i];
        se += e * e;
        ae += std::abs(e);
        pe += std::abs(e) / std::max(std::abs(y[i]), kMapeGuard);
        my += y[i];
        mh += yhat[i];
    }
    m.rmse = std::sqrt(se / n);
    m.mae = ae / n;
    m.mape = 100.0 * pe / n;

    my /= n;
    mh /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        sxy += (y[i] - my) * (yhat[i] - mh);
        sxx += (y[i] - my) * (y[i] - my);
        syy += (yhat[i] - mh) * (yhat[i] - mh);
    }
    if (sxx > 0.0 && syy > 0.0) {
        m.pearson = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    }
    return m;
}

bool ExperimentReport::all_failed() const
{
    return !arms.empty() && std::all_of(arms.begin(), arms.end(), [](const ArmResult& a) { return a.failed; });
}

ExperimentReport run_ablation(const ingest::IntensitySeries& data, const train::TrainConfig& cfg)
{
    data.validate();
    ExperimentReport report;
    report.experiment = "ablation";
    report.seed = cfg.seed;
    const std::pair<const char*, ModelKind> arms[] = {
        {"no_feedback", ModelKind::ode_no_feedback},
        {"log_feedback", ModelKind::ode},
        {"neural_feedback", ModelKind::ude},
    };
    for (const auto& [label, kind] : arms) {
        report.arms.push_back(run_arm(label, kind, data, data.smoothed, cfg, 0));
    }
    const auto& base = report.arms.front();
    for (auto& arm : report.arms) {
        if (!arm.failed && !base.failed && base.fit.rmse > 0.0) {
            arm.improvement_pct = 100.0 * (base.fit.rmse - arm.fit.rmse) / base.fit.rmse;
        }
    }
    return report;
}

ExperimentReport run_forecast(const ingest::IntensitySeries& data, std::span<const double> fractions,
                              const train::TrainConfig& cfg)
{
    data.validate();
    ExperimentReport report;
    report.experiment = "forecast";
    report.seed = cfg.seed;
    const auto n = data.size();
    for (double p : fractions) {
        if (!(p > 0.0 && p < 1.0)) {
            throw InputError(fmt::format("training fraction {} is outside (0, 1)", p));
        }
        const auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(n)));
        if (count < kMinTrainingPoints) {
            report.notices.push_back(fmt::format(
                "fraction {} skipped: {} training points, need at least {}", p, count, kMinTrainingPoints));
            continue;
        }
        if (n - count < 2) {
            report.notices.push_back(
                fmt::format("fraction {} skipped: fewer than 2 points left to forecast", p));
            continue;
        }
        for (ModelKind kind : kComparedModels) {
            auto arm = run_arm(fmt::format("{}@{}", dynamics::to_string(kind), p), kind, data,
                               data.smoothed, cfg, count);
            arm.fraction = p;
            arm.train_count = count;
            if (!arm.failed) {
                const std::span<const double> obs(arm.observed), pred(arm.predicted);
                arm.training = metrics(obs.first(count), pred.first(count));
                arm.forecast = metrics(obs.subspan(count), pred.subspan(count));
            }
            report.arms.push_back(std::move(arm));
        }
    }
    return report;
}

ingest::IntensitySeries corrupt(const ingest::IntensitySeries& data, double level, std::uint64_t seed)
{
    if (!(level >= 0.0 && level <= 1.0)) {
        throw InputError(fmt::format("noise level {} is outside [0, 1]", level));
    }
    auto out = data;
    if (level == 0.0) {
        return out;
    }
    // Each level gets its own stream so adding levels does not shift the others.
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(std::llround(level * 1e9))};
    std::mt19937_64 gen(seq);
    const double sigma = level * stddev(data.smoothed);
    for (auto& v : out.smoothed) {
        v = std::max(0.0, v + sigma * standard_normal(gen));
    }
    return out;
}

ExperimentReport run_noise(const ingest::IntensitySeries& data, std::span<const double> levels,
                           const train::TrainConfig& cfg, std::uint64_t seed)
{
    data.validate();
    ExperimentReport report;
    report.experiment = "noise";
    report.seed = seed;
    for (double level : levels) {
        const auto noisy = corrupt(data, level, seed);
        for (ModelKind kind : kComparedModels) {
            auto arm = run_arm(fmt::format("{}@{}", dynamics::to_string(kind), level), kind, noisy,
                               noisy.smoothed, cfg, 0);
            arm.noise_level = level;
            report.arms.push_back(std::move(arm));
        }
    }
    return report;
}

void write_metrics_csv(std::ostream& out, const MetricBundle& m)
{
    out << "metric,value\n";
    out << fmt::format("rmse,{}\nmae,{}\nmape,{}\n", m.rmse, m.mae, m.mape);
    out << "pearson," << (m.pearson ? fmt::format("{}", *m.pearson) : std::string("undefined")) << '\n';
}

void write_report_csv(std::ostream& out, const ExperimentReport& report)
{
    out << "arm,model,region,metric,value\n";
    for (const auto& arm : report.arms) {
        const auto model = dynamics::to_string(arm.model);
        auto row = [&](std::string_view region, std::string_view metric, const std::string& value) {
            out << fmt::format("{},{},{},{},{}\n", arm.label, model, region, metric, value);
        };
        row("all", "failed", arm.failed ? "1" : "0");
        if (arm.fraction) {
            row("all", "train_fraction", fmt::format("{}", *arm.fraction));
            row("all", "train_count", fmt::format("{}", arm.train_count));
        }
        if (arm.noise_level) {
            row("all", "noise_level", fmt::format("{}", *arm.noise_level));
        }
        if (arm.failed) {
            continue;
        }
        auto bundle = [&](std::string_view region, const MetricBundle& m) {
            row(region, "rmse", format_value(m.rmse));
            row(region, "mae", format_value(m.mae));
            row(region, "mape", format_value(m.mape));
            row(region, "pearson", m.pearson ? format_value(*m.pearson) : std::string("undefined"));
        };
        bundle("full", arm.fit);
        if (arm.training) {
            bundle("training", *arm.training);
        }
        if (arm.forecast) {
            bundle("forecast", *arm.forecast);
        }
        row("full", "final_loss", format_value(arm.final_loss));
        if (arm.improvement_pct) {
            row("full", "improvement_pct", format_value(*arm.improvement_pct));
        }
    }
}

void write_arm_csv(std::ostream& out, const ArmResult& arm)
{
    out << "time_days,observed,predicted\n";
    for (std::size_t i = 0; i < arm.t.size(); ++i) {
        out << fmt::format("{},{},{}\n", arm.t[i], arm.observed[i], format_value(arm.predicted[i]));
    }
}

} // namespace propagate::evaluate
