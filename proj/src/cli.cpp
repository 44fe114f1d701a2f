#include "propagate/cli.hpp"

#include "propagate/error.hpp"
#include "propagate/evaluate.hpp"
#include "propagate/ingest.hpp"
#include "propagate/symreg.hpp"
#include "propagate/train.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace propagate::cli {

namespace fs = std::filesystem;

namespace {

// A command's settings: every key with its resolved value, in echo order.
struct Settings {
    std::vector<std::string> keys;
    std::map<std::string, std::string> values;

    const std::string& operator[](const std::string& key) const { return values.at(key); }
};

struct Command {
    std::string name;
    std::string help;
    std::vector<std::pair<std::string, std::string>> options; // key, description
};

const std::vector<std::pair<std::string, std::string>> kTrainerOptions = {
    {"adam-iters", "Adam iterations for neural models"},
    {"adam-lr", "Adam learning rate"},
    {"lbfgs-iters", "L-BFGS iterations"},
    {"lbfgs-memory", "L-BFGS history length"},
    {"substeps", "RK4 substeps per grid interval during training"},
};

const std::map<std::string, std::string> kDefaults = {
    {"output-dir", "out"},
    {"seed", "0"},
    {"bin-width", "1800"},
    {"hosts", "200000"},
    {"bins", "400"},
    {"model", "ude"},
    {"adam-iters", "300"},
    {"adam-lr", "0.0005"},
    {"lbfgs-iters", "200"},
    {"lbfgs-memory", "10"},
    {"substeps", "4"},
    {"fractions", "0.25,0.5,0.75"},
    {"levels", "0,0.01,0.05,0.1,0.2"},
    {"lambda", "1"},
    {"terms", "5"},
};

std::vector<Command> commands()
{
    auto with_trainer = [](std::vector<std::pair<std::string, std::string>> base) {
        base.insert(base.end(), kTrainerOptions.begin(), kTrainerOptions.end());
        return base;
    };
    return {
        {"synth", "Generate a synthetic Code Red-like scan log",
         {{"output-dir", "Output directory"},
          {"seed", "Random seed"},
          {"hosts", "Number of infected hosts at saturation"},
          {"bins", "Horizon in bins"},
          {"bin-width", "Bin width in seconds (sets the horizon)"}}},
        {"preprocess", "Bin and smooth a scan log into an intensity series",
         {{"input", "Scan log (tab separated)"},
          {"output-dir", "Output directory"},
          {"bin-width", "Bin width in seconds"}}},
        {"fit", "Fit one model to an intensity series",
         with_trainer({{"input", "Series CSV"},
                       {"output-dir", "Output directory"},
                       {"model", "ode | ode_no_feedback | ude | node"},
                       {"seed", "Initialisation seed"}})},
        {"ablate", "Feedback ablation: no feedback, log feedback, neural feedback",
         with_trainer({{"input", "Series CSV"}, {"output-dir", "Output directory"}, {"seed", "Seed"}})},
        {"forecast", "Train on leading fractions and forecast the rest",
         with_trainer({{"input", "Series CSV"},
                       {"output-dir", "Output directory"},
                       {"seed", "Seed"},
                       {"fractions", "Comma separated training fractions"}})},
        {"noise", "Refit on noise-corrupted series",
         with_trainer({{"input", "Series CSV"},
                       {"output-dir", "Output directory"},
                       {"seed", "Seed for initialisation and noise"},
                       {"levels", "Comma separated noise levels"}})},
        {"recover", "Symbolic recovery of a trained UDE feedback network",
         {{"input", "Series CSV"},
          {"checkpoint", "UDE checkpoint"},
          {"output-dir", "Output directory"},
          {"lambda", "Ridge regularisation weight"},
          {"terms", "Terms kept in the simplified model"},
          {"substeps", "Fallback RK4 substeps per grid interval"}}},
    };
}

// key=value lines; '#' starts a comment line.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw InputError(fmt::format("cannot read config file '{}'", path));
    }
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw InputError(fmt::format("{}:{}: expected key=value", path, lineno));
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return entries;
}

std::uint64_t to_u64(const Settings& s, const std::string& key)
{
    const auto& v = s[key];
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw InputError(fmt::format("--{} expects a non-negative integer, got '{}'", key, v));
    }
    return out;
}

double to_double(const std::string& key, const std::string& v)
{
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(d)) {
            throw std::invalid_argument(v);
        }
        return d;
    } catch (const std::exception&) {
        throw InputError(fmt::format("--{} expects a number, got '{}'", key, v));
    }
}

double to_double(const Settings& s, const std::string& key)
{
    return to_double(key, s[key]);
}

std::vector<double> to_list(const Settings& s, const std::string& key)
{
    std::vector<double> out;
    std::stringstream ss(s[key]);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(to_double(key, item));
    }
    if (out.empty()) {
        throw InputError(fmt::format("--{} needs at least one value", key));
    }
    return out;
}

train::TrainConfig trainer(const Settings& s)
{
    train::TrainConfig cfg;
    cfg.adam_iters = to_u64(s, "adam-iters");
    cfg.adam_lr = to_double(s, "adam-lr");
    cfg.lbfgs_iters = to_u64(s, "lbfgs-iters");
    cfg.lbfgs_memory = to_u64(s, "lbfgs-memory");
    cfg.substeps_per_interval = to_u64(s, "substeps");
    if (s.values.count("seed")) {
        cfg.seed = to_u64(s, "seed");
    }
    if (cfg.substeps_per_interval < 1) {
        throw InputError("--substeps must be at least 1");
    }
    if (!(cfg.adam_lr > 0.0)) {
        throw InputError("--adam-lr must be positive");
    }
    return cfg;
}

std::ofstream open_output(const fs::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InputError(fmt::format("cannot write '{}'", path.string()));
    }
    return out;
}

fs::path output_dir(const Settings& s)
{
    fs::path dir(s["output-dir"]);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw InputError(fmt::format("cannot create output directory '{}': {}", dir.string(), ec.message()));
    }
    return dir;
}

void echo_config(const fs::path& dir, const std::string& command, const Settings& s)
{
    auto out = open_output(dir / "config.resolved");
    out << "command=" << command << '\n';
    for (const auto& key : s.keys) {
        out << key << '=' << s[key] << '\n';
    }
}

const std::string& required(const Settings& s, const std::string& key)
{
    const auto& v = s[key];
    if (v.empty()) {
        throw InputError(fmt::format("--{} is required", key));
    }
    return v;
}

ingest::IntensitySeries load_series(const Settings& s)
{
    return ingest::read_series_csv_file(required(s, "input"));
}

int cmd_synth(const Settings& s, std::ostream& out)
{
    const auto dir = output_dir(s);
    echo_config(dir, "synth", s);
    const auto hosts = to_u64(s, "hosts");
    const auto bins = to_u64(s, "bins");
    const auto width = to_u64(s, "bin-width");
    if (hosts == 0 || bins < 3 || width == 0) {
        throw InputError("synth needs hosts >= 1, bins >= 3 and bin-width >= 1");
    }
    const double horizon = static_cast<double>(bins * width) / 86400.0;
    const auto events = ingest::synth_events(to_u64(s, "seed"), hosts, horizon);
    auto f = open_output(dir / "events.tsv");
    ingest::write_events(f, events);
    out << fmt::format("synth: {} events over {} days -> {}\n", events.size(), horizon,
                       (dir / "events.tsv").string());
    return kOk;
}

int cmd_preprocess(const Settings& s, std::ostream& out)
{
    const auto width = static_cast<std::int64_t>(to_u64(s, "bin-width"));
    if (width <= 0) {
        throw InputError("--bin-width must be positive");
    }
    const auto parsed = ingest::parse_events_file(required(s, "input"));
    const auto series = ingest::preprocess(parsed.events, width);
    const auto dir = output_dir(s);
    echo_config(dir, "preprocess", s);
    auto f = open_output(dir / "series.csv");
    ingest::write_series_csv(f, series);
    out << fmt::format("preprocess: {} events parsed, {} malformed, {} bins, t_max {} days\n",
                       parsed.events.size(), parsed.malformed, series.size(), series.t_max());
    return kOk;
}

int cmd_fit(const Settings& s, std::ostream& out)
{
    const auto kind = dynamics::parse_model_kind(s["model"]);
    const auto cfg = trainer(s);
    const auto series = load_series(s);
    const auto dir = output_dir(s);
    echo_config(dir, "fit", s);
    train::FitResult r;
    try {
        r = train::fit(kind, series, cfg);
    } catch (const train::FitFailure& e) {
        train::FitResult failed;
        failed.loss_trace = e.trace();
        auto trace = open_output(dir / "loss_trace.csv");
        train::write_loss_trace_csv(trace, failed);
        throw;
    }
    {
        auto f = open_output(dir / "checkpoint.txt");
        train::write_checkpoint(f, r, cfg.seed);
    }
    {
        auto f = open_output(dir / "loss_trace.csv");
        train::write_loss_trace_csv(f, r);
    }
    {
        auto f = open_output(dir / "trajectory.csv");
        train::write_trajectory_csv(f, r.trajectory);
    }
    const auto m = evaluate::metrics(series.smoothed, r.trajectory.M);
    {
        auto f = open_output(dir / "metrics.csv");
        evaluate::write_metrics_csv(f, m);
    }
    out << fmt::format("fit {}: rmse {:.6g}, mae {:.6g}, loss {:.6g} -> {:.6g}, {} evaluations, {:.2f} s{}\n",
                       dynamics::to_string(kind), m.rmse, m.mae, r.initial_loss, r.final_loss,
                       r.evaluations, r.wall_time,
                       r.simulation_fallback ? " (fixed-step fallback)" : "");
    return kOk;
}

int write_report(const evaluate::ExperimentReport& report, const fs::path& dir, std::ostream& out)
{
    {
        auto f = open_output(dir / "report.csv");
        evaluate::write_report_csv(f, report);
    }
    fs::create_directories(dir / "arms");
    for (const auto& arm : report.arms) {
        auto f = open_output(dir / "arms" / (arm.label + ".csv"));
        evaluate::write_arm_csv(f, arm);
    }
    for (const auto& n : report.notices) {
        out << "notice: " << n << '\n';
    }
    for (const auto& arm : report.arms) {
        if (arm.failed) {
            out << fmt::format("{:<20} FAILED: {}\n", arm.label, arm.failure);
            continue;
        }
        std::string extra;
        if (arm.forecast) {
            extra += fmt::format("  forecast rmse {:.6g}", arm.forecast->rmse);
        }
        if (arm.improvement_pct) {
            extra += fmt::format("  improvement {:.2f}%", *arm.improvement_pct);
        }
        out << fmt::format("{:<20} rmse {:.6g}{}\n", arm.label, arm.fit.rmse, extra);
    }
    return report.all_failed() || report.arms.empty() ? kFitFailure : kOk;
}

int cmd_experiment(const std::string& name, const Settings& s, std::ostream& out)
{
    const auto cfg = trainer(s);
    std::vector<double> list;
    if (name == "forecast") {
        list = to_list(s, "fractions");
    } else if (name == "noise") {
        list = to_list(s, "levels");
        for (double l : list) {
            if (!(l >= 0.0 && l <= 1.0)) {
                throw InputError(fmt::format("noise level {} is outside [0, 1]", l));
            }
        }
    }
    const auto series = load_series(s);
    const auto dir = output_dir(s);
    echo_config(dir, name, s);
    const auto started = std::chrono::steady_clock::now();
    evaluate::ExperimentReport report;
    if (name == "ablate") {
        report = evaluate::run_ablation(series, cfg);
    } else if (name == "forecast") {
        report = evaluate::run_forecast(series, list, cfg);
    } else {
        report = evaluate::run_noise(series, list, cfg, cfg.seed);
    }
    for (const auto& key : s.keys) {
        report.config.emplace_back(key, s[key]);
    }
    const int code = write_report(report, dir, out);
    out << fmt::format("{}: {} arms, {:.1f} s\n", name, report.arms.size(),
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    return code;
}

int cmd_recover(const Settings& s, std::ostream& out)
{
    const double lambda = to_double(s, "lambda");
    const auto k = to_u64(s, "terms");
    const auto substeps = to_u64(s, "substeps");
    if (!(lambda >= 0.0) || k > symreg::kDictionarySize || substeps < 1) {
        throw InputError(fmt::format("recover needs lambda >= 0, terms <= {}, substeps >= 1",
                                     symreg::kDictionarySize));
    }
    const auto& ckpt_path = required(s, "checkpoint");
    std::ifstream ckpt_in(ckpt_path);
    if (!ckpt_in) {
        throw InputError(fmt::format("cannot read checkpoint '{}'", ckpt_path));
    }
    const auto model = train::read_checkpoint(ckpt_in);
    if (model.params.kind != dynamics::ModelKind::ude) {
        throw ArtifactError(fmt::format("checkpoint holds a '{}' model; recovery needs a ude checkpoint",
                                        dynamics::to_string(model.params.kind)));
    }
    const auto series = load_series(s);
    const auto dir = output_dir(s);
    echo_config(dir, "recover", s);

    auto problem = train::make_problem(series, 0, substeps);
    problem.ctx.max_eta = model.max_eta;
    problem.ctx.t_data_max = model.t_data_max;
    problem.ctx.params.t_max = model.params.mech.t_max;
    const auto trajectory = train::simulate(model.params, problem, series.t);

    const auto samples = symreg::sample_network(model.params.nn, trajectory, model.max_eta);
    const auto full = symreg::ridge_fit(samples, lambda);
    const auto simple = symreg::simplify(full, samples, k);
    const auto rows = simple.terms.empty() ? std::vector<symreg::TermRow>{} : symreg::term_report(simple);

    {
        auto f = open_output(dir / "symbolic_full.csv");
        symreg::write_model_csv(f, full);
    }
    {
        auto f = open_output(dir / "symbolic_simplified.csv");
        symreg::write_model_csv(f, simple);
    }
    {
        auto f = open_output(dir / "expression_full.txt");
        f << symreg::render_expression(full) << '\n';
    }
    {
        auto f = open_output(dir / "expression_simplified.txt");
        f << symreg::render_expression(simple) << '\n';
    }
    {
        auto f = open_output(dir / "term_report.csv");
        symreg::write_term_report_csv(f, rows);
    }
    {
        auto f = open_output(dir / "samples.csv");
        symreg::write_samples_csv(f, samples, full, simple);
    }
    out << fmt::format("recover: {} samples, full rmse {:.6g}, {}-term rmse {:.6g}\n", samples.m.size(),
                       full.fit_rmse, simple.terms.size(), simple.fit_rmse);
    out << "  N(m) ~ " << symreg::render_expression(simple) << '\n';
    return kOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Malware propagation modelling: preprocessing, fitting, experiments, symbolic recovery",
                 "propagate"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);

    const auto cmds = commands();
    std::map<std::string, Settings> settings;
    std::map<std::string, std::string> config_path;
    std::map<std::string, CLI::App*> subs;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        subs[c.name] = sub;
        auto& st = settings[c.name];
        sub->add_option("--config", config_path[c.name], "key=value settings file (flags override it)");
        for (const auto& [key, help] : c.options) {
            st.keys.push_back(key);
            const auto it = kDefaults.find(key);
            st.values[key] = it == kDefaults.end() ? std::string() : it->second;
            sub->add_option("--" + key, st.values[key], help)->default_str(st.values[key]);
        }
    }

    // Lowest precedence above the built-in defaults: the environment seed.
    if (const char* env = std::getenv("PROPAGATE_SEED"); env != nullptr && *env != '\0') {
        for (auto& [name, st] : settings) {
            if (st.values.count("seed")) {
                st.values["seed"] = env;
            }
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend()); // CLI11 consumes from the back
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kInputError;
    }

    std::string name;
    for (const auto& [n, sub] : subs) {
        if (sub->parsed()) {
            name = n;
        }
    }
    auto& st = settings[name];
    auto* sub = subs[name];

    try {
        // Config file entries apply only where no flag was given.
        if (!config_path[name].empty()) {
            for (const auto& [key, value] : read_config_file(config_path[name])) {
                if (key == "command") {
                    if (value != name) {
                        throw InputError(fmt::format("config file is for '{}', not '{}'", value, name));
                    }
                    continue;
                }
                if (!st.values.count(key)) {
                    throw InputError(fmt::format("config key '{}' is not a '{}' setting", key, name));
                }
                if (sub->get_option("--" + key)->count() == 0) {
                    st.values[key] = value;
                }
            }
        }
        if (name == "synth") {
            return cmd_synth(st, out);
        }
        if (name == "preprocess") {
            return cmd_preprocess(st, out);
        }
        if (name == "fit") {
            return cmd_fit(st, out);
        }
        if (name == "recover") {
            return cmd_recover(st, out);
        }
        return cmd_experiment(name, st, out);
    } catch (const EmptyDatasetError& e) {
        err << "error: " << e.what() << '\n';
        return kEmptyData;
    } catch (const ArtifactError& e) {
        err << "error: " << e.what() << '\n';
        return kArtifactMismatch;
    } catch (const InputError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const ShapeError& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kFitFailure;
    }
}

} // namespace propagate::cli
