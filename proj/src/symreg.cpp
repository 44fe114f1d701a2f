#include "propagate/symreg.hpp"

#include "propagate/dynamics.hpp"
#include "propagate/error.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace propagate::symreg {

namespace {

double t_m(double m) { return m; }
double t_m2(double m) { return m * m; }
double t_m3(double m) { return m * m * m; }
double t_log(double m) { return std::log1p(m); }
double t_log2(double m) { return std::log1p(m) * std::log1p(m); }
double t_mlog(double m) { return m * std::log1p(m); }
double t_sat(double m) { return m / (1.0 + m); }
double t_hill(double m) { return m * m / (1.0 + m * m); }
double t_sat2(double m) { return m / ((1.0 + m) * (1.0 + m)); }
double t_sqrt(double m) { return std::sqrt(m); }

struct Mechanism {
    std::string_view term;
    std::string_view label;
};

constexpr Mechanism kMechanisms[] = {
    {"m/(1+m)", "network saturation"},
    {"log(1+m)", "address-space exhaustion"},
    {"m", "security response"},
    {"m^2", "peer-to-peer propagation"},
    {"m*log(1+m)", "variant evolution"},
};

double rms(std::span<const double> v)
{
    if (v.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s / static_cast<double>(v.size()));
}

double model_rmse(const SymbolicModel& model, const Samples& samples)
{
    std::vector<double> r(samples.m.size());
    for (std::size_t j = 0; j < r.size(); ++j) {
        r[j] = samples.y[j] - evaluate_symbolic(model, samples.m[j]);
    }
    return rms(r);
}

void set_domain(SymbolicModel& model, const Samples& samples)
{
    if (!samples.m.empty()) {
        const auto [lo, hi] = std::minmax_element(samples.m.begin(), samples.m.end());
        model.m_lo = *lo;
        model.m_hi = *hi;
    }
}

} // namespace

const std::array<BasisTerm, kDictionarySize>& dictionary()
{
    static const std::array<BasisTerm, kDictionarySize> terms{{
        {"m", t_m},
        {"m^2", t_m2},
        {"m^3", t_m3},
        {"log(1+m)", t_log},
        {"log(1+m)^2", t_log2},
        {"m*log(1+m)", t_mlog},
        {"m/(1+m)", t_sat},
        {"m^2/(1+m^2)", t_hill},
        {"m/(1+m)^2", t_sat2},
        {"sqrt(m)", t_sqrt},
    }};
    return terms;
}

std::size_t term_index(std::string_view name)
{
    const auto& d = dictionary();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i].name == name) {
            return i;
        }
    }
    throw InputError(fmt::format("unknown basis term '{}'", name));
}

double SymbolicModel::coefficient(std::string_view name) const
{
    const auto idx = term_index(name);
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i] == idx) {
            return coefficients[i];
        }
    }
    return 0.0;
}

Samples sample_network(std::span<const double> nn_params, const integrate::Trajectory& trajectory,
                       double max_eta)
{
    if (!(max_eta > 0.0)) {
        throw ShapeError("sample_network: max_eta must be positive");
    }
    Samples s;
    s.m.reserve(trajectory.M.size());
    s.y.reserve(trajectory.M.size());
    const double hi = dynamics::kStateClampFactor * max_eta;
    for (double M : trajectory.M) {
        const double m = std::clamp(M, 0.0, hi) / max_eta;
        s.m.push_back(m);
        s.y.push_back(dynamics::ude_feedback(nn_params, m));
    }
    return s;
}

SymbolicModel ridge_fit(const Samples& samples, double lambda, std::span<const std::size_t> terms)
{
    std::vector<std::size_t> use(terms.begin(), terms.end());
    if (use.empty()) {
        use.resize(kDictionarySize);
        std::iota(use.begin(), use.end(), std::size_t{0});
    }
    std::sort(use.begin(), use.end());
    if (std::adjacent_find(use.begin(), use.end()) != use.end() || use.back() >= kDictionarySize) {
        throw ShapeError("ridge_fit: term indices must be distinct dictionary entries");
    }
    if (samples.m.size() != samples.y.size()) {
        throw ShapeError("ridge_fit: m and y differ in length");
    }
    const auto n = samples.m.size();
    const auto p = use.size();
    if (n < p + 1) {
        throw ShapeError(fmt::format("ridge_fit: {} samples for {} terms, need at least {}", n, p, p + 1));
    }
    const auto [lo, hi] = std::minmax_element(samples.m.begin(), samples.m.end());
    if (!(*hi > *lo)) {
        throw ShapeError("ridge_fit: need at least two distinct m values");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ShapeError("ridge_fit: lambda must be finite and non-negative");
    }

    // Least squares on the augmented system [X; sqrt(lambda) I] w = [y; 0],
    // which has the ridge normal equations without forming X'X.
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + p), static_cast<Eigen::Index>(p));
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n + p));
    const auto& d = dictionary();
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < p; ++i) {
            A(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d[use[i]].eval(samples.m[j]);
        }
        b(static_cast<Eigen::Index>(j)) = samples.y[j];
    }
    const double root = std::sqrt(lambda);
    for (std::size_t i = 0; i < p; ++i) {
        A(static_cast<Eigen::Index>(n + i), static_cast<Eigen::Index>(i)) = root;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (lambda == 0.0 && qr.rank() < static_cast<Eigen::Index>(p)) {
        throw SingularError(fmt::format("ridge_fit: design matrix has rank {} < {}", qr.rank(), p));
    }
    const Eigen::VectorXd w = qr.solve(b);

    SymbolicModel model;
    model.lambda = lambda;
    model.terms = use;
    model.coefficients.assign(w.data(), w.data() + w.size());
    set_domain(model, samples);
    model.fit_rmse = model_rmse(model, samples);
    return model;
}

SymbolicModel simplify(const SymbolicModel& model, const Samples& samples, std::size_t k)
{
    if (k > kDictionarySize) {
        throw ShapeError(fmt::format("simplify: k = {} exceeds the dictionary size", k));
    }
    if (k == 0) {
        SymbolicModel empty;
        empty.lambda = model.lambda;
        set_domain(empty, samples);
        empty.fit_rmse = rms(samples.y);
        return empty;
    }
    if (k >= model.terms.size()) {
        return ridge_fit(samples, model.lambda, model.terms);
    }
    const auto& d = dictionary();
    std::vector<std::pair<double, std::size_t>> score;
    for (std::size_t i = 0; i < model.terms.size(); ++i) {
        double mean_abs = 0.0;
        for (double m : samples.m) {
            mean_abs += std::abs(d[model.terms[i]].eval(m));
        }
        mean_abs /= static_cast<double>(std::max<std::size_t>(samples.m.size(), 1));
        score.emplace_back(std::abs(model.coefficients[i]) * mean_abs, model.terms[i]);
    }
    // Larger contribution first; ties go to the earlier dictionary term.
    std::stable_sort(score.begin(), score.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < k; ++i) {
        keep.push_back(score[i].second);
    }
    return ridge_fit(samples, model.lambda, keep);
}

double evaluate_symbolic(const SymbolicModel& model, double m, bool* outside)
{
    if (outside != nullptr) {
        *outside = m < model.m_lo || m > model.m_hi;
    }
    const auto& d = dictionary();
    double sum = 0.0;
    for (std::size_t i = 0; i < model.terms.size(); ++i) {
        sum += model.coefficients[i] * d[model.terms[i]].eval(m);
    }
    return sum;
}

SymbolicModel published_model()
{
    const std::pair<std::string_view, double> entries[] = {
        {"m", -2113.3055},
        {"m^2", 1366.5024},
        {"log(1+m)", -2459.9124},
        {"m*log(1+m)", 831.707},
        {"m/(1+m)", -2608.692},
    };
    SymbolicModel model;
    for (const auto& [name, w] : entries) {
        model.terms.push_back(term_index(name));
        model.coefficients.push_back(w);
    }
    model.lambda = 1.0;
    model.m_lo = 0.0;
    model.m_hi = dynamics::kStateClampFactor;
    return model;
}

std::vector<TermRow> term_report(const SymbolicModel& model)
{
    const auto& d = dictionary();
    std::vector<TermRow> rows;
    for (std::size_t i = 0; i < model.terms.size(); ++i) {
        const double w = model.coefficients[i];
        if (w == 0.0) {
            continue;
        }
        TermRow row;
        row.term = std::string(d[model.terms[i]].name);
        row.coefficient = w;
        row.sign_class = w < 0.0 ? "suppressing" : "amplifying";
        row.mechanism = "unmapped";
        for (const auto& mech : kMechanisms) {
            if (mech.term == row.term) {
                row.mechanism = std::string(mech.label);
            }
        }
        rows.push_back(std::move(row));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const TermRow& a, const TermRow& b) {
        return std::abs(a.coefficient) > std::abs(b.coefficient);
    });
    return rows;
}

std::string render_expression(const SymbolicModel& model)
{
    if (model.terms.empty()) {
        return "0";
    }
    const auto& d = dictionary();
    std::string out;
    for (std::size_t i = 0; i < model.terms.size(); ++i) {
        const double w = model.coefficients[i];
        if (i == 0) {
            out += fmt::format("{}*{}", w, d[model.terms[i]].name);
        } else {
            out += fmt::format(" {} {}*{}", w < 0.0 ? '-' : '+', std::abs(w), d[model.terms[i]].name);
        }
    }
    return out;
}

void write_model_csv(std::ostream& out, const SymbolicModel& model)
{
    const auto& d = dictionary();
    out << "term,coefficient\n";
    for (std::size_t i = 0; i < model.terms.size(); ++i) {
        out << fmt::format("{},{}\n", d[model.terms[i]].name, model.coefficients[i]);
    }
}

void write_term_report_csv(std::ostream& out, std::span<const TermRow> rows)
{
    out << "term,coefficient,sign_class,mechanism\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{},{},{}\n", r.term, r.coefficient, r.sign_class, r.mechanism);
    }
}

void write_samples_csv(std::ostream& out, const Samples& samples, const SymbolicModel& full,
                       const SymbolicModel& simplified)
{
    out << "m,y,full,simplified\n";
    for (std::size_t j = 0; j < samples.m.size(); ++j) {
        out << fmt::format("{},{},{},{}\n", samples.m[j], samples.y[j],
                           evaluate_symbolic(full, samples.m[j]),
                           evaluate_symbolic(simplified, samples.m[j]));
    }
}

} // namespace propagate::symreg
