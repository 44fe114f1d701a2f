#pragma once

#include "propagate/integrate.hpp"
#include "propagate/neuralnet.hpp"

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace propagate::symreg {

// Basis functions of the normalised intensity m, in dictionary order.
struct BasisTerm {
    std::string_view name;
    double (*eval)(double m);
};

inline constexpr std::size_t kDictionarySize = 10;
const std::array<BasisTerm, kDictionarySize>& dictionary();
// Index of a dictionary term by name; throws InputError if unknown.
std::size_t term_index(std::string_view name);

struct Samples {
    std::vector<double> m;
    std::vector<double> y;
};

/// One sample per trajectory point: m = clamp(M, 0, 5 max_eta) / max_eta and
/// y the clamped feedback network output at m.
Samples sample_network(std::span<const double> nn_params, const integrate::Trajectory& trajectory,
                       double max_eta);

struct SymbolicModel {
    std::vector<std::size_t> terms;  // dictionary indices, ascending
    std::vector<double> coefficients; // parallel to terms
    double lambda = 1.0;
    double fit_rmse = 0.0;
    double m_lo = 0.0;
    double m_hi = 5.0;

    double coefficient(std::string_view name) const; // 0 when the term is absent
};

/// Ridge regression without intercept over the given dictionary terms
/// (all ten by default): minimises |X w - y|^2 + lambda |w|^2.
/// Throws ShapeError for fewer than terms+1 samples or fewer than two
/// distinct m values, SingularError if lambda = 0 and X is rank deficient.
SymbolicModel ridge_fit(const Samples& samples, double lambda, std::span<const std::size_t> terms = {});

/// Keeps the k terms with the largest |w_i| mean_j |phi_i(m_j)| and refits
/// with the same lambda. k = 0 gives the empty model.
SymbolicModel simplify(const SymbolicModel& model, const Samples& samples, std::size_t k);

/// sum_i w_i phi_i(m). Sets *outside when m lies outside [m_lo, m_hi].
double evaluate_symbolic(const SymbolicModel& model, double m, bool* outside = nullptr);

// Recovered five-term approximation reported for the Code Red feedback.
SymbolicModel published_model();

struct TermRow {
    std::string term;
    double coefficient = 0.0;
    std::string sign_class; // "suppressing" or "amplifying"
    std::string mechanism;  // fixed label or "unmapped"
};

/// One row per non-zero term, ordered by decreasing |coefficient|.
std::vector<TermRow> term_report(const SymbolicModel& model);

std::string render_expression(const SymbolicModel& model);
void write_model_csv(std::ostream& out, const SymbolicModel& model);
void write_term_report_csv(std::ostream& out, std::span<const TermRow> rows);
// m,y,full,simplified
void write_samples_csv(std::ostream& out, const Samples& samples, const SymbolicModel& full,
                       const SymbolicModel& simplified);

} // namespace propagate::symreg
