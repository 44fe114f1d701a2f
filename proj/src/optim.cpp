#include "propagate/optim.hpp"

#include "propagate/error.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

namespace propagate::optim {

namespace {

double dot(std::span<const double> a, std::span<const double> b)
{
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

bool all_finite(std::span<const double> v)
{
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

bool adam_step(AdamState& state, std::span<double> params, std::span<const double> grad, double lr,
               const AdamOptions& o)
{
    if (grad.size() != params.size() || state.m.size() != params.size()) {
        throw ShapeError("adam: parameter, gradient and moment sizes differ");
    }
    if (!all_finite(grad)) {
        ++state.rejected;
        return false;
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * grad[i];
        state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
    return true;
}

LbfgsResult lbfgs_minimize(const Objective& objective, std::span<const double> x0,
                           const LbfgsOptions& o)
{
    const auto n = x0.size();
    LbfgsResult result;
    std::vector<double> x(x0.begin(), x0.end());
    std::vector<double> g(n);
    double f = objective(x, g);
    result.evaluations = 1;
    if (!std::isfinite(f)) {
        throw Error("lbfgs: objective is not finite at the starting point");
    }
    result.x = x;
    result.f = f;

    std::deque<std::vector<double>> s_hist;
    std::deque<std::vector<double>> y_hist;
    std::deque<double> rho_hist;
    std::vector<double> d(n), alpha(o.memory), x_new(n), g_new(n);

    for (std::size_t iter = 0; iter < o.iterations; ++iter) {
        const double gnorm = std::sqrt(dot(g, g));
        if (!std::isfinite(gnorm)) {
            result.stop = LbfgsStop::line_search;
            break;
        }
        if (gnorm < o.gradient_tolerance) {
            result.stop = LbfgsStop::gradient;
            break;
        }

        // Two-loop recursion: d = -H g.
        for (std::size_t i = 0; i < n; ++i) {
            d[i] = -g[i];
        }
        const auto k = s_hist.size();
        for (std::size_t j = k; j-- > 0;) {
            alpha[j] = rho_hist[j] * dot(s_hist[j], d);
            for (std::size_t i = 0; i < n; ++i) {
                d[i] -= alpha[j] * y_hist[j][i];
            }
        }
        double gamma = 1.0 / gnorm; // first iteration: unit-length trial step
        if (k > 0) {
            gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
        }
        for (auto& di : d) {
            di *= gamma;
        }
        for (std::size_t j = 0; j < k; ++j) {
            const double beta = rho_hist[j] * dot(y_hist[j], d);
            for (std::size_t i = 0; i < n; ++i) {
                d[i] += (alpha[j] - beta) * s_hist[j][i];
            }
        }

        double slope = dot(g, d);
        if (!(slope < 0.0)) {
            // Not a descent direction; restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for (std::size_t i = 0; i < n; ++i) {
                d[i] = -g[i] / gnorm;
            }
            slope = -gnorm;
        }

        double step = 1.0;
        bool accepted = false;
        double f_new = f;
        for (std::size_t trial = 0; trial < o.max_backtracks; ++trial) {
            for (std::size_t i = 0; i < n; ++i) {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = objective(x_new, g_new);
            ++result.evaluations;
            if (std::isfinite(f_new) && f_new < result.f) {
                result.f = f_new;
                result.x = x_new;
            }
            if (std::isfinite(f_new) && f_new <= f + o.armijo_c * step * slope && all_finite(g_new)) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            result.stop = LbfgsStop::line_search;
            result.no_progress = iter == 0;
            break;
        }

        std::vector<double> s(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        const double ys = dot(y, s);
        if (ys > o.curvature_floor && o.memory > 0) {
            if (s_hist.size() == o.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / ys);
        }
        x.swap(x_new);
        g.swap(g_new);
        f = f_new;
        result.iterations = iter + 1;
        result.trace.push_back(f);
    }
    return result;
}

} // namespace propagate::optim
