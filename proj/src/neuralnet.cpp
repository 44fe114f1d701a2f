#include "propagate/neuralnet.hpp"

#include "propagate/error.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace propagate::nn {

void MlpSpec::validate() const
{
    if (widths.size() < 2) {
        throw ShapeError("an MLP needs at least an input and an output width");
    }
    if (std::any_of(widths.begin(), widths.end(), [](std::size_t w) { return w == 0; })) {
        throw ShapeError("MLP widths must be positive");
    }
}

MlpSpec ude_spec() { return MlpSpec{{1, 10, 1}}; }
MlpSpec node_spec() { return MlpSpec{{2, 16, 16, 1}}; }

std::size_t param_count(const MlpSpec& spec)
{
    spec.validate();
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        n += spec.widths[l] * spec.widths[l + 1] + spec.widths[l + 1];
    }
    return n;
}

std::vector<LayerView> layout(const MlpSpec& spec)
{
    spec.validate();
    std::vector<LayerView> views;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        LayerView v;
        v.in = spec.widths[l];
        v.out = spec.widths[l + 1];
        v.weights = offset;
        v.biases = offset + v.in * v.out;
        offset = v.biases + v.out;
        views.push_back(v);
    }
    return views;
}

ParamVector init_params(const MlpSpec& spec, std::uint64_t seed)
{
    ParamVector params(param_count(spec), 0.0);
    std::mt19937_64 gen(seed);
    for (const auto& layer : layout(spec)) {
        const double bound = std::sqrt(6.0 / static_cast<double>(layer.in + layer.out));
        for (std::size_t k = 0; k < layer.in * layer.out; ++k) {
            const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
            params[layer.weights + k] = bound * (2.0 * u - 1.0);
        }
    }
    return params;
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)), layers_(layout(spec_)), nparams_(nn::param_count(spec_))
{
    max_width_ = *std::max_element(spec_.widths.begin(), spec_.widths.end());
    activations_ = std::accumulate(spec_.widths.begin(), spec_.widths.end(), std::size_t{0});
}

void Mlp::forward(std::span<const double> params, std::span<const double> input,
                  std::span<double> output) const
{
    if (params.size() != nparams_) {
        throw ShapeError(fmt::format("expected {} parameters, got {}", nparams_, params.size()));
    }
    if (input.size() != spec_.inputs() || output.size() != spec_.outputs()) {
        throw ShapeError(fmt::format("network maps {} -> {}, got {} -> {}", spec_.inputs(),
                                     spec_.outputs(), input.size(), output.size()));
    }
    thread_local std::vector<double> buffer;
    buffer.resize(2 * max_width_);
    double* cur = buffer.data();
    double* next = buffer.data() + max_width_;
    std::copy(input.begin(), input.end(), cur);

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        const bool hidden = l + 1 < layers_.size();
        for (std::size_t o = 0; o < L.out; ++o) {
            const double* w = params.data() + L.weights + o * L.in;
            double z = params[L.biases + o];
            for (std::size_t i = 0; i < L.in; ++i) {
                z += w[i] * cur[i];
            }
            next[o] = hidden ? std::max(z, 0.0) : z;
        }
        std::swap(cur, next);
    }
    std::copy(cur, cur + spec_.outputs(), output.begin());
}

std::vector<double> Mlp::forward(std::span<const double> params, std::span<const double> input) const
{
    std::vector<double> out(spec_.outputs());
    forward(params, input, out);
    return out;
}

double Mlp::forward1(std::span<const double> params, std::span<const double> input) const
{
    double out = 0.0;
    forward(params, input, std::span<double>(&out, 1));
    return out;
}

void Mlp::backward(std::span<const double> params, std::span<const double> input,
                   std::span<const double> output_bar, std::span<double> params_bar,
                   std::span<double> input_bar) const
{
    if (params.size() != nparams_ || params_bar.size() != nparams_) {
        throw ShapeError(fmt::format("expected {} parameters", nparams_));
    }
    if (input.size() != spec_.inputs() || output_bar.size() != spec_.outputs() ||
        (!input_bar.empty() && input_bar.size() != spec_.inputs())) {
        throw ShapeError("network input/output cotangent shape mismatch");
    }

    // acts holds every layer's output (post-activation), input first.
    thread_local std::vector<double> acts;
    thread_local std::vector<double> grad;
    acts.resize(activations_);
    grad.resize(2 * max_width_);

    std::copy(input.begin(), input.end(), acts.begin());
    std::size_t in_off = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        const bool hidden = l + 1 < layers_.size();
        const std::size_t out_off = in_off + L.in;
        for (std::size_t o = 0; o < L.out; ++o) {
            const double* w = params.data() + L.weights + o * L.in;
            double z = params[L.biases + o];
            for (std::size_t i = 0; i < L.in; ++i) {
                z += w[i] * acts[in_off + i];
            }
            acts[out_off + o] = hidden ? std::max(z, 0.0) : z;
        }
        in_off = out_off;
    }

    double* g_out = grad.data();
    double* g_in = grad.data() + max_width_;
    std::copy(output_bar.begin(), output_bar.end(), g_out);

    std::size_t out_off = in_off; // offset of the last layer's outputs
    for (std::size_t l = layers_.size(); l-- > 0;) {
        const auto& L = layers_[l];
        const bool hidden = l + 1 < layers_.size();
        const std::size_t prev_off = out_off - L.in;
        if (hidden) {
            // Post-activation > 0 iff pre-activation > 0.
            for (std::size_t o = 0; o < L.out; ++o) {
                if (!(acts[out_off + o] > 0.0)) {
                    g_out[o] = 0.0;
                }
            }
        }
        std::fill(g_in, g_in + L.in, 0.0);
        for (std::size_t o = 0; o < L.out; ++o) {
            const double g = g_out[o];
            if (g == 0.0) {
                continue;
            }
            params_bar[L.biases + o] += g;
            const double* w = params.data() + L.weights + o * L.in;
            double* wb = params_bar.data() + L.weights + o * L.in;
            for (std::size_t i = 0; i < L.in; ++i) {
                wb[i] += g * acts[prev_off + i];
                g_in[i] += g * w[i];
            }
        }
        std::swap(g_in, g_out);
        out_off = prev_off;
    }
    if (!input_bar.empty()) {
        std::copy(g_out, g_out + spec_.inputs(), input_bar.begin());
    }
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt)
{
    if (ckpt.params.size() != param_count(ckpt.spec)) {
        throw ShapeError("checkpoint parameter count does not match its widths");
    }
    out << "widths";
    for (auto w : ckpt.spec.widths) {
        out << ' ' << w;
    }
    out << '\n' << "seed " << ckpt.seed << '\n';
    for (double v : ckpt.params) {
        out << fmt::format("{}\n", v);
    }
}

Checkpoint read_checkpoint(std::istream& in)
{
    Checkpoint ckpt;
    std::string word;
    if (!(in >> word) || word != "widths") {
        throw InputError("checkpoint: expected 'widths'");
    }
    std::string line;
    std::getline(in, line);
    {
        std::istringstream ws(line);
        std::size_t w = 0;
        while (ws >> w) {
            ckpt.spec.widths.push_back(w);
        }
        if (!ws.eof()) {
            throw InputError("checkpoint: bad widths line");
        }
    }
    try {
        ckpt.spec.validate();
    } catch (const ShapeError& e) {
        throw InputError(std::string("checkpoint: ") + e.what());
    }
    if (!(in >> word) || word != "seed" || !(in >> ckpt.seed)) {
        throw InputError("checkpoint: expected 'seed'");
    }
    const auto n = param_count(ckpt.spec);
    ckpt.params.reserve(n);
    std::string token;
    while (in >> token) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
        if (ec != std::errc{} || ptr != token.data() + token.size() || !std::isfinite(v)) {
            throw InputError(fmt::format("checkpoint: bad parameter '{}'", token));
        }
        ckpt.params.push_back(v);
    }
    if (ckpt.params.size() != n) {
        throw InputError(
            fmt::format("checkpoint: expected {} parameters, found {}", n, ckpt.params.size()));
    }
    return ckpt;
}

} // namespace propagate::nn
