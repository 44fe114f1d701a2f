#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace propagate::nn {

// Layer widths from input to output. Hidden layers use ReLU, the output is affine.
struct MlpSpec {
    std::vector<std::size_t> widths;

    std::size_t inputs() const { return widths.front(); }
    std::size_t outputs() const { return widths.back(); }
    std::size_t layers() const { return widths.size() - 1; }

    // Throws ShapeError unless there are >= 2 widths, all >= 1.
    void validate() const;

    bool operator==(const MlpSpec&) const = default;
};

// Feedback network of the hybrid model: normalized intensity -> correction.
MlpSpec ude_spec();
// Full right-hand side network: (normalized intensity, normalized time) -> dM/dt.
MlpSpec node_spec();

std::size_t param_count(const MlpSpec& spec);

/// Flat parameters. Per layer: weights row-major as [out][in], then biases.
using ParamVector = std::vector<double>;

/// Glorot-uniform weights, zero biases. Same seed, same vector.
ParamVector init_params(const MlpSpec& spec, std::uint64_t seed);

// Offsets of one layer's block inside a ParamVector.
struct LayerView {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weights = 0; // offset of W[0][0]
    std::size_t biases = 0;  // offset of b[0]
};
std::vector<LayerView> layout(const MlpSpec& spec);

/// Multilayer perceptron over externally owned parameters.
class Mlp {
  public:
    explicit Mlp(MlpSpec spec);

    const MlpSpec& spec() const noexcept { return spec_; }
    std::size_t param_count() const noexcept { return nparams_; }

    void forward(std::span<const double> params, std::span<const double> input,
                 std::span<double> output) const;
    std::vector<double> forward(std::span<const double> params, std::span<const double> input) const;

    // Scalar-output convenience for the hot paths.
    double forward1(std::span<const double> params, std::span<const double> input) const;

    /// Reverse pass for output cotangent `output_bar`. Accumulates dL/dparams
    /// into `params_bar` and writes dL/dinput into `input_bar` (may be empty).
    /// ReLU'(0) is taken as 0.
    void backward(std::span<const double> params, std::span<const double> input,
                  std::span<const double> output_bar, std::span<double> params_bar,
                  std::span<double> input_bar) const;

  private:
    MlpSpec spec_;
    std::vector<LayerView> layers_;
    std::size_t nparams_ = 0;
    std::size_t max_width_ = 0;
    std::size_t activations_ = 0; // total width of all layers
};

// Text checkpoint block: "widths w0 w1 ...", "seed S", then one parameter
// per line in layout order until end of stream.
struct Checkpoint {
    MlpSpec spec;
    std::uint64_t seed = 0;
    ParamVector params;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
// Reads from the current position. Throws InputError on malformed text.
Checkpoint read_checkpoint(std::istream& in);

} // namespace propagate::nn
