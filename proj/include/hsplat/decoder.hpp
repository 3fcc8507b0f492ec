#pragma once

#include "hsplat/common.hpp"
#include "hsplat/rng.hpp"

#include <Eigen/Dense>
#include <span>

namespace hsplat {

using Matrix = Eigen::MatrixXd;

/// Fully connected color decoder: rectified hidden layers, sigmoid output.
/// Parameters live in one flat buffer (per layer: weights column-major, then
/// bias) so the optimizer and checkpoints can treat them as a single array.
class Decoder {
public:
    /// Activations of one batched forward pass, kept for the reverse pass.
    struct Cache {
        std::vector<Matrix> activations;  // input, hidden..., output (post-activation)
    };

    Decoder() = default;
    Decoder(int input_dim, int hidden_width, int hidden_layers = 2, int output_dim = 3);

    int input_dim() const { return widths_.front(); }
    int output_dim() const { return widths_.back(); }
    const std::vector<int>& widths() const { return widths_; }
    std::size_t parameter_count() const { return params_.size(); }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    /// Fan-in scaled uniform initialization, biases zero.
    void initialize(Rng& rng);

    Eigen::Map<const Matrix> weight(int layer) const;
    Eigen::Map<Matrix> weight(int layer);
    Eigen::Map<const Eigen::VectorXd> bias(int layer) const;
    Eigen::Map<Eigen::VectorXd> bias(int layer);

    /// Columns of `input` are samples. Returns output_dim x batch.
    Matrix forward(const Matrix& input, Cache* cache = nullptr) const;

    /// Reverse pass. Accumulates into `param_grad` (parameter_count() long)
    /// and returns the gradient with respect to the input batch.
    Matrix backward(const Cache& cache, const Matrix& grad_output, std::span<double> param_grad) const;

    /// Single-sample convenience: decode(concat(features, sh)).
    Vec3 decode(std::span<const double> features, std::span<const double> sh) const;

    bool operator==(const Decoder&) const = default;

private:
    std::size_t weight_offset(int layer) const { return offsets_[layer]; }
    std::size_t bias_offset(int layer) const {
        return offsets_[layer] + static_cast<std::size_t>(widths_[layer + 1]) * widths_[layer];
    }

    std::vector<int> widths_;
    std::vector<std::size_t> offsets_;
    std::vector<double> params_;
};

}  // namespace hsplat
