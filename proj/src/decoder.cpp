#include "hsplat/decoder.hpp"

#include <cassert>

namespace hsplat {

Decoder::Decoder(int input_dim, int hidden_width, int hidden_layers, int output_dim) {
    if (input_dim < 1 || hidden_width < 1 || hidden_layers < 0 || output_dim < 1) {
        throw Error("decoder: invalid layer widths");
    }
    widths_.push_back(input_dim);
    for (int i = 0; i < hidden_layers; ++i) widths_.push_back(hidden_width);
    widths_.push_back(output_dim);
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        offsets_.push_back(total);
        total += static_cast<std::size_t>(widths_[l + 1]) * (widths_[l] + 1);
    }
    params_.assign(total, 0.0);
}

void Decoder::initialize(Rng& rng) {
    const int layers = static_cast<int>(widths_.size()) - 1;
    for (int l = 0; l < layers; ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
        auto w = weight(l);
        for (Eigen::Index c = 0; c < w.cols(); ++c)
            for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
        bias(l).setZero();
    }
}

Eigen::Map<const Matrix> Decoder::weight(int layer) const {
    return {params_.data() + weight_offset(layer), widths_[layer + 1], widths_[layer]};
}
Eigen::Map<Matrix> Decoder::weight(int layer) {
    return {params_.data() + weight_offset(layer), widths_[layer + 1], widths_[layer]};
}
Eigen::Map<const Eigen::VectorXd> Decoder::bias(int layer) const {
    return {params_.data() + bias_offset(layer), widths_[layer + 1]};
}
Eigen::Map<Eigen::VectorXd> Decoder::bias(int layer) {
    return {params_.data() + bias_offset(layer), widths_[layer + 1]};
}

Matrix Decoder::forward(const Matrix& input, Cache* cache) const {
    assert(input.rows() == input_dim());
    const int layers = static_cast<int>(widths_.size()) - 1;
    if (cache) {
        cache->activations.clear();
        cache->activations.push_back(input);
    }
    Matrix act = input;
    for (int l = 0; l < layers; ++l) {
        // Owned copies keep the product independent of the flat buffer's alignment.
        const Matrix w = weight(l);
        Matrix z = w * act;
        z.colwise() += bias(l);
        if (l + 1 < layers) {
            act = z.cwiseMax(0.0);
        } else {
            act = z.unaryExpr([](double v) { return sigmoid(v); });
        }
        if (cache) cache->activations.push_back(act);
    }
    return act;
}

Matrix Decoder::backward(const Cache& cache, const Matrix& grad_output, std::span<double> param_grad) const {
    assert(param_grad.size() == params_.size());
    const int layers = static_cast<int>(widths_.size()) - 1;
    const Matrix& out = cache.activations.back();
    Matrix g = grad_output.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix()));
    for (int l = layers - 1; l >= 0; --l) {
        const Matrix& in = cache.activations[l];
        Eigen::Map<Matrix> gw(param_grad.data() + weight_offset(l), widths_[l + 1], widths_[l]);
        Eigen::Map<Eigen::VectorXd> gb(param_grad.data() + bias_offset(l), widths_[l + 1]);
        const Matrix gw_l = g * in.transpose();
        const Eigen::VectorXd gb_l = g.rowwise().sum();
        for (Eigen::Index i = 0; i < gw_l.size(); ++i) gw.data()[i] += gw_l.data()[i];
        for (Eigen::Index i = 0; i < gb_l.size(); ++i) gb[i] += gb_l[i];
        const Matrix w = weight(l);
        Matrix g_in = w.transpose() * g;
        if (l > 0) g_in = g_in.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
        g = std::move(g_in);
    }
    return g;
}

Vec3 Decoder::decode(std::span<const double> features, std::span<const double> sh) const {
    Matrix input(input_dim(), 1);
    assert(features.size() + sh.size() == static_cast<std::size_t>(input_dim()));
    for (std::size_t i = 0; i < features.size(); ++i) input(static_cast<Eigen::Index>(i), 0) = features[i];
    for (std::size_t i = 0; i < sh.size(); ++i) input(static_cast<Eigen::Index>(features.size() + i), 0) = sh[i];
    const Matrix out = forward(input);
    return Vec3(out(0, 0), out(1, 0), out(2, 0));
}

}  // namespace hsplat
