#include "hsplat/adam.hpp"

#include <cassert>
#include <cmath>

namespace hsplat {

void AdamState::reset_row(std::size_t row, std::size_t width) {
    for (std::size_t k = row * width; k < (row + 1) * width && k < m.size(); ++k) {
        m[k] = 0.0;
        v[k] = 0.0;
    }
}

void AdamState::compact_rows(const std::vector<bool>& keep, std::size_t width) {
    std::size_t out = 0;
    for (std::size_t row = 0; row < keep.size(); ++row) {
        if (!keep[row]) continue;
        for (std::size_t k = 0; k < width; ++k) {
            m[out * width + k] = m[row * width + k];
            v[out * width + k] = v[row * width + k];
        }
        ++out;
    }
    m.resize(out * width);
    v.resize(out * width);
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamHyper& hyper) {
    assert(params.size() == grads.size());
    if (state.m.size() != params.size()) state.resize(params.size());
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    const double step_size = lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        params[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) / sqrt_bc2 + hyper.eps);
    }
}

}  // namespace hsplat
