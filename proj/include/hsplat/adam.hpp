#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace hsplat {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

/// Moments and step counter for one parameter group.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;

    void resize(std::size_t n) {
        m.resize(n, 0.0);
        v.resize(n, 0.0);
    }
    /// Zero the moments of entries [row * width, (row + 1) * width).
    void reset_row(std::size_t row, std::size_t width);
    /// Keep rows with keep[row] true (width values per row), preserving order.
    void compact_rows(const std::vector<bool>& keep, std::size_t width);

    bool operator==(const AdamState&) const = default;
};

/// Bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamHyper& hyper = {});

}  // namespace hsplat
