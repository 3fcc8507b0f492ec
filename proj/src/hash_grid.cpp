#include "hsplat/hash_grid.hpp"

#include <algorithm>

namespace hsplat {

std::uint32_t hash_index(const std::array<std::int64_t, 3>& cell, std::uint32_t table_size) {
    constexpr std::uint32_t primes[3] = {1u, 2654435761u, 805459861u};
    std::uint32_t h = 0;
    for (int a = 0; a < 3; ++a) h ^= static_cast<std::uint32_t>(cell[a]) * primes[a];
    return h & (table_size - 1);
}

HashGrid::HashGrid(const HashGridConfig& config, const Vec3& aabb_min, const Vec3& aabb_max)
    : config_(config), aabb_min_(aabb_min), aabb_max_(aabb_max) {
    if (config.levels < 0) throw Error("hash grid: level count must be non-negative");
    if (config.log2_table_size < 1 || config.log2_table_size > 30) throw Error("hash grid: table size out of range");
    if (config.feature_dim < 1) throw Error("hash grid: feature width must be positive");
    if (config.resolution < 1) throw Error("hash grid: resolution must be positive");
    if ((aabb_max - aabb_min).minCoeff() <= 0.0) throw Error("hash grid: empty scene box");
    table_size_ = 1u << config.log2_table_size;
    for (int l = 0; l < config.levels; ++l) {
        if (config.levels == 1) {
            resolutions_.push_back(config.resolution);
        } else {
            const double growth =
                std::pow(static_cast<double>(config.resolution) / config.min_resolution, 1.0 / (config.levels - 1));
            resolutions_.push_back(static_cast<int>(std::floor(config.min_resolution * std::pow(growth, l) + 0.5)));
        }
    }
    table_.assign(static_cast<std::size_t>(config.levels) * table_size_ * config.feature_dim, 0.0);
}

void HashGrid::initialize(Rng& rng, double amplitude) {
    for (double& v : table_) v = rng.uniform(-amplitude, amplitude);
}

void HashGrid::corners(const Vec3& x, int level, std::array<Corner, 8>& out) const {
    const int res = resolutions_[level];
    const Vec3 extent = aabb_max_ - aabb_min_;
    std::array<std::int64_t, 3> base{};
    Vec3 frac;
    Vec3 dfrac;  // d frac / d x per axis, zero where clamped
    for (int a = 0; a < 3; ++a) {
        const double unit = (x[a] - aabb_min_[a]) / extent[a];
        const bool inside = unit > 0.0 && unit < 1.0;
        const double pos = std::clamp(unit, 0.0, 1.0) * res;
        const std::int64_t cell = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), res - 1);
        base[a] = cell;
        frac[a] = pos - static_cast<double>(cell);
        dfrac[a] = inside ? res / extent[a] : 0.0;
    }
    for (int c = 0; c < 8; ++c) {
        std::array<std::int64_t, 3> v{};
        double w = 1.0;
        double axis_w[3];
        for (int a = 0; a < 3; ++a) {
            const bool hi = (c >> a) & 1;
            v[a] = base[a] + (hi ? 1 : 0);
            axis_w[a] = hi ? frac[a] : 1.0 - frac[a];
            w *= axis_w[a];
        }
        Vec3 dw;
        for (int a = 0; a < 3; ++a) {
            const double sign = ((c >> a) & 1) ? 1.0 : -1.0;
            dw[a] = sign * dfrac[a] * axis_w[(a + 1) % 3] * axis_w[(a + 2) % 3];
        }
        out[c] = Corner{hash_index(v, table_size_), w, dw};
    }
}

void HashGrid::sample(const Vec3& x, std::span<double> out) const {
    const int f = config_.feature_dim;
    std::array<Corner, 8> cs;
    for (int l = 0; l < config_.levels; ++l) {
        corners(x, l, cs);
        double* dst = out.data() + static_cast<std::size_t>(l) * f;
        std::fill(dst, dst + f, 0.0);
        for (const Corner& c : cs) {
            const double* src = table_.data() + entry_offset(l, c.slot);
            for (int k = 0; k < f; ++k) dst[k] += c.weight * src[k];
        }
    }
}

std::vector<double> HashGrid::sample(const Vec3& x) const {
    std::vector<double> out(output_dim());
    sample(x, out);
    return out;
}

Vec3 HashGrid::sample_backward(const Vec3& x, std::span<const double> grad_out, std::span<double> table_grad) const {
    const int f = config_.feature_dim;
    std::array<Corner, 8> cs;
    Vec3 gx = Vec3::Zero();
    for (int l = 0; l < config_.levels; ++l) {
        corners(x, l, cs);
        const double* g = grad_out.data() + static_cast<std::size_t>(l) * f;
        for (const Corner& c : cs) {
            const std::size_t off = entry_offset(l, c.slot);
            const double* entry = table_.data() + off;
            double* dst = table_grad.data() + off;
            double dot = 0.0;
            for (int k = 0; k < f; ++k) {
                dst[k] += c.weight * g[k];
                dot += entry[k] * g[k];
            }
            gx += dot * c.d_weight;
        }
    }
    return gx;
}

}  // namespace hsplat
