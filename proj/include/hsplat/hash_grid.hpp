#pragma once

#include "hsplat/common.hpp"
#include "hsplat/rng.hpp"

#include <array>
#include <span>

namespace hsplat {

struct HashGridConfig {
    int levels = 1;
    /// Cells per axis of the finest level over the scene box.
    int resolution = 1024;
    /// Coarsest level resolution when levels > 1 (geometric progression).
    int min_resolution = 16;
    int log2_table_size = 19;
    int feature_dim = 20;

    bool operator==(const HashGridConfig&) const = default;
};

/// Spatial hash of a vertex coordinate, masked into [0, table_size).
std::uint32_t hash_index(const std::array<std::int64_t, 3>& cell, std::uint32_t table_size);

/// Trainable feature table addressed by hashing voxel-corner coordinates and
/// sampled with trilinear interpolation; levels are concatenated.
class HashGrid {
public:
    HashGrid() = default;
    HashGrid(const HashGridConfig& config, const Vec3& aabb_min, const Vec3& aabb_max);

    const HashGridConfig& config() const { return config_; }
    int levels() const { return config_.levels; }
    int feature_dim() const { return config_.feature_dim; }
    std::uint32_t table_size() const { return table_size_; }
    int output_dim() const { return config_.levels * config_.feature_dim; }
    int level_resolution(int level) const { return resolutions_[level]; }
    const Vec3& aabb_min() const { return aabb_min_; }
    const Vec3& aabb_max() const { return aabb_max_; }

    std::vector<double>& table() { return table_; }
    const std::vector<double>& table() const { return table_; }
    std::size_t entry_offset(int level, std::uint32_t slot) const {
        return (static_cast<std::size_t>(level) * table_size_ + slot) * config_.feature_dim;
    }

    /// Uniform initialization in [-amplitude, amplitude].
    void initialize(Rng& rng, double amplitude = 1e-4);

    /// Writes output_dim() features for world point x (clamped to the box).
    void sample(const Vec3& x, std::span<double> out) const;
    std::vector<double> sample(const Vec3& x) const;

    /// Accumulates dL/dtable into `table_grad` and returns dL/dx.
    Vec3 sample_backward(const Vec3& x, std::span<const double> grad_out, std::span<double> table_grad) const;

    bool operator==(const HashGrid&) const = default;

private:
    struct Corner {
        std::uint32_t slot;
        double weight;
        Vec3 d_weight;  // d weight / d x
    };
    void corners(const Vec3& x, int level, std::array<Corner, 8>& out) const;

    HashGridConfig config_{};
    std::uint32_t table_size_ = 0;
    std::vector<int> resolutions_;
    Vec3 aabb_min_ = Vec3::Zero();
    Vec3 aabb_max_ = Vec3::Ones();
    std::vector<double> table_;
};

}  // namespace hsplat
