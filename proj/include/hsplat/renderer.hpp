#pragma once

#include "hsplat/camera.hpp"
#include "hsplat/decoder.hpp"
#include "hsplat/geometry.hpp"
#include "hsplat/hash_grid.hpp"

#include <optional>

namespace hsplat {

/// How per-contribution features are formed and turned into color.
enum class ColorMode {
    hybrid,  ///< concat(latent, hash feature) blended, then decoded
    direct,  ///< sigmoid(latent[0..3]) blended as RGB; decoder bypassed
};

/// Which slice of the hybrid feature survives blending.
enum class DecomposeMode { full, surfel_only, hash_only };

struct RenderConfig {
    int tile_size = 16;
    double t_floor = 1e-4;
    double kappa = kDefaultKappa;
    KernelMode kernel = KernelMode::beta;
    Vec3 background = Vec3::Ones();
    ColorMode color = ColorMode::hybrid;
    DecomposeMode decompose = DecomposeMode::full;
    /// Keep per-pixel contribution lists (required by render_backward and
    /// the per-contribution losses).
    bool save_for_backward = true;
    /// Worker threads for the per-tile forward pass; results do not depend
    /// on this value.
    int threads = 1;

    void validate() const;
};

/// One blended surfel at one pixel, in front-to-back order.
struct Contribution {
    std::uint32_t index = 0;
    double transmittance = 1.0;  // T before this contribution
    double alpha = 0.0;
    double weight = 0.0;  // transmittance * alpha
    double t = 0.0;
    double r2 = 0.0;
    double g = 0.0;
    Vec2 uv = Vec2::Zero();
    Vec3 x = Vec3::Zero();
    double facing = 1.0;  // sign applied to the surfel normal
};

/// Everything one render produces, plus what the reverse pass needs.
struct FrameBundle {
    int width = 0;
    int height = 0;
    Camera camera;
    RenderConfig config;
    std::size_t cloud_size = 0;
    int feature_dim = 0;

    Image rgb;
    std::vector<double> alpha;
    std::vector<double> depth;
    std::vector<Vec3> normal;
    std::vector<int> blends;
    /// Candidates never tested because transmittance fell below the floor.
    std::vector<int> skipped;
    /// Blended feature per pixel (feature_dim values each).
    std::vector<double> features;

    /// Contribution lists in CSR form: pixel p owns [offsets[p], offsets[p+1]).
    std::vector<std::size_t> offsets;
    std::vector<Contribution> contributions;
    /// Hash feature of each contribution (hybrid mode).
    std::vector<double> contribution_hash;
    int hash_dim = 0;

    /// Pixels whose feature went through the decoder, and the cached pass.
    std::vector<std::uint32_t> decoded_pixels;
    Matrix decoded;
    Decoder::Cache decoder_cache;

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::span<const Contribution> contributions_of(std::size_t pixel) const {
        return {contributions.data() + offsets[pixel], offsets[pixel + 1] - offsets[pixel]};
    }
};

/// Per-surfel data shared by binning and compositing.
struct PreparedSurfel {
    Frame frame;
    Vec2 scale;
    double opacity = 0.0;
    double depth = 0.0;
    std::uint64_t key = 0;
    ScreenRect rect;
    bool visible = false;
};

/// Storage-order-independent hash of a surfel's center, used to break depth ties.
std::uint64_t position_hash(const Vec3& p);

std::vector<PreparedSurfel> prepare_surfels(const SurfelCloud& cloud, const Camera& camera, const RenderConfig& cfg);

/// Visible surfel indices sorted front to back by (center depth, position hash, index).
std::vector<std::uint32_t> depth_order(const std::vector<PreparedSurfel>& prepared);

/// Per-tile surfel lists, row-major over tiles, each depth sorted.
struct TileBins {
    int tiles_x = 0;
    int tiles_y = 0;
    int tile_size = 16;
    std::vector<std::vector<std::uint32_t>> lists;
};

TileBins bin_and_sort(const SurfelCloud& cloud, const Camera& camera, const RenderConfig& cfg);
TileBins bin_and_sort(const std::vector<PreparedSurfel>& prepared, const Camera& camera, const RenderConfig& cfg);

/// Result of walking one pixel's sorted candidate list.
struct PixelComposite {
    std::vector<double> feature;
    std::vector<Contribution> contributions;
    std::vector<double> hash;  // hash_dim values per contribution
    double alpha = 0.0;
    double depth = 0.0;
    Vec3 normal = Vec3::Zero();
    int skipped = 0;
};

/// Front-to-back compositing of hybrid (or direct-color) features along one ray.
PixelComposite composite_pixel(const Ray& ray, std::span<const std::uint32_t> sorted, const SurfelCloud& cloud,
                               const std::vector<PreparedSurfel>& prepared, const HashGrid& grid,
                               const RenderConfig& cfg);

FrameBundle render(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder, const Camera& camera,
                   const RenderConfig& cfg);

FrameBundle render_decomposed(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                              const Camera& camera, RenderConfig cfg, DecomposeMode mode);

/// Upstream gradients entering the reverse pass. Empty buffers count as zero.
struct PixelGrads {
    Image rgb;
    std::vector<double> alpha;
    std::vector<double> depth;
    std::vector<Vec3> normal;
    /// Direct gradients on each saved contribution's weight and ray distance.
    std::vector<double> weight;
    std::vector<double> t;
};

/// Parameter gradients, shaped like the trainables.
struct SceneGrads {
    std::vector<Vec3> position;
    std::vector<Vec4> rotation;
    std::vector<Vec2> log_scale;
    std::vector<double> opacity_logit;
    std::vector<double> beta;
    std::vector<double> latent;
    std::vector<double> table;
    std::vector<double> decoder;

    void reset(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder);
};

/// Exact reverse of render(); accumulates into `grads` (call grads.reset first).
void render_backward(const FrameBundle& bundle, const PixelGrads& upstream, const SurfelCloud& cloud,
                     const HashGrid& grid, const Decoder& decoder, SceneGrads& grads);

struct BlendStats {
    double mean = 0.0;
    double p50 = 0.0;
    double p95 = 0.0;
    std::int64_t total = 0;
    std::int64_t skipped_by_floor = 0;
};

BlendStats blend_stats(const FrameBundle& bundle);

}  // namespace hsplat
