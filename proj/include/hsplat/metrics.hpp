#pragma once

#include "hsplat/dataio.hpp"
#include "hsplat/losses.hpp"
#include "hsplat/renderer.hpp"

#include <limits>

namespace hsplat {

/// PSNR of identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

double mse(const Image& pred, const Image& gt);

/// 10 log10(1 / MSE) in dB; kPsnrIdentical when MSE is 0.
double psnr(const Image& pred, const Image& gt);

// ssim() comes from losses.hpp.

/// Symmetric mean nearest-neighbour distance (brute force).
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

/// Render settings matching the representation stored in a checkpoint.
RenderConfig checkpoint_render_config(const Checkpoint& ckpt);

struct BenchResult {
    std::vector<double> ms;  // per repeat, mean over views
    double median_ms = 0.0;
    BlendStats blends;
    std::size_t n_surfels = 0;

    std::string to_json() const;
};

/// Median per-frame time over `repeats` passes after one warm-up pass.
BenchResult bench_render(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                         const std::vector<Camera>& cameras, RenderConfig cfg, int repeats);
BenchResult bench_render(const Checkpoint& ckpt, const std::vector<Camera>& cameras, int repeats);

struct EvalReport {
    std::vector<double> psnr;
    std::vector<double> ssim;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_blends = 0.0;
    double p50_blends = 0.0;
    double p95_blends = 0.0;
    std::size_t n_surfels = 0;
    double ms_per_frame = 0.0;

    std::string to_table() const;
    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
    bool operator==(const EvalReport&) const = default;
};

/// Renders every camera and scores it against its image; blends and timing
/// are averaged over views.
EvalReport evaluate(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                    const std::vector<Camera>& cameras, const std::vector<Image>& images, RenderConfig cfg);
EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Camera>& cameras, const std::vector<Image>& images);

}  // namespace hsplat
