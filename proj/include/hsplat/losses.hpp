#pragma once

#include "hsplat/common.hpp"
#include "hsplat/renderer.hpp"

#include <span>
#include <string>

namespace hsplat {

/// Training phase; decides which regularizers are live.
enum class Phase { warmup, mcmc, bce };

std::string to_string(Phase p);

/// Whether per-surfel regularizers are averaged or summed over surfels.
enum class Reduction { mean, sum };

struct SsimConfig {
    int window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

/// Per-pixel, per-channel SSIM map (zero-padded Gaussian window).
std::vector<double> ssim_map(const Image& a, const Image& b, const SsimConfig& cfg = {});

/// Mean SSIM. When `grad_a` is non-null it receives d(mean SSIM)/d(a).
double ssim(const Image& a, const Image& b, std::vector<double>* grad_a = nullptr, const SsimConfig& cfg = {});

struct ImageLoss {
    double value = 0.0;
    double l1 = 0.0;
    double ssim = 0.0;
    Image grad;
};

/// (1 - lambda) * mean|pred - gt| + lambda * (1 - SSIM), with gradient w.r.t. pred.
ImageLoss rgb_loss(const Image& pred, const Image& gt, double lambda_ssim = 0.2);

struct ContributionLoss {
    double value = 0.0;
    std::vector<double> grad_weight;
    std::vector<double> grad_t;
};

/// Mean over pixels of sum_{i,j} w_i w_j |t_i - t_j| over saved contributions.
ContributionLoss distortion_loss(const FrameBundle& bundle);

struct NormalLoss {
    double value = 0.0;
    std::vector<Vec3> grad_normal;
    std::vector<double> grad_depth;
    std::vector<double> grad_alpha;
};

/// Mean over pixels of alpha * (1 - n_render . n_depth), where n_depth comes
/// from central differences of the back-projected expected-depth surface.
/// The alpha weight is treated as a constant.
NormalLoss normal_loss(const FrameBundle& bundle, double min_alpha = 0.1);

struct OpacityLoss {
    double value = 0.0;
    std::vector<double> grad_logit;
};

/// L1 on opacities.
OpacityLoss opacity_reg(std::span<const double> opacity_logits, Reduction reduction = Reduction::mean);

inline constexpr double kBceClamp = 1e-6;

/// Binary entropy of the (clamped) opacities.
OpacityLoss bce_loss(std::span<const double> opacity_logits, Reduction reduction = Reduction::mean);

struct LossWeights {
    double lambda_ssim = 0.2;
    double lambda_dist = 100.0;
    double lambda_normal = 0.05;
    double lambda_opacity = 0.01;
    double lambda_bce = 0.01;
    Reduction reduction = Reduction::mean;

    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

/// Unweighted term values of one iteration.
struct LossTerms {
    double rgb = 0.0;
    double l1 = 0.0;
    double ssim = 1.0;
    double dist = 0.0;
    double normal = 0.0;
    double opacity = 0.0;
    double bce = 0.0;
};

/// Weights after phase gating: opacity from Mcmc on, BCE only in Bce.
struct GatedWeights {
    double dist = 0.0;
    double normal = 0.0;
    double opacity = 0.0;
    double bce = 0.0;
};

GatedWeights gate_weights(const LossWeights& w, Phase phase);

struct LossReport {
    LossTerms terms;
    GatedWeights weights;
    double total = 0.0;
};

LossReport total_loss(const LossTerms& terms, const LossWeights& weights, Phase phase);

}  // namespace hsplat
