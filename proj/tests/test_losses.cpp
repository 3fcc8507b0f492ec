#include "hsplat/losses.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace hsplat;
using hsplat::testing::central_diff;
using hsplat::testing::rel_err;

namespace {

Image random_image(Rng& rng, int w, int h, int c = 3) {
    Image img(w, h, c);
    for (double& v : img.data) v = rng.uniform();
    return img;
}

// Direct (non-separable) zero-padded Gaussian window weight sum at (x, y).
double window_mass(int x, int y, int w, int h) {
    double total = 0.0, inside = 0.0;
    for (int dy = -5; dy <= 5; ++dy)
        for (int dx = -5; dx <= 5; ++dx) {
            const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
            total += g;
            const int xx = x + dx, yy = y + dy;
            if (xx >= 0 && xx < w && yy >= 0 && yy < h) inside += g;
        }
    return inside / total;
}

// SSIM of two constant images a, b at a pixel whose window keeps mass s.
double constant_ssim(double a, double b, double s) {
    const double c1 = 1e-4, c2 = 9e-4;
    const double ma = a * s, mb = b * s;
    const double vaa = a * a * s - ma * ma, vbb = b * b * s - mb * mb, vab = a * b * s - ma * mb;
    return (2 * ma * mb + c1) * (2 * vab + c2) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
}

FrameBundle contribution_bundle(const std::vector<std::vector<std::pair<double, double>>>& pixels) {
    FrameBundle b;
    b.width = static_cast<int>(pixels.size());
    b.height = 1;
    b.offsets.push_back(0);
    for (const auto& px : pixels) {
        for (auto [w, t] : px) {
            Contribution c;
            c.weight = w;
            c.t = t;
            b.contributions.push_back(c);
        }
        b.offsets.push_back(b.contributions.size());
    }
    return b;
}

double quadratic_distortion(const std::vector<std::pair<double, double>>& px) {
    double v = 0.0;
    for (auto [wi, ti] : px)
        for (auto [wj, tj] : px) v += wi * wj * std::abs(ti - tj);
    return v;
}

// Bundle with a smooth surface: alpha, depth and normals per pixel.
FrameBundle surface_bundle(int w, int h, const std::function<double(double, double)>& dist, double alpha_lo = 1.0,
                           Rng* rng = nullptr) {
    FrameBundle b;
    b.width = w;
    b.height = h;
    b.camera = hsplat::testing::test_camera(w, h, 0.8);
    const std::size_t n = b.pixel_count();
    b.alpha.resize(n);
    b.depth.resize(n);
    b.normal.resize(n);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            const double a = rng ? rng->uniform(alpha_lo, 1.0) : 1.0;
            b.alpha[p] = a;
            b.depth[p] = a * dist(x, y);
            Vec3 nrm(0, 0, -1);
            if (rng) nrm = Vec3(rng->uniform(-0.3, 0.3), rng->uniform(-0.3, 0.3), -1.0).normalized() * a;
            b.normal[p] = nrm;
        }
    return b;
}

// Independent normal-consistency evaluation; `weight_alpha` is the detached weight.
double normal_oracle(const FrameBundle& b, const std::vector<double>& weight_alpha) {
    const int w = b.width, h = b.height;
    auto point = [&](int x, int y) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const Ray r = b.camera.pixel_ray(x, y);
        return Vec3(r.origin + r.dir * (b.depth[p] / b.alpha[p]));
    };
    double total = 0.0;
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            Vec3 n = (point(x + 1, y) - point(x - 1, y)).cross(point(x, y + 1) - point(x, y - 1)).normalized();
            if (n.dot(b.camera.pixel_ray(x, y).dir) > 0) n = -n;
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            total += weight_alpha[p] * (1.0 - b.normal[p].dot(n));
        }
    return total / static_cast<double>(w * h);
}

}  // namespace

TEST(Ssim, IdenticalImagesGiveExactlyOne) {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const Image a = random_image(rng, 7 + trial * 5, 9 + trial, trial % 2 ? 1 : 3);
        EXPECT_EQ(ssim(a, a), 1.0);
        for (double v : ssim_map(a, a)) EXPECT_EQ(v, 1.0);
    }
}

TEST(Ssim, ConstantImagesMatchClosedForm) {
    const int w = 16, h = 13;
    const Image a(w, h, 3, 0.4), b(w, h, 3, 0.5);
    const auto map = ssim_map(a, b);
    double mean = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double expected = constant_ssim(0.4, 0.5, window_mass(x, y, w, h));
            for (int c = 0; c < 3; ++c) EXPECT_NEAR(map[(static_cast<std::size_t>(y) * w + x) * 3 + c], expected, 1e-9);
            mean += expected;
        }
    EXPECT_NEAR(ssim(a, b), mean / (w * h), 1e-9);
    // Away from the border only luminance differs.
    const double interior = (2 * 0.4 * 0.5 + 1e-4) / (0.16 + 0.25 + 1e-4);
    EXPECT_NEAR(map[(6 * w + 8) * 3], interior, 1e-9);
}

TEST(Ssim, Symmetric) {
    Rng rng(5);
    const Image a = random_image(rng, 12, 10), b = random_image(rng, 12, 10);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    Image a = random_image(rng, 9, 7), b = random_image(rng, 9, 7);
    std::vector<double> grad;
    ssim(a, b, &grad);
    for (std::size_t i = 0; i < a.data.size(); i += 5) {
        const double fd = central_diff([&] { return ssim(a, b); }, a.data[i], 1e-6);
        EXPECT_LT(rel_err(grad[i], fd, 1e-6), 1e-4) << i;
    }
}

TEST(Ssim, ShapeMismatchThrows) {
    EXPECT_THROW(ssim(Image(4, 4), Image(4, 5)), Error);
    EXPECT_THROW(rgb_loss(Image(4, 4, 3), Image(4, 4, 1)), Error);
}

TEST(RgbLoss, IdenticalIsZero) {
    Rng rng(1);
    const Image a = random_image(rng, 10, 8);
    const ImageLoss l = rgb_loss(a, a);
    EXPECT_EQ(l.value, 0.0);
}

TEST(RgbLoss, ConstantOffset) {
    const int w = 14, h = 12;
    const Image gt(w, h, 3, 0.3), pred(w, h, 3, 0.4);
    const ImageLoss l = rgb_loss(pred, gt);
    EXPECT_NEAR(l.l1, 0.1, 1e-12);
    EXPECT_NEAR(0.8 * l.l1, 0.08, 1e-12);
    double mean = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) mean += constant_ssim(0.4, 0.3, window_mass(x, y, w, h));
    mean /= w * h;
    EXPECT_NEAR(l.ssim, mean, 1e-9);
    EXPECT_NEAR(l.value, 0.08 + 0.2 * (1.0 - mean), 1e-9);
}

TEST(RgbLoss, SymmetricAndGradient) {
    Rng rng(11);
    Image pred = random_image(rng, 8, 8), gt = random_image(rng, 8, 8);
    EXPECT_NEAR(rgb_loss(pred, gt).value, rgb_loss(gt, pred).value, 1e-14);
    const ImageLoss l = rgb_loss(pred, gt);
    for (std::size_t i = 0; i < pred.data.size(); i += 3) {
        if (std::abs(pred.data[i] - gt.data[i]) < 1e-4) continue;
        const double fd = central_diff([&] { return rgb_loss(pred, gt).value; }, pred.data[i], 1e-6);
        EXPECT_LT(rel_err(l.grad.data[i], fd, 1e-6), 1e-4) << i;
    }
}

TEST(Distortion, ClosedForms) {
    EXPECT_EQ(distortion_loss(contribution_bundle({{{0.7, 3.0}}})).value, 0.0);
    EXPECT_NEAR(distortion_loss(contribution_bundle({{{0.5, 1.0}, {0.5, 3.0}}})).value, 1.0, 1e-12);
    // Averaged over pixels.
    EXPECT_NEAR(distortion_loss(contribution_bundle({{{0.5, 1.0}, {0.5, 3.0}}, {}})).value, 0.5, 1e-12);
}

TEST(Distortion, MatchesQuadraticOracleAndGradients) {
    Rng rng(21);
    std::vector<std::vector<std::pair<double, double>>> pixels(4);
    for (auto& px : pixels) {
        const int k = 6;
        for (int i = 0; i < k; ++i) px.push_back({rng.uniform(0.01, 0.4), rng.uniform(1.0, 5.0)});
    }
    FrameBundle b = contribution_bundle(pixels);
    const ContributionLoss l = distortion_loss(b);
    double oracle = 0.0;
    for (const auto& px : pixels) oracle += quadratic_distortion(px);
    oracle /= static_cast<double>(pixels.size());
    EXPECT_NEAR(l.value, oracle, 1e-12);
    for (std::size_t i = 0; i < b.contributions.size(); ++i) {
        const double fw = central_diff([&] { return distortion_loss(b).value; }, b.contributions[i].weight, 1e-6);
        const double ft = central_diff([&] { return distortion_loss(b).value; }, b.contributions[i].t, 1e-6);
        EXPECT_LT(rel_err(l.grad_weight[i], fw, 1e-6), 1e-4);
        EXPECT_LT(rel_err(l.grad_t[i], ft, 1e-6), 1e-4);
    }
}

TEST(Distortion, ZeroIffEqualDepths) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::pair<double, double>> px;
        const double t = rng.uniform(1, 4);
        for (int i = 0; i < 5; ++i) px.push_back({rng.uniform(0.05, 0.3), t});
        EXPECT_EQ(distortion_loss(contribution_bundle({px})).value, 0.0);
        px[rng.below(5)].second += rng.uniform(1e-3, 1.0);
        EXPECT_GT(distortion_loss(contribution_bundle({px})).value, 0.0);
    }
}

TEST(NormalLoss, FrontoParallelPlaneIsZero) {
    const int w = 12, h = 10;
    FrameBundle b = surface_bundle(w, h, [](double, double) { return 0.0; });
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) b.depth[static_cast<std::size_t>(y) * w + x] = 3.0 / b.camera.pixel_ray(x, y).dir.z();
    EXPECT_LT(normal_loss(b).value, 1e-3);
    EXPECT_NEAR(normal_loss(b).value, 0.0, 1e-12);
}

TEST(NormalLoss, OrthogonalNormalsGiveOnePerPixel) {
    const int w = 8, h = 7;
    FrameBundle b = surface_bundle(w, h, [](double, double) { return 0.0; });
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            b.depth[p] = 3.0 / b.camera.pixel_ray(x, y).dir.z();
            b.normal[p] = Vec3(1, 0, 0);
        }
    const double interior = (w - 2) * (h - 2);
    EXPECT_NEAR(normal_loss(b).value, interior / (w * h), 1e-12);
}

TEST(NormalLoss, GradientsMatchFiniteDifferences) {
    Rng rng(8);
    const int w = 7, h = 6;
    FrameBundle b = surface_bundle(
        w, h, [](double x, double y) { return 3.0 + 0.2 * std::sin(0.7 * x) + 0.15 * std::cos(0.5 * y); }, 0.5, &rng);
    const std::vector<double> weight = b.alpha;
    const NormalLoss l = normal_loss(b);
    EXPECT_NEAR(l.value, normal_oracle(b, weight), 1e-12);
    auto f = [&] { return normal_oracle(b, weight); };
    for (std::size_t p = 0; p < b.pixel_count(); ++p) {
        for (int k = 0; k < 3; ++k) {
            const double fd = central_diff(f, b.normal[p][k], 1e-6);
            EXPECT_LT(rel_err(l.grad_normal[p][k], fd, 1e-6), 1e-4);
        }
        EXPECT_LT(rel_err(l.grad_depth[p], central_diff(f, b.depth[p], 1e-6), 1e-6), 1e-4) << p;
        EXPECT_LT(rel_err(l.grad_alpha[p], central_diff(f, b.alpha[p], 1e-7), 1e-6), 1e-4) << p;
    }
}

TEST(OpacityReg, Values) {
    const std::vector<double> zeros(5, -1e9), ones(5, 1e9);
    EXPECT_NEAR(opacity_reg(zeros).value, 0.0, 1e-12);
    EXPECT_NEAR(opacity_reg(ones).value, 1.0, 1e-12);
    Rng rng(2);
    std::vector<double> logits(17);
    double mean = 0.0;
    for (double& v : logits) {
        v = rng.uniform(-4, 4);
        mean += 1.0 / (1.0 + std::exp(-v));
    }
    mean /= 17.0;
    OpacityLoss l = opacity_reg(logits);
    EXPECT_NEAR(l.value, mean, 1e-12);
    EXPECT_NEAR(opacity_reg(logits, Reduction::sum).value, mean * 17.0, 1e-11);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double fd = central_diff([&] { return opacity_reg(logits).value; }, logits[i], 1e-6);
        EXPECT_LT(rel_err(l.grad_logit[i], fd, 1e-8), 1e-4);
    }
}

TEST(Bce, Values) {
    EXPECT_NEAR(bce_loss(std::vector<double>(4, 0.0)).value, std::numbers::ln2, 1e-12);
    EXPECT_NEAR(bce_loss(std::vector<double>{logit(0.9)}).value, 0.325083, 1e-6);
    const double s = 1e-6;
    const double at_clamp = -(s * std::log(s) + (1 - s) * std::log(1 - s));
    EXPECT_NEAR(at_clamp, 1.48e-5, 1e-7);
    EXPECT_NEAR(bce_loss(std::vector<double>{-50.0}).value, at_clamp, 1e-12);
    EXPECT_NEAR(bce_loss(std::vector<double>{50.0}).value, at_clamp, 1e-12);
    EXPECT_NEAR(bce_loss(std::vector<double>(3, 0.0), Reduction::sum).value, 3 * std::numbers::ln2, 1e-12);
}

TEST(Bce, MaximumAtHalfAndGradientSign) {
    double prev = -1.0;
    for (int i = 1; i <= 99; ++i) {
        const double sig = i / 100.0;
        const OpacityLoss l = bce_loss(std::vector<double>{logit(sig)});
        if (i <= 50) {
            EXPECT_GT(l.value, prev) << sig;
        } else {
            EXPECT_LT(l.value, prev) << sig;
        }
        prev = l.value;
        if (i < 50) {
            EXPECT_GT(l.grad_logit[0], 0.0);
        } else if (i > 50) {
            EXPECT_LT(l.grad_logit[0], 0.0);
        } else {
            EXPECT_NEAR(l.grad_logit[0], 0.0, 1e-15);
        }
    }
}

TEST(Bce, GradientMatchesFiniteDifferences) {
    Rng rng(6);
    std::vector<double> logits(9);
    for (double& v : logits) v = rng.uniform(-6, 6);
    const OpacityLoss l = bce_loss(logits);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double fd = central_diff([&] { return bce_loss(logits).value; }, logits[i], 1e-6);
        EXPECT_LT(rel_err(l.grad_logit[i], fd, 1e-8), 1e-4);
    }
}

TEST(TotalLoss, GatingAndSums) {
    LossTerms t;
    t.rgb = 0.3;
    t.dist = 0.02;
    t.normal = 0.1;
    t.opacity = 0.4;
    t.bce = 0.6;
    LossWeights none;
    none.lambda_dist = none.lambda_normal = none.lambda_opacity = none.lambda_bce = 0.0;
    for (Phase p : {Phase::warmup, Phase::mcmc, Phase::bce}) EXPECT_EQ(total_loss(t, none, p).total, 0.3);

    LossWeights w;
    EXPECT_EQ(w.lambda_opacity, 0.01);
    EXPECT_EQ(w.lambda_bce, 0.01);
    const double base = 0.3 + w.lambda_dist * 0.02 + w.lambda_normal * 0.1;
    EXPECT_EQ(total_loss(t, w, Phase::warmup).total, base);
    EXPECT_EQ(total_loss(t, w, Phase::mcmc).total, base + 0.01 * 0.4);
    EXPECT_EQ(total_loss(t, w, Phase::mcmc).weights.bce, 0.0);
    EXPECT_EQ(total_loss(t, w, Phase::bce).total, base + 0.01 * 0.4 + 0.01 * 0.6);
}

TEST(TotalLoss, RejectsBadWeights) {
    LossWeights w;
    w.lambda_bce = -1;
    EXPECT_THROW(w.validate(), Error);
    w = LossWeights{};
    w.lambda_ssim = 1.5;
    EXPECT_THROW(w.validate(), Error);
}
