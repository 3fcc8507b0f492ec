#include "hsplat/losses.hpp"

#include <algorithm>
#include <numeric>

namespace hsplat {

std::string to_string(Phase p) {
    switch (p) {
        case Phase::warmup: return "warmup";
        case Phase::mcmc: return "mcmc";
        case Phase::bce: return "bce";
    }
    return "unknown";
}

namespace {

std::vector<double> gaussian_taps(const SsimConfig& cfg) {
    std::vector<double> taps(cfg.window);
    const int half = cfg.window / 2;
    double sum = 0.0;
    for (int i = 0; i < cfg.window; ++i) {
        taps[i] = std::exp(-0.5 * (i - half) * (i - half) / (cfg.sigma * cfg.sigma));
        sum += taps[i];
    }
    for (double& t : taps) t /= sum;
    return taps;
}

// Separable zero-padded "same" Gaussian filter of one w x h plane. The
// operator is symmetric, so it is also its own adjoint.
std::vector<double> blur(const std::vector<double>& in, int w, int h, const std::vector<double>& taps) {
    const int half = static_cast<int>(taps.size()) / 2;
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k) {
                const int xx = x + k;
                if (xx >= 0 && xx < w) acc += taps[k + half] * in[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k) {
                const int yy = y + k;
                if (yy >= 0 && yy < h) acc += taps[k + half] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    return out;
}

std::vector<double> plane(const Image& img, int c) {
    std::vector<double> p(img.pixel_count());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = img.data[i * img.channels + c];
    return p;
}

struct SsimPlane {
    std::vector<double> map;
    std::vector<double> grad;  // d(sum of map)/d(a)
};

SsimPlane ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int w, int h,
                     const std::vector<double>& taps, const SsimConfig& cfg, bool want_grad) {
    const std::size_t n = a.size();
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = blur(a, w, h, taps);
    const auto mu_b = blur(b, w, h, taps);
    const auto e_aa = blur(aa, w, h, taps);
    const auto e_bb = blur(bb, w, h, taps);
    const auto e_ab = blur(ab, w, h, taps);
    SsimPlane out;
    out.map.resize(n);
    std::vector<double> d_mu, d_eaa, d_eab;
    if (want_grad) {
        d_mu.resize(n);
        d_eaa.resize(n);
        d_eab.resize(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double saa = e_aa[i] - ma * ma;
        const double sbb = e_bb[i] - mb * mb;
        const double sab = e_ab[i] - ma * mb;
        const double a1 = 2.0 * (ma * mb) + cfg.c1;
        const double a2 = 2.0 * sab + cfg.c2;
        const double b1 = ma * ma + mb * mb + cfg.c1;
        const double b2 = saa + sbb + cfg.c2;
        const double s = (a1 * a2) / (b1 * b2);
        out.map[i] = s;
        if (want_grad) {
            const double ds_dmu = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
            const double ds_dsaa = -s / b2;
            const double ds_dsab = 2.0 * a1 / (b1 * b2);
            d_mu[i] = ds_dmu - 2.0 * ma * ds_dsaa - mb * ds_dsab;
            d_eaa[i] = ds_dsaa;
            d_eab[i] = ds_dsab;
        }
    }
    if (want_grad) {
        const auto g_mu = blur(d_mu, w, h, taps);
        const auto g_aa = blur(d_eaa, w, h, taps);
        const auto g_ab = blur(d_eab, w, h, taps);
        out.grad.resize(n);
        for (std::size_t i = 0; i < n; ++i) out.grad[i] = g_mu[i] + 2.0 * a[i] * g_aa[i] + b[i] * g_ab[i];
    }
    return out;
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw Error(std::string(what) + ": image dimensions differ (" + std::to_string(a.width) + "x" +
                    std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) +
                    "x" + std::to_string(b.height) + "x" + std::to_string(b.channels) + ")");
    }
}

}  // namespace

std::vector<double> ssim_map(const Image& a, const Image& b, const SsimConfig& cfg) {
    require_same_shape(a, b, "ssim");
    const auto taps = gaussian_taps(cfg);
    std::vector<double> out(a.data.size());
    for (int c = 0; c < a.channels; ++c) {
        const SsimPlane sp = ssim_plane(plane(a, c), plane(b, c), a.width, a.height, taps, cfg, false);
        for (std::size_t i = 0; i < sp.map.size(); ++i) out[i * a.channels + c] = sp.map[i];
    }
    return out;
}

double ssim(const Image& a, const Image& b, std::vector<double>* grad_a, const SsimConfig& cfg) {
    require_same_shape(a, b, "ssim");
    if (a.data.empty()) throw Error("ssim: empty image");
    const auto taps = gaussian_taps(cfg);
    const double count = static_cast<double>(a.data.size());
    double total = 0.0;
    if (grad_a) grad_a->assign(a.data.size(), 0.0);
    for (int c = 0; c < a.channels; ++c) {
        const SsimPlane sp = ssim_plane(plane(a, c), plane(b, c), a.width, a.height, taps, cfg, grad_a != nullptr);
        for (std::size_t i = 0; i < sp.map.size(); ++i) {
            total += sp.map[i];
            if (grad_a) (*grad_a)[i * a.channels + c] = sp.grad[i] / count;
        }
    }
    return total / count;
}

ImageLoss rgb_loss(const Image& pred, const Image& gt, double lambda_ssim) {
    require_same_shape(pred, gt, "rgb_loss");
    ImageLoss out;
    out.grad = Image(pred.width, pred.height, pred.channels);
    const double count = static_cast<double>(pred.data.size());
    double l1 = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - gt.data[i];
        l1 += std::abs(d);
        out.grad.data[i] = (1.0 - lambda_ssim) * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / count;
    }
    out.l1 = l1 / count;
    std::vector<double> g_ssim;
    out.ssim = ssim(pred, gt, lambda_ssim != 0.0 ? &g_ssim : nullptr);
    if (lambda_ssim != 0.0)
        for (std::size_t i = 0; i < pred.data.size(); ++i) out.grad.data[i] -= lambda_ssim * g_ssim[i];
    out.value = (1.0 - lambda_ssim) * out.l1 + lambda_ssim * (1.0 - out.ssim);
    return out;
}

ContributionLoss distortion_loss(const FrameBundle& b) {
    ContributionLoss out;
    out.grad_weight.assign(b.contributions.size(), 0.0);
    out.grad_t.assign(b.contributions.size(), 0.0);
    const std::size_t npix = b.pixel_count();
    if (npix == 0) return out;
    const double inv = 1.0 / static_cast<double>(npix);
    std::vector<std::size_t> order;
    for (std::size_t p = 0; p < npix; ++p) {
        const std::size_t first = b.offsets[p], last = b.offsets[p + 1];
        if (last - first < 2) continue;
        order.resize(last - first);
        std::iota(order.begin(), order.end(), first);
        std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
            return b.contributions[i].t < b.contributions[j].t;
        });
        // before[k] = sum_{i<k} w_i (t_k - t_i), after[k] = sum_{i>k} w_i (t_i - t_k),
        // accumulated from depth gaps so equal depths give exactly zero.
        const std::size_t k = order.size();
        std::vector<double> before(k, 0.0), after(k, 0.0);
        double w_acc = 0.0;
        for (std::size_t j = 1; j < k; ++j) {
            w_acc += b.contributions[order[j - 1]].weight;
            const double gap = b.contributions[order[j]].t - b.contributions[order[j - 1]].t;
            before[j] = before[j - 1] + w_acc * gap;
        }
        w_acc = 0.0;
        for (std::size_t j = k - 1; j-- > 0;) {
            w_acc += b.contributions[order[j + 1]].weight;
            const double gap = b.contributions[order[j + 1]].t - b.contributions[order[j]].t;
            after[j] = after[j + 1] + w_acc * gap;
        }
        double w_before = 0.0, w_after = 0.0, value = 0.0;
        for (std::size_t j = 0; j < k; ++j) w_after += b.contributions[order[j]].weight;
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t i = order[j];
            const double w = b.contributions[i].weight;
            w_after -= w;
            value += 2.0 * w * before[j];
            out.grad_weight[i] = 2.0 * (before[j] + after[j]) * inv;
            out.grad_t[i] = 2.0 * w * (w_before - w_after) * inv;
            w_before += w;
        }
        out.value += value * inv;
    }
    return out;
}

NormalLoss normal_loss(const FrameBundle& b, double min_alpha) {
    NormalLoss out;
    const int w = b.width, h = b.height;
    const std::size_t npix = b.pixel_count();
    out.grad_normal.assign(npix, Vec3::Zero());
    out.grad_depth.assign(npix, 0.0);
    out.grad_alpha.assign(npix, 0.0);
    if (npix == 0) return out;
    const double inv = 1.0 / static_cast<double>(npix);
    std::vector<Vec3> dirs(npix), points(npix);
    std::vector<char> valid(npix, 0);
    for (std::size_t p = 0; p < npix; ++p) {
        const Ray r = b.camera.pixel_ray(static_cast<int>(p % w), static_cast<int>(p / w));
        dirs[p] = r.dir;
        if (b.alpha[p] > min_alpha) {
            valid[p] = 1;
            points[p] = r.origin + (b.depth[p] / b.alpha[p]) * r.dir;
        }
    }
    auto at = [w](int x, int y) { return static_cast<std::size_t>(y) * w + x; };
    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            const std::size_t p = at(x, y), l = at(x - 1, y), r = at(x + 1, y), u = at(x, y - 1), d = at(x, y + 1);
            if (!(valid[p] && valid[l] && valid[r] && valid[u] && valid[d])) continue;
            const Vec3 dx = points[r] - points[l];
            const Vec3 dy = points[d] - points[u];
            const Vec3 c = dx.cross(dy);
            const double len = c.norm();
            if (len < 1e-12) continue;
            const Vec3 c_hat = c / len;
            const double sign = c_hat.dot(dirs[p]) > 0.0 ? -1.0 : 1.0;
            const Vec3 n_depth = sign * c_hat;
            const double a = b.alpha[p];
            out.value += a * (1.0 - b.normal[p].dot(n_depth)) * inv;
            out.grad_normal[p] += -a * inv * n_depth;
            // Back through orientation, normalization, cross product, points.
            const Vec3 g_hat = sign * (-a * inv * b.normal[p]);
            const Vec3 g_c = (g_hat - c_hat * c_hat.dot(g_hat)) / len;
            const Vec3 g_dx = dy.cross(g_c);
            const Vec3 g_dy = g_c.cross(dx);
            auto push = [&](std::size_t q, const Vec3& g_point) {
                const double g_along = g_point.dot(dirs[q]);
                out.grad_depth[q] += g_along / b.alpha[q];
                out.grad_alpha[q] += -g_along * b.depth[q] / (b.alpha[q] * b.alpha[q]);
            };
            push(r, g_dx);
            push(l, -g_dx);
            push(d, g_dy);
            push(u, -g_dy);
        }
    }
    return out;
}

OpacityLoss opacity_reg(std::span<const double> logits, Reduction reduction) {
    OpacityLoss out;
    out.grad_logit.assign(logits.size(), 0.0);
    if (logits.empty()) return out;
    const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(logits.size()) : 1.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double s = sigmoid(logits[i]);
        out.value += std::abs(s) * scale;
        out.grad_logit[i] = s * (1.0 - s) * scale;
    }
    return out;
}

OpacityLoss bce_loss(std::span<const double> logits, Reduction reduction) {
    OpacityLoss out;
    out.grad_logit.assign(logits.size(), 0.0);
    if (logits.empty()) return out;
    const double scale = reduction == Reduction::mean ? 1.0 / static_cast<double>(logits.size()) : 1.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double raw = sigmoid(logits[i]);
        const double s = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
        out.value += -(s * std::log(s) + (1.0 - s) * std::log(1.0 - s)) * scale;
        out.grad_logit[i] = -std::log(s / (1.0 - s)) * raw * (1.0 - raw) * scale;
    }
    return out;
}

void LossWeights::validate() const {
    for (double v : {lambda_ssim, lambda_dist, lambda_normal, lambda_opacity, lambda_bce}) {
        if (!std::isfinite(v) || v < 0.0) throw Error("loss weights must be finite and non-negative");
    }
    if (lambda_ssim > 1.0) throw Error("lambda_ssim must lie in [0, 1]");
}

GatedWeights gate_weights(const LossWeights& w, Phase phase) {
    GatedWeights g;
    g.dist = w.lambda_dist;
    g.normal = w.lambda_normal;
    g.opacity = phase == Phase::warmup ? 0.0 : w.lambda_opacity;
    g.bce = phase == Phase::bce ? w.lambda_bce : 0.0;
    return g;
}

LossReport total_loss(const LossTerms& terms, const LossWeights& weights, Phase phase) {
    LossReport r;
    r.terms = terms;
    r.weights = gate_weights(weights, phase);
    r.total = terms.rgb + r.weights.dist * terms.dist + r.weights.normal * terms.normal +
              r.weights.opacity * terms.opacity + r.weights.bce * terms.bce;
    return r;
}

}  // namespace hsplat
