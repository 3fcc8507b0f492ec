#include "hsplat/renderer.hpp"

#include "hsplat/sh.hpp"

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <numeric>
#include <thread>

namespace hsplat {

void RenderConfig::validate() const {
    if (tile_size < 1) throw Error("render config: tile size must be at least 1");
    if (!(t_floor > 0.0 && t_floor < 1.0)) throw Error("render config: transmittance floor must lie in (0, 1)");
    if (!(kappa > 0.0)) throw Error("render config: support multiplier must be positive");
    if (threads < 1) throw Error("render config: thread count must be at least 1");
}

std::uint64_t position_hash(const Vec3& p) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    std::uint64_t h = 0;
    for (int a = 0; a < 3; ++a) h = mix(h ^ std::bit_cast<std::uint64_t>(p[a] + 0.0));
    return h;
}

std::vector<PreparedSurfel> prepare_surfels(const SurfelCloud& cloud, const Camera& camera, const RenderConfig& cfg) {
    std::vector<PreparedSurfel> out(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        PreparedSurfel& ps = out[i];
        ps.frame = splat_frame(cloud.rotation[i]);
        ps.scale = cloud.scale(i);
        ps.opacity = cloud.opacity(i);
        ps.depth = camera.to_camera(cloud.position[i]).z();
        ps.key = position_hash(cloud.position[i]);
        const auto rect = project_aabb(cloud.position[i], ps.frame, ps.scale, camera, cfg.kappa);
        ps.visible = rect.has_value();
        if (rect) ps.rect = *rect;
    }
    return out;
}

std::vector<std::uint32_t> depth_order(const std::vector<PreparedSurfel>& prepared) {
    std::vector<std::uint32_t> order;
    for (std::uint32_t i = 0; i < prepared.size(); ++i)
        if (prepared[i].visible) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const PreparedSurfel& pa = prepared[a];
        const PreparedSurfel& pb = prepared[b];
        if (pa.depth != pb.depth) return pa.depth < pb.depth;
        if (pa.key != pb.key) return pa.key < pb.key;
        return a < b;
    });
    return order;
}

namespace {

// Inclusive pixel index range whose centers fall inside [lo, hi] widened by a
// half-pixel margin, clamped to [0, size - 1].
bool pixel_range(double lo, double hi, int size, int& first, int& last) {
    constexpr double margin = 0.5;
    const double a = std::clamp(std::ceil(lo - margin - 0.5), -1.0, static_cast<double>(size));
    const double b = std::clamp(std::floor(hi + margin - 0.5), -1.0, static_cast<double>(size));
    first = std::max(0, static_cast<int>(a));
    last = std::min(size - 1, static_cast<int>(b));
    return first <= last;
}

}  // namespace

TileBins bin_and_sort(const std::vector<PreparedSurfel>& prepared, const Camera& camera, const RenderConfig& cfg) {
    TileBins bins;
    bins.tile_size = cfg.tile_size;
    bins.tiles_x = (camera.width + cfg.tile_size - 1) / cfg.tile_size;
    bins.tiles_y = (camera.height + cfg.tile_size - 1) / cfg.tile_size;
    bins.lists.assign(static_cast<std::size_t>(bins.tiles_x) * bins.tiles_y, {});
    for (std::uint32_t idx : depth_order(prepared)) {
        const ScreenRect& r = prepared[idx].rect;
        int x0, x1, y0, y1;
        if (!pixel_range(r.x_min, r.x_max, camera.width, x0, x1)) continue;
        if (!pixel_range(r.y_min, r.y_max, camera.height, y0, y1)) continue;
        for (int ty = y0 / cfg.tile_size; ty <= y1 / cfg.tile_size; ++ty)
            for (int tx = x0 / cfg.tile_size; tx <= x1 / cfg.tile_size; ++tx)
                bins.lists[static_cast<std::size_t>(ty) * bins.tiles_x + tx].push_back(idx);
    }
    return bins;
}

TileBins bin_and_sort(const SurfelCloud& cloud, const Camera& camera, const RenderConfig& cfg) {
    return bin_and_sort(prepare_surfels(cloud, camera, cfg), camera, cfg);
}

namespace {

int feature_width(const SurfelCloud& cloud, const HashGrid& grid, const RenderConfig& cfg) {
    return cfg.color == ColorMode::direct ? 3 : cloud.latent_dim + grid.output_dim();
}

void composite_into(const Ray& ray, std::span<const std::uint32_t> sorted, const SurfelCloud& cloud,
                    const std::vector<PreparedSurfel>& prepared, const HashGrid& grid, const RenderConfig& cfg,
                    PixelComposite& out) {
    const int dg = cloud.latent_dim;
    const int dh = cfg.color == ColorMode::hybrid ? grid.output_dim() : 0;
    out.feature.assign(feature_width(cloud, grid, cfg), 0.0);
    out.contributions.clear();
    out.hash.clear();
    out.depth = 0.0;
    out.normal.setZero();
    out.skipped = 0;
    const bool use_latent = cfg.decompose != DecomposeMode::hash_only;
    const bool use_hash = cfg.decompose != DecomposeMode::surfel_only;
    std::vector<double> h(dh);
    double trans = 1.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        const std::uint32_t idx = sorted[k];
        const PreparedSurfel& ps = prepared[idx];
        const auto hit =
            intersect(ray, cloud.position[idx], ps.frame, ps.scale, cfg.kappa, cfg.kernel, cloud.beta[idx]);
        if (!hit) continue;
        const double alpha = ps.opacity * hit->g;
        if (!(alpha > 0.0)) continue;
        const double w = trans * alpha;
        Contribution c;
        c.index = idx;
        c.transmittance = trans;
        c.alpha = alpha;
        c.weight = w;
        c.t = hit->t;
        c.r2 = hit->r2;
        c.g = hit->g;
        c.uv = hit->uv;
        c.x = hit->x;
        c.facing = ps.frame.normal.dot(ray.dir) > 0.0 ? -1.0 : 1.0;
        const double* latent = cloud.latent_of(idx);
        if (cfg.color == ColorMode::direct) {
            for (int j = 0; j < 3; ++j) out.feature[j] += w * sigmoid(latent[j]);
        } else {
            if (use_latent)
                for (int j = 0; j < dg; ++j) out.feature[j] += w * latent[j];
            if (dh > 0) {
                grid.sample(hit->x, h);
                if (use_hash)
                    for (int j = 0; j < dh; ++j) out.feature[dg + j] += w * h[j];
                out.hash.insert(out.hash.end(), h.begin(), h.end());
            }
        }
        out.depth += w * hit->t;
        out.normal += w * c.facing * ps.frame.normal;
        out.contributions.push_back(c);
        trans *= 1.0 - alpha;
        if (trans < cfg.t_floor) {
            out.skipped = static_cast<int>(sorted.size() - k - 1);
            break;
        }
    }
    out.alpha = 1.0 - trans;
}

}  // namespace

PixelComposite composite_pixel(const Ray& ray, std::span<const std::uint32_t> sorted, const SurfelCloud& cloud,
                               const std::vector<PreparedSurfel>& prepared, const HashGrid& grid,
                               const RenderConfig& cfg) {
    PixelComposite out;
    composite_into(ray, sorted, cloud, prepared, grid, cfg, out);
    return out;
}

FrameBundle render(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder, const Camera& camera,
                   const RenderConfig& cfg) {
    cfg.validate();
    camera.validate();
    cloud.check_consistent();
    const int fdim = feature_width(cloud, grid, cfg);
    if (cfg.color == ColorMode::hybrid && decoder.input_dim() != fdim + kShDim) {
        throw Error("render: decoder input width does not match latent + hash + SH width");
    }
    if (cfg.color == ColorMode::direct && cloud.latent_dim < 3) throw Error("render: direct color needs 3 latents");

    FrameBundle b;
    b.width = camera.width;
    b.height = camera.height;
    b.camera = camera;
    b.config = cfg;
    b.cloud_size = cloud.size();
    b.feature_dim = fdim;
    b.hash_dim = cfg.color == ColorMode::hybrid ? grid.output_dim() : 0;
    const std::size_t npix = b.pixel_count();
    b.rgb = Image(b.width, b.height, 3);
    b.alpha.assign(npix, 0.0);
    b.depth.assign(npix, 0.0);
    b.normal.assign(npix, Vec3::Zero());
    b.blends.assign(npix, 0);
    b.skipped.assign(npix, 0);
    b.features.assign(npix * fdim, 0.0);

    const auto prepared = prepare_surfels(cloud, camera, cfg);
    const TileBins bins = bin_and_sort(prepared, camera, cfg);

    std::vector<std::vector<Contribution>> pixel_contribs(cfg.save_for_backward ? npix : 0);
    std::vector<std::vector<double>> pixel_hash(cfg.save_for_backward ? npix : 0);

    auto run_tiles = [&](std::size_t first, std::size_t stride) {
        PixelComposite pc;
        for (std::size_t tile = first; tile < bins.lists.size(); tile += stride) {
            const int tx = static_cast<int>(tile % bins.tiles_x);
            const int ty = static_cast<int>(tile / bins.tiles_x);
            const auto& list = bins.lists[tile];
            for (int py = ty * cfg.tile_size; py < std::min(b.height, (ty + 1) * cfg.tile_size); ++py) {
                for (int px = tx * cfg.tile_size; px < std::min(b.width, (tx + 1) * cfg.tile_size); ++px) {
                    const std::size_t p = static_cast<std::size_t>(py) * b.width + px;
                    composite_into(camera.pixel_ray(px, py), list, cloud, prepared, grid, cfg, pc);
                    std::copy(pc.feature.begin(), pc.feature.end(), b.features.begin() + p * fdim);
                    b.alpha[p] = pc.alpha;
                    b.depth[p] = pc.depth;
                    b.normal[p] = pc.normal;
                    b.blends[p] = static_cast<int>(pc.contributions.size());
                    b.skipped[p] = pc.skipped;
                    if (cfg.save_for_backward) {
                        pixel_contribs[p] = pc.contributions;
                        pixel_hash[p] = pc.hash;
                    }
                }
            }
        }
    };
    if (cfg.threads > 1) {
        std::vector<std::thread> workers;
        for (int t = 0; t < cfg.threads; ++t) workers.emplace_back(run_tiles, t, cfg.threads);
        for (auto& w : workers) w.join();
    } else {
        run_tiles(0, 1);
    }

    if (cfg.save_for_backward) {
        b.offsets.assign(npix + 1, 0);
        for (std::size_t p = 0; p < npix; ++p) b.offsets[p + 1] = b.offsets[p] + pixel_contribs[p].size();
        b.contributions.reserve(b.offsets[npix]);
        b.contribution_hash.reserve(b.offsets[npix] * b.hash_dim);
        for (std::size_t p = 0; p < npix; ++p) {
            b.contributions.insert(b.contributions.end(), pixel_contribs[p].begin(), pixel_contribs[p].end());
            b.contribution_hash.insert(b.contribution_hash.end(), pixel_hash[p].begin(), pixel_hash[p].end());
        }
    }

    const Vec3& bg = cfg.background;
    if (cfg.color == ColorMode::direct) {
        for (std::size_t p = 0; p < npix; ++p)
            for (int c = 0; c < 3; ++c) b.rgb.data[p * 3 + c] = b.features[p * 3 + c] + bg[c] * (1.0 - b.alpha[p]);
        return b;
    }

    for (std::uint32_t p = 0; p < npix; ++p)
        if (b.alpha[p] > 0.0) b.decoded_pixels.push_back(p);
    for (std::size_t p = 0; p < npix; ++p)
        for (int c = 0; c < 3; ++c) b.rgb.data[p * 3 + c] = bg[c];
    if (b.decoded_pixels.empty()) return b;
    Matrix input(fdim + kShDim, static_cast<Eigen::Index>(b.decoded_pixels.size()));
    for (Eigen::Index j = 0; j < input.cols(); ++j) {
        const std::uint32_t p = b.decoded_pixels[j];
        for (int k = 0; k < fdim; ++k) input(k, j) = b.features[p * fdim + k];
        const auto sh = sh_encode(camera.pixel_ray(static_cast<int>(p % b.width), static_cast<int>(p / b.width)).dir);
        for (int k = 0; k < kShDim; ++k) input(fdim + k, j) = sh[k];
    }
    b.decoded = decoder.forward(input, cfg.save_for_backward ? &b.decoder_cache : nullptr);
    for (Eigen::Index j = 0; j < input.cols(); ++j) {
        const std::uint32_t p = b.decoded_pixels[j];
        const double a = b.alpha[p];
        for (int c = 0; c < 3; ++c) b.rgb.data[p * 3 + c] = b.decoded(c, j) * a + bg[c] * (1.0 - a);
    }
    return b;
}

FrameBundle render_decomposed(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                              const Camera& camera, RenderConfig cfg, DecomposeMode mode) {
    cfg.decompose = mode;
    return render(cloud, grid, decoder, camera, cfg);
}

void SceneGrads::reset(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& dec) {
    const std::size_t n = cloud.size();
    position.assign(n, Vec3::Zero());
    rotation.assign(n, Vec4::Zero());
    log_scale.assign(n, Vec2::Zero());
    opacity_logit.assign(n, 0.0);
    beta.assign(n, 0.0);
    latent.assign(n * cloud.latent_dim, 0.0);
    table.assign(grid.table().size(), 0.0);
    decoder.assign(dec.parameter_count(), 0.0);
}

void render_backward(const FrameBundle& b, const PixelGrads& up, const SurfelCloud& cloud, const HashGrid& grid,
                     const Decoder& decoder, SceneGrads& grads) {
    assert(b.cloud_size == cloud.size());
    if (b.cloud_size != cloud.size()) throw Error("render_backward: bundle was rendered from a different cloud");
    if (b.offsets.empty()) throw Error("render_backward: bundle was rendered without saved contributions");
    const RenderConfig& cfg = b.config;
    const std::size_t npix = b.pixel_count();
    const int fdim = b.feature_dim;
    const int dg = cloud.latent_dim;
    const int dh = b.hash_dim;
    const Vec3& bg = cfg.background;
    const bool hybrid = cfg.color == ColorMode::hybrid;
    const bool use_latent = cfg.decompose != DecomposeMode::hash_only;
    const bool use_hash = cfg.decompose != DecomposeMode::surfel_only;
    const bool have_rgb = !up.rgb.data.empty();

    std::vector<double> g_alpha(npix, 0.0);
    std::vector<double> g_feat(npix * fdim, 0.0);
    if (!up.alpha.empty())
        for (std::size_t p = 0; p < npix; ++p) g_alpha[p] = up.alpha[p];

    if (have_rgb && hybrid && !b.decoded_pixels.empty()) {
        const Eigen::Index cols = static_cast<Eigen::Index>(b.decoded_pixels.size());
        Matrix g_out(3, cols);
        for (Eigen::Index j = 0; j < cols; ++j) {
            const std::uint32_t p = b.decoded_pixels[j];
            for (int c = 0; c < 3; ++c) {
                const double g = up.rgb.data[p * 3 + c];
                g_out(c, j) = g * b.alpha[p];
                g_alpha[p] += g * (b.decoded(c, j) - bg[c]);
            }
        }
        const Matrix g_in = decoder.backward(b.decoder_cache, g_out, grads.decoder);
        for (Eigen::Index j = 0; j < cols; ++j) {
            const std::uint32_t p = b.decoded_pixels[j];
            for (int k = 0; k < fdim; ++k) g_feat[p * fdim + k] = g_in(k, j);
        }
    } else if (have_rgb && !hybrid) {
        for (std::size_t p = 0; p < npix; ++p) {
            for (int c = 0; c < 3; ++c) {
                const double g = up.rgb.data[p * 3 + c];
                g_feat[p * 3 + c] = g;
                g_alpha[p] -= g * bg[c];
            }
        }
    }

    std::vector<double> feat(fdim);
    std::vector<double> gf(fdim);
    for (std::size_t p = 0; p < npix; ++p) {
        const auto list = b.contributions_of(p);
        if (list.empty()) continue;
        const double* gF = g_feat.data() + p * fdim;
        const double g_depth = up.depth.empty() ? 0.0 : up.depth[p];
        const Vec3 g_normal = up.normal.empty() ? Vec3::Zero() : up.normal[p];
        const Ray ray = b.camera.pixel_ray(static_cast<int>(p % b.width), static_cast<int>(p / b.width));
        double suffix = -g_alpha[p];  // dL/dT of everything behind the current contribution
        for (std::size_t k = list.size(); k-- > 0;) {
            const std::size_t ci = b.offsets[p] + k;
            const Contribution& c = list[k];
            const std::uint32_t idx = c.index;
            const double* latent = cloud.latent_of(idx);
            const Frame frame = splat_frame(cloud.rotation[idx]);
            const Vec3 n_facing = c.facing * frame.normal;

            if (hybrid) {
                for (int j = 0; j < dg; ++j) feat[j] = use_latent ? latent[j] : 0.0;
                for (int j = 0; j < dh; ++j) feat[dg + j] = use_hash ? b.contribution_hash[ci * dh + j] : 0.0;
            } else {
                for (int j = 0; j < 3; ++j) feat[j] = sigmoid(latent[j]);
            }
            double g_w = g_depth * c.t + g_normal.dot(n_facing);
            for (int j = 0; j < fdim; ++j) g_w += gF[j] * feat[j];
            if (!up.weight.empty()) g_w += up.weight[ci];

            const double g_a = c.transmittance * (g_w - suffix);
            suffix = g_w * c.alpha + (1.0 - c.alpha) * suffix;

            for (int j = 0; j < fdim; ++j) gf[j] = c.weight * gF[j];
            double* g_lat = grads.latent.data() + static_cast<std::size_t>(idx) * dg;
            Vec3 g_x = Vec3::Zero();
            if (hybrid) {
                if (use_latent)
                    for (int j = 0; j < dg; ++j) g_lat[j] += gf[j];
                if (use_hash && dh > 0) {
                    g_x = grid.sample_backward(c.x, std::span<const double>(gf.data() + dg, dh), grads.table);
                }
            } else {
                for (int j = 0; j < 3; ++j) g_lat[j] += gf[j] * feat[j] * (1.0 - feat[j]);
            }
            double g_t = c.weight * g_depth + g_x.dot(ray.dir);
            if (!up.t.empty()) g_t += up.t[ci];
            const Vec3 g_n = c.weight * c.facing * g_normal;

            const double opacity = cloud.opacity(idx);
            grads.opacity_logit[idx] += g_a * c.g * opacity * (1.0 - opacity);
            const double g_g = g_a * opacity;
            const KernelEval ke = kernel_eval(cfg.kernel, c.r2, cloud.beta[idx], cfg.kappa);
            const double g_r2 = g_g * ke.d_r2;
            grads.beta[idx] += g_g * ke.d_beta;

            const Vec2 s = cloud.scale(idx);
            const double nu = c.uv[0] / (cfg.kappa * s[0]);
            const double nv = c.uv[1] / (cfg.kappa * s[1]);
            const double g_u = g_r2 * 2.0 * nu / (cfg.kappa * s[0]);
            const double g_v = g_r2 * 2.0 * nv / (cfg.kappa * s[1]);
            grads.log_scale[idx] += Vec2(-2.0 * g_r2 * nu * nu, -2.0 * g_r2 * nv * nv);

            Intersection hit;
            hit.t = c.t;
            hit.x = c.x;
            hit.uv = c.uv;
            const IntersectGrad ig = intersect_backward(ray, cloud.position[idx], frame, hit, g_u, g_v, g_t, g_n);
            grads.position[idx] += ig.position;
            grads.rotation[idx] += splat_frame_backward(cloud.rotation[idx], ig.tu, ig.tv, ig.normal);
        }
    }
}

BlendStats blend_stats(const FrameBundle& bundle) {
    BlendStats s;
    if (bundle.blends.empty()) return s;
    std::vector<int> sorted = bundle.blends;
    std::sort(sorted.begin(), sorted.end());
    s.total = std::accumulate(sorted.begin(), sorted.end(), std::int64_t{0});
    s.mean = static_cast<double>(s.total) / static_cast<double>(sorted.size());
    auto rank = [&](double q) {
        const std::size_t k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
        return static_cast<double>(sorted[std::max<std::size_t>(k, 1) - 1]);
    };
    s.p50 = rank(0.5);
    s.p95 = rank(0.95);
    s.skipped_by_floor = std::accumulate(bundle.skipped.begin(), bundle.skipped.end(), std::int64_t{0});
    return s;
}

}  // namespace hsplat
