#include "hsplat/train.hpp"

#include "hsplat/sh.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>

namespace hsplat {

using nlohmann::json;

// ---------------------------------------------------------------- configuration

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.total_iters = 2000;
    c.warmup_iters = 667;
    c.bce_start_iter = 1667;
    c.mcmc_cap = 256;
    c.hash = HashGridConfig{1, 128, 16, 16, 20};
    c.decoder_width = 64;
    c.log_every = 50;
    return c;
}

std::int64_t TrainConfig::bce_start() const {
    if (!bce_enabled) return total_iters;
    return bce_start_iter >= 0 ? bce_start_iter : static_cast<std::int64_t>(0.8 * static_cast<double>(total_iters));
}

Phase TrainConfig::phase_at(std::int64_t iter) const {
    if (iter < warmup_iters) return Phase::warmup;
    if (iter < bce_start()) return Phase::mcmc;
    return Phase::bce;
}

KernelMode TrainConfig::hybrid_kernel() const { return kernel == "gaussian" ? KernelMode::gaussian : KernelMode::beta; }

void TrainConfig::validate() const {
    if (total_iters < 0 || warmup_iters < 0) throw Error("config: iteration counts must be non-negative");
    if (total_iters > 0) {
        if (warmup_iters > total_iters) throw Error("config: warmup_iters exceeds total_iters");
        if (bce_enabled && !(warmup_iters <= bce_start() && bce_start() <= total_iters))
            throw Error("config: need warmup_iters <= bce_start_iter <= total_iters");
    }
    if (kernel != "beta" && kernel != "gaussian") throw Error("config: kernel must be 'beta' or 'gaussian'");
    if (kernel == "beta" && !beta_enabled) throw Error("config: kernel=beta conflicts with beta_enabled=false");
    if (mcmc_cap < 1) throw Error("config: mcmc_cap must be positive");
    if (relocation_period < 1) throw Error("config: relocation_period must be positive");
    if (!(tangent_fraction >= 0.0 && tangent_fraction <= 1.0)) throw Error("config: tangent_fraction must lie in [0, 1]");
    if (!(dead_threshold >= 0.0 && dead_threshold < 1.0) || !(prune_threshold >= 0.0 && prune_threshold < 1.0))
        throw Error("config: opacity thresholds must lie in [0, 1)");
    if (!(noise_lr >= 0.0)) throw Error("config: noise_lr must be non-negative");
    if (!(opacity_init > 0.0 && opacity_init < 1.0)) throw Error("config: opacity_init must lie in (0, 1)");
    if (latent_dim < 3) throw Error("config: latent_dim must be at least 3 (warm-up colour lives there)");
    if (decoder_width < 1 || decoder_layers < 1) throw Error("config: decoder needs at least one hidden layer");
    if (hash.levels < 1 || hash.resolution < 1 || hash.feature_dim < 1 || hash.log2_table_size < 1 ||
        hash.log2_table_size > 30 || hash.min_resolution < 1)
        throw Error("config: invalid hash grid settings");
    if (!(kappa > 0.0)) throw Error("config: kappa must be positive");
    if (tile_size < 1 || threads < 1 || log_every < 1) throw Error("config: tile_size, threads, log_every must be positive");
    loss.validate();
    for (double r : {lr.position, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.beta, lr.latent, lr.table,
                     lr.decoder})
        if (!(r >= 0.0) || !std::isfinite(r)) throw Error("config: learning rates must be finite and non-negative");
}

namespace {

template <typename F>
void for_each_field(TrainConfig& c, F&& f) {
    f("", "total_iters", c.total_iters);
    f("", "warmup_iters", c.warmup_iters);
    f("", "bce_start_iter", c.bce_start_iter);
    f("", "bce_enabled", c.bce_enabled);
    f("", "mcmc_enabled", c.mcmc_enabled);
    f("", "beta_enabled", c.beta_enabled);
    f("", "kernel", c.kernel);
    f("", "mcmc_cap", c.mcmc_cap);
    f("", "relocation_period", c.relocation_period);
    f("", "dead_threshold", c.dead_threshold);
    f("", "prune_threshold", c.prune_threshold);
    f("", "noise_lr", c.noise_lr);
    f("", "tangent_fraction", c.tangent_fraction);
    f("", "gate_k", c.gate_k);
    f("", "gate_opacity", c.gate_opacity);
    f("", "beta_init", c.beta_init);
    f("", "opacity_init", c.opacity_init);
    f("", "hash_init", c.hash_init);
    f("", "latent_dim", c.latent_dim);
    f("", "decoder_width", c.decoder_width);
    f("", "decoder_layers", c.decoder_layers);
    f("", "kappa", c.kappa);
    f("", "tile_size", c.tile_size);
    f("", "t_floor", c.t_floor);
    f("", "threads", c.threads);
    f("", "seed", c.seed);
    f("", "log_every", c.log_every);
    f("loss", "lambda_ssim", c.loss.lambda_ssim);
    f("loss", "lambda_dist", c.loss.lambda_dist);
    f("loss", "lambda_normal", c.loss.lambda_normal);
    f("loss", "lambda_opacity", c.loss.lambda_opacity);
    f("loss", "lambda_bce", c.loss.lambda_bce);
    f("loss", "reduction", c.loss.reduction);
    f("lr", "position", c.lr.position);
    f("lr", "position_final", c.lr.position_final);
    f("lr", "rotation", c.lr.rotation);
    f("lr", "scale", c.lr.scale);
    f("lr", "opacity", c.lr.opacity);
    f("lr", "beta", c.lr.beta);
    f("lr", "latent", c.lr.latent);
    f("lr", "table", c.lr.table);
    f("lr", "decoder", c.lr.decoder);
    f("hash", "levels", c.hash.levels);
    f("hash", "resolution", c.hash.resolution);
    f("hash", "min_resolution", c.hash.min_resolution);
    f("hash", "log2_table_size", c.hash.log2_table_size);
    f("hash", "feature_dim", c.hash.feature_dim);
}

json& slot(json& root, const std::string& group) { return group.empty() ? root : root[group]; }

}  // namespace

RenderConfig render_config_for(const TrainConfig& cfg, Phase phase) {
    RenderConfig rc;
    rc.tile_size = cfg.tile_size;
    rc.t_floor = cfg.t_floor;
    rc.kappa = cfg.kappa;
    rc.threads = cfg.threads;
    rc.background = Vec3::Ones();
    if (phase == Phase::warmup) {
        rc.kernel = KernelMode::gaussian;
        rc.color = ColorMode::direct;
    } else {
        rc.kernel = cfg.hybrid_kernel();
        rc.color = ColorMode::hybrid;
    }
    return rc;
}

std::string config_to_json(const TrainConfig& cfg) {
    TrainConfig c = cfg;
    json j = json::object();
    for_each_field(c, [&](const std::string& group, const std::string& name, auto& value) {
        using T = std::decay_t<decltype(value)>;
        if constexpr (std::is_same_v<T, Reduction>)
            slot(j, group)[name] = value == Reduction::mean ? "mean" : "sum";
        else
            slot(j, group)[name] = value;
    });
    return j.dump(2);
}

TrainConfig config_from_json(const std::string& text, const TrainConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(std::string("config: malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw Error("config: top level must be an object");
    TrainConfig c = base;
    std::map<std::string, std::set<std::string>> known;
    for_each_field(c, [&](const std::string& group, const std::string& name, auto& value) {
        known[group].insert(name);
        const json* src = &j;
        if (!group.empty()) {
            if (!j.contains(group)) return;
            src = &j.at(group);
        }
        if (!src->is_object() || !src->contains(name)) return;
        const json& v = src->at(name);
        using T = std::decay_t<decltype(value)>;
        try {
            if constexpr (std::is_same_v<T, Reduction>) {
                const std::string s = v.get<std::string>();
                if (s != "mean" && s != "sum") throw Error("config: " + name + " must be 'mean' or 'sum'");
                value = s == "mean" ? Reduction::mean : Reduction::sum;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw Error("config: '" + name + "' must be a boolean");
                value = v.get<bool>();
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw Error("config: '" + name + "' must be a string");
                value = v.get<std::string>();
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw Error("config: '" + name + "' must be an integer");
                value = v.get<T>();
            } else {
                if (!v.is_number()) throw Error("config: '" + name + "' must be a number");
                value = v.get<T>();
            }
        } catch (const json::exception& e) {
            throw Error("config: bad value for '" + name + "': " + e.what());
        }
    });
    for (const auto& [key, value] : j.items()) {
        if (known.count(key) && key != "") {
            if (!value.is_object()) throw Error("config: '" + key + "' must be an object");
            for (const auto& [sub, ignored] : value.items())
                if (!known[key].count(sub)) throw Error("config: unknown key '" + key + "." + sub + "'");
        } else if (!known[""].count(key)) {
            throw Error("config: unknown key '" + key + "'");
        }
    }
    return c;
}

// ---------------------------------------------------------------- initialization

Neighbors nearest_neighbors(const std::vector<Vec3>& points, int k) {
    Neighbors out;
    const std::size_t n = points.size();
    k = static_cast<int>(std::min<std::size_t>(k, n > 0 ? n - 1 : 0));
    out.k = k;
    out.index.assign(n * k, 0);
    out.dist2.assign(n * k, 0.0);
    if (k == 0) return out;
    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const double span = std::max((hi - lo).maxCoeff(), 1e-12);
    const double cell = span / std::max(1.0, std::cbrt(static_cast<double>(n)));
    auto coord = [&](const Vec3& p) {
        return std::array<std::int64_t, 3>{static_cast<std::int64_t>((p.x() - lo.x()) / cell),
                                           static_cast<std::int64_t>((p.y() - lo.y()) / cell),
                                           static_cast<std::int64_t>((p.z() - lo.z()) / cell)};
    };
    auto key = [](std::int64_t x, std::int64_t y, std::int64_t z) {
        return (static_cast<std::uint64_t>(x) * 73856093ull) ^ (static_cast<std::uint64_t>(y) * 19349663ull) ^
               (static_cast<std::uint64_t>(z) * 83492791ull);
    };
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> grid;
    std::int64_t max_c = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = coord(points[i]);
        max_c = std::max({max_c, c[0], c[1], c[2]});
        grid[key(c[0], c[1], c[2])].push_back(static_cast<std::uint32_t>(i));
    }
    std::vector<std::pair<double, std::uint32_t>> best;
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = coord(points[i]);
        best.clear();
        for (std::int64_t r = 0; r <= max_c + 1; ++r) {
            for (std::int64_t dx = -r; dx <= r; ++dx)
                for (std::int64_t dy = -r; dy <= r; ++dy)
                    for (std::int64_t dz = -r; dz <= r; ++dz) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
                        const std::int64_t x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
                        if (x < 0 || y < 0 || z < 0) continue;
                        auto it = grid.find(key(x, y, z));
                        if (it == grid.end()) continue;
                        for (std::uint32_t j : it->second) {
                            if (j == i) continue;
                            const auto cj = coord(points[j]);
                            if (cj[0] != x || cj[1] != y || cj[2] != z) continue;  // hash collision
                            best.emplace_back((points[j] - points[i]).squaredNorm(), j);
                        }
                    }
            if (static_cast<int>(best.size()) >= k) {
                std::nth_element(best.begin(), best.begin() + (k - 1), best.end());
                const double reach = static_cast<double>(r) * cell;
                if (best[k - 1].first <= reach * reach) break;
            }
        }
        std::partial_sort(best.begin(), best.begin() + k, best.end());
        for (int m = 0; m < k; ++m) {
            out.index[i * k + m] = best[m].second;
            out.dist2[i * k + m] = best[m].first;
        }
    }
    return out;
}

double scene_extent(const Dataset& data) {
    if (data.cameras.empty()) return 0.5 * (data.aabb_max - data.aabb_min).norm();
    Vec3 center = Vec3::Zero();
    for (const Camera& c : data.cameras) center += c.position;
    center /= static_cast<double>(data.cameras.size());
    double radius = 0.0;
    for (const Camera& c : data.cameras) radius = std::max(radius, (c.position - center).norm());
    if (radius < 1e-6) radius = 0.5 * (data.aabb_max - data.aabb_min).norm();
    return 1.1 * radius;
}

namespace {

Vec4 quat_aligning_z(const Vec3& normal) {
    const Eigen::Quaterniond q = Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), normal.normalized());
    return Vec4(q.w(), q.x(), q.y(), q.z());
}

Vec4 random_quaternion(Rng& rng) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q.normalized();
}

}  // namespace

SurfelCloud initialize_cloud(const Dataset& data, const TrainConfig& cfg, Rng& rng) {
    SurfelCloud cloud;
    cloud.latent_dim = cfg.latent_dim;
    const double logit_o = logit(cfg.opacity_init);
    if (!data.points.empty()) {
        std::vector<std::uint32_t> order(data.points.size());
        std::iota(order.begin(), order.end(), 0u);
        const std::size_t n = std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.mcmc_cap));
        for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
        order.resize(n);
        std::vector<Vec3> pts;
        for (std::uint32_t i : order) pts.push_back(data.points[i]);
        const Neighbors nb = nearest_neighbors(pts, 8);
        for (std::size_t i = 0; i < n; ++i) {
            Surfel s;
            s.position = pts[i];
            double mean_d2 = 0.0;
            const int k3 = std::min(nb.k, 3);
            for (int m = 0; m < k3; ++m) mean_d2 += nb.dist2[i * nb.k + m];
            const double scale = k3 > 0 ? std::sqrt(mean_d2 / k3) : 0.1;
            s.scale = Vec2::Constant(std::clamp(scale, 1e-4, 1.0));
            if (nb.k >= 3) {
                Vec3 mean = pts[i];
                for (int m = 0; m < nb.k; ++m) mean += pts[nb.index[i * nb.k + m]];
                mean /= nb.k + 1.0;
                Mat3 cov = (pts[i] - mean) * (pts[i] - mean).transpose();
                for (int m = 0; m < nb.k; ++m) {
                    const Vec3 d = pts[nb.index[i * nb.k + m]] - mean;
                    cov += d * d.transpose();
                }
                Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
                s.rotation = quat_aligning_z(es.eigenvectors().col(0));
            } else {
                s.rotation = random_quaternion(rng);
            }
            s.opacity_logit = logit_o;
            s.beta = cfg.beta_init;
            s.latent.assign(cfg.latent_dim, 0.0);
            if (!data.point_colors.empty()) {
                const Vec3& col = data.point_colors[order[i]];
                for (int c = 0; c < 3; ++c) s.latent[c] = logit(std::clamp(col[c], 0.02, 0.98));
            }
            cloud.push_back(s);
        }
    } else {
        const Vec3 size = data.aabb_max - data.aabb_min;
        const int n = cfg.mcmc_cap;
        const double scale = 0.5 * std::cbrt(size.prod() / n);
        for (int i = 0; i < n; ++i) {
            Surfel s;
            for (int k = 0; k < 3; ++k) s.position[k] = data.aabb_min[k] + rng.uniform() * size[k];
            s.rotation = random_quaternion(rng);
            s.scale = Vec2::Constant(scale);
            s.opacity_logit = logit_o;
            s.beta = cfg.beta_init;
            s.latent.assign(cfg.latent_dim, 0.0);
            cloud.push_back(s);
        }
    }
    cloud.enforce_invariants();
    return cloud;
}

// ---------------------------------------------------------------- MCMC pieces

double noise_gate(double opacity, const TrainConfig& cfg) { return sigmoid(-cfg.gate_k * (opacity - cfg.gate_opacity)); }

void sgld_noise(SurfelCloud& cloud, const TrainConfig& cfg, Rng& rng) {
    if (cfg.noise_lr == 0.0) return;
    const double amp = std::sqrt(2.0 * cfg.noise_lr);
    const double rho = cfg.tangent_fraction;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Frame f = splat_frame(cloud.rotation[i]);
        const Vec2 s = cloud.scale(i);
        const double xu = rng.normal(), xv = rng.normal(), xn = rng.normal();
        Vec3 eps = rho * (xu * s.x() * f.tu + xv * s.y() * f.tv);
        if (rho < 1.0) eps += (1.0 - rho) * xn * s.minCoeff() * f.normal;
        cloud.position[i] += amp * noise_gate(cloud.opacity(i), cfg) * eps;
    }
}

namespace {

std::span<double> flat(std::vector<Vec3>& v) { return {reinterpret_cast<double*>(v.data()), v.size() * 3}; }
std::span<double> flat(std::vector<Vec4>& v) { return {reinterpret_cast<double*>(v.data()), v.size() * 4}; }
std::span<double> flat(std::vector<Vec2>& v) { return {reinterpret_cast<double*>(v.data()), v.size() * 2}; }
static_assert(sizeof(Vec3) == 3 * sizeof(double) && sizeof(Vec4) == 4 * sizeof(double) &&
              sizeof(Vec2) == 2 * sizeof(double));

}  // namespace

void sgld_step(SurfelCloud& cloud, std::span<const double> position_grads, AdamState& state, double lr,
               const TrainConfig& cfg, Rng& rng) {
    state.resize(cloud.size() * 3);
    adam_step(flat(cloud.position), position_grads, state, lr);
    sgld_noise(cloud, cfg, rng);
}

std::vector<std::pair<std::string, int>> surfel_groups(int latent_dim) {
    return {{"position", 3}, {"rotation", 4}, {"log_scale", 2}, {"opacity", 1}, {"beta", 1}, {"latent", latent_dim}};
}

std::vector<std::uint32_t> sample_donors(const SurfelCloud& cloud, double threshold, std::size_t count, Rng& rng) {
    std::vector<std::uint32_t> live;
    std::vector<double> cum;
    double total = 0.0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const double o = cloud.opacity(i);
        if (o < threshold) continue;
        live.push_back(static_cast<std::uint32_t>(i));
        cum.push_back(total += o);
    }
    std::vector<std::uint32_t> out;
    if (live.empty() || total <= 0.0) return out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const double u = rng.uniform() * total;
        const std::size_t j = std::min<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin(),
                                                    live.size() - 1);
        out.push_back(live[j]);
    }
    return out;
}

double split_opacity(double donor_opacity) { return 1.0 - std::sqrt(1.0 - donor_opacity); }

RelocationResult relocate_dead(SurfelCloud& cloud, std::map<std::string, AdamState>& adam, const TrainConfig& cfg,
                               Rng& rng) {
    RelocationResult r;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (cloud.opacity(i) < cfg.dead_threshold) r.dead.push_back(static_cast<std::uint32_t>(i));
    if (r.dead.empty()) return r;
    r.donors = sample_donors(cloud, cfg.dead_threshold, r.dead.size(), rng);
    if (r.donors.empty()) return r;  // nothing alive to copy from
    const auto groups = surfel_groups(cloud.latent_dim);
    auto reset = [&](std::uint32_t row) {
        for (const auto& [name, width] : groups) {
            auto it = adam.find(name);
            if (it != adam.end() && it->second.m.size() >= (row + 1) * static_cast<std::size_t>(width))
                it->second.reset_row(row, width);
        }
    };
    for (std::size_t k = 0; k < r.dead.size(); ++k) {
        const std::uint32_t dead = r.dead[k], donor = r.donors[k];
        const double o = std::min(split_opacity(cloud.opacity(donor)), 1.0 - 1e-12);
        Surfel s = cloud.get(donor);
        s.opacity_logit = logit(o);
        s.beta = cfg.beta_init;
        cloud.set(donor, s);
        cloud.set(dead, s);
        reset(dead);
        reset(donor);
        ++r.relocated;
    }
    return r;
}

std::size_t prune(SurfelCloud& cloud, std::map<std::string, AdamState>& adam, double threshold) {
    std::vector<bool> keep(cloud.size());
    std::size_t removed = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        keep[i] = cloud.opacity(i) >= threshold;
        removed += keep[i] ? 0 : 1;
    }
    if (removed == 0) return 0;
    for (const auto& [name, width] : surfel_groups(cloud.latent_dim)) {
        auto it = adam.find(name);
        if (it != adam.end() && it->second.m.size() == cloud.size() * static_cast<std::size_t>(width))
            it->second.compact_rows(keep, width);
    }
    cloud.compact(keep);
    return removed;
}

void latent_handoff(SurfelCloud& cloud, std::map<std::string, AdamState>& adam) {
    for (std::size_t i = 0; i < cloud.size(); ++i)
        for (int k = 3; k < cloud.latent_dim; ++k) cloud.latent_of(i)[k] = 0.0;
    auto it = adam.find("latent");
    if (it != adam.end()) it->second = AdamState{};
}

// ---------------------------------------------------------------- training loop

std::string IterationLog::to_json() const {
    json j;
    j["iter"] = iter;
    j["phase"] = to_string(phase);
    const LossTerms& t = losses.terms;
    j["losses"] = {{"rgb", t.rgb},         {"l1", t.l1},           {"ssim", t.ssim}, {"dist", t.dist},
                   {"normal", t.normal},   {"opacity", t.opacity}, {"bce", t.bce},   {"total", losses.total}};
    j["psnr"] = std::isfinite(psnr) ? json(psnr) : json("inf");
    j["n_surfels"] = n_surfels;
    j["mean_blends"] = mean_blends;
    j["relocated"] = relocated;
    j["pruned"] = pruned;
    return j.dump();
}

Trainer::Trainer(const Dataset& data, const TrainConfig& cfg, std::optional<SurfelCloud> initial)
    : data_(data), cfg_(cfg) {
    cfg_.validate();
    data_.validate();
    if (data_.images.empty()) throw Error("trainer: dataset has no training views");
    state_.rng = Rng(cfg_.seed);
    state_.extent = scene_extent(data_);
    if (initial) {
        state_.cloud = *initial;
        state_.cloud.check_consistent();
        if (state_.cloud.latent_dim != cfg_.latent_dim) throw Error("trainer: initial cloud latent size mismatch");
    } else {
        state_.cloud = initialize_cloud(data_, cfg_, state_.rng);
    }
    state_.grid = HashGrid(cfg_.hash, data_.aabb_min, data_.aabb_max);
    state_.grid.initialize(state_.rng, cfg_.hash_init);
    state_.decoder = Decoder(cfg_.latent_dim + state_.grid.output_dim() + kShDim, cfg_.decoder_width,
                             cfg_.decoder_layers, 3);
    state_.decoder.initialize(state_.rng);
}

Trainer::Trainer(const Dataset& data, const Checkpoint& ckpt)
    : data_(data), cfg_(config_from_json(ckpt.config_json)) {
    cfg_.validate();
    state_.cloud = ckpt.cloud;
    state_.grid = ckpt.grid;
    state_.decoder = ckpt.decoder;
    state_.adam = ckpt.optimizer;
    state_.iteration = ckpt.iteration;
    state_.rng = ckpt.rng;
    const json meta = ckpt.meta_json.empty() ? json::object() : json::parse(ckpt.meta_json);
    state_.handoff_done = meta.value("handoff_done", false);
    state_.extent = meta.value("extent", scene_extent(data_));
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config_json = config_to_json(cfg_);
    c.cloud = state_.cloud;
    c.grid = state_.grid;
    c.decoder = state_.decoder;
    c.optimizer = state_.adam;
    c.iteration = state_.iteration;
    c.rng = state_.rng;
    c.meta_json = json{{"handoff_done", state_.handoff_done}, {"extent", state_.extent}}.dump();
    return c;
}

RenderConfig Trainer::render_config(Phase phase) const { return render_config_for(cfg_, phase); }

double Trainer::position_lr() const {
    const double t = cfg_.total_iters > 1 ? std::clamp(static_cast<double>(state_.iteration) /
                                                           static_cast<double>(cfg_.total_iters - 1),
                                                       0.0, 1.0)
                                          : 0.0;
    const double lo = std::max(cfg_.lr.position_final, 1e-300), hi = std::max(cfg_.lr.position, 1e-300);
    if (cfg_.lr.position == 0.0) return 0.0;
    return state_.extent * std::exp((1.0 - t) * std::log(hi) + t * std::log(lo));
}

IterationLog Trainer::step() {
    if (done()) throw Error("trainer: training already finished");
    const Phase ph = phase();
    TrainState& s = state_;
    if (ph != Phase::warmup && !s.handoff_done) {
        latent_handoff(s.cloud, s.adam);
        s.handoff_done = true;
    }
    const std::size_t view = static_cast<std::size_t>(s.rng.below(data_.cameras.size()));
    const Camera& cam = data_.cameras[view];
    const Image& gt = data_.images[view];
    const RenderConfig rc = render_config(ph);
    const FrameBundle fb = render(s.cloud, s.grid, s.decoder, cam, rc);

    const ImageLoss il = rgb_loss(fb.rgb, gt, cfg_.loss.lambda_ssim);
    const GatedWeights gw = gate_weights(cfg_.loss, ph);
    LossTerms terms;
    terms.rgb = il.value;
    terms.l1 = il.l1;
    terms.ssim = il.ssim;
    PixelGrads up;
    up.rgb = il.grad;
    if (gw.dist > 0.0) {
        ContributionLoss dl = distortion_loss(fb);
        terms.dist = dl.value;
        for (double& g : dl.grad_weight) g *= gw.dist;
        for (double& g : dl.grad_t) g *= gw.dist;
        up.weight = std::move(dl.grad_weight);
        up.t = std::move(dl.grad_t);
    }
    if (gw.normal > 0.0) {
        NormalLoss nl = normal_loss(fb);
        terms.normal = nl.value;
        for (Vec3& g : nl.grad_normal) g *= gw.normal;
        for (double& g : nl.grad_depth) g *= gw.normal;
        for (double& g : nl.grad_alpha) g *= gw.normal;
        up.normal = std::move(nl.grad_normal);
        up.depth = std::move(nl.grad_depth);
        up.alpha = std::move(nl.grad_alpha);
    }
    SceneGrads g;
    g.reset(s.cloud, s.grid, s.decoder);
    render_backward(fb, up, s.cloud, s.grid, s.decoder, g);
    {
        const OpacityLoss op = opacity_reg(s.cloud.opacity_logit, cfg_.loss.reduction);
        terms.opacity = op.value;
        if (gw.opacity > 0.0)
            for (std::size_t i = 0; i < g.opacity_logit.size(); ++i) g.opacity_logit[i] += gw.opacity * op.grad_logit[i];
        const OpacityLoss bce = bce_loss(s.cloud.opacity_logit, cfg_.loss.reduction);
        terms.bce = bce.value;
        if (gw.bce > 0.0)
            for (std::size_t i = 0; i < g.opacity_logit.size(); ++i) g.opacity_logit[i] += gw.bce * bce.grad_logit[i];
    }
    IterationLog log;
    log.iter = s.iteration;
    log.phase = ph;
    log.losses = total_loss(terms, cfg_.loss, ph);
    if (!std::isfinite(log.losses.total)) {
        if (!diagnostic_path_.empty()) save_checkpoint(checkpoint(), diagnostic_path_);
        throw TrainingError("non-finite loss at iteration " + std::to_string(s.iteration) +
                            (diagnostic_path_.empty() ? "" : "; state saved to " + diagnostic_path_.string()));
    }
    double mse = 0.0;
    for (std::size_t i = 0; i < gt.data.size(); ++i) mse += (fb.rgb.data[i] - gt.data[i]) * (fb.rgb.data[i] - gt.data[i]);
    mse /= static_cast<double>(gt.data.size());
    log.psnr = mse > 0.0 ? -10.0 * std::log10(mse) : std::numeric_limits<double>::infinity();
    log.mean_blends = blend_stats(fb).mean;

    // Optimizer updates.
    auto step_group = [&](const std::string& name, std::span<double> params, std::span<const double> grads, double lr) {
        AdamState& st = s.adam[name];
        st.resize(params.size());
        adam_step(params, grads, st, lr);
    };
    const bool mcmc = ph == Phase::mcmc && cfg_.mcmc_enabled;
    if (mcmc) {
        sgld_step(s.cloud, flat(g.position), s.adam["position"], position_lr(), cfg_, s.rng);
    } else {
        step_group("position", flat(s.cloud.position), flat(g.position), position_lr());
    }
    step_group("rotation", flat(s.cloud.rotation), flat(g.rotation), cfg_.lr.rotation);
    step_group("log_scale", flat(s.cloud.log_scale), flat(g.log_scale), cfg_.lr.scale);
    step_group("opacity", s.cloud.opacity_logit, g.opacity_logit, cfg_.lr.opacity);
    step_group("latent", s.cloud.latent, g.latent, cfg_.lr.latent);
    if (ph != Phase::warmup) {
        if (rc.kernel == KernelMode::beta) step_group("beta", s.cloud.beta, g.beta, cfg_.lr.beta);
        step_group("table", s.grid.table(), g.table, cfg_.lr.table);
        step_group("decoder", s.decoder.params(), g.decoder, cfg_.lr.decoder);
    }
    s.cloud.enforce_invariants();

    const bool period_end = (s.iteration + 1) % cfg_.relocation_period == 0;
    const bool last = s.iteration + 1 == cfg_.total_iters;
    // A relocation on the final iteration would leave unoptimized clones behind.
    if (mcmc && period_end && !last) log.relocated = relocate_dead(s.cloud, s.adam, cfg_, s.rng).relocated;
    if (ph == Phase::bce && (period_end || last))
        log.pruned = prune(s.cloud, s.adam, cfg_.prune_threshold);
    log.n_surfels = s.cloud.size();
    ++s.iteration;
    return log;
}

void Trainer::run(std::int64_t until, const std::function<void(const IterationLog&)>& on_log) {
    const std::int64_t stop = until < 0 ? cfg_.total_iters : std::min(until, cfg_.total_iters);
    while (state_.iteration < stop) {
        const IterationLog log = step();
        if (on_log && ((log.iter + 1) % cfg_.log_every == 0 || log.iter + 1 == cfg_.total_iters)) on_log(log);
    }
}

}  // namespace hsplat
