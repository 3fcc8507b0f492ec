#pragma once

#include "hsplat/camera.hpp"
#include "hsplat/decoder.hpp"
#include "hsplat/geometry.hpp"
#include "hsplat/hash_grid.hpp"
#include "hsplat/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace hsplat::testing {

inline Vec4 random_quat(Rng& rng) {
    Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q.normalized();
}

/// Central difference of f around x[i] (restores x).
inline double central_diff(const std::function<double()>& f, double& x, double h) {
    const double saved = x;
    x = saved + h;
    const double fp = f();
    x = saved - h;
    const double fm = f();
    x = saved;
    return (fp - fm) / (2.0 * h);
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Random cloud of n surfels in front of a camera at the origin looking down +z.
inline SurfelCloud random_cloud(Rng& rng, int n, int latent_dim = 4, double beta_lo = -2.0, double beta_hi = 4.0) {
    SurfelCloud cloud;
    cloud.latent_dim = latent_dim;
    for (int i = 0; i < n; ++i) {
        Surfel s;
        s.position = Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(2.5, 4.0));
        // Mostly facing the camera so every surfel covers some pixels.
        Vec4 q(1.0, rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-1.0, 1.0));
        s.rotation = q.normalized();
        s.scale = Vec2(rng.uniform(0.12, 0.3), rng.uniform(0.12, 0.3));
        s.opacity_logit = rng.uniform(-1.0, 1.5);
        s.beta = rng.uniform(beta_lo, beta_hi);
        for (int k = 0; k < latent_dim; ++k) s.latent.push_back(rng.uniform(-1.0, 1.0));
        cloud.push_back(s);
    }
    return cloud;
}

inline Camera test_camera(int w, int h, double fov = 0.8) {
    return Camera::look_at(w, h, fov, Vec3::Zero(), Vec3(0, 0, 1), Vec3(0, -1, 0));
}

inline HashGrid random_grid(Rng& rng, int resolution = 8, int log2_table = 10, int features = 6, int levels = 1) {
    HashGridConfig cfg;
    cfg.levels = levels;
    cfg.resolution = resolution;
    cfg.min_resolution = 4;
    cfg.log2_table_size = log2_table;
    cfg.feature_dim = features;
    HashGrid grid(cfg, Vec3(-1.5, -1.5, 1.0), Vec3(1.5, 1.5, 5.0));
    grid.initialize(rng, 0.5);
    return grid;
}

}  // namespace hsplat::testing
