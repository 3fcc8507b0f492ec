#include "hsplat/geometry.hpp"

#include <algorithm>
#include <limits>

namespace hsplat {

void SurfelCloud::push_back(const Surfel& s) {
    if (static_cast<int>(s.latent.size()) != latent_dim) throw Error("surfel latent width does not match cloud");
    position.push_back(s.position);
    rotation.push_back(s.rotation);
    log_scale.push_back(s.scale.array().log());
    opacity_logit.push_back(s.opacity_logit);
    beta.push_back(s.beta);
    latent.insert(latent.end(), s.latent.begin(), s.latent.end());
}

Surfel SurfelCloud::get(std::size_t i) const {
    Surfel s;
    s.position = position[i];
    s.rotation = rotation[i];
    s.scale = scale(i);
    s.opacity_logit = opacity_logit[i];
    s.beta = beta[i];
    s.latent.assign(latent_of(i), latent_of(i) + latent_dim);
    return s;
}

void SurfelCloud::set(std::size_t i, const Surfel& s) {
    position[i] = s.position;
    rotation[i] = s.rotation;
    log_scale[i] = s.scale.array().log();
    opacity_logit[i] = s.opacity_logit;
    beta[i] = s.beta;
    std::copy(s.latent.begin(), s.latent.end(), latent_of(i));
}

void SurfelCloud::resize(std::size_t n) {
    position.resize(n, Vec3::Zero());
    rotation.resize(n, Vec4(1, 0, 0, 0));
    log_scale.resize(n, Vec2::Zero());
    opacity_logit.resize(n, 0.0);
    beta.resize(n, 0.0);
    latent.resize(n * latent_dim, 0.0);
}

void SurfelCloud::compact(const std::vector<bool>& keep) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < size(); ++i) {
        if (!keep[i]) continue;
        if (out != i) {
            position[out] = position[i];
            rotation[out] = rotation[i];
            log_scale[out] = log_scale[i];
            opacity_logit[out] = opacity_logit[i];
            beta[out] = beta[i];
            std::copy(latent_of(i), latent_of(i) + latent_dim, latent_of(out));
        }
        ++out;
    }
    resize(out);
}

void SurfelCloud::enforce_invariants() {
    const double lo = std::log(kMinScale);
    const double hi = std::log(kMaxScale);
    for (std::size_t i = 0; i < size(); ++i) {
        const double n = rotation[i].norm();
        rotation[i] = n > 0.0 ? Vec4(rotation[i] / n) : Vec4(1, 0, 0, 0);
        log_scale[i] = log_scale[i].cwiseMax(lo).cwiseMin(hi);
    }
}

void SurfelCloud::check_consistent() const {
    const std::size_t n = size();
    if (rotation.size() != n || log_scale.size() != n || opacity_logit.size() != n || beta.size() != n ||
        latent.size() != n * static_cast<std::size_t>(latent_dim)) {
        throw Error("surfel cloud arrays have inconsistent lengths");
    }
}

Mat3 quat_to_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Frame splat_frame(const Vec4& q) {
    const Mat3 r = quat_to_matrix(q.normalized());
    return Frame{r.col(0), r.col(1), r.col(2)};
}

Vec4 splat_frame_backward(const Vec4& q_raw, const Vec3& g_tu, const Vec3& g_tv, const Vec3& g_n) {
    const double len = q_raw.norm();
    const Vec4 q = q_raw / len;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 g;
    g.col(0) = g_tu;
    g.col(1) = g_tv;
    g.col(2) = g_n;
    Vec4 gq;
    gq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    gq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                 w * g(2, 1) - 2 * x * g(2, 2));
    gq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                 z * g(2, 1) - 2 * y * g(2, 2));
    gq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                 x * g(2, 0) + y * g(2, 1));
    // Chain through q / |q|.
    return (gq - q * q.dot(gq)) / len;
}

double beta_kernel(double r2, double b) {
    if (r2 >= 1.0) return 0.0;
    return std::pow(1.0 - r2, beta_exponent(b));
}

KernelEval beta_kernel_eval(double r2, double b) {
    KernelEval k;
    if (r2 >= 1.0) return k;
    const double s = sigmoid(b);
    const double expo = 4.0 * s;
    const double base = 1.0 - r2;
    k.value = std::pow(base, expo);
    k.d_r2 = -expo * k.value / base;
    k.d_beta = k.value * std::log(base) * 4.0 * s * (1.0 - s);
    return k;
}

double gaussian_kernel(double r2, double kappa) { return std::exp(-0.5 * kappa * kappa * r2); }

KernelEval gaussian_kernel_eval(double r2, double kappa) {
    KernelEval k;
    k.value = gaussian_kernel(r2, kappa);
    k.d_r2 = -0.5 * kappa * kappa * k.value;
    return k;
}

KernelEval kernel_eval(KernelMode mode, double r2, double b, double kappa) {
    return mode == KernelMode::beta ? beta_kernel_eval(r2, b) : gaussian_kernel_eval(r2, kappa);
}

std::optional<Intersection> intersect(const Ray& ray, const Vec3& position, const Frame& frame, const Vec2& scale,
                                      double kappa, KernelMode mode, double b) {
    const double denom = frame.normal.dot(ray.dir);
    if (std::abs(denom) < kParallelEps) return std::nullopt;
    const double t = frame.normal.dot(position - ray.origin) / denom;
    if (!(t > kNearT)) return std::nullopt;
    Intersection hit;
    hit.t = t;
    hit.x = ray.origin + t * ray.dir;
    const Vec3 p = hit.x - position;
    hit.uv = Vec2(p.dot(frame.tu), p.dot(frame.tv));
    const double nu = hit.uv[0] / (kappa * scale[0]);
    const double nv = hit.uv[1] / (kappa * scale[1]);
    hit.r2 = nu * nu + nv * nv;
    if (hit.r2 > 1.0) return std::nullopt;
    hit.g = mode == KernelMode::beta ? beta_kernel(hit.r2, b) : gaussian_kernel(hit.r2, kappa);
    return hit;
}

std::optional<Intersection> intersect(const Ray& ray, const Surfel& surfel, double kappa, KernelMode mode) {
    return intersect(ray, surfel.position, splat_frame(surfel.rotation), surfel.scale, kappa, mode, surfel.beta);
}

IntersectGrad intersect_backward(const Ray& ray, const Vec3& position, const Frame& frame, const Intersection& hit,
                                 double g_u, double g_v, double g_t, const Vec3& g_normal) {
    const double denom = frame.normal.dot(ray.dir);
    const Vec3 p = hit.x - position;
    const Vec3 g_p = g_u * frame.tu + g_v * frame.tv;
    const double g_t_total = g_t + g_p.dot(ray.dir);
    IntersectGrad out;
    out.position = -g_p + (g_t_total / denom) * frame.normal;
    out.normal = g_normal - (g_t_total / denom) * p;
    out.tu = g_u * p;
    out.tv = g_v * p;
    return out;
}

namespace {

// Extremes of (row . h) / (depth . h) over the unit circle h = (cos, sin, 1),
// i.e. the roots of the tangency quadratic.
bool conic_extent(const Vec3& row, const Vec3& depth, double& lo, double& hi) {
    const double a = depth[2] * depth[2] - depth[0] * depth[0] - depth[1] * depth[1];
    const double b = depth[2] * row[2] - depth[0] * row[0] - depth[1] * row[1];
    const double c = row[2] * row[2] - row[0] * row[0] - row[1] * row[1];
    if (!(a > 0.0)) return false;
    const double disc = std::max(b * b - a * c, 0.0);
    const double root = std::sqrt(disc);
    lo = (b - root) / a;
    hi = (b + root) / a;
    return true;
}

}  // namespace

std::optional<ScreenRect> project_aabb(const Vec3& position, const Frame& frame, const Vec2& scale,
                                       const Camera& camera, double kappa) {
    const Mat3 rt = camera.rotation.transpose();
    const Vec3 axis_u = rt * (kappa * scale[0] * frame.tu);
    const Vec3 axis_v = rt * (kappa * scale[1] * frame.tv);
    const Vec3 center = rt * (position - camera.position);
    const Vec3 depth(axis_u.z(), axis_v.z(), center.z());
    const double reach = std::hypot(depth[0], depth[1]);
    if (center.z() + reach <= camera.near) return std::nullopt;
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (center.z() - reach <= camera.near) return ScreenRect{-inf, inf, -inf, inf};

    const Vec3 row_x = camera.fx * Vec3(axis_u.x(), axis_v.x(), center.x()) + camera.cx * depth;
    const Vec3 row_y = camera.fy * Vec3(axis_u.y(), axis_v.y(), center.y()) + camera.cy * depth;
    ScreenRect rect;
    if (!conic_extent(row_x, depth, rect.x_min, rect.x_max) || !conic_extent(row_y, depth, rect.y_min, rect.y_max)) {
        return ScreenRect{-inf, inf, -inf, inf};
    }
    return rect;
}

std::optional<ScreenRect> project_aabb(const Surfel& surfel, const Camera& camera, double kappa) {
    return project_aabb(surfel.position, splat_frame(surfel.rotation), surfel.scale, camera, kappa);
}

}  // namespace hsplat
