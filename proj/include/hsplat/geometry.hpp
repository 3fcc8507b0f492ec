#pragma once

#include "hsplat/camera.hpp"
#include "hsplat/common.hpp"

#include <optional>

namespace hsplat {

/// Support multiplier: the unit kernel domain spans kappa times the stored scale.
inline constexpr double kDefaultKappa = 3.0;
inline constexpr double kParallelEps = 1e-8;
inline constexpr double kNearT = 0.01;
inline constexpr double kMinScale = 1e-6;
inline constexpr double kMaxScale = 1e3;

enum class KernelMode { gaussian, beta };

/// One oriented disk. `rotation` is a (w, x, y, z) quaternion; `scale` holds
/// the two tangent half-extents in world units.
struct Surfel {
    Vec3 position = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);
    Vec2 scale = Vec2(1, 1);
    double opacity_logit = 0.0;
    double beta = 0.0;
    std::vector<double> latent;

    double opacity() const { return sigmoid(opacity_logit); }
};

/// Structure-of-arrays surfel storage. Scales are stored as logarithms so
/// gradient updates cannot make them non-positive.
struct SurfelCloud {
    int latent_dim = 4;
    std::vector<Vec3> position;
    std::vector<Vec4> rotation;
    std::vector<Vec2> log_scale;
    std::vector<double> opacity_logit;
    std::vector<double> beta;
    std::vector<double> latent;  // size() * latent_dim

    std::size_t size() const { return position.size(); }
    bool empty() const { return position.empty(); }

    void push_back(const Surfel& s);
    Surfel get(std::size_t i) const;
    void set(std::size_t i, const Surfel& s);
    void resize(std::size_t n);
    /// Keep only entries with keep[i] true, preserving order.
    void compact(const std::vector<bool>& keep);

    double opacity(std::size_t i) const { return sigmoid(opacity_logit[i]); }
    Vec2 scale(std::size_t i) const { return log_scale[i].array().exp(); }
    const double* latent_of(std::size_t i) const { return latent.data() + i * latent_dim; }
    double* latent_of(std::size_t i) { return latent.data() + i * latent_dim; }

    /// Renormalize quaternions and clamp scales into [kMinScale, kMaxScale].
    void enforce_invariants();

    /// Throws if the per-field arrays disagree in length.
    void check_consistent() const;

    bool operator==(const SurfelCloud&) const = default;
};

/// Orthonormal right-handed tangent frame of a surfel; `normal` is t_u x t_v.
struct Frame {
    Vec3 tu;
    Vec3 tv;
    Vec3 normal;
};

/// Rotation matrix of a unit (w, x, y, z) quaternion.
Mat3 quat_to_matrix(const Vec4& q);

/// Frame of the normalized quaternion; `q` need not be exactly unit length.
Frame splat_frame(const Vec4& q);
inline Frame splat_frame(const Surfel& s) { return splat_frame(s.rotation); }

/// Gradient with respect to the raw (unnormalized) quaternion given
/// gradients on the three frame axes.
Vec4 splat_frame_backward(const Vec4& q, const Vec3& g_tu, const Vec3& g_tv, const Vec3& g_n);

/// Value and partial derivatives of a kernel evaluation.
struct KernelEval {
    double value = 0.0;
    double d_r2 = 0.0;
    double d_beta = 0.0;
};

/// Beta-kernel exponent, 4 * sigmoid(b), always in (0, 4).
inline double beta_exponent(double b) { return 4.0 * sigmoid(b); }

/// (1 - r2)^(4 sigmoid(b)) for r2 in [0, 1].
double beta_kernel(double r2, double b);
KernelEval beta_kernel_eval(double r2, double b);

/// exp(-kappa^2 r2 / 2); r2 = 1 sits at kappa standard deviations.
double gaussian_kernel(double r2, double kappa = kDefaultKappa);
KernelEval gaussian_kernel_eval(double r2, double kappa = kDefaultKappa);

KernelEval kernel_eval(KernelMode mode, double r2, double b, double kappa);

struct Intersection {
    double t = 0.0;
    Vec3 x = Vec3::Zero();
    Vec2 uv = Vec2::Zero();
    double r2 = 0.0;
    double g = 0.0;
};

/// Ray / disk-plane intersection. Absent when the ray is parallel to the
/// plane, the hit lies at t <= kNearT, or the hit falls outside the support.
std::optional<Intersection> intersect(const Ray& ray, const Vec3& position, const Frame& frame, const Vec2& scale,
                                      double kappa, KernelMode mode = KernelMode::beta, double b = 0.0);
std::optional<Intersection> intersect(const Ray& ray, const Surfel& surfel, double kappa,
                                      KernelMode mode = KernelMode::beta);

/// Gradients flowing out of one intersection.
struct IntersectGrad {
    Vec3 position = Vec3::Zero();
    Vec3 tu = Vec3::Zero();
    Vec3 tv = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
};

/// Reverse pass of the intersection: given dL/du, dL/dv, dL/dt and a direct
/// gradient on the normal, returns gradients for the surfel center and frame.
IntersectGrad intersect_backward(const Ray& ray, const Vec3& position, const Frame& frame, const Intersection& hit,
                                 double g_u, double g_v, double g_t, const Vec3& g_normal);

/// Continuous pixel-space rectangle; infinite bounds mean "whole image".
struct ScreenRect {
    double x_min = 0.0;
    double x_max = 0.0;
    double y_min = 0.0;
    double y_max = 0.0;

    bool contains(double x, double y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
};

/// Bounding rectangle of the projected support ellipse. Absent when the disk
/// lies entirely behind the near plane; unbounded when it straddles it.
std::optional<ScreenRect> project_aabb(const Vec3& position, const Frame& frame, const Vec2& scale,
                                       const Camera& camera, double kappa);
std::optional<ScreenRect> project_aabb(const Surfel& surfel, const Camera& camera, double kappa);

}  // namespace hsplat
