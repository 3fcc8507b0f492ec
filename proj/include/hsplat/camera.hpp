#pragma once

#include "hsplat/common.hpp"

namespace hsplat {

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 dir = Vec3::UnitZ();
};

/// Pinhole camera. Camera space follows the OpenCV convention: +z forward,
/// +x right, +y down. `rotation` and `position` give the world-from-camera
/// rigid transform.
struct Camera {
    int width = 0;
    int height = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 position = Vec3::Zero();
    double near = 0.01;
    double far = 100.0;

    void validate() const {
        if (width <= 0 || height <= 0) throw Error("camera: image size must be positive");
        if (!(fx > 0.0 && fy > 0.0)) throw Error("camera: focal lengths must be positive");
        if (!(near < far)) throw Error("camera: near must be less than far");
    }

    Vec3 to_camera(const Vec3& world) const { return rotation.transpose() * (world - position); }

    /// Ray through the center of pixel (px, py).
    Ray pixel_ray(int px, int py) const {
        const Vec3 d_cam((px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0);
        return Ray{position, (rotation * d_cam).normalized()};
    }

    /// Camera at `eye` looking at `target`; `up` is a world-space hint.
    static Camera look_at(int width, int height, double fov_x, const Vec3& eye, const Vec3& target,
                          const Vec3& up = Vec3::UnitZ()) {
        Camera cam;
        cam.width = width;
        cam.height = height;
        cam.fx = cam.fy = 0.5 * width / std::tan(0.5 * fov_x);
        cam.cx = 0.5 * width;
        cam.cy = 0.5 * height;
        const Vec3 fwd = (target - eye).normalized();
        const Vec3 right = fwd.cross(up).normalized();
        const Vec3 down = fwd.cross(right);
        cam.rotation.col(0) = right;
        cam.rotation.col(1) = down;
        cam.rotation.col(2) = fwd;
        cam.position = eye;
        return cam;
    }
};

}  // namespace hsplat
