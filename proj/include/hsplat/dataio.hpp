#pragma once

#include "hsplat/adam.hpp"
#include "hsplat/camera.hpp"
#include "hsplat/common.hpp"
#include "hsplat/decoder.hpp"
#include "hsplat/geometry.hpp"
#include "hsplat/hash_grid.hpp"
#include "hsplat/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hsplat {

namespace fs = std::filesystem;

/// A required file or directory does not exist.
class MissingFileError : public Error {
public:
    using Error::Error;
};

/// A file exists but its content cannot be parsed.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Images of one split disagree in size.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Checkpoint container problems: bad magic, version, truncation, checksum.
class CheckpointError : public Error {
public:
    using Error::Error;
};

/// Posed RGB images plus optional seed points.
struct Dataset {
    std::vector<Camera> cameras;
    std::vector<Image> images;
    std::vector<Camera> test_cameras;
    std::vector<Image> test_images;
    std::vector<Vec3> points;
    std::vector<Vec3> point_colors;
    Vec3 aabb_min = Vec3::Constant(-1.5);
    Vec3 aabb_max = Vec3::Constant(1.5);

    void validate() const;
};

/// 8-bit PNG input; returns 3 or 4 channels (alpha kept when present) or 1 for gray.
Image read_png(const fs::path& path);

/// 8-bit PNG output with round-half-even quantization of clamped values.
void write_png(const fs::path& path, const Image& image);

/// Composite an RGBA image over a constant background colour.
Image composite_over(const Image& rgba, const Vec3& background = Vec3::Ones());

/// Directory with transforms_train.json (required) and transforms_test.json
/// (optional), plus points3d.ply when present.
Dataset load_nerf_synthetic(const fs::path& dir);

/// Writes the same layout load_nerf_synthetic reads.
void write_nerf_synthetic(const Dataset& data, const fs::path& dir);

/// Camera pose conversions between the OpenGL (-z forward, y up) convention of
/// transform_matrix and the internal OpenCV one.
Camera camera_from_transform(const Eigen::Matrix4d& c2w_gl, int width, int height, double camera_angle_x);
Eigen::Matrix4d transform_from_camera(const Camera& cam);

/// Textured rectangle: center + half_u * u + half_v * v, u x v is the normal.
struct TexturedQuad {
    Vec3 center;
    Vec3 u;
    Vec3 v;
    double half_u = 1.0;
    double half_v = 1.0;
    int checker = 4;
    std::uint64_t palette_seed = 0;

    /// Colour at local coordinates (s, t) in [0, 1]^2.
    Vec3 texture(double s, double t) const;
};

struct ToySpec {
    std::string name = "textured_quad";
    int views = 6;
    int test_views = 2;
    int width = 64;
    int height = 64;
    int supersample = 4;
    int points = 2000;
    std::uint64_t seed = 0;
};

struct ToyScene {
    Dataset data;
    std::vector<TexturedQuad> quads;
    Vec3 background = Vec3::Ones();
};

std::vector<std::string> toy_scene_names();

ToyScene gen_toy_scene(const ToySpec& spec);

/// n cameras evenly spaced in azimuth around the origin, toy-scene field of view.
std::vector<Camera> turntable_cameras(int n, int width, int height, double distance = 3.2, double polar = 0.5);

/// First hit of the ray with the quads: colour and ray parameter. Returns
/// false on a miss.
bool raycast_quads(const std::vector<TexturedQuad>& quads, const Ray& ray, Vec3& color, double& t);

/// Supersampled analytic image of the quads.
Image render_quads(const std::vector<TexturedQuad>& quads, const Camera& cam, int supersample,
                   const Vec3& background = Vec3::Ones());

/// Column-oriented contents of a PLY vertex element.
struct PlyTable {
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns;
    std::size_t rows = 0;

    const std::vector<double>& column(const std::string& name) const;
    bool has(const std::string& name) const;
};

PlyTable read_ply(const fs::path& path);

/// Binary little-endian PLY with double properties.
void write_ply(const fs::path& path, const PlyTable& table);

void export_ply(const SurfelCloud& cloud, const fs::path& path);
SurfelCloud import_ply(const fs::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to resume training or render.
struct Checkpoint {
    std::string config_json;
    SurfelCloud cloud;
    HashGrid grid;
    Decoder decoder;
    std::map<std::string, AdamState> optimizer;
    std::int64_t iteration = 0;
    Rng rng;
    /// Free-form JSON for trainer bookkeeping (phase flags and such).
    std::string meta_json;

    bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

std::vector<std::uint8_t> read_file_bytes(const fs::path& path);

}  // namespace hsplat
