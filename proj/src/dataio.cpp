#include "hsplat/dataio.hpp"

#include "json.hpp"
#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace hsplat {

using nlohmann::json;

void Dataset::validate() const {
    if (cameras.size() != images.size()) throw Error("dataset: camera and image counts differ");
    if (test_cameras.size() != test_images.size()) throw Error("dataset: test camera and image counts differ");
    if (points.size() != point_colors.size() && !point_colors.empty())
        throw Error("dataset: point and point colour counts differ");
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (!images[i].same_shape(images.front())) throw DimensionError("dataset: training images differ in size");
        if (images[i].width != cameras[i].width || images[i].height != cameras[i].height)
            throw DimensionError("dataset: camera " + std::to_string(i) + " does not match its image");
    }
    if ((aabb_max - aabb_min).minCoeff() <= 0.0) throw Error("dataset: empty scene box");
}

// ---------------------------------------------------------------- PNG

Image read_png(const fs::path& path) {
    if (!fs::exists(path)) throw MissingFileError("missing image file: " + path.string());
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
    const bool has_alpha = (img.format & PNG_FORMAT_FLAG_ALPHA) != 0;
    const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
    int channels = 3;
    if (has_alpha) {
        img.format = PNG_FORMAT_RGBA;
        channels = 4;
    } else if (gray) {
        img.format = PNG_FORMAT_GRAY;
        channels = 1;
    } else {
        img.format = PNG_FORMAT_RGB;
    }
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw FormatError("cannot decode PNG " + path.string() + ": " + msg);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), channels);
    for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
    return out;
}

void write_png(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3 && image.channels != 4)
        throw Error("write_png: unsupported channel count " + std::to_string(image.channels));
    std::vector<png_byte> buf(image.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        const double v = std::clamp(image.data[i], 0.0, 1.0) * 255.0;
        buf[i] = static_cast<png_byte>(std::nearbyint(v));
    }
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 1 ? PNG_FORMAT_GRAY : (image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA);
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
        throw Error("cannot write PNG " + path.string() + ": " + img.message);
}

Image composite_over(const Image& rgba, const Vec3& background) {
    if (rgba.channels != 4) throw Error("composite_over: expected 4 channels");
    Image out(rgba.width, rgba.height, 3);
    for (std::size_t p = 0; p < rgba.pixel_count(); ++p) {
        const double a = rgba.data[p * 4 + 3];
        for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = rgba.data[p * 4 + c] * a + background[c] * (1.0 - a);
    }
    return out;
}

// ---------------------------------------------------------------- NeRF-synthetic layout

namespace {

const Mat3 kFlipYZ = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFileError("missing file: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

Image load_rgb(const fs::path& path) {
    Image img = read_png(path);
    if (img.channels == 4) return composite_over(img);
    if (img.channels == 1) {
        Image rgb(img.width, img.height, 3);
        for (std::size_t p = 0; p < img.pixel_count(); ++p)
            for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = img.data[p];
        return rgb;
    }
    return img;
}

fs::path frame_image_path(const fs::path& dir, const std::string& file_path) {
    fs::path p = dir / file_path;
    if (!p.has_extension()) p += ".png";
    return p.lexically_normal();
}

void load_split(const fs::path& dir, const fs::path& json_path, std::vector<Camera>& cams, std::vector<Image>& imgs,
                Dataset& data) {
    const json j = read_json(json_path);
    try {
        const bool has_intrinsics = j.contains("fl_x");
        const double angle = has_intrinsics ? 0.0 : j.at("camera_angle_x").get<double>();
        for (const auto& frame : j.at("frames")) {
            const fs::path img_path = frame_image_path(dir, frame.at("file_path").get<std::string>());
            Image img = load_rgb(img_path);
            if (!imgs.empty() && !img.same_shape(imgs.front()))
                throw DimensionError("image " + img_path.string() + " is " + std::to_string(img.width) + "x" +
                                     std::to_string(img.height) + ", expected " + std::to_string(imgs.front().width) +
                                     "x" + std::to_string(imgs.front().height));
            Eigen::Matrix4d m;
            const auto& rows = frame.at("transform_matrix");
            if (rows.size() != 4) throw FormatError("transform_matrix must be 4x4 in " + json_path.string());
            for (int r = 0; r < 4; ++r) {
                if (rows[r].size() != 4) throw FormatError("transform_matrix must be 4x4 in " + json_path.string());
                for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c].get<double>();
            }
            Camera cam;
            if (has_intrinsics) {
                cam = camera_from_transform(m, img.width, img.height, std::numbers::pi / 2);
                cam.fx = j.at("fl_x").get<double>();
                cam.fy = j.value("fl_y", cam.fx);
                cam.cx = j.value("cx", 0.5 * img.width);
                cam.cy = j.value("cy", 0.5 * img.height);
            } else {
                cam = camera_from_transform(m, img.width, img.height, angle);
            }
            cams.push_back(cam);
            imgs.push_back(std::move(img));
        }
        if (j.contains("aabb")) {
            const auto& box = j.at("aabb");
            for (int k = 0; k < 3; ++k) {
                data.aabb_min[k] = box.at(0).at(k).get<double>();
                data.aabb_max[k] = box.at(1).at(k).get<double>();
            }
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed transforms in " + json_path.string() + ": " + e.what());
    }
}

}  // namespace

Camera camera_from_transform(const Eigen::Matrix4d& c2w, int width, int height, double camera_angle_x) {
    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = 0.5 * width / std::tan(0.5 * camera_angle_x);
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.rotation = c2w.topLeftCorner<3, 3>() * kFlipYZ;
    cam.position = c2w.topRightCorner<3, 1>();
    return cam;
}

Eigen::Matrix4d transform_from_camera(const Camera& cam) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = cam.rotation * kFlipYZ;
    m.topRightCorner<3, 1>() = cam.position;
    return m;
}

Dataset load_nerf_synthetic(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw MissingFileError("missing dataset directory: " + dir.string());
    Dataset data;
    load_split(dir, dir / "transforms_train.json", data.cameras, data.images, data);
    if (fs::exists(dir / "transforms_test.json"))
        load_split(dir, dir / "transforms_test.json", data.test_cameras, data.test_images, data);
    const fs::path ply = dir / "points3d.ply";
    if (fs::exists(ply)) {
        const PlyTable t = read_ply(ply);
        for (std::size_t i = 0; i < t.rows; ++i) {
            data.points.emplace_back(t.column("x")[i], t.column("y")[i], t.column("z")[i]);
            if (t.has("red"))
                data.point_colors.emplace_back(t.column("red")[i], t.column("green")[i], t.column("blue")[i]);
        }
        // Colours stored as 8-bit integers by most tools.
        bool bytes = false;
        for (const Vec3& c : data.point_colors) bytes = bytes || c.maxCoeff() > 1.0;
        if (bytes)
            for (Vec3& c : data.point_colors) c /= 255.0;
    }
    if (data.images.empty()) throw FormatError("no frames in " + (dir / "transforms_train.json").string());
    data.validate();
    return data;
}

namespace {

void write_split(const fs::path& dir, const std::string& split, const std::vector<Camera>& cams,
                 const std::vector<Image>& imgs, const Dataset& data) {
    json j;
    if (!cams.empty()) {
        j["camera_angle_x"] = 2.0 * std::atan(0.5 * cams.front().width / cams.front().fx);
        j["fl_x"] = cams.front().fx;
        j["fl_y"] = cams.front().fy;
        j["cx"] = cams.front().cx;
        j["cy"] = cams.front().cy;
    }
    j["aabb"] = {{data.aabb_min.x(), data.aabb_min.y(), data.aabb_min.z()},
                 {data.aabb_max.x(), data.aabb_max.y(), data.aabb_max.z()}};
    j["frames"] = json::array();
    fs::create_directories(dir / split);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "r_%03zu", i);
        const std::string rel = "./" + split + "/" + name;
        write_png(dir / split / (std::string(name) + ".png"), imgs[i]);
        const Eigen::Matrix4d m = transform_from_camera(cams[i]);
        json rows = json::array();
        for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
        j["frames"].push_back({{"file_path", rel}, {"transform_matrix", rows}});
    }
    std::ofstream out(dir / ("transforms_" + split + ".json"));
    if (!out) throw Error("cannot write " + (dir / ("transforms_" + split + ".json")).string());
    out << j.dump(2) << "\n";
}

}  // namespace

void write_nerf_synthetic(const Dataset& data, const fs::path& dir) {
    data.validate();
    fs::create_directories(dir);
    write_split(dir, "train", data.cameras, data.images, data);
    if (!data.test_cameras.empty()) write_split(dir, "test", data.test_cameras, data.test_images, data);
    if (!data.points.empty()) {
        PlyTable t;
        t.names = {"x", "y", "z"};
        if (!data.point_colors.empty()) t.names.insert(t.names.end(), {"red", "green", "blue"});
        t.columns.resize(t.names.size());
        t.rows = data.points.size();
        for (std::size_t i = 0; i < t.rows; ++i) {
            for (int k = 0; k < 3; ++k) t.columns[k].push_back(data.points[i][k]);
            if (!data.point_colors.empty())
                for (int k = 0; k < 3; ++k) t.columns[3 + k].push_back(data.point_colors[i][k]);
        }
        write_ply(dir / "points3d.ply", t);
    }
}

// ---------------------------------------------------------------- toy scenes

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

}  // namespace

Vec3 TexturedQuad::texture(double s, double t) const {
    const int i = std::clamp(static_cast<int>(s * checker), 0, checker - 1);
    const int j = std::clamp(static_cast<int>(t * checker), 0, checker - 1);
    const std::uint64_t h = splitmix(palette_seed * 0x100000001B3ull + static_cast<std::uint64_t>(j * checker + i));
    Vec3 c;
    for (int k = 0; k < 3; ++k) c[k] = 0.1 + 0.8 * static_cast<double>((h >> (8 * k)) & 0xFF) / 255.0;
    // Mild gradient so the texture is not piecewise constant.
    c += Vec3(0.1 * (s - 0.5), 0.1 * (t - 0.5), 0.05 * (s - t));
    return c.cwiseMax(0.0).cwiseMin(1.0);
}

bool raycast_quads(const std::vector<TexturedQuad>& quads, const Ray& ray, Vec3& color, double& t_hit) {
    bool hit = false;
    for (const TexturedQuad& q : quads) {
        const Vec3 n = q.u.cross(q.v);
        const double denom = ray.dir.dot(n);
        if (std::abs(denom) < 1e-12) continue;
        const double t = (q.center - ray.origin).dot(n) / denom;
        if (t <= 1e-9 || (hit && t >= t_hit)) continue;
        const Vec3 local = ray.origin + t * ray.dir - q.center;
        const double a = local.dot(q.u), b = local.dot(q.v);
        if (std::abs(a) > q.half_u || std::abs(b) > q.half_v) continue;
        hit = true;
        t_hit = t;
        color = q.texture(0.5 * (a / q.half_u + 1.0), 0.5 * (b / q.half_v + 1.0));
    }
    return hit;
}

Image render_quads(const std::vector<TexturedQuad>& quads, const Camera& cam, int ss, const Vec3& background) {
    if (ss < 1) throw Error("render_quads: supersample must be >= 1");
    Image img(cam.width, cam.height, 3);
    const double inv = 1.0 / (ss * ss);
    for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px) {
            Vec3 acc = Vec3::Zero();
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const Vec3 d_cam((px + (sx + 0.5) / ss - cam.cx) / cam.fx, (py + (sy + 0.5) / ss - cam.cy) / cam.fy,
                                     1.0);
                    const Ray ray{cam.position, (cam.rotation * d_cam).normalized()};
                    Vec3 c;
                    double t = 0.0;
                    acc += raycast_quads(quads, ray, c, t) ? c : background;
                }
            for (int c = 0; c < 3; ++c) img.at(px, py, c) = acc[c] * inv;
        }
    return img;
}

std::vector<std::string> toy_scene_names() { return {"textured_quad", "two_planes", "cube"}; }

namespace {

constexpr double kToyFov = 0.75;

Vec3 spherical(double dist, double polar, double azimuth) {
    return dist * Vec3(std::sin(polar) * std::cos(azimuth), std::sin(polar) * std::sin(azimuth), std::cos(polar));
}

}  // namespace

std::vector<Camera> turntable_cameras(int n, int width, int height, double distance, double polar) {
    if (n < 1) throw Error("turntable: need at least one view");
    if (width < 1 || height < 1) throw Error("turntable: image size must be positive");
    std::vector<Camera> cams;
    for (int k = 0; k < n; ++k) {
        const Vec3 eye = spherical(distance, polar, 2.0 * std::numbers::pi * k / n);
        cams.push_back(Camera::look_at(width, height, kToyFov, eye, Vec3::Zero(), Vec3::UnitY()));
    }
    return cams;
}

ToyScene gen_toy_scene(const ToySpec& spec) {
    if (spec.views < 1 || spec.test_views < 0) throw Error("toy scene: need at least one training view");
    if (spec.width < 1 || spec.height < 1) throw Error("toy scene: image size must be positive");
    ToyScene scene;
    std::vector<Vec3> train_eyes, test_eyes;
    Vec3 up = Vec3::UnitY();
    const double two_pi = 2.0 * std::numbers::pi;
    if (spec.name == "textured_quad" || spec.name == "two_planes") {
        if (spec.name == "textured_quad") {
            scene.quads.push_back({Vec3::Zero(), Vec3::UnitX(), Vec3::UnitY(), 1.0, 1.0, 4, spec.seed * 7 + 1});
        } else {
            scene.quads.push_back({Vec3(0, 0, 0.4), Vec3::UnitX(), Vec3::UnitY(), 0.55, 0.55, 8, spec.seed * 7 + 2});
            scene.quads.push_back({Vec3(0, 0, -0.4), Vec3::UnitX(), Vec3::UnitY(), 1.2, 1.2, 8, spec.seed * 7 + 3});
        }
        const double dist = 3.2;
        train_eyes.push_back(Vec3(0, 0, dist));
        for (int k = 1; k < spec.views; ++k) train_eyes.push_back(spherical(dist, 0.5, two_pi * (k - 1) / (spec.views - 1)));
        for (int k = 0; k < spec.test_views; ++k)
            test_eyes.push_back(spherical(dist, 0.3, two_pi * (k + 0.5) / spec.test_views + 0.3));
    } else if (spec.name == "cube") {
        const double h = 0.6;
        const Vec3 X = Vec3::UnitX(), Y = Vec3::UnitY(), Z = Vec3::UnitZ();
        const std::uint64_t s = spec.seed * 7;
        scene.quads = {
            {h * Z, X, Y, h, h, 3, s + 11}, {-h * Z, -X, Y, h, h, 3, s + 12}, {h * X, -Z, Y, h, h, 3, s + 13},
            {-h * X, Z, Y, h, h, 3, s + 14}, {h * Y, X, -Z, h, h, 3, s + 15}, {-h * Y, X, Z, h, h, 3, s + 16},
        };
        const double dist = 3.6, elev = 0.45;
        auto ring = [&](double az) {
            return dist * Vec3(std::cos(elev) * std::sin(az), std::sin(elev), std::cos(elev) * std::cos(az));
        };
        for (int k = 0; k < spec.views; ++k) train_eyes.push_back(ring(two_pi * k / spec.views));
        for (int k = 0; k < spec.test_views; ++k) test_eyes.push_back(ring(two_pi * (k + 0.5) / std::max(spec.test_views, 1)));
    } else {
        throw Error("unknown toy scene '" + spec.name + "' (expected textured_quad, two_planes or cube)");
    }
    Dataset& d = scene.data;
    for (const Vec3& e : train_eyes) {
        d.cameras.push_back(Camera::look_at(spec.width, spec.height, kToyFov, e, Vec3::Zero(), up));
        d.images.push_back(render_quads(scene.quads, d.cameras.back(), spec.supersample, scene.background));
    }
    for (const Vec3& e : test_eyes) {
        d.test_cameras.push_back(Camera::look_at(spec.width, spec.height, kToyFov, e, Vec3::Zero(), up));
        d.test_images.push_back(render_quads(scene.quads, d.test_cameras.back(), spec.supersample, scene.background));
    }
    // Seed points: uniform over the surfaces, area weighted.
    Rng rng(spec.seed ^ 0xC0FFEEull);
    std::vector<double> cum;
    double total = 0.0;
    for (const auto& q : scene.quads) cum.push_back(total += 4.0 * q.half_u * q.half_v);
    for (int i = 0; i < spec.points; ++i) {
        const double pick = rng.uniform() * total;
        const std::size_t k = std::min<std::size_t>(std::upper_bound(cum.begin(), cum.end(), pick) - cum.begin(),
                                                    scene.quads.size() - 1);
        const TexturedQuad& q = scene.quads[k];
        const double s = rng.uniform(), t = rng.uniform();
        d.points.push_back(q.center + (2 * s - 1) * q.half_u * q.u + (2 * t - 1) * q.half_v * q.v);
        d.point_colors.push_back(q.texture(s, t));
    }
    d.validate();
    return scene;
}

// ---------------------------------------------------------------- PLY

const std::vector<double>& PlyTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return columns[i];
    throw FormatError("PLY: missing property '" + name + "'");
}

bool PlyTable::has(const std::string& name) const {
    return std::find(names.begin(), names.end(), name) != names.end();
}

namespace {

int ply_type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" || t == "float32") return 4;
    if (t == "double" || t == "float64") return 8;
    return 0;
}

template <typename T>
T load_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    return v;
}

double ply_binary_value(const std::string& t, const char* p) {
    if (t == "char" || t == "int8") return load_le<std::int8_t>(p);
    if (t == "uchar" || t == "uint8") return load_le<std::uint8_t>(p);
    if (t == "short" || t == "int16") return load_le<std::int16_t>(p);
    if (t == "ushort" || t == "uint16") return load_le<std::uint16_t>(p);
    if (t == "int" || t == "int32") return load_le<std::int32_t>(p);
    if (t == "uint" || t == "uint32") return load_le<std::uint32_t>(p);
    if (t == "float" || t == "float32") return load_le<float>(p);
    return load_le<double>(p);
}

}  // namespace

PlyTable read_ply(const fs::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    const std::string text(bytes.begin(), bytes.end());
    const std::size_t header_end = text.find("end_header\n");
    if (text.rfind("ply", 0) != 0 || header_end == std::string::npos)
        throw FormatError("not a PLY file: " + path.string());
    std::istringstream header(text.substr(0, header_end));
    std::string line, format;
    std::vector<std::string> types;
    PlyTable table;
    bool in_vertex = false, vertex_seen = false;
    while (std::getline(header, line)) {
        std::istringstream ls(line);
        std::string kw;
        ls >> kw;
        if (kw == "format") {
            ls >> format;
        } else if (kw == "element") {
            std::string name;
            std::size_t count = 0;
            ls >> name >> count;
            if (vertex_seen && name != "vertex") break;  // later elements are ignored
            in_vertex = name == "vertex";
            if (in_vertex) {
                vertex_seen = true;
                table.rows = count;
            } else {
                throw FormatError("PLY: elements before 'vertex' are not supported in " + path.string());
            }
        } else if (kw == "property" && in_vertex) {
            std::string type, name;
            ls >> type >> name;
            if (type == "list") throw FormatError("PLY: list properties unsupported in vertex element: " + path.string());
            if (ply_type_size(type) == 0) throw FormatError("PLY: unknown type '" + type + "' in " + path.string());
            types.push_back(type);
            table.names.push_back(name);
        }
    }
    if (!vertex_seen) throw FormatError("PLY: no vertex element in " + path.string());
    table.columns.assign(table.names.size(), std::vector<double>(table.rows));
    const std::size_t body = header_end + std::strlen("end_header\n");
    if (format == "ascii") {
        std::istringstream in(text.substr(body));
        for (std::size_t r = 0; r < table.rows; ++r)
            for (std::size_t c = 0; c < table.names.size(); ++c)
                if (!(in >> table.columns[c][r])) throw FormatError("PLY: truncated ASCII body in " + path.string());
    } else if (format == "binary_little_endian") {
        std::size_t stride = 0;
        for (const auto& t : types) stride += ply_type_size(t);
        if (bytes.size() < body + stride * table.rows) throw FormatError("PLY: truncated binary body in " + path.string());
        const char* p = reinterpret_cast<const char*>(bytes.data()) + body;
        for (std::size_t r = 0; r < table.rows; ++r)
            for (std::size_t c = 0; c < types.size(); ++c) {
                table.columns[c][r] = ply_binary_value(types[c], p);
                p += ply_type_size(types[c]);
            }
    } else {
        throw FormatError("PLY: unsupported format '" + format + "' in " + path.string());
    }
    return table;
}

void write_ply(const fs::path& path, const PlyTable& table) {
    std::ostringstream os;
    os << "ply\nformat binary_little_endian 1.0\nelement vertex " << table.rows << "\n";
    for (const auto& n : table.names) os << "property double " << n << "\n";
    os << "end_header\n";
    std::string out = os.str();
    for (std::size_t r = 0; r < table.rows; ++r)
        for (const auto& col : table.columns) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(col[r]);
            for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
        }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write PLY " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("failed writing PLY " + path.string());
}

void export_ply(const SurfelCloud& cloud, const fs::path& path) {
    cloud.check_consistent();
    PlyTable t;
    t.names = {"x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "opacity", "beta"};
    for (int k = 0; k < cloud.latent_dim; ++k) t.names.push_back("f_latent_" + std::to_string(k));
    t.rows = cloud.size();
    t.columns.assign(t.names.size(), {});
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        std::size_t c = 0;
        for (int k = 0; k < 3; ++k) t.columns[c++].push_back(cloud.position[i][k]);
        for (int k = 0; k < 4; ++k) t.columns[c++].push_back(cloud.rotation[i][k]);
        for (int k = 0; k < 2; ++k) t.columns[c++].push_back(cloud.log_scale[i][k]);
        t.columns[c++].push_back(cloud.opacity_logit[i]);
        t.columns[c++].push_back(cloud.beta[i]);
        for (int k = 0; k < cloud.latent_dim; ++k) t.columns[c++].push_back(cloud.latent_of(i)[k]);
    }
    write_ply(path, t);
}

SurfelCloud import_ply(const fs::path& path) {
    const PlyTable t = read_ply(path);
    SurfelCloud cloud;
    int latent = 0;
    while (t.has("f_latent_" + std::to_string(latent))) ++latent;
    cloud.latent_dim = latent;
    cloud.resize(t.rows);
    for (std::size_t i = 0; i < t.rows; ++i) {
        cloud.position[i] = Vec3(t.column("x")[i], t.column("y")[i], t.column("z")[i]);
        cloud.rotation[i] = Vec4(t.column("rot_0")[i], t.column("rot_1")[i], t.column("rot_2")[i], t.column("rot_3")[i]);
        cloud.log_scale[i] = Vec2(t.column("scale_0")[i], t.column("scale_1")[i]);
        cloud.opacity_logit[i] = t.column("opacity")[i];
        cloud.beta[i] = t.column("beta")[i];
        for (int k = 0; k < latent; ++k) cloud.latent_of(i)[k] = t.column("f_latent_" + std::to_string(k))[i];
    }
    return cloud;
}

// ---------------------------------------------------------------- checkpoints

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("missing file: " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

namespace {

constexpr char kMagic[8] = {'H', 'S', 'P', 'L', 'A', 'T', 'C', 'K'};

class Writer {
public:
    void u32(std::uint32_t v) { raw(v, 4); }
    void u64(std::uint64_t v) { raw(v, 8); }
    void i64(std::int64_t v) { raw(static_cast<std::uint64_t>(v), 8); }
    void f64(double v) { raw(std::bit_cast<std::uint64_t>(v), 8); }
    void str(const std::string& s) {
        u64(s.size());
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void doubles(const std::vector<double>& v) {
        u64(v.size());
        for (double d : v) f64(d);
    }
    void tag(const char (&t)[5]) { bytes.insert(bytes.end(), t, t + 4); }

    std::vector<std::uint8_t> bytes;

private:
    void raw(std::uint64_t v, int n) {
        for (int k = 0; k < n; ++k) bytes.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xFF));
    }
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(raw(4)); }
    std::uint64_t u64() { return raw(8); }
    std::int64_t i64() { return static_cast<std::int64_t>(raw(8)); }
    double f64() { return std::bit_cast<double>(raw(8)); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(p_), n);
        p_ += n;
        return s;
    }
    std::vector<double> doubles() {
        const std::uint64_t n = u64();
        need(n * 8);
        std::vector<double> v(n);
        for (auto& d : v) d = f64();
        return v;
    }
    std::string tag() {
        need(4);
        std::string t(reinterpret_cast<const char*>(p_), 4);
        p_ += 4;
        return t;
    }
    bool done() const { return p_ == end_; }
    Reader sub(std::uint64_t n) {
        need(n);
        Reader r(p_, n);
        p_ += n;
        return r;
    }

private:
    void need(std::uint64_t n) const {
        if (n > static_cast<std::uint64_t>(end_ - p_)) throw CheckpointError("checkpoint section overruns its data");
    }
    std::uint64_t raw(int n) {
        need(n);
        std::uint64_t v = 0;
        for (int k = 0; k < n; ++k) v |= static_cast<std::uint64_t>(p_[k]) << (8 * k);
        p_ += n;
        return v;
    }
    const std::uint8_t* p_;
    const std::uint8_t* end_;
};

void section(Writer& out, const char (&tag)[5], const Writer& body) {
    out.tag(tag);
    out.u64(body.bytes.size());
    out.bytes.insert(out.bytes.end(), body.bytes.begin(), body.bytes.end());
}

std::uint32_t checksum(const std::uint8_t* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
    c.cloud.check_consistent();
    Writer out;
    out.bytes.insert(out.bytes.end(), kMagic, kMagic + 8);
    out.u32(kCheckpointVersion);

    Writer w;
    w.str(c.config_json);
    section(out, "CONF", w);

    w = Writer{};
    w.u32(static_cast<std::uint32_t>(c.cloud.latent_dim));
    w.u64(c.cloud.size());
    for (std::size_t i = 0; i < c.cloud.size(); ++i) {
        for (int k = 0; k < 3; ++k) w.f64(c.cloud.position[i][k]);
        for (int k = 0; k < 4; ++k) w.f64(c.cloud.rotation[i][k]);
        for (int k = 0; k < 2; ++k) w.f64(c.cloud.log_scale[i][k]);
        w.f64(c.cloud.opacity_logit[i]);
        w.f64(c.cloud.beta[i]);
    }
    w.doubles(c.cloud.latent);
    section(out, "CLOD", w);

    w = Writer{};
    const HashGridConfig& g = c.grid.config();
    for (int v : {g.levels, g.resolution, g.min_resolution, g.log2_table_size, g.feature_dim})
        w.u32(static_cast<std::uint32_t>(v));
    for (int k = 0; k < 3; ++k) w.f64(c.grid.aabb_min()[k]);
    for (int k = 0; k < 3; ++k) w.f64(c.grid.aabb_max()[k]);
    w.doubles(c.grid.table());
    section(out, "GRID", w);

    w = Writer{};
    w.u64(c.decoder.widths().size());
    for (int v : c.decoder.widths()) w.u32(static_cast<std::uint32_t>(v));
    w.doubles(c.decoder.params());
    section(out, "DECO", w);

    w = Writer{};
    w.u64(c.optimizer.size());
    for (const auto& [name, st] : c.optimizer) {
        w.str(name);
        w.i64(st.step);
        w.doubles(st.m);
        w.doubles(st.v);
    }
    section(out, "OPTM", w);

    w = Writer{};
    w.i64(c.iteration);
    w.str(c.rng.serialize());
    w.str(c.meta_json);
    section(out, "STAT", w);

    out.u32(checksum(out.bytes.data(), out.bytes.size()));
    return out.bytes;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw CheckpointError(bytes.size() < 12 ? "checkpoint truncated" : "not a checkpoint (bad magic)");
    Reader head(bytes.data() + 8, 4);
    const std::uint32_t version = head.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    if (bytes.size() < 16) throw CheckpointError("checkpoint checksum mismatch (file truncated)");
    Reader tail(bytes.data() + bytes.size() - 4, 4);
    if (tail.u32() != checksum(bytes.data(), bytes.size() - 4))
        throw CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)");

    Checkpoint c;
    Reader r(bytes.data() + 12, bytes.size() - 16);
    std::vector<std::string> seen;
    while (!r.done()) {
        const std::string tag = r.tag();
        Reader b = r.sub(r.u64());
        seen.push_back(tag);
        if (tag == "CONF") {
            c.config_json = b.str();
        } else if (tag == "CLOD") {
            c.cloud.latent_dim = static_cast<int>(b.u32());
            const std::uint64_t n = b.u64();
            c.cloud.resize(0);
            for (std::uint64_t i = 0; i < n; ++i) {
                Vec3 p;
                Vec4 q;
                Vec2 ls;
                for (int k = 0; k < 3; ++k) p[k] = b.f64();
                for (int k = 0; k < 4; ++k) q[k] = b.f64();
                for (int k = 0; k < 2; ++k) ls[k] = b.f64();
                c.cloud.position.push_back(p);
                c.cloud.rotation.push_back(q);
                c.cloud.log_scale.push_back(ls);
                c.cloud.opacity_logit.push_back(b.f64());
                c.cloud.beta.push_back(b.f64());
            }
            c.cloud.latent = b.doubles();
            c.cloud.check_consistent();
        } else if (tag == "GRID") {
            HashGridConfig g;
            g.levels = static_cast<int>(b.u32());
            g.resolution = static_cast<int>(b.u32());
            g.min_resolution = static_cast<int>(b.u32());
            g.log2_table_size = static_cast<int>(b.u32());
            g.feature_dim = static_cast<int>(b.u32());
            Vec3 lo, hi;
            for (int k = 0; k < 3; ++k) lo[k] = b.f64();
            for (int k = 0; k < 3; ++k) hi[k] = b.f64();
            c.grid = HashGrid(g, lo, hi);
            std::vector<double> table = b.doubles();
            if (table.size() != c.grid.table().size()) throw CheckpointError("checkpoint hash table size mismatch");
            c.grid.table() = std::move(table);
        } else if (tag == "DECO") {
            std::vector<int> widths(b.u64());
            for (int& v : widths) v = static_cast<int>(b.u32());
            if (widths.size() < 3) throw CheckpointError("checkpoint decoder needs at least one hidden layer");
            for (std::size_t k = 2; k + 1 < widths.size(); ++k)
                if (widths[k] != widths[1]) throw CheckpointError("checkpoint decoder hidden widths differ");
            c.decoder = Decoder(widths.front(), widths[1], static_cast<int>(widths.size()) - 2, widths.back());
            std::vector<double> params = b.doubles();
            if (params.size() != c.decoder.parameter_count())
                throw CheckpointError("checkpoint decoder parameter count mismatch");
            c.decoder.params() = std::move(params);
        } else if (tag == "OPTM") {
            const std::uint64_t n = b.u64();
            for (std::uint64_t i = 0; i < n; ++i) {
                const std::string name = b.str();
                AdamState st;
                st.step = b.i64();
                st.m = b.doubles();
                st.v = b.doubles();
                c.optimizer[name] = std::move(st);
            }
        } else if (tag == "STAT") {
            c.iteration = b.i64();
            c.rng.deserialize(b.str());
            c.meta_json = b.str();
        } else {
            throw CheckpointError("checkpoint has unknown section '" + tag + "'");
        }
        if (!b.done()) throw CheckpointError("checkpoint section '" + tag + "' has trailing bytes");
    }
    for (const char* required : {"CONF", "CLOD", "GRID", "DECO", "OPTM", "STAT"})
        if (std::find(seen.begin(), seen.end(), required) == seen.end())
            throw CheckpointError(std::string("checkpoint lacks section '") + required + "'");
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw Error("cannot write checkpoint " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw Error("failed writing checkpoint " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    try {
        return deserialize_checkpoint(read_file_bytes(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace hsplat
