#include "hsplat/metrics.hpp"

#include "hsplat/train.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

namespace hsplat {

using nlohmann::json;

namespace {

void require_same_shape(const Image& a, const Image& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("psnr: image dimensions differ (" + std::to_string(a.width) + "x" +
                             std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                             std::to_string(b.height) + ")");
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// JSON has no infinity; the identical-image sentinel travels as a string.
json encode(double v) { return std::isinf(v) ? json(v > 0 ? "inf" : "-inf") : json(v); }

double decode(const json& j) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "inf") return kPsnrIdentical;
        if (s == "-inf") return -kPsnrIdentical;
        throw FormatError("eval report: bad number '" + s + "'");
    }
    return j.get<double>();
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double mse(const Image& pred, const Image& gt) {
    require_same_shape(pred, gt);
    if (pred.data.empty()) throw DimensionError("psnr: empty image");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - gt.data[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.data.size());
}

double psnr(const Image& pred, const Image& gt) {
    const double m = mse(pred, gt);
    if (m == 0.0) return kPsnrIdentical;
    return -10.0 * std::log10(m);
}

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) throw Error("chamfer: empty point set");
    auto one_way = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
        double sum = 0.0;
        for (const Vec3& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec3& q : to) best = std::min(best, (p - q).squaredNorm());
            sum += std::sqrt(best);
        }
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (one_way(a, b) + one_way(b, a));
}

RenderConfig checkpoint_render_config(const Checkpoint& ckpt) {
    const TrainConfig cfg = config_from_json(ckpt.config_json);
    // A checkpoint taken after k iterations holds the representation of iteration k - 1.
    const Phase phase = ckpt.iteration == 0 ? Phase::warmup : cfg.phase_at(ckpt.iteration - 1);
    RenderConfig rc = render_config_for(cfg, phase);
    rc.save_for_backward = false;
    return rc;
}

std::string BenchResult::to_json() const {
    json j;
    j["ms"] = ms;
    j["median_ms"] = median_ms;
    j["mean_blends"] = blends.mean;
    j["p50_blends"] = blends.p50;
    j["p95_blends"] = blends.p95;
    j["n_surfels"] = n_surfels;
    return j.dump();
}

BenchResult bench_render(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                         const std::vector<Camera>& cameras, RenderConfig cfg, int repeats) {
    if (cameras.empty()) throw Error("bench: no cameras");
    if (repeats < 1) throw Error("bench: repeats must be >= 1");
    cfg.save_for_backward = false;
    BenchResult out;
    out.n_surfels = cloud.size();
    std::vector<BlendStats> stats;
    for (const Camera& cam : cameras) stats.push_back(blend_stats(render(cloud, grid, decoder, cam, cfg)));
    for (const BlendStats& s : stats) {
        out.blends.mean += s.mean / static_cast<double>(stats.size());
        out.blends.p50 += s.p50 / static_cast<double>(stats.size());
        out.blends.p95 += s.p95 / static_cast<double>(stats.size());
        out.blends.total += s.total;
        out.blends.skipped_by_floor += s.skipped_by_floor;
    }
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        for (const Camera& cam : cameras) render(cloud, grid, decoder, cam, cfg);
        out.ms.push_back(elapsed_ms(t0) / static_cast<double>(cameras.size()));
    }
    out.median_ms = median(out.ms);
    return out;
}

BenchResult bench_render(const Checkpoint& ckpt, const std::vector<Camera>& cameras, int repeats) {
    return bench_render(ckpt.cloud, ckpt.grid, ckpt.decoder, cameras, checkpoint_render_config(ckpt), repeats);
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-6s %10s %8s\n", "view", "PSNR", "SSIM");
    os << line;
    for (std::size_t i = 0; i < psnr.size(); ++i) {
        std::snprintf(line, sizeof line, "%-6zu %10.4f %8.5f\n", i, psnr[i], ssim[i]);
        os << line;
    }
    std::snprintf(line, sizeof line, "%-6s %10.4f %8.5f\n", "mean", mean_psnr, mean_ssim);
    os << line;
    std::snprintf(line, sizeof line, "surfels %zu  blends/pixel mean %.3f p50 %.1f p95 %.1f  %.3f ms/frame\n",
                  n_surfels, mean_blends, p50_blends, p95_blends, ms_per_frame);
    os << line;
    return os.str();
}

std::string EvalReport::to_json() const {
    json j;
    j["psnr"] = json::array();
    for (double v : psnr) j["psnr"].push_back(encode(v));
    j["ssim"] = ssim;
    j["mean_psnr"] = encode(mean_psnr);
    j["mean_ssim"] = mean_ssim;
    j["mean_blends"] = mean_blends;
    j["p50_blends"] = p50_blends;
    j["p95_blends"] = p95_blends;
    j["n_surfels"] = n_surfels;
    j["ms_per_frame"] = ms_per_frame;
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        EvalReport r;
        for (const json& v : j.at("psnr")) r.psnr.push_back(decode(v));
        r.ssim = j.at("ssim").get<std::vector<double>>();
        r.mean_psnr = decode(j.at("mean_psnr"));
        r.mean_ssim = j.at("mean_ssim").get<double>();
        r.mean_blends = j.at("mean_blends").get<double>();
        r.p50_blends = j.at("p50_blends").get<double>();
        r.p95_blends = j.at("p95_blends").get<double>();
        r.n_surfels = j.at("n_surfels").get<std::size_t>();
        r.ms_per_frame = j.at("ms_per_frame").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
}

EvalReport evaluate(const SurfelCloud& cloud, const HashGrid& grid, const Decoder& decoder,
                    const std::vector<Camera>& cameras, const std::vector<Image>& images, RenderConfig cfg) {
    if (cameras.empty()) throw Error("eval: no views to evaluate");
    if (cameras.size() != images.size()) throw Error("eval: camera and image counts differ");
    cfg.save_for_backward = false;
    EvalReport r;
    r.n_surfels = cloud.size();
    std::vector<double> times, blends_mean, blends_p50, blends_p95;
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const FrameBundle fb = render(cloud, grid, decoder, cameras[i], cfg);
        times.push_back(elapsed_ms(t0));
        r.psnr.push_back(psnr(fb.rgb, images[i]));
        r.ssim.push_back(ssim(fb.rgb, images[i]));
        const BlendStats s = blend_stats(fb);
        blends_mean.push_back(s.mean);
        blends_p50.push_back(s.p50);
        blends_p95.push_back(s.p95);
    }
    r.mean_psnr = mean(r.psnr);
    r.mean_ssim = mean(r.ssim);
    r.mean_blends = mean(blends_mean);
    r.p50_blends = mean(blends_p50);
    r.p95_blends = mean(blends_p95);
    r.ms_per_frame = median(times);
    return r;
}

EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Camera>& cameras, const std::vector<Image>& images) {
    return evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, cameras, images, checkpoint_render_config(ckpt));
}

}  // namespace hsplat
