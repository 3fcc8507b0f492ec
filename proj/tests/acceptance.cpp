// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Optional arguments select criteria by number.

#include "cli.hpp"

#include "hsplat/metrics.hpp"
#include "hsplat/train.hpp"

#include "gradcheck.hpp"
#include "render_reference.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace hsplat;
using namespace hsplat::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Verdict {
    bool pass = true;
    std::vector<std::string> notes;

    void require(bool ok, const std::string& what) {
        pass = pass && ok;
        notes.push_back((ok ? "" : "!! ") + what);
    }
};

int cli_run(std::vector<std::string> args) {
    args.insert(args.begin(), "hsplat");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) std::cerr << "hsplat " << args[1] << " failed: " << err.str();
    return code;
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> v;
    for (std::string l; std::getline(f, l);) v.push_back(l);
    return v;
}

std::string read_text(const fs::path& p) {
    std::ifstream f(p);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Work {
    fs::path root;
    // Lazily produced training runs shared by several criteria.
    std::map<std::string, double> run_seconds;

    fs::path run(const std::string& name, const std::vector<std::string>& args) {
        const fs::path dir = root / name;
        if (fs::exists(dir / "checkpoint.hsck")) return dir;
        std::vector<std::string> full{"train", "--out", dir.string(), "--quiet"};
        full.insert(full.end(), args.begin(), args.end());
        std::cerr << "training " << name << " ..." << std::endl;
        const auto t0 = Clock::now();
        if (cli_run(full) != 0) throw Error("training run " + name + " failed");
        run_seconds[name] = seconds_since(t0);
        std::cerr << "  done in " << fmt("%.1f", run_seconds[name]) << " s" << std::endl;
        return dir;
    }

    // Desk preset on the textured quad, with and without the binarization phase.
    fs::path quad_bce() {
        return run("quad_bce", {"--toy", "textured_quad", "--preset", "desk", "--log-every", "1",
                                "--checkpoint-every", std::to_string(TrainConfig::desk().bce_start())});
    }
    fs::path quad_no_bce() {
        return run("quad_no_bce", {"--toy", "textured_quad", "--preset", "desk", "--log-every", "1", "--no-bce"});
    }
    fs::path two_planes() { return run("two_planes", {"--toy", "two_planes", "--preset", "desk"}); }
};

ToyScene desk_toy(const std::string& name) {
    ToySpec spec;
    spec.name = name;
    return gen_toy_scene(spec);
}

double opacity_fraction(const SurfelCloud& c, double lo, double hi) {
    if (c.empty()) return 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.size(); ++i) n += c.opacity(i) >= lo && c.opacity(i) <= hi;
    return static_cast<double>(n) / static_cast<double>(c.size());
}

std::size_t live_count(const SurfelCloud& c) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.size(); ++i) n += c.opacity(i) > 0.01;
    return n;
}

// ---------------------------------------------------------------------------

Verdict gradients(Work&) {
    Verdict v;
    const auto t0 = Clock::now();
    GradCheckScene s = make_gradcheck_scene(2024, 8, 24, KernelMode::beta);
    const auto report = gradient_check(s, 1e-3, 1e-2, 400, 400, 1e-4);
    for (const char* cls : {"position", "rotation", "scale", "opacity", "beta", "latent", "hash_table", "decoder"}) {
        const auto it = report.find(cls);
        const bool ok = it != report.end() && it->second.checked > 0 && it->second.failures == 0;
        v.require(ok, it == report.end() ? fmt("%s unchecked", cls)
                                         : fmt("%s %d/%d worst %.1e", cls, it->second.checked - it->second.failures,
                                               it->second.checked, it->second.worst));
    }
    const double secs = seconds_since(t0);
    v.require(secs < 120.0, fmt("%.1f s < 120 s", secs));
    return v;
}

Verdict compositing(Work&) {
    Verdict v;
    int exact = 0, weight_ok = 0, null_ok = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(900 + seed);
        SurfelCloud cloud = random_cloud(rng, 12, 4);
        const HashGrid grid = random_grid(rng, 12, 12, 6, 1);
        Decoder dec(4 + 6 + kShDim, 16);
        dec.initialize(rng);
        const Camera cam = test_camera(16, 16);
        RenderConfig cfg;
        cfg.tile_size = 4;
        const FrameBundle b = render(cloud, grid, dec, cam, cfg);
        const ReferenceFrame ref = reference_render(cloud, grid, dec, cam, cfg);
        exact += b.rgb.data == ref.rgb.data && b.alpha == ref.alpha && b.depth == ref.depth &&
                 b.features == ref.features && b.blends == ref.blends;
        bool sums = true;
        for (std::size_t p = 0; p < b.pixel_count(); ++p) {
            double sum = 0.0;
            for (const Contribution& c : b.contributions_of(p)) sum += c.weight;
            sums = sums && std::abs(sum - b.alpha[p]) <= 1e-12 && b.alpha[p] >= 0.0 && b.alpha[p] <= 1.0;
        }
        weight_ok += sums;
        Surfel null = cloud.get(rng.below(cloud.size()));
        null.opacity_logit = -std::numeric_limits<double>::infinity();
        null.position += Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
        cloud.push_back(null);
        const FrameBundle c = render(cloud, grid, dec, cam, cfg);
        null_ok += c.rgb.data == b.rgb.data && c.alpha == b.alpha && c.depth == b.depth;
    }
    v.require(exact == 20, fmt("tiled == reference bit-exact on %d/20 scenes", exact));
    v.require(weight_ok == 20, fmt("sum of weights == alpha in [0,1] on %d/20", weight_ok));
    v.require(null_ok == 20, fmt("opacity-0 surfel leaves output unchanged on %d/20", null_ok));
    return v;
}

Verdict kernel(Work&) {
    Verdict v;
    bool units = true;
    for (double b : {-8.0, -2.0, 0.0, 1.5, 8.0}) units = units && beta_kernel(0.0, b) == 1.0 && beta_kernel(1.0, b) == 0.0;
    v.require(units, "B(0,b) = 1 and B(1,b) = 0");
    v.require(beta_kernel(0.5, 0.0) == 0.25, fmt("B(0.5,0) = %.17g", beta_kernel(0.5, 0.0)));
    // 100 x 100 grid over (r2, b).
    constexpr int n = 100;
    int range = 0, mono_r = 0, mono_b = 0, total = 0;
    for (int bi = 0; bi < n; ++bi) {
        const double b = -12.0 + 24.0 * bi / (n - 1);
        for (int ri = 0; ri < n; ++ri, ++total) {
            const double r2 = static_cast<double>(ri) / (n - 1);
            const double e = beta_exponent(b);
            range += e > 0.0 && e < 4.0;
            mono_r += ri == 0 || beta_kernel(r2, b) <= beta_kernel(static_cast<double>(ri - 1) / (n - 1), b);
            mono_b += bi == 0 || beta_kernel(r2, b) <= beta_kernel(r2, -12.0 + 24.0 * (bi - 1) / (n - 1));
        }
    }
    v.require(range == total, fmt("beta(b) in (0,4) at %d/%d", range, total));
    v.require(mono_r == total, fmt("non-increasing in r2 at %d/%d", mono_r, total));
    v.require(mono_b == total, fmt("non-increasing in b at %d/%d", mono_b, total));
    return v;
}

Verdict reconstruction(Work& w) {
    Verdict v;
    const fs::path dir = w.quad_bce();
    const EvalReport train = EvalReport::from_json(read_text(dir / "eval_train.json"));
    const EvalReport test = EvalReport::from_json(read_text(dir / "eval.json"));
    const Checkpoint ck = load_checkpoint(dir / "checkpoint.hsck");
    v.require(train.mean_psnr >= 28.0, fmt("train PSNR %.2f dB >= 28", train.mean_psnr));
    v.require(test.mean_psnr >= 25.0, fmt("held-out PSNR %.2f dB >= 25", test.mean_psnr));
    v.require(ck.cloud.size() <= 256, fmt("%zu surfels <= 256", ck.cloud.size()));
    v.require(ck.iteration == 2000, fmt("%lld iterations", static_cast<long long>(ck.iteration)));
    if (w.run_seconds.count("quad_bce")) {
        const double s = w.run_seconds["quad_bce"];
        v.require(s <= 600.0, fmt("%.0f s <= 600 s", s));
    }
    return v;
}

Verdict overdraw(Work& w) {
    Verdict v;
    const Checkpoint ck = load_checkpoint(w.quad_bce() / "checkpoint.hsck");
    const ToyScene scene = desk_toy("textured_quad");
    const RenderConfig rc = checkpoint_render_config(ck);
    std::vector<double> blends;
    for (double b : {4.0, 0.0, -4.0}) {
        SurfelCloud c = ck.cloud;
        std::fill(c.beta.begin(), c.beta.end(), b);
        double sum = 0.0;
        for (const Camera& cam : scene.data.cameras) sum += blend_stats(render(c, ck.grid, ck.decoder, cam, rc)).mean;
        blends.push_back(sum / static_cast<double>(scene.data.cameras.size()));
    }
    v.require(blends[0] > blends[1] && blends[1] > blends[2],
              fmt("blends/pixel b=+4: %.3f, b=0: %.3f, b=-4: %.3f strictly decreasing", blends[0], blends[1], blends[2]));
    return v;
}

Verdict sparsification(Work& w) {
    Verdict v;
    const fs::path with = w.quad_bce(), without = w.quad_no_bce();
    const Checkpoint a = load_checkpoint(with / "checkpoint.hsck");
    const Checkpoint b = load_checkpoint(without / "checkpoint.hsck");
    const std::size_t la = live_count(a.cloud), lb = live_count(b.cloud);
    v.require(static_cast<double>(la) <= 0.7 * static_cast<double>(lb),
              fmt("surfels with opacity > 0.01: %zu vs %zu (%.0f%% fewer, need >= 30%%)", la, lb,
                  100.0 * (1.0 - static_cast<double>(la) / static_cast<double>(lb))));
    const double pa = EvalReport::from_json(read_text(with / "eval_train.json")).mean_psnr;
    const double pb = EvalReport::from_json(read_text(without / "eval_train.json")).mean_psnr;
    v.require(pb - pa <= 1.5, fmt("PSNR %.2f vs %.2f dB (drop %.2f <= 1.5)", pa, pb, pb - pa));
    const ToyScene scene = desk_toy("textured_quad");
    const BenchResult ta = bench_render(a, scene.data.cameras, 21);
    const BenchResult tb = bench_render(b, scene.data.cameras, 21);
    v.require(ta.median_ms < tb.median_ms, fmt("median render %.3f ms < %.3f ms", ta.median_ms, tb.median_ms));
    const std::int64_t start = TrainConfig::desk().bce_start();
    const Checkpoint at_start = load_checkpoint(with / fmt("checkpoint_%06lld.hsck", static_cast<long long>(start)));
    const double mid0 = opacity_fraction(at_start.cloud, 0.1, 0.9), mid1 = opacity_fraction(a.cloud, 0.1, 0.9);
    v.require(mid1 < mid0, fmt("mid-opacity fraction %.3f -> %.3f across the binarization phase", mid0, mid1));
    return v;
}

Verdict relocation(Work& w) {
    Verdict v;
    // Counts along the desk run.
    const TrainConfig desk = TrainConfig::desk();
    std::size_t first = 0, max_n = 0, relocated = 0;
    bool constant = true;
    for (const std::string& line : read_lines(w.quad_bce() / "train_log.jsonl")) {
        const auto j = nlohmann::json::parse(line);
        if (!j.contains("n_surfels")) continue;
        const std::size_t n = j["n_surfels"].get<std::size_t>();
        if (first == 0) first = n;
        max_n = std::max(max_n, n);
        relocated += j["relocated"].get<std::size_t>();
        if (j["phase"] != "bce") constant = constant && n == first;
    }
    v.require(constant && relocated > 0, fmt("count constant at %zu through %zu relocations", first, relocated));
    v.require(max_n <= static_cast<std::size_t>(desk.mcmc_cap), fmt("max count %zu <= cap %d", max_n, desk.mcmc_cap));

    // Split rule over a grid of donor opacities, and on an actual relocation.
    double worst = 0.0;
    for (int i = 1; i < 10000; ++i) {
        const double o = i / 10000.0;
        const double n = split_opacity(o);
        worst = std::max(worst, std::abs((1 - n) * (1 - n) - (1 - o)));
    }
    Rng rng(77);
    SurfelCloud cloud = random_cloud(rng, 40, 4);
    for (std::size_t i = 0; i < cloud.size(); ++i) cloud.opacity_logit[i] = logit(i % 4 == 0 ? 1e-3 : rng.uniform(0.2, 0.9));
    const SurfelCloud before = cloud;
    std::map<std::string, AdamState> adam;
    const RelocationResult r = relocate_dead(cloud, adam, desk, rng);
    for (std::size_t k = 0; k < r.dead.size(); ++k) {
        const double o = before.opacity(r.donors[k]);
        for (std::uint32_t idx : {r.dead[k], r.donors[k]}) {
            const double n = cloud.opacity(idx);
            // Donors drawn twice split again; only check first-time splits.
            if (std::count(r.donors.begin(), r.donors.end(), r.donors[k]) == 1)
                worst = std::max(worst, std::abs((1 - n) * (1 - n) - (1 - o)));
        }
    }
    v.require(worst <= 1e-7 && cloud.size() == before.size(),
              fmt("(1-o_new)^2 = 1-o_donor within %.1e; count %zu -> %zu", worst, before.size(), cloud.size()));

    // Chi-square goodness of fit of donor draws (4 degrees of freedom).
    SurfelCloud pool = random_cloud(rng, 25, 4);
    const std::vector<double> live{0.9, 0.15, 0.4, 0.25, 0.6};
    for (std::size_t i = 0; i < pool.size(); ++i) pool.opacity_logit[i] = logit(i < live.size() ? live[i] : 1e-3);
    const int draws = 10000;
    std::vector<int> counts(live.size(), 0);
    bool in_pool = true;
    for (std::uint32_t d : sample_donors(pool, desk.dead_threshold, draws, rng)) {
        if (d < live.size()) ++counts[d];
        else in_pool = false;
    }
    double total = 0.0, chi2 = 0.0;
    for (std::size_t i = 0; i < live.size(); ++i) total += pool.opacity(i);
    for (std::size_t i = 0; i < live.size(); ++i) {
        const double e = draws * pool.opacity(i) / total;
        chi2 += (counts[i] - e) * (counts[i] - e) / e;
    }
    const double p = std::exp(-chi2 / 2) * (1 + chi2 / 2);  // chi-square survival function, 4 dof
    v.require(in_pool && p > 0.01, fmt("chi2 = %.3f, p = %.3f > 0.01 over %d draws", chi2, p, draws));
    return v;
}

Verdict decomposition(Work& w) {
    Verdict v;
    const Checkpoint ck = load_checkpoint(w.two_planes() / "checkpoint.hsck");
    const ToyScene scene = desk_toy("two_planes");
    const RenderConfig rc = checkpoint_render_config(ck);
    bool additive = true;
    int fg = 0, lower = 0;
    for (const Camera& cam : scene.data.cameras) {
        const FrameBundle full = render(ck.cloud, ck.grid, ck.decoder, cam, rc);
        const FrameBundle so = render_decomposed(ck.cloud, ck.grid, ck.decoder, cam, rc, DecomposeMode::surfel_only);
        const FrameBundle ho = render_decomposed(ck.cloud, ck.grid, ck.decoder, cam, rc, DecomposeMode::hash_only);
        for (std::size_t i = 0; i < full.features.size(); ++i)
            additive = additive && full.features[i] == so.features[i] + ho.features[i];
        const int W = cam.width, H = cam.height;
        auto variance = [&](const Image& im, int bx, int by) {
            double v = 0.0;
            for (int c = 0; c < 3; ++c) {
                double m = 0.0, m2 = 0.0;
                for (int y = by; y < by + 8; ++y)
                    for (int x = bx; x < bx + 8; ++x) {
                        const double q = im.at(x, y, c);
                        m += q;
                        m2 += q * q;
                    }
                v += m2 / 64 - (m / 64) * (m / 64);
            }
            return v;
        };
        for (int by = 0; by + 8 <= H; by += 8)
            for (int bx = 0; bx + 8 <= W; bx += 8) {
                bool foreground = true;
                for (int y = by; y < by + 8 && foreground; ++y)
                    for (int x = bx; x < bx + 8 && foreground; ++x) {
                        Vec3 col;
                        double t;
                        foreground = raycast_quads(scene.quads, cam.pixel_ray(x, y), col, t);
                    }
                if (!foreground) continue;
                ++fg;
                lower += variance(so.rgb, bx, by) < variance(full.rgb, bx, by);
            }
    }
    v.require(additive, "full features == surfel-only + hash-only features exactly");
    const double frac = fg ? static_cast<double>(lower) / fg : 0.0;
    v.require(fg > 0 && frac >= 0.9, fmt("surfel-only variance lower in %d/%d foreground blocks (%.1f%% >= 90%%)",
                                         lower, fg, 100.0 * frac));
    return v;
}

Verdict determinism(Work& w) {
    Verdict v;
    const std::vector<std::string> toy{"--toy", "two_planes", "--toy-size", "32", "--toy-views", "3", "--toy-points",
                                       "400", "--preset", "desk", "--iters", "90", "--threads", "1", "--log-every", "1"};
    auto with = [&](std::vector<std::string> extra) {
        std::vector<std::string> a = toy;
        a.insert(a.end(), extra.begin(), extra.end());
        return a;
    };
    const fs::path a = w.run("det_a", toy), b = w.run("det_b", toy);
    const fs::path c = w.run("det_c", with({"--checkpoint-every", "45"}));
    v.require(read_file_bytes(a / "checkpoint.hsck") == read_file_bytes(b / "checkpoint.hsck"),
              "identical runs give byte-identical checkpoints");
    bool renders = true;
    for (const fs::path& run : {a, b}) {
        if (cli_run({"render", "--checkpoint", (run / "checkpoint.hsck").string(), "--turntable", "3", "--out",
                     (run / "renders").string()}) != 0)
            renders = false;
    }
    for (const char* f : {"view_000.png", "view_001.png", "view_002.png"})
        renders = renders && read_file_bytes(a / "renders" / f) == read_file_bytes(b / "renders" / f);
    v.require(renders, "renders of both checkpoints are byte-identical");

    const Checkpoint mid = load_checkpoint(c / "checkpoint_000045.hsck");
    const bool round_trip = deserialize_checkpoint(serialize_checkpoint(mid)) == mid;
    const fs::path d = w.root / "det_d";
    const int code = cli_run({"train", "--out", d.string(), "--quiet", "--resume", (c / "checkpoint_000045.hsck").string(),
                              "--toy", "two_planes", "--toy-size", "32", "--toy-views", "3", "--toy-points", "400"});
    const auto full = read_lines(a / "train_log.jsonl");
    const auto tail = read_lines(d / "train_log.jsonl");
    const bool log_ok = code == 0 && full.size() == 91 && tail.size() == 46 &&
                        std::equal(tail.begin(), tail.end(), full.begin() + 45);
    v.require(round_trip, "checkpoint serialization round trip is exact");
    v.require(log_ok && read_file_bytes(d / "checkpoint.hsck") == read_file_bytes(a / "checkpoint.hsck"),
              "resume at 45/90 reproduces the uninterrupted log and final checkpoint");
    return v;
}

Verdict loss_values(Work&) {
    Verdict v;
    const std::vector<double> half{0.0};  // sigmoid(0) = 0.5
    const double bce = bce_loss(half).value;
    v.require(std::abs(bce - std::log(2.0)) <= 1e-9, fmt("BCE(0.5) = %.12f vs ln 2", bce));

    FrameBundle b;
    b.width = 1;
    b.height = 1;
    b.offsets = {0, 2};
    const double w1 = 0.3, w2 = 0.45, t1 = 1.25, t2 = 2.0;
    Contribution c;
    c.weight = w1;
    c.t = t1;
    b.contributions.push_back(c);
    c.weight = w2;
    c.t = t2;
    b.contributions.push_back(c);
    const double dist = distortion_loss(b).value;
    v.require(std::abs(dist - 2 * w1 * w2 * (t2 - t1)) <= 1e-9, fmt("distortion %.12f vs 2 w1 w2 dt", dist));

    Rng rng(5);
    Image x(17, 13, 3);
    for (double& p : x.data) p = rng.uniform();
    v.require(std::abs(ssim(x, x) - 1.0) <= 1e-9, fmt("SSIM(x,x) = %.15f", ssim(x, x)));

    Image g(10, 10, 3, 0.4), p(10, 10, 3, 0.5);
    const double db = psnr(p, g);
    v.require(std::abs(db - 20.0) <= 1e-9, fmt("PSNR(MSE=0.01) = %.12f dB", db));
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    Work work;
    work.root = fs::temp_directory_path() / ("hsplat_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(work.root);

    const std::vector<std::tuple<int, std::string, std::function<Verdict(Work&)>>> criteria{
        {1, "gradient correctness", gradients},
        {2, "compositing oracle", compositing},
        {3, "kernel analytics", kernel},
        {4, "end-to-end reconstruction", reconstruction},
        {5, "overdraw vs kernel shape", overdraw},
        {6, "opacity binarization sparsifies", sparsification},
        {7, "relocation invariants", relocation},
        {8, "decomposition", decomposition},
        {9, "determinism and persistence", determinism},
        {10, "loss unit values", loss_values},
    };
    int failed = 0;
    for (const auto& [id, name, check] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        try {
            v = check(work);
        } catch (const std::exception& e) {
            v.require(false, std::string("exception: ") + e.what());
        }
        failed += !v.pass;
        std::string detail;
        for (const auto& n : v.notes) detail += (detail.empty() ? "" : "; ") + n;
        std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << ": " << detail << std::endl;
    }
    fs::remove_all(work.root);
    std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed"))
              << std::endl;
    return failed ? 1 : 0;
}
