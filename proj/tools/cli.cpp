#include "cli.hpp"

#include "hsplat/metrics.hpp"
#include "hsplat/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace hsplat::cli {

namespace {

struct ConfigError : Error {
    using Error::Error;
};

struct Common {
    std::uint64_t seed = 0;
    int threads = 1;
};

struct Source {
    std::string data;
    std::string toy;
    std::string split = "test";
    int size = 64;
    int views = 6;
    int test_views = 2;
    int supersample = 4;
    int points = 2000;
};

struct TrainOptions {
    Common common;
    Source source;
    std::string out = "run";
    std::string preset = "desk";
    std::string config;
    std::string resume;
    std::int64_t iters = 0;
    std::string kernel = "beta";
    bool no_beta = false;
    bool no_bce = false;
    bool no_mcmc = false;
    int cap = 0;
    int log_every = 0;
    std::int64_t checkpoint_every = 0;
    bool quiet = false;
};

struct RenderOptions {
    Common common;
    Source source;
    std::string checkpoint;
    std::string out = "renders";
    std::string mode = "full";
    int turntable = 0;
    int width = 64;
    int height = 64;
    bool aux = false;
};

struct EvalOptions {
    Common common;
    Source source;
    std::string checkpoint;
    std::string out;
};

struct BenchOptions {
    Common common;
    Source source;
    std::vector<std::string> checkpoints;
    int repeats = 20;
    int turntable = 8;
    int width = 64;
    int height = 64;
    std::string out;
};

struct ExportOptions {
    std::string checkpoint;
    std::string out = "surfels.ply";
};

struct GenOptions {
    Common common;
    Source source;
    std::string out = "scene";
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--seed", c.seed, "Seed for every random choice");
    app->add_option("--threads", c.threads, "Worker threads (1 is fully deterministic)")->check(CLI::PositiveNumber);
}

void add_source(CLI::App* app, Source& s, bool with_split) {
    app->add_option("--data", s.data, "Dataset directory with transforms_*.json");
    app->add_option("--toy", s.toy, "Generated toy scene instead of --data")->check(CLI::IsMember(toy_scene_names()));
    if (with_split) app->add_option("--split", s.split, "Views to use")->check(CLI::IsMember({"train", "test"}));
    app->add_option("--toy-size", s.size, "Toy image width and height")->check(CLI::PositiveNumber);
    app->add_option("--toy-views", s.views, "Toy training views")->check(CLI::PositiveNumber);
    app->add_option("--toy-test-views", s.test_views, "Toy held-out views")->check(CLI::NonNegativeNumber);
    app->add_option("--toy-supersample", s.supersample, "Toy supersampling per axis")->check(CLI::PositiveNumber);
    app->add_option("--toy-points", s.points, "Toy seed point count")->check(CLI::NonNegativeNumber);
}

bool has_source(const Source& s) { return !s.data.empty() || !s.toy.empty(); }

Dataset load_source(const Source& s, std::uint64_t seed) {
    if (!s.data.empty() && !s.toy.empty()) throw ConfigError("--data and --toy are mutually exclusive");
    if (!s.data.empty()) return load_nerf_synthetic(s.data);
    if (s.toy.empty()) throw ConfigError("a dataset is required (--data DIR or --toy NAME)");
    ToySpec spec;
    spec.name = s.toy;
    spec.width = spec.height = s.size;
    spec.views = s.views;
    spec.test_views = s.test_views;
    spec.supersample = s.supersample;
    spec.points = s.points;
    spec.seed = seed;
    return gen_toy_scene(spec).data;
}

const std::vector<Camera>& split_cameras(const Dataset& d, const std::string& split) {
    return split == "train" ? d.cameras : d.test_cameras;
}
const std::vector<Image>& split_images(const Dataset& d, const std::string& split) {
    return split == "train" ? d.images : d.test_images;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingFileError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
    if (!f) throw Error("cannot write " + p.string());
}

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw Error("cannot create directory " + p.string());
}

std::string indexed(const std::string& stem, std::size_t i, std::size_t n, const std::string& suffix) {
    int digits = 3;
    for (std::size_t m = n > 0 ? n - 1 : 0; m >= 1000; m /= 10) ++digits;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", digits, i);
    return stem + buf + suffix;
}

TrainConfig build_config(const TrainOptions& o, const CLI::App& sub) {
    TrainConfig cfg = o.preset == "paper" ? TrainConfig::paper() : TrainConfig::desk();
    try {
        if (!o.config.empty()) cfg = config_from_json(read_text(o.config), cfg);
    } catch (const MissingFileError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (sub.count("--seed")) cfg.seed = o.common.seed;
    if (sub.count("--threads")) cfg.threads = o.common.threads;
    if (sub.count("--iters")) {
        if (o.iters < 0) throw ConfigError("--iters must be non-negative");
        const double f = cfg.total_iters > 0 ? static_cast<double>(o.iters) / cfg.total_iters : 0.0;
        const std::int64_t bce = cfg.bce_start();
        cfg.warmup_iters = std::llround(f * cfg.warmup_iters);
        cfg.bce_start_iter = std::llround(f * bce);
        cfg.total_iters = o.iters;
    }
    if (sub.count("--kernel")) cfg.kernel = o.kernel;
    if (o.no_beta) cfg.beta_enabled = false;
    if (o.no_bce) cfg.bce_enabled = false;
    if (o.no_mcmc) cfg.mcmc_enabled = false;
    if (sub.count("--cap")) cfg.mcmc_cap = o.cap;
    if (sub.count("--log-every")) cfg.log_every = o.log_every;
    try {
        cfg.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

int cmd_train(const TrainOptions& o, const CLI::App& sub, std::ostream& out) {
    std::optional<Checkpoint> resume;
    TrainConfig cfg;
    if (!o.resume.empty()) {
        resume = load_checkpoint(o.resume);
        cfg = config_from_json(resume->config_json);
    } else {
        cfg = build_config(o, sub);
    }
    const Dataset data = load_source(o.source, cfg.seed);
    const fs::path dir = o.out;
    make_dir(dir);
    write_text(dir / "config.json", config_to_json(cfg) + "\n");

    Trainer trainer = resume ? Trainer(data, *resume) : Trainer(data, cfg);
    trainer.set_diagnostic_path(dir / "diverged.hsck");
    std::ofstream log(dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw Error("cannot write " + (dir / "train_log.jsonl").string());

    const auto t0 = std::chrono::steady_clock::now();
    auto on_log = [&](const IterationLog& l) {
        log << l.to_json() << "\n";
        if (!o.quiet) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char line[200];
            std::snprintf(line, sizeof line, "[%7.1fs] iter %6lld %-6s loss %.5f psnr %6.2f surfels %zu blends %.2f\n",
                          s, static_cast<long long>(l.iter), to_string(l.phase).c_str(), l.losses.total, l.psnr,
                          l.n_surfels, l.mean_blends);
            out << line << std::flush;
        }
    };
    while (!trainer.done()) {
        std::int64_t until = cfg.total_iters;
        if (o.checkpoint_every > 0) {
            until = std::min(until, (trainer.state().iteration / o.checkpoint_every + 1) * o.checkpoint_every);
        }
        trainer.run(until, on_log);
        if (o.checkpoint_every > 0 && !trainer.done())
            save_checkpoint(trainer.checkpoint(), dir / indexed("checkpoint_", trainer.state().iteration, 1000000, ".hsck"));
    }
    const Checkpoint final_ckpt = trainer.checkpoint();
    save_checkpoint(final_ckpt, dir / "checkpoint.hsck");

    const EvalReport train_report = evaluate(final_ckpt, data.cameras, data.images);
    write_text(dir / "eval_train.json", train_report.to_json() + "\n");
    nlohmann::json final_line;
    final_line["final"]["iteration"] = trainer.state().iteration;
    final_line["final"]["train_psnr"] = train_report.mean_psnr;
    out << "training views\n" << train_report.to_table();
    if (!data.test_cameras.empty()) {
        const EvalReport test_report = evaluate(final_ckpt, data.test_cameras, data.test_images);
        write_text(dir / "eval.json", test_report.to_json() + "\n");
        final_line["final"]["test_psnr"] = test_report.mean_psnr;
        out << "held-out views\n" << test_report.to_table();
    }
    log << final_line.dump() << "\n";
    out << "final " << final_line["final"].dump() << "\n";
    return kOk;
}

std::vector<Camera> pick_cameras(const Source& src, int turntable, int w, int h, std::uint64_t seed, Dataset* keep) {
    if (turntable > 0) {
        if (has_source(src)) throw ConfigError("--turntable and a dataset source are mutually exclusive");
        return turntable_cameras(turntable, w, h);
    }
    *keep = load_source(src, seed);
    auto cams = split_cameras(*keep, src.split);
    if (cams.empty()) throw Error("no " + src.split + " views in the dataset");
    return cams;
}

Image gray(const std::vector<double>& v, int w, int h, double scale) {
    Image img(w, h, 1);
    for (std::size_t i = 0; i < v.size(); ++i) img.data[i] = v[i] * scale;
    return img;
}

int cmd_render(const RenderOptions& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    Dataset keep;
    const std::vector<Camera> cams = pick_cameras(o.source, o.turntable, o.width, o.height, o.common.seed, &keep);
    RenderConfig rc = checkpoint_render_config(ckpt);
    rc.threads = o.common.threads;
    const DecomposeMode mode = o.mode == "surfel_only" ? DecomposeMode::surfel_only
                               : o.mode == "hash_only" ? DecomposeMode::hash_only
                                                       : DecomposeMode::full;
    const fs::path dir = o.out;
    make_dir(dir);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const FrameBundle fb = render_decomposed(ckpt.cloud, ckpt.grid, ckpt.decoder, cams[i], rc, mode);
        write_png(dir / indexed("view_", i, cams.size(), ".png"), fb.rgb);
        if (o.aux) {
            const int w = fb.width, h = fb.height;
            std::vector<double> depth(fb.pixel_count(), 0.0);
            double dmax = 0.0;
            for (std::size_t p = 0; p < depth.size(); ++p) {
                if (fb.alpha[p] > 1e-6) depth[p] = fb.depth[p] / fb.alpha[p];
                dmax = std::max(dmax, depth[p]);
            }
            write_png(dir / indexed("view_", i, cams.size(), "_depth.png"), gray(depth, w, h, dmax > 0 ? 1 / dmax : 0));
            write_png(dir / indexed("view_", i, cams.size(), "_alpha.png"), gray(fb.alpha, w, h, 1.0));
            Image n(w, h, 3);
            for (std::size_t p = 0; p < fb.pixel_count(); ++p)
                for (int c = 0; c < 3; ++c) n.data[p * 3 + c] = 0.5 * (fb.normal[p][c] + 1.0);
            write_png(dir / indexed("view_", i, cams.size(), "_normal.png"), n);
        }
    }
    out << "wrote " << cams.size() << " view(s) to " << dir.string() << "\n";
    return kOk;
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    const Dataset data = load_source(o.source, o.common.seed);
    const auto& cams = split_cameras(data, o.source.split);
    if (cams.empty()) throw Error("eval: the " + o.source.split + " split has no views");
    const EvalReport r = evaluate(ckpt, cams, split_images(data, o.source.split));
    out << r.to_table();
    if (!o.out.empty()) write_text(o.out, r.to_json() + "\n");
    return kOk;
}

int cmd_bench(const BenchOptions& o, std::ostream& out) {
    Dataset keep;
    const int turntable = has_source(o.source) ? 0 : o.turntable;
    const std::vector<Camera> cams = pick_cameras(o.source, turntable, o.width, o.height, o.common.seed, &keep);
    nlohmann::json report;
    report["repeats"] = o.repeats;
    report["views"] = cams.size();
    report["runs"] = nlohmann::json::array();
    for (const std::string& path : o.checkpoints) {
        const Checkpoint ckpt = load_checkpoint(path);
        RenderConfig rc = checkpoint_render_config(ckpt);
        rc.threads = o.common.threads;
        const BenchResult b = bench_render(ckpt.cloud, ckpt.grid, ckpt.decoder, cams, rc, o.repeats);
        nlohmann::json j = nlohmann::json::parse(b.to_json());
        j["checkpoint"] = path;
        report["runs"].push_back(j);
        char line[300];
        std::snprintf(line, sizeof line, "%s: median %.3f ms/frame, %zu surfels, %.2f blends/pixel\n", path.c_str(),
                      b.median_ms, b.n_surfels, b.blends.mean);
        out << line;
    }
    if (!o.out.empty()) write_text(o.out, report.dump(2) + "\n");
    return kOk;
}

int cmd_export(const ExportOptions& o, std::ostream& out) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    export_ply(ckpt.cloud, o.out);
    out << "wrote " << ckpt.cloud.size() << " surfels to " << o.out << "\n";
    return kOk;
}

int cmd_gen(const GenOptions& o, std::ostream& out) {
    if (o.source.toy.empty()) throw ConfigError("gen-scene needs --toy NAME");
    const Dataset d = load_source(o.source, o.common.seed);
    write_nerf_synthetic(d, o.out);
    out << "wrote " << d.cameras.size() << " training and " << d.test_cameras.size() << " held-out views to "
        << o.out << "\n";
    return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Hybrid surfel splatting: train, render and evaluate"};
    app.name("hsplat");
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);

    TrainOptions tr;
    auto* train = app.add_subcommand("train", "Optimize a scene");
    add_common(train, tr.common);
    add_source(train, tr.source, false);
    train->add_option("--out", tr.out, "Output directory");
    train->add_option("--preset", tr.preset, "Base configuration")->check(CLI::IsMember({"paper", "desk"}));
    train->add_option("--config", tr.config, "JSON file overlaid on the preset (flags take precedence)");
    train->add_option("--resume", tr.resume, "Continue from a checkpoint (its configuration is used)");
    train->add_option("--iters", tr.iters, "Total iterations; phase boundaries scale along")->default_str("preset");
    train->add_option("--kernel", tr.kernel, "Primitive kernel")->check(CLI::IsMember({"beta", "gaussian"}));
    train->add_flag("--no-beta", tr.no_beta, "Freeze the kernel shape parameter");
    train->add_flag("--no-bce", tr.no_bce, "Skip the opacity-binarization phase");
    train->add_flag("--no-mcmc", tr.no_mcmc, "Disable noise and relocation");
    train->add_option("--cap", tr.cap, "Surfel budget")->default_str("preset");
    train->add_option("--log-every", tr.log_every, "Log interval in iterations")->default_str("preset");
    train->add_option("--checkpoint-every", tr.checkpoint_every, "Intermediate checkpoint interval (0: final only)");
    train->add_flag("--quiet", tr.quiet, "No per-iteration progress lines");

    RenderOptions rd, dc;
    dc.mode = "surfel_only";
    auto add_render = [](CLI::App* sub, RenderOptions& rd) {
        add_common(sub, rd.common);
        add_source(sub, rd.source, true);
        sub->add_option("--checkpoint", rd.checkpoint, "Checkpoint file")->required();
        sub->add_option("--out", rd.out, "Output directory");
        sub->add_option("--mode", rd.mode, "Feature slice to keep")
            ->check(CLI::IsMember({"full", "surfel_only", "hash_only"}));
        sub->add_option("--turntable", rd.turntable, "Render N orbit views instead of dataset views");
        sub->add_option("--width", rd.width, "Turntable image width")->check(CLI::PositiveNumber);
        sub->add_option("--height", rd.height, "Turntable image height")->check(CLI::PositiveNumber);
        sub->add_flag("--aux", rd.aux, "Also write depth, alpha and normal images");
    };
    auto* render_cmd = app.add_subcommand("render", "Render views from a checkpoint");
    add_render(render_cmd, rd);
    auto* decompose = app.add_subcommand("decompose", "Render with the hash or surfel feature slice masked");
    add_render(decompose, dc);

    EvalOptions ev;
    auto* eval = app.add_subcommand("eval", "Score a checkpoint against dataset views");
    add_common(eval, ev.common);
    add_source(eval, ev.source, true);
    eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
    eval->add_option("--out", ev.out, "JSON report path (empty: none)");

    BenchOptions bn;
    auto* bench = app.add_subcommand("bench", "Time rendering of one or more checkpoints");
    add_common(bench, bn.common);
    add_source(bench, bn.source, true);
    bench->add_option("--checkpoint", bn.checkpoints, "Checkpoint file (repeatable)")->required();
    bench->add_option("--repeats", bn.repeats, "Timed passes after one warm-up pass")->check(CLI::PositiveNumber);
    bench->add_option("--turntable", bn.turntable, "Orbit views when no dataset is given")->check(CLI::PositiveNumber);
    bench->add_option("--width", bn.width, "Turntable image width")->check(CLI::PositiveNumber);
    bench->add_option("--height", bn.height, "Turntable image height")->check(CLI::PositiveNumber);
    bench->add_option("--out", bn.out, "JSON report path (empty: none)");

    ExportOptions ex;
    auto* exp = app.add_subcommand("export-ply", "Write the surfels of a checkpoint as PLY");
    exp->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
    exp->add_option("--out", ex.out, "PLY path");

    GenOptions gn;
    auto* gen = app.add_subcommand("gen-scene", "Write a toy scene as a dataset directory");
    add_common(gen, gn.common);
    add_source(gen, gn.source, false);
    gen->add_option("--out", gn.out, "Output directory");

    // Every option shows its default in --help.
    for (CLI::App* sub : app.get_subcommands({})) {
        for (CLI::Option* opt : sub->get_options()) {
            if (opt->get_name() == "--help") continue;
            if (opt->get_type_size() == 0) {
                opt->description(opt->get_description() + " (default: off)");
            } else if (opt->get_default_str().empty()) {
                opt->default_str("none");
            }
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        if (*train) return cmd_train(tr, *train, out);
        if (*render_cmd) return cmd_render(rd, out);
        if (*decompose) return cmd_render(dc, out);
        if (*eval) return cmd_eval(ev, out);
        if (*bench) return cmd_bench(bn, out);
        if (*exp) return cmd_export(ex, out);
        if (*gen) return cmd_gen(gn, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kConfigError;
}

}  // namespace hsplat::cli
