// Command-line driver: render / reference / compare / stats / sweep.

#include <CLI11.hpp>
#include <json.hpp>

#include <tofr/harness.hpp>
#include <tofr/scene_io.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

using namespace tofr;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string scene;
    std::string out = "out";
    std::string mode = "gated";
    double tau = 10.0, dtau = 0.1, dtau_rel = -1;
    double nu = 0.0, dnu = 1.0, f0 = 1.0;
    int bins = 16;
    double hist_t0 = -1, hist_bin_width = -1;
    int candidates = 8;
    std::string init = "direct";
    double shrink_k = 10, shrink_r = 1.0;
    int spatial = 0, neighbors = 5;
    double radius = 10;
    bool temporal = false, bin_reuse = false;
    double mcap = 20;
    std::string gauge = "avg";
    bool naive = false;
    uint64_t seed = 1;
    int frames = 1;
    double frame0 = 0, gate_step = 0;
    int max_depth = 6;
    bool no_rr = false, accumulate = false, normalize = false;
    int threads = 0;
    bool dump_reservoirs = false;
};

void add_render_options(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--scene", a.scene, "scene description file")->required();
    cmd->add_option("--out", a.out, "output path prefix");
    cmd->add_option("--mode", a.mode, "gated | transient | doppler")
        ->check(CLI::IsMember({"gated", "transient", "doppler"}));
    cmd->add_option("--tau", a.tau, "time-gate center (scene units, c=1)");
    cmd->add_option("--dtau", a.dtau, "time-gate width (scene units)");
    cmd->add_option("--dtau-rel", a.dtau_rel,
                    "time-gate width as percent of the scene scale (overrides --dtau)");
    cmd->add_option("--nu", a.nu, "doppler gate center (Hz)");
    cmd->add_option("--dnu", a.dnu, "doppler gate width (Hz)");
    cmd->add_option("--f0", a.f0, "doppler carrier frequency (Hz)");
    cmd->add_option("--bins", a.bins, "transient histogram bin count");
    cmd->add_option("--hist-t0", a.hist_t0, "transient histogram start (default: tau - dtau/2)");
    cmd->add_option("--hist-width", a.hist_bin_width,
                    "transient bin width (default: dtau / bins)");
    cmd->add_option("--candidates", a.candidates, "initial candidate path trees per pixel");
    cmd->add_option("--init", a.init, "direct | ellipsoidal | shrink")
        ->check(CLI::IsMember({"direct", "ellipsoidal", "shrink"}));
    cmd->add_option("--K", a.shrink_k, "shrink: widened-gate factor");
    cmd->add_option("--R-frac", a.shrink_r, "shrink: fraction of candidates from the wide gate");
    cmd->add_option("--spatial", a.spatial, "spatial reuse passes");
    cmd->add_option("--neighbors", a.neighbors, "neighbors per spatial pass");
    cmd->add_option("--radius", a.radius, "spatial neighbor radius (pixels)");
    cmd->add_flag("--temporal", a.temporal, "enable temporal reuse across frames");
    cmd->add_flag("--bin-reuse", a.bin_reuse, "enable nearest-bin reuse (transient)");
    cmd->add_option("--mcap", a.mcap, "confidence cap");
    cmd->add_option("--gauge", a.gauge, "avg | fixed | raw (raw is the biased ablation)")
        ->check(CLI::IsMember({"avg", "fixed", "raw"}));
    cmd->add_flag("--naive", a.naive, "naive reuse: skip the path-length correction");
    cmd->add_option("--seed", a.seed, "rng seed (TOF_SEED env overrides)");
    cmd->add_option("--frames", a.frames, "frame count");
    cmd->add_option("--frame0", a.frame0, "first frame index");
    cmd->add_option("--gate-step", a.gate_step, "gate-center motion per frame");
    cmd->add_option("--max-depth", a.max_depth, "maximum path depth (segments)");
    cmd->add_flag("--no-rr", a.no_rr, "disable russian roulette");
    cmd->add_flag("--accumulate", a.accumulate, "average frames instead of keeping the last");
    cmd->add_flag("--normalize", a.normalize, "divide the output by the gate width");
    cmd->add_option("--threads", a.threads, "worker threads (0: hardware)");
    cmd->add_flag("--dump-reservoirs", a.dump_reservoirs, "write the debug reservoir dump");
}

RenderConfig make_config(const CommonArgs& a, const SceneDef& def) {
    RenderConfig cfg;
    if (a.mode == "transient")
        cfg.mode = RenderMode::Transient;
    else if (a.mode == "doppler")
        cfg.mode = RenderMode::Doppler;
    cfg.gate.kind = cfg.mode == RenderMode::Doppler ? GateSpec::Kind::Velocity
                                                    : GateSpec::Kind::Length;
    cfg.gate.center = cfg.mode == RenderMode::Doppler ? a.nu : a.tau;
    cfg.gate.width = cfg.mode == RenderMode::Doppler ? a.dnu : a.dtau;
    cfg.gate.f0 = a.f0;
    if (a.dtau_rel >= 0 && cfg.mode != RenderMode::Doppler) {
        SceneFrame probe = build_frame(def, a.frame0);
        cfg.gate.width = a.dtau_rel / 100.0 * probe.scene_scale();
    }
    cfg.gate_step = a.gate_step;
    cfg.bins = a.bins;
    cfg.hist_t0 = a.hist_t0 >= 0 ? a.hist_t0 : a.tau - cfg.gate.width / 2;
    cfg.hist_bin_width = a.hist_bin_width > 0 ? a.hist_bin_width : cfg.gate.width / a.bins;
    cfg.m_init = a.candidates;
    cfg.init = a.init == "ellipsoidal" ? InitMode::Ellipsoidal
               : a.init == "shrink"    ? InitMode::Shrink
                                       : InitMode::Direct;
    cfg.shrink_k = a.shrink_k;
    cfg.shrink_r = a.shrink_r;
    cfg.spatial_passes = a.spatial;
    cfg.spatial_neighbors = a.neighbors;
    cfg.spatial_radius = a.radius;
    cfg.temporal = a.temporal;
    cfg.bin_reuse = a.bin_reuse;
    cfg.m_cap = a.mcap;
    cfg.gauge = a.gauge == "fixed" ? GaugeKind::FixedAxis
                : a.gauge == "raw" ? GaugeKind::RawGradient
                                   : GaugeKind::AverageGradient;
    cfg.newton = !a.naive;
    cfg.seed = a.seed;
    if (const char* env = std::getenv("TOF_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
    cfg.frames = a.frames;
    cfg.frame0 = a.frame0;
    cfg.max_depth = a.max_depth;
    cfg.use_rr = !a.no_rr;
    cfg.accumulate = a.accumulate;
    cfg.normalize_gate = a.normalize;
    return cfg;
}

json config_json(const RenderConfig& c) {
    json j;
    j["mode"] = c.mode == RenderMode::Gated       ? "gated"
                : c.mode == RenderMode::Transient ? "transient"
                                                  : "doppler";
    j["gate"] = {{"kind", c.gate.kind == GateSpec::Kind::Length ? "length" : "velocity"},
                 {"center", c.gate.center},
                 {"width", c.gate.width},
                 {"f0", c.gate.f0},
                 {"step", c.gate_step}};
    j["bins"] = c.bins;
    j["hist_t0"] = c.hist_t0;
    j["hist_bin_width"] = c.hist_bin_width;
    j["candidates"] = c.m_init;
    j["init"] = c.init == InitMode::Direct        ? "direct"
                : c.init == InitMode::Ellipsoidal ? "ellipsoidal"
                                                  : "shrink";
    j["shrink_k"] = c.shrink_k;
    j["shrink_r"] = c.shrink_r;
    j["spatial_passes"] = c.spatial_passes;
    j["spatial_neighbors"] = c.spatial_neighbors;
    j["spatial_radius"] = c.spatial_radius;
    j["temporal"] = c.temporal;
    j["bin_reuse"] = c.bin_reuse;
    j["m_cap"] = c.m_cap;
    j["gauge"] = c.gauge == GaugeKind::AverageGradient ? "avg"
                 : c.gauge == GaugeKind::FixedAxis     ? "fixed"
                                                       : "raw";
    j["newton"] = c.newton;
    j["seed"] = c.seed;
    j["frames"] = c.frames;
    j["frame0"] = c.frame0;
    j["max_depth"] = c.max_depth;
    j["use_rr"] = c.use_rr;
    j["accumulate"] = c.accumulate;
    j["normalize_gate"] = c.normalize_gate;
    return j;
}

void write_histogram_csv(const TransientHistogram& h, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "pixel_x,pixel_y,bin,r,g,b,count\n";
    f.precision(10);
    for (int y = 0; y < h.h; ++y)
        for (int x = 0; x < h.w; ++x)
            for (int b = 0; b < h.bins; ++b) {
                const Vec3& v = h.rgb[h.idx(x, y, b)];
                f << x << ',' << y << ',' << b << ',' << v.x << ',' << v.y << ',' << v.z << ','
                  << h.count[h.idx(x, y, b)] << "\n";
            }
}

int cmd_render(const CommonArgs& a) {
    SceneDef def = load_scene(a.scene);
    RenderConfig cfg = make_config(a, def);
    if (a.threads > 0) worker_count() = a.threads;

    SceneFrame probe = build_frame(def, cfg.frame0);
    if (cfg.gate.kind == GateSpec::Kind::Length) {
        double lo = min_path_length_bound(probe);
        if (cfg.gate.center + cfg.gate.width / 2 < lo)
            std::cerr << "warning: gate [" << cfg.gate.center - cfg.gate.width / 2 << ", " << cfg.gate.center + cfg.gate.width / 2
                      << "] ends before the shortest possible path (" << lo
                      << "); the image will be black\n";
    }

    double t0 = detail::now_seconds();
    RenderOutput out = cfg.mode == RenderMode::Transient ? render_transient(def, cfg)
                                                         : render_gated(def, cfg);
    double seconds = detail::now_seconds() - t0;

    json manifest;
    manifest["scene"] = a.scene;
    manifest["scene_hash"] = hash_file(a.scene);
    manifest["config"] = config_json(cfg);
    manifest["seconds"] = seconds;
    manifest["outputs"] = json::array();
    auto record = [&](const std::string& path) {
        manifest["outputs"].push_back({{"path", path}, {"fnv64", hash_file(path)}});
    };

    std::string img_path = a.out + ".pfm";
    write_pfm(out.image, img_path);
    record(img_path);
    std::string txt_path = a.out + ".txt";
    write_text_matrix(out.image, txt_path);
    record(txt_path);
    if (cfg.mode == RenderMode::Transient) {
        std::string csv = a.out + "_hist.csv";
        write_histogram_csv(out.hist, csv);
        record(csv);
    }
    std::string stats_path = a.out + "_stats.txt";
    {
        std::ofstream f(stats_path);
        f << stats_lines(out.stats);
    }
    record(stats_path);

    std::ofstream mf(a.out + "_manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << img_path << " (mean " << out.image.mean() << ", " << seconds
              << " s)\n";
    return 0;
}

int cmd_reference(const CommonArgs& a, int spp) {
    SceneDef def = load_scene(a.scene);
    RenderConfig cfg = make_config(a, def);
    if (a.threads > 0) worker_count() = a.threads;
    SceneFrame fr = build_frame(def, cfg.frame0);
    double t0 = detail::now_seconds();
    ReferenceImages ref = reference_render(fr, cfg.gate, spp, cfg.seed, cfg.max_depth);
    double seconds = detail::now_seconds() - t0;
    if (cfg.normalize_gate && cfg.gate.width > 0) {
        ref.mean *= 1.0 / cfg.gate.width;
        ref.se *= 1.0 / cfg.gate.width;
    }
    write_pfm(ref.mean, a.out + ".pfm");
    write_pfm(ref.se, a.out + "_se.pfm");
    write_text_matrix(ref.mean, a.out + ".txt");
    json manifest;
    manifest["scene"] = a.scene;
    manifest["scene_hash"] = hash_file(a.scene);
    manifest["config"] = config_json(cfg);
    manifest["spp"] = spp;
    manifest["seconds"] = seconds;
    manifest["outputs"] = {{{"path", a.out + ".pfm"}, {"fnv64", hash_file(a.out + ".pfm")}}};
    std::ofstream mf(a.out + "_manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "wrote " << a.out << ".pfm (mean " << ref.mean.mean() << ", " << seconds
              << " s)\n";
    return 0;
}

int cmd_compare(const std::string& est_path, const std::string& ref_path,
                const std::string& stats_path) {
    Image est = read_pfm(est_path);
    Image ref = read_pfm(ref_path);
    if (est.w != ref.w || est.h != ref.h) {
        std::cerr << "error: image dimensions differ (" << est.w << "x" << est.h << " vs "
                  << ref.w << "x" << ref.h << ")\n";
        return 2;
    }
    Metrics m = compute_metrics(est, ref);
    std::cout << "MAPE=" << m.mape << " relMSE=" << m.relmse << "\n";
    if (!stats_path.empty()) {
        std::ifstream f(stats_path);
        if (!f) {
            std::cerr << "error: cannot open " << stats_path << "\n";
            return 2;
        }
        std::cout << f.rdbuf();
    }
    return 0;
}

int cmd_stats(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        std::cerr << "error: cannot open " << path << "\n";
        return 2;
    }
    std::map<std::string, std::map<std::string, double>> agg;
    std::map<std::string, int> rows;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string tok, stage;
        std::vector<std::pair<std::string, double>> kv;
        while (ls >> tok) {
            size_t eq = tok.find('=');
            if (eq == std::string::npos) continue;
            std::string key = tok.substr(0, eq);
            std::string val = tok.substr(eq + 1);
            if (key == "stage")
                stage = val;
            else
                kv.emplace_back(key, std::strtod(val.c_str(), nullptr));
        }
        if (stage.empty()) continue;
        for (auto& [k, v] : kv) agg[stage][k] += v;
        rows[stage]++;
    }
    for (auto& [stage, kv] : agg) {
        std::cout << stage << ":";
        for (auto& [k, v] : kv) {
            if (k == "frame") continue;
            bool mean_field = k == "mean_iterations" || k == "newton_sr" || k == "actual_sr";
            std::cout << " " << k << "=" << (mean_field ? v / rows[stage] : v);
        }
        std::cout << "\n";
    }
    return 0;
}

int cmd_sweep(const CommonArgs& a, const std::string& type, double budget,
              const std::vector<double>& values, int ref_spp) {
    SceneDef def = load_scene(a.scene);
    if (a.threads > 0) worker_count() = a.threads;
    RenderConfig base = make_config(a, def);
    SceneFrame fr = build_frame(def, base.frame0);
    std::ofstream csv(a.out + ".csv");
    csv.precision(8);

    if (type == "gatewidth") {
        csv << "dtau_frac,dtau,mape_ours,mape_naive,sr_ours,sr_naive\n";
        for (double fracpct : values) {
            RenderConfig cfg = base;
            cfg.gate.width = fracpct / 100.0 * fr.scene_scale();
            ReferenceImages ref =
                reference_render(fr, cfg.gate, ref_spp, base.seed + 17, cfg.max_depth);
            RenderConfig ours = cfg;
            ours.newton = true;
            RenderConfig naive = cfg;
            naive.newton = false;
            EqualTimeResult ro = render_equal_time(def, ours, budget);
            EqualTimeResult rn = render_equal_time(def, naive, budget);
            csv << fracpct << ',' << cfg.gate.width << ','
                << compute_metrics(ro.image, ref.mean).mape << ','
                << compute_metrics(rn.image, ref.mean).mape << ',' << ro.spatial.actual_sr()
                << ',' << rn.spatial.actual_sr() << "\n";
            csv.flush();
        }
    } else if (type == "kr") {
        csv << "K,R,mape,mean_ratio\n";
        ReferenceImages ref =
            reference_render(fr, base.gate, ref_spp, base.seed + 17, base.max_depth);
        for (double K : values)
            for (double R : {0.0, 0.5, 1.0}) {
                RenderConfig cfg = base;
                cfg.init = InitMode::Shrink;
                cfg.shrink_k = K;
                cfg.shrink_r = R;
                EqualTimeResult r = render_equal_time(def, cfg, budget);
                double ratio = ref.mean.mean() > 0 ? r.image.mean() / ref.mean.mean() : 0;
                csv << K << ',' << R << ',' << compute_metrics(r.image, ref.mean).mape << ','
                    << ratio << "\n";
                csv.flush();
            }
    } else {
        csv << "B,seconds_reuse,seconds_trace\n";
        for (double bd : values) {
            int B = int(bd);
            RenderConfig cfg = base;
            cfg.mode = RenderMode::Transient;
            cfg.bins = B;
            cfg.temporal = true;
            cfg.bin_reuse = true;
            cfg.frames = std::max(2, base.frames);
            double t0 = detail::now_seconds();
            render_transient(def, cfg);
            double t_reuse = detail::now_seconds() - t0;
            t0 = detail::now_seconds();
            render_transient_plain(def, cfg);
            double t_trace = detail::now_seconds() - t0;
            csv << B << ',' << t_reuse << ',' << t_trace << "\n";
            csv.flush();
        }
    }
    std::cout << "wrote " << a.out << ".csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "tofr: time-gated / transient / Doppler Monte Carlo renderer with "
        "reservoir-based path reuse"};
    app.require_subcommand(1);

    CommonArgs rargs;
    CLI::App* render = app.add_subcommand("render", "render with reservoir path reuse");
    add_render_options(render, rargs);

    CommonArgs fargs;
    int ref_spp = 1024;
    CLI::App* reference =
        app.add_subcommand("reference", "brute-force gated reference with a stderr image");
    add_render_options(reference, fargs);
    reference->add_option("--spp", ref_spp, "samples (path trees) per pixel");

    std::string est_path, ref_path, stats_in;
    CLI::App* compare = app.add_subcommand("compare", "MAPE/relMSE between two PFM images");
    compare->add_option("--est", est_path, "estimate image")->required();
    compare->add_option("--ref", ref_path, "reference image")->required();
    compare->add_option("--stats", stats_in, "also print this stats file");

    std::string stats_file;
    CLI::App* stats = app.add_subcommand("stats", "aggregate a per-frame stats file");
    stats->add_option("--file", stats_file, "stats file from a render run")->required();

    CommonArgs sargs;
    std::string sweep_type = "gatewidth";
    double budget = 2.0;
    std::vector<double> sweep_values;
    int sweep_ref_spp = 2048;
    CLI::App* sweep = app.add_subcommand("sweep", "gate-width / K-R / bin-count sweeps (CSV)");
    add_render_options(sweep, sargs);
    sweep->add_option("--type", sweep_type, "gatewidth | kr | bins")
        ->check(CLI::IsMember({"gatewidth", "kr", "bins"}));
    sweep->add_option("--budget", budget, "equal-time budget per configuration (seconds)");
    sweep->add_option("--values", sweep_values, "sweep values (percent, K, or B per type)");
    sweep->add_option("--ref-spp", sweep_ref_spp, "reference spp for error metrics");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (render->parsed()) return cmd_render(rargs);
        if (reference->parsed()) return cmd_reference(fargs, ref_spp);
        if (compare->parsed()) return cmd_compare(est_path, ref_path, stats_in);
        if (stats->parsed()) return cmd_stats(stats_file);
        if (sweep->parsed()) {
            if (sweep_values.empty())
                sweep_values = sweep_type == "gatewidth"
                                   ? std::vector<double>{0.5, 2.5, 10, 50}
                               : sweep_type == "kr" ? std::vector<double>{1, 10, 100, 500}
                                                    : std::vector<double>{4, 8, 16, 32, 64};
            return cmd_sweep(sargs, sweep_type, budget, sweep_values, sweep_ref_spp);
        }
    } catch (const ParseError& e) {
        std::cerr << "scene parse error at line " << e.line << ", column " << e.col << ": "
                  << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
