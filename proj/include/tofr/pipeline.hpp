#pragma once

#include <chrono>
#include <cstdio>
#include <sstream>
#include <string>

#include "image.hpp"
#include "parallel.hpp"
#include "ris.hpp"
#include "shiftmap.hpp"

namespace tofr {

enum class RenderMode { Gated, Transient, Doppler };
enum class InitMode { Direct, Ellipsoidal, Shrink };

struct RenderConfig {
    RenderMode mode = RenderMode::Gated;
    GateSpec gate;            // gated / doppler
    double gate_step = 0;     // gate-center motion per frame (length units)
    int bins = 1;             // transient
    double hist_t0 = 0, hist_bin_width = 0;

    int m_init = 8;
    InitMode init = InitMode::Direct;
    double shrink_k = 10;
    double shrink_r = 1.0;  // fraction of candidates drawn from the wide gate

    int spatial_passes = 0;
    int spatial_neighbors = 5;
    double spatial_radius = 10;  // pixels
    bool temporal = false;
    bool bin_reuse = false;

    double m_cap = 20;
    GaugeKind gauge = GaugeKind::AverageGradient;
    bool newton = true;  // false: naive reuse (no path-length correction)

    uint64_t seed = 1;
    int frames = 1;
    double frame0 = 0;
    int max_depth = 6;
    bool use_rr = true;
    bool accumulate = false;   // average frame estimates (static scenes)
    bool normalize_gate = false;  // divide output by the gate width at write-out

    ShiftConfig shift_config() const {
        ShiftConfig c;
        c.gauge.kind = gauge;
        c.newton = newton;
        c.max_depth = max_depth;
        c.use_rr = use_rr;
        return c;
    }
    GateSpec gate_at(int frame_idx) const {
        GateSpec g = gate;
        g.center += gate_step * frame_idx;
        return g;
    }
};

struct StageStats {
    ShiftCounts shift;
    double seconds = 0;
};

struct FrameStats {
    int frame = 0;
    StageStats temporal, spatial, binwise;
    double t_init = 0, t_shade = 0;
};

// Per-pixel (or per pixel x bin) reservoir grids; the previous grid stays
// immutable while the current one is written.
struct FrameBuffers {
    int w = 0, h = 0, bins = 1;
    std::vector<Reservoir> cur, prev;

    FrameBuffers() = default;
    FrameBuffers(int w_, int h_, int b_)
        : w(w_), h(h_), bins(b_), cur(size_t(w_) * h_ * b_), prev(size_t(w_) * h_ * b_) {}

    Reservoir& at(std::vector<Reservoir>& g, int x, int y, int b = 0) {
        return g[(size_t(y) * w + x) * bins + b];
    }
    const Reservoir& at(const std::vector<Reservoir>& g, int x, int y, int b = 0) const {
        return g[(size_t(y) * w + x) * bins + b];
    }
    void flip() { cur.swap(prev); }
};

// ---------------------------------------------------------------------------
// pipeline stages

namespace stage {

// RIS over m_init candidate path trees from the configured initializer.
// The reservoir leaves with confidence 1 (one frame's worth).
inline Reservoir initial_sampling(const SceneFrame& fr, const RenderConfig& cfg,
                                  const GateSpec& gate, int px, int py, int frame_idx) {
    uint64_t pix = uint64_t(py) * fr.cam.width + px;
    TargetFunction phat{gate};
    Rng pick(cfg.seed, uint64_t(frame_idx), pix, 0, 9);

    TraceConfig tc;
    tc.max_depth = cfg.max_depth;
    tc.use_rr = cfg.use_rr;
    tc.build_rec = true;
    tc.ellipsoidal = cfg.init == InitMode::Ellipsoidal && gate.kind == GateSpec::Kind::Length;
    tc.ell_gate = gate.time_gate();
    Tracer tracer(fr, tc);

    auto run_ris = [&](int trees, const TargetFunction& tf, Reservoir& r) {
        if (trees <= 0) return;
        double inv = 1.0 / trees;
        for (int s = 0; s < trees; ++s) {
            Rng rng(cfg.seed, uint64_t(frame_idx), pix, uint64_t(s), 0);
            Rng ell(cfg.seed, uint64_t(frame_idx), pix, uint64_t(s), 2);
            tracer.trace_tree(px, py, rng, ell, [&](const PathSample& c, double mis_m) {
                double p = tf(c);
                if (p <= 0 || !(c.pdf > 0)) return;
                reservoir_update(r, c, mis_m * inv * p / c.pdf, 0, p, pick);
            });
        }
        ris_finalize(r);
        r.M = 1;
    };

    if (cfg.init != InitMode::Shrink || gate.kind != GateSpec::Kind::Length) {
        Reservoir r;
        run_ris(cfg.m_init, phat, r);
        r.M = 1;
        return r;
    }

    // shrink initializer: candidates from a K-times wider gate, contracted
    // onto the fine gate; MIS against canonical fine-gate candidates when the
    // wide fraction is below 1.
    int m_rough = int(std::lround(cfg.shrink_r * cfg.m_init));
    m_rough = clamp(m_rough, 0, cfg.m_init);
    int m_fine = cfg.m_init - m_rough;

    GateSpec wide = gate;
    wide.width = gate.width * cfg.shrink_k;
    TargetFunction phat_wide{wide};

    Reservoir rough;
    run_ris(m_rough, phat_wide, rough);
    Reservoir fine;
    run_ris(m_fine, phat, fine);
    fine.M = 1;

    if (rough.empty()) return fine;

    Domain dom{px, py, gate, &fr};
    ShiftConfig sc = cfg.shift_config();
    ShiftOutcome fwd = shrink_map(rough.y, dom, cfg.shrink_k, true, sc);

    if (m_fine == 0) {
        // all samples allocated to the wide gate (biased below 1)
        Reservoir out;
        if (fwd.ok()) {
            double py_v = phat(fwd.mapped);
            reservoir_update(out, fwd.mapped, py_v * rough.W * fwd.jacobian, 0, py_v, pick);
        }
        ris_finalize(out);
        out.M = 1;
        return out;
    }

    MergeShift ms;
    if (fwd.ok()) {
        ms.valid = true;
        ms.mapped = fwd.mapped;
        ms.jacobian = fwd.jacobian;
    }
    if (!fine.empty()) {
        ShiftOutcome inv = shrink_map(fine.y, dom, cfg.shrink_k, false, sc);
        if (inv.ok()) ms.phat_src_of_dst = phat_wide(inv.mapped) * inv.jacobian;
    }
    gris_merge(fine, rough, ms, phat, cfg.m_cap, pick);
    return fine;
}

// Builds the MergeShift for one source reservoir entering dst_dom.
inline MergeShift make_merge_shift(const Reservoir& dst, const Domain& dst_dom,
                                   const Reservoir& src, const Domain& src_dom,
                                   const ShiftConfig& sc, const TargetFunction& phat_src,
                                   ShiftStats* stats) {
    MergeShift ms;
    if (!src.empty()) {
        ShiftOutcome fwd = shift_sample(src.y, src_dom, dst_dom, sc, stats);
        if (fwd.ok()) {
            ms.valid = true;
            ms.mapped = fwd.mapped;
            ms.jacobian = fwd.jacobian;
        }
    }
    if (!dst.empty()) {
        ShiftOutcome inv = shift_sample(dst.y, dst_dom, src_dom, sc, nullptr);
        if (inv.ok()) ms.phat_src_of_dst = phat_src(inv.mapped) * inv.jacobian;
    }
    return ms;
}

// Previous-frame reservoir fetched through camera-path reprojection of the
// current primary hit, then merged with the gate-motion delta.
inline void temporal_reuse(Reservoir& cur, const SceneFrame& fr, const GateSpec& gate,
                           const SceneFrame& prev_fr, const GateSpec& prev_gate,
                           const FrameBuffers& bufs, int px, int py, int bin,
                           const RenderConfig& cfg, int frame_idx, ShiftStats* stats) {
    Ray r = fr.cam.primary_ray(px, py);
    auto hit = fr.bvh->intersect(r);
    if (!hit) return;
    auto prev_px = prev_fr.cam.project(hit->pos);
    if (!prev_px) return;

    const Reservoir& src = bufs.at(bufs.prev, prev_px->first, prev_px->second, bin);
    if (src.M <= 0) return;
    Domain dst_dom{px, py, gate, &fr};
    Domain src_dom{prev_px->first, prev_px->second, prev_gate, &prev_fr};
    TargetFunction phat_dst{gate}, phat_src{prev_gate};
    ShiftConfig sc = cfg.shift_config();
    MergeShift ms = make_merge_shift(cur, dst_dom, src, src_dom, sc, phat_src, stats);
    uint64_t pix = uint64_t(py) * fr.cam.width + px;
    Rng rng(cfg.seed, uint64_t(frame_idx), pix, uint64_t(bin), 8);
    gris_merge(cur, src, ms, phat_dst, cfg.m_cap, rng);
}

// Low-discrepancy disk offsets (golden-angle spiral, hash-rotated per pixel).
inline std::pair<int, int> neighbor_offset(int j, int count, double radius, uint64_t rot_key) {
    double rot = double(mix64(rot_key) >> 11) * 0x1.0p-53 * 2.0 * kPi;
    double rr = radius * std::sqrt((j + 0.5) / count);
    double th = j * 2.39996322972865332 + rot;
    int dx = int(std::lround(rr * std::cos(th)));
    int dy = int(std::lround(rr * std::sin(th)));
    return {dx, dy};
}

// One spatial pass for one pixel: merge `neighbors` reservoirs from the
// read-only grid into this pixel's reservoir.
inline Reservoir spatial_reuse(const std::vector<Reservoir>& grid, const FrameBuffers& bufs,
                               const SceneFrame& fr, const GateSpec& gate, int px, int py,
                               int bin, int pass, const RenderConfig& cfg, int frame_idx,
                               ShiftStats* stats) {
    Reservoir out = bufs.at(grid, px, py, bin);
    if (cfg.spatial_neighbors <= 0 || cfg.spatial_radius <= 0) return out;
    uint64_t pix = uint64_t(py) * fr.cam.width + px;
    Rng rng(cfg.seed, uint64_t(frame_idx), pix, uint64_t(pass * 131 + bin), 10);
    Domain dst_dom{px, py, gate, &fr};
    TargetFunction phat{gate};
    ShiftConfig sc = cfg.shift_config();

    for (int j = 0; j < cfg.spatial_neighbors; ++j) {
        auto [dx, dy] = neighbor_offset(j, cfg.spatial_neighbors, cfg.spatial_radius,
                                        mix64(pix * 1315423911u + pass * 2654435761u +
                                              uint64_t(cfg.seed) + uint64_t(frame_idx) * 97));
        int nx = px + dx, ny = py + dy;
        if (nx == px && ny == py) continue;
        if (nx < 0 || nx >= bufs.w || ny < 0 || ny >= bufs.h) continue;
        const Reservoir& src = bufs.at(grid, nx, ny, bin);
        if (src.M <= 0) continue;
        Domain src_dom{nx, ny, gate, &fr};
        MergeShift ms = make_merge_shift(out, dst_dom, src, src_dom, sc, phat, stats);
        gris_merge(out, src, ms, phat, cfg.m_cap, rng);
    }
    return out;
}

// Nearest-neighbour bin reuse for transient grids; the shift delta is the bin
// pitch, positive from the earlier bin and negative from the later one.
inline Reservoir bin_reuse(const std::vector<Reservoir>& grid, const FrameBuffers& bufs,
                           const SceneFrame& fr, const TransientHistogram& hist, int px, int py,
                           int bin, const RenderConfig& cfg, int frame_idx, ShiftStats* stats) {
    Reservoir out = bufs.at(grid, px, py, bin);
    GateSpec gate;
    gate.kind = GateSpec::Kind::Length;
    gate.center = hist.bin_gate(bin).center;
    gate.width = hist.bin_gate(bin).width;
    Domain dst_dom{px, py, gate, &fr};
    TargetFunction phat{gate};
    ShiftConfig sc = cfg.shift_config();
    uint64_t pix = uint64_t(py) * fr.cam.width + px;
    Rng rng(cfg.seed, uint64_t(frame_idx), pix, uint64_t(bin), 12);

    for (int nb : {bin - 1, bin + 1}) {
        if (nb < 0 || nb >= hist.bins) continue;
        const Reservoir& src = bufs.at(grid, px, py, nb);
        if (src.M <= 0) continue;
        GateSpec sgate = gate;
        sgate.center = hist.bin_gate(nb).center;
        Domain src_dom{px, py, sgate, &fr};
        TargetFunction phat_src{sgate};
        MergeShift ms = make_merge_shift(out, dst_dom, src, src_dom, sc, phat_src, stats);
        gris_merge(out, src, ms, phat, cfg.m_cap, rng);
    }
    return out;
}

}  // namespace stage

// ---------------------------------------------------------------------------
// render drivers

struct RenderOutput {
    Image image;                    // last frame, or accumulated mean
    TransientHistogram hist;        // transient mode
    std::vector<FrameStats> stats;  // one per frame
};

namespace detail {

inline double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace detail

// Time-gated (or Doppler-gated) image rendering with the four-stage loop.
inline RenderOutput render_gated(const SceneDef& def, const RenderConfig& cfg) {
    RenderOutput out;
    int W = def.camera.width, H = def.camera.height;
    out.image = Image(W, H);
    Image accum(W, H);

    FrameBuffers bufs(W, H, 1);
    SceneFrame cur_frame, prev_frame;
    GateSpec prev_gate;

    for (int f = 0; f < cfg.frames; ++f) {
        FrameStats fs;
        fs.frame = f;
        prev_frame = std::move(cur_frame);
        cur_frame = build_frame(def, cfg.frame0 + f);
        GateSpec gate = cfg.gate_at(f);

        double t0 = detail::now_seconds();
        parallel_for(H, [&](int y) {
            for (int x = 0; x < W; ++x)
                bufs.at(bufs.cur, x, y) = stage::initial_sampling(cur_frame, cfg, gate, x, y, f);
        });
        fs.t_init = detail::now_seconds() - t0;

        if (cfg.temporal && f > 0) {
            t0 = detail::now_seconds();
            ShiftStats st;
            parallel_for(H, [&](int y) {
                for (int x = 0; x < W; ++x)
                    stage::temporal_reuse(bufs.at(bufs.cur, x, y), cur_frame, gate, prev_frame,
                                          prev_gate, bufs, x, y, 0, cfg, f, &st);
            });
            fs.temporal.shift = st.snapshot();
            fs.temporal.seconds = detail::now_seconds() - t0;
        }

        t0 = detail::now_seconds();
        {
            ShiftStats st;
            for (int pass = 0; pass < cfg.spatial_passes; ++pass) {
                std::vector<Reservoir> snapshot = bufs.cur;
                parallel_for(H, [&](int y) {
                    for (int x = 0; x < W; ++x)
                        bufs.at(bufs.cur, x, y) = stage::spatial_reuse(
                            snapshot, bufs, cur_frame, gate, x, y, 0, pass, cfg, f, &st);
                });
            }
            fs.spatial.shift = st.snapshot();
        }
        fs.spatial.seconds = detail::now_seconds() - t0;

        t0 = detail::now_seconds();
        parallel_for(H, [&](int y) {
            for (int x = 0; x < W; ++x)
                out.image.at(x, y) = final_shading(bufs.at(bufs.cur, x, y), gate);
        });
        fs.t_shade = detail::now_seconds() - t0;

        accum += out.image;
        bufs.flip();
        prev_gate = gate;
        out.stats.push_back(std::move(fs));
    }
    if (cfg.accumulate && cfg.frames > 0) {
        accum *= 1.0 / cfg.frames;
        out.image = accum;
    }
    if (cfg.normalize_gate && cfg.gate.width > 0) out.image *= 1.0 / cfg.gate.width;
    return out;
}

// Transient histogram rendering: B reservoirs per pixel, initial candidates
// deposited into their bins, optional bin/temporal/spatial reuse per bin.
inline RenderOutput render_transient(const SceneDef& def, const RenderConfig& cfg) {
    RenderOutput out;
    int W = def.camera.width, H = def.camera.height;
    int B = cfg.bins;
    out.hist = TransientHistogram(W, H, B, cfg.hist_t0, cfg.hist_bin_width);
    out.image = Image(W, H);

    FrameBuffers bufs(W, H, B);
    SceneFrame cur_frame, prev_frame;
    TransientHistogram accum = out.hist;
    int64_t accum_frames = 0;

    TraceConfig tc;
    tc.max_depth = cfg.max_depth;
    tc.use_rr = cfg.use_rr;
    tc.build_rec = true;

    for (int f = 0; f < cfg.frames; ++f) {
        FrameStats fs;
        fs.frame = f;
        prev_frame = std::move(cur_frame);
        cur_frame = build_frame(def, cfg.frame0 + f);
        Tracer tracer(cur_frame, tc);

        double t0 = detail::now_seconds();
        parallel_for(H, [&](int y) {
            for (int x = 0; x < W; ++x) {
                uint64_t pix = uint64_t(y) * W + x;
                Rng pick(cfg.seed, uint64_t(f), pix, 0, 9);
                for (int b = 0; b < B; ++b) bufs.at(bufs.cur, x, y, b) = Reservoir{};
                double inv = 1.0 / cfg.m_init;
                for (int s = 0; s < cfg.m_init; ++s) {
                    Rng rng(cfg.seed, uint64_t(f), pix, uint64_t(s), 0);
                    Rng ell(cfg.seed, uint64_t(f), pix, uint64_t(s), 2);
                    tracer.trace_tree(x, y, rng, ell, [&](const PathSample& c, double mis_m) {
                        int b = out.hist.bin_of(c.len);
                        if (b < 0 || !(c.pdf > 0)) return;
                        TimeGate bg = out.hist.bin_gate(b);
                        double p = luminance(c.f) * gate_weight(bg, c.len);
                        if (p <= 0) return;
                        reservoir_update(bufs.at(bufs.cur, x, y, b), c, mis_m * inv * p / c.pdf,
                                         0, p, pick);
                    });
                }
                for (int b = 0; b < B; ++b) {
                    ris_finalize(bufs.at(bufs.cur, x, y, b));
                    bufs.at(bufs.cur, x, y, b).M = 1;
                }
            }
        });
        fs.t_init = detail::now_seconds() - t0;

        auto bin_gate_spec = [&](int b) {
            GateSpec g;
            g.kind = GateSpec::Kind::Length;
            g.center = out.hist.bin_gate(b).center;
            g.width = out.hist.bin_gate(b).width;
            return g;
        };

        if (cfg.temporal && f > 0) {
            t0 = detail::now_seconds();
            ShiftStats st;
            parallel_for(H, [&](int y) {
                for (int x = 0; x < W; ++x)
                    for (int b = 0; b < B; ++b)
                        stage::temporal_reuse(bufs.at(bufs.cur, x, y, b), cur_frame,
                                              bin_gate_spec(b), prev_frame, bin_gate_spec(b),
                                              bufs, x, y, b, cfg, f, &st);
            });
            fs.temporal.shift = st.snapshot();
            fs.temporal.seconds = detail::now_seconds() - t0;
        }

        if (cfg.bin_reuse) {
            t0 = detail::now_seconds();
            ShiftStats st;
            std::vector<Reservoir> snapshot = bufs.cur;
            parallel_for(H, [&](int y) {
                for (int x = 0; x < W; ++x)
                    for (int b = 0; b < B; ++b)
                        bufs.at(bufs.cur, x, y, b) = stage::bin_reuse(
                            snapshot, bufs, cur_frame, out.hist, x, y, b, cfg, f, &st);
            });
            fs.binwise.shift = st.snapshot();
            fs.binwise.seconds = detail::now_seconds() - t0;
        }

        t0 = detail::now_seconds();
        {
            ShiftStats st;
            for (int pass = 0; pass < cfg.spatial_passes; ++pass) {
                std::vector<Reservoir> snapshot = bufs.cur;
                parallel_for(H, [&](int y) {
                    for (int x = 0; x < W; ++x)
                        for (int b = 0; b < B; ++b)
                            bufs.at(bufs.cur, x, y, b) =
                                stage::spatial_reuse(snapshot, bufs, cur_frame, bin_gate_spec(b),
                                                     x, y, b, pass, cfg, f, &st);
                });
            }
            fs.spatial.shift = st.snapshot();
        }
        fs.spatial.seconds = detail::now_seconds() - t0;

        t0 = detail::now_seconds();
        parallel_for(H, [&](int y) {
            for (int x = 0; x < W; ++x)
                for (int b = 0; b < B; ++b) {
                    Vec3 v = final_shading(bufs.at(bufs.cur, x, y, b), bin_gate_spec(b));
                    accum.rgb[accum.idx(x, y, b)] += v;
                    accum.count[accum.idx(x, y, b)] += 1;
                }
        });
        fs.t_shade = detail::now_seconds() - t0;
        accum_frames++;

        bufs.flip();
        out.stats.push_back(std::move(fs));
    }

    if (accum_frames > 0)
        for (auto& v : accum.rgb) v *= 1.0 / double(accum_frames);
    out.hist = accum;
    // wide-band image: sum of bins (scaled by the bin width when normalizing)
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            Vec3 s(0);
            for (int b = 0; b < B; ++b) s += out.hist.rgb[out.hist.idx(x, y, b)];
            out.image.at(x, y) = s;
        }
    return out;
}

// Plain per-bin deposits without any reuse (the trace-only baseline).
inline RenderOutput render_transient_plain(const SceneDef& def, const RenderConfig& cfg) {
    RenderOutput out;
    int W = def.camera.width, H = def.camera.height;
    out.hist = TransientHistogram(W, H, cfg.bins, cfg.hist_t0, cfg.hist_bin_width);
    out.image = Image(W, H);
    TraceConfig tc;
    tc.max_depth = cfg.max_depth;
    tc.use_rr = cfg.use_rr;
    tc.build_rec = false;

    for (int f = 0; f < cfg.frames; ++f) {
        FrameStats fs;
        fs.frame = f;
        SceneFrame fr = build_frame(def, cfg.frame0 + f);
        Tracer tracer(fr, tc);
        double t0 = detail::now_seconds();
        parallel_for(H, [&](int y) {
            for (int x = 0; x < W; ++x) {
                uint64_t pix = uint64_t(y) * W + x;
                for (int s = 0; s < cfg.m_init; ++s) {
                    Rng rng(cfg.seed, uint64_t(f), pix, uint64_t(s), 0);
                    Rng ell(cfg.seed, uint64_t(f), pix, uint64_t(s), 2);
                    tracer.trace_tree(x, y, rng, ell, [&](const PathSample& c, double mis_m) {
                        if (!(c.pdf > 0)) return;
                        out.hist.deposit(x, y, c.len, c.f * (mis_m / c.pdf / cfg.m_init));
                    });
                }
            }
        });
        fs.t_init = detail::now_seconds() - t0;
        out.stats.push_back(std::move(fs));
    }
    for (auto& v : out.hist.rgb) v *= 1.0 / std::max(1, cfg.frames);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            Vec3 s(0);
            for (int b = 0; b < cfg.bins; ++b) s += out.hist.rgb[out.hist.idx(x, y, b)];
            out.image.at(x, y) = s;
        }
    return out;
}

// Doppler-gated rendering: the gated pipeline with the velocity constraint.
inline RenderOutput render_doppler(const SceneDef& def, const RenderConfig& cfg) {
    RenderConfig c = cfg;
    c.gate.kind = GateSpec::Kind::Velocity;
    return render_gated(def, c);
}

// ---------------------------------------------------------------------------
// metrics

struct Metrics {
    double mape = 0;
    double relmse = 0;
};

inline Metrics compute_metrics(const Image& est, const Image& ref) {
    Metrics m;
    if (est.w != ref.w || est.h != ref.h || est.px.empty()) return m;
    double eps = 0;
    for (const auto& p : ref.px) eps += (p.x + p.y + p.z) / 3.0;
    eps = 1e-2 * (eps / double(ref.px.size()));
    double sa = 0, ss = 0;
    size_t n = 0;
    for (size_t i = 0; i < est.px.size(); ++i) {
        for (int ch = 0; ch < 3; ++ch) {
            double e = est.px[i][ch], r = ref.px[i][ch];
            sa += std::abs(e - r) / (r + eps);
            ss += (e - r) * (e - r) / (r * r + eps);
            ++n;
        }
    }
    m.mape = sa / double(n);
    m.relmse = ss / double(n);
    return m;
}

// ---------------------------------------------------------------------------
// stats emission (line-delimited key=value records)

inline std::string stats_lines(const std::vector<FrameStats>& stats) {
    std::ostringstream os;
    auto emit = [&](int frame, const char* stage, const StageStats& st) {
        const ShiftCounts& s = st.shift;
        if (s.attempts == 0 && st.seconds == 0) return;
        os << "frame=" << frame << " stage=" << stage << " attempts=" << s.attempts
           << " solves=" << s.solves << " converged=" << s.newton_ok
           << " newton_failed=" << s.newton_failed << " occluded=" << s.occluded
           << " jacobian_clamped=" << s.jac_clamped << " replay_failed=" << s.replay_failed
           << " success=" << s.success << " mean_iterations=" << s.mean_iterations()
           << " newton_sr=" << s.newton_sr() << " actual_sr=" << s.actual_sr()
           << " seconds=" << st.seconds << "\n";
    };
    for (const auto& f : stats) {
        os << "frame=" << f.frame << " stage=init seconds=" << f.t_init << "\n";
        emit(f.frame, "temporal", f.temporal);
        emit(f.frame, "spatial", f.spatial);
        emit(f.frame, "bin", f.binwise);
        os << "frame=" << f.frame << " stage=shade seconds=" << f.t_shade << "\n";
    }
    return os.str();
}

// Debug reservoir dump: little-endian records per pixel.
//   header: "TOFR" u32 width u32 height u32 bins
//   record: f64 w_sum, f64 W, f64 M, f64 phat, f64 len, f64 u, i32 depth, i32 k
inline void write_reservoir_dump(const FrameBuffers& bufs, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.write("TOFR", 4);
    uint32_t dims[3] = {uint32_t(bufs.w), uint32_t(bufs.h), uint32_t(bufs.bins)};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    for (const Reservoir& r : bufs.cur) {
        double d[6] = {r.w_sum, r.W, r.M, r.phat_y, r.y.len, r.y.u};
        int32_t i[2] = {int32_t(r.y.depth), int32_t(r.y.rec.k)};
        f.write(reinterpret_cast<const char*>(d), sizeof(d));
        f.write(reinterpret_cast<const char*>(i), sizeof(i));
    }
}

}  // namespace tofr
