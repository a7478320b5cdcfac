#pragma once

// Reference rendering and measurement harnesses shared by the CLI sweep verb
// and the acceptance suite.

#include "pipeline.hpp"

namespace tofr {

struct ReferenceImages {
    Image mean;
    Image se;  // standard error of the per-pixel mean
};

// Brute-force gated renderer (no reuse), the oracle for every estimator.
inline ReferenceImages reference_render(const SceneFrame& fr, const GateSpec& gate, int spp,
                                        uint64_t seed, int max_depth = 6) {
    int W = fr.cam.width, H = fr.cam.height;
    ReferenceImages out{Image(W, H), Image(W, H)};
    parallel_for(H, [&](int y) {
        for (int x = 0; x < W; ++x) {
            Vec3 var;
            Vec3 mean = reference_gated_pixel(fr, x, y, gate, spp, seed, &var, max_depth);
            out.mean.at(x, y) = mean;
            out.se.at(x, y) = {std::sqrt(var.x / spp), std::sqrt(var.y / spp),
                               std::sqrt(var.z / spp)};
        }
    });
    return out;
}

struct EqualTimeResult {
    Image image;       // mean over completed repetitions
    int repetitions = 0;
    double seconds = 0;
    ShiftCounts spatial, temporal, binwise;
};

// Repeats independent single-frame renders with stepped seeds until the time
// budget runs out, averaging the estimates. Used for equal-time comparisons.
inline EqualTimeResult render_equal_time(const SceneDef& def, const RenderConfig& base,
                                         double budget_seconds, int min_reps = 1,
                                         int max_reps = 1 << 20) {
    EqualTimeResult out;
    out.image = Image(def.camera.width, def.camera.height);
    double t0 = detail::now_seconds();
    for (int rep = 0; rep < max_reps; ++rep) {
        if (rep >= min_reps && detail::now_seconds() - t0 >= budget_seconds) break;
        RenderConfig cfg = base;
        cfg.seed = base.seed + uint64_t(rep) * 0x9e3779b9u;
        RenderOutput r = cfg.mode == RenderMode::Transient ? render_transient(def, cfg)
                                                           : render_gated(def, cfg);
        out.image += r.image;
        for (const FrameStats& fs : r.stats) {
            out.spatial += fs.spatial.shift;
            out.temporal += fs.temporal.shift;
            out.binwise += fs.binwise.shift;
        }
        out.repetitions++;
    }
    out.seconds = detail::now_seconds() - t0;
    if (out.repetitions > 0) out.image *= 1.0 / out.repetitions;
    return out;
}

// Least-squares line fit; returns (intercept, slope, r^2).
struct LineFit {
    double c0 = 0, c1 = 0, r2 = 0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    LineFit f;
    size_t n = x.size();
    if (n < 2) return f;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    double den = n * sxx - sx * sx;
    if (den == 0) return f;
    f.c1 = (n * sxy - sx * sy) / den;
    f.c0 = (sy - f.c1 * sx) / n;
    double ss_res = 0, ss_tot = 0, my = sy / n;
    for (size_t i = 0; i < n; ++i) {
        double pred = f.c0 + f.c1 * x[i];
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - my) * (y[i] - my);
    }
    f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    return f;
}

// Lower bound on any camera->...->light path length: closest approach to the
// scene bounds from both endpoints. Used for the infeasible-gate warning.
inline double min_path_length_bound(const SceneFrame& fr) {
    const Aabb& box = fr.bvh->nodes()[0].box;
    auto dist_to_box = [&](const Vec3& p) {
        double d2 = 0;
        for (int a = 0; a < 3; ++a) {
            double lo = box.lo[a] - p[a], hi = p[a] - box.hi[a];
            double d = std::max({lo, hi, 0.0});
            d2 += d * d;
        }
        return std::sqrt(d2);
    };
    return dist_to_box(fr.cam.pose.position) + dist_to_box(fr.light.position);
}

}  // namespace tofr
