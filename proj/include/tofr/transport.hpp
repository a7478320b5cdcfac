#pragma once

#include <cstring>
#include <functional>
#include <optional>
#include <vector>

#include "ellipsoid.hpp"
#include "scene.hpp"

namespace tofr {

// ---------------------------------------------------------------------------
// gates

// Box window on optical path length, inclusive at both ends.
struct TimeGate {
    double center = 0;
    double width = 1;

    double lo() const { return center - width / 2; }
    double hi() const { return center + width / 2; }
};

inline double gate_weight(const TimeGate& g, double len) {
    return std::abs(len - g.center) <= g.width / 2 ? 1.0 : 0.0;
}

// Box window on the Doppler shift f0 * u (c = 1 in scene units).
struct FrequencyGate {
    double center = 0;  // Hz
    double width = 1;   // Hz
    double f0 = 1;      // carrier, Hz
};

inline double doppler_shift(double u, double f0) { return f0 * u; }

inline double freq_gate_weight(const FrequencyGate& g, double u) {
    return std::abs(doppler_shift(u, g.f0) - g.center) <= g.width / 2 ? 1.0 : 0.0;
}

// A render domain gates either path length or path velocity; the Newton
// constraint fields mirror this choice.
struct GateSpec {
    enum class Kind { Length, Velocity };
    Kind kind = Kind::Length;
    double center = 0;  // path length, or Doppler shift in Hz
    double width = 1;
    double f0 = 1;

    // gate parameters in constraint units (length, or velocity u)
    double ccenter() const { return kind == Kind::Length ? center : center / f0; }
    double cwidth() const { return kind == Kind::Length ? width : width / f0; }
    double weight(double len, double u) const {
        double v = kind == Kind::Length ? len : u;
        return std::abs(v - ccenter()) <= cwidth() / 2 ? 1.0 : 0.0;
    }
    TimeGate time_gate() const { return {center, width}; }
};

// ---------------------------------------------------------------------------
// spec'd path quantities

inline double path_length(const Vec3* pos, int n) {
    double l = 0;
    for (int i = 0; i + 1 < n; ++i) l += norm(pos[i + 1] - pos[i]);
    return l;
}
inline double path_length(const std::vector<Vec3>& pos) {
    return path_length(pos.data(), int(pos.size()));
}

// u = sum (v_k - v_{k+1}) . r_k = -d/dt of the path length.
inline double path_velocity(const Vec3* pos, const Vec3* vel, int n) {
    double u = 0;
    for (int i = 0; i + 1 < n; ++i) {
        Vec3 r = normalize(pos[i + 1] - pos[i]);
        u += dot(vel[i] - vel[i + 1], r);
    }
    return u;
}
inline double path_velocity(const std::vector<Vec3>& pos, const std::vector<Vec3>& vel) {
    return path_velocity(pos.data(), vel.data(), int(pos.size()));
}

inline double geom_term(const Vec3& a, const Vec3& na, const Vec3& b, const Vec3& nb) {
    Vec3 d = b - a;
    double d2 = norm2(d);
    if (d2 <= 0) return 0;
    double dist = std::sqrt(d2);
    Vec3 w = d / dist;
    return std::abs(dot(na, w)) * std::abs(dot(nb, w)) / d2;
}

// ---------------------------------------------------------------------------
// transient histogram

// B contiguous box gates tiling [t0, t0 + bins*bin_width]; interior bin
// boundaries are half-open [lo, hi), the final bin is closed.
struct TransientHistogram {
    int w = 0, h = 0, bins = 0;
    double t0 = 0, bin_width = 0;
    std::vector<Vec3> rgb;
    std::vector<int64_t> count;

    TransientHistogram() = default;
    TransientHistogram(int w_, int h_, int b_, double t0_, double bw_)
        : w(w_), h(h_), bins(b_), t0(t0_), bin_width(bw_),
          rgb(size_t(w_) * h_ * b_), count(size_t(w_) * h_ * b_, 0) {}

    size_t idx(int x, int y, int b) const { return (size_t(y) * w + x) * bins + b; }
    TimeGate bin_gate(int b) const { return {t0 + (b + 0.5) * bin_width, bin_width}; }
    TimeGate covering_gate() const { return {t0 + bins * bin_width / 2, bins * bin_width}; }

    int bin_of(double len) const {
        if (len < t0 || len > t0 + bins * bin_width) return -1;
        int b = int((len - t0) / bin_width);
        return std::min(b, bins - 1);  // closed final bin
    }

    void deposit(int x, int y, double len, const Vec3& value) {
        int b = bin_of(len);
        if (b < 0) return;
        rgb[idx(x, y, b)] += value;
        count[idx(x, y, b)] += 1;
    }
};

// ---------------------------------------------------------------------------
// path samples and reconnection records

constexpr int kMaxVerts = 12;

enum class SuffixKind : uint8_t {
    Surface,   // p2 is an ordinary surface vertex with stored reconnection info
    Light,     // p2 is the delta light itself; emission evaluated live
    LightSub,  // p2 is the collimated-beam vertex of the target frame
};

// Everything a shift needs: replay lanes for the prefix, the reconnection
// vertex with its two neighbours, and the stored next-vertex info (incident
// direction and accumulated radiance-side product kept at p2, not at p).
struct ReconnRecord {
    bool valid = false;
    int k = -1;          // reconnection vertex index; p = x_k, camera = x_0
    int n_lanes = 0;     // replay decisions at x_1..x_{k-2}
    RngState lanes[kMaxVerts];

    // prefix through p1 (recomputed by replay on every shift)
    double prefix_pdf = 1;
    double prefix_len = 0;
    double prefix_u = 0;
    Vec3 prefix_fw{1, 1, 1};
    Vec3 p1, n1;
    int m1 = -1, obj1 = -1;
    Vec3 wi1;  // unit, p1 -> its predecessor

    // the reconnection vertex p
    Vec3 p, pn;
    int ptri = -1, pobj = -1, pmat = -1;

    // suffix at and beyond p2
    SuffixKind skind = SuffixKind::Light;
    Vec3 p2, n2;
    int m2 = -1, obj2 = -1;
    Vec3 wo2;             // unit, p2 -> its successor (light side)
    Vec3 suffix_f{1, 1, 1};
    double suffix_len = 0;
    double suffix_u = 0;
};

struct PathSample {
    Vec3 f;          // full path contribution, area measure
    double pdf = 0;  // area pdf at generation time (initial candidates)
    double len = 0;
    double u = 0;    // path velocity
    int depth = 0;   // number of segments
    ReconnRecord rec;
};

// ---------------------------------------------------------------------------
// path tracing / candidate generation

struct TraceConfig {
    int max_depth = 6;  // segments, including the final light connection
    bool use_rr = true;
    bool build_rec = true;
    bool ellipsoidal = false;
    TimeGate ell_gate{0, 0};  // ellipsoidal completions hit this gate's center
};

// Depth-only survival keeps random replay structurally stable across pixels.
inline double rr_survival(int bounce, const TraceConfig& cfg) {
    if (!cfg.use_rr || bounce < 3) return 1.0;
    return 0.7;
}

namespace detail {

struct WalkVertex {
    Vec3 p, n;
    int tri = -1, obj = -1, mat = -1;
    Vec3 wi;  // unit, toward predecessor
    Vec3 vel;
    RngState lane;    // rng state before this vertex's sampling decisions
    Vec3 fw_in;       // product of f factors through the G arriving here
    double pdf_in;    // area pdf of x_2..x_i (x_1 is pinned)
    double len_in;    // camera .. x_i
    double u_in;      // velocity terms of segments camera .. x_i
};

}  // namespace detail

// Candidate sink receives (sample, mis_m) where mis_m is the balance weight
// between the generating strategy and its competing strategy, 1 when unique.
using CandidateSink = std::function<void(const PathSample&, double)>;

class Tracer {
  public:
    Tracer(const SceneFrame& fr, const TraceConfig& cfg) : fr_(fr), cfg_(cfg) {}

    // Traces one path tree from the pixel and emits one complete candidate per
    // light connection. `rng` drives the walk; ellipsoidal draws use `ell_rng`.
    void trace_tree(int px, int py, Rng& rng, Rng& ell_rng, const CandidateSink& sink) const {
        const Bvh& bvh = *fr_.bvh;
        Ray ray = fr_.cam.primary_ray(px, py);
        auto hit = bvh.intersect(ray);
        if (!hit) return;

        detail::WalkVertex v[kMaxVerts];
        v[1].p = hit->pos;
        v[1].n = hit->n;
        v[1].tri = hit->tri;
        v[1].obj = bvh.triangle(hit->tri).object;
        v[1].mat = bvh.triangle(hit->tri).material;
        v[1].wi = -ray.d;
        v[1].vel = fr_.velocity_at(v[1].obj, v[1].p);
        v[1].fw_in = Vec3(1, 1, 1);
        v[1].pdf_in = 1;
        v[1].len_in = hit->t;
        v[1].u_in = dot(fr_.cam_velocity - v[1].vel, ray.d);

        for (int d = 1; d + 1 <= cfg_.max_depth && d < kMaxVerts - 1; ++d) {
            const Material& m = fr_.material(v[d].mat);
            if (!m.delta()) {
                emit_nee(v, d, sink);
                if (cfg_.ellipsoidal) emit_ellipsoidal(v, d, ell_rng, sink);
            }
            // continue the walk
            if (d + 2 > cfg_.max_depth) break;
            v[d].lane = rng.state();
            double surv = rr_survival(d, cfg_);
            if (surv < 1.0 && rng.next() >= surv) break;
            BsdfSample bs = sample_bsdf(m, v[d].n, v[d].wi, rng);
            if (!bs.valid) break;
            Ray next{v[d].p, bs.wo};
            auto nh = bvh.intersect(next);
            if (!nh) break;
            detail::WalkVertex& w = v[d + 1];
            w.p = nh->pos;
            w.n = nh->n;
            w.tri = nh->tri;
            w.obj = bvh.triangle(nh->tri).object;
            w.mat = bvh.triangle(nh->tri).material;
            w.wi = -bs.wo;
            w.vel = fr_.velocity_at(w.obj, w.p);
            double g = geom_term(v[d].p, v[d].n, w.p, w.n);
            Vec3 fr_val = m.delta() ? m.albedo : eval_bsdf(m, v[d].n, v[d].wi, bs.wo);
            w.fw_in = v[d].fw_in * fr_val * g;
            double cos_w = std::abs(dot(w.n, bs.wo));
            w.pdf_in = v[d].pdf_in * surv * bs.pdf * cos_w / (nh->t * nh->t);
            w.len_in = v[d].len_in + nh->t;
            w.u_in = v[d].u_in + dot(v[d].vel - w.vel, bs.wo);
        }
    }

  private:
    // direct NEE completion: wide light -> connect to the light position,
    // collimated -> connect to the beam's first non-delta vertex
    void emit_nee(const detail::WalkVertex* v, int d, const CandidateSink& sink) const {
        const Bvh& bvh = *fr_.bvh;
        const Material& m = fr_.material(v[d].mat);
        PathSample s;
        double p_dir_step = 0, p_ell_step = 0;

        if (fr_.light.regime == LightRegime::Wide) {
            auto ls = light_sample(fr_.light, v[d].p);
            if (!ls) return;
            if (bvh.occluded(v[d].p, fr_.light.position)) return;
            Vec3 f_at = eval_bsdf(m, v[d].n, v[d].wi, ls->dir);
            double cos_v = std::abs(dot(v[d].n, ls->dir));
            s.f = v[d].fw_in * f_at * (cos_v)*ls->value;
            s.len = v[d].len_in + ls->dist;
            s.u = v[d].u_in + dot(v[d].vel /*- light vel 0*/, ls->dir);
            s.depth = d + 1;
        } else {
            const LightSubpath& lsub = fr_.lsub;
            if (!lsub.valid) return;
            Vec3 dvec = lsub.pos - v[d].p;
            double dist = norm(dvec);
            if (dist <= bvh.eps_ray() * 2) return;
            Vec3 wto = dvec / dist;
            if (bvh.occluded(v[d].p, lsub.pos)) return;
            Vec3 f_at = eval_bsdf(m, v[d].n, v[d].wi, wto);
            const Material& sm = fr_.material(lsub.material);
            Vec3 f_s = eval_bsdf(sm, lsub.n, -wto, lsub.wo_light);
            double g = geom_term(v[d].p, v[d].n, lsub.pos, lsub.n);
            s.f = v[d].fw_in * f_at * g * f_s * lsub.power;
            s.len = v[d].len_in + dist + lsub.chain_len;
            Vec3 vs = fr_.velocity_at(lsub.object, lsub.pos);
            s.u = v[d].u_in + dot(v[d].vel - vs, wto) + dot(vs, lsub.wo_light);
            s.depth = d + 1;  // beam-chain segments are not budgeted
        }
        if (s.len <= 0) return;
        s.pdf = v[d].pdf_in;
        if (!(luminance(s.f) > 0) || !is_finite(s.f)) return;

        double mis_m = 1.0;
        if (cfg_.ellipsoidal && d >= 2 && !fr_.material(v[d - 1].mat).delta()) {
            // this completion is also reachable by an ellipsoidal insertion at
            // x_{d-1}; weight the strategies by their junction densities
            p_dir_step = v[d].pdf_in / v[d - 1].pdf_in;  // bsdf step density to x_d
            p_ell_step = ell_pdf_at(v[d - 1], v[d].p, v[d].tri, s.len);
            if (p_ell_step > 0) mis_m = p_dir_step / (p_dir_step + p_ell_step);
        }
        if (cfg_.build_rec) build_record(v, d, /*q=*/nullptr, s);
        sink(s, mis_m);
    }

    // ellipsoidal completion: insert q between x_d and the light side so the
    // total length lands exactly on the gate center
    void emit_ellipsoidal(const detail::WalkVertex* v, int d, Rng& rng,
                          const CandidateSink& sink) const {
        const Bvh& bvh = *fr_.bvh;
        if (d + 2 > cfg_.max_depth) return;
        Vec3 lpos;
        double suffix_len = 0;
        if (fr_.light.regime == LightRegime::Wide) {
            lpos = fr_.light.position;
        } else {
            if (!fr_.lsub.valid) return;
            lpos = fr_.lsub.pos;
            suffix_len = fr_.lsub.chain_len;
        }
        double l_rem = cfg_.ell_gate.center - v[d].len_in - suffix_len;
        auto ell = ellipsoid_from_constraint(v[d].p, lpos, l_rem);
        if (!ell) return;
        auto q = sample_connection_vertex(bvh, *ell, rng);
        if (!q) return;

        const Triangle& qt = bvh.triangle(q->tri);
        const Material& qm = fr_.material(qt.material);
        if (qm.delta()) return;
        Vec3 d1 = q->pos - v[d].p;
        double dist1 = norm(d1);
        if (dist1 <= 2 * bvh.eps_ray()) return;
        Vec3 w1 = d1 / dist1;
        Vec3 d2 = lpos - q->pos;
        double dist2 = norm(d2);
        if (dist2 <= 2 * bvh.eps_ray()) return;
        Vec3 w2 = d2 / dist2;
        if (bvh.occluded(v[d].p, q->pos) || bvh.occluded(q->pos, lpos)) return;

        const Material& m = fr_.material(v[d].mat);
        Vec3 f_v = eval_bsdf(m, v[d].n, v[d].wi, w1);
        double g1 = geom_term(v[d].p, v[d].n, q->pos, qt.n);
        Vec3 f_q = eval_bsdf(qm, qt.n, -w1, w2);
        PathSample s;
        Vec3 qvel = fr_.velocity_at(qt.object, q->pos);
        if (fr_.light.regime == LightRegime::Wide) {
            auto cone = light_sample(fr_.light, q->pos);
            if (!cone) return;
            double cos_q = std::abs(dot(qt.n, w2));
            s.f = v[d].fw_in * f_v * g1 * f_q * cos_q * cone->value;
            s.depth = d + 2;
            s.u = v[d].u_in + dot(v[d].vel - qvel, w1) + dot(qvel, w2);
        } else {
            const LightSubpath& lsub = fr_.lsub;
            const Material& sm = fr_.material(lsub.material);
            Vec3 f_s = eval_bsdf(sm, lsub.n, -w2, lsub.wo_light);
            double g2 = geom_term(q->pos, qt.n, lsub.pos, lsub.n);
            s.f = v[d].fw_in * f_v * g1 * f_q * g2 * f_s * lsub.power;
            s.depth = d + 2;
            Vec3 vs = fr_.velocity_at(lsub.object, lsub.pos);
            s.u = v[d].u_in + dot(v[d].vel - qvel, w1) + dot(qvel - vs, w2) +
                  dot(vs, lsub.wo_light);
        }
        s.len = v[d].len_in + dist1 + dist2 + suffix_len;
        if (!(luminance(s.f) > 0) || !is_finite(s.f)) return;

        // effective area density: arc pdf x in-plane length gradient / width
        double grad = ell_length_gradient(*ell, q->pos, qt);
        if (grad <= 0) return;
        double p_ell_step = q->pdf_arc * grad / cfg_.ell_gate.width;
        // competing direct strategy: bsdf step from x_d to q, then NEE
        double surv = rr_survival(d, cfg_);
        double pdf_w = pdf_bsdf(m, v[d].n, v[d].wi, w1);
        double p_dir_step = surv * pdf_w * std::abs(dot(qt.n, w1)) / (dist1 * dist1);
        double mis_m = p_ell_step / (p_ell_step + p_dir_step);
        s.pdf = v[d].pdf_in * p_ell_step;
        if (!(s.pdf > 0)) return;

        if (cfg_.build_rec) {
            detail::WalkVertex q_as_vertex;
            q_as_vertex.p = q->pos;
            q_as_vertex.n = qt.n;
            q_as_vertex.tri = q->tri;
            q_as_vertex.obj = qt.object;
            q_as_vertex.mat = qt.material;
            q_as_vertex.wi = -w1;
            q_as_vertex.vel = qvel;
            build_record(v, d, &q_as_vertex, s);
        }
        sink(s, mis_m);
    }

    // density of the ellipsoidal strategy producing a path whose inserted
    // vertex sits at qpos on triangle qtri, given the prefix ending at `at`
    double ell_pdf_at(const detail::WalkVertex& at, const Vec3& qpos, int qtri,
                      double total_len) const {
        if (cfg_.ell_gate.width <= 0) return 0;
        if (gate_weight(cfg_.ell_gate, total_len) <= 0) return 0;
        Vec3 lpos;
        if (fr_.light.regime == LightRegime::Wide) {
            lpos = fr_.light.position;
        } else {
            if (!fr_.lsub.valid) return 0;
            lpos = fr_.lsub.pos;
        }
        double two_seg = norm(qpos - at.p) + norm(lpos - qpos);
        auto ell = ellipsoid_from_constraint(at.p, lpos, two_seg);
        if (!ell) return 0;
        double pdf_arc = eval_connection_pdf(*fr_.bvh, *ell, qtri);
        if (pdf_arc <= 0) return 0;
        double grad = ell_length_gradient(*ell, qpos, fr_.bvh->triangle(qtri));
        if (grad <= 0) return 0;
        return pdf_arc * grad / cfg_.ell_gate.width;
    }

    static double ell_length_gradient(const Ellipsoid& e, const Vec3& q, const Triangle& tri) {
        Vec3 s = normalize(e.f1 - q) + normalize(e.f2 - q);
        Vec3 in_plane = s - tri.n * dot(tri.n, s);
        return norm(in_plane);
    }

    // Fills s.rec. `q` is the ellipsoidal insert acting as the final surface
    // vertex, or null for plain NEE completions.
    void build_record(const detail::WalkVertex* v, int d, const detail::WalkVertex* q,
                      PathSample& s) const {
        int last = q ? d + 1 : d;  // index of the last surface vertex
        auto vert = [&](int i) -> const detail::WalkVertex& {
            return (q && i == d + 1) ? *q : v[i];
        };
        // first consecutive reconnectable pair; the successor's BSDF gets
        // re-evaluated when p moves, so it must not be a delta lobe
        int k = -1;
        for (int i = 2; i <= last; ++i) {
            if (fr_.material(vert(i - 1).mat).reconnectable() &&
                fr_.material(vert(i).mat).reconnectable() &&
                (i == last || !fr_.material(vert(i + 1).mat).delta())) {
                k = i;
                break;
            }
        }
        if (k < 0) return;

        ReconnRecord& r = s.rec;
        r.valid = true;
        r.k = k;
        r.n_lanes = std::max(0, k - 2);
        for (int i = 1; i <= k - 2; ++i) r.lanes[i - 1] = v[i].lane;

        const detail::WalkVertex& pv1 = vert(k - 1);
        r.prefix_pdf = pv1.pdf_in;
        r.prefix_len = pv1.len_in;
        r.prefix_u = pv1.u_in;
        r.prefix_fw = pv1.fw_in;
        r.p1 = pv1.p;
        r.n1 = pv1.n;
        r.m1 = pv1.mat;
        r.obj1 = pv1.obj;
        r.wi1 = pv1.wi;

        const detail::WalkVertex& pv = vert(k);
        r.p = pv.p;
        r.pn = pv.n;
        r.ptri = pv.tri;
        r.pobj = pv.obj;
        r.pmat = pv.mat;

        if (k == last) {
            // p connects straight to the light side
            if (fr_.light.regime == LightRegime::Wide) {
                r.skind = SuffixKind::Light;
                r.p2 = fr_.light.position;
                r.suffix_len = 0;
                r.suffix_u = 0;
            } else {
                r.skind = SuffixKind::LightSub;
                r.p2 = fr_.lsub.pos;
                r.suffix_len = fr_.lsub.chain_len;
                Vec3 vs = fr_.velocity_at(fr_.lsub.object, fr_.lsub.pos);
                r.suffix_u = dot(vs, fr_.lsub.wo_light);
            }
            return;
        }

        const detail::WalkVertex& pv2 = vert(k + 1);
        r.skind = SuffixKind::Surface;
        r.p2 = pv2.p;
        r.n2 = pv2.n;
        r.m2 = pv2.mat;
        r.obj2 = pv2.obj;

        // successor direction and the product of factors beyond fr(p2)
        Vec3 succ_pos;
        if (k + 1 == last) {
            if (fr_.light.regime == LightRegime::Wide) {
                succ_pos = fr_.light.position;
            } else {
                succ_pos = fr_.lsub.pos;
            }
        } else {
            succ_pos = vert(k + 2).p;
        }
        r.wo2 = normalize(succ_pos - pv2.p);

        // rebuild the tail product: everything past fr(p2)
        Vec3 tail(1, 1, 1);
        double tail_len = 0, tail_u = 0;
        Vec3 prev_p = pv2.p, prev_n = pv2.n;
        Vec3 prev_vel = pv2.vel;
        for (int i = k + 2; i <= last; ++i) {
            const detail::WalkVertex& w = vert(i);
            Vec3 wdir = normalize(w.p - prev_p);
            tail *= geom_term(prev_p, prev_n, w.p, w.n);
            if (i != last) {
                // intermediate tail vertex: its fr toward the next tail vertex
                const Material& wm = fr_.material(w.mat);
                Vec3 out = normalize(vert(i + 1).p - w.p);
                tail *= wm.delta() ? wm.albedo : eval_bsdf(wm, w.n, -wdir, out);
            }
            tail_len += norm(w.p - prev_p);
            tail_u += dot(prev_vel - w.vel, wdir);
            prev_p = w.p;
            prev_n = w.n;
            prev_vel = w.vel;
        }
        const detail::WalkVertex& lastv = vert(last);
        if (fr_.light.regime == LightRegime::Wide) {
            auto ls = light_sample(fr_.light, lastv.p);
            if (!ls) {
                r.valid = false;
                return;
            }
            if (k + 2 <= last) {
                const Material& lm = fr_.material(lastv.mat);
                tail *= eval_bsdf(lm, lastv.n, lastv.wi, ls->dir);
            }
            tail *= std::abs(dot(lastv.n, ls->dir)) * ls->value;
            tail_len += ls->dist;
            tail_u += dot(lastv.vel, ls->dir);
        } else {
            const LightSubpath& lsub = fr_.lsub;
            Vec3 dvec = lsub.pos - lastv.p;
            double dist = norm(dvec);
            Vec3 wto = dvec / dist;
            if (k + 2 <= last) {
                const Material& lm = fr_.material(lastv.mat);
                tail *= eval_bsdf(lm, lastv.n, lastv.wi, wto);
            }
            const Material& sm = fr_.material(lsub.material);
            Vec3 f_s = eval_bsdf(sm, lsub.n, -wto, lsub.wo_light);
            tail *= geom_term(lastv.p, lastv.n, lsub.pos, lsub.n) * f_s * lsub.power;
            tail_len += dist + lsub.chain_len;
            Vec3 vs = fr_.velocity_at(lsub.object, lsub.pos);
            tail_u += dot(lastv.vel - vs, wto) + dot(vs, lsub.wo_light);
        }
        r.suffix_f = tail;
        r.suffix_len = tail_len;
        r.suffix_u = tail_u;
    }

    const SceneFrame& fr_;
    const TraceConfig& cfg_;
};

// ---------------------------------------------------------------------------
// brute-force gated reference (the unbiasedness oracle for every reuse mode)

inline Vec3 reference_gated_pixel(const SceneFrame& fr, int px, int py, const GateSpec& gate,
                                  int spp, uint64_t seed, Vec3* var_out = nullptr,
                                  int max_depth = 6) {
    TraceConfig cfg;
    cfg.max_depth = max_depth;
    cfg.build_rec = false;
    Tracer tracer(fr, cfg);
    Vec3 sum(0), sum2(0);
    uint64_t pix = uint64_t(py) * fr.cam.width + px;
    for (int s = 0; s < spp; ++s) {
        Vec3 est(0);
        Rng rng(seed, uint64_t(fr.frame), pix, uint64_t(s), 0);
        Rng ell_rng(seed, uint64_t(fr.frame), pix, uint64_t(s), 2);
        tracer.trace_tree(px, py, rng, ell_rng, [&](const PathSample& c, double mis_m) {
            double w = gate.weight(c.len, c.u);
            if (w > 0 && c.pdf > 0) est += c.f * (mis_m * w / c.pdf);
        });
        sum += est;
        sum2 += est * est;
    }
    Vec3 mean = sum / double(spp);
    if (var_out) {
        Vec3 var = sum2 / double(spp) - mean * mean;
        *var_out = {std::max(0.0, var.x), std::max(0.0, var.y), std::max(0.0, var.z)};
    }
    return mean;
}

}  // namespace tofr
