#pragma once

#include <atomic>

#include "transport.hpp"

namespace tofr {

// ---------------------------------------------------------------------------
// two-segment length derivatives at the reconnection vertex

// grad of |p1-p| + |p2-p| w.r.t. p: -(d1 + d2), the negated unnormalized
// half-vector between the two segment directions.
inline Vec3 pathlen_gradient(const Vec3& p, const Vec3& p1, const Vec3& p2) {
    return -(normalize(p1 - p) + normalize(p2 - p));
}

inline Mat3 pathlen_hessian(const Vec3& p, const Vec3& p1, const Vec3& p2) {
    Vec3 e1 = p1 - p, e2 = p2 - p;
    double l1 = norm(e1), l2 = norm(e2);
    Vec3 d1 = e1 / l1, d2 = e2 / l2;
    Mat3 a = (Mat3::identity() - Mat3::outer(d1, d1)) * (1.0 / l1);
    Mat3 b = (Mat3::identity() - Mat3::outer(d2, d2)) * (1.0 / l2);
    return a + b;
}

// ---------------------------------------------------------------------------
// two-segment path-velocity derivatives (Doppler constraint)

// u restricted to the two segments around p:
//   u(p) = (v1 - v(p)) . r1 + (v(p) - v2) . r2,  r1 = unit(p-p1), r2 = unit(p2-p)
// with v(x) = A x + c the rigid velocity field of p's object.
struct VelocityLocal {
    Vec3 v1, v2;          // neighbour velocities (fixed)
    Mat3 A;               // velocity gradient at p (constant for rigid motion)
    Vec3 c;
    bool moving = false;  // p's object animated

    Vec3 vp(const Vec3& p) const { return moving ? A * p + c : Vec3(0); }
};

inline double vel_value(const VelocityLocal& f, const Vec3& p, const Vec3& p1, const Vec3& p2) {
    Vec3 v = f.vp(p);
    return dot(f.v1 - v, normalize(p - p1)) + dot(v - f.v2, normalize(p2 - p));
}

namespace detail {

// one term s(p) = c(p) . (s_r n),  n = (p-a)/|p-a|,  c(p) = alpha v(p) + const
inline Vec3 vel_term_grad(const Vec3& p, const Vec3& a, const Vec3& cvec, double s_r, double alpha,
                          const Mat3& V, bool moving) {
    Vec3 e = p - a;
    double l = norm(e);
    Vec3 n = e / l;
    Mat3 P = Mat3::identity() - Mat3::outer(n, n);
    Vec3 g = (P * cvec) * (s_r / l);
    if (moving) g += V.transpose_mul(n) * (alpha * s_r);
    return g;
}

inline Mat3 vel_term_hess(const Vec3& p, const Vec3& a, const Vec3& cvec, double s_r, double alpha,
                          const Mat3& V, bool moving) {
    Vec3 e = p - a;
    double l = norm(e);
    Vec3 n = e / l;
    Mat3 P = Mat3::identity() - Mat3::outer(n, n);
    Vec3 Pc = P * cvec;
    Mat3 h = (P * (-dot(n, cvec)) - Mat3::outer(n, Pc) - Mat3::outer(Pc, n)) * (s_r / (l * l));
    if (moving) {
        Mat3 PV = P * V;
        h = h + (PV + PV.transpose()) * (alpha * s_r / l);
    }
    return h;
}

}  // namespace detail

inline Vec3 vel_gradient(const VelocityLocal& f, const Vec3& p, const Vec3& p1, const Vec3& p2) {
    Vec3 v = f.vp(p);
    return detail::vel_term_grad(p, p1, f.v1 - v, +1, -1, f.A, f.moving) +
           detail::vel_term_grad(p, p2, v - f.v2, -1, +1, f.A, f.moving);
}

inline Mat3 vel_hessian(const VelocityLocal& f, const Vec3& p, const Vec3& p1, const Vec3& p2) {
    Vec3 v = f.vp(p);
    return detail::vel_term_hess(p, p1, f.v1 - v, +1, -1, f.A, f.moving) +
           detail::vel_term_hess(p, p2, v - f.v2, -1, +1, f.A, f.moving);
}

// ---------------------------------------------------------------------------
// the local constraint field (length or velocity) seen by the Newton solver

struct LocalConstraint {
    GateSpec::Kind kind = GateSpec::Kind::Length;
    Vec3 p1, p2;
    VelocityLocal vel;  // velocity mode only
    const SceneFrame* frame = nullptr;

    // velocity field follows the object the iterate currently sits on
    void bind_object(int obj) {
        if (kind != GateSpec::Kind::Velocity || !frame) return;
        vel.moving = false;
        if (obj >= 0 && obj < int(frame->obj_velocity.size()) &&
            frame->obj_velocity[obj].moving) {
            vel.A = frame->obj_velocity[obj].A;
            vel.c = frame->obj_velocity[obj].c;
            vel.moving = true;
        }
    }
    double value(const Vec3& p) const {
        if (kind == GateSpec::Kind::Length) return norm(p1 - p) + norm(p2 - p);
        return vel_value(vel, p, p1, p2);
    }
    Vec3 grad3(const Vec3& p) const {
        if (kind == GateSpec::Kind::Length) return pathlen_gradient(p, p1, p2);
        return vel_gradient(vel, p, p1, p2);
    }
    Mat3 hess3(const Vec3& p) const {
        if (kind == GateSpec::Kind::Length) return pathlen_hessian(p, p1, p2);
        return vel_hessian(vel, p, p1, p2);
    }
};

// grad/hessian pulled into a tangent frame; the flat-patch model drops the
// curvature term, so hess is exactly J^T A J.
inline void param_derivatives(const LocalConstraint& field, const Vec3& p, const Frame2& J,
                              Vec2& grad, Mat2& hess) {
    grad = J.to_local(field.grad3(p));
    hess = J.project_sym(field.hess3(p));
}

// ---------------------------------------------------------------------------
// gauge conditions

enum class GaugeKind { FixedAxis, RawGradient, AverageGradient };

struct Gauge {
    GaugeKind kind = GaugeKind::AverageGradient;
    Vec2 axis{1, 0};  // fixed-axis only, in the start frame
};

// Residual and both Jacobian blocks of
//   F(xi, xi') = [ value(xi') - value(xi) - delta ;  (R m)^T (xi' - xi) ]
// where m is the gauge direction. All 2D quantities live in the tangent frame
// passed for their side; the displacement is projected into each side's frame.
struct ConstraintEval {
    Vec2 F;
    Mat2 dF_dxi_p;  // w.r.t. xi'
    Mat2 dF_dxi;    // w.r.t. xi
    Vec2 grad_start, grad_cur;
};

// `fs` is bound to the start vertex's object, `fc` to the current iterate's;
// they only differ in velocity mode when a step lands on another object.
inline ConstraintEval assemble_constraint(const LocalConstraint& fs, const Vec3& p_start,
                                          const Frame2& Js, const LocalConstraint& fc,
                                          const Vec3& p_cur, const Frame2& Jc, double delta,
                                          const Gauge& gauge) {
    ConstraintEval e;
    Vec3 g3s = fs.grad3(p_start);
    Vec3 g3c = fc.grad3(p_cur);
    Vec2 gs = Js.to_local(g3s);
    Vec2 gc = Jc.to_local(g3c);
    e.grad_start = gs;
    e.grad_cur = gc;
    Vec3 disp = p_cur - p_start;
    Vec2 us = Js.to_local(disp);
    Vec2 uc = Jc.to_local(disp);

    e.F.x = fc.value(p_cur) - fs.value(p_start) - delta;

    Mat2 Hs{}, Hc{};
    bool need_hess = gauge.kind != GaugeKind::FixedAxis;
    if (need_hess) {
        Hs = Js.project_sym(fs.hess3(p_start));
        Hc = Jc.project_sym(fc.hess3(p_cur));
    }

    Vec2 row_c, row_s;  // second rows of dF/dxi' and -dF/dxi
    Vec2 m_c, m_s;
    switch (gauge.kind) {
        case GaugeKind::FixedAxis: {
            Vec3 aw = Js.to_world(gauge.axis);
            m_c = Jc.to_local(aw);
            m_s = gauge.axis;
            e.F.y = dot(rot90(m_c), uc);
            row_c = rot90(m_c);
            row_s = rot90(m_s);
            break;
        }
        case GaugeKind::RawGradient: {
            // m fixed to the start gradient; not symmetric, not reversible
            Vec3 mw = g3s;
            m_c = Jc.to_local(mw);
            m_s = gs;
            e.F.y = dot(rot90(m_c), uc);
            row_c = rot90(m_c);
            // d/dxi of (R g(xi))^T (xi'-xi) = -R g - H R (xi'-xi)
            row_s = rot90(m_s) + Hs * rot90(us);
            break;
        }
        case GaugeKind::AverageGradient: {
            Vec3 mw = (g3s + g3c) * 0.5;
            m_c = Jc.to_local(mw);
            m_s = Js.to_local(mw);
            e.F.y = dot(rot90(m_c), uc);
            // d/dxi' of (R m)^T (xi'-xi) with dm/dxi' = H'/2:
            //   R m + 0.5 H' R^T u = R m - 0.5 H' R u
            row_c = rot90(m_c) - (Hc * rot90(uc)) * 0.5;
            row_s = rot90(m_s) + (Hs * rot90(us)) * 0.5;
            break;
        }
    }
    e.dF_dxi_p = {gc.x, gc.y, row_c.x, row_c.y};
    e.dF_dxi = {-gs.x, -gs.y, -row_s.x, -row_s.y};
    return e;
}

// det(dxi'/dxi) by implicit differentiation; the surface factor is 1 for
// orthonormal frames.
inline double shift_jacobian(const ConstraintEval& e) {
    double dc = e.dF_dxi_p.det();
    if (dc == 0) return 0;
    return e.dF_dxi.det() / dc;
}

// ---------------------------------------------------------------------------
// Newton solve with mesh re-projection

enum class ShiftStatus : uint8_t {
    Converged,
    NewtonFailed,
    Occluded,
    JacobianClamped,
    ReplayFailed,
};

struct SurfacePoint {
    Vec3 pos, n;
    int tri = -1, obj = -1, mat = -1;
};

struct ShiftResult {
    ShiftStatus status = ShiftStatus::NewtonFailed;
    SurfacePoint p_prime;
    Vec2 xi_prime;          // solution offset in the start tangent frame
    double jacobian = 0;    // |d p'/d p|
    int iterations = 0;
    double residual = kInf;
};

struct NewtonParams {
    double tol = 1e-6;      // 1% of the gate width, constraint units
    int max_iters = 5;
    int max_backtracks = 8;
    double eps_grad = 1e-12;
};

namespace detail {

inline SurfacePoint surface_point_from(const Bvh& bvh, const HitRecord& hit) {
    SurfacePoint p;
    p.pos = hit.pos;
    p.n = hit.n;
    p.tri = hit.tri;
    p.obj = bvh.triangle(hit.tri).object;
    p.mat = bvh.triangle(hit.tri).material;
    return p;
}

// Puts a tangent-plane point back on the mesh. Points still inside the
// current triangle are exact already; otherwise re-project through a ray from
// p1, falling back to a short normal probe when that ray grazes the plane
// (p1 coplanar with the surface, common on flat walls).
inline std::optional<SurfacePoint> reproject_to_mesh(const Bvh& bvh, const SurfacePoint& cur,
                                                     const Vec3& plane_pt, const Vec3& p1) {
    const Triangle& tri = bvh.triangle(cur.tri);
    {
        Vec3 e1 = tri.v1 - tri.v0, e2 = tri.v2 - tri.v0, d = plane_pt - tri.v0;
        double d11 = dot(e1, e1), d12 = dot(e1, e2), d22 = dot(e2, e2);
        double dv1 = dot(d, e1), dv2 = dot(d, e2);
        double det = d11 * d22 - d12 * d12;
        if (det > 0) {
            double u = (d22 * dv1 - d12 * dv2) / det;
            double v = (d11 * dv2 - d12 * dv1) / det;
            if (u >= 0 && v >= 0 && u + v <= 1) {
                SurfacePoint p = cur;
                p.pos = plane_pt;
                return p;
            }
        }
    }
    Vec3 dir = plane_pt - p1;
    double dl = norm(dir);
    if (dl > 0) {
        dir = dir / dl;
        if (std::abs(dot(dir, tri.n)) > 1e-4) {
            if (auto hit = bvh.intersect({p1, dir})) return surface_point_from(bvh, *hit);
        }
    }
    double off = 1e-3 * bvh.scene_diag();
    if (auto hit = bvh.intersect_min({plane_pt + tri.n * off, -tri.n}, 0, 2 * off))
        return surface_point_from(bvh, *hit);
    if (auto hit = bvh.intersect_min({plane_pt - tri.n * off, tri.n}, 0, 2 * off))
        return surface_point_from(bvh, *hit);
    return std::nullopt;
}

}  // namespace detail

// Solves value(p') = value(p) + delta subject to the gauge, keeping p' on the
// mesh. Each accepted step moves in the current tangent plane and re-projects
// through a ray from p1, so the iterate stays visible from p1.
inline ShiftResult newton_solve(const Bvh& bvh, const LocalConstraint& field,
                                const SurfacePoint& start, double delta, const Gauge& gauge,
                                const NewtonParams& prm) {
    ShiftResult res;
    LocalConstraint fs = field;
    fs.bind_object(start.obj);
    Frame2 Js = tangent_frame(bvh.triangle(start.tri));

    SurfacePoint cur = start;
    LocalConstraint fc = fs;
    Frame2 Jc = Js;
    ConstraintEval e = assemble_constraint(fs, start.pos, Js, fc, cur.pos, Jc, delta, gauge);
    double fnorm = std::hypot(e.F.x, e.F.y);

    for (int iter = 0;; ++iter) {
        res.residual = std::max(std::abs(e.F.x), std::abs(e.F.y));
        res.iterations = iter;
        if (std::abs(e.F.x) <= prm.tol && std::abs(e.F.y) <= prm.tol) {
            res.status = ShiftStatus::Converged;
            res.iterations = iter;
            res.p_prime = cur;
            res.xi_prime = Js.to_local(cur.pos - start.pos);
            double j = shift_jacobian(e);
            if (!(j > 0) || !std::isfinite(j)) {
                res.status = ShiftStatus::NewtonFailed;
                return res;
            }
            res.jacobian = j;
            return res;
        }
        if (iter >= prm.max_iters) break;
        if (norm(e.grad_cur) < prm.eps_grad) break;  // degenerate in-plane gradient

        Vec2 step;
        if (!solve2x2(e.dF_dxi_p, -e.F, step)) break;

        bool accepted = false;
        double scale = 1.0;
        for (int bt = 0; bt <= prm.max_backtracks; ++bt, scale *= 0.5) {
            Vec3 plane_pt = cur.pos + Jc.to_world(step * scale);
            auto projected = detail::reproject_to_mesh(bvh, cur, plane_pt, field.p1);
            if (!projected) continue;
            SurfacePoint trial = *projected;
            LocalConstraint tf = fs;
            tf.bind_object(trial.obj);
            Frame2 Jt = tangent_frame(bvh.triangle(trial.tri));
            ConstraintEval et =
                assemble_constraint(fs, start.pos, Js, tf, trial.pos, Jt, delta, gauge);
            double fn = std::hypot(et.F.x, et.F.y);
            if (fn < fnorm) {
                cur = trial;
                Jc = Jt;
                fc = tf;
                e = et;
                fnorm = fn;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    res.status = ShiftStatus::NewtonFailed;
    res.p_prime = cur;
    return res;
}

// ---------------------------------------------------------------------------
// full sample shift between render domains

struct Domain {
    int px = 0, py = 0;
    GateSpec gate;
    const SceneFrame* frame = nullptr;
};

struct ShiftConfig {
    Gauge gauge;
    bool newton = true;  // false: naive reuse, reconnection without the solve
    double jac_min = 1.0 / 50.0, jac_max = 50.0;
    int max_depth = 6;
    bool use_rr = true;
};

// Plain counter snapshot; safe to copy and aggregate.
struct ShiftCounts {
    uint64_t attempts = 0, newton_ok = 0, newton_failed = 0, occluded = 0, jac_clamped = 0,
             replay_failed = 0, iterations = 0, solves = 0, success = 0;

    ShiftCounts& operator+=(const ShiftCounts& o) {
        attempts += o.attempts;
        newton_ok += o.newton_ok;
        newton_failed += o.newton_failed;
        occluded += o.occluded;
        jac_clamped += o.jac_clamped;
        replay_failed += o.replay_failed;
        iterations += o.iterations;
        solves += o.solves;
        success += o.success;
        return *this;
    }
    double mean_iterations() const { return solves ? double(iterations) / double(solves) : 0.0; }
    double newton_sr() const { return solves ? double(newton_ok) / double(solves) : 0.0; }
    double actual_sr() const { return attempts ? double(success) / double(attempts) : 0.0; }
};

// Atomic counters shared across workers; integer sums are identical for any
// worker count.
struct ShiftStats {
    std::atomic<uint64_t> attempts{0};
    std::atomic<uint64_t> newton_ok{0};
    std::atomic<uint64_t> newton_failed{0};
    std::atomic<uint64_t> occluded{0};
    std::atomic<uint64_t> jac_clamped{0};
    std::atomic<uint64_t> replay_failed{0};
    std::atomic<uint64_t> iterations{0};
    std::atomic<uint64_t> solves{0};
    std::atomic<uint64_t> success{0};  // usable contributions (nonzero target)

    ShiftCounts snapshot() const {
        ShiftCounts c;
        c.attempts = attempts.load();
        c.newton_ok = newton_ok.load();
        c.newton_failed = newton_failed.load();
        c.occluded = occluded.load();
        c.jac_clamped = jac_clamped.load();
        c.replay_failed = replay_failed.load();
        c.iterations = iterations.load();
        c.solves = solves.load();
        c.success = success.load();
        return c;
    }
};

// Replayed prefix of the offset path, up to the vertex before reconnection.
struct BaseShiftResult {
    bool ok = false;
    double prefix_pdf = 1, prefix_len = 0, prefix_u = 0;
    Vec3 prefix_fw{1, 1, 1};
    Vec3 p1, n1, wi1;
    int m1 = -1, obj1 = -1;
};

// Random replay from the destination pixel: re-trace bounce decisions with the
// stored rng lanes until the reconnection prefix is rebuilt. Fails when the
// offset path's first reconnectable pair would differ from the base path's.
inline BaseShiftResult hybrid_base_shift(const SceneFrame& fr, int px, int py,
                                         const ReconnRecord& rec, const ShiftConfig& cfg) {
    BaseShiftResult out;
    const Bvh& bvh = *fr.bvh;
    Ray ray = fr.cam.primary_ray(px, py);
    auto hit = bvh.intersect(ray);
    if (!hit) return out;

    Vec3 pos = hit->pos, n = hit->n;
    int tri = hit->tri;
    int obj = bvh.triangle(tri).object;
    int mat = bvh.triangle(tri).material;
    Vec3 wi = -ray.d;
    Vec3 vel = fr.velocity_at(obj, pos);
    Vec3 fw(1, 1, 1);
    double pdf = 1, len = hit->t;
    double u = dot(fr.cam_velocity - vel, ray.d);
    // structure rule, mirroring candidate generation: the offset path's first
    // reconnectable pair with a non-delta successor must land exactly at k
    bool reconn_prev2 = false;
    bool reconn_prev = fr.material(mat).reconnectable();

    for (int i = 1; i <= rec.k - 2; ++i) {
        const Material& m = fr.material(mat);
        Rng lane(rec.lanes[i - 1]);
        double surv = rr_survival(i, TraceConfig{cfg.max_depth, cfg.use_rr});
        if (surv < 1.0 && lane.next() >= surv) return out;
        BsdfSample bs = sample_bsdf(m, n, wi, lane);
        if (!bs.valid) return out;
        auto nh = bvh.intersect({pos, bs.wo});
        if (!nh) return out;
        const Triangle& nt = bvh.triangle(nh->tri);
        const Material& nm = fr.material(nt.material);
        // pair (y_{i-1}, y_i) with successor y_{i+1}: would reconnect earlier
        if (i >= 2 && reconn_prev2 && reconn_prev && !nm.delta()) return out;
        double g = geom_term(pos, n, nh->pos, nt.n);
        Vec3 fr_val = m.delta() ? m.albedo : eval_bsdf(m, n, wi, bs.wo);
        fw *= fr_val * g;
        double cos_w = std::abs(dot(nt.n, bs.wo));
        pdf *= surv * bs.pdf * cos_w / (nh->t * nh->t);
        len += nh->t;
        Vec3 nvel = fr.velocity_at(nt.object, nh->pos);
        u += dot(vel - nvel, bs.wo);
        pos = nh->pos;
        n = nt.n;
        tri = nh->tri;
        obj = nt.object;
        mat = nt.material;
        wi = -bs.wo;
        vel = nvel;
        reconn_prev2 = reconn_prev;
        reconn_prev = nm.reconnectable();
    }
    // pair (y_{k-2}, y_{k-1}) with successor p (never delta): too early
    if (rec.k >= 3 && reconn_prev2 && reconn_prev) return out;
    if (!reconn_prev) return out;  // (p1', p) must form the pair
    if (!(pdf > 0) || !is_finite(fw)) return out;

    out.ok = true;
    out.prefix_pdf = pdf;
    out.prefix_len = len;
    out.prefix_u = u;
    out.prefix_fw = fw;
    out.p1 = pos;
    out.n1 = n;
    out.wi1 = wi;
    out.m1 = mat;
    out.obj1 = obj;
    return out;
}

struct ShiftOutcome {
    ShiftStatus status = ShiftStatus::ReplayFailed;
    PathSample mapped;
    double jacobian = 0;
    bool ok() const { return status == ShiftStatus::Converged; }
};

namespace detail {

struct SuffixEval {
    Vec3 p2, n2;
    double suffix_len = 0, suffix_u = 0;
    Vec3 v2;  // velocity of the p2 endpoint
    bool ok = false;
};

inline SuffixEval suffix_geometry(const SceneFrame& fr, const ReconnRecord& rec) {
    SuffixEval s;
    switch (rec.skind) {
        case SuffixKind::Surface:
            s.p2 = rec.p2;
            s.n2 = rec.n2;
            s.suffix_len = rec.suffix_len;
            s.suffix_u = rec.suffix_u;
            s.v2 = fr.velocity_at(rec.obj2, rec.p2);
            s.ok = true;
            break;
        case SuffixKind::Light:
            s.p2 = fr.light.position;
            s.suffix_len = 0;
            s.suffix_u = 0;
            s.v2 = Vec3(0);
            s.ok = true;
            break;
        case SuffixKind::LightSub:
            if (!fr.lsub.valid) return s;
            s.p2 = fr.lsub.pos;
            s.n2 = fr.lsub.n;
            s.suffix_len = fr.lsub.chain_len;
            s.v2 = fr.velocity_at(fr.lsub.object, fr.lsub.pos);
            s.suffix_u = dot(s.v2, fr.lsub.wo_light);
            s.ok = true;
            break;
    }
    return s;
}

// Throughput of the offset path given the replayed prefix and the (possibly
// moved) reconnection vertex.
inline bool rebuild_sample(const SceneFrame& fr, const ReconnRecord& rec,
                           const BaseShiftResult& pre, const SurfacePoint& p,
                           const SuffixEval& suf, PathSample& out) {
    Vec3 d1 = p.pos - pre.p1;
    double l1 = norm(d1);
    if (l1 <= 2 * fr.bvh->eps_ray()) return false;
    Vec3 u1 = d1 / l1;
    Vec3 d2 = suf.p2 - p.pos;
    double l2 = norm(d2);
    if (l2 <= 2 * fr.bvh->eps_ray()) return false;
    Vec3 u2 = d2 / l2;

    const Material& m1 = fr.material(pre.m1);
    Vec3 f = pre.prefix_fw * eval_bsdf(m1, pre.n1, pre.wi1, u1) * geom_term(pre.p1, pre.n1, p.pos, p.n);
    const Material& mp = fr.material(p.mat);
    f *= eval_bsdf(mp, p.n, -u1, u2);

    Vec3 pvel = fr.velocity_at(p.obj, p.pos);
    double u_total = pre.prefix_u + dot(fr.velocity_at(pre.obj1, pre.p1) - pvel, u1);

    switch (rec.skind) {
        case SuffixKind::Surface: {
            const Material& m2 = fr.material(rec.m2);
            Vec3 f2 = m2.delta() ? Vec3(0) : eval_bsdf(m2, rec.n2, -u2, rec.wo2);
            f *= geom_term(p.pos, p.n, rec.p2, rec.n2) * f2 * rec.suffix_f;
            break;
        }
        case SuffixKind::Light: {
            auto ls = light_sample(fr.light, p.pos);
            if (!ls) {
                f = Vec3(0);
                break;
            }
            f *= std::abs(dot(p.n, u2)) * ls->value;
            break;
        }
        case SuffixKind::LightSub: {
            const Material& sm = fr.material(fr.lsub.material);
            Vec3 fs = eval_bsdf(sm, fr.lsub.n, -u2, fr.lsub.wo_light);
            f *= geom_term(p.pos, p.n, fr.lsub.pos, fr.lsub.n) * fs * fr.lsub.power;
            break;
        }
    }
    u_total += dot(pvel - suf.v2, u2) + suf.suffix_u;

    out.f = f;
    out.pdf = 0;
    out.len = pre.prefix_len + l1 + l2 + suf.suffix_len;
    out.u = u_total;

    ReconnRecord& r = out.rec;
    r = rec;
    r.prefix_pdf = pre.prefix_pdf;
    r.prefix_len = pre.prefix_len;
    r.prefix_u = pre.prefix_u;
    r.prefix_fw = pre.prefix_fw;
    r.p1 = pre.p1;
    r.n1 = pre.n1;
    r.m1 = pre.m1;
    r.obj1 = pre.obj1;
    r.wi1 = pre.wi1;
    r.p = p.pos;
    r.pn = p.n;
    r.ptri = p.tri;
    r.pobj = p.obj;
    r.pmat = p.mat;
    if (rec.skind == SuffixKind::LightSub) {
        r.p2 = fr.lsub.pos;
        r.n2 = fr.lsub.n;
        r.suffix_len = fr.lsub.chain_len;
        r.suffix_u = suf.suffix_u;
    } else if (rec.skind == SuffixKind::Light) {
        r.p2 = fr.light.position;
    }
    return is_finite(out.f);
}

}  // namespace detail

// Path-length-aware (or path-velocity-aware) shift of a reservoir sample from
// src_dom to dst_dom: random replay of the prefix, then a constrained Newton
// move of the reconnection vertex so the mapped sample satisfies
//   constraint(dst) = constraint(src) + (dst gate center - src gate center).
inline ShiftOutcome shift_sample(const PathSample& src, const Domain& src_dom,
                                 const Domain& dst_dom, const ShiftConfig& cfg,
                                 ShiftStats* stats = nullptr) {
    ShiftOutcome out;
    if (stats) stats->attempts++;
    const ReconnRecord& rec = src.rec;
    const SceneFrame& fr = *dst_dom.frame;
    if (!rec.valid) {
        if (stats) stats->replay_failed++;
        return out;
    }
    // stored surface suffixes go stale when scene geometry animates between
    // frames; reject those reuses rather than evaluating stale throughput
    if (src_dom.frame != dst_dom.frame && rec.skind == SuffixKind::Surface) {
        bool geo_motion = false;
        for (const auto& v : fr.obj_velocity) geo_motion = geo_motion || v.moving;
        if (geo_motion) {
            if (stats) stats->replay_failed++;
            return out;
        }
    }

    BaseShiftResult pre;
    if (src_dom.frame == dst_dom.frame && src_dom.px == dst_dom.px && src_dom.py == dst_dom.py) {
        // identity prefix: reuse the stored one
        pre.ok = true;
        pre.prefix_pdf = rec.prefix_pdf;
        pre.prefix_len = rec.prefix_len;
        pre.prefix_u = rec.prefix_u;
        pre.prefix_fw = rec.prefix_fw;
        pre.p1 = rec.p1;
        pre.n1 = rec.n1;
        pre.wi1 = rec.wi1;
        pre.m1 = rec.m1;
        pre.obj1 = rec.obj1;
    } else {
        pre = hybrid_base_shift(fr, dst_dom.px, dst_dom.py, rec, cfg);
    }
    if (!pre.ok) {
        if (stats) stats->replay_failed++;
        return out;
    }

    detail::SuffixEval suf = detail::suffix_geometry(fr, rec);
    if (!suf.ok) {
        if (stats) stats->replay_failed++;
        return out;
    }

    SurfacePoint start{rec.p, rec.pn, rec.ptri, rec.pobj, rec.pmat};
    SurfacePoint solved = start;
    double j_newton = 1.0;

    LocalConstraint field;
    field.kind = dst_dom.gate.kind;
    field.p1 = pre.p1;
    field.p2 = suf.p2;
    field.frame = &fr;
    if (field.kind == GateSpec::Kind::Velocity) {
        field.vel.v1 = fr.velocity_at(pre.obj1, pre.p1);
        field.vel.v2 = suf.v2;
    }

    if (cfg.newton) {
        // full-path constraint, local two-segment target
        double gate_delta = dst_dom.gate.ccenter() - src_dom.gate.ccenter();
        double src_total = field.kind == GateSpec::Kind::Length ? src.len : src.u;
        double prefix_part =
            field.kind == GateSpec::Kind::Length ? pre.prefix_len : pre.prefix_u;
        double suffix_part =
            field.kind == GateSpec::Kind::Length ? suf.suffix_len : suf.suffix_u;
        double target_local = src_total + gate_delta - prefix_part - suffix_part;
        field.bind_object(start.obj);
        double delta = target_local - field.value(start.pos);

        NewtonParams prm;
        prm.tol = 0.01 * dst_dom.gate.cwidth();
        prm.eps_grad = 1e-8 * fr.scene_scale();
        if (stats) stats->solves++;
        ShiftResult nres = newton_solve(*fr.bvh, field, start, delta, cfg.gauge, prm);
        if (stats) stats->iterations += uint64_t(nres.iterations);
        if (nres.status != ShiftStatus::Converged) {
            if (stats) stats->newton_failed++;
            out.status = ShiftStatus::NewtonFailed;
            return out;
        }
        if (stats) stats->newton_ok++;
        solved = nres.p_prime;
        j_newton = nres.jacobian;
        if (!fr.material(solved.mat).reconnectable()) {
            if (stats) stats->newton_failed++;
            out.status = ShiftStatus::NewtonFailed;
            return out;
        }
    }

    if (fr.bvh->occluded(pre.p1, solved.pos) || fr.bvh->occluded(solved.pos, suf.p2)) {
        if (stats) stats->occluded++;
        out.status = ShiftStatus::Occluded;
        return out;
    }

    double jac = (rec.prefix_pdf / pre.prefix_pdf) * j_newton;
    if (!std::isfinite(jac) || jac < cfg.jac_min || jac > cfg.jac_max) {
        if (stats) stats->jac_clamped++;
        out.status = ShiftStatus::JacobianClamped;
        return out;
    }

    PathSample mapped;
    mapped.depth = src.depth;
    if (!detail::rebuild_sample(fr, rec, pre, solved, suf, mapped)) {
        if (stats) stats->replay_failed++;
        return out;
    }
    out.status = ShiftStatus::Converged;
    out.mapped = mapped;
    out.jacobian = jac;
    if (stats && dst_dom.gate.weight(mapped.len, mapped.u) > 0 && luminance(mapped.f) > 0)
        stats->success++;
    return out;
}

// Shrink mapping: contracts a sample drawn from a K-times wider gate onto the
// fine gate around the same center; no replay, the prefix is untouched.
//   target length: L0 + (len - L0)/K   (forward), L0 + (len - L0)*K (inverse)
// The Jacobian picks up the 1/K (or K) length-axis factor.
inline ShiftOutcome shrink_map(const PathSample& src, const Domain& dom, double K, bool forward,
                               const ShiftConfig& cfg, ShiftStats* stats = nullptr) {
    ShiftOutcome out;
    if (stats) stats->attempts++;
    const ReconnRecord& rec = src.rec;
    const SceneFrame& fr = *dom.frame;
    if (!rec.valid || K < 1) {
        if (stats) stats->replay_failed++;
        return out;
    }
    BaseShiftResult pre;
    pre.ok = true;
    pre.prefix_pdf = rec.prefix_pdf;
    pre.prefix_len = rec.prefix_len;
    pre.prefix_u = rec.prefix_u;
    pre.prefix_fw = rec.prefix_fw;
    pre.p1 = rec.p1;
    pre.n1 = rec.n1;
    pre.wi1 = rec.wi1;
    pre.m1 = rec.m1;
    pre.obj1 = rec.obj1;

    detail::SuffixEval suf = detail::suffix_geometry(fr, rec);
    if (!suf.ok) {
        if (stats) stats->replay_failed++;
        return out;
    }

    double L0 = dom.gate.center;
    double target_total = forward ? (src.len - L0) / K + L0 : (src.len - L0) * K + L0;
    double jac_scale = forward ? 1.0 / K : K;

    LocalConstraint field;
    field.kind = GateSpec::Kind::Length;
    field.p1 = pre.p1;
    field.p2 = suf.p2;
    field.frame = &fr;

    SurfacePoint start{rec.p, rec.pn, rec.ptri, rec.pobj, rec.pmat};
    double target_local = target_total - pre.prefix_len - suf.suffix_len;
    double delta = target_local - field.value(start.pos);

    NewtonParams prm;
    prm.tol = 0.01 * dom.gate.width;
    prm.eps_grad = 1e-8 * fr.scene_scale();
    if (stats) stats->solves++;
    ShiftResult nres = newton_solve(*fr.bvh, field, start, delta, cfg.gauge, prm);
    if (stats) stats->iterations += uint64_t(nres.iterations);
    if (nres.status != ShiftStatus::Converged) {
        if (stats) stats->newton_failed++;
        out.status = ShiftStatus::NewtonFailed;
        return out;
    }
    if (stats) stats->newton_ok++;
    if (!fr.material(nres.p_prime.mat).reconnectable()) {
        if (stats) stats->newton_failed++;
        out.status = ShiftStatus::NewtonFailed;
        return out;
    }
    if (fr.bvh->occluded(pre.p1, nres.p_prime.pos) ||
        fr.bvh->occluded(nres.p_prime.pos, suf.p2)) {
        if (stats) stats->occluded++;
        out.status = ShiftStatus::Occluded;
        return out;
    }
    // the clamp guards the solved surface factor; the deliberate 1/K (or K)
    // length-axis factor is applied afterwards
    if (!std::isfinite(nres.jacobian) || nres.jacobian < cfg.jac_min ||
        nres.jacobian > cfg.jac_max) {
        if (stats) stats->jac_clamped++;
        out.status = ShiftStatus::JacobianClamped;
        return out;
    }
    double jac = nres.jacobian * jac_scale;
    PathSample mapped;
    mapped.depth = src.depth;
    if (!detail::rebuild_sample(fr, rec, pre, nres.p_prime, suf, mapped)) {
        if (stats) stats->replay_failed++;
        return out;
    }
    out.status = ShiftStatus::Converged;
    out.mapped = mapped;
    out.jacobian = jac;
    if (stats && gate_weight({dom.gate.center, dom.gate.width}, mapped.len) > 0 &&
        luminance(mapped.f) > 0)
        stats->success++;
    return out;
}

}  // namespace tofr
