#include <catch2/catch_amalgamated.hpp>

#include <tofr/shiftmap.hpp>

#include "support/test_scenes.hpp"

using namespace tofr;

namespace {

// single large plane z=0
struct PlaneScene {
    SceneDef def;
    SceneFrame fr;
    PlaneScene() {
        int white = def.add_material({MatKind::Diffuse, {0.7, 0.7, 0.7}, 0.5});
        ObjectDef wall;
        wall.name = "plane";
        testscene::add_quad(wall.local_tris, {-50, -50, 0}, {50, -50, 0}, {50, 50, 0},
                            {-50, 50, 0}, white);
        def.objects.push_back(std::move(wall));
        def.camera.base.position = {0, 0, 5};
        def.camera.width = def.camera.height = 4;
        def.light.position = {0, 0, 5};
        def.light.cone_half_angle = 3.0;
        def.light.intensity = {1, 1, 1};
        fr = build_frame(def, 0);
    }
    SurfacePoint at(double x, double y) const {
        auto hit = fr.bvh->intersect_min({{x, y, 1.0}, {0, 0, -1}}, 1e-9, kInf);
        REQUIRE(hit);
        SurfacePoint p;
        p.pos = hit->pos;
        p.n = hit->n;
        p.tri = hit->tri;
        p.obj = fr.bvh->triangle(hit->tri).object;
        p.mat = fr.bvh->triangle(hit->tri).material;
        return p;
    }
};

double fd_tol(double analytic, double rel, double abs_floor) {
    return rel * std::abs(analytic) + abs_floor;
}

}  // namespace

TEST_CASE("two-segment gradient basics") {
    Vec3 g = pathlen_gradient({0, 1, 0}, {-1, 0, 0}, {1, 0, 0});
    REQUIRE(norm(g - Vec3{0, std::sqrt(2.0), 0}) < 1e-12);

    // p on the open segment: the two unit vectors cancel
    Vec3 g0 = pathlen_gradient({0.2, 0, 0}, {-1, 0, 0}, {1, 0, 0});
    REQUIRE(norm(g0) < 1e-12);
}

TEST_CASE("two-segment gradient and hessian match finite differences") {
    Rng rng(42, 0, 0, 0, 0);
    int checked = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        // segment lengths spanning four orders of magnitude
        double scale = std::pow(10.0, rng.next_range(-2, 2));
        Vec3 p{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        Vec3 p1 = p + Vec3{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)} * scale;
        Vec3 p2 = p + Vec3{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)} * scale;
        double l1 = norm(p1 - p), l2 = norm(p2 - p);
        if (l1 < 0.05 * scale || l2 < 0.05 * scale) continue;
        checked++;

        auto len = [&](const Vec3& q) { return norm(p1 - q) + norm(p2 - q); };
        Vec3 g = pathlen_gradient(p, p1, p2);
        double h = 1e-6 * scale;
        for (int a = 0; a < 3; ++a) {
            Vec3 dp(0);
            dp[a] = h;
            double fd = (len(p + dp) - len(p - dp)) / (2 * h);
            REQUIRE(std::abs(g[a] - fd) <= fd_tol(fd, 1e-6, 1e-7));
        }
        Mat3 H = pathlen_hessian(p, p1, p2);
        double hh = 1e-5 * scale;
        for (int a = 0; a < 3; ++a) {
            Vec3 dp(0);
            dp[a] = hh;
            Vec3 fd = (pathlen_gradient(p + dp, p1, p2) - pathlen_gradient(p - dp, p1, p2)) /
                      (2 * hh);
            for (int i = 0; i < 3; ++i)
                REQUIRE(std::abs(H.m[i][a] - fd[i]) <= fd_tol(fd[i], 1e-5, 1e-6 / scale));
        }
    }
    REQUIRE(checked > 8000);
}

TEST_CASE("hessian of the symmetric configuration") {
    Mat3 H = pathlen_hessian({0, 1, 0}, {-1, 0, 0}, {1, 0, 0});
    double s = 1.0 / std::sqrt(2.0);
    REQUIRE(H.m[0][0] == Catch::Approx(s));
    REQUIRE(H.m[1][1] == Catch::Approx(s));
    REQUIRE(H.m[2][2] == Catch::Approx(std::sqrt(2.0)));
    REQUIRE(std::abs(H.m[0][1]) < 1e-12);

    // projector identity: (I - d d^T) d = 0 for each segment direction
    Vec3 p{0.3, 0.7, -0.2}, p1{1.4, 0.2, 0.5};
    Vec3 d1 = normalize(p1 - p);
    Mat3 P = Mat3::identity() - Mat3::outer(d1, d1);
    REQUIRE(norm(P * d1) < 1e-12);
}

TEST_CASE("projected derivatives on the tangent plane") {
    PlaneScene ps;
    LocalConstraint field;
    field.kind = GateSpec::Kind::Length;

    // symmetric foci above the plane: in-plane gradient vanishes
    field.p1 = {-1, 0, 1};
    field.p2 = {1, 0, 1};
    SurfacePoint origin = ps.at(0, 0);
    Frame2 J = tangent_frame(ps.fr.bvh->triangle(origin.tri));
    Vec2 g;
    Mat2 H;
    param_derivatives(field, origin.pos, J, g, H);
    REQUIRE(norm(g) < 1e-12);

    // the worked example: p = (0.5, 0, 0)
    SurfacePoint p = ps.at(0.5, 0);
    param_derivatives(field, p.pos, J, g, H);
    double mag = std::abs(g.x) > std::abs(g.y) ? std::abs(g.x) : std::abs(g.y);
    REQUIRE(mag == Catch::Approx(0.3849).margin(5e-4));
    double other = std::abs(g.x) > std::abs(g.y) ? std::abs(g.y) : std::abs(g.x);
    REQUIRE(other < 1e-12);

    // in-plane hessian vs finite differences of the projected gradient
    Rng rng(8, 0, 0, 0, 0);
    for (int trial = 0; trial < 200; ++trial) {
        field.p1 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.3, 3)};
        field.p2 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.3, 3)};
        Vec3 q = ps.at(rng.next_range(-2, 2), rng.next_range(-2, 2)).pos;
        param_derivatives(field, q, J, g, H);
        double h = 1e-5;
        for (int a = 0; a < 2; ++a) {
            Vec2 d{a == 0 ? h : 0.0, a == 1 ? h : 0.0};
            Vec2 gp, gm;
            Mat2 dummy;
            param_derivatives(field, q + J.to_world(d), J, gp, dummy);
            param_derivatives(field, q - J.to_world(d), J, gm, dummy);
            Vec2 fd = (gp - gm) * (1.0 / (2 * h));
            REQUIRE(std::abs((a == 0 ? H.a : H.b) - fd.x) <= fd_tol(fd.x, 1e-4, 1e-8));
            REQUIRE(std::abs((a == 0 ? H.c : H.d) - fd.y) <= fd_tol(fd.y, 1e-4, 1e-8));
        }
    }
}

TEST_CASE("constraint residual and jacobian blocks") {
    PlaneScene ps;
    LocalConstraint field;
    field.kind = GateSpec::Kind::Length;
    field.p1 = {-1, 0.2, 1};
    field.p2 = {1, -0.1, 1.4};

    SurfacePoint p = ps.at(0.4, -0.3);
    Frame2 J = tangent_frame(ps.fr.bvh->triangle(p.tri));

    // identity root
    for (GaugeKind gk :
         {GaugeKind::FixedAxis, GaugeKind::RawGradient, GaugeKind::AverageGradient}) {
        Gauge g{gk, {0.6, 0.8}};
        ConstraintEval e = assemble_constraint(field, p.pos, J, field, p.pos, J, 0.0, g);
        REQUIRE(std::abs(e.F.x) < 1e-12);
        REQUIRE(std::abs(e.F.y) < 1e-12);
    }

    // fixed-axis gauge rows are constant in xi'
    {
        Gauge g{GaugeKind::FixedAxis, {0.6, 0.8}};
        SurfacePoint q1 = ps.at(0.9, 0.1), q2 = ps.at(-0.2, 0.5);
        ConstraintEval e1 = assemble_constraint(field, p.pos, J, field, q1.pos, J, 0.0, g);
        ConstraintEval e2 = assemble_constraint(field, p.pos, J, field, q2.pos, J, 0.0, g);
        REQUIRE(e1.dF_dxi_p.c == Catch::Approx(e2.dF_dxi_p.c).margin(1e-12));
        REQUIRE(e1.dF_dxi_p.d == Catch::Approx(e2.dF_dxi_p.d).margin(1e-12));
    }

    // both blocks vs central finite differences of F
    Rng rng(19, 0, 0, 0, 0);
    for (GaugeKind gk :
         {GaugeKind::FixedAxis, GaugeKind::RawGradient, GaugeKind::AverageGradient}) {
        Gauge gauge{gk, {1, 0}};
        for (int trial = 0; trial < 300; ++trial) {
            field.p1 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.4, 2.5)};
            field.p2 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.4, 2.5)};
            Vec3 a = ps.at(rng.next_range(-2, 2), rng.next_range(-2, 2)).pos;
            Vec3 b = ps.at(rng.next_range(-2, 2), rng.next_range(-2, 2)).pos;
            double delta = rng.next_range(-0.2, 0.2);
            ConstraintEval e = assemble_constraint(field, a, J, field, b, J, delta, gauge);
            double h = 1e-6;
            for (int ax = 0; ax < 2; ++ax) {
                Vec3 step = J.to_world({ax == 0 ? h : 0.0, ax == 1 ? h : 0.0});
                ConstraintEval cp =
                    assemble_constraint(field, a, J, field, b + step, J, delta, gauge);
                ConstraintEval cm =
                    assemble_constraint(field, a, J, field, b - step, J, delta, gauge);
                Vec2 fd = (cp.F - cm.F) * (1.0 / (2 * h));
                double j00 = ax == 0 ? e.dF_dxi_p.a : e.dF_dxi_p.b;
                double j10 = ax == 0 ? e.dF_dxi_p.c : e.dF_dxi_p.d;
                REQUIRE(std::abs(j00 - fd.x) <= fd_tol(fd.x, 1e-5, 1e-5));
                REQUIRE(std::abs(j10 - fd.y) <= fd_tol(fd.y, 1e-5, 1e-5));

                ConstraintEval sp =
                    assemble_constraint(field, a + step, J, field, b, J, delta, gauge);
                ConstraintEval sm =
                    assemble_constraint(field, a - step, J, field, b, J, delta, gauge);
                Vec2 fds = (sp.F - sm.F) * (1.0 / (2 * h));
                double k00 = ax == 0 ? e.dF_dxi.a : e.dF_dxi.b;
                double k10 = ax == 0 ? e.dF_dxi.c : e.dF_dxi.d;
                REQUIRE(std::abs(k00 - fds.x) <= fd_tol(fds.x, 1e-5, 1e-5));
                REQUIRE(std::abs(k10 - fds.y) <= fd_tol(fds.y, 1e-5, 1e-5));
            }
        }
    }
}

TEST_CASE("newton solve against a bisection oracle") {
    PlaneScene ps;
    LocalConstraint field;
    field.kind = GateSpec::Kind::Length;
    field.p1 = {-1, 0, 1};
    field.p2 = {1, 0, 1};
    SurfacePoint start = ps.at(0.5, 0);

    NewtonParams prm;
    prm.tol = 1e-7;
    prm.max_iters = 5;
    prm.eps_grad = 1e-10;

    // delta = 0 converges instantly
    Gauge avg{GaugeKind::AverageGradient, {1, 0}};
    ShiftResult identity = newton_solve(*ps.fr.bvh, field, start, 0.0, avg, prm);
    REQUIRE(identity.status == ShiftStatus::Converged);
    REQUIRE(identity.iterations == 0);
    REQUIRE(identity.jacobian == Catch::Approx(1.0));

    // the worked case: lengthen the two segments by 0.1
    ShiftResult r = newton_solve(*ps.fr.bvh, field, start, 0.1, avg, prm);
    REQUIRE(r.status == ShiftStatus::Converged);
    REQUIRE(r.iterations <= 5);
    // 1-d bisection along x for the same target
    double target = norm(field.p1 - start.pos) + norm(field.p2 - start.pos) + 0.1;
    auto len_at = [&](double x) {
        Vec3 q{x, 0, 0};
        return norm(field.p1 - q) + norm(field.p2 - q);
    };
    double lo = 0.5, hi = 2.0;
    for (int i = 0; i < 100; ++i) {
        double mid = 0.5 * (lo + hi);
        (len_at(mid) < target ? lo : hi) = mid;
    }
    REQUIRE(r.p_prime.pos.x == Catch::Approx(0.5 * (lo + hi)).margin(1e-4));
    REQUIRE(r.p_prime.pos.x == Catch::Approx(0.708).margin(2e-3));
    REQUIRE(std::abs(r.p_prime.pos.y) < 1e-9);

    // degenerate in-plane gradient: start under the segment midpoint
    SurfacePoint degen = ps.at(0, 0);
    ShiftResult bad = newton_solve(*ps.fr.bvh, field, degen, 0.1, avg, prm);
    REQUIRE(bad.status == ShiftStatus::NewtonFailed);
}

TEST_CASE("implicit jacobian consistency and reversibility") {
    PlaneScene ps;
    Rng rng(77, 0, 0, 0, 0);
    NewtonParams prm;
    prm.tol = 1e-9;
    prm.max_iters = 8;  // tight tolerance needs the extra iterations here
    prm.eps_grad = 1e-10;

    int converged = 0, jac_checked = 0;
    int roundtrip_total = 0;
    int violations_avg = 0, violations_raw = 0;
    double dtau = 0.01;

    for (int trial = 0; trial < 10000; ++trial) {
        LocalConstraint field;
        field.kind = GateSpec::Kind::Length;
        field.p1 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.4, 3)};
        field.p2 = {rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(0.4, 3)};
        SurfacePoint start = ps.at(rng.next_range(-2, 2), rng.next_range(-2, 2));
        Vec2 g0 = tangent_frame(ps.fr.bvh->triangle(start.tri))
                      .to_local(field.grad3(start.pos));
        if (norm(g0) < 0.05) continue;  // keep configurations well-posed
        double delta = rng.next_range(-0.1, 0.1);

        Gauge avg{GaugeKind::AverageGradient, {1, 0}};
        ShiftResult fwd = newton_solve(*ps.fr.bvh, field, start, delta, avg, prm);
        if (fwd.status != ShiftStatus::Converged) continue;
        converged++;

        // forward x reverse determinant product
        ShiftResult rev = newton_solve(*ps.fr.bvh, field, fwd.p_prime, -delta, avg, prm);
        if (rev.status == ShiftStatus::Converged) {
            roundtrip_total++;
            double dist = norm(rev.p_prime.pos - start.pos);
            if (dist > 0.01 * dtau) violations_avg++;
            REQUIRE(fwd.jacobian * rev.jacobian == Catch::Approx(1.0).margin(1e-3));
        }

        // raw-gradient round trip on the same configuration
        Gauge raw{GaugeKind::RawGradient, {1, 0}};
        ShiftResult fr2 = newton_solve(*ps.fr.bvh, field, start, delta, raw, prm);
        if (fr2.status == ShiftStatus::Converged) {
            ShiftResult rr2 = newton_solve(*ps.fr.bvh, field, fr2.p_prime, -delta, raw, prm);
            if (rr2.status == ShiftStatus::Converged &&
                norm(rr2.p_prime.pos - start.pos) > 0.01 * dtau)
                violations_raw++;
        }

        // finite-difference determinant of the solved map (subsampled)
        if (jac_checked < 150 && trial % 17 == 0) {
            Frame2 J = tangent_frame(ps.fr.bvh->triangle(start.tri));
            double h = 1e-5;
            Mat2 fd;
            bool ok = true;
            for (int ax = 0; ax < 2 && ok; ++ax) {
                Vec3 step = J.to_world({ax == 0 ? h : 0.0, ax == 1 ? h : 0.0});
                SurfacePoint sp = start, sm = start;
                sp.pos = start.pos + step;
                sm.pos = start.pos - step;
                ShiftResult rp = newton_solve(*ps.fr.bvh, field, sp, delta, avg, prm);
                ShiftResult rm = newton_solve(*ps.fr.bvh, field, sm, delta, avg, prm);
                ok = rp.status == ShiftStatus::Converged && rm.status == ShiftStatus::Converged;
                if (!ok) break;
                Vec2 dxi = (J.to_local(rp.p_prime.pos - sp.pos) + Vec2{ax == 0 ? h : 0.0, ax == 1 ? h : 0.0} * 2.0 -
                            (J.to_local(rm.p_prime.pos - sm.pos)));
                // columns of dxi'/dxi: measure solution coordinates in a fixed frame
                Vec2 sol_p = J.to_local(rp.p_prime.pos - start.pos);
                Vec2 sol_m = J.to_local(rm.p_prime.pos - start.pos);
                Vec2 col = (sol_p - sol_m) * (1.0 / (2 * h));
                (void)dxi;
                if (ax == 0) {
                    fd.a = col.x;
                    fd.c = col.y;
                } else {
                    fd.b = col.x;
                    fd.d = col.y;
                }
            }
            if (ok) {
                jac_checked++;
                REQUIRE(fwd.jacobian == Catch::Approx(fd.det()).epsilon(2e-3));
            }
        }
    }
    REQUIRE(converged > 5000);
    REQUIRE(jac_checked >= 100);
    // round-trip bound on at least 99% of converged pairs
    REQUIRE(roundtrip_total > 0);
    REQUIRE(double(violations_avg) <= 0.01 * double(roundtrip_total));
    // the raw-gradient gauge must violate strictly more often
    REQUIRE(violations_raw > violations_avg);
}

TEST_CASE("velocity constraint derivatives") {
    // static scene: value and gradient vanish
    VelocityLocal still;
    still.v1 = still.v2 = Vec3(0);
    still.moving = false;
    Vec3 p{0.2, 0.1, 0}, p1{-1, 0, 1}, p2{1, 0.2, 0.8};
    REQUIRE(vel_value(still, p, p1, p2) == 0.0);
    REQUIRE(norm(vel_gradient(still, p, p1, p2)) == 0.0);

    // p2 receding radially at speed w while everything else is static
    double w = 0.7;
    VelocityLocal rec;
    rec.v1 = Vec3(0);
    rec.v2 = normalize(p2 - p) * w;
    rec.moving = false;
    REQUIRE(vel_value(rec, p, p1, p2) == Catch::Approx(-w));

    // random rigid fields: gradient and hessian vs finite differences
    Rng rng(3, 0, 0, 0, 0);
    for (int trial = 0; trial < 10000; ++trial) {
        VelocityLocal f;
        f.v1 = {rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        f.v2 = {rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        Vec3 omega{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        // rigid velocity gradient is the cross-product matrix (plus the tiny
        // symmetric part a finite-difference track produces)
        Mat3 A;
        A.m[0][1] = -omega.z;
        A.m[0][2] = omega.y;
        A.m[1][0] = omega.z;
        A.m[1][2] = -omega.x;
        A.m[2][0] = -omega.y;
        A.m[2][1] = omega.x;
        double sym = rng.next_range(-0.02, 0.02);
        A.m[0][0] += sym;
        A.m[1][1] += sym;
        f.A = A;
        f.c = {rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        f.moving = true;

        Vec3 q{rng.next_range(-1, 1), rng.next_range(-1, 1), rng.next_range(-1, 1)};
        Vec3 q1 = q + Vec3{rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(-2, 2)};
        Vec3 q2 = q + Vec3{rng.next_range(-2, 2), rng.next_range(-2, 2), rng.next_range(-2, 2)};
        if (norm(q1 - q) < 0.2 || norm(q2 - q) < 0.2) continue;

        Vec3 g = vel_gradient(f, q, q1, q2);
        double h = 1e-6;
        for (int a = 0; a < 3; ++a) {
            Vec3 dp(0);
            dp[a] = h;
            double fd = (vel_value(f, q + dp, q1, q2) - vel_value(f, q - dp, q1, q2)) / (2 * h);
            REQUIRE(std::abs(g[a] - fd) <= fd_tol(fd, 1e-4, 1e-7));
        }
        Mat3 H = vel_hessian(f, q, q1, q2);
        double hh = 1e-5;
        for (int a = 0; a < 3; ++a) {
            Vec3 dp(0);
            dp[a] = hh;
            Vec3 fd = (vel_gradient(f, q + dp, q1, q2) - vel_gradient(f, q - dp, q1, q2)) /
                      (2 * hh);
            for (int i = 0; i < 3; ++i)
                REQUIRE(std::abs(H.m[i][a] - fd[i]) <= fd_tol(fd[i], 1e-4, 1e-6));
        }
    }
}

TEST_CASE("shrink arithmetic and identity") {
    // target length mapping only (the geometric move is the newton solve)
    double L0 = 10.0, K = 10.0, len = 10.5;
    REQUIRE((len - L0) / K + L0 == Catch::Approx(10.05));
    // K = 1 leaves the sample in place: exercised through shrink_map below
    SceneDef def = testscene::cornell_box({true, 8});
    SceneFrame fr = build_frame(def, 0);
    TraceConfig tc;
    Tracer tracer(fr, tc);
    PathSample sample;
    bool got = false;
    for (int px = 0; px < 8 && !got; ++px)
        for (int s = 0; s < 16 && !got; ++s) {
            Rng rng(5, 0, uint64_t(px), uint64_t(s), 0), ell(5, 0, uint64_t(px), uint64_t(s), 2);
            tracer.trace_tree(px, 4, rng, ell, [&](const PathSample& c, double) {
                if (!got && c.rec.valid && luminance(c.f) > 0) {
                    sample = c;
                    got = true;
                }
            });
        }
    REQUIRE(got);

    Domain dom{0, 4, GateSpec{GateSpec::Kind::Length, sample.len, 0.1, 1.0}, &fr};
    ShiftConfig sc;
    ShiftOutcome k1 = shrink_map(sample, dom, 1.0, true, sc);
    REQUIRE(k1.ok());
    REQUIRE(k1.jacobian == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(k1.mapped.len == Catch::Approx(sample.len).margin(1e-9));
    REQUIRE(norm(k1.mapped.f - sample.f) <= 1e-9 * std::max(1.0, norm(sample.f)));

    // K = 4 with the gate centered below the sample length pulls it inward
    double L0c = sample.len - 0.2;
    Domain dom2{0, 4, GateSpec{GateSpec::Kind::Length, L0c, 0.05, 1.0}, &fr};
    ShiftOutcome k4 = shrink_map(sample, dom2, 4.0, true, sc);
    if (k4.ok()) {
        double want = (sample.len - L0c) / 4.0 + L0c;
        REQUIRE(k4.mapped.len == Catch::Approx(want).margin(0.01 * 0.05 + 1e-6));
    }
}

TEST_CASE("identity shift reproduces the sample") {
    SceneDef def = testscene::cornell_box({true, 8});
    SceneFrame fr = build_frame(def, 0);
    TraceConfig tc;
    Tracer tracer(fr, tc);
    GateSpec gate{GateSpec::Kind::Length, 10.0, 0.2, 1.0};

    int tested = 0;
    for (int px = 0; px < 8 && tested < 12; ++px)
        for (int py = 0; py < 8 && tested < 12; ++py) {
            Rng rng(21, 0, uint64_t(py * 8 + px), 0, 0);
            Rng ell(21, 0, uint64_t(py * 8 + px), 0, 2);
            tracer.trace_tree(px, py, rng, ell, [&](const PathSample& c, double) {
                if (!c.rec.valid || luminance(c.f) <= 0) return;
                GateSpec g = gate;
                g.center = c.len;  // the sample is inside its own gate
                Domain dom{px, py, g, &fr};
                ShiftConfig sc;
                ShiftOutcome id = shift_sample(c, dom, dom, sc);
                if (id.status != ShiftStatus::Converged) return;
                tested++;
                REQUIRE(id.jacobian == Catch::Approx(1.0).margin(1e-9));
                REQUIRE(id.mapped.len == Catch::Approx(c.len).epsilon(1e-12));
                REQUIRE(norm(id.mapped.f - c.f) <= 1e-12 * std::max(1.0, norm(c.f)));
            });
        }
    REQUIRE(tested >= 12);
}

TEST_CASE("neighbour shift keeps the gate constraint") {
    SceneDef def = testscene::cornell_box({false, 16});
    SceneFrame fr = build_frame(def, 0);
    TraceConfig tc;
    Tracer tracer(fr, tc);

    ShiftConfig sc;
    int moved = 0, attempted = 0;
    for (int px = 4; px < 12; ++px)
        for (int py = 4; py < 12; ++py) {
            Rng rng(3, 0, uint64_t(py * 16 + px), 0, 0);
            Rng ell(3, 0, uint64_t(py * 16 + px), 0, 2);
            tracer.trace_tree(px, py, rng, ell, [&](const PathSample& c, double) {
                if (!c.rec.valid || c.rec.k != 2 || luminance(c.f) <= 0) return;
                if (attempted >= 200) return;
                attempted++;
                GateSpec g{GateSpec::Kind::Length, c.len, 0.05, 1.0};
                Domain src{px, py, g, &fr};
                Domain dst{px + 2, py, g, &fr};
                ShiftOutcome sh = shift_sample(c, src, dst, sc);
                if (!sh.ok()) return;
                moved++;
                // mapped sample satisfies the same gate (1% of width tolerance)
                REQUIRE(std::abs(sh.mapped.len - c.len) <= 0.01 * g.width + 1e-9);
                REQUIRE(luminance(sh.mapped.f) >= 0.0);
            });
        }
    REQUIRE(attempted >= 100);
    REQUIRE(moved > attempted / 2);  // most neighbour shifts on flat walls succeed
}
