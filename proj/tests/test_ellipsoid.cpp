#include <catch2/catch_amalgamated.hpp>

#include <tofr/ellipsoid.hpp>
#include <tofr/transport.hpp>

#include "support/stats_util.hpp"
#include "support/test_scenes.hpp"

using namespace tofr;

TEST_CASE("ellipsoid construction") {
    auto e = ellipsoid_from_constraint({-1, 0, 0}, {1, 0, 0}, 4.0);
    REQUIRE(e);
    REQUIRE(e->a == Catch::Approx(2.0));
    REQUIRE(e->b == Catch::Approx(std::sqrt(3.0)));

    // coincident foci: a sphere
    auto s = ellipsoid_from_constraint({0, 1, 0}, {0, 1, 0}, 2.0);
    REQUIRE(s);
    REQUIRE(s->a == Catch::Approx(1.0));
    REQUIRE(s->b == Catch::Approx(1.0));
    REQUIRE(on_ellipsoid(*s, {1, 1, 0}));

    // infeasible: total length below the foci distance
    REQUIRE_FALSE(ellipsoid_from_constraint({-1, 0, 0}, {1, 0, 0}, 1.9));
    REQUIRE_FALSE(ellipsoid_from_constraint({-1, 0, 0}, {1, 0, 0}, 2.0));
}

TEST_CASE("surface membership") {
    auto e = ellipsoid_from_constraint({-0.7, 0.2, 0.1}, {0.4, -0.3, 0.5}, 3.1);
    REQUIRE(e);
    // walk the parametric surface and verify the two-focus sum
    for (double th = 0.1; th < kPi; th += 0.37)
        for (double ph = 0; ph < 2 * kPi; ph += 0.53) {
            Vec3 w1, w2;
            onb(e->axis, w1, w2);
            Vec3 q = e->center + e->axis * (e->a * std::cos(th)) +
                     w1 * (e->b * std::sin(th) * std::cos(ph)) +
                     w2 * (e->b * std::sin(th) * std::sin(ph));
            REQUIRE(on_ellipsoid(*e, q, 1e-9));
        }
}

TEST_CASE("conservative box overlap") {
    auto e = ellipsoid_from_constraint({-1, 0, 0}, {1, 0, 0}, 4.0);
    REQUIRE(e);

    Aabb hull;  // generously contains the whole surface
    hull.grow({-3, -3, -3});
    hull.grow({3, 3, 3});
    REQUIRE(node_overlaps(*e, hull));  // the surface lies inside this box

    Aabb inside;  // strictly interior box
    inside.grow({-0.2, -0.2, -0.2});
    inside.grow({0.2, 0.2, 0.2});
    REQUIRE_FALSE(node_overlaps(*e, inside));

    Aabb far_box;
    far_box.grow({10, 10, 10});
    far_box.grow({11, 12, 13});
    REQUIRE_FALSE(node_overlaps(*e, far_box));

    // no false negatives: dense surface sampling vs reported non-overlaps
    Rng rng(5, 0, 0, 0, 0);
    Vec3 w1, w2;
    onb(e->axis, w1, w2);
    std::vector<Vec3> surface;
    for (int i = 0; i < 4000; ++i) {
        double z = rng.next_range(-1, 1);
        double ph = rng.next_range(0, 2 * kPi);
        double st = std::sqrt(std::max(0.0, 1 - z * z));
        surface.push_back(e->center + e->axis * (e->a * z) +
                          w1 * (e->b * st * std::cos(ph)) + w2 * (e->b * st * std::sin(ph)));
    }
    for (int t = 0; t < 1000; ++t) {
        Vec3 c{rng.next_range(-3, 3), rng.next_range(-3, 3), rng.next_range(-3, 3)};
        Vec3 h{rng.next_range(0.05, 1.5), rng.next_range(0.05, 1.5), rng.next_range(0.05, 1.5)};
        Aabb box;
        box.grow(c - h);
        box.grow(c + h);
        if (node_overlaps(*e, box)) continue;
        for (const Vec3& q : surface) {
            bool in = q.x >= box.lo.x && q.x <= box.hi.x && q.y >= box.lo.y &&
                      q.y <= box.hi.y && q.z >= box.lo.z && q.z <= box.hi.z;
            REQUIRE_FALSE(in);
        }
    }
}

TEST_CASE("sphere-plane circle sampling") {
    // degenerate-foci sphere centred above a big triangle in z=0: the
    // intersection is the unit circle
    Triangle tri = make_triangle({-10, -10, 0}, {10, -10, 0}, {0, 12, 0});
    Vec3 f{0, 0, 1};
    auto e = ellipsoid_from_constraint(f, f, 2 * std::sqrt(2.0));
    REQUIRE(e);
    auto arc = clip_ellipsoid_triangle(*e, tri);
    REQUIRE(arc);
    REQUIRE(arc->total_len == Catch::Approx(2 * kPi).epsilon(1e-9));

    Rng rng(9, 0, 0, 0, 0);
    teststat::RunningMean est;
    auto g = [](const Vec3& q) { return 1.3 + q.x * q.x - 0.4 * q.y; };
    for (int i = 0; i < 20000; ++i) {
        double pdf;
        Vec3 q = sample_arc(*arc, rng, &pdf);
        REQUIRE(std::abs(norm(q - f) + norm(q - f) - e->ell) <= 1e-9 * e->ell);
        REQUIRE(std::abs(norm(Vec3{q.x, q.y, 0}) - 1.0) < 1e-9);  // on the unit circle
        est.add(g(q) / pdf);
    }
    // quadrature oracle on the circle
    double oracle = 0;
    int n = 20000;
    for (int i = 0; i < n; ++i) {
        double th = 2 * kPi * (i + 0.5) / n;
        oracle += g({std::cos(th), std::sin(th), 0}) * (2 * kPi / n);
    }
    REQUIRE(std::abs(est.mean() - oracle) <= 0.01 * oracle);
}

TEST_CASE("samples stay inside their triangle") {
    Triangle tri = make_triangle({-0.8, -0.5, 0}, {1.2, -0.2, 0}, {0.1, 1.1, 0});
    auto e = ellipsoid_from_constraint({-0.5, 0, 0.8}, {0.6, 0.1, 0.7}, 2.4);
    REQUIRE(e);
    auto arc = clip_ellipsoid_triangle(*e, tri);
    if (!arc) return;  // no intersection for this configuration
    Rng rng(3, 0, 0, 0, 0);
    for (int i = 0; i < 2000; ++i) {
        double pdf;
        Vec3 q = sample_arc(*arc, rng, &pdf);
        // barycentric containment
        Vec3 e1 = tri.v1 - tri.v0, e2 = tri.v2 - tri.v0, d = q - tri.v0;
        double d11 = dot(e1, e1), d12 = dot(e1, e2), d22 = dot(e2, e2);
        double dv1 = dot(d, e1), dv2 = dot(d, e2);
        double det = d11 * d22 - d12 * d12;
        double u = (d22 * dv1 - d12 * dv2) / det;
        double v = (d11 * dv2 - d12 * dv1) / det;
        REQUIRE(u >= -1e-9);
        REQUIRE(v >= -1e-9);
        REQUIRE(u + v <= 1 + 1e-9);
        REQUIRE(std::abs(norm(q - e->f1) + norm(q - e->f2) - e->ell) <= 1e-9 * e->ell);
    }
}

TEST_CASE("bvh descent sampling integrates test functions") {
    SceneDef def = testscene::cornell_box({false, 4});
    SceneFrame fr = build_frame(def, 0);
    const Bvh& bvh = *fr.bvh;

    Vec3 f1{0.2, -0.3, 0.4}, f2{-0.4, 0.5, -0.2};
    auto e = ellipsoid_from_constraint(f1, f2, 3.4);
    REQUIRE(e);

    auto g = [](const Vec3& q) { return 0.7 + 0.3 * q.x + 0.2 * q.y * q.y + 0.1 * q.z; };

    // dense quadrature oracle: sum over every triangle's clipped arcs
    double oracle = 0;
    for (int t = 0; t < int(bvh.triangles().size()); ++t) {
        auto arc = clip_ellipsoid_triangle(*e, bvh.triangle(t));
        if (!arc) continue;
        for (const auto& seg : arc->segs) {
            int n = 4000;
            for (int i = 0; i < n; ++i) {
                double th = seg.t0 + (seg.t1 - seg.t0) * (i + 0.5) / n;
                oracle += g(arc->point(th)) * arc->speed(th) * (seg.t1 - seg.t0) / n;
            }
        }
    }
    REQUIRE(oracle > 0);

    teststat::RunningMean est;
    Rng rng(31, 0, 0, 0, 0);
    int draws = 60000;
    for (int i = 0; i < draws; ++i) {
        auto s = sample_connection_vertex(bvh, *e, rng);
        if (!s) {
            est.add(0.0);
            continue;
        }
        REQUIRE(std::abs(norm(s->pos - f1) + norm(s->pos - f2) - e->ell) <= 1e-9 * e->ell);
        // the deterministic evaluator agrees with the sampler's pdf
        double pe = eval_connection_pdf(bvh, *e, s->tri);
        REQUIRE(pe == Catch::Approx(s->pdf_arc).epsilon(1e-9));
        est.add(g(s->pos) / s->pdf_arc);
    }
    REQUIRE(std::abs(est.mean() - oracle) <= 0.01 * oracle + 3.0 * est.stderr_mean());
}

TEST_CASE("ellipsoidal completions hit the gate centre exactly") {
    SceneDef def = testscene::cornell_box({false, 8});
    SceneFrame fr = build_frame(def, 0);

    TraceConfig tc;
    tc.ellipsoidal = true;
    tc.ell_gate = {6.5, 0.02};  // narrow gate
    Tracer tracer(fr, tc);

    int ell_candidates = 0, ell_valid = 0;
    int dir_candidates = 0, dir_valid = 0;
    for (int px = 0; px < 8; ++px)
        for (int py = 0; py < 8; ++py) {
            for (int s = 0; s < 8; ++s) {
                Rng rng(13, 0, uint64_t(py * 8 + px), uint64_t(s), 0);
                Rng ell(13, 0, uint64_t(py * 8 + px), uint64_t(s), 2);
                tracer.trace_tree(px, py, rng, ell, [&](const PathSample& c, double) {
                    bool in_gate = gate_weight(tc.ell_gate, c.len) > 0;
                    // ellipsoidal inserts satisfy the centre to 1e-9
                    if (std::abs(c.len - tc.ell_gate.center) <= 1e-9 * tc.ell_gate.center) {
                        ell_candidates++;
                        if (in_gate) ell_valid++;
                    } else {
                        dir_candidates++;
                        if (in_gate) dir_valid++;
                    }
                });
            }
        }
    REQUIRE(ell_candidates > 50);
    REQUIRE(ell_valid == ell_candidates);  // validity rate 1.0 at the gate centre
    REQUIRE(dir_candidates > 500);
    // plain connections almost never land inside a narrow gate
    REQUIRE(double(dir_valid) / dir_candidates < 0.2);
}

TEST_CASE("infeasible length budgets produce no insert") {
    SceneDef def = testscene::cornell_box({false, 4});
    SceneFrame fr = build_frame(def, 0);
    TraceConfig tc;
    tc.ellipsoidal = true;
    tc.ell_gate = {0.5, 0.02};  // below every possible path length
    Tracer tracer(fr, tc);
    int n = 0;
    Rng rng(1, 0, 5, 0, 0), ell(1, 0, 5, 0, 2);
    tracer.trace_tree(1, 1, rng, ell, [&](const PathSample& c, double) {
        if (gate_weight(tc.ell_gate, c.len) > 0) n++;
    });
    REQUIRE(n == 0);
}
