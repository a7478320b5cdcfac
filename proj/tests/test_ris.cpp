#include <catch2/catch_amalgamated.hpp>

#include <tofr/pipeline.hpp>

#include "support/stats_util.hpp"
#include "support/test_scenes.hpp"

using namespace tofr;

namespace {

PathSample dummy_sample(double lum, double len = 10.0) {
    PathSample s;
    s.f = Vec3(lum);
    s.len = len;
    s.pdf = 1;
    s.depth = 2;
    return s;
}

}  // namespace

TEST_CASE("reservoir update basics") {
    Rng rng(1, 0, 0, 0, 0);
    Reservoir r;
    REQUIRE(reservoir_update(r, dummy_sample(2.0), 1.5, 1.0, 2.0, rng));  // first always wins
    REQUIRE(r.has);
    REQUIRE(r.M == 1.0);
    REQUIRE(r.w_sum == 1.5);

    PathSample before = r.y;
    REQUIRE_FALSE(reservoir_update(r, dummy_sample(9.0), 0.0, 1.0, 9.0, rng));
    REQUIRE(r.w_sum == 1.5);  // zero weight leaves the sum alone
    REQUIRE(r.M == 2.0);
    REQUIRE(r.y.f.x == before.f.x);

    REQUIRE_FALSE(reservoir_update(r, dummy_sample(1.0), std::nan(""), 1.0, 1.0, rng));
    REQUIRE(r.nonfinite_rejected == 1);
}

TEST_CASE("selection frequencies follow the weights") {
    const double w[4] = {1.0, 3.0, 0.5, 2.5};
    double wsum = 7.0;
    int counts[4] = {0, 0, 0, 0};
    int trials = 100000;
    for (int t = 0; t < trials; ++t) {
        Rng rng(99, 0, uint64_t(t), 0, 0);
        Reservoir r;
        for (int i = 0; i < 4; ++i) reservoir_update(r, dummy_sample(i + 1), w[i], 1, 1, rng);
        counts[int(r.y.f.x) - 1]++;
    }
    for (int i = 0; i < 4; ++i) {
        double p = w[i] / wsum;
        double se = std::sqrt(p * (1 - p) * trials);
        REQUIRE(std::abs(counts[i] - p * trials) <= 3.0 * se + 1.0);
    }
}

TEST_CASE("finalize arithmetic from the two-candidate example") {
    // candidates with phat (2, 6), unit proposal pdfs, balance weights 1/2:
    // resampling weights are (1, 3); if the second wins, W = 4/6
    Rng rng(7, 0, 4, 0, 0);
    for (int attempt = 0; attempt < 64; ++attempt) {
        Reservoir r;
        reservoir_update(r, dummy_sample(2.0), 0.5 * 2.0 * 1.0, 1, 2.0, rng);
        reservoir_update(r, dummy_sample(6.0), 0.5 * 6.0 * 1.0, 1, 6.0, rng);
        REQUIRE(r.w_sum == Catch::Approx(4.0));
        ris_finalize(r);
        if (r.y.f.x == 6.0) {
            REQUIRE(r.W == Catch::Approx(2.0 / 3.0));
            return;
        }
    }
    FAIL("second candidate never won in 64 attempts");
}

TEST_CASE("uniform targets reduce to plain importance sampling") {
    Rng rng(3, 0, 0, 0, 0);
    Reservoir r;
    double p = 0.25;  // proposal pdf
    for (int i = 0; i < 10; ++i)
        reservoir_update(r, dummy_sample(5.0), (1.0 / 10) * 5.0 / p, 1, 5.0, rng);
    ris_finalize(r);
    REQUIRE(r.W == Catch::Approx(1.0 / p));
}

TEST_CASE("all-zero targets finalize empty") {
    Rng rng(5, 0, 0, 0, 0);
    Reservoir r;
    for (int i = 0; i < 8; ++i) reservoir_update(r, dummy_sample(0.0), 0.0, 1, 0.0, rng);
    ris_finalize(r);
    REQUIRE(r.empty());
    REQUIRE(r.W == 0.0);
    REQUIRE(r.M == 8.0);
}

TEST_CASE("generalized balance heuristic") {
    {
        double M[2] = {1, 1}, pf[2] = {4, 4};
        REQUIRE(mis_weight(M, pf, 2, 0) == Catch::Approx(0.5));
    }
    {
        double M[2] = {1, 1}, pf[2] = {4, 0};  // invalid inverse shift
        REQUIRE(mis_weight(M, pf, 2, 0) == Catch::Approx(1.0));
    }
    {
        double M[2] = {3, 1}, pf[2] = {4, 4};
        REQUIRE(mis_weight(M, pf, 2, 0) == Catch::Approx(0.75));
    }
    // partition of unity over any candidate set
    Rng rng(13, 0, 0, 0, 0);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + int(rng.next_below(4));
        std::vector<double> M(n), pf(n);
        for (int i = 0; i < n; ++i) {
            M[i] = rng.next_range(0.5, 20);
            pf[i] = rng.next_range(0.01, 5);
        }
        double sum = 0;
        for (int i = 0; i < n; ++i) sum += mis_weight(M.data(), pf.data(), n, i);
        REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("merge with identity shift reduces to same-domain RIS") {
    Rng rng(11, 0, 2, 0, 0);
    TargetFunction phat{GateSpec{GateSpec::Kind::Length, 10.0, 1.0, 1.0}};

    Reservoir dst;
    PathSample a = dummy_sample(2.0);
    reservoir_update(dst, a, phat(a), 0, phat(a), rng);
    ris_finalize(dst);
    dst.M = 1;

    Reservoir src;
    PathSample b = dummy_sample(6.0);
    reservoir_update(src, b, phat(b), 0, phat(b), rng);
    ris_finalize(src);
    src.M = 1;

    MergeShift ms;
    ms.valid = true;
    ms.mapped = src.y;
    ms.jacobian = 1.0;
    ms.phat_src_of_dst = phat(dst.y);  // identity inverse shift

    gris_merge(dst, src, ms, phat, 20.0, rng);
    REQUIRE(dst.M == 2.0);
    REQUIRE(dst.has);
    // with identity shifts between identical domains, every candidate sees an
    // equal-confidence competitor at its own point, so each m_i is 1/2 and
    // w_sum = 0.5 * phat_a * W_a + 0.5 * phat_b * W_b = 0.5 * 2 + 0.5 * 6
    double pa = phat(a), pb = phat(b);
    REQUIRE(dst.w_sum == Catch::Approx(0.5 * pa * 1.0 + 0.5 * pb * 1.0));
}

TEST_CASE("merge ignores empty sources but keeps confidence") {
    Rng rng(17, 0, 0, 0, 0);
    TargetFunction phat{GateSpec{GateSpec::Kind::Length, 10.0, 1.0, 1.0}};
    Reservoir dst;
    PathSample a = dummy_sample(3.0);
    reservoir_update(dst, a, phat(a), 0, phat(a), rng);
    ris_finalize(dst);
    dst.M = 1;
    double w_before = dst.w_sum;

    Reservoir src;  // empty, confidence 5
    src.M = 5;
    MergeShift none;  // invalid shift
    gris_merge(dst, src, none, phat, 20.0, rng);
    REQUIRE(dst.M == 6.0);
    REQUIRE(dst.has);
    // the dst candidate's balance weight is 1 (no competing phat term)
    REQUIRE(dst.w_sum == Catch::Approx(w_before));

    // confidence clamp
    Reservoir big;
    big.M = 50;
    gris_merge(dst, big, none, phat, 20.0, rng);
    REQUIRE(dst.M == 20.0);
}

TEST_CASE("two-pixel merge matches the brute-force oracle") {
    SceneDef def = testscene::cornell_box({false, 16});
    SceneFrame fr = build_frame(def, 0);

    int ax = 7, ay = 9, bx = 8, by = 9;

    // choose a gate with real energy at pixel A
    GateSpec gate{GateSpec::Kind::Length, 0, 0.35, 1.0};
    double best = -1;
    for (double tau : {5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0}) {
        GateSpec g = gate;
        g.center = tau;
        double lum = luminance(reference_gated_pixel(fr, ax, ay, g, 3000, 99));
        if (lum > best) {
            best = lum;
            gate = g;
        }
    }
    REQUIRE(best > 0);

    Vec3 var;
    Vec3 oracle = reference_gated_pixel(fr, ax, ay, gate, 200000, 1234, &var);
    Vec3 oracle_se{std::sqrt(var.x / 200000), std::sqrt(var.y / 200000),
                   std::sqrt(var.z / 200000)};

    RenderConfig cfg;
    cfg.m_init = 4;
    cfg.seed = 555;
    cfg.m_cap = 20;

    teststat::RunningMean mr, mg, mb;
    ShiftConfig sc = cfg.shift_config();
    TargetFunction phat{gate};
    int runs = 1500;
    for (int run = 0; run < runs; ++run) {
        RenderConfig rc = cfg;
        rc.seed = cfg.seed + uint64_t(run) * 7919;
        Reservoir ra = stage::initial_sampling(fr, rc, gate, ax, ay, 0);
        Reservoir rb = stage::initial_sampling(fr, rc, gate, bx, by, 0);
        Domain da{ax, ay, gate, &fr};
        Domain db{bx, by, gate, &fr};
        MergeShift ms = stage::make_merge_shift(ra, da, rb, db, sc, phat, nullptr);
        Rng rng(rc.seed, 0, 77, 0, 8);
        gris_merge(ra, rb, ms, phat, cfg.m_cap, rng);
        Vec3 est = final_shading(ra, gate);
        mr.add(est.x);
        mg.add(est.y);
        mb.add(est.z);
    }
    double tol_r = 3.0 * std::sqrt(mr.stderr_mean() * mr.stderr_mean() + oracle_se.x * oracle_se.x);
    double tol_g = 3.0 * std::sqrt(mg.stderr_mean() * mg.stderr_mean() + oracle_se.y * oracle_se.y);
    double tol_b = 3.0 * std::sqrt(mb.stderr_mean() * mb.stderr_mean() + oracle_se.z * oracle_se.z);
    REQUIRE(std::abs(mr.mean() - oracle.x) <= tol_r);
    REQUIRE(std::abs(mg.mean() - oracle.y) <= tol_g);
    REQUIRE(std::abs(mb.mean() - oracle.z) <= tol_b);
}
