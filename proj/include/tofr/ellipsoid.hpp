#pragma once

#include <array>
#include <optional>
#include <vector>

#include "geometry.hpp"
#include "rng.hpp"

namespace tofr {

// Prolate spheroid of constant two-focus length: |q-f1| + |q-f2| = ell.
struct Ellipsoid {
    Vec3 f1, f2;
    Vec3 center;
    Vec3 axis;     // unit f1->f2, arbitrary when the foci coincide
    double ell = 0;
    double a = 0, b = 0;  // semi-major / semi-minor
    Mat3 M;               // surface: (x-center)^T M (x-center) = 1
};

inline std::optional<Ellipsoid> ellipsoid_from_constraint(const Vec3& f1, const Vec3& f2,
                                                          double ell) {
    double d = norm(f2 - f1);
    if (!(ell > d) || !(ell > 0)) return std::nullopt;  // infeasible constraint
    Ellipsoid e;
    e.f1 = f1;
    e.f2 = f2;
    e.ell = ell;
    e.center = (f1 + f2) * 0.5;
    e.axis = d > 1e-12 * ell ? (f2 - f1) / d : Vec3(1, 0, 0);
    e.a = ell / 2;
    e.b = std::sqrt(std::max(0.0, e.a * e.a - d * d / 4));
    Mat3 aa = Mat3::outer(e.axis, e.axis);
    e.M = aa * (1.0 / (e.a * e.a)) + (Mat3::identity() - aa) * (1.0 / (e.b * e.b));
    return e;
}

inline bool on_ellipsoid(const Ellipsoid& e, const Vec3& q, double tol_rel = 1e-9) {
    return std::abs(norm(q - e.f1) + norm(q - e.f2) - e.ell) <= tol_rel * e.ell;
}

namespace detail {

// Coordinates in the frame where the ellipsoid is the unit sphere.
inline Vec3 to_unit_sphere(const Ellipsoid& e, const Vec3& x) {
    Vec3 d = x - e.center;
    Vec3 w1, w2;
    onb(e.axis, w1, w2);
    return {dot(e.axis, d) / e.a, dot(w1, d) / e.b, dot(w2, d) / e.b};
}

}  // namespace detail

// Conservative surface/box test: never reports false when the surface meets
// the box. The max-norm over the box corners is exact; the min-norm uses the
// axis-aligned hull of the transformed corners, which can only shrink it.
inline bool node_overlaps(const Ellipsoid& e, const Aabb& box) {
    Vec3 corners[8];
    int n = 0;
    for (int i = 0; i < 8; ++i) {
        Vec3 c{(i & 1) ? box.hi.x : box.lo.x, (i & 2) ? box.hi.y : box.lo.y,
               (i & 4) ? box.hi.z : box.lo.z};
        corners[n++] = detail::to_unit_sphere(e, c);
    }
    double max2 = 0;
    Aabb hull;
    for (int i = 0; i < 8; ++i) {
        max2 = std::max(max2, norm2(corners[i]));
        hull.grow(corners[i]);
    }
    if (max2 < 1.0) return false;  // box strictly inside the interior
    double min2 = 0;
    for (int a = 0; a < 3; ++a) {
        double lo = hull.lo[a], hi = hull.hi[a];
        double d = lo > 0 ? lo : (hi < 0 ? -hi : 0);
        min2 += d * d;
    }
    return min2 <= 1.0;
}

// ---------------------------------------------------------------------------
// ellipse/triangle intersection arcs

namespace gauss {

// 32-point Gauss-Legendre rule on [-1,1]; nodes via Newton on P_32.
struct Rule32 {
    std::array<double, 32> x{}, w{};
    Rule32() {
        constexpr int n = 32;
        for (int i = 0; i < n / 2; ++i) {
            double t = std::cos(kPi * (i + 0.75) / (n + 0.5));
            double p0, p1;
            for (int it = 0; it < 100; ++it) {
                p0 = 1.0;
                p1 = 0.0;
                for (int j = 0; j < n; ++j) {
                    double p2 = p1;
                    p1 = p0;
                    p0 = ((2.0 * j + 1.0) * t * p1 - j * p2) / (j + 1);
                }
                double dp = n * (t * p0 - p1) / (t * t - 1.0);
                double dt = p0 / dp;
                t -= dt;
                if (std::abs(dt) < 1e-15) break;
            }
            p0 = 1.0;
            p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * t * p1 - j * p2) / (j + 1);
            }
            double dp = n * (t * p0 - p1) / (t * t - 1.0);
            x[i] = -t;
            x[n - 1 - i] = t;
            w[i] = w[n - 1 - i] = 2.0 / ((1.0 - t * t) * dp * dp);
        }
    }
};

inline const Rule32& rule32() {
    static const Rule32 r;
    return r;
}

template <typename F>
double integrate(double a, double b, F&& f) {
    const Rule32& r = rule32();
    double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    double s = 0;
    for (int i = 0; i < 32; ++i) s += r.w[i] * f(mid + half * r.x[i]);
    return s * half;
}

}  // namespace gauss

// The intersection of the ellipsoid with a triangle's plane is an ellipse;
// clipping against the three edges leaves a set of angular arcs.
struct ConicArc {
    Vec3 origin;
    Frame2 frame;
    Vec2 center;
    Vec2 ax1, ax2;  // unit axis directions in plane coordinates
    double r1 = 0, r2 = 0;
    struct Seg {
        double t0, t1, len;
    };
    std::vector<Seg> segs;
    double total_len = 0;

    Vec2 point2(double th) const {
        return center + ax1 * (r1 * std::cos(th)) + ax2 * (r2 * std::sin(th));
    }
    Vec3 point(double th) const { return origin + frame.to_world(point2(th)); }
    double speed(double th) const {
        Vec2 d = ax1 * (-r1 * std::sin(th)) + ax2 * (r2 * std::cos(th));
        return norm(d);
    }
    double angle_of(const Vec3& q) const {
        Vec2 d = frame.to_local(q - origin) - center;
        return std::atan2(dot(d, ax2) / r2, dot(d, ax1) / r1);
    }
};

inline std::optional<ConicArc> clip_ellipsoid_triangle(const Ellipsoid& e, const Triangle& tri) {
    ConicArc arc;
    arc.origin = tri.v0;
    arc.frame = tangent_frame(tri);
    const Vec3 T = arc.frame.t, B = arc.frame.b;
    Vec3 d0 = tri.v0 - e.center;
    Vec3 MT = e.M * T, MB = e.M * B, Md = e.M * d0;
    Mat2 Q{dot(T, MT), dot(T, MB), dot(B, MT), dot(B, MB)};
    Vec2 L{dot(T, Md), dot(B, Md)};
    double k = dot(d0, Md) - 1.0;

    Vec2 h;
    if (!solve2x2(Q, -L, h)) return std::nullopt;
    double fh = dot(h, Q * h) + 2.0 * dot(L, h) + k;
    double rho = -fh;
    if (!(rho > 0)) return std::nullopt;  // plane misses or grazes the surface

    // eigen decomposition of the 2x2 symmetric Q; pick the better-conditioned
    // eigenvector expression (either can vanish when Q is diagonal)
    double tr = Q.a + Q.d, det = Q.det();
    double disc = std::sqrt(std::max(0.0, tr * tr / 4 - det));
    double l1 = tr / 2 + disc, l2 = tr / 2 - disc;
    if (!(l2 > 0)) return std::nullopt;
    Vec2 c1{Q.b, l1 - Q.a};
    Vec2 c2{l1 - Q.d, Q.c};
    Vec2 v1 = norm(c1) >= norm(c2) ? c1 : c2;
    double nv = norm(v1);
    v1 = nv > 1e-14 * std::max(std::abs(l1), 1e-30) ? v1 * (1.0 / nv) : Vec2{1, 0};
    arc.center = h;
    arc.ax1 = v1;
    arc.ax2 = rot90(v1);
    arc.r1 = std::sqrt(rho / l1);
    arc.r2 = std::sqrt(rho / l2);

    // triangle edges as half planes in parameter space
    Vec2 p0{0, 0};
    Vec2 p1 = arc.frame.to_local(tri.v1 - tri.v0);
    Vec2 p2 = arc.frame.to_local(tri.v2 - tri.v0);
    struct Half {
        Vec2 n;
        double c;
    } edges[3];
    auto make_edge = [](const Vec2& a, const Vec2& b, const Vec2& inside) {
        Vec2 n = rot90(b - a);
        double c = dot(n, a);
        if (dot(n, inside) < c) {
            n = -n;
            c = -c;
        }
        return Half{n, c};
    };
    edges[0] = make_edge(p0, p1, p2);
    edges[1] = make_edge(p1, p2, p0);
    edges[2] = make_edge(p2, p0, p1);

    auto inside = [&](double th) {
        Vec2 q = arc.point2(th);
        for (const Half& hp : edges)
            if (dot(hp.n, q) < hp.c - 1e-12) return false;
        return true;
    };

    // crossing angles of each edge line with the ellipse
    std::vector<double> cuts;
    for (const Half& hp : edges) {
        double A = dot(hp.n, arc.ax1) * arc.r1;
        double B2 = dot(hp.n, arc.ax2) * arc.r2;
        double C = dot(hp.n, arc.center) - hp.c;
        double R = std::hypot(A, B2);
        if (R < std::abs(C) || R < 1e-300) continue;
        double base = std::atan2(B2, A);
        double off = std::acos(clamp(-C / R, -1.0, 1.0));
        cuts.push_back(base + off);
        cuts.push_back(base - off);
    }
    for (double& c : cuts) {
        c = std::fmod(c, 2 * kPi);
        if (c < 0) c += 2 * kPi;
    }
    std::sort(cuts.begin(), cuts.end());

    auto add_seg = [&](double t0, double t1) {
        if (t1 - t0 < 1e-12) return;
        double mid = 0.5 * (t0 + t1);
        if (!inside(mid)) return;
        double len = gauss::integrate(t0, t1, [&](double th) { return arc.speed(th); });
        if (len <= 0) return;
        arc.segs.push_back({t0, t1, len});
        arc.total_len += len;
    };
    if (cuts.empty()) {
        if (!inside(0)) return std::nullopt;
        add_seg(0, 2 * kPi);
    } else {
        for (size_t i = 0; i < cuts.size(); ++i) {
            double t0 = cuts[i];
            double t1 = i + 1 < cuts.size() ? cuts[i + 1] : cuts[0] + 2 * kPi;
            add_seg(t0, t1);
        }
    }
    if (arc.segs.empty() || arc.total_len <= 0) return std::nullopt;
    return arc;
}

// Uniform-by-arc-length sample; inverts the cumulative length by bisection to
// 1e-6 relative tolerance.
inline Vec3 sample_arc(const ConicArc& arc, Rng& rng, double* pdf_len) {
    double target = rng.next() * arc.total_len;
    const ConicArc::Seg* seg = &arc.segs.back();
    for (const auto& s : arc.segs) {
        if (target <= s.len || &s == &arc.segs.back()) {
            seg = &s;
            break;
        }
        target -= s.len;
    }
    target = clamp(target, 0.0, seg->len);
    double lo = seg->t0, hi = seg->t1;
    for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        double l = gauss::integrate(seg->t0, mid, [&](double th) { return arc.speed(th); });
        if (l < target)
            lo = mid;
        else
            hi = mid;
        if ((hi - lo) * arc.speed(0.5 * (lo + hi)) < 1e-6 * std::max(arc.total_len, 1e-30)) break;
    }
    *pdf_len = 1.0 / arc.total_len;
    return arc.point(0.5 * (lo + hi));
}

// ---------------------------------------------------------------------------
// area-weighted BVH-node descent

struct EllipsoidSample {
    Vec3 pos;
    int tri = -1;
    double pdf_arc = 0;  // descent probability x triangle pick x 1/arclen
};

// Descends the tree choosing children proportional to (overlapping ? node
// triangle area : 0); at the leaf, picks a triangle by area and samples the
// clipped intersection arc uniformly by length.
inline std::optional<EllipsoidSample> sample_connection_vertex(const Bvh& bvh, const Ellipsoid& e,
                                                               Rng& rng) {
    const auto& nodes = bvh.nodes();
    if (!node_overlaps(e, nodes[0].box)) return std::nullopt;
    double p_desc = 1.0;
    int ni = 0;
    while (!nodes[ni].leaf()) {
        const auto& l = nodes[nodes[ni].left];
        const auto& r = nodes[nodes[ni].right];
        double wl = node_overlaps(e, l.box) ? l.tri_area : 0.0;
        double wr = node_overlaps(e, r.box) ? r.tri_area : 0.0;
        double sum = wl + wr;
        if (sum <= 0) return std::nullopt;
        if (rng.next() * sum < wl) {
            p_desc *= wl / sum;
            ni = nodes[ni].left;
        } else {
            p_desc *= wr / sum;
            ni = nodes[ni].right;
        }
    }
    const auto& leaf = nodes[ni];
    double pick = rng.next() * leaf.tri_area;
    int tri_id = bvh.tri_order()[leaf.first];
    double acc = 0;
    for (int i = 0; i < leaf.count; ++i) {
        int id = bvh.tri_order()[leaf.first + i];
        acc += bvh.triangle(id).area;
        if (pick <= acc || i == leaf.count - 1) {
            tri_id = id;
            break;
        }
    }
    double p_tri = bvh.triangle(tri_id).area / leaf.tri_area;
    auto arc = clip_ellipsoid_triangle(e, bvh.triangle(tri_id));
    if (!arc) return std::nullopt;  // empty clipped arc: allowed sub-probability
    EllipsoidSample s;
    double pdf_len;
    s.pos = sample_arc(*arc, rng, &pdf_len);
    s.tri = tri_id;
    s.pdf_arc = p_desc * p_tri * pdf_len;
    return s;
}

// Deterministic pdf of sample_connection_vertex landing on triangle `tri_id`,
// per unit arc length; 0 when the descent cannot reach that leaf.
inline double eval_connection_pdf(const Bvh& bvh, const Ellipsoid& e, int tri_id) {
    const auto& nodes = bvh.nodes();
    int leaf_idx = bvh.leaf_of(tri_id);
    if (leaf_idx < 0) return 0;
    double p_desc = 1.0;
    int ni = leaf_idx;
    while (nodes[ni].parent >= 0) {
        int pi = nodes[ni].parent;
        const auto& l = nodes[nodes[pi].left];
        const auto& r = nodes[nodes[pi].right];
        double wl = node_overlaps(e, l.box) ? l.tri_area : 0.0;
        double wr = node_overlaps(e, r.box) ? r.tri_area : 0.0;
        double sum = wl + wr;
        double mine = (nodes[pi].left == ni) ? wl : wr;
        if (mine <= 0 || sum <= 0) return 0;
        p_desc *= mine / sum;
        ni = pi;
    }
    if (!node_overlaps(e, nodes[0].box)) return 0;
    const auto& leaf = nodes[leaf_idx];
    double p_tri = bvh.triangle(tri_id).area / leaf.tri_area;
    auto arc = clip_ellipsoid_triangle(e, bvh.triangle(tri_id));
    if (!arc) return 0;
    return p_desc * p_tri / arc->total_len;
}

}  // namespace tofr
