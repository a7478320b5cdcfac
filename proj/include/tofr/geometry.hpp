#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "math.hpp"

namespace tofr {

struct Ray {
    Vec3 o;
    Vec3 d;  // unit length
};

struct Triangle {
    Vec3 v0, v1, v2;
    Vec3 n;       // unit geometric normal
    int material = 0;
    int object = 0;
    double area = 0;
};

inline Triangle make_triangle(const Vec3& a, const Vec3& b, const Vec3& c, int material = 0,
                              int object = 0) {
    Triangle t;
    t.v0 = a;
    t.v1 = b;
    t.v2 = c;
    Vec3 cr = cross(b - a, c - a);
    double l = norm(cr);
    t.area = 0.5 * l;
    t.n = l > 0 ? cr / l : Vec3(0, 0, 1);
    t.material = material;
    t.object = object;
    return t;
}

struct HitRecord {
    Vec3 pos;
    Vec3 n;          // geometric normal of the triangle (not flipped)
    int tri = -1;
    double u = 0, v = 0;  // barycentrics of v1, v2
    double t = kInf;
};

// Deterministic orthonormal frame: first edge Gram-Schmidt'ed against the
// normal. Continuous within a triangle, which is what the Newton solver needs;
// frames are rebuilt whenever a step lands on a different triangle.
inline Frame2 tangent_frame(const Triangle& tri) {
    Vec3 e = tri.v1 - tri.v0;
    Vec3 t = e - tri.n * dot(tri.n, e);
    double l = norm(t);
    if (l < 1e-12) {
        // fall back to second edge; non-degenerate triangles guarantee one works
        e = tri.v2 - tri.v0;
        t = e - tri.n * dot(tri.n, e);
        l = norm(t);
    }
    t = t / l;
    return {t, cross(tri.n, t)};
}

struct Aabb {
    Vec3 lo{kInf, kInf, kInf};
    Vec3 hi{-kInf, -kInf, -kInf};

    void grow(const Vec3& p) {
        lo = vmin(lo, p);
        hi = vmax(hi, p);
    }
    void grow(const Aabb& b) {
        lo = vmin(lo, b.lo);
        hi = vmax(hi, b.hi);
    }
    Vec3 extent() const { return hi - lo; }
    double surface_area() const {
        Vec3 e = extent();
        if (e.x < 0) return 0;
        return 2.0 * (e.x * e.y + e.y * e.z + e.z * e.x);
    }
    bool valid() const { return lo.x <= hi.x; }
};

inline bool ray_box(const Ray& r, const Vec3& inv_d, const Aabb& b, double t_min, double t_max) {
    for (int a = 0; a < 3; ++a) {
        double t0 = (b.lo[a] - r.o[a]) * inv_d[a];
        double t1 = (b.hi[a] - r.o[a]) * inv_d[a];
        if (inv_d[a] < 0) std::swap(t0, t1);
        t_min = std::max(t_min, t0);
        t_max = std::min(t_max, t1);
        if (t_max < t_min) return false;
    }
    return true;
}

// Moller-Trumbore, two-sided.
inline bool ray_triangle(const Ray& r, const Triangle& tri, double t_min, double t_max,
                         double& t_out, double& u_out, double& v_out) {
    Vec3 e1 = tri.v1 - tri.v0;
    Vec3 e2 = tri.v2 - tri.v0;
    Vec3 pv = cross(r.d, e2);
    double det = dot(e1, pv);
    if (std::abs(det) < 1e-16) return false;
    double inv_det = 1.0 / det;
    Vec3 tv = r.o - tri.v0;
    double u = dot(tv, pv) * inv_det;
    if (u < -1e-12 || u > 1 + 1e-12) return false;
    Vec3 qv = cross(tv, e1);
    double v = dot(r.d, qv) * inv_det;
    if (v < -1e-12 || u + v > 1 + 1e-12) return false;
    double t = dot(e2, qv) * inv_det;
    if (t <= t_min || t >= t_max) return false;
    t_out = t;
    u_out = u;
    v_out = v;
    return true;
}

// Binned SAH BVH, max 4 triangles per leaf, deterministic for a fixed input
// order. Nodes carry the total area of the triangles below them; the
// ellipsoidal connection sampler descends on those weights.
class Bvh {
  public:
    struct Node {
        Aabb box;
        double tri_area = 0;     // sum of descendant triangle areas
        int left = -1;           // internal: child indices
        int right = -1;
        int first = 0, count = 0;  // leaf: range in tri_order
        int parent = -1;
        bool leaf() const { return count > 0; }
    };

    Bvh() = default;

    explicit Bvh(std::vector<Triangle> tris) : tris_(std::move(tris)) {
        if (tris_.empty()) throw std::runtime_error("bvh: empty mesh");
        for (const Triangle& t : tris_)
            if (t.area <= 1e-12) throw std::runtime_error("bvh: degenerate triangle");
        tri_order_.resize(tris_.size());
        for (size_t i = 0; i < tris_.size(); ++i) tri_order_[i] = int(i);
        nodes_.reserve(tris_.size() * 2);
        build_node(0, int(tris_.size()), -1);
        Vec3 e = nodes_[0].box.extent();
        diag_ = norm(e);
        eps_ray_ = 1e-4 * diag_;
        leaf_of_tri_.assign(tris_.size(), -1);
        for (size_t n = 0; n < nodes_.size(); ++n)
            if (nodes_[n].leaf())
                for (int i = 0; i < nodes_[n].count; ++i)
                    leaf_of_tri_[tri_order_[nodes_[n].first + i]] = int(n);
    }

    const std::vector<Triangle>& triangles() const { return tris_; }
    const Triangle& triangle(int id) const { return tris_[id]; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<int>& tri_order() const { return tri_order_; }
    int leaf_of(int tri) const { return leaf_of_tri_[tri]; }
    double scene_diag() const { return diag_; }
    double eps_ray() const { return eps_ray_; }

    std::optional<HitRecord> intersect(const Ray& r, double t_max = kInf) const {
        return intersect_min(r, eps_ray_, t_max);
    }

    std::optional<HitRecord> intersect_min(const Ray& r, double t_min, double t_max) const {
        if (nodes_.empty()) return std::nullopt;
        Vec3 inv_d{1.0 / r.d.x, 1.0 / r.d.y, 1.0 / r.d.z};
        HitRecord best;
        best.t = t_max;
        bool found = false;
        int stack[64];
        int sp = 0;
        stack[sp++] = 0;
        while (sp) {
            const Node& n = nodes_[stack[--sp]];
            if (!ray_box(r, inv_d, n.box, t_min, best.t)) continue;
            if (n.leaf()) {
                for (int i = 0; i < n.count; ++i) {
                    int id = tri_order_[n.first + i];
                    double t, u, v;
                    if (ray_triangle(r, tris_[id], t_min, best.t, t, u, v)) {
                        best.t = t;
                        best.u = u;
                        best.v = v;
                        best.tri = id;
                        found = true;
                    }
                }
            } else {
                stack[sp++] = n.left;
                stack[sp++] = n.right;
            }
        }
        if (!found) return std::nullopt;
        best.pos = r.o + r.d * best.t;
        best.n = tris_[best.tri].n;
        return best;
    }

    // True when any triangle blocks the open segment (a,b), both ends shrunk
    // by eps_ray.
    bool occluded(const Vec3& a, const Vec3& b) const {
        if (nodes_.empty()) return false;
        Vec3 d = b - a;
        double dist = norm(d);
        if (dist <= 2 * eps_ray_) return false;
        Ray r{a, d / dist};
        Vec3 inv_d{1.0 / r.d.x, 1.0 / r.d.y, 1.0 / r.d.z};
        double t_min = eps_ray_, t_max = dist - eps_ray_;
        int stack[64];
        int sp = 0;
        stack[sp++] = 0;
        while (sp) {
            const Node& n = nodes_[stack[--sp]];
            if (!ray_box(r, inv_d, n.box, t_min, t_max)) continue;
            if (n.leaf()) {
                for (int i = 0; i < n.count; ++i) {
                    double t, u, v;
                    if (ray_triangle(r, tris_[tri_order_[n.first + i]], t_min, t_max, t, u, v))
                        return true;
                }
            } else {
                stack[sp++] = n.left;
                stack[sp++] = n.right;
            }
        }
        return false;
    }

  private:
    int build_node(int first, int count, int parent) {
        int idx = int(nodes_.size());
        nodes_.push_back({});
        Node node;
        node.parent = parent;
        Aabb box, centroid_box;
        double area = 0;
        for (int i = first; i < first + count; ++i) {
            const Triangle& t = tris_[tri_order_[i]];
            box.grow(t.v0);
            box.grow(t.v1);
            box.grow(t.v2);
            centroid_box.grow((t.v0 + t.v1 + t.v2) / 3.0);
            area += t.area;
        }
        node.box = box;
        node.tri_area = area;
        if (count <= 4) {
            node.first = first;
            node.count = count;
            nodes_[idx] = node;
            return idx;
        }

        // binned SAH over the widest centroid axis
        Vec3 ext = centroid_box.extent();
        int axis = ext.x > ext.y ? (ext.x > ext.z ? 0 : 2) : (ext.y > ext.z ? 1 : 2);
        constexpr int kBins = 8;
        double lo = centroid_box.lo[axis], width = ext[axis];
        int mid;
        if (width < 1e-12) {
            mid = first + count / 2;  // all centroids coincide
        } else {
            struct Bin {
                Aabb box;
                int count = 0;
            } bins[kBins];
            auto bin_of = [&](const Triangle& t) {
                double c = ((t.v0[axis] + t.v1[axis] + t.v2[axis]) / 3.0 - lo) / width;
                return std::min(kBins - 1, int(c * kBins));
            };
            for (int i = first; i < first + count; ++i) {
                const Triangle& t = tris_[tri_order_[i]];
                Bin& b = bins[bin_of(t)];
                b.count++;
                b.box.grow(t.v0);
                b.box.grow(t.v1);
                b.box.grow(t.v2);
            }
            double best_cost = kInf;
            int best_split = -1;
            for (int s = 1; s < kBins; ++s) {
                Aabb lbox, rbox;
                int lc = 0, rc = 0;
                for (int i = 0; i < s; ++i) {
                    if (bins[i].count) lbox.grow(bins[i].box);
                    lc += bins[i].count;
                }
                for (int i = s; i < kBins; ++i) {
                    if (bins[i].count) rbox.grow(bins[i].box);
                    rc += bins[i].count;
                }
                if (lc == 0 || rc == 0) continue;
                double cost = lbox.surface_area() * lc + rbox.surface_area() * rc;
                if (cost < best_cost) {
                    best_cost = cost;
                    best_split = s;
                }
            }
            if (best_split < 0) {
                mid = first + count / 2;
            } else {
                auto it = std::stable_partition(
                    tri_order_.begin() + first, tri_order_.begin() + first + count,
                    [&](int id) { return bin_of(tris_[id]) < best_split; });
                mid = int(it - tri_order_.begin());
                if (mid == first || mid == first + count) mid = first + count / 2;
            }
        }
        node.left = build_node(first, mid - first, idx);
        node.right = build_node(mid, first + count - mid, idx);
        nodes_[idx] = node;
        return idx;
    }

    std::vector<Triangle> tris_;
    std::vector<int> tri_order_;
    std::vector<Node> nodes_;
    std::vector<int> leaf_of_tri_;
    double diag_ = 0;
    double eps_ray_ = 1e-7;
};

}  // namespace tofr
