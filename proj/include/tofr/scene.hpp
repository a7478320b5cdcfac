#pragma once

#include <cassert>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "rng.hpp"

namespace tofr {

// ---------------------------------------------------------------------------
// materials

enum class MatKind { Diffuse, Glossy, Mirror };

struct Material {
    MatKind kind = MatKind::Diffuse;
    Vec3 albedo{0.5, 0.5, 0.5};
    double roughness = 0.5;  // glossy only, in (0,1]

    // Vertices eligible for path reconnection: diffuse, or glossy that is
    // rough enough for the reconnected lobe to stay well-behaved.
    bool reconnectable() const {
        return kind == MatKind::Diffuse || (kind == MatKind::Glossy && roughness >= 0.2);
    }
    bool delta() const { return kind == MatKind::Mirror; }
};

inline Vec3 oriented_normal(const Vec3& n, const Vec3& toward) {
    return dot(n, toward) >= 0 ? n : -n;
}

inline Vec3 reflect(const Vec3& w, const Vec3& n) { return n * (2.0 * dot(n, w)) - w; }

namespace ggx {

inline double alpha_of(double roughness) { return std::max(1e-3, roughness * roughness); }

inline double ndf(double cos_h, double alpha) {
    double a2 = alpha * alpha;
    double d = cos_h * cos_h * (a2 - 1.0) + 1.0;
    return a2 / (kPi * d * d);
}

inline double g1(double cos_v, double alpha) {
    double a2 = alpha * alpha;
    return 2.0 * cos_v / (cos_v + std::sqrt(a2 + (1.0 - a2) * cos_v * cos_v));
}

}  // namespace ggx

// Directions point away from the surface. Below-horizon pairs evaluate to 0;
// delta lobes evaluate to 0 by convention.
inline Vec3 eval_bsdf(const Material& m, const Vec3& n_geo, const Vec3& wi, const Vec3& wo) {
    Vec3 n = oriented_normal(n_geo, wi);
    double ci = dot(n, wi), co = dot(n, wo);
    if (ci <= 0 || co <= 0) return Vec3(0);
    switch (m.kind) {
        case MatKind::Diffuse:
            return m.albedo * (1.0 / kPi);
        case MatKind::Glossy: {
            Vec3 h = normalize(wi + wo);
            double a = ggx::alpha_of(m.roughness);
            double d = ggx::ndf(dot(n, h), a);
            double g = ggx::g1(ci, a) * ggx::g1(co, a);
            return m.albedo * (d * g / (4.0 * ci * co));
        }
        case MatKind::Mirror:
            return Vec3(0);
    }
    return Vec3(0);
}

inline double pdf_bsdf(const Material& m, const Vec3& n_geo, const Vec3& wi, const Vec3& wo) {
    Vec3 n = oriented_normal(n_geo, wi);
    double ci = dot(n, wi), co = dot(n, wo);
    if (ci <= 0 || co <= 0) return 0;
    switch (m.kind) {
        case MatKind::Diffuse:
            return co / kPi;
        case MatKind::Glossy: {
            Vec3 h = normalize(wi + wo);
            double a = ggx::alpha_of(m.roughness);
            double doth = dot(wi, h);
            if (doth <= 0) return 0;
            return ggx::ndf(dot(n, h), a) * dot(n, h) / (4.0 * doth);
        }
        case MatKind::Mirror:
            return 0;
    }
    return 0;
}

struct BsdfSample {
    Vec3 wo;
    double pdf = 0;    // solid-angle pdf; 1 for delta lobes
    Vec3 weight;       // f * cos / pdf (albedo for delta)
    bool is_delta = false;
    bool valid = false;
};

inline BsdfSample sample_bsdf(const Material& m, const Vec3& n_geo, const Vec3& wi, Rng& rng) {
    BsdfSample s;
    Vec3 n = oriented_normal(n_geo, wi);
    if (dot(n, wi) <= 0) return s;
    switch (m.kind) {
        case MatKind::Diffuse: {
            double u1 = rng.next(), u2 = rng.next();
            double cos_t = std::sqrt(u1), sin_t = std::sqrt(std::max(0.0, 1.0 - u1));
            double phi = 2.0 * kPi * u2;
            Vec3 t, b;
            onb(n, t, b);
            s.wo = t * (sin_t * std::cos(phi)) + b * (sin_t * std::sin(phi)) + n * cos_t;
            s.pdf = cos_t / kPi;
            if (s.pdf <= 0) return s;
            s.weight = m.albedo;  // (albedo/pi) * cos / (cos/pi)
            s.valid = true;
            return s;
        }
        case MatKind::Glossy: {
            double a = ggx::alpha_of(m.roughness);
            double u1 = rng.next(), u2 = rng.next();
            double cos_h = std::sqrt((1.0 - u1) / (1.0 + (a * a - 1.0) * u1));
            double sin_h = std::sqrt(std::max(0.0, 1.0 - cos_h * cos_h));
            double phi = 2.0 * kPi * u2;
            Vec3 t, b;
            onb(n, t, b);
            Vec3 h = t * (sin_h * std::cos(phi)) + b * (sin_h * std::sin(phi)) + n * cos_h;
            Vec3 wo = reflect(wi, h);
            double co = dot(n, wo);
            if (co <= 0) return s;  // sampled below horizon, zero contribution
            double doth = dot(wi, h);
            if (doth <= 0) return s;
            s.wo = wo;
            s.pdf = ggx::ndf(cos_h, a) * cos_h / (4.0 * doth);
            if (s.pdf <= 0) return s;
            double g = ggx::g1(dot(n, wi), a) * ggx::g1(co, a);
            s.weight = m.albedo * (g * doth / (dot(n, wi) * cos_h));
            s.valid = true;
            return s;
        }
        case MatKind::Mirror: {
            s.wo = reflect(wi, n);
            s.pdf = 1.0;
            s.weight = m.albedo;
            s.is_delta = true;
            s.valid = true;
            return s;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// delta lights

enum class LightRegime { Collimated, Wide };

struct DeltaLight {
    Vec3 position;
    Vec3 direction{0, 0, -1};  // unit
    double cone_half_angle = kPi / 2;
    Vec3 intensity{1, 1, 1};  // W/sr (wide) or beam power (collimated)
    LightRegime regime = LightRegime::Wide;
};

struct LightSample {
    Vec3 dir;        // unit, target -> light
    double dist = 0;
    Vec3 value;      // radiant intensity over squared distance
};

// Wide lights connect by NEE; collimated lasers never do (they contribute via
// the traced light subpath instead).
inline std::optional<LightSample> light_sample(const DeltaLight& l, const Vec3& target) {
    if (l.regime == LightRegime::Collimated) return std::nullopt;
    Vec3 to_target = target - l.position;
    double d = norm(to_target);
    if (d <= 0) return std::nullopt;
    Vec3 w = to_target / d;
    if (dot(w, l.direction) < std::cos(l.cone_half_angle)) return std::nullopt;
    LightSample s;
    s.dir = -w;
    s.dist = d;
    s.value = l.intensity / (d * d);
    return s;
}

// Uniform solid-angle sample inside the cone.
inline Ray emit_ray(const DeltaLight& l, Rng& rng) {
    double cos_max = std::cos(l.cone_half_angle);
    double cos_t = 1.0 - rng.next() * (1.0 - cos_max);
    double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
    double phi = 2.0 * kPi * rng.next();
    Vec3 t, b;
    onb(l.direction, t, b);
    Vec3 d = t * (sin_t * std::cos(phi)) + b * (sin_t * std::sin(phi)) + l.direction * cos_t;
    return {l.position, normalize(d)};
}

inline double emit_pdf(const DeltaLight& l) {
    double cos_max = std::cos(l.cone_half_angle);
    double solid = 2.0 * kPi * (1.0 - cos_max);
    return solid > 0 ? 1.0 / solid : 0.0;
}

// ---------------------------------------------------------------------------
// rigid motion

struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    static Quat axis_angle(const Vec3& axis, double angle) {
        double s = std::sin(angle / 2);
        Vec3 a = normalize(axis);
        return {std::cos(angle / 2), a.x * s, a.y * s, a.z * s};
    }
    Quat operator*(const Quat& o) const {
        return {w * o.w - x * o.x - y * o.y - z * o.z, w * o.x + x * o.w + y * o.z - z * o.y,
                w * o.y - x * o.z + y * o.w + z * o.x, w * o.z + x * o.y - y * o.x + z * o.w};
    }
    Quat normalized() const {
        double n = std::sqrt(w * w + x * x + y * y + z * z);
        return {w / n, x / n, y / n, z / n};
    }
    Mat3 to_matrix() const {
        Mat3 r;
        r.m[0][0] = 1 - 2 * (y * y + z * z);
        r.m[0][1] = 2 * (x * y - z * w);
        r.m[0][2] = 2 * (x * z + y * w);
        r.m[1][0] = 2 * (x * y + z * w);
        r.m[1][1] = 1 - 2 * (x * x + z * z);
        r.m[1][2] = 2 * (y * z - x * w);
        r.m[2][0] = 2 * (x * z - y * w);
        r.m[2][1] = 2 * (y * z + x * w);
        r.m[2][2] = 1 - 2 * (x * x + y * y);
        return r;
    }
};

inline Quat slerp(const Quat& a, Quat b, double t) {
    double d = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
    if (d < 0) {
        b = {-b.w, -b.x, -b.y, -b.z};
        d = -d;
    }
    if (d > 0.9995) {
        Quat r{a.w + (b.w - a.w) * t, a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t,
               a.z + (b.z - a.z) * t};
        return r.normalized();
    }
    double th = std::acos(d);
    double sa = std::sin((1 - t) * th) / std::sin(th);
    double sb = std::sin(t * th) / std::sin(th);
    return Quat{a.w * sa + b.w * sb, a.x * sa + b.x * sb, a.y * sa + b.y * sb,
                a.z * sa + b.z * sb}
        .normalized();
}

struct RigidPose {
    Quat q;
    Vec3 t;

    Vec3 apply(const Vec3& local) const { return q.to_matrix() * local + t; }
};

struct PoseKey {
    double frame = 0;
    RigidPose pose;
};

struct MotionTrack {
    std::vector<PoseKey> keys;  // sorted by frame

    bool animated() const { return keys.size() > 1; }

    RigidPose pose_at(double frame) const {
        if (keys.empty()) return {};
        if (frame <= keys.front().frame) return keys.front().pose;
        if (frame >= keys.back().frame) return keys.back().pose;
        size_t i = 1;
        while (keys[i].frame < frame) ++i;
        const PoseKey& a = keys[i - 1];
        const PoseKey& b = keys[i];
        double u = (frame - a.frame) / (b.frame - a.frame);
        RigidPose p;
        p.t = a.pose.t * (1 - u) + b.pose.t * u;
        p.q = slerp(a.pose.q, b.pose.q, u);
        return p;
    }

    // clamped central difference of the pose track
    void clamp_range(double f, double& lo, double& hi) const {
        double fmin = keys.empty() ? f : keys.front().frame;
        double fmax = keys.empty() ? f : keys.back().frame;
        lo = std::max(fmin, f - 1.0);
        hi = std::min(fmax, f + 1.0);
        if (hi <= lo) {
            lo = f;
            hi = f;
        }
    }
};

// Affine velocity field v(x) = A x + c of a rigidly moving object at one
// frame, from central (or clamped one-sided) differences over the pose track.
struct VelocityField {
    Mat3 A;
    Vec3 c;
    bool moving = false;

    Vec3 at(const Vec3& world) const { return moving ? A * world + c : Vec3(0); }
};

inline VelocityField velocity_field(const MotionTrack& track, double frame, double dt_frame) {
    VelocityField f;
    if (!track.animated()) return f;
    double lo, hi;
    track.clamp_range(frame, lo, hi);
    if (hi <= lo) return f;
    RigidPose pf = track.pose_at(frame);
    RigidPose pp = track.pose_at(hi);
    RigidPose pm = track.pose_at(lo);
    double inv = 1.0 / ((hi - lo) * dt_frame);
    Mat3 rf_t = pf.q.to_matrix().transpose();
    // x_local = Rf^T (x - tf);  v = (R+ x_local + t+ - R- x_local - t-) * inv
    Mat3 dr = (pp.q.to_matrix() - pm.q.to_matrix()) * inv;
    f.A = dr * rf_t;
    f.c = (pp.t - pm.t) * inv - f.A * pf.t;
    f.moving = true;
    return f;
}

// ---------------------------------------------------------------------------
// camera

struct CameraPose {
    Vec3 position{0, 0, 0};
    Vec3 forward{0, 0, -1};
    Vec3 up{0, 1, 0};
};

struct Camera {
    CameraPose base;
    double fov_y = degrees_to_radians(45);
    int width = 128, height = 128;
    std::vector<std::pair<double, CameraPose>> track;  // optional animation

    CameraPose pose_at(double frame) const {
        if (track.empty()) return base;
        if (frame <= track.front().first) return track.front().second;
        if (frame >= track.back().first) return track.back().second;
        size_t i = 1;
        while (track[i].first < frame) ++i;
        const auto& a = track[i - 1];
        const auto& b = track[i];
        double u = (frame - a.first) / (b.first - a.first);
        CameraPose p;
        p.position = a.second.position * (1 - u) + b.second.position * u;
        p.forward = normalize(a.second.forward * (1 - u) + b.second.forward * u);
        p.up = normalize(a.second.up * (1 - u) + b.second.up * u);
        return p;
    }
};

struct CameraFrame {
    CameraPose pose;
    Vec3 right, up;  // orthonormalized
    double tan_half;
    int width, height;

    static CameraFrame make(const Camera& cam, const CameraPose& pose) {
        CameraFrame f;
        f.pose = pose;
        f.right = normalize(cross(pose.forward, pose.up));
        f.up = cross(f.right, pose.forward);
        f.tan_half = std::tan(cam.fov_y / 2);
        f.width = cam.width;
        f.height = cam.height;
        return f;
    }

    Ray primary_ray(int x, int y) const {
        double aspect = double(width) / double(height);
        double px = (2.0 * (x + 0.5) / width - 1.0) * tan_half * aspect;
        double py = (1.0 - 2.0 * (y + 0.5) / height) * tan_half;
        return {pose.position, normalize(pose.forward + right * px + up * py)};
    }

    // world point -> pixel, or nullopt if behind the camera / off screen
    std::optional<std::pair<int, int>> project(const Vec3& world) const {
        Vec3 d = world - pose.position;
        double z = dot(d, pose.forward);
        if (z <= 0) return std::nullopt;
        double aspect = double(width) / double(height);
        double px = dot(d, right) / z / (tan_half * aspect);
        double py = dot(d, up) / z / tan_half;
        int x = int(std::floor((px + 1.0) * 0.5 * width));
        int y = int(std::floor((1.0 - py) * 0.5 * height));
        if (x < 0 || x >= width || y < 0 || y >= height) return std::nullopt;
        return std::make_pair(x, y);
    }
};

// ---------------------------------------------------------------------------
// scene definition and per-frame snapshot

struct ObjectDef {
    std::string name;
    std::vector<Triangle> local_tris;  // object space
    MotionTrack track;
};

struct SceneDef {
    Camera camera;
    MotionTrack camera_track_aux;  // camera velocities reuse the rigid machinery
    std::vector<Material> materials;
    DeltaLight light;
    std::vector<ObjectDef> objects;
    double dt_frame = 1.0;  // seconds per frame step

    int add_material(const Material& m) {
        materials.push_back(m);
        return int(materials.size()) - 1;
    }
};

// Light subpath vertex for the collimated regime: the beam is traced through
// mirror bounces and merged at the first non-delta hit.
struct LightSubpath {
    bool valid = false;
    Vec3 pos, n;
    int tri = -1, object = -1, material = -1;
    Vec3 wo_light;     // unit, subpath vertex -> previous chain vertex
    Vec3 power;        // beam power after mirror bounces
    double chain_len = 0;  // light origin to the subpath vertex
};

// Immutable per-frame snapshot; safe to share across workers.
struct SceneFrame {
    const SceneDef* def = nullptr;
    double frame = 0;
    std::shared_ptr<const Bvh> bvh;
    CameraFrame cam;
    Vec3 cam_velocity;
    DeltaLight light;
    Vec3 light_velocity;
    LightSubpath lsub;
    std::vector<VelocityField> obj_velocity;

    const Material& material(int id) const { return def->materials[id]; }
    double scene_scale() const { return bvh->scene_diag(); }

    Vec3 velocity_at(int object, const Vec3& world) const {
        if (object < 0 || object >= int(obj_velocity.size())) return Vec3(0);
        return obj_velocity[object].at(world);
    }
    Mat3 velocity_gradient(int object) const {
        if (object < 0 || object >= int(obj_velocity.size()) || !obj_velocity[object].moving)
            return Mat3();
        return obj_velocity[object].A;
    }
    bool any_motion() const {
        for (const auto& v : obj_velocity)
            if (v.moving) return true;
        return norm(cam_velocity) > 0;
    }
};

// Exposed for the velocity unit tests.
inline Vec3 vertex_velocity(const MotionTrack& track, double dt_frame, const Vec3& world,
                            double frame) {
    return velocity_field(track, frame, dt_frame).at(world);
}

inline SceneFrame build_frame(const SceneDef& def, double frame) {
    SceneFrame f;
    f.def = &def;
    f.frame = frame;
    std::vector<Triangle> world;
    f.obj_velocity.resize(def.objects.size());
    for (size_t i = 0; i < def.objects.size(); ++i) {
        const ObjectDef& obj = def.objects[i];
        RigidPose pose = obj.track.pose_at(frame);
        Mat3 rot = pose.q.to_matrix();
        bool moved = obj.track.animated();
        for (const Triangle& t : obj.local_tris) {
            Triangle w = t;
            if (moved || norm(pose.t) > 0) {
                w.v0 = rot * t.v0 + pose.t;
                w.v1 = rot * t.v1 + pose.t;
                w.v2 = rot * t.v2 + pose.t;
                w.n = normalize(rot * t.n);
            }
            w.object = int(i);
            world.push_back(w);
        }
        f.obj_velocity[i] = velocity_field(obj.track, frame, def.dt_frame);
    }
    f.bvh = std::make_shared<Bvh>(std::move(world));
    f.cam = CameraFrame::make(def.camera, def.camera.pose_at(frame));
    if (def.camera.track.size() > 1) {
        // central difference on the camera position track
        double lo = std::max(def.camera.track.front().first, frame - 1.0);
        double hi = std::min(def.camera.track.back().first, frame + 1.0);
        if (hi > lo) {
            Vec3 pp = def.camera.pose_at(hi).position;
            Vec3 pm = def.camera.pose_at(lo).position;
            f.cam_velocity = (pp - pm) / ((hi - lo) * def.dt_frame);
        }
    }
    f.light = def.light;
    f.light_velocity = Vec3(0);

    if (def.light.regime == LightRegime::Collimated) {
        // trace the beam through mirrors, merge at the first non-delta vertex
        Ray r{def.light.position, def.light.direction};
        Vec3 power = def.light.intensity;
        double len = 0;
        for (int bounce = 0; bounce < 16; ++bounce) {
            auto hit = f.bvh->intersect(r);
            if (!hit) break;
            len += hit->t;
            const Triangle& tri = f.bvh->triangle(hit->tri);
            const Material& m = def.materials[tri.material];
            if (m.kind == MatKind::Mirror) {
                Vec3 n = oriented_normal(hit->n, -r.d);
                power *= m.albedo;
                r = {hit->pos, reflect(-r.d, n)};
                continue;
            }
            f.lsub.valid = true;
            f.lsub.pos = hit->pos;
            f.lsub.n = hit->n;
            f.lsub.tri = hit->tri;
            f.lsub.object = tri.object;
            f.lsub.material = tri.material;
            f.lsub.wo_light = -r.d;
            f.lsub.power = power;
            f.lsub.chain_len = len;
            break;
        }
    }
    return f;
}

}  // namespace tofr
