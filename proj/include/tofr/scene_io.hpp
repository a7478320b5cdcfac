#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "scene.hpp"

namespace tofr {

struct ParseError : std::runtime_error {
    int line, col;
    ParseError(int l, int c, const std::string& msg)
        : std::runtime_error(msg), line(l), col(c) {}
};

namespace detail {

struct Lexer {
    std::string src;
    size_t pos = 0;
    int line = 1, col = 1;

    void skip_ws() {
        while (pos < src.size()) {
            char c = src[pos];
            if (c == '#') {
                while (pos < src.size() && src[pos] != '\n') advance();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                advance();
            } else {
                break;
            }
        }
    }
    void advance() {
        if (src[pos] == '\n') {
            line++;
            col = 1;
        } else {
            col++;
        }
        pos++;
    }
    bool eof() {
        skip_ws();
        return pos >= src.size();
    }
    std::string next() {
        skip_ws();
        if (pos >= src.size()) throw ParseError(line, col, "unexpected end of file");
        if (src[pos] == '{' || src[pos] == '}') {
            std::string t(1, src[pos]);
            advance();
            return t;
        }
        std::string t;
        while (pos < src.size() && !std::isspace((unsigned char)src[pos]) && src[pos] != '{' &&
               src[pos] != '}' && src[pos] != '#') {
            t += src[pos];
            advance();
        }
        return t;
    }
    std::string peek() {
        size_t p = pos;
        int l = line, c = col;
        std::string t = eof() ? "" : next();
        pos = p;
        line = l;
        col = c;
        return t;
    }
    double number() {
        skip_ws();
        int l = line, c = col;
        std::string t = next();
        char* end = nullptr;
        double v = std::strtod(t.c_str(), &end);
        if (end == t.c_str() || *end != '\0')
            throw ParseError(l, c, "expected a number, got '" + t + "'");
        return v;
    }
    Vec3 vec3() {
        double x = number(), y = number(), z = number();
        return {x, y, z};
    }
    void expect(const std::string& tok) {
        skip_ws();
        int l = line, c = col;
        std::string t = next();
        if (t != tok) throw ParseError(l, c, "expected '" + tok + "', got '" + t + "'");
    }
    [[noreturn]] void fail(const std::string& msg) { throw ParseError(line, col, msg); }
};

}  // namespace detail

// Minimal wavefront-style triangle list: "v x y z" and "f i j k ..." records
// (1-based indices, polygons fan-triangulated). Everything else is ignored.
inline std::vector<Triangle> load_obj_triangles(const std::string& path, int material) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open mesh file " + path);
    std::vector<Vec3> verts;
    std::vector<Triangle> tris;
    std::string word;
    std::string lbuf;
    while (std::getline(f, lbuf)) {
        std::istringstream ls(lbuf);
        if (!(ls >> word)) continue;
        if (word == "v") {
            Vec3 v;
            ls >> v.x >> v.y >> v.z;
            verts.push_back(v);
        } else if (word == "f") {
            std::vector<int> idx;
            std::string tok;
            while (ls >> tok) {
                size_t slash = tok.find('/');
                int i = std::stoi(slash == std::string::npos ? tok : tok.substr(0, slash));
                if (i < 0) i = int(verts.size()) + 1 + i;
                idx.push_back(i - 1);
            }
            for (size_t k = 2; k < idx.size(); ++k)
                tris.push_back(
                    make_triangle(verts.at(idx[0]), verts.at(idx[k - 1]), verts.at(idx[k]),
                                  material));
        }
    }
    return tris;
}

// Scene description: key/value blocks for camera, light, materials, objects
// and animation tracks. Positions are scene units (meters, c = 1).
inline SceneDef parse_scene(const std::string& text, const std::string& base_dir = ".") {
    detail::Lexer lx;
    lx.src = text;
    SceneDef def;
    std::map<std::string, int> mat_ids;
    bool have_light = false;

    auto parse_track = [&](MotionTrack& track) {
        lx.expect("{");
        while (lx.peek() != "}") {
            lx.expect("frame");
            PoseKey key;
            key.frame = lx.number();
            for (std::string w = lx.peek(); w == "translate" || w == "rotate"; w = lx.peek()) {
                lx.next();
                if (w == "translate") {
                    key.pose.t = lx.vec3();
                } else {
                    lx.expect("axis");
                    Vec3 axis = lx.vec3();
                    lx.expect("deg");
                    double deg = lx.number();
                    key.pose.q = Quat::axis_angle(axis, degrees_to_radians(deg));
                }
            }
            track.keys.push_back(key);
        }
        lx.expect("}");
    };

    while (!lx.eof()) {
        int l = lx.line, c = lx.col;
        std::string section = lx.next();
        if (section == "camera") {
            lx.expect("{");
            while (lx.peek() != "}") {
                std::string key = lx.next();
                if (key == "position")
                    def.camera.base.position = lx.vec3();
                else if (key == "forward")
                    def.camera.base.forward = normalize(lx.vec3());
                else if (key == "up")
                    def.camera.base.up = normalize(lx.vec3());
                else if (key == "fov_deg")
                    def.camera.fov_y = degrees_to_radians(lx.number());
                else if (key == "resolution") {
                    def.camera.width = int(lx.number());
                    def.camera.height = int(lx.number());
                } else if (key == "track") {
                    lx.expect("{");
                    while (lx.peek() != "}") {
                        lx.expect("frame");
                        double fi = lx.number();
                        CameraPose p = def.camera.base;
                        for (std::string w = lx.peek();
                             w == "position" || w == "forward" || w == "up"; w = lx.peek()) {
                            lx.next();
                            if (w == "position")
                                p.position = lx.vec3();
                            else if (w == "forward")
                                p.forward = normalize(lx.vec3());
                            else
                                p.up = normalize(lx.vec3());
                        }
                        def.camera.track.emplace_back(fi, p);
                    }
                    lx.expect("}");
                } else {
                    lx.fail("unknown camera key '" + key + "'");
                }
            }
            lx.expect("}");
        } else if (section == "material") {
            std::string name = lx.next();
            Material m;
            lx.expect("{");
            while (lx.peek() != "}") {
                std::string key = lx.next();
                if (key == "kind") {
                    std::string kind = lx.next();
                    if (kind == "diffuse")
                        m.kind = MatKind::Diffuse;
                    else if (kind == "glossy")
                        m.kind = MatKind::Glossy;
                    else if (kind == "mirror")
                        m.kind = MatKind::Mirror;
                    else
                        lx.fail("unknown material kind '" + kind + "'");
                } else if (key == "albedo")
                    m.albedo = lx.vec3();
                else if (key == "roughness")
                    m.roughness = lx.number();
                else
                    lx.fail("unknown material key '" + key + "'");
            }
            lx.expect("}");
            mat_ids[name] = def.add_material(m);
        } else if (section == "light") {
            lx.expect("{");
            while (lx.peek() != "}") {
                std::string key = lx.next();
                if (key == "regime") {
                    std::string r = lx.next();
                    if (r == "wide")
                        def.light.regime = LightRegime::Wide;
                    else if (r == "collimated")
                        def.light.regime = LightRegime::Collimated;
                    else
                        lx.fail("unknown light regime '" + r + "'");
                } else if (key == "position")
                    def.light.position = lx.vec3();
                else if (key == "direction")
                    def.light.direction = normalize(lx.vec3());
                else if (key == "cone_deg")
                    def.light.cone_half_angle = degrees_to_radians(lx.number());
                else if (key == "intensity")
                    def.light.intensity = lx.vec3();
                else
                    lx.fail("unknown light key '" + key + "'");
            }
            lx.expect("}");
            if (def.light.regime == LightRegime::Collimated &&
                def.light.cone_half_angle > 1e-3)
                def.light.cone_half_angle = 1e-3;  // collimated regime bound
            have_light = true;
        } else if (section == "dt_frame") {
            def.dt_frame = lx.number();
        } else if (section == "object") {
            ObjectDef obj;
            obj.name = lx.next();
            int mat = 0;
            lx.expect("{");
            while (lx.peek() != "}") {
                std::string key = lx.next();
                if (key == "material") {
                    std::string name = lx.next();
                    auto it = mat_ids.find(name);
                    if (it == mat_ids.end()) lx.fail("unknown material '" + name + "'");
                    mat = it->second;
                } else if (key == "tri") {
                    Vec3 a = lx.vec3(), b = lx.vec3(), cc = lx.vec3();
                    obj.local_tris.push_back(make_triangle(a, b, cc, mat));
                } else if (key == "quad") {
                    Vec3 a = lx.vec3(), b = lx.vec3(), cc = lx.vec3(), d = lx.vec3();
                    obj.local_tris.push_back(make_triangle(a, b, cc, mat));
                    obj.local_tris.push_back(make_triangle(a, cc, d, mat));
                } else if (key == "obj") {
                    std::string rel = lx.next();
                    for (Triangle& t : load_obj_triangles(base_dir + "/" + rel, mat))
                        obj.local_tris.push_back(t);
                } else if (key == "track") {
                    parse_track(obj.track);
                } else {
                    lx.fail("unknown object key '" + key + "'");
                }
            }
            lx.expect("}");
            def.objects.push_back(std::move(obj));
        } else {
            throw ParseError(l, c, "unknown section '" + section + "'");
        }
    }
    if (def.materials.empty()) def.add_material(Material{});
    if (!have_light) throw ParseError(lx.line, lx.col, "scene has no light");
    if (def.objects.empty()) throw ParseError(lx.line, lx.col, "scene has no objects");
    return def;
}

inline SceneDef load_scene(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open scene file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string dir = ".";
    size_t slash = path.find_last_of('/');
    if (slash != std::string::npos) dir = path.substr(0, slash);
    return parse_scene(ss.str(), dir);
}

}  // namespace tofr
