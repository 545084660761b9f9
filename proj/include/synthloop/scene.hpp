#pragma once
// Editable vehicle meshes with per-face materials, the line-oriented mesh
// file format, and placement of a mesh into a camera scene.
//
// Vehicle-local frame: +x forward, +y left, +z up, origin at the
// ground-contact centroid. Orientation 0 means the front faces the camera;
// positive orientation turns the vehicle counterclockwise seen from above.

#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/geometry.hpp"
#include "synthloop/core/text.hpp"

namespace synthloop {

struct Material {
    double emission = 0.0;
    double reflectance = 0.0;
    double smoothness = 0.0;

    friend bool operator==(const Material&, const Material&) = default;
};

inline bool in_unit_range(double v) { return v >= 0.0 && v <= 1.0; }

inline std::vector<std::string> material_violations(const Material& m, const std::string& where) {
    std::vector<std::string> out;
    if (!in_unit_range(m.emission)) out.push_back(where + ".emission " + text::fmt9(m.emission) + " outside [0,1]");
    if (!in_unit_range(m.reflectance))
        out.push_back(where + ".reflectance " + text::fmt9(m.reflectance) + " outside [0,1]");
    if (!in_unit_range(m.smoothness))
        out.push_back(where + ".smoothness " + text::fmt9(m.smoothness) + " outside [0,1]");
    return out;
}

struct Face {
    std::array<int, 3> vertex_indices{};
    Material material;
    std::string region_tag;

    friend bool operator==(const Face&, const Face&) = default;
};

struct MeshModel {
    std::string class_id;
    std::vector<Vec3> vertices;
    std::vector<Face> faces;
    std::string version_label = "v0";

    friend bool operator==(const MeshModel&, const MeshModel&) = default;

    std::set<std::string> region_tags() const {
        std::set<std::string> tags;
        for (const auto& f : faces) tags.insert(f.region_tag);
        return tags;
    }
};

// Labels follow the v0 / vR / vD / v(R+D) scheme: a leading 'v' and no whitespace.
inline bool valid_version_label(const std::string& label) {
    static const std::regex re(R"(^v[A-Za-z0-9()+_.\-]+$)");
    return std::regex_match(label, re);
}

inline bool valid_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (std::isspace(static_cast<unsigned char>(c))) return false;
    return true;
}

inline std::vector<std::string> mesh_violations(const MeshModel& m) {
    std::vector<std::string> out;
    if (!valid_token(m.class_id)) out.push_back("class_id must be a non-empty token");
    if (!valid_version_label(m.version_label)) out.push_back("version_label '" + m.version_label + "' is not v<label>");
    if (m.vertices.size() < 4) out.push_back("mesh needs at least 4 vertices, has " + std::to_string(m.vertices.size()));
    if (m.faces.size() < 4) out.push_back("mesh needs at least 4 faces, has " + std::to_string(m.faces.size()));
    for (size_t i = 0; i < m.vertices.size(); ++i) {
        const auto& v = m.vertices[i];
        if (!std::isfinite(v.x) || !std::isfinite(v.y) || !std::isfinite(v.z))
            out.push_back("vertex " + std::to_string(i) + " is not finite");
    }
    const int nv = static_cast<int>(m.vertices.size());
    for (size_t i = 0; i < m.faces.size(); ++i) {
        const auto& f = m.faces[i];
        const std::string where = "face " + std::to_string(i);
        const auto& idx = f.vertex_indices;
        for (int k : idx)
            if (k < 0 || k >= nv) out.push_back(where + " vertex index " + std::to_string(k) + " out of bounds");
        if (idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2])
            out.push_back(where + " has repeated vertex indices");
        if (!valid_token(f.region_tag)) out.push_back(where + " region_tag must be a non-empty token");
        auto mv = material_violations(f.material, where);
        out.insert(out.end(), mv.begin(), mv.end());
    }
    return out;
}

inline void validate(const MeshModel& m) {
    auto v = mesh_violations(m);
    if (!v.empty()) throw ValidationError(std::move(v), "mesh");
}

// Rounds every numeric field to the nine significant digits the file format
// stores, so that save -> load is the identity on the result.
inline MeshModel canonicalize(MeshModel m) {
    for (auto& v : m.vertices) v = {text::round9(v.x), text::round9(v.y), text::round9(v.z)};
    for (auto& f : m.faces) {
        f.material.emission = text::round9(f.material.emission);
        f.material.reflectance = text::round9(f.material.reflectance);
        f.material.smoothness = text::round9(f.material.smoothness);
    }
    return m;
}

inline std::string serialize_mesh(const MeshModel& m) {
    validate(m);
    std::string out = "MESHv1 " + m.class_id + " " + m.version_label + "\n";
    for (const auto& v : m.vertices)
        out += "v " + text::fmt9(v.x) + " " + text::fmt9(v.y) + " " + text::fmt9(v.z) + "\n";
    for (const auto& f : m.faces) {
        out += "f " + std::to_string(f.vertex_indices[0]) + " " + std::to_string(f.vertex_indices[1]) + " " +
               std::to_string(f.vertex_indices[2]) + " " + text::fmt9(f.material.emission) + " " +
               text::fmt9(f.material.reflectance) + " " + text::fmt9(f.material.smoothness) + " " + f.region_tag +
               "\n";
    }
    return out;
}

inline MeshModel parse_mesh(const std::string& content) {
    MeshModel m;
    bool header = false;
    int line_no = 0;
    for (const auto& line : text::lines(content)) {
        ++line_no;
        auto tok = text::split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        if (!header) {
            if (tok[0] != "MESHv1") throw ParseError(line_no, "header", "expected 'MESHv1 <class_id> <version_label>'");
            if (tok.size() != 3) throw ParseError(line_no, "header", "expected 3 tokens, got " + std::to_string(tok.size()));
            m.class_id = tok[1];
            m.version_label = tok[2];
            header = true;
            continue;
        }
        if (tok[0] == "v") {
            if (tok.size() != 4) throw ParseError(line_no, "v", "expected 'v x y z'");
            double c[3];
            static const char* names[] = {"x", "y", "z"};
            for (int k = 0; k < 3; ++k)
                if (!text::parse_double(tok[k + 1], c[k])) throw ParseError(line_no, names[k], "not a number: " + tok[k + 1]);
            m.vertices.push_back({c[0], c[1], c[2]});
        } else if (tok[0] == "f") {
            if (tok.size() != 8)
                throw ParseError(line_no, "f", "expected 'f i j k emission reflectance smoothness region_tag'");
            Face f;
            static const char* inames[] = {"i", "j", "k"};
            for (int k = 0; k < 3; ++k) {
                long long v;
                if (!text::parse_long(tok[k + 1], v)) throw ParseError(line_no, inames[k], "not an integer: " + tok[k + 1]);
                f.vertex_indices[k] = static_cast<int>(v);
            }
            if (!text::parse_double(tok[4], f.material.emission)) throw ParseError(line_no, "emission", "not a number");
            if (!text::parse_double(tok[5], f.material.reflectance)) throw ParseError(line_no, "reflectance", "not a number");
            if (!text::parse_double(tok[6], f.material.smoothness)) throw ParseError(line_no, "smoothness", "not a number");
            f.region_tag = tok[7];
            m.faces.push_back(std::move(f));
        } else {
            throw ParseError(line_no, "record", "unknown record type '" + tok[0] + "'");
        }
    }
    if (!header) throw ParseError(line_no, "header", "missing MESHv1 header");
    validate(m);
    return m;
}

inline MeshModel load_mesh(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "mesh file not found: " + path.string());
    return parse_mesh(text::read_file(path.string()));
}

inline void save_mesh(const MeshModel& mesh, const std::filesystem::path& path) {
    const std::string content = serialize_mesh(mesh);  // validates before touching the file
    text::write_file(path.string(), content);
}

// ---------------------------------------------------------------------------
// Scene placement

struct SceneConfig {
    double vehicle_orientation = 0.0;  // degrees, normalized to [0, 360)
    double range = 1000.0;             // metres
    double camera_elevation = 2.0;     // degrees
    double ambient_level = 0.3;
    Vec3 light_direction = {0.0, 0.0, 1.0};
    int image_height = 512;
    int image_width = 640;
    double lateral_offset = 0.0;  // metres, along world +y
    double focal_px = 40000.0;
    double aim_height = 1.2;  // metres above ground the optical axis passes through
};

inline double normalize_degrees(double deg) {
    double d = std::fmod(deg, 360.0);
    if (d < 0) d += 360.0;
    if (d >= 360.0) d -= 360.0;
    return d;
}

inline SceneConfig validated(SceneConfig c) {
    std::vector<std::string> v;
    if (!std::isfinite(c.vehicle_orientation)) v.push_back("vehicle_orientation must be finite");
    if (!(c.range > 0)) v.push_back("range must be > 0");
    if (!in_unit_range(c.ambient_level)) v.push_back("ambient_level outside [0,1]");
    if (std::abs(norm(c.light_direction) - 1.0) > 1e-6) v.push_back("light_direction must be a unit vector");
    if (c.image_height <= 0 || c.image_width <= 0) v.push_back("image_size must be positive");
    if (!(c.focal_px > 0)) v.push_back("focal_px must be > 0");
    if (!(c.camera_elevation > -90 && c.camera_elevation < 90)) v.push_back("camera_elevation must be in (-90, 90)");
    if (!v.empty()) throw ValidationError(std::move(v), "scene_config");
    c.vehicle_orientation = normalize_degrees(c.vehicle_orientation);
    return c;
}

// Pinhole camera; pixel (0,0) has its top-left corner at image coordinate (0,0).
struct Camera {
    Vec3 position;
    Vec3 forward, right, up;
    double focal_px = 1.0;
    int height = 0, width = 0;

    struct Projection {
        double u, v, depth;
    };

    Projection project(Vec3 p) const {
        const Vec3 d = p - position;
        const double z = dot(d, forward);
        return {width * 0.5 + focal_px * dot(d, right) / z, height * 0.5 - focal_px * dot(d, up) / z, z};
    }

    // Unit ray direction through image point (u, v).
    Vec3 ray(double u, double v) const {
        const double x = (u - width * 0.5) / focal_px;
        const double y = (height * 0.5 - v) / focal_px;
        return normalized(forward + x * right + y * up);
    }
};

inline Camera make_camera(const SceneConfig& c) {
    const double e = c.camera_elevation * M_PI / 180.0;
    const Vec3 aim{0.0, 0.0, c.aim_height};
    Camera cam;
    cam.position = aim + c.range * Vec3{std::cos(e), 0.0, std::sin(e)};
    cam.forward = normalized(aim - cam.position);
    cam.right = normalized(cross(cam.forward, Vec3{0, 0, 1}));
    cam.up = cross(cam.right, cam.forward);
    cam.focal_px = c.focal_px;
    cam.height = c.image_height;
    cam.width = c.image_width;
    return cam;
}

struct WorldTriangle {
    std::array<Vec3, 3> v;
    Material material;
    int face_index = -1;
};

struct PlacedScene {
    SceneConfig config;
    Camera camera;
    std::vector<WorldTriangle> triangles;  // empty when no vehicle is present
    bool has_vehicle = false;
};

inline Vec3 place_point(Vec3 local, const SceneConfig& c) {
    return rotate_z(local, c.vehicle_orientation) + Vec3{0.0, c.lateral_offset, 0.0};
}

inline PlacedScene place_vehicle(const MeshModel& mesh, const SceneConfig& config) {
    validate(mesh);
    PlacedScene s;
    s.config = validated(config);
    s.camera = make_camera(s.config);
    s.has_vehicle = true;
    s.triangles.reserve(mesh.faces.size());
    for (size_t i = 0; i < mesh.faces.size(); ++i) {
        const auto& f = mesh.faces[i];
        WorldTriangle t;
        for (int k = 0; k < 3; ++k) t.v[k] = place_point(mesh.vertices[f.vertex_indices[k]], s.config);
        t.material = f.material;
        t.face_index = static_cast<int>(i);
        s.triangles.push_back(t);
    }
    return s;
}

inline PlacedScene place_empty(const SceneConfig& config) {
    PlacedScene s;
    s.config = validated(config);
    s.camera = make_camera(s.config);
    return s;
}

}  // namespace synthloop
