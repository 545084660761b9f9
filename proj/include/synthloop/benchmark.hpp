#pragma once
// The built-in desk benchmark: four parametric vehicle classes, each with a
// detailed reference mesh (captured as "real" imagery, with sensor noise)
// and a coarse editable mesh (rendered as synthetic imagery).
//
// The editable meshes carry deliberate authoring mistakes, and one pair of
// classes shares a bright rear hotspot. Both give the curation loop real
// confusions to find and fix.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/rng.hpp"
#include "synthloop/scene.hpp"

namespace synthloop {

struct VehicleShape {
    std::string kind;  // boxtruck | wedgecar | turrettank | flatcarrier
    std::map<std::string, Material> region_materials;
    int detail = 1;                // subdivisions per box side
    double emission_jitter = 0.0;  // per-face gaussian sd
};

struct ClassSpec {
    std::string name;
    std::optional<VehicleShape> reference;
    std::optional<VehicleShape> editable;
};

struct ConfusableFeature {
    std::string class_a;
    std::string class_b;
    std::string region;
    double emission = 0.95;
};

struct SensorNoise {
    double sigma = 2.0 / 255.0;  // radiance units
    double fixed_pattern_amplitude = 1.0 / 255.0;
    std::uint64_t pattern_seed = 0x5EED;
};

struct BenchmarkSpec {
    std::vector<ClassSpec> classes;
    std::vector<ConfusableFeature> confusables;
    SensorNoise noise;
};

struct ClassAssets {
    std::string name;
    MeshModel reference;
    MeshModel editable;
    friend bool operator==(const ClassAssets&, const ClassAssets&) = default;
};

struct BenchmarkBundle {
    std::vector<ClassAssets> classes;
    std::vector<ConfusableFeature> confusables;
    SensorNoise noise;
    std::uint64_t seed = 0;

    std::vector<std::string> class_names() const {
        std::vector<std::string> out;
        for (const auto& c : classes) out.push_back(c.name);
        return out;
    }
    int class_index(const std::string& name) const {
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i].name == name) return static_cast<int>(i);
        throw Error(ErrorCode::not_found, "unknown class '" + name + "'", "class");
    }
};

namespace shapes {

class MeshBuilder {
public:
    MeshBuilder(const VehicleShape& shape, std::string class_id) : shape_(shape) {
        mesh_.class_id = std::move(class_id);
    }

    Material material(const std::string& tag) const {
        auto it = shape_.region_materials.find(tag);
        if (it == shape_.region_materials.end())
            throw Error(ErrorCode::invalid_argument, "shape '" + shape_.kind + "' has no material for region '" + tag + "'");
        return it->second;
    }

    // Quad p0..p3 in counterclockwise order seen from outside, split into
    // detail x detail sub-quads.
    void quad(Vec3 p0, Vec3 p1, Vec3 p2, Vec3 p3, const std::string& tag, int detail = -1) {
        const int n = std::max(1, detail < 0 ? shape_.detail : detail);
        auto lerp = [&](double s, double t) {
            const Vec3 a = p0 + s * (p1 - p0);
            const Vec3 b = p3 + s * (p2 - p3);
            return a + t * (b - a);
        };
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double s0 = double(i) / n, s1 = double(i + 1) / n;
                const double t0 = double(j) / n, t1 = double(j + 1) / n;
                const int a = vertex(lerp(s0, t0)), b = vertex(lerp(s1, t0));
                const int c = vertex(lerp(s1, t1)), d = vertex(lerp(s0, t1));
                face(a, b, c, tag);
                face(a, c, d, tag);
            }
    }

    // Axis-aligned box; tags[] in order front(+x), rear(-x), left(+y), right(-y), top(+z).
    // Bottom is omitted: it sits on the ground and is never visible.
    void box(Vec3 lo, Vec3 hi, const std::array<std::string, 5>& tags) {
        const Vec3 c[8] = {{lo.x, lo.y, lo.z}, {hi.x, lo.y, lo.z}, {hi.x, hi.y, lo.z}, {lo.x, hi.y, lo.z},
                           {lo.x, lo.y, hi.z}, {hi.x, lo.y, hi.z}, {hi.x, hi.y, hi.z}, {lo.x, hi.y, hi.z}};
        quad(c[1], c[2], c[6], c[5], tags[0]);  // +x
        quad(c[3], c[0], c[4], c[7], tags[1]);  // -x
        quad(c[2], c[3], c[7], c[6], tags[2]);  // +y
        quad(c[0], c[1], c[5], c[4], tags[3]);  // -y
        quad(c[4], c[5], c[6], c[7], tags[4]);  // +z
    }

    void box(Vec3 lo, Vec3 hi, const std::string& tag) { box(lo, hi, {tag, tag, tag, tag, tag}); }

    // Prism along x from x0 to x1 with a convex cross-section given as (y, z)
    // points counterclockwise seen from +x. Facets take `tag`, caps take `cap_tag`.
    void prism(double x0, double x1, const std::vector<std::pair<double, double>>& section, const std::string& tag,
               const std::string& cap_tag) {
        const size_t n = section.size();
        for (size_t i = 0; i + 1 < n; ++i) {
            const auto [y0, z0] = section[i];
            const auto [y1, z1] = section[i + 1];
            quad({x1, y0, z0}, {x1, y1, z1}, {x0, y1, z1}, {x0, y0, z0}, tag);
        }
        // caps (fan triangulation of the convex section)
        for (size_t i = 1; i + 1 < n; ++i) {
            const auto [ya, za] = section[0];
            const auto [yb, zb] = section[i];
            const auto [yc, zc] = section[i + 1];
            face(vertex({x1, ya, za}), vertex({x1, yb, zb}), vertex({x1, yc, zc}), cap_tag);
            face(vertex({x0, ya, za}), vertex({x0, yc, zc}), vertex({x0, yb, zb}), cap_tag);
        }
    }

    MeshModel finish(std::uint64_t jitter_seed) {
        if (shape_.emission_jitter > 0) {
            Rng rng(jitter_seed);
            for (auto& f : mesh_.faces)
                f.material.emission = std::clamp(f.material.emission + rng.normal(0.0, shape_.emission_jitter), 0.0, 1.0);
        }
        return canonicalize(std::move(mesh_));
    }

private:
    int vertex(Vec3 p) {
        mesh_.vertices.push_back(p);
        return static_cast<int>(mesh_.vertices.size()) - 1;
    }
    void face(int a, int b, int c, const std::string& tag) {
        mesh_.faces.push_back({{a, b, c}, material(tag), tag});
    }

    const VehicleShape& shape_;
    MeshModel mesh_;
};

inline void build_boxtruck(MeshBuilder& b) {
    // cargo body, cab, engine cover at the rear underside, wheels
    b.box({-3.0, -1.2, 0.5}, {1.3, 1.2, 3.0}, {"hull", "hull", "hull", "hull", "hull"});
    b.box({1.3, -1.1, 0.5}, {3.0, 1.1, 2.3}, {"bonnet", "hull", "hull", "hull", "bonnet"});
    b.box({-3.1, -0.8, 0.5}, {-3.0, 0.8, 1.1}, {"rear_engine", "rear_engine", "rear_engine", "rear_engine", "rear_engine"});
    for (double x : {-2.0, 2.0})
        b.box({x - 0.5, -1.25, 0.0}, {x + 0.5, 1.25, 0.9}, "wheel_arch");
}

inline void build_wedgecar(MeshBuilder& b) {
    // lower body with a hot bonnet, rounded cabin hull
    b.box({-2.4, -0.95, 0.3}, {0.8, 0.95, 0.9}, "hull");
    b.box({0.8, -0.95, 0.3}, {2.4, 0.95, 0.85}, {"bonnet", "hull", "hull", "hull", "bonnet"});
    std::vector<std::pair<double, double>> section;
    const int facets = 6;
    for (int i = 0; i <= facets; ++i) {
        const double a = -M_PI / 2 + M_PI * i / facets;  // right side, over the roof, left side
        section.emplace_back(0.9 * std::sin(a), 0.9 + 0.8 * std::cos(a));
    }
    // sin runs -0.9..0.9 (right to left), cos gives the arc height
    b.prism(-2.2, 0.7, section, "hull", "hull");
    for (double x : {-1.5, 1.5})
        b.box({x - 0.4, -1.0, 0.0}, {x + 0.4, 1.0, 0.7}, "wheel_arch");
}

inline void build_turrettank(MeshBuilder& b) {
    b.box({-3.2, -1.5, 0.5}, {3.2, 1.5, 1.8}, {"hull", "rear_engine", "hull", "hull", "hull"});
    b.box({-3.2, -1.2, 1.8}, {-2.0, 1.2, 2.5}, "rear_engine");  // raised engine deck, level with the turret
    b.box({-0.9, -1.1, 1.8}, {1.1, 1.1, 2.5}, "turret");
    b.box({1.1, -0.5, 2.1}, {3.3, -0.3, 2.25}, "turret");
    b.box({1.1, 0.3, 2.1}, {3.3, 0.5, 2.25}, "turret");
    b.box({-3.0, -1.6, 0.0}, {3.0, 1.6, 0.6}, "wheel_arch");
}

inline void build_flatcarrier(MeshBuilder& b) {
    b.box({-3.6, -1.4, 0.5}, {2.8, 1.4, 2.0}, {"hull", "rear_engine", "hull", "hull", "hull"});
    b.prism(2.8, 3.6, {{-1.4, 0.5}, {1.4, 0.5}, {1.4, 1.4}, {-1.4, 1.4}}, "hull", "hull");
    b.box({-3.6, -1.3, 2.0}, {-2.4, 1.3, 2.6}, "rear_engine");
    for (double x : {-2.6, -0.9, 0.9, 2.6})
        b.box({x - 0.45, -1.5, 0.0}, {x + 0.45, 1.5, 0.8}, "wheel_arch");
}

inline MeshModel build(const VehicleShape& shape, const std::string& class_id, std::uint64_t jitter_seed) {
    MeshBuilder b(shape, class_id);
    if (shape.kind == "boxtruck") build_boxtruck(b);
    else if (shape.kind == "wedgecar") build_wedgecar(b);
    else if (shape.kind == "turrettank") build_turrettank(b);
    else if (shape.kind == "flatcarrier") build_flatcarrier(b);
    else throw Error(ErrorCode::invalid_argument, "unknown vehicle kind '" + shape.kind + "'", "kind");
    return b.finish(jitter_seed);
}

}  // namespace shapes

inline BenchmarkSpec default_benchmark_spec() {
    auto mat = [](double e, double r, double s) { return Material{e, r, s}; };
    BenchmarkSpec spec;

    VehicleShape truck{"boxtruck",
                       {{"hull", mat(0.30, 0.5, 0.2)},
                        {"bonnet", mat(0.55, 0.5, 0.2)},
                        {"rear_engine", mat(0.50, 0.4, 0.1)},
                        {"wheel_arch", mat(0.62, 0.2, 0.05)}}};
    VehicleShape car{"wedgecar",
                     {{"hull", mat(0.32, 0.5, 0.1)}, {"bonnet", mat(0.90, 0.4, 0.1)}, {"wheel_arch", mat(0.60, 0.2, 0.05)}}};
    VehicleShape tank{"turrettank",
                      {{"hull", mat(0.34, 0.5, 0.1)},
                       {"turret", mat(0.28, 0.5, 0.1)},
                       {"rear_engine", mat(0.95, 0.3, 0.05)},
                       {"wheel_arch", mat(0.60, 0.2, 0.05)}}};
    VehicleShape carrier{"flatcarrier",
                         {{"hull", mat(0.34, 0.5, 0.1)},
                          {"rear_engine", mat(0.95, 0.3, 0.05)},
                          {"wheel_arch", mat(0.60, 0.2, 0.05)}}};

    auto reference = [](VehicleShape s) {
        s.detail = 2;
        s.emission_jitter = 0.03;
        return s;
    };
    // Editable meshes as first authored: the car hull was given a glossy
    // finish and the carrier exhaust was under-heated.
    VehicleShape car_edit = car;
    car_edit.region_materials["hull"].smoothness = 0.9;
    VehicleShape carrier_edit = carrier;
    carrier_edit.region_materials["rear_engine"].emission = 0.5;

    spec.classes = {{"boxtruck", reference(truck), truck},
                    {"wedgecar", reference(car), car_edit},
                    {"turrettank", reference(tank), tank},
                    {"flatcarrier", reference(carrier), carrier_edit}};
    spec.confusables = {{"turrettank", "flatcarrier", "rear_engine", 0.95}};
    return spec;
}

inline std::vector<std::string> benchmark_violations(const BenchmarkSpec& spec) {
    std::vector<std::string> out;
    if (spec.classes.size() < 4) out.push_back("benchmark needs at least 4 classes");
    std::set<std::string> names;
    for (const auto& c : spec.classes) {
        if (!valid_token(c.name)) out.push_back("class name must be a non-empty token");
        if (!names.insert(c.name).second) out.push_back("duplicate class '" + c.name + "'");
        if (!c.reference) out.push_back("class '" + c.name + "' has no reference mesh");
        if (!c.editable) out.push_back("class '" + c.name + "' has no editable mesh");
    }
    for (const auto& f : spec.confusables) {
        if (!names.count(f.class_a) || !names.count(f.class_b))
            out.push_back("confusable feature names unknown class pair " + f.class_a + "/" + f.class_b);
        if (f.class_a == f.class_b) out.push_back("confusable feature needs two distinct classes");
        if (!(f.emission >= 0.9 && f.emission <= 1.0)) out.push_back("confusable hotspot emission must be in [0.9, 1]");
    }
    if (!(spec.noise.sigma >= 0)) out.push_back("noise sigma must be >= 0");
    return out;
}

// Deterministic under `seed`. The shared hotspot is written into the
// reference meshes of both declared classes at the declared region.
inline BenchmarkBundle make_benchmark(const BenchmarkSpec& spec, std::uint64_t seed) {
    auto violations = benchmark_violations(spec);
    if (!violations.empty()) throw ValidationError(std::move(violations), "benchmark");

    BenchmarkBundle bundle;
    bundle.seed = seed;
    bundle.noise = spec.noise;
    bundle.confusables = spec.confusables;
    for (size_t i = 0; i < spec.classes.size(); ++i) {
        const auto& c = spec.classes[i];
        VehicleShape ref = *c.reference;
        for (const auto& f : spec.confusables)
            if (f.class_a == c.name || f.class_b == c.name) {
                if (!ref.region_materials.count(f.region))
                    throw ValidationError({"class '" + c.name + "' has no region '" + f.region + "' for the shared hotspot"});
                ref.region_materials[f.region].emission = f.emission;
            }
        ClassAssets assets;
        assets.name = c.name;
        assets.reference = shapes::build(ref, c.name, derive_seed(seed, {i, 1}));
        assets.editable = shapes::build(*c.editable, c.name, derive_seed(seed, {i, 2}));
        if (assets.reference.faces.size() <= assets.editable.faces.size())
            throw ValidationError({"class '" + c.name + "' reference mesh must have more faces than its editable mesh"});
        // Jitter must not push the declared hotspot below its floor.
        for (const auto& f : spec.confusables)
            if (f.class_a == c.name || f.class_b == c.name)
                for (auto& face : assets.reference.faces)
                    if (face.region_tag == f.region) face.material.emission = std::max(face.material.emission, f.emission);
        bundle.classes.push_back(std::move(assets));
    }
    return bundle;
}

}  // namespace synthloop
