#pragma once
// Material edits on editable meshes, the append-only version store, ray
// projection of saliency onto mesh faces, and synthetic-split regeneration.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/dataset.hpp"
#include "synthloop/scene.hpp"
#include "synthloop/xai.hpp"

namespace synthloop {

enum class ActionKind { set_smoothness, scale_emission, set_reflectance };
enum class ModificationKind { reinforcing, disruptive };
enum class SelectorKind { region, faces, projection };

inline const char* to_string(ActionKind a) {
    switch (a) {
        case ActionKind::set_smoothness: return "set_smoothness";
        case ActionKind::scale_emission: return "scale_emission";
        case ActionKind::set_reflectance: return "set_reflectance";
    }
    return "?";
}
inline const char* to_string(ModificationKind k) { return k == ModificationKind::reinforcing ? "reinforcing" : "disruptive"; }
inline const char* to_string(SelectorKind k) {
    return k == SelectorKind::region ? "region" : k == SelectorKind::faces ? "faces" : "projection";
}

inline ActionKind parse_action(const std::string& s) {
    for (auto a : {ActionKind::set_smoothness, ActionKind::scale_emission, ActionKind::set_reflectance})
        if (s == to_string(a)) return a;
    throw Error(ErrorCode::invalid_argument,
                "action must be set_smoothness|scale_emission|set_reflectance, got '" + s + "'", "action");
}
inline ModificationKind parse_modification_kind(const std::string& s) {
    if (s == "reinforcing") return ModificationKind::reinforcing;
    if (s == "disruptive") return ModificationKind::disruptive;
    throw Error(ErrorCode::invalid_argument, "kind must be reinforcing|disruptive, got '" + s + "'", "kind");
}
inline SelectorKind parse_selector_kind(const std::string& s) {
    for (auto k : {SelectorKind::region, SelectorKind::faces, SelectorKind::projection})
        if (s == to_string(k)) return k;
    throw Error(ErrorCode::invalid_argument, "selector must be region|faces|projection, got '" + s + "'", "selector");
}

struct FaceSelector {
    SelectorKind kind = SelectorKind::region;
    std::vector<std::string> regions;
    std::vector<int> faces;  // faces and projection selectors
    bool operator==(const FaceSelector&) const = default;
};

struct ModificationSpec {
    std::string target_class;
    FaceSelector selector;
    ActionKind action = ActionKind::set_smoothness;
    double value = 0;
    ModificationKind kind = ModificationKind::reinforcing;
    std::string note;
    std::string version_label;
    bool operator==(const ModificationSpec&) const = default;
};

// Violations that do not depend on the mesh. Field paths match the JSON body.
inline std::vector<std::pair<std::string, std::string>> spec_violations(const ModificationSpec& s) {
    std::vector<std::pair<std::string, std::string>> v;
    if (!valid_token(s.target_class)) v.push_back({"target_class", "target_class must be a non-empty token"});
    if (!valid_version_label(s.version_label))
        v.push_back({"version_label", "version_label '" + s.version_label + "' is not v<label>"});
    const bool by_region = s.selector.kind == SelectorKind::region;
    if (by_region ? s.selector.regions.empty() : s.selector.faces.empty())
        v.push_back({"selector", "selector is empty"});
    for (const auto& r : s.selector.regions)
        if (!valid_token(r)) v.push_back({"selector.regions", "region tags must be non-empty tokens"});
    for (int f : s.selector.faces)
        if (f < 0) v.push_back({"selector.faces", "face index " + std::to_string(f) + " is negative"});
    const std::string field = to_string(s.action);
    if (!std::isfinite(s.value)) {
        v.push_back({"value", field + " value must be finite"});
    } else if (s.action == ActionKind::scale_emission) {
        if (s.value < 0) v.push_back({"value", "scale_emission factor " + text::fmt9(s.value) + " must be >= 0"});
    } else if (!in_unit_range(s.value)) {
        const char* material_field = s.action == ActionKind::set_smoothness ? "smoothness" : "reflectance";
        v.push_back({"value", std::string(material_field) + " " + text::fmt9(s.value) + " outside [0,1]"});
    }
    if (s.note.find('\n') != std::string::npos) v.push_back({"note", "note must be a single line"});
    return v;
}

inline void validate(const ModificationSpec& s) {
    const auto v = spec_violations(s);
    if (v.empty()) return;
    std::vector<std::string> msgs;
    for (const auto& [field, msg] : v) msgs.push_back(msg);
    throw ValidationError(std::move(msgs), v.front().first);
}

// Record format, one key per line:
//   spec
//   version vR
//   target wedgecar
//   kind reinforcing
//   action set_smoothness 0.1
//   select region hull
//   note <free text>
//   end
inline std::string serialize_spec(const ModificationSpec& s) {
    validate(s);
    std::string out = "spec\nversion " + s.version_label + "\ntarget " + s.target_class + "\nkind " + to_string(s.kind) +
                      "\naction " + to_string(s.action) + " " + text::fmt9(s.value) + "\nselect " +
                      to_string(s.selector.kind);
    if (s.selector.kind == SelectorKind::region)
        for (const auto& r : s.selector.regions) out += " " + r;
    else
        for (int f : s.selector.faces) out += " " + std::to_string(f);
    out += "\nnote " + s.note + "\nend\n";
    return out;
}

inline std::vector<ModificationSpec> parse_specs(const std::string& content) {
    std::vector<ModificationSpec> out;
    std::optional<ModificationSpec> cur;
    int line_no = 0;
    for (const auto& line : text::lines(content)) {
        ++line_no;
        const auto tok = text::split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        const std::string& key = tok[0];
        if (key == "spec") {
            if (cur) throw ParseError(line_no, "spec", "previous spec not closed with 'end'");
            cur.emplace();
            continue;
        }
        if (!cur) throw ParseError(line_no, key, "record outside a spec block");
        try {
            if (key == "end") {
                validate(*cur);
                out.push_back(std::move(*cur));
                cur.reset();
            } else if (key == "version" && tok.size() == 2) {
                cur->version_label = tok[1];
            } else if (key == "target" && tok.size() == 2) {
                cur->target_class = tok[1];
            } else if (key == "kind" && tok.size() == 2) {
                cur->kind = parse_modification_kind(tok[1]);
            } else if (key == "action" && tok.size() == 3) {
                cur->action = parse_action(tok[1]);
                if (!text::parse_double(tok[2], cur->value)) throw ParseError(line_no, "value", "not a number: " + tok[2]);
            } else if (key == "select" && tok.size() >= 2) {
                cur->selector = {parse_selector_kind(tok[1]), {}, {}};
                for (size_t i = 2; i < tok.size(); ++i) {
                    if (cur->selector.kind == SelectorKind::region) {
                        cur->selector.regions.push_back(tok[i]);
                        continue;
                    }
                    long long f;
                    if (!text::parse_long(tok[i], f)) throw ParseError(line_no, "selector", "not a face index: " + tok[i]);
                    cur->selector.faces.push_back(static_cast<int>(f));
                }
            } else if (key == "note") {
                const auto pos = line.find("note");
                cur->note = pos + 5 <= line.size() ? line.substr(pos + 5) : "";
                while (!cur->note.empty() && (cur->note.back() == '\r' || cur->note.back() == ' ')) cur->note.pop_back();
            } else {
                throw ParseError(line_no, key, "unknown or malformed record");
            }
        } catch (const ParseError&) {
            throw;
        } catch (const Error& e) {
            throw ParseError(line_no, e.field().empty() ? key : e.field(), e.what());
        }
    }
    if (cur) throw ParseError(line_no, "end", "spec not closed with 'end'");
    return out;
}

// ---------------------------------------------------------------------------
// Applying edits

inline std::vector<int> selected_faces(const MeshModel& mesh, const FaceSelector& sel) {
    std::vector<int> out;
    if (sel.kind == SelectorKind::region) {
        for (size_t i = 0; i < mesh.faces.size(); ++i)
            if (std::find(sel.regions.begin(), sel.regions.end(), mesh.faces[i].region_tag) != sel.regions.end())
                out.push_back(static_cast<int>(i));
        if (out.empty()) {
            std::string tags;
            for (const auto& r : sel.regions) tags += (tags.empty() ? "" : ",") + r;
            throw Error(ErrorCode::invalid_argument, "selector matches no face: no region '" + tags + "' on " + mesh.class_id,
                        "selector.regions");
        }
        return out;
    }
    for (int f : sel.faces)
        if (f < 0 || static_cast<size_t>(f) >= mesh.faces.size())
            throw Error(ErrorCode::invalid_argument,
                        "face index " + std::to_string(f) + " out of range for " + mesh.class_id + " (" +
                            std::to_string(mesh.faces.size()) + " faces)",
                        "selector.faces");
    out = sel.faces;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    if (out.empty()) throw Error(ErrorCode::invalid_argument, "selector matches no face", "selector");
    return out;
}

inline MeshModel apply(MeshModel mesh, const ModificationSpec& spec) {
    validate(spec);
    require(mesh.class_id == spec.target_class, "spec targets " + spec.target_class + ", mesh is " + mesh.class_id,
            "target_class");
    for (int i : selected_faces(mesh, spec.selector)) {
        auto& m = mesh.faces[static_cast<size_t>(i)].material;
        switch (spec.action) {
            case ActionKind::set_smoothness: m.smoothness = spec.value; break;
            case ActionKind::set_reflectance: m.reflectance = spec.value; break;
            case ActionKind::scale_emission: m.emission = text::round9(std::clamp(m.emission * spec.value, 0.0, 1.0)); break;
        }
    }
    validate(mesh);
    return mesh;
}

// Applies specs in order to the class they target; every mesh is relabelled.
inline std::vector<MeshModel> apply_all(std::vector<MeshModel> meshes, const std::vector<ModificationSpec>& specs,
                                        const std::string& version_label) {
    require(valid_version_label(version_label), "version_label '" + version_label + "' is not v<label>", "version_label");
    for (const auto& s : specs) {
        auto it = std::find_if(meshes.begin(), meshes.end(), [&](const MeshModel& m) { return m.class_id == s.target_class; });
        if (it == meshes.end()) throw Error(ErrorCode::not_found, "unknown target class '" + s.target_class + "'", "target_class");
        *it = apply(std::move(*it), s);
    }
    for (auto& m : meshes) m.version_label = version_label;
    return meshes;
}

// ---------------------------------------------------------------------------
// Version store: <root>/<label>/{<class>.mesh, version.txt}

struct VersionEntry {
    std::string label;
    std::optional<std::string> parent;
    std::vector<ModificationSpec> specs;
    std::vector<MeshModel> meshes;

    const MeshModel& mesh(const std::string& class_id) const {
        for (const auto& m : meshes)
            if (m.class_id == class_id) return m;
        throw Error(ErrorCode::not_found, "version " + label + " has no mesh for class '" + class_id + "'", "class");
    }
};

class VersionStore {
public:
    explicit VersionStore(std::filesystem::path root) : root_(std::move(root)) {}

    // Creates the store with v0; refuses to overwrite an existing one.
    static VersionStore create(const std::filesystem::path& root, std::vector<MeshModel> v0) {
        VersionStore store(root);
        if (store.contains("v0")) throw Error(ErrorCode::state_conflict, "version store already initialised at " + root.string());
        require(!v0.empty(), "v0 needs at least one mesh", "meshes");
        for (auto& m : v0) m.version_label = "v0";
        store.write("v0", std::nullopt, {}, v0);
        return store;
    }

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path dir(const std::string& label) const { return root_ / label; }
    bool contains(const std::string& label) const {
        return valid_version_label(label) && std::filesystem::exists(dir(label) / "version.txt");
    }

    std::vector<std::string> labels() const {
        std::vector<std::string> out;
        if (!std::filesystem::exists(root_)) return out;
        for (const auto& e : std::filesystem::directory_iterator(root_))
            if (e.is_directory() && contains(e.path().filename().string())) out.push_back(e.path().filename().string());
        std::sort(out.begin(), out.end());
        return out;
    }

    VersionEntry load(const std::string& label) const {
        if (!contains(label)) throw Error(ErrorCode::not_found, "unknown version '" + label + "'", "version_label");
        VersionEntry e;
        e.label = label;
        const std::string record = text::read_file((dir(label) / "version.txt").string());
        const auto first = record.substr(0, record.find('\n'));
        const auto tok = text::split_ws(first);
        if (tok.size() < 3 || tok[0] != "version" || tok[1] != label)
            throw ParseError(1, "version", "corrupt version record for " + label);
        size_t k = 2;
        if (tok[k] != "parent" || tok.size() != 4) throw ParseError(1, "parent", "expected 'parent <label>|-'");
        if (tok[3] != "-") e.parent = tok[3];
        e.specs = parse_specs(record.substr(first.size()));
        for (const auto& m : text::lines(text::read_file((dir(label) / "classes.txt").string())))
            if (!text::split_ws(m).empty()) e.meshes.push_back(load_mesh(dir(label) / (text::split_ws(m)[0] + ".mesh")));
        return e;
    }

    // Root-first chain of versions ending at label.
    std::vector<VersionEntry> lineage(const std::string& label) const {
        std::vector<VersionEntry> chain;
        std::optional<std::string> cur = label;
        while (cur) {
            chain.push_back(load(*cur));
            cur = chain.back().parent;
            if (chain.size() > 10000) throw Error(ErrorCode::validation_failed, "version lineage has a cycle");
        }
        std::reverse(chain.begin(), chain.end());
        return chain;
    }

    // New child version of `parent` holding every spec. All specs must carry the new label.
    VersionEntry apply(const std::string& parent, const std::vector<ModificationSpec>& specs) {
        require(!specs.empty(), "at least one modification spec is required", "specs");
        const std::string label = specs.front().version_label;
        for (const auto& s : specs) {
            validate(s);
            require(s.version_label == label, "specs of one version must share its label", "version_label");
        }
        if (contains(label)) throw Error(ErrorCode::invalid_argument, "version_label '" + label + "' already used", "version_label");
        const auto base = load(parent);
        auto meshes = apply_all(base.meshes, specs, label);
        write(label, parent, specs, meshes);
        return load(label);
    }

private:
    void write(const std::string& label, const std::optional<std::string>& parent, const std::vector<ModificationSpec>& specs,
               const std::vector<MeshModel>& meshes) {
        namespace fs = std::filesystem;
        // Stage in a sibling directory then rename, so a crash never leaves a half-written version.
        const fs::path staging = root_ / (".staging-" + label);
        fs::remove_all(staging);
        fs::create_directories(staging);
        std::string classes;
        for (const auto& m : meshes) {
            save_mesh(m, staging / (m.class_id + ".mesh"));
            classes += m.class_id + "\n";
        }
        text::write_file((staging / "classes.txt").string(), classes);
        std::string record = "version " + label + " parent " + parent.value_or("-") + "\n";
        for (const auto& s : specs) record += serialize_spec(s);
        text::write_file((staging / "version.txt").string(), record);
        fs::rename(staging, dir(label));
    }

    std::filesystem::path root_;
};

// ---------------------------------------------------------------------------
// Saliency projection

// One sample's geometry. bbox is in sample coordinates.
struct ProjectionView {
    SceneConfig config;
    int crop_x = 0, crop_y = 0;
    Box bbox;
};

inline ProjectionView projection_view(const SampleRecord& r) {
    require(r.bbox.has_value(), "sample has no bounding box", "bbox");
    ProjectionView v;
    v.config.vehicle_orientation = r.orientation;
    v.config.range = r.geometry.range;
    v.config.lateral_offset = r.geometry.lateral_offset;
    v.config.ambient_level = r.geometry.ambient_level;
    v.crop_x = r.geometry.crop_x;
    v.crop_y = r.geometry.crop_y;
    v.bbox = *r.bbox;
    return v;
}

struct FaceHits {
    int face = -1;
    int hits = 0;
    double share = 0;  // of all hits
    bool operator==(const FaceHits&) const = default;
};

struct ProjectionResult {
    std::vector<FaceHits> faces;  // covering prefix, most hits first
    std::vector<FaceHits> all;    // every face hit
    int total_hits = 0;
    int rays = 0;
    std::vector<std::string> warnings;

    FaceSelector selector() const {
        FaceSelector s{SelectorKind::projection, {}, {}};
        for (const auto& f : faces) s.faces.push_back(f.face);
        return s;
    }
};

namespace detail {

// Moller-Trumbore; distance along the ray or nullopt.
inline std::optional<double> ray_triangle(Vec3 origin, Vec3 dir, const std::array<Vec3, 3>& t) {
    const Vec3 e1 = t[1] - t[0], e2 = t[2] - t[0];
    const Vec3 p = cross(dir, e2);
    const double det = dot(e1, p);
    if (std::abs(det) < 1e-14) return std::nullopt;
    const double inv = 1.0 / det;
    const Vec3 s = origin - t[0];
    const double u = dot(s, p) * inv;
    if (u < 0 || u > 1) return std::nullopt;
    const Vec3 q = cross(s, e1);
    const double v = dot(dir, q) * inv;
    if (v < 0 || u + v > 1) return std::nullopt;
    const double d = dot(e2, q) * inv;
    if (d <= 0) return std::nullopt;
    return d;
}

}  // namespace detail

// First-hit face for the ray through frame point (u, v), or -1.
inline int first_hit(const PlacedScene& scene, double u, double v) {
    const Vec3 dir = scene.camera.ray(u, v);
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& t : scene.triangles)
        if (auto d = detail::ray_triangle(scene.camera.position, dir, t.v); d && *d < best_d) {
            best_d = *d;
            best = t.face_index;
        }
    return best;
}

// The map is normalized to each view's bbox: cell (r, c) sits at the
// fractional position ((c+.5)/width, (r+.5)/height) inside the box.
inline ProjectionResult project_saliency(const AggregatedSaliencyMap& map, double theta_mask,
                                         const std::vector<ProjectionView>& views, const MeshModel& mesh,
                                         double coverage = 0.8) {
    require(theta_mask > 0 && theta_mask < 1, "theta_mask must be in (0,1)", "theta_mask");
    require(coverage > 0 && coverage <= 1, "coverage must be in (0,1]", "coverage");
    require(!views.empty(), "projection needs at least one sample view", "views");
    ProjectionResult out;
    const double mx = map.max();
    std::map<int, int> hits;
    if (mx > 0)
        for (const auto& view : views) {
            const PlacedScene scene = place_vehicle(mesh, view.config);
            for (int r = 0; r < map.height; ++r)
                for (int c = 0; c < map.width; ++c) {
                    if (map.at(r, c) < theta_mask * mx) continue;
                    const double su = view.bbox.x + (c + 0.5) * view.bbox.w / map.width;
                    const double sv = view.bbox.y + (r + 0.5) * view.bbox.h / map.height;
                    ++out.rays;
                    const int f = first_hit(scene, view.crop_x + 2.0 * su, view.crop_y + 2.0 * sv);
                    if (f >= 0) {
                        ++hits[f];
                        ++out.total_hits;
                    }
                }
        }
    if (out.total_hits == 0) {
        out.warnings.push_back(mx > 0 ? "saliency falls entirely off the vehicle; no faces hit"
                                      : "saliency map is empty; no faces hit");
        return out;
    }
    for (const auto& [f, n] : hits) out.all.push_back({f, n, double(n) / out.total_hits});
    std::stable_sort(out.all.begin(), out.all.end(), [](const FaceHits& a, const FaceHits& b) { return a.hits > b.hits; });
    int acc = 0;
    for (const auto& f : out.all) {
        out.faces.push_back(f);
        acc += f.hits;
        if (acc >= coverage * out.total_hits - 1e-9) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Regeneration

// Frame plan of the synthetic split. Depends only on the config and seed, so
// every version renders the same scenes.
inline std::vector<FramePlan> synthetic_plan(const DatasetConfig& cfg, size_t num_classes, std::uint64_t seed) {
    return plan_frames(cfg.orientations.synthetic, cfg.synthetic, num_classes, cfg, derive_seed(seed, {hash_label("synthetic")}));
}

// Largest mix size the two pools support at `ratio`.
inline size_t max_mix_total(size_t n_real, size_t n_syn, double ratio) {
    if (ratio >= 1.0) return n_real;
    if (ratio <= 0.0) return n_syn;
    size_t total = static_cast<size_t>(std::min(n_real / ratio, n_syn / (1.0 - ratio))) + 1;
    while (total > 0 && (static_cast<size_t>(std::llround(ratio * total)) > n_real ||
                         total - static_cast<size_t>(std::llround(ratio * total)) > n_syn))
        --total;
    return total;
}

struct Regenerated {
    DatasetManifest synthetic;
    DatasetManifest mixed;
};

inline Regenerated regenerate(const VersionStore& store, const std::string& label, const DatasetConfig& cfg,
                              std::uint64_t seed, const DatasetManifest& real_train, const std::filesystem::path& out_dir,
                              const GenerateOptions& opt = {}) {
    const auto entry = store.load(label);
    std::vector<std::string> names;
    std::vector<const MeshModel*> meshes;
    for (const auto& cls : real_train.classes) {
        names.push_back(cls);
        meshes.push_back(&entry.mesh(cls));
    }
    Regenerated out;
    out.synthetic = generate_samples(names, meshes, synthetic_plan(cfg, names.size(), seed), Provenance::synthetic, label,
                                     out_dir / "synthetic", opt);
    out.synthetic.seed = seed;
    save_manifest(out.synthetic, out_dir / "synthetic.manifest");
    const size_t total = max_mix_total(real_train.records.size(), out.synthetic.records.size(), cfg.ratio);
    out.mixed = mix(real_train, out.synthetic, cfg.ratio, total, seed);
    out.mixed.version_label = label;
    save_manifest(out.mixed, out_dir / "train.manifest");
    return out;
}

}  // namespace synthloop
