#pragma once
// Crop/resize pipeline, orientation splits, real/synthetic mixing and
// dataset manifests.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "synthloop/benchmark.hpp"
#include "synthloop/core/error.hpp"
#include "synthloop/core/png.hpp"
#include "synthloop/core/rng.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/renderer.hpp"

namespace synthloop {

constexpr int kFrameHeight = 512;
constexpr int kFrameWidth = 640;
constexpr int kCropHeight = 256;
constexpr int kCropWidth = 512;
constexpr int kSampleHeight = 128;
constexpr int kSampleWidth = 256;

struct Sample {
    GrayImage image;
    std::optional<Box> bbox;
    int label = kBackground;
    double orientation = 0.0;
    Provenance provenance = Provenance::synthetic;
    std::string version_label = "v0";
    int crop_x = 0, crop_y = 0;  // crop origin in the source frame
};

// ---------------------------------------------------------------------------
// Crop and resize

inline Box transform_box(const Box& b, int crop_x, int crop_y) {
    return {(b.x - crop_x) / 2.0, (b.y - crop_y) / 2.0, b.w / 2.0, b.h / 2.0};
}

// Crop at a given origin and halve with 2x2 averaging, which is exactly
// bilinear resampling at scale 0.5 (sample points fall between source pixels).
inline Sample crop_and_resize_at(const Frame& frame, int crop_x, int crop_y) {
    if (frame.image.height != kFrameHeight || frame.image.width != kFrameWidth)
        throw Error(ErrorCode::invalid_argument,
                    "frame must be 512x640, got " + std::to_string(frame.image.height) + "x" +
                        std::to_string(frame.image.width),
                    "frame");
    require(crop_x >= 0 && crop_x <= kFrameWidth - kCropWidth && crop_y >= 0 && crop_y <= kFrameHeight - kCropHeight,
            "crop origin outside frame", "crop");
    Sample s;
    s.image = GrayImage(kSampleHeight, kSampleWidth);
    for (int r = 0; r < kSampleHeight; ++r)
        for (int c = 0; c < kSampleWidth; ++c) {
            const int sr = crop_y + 2 * r, sc = crop_x + 2 * c;
            const int sum = frame.image(sr, sc) + frame.image(sr, sc + 1) + frame.image(sr + 1, sc) +
                            frame.image(sr + 1, sc + 1);
            s.image(r, c) = static_cast<std::uint8_t>((sum + 2) / 4);
        }
    s.orientation = frame.orientation;
    s.provenance = frame.provenance;
    s.version_label = frame.version_label;
    s.crop_x = crop_x;
    s.crop_y = crop_y;
    if (frame.bbox) {
        const Box crop{double(crop_x), double(crop_y), double(kCropWidth), double(kCropHeight)};
        const double survived = intersection_area(*frame.bbox, crop);
        if (survived >= 0.25 * frame.bbox->area()) {
            s.bbox = clip(transform_box(*frame.bbox, crop_x, crop_y), Box{0, 0, double(kSampleWidth), double(kSampleHeight)});
            s.label = s.bbox ? frame.label : kBackground;
        }
    }
    return s;
}

inline Sample crop_and_resize(const Frame& frame, std::uint64_t seed) {
    Rng rng(seed);
    const int cx = static_cast<int>(rng.below(kFrameWidth - kCropWidth + 1));
    const int cy = static_cast<int>(rng.below(kFrameHeight - kCropHeight + 1));
    return crop_and_resize_at(frame, cx, cy);
}

// ---------------------------------------------------------------------------
// Orientation intervals

struct Interval {
    double lo = 0, hi = 0;  // degrees, closed, hi - lo in [0, 360)
    bool operator==(const Interval&) const = default;
};

struct IntervalSet {
    std::vector<Interval> intervals;

    bool contains(double deg) const {
        for (const auto& iv : intervals) {
            const double d = normalize_degrees(deg - iv.lo);
            if (d <= iv.hi - iv.lo + 1e-9 || d >= 360.0 - 1e-9) return true;
        }
        return false;
    }
    double measure() const {
        double m = 0;
        for (const auto& iv : intervals) m += iv.hi - iv.lo;
        return m;
    }
    double sample(Rng& rng) const {
        double u = rng.uniform() * measure();
        for (const auto& iv : intervals) {
            const double len = iv.hi - iv.lo;
            if (u <= len) return normalize_degrees(iv.lo + u);
            u -= len;
        }
        return normalize_degrees(intervals.back().hi);
    }
    std::string str() const {
        std::string out;
        for (const auto& iv : intervals) {
            if (!out.empty()) out += "U";
            out += "[" + text::fmt(iv.lo) + "," + text::fmt(iv.hi) + "]";
        }
        return out;
    }
};

enum class SplitRole { train, test, synthetic };

inline const char* to_string(SplitRole r) {
    switch (r) {
        case SplitRole::train: return "train";
        case SplitRole::test: return "test";
        case SplitRole::synthetic: return "synthetic";
    }
    return "?";
}

struct OrientationRanges {
    IntervalSet train{{{-20, 20}, {160, 200}}};
    IntervalSet test{{{70, 110}, {250, 290}}};
    IntervalSet synthetic{{{50, 130}, {230, 310}}};

    const IntervalSet& of(SplitRole r) const {
        return r == SplitRole::train ? train : r == SplitRole::test ? test : synthetic;
    }
};

// Checks train/test disjointness and synthetic coverage of test on a 0.1 degree lattice.
inline std::vector<std::string> range_violations(const OrientationRanges& r) {
    std::vector<std::string> v;
    for (const auto* set : {&r.train, &r.test, &r.synthetic})
        for (const auto& iv : set->intervals)
            if (!(iv.hi >= iv.lo) || iv.hi - iv.lo >= 360) v.push_back("interval must satisfy lo <= hi < lo+360");
    if (!v.empty()) return v;
    bool overlap = false, uncovered = false;
    for (int i = 0; i < 3600; ++i) {
        const double d = i * 0.1;
        overlap |= r.train.contains(d) && r.test.contains(d);
        uncovered |= r.test.contains(d) && !r.synthetic.contains(d);
    }
    if (overlap) v.push_back("train and test intervals overlap");
    if (uncovered) v.push_back("synthetic intervals must cover test intervals");
    return v;
}

// ---------------------------------------------------------------------------
// Manifests

struct SampleGeometry {
    double range = 1000, lateral_offset = 0, ambient_level = 0.3;
    int crop_x = 0, crop_y = 0;
    bool operator==(const SampleGeometry&) const = default;
};

struct SampleRecord {
    std::string path;  // relative to the manifest's directory
    int label = kBackground;
    double orientation = 0;
    Provenance provenance = Provenance::synthetic;
    std::string version_label = "v0";
    std::optional<Box> bbox;
    SampleGeometry geometry;
    bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
    std::vector<std::string> classes;
    std::vector<SampleRecord> records;
    double ratio = 0.5;  // declared real fraction
    std::string version_label = "v0";
    std::uint64_t seed = 0;
    std::filesystem::path root;  // directory sample paths are relative to; not serialized

    std::map<std::pair<std::string, std::string>, size_t> counts() const {
        std::map<std::pair<std::string, std::string>, size_t> out;
        for (const auto& r : records) ++out[{class_name(r.label), to_string(r.provenance)}];
        return out;
    }
    size_t count(Provenance p) const {
        return static_cast<size_t>(std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.provenance == p; }));
    }
    std::string class_name(int label) const {
        if (label == kBackground) return "background";
        return classes.at(static_cast<size_t>(label));
    }
    int label_of(const std::string& name) const {
        if (name == "background") return kBackground;
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == name) return static_cast<int>(i);
        return -2;
    }
    std::filesystem::path resolve(const SampleRecord& r) const { return root / r.path; }
    bool operator==(const DatasetManifest& o) const {
        return classes == o.classes && records == o.records && ratio == o.ratio && version_label == o.version_label &&
               seed == o.seed;
    }
};

inline std::string serialize_manifest(const DatasetManifest& m) {
    std::ostringstream os;
    os << "# synthloop-manifest 1\n";
    os << "# version " << m.version_label << "\n";
    os << "# seed " << m.seed << "\n";
    os << "# ratio " << text::fmt9(m.ratio) << "\n";
    os << "# classes";
    for (const auto& c : m.classes) os << ' ' << c;
    os << "\n";
    for (const auto& [key, n] : m.counts()) os << "# count " << key.first << ' ' << key.second << ' ' << n << "\n";
    for (const auto& r : m.records) {
        os << r.path << ' ' << m.class_name(r.label) << ' ' << text::fmt9(r.orientation) << ' ' << to_string(r.provenance)
           << ' ' << r.version_label;
        if (r.bbox)
            os << ' ' << text::fmt9(r.bbox->x) << ' ' << text::fmt9(r.bbox->y) << ' ' << text::fmt9(r.bbox->w) << ' '
               << text::fmt9(r.bbox->h);
        else
            os << " - - - -";
        os << "\n";
    }
    return os.str();
}

inline std::string serialize_geometry(const DatasetManifest& m) {
    std::ostringstream os;
    for (const auto& r : m.records)
        os << r.path << ' ' << text::fmt9(r.geometry.range) << ' ' << text::fmt9(r.geometry.lateral_offset) << ' '
           << text::fmt9(r.geometry.ambient_level) << ' ' << r.geometry.crop_x << ' ' << r.geometry.crop_y << "\n";
    return os.str();
}

inline DatasetManifest parse_manifest(const std::string& content, const std::string& geometry = {}) {
    DatasetManifest m;
    std::map<std::pair<std::string, std::string>, size_t> declared;
    bool have_ratio = false;
    int line_no = 0;
    auto num = [&](const std::string& s, const char* field) {
        double v;
        if (!text::parse_double(s, v)) throw ParseError(line_no, field, "not a number: " + s);
        return v;
    };
    for (const auto& line : text::lines(content)) {
        ++line_no;
        auto tok = text::split_ws(line);
        if (tok.empty()) continue;
        if (tok[0] == "#") {
            if (tok.size() < 2) continue;
            if (tok[1] == "version" && tok.size() == 3) m.version_label = tok[2];
            else if (tok[1] == "seed" && tok.size() == 3) {
                long long s;
                if (!text::parse_long(tok[2], s)) m.seed = std::stoull(tok[2]);
                else m.seed = static_cast<std::uint64_t>(s);
            } else if (tok[1] == "ratio" && tok.size() == 3) {
                m.ratio = num(tok[2], "ratio");
                have_ratio = true;
            } else if (tok[1] == "classes") {
                m.classes.assign(tok.begin() + 2, tok.end());
            } else if (tok[1] == "count" && tok.size() == 5) {
                declared[{tok[2], tok[3]}] = static_cast<size_t>(num(tok[4], "count"));
            }
            continue;
        }
        if (tok.size() != 9) throw ParseError(line_no, "record", "expected 9 fields, got " + std::to_string(tok.size()));
        SampleRecord r;
        r.path = tok[0];
        r.label = m.label_of(tok[1]);
        if (r.label == -2) throw ParseError(line_no, "class", "unknown class " + tok[1]);
        r.orientation = num(tok[2], "orientation");
        try {
            r.provenance = parse_provenance(tok[3]);
        } catch (const Error&) {
            throw ParseError(line_no, "provenance", "expected real|synthetic, got " + tok[3]);
        }
        r.version_label = tok[4];
        if (tok[5] != "-") r.bbox = Box{num(tok[5], "bbox_x"), num(tok[6], "bbox_y"), num(tok[7], "bbox_w"), num(tok[8], "bbox_h")};
        m.records.push_back(std::move(r));
    }
    std::vector<std::string> v;
    if (!declared.empty() && declared != m.counts()) v.push_back("declared counts do not match records");
    if (have_ratio && !m.records.empty()) {
        const double expected = m.ratio * static_cast<double>(m.records.size());
        if (std::abs(expected - static_cast<double>(m.count(Provenance::real))) > 1.0 + 1e-9)
            v.push_back("declared ratio does not match record counts");
    }
    if (!v.empty()) throw ValidationError(std::move(v), "manifest");

    if (!geometry.empty()) {
        std::map<std::string, SampleGeometry> geo;
        int gl = 0;
        for (const auto& line : text::lines(geometry)) {
            ++gl;
            auto tok = text::split_ws(line);
            if (tok.empty()) continue;
            if (tok.size() != 6) throw ParseError(gl, "geometry", "expected 6 fields");
            SampleGeometry g;
            double cx, cy;
            if (!text::parse_double(tok[1], g.range) || !text::parse_double(tok[2], g.lateral_offset) ||
                !text::parse_double(tok[3], g.ambient_level) || !text::parse_double(tok[4], cx) ||
                !text::parse_double(tok[5], cy))
                throw ParseError(gl, "geometry", "not a number");
            g.crop_x = static_cast<int>(cx);
            g.crop_y = static_cast<int>(cy);
            geo[tok[0]] = g;
        }
        for (auto& r : m.records)
            if (auto it = geo.find(r.path); it != geo.end()) r.geometry = it->second;
    }
    return m;
}

inline std::filesystem::path geometry_path(const std::filesystem::path& manifest_path) {
    auto p = manifest_path;
    p += ".geom";
    return p;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Paths are stored relative to the manifest's directory.
    DatasetManifest rel = m;
    const auto dir = std::filesystem::absolute(path).parent_path();
    for (auto& r : rel.records) {
        const auto abs = std::filesystem::absolute(m.root / r.path).lexically_normal();
        r.path = abs.lexically_relative(dir).generic_string();
    }
    text::write_file(path.string(), serialize_manifest(rel));
    text::write_file(geometry_path(path).string(), serialize_geometry(rel));
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "manifest not found: " + path.string());
    const auto geo = geometry_path(path);
    auto m = parse_manifest(text::read_file(path.string()), std::filesystem::exists(geo) ? text::read_file(geo.string()) : "");
    m.root = std::filesystem::absolute(path).parent_path();
    return m;
}

// ---------------------------------------------------------------------------
// Splits and mixing

struct SplitResult {
    DatasetManifest manifest;
    std::vector<std::string> warnings;
};

inline SplitResult build_split(const DatasetManifest& frames, const OrientationRanges& ranges, SplitRole role) {
    SplitResult out;
    out.manifest = frames;
    out.manifest.records.clear();
    const auto& set = ranges.of(role);
    for (const auto& r : frames.records)
        if (set.contains(r.orientation)) out.manifest.records.push_back(r);
    out.manifest.ratio = out.manifest.records.empty()
                             ? 0.0
                             : double(out.manifest.count(Provenance::real)) / double(out.manifest.records.size());
    if (out.manifest.records.empty())
        out.warnings.push_back(std::string("split '") + to_string(role) + "' is empty for intervals " + set.str());
    return out;
}

inline DatasetManifest mix(const DatasetManifest& real, const DatasetManifest& synthetic, double ratio, size_t total,
                           std::uint64_t seed) {
    require(ratio >= 0.0 && ratio <= 1.0, "ratio must be in [0,1]", "ratio");
    const size_t n_real = static_cast<size_t>(std::llround(ratio * static_cast<double>(total)));
    const size_t n_syn = total - n_real;
    std::vector<std::string> shortfall;
    if (n_real > real.records.size())
        shortfall.push_back("need " + std::to_string(n_real) + " real samples, have " + std::to_string(real.records.size()));
    if (n_syn > synthetic.records.size())
        shortfall.push_back("need " + std::to_string(n_syn) + " synthetic samples, have " +
                            std::to_string(synthetic.records.size()));
    if (!shortfall.empty()) {
        std::string msg = "insufficient samples:";
        for (const auto& s : shortfall) msg += " " + s + ";";
        throw Error(ErrorCode::insufficient_samples, msg, "total");
    }
    if (n_real > 0 && n_syn > 0)
        require(real.classes == synthetic.classes, "real and synthetic manifests disagree on classes", "classes");

    DatasetManifest out;
    out.classes = n_real > 0 ? real.classes : synthetic.classes;
    out.ratio = ratio;
    out.seed = seed;
    out.version_label = n_syn > 0 ? synthetic.version_label : real.version_label;
    out.root = std::filesystem::path("/");
    Rng rng(derive_seed(seed, {hash_label("mix")}));
    auto take = [&](const DatasetManifest& src, size_t k) {
        auto idx = rng.sample_without_replacement(src.records.size(), k);
        std::sort(idx.begin(), idx.end());
        for (size_t i : idx) {
            SampleRecord r = src.records[i];
            r.path = std::filesystem::absolute(src.root / r.path).lexically_normal().string();
            out.records.push_back(std::move(r));
        }
    };
    take(real, n_real);
    take(synthetic, n_syn);
    return out;
}

// ---------------------------------------------------------------------------
// Frame planning and sample generation

struct DatasetConfig {
    size_t real_train = 900;
    size_t real_test = 600;
    size_t synthetic = 900;
    double ratio = 0.5;
    std::vector<double> ranges{1000, 1500, 2000};
    double ambient_min = 0.2, ambient_max = 0.45;
    double lateral_jitter = 1.0;   // metres, uniform +-
    double empty_fraction = 0.08;  // frames rendered without a vehicle
    int crops_per_frame = 1;
    OrientationRanges orientations;
};

inline std::vector<std::string> dataset_config_violations(const DatasetConfig& c) {
    std::vector<std::string> v = range_violations(c.orientations);
    if (!(c.ratio >= 0 && c.ratio <= 1)) v.push_back("ratio must be in [0,1]");
    if (c.ranges.empty()) v.push_back("ranges must be non-empty");
    for (double r : c.ranges)
        if (!(r > 0)) v.push_back("ranges must be positive");
    if (!(c.ambient_min >= 0 && c.ambient_max <= 1 && c.ambient_min <= c.ambient_max)) v.push_back("ambient range invalid");
    if (!(c.empty_fraction >= 0 && c.empty_fraction < 1)) v.push_back("empty_fraction must be in [0,1)");
    if (c.crops_per_frame < 1) v.push_back("crops_per_frame must be >= 1");
    return v;
}

struct FramePlan {
    int label = kBackground;
    SceneConfig config;
    std::uint64_t seed = 0;
};

inline std::vector<FramePlan> plan_frames(const IntervalSet& orientations, size_t n, size_t num_classes,
                                          const DatasetConfig& cfg, std::uint64_t seed) {
    std::vector<FramePlan> plan;
    plan.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        FramePlan p;
        p.seed = derive_seed(seed, {i});
        Rng rng(p.seed);
        p.label = rng.uniform() < cfg.empty_fraction ? kBackground : static_cast<int>(i % num_classes);
        p.config.vehicle_orientation = orientations.sample(rng);
        p.config.range = cfg.ranges[rng.below(cfg.ranges.size())];
        p.config.ambient_level = rng.uniform(cfg.ambient_min, cfg.ambient_max);
        p.config.lateral_offset = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter);
        plan.push_back(p);
    }
    return plan;
}

// Evenly spaced orientations sweeping the full circle, one frame per step,
// classes cycling. Used for the leakage analysis.
inline std::vector<FramePlan> plan_sequence(size_t n, size_t num_classes, const DatasetConfig& cfg, std::uint64_t seed) {
    std::vector<FramePlan> plan;
    for (size_t i = 0; i < n; ++i) {
        FramePlan p;
        p.seed = derive_seed(seed, {i});
        p.label = static_cast<int>(i % num_classes);
        p.config.vehicle_orientation = normalize_degrees(360.0 * static_cast<double>(i / num_classes) /
                                                         std::ceil(static_cast<double>(n) / num_classes));
        p.config.range = cfg.ranges.front();
        p.config.ambient_level = 0.5 * (cfg.ambient_min + cfg.ambient_max);
        plan.push_back(p);
    }
    return plan;
}

inline std::string sample_filename(const std::vector<std::string>& classes, const FramePlan& p, Provenance prov,
                                   const std::string& version, size_t index) {
    const std::string name = p.label == kBackground ? "background" : classes.at(static_cast<size_t>(p.label));
    return frame_filename(name, p.config.vehicle_orientation, p.config.range, prov, version, index);
}

struct GenerateOptions {
    RenderConfig render;
    SensorNoise noise;
    std::filesystem::path cache_dir;  // content-addressed render cache; empty disables
    int crops_per_frame = 1;
};

// Renders each planned frame with the mesh of its class, crops it and writes
// the sample PNG under out_dir.
inline DatasetManifest generate_samples(const std::vector<std::string>& classes,
                                        const std::vector<const MeshModel*>& meshes, const std::vector<FramePlan>& plan,
                                        Provenance provenance, const std::string& version,
                                        const std::filesystem::path& out_dir, const GenerateOptions& opt = {}) {
    namespace fs = std::filesystem;
    require(meshes.size() == classes.size(), "one mesh per class required", "meshes");
    fs::create_directories(out_dir);
    if (!opt.cache_dir.empty()) fs::create_directories(opt.cache_dir);
    DatasetManifest m;
    m.classes = classes;
    m.version_label = version;
    m.root = fs::absolute(out_dir);
    m.ratio = provenance == Provenance::real ? 1.0 : 0.0;
    std::map<const MeshModel*, std::string> mesh_hash;
    for (const auto* mesh : meshes) {
        MeshModel unlabeled = *mesh;
        unlabeled.version_label = "v0";
        mesh_hash[mesh] = text::fnv1a_hex(serialize_mesh(unlabeled));
    }
    for (size_t i = 0; i < plan.size(); ++i) {
        const auto& p = plan[i];
        const MeshModel* mesh = p.label == kBackground ? nullptr : meshes.at(static_cast<size_t>(p.label));
        std::optional<Frame> frame;
        for (int k = 0; k < opt.crops_per_frame; ++k) {
            const size_t index = i * static_cast<size_t>(opt.crops_per_frame) + static_cast<size_t>(k);
            const std::uint64_t crop_seed = derive_seed(p.seed, {0xC40Bu, static_cast<std::uint64_t>(k)});
            SampleRecord rec;
            rec.path = sample_filename(classes, p, provenance, version, index);
            rec.orientation = normalize_degrees(p.config.vehicle_orientation);
            rec.provenance = provenance;
            rec.version_label = version;
            rec.geometry = {p.config.range, p.config.lateral_offset, p.config.ambient_level, 0, 0};

            std::ostringstream key;
            key << (mesh ? mesh_hash[mesh] : "empty") << ' ' << text::fmt9(p.config.vehicle_orientation) << ' '
                << text::fmt9(p.config.range) << ' ' << text::fmt9(p.config.ambient_level) << ' '
                << text::fmt9(p.config.lateral_offset) << ' ' << to_string(provenance) << ' ' << p.seed << ' ' << k
                << ' ' << p.label;
            const std::string hash = text::fnv1a_hex(key.str());
            const fs::path cached_png = opt.cache_dir.empty() ? fs::path() : opt.cache_dir / (hash + ".png");
            const fs::path cached_meta = opt.cache_dir.empty() ? fs::path() : opt.cache_dir / (hash + ".meta");
            if (!opt.cache_dir.empty() && fs::exists(cached_png) && fs::exists(cached_meta)) {
                auto tok = text::split_ws(text::read_file(cached_meta.string()));
                if (tok.size() == 7) {
                    rec.label = std::stoi(tok[0]);
                    rec.geometry.crop_x = std::stoi(tok[1]);
                    rec.geometry.crop_y = std::stoi(tok[2]);
                    if (tok[3] != "-")
                        rec.bbox = Box{std::stod(tok[3]), std::stod(tok[4]), std::stod(tok[5]), std::stod(tok[6])};
                    fs::copy_file(cached_png, out_dir / rec.path, fs::copy_options::overwrite_existing);
                    m.records.push_back(std::move(rec));
                    continue;
                }
            }
            if (!frame) frame = render_frame(mesh, p.label, p.config, provenance, p.seed, opt.render, opt.noise);
            frame->version_label = version;
            Sample s = crop_and_resize(*frame, crop_seed);
            rec.label = s.label;
            rec.bbox = s.bbox;
            rec.geometry.crop_x = s.crop_x;
            rec.geometry.crop_y = s.crop_y;
            png::write_gray((out_dir / rec.path).string(), s.image);
            if (!opt.cache_dir.empty()) {
                fs::copy_file(out_dir / rec.path, cached_png, fs::copy_options::overwrite_existing);
                std::ostringstream meta;
                meta << rec.label << ' ' << s.crop_x << ' ' << s.crop_y;
                if (s.bbox)
                    meta << ' ' << text::fmt9(s.bbox->x) << ' ' << text::fmt9(s.bbox->y) << ' ' << text::fmt9(s.bbox->w)
                         << ' ' << text::fmt9(s.bbox->h);
                else
                    meta << " - - - -";
                text::write_file(cached_meta.string(), meta.str());
            }
            m.records.push_back(std::move(rec));
        }
    }
    return m;
}

inline std::vector<GrayImage> load_images(const DatasetManifest& m) {
    std::vector<GrayImage> out;
    out.reserve(m.records.size());
    for (const auto& r : m.records) {
        const auto p = m.resolve(r);
        if (!std::filesystem::exists(p)) throw Error(ErrorCode::not_found, "sample image missing: " + p.string());
        out.push_back(png::read_gray(p.string()));
    }
    return out;
}

}  // namespace synthloop
