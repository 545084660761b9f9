#pragma once
// Work directory layout, JSON configuration, and the pipeline stages driven
// by the session and the command line: asset setup, dataset rendering,
// per-seed training runs, evaluation, diagnosis bundles and reports.
//
//   <root>/config.json
//   <root>/assets/benchmark.json, assets/reference/<class>.mesh
//   <root>/versions/<label>/...           version store (editable meshes)
//   <root>/datasets/real_{train,test}/    reference renders + manifest.txt
//   <root>/datasets/<label>/              synthetic split + train.manifest
//   <root>/cache/                         content-addressed render cache
//   <root>/runs/<label>/seed<k>/          checkpoint, confusion, predictions
//   <root>/session/                       state, event log, diagnoses
//   <root>/reports/                       sweeps, PCA, explain outputs

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "synthloop/benchmark.hpp"
#include "synthloop/core/png.hpp"
#include "synthloop/diagnostics.hpp"
#include "synthloop/modification.hpp"

namespace synthloop {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

struct XaiConfig {
    int n_masks = 1000;
    int grid_rows = 4, grid_cols = 8;
    double theta_contrib = 0.4;
    double theta_mask = 0.4;
    int map_rows = 32, map_cols = 64;
    double fraction_bin_width = 5;
    double diagnose_bin_width = 20;
    int min_samples = 5;
    int max_samples = 50;
    int backgrounds = 8;
    SuggestConfig suggest;
    double projection_coverage = 0.8;
};

struct SessionConfig {
    std::vector<std::uint64_t> seeds{1, 2, 3, 4};
    double target_map50 = 0.95;
    int max_iterations = 5;
    bool warm_start = false;  // retrain from the previous version's checkpoint of the same seed
};

struct WorkspaceConfig {
    std::uint64_t seed = 0;  // root of every derived seed in the work directory
    std::uint64_t benchmark_seed = 1;
    DatasetConfig dataset;
    TrainConfig train;
    SessionConfig session;
    XaiConfig xai;
    int port = 8765;
    bool render_cache = true;
};

namespace detail {

inline Json intervals_json(const IntervalSet& s) {
    Json a = Json::array();
    for (const auto& iv : s.intervals) a.push_back({iv.lo, iv.hi});
    return a;
}

// Reads known keys from an object, remembering which were consumed so that
// unknown keys can be reported with their full path.
class JsonReader {
public:
    JsonReader(const Json& j, std::string path, std::vector<std::string>& errors)
        : j_(j), path_(std::move(path)), errors_(errors) {
        if (!j_.is_object()) errors_.push_back(where() + " must be an object");
    }
    ~JsonReader() {
        if (!j_.is_object()) return;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) errors_.push_back("unknown key " + field(it.key()));
    }
    JsonReader(const JsonReader&) = delete;
    JsonReader& operator=(const JsonReader&) = delete;

    template <typename T>
    void get(const std::string& key, T& out) {
        const Json* v = find(key);
        if (!v) return;
        try {
            out = v->get<T>();
        } catch (const std::exception&) {
            errors_.push_back(field(key) + " has the wrong type");
        }
    }
    const Json* find(const std::string& key) {
        used_.insert(key);
        if (!j_.is_object() || !j_.contains(key)) return nullptr;
        return &j_.at(key);
    }
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::vector<std::string>& errors() { return errors_; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }
    const Json& j_;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> used_;
};

inline void read_intervals(JsonReader& r, const std::string& key, IntervalSet& out) {
    const Json* v = r.find(key);
    if (!v) return;
    IntervalSet s;
    bool ok = v->is_array() && !v->empty();
    if (ok)
        for (const auto& iv : *v) {
            if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() || !iv[1].is_number()) {
                ok = false;
                break;
            }
            s.intervals.push_back({iv[0].get<double>(), iv[1].get<double>()});
        }
    if (!ok)
        r.errors().push_back(r.field(key) + " must be a non-empty list of [lo, hi] pairs");
    else
        out = s;
}

}  // namespace detail

inline Json to_json(const WorkspaceConfig& c) {
    const auto& d = c.dataset;
    const auto& t = c.train;
    const auto& x = c.xai;
    return Json{
        {"seed", c.seed},
        {"benchmark_seed", c.benchmark_seed},
        {"dataset",
         {{"real_train", d.real_train},
          {"real_test", d.real_test},
          {"synthetic", d.synthetic},
          {"ratio", d.ratio},
          {"ranges", d.ranges},
          {"ambient_min", d.ambient_min},
          {"ambient_max", d.ambient_max},
          {"lateral_jitter", d.lateral_jitter},
          {"empty_fraction", d.empty_fraction},
          {"crops_per_frame", d.crops_per_frame},
          {"orientations",
           {{"train", detail::intervals_json(d.orientations.train)},
            {"test", detail::intervals_json(d.orientations.test)},
            {"synthetic", detail::intervals_json(d.orientations.synthetic)}}}}},
        {"train",
         {{"epochs", t.epochs},
          {"learning_rate", t.learning_rate},
          {"batch", t.batch},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"box_weight", t.box_weight},
          {"clip_norm", t.clip_norm}}},
        {"session",
         {{"seeds", c.session.seeds},
          {"target_map50", c.session.target_map50},
          {"max_iterations", c.session.max_iterations},
          {"warm_start", c.session.warm_start}}},
        {"xai",
         {{"n_masks", x.n_masks},
          {"grid_rows", x.grid_rows},
          {"grid_cols", x.grid_cols},
          {"theta_contrib", x.theta_contrib},
          {"theta_mask", x.theta_mask},
          {"map_rows", x.map_rows},
          {"map_cols", x.map_cols},
          {"fraction_bin_width", x.fraction_bin_width},
          {"diagnose_bin_width", x.diagnose_bin_width},
          {"min_samples", x.min_samples},
          {"max_samples", x.max_samples},
          {"backgrounds", x.backgrounds},
          {"suggest",
           {{"high", x.suggest.high},
            {"low", x.suggest.low},
            {"tau_sim", x.suggest.tau_sim},
            {"similarity_margin", x.suggest.similarity_margin}}},
          {"projection_coverage", x.projection_coverage}}},
        {"port", c.port},
        {"render_cache", c.render_cache},
    };
}

inline std::vector<std::string> config_violations(const WorkspaceConfig& c) {
    std::vector<std::string> v;
    for (auto& s : dataset_config_violations(c.dataset)) v.push_back("dataset: " + s);
    for (auto& s : train_config_violations(c.train)) v.push_back("train: " + s);
    const auto& s = c.session;
    if (s.seeds.empty()) v.push_back("session.seeds must be non-empty");
    if (std::set<std::uint64_t>(s.seeds.begin(), s.seeds.end()).size() != s.seeds.size())
        v.push_back("session.seeds must be distinct");
    if (!(s.target_map50 >= 0 && s.target_map50 <= 1)) v.push_back("session.target_map50 must be in [0,1]");
    if (s.max_iterations < 1) v.push_back("session.max_iterations must be >= 1");
    const auto& x = c.xai;
    if (x.grid_rows < 1 || x.grid_cols < 1) v.push_back("xai.grid must be at least 1x1");
    if (x.n_masks < x.grid_rows * x.grid_cols + 2) v.push_back("xai.n_masks must be >= superpixels + 2");
    if (!(x.theta_contrib > 0 && x.theta_contrib < 1)) v.push_back("xai.theta_contrib must be in (0,1)");
    if (!(x.theta_mask > 0 && x.theta_mask < 1)) v.push_back("xai.theta_mask must be in (0,1)");
    if (x.map_rows < 1 || x.map_cols < 1) v.push_back("xai.map dims must be positive");
    if (!(x.fraction_bin_width > 0 && x.fraction_bin_width <= 360)) v.push_back("xai.fraction_bin_width must be in (0,360]");
    if (!(x.diagnose_bin_width > 0 && x.diagnose_bin_width <= 360)) v.push_back("xai.diagnose_bin_width must be in (0,360]");
    if (x.min_samples < 1) v.push_back("xai.min_samples must be >= 1");
    if (x.max_samples < x.min_samples) v.push_back("xai.max_samples must be >= min_samples");
    if (x.backgrounds < 1) v.push_back("xai.backgrounds must be >= 1");
    if (!(x.suggest.low >= 0 && x.suggest.low < x.suggest.high && x.suggest.high <= 1))
        v.push_back("xai.suggest needs 0 <= low < high <= 1");
    if (x.suggest.similarity_margin < 0) v.push_back("xai.suggest.similarity_margin must be >= 0");
    if (!(x.projection_coverage > 0 && x.projection_coverage <= 1)) v.push_back("xai.projection_coverage must be in (0,1]");
    if (c.port < 0 || c.port > 65535) v.push_back("port must be in [0,65535]");
    return v;
}

// Keys absent from `j` keep the value in `base`.
inline WorkspaceConfig config_from_json(const Json& j, WorkspaceConfig base = {}) {
    std::vector<std::string> errors;
    {
        detail::JsonReader r(j, "", errors);
        r.get("seed", base.seed);
        r.get("benchmark_seed", base.benchmark_seed);
        r.get("port", base.port);
        r.get("render_cache", base.render_cache);
        if (const Json* d = r.find("dataset")) {
            detail::JsonReader rd(*d, "dataset", errors);
            auto& ds = base.dataset;
            rd.get("real_train", ds.real_train);
            rd.get("real_test", ds.real_test);
            rd.get("synthetic", ds.synthetic);
            rd.get("ratio", ds.ratio);
            rd.get("ranges", ds.ranges);
            rd.get("ambient_min", ds.ambient_min);
            rd.get("ambient_max", ds.ambient_max);
            rd.get("lateral_jitter", ds.lateral_jitter);
            rd.get("empty_fraction", ds.empty_fraction);
            rd.get("crops_per_frame", ds.crops_per_frame);
            if (const Json* o = rd.find("orientations")) {
                detail::JsonReader ro(*o, "dataset.orientations", errors);
                detail::read_intervals(ro, "train", ds.orientations.train);
                detail::read_intervals(ro, "test", ds.orientations.test);
                detail::read_intervals(ro, "synthetic", ds.orientations.synthetic);
            }
        }
        if (const Json* t = r.find("train")) {
            detail::JsonReader rt(*t, "train", errors);
            rt.get("epochs", base.train.epochs);
            rt.get("learning_rate", base.train.learning_rate);
            rt.get("batch", base.train.batch);
            rt.get("momentum", base.train.momentum);
            rt.get("weight_decay", base.train.weight_decay);
            rt.get("box_weight", base.train.box_weight);
            rt.get("clip_norm", base.train.clip_norm);
        }
        if (const Json* s = r.find("session")) {
            detail::JsonReader rs(*s, "session", errors);
            rs.get("seeds", base.session.seeds);
            rs.get("target_map50", base.session.target_map50);
            rs.get("max_iterations", base.session.max_iterations);
            rs.get("warm_start", base.session.warm_start);
        }
        if (const Json* x = r.find("xai")) {
            detail::JsonReader rx(*x, "xai", errors);
            auto& xc = base.xai;
            rx.get("n_masks", xc.n_masks);
            rx.get("grid_rows", xc.grid_rows);
            rx.get("grid_cols", xc.grid_cols);
            rx.get("theta_contrib", xc.theta_contrib);
            rx.get("theta_mask", xc.theta_mask);
            rx.get("map_rows", xc.map_rows);
            rx.get("map_cols", xc.map_cols);
            rx.get("fraction_bin_width", xc.fraction_bin_width);
            rx.get("diagnose_bin_width", xc.diagnose_bin_width);
            rx.get("min_samples", xc.min_samples);
            rx.get("max_samples", xc.max_samples);
            rx.get("backgrounds", xc.backgrounds);
            rx.get("projection_coverage", xc.projection_coverage);
            if (const Json* sg = rx.find("suggest")) {
                detail::JsonReader rg(*sg, "xai.suggest", errors);
                rg.get("high", xc.suggest.high);
                rg.get("low", xc.suggest.low);
                rg.get("tau_sim", xc.suggest.tau_sim);
                rg.get("similarity_margin", xc.suggest.similarity_margin);
            }
        }
    }
    for (auto& v : config_violations(base)) errors.push_back(v);
    if (!errors.empty()) throw ValidationError(std::move(errors), "config");
    return base;
}

inline WorkspaceConfig load_config(const std::filesystem::path& path, WorkspaceConfig base = {}) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "config file not found: " + path.string(), "config");
    Json j;
    try {
        j = Json::parse(text::read_file(path.string()));
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::parse_error, "config " + path.string() + ": " + e.what(), "config");
    }
    return config_from_json(j, std::move(base));
}

// ---------------------------------------------------------------------------
// Run records

struct RunRecord {
    std::string version_label;
    std::uint64_t seed = 0;
    double map50 = 0;
    std::string confusion;   // paths relative to the work directory
    std::string checkpoint;
    std::string predictions;
    double duration_s = 0;
    bool operator==(const RunRecord&) const = default;
};

inline Json to_json(const RunRecord& r) {
    return Json{{"version_label", r.version_label}, {"seed", r.seed},         {"map50", r.map50},
                {"confusion", r.confusion},         {"checkpoint", r.checkpoint}, {"predictions", r.predictions},
                {"duration_s", r.duration_s}};
}

inline RunRecord run_from_json(const Json& j) {
    RunRecord r;
    r.version_label = j.at("version_label").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.map50 = j.at("map50").get<double>();
    r.confusion = j.at("confusion").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.predictions = j.at("predictions").get<std::string>();
    r.duration_s = j.at("duration_s").get<double>();
    return r;
}

// Per test sample: confusion column, proposal class, proposal score, box.
struct SamplePrediction {
    int column = 0;
    int proposal = 0;
    double score = 0;
    Box bbox;
};

inline std::string serialize_predictions(const std::vector<Detection>& dets, const std::vector<int>& columns) {
    std::ostringstream os;
    os << "# index column proposal score x y w h\n";
    for (size_t i = 0; i < dets.size(); ++i) {
        const auto [cls, score] = dets[i].proposal();
        const auto& b = dets[i].bbox;
        os << i << ' ' << columns[i] << ' ' << cls << ' ' << text::fmt9(score) << ' ' << text::fmt9(b.x) << ' '
           << text::fmt9(b.y) << ' ' << text::fmt9(b.w) << ' ' << text::fmt9(b.h) << '\n';
    }
    return os.str();
}

inline std::vector<SamplePrediction> parse_predictions(const std::string& content) {
    std::vector<SamplePrediction> out;
    int line_no = 0;
    for (const auto& line : text::lines(content)) {
        ++line_no;
        const auto tok = text::split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        if (tok.size() != 8) throw ParseError(line_no, "prediction", "expected 8 fields");
        SamplePrediction p;
        double v[5];
        long long ints[3];
        for (int k = 0; k < 3; ++k)
            if (!text::parse_long(tok[static_cast<size_t>(k)], ints[k])) throw ParseError(line_no, "prediction", "bad integer");
        for (int k = 0; k < 5; ++k)
            if (!text::parse_double(tok[static_cast<size_t>(k + 3)], v[k])) throw ParseError(line_no, "prediction", "bad number");
        if (ints[0] != static_cast<long long>(out.size())) throw ParseError(line_no, "index", "predictions out of order");
        p.column = static_cast<int>(ints[1]);
        p.proposal = static_cast<int>(ints[2]);
        p.score = v[0];
        p.bbox = {v[1], v[2], v[3], v[4]};
        out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Diagnosis bundle

struct SuggestionRecord {
    FeatureSuggestion suggestion;
    std::string owning_class;
    double b_bin_lo = 0;  // bin of the class-B maps it was compared against
    std::vector<FaceHits> faces;
    std::map<std::string, double> region_share;  // share of hits per region tag

    std::string dominant_region() const {
        std::string best;
        double share = -1;
        for (const auto& [r, s] : region_share)
            if (s > share) {
                share = s;
                best = r;
            }
        return best;
    }
};

struct DiagnosisBin {
    double lo = 0, hi = 0;
    int a_as_b = 0, a_correct = 0, b_correct = 0;  // samples explained
    int misclassified = 0;                         // before the per-map cap
    std::optional<double> b_bin_lo;                // chosen class-B bin
    double correlation = 0;
    std::map<std::string, std::string> maps;      // kind -> stem, relative to the bundle dir
    std::map<std::string, std::string> overlays;  // kind -> png, relative to the bundle dir
    std::vector<std::string> warnings;
};

struct DiagnosisBundle {
    std::string version_label;
    int class_a = 0, class_b = 0;
    std::vector<std::string> classes;
    std::uint64_t explained_seed = 0;
    double bin_width = 20;
    std::vector<DiagnosisBin> bins;
    std::vector<SuggestionRecord> suggestions;
    std::string fractions;  // file, relative to the bundle dir
    std::string fractions_image;
    std::vector<std::string> warnings;
    std::filesystem::path dir;  // not serialized
};

inline Json to_json(const FeatureSuggestion& s) {
    const auto e = s.extent();
    return Json{{"kind", to_string(s.kind)},
                {"owning_class", s.owning_class},
                {"bin_lo", s.bin_lo},
                {"cells", s.cells},
                {"rows", s.rows},
                {"cols", s.cols},
                {"extent", {{"x", e.x}, {"y", e.y}, {"w", e.w}, {"h", e.h}}},
                {"evidence",
                 {{"saliency", s.evidence.saliency},
                  {"correlation", s.evidence.correlation},
                  {"similarity", s.evidence.similarity}}}};
}

inline FeatureSuggestion suggestion_from_json(const Json& j) {
    FeatureSuggestion s;
    s.kind = j.at("kind").get<std::string>() == "common" ? FeatureKind::common : FeatureKind::unique;
    s.owning_class = j.at("owning_class").get<int>();
    s.bin_lo = j.at("bin_lo").get<double>();
    s.cells = j.at("cells").get<std::vector<int>>();
    s.rows = j.at("rows").get<int>();
    s.cols = j.at("cols").get<int>();
    const auto& e = j.at("evidence");
    s.evidence = {e.at("saliency").get<double>(), e.at("correlation").get<double>(), e.at("similarity").get<double>()};
    return s;
}

inline Json to_json(const DiagnosisBundle& b) {
    Json bins = Json::array();
    for (const auto& bin : b.bins) {
        Json jb{{"lo", bin.lo},
                {"hi", bin.hi},
                {"misclassified", bin.misclassified},
                {"a_as_b", bin.a_as_b},
                {"a_correct", bin.a_correct},
                {"b_correct", bin.b_correct},
                {"b_bin_lo", bin.b_bin_lo ? Json(*bin.b_bin_lo) : Json(nullptr)},
                {"correlation", bin.correlation},
                {"maps", bin.maps},
                {"overlays", bin.overlays},
                {"warnings", bin.warnings}};
        bins.push_back(std::move(jb));
    }
    Json sugg = Json::array();
    for (const auto& s : b.suggestions) {
        Json faces = Json::array();
        for (const auto& f : s.faces) faces.push_back({{"face", f.face}, {"hits", f.hits}, {"share", f.share}});
        Json js = to_json(s.suggestion);
        js["owning_class_name"] = s.owning_class;
        js["b_bin_lo"] = s.b_bin_lo;
        js["faces"] = faces;
        js["region_share"] = s.region_share;
        js["dominant_region"] = s.dominant_region();
        sugg.push_back(std::move(js));
    }
    return Json{{"version_label", b.version_label},
                {"class_a", b.class_a},
                {"class_b", b.class_b},
                {"classes", b.classes},
                {"explained_seed", b.explained_seed},
                {"bin_width", b.bin_width},
                {"bins", bins},
                {"suggestions", sugg},
                {"fractions", b.fractions},
                {"fractions_image", b.fractions_image},
                {"warnings", b.warnings}};
}

inline DiagnosisBundle bundle_from_json(const Json& j) {
    DiagnosisBundle b;
    b.version_label = j.at("version_label").get<std::string>();
    b.class_a = j.at("class_a").get<int>();
    b.class_b = j.at("class_b").get<int>();
    b.classes = j.at("classes").get<std::vector<std::string>>();
    b.explained_seed = j.at("explained_seed").get<std::uint64_t>();
    b.bin_width = j.at("bin_width").get<double>();
    for (const auto& jb : j.at("bins")) {
        DiagnosisBin bin;
        bin.lo = jb.at("lo").get<double>();
        bin.hi = jb.at("hi").get<double>();
        bin.misclassified = jb.at("misclassified").get<int>();
        bin.a_as_b = jb.at("a_as_b").get<int>();
        bin.a_correct = jb.at("a_correct").get<int>();
        bin.b_correct = jb.at("b_correct").get<int>();
        if (!jb.at("b_bin_lo").is_null()) bin.b_bin_lo = jb.at("b_bin_lo").get<double>();
        bin.correlation = jb.at("correlation").get<double>();
        bin.maps = jb.at("maps").get<std::map<std::string, std::string>>();
        bin.overlays = jb.at("overlays").get<std::map<std::string, std::string>>();
        bin.warnings = jb.at("warnings").get<std::vector<std::string>>();
        b.bins.push_back(std::move(bin));
    }
    for (const auto& js : j.at("suggestions")) {
        SuggestionRecord s;
        s.suggestion = suggestion_from_json(js);
        s.owning_class = js.at("owning_class_name").get<std::string>();
        s.b_bin_lo = js.at("b_bin_lo").get<double>();
        for (const auto& f : js.at("faces")) s.faces.push_back({f.at("face").get<int>(), f.at("hits").get<int>(), f.at("share").get<double>()});
        s.region_share = js.at("region_share").get<std::map<std::string, double>>();
        b.suggestions.push_back(std::move(s));
    }
    b.fractions = j.at("fractions").get<std::string>();
    b.fractions_image = j.at("fractions_image").get<std::string>();
    b.warnings = j.at("warnings").get<std::vector<std::string>>();
    return b;
}

inline DiagnosisBundle load_bundle(const std::filesystem::path& dir) {
    const auto path = dir / "bundle.json";
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "diagnosis bundle not found: " + path.string(), "bundle");
    auto b = bundle_from_json(Json::parse(text::read_file(path.string())));
    b.dir = dir;
    return b;
}

// ---------------------------------------------------------------------------
// Image helpers

inline RgbImage upscale_rgb(const RgbImage& img, int factor) {
    RgbImage out(img.height * factor, img.width * factor);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c) {
            const size_t s = (static_cast<size_t>(r / factor) * img.width + c / factor) * 3;
            out.set(r, c, img.data[s], img.data[s + 1], img.data[s + 2]);
        }
    return out;
}

inline GrayImage patch_image(const Patch& p) {
    GrayImage g(p.rows, p.cols);
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < p.cols; ++c) g(r, c) = static_cast<std::uint8_t>(std::lround(std::clamp(p.at(r, c), 0.0, 1.0) * 255));
    return g;
}

// ---------------------------------------------------------------------------
// Workspace

class Workspace {
public:
    static Workspace init(const std::filesystem::path& root, const WorkspaceConfig& cfg,
                          const BenchmarkSpec& spec = default_benchmark_spec()) {
        namespace fs = std::filesystem;
        if (auto v = config_violations(cfg); !v.empty()) throw ValidationError(std::move(v), "config");
        if (fs::exists(root / "config.json"))
            throw Error(ErrorCode::state_conflict, "work directory already initialised: " + root.string(), "workdir");
        const auto bundle = make_benchmark(spec, cfg.benchmark_seed);
        fs::create_directories(root / "assets" / "reference");
        std::vector<MeshModel> editable;
        Json classes = Json::array();
        for (const auto& c : bundle.classes) {
            save_mesh(c.reference, root / "assets" / "reference" / (c.name + ".mesh"));
            editable.push_back(c.editable);
            classes.push_back(c.name);
        }
        Json confusables = Json::array();
        for (const auto& f : bundle.confusables)
            confusables.push_back({{"class_a", f.class_a}, {"class_b", f.class_b}, {"region", f.region}, {"emission", f.emission}});
        const Json meta{{"classes", classes},
                        {"seed", cfg.benchmark_seed},
                        {"confusables", confusables},
                        {"noise",
                         {{"sigma", bundle.noise.sigma},
                          {"fixed_pattern_amplitude", bundle.noise.fixed_pattern_amplitude},
                          {"pattern_seed", bundle.noise.pattern_seed}}}};
        text::write_file((root / "assets" / "benchmark.json").string(), meta.dump(2) + "\n");
        VersionStore::create(root / "versions", editable);
        text::write_file((root / "config.json").string(), to_json(cfg).dump(2) + "\n");
        return open(root);
    }

    static Workspace open(const std::filesystem::path& root) {
        if (!std::filesystem::exists(root / "config.json"))
            throw Error(ErrorCode::not_found, "not an initialised work directory: " + root.string() + " (run init)", "workdir");
        Workspace ws;
        ws.root_ = std::filesystem::absolute(root);
        ws.cfg_ = load_config(root / "config.json");
        const Json meta = Json::parse(text::read_file((root / "assets" / "benchmark.json").string()));
        ws.classes_ = meta.at("classes").get<std::vector<std::string>>();
        const auto& n = meta.at("noise");
        ws.noise_ = {n.at("sigma").get<double>(), n.at("fixed_pattern_amplitude").get<double>(),
                     n.at("pattern_seed").get<std::uint64_t>()};
        return ws;
    }

    const std::filesystem::path& root() const { return root_; }
    const WorkspaceConfig& config() const { return cfg_; }
    // Per-invocation overrides; never written back to config.json.
    void override_config(const WorkspaceConfig& cfg) {
        if (auto v = config_violations(cfg); !v.empty()) throw ValidationError(std::move(v), "config");
        cfg_ = cfg;
    }
    const std::vector<std::string>& classes() const { return classes_; }
    int class_index(const std::string& name) const {
        for (size_t i = 0; i < classes_.size(); ++i)
            if (classes_[i] == name) return static_cast<int>(i);
        throw Error(ErrorCode::not_found, "unknown class '" + name + "'", "class");
    }
    std::string relative(const std::filesystem::path& p) const {
        return std::filesystem::absolute(p).lexically_normal().lexically_relative(root_).generic_string();
    }
    std::filesystem::path resolve(const std::string& rel) const { return root_ / rel; }

    VersionStore versions() const { return VersionStore(root_ / "versions"); }

    std::vector<MeshModel> reference_meshes() const {
        std::vector<MeshModel> out;
        for (const auto& c : classes_) out.push_back(load_mesh(root_ / "assets" / "reference" / (c + ".mesh")));
        return out;
    }

    GenerateOptions generate_options() const {
        GenerateOptions go;
        go.noise = noise_;
        go.crops_per_frame = cfg_.dataset.crops_per_frame;
        if (cfg_.render_cache) go.cache_dir = root_ / "cache";
        return go;
    }

    std::filesystem::path real_dir(SplitRole role) const {
        return root_ / "datasets" / (role == SplitRole::train ? "real_train" : "real_test");
    }

    // Real splits render on first use and are reused afterwards.
    DatasetManifest real(SplitRole role) const {
        require(role != SplitRole::synthetic, "real splits are train or test", "role");
        const auto dir = real_dir(role);
        const auto path = dir / "manifest.txt";
        if (std::filesystem::exists(path)) return load_manifest(path);
        const auto meshes = reference_meshes();
        std::vector<const MeshModel*> ptrs;
        for (const auto& m : meshes) ptrs.push_back(&m);
        const auto& d = cfg_.dataset;
        const size_t n = role == SplitRole::train ? d.real_train : d.real_test;
        const auto plan = plan_frames(d.orientations.of(role), n, classes_.size(), d,
                                      derive_seed(cfg_.seed, {hash_label(role == SplitRole::train ? "real_train" : "real_test")}));
        auto m = generate_samples(classes_, ptrs, plan, Provenance::real, "v0", dir / "images", generate_options());
        m.seed = cfg_.seed;
        save_manifest(m, path);
        return load_manifest(path);
    }

    std::filesystem::path version_data_dir(const std::string& label) const { return root_ / "datasets" / label; }

    Regenerated regenerate(const std::string& label) const {
        const auto store = versions();
        if (!store.contains(label)) throw Error(ErrorCode::not_found, "unknown version '" + label + "'", "version_label");
        return synthloop::regenerate(store, label, cfg_.dataset, cfg_.seed, real(SplitRole::train), version_data_dir(label),
                                     generate_options());
    }

    bool has_training_manifest(const std::string& label) const {
        return std::filesystem::exists(version_data_dir(label) / "train.manifest");
    }

    DatasetManifest training_manifest(const std::string& label) const {
        if (!has_training_manifest(label)) return regenerate(label).mixed;
        return load_manifest(version_data_dir(label) / "train.manifest");
    }

    DatasetManifest synthetic_manifest(const std::string& label) const {
        if (!has_training_manifest(label)) return regenerate(label).synthetic;
        return load_manifest(version_data_dir(label) / "synthetic.manifest");
    }

    std::filesystem::path run_dir(const std::string& label, std::uint64_t seed) const {
        return root_ / "runs" / label / ("seed" + std::to_string(seed));
    }

    const MatrixXd& test_inputs() const {
        if (!test_x_) {
            test_ = real(SplitRole::test);
            test_x_ = pool_inputs(load_images(*test_));
        }
        return *test_x_;
    }
    const DatasetManifest& test_manifest() const {
        test_inputs();
        return *test_;
    }

    // Trains one seed on the version's training manifest, evaluates on the
    // real test split and persists every artifact of the run.
    RunRecord train_run(const std::string& label, std::uint64_t seed, const DetectorModel* start = nullptr) const {
        const auto t0 = std::chrono::steady_clock::now();
        const auto manifest = training_manifest(label);
        const auto trained = train(make_training_data(manifest, load_images(manifest)), cfg_.train, seed, start);
        const auto& test = test_manifest();
        const auto dets = predict_pooled(trained.model, test_inputs());
        const auto ev = evaluate_detections(ground_truth(test), dets, trained.model.num_classes);
        const auto dir = run_dir(label, seed);
        std::filesystem::create_directories(dir);
        save_checkpoint(trained.model, dir / "model.ckpt");
        text::write_file((dir / "confusion.txt").string(), serialize_confusion(ev.confusion, classes_));
        text::write_file((dir / "predictions.txt").string(), serialize_predictions(dets, ev.predicted));
        text::write_file((dir / "training.log").string(), serialize_training_log(trained.log));
        Json metrics{{"map50", ev.map50}, {"ap", ev.ap}, {"positives", ev.positives}};
        text::write_file((dir / "metrics.json").string(), metrics.dump(2) + "\n");
        RunRecord r;
        r.version_label = label;
        r.seed = seed;
        r.map50 = ev.map50;
        r.confusion = relative(dir / "confusion.txt");
        r.checkpoint = relative(dir / "model.ckpt");
        r.predictions = relative(dir / "predictions.txt");
        r.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return r;
    }

    // Run records rebuilt from the artifacts of earlier train_run calls.
    std::vector<RunRecord> stored_runs(const std::string& label, const std::vector<std::uint64_t>& seeds) const {
        std::vector<RunRecord> out;
        for (auto seed : seeds) {
            const auto dir = run_dir(label, seed);
            if (!std::filesystem::exists(dir / "metrics.json"))
                throw Error(ErrorCode::not_found, "no trained run for " + label + " seed " + std::to_string(seed) + " (run train)",
                            "seed");
            RunRecord r;
            r.version_label = label;
            r.seed = seed;
            r.map50 = Json::parse(text::read_file((dir / "metrics.json").string())).at("map50").get<double>();
            r.confusion = relative(dir / "confusion.txt");
            r.checkpoint = relative(dir / "model.ckpt");
            r.predictions = relative(dir / "predictions.txt");
            out.push_back(r);
        }
        return out;
    }

    ConfusionMatrix load_confusion(const RunRecord& r) const {
        return parse_confusion(text::read_file(resolve(r.confusion).string()));
    }
    std::vector<SamplePrediction> load_predictions(const RunRecord& r) const {
        return parse_predictions(text::read_file(resolve(r.predictions).string()));
    }

    // Background images used to fill masked superpixels: vehicle-free real
    // training samples.
    std::vector<GrayImage> shap_backgrounds() const {
        const auto train = real(SplitRole::train);
        std::vector<GrayImage> out;
        for (const auto& r : train.records)
            if (!r.bbox && static_cast<int>(out.size()) < cfg_.xai.backgrounds) out.push_back(png::read_gray(train.resolve(r).string()));
        if (out.empty())
            throw Error(ErrorCode::insufficient_samples, "no vehicle-free real training samples to use as SHAP backgrounds",
                        "backgrounds");
        return out;
    }

    DiagnosisBundle diagnose(const std::string& label, const std::vector<RunRecord>& runs, int class_a, int class_b,
                             const std::filesystem::path& out_dir) const;

private:
    Workspace() = default;

    std::filesystem::path root_;
    WorkspaceConfig cfg_;
    std::vector<std::string> classes_;
    SensorNoise noise_;
    mutable std::optional<DatasetManifest> test_;
    mutable std::optional<MatrixXd> test_x_;
};

// ---------------------------------------------------------------------------
// Explanation and diagnosis

struct ExplainedSet {
    std::vector<size_t> samples;  // indices into the test manifest
    std::vector<AttributionMap> maps;
    AggregatedSaliencyMap aggregate;
    Patch mean_patch;
};

// KernelSHAP on up to `max_samples` of the given samples, aggregated on the
// bbox-normalized grid. Samples with boxes smaller than the grid are skipped.
inline ExplainedSet explain_samples(const DetectorModel& model, const DatasetManifest& test,
                                    const std::vector<GrayImage>& images, const std::vector<size_t>& candidates,
                                    int target_class, const std::vector<GrayImage>& backgrounds, const XaiConfig& xc,
                                    std::uint64_t seed) {
    ExplainedSet out;
    std::vector<Patch> patches;
    const auto score = detector_score(model, target_class);
    for (size_t i : candidates) {
        if (static_cast<int>(out.samples.size()) >= xc.max_samples) break;
        const auto& rec = test.records[i];
        if (!rec.bbox) continue;
        const PixelRect px = pixel_rect(*rec.bbox, kSampleHeight, kSampleWidth);
        if (px.w < xc.grid_cols || px.h < xc.grid_rows) continue;
        const auto grid = make_grid(px, xc.grid_rows, xc.grid_cols);
        ShapConfig sc;
        sc.n_masks = xc.n_masks;
        sc.seed = derive_seed(seed, {hash_label("shap"), i, static_cast<std::uint64_t>(target_class)});
        out.maps.push_back(kernel_shap(score, images[i], target_class, grid, backgrounds, sc, rec.path));
        out.samples.push_back(i);
        patches.push_back(bbox_patch(images[i], *rec.bbox, xc.map_rows, xc.map_cols));
    }
    if (out.maps.empty()) {
        out.aggregate = {xc.map_rows, xc.map_cols, std::vector<double>(static_cast<size_t>(xc.map_rows) * xc.map_cols, 0.0), 0,
                         xc.theta_contrib};
        out.mean_patch = {xc.map_rows, xc.map_cols, std::vector<double>(static_cast<size_t>(xc.map_rows) * xc.map_cols, 0.0)};
    } else {
        out.aggregate = aggregate_normalized(out.maps, xc.map_rows, xc.map_cols, xc.theta_contrib);
        out.mean_patch = mean_patch(patches, xc.map_rows, xc.map_cols);
    }
    return out;
}

inline DiagnosisBundle Workspace::diagnose(const std::string& label, const std::vector<RunRecord>& runs, int class_a,
                                           int class_b, const std::filesystem::path& out_dir) const {
    namespace fs = std::filesystem;
    const int nc = static_cast<int>(classes_.size());
    require(class_a >= 0 && class_a < nc && class_b >= 0 && class_b < nc && class_a != class_b,
            "target must name two distinct vehicle classes", "target");
    require(!runs.empty(), "diagnosis needs at least one run", "runs");
    const auto& xc = cfg_.xai;
    const auto& test = test_manifest();
    fs::create_directories(out_dir);

    DiagnosisBundle bundle;
    bundle.version_label = label;
    bundle.class_a = class_a;
    bundle.class_b = class_b;
    bundle.classes = classes_;
    bundle.explained_seed = runs.front().seed;
    bundle.bin_width = xc.diagnose_bin_width;
    bundle.dir = out_dir;

    // Orientation fractions pooled over every seed.
    std::vector<PredictionRecord> pooled;
    for (const auto& r : runs) {
        const auto preds = load_predictions(r);
        require(preds.size() == test.records.size(), "predictions do not match the test split", "predictions");
        for (size_t i = 0; i < preds.size(); ++i)
            pooled.push_back({test.records[i].bbox ? test.records[i].label : kBackground, preds[i].column,
                              test.records[i].orientation});
    }
    const auto fractions = orientation_fractions(pooled, class_a, class_b, xc.fraction_bin_width);
    text::write_file((out_dir / "fractions.txt").string(), serialize_bins(fractions, classes_));
    png::write_rgb((out_dir / "fractions.png").string(), render_fractions(fractions));
    bundle.fractions = "fractions.txt";
    bundle.fractions_image = "fractions.png";

    // Explanations use the first seed's model and its predictions.
    const auto model = load_checkpoint(resolve(runs.front().checkpoint));
    const auto preds = load_predictions(runs.front());
    const auto images = load_images(test);
    const auto backgrounds = shap_backgrounds();
    OrientationBinReport layout = orientation_fractions({}, class_a, class_b, xc.diagnose_bin_width);
    const size_t nbins = layout.bins.size();
    std::vector<std::vector<size_t>> a_as_b(nbins), a_ok(nbins), b_ok(nbins);
    for (size_t i = 0; i < test.records.size(); ++i) {
        const auto& rec = test.records[i];
        if (!rec.bbox) continue;
        const size_t k = static_cast<size_t>(layout.bin_index(rec.orientation));
        if (rec.label == class_a && preds[i].column == class_b) a_as_b[k].push_back(i);
        if (rec.label == class_a && preds[i].column == class_a) a_ok[k].push_back(i);
        if (rec.label == class_b && preds[i].column == class_b) b_ok[k].push_back(i);
    }

    const auto store = versions();
    const auto entry = store.load(label);
    std::map<size_t, ExplainedSet> b_maps;  // lazily explained class-B bins
    auto b_map = [&](size_t k) -> const ExplainedSet& {
        auto it = b_maps.find(k);
        if (it == b_maps.end())
            it = b_maps.emplace(k, explain_samples(model, test, images, b_ok[k], class_b, backgrounds, xc, cfg_.seed)).first;
        return it->second;
    };
    std::vector<size_t> b_candidates;
    for (size_t k = 0; k < nbins; ++k)
        if (static_cast<int>(b_ok[k].size()) >= xc.min_samples) b_candidates.push_back(k);

    auto write_map = [&](DiagnosisBin& bin, const std::string& kind, const ExplainedSet& set, const fs::path& dir) {
        save_aggregate(set.aggregate, dir / kind, "samples " + std::to_string(set.samples.size()));
        const auto overlay = upscale_rgb(overlay_mask(set.aggregate, xc.theta_mask, patch_image(set.mean_patch)), 4);
        png::write_rgb((dir / (kind + ".png")).string(), overlay);
        bin.maps[kind] = relative(dir / kind).substr(relative(out_dir).size() + 1);
        bin.overlays[kind] = bin.maps[kind] + ".png";
    };

    auto project = [&](const FeatureSuggestion& s, const std::vector<size_t>& view_samples) {
        SuggestionRecord rec;
        rec.suggestion = s;
        rec.owning_class = classes_[static_cast<size_t>(s.owning_class)];
        AggregatedSaliencyMap cells{s.rows, s.cols, std::vector<double>(static_cast<size_t>(s.rows) * s.cols, 0.0), 1, 0.4};
        for (int c : s.cells) cells.counts[static_cast<size_t>(c)] = 1;
        std::vector<ProjectionView> views;
        for (size_t i : view_samples) views.push_back(projection_view(test.records[i]));
        if (views.empty()) return rec;
        const auto& mesh = entry.mesh(rec.owning_class);
        const auto res = project_saliency(cells, 0.5, views, mesh, xc.projection_coverage);
        rec.faces = res.faces;
        for (const auto& f : res.all) rec.region_share[mesh.faces[static_cast<size_t>(f.face)].region_tag] += f.share;
        return rec;
    };

    bool any = false;
    for (size_t k = 0; k < nbins; ++k) {
        if (a_as_b[k].empty()) continue;
        DiagnosisBin bin;
        bin.lo = layout.bins[k].lo;
        bin.hi = layout.bins[k].hi;
        bin.misclassified = static_cast<int>(a_as_b[k].size());
        if (bin.misclassified < xc.min_samples) {
            bin.warnings.push_back("only " + std::to_string(bin.misclassified) + " misclassified samples (< " +
                                   std::to_string(xc.min_samples) + "); not explained");
            bundle.bins.push_back(std::move(bin));
            continue;
        }
        const auto ab = explain_samples(model, test, images, a_as_b[k], class_b, backgrounds, xc, cfg_.seed);
        const auto ac = explain_samples(model, test, images, a_ok[k], class_a, backgrounds, xc, cfg_.seed);
        bin.a_as_b = static_cast<int>(ab.samples.size());
        bin.a_correct = static_cast<int>(ac.samples.size());
        if (ab.samples.size() < static_cast<size_t>(xc.min_samples)) {
            bin.warnings.push_back("too few misclassified samples with a usable box");
            bundle.bins.push_back(std::move(bin));
            continue;
        }
        if (ac.samples.empty()) bin.warnings.push_back("no correctly classified class-A samples in this bin");
        std::optional<size_t> best;
        for (size_t kb : b_candidates) {
            const auto& bset = b_map(kb);
            if (bset.samples.empty()) continue;
            const double corr = correlate_maps(ab.aggregate, bset.aggregate).max;
            if (!best || corr > bin.correlation) {
                best = kb;
                bin.correlation = corr;
            }
        }
        const fs::path bdir = out_dir / ("bin_" + text::fmt(bin.lo));
        fs::create_directories(bdir);
        write_map(bin, "a_as_b", ab, bdir);
        write_map(bin, "a_correct", ac, bdir);
        if (!best) {
            bin.warnings.push_back("no orientation bin has " + std::to_string(xc.min_samples) +
                                   " correctly classified class-B samples");
            bundle.bins.push_back(std::move(bin));
            continue;
        }
        any = true;
        const auto& bset = b_map(*best);
        bin.b_bin_lo = layout.bins[*best].lo;
        bin.b_correct = static_cast<int>(bset.samples.size());
        write_map(bin, "b_correct", bset, bdir);
        for (const auto& s : suggest_features(ac.aggregate, bset.aggregate, ab.aggregate, ab.mean_patch, bset.mean_patch,
                                              class_a, class_b, bin.lo, xc.suggest)) {
            const auto& views = s.kind == FeatureKind::common ? bset.samples : (ac.samples.empty() ? ab.samples : ac.samples);
            auto rec = project(s, views);
            rec.b_bin_lo = *bin.b_bin_lo;
            bundle.suggestions.push_back(std::move(rec));
        }
        bundle.bins.push_back(std::move(bin));
    }
    if (!any)
        bundle.warnings.push_back("no orientation bin has " + std::to_string(xc.min_samples) +
                                  " misclassified samples with a matching class-B bin; consider another target");
    std::stable_sort(bundle.suggestions.begin(), bundle.suggestions.end(), [](const auto& x, const auto& y) {
        if (x.suggestion.kind != y.suggestion.kind) return x.suggestion.kind == FeatureKind::common;
        return x.suggestion.evidence.saliency > y.suggestion.evidence.saliency;
    });
    text::write_file((out_dir / "bundle.json").string(), to_json(bundle).dump(2) + "\n");
    return bundle;
}

// ---------------------------------------------------------------------------
// Reports

struct PcaComparison {
    PcaResult striped, disjoint;
};

// Evenly spaced frame sequence over the full circle, split two ways: every
// tenth frame to test, or by the configured train/test orientation ranges.
inline PcaComparison pca_check(const Workspace& ws, size_t frames, const std::filesystem::path& out_dir) {
    const auto& cfg = ws.config();
    const auto meshes = ws.reference_meshes();
    std::vector<const MeshModel*> ptrs;
    for (const auto& m : meshes) ptrs.push_back(&m);
    DatasetConfig dc = cfg.dataset;
    const auto plan = plan_sequence(frames, ws.classes().size(), dc, derive_seed(cfg.seed, {hash_label("sequence")}));
    const auto seq = generate_samples(ws.classes(), ptrs, plan, Provenance::real, "v0", out_dir / "sequence", ws.generate_options());
    std::vector<Patch> patches;
    std::vector<int> labels;
    std::vector<double> orient;
    for (const auto& r : seq.records) {
        if (!r.bbox) continue;
        patches.push_back(bbox_patch(png::read_gray(seq.resolve(r).string()), *r.bbox, cfg.xai.map_rows, cfg.xai.map_cols));
        labels.push_back(r.label);
        orient.push_back(r.orientation);
    }
    auto split = [&](auto in_test, auto in_train) {
        std::vector<Patch> tr, te;
        std::vector<int> ltr, lte;
        for (size_t i = 0; i < patches.size(); ++i) {
            if (in_test(i)) {
                te.push_back(patches[i]);
                lte.push_back(labels[i]);
            } else if (in_train(i)) {
                tr.push_back(patches[i]);
                ltr.push_back(labels[i]);
            }
        }
        return pca_leakage(tr, ltr, te, lte);
    };
    PcaComparison out;
    out.striped = split([](size_t i) { return i % 10 == 9; }, [](size_t) { return true; });
    out.disjoint = split([&](size_t i) { return dc.orientations.test.contains(orient[i]); },
                         [&](size_t i) { return dc.orientations.train.contains(orient[i]); });
    std::filesystem::create_directories(out_dir);
    png::write_rgb((out_dir / "pca_striped.png").string(), render_scatter(out.striped));
    png::write_rgb((out_dir / "pca_disjoint.png").string(), render_scatter(out.disjoint));
    std::ostringstream os;
    os << "striped " << text::fmt9(out.striped.overlap) << "\ndisjoint " << text::fmt9(out.disjoint.overlap) << "\n";
    text::write_file((out_dir / "pca.txt").string(), os.str());
    return out;
}

}  // namespace synthloop
