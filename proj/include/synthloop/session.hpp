#pragma once
// The operator loop as a persistent state machine:
//   Train -> Evaluate -> (Done | SelectTarget -> Diagnose -> Modify -> Regenerate -> Train)
// Every transition appends one JSON line to session/events.log; the state is
// the fold of that log, and session/state.json is a snapshot of the fold for
// readers that must not block on the writer.

#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>

#include "synthloop/workspace.hpp"

namespace synthloop {

enum class Step { train, evaluate, select_target, diagnose, modify, regenerate, done };

inline const char* to_string(Step s) {
    switch (s) {
        case Step::train: return "Train";
        case Step::evaluate: return "Evaluate";
        case Step::select_target: return "SelectTarget";
        case Step::diagnose: return "Diagnose";
        case Step::modify: return "Modify";
        case Step::regenerate: return "Regenerate";
        case Step::done: return "Done";
    }
    return "?";
}

inline Step parse_step(const std::string& s) {
    for (Step st : {Step::train, Step::evaluate, Step::select_target, Step::diagnose, Step::modify, Step::regenerate, Step::done})
        if (s == to_string(st)) return st;
    throw Error(ErrorCode::parse_error, "unknown step '" + s + "'", "step");
}

struct SelectedTarget {
    int class_a = 0;
    int class_b = 0;
    double count = 0;
    bool operator_override = false;
    bool operator==(const SelectedTarget&) const = default;
};

struct VersionSummary {
    std::string label;
    std::optional<double> mean_map50;
    std::string averaged_confusion;  // relative path once evaluated
    bool operator==(const VersionSummary&) const = default;
};

struct SessionState {
    int step_counter = 0;  // completed transitions
    Step step = Step::train;
    int iteration = 0;  // evaluations completed
    std::string active_version = "v0";
    std::vector<std::uint64_t> seeds;
    double target_map50 = 0.95;
    int max_iterations = 5;
    std::vector<VersionSummary> versions;  // in training order
    std::vector<RunRecord> runs;
    std::optional<std::string> last_failure;
    std::optional<SelectedTarget> target;
    std::optional<std::string> bundle;  // latest diagnosis directory, relative
    std::vector<ModificationSpec> drafts;
    std::optional<std::string> done_reason;  // "target" or "limit"

    std::vector<RunRecord> runs_of(const std::string& label) const {
        std::vector<RunRecord> out;
        for (const auto& r : runs)
            if (r.version_label == label) out.push_back(r);
        return out;
    }
    std::vector<std::uint64_t> missing_seeds() const {
        std::vector<std::uint64_t> out;
        for (auto s : seeds) {
            bool have = false;
            for (const auto& r : runs) have = have || (r.version_label == active_version && r.seed == s);
            if (!have) out.push_back(s);
        }
        return out;
    }
    VersionSummary* version(const std::string& label) {
        for (auto& v : versions)
            if (v.label == label) return &v;
        return nullptr;
    }
    const VersionSummary* version(const std::string& label) const { return const_cast<SessionState*>(this)->version(label); }
    bool operator==(const SessionState&) const = default;
};

inline std::string specs_text(const std::vector<ModificationSpec>& specs) {
    std::string out;
    for (const auto& s : specs) out += serialize_spec(s);
    return out;
}

inline Json specs_json(const std::vector<ModificationSpec>& specs) {
    Json a = Json::array();
    for (const auto& s : specs) {
        Json sel{{"kind", to_string(s.selector.kind)}};
        if (s.selector.kind == SelectorKind::region)
            sel["regions"] = s.selector.regions;
        else
            sel["faces"] = s.selector.faces;
        a.push_back({{"target_class", s.target_class},
                     {"selector", sel},
                     {"action", to_string(s.action)},
                     {"value", s.value},
                     {"kind", to_string(s.kind)},
                     {"note", s.note},
                     {"version_label", s.version_label}});
    }
    return a;
}

// Field-level parse of a JSON spec body. Type errors name the offending field.
inline ModificationSpec spec_from_json(const Json& j, const std::string& path = "") {
    auto field = [&](const std::string& k) { return path.empty() ? k : path + "." + k; };
    if (!j.is_object()) throw ValidationError({"modification must be an object"}, path);
    ModificationSpec s;
    auto str = [&](const char* k, std::string& out, bool required) {
        if (!j.contains(k)) {
            if (required) throw ValidationError({std::string(k) + " is required"}, field(k));
            return;
        }
        if (!j.at(k).is_string()) throw ValidationError({std::string(k) + " must be a string"}, field(k));
        out = j.at(k).get<std::string>();
    };
    std::string action, kind;
    str("target_class", s.target_class, true);
    str("action", action, true);
    str("kind", kind, false);
    str("note", s.note, false);
    str("version_label", s.version_label, true);
    try {
        s.action = parse_action(action);
    } catch (const Error&) {
        throw ValidationError({"unknown action '" + action + "'"}, field("action"));
    }
    if (!kind.empty()) {
        try {
            s.kind = parse_modification_kind(kind);
        } catch (const Error&) {
            throw ValidationError({"unknown kind '" + kind + "'"}, field("kind"));
        }
    } else {
        s.kind = s.action == ActionKind::scale_emission ? ModificationKind::disruptive : ModificationKind::reinforcing;
    }
    if (!j.contains("value") || !j.at("value").is_number()) throw ValidationError({"value must be a number"}, field("value"));
    s.value = j.at("value").get<double>();
    if (!j.contains("selector") || !j.at("selector").is_object())
        throw ValidationError({"selector must be an object"}, field("selector"));
    const auto& sel = j.at("selector");
    const std::string sk = sel.value("kind", std::string("region"));
    try {
        s.selector.kind = parse_selector_kind(sk);
    } catch (const Error&) {
        throw ValidationError({"unknown selector kind '" + sk + "'"}, field("selector.kind"));
    }
    try {
        if (sel.contains("regions")) s.selector.regions = sel.at("regions").get<std::vector<std::string>>();
    } catch (const std::exception&) {
        throw ValidationError({"regions must be a list of strings"}, field("selector.regions"));
    }
    try {
        if (sel.contains("faces")) s.selector.faces = sel.at("faces").get<std::vector<int>>();
    } catch (const std::exception&) {
        throw ValidationError({"faces must be a list of integers"}, field("selector.faces"));
    }
    return s;
}

namespace detail {

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    const auto tmp = path.string() + ".tmp";
    text::write_file(tmp, content);
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline Json to_json(const SessionState& s) {
    Json versions = Json::array();
    for (const auto& v : s.versions)
        versions.push_back({{"label", v.label},
                            {"mean_map50", v.mean_map50 ? Json(*v.mean_map50) : Json(nullptr)},
                            {"averaged_confusion", v.averaged_confusion}});
    Json runs = Json::array();
    for (const auto& r : s.runs) runs.push_back(to_json(r));
    Json target = nullptr;
    if (s.target)
        target = {{"class_a", s.target->class_a},
                  {"class_b", s.target->class_b},
                  {"count", s.target->count},
                  {"operator_override", s.target->operator_override}};
    auto opt = [](const std::optional<std::string>& v) { return v ? Json(*v) : Json(nullptr); };
    return Json{{"step_counter", s.step_counter},
                {"step", to_string(s.step)},
                {"iteration", s.iteration},
                {"active_version", s.active_version},
                {"seeds", s.seeds},
                {"target_map50", s.target_map50},
                {"max_iterations", s.max_iterations},
                {"versions", versions},
                {"runs", runs},
                {"last_failure", opt(s.last_failure)},
                {"target", target},
                {"bundle", opt(s.bundle)},
                {"drafts", specs_json(s.drafts)},
                {"done_reason", opt(s.done_reason)}};
}

inline SessionState state_from_json(const Json& j) {
    SessionState s;
    s.step_counter = j.at("step_counter").get<int>();
    s.step = parse_step(j.at("step").get<std::string>());
    s.iteration = j.at("iteration").get<int>();
    s.active_version = j.at("active_version").get<std::string>();
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.target_map50 = j.at("target_map50").get<double>();
    s.max_iterations = j.at("max_iterations").get<int>();
    for (const auto& v : j.at("versions")) {
        VersionSummary vs;
        vs.label = v.at("label").get<std::string>();
        if (!v.at("mean_map50").is_null()) vs.mean_map50 = v.at("mean_map50").get<double>();
        vs.averaged_confusion = v.at("averaged_confusion").get<std::string>();
        s.versions.push_back(vs);
    }
    for (const auto& r : j.at("runs")) s.runs.push_back(run_from_json(r));
    auto opt = [&](const char* k) -> std::optional<std::string> {
        if (j.at(k).is_null()) return std::nullopt;
        return j.at(k).get<std::string>();
    };
    s.last_failure = opt("last_failure");
    if (!j.at("target").is_null()) {
        const auto& t = j.at("target");
        s.target = SelectedTarget{t.at("class_a").get<int>(), t.at("class_b").get<int>(), t.at("count").get<double>(),
                                  t.at("operator_override").get<bool>()};
    }
    s.bundle = opt("bundle");
    for (const auto& d : j.at("drafts")) s.drafts.push_back(spec_from_json(d));
    s.done_reason = opt("done_reason");
    return s;
}

// Applies one logged event to the state. Events carry everything needed, so
// the fold never touches the filesystem.
inline void apply_event(SessionState& s, const Json& e) {
    const std::string type = e.at("type").get<std::string>();
    const Json& p = e.at("payload");
    auto advance = [&](Step next) {
        ++s.step_counter;
        s.step = next;
    };
    if (type == "start") {
        s = SessionState{};
        s.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
        s.target_map50 = p.at("target_map50").get<double>();
        s.max_iterations = p.at("max_iterations").get<int>();
        s.active_version = p.at("version").get<std::string>();
        s.versions.push_back({s.active_version, std::nullopt, ""});
    } else if (type == "run") {
        s.runs.push_back(run_from_json(p.at("run")));
        s.last_failure.reset();
    } else if (type == "train_failed") {
        s.last_failure = p.at("message").get<std::string>();
    } else if (type == "train") {
        advance(Step::evaluate);
    } else if (type == "evaluate") {
        auto* v = s.version(s.active_version);
        v->mean_map50 = p.at("mean_map50").get<double>();
        v->averaged_confusion = p.at("averaged_confusion").get<std::string>();
        ++s.iteration;
        if (p.at("done_reason").is_null()) {
            advance(Step::select_target);
        } else {
            s.done_reason = p.at("done_reason").get<std::string>();
            advance(Step::done);
        }
    } else if (type == "select") {
        s.target = SelectedTarget{p.at("class_a").get<int>(), p.at("class_b").get<int>(), p.at("count").get<double>(),
                                  p.at("operator_override").get<bool>()};
        advance(Step::diagnose);
    } else if (type == "diagnose") {
        s.bundle = p.at("bundle").get<std::string>();
        advance(Step::modify);
    } else if (type == "drafts") {
        s.drafts = parse_specs(p.at("specs").get<std::string>());
    } else if (type == "modify") {
        s.drafts.clear();
        if (p.at("version").is_null()) {
            advance(Step::select_target);
        } else {
            s.active_version = p.at("version").get<std::string>();
            s.versions.push_back({s.active_version, std::nullopt, ""});
            advance(Step::regenerate);
        }
    } else if (type == "regenerate") {
        advance(Step::train);
    } else {
        throw Error(ErrorCode::parse_error, "unknown session event '" + type + "'", "type");
    }
}

inline std::vector<Json> read_events(const std::filesystem::path& log) {
    std::vector<Json> out;
    if (!std::filesystem::exists(log)) return out;
    int line_no = 0;
    for (const auto& line : text::lines(text::read_file(log.string()))) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const Json::parse_error& e) {
            throw ParseError(line_no, "event", e.what());
        }
    }
    return out;
}

inline SessionState replay(const std::vector<Json>& events) {
    if (events.empty() || events.front().at("type") != "start")
        throw Error(ErrorCode::parse_error, "session log must begin with a start event", "events");
    SessionState s;
    for (const auto& e : events) apply_event(s, e);
    return s;
}

// Progress hook for long steps: (message).
using ProgressFn = std::function<void(const std::string&)>;

class Session {
public:
    static std::filesystem::path dir(const Workspace& ws) { return ws.root() / "session"; }
    static bool exists(const Workspace& ws) { return std::filesystem::exists(dir(ws) / "events.log"); }

    static Session start(const Workspace& ws) {
        if (exists(ws)) throw Error(ErrorCode::state_conflict, "a session already exists in " + ws.root().string(), "session");
        const auto store = ws.versions();
        if (!store.contains("v0")) throw Error(ErrorCode::not_found, "benchmark assets or v0 meshes missing", "assets");
        for (const auto& c : ws.classes())
            if (!std::filesystem::exists(ws.root() / "assets" / "reference" / (c + ".mesh")))
                throw Error(ErrorCode::not_found, "reference mesh missing for class '" + c + "'", "assets");
        std::filesystem::create_directories(dir(ws));
        Session s(ws);
        const auto& sc = ws.config().session;
        s.append("start", Json{{"seeds", sc.seeds}, {"target_map50", sc.target_map50}, {"max_iterations", sc.max_iterations},
                               {"version", "v0"}});
        return s;
    }

    // Rebuilds the state from the log and refreshes the snapshot if stale.
    static Session open(const Workspace& ws) {
        if (!exists(ws)) throw Error(ErrorCode::not_found, "no session in " + ws.root().string() + " (run init)", "session");
        Session s(ws);
        s.state_ = replay(read_events(dir(ws) / "events.log"));
        s.events_ = static_cast<int>(read_events(dir(ws) / "events.log").size());
        const auto snap = dir(ws) / "state.json";
        if (!std::filesystem::exists(snap) || snapshot(ws) != s.state_) s.persist();
        return s;
    }

    // Last persisted state, without taking the writer role.
    static SessionState snapshot(const Workspace& ws) {
        const auto path = dir(ws) / "state.json";
        if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "no session in " + ws.root().string(), "session");
        return state_from_json(Json::parse(text::read_file(path.string())));
    }

    const SessionState& state() const { return state_; }
    const Workspace& workspace() const { return ws_; }

    // Trains every seed still missing for the active version. A failure is
    // logged and rethrown; completed seeds are kept and not retrained.
    const SessionState& step_train(std::optional<int> expect = {}, const ProgressFn& progress = {}) {
        check(Step::train, expect, "train");
        for (auto seed : state_.missing_seeds()) {
            RunRecord r;
            try {
                if (progress) progress("training " + state_.active_version + " seed " + std::to_string(seed));
                const auto start_model = warm_start_model(seed);
                r = ws_.train_run(state_.active_version, seed, start_model ? &*start_model : nullptr);
            } catch (const std::exception& e) {
                append("train_failed", Json{{"seed", seed}, {"message", e.what()}});
                throw;
            }
            append("run", Json{{"run", to_json(r)}});
        }
        append("train", Json{{"version", state_.active_version}});
        return state_;
    }

    const SessionState& step_evaluate(std::optional<int> expect = {}) {
        check(Step::evaluate, expect, "evaluate");
        const auto runs = state_.runs_of(state_.active_version);
        if (runs.size() != state_.seeds.size())
            throw Error(ErrorCode::state_conflict, "incomplete runs for " + state_.active_version, "runs");
        std::vector<ConfusionMatrix> cms;
        double mean = 0;
        for (const auto& r : runs) {
            for (const auto& p : {r.confusion, r.checkpoint, r.predictions})
                if (!std::filesystem::exists(ws_.resolve(p)))
                    throw Error(ErrorCode::not_found, "run artifact missing: " + p, "runs");
            cms.push_back(ws_.load_confusion(r));
            mean += r.map50 / static_cast<double>(runs.size());
        }
        const auto avg = average_confusion(cms);
        const auto path = ws_.root() / "runs" / state_.active_version / "confusion_avg.txt";
        text::write_file(path.string(), serialize_confusion(avg, ws_.classes()));
        Json reason = nullptr;
        if (mean >= state_.target_map50)
            reason = "target";
        else if (state_.iteration + 1 >= state_.max_iterations)
            reason = "limit";
        append("evaluate", Json{{"mean_map50", mean}, {"averaged_confusion", ws_.relative(path)}, {"done_reason", reason}});
        return state_;
    }

    ConfusionMatrix averaged_confusion(const std::string& label) const {
        const auto* v = state_.version(label);
        if (!v || v->averaged_confusion.empty())
            throw Error(ErrorCode::not_found, "version " + label + " has not been evaluated", "version");
        return parse_confusion(text::read_file(ws_.resolve(v->averaged_confusion).string()));
    }

    // Defaults to the largest off-diagonal vehicle confusion.
    const SessionState& step_select(std::optional<std::pair<int, int>> choice = {}, std::optional<int> expect = {}) {
        check(Step::select_target, expect, "select");
        const auto avg = averaged_confusion(state_.active_version);
        const auto def = select_target(avg);
        SelectedTarget t;
        if (choice) {
            const auto [a, b] = *choice;
            const int bg = avg.background();
            if (a < 0 || b < 0 || a >= bg || b >= bg)
                throw Error(ErrorCode::invalid_argument, "target must name two vehicle classes (background is excluded)", "target");
            if (a == b) throw Error(ErrorCode::invalid_argument, "target must be off-diagonal", "target");
            t = {a, b, avg(a, b), !def || def->class_a != a || def->class_b != b};
        } else {
            if (!def)
                throw Error(ErrorCode::insufficient_samples, "no off-diagonal vehicle confusion to target; choose one explicitly",
                            "target");
            t = {def->class_a, def->class_b, def->count, false};
        }
        append("select", Json{{"class_a", t.class_a}, {"class_b", t.class_b}, {"count", t.count},
                              {"operator_override", t.operator_override}});
        return state_;
    }

    const SessionState& step_diagnose(std::optional<int> expect = {}, const ProgressFn& progress = {}) {
        check(Step::diagnose, expect, "diagnose");
        const auto& t = *state_.target;
        const auto out = dir(ws_) / "diagnoses" / ("step" + std::to_string(state_.step_counter));
        if (progress) progress("diagnosing " + ws_.classes()[static_cast<size_t>(t.class_a)] + " as " +
                               ws_.classes()[static_cast<size_t>(t.class_b)]);
        std::filesystem::remove_all(out);
        auto bundle = ws_.diagnose(state_.active_version, state_.runs_of(state_.active_version), t.class_a, t.class_b, out);
        if (t.count == 0) {
            bundle.warnings.insert(bundle.warnings.begin(), "target has no misclassified test instances; select another target");
            text::write_file((out / "bundle.json").string(), to_json(bundle).dump(2) + "\n");
        }
        append("diagnose", Json{{"bundle", ws_.relative(out)}, {"warnings", bundle.warnings}});
        return state_;
    }

    DiagnosisBundle bundle() const {
        if (!state_.bundle) throw Error(ErrorCode::not_found, "no diagnosis has been run", "bundle");
        return load_bundle(ws_.resolve(*state_.bundle));
    }

    // Validates drafts against the active version without changing it.
    const SessionState& set_drafts(const std::vector<ModificationSpec>& specs) {
        if (state_.step != Step::modify)
            throw Error(ErrorCode::state_conflict, std::string("drafts are accepted at Modify; session is at ") + to_string(state_.step),
                        "step");
        check_specs(specs);
        append("drafts", Json{{"specs", specs_text(specs)}});
        return state_;
    }

    // Empty `specs` skips back to target selection.
    const SessionState& step_modify(const std::vector<ModificationSpec>& specs, std::optional<int> expect = {}) {
        check(Step::modify, expect, "modify");
        if (specs.empty()) {
            append("modify", Json{{"version", nullptr}, {"specs", ""}});
            return state_;
        }
        check_specs(specs);
        auto store = ws_.versions();
        const std::string label = specs.front().version_label;
        // A crash between writing the version and logging it leaves an
        // identical version behind; adopt it instead of failing.
        bool adopt = false;
        if (store.contains(label)) {
            const auto e = store.load(label);
            adopt = e.parent == state_.active_version && e.specs == specs;
        }
        if (!adopt) store.apply(state_.active_version, specs);
        append("modify", Json{{"version", label}, {"parent", state_.active_version}, {"specs", specs_text(specs)}});
        return state_;
    }

    const SessionState& step_regenerate(std::optional<int> expect = {}, const ProgressFn& progress = {}) {
        check(Step::regenerate, expect, "regenerate");
        if (progress) progress("regenerating " + state_.active_version);
        ws_.regenerate(state_.active_version);
        append("regenerate", Json{{"version", state_.active_version},
                                  {"manifest", ws_.relative(ws_.version_data_dir(state_.active_version) / "train.manifest")}});
        return state_;
    }

    // One transition with default operator choices: the ranked target and
    // the pending drafts.
    const SessionState& advance(std::optional<int> expect = {}, const ProgressFn& progress = {}) {
        switch (state_.step) {
            case Step::train: return step_train(expect, progress);
            case Step::evaluate: return step_evaluate(expect);
            case Step::select_target: return step_select({}, expect);
            case Step::diagnose: return step_diagnose(expect, progress);
            case Step::modify: return step_modify(state_.drafts, expect);
            case Step::regenerate: return step_regenerate(expect, progress);
            case Step::done: break;
        }
        throw Error(ErrorCode::state_conflict, "session is done (" + state_.done_reason.value_or("?") + ")", "step");
    }

private:
    explicit Session(const Workspace& ws) : ws_(ws) {}

    void check(Step want, std::optional<int> expect, const char* op) const {
        if (state_.step != want)
            throw Error(ErrorCode::state_conflict,
                        std::string(op) + " requires step " + to_string(want) + "; session is at " + to_string(state_.step), "step");
        if (expect && *expect != state_.step_counter)
            throw Error(ErrorCode::state_conflict,
                        "step counter is " + std::to_string(state_.step_counter) + ", request expected " +
                            std::to_string(*expect) + "; the step was already applied",
                        "step_counter");
        if (want == Step::diagnose && !state_.target) throw Error(ErrorCode::state_conflict, "no target selected", "target");
    }

    void check_specs(const std::vector<ModificationSpec>& specs) const {
        if (specs.empty()) return;
        for (const auto& s : specs) validate(s);
        const std::string label = specs.front().version_label;
        for (const auto& s : specs)
            if (s.version_label != label)
                throw Error(ErrorCode::invalid_argument, "specs of one version must share its label", "version_label");
        const auto store = ws_.versions();
        if (store.contains(label) && !(store.load(label).parent == state_.active_version && store.load(label).specs == specs))
            throw Error(ErrorCode::invalid_argument, "version_label '" + label + "' already used", "version_label");
        apply_all(store.load(state_.active_version).meshes, specs, label);  // mesh-dependent checks
    }

    std::optional<DetectorModel> warm_start_model(std::uint64_t seed) const {
        if (!ws_.config().session.warm_start) return std::nullopt;
        const auto parent = ws_.versions().load(state_.active_version).parent;
        if (!parent) return std::nullopt;
        for (const auto& r : state_.runs)
            if (r.version_label == *parent && r.seed == seed) return load_checkpoint(ws_.resolve(r.checkpoint));
        return std::nullopt;
    }

    void append(const std::string& type, Json payload) {
        Json e{{"seq", events_},
               {"time", detail::utc_now()},
               {"type", type},
               {"step", to_string(state_.step)},
               {"payload", std::move(payload)}};
        SessionState next = state_;
        apply_event(next, e);
        {
            std::ofstream out(dir(ws_) / "events.log", std::ios::app | std::ios::binary);
            out << e.dump() << '\n';
            out.flush();
            if (!out) throw Error(ErrorCode::io_error, "cannot append to session log", "events");
        }
        ++events_;
        state_ = std::move(next);
        persist();
    }

    void persist() const { detail::write_atomic(dir(ws_) / "state.json", to_json(state_).dump(2) + "\n"); }

    Workspace ws_;
    SessionState state_;
    int events_ = 0;
};

}  // namespace synthloop
