#pragma once
// Local HTTP/JSON service over a session directory. Reads are projections of
// persisted files; writes go through one Session instance guarded by a
// mutex, and long steps run on a single background job.

#include <atomic>
#include <mutex>
#include <thread>

// Before httplib: <resolv.h> defines a `_res` macro that breaks Eigen.
#include "synthloop/session.hpp"

#include "httplib.h"

namespace synthloop {

inline int http_status(ErrorCode c) {
    switch (c) {
        case ErrorCode::state_conflict:
        case ErrorCode::busy: return 409;
        case ErrorCode::not_found: return 404;
        case ErrorCode::invalid_argument:
        case ErrorCode::parse_error:
        case ErrorCode::validation_failed:
        case ErrorCode::insufficient_samples: return 422;
        case ErrorCode::io_error:
        case ErrorCode::numerical_error: return 500;
    }
    return 500;
}

inline Json error_json(const Error& e) {
    Json j{{"code", to_string(e.code())}, {"message", e.what()}, {"field", e.field()}};
    if (const auto* v = dynamic_cast<const ValidationError*>(&e)) j["violations"] = v->violations();
    return Json{{"error", j}};
}

inline Json to_json(const ConfusionMatrix& m, const std::vector<std::string>& classes) {
    Json rows = Json::array();
    Json sums = Json::array();
    for (int r = 0; r < m.size; ++r) {
        Json row = Json::array();
        for (int c = 0; c < m.size; ++c) row.push_back(m(r, c));
        rows.push_back(row);
        sums.push_back(m.row_sum(r));
    }
    auto labels = classes;
    labels.push_back("background");
    return Json{{"labels", labels}, {"size", m.size}, {"cells", rows}, {"row_sums", sums}};
}

inline Json to_json(const MeshModel& m) {
    Json verts = Json::array();
    for (const auto& v : m.vertices) verts.push_back({v.x, v.y, v.z});
    Json faces = Json::array();
    for (const auto& f : m.faces)
        faces.push_back({{"vertex_indices", f.vertex_indices},
                         {"region_tag", f.region_tag},
                         {"material",
                          {{"emission", f.material.emission},
                           {"reflectance", f.material.reflectance},
                           {"smoothness", f.material.smoothness}}}});
    return Json{{"class_id", m.class_id}, {"version_label", m.version_label}, {"vertices", verts}, {"faces", faces}};
}

inline Json to_json(const OrientationBinReport& r, const std::vector<std::string>& classes) {
    Json bins = Json::array();
    for (const auto& b : r.bins) {
        const auto f = b.fraction();
        bins.push_back({{"lo", b.lo},
                        {"hi", b.hi},
                        {"correct", b.correct},
                        {"misclassified", b.misclassified},
                        {"other", b.other},
                        {"fraction", f ? Json(*f) : Json(nullptr)}});
    }
    return Json{{"class_a", r.class_a},
                {"class_b", r.class_b},
                {"class_a_name", classes[static_cast<size_t>(r.class_a)]},
                {"class_b_name", classes[static_cast<size_t>(r.class_b)]},
                {"bin_width", r.bin_width},
                {"bins", bins}};
}

struct JobStatus {
    std::string id;
    std::string step;
    std::string state;  // running, succeeded, failed, interrupted
    std::string message;
    Json error = nullptr;
    int step_counter_before = 0;
};

inline Json to_json(const JobStatus& j) {
    return Json{{"id", j.id},           {"step", j.step},   {"state", j.state},
                {"message", j.message}, {"error", j.error}, {"step_counter_before", j.step_counter_before}};
}

class Service {
public:
    explicit Service(const std::filesystem::path& workdir) : ws_(Workspace::open(workdir)), session_(Session::open(ws_)) {
        // A job recorded as running belongs to a previous process.
        if (auto j = load_job(); j && j->value("state", "") == "running") {
            (*j)["state"] = "interrupted";
            detail::write_atomic(job_path(), j->dump(2) + "\n");
        }
        routes();
    }
    ~Service() {
        stop();
        if (worker_.joinable()) worker_.join();
    }
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    httplib::Server& server() { return server_; }
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }
    int bind_any(const std::string& host) { return server_.bind_to_any_port(host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_idle() {
        if (worker_.joinable()) worker_.join();
    }
    bool busy() const { return busy_; }

private:
    using Req = httplib::Request;
    using Res = httplib::Response;

    std::filesystem::path job_path() const { return Session::dir(ws_) / "job.json"; }

    std::optional<Json> load_job() const {
        if (!std::filesystem::exists(job_path())) return std::nullopt;
        return Json::parse(text::read_file(job_path().string()));
    }

    void save_job(const JobStatus& j) { detail::write_atomic(job_path(), to_json(j).dump(2) + "\n"); }

    static void send(Res& res, const Json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    // Wraps a handler so domain errors become ApiError bodies.
    template <typename F>
    auto guarded(F f) {
        return [f](const Req& req, Res& res) {
            try {
                f(req, res);
            } catch (const Error& e) {
                send(res, error_json(e), http_status(e.code()));
            } catch (const Json::exception& e) {
                send(res, error_json(Error(ErrorCode::parse_error, e.what(), "body")), 422);
            } catch (const std::exception& e) {
                send(res, error_json(Error(ErrorCode::io_error, e.what())), 500);
            }
        };
    }

    static std::string param(const Req& req, const char* name, std::optional<std::string> def = {}) {
        if (req.has_param(name)) return req.get_param_value(name);
        if (def) return *def;
        throw Error(ErrorCode::invalid_argument, std::string("missing query parameter '") + name + "'", name);
    }

    int class_param(const std::string& v, const char* field) const {
        long long idx = 0;
        if (text::parse_long(v, idx)) {
            if (idx < 0 || idx >= static_cast<long long>(ws_.classes().size()))
                throw Error(ErrorCode::invalid_argument, "class index " + v + " out of range", field);
            return static_cast<int>(idx);
        }
        try {
            return ws_.class_index(v);
        } catch (const Error&) {
            throw Error(ErrorCode::invalid_argument, "unknown class '" + v + "'", field);
        }
    }

    int class_value(const Json& v, const char* field) const {
        if (v.is_number_integer()) return class_param(std::to_string(v.get<long long>()), field);
        if (v.is_string()) return class_param(v.get<std::string>(), field);
        throw ValidationError({std::string(field) + " must be a class name or index"}, field);
    }

    static Json body_of(const Req& req) {
        if (req.body.empty()) return Json::object();
        try {
            return Json::parse(req.body);
        } catch (const Json::parse_error& e) {
            throw Error(ErrorCode::parse_error, std::string("request body is not JSON: ") + e.what(), "body");
        }
    }

    static std::optional<int> expected_counter(const Json& body) {
        if (!body.contains("step_counter") || body.at("step_counter").is_null()) return std::nullopt;
        if (!body.at("step_counter").is_number_integer())
            throw ValidationError({"step_counter must be an integer"}, "step_counter");
        return body.at("step_counter").get<int>();
    }

    // Latest diagnosis bundle for a pair (any pair when unspecified).
    DiagnosisBundle find_bundle(std::optional<std::pair<int, int>> pair) const {
        const auto root = Session::dir(ws_) / "diagnoses";
        std::vector<std::pair<int, std::filesystem::path>> dirs;
        if (std::filesystem::exists(root))
            for (const auto& d : std::filesystem::directory_iterator(root)) {
                long long n = 0;
                const auto name = d.path().filename().string();
                if (name.rfind("step", 0) == 0 && text::parse_long(name.substr(4), n) && std::filesystem::exists(d.path() / "bundle.json"))
                    dirs.push_back({static_cast<int>(n), d.path()});
            }
        std::sort(dirs.rbegin(), dirs.rend());
        for (const auto& [n, d] : dirs) {
            auto b = load_bundle(d);
            if (!pair || (b.class_a == pair->first && b.class_b == pair->second)) return b;
        }
        throw Error(ErrorCode::not_found, pair ? "no diagnosis for this class pair" : "no diagnosis has been run", "bundle");
    }

    std::string artifact_id(const std::filesystem::path& file) {
        const auto id = text::fnv1a_hex(text::read_file(file.string()));
        std::lock_guard lock(artifacts_mutex_);
        artifacts_[id] = file;
        return id;
    }

    std::optional<std::filesystem::path> find_artifact(const std::string& id) {
        {
            std::lock_guard lock(artifacts_mutex_);
            if (auto it = artifacts_.find(id); it != artifacts_.end() && std::filesystem::exists(it->second)) return it->second;
        }
        for (const auto* sub : {"session", "reports", "runs"}) {
            const auto dir = ws_.root() / sub;
            if (!std::filesystem::exists(dir)) continue;
            for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
                if (e.is_regular_file() && e.path().extension() == ".png" && artifact_id(e.path()) == id) return e.path();
        }
        return std::nullopt;
    }

    Json session_json() const {
        const auto st = Session::snapshot(ws_);
        Json j = to_json(st);
        j["classes"] = ws_.classes();
        const auto store = ws_.versions();
        Json lineage = Json::array();
        for (const auto& label : store.labels()) {
            const auto e = store.load(label);
            lineage.push_back({{"label", label},
                               {"parent", e.parent ? Json(*e.parent) : Json(nullptr)},
                               {"specs", specs_json(e.specs)}});
        }
        j["lineage"] = lineage;
        const auto job = load_job();
        j["job"] = job ? *job : Json(nullptr);
        return j;
    }

    void start_job(const std::string& step, std::function<void(const ProgressFn&)> work, Res& res) {
        if (worker_.joinable()) worker_.join();
        JobStatus job;
        job.id = "job-" + std::to_string(session_.state().step_counter) + "-" + std::to_string(++job_seq_);
        job.step = step;
        job.state = "running";
        job.step_counter_before = session_.state().step_counter;
        save_job(job);
        busy_ = true;
        worker_ = std::thread([this, job, work = std::move(work)]() mutable {
            std::lock_guard lock(writer_);
            try {
                work([&](const std::string& msg) {
                    job.message = msg;
                    save_job(job);
                });
                job.state = "succeeded";
                job.message.clear();
            } catch (const Error& e) {
                job.state = "failed";
                job.error = error_json(e).at("error");
            } catch (const std::exception& e) {
                job.state = "failed";
                job.error = error_json(Error(ErrorCode::io_error, e.what())).at("error");
            }
            save_job(job);
            busy_ = false;
        });
        send(res, Json{{"job_id", job.id}, {"step", step}}, 202);
    }

    void routes() {
        server_.Get("/session", guarded([this](const Req&, Res& res) { send(res, session_json()); }));

        server_.Get("/confusion", guarded([this](const Req& req, Res& res) {
            const auto st = Session::snapshot(ws_);
            const auto version = param(req, "version", st.active_version);
            const auto seed = param(req, "seed", std::string("avg"));
            ConfusionMatrix m;
            if (seed == "avg") {
                const auto* v = st.version(version);
                if (!v || v->averaged_confusion.empty())
                    throw Error(ErrorCode::not_found, "version " + version + " has not been evaluated", "version");
                m = parse_confusion(text::read_file(ws_.resolve(v->averaged_confusion).string()));
            } else {
                long long s = 0;
                if (!text::parse_long(seed, s)) throw Error(ErrorCode::invalid_argument, "seed must be 'avg' or an integer", "seed");
                std::optional<RunRecord> run;
                for (const auto& r : st.runs)
                    if (r.version_label == version && r.seed == static_cast<std::uint64_t>(s)) run = r;
                if (!run) throw Error(ErrorCode::not_found, "no run for " + version + " seed " + seed, "seed");
                m = ws_.load_confusion(*run);
            }
            Json j = to_json(m, ws_.classes());
            j["version"] = version;
            j["seed"] = seed;
            send(res, j);
        }));

        server_.Get("/saliency", guarded([this](const Req& req, Res& res) {
            const int a = class_param(param(req, "classA"), "classA");
            const int b = class_param(param(req, "classB"), "classB");
            const auto kind = param(req, "kind", std::string("a_as_b"));
            if (kind != "a_as_b" && kind != "a_correct" && kind != "b_correct")
                throw Error(ErrorCode::invalid_argument, "kind must be a_as_b, a_correct or b_correct", "kind");
            double bin = 0;
            if (!text::parse_double(param(req, "bin"), bin)) throw Error(ErrorCode::invalid_argument, "bin must be a number", "bin");
            const auto bundle = find_bundle(std::pair{a, b});
            for (const auto& bn : bundle.bins) {
                if (!(bin >= bn.lo && bin < bn.hi)) continue;
                Json j{{"class_a", a}, {"class_b", b}, {"bin_lo", bn.lo}, {"bin_hi", bn.hi}, {"kind", kind}, {"warnings", bn.warnings}};
                const auto it = bn.maps.find(kind);
                if (it == bn.maps.end()) {
                    j["map"] = nullptr;
                    j["overlay"] = nullptr;
                    send(res, j);
                    return;
                }
                const auto stem = (bundle.dir / it->second).string();
                AggregatedSaliencyMap m = load_aggregate(stem);
                j["map"] = {{"height", m.height}, {"width", m.width}, {"n", m.n}, {"theta_contrib", m.theta_contrib}, {"counts", m.counts}};
                j["overlay"] = artifact_id(bundle.dir / bn.overlays.at(kind));
                if (kind == "b_correct" && bn.b_bin_lo) j["b_bin_lo"] = *bn.b_bin_lo;
                send(res, j);
                return;
            }
            throw Error(ErrorCode::not_found, "no diagnosed orientation bin contains " + text::fmt(bin), "bin");
        }));

        server_.Get("/suggestions", guarded([this](const Req&, Res& res) {
            const auto bundle = find_bundle(std::nullopt);
            Json j = to_json(bundle);
            j["fractions_image"] = artifact_id(bundle.dir / bundle.fractions_image);
            send(res, j);
        }));

        server_.Get("/orientation-fractions", guarded([this](const Req& req, Res& res) {
            const auto st = Session::snapshot(ws_);
            const auto pair = text::split(param(req, "pair"), ',');
            if (pair.size() != 2) throw Error(ErrorCode::invalid_argument, "pair must be 'A,B'", "pair");
            const int a = class_param(pair[0], "pair"), b = class_param(pair[1], "pair");
            const auto version = param(req, "version", st.active_version);
            const auto runs = st.runs_of(version);
            if (runs.empty()) throw Error(ErrorCode::not_found, "no runs for version " + version, "version");
            const auto& test = ws_.test_manifest();
            std::vector<PredictionRecord> pooled;
            for (const auto& r : runs) {
                const auto preds = ws_.load_predictions(r);
                for (size_t i = 0; i < preds.size() && i < test.records.size(); ++i)
                    pooled.push_back({test.records[i].bbox ? test.records[i].label : kBackground, preds[i].column, test.records[i].orientation});
            }
            double width = ws_.config().xai.fraction_bin_width;
            if (req.has_param("width") && !text::parse_double(req.get_param_value("width"), width))
                throw Error(ErrorCode::invalid_argument, "width must be a number", "width");
            Json j = to_json(orientation_fractions(pooled, a, b, width), ws_.classes());
            j["version"] = version;
            j["seeds"] = runs.size();
            send(res, j);
        }));

        server_.Get("/metrics", guarded([this](const Req&, Res& res) {
            const auto st = Session::snapshot(ws_);
            const auto store = ws_.versions();
            Json versions = Json::array();
            for (const auto& v : st.versions) {
                Json seeds = Json::array();
                for (const auto& r : st.runs_of(v.label)) seeds.push_back({{"seed", r.seed}, {"map50", r.map50}, {"duration_s", r.duration_s}});
                const auto e = store.load(v.label);
                versions.push_back({{"label", v.label},
                                    {"parent", e.parent ? Json(*e.parent) : Json(nullptr)},
                                    {"mean_map50", v.mean_map50 ? Json(*v.mean_map50) : Json(nullptr)},
                                    {"runs", seeds},
                                    {"specs", specs_text(e.specs)}});
            }
            send(res, Json{{"versions", versions}, {"target_map50", st.target_map50}});
        }));

        server_.Get("/mesh", guarded([this](const Req& req, Res& res) {
            const auto st = Session::snapshot(ws_);
            const int cls = class_param(param(req, "class"), "class");
            const auto version = param(req, "version", st.active_version);
            const auto store = ws_.versions();
            if (!store.contains(version)) throw Error(ErrorCode::not_found, "unknown version '" + version + "'", "version");
            send(res, to_json(store.load(version).mesh(ws_.classes()[static_cast<size_t>(cls)])));
        }));

        server_.Get(R"(/image/([0-9a-f]+))", guarded([this](const Req& req, Res& res) {
            const auto id = req.matches[1].str();
            const auto path = find_artifact(id);
            if (!path) throw Error(ErrorCode::not_found, "unknown artifact " + id, "artifact");
            res.set_header("Cache-Control", "public, max-age=31536000, immutable");
            res.set_content(text::read_file(path->string()), "image/png");
        }));

        server_.Post("/target", guarded([this](const Req& req, Res& res) {
            const auto body = body_of(req);
            std::optional<std::pair<int, int>> choice;
            if (body.contains("class_a") || body.contains("class_b")) {
                if (!body.contains("class_a") || !body.contains("class_b"))
                    throw ValidationError({"class_a and class_b must be given together"}, body.contains("class_a") ? "class_b" : "class_a");
                choice = std::pair{class_value(body.at("class_a"), "class_a"), class_value(body.at("class_b"), "class_b")};
            }
            with_writer([&] { session_.step_select(choice, expected_counter(body)); });
            send(res, session_json());
        }));

        server_.Post("/modifications", guarded([this](const Req& req, Res& res) {
            const auto body = body_of(req);
            const Json list = body.is_array() ? body : body.value("modifications", Json::array());
            if (!list.is_array()) throw ValidationError({"modifications must be a list"}, "modifications");
            std::vector<ModificationSpec> specs;
            for (size_t i = 0; i < list.size(); ++i) {
                const std::string path = "modifications[" + std::to_string(i) + "]";
                try {
                    specs.push_back(spec_from_json(list[i], path));
                    validate(specs.back());
                } catch (const ValidationError& e) {
                    const std::string f = e.field().rfind(path, 0) == 0 ? e.field() : path + "." + e.field();
                    throw ValidationError(e.violations(), f);
                }
            }
            with_writer([&] { session_.set_drafts(specs); });
            send(res, session_json());
        }));

        server_.Post("/step", guarded([this](const Req& req, Res& res) {
            const auto body = body_of(req);
            const auto expect = expected_counter(body);
            std::unique_lock lock(writer_, std::try_to_lock);
            if (!lock.owns_lock() || busy_) throw Error(ErrorCode::busy, "a job is already running", "job");
            const Step step = session_.state().step;
            if (expect && *expect != session_.state().step_counter)
                throw Error(ErrorCode::state_conflict,
                            "step counter is " + std::to_string(session_.state().step_counter) + ", request expected " +
                                std::to_string(*expect) + "; the step was already applied",
                            "step_counter");
            if (step == Step::done) throw Error(ErrorCode::state_conflict, "session is done", "step");
            if (step == Step::train || step == Step::regenerate || step == Step::diagnose) {
                busy_ = true;
                lock.unlock();
                start_job(to_string(step), [this, expect](const ProgressFn& p) { session_.advance(expect, p); }, res);
                return;
            }
            session_.advance(expect);
            send(res, session_json());
        }));
    }

    template <typename F>
    void with_writer(F&& f) {
        std::unique_lock lock(writer_, std::try_to_lock);
        if (!lock.owns_lock() || busy_) throw Error(ErrorCode::busy, "a job is running; retry when it finishes", "job");
        f();
    }

    Workspace ws_;
    Session session_;
    httplib::Server server_;
    std::mutex writer_;
    std::thread worker_;
    std::atomic<bool> busy_{false};
    int job_seq_ = 0;
    std::mutex artifacts_mutex_;
    std::map<std::string, std::filesystem::path> artifacts_;
};

}  // namespace synthloop
