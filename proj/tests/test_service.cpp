#include "support.hpp"
#include "synthloop/service.hpp"

using namespace synthloop;
using namespace synthloop::testing_support;
namespace fs = std::filesystem;

namespace {

// Service on an ephemeral localhost port for the lifetime of the object.
class Running {
public:
    explicit Running(const fs::path& dir) : svc_(dir) {
        port_ = svc_.bind_any("127.0.0.1");
        thread_ = std::thread([this] { svc_.listen_after_bind(); });
        while (!svc_.server().is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ~Running() {
        svc_.stop();
        thread_.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(120, 0);
        return c;
    }
    Service& service() { return svc_; }

    Json get(const std::string& path, int expect = 200) const {
        auto r = client().Get(path);
        EXPECT_TRUE(r) << path;
        if (!r) return nullptr;
        EXPECT_EQ(r->status, expect) << path << ": " << r->body;
        return Json::parse(r->body);
    }
    Json post(const std::string& path, const Json& body, int expect = 200) const {
        auto r = client().Post(path, body.dump(), "application/json");
        EXPECT_TRUE(r) << path;
        if (!r) return nullptr;
        EXPECT_EQ(r->status, expect) << path << ": " << r->body;
        return Json::parse(r->body);
    }
    // Waits for the background job and returns its final status.
    Json finish_job() {
        svc_.wait_idle();
        return get("/session").at("job");
    }

private:
    Service svc_;
    int port_ = 0;
    std::thread thread_;
};

fs::path started(const std::string& name) {
    const auto p = copy_base("service", "service_" + name);
    Session::start(Workspace::open(p));
    return p;
}

}  // namespace

TEST(Service, FreshSessionAndErrors) {
    Running srv(started("fresh"));
    const auto s = srv.get("/session");
    EXPECT_EQ(s.at("step"), "Train");
    EXPECT_EQ(s.at("active_version"), "v0");
    EXPECT_TRUE(s.at("job").is_null());
    EXPECT_EQ(s.at("classes").size(), 4u);
    EXPECT_EQ(s.at("lineage").at(0).at("label"), "v0");

    EXPECT_EQ(srv.get("/confusion?version=v0&seed=avg", 404).at("error").at("code"), "not_found");
    srv.get("/image/deadbeef", 404);
    srv.get("/suggestions", 404);
    srv.get("/mesh?class=wedgecar&version=vZ", 404);
    EXPECT_EQ(srv.get("/mesh?class=plane", 422).at("error").at("field"), "class");
    EXPECT_EQ(srv.get("/mesh?class=wedgecar").at("class_id"), "wedgecar");

    // Operator actions out of order mirror the state machine.
    EXPECT_EQ(srv.post("/target", Json::object(), 409).at("error").at("code"), "state_conflict");
    srv.post("/modifications", Json{{"modifications", Json::array()}}, 409);
    EXPECT_EQ(srv.post("/step", Json{{"step_counter", 5}}, 409).at("error").at("field"), "step_counter");
}

TEST(Service, OneLoopIterationOverHttp) {
    const auto dir = started("loop");
    Json before_restart;
    {
        Running srv(dir);
        // Training runs as a background job; a second step is refused meanwhile.
        const auto job = srv.post("/step", Json{{"step_counter", 0}}, 202);
        EXPECT_EQ(job.at("step"), "Train");
        EXPECT_EQ(srv.post("/step", Json::object(), 409).at("error").at("code"), "busy");
        const auto status = srv.finish_job();
        EXPECT_EQ(status.at("state"), "succeeded") << status.dump();
        EXPECT_EQ(status.at("id"), job.at("job_id"));

        auto s = srv.post("/step", Json::object());
        EXPECT_EQ(s.at("step"), "SelectTarget");
        const int seeds = 2;
        EXPECT_EQ(s.at("runs").size(), static_cast<size_t>(seeds));

        // Averaged confusion rows sum to the per-class test counts.
        const auto cm = srv.get("/confusion?version=v0&seed=avg");
        const auto test = Workspace::open(dir).real(SplitRole::test);
        std::vector<double> counts(cm.at("size").get<size_t>(), 0.0);
        for (const auto& r : test.records) counts[r.bbox ? static_cast<size_t>(r.label) : counts.size() - 1] += 1;
        for (size_t r = 0; r < counts.size(); ++r) EXPECT_NEAR(cm.at("row_sums")[r].get<double>(), counts[r], 1e-9);
        EXPECT_EQ(srv.get("/confusion?version=v0&seed=1").at("seed"), "1");
        srv.get("/confusion?version=v0&seed=3", 404);

        EXPECT_EQ(srv.post("/target", Json{{"class_a", "wedgecar"}, {"class_b", "wedgecar"}}, 422).at("error").at("field"), "target");
        EXPECT_EQ(srv.post("/target", Json{{"class_a", "wedgecar"}}, 422).at("error").at("field"), "class_b");
        s = srv.post("/target", Json::object());
        EXPECT_EQ(s.at("step"), "Diagnose");
        EXPECT_FALSE(s.at("target").at("operator_override").get<bool>());
        srv.post("/target", Json::object(), 409);

        srv.post("/step", Json::object(), 202);
        EXPECT_EQ(srv.finish_job().at("state"), "succeeded");
        const auto sugg = srv.get("/suggestions");
        const int a = sugg.at("class_a"), b = sugg.at("class_b");
        EXPECT_EQ(a, s.at("target").at("class_a").get<int>());
        std::optional<double> bin;
        for (const auto& bn : sugg.at("bins"))
            if (bn.at("maps").contains("a_as_b")) bin = bn.at("lo").get<double>();
        ASSERT_TRUE(bin) << sugg.dump();
        const std::string q = "/saliency?classA=" + std::to_string(a) + "&classB=" + std::to_string(b) + "&bin=" + text::fmt(*bin);
        const auto sal = srv.get(q + "&kind=a_as_b");
        EXPECT_EQ(sal.at("map").at("height"), 16);
        const auto img = srv.client().Get("/image/" + sal.at("overlay").get<std::string>());
        ASSERT_TRUE(img);
        EXPECT_EQ(img->status, 200);
        EXPECT_EQ(img->get_header_value("Content-Type"), "image/png");
        EXPECT_EQ(img->body.substr(1, 3), "PNG");
        srv.get(q + "&kind=sideways", 422);
        srv.get("/saliency?classA=" + std::to_string(b) + "&classB=" + std::to_string(a) + "&bin=0", 404);
        const auto fr = srv.get("/orientation-fractions?pair=" + std::to_string(a) + "," + std::to_string(b));
        EXPECT_EQ(fr.at("bins").size(), 72u);
        EXPECT_EQ(fr.at("seeds"), seeds);

        // Out-of-range smoothness is rejected with the offending field.
        Json bad{{"target_class", "wedgecar"},
                 {"selector", {{"kind", "region"}, {"regions", {"hull"}}}},
                 {"action", "set_smoothness"},
                 {"value", 1.5},
                 {"version_label", "vR"}};
        const auto err = srv.post("/modifications", Json{{"modifications", {bad}}}, 422);
        EXPECT_EQ(err.at("error").at("field"), "modifications[0].value");
        EXPECT_EQ(err.at("error").at("code"), "validation_failed");
        bad["selector"]["regions"] = {"wings"};
        bad["value"] = 0.1;
        EXPECT_EQ(srv.post("/modifications", Json{{"modifications", {bad}}}, 422).at("error").at("field"), "selector.regions");
        bad["selector"]["regions"] = {"hull"};
        s = srv.post("/modifications", Json{{"modifications", {bad}}});
        EXPECT_EQ(s.at("drafts").size(), 1u);

        s = srv.post("/step", Json::object());
        EXPECT_EQ(s.at("step"), "Regenerate");
        EXPECT_EQ(s.at("active_version"), "vR");
        EXPECT_EQ(s.at("lineage").size(), 2u);
        for (const auto& f : srv.get("/mesh?class=wedgecar&version=vR").at("faces"))
            if (f.at("region_tag") == "hull") EXPECT_DOUBLE_EQ(f.at("material").at("smoothness").get<double>(), 0.1);

        const auto metrics = srv.get("/metrics");
        ASSERT_EQ(metrics.at("versions").size(), 2u);
        EXPECT_EQ(metrics.at("versions")[0].at("runs").size(), 2u);
        EXPECT_FALSE(metrics.at("versions")[0].at("mean_map50").is_null());
        EXPECT_EQ(metrics.at("versions")[1].at("parent"), "v0");

        before_restart = Json{{"session", srv.get("/session")},
                              {"metrics", metrics},
                              {"confusion", srv.get("/confusion?version=v0&seed=avg")},
                              {"suggestions", srv.get("/suggestions")},
                              {"saliency", sal}};
    }
    // A restarted service answers every GET identically.
    Running again(dir);
    EXPECT_EQ(again.get("/session"), before_restart.at("session"));
    EXPECT_EQ(again.get("/metrics"), before_restart.at("metrics"));
    EXPECT_EQ(again.get("/confusion?version=v0&seed=avg"), before_restart.at("confusion"));
    EXPECT_EQ(again.get("/suggestions"), before_restart.at("suggestions"));
    const auto& sal = before_restart.at("saliency");
    EXPECT_EQ(again.get("/saliency?classA=" + std::to_string(before_restart["suggestions"]["class_a"].get<int>()) +
                        "&classB=" + std::to_string(before_restart["suggestions"]["class_b"].get<int>()) +
                        "&bin=" + text::fmt(sal.at("bin_lo").get<double>()) + "&kind=a_as_b"),
              sal);
}

TEST(Service, FailedJobIsReported) {
    const auto dir = started("failjob");
    // Unreadable training images make the first seed fail.
    fs::remove_all(dir / "datasets" / "real_train" / "images");
    Running srv(dir);
    srv.post("/step", Json::object(), 202);
    const auto job = srv.finish_job();
    EXPECT_EQ(job.at("state"), "failed");
    EXPECT_FALSE(job.at("error").at("message").get<std::string>().empty());
    const auto s = srv.get("/session");
    EXPECT_EQ(s.at("step"), "Train");
    EXPECT_FALSE(s.at("last_failure").is_null());
}
