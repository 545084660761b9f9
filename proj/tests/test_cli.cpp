#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "support.hpp"

using namespace synthloop;
using namespace synthloop::testing_support;
namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string out;  // stdout and stderr interleaved
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(SYNTHLOOP_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    std::array<char, 4096> buf{};
    while (size_t n = fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

fs::path write_config(const std::string& name, double target) {
    auto j = to_json(small_config());
    j["session"]["target_map50"] = target;
    const auto path = fresh_dir(name + ".json");
    text::write_file(path.string(), j.dump());
    return path;
}

}  // namespace

TEST(Cli, InitCreatesSessionAtTrain) {
    const auto w = fresh_dir("cli_init");
    const auto r = cli("init --benchmark default --workdir " + w.string() + " --config " + write_config("cli_init", 0.5).string());
    EXPECT_EQ(r.status, 0) << r.out;
    EXPECT_EQ(Session::snapshot(Workspace::open(w)).step, Step::train);
    EXPECT_TRUE(fs::exists(w / "assets" / "reference" / "turrettank.mesh"));
    EXPECT_EQ(Workspace::open(w).config().session.target_map50, 0.5);
}

// Trained v0 session whose termination target is `target`.
fs::path trained_session(const std::string& name, double target) {
    const auto w = copy_base("cli", name);
    auto cfg = Workspace::open(w).config();
    cfg.session.target_map50 = target;
    text::write_file((w / "config.json").string(), to_json(cfg).dump(2));
    Session::start(Workspace::open(w)).step_train();
    return w;
}

TEST(Cli, LoopStepPrintsDoneWhenTargetPasses) {
    const auto w = trained_session("cli_done", 0.0);
    const auto done = cli("loop-step --workdir " + w.string());
    EXPECT_EQ(done.status, 0) << done.out;
    EXPECT_NE(done.out.find("DONE"), std::string::npos) << done.out;
    EXPECT_EQ(Session::snapshot(Workspace::open(w)).done_reason, "target");
}

TEST(Cli, LoopStepAdvancesExactlyOneStep) {
    const auto w = trained_session("cli_one", 1.0);
    const auto r = cli("loop-step --workdir " + w.string());
    EXPECT_EQ(r.status, 0) << r.out;
    EXPECT_NE(r.out.find("Evaluate -> SelectTarget"), std::string::npos) << r.out;
    const auto st = Session::snapshot(Workspace::open(w));
    EXPECT_EQ(st.step, Step::select_target);
    EXPECT_EQ(st.step_counter, 2);
}

TEST(Cli, ErrorsAreApiShaped) {
    const auto unknown = cli("loop-step --frobnicate");
    EXPECT_NE(unknown.status, 0);
    const auto j = Json::parse(unknown.out.substr(unknown.out.find('{')));
    EXPECT_EQ(j.at("error").at("code"), "invalid_argument");

    const auto missing = cli("loop-step --workdir " + fresh_dir("cli_missing").string());
    EXPECT_NE(missing.status, 0);
    EXPECT_EQ(Json::parse(missing.out).at("error").at("code"), "not_found");

    const auto w = copy_base("cli", "cli_order");
    Session::start(Workspace::open(w));
    const auto early = cli("modify --empty --workdir " + w.string());
    EXPECT_NE(early.status, 0);
    EXPECT_EQ(Json::parse(early.out).at("error").at("code"), "state_conflict");
}

TEST(Cli, ExplainWritesMapAndOverlay) {
    const auto w = copy_base("cli", "cli_explain");
    auto ws = Workspace::open(w);
    ws.train_run("v0", 1);
    const auto r = cli("explain --workdir " + w.string() + " --seed 1 --class 2 --bin 90 --n-masks 64");
    EXPECT_EQ(r.status, 0) << r.out;
    bool map = false, overlay = false;
    for (const auto& e : fs::recursive_directory_iterator(w / "reports" / "explain")) {
        map = map || e.path().filename() == "map.bin";
        overlay = overlay || e.path().filename() == "overlay.png";
    }
    EXPECT_TRUE(map);
    EXPECT_TRUE(overlay);
    EXPECT_NE(r.out.find("with 64 masks"), std::string::npos) << r.out;

    // A one-degree bin that holds no turrettank in the test split.
    auto narrow = ws.config();
    narrow.xai.diagnose_bin_width = 1;
    const auto cfg_path = w / "narrow.json";
    text::write_file(cfg_path.string(), to_json(narrow).dump());
    std::vector<bool> used(360, false);
    for (const auto& rec : ws.real(SplitRole::test).records)
        if (rec.bbox && rec.label == 2) used[static_cast<size_t>(std::floor(normalize_degrees(rec.orientation)))] = true;
    const auto empty_bin = std::find(used.begin(), used.end(), false) - used.begin();
    ASSERT_LT(empty_bin, 360);
    const auto none = cli("explain --workdir " + w.string() + " --config " + cfg_path.string() + " --seed 1 --class 2 --bin " +
                          std::to_string(empty_bin) + " --n-masks 64");
    EXPECT_NE(none.status, 0);
    EXPECT_EQ(Json::parse(none.out).at("error").at("code"), "insufficient_samples");
}
