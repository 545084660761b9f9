#include <gtest/gtest.h>

#include "support.hpp"

using namespace synthloop;
namespace fs = std::filesystem;

using namespace synthloop::testing_support;

namespace {

fs::path fresh(const std::string& name) { return fresh_dir("session_" + name); }

Workspace copy_workspace(const std::string& name) { return Workspace::open(copy_base("session", "session_" + name)); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(WorkspaceConfig, JsonRoundTrip) {
    const auto c = small_config();
    EXPECT_EQ(to_json(config_from_json(to_json(c))).dump(), to_json(c).dump());
}

TEST(WorkspaceConfig, PartialOverridesKeepDefaults) {
    const auto c = config_from_json(Json::parse(R"({"seed": 3, "xai": {"n_masks": 500}})"));
    EXPECT_EQ(c.seed, 3u);
    EXPECT_EQ(c.xai.n_masks, 500);
    EXPECT_EQ(c.xai.grid_cols, WorkspaceConfig{}.xai.grid_cols);
    EXPECT_EQ(c.session.seeds, (std::vector<std::uint64_t>{1, 2, 3, 4}));
}

TEST(WorkspaceConfig, RejectsUnknownKeysAndBadValues) {
    try {
        config_from_json(Json::parse(R"({"xai": {"n_maskz": 5}, "session": {"target_map50": 1.5}})"));
        FAIL();
    } catch (const ValidationError& e) {
        const auto& v = e.violations();
        EXPECT_NE(std::find(v.begin(), v.end(), "unknown key xai.n_maskz"), v.end());
        EXPECT_NE(std::find(v.begin(), v.end(), "session.target_map50 must be in [0,1]"), v.end());
    }
    EXPECT_THROW(config_from_json(Json::parse(R"({"train": {"epochs": "many"}})")), ValidationError);
    EXPECT_THROW(config_from_json(Json::parse(R"({"dataset": {"orientations": {"test": [[0]]}}})")), ValidationError);
}

TEST(Predictions, RoundTrip) {
    std::vector<Detection> dets(2);
    dets[0].probabilities = {0.1, 0.7, 0.2};
    dets[0].bbox = {0.25, 0.5, 0.125, 0.0625};
    dets[1].probabilities = {0.6, 0.3, 0.1};
    const auto text = serialize_predictions(dets, {1, 2});
    const auto back = parse_predictions(text);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].column, 1);
    EXPECT_EQ(back[0].proposal, dets[0].proposal().first);
    EXPECT_DOUBLE_EQ(back[0].bbox.w, 0.125);
    EXPECT_EQ(back[1].column, 2);
    EXPECT_THROW(parse_predictions("0 1 1 0.5 0 0 1\n"), ParseError);
}

// ---------------------------------------------------------------------------
// Workspace

TEST(Workspace, InitCreatesLayoutOnce) {
    const auto p = fresh("init");
    auto ws = Workspace::init(p, small_config());
    EXPECT_TRUE(fs::exists(p / "config.json"));
    for (const auto& c : ws.classes()) EXPECT_TRUE(fs::exists(p / "assets" / "reference" / (c + ".mesh")));
    EXPECT_EQ(ws.versions().labels(), std::vector<std::string>{"v0"});
    EXPECT_EQ(code_of([&] { Workspace::init(p, small_config()); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { Workspace::open(fresh("missing")); }), ErrorCode::not_found);
    EXPECT_EQ(ws.class_index("turrettank"), 2);
}

TEST(Workspace, RealSplitsAreCachedOnDisk) {
    auto ws = copy_workspace("real");
    const auto a = ws.real(SplitRole::test);
    const auto b = ws.real(SplitRole::test);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(a.records.size(), 48u);
    for (const auto& r : a.records) EXPECT_TRUE(ws.config().dataset.orientations.test.contains(r.orientation));
}

TEST(Workspace, TrainRunPersistsArtifacts) {
    auto ws = copy_workspace("run");
    const auto r = ws.train_run("v0", 1);
    for (const auto& p : {r.confusion, r.checkpoint, r.predictions}) EXPECT_TRUE(fs::exists(ws.resolve(p))) << p;
    EXPECT_GE(r.map50, 0.0);
    EXPECT_LE(r.map50, 1.0);
    const auto cm = ws.load_confusion(r);
    const auto& test = ws.test_manifest();
    // Row sums equal the per-class test counts.
    std::vector<double> counts(static_cast<size_t>(cm.size), 0.0);
    for (const auto& rec : test.records) counts[static_cast<size_t>(rec.bbox ? rec.label : cm.background())] += 1;
    for (int row = 0; row < cm.size; ++row) EXPECT_DOUBLE_EQ(cm.row_sum(row), counts[static_cast<size_t>(row)]);
    EXPECT_EQ(ws.load_predictions(r).size(), test.records.size());
}

// ---------------------------------------------------------------------------
// Session

TEST(Session, StartsAtTrainWithConfiguredSeeds) {
    const auto p = fresh("start_default");
    auto ws = Workspace::init(p, WorkspaceConfig{});
    auto s = Session::start(ws);
    EXPECT_EQ(s.state().step, Step::train);
    EXPECT_EQ(s.state().active_version, "v0");
    EXPECT_EQ(s.state().seeds.size(), 4u);
    EXPECT_EQ(code_of([&] { Session::start(ws); }), ErrorCode::state_conflict);

    auto one = small_config();
    one.session.seeds = {9};
    auto ws1 = Workspace::init(fresh("start_one"), one);
    EXPECT_EQ(Session::start(ws1).state().seeds, std::vector<std::uint64_t>{9});

    auto bad = small_config();
    bad.session.target_map50 = 1.2;
    EXPECT_THROW(Workspace::init(fresh("start_bad"), bad), ValidationError);
}

TEST(Session, StartNeedsAssets) {
    auto ws = copy_workspace("noassets");
    fs::remove(ws.root() / "assets" / "reference" / "boxtruck.mesh");
    EXPECT_EQ(code_of([&] { Session::start(ws); }), ErrorCode::not_found);
}

TEST(Session, WrongStepIsRejected) {
    auto ws = copy_workspace("wrongstep");
    auto s = Session::start(ws);
    EXPECT_EQ(code_of([&] { s.step_evaluate(); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { s.step_select(); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { s.step_diagnose(); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { s.step_modify({}); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { s.step_regenerate(); }), ErrorCode::state_conflict);
    EXPECT_EQ(code_of([&] { s.set_drafts({smoothing("vR")}); }), ErrorCode::state_conflict);
    EXPECT_EQ(s.state().step_counter, 0);
}

TEST(Session, FailedTrainingResumesMissingSeedsOnly) {
    auto ws = copy_workspace("resume");
    auto s = Session::start(ws);
    std::vector<std::string> seen;
    auto fail_second = [&](const std::string& msg) {
        seen.push_back(msg);
        if (seen.size() == 2) throw std::runtime_error("interrupted");
    };
    EXPECT_THROW(s.step_train({}, fail_second), std::runtime_error);
    EXPECT_EQ(s.state().step, Step::train);
    ASSERT_EQ(s.state().runs.size(), 1u);
    EXPECT_EQ(s.state().runs[0].seed, 1u);
    EXPECT_EQ(s.state().last_failure, "interrupted");
    const auto first = s.state().runs[0];

    std::vector<std::string> resumed;
    s.step_train({}, [&](const std::string& m) { resumed.push_back(m); });
    EXPECT_EQ(resumed, std::vector<std::string>{"training v0 seed 2"});
    EXPECT_EQ(s.state().step, Step::evaluate);
    ASSERT_EQ(s.state().runs.size(), 2u);
    EXPECT_EQ(s.state().runs[0], first);
    EXPECT_FALSE(s.state().last_failure);
}

class SessionLoop : public testing::Test {
protected:
    // Trained and evaluated v0 at SelectTarget; shared by the loop tests.
    static void SetUpTestSuite() {
        auto ws = copy_workspace("loop_base");
        auto s = Session::start(ws);
        s.step_train();
        s.step_evaluate();
        trained_ = new fs::path(ws.root());
    }
    static void TearDownTestSuite() { delete trained_; }

    static Session open_copy(const std::string& name) {
        const auto p = fresh(name);
        fs::copy(*trained_, p, fs::copy_options::recursive);
        return Session::open(Workspace::open(p));
    }
    static fs::path* trained_;
};
fs::path* SessionLoop::trained_ = nullptr;

TEST_F(SessionLoop, EvaluateAveragesSeeds) {
    auto s = open_copy("eval");
    const auto& st = s.state();
    EXPECT_EQ(st.step, Step::select_target);
    EXPECT_EQ(st.runs_of("v0").size(), 2u);
    double mean = 0;
    for (const auto& r : st.runs) mean += r.map50 / 2;
    EXPECT_DOUBLE_EQ(*st.version("v0")->mean_map50, mean);
    const auto avg = s.averaged_confusion("v0");
    const auto expect = average_confusion({s.workspace().load_confusion(st.runs[0]), s.workspace().load_confusion(st.runs[1])});
    EXPECT_EQ(avg.cells, expect.cells);
}

TEST_F(SessionLoop, EvaluateTerminationRules) {
    // Same runs, different termination settings, replayed from the log.
    auto s = open_copy("terminate");
    const auto events = read_events(Session::dir(s.workspace()) / "events.log");
    const double mean = *s.state().version("v0")->mean_map50;
    auto with = [&](double target, int max_iter) {
        auto ev = events;
        ev.front()["payload"]["target_map50"] = target;
        ev.front()["payload"]["max_iterations"] = max_iter;
        ev.pop_back();  // drop the evaluate event and redo it under the new settings
        auto p = fresh("terminate_" + std::to_string(max_iter) + "_" + std::to_string(static_cast<int>(target * 100)));
        fs::copy(s.workspace().root(), p, fs::copy_options::recursive);
        std::string log;
        for (const auto& e : ev) log += e.dump() + "\n";
        text::write_file((p / "session" / "events.log").string(), log);
        auto reopened = Session::open(Workspace::open(p));
        EXPECT_EQ(reopened.state().step, Step::evaluate);
        reopened.step_evaluate();
        return reopened.state();
    };
    const auto reached = with(mean, 5);
    EXPECT_EQ(reached.step, Step::done);
    EXPECT_EQ(reached.done_reason, "target");
    const auto limit = with(std::min(1.0, mean + 0.01), 1);
    EXPECT_EQ(limit.step, Step::done);
    EXPECT_EQ(limit.done_reason, "limit");
    const auto cont = with(std::min(1.0, mean + 0.01), 2);
    EXPECT_EQ(cont.step, Step::select_target);
    EXPECT_FALSE(cont.done_reason);
    EXPECT_EQ(code_of([&] { s.step_evaluate(); }), ErrorCode::state_conflict);
}

TEST_F(SessionLoop, SelectDefaultsAndOverrides) {
    auto s = open_copy("select");
    const auto avg = s.averaged_confusion("v0");
    const auto ranked = rank_confusions(avg);
    ASSERT_GE(ranked.size(), 1u);
    // Second-ranked pair, or any other off-diagonal vehicle cell.
    std::pair<int, int> other{ranked[0].class_b, ranked[0].class_a};
    if (ranked.size() >= 2) other = {ranked[1].class_a, ranked[1].class_b};
    EXPECT_EQ(code_of([&] { s.step_select(std::pair{1, 1}); }), ErrorCode::invalid_argument);
    EXPECT_EQ(code_of([&] { s.step_select(std::pair{0, avg.background()}); }), ErrorCode::invalid_argument);
    EXPECT_EQ(s.state().step, Step::select_target);

    auto d = open_copy("select_default");
    d.step_select();
    EXPECT_EQ(d.state().target->class_a, ranked[0].class_a);
    EXPECT_EQ(d.state().target->class_b, ranked[0].class_b);
    EXPECT_FALSE(d.state().target->operator_override);
    EXPECT_EQ(d.state().step, Step::diagnose);

    s.step_select(other);
    EXPECT_TRUE(s.state().target->operator_override);
    EXPECT_EQ(s.state().target->class_a, other.first);
    EXPECT_DOUBLE_EQ(s.state().target->count, avg(other.first, other.second));
}

TEST_F(SessionLoop, FullIterationWithReplay) {
    auto s = open_copy("full");
    const int c0 = s.state().step_counter;
    s.step_select({}, c0);
    EXPECT_EQ(code_of([&] { s.step_select({}, c0); }), ErrorCode::state_conflict);  // replayed request

    s.step_diagnose();
    EXPECT_EQ(s.state().step, Step::modify);
    const auto bundle = s.bundle();
    EXPECT_EQ(bundle.class_a, s.state().target->class_a);
    EXPECT_TRUE(fs::exists(bundle.dir / bundle.fractions));
    EXPECT_TRUE(fs::exists(bundle.dir / bundle.fractions_image));
    int maps = 0;
    for (const auto& bin : bundle.bins) {
        for (const auto& [kind, stem] : bin.maps) {
            EXPECT_TRUE(fs::exists(bundle.dir / (stem + ".bin"))) << stem;
            ++maps;
        }
        for (const auto& [kind, png] : bin.overlays) EXPECT_TRUE(fs::exists(bundle.dir / png)) << png;
    }
    EXPECT_GT(maps, 0);
    const auto reloaded = load_bundle(bundle.dir);
    EXPECT_EQ(to_json(reloaded).dump(), to_json(bundle).dump());

    // Invalid specs leave the state untouched.
    const auto before = s.state();
    try {
        s.step_modify({smoothing("vR", 1.5)});
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "value");
    }
    auto unknown_region = smoothing("vR");
    unknown_region.selector.regions = {"wings"};
    EXPECT_EQ(code_of([&] { s.set_drafts({unknown_region}); }), ErrorCode::invalid_argument);
    EXPECT_EQ(s.state(), before);

    s.set_drafts({smoothing("vR")});
    EXPECT_EQ(s.state().drafts.size(), 1u);
    s.advance();  // applies the drafts
    EXPECT_EQ(s.state().step, Step::regenerate);
    EXPECT_EQ(s.state().active_version, "vR");
    EXPECT_TRUE(s.state().drafts.empty());
    EXPECT_EQ(s.workspace().versions().lineage("vR").front().label, "v0");

    s.step_regenerate();
    EXPECT_EQ(s.state().step, Step::train);
    const auto manifest = s.workspace().training_manifest("vR");
    EXPECT_EQ(manifest.version_label, "vR");
    size_t syn = 0;
    for (const auto& r : manifest.records)
        if (r.provenance == Provenance::synthetic) {
            EXPECT_EQ(r.version_label, "vR");
            ++syn;
        }
    EXPECT_GT(syn, 0u);
    EXPECT_EQ(s.state().missing_seeds(), (std::vector<std::uint64_t>{1, 2}));

    // The log alone reconstructs the state, as does the snapshot.
    const auto replayed = replay(read_events(Session::dir(s.workspace()) / "events.log"));
    EXPECT_EQ(replayed, s.state());
    EXPECT_EQ(Session::snapshot(s.workspace()), s.state());
    EXPECT_EQ(Session::open(s.workspace()).state(), s.state());
}

TEST_F(SessionLoop, EmptyModificationReturnsToSelection) {
    auto s = open_copy("skip");
    s.step_select();
    s.step_diagnose();
    const int iteration = s.state().iteration;
    s.step_modify({});
    EXPECT_EQ(s.state().step, Step::select_target);
    EXPECT_EQ(s.state().active_version, "v0");
    EXPECT_EQ(s.state().iteration, iteration);
}

TEST_F(SessionLoop, TwoSpecVersionRecordsBoth) {
    auto s = open_copy("two");
    s.step_select();
    s.step_diagnose();
    ModificationSpec d;
    d.target_class = "turrettank";
    d.selector.regions = {"rear_engine"};
    d.action = ActionKind::scale_emission;
    d.value = 0.2;
    d.kind = ModificationKind::disruptive;
    d.version_label = "vRD";
    s.step_modify({smoothing("vRD"), d});
    const auto entry = s.workspace().versions().load("vRD");
    EXPECT_EQ(entry.specs.size(), 2u);
    EXPECT_EQ(entry.parent, "v0");
}

TEST_F(SessionLoop, CrashBetweenVersionWriteAndLogIsAdopted) {
    auto s = open_copy("adopt");
    s.step_select();
    s.step_diagnose();
    auto store = s.workspace().versions();
    store.apply("v0", {smoothing("vR")});  // written, never logged
    s.step_modify({smoothing("vR")});
    EXPECT_EQ(s.state().active_version, "vR");
    EXPECT_EQ(code_of([&] { open_copy("adopt2").step_modify({}); }), ErrorCode::state_conflict);
}
