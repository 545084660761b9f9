#pragma once
// Small workspaces shared by the session, service and CLI tests.

#include <gtest/gtest.h>

#include "synthloop/session.hpp"

namespace synthloop::testing_support {

inline WorkspaceConfig small_config() {
    WorkspaceConfig c;
    c.seed = 7;
    c.dataset.real_train = 48;
    c.dataset.real_test = 48;
    c.dataset.synthetic = 48;
    c.dataset.empty_fraction = 0.15;
    c.train.epochs = 6;
    c.train.batch = 16;
    c.session.seeds = {1, 2};
    c.session.target_map50 = 0.99;
    c.xai.n_masks = 64;
    c.xai.grid_rows = 2;
    c.xai.grid_cols = 4;
    c.xai.map_rows = 16;
    c.xai.map_cols = 32;
    c.xai.diagnose_bin_width = 90;
    c.xai.min_samples = 1;
    c.xai.max_samples = 3;
    c.xai.backgrounds = 2;
    return c;
}

inline std::filesystem::path fresh_dir(const std::string& name) {
    const auto p = std::filesystem::path(testing::TempDir()) / ("synthloop_" + name);
    std::filesystem::remove_all(p);
    return p;
}

// One initialised workspace with rendered real splits, copied per test.
inline const std::filesystem::path& base_workspace(const std::string& suite) {
    static const std::filesystem::path base = [&] {
        auto p = fresh_dir(suite + "_base");
        auto ws = Workspace::init(p, small_config());
        ws.real(SplitRole::train);
        ws.real(SplitRole::test);
        return p;
    }();
    return base;
}

inline std::filesystem::path copy_base(const std::string& suite, const std::string& name) {
    const auto p = fresh_dir(name);
    std::filesystem::copy(base_workspace(suite), p, std::filesystem::copy_options::recursive);
    return p;
}

inline ModificationSpec smoothing(const std::string& label, double v = 0.1) {
    ModificationSpec s;
    s.target_class = "wedgecar";
    s.selector.kind = SelectorKind::region;
    s.selector.regions = {"hull"};
    s.action = ActionKind::set_smoothness;
    s.value = v;
    s.kind = ModificationKind::reinforcing;
    s.version_label = label;
    return s;
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no exception";
    return ErrorCode::io_error;
}

}  // namespace synthloop::testing_support
