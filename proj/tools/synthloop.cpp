// Command-line entry points for every pipeline stage and the HTTP service.

#include <cstdio>
#include <iostream>

#include "synthloop/service.hpp"

#include "CLI11.hpp"

using namespace synthloop;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string workdir = ".";
    std::optional<std::uint64_t> seed;
    std::string config;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    for (auto& t : text::split(s, ','))
        if (!t.empty()) out.push_back(t);
    return out;
}

std::vector<double> parse_doubles(const std::string& s, const char* field) {
    std::vector<double> out;
    for (const auto& t : split_list(s)) {
        double v = 0;
        if (!text::parse_double(t, v)) throw Error(ErrorCode::invalid_argument, "not a number: " + t, field);
        out.push_back(v);
    }
    return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& t : split_list(s)) {
        long long v = 0;
        if (!text::parse_long(t, v) || v < 0) throw Error(ErrorCode::invalid_argument, "not a seed: " + t, "seeds");
        out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
}

int parse_class(const Workspace& ws, const std::string& v, const char* field) {
    long long idx = 0;
    if (text::parse_long(v, idx)) {
        if (idx < 0 || idx >= static_cast<long long>(ws.classes().size()))
            throw Error(ErrorCode::invalid_argument, "class index " + v + " out of range", field);
        return static_cast<int>(idx);
    }
    return ws.class_index(v);
}

WorkspaceConfig merged_config(const Globals& g, WorkspaceConfig base) {
    if (!g.config.empty()) base = load_config(g.config, base);
    if (g.seed) base.seed = *g.seed;
    return base;
}

Workspace open_workspace(const Globals& g) {
    auto ws = Workspace::open(g.workdir);
    if (!g.config.empty() || g.seed) ws.override_config(merged_config(g, ws.config()));
    return ws;
}

std::string active_version(const Workspace& ws) {
    return Session::exists(ws) ? Session::snapshot(ws).active_version : "v0";
}

std::vector<std::uint64_t> run_seeds(const Workspace& ws, const Globals& g, const std::string& list) {
    if (!list.empty()) return parse_seeds(list);
    if (g.seed) return {*g.seed};
    return ws.config().session.seeds;
}

void print_confusion(const ConfusionMatrix& m, const std::vector<std::string>& classes) {
    std::cout << serialize_confusion(m, classes);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic-data feedback loop: render, train, explain, diagnose and modify"};
    app.fallthrough();
    app.require_subcommand(1);
    Globals g;
    app.add_option("--workdir", g.workdir, "Work directory")->capture_default_str();
    app.add_option("--seed", g.seed, "Root seed (init) or run seed");
    app.add_option("--config", g.config, "JSON configuration overrides")->check(CLI::ExistingFile);

    std::string benchmark = "default";
    auto* init = app.add_subcommand("init", "Create benchmark assets, version store and session");
    init->add_option("--benchmark", benchmark, "Benchmark name")->check(CLI::IsMember({"default"}));

    std::string split = "all", version;
    auto* render = app.add_subcommand("render-dataset", "Render real splits and a version's synthetic split");
    render->add_option("--split", split)->check(CLI::IsMember({"all", "real_train", "real_test", "synthetic"}));
    render->add_option("--version", version, "Version for the synthetic split (default: active)");

    std::string seeds_list;
    bool warm = false;
    auto* train_cmd = app.add_subcommand("train", "Train one detector per seed on a version's training manifest");
    train_cmd->add_option("--version", version);
    train_cmd->add_option("--seeds", seeds_list, "Comma-separated seeds (default: session seeds)");
    train_cmd->add_flag("--warm-start", warm, "Start from the parent version's checkpoint of the same seed");

    auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate trained runs on the real test split");
    eval_cmd->add_option("--version", version);
    eval_cmd->add_option("--seeds", seeds_list);

    std::string cls, as_cls;
    double bin = 0;
    std::optional<int> n_masks;
    auto* explain = app.add_subcommand("explain", "KernelSHAP maps aggregated over test samples of one class and bin");
    explain->add_option("--class", cls, "Ground-truth class (name or index)")->required();
    explain->add_option("--bin", bin, "Orientation in degrees inside the bin")->required();
    explain->add_option("--as", as_cls, "Only samples predicted as this class, explaining its output");
    explain->add_option("--n-masks", n_masks, "Coalitions per attribution");
    explain->add_option("--version", version);

    std::string class_a, class_b;
    auto* diagnose = app.add_subcommand("diagnose", "Diagnosis bundle for a confused class pair");
    diagnose->add_option("--class-a", class_a, "Ground-truth class (default: largest confusion)");
    diagnose->add_option("--class-b", class_b, "Predicted class");
    diagnose->add_option("--version", version);
    diagnose->add_option("--seeds", seeds_list);

    std::string spec_file, parent;
    bool empty = false;
    auto* modify = app.add_subcommand("modify", "Apply modification specs (session step, or directly with --parent)");
    modify->add_option("--spec", spec_file, "Spec file")->check(CLI::ExistingFile);
    modify->add_option("--parent", parent, "Apply to this version outside the session");
    modify->add_flag("--empty", empty, "Skip modification and return to target selection");

    std::string target;
    std::optional<int> counter;
    auto* step = app.add_subcommand("loop-step", "Advance the session by exactly one step");
    step->add_option("--target", target, "Override target at SelectTarget as A,B");
    step->add_option("--step-counter", counter, "Expected step counter (rejects replays)");

    std::string ratios = "0.05,0.5,1.0", sizes;
    std::size_t total = 900;
    double ratio = 0.5;
    auto* sweep_ratio = app.add_subcommand("sweep-ratio", "mAP50 against the real fraction of the training mix");
    sweep_ratio->add_option("--ratios", ratios)->capture_default_str();
    sweep_ratio->add_option("--total", total)->capture_default_str();
    sweep_ratio->add_option("--seeds", seeds_list);
    sweep_ratio->add_option("--version", version);
    auto* sweep_size = app.add_subcommand("sweep-size", "mAP50 against training-set size at a fixed ratio");
    sweep_size->add_option("--sizes", sizes, "Comma-separated totals")->required();
    sweep_size->add_option("--ratio", ratio)->capture_default_str();
    sweep_size->add_option("--seeds", seeds_list);
    sweep_size->add_option("--version", version);

    std::size_t frames = 360;
    auto* pca = app.add_subcommand("pca-check", "PCA overlap of striped versus orientation-disjoint splits");
    pca->add_option("--frames", frames)->capture_default_str();

    std::string host = "127.0.0.1";
    std::optional<int> port;
    auto* serve = app.add_subcommand("serve", "HTTP/JSON service over the session");
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << error_json(Error(ErrorCode::invalid_argument, e.what(), "argv")).dump() << "\n";
        return 2;
    }

    try {
        if (*init) {
            auto ws = Workspace::init(g.workdir, merged_config(g, WorkspaceConfig{}));
            Session::start(ws);
            std::cout << "initialised " << ws.root().string() << " (" << ws.classes().size() << " classes); session at Train\n";
            return 0;
        }

        auto ws = open_workspace(g);
        if (version.empty()) version = active_version(ws);

        if (*render) {
            if (split == "all" || split == "real_train") std::cout << "real_train " << ws.real(SplitRole::train).records.size() << " samples\n";
            if (split == "all" || split == "real_test") std::cout << "real_test " << ws.real(SplitRole::test).records.size() << " samples\n";
            if (split == "all" || split == "synthetic") {
                const auto r = ws.regenerate(version);
                std::cout << version << " synthetic " << r.synthetic.records.size() << " samples, training mix "
                          << r.mixed.records.size() << "\n";
            }
        } else if (*train_cmd) {
            const auto store = ws.versions();
            for (auto seed : run_seeds(ws, g, seeds_list)) {
                std::optional<DetectorModel> start;
                if (warm)
                    if (const auto p = store.load(version).parent; p && fs::exists(ws.run_dir(*p, seed) / "model.ckpt"))
                        start = load_checkpoint(ws.run_dir(*p, seed) / "model.ckpt");
                const auto r = ws.train_run(version, seed, start ? &*start : nullptr);
                std::printf("%s seed %llu mAP50 %.4f (%.1f s) -> %s\n", version.c_str(), static_cast<unsigned long long>(seed), r.map50,
                            r.duration_s, r.checkpoint.c_str());
            }
        } else if (*eval_cmd) {
            const auto& test = ws.test_manifest();
            std::vector<ConfusionMatrix> cms;
            double mean = 0;
            const auto seeds = run_seeds(ws, g, seeds_list);
            for (auto seed : seeds) {
                const auto model = load_checkpoint(ws.run_dir(version, seed) / "model.ckpt");
                const auto ev = evaluate_detections(ground_truth(test), predict_pooled(model, ws.test_inputs()), model.num_classes);
                cms.push_back(ev.confusion);
                mean += ev.map50 / static_cast<double>(seeds.size());
                std::printf("%s seed %llu mAP50 %.4f\n", version.c_str(), static_cast<unsigned long long>(seed), ev.map50);
            }
            const auto avg = average_confusion(cms);
            const auto out = ws.root() / "reports" / ("evaluate_" + version);
            fs::create_directories(out);
            text::write_file((out / "confusion_avg.txt").string(), serialize_confusion(avg, ws.classes()));
            png::write_rgb((out / "confusion_avg.png").string(), render_confusion(avg));
            std::printf("mean mAP50 %.4f over %zu seeds\n", mean, seeds.size());
            print_confusion(avg, ws.classes());
        } else if (*explain) {
            auto cfg = ws.config();
            if (n_masks) cfg.xai.n_masks = *n_masks;
            ws.override_config(cfg);
            const int c = parse_class(ws, cls, "class");
            const int as = as_cls.empty() ? c : parse_class(ws, as_cls, "as");
            const std::uint64_t seed = g.seed.value_or(cfg.session.seeds.front());
            const auto run = ws.stored_runs(version, {seed}).front();
            const auto model = load_checkpoint(ws.resolve(run.checkpoint));
            const auto preds = ws.load_predictions(run);
            const auto& test = ws.test_manifest();
            const double w = cfg.xai.diagnose_bin_width;
            const double lo = std::floor(normalize_degrees(bin) / w) * w;
            std::vector<size_t> picked;
            for (size_t i = 0; i < test.records.size(); ++i) {
                const auto& r = test.records[i];
                if (r.bbox && r.label == c && (as_cls.empty() || preds[i].column == as) && normalize_degrees(r.orientation) >= lo &&
                    normalize_degrees(r.orientation) < lo + w)
                    picked.push_back(i);
            }
            const auto set = explain_samples(model, test, load_images(test), picked, as, ws.shap_backgrounds(), cfg.xai, cfg.seed);
            if (set.samples.empty())
                throw Error(ErrorCode::insufficient_samples,
                            "no usable test samples of " + ws.classes()[static_cast<size_t>(c)] +
                                (as_cls.empty() ? "" : " predicted as " + ws.classes()[static_cast<size_t>(as)]) + " in bin [" +
                                text::fmt(lo) + "," + text::fmt(lo + w) + ")",
                            "bin");
            const auto out = ws.root() / "reports" / "explain" /
                             (version + "_seed" + std::to_string(seed) + "_" + ws.classes()[static_cast<size_t>(c)] + "_as_" +
                              ws.classes()[static_cast<size_t>(as)] + "_bin" + text::fmt(lo));
            fs::create_directories(out);
            save_aggregate(set.aggregate, out / "map", "samples " + std::to_string(set.samples.size()));
            png::write_rgb((out / "overlay.png").string(),
                           upscale_rgb(overlay_mask(set.aggregate, cfg.xai.theta_mask, patch_image(set.mean_patch)), 4));
            for (size_t k = 0; k < set.maps.size(); ++k)
                save_attribution(set.maps[k], out / "samples" / ("sample" + std::to_string(set.samples[k])));
            std::cout << "explained " << set.samples.size() << " samples with " << cfg.xai.n_masks << " masks -> "
                      << ws.relative(out) << "\n";
        } else if (*diagnose) {
            const auto runs = ws.stored_runs(version, run_seeds(ws, g, seeds_list));
            int a = 0, b = 0;
            if (class_a.empty() != class_b.empty())
                throw Error(ErrorCode::invalid_argument, "give both --class-a and --class-b, or neither", "class_b");
            if (class_a.empty()) {
                std::vector<ConfusionMatrix> cms;
                for (const auto& r : runs) cms.push_back(ws.load_confusion(r));
                const auto t = select_target(average_confusion(cms));
                if (!t) throw Error(ErrorCode::insufficient_samples, "no off-diagonal vehicle confusion", "target");
                a = t->class_a;
                b = t->class_b;
            } else {
                a = parse_class(ws, class_a, "class_a");
                b = parse_class(ws, class_b, "class_b");
            }
            const auto out = ws.root() / "reports" / "diagnose" /
                             (version + "_" + ws.classes()[static_cast<size_t>(a)] + "_as_" + ws.classes()[static_cast<size_t>(b)]);
            fs::remove_all(out);
            const auto bundle = ws.diagnose(version, runs, a, b, out);
            std::cout << "diagnosis " << ws.classes()[static_cast<size_t>(a)] << " -> " << ws.classes()[static_cast<size_t>(b)]
                      << ": " << bundle.bins.size() << " bins, " << bundle.suggestions.size() << " suggestions -> "
                      << ws.relative(out) << "\n";
            for (const auto& s : bundle.suggestions)
                std::cout << "  " << to_string(s.suggestion.kind) << " on " << s.owning_class << " region "
                          << s.dominant_region() << " (bin " << text::fmt(s.suggestion.bin_lo) << ", saliency "
                          << text::fmt(s.suggestion.evidence.saliency, 3) << ")\n";
            for (const auto& w : bundle.warnings) std::cout << "  warning: " << w << "\n";
        } else if (*modify) {
            std::vector<ModificationSpec> specs;
            if (!spec_file.empty()) specs = parse_specs(text::read_file(spec_file));
            if (specs.empty() && !empty) throw Error(ErrorCode::invalid_argument, "give --spec FILE or --empty", "spec");
            if (!parent.empty()) {
                auto store = ws.versions();
                const auto e = store.apply(parent, specs);
                std::cout << "created " << e.label << " from " << parent << " with " << e.specs.size() << " specs\n";
            } else {
                auto s = Session::open(ws);
                s.step_modify(empty ? std::vector<ModificationSpec>{} : specs);
                std::cout << "session at " << to_string(s.state().step) << ", active version " << s.state().active_version << "\n";
            }
        } else if (*step) {
            auto s = Session::open(ws);
            if (s.state().step == Step::done) {
                std::cout << "DONE (" << s.state().done_reason.value_or("?") << ")\n";
                return 0;
            }
            const Step from = s.state().step;
            auto progress = [](const std::string& m) { std::cerr << m << "\n"; };
            if (from == Step::select_target && !target.empty()) {
                const auto parts = split_list(target);
                if (parts.size() != 2) throw Error(ErrorCode::invalid_argument, "--target must be A,B", "target");
                s.step_select(std::pair{parse_class(ws, parts[0], "target"), parse_class(ws, parts[1], "target")}, counter);
            } else {
                s.advance(counter, progress);
            }
            const auto& st = s.state();
            if (from == Step::evaluate)
                std::printf("%s mean mAP50 %.4f\n", st.active_version.c_str(), st.version(st.active_version)->mean_map50.value_or(0));
            if (st.step == Step::done)
                std::cout << "DONE (" << st.done_reason.value_or("?") << ")\n";
            else
                std::cout << to_string(from) << " -> " << to_string(st.step) << " (step " << st.step_counter << ")\n";
        } else if (*sweep_ratio || *sweep_size) {
            const auto real = ws.real(SplitRole::train);
            const auto syn = ws.synthetic_manifest(version);
            const auto& test = ws.test_manifest();
            SweepInputs in{&real, &syn, &test, run_seeds(ws, g, seeds_list), ws.config().train};
            std::vector<SweepRow> rows;
            std::string name;
            if (*sweep_ratio) {
                rows = ratio_sweep(in, parse_doubles(ratios, "ratios"), total);
                name = "ratio";
            } else {
                std::vector<size_t> ns;
                for (double v : parse_doubles(sizes, "sizes")) ns.push_back(static_cast<size_t>(v));
                rows = size_sweep(in, ns, ratio);
                name = "total";
            }
            const auto out = ws.root() / "reports";
            fs::create_directories(out);
            const auto text_out = serialize_sweep(rows, name);
            text::write_file((out / ("sweep_" + name + "_" + version + ".txt")).string(), text_out);
            std::cout << text_out;
        } else if (*pca) {
            const auto r = pca_check(ws, frames, ws.root() / "reports" / "pca");
            std::printf("striped overlap %.4f\ndisjoint overlap %.4f\n", r.striped.overlap, r.disjoint.overlap);
        } else if (*serve) {
            Service svc(ws.root());
            const int p = port.value_or(ws.config().port);
            std::cout << "serving " << ws.root().string() << " on http://" << host << ":" << p << "\n" << std::flush;
            if (!svc.listen(host, p)) throw Error(ErrorCode::io_error, "cannot listen on " + host + ":" + std::to_string(p), "port");
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << error_json(e).dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << error_json(Error(ErrorCode::io_error, e.what())).dump() << "\n";
        return 1;
    }
}
