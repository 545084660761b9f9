#include <gtest/gtest.h>

#include <numeric>

#include "oracles.hpp"
#include "synthloop/detector.hpp"
#include "synthloop/metrics.hpp"
#include "synthloop/toy.hpp"

using namespace synthloop;
using oracle::make_detection;

namespace {

DetectorModel random_model(int classes, std::uint64_t seed) {
    DetectorModel m = init_detector(classes, seed);
    Rng rng(seed + 100);
    m.for_each_tensor([&](double* p, Eigen::Index k) {
        for (Eigen::Index i = 0; i < k; ++i) p[i] = rng.normal(0.0, 0.3);
    });
    m.wc *= 0.1;
    m.wb *= 0.05;
    return m;
}

// Bright left half (class 0) or bright right half (class 1).
TrainingData left_right_data(int n, std::uint64_t seed) {
    Rng rng(seed);
    TrainingData d;
    d.num_classes = 2;
    d.x.resize(arch::kIn, n);
    d.targets.box.resize(4, n);
    for (int i = 0; i < n; ++i) {
        const int cls = i % 2;
        GrayImage img(kSampleHeight, kSampleWidth);
        for (int r = 0; r < kSampleHeight; ++r)
            for (int c = 0; c < kSampleWidth; ++c) {
                const bool bright = (c < kSampleWidth / 2) == (cls == 0);
                img(r, c) = static_cast<std::uint8_t>(std::clamp(rng.normal(bright ? 180 : 60, 20), 0.0, 255.0));
            }
        d.x.col(i) = pool_input(img);
        d.targets.cls.push_back(cls);
        d.targets.has_box.push_back(1);
        d.targets.box.col(i) << (cls == 0 ? 0.25 : 0.75), 0.5, 0.5, 1.0;
    }
    return d;
}


}  // namespace

TEST(Detector, UntrainedModelIsUniform) {
    auto m = init_detector(4, 1);
    GrayImage img(kSampleHeight, kSampleWidth, 77);
    auto d = predict(m, img);
    ASSERT_EQ(d.probabilities.size(), 5u);
    for (double p : d.probabilities) EXPECT_NEAR(p, 0.2, 1e-12);
}

TEST(Detector, ProbabilitiesNormalizedOnRandomInputs) {
    auto m = random_model(4, 3);
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        GrayImage img(kSampleHeight, kSampleWidth);
        for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
        auto d = predict(m, img);
        double s = 0;
        for (double p : d.probabilities) {
            EXPECT_GE(p, 0.0);
            s += p;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
        EXPECT_TRUE(std::isfinite(d.bbox.x) && std::isfinite(d.bbox.w));
    }
}

TEST(Detector, GradientsMatchCentralDifferences) {
    auto m = random_model(3, 7);
    Rng rng(8);
    MatrixXd x(arch::kIn, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
    BatchTargets t;
    t.cls = {0, 3, 2};
    t.has_box = {1, 0, 1};
    t.box = MatrixXd::Zero(4, 3);
    t.box.col(0) << 0.4, 0.5, 0.3, 0.2;
    t.box.col(2) << 0.6, 0.4, 0.2, 0.3;
    DetectorModel g;
    loss_and_gradient(m, x, t, 2.0, &g);

    std::vector<std::pair<double*, Eigen::Index>> params, grads;
    m.for_each_tensor([&](double* p, Eigen::Index k) { params.emplace_back(p, k); });
    g.for_each_tensor([&](double* p, Eigen::Index k) { grads.emplace_back(p, k); });
    ASSERT_EQ(params.size(), grads.size());
    int checked = 0;
    for (size_t ti = 0; ti < params.size(); ++ti) {
        for (int s = 0; s < 6; ++s) {
            const Eigen::Index k = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(params[ti].second)));
            double& p = params[ti].first[k];
            const double orig = p, h = 1e-5;
            p = orig + h;
            const double lp = loss_and_gradient(m, x, t, 2.0, nullptr).total();
            p = orig - h;
            const double lm = loss_and_gradient(m, x, t, 2.0, nullptr).total();
            p = orig;
            const double numeric = (lp - lm) / (2 * h);
            const double analytic = grads[ti].first[k];
            const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-4) << "tensor " << ti << " index " << k;
            ++checked;
        }
    }
    EXPECT_EQ(checked, 54);
}

TEST(Detector, FitsSeparableToyImages) {
    auto data = left_right_data(120, 1);
    TrainConfig cfg;
    cfg.epochs = 8;
    auto res = train(data, cfg, 3);
    EXPECT_GE(res.log.back().accuracy, 0.99);
    auto dets = predict_pooled(res.model, data.x);
    for (int i = 0; i < 120; ++i) EXPECT_EQ(dets[static_cast<size_t>(i)].predicted, data.targets.cls[static_cast<size_t>(i)]);
    ASSERT_EQ(res.log.size(), 8u);
    EXPECT_LT(res.log.back().class_loss, res.log.front().class_loss);
}

TEST(Detector, TrainingIsBitDeterministic) {
    auto data = left_right_data(40, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    auto a = train(data, cfg, 11), b = train(data, cfg, 11), c = train(data, cfg, 12);
    EXPECT_EQ(serialize_checkpoint(a.model), serialize_checkpoint(b.model));
    EXPECT_NE(serialize_checkpoint(a.model), serialize_checkpoint(c.model));
}

TEST(Detector, WarmStartContinuesFromModel) {
    auto data = left_right_data(60, 4);
    TrainConfig cfg;
    cfg.epochs = 2;
    const auto first = train(data, cfg, 5);
    const auto before = serialize_checkpoint(first.model);
    const auto resumed = train(data, cfg, 5, &first.model);
    EXPECT_EQ(serialize_checkpoint(first.model), before);
    EXPECT_LT(resumed.log.front().class_loss, first.log.front().class_loss);
    EXPECT_NE(serialize_checkpoint(resumed.model), before);

    auto wider = init_detector(data.num_classes + 1, 1);
    try {
        train(data, cfg, 5, &wider);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.field(), "start");
    }
}

TEST(Detector, TrainRejectsBadInput) {
    TrainingData empty;
    empty.num_classes = 2;
    empty.x.resize(arch::kIn, 0);
    EXPECT_THROW(train(empty, TrainConfig{}, 1), Error);
    auto one_class = left_right_data(4, 1);
    for (auto& c : one_class.targets.cls) c = 0;
    EXPECT_THROW(train(one_class, TrainConfig{}, 1), Error);
    TrainConfig bad;
    bad.learning_rate = -1;
    EXPECT_THROW(train(left_right_data(4, 1), bad, 1), ValidationError);
}

TEST(Detector, DivergenceNamesEpoch) {
    auto data = left_right_data(16, 1);
    TrainConfig cfg;
    cfg.learning_rate = 1e250;
    cfg.epochs = 5;
    try {
        train(data, cfg, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::numerical_error);
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripsExactly) {
    auto m = random_model(4, 9);
    const auto bytes = serialize_checkpoint(m);
    EXPECT_EQ(parse_checkpoint(bytes), m);
    auto path = std::filesystem::temp_directory_path() / "synthloop_ckpt_test.bin";
    save_checkpoint(m, path);
    EXPECT_EQ(load_checkpoint(path), m);
}

TEST(Checkpoint, RefusesArchitectureMismatch) {
    auto bytes = serialize_checkpoint(random_model(4, 9));
    bytes[9] ^= 0x5A;  // inside the architecture hash
    try {
        parse_checkpoint(bytes);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.field(), "arch_hash");
    }
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, 40)), Error);
}

TEST(Iou, Fixtures) {
    EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {20, 20, 5, 5}), 0.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 5, 10, 10}), 25.0 / 175.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {5, 0, 10, 10}), 50.0 / 150.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 0, 10}, {0, 0, 10, 10}), 0.0);
}

TEST(AveragePrecision, HitMissHitMissFixture) {
    EXPECT_NEAR(average_precision({{0.9, true}, {0.8, false}, {0.7, true}, {0.6, false}}, 2), 5.0 / 6.0, 1e-12);
    EXPECT_NEAR(average_precision({{0.6, false}, {0.7, true}, {0.9, true}, {0.8, false}}, 2), 5.0 / 6.0, 1e-12);
    EXPECT_DOUBLE_EQ(average_precision({{0.9, true}}, 2), 0.5);
    EXPECT_DOUBLE_EQ(average_precision({}, 2), 0.0);
}

TEST(Evaluate, FourDetectionFixtureThroughPipeline) {
    // one class; two vehicle samples hit, two background samples produce false proposals
    const Box gt{10, 10, 40, 20};
    std::vector<GroundTruth> gts = {{0, gt}, {kBackground, {}}, {0, gt}, {kBackground, {}}};
    std::vector<Detection> dets = {make_detection({0.9, 0.1}, gt), make_detection({0.8, 0.2}, gt),
                                   make_detection({0.7, 0.3}, gt), make_detection({0.6, 0.4}, gt)};
    auto res = evaluate_detections(gts, dets, 1);
    EXPECT_NEAR(res.map50, 5.0 / 6.0, 1e-9);
    EXPECT_EQ(res.confusion(0, 0), 2);
    EXPECT_EQ(res.confusion(1, 0), 2);
}

TEST(Evaluate, PerfectDetectorAndMissRules) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 4; ++k) {
            Box b{double(10 * k), 5, 30, 20};
            gts.push_back({c, b});
            std::vector<double> p(4, 0.01);
            p[static_cast<size_t>(c)] = 0.97;
            dets.push_back(make_detection(p, b));
        }
    gts.push_back({kBackground, {}});
    dets.push_back(make_detection({0.1, 0.1, 0.1, 0.7}, {0, 0, 1, 1}));
    auto res = evaluate_detections(gts, dets, 3);
    EXPECT_DOUBLE_EQ(res.map50, 1.0);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) EXPECT_EQ(res.confusion(r, c), r == c ? (r < 3 ? 4 : 1) : 0);

    // IoU 1/3 -> miss recorded against background
    dets[0].bbox = {5, 5, 30, 20};
    dets[0].bbox = {gts[0].bbox->x + 15, 5, 30, 20};
    auto miss = evaluate_detections(gts, dets, 3);
    EXPECT_EQ(miss.confusion(0, 3), 1);
    EXPECT_EQ(miss.confusion(0, 0), 3);
}

TEST(Evaluate, RowSumsAndOrderInvariance) {
    Rng rng(3);
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    for (int i = 0; i < 200; ++i) {
        const int label = rng.uniform() < 0.2 ? kBackground : static_cast<int>(rng.below(4));
        std::optional<Box> b;
        if (label != kBackground) b = Box{rng.uniform(0, 100), rng.uniform(0, 60), rng.uniform(20, 80), rng.uniform(10, 40)};
        gts.push_back({label, b});
        std::vector<double> p(5);
        for (auto& v : p) v = rng.uniform();
        const double s = std::accumulate(p.begin(), p.end(), 0.0);
        for (auto& v : p) v /= s;
        Box pb = b ? Box{b->x + rng.normal(0, 8), b->y + rng.normal(0, 4), b->w, b->h} : Box{10, 10, 30, 30};
        dets.push_back(make_detection(p, pb));
    }
    auto res = evaluate_detections(gts, dets, 4);
    std::vector<int> counts(5, 0);
    for (const auto& g : gts) ++counts[g.label == kBackground ? 4 : static_cast<size_t>(g.label)];
    for (int r = 0; r < 5; ++r) EXPECT_EQ(res.confusion.row_sum(r), counts[static_cast<size_t>(r)]);

    std::vector<size_t> perm(gts.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng(4).shuffle(perm);
    std::vector<GroundTruth> g2;
    std::vector<Detection> d2;
    for (size_t i : perm) {
        g2.push_back(gts[i]);
        d2.push_back(dets[i]);
    }
    auto res2 = evaluate_detections(g2, d2, 4);
    EXPECT_DOUBLE_EQ(res2.map50, res.map50);
    EXPECT_EQ(res2.confusion, res.confusion);
}

TEST(Evaluate, ConfusionSerializationRoundTrips) {
    ConfusionMatrix m(3);
    m(0, 1) = 2.5;
    m(2, 2) = 7;
    EXPECT_EQ(parse_confusion(serialize_confusion(m, {"a", "b"})), m);
}

TEST(Toy, OptimalWeightsIsDifference) {
    Eigen::VectorXd a(2), b(2);
    a << 1, 0.5;
    b << 0, 0.5;
    EXPECT_EQ(toy::optimal_weights(a, b), (Eigen::VectorXd(2) << 1, 0).finished());
    EXPECT_EQ(toy::optimal_weights(a, a), Eigen::VectorXd::Zero(2));
    EXPECT_THROW(toy::optimal_weights(a, Eigen::VectorXd(3)), Error);
    Rng rng(1);
    Eigen::VectorXd r1(8), r2(8);
    for (int i = 0; i < 8; ++i) {
        r1(i) = rng.normal();
        r2(i) = rng.normal();
    }
    EXPECT_EQ(toy::optimal_weights(r1, r2), r1 - r2);
}

TEST(Toy, TrainedWeightsAlignWithClosedForm) {
    Eigen::VectorXd a(2), b(2);
    a << 1, 0.5;
    b << 0, 0.5;
    auto data = toy::gaussian_data(a, b, 1.0, 5000, 7);
    auto w = toy::train(data, {}, 3);
    auto [ma, mb] = toy::empirical_means(data);
    EXPECT_GE(toy::cosine(w, toy::optimal_weights(ma, mb)), 0.99);
    EXPECT_GE(toy::cosine(w, (Eigen::VectorXd(2) << 1, 0).finished()), 0.99);
}

TEST(Toy, SymmetricClassesGiveNearZeroWeights) {
    Eigen::VectorXd mu = Eigen::VectorXd::Constant(2, 0.3);
    auto data = toy::gaussian_data(mu, mu, 1.0, 5000, 9);
    auto w = toy::train(data, {}, 4);
    EXPECT_LT(w.norm(), 0.05 * 1.0);
}

TEST(Toy, ReinforcingInjectionRaisesWeight) {
    Eigen::VectorXd a = Eigen::VectorXd::Constant(4, 0.5), b = Eigen::VectorXd::Constant(4, 0.5);
    a(0) = 0.8;
    auto base = toy::gaussian_data(a, b, 1.0, 2000, 1);
    Eigen::VectorXd boosted = a;
    boosted(0) = 3.0;
    const double w0 = toy::train(base, {}, 5)(0);
    const double w1 = toy::train(toy::inject(base, boosted, 1.0, 1000, 2), {}, 5)(0);
    EXPECT_GT(w1, w0);
}
