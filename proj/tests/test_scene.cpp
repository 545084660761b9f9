#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "synthloop/benchmark.hpp"
#include "synthloop/renderer.hpp"
#include "synthloop/scene.hpp"

using namespace synthloop;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("synthloop_scene_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

const char* kTetra =
    "MESHv1 tetra v0\n"
    "v 0 0 0\n"
    "v 1 0 0\n"
    "v 0 1 0\n"
    "v 0 0 1\n"
    "f 0 2 1 0.5 0.2 0.1 base\n"
    "f 0 1 3 0.5 0.2 0.1 side\n"
    "f 1 2 3 0.5 0.2 0.1 side\n"
    "f 2 0 3 0.9 0.2 0.1 hot\n";

MeshModel random_mesh(Rng& rng) {
    MeshModel m;
    m.class_id = "rand";
    m.version_label = "v" + std::to_string(rng.below(100));
    const int nv = 4 + static_cast<int>(rng.below(20));
    for (int i = 0; i < nv; ++i) m.vertices.push_back({rng.normal(0, 3), rng.normal(0, 3), rng.uniform(0, 3)});
    const int nf = 4 + static_cast<int>(rng.below(30));
    for (int i = 0; i < nf; ++i) {
        auto idx = rng.sample_without_replacement(nv, 3);
        m.faces.push_back({{int(idx[0]), int(idx[1]), int(idx[2])},
                           {rng.uniform(), rng.uniform(), rng.uniform()},
                           rng.uniform() < 0.5 ? "hull" : "rear_engine"});
    }
    return canonicalize(m);
}

}  // namespace

TEST(MeshFile, MinimalTetrahedronLoads) {
    auto m = parse_mesh(kTetra);
    EXPECT_EQ(m.faces.size(), 4u);
    EXPECT_EQ(m.vertices.size(), 4u);
    EXPECT_EQ(m.class_id, "tetra");
    EXPECT_EQ(m.faces[3].region_tag, "hot");
    EXPECT_DOUBLE_EQ(m.faces[3].material.emission, 0.9);
}

TEST(MeshFile, OutOfBoundsIndexIsValidationError) {
    std::string bad = kTetra;
    bad.replace(bad.find("f 2 0 3"), 7, "f 2 0 9");
    try {
        parse_mesh(bad);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        ASSERT_EQ(e.violations().size(), 1u);
        EXPECT_NE(e.violations()[0].find("out of bounds"), std::string::npos);
    }
}

TEST(MeshFile, ValidationListsAllViolations) {
    std::string bad = kTetra;
    bad.replace(bad.find("f 2 0 3 0.9"), 11, "f 2 2 3 1.5");
    try {
        parse_mesh(bad);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.violations().size(), 2u);
    }
}

TEST(MeshFile, ParseErrorNamesLineAndField) {
    std::string bad = kTetra;
    bad.replace(bad.find("v 1 0 0"), 7, "v 1 zz 0");
    try {
        parse_mesh(bad);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3);
        EXPECT_EQ(e.field(), "y");
    }
}

TEST(MeshFile, RoundTripIsIdentityOnRandomMeshes) {
    Rng rng(11);
    auto dir = temp_dir("roundtrip");
    for (int i = 0; i < 50; ++i) {
        auto m = random_mesh(rng);
        save_mesh(m, dir / "m.mesh");
        EXPECT_EQ(load_mesh(dir / "m.mesh"), m);
    }
}

TEST(MeshFile, SavesAreByteIdentical) {
    auto dir = temp_dir("bytes");
    auto m = parse_mesh(kTetra);
    save_mesh(m, dir / "a.mesh");
    save_mesh(m, dir / "b.mesh");
    EXPECT_EQ(text::read_file((dir / "a.mesh").string()), text::read_file((dir / "b.mesh").string()));
}

TEST(MeshFile, ZeroFaceMeshIsRejectedAndNothingWritten) {
    auto dir = temp_dir("empty");
    auto m = parse_mesh(kTetra);
    m.faces.clear();
    EXPECT_THROW(save_mesh(m, dir / "x.mesh"), ValidationError);
    EXPECT_FALSE(fs::exists(dir / "x.mesh"));
}

TEST(MeshFile, BenchmarkBoxtruckAssetCarriesRegionTags) {
    auto bundle = make_benchmark(default_benchmark_spec(), 7);
    auto dir = temp_dir("boxtruck");
    const auto& truck = bundle.classes[bundle.class_index("boxtruck")];
    save_mesh(truck.editable, dir / "boxtruck.mesh");
    auto loaded = load_mesh(dir / "boxtruck.mesh");
    EXPECT_EQ(loaded, truck.editable);
    EXPECT_EQ(loaded.region_tags(), (std::set<std::string>{"hull", "bonnet", "rear_engine", "wheel_arch"}));
}

TEST(Placement, OrientationIsPeriodic) {
    auto m = parse_mesh(kTetra);
    SceneConfig a, b;
    a.vehicle_orientation = 0;
    b.vehicle_orientation = 360;
    auto pa = place_vehicle(m, a), pb = place_vehicle(m, b);
    ASSERT_EQ(pa.triangles.size(), pb.triangles.size());
    for (size_t i = 0; i < pa.triangles.size(); ++i)
        for (int k = 0; k < 3; ++k) EXPECT_EQ(pa.triangles[i].v[k], pb.triangles[i].v[k]);
}

TEST(Placement, NinetyDegreesIsRotationAboutVertical) {
    auto m = make_benchmark(default_benchmark_spec(), 1).classes[2].editable;
    SceneConfig c0, c90;
    c90.vehicle_orientation = 90;
    auto p0 = place_vehicle(m, c0), p90 = place_vehicle(m, c90);
    double worst = 0;
    for (size_t i = 0; i < p0.triangles.size(); ++i)
        for (int k = 0; k < 3; ++k) {
            const Vec3 a = p0.triangles[i].v[k];
            const Vec3 expected{-a.y, a.x, a.z};
            worst = std::max(worst, norm(expected - p90.triangles[i].v[k]));
        }
    EXPECT_LT(worst, 1e-9);
}

TEST(Placement, EquivariantUnderRotation) {
    auto m = make_benchmark(default_benchmark_spec(), 1).classes[3].editable;
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const double theta = rng.uniform(0, 360), delta = rng.uniform(-400, 400);
        SceneConfig a, b;
        a.vehicle_orientation = theta;
        b.vehicle_orientation = theta + delta;
        auto pa = place_vehicle(m, a), pb = place_vehicle(m, b);
        for (size_t i = 0; i < pa.triangles.size(); ++i)
            for (int k = 0; k < 3; ++k)
                EXPECT_LT(norm(rotate_z(pa.triangles[i].v[k], delta) - pb.triangles[i].v[k]), 1e-9);
    }
}

TEST(Placement, DoublingRangeHalvesProjectedWidth) {
    auto m = make_benchmark(default_benchmark_spec(), 1).classes[3].editable;
    SceneConfig near_cfg, far_cfg;
    near_cfg.vehicle_orientation = far_cfg.vehicle_orientation = 90;
    near_cfg.range = 1000;
    far_cfg.range = 2000;
    auto wn = coverage_box(rasterize(place_vehicle(m, near_cfg)).face_id, 0)->w;
    auto wf = coverage_box(rasterize(place_vehicle(m, far_cfg)).face_id, 0)->w;
    // pinhole oracle: width scales as focal * extent / range
    EXPECT_NEAR(wf, 0.5 * wn, 1.0);
}

TEST(Placement, RejectsInvalidConfig) {
    auto m = parse_mesh(kTetra);
    SceneConfig c;
    c.range = 0;
    c.ambient_level = 2;
    try {
        place_vehicle(m, c);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.violations().size(), 2u);
    }
}

TEST(Benchmark, DeterministicUnderSeed) {
    auto a = make_benchmark(default_benchmark_spec(), 7);
    auto b = make_benchmark(default_benchmark_spec(), 7);
    EXPECT_EQ(a.classes, b.classes);
    auto c = make_benchmark(default_benchmark_spec(), 8);
    EXPECT_NE(a.classes[0].reference, c.classes[0].reference);
}

TEST(Benchmark, SharedHotspotOnDeclaredPair) {
    auto spec = default_benchmark_spec();
    spec.confusables = {{"boxtruck", "turrettank", "rear_engine", 0.92}};
    auto bundle = make_benchmark(spec, 3);
    for (const char* name : {"boxtruck", "turrettank"}) {
        const auto& ref = bundle.classes[bundle.class_index(name)].reference;
        bool hot = false;
        for (const auto& f : ref.faces) hot |= f.region_tag == "rear_engine" && f.material.emission >= 0.9;
        EXPECT_TRUE(hot) << name;
    }
}

TEST(Benchmark, ReferenceMeshesAreMoreDetailed) {
    auto bundle = make_benchmark(default_benchmark_spec(), 7);
    ASSERT_EQ(bundle.classes.size(), 4u);
    for (const auto& c : bundle.classes) {
        EXPECT_GT(c.reference.faces.size(), c.editable.faces.size()) << c.name;
        EXPECT_EQ(c.reference.class_id, c.editable.class_id);
        EXPECT_NO_THROW(validate(c.reference));
    }
}

TEST(Benchmark, MissingEditableMeshIsRejected) {
    auto spec = default_benchmark_spec();
    spec.classes[1].editable.reset();
    EXPECT_THROW(make_benchmark(spec, 7), ValidationError);
}
