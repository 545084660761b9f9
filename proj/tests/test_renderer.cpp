#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "synthloop/benchmark.hpp"
#include "synthloop/renderer.hpp"

using namespace synthloop;
using oracle::nested_convolve;

namespace {

SceneConfig small_config() {
    SceneConfig c;
    c.image_height = 64;
    c.image_width = 80;
    c.range = 100;
    c.focal_px = 2000;
    return c;
}

// Triangle in a plane facing the camera (constant world x) at the given depth offset.
WorldTriangle facing_triangle(double x, std::array<std::pair<double, double>, 3> yz, Material m, int id) {
    WorldTriangle t;
    for (int k = 0; k < 3; ++k) t.v[k] = {x, yz[k].first, yz[k].second};
    t.material = m;
    t.face_index = id;
    return t;
}

// Ray/triangle intersection distance, or -1.
double ray_hit(Vec3 o, Vec3 d, const WorldTriangle& t, double& margin) {
    const Vec3 e1 = t.v[1] - t.v[0], e2 = t.v[2] - t.v[0];
    const Vec3 p = cross(d, e2);
    const double det = dot(e1, p);
    if (std::abs(det) < 1e-15) return -1;
    const Vec3 s = o - t.v[0];
    const double u = dot(s, p) / det;
    const Vec3 q = cross(s, e1);
    const double v = dot(d, q) / det;
    margin = std::min({u, v, 1 - u - v});
    if (margin < 0) return -1;
    return dot(e2, q) / det;
}

double brute_series_j1(double x) {
    long double sum = 0, fact_m = 1, fact_m1 = 1;
    for (int m = 0; m < 120; ++m) {
        if (m > 0) {
            fact_m *= m;
            fact_m1 *= (m + 1);
        }
        const long double t = std::pow(-1.0L, m) * std::pow(static_cast<long double>(x) / 2, 2 * m + 1) / (fact_m * fact_m1);
        sum += t;
    }
    return static_cast<double>(sum);
}

RadianceImage random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    RadianceImage img(h, w);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}


}  // namespace

TEST(Rasterize, EmptySceneIsPureBackground) {
    const auto cfg = small_config();
    const RenderConfig rc;
    auto res = rasterize(place_empty(cfg), rc);
    const Camera cam = make_camera(cfg);
    for (int r = 0; r < cfg.image_height; ++r)
        for (int c = 0; c < cfg.image_width; ++c) {
            EXPECT_EQ(res.face_id(r, c), kBackground);
            EXPECT_EQ(res.image(r, c), background_radiance(cam, c + 0.5, r + 0.5, cfg.ambient_level, rc));
        }
    EXPECT_EQ(res.report.covered_pixels, 0);
}

TEST(Rasterize, BackgroundSplitsGroundAndSky) {
    auto cfg = small_config();
    cfg.camera_elevation = 0.5;
    auto res = rasterize(place_empty(cfg));
    RenderConfig rc;
    EXPECT_DOUBLE_EQ(res.image(cfg.image_height - 1, 0), rc.ground_emission + rc.ground_reflectance * cfg.ambient_level);
    EXPECT_DOUBLE_EQ(res.image(0, 0), rc.sky_level * cfg.ambient_level);
}

TEST(Rasterize, UnitEmissionFaceIsExactlyOne) {
    auto cfg = small_config();
    cfg.ambient_level = 0;
    PlacedScene s = place_empty(cfg);
    s.triangles.push_back(facing_triangle(0, {{{-1, 0}, {1, 0}, {0, 2.4}}}, {1.0, 0.0, 0.0}, 0));
    auto res = rasterize(s);
    int covered = 0;
    for (size_t i = 0; i < res.image.data.size(); ++i)
        if (res.face_id.data[i] == 0) {
            ++covered;
            EXPECT_EQ(res.image.data[i], 1.0);
        }
    EXPECT_GT(covered, 100);
}

TEST(Rasterize, NearerFaceWinsAgainstRayCastOracle) {
    auto cfg = small_config();
    PlacedScene s = place_empty(cfg);
    s.triangles.push_back(facing_triangle(-1.0, {{{-1.5, -0.5}, {1.0, 0.0}, {0.0, 2.5}}}, {0.2, 0, 0}, 0));
    s.triangles.push_back(facing_triangle(1.0, {{{-1.0, 1.0}, {1.5, 0.2}, {0.5, 2.8}}}, {0.8, 0, 0}, 1));
    // Tilted face that pierces both.
    WorldTriangle tilt;
    tilt.v = {Vec3{-3, -0.5, 0.5}, Vec3{3, 0.5, 0.6}, Vec3{0, 0.2, 2.0}};
    tilt.material = {0.5, 0, 0};
    tilt.face_index = 2;
    s.triangles.push_back(tilt);
    auto res = rasterize(s);
    const Camera& cam = s.camera;
    int checked = 0;
    for (int r = 0; r < cfg.image_height; ++r)
        for (int c = 0; c < cfg.image_width; ++c) {
            const Vec3 d = cam.ray(c + 0.5, r + 0.5);
            int best = kBackground;
            double best_t = INFINITY, min_margin = INFINITY, second_t = INFINITY;
            for (const auto& t : s.triangles) {
                double margin = 0;
                const double hit = ray_hit(cam.position, d, t, margin);
                if (hit > 0) {
                    min_margin = std::min(min_margin, margin);
                    if (hit < best_t) {
                        second_t = best_t;
                        best_t = hit;
                        best = t.face_index;
                    } else {
                        second_t = std::min(second_t, hit);
                    }
                }
            }
            if (min_margin < 1e-6 || std::abs(second_t - best_t) < 1e-6) continue;  // ambiguous pixels
            ++checked;
            EXPECT_EQ(res.face_id(r, c), best) << r << "," << c;
        }
    EXPECT_GT(checked, 1000);
}

TEST(Rasterize, SharedEdgePixelsAreCoveredOnce) {
    auto cfg = small_config();
    PlacedScene s = place_empty(cfg);
    // Two triangles forming a quad; every pixel inside is owned by exactly one.
    Material m{0.5, 0, 0};
    s.triangles.push_back(facing_triangle(0, {{{-1, 0}, {1, 0}, {1, 2.4}}}, m, 0));
    s.triangles.push_back(facing_triangle(0, {{{-1, 0}, {1, 2.4}, {-1, 2.4}}}, m, 1));
    auto both = rasterize(s);
    auto only0 = s, only1 = s;
    only0.triangles.pop_back();
    only1.triangles.erase(only1.triangles.begin());
    auto a = rasterize(only0), b = rasterize(only1);
    for (size_t i = 0; i < both.face_id.data.size(); ++i) {
        const bool in_a = a.face_id.data[i] >= 0, in_b = b.face_id.data[i] >= 0;
        EXPECT_FALSE(in_a && in_b) << i;
        EXPECT_EQ(both.face_id.data[i] >= 0, in_a || in_b);
    }
}

TEST(Bessel, MatchesSeriesAndStandardLibrary) {
    for (double x = 0.0; x <= 30.0; x += 0.0625) {
        const double ref = std::cyl_bessel_j(1.0, x);
        EXPECT_NEAR(bessel_j1(x), ref, 1e-10) << x;
        if (x <= 20) EXPECT_NEAR(bessel_j1(x), brute_series_j1(x), 1e-10) << x;
    }
    EXPECT_NEAR(bessel_j1(kBesselJ1FirstZero), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(bessel_j1(-2.0), -bessel_j1(2.0));
}

TEST(AiryKernel, NormalizedWithStrictCentralMaximum) {
    for (double r0 : {1.0, 2.5, 4.0})
        for (int size : {3, 5, 11, 21}) {
            auto k = airy_kernel(r0, size);
            double sum = 0;
            for (double v : k.values) sum += v;
            EXPECT_NEAR(sum, 1.0, 1e-9);
            const double centre = k(k.half(), k.half());
            for (int i = 0; i < size; ++i)
                for (int j = 0; j < size; ++j)
                    if (i != k.half() || j != k.half()) EXPECT_LT(k(i, j), centre);
        }
}

TEST(AiryKernel, VanishesAtFirstDarkRing) {
    EXPECT_LT(airy_intensity(kBesselJ1FirstZero) / airy_intensity(0), 1e-6);
    auto k = airy_kernel(3.0, 11);
    EXPECT_LT(k(5, 8) / k(5, 5), 1e-6);
    const double ref = std::pow(2 * brute_series_j1(kBesselJ1FirstZero * 3.0 / 3.0) / kBesselJ1FirstZero, 2);
    EXPECT_LT(ref, 1e-6);
}

TEST(AiryKernel, RejectsBadParameters) {
    EXPECT_THROW(airy_kernel(0.0, 11), ValidationError);
    EXPECT_THROW(airy_kernel(2.5, 10), ValidationError);
    EXPECT_THROW(airy_kernel(2.5, 1), ValidationError);
}

TEST(Convolve, IdentityKernelIsNoOp) {
    auto img = random_image(17, 23, 1);
    AiryKernel id;
    EXPECT_EQ(convolve(img, id), img);
}

TEST(Convolve, ConstantImageStaysConstant) {
    RadianceImage img(20, 30, 0.37);
    auto out = convolve(img, airy_kernel(2.5, 11));
    for (double v : out.data) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(Convolve, DeltaReproducesKernel) {
    RadianceImage img(31, 31, 0.0);
    img(15, 15) = 1.0;
    auto k = airy_kernel(2.5, 11);
    auto out = convolve(img, k);
    for (int r = 0; r < 31; ++r)
        for (int c = 0; c < 31; ++c) {
            const int i = r - 15 + 5, j = c - 15 + 5;
            const double expect = (i >= 0 && i < 11 && j >= 0 && j < 11) ? k(i, j) : 0.0;
            EXPECT_NEAR(out(r, c), expect, 1e-15);
        }
}

TEST(Convolve, IsLinear) {
    auto a = random_image(25, 19, 2), b = random_image(25, 19, 3);
    auto k = airy_kernel(2.5, 7);
    const double alpha = 1.7, beta = -0.4;
    RadianceImage mix(25, 19);
    for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = alpha * a.data[i] + beta * b.data[i];
    auto lhs = convolve(mix, k), ca = convolve(a, k), cb = convolve(b, k);
    for (size_t i = 0; i < lhs.data.size(); ++i) EXPECT_NEAR(lhs.data[i], alpha * ca.data[i] + beta * cb.data[i], 1e-9);
}

TEST(Convolve, MatchesNestedLoopOracle) {
    auto img = random_image(40, 33, 4);
    auto k = airy_kernel(2.5, 11);
    auto fast = convolve(img, k), slow = nested_convolve(img, k);
    for (size_t i = 0; i < fast.data.size(); ++i) EXPECT_NEAR(fast.data[i], slow.data[i], 1e-6);
}

TEST(Convolve, ConservesEnergyAwayFromBorders) {
    RadianceImage img(64, 64, 0.0);
    Rng rng(9);
    for (int r = 20; r < 44; ++r)
        for (int c = 20; c < 44; ++c) img(r, c) = rng.uniform();
    double in = 0, out = 0;
    for (double v : img.data) in += v;
    for (double v : convolve(img, airy_kernel(2.5, 11)).data) out += v;
    EXPECT_NEAR(out, in, 1e-9 * in);
}

TEST(Quantize, AffineThenClamp) {
    RadianceImage img(1, 4);
    img.data = {0.0, 2.0, 0.5625, -1.0};
    auto q = quantize(img, 160, 10);
    EXPECT_EQ(q.data[0], 10);
    EXPECT_EQ(q.data[1], 255);
    EXPECT_EQ(q.data[2], 100);
    EXPECT_EQ(q.data[3], 0);
}

TEST(RenderFrame, DeterministicAndNoiseIsSmall) {
    auto bundle = make_benchmark(default_benchmark_spec(), 7);
    const auto& mesh = bundle.classes[0].reference;
    SceneConfig cfg;
    cfg.vehicle_orientation = 30;
    auto a = render_frame(&mesh, 0, cfg, Provenance::real, 42);
    auto b = render_frame(&mesh, 0, cfg, Provenance::real, 42);
    EXPECT_EQ(a.image, b.image);
    ASSERT_TRUE(a.bbox);
    EXPECT_EQ(a.label, 0);
    auto clean = render_frame(&mesh, 0, cfg, Provenance::synthetic, 42);
    double diff = 0;
    for (size_t i = 0; i < a.image.data.size(); ++i) diff += std::abs(int(a.image.data[i]) - int(clean.image.data[i]));
    diff /= a.image.data.size() * 255.0;
    EXPECT_GT(diff, 0.0);
    EXPECT_LT(diff, 4.0 / 255.0);
    auto other = render_frame(&mesh, 0, cfg, Provenance::real, 43);
    EXPECT_NE(other.image, a.image);
}

TEST(RenderFrame, BboxContainsVehicleAndScalesWithRange) {
    auto bundle = make_benchmark(default_benchmark_spec(), 7);
    const auto& mesh = bundle.classes[1].reference;
    SceneConfig cfg;
    auto f = render_frame(&mesh, 1, cfg, Provenance::synthetic, 1);
    ASSERT_TRUE(f.bbox);
    // the vehicle is centred horizontally and sits below the optical axis
    EXPECT_LT(f.bbox->x, cfg.image_width / 2.0);
    EXPECT_GT(f.bbox->right(), cfg.image_width / 2.0);
    EXPECT_GT(f.bbox->w, 50);
}

TEST(RenderFrame, NoVehicleGivesBackgroundWithoutBox) {
    SceneConfig cfg;
    auto f = render_frame(nullptr, 2, cfg, Provenance::synthetic, 1);
    EXPECT_FALSE(f.bbox);
    EXPECT_EQ(f.label, kBackground);
    auto raster = rasterize(place_empty(cfg));
    auto expected = quantize(convolve(raster.image, airy_kernel(2.5, 11)), 160, 10);
    EXPECT_EQ(f.image, expected);
}

TEST(RenderFrame, FilenameEncodesMetadata) {
    EXPECT_EQ(frame_filename("boxtruck", 12.5, 1000, Provenance::real, "v0", 7), "boxtruck_12.5_1000_real_v0_000007.png");
}
