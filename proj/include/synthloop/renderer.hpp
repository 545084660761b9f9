#pragma once
// Software rasterizer producing IR-like radiance images, the Airy-disk
// diffraction kernel, direct 2D convolution, and 8-bit quantization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "synthloop/benchmark.hpp"
#include "synthloop/core/error.hpp"
#include "synthloop/core/image.hpp"
#include "synthloop/core/rng.hpp"
#include "synthloop/scene.hpp"

namespace synthloop {

using RadianceImage = Image<double>;

constexpr int kBackground = -1;

enum class Provenance { real, synthetic };

inline const char* to_string(Provenance p) { return p == Provenance::real ? "real" : "synthetic"; }
inline Provenance parse_provenance(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "synthetic") return Provenance::synthetic;
    throw Error(ErrorCode::invalid_argument, "provenance must be real|synthetic, got '" + s + "'", "provenance");
}

struct RenderConfig {
    double ground_emission = 0.15;
    double ground_reflectance = 0.3;
    double sky_level = 0.05;
    double airy_first_zero = 2.5;  // pixels
    int airy_size = 11;
    double gain = 160.0;
    double offset = 10.0;
};

struct RenderReport {
    int triangles = 0;
    int degenerate_triangles = 0;
    int covered_pixels = 0;
};

struct RasterResult {
    RadianceImage image;
    Image<int> face_id;  // -1 where no triangle covers the pixel centre
    RenderReport report;
};

inline double background_radiance(const Camera& cam, double u, double v, double ambient, const RenderConfig& rc) {
    const Vec3 d = cam.ray(u, v);
    if (d.z < 0) return rc.ground_emission + rc.ground_reflectance * ambient;
    return rc.sky_level * ambient;
}

// Shaded radiance of a flat face: emission + Lambertian ambient term +
// Blinn-style specular lobe whose exponent grows with smoothness.
inline double shade(const WorldTriangle& t, const Camera& cam, const SceneConfig& cfg) {
    Vec3 n = normalized(cross(t.v[1] - t.v[0], t.v[2] - t.v[0]));
    const Vec3 centroid = (1.0 / 3.0) * (t.v[0] + t.v[1] + t.v[2]);
    const Vec3 view = normalized(cam.position - centroid);
    if (dot(n, view) < 0) n = -1.0 * n;
    const Vec3 l = cfg.light_direction;
    const Vec3 h = normalized(l + view);
    const auto& m = t.material;
    const double diffuse = m.reflectance * cfg.ambient_level * std::max(0.0, dot(n, l));
    const double specular = m.smoothness * std::pow(std::max(0.0, dot(n, h)), 1.0 + 31.0 * m.smoothness);
    return m.emission + diffuse + specular;
}

inline RasterResult rasterize(const PlacedScene& scene, const RenderConfig& rc = {}) {
    const auto& cam = scene.camera;
    const int H = cam.height, W = cam.width;
    RasterResult out{RadianceImage(H, W), Image<int>(H, W, -1), {}};
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            out.image(r, c) = background_radiance(cam, c + 0.5, r + 0.5, scene.config.ambient_level, rc);

    Image<double> depth(H, W, std::numeric_limits<double>::infinity());
    out.report.triangles = static_cast<int>(scene.triangles.size());
    for (const auto& tri : scene.triangles) {
        Camera::Projection p[3];
        bool behind = false;
        for (int k = 0; k < 3; ++k) {
            p[k] = cam.project(tri.v[k]);
            if (!(p[k].depth > 1e-6)) behind = true;
        }
        if (behind) continue;
        auto edge = [](const Camera::Projection& a, const Camera::Projection& b, double x, double y) {
            return (b.u - a.u) * (y - a.v) - (b.v - a.v) * (x - a.u);
        };
        double area = edge(p[0], p[1], p[2].u, p[2].v);
        if (std::abs(area) < 1e-12) {
            ++out.report.degenerate_triangles;
            continue;
        }
        if (area < 0) {
            std::swap(p[1], p[2]);
            area = -area;
        }
        // Shared-edge tie break: exactly one of the two directions owns an edge.
        auto owns = [](const Camera::Projection& a, const Camera::Projection& b) {
            const double dx = b.u - a.u, dy = b.v - a.v;
            return dy > 0 || (dy == 0 && dx > 0);
        };
        const bool own0 = owns(p[1], p[2]), own1 = owns(p[2], p[0]), own2 = owns(p[0], p[1]);

        const double radiance = shade(tri, cam, scene.config);
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min({p[0].u, p[1].u, p[2].u}))));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max({p[0].u, p[1].u, p[2].u}))));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min({p[0].v, p[1].v, p[2].v}))));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max({p[0].v, p[1].v, p[2].v}))));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                const double w0 = edge(p[1], p[2], px, py);
                const double w1 = edge(p[2], p[0], px, py);
                const double w2 = edge(p[0], p[1], px, py);
                if (w0 < 0 || w1 < 0 || w2 < 0) continue;
                if ((w0 == 0 && !own0) || (w1 == 0 && !own1) || (w2 == 0 && !own2)) continue;
                const double inv_z = (w0 / p[0].depth + w1 / p[1].depth + w2 / p[2].depth) / area;
                const double z = 1.0 / inv_z;
                if (z < depth(y, x)) {
                    depth(y, x) = z;
                    out.image(y, x) = radiance;
                    out.face_id(y, x) = tri.face_index;
                }
            }
    }
    for (int v : out.face_id.data) out.report.covered_pixels += v >= 0;
    return out;
}

// ---------------------------------------------------------------------------
// Airy kernel

// First positive zero of J1.
constexpr double kBesselJ1FirstZero = 3.8317059702075123156;

namespace detail {

inline double bessel_j1_series(double x) {
    const long double half = static_cast<long double>(x) / 2;
    const long double q = -half * half;
    long double term = half, sum = half;
    for (int m = 0; m < 200; ++m) {
        term *= q / ((m + 1.0L) * (m + 2.0L));
        sum += term;
        if (std::abs(term) < 1e-22L * std::abs(sum) + 1e-300L) break;
    }
    return static_cast<double>(sum);
}

inline double bessel_j1_asymptotic(double x) {
    // Hankel expansion, truncated at its smallest term.
    const double mu = 4.0;
    double p = 0, q = 0, term = 1.0, prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 60; ++k) {
        if (std::abs(term) > prev) break;
        prev = std::abs(term);
        const double signed_term = ((k / 2) % 2 == 0 ? 1.0 : -1.0) * term;
        if (k % 2 == 0) p += signed_term;
        else q += signed_term;
        const double odd = 2.0 * k + 1.0;
        term *= (mu - odd * odd) / ((k + 1.0) * 8.0 * x);
    }
    const double chi = x - 0.75 * M_PI;
    return std::sqrt(2.0 / (M_PI * x)) * (p * std::cos(chi) - q * std::sin(chi));
}

}  // namespace detail

// Bessel function of the first kind, order 1. Power series below |x| = 12,
// Hankel asymptotic expansion above.
inline double bessel_j1(double x) {
    const double ax = std::abs(x);
    const double r = ax < 12.0 ? detail::bessel_j1_series(ax) : detail::bessel_j1_asymptotic(ax);
    return x < 0 ? -r : r;
}

// Normalized Airy intensity [2 J1(x) / x]^2, equal to 1 at x = 0.
inline double airy_intensity(double x) {
    if (std::abs(x) < 1e-12) return 1.0;
    const double a = 2.0 * bessel_j1(x) / x;
    return a * a;
}

struct AiryKernel {
    int size = 1;
    std::vector<double> values{1.0};
    double first_zero_radius = 0.0;

    double operator()(int r, int c) const { return values[static_cast<size_t>(r) * size + c]; }
    int half() const { return size / 2; }
};

inline AiryKernel airy_kernel(double first_zero_radius, int size) {
    std::vector<std::string> v;
    if (!(first_zero_radius > 0) || !std::isfinite(first_zero_radius)) v.push_back("first_zero_radius must be > 0");
    if (size < 3 || size % 2 == 0) v.push_back("size must be odd and >= 3");
    if (!v.empty()) throw ValidationError(std::move(v), "airy_kernel");

    AiryKernel k;
    k.size = size;
    k.first_zero_radius = first_zero_radius;
    k.values.assign(static_cast<size_t>(size) * size, 0.0);
    const int h = size / 2;
    double sum = 0;
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            const double r = std::hypot(i - h, j - h);
            const double w = airy_intensity(kBesselJ1FirstZero * r / first_zero_radius);
            k.values[static_cast<size_t>(i) * size + j] = w;
            sum += w;
        }
    for (auto& w : k.values) w /= sum;
    return k;
}

// Direct 2D convolution with clamp-to-edge boundaries. Output keeps the input size.
inline RadianceImage convolve(const RadianceImage& img, const AiryKernel& k) {
    const int H = img.height, W = img.width, n = k.size, h = k.half();
    RadianceImage out(H, W, 0.0);
    std::vector<int> cols(static_cast<size_t>(n) * W);
    for (int j = 0; j < n; ++j)
        for (int c = 0; c < W; ++c) cols[static_cast<size_t>(j) * W + c] = std::clamp(c - (j - h), 0, W - 1);
    for (int r = 0; r < H; ++r) {
        double* dst = &out(r, 0);
        for (int i = 0; i < n; ++i) {
            const double* src = &img(std::clamp(r - (i - h), 0, H - 1), 0);
            for (int j = 0; j < n; ++j) {
                const double w = k(i, j);
                const int* idx = &cols[static_cast<size_t>(j) * W];
                for (int c = 0; c < W; ++c) dst[c] += w * src[idx[c]];
            }
        }
    }
    return out;
}

inline GrayImage quantize(const RadianceImage& img, double gain, double offset) {
    require(gain > 0, "gain must be > 0", "gain");
    GrayImage out(img.height, img.width);
    for (size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::round(gain * img.data[i] + offset);
        out.data[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frames

struct Frame {
    GrayImage image;
    std::optional<Box> bbox;
    int label = kBackground;
    double orientation = 0.0;
    Provenance provenance = Provenance::synthetic;
    std::string version_label = "v0";
    SceneConfig config;
};

// Sensor model for reference ("real") captures: per-frame white noise plus a
// fixed pattern shared by every capture.
inline void add_sensor_noise(RadianceImage& img, const SensorNoise& noise, std::uint64_t seed) {
    Rng pattern(noise.pattern_seed);
    Rng white(seed);
    for (auto& v : img.data) {
        const double fp = pattern.uniform(-noise.fixed_pattern_amplitude, noise.fixed_pattern_amplitude);
        v = std::max(0.0, v + fp + white.normal(0.0, noise.sigma));
    }
}

inline std::optional<Box> coverage_box(const Image<int>& face_id, double dilate) {
    int x0 = face_id.width, y0 = face_id.height, x1 = -1, y1 = -1;
    for (int r = 0; r < face_id.height; ++r)
        for (int c = 0; c < face_id.width; ++c)
            if (face_id(r, c) >= 0) {
                x0 = std::min(x0, c);
                x1 = std::max(x1, c);
                y0 = std::min(y0, r);
                y1 = std::max(y1, r);
            }
    if (x1 < 0) return std::nullopt;
    const Box raw{x0 - dilate, y0 - dilate, (x1 + 1 - x0) + 2 * dilate, (y1 + 1 - y0) + 2 * dilate};
    return clip(raw, Box{0, 0, double(face_id.width), double(face_id.height)});
}

// mesh == nullptr renders an empty scene (background frame).
inline Frame render_frame(const MeshModel* mesh, int label, const SceneConfig& config, Provenance provenance,
                          std::uint64_t seed, const RenderConfig& rc = {}, const SensorNoise& noise = {}) {
    const PlacedScene scene = mesh ? place_vehicle(*mesh, config) : place_empty(config);
    RasterResult raster = rasterize(scene, rc);
    const AiryKernel kernel = airy_kernel(rc.airy_first_zero, rc.airy_size);
    RadianceImage blurred = convolve(raster.image, kernel);
    if (provenance == Provenance::real) add_sensor_noise(blurred, noise, seed);

    Frame f;
    f.image = quantize(blurred, rc.gain, rc.offset);
    f.bbox = coverage_box(raster.face_id, kernel.first_zero_radius);
    f.label = f.bbox ? label : kBackground;
    f.orientation = scene.config.vehicle_orientation;
    f.provenance = provenance;
    f.version_label = mesh ? mesh->version_label : "v0";
    f.config = scene.config;
    return f;
}

inline std::string frame_filename(const std::string& class_name, double orientation, double range, Provenance prov,
                                  const std::string& version, size_t index) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s_%.1f_%.0f_%s_%s_%06zu.png", class_name.c_str(), orientation, range,
                  to_string(prov), version.c_str(), index);
    return buf;
}

}  // namespace synthloop
