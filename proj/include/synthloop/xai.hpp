#pragma once
// KernelSHAP over rectangular superpixel grids with background replacement,
// count-based aggregation of attribution maps, overlays, map correlation and
// the bounding-box focus metric.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/geometry.hpp"
#include "synthloop/core/image.hpp"
#include "synthloop/core/png.hpp"
#include "synthloop/core/rng.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/detector.hpp"

namespace synthloop {

struct PixelRect {
    int x = 0, y = 0, w = 0, h = 0;
    bool contains(int r, int c) const { return r >= y && r < y + h && c >= x && c < x + w; }
    int area() const { return w * h; }
    friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

// Smallest pixel rectangle covering `b`, clipped to the image.
inline PixelRect pixel_rect(const Box& b, int height, int width) {
    const int x0 = std::clamp(static_cast<int>(std::floor(b.x)), 0, width);
    const int y0 = std::clamp(static_cast<int>(std::floor(b.y)), 0, height);
    const int x1 = std::clamp(static_cast<int>(std::ceil(b.right())), 0, width);
    const int y1 = std::clamp(static_cast<int>(std::ceil(b.bottom())), 0, height);
    return {x0, y0, x1 - x0, y1 - y0};
}

struct SuperpixelGrid {
    PixelRect bbox;
    int rows = 0, cols = 0;

    int size() const { return rows * cols; }
    int cell_width() const { return bbox.w / cols; }
    int cell_height() const { return bbox.h / rows; }

    // Remainder pixels go to the last row/column.
    PixelRect cell(int index) const {
        const int r = index / cols, c = index % cols;
        const int cw = cell_width(), ch = cell_height();
        return {bbox.x + c * cw, bbox.y + r * ch, c == cols - 1 ? bbox.w - c * cw : cw,
                r == rows - 1 ? bbox.h - r * ch : ch};
    }

    // Cell index of pixel (r, c), or -1 outside the bbox.
    int cell_of(int r, int c) const {
        if (!bbox.contains(r, c)) return -1;
        const int gr = std::min((r - bbox.y) / cell_height(), rows - 1);
        const int gc = std::min((c - bbox.x) / cell_width(), cols - 1);
        return gr * cols + gc;
    }
};

inline SuperpixelGrid make_grid(const PixelRect& bbox, int rows, int cols) {
    if (rows < 1 || cols < 1) throw Error(ErrorCode::invalid_argument, "grid needs rows, cols >= 1", "grid");
    if (bbox.w <= 0 || bbox.h <= 0) throw Error(ErrorCode::invalid_argument, "bbox is degenerate", "bbox");
    if (bbox.h < rows || bbox.w < cols)
        throw Error(ErrorCode::invalid_argument,
                    "bbox " + std::to_string(bbox.h) + "x" + std::to_string(bbox.w) + " is smaller than the " +
                        std::to_string(rows) + "x" + std::to_string(cols) + " grid",
                    "grid");
    return {bbox, rows, cols};
}

// Bits equal to 0 take the background's pixels inside that cell.
inline GrayImage mask_image(const GrayImage& sample, const SuperpixelGrid& grid, const std::vector<char>& bits,
                            const GrayImage& background) {
    require(background.height == sample.height && background.width == sample.width,
            "background must match the sample dimensions", "background");
    require(static_cast<int>(bits.size()) == grid.size(), "mask length must equal the superpixel count", "mask");
    GrayImage out = sample;
    for (int i = 0; i < grid.size(); ++i) {
        if (bits[static_cast<size_t>(i)]) continue;
        const PixelRect c = grid.cell(i);
        for (int r = c.y; r < c.y + c.h; ++r)
            for (int x = c.x; x < c.x + c.w; ++x) out(r, x) = background(r, x);
    }
    return out;
}

// Scores a batch of images for one target.
using ScoreFn = std::function<std::vector<double>(const std::vector<GrayImage>&)>;

inline ScoreFn detector_score(const DetectorModel& model, int target_class) {
    require(target_class >= 0 && target_class <= model.num_classes, "target class out of range", "class");
    return [model, target_class](const std::vector<GrayImage>& images) {
        std::vector<double> out;
        out.reserve(images.size());
        for (const auto& d : predict_batch(model, images)) out.push_back(d.probabilities[static_cast<size_t>(target_class)]);
        return out;
    };
}

struct ShapConfig {
    int n_masks = 1000;
    std::uint64_t seed = 0;
    double damping = 1e-8;
};

struct AttributionMap {
    std::string sample_id;
    int target_class = 0;
    SuperpixelGrid grid;
    std::vector<double> values;
    double baseline = 0;  // mean target output with every superpixel replaced
    double fx = 0;        // target output on the unmasked sample
    bool exact = false;
    int n_masks = 0;
    std::uint64_t seed = 0;

    double sum() const {
        double s = 0;
        for (double v : values) s += v;
        return s;
    }
    bool operator==(const AttributionMap& o) const {
        return sample_id == o.sample_id && target_class == o.target_class && grid.bbox == o.grid.bbox &&
               grid.rows == o.grid.rows && grid.cols == o.grid.cols && values == o.values && baseline == o.baseline &&
               fx == o.fx && exact == o.exact && n_masks == o.n_masks && seed == o.seed;
    }
};

namespace detail {

inline double binomial(int n, int k) {
    double r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

// Shapley kernel weight of a coalition of size k among m players.
inline double shapley_kernel(int m, int k) { return (m - 1) / (binomial(m, k) * k * (m - k)); }

// Scores images in chunks to bound memory.
inline std::vector<double> score_all(const ScoreFn& f, const GrayImage& x, const SuperpixelGrid& grid,
                                     const std::vector<std::vector<char>>& masks,
                                     const std::vector<const GrayImage*>& backgrounds) {
    std::vector<double> out;
    out.reserve(masks.size());
    constexpr size_t kChunk = 128;
    for (size_t start = 0; start < masks.size(); start += kChunk) {
        std::vector<GrayImage> batch;
        for (size_t i = start; i < std::min(masks.size(), start + kChunk); ++i)
            batch.push_back(mask_image(x, grid, masks[i], *backgrounds[i]));
        auto s = f(batch);
        require(s.size() == batch.size(), "score function returned the wrong number of values", "model");
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

}  // namespace detail

// KernelSHAP with the efficiency constraint substituted out of the weighted
// least-squares problem. Exact mode (2^S <= n_masks) enumerates every
// coalition with its kernel weight and averages each coalition over all
// backgrounds; sampled mode draws coalition sizes from the kernel
// distribution (paired with complements) and one background per mask.
inline AttributionMap kernel_shap(const ScoreFn& f, const GrayImage& x, int target_class, const SuperpixelGrid& grid,
                                  const std::vector<GrayImage>& backgrounds, const ShapConfig& cfg,
                                  std::string sample_id = {}) {
    const int m = grid.size();
    if (backgrounds.empty()) throw Error(ErrorCode::invalid_argument, "background set is empty", "backgrounds");
    if (cfg.n_masks < m + 2)
        throw Error(ErrorCode::invalid_argument,
                    "n_masks must be >= superpixels + 2 (" + std::to_string(m + 2) + ")", "n_masks");
    AttributionMap res;
    res.sample_id = std::move(sample_id);
    res.target_class = target_class;
    res.grid = grid;
    res.n_masks = cfg.n_masks;
    res.seed = cfg.seed;
    res.exact = m < 31 && (std::uint64_t{1} << m) <= static_cast<std::uint64_t>(cfg.n_masks);

    const std::vector<char> none(static_cast<size_t>(m), 0);
    std::vector<const GrayImage*> all_bg;
    for (const auto& b : backgrounds) all_bg.push_back(&b);

    res.fx = f({x}).at(0);
    {
        auto base = detail::score_all(f, x, grid, std::vector<std::vector<char>>(backgrounds.size(), none), all_bg);
        double s = 0;
        for (double v : base) s += v;
        res.baseline = s / static_cast<double>(base.size());
    }
    const double delta = res.fx - res.baseline;
    if (m == 1) {
        res.values = {delta};
        return res;
    }

    std::vector<std::vector<char>> coalitions;
    std::vector<double> weights, values;
    if (res.exact) {
        for (std::uint64_t bits = 1; bits + 1 < (std::uint64_t{1} << m); ++bits) {
            std::vector<char> z(static_cast<size_t>(m));
            int k = 0;
            for (int j = 0; j < m; ++j) k += z[static_cast<size_t>(j)] = (bits >> j) & 1;
            coalitions.push_back(std::move(z));
            weights.push_back(detail::shapley_kernel(m, k));
        }
        std::vector<std::vector<char>> masks;
        std::vector<const GrayImage*> bgs;
        for (const auto& z : coalitions)
            for (const auto* b : all_bg) {
                masks.push_back(z);
                bgs.push_back(b);
            }
        // scale so the damping is relative to a unit-weight design, as in sampled mode
        const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (auto& w : weights) w *= static_cast<double>(weights.size()) / wsum;
        auto s = detail::score_all(f, x, grid, masks, bgs);
        const size_t nb = all_bg.size();
        for (size_t i = 0; i < coalitions.size(); ++i) {
            double v = 0;
            for (size_t b = 0; b < nb; ++b) v += s[i * nb + b];
            values.push_back(v / static_cast<double>(nb));
        }
    } else {
        Rng rng(derive_seed(cfg.seed, {hash_label("kernel_shap")}));
        std::vector<double> size_cdf;
        double total = 0;
        for (int k = 1; k < m; ++k) size_cdf.push_back(total += (m - 1.0) / (k * (m - k)));
        std::vector<const GrayImage*> bgs;
        const int wanted = cfg.n_masks - 2;
        while (static_cast<int>(coalitions.size()) < wanted) {
            const double u = rng.uniform() * total;
            const int k = 1 + static_cast<int>(std::lower_bound(size_cdf.begin(), size_cdf.end(), u) - size_cdf.begin());
            std::vector<char> z(static_cast<size_t>(m), 0);
            for (auto j : rng.sample_without_replacement(static_cast<size_t>(m), static_cast<size_t>(std::min(k, m - 1))))
                z[j] = 1;
            std::vector<char> comp(z.size());
            for (size_t j = 0; j < z.size(); ++j) comp[j] = !z[j];
            coalitions.push_back(std::move(z));
            bgs.push_back(all_bg[rng.below(all_bg.size())]);
            if (static_cast<int>(coalitions.size()) < wanted) {
                coalitions.push_back(std::move(comp));
                bgs.push_back(all_bg[rng.below(all_bg.size())]);
            }
        }
        weights.assign(coalitions.size(), 1.0);
        values = detail::score_all(f, x, grid, coalitions, bgs);
    }

    // y - z_m*delta = sum_{j<m} (z_j - z_m) phi_j
    const int p = m - 1;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd row(p);
    for (size_t i = 0; i < coalitions.size(); ++i) {
        const auto& z = coalitions[i];
        const double zm = z[static_cast<size_t>(p)];
        for (int j = 0; j < p; ++j) row(j) = z[static_cast<size_t>(j)] - zm;
        const double y = values[i] - res.baseline - zm * delta;
        A.selfadjointView<Eigen::Lower>().rankUpdate(row, weights[i]);
        rhs += weights[i] * y * row;
    }
    A = A.selfadjointView<Eigen::Lower>();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(A, Eigen::EigenvaluesOnly);
    const double emax = eig.eigenvalues().maxCoeff(), emin = eig.eigenvalues().minCoeff();
    if (!(emax > 0) || emin < 1e-10 * emax)
        throw Error(ErrorCode::numerical_error,
                    "singular KernelSHAP regression: increase n_masks (currently " + std::to_string(cfg.n_masks) + ")",
                    "n_masks");
    A.diagonal().array() += cfg.damping;
    const Eigen::VectorXd phi = A.ldlt().solve(rhs);
    res.values.assign(phi.data(), phi.data() + p);
    res.values.push_back(delta - phi.sum());
    return res;
}

inline AttributionMap kernel_shap(const DetectorModel& model, const GrayImage& x, int target_class,
                                  const SuperpixelGrid& grid, const std::vector<GrayImage>& backgrounds,
                                  const ShapConfig& cfg, std::string sample_id = {}) {
    return kernel_shap(detector_score(model, target_class), x, target_class, grid, backgrounds, cfg,
                       std::move(sample_id));
}

// Mask-average estimator: mean output with a superpixel kept minus mean
// output with it replaced, over uniformly random masks.
inline AttributionMap mask_average(const ScoreFn& f, const GrayImage& x, int target_class, const SuperpixelGrid& grid,
                                   const std::vector<GrayImage>& backgrounds, const ShapConfig& cfg,
                                   std::string sample_id = {}) {
    const int m = grid.size();
    if (backgrounds.empty()) throw Error(ErrorCode::invalid_argument, "background set is empty", "backgrounds");
    if (cfg.n_masks < 2) throw Error(ErrorCode::invalid_argument, "n_masks must be >= 2", "n_masks");
    AttributionMap res;
    res.sample_id = std::move(sample_id);
    res.target_class = target_class;
    res.grid = grid;
    res.n_masks = cfg.n_masks;
    res.seed = cfg.seed;
    Rng rng(derive_seed(cfg.seed, {hash_label("mask_average")}));
    std::vector<std::vector<char>> masks;
    std::vector<const GrayImage*> bgs;
    for (int i = 0; i < cfg.n_masks; ++i) {
        std::vector<char> z(static_cast<size_t>(m));
        for (auto& b : z) b = rng.uniform() < 0.5;
        masks.push_back(std::move(z));
        bgs.push_back(&backgrounds[rng.below(backgrounds.size())]);
    }
    const auto v = detail::score_all(f, x, grid, masks, bgs);
    res.fx = f({x}).at(0);
    std::vector<const GrayImage*> all_bg;
    for (const auto& b : backgrounds) all_bg.push_back(&b);
    const auto base = detail::score_all(f, x, grid,
                                        std::vector<std::vector<char>>(backgrounds.size(), std::vector<char>(static_cast<size_t>(m), 0)), all_bg);
    for (double b : base) res.baseline += b / static_cast<double>(base.size());
    for (int j = 0; j < m; ++j) {
        double on = 0, off = 0;
        int n_on = 0, n_off = 0;
        for (size_t i = 0; i < masks.size(); ++i) {
            if (masks[i][static_cast<size_t>(j)]) {
                on += v[i];
                ++n_on;
            } else {
                off += v[i];
                ++n_off;
            }
        }
        res.values.push_back((n_on ? on / n_on : 0.0) - (n_off ? off / n_off : 0.0));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregatedSaliencyMap {
    int height = 0, width = 0;
    std::vector<double> counts;
    int n = 0;
    double theta_contrib = 0.4;

    double& at(int r, int c) { return counts[static_cast<size_t>(r) * width + c]; }
    double at(int r, int c) const { return counts[static_cast<size_t>(r) * width + c]; }
    double max() const { return counts.empty() ? 0.0 : *std::max_element(counts.begin(), counts.end()); }
    bool operator==(const AggregatedSaliencyMap&) const = default;
};

namespace detail {

inline void check_theta(double theta, const char* field) {
    if (!(theta > 0 && theta < 1)) throw Error(ErrorCode::invalid_argument, std::string(field) + " must be in (0,1)", field);
}

// Cells above theta * (largest positive value); none when no value is positive.
inline std::vector<char> above_threshold(const AttributionMap& m, double theta) {
    double mx = 0;
    for (double v : m.values) mx = std::max(mx, v);
    std::vector<char> hot(m.values.size(), 0);
    if (mx <= 0) return hot;
    for (size_t i = 0; i < m.values.size(); ++i) hot[i] = m.values[i] > theta * mx;
    return hot;
}

}  // namespace detail

// Per-pixel counts in image coordinates.
inline AggregatedSaliencyMap aggregate(const std::vector<AttributionMap>& maps, int height, int width,
                                       double theta_contrib = 0.4) {
    detail::check_theta(theta_contrib, "theta_contrib");
    if (maps.empty()) throw Error(ErrorCode::invalid_argument, "no attribution maps to aggregate", "maps");
    AggregatedSaliencyMap agg{height, width, std::vector<double>(static_cast<size_t>(height) * width, 0.0),
                              static_cast<int>(maps.size()), theta_contrib};
    for (const auto& m : maps) {
        if (m.target_class != maps.front().target_class)
            throw Error(ErrorCode::invalid_argument, "maps must share the target class", "maps");
        const auto hot = detail::above_threshold(m, theta_contrib);
        for (int i = 0; i < m.grid.size(); ++i) {
            if (!hot[static_cast<size_t>(i)]) continue;
            const PixelRect c = m.grid.cell(i);
            for (int r = std::max(c.y, 0); r < std::min(c.y + c.h, height); ++r)
                for (int x = std::max(c.x, 0); x < std::min(c.x + c.w, width); ++x) agg.at(r, x) += 1;
        }
    }
    return agg;
}

// Counts on a bbox-normalized rows x cols grid: each normalized cell reads
// the superpixel under its centre, so maps over differently sized boxes align.
inline AggregatedSaliencyMap aggregate_normalized(const std::vector<AttributionMap>& maps, int rows = 32, int cols = 64,
                                                  double theta_contrib = 0.4) {
    detail::check_theta(theta_contrib, "theta_contrib");
    if (maps.empty()) throw Error(ErrorCode::invalid_argument, "no attribution maps to aggregate", "maps");
    AggregatedSaliencyMap agg{rows, cols, std::vector<double>(static_cast<size_t>(rows) * cols, 0.0),
                              static_cast<int>(maps.size()), theta_contrib};
    for (const auto& m : maps) {
        if (m.target_class != maps.front().target_class)
            throw Error(ErrorCode::invalid_argument, "maps must share the target class", "maps");
        const auto hot = detail::above_threshold(m, theta_contrib);
        const auto& b = m.grid.bbox;
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const int py = b.y + static_cast<int>((r + 0.5) * b.h / rows);
                const int px = b.x + static_cast<int>((c + 0.5) * b.w / cols);
                const int cell = m.grid.cell_of(py, px);
                if (cell >= 0 && hot[static_cast<size_t>(cell)]) agg.at(r, c) += 1;
            }
    }
    return agg;
}

constexpr std::uint8_t kMaskColor[3] = {128, 0, 128};

// Pixels with count < theta_mask * max are painted; an all-zero map is fully masked.
inline RgbImage overlay_mask(const AggregatedSaliencyMap& agg, double theta_mask, const GrayImage& image) {
    detail::check_theta(theta_mask, "theta_mask");
    require(image.height == agg.height && image.width == agg.width, "representative image must match the map", "image");
    const double mx = agg.max();
    RgbImage out(agg.height, agg.width);
    for (int r = 0; r < agg.height; ++r)
        for (int c = 0; c < agg.width; ++c) {
            const bool visible = mx > 0 && agg.at(r, c) >= theta_mask * mx;
            if (visible) {
                const auto v = image(r, c);
                out.set(r, c, v, v, v);
            } else {
                out.set(r, c, kMaskColor[0], kMaskColor[1], kMaskColor[2]);
            }
        }
    return out;
}

// Nearest-neighbour upscaling for viewing small normalized maps.
inline AggregatedSaliencyMap upscale(const AggregatedSaliencyMap& a, int factor) {
    require(factor >= 1, "upscale factor must be >= 1", "factor");
    AggregatedSaliencyMap out{a.height * factor, a.width * factor, {}, a.n, a.theta_contrib};
    out.counts.resize(static_cast<size_t>(out.height) * out.width);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c) out.at(r, c) = a.at(r / factor, c / factor);
    return out;
}

inline GrayImage heatmap_image(const AggregatedSaliencyMap& a) {
    GrayImage img(a.height, a.width);
    const double mx = a.max();
    for (int r = 0; r < a.height; ++r)
        for (int c = 0; c < a.width; ++c)
            img(r, c) = mx > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * a.at(r, c) / mx)) : 0;
    return img;
}

// ---------------------------------------------------------------------------
// Correlation

struct MapCorrelation {
    double zero_shift = 0;
    double max = 0;
    int best_dy = 0, best_dx = 0;
};

namespace detail {

inline double pearson_shifted(const AggregatedSaliencyMap& a, const AggregatedSaliencyMap& b, int dy, int dx) {
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    long n = 0;
    for (int r = std::max(0, -dy); r < std::min(a.height, a.height - dy); ++r)
        for (int c = std::max(0, -dx); c < std::min(a.width, a.width - dx); ++c) {
            const double x = a.at(r, c), y = b.at(r + dy, c + dx);
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
            ++n;
        }
    if (n == 0) return 0.0;
    const double cov = sab - sa * sb / n, va = saa - sa * sa / n, vb = sbb - sb * sb / n;
    if (va <= 1e-12 * std::max(1.0, saa) || vb <= 1e-12 * std::max(1.0, sbb)) return 0.0;
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

}  // namespace detail

// Pearson correlation of two maps on the same grid, at zero shift and
// maximized over integer shifts of up to `radius` cells per axis.
inline MapCorrelation correlate_maps(const AggregatedSaliencyMap& a, const AggregatedSaliencyMap& b, int radius = 4) {
    require(a.height == b.height && a.width == b.width, "maps must share the normalized grid", "maps");
    require(radius >= 0, "shift radius must be >= 0", "radius");
    MapCorrelation res;
    res.zero_shift = res.max = detail::pearson_shifted(a, b, 0, 0);
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            const double v = detail::pearson_shifted(a, b, dy, dx);
            if (v > res.max) {
                res.max = v;
                res.best_dy = dy;
                res.best_dx = dx;
            }
        }
    return res;
}

// Percentage of positive attribution mass inside each sample's box (cells
// straddling the box split by pixel overlap), averaged over samples.
inline double bbox_focus(const std::vector<AttributionMap>& maps, const std::vector<PixelRect>& boxes) {
    require(maps.size() == boxes.size(), "one ground-truth box per map", "boxes");
    if (maps.empty()) return 0.0;
    double total = 0;
    for (size_t s = 0; s < maps.size(); ++s) {
        const auto& m = maps[s];
        const auto& b = boxes[s];
        double in = 0, all = 0;
        for (int i = 0; i < m.grid.size(); ++i) {
            const double v = m.values[static_cast<size_t>(i)];
            if (v <= 0) continue;
            const PixelRect c = m.grid.cell(i);
            const int ox = std::max(0, std::min(c.x + c.w, b.x + b.w) - std::max(c.x, b.x));
            const int oy = std::max(0, std::min(c.y + c.h, b.y + b.h) - std::max(c.y, b.y));
            all += v;
            in += v * (static_cast<double>(ox) * oy) / c.area();
        }
        total += all > 0 ? in / all : 0.0;
    }
    return 100.0 * total / static_cast<double>(maps.size());
}

// ---------------------------------------------------------------------------
// Persistence: raw little-endian doubles plus a text sidecar.

inline void write_doubles(const std::filesystem::path& path, const std::vector<double>& v) {
    text::write_file(path.string(),
                     std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(const std::filesystem::path& path, size_t expected) {
    const std::string bytes = text::read_file(path.string());
    if (bytes.size() != expected * sizeof(double))
        throw Error(ErrorCode::parse_error, "grid file " + path.string() + " has the wrong size", "grid");
    std::vector<double> v(expected);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

inline void save_attribution(const AttributionMap& m, const std::filesystem::path& stem) {
    std::filesystem::create_directories(stem.parent_path());
    write_doubles(stem.string() + ".bin", m.values);
    std::ostringstream os;
    os << "sample " << (m.sample_id.empty() ? "-" : m.sample_id) << "\nclass " << m.target_class << "\nbbox "
       << m.grid.bbox.x << " " << m.grid.bbox.y << " " << m.grid.bbox.w << " " << m.grid.bbox.h << "\ngrid "
       << m.grid.rows << " " << m.grid.cols << "\nbaseline " << text::fmt9(m.baseline) << "\nfx " << text::fmt9(m.fx)
       << "\nexact " << m.exact << "\nn_masks " << m.n_masks << "\nseed " << m.seed << "\n";
    text::write_file(stem.string() + ".txt", os.str());
}

inline void save_aggregate(const AggregatedSaliencyMap& a, const std::filesystem::path& stem,
                           const std::string& note = {}) {
    std::filesystem::create_directories(stem.parent_path());
    write_doubles(stem.string() + ".bin", a.counts);
    std::ostringstream os;
    os << "dims " << a.height << " " << a.width << "\nn " << a.n << "\ntheta_contrib " << text::fmt9(a.theta_contrib)
       << "\n";
    if (!note.empty()) os << note << "\n";
    text::write_file(stem.string() + ".txt", os.str());
}

inline AggregatedSaliencyMap load_aggregate(const std::filesystem::path& stem) {
    AggregatedSaliencyMap a;
    for (const auto& line : text::lines(text::read_file(stem.string() + ".txt"))) {
        const auto tok = text::split_ws(line);
        if (tok.size() == 3 && tok[0] == "dims") {
            a.height = std::stoi(tok[1]);
            a.width = std::stoi(tok[2]);
        } else if (tok.size() == 2 && tok[0] == "n") {
            a.n = std::stoi(tok[1]);
        } else if (tok.size() == 2 && tok[0] == "theta_contrib") {
            text::parse_double(tok[1], a.theta_contrib);
        }
    }
    if (a.height <= 0 || a.width <= 0) throw Error(ErrorCode::parse_error, "aggregate sidecar lacks dims", "dims");
    a.counts = read_doubles(stem.string() + ".bin", static_cast<size_t>(a.height) * a.width);
    return a;
}

}  // namespace synthloop
