#pragma once
// Decision aids over evaluation outputs: seed-averaged confusion, target
// selection, orientation-binned fractions, common/unique feature
// suggestions, PCA leakage, and ratio/size sweeps.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/image.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/dataset.hpp"
#include "synthloop/detector.hpp"
#include "synthloop/metrics.hpp"
#include "synthloop/xai.hpp"

namespace synthloop {

inline ConfusionMatrix average_confusion(const std::vector<ConfusionMatrix>& ms) {
    if (ms.empty()) throw Error(ErrorCode::invalid_argument, "no confusion matrices to average", "matrices");
    ConfusionMatrix out(ms.front().size);
    for (const auto& m : ms) {
        if (m.size != out.size)
            throw Error(ErrorCode::invalid_argument, "confusion matrices differ in dimension", "matrices");
        for (size_t i = 0; i < out.cells.size(); ++i) out.cells[i] += m.cells[i];
    }
    for (auto& c : out.cells) c /= static_cast<double>(ms.size());
    return out;
}

struct TargetMisclassification {
    int class_a = 0;  // ground truth
    int class_b = 0;  // prediction
    double count = 0;
    int rank = 0;  // 0 = largest
    bool operator==(const TargetMisclassification&) const = default;
};

// Off-diagonal vehicle-pair cells with positive count, largest first; ties
// by (row, column) ascending.
inline std::vector<TargetMisclassification> rank_confusions(const ConfusionMatrix& m) {
    require(m.size >= 3, "confusion needs >= 2 vehicle classes", "confusion");
    std::vector<TargetMisclassification> out;
    const int bg = m.background();
    for (int r = 0; r < bg; ++r)
        for (int c = 0; c < bg; ++c)
            if (r != c && m(r, c) > 0) out.push_back({r, c, m(r, c), 0});
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
    for (size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i);
    return out;
}

// Empty when every off-diagonal vehicle cell is zero.
inline std::optional<TargetMisclassification> select_target(const ConfusionMatrix& m) {
    auto ranked = rank_confusions(m);
    if (ranked.empty()) return std::nullopt;
    return ranked.front();
}

// ---------------------------------------------------------------------------
// Orientation bins

struct PredictionRecord {
    int truth = kBackground;  // 0..C-1, or kBackground
    int predicted = 0;        // confusion-matrix column
    double orientation = 0;
};

struct OrientationBin {
    double lo = 0, hi = 0;
    int correct = 0;        // C: A predicted as A
    int misclassified = 0;  // M: A predicted as B
    int other = 0;          // A predicted as anything else (incl. background)
    std::optional<double> fraction() const {
        if (correct + misclassified == 0) return std::nullopt;
        return static_cast<double>(misclassified) / (correct + misclassified);
    }
};

struct OrientationBinReport {
    int class_a = 0, class_b = 0;
    double bin_width = 5;
    std::vector<OrientationBin> bins;  // tiles [0,360)

    int bin_index(double orientation) const {
        const double o = normalize_degrees(orientation);
        return std::min(static_cast<int>(std::floor(o / bin_width)), static_cast<int>(bins.size()) - 1);
    }
};

inline OrientationBinReport orientation_fractions(const std::vector<PredictionRecord>& preds, int class_a, int class_b,
                                                  double bin_width = 5.0) {
    if (!(bin_width > 0 && bin_width <= 360)) throw Error(ErrorCode::invalid_argument, "bin width must be in (0,360]", "bin_width");
    if (class_a == class_b) throw Error(ErrorCode::invalid_argument, "pair must name two classes", "pair");
    OrientationBinReport rep{class_a, class_b, bin_width, {}};
    const int n = static_cast<int>(std::ceil(360.0 / bin_width - 1e-9));
    for (int k = 0; k < n; ++k) rep.bins.push_back({k * bin_width, std::min(360.0, (k + 1) * bin_width), 0, 0, 0});
    for (const auto& p : preds) {
        if (p.truth != class_a) continue;
        auto& b = rep.bins[static_cast<size_t>(rep.bin_index(p.orientation))];
        if (p.predicted == class_a)
            ++b.correct;
        else if (p.predicted == class_b)
            ++b.misclassified;
        else
            ++b.other;
    }
    return rep;
}

inline std::string serialize_bins(const OrientationBinReport& r, const std::vector<std::string>& classes) {
    std::ostringstream os;
    os << "# pair " << classes.at(static_cast<size_t>(r.class_a)) << " " << classes.at(static_cast<size_t>(r.class_b))
       << " width " << text::fmt9(r.bin_width) << "\n# lo hi correct misclassified other fraction\n";
    for (const auto& b : r.bins) {
        if (b.correct + b.misclassified + b.other == 0) continue;
        const auto f = b.fraction();
        os << text::fmt9(b.lo) << " " << text::fmt9(b.hi) << " " << b.correct << " " << b.misclassified << " " << b.other
           << " " << (f ? text::fmt9(*f) : "-") << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Feature suggestions on the bbox-normalized grid

enum class FeatureKind { common, unique };
inline const char* to_string(FeatureKind k) { return k == FeatureKind::common ? "common" : "unique"; }

struct FeatureEvidence {
    double saliency = 0;     // summed normalized counts over the region
    double correlation = 0;  // max-shift correlation of the compared maps
    double similarity = 0;   // NCC of the mean image patches around the region
};

struct FeatureSuggestion {
    FeatureKind kind = FeatureKind::common;
    int owning_class = 0;
    double bin_lo = 0;          // orientation bin of the A maps
    std::vector<int> cells;     // row * cols + col on the normalized grid, ascending
    int rows = 0, cols = 0;
    FeatureEvidence evidence;

    PixelRect extent() const {
        int r0 = rows, r1 = -1, c0 = cols, c1 = -1;
        for (int i : cells) {
            r0 = std::min(r0, i / cols);
            r1 = std::max(r1, i / cols);
            c0 = std::min(c0, i % cols);
            c1 = std::max(c1, i % cols);
        }
        return {c0, r0, c1 - c0 + 1, r1 - r0 + 1};
    }
};

struct SuggestConfig {
    double high = 0.5;
    double low = 0.2;
    double tau_sim = 0.6;
    int similarity_margin = 2;  // cells added around a region for the NCC
};

// Mean image patch of a sample set on the normalized grid (row-major).
struct Patch {
    int rows = 0, cols = 0;
    std::vector<double> v;
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
};

namespace detail {

inline std::vector<std::vector<int>> regions_4(const std::vector<char>& mask, int rows, int cols) {
    std::vector<std::vector<int>> out;
    std::vector<char> seen(mask.size(), 0);
    for (int start = 0; start < rows * cols; ++start) {
        if (!mask[static_cast<size_t>(start)] || seen[static_cast<size_t>(start)]) continue;
        std::vector<int> region;
        std::queue<int> q;
        q.push(start);
        seen[static_cast<size_t>(start)] = 1;
        while (!q.empty()) {
            const int i = q.front();
            q.pop();
            region.push_back(i);
            const int r = i / cols, c = i % cols;
            const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
            for (const auto& n : nb) {
                if (n[0] < 0 || n[0] >= rows || n[1] < 0 || n[1] >= cols) continue;
                const int j = n[0] * cols + n[1];
                if (mask[static_cast<size_t>(j)] && !seen[static_cast<size_t>(j)]) {
                    seen[static_cast<size_t>(j)] = 1;
                    q.push(j);
                }
            }
        }
        std::sort(region.begin(), region.end());
        out.push_back(std::move(region));
    }
    return out;
}

inline double ncc_region(const Patch& a, const Patch& b, const std::vector<int>& cells, int margin) {
    std::set<int> use;
    for (int i : cells) {
        const int r = i / a.cols, c = i % a.cols;
        for (int dr = -margin; dr <= margin; ++dr)
            for (int dc = -margin; dc <= margin; ++dc) {
                const int rr = r + dr, cc = c + dc;
                if (rr >= 0 && rr < a.rows && cc >= 0 && cc < a.cols) use.insert(rr * a.cols + cc);
            }
    }
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    const double n = static_cast<double>(use.size());
    for (int i : use) {
        const double x = a.v[static_cast<size_t>(i)], y = b.v[static_cast<size_t>(i)];
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
    if (va <= 1e-12 || vb <= 1e-12) return 0.0;
    return (sab - sa * sb / n) / std::sqrt(va * vb);
}

}  // namespace detail

// COMMON cells: high in A-as-B and in B-correct, with similar image content
// around the region. UNIQUE cells: high in A-correct and low in A-as-B.
// "high" = count >= high * map max, "low" = count <= low * map max.
inline std::vector<FeatureSuggestion> suggest_features(const AggregatedSaliencyMap& a_correct,
                                                       const AggregatedSaliencyMap& b_correct,
                                                       const AggregatedSaliencyMap& a_as_b, const Patch& patch_a,
                                                       const Patch& patch_b, int class_a, int class_b,
                                                       double bin_lo = 0, const SuggestConfig& cfg = {}) {
    const int rows = a_as_b.height, cols = a_as_b.width;
    for (const auto* m : {&a_correct, &b_correct})
        require(m->height == rows && m->width == cols, "maps must share the normalized grid", "maps");
    require(patch_a.rows == rows && patch_a.cols == cols && patch_b.rows == rows && patch_b.cols == cols,
            "patches must share the normalized grid", "patches");
    const size_t n = static_cast<size_t>(rows) * cols;
    const double max_ab = a_as_b.max(), max_b = b_correct.max(), max_a = a_correct.max();
    auto norm = [](const AggregatedSaliencyMap& m, double mx, size_t i) { return mx > 0 ? m.counts[i] / mx : 0.0; };
    std::vector<FeatureSuggestion> out;

    std::vector<char> common(n, 0), unique(n, 0);
    for (size_t i = 0; i < n; ++i) {
        common[i] = max_ab > 0 && max_b > 0 && a_as_b.counts[i] >= cfg.high * max_ab && b_correct.counts[i] >= cfg.high * max_b;
        unique[i] = max_a > 0 && a_correct.counts[i] >= cfg.high * max_a && a_as_b.counts[i] <= cfg.low * max_ab;
    }
    const double corr_common = correlate_maps(a_as_b, b_correct).max;
    const double corr_unique = correlate_maps(a_correct, a_as_b).max;

    std::vector<FeatureSuggestion> commons, uniques;
    for (auto& region : detail::regions_4(common, rows, cols)) {
        FeatureSuggestion s{FeatureKind::common, class_b, bin_lo, region, rows, cols, {}};
        for (int i : region)
            s.evidence.saliency += std::min(norm(a_as_b, max_ab, static_cast<size_t>(i)), norm(b_correct, max_b, static_cast<size_t>(i)));
        s.evidence.correlation = corr_common;
        s.evidence.similarity = detail::ncc_region(patch_a, patch_b, region, cfg.similarity_margin);
        if (s.evidence.similarity > cfg.tau_sim) commons.push_back(std::move(s));
    }
    for (auto& region : detail::regions_4(unique, rows, cols)) {
        FeatureSuggestion s{FeatureKind::unique, class_a, bin_lo, region, rows, cols, {}};
        for (int i : region) s.evidence.saliency += norm(a_correct, max_a, static_cast<size_t>(i));
        s.evidence.correlation = corr_unique;
        s.evidence.similarity = detail::ncc_region(patch_a, patch_b, region, cfg.similarity_margin);
        uniques.push_back(std::move(s));
    }
    auto by_evidence = [](const FeatureSuggestion& x, const FeatureSuggestion& y) {
        return x.evidence.saliency > y.evidence.saliency;
    };
    std::stable_sort(commons.begin(), commons.end(), by_evidence);
    std::stable_sort(uniques.begin(), uniques.end(), by_evidence);
    out.insert(out.end(), commons.begin(), commons.end());
    out.insert(out.end(), uniques.begin(), uniques.end());
    return out;
}

// ---------------------------------------------------------------------------
// Patches and PCA leakage

// Bilinear resampling of the box content to rows x cols, values in [0,1].
inline Patch bbox_patch(const GrayImage& img, const Box& b, int rows = 32, int cols = 64) {
    require(!b.degenerate(), "bbox is degenerate", "bbox");
    Patch p{rows, cols, std::vector<double>(static_cast<size_t>(rows) * cols)};
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double y = b.y + (r + 0.5) * b.h / rows - 0.5, x = b.x + (c + 0.5) * b.w / cols - 0.5;
            const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
            const double fy = y - y0, fx = x - x0;
            const double v = (1 - fy) * ((1 - fx) * img.at_clamped(y0, x0) + fx * img.at_clamped(y0, x0 + 1)) +
                             fy * ((1 - fx) * img.at_clamped(y0 + 1, x0) + fx * img.at_clamped(y0 + 1, x0 + 1));
            p.v[static_cast<size_t>(r) * cols + c] = v / 255.0;
        }
    return p;
}

inline Patch mean_patch(const std::vector<Patch>& ps, int rows = 32, int cols = 64) {
    Patch m{rows, cols, std::vector<double>(static_cast<size_t>(rows) * cols, 0.0)};
    for (const auto& p : ps)
        for (size_t i = 0; i < m.v.size(); ++i) m.v[i] += p.v[i] / static_cast<double>(ps.size());
    return m;
}

struct PcaPoint {
    double x = 0, y = 0;
    int label = 0;
    bool test = false;
};

struct PcaResult {
    std::vector<PcaPoint> points;  // train first, then test
    double overlap = 0;
    double radius = 0;
};

// Top-2 principal components of the mean-centred combined set. Overlap =
// fraction of test points whose nearest train point shares the class and
// lies within 0.1 * the median pairwise distance.
inline PcaResult pca_leakage(const std::vector<Patch>& train, const std::vector<int>& train_labels,
                             const std::vector<Patch>& test, const std::vector<int>& test_labels) {
    require(train.size() == train_labels.size() && test.size() == test_labels.size(), "one label per patch", "labels");
    const size_t n = train.size() + test.size();
    if (n < 3 || train.empty() || test.empty())
        throw Error(ErrorCode::insufficient_samples, "pca_leakage needs >= 3 samples with both splits present", "samples");
    const size_t d = train.front().v.size();
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (size_t i = 0; i < n; ++i) {
        const auto& p = i < train.size() ? train[i] : test[i - train.size()];
        require(p.v.size() == d, "patches must share dimensions", "patches");
        X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(p.v.data(), static_cast<Eigen::Index>(d));
    }
    X.rowwise() -= X.colwise().mean();
    Eigen::MatrixXd coords(static_cast<Eigen::Index>(n), 2);
    if (n <= d) {
        // Gram route: eigenvectors of X X^T scaled by sqrt(eigenvalue) are the PC scores
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose());
        const auto k = es.eigenvalues().size();
        for (int j = 0; j < 2; ++j)
            coords.col(j) = es.eigenvectors().col(k - 1 - j) * std::sqrt(std::max(0.0, es.eigenvalues()(k - 1 - j)));
    } else {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X);
        const auto k = es.eigenvalues().size();
        for (int j = 0; j < 2; ++j) coords.col(j) = X * es.eigenvectors().col(k - 1 - j);
    }
    // sign convention: the largest-magnitude score of each component is positive
    for (int j = 0; j < 2; ++j) {
        Eigen::Index arg;
        coords.col(j).cwiseAbs().maxCoeff(&arg);
        if (coords(arg, j) < 0) coords.col(j) *= -1;
    }
    PcaResult res;
    for (size_t i = 0; i < n; ++i) {
        const bool is_test = i >= train.size();
        res.points.push_back({coords(static_cast<Eigen::Index>(i), 0), coords(static_cast<Eigen::Index>(i), 1),
                              is_test ? test_labels[i - train.size()] : train_labels[i], is_test});
    }
    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j)
            dists.push_back(std::hypot(res.points[i].x - res.points[j].x, res.points[i].y - res.points[j].y));
    std::nth_element(dists.begin(), dists.begin() + static_cast<long>(dists.size() / 2), dists.end());
    res.radius = 0.1 * dists[dists.size() / 2];
    size_t hits = 0;
    for (size_t t = train.size(); t < n; ++t) {
        double best = std::numeric_limits<double>::infinity();
        int best_label = -1;
        for (size_t i = 0; i < train.size(); ++i) {
            const double dd = std::hypot(res.points[t].x - res.points[i].x, res.points[t].y - res.points[i].y);
            if (dd < best) {
                best = dd;
                best_label = res.points[i].label;
            }
        }
        hits += best_label == res.points[t].label && best <= res.radius;
    }
    res.overlap = static_cast<double>(hits) / static_cast<double>(test.size());
    return res;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepRow {
    double parameter = 0;  // ratio or total size
    std::vector<double> map50;  // per seed
    double mean() const {
        double s = 0;
        for (double v : map50) s += v;
        return map50.empty() ? 0.0 : s / static_cast<double>(map50.size());
    }
};

// Pooled detector inputs addressed by absolute sample path, so repeated
// mixes do not re-read images.
class PooledStore {
public:
    void add(const DatasetManifest& m) {
        for (const auto& r : m.records) {
            const auto key = std::filesystem::absolute(m.resolve(r)).lexically_normal().string();
            if (!index_.count(key)) {
                index_[key] = columns_.size();
                columns_.push_back(pool_input(png::read_gray(key)));
            }
        }
    }
    MatrixXd matrix(const DatasetManifest& m) {
        add(m);
        MatrixXd x(arch::kIn, static_cast<Eigen::Index>(m.records.size()));
        for (size_t i = 0; i < m.records.size(); ++i)
            x.col(static_cast<Eigen::Index>(i)) =
                columns_[index_.at(std::filesystem::absolute(m.resolve(m.records[i])).lexically_normal().string())];
        return x;
    }

private:
    std::map<std::string, size_t> index_;
    std::vector<VectorXd> columns_;
};

struct SweepInputs {
    const DatasetManifest* real = nullptr;
    const DatasetManifest* synthetic = nullptr;
    const DatasetManifest* test = nullptr;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4};
    TrainConfig train;
};

// One mix -> train -> evaluate run per seed. The mix draw depends on the seed
// so seeds differ in both data selection and initialization.
inline SweepRow sweep_point(const SweepInputs& in, double ratio, size_t total, PooledStore& store,
                            std::vector<ConfusionMatrix>* confusions = nullptr) {
    require(in.real && in.synthetic && in.test, "sweep needs real, synthetic and test manifests", "manifests");
    SweepRow row;
    const MatrixXd xt = store.matrix(*in.test);
    for (auto seed : in.seeds) {
        const auto m = mix(*in.real, *in.synthetic, ratio, total, derive_seed(seed, {hash_label("mix")}));
        TrainingData data{store.matrix(m), make_targets(m), static_cast<int>(m.classes.size())};
        const auto trained = train(data, in.train, seed);
        const auto ev = evaluate(trained.model, *in.test, xt);
        row.map50.push_back(ev.map50);
        if (confusions) confusions->push_back(ev.confusion);
    }
    return row;
}

inline std::vector<SweepRow> ratio_sweep(const SweepInputs& in, const std::vector<double>& ratios, size_t total) {
    PooledStore store;
    std::vector<SweepRow> out;
    for (double r : ratios) {
        auto row = sweep_point(in, r, total, store);
        row.parameter = r;
        out.push_back(std::move(row));
    }
    return out;
}

inline std::vector<SweepRow> size_sweep(const SweepInputs& in, const std::vector<size_t>& sizes, double ratio = 0.5) {
    PooledStore store;
    std::vector<SweepRow> out;
    for (size_t n : sizes) {
        auto row = sweep_point(in, ratio, n, store);
        row.parameter = static_cast<double>(n);
        out.push_back(std::move(row));
    }
    return out;
}

// Reported, not asserted: whether means never decrease along the table.
inline bool non_decreasing(const std::vector<SweepRow>& rows) {
    for (size_t i = 1; i < rows.size(); ++i)
        if (rows[i].mean() < rows[i - 1].mean()) return false;
    return true;
}

inline std::string serialize_sweep(const std::vector<SweepRow>& rows, const std::string& parameter) {
    std::ostringstream os;
    os << "# " << parameter << " mean per_seed...\n";
    for (const auto& r : rows) {
        os << text::fmt9(r.parameter) << " " << text::fmt9(r.mean());
        for (double v : r.map50) os << " " << text::fmt9(v);
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// PNG renderings

inline RgbImage render_confusion(const ConfusionMatrix& m, int cell = 24) {
    RgbImage img(m.size * cell, m.size * cell);
    double mx = 0;
    for (double v : m.cells) mx = std::max(mx, v);
    for (int r = 0; r < m.size; ++r)
        for (int c = 0; c < m.size; ++c) {
            const auto v = static_cast<std::uint8_t>(mx > 0 ? std::lround(255.0 * m(r, c) / mx) : 0);
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x) {
                    const bool border = y == 0 || x == 0;
                    img.set(r * cell + y, c * cell + x, border ? 40 : v, border ? 40 : v / 2, border ? 40 : 255 - v);
                }
        }
    return img;
}

inline RgbImage render_scatter(const PcaResult& p, int size = 256) {
    RgbImage img(size, size);
    std::fill(img.data.begin(), img.data.end(), 255);
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    for (const auto& q : p.points) {
        x0 = std::min(x0, q.x);
        x1 = std::max(x1, q.x);
        y0 = std::min(y0, q.y);
        y1 = std::max(y1, q.y);
    }
    const double sx = x1 > x0 ? (size - 5) / (x1 - x0) : 1, sy = y1 > y0 ? (size - 5) / (y1 - y0) : 1;
    for (const auto& q : p.points) {
        const int cx = 2 + static_cast<int>((q.x - x0) * sx), cy = 2 + static_cast<int>((y1 - q.y) * sy);
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int y = std::clamp(cy + dy, 0, size - 1), x = std::clamp(cx + dx, 0, size - 1);
                if (q.test)
                    img.set(y, x, 220, 40, 40);
                else
                    img.set(y, x, 40, 90, 220);
            }
    }
    return img;
}

inline RgbImage render_fractions(const OrientationBinReport& r, int height = 100) {
    const int bar = 4;
    RgbImage img(height, static_cast<int>(r.bins.size()) * bar);
    std::fill(img.data.begin(), img.data.end(), 255);
    for (size_t k = 0; k < r.bins.size(); ++k) {
        const auto f = r.bins[k].fraction();
        if (!f) continue;
        const int h = static_cast<int>(std::lround(*f * (height - 1)));
        for (int y = height - 1 - h; y < height; ++y)
            for (int x = 0; x < bar - 1; ++x) img.set(y, static_cast<int>(k) * bar + x, 120, 40, 160);
    }
    return img;
}

}  // namespace synthloop
