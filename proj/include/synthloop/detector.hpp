#pragma once
// Tiny single-object detector: fixed 4x4 average pooling to 32x64, two
// conv3x3-ReLU-maxpool2 stages, then linear class and box heads.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "synthloop/core/allocator.hpp"
#include "synthloop/core/error.hpp"
#include "synthloop/core/image.hpp"
#include "synthloop/core/rng.hpp"
#include "synthloop/core/text.hpp"
#include "synthloop/dataset.hpp"

namespace synthloop {

namespace arch {
constexpr int kPool = 4;
constexpr int kInH = kSampleHeight / kPool;  // 32
constexpr int kInW = kSampleWidth / kPool;   // 64
constexpr int kIn = kInH * kInW;
constexpr int kC1 = 8;
constexpr int kC2 = 16;
constexpr int kH1 = kInH, kW1 = kInW;        // conv1 output (same padding)
constexpr int kH2 = kH1 / 2, kW2 = kW1 / 2;  // after pool1
constexpr int kH3 = kH2 / 2, kW3 = kW2 / 2;  // after pool2
constexpr int kSpatial = kC2 * kH3 * kW3;    // 2048
constexpr int kCells = kH3 * kW3;
constexpr int kFeatures = kSpatial + 2 * kC2;  // + per-channel global max + attention-pooled

inline std::string descriptor(int num_classes) {
    std::ostringstream os;
    os << "avgpool" << kPool << ":" << kInH << "x" << kInW << ";conv3x3:1-" << kC1 << ";relu;maxpool2;conv3x3:" << kC1
       << "-" << kC2 << ";relu;maxpool2;globalmax;softargmax:" << kC2 << ";fc:" << kFeatures << "-" << num_classes + 1 << ";fc:" << kFeatures << "-4";
    return os.str();
}
}  // namespace arch

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct DetectorModel {
    int num_classes = 0;  // vehicle classes; background is index num_classes
    std::uint64_t seed = 0;
    MatrixXd w1;  // kC1 x 9
    VectorXd b1;
    MatrixXd w2;  // kC2 x (kC1*9)
    VectorXd b2;
    MatrixXd wc;  // (C+1) x kFeatures
    VectorXd bc;
    MatrixXd wb;  // 4 x kFeatures
    VectorXd bb;
    VectorXd wl;  // kC2: attention logit per cell

    std::uint64_t arch_hash() const { return hash_label(arch::descriptor(num_classes)); }
    size_t parameter_count() const {
        return w1.size() + b1.size() + w2.size() + b2.size() + wc.size() + bc.size() + wb.size() + bb.size() +
               wl.size();
    }
    template <typename F>
    void for_each_tensor(F&& f) {
        f(w1.data(), w1.size());
        f(b1.data(), b1.size());
        f(w2.data(), w2.size());
        f(b2.data(), b2.size());
        f(wc.data(), wc.size());
        f(bc.data(), bc.size());
        f(wb.data(), wb.size());
        f(bb.data(), bb.size());
        f(wl.data(), wl.size());
    }
    bool operator==(const DetectorModel& o) const {
        return num_classes == o.num_classes && seed == o.seed && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 &&
               b2 == o.b2 && wc == o.wc && bc == o.bc && wb == o.wb && bb == o.bb && wl == o.wl;
    }
};

inline DetectorModel init_detector(int num_classes, std::uint64_t seed) {
    require(num_classes >= 1, "num_classes must be >= 1", "num_classes");
    DetectorModel m;
    m.num_classes = num_classes;
    m.seed = seed;
    Rng rng(derive_seed(seed, {hash_label("init")}));
    auto he = [&](int rows, int cols, int fan_in) {
        MatrixXd w(rows, cols);
        const double sd = std::sqrt(2.0 / fan_in);
        for (int j = 0; j < cols; ++j)
            for (int i = 0; i < rows; ++i) w(i, j) = rng.normal(0.0, sd);
        return w;
    };
    m.w1 = he(arch::kC1, 9, 9);
    m.b1 = VectorXd::Zero(arch::kC1);
    m.w2 = he(arch::kC2, arch::kC1 * 9, arch::kC1 * 9);
    m.b2 = VectorXd::Zero(arch::kC2);
    m.wc = MatrixXd::Zero(num_classes + 1, arch::kFeatures);
    m.bc = VectorXd::Zero(num_classes + 1);
    m.wb = MatrixXd::Zero(4, arch::kFeatures);
    m.bb = (VectorXd(4) << 0.0, 0.0, 0.3, 0.3).finished();
    m.wl = VectorXd::Zero(arch::kC2);
    return m;
}

// Scene radiance sits in a narrow band of gray levels; this affine map
// spreads it to roughly unit scale.
constexpr double kInputCenter = 0.2;
constexpr double kInputScale = 5.0;

// 4x4 average pooling and normalization; one column per image.
inline VectorXd pool_input(const GrayImage& img) {
    require(img.height == kSampleHeight && img.width == kSampleWidth, "image must be 128x256", "image");
    VectorXd x(arch::kIn);
    for (int r = 0; r < arch::kInH; ++r)
        for (int c = 0; c < arch::kInW; ++c) {
            int sum = 0;
            for (int i = 0; i < arch::kPool; ++i)
                for (int j = 0; j < arch::kPool; ++j) sum += img(r * arch::kPool + i, c * arch::kPool + j);
            x(r * arch::kInW + c) = (sum / (255.0 * arch::kPool * arch::kPool) - kInputCenter) * kInputScale;
        }
    return x;
}

inline MatrixXd pool_inputs(const std::vector<GrayImage>& images) {
    MatrixXd x(arch::kIn, static_cast<Eigen::Index>(images.size()));
    for (size_t i = 0; i < images.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = pool_input(images[i]);
    return x;
}

namespace detail {

// Activations are laid out channels x (batch * H * W), column = (b*H + y)*W + x.
// Patch rows are ordered (channel, ky, kx).
inline MatrixXd im2col(const MatrixXd& in, int channels, int batch, int h, int w) {
    const int rows = channels * 9;
    MatrixXd cols(rows, static_cast<Eigen::Index>(batch) * h * w);
    const double* src = in.data();
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index j = (static_cast<Eigen::Index>(b) * h + y) * w + x;
                double* dst = cols.data() + j * rows;
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = y + ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sx = x + kx - 1;
                        const int k = ky * 3 + kx;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                            for (int c = 0; c < channels; ++c) dst[c * 9 + k] = 0.0;
                        } else {
                            const double* s = src + ((static_cast<Eigen::Index>(b) * h + sy) * w + sx) * channels;
                            for (int c = 0; c < channels; ++c) dst[c * 9 + k] = s[c];
                        }
                    }
                }
            }
    return cols;
}

inline MatrixXd col2im(const MatrixXd& cols, int channels, int batch, int h, int w) {
    const int rows = channels * 9;
    MatrixXd out = MatrixXd::Zero(channels, static_cast<Eigen::Index>(batch) * h * w);
    double* dst = out.data();
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index j = (static_cast<Eigen::Index>(b) * h + y) * w + x;
                const double* src = cols.data() + j * rows;
                for (int ky = 0; ky < 3; ++ky) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sx = x + kx - 1;
                        if (sx < 0 || sx >= w) continue;
                        double* d = dst + ((static_cast<Eigen::Index>(b) * h + sy) * w + sx) * channels;
                        for (int c = 0; c < channels; ++c) d[c] += src[c * 9 + ky * 3 + kx];
                    }
                }
            }
    return out;
}

struct PoolResult {
    MatrixXd out;
    std::vector<Eigen::Index> argmax;  // source column per output element (row-major over out)
};

inline PoolResult maxpool2(const MatrixXd& in, int channels, int batch, int h, int w) {
    const int oh = h / 2, ow = w / 2;
    PoolResult r;
    r.out.resize(channels, static_cast<Eigen::Index>(batch) * oh * ow);
    r.argmax.resize(static_cast<size_t>(r.out.size()));
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const Eigen::Index oc = (static_cast<Eigen::Index>(b) * oh + y) * ow + x;
                const Eigen::Index s00 = (static_cast<Eigen::Index>(b) * h + 2 * y) * w + 2 * x;
                const Eigen::Index cand[4] = {s00, s00 + 1, s00 + w, s00 + w + 1};
                for (int c = 0; c < channels; ++c) {
                    Eigen::Index best = cand[0];
                    for (int k = 1; k < 4; ++k)
                        if (in(c, cand[k]) > in(c, best)) best = cand[k];
                    r.out(c, oc) = in(c, best);
                    r.argmax[static_cast<size_t>(oc * channels + c)] = best;
                }
            }
    return r;
}

inline MatrixXd maxpool2_backward(const MatrixXd& dout, const std::vector<Eigen::Index>& argmax, int channels,
                                  Eigen::Index in_cols) {
    MatrixXd din = MatrixXd::Zero(channels, in_cols);
    for (Eigen::Index oc = 0; oc < dout.cols(); ++oc)
        for (int c = 0; c < channels; ++c) din(c, argmax[static_cast<size_t>(oc * channels + c)]) += dout(c, oc);
    return din;
}

// channels x (batch*h*w) -> features x batch. Rows: spatial values at
// (c*h + y)*w + x, each channel's global max, then the channel vector pooled
// under a softmax attention over cells. The attention's expected cell
// centre (normalized) is the base of the predicted box centre.
struct FeatureResult {
    MatrixXd f;
    MatrixXd attn;                   // cells x batch
    MatrixXd centre;                 // 2 x batch
    std::vector<Eigen::Index> gmax;  // per (b, c): source cell
};

inline FeatureResult to_features(const MatrixXd& act, const VectorXd& wl, int channels, int batch, int h, int w) {
    const int hw = h * w;
    FeatureResult r;
    r.f.resize(channels * hw + 2 * channels, batch);
    r.attn.resize(hw, batch);
    r.centre.resize(2, batch);
    r.gmax.resize(static_cast<size_t>(batch) * channels);
    for (int b = 0; b < batch; ++b) {
        const auto blk = act.middleCols(static_cast<Eigen::Index>(b) * hw, hw);
        for (int c = 0; c < channels; ++c) {
            Eigen::Index best = 0;
            for (int p = 0; p < hw; ++p) {
                const double v = blk(c, p);
                r.f(c * hw + p, b) = v;
                if (v > blk(c, best)) best = p;
            }
            r.f(channels * hw + c, b) = blk(c, best);
            r.gmax[static_cast<size_t>(b) * channels + c] = best;
        }
        VectorXd z = blk.transpose() * wl;
        z = (z.array() - z.maxCoeff()).exp();
        z /= z.sum();
        r.attn.col(b) = z;
        r.f.col(b).tail(channels) = blk * z;
        double cx = 0, cy = 0;
        for (int p = 0; p < hw; ++p) {
            cx += z(p) * (p % w + 0.5) / w;
            cy += z(p) * (p / w + 0.5) / h;
        }
        r.centre.col(b) << cx, cy;
    }
    return r;
}

// Returns d(act) and writes d(wl).
inline MatrixXd from_features(const MatrixXd& df, const MatrixXd& dcentre, const MatrixXd& act, const FeatureResult& fr,
                              const VectorXd& wl, VectorXd& dwl, int channels, int batch, int h, int w) {
    const int hw = h * w;
    MatrixXd dact(channels, static_cast<Eigen::Index>(batch) * hw);
    dwl = VectorXd::Zero(channels);
    for (int b = 0; b < batch; ++b) {
        const Eigen::Index off = static_cast<Eigen::Index>(b) * hw;
        const auto blk = act.middleCols(off, hw);
        auto dblk = dact.middleCols(off, hw);
        for (int c = 0; c < channels; ++c)
            for (int p = 0; p < hw; ++p) dblk(c, p) = df(c * hw + p, b);
        for (int c = 0; c < channels; ++c)
            dblk(c, fr.gmax[static_cast<size_t>(b) * channels + c]) += df(channels * hw + c, b);
        const VectorXd du = df.col(b).tail(channels);
        const VectorXd a = fr.attn.col(b);
        VectorXd da = blk.transpose() * du;
        for (int p = 0; p < hw; ++p)
            da(p) += dcentre(0, b) * (p % w + 0.5) / w + dcentre(1, b) * (p / w + 0.5) / h;
        const VectorXd dz = a.cwiseProduct((da.array() - a.dot(da)).matrix());
        dblk += du * a.transpose() + wl * dz.transpose();
        dwl += blk * dz;
    }
    return dact;
}

inline MatrixXd softmax_cols(const MatrixXd& logits) {
    MatrixXd p(logits.rows(), logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const double mx = logits.col(j).maxCoeff();
        p.col(j) = (logits.col(j).array() - mx).exp();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

}  // namespace detail

struct ForwardCache {
    int batch = 0;
    MatrixXd x, cols1, a1, cols2, a2;
    detail::FeatureResult features;
    detail::PoolResult p1, p2;
};

struct ForwardOutput {
    MatrixXd logits;  // (C+1) x B
    MatrixXd box;     // 4 x B, normalized (cx, cy, w, h)
};

inline ForwardOutput forward(const DetectorModel& m, const MatrixXd& x, ForwardCache* cache = nullptr) {
    using namespace arch;
    const int B = static_cast<int>(x.cols());
    // input column per image -> 1 x (B*H*W)
    MatrixXd in = Eigen::Map<const MatrixXd>(x.data(), 1, static_cast<Eigen::Index>(B) * kIn);
    MatrixXd cols1 = detail::im2col(in, 1, B, kH1, kW1);
    MatrixXd a1 = ((m.w1 * cols1).colwise() + m.b1).cwiseMax(0.0);
    auto p1 = detail::maxpool2(a1, kC1, B, kH1, kW1);
    MatrixXd cols2 = detail::im2col(p1.out, kC1, B, kH2, kW2);
    MatrixXd a2 = ((m.w2 * cols2).colwise() + m.b2).cwiseMax(0.0);
    auto p2 = detail::maxpool2(a2, kC2, B, kH2, kW2);
    auto fr = detail::to_features(p2.out, m.wl, kC2, B, kH3, kW3);
    ForwardOutput out{(m.wc * fr.f).colwise() + m.bc, (m.wb * fr.f).colwise() + m.bb};
    out.box.topRows(2) += fr.centre;
    if (cache) {
        cache->batch = B;
        cache->x = std::move(in);
        cache->cols1 = std::move(cols1);
        cache->a1 = std::move(a1);
        cache->p1 = std::move(p1);
        cache->cols2 = std::move(cols2);
        cache->a2 = std::move(a2);
        cache->p2 = std::move(p2);
        cache->features = std::move(fr);
    }
    return out;
}

struct BatchTargets {
    std::vector<int> cls;       // 0..C, C = background
    MatrixXd box;               // 4 x B normalized targets
    std::vector<char> has_box;  // 1 for vehicle samples
};

struct LossValue {
    double cls = 0, box = 0;
    double total() const { return cls + box; }
};

inline double smooth_l1(double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; }
inline double smooth_l1_grad(double d) { return std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0); }

// Mean cross-entropy plus box_weight * mean smooth-L1 over samples with a box.
// Gradients are written into `grad` (same shapes as the model).
inline LossValue loss_and_gradient(const DetectorModel& m, const MatrixXd& x, const BatchTargets& t, double box_weight,
                                   DetectorModel* grad) {
    using namespace arch;
    ForwardCache cache;
    auto out = forward(m, x, grad ? &cache : nullptr);
    const int B = static_cast<int>(x.cols());
    const MatrixXd prob = detail::softmax_cols(out.logits);
    LossValue loss;
    MatrixXd dlogits = prob;
    MatrixXd dbox = MatrixXd::Zero(4, B);
    int n_box = 0;
    for (int b = 0; b < B; ++b) n_box += t.has_box[static_cast<size_t>(b)] != 0;
    for (int b = 0; b < B; ++b) {
        const int y = t.cls[static_cast<size_t>(b)];
        loss.cls -= std::log(std::max(prob(y, b), 1e-300));
        dlogits(y, b) -= 1.0;
        if (t.has_box[static_cast<size_t>(b)]) {
            for (int k = 0; k < 4; ++k) {
                const double d = out.box(k, b) - t.box(k, b);
                loss.box += smooth_l1(d);
                dbox(k, b) = box_weight * smooth_l1_grad(d) / n_box;
            }
        }
    }
    loss.cls /= B;
    loss.box = n_box > 0 ? box_weight * loss.box / n_box : 0.0;
    dlogits /= B;
    if (!grad) return loss;

    grad->num_classes = m.num_classes;
    grad->wc = dlogits * cache.features.f.transpose();
    grad->bc = dlogits.rowwise().sum();
    grad->wb = dbox * cache.features.f.transpose();
    grad->bb = dbox.rowwise().sum();
    MatrixXd dfeat = m.wc.transpose() * dlogits + m.wb.transpose() * dbox;
    MatrixXd dp2 = detail::from_features(dfeat, dbox.topRows(2), cache.p2.out, cache.features, m.wl, grad->wl, kC2, B,
                                         kH3, kW3);
    MatrixXd da2 = detail::maxpool2_backward(dp2, cache.p2.argmax, kC2, cache.a2.cols());
    da2 = (cache.a2.array() > 0).select(da2, 0.0);
    grad->w2 = da2 * cache.cols2.transpose();
    grad->b2 = da2.rowwise().sum();
    MatrixXd dcols2 = m.w2.transpose() * da2;
    MatrixXd dp1 = detail::col2im(dcols2, kC1, B, kH2, kW2);
    MatrixXd da1 = detail::maxpool2_backward(dp1, cache.p1.argmax, kC1, cache.a1.cols());
    da1 = (cache.a1.array() > 0).select(da1, 0.0);
    grad->w1 = da1 * cache.cols1.transpose();
    grad->b1 = da1.rowwise().sum();
    return loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int epochs = 14;
    double learning_rate = 0.01;
    int batch = 32;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double box_weight = 20.0;
    double clip_norm = 5.0;  // global gradient-norm cap; 0 disables
};

inline std::vector<std::string> train_config_violations(const TrainConfig& c) {
    std::vector<std::string> v;
    if (c.epochs < 1) v.push_back("epochs must be >= 1");
    if (!(c.learning_rate > 0)) v.push_back("learning_rate must be > 0");
    if (c.batch < 1) v.push_back("batch must be >= 1");
    if (!(c.momentum >= 0 && c.momentum < 1)) v.push_back("momentum must be in [0,1)");
    if (!(c.weight_decay >= 0)) v.push_back("weight_decay must be >= 0");
    if (!(c.box_weight >= 0)) v.push_back("box_weight must be >= 0");
    if (!(c.clip_norm >= 0)) v.push_back("clip_norm must be >= 0");
    return v;
}

struct EpochLog {
    int epoch = 0;
    double class_loss = 0, box_loss = 0, accuracy = 0;
};

struct TrainingData {
    MatrixXd x;  // kIn x N
    BatchTargets targets;
    int num_classes = 0;
};

inline BatchTargets make_targets(const DatasetManifest& m) {
    const int C = static_cast<int>(m.classes.size());
    BatchTargets t;
    t.box = MatrixXd::Zero(4, static_cast<Eigen::Index>(m.records.size()));
    for (size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        const bool vehicle = r.label != kBackground && r.bbox.has_value();
        t.cls.push_back(vehicle ? r.label : C);
        t.has_box.push_back(vehicle);
        if (vehicle) {
            const auto& b = *r.bbox;
            t.box.col(static_cast<Eigen::Index>(i)) << (b.x + b.w / 2) / kSampleWidth, (b.y + b.h / 2) / kSampleHeight,
                b.w / kSampleWidth, b.h / kSampleHeight;
        }
    }
    return t;
}

inline TrainingData make_training_data(const DatasetManifest& m, const std::vector<GrayImage>& images) {
    require(images.size() == m.records.size(), "image count does not match manifest", "images");
    return {pool_inputs(images), make_targets(m), static_cast<int>(m.classes.size())};
}

struct TrainResult {
    DetectorModel model;
    std::vector<EpochLog> log;
};

// `start` continues from an existing model instead of a fresh initialization.
inline TrainResult train(const TrainingData& data, const TrainConfig& cfg, std::uint64_t seed,
                         const DetectorModel* start = nullptr) {
    if (auto v = train_config_violations(cfg); !v.empty()) throw ValidationError(std::move(v), "train_config");
    const Eigen::Index n = data.x.cols();
    if (n == 0) throw Error(ErrorCode::invalid_argument, "training manifest is empty", "manifest");
    std::set<int> present(data.targets.cls.begin(), data.targets.cls.end());
    if (present.size() < 2) throw Error(ErrorCode::invalid_argument, "training manifest must contain >= 2 classes", "manifest");

    TrainResult res;
    if (start) {
        require(start->num_classes == data.num_classes,
                "starting model does not match the training data", "start");
        res.model = *start;
    } else {
        res.model = init_detector(data.num_classes, seed);
    }
    DetectorModel velocity = res.model;
    velocity.for_each_tensor([](double* p, Eigen::Index k) { std::fill(p, p + k, 0.0); });
    std::vector<Eigen::Index> order(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(seed, {hash_label("epoch"), static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);
        EpochLog log;
        log.epoch = epoch;
        Eigen::Index correct = 0;
        // step decay for the last third
        const double lr = epoch >= (2 * cfg.epochs) / 3 ? cfg.learning_rate * 0.1 : cfg.learning_rate;
        for (Eigen::Index start = 0; start < n; start += cfg.batch) {
            const Eigen::Index bsz = std::min<Eigen::Index>(cfg.batch, n - start);
            MatrixXd xb(arch::kIn, bsz);
            BatchTargets tb;
            tb.box.resize(4, bsz);
            for (Eigen::Index j = 0; j < bsz; ++j) {
                const Eigen::Index i = order[static_cast<size_t>(start + j)];
                xb.col(j) = data.x.col(i);
                tb.cls.push_back(data.targets.cls[static_cast<size_t>(i)]);
                tb.has_box.push_back(data.targets.has_box[static_cast<size_t>(i)]);
                tb.box.col(j) = data.targets.box.col(i);
            }
            DetectorModel g;
            const LossValue l = loss_and_gradient(res.model, xb, tb, cfg.box_weight, &g);
            if (!std::isfinite(l.total()))
                throw Error(ErrorCode::numerical_error, "training diverged: non-finite loss at epoch " + std::to_string(epoch),
                            "epoch");
            log.class_loss += l.cls * bsz;
            log.box_loss += l.box * bsz;

            std::vector<std::pair<double*, Eigen::Index>> params, grads, vels;
            res.model.for_each_tensor([&](double* p, Eigen::Index k) { params.emplace_back(p, k); });
            g.for_each_tensor([&](double* p, Eigen::Index k) { grads.emplace_back(p, k); });
            velocity.for_each_tensor([&](double* p, Eigen::Index k) { vels.emplace_back(p, k); });
            double norm2 = 0;
            for (const auto& [p, k] : grads) norm2 += Eigen::Map<const VectorXd>(p, k).squaredNorm();
            const double scale = cfg.clip_norm > 0 && norm2 > cfg.clip_norm * cfg.clip_norm
                                     ? cfg.clip_norm / std::sqrt(norm2)
                                     : 1.0;
            for (size_t t = 0; t < params.size(); ++t)
                for (Eigen::Index k = 0; k < params[t].second; ++k) {
                    double& v = vels[t].first[k];
                    double& p = params[t].first[k];
                    v = cfg.momentum * v - lr * (scale * grads[t].first[k] + cfg.weight_decay * p);
                    p += v;
                }
        }
        // accuracy with the updated parameters, in chunks
        for (Eigen::Index start = 0; start < n; start += 256) {
            const Eigen::Index bsz = std::min<Eigen::Index>(256, n - start);
            auto out = forward(res.model, data.x.middleCols(start, bsz));
            for (Eigen::Index j = 0; j < bsz; ++j) {
                Eigen::Index arg;
                out.logits.col(j).maxCoeff(&arg);
                correct += arg == data.targets.cls[static_cast<size_t>(start + j)];
            }
        }
        log.class_loss /= static_cast<double>(n);
        log.box_loss /= static_cast<double>(n);
        log.accuracy = static_cast<double>(correct) / static_cast<double>(n);
        res.log.push_back(log);
    }
    return res;
}

inline TrainResult train(const DatasetManifest& manifest, const TrainConfig& cfg, std::uint64_t seed) {
    if (manifest.records.empty()) throw Error(ErrorCode::invalid_argument, "training manifest is empty", "manifest");
    return train(make_training_data(manifest, load_images(manifest)), cfg, seed);
}

inline std::string serialize_training_log(const std::vector<EpochLog>& log) {
    std::ostringstream os;
    for (const auto& e : log)
        os << "epoch " << e.epoch << " class_loss " << text::fmt9(e.class_loss) << " box_loss " << text::fmt9(e.box_loss)
           << " accuracy " << text::fmt9(e.accuracy) << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Inference

struct Detection {
    std::vector<double> probabilities;  // C+1 entries, background last
    Box bbox;
    double confidence = 0;
    int predicted = 0;  // argmax over all entries; == C for background

    // Best vehicle class and its probability: the single proposal of this sample.
    std::pair<int, double> proposal() const {
        int best = 0;
        for (int c = 1; c + 1 < static_cast<int>(probabilities.size()); ++c)
            if (probabilities[static_cast<size_t>(c)] > probabilities[static_cast<size_t>(best)]) best = c;
        return {best, probabilities[static_cast<size_t>(best)]};
    }
};

inline Box decode_box(double cx, double cy, double w, double h) {
    const double bw = std::max(0.0, w) * kSampleWidth, bh = std::max(0.0, h) * kSampleHeight;
    return {cx * kSampleWidth - bw / 2, cy * kSampleHeight - bh / 2, bw, bh};
}

inline std::vector<Detection> predict_pooled(const DetectorModel& m, const MatrixXd& x) {
    std::vector<Detection> out;
    out.reserve(static_cast<size_t>(x.cols()));
    for (Eigen::Index start = 0; start < x.cols(); start += 256) {
        const Eigen::Index bsz = std::min<Eigen::Index>(256, x.cols() - start);
        auto f = forward(m, x.middleCols(start, bsz));
        const MatrixXd p = detail::softmax_cols(f.logits);
        for (Eigen::Index j = 0; j < bsz; ++j) {
            Detection d;
            d.probabilities.assign(p.col(j).data(), p.col(j).data() + p.rows());
            Eigen::Index arg;
            d.confidence = p.col(j).maxCoeff(&arg);
            d.predicted = static_cast<int>(arg);
            d.bbox = decode_box(f.box(0, j), f.box(1, j), f.box(2, j), f.box(3, j));
            out.push_back(std::move(d));
        }
    }
    return out;
}

inline Detection predict(const DetectorModel& m, const GrayImage& image) {
    MatrixXd x(arch::kIn, 1);
    x.col(0) = pool_input(image);
    return predict_pooled(m, x).front();
}

inline std::vector<Detection> predict_batch(const DetectorModel& m, const std::vector<GrayImage>& images) {
    return predict_pooled(m, pool_inputs(images));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'S', 'L', 'D', 'E', 'T', '0', '0', '1'};

inline std::string serialize_checkpoint(const DetectorModel& model) {
    DetectorModel m = model;
    std::string out(kCheckpointMagic, 8);
    auto put = [&](const void* p, size_t n) { out.append(static_cast<const char*>(p), n); };
    const std::uint64_t hash = m.arch_hash(), seed = m.seed, count = m.parameter_count();
    const std::int32_t classes = m.num_classes;
    put(&hash, 8);
    put(&seed, 8);
    put(&classes, 4);
    put(&count, 8);
    m.for_each_tensor([&](double* p, Eigen::Index k) { put(p, static_cast<size_t>(k) * sizeof(double)); });
    return out;
}

inline DetectorModel parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 36 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw Error(ErrorCode::parse_error, "not a detector checkpoint", "checkpoint");
    size_t pos = 8;
    auto get = [&](void* p, size_t n) {
        if (pos + n > bytes.size()) throw Error(ErrorCode::parse_error, "truncated checkpoint", "checkpoint");
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    };
    std::uint64_t hash, seed, count;
    std::int32_t classes;
    get(&hash, 8);
    get(&seed, 8);
    get(&classes, 4);
    get(&count, 8);
    if (classes < 1 || classes > 1000) throw Error(ErrorCode::parse_error, "bad class count in checkpoint", "checkpoint");
    DetectorModel m = init_detector(classes, seed);
    if (hash != m.arch_hash())
        throw Error(ErrorCode::validation_failed, "checkpoint architecture hash mismatch", "arch_hash");
    if (count != m.parameter_count()) throw Error(ErrorCode::parse_error, "parameter count mismatch", "checkpoint");
    m.for_each_tensor([&](double* p, Eigen::Index k) { get(p, static_cast<size_t>(k) * sizeof(double)); });
    if (pos != bytes.size()) throw Error(ErrorCode::parse_error, "trailing bytes in checkpoint", "checkpoint");
    return m;
}

inline void save_checkpoint(const DetectorModel& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    text::write_file(path.string(), serialize_checkpoint(m));
}

inline DetectorModel load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::not_found, "checkpoint not found: " + path.string());
    return parse_checkpoint(text::read_file(path.string()));
}

}  // namespace synthloop
