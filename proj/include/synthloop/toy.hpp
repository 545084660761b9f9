#pragma once
// Linear confidence model f_k(x) = phi(x)^T w_k trained to raise the mean
// confidence on class k and lower it on class k'. Analytic oracle for the
// reinforcing/disruptive argument.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/rng.hpp"

namespace synthloop::toy {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ToyData {
    MatrixXd phi;            // samples x features
    std::vector<int> label;  // 1 = class k, 0 = class k'
};

inline VectorXd optimal_weights(const VectorXd& expect_k, const VectorXd& expect_k2) {
    if (expect_k.size() != expect_k2.size())
        throw Error(ErrorCode::invalid_argument, "expectation vectors differ in length", "phi_expect");
    if (!expect_k.allFinite() || !expect_k2.allFinite())
        throw Error(ErrorCode::invalid_argument, "expectations must be finite", "phi_expect");
    return expect_k - expect_k2;
}

inline std::pair<VectorXd, VectorXd> empirical_means(const ToyData& d) {
    const auto n = d.phi.cols();
    VectorXd mk = VectorXd::Zero(n), mk2 = VectorXd::Zero(n);
    int ck = 0, ck2 = 0;
    for (Eigen::Index i = 0; i < d.phi.rows(); ++i) {
        if (d.label[static_cast<size_t>(i)] == 1) {
            mk += d.phi.row(i).transpose();
            ++ck;
        } else {
            mk2 += d.phi.row(i).transpose();
            ++ck2;
        }
    }
    if (ck == 0 || ck2 == 0) throw Error(ErrorCode::invalid_argument, "both classes must be represented", "labels");
    return {mk / ck, mk2 / ck2};
}

inline ToyData gaussian_data(const VectorXd& mean_k, const VectorXd& mean_k2, double sd, int n_per_class,
                             std::uint64_t seed) {
    Rng rng(seed);
    const auto n = mean_k.size();
    ToyData d;
    d.phi.resize(2 * n_per_class, n);
    for (int i = 0; i < 2 * n_per_class; ++i) {
        const bool k = i < n_per_class;
        const VectorXd& mu = k ? mean_k : mean_k2;
        for (Eigen::Index j = 0; j < n; ++j) d.phi(i, j) = rng.normal(mu(j), sd);
        d.label.push_back(k ? 1 : 0);
    }
    return d;
}

// Appends class-k samples drawn around `mean` (e.g. with one feature raised or suppressed).
inline ToyData inject(ToyData d, const VectorXd& mean, double sd, int count, std::uint64_t seed) {
    Rng rng(seed);
    const auto old = d.phi.rows();
    d.phi.conservativeResize(old + count, Eigen::NoChange);
    for (int i = 0; i < count; ++i) {
        for (Eigen::Index j = 0; j < d.phi.cols(); ++j) d.phi(old + i, j) = rng.normal(mean(j), sd);
        d.label.push_back(1);
    }
    return d;
}

struct TrainConfig {
    int epochs = 30;
    int batch = 64;
    double learning_rate = 0.05;
    double l2 = 1.0;  // the objective is bounded only with a norm penalty
};

// Minimizes -(mean_k f - mean_k' f) + l2/2 |w|^2 by minibatch SGD with
// balanced batches, returning the average of the iterates over the second half.
inline VectorXd train(const ToyData& d, const TrainConfig& cfg, std::uint64_t seed) {
    require(cfg.epochs >= 1 && cfg.batch >= 1 && cfg.learning_rate > 0 && cfg.l2 > 0, "invalid toy training config",
            "config");
    std::vector<Eigen::Index> pos, neg;
    for (Eigen::Index i = 0; i < d.phi.rows(); ++i) (d.label[static_cast<size_t>(i)] == 1 ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty()) throw Error(ErrorCode::invalid_argument, "both classes must be represented", "labels");
    Rng rng(seed);
    VectorXd w = VectorXd::Zero(d.phi.cols()), avg = VectorXd::Zero(d.phi.cols());
    long averaged = 0;
    const size_t steps = (std::max(pos.size(), neg.size()) + static_cast<size_t>(cfg.batch) - 1) / static_cast<size_t>(cfg.batch);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(pos);
        rng.shuffle(neg);
        for (size_t s = 0; s < steps; ++s) {
            VectorXd gk = VectorXd::Zero(w.size()), gk2 = VectorXd::Zero(w.size());
            for (int b = 0; b < cfg.batch; ++b) {
                gk += d.phi.row(pos[(s * cfg.batch + b) % pos.size()]).transpose();
                gk2 += d.phi.row(neg[(s * cfg.batch + b) % neg.size()]).transpose();
            }
            const VectorXd grad = -(gk - gk2) / cfg.batch + cfg.l2 * w;
            w -= cfg.learning_rate * grad;
            if (!w.allFinite())
                throw Error(ErrorCode::numerical_error, "toy training diverged at epoch " + std::to_string(epoch), "epoch");
            if (2 * epoch >= cfg.epochs) {
                avg += w;
                ++averaged;
            }
        }
    }
    return avg / static_cast<double>(averaged);
}

inline double cosine(const VectorXd& a, const VectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0 || nb == 0) return 0.0;
    return a.dot(b) / (na * nb);
}

}  // namespace synthloop::toy
