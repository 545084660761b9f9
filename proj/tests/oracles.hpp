#pragma once
// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "synthloop/detector.hpp"
#include "synthloop/renderer.hpp"
#include "synthloop/xai.hpp"

namespace oracle {

using synthloop::GrayImage;
using synthloop::SuperpixelGrid;

inline double factorial(int n) { return std::tgamma(n + 1.0); }

// v(S) = mean over backgrounds of f(sample with the cells outside S replaced).
inline std::vector<double> coalition_values(const synthloop::ScoreFn& f, const GrayImage& x, const SuperpixelGrid& g,
                                            const std::vector<GrayImage>& backgrounds) {
    const int n = g.size();
    std::vector<double> v(size_t{1} << n, 0.0);
    for (size_t s = 0; s < v.size(); ++s) {
        std::vector<char> bits(static_cast<size_t>(n));
        for (int j = 0; j < n; ++j) bits[static_cast<size_t>(j)] = (s >> j) & 1;
        std::vector<GrayImage> batch;
        for (const auto& b : backgrounds) batch.push_back(synthloop::mask_image(x, g, bits, b));
        for (double y : f(batch)) v[s] += y / static_cast<double>(backgrounds.size());
    }
    return v;
}

// Shapley formula: sum over S not containing i of |S|!(n-|S|-1)!/n! [v(S+i) - v(S)].
inline std::vector<double> shapley(const std::vector<double>& v, int n) {
    std::vector<double> phi(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
        for (size_t s = 0; s < v.size(); ++s) {
            if ((s >> i) & 1) continue;
            const int k = __builtin_popcountll(s);
            const double w = factorial(k) * factorial(n - k - 1) / factorial(n);
            phi[static_cast<size_t>(i)] += w * (v[s | (size_t{1} << i)] - v[s]);
        }
    return phi;
}

inline synthloop::GrayImage random_image(int h, int w, synthloop::Rng& rng) {
    synthloop::GrayImage img(h, w);
    for (auto& p : img.data) p = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

inline double cell_mean(const synthloop::GrayImage& img, const synthloop::PixelRect& c) {
    double s = 0;
    for (int r = c.y; r < c.y + c.h; ++r)
        for (int x = c.x; x < c.x + c.w; ++x) s += img(r, x);
    return s / c.area();
}

// f = c0 + sum_j a_j * mean intensity of cell j / 255
inline synthloop::ScoreFn linear_model(const synthloop::SuperpixelGrid& g, std::vector<double> a, double c0) {
    return [g, a, c0](const std::vector<synthloop::GrayImage>& imgs) {
        std::vector<double> out;
        for (const auto& img : imgs) {
            double y = c0;
            for (int j = 0; j < g.size(); ++j) y += a[static_cast<size_t>(j)] * cell_mean(img, g.cell(j)) / 255.0;
            out.push_back(y);
        }
        return out;
    };
}

// Nonlinear with interactions: sigmoid of a weighted sum plus a pairwise product.
inline synthloop::ScoreFn interacting_model(const synthloop::SuperpixelGrid& g, std::vector<double> a) {
    return [g, a](const std::vector<synthloop::GrayImage>& imgs) {
        std::vector<double> out;
        for (const auto& img : imgs) {
            std::vector<double> m;
            for (int j = 0; j < g.size(); ++j) m.push_back(cell_mean(img, g.cell(j)) / 255.0);
            double z = -1.0;
            for (size_t j = 0; j < m.size(); ++j) z += a[j] * m[j];
            z += 2.0 * m[0] * m.back();
            out.push_back(1.0 / (1.0 + std::exp(-z)));
        }
        return out;
    };
}

// Clamped-border convolution written as the textbook quadruple loop.
inline synthloop::RadianceImage nested_convolve(const synthloop::RadianceImage& img, const synthloop::AiryKernel& k) {
    synthloop::RadianceImage out(img.height, img.width, 0.0);
    const int h = k.half();
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            double acc = 0;
            for (int i = -h; i <= h; ++i)
                for (int j = -h; j <= h; ++j) {
                    const int rr = std::clamp(r - i, 0, img.height - 1);
                    const int cc = std::clamp(c - j, 0, img.width - 1);
                    acc += k(i + h, j + h) * img(rr, cc);
                }
            out(r, c) = acc;
        }
    return out;
}

// Single-proposal detection with the given class probabilities.
inline synthloop::Detection make_detection(std::vector<double> probs, synthloop::Box b) {
    synthloop::Detection d;
    d.probabilities = std::move(probs);
    d.bbox = b;
    auto it = std::max_element(d.probabilities.begin(), d.probabilities.end());
    d.confidence = *it;
    d.predicted = static_cast<int>(it - d.probabilities.begin());
    return d;
}

}  // namespace oracle
