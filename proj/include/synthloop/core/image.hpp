#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "synthloop/core/error.hpp"

namespace synthloop {

// Row-major single-channel image.
template <typename T>
struct Image {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Image() = default;
    Image(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {
        require(h >= 0 && w >= 0, "image dimensions must be non-negative");
    }

    T& operator()(int r, int c) { return data[static_cast<size_t>(r) * width + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<size_t>(r) * width + c]; }

    // Clamp-to-edge access.
    const T& at_clamped(int r, int c) const {
        r = r < 0 ? 0 : (r >= height ? height - 1 : r);
        c = c < 0 ? 0 : (c >= width ? width - 1 : c);
        return (*this)(r, c);
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    friend bool operator==(const Image&, const Image&) = default;
};

using GrayImage = Image<std::uint8_t>;

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;  // interleaved RGB

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0) {}

    void set(int r, int c, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
        auto* p = &data[(static_cast<size_t>(r) * width + c) * 3];
        p[0] = red;
        p[1] = green;
        p[2] = blue;
    }
    const std::uint8_t* pixel(int r, int c) const { return &data[(static_cast<size_t>(r) * width + c) * 3]; }
};

}  // namespace synthloop
