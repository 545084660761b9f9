#pragma once
// Minimal libpng wrappers for 8-bit grayscale and RGB images.

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "synthloop/core/error.hpp"
#include "synthloop/core/image.hpp"

namespace synthloop::png {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_rows(const std::string& path, int height, int width, int color_type, int channels,
                       const std::uint8_t* data) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::io_error, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error(ErrorCode::io_error, "libpng write failed for " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const size_t stride = static_cast<size_t>(width) * channels;
    for (int r = 0; r < height; ++r) png_write_row(png, const_cast<std::uint8_t*>(data + r * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline void write_gray(const std::string& path, const GrayImage& img) {
    detail::write_rows(path, img.height, img.width, PNG_COLOR_TYPE_GRAY, 1, img.data.data());
}

inline void write_rgb(const std::string& path, const RgbImage& img) {
    detail::write_rows(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 3, img.data.data());
}

// Reads any PNG and converts it to 8-bit grayscale.
inline GrayImage read_gray(const std::string& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw Error(ErrorCode::io_error, "cannot read PNG " + path + ": " + image.message);
    image.format = PNG_FORMAT_GRAY;
    GrayImage out(static_cast<int>(image.height), static_cast<int>(image.width));
    if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
        png_image_free(&image);
        throw Error(ErrorCode::io_error, "cannot decode PNG " + path + ": " + image.message);
    }
    return out;
}

}  // namespace synthloop::png
