#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "glint/error.hpp"
#include "glint/image.hpp"

namespace glint {

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// 8-bit PNG from values in [0,1]; 1/3/4 channels. No color-space conversion.
inline void write_png8(const Image& img, const std::string& path) {
    require(img.channels == 1 || img.channels == 3 || img.channels == 4, "io_error",
            "unsupported PNG channel count " + std::to_string(img.channels));
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(bool(fp), "io_error", "cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("io_error", "PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    int color_type = img.channels == 1   ? PNG_COLOR_TYPE_GRAY
                     : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                                         : PNG_COLOR_TYPE_RGBA;
    png_set_IHDR(png, info, img.width, img.height, 8, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(size_t(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[size_t(x) * img.channels + c] =
                    (unsigned char)std::lround(clamp(img.at(x, y, c), 0.0, 1.0) * 255.0);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// 16-bit grayscale PNG holding integer ids (mask maps).
inline void write_png16(const std::vector<uint16_t>& ids, int width, int height,
                        const std::string& path) {
    require(ids.size() == size_t(width) * height, "io_error", "id buffer size mismatch");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(bool(fp), "io_error", "cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("io_error", "PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(size_t(width) * 2);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            uint16_t v = ids[size_t(y) * width + x];
            row[size_t(x) * 2] = (unsigned char)(v >> 8);  // PNG is big-endian
            row[size_t(x) * 2 + 1] = (unsigned char)(v & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct PngData {
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<uint16_t> samples;  // interleaved, 8-bit data widened
};

inline PngData read_png_raw(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(bool(fp), "io_error", "cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("io_error", "PNG read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);

    PngData out;
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    size_t row_samples = size_t(out.width) * out.channels;
    out.samples.resize(row_samples * out.height);
    std::vector<unsigned char> row(png_get_rowbytes(png, info));
    for (int y = 0; y < out.height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (size_t i = 0; i < row_samples; ++i)
            out.samples[size_t(y) * row_samples + i] =
                out.bit_depth == 16 ? uint16_t((row[i * 2] << 8) | row[i * 2 + 1])
                                    : uint16_t(row[i]);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

// PNG as normalized values in [0,1]; tags 3/4-channel files as sRGB.
inline Image read_png(const std::string& path) {
    PngData d = read_png_raw(path);
    Image img(d.width, d.height, d.channels,
              d.channels >= 3 ? ColorSpace::Srgb : ColorSpace::Data);
    Real scale = d.bit_depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
    for (size_t i = 0; i < img.values.size(); ++i) img.values[i] = d.samples[i] * scale;
    return img;
}

// 16-bit mask PNG as raw integer ids.
inline std::vector<uint16_t> read_mask_png(const std::string& path, int& width, int& height) {
    PngData d = read_png_raw(path);
    require(d.channels == 1, "io_error", "mask PNG must be single channel: " + path);
    width = d.width;
    height = d.height;
    return d.samples;
}

}  // namespace glint
