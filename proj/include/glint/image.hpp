#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "glint/error.hpp"
#include "glint/math.hpp"

namespace glint {

enum class ColorSpace { Linear, Srgb, Data };

// Row-major pixel grid with an arbitrary channel count.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    ColorSpace color_space = ColorSpace::Linear;
    std::vector<Real> values;

    Image() = default;
    Image(int w, int h, int c, ColorSpace cs = ColorSpace::Linear)
        : width(w), height(h), channels(c), color_space(cs),
          values(size_t(w) * h * c, 0.0) {}

    size_t pixel_count() const { return size_t(width) * height; }
    size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }

    Real& at(int x, int y, int c = 0) {
        return values[(size_t(y) * width + x) * channels + c];
    }
    Real at(int x, int y, int c = 0) const {
        return values[(size_t(y) * width + x) * channels + c];
    }

    Vec3 rgb(int x, int y) const {
        size_t i = (size_t(y) * width + x) * channels;
        return {values[i], values[i + 1], values[i + 2]};
    }
    void set_rgb(int x, int y, const Vec3& v) {
        size_t i = (size_t(y) * width + x) * channels;
        values[i] = v.x;
        values[i + 1] = v.y;
        values[i + 2] = v.z;
    }

    void fill(Real v) { std::fill(values.begin(), values.end(), v); }

    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    bool all_finite() const {
        for (Real v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// IEC 61966-2-1 transfer, per channel value.
inline Real srgb_encode(Real linear) {
    Real v = clamp(linear, 0.0, 1.0);
    return v <= 0.0031308 ? v * 12.92 : 1.055 * std::pow(v, 1.0 / 2.4) - 0.055;
}

inline Real srgb_decode(Real srgb) {
    Real v = clamp(srgb, 0.0, 1.0);
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

inline Image linear_to_srgb(const Image& img) {
    Image out = img;
    for (Real& v : out.values) v = srgb_encode(v);
    out.color_space = ColorSpace::Srgb;
    return out;
}

inline Image srgb_to_linear(const Image& img) {
    Image out = img;
    for (Real& v : out.values) v = srgb_decode(v);
    out.color_space = ColorSpace::Linear;
    return out;
}

// Transfer used inside losses: identical to srgb_encode on [0,1] but extended
// linearly above 1 so over-bright renders keep a gradient.
inline Real srgb_encode_ext(Real v) {
    if (v <= 1.0) return srgb_encode(v);
    return 1.0 + (1.055 / 2.4) * (v - 1.0);
}

inline Real srgb_encode_ext_deriv(Real v) {
    if (v < 0.0) return 0.0;
    if (v <= 0.0031308) return 12.92;
    if (v <= 1.0) return (1.055 / 2.4) * std::pow(v, 1.0 / 2.4 - 1.0);
    return 1.055 / 2.4;
}

// Rec.601 luma of an RGB image.
inline Image to_grayscale(const Image& img) {
    require(img.channels == 3, "image_shape", "grayscale conversion expects 3 channels");
    Image out(img.width, img.height, 1, img.color_space);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            Vec3 c = img.rgb(x, y);
            out.at(x, y) = 0.299 * c.x + 0.587 * c.y + 0.114 * c.z;
        }
    return out;
}

}  // namespace glint
