#pragma once

#include "glint/error.hpp"
#include "glint/image.hpp"
#include "glint/losses.hpp"

namespace glint {

inline constexpr Real kPsnrCap = 100.0;

// PSNR over sRGB values in [0,1]; identical images report the 100 dB cap.
inline Real psnr(const Image& x, const Image& y, const Image* mask = nullptr) {
    require(x.same_shape(y), "shape_mismatch", "psnr inputs differ in shape");
    Real mse = 0;
    size_t count = 0;
    for (size_t p = 0; p < x.pixel_count(); ++p) {
        if (mask && mask->values[p] < 0.5) continue;
        for (int c = 0; c < x.channels; ++c) {
            Real d = x.values[p * x.channels + c] - y.values[p * y.channels + c];
            mse += d * d;
            ++count;
        }
    }
    require(count > 0, "bad_args", "psnr mask excludes every pixel");
    mse /= count;
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Mean SSIM on the Rec.601 luma of sRGB images.
inline Real ssim_gray(const Image& x, const Image& y) {
    require(x.same_shape(y), "shape_mismatch", "ssim inputs differ in shape");
    if (x.channels == 1) return ssim(x, y);
    return ssim(to_grayscale(x), to_grayscale(y));
}

struct AlbedoAlignment {
    Image aligned;
    Real scale = 1.0;
    bool degenerate = false;  // all-zero prediction
};

// Single global least-squares scale, then clamp to [0,1].
inline AlbedoAlignment align_albedo_scale(const Image& pred, const Image& gt,
                                          const Image* mask = nullptr) {
    require(pred.same_shape(gt), "shape_mismatch", "albedo alignment shape mismatch");
    Real num = 0, den = 0;
    for (size_t p = 0; p < pred.pixel_count(); ++p) {
        if (mask && mask->values[p] < 0.5) continue;
        for (int c = 0; c < pred.channels; ++c) {
            Real a = pred.values[p * pred.channels + c];
            Real b = gt.values[p * gt.channels + c];
            num += a * b;
            den += a * a;
        }
    }
    AlbedoAlignment out;
    if (den < 1e-12) {
        out.degenerate = true;
        out.scale = 1.0;
    } else {
        out.scale = num / den;
    }
    out.aligned = pred;
    for (Real& v : out.aligned.values) v = clamp(v * out.scale, 0.0, 1.0);
    return out;
}

inline Real roughness_mse(const Image& pred, const Image& gt, const Image* mask = nullptr) {
    require(pred.same_shape(gt), "shape_mismatch", "roughness mse shape mismatch");
    Real mse = 0;
    size_t count = 0;
    for (size_t p = 0; p < pred.pixel_count(); ++p) {
        if (mask && mask->values[p] < 0.5) continue;
        Real d = pred.values[p] - gt.values[p];
        mse += d * d;
        ++count;
    }
    require(count > 0, "bad_args", "roughness mask excludes every pixel");
    return mse / count;
}

}  // namespace glint
