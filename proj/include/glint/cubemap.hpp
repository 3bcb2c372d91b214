#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "glint/error.hpp"
#include "glint/math.hpp"

namespace glint {

// Face order matches the checkpoint layout: +x, -x, +y, -y, +z, -z.
struct Cubemap {
    int res = 0;
    std::array<std::vector<Vec3>, 6> faces;

    Cubemap() = default;
    explicit Cubemap(int res_, Vec3 fill = Vec3{0, 0, 0}) : res(res_) {
        for (auto& f : faces) f.assign(size_t(res) * res, fill);
    }

    Vec3& at(int face, int x, int y) { return faces[face][size_t(y) * res + x]; }
    const Vec3& at(int face, int x, int y) const { return faces[face][size_t(y) * res + x]; }

    size_t texel_count() const { return size_t(6) * res * res; }

    Vec3& texel(size_t i) { return faces[i / (size_t(res) * res)][i % (size_t(res) * res)]; }
    const Vec3& texel(size_t i) const {
        return faces[i / (size_t(res) * res)][i % (size_t(res) * res)];
    }

    void fill(const Vec3& v) {
        for (auto& f : faces) std::fill(f.begin(), f.end(), v);
    }

    bool all_finite_nonneg() const {
        for (const auto& f : faces)
            for (const Vec3& t : f)
                if (!all_finite(t) || t.x < 0 || t.y < 0 || t.z < 0) return false;
        return true;
    }
};

// (face, u, v) with u, v in [0, res) texel coordinates <-> unit direction.
// Standard cubemap convention (OpenGL face axes).
inline Vec3 cubemap_dir(int face, Real s, Real t) {
    // s, t in [-1, 1]
    switch (face) {
        case 0: return normalize(Vec3{1, -t, -s});   // +x
        case 1: return normalize(Vec3{-1, -t, s});   // -x
        case 2: return normalize(Vec3{s, 1, t});     // +y
        case 3: return normalize(Vec3{s, -1, -t});   // -y
        case 4: return normalize(Vec3{s, -t, 1});    // +z
        default: return normalize(Vec3{-s, -t, -1}); // -z
    }
}

inline Vec3 cubemap_texel_dir(int face, int x, int y, int res) {
    Real s = (2.0 * (x + 0.5) / res) - 1.0;
    Real t = (2.0 * (y + 0.5) / res) - 1.0;
    return cubemap_dir(face, s, t);
}

struct CubeCoord {
    int face;
    Real s, t;  // in [-1, 1]
};

inline CubeCoord dir_to_cube(const Vec3& d) {
    Real ax = std::abs(d.x), ay = std::abs(d.y), az = std::abs(d.z);
    if (ax >= ay && ax >= az) {
        if (d.x > 0) return {0, -d.z / ax, -d.y / ax};
        return {1, d.z / ax, -d.y / ax};
    }
    if (ay >= ax && ay >= az) {
        if (d.y > 0) return {2, d.x / ay, d.z / ay};
        return {3, d.x / ay, -d.z / ay};
    }
    if (d.z > 0) return {4, d.x / az, -d.y / az};
    return {5, -d.x / az, -d.y / az};
}

// Nearest-texel lookup.
inline Vec3 cubemap_sample_nearest(const Cubemap& cm, const Vec3& dir) {
    CubeCoord c = dir_to_cube(dir);
    int x = std::min(cm.res - 1, std::max(0, int((c.s + 1) * 0.5 * cm.res)));
    int y = std::min(cm.res - 1, std::max(0, int((c.t + 1) * 0.5 * cm.res)));
    return cm.at(c.face, x, y);
}

inline size_t cubemap_nearest_index(int res, const Vec3& dir) {
    CubeCoord c = dir_to_cube(dir);
    int x = std::min(res - 1, std::max(0, int((c.s + 1) * 0.5 * res)));
    int y = std::min(res - 1, std::max(0, int((c.t + 1) * 0.5 * res)));
    return (size_t(c.face) * res + y) * res + x;
}

// Bilinear taps within one face, clamped at its edges.
struct BilinearTaps {
    size_t idx[4];
    Real w[4];
};

inline BilinearTaps cubemap_bilinear_taps(int res, const Vec3& dir) {
    CubeCoord c = dir_to_cube(dir);
    Real fx = (c.s + 1) * 0.5 * res - 0.5;
    Real fy = (c.t + 1) * 0.5 * res - 0.5;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    Real ax = fx - x0, ay = fy - y0;
    auto cl = [res](int v) { return std::min(res - 1, std::max(0, v)); };
    size_t base = size_t(c.face) * res * res;
    BilinearTaps t;
    t.idx[0] = base + size_t(cl(y0)) * res + cl(x0);
    t.idx[1] = base + size_t(cl(y0)) * res + cl(x0 + 1);
    t.idx[2] = base + size_t(cl(y0 + 1)) * res + cl(x0);
    t.idx[3] = base + size_t(cl(y0 + 1)) * res + cl(x0 + 1);
    t.w[0] = (1 - ax) * (1 - ay);
    t.w[1] = ax * (1 - ay);
    t.w[2] = (1 - ax) * ay;
    t.w[3] = ax * ay;
    return t;
}

inline Vec3 cubemap_sample_bilinear(const Cubemap& cm, const Vec3& dir) {
    BilinearTaps t = cubemap_bilinear_taps(cm.res, dir);
    Vec3 out{0, 0, 0};
    for (int i = 0; i < 4; ++i) out += cm.texel(t.idx[i]) * t.w[i];
    return out;
}

// Bilinear sample plus its derivative w.r.t. the (unnormalized) direction.
// Face selection is piecewise; the derivative is valid within the face.
struct CubeSampleGrad {
    Vec3 value{0, 0, 0};
    Vec3 ddir[3];  // gradient of each output channel w.r.t. dir components
};

inline CubeSampleGrad cubemap_sample_bilinear_grad(const Cubemap& cm, const Vec3& dir) {
    // per-face axes: major index/sign, s index/sign, t index/sign
    static constexpr int kIm[6] = {0, 0, 1, 1, 2, 2};
    static constexpr Real kSm[6] = {1, -1, 1, -1, 1, -1};
    static constexpr int kIs[6] = {2, 2, 0, 0, 0, 0};
    static constexpr Real kSs[6] = {-1, 1, 1, 1, 1, -1};
    static constexpr int kIt[6] = {1, 1, 2, 2, 1, 1};
    static constexpr Real kSt[6] = {-1, -1, 1, -1, -1, -1};

    CubeCoord c = dir_to_cube(dir);
    int f = c.face;
    Real q = kSm[f] * dir[kIm[f]];
    int res = cm.res;
    Real fx = (c.s + 1) * 0.5 * res - 0.5;
    Real fy = (c.t + 1) * 0.5 * res - 0.5;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    Real ax = fx - x0, ay = fy - y0;
    auto cl = [res](int v) { return std::min(res - 1, std::max(0, v)); };
    size_t base = size_t(f) * res * res;
    const Vec3 t00 = cm.texel(base + size_t(cl(y0)) * res + cl(x0));
    const Vec3 t10 = cm.texel(base + size_t(cl(y0)) * res + cl(x0 + 1));
    const Vec3 t01 = cm.texel(base + size_t(cl(y0 + 1)) * res + cl(x0));
    const Vec3 t11 = cm.texel(base + size_t(cl(y0 + 1)) * res + cl(x0 + 1));

    CubeSampleGrad out;
    out.value = t00 * ((1 - ax) * (1 - ay)) + t10 * (ax * (1 - ay)) + t01 * ((1 - ax) * ay) +
                t11 * (ax * ay);
    Vec3 d_dax = (t10 - t00) * (1 - ay) + (t11 - t01) * ay;
    Vec3 d_day = (t01 - t00) * (1 - ax) + (t11 - t10) * ax;
    // ax = ((s+1)/2) * res - 0.5 - x0  =>  d ax / d s = res / 2
    Vec3 d_ds = d_dax * (res * 0.5);
    Vec3 d_dt = d_day * (res * 0.5);

    Vec3 grad_s{0, 0, 0}, grad_t{0, 0, 0};
    grad_s[kIs[f]] = kSs[f] / q;
    grad_s[kIm[f]] = -c.s * kSm[f] / q;
    grad_t[kIt[f]] = kSt[f] / q;
    grad_t[kIm[f]] = -c.t * kSm[f] / q;
    for (int k = 0; k < 3; ++k)
        out.ddir[k] = Vec3{d_ds[k] * grad_s.x + d_dt[k] * grad_t.x,
                           d_ds[k] * grad_s.y + d_dt[k] * grad_t.y,
                           d_ds[k] * grad_s.z + d_dt[k] * grad_t.z};
    return out;
}

// Exact solid angle of the texel [x, x+1] x [y, y+1] on a cube face.
inline Real texel_solid_angle(int x, int y, int res) {
    auto area = [](Real u, Real v) { return std::atan2(u * v, std::sqrt(u * u + v * v + 1)); };
    Real u0 = 2.0 * x / res - 1.0, u1 = 2.0 * (x + 1) / res - 1.0;
    Real v0 = 2.0 * y / res - 1.0, v1 = 2.0 * (y + 1) / res - 1.0;
    return area(u1, v1) - area(u0, v1) - area(u1, v0) + area(u0, v0);
}

}  // namespace glint
