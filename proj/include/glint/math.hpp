#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace glint {

using Real = double;

inline constexpr Real kPi = 3.14159265358979323846;

struct Vec2 {
    Real x = 0, y = 0;

    Vec2() = default;
    Vec2(Real x_, Real y_) : x(x_), y(y_) {}

    Real& operator[](int i) { return (&x)[i]; }
    Real operator[](int i) const { return (&x)[i]; }

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(Real s) const { return {x * s, y * s}; }
    Vec2 operator/(Real s) const { return {x / s, y / s}; }
    Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
};

struct Vec3 {
    Real x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(Real x_, Real y_, Real z_) : x(x_), y(y_), z(z_) {}
    explicit Vec3(Real s) : x(s), y(s), z(s) {}

    Real& operator[](int i) { return (&x)[i]; }
    Real operator[](int i) const { return (&x)[i]; }

    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
    Vec3 operator*(Real s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(Real s) const { return {x / s, y / s, z / s}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(Real s) { x *= s; y *= s; z *= s; return *this; }
};

inline Vec3 operator*(Real s, const Vec3& v) { return v * s; }
inline Vec2 operator*(Real s, const Vec2& v) { return v * s; }

inline Real dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Real dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline Real length_sq(const Vec3& v) { return dot(v, v); }
inline Real length_sq(const Vec2& v) { return dot(v, v); }
inline Real length(const Vec3& v) { return std::sqrt(length_sq(v)); }
inline Real length(const Vec2& v) { return std::sqrt(length_sq(v)); }
inline Vec3 normalize(const Vec3& v) { return v / length(v); }

inline Vec3 min(const Vec3& a, const Vec3& b) {
    return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline Vec3 max(const Vec3& a, const Vec3& b) {
    return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}

inline Real clamp(Real v, Real lo, Real hi) { return std::min(std::max(v, lo), hi); }
inline Vec3 clamp(const Vec3& v, Real lo, Real hi) {
    return {clamp(v.x, lo, hi), clamp(v.y, lo, hi), clamp(v.z, lo, hi)};
}
inline Real mix(Real a, Real b, Real t) { return a + (b - a) * t; }
inline Vec3 mix(const Vec3& a, const Vec3& b, Real t) { return a + (b - a) * t; }

inline Vec3 reflect(const Vec3& v, const Vec3& n) { return n * (2 * dot(n, v)) - v; }

inline bool all_finite(const Vec3& v) {
    return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// Unit quaternion (w, x, y, z).
struct Quat {
    Real w = 1, x = 0, y = 0, z = 0;

    Quat() = default;
    Quat(Real w_, Real x_, Real y_, Real z_) : w(w_), x(x_), y(y_), z(z_) {}

    Real& operator[](int i) { return (&w)[i]; }
    Real operator[](int i) const { return (&w)[i]; }

    Real norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
    Quat normalized() const {
        Real n = norm();
        return {w / n, x / n, y / n, z / n};
    }

    static Quat axis_angle(const Vec3& axis, Real angle) {
        Real h = angle / 2;
        Vec3 a = normalize(axis) * std::sin(h);
        return {std::cos(h), a.x, a.y, a.z};
    }
};

struct Mat3 {
    // Row-major.
    std::array<Real, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    Real& operator()(int r, int c) { return m[r * 3 + c]; }
    Real operator()(int r, int c) const { return m[r * 3 + c]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 transposed() const {
        Mat3 t;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
        return t;
    }
    Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    Vec3 row(int r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }
    static Mat3 from_cols(const Vec3& a, const Vec3& b, const Vec3& c) {
        Mat3 r;
        r.m = {a.x, b.x, c.x, a.y, b.y, c.y, a.z, b.z, c.z};
        return r;
    }
};

// Columns of the rotation matrix for a unit quaternion.
inline Mat3 quat_to_mat(const Quat& q) {
    Real w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
           2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
    return r;
}

// Quaternion whose rotation maps +z to the given unit normal.
inline Quat quat_from_normal(const Vec3& n) {
    Vec3 z{0, 0, 1};
    Real c = dot(z, n);
    if (c > 1 - 1e-12) return Quat{};
    if (c < -1 + 1e-12) return Quat{0, 1, 0, 0};  // 180 deg about x
    Vec3 axis = normalize(cross(z, n));
    return Quat::axis_angle(axis, std::acos(clamp(c, -1.0, 1.0)));
}

// Deterministic xoshiro-style generator; avoids libstdc++ distribution details.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        state_ = seed + 0x9E3779B97F4A7C15ull;
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    Real uniform() { return Real(next_u64() >> 11) * 0x1.0p-53; }
    Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

    uint32_t uniform_index(uint32_t n) { return n ? uint32_t(next_u64() % n) : 0; }

    Real normal() {
        Real u1 = std::max(uniform(), 1e-300);
        Real u2 = uniform();
        return std::sqrt(-2 * std::log(u1)) * std::cos(2 * kPi * u2);
    }

  private:
    uint64_t state_ = 0;
};

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
}

// Low-discrepancy points for quasi-Monte-Carlo sample loops.
inline Vec2 hammersley(uint32_t i, uint32_t n) {
    uint32_t bits = i;
    bits = (bits << 16u) | (bits >> 16u);
    bits = ((bits & 0x55555555u) << 1u) | ((bits & 0xAAAAAAAAu) >> 1u);
    bits = ((bits & 0x33333333u) << 2u) | ((bits & 0xCCCCCCCCu) >> 2u);
    bits = ((bits & 0x0F0F0F0Fu) << 4u) | ((bits & 0xF0F0F0F0u) >> 4u);
    bits = ((bits & 0x00FF00FFu) << 8u) | ((bits & 0xFF00FF00u) >> 8u);
    return {Real(i) / Real(n), Real(bits) * 0x1.0p-32};
}

// Orthonormal basis with t3 = n.
inline void onb(const Vec3& n, Vec3& t1, Vec3& t2) {
    if (std::abs(n.z) < 0.999) {
        t1 = normalize(cross(Vec3{0, 0, 1}, n));
    } else {
        t1 = normalize(cross(Vec3{1, 0, 0}, n));
    }
    t2 = cross(n, t1);
}

}  // namespace glint
