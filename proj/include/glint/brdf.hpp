#pragma once

#include "glint/math.hpp"

namespace glint {

// Disney remap with a floor that keeps D finite at r = 0.
inline Real ggx_alpha(Real roughness) { return std::max(roughness * roughness, 1e-3); }

// GGX normal distribution, D(n.h) with alpha = roughness^2.
inline Real ggx_d(Real n_dot_h, Real roughness) {
    Real a = ggx_alpha(roughness);
    Real a2 = a * a;
    Real f = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    return a2 / (kPi * f * f);
}

inline Real ggx_d_from_alpha(Real n_dot_h, Real alpha) {
    Real a2 = alpha * alpha;
    Real f = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    return a2 / (kPi * f * f);
}

inline Vec3 fresnel_schlick(Real cos_theta, const Vec3& f0) {
    Real c = clamp(cos_theta, 0.0, 1.0);
    Real p = 1.0 - c;
    Real p5 = p * p * p * p * p;
    return f0 + (Vec3{1, 1, 1} - f0) * p5;
}

inline Real fresnel_schlick(Real cos_theta, Real f0) {
    Real c = clamp(cos_theta, 0.0, 1.0);
    Real p = 1.0 - c;
    return f0 + (1.0 - f0) * p * p * p * p * p;
}

// Smith shadowing, Schlick-GGX form, IBL variant k = alpha^2 / 2.
inline Real smith_g1(Real cos_theta, Real k) { return cos_theta / (cos_theta * (1.0 - k) + k); }

inline Real smith_g(Real n_dot_v, Real n_dot_l, Real roughness) {
    Real a = ggx_alpha(roughness);
    Real k = a * a / 2.0;
    return smith_g1(n_dot_v, k) * smith_g1(n_dot_l, k);
}

// GGX half-vector importance sample in the tangent frame (n = +z); pdf over
// half vectors is D(h) (n.h).
inline Vec3 sample_ggx_h(const Vec2& u, Real alpha) {
    Real phi = 2.0 * kPi * u.x;
    Real a2 = alpha * alpha;
    Real cos2 = (1.0 - u.y) / (1.0 + (a2 - 1.0) * u.y);
    Real cos_t = std::sqrt(cos2);
    Real sin_t = std::sqrt(std::max(0.0, 1.0 - cos2));
    return {sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t};
}

// Cosine-weighted hemisphere sample in the tangent frame; pdf = cos/pi.
inline Vec3 sample_cosine(const Vec2& u) {
    Real phi = 2.0 * kPi * u.x;
    Real cos2 = 1.0 - u.y;
    Real cos_t = std::sqrt(cos2);
    Real sin_t = std::sqrt(u.y);
    return {sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t};
}

inline Vec3 tangent_to_world(const Vec3& v, const Vec3& t1, const Vec3& t2, const Vec3& n) {
    return t1 * v.x + t2 * v.y + n * v.z;
}

}  // namespace glint
