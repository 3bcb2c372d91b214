#pragma once

#include <vector>

#include "glint/brdf.hpp"
#include "glint/camera.hpp"
#include "glint/envlight.hpp"
#include "glint/rasterizer.hpp"

namespace glint {

// One deferred-shading sample.
struct ShadePoint {
    Vec3 normal;    // unit, world space
    Vec3 view;      // unit, toward the camera
    Vec3 albedo;
    Real roughness = 0.5;
    Real metallic = 0.0;
};

inline constexpr Real kDielectricF0 = 0.04;

struct ShadeSplit {
    Vec3 diffuse{0, 0, 0};
    Vec3 specular{0, 0, 0};
    Vec3 total() const { return diffuse + specular; }
};

// Split-sum estimate at one point: diffuse irradiance lookup plus prefiltered
// environment times the BRDF LUT factorization.
inline ShadeSplit shade_point_split_sum(const ShadePoint& pt, const EnvLight& env,
                                        const Image& lut) {
    ShadeSplit out;
    Real n_dot_v = clamp(dot(pt.normal, pt.view), 1e-4, 1.0);
    Vec3 irr = cubemap_sample_bilinear(env.irradiance, pt.normal);
    out.diffuse = (1.0 - pt.metallic) * pt.albedo * irr;

    Real r = clamp(pt.roughness, 0.0, 1.0);
    // dominant specular direction: bend the mirror ray toward the normal as the
    // lobe widens; keeps the split-sum close to the reference at rough grazing
    Vec3 r_mirror = reflect(pt.view, pt.normal);
    Vec3 bent = pt.normal + (r_mirror - pt.normal) * (1.0 - ggx_alpha(r));
    Vec3 r_dir = normalize(bent);
    Real lf = r * (env.params.mip_count - 1);
    int l0 = std::max(0, std::min(int(lf), env.params.mip_count - 2));
    int l1 = std::min(l0 + 1, env.params.mip_count - 1);
    Real f = lf - l0;
    Vec3 p0 = cubemap_sample_bilinear(env.mips[l0], r_dir);
    Vec3 p1 = cubemap_sample_bilinear(env.mips[l1], r_dir);
    Vec3 pf = p0 * (1.0 - f) + p1 * f;
    Vec2 ab = sample_lut(lut, n_dot_v, r);
    Vec3 f0 = Vec3{kDielectricF0, kDielectricF0, kDielectricF0} * (1.0 - pt.metallic) +
              pt.albedo * pt.metallic;
    out.specular = pf * (f0 * ab.x + Vec3{ab.y, ab.y, ab.y});
    return out;
}

// Deferred shading over the G-buffer planes. Plane values stay premultiplied
// by alpha; the shaded result is scaled by alpha and composited over the
// background, matching the capture convention.
inline Image shade_deferred(const GBuffer& g, const Camera& cam, const EnvLight& env,
                            const Image& lut, const Vec3& background = Vec3{0, 0, 0}) {
    require(!env.stale, "env_stale", "environment derivatives are stale; rebuild first");
    require(g.has(kPlaneAlbedo) && g.has(kPlaneNormal) && g.has(kPlaneRoughness) &&
                g.has(kPlaneMetallic),
            "gbuffer_planes", "shading needs albedo/normal/roughness/metallic planes");
    Image out(g.width, g.height, 3, ColorSpace::Linear);
    Mat3 cam_rot_t = cam.rotation.transposed();
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            Real a = g.alpha.at(x, y);
            if (a <= 0) {
                out.set_rgb(x, y, background);
                continue;
            }
            Vec3 n_cam = g.normal.rgb(x, y);
            Real nl = length(n_cam);
            if (nl < 1e-9) {
                out.set_rgb(x, y, background * (1.0 - a));
                continue;
            }
            ShadePoint pt;
            pt.normal = cam_rot_t * (n_cam / nl);
            pt.view = -cam.pixel_ray(x, y).dir;
            pt.albedo = g.albedo.rgb(x, y);
            pt.roughness = g.roughness.at(x, y);
            pt.metallic = g.metallic.at(x, y);
            Vec3 c = shade_point_split_sum(pt, env, lut).total();
            out.set_rgb(x, y, c * a + background * (1.0 - a));
        }
    return out;
}

// Adjoints of shade_deferred w.r.t. the material planes and env base texels.
struct ShadeGrad {
    Image albedo, roughness, metallic;  // G-buffer plane adjoints
    Cubemap env_base;                   // via the frozen training operators
};

inline ShadeGrad shade_deferred_grad(const GBuffer& g, const Camera& cam, const EnvLight& env,
                                     const Image& lut, const Image& adj,
                                     bool want_env = true) {
    require(!env.stale, "env_stale", "environment derivatives are stale; rebuild first");
    ShadeGrad sg;
    sg.albedo = Image(g.width, g.height, 3, ColorSpace::Data);
    sg.roughness = Image(g.width, g.height, 1, ColorSpace::Data);
    sg.metallic = Image(g.width, g.height, 1, ColorSpace::Data);
    Cubemap irr_adj(env.irradiance.res);
    std::vector<Cubemap> mip_adjs;
    if (want_env) {
        mip_adjs.reserve(env.mips.size());
        for (const auto& m : env.mips) mip_adjs.emplace_back(m.res);
    }
    Mat3 cam_rot_t = cam.rotation.transposed();
    int mip_count = env.params.mip_count;

    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            Real a = g.alpha.at(x, y);
            if (a <= 0) continue;
            Vec3 n_cam = g.normal.rgb(x, y);
            Real nlen = length(n_cam);
            if (nlen < 1e-9) continue;
            Vec3 adj_out = adj.rgb(x, y);
            if (adj_out.x == 0 && adj_out.y == 0 && adj_out.z == 0) continue;
            Vec3 d_shade = adj_out * a;  // out = shade * alpha + bg * (1 - alpha)

            Vec3 n = cam_rot_t * (n_cam / nlen);
            Vec3 v = -cam.pixel_ray(x, y).dir;
            Real n_dot_v = clamp(dot(n, v), 1e-4, 1.0);
            Vec3 albedo = g.albedo.rgb(x, y);
            Real rough = g.roughness.at(x, y);
            Real metal = g.metallic.at(x, y);

            // forward pieces
            BilinearTaps irr_taps = cubemap_bilinear_taps(env.irradiance.res, n);
            Vec3 irr{0, 0, 0};
            for (int i = 0; i < 4; ++i) irr += env.irradiance.texel(irr_taps.idx[i]) * irr_taps.w[i];

            Real r = clamp(rough, 0.0, 1.0);
            // subgradient 1 on the closed interval so clamped params can move back
            Real r_inside = (rough >= 0.0 && rough <= 1.0) ? 1.0 : 0.0;
            Vec3 r_mirror = reflect(v, n);
            Real alpha_g = ggx_alpha(r);
            Vec3 bent = n + (r_mirror - n) * (1.0 - alpha_g);
            Real bent_len = length(bent);
            Vec3 r_dir = bent / bent_len;
            Real dalpha_dr = (r * r > 1e-3 ? 2.0 * r : 0.0) * r_inside;
            // d r_dir / d roughness through the bend and renormalization
            Vec3 dbent_dr = (r_mirror - n) * (-dalpha_dr);
            Vec3 drdir_dr = (dbent_dr - r_dir * dot(r_dir, dbent_dr)) / bent_len;
            Real lf = r * (mip_count - 1);
            int l0 = std::max(0, std::min(int(lf), mip_count - 2));
            int l1 = std::min(l0 + 1, mip_count - 1);
            Real f = lf - l0;
            BilinearTaps t0 = cubemap_bilinear_taps(env.mips[l0].res, r_dir);
            BilinearTaps t1 = cubemap_bilinear_taps(env.mips[l1].res, r_dir);
            CubeSampleGrad g0 = cubemap_sample_bilinear_grad(env.mips[l0], r_dir);
            CubeSampleGrad g1 = cubemap_sample_bilinear_grad(env.mips[l1], r_dir);
            Vec3 p0 = g0.value, p1 = g1.value;
            Vec3 pf = p0 * (1.0 - f) + p1 * f;
            LutSample ab = sample_lut_grad(lut, n_dot_v, r);
            Vec3 f0 = Vec3{kDielectricF0, kDielectricF0, kDielectricF0} * (1.0 - metal) +
                      albedo * metal;

            // diffuse = (1 - m) * albedo * irr
            Vec3 d_albedo = (1.0 - metal) * irr * d_shade;
            Real d_metal = -dot(albedo * irr, d_shade);
            Vec3 d_irr = (1.0 - metal) * albedo * d_shade;

            // specular = pf * (f0 * scale + bias)
            Vec3 fac = f0 * ab.scale + Vec3{ab.bias, ab.bias, ab.bias};
            Vec3 d_pf = fac * d_shade;
            Vec3 d_f0 = pf * d_shade * ab.scale;
            Real d_scale = dot(f0, pf * d_shade);
            Real d_bias = (pf * d_shade).x + (pf * d_shade).y + (pf * d_shade).z;
            d_albedo += d_f0 * metal;
            d_metal += dot(d_f0, albedo - Vec3{kDielectricF0, kDielectricF0, kDielectricF0});

            // roughness: LUT lookup, the trilinear mip coordinate, and the
            // dominant-direction bend
            Real d_r = (d_scale * ab.dscale_dr + d_bias * ab.dbias_dr) * r_inside;
            d_r += dot(p1 - p0, d_pf) * (mip_count - 1) * r_inside;
            for (int k = 0; k < 3; ++k) {
                Vec3 dlevel = g0.ddir[k] * (1.0 - f) + g1.ddir[k] * f;
                d_r += d_pf[k] * dot(dlevel, drdir_dr);
            }

            sg.albedo.set_rgb(x, y, d_albedo);
            sg.roughness.at(x, y) = d_r;
            sg.metallic.at(x, y) = d_metal;

            if (want_env) {
                for (int i = 0; i < 4; ++i) {
                    irr_adj.texel(irr_taps.idx[i]) += d_irr * irr_taps.w[i];
                    mip_adjs[l0].texel(t0.idx[i]) += d_pf * ((1.0 - f) * t0.w[i]);
                    mip_adjs[l1].texel(t1.idx[i]) += d_pf * (f * t1.w[i]);
                }
            }
        }
    if (want_env) {
        sg.env_base = Cubemap(env.base_res);
        env.base_adjoint(irr_adj, mip_adjs, sg.env_base);
    }
    return sg;
}

// ---------------------------------------------------------------------------
// Monte-Carlo reference integrator: full microfacet BRDF against the raw base
// cubemap, multiple importance sampling between the cosine and GGX lobes. The
// diffuse lobe is Fresnel-coupled so the white furnace bound holds.

inline Vec3 mc_reference_shade(const ShadePoint& pt, const Cubemap& base, int n_samples,
                               uint64_t seed = 0) {
    require(n_samples >= 1024, "mc_samples", "reference integrator needs >= 1024 samples");
    Vec3 n = pt.normal, v = pt.view;
    Real n_dot_v = std::max(dot(n, v), 1e-6);
    Vec3 f0 = Vec3{kDielectricF0, kDielectricF0, kDielectricF0} * (1.0 - pt.metallic) +
              pt.albedo * pt.metallic;
    Real alpha = ggx_alpha(pt.roughness);
    Vec3 t1, t2;
    onb(n, t1, t2);
    Rng rng(seed);
    Vec3 acc{0, 0, 0};

    auto eval = [&](const Vec3& l) -> Vec3 {
        Real n_dot_l = dot(n, l);
        if (n_dot_l <= 0) return Vec3{0, 0, 0};
        Vec3 h = normalize(l + v);
        Real v_dot_h = std::max(dot(v, h), 1e-9);
        Real n_dot_h = clamp(dot(n, h), 0.0, 1.0);
        Vec3 fr = fresnel_schlick(v_dot_h, f0);
        Real d = ggx_d_from_alpha(n_dot_h, alpha);
        Real geo = smith_g(n_dot_v, n_dot_l, pt.roughness);
        Vec3 spec = fr * (d * geo / (4.0 * n_dot_v * n_dot_l));
        // dielectric Fresnel coupling keeps the furnace bound; metals are
        // already handled by the (1 - m) factor
        Real fd = fresnel_schlick(v_dot_h, kDielectricF0);
        Vec3 diff = ((1.0 - pt.metallic) * (1.0 - fd) / kPi) * pt.albedo;
        Vec3 radiance = cubemap_sample_nearest(base, l);
        Real pdf_cos = n_dot_l / kPi;
        Real pdf_ggx = d * n_dot_h / (4.0 * v_dot_h);
        // one-sample-per-technique balance heuristic
        return (diff + spec) * radiance * (n_dot_l / std::max(pdf_cos + pdf_ggx, 1e-12));
    };

    for (int i = 0; i < n_samples; ++i) {
        Vec2 u1{rng.uniform(), rng.uniform()};
        Vec2 u2{rng.uniform(), rng.uniform()};
        acc += eval(tangent_to_world(sample_cosine(u1), t1, t2, n));
        Vec3 h = tangent_to_world(sample_ggx_h(u2, alpha), t1, t2, n);
        Vec3 l = h * (2.0 * dot(v, h)) - v;
        acc += eval(l);
    }
    return acc / Real(n_samples);
}

// Deferred Monte-Carlo render with the same plane conventions as
// shade_deferred; this is how synthetic captures are produced.
inline Image mc_reference_render(const GBuffer& g, const Camera& cam, const Cubemap& base,
                                 int n_samples, uint64_t seed = 0,
                                 const Vec3& background = Vec3{0, 0, 0}) {
    Image out(g.width, g.height, 3, ColorSpace::Linear);
    Mat3 cam_rot_t = cam.rotation.transposed();
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x) {
            Real a = g.alpha.at(x, y);
            if (a <= 0) {
                out.set_rgb(x, y, background);
                continue;
            }
            Vec3 n_cam = g.normal.rgb(x, y);
            Real nlen = length(n_cam);
            if (nlen < 1e-9) {
                out.set_rgb(x, y, background * (1.0 - a));
                continue;
            }
            ShadePoint pt;
            pt.normal = cam_rot_t * (n_cam / nlen);
            pt.view = -cam.pixel_ray(x, y).dir;
            pt.albedo = g.albedo.rgb(x, y);
            pt.roughness = g.roughness.at(x, y);
            pt.metallic = g.metallic.at(x, y);
            uint64_t pix_seed = hash_combine(seed, (uint64_t(y) << 24) | uint64_t(x));
            Vec3 c = mc_reference_shade(pt, base, n_samples, pix_seed);
            out.set_rgb(x, y, c * a + background * (1.0 - a));
        }
    return out;
}

}  // namespace glint
