#pragma once

#include <chrono>
#include <functional>
#include <iostream>
#include <numeric>

#include "glint/envlight.hpp"
#include "glint/losses.hpp"
#include "glint/metrics.hpp"
#include "glint/priors.hpp"
#include "glint/rasterizer.hpp"
#include "glint/scene.hpp"
#include "glint/shading.hpp"

namespace glint {

// ---------------------------------------------------------------------------
// Adaptive-moment update

struct OptimState {
    std::vector<Real> m, v;
    int64_t step = 0;

    void resize(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

// Bias-corrected update; non-finite gradient coordinates are skipped and
// counted. Returns the number of skipped coordinates.
inline size_t adam_step(std::vector<Real>& params, const std::vector<Real>& grads,
                        OptimState& st, const std::function<Real(size_t)>& lr_of,
                        Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8) {
    require(params.size() == grads.size() && params.size() == st.m.size(), "shape_mismatch",
            "adam buffers disagree in size");
    st.step += 1;
    Real bc1 = 1.0 - std::pow(beta1, Real(st.step));
    Real bc2 = 1.0 - std::pow(beta2, Real(st.step));
    size_t skipped = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        Real g = grads[i];
        if (!std::isfinite(g)) {
            ++skipped;
            continue;
        }
        st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
        st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
        Real mhat = st.m[i] / bc1;
        Real vhat = st.v[i] / bc2;
        params[i] -= lr_of(i) * mhat / (std::sqrt(vhat) + eps);
    }
    return skipped;
}

// ---------------------------------------------------------------------------
// Training data

struct TrainView {
    Camera camera;
    Image target_srgb;               // capture in sRGB [0,1]
    Image depth_prior;               // empty if absent
    Image normal_prior;              // camera space
    Image albedo_prior;              // linear RGB
    std::optional<Image> gt_alpha;
};

struct TrainData {
    std::vector<TrainView> views;
    DatasetManifest manifest;  // retains lift views and paths
};

inline TrainData load_train_data(const std::string& manifest_path) {
    TrainData data;
    data.manifest = load_manifest(manifest_path);
    for (size_t v = 0; v < data.manifest.views.size(); ++v) {
        const auto& rec = data.manifest.views[v];
        TrainView tv;
        tv.camera = rec.camera;
        Image img = detail::load_image_any(detail::resolve(data.manifest.root, rec.image));
        require(img.width == rec.camera.width && img.height == rec.camera.height,
                "prior_invalid", "capture dimensions do not match the camera");
        if (img.channels > 3) {
            Image rgb(img.width, img.height, 3, img.color_space);
            for (size_t p = 0; p < img.pixel_count(); ++p)
                for (int c = 0; c < 3; ++c)
                    rgb.values[p * 3 + c] = img.values[p * img.channels + c];
            img = std::move(rgb);
        }
        tv.target_srgb = img.color_space == ColorSpace::Srgb ? img : linear_to_srgb(img);
        PriorPack pack = load_prior_pack(data.manifest, v);
        tv.depth_prior = std::move(pack.mono_depth);
        tv.normal_prior = std::move(pack.mono_normal);
        tv.albedo_prior = std::move(pack.iid_albedo);
        tv.gt_alpha = std::move(pack.gt_alpha);
        data.views.push_back(std::move(tv));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Scene initialization: unproject the depth priors, or fall back to a seeded
// cube when no priors exist.

inline Scene init_scene_from_views(const std::vector<TrainView>& views, int target_count,
                                   int env_res, uint64_t seed) {
    Scene scene;
    scene.env_base = Cubemap(env_res, Vec3{0.5, 0.5, 0.5});
    Rng rng(hash_combine(seed, 0xC0FFEE));
    std::vector<GaussianSurfel> candidates;
    for (const auto& tv : views) {
        if (tv.depth_prior.empty()) continue;
        const Camera& cam = tv.camera;
        Vec3 origin = cam.position();
        int stride = std::max(1, int(std::sqrt(double(cam.width) * cam.height *
                                               views.size() / (4.0 * target_count))));
        for (int y = 0; y < cam.height; y += stride)
            for (int x = 0; x < cam.width; x += stride) {
                size_t p = size_t(y) * cam.width + x;
                if (tv.gt_alpha && tv.gt_alpha->values[p] < 0.5) continue;
                Real d = tv.depth_prior.values[p];
                if (!(d > 1e-6)) continue;
                Vec3 dir = cam.dir_to_world(cam.pixel_dir_camera(x, y));
                GaussianSurfel s;
                s.center = origin + dir * d;
                Vec3 n_world{0, 0, 1};
                if (!tv.normal_prior.empty()) {
                    Vec3 n_cam = tv.normal_prior.rgb(x, y);
                    if (length_sq(n_cam) > 1e-12)
                        n_world = cam.rotation.transposed() * normalize(n_cam);
                }
                s.rotation = quat_from_normal(n_world);
                Real footprint = 0.75 * d * stride / cam.fx;
                s.scale = {footprint, footprint};
                s.opacity = 0.5;
                s.radiance = {srgb_decode(tv.target_srgb.values[p * 3]),
                              srgb_decode(tv.target_srgb.values[p * 3 + 1]),
                              srgb_decode(tv.target_srgb.values[p * 3 + 2])};
                s.albedo = clamp(s.radiance, 0.01, 1.0);
                candidates.push_back(s);
            }
    }
    if (candidates.empty()) {
        for (int i = 0; i < target_count; ++i) {
            GaussianSurfel s;
            s.center = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
            s.rotation = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}
                             .normalized();
            s.scale = {0.05, 0.05};
            s.opacity = 0.3;
            s.radiance = {0.5, 0.5, 0.5};
            candidates.push_back(s);
        }
    }
    // seeded subsample down to the target budget
    for (size_t i = candidates.size(); i > 1; --i)
        std::swap(candidates[i - 1], candidates[rng.uniform_index(uint32_t(i))]);
    if (int(candidates.size()) > target_count) candidates.resize(target_count);
    scene.surfels = std::move(candidates);
    scene.apply_constraints();
    return scene;
}

// ---------------------------------------------------------------------------
// Per-view loss evaluation (value + packed gradients); shared between the
// training loops and the gradient audit so the audit probes the real path.

enum LossFlags : uint32_t {
    kLossColor = 1u << 0,
    kLossDC = 1u << 1,
    kLossDR = 1u << 2,
    kLossNC = 1u << 3,
    kLossNS = 1u << 4,
    kLossBCE = 1u << 5,
    kLossDD = 1u << 6,
    kLossICC = 1u << 7,
    kLossIID = 1u << 8,
    kLossTV = 1u << 9,
    kLossStage1 = kLossColor | kLossDC | kLossDR | kLossNC | kLossNS | kLossBCE | kLossDD,
    kLossStage2 = kLossColor | kLossICC | kLossIID | kLossTV,
};

inline const char* loss_name(uint32_t flag) {
    switch (flag) {
        case kLossColor: return "color";
        case kLossDC: return "depth_pearson";
        case kLossDR: return "depth_ranking";
        case kLossNC: return "normal_consistency";
        case kLossNS: return "normal_smoothness";
        case kLossBCE: return "alpha_bce";
        case kLossDD: return "depth_distortion";
        case kLossICC: return "icc";
        case kLossIID: return "iid";
        case kLossTV: return "env_tv";
        default: return "unknown";
    }
}

namespace detail {

// 0/1 mask: gt alpha when present, else the rendered alpha plane.
inline Image loss_mask(const TrainView& view, const Image& alpha_plane) {
    Image mask(alpha_plane.width, alpha_plane.height, 1, ColorSpace::Data);
    const Image& src = view.gt_alpha ? *view.gt_alpha : alpha_plane;
    for (size_t i = 0; i < mask.values.size(); ++i)
        mask.values[i] = src.values[i] >= 0.5 ? 1.0 : 0.0;
    return mask;
}

inline void pack_geometry_grads(const Scene& scene, const RenderGrad& rg,
                                std::vector<Real>& out) {
    out.assign(scene.surfels.size() * kGeomBlock, 0.0);
    for (size_t i = 0; i < scene.surfels.size(); ++i) {
        const SurfelGrad& g = rg.surfels[i];
        const GaussianSurfel& s = scene.surfels[i];
        size_t b = i * kGeomBlock;
        out[b + 0] = g.center.x;
        out[b + 1] = g.center.y;
        out[b + 2] = g.center.z;
        for (int k = 0; k < 4; ++k) out[b + 3 + k] = g.rotation[k];
        out[b + 7] = g.scale.x * s.scale.x;  // chain to log-scale coordinates
        out[b + 8] = g.scale.y * s.scale.y;
        out[b + 9] = g.opacity;
        out[b + 10] = g.radiance.x;
        out[b + 11] = g.radiance.y;
        out[b + 12] = g.radiance.z;
    }
}

}  // namespace detail

struct Stage1Eval {
    LossReport report;
    std::vector<Real> grads;  // geometry-packed layout
    Image render_linear;
    Real degenerate_pearson = 0;
};

inline Stage1Eval eval_stage1(const Scene& scene, const TrainView& view,
                              const TrainConfig& cfg, uint64_t ranking_seed,
                              uint32_t enabled, bool want_grads,
                              const RasterParams& rp = {}) {
    const Stage1Config& c1 = cfg.stage1;
    Stage1Eval ev;
    uint32_t planes = kPlaneRadiance;
    bool bce_on = (enabled & kLossBCE) && view.gt_alpha.has_value() && c1.lambda_bce > 0;
    bool dc_on = (enabled & kLossDC) && !view.depth_prior.empty() && c1.lambda_dc > 0;
    bool dr_on = (enabled & kLossDR) && !view.depth_prior.empty() && c1.lambda_dr > 0;
    bool nc_on = (enabled & kLossNC) && c1.lambda_nc > 0;
    bool ns_on = (enabled & kLossNS) && !view.normal_prior.empty() && c1.lambda_ns > 0;
    bool dd_on = (enabled & kLossDD) && c1.lambda_dd > 0;
    if (dc_on || dr_on || nc_on) planes |= kPlaneDepth;
    if (nc_on || ns_on) planes |= kPlaneNormal;
    if (dd_on) planes |= kPlanePerRay;

    const Camera& cam = view.camera;
    GBuffer g = rasterize(scene, cam, planes, rp);

    // stage-1 appearance: the flat radiance proxy over the background
    ev.render_linear = Image(cam.width, cam.height, 3, ColorSpace::Linear);
    for (size_t p = 0; p < ev.render_linear.pixel_count(); ++p) {
        Real a = g.alpha.values[p];
        for (int c = 0; c < 3; ++c)
            ev.render_linear.values[p * 3 + c] =
                g.radiance.values[p * 3 + c] + cfg.background[c] * (1.0 - a);
    }

    Image mask = detail::loss_mask(view, g.alpha);
    Image adj_render(cam.width, cam.height, 3, ColorSpace::Data);
    Image adj_depth(cam.width, cam.height, 1, ColorSpace::Data);
    Image adj_normal(cam.width, cam.height, 3, ColorSpace::Data);
    Image adj_alpha(cam.width, cam.height, 1, ColorSpace::Data);
    std::vector<std::vector<Real>> dd_w, dd_z;

    if (enabled & kLossColor) {
        Real v = l_color(ev.render_linear, view.target_srgb, c1.lambda_color_ssim,
                         want_grads ? &adj_render : nullptr, 1.0);
        ev.report.add("color", v, 1.0);
    }
    if (dc_on) {
        PearsonResult pr = pearson_depth_loss(g.depth, view.depth_prior, mask,
                                              want_grads ? &adj_depth : nullptr,
                                              c1.lambda_dc);
        ev.report.add("depth_pearson", pr.loss, c1.lambda_dc);
        if (pr.degenerate) ev.degenerate_pearson += 1;
    }
    if (dr_on) {
        Real v = depth_ranking_loss(g.depth, view.depth_prior, mask, ranking_seed,
                                    want_grads ? &adj_depth : nullptr, c1.lambda_dr);
        ev.report.add("depth_ranking", v, c1.lambda_dr);
    }
    if (nc_on) {
        Image n_from_depth = depth_to_normal(g.depth, g.alpha, cam);
        Image adj_ref(cam.width, cam.height, 3, ColorSpace::Data);
        Real v = normal_consistency_loss(g.normal, n_from_depth, mask,
                                         want_grads ? &adj_normal : nullptr,
                                         want_grads ? &adj_ref : nullptr, c1.lambda_nc);
        ev.report.add("normal_consistency", v, c1.lambda_nc);
        if (want_grads) {
            Image d = depth_to_normal_grad(g.depth, g.alpha, cam, adj_ref);
            for (size_t i = 0; i < adj_depth.values.size(); ++i)
                adj_depth.values[i] += d.values[i];
        }
    }
    if (ns_on) {
        Real v = normal_smoothness_loss(g.normal, view.normal_prior, mask,
                                        want_grads ? &adj_normal : nullptr, c1.lambda_ns);
        ev.report.add("normal_smoothness", v, c1.lambda_ns);
    }
    if (bce_on) {
        Real v = bce_alpha_loss(g.alpha, *view.gt_alpha,
                                want_grads ? &adj_alpha : nullptr, c1.lambda_bce);
        ev.report.add("alpha_bce", v, c1.lambda_bce);
    }
    if (dd_on) {
        Real v = depth_distortion(g);
        ev.report.add("depth_distortion", v, c1.lambda_dd);
        if (want_grads) depth_distortion_grad(g, c1.lambda_dd, dd_w, dd_z);
    }

    if (want_grads) {
        // the background mix feeds the alpha plane: d render / d alpha = -bg
        if (cfg.background.x != 0 || cfg.background.y != 0 || cfg.background.z != 0)
            for (size_t p = 0; p < adj_alpha.values.size(); ++p)
                adj_alpha.values[p] += -(cfg.background.x * adj_render.values[p * 3] +
                                         cfg.background.y * adj_render.values[p * 3 + 1] +
                                         cfg.background.z * adj_render.values[p * 3 + 2]);
        GBufferAdjoint adj;
        adj.radiance = &adj_render;  // radiance plane carries the color adjoint
        if (dc_on || dr_on || nc_on) adj.depth = &adj_depth;
        if (nc_on || ns_on) adj.normal = &adj_normal;
        adj.alpha = &adj_alpha;
        if (dd_on) {
            adj.per_ray_dweight = &dd_w;
            adj.per_ray_dz = &dd_z;
        }
        RenderGrad rg = rasterize_grad(scene, cam, adj, rp, true);
        detail::pack_geometry_grads(scene, rg, ev.grads);
    }
    return ev;
}

struct Stage2Eval {
    LossReport report;
    std::vector<Real> grads;  // material-packed layout
    Image render_linear;
};

inline Stage2Eval eval_stage2(const Scene& scene, EnvLight& env, const TrainView& view,
                              const TrainConfig& cfg, int iteration, uint32_t enabled,
                              bool want_grads, const RasterParams& rp = {},
                              const Image* lut_override = nullptr) {
    const Stage2Config& c2 = cfg.stage2;
    const Image& lut = lut_override ? *lut_override : default_brdf_lut();
    Stage2Eval ev;
    env.rebuild_training(scene.env_base);

    uint32_t planes = kPlanesStage2;
    const Camera& cam = view.camera;
    GBuffer g = rasterize(scene, cam, planes, rp);
    ev.render_linear = shade_deferred(g, cam, env, lut, cfg.background);

    Image mask = detail::loss_mask(view, g.alpha);
    Image adj_render(cam.width, cam.height, 3, ColorSpace::Data);
    Image adj_albedo(cam.width, cam.height, 3, ColorSpace::Data);
    Image adj_rough(cam.width, cam.height, 1, ColorSpace::Data);
    Image adj_metal(cam.width, cam.height, 1, ColorSpace::Data);
    Cubemap adj_env(scene.env_base.res);

    if (enabled & kLossColor) {
        Real v = l_color(ev.render_linear, view.target_srgb, cfg.stage1.lambda_color_ssim,
                         want_grads ? &adj_render : nullptr, 1.0);
        ev.report.add("color", v, 1.0);
    }
    if ((enabled & kLossICC) && c2.lambda_icc > 0 && g.seg_classes > 1) {
        // per-pixel sRGB re-render error feeds L_e and stays differentiable
        Image err(cam.width, cam.height, 1, ColorSpace::Data);
        for (size_t p = 0; p < err.pixel_count(); ++p) {
            Real e = 0;
            for (int c = 0; c < 3; ++c)
                e += std::abs(srgb_encode_ext(ev.render_linear.values[p * 3 + c]) -
                              view.target_srgb.values[p * 3 + c]);
            err.values[p] = e / 3.0;
        }
        auto masks = segment_masks(g.seg);
        IccAdjoints ia;
        if (want_grads) {
            ia.roughness = Image(cam.width, cam.height, 1, ColorSpace::Data);
            ia.metallic = Image(cam.width, cam.height, 1, ColorSpace::Data);
            ia.albedo = Image(cam.width, cam.height, 3, ColorSpace::Data);
            ia.error = Image(cam.width, cam.height, 1, ColorSpace::Data);
        }
        Real v = icc_loss(masks, g.roughness, g.metallic, g.albedo, err,
                          cfg.gamma_exponent_scale, cfg.gamma_exponent_clamp,
                          want_grads ? &ia : nullptr, c2.lambda_icc);
        ev.report.add("icc", v, c2.lambda_icc);
        if (want_grads) {
            for (size_t i = 0; i < adj_rough.values.size(); ++i) {
                adj_rough.values[i] += ia.roughness.values[i];
                adj_metal.values[i] += ia.metallic.values[i];
            }
            for (size_t i = 0; i < adj_albedo.values.size(); ++i)
                adj_albedo.values[i] += ia.albedo.values[i];
            // chain the error adjoint into the shaded image
            for (size_t p = 0; p < err.pixel_count(); ++p) {
                Real de = ia.error.values[p];
                if (de == 0) continue;
                for (int c = 0; c < 3; ++c) {
                    Real lin = ev.render_linear.values[p * 3 + c];
                    Real d = srgb_encode_ext(lin) - view.target_srgb.values[p * 3 + c];
                    Real sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                    adj_render.values[p * 3 + c] +=
                        de * sg * srgb_encode_ext_deriv(lin) / 3.0;
                }
            }
        }
    }
    if ((enabled & kLossIID) && c2.lambda_iid > 0 && !view.albedo_prior.empty()) {
        Real v = iid_loss(g.albedo, view.albedo_prior, mask, iteration, c2.iters,
                          want_grads ? &adj_albedo : nullptr, c2.lambda_iid);
        ev.report.add("iid", v, c2.lambda_iid);
    }
    if ((enabled & kLossTV) && c2.lambda_tv > 0) {
        Real v = env_tv_loss(scene.env_base, want_grads ? &adj_env : nullptr, c2.lambda_tv);
        ev.report.add("env_tv", v, c2.lambda_tv);
    }

    if (want_grads) {
        ShadeGrad sg = shade_deferred_grad(g, cam, env, lut, adj_render, true);
        for (size_t i = 0; i < adj_albedo.values.size(); ++i)
            adj_albedo.values[i] += sg.albedo.values[i];
        for (size_t i = 0; i < adj_rough.values.size(); ++i) {
            adj_rough.values[i] += sg.roughness.values[i];
            adj_metal.values[i] += sg.metallic.values[i];
        }
        for (size_t t = 0; t < adj_env.texel_count(); ++t)
            adj_env.texel(t) += sg.env_base.texel(t);

        GBufferAdjoint adj;
        adj.albedo = &adj_albedo;
        adj.roughness = &adj_rough;
        adj.metallic = &adj_metal;
        RenderGrad rg = rasterize_grad(scene, cam, adj, rp, false);
        ev.grads.assign(scene.surfels.size() * kMatBlock + adj_env.texel_count() * 3, 0.0);
        for (size_t i = 0; i < scene.surfels.size(); ++i) {
            size_t b = i * kMatBlock;
            ev.grads[b + 0] = rg.surfels[i].albedo.x;
            ev.grads[b + 1] = rg.surfels[i].albedo.y;
            ev.grads[b + 2] = rg.surfels[i].albedo.z;
            ev.grads[b + 3] = rg.surfels[i].roughness;
            ev.grads[b + 4] = rg.surfels[i].metallic;
        }
        size_t off = scene.surfels.size() * kMatBlock;
        for (size_t t = 0; t < adj_env.texel_count(); ++t) {
            ev.grads[off + t * 3 + 0] = adj_env.texel(t).x;
            ev.grads[off + t * 3 + 1] = adj_env.texel(t).y;
            ev.grads[off + t * 3 + 2] = adj_env.texel(t).z;
        }
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Densify / prune with optimizer-state surgery

struct DensifyStats {
    std::vector<Real> grad_norm_sum;
    std::vector<int> touched;

    void resize(size_t n) {
        grad_norm_sum.assign(n, 0.0);
        touched.assign(n, 0);
    }
    void accumulate(const std::vector<Real>& geom_grads) {
        for (size_t i = 0; i < grad_norm_sum.size(); ++i) {
            Vec3 g{geom_grads[i * kGeomBlock], geom_grads[i * kGeomBlock + 1],
                   geom_grads[i * kGeomBlock + 2]};
            Real n = length(g);
            if (n > 0) {
                grad_norm_sum[i] += n;
                touched[i] += 1;
            }
        }
    }
};

inline void densify_prune(Scene& scene, DensifyStats& stats, OptimState& state,
                          const OptimConfig& cfg) {
    size_t n = scene.surfels.size();
    std::vector<GaussianSurfel> next;
    std::vector<Real> next_m, next_v;
    next.reserve(n);
    auto copy_block = [&](size_t i, bool zero) {
        size_t b = i * kGeomBlock;
        for (int k = 0; k < kGeomBlock; ++k) {
            next_m.push_back(zero ? 0.0 : state.m[b + k]);
            next_v.push_back(zero ? 0.0 : state.v[b + k]);
        }
    };
    for (size_t i = 0; i < n; ++i) {
        const GaussianSurfel& s = scene.surfels[i];
        if (s.opacity < cfg.prune_opacity) continue;  // prune
        next.push_back(s);
        copy_block(i, false);
        Real avg = stats.touched[i] ? stats.grad_norm_sum[i] / stats.touched[i] : 0.0;
        // cap counts the originals still pending, so the total never exceeds it
        bool room = next.size() + (n - 1 - i) < size_t(cfg.max_surfels);
        if (avg > cfg.densify_grad_threshold && room) {
            GaussianSurfel clone = s;
            SurfelFrame f = surfel_frame(s);
            clone.center += f.t_u * (0.5 * s.scale.x);
            next.push_back(clone);
            copy_block(i, true);
        }
    }
    scene.surfels = std::move(next);
    state.m = std::move(next_m);
    state.v = std::move(next_v);
    stats.resize(scene.surfels.size());
}

inline void reset_opacity(Scene& scene, OptimState& state, Real ceiling = 0.1) {
    for (size_t i = 0; i < scene.surfels.size(); ++i) {
        scene.surfels[i].opacity = std::min(scene.surfels[i].opacity, ceiling);
        state.m[i * kGeomBlock + 9] = 0.0;
        state.v[i * kGeomBlock + 9] = 0.0;
    }
}

// ---------------------------------------------------------------------------
// Training loops

struct TrainCallbacks {
    // called after each iteration with the loss report
    std::function<void(int, const LossReport&)> on_iteration;
};

namespace detail {

inline Real group_lr(const OptimConfig& oc, ParamGroup g, Real center_decay_factor) {
    switch (g) {
        case ParamGroup::Center: return oc.lr_center * center_decay_factor;
        case ParamGroup::Rotation: return oc.lr_rotation;
        case ParamGroup::Scale: return oc.lr_scale;
        case ParamGroup::Opacity: return oc.lr_opacity;
        case ParamGroup::Material: return oc.lr_material;
        case ParamGroup::Env: return oc.lr_env;
    }
    return 1e-3;
}

inline void log_line(std::ostream* log, int iter, int stage, int view,
                     const LossReport& rep, size_t surfels, double ms) {
    if (!log) return;
    nlohmann::json j;
    j["iter"] = iter;
    j["stage"] = stage;
    j["view"] = view;
    nlohmann::json terms;
    for (const auto& [k, v] : rep.terms) terms[k] = v;
    j["losses"] = terms;
    j["total"] = rep.total;
    j["surfels"] = surfels;
    j["ms"] = ms;
    (*log) << j.dump() << "\n";
}

inline std::vector<int> epoch_order(size_t count, Rng& rng) {
    std::vector<int> order(count);
    std::iota(order.begin(), order.end(), 0);
    for (size_t i = count; i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(uint32_t(i))]);
    return order;
}

// Orbit cameras for guidance renders; degenerate scenes orbit a unit box.
inline std::vector<Camera> guidance_orbits(const Scene& scene, int count,
                                           const Camera& reference) {
    Aabb b = scene.bounds();
    if (b.diagonal() < 1e-6) {
        b.lo = b.center() - Vec3{0.5, 0.5, 0.5};
        b.hi = b.center() + Vec3{0.5, 0.5, 0.5};
    }
    return sample_orbit_views(b, count, reference);
}

}  // namespace detail

inline void train_stage1(Scene& scene, const TrainData& data, const TrainConfig& cfg,
                         std::ostream* log = nullptr, const std::string& ckpt_dir = "",
                         const RasterParams& rp = {},
                         const TrainCallbacks& callbacks = {}) {
    require(!data.views.empty(), "bad_args", "stage 1 needs at least one view");
    const Stage1Config& c1 = cfg.stage1;
    for (const auto& v : data.views) {
        if (c1.lambda_dc > 0 || c1.lambda_dr > 0)
            require(!v.depth_prior.empty(), "prior_missing",
                    "depth priors are required by the enabled depth losses");
        if (c1.lambda_ns > 0)
            require(!v.normal_prior.empty(), "prior_missing",
                    "normal priors are required by the normal smoothness loss");
    }
    if (scene.surfels.empty())
        scene = init_scene_from_views(data.views, cfg.optim.init_surfels, 128,
                                      cfg.optim.seed);

    OptimState state;
    state.resize(scene.surfels.size() * kGeomBlock);
    DensifyStats stats;
    stats.resize(scene.surfels.size());
    GuidanceHook hook{cfg.guidance_spool, cfg.guidance_timeout_seconds};
    Rng shuffle_rng(hash_combine(cfg.optim.seed, 0x511701));
    Rng orbit_rng(hash_combine(cfg.optim.seed, 0x0B1701));
    std::vector<int> order;

    for (int iter = 0; iter < c1.iters; ++iter) {
        auto t0 = std::chrono::steady_clock::now();
        if (iter % data.views.size() == 0)
            order = detail::epoch_order(data.views.size(), shuffle_rng);
        int vi = order[iter % data.views.size()];
        const TrainView& view = data.views[vi];

        Stage1Eval ev = eval_stage1(scene, view, cfg, hash_combine(cfg.optim.seed, iter),
                                    kLossStage1, true, rp);

        // external diffusion guidance on a novel orbit view
        if (hook.enabled() && iter >= c1.sds_start && c1.lambda_sds > 0) {
            auto orbits = detail::guidance_orbits(scene, cfg.orbit_views, view.camera);
            int oi = int(orbit_rng.uniform_index(uint32_t(orbits.size())));
            const Camera& ocam = orbits[oi];
            GBuffer og = rasterize(scene, ocam, kPlaneRadiance, rp);
            Image orender(ocam.width, ocam.height, 3, ColorSpace::Linear);
            for (size_t p = 0; p < orender.pixel_count(); ++p)
                for (int c = 0; c < 3; ++c)
                    orender.values[p * 3 + c] = og.radiance.values[p * 3 + c] +
                                                cfg.background[c] *
                                                    (1.0 - og.alpha.values[p]);
            GuidanceRequest req{iter, 1, oi, -1, ocam.width, ocam.height};
            if (auto adj = hook.request(orender, req)) {
                Image adj_rad = *adj;
                for (Real& v : adj_rad.values) v *= c1.lambda_sds;
                Image adj_alpha(ocam.width, ocam.height, 1, ColorSpace::Data);
                for (size_t p = 0; p < adj_alpha.values.size(); ++p)
                    adj_alpha.values[p] =
                        -(cfg.background.x * adj_rad.values[p * 3] +
                          cfg.background.y * adj_rad.values[p * 3 + 1] +
                          cfg.background.z * adj_rad.values[p * 3 + 2]);
                GBufferAdjoint ga;
                ga.radiance = &adj_rad;
                ga.alpha = &adj_alpha;
                RenderGrad rg = rasterize_grad(scene, ocam, ga, rp, true);
                std::vector<Real> extra;
                detail::pack_geometry_grads(scene, rg, extra);
                for (size_t i = 0; i < ev.grads.size(); ++i) ev.grads[i] += extra[i];
            }
        }

        stats.accumulate(ev.grads);

        ParamVector pv = pack_params(scene, Stage::Geometry);
        Real decay = std::pow(cfg.optim.lr_center_decay, Real(iter) / Real(c1.iters));
        adam_step(pv.values, ev.grads, state, [&](size_t i) {
            return detail::group_lr(cfg.optim, pv.layout.group_of(i), decay);
        }, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
        unpack_params(pv, scene);
        scene.apply_constraints();

        int it1 = iter + 1;
        if (it1 >= cfg.optim.densify_from && it1 <= cfg.optim.densify_until &&
            it1 % cfg.optim.densify_every == 0) {
            densify_prune(scene, stats, state, cfg.optim);
        }
        if (cfg.optim.opacity_reset_every > 0 && it1 % cfg.optim.opacity_reset_every == 0 &&
            it1 < c1.iters)
            reset_opacity(scene, state);

        double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
        detail::log_line(log, iter, 1, vi, ev.report, scene.surfels.size(), ms);
        if (callbacks.on_iteration) callbacks.on_iteration(iter, ev.report);
        if (!ckpt_dir.empty() && it1 % 1000 == 0)
            save_checkpoint(scene, ckpt_dir + "/stage1_" + std::to_string(it1) + ".bin");
    }
}

struct Stage2Result {
    EnvLight env;  // fully baked at exit
};

inline Stage2Result train_stage2(Scene& scene, const TrainData& data, const TrainConfig& cfg,
                                 std::ostream* log = nullptr,
                                 const std::string& ckpt_dir = "",
                                 const RasterParams& rp = {},
                                 const TrainCallbacks& callbacks = {}) {
    require(!data.views.empty(), "bad_args", "stage 2 needs at least one view");
    const Stage2Config& c2 = cfg.stage2;

    // lifting runs before the first iteration
    if (!data.manifest.lift_views.empty()) lift_and_merge(scene, data.manifest, rp);

    // material/lighting init: albedo from the stage-1 radiance proxy
    for (auto& s : scene.surfels) {
        s.albedo = clamp(s.radiance, 0.0, 1.0);
        s.roughness = 0.5;
        s.metallic = 0.0;
    }
    if (scene.env_base.res == 0) scene.env_base = Cubemap(128);
    scene.env_base.fill(Vec3{0.5, 0.5, 0.5});

    EnvLight env;
    env.prepare_training_ops(scene.env_base, cfg.optim.train_env_samples,
                             hash_combine(cfg.optim.seed, 0xE21F));

    // predetermined lighting set for multi-illumination guidance
    std::vector<EnvLight> mi_envs;
    std::vector<Cubemap> mi_bases;
    GuidanceHook hook{cfg.guidance_spool, cfg.guidance_timeout_seconds};
    if (hook.enabled())
        for (const auto& path : cfg.mi_sds_envs) {
            Image eq = read_exr(path);
            Cubemap base = equirect_to_cubemap(eq, scene.env_base.res);
            EnvLight el;
            el.bake(base);
            mi_bases.push_back(std::move(base));
            mi_envs.push_back(std::move(el));
        }

    OptimState state;
    state.resize(scene.surfels.size() * kMatBlock + scene.env_base.texel_count() * 3);
    Rng shuffle_rng(hash_combine(cfg.optim.seed, 0x511702));
    Rng orbit_rng(hash_combine(cfg.optim.seed, 0x0B1702));
    std::vector<int> order;

    for (int iter = 0; iter < c2.iters; ++iter) {
        auto t0 = std::chrono::steady_clock::now();
        if (iter % data.views.size() == 0)
            order = detail::epoch_order(data.views.size(), shuffle_rng);
        int vi = order[iter % data.views.size()];
        const TrainView& view = data.views[vi];

        Stage2Eval ev = eval_stage2(scene, env, view, cfg, iter, kLossStage2, true, rp);

        if (hook.enabled() && !mi_envs.empty() && iter >= c2.guidance_start &&
            c2.lambda_mi_sds > 0) {
            auto orbits = detail::guidance_orbits(scene, cfg.orbit_views, view.camera);
            int oi = int(orbit_rng.uniform_index(uint32_t(orbits.size())));
            int li = int(orbit_rng.uniform_index(uint32_t(mi_envs.size())));
            const Camera& ocam = orbits[oi];
            GBuffer og = rasterize(scene, ocam, kPlanesStage2, rp);
            Image orender = shade_deferred(og, ocam, mi_envs[li], default_brdf_lut(),
                                           cfg.background);
            GuidanceRequest req{iter, 2, oi, li, ocam.width, ocam.height};
            if (auto adj = hook.request(orender, req)) {
                Image scaled = *adj;
                for (Real& v : scaled.values) v *= c2.lambda_mi_sds;
                ShadeGrad sg = shade_deferred_grad(og, ocam, mi_envs[li],
                                                   default_brdf_lut(), scaled, false);
                GBufferAdjoint ga;
                ga.albedo = &sg.albedo;
                ga.roughness = &sg.roughness;
                ga.metallic = &sg.metallic;
                RenderGrad rg = rasterize_grad(scene, ocam, ga, rp, false);
                for (size_t i = 0; i < scene.surfels.size(); ++i) {
                    size_t b = i * kMatBlock;
                    ev.grads[b + 0] += rg.surfels[i].albedo.x;
                    ev.grads[b + 1] += rg.surfels[i].albedo.y;
                    ev.grads[b + 2] += rg.surfels[i].albedo.z;
                    ev.grads[b + 3] += rg.surfels[i].roughness;
                    ev.grads[b + 4] += rg.surfels[i].metallic;
                }
            }
        }

        ParamVector pv = pack_params(scene, Stage::Material);
        adam_step(pv.values, ev.grads, state, [&](size_t i) {
            return detail::group_lr(cfg.optim, pv.layout.group_of(i), 1.0);
        }, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
        unpack_params(pv, scene);
        scene.apply_constraints();
        for (size_t t = 0; t < scene.env_base.texel_count(); ++t)
            scene.env_base.texel(t) = max(scene.env_base.texel(t), Vec3{0, 0, 0});

        double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
        detail::log_line(log, iter, 2, vi, ev.report, scene.surfels.size(), ms);
        if (callbacks.on_iteration) callbacks.on_iteration(iter, ev.report);
        if (!ckpt_dir.empty() && (iter + 1) % 1000 == 0)
            save_checkpoint(scene, ckpt_dir + "/stage2_" + std::to_string(iter + 1) + ".bin");
    }

    Stage2Result res;
    res.env.bake(scene.env_base);  // full-quality products for the final artifact
    return res;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient audit

struct AuditEntry {
    std::string loss;
    Real max_rel = 0;
    Real p95_rel = 0;
    int checked = 0;
};

inline AuditEntry audit_compare(const std::string& name, const std::vector<Real>& analytic,
                                const std::vector<Real>& fd) {
    AuditEntry e;
    e.loss = name;
    std::vector<Real> rels;
    for (size_t i = 0; i < analytic.size(); ++i) {
        Real a = analytic[i], f = fd[i];
        Real denom = std::max(std::abs(a), std::abs(f));
        rels.push_back(denom < 1e-9 ? 0.0 : std::abs(a - f) / denom);
    }
    std::sort(rels.begin(), rels.end());
    e.checked = int(rels.size());
    if (!rels.empty()) {
        e.max_rel = rels.back();
        e.p95_rel = rels[size_t(std::floor(0.95 * (rels.size() - 1)))];
    }
    return e;
}

// Stage-2 audit iteration: mid-schedule so beta(tau) is informative.
inline int c2_audit_iter(const TrainConfig& cfg) { return cfg.stage2.iters / 4; }

// Compares every enabled loss's packed gradient against central differences on
// randomly sampled coordinates. Deterministic under `seed`.
inline std::vector<AuditEntry> gradient_audit(Scene scene, const TrainView& view,
                                              const TrainConfig& cfg,
                                              const std::vector<uint32_t>& stage1_losses,
                                              const std::vector<uint32_t>& stage2_losses,
                                              int samples_per_loss, uint64_t seed,
                                              const RasterParams& rp = {},
                                              Real h_rel = 1e-4) {
    require(scene.surfels.size() <= 200, "audit_too_big", "audit expects <= 200 surfels");
    require(view.camera.width <= 32 && view.camera.height <= 32, "audit_too_big",
            "audit expects <= 32x32 views");
    std::vector<AuditEntry> out;
    uint64_t ranking_seed = hash_combine(seed, 0xD20001);

    for (uint32_t flag : stage1_losses) {
        Stage1Eval base = eval_stage1(scene, view, cfg, ranking_seed, flag, true, rp);
        ParamVector pv = pack_params(scene, Stage::Geometry);
        Rng rng(hash_combine(seed, flag));
        std::vector<Real> analytic, fd;
        Scene probe = scene;
        for (int k = 0; k < samples_per_loss; ++k) {
            size_t idx = rng.uniform_index(uint32_t(pv.values.size()));
            analytic.push_back(base.grads[idx]);
            Real saved = pv.values[idx];
            Real h = h_rel * std::max(1.0, std::abs(saved));
            pv.values[idx] = saved + h;
            unpack_params(pv, probe);
            Real fp = eval_stage1(probe, view, cfg, ranking_seed, flag, false, rp)
                          .report.total;
            pv.values[idx] = saved - h;
            unpack_params(pv, probe);
            Real fm = eval_stage1(probe, view, cfg, ranking_seed, flag, false, rp)
                          .report.total;
            pv.values[idx] = saved;
            fd.push_back((fp - fm) / (2 * h));
        }
        out.push_back(audit_compare(loss_name(flag), analytic, fd));
    }

    if (!stage2_losses.empty()) {
        EnvLight env;
        env.prepare_training_ops(scene.env_base, cfg.optim.train_env_samples,
                                 hash_combine(seed, 0xE21F));
        for (uint32_t flag : stage2_losses) {
            Stage2Eval base = eval_stage2(scene, env, view, cfg, c2_audit_iter(cfg), flag,
                                          true, rp);
            ParamVector pv = pack_params(scene, Stage::Material);
            Rng rng(hash_combine(seed, 0x5200 + flag));
            std::vector<Real> analytic, fd;
            Scene probe = scene;
            for (int k = 0; k < samples_per_loss; ++k) {
                size_t idx = rng.uniform_index(uint32_t(pv.values.size()));
                analytic.push_back(base.grads[idx]);
                Real saved = pv.values[idx];
                Real h = h_rel * std::max(1.0, std::abs(saved));
                pv.values[idx] = saved + h;
                unpack_params(pv, probe);
                Real fp = eval_stage2(probe, env, view, cfg, c2_audit_iter(cfg), flag,
                                      false, rp)
                              .report.total;
                pv.values[idx] = saved - h;
                unpack_params(pv, probe);
                Real fm = eval_stage2(probe, env, view, cfg, c2_audit_iter(cfg), flag,
                                      false, rp)
                              .report.total;
                pv.values[idx] = saved;
                fd.push_back((fp - fm) / (2 * h));
            }
            out.push_back(audit_compare(std::string(loss_name(flag)) + "(2)", analytic, fd));
        }
    }
    return out;
}

// Bitwise checksum of the geometry block; stage 2 must not move it.
inline uint64_t geometry_checksum(const Scene& scene) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](Real v) {
        uint64_t u;
        std::memcpy(&u, &v, 8);
        h ^= u;
        h *= 1099511628211ull;
    };
    for (const auto& s : scene.surfels) {
        mix(s.center.x);
        mix(s.center.y);
        mix(s.center.z);
        for (int k = 0; k < 4; ++k) mix(s.rotation[k]);
        mix(s.scale.x);
        mix(s.scale.y);
        mix(s.opacity);
    }
    return h;
}

}  // namespace glint
