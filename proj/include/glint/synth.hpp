#pragma once

#include <filesystem>
#include <iomanip>
#include <sstream>

#include "glint/optimizer.hpp"
#include "glint/priors.hpp"
#include "glint/shading.hpp"
#include "glint/synth_fwd.hpp"

namespace glint {

namespace detail {

inline std::string view_tag(int i) {
    std::ostringstream os;
    os << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

// Even point distribution on a sphere (golden-angle spiral).
inline void add_sphere(Scene& scene, const Vec3& center, Real radius, int count,
                       const Vec3& albedo, Real roughness, Real metallic, uint32_t cls) {
    Real golden = kPi * (3.0 - std::sqrt(5.0));
    Real spacing = std::sqrt(4.0 * kPi * radius * radius / count);
    for (int i = 0; i < count; ++i) {
        Real z = 1.0 - 2.0 * (i + 0.5) / count;
        Real r = std::sqrt(std::max(0.0, 1.0 - z * z));
        Real phi = golden * i;
        Vec3 n{r * std::cos(phi), z, r * std::sin(phi)};
        GaussianSurfel s;
        s.center = center + n * radius;
        s.rotation = quat_from_normal(n);
        s.scale = {spacing * 0.75, spacing * 0.75};
        s.opacity = 0.95;
        s.albedo = albedo;
        s.roughness = roughness;
        s.metallic = metallic;
        s.radiance = albedo;  // refined by stage 1 anyway
        s.class_id = cls;
        scene.surfels.push_back(s);
    }
}

struct EnvLobe {
    Vec3 dir;
    Vec3 color;
    Real power;
};

inline Cubemap procedural_env(int res, const std::vector<EnvLobe>& lobes, const Vec3& ambient) {
    Cubemap cm(res);
    for (int f = 0; f < 6; ++f)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                Vec3 d = cubemap_texel_dir(f, x, y, res);
                Vec3 v = ambient;
                for (const auto& l : lobes)
                    v += l.color * std::pow(std::max(0.0, dot(d, normalize(l.dir))), l.power);
                cm.at(f, x, y) = v;
            }
    return cm;
}

inline Cubemap synth_train_env(int res, bool biased) {
    if (biased)
        // single hard warm key light: shading gradients bake into albedo
        // unless the IID prior holds it apart
        return procedural_env(res, {{{0.8, 0.9, 0.3}, {3.5, 2.6, 1.2}, 8.0}},
                              Vec3{0.02, 0.02, 0.03});
    return procedural_env(res,
                          {{{0.3, 0.8, 0.5}, {1.1, 0.95, 0.65}, 3.0},
                           {{-0.7, 0.3, -0.4}, {0.35, 0.45, 0.8}, 3.0},
                           {{0.1, -0.8, 0.4}, {0.25, 0.22, 0.2}, 2.0}},
                          Vec3{0.12, 0.12, 0.14});
}

inline Cubemap synth_holdout_env(int res) {
    return procedural_env(res,
                          {{{-0.5, 0.7, 0.4}, {0.9, 0.4, 0.25}, 4.0},
                           {{0.6, 0.2, -0.7}, {0.2, 0.5, 0.95}, 5.0}},
                          Vec3{0.1, 0.11, 0.13});
}

}  // namespace detail

inline Scene synth_scene(const std::string& preset, int surfels_per_object = 900) {
    Scene scene;
    scene.class_count = 4;  // 0 unassigned + 3 objects
    if (preset == "lambert-spheres") {
        detail::add_sphere(scene, {-0.55, 0.0, 0.0}, 0.42, surfels_per_object,
                           {0.78, 0.24, 0.2}, 1.0, 0.0, 1);
        detail::add_sphere(scene, {0.55, 0.0, 0.15}, 0.42, surfels_per_object,
                           {0.22, 0.68, 0.3}, 1.0, 0.0, 2);
        detail::add_sphere(scene, {0.0, 0.05, -0.65}, 0.4, surfels_per_object,
                           {0.25, 0.35, 0.82}, 1.0, 0.0, 3);
    } else if (preset == "mixed-materials") {
        detail::add_sphere(scene, {-0.55, 0.0, 0.0}, 0.42, surfels_per_object,
                           {0.75, 0.3, 0.2}, 0.9, 0.0, 1);
        detail::add_sphere(scene, {0.55, 0.0, 0.15}, 0.42, surfels_per_object,
                           {0.9, 0.75, 0.4}, 0.15, 1.0, 2);
        detail::add_sphere(scene, {0.0, 0.05, -0.65}, 0.4, surfels_per_object,
                           {0.3, 0.45, 0.75}, 0.45, 0.5, 3);
    } else if (preset == "mirror-ball") {
        detail::add_sphere(scene, {0.0, 0.0, 0.0}, 0.5, 2 * surfels_per_object,
                           {0.95, 0.95, 0.95}, 0.05, 1.0, 1);
        detail::add_sphere(scene, {0.0, -1.6, 0.0}, 1.0, surfels_per_object,
                           {0.5, 0.5, 0.45}, 0.8, 0.0, 2);
        scene.class_count = 3;
    } else {
        fail("unknown_preset", "unknown synth preset: " + preset);
    }
    return scene;
}

inline std::vector<Camera> synth_capture_cameras(int count, int size, Real dist = 3.0,
                                                 Real elevation_deg = 18.0) {
    std::vector<Camera> cams;
    Real el = elevation_deg * kPi / 180.0;
    Real f = 1.15 * size;
    for (int i = 0; i < count; ++i) {
        Real az = 2.0 * kPi * i / count + 0.13;
        Vec3 eye = Vec3{std::cos(az) * std::cos(el), std::sin(el), std::sin(az) * std::cos(el)} *
                   dist;
        cams.push_back(Camera::look_at(eye, Vec3{0, 0, 0}, Vec3{0, 1, 0}, f, f, size, size));
    }
    return cams;
}

inline void run_synth(const SynthOptions& opt, const std::string& out_dir) {
    namespace fs = std::filesystem;
    Scene gt = synth_scene(opt.preset, opt.surfels_per_object);
    gt.env_base = detail::synth_train_env(opt.env_res, opt.biased_env);
    Cubemap holdout = detail::synth_holdout_env(opt.env_res);

    for (const char* sub : {"", "images", "depth", "normal", "iid_albedo", "alpha", "masks",
                            "features", "lift", "gt", "gt/relight"})
        fs::create_directories(fs::path(out_dir) / sub);

    auto cams = synth_capture_cameras(opt.views, opt.size);
    RasterParams rp;
    nlohmann::json manifest;
    manifest["views"] = nlohmann::json::array();

    const int feat_dim = 8;
    for (int v = 0; v < opt.views; ++v) {
        std::string tag = detail::view_tag(v);
        const Camera& cam = cams[v];
        GBuffer g = rasterize(gt, cam, kPlanesAll, rp);

        // capture via the deferred MC reference
        Image linear = mc_reference_render(g, cam, gt.env_base, opt.mc_samples,
                                           hash_combine(opt.seed, v));
        write_png8(linear_to_srgb(linear), out_dir + "/images/view_" + tag + ".png");

        // exact priors from the ground-truth planes
        write_exr(g.depth, out_dir + "/depth/" + tag + ".exr");
        Image n_prior(cam.width, cam.height, 3, ColorSpace::Data);
        for (size_t p = 0; p < n_prior.pixel_count(); ++p) {
            Vec3 n{g.normal.values[p * 3], g.normal.values[p * 3 + 1],
                   g.normal.values[p * 3 + 2]};
            Real len = length(n);
            if (g.alpha.values[p] >= 0.5 && len > 1e-9) {
                n = n / len;
                n_prior.values[p * 3] = n.x;
                n_prior.values[p * 3 + 1] = n.y;
                n_prior.values[p * 3 + 2] = n.z;
            }
        }
        write_exr(n_prior, out_dir + "/normal/" + tag + ".exr");
        write_exr(g.albedo, out_dir + "/iid_albedo/" + tag + ".exr");
        write_png8(g.alpha, out_dir + "/alpha/" + tag + ".png");

        // per-object masks with dense ids and orthonormal features
        std::vector<uint16_t> mask(g.alpha.pixel_count(), 0);
        std::map<uint32_t, uint16_t> remap;
        for (size_t p = 0; p < mask.size(); ++p) {
            int best = 0;
            Real bw = 0;
            for (int c = 0; c < g.seg_classes; ++c)
                if (g.seg.values[p * g.seg_classes + c] > bw) {
                    bw = g.seg.values[p * g.seg_classes + c];
                    best = c;
                }
            if (best >= 1 && bw >= 0.5) {
                auto [it, fresh] = remap.try_emplace(uint32_t(best),
                                                     uint16_t(remap.size() + 1));
                mask[p] = it->second;
            }
        }
        write_png16(mask, cam.width, cam.height, out_dir + "/masks/" + tag + ".png");
        std::vector<std::vector<Real>> feats(remap.size(), std::vector<Real>(feat_dim, 0.0));
        for (const auto& [cls, id] : remap) feats[id - 1][cls % feat_dim] = 1.0;
        write_features(feats, out_dir + "/features/" + tag + ".bin");

        // evaluation sidecar
        write_exr(g.albedo, out_dir + "/gt/albedo_" + tag + ".exr");
        write_exr(g.roughness, out_dir + "/gt/roughness_" + tag + ".exr");
        write_png8(g.alpha, out_dir + "/gt/alpha_" + tag + ".png");
        write_png8(linear_to_srgb(linear), out_dir + "/gt/image_" + tag + ".png");
        Image relit = mc_reference_render(g, cam, holdout, opt.mc_samples,
                                          hash_combine(opt.seed, 1000 + v));
        write_png8(linear_to_srgb(relit), out_dir + "/gt/relight/view_" + tag + ".png");

        nlohmann::json jv;
        jv["image"] = "images/view_" + tag + ".png";
        jv["camera"] = detail::camera_to_json(cam);
        jv["priors"] = {{"depth", "depth/" + tag + ".exr"},
                        {"normal", "normal/" + tag + ".exr"},
                        {"iid_albedo", "iid_albedo/" + tag + ".exr"},
                        {"alpha", "alpha/" + tag + ".png"},
                        {"masks", "masks/" + tag + ".png"},
                        {"features", "features/" + tag + ".bin"}};
        manifest["views"].push_back(jv);
    }

    // lifting views: orbit cameras with ground-truth masks and features
    manifest["lift_views"] = nlohmann::json::array();
    auto orbit = sample_orbit_views(gt.bounds(), opt.lift_views, cams[0]);
    for (size_t v = 0; v < orbit.size(); ++v) {
        std::string tag = detail::view_tag(int(v));
        GBuffer g = rasterize(gt, orbit[v], kPlaneSeg, rp);
        std::vector<uint16_t> mask(g.alpha.pixel_count(), 0);
        std::map<uint32_t, uint16_t> remap;
        for (size_t p = 0; p < mask.size(); ++p) {
            int best = 0;
            Real bw = 0;
            for (int c = 0; c < g.seg_classes; ++c)
                if (g.seg.values[p * g.seg_classes + c] > bw) {
                    bw = g.seg.values[p * g.seg_classes + c];
                    best = c;
                }
            if (best >= 1 && bw >= 0.5) {
                auto [it, fresh] = remap.try_emplace(uint32_t(best),
                                                     uint16_t(remap.size() + 1));
                mask[p] = it->second;
            }
        }
        write_png16(mask, orbit[v].width, orbit[v].height,
                    out_dir + "/lift/masks_" + tag + ".png");
        std::vector<std::vector<Real>> feats(remap.size(), std::vector<Real>(feat_dim, 0.0));
        for (const auto& [cls, id] : remap) feats[id - 1][cls % feat_dim] = 1.0;
        write_features(feats, out_dir + "/lift/feat_" + tag + ".bin");
        nlohmann::json jv;
        jv["camera"] = detail::camera_to_json(orbit[v]);
        jv["masks"] = "lift/masks_" + tag + ".png";
        jv["features"] = "lift/feat_" + tag + ".bin";
        manifest["lift_views"].push_back(jv);
    }

    save_checkpoint(gt, out_dir + "/gt/scene.bin");
    write_exr(cubemap_to_equirect(gt.env_base, 4 * opt.env_res, 2 * opt.env_res),
              out_dir + "/gt/env_train.exr");
    write_exr(cubemap_to_equirect(holdout, 4 * opt.env_res, 2 * opt.env_res),
              out_dir + "/gt/env_holdout.exr");
    {
        std::ofstream os(out_dir + "/manifest.json");
        os << manifest.dump(1);
    }
}

}  // namespace glint
