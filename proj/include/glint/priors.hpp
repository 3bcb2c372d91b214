#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "glint/camera.hpp"
#include "glint/error.hpp"
#include "glint/image.hpp"
#include "glint/io_exr.hpp"
#include "glint/io_png.hpp"
#include "glint/rasterizer.hpp"
#include "glint/scene.hpp"
#include "json.hpp"

namespace glint {

// ---------------------------------------------------------------------------
// Dataset manifest

struct PriorPaths {
    std::string depth, normal, iid_albedo, alpha, masks, features;
};

struct ViewRecord {
    std::string image;
    Camera camera;
    PriorPaths priors;
};

struct LiftViewRecord {
    Camera camera;
    std::string masks, features;
};

struct DatasetManifest {
    std::string root;  // directory containing the manifest
    std::vector<ViewRecord> views;
    std::vector<LiftViewRecord> lift_views;
};

namespace detail {

inline Camera camera_from_json(const nlohmann::json& j) {
    Camera cam;
    cam.fx = j.at("fx").get<Real>();
    cam.fy = j.at("fy").get<Real>();
    cam.cx = j.at("cx").get<Real>();
    cam.cy = j.at("cy").get<Real>();
    cam.width = j.at("w").get<int>();
    cam.height = j.at("h").get<int>();
    auto wc = j.at("world_to_cam");
    require(wc.size() == 12, "manifest_invalid", "world_to_cam must hold 12 floats");
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) cam.rotation(r, c) = wc[r * 4 + c].get<Real>();
        cam.translation[r] = wc[r * 4 + 3].get<Real>();
    }
    cam.validate();
    return cam;
}

inline nlohmann::json camera_to_json(const Camera& cam) {
    std::vector<Real> wc(12);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) wc[r * 4 + c] = cam.rotation(r, c);
        wc[r * 4 + 3] = cam.translation[r];
    }
    return {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy},
            {"w", cam.width}, {"h", cam.height}, {"world_to_cam", wc}};
}

}  // namespace detail

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path);
    require(bool(is), "missing_file", "cannot open manifest: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        fail("manifest_invalid", std::string("manifest parse error: ") + e.what());
    }
    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    for (const auto& v : j.at("views")) {
        ViewRecord rec;
        rec.image = v.at("image").get<std::string>();
        rec.camera = detail::camera_from_json(v.at("camera"));
        const auto& p = v.at("priors");
        if (p.contains("depth")) rec.priors.depth = p["depth"].get<std::string>();
        if (p.contains("normal")) rec.priors.normal = p["normal"].get<std::string>();
        if (p.contains("iid_albedo")) rec.priors.iid_albedo = p["iid_albedo"].get<std::string>();
        if (p.contains("alpha")) rec.priors.alpha = p["alpha"].get<std::string>();
        if (p.contains("masks")) rec.priors.masks = p["masks"].get<std::string>();
        if (p.contains("features")) rec.priors.features = p["features"].get<std::string>();
        m.views.push_back(std::move(rec));
    }
    if (j.contains("lift_views"))
        for (const auto& v : j["lift_views"]) {
            LiftViewRecord rec;
            rec.camera = detail::camera_from_json(v.at("camera"));
            rec.masks = v.at("masks").get<std::string>();
            rec.features = v.at("features").get<std::string>();
            m.lift_views.push_back(std::move(rec));
        }
    return m;
}

// ---------------------------------------------------------------------------
// Per-view prior pack

struct MaskEntry {
    uint16_t id = 0;
    size_t pixel_count = 0;
    std::vector<Real> feature;
};

struct PriorPack {
    Image mono_depth;               // 1ch, affine-ambiguous
    Image mono_normal;              // 3ch camera-space unit vectors
    Image iid_albedo;               // 3ch linear RGB
    std::optional<Image> gt_alpha;  // 1ch
    std::vector<uint16_t> mask_map; // per pixel mask id, 0 = none
    std::vector<MaskEntry> masks;
};

namespace detail {

inline std::string resolve(const std::string& root, const std::string& rel) {
    return (std::filesystem::path(root) / rel).string();
}

inline void require_file(const std::string& path) {
    require(std::filesystem::exists(path), "missing_file", "prior file not found: " + path);
}

inline Image load_image_any(const std::string& path) {
    require_file(path);
    auto ext = std::filesystem::path(path).extension().string();
    if (ext == ".exr") return read_exr(path);
    return read_png(path);
}

}  // namespace detail

// Feature file: u32 mask count, u32 dim, float32 rows in mask-id order.
inline std::vector<std::vector<Real>> read_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "missing_file", "feature file not found: " + path);
    auto rd32 = [&]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
               (uint32_t(b[3]) << 24);
    };
    uint32_t count = rd32(), dim = rd32();
    require(bool(is), "prior_invalid", "truncated feature file: " + path);
    std::vector<std::vector<Real>> rows(count, std::vector<Real>(dim));
    for (auto& row : rows)
        for (auto& v : row) {
            uint32_t u = rd32();
            float f;
            std::memcpy(&f, &u, 4);
            v = f;
        }
    require(bool(is), "prior_invalid", "truncated feature file: " + path);
    return rows;
}

inline void write_features(const std::vector<std::vector<Real>>& rows,
                           const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), "io_error", "cannot write features: " + path);
    auto wr32 = [&](uint32_t v) {
        unsigned char b[4] = {(unsigned char)v, (unsigned char)(v >> 8),
                              (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    };
    wr32(uint32_t(rows.size()));
    wr32(rows.empty() ? 0u : uint32_t(rows[0].size()));
    for (const auto& row : rows)
        for (Real v : row) {
            float f = float(v);
            uint32_t u;
            std::memcpy(&u, &f, 4);
            wr32(u);
        }
}

inline PriorPack load_prior_pack(const DatasetManifest& m, size_t view_index) {
    require(view_index < m.views.size(), "bad_args", "view index out of range");
    const ViewRecord& rec = m.views[view_index];
    const Camera& cam = rec.camera;
    PriorPack pack;

    auto check_size = [&](const Image& img, const std::string& what) {
        require(img.width == cam.width && img.height == cam.height, "prior_invalid",
                what + " dimensions do not match the view");
    };

    if (!rec.priors.depth.empty()) {
        std::string p = detail::resolve(m.root, rec.priors.depth);
        detail::require_file(p);
        pack.mono_depth = read_exr(p);
        require(pack.mono_depth.channels == 1, "prior_invalid", "depth must be 1 channel");
        check_size(pack.mono_depth, "depth prior");
        pack.mono_depth.color_space = ColorSpace::Data;
    }
    if (!rec.priors.normal.empty()) {
        std::string p = detail::resolve(m.root, rec.priors.normal);
        detail::require_file(p);
        pack.mono_normal = read_exr(p);
        require(pack.mono_normal.channels == 3, "prior_invalid", "normals must be 3 channel");
        check_size(pack.mono_normal, "normal prior");
        for (size_t i = 0; i < pack.mono_normal.pixel_count(); ++i) {
            Vec3 n{pack.mono_normal.values[i * 3], pack.mono_normal.values[i * 3 + 1],
                   pack.mono_normal.values[i * 3 + 2]};
            Real len = length(n);
            if (len > 1e-9) {
                n = n / len;
                pack.mono_normal.values[i * 3] = n.x;
                pack.mono_normal.values[i * 3 + 1] = n.y;
                pack.mono_normal.values[i * 3 + 2] = n.z;
            }
        }
        pack.mono_normal.color_space = ColorSpace::Data;
    }
    if (!rec.priors.iid_albedo.empty()) {
        std::string p = detail::resolve(m.root, rec.priors.iid_albedo);
        Image img = detail::load_image_any(p);
        require(img.channels >= 3, "prior_invalid", "IID albedo must have 3 channels");
        if (img.color_space == ColorSpace::Srgb) img = srgb_to_linear(img);
        if (img.channels > 3) {
            Image rgb(img.width, img.height, 3, ColorSpace::Linear);
            for (size_t px = 0; px < img.pixel_count(); ++px)
                for (int c = 0; c < 3; ++c)
                    rgb.values[px * 3 + c] = img.values[px * img.channels + c];
            img = std::move(rgb);
        }
        check_size(img, "IID albedo prior");
        pack.iid_albedo = std::move(img);
    }
    if (!rec.priors.alpha.empty()) {
        std::string p = detail::resolve(m.root, rec.priors.alpha);
        Image img = detail::load_image_any(p);
        require(img.channels == 1, "prior_invalid", "alpha mask must be 1 channel");
        check_size(img, "alpha mask");
        img.color_space = ColorSpace::Data;
        pack.gt_alpha = std::move(img);
    }
    if (!rec.priors.masks.empty()) {
        std::string p = detail::resolve(m.root, rec.priors.masks);
        detail::require_file(p);
        int w = 0, h = 0;
        pack.mask_map = read_mask_png(p, w, h);
        require(w == cam.width && h == cam.height, "prior_invalid",
                "mask map dimensions do not match the view");
        uint16_t max_id = 0;
        std::map<uint16_t, size_t> counts;
        for (uint16_t id : pack.mask_map)
            if (id > 0) {
                ++counts[id];
                max_id = std::max(max_id, id);
            }
        std::vector<std::vector<Real>> feats;
        if (!rec.priors.features.empty())
            feats = read_features(detail::resolve(m.root, rec.priors.features));
        require(feats.empty() || feats.size() >= size_t(max_id), "prior_invalid",
                "feature table smaller than the mask id range");
        for (uint16_t id = 1; id <= max_id; ++id) {
            if (!counts.count(id)) continue;
            MaskEntry e;
            e.id = id;
            e.pixel_count = counts[id];
            if (!feats.empty()) e.feature = feats[id - 1];
            pack.masks.push_back(std::move(e));
        }
    }
    return pack;
}

// ---------------------------------------------------------------------------
// Orbit views for lifting and guidance renders

inline std::vector<Camera> sample_orbit_views(const Aabb& bounds, int count,
                                              const Camera& reference,
                                              Real elevation_deg = 15.0,
                                              Real radius_scale = 1.5) {
    require(count >= 1, "bad_args", "need at least one orbit view");
    Real diag = bounds.diagonal();
    require(diag > 1e-9, "degenerate_bounds", "scene bounds have zero diagonal");
    Vec3 center = bounds.center();
    Real radius = radius_scale * diag;
    Real el = elevation_deg * kPi / 180.0;
    std::vector<Camera> cams;
    cams.reserve(count);
    for (int i = 0; i < count; ++i) {
        Real az = 2.0 * kPi * i / count;
        Vec3 eye = center + radius * Vec3{std::cos(az) * std::cos(el), std::sin(el),
                                          std::sin(az) * std::cos(el)};
        cams.push_back(Camera::look_at(eye, center, Vec3{0, 1, 0}, reference.fx,
                                       reference.fy, reference.width, reference.height));
    }
    return cams;
}

// ---------------------------------------------------------------------------
// Segmentation lifting

struct LiftedMask {
    int view = 0;
    uint16_t mask_id = 0;
    std::vector<uint32_t> surfels;  // sorted unique
    std::vector<Real> feature;
};

// Assigns each mask to the surfels that dominate its pixels' alpha blends.
inline std::vector<LiftedMask> lift_masks(const Scene& scene, const Camera& cam, int view_id,
                                          const std::vector<uint16_t>& mask_map,
                                          const std::vector<MaskEntry>& entries,
                                          const RasterParams& rp = {}) {
    GBuffer g = rasterize(scene, cam, kPlanePerRay, rp);
    std::map<uint16_t, std::set<uint32_t>> sets;
    for (size_t pix = 0; pix < g.per_ray.size(); ++pix) {
        uint16_t id = mask_map[pix];
        if (id == 0) continue;
        const auto& hits = g.per_ray[pix];
        if (hits.empty()) continue;  // zero alpha contributes no surfel
        uint32_t best = hits[0].surfel;
        Real bw = hits[0].weight;
        for (const auto& h : hits)
            if (h.weight > bw) {
                bw = h.weight;
                best = h.surfel;
            }
        sets[id].insert(best);
    }
    std::vector<LiftedMask> out;
    for (const auto& e : entries) {
        auto it = sets.find(e.id);
        if (it == sets.end()) continue;
        LiftedMask lm;
        lm.view = view_id;
        lm.mask_id = e.id;
        lm.surfels.assign(it->second.begin(), it->second.end());
        lm.feature = e.feature;
        out.push_back(std::move(lm));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-view greedy merging

struct LiftedClass {
    std::vector<Real> centroid;     // member-weighted mean feature
    size_t member_count = 0;
    std::set<uint32_t> surfels;     // union of member masks
    int last_view = -1;             // same-view masks never merge
};

struct LiftedObjects {
    std::vector<uint32_t> class_ids;  // per surfel, 0 = unassigned
    std::vector<LiftedClass> classes; // index c corresponds to class id c+1
    uint32_t class_count = 1;         // including class 0
};

namespace detail {

inline Real jaccard(const std::vector<uint32_t>& a, const std::set<uint32_t>& b) {
    if (a.empty() && b.empty()) return 0.0;
    size_t inter = 0;
    for (uint32_t v : a) inter += b.count(v);
    size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 0.0 : Real(inter) / Real(uni);
}

inline Real cosine(const std::vector<Real>& a, const std::vector<Real>& b) {
    if (a.empty() || b.empty() || a.size() != b.size()) return 0.0;
    Real ab = 0, aa = 0, bb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa < 1e-20 || bb < 1e-20) return 0.0;
    return ab / std::sqrt(aa * bb);
}

}  // namespace detail

inline LiftedObjects merge_objects(const std::vector<LiftedMask>& lifted,
                                   size_t surfel_count, Real merge_threshold = 0.5) {
    LiftedObjects out;
    std::vector<LiftedClass> classes;
    // votes[(surfel, class)] -> set of views (counted once per view)
    std::map<std::pair<uint32_t, size_t>, std::set<int>> votes;

    for (const auto& lm : lifted) {
        size_t best = classes.size();
        Real best_sim = -1;
        for (size_t c = 0; c < classes.size(); ++c) {
            if (classes[c].last_view == lm.view) continue;
            Real sim = 0.5 * detail::jaccard(lm.surfels, classes[c].surfels) +
                       0.5 * detail::cosine(lm.feature, classes[c].centroid);
            if (sim > best_sim) {
                best_sim = sim;
                best = c;
            }
        }
        size_t target;
        if (best < classes.size() && best_sim >= merge_threshold) {
            target = best;
            LiftedClass& cl = classes[target];
            if (!lm.feature.empty()) {
                if (cl.centroid.empty()) cl.centroid.assign(lm.feature.size(), 0.0);
                for (size_t i = 0; i < lm.feature.size(); ++i)
                    cl.centroid[i] = (cl.centroid[i] * cl.member_count + lm.feature[i]) /
                                     (cl.member_count + 1);
            }
            cl.member_count += 1;
            cl.surfels.insert(lm.surfels.begin(), lm.surfels.end());
            cl.last_view = lm.view;
        } else {
            target = classes.size();
            LiftedClass cl;
            cl.centroid = lm.feature;
            cl.member_count = 1;
            cl.surfels.insert(lm.surfels.begin(), lm.surfels.end());
            cl.last_view = lm.view;
            classes.push_back(std::move(cl));
        }
        for (uint32_t s : lm.surfels) votes[{s, target}].insert(lm.view);
    }

    out.classes = std::move(classes);
    out.class_count = uint32_t(out.classes.size()) + 1;
    out.class_ids.assign(surfel_count, 0);
    // majority vote over views, ties to the lowest class id
    std::map<uint32_t, std::pair<size_t, size_t>> best;  // surfel -> (class idx, views)
    for (const auto& [key, views] : votes) {
        auto [surfel, cls] = key;
        auto it = best.find(surfel);
        if (it == best.end() || views.size() > it->second.second ||
            (views.size() == it->second.second && cls < it->second.first))
            best[surfel] = {cls, views.size()};
    }
    for (const auto& [surfel, entry] : best)
        if (surfel < surfel_count) out.class_ids[surfel] = uint32_t(entry.first) + 1;
    return out;
}

// Full lifting pipeline over the dataset's lift views.
inline LiftedObjects lift_and_merge(Scene& scene, const DatasetManifest& m,
                                    const RasterParams& rp = {}) {
    std::vector<LiftedMask> all;
    for (size_t v = 0; v < m.lift_views.size(); ++v) {
        const auto& lv = m.lift_views[v];
        std::string mask_path = detail::resolve(m.root, lv.masks);
        detail::require_file(mask_path);
        int w = 0, h = 0;
        std::vector<uint16_t> mask_map = read_mask_png(mask_path, w, h);
        require(w == lv.camera.width && h == lv.camera.height, "prior_invalid",
                "lift mask dimensions do not match its camera");
        std::vector<std::vector<Real>> feats;
        if (!lv.features.empty())
            feats = read_features(detail::resolve(m.root, lv.features));
        uint16_t max_id = 0;
        std::map<uint16_t, size_t> counts;
        for (uint16_t id : mask_map)
            if (id) {
                ++counts[id];
                max_id = std::max(max_id, id);
            }
        std::vector<MaskEntry> entries;
        for (uint16_t id = 1; id <= max_id; ++id) {
            if (!counts.count(id)) continue;
            MaskEntry e;
            e.id = id;
            e.pixel_count = counts[id];
            if (!feats.empty() && feats.size() >= id) e.feature = feats[id - 1];
            entries.push_back(std::move(e));
        }
        auto lifted = lift_masks(scene, lv.camera, int(v), mask_map, entries, rp);
        all.insert(all.end(), lifted.begin(), lifted.end());
    }
    LiftedObjects obj = merge_objects(all, scene.surfels.size());
    scene.class_count = obj.class_count;
    for (size_t i = 0; i < scene.surfels.size(); ++i)
        scene.surfels[i].class_id = obj.class_ids[i];
    return obj;
}

}  // namespace glint
