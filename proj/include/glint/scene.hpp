#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "glint/cubemap.hpp"
#include "glint/error.hpp"
#include "glint/math.hpp"

namespace glint {

// One 2D Gaussian surfel: geometry, opacity, material, class tag.
struct GaussianSurfel {
    Vec3 center;
    Quat rotation;          // frame columns are (t_u, t_v, n)
    Vec2 scale{1, 1};       // tangent extents, > 0
    Real opacity = 0.5;
    Vec3 albedo{0.5, 0.5, 0.5};
    Real roughness = 0.5;
    Real metallic = 0.0;
    Vec3 radiance{0.5, 0.5, 0.5};  // Stage I flat-color appearance proxy
    uint32_t class_id = 0;         // 0 = unassigned

    bool finite() const {
        return all_finite(center) && std::isfinite(rotation.w) && std::isfinite(rotation.x) &&
               std::isfinite(rotation.y) && std::isfinite(rotation.z) &&
               std::isfinite(scale.x) && std::isfinite(scale.y) && std::isfinite(opacity) &&
               all_finite(albedo) && std::isfinite(roughness) && std::isfinite(metallic) &&
               all_finite(radiance);
    }
};

struct SurfelFrame {
    Vec3 t_u, t_v, n;
};

// Orthonormal tangent frame; normalizes the quaternion so gradients stay
// well-defined under raw-coordinate perturbations.
inline SurfelFrame surfel_frame(const GaussianSurfel& s) {
    Mat3 r = quat_to_mat(s.rotation.normalized());
    return {r.col(0), r.col(1), r.col(2)};
}

// Two-sided surfel: normal flipped to face the camera. view_dir points from
// camera to point; ties (n.v == 0) leave n unflipped.
inline Vec3 oriented_normal(const Vec3& n, const Vec3& view_dir) {
    return dot(n, view_dir) < 0 ? n : (dot(n, view_dir) > 0 ? -n : n);
}

struct Aabb {
    Vec3 lo{0, 0, 0}, hi{0, 0, 0};
    Vec3 center() const { return (lo + hi) * 0.5; }
    Real diagonal() const { return length(hi - lo); }
};

struct EnvLight;  // defined in envlight.hpp

struct Scene {
    std::vector<GaussianSurfel> surfels;
    uint32_t class_count = 1;  // classes 0..K-1, 0 reserved for unassigned
    Cubemap env_base;          // linear RGB radiance

    Aabb bounds() const {
        Aabb b;
        if (surfels.empty()) return b;
        b.lo = b.hi = surfels[0].center;
        for (const auto& s : surfels) {
            b.lo = min(b.lo, s.center);
            b.hi = max(b.hi, s.center);
        }
        return b;
    }

    void validate_finite() const {
        for (size_t i = 0; i < surfels.size(); ++i)
            require(surfels[i].finite(), "surfel_non_finite",
                    "surfel " + std::to_string(i) + " has non-finite fields");
    }

    // Clamps every constrained field back into range; run after each step.
    void apply_constraints() {
        for (auto& s : surfels) {
            if (std::abs(s.rotation.norm() - 1.0) > 1e-9)
                s.rotation = s.rotation.normalized();
            s.scale.x = clamp(s.scale.x, 1e-6, 1e3);
            s.scale.y = clamp(s.scale.y, 1e-6, 1e3);
            s.opacity = clamp(s.opacity, 0.0, 1.0);
            s.albedo = clamp(s.albedo, 0.0, 1.0);
            s.roughness = clamp(s.roughness, 0.0, 1.0);
            s.metallic = clamp(s.metallic, 0.0, 1.0);
            s.radiance = max(s.radiance, Vec3{0, 0, 0});
        }
    }
};

// ---------------------------------------------------------------------------
// Parameter packing

enum class Stage { Geometry, Material };

enum class ParamGroup : uint8_t { Center, Rotation, Scale, Opacity, Material, Env };

// Geometry block: center(3) quat(4) log-scale(2) opacity(1) radiance(3).
inline constexpr int kGeomBlock = 13;
// Material block: albedo(3) roughness(1) metallic(1).
inline constexpr int kMatBlock = 5;

struct ParamLayout {
    Stage stage = Stage::Geometry;
    size_t surfel_count = 0;
    int env_res = 0;  // material stage only

    size_t block_size() const { return stage == Stage::Geometry ? kGeomBlock : kMatBlock; }
    size_t env_size() const {
        return stage == Stage::Material ? size_t(6) * env_res * env_res * 3 : 0;
    }
    size_t total() const { return surfel_count * block_size() + env_size(); }

    bool operator==(const ParamLayout& o) const {
        return stage == o.stage && surfel_count == o.surfel_count && env_res == o.env_res;
    }

    ParamGroup group_of(size_t i) const {
        size_t nb = surfel_count * block_size();
        if (i >= nb) return ParamGroup::Env;
        size_t k = i % block_size();
        if (stage == Stage::Material) return ParamGroup::Material;
        if (k < 3) return ParamGroup::Center;
        if (k < 7) return ParamGroup::Rotation;
        if (k < 9) return ParamGroup::Scale;
        if (k < 10) return ParamGroup::Opacity;
        return ParamGroup::Material;  // radiance follows the material rate
    }
};

struct ParamVector {
    ParamLayout layout;
    std::vector<Real> values;
};

inline ParamVector pack_params(const Scene& scene, Stage stage) {
    ParamVector pv;
    pv.layout.stage = stage;
    pv.layout.surfel_count = scene.surfels.size();
    pv.layout.env_res = stage == Stage::Material ? scene.env_base.res : 0;
    pv.values.resize(pv.layout.total());
    size_t i = 0;
    for (const auto& s : scene.surfels) {
        if (stage == Stage::Geometry) {
            pv.values[i++] = s.center.x;
            pv.values[i++] = s.center.y;
            pv.values[i++] = s.center.z;
            for (int k = 0; k < 4; ++k) pv.values[i++] = s.rotation[k];
            pv.values[i++] = std::log(s.scale.x);
            pv.values[i++] = std::log(s.scale.y);
            pv.values[i++] = s.opacity;
            pv.values[i++] = s.radiance.x;
            pv.values[i++] = s.radiance.y;
            pv.values[i++] = s.radiance.z;
        } else {
            pv.values[i++] = s.albedo.x;
            pv.values[i++] = s.albedo.y;
            pv.values[i++] = s.albedo.z;
            pv.values[i++] = s.roughness;
            pv.values[i++] = s.metallic;
        }
    }
    if (stage == Stage::Material) {
        for (size_t t = 0; t < scene.env_base.texel_count(); ++t) {
            const Vec3& v = scene.env_base.texel(t);
            pv.values[i++] = v.x;
            pv.values[i++] = v.y;
            pv.values[i++] = v.z;
        }
    }
    return pv;
}

inline void unpack_params(const ParamVector& pv, Scene& scene) {
    ParamLayout expect;
    expect.stage = pv.layout.stage;
    expect.surfel_count = scene.surfels.size();
    expect.env_res = pv.layout.stage == Stage::Material ? scene.env_base.res : 0;
    require(pv.layout == expect && pv.values.size() == pv.layout.total(), "layout_mismatch",
            "parameter vector does not match the scene layout");
    size_t i = 0;
    for (auto& s : scene.surfels) {
        if (pv.layout.stage == Stage::Geometry) {
            s.center = {pv.values[i], pv.values[i + 1], pv.values[i + 2]};
            i += 3;
            for (int k = 0; k < 4; ++k) s.rotation[k] = pv.values[i++];
            s.scale = {std::exp(pv.values[i]), std::exp(pv.values[i + 1])};
            i += 2;
            s.opacity = pv.values[i++];
            s.radiance = {pv.values[i], pv.values[i + 1], pv.values[i + 2]};
            i += 3;
        } else {
            s.albedo = {pv.values[i], pv.values[i + 1], pv.values[i + 2]};
            i += 3;
            s.roughness = pv.values[i++];
            s.metallic = pv.values[i++];
        }
    }
    if (pv.layout.stage == Stage::Material) {
        for (size_t t = 0; t < scene.env_base.texel_count(); ++t) {
            scene.env_base.texel(t) = {pv.values[i], pv.values[i + 1], pv.values[i + 2]};
            i += 3;
        }
    }
}

// Chain rule for the packed space: scale gradients get the log-scale factor.
inline void pack_gradient_chain(const ParamVector& params, std::vector<Real>& grads) {
    if (params.layout.stage != Stage::Geometry) return;
    for (size_t s = 0; s < params.layout.surfel_count; ++s) {
        size_t base = s * kGeomBlock;
        grads[base + 7] *= std::exp(params.values[base + 7]);
        grads[base + 8] *= std::exp(params.values[base + 8]);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "GAIN", version, counts, float32 attribute arrays,
// class ids, env cubemap (+x,-x,+y,-y,+z,-z, row-major RGB).

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8),
                          (unsigned char)(v >> 16), (unsigned char)(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
inline void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}
inline float get_f32(std::istream& is) {
    uint32_t u = get_u32(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}
}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Scene& scene, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), "io_error", "cannot open checkpoint for writing: " + path);
    os.write("GAIN", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, uint32_t(scene.surfels.size()));
    detail::put_u32(os, scene.class_count);
    auto put_vec3s = [&](auto getter) {
        for (const auto& s : scene.surfels) {
            Vec3 v = getter(s);
            detail::put_f32(os, float(v.x));
            detail::put_f32(os, float(v.y));
            detail::put_f32(os, float(v.z));
        }
    };
    put_vec3s([](const GaussianSurfel& s) { return s.center; });
    for (const auto& s : scene.surfels)
        for (int k = 0; k < 4; ++k) detail::put_f32(os, float(s.rotation[k]));
    for (const auto& s : scene.surfels) {
        detail::put_f32(os, float(s.scale.x));
        detail::put_f32(os, float(s.scale.y));
    }
    for (const auto& s : scene.surfels) detail::put_f32(os, float(s.opacity));
    put_vec3s([](const GaussianSurfel& s) { return s.albedo; });
    for (const auto& s : scene.surfels) detail::put_f32(os, float(s.roughness));
    for (const auto& s : scene.surfels) detail::put_f32(os, float(s.metallic));
    put_vec3s([](const GaussianSurfel& s) { return s.radiance; });
    for (const auto& s : scene.surfels) detail::put_u32(os, s.class_id);
    for (size_t t = 0; t < scene.env_base.texel_count(); ++t) {
        const Vec3& v = scene.env_base.texel(t);
        detail::put_f32(os, float(v.x));
        detail::put_f32(os, float(v.y));
        detail::put_f32(os, float(v.z));
    }
    require(bool(os), "io_error", "checkpoint write failed: " + path);
}

inline Scene load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "io_error", "cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    require(is && std::memcmp(magic, "GAIN", 4) == 0, "bad_checkpoint",
            "bad magic in " + path);
    uint32_t version = detail::get_u32(is);
    require(version == kCheckpointVersion, "bad_checkpoint",
            "unsupported checkpoint version " + std::to_string(version));
    uint32_t count = detail::get_u32(is);
    uint32_t class_count = detail::get_u32(is);

    Scene scene;
    scene.class_count = class_count;
    scene.surfels.resize(count);
    for (auto& s : scene.surfels) {
        s.center = {detail::get_f32(is), detail::get_f32(is), detail::get_f32(is)};
    }
    for (auto& s : scene.surfels)
        for (int k = 0; k < 4; ++k) s.rotation[k] = detail::get_f32(is);
    for (auto& s : scene.surfels) s.scale = {detail::get_f32(is), detail::get_f32(is)};
    for (auto& s : scene.surfels) s.opacity = detail::get_f32(is);
    for (auto& s : scene.surfels)
        s.albedo = {detail::get_f32(is), detail::get_f32(is), detail::get_f32(is)};
    for (auto& s : scene.surfels) s.roughness = detail::get_f32(is);
    for (auto& s : scene.surfels) s.metallic = detail::get_f32(is);
    for (auto& s : scene.surfels)
        s.radiance = {detail::get_f32(is), detail::get_f32(is), detail::get_f32(is)};
    for (auto& s : scene.surfels) s.class_id = detail::get_u32(is);
    require(bool(is), "bad_checkpoint", "truncated checkpoint: " + path);

    // Env resolution is implied by the remaining payload.
    auto pos = is.tellg();
    is.seekg(0, std::ios::end);
    auto end = is.tellg();
    is.seekg(pos);
    size_t remaining = size_t(end - pos);
    require(remaining % (6 * 3 * 4) == 0, "bad_checkpoint", "malformed env block: " + path);
    size_t texels_per_face = remaining / (6 * 3 * 4);
    int res = int(std::lround(std::sqrt(double(texels_per_face))));
    require(size_t(res) * res == texels_per_face, "bad_checkpoint",
            "env block is not square: " + path);
    scene.env_base = Cubemap(res);
    for (size_t t = 0; t < scene.env_base.texel_count(); ++t)
        scene.env_base.texel(t) = {detail::get_f32(is), detail::get_f32(is),
                                   detail::get_f32(is)};
    require(bool(is), "bad_checkpoint", "truncated env block: " + path);
    return scene;
}

}  // namespace glint
