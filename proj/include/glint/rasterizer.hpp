#pragma once

#include <optional>
#include <vector>

#include "glint/camera.hpp"
#include "glint/image.hpp"
#include "glint/scene.hpp"

namespace glint {

// ---------------------------------------------------------------------------
// Ray-splat intersection

struct SplatHit {
    Real u, v;  // plane coordinates over (s_u, s_v)
    Real z;     // distance along the ray
};

inline constexpr Real kDefaultNear = 0.01;

inline std::optional<SplatHit> ray_splat_intersect(const Ray& ray, const GaussianSurfel& s,
                                                   Real near_clip = kDefaultNear) {
    SurfelFrame f = surfel_frame(s);
    Real denom = dot(f.n, ray.dir);
    if (std::abs(denom) < 1e-9) return std::nullopt;
    Real z = dot(f.n, s.center - ray.origin) / denom;
    if (z <= near_clip) return std::nullopt;
    Vec3 q = ray.origin + ray.dir * z - s.center;
    return SplatHit{dot(q, f.t_u) / s.scale.x, dot(q, f.t_v) / s.scale.y, z};
}

// Gaussian kernel weight, clamped below 0.999 so transmittance never hits zero.
inline Real splat_alpha(Real u, Real v, Real opacity) {
    return std::min(opacity * std::exp(-0.5 * (u * u + v * v)), 0.999);
}

// ---------------------------------------------------------------------------
// G-buffer

enum PlaneFlags : uint32_t {
    kPlaneAlbedo = 1u << 0,
    kPlaneNormal = 1u << 1,
    kPlaneDepth = 1u << 2,
    kPlaneRoughness = 1u << 3,
    kPlaneMetallic = 1u << 4,
    kPlaneRadiance = 1u << 5,
    kPlaneSeg = 1u << 6,
    kPlanePerRay = 1u << 7,
    kPlanesStage1 = kPlaneNormal | kPlaneDepth | kPlaneRadiance | kPlanePerRay,
    kPlanesStage2 = kPlaneAlbedo | kPlaneNormal | kPlaneDepth | kPlaneRoughness |
                    kPlaneMetallic | kPlaneSeg,
    kPlanesAll = 0xff,
};

struct RayHit {
    uint32_t surfel;
    Real weight;  // omega_i = alpha_i * prod_{j<i}(1 - alpha_j)
    Real z;
};

struct GBuffer {
    int width = 0, height = 0;
    uint32_t planes = 0;
    Image albedo, normal, depth, roughness, metallic, alpha, radiance, seg;
    int seg_classes = 0;
    std::vector<std::vector<RayHit>> per_ray;  // row-major when requested

    bool has(uint32_t flag) const { return (planes & flag) != 0; }
};

struct RasterParams {
    Real near_clip = kDefaultNear;
    Real screen_sigma = 0.7;   // anti-aliasing low-pass, in pixels
    Real sigma_cut = 3.0;      // bounding-box extent in standard deviations
    Real transmittance_cut = 1e-4;
    Real rho_cut = 50.0;       // kernel argument beyond which weights vanish
    int tile = 8;
};

namespace detail {

struct SurfelPre {
    Vec3 c, t_u, t_v, n;       // world space
    Vec3 n_cam;                // camera-space normal (unoriented)
    Vec3 c_rel;                // center - camera origin
    Real k_z;                  // dot(n, c_rel): z = k_z / dot(n, d)
    Real a_u, a_v;             // dot(origin - c, t_*): u = (a_u + z b_u)/s_u
    Real su, sv, opacity;
    Real z_cam = 0;            // center depth, for approximate bin ordering
    Vec2 proj;                 // projected center, pixel units
    int x0, x1, y0, y1;        // inclusive pixel bounds
    bool valid = false;
};

inline std::vector<SurfelPre> prepare_surfels(const Scene& scene, const Camera& cam,
                                              const RasterParams& p) {
    std::vector<SurfelPre> pre(scene.surfels.size());
    Real fmax = std::max(cam.fx, cam.fy);
    for (size_t i = 0; i < scene.surfels.size(); ++i) {
        const GaussianSurfel& s = scene.surfels[i];
        SurfelPre& o = pre[i];
        SurfelFrame f = surfel_frame(s);
        o.c = s.center;
        o.t_u = f.t_u;
        o.t_v = f.t_v;
        o.n = f.n;
        o.su = s.scale.x;
        o.sv = s.scale.y;
        o.opacity = s.opacity;
        o.n_cam = cam.dir_to_camera(f.n);
        o.c_rel = s.center - cam.position();
        o.k_z = dot(f.n, o.c_rel);
        o.a_u = -dot(o.c_rel, f.t_u);
        o.a_v = -dot(o.c_rel, f.t_v);
        Vec3 c_cam = cam.to_camera(s.center);
        if (c_cam.z <= p.near_clip) continue;
        o.z_cam = c_cam.z;
        o.proj = cam.project_camera(c_cam);
        Real radius_px = p.sigma_cut * std::max(s.scale.x, s.scale.y) * fmax / c_cam.z +
                         p.sigma_cut * p.screen_sigma + 1.0;
        o.x0 = std::max(0, int(std::floor(o.proj.x - radius_px)));
        o.x1 = std::min(cam.width - 1, int(std::ceil(o.proj.x + radius_px)));
        o.y0 = std::max(0, int(std::floor(o.proj.y - radius_px)));
        o.y1 = std::min(cam.height - 1, int(std::ceil(o.proj.y + radius_px)));
        o.valid = o.x0 <= o.x1 && o.y0 <= o.y1;
    }
    return pre;
}

// Tile -> candidate entries (index + pixel box), in index order. The compact
// entries keep the per-pixel box test sequential in cache.
struct BinEntry {
    uint32_t idx;
    int16_t x0, x1, y0, y1;
};

struct TileGrid {
    int tiles_x = 0, tiles_y = 0, tile = 16;
    std::vector<std::vector<BinEntry>> bins;

    void build(const std::vector<SurfelPre>& pre, int width, int height, int tile_size) {
        tile = tile_size;
        tiles_x = (width + tile - 1) / tile;
        tiles_y = (height + tile - 1) / tile;
        bins.assign(size_t(tiles_x) * tiles_y, {});
        for (uint32_t i = 0; i < pre.size(); ++i) {
            if (!pre[i].valid) continue;
            BinEntry e{i, int16_t(pre[i].x0), int16_t(pre[i].x1), int16_t(pre[i].y0),
                       int16_t(pre[i].y1)};
            int tx0 = pre[i].x0 / tile, tx1 = pre[i].x1 / tile;
            int ty0 = pre[i].y0 / tile, ty1 = pre[i].y1 / tile;
            for (int ty = ty0; ty <= ty1; ++ty)
                for (int tx = tx0; tx <= tx1; ++tx)
                    bins[size_t(ty) * tiles_x + tx].push_back(e);
        }
    }

    const std::vector<BinEntry>& at_pixel(int x, int y) const {
        return bins[size_t(y / tile) * tiles_x + (x / tile)];
    }
};

// Phase 1: every plane hit in front of the near clip, sorted by (z, index).
struct CandZ {
    Real z;
    uint32_t surfel;
};

inline void gather_hits(const std::vector<SurfelPre>& pre, const TileGrid& grid,
                        const RasterParams& p, int px, int py, const Ray& ray,
                        std::vector<CandZ>& out) {
    out.clear();
    for (const BinEntry& e : grid.at_pixel(px, py)) {
        if (px < e.x0 || px > e.x1 || py < e.y0 || py > e.y1) continue;
        const SurfelPre& s = pre[e.idx];
        Real denom = dot(s.n, ray.dir);
        if (std::abs(denom) < 1e-9) continue;
        Real z = s.k_z / denom;
        if (z <= p.near_clip) continue;
        out.push_back({z, e.idx});
    }
}

// Min-heap comparator: pops come out in exact (z, surfel index) order, and the
// transmittance cutoff usually stops extraction long before a full sort would.
struct CandZGreater {
    bool operator()(const CandZ& a, const CandZ& b) const {
        return a.z != b.z ? a.z > b.z : a.surfel > b.surfel;
    }
};

// Fully evaluated intersection; produced lazily during compositing.
struct Candidate {
    uint32_t surfel;
    Real alpha;
    Real z;
    Real u, v;        // object-space kernel coordinates
    bool screen_branch;  // kernel argument came from the screen-space distance
    bool clamped;        // alpha hit the 0.999 clamp
    Real flip;           // orientation sign for the normal
};

// Phase 2: kernel evaluation. Returns false when the kernel argument exceeds
// the cutoff (the hit contributes nothing and leaves transmittance alone).
inline bool evaluate_hit(const SurfelPre& s, const CandZ& hit, const Ray& ray,
                         const RasterParams& p, int px, int py, Real inv_ss2,
                         Candidate& out) {
    Real denom = dot(s.n, ray.dir);
    Real b_u = dot(ray.dir, s.t_u);
    Real b_v = dot(ray.dir, s.t_v);
    Real u = (s.a_u + hit.z * b_u) / s.su;
    Real v = (s.a_v + hit.z * b_v) / s.sv;
    Real rho_obj = u * u + v * v;
    Real dx = (px + 0.5) - s.proj.x;
    Real dy = (py + 0.5) - s.proj.y;
    Real rho_scr = (dx * dx + dy * dy) * inv_ss2;
    bool screen_branch = rho_scr < rho_obj;
    Real rho = screen_branch ? rho_scr : rho_obj;
    if (rho > p.rho_cut) return false;
    Real raw = s.opacity * std::exp(-0.5 * rho);
    out.surfel = hit.surfel;
    out.clamped = raw > 0.999;
    out.alpha = out.clamped ? 0.999 : raw;
    out.z = hit.z;
    out.u = u;
    out.v = v;
    out.screen_branch = screen_branch;
    out.flip = denom < 0 ? 1.0 : (denom > 0 ? -1.0 : 1.0);
    return true;
}

}  // namespace detail

inline GBuffer rasterize(const Scene& scene, const Camera& cam, uint32_t planes,
                         const RasterParams& p = {}) {
    cam.validate();
    scene.validate_finite();
    GBuffer g;
    g.width = cam.width;
    g.height = cam.height;
    g.planes = planes;
    g.alpha = Image(cam.width, cam.height, 1, ColorSpace::Data);
    if (planes & kPlaneAlbedo) g.albedo = Image(cam.width, cam.height, 3);
    if (planes & kPlaneNormal) g.normal = Image(cam.width, cam.height, 3, ColorSpace::Data);
    if (planes & kPlaneDepth) g.depth = Image(cam.width, cam.height, 1, ColorSpace::Data);
    if (planes & kPlaneRoughness) g.roughness = Image(cam.width, cam.height, 1, ColorSpace::Data);
    if (planes & kPlaneMetallic) g.metallic = Image(cam.width, cam.height, 1, ColorSpace::Data);
    if (planes & kPlaneRadiance) g.radiance = Image(cam.width, cam.height, 3);
    if (planes & kPlaneSeg) {
        g.seg_classes = int(scene.class_count);
        g.seg = Image(cam.width, cam.height, g.seg_classes, ColorSpace::Data);
    }
    if (planes & kPlanePerRay) g.per_ray.resize(size_t(cam.width) * cam.height);

    auto pre = detail::prepare_surfels(scene, cam, p);
    detail::TileGrid grid;
    grid.build(pre, cam.width, cam.height, p.tile);
    Vec3 origin = cam.position();

    Real inv_ss2 = 1.0 / (p.screen_sigma * p.screen_sigma);
    std::vector<detail::CandZ> hits;
    for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px) {
            Ray ray{origin, cam.dir_to_world(cam.pixel_dir_camera(px, py))};
            detail::gather_hits(pre, grid, p, px, py, ray, hits);
            Real T = 1.0, A = 0.0, D = 0.0;
            size_t pix = size_t(py) * cam.width + px;
            detail::CandZGreater cmp;
            std::make_heap(hits.begin(), hits.end(), cmp);
            size_t remaining = hits.size();
            while (remaining) {
                std::pop_heap(hits.begin(), hits.begin() + remaining, cmp);
                const detail::CandZ hit = hits[--remaining];
                detail::Candidate c;
                if (!detail::evaluate_hit(pre[hit.surfel], hit, ray, p, px, py, inv_ss2, c))
                    continue;
                Real w = c.alpha * T;
                A += w;
                const GaussianSurfel& s = scene.surfels[c.surfel];
                if (planes & kPlaneAlbedo) {
                    size_t base = pix * 3;
                    g.albedo.values[base] += w * s.albedo.x;
                    g.albedo.values[base + 1] += w * s.albedo.y;
                    g.albedo.values[base + 2] += w * s.albedo.z;
                }
                if (planes & kPlaneNormal) {
                    Vec3 ncam = pre[c.surfel].n_cam * c.flip;
                    size_t base = pix * 3;
                    g.normal.values[base] += w * ncam.x;
                    g.normal.values[base + 1] += w * ncam.y;
                    g.normal.values[base + 2] += w * ncam.z;
                }
                if (planes & kPlaneDepth) D += w * c.z;
                if (planes & kPlaneRoughness) g.roughness.values[pix] += w * s.roughness;
                if (planes & kPlaneMetallic) g.metallic.values[pix] += w * s.metallic;
                if (planes & kPlaneRadiance) {
                    size_t base = pix * 3;
                    g.radiance.values[base] += w * s.radiance.x;
                    g.radiance.values[base + 1] += w * s.radiance.y;
                    g.radiance.values[base + 2] += w * s.radiance.z;
                }
                if (planes & kPlaneSeg)
                    g.seg.values[pix * g.seg_classes + s.class_id] += w;
                if (planes & kPlanePerRay) g.per_ray[pix].push_back({c.surfel, w, c.z});
                T *= (1.0 - c.alpha);
                if (T < p.transmittance_cut) break;
            }
            g.alpha.values[pix] = A;
            if (planes & kPlaneDepth) g.depth.values[pix] = D / std::max(A, 1e-8);
        }
    return g;
}

// ---------------------------------------------------------------------------
// Reverse pass

struct SurfelGrad {
    Vec3 center{0, 0, 0};
    Quat rotation{0, 0, 0, 0};  // raw quaternion coordinates
    Vec2 scale{0, 0};           // w.r.t. raw scale (not log)
    Real opacity = 0;
    Vec3 albedo{0, 0, 0};
    Real roughness = 0, metallic = 0;
    Vec3 radiance{0, 0, 0};
};

struct RenderGrad {
    std::vector<SurfelGrad> surfels;
};

// Adjoint images per plane; null means no contribution. Per-ray adjoints use
// the same (pixel, entry) shape as GBuffer::per_ray.
struct GBufferAdjoint {
    const Image* albedo = nullptr;
    const Image* normal = nullptr;
    const Image* depth = nullptr;
    const Image* roughness = nullptr;
    const Image* metallic = nullptr;
    const Image* alpha = nullptr;
    const Image* radiance = nullptr;
    const Image* seg = nullptr;
    const std::vector<std::vector<Real>>* per_ray_dweight = nullptr;
    const std::vector<std::vector<Real>>* per_ray_dz = nullptr;
};

namespace detail {

// dq (raw quaternion) from adjoints on the frame columns of R(q / |q|).
inline void frame_backward(const Quat& q_raw, const Vec3& dt_u, const Vec3& dt_v,
                           const Vec3& dn, Quat& dq_accum) {
    Quat qh = q_raw.normalized();
    Real w = qh.w, x = qh.x, y = qh.y, z = qh.z;
    Real dqh[4];
    // column partials of the rotation matrix w.r.t. the unit quaternion
    dqh[0] = dt_u.y * 2 * z - dt_u.z * 2 * y + dt_v.x * -2 * z + dt_v.z * 2 * x +
             dn.x * 2 * y - dn.y * 2 * x;
    dqh[1] = dt_u.y * 2 * y + dt_u.z * 2 * z + dt_v.x * 2 * y - dt_v.y * 4 * x +
             dt_v.z * 2 * w + dn.x * 2 * z - dn.y * 2 * w - dn.z * 4 * x;
    dqh[2] = dt_u.x * -4 * y + dt_u.y * 2 * x - dt_u.z * 2 * w + dt_v.x * 2 * x +
             dt_v.z * 2 * z + dn.x * 2 * w + dn.y * 2 * z - dn.z * 4 * y;
    dqh[3] = dt_u.x * -4 * z + dt_u.y * 2 * w + dt_u.z * 2 * x + dt_v.x * -2 * w -
             dt_v.y * 4 * z + dt_v.z * 2 * y + dn.x * 2 * x + dn.y * 2 * y;
    // through the normalization q / |q|
    Real norm = q_raw.norm();
    Real proj = qh.w * dqh[0] + qh.x * dqh[1] + qh.y * dqh[2] + qh.z * dqh[3];
    for (int k = 0; k < 4; ++k) dq_accum[k] += (dqh[k] - qh[k] * proj) / norm;
}

}  // namespace detail

inline RenderGrad rasterize_grad(const Scene& scene, const Camera& cam,
                                 const GBufferAdjoint& adj, const RasterParams& p = {},
                                 bool geometry_grads = true) {
    cam.validate();
    scene.validate_finite();
    RenderGrad rg;
    rg.surfels.assign(scene.surfels.size(), SurfelGrad{});
    auto pre = detail::prepare_surfels(scene, cam, p);
    detail::TileGrid grid;
    grid.build(pre, cam.width, cam.height, p.tile);
    Vec3 origin = cam.position();
    Mat3 cam_rot_t = cam.rotation.transposed();

    Real inv_ss2 = 1.0 / (p.screen_sigma * p.screen_sigma);
    (void)0;
    std::vector<detail::CandZ> hits;
    std::vector<detail::Candidate> cands;  // evaluated, in composite order
    std::vector<Real> dws, dzs, ws, Ts, dalpha;
    for (int py = 0; py < cam.height; ++py)
        for (int px = 0; px < cam.width; ++px) {
            Ray ray{origin, cam.dir_to_world(cam.pixel_dir_camera(px, py))};
            detail::gather_hits(pre, grid, p, px, py, ray, hits);
            if (hits.empty()) continue;
            size_t pix = size_t(py) * cam.width + px;

            // Forward replay to recover weights and the cutoff position.
            Real T = 1.0, A = 0.0, D_sum = 0.0;
            cands.clear();
            ws.clear();
            Ts.clear();
            detail::CandZGreater cmp;
            std::make_heap(hits.begin(), hits.end(), cmp);
            size_t remaining = hits.size();
            while (remaining) {
                std::pop_heap(hits.begin(), hits.begin() + remaining, cmp);
                const detail::CandZ hit = hits[--remaining];
                detail::Candidate c;
                if (!detail::evaluate_hit(pre[hit.surfel], hit, ray, p, px, py, inv_ss2, c))
                    continue;
                cands.push_back(c);
                Ts.push_back(T);
                Real w = c.alpha * T;
                ws.push_back(w);
                A += w;
                D_sum += w * c.z;
                T *= (1.0 - c.alpha);
                if (T < p.transmittance_cut) break;
            }
            size_t n = cands.size();
            if (n == 0) continue;

            Real a_alpha = adj.alpha ? adj.alpha->values[pix] : 0.0;
            Real a_depth = adj.depth ? adj.depth->values[pix] : 0.0;
            Real dS_z = 0.0;
            if (a_depth != 0.0) {
                Real denom = std::max(A, 1e-8);
                dS_z = a_depth / denom;
                if (A > 1e-8) a_alpha += -a_depth * D_sum / (denom * denom);
            }

            // Per-entry adjoints on omega and z.
            dws.assign(n, 0.0);
            dzs.assign(n, 0.0);
            for (size_t i = 0; i < n; ++i) {
                const auto& c = cands[i];
                const GaussianSurfel& s = scene.surfels[c.surfel];
                SurfelGrad& sg = rg.surfels[c.surfel];
                Real dw = a_alpha + dS_z * c.z;
                if (adj.albedo) {
                    Vec3 a{adj.albedo->values[pix * 3], adj.albedo->values[pix * 3 + 1],
                           adj.albedo->values[pix * 3 + 2]};
                    dw += dot(a, s.albedo);
                    sg.albedo += a * ws[i];
                }
                if (adj.radiance) {
                    Vec3 a{adj.radiance->values[pix * 3], adj.radiance->values[pix * 3 + 1],
                           adj.radiance->values[pix * 3 + 2]};
                    dw += dot(a, s.radiance);
                    sg.radiance += a * ws[i];
                }
                if (adj.roughness) {
                    Real a = adj.roughness->values[pix];
                    dw += a * s.roughness;
                    sg.roughness += a * ws[i];
                }
                if (adj.metallic) {
                    Real a = adj.metallic->values[pix];
                    dw += a * s.metallic;
                    sg.metallic += a * ws[i];
                }
                if (adj.seg) dw += adj.seg->values[pix * adj.seg->channels + s.class_id];
                if (adj.normal) {
                    Vec3 a{adj.normal->values[pix * 3], adj.normal->values[pix * 3 + 1],
                           adj.normal->values[pix * 3 + 2]};
                    Vec3 ncam = pre[c.surfel].n_cam * c.flip;
                    dw += dot(a, ncam);
                    if (geometry_grads) {
                        // route into the world normal below via dn
                        Vec3 dn_world = (cam_rot_t * a) * (ws[i] * c.flip);
                        detail::frame_backward(s.rotation, Vec3{0, 0, 0}, Vec3{0, 0, 0},
                                               dn_world, sg.rotation);
                    }
                }
                dzs[i] += dS_z * ws[i];
                if (adj.per_ray_dweight && !(*adj.per_ray_dweight)[pix].empty())
                    dw += (*adj.per_ray_dweight)[pix][i];
                if (adj.per_ray_dz && !(*adj.per_ray_dz)[pix].empty())
                    dzs[i] += (*adj.per_ray_dz)[pix][i];
                dws[i] = dw;
            }

            // d alpha_i = dw_i T_i - sum_{j>i} dw_j w_j / (1 - alpha_i)
            Real suffix = 0.0;
            dalpha.assign(n, 0.0);
            for (size_t ri = n; ri-- > 0;) {
                dalpha[ri] = dws[ri] * Ts[ri] - suffix / (1.0 - cands[ri].alpha);
                suffix += dws[ri] * ws[ri];
            }

            if (!geometry_grads) {
                // Opacity is geometry-stage state; only material planes flow.
                continue;
            }

            for (size_t i = 0; i < n; ++i) {
                const auto& c = cands[i];
                const detail::SurfelPre& sp = pre[c.surfel];
                const GaussianSurfel& s = scene.surfels[c.surfel];
                SurfelGrad& sg = rg.surfels[c.surfel];

                Real da = dalpha[i];
                Real dz_total = dzs[i];
                Real G = std::exp(-0.5 * (c.screen_branch
                                              ? ((px + 0.5 - sp.proj.x) * (px + 0.5 - sp.proj.x) +
                                                 (py + 0.5 - sp.proj.y) * (py + 0.5 - sp.proj.y)) *
                                                    inv_ss2
                                              : (c.u * c.u + c.v * c.v)));
                Real dsigma = 0.0, drho = 0.0;
                if (!c.clamped) {
                    dsigma = da * G;
                    drho = -0.5 * da * sp.opacity * G;
                }
                sg.opacity += dsigma;

                Vec3 dc{0, 0, 0};
                Vec3 dt_u{0, 0, 0}, dt_v{0, 0, 0}, dn{0, 0, 0};
                Real dsu = 0.0, dsv = 0.0;

                if (drho != 0.0) {
                    if (c.screen_branch) {
                        Real ddx = drho * 2.0 * (px + 0.5 - sp.proj.x) * inv_ss2;
                        Real ddy = drho * 2.0 * (py + 0.5 - sp.proj.y) * inv_ss2;
                        // d proj = -(ddx, ddy); chain through projection
                        Vec3 c_cam = cam.to_camera(s.center);
                        Real dPx = -ddx, dPy = -ddy;
                        Vec3 dc_cam{dPx * cam.fx / c_cam.z, dPy * cam.fy / c_cam.z,
                                    -dPx * cam.fx * c_cam.x / (c_cam.z * c_cam.z) -
                                        dPy * cam.fy * c_cam.y / (c_cam.z * c_cam.z)};
                        dc += cam_rot_t * dc_cam;
                    } else {
                        Real du = drho * 2.0 * c.u;
                        Real dv = drho * 2.0 * c.v;
                        Vec3 q = ray.origin + ray.dir * c.z - s.center;
                        // u = q.t_u / s_u
                        Vec3 dq = sp.t_u * (du / sp.su) + sp.t_v * (dv / sp.sv);
                        dt_u += q * (du / sp.su);
                        dt_v += q * (dv / sp.sv);
                        dsu += -du * c.u / sp.su;
                        dsv += -dv * c.v / sp.sv;
                        // q = o + z d - c
                        dz_total += dot(dq, ray.dir);
                        dc += -dq;
                    }
                }
                if (dz_total != 0.0) {
                    Real denom = dot(sp.n, ray.dir);
                    Vec3 q = ray.origin + ray.dir * c.z - s.center;
                    dc += sp.n * (dz_total / denom);
                    dn += q * (-dz_total / denom);
                }
                sg.center += dc;
                sg.scale.x += dsu;
                sg.scale.y += dsv;
                if (length_sq(dt_u) + length_sq(dt_v) + length_sq(dn) > 0)
                    detail::frame_backward(s.rotation, dt_u, dt_v, dn, sg.rotation);
            }
        }
    return rg;
}

// ---------------------------------------------------------------------------
// Depth-derived normals (camera space), masked by alpha >= 0.5.

inline Image depth_to_normal(const Image& depth, const Image& alpha, const Camera& cam) {
    Image out(depth.width, depth.height, 3, ColorSpace::Data);
    for (int y = 1; y < depth.height - 1; ++y)
        for (int x = 1; x < depth.width - 1; ++x) {
            if (alpha.at(x, y) < 0.5) continue;
            Vec3 px1 = cam.pixel_dir_camera(x + 1, y) * depth.at(x + 1, y);
            Vec3 px0 = cam.pixel_dir_camera(x - 1, y) * depth.at(x - 1, y);
            Vec3 py1 = cam.pixel_dir_camera(x, y + 1) * depth.at(x, y + 1);
            Vec3 py0 = cam.pixel_dir_camera(x, y - 1) * depth.at(x, y - 1);
            Vec3 m = cross((px1 - px0) * 0.5, (py1 - py0) * 0.5);
            Real len = length(m);
            if (len < 1e-12) continue;
            Vec3 n = m * (-1.0 / len);  // camera-facing for front surfaces
            out.set_rgb(x, y, n);
        }
    return out;
}

// Adjoint of depth_to_normal into the depth plane.
inline Image depth_to_normal_grad(const Image& depth, const Image& alpha, const Camera& cam,
                                  const Image& adj_normal) {
    Image ddepth(depth.width, depth.height, 1, ColorSpace::Data);
    for (int y = 1; y < depth.height - 1; ++y)
        for (int x = 1; x < depth.width - 1; ++x) {
            if (alpha.at(x, y) < 0.5) continue;
            Vec3 a = adj_normal.rgb(x, y);
            if (a.x == 0 && a.y == 0 && a.z == 0) continue;
            Vec3 dir_x1 = cam.pixel_dir_camera(x + 1, y);
            Vec3 dir_x0 = cam.pixel_dir_camera(x - 1, y);
            Vec3 dir_y1 = cam.pixel_dir_camera(x, y + 1);
            Vec3 dir_y0 = cam.pixel_dir_camera(x, y - 1);
            Vec3 gx = (dir_x1 * depth.at(x + 1, y) - dir_x0 * depth.at(x - 1, y)) * 0.5;
            Vec3 gy = (dir_y1 * depth.at(x, y + 1) - dir_y0 * depth.at(x, y - 1)) * 0.5;
            Vec3 m = cross(gx, gy);
            Real len = length(m);
            if (len < 1e-12) continue;
            Vec3 mh = m / len;
            // n = -m / |m|
            Vec3 dm = (a - mh * dot(mh, a)) * (-1.0 / len);
            Vec3 dgx = cross(gy, dm);
            Vec3 dgy = cross(dm, gx);
            ddepth.at(x + 1, y) += 0.5 * dot(dgx, dir_x1);
            ddepth.at(x - 1, y) += -0.5 * dot(dgx, dir_x0);
            ddepth.at(x, y + 1) += 0.5 * dot(dgy, dir_y1);
            ddepth.at(x, y - 1) += -0.5 * dot(dgy, dir_y0);
        }
    return ddepth;
}

// ---------------------------------------------------------------------------
// Depth distortion: mean over rays of sum_{i != j} w_i w_j |z_i - z_j|.

inline Real depth_distortion(const GBuffer& g) {
    require(g.has(kPlanePerRay), "per_ray_missing", "depth distortion needs per-ray lists");
    Real total = 0.0;
    for (const auto& hits : g.per_ray) {
        // entries are z-sorted, so |z_i - z_j| telescopes with prefix sums
        Real W = 0.0, S = 0.0, ray_sum = 0.0;
        for (const auto& h : hits) {
            ray_sum += h.weight * (h.z * W - S);
            W += h.weight;
            S += h.weight * h.z;
        }
        total += 2.0 * ray_sum;
    }
    return total / Real(g.per_ray.size());
}

// Fills per-entry adjoints (dweight, dz) scaled by `scale`.
inline void depth_distortion_grad(const GBuffer& g, Real scale,
                                  std::vector<std::vector<Real>>& dweight,
                                  std::vector<std::vector<Real>>& dz) {
    size_t rays = g.per_ray.size();
    dweight.assign(rays, {});
    dz.assign(rays, {});
    Real norm = 2.0 * scale / Real(rays);
    for (size_t r = 0; r < rays; ++r) {
        const auto& hits = g.per_ray[r];
        size_t n = hits.size();
        if (n < 2) continue;
        dweight[r].assign(n, 0.0);
        dz[r].assign(n, 0.0);
        std::vector<Real> Wpre(n), Spre(n);
        Real W = 0, S = 0;
        for (size_t i = 0; i < n; ++i) {
            Wpre[i] = W;
            Spre[i] = S;
            W += hits[i].weight;
            S += hits[i].weight * hits[i].z;
        }
        Real Wtot = W, Stot = S;
        for (size_t i = 0; i < n; ++i) {
            Real Wsuf = Wtot - Wpre[i] - hits[i].weight;
            Real Ssuf = Stot - Spre[i] - hits[i].weight * hits[i].z;
            dweight[r][i] = norm * (hits[i].z * Wpre[i] - Spre[i] + Ssuf - hits[i].z * Wsuf);
            dz[r][i] = norm * hits[i].weight * (Wpre[i] - Wsuf);
        }
    }
}

}  // namespace glint
