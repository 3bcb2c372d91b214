#pragma once

#include <cstdint>
#include <vector>

#include "glint/brdf.hpp"
#include "glint/cubemap.hpp"
#include "glint/error.hpp"
#include "glint/image.hpp"

namespace glint {

// ---------------------------------------------------------------------------
// Precomputed BRDF lookup table: (n.v, roughness) -> (scale, bias) so that
// specular = F0 * scale + bias.

inline Image build_brdf_lut(int res = 64, int samples = 2048, uint64_t seed = 0) {
    Image lut(res, res, 2, ColorSpace::Data);
    for (int yi = 0; yi < res; ++yi) {
        Real roughness = (yi + 0.5) / res;
        Real alpha = ggx_alpha(roughness);
        for (int xi = 0; xi < res; ++xi) {
            Real n_dot_v = (xi + 0.5) / res;
            Vec3 v{std::sqrt(std::max(0.0, 1.0 - n_dot_v * n_dot_v)), 0.0, n_dot_v};
            // Hammersley with a per-seed Cranley-Patterson rotation
            Rng rng(hash_combine(seed, (uint64_t(yi) << 32) | uint64_t(xi)));
            Vec2 shift{rng.uniform(), rng.uniform()};
            Real a_sum = 0, b_sum = 0;
            for (int i = 0; i < samples; ++i) {
                Vec2 u = hammersley(uint32_t(i), uint32_t(samples));
                u.x = u.x + shift.x < 1 ? u.x + shift.x : u.x + shift.x - 1;
                u.y = u.y + shift.y < 1 ? u.y + shift.y : u.y + shift.y - 1;
                Vec3 h = sample_ggx_h(u, alpha);
                Vec3 l = h * (2.0 * dot(v, h)) - v;
                if (l.z <= 0) continue;
                Real v_dot_h = std::max(dot(v, h), 1e-9);
                Real g = smith_g(n_dot_v, l.z, roughness);
                Real g_vis = g * v_dot_h / (std::max(h.z, 1e-9) * std::max(n_dot_v, 1e-9));
                Real fc = std::pow(1.0 - v_dot_h, 5.0);
                a_sum += (1.0 - fc) * g_vis;
                b_sum += fc * g_vis;
            }
            Real a = a_sum / samples, b = b_sum / samples;
            // k = alpha^2/2 under-shadows a touch at grazing; cap the energy
            Real e = a + b;
            if (e > 1.0) {
                a /= e;
                b /= e;
            }
            lut.at(xi, yi, 0) = a;
            lut.at(xi, yi, 1) = b;
        }
    }
    return lut;
}

struct LutSample {
    Real scale = 0, bias = 0;
    Real dscale_dr = 0, dbias_dr = 0;  // analytic bilinear derivative
};

inline LutSample sample_lut_grad(const Image& lut, Real n_dot_v, Real roughness) {
    Real fx = clamp(n_dot_v, 0.0, 1.0) * lut.width - 0.5;
    Real fy = clamp(roughness, 0.0, 1.0) * lut.height - 0.5;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    Real ax = fx - x0, ay = fy - y0;
    auto cl = [](int v, int n) { return std::min(n - 1, std::max(0, v)); };
    LutSample out;
    for (int dx = 0; dx < 2; ++dx) {
        Real wx = dx ? ax : 1 - ax;
        int x = cl(x0 + dx, lut.width);
        int ylo = cl(y0, lut.height), yhi = cl(y0 + 1, lut.height);
        Real s0 = lut.at(x, ylo, 0), s1 = lut.at(x, yhi, 0);
        Real b0 = lut.at(x, ylo, 1), b1 = lut.at(x, yhi, 1);
        out.scale += wx * ((1 - ay) * s0 + ay * s1);
        out.bias += wx * ((1 - ay) * b0 + ay * b1);
        out.dscale_dr += wx * (s1 - s0) * lut.height;
        out.dbias_dr += wx * (b1 - b0) * lut.height;
    }
    return out;
}

inline Vec2 sample_lut(const Image& lut, Real n_dot_v, Real roughness) {
    Real fx = clamp(n_dot_v, 0.0, 1.0) * lut.width - 0.5;
    Real fy = clamp(roughness, 0.0, 1.0) * lut.height - 0.5;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    Real ax = fx - x0, ay = fy - y0;
    auto cl = [&](int v, int n) { return std::min(n - 1, std::max(0, v)); };
    Vec2 out{0, 0};
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            Real w = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
            int x = cl(x0 + dx, lut.width), y = cl(y0 + dy, lut.height);
            out.x += w * lut.at(x, y, 0);
            out.y += w * lut.at(x, y, 1);
        }
    return out;
}

// Process-wide default LUT (env independent).
inline const Image& default_brdf_lut() {
    static const Image lut = build_brdf_lut();
    return lut;
}

// ---------------------------------------------------------------------------
// Sparse linear filters: frozen sample patterns that make the training-time
// env derivations exactly linear in the base texels (adjoint = transpose).

struct LinearFilterOp {
    int out_res = 0;
    std::vector<uint32_t> row_offsets;  // 6*out_res^2 + 1
    std::vector<uint32_t> indices;      // base texel index
    std::vector<Real> weights;

    void apply(const Cubemap& base, Cubemap& out) const {
        out = Cubemap(out_res);
        for (size_t r = 0; r + 1 < row_offsets.size(); ++r) {
            Vec3 acc{0, 0, 0};
            for (uint32_t e = row_offsets[r]; e < row_offsets[r + 1]; ++e)
                acc += base.texel(indices[e]) * weights[e];
            out.texel(r) = acc;
        }
    }

    // base_adj += W^T * out_adj
    void apply_transpose(const Cubemap& out_adj, Cubemap& base_adj) const {
        for (size_t r = 0; r + 1 < row_offsets.size(); ++r) {
            const Vec3& a = out_adj.texel(r);
            if (a.x == 0 && a.y == 0 && a.z == 0) continue;
            for (uint32_t e = row_offsets[r]; e < row_offsets[r + 1]; ++e)
                base_adj.texel(indices[e]) += a * weights[e];
        }
    }
};

namespace detail {

// Sorts and merges duplicate taps of one row, then appends it to the op.
inline void push_row(LinearFilterOp& op, std::vector<std::pair<uint32_t, Real>>& taps) {
    std::sort(taps.begin(), taps.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    size_t start = op.indices.size();
    for (const auto& [idx, w] : taps) {
        if (op.indices.size() > start && op.indices.back() == idx)
            op.weights.back() += w;
        else {
            op.indices.push_back(idx);
            op.weights.push_back(w);
        }
    }
    op.row_offsets.push_back(uint32_t(op.indices.size()));
    taps.clear();
}

}  // namespace detail

// Cosine-weighted irradiance estimate: E(n) = mean of L over cosine samples.
// Stratified over a grid^2 pattern, deterministic per texel.
inline Cubemap build_irradiance(const Cubemap& base, int out_res, int samples,
                                uint64_t seed = 0, LinearFilterOp* op = nullptr) {
    int grid = std::max(1, int(std::lround(std::sqrt(double(samples)))));
    int n = grid * grid;
    Cubemap out(out_res);
    if (op) {
        *op = LinearFilterOp{};
        op->out_res = out_res;
        op->row_offsets.push_back(0);
    }
    std::vector<std::pair<uint32_t, Real>> taps;
    for (int face = 0; face < 6; ++face)
        for (int y = 0; y < out_res; ++y)
            for (int x = 0; x < out_res; ++x) {
                Vec3 nrm = cubemap_texel_dir(face, x, y, out_res);
                Vec3 t1, t2;
                onb(nrm, t1, t2);
                Rng rng(hash_combine(seed, (uint64_t(face) << 40) |
                                               (uint64_t(y) << 20) | uint64_t(x)));
                Vec3 acc{0, 0, 0};
                for (int sy = 0; sy < grid; ++sy)
                    for (int sx = 0; sx < grid; ++sx) {
                        Vec2 u{(sx + rng.uniform()) / grid, (sy + rng.uniform()) / grid};
                        Vec3 d = tangent_to_world(sample_cosine(u), t1, t2, nrm);
                        size_t idx = cubemap_nearest_index(base.res, d);
                        acc += base.texel(idx);
                        if (op) taps.emplace_back(uint32_t(idx), 1.0 / n);
                    }
                out.at(face, x, y) = acc / Real(n);
                if (op) detail::push_row(*op, taps);
            }
    return out;
}

// One prefiltered mip level: GGX-importance-sampled average with the n = v = R
// convention, sample weight n.l, Hammersley pattern.
inline Cubemap prefilter_level(const Cubemap& base, int out_res, Real roughness,
                               int samples, LinearFilterOp* op = nullptr) {
    Cubemap out(out_res);
    if (op) {
        *op = LinearFilterOp{};
        op->out_res = out_res;
        op->row_offsets.push_back(0);
    }
    std::vector<std::pair<uint32_t, Real>> taps;
    Real alpha = ggx_alpha(roughness);
    for (int face = 0; face < 6; ++face)
        for (int y = 0; y < out_res; ++y)
            for (int x = 0; x < out_res; ++x) {
                Vec3 r_dir = cubemap_texel_dir(face, x, y, out_res);
                Vec3 t1, t2;
                onb(r_dir, t1, t2);
                Vec3 acc{0, 0, 0};
                Real wsum = 0;
                std::vector<std::pair<uint32_t, Real>> raw;
                for (int i = 0; i < samples; ++i) {
                    Vec3 h = tangent_to_world(sample_ggx_h(hammersley(i, samples), alpha),
                                              t1, t2, r_dir);
                    Vec3 l = h * (2.0 * dot(r_dir, h)) - r_dir;
                    Real n_dot_l = dot(r_dir, l);
                    if (n_dot_l <= 0) continue;
                    size_t idx = cubemap_nearest_index(base.res, l);
                    acc += base.texel(idx) * n_dot_l;
                    wsum += n_dot_l;
                    if (op) raw.emplace_back(uint32_t(idx), n_dot_l);
                }
                Real norm = wsum > 0 ? 1.0 / wsum : 0.0;
                out.at(face, x, y) = acc * norm;
                if (op) {
                    for (auto& [idx, w] : raw) taps.emplace_back(idx, w * norm);
                    detail::push_row(*op, taps);
                }
            }
    return out;
}

struct EnvBuildParams {
    int irradiance_res = 32;
    int mip_count = 5;
    int irradiance_samples = 4096;
    int prefilter_samples = 1024;
    uint64_t seed = 0;
};

// Derived lighting products. `stale` is the guard every consumer checks;
// anything that mutates the base radiance must re-derive before shading.
struct EnvLight {
    EnvBuildParams params;
    Cubemap irradiance;
    std::vector<Cubemap> mips;  // level l filtered at roughness l / (count-1)
    bool stale = true;
    int base_res = 0;

    // Frozen training-time operators (built per base resolution).
    LinearFilterOp irr_op;
    std::vector<LinearFilterOp> mip_ops;  // levels >= 1; level 0 is the base copy
    bool ops_ready = false;

    Real level_roughness(int level) const {
        return params.mip_count > 1 ? Real(level) / (params.mip_count - 1) : 0.0;
    }

    // coarse levels keep a floor so directional lobes survive the mip chain
    int mip_res(int level, int base) const { return std::min(base, std::max(base >> level, 8)); }

    // Full-quality derivation for bakes, relighting, and validation.
    void bake(const Cubemap& base) {
        base_res = base.res;
        irradiance = build_irradiance(base, params.irradiance_res, params.irradiance_samples,
                                      params.seed);
        mips.assign(params.mip_count, Cubemap());
        mips[0] = base;  // roughness-0 level is the base itself
        for (int l = 1; l < params.mip_count; ++l)
            mips[l] = prefilter_level(base, mip_res(l, base.res), level_roughness(l),
                                      params.prefilter_samples);
        stale = false;
    }

    void prepare_training_ops(const Cubemap& base, int samples, uint64_t seed) {
        base_res = base.res;
        build_irradiance(base, params.irradiance_res, samples, seed, &irr_op);
        mip_ops.assign(params.mip_count, LinearFilterOp{});
        for (int l = 1; l < params.mip_count; ++l)
            prefilter_level(base, mip_res(l, base.res), level_roughness(l), samples,
                            &mip_ops[l]);
        ops_ready = true;
    }

    // Cheap per-iteration rebuild through the frozen operators.
    void rebuild_training(const Cubemap& base) {
        require(ops_ready && base.res == base_res, "env_ops",
                "training operators not prepared for this base resolution");
        irr_op.apply(base, irradiance);
        if (mips.size() != size_t(params.mip_count)) mips.assign(params.mip_count, Cubemap());
        mips[0] = base;
        for (int l = 1; l < params.mip_count; ++l) mip_ops[l].apply(base, mips[l]);
        stale = false;
    }

    // Transposes the training derivation: routes adjoints on the derived maps
    // back to base texels. mip_adjs[0] is the identity path.
    void base_adjoint(const Cubemap& irr_adj, const std::vector<Cubemap>& mip_adjs,
                      Cubemap& base_adj) const {
        require(ops_ready, "env_ops", "training operators not prepared");
        if (base_adj.res != base_res) base_adj = Cubemap(base_res);
        irr_op.apply_transpose(irr_adj, base_adj);
        for (size_t t = 0; t < mip_adjs[0].texel_count(); ++t)
            base_adj.texel(t) += mip_adjs[0].texel(t);
        for (int l = 1; l < params.mip_count; ++l)
            mip_ops[l].apply_transpose(mip_adjs[l], base_adj);
    }
};

// ---------------------------------------------------------------------------
// Equirectangular (lat-long, +y up) <-> cubemap conversion.

inline Vec2 dir_to_equirect(const Vec3& d) {
    Real u = 0.5 + std::atan2(d.x, -d.z) / (2.0 * kPi);
    Real v = std::acos(clamp(d.y, -1.0, 1.0)) / kPi;
    return {u, v};
}

inline Vec3 equirect_to_dir(Real u, Real v) {
    Real theta = v * kPi;
    Real phi = (u - 0.5) * 2.0 * kPi;
    Real st = std::sin(theta);
    return {st * std::sin(phi), std::cos(theta), -st * std::cos(phi)};
}

inline Vec3 sample_equirect(const Image& img, const Vec3& d) {
    Vec2 uv = dir_to_equirect(d);
    Real fx = uv.x * img.width - 0.5;
    Real fy = uv.y * img.height - 0.5;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    Real ax = fx - x0, ay = fy - y0;
    Vec3 out{0, 0, 0};
    for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
            int x = ((x0 + dx) % img.width + img.width) % img.width;  // wrap azimuth
            int y = std::min(img.height - 1, std::max(0, y0 + dy));
            Real w = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
            out += img.rgb(x, y) * w;
        }
    return out;
}

inline Cubemap equirect_to_cubemap(const Image& img, int res) {
    require(img.channels == 3, "io_error", "equirect env must have 3 channels");
    Cubemap cm(res);
    for (int f = 0; f < 6; ++f)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                cm.at(f, x, y) = max(sample_equirect(img, cubemap_texel_dir(f, x, y, res)),
                                     Vec3{0, 0, 0});
    return cm;
}

inline Image cubemap_to_equirect(const Cubemap& cm, int width, int height) {
    Image img(width, height, 3, ColorSpace::Linear);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            Vec3 d = equirect_to_dir((x + 0.5) / width, (y + 0.5) / height);
            img.set_rgb(x, y, cubemap_sample_bilinear(cm, d));
        }
    return img;
}

}  // namespace glint
