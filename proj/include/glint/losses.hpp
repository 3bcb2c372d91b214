#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "glint/cubemap.hpp"
#include "glint/error.hpp"
#include "glint/image.hpp"

namespace glint {

// ---------------------------------------------------------------------------
// Training configuration. Stage schedules and weights default to the
// published values; lambda_color_ssim and the learning rates are ours.

struct Stage1Config {
    int iters = 16000;
    int sds_start = 10000;
    Real lambda_color_ssim = 0.2;
    Real lambda_dc = 0.005;
    Real lambda_dr = 10.0;
    Real lambda_nc = 1.0;
    Real lambda_ns = 0.005;
    Real lambda_sds = 0.0001;
    Real lambda_bce = 0.1;  // applied only when gt alpha masks exist
    Real lambda_dd = 0.0;   // depth distortion is off in the stage total
};

struct Stage2Config {
    int iters = 7000;
    int guidance_start = 3000;
    Real lambda_icc = 0.1;
    Real lambda_iid = 1.0;
    Real lambda_mi_sds = 0.0001;
    Real lambda_tv = 1.0;
};

struct OptimConfig {
    Real lr_center = 1.6e-4;
    Real lr_center_decay = 0.01;  // exponential factor applied across stage 1
    Real lr_rotation = 1e-3;
    Real lr_scale = 5e-3;
    Real lr_opacity = 5e-2;
    Real lr_material = 5e-3;
    Real lr_env = 1e-2;
    Real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int densify_from = 1000, densify_until = 12000, densify_every = 500;
    Real densify_grad_threshold = 2e-4;
    Real prune_opacity = 0.05;
    int opacity_reset_every = 3000;
    int max_surfels = 50000;
    int init_surfels = 4000;
    int train_env_samples = 64;  // frozen-operator sample count per texel
    uint64_t seed = 0;
};

struct TrainConfig {
    Stage1Config stage1;
    Stage2Config stage2;
    Real gamma_exponent_scale = 25.0;
    Real gamma_exponent_clamp = 10.0;
    OptimConfig optim;
    std::string guidance_spool;              // empty = guidance disabled
    Real guidance_timeout_seconds = 60.0;
    std::vector<std::string> mi_sds_envs;    // predetermined lighting set
    int orbit_views = 100;
    Vec3 background{0, 0, 0};
};

struct LossReport {
    std::map<std::string, Real> terms;      // unweighted values
    std::map<std::string, Real> weights;
    Real total = 0;

    void add(const std::string& name, Real value, Real weight) {
        terms[name] = value;
        weights[name] = weight;
        total += weight * value;
    }
};

// ---------------------------------------------------------------------------
// Gaussian-window machinery shared by SSIM value and gradient.

namespace detail {

inline const std::vector<Real>& ssim_kernel() {
    static const std::vector<Real> k = [] {
        std::vector<Real> v(11);
        Real sum = 0;
        for (int i = 0; i < 11; ++i) {
            v[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
            sum += v[i];
        }
        for (Real& x : v) x /= sum;
        return v;
    }();
    return k;
}

// Separable 11-tap blur with zero padding, single channel.
inline void blur_1ch(const std::vector<Real>& src, int w, int h, std::vector<Real>& dst,
                     std::vector<Real>& tmp) {
    const auto& k = ssim_kernel();
    tmp.assign(size_t(w) * h, 0.0);
    dst.assign(size_t(w) * h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Real acc = 0;
            for (int i = -5; i <= 5; ++i) {
                int xx = x + i;
                if (xx < 0 || xx >= w) continue;
                acc += k[i + 5] * src[size_t(y) * w + xx];
            }
            tmp[size_t(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Real acc = 0;
            for (int i = -5; i <= 5; ++i) {
                int yy = y + i;
                if (yy < 0 || yy >= h) continue;
                acc += k[i + 5] * tmp[size_t(yy) * w + x];
            }
            dst[size_t(y) * w + x] = acc;
        }
}

// Border-renormalized window operator W and its transpose.
struct SsimWindow {
    int w = 0, h = 0;
    std::vector<Real> conv1;  // blur of all-ones
    mutable std::vector<Real> tmp;

    void init(int width, int height) {
        w = width;
        h = height;
        std::vector<Real> ones(size_t(w) * h, 1.0);
        blur_1ch(ones, w, h, conv1, tmp);
    }
    void apply(const std::vector<Real>& x, std::vector<Real>& out) const {
        blur_1ch(x, w, h, out, tmp);
        for (size_t i = 0; i < out.size(); ++i) out[i] /= conv1[i];
    }
    void apply_t(const std::vector<Real>& a, std::vector<Real>& out) const {
        std::vector<Real> scaled(a.size());
        for (size_t i = 0; i < a.size(); ++i) scaled[i] = a[i] / conv1[i];
        blur_1ch(scaled, w, h, out, tmp);
    }
};

inline constexpr Real kSsimC1 = 0.01 * 0.01;
inline constexpr Real kSsimC2 = 0.03 * 0.03;

// Mean SSIM of one channel; optionally accumulates d(mean ssim)/dx into adj_x.
inline Real ssim_1ch(const std::vector<Real>& x, const std::vector<Real>& y, int w, int h,
                     std::vector<Real>* adj_x = nullptr, Real adj_scale = 1.0) {
    SsimWindow win;
    win.init(w, h);
    size_t n = size_t(w) * h;
    std::vector<Real> mx, my, ex2, ey2, exy, xx(n), yy(n), xy(n);
    for (size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    win.apply(x, mx);
    win.apply(y, my);
    win.apply(xx, ex2);
    win.apply(yy, ey2);
    win.apply(xy, exy);

    Real total = 0;
    std::vector<Real> dmu, dex2, dexy;
    if (adj_x) {
        dmu.assign(n, 0.0);
        dex2.assign(n, 0.0);
        dexy.assign(n, 0.0);
    }
    for (size_t i = 0; i < n; ++i) {
        Real a1 = 2 * mx[i] * my[i] + kSsimC1;
        Real a2 = 2 * (exy[i] - mx[i] * my[i]) + kSsimC2;
        Real b1 = mx[i] * mx[i] + my[i] * my[i] + kSsimC1;
        Real b2 = (ex2[i] - mx[i] * mx[i]) + (ey2[i] - my[i] * my[i]) + kSsimC2;
        Real f = (a1 * a2) / (b1 * b2);
        total += f;
        if (adj_x) {
            dmu[i] = 2 * my[i] * (a2 - a1) / (b1 * b2) -
                     2 * mx[i] * f * (1.0 / b1 - 1.0 / b2);
            dex2[i] = -f / b2;
            dexy[i] = 2 * a1 / (b1 * b2);
        }
    }
    Real mean = total / Real(n);
    if (adj_x) {
        std::vector<Real> t1, t2, t3;
        win.apply_t(dmu, t1);
        win.apply_t(dex2, t2);
        win.apply_t(dexy, t3);
        Real s = adj_scale / Real(n);
        for (size_t i = 0; i < n; ++i)
            (*adj_x)[i] += s * (t1[i] + 2 * x[i] * t2[i] + y[i] * t3[i]);
    }
    return mean;
}

}  // namespace detail

// Mean SSIM across channels, sRGB-domain values expected.
inline Real ssim(const Image& x, const Image& y) {
    require(x.same_shape(y), "shape_mismatch", "ssim inputs differ in shape");
    size_t n = x.pixel_count();
    Real acc = 0;
    std::vector<Real> cx(n), cy(n);
    for (int c = 0; c < x.channels; ++c) {
        for (size_t p = 0; p < n; ++p) {
            cx[p] = x.values[p * x.channels + c];
            cy[p] = y.values[p * y.channels + c];
        }
        acc += detail::ssim_1ch(cx, cy, x.width, x.height);
    }
    return acc / x.channels;
}

// ---------------------------------------------------------------------------
// Re-rendering loss: (1-lambda) L1 + lambda (1 - SSIM)/2, compared in sRGB.
// render is linear RGB; target is already sRGB in [0,1].

inline Real l_color(const Image& render_linear, const Image& target_srgb, Real lambda_ssim,
                    Image* adj_render = nullptr, Real weight = 1.0) {
    require(render_linear.same_shape(target_srgb), "shape_mismatch",
            "l_color inputs differ in shape");
    size_t n = render_linear.values.size();
    std::vector<Real> x(n), dx(n, 0.0);
    for (size_t i = 0; i < n; ++i) x[i] = srgb_encode_ext(render_linear.values[i]);

    Real l1 = 0;
    for (size_t i = 0; i < n; ++i) {
        Real d = x[i] - target_srgb.values[i];
        l1 += std::abs(d);
        if (adj_render) dx[i] += (1.0 - lambda_ssim) * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n;
    }
    l1 /= n;

    size_t npix = render_linear.pixel_count();
    int ch = render_linear.channels;
    std::vector<Real> cx(npix), cy(npix), cadj;
    Real ssim_acc = 0;
    for (int c = 0; c < ch; ++c) {
        for (size_t p = 0; p < npix; ++p) {
            cx[p] = x[p * ch + c];
            cy[p] = target_srgb.values[p * ch + c];
        }
        if (adj_render) {
            cadj.assign(npix, 0.0);
            // d loss / d ssim = -lambda/2, averaged over channels
            ssim_acc += detail::ssim_1ch(cx, cy, render_linear.width, render_linear.height,
                                         &cadj, -lambda_ssim / (2.0 * ch));
            for (size_t p = 0; p < npix; ++p) dx[p * ch + c] += cadj[p];
        } else {
            ssim_acc += detail::ssim_1ch(cx, cy, render_linear.width, render_linear.height);
        }
    }
    Real mssim = ssim_acc / ch;
    Real loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - mssim) / 2.0;

    if (adj_render)
        for (size_t i = 0; i < n; ++i)
            adj_render->values[i] +=
                weight * dx[i] * srgb_encode_ext_deriv(render_linear.values[i]);
    return loss;
}

// ---------------------------------------------------------------------------
// Depth losses

struct PearsonResult {
    Real loss = 0;
    bool degenerate = false;
};

// 1 - PCC over masked pixels; invariant to positive affine depth ambiguity.
inline PearsonResult pearson_depth_loss(const Image& depth, const Image& prior,
                                        const Image& mask, Image* adj_depth = nullptr,
                                        Real weight = 1.0) {
    require(depth.same_shape(prior), "shape_mismatch", "pearson inputs differ in shape");
    std::vector<size_t> idx;
    for (size_t i = 0; i < depth.values.size(); ++i)
        if (mask.values.empty() || mask.values[i] >= 0.5) idx.push_back(i);
    PearsonResult res;
    if (idx.size() < 2) {
        res.degenerate = true;
        return res;
    }
    Real mx = 0, my = 0;
    for (size_t i : idx) {
        mx += depth.values[i];
        my += prior.values[i];
    }
    mx /= idx.size();
    my /= idx.size();
    Real sxx = 0, syy = 0, sxy = 0;
    for (size_t i : idx) {
        Real dx = depth.values[i] - mx, dy = prior.values[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx < 1e-12 || syy < 1e-12) {
        res.degenerate = true;
        return res;
    }
    Real denom = std::sqrt(sxx * syy);
    Real r = sxy / denom;
    res.loss = 1.0 - r;
    if (adj_depth)
        for (size_t i : idx) {
            Real dx = depth.values[i] - mx, dy = prior.values[i] - my;
            adj_depth->values[i] += weight * -((dy - (sxy / sxx) * dx) / denom);
        }
    return res;
}

// Local depth-ranking hinge over seeded pixel pairs inside square patches.
inline Real depth_ranking_loss(const Image& depth, const Image& prior, const Image& mask,
                               uint64_t seed, Image* adj_depth = nullptr, Real weight = 1.0,
                               int patch = 32, int pairs_per_patch = 64,
                               Real margin = 1e-4) {
    require(depth.same_shape(prior), "shape_mismatch", "ranking inputs differ in shape");
    int w = depth.width, h = depth.height;
    std::vector<std::pair<size_t, size_t>> pairs;
    for (int py = 0; py < h; py += patch)
        for (int px = 0; px < w; px += patch) {
            std::vector<size_t> members;
            for (int y = py; y < std::min(h, py + patch); ++y)
                for (int x = px; x < std::min(w, px + patch); ++x) {
                    size_t i = size_t(y) * w + x;
                    if (mask.values.empty() || mask.values[i] >= 0.5) members.push_back(i);
                }
            if (members.size() < 2) continue;
            Rng rng(hash_combine(seed, (uint64_t(py) << 20) | uint64_t(px)));
            for (int k = 0; k < pairs_per_patch; ++k) {
                size_t a = members[rng.uniform_index(uint32_t(members.size()))];
                size_t b = members[rng.uniform_index(uint32_t(members.size()))];
                if (a == b) continue;
                pairs.emplace_back(a, b);
            }
        }
    if (pairs.empty()) return 0.0;
    Real total = 0;
    for (auto& [a, b] : pairs) {
        size_t p = a, q = b;
        if (prior.values[p] == prior.values[q]) continue;
        if (prior.values[p] > prior.values[q]) std::swap(p, q);  // prior says p closer
        Real viol = depth.values[p] - depth.values[q] + margin;
        if (viol > 0) {
            total += viol;
            if (adj_depth) {
                adj_depth->values[p] += weight / pairs.size();
                adj_depth->values[q] -= weight / pairs.size();
            }
        }
    }
    return total / pairs.size();
}

// ---------------------------------------------------------------------------
// Normal losses

// Mean (1 - N . N_hat) over masked pixels with a valid reference normal.
inline Real normal_consistency_loss(const Image& n, const Image& n_ref, const Image& mask,
                                    Image* adj_n = nullptr, Image* adj_ref = nullptr,
                                    Real weight = 1.0) {
    require(n.same_shape(n_ref), "shape_mismatch", "normal loss inputs differ in shape");
    size_t npix = n.pixel_count();
    std::vector<size_t> idx;
    for (size_t p = 0; p < npix; ++p) {
        if (!mask.values.empty() && mask.values[p] < 0.5) continue;
        Vec3 r{n_ref.values[p * 3], n_ref.values[p * 3 + 1], n_ref.values[p * 3 + 2]};
        if (length_sq(r) == 0.0) continue;
        idx.push_back(p);
    }
    if (idx.empty()) return 0.0;
    Real total = 0;
    for (size_t p : idx) {
        Vec3 a{n.values[p * 3], n.values[p * 3 + 1], n.values[p * 3 + 2]};
        Vec3 b{n_ref.values[p * 3], n_ref.values[p * 3 + 1], n_ref.values[p * 3 + 2]};
        total += 1.0 - dot(a, b);
        if (adj_n) {
            adj_n->values[p * 3] += weight * -b.x / idx.size();
            adj_n->values[p * 3 + 1] += weight * -b.y / idx.size();
            adj_n->values[p * 3 + 2] += weight * -b.z / idx.size();
        }
        if (adj_ref) {
            adj_ref->values[p * 3] += weight * -a.x / idx.size();
            adj_ref->values[p * 3 + 1] += weight * -a.y / idx.size();
            adj_ref->values[p * 3 + 2] += weight * -a.z / idx.size();
        }
    }
    return total / idx.size();
}

// Total variation of the residual (N - N_hat): constant offsets are free.
inline Real normal_smoothness_loss(const Image& n, const Image& n_prior, const Image& mask,
                                   Image* adj_n = nullptr, Real weight = 1.0) {
    require(n.same_shape(n_prior), "shape_mismatch", "smoothness inputs differ in shape");
    int w = n.width, h = n.height, ch = n.channels;
    auto masked = [&](int x, int y) {
        return mask.values.empty() || mask.values[size_t(y) * w + x] >= 0.5;
    };
    size_t mask_count = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (masked(x, y)) ++mask_count;
    if (mask_count == 0) return 0.0;
    Real total = 0;
    auto res = [&](int x, int y, int c) {
        size_t i = (size_t(y) * w + x) * ch + c;
        return n.values[i] - n_prior.values[i];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!masked(x, y)) continue;
            for (int c = 0; c < ch; ++c) {
                if (x + 1 < w && masked(x + 1, y)) {
                    Real d = res(x + 1, y, c) - res(x, y, c);
                    total += std::abs(d);
                    if (adj_n && d != 0) {
                        Real s = weight * (d > 0 ? 1.0 : -1.0) / mask_count;
                        adj_n->values[(size_t(y) * w + x + 1) * ch + c] += s;
                        adj_n->values[(size_t(y) * w + x) * ch + c] -= s;
                    }
                }
                if (y + 1 < h && masked(x, y + 1)) {
                    Real d = res(x, y + 1, c) - res(x, y, c);
                    total += std::abs(d);
                    if (adj_n && d != 0) {
                        Real s = weight * (d > 0 ? 1.0 : -1.0) / mask_count;
                        adj_n->values[(size_t(y + 1) * w + x) * ch + c] += s;
                        adj_n->values[(size_t(y) * w + x) * ch + c] -= s;
                    }
                }
            }
        }
    return total / mask_count;
}

// ---------------------------------------------------------------------------
// Alpha-mask BCE

inline Real bce_alpha_loss(const Image& alpha, const Image& gt_alpha,
                           Image* adj_alpha = nullptr, Real weight = 1.0) {
    require(alpha.same_shape(gt_alpha), "shape_mismatch", "bce inputs differ in shape");
    size_t n = alpha.values.size();
    Real total = 0;
    for (size_t i = 0; i < n; ++i) {
        Real a = clamp(alpha.values[i], 1e-6, 1.0 - 1e-6);
        Real g = gt_alpha.values[i];
        total += -(g * std::log(a) + (1.0 - g) * std::log(1.0 - a));
        if (adj_alpha && alpha.values[i] > 1e-6 && alpha.values[i] < 1.0 - 1e-6)
            adj_alpha->values[i] += weight * (-g / a + (1.0 - g) / (1.0 - a)) / n;
    }
    return total / n;
}

// ---------------------------------------------------------------------------
// Segmentation-consistency (ICC) machinery

// Clamped exponential of the mask area fraction.
inline Real gamma_weight(size_t mask_pixels, size_t image_pixels, Real scale = 25.0,
                         Real max_exponent = 10.0) {
    require(image_pixels > 0, "bad_args", "gamma needs a nonzero image");
    Real frac = Real(mask_pixels) / Real(image_pixels);
    return std::exp(std::min(scale * frac, max_exponent));
}

struct SegMask {
    uint32_t class_id = 0;
    std::vector<size_t> pixels;
};

// Connected components (4-neighborhood) of the argmax seg plane, thresholded
// at blend weight 0.5, dropping components under min_pixels.
inline std::vector<SegMask> segment_masks(const Image& seg, int min_pixels = 16) {
    int w = seg.width, h = seg.height, k = seg.channels;
    std::vector<int> label(size_t(w) * h, -1);  // class id per pixel, -1 = none
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t p = size_t(y) * w + x;
            int best = -1;
            Real bw = 0;
            for (int c = 0; c < k; ++c) {
                Real v = seg.values[p * k + c];
                if (v > bw) {
                    bw = v;
                    best = c;
                }
            }
            if (best >= 1 && bw >= 0.5) label[p] = best;  // class 0 = unassigned
        }
    std::vector<SegMask> out;
    std::vector<char> seen(size_t(w) * h, 0);
    std::vector<size_t> stack;
    for (size_t start = 0; start < label.size(); ++start) {
        if (seen[start] || label[start] < 0) continue;
        SegMask m;
        m.class_id = uint32_t(label[start]);
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            size_t p = stack.back();
            stack.pop_back();
            m.pixels.push_back(p);
            int x = int(p % w), y = int(p / w);
            const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
            for (int d = 0; d < 4; ++d) {
                int nx = x + dx[d], ny = y + dy[d];
                if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                size_t q = size_t(ny) * w + nx;
                if (!seen[q] && label[q] == label[start]) {
                    seen[q] = 1;
                    stack.push_back(q);
                }
            }
        }
        if (int(m.pixels.size()) >= min_pixels) out.push_back(std::move(m));
    }
    return out;
}

struct IccAdjoints {
    Image roughness, metallic, albedo, error;
};

// Intra-class consistency over rendered masks: variance penalties on
// roughness/metallic, conditional albedo variance, and the error-weighted
// specularity preference. error = per-pixel re-render error map.
inline Real icc_loss(const std::vector<SegMask>& masks, const Image& roughness,
                     const Image& metallic, const Image& albedo, const Image& error,
                     Real gamma_scale = 25.0, Real gamma_clamp = 10.0,
                     IccAdjoints* adj = nullptr, Real weight = 1.0) {
    if (masks.empty()) return 0.0;
    size_t image_pixels = roughness.pixel_count();
    Real total = 0;
    Real mscale = weight / Real(masks.size());
    for (const auto& m : masks) {
        size_t n = m.pixels.size();
        Real g = gamma_weight(n, image_pixels, gamma_scale, gamma_clamp);
        Real rm = 0, mm = 0, em = 0;
        Vec3 am{0, 0, 0};
        for (size_t p : m.pixels) {
            rm += roughness.values[p];
            mm += metallic.values[p];
            em += error.values[p];
            am += Vec3{albedo.values[p * 3], albedo.values[p * 3 + 1],
                       albedo.values[p * 3 + 2]};
        }
        rm /= n;
        mm /= n;
        em /= n;
        am = am / Real(n);
        Real var_r = 0, var_m = 0;
        Vec3 var_a{0, 0, 0};
        for (size_t p : m.pixels) {
            var_r += (roughness.values[p] - rm) * (roughness.values[p] - rm);
            var_m += (metallic.values[p] - mm) * (metallic.values[p] - mm);
            Vec3 da = Vec3{albedo.values[p * 3], albedo.values[p * 3 + 1],
                           albedo.values[p * 3 + 2]} -
                      am;
            var_a += da * da;
        }
        var_r /= n;
        var_m /= n;
        var_a = var_a / Real(n);
        Real mean_var_a = (var_a.x + var_a.y + var_a.z) / 3.0;

        Real l_rm = var_r + var_m;
        Real wa = (1.0 - rm) + mm;
        Real l_a = wa * mean_var_a;
        Real we = (1.0 - mm) + rm;
        Real l_e = we * em;
        total += g * (l_rm + l_a + l_e);

        if (adj) {
            for (size_t p : m.pixels) {
                Real dr = 2.0 * (roughness.values[p] - rm) / n;   // d var_r
                Real dm = 2.0 * (metallic.values[p] - mm) / n;    // d var_m
                // weighting factors pull in the means
                adj->roughness.values[p] +=
                    g * mscale * (dr + (-1.0 / n) * mean_var_a + (1.0 / n) * em);
                adj->metallic.values[p] +=
                    g * mscale * (dm + (1.0 / n) * mean_var_a + (-1.0 / n) * em);
                for (int c = 0; c < 3; ++c) {
                    Real a = albedo.values[p * 3 + c];
                    Real mean_c = am[c];
                    adj->albedo.values[p * 3 + c] +=
                        g * mscale * wa * (2.0 * (a - mean_c) / n) / 3.0;
                }
                adj->error.values[p] += g * mscale * we / n;
            }
        }
    }
    return total / masks.size();
}

// ---------------------------------------------------------------------------
// IID albedo prior

// Linear decrease: 1 at the first iteration, 0 at the last executed one.
inline Real iid_beta(int iteration, int stage_iters) {
    if (stage_iters <= 1) return iteration <= 0 ? 1.0 : 0.0;
    return std::max(0.0, 1.0 - Real(iteration) / Real(stage_iters - 1));
}

// beta(tau) * masked MSE between the rendered albedo plane and the IID prior.
inline Real iid_loss(const Image& albedo, const Image& prior, const Image& mask,
                     int iteration, int stage_iters, Image* adj_albedo = nullptr,
                     Real weight = 1.0) {
    require(albedo.same_shape(prior), "shape_mismatch", "iid inputs differ in shape");
    Real beta = iid_beta(iteration, stage_iters);
    size_t npix = albedo.pixel_count();
    std::vector<size_t> idx;
    for (size_t p = 0; p < npix; ++p)
        if (mask.values.empty() || mask.values[p] >= 0.5) idx.push_back(p);
    if (idx.empty() || beta == 0.0) return 0.0;
    Real total = 0;
    size_t count = idx.size() * albedo.channels;
    for (size_t p : idx)
        for (int c = 0; c < albedo.channels; ++c) {
            Real d = albedo.values[p * albedo.channels + c] -
                     prior.values[p * albedo.channels + c];
            total += d * d;
            if (adj_albedo)
                adj_albedo->values[p * albedo.channels + c] +=
                    weight * beta * 2.0 * d / count;
        }
    return beta * total / count;
}

// ---------------------------------------------------------------------------
// Environment smoothness

// Mean L1 of forward differences within each cube face.
inline Real env_tv_loss(const Cubemap& base, Cubemap* adj = nullptr, Real weight = 1.0) {
    int res = base.res;
    if (res < 2) return 0.0;
    size_t count = size_t(6) * 2 * res * (res - 1) * 3;
    Real total = 0;
    for (int f = 0; f < 6; ++f)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                for (int c = 0; c < 3; ++c) {
                    if (x + 1 < res) {
                        Real d = base.at(f, x + 1, y)[c] - base.at(f, x, y)[c];
                        total += std::abs(d);
                        if (adj && d != 0) {
                            Real s = weight * (d > 0 ? 1.0 : -1.0) / count;
                            adj->at(f, x + 1, y)[c] += s;
                            adj->at(f, x, y)[c] -= s;
                        }
                    }
                    if (y + 1 < res) {
                        Real d = base.at(f, x, y + 1)[c] - base.at(f, x, y)[c];
                        total += std::abs(d);
                        if (adj && d != 0) {
                            Real s = weight * (d > 0 ? 1.0 : -1.0) / count;
                            adj->at(f, x, y + 1)[c] += s;
                            adj->at(f, x, y)[c] -= s;
                        }
                    }
                }
    return total / count;
}

// ---------------------------------------------------------------------------
// External diffusion-guidance hook: file-spool protocol. The provider watches
// spool_dir for {req_<iter>.json, req_<iter>.exr} and answers res_<iter>.exr.

struct GuidanceRequest {
    int iteration = 0;
    int stage = 1;
    int view_id = 0;
    int lighting_id = -1;
    int width = 0, height = 0;
};

class GuidanceHook {
  public:
    std::string spool_dir;  // empty: hook disabled
    Real timeout_seconds = 60.0;

    bool enabled() const { return !spool_dir.empty(); }

    std::optional<Image> request(const Image& render_linear, const GuidanceRequest& req) const;
};

}  // namespace glint

// Implementation pulled below to keep EXR includes out of the declarations.
#include "glint/io_exr.hpp"
#include "json.hpp"

namespace glint {

inline std::optional<Image> GuidanceHook::request(const Image& render_linear,
                                                  const GuidanceRequest& req) const {
    if (!enabled()) return std::nullopt;
    namespace fs = std::filesystem;
    fs::create_directories(spool_dir);
    std::string stem = "req_" + std::to_string(req.iteration);
    fs::path exr_tmp = fs::path(spool_dir) / (stem + ".exr.tmp");
    fs::path exr_path = fs::path(spool_dir) / (stem + ".exr");
    fs::path json_tmp = fs::path(spool_dir) / (stem + ".json.tmp");
    fs::path json_path = fs::path(spool_dir) / (stem + ".json");
    write_exr(render_linear, exr_tmp.string());
    fs::rename(exr_tmp, exr_path);
    nlohmann::json j{{"iteration", req.iteration}, {"stage", req.stage},
                     {"view_id", req.view_id},    {"lighting_id", req.lighting_id},
                     {"width", req.width},        {"height", req.height}};
    {
        std::ofstream os(json_tmp);
        os << j.dump();
    }
    fs::rename(json_tmp, json_path);

    fs::path res_path = fs::path(spool_dir) / ("res_" + std::to_string(req.iteration) + ".exr");
    auto deadline = std::chrono::steady_clock::now() +
                    std::chrono::milliseconds(int64_t(timeout_seconds * 1000));
    while (std::chrono::steady_clock::now() < deadline) {
        if (fs::exists(res_path)) {
            Image adj = read_exr(res_path.string());
            require(adj.width == render_linear.width && adj.height == render_linear.height,
                    "guidance_shape", "guidance adjoint shape mismatch");
            return adj;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    std::cerr << "[glint] guidance provider timed out at iteration " << req.iteration
              << "; skipping\n";
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Config serialization and key=value overrides (CLI --set, run-log header).

namespace detail {

struct ConfigBinding {
    const char* key;
    enum Kind { kReal, kInt, kU64, kString } kind;
    void* ptr;
};

inline std::vector<ConfigBinding> config_bindings(TrainConfig& c) {
    using B = ConfigBinding;
    return {
        {"stage1.iters", B::kInt, &c.stage1.iters},
        {"stage1.sds_start", B::kInt, &c.stage1.sds_start},
        {"stage1.lambda_color_ssim", B::kReal, &c.stage1.lambda_color_ssim},
        {"stage1.lambda_dc", B::kReal, &c.stage1.lambda_dc},
        {"stage1.lambda_dr", B::kReal, &c.stage1.lambda_dr},
        {"stage1.lambda_nc", B::kReal, &c.stage1.lambda_nc},
        {"stage1.lambda_ns", B::kReal, &c.stage1.lambda_ns},
        {"stage1.lambda_sds", B::kReal, &c.stage1.lambda_sds},
        {"stage1.lambda_bce", B::kReal, &c.stage1.lambda_bce},
        {"stage1.lambda_dd", B::kReal, &c.stage1.lambda_dd},
        {"stage2.iters", B::kInt, &c.stage2.iters},
        {"stage2.guidance_start", B::kInt, &c.stage2.guidance_start},
        {"stage2.lambda_icc", B::kReal, &c.stage2.lambda_icc},
        {"stage2.lambda_iid", B::kReal, &c.stage2.lambda_iid},
        {"stage2.lambda_mi_sds", B::kReal, &c.stage2.lambda_mi_sds},
        {"stage2.lambda_tv", B::kReal, &c.stage2.lambda_tv},
        {"gamma.scale", B::kReal, &c.gamma_exponent_scale},
        {"gamma.clamp", B::kReal, &c.gamma_exponent_clamp},
        {"optim.lr_center", B::kReal, &c.optim.lr_center},
        {"optim.lr_center_decay", B::kReal, &c.optim.lr_center_decay},
        {"optim.lr_rotation", B::kReal, &c.optim.lr_rotation},
        {"optim.lr_scale", B::kReal, &c.optim.lr_scale},
        {"optim.lr_opacity", B::kReal, &c.optim.lr_opacity},
        {"optim.lr_material", B::kReal, &c.optim.lr_material},
        {"optim.lr_env", B::kReal, &c.optim.lr_env},
        {"optim.beta1", B::kReal, &c.optim.beta1},
        {"optim.beta2", B::kReal, &c.optim.beta2},
        {"optim.eps", B::kReal, &c.optim.eps},
        {"optim.densify_from", B::kInt, &c.optim.densify_from},
        {"optim.densify_until", B::kInt, &c.optim.densify_until},
        {"optim.densify_every", B::kInt, &c.optim.densify_every},
        {"optim.densify_grad_threshold", B::kReal, &c.optim.densify_grad_threshold},
        {"optim.prune_opacity", B::kReal, &c.optim.prune_opacity},
        {"optim.opacity_reset_every", B::kInt, &c.optim.opacity_reset_every},
        {"optim.max_surfels", B::kInt, &c.optim.max_surfels},
        {"optim.init_surfels", B::kInt, &c.optim.init_surfels},
        {"optim.train_env_samples", B::kInt, &c.optim.train_env_samples},
        {"optim.seed", B::kU64, &c.optim.seed},
        {"guidance.spool", B::kString, &c.guidance_spool},
        {"guidance.timeout", B::kReal, &c.guidance_timeout_seconds},
        {"orbit_views", B::kInt, &c.orbit_views},
        {"background.r", B::kReal, &c.background.x},
        {"background.g", B::kReal, &c.background.y},
        {"background.b", B::kReal, &c.background.z},
    };
}

}  // namespace detail

inline void config_set(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (auto& b : detail::config_bindings(cfg)) {
        if (key != b.key) continue;
        switch (b.kind) {
            case detail::ConfigBinding::kReal: *static_cast<Real*>(b.ptr) = std::stod(value); break;
            case detail::ConfigBinding::kInt: *static_cast<int*>(b.ptr) = std::stoi(value); break;
            case detail::ConfigBinding::kU64: *static_cast<uint64_t*>(b.ptr) = std::stoull(value); break;
            case detail::ConfigBinding::kString: *static_cast<std::string*>(b.ptr) = value; break;
        }
        return;
    }
    fail("bad_config_key", "unknown config key: " + key);
}

inline nlohmann::json config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    auto bindings = detail::config_bindings(const_cast<TrainConfig&>(cfg));
    for (const auto& b : bindings) {
        switch (b.kind) {
            case detail::ConfigBinding::kReal: j[b.key] = *static_cast<const Real*>(b.ptr); break;
            case detail::ConfigBinding::kInt: j[b.key] = *static_cast<const int*>(b.ptr); break;
            case detail::ConfigBinding::kU64: j[b.key] = *static_cast<const uint64_t*>(b.ptr); break;
            case detail::ConfigBinding::kString: j[b.key] = *static_cast<const std::string*>(b.ptr); break;
        }
    }
    j["mi_sds_envs"] = cfg.mi_sds_envs;
    return j;
}

}  // namespace glint
