#include <catch2/catch_amalgamated.hpp>

#include "glint/shading.hpp"
#include "test_helpers.hpp"

using namespace glint;
using Catch::Approx;

#include "test_oracles.hpp"

using oracles::irradiance_quadrature;
using oracles::lobe_env;
using oracles::prefilter_quadrature;


TEST_CASE("texel solid angles tile the sphere", "[shading]") {
    for (int res : {4, 16}) {
        Real sum = 0;
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) sum += texel_solid_angle(x, y, res);
        CHECK(sum * 6 == Approx(4 * kPi).epsilon(1e-9));
    }
}

TEST_CASE("cubemap direction mapping round trips", "[shading]") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        Vec3 d = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()});
        CubeCoord c = dir_to_cube(d);
        Vec3 back = cubemap_dir(c.face, c.s, c.t);
        REQUIRE(length(back - d) < 1e-12);
    }
}

TEST_CASE("ggx_d closed forms", "[shading]") {
    CHECK(ggx_d(1.0, 1.0) == Approx(1.0 / kPi));                 // alpha = 1
    CHECK(ggx_d(1.0, std::sqrt(0.5)) == Approx(1.0 / (kPi * 0.25)));  // alpha = 0.5
    Real a = ggx_alpha(0.7);
    CHECK(ggx_d(0.0, 0.7) == Approx(a * a / kPi));
}

TEST_CASE("fresnel_schlick closed forms", "[shading]") {
    Vec3 f0{0.04, 0.04, 0.04};
    CHECK(length(fresnel_schlick(1.0, f0) - f0) == Approx(0.0).margin(1e-12));
    CHECK(length(fresnel_schlick(0.0, f0) - Vec3{1, 1, 1}) == Approx(0.0).margin(1e-12));
    CHECK(fresnel_schlick(0.5, f0).x == Approx(0.04 + 0.96 * 0.03125));
}

TEST_CASE("smith_g closed forms", "[shading]") {
    CHECK(smith_g1(0.3, 0.0) == Approx(1.0));
    CHECK(smith_g(1.0, 1.0, 0.5) == Approx(1.0).epsilon(1e-9));
    // k = alpha^2/2 = 0.5 at roughness 1: G1(0.5) = 2/3, G = 4/9
    CHECK(smith_g(0.5, 0.5, 1.0) == Approx(4.0 / 9.0));
}

TEST_CASE("srgb transfer", "[shading]") {
    CHECK(srgb_encode(0.0) == 0.0);
    CHECK(srgb_encode(1.0) == Approx(1.0));
    CHECK(srgb_decode(0.5) == Approx(0.21404).epsilon(1e-4));
    Rng rng(9);
    Real max_err = 0;
    for (int i = 0; i < 1000; ++i) {
        Real v = rng.uniform();
        max_err = std::max(max_err, std::abs(srgb_decode(srgb_encode(v)) - v));
    }
    CHECK(max_err < 1e-6);
}

TEST_CASE("irradiance of a constant environment is the constant", "[shading]") {
    Cubemap base(8, Vec3{1, 1, 1});
    Cubemap irr = build_irradiance(base, 8, 4096);
    for (size_t t = 0; t < irr.texel_count(); ++t) {
        CHECK(irr.texel(t).x == Approx(1.0).margin(1e-3));
        CHECK(irr.texel(t).z == Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("irradiance ordering for a single lit face", "[shading]") {
    Cubemap base(8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) base.at(4, x, y) = Vec3{1, 1, 1};  // +z face lit
    Cubemap irr = build_irradiance(base, 8, 4096);
    Real facing = irr.at(4, 4, 4).x;    // normal ~ +z
    Real opposite = irr.at(5, 4, 4).x;  // normal ~ -z
    Real side = irr.at(0, 4, 4).x;      // normal ~ +x
    CHECK(facing > side);
    CHECK(side > opposite);
    CHECK(opposite < 0.01);
}

TEST_CASE("irradiance of a small patch matches the point-light formula", "[shading]") {
    // one lit texel on the +z face of a 16x16 base: E(n) ~ L * dw * (n.d) / pi
    Cubemap base(16);
    int tx = 8, ty = 8;
    Vec3 L{3, 3, 3};
    base.at(4, tx, ty) = L;
    Vec3 patch_dir = cubemap_texel_dir(4, tx, ty, 16);
    Real dw = texel_solid_angle(tx, ty, 16);
    Cubemap irr = build_irradiance(base, 16, 65536);  // dense sampling for a tiny patch
    for (Vec3 n : {normalize(Vec3{0, 0, 1}), normalize(Vec3{0.3, 0.2, 1}),
                   normalize(Vec3{-0.5, 0.1, 1})}) {
        Real expect = L.x * dw * std::max(0.0, dot(n, patch_dir)) / kPi;
        size_t idx = cubemap_nearest_index(16, n);
        Vec3 texel_n = cubemap_texel_dir(int(idx / (16 * 16)), int(idx % 16),
                                         int((idx / 16) % 16), 16);
        Real expect_texel = L.x * dw * std::max(0.0, dot(texel_n, patch_dir)) / kPi;
        Real got = irr.texel(idx).x;
        CHECK(got == Approx(expect_texel).epsilon(0.05));
        (void)expect;
    }
}

TEST_CASE("irradiance matches quadrature within 2% RMS on a 16x16 base", "[shading]") {
    Cubemap base = lobe_env(16);
    Cubemap irr = build_irradiance(base, 16, 4096);
    Real err2 = 0, ref2 = 0;
    for (int f = 0; f < 6; ++f)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                Vec3 n = cubemap_texel_dir(f, x, y, 16);
                Vec3 ref = irradiance_quadrature(base, n);
                Vec3 got = irr.at(f, x, y);
                err2 += length_sq(got - ref);
                ref2 += length_sq(ref);
            }
    Real rel_rms = std::sqrt(err2 / ref2);
    INFO("irradiance rel RMS " << rel_rms);
    CHECK(rel_rms < 0.02);
}

TEST_CASE("prefilter of a constant environment is the constant", "[shading]") {
    Cubemap base(16, Vec3{0.7, 0.7, 0.7});
    for (int level = 1; level <= 4; ++level) {
        Cubemap out = prefilter_level(base, 16 >> level, level / 4.0, 1024);
        for (size_t t = 0; t < out.texel_count(); ++t)
            REQUIRE(out.texel(t).x == Approx(0.7).margin(1e-3));
    }
}

TEST_CASE("roughness-zero level equals the base exactly", "[shading]") {
    Cubemap base = testutil::random_cubemap(8, 3);
    EnvLight env;
    env.params.irradiance_samples = 256;
    env.params.prefilter_samples = 128;
    env.bake(base);
    REQUIRE(env.mips[0].res == base.res);
    for (size_t t = 0; t < base.texel_count(); ++t)
        REQUIRE(length(env.mips[0].texel(t) - base.texel(t)) == 0.0);
}

TEST_CASE("prefilter matches GGX convolution quadrature", "[shading]") {
    SECTION("single bright texel, roughness 0.5, 3% RMS") {
        Cubemap base(16);
        base.at(4, 7, 9) = Vec3{5, 5, 5};
        int out_res = 8;
        Cubemap got = prefilter_level(base, out_res, 0.5, 1 << 16);
        Real err2 = 0, ref2 = 0;
        for (int f = 0; f < 6; ++f)
            for (int y = 0; y < out_res; ++y)
                for (int x = 0; x < out_res; ++x) {
                    Vec3 r_dir = cubemap_texel_dir(f, x, y, out_res);
                    Vec3 ref = prefilter_quadrature(base, r_dir, 0.5);
                    err2 += length_sq(got.at(f, x, y) - ref);
                    ref2 += length_sq(ref);
                }
        Real rel_rms = std::sqrt(err2 / ref2);
        INFO("delta-env prefilter rel RMS " << rel_rms);
        CHECK(rel_rms < 0.03);
    }
    SECTION("smooth 16x16 base at default quality, 2% RMS") {
        Cubemap base = lobe_env(16);
        for (int level = 1; level <= 4; ++level) {
            int out_res = std::max(16 >> level, 1);
            Real rough = level / 4.0;
            Cubemap got = prefilter_level(base, out_res, rough, 1024);
            Real err2 = 0, ref2 = 0;
            for (int f = 0; f < 6; ++f)
                for (int y = 0; y < out_res; ++y)
                    for (int x = 0; x < out_res; ++x) {
                        Vec3 r_dir = cubemap_texel_dir(f, x, y, out_res);
                        Vec3 ref = prefilter_quadrature(base, r_dir, rough);
                        err2 += length_sq(got.at(f, x, y) - ref);
                        ref2 += length_sq(ref);
                    }
            Real rel_rms = std::sqrt(err2 / ref2);
            INFO("level " << level << " rel RMS " << rel_rms);
            CHECK(rel_rms < 0.02);
        }
    }
}

TEST_CASE("brdf lut bounds and limits", "[shading]") {
    const Image& lut = default_brdf_lut();
    for (int y = 0; y < lut.height; ++y)
        for (int x = 0; x < lut.width; ++x) {
            Real s = lut.at(x, y, 0) + lut.at(x, y, 1);
            REQUIRE(s >= 0.0);
            REQUIRE(s <= 1.0 + 1e-9);
        }
    // mirror limit: n.v = 1, r -> 0
    Image fine = build_brdf_lut(64, 4096, 1);
    Vec2 ab = sample_lut(fine, 1.0, 0.02);
    CHECK(ab.x == Approx(1.0).margin(0.02));
    CHECK(ab.y == Approx(0.0).margin(0.02));
}

TEST_CASE("brdf lut converges across seeds", "[shading]") {
    Image a = build_brdf_lut(32, 2048, 1);
    Image b = build_brdf_lut(32, 2048, 2);
    Real err2 = 0;
    for (size_t i = 0; i < a.values.size(); ++i)
        err2 += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
    Real rms = std::sqrt(err2 / a.values.size());
    INFO("lut seed-to-seed RMS " << rms);
    CHECK(rms < 0.01);
}

TEST_CASE("mc reference on constant light is Lambertian", "[shading]") {
    Cubemap base(8, Vec3{0.8, 0.8, 0.8});
    ShadePoint pt;
    pt.normal = normalize(Vec3{0.3, 0.5, 1});
    pt.view = normalize(Vec3{0, 0.2, 1});
    pt.albedo = {0.6, 0.4, 0.2};
    pt.roughness = 1.0;
    pt.metallic = 0.0;
    Vec3 got = mc_reference_shade(pt, base, 8192, 3);
    // diffuse-dominated: a * L within 2% plus the small specular lobe
    CHECK(got.x == Approx(0.6 * 0.8).epsilon(0.035));
    CHECK(got.y == Approx(0.4 * 0.8).epsilon(0.035));
}

TEST_CASE("mc reference white furnace stays bounded", "[shading]") {
    Cubemap base(8, Vec3{1, 1, 1});
    ShadePoint pt;
    pt.normal = {0, 0, 1};
    pt.view = normalize(Vec3{0.4, 0.1, 1});
    pt.albedo = {1, 1, 1};
    pt.metallic = 0.0;
    for (Real r : {0.02, 0.5, 1.0}) {
        pt.roughness = r;
        Vec3 out = mc_reference_shade(pt, base, 8192, 11);
        INFO("roughness " << r << " furnace " << out.x);
        CHECK(out.x <= 1.02);
        CHECK(out.y <= 1.02);
        CHECK(out.z <= 1.02);
    }
}

TEST_CASE("mc reference is seed-deterministic", "[shading]") {
    Cubemap base = lobe_env(8);
    ShadePoint pt;
    pt.normal = normalize(Vec3{0.2, 0.3, 1});
    pt.view = normalize(Vec3{-0.1, 0.2, 1});
    pt.albedo = {0.5, 0.5, 0.5};
    pt.roughness = 0.4;
    pt.metallic = 0.5;
    Vec3 a = mc_reference_shade(pt, base, 1024, 42);
    Vec3 b = mc_reference_shade(pt, base, 1024, 42);
    CHECK(length(a - b) == 0.0);
}

TEST_CASE("shade_deferred constant-light diffuse term", "[shading]") {
    Cubemap base(16, Vec3{0.9, 0.9, 0.9});
    EnvLight env;
    env.params.irradiance_samples = 1024;
    env.params.prefilter_samples = 256;
    env.bake(base);
    ShadePoint pt;
    pt.normal = normalize(Vec3{0.1, -0.2, 1});
    pt.view = normalize(Vec3{0, 0, 1});
    pt.albedo = {0.5, 0.5, 0.5};
    pt.roughness = 1.0;
    pt.metallic = 0.0;
    ShadeSplit split = shade_point_split_sum(pt, env, default_brdf_lut());
    CHECK(split.diffuse.x == Approx(0.5 * 0.9).epsilon(2e-3));
    pt.metallic = 1.0;
    split = shade_point_split_sum(pt, env, default_brdf_lut());
    CHECK(split.diffuse.x == 0.0);
}

TEST_CASE("split-sum tracks the MC reference within 15 percent", "[shading]") {
    Cubemap base = lobe_env(32);
    EnvLight env;
    env.bake(base);
    Rng rng(2024);
    int worst_count = 0;
    Real worst = 0;
    for (int i = 0; i < 64; ++i) {
        ShadePoint pt;
        pt.normal = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()});
        Vec3 t1, t2;
        onb(pt.normal, t1, t2);
        Vec3 local = sample_cosine({rng.uniform(), rng.uniform()});
        local.z = std::max(local.z, 0.25);  // keep off-grazing views
        pt.view = normalize(tangent_to_world(local, t1, t2, pt.normal));
        pt.albedo = {rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9)};
        pt.roughness = rng.uniform(0.1, 1.0);
        pt.metallic = rng.uniform(0.0, 1.0);
        Vec3 ss = shade_point_split_sum(pt, env, default_brdf_lut()).total();
        Vec3 mc = mc_reference_shade(pt, base, 16384, 1000 + i);
        for (int c = 0; c < 3; ++c) {
            Real rel = std::abs(ss[c] - mc[c]) / std::max(std::abs(mc[c]), 1e-2);
            worst = std::max(worst, rel);
            if (rel >= 0.15) ++worst_count;
        }
    }
    INFO("worst relative deviation " << worst);
    CHECK(worst_count == 0);
}

TEST_CASE("shade_deferred is exactly linear in radiance", "[shading]") {
    Scene scene = testutil::random_scene(12, 5, /*env_res=*/8);
    Camera cam = testutil::test_camera(10, 10);
    GBuffer g = rasterize(scene, cam, kPlanesStage2);
    EnvLight env;
    env.params.irradiance_samples = 256;
    env.params.prefilter_samples = 128;
    env.bake(scene.env_base);
    Image out1 = shade_deferred(g, cam, env, default_brdf_lut());
    Cubemap scaled = scene.env_base;
    for (size_t t = 0; t < scaled.texel_count(); ++t) scaled.texel(t) *= 3.5;
    EnvLight env2 = env;
    env2.bake(scaled);
    Image out2 = shade_deferred(g, cam, env2, default_brdf_lut());
    Real max_rel = 0;
    for (size_t i = 0; i < out1.values.size(); ++i) {
        Real denom = std::max(std::abs(out1.values[i] * 3.5), 1e-300);
        if (out1.values[i] == 0.0) {
            CHECK(out2.values[i] == 0.0);
            continue;
        }
        max_rel = std::max(max_rel, std::abs(out2.values[i] - 3.5 * out1.values[i]) / denom);
    }
    CHECK(max_rel < 1e-12);
}

TEST_CASE("stale environment is rejected", "[shading]") {
    Scene scene = testutil::random_scene(5, 6, 4);
    Camera cam = testutil::test_camera(8, 8);
    GBuffer g = rasterize(scene, cam, kPlanesStage2);
    EnvLight env;
    env.params.irradiance_samples = 64;
    env.params.prefilter_samples = 64;
    env.bake(scene.env_base);
    env.stale = true;  // base mutated elsewhere
    REQUIRE_THROWS_AS(shade_deferred(g, cam, env, default_brdf_lut()), EngineError);
}

TEST_CASE("shade gradient: zero adjoint and the m=0 albedo rule", "[shading][grad]") {
    Scene scene = testutil::random_scene(10, 9, 8);
    for (auto& s : scene.surfels) s.metallic = 0.0;
    Camera cam = testutil::test_camera(10, 10);
    GBuffer g = rasterize(scene, cam, kPlanesStage2);
    EnvLight env;
    env.params.irradiance_samples = 256;
    env.params.prefilter_samples = 128;
    env.bake(scene.env_base);
    env.prepare_training_ops(scene.env_base, 64, 7);
    env.rebuild_training(scene.env_base);

    Image zero(10, 10, 3, ColorSpace::Data);
    ShadeGrad sg0 = shade_deferred_grad(g, cam, env, default_brdf_lut(), zero);
    for (Real v : sg0.albedo.values) REQUIRE(v == 0.0);
    for (size_t t = 0; t < sg0.env_base.texel_count(); ++t)
        REQUIRE(length(sg0.env_base.texel(t)) == 0.0);

    // adjoint 1 on the red channel: d out / d albedo_plane = irradiance * alpha
    Image adj(10, 10, 3, ColorSpace::Data);
    for (size_t p = 0; p < adj.pixel_count(); ++p) adj.values[p * 3] = 1.0;
    ShadeGrad sg = shade_deferred_grad(g, cam, env, default_brdf_lut(), adj);
    Mat3 rot_t = cam.rotation.transposed();
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            Real a = g.alpha.at(x, y);
            if (a <= 0 || length(g.normal.rgb(x, y)) < 1e-9) continue;
            Vec3 n = rot_t * normalize(g.normal.rgb(x, y));
            Real irr_r = cubemap_sample_bilinear(env.irradiance, n).x;
            REQUIRE(sg.albedo.at(x, y, 0) == Approx(irr_r * a).epsilon(1e-9));
        }
}

TEST_CASE("shade gradients match finite differences", "[shading][grad]") {
    Scene scene = testutil::random_scene(14, 31, 4);
    Camera cam = testutil::test_camera(8, 8);
    GBuffer g = rasterize(scene, cam, kPlanesStage2);
    EnvLight env;
    env.prepare_training_ops(scene.env_base, 64, 3);
    Cubemap base = scene.env_base;
    env.rebuild_training(base);
    Image adj = testutil::random_image(8, 8, 3, 404);
    ShadeGrad sg = shade_deferred_grad(g, cam, env, default_brdf_lut(), adj);

    auto eval = [&]() {
        env.rebuild_training(base);
        Image out = shade_deferred(g, cam, env, default_brdf_lut());
        Real s = 0;
        for (size_t i = 0; i < out.values.size(); ++i) s += out.values[i] * adj.values[i];
        return s;
    };

    SECTION("material planes") {
        std::vector<Real> analytic, fd;
        Rng rng(8);
        for (int k = 0; k < 60; ++k) {
            int which = int(rng.uniform_index(3));
            Image& plane = which == 0 ? g.albedo : which == 1 ? g.roughness : g.metallic;
            const Image& aplane =
                which == 0 ? sg.albedo : which == 1 ? sg.roughness : sg.metallic;
            size_t idx = rng.uniform_index(uint32_t(plane.values.size()));
            analytic.push_back(aplane.values[idx]);
            std::vector<size_t> c{idx};
            fd.push_back(testutil::finite_diff(plane.values, eval, c)[0]);
        }
        auto rep = testutil::fd_compare(analytic, fd);
        INFO("material plane p95 " << rep.p95_rel);
        CHECK(rep.spec_ok());
    }
    SECTION("env base texels") {
        std::vector<Real> analytic, fd;
        Rng rng(17);
        for (int k = 0; k < 50; ++k) {
            size_t t = rng.uniform_index(uint32_t(base.texel_count()));
            int ch = int(rng.uniform_index(3));
            analytic.push_back(sg.env_base.texel(t)[ch]);
            Real saved = base.texel(t)[ch];
            Real h = 1e-4 * std::max(1.0, std::abs(saved));
            base.texel(t)[ch] = saved + h;
            Real fp = eval();
            base.texel(t)[ch] = saved - h;
            Real fm = eval();
            base.texel(t)[ch] = saved;
            fd.push_back((fp - fm) / (2 * h));
        }
        env.rebuild_training(base);
        auto rep = testutil::fd_compare(analytic, fd);
        INFO("env texel p95 " << rep.p95_rel);
        CHECK(rep.spec_ok());
    }
}
