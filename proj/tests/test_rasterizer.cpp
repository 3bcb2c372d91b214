#include <catch2/catch_amalgamated.hpp>

#include "glint/rasterizer.hpp"
#include "test_helpers.hpp"

using namespace glint;
using Catch::Approx;

namespace {

// Surfel at `center` facing -z (toward a camera looking down +z).
GaussianSurfel facing_surfel(const Vec3& center, Real scale = 1.0, Real opacity = 0.6) {
    GaussianSurfel s;
    s.center = center;
    s.rotation = Quat{0, 1, 0, 0};  // 180 deg about x: n = (0,0,-1)
    s.scale = {scale, scale};
    s.opacity = opacity;
    return s;
}

Camera origin_camera(int size = 9) {
    Camera cam;
    cam.fx = cam.fy = Real(size);
    cam.cx = cam.cy = size / 2.0;
    cam.width = cam.height = size;
    return cam;  // identity pose, looking +z
}

}  // namespace

TEST_CASE("ray_splat_intersect central hit", "[rasterizer]") {
    GaussianSurfel s = facing_surfel({0, 0, 1});
    Ray ray{{0, 0, 0}, {0, 0, 1}};
    auto hit = ray_splat_intersect(ray, s);
    REQUIRE(hit);
    CHECK(hit->u == Approx(0.0).margin(1e-12));
    CHECK(hit->v == Approx(0.0).margin(1e-12));
    CHECK(hit->z == Approx(1.0));
}

TEST_CASE("ray_splat_intersect off-center hit", "[rasterizer]") {
    GaussianSurfel s = facing_surfel({0, 0, 1});
    Ray ray{{0, 0, 0}, normalize(Vec3{0.5, 0, 1})};
    auto hit = ray_splat_intersect(ray, s);
    REQUIRE(hit);
    CHECK(hit->u == Approx(0.5));
    CHECK(hit->v == Approx(0.0).margin(1e-12));
    CHECK(hit->z == Approx(std::sqrt(1.25)));
}

TEST_CASE("ray_splat_intersect parallel ray misses", "[rasterizer]") {
    GaussianSurfel s = facing_surfel({0, 0, 1});
    Ray ray{{0, 0, 0}, {1, 0, 0}};
    CHECK_FALSE(ray_splat_intersect(ray, s));
}

TEST_CASE("splat_alpha kernel", "[rasterizer]") {
    CHECK(splat_alpha(0, 0, 0.8) == Approx(0.8));
    CHECK(splat_alpha(1.0, 1.0, 0.8) == Approx(0.8 * std::exp(-1.0)));
    CHECK(splat_alpha(0, 0, 1.0) == Approx(0.999));
}

TEST_CASE("rasterize empty scene gives zero alpha", "[rasterizer]") {
    Scene scene;
    scene.env_base = Cubemap(4);
    Camera cam = origin_camera();
    GBuffer g = rasterize(scene, cam, kPlanesAll);
    for (Real v : g.alpha.values) CHECK(v == 0.0);
}

TEST_CASE("rasterize single surfel composites its attributes", "[rasterizer]") {
    Scene scene;
    scene.env_base = Cubemap(4);
    GaussianSurfel s = facing_surfel({0, 0, 1}, 5.0, 0.6);  // huge: kernel flat at center
    s.albedo = {1, 0, 0};
    scene.surfels.push_back(s);
    Camera cam = origin_camera(9);
    GBuffer g = rasterize(scene, cam, kPlanesAll);
    int cx = 4, cy = 4;
    CHECK(g.alpha.at(cx, cy) == Approx(0.6).epsilon(1e-3));
    CHECK(g.albedo.at(cx, cy, 0) == Approx(0.6).epsilon(1e-3));
    CHECK(g.albedo.at(cx, cy, 1) == 0.0);
    CHECK(g.depth.at(cx, cy) == Approx(1.0).epsilon(1e-6));
}

TEST_CASE("rasterize blends two aligned surfels front to back", "[rasterizer]") {
    Scene scene;
    scene.env_base = Cubemap(4);
    GaussianSurfel front = facing_surfel({0, 0, 1}, 50.0, 0.5);
    front.radiance = {1, 1, 1};
    GaussianSurfel back = facing_surfel({0, 0, 2}, 50.0, 0.5);
    back.radiance = {0, 0, 0};
    scene.surfels = {back, front};  // storage order opposite of depth order
    Camera cam = origin_camera(5);
    GBuffer g = rasterize(scene, cam, kPlaneRadiance | kPlanePerRay);
    int c = 2;
    CHECK(g.radiance.at(c, c, 0) == Approx(0.5).epsilon(1e-4));
    CHECK(g.alpha.at(c, c) == Approx(0.75).epsilon(1e-4));
    // per-ray weights sum to alpha and depths are increasing
    const auto& hits = g.per_ray[size_t(c) * 5 + c];
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].z < hits[1].z);
    CHECK(hits[0].weight + hits[1].weight == Approx(g.alpha.at(c, c)));
}

TEST_CASE("compositing weights sum to one minus transmittance", "[rasterizer]") {
    Scene scene = testutil::random_scene(40, 21);
    Camera cam = testutil::test_camera(24, 24);
    GBuffer g = rasterize(scene, cam, kPlanePerRay);
    for (size_t pix = 0; pix < g.per_ray.size(); ++pix) {
        Real sum = 0, t = 1;
        for (const auto& h : g.per_ray[pix]) sum += h.weight;
        REQUIRE(std::abs(sum - g.alpha.values[pix]) < 1e-5);
        (void)t;
    }
}

TEST_CASE("rasterize is deterministic and storage-order invariant", "[rasterizer]") {
    Scene scene = testutil::random_scene(30, 4242);
    Camera cam = testutil::test_camera(20, 20);
    GBuffer a = rasterize(scene, cam, kPlanesStage2);
    GBuffer b = rasterize(scene, cam, kPlanesStage2);
    REQUIRE(a.albedo.values == b.albedo.values);  // bit-identical reruns

    // permute storage; no tied depths in a random scene
    Scene perm = scene;
    Rng rng(7);
    for (size_t i = perm.surfels.size(); i > 1; --i)
        std::swap(perm.surfels[i - 1], perm.surfels[rng.uniform_index(uint32_t(i))]);
    GBuffer c = rasterize(perm, cam, kPlanesStage2);
    REQUIRE(a.albedo.values == c.albedo.values);
    REQUIRE(a.alpha.values == c.alpha.values);
    REQUIRE(a.normal.values == c.normal.values);
}

TEST_CASE("tied depths stay bit-identical under order-preserving permutation", "[rasterizer]") {
    Scene scene;
    scene.env_base = Cubemap(4);
    // two surfels on the same plane (tied z), plus a third in front
    GaussianSurfel a = facing_surfel({-0.1, 0, 1}, 2.0, 0.4);
    a.radiance = {1, 0, 0};
    GaussianSurfel b = facing_surfel({0.1, 0, 1}, 2.0, 0.4);
    b.radiance = {0, 1, 0};
    GaussianSurfel c = facing_surfel({0, 0, 0.6}, 1.0, 0.3);
    c.radiance = {0, 0, 1};
    scene.surfels = {a, b, c};
    Camera cam = origin_camera(7);
    GBuffer g1 = rasterize(scene, cam, kPlaneRadiance);
    Scene perm = scene;
    perm.surfels = {c, a, b};  // a before b, preserving the tied pair's order
    GBuffer g2 = rasterize(perm, cam, kPlaneRadiance);
    REQUIRE(g1.radiance.values == g2.radiance.values);
}

TEST_CASE("rasterize rejects non-finite surfels", "[rasterizer]") {
    Scene scene = testutil::random_scene(3, 1);
    scene.surfels[1].center.x = std::numeric_limits<Real>::quiet_NaN();
    Camera cam = testutil::test_camera();
    try {
        rasterize(scene, cam, kPlanesStage1);
        FAIL("expected EngineError");
    } catch (const EngineError& e) {
        CHECK(std::string(e.what()).find("surfel 1") != std::string::npos);
    }
}

TEST_CASE("zero adjoint gives zero gradients", "[rasterizer]") {
    Scene scene = testutil::random_scene(10, 8);
    Camera cam = testutil::test_camera();
    Image zero(cam.width, cam.height, 3, ColorSpace::Data);
    GBufferAdjoint adj;
    adj.albedo = &zero;
    RenderGrad rg = rasterize_grad(scene, cam, adj);
    for (const auto& sg : rg.surfels) {
        CHECK(length(sg.center) == 0.0);
        CHECK(length(sg.albedo) == 0.0);
        CHECK(sg.opacity == 0.0);
    }
}

TEST_CASE("single surfel albedo gradient equals summed blend weight", "[rasterizer]") {
    Scene scene;
    scene.env_base = Cubemap(4);
    scene.surfels.push_back(facing_surfel({0, 0, 1}, 0.5, 0.7));
    Camera cam = origin_camera(9);
    GBuffer g = rasterize(scene, cam, kPlanesStage2);
    Image ones(cam.width, cam.height, 3, ColorSpace::Data);
    for (size_t p = 0; p < ones.pixel_count(); ++p) ones.values[p * 3] = 1.0;  // red plane
    GBufferAdjoint adj;
    adj.albedo = &ones;
    RenderGrad rg = rasterize_grad(scene, cam, adj);
    Real weight_sum = 0;
    for (size_t p = 0; p < g.alpha.values.size(); ++p) weight_sum += g.alpha.values[p];
    CHECK(rg.surfels[0].albedo.x == Approx(weight_sum).epsilon(1e-9));
    CHECK(rg.surfels[0].albedo.y == 0.0);
}

namespace {

// Packs the raw differentiable surfel fields for FD probing.
constexpr int kRawBlock = 13;  // center3 quat4 scale2 opacity albedo3... per plane set

std::vector<Real> scene_raw_params(const Scene& scene) {
    std::vector<Real> p;
    for (const auto& s : scene.surfels) {
        p.insert(p.end(), {s.center.x, s.center.y, s.center.z, s.rotation.w, s.rotation.x,
                           s.rotation.y, s.rotation.z, s.scale.x, s.scale.y, s.opacity});
    }
    return p;
}

void scene_from_raw(Scene& scene, const std::vector<Real>& p) {
    size_t i = 0;
    for (auto& s : scene.surfels) {
        s.center = {p[i], p[i + 1], p[i + 2]};
        s.rotation = {p[i + 3], p[i + 4], p[i + 5], p[i + 6]};
        s.scale = {p[i + 7], p[i + 8]};
        s.opacity = p[i + 9];
        i += 10;
    }
}

std::vector<Real> grads_raw(const RenderGrad& rg) {
    std::vector<Real> g;
    for (const auto& s : rg.surfels) {
        g.insert(g.end(), {s.center.x, s.center.y, s.center.z, s.rotation.w, s.rotation.x,
                           s.rotation.y, s.rotation.z, s.scale.x, s.scale.y, s.opacity});
    }
    return g;
}

}  // namespace

TEST_CASE("rasterize gradients match finite differences per plane", "[rasterizer][grad]") {
    Scene scene = testutil::random_scene(20, 1234);
    Camera cam = testutil::test_camera(16, 16);
    GBuffer base = rasterize(scene, cam, kPlanesAll);

    struct PlaneCase {
        const char* name;
        uint32_t flag;
        int channels;
    };
    for (PlaneCase pc : std::initializer_list<PlaneCase>{{"albedo", kPlaneAlbedo, 3},
                                                         {"normal", kPlaneNormal, 3},
                                                         {"depth", kPlaneDepth, 1},
                                                         {"roughness", kPlaneRoughness, 1},
                                                         {"alpha", 0, 1},
                                                         {"radiance", kPlaneRadiance, 3}}) {
        INFO("plane: " << pc.name);
        Image adj_img = testutil::random_image(16, 16, pc.channels, 555);
        if (std::string(pc.name) == "depth") {
            // depth is alpha-normalized; probing it only makes sense where the
            // surface actually exists (losses mask the same way)
            for (size_t p = 0; p < adj_img.pixel_count(); ++p)
                if (base.alpha.values[p] < 0.5) adj_img.values[p] = 0.0;
        }
        GBufferAdjoint adj;
        if (pc.flag == kPlaneAlbedo) adj.albedo = &adj_img;
        if (pc.flag == kPlaneNormal) adj.normal = &adj_img;
        if (pc.flag == kPlaneDepth) adj.depth = &adj_img;
        if (pc.flag == kPlaneRoughness) adj.roughness = &adj_img;
        if (pc.flag == 0) adj.alpha = &adj_img;
        if (pc.flag == kPlaneRadiance) adj.radiance = &adj_img;

        RenderGrad rg = rasterize_grad(scene, cam, adj);
        std::vector<Real> analytic = grads_raw(rg);

        std::vector<Real> params = scene_raw_params(scene);
        Scene probe = scene;
        auto eval = [&]() {
            scene_from_raw(probe, params);
            GBuffer g = rasterize(probe, cam, pc.flag ? pc.flag : kPlaneDepth);
            const Image& plane = pc.flag == kPlaneAlbedo      ? g.albedo
                                 : pc.flag == kPlaneNormal    ? g.normal
                                 : pc.flag == kPlaneDepth     ? g.depth
                                 : pc.flag == kPlaneRoughness ? g.roughness
                                 : pc.flag == kPlaneRadiance  ? g.radiance
                                                              : g.alpha;
            Real sum = 0;
            for (size_t i = 0; i < plane.values.size(); ++i)
                sum += plane.values[i] * adj_img.values[i];
            return sum;
        };
        std::vector<size_t> coords(params.size());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        std::vector<Real> fd = testutil::finite_diff(params, eval, coords);
        auto rep = testutil::fd_compare(analytic, fd);
        INFO("p95 rel err " << rep.p95_rel << " max abs at fail " << rep.max_abs_at_fail);
        CHECK(rep.spec_ok());
    }
}

TEST_CASE("material-plane gradients also flow for albedo/radiance fields", "[rasterizer][grad]") {
    // FD on the material fields themselves (linear path through omega)
    Scene scene = testutil::random_scene(8, 77);
    Camera cam = testutil::test_camera(12, 12);
    Image adj_img = testutil::random_image(12, 12, 3, 3);
    GBufferAdjoint adj;
    adj.albedo = &adj_img;
    RenderGrad rg = rasterize_grad(scene, cam, adj);

    std::vector<Real> params;
    for (auto& s : scene.surfels)
        params.insert(params.end(), {s.albedo.x, s.albedo.y, s.albedo.z});
    std::vector<Real> analytic;
    for (auto& s : rg.surfels)
        analytic.insert(analytic.end(), {s.albedo.x, s.albedo.y, s.albedo.z});

    Scene probe = scene;
    auto eval = [&]() {
        for (size_t i = 0; i < probe.surfels.size(); ++i)
            probe.surfels[i].albedo = {params[i * 3], params[i * 3 + 1], params[i * 3 + 2]};
        GBuffer g = rasterize(probe, cam, kPlaneAlbedo);
        Real sum = 0;
        for (size_t i = 0; i < g.albedo.values.size(); ++i)
            sum += g.albedo.values[i] * adj_img.values[i];
        return sum;
    };
    std::vector<size_t> coords(params.size());
    for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    std::vector<Real> fd = testutil::finite_diff(params, eval, coords);
    auto rep = testutil::fd_compare(analytic, fd);
    CHECK(rep.spec_ok());
}

TEST_CASE("depth_to_normal on a fronto-parallel plane", "[rasterizer]") {
    Camera cam = origin_camera(11);
    Image depth(11, 11, 1, ColorSpace::Data);
    Image alpha(11, 11, 1, ColorSpace::Data);
    // constant camera-space z = 2: ray distance = 2 / dir.z
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            Vec3 d = cam.pixel_dir_camera(x, y);
            depth.at(x, y) = 2.0 / d.z;
            alpha.at(x, y) = 1.0;
        }
    Image n = depth_to_normal(depth, alpha, cam);
    CHECK(n.at(5, 5, 2) == Approx(-1.0).margin(1e-9));
    CHECK(n.at(2, 7, 2) == Approx(-1.0).margin(1e-9));
    // border pixels and masked pixels output zero
    CHECK(n.at(0, 5, 2) == 0.0);
    alpha.at(5, 5) = 0.0;
    Image n2 = depth_to_normal(depth, alpha, cam);
    CHECK(n2.at(5, 5, 2) == 0.0);
}

TEST_CASE("depth_to_normal tilts with a depth ramp", "[rasterizer]") {
    Camera cam = origin_camera(11);
    Image depth(11, 11, 1, ColorSpace::Data);
    Image alpha(11, 11, 1, ColorSpace::Data);
    // camera-space plane z = 2 + 0.2 * x_cam
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            Vec3 d = cam.pixel_dir_camera(x, y);
            Real t = 2.0 / (d.z - 0.2 * d.x);
            depth.at(x, y) = t;
            alpha.at(x, y) = 1.0;
        }
    Image n = depth_to_normal(depth, alpha, cam);
    // plane normal prop to (-0.2, 0, 1), camera-facing => (0.2, 0, -1)/norm
    Vec3 expect = normalize(Vec3{0.2, 0, -1});
    Vec3 got = n.rgb(5, 5);
    CHECK(length(got - expect) < 1e-6);
}

TEST_CASE("depth_to_normal gradient matches finite differences", "[rasterizer][grad]") {
    Camera cam = origin_camera(9);
    Rng rng(31);
    Image depth(9, 9, 1, ColorSpace::Data);
    Image alpha(9, 9, 1, ColorSpace::Data);
    for (size_t i = 0; i < depth.values.size(); ++i) {
        depth.values[i] = 2.0 + 0.3 * rng.uniform();
        alpha.values[i] = 1.0;
    }
    Image adj = testutil::random_image(9, 9, 3, 17);
    Image analytic_img = depth_to_normal_grad(depth, alpha, cam, adj);

    auto eval = [&]() {
        Image n = depth_to_normal(depth, alpha, cam);
        Real s = 0;
        for (size_t i = 0; i < n.values.size(); ++i) s += n.values[i] * adj.values[i];
        return s;
    };
    std::vector<size_t> coords(depth.values.size());
    for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    std::vector<Real> fd = testutil::finite_diff(depth.values, eval, coords);
    auto rep = testutil::fd_compare(analytic_img.values, fd);
    CHECK(rep.spec_ok());
}

TEST_CASE("depth_distortion examples", "[rasterizer]") {
    GBuffer g;
    g.width = g.height = 1;
    g.planes = kPlanePerRay;
    g.per_ray.resize(1);

    SECTION("single intersection is zero") {
        g.per_ray[0] = {{0, 0.5, 1.0}};
        CHECK(depth_distortion(g) == 0.0);
    }
    SECTION("two intersections") {
        g.per_ray[0] = {{0, 0.5, 1.0}, {1, 0.5, 1.2}};
        CHECK(depth_distortion(g) == Approx(2 * 0.5 * 0.5 * 0.2));
    }
    SECTION("collapsing depths decreases the loss") {
        g.per_ray[0] = {{0, 0.5, 1.0}, {1, 0.5, 1.2}};
        Real l1 = depth_distortion(g);
        g.per_ray[0][1].z = 1.1;
        Real l2 = depth_distortion(g);
        g.per_ray[0][1].z = 1.05;
        Real l3 = depth_distortion(g);
        CHECK(l2 < l1);
        CHECK(l3 < l2);
    }
}

TEST_CASE("depth_distortion gradient matches finite differences", "[rasterizer][grad]") {
    Scene scene = testutil::random_scene(15, 99);
    Camera cam = testutil::test_camera(12, 12);

    auto eval_scene = [&](const Scene& sc) {
        GBuffer g = rasterize(sc, cam, kPlanePerRay);
        return depth_distortion(g);
    };

    GBuffer g = rasterize(scene, cam, kPlanePerRay);
    std::vector<std::vector<Real>> dws, dzs;
    depth_distortion_grad(g, 1.0, dws, dzs);
    GBufferAdjoint adj;
    adj.per_ray_dweight = &dws;
    adj.per_ray_dz = &dzs;
    RenderGrad rg = rasterize_grad(scene, cam, adj);
    std::vector<Real> analytic = grads_raw(rg);

    std::vector<Real> params = scene_raw_params(scene);
    Scene probe = scene;
    auto eval = [&]() {
        scene_from_raw(probe, params);
        return eval_scene(probe);
    };
    std::vector<size_t> coords(params.size());
    for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    std::vector<Real> fd = testutil::finite_diff(params, eval, coords);
    auto rep = testutil::fd_compare(analytic, fd);
    INFO("p95 " << rep.p95_rel);
    CHECK(rep.p95_ok());
}
