#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "csplat/geometry.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace csplat;

namespace {

Camera identity_cam(double fx = 40, double fy = 40, double cx = 16, double cy = 12,
                    double near = 1.0, double far = 10.0) {
    return Camera(fx, fy, cx, cy, Mat3::identity(), Vec3{}, near, far);
}

Camera translated_cam(double bx, double near = 1.0, double far = 10.0) {
    // camera center at world (bx,0,0): t = -R*c
    return Camera(40, 40, 16, 12, Mat3::identity(), Vec3{-bx, 0, 0}, near, far);
}

// Independent per-pixel oracle: backproject with ref depth, project to the
// source view, bilinearly sample by hand with the same border rule.
struct OracleSample {
    double value;
    bool valid;
};
OracleSample oracle_warp_pixel(const Tensor& src_feat, int ch, double d, int x, int y,
                               const Camera& ref, const Camera& src) {
    const Vec3 world = backproject(ref, x, y, d);
    const Projection p = project(src, world);
    const int h = src_feat.dim(1), w = src_feat.dim(2);
    if (!p.valid || p.u < 0 || p.u > w - 1 || p.v < 0 || p.v > h - 1) return {0.0, false};
    const int x0 = static_cast<int>(std::floor(p.u));
    const int y0 = static_cast<int>(std::floor(p.v));
    const double ax = p.u - x0, ay = p.v - y0;
    auto tap = [&](int yy, int xx) {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return src_feat.values()[(ch * h + yy) * w + xx];
    };
    const double v = (1 - ax) * (1 - ay) * tap(y0, x0) + ax * (1 - ay) * tap(y0, x0 + 1) +
                     (1 - ax) * ay * tap(y0 + 1, x0) + ax * ay * tap(y0 + 1, x0 + 1);
    return {v, true};
}

}  // namespace

TEST_CASE("camera construction validates bounds and rotation") {
    CHECK_THROWS_AS(Camera(40, 40, 16, 12, Mat3::identity(), Vec3{}, 5.0, 2.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(Camera(40, 40, 16, 12, Mat3::identity(), Vec3{}, -1.0, 2.0),
                    std::invalid_argument);
    Mat3 skew = Mat3::identity();
    skew.m[1] = 0.1;
    CHECK_THROWS_AS(Camera(40, 40, 16, 12, skew, Vec3{}, 1.0, 2.0), std::invalid_argument);
}

TEST_CASE("principal-point pixel backprojects onto the optical axis") {
    Camera cam = identity_cam();
    const Vec3 w = backproject(cam, cam.cx, cam.cy, 4.0);
    CHECK(w.x == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(w.y == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(w.z == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("project after backproject is the identity on in-range pixels") {
    Rng rng(5);
    Camera cam = look_at_camera({0.3, -0.2, -0.5}, {0, 0, 3}, 45, 47, 15.5, 11.5, 1.0, 10.0);
    std::uniform_real_distribution<double> du(0.0, 31.0), dv(0.0, 23.0), dd(1.2, 8.0);
    for (int i = 0; i < 200; ++i) {
        const double u = du(rng), v = dv(rng), d = dd(rng);
        const Vec3 w = backproject(cam, u, v, d);
        const Projection p = project(cam, w);
        REQUIRE(p.valid);
        CHECK(std::fabs(p.u - u) < 1e-6);
        CHECK(std::fabs(p.v - v) < 1e-6);
        CHECK(std::fabs(p.depth - d) < 1e-6);
    }
}

TEST_CASE("point behind camera is flagged invalid, not thrown") {
    Camera cam = identity_cam();
    const Projection p = project(cam, Vec3{0, 0, -2});
    CHECK_FALSE(p.valid);
}

TEST_CASE("stereo disparity equals fx*b/d for a translated camera") {
    Camera ref = identity_cam();
    const double b = 0.5;
    Camera src = translated_cam(b);
    for (double d : {1.5, 3.0, 7.0}) {
        const Vec3 w = backproject(ref, 20.0, 10.0, d);
        const Projection p = project(src, w);
        REQUIRE(p.valid);
        CHECK(p.u == doctest::Approx(20.0 - ref.fx * b / d).epsilon(1e-10));
        CHECK(p.v == doctest::Approx(10.0).epsilon(1e-10));
    }
}

TEST_CASE("normalized inverse depth endpoints and reference value") {
    Tensor s = Tensor::from({3}, {0.0, 1.0, 0.5});
    Tensor d = denormalize_depth(s, 1.0, 100.0);
    CHECK(d.values()[0] == doctest::Approx(100.0).epsilon(1e-12));  // S=0 -> far
    CHECK(d.values()[1] == doctest::Approx(1.0).epsilon(1e-12));    // S=1 -> near
    CHECK(d.values()[2] == doctest::Approx(1.0 / (0.01 + 0.5 * 0.99)).epsilon(1e-12));
    CHECK(d.values()[2] == doctest::Approx(1.980198019801980).epsilon(1e-12));
}

TEST_CASE("normalize and denormalize are mutual inverses to 1e-9") {
    const double n = 0.7, f = 42.0;
    for (int i = 0; i <= 1000; ++i) {
        const double s = i / 1000.0;
        Tensor st = Tensor::scalar(s);
        const double s2 = normalize_inverse_depth(denormalize_depth(st, n, f), n, f).item();
        CHECK(std::fabs(s2 - s) < 1e-9);
    }
    for (int i = 0; i <= 1000; ++i) {
        const double d = n + (f - n) * i / 1000.0;
        const double d2 = denormalize_depth(normalize_inverse_depth(Tensor::scalar(d), n, f), n, f).item();
        CHECK(std::fabs(d2 - d) < 1e-9 * std::max(1.0, d));
    }
}

TEST_CASE("depth domain tags reject mixing") {
    Camera cam = identity_cam();
    DepthMap metric{Tensor::full({2, 2}, 3.0), DepthDomain::Metric};
    CHECK_THROWS_AS(denormalize_depth(metric, cam), std::invalid_argument);
    DepthMap norm{Tensor::full({2, 2}, 0.5), DepthDomain::NormalizedInverse};
    CHECK_THROWS_AS(normalize_inverse_depth(norm, cam), std::invalid_argument);
}

TEST_CASE("warp with coincident cameras is the identity on interior pixels") {
    Rng rng(17);
    Camera cam = identity_cam();
    Tensor feat = Tensor::rand_uniform({4, 24, 32}, rng, -1.0, 1.0);
    Tensor depth = Tensor::rand_uniform({24, 32}, rng, 1.5, 8.0);
    WarpResult wr = warp_to_reference(feat, depth, cam, cam);
    for (int c = 0; c < 4; ++c)
        for (int y = 1; y < 23; ++y)
            for (int x = 1; x < 31; ++x) {
                CHECK(std::fabs(wr.warped.values()[(c * 24 + y) * 32 + x] -
                                feat.values()[(c * 24 + y) * 32 + x]) < 1e-6);
            }
    for (int y = 1; y < 23; ++y)
        for (int x = 1; x < 31; ++x) CHECK(wr.valid_mask.values()[y * 32 + x] == 1.0);
}

TEST_CASE("fronto-parallel plane warps as a constant pixel shift") {
    Camera ref = identity_cam();
    const double b = 0.4, d = 4.0;
    Camera src = translated_cam(b);
    const double shift = ref.fx * b / d;  // sample location u - shift
    // linear ramp feature: bilinear sampling is exact on it
    Tensor feat = Tensor::zeros({1, 24, 32});
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 32; ++x) feat.mutable_values()[y * 32 + x] = 0.3 * x + 0.1 * y;
    Tensor depth = Tensor::full({24, 32}, d);
    WarpResult wr = warp_to_reference(feat, depth, ref, src);
    for (int y = 2; y < 22; ++y)
        for (int x = 6; x < 30; ++x) {
            if (wr.valid_mask.values()[y * 32 + x] == 0.0) continue;
            const double expect = 0.3 * (x - shift) + 0.1 * y;
            CHECK(wr.warped.values()[y * 32 + x] == doctest::Approx(expect).epsilon(1e-10));
        }
    // shifted-out pixels on the left are invalid
    CHECK(wr.valid_mask.values()[5 * 32 + 0] == 0.0);
}

TEST_CASE("tiny frustum overlap leaves the mask mostly invalid") {
    Camera ref = identity_cam();
    // rotate source 90 degrees about y: most reprojections leave the frustum
    Mat3 rot;
    rot.m = {0, 0, -1, 0, 1, 0, 1, 0, 0};
    Camera src(40, 40, 16, 12, rot, Vec3{0, 0, 0}, 1.0, 10.0);
    Rng rng(23);
    Tensor feat = Tensor::rand_uniform({2, 24, 32}, rng, -1.0, 1.0);
    Tensor depth = Tensor::full({24, 32}, 9.5);  // near the far bound
    WarpResult wr = warp_to_reference(feat, depth, ref, src);
    double valid = 0;
    for (double m : wr.valid_mask.values()) valid += m;
    CHECK(valid / wr.valid_mask.numel() < 0.2);
    // invalid pixels contribute zero, i.e. they are absent from aggregation
    for (int64_t p = 0; p < 24 * 32; ++p)
        if (wr.valid_mask.values()[p] == 0.0) {
            CHECK(wr.warped.values()[p] == 0.0);
            CHECK(wr.warped.values()[24 * 32 + p] == 0.0);
        }
}

TEST_CASE("warp matches the per-pixel oracle and aggregation averages valid samples") {
    Rng rng(31);
    const int h = 20, w = 26;
    std::vector<Camera> cams = {
        look_at_camera({-0.3, 0.05, 0}, {0, 0, 4}, 40, 40, w / 2.0 - 0.5, h / 2.0 - 0.5, 1.0, 10.0),
        look_at_camera({0.3, -0.05, 0}, {0, 0, 4}, 40, 40, w / 2.0 - 0.5, h / 2.0 - 0.5, 1.0, 10.0),
        look_at_camera({0.0, 0.4, 0.1}, {0, 0, 4}, 40, 40, w / 2.0 - 0.5, h / 2.0 - 0.5, 1.0, 10.0),
    };
    std::vector<Tensor> feats, depths;
    for (int i = 0; i < 3; ++i) {
        feats.push_back(Tensor::rand_uniform({3, h, w}, rng, -1.0, 1.0));
        depths.push_back(Tensor::rand_uniform({h, w}, rng, 3.0, 6.0));
    }
    auto aligned = aligned_features(feats, depths, cams);
    REQUIRE(aligned.size() == 3);
    for (size_t r = 0; r < 3; ++r) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    double sum = 0;
                    int cnt = 0;
                    for (size_t s = 0; s < 3; ++s) {
                        if (s == r) continue;
                        auto os = oracle_warp_pixel(feats[s], c, depths[r].values()[y * w + x], x, y,
                                                    cams[r], cams[s]);
                        if (os.valid) {
                            sum += os.value;
                            ++cnt;
                        }
                    }
                    const double expect = cnt > 0 ? sum / cnt : 0.0;
                    CHECK(aligned[r].feature.values()[(c * h + y) * w + x] ==
                          doctest::Approx(expect).epsilon(1e-9));
                    if (c == 0)
                        CHECK(aligned[r].valid_count.values()[y * w + x] == doctest::Approx(cnt));
                }
            }
    }

    SUBCASE("permutation invariance in source order") {
        std::vector<Tensor> f2 = {feats[0], feats[2], feats[1]};
        std::vector<Tensor> d2 = {depths[0], depths[2], depths[1]};
        std::vector<Camera> c2 = {cams[0], cams[2], cams[1]};
        auto aligned2 = aligned_features(f2, d2, c2);
        for (int64_t i = 0; i < aligned[0].feature.numel(); ++i)
            CHECK(aligned2[0].feature.values()[i] ==
                  doctest::Approx(aligned[0].feature.values()[i]).epsilon(1e-12));
    }
}

TEST_CASE("single view aggregates to zero with zero counts") {
    Rng rng(41);
    std::vector<Tensor> feats = {Tensor::rand_uniform({2, 8, 8}, rng, -1.0, 1.0)};
    std::vector<Tensor> depths = {Tensor::full({8, 8}, 4.0)};
    std::vector<Camera> cams = {identity_cam(40, 40, 4, 4)};
    auto aligned = aligned_features(feats, depths, cams);
    for (double v : aligned[0].feature.values()) CHECK(v == 0.0);
    for (double v : aligned[0].valid_count.values()) CHECK(v == 0.0);
}

TEST_CASE("two identical co-located views exchange features exactly") {
    Rng rng(43);
    Camera cam = identity_cam();
    std::vector<Tensor> feats = {Tensor::rand_uniform({2, 12, 16}, rng, -1.0, 1.0),
                                 Tensor::rand_uniform({2, 12, 16}, rng, -1.0, 1.0)};
    std::vector<Tensor> depths = {Tensor::full({12, 16}, 3.0), Tensor::full({12, 16}, 3.0)};
    std::vector<Camera> cams = {cam, cam};
    auto aligned = aligned_features(feats, depths, cams);
    for (int64_t i = 0; i < feats[1].numel(); ++i)
        CHECK(aligned[0].feature.values()[i] == doctest::Approx(feats[1].values()[i]).epsilon(1e-9));
}

TEST_CASE("warp gradients pass finite differences away from borders") {
    Rng rng(59);
    Camera ref = identity_cam(30, 30, 8, 6, 1.0, 10.0);
    Camera src = look_at_camera({0.15, 0.1, -0.05}, {0, 0, 5}, 30, 30, 8, 6, 1.0, 10.0);
    for (int inst = 0; inst < 6; ++inst) {
        Tensor feat = Tensor::rand_uniform({2, 12, 16}, rng, -1.0, 1.0);
        Tensor depth = Tensor::rand_uniform({12, 16}, rng, 3.5, 5.5);
        feat.set_requires_grad(true);
        depth.set_requires_grad(true);
        auto rep = fdcheck::fd_check(
            [&] {
                WarpResult wr = warp_to_reference(feat, depth, ref, src);
                return mean_all(mul(wr.warped, wr.warped));
            },
            {feat, depth}, rng);
        INFO("instance ", inst, " max_rel_err ", rep.max_rel_err);
        CHECK(rep.ok(1e-4));
    }
}
