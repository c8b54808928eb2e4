#pragma once

// Pinhole cameras, projection/backprojection, depth-guided cross-view
// warping, and the normalized inverse-depth parameterization.
//
// Depth conventions: metric depth is camera-space z in scene units and lives
// in [near, far]; normalized inverse depth S is in [0,1] with S=0 at the far
// bound and S=1 at the near bound. The two domains are tagged so losses
// cannot silently mix them.

#include <array>
#include <cmath>
#include <vector>

#include "csplat/tensor.hpp"

namespace csplat {

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

struct Mat3 {
    // row-major
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }
    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
        return r;
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = 0;
                for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
                r.m[i * 3 + j] = acc;
            }
        return r;
    }
    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }

// World-to-camera rigid transform plus pinhole intrinsics and depth bounds.
// Construction validates f > n > 0 and that the rotation is orthonormal with
// determinant +1 within 1e-6.
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Mat3 rotation;     // world -> camera
    Vec3 translation;  // world -> camera
    double near = 0.1, far = 100.0;

    Camera() = default;
    Camera(double fx, double fy, double cx, double cy, const Mat3& rot, const Vec3& trans,
           double near, double far);

    Vec3 world_to_cam(const Vec3& w) const { return rotation.apply(w) + translation; }
    Vec3 cam_to_world(const Vec3& c) const { return rotation.transposed().apply(c - translation); }
};

struct Projection {
    double u = 0, v = 0, depth = 0;
    bool valid = false;  // false when the point sits at or behind the camera
};

Projection project(const Camera& cam, const Vec3& world_point);
// pre: depth > 0
Vec3 backproject(const Camera& cam, double u, double v, double depth);

inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return a * (1.0 / norm(a)); }

// Camera at `pos` looking toward `target`. World convention: +z forward,
// +y down (aligned with image rows), so identity extrinsics look along +z.
Camera look_at_camera(const Vec3& pos, const Vec3& target, double fx, double fy, double cx,
                      double cy, double near, double far);

struct ContextView {
    Tensor image;  // (3,H,W), values in [0,1]
    Camera camera;
};

enum class DepthDomain { Metric, NormalizedInverse };

struct DepthMap {
    Tensor values;  // (H,W) or (1,H,W)
    DepthDomain domain = DepthDomain::Metric;
};

// S in [0,1] -> metric depth in [near, far]; S=0 maps to far, S=1 to near.
Tensor denormalize_depth(const Tensor& s, double near, double far);
// metric depth in [near, far] -> S in [0,1]; exact inverse of the above.
Tensor normalize_inverse_depth(const Tensor& depth, double near, double far);
DepthMap denormalize_depth(const DepthMap& s, const Camera& cam);
DepthMap normalize_inverse_depth(const DepthMap& d, const Camera& cam);

// Per reference pixel, the source-view sample location implied by the
// reference depth. coords is a (2,H,W) tape tensor (u,v in source pixel
// units) differentiable w.r.t. the depth; src_depth holds the projected
// source-camera depth for validity tests and is plain data.
struct ReprojectResult {
    Tensor coords;
    std::vector<double> src_depth;
};
ReprojectResult reproject_to_source(const Tensor& ref_depth_metric, const Camera& ref_cam,
                                    const Camera& src_cam);

// Bilinearly samples source_feature at the reprojected locations. The valid
// mask is 0 where the sample touches padding or projects at/behind the
// source camera (depth <= near*1e-3); warped values are masked to zero
// there. Differentiable w.r.t. feature and depth.
struct WarpResult {
    Tensor warped;      // (C,H,W)
    Tensor valid_mask;  // (1,H,W), constant 0/1
};
WarpResult warp_to_reference(const Tensor& source_feature, const Tensor& ref_depth_metric,
                             const Camera& ref_cam, const Camera& src_cam);

// Mean of valid warped source features per reference view; zero with count 0
// where no source is valid (including N=1). Permutation-invariant in source
// order.
struct AlignedFeature {
    Tensor feature;      // (C,H,W)
    Tensor valid_count;  // (1,H,W), constant
};
std::vector<AlignedFeature> aligned_features(const std::vector<Tensor>& features,
                                             const std::vector<Tensor>& metric_depths,
                                             const std::vector<Camera>& cameras);

}  // namespace csplat
