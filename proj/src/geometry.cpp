#include "csplat/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace csplat {

Camera::Camera(double fx_, double fy_, double cx_, double cy_, const Mat3& rot, const Vec3& trans,
               double near_, double far_)
    : fx(fx_), fy(fy_), cx(cx_), cy(cy_), rotation(rot), translation(trans), near(near_), far(far_) {
    if (!(near > 0.0) || !(far > near))
        throw std::invalid_argument("Camera: requires far > near > 0, got near=" +
                                    std::to_string(near) + " far=" + std::to_string(far));
    const Mat3 rtr = rot.transposed() * rot;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double want = i == j ? 1.0 : 0.0;
            if (std::fabs(rtr.m[i * 3 + j] - want) > 1e-6)
                throw std::invalid_argument("Camera: rotation not orthonormal");
        }
    if (std::fabs(rot.det() - 1.0) > 1e-6)
        throw std::invalid_argument("Camera: rotation determinant must be +1");
}

Projection project(const Camera& cam, const Vec3& world_point) {
    const Vec3 c = cam.world_to_cam(world_point);
    Projection p;
    p.depth = c.z;
    if (c.z <= cam.near * 1e-3) return p;  // at/behind camera: flagged, not thrown
    p.u = cam.fx * c.x / c.z + cam.cx;
    p.v = cam.fy * c.y / c.z + cam.cy;
    p.valid = true;
    return p;
}

Vec3 backproject(const Camera& cam, double u, double v, double depth) {
    if (!(depth > 0.0))
        throw std::invalid_argument("backproject: depth must be > 0, got " + std::to_string(depth));
    const Vec3 c{(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
    return cam.cam_to_world(c);
}

Camera look_at_camera(const Vec3& pos, const Vec3& target, double fx, double fy, double cx,
                      double cy, double near, double far) {
    const Vec3 forward = normalized(target - pos);
    const Vec3 down_ref{0.0, 1.0, 0.0};
    const Vec3 right = normalized(cross(down_ref, forward));
    const Vec3 down = cross(forward, right);
    Mat3 rot;
    rot.m = {right.x, right.y, right.z, down.x, down.y, down.z, forward.x, forward.y, forward.z};
    const Vec3 t = rot.apply(pos) * -1.0;
    return Camera(fx, fy, cx, cy, rot, t, near, far);
}

Tensor denormalize_depth(const Tensor& s, double near, double far) {
    const double inv_n = 1.0 / near, inv_f = 1.0 / far;
    return reciprocal(add_scalar(mul_scalar(s, inv_n - inv_f), inv_f));
}

Tensor normalize_inverse_depth(const Tensor& depth, double near, double far) {
    const double inv_n = 1.0 / near, inv_f = 1.0 / far;
    return mul_scalar(add_scalar(reciprocal(depth), -inv_f), 1.0 / (inv_n - inv_f));
}

DepthMap denormalize_depth(const DepthMap& s, const Camera& cam) {
    if (s.domain != DepthDomain::NormalizedInverse)
        throw std::invalid_argument("denormalize_depth: input must be normalized inverse depth");
    return DepthMap{denormalize_depth(s.values, cam.near, cam.far), DepthDomain::Metric};
}

DepthMap normalize_inverse_depth(const DepthMap& d, const Camera& cam) {
    if (d.domain != DepthDomain::Metric)
        throw std::invalid_argument("normalize_inverse_depth: input must be metric depth");
    return DepthMap{normalize_inverse_depth(d.values, cam.near, cam.far),
                    DepthDomain::NormalizedInverse};
}

ReprojectResult reproject_to_source(const Tensor& ref_depth, const Camera& ref_cam,
                                    const Camera& src_cam) {
    if (ref_depth.ndim() != 2)
        tensor_fail("reproject_to_source: depth must be (H,W), got rank " +
                    std::to_string(ref_depth.ndim()));
    const int h = ref_depth.dim(0), w = ref_depth.dim(1);
    const int64_t hw = static_cast<int64_t>(h) * w;

    // Per pixel the source-camera point is linear in the reference depth:
    // x_src = dir * D + base, with dir = Rs * Rr^T * ray and base constant.
    const Mat3 rel = src_cam.rotation * ref_cam.rotation.transposed();
    const Vec3 base = src_cam.translation - rel.apply(ref_cam.translation);

    std::vector<double> dir(3 * hw);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Vec3 ray{(x - ref_cam.cx) / ref_cam.fx, (y - ref_cam.cy) / ref_cam.fy, 1.0};
            const Vec3 d = rel.apply(ray);
            const int64_t p = static_cast<int64_t>(y) * w + x;
            dir[p] = d.x;
            dir[hw + p] = d.y;
            dir[2 * hw + p] = d.z;
        }

    const auto& dv = ref_depth.values();
    std::vector<double> coords(2 * hw);
    std::vector<double> src_depth(hw);
    const double fx = src_cam.fx, fy = src_cam.fy, cx = src_cam.cx, cy = src_cam.cy;
    const double zmin = src_cam.near * 1e-3;
    for (int64_t p = 0; p < hw; ++p) {
        const double d = dv[p];
        const double xs = dir[p] * d + base.x;
        const double ys = dir[hw + p] * d + base.y;
        const double zs = dir[2 * hw + p] * d + base.z;
        src_depth[p] = zs;
        if (zs <= zmin) {
            coords[p] = -1e9;  // sampled far outside -> zero + invalid
            coords[hw + p] = -1e9;
        } else {
            coords[p] = fx * xs / zs + cx;
            coords[hw + p] = fy * ys / zs + cy;
        }
    }

    Tensor coords_t = make_op(
        {ref_depth}, {2, h, w}, std::move(coords),
        [hw, dir, base, fx, fy, zmin](TensorNode& self) {
            TensorNode* dn = self.inputs[0].node();
            if (!dn->requires_grad) return;
            dn->ensure_grad();
            for (int64_t p = 0; p < hw; ++p) {
                const double d = dn->v[p];
                const double xs = dir[p] * d + base.x;
                const double ys = dir[hw + p] * d + base.y;
                const double zs = dir[2 * hw + p] * d + base.z;
                if (zs <= zmin) continue;
                const double inv_z2 = 1.0 / (zs * zs);
                const double du_dd = fx * (dir[p] * zs - xs * dir[2 * hw + p]) * inv_z2;
                const double dv_dd = fy * (dir[hw + p] * zs - ys * dir[2 * hw + p]) * inv_z2;
                dn->g[p] += self.g[p] * du_dd + self.g[hw + p] * dv_dd;
            }
        });
    return {coords_t, std::move(src_depth)};
}

WarpResult warp_to_reference(const Tensor& source_feature, const Tensor& ref_depth,
                             const Camera& ref_cam, const Camera& src_cam) {
    if (source_feature.ndim() != 3)
        tensor_fail("warp_to_reference: feature must be (C,H,W)");
    const int sh = source_feature.dim(1), sw = source_feature.dim(2);
    ReprojectResult rp = reproject_to_source(ref_depth, ref_cam, src_cam);
    const int h = ref_depth.dim(0), w = ref_depth.dim(1);
    const int64_t hw = static_cast<int64_t>(h) * w;

    const auto& cv = rp.coords.values();
    const double zmin = src_cam.near * 1e-3;
    std::vector<double> mask(hw);
    for (int64_t p = 0; p < hw; ++p) {
        const double u = cv[p], v = cv[hw + p];
        const bool inside = u >= 0.0 && u <= sw - 1.0 && v >= 0.0 && v <= sh - 1.0;
        mask[p] = (inside && rp.src_depth[p] > zmin) ? 1.0 : 0.0;
    }
    Tensor mask_t = Tensor::from({1, h, w}, std::move(mask));
    Tensor warped = mul_map(grid_sample(source_feature, rp.coords), mask_t);
    return {warped, mask_t};
}

std::vector<AlignedFeature> aligned_features(const std::vector<Tensor>& features,
                                             const std::vector<Tensor>& metric_depths,
                                             const std::vector<Camera>& cameras) {
    const size_t n = features.size();
    if (n == 0 || metric_depths.size() != n || cameras.size() != n)
        tensor_fail("aligned_features: need matching non-empty view lists");
    std::vector<AlignedFeature> out;
    out.reserve(n);
    for (size_t r = 0; r < n; ++r) {
        const int c = features[r].dim(0), h = features[r].dim(1), w = features[r].dim(2);
        const int64_t hw = static_cast<int64_t>(h) * w;
        Tensor sum;
        std::vector<double> count(hw, 0.0);
        for (size_t s = 0; s < n; ++s) {
            if (s == r) continue;
            WarpResult wr = warp_to_reference(features[s], metric_depths[r], cameras[r], cameras[s]);
            sum = sum.defined() ? add(sum, wr.warped) : wr.warped;
            const auto& mv = wr.valid_mask.values();
            for (int64_t p = 0; p < hw; ++p) count[p] += mv[p];
        }
        std::vector<double> inv(hw);
        for (int64_t p = 0; p < hw; ++p) inv[p] = count[p] > 0.0 ? 1.0 / count[p] : 0.0;
        Tensor count_t = Tensor::from({1, h, w}, std::move(count));
        if (!sum.defined()) {
            out.push_back({Tensor::zeros({c, h, w}), count_t});
        } else {
            out.push_back({mul_map(sum, Tensor::from({1, h, w}, std::move(inv))), count_t});
        }
    }
    return out;
}

}  // namespace csplat
