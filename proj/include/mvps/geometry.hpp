#pragma once

// Camera model, rigid transforms, point clouds and triangle meshes.
//
// Camera convention: +z forward, u rightward, v downward, image origin at the
// top-left pixel center. Depth is z-depth, not ray length. A PoseSE3 maps
// camera coordinates into the reference frame: X_ref = R * X_cam + t.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "mvps/error.hpp"
#include "mvps/grid.hpp"

namespace mvps {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

struct CameraIntrinsics {
    double fx = 500.0;
    double fy = 500.0;
    double cx = 124.5;
    double cy = 124.5;
    int width = 250;
    int height = 250;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw InputError("CameraIntrinsics: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw InputError("CameraIntrinsics: image size must be positive");
        if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
            throw InputError("CameraIntrinsics: principal point outside the image");
    }

    Mat3 matrix() const {
        Mat3 k = Mat3::Identity();
        k(0, 0) = fx;
        k(1, 1) = fy;
        k(0, 2) = cx;
        k(1, 2) = cy;
        return k;
    }

    // Ray through pixel (u, v) scaled to unit z.
    Vec3 ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }

    Vec3 unproject(double u, double v, double depth) const { return depth * ray(u, v); }

    Vec2 project(const Vec3& p) const { return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy}; }

    bool operator==(const CameraIntrinsics&) const = default;
};

// ---------------------------------------------------------------------------
// SO(3) helpers

inline Mat3 skew(const Vec3& w) {
    Mat3 s;
    s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return s;
}

inline Mat3 exp_so3(const Vec3& w) {
    const double theta = w.norm();
    if (theta < 1e-12) return Mat3::Identity() + skew(w);
    return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

inline Vec3 log_so3(const Mat3& r) {
    const double c = std::clamp((r.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::acos(c);
    const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    if (theta < 1e-7) return 0.5 * v;
    if (std::numbers::pi - theta < 1e-5) {
        // Near pi the antisymmetric part vanishes; use the symmetric part instead.
        const Eigen::AngleAxisd aa(r);
        return aa.angle() * aa.axis();
    }
    return theta / (2.0 * std::sin(theta)) * v;
}

// Angle of a rotation matrix, in radians, robust near 0 and pi.
inline double rotation_angle(const Mat3& r) {
    const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    return std::atan2(0.5 * v.norm(), 0.5 * (r.trace() - 1.0));
}

class PoseSE3 {
public:
    PoseSE3() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

    PoseSE3(const Mat3& rotation, const Vec3& translation)
        : rotation_(rotation), translation_(translation) {
        validate();
    }

    static PoseSE3 identity() { return {}; }

    static PoseSE3 from_axis_angle(const Vec3& axis_angle, const Vec3& translation = Vec3::Zero()) {
        return unchecked(exp_so3(axis_angle), translation);
    }

    // Projects `rotation` onto SO(3) first; used where accumulated round-off must be cleaned.
    static PoseSE3 orthonormalized(const Mat3& rotation, const Vec3& translation) {
        Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 r = svd.matrixU() * svd.matrixV().transpose();
        if (r.determinant() < 0) {
            Mat3 u = svd.matrixU();
            u.col(2) *= -1.0;
            r = u * svd.matrixV().transpose();
        }
        return unchecked(r, translation);
    }

    const Mat3& rotation() const { return rotation_; }
    const Vec3& translation() const { return translation_; }

    Vec3 operator*(const Vec3& p) const { return rotation_ * p + translation_; }
    Vec3 rotate(const Vec3& n) const { return rotation_ * n; }

    PoseSE3 operator*(const PoseSE3& b) const {
        return unchecked(rotation_ * b.rotation_, rotation_ * b.translation_ + translation_);
    }

    PoseSE3 inverse() const {
        const Mat3 rt = rotation_.transpose();
        return unchecked(rt, -(rt * translation_));
    }

    Eigen::Matrix<double, 3, 4> matrix3x4() const {
        Eigen::Matrix<double, 3, 4> m;
        m.leftCols<3>() = rotation_;
        m.col(3) = translation_;
        return m;
    }

    void validate() const {
        if (!rotation_.allFinite() || !translation_.allFinite()) throw InputError("PoseSE3: non-finite entries");
        if ((rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9)
            throw InputError("PoseSE3: rotation is not orthonormal");
        if (std::abs(rotation_.determinant() - 1.0) > 1e-9) throw InputError("PoseSE3: det(rotation) != +1");
    }

private:
    static PoseSE3 unchecked(const Mat3& r, const Vec3& t) {
        PoseSE3 p;
        p.rotation_ = r;
        p.translation_ = t;
        return p;
    }

    Mat3 rotation_;
    Vec3 translation_;
};

// compose(a, b) applies b first, then a.
inline PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) { return a * b; }
inline PoseSE3 inverse(const PoseSE3& a) { return a.inverse(); }

// Rotation angle (degrees) and translation distance between two poses.
inline double rotation_distance_deg(const PoseSE3& a, const PoseSE3& b) {
    return rad2deg(rotation_angle(a.rotation().transpose() * b.rotation()));
}
inline double translation_distance(const PoseSE3& a, const PoseSE3& b) {
    return (a.translation() - b.translation()).norm();
}

// ---------------------------------------------------------------------------
// Point clouds and meshes

struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;  // empty, or one unit normal per point

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
    bool has_normals() const { return !normals.empty(); }

    void validate() const {
        if (normals.empty()) return;
        if (normals.size() != points.size()) throw InputError("PointCloud: normals/points length mismatch");
        for (const auto& n : normals)
            if (std::abs(n.norm() - 1.0) > 1e-6) throw InputError("PointCloud: normal is not unit length");
    }
};

struct TriangleMesh {
    using Triangle = std::array<std::uint32_t, 3>;

    std::vector<Vec3> vertices;
    std::vector<Triangle> triangles;
    std::vector<Vec3> vertex_normals;  // optional

    bool empty() const { return triangles.empty(); }

    void validate() const {
        const auto n = vertices.size();
        for (const auto& t : triangles) {
            if (t[0] >= n || t[1] >= n || t[2] >= n) throw InputError("TriangleMesh: index out of range");
            if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) throw InputError("TriangleMesh: degenerate triangle");
        }
        if (!vertex_normals.empty() && vertex_normals.size() != n)
            throw InputError("TriangleMesh: vertex_normals length mismatch");
    }

    double area() const {
        double a = 0.0;
        for (const auto& t : triangles)
            a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
        return a;
    }
};

struct AxisBox {
    Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Vec3& p) {
        min = min.cwiseMin(p);
        max = max.cwiseMax(p);
    }
    bool valid() const { return (max.array() >= min.array()).all(); }
    Vec3 center() const { return 0.5 * (min + max); }
    Vec3 extent() const { return max - min; }
    double diagonal() const { return valid() ? extent().norm() : 0.0; }
};

template <typename Range>
AxisBox bounding_box(const Range& points) {
    AxisBox b;
    for (const auto& p : points) b.extend(p);
    return b;
}

// One point per masked pixel, row-major order.
inline PointCloud backproject(const DepthMap& depth, const CameraIntrinsics& k, const BitMask& mask) {
    k.validate();
    if (!depth.same_shape(k.width, k.height) || !mask.same_shape(k.width, k.height))
        throw InputError("backproject: depth/mask dimensions do not match intrinsics");
    PointCloud cloud;
    for (int v = 0; v < depth.height(); ++v) {
        for (int u = 0; u < depth.width(); ++u) {
            if (!mask(u, v)) continue;
            const double d = depth(u, v);
            if (!std::isfinite(d) || d <= 0.0)
                throw DataError("backproject: invalid depth under mask at pixel (" + std::to_string(u) + ", " +
                                std::to_string(v) + ")");
            cloud.points.push_back(k.unproject(u, v, d));
        }
    }
    return cloud;
}

inline PointCloud transform(const PointCloud& cloud, const PoseSE3& pose) {
    PointCloud out;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back(pose * p);
    out.normals.reserve(cloud.normals.size());
    for (const auto& n : cloud.normals) out.normals.push_back(pose.rotate(n));
    return out;
}

inline TriangleMesh transform(const TriangleMesh& mesh, const PoseSE3& pose) {
    TriangleMesh out = mesh;
    for (auto& p : out.vertices) p = pose * p;
    for (auto& n : out.vertex_normals) n = pose.rotate(n);
    return out;
}

// Per-pixel normals from central (or one-sided at the mask edge) differences of a depth map,
// oriented toward the camera. Pixels without a usable neighbour pair get a zero normal.
inline NormalField normals_from_depth(const DepthMap& depth, const CameraIntrinsics& k, const BitMask& mask) {
    NormalField out(depth.width(), depth.height(), Vec3::Zero());
    auto ok = [&](int u, int v) { return depth.contains(u, v) && mask(u, v) && depth.valid(u, v); };
    auto point = [&](int u, int v) { return k.unproject(u, v, depth(u, v)); };
    for (int v = 0; v < depth.height(); ++v) {
        for (int u = 0; u < depth.width(); ++u) {
            if (!ok(u, v)) continue;
            Vec3 du, dv;
            if (ok(u + 1, v) && ok(u - 1, v)) du = point(u + 1, v) - point(u - 1, v);
            else if (ok(u + 1, v)) du = point(u + 1, v) - point(u, v);
            else if (ok(u - 1, v)) du = point(u, v) - point(u - 1, v);
            else continue;
            if (ok(u, v + 1) && ok(u, v - 1)) dv = point(u, v + 1) - point(u, v - 1);
            else if (ok(u, v + 1)) dv = point(u, v + 1) - point(u, v);
            else if (ok(u, v - 1)) dv = point(u, v) - point(u, v - 1);
            else continue;
            Vec3 n = du.cross(dv);
            const double len = n.norm();
            if (len <= 0.0) continue;
            n /= len;
            if (n.dot(point(u, v)) > 0.0) n = -n;
            out(u, v) = n;
        }
    }
    return out;
}

}  // namespace mvps
