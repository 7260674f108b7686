#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "mvps/geometry.hpp"
#include "mvps/random.hpp"

using namespace mvps;

namespace {

PoseSE3 random_pose(Rng& rng, double max_angle = 3.0, double max_t = 50.0) {
    const Vec3 axis = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized();
    const Vec3 t(uniform(rng, -max_t, max_t), uniform(rng, -max_t, max_t), uniform(rng, -max_t, max_t));
    return PoseSE3::from_axis_angle(uniform(rng, 0.0, max_angle) * axis, t);
}

CameraIntrinsics small_camera(int w, int h) {
    CameraIntrinsics k;
    k.fx = k.fy = 100.0;
    k.cx = (w - 1) * 0.5;
    k.cy = (h - 1) * 0.5;
    k.width = w;
    k.height = h;
    return k;
}

}  // namespace

TEST(Intrinsics, ValidateRejectsBadValues) {
    CameraIntrinsics k;
    EXPECT_NO_THROW(k.validate());
    k.fx = 0.0;
    EXPECT_THROW(k.validate(), InputError);
    k = CameraIntrinsics{};
    k.cx = k.width;
    EXPECT_THROW(k.validate(), InputError);
    k = CameraIntrinsics{};
    k.cy = -0.5;
    EXPECT_THROW(k.validate(), InputError);
}

TEST(Backproject, PrincipalPointRay) {
    CameraIntrinsics k = small_camera(9, 9);
    DepthMap depth(9, 9);
    BitMask mask(9, 9, 0);
    depth(4, 4) = 3.25;
    mask(4, 4) = 1;
    const PointCloud c = backproject(depth, k, mask);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.points[0], Vec3(0.0, 0.0, 3.25));
}

TEST(Backproject, DirectFormula) {
    CameraIntrinsics k;
    k.fx = k.fy = 100.0;
    k.cx = k.cy = 50.0;
    k.width = 200;
    k.height = 100;
    DepthMap depth(200, 100);
    BitMask mask(200, 100, 0);
    depth(150, 50) = 2.0;
    mask(150, 50) = 1;
    const PointCloud c = backproject(depth, k, mask);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_NEAR((c.points[0] - Vec3(2.0, 0.0, 2.0)).norm(), 0.0, 1e-15);
}

TEST(Backproject, ConstantPlaneIsCoplanar) {
    const CameraIntrinsics k = small_camera(4, 4);
    DepthMap depth(4, 4);
    depth.fill(7.0);
    const BitMask mask(4, 4, 1);
    const PointCloud c = backproject(depth, k, mask);
    ASSERT_EQ(c.size(), 16u);
    // Least-squares plane: normal is the eigenvector of the smallest covariance eigenvalue.
    Vec3 mean = Vec3::Zero();
    for (const auto& p : c.points) mean += p;
    mean /= 16.0;
    Mat3 cov = Mat3::Zero();
    for (const auto& p : c.points) cov += (p - mean) * (p - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 n = es.eigenvectors().col(0);
    double worst = 0.0;
    for (const auto& p : c.points) worst = std::max(worst, std::abs(n.dot(p - mean)));
    EXPECT_LT(worst, 1e-12);
}

TEST(Backproject, RowMajorOrderAndReprojection) {
    const CameraIntrinsics k = small_camera(12, 10);
    DepthMap depth(12, 10);
    BitMask mask(12, 10, 0);
    Rng rng(7);
    std::vector<Vec2> pixels;
    for (int v = 0; v < 10; ++v)
        for (int u = 0; u < 12; ++u)
            if (uniform01(rng) < 0.5) {
                mask(u, v) = 1;
                depth(u, v) = uniform(rng, 1.0, 100.0);
                pixels.emplace_back(u, v);
            }
    const PointCloud c = backproject(depth, k, mask);
    ASSERT_EQ(c.size(), pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        EXPECT_LT((k.project(c.points[i]) - pixels[i]).norm(), 1e-6);
        EXPECT_DOUBLE_EQ(c.points[i].z(), depth(int(pixels[i].x()), int(pixels[i].y())));
    }
}

TEST(Backproject, Errors) {
    const CameraIntrinsics k = small_camera(4, 4);
    DepthMap depth(4, 4);
    depth.fill(1.0);
    EXPECT_THROW(backproject(DepthMap(5, 4), k, BitMask(5, 4, 1)), InputError);
    EXPECT_THROW(backproject(depth, k, BitMask(3, 4, 1)), InputError);
    BitMask mask(4, 4, 1);
    depth(2, 1) = kInvalidDepth;
    EXPECT_THROW(backproject(depth, k, mask), DataError);
    depth(2, 1) = -1.0;
    EXPECT_THROW(backproject(depth, k, mask), DataError);
    mask(2, 1) = 0;
    EXPECT_EQ(backproject(depth, k, mask).size(), 15u);
}

TEST(Transform, IdentityKeepsCloud) {
    PointCloud c;
    c.points = {{1, 2, 3}, {-4, 5, 0.5}};
    c.normals = {Vec3(0, 0, 1), Vec3(1, 0, 0)};
    const PointCloud out = transform(c, PoseSE3::identity());
    EXPECT_EQ(out.points, c.points);
    EXPECT_EQ(out.normals, c.normals);
}

TEST(Transform, HalfTurnAboutZ) {
    PointCloud c;
    c.points = {{1, 0, 0}};
    const PointCloud out = transform(c, PoseSE3::from_axis_angle(Vec3(0, 0, std::numbers::pi)));
    EXPECT_LT((out.points[0] - Vec3(-1, 0, 0)).norm(), 1e-12);
}

TEST(Transform, InverseRestoresCloudAndPreservesRigidity) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const PoseSE3 p = random_pose(rng);
        PointCloud c;
        for (int i = 0; i < 50; ++i) {
            c.points.emplace_back(uniform(rng, -30, 30), uniform(rng, -30, 30), uniform(rng, -30, 30));
            c.normals.push_back(Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized());
        }
        const PointCloud moved = transform(c, p);
        // Analytic inverse: R^T (x - t).
        for (std::size_t i = 0; i < c.size(); ++i) {
            const Vec3 back = p.rotation().transpose() * (moved.points[i] - p.translation());
            EXPECT_LT((back - c.points[i]).norm(), 1e-9);
            EXPECT_NEAR(moved.normals[i].norm(), 1.0, 1e-9);
            EXPECT_LT((moved.normals[i] - p.rotation() * c.normals[i]).norm(), 1e-12);
        }
        const PointCloud round = transform(moved, inverse(p));
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_LT((round.points[i] - c.points[i]).norm(), 1e-9);
        for (std::size_t i = 1; i < c.size(); ++i)
            EXPECT_NEAR((moved.points[i] - moved.points[0]).norm(), (c.points[i] - c.points[0]).norm(), 1e-9);
    }
}

TEST(Pose, ComposeIdentityAndInverse) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const PoseSE3 p = random_pose(rng);
        const PoseSE3 a = compose(PoseSE3::identity(), p);
        EXPECT_EQ(a.rotation(), p.rotation());
        EXPECT_EQ(a.translation(), p.translation());
        const PoseSE3 e = compose(p, inverse(p));
        EXPECT_LT((e.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LT(e.translation().norm(), 1e-9);
        const PoseSE3 f = inverse(compose(p, inverse(p)));
        EXPECT_LT((f.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Pose, ComposeAppliesRightOperandFirst) {
    const PoseSE3 a = PoseSE3::from_axis_angle(Vec3(0, 0, std::numbers::pi / 2));
    const PoseSE3 b = PoseSE3::from_axis_angle(Vec3::Zero(), Vec3(1, 0, 0));
    const Vec3 x(0, 0, 0);
    EXPECT_LT((compose(a, b) * x - a * (b * x)).norm(), 1e-15);
    EXPECT_LT((compose(a, b) * x - Vec3(0, 1, 0)).norm(), 1e-12);
}

TEST(Pose, TwoTenDegreeTurnsMakeTwenty) {
    const PoseSE3 r10 = PoseSE3::from_axis_angle(Vec3(0, 0, deg2rad(10.0)));
    const PoseSE3 r20 = compose(r10, r10);
    // Angle and axis extracted independently from the matrix entries.
    const Mat3& m = r20.rotation();
    const double angle = std::acos((m.trace() - 1.0) / 2.0);
    EXPECT_NEAR(rad2deg(angle), 20.0, 1e-9);
    const Vec3 axis = Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)).normalized();
    EXPECT_LT((axis - Vec3(0, 0, 1)).norm(), 1e-9);
}

TEST(Pose, ValidateRejectsNonRotation) {
    Mat3 s = Mat3::Identity();
    s(0, 0) = 1.01;
    EXPECT_THROW(PoseSE3(s, Vec3::Zero()), InputError);
    Mat3 reflect = Mat3::Identity();
    reflect(2, 2) = -1.0;
    EXPECT_THROW(PoseSE3(reflect, Vec3::Zero()), InputError);
    EXPECT_THROW(PoseSE3(Mat3::Identity(), Vec3(0, std::nan(""), 0)), InputError);
}

TEST(Pose, LogExpRoundTrip) {
    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const Vec3 w = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized() * uniform(rng, 0.0, 3.1);
        EXPECT_LT((log_so3(exp_so3(w)) - w).norm(), 1e-8);
    }
}

TEST(Mesh, ValidateAndArea) {
    TriangleMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    m.triangles = {{0, 1, 2}};
    EXPECT_NO_THROW(m.validate());
    EXPECT_DOUBLE_EQ(m.area(), 0.5);
    m.triangles = {{0, 1, 3}};
    EXPECT_THROW(m.validate(), InputError);
    m.triangles = {{0, 1, 1}};
    EXPECT_THROW(m.validate(), InputError);
}

TEST(Cloud, ValidateNormals) {
    PointCloud c;
    c.points = {{0, 0, 1}, {0, 0, 2}};
    c.normals = {Vec3(0, 0, 1)};
    EXPECT_THROW(c.validate(), InputError);
    c.normals = {Vec3(0, 0, 1), Vec3(0, 0, 2)};
    EXPECT_THROW(c.validate(), InputError);
    c.normals[1] = Vec3(0, 1, 0);
    EXPECT_NO_THROW(c.validate());
}

TEST(NormalsFromDepth, FrontoParallelPlaneFacesCamera) {
    const CameraIntrinsics k = small_camera(8, 8);
    DepthMap depth(8, 8);
    depth.fill(10.0);
    const NormalField n = normals_from_depth(depth, k, BitMask(8, 8, 1));
    for (int v = 0; v < 8; ++v)
        for (int u = 0; u < 8; ++u) EXPECT_LT((n(u, v) - Vec3(0, 0, -1)).norm(), 1e-12);
}
