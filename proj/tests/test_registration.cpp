#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mvps/registration.hpp"
#include "support.hpp"

using namespace mvps;
using fixtures::BumpySphere;

namespace {

PointCloud add_outliers(PointCloud c, double fraction, std::uint64_t seed, double half_extent) {
    Rng rng(splitmix64(seed ^ 0x0a71ull));
    const auto n = std::size_t(std::round(fraction * double(c.size()) / (1.0 - fraction)));
    for (std::size_t i = 0; i < n; ++i)
        c.points.emplace_back(uniform(rng, -half_extent, half_extent), uniform(rng, -half_extent, half_extent),
                              uniform(rng, -half_extent, half_extent));
    c.normals.clear();
    return c;
}

}  // namespace

TEST(Register, SelfRegistrationIsIdentity) {
    const PointCloud model = BumpySphere{}.sample(3000, 1);
    const RegistrationResult r = register_cloud(model, model, PoseSE3::identity());
    EXPECT_LT(rotation_distance_deg(r.pose, PoseSE3::identity()), 1e-9);
    EXPECT_LT(r.pose.translation().norm(), 1e-9);
    EXPECT_LT(r.rms_residual, 1e-9);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.rank, 6);
    EXPECT_DOUBLE_EQ(r.inlier_fraction, 1.0);
}

TEST(Register, RecoversKnownTransformOnCleanClouds) {
    const BumpySphere s;
    const PointCloud model = s.sample(5000, 2);
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const PoseSE3 truth = fixtures::random_perturbation(rng, 15.0, 0.1 * s.diameter());
        const PointCloud live = transform(s.sample(5000, 100 + trial), truth.inverse());
        const RegistrationResult r = register_cloud(live, model, PoseSE3::identity());
        EXPECT_LT(rotation_distance_deg(r.pose, truth), 0.2);
        EXPECT_LT(translation_distance(r.pose, truth), 0.005 * s.diameter());
        EXPECT_GE(r.inlier_fraction, 0.0);
        EXPECT_LE(r.inlier_fraction, 1.0);
    }
}

TEST(Register, ToleratesTwentyPercentOutliers) {
    const BumpySphere s;
    const PointCloud model = s.sample(5000, 4);
    Rng rng(5);
    for (int trial = 0; trial < 3; ++trial) {
        const PoseSE3 truth = fixtures::random_perturbation(rng, 15.0, 0.1 * s.diameter());
        const PointCloud clean = transform(s.sample(4000, 200 + trial), truth.inverse());
        const PointCloud live = add_outliers(clean, 0.2, trial, s.diameter());
        const RegistrationResult r = register_cloud(live, model, PoseSE3::identity());
        EXPECT_LT(rotation_distance_deg(r.pose, truth), 1.0);
        EXPECT_LT(translation_distance(r.pose, truth), 0.01 * s.diameter());
    }
}

TEST(Register, LeftInvariance) {
    const BumpySphere s;
    const PointCloud model = s.sample(3000, 6);
    Rng rng(7);
    const PoseSE3 truth = fixtures::random_perturbation(rng, 8.0, 2.0);
    const PointCloud live = transform(s.sample(3000, 8), truth.inverse());
    const PoseSE3 q = fixtures::random_perturbation(rng, 40.0, 30.0);
    const RegistrationResult a = register_cloud(live, model, PoseSE3::identity());
    const RegistrationResult b =
        register_cloud(transform(live, q), transform(model, q), compose(q, compose(PoseSE3::identity(), q.inverse())));
    const PoseSE3 expect = q * a.pose * q.inverse();
    EXPECT_LT(rotation_distance_deg(b.pose, expect), 1e-6);
    EXPECT_LT(translation_distance(b.pose, expect), 1e-6);
}

TEST(Register, SphereRotationIsUnobservable) {
    const PointCloud model = [] {
        BumpySphere round;
        round.amplitude = 0.0;
        return round.sample(3000, 9);
    }();
    const RegistrationResult r = register_cloud(model, model, PoseSE3::identity());
    EXPECT_EQ(r.rank, 3);
    EXPECT_LT(r.min_eigen_ratio, 1e-9);
}

TEST(Register, Errors) {
    const PointCloud model = BumpySphere{}.sample(500, 1);
    PointCloud bare = model;
    bare.normals.clear();
    EXPECT_THROW(register_cloud(model, bare, PoseSE3::identity()), InputError);
    EXPECT_THROW(register_cloud(PointCloud{}, model, PoseSE3::identity()), InputError);
    const PointCloud few = BumpySphere{}.sample(50, 2);
    EXPECT_THROW(register_cloud(few, model, PoseSE3::identity()), InsufficientOverlapError);
    RegistrationParams prm;
    prm.max_distance = 1.0;
    const PointCloud far = transform(model, PoseSE3::from_axis_angle(Vec3::Zero(), Vec3(500, 0, 0)));
    EXPECT_THROW(register_cloud(far, model, PoseSE3::identity(), prm), InsufficientOverlapError);
    prm = RegistrationParams{};
    prm.trim_fraction = 1.0;
    EXPECT_THROW(register_cloud(model, model, PoseSE3::identity(), prm), InputError);
}

TEST(Accumulate, ClosedLoopReturnsIdentity) {
    Rng rng(11);
    std::vector<PoseSE3> deltas;
    PoseSE3 total = PoseSE3::identity();
    for (int i = 0; i < 9; ++i) {
        deltas.push_back(fixtures::random_perturbation(rng, 10.0, 5.0));
        total = total * deltas.back();
    }
    deltas.push_back(total.inverse());
    PoseSE3 p = PoseSE3::identity();
    for (const auto& d : deltas) p = accumulate(p, d);
    EXPECT_LT((p.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(p.translation().norm(), 1e-9);
    const PoseSE3 z10 = PoseSE3::from_axis_angle(Vec3(0, 0, deg2rad(10)));
    EXPECT_NEAR(rotation_distance_deg(accumulate(z10, z10), PoseSE3::identity()), 20.0, 1e-9);
}

TEST(PoseGraph, ConsistentChainHasZeroResidual) {
    Rng rng(12);
    PoseGraph g;
    g.nodes.push_back(PoseSE3::identity());
    for (int i = 1; i < 8; ++i) {
        const PoseSE3 rel = fixtures::random_perturbation(rng, 12.0, 4.0);
        g.edges.push_back({i - 1, i, rel, 1.0});
        g.nodes.push_back(g.nodes.back() * rel);
    }
    const PoseGraphResult r = refine_pose_graph(g, 0);
    EXPECT_LT(r.costs.back(), 1e-20);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        EXPECT_LT(rotation_distance_deg(r.poses[i], g.nodes[i]), 1e-7);
        EXPECT_LT(translation_distance(r.poses[i], g.nodes[i]), 1e-7);
    }
}

TEST(PoseGraph, TwoNodesFollowTheEdge) {
    PoseGraph g;
    const PoseSE3 first = PoseSE3::from_axis_angle(Vec3(0.1, 0.2, -0.3), Vec3(1, 2, 3));
    const PoseSE3 rel = PoseSE3::from_axis_angle(Vec3(-0.2, 0.05, 0.1), Vec3(4, -1, 0.5));
    g.nodes = {first, PoseSE3::identity()};
    g.edges = {{0, 1, rel, 1.0}};
    const PoseGraphResult r = refine_pose_graph(g, 0);
    const PoseSE3 expect = compose(first, rel);
    EXPECT_LT(rotation_distance_deg(r.poses[1], expect), 1e-6);
    EXPECT_LT(translation_distance(r.poses[1], expect), 1e-6);
    EXPECT_EQ(r.poses[0].rotation(), first.rotation());
    EXPECT_EQ(r.poses[0].translation(), first.translation());
}

TEST(PoseGraph, LoopClosureReducesDrift) {
    double chained = 0.0, refined = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto o = fixtures::pose_drift_trial(seed);
        chained += o.chained_error_deg;
        refined += o.refined_error_deg;
    }
    EXPECT_LE(refined, 0.5 * chained);
}

TEST(PoseGraph, CostNeverIncreasesAndFixedNodeStays) {
    Rng rng(13);
    PoseGraph g;
    for (int i = 0; i < 6; ++i) g.nodes.push_back(fixtures::random_perturbation(rng, 20.0, 10.0));
    for (int i = 0; i < 6; ++i)
        for (int j = i + 1; j < 6; j += 2)
            g.edges.push_back({i, j, fixtures::random_perturbation(rng, 5.0, 2.0), 1.0 + i});
    const PoseGraphResult r = refine_pose_graph(g, 2);
    for (std::size_t i = 1; i < r.costs.size(); ++i) EXPECT_LE(r.costs[i], r.costs[i - 1]);
    EXPECT_EQ(r.poses[2].rotation(), g.nodes[2].rotation());
    EXPECT_EQ(r.poses[2].translation(), g.nodes[2].translation());
}

TEST(PoseGraph, Errors) {
    PoseGraph g;
    g.nodes.assign(3, PoseSE3::identity());
    g.edges = {{0, 1, PoseSE3::identity(), 1.0}};
    EXPECT_THROW(refine_pose_graph(g, 0), InputError);  // node 2 disconnected
    g.edges.push_back({1, 3, PoseSE3::identity(), 1.0});
    EXPECT_THROW(refine_pose_graph(g, 0), InputError);
    g.edges = {{0, 1, PoseSE3::identity(), 0.0}, {1, 2, PoseSE3::identity(), 1.0}};
    EXPECT_THROW(refine_pose_graph(g, 0), InputError);
    g.edges[0].weight = 1.0;
    EXPECT_THROW(refine_pose_graph(g, 5), InputError);
}

TEST(PoseFile, RoundTripAndFormat) {
    const auto path = (std::filesystem::temp_directory_path() / "mvps_test_poses.txt").string();
    Rng rng(14);
    std::vector<PoseSE3> poses;
    for (int i = 0; i < 5; ++i) poses.push_back(fixtures::random_perturbation(rng, 30.0, 20.0));
    io::write_poses(path, poses);
    const auto back = io::read_poses(path);
    ASSERT_EQ(back.size(), poses.size());
    for (std::size_t i = 0; i < poses.size(); ++i) {
        EXPECT_EQ(back[i].rotation(), poses[i].rotation());
        EXPECT_EQ(back[i].translation(), poses[i].translation());
    }
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    std::istringstream ls(line);
    int count = 0;
    for (double x; ls >> x;) ++count;
    EXPECT_EQ(count, 12);
    std::filesystem::remove(path);
}
