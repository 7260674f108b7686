#include <gtest/gtest.h>

#include <filesystem>

#include "mvps/dataset.hpp"
#include "mvps/scene_sim.hpp"

using namespace mvps;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mvps_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

CameraIntrinsics camera(int size = 64, double f = 128.0) {
    CameraIntrinsics k;
    k.fx = k.fy = f;
    k.cx = k.cy = (size - 1) * 0.5;
    k.width = k.height = size;
    return k;
}

Vec3 optical_axis(const PoseSE3& p) { return p.rotation().col(2); }

}  // namespace

TEST(Trajectory, CircleStopsAreNinetyDegreesApart) {
    Trajectory spec;
    const auto poses = generate_trajectory(spec, Vec3::Zero());
    ASSERT_EQ(poses.size(), 36u);
    const double c = optical_axis(poses[0]).dot(optical_axis(poses[9]));
    EXPECT_NEAR(rad2deg(std::acos(std::clamp(c, -1.0, 1.0))), 90.0, 1e-6);
    EXPECT_NEAR(rotation_distance_deg(poses[0], poses[9]), 90.0, 1e-9);
}

TEST(Trajectory, CircleKeepsStandoffAndFacesCenter) {
    Trajectory spec;
    spec.stop_count = 24;
    spec.angular_step_deg = 15.0;
    spec.standoff = 73.0;
    spec.elevation_deg = 20.0;
    const Vec3 center(3, -2, 11);
    for (const auto& p : generate_trajectory(spec, center)) {
        EXPECT_NEAR((p.translation() - center).norm(), 73.0, 1e-9);
        const Vec3 to_center = center - p.translation();
        const double miss = (to_center - to_center.dot(optical_axis(p)) * optical_axis(p)).norm();
        EXPECT_LT(miss, 1e-6 * spec.standoff);
        EXPECT_NO_THROW(p.validate());
    }
}

TEST(Trajectory, SquareAndZigzagFaceCenter) {
    for (auto kind : {TrajectoryKind::square, TrajectoryKind::zigzag}) {
        Trajectory spec;
        spec.kind = kind;
        const Vec3 center(1, 2, 3);
        for (const auto& p : generate_trajectory(spec, center)) {
            const Vec3 to_center = center - p.translation();
            EXPECT_LT((to_center - to_center.dot(optical_axis(p)) * optical_axis(p)).norm(), 1e-6 * spec.standoff);
        }
    }
}

TEST(Trajectory, ZigzagAlternatesAndKeepsObjectInFrustum) {
    Trajectory spec;
    spec.kind = TrajectoryKind::zigzag;
    spec.zigzag_amplitude = 0.1;
    const double radius = 20.0;
    const CameraIntrinsics k;  // default 250 x 250, f = 500
    const auto poses = generate_trajectory(spec, Vec3::Zero());
    for (std::size_t i = 0; i < poses.size(); ++i) {
        const double d = poses[i].translation().norm();
        EXPECT_NEAR(d, i % 2 == 0 ? 90.0 : 110.0, 1e-9);
        if (i > 0) {
            EXPECT_GT(std::abs(d - poses[i - 1].translation().norm()), 19.0);
        }
        // Frustum containment: every bounding-sphere extreme along the image axes projects inside the image.
        const PoseSE3 w2c = poses[i].inverse();
        for (const Vec3& dir : {Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(0, 1, 0), Vec3(0, -1, 0)}) {
            const Vec3 c = w2c * Vec3::Zero();
            // Tangent point of the silhouette cone, computed in the camera frame.
            const double dist = c.norm();
            const double s = radius / dist;
            const Vec3 axis = c / dist;
            const Vec3 side = (dir - dir.dot(axis) * axis).normalized();
            const Vec3 ray = std::sqrt(1 - s * s) * axis + s * side;
            const Vec2 px = k.project(ray);
            EXPECT_GT(px.x(), 0.0);
            EXPECT_LT(px.x(), k.width - 1.0);
            EXPECT_GT(px.y(), 0.0);
            EXPECT_LT(px.y(), k.height - 1.0);
        }
    }
}

TEST(Trajectory, InvalidSpecs) {
    Trajectory spec;
    spec.stop_count = 1;
    EXPECT_THROW(generate_trajectory(spec, Vec3::Zero()), InputError);
    spec = Trajectory{};
    spec.stop_count = 37;
    EXPECT_THROW(generate_trajectory(spec, Vec3::Zero()), InputError);
    spec = Trajectory{};
    spec.standoff = 0.0;
    EXPECT_THROW(generate_trajectory(spec, Vec3::Zero()), InputError);
    EXPECT_THROW(parse_trajectory_kind("spiral"), InputError);
    EXPECT_TRUE(Trajectory{}.closes_loop());
}

TEST(Render, HeadlightPeaksAtFrontalPixel) {
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0, 1.0);
    LightRig rig;
    rig.directions = {Vec3(0, 0, -1), Vec3(0, 1, 0), Vec3(1, 0, 0)};
    rig.intensities = {1.0, 1.0, 1.0};
    rig.active = {0, 1, 2};
    const PSImageStack s = render_view(obj, PoseSE3::identity(), rig, k);
    float best = -1.0f;
    int bu = -1, bv = -1;
    for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u)
            if (s.images[0](u, v) > best) {
                best = s.images[0](u, v);
                bu = u;
                bv = v;
            }
    // Pixels whose normal is closest to -z: the four around the principal point (cx = 31.5).
    EXPECT_TRUE((bu == 31 || bu == 32) && (bv == 31 || bv == 32));
}

TEST(Render, LambertianFormulaAndSphereNormals) {
    const CameraIntrinsics k = camera();
    const Vec3 center(2, -3, 70);
    const double radius = 20.0;
    SceneObject obj = SceneObject::sphere(center, radius, 1.0);
    LightRig rig = LightRig::ring(8, 30.0, 2.0);
    const PSImageStack s = render_view(obj, PoseSE3::identity(), rig, k);
    ASSERT_EQ(s.images.size(), 8u);
    int checked = 0;
    for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u) {
            if (!s.mask(u, v)) {
                for (const auto& img : s.images) EXPECT_EQ(img(u, v), 0.0f);
                continue;
            }
            const Vec3 p = k.unproject(u, v, (*s.gt_depth)(u, v));
            EXPECT_NEAR((p - center).norm(), radius, 1e-6);
            const Vec3 n = (p - center) / radius;
            EXPECT_LT(((*s.gt_normals)(u, v) - n).norm(), 1e-6);
            for (std::size_t i = 0; i < 8; ++i) {
                const double expect = 2.0 * std::max(0.0, n.dot(rig.directions[i]));
                EXPECT_NEAR(s.images[i](u, v), expect, 1e-6);
            }
            ++checked;
        }
    EXPECT_GT(checked, 500);
}

TEST(Render, DirectFormulaValue) {
    // albedo 1, e = 2, n.l = 0.5 -> 1.0 at the pixel on the optical axis (n = -z).
    const CameraIntrinsics k = camera(65);
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0, 1.0);
    LightRig rig;
    const double a = std::acos(0.5);
    rig.directions = {Vec3(std::sin(a), 0, -std::cos(a)), Vec3(0, 0, -1), Vec3(0, 1, 0)};
    rig.intensities = {2.0, 1.0, 1.0};
    rig.active = {0, 1, 2};
    const PSImageStack s = render_view(obj, PoseSE3::identity(), rig, k);
    EXPECT_NEAR(s.images[0](32, 32), 1.0, 1e-6);
}

TEST(Render, IntensityScalingAndDeterminism) {
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0, 0.7);
    const LightRig rig = LightRig::ring();
    LightRig bright = rig;
    for (auto& e : bright.intensities) e *= 3.0;
    const PSImageStack a = render_view(obj, PoseSE3::identity(), rig, k);
    const PSImageStack b = render_view(obj, PoseSE3::identity(), bright, k);
    for (std::size_t i = 0; i < a.images.size(); ++i)
        for (std::size_t p = 0; p < a.images[i].size(); ++p)
            EXPECT_NEAR(b.images[i][p], 3.0f * a.images[i][p], 1e-6);
    RenderOptions opt;
    opt.noise_sigma = 0.01;
    opt.seed = 99;
    const PSImageStack n1 = render_view(obj, PoseSE3::identity(), rig, k, opt);
    const PSImageStack n2 = render_view(obj, PoseSE3::identity(), rig, k, opt);
    EXPECT_EQ(n1.images, n2.images);
    opt.seed = 100;
    EXPECT_NE(render_view(obj, PoseSE3::identity(), rig, k, opt).images, n1.images);
}

TEST(Render, ExternalLightsAddShading) {
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0, 0.5);
    const LightRig rig = LightRig::ring();
    RenderOptions opt;
    opt.external_lights = {{Vec3(0, 0, -1), 0.4}};
    const PSImageStack a = render_view(obj, PoseSE3::identity(), rig, k);
    const PSImageStack b = render_view(obj, PoseSE3::identity(), rig, k, opt);
    for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u) {
            if (!a.mask(u, v)) continue;
            const double ext = 0.4 * 0.5 * std::max(0.0, -(*a.gt_normals)(u, v).z());
            EXPECT_NEAR(b.images[3](u, v) - a.images[3](u, v), ext, 1e-6);
        }
}

TEST(Render, Errors) {
    const CameraIntrinsics k = camera();
    const LightRig rig = LightRig::ring();
    EXPECT_THROW(render_view(SceneObject::sphere(Vec3(0, 0, -60), 20.0), PoseSE3::identity(), rig, k), RenderError);
    EXPECT_THROW(render_view(SceneObject::sphere(Vec3(500, 0, 60), 5.0), PoseSE3::identity(), rig, k), RenderError);
    EXPECT_THROW(render_view(SceneObject::sphere(Vec3(0, 0, 60), -1.0), PoseSE3::identity(), rig, k), InputError);
    LightRig two = rig;
    two.active = {0, 1};
    EXPECT_THROW(render_view(SceneObject::sphere(Vec3(0, 0, 60), 20.0), PoseSE3::identity(), two, k), InputError);
}

TEST(Render, MeshMatchesSphereApproximately) {
    const CameraIntrinsics k = camera();
    const Vec3 center(0, 0, 60);
    const SceneObject sphere = SceneObject::sphere(center, 20.0, 1.0);
    const SceneObject mesh = SceneObject::mesh(icosphere(center, 20.0, 5), 1.0);
    const LightRig rig = LightRig::ring();
    const PSImageStack a = render_view(sphere, PoseSE3::identity(), rig, k);
    const PSImageStack b = render_view(mesh, PoseSE3::identity(), rig, k);
    int both = 0;
    for (int v = 0; v < k.height; ++v)
        for (int u = 0; u < k.width; ++u)
            if (a.mask(u, v) && b.mask(u, v)) {
                ++both;
                EXPECT_NEAR((*a.gt_depth)(u, v), (*b.gt_depth)(u, v), 0.1);
                EXPECT_LT(((*a.gt_normals)(u, v) - (*b.gt_normals)(u, v)).norm(), 0.02);
            }
    EXPECT_GT(both, 0.95 * count_set(a.mask));
}

TEST(Median, EvenCountAveragesMiddlePair) {
    PSImageStack s;
    s.mask = BitMask(1, 1, 1);
    for (int i = 8; i >= 1; --i) {
        s.images.emplace_back(1, 1, float(i));
        s.light_ids.push_back(8 - i);
    }
    EXPECT_FLOAT_EQ(median_image(s)(0, 0), 4.5f);
}

TEST(Median, IdenticalImagesAndBruteForce) {
    Rng rng(4);
    PSImageStack s;
    s.mask = BitMask(7, 5, 1);
    Image base(7, 5);
    for (auto& x : base.storage()) x = float(uniform01(rng));
    for (int i = 0; i < 3; ++i) s.images.push_back(base);
    EXPECT_EQ(median_image(s), base);
    for (int n : {8, 5}) {
        s.images.clear();
        for (int i = 0; i < n; ++i) {
            Image img(7, 5);
            for (auto& x : img.storage()) x = float(uniform01(rng));
            s.images.push_back(img);
        }
        const Image m = median_image(s);
        for (std::size_t p = 0; p < m.size(); ++p) {
            std::vector<double> vals;
            for (const auto& img : s.images) vals.push_back(img[p]);
            std::sort(vals.begin(), vals.end());
            const double expect = n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
            EXPECT_FLOAT_EQ(m[p], float(expect));
        }
    }
    s.images.clear();
    EXPECT_THROW(median_image(s), InputError);
}

TEST(PerturbLights, BoundsAndDeterminism) {
    const LightRig rig = LightRig::ring();
    const LightRig same = perturb_lights(rig, 0.0, 0.0, 5);
    EXPECT_EQ(same, rig);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const LightRig p = perturb_lights(rig, 5.0, 0.1, seed);
        for (std::size_t k = 0; k < rig.size(); ++k) {
            const double ang = rad2deg(std::acos(std::clamp(p.directions[k].dot(rig.directions[k]), -1.0, 1.0)));
            EXPECT_LE(ang, 5.0 + 1e-9);
            EXPECT_NEAR(p.directions[k].norm(), 1.0, 1e-12);
            EXPECT_GE(p.intensities[k], 0.9 - 1e-12);
            EXPECT_LE(p.intensities[k], 1.1 + 1e-12);
        }
        EXPECT_EQ(p, perturb_lights(rig, 5.0, 0.1, seed));
    }
    EXPECT_THROW(perturb_lights(rig, -1.0, 0.0, 0), InputError);
}

TEST(LightRig, SpreadSelectionAndValidation) {
    const LightRig rig = LightRig::ring();
    EXPECT_EQ(select_spread_leds(rig, 4), (std::vector<int>{0, 2, 4, 6}));
    EXPECT_EQ(select_spread_leds(rig, 8).size(), 8u);
    EXPECT_THROW(select_spread_leds(rig, 9), InputError);
    LightRig bad = rig;
    bad.directions[2] *= 1.1;
    EXPECT_THROW(bad.validate(), InputError);
    bad = rig;
    bad.intensities[0] = 0.0;
    EXPECT_THROW(bad.validate(), InputError);
}

TEST(Icosphere, ClosedAndOutward) {
    const TriangleMesh m = icosphere(Vec3(1, 2, 3), 5.0, 3);
    EXPECT_NO_THROW(m.validate());
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> edges;
    for (const auto& t : m.triangles) {
        for (int e = 0; e < 3; ++e) ++edges[{t[e], t[(e + 1) % 3]}];
        const Vec3 n = (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
        EXPECT_GT(n.dot(m.vertices[t[0]] - Vec3(1, 2, 3)), 0.0);
    }
    for (const auto& [e, c] : edges) {
        EXPECT_EQ(c, 1);
        EXPECT_EQ(edges.count({e.second, e.first}), 1u);
    }
}

TEST(Dataset, RoundTripPfm) {
    const fs::path root = scratch_dir("roundtrip_pfm");
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3::Zero(), 20.0);
    Trajectory spec;
    spec.stop_count = 3;
    spec.standoff = 70.0;
    const auto poses = generate_trajectory(spec, Vec3::Zero());
    const LightRig rig = LightRig::ring();
    std::vector<PSImageStack> views;
    RenderOptions opt;
    opt.noise_sigma = 0.01;
    for (int t = 0; t < 3; ++t) {
        opt.seed = t;
        views.push_back(render_view(obj, poses[t], rig, k, opt));
        views.back().view_index = t;
    }
    io::write_dataset(root.string(), views, k, poses, rig);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(root))
        files += e.path().filename().string().rfind("light_", 0) == 0;
    EXPECT_EQ(files, 24u);

    const Dataset d = io::read_dataset(root.string());
    EXPECT_EQ(d.k, k);
    EXPECT_EQ(d.rig, rig);
    ASSERT_TRUE(d.gt_poses.has_value());
    ASSERT_EQ(d.views.size(), 3u);
    EXPECT_TRUE(d.has_ground_truth());
    for (int t = 0; t < 3; ++t) {
        EXPECT_EQ((*d.gt_poses)[t].rotation(), poses[t].rotation());
        EXPECT_EQ((*d.gt_poses)[t].translation(), poses[t].translation());
        EXPECT_EQ(d.views[t].images, views[t].images);
        EXPECT_EQ(d.views[t].mask, views[t].mask);
        EXPECT_EQ(d.views[t].light_ids, views[t].light_ids);
        for (std::size_t p = 0; p < views[t].gt_depth->size(); ++p) {
            const double a = (*views[t].gt_depth)[p], b = (*d.views[t].gt_depth)[p];
            if (std::isnan(a)) EXPECT_TRUE(std::isnan(b));
            else EXPECT_EQ(float(a), b);
        }
    }
    fs::remove_all(root);
}

TEST(Dataset, FullRigWritesEightImagesPerView) {
    const fs::path root = scratch_dir("count");
    const CameraIntrinsics k = camera(32, 64.0);
    const SceneObject obj = SceneObject::sphere(Vec3::Zero(), 20.0);
    const auto poses = generate_trajectory(Trajectory{}, Vec3::Zero());
    std::vector<PSImageStack> views;
    for (const auto& p : poses) views.push_back(render_view(obj, p, LightRig::ring(), k));
    io::write_dataset(root.string(), views, k, poses, LightRig::ring(), ImageFormat::png16);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(root))
        files += e.path().filename().string().rfind("light_", 0) == 0;
    EXPECT_EQ(files, 288u);
    const io::DatasetReader reader(root.string());
    EXPECT_EQ(reader.view_count(), 36);
    EXPECT_EQ(reader.format(), ImageFormat::png16);
    const PSImageStack v = reader.load_view(5);
    for (std::size_t i = 0; i < v.images.size(); ++i)
        for (std::size_t p = 0; p < v.images[i].size(); ++p)
            EXPECT_NEAR(v.images[i][p], views[5].images[i][p], 0.5 / 65535.0 + 1e-7);
    fs::remove_all(root);
}

TEST(Dataset, MissingMaskNamesView) {
    const fs::path root = scratch_dir("missing");
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0);
    std::vector<PSImageStack> views(2, render_view(obj, PoseSE3::identity(), LightRig::ring(), k));
    io::write_dataset(root.string(), views, k, {}, LightRig::ring());
    fs::remove(root / "view_01" / "mask.png");
    const io::DatasetReader reader(root.string());
    EXPECT_FALSE(reader.gt_poses().has_value());
    try {
        reader.load_view(1);
        FAIL() << "expected MissingAssetError";
    } catch (const MissingAssetError& e) {
        EXPECT_EQ(e.view(), 1);
        EXPECT_NE(std::string(e.what()).find("view_01"), std::string::npos);
    }
    fs::remove_all(root);
}

TEST(Dataset, CorruptLightsLineReportsLineNumber) {
    const fs::path root = scratch_dir("lights");
    const CameraIntrinsics k = camera();
    const SceneObject obj = SceneObject::sphere(Vec3(0, 0, 60), 20.0);
    std::vector<PSImageStack> views(1, render_view(obj, PoseSE3::identity(), LightRig::ring(), k));
    io::write_dataset(root.string(), views, k, {}, LightRig::ring());
    {
        std::ifstream is(root / "lights.txt");
        std::vector<std::string> lines;
        for (std::string l; std::getline(is, l);) lines.push_back(l);
        lines[4] = "0.1 0.2 oops 1";
        std::ofstream os(root / "lights.txt");
        for (const auto& l : lines) os << l << "\n";
    }
    try {
        io::DatasetReader reader(root.string());
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 5u);
    }
    fs::remove_all(root);
}

TEST(Dataset, IntrinsicsAndPosesParseErrors) {
    const fs::path root = scratch_dir("parse");
    {
        std::ofstream os(root / "K.txt");
        os << "100 0 50\n0 100 50\n0 0 2\n";
    }
    EXPECT_THROW(io::read_intrinsics((root / "K.txt").string(), 100, 100), ParseError);
    {
        std::ofstream os(root / "poses.txt");
        os << "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 2 0\n";
    }
    try {
        io::read_poses((root / "poses.txt").string());
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
    EXPECT_THROW(io::DatasetReader((root / "nope").string()), IoError);
    fs::remove_all(root);
}
