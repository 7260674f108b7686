#pragma once

// Shared fixtures for the unit tests and the acceptance runner.

#include <cmath>
#include <numbers>
#include <vector>

#include "mvps/geometry.hpp"
#include "mvps/random.hpp"
#include "mvps/registration.hpp"

namespace mvps::fixtures {

// Star-shaped surface r(d) = R (1 + a h(d)) over unit directions d, with an
// asymmetric h so that no rotation maps the surface onto itself.
struct BumpySphere {
    double radius = 20.0;
    double amplitude = 0.15;

    static double h(const Vec3& d) { return d.x() * d.y() + 0.6 * d.z() * d.z() * d.z() + 0.4 * d.x() * d.z(); }
    static Vec3 grad_h(const Vec3& d) {
        return {d.y() + 0.4 * d.z(), d.x(), 1.8 * d.z() * d.z() + 0.4 * d.x()};
    }

    Vec3 point(const Vec3& d) const { return radius * (1.0 + amplitude * h(d)) * d; }

    // Gradient of F(x) = |x| - R (1 + a h(x / |x|)), normalised.
    Vec3 normal(const Vec3& d) const {
        const double r = radius * (1.0 + amplitude * h(d));
        const Vec3 g = grad_h(d);
        const Vec3 tangential = (g - g.dot(d) * d) / r;
        return (d - radius * amplitude * tangential).normalized();
    }

    PointCloud sample(std::size_t count, std::uint64_t seed) const {
        Rng rng(splitmix64(seed));
        PointCloud c;
        c.points.reserve(count);
        c.normals.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            const Vec3 d = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized();
            c.points.push_back(point(d));
            c.normals.push_back(normal(d));
        }
        return c;
    }

    double diameter() const { return 2.0 * radius * (1.0 + amplitude * 1.6); }
};

// Random pose with rotation angle exactly `angle_deg` and translation length exactly `trans`.
inline PoseSE3 random_perturbation(Rng& rng, double angle_deg, double trans) {
    const Vec3 axis = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized();
    const Vec3 dir = Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized();
    return PoseSE3::from_axis_angle(deg2rad(angle_deg) * axis, trans * dir);
}

struct DriftOutcome {
    double chained_error_deg = 0.0;
    double refined_error_deg = 0.0;
};

// 36-stop circle of camera poses; each measured edge carries a random rotation
// of `noise_deg` (and translation noise of 0.5% of the step) and a loop edge
// from the last stop back to the first is measured with the same noise.
inline DriftOutcome pose_drift_trial(std::uint64_t seed, double noise_deg = 0.5, int stops = 36) {
    Rng rng(splitmix64(seed ^ 0xd81f7ull));
    std::vector<PoseSE3> truth;
    const double standoff = 100.0;
    for (int i = 0; i < stops; ++i) {
        const double a = 2.0 * std::numbers::pi * i / stops;
        const Mat3 r = exp_so3(Vec3(0, -a, 0));
        truth.push_back(PoseSE3(r, -(r * Vec3(0, 0, standoff)) + Vec3(0, 0, standoff)));
    }
    auto noisy = [&](const PoseSE3& rel) {
        const double step = std::max(rel.translation().norm(), 1.0);
        return compose(rel, random_perturbation(rng, noise_deg, 0.005 * step));
    };
    PoseGraph g;
    g.nodes.push_back(truth[0]);
    for (int i = 1; i < stops; ++i) {
        const PoseSE3 rel = noisy(truth[i - 1].inverse() * truth[i]);
        g.edges.push_back({i - 1, i, rel, 1.0});
        g.nodes.push_back(accumulate(g.nodes.back(), rel));
    }
    g.edges.push_back({stops - 1, 0, noisy(truth[stops - 1].inverse() * truth[0]), 1.0});
    const PoseGraphResult res = refine_pose_graph(g, 0);
    DriftOutcome out;
    out.chained_error_deg = rotation_distance_deg(g.nodes.back(), truth.back());
    out.refined_error_deg = rotation_distance_deg(res.poses.back(), truth.back());
    return out;
}

}  // namespace mvps::fixtures
