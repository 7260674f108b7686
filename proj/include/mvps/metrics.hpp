#pragma once

// Reconstruction and trajectory metrics: precision/recall/F-score at a
// threshold, Chamfer-L1, average relative depth error, pose errors after
// trajectory alignment, surface sampling and planar cross-section profiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"
#include "mvps/kdtree.hpp"
#include "mvps/random.hpp"

namespace mvps {

struct FScore {
    double precision = 0.0;
    double recall = 0.0;
    double fscore = 0.0;
};

namespace detail {

inline std::vector<double> nn_distances(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    const KdTree3 tree(to);
    std::vector<double> d(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) d[i] = std::sqrt(tree.nearest(from[i]).sq_dist);
    return d;
}

inline void require_nonempty(const std::vector<Vec3>& a, const std::vector<Vec3>& b, const char* who) {
    if (a.empty() || b.empty()) throw InputError(std::string(who) + ": empty point cloud");
}

}  // namespace detail

inline FScore fscore(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau) {
    detail::require_nonempty(pred, gt, "fscore");
    if (!(tau > 0.0)) throw InputError("fscore: threshold must be positive");
    const auto dp = detail::nn_distances(pred, gt);
    const auto dg = detail::nn_distances(gt, pred);
    FScore f;
    f.precision = double(std::count_if(dp.begin(), dp.end(), [&](double d) { return d <= tau; })) / double(dp.size());
    f.recall = double(std::count_if(dg.begin(), dg.end(), [&](double d) { return d <= tau; })) / double(dg.size());
    f.fscore = f.precision + f.recall > 0.0 ? 2.0 * f.precision * f.recall / (f.precision + f.recall) : 0.0;
    return f;
}

inline FScore fscore(const PointCloud& pred, const PointCloud& gt, double tau) {
    return fscore(pred.points, gt.points, tau);
}

// 1/2 (mean NN distance pred -> gt + mean NN distance gt -> pred).
inline double chamfer_l1(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt) {
    detail::require_nonempty(pred, gt, "chamfer_l1");
    const auto dp = detail::nn_distances(pred, gt);
    const auto dg = detail::nn_distances(gt, pred);
    double sp = 0.0, sg = 0.0;
    for (double d : dp) sp += d;
    for (double d : dg) sg += d;
    return 0.5 * (sp / double(dp.size()) + sg / double(dg.size()));
}

inline double chamfer_l1(const PointCloud& pred, const PointCloud& gt) { return chamfer_l1(pred.points, gt.points); }

// Mean over the mask of |pred - gt| / gt.
inline double ard(const Grid<double>& pred, const Grid<double>& gt, const BitMask& mask) {
    if (!pred.same_shape(gt) || !pred.same_shape(mask)) throw InputError("ard: shape mismatch");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (!mask[i]) continue;
        if (!(gt[i] > 0.0) || !std::isfinite(gt[i])) throw InputError("ard: ground truth must be positive on the mask");
        if (!std::isfinite(pred[i])) throw InputError("ard: prediction not finite on the mask");
        s += std::abs(pred[i] - gt[i]) / gt[i];
        ++n;
    }
    if (n == 0) throw InputError("ard: empty mask");
    return s / double(n);
}

// ---------------------------------------------------------------------------
// Trajectories

// x_gt ~ scale * rotation * x_est + translation.
struct Similarity {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    double scale = 1.0;

    PoseSE3 apply(const PoseSE3& p) const {
        return PoseSE3::orthonormalized(rotation * p.rotation(), scale * (rotation * p.translation()) + translation);
    }
};

// Closed-form least-squares fit of estimated camera centres onto ground-truth centres
// (Kabsch, or Umeyama when with_scale). When the centres do not span a plane the fit
// falls back to the rigid transform that maps the first estimated pose onto the first
// ground-truth pose.
inline Similarity align_trajectory(const std::vector<PoseSE3>& est, const std::vector<PoseSE3>& gt,
                                   bool with_scale = false) {
    if (est.size() != gt.size()) throw InputError("align_trajectory: trajectory lengths differ");
    if (est.size() < 2) throw InputError("align_trajectory: need at least two poses");
    const std::size_t n = est.size();
    Vec3 me = Vec3::Zero(), mg = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        me += est[i].translation();
        mg += gt[i].translation();
    }
    me /= double(n);
    mg /= double(n);
    Mat3 cov = Mat3::Zero();
    double var_e = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 de = est[i].translation() - me, dg = gt[i].translation() - mg;
        cov += dg * de.transpose();
        var_e += de.squaredNorm();
    }
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto sv = svd.singularValues();
    Similarity s;
    if (!(sv[1] > 1e-9 * std::max(sv[0], 1e-300))) {
        const PoseSE3 t = gt[0] * est[0].inverse();
        s.rotation = t.rotation();
        s.translation = t.translation();
        return s;
    }
    Mat3 d = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    s.rotation = svd.matrixU() * d * svd.matrixV().transpose();
    if (with_scale && var_e > 0.0) s.scale = (sv.asDiagonal() * d).trace() / var_e;
    s.translation = mg - s.scale * s.rotation * me;
    return s;
}

struct PoseError {
    double rotation_deg = 0.0;
    double translation = 0.0;
};

inline std::vector<PoseError> pose_errors(const std::vector<PoseSE3>& est, const std::vector<PoseSE3>& gt,
                                          bool with_scale = false) {
    const Similarity s = align_trajectory(est, gt, with_scale);
    std::vector<PoseError> out;
    for (std::size_t i = 0; i < est.size(); ++i) {
        const PoseSE3 a = s.apply(est[i]);
        out.push_back({rotation_distance_deg(gt[i], a), translation_distance(gt[i], a)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling

// Area-uniform random points on a mesh with their unit face normals (deterministic per seed).
inline PointCloud sample_mesh(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed) {
    if (mesh.triangles.empty()) throw InputError("sample_mesh: mesh has no triangles");
    std::vector<double> cdf(mesh.triangles.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
        const auto& t = mesh.triangles[i];
        acc += 0.5 * (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]).norm();
        cdf[i] = acc;
    }
    if (!(acc > 0.0)) throw InputError("sample_mesh: mesh has zero area");
    Rng rng(splitmix64(seed ^ 0x5a3b1eull));
    PointCloud out;
    out.points.reserve(count);
    out.normals.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        const double x = uniform01(rng) * acc;
        auto idx = std::size_t(std::upper_bound(cdf.begin(), cdf.end(), x) - cdf.begin());
        idx = std::min(idx, cdf.size() - 1);
        const auto& t = mesh.triangles[idx];
        const Vec3 &a = mesh.vertices[t[0]], &b = mesh.vertices[t[1]], &c = mesh.vertices[t[2]];
        const double r1 = std::sqrt(uniform01(rng)), r2 = uniform01(rng);
        out.points.push_back((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c);
        out.normals.push_back((b - a).cross(c - a).normalized());
    }
    return out;
}

// Uniform random points on a sphere, optionally filtered by a predicate (e.g. visibility).
inline std::vector<Vec3> sample_sphere(const Vec3& center, double radius, std::size_t count, std::uint64_t seed,
                                       const std::function<bool(const Vec3&, const Vec3&)>& keep = {}) {
    Rng rng(splitmix64(seed ^ 0x59e7eull));
    std::vector<Vec3> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        const double z = uniform(rng, -1.0, 1.0), phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const Vec3 n(r * std::cos(phi), r * std::sin(phi), z);
        const Vec3 p = center + radius * n;
        if (!keep || keep(p, n)) out.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Planar cross-sections

struct Plane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
};

struct SectionSample {
    int curve = 0;          // connected section curve of the reconstructed mesh
    double arc_length = 0;  // along that curve, from its first point
    double signed_distance = 0;  // to the reference section; positive on the outer side of the reference mesh
    Vec3 point = Vec3::Zero();
};

namespace detail {

struct SectionSegment {
    Vec3 a, b;
    std::uint64_t ka, kb;  // mesh-edge keys of the endpoints
    Vec3 face_normal;
};

inline std::vector<SectionSegment> section_segments(const TriangleMesh& mesh, const Plane& plane) {
    const Vec3 n = plane.normal.normalized();
    std::vector<double> sd(mesh.vertices.size());
    for (std::size_t i = 0; i < sd.size(); ++i) {
        sd[i] = n.dot(mesh.vertices[i] - plane.point);
        if (sd[i] == 0.0) sd[i] = 1e-300;  // treat on-plane vertices as positive
    }
    std::vector<SectionSegment> out;
    for (const auto& t : mesh.triangles) {
        std::vector<std::pair<Vec3, std::uint64_t>> cut;
        for (int e = 0; e < 3; ++e) {
            const auto i = t[e], j = t[(e + 1) % 3];
            if ((sd[i] < 0.0) == (sd[j] < 0.0)) continue;
            const double s = sd[i] / (sd[i] - sd[j]);
            const auto lo = std::min(i, j), hi = std::max(i, j);
            cut.emplace_back(mesh.vertices[i] + s * (mesh.vertices[j] - mesh.vertices[i]),
                             (std::uint64_t(lo) << 32) | hi);
        }
        if (cut.size() != 2) continue;
        const Vec3 fn = (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]);
        out.push_back({cut[0].first, cut[1].first, cut[0].second, cut[1].second, fn.normalized()});
    }
    return out;
}

inline Vec3 closest_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double l2 = ab.squaredNorm();
    const double t = l2 > 0.0 ? std::clamp((p - a).dot(ab) / l2, 0.0, 1.0) : 0.0;
    return a + t * ab;
}

}  // namespace detail

// Samples the section of `mesh` by `plane` every `spacing` units of arc length and reports
// the signed distance of each sample to the section of `reference`.
inline std::vector<SectionSample> cross_section_error(const TriangleMesh& mesh, const TriangleMesh& reference,
                                                      const Plane& plane, double spacing) {
    if (!(spacing > 0.0)) throw InputError("cross_section_error: spacing must be positive");
    const auto segs = detail::section_segments(mesh, plane);
    const auto ref = detail::section_segments(reference, plane);
    std::vector<SectionSample> out;
    if (segs.empty() || ref.empty()) return out;

    std::multimap<std::uint64_t, std::size_t> by_key;
    for (std::size_t s = 0; s < segs.size(); ++s) {
        by_key.emplace(segs[s].ka, s);
        by_key.emplace(segs[s].kb, s);
    }
    std::vector<char> used(segs.size(), 0);
    int curve = 0;
    for (std::size_t start = 0; start < segs.size(); ++start) {
        if (used[start]) continue;
        std::vector<Vec3> poly{segs[start].a, segs[start].b};
        used[start] = 1;
        std::uint64_t key = segs[start].kb;
        for (;;) {
            std::size_t next = segs.size();
            const auto range = by_key.equal_range(key);
            for (auto it = range.first; it != range.second; ++it)
                if (!used[it->second]) {
                    next = it->second;
                    break;
                }
            if (next == segs.size()) break;
            used[next] = 1;
            const bool forward = segs[next].ka == key;
            poly.push_back(forward ? segs[next].b : segs[next].a);
            key = forward ? segs[next].kb : segs[next].ka;
        }
        double arc = 0.0, next_sample = 0.0;
        for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
            const double len = (poly[i + 1] - poly[i]).norm();
            while (next_sample <= arc + len) {
                const double t = len > 0.0 ? (next_sample - arc) / len : 0.0;
                const Vec3 p = poly[i] + t * (poly[i + 1] - poly[i]);
                double best = std::numeric_limits<double>::infinity(), sign = 1.0;
                for (const auto& r : ref) {
                    const Vec3 q = detail::closest_on_segment(p, r.a, r.b);
                    const double d = (p - q).norm();
                    if (d < best) {
                        best = d;
                        sign = (p - q).dot(r.face_normal) < 0.0 ? -1.0 : 1.0;
                    }
                }
                out.push_back({curve, next_sample, sign * best, p});
                next_sample += spacing;
            }
            arc += len;
        }
        ++curve;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
    std::string name;
    FScore f;
    double tau = 0.0;
    double chamfer = 0.0;
    double ard = std::numeric_limits<double>::quiet_NaN();
    double mean_rotation_deg = std::numeric_limits<double>::quiet_NaN();
    double mean_translation = std::numeric_limits<double>::quiet_NaN();
    std::vector<PoseError> per_frame;
};

namespace io {

inline const char* kMetricCsvHeader = "name,tau,precision,recall,fscore,chamfer_l1,ard,mean_rot_err_deg,mean_trans_err";

inline void write_metric_csv(const std::string& path, const std::vector<MetricReport>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(10) << kMetricCsvHeader << "\n";
    for (const auto& r : rows)
        os << r.name << ',' << r.tau << ',' << r.f.precision << ',' << r.f.recall << ',' << r.f.fscore << ','
           << r.chamfer << ',' << r.ard << ',' << r.mean_rotation_deg << ',' << r.mean_translation << "\n";
    if (!os) throw IoError(path, "write failed");
}

inline void write_pose_error_csv(const std::string& path, const std::vector<PoseError>& errs) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(10) << "frame,rot_err_deg,trans_err\n";
    for (std::size_t i = 0; i < errs.size(); ++i)
        os << i << ',' << errs[i].rotation_deg << ',' << errs[i].translation << "\n";
    if (!os) throw IoError(path, "write failed");
}

inline void write_section_csv(const std::string& path, const std::vector<SectionSample>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(10) << "curve,arc_length,signed_distance,x,y,z\n";
    for (const auto& r : rows)
        os << r.curve << ',' << r.arc_length << ',' << r.signed_distance << ',' << r.point.x() << ','
           << r.point.y() << ',' << r.point.z() << "\n";
    if (!os) throw IoError(path, "write failed");
}

}  // namespace io

}  // namespace mvps
