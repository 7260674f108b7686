#pragma once

// Rigid registration (trimmed point-to-plane ICP), incremental pose
// accumulation, pose-graph refinement with loop closures, and the pose
// trajectory text format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/kdtree.hpp"

namespace mvps {

struct RegistrationParams {
    int max_iter = 50;
    double trim_fraction = 0.3;             // worst residuals dropped per iteration
    double min_pose_change = 1e-6;          // radians, and scene units relative to the cloud radius
    std::size_t min_correspondences = 100;
    double max_distance = std::numeric_limits<double>::infinity();  // correspondence gate
    double eigen_cutoff = 1e-5;             // relative eigenvalue below which a direction is not updated
};

struct RegistrationResult {
    PoseSE3 pose;  // live -> model frame
    double inlier_fraction = 0.0;
    double rms_residual = 0.0;
    bool converged = false;
    int iterations = 0;
    int rank = 0;                 // directions updated in the last iteration
    double min_eigen_ratio = 0.0;  // smallest / largest eigenvalue of the last normal equations
};

namespace detail {

struct Match {
    std::uint32_t live;
    std::uint32_t model;
    double residual;
};

inline std::vector<Match> trimmed_matches(const std::vector<Vec3>& moved, const PointCloud& model, const KdTree3& tree,
                                          const RegistrationParams& prm) {
    std::vector<Match> m;
    m.reserve(moved.size());
    const double gate2 = prm.max_distance * prm.max_distance;
    for (std::uint32_t i = 0; i < moved.size(); ++i) {
        const auto hit = tree.nearest(moved[i]);
        if (hit.sq_dist > gate2) continue;
        m.push_back({i, hit.index, model.normals[hit.index].dot(moved[i] - model.points[hit.index])});
    }
    std::stable_sort(m.begin(), m.end(),
                     [](const Match& a, const Match& b) { return std::abs(a.residual) < std::abs(b.residual); });
    m.resize(m.size() - std::size_t(std::floor(prm.trim_fraction * double(m.size()))));
    return m;
}

}  // namespace detail

// Registers `live` onto `model` (which must carry normals). The 6x6 normal equations are built
// about the centroid of the matched points and scaled by their RMS radius; directions whose
// eigenvalue falls below eigen_cutoff * max are left at the current estimate.
inline RegistrationResult register_cloud(const PointCloud& live, const PointCloud& model, const PoseSE3& init,
                                         const RegistrationParams& prm = {}) {
    if (live.empty() || model.empty()) throw InputError("register: empty point cloud");
    if (model.normals.size() != model.points.size()) throw InputError("register: model cloud needs normals");
    if (!(prm.trim_fraction >= 0.0 && prm.trim_fraction < 1.0) || prm.max_iter < 1)
        throw InputError("register: bad parameters");
    const KdTree3 tree(model.points);

    RegistrationResult res;
    Mat3 rot = init.rotation();
    Vec3 trans = init.translation();
    std::vector<Vec3> moved(live.points.size());
    auto move_all = [&] {
        for (std::size_t i = 0; i < moved.size(); ++i) moved[i] = rot * live.points[i] + trans;
    };

    double radius = 1.0;
    for (res.iterations = 0; res.iterations < prm.max_iter;) {
        move_all();
        const auto m = detail::trimmed_matches(moved, model, tree, prm);
        if (m.size() < prm.min_correspondences)
            throw InsufficientOverlapError("register: only " + std::to_string(m.size()) + " correspondences");
        Vec3 c = Vec3::Zero();
        for (const auto& x : m) c += moved[x.live];
        c /= double(m.size());
        double r2 = 0.0;
        for (const auto& x : m) r2 += (moved[x.live] - c).squaredNorm();
        radius = std::max(std::sqrt(r2 / double(m.size())), 1e-12);

        Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> jtr = Eigen::Matrix<double, 6, 1>::Zero();
        for (const auto& x : m) {
            const Vec3& n = model.normals[x.model];
            Eigen::Matrix<double, 6, 1> j;
            j.head<3>() = (moved[x.live] - c).cross(n) / radius;
            j.tail<3>() = n;
            jtj.noalias() += j * j.transpose();
            jtr += j * x.residual;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(jtj);
        const auto& ev = es.eigenvalues();
        const double cutoff = prm.eigen_cutoff * ev.maxCoeff();
        res.min_eigen_ratio = ev.maxCoeff() > 0.0 ? std::max(ev.minCoeff(), 0.0) / ev.maxCoeff() : 0.0;
        res.rank = 0;
        Eigen::Matrix<double, 6, 1> xi = Eigen::Matrix<double, 6, 1>::Zero();
        for (int k = 0; k < 6; ++k)
            if (ev[k] > cutoff && ev[k] > 0.0) {
                ++res.rank;
                xi -= es.eigenvectors().col(k) * (es.eigenvectors().col(k).dot(jtr) / ev[k]);
            }
        const Vec3 omega = xi.head<3>() / radius;
        const Mat3 dr = exp_so3(omega);
        const Vec3 dt = c - dr * c + xi.tail<3>();
        rot = dr * rot;
        trans = dr * trans + dt;
        ++res.iterations;
        if (omega.norm() < prm.min_pose_change && xi.tail<3>().norm() < prm.min_pose_change * radius) {
            res.converged = true;
            break;
        }
    }
    const PoseSE3 pose = PoseSE3::orthonormalized(rot, trans);
    rot = pose.rotation();
    trans = pose.translation();
    move_all();
    const auto m = detail::trimmed_matches(moved, model, tree, prm);
    if (m.size() < prm.min_correspondences)
        throw InsufficientOverlapError("register: only " + std::to_string(m.size()) + " correspondences");
    double ss = 0.0;
    for (const auto& x : m) ss += x.residual * x.residual;
    res.rms_residual = std::sqrt(ss / double(m.size()));
    const double inlier_gate = std::max(3.0 * res.rms_residual, 1e-9 * radius);
    std::size_t inliers = 0;
    for (std::size_t i = 0; i < moved.size(); ++i) {
        const auto hit = tree.nearest(moved[i]);
        if (std::abs(model.normals[hit.index].dot(moved[i] - model.points[hit.index])) <= inlier_gate &&
            hit.sq_dist <= prm.max_distance * prm.max_distance)
            ++inliers;
    }
    res.inlier_fraction = double(inliers) / double(moved.size());
    res.pose = pose;
    return res;
}

// P_ref^t = P_ref^{t-1} composed with the live-to-previous delta.
inline PoseSE3 accumulate(const PoseSE3& prev_ref_pose, const PoseSE3& delta) { return compose(prev_ref_pose, delta); }

// ---------------------------------------------------------------------------
// Pose graph

struct PoseEdge {
    int i = 0;
    int j = 0;
    PoseSE3 relative;  // pose of node j expressed in node i: T_j = T_i * relative
    double weight = 1.0;
};

struct PoseGraph {
    std::vector<PoseSE3> nodes;
    std::vector<PoseEdge> edges;

    void validate() const {
        for (const auto& e : edges) {
            if (e.i < 0 || e.j < 0 || e.i >= int(nodes.size()) || e.j >= int(nodes.size()) || e.i == e.j)
                throw InputError("PoseGraph: edge endpoint out of range");
            if (!(e.weight > 0.0)) throw InputError("PoseGraph: edge weights must be positive");
        }
    }

    bool connected() const {
        if (nodes.empty()) return true;
        std::vector<int> parent(nodes.size());
        std::iota(parent.begin(), parent.end(), 0);
        auto find = [&](int x) {
            while (parent[x] != x) x = parent[x] = parent[parent[x]];
            return x;
        };
        for (const auto& e : edges) parent[find(e.i)] = find(e.j);
        for (std::size_t k = 0; k < nodes.size(); ++k)
            if (find(int(k)) != find(0)) return false;
        return true;
    }
};

struct PoseGraphParams {
    int max_iter = 100;
    double translation_scale = 0.0;  // 0: mean edge translation length
};

struct PoseGraphResult {
    std::vector<PoseSE3> poses;
    std::vector<double> costs;  // total weighted residual after each accepted step, starting with the initial one
};

namespace detail {

using Vec6 = Eigen::Matrix<double, 6, 1>;

// Edge error (log R_err, t_err / scale) with T_err = relative^-1 * T_i^-1 * T_j.
inline Vec6 edge_error(const PoseSE3& ti, const PoseSE3& tj, const PoseEdge& e, double scale) {
    const PoseSE3 err = e.relative.inverse() * ti.inverse() * tj;
    Vec6 r;
    r.head<3>() = log_so3(err.rotation());
    r.tail<3>() = err.translation() / scale;
    return r;
}

inline double graph_cost(const std::vector<PoseSE3>& x, const std::vector<PoseEdge>& edges, double scale) {
    double c = 0.0;
    for (const auto& e : edges) c += e.weight * edge_error(x[e.i], x[e.j], e, scale).squaredNorm();
    return c;
}

// Left perturbation: R <- exp(w) R, t <- t + s * v.
inline PoseSE3 perturb(const PoseSE3& p, const Vec6& d, double scale) {
    return PoseSE3::orthonormalized(exp_so3(d.head<3>()) * p.rotation(), p.translation() + scale * d.tail<3>());
}

}  // namespace detail

// Levenberg-Marquardt over the free nodes (all but fixed_node) with central-difference
// numeric edge Jacobians. Only cost-reducing steps are accepted.
inline PoseGraphResult refine_pose_graph(const PoseGraph& graph, int fixed_node, const PoseGraphParams& prm = {}) {
    graph.validate();
    const int n = int(graph.nodes.size());
    if (fixed_node < 0 || fixed_node >= n) throw InputError("refine_pose_graph: fixed node out of range");
    if (!graph.connected()) throw InputError("refine_pose_graph: graph is disconnected");
    PoseGraphResult out;
    out.poses = graph.nodes;
    double scale = prm.translation_scale;
    if (!(scale > 0.0)) {
        double s = 0.0;
        for (const auto& e : graph.edges) s += e.relative.translation().norm();
        scale = graph.edges.empty() ? 1.0 : s / double(graph.edges.size());
        if (!(scale > 0.0)) scale = 1.0;
    }
    double cost = detail::graph_cost(out.poses, graph.edges, scale);
    out.costs.push_back(cost);
    if (n <= 1 || graph.edges.empty()) return out;

    auto column = [&](int node) { return node < fixed_node ? node : node - 1; };
    const int dim = 6 * (n - 1);
    double mu = 1e-6;
    const double h = 1e-7;
    for (int it = 0; it < prm.max_iter; ++it) {
        Eigen::MatrixXd jtj = Eigen::MatrixXd::Zero(dim, dim);
        Eigen::VectorXd jtr = Eigen::VectorXd::Zero(dim);
        for (const auto& e : graph.edges) {
            const detail::Vec6 r0 = detail::edge_error(out.poses[e.i], out.poses[e.j], e, scale);
            Eigen::Matrix<double, 6, 12> j = Eigen::Matrix<double, 6, 12>::Zero();
            for (int side = 0; side < 2; ++side) {
                const int node = side == 0 ? e.i : e.j;
                if (node == fixed_node) continue;
                for (int k = 0; k < 6; ++k) {
                    detail::Vec6 d = detail::Vec6::Zero();
                    d[k] = h;
                    const PoseSE3 pp = detail::perturb(out.poses[node], d, scale);
                    d[k] = -h;
                    const PoseSE3 pm = detail::perturb(out.poses[node], d, scale);
                    const detail::Vec6 rp = side == 0 ? detail::edge_error(pp, out.poses[e.j], e, scale)
                                                      : detail::edge_error(out.poses[e.i], pp, e, scale);
                    const detail::Vec6 rm = side == 0 ? detail::edge_error(pm, out.poses[e.j], e, scale)
                                                      : detail::edge_error(out.poses[e.i], pm, e, scale);
                    j.col(6 * side + k) = (rp - rm) / (2.0 * h);
                }
            }
            for (int a = 0; a < 2; ++a) {
                const int na = a == 0 ? e.i : e.j;
                if (na == fixed_node) continue;
                const auto ja = j.middleCols<6>(6 * a);
                jtr.segment<6>(6 * column(na)) += e.weight * ja.transpose() * r0;
                for (int b = 0; b < 2; ++b) {
                    const int nb = b == 0 ? e.i : e.j;
                    if (nb == fixed_node) continue;
                    jtj.block<6, 6>(6 * column(na), 6 * column(nb)) += e.weight * ja.transpose() * j.middleCols<6>(6 * b);
                }
            }
        }
        if (it == 0) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jtj, Eigen::EigenvaluesOnly);
            const auto& ev = es.eigenvalues();
            if (!(ev.minCoeff() > 1e-12 * std::max(1.0, ev.maxCoeff())))
                throw GaugeError("refine_pose_graph: singular normal equations");
        }
        if (jtr.norm() < 1e-14) break;
        bool accepted = false;
        for (int tries = 0; tries < 20 && !accepted; ++tries) {
            Eigen::MatrixXd damped = jtj;
            damped.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
            const Eigen::VectorXd step = -damped.ldlt().solve(jtr);
            std::vector<PoseSE3> trial = out.poses;
            for (int node = 0; node < n; ++node)
                if (node != fixed_node)
                    trial[node] = detail::perturb(out.poses[node], step.segment<6>(6 * column(node)), scale);
            const double c = detail::graph_cost(trial, graph.edges, scale);
            if (c < cost) {
                out.poses = std::move(trial);
                const double gain = cost - c;
                cost = c;
                out.costs.push_back(cost);
                mu = std::max(mu / 10.0, 1e-12);
                accepted = true;
                if (gain <= 1e-15 * std::max(1.0, cost) || cost < 1e-24) it = prm.max_iter;
            } else {
                mu *= 10.0;
            }
        }
        if (!accepted) break;
    }
    out.poses[fixed_node] = graph.nodes[fixed_node];
    return out;
}

// ---------------------------------------------------------------------------
// Pose trajectory text: one line per pose, 12 numbers row-major [R | t].

namespace io {

inline void write_poses(const std::string& path, const std::vector<PoseSE3>& poses) {
    std::ofstream os(path);
    if (!os) throw IoError(path, "cannot open for writing");
    os << std::setprecision(17);
    for (const auto& p : poses) {
        const auto m = p.matrix3x4();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) os << m(r, c) << ((r == 2 && c == 3) ? '\n' : ' ');
    }
    if (!os) throw IoError(path, "write failed");
}

inline std::vector<PoseSE3> read_poses(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path, "cannot open for reading");
    std::vector<PoseSE3> poses;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[line.find_first_not_of(" \t")] == '#')
            continue;
        std::istringstream ls(line);
        Eigen::Matrix<double, 3, 4> m;
        for (int k = 0; k < 12; ++k)
            if (!(ls >> m(k / 4, k % 4))) throw ParseError(path, lineno, "expected 12 numbers");
        std::string extra;
        if (ls >> extra) throw ParseError(path, lineno, "trailing content '" + extra + "'");
        const Mat3 r = m.leftCols<3>();
        if (!m.allFinite() || (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
            r.determinant() < 0.0)
            throw ParseError(path, lineno, "rotation block is not a rotation");
        const bool exact = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9 &&
                           std::abs(r.determinant() - 1.0) <= 1e-9;
        poses.push_back(exact ? PoseSE3(r, m.col(3)) : PoseSE3::orthonormalized(r, m.col(3)));
    }
    return poses;
}

}  // namespace io

}  // namespace mvps
