#pragma once

// Confidence-weighted fusion of a normal field and a depth prior:
//
//   E(D) = 1/2 || L (.) (grad D - g) ||^2 + 1/2 || (1 - L) (.) (D - D_pd) ||^2
//
// with forward differences, one confidence per pixel applied to both gradient
// components, and gradient rows dropped wherever the forward neighbour leaves
// the mask. The quadratic is solved by a Jacobi-scaled conjugate residual
// iteration on its normal equations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Sparse>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"

namespace mvps {

// Target forward differences in depth units per pixel.
struct GradientField {
    Grid<double> gx;
    Grid<double> gy;
    BitMask valid;

    GradientField() = default;
    GradientField(int w, int h) : gx(w, h, 0.0), gy(w, h, 0.0), valid(w, h, 0) {}
    int width() const { return gx.width(); }
    int height() const { return gx.height(); }
};

// Orthographic conversion g = (-n_x / n_z, -n_y / n_z); |n_z| < eps_z is invalid.
inline GradientField normals_to_gradients(const NormalField& n, const BitMask& mask, double eps_z = 0.1) {
    if (!n.same_shape(mask)) throw InputError("normals_to_gradients: shape mismatch");
    GradientField g(n.width(), n.height());
    for (std::size_t i = 0; i < n.size(); ++i) {
        if (!mask[i]) continue;
        const Vec3& m = n[i];
        if (!m.allFinite() || !(std::abs(m.z()) >= eps_z)) continue;
        g.gx[i] = -m.x() / m.z();
        g.gy[i] = -m.y() / m.z();
        g.valid[i] = 1;
    }
    return g;
}

// Perspective conversion for a pinhole camera. With X(u, v) = D(u, v) * r(u, v) and
// r = ((u - cx) / fx, (v - cy) / fy, 1), the tangency n . dX = 0 gives
//   dD/du = -D n_x / (fx (n . r)),   dD/dv = -D n_y / (fy (n . r)).
// `depth` supplies D. A pixel is valid when |n . r| / |r| >= eps. The returned
// field holds targets for the forward edge (p, p + 1): the mean of both end-point
// derivatives when both are valid, else the derivative at p.
inline GradientField normals_to_gradients_perspective(const NormalField& n, const BitMask& mask,
                                                      const CameraIntrinsics& k, const DepthMap& depth,
                                                      double eps = 0.3) {
    if (!n.same_shape(mask) || !depth.same_shape(mask) || !mask.same_shape(k.width, k.height))
        throw InputError("normals_to_gradients_perspective: shape mismatch");
    const int w = n.width(), h = n.height();
    GradientField point(w, h);
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            const std::size_t i = point.gx.index(u, v);
            if (!mask[i] || !depth.valid(u, v)) continue;
            const Vec3& m = n[i];
            if (!m.allFinite() || m.squaredNorm() == 0.0) continue;
            const Vec3 r = k.ray(u, v);
            const double nr = m.dot(r);
            if (!(std::abs(nr) >= eps * r.norm())) continue;
            point.gx[i] = -depth[i] * m.x() / (k.fx * nr);
            point.gy[i] = -depth[i] * m.y() / (k.fy * nr);
            point.valid[i] = 1;
        }
    GradientField g = point;
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            const std::size_t i = g.gx.index(u, v);
            if (!point.valid[i]) continue;
            if (u + 1 < w && point.valid(u + 1, v)) g.gx[i] = 0.5 * (point.gx[i] + point.gx(u + 1, v));
            if (v + 1 < h && point.valid(u, v + 1)) g.gy[i] = 0.5 * (point.gy[i] + point.gy(u, v + 1));
        }
    return g;
}

struct RefineParams {
    int max_iter = 0;  // 0 selects 10 * sqrt(masked pixel count)
    double tol = 1e-8;  // relative to the initial residual norm
    double lambda_min = 0.05;
    double lambda_max = 0.95;
};

struct RefineProblem {
    DepthMap prior;
    GradientField target;
    Grid<double> confidence;
    BitMask mask;
    RefineParams params;
    std::optional<DepthMap> init;  // defaults to the prior

    void validate() const {
        const int w = prior.width(), h = prior.height();
        if (!target.gx.same_shape(w, h) || !target.gy.same_shape(w, h) || !target.valid.same_shape(w, h) ||
            !confidence.same_shape(w, h) || !mask.same_shape(w, h))
            throw InputError("RefineProblem: maps do not share dimensions");
        if (init && !init->same_shape(w, h)) throw InputError("RefineProblem: init has wrong dimensions");
        if (!(params.lambda_min > 0.0 && params.lambda_min <= params.lambda_max && params.lambda_max < 1.0))
            throw InputError("RefineProblem: confidence clamp must lie inside (0, 1)");
        if (!(params.tol > 0.0) || params.max_iter < 0) throw InputError("RefineProblem: bad solver parameters");
        for (std::size_t i = 0; i < prior.size(); ++i) {
            if (!mask[i]) continue;
            if (!std::isfinite(prior[i])) throw DataError("RefineProblem: prior not finite under mask");
            if (target.valid[i] && (!std::isfinite(target.gx[i]) || !std::isfinite(target.gy[i])))
                throw DataError("RefineProblem: target gradient not finite");
        }
    }
};

struct RefineResult {
    DepthMap depth;
    bool converged = false;
    int iterations = 0;
    std::vector<double> residual_norms;  // scaled-system residual per iteration, starting with the initial one
    double initial_objective = 0.0;
    double final_objective = 0.0;
};

namespace detail {

// Effective per-pixel weight: clamped confidence on masked pixels with a valid target, 0 otherwise.
inline double effective_lambda(const RefineProblem& p, std::size_t i) {
    if (!p.mask[i] || !p.target.valid[i]) return 0.0;
    return std::clamp(p.confidence[i], p.params.lambda_min, p.params.lambda_max);
}

// A forward-difference row exists only between two masked pixels that both carry a valid target.
inline bool linked(const RefineProblem& p, int u, int v) { return p.mask(u, v) && p.target.valid(u, v); }

template <typename F>
void for_each_edge(const RefineProblem& p, F&& f) {
    const int w = p.prior.width(), h = p.prior.height();
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            const std::size_t i = p.prior.index(u, v);
            if (!p.mask[i]) continue;
            const double lam = effective_lambda(p, i);
            if (lam == 0.0) continue;
            if (u + 1 < w && linked(p, u + 1, v)) f(i, p.prior.index(u + 1, v), lam, p.target.gx[i]);
            if (v + 1 < h && linked(p, u, v + 1)) f(i, p.prior.index(u, v + 1), lam, p.target.gy[i]);
        }
}

}  // namespace detail

inline double objective(const RefineProblem& p, const Grid<double>& d) {
    double e = 0.0;
    detail::for_each_edge(p, [&](std::size_t i, std::size_t j, double lam, double g) {
        const double r = lam * (d[j] - d[i] - g);
        e += r * r;
    });
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!p.mask[i]) continue;
        const double r = (1.0 - detail::effective_lambda(p, i)) * (d[i] - p.prior[i]);
        e += r * r;
    }
    return 0.5 * e;
}

// dE/dD per pixel; zero off the mask.
inline Grid<double> gradient(const RefineProblem& p, const Grid<double>& d) {
    Grid<double> out(d.width(), d.height(), 0.0);
    detail::for_each_edge(p, [&](std::size_t i, std::size_t j, double lam, double g) {
        const double r = lam * lam * (d[j] - d[i] - g);
        out[j] += r;
        out[i] -= r;
    });
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!p.mask[i]) continue;
        const double c = 1.0 - detail::effective_lambda(p, i);
        out[i] += c * c * (d[i] - p.prior[i]);
    }
    return out;
}

// Normal equations A x = b over masked pixels in row-major order; `index` maps pixel -> unknown.
struct RefineSystem {
    Eigen::SparseMatrix<double, Eigen::RowMajor> a;
    Eigen::VectorXd b;
    std::vector<std::int64_t> index;
    std::vector<std::size_t> pixel;
};

inline RefineSystem assemble_system(const RefineProblem& p) {
    RefineSystem s;
    s.index.assign(p.prior.size(), -1);
    for (std::size_t i = 0; i < p.prior.size(); ++i)
        if (p.mask[i]) {
            s.index[i] = std::int64_t(s.pixel.size());
            s.pixel.push_back(i);
        }
    const auto n = Eigen::Index(s.pixel.size());
    std::vector<Eigen::Triplet<double>> trips;
    s.b = Eigen::VectorXd::Zero(n);
    detail::for_each_edge(p, [&](std::size_t i, std::size_t j, double lam, double g) {
        const auto a = s.index[i], c = s.index[j];
        const double w = lam * lam;
        trips.emplace_back(a, a, w);
        trips.emplace_back(c, c, w);
        trips.emplace_back(a, c, -w);
        trips.emplace_back(c, a, -w);
        s.b[a] -= w * g;
        s.b[c] += w * g;
    });
    for (Eigen::Index r = 0; r < n; ++r) {
        const std::size_t i = s.pixel[r];
        const double c = 1.0 - detail::effective_lambda(p, i);
        trips.emplace_back(r, r, c * c);
        s.b[r] += c * c * p.prior[i];
    }
    s.a.resize(n, n);
    s.a.setFromTriplets(trips.begin(), trips.end());
    s.a.makeCompressed();
    return s;
}

// Conjugate residual on the symmetrically Jacobi-scaled system S A S y = S b, x = S y.
// Each step minimises the scaled residual over a growing Krylov space, so its norm never increases.
inline RefineResult refine_depth(const RefineProblem& p) {
    p.validate();
    const RefineSystem sys = assemble_system(p);
    const auto n = sys.b.size();
    RefineResult res;
    res.depth = DepthMap(p.prior.width(), p.prior.height(), DepthRole::refined);
    const Grid<double>& start = p.init ? static_cast<const Grid<double>&>(*p.init) : p.prior;
    if (n == 0) {
        res.converged = true;
        return res;
    }
    for (Eigen::Index r = 0; r < n; ++r)
        if (!std::isfinite(start[sys.pixel[r]])) throw DataError("refine_depth: initial depth not finite under mask");

    Eigen::VectorXd scale(n);
    for (Eigen::Index r = 0; r < n; ++r) scale[r] = 1.0 / std::sqrt(sys.a.coeff(r, r));
    const Eigen::SparseMatrix<double, Eigen::RowMajor> as = scale.asDiagonal() * sys.a * scale.asDiagonal();
    const Eigen::VectorXd bs = scale.cwiseProduct(sys.b);

    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) y[r] = start[sys.pixel[r]] / scale[r];
    Eigen::VectorXd r = bs - as * y;
    Eigen::VectorXd q = r;
    Eigen::VectorXd ar = as * r;
    Eigen::VectorXd aq = ar;
    double rar = r.dot(ar);

    const int max_iter = p.params.max_iter > 0 ? p.params.max_iter
                                               : std::max(1, int(std::ceil(10.0 * std::sqrt(double(n)))));
    const double r0 = r.norm();
    res.residual_norms.push_back(r0);
    const double target = p.params.tol * r0;
    res.converged = r0 == 0.0;
    while (!res.converged && res.iterations < max_iter) {
        const double aqaq = aq.squaredNorm();
        if (!(aqaq > 0.0)) break;
        const double alpha = rar / aqaq;
        y += alpha * q;
        r -= alpha * aq;
        ++res.iterations;
        const double rn = r.norm();
        res.residual_norms.push_back(rn);
        if (rn <= target) {
            res.converged = true;
            break;
        }
        ar = as * r;
        const double rar_new = r.dot(ar);
        const double beta = rar_new / rar;
        rar = rar_new;
        q = r + beta * q;
        aq = ar + beta * aq;
    }
    for (Eigen::Index k = 0; k < n; ++k) res.depth[sys.pixel[k]] = scale[k] * y[k];
    res.initial_objective = objective(p, start);
    res.final_objective = objective(p, res.depth);
    return res;
}

// Unit-weighted variant: every valid-gradient pixel uses confidence 1/2.
inline RefineResult refine_depth_unweighted(RefineProblem p) {
    p.confidence = Grid<double>(p.prior.width(), p.prior.height(), 0.5);
    p.params.lambda_min = std::min(p.params.lambda_min, 0.5);
    p.params.lambda_max = std::max(p.params.lambda_max, 0.5);
    return refine_depth(p);
}

}  // namespace mvps
