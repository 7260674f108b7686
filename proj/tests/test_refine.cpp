#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "mvps/depth_prior.hpp"
#include "mvps/refine.hpp"
#include "mvps/scene_sim.hpp"

using namespace mvps;

namespace {

// Random problem on a w x h grid with an irregular mask, random confidences and targets.
RefineProblem random_problem(int w, int h, std::uint64_t seed, double mask_density = 0.85) {
    Rng rng(seed);
    RefineProblem p;
    p.prior = DepthMap(w, h);
    p.target = GradientField(w, h);
    p.confidence = Grid<double>(w, h, 0.0);
    p.mask = BitMask(w, h, 0);
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            if (uniform01(rng) > mask_density) continue;
            p.mask(u, v) = 1;
            p.prior(u, v) = 50.0 + 0.2 * u - 0.1 * v + gaussian(rng);
            p.target.gx(u, v) = 0.2 + 0.3 * gaussian(rng);
            p.target.gy(u, v) = -0.1 + 0.3 * gaussian(rng);
            p.target.valid(u, v) = uniform01(rng) < 0.9;
            p.confidence(u, v) = uniform01(rng);
        }
    p.params.tol = 1e-14;
    p.params.max_iter = 5000;
    return p;
}

// Dense oracle: build the full quadratic's Hessian H and linear term from the
// objective definition by probing it with unit vectors around the prior (where the
// objective is small, keeping the differences exact to rounding), then solve H x = -c.
Eigen::VectorXd dense_solve(const RefineProblem& p, std::vector<std::size_t>& pixels) {
    pixels.clear();
    for (std::size_t i = 0; i < p.mask.size(); ++i)
        if (p.mask[i]) pixels.push_back(i);
    const auto n = Eigen::Index(pixels.size());
    const Grid<double> base = p.prior;
    const double e0 = objective(p, base);
    Eigen::VectorXd ei(n);
    Eigen::MatrixXd hess(n, n);
    for (Eigen::Index a = 0; a < n; ++a) {
        Grid<double> d = base;
        d[pixels[a]] += 1.0;
        ei[a] = objective(p, d);
    }
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = a; b < n; ++b) {
            double hab;
            if (a == b) {
                Grid<double> d = base;
                d[pixels[a]] += 2.0;
                // E(x0 + 2e) - 2 E(x0 + e) + E(x0) = H_aa
                hab = objective(p, d) - 2.0 * ei[a] + e0;
            } else {
                Grid<double> d = base;
                d[pixels[a]] += 1.0;
                d[pixels[b]] += 1.0;
                hab = objective(p, d) - ei[a] - ei[b] + e0;
            }
            hess(a, b) = hess(b, a) = hab;
        }
    // E(x0 + e_a) = 1/2 H_aa + c_a + E(x0), with c the gradient at x0
    Eigen::VectorXd c(n), x0(n);
    for (Eigen::Index a = 0; a < n; ++a) {
        c[a] = ei[a] - e0 - 0.5 * hess(a, a);
        x0[a] = base[pixels[a]];
    }
    return x0 + hess.ldlt().solve(-c);
}

DepthMap sphere_gt(BitMask& mask, NormalField& normals, CameraIntrinsics& k, double distance = 100.0) {
    k.fx = k.fy = 128.0;
    k.cx = k.cy = 31.5;
    k.width = k.height = 64;
    const PSImageStack s =
        render_view(SceneObject::sphere(Vec3(0, 0, distance), 20.0), PoseSE3::identity(), LightRig::ring(), k);
    mask = s.mask;
    normals = *s.gt_normals;
    return *s.gt_depth;
}

double masked_rms(const Grid<double>& a, const Grid<double>& b, const BitMask& mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (mask[i]) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s / count_set(mask));
}

}  // namespace

TEST(NormalsToGradients, OrthographicExamples) {
    NormalField n(3, 1, Vec3::Zero());
    n(0, 0) = Vec3(0, 0, 1);
    n(1, 0) = Vec3(1, 0, 1).normalized();
    n(2, 0) = Vec3(std::sqrt(1 - 0.05 * 0.05), 0, 0.05);
    const GradientField g = normals_to_gradients(n, BitMask(3, 1, 1), 0.1);
    EXPECT_TRUE(g.valid(0, 0));
    EXPECT_EQ(g.gx(0, 0), 0.0);
    EXPECT_EQ(g.gy(0, 0), 0.0);
    EXPECT_TRUE(g.valid(1, 0));
    EXPECT_NEAR(g.gx(1, 0), -1.0, 1e-15);
    EXPECT_EQ(g.gy(1, 0), 0.0);
    EXPECT_FALSE(g.valid(2, 0));
    BitMask off(3, 1, 0);
    EXPECT_FALSE(normals_to_gradients(n, off).valid(0, 0));
}

TEST(NormalsToGradients, PerspectiveMatchesSphereDepthDifferences) {
    BitMask mask;
    NormalField normals;
    CameraIntrinsics k;
    const DepthMap gt = sphere_gt(mask, normals, k, 60.0);
    const GradientField g = normals_to_gradients_perspective(normals, mask, k, gt, 0.5);
    int checked = 0;
    for (int v = 0; v < 63; ++v)
        for (int u = 0; u < 63; ++u) {
            if (!g.valid(u, v) || !mask(u + 1, v) || !g.valid(u + 1, v)) continue;
            EXPECT_NEAR(g.gx(u, v), gt(u + 1, v) - gt(u, v), 2e-3);
            ++checked;
        }
    EXPECT_GT(checked, 500);
}

TEST(Objective, ZeroForConsistentInputs) {
    RefineProblem p = random_problem(9, 7, 1, 1.0);
    for (int v = 0; v < 7; ++v)
        for (int u = 0; u < 9; ++u) {
            p.target.gx(u, v) = u + 1 < 9 ? p.prior(u + 1, v) - p.prior(u, v) : 0.0;
            p.target.gy(u, v) = v + 1 < 7 ? p.prior(u, v + 1) - p.prior(u, v) : 0.0;
        }
    EXPECT_NEAR(objective(p, p.prior), 0.0, 1e-20);
    const RefineResult r = refine_depth(p);
    EXPECT_LT(masked_rms(r.depth, p.prior, p.mask), 1e-8);
}

TEST(Objective, PriorTermScalesQuadratically) {
    RefineProblem p = random_problem(6, 6, 2, 1.0);
    p.target.valid.fill(0);  // removes the gradient term entirely
    Grid<double> d1 = p.prior, d2 = p.prior;
    for (std::size_t i = 0; i < d1.size(); ++i) {
        d1[i] += 0.7;
        d2[i] += 1.4;
    }
    EXPECT_NEAR(objective(p, d2), 4.0 * objective(p, d1), 1e-9);
    // With every target invalid the effective weight is 0, so the prior term carries weight 1.
    EXPECT_NEAR(objective(p, d1), 0.5 * 36 * 0.49, 1e-9);
}

TEST(Objective, AnalyticGradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const RefineProblem p = random_problem(20, 16, 10 + seed);
        Rng rng(seed);
        Grid<double> d = p.prior;
        for (std::size_t i = 0; i < d.size(); ++i)
            if (p.mask[i]) d[i] += gaussian(rng);
        const Grid<double> g = gradient(p, d);
        std::vector<std::size_t> masked;
        for (std::size_t i = 0; i < d.size(); ++i)
            if (p.mask[i]) masked.push_back(i);
        const double h = 1e-5;
        for (int t = 0; t < 20; ++t) {
            const std::size_t i = masked[uniform_index(rng, masked.size())];
            Grid<double> dp = d, dm = d;
            dp[i] += h;
            dm[i] -= h;
            const double fd = (objective(p, dp) - objective(p, dm)) / (2 * h);
            EXPECT_LT(std::abs(fd - g[i]) / std::max(std::abs(g[i]), 1e-3), 1e-5) << "pixel " << i;
        }
        for (std::size_t i = 0; i < d.size(); ++i)
            if (!p.mask[i]) EXPECT_EQ(g[i], 0.0);
    }
}

TEST(RefineDepth, ThreePixelDenseOracle) {
    // 1D problem: pixels 0-1-2 in a row, hand-set confidences, targets and prior.
    RefineProblem p;
    p.prior = DepthMap(3, 1);
    p.prior(0, 0) = 10.0;
    p.prior(1, 0) = 10.5;
    p.prior(2, 0) = 10.2;
    p.target = GradientField(3, 1);
    p.target.gx(0, 0) = 0.8;
    p.target.gx(1, 0) = -0.1;
    p.target.valid.fill(1);
    p.confidence = Grid<double>(3, 1, 0.0);
    p.confidence(0, 0) = 0.9;
    p.confidence(1, 0) = 0.3;
    p.confidence(2, 0) = 0.6;
    p.mask = BitMask(3, 1, 1);
    p.params.tol = 1e-15;
    // Normal equations written out by hand: l0 = 0.9 on edge (0,1), l1 = 0.3 on edge (1,2),
    // prior weights (1 - l)^2 = 0.01, 0.49, 0.16.
    const double w0 = 0.81, w1 = 0.09;
    Eigen::Matrix3d a;
    a << w0 + 0.01, -w0, 0, -w0, w0 + w1 + 0.49, -w1, 0, -w1, w1 + 0.16;
    const Eigen::Vector3d b(-w0 * 0.8 + 0.01 * 10.0, w0 * 0.8 - w1 * (-0.1) + 0.49 * 10.5, w1 * (-0.1) + 0.16 * 10.2);
    const Eigen::Vector3d x = a.fullPivLu().solve(b);
    const RefineResult r = refine_depth(p);
    EXPECT_TRUE(r.converged);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.depth(i, 0), x[i], 1e-9);
}

TEST(RefineDepth, MatchesDenseSolveAndResidualIsMonotone) {
    for (auto [w, h, seed] : {std::tuple{8, 8, 1}, std::tuple{17, 11, 2}, std::tuple{32, 32, 3}}) {
        const RefineProblem p = random_problem(w, h, seed);
        std::vector<std::size_t> pixels;
        const Eigen::VectorXd x = dense_solve(p, pixels);
        const RefineResult r = refine_depth(p);
        EXPECT_TRUE(r.converged);
        double worst = 0.0;
        for (std::size_t a = 0; a < pixels.size(); ++a) worst = std::max(worst, std::abs(r.depth[pixels[a]] - x[a]));
        EXPECT_LT(worst, 1e-8) << w << "x" << h;
        for (std::size_t i = 1; i < r.residual_norms.size(); ++i)
            EXPECT_LE(r.residual_norms[i], r.residual_norms[i - 1]) << "iteration " << i;
        EXPECT_LE(r.final_objective, r.initial_objective);
        for (std::size_t i = 0; i < r.depth.size(); ++i)
            if (!p.mask[i]) EXPECT_TRUE(std::isnan(r.depth[i]));
    }
}

TEST(RefineDepth, PriorDominatedLimit) {
    RefineProblem p = random_problem(24, 24, 5);
    p.confidence.fill(0.0);  // clamps to lambda_min
    const RefineResult r = refine_depth(p);
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < p.prior.size(); ++i)
        if (p.mask[i]) {
            lo = std::min(lo, p.prior[i]);
            hi = std::max(hi, p.prior[i]);
        }
    EXPECT_LT(masked_rms(r.depth, p.prior, p.mask), 1e-3 * (hi - lo) * 10.0);
    // The fit must sit closer to the prior than at moderate confidence.
    p.confidence.fill(0.5);
    EXPECT_LT(masked_rms(r.depth, p.prior, p.mask), masked_rms(refine_depth(p).depth, p.prior, p.mask));
}

TEST(RefineDepth, ShiftEquivariance) {
    RefineProblem p = random_problem(16, 12, 6);
    const RefineResult a = refine_depth(p);
    for (auto& x : p.prior.storage())
        if (std::isfinite(x)) x += 7.25;
    const RefineResult b = refine_depth(p);
    for (std::size_t i = 0; i < p.prior.size(); ++i)
        if (p.mask[i]) EXPECT_NEAR(b.depth[i] - a.depth[i], 7.25, 1e-8);
}

TEST(RefineDepth, UnweightedEqualsUniformHalf) {
    RefineProblem p = random_problem(16, 16, 7);
    const RefineResult u = refine_depth_unweighted(p);
    p.confidence.fill(0.5);
    const RefineResult w = refine_depth(p);
    for (std::size_t i = 0; i < p.prior.size(); ++i)
        if (p.mask[i]) EXPECT_NEAR(u.depth[i], w.depth[i], 1e-9);
}

TEST(RefineDepth, IndependentOfTraversalOrder) {
    // Transposing the problem permutes the unknowns; the solution must transpose with it.
    const RefineProblem p = random_problem(13, 9, 8);
    RefineProblem t;
    t.prior = DepthMap(9, 13);
    t.target = GradientField(9, 13);
    t.confidence = Grid<double>(9, 13, 0.0);
    t.mask = BitMask(9, 13, 0);
    t.params = p.params;
    for (int v = 0; v < 9; ++v)
        for (int u = 0; u < 13; ++u) {
            t.prior(v, u) = p.prior(u, v);
            t.target.gx(v, u) = p.target.gy(u, v);
            t.target.gy(v, u) = p.target.gx(u, v);
            t.target.valid(v, u) = p.target.valid(u, v);
            t.confidence(v, u) = p.confidence(u, v);
            t.mask(v, u) = p.mask(u, v);
        }
    const RefineResult a = refine_depth(p), b = refine_depth(t);
    for (int v = 0; v < 9; ++v)
        for (int u = 0; u < 13; ++u)
            if (p.mask(u, v)) EXPECT_NEAR(a.depth(u, v), b.depth(v, u), 1e-9);
}

TEST(RefineDepth, CleanNormalsImproveBlurredSpherePrior) {
    BitMask mask;
    NormalField normals;
    CameraIntrinsics k;
    const DepthMap gt = sphere_gt(mask, normals, k);
    RefineProblem p;
    p.prior = simulate_sidp(gt, mask, 3.0, {}, {}, 0);
    p.target = normals_to_gradients_perspective(normals, mask, k, p.prior);
    p.confidence = Grid<double>(64, 64, 0.95);
    p.mask = mask;
    const RefineResult r = refine_depth(p);
    EXPECT_LT(masked_rms(r.depth, gt, mask), masked_rms(p.prior, gt, mask));
}

TEST(RefineDepth, LowConfidenceOnCorruptedNormalsHelps) {
    BitMask mask;
    NormalField normals;
    CameraIntrinsics k;
    const DepthMap gt = sphere_gt(mask, normals, k);
    Rng rng(9);
    NormalField bad = normals;
    Grid<double> conf(64, 64, 0.95);
    for (int v = 0; v < 64; ++v)
        for (int u = 0; u < 64; ++u) {
            if (!mask(u, v) || (u - 28) * (u - 28) + (v - 30) * (v - 30) > 64) continue;
            bad(u, v) = (normals(u, v) + 0.6 * Vec3(gaussian(rng), gaussian(rng), gaussian(rng))).normalized();
            if (bad(u, v).z() > 0) bad(u, v).z() *= -1.0;
            conf(u, v) = 0.05;
        }
    RefineProblem p;
    p.prior = simulate_sidp(gt, mask, 3.0, {}, {}, 0);
    p.target = normals_to_gradients_perspective(bad, mask, k, p.prior);
    p.confidence = conf;
    p.mask = mask;
    const double weighted = masked_rms(refine_depth(p).depth, gt, mask);
    const double unweighted = masked_rms(refine_depth_unweighted(p).depth, gt, mask);
    EXPECT_LT(weighted, unweighted);
}

TEST(RefineDepth, ValidationErrors) {
    RefineProblem p = random_problem(5, 5, 1);
    p.params.lambda_max = 1.0;
    EXPECT_THROW(refine_depth(p), InputError);
    p = random_problem(5, 5, 1);
    p.confidence = Grid<double>(4, 5, 0.5);
    EXPECT_THROW(refine_depth(p), InputError);
    p = random_problem(5, 5, 1, 1.0);
    p.prior(2, 2) = kInvalidDepth;
    EXPECT_THROW(refine_depth(p), DataError);
    p = random_problem(5, 5, 1, 1.0);
    p.params.max_iter = 1;
    p.params.tol = 1e-15;
    const RefineResult r = refine_depth(p);
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.iterations, 1);
    EXPECT_LE(r.final_objective, r.initial_objective);
}
