#pragma once

// Per-view surface normals and per-pixel confidence from a photometric-stereo
// image stack: Lambertian least squares over the active LEDs, and an ensemble
// over random LED subsets whose angular spread drives the confidence.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mvps/error.hpp"
#include "mvps/geometry.hpp"
#include "mvps/grid.hpp"
#include "mvps/random.hpp"
#include "mvps/scene_sim.hpp"

namespace mvps {

using NormalMap = NormalField;      // unit normals on solved pixels, zero elsewhere
using ConfidenceMap = Grid<double>;  // in [0, 1], exactly 0 outside the mask
using AlbedoMap = Grid<double>;

struct LsOptions {
    double shadow_threshold = 0.0;  // observations <= threshold are treated as attached shadow
    bool trim_extremes = true;      // drop lowest/highest when >= 5 observations remain
    double max_condition = 1e8;     // per-pixel light-matrix conditioning limit
};

struct LsResult {
    NormalMap normals;
    AlbedoMap albedo;
    BitMask solved;
};

namespace detail {

struct Observation {
    double intensity;
    Vec3 light;  // e_k * l_k
};

inline double light_condition(const Eigen::Matrix3d& gram) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es;
    es.computeDirect(gram, Eigen::EigenvaluesOnly);
    const auto ev = es.eigenvalues();
    if (!(ev(0) > 0.0)) return std::numeric_limits<double>::infinity();
    return std::sqrt(ev(2) / ev(0));
}

// Scaled normal b = rho * n minimising sum (I_k - b . L_k)^2.
inline std::optional<Vec3> solve_pixel(std::vector<Observation>& obs, const LsOptions& opt) {
    std::erase_if(obs, [&](const Observation& o) { return !(o.intensity > opt.shadow_threshold); });
    if (opt.trim_extremes && obs.size() >= 5) {
        const auto [lo, hi] = std::minmax_element(obs.begin(), obs.end(), [](const auto& a, const auto& b) {
            return a.intensity < b.intensity;
        });
        const auto ilo = lo - obs.begin(), ihi = hi - obs.begin();
        obs.erase(obs.begin() + std::max(ilo, ihi));
        obs.erase(obs.begin() + std::min(ilo, ihi));
    }
    if (obs.size() < 3) return std::nullopt;
    Eigen::Matrix3d gram = Eigen::Matrix3d::Zero();
    Vec3 rhs = Vec3::Zero();
    for (const auto& o : obs) {
        gram.noalias() += o.light * o.light.transpose();
        rhs += o.intensity * o.light;
    }
    if (light_condition(gram) > opt.max_condition) return std::nullopt;
    const Vec3 b = gram.ldlt().solve(rhs);
    if (!b.allFinite() || !(b.norm() > 0.0)) return std::nullopt;
    return b;
}

inline void check_rig(const PSImageStack& stack, const LightRig& rig) {
    if (stack.images.empty()) throw InputError("photometric: empty image stack");
    if (stack.images.size() < 3) throw DegenerateRigError("photometric: fewer than 3 lights");
    for (int id : stack.light_ids)
        if (id < 0 || id >= int(rig.size())) throw InputError("photometric: image refers to an unknown LED");
    Eigen::Matrix3d gram = Eigen::Matrix3d::Zero();
    for (int id : stack.light_ids) {
        const Vec3 l = rig.intensities[id] * rig.directions[id];
        gram += l * l.transpose();
    }
    if (light_condition(gram) > 1e8) throw DegenerateRigError("photometric: light directions are coplanar");
}

}  // namespace detail

// Classical Lambertian photometric stereo, I_k = e_k * rho * (n . l_k), solved per pixel.
inline LsResult solve_normals_ls(const PSImageStack& stack, const LightRig& rig, const LsOptions& opt = {}) {
    detail::check_rig(stack, rig);
    const int w = stack.width(), h = stack.height();
    LsResult res{NormalMap(w, h, Vec3::Zero()), AlbedoMap(w, h, 0.0), BitMask(w, h, 0)};
    std::vector<Vec3> lights;
    for (int id : stack.light_ids) lights.push_back(rig.intensities[id] * rig.directions[id]);
    std::vector<detail::Observation> obs;
    for (std::size_t i = 0; i < stack.mask.size(); ++i) {
        if (!stack.mask[i]) continue;
        obs.clear();
        for (std::size_t k = 0; k < lights.size(); ++k) obs.push_back({stack.images[k][i], lights[k]});
        const auto b = detail::solve_pixel(obs, opt);
        if (!b) continue;
        const double rho = b->norm();
        res.normals[i] = *b / rho;
        res.albedo[i] = rho;
        res.solved[i] = 1;
    }
    return res;
}

struct EnsembleSpec {
    int count = 16;
    int subset_size = 5;
    double sigma0 = 0.05;  // radians
    double lambda_min = 0.05;
    double lambda_max = 0.95;
    std::uint64_t seed = 0;
    LsOptions ls;
};

// Distinct random subsets (sorted index lists into [0, n)) when enough exist;
// otherwise every combination, cycled.
inline std::vector<std::vector<int>> draw_light_subsets(int n, int size, int count, std::uint64_t seed) {
    if (size > n) throw InputError("draw_light_subsets: subset size exceeds available lights");
    std::vector<std::vector<int>> all;
    for (unsigned mask = 0; mask < (1u << n); ++mask) {
        if (std::popcount(mask) != size) continue;
        std::vector<int> s;
        for (int i = 0; i < n; ++i)
            if (mask & (1u << i)) s.push_back(i);
        all.push_back(std::move(s));
    }
    std::vector<std::vector<int>> out;
    if (int(all.size()) <= count) {
        for (int i = 0; i < count; ++i) out.push_back(all[i % all.size()]);
        return out;
    }
    Rng rng(splitmix64(seed ^ 0x5b5e7ull));
    for (int i = 0; i < count; ++i) {  // partial Fisher-Yates
        const auto j = i + uniform_index(rng, all.size() - i);
        std::swap(all[i], all[j]);
        out.push_back(all[i]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct UncertaintyResult {
    NormalMap normals;
    ConfidenceMap confidence;
    Grid<double> variance;  // mean squared angular deviation, rad^2 (0 where unsolved)
};

// Subset-ensemble normals and confidence. Per pixel the normal is the normalised
// mean of the subset solutions and confidence = clamp(exp(-var / sigma0^2)).
inline UncertaintyResult estimate_uncertainty(const PSImageStack& stack, const LightRig& rig,
                                              const EnsembleSpec& spec = {}) {
    if (spec.count < 2 || spec.subset_size < 3) throw InputError("estimate_uncertainty: bad ensemble spec");
    if (spec.subset_size > int(stack.images.size()))
        throw InputError("estimate_uncertainty: subset size exceeds active lights");
    if (!(spec.lambda_min >= 0.0 && spec.lambda_min <= spec.lambda_max && spec.lambda_max <= 1.0))
        throw InputError("estimate_uncertainty: confidence clamp out of range");
    detail::check_rig(stack, rig);

    const int w = stack.width(), h = stack.height();
    UncertaintyResult res{NormalMap(w, h, Vec3::Zero()), ConfidenceMap(w, h, 0.0), Grid<double>(w, h, 0.0)};
    const auto subsets = draw_light_subsets(int(stack.images.size()), spec.subset_size, spec.count, spec.seed);
    std::vector<Vec3> lights;
    for (int id : stack.light_ids) lights.push_back(rig.intensities[id] * rig.directions[id]);

    std::vector<detail::Observation> obs;
    std::vector<Vec3> sols;
    for (std::size_t i = 0; i < stack.mask.size(); ++i) {
        if (!stack.mask[i]) continue;
        sols.clear();
        for (const auto& subset : subsets) {
            obs.clear();
            for (int k : subset) obs.push_back({stack.images[k][i], lights[k]});
            if (auto b = detail::solve_pixel(obs, spec.ls)) sols.push_back(b->normalized());
        }
        if (sols.empty()) continue;
        Vec3 mean = Vec3::Zero();
        for (const auto& n : sols) mean += n;
        if (!(mean.norm() > 1e-12)) continue;
        mean.normalize();
        double var = 0.0;
        for (const auto& n : sols) {
            const double ang = std::atan2(n.cross(mean).norm(), n.dot(mean));
            var += ang * ang;
        }
        var /= double(sols.size());
        res.normals[i] = mean;
        res.variance[i] = var;
        res.confidence[i] = sols.size() < 2 ? spec.lambda_min
                                            : std::clamp(std::exp(-var / (spec.sigma0 * spec.sigma0)),
                                                         spec.lambda_min, spec.lambda_max);
    }
    return res;
}

}  // namespace mvps
