#pragma once

// Simulated single-image depth prediction: globally right, locally smooth,
// affinely ambiguous depth maps, plus metric alignment helpers.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mvps/error.hpp"
#include "mvps/grid.hpp"
#include "mvps/random.hpp"

namespace mvps {

struct AffineDepth {
    double scale = 1.0;
    double shift = 0.0;
};

// Sum of `modes` random low-frequency cosines; peak amplitude <= `amplitude`.
struct SmoothNoiseSpec {
    double amplitude = 0.0;  // scene units
    int modes = 3;
    double min_wavelength_frac = 0.5;  // of the larger image side
    double max_wavelength_frac = 2.0;
};

// Gaussian blur normalised over the masked support (num = G*(v m), den = G*m).
// Kernel truncated at 4 sigma; sigma == 0 returns the input on the mask.
inline Grid<double> masked_gaussian_blur(const Grid<double>& values, const BitMask& mask, double sigma_px) {
    if (!values.same_shape(mask)) throw InputError("masked_gaussian_blur: shape mismatch");
    const int w = values.width(), h = values.height();
    Grid<double> out(w, h, kInvalidDepth);
    if (sigma_px <= 0.0) {
        for (std::size_t i = 0; i < values.size(); ++i)
            if (mask[i]) out[i] = values[i];
        return out;
    }
    const int radius = static_cast<int>(std::ceil(4.0 * sigma_px));
    std::vector<double> kernel(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma_px * sigma_px));

    Grid<double> num(w, h, 0.0), den(w, h, 0.0);
    for (std::size_t i = 0; i < values.size(); ++i)
        if (mask[i]) {
            num[i] = values[i];
            den[i] = 1.0;
        }
    auto pass = [&](Grid<double>& g, bool horizontal) {
        Grid<double> tmp(w, h, 0.0);
        for (int v = 0; v < h; ++v)
            for (int u = 0; u < w; ++u) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int uu = horizontal ? u + k : u, vv = horizontal ? v : v + k;
                    if (uu < 0 || vv < 0 || uu >= w || vv >= h) continue;
                    acc += kernel[k + radius] * g(uu, vv);
                }
                tmp(u, v) = acc;
            }
        g = std::move(tmp);
    };
    pass(num, true);
    pass(num, false);
    pass(den, true);
    pass(den, false);
    for (std::size_t i = 0; i < values.size(); ++i)
        if (mask[i] && den[i] > 0.0) out[i] = num[i] / den[i];
    return out;
}

inline Grid<double> smooth_noise_field(int width, int height, const SmoothNoiseSpec& spec, std::uint64_t seed) {
    Grid<double> f(width, height, 0.0);
    if (spec.amplitude == 0.0 || spec.modes <= 0) return f;
    Rng rng(splitmix64(seed ^ 0x51d9ull));
    const double side = std::max(width, height);
    for (int m = 0; m < spec.modes; ++m) {
        const double wavelength = side * uniform(rng, spec.min_wavelength_frac, spec.max_wavelength_frac);
        const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double kx = std::cos(theta) / wavelength, ky = std::sin(theta) / wavelength;
        const double a = spec.amplitude / spec.modes;
        for (int v = 0; v < height; ++v)
            for (int u = 0; u < width; ++u) f(u, v) += a * std::cos(2.0 * std::numbers::pi * (kx * u + ky * v) + phase);
    }
    return f;
}

// D_pd = s * G_sigma(gt) + b + smooth noise, on the mask; NaN elsewhere.
inline DepthMap simulate_sidp(const DepthMap& gt, const BitMask& mask, double blur_sigma_px, AffineDepth affine,
                              const SmoothNoiseSpec& noise, std::uint64_t seed) {
    if (!gt.same_shape(mask)) throw InputError("simulate_sidp: shape mismatch");
    if (blur_sigma_px < 0.0 || !(affine.scale > 0.0)) throw InputError("simulate_sidp: bad blur or scale");
    if (count_set(mask) == 0) throw InputError("simulate_sidp: empty mask");
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (mask[i] && !(std::isfinite(gt[i]) && gt[i] > 0.0)) throw DataError("simulate_sidp: invalid gt under mask");
    const Grid<double> blurred = masked_gaussian_blur(gt, mask, blur_sigma_px);
    const Grid<double> field = smooth_noise_field(gt.width(), gt.height(), noise, seed);
    DepthMap out(gt.width(), gt.height(), DepthRole::prior);
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (mask[i]) out[i] = affine.scale * blurred[i] + affine.shift + field[i];
    return out;
}

struct AlignedDepth {
    DepthMap depth;
    double scale = 1.0;
    double shift = 0.0;
};

// Least-squares (s, b) minimising sum over the mask of (s * prior + b - anchor)^2.
inline AlignedDepth align_scale_shift(const DepthMap& prior, const DepthMap& anchor, const BitMask& mask) {
    if (!prior.same_shape(anchor) || !prior.same_shape(mask)) throw InputError("align_scale_shift: shape mismatch");
    double n = 0, sp = 0, sa = 0;
    for (std::size_t i = 0; i < prior.size(); ++i) {
        if (!mask[i] || !std::isfinite(prior[i]) || !std::isfinite(anchor[i])) continue;
        n += 1;
        sp += prior[i];
        sa += anchor[i];
    }
    if (n < 10) throw InputError("align_scale_shift: fewer than 10 overlapping pixels");
    const double mp = sp / n, ma = sa / n;
    double cpp = 0, cpa = 0;
    for (std::size_t i = 0; i < prior.size(); ++i) {
        if (!mask[i] || !std::isfinite(prior[i]) || !std::isfinite(anchor[i])) continue;
        cpp += (prior[i] - mp) * (prior[i] - mp);
        cpa += (prior[i] - mp) * (anchor[i] - ma);
    }
    if (!(cpp > 1e-12 * n * (mp * mp + 1.0))) throw RankDeficiencyError("align_scale_shift: prior is constant");
    AlignedDepth out;
    out.scale = cpa / cpp;
    out.shift = ma - out.scale * mp;
    out.depth = DepthMap(prior.width(), prior.height(), prior.role);
    for (std::size_t i = 0; i < prior.size(); ++i)
        if (std::isfinite(prior[i])) out.depth[i] = out.scale * prior[i] + out.shift;
    return out;
}

// Ground-truth-free fallback: divide by the masked median.
inline AlignedDepth normalize_unit_median(const DepthMap& prior, const BitMask& mask) {
    std::vector<double> vals;
    for (std::size_t i = 0; i < prior.size(); ++i)
        if (mask[i] && std::isfinite(prior[i])) vals.push_back(prior[i]);
    if (vals.empty()) throw InputError("normalize_unit_median: empty mask");
    const auto mid = vals.begin() + vals.size() / 2;
    std::nth_element(vals.begin(), mid, vals.end());
    double med = *mid;
    if (vals.size() % 2 == 0) med = 0.5 * (med + *std::max_element(vals.begin(), mid));
    if (!(med > 0.0)) throw DataError("normalize_unit_median: non-positive median");
    AlignedDepth out{DepthMap(prior.width(), prior.height(), prior.role), 1.0 / med, 0.0};
    for (std::size_t i = 0; i < prior.size(); ++i)
        if (std::isfinite(prior[i])) out.depth[i] = prior[i] / med;
    return out;
}

}  // namespace mvps
