#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mvps/error.hpp"

namespace mvps {

// Row-major 2D raster. (u, v) = (column, row); v grows downward.
template <typename T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int width, int height, const T& fill = T{})
        : width_(width), height_(height) {
        if (width < 0 || height < 0) throw InputError("Grid: negative dimensions");
        data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    bool same_shape(int w, int h) const { return width_ == w && height_ == h; }
    template <typename U>
    bool same_shape(const Grid<U>& o) const { return same_shape(o.width(), o.height()); }

    bool contains(int u, int v) const { return u >= 0 && v >= 0 && u < width_ && v < height_; }

    std::size_t index(int u, int v) const {
        return static_cast<std::size_t>(v) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(u);
    }

    T& operator()(int u, int v) { return data_[index(u, v)]; }
    const T& operator()(int u, int v) const { return data_[index(u, v)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    void fill(const T& v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Grid& o) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

using Image = Grid<float>;
using BitMask = Grid<std::uint8_t>;

inline std::size_t count_set(const BitMask& mask) {
    std::size_t n = 0;
    for (auto m : mask.data()) n += (m != 0);
    return n;
}

inline constexpr double kInvalidDepth = std::numeric_limits<double>::quiet_NaN();

enum class DepthRole { prior, refined, ground_truth };

// Metric z-depth per pixel; unmasked pixels hold NaN.
class DepthMap : public Grid<double> {
public:
    DepthMap() = default;
    DepthMap(int width, int height, DepthRole role = DepthRole::prior)
        : Grid<double>(width, height, kInvalidDepth), role(role) {}
    DepthMap(Grid<double> values, DepthRole role)
        : Grid<double>(std::move(values)), role(role) {}

    bool valid(int u, int v) const {
        const double d = (*this)(u, v);
        return std::isfinite(d) && d > 0.0;
    }

    DepthRole role = DepthRole::prior;
};

// Per-pixel 3-vector field (normals, in camera coordinates).
using NormalField = Grid<Eigen::Vector3d>;

}  // namespace mvps
