#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace mvps {

// Static 3D k-d tree for exact nearest-neighbour queries. Holds a copy of the
// points; ties are broken toward the smaller point index so results are
// deterministic.
class KdTree3 {
public:
    struct Hit {
        std::uint32_t index = 0;
        double sq_dist = std::numeric_limits<double>::infinity();
    };

    KdTree3() = default;
    explicit KdTree3(std::span<const Eigen::Vector3d> points) { build(points); }

    void build(std::span<const Eigen::Vector3d> points) {
        points_.assign(points.begin(), points.end());
        order_.resize(points_.size());
        std::iota(order_.begin(), order_.end(), 0u);
        nodes_.clear();
        nodes_.reserve(2 * points_.size() / kLeafSize + 2);
        if (!points_.empty()) build_node(0, static_cast<std::uint32_t>(points_.size()));
    }

    std::size_t size() const { return points_.size(); }
    bool empty() const { return points_.empty(); }
    const Eigen::Vector3d& point(std::uint32_t i) const { return points_[i]; }

    Hit nearest(const Eigen::Vector3d& q) const {
        Hit best;
        if (!nodes_.empty()) search(0, q, best);
        return best;
    }

private:
    static constexpr std::uint32_t kLeafSize = 8;

    struct Node {
        std::uint32_t begin, end;  // range in order_
        std::int32_t left = -1, right = -1;
        Eigen::Vector3d lo, hi;  // bounds of the points below
    };

    double box_sq_dist(const Node& n, const Eigen::Vector3d& q) const {
        return (n.lo - q).cwiseMax(q - n.hi).cwiseMax(0.0).squaredNorm();
    }

    std::int32_t build_node(std::uint32_t begin, std::uint32_t end) {
        const auto id = static_cast<std::int32_t>(nodes_.size());
        Eigen::Vector3d lo = points_[order_[begin]], hi = lo;
        for (auto i = begin; i < end; ++i) {
            lo = lo.cwiseMin(points_[order_[i]]);
            hi = hi.cwiseMax(points_[order_[i]]);
        }
        nodes_.push_back({begin, end, -1, -1, lo, hi});
        if (end - begin <= kLeafSize) return id;

        int axis = 0;
        (hi - lo).maxCoeff(&axis);
        const auto mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                         [&](std::uint32_t a, std::uint32_t b) {
                             const double pa = points_[a][axis], pb = points_[b][axis];
                             return pa < pb || (pa == pb && a < b);
                         });
        const auto l = build_node(begin, mid);
        const auto r = build_node(mid, end);
        nodes_[id].left = l;
        nodes_[id].right = r;
        return id;
    }

    void search(std::int32_t id, const Eigen::Vector3d& q, Hit& best) const {
        const Node& n = nodes_[id];
        if (n.left < 0) {
            for (auto i = n.begin; i < n.end; ++i) {
                const auto idx = order_[i];
                const double d = (points_[idx] - q).squaredNorm();
                if (d < best.sq_dist || (d == best.sq_dist && idx < best.index)) best = {idx, d};
            }
            return;
        }
        const double dl = box_sq_dist(nodes_[n.left], q), dr = box_sq_dist(nodes_[n.right], q);
        const bool left_first = dl <= dr;
        search(left_first ? n.left : n.right, q, best);
        if ((left_first ? dr : dl) <= best.sq_dist) search(left_first ? n.right : n.left, q, best);
    }

    std::vector<Eigen::Vector3d> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

}  // namespace mvps
