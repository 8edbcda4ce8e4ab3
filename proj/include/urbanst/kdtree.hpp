#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <queue>
#include <span>
#include <utility>
#include <vector>

namespace urbanst {

// Static K-dimensional tree over a fixed point set. Neighbour queries order
// results by (squared distance, point index), so equidistant points are
// returned lowest index first and every query is deterministic.
template <std::size_t K>
class KdTree {
public:
    using Point = std::array<double, K>;

    struct Neighbor {
        double dist2;
        std::size_t index;
        friend bool operator<(const Neighbor& a, const Neighbor& b) {
            return a.dist2 != b.dist2 ? a.dist2 < b.dist2 : a.index < b.index;
        }
    };

    explicit KdTree(std::span<const Point> points) : points_(points.begin(), points.end()) {
        order_.resize(points_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) {
            order_[i] = i;
        }
        nodes_.reserve(points_.size());
        if (!points_.empty()) {
            root_ = build(0, order_.size(), 0);
        }
    }

    std::size_t size() const { return points_.size(); }
    const Point& point(std::size_t i) const { return points_[i]; }

    static double distance2(const Point& a, const Point& b) {
        double s = 0.0;
        for (std::size_t d = 0; d < K; ++d) {
            const double diff = a[d] - b[d];
            s += diff * diff;
        }
        return s;
    }

    // The k nearest points to `query`, nearest first.
    std::vector<Neighbor> nearest(const Point& query, std::size_t k) const {
        k = std::min(k, points_.size());
        std::vector<Neighbor> out;
        if (k == 0) {
            return out;
        }
        if (k == points_.size()) {
            out.reserve(k);
            for (std::size_t i = 0; i < points_.size(); ++i) {
                out.push_back({distance2(query, points_[i]), i});
            }
            std::sort(out.begin(), out.end());
            return out;
        }
        std::priority_queue<Neighbor> heap; // worst candidate on top
        search(root_, query, k, heap);
        out.resize(heap.size());
        for (std::size_t i = out.size(); i-- > 0;) {
            out[i] = heap.top();
            heap.pop();
        }
        return out;
    }

private:
    struct Node {
        std::size_t point = 0;
        std::size_t axis = 0;
        int left = -1;
        int right = -1;
    };

    int build(std::size_t begin, std::size_t end, std::size_t depth) {
        if (begin >= end) {
            return -1;
        }
        const std::size_t axis = depth % K;
        const std::size_t mid = begin + (end - begin) / 2;
        std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                         order_.begin() + static_cast<std::ptrdiff_t>(mid),
                         order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t a, std::size_t b) {
                             return points_[a][axis] != points_[b][axis] ? points_[a][axis] < points_[b][axis]
                                                                         : a < b;
                         });
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back({order_[mid], axis, -1, -1});
        const int left = build(begin, mid, depth + 1);
        const int right = build(mid + 1, end, depth + 1);
        nodes_[static_cast<std::size_t>(id)].left = left;
        nodes_[static_cast<std::size_t>(id)].right = right;
        return id;
    }

    void search(int id, const Point& query, std::size_t k, std::priority_queue<Neighbor>& heap) const {
        if (id < 0) {
            return;
        }
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        const Neighbor candidate{distance2(query, points_[node.point]), node.point};
        if (heap.size() < k) {
            heap.push(candidate);
        } else if (candidate < heap.top()) {
            heap.pop();
            heap.push(candidate);
        }
        const double diff = query[node.axis] - points_[node.point][node.axis];
        const int near = diff < 0.0 ? node.left : node.right;
        const int far = diff < 0.0 ? node.right : node.left;
        search(near, query, k, heap);
        // Equality keeps equidistant points on the far side reachable for
        // the index tie-break.
        if (heap.size() < k || diff * diff <= heap.top().dist2) {
            search(far, query, k, heap);
        }
    }

    std::vector<Point> points_;
    std::vector<std::size_t> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

} // namespace urbanst
