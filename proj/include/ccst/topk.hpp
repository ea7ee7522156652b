#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <span>
#include <vector>

namespace ccst {

/// Bounded selection of the k smallest (distance, id) pairs; equal distances
/// resolve to the lower id.
class TopK {
 public:
  struct Entry {
    float dist;
    std::int64_t id;
    friend bool operator<(const Entry& a, const Entry& b) {
      return a.dist < b.dist || (a.dist == b.dist && a.id < b.id);
    }
  };

  explicit TopK(std::size_t k) : k_(k) {}

  void push(float dist, std::int64_t id) {
    if (k_ == 0) return;
    const Entry e{dist, id};
    if (heap_.size() < k_) {
      heap_.push(e);
    } else if (e < heap_.top()) {
      heap_.pop();
      heap_.push(e);
    }
  }

  /// Drains the selector into ascending order.
  std::vector<Entry> take_sorted() {
    std::vector<Entry> out;
    out.reserve(heap_.size());
    for (; !heap_.empty(); heap_.pop()) out.push_back(heap_.top());
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// Writes ids (and, when given, the square roots of squared distances),
  /// padding with -1 / 0.
  void write(std::span<std::int32_t> ids, std::span<float> dists, bool take_sqrt) {
    const auto sorted = take_sorted();
    std::fill(ids.begin(), ids.end(), -1);
    std::fill(dists.begin(), dists.end(), 0.0f);
    for (std::size_t i = 0; i < std::min(ids.size(), sorted.size()); ++i) {
      ids[i] = static_cast<std::int32_t>(sorted[i].id);
      if (!dists.empty()) dists[i] = take_sqrt ? std::sqrt(sorted[i].dist) : sorted[i].dist;
    }
  }

 private:
  std::size_t k_;
  std::priority_queue<Entry> heap_;
};

}  // namespace ccst
