#pragma once

// Hierarchical navigable small-world graph. The graph may be built over one
// vector set and searched against another with the same row ids (for example
// built on compressed vectors, searched with the originals).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"

namespace ccst {

struct HnswConfig {
  std::size_t M = 16;
  std::size_t ef_construction = 200;
  std::size_t ef_search_default = 100;
  // Level multiplier; unset selects 1 / ln(M).
  std::optional<double> level_lambda;
  std::uint64_t seed = 0;

  double level_multiplier() const { return level_lambda ? *level_lambda : 1.0 / std::log(static_cast<double>(M)); }

  void validate() const {
    if (M < 2) throw ConfigError("hnsw: M must be >= 2, got " + std::to_string(M));
    if (ef_construction < M)
      throw ConfigError("hnsw: ef_construction (" + std::to_string(ef_construction) + ") must be >= M (" +
                        std::to_string(M) + ")");
    if (ef_search_default == 0) throw ConfigError("hnsw: ef_search_default must be >= 1");
    if (level_lambda && !(*level_lambda > 0.0 && std::isfinite(*level_lambda)))
      throw ConfigError("hnsw: level_lambda must be positive");
  }

  friend bool operator==(const HnswConfig&, const HnswConfig&) = default;
};

/// Work counters. `multiplies` is distance evaluations times the dimension
/// of the space they were evaluated in.
struct DistanceCounter {
  std::uint64_t distances = 0;
  std::uint64_t multiplies = 0;
  std::uint64_t visited = 0;

  DistanceCounter& operator+=(const DistanceCounter& o) {
    distances += o.distances;
    multiplies += o.multiplies;
    visited += o.visited;
    return *this;
  }
};

class HnswIndex {
 public:
  using Id = std::uint32_t;

  /// Sequential insertion in dataset order; deterministic for a fixed seed.
  static HnswIndex build(const VectorDataset& base, const HnswConfig& cfg) {
    cfg.validate();
    if (base.empty()) throw ConfigError("hnsw build: base set is empty");
    if (base.count() > std::numeric_limits<Id>::max()) throw ConfigError("hnsw build: too many points");
    HnswIndex index;
    index.config_ = cfg;
    index.build_ = std::make_shared<const VectorDataset>(base);
    index.build_dim_ = base.dim();
    index.sample_levels();
    index.links_.resize(base.count());
    for (std::size_t i = 0; i < base.count(); ++i) index.links_[i].resize(index.levels_[i] + 1);
    for (std::size_t i = 0; i < base.count(); ++i) index.insert(static_cast<Id>(i));
    return index;
  }

  /// Scores all later searches against `full`, row-aligned with the build set.
  void attach_search_vectors(const VectorDataset& full) {
    if (full.count() != count())
      throw ShapeError("hnsw attach: search set has " + std::to_string(full.count()) + " rows, index has " +
                       std::to_string(count()));
    search_ = std::make_shared<const VectorDataset>(full);
  }

  void detach_search_vectors() { search_.reset(); }
  bool has_search_vectors() const { return search_ != nullptr; }

  /// Dimension queries must have.
  std::size_t search_dim() const { return active().dim(); }

  /// Up to k nearest ids in ascending distance, padded with -1 when k > count.
  void search(std::span<const float> query, std::size_t k, std::size_t ef, std::span<std::int32_t> ids_out,
              std::span<float> dist_out = {}, DistanceCounter* counter = nullptr) const {
    if (k == 0) throw ConfigError("hnsw search: k must be >= 1");
    if (ef < k) throw ConfigError("hnsw search: ef_search (" + std::to_string(ef) + ") must be >= k (" +
                                  std::to_string(k) + ")");
    const VectorDataset& space = active();
    if (query.size() != space.dim())
      throw ShapeError("hnsw search: query dim " + std::to_string(query.size()) + " != index search dim " +
                       std::to_string(space.dim()));
    if (ids_out.size() != k || (!dist_out.empty() && dist_out.size() != k))
      throw ShapeError("hnsw search: output spans must hold k entries");
    DistanceCounter local;
    Scorer score{space, query, local};
    Candidate cur{score(entry_), entry_};
    for (std::size_t layer = max_level_; layer > 0; --layer) cur = greedy(score, cur, layer);
    auto found = search_layer(score, {cur}, std::max(ef, k), 0, local);
    std::fill(ids_out.begin(), ids_out.end(), -1);
    if (!dist_out.empty()) std::fill(dist_out.begin(), dist_out.end(), 0.0f);
    for (std::size_t i = 0; i < std::min(k, found.size()); ++i) {
      ids_out[i] = static_cast<std::int32_t>(found[i].id);
      if (!dist_out.empty()) dist_out[i] = std::sqrt(found[i].dist);
    }
    if (counter) *counter += local;
  }

  /// All queries, parallel over CCST_THREADS; results do not depend on the thread count.
  NeighborLists search_batch(const VectorDataset& queries, std::size_t k, std::size_t ef,
                             DistanceCounter* counter = nullptr, unsigned workers = thread_count()) const {
    NeighborLists out(queries.count(), k);
    std::vector<DistanceCounter> per_query(queries.count());
    parallel_for(
        queries.count(),
        [&](std::size_t begin, std::size_t end) {
          for (std::size_t q = begin; q < end; ++q)
            search(queries.row(q), k, ef, out.row(q), out.distance_row(q), &per_query[q]);
        },
        workers);
    if (counter)
      for (const auto& c : per_query) *counter += c;
    return out;
  }

  std::size_t count() const { return levels_.size(); }
  std::size_t build_dim() const { return build_dim_; }
  std::size_t max_level() const { return max_level_; }
  Id entry_point() const { return entry_; }
  std::size_t level(Id node) const { return levels_.at(node); }
  const HnswConfig& config() const { return config_; }
  const DistanceCounter& build_counter() const { return build_counter_; }

  std::span<const Id> neighbors(Id node, std::size_t layer) const {
    const auto& l = links_.at(node);
    if (layer >= l.size()) return {};
    return l[layer];
  }

  std::size_t degree_cap(std::size_t layer) const { return layer == 0 ? 2 * config_.M : config_.M; }

  bool bound() const { return build_ != nullptr; }

  std::string serialize() const {
    BinaryWriter w;
    w.put_bytes("HNS1");
    w.put<std::uint32_t>(1);
    w.put<std::uint64_t>(config_.M);
    w.put<std::uint64_t>(config_.ef_construction);
    w.put<std::uint64_t>(config_.ef_search_default);
    w.put<std::uint8_t>(config_.level_lambda.has_value());
    w.put<double>(config_.level_lambda.value_or(0.0));
    w.put<std::uint64_t>(config_.seed);
    w.put<std::uint64_t>(count());
    w.put<std::uint64_t>(build_dim());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(max_level_));
    w.put<std::uint32_t>(entry_);
    std::vector<std::uint32_t> levels(levels_.begin(), levels_.end());
    w.put_span(std::span<const std::uint32_t>(levels));
    for (std::size_t layer = 0; layer <= max_level_; ++layer) {
      std::vector<std::uint64_t> offsets(count() + 1, 0);
      std::vector<Id> flat;
      for (std::size_t i = 0; i < count(); ++i) {
        const auto n = neighbors(static_cast<Id>(i), layer);
        flat.insert(flat.end(), n.begin(), n.end());
        offsets[i + 1] = flat.size();
      }
      w.put_span(std::span<const std::uint64_t>(offsets));
      w.put_span(std::span<const Id>(flat));
    }
    w.seal();
    return w.bytes();
  }

  void save(const std::string& path) const { write_file(path, serialize()); }

  /// Graph only; bind the build vectors with the overload taking a dataset.
  static HnswIndex parse(std::string_view bytes, const std::string& what = "hnsw index") {
    BinaryReader r(verify_sealed(bytes, what), what);
    r.expect_magic("HNS1");
    if (const auto v = r.get<std::uint32_t>(); v != 1)
      throw FormatError(what + ": unsupported version " + std::to_string(v));
    HnswIndex index;
    auto& c = index.config_;
    c.M = r.get<std::uint64_t>();
    c.ef_construction = r.get<std::uint64_t>();
    c.ef_search_default = r.get<std::uint64_t>();
    const bool has_lambda = r.get<std::uint8_t>() != 0;
    const double lambda = r.get<double>();
    if (has_lambda) c.level_lambda = lambda;
    c.seed = r.get<std::uint64_t>();
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw FormatError(what + ": invalid stored config: " + e.what());
    }
    const auto n = r.get<std::uint64_t>();
    index.build_dim_ = r.get<std::uint64_t>();
    index.max_level_ = r.get<std::uint32_t>();
    index.entry_ = r.get<std::uint32_t>();
    if (n == 0 || n > std::numeric_limits<Id>::max() || index.entry_ >= n)
      throw FormatError(what + ": invalid node count or entry point");
    const auto levels = r.get_vector<std::uint32_t>(n);
    index.levels_.assign(levels.begin(), levels.end());
    index.links_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (index.levels_[i] > index.max_level_) throw FormatError(what + ": node level exceeds max level");
      index.links_[i].resize(index.levels_[i] + 1);
    }
    if (index.levels_[index.entry_] != index.max_level_) throw FormatError(what + ": entry point is not on top layer");
    for (std::size_t layer = 0; layer <= index.max_level_; ++layer) {
      const auto offsets = r.get_vector<std::uint64_t>(n + 1);
      const auto flat = r.get_vector<Id>(offsets.back());
      for (std::size_t i = 0; i < n; ++i) {
        if (offsets[i] > offsets[i + 1] || offsets[i + 1] > flat.size())
          throw FormatError(what + ": corrupt adjacency offsets on layer " + std::to_string(layer));
        if (offsets[i] == offsets[i + 1]) continue;
        if (layer > index.levels_[i] || offsets[i + 1] - offsets[i] > index.degree_cap(layer))
          throw FormatError(what + ": adjacency violates level or degree cap at node " + std::to_string(i));
        auto& dst = index.links_[i][layer];
        dst.assign(flat.begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                   flat.begin() + static_cast<std::ptrdiff_t>(offsets[i + 1]));
        for (Id e : dst)
          if (e >= n || index.levels_[e] < layer) throw FormatError(what + ": dangling edge at node " + std::to_string(i));
      }
    }
    if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after adjacency");
    return index;
  }

  static HnswIndex parse(std::string_view bytes, const VectorDataset& build_vectors,
                         const std::string& what = "hnsw index") {
    HnswIndex index = parse(bytes, what);
    if (build_vectors.count() != index.count() || build_vectors.dim() != index.build_dim_)
      throw ShapeError(what + ": index expects " + std::to_string(index.count()) + " x " +
                       std::to_string(index.build_dim_) + " build vectors, got " +
                       std::to_string(build_vectors.count()) + " x " + std::to_string(build_vectors.dim()));
    index.build_ = std::make_shared<const VectorDataset>(build_vectors);
    return index;
  }

  static HnswIndex load(const std::string& path, const VectorDataset& build_vectors) {
    return parse(read_file(path), build_vectors, path);
  }

 private:
  struct Candidate {
    float dist;
    Id id;
    // Lower distance first, lower id on ties.
    friend bool operator<(const Candidate& a, const Candidate& b) {
      return a.dist < b.dist || (a.dist == b.dist && a.id < b.id);
    }
    friend bool operator>(const Candidate& a, const Candidate& b) { return b < a; }
  };

  struct Scorer {
    const VectorDataset& space;
    std::span<const float> query;
    DistanceCounter& counter;
    float operator()(Id node) const {
      ++counter.distances;
      counter.multiplies += space.dim();
      return l2_sqr(query, space.row(node));
    }
  };

  const VectorDataset& active() const {
    if (!build_) throw ConfigError("hnsw: index has no bound vectors");
    return search_ ? *search_ : *build_;
  }

  void sample_levels() {
    std::mt19937_64 rng(config_.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double mult = config_.level_multiplier();
    levels_.resize(build_->count());
    for (auto& l : levels_) {
      const double u = 1.0 - unit(rng);  // (0, 1]
      l = static_cast<std::size_t>(std::floor(-std::log(u) * mult));
    }
  }

  Candidate greedy(const Scorer& score, Candidate cur, std::size_t layer) const {
    for (bool moved = true; moved;) {
      moved = false;
      for (Id e : links_[cur.id][layer]) {
        const Candidate c{score(e), e};
        if (c < cur) {
          cur = c;
          moved = true;
        }
      }
    }
    return cur;
  }

  // Beam search on one layer; returns up to ef candidates sorted ascending.
  std::vector<Candidate> search_layer(const Scorer& score, std::vector<Candidate> entries, std::size_t ef,
                                      std::size_t layer, DistanceCounter& counter) const {
    thread_local std::vector<std::uint32_t> mark;
    thread_local std::uint32_t epoch = 0;
    if (mark.size() < count()) {
      mark.assign(count(), 0);
      epoch = 0;
    }
    if (++epoch == 0) {
      std::fill(mark.begin(), mark.end(), 0);
      epoch = 1;
    }
    std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;  // closest on top
    std::priority_queue<Candidate> best;                                             // farthest on top
    for (const auto& e : entries) {
      mark[e.id] = epoch;
      frontier.push(e);
      best.push(e);
    }
    while (best.size() > ef) best.pop();
    while (!frontier.empty()) {
      const Candidate c = frontier.top();
      if (best.top() < c) break;
      frontier.pop();
      ++counter.visited;
      for (Id e : links_[c.id][layer]) {
        if (mark[e] == epoch) continue;
        mark[e] = epoch;
        const Candidate cand{score(e), e};
        if (best.size() < ef || cand < best.top()) {
          frontier.push(cand);
          best.push(cand);
          if (best.size() > ef) best.pop();
        }
      }
    }
    std::vector<Candidate> out;
    out.reserve(best.size());
    for (; !best.empty(); best.pop()) out.push_back(best.top());
    std::reverse(out.begin(), out.end());
    return out;
  }

  float build_distance(Id a, Id b) {
    ++build_counter_.distances;
    build_counter_.multiplies += build_->dim();
    return l2_sqr(build_->row(a), build_->row(b));
  }

  // Keeps a candidate only if it is closer to the base than to every
  // neighbour already kept. `sorted` is ascending by distance to the base.
  std::vector<Id> select_heuristic(const std::vector<Candidate>& sorted, std::size_t cap) {
    std::vector<Id> kept;
    for (const auto& c : sorted) {
      if (kept.size() >= cap) break;
      bool keep = true;
      for (Id r : kept)
        if (build_distance(c.id, r) < c.dist) {
          keep = false;
          break;
        }
      if (keep) kept.push_back(c.id);
    }
    return kept;
  }

  void insert(Id q) {
    const std::size_t level = levels_[q];
    if (q == 0) {
      entry_ = 0;
      max_level_ = level;
      return;
    }
    Scorer score{*build_, build_->row(q), build_counter_};
    Candidate cur{score(entry_), entry_};
    for (std::size_t layer = max_level_; layer > level; --layer) cur = greedy(score, cur, layer);
    std::vector<Candidate> entries{cur};
    for (std::size_t layer = std::min(level, max_level_) + 1; layer-- > 0;) {
      auto found = search_layer(score, entries, config_.ef_construction, layer, build_counter_);
      links_[q][layer] = select_heuristic(found, config_.M);
      for (Id e : links_[q][layer]) connect(e, q, layer);
      entries = {found.front()};
    }
    if (level > max_level_) {
      max_level_ = level;
      entry_ = q;
    }
  }

  // Adds q to e's list on `layer`, re-pruning with the heuristic on overflow.
  void connect(Id e, Id q, std::size_t layer) {
    auto& list = links_[e][layer];
    const std::size_t cap = degree_cap(layer);
    if (list.size() < cap) {
      list.push_back(q);
      return;
    }
    std::vector<Candidate> cands;
    cands.reserve(list.size() + 1);
    cands.push_back({build_distance(e, q), q});
    for (Id n : list) cands.push_back({build_distance(e, n), n});
    std::sort(cands.begin(), cands.end());
    list = select_heuristic(cands, cap);
  }

  HnswConfig config_;
  std::shared_ptr<const VectorDataset> build_;
  std::shared_ptr<const VectorDataset> search_;
  std::size_t build_dim_ = 0;
  std::vector<std::size_t> levels_;
  std::vector<std::vector<std::vector<Id>>> links_;  // [node][layer]
  std::size_t max_level_ = 0;
  Id entry_ = 0;
  DistanceCounter build_counter_;
};

}  // namespace ccst
