#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/error.hpp"

namespace ccst {

/// Dense row-major float matrix, one feature vector per row.
///
/// An empty dataset may carry dim 0 (an empty file has no header to read a
/// dimension from); a non-empty one always has dim >= 1.
class VectorDataset {
 public:
  VectorDataset() = default;

  VectorDataset(std::size_t count, std::size_t dim) : count_(count), dim_(dim), values_(count * dim) {
    check();
  }

  VectorDataset(std::size_t count, std::size_t dim, std::vector<float> values)
      : count_(count), dim_(dim), values_(std::move(values)) {
    check();
  }

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return count_ == 0; }

  std::span<const float> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  std::span<float> row(std::size_t i) { return {values_.data() + i * dim_, dim_}; }

  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
  }

  /// Rows `ids` gathered into a new dataset, in the given order.
  VectorDataset gather(std::span<const std::size_t> ids) const {
    VectorDataset out(ids.size(), dim_);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const auto src = row(ids[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  friend bool operator==(const VectorDataset&, const VectorDataset&) = default;

 private:
  void check() const {
    if (values_.size() != count_ * dim_)
      throw ShapeError("dataset values length " + std::to_string(values_.size()) + " != count*dim " +
                       std::to_string(count_) + "*" + std::to_string(dim_));
    if (count_ > 0 && dim_ == 0) throw ShapeError("non-empty dataset must have dim >= 1");
  }

  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> values_;
};

/// Per-query result ids (and optional distances). Missing results are -1.
struct NeighborLists {
  std::size_t query_count = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> ids;       // query_count * k
  std::vector<float> distances;        // empty, or query_count * k

  NeighborLists() = default;
  NeighborLists(std::size_t queries, std::size_t k_, bool with_distances = true)
      : query_count(queries), k(k_), ids(queries * k_, -1) {
    if (with_distances) distances.assign(queries * k_, 0.0f);
  }

  bool has_distances() const { return !distances.empty(); }
  std::span<const std::int32_t> row(std::size_t q) const { return {ids.data() + q * k, k}; }
  std::span<std::int32_t> row(std::size_t q) { return {ids.data() + q * k, k}; }
  std::span<const float> distance_row(std::size_t q) const { return {distances.data() + q * k, k}; }
  std::span<float> distance_row(std::size_t q) { return {distances.data() + q * k, k}; }

  friend bool operator==(const NeighborLists&, const NeighborLists&) = default;
};

namespace detail {

// Shared record walker for the *vecs family: int32 dim header followed by
// dim elements of `Elem`, widened to `Out`.
template <class Elem, class Out>
std::pair<std::size_t, std::vector<Out>> parse_vecs(std::string_view bytes, const std::string& what,
                                                     std::size_t& dim_out) {
  std::vector<Out> values;
  std::size_t pos = 0;
  std::size_t count = 0;
  std::int64_t dim = -1;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < sizeof(std::int32_t))
      throw FormatError(what + ": truncated record header at byte offset " + std::to_string(pos));
    std::int32_t d;
    std::memcpy(&d, bytes.data() + pos, sizeof d);
    if (d <= 0)
      throw FormatError(what + ": invalid dimension " + std::to_string(d) + " at byte offset " +
                        std::to_string(pos));
    if (dim >= 0 && d != dim)
      throw FormatError(what + ": inconsistent dimension at byte offset " + std::to_string(pos) + ": " +
                        std::to_string(d) + " vs first record " + std::to_string(dim));
    dim = d;
    const std::size_t payload = static_cast<std::size_t>(d) * sizeof(Elem);
    if (bytes.size() - pos - sizeof(std::int32_t) < payload)
      throw FormatError(what + ": truncated record at byte offset " + std::to_string(pos) + ": needs " +
                        std::to_string(payload) + " payload bytes, " +
                        std::to_string(bytes.size() - pos - sizeof(std::int32_t)) + " remain");
    pos += sizeof(std::int32_t);
    if (count == 0) values.reserve(bytes.size() / (payload + sizeof(std::int32_t)) * static_cast<std::size_t>(d));
    for (std::int32_t i = 0; i < d; ++i) {
      Elem e;
      std::memcpy(&e, bytes.data() + pos, sizeof e);
      pos += sizeof e;
      values.push_back(static_cast<Out>(e));
    }
    ++count;
  }
  dim_out = dim < 0 ? 0 : static_cast<std::size_t>(dim);
  return {count, std::move(values)};
}

template <class Elem, class In>
std::string serialize_vecs(std::size_t count, std::size_t dim, std::span<const In> values) {
  BinaryWriter w;
  for (std::size_t r = 0; r < count; ++r) {
    w.put(static_cast<std::int32_t>(dim));
    for (std::size_t c = 0; c < dim; ++c) w.put(static_cast<Elem>(values[r * dim + c]));
  }
  return w.bytes();
}

}  // namespace detail

inline VectorDataset parse_fvecs(std::string_view bytes, const std::string& what = "fvecs") {
  std::size_t dim = 0;
  auto [count, values] = detail::parse_vecs<float, float>(bytes, what, dim);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw FormatError(what + ": non-finite value in record " + std::to_string(i / dim) + " at byte offset " +
                        std::to_string((i / dim) * (4 + 4 * dim) + 4 + 4 * (i % dim)));
  return VectorDataset(count, dim, std::move(values));
}

inline VectorDataset parse_bvecs(std::string_view bytes, const std::string& what = "bvecs") {
  std::size_t dim = 0;
  auto [count, values] = detail::parse_vecs<std::uint8_t, float>(bytes, what, dim);
  return VectorDataset(count, dim, std::move(values));
}

inline VectorDataset read_fvecs(const std::string& path) { return parse_fvecs(read_file(path), path); }

inline VectorDataset read_bvecs(const std::string& path) { return parse_bvecs(read_file(path), path); }

/// Reads by extension: `.bvecs` widens bytes, anything else is fvecs.
inline VectorDataset read_vectors(const std::string& path) {
  if (path.size() >= 6 && path.ends_with(".bvecs")) return read_bvecs(path);
  return read_fvecs(path);
}

inline void write_fvecs(const VectorDataset& data, const std::string& path) {
  write_file(path, detail::serialize_vecs<float, float>(data.count(), data.dim(), data.values()));
}

inline NeighborLists parse_ivecs(std::string_view bytes, const std::string& what = "ivecs") {
  std::size_t k = 0;
  auto [count, ids] = detail::parse_vecs<std::int32_t, std::int32_t>(bytes, what, k);
  NeighborLists out;
  out.query_count = count;
  out.k = k;
  out.ids = std::move(ids);
  return out;
}

inline NeighborLists read_ivecs(const std::string& path) { return parse_ivecs(read_file(path), path); }

/// Ids only; distances are not part of the format.
inline void write_ivecs(const NeighborLists& lists, const std::string& path) {
  write_file(path, detail::serialize_vecs<std::int32_t, std::int32_t>(lists.query_count, lists.k, lists.ids));
}

/// Seeded random partition of rows into (base, queries); each keeps the
/// original relative row order.
inline std::pair<VectorDataset, VectorDataset> split_queries(const VectorDataset& data, std::size_t query_count,
                                                             std::uint64_t seed) {
  if (query_count == 0 || query_count >= data.count())
    throw ConfigError("split_queries: query_count must be in (0, " + std::to_string(data.count()) + "), got " +
                      std::to_string(query_count));
  std::vector<std::size_t> order(data.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> queries(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(query_count));
  std::vector<std::size_t> base(order.begin() + static_cast<std::ptrdiff_t>(query_count), order.end());
  std::sort(queries.begin(), queries.end());
  std::sort(base.begin(), base.end());
  return {data.gather(base), data.gather(queries)};
}

}  // namespace ccst
