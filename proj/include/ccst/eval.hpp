#pragma once

// Evaluation: exact ground truth and recall metrics. Also holds timing and
// Johnson-Lindenstrauss distortion helpers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"
#include "ccst/topk.hpp"

namespace ccst {

/// Exact Euclidean top-k, lower id on equal distance. k saturates at the
/// base count; distances are square-rooted.
inline NeighborLists brute_force_knn(const VectorDataset& base, const VectorDataset& queries, std::size_t k,
                                     unsigned workers = thread_count()) {
  if (k == 0) throw ConfigError("brute_force_knn: k must be >= 1");
  if (!base.empty() && !queries.empty() && base.dim() != queries.dim())
    throw ShapeError("brute_force_knn: base dim " + std::to_string(base.dim()) + " != query dim " +
                     std::to_string(queries.dim()));
  const std::size_t kk = std::min(k, base.count());
  NeighborLists out(queries.count(), kk);
  if (kk == 0) return out;
  parallel_for(
      queries.count(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t q = b; q < e; ++q) {
          TopK top(kk);
          const auto qv = queries.row(q);
          for (std::size_t i = 0; i < base.count(); ++i) top.push(l2_sqr(qv, base.row(i)), static_cast<std::int64_t>(i));
          top.write(out.row(q), out.distance_row(q), true);
        }
      },
      workers);
  return out;
}

/// Exact index file: "FLT1", version, count, dim, row-major floats, CRC.
inline std::string serialize_flat(const VectorDataset& data) {
  BinaryWriter w;
  w.put_bytes("FLT1");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(data.count());
  w.put<std::uint64_t>(data.dim());
  w.put_span(std::span<const float>(data.values()));
  w.seal();
  return w.bytes();
}

inline VectorDataset parse_flat(std::string_view bytes, const std::string& what = "flat index") {
  BinaryReader r(verify_sealed(bytes, what), what);
  r.expect_magic("FLT1");
  if (const auto v = r.get<std::uint32_t>(); v != 1) throw FormatError(what + ": unsupported version " + std::to_string(v));
  const auto count = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  if (count > 0 && dim == 0) throw FormatError(what + ": non-empty index with dim 0");
  if (dim > 0 && count > r.remaining() / sizeof(float) / dim) throw FormatError(what + ": truncated vector block");
  VectorDataset data(count, dim, r.get_vector<float>(count * dim));
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return data;
}

namespace detail {

inline void check_aligned(const NeighborLists& results, const NeighborLists& truth) {
  if (results.query_count != truth.query_count)
    throw ShapeError("recall: " + std::to_string(results.query_count) + " result rows vs " +
                     std::to_string(truth.query_count) + " ground-truth rows");
  if (results.query_count == 0) throw ShapeError("recall: no queries");
}

}  // namespace detail

/// Fraction of queries whose true nearest neighbour is among the first R results.
inline double recall_1_at(const NeighborLists& results, const NeighborLists& truth, std::size_t R) {
  detail::check_aligned(results, truth);
  if (R == 0 || R > results.k)
    throw ConfigError("recall 1@" + std::to_string(R) + ": result lists hold only " + std::to_string(results.k) + " entries");
  if (truth.k == 0) throw ShapeError("recall: ground truth has no neighbours");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < results.query_count; ++q) {
    const auto row = results.row(q).first(R);
    if (std::find(row.begin(), row.end(), truth.row(q)[0]) != row.end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.query_count);
}

/// Mean |top-n results ∩ true top-n| / n.
inline double recall_n_at_n(const NeighborLists& results, const NeighborLists& truth, std::size_t n) {
  detail::check_aligned(results, truth);
  if (n == 0 || n > results.k || n > truth.k)
    throw ConfigError("recall " + std::to_string(n) + "@" + std::to_string(n) + ": needs " + std::to_string(n) +
                      " entries, results hold " + std::to_string(results.k) + ", ground truth " +
                      std::to_string(truth.k));
  double total = 0.0;
  std::vector<std::int32_t> want, got;
  for (std::size_t q = 0; q < results.query_count; ++q) {
    const auto t = truth.row(q).first(n);
    const auto r = results.row(q).first(n);
    want.assign(t.begin(), t.end());
    got.assign(r.begin(), r.end());
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    got.erase(std::unique(got.begin(), got.end()), got.end());
    std::size_t overlap = 0;
    for (auto id : got)
      if (id >= 0 && std::binary_search(want.begin(), want.end(), id)) ++overlap;
    total += static_cast<double>(overlap) / static_cast<double>(n);
  }
  return total / static_cast<double>(results.query_count);
}

struct QpsMeasurement {
  double queries_per_second = 0.0;
  double mean_seconds = 0.0;  // per repetition
  std::size_t repetitions = 0;
  std::size_t queries = 0;
};

/// Runs `search(q)` for every query on the calling thread, `repetitions`
/// times, and reports the mean rate over a monotonic clock.
inline QpsMeasurement measure_qps(const std::function<void(std::size_t)>& search, std::size_t queries,
                                  std::size_t repetitions) {
  if (repetitions == 0) throw ConfigError("measure_qps: repetitions must be >= 1");
  if (queries == 0) throw ConfigError("measure_qps: no queries");
  using clock = std::chrono::steady_clock;
  double total = 0.0;
  for (std::size_t r = 0; r < repetitions; ++r) {
    const auto t0 = clock::now();
    for (std::size_t q = 0; q < queries; ++q) search(q);
    total += std::chrono::duration<double>(clock::now() - t0).count();
  }
  QpsMeasurement m;
  m.repetitions = repetitions;
  m.queries = queries;
  m.mean_seconds = total / static_cast<double>(repetitions);
  m.queries_per_second = m.mean_seconds > 0.0 ? static_cast<double>(queries) / m.mean_seconds
                                              : std::numeric_limits<double>::infinity();
  return m;
}

/// Recall columns for one configuration. A column is absent when the result
/// lists are too short to compute it.
struct RecallReport {
  std::map<std::string, std::string> params;  // index kind, ef / nprobe, compression factor, ...
  std::optional<double> recall_1_at_1, recall_1_at_5, recall_1_at_10, recall_1_at_50, recall_100_at_100;
  std::optional<QpsMeasurement> qps;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : params) j[k] = v;
    const auto put = [&](const char* key, const std::optional<double>& v) {
      if (v) j[key] = *v;
    };
    put("recall_1@1", recall_1_at_1);
    put("recall_1@5", recall_1_at_5);
    put("recall_1@10", recall_1_at_10);
    put("recall_1@50", recall_1_at_50);
    put("recall_100@100", recall_100_at_100);
    if (qps) {
      j["qps"] = qps->queries_per_second;
      j["repetitions"] = qps->repetitions;
    }
    return j;
  }
};

inline RecallReport make_recall_report(const NeighborLists& results, const NeighborLists& truth,
                                       std::map<std::string, std::string> params = {}) {
  detail::check_aligned(results, truth);
  RecallReport r;
  r.params = std::move(params);
  const auto at = [&](std::size_t R) -> std::optional<double> {
    if (R > results.k) return std::nullopt;
    return recall_1_at(results, truth, R);
  };
  r.recall_1_at_1 = at(1);
  r.recall_1_at_5 = at(5);
  r.recall_1_at_10 = at(10);
  r.recall_1_at_50 = at(50);
  if (results.k >= 100 && truth.k >= 100) r.recall_100_at_100 = recall_n_at_n(results, truth, 100);
  return r;
}

/// One JSON object per line.
inline std::string reports_to_jsonl(const std::vector<RecallReport>& reports) {
  std::string out;
  for (const auto& r : reports) out += r.to_json().dump() + "\n";
  return out;
}

/// Aligned plain-text table; absent columns print as "-".
inline std::string reports_to_table(const std::vector<RecallReport>& reports) {
  std::vector<std::string> param_keys;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.params)
      if (std::find(param_keys.begin(), param_keys.end(), k) == param_keys.end()) param_keys.push_back(k);
  std::vector<std::string> header = param_keys;
  for (const char* h : {"1@1", "1@5", "1@10", "1@50", "100@100", "qps"}) header.emplace_back(h);

  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row;
    for (const auto& k : param_keys) {
      const auto it = r.params.find(k);
      row.push_back(it == r.params.end() ? "-" : it->second);
    }
    const auto fmt = [](const std::optional<double>& v, const char* spec) {
      if (!v) return std::string("-");
      char buf[64];
      std::snprintf(buf, sizeof buf, spec, *v);
      return std::string(buf);
    };
    for (const auto& v : {r.recall_1_at_1, r.recall_1_at_5, r.recall_1_at_10, r.recall_1_at_50, r.recall_100_at_100})
      row.push_back(fmt(v, "%.4f"));
    row.push_back(fmt(r.qps ? std::optional<double>(r.qps->queries_per_second) : std::nullopt, "%.1f"));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  const auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c) os << "  ";
      os << std::string(width[c] - cells[c].size(), ' ') << cells[c];
    }
    os << "\n";
  };
  line(header);
  for (const auto& row : rows) line(row);
  return os.str();
}

// ---------------------------------------------------------------- JL diagnostics

/// Range a projected distance falls in when squared norms are distorted by
/// at most a factor (1 ± epsilon).
inline std::pair<double, double> distortion_interval(double distance, double epsilon) {
  if (!(distance >= 0.0)) throw ConfigError("distortion_interval: distance must be >= 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("distortion_interval: epsilon must lie in (0, 1)");
  return {distance * std::sqrt(1.0 - epsilon), distance * std::sqrt(1.0 + epsilon)};
}

/// Lower bound 4 ln(m) / (eps^2/2 - eps^3/3) on the target dimension.
inline double jl_dimension_bound(double m, double epsilon) {
  return 4.0 * std::log(m) / (epsilon * epsilon / 2.0 - epsilon * epsilon * epsilon / 3.0);
}

/// Smallest epsilon in (0, 1) with d_out > jl_dimension_bound(m, epsilon),
/// to within 1e-6; none if even epsilon -> 1 does not satisfy it. The bound
/// decreases monotonically in epsilon on (0, 1).
inline std::optional<double> jl_min_epsilon(double m, std::size_t d_out) {
  if (!(m >= 2.0)) throw ConfigError("jl_min_epsilon: point count must be >= 2");
  if (d_out == 0) throw ConfigError("jl_min_epsilon: d_out must be >= 1");
  const double d = static_cast<double>(d_out);
  if (!(d > 24.0 * std::log(m))) return std::nullopt;  // limit of the bound at epsilon = 1
  double lo = 0.0, hi = 1.0;  // bound(lo) >= d, bound(hi) < d
  while (hi - lo > 1e-7) {
    const double mid = 0.5 * (lo + hi);
    (jl_dimension_bound(m, mid) < d ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace ccst
