#pragma once

// Vector quantizers built on Lloyd k-means. Product quantization scores codes
// through per-query lookup tables, optionally behind an inverted file; scalar
// quantization maps each dimension to 8 bits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"
#include "ccst/topk.hpp"

namespace ccst {

// ---------------------------------------------------------------- k-means

struct KMeansResult {
  VectorDataset centroids;
  std::vector<std::uint32_t> assignment;
  // Inertia measured at each assignment step, in iteration order.
  std::vector<double> inertia;
};

namespace detail {

/// Nearest centroid by squared L2, lower index on ties.
inline std::pair<std::uint32_t, float> nearest(std::span<const float> x, const VectorDataset& centroids) {
  std::uint32_t best = 0;
  float best_d = l2_sqr(x, centroids.row(0));
  for (std::size_t c = 1; c < centroids.count(); ++c) {
    const float d = l2_sqr(x, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return {best, best_d};
}

}  // namespace detail

inline constexpr std::size_t kDefaultKMeansIters = 25;

/// Lloyd's algorithm from `k` distinct seeded rows. Clusters left empty are
/// re-seeded with the points farthest from their centroid.
inline KMeansResult kmeans(const VectorDataset& data, std::size_t k, std::size_t iters = kDefaultKMeansIters,
                           std::uint64_t seed = 0, unsigned workers = thread_count()) {
  const std::size_t n = data.count(), dim = data.dim();
  if (k == 0) throw ConfigError("kmeans: k must be >= 1");
  if (k > n) throw ConfigError("kmeans: k (" + std::to_string(k) + ") exceeds point count (" + std::to_string(n) + ")");
  if (iters == 0) throw ConfigError("kmeans: iters must be >= 1");

  // Seeded shuffle, preferring rows not already chosen by value.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen, repeats;
  for (std::size_t idx : order) {
    if (chosen.size() == k) break;
    const auto row = data.row(idx);
    const bool dup = std::any_of(chosen.begin(), chosen.end(), [&](std::size_t c) {
      const auto other = data.row(c);
      return std::equal(row.begin(), row.end(), other.begin());
    });
    (dup ? repeats : chosen).push_back(idx);
  }
  for (std::size_t i = 0; chosen.size() < k; ++i) chosen.push_back(repeats[i]);

  KMeansResult res{data.gather(chosen), std::vector<std::uint32_t>(n), {}};
  std::vector<float> dist(n);
  for (std::size_t it = 0; it < iters; ++it) {
    parallel_for(
        n,
        [&](std::size_t b, std::size_t e) {
          for (std::size_t i = b; i < e; ++i) std::tie(res.assignment[i], dist[i]) = detail::nearest(data.row(i), res.centroids);
        },
        workers);
    const double inertia = std::accumulate(dist.begin(), dist.end(), 0.0);
    if (!res.inertia.empty() && inertia > res.inertia.back() * (1.0 + 1e-6) + 1e-12)
      throw NumericError("kmeans: inertia increased from " + std::to_string(res.inertia.back()) + " to " +
                         std::to_string(inertia) + " at iteration " + std::to_string(it));
    res.inertia.push_back(inertia);

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = res.assignment[i];
      ++sizes[c];
      const auto row = data.row(i);
      for (std::size_t d = 0; d < dim; ++d) sums[c * dim + d] += row[d];
    }
    // Farthest points first, lower id on ties.
    std::vector<std::size_t> far;
    for (std::size_t c = 0; c < k; ++c) {
      auto cen = res.centroids.row(c);
      if (sizes[c] > 0) {
        for (std::size_t d = 0; d < dim; ++d) cen[d] = static_cast<float>(sums[c * dim + d] / static_cast<double>(sizes[c]));
        continue;
      }
      if (far.empty()) {
        far.resize(n);
        std::iota(far.begin(), far.end(), std::size_t{0});
        std::stable_sort(far.begin(), far.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
        std::reverse(far.begin(), far.end());  // pop_back yields the farthest
      }
      const std::size_t p = far.back();
      far.pop_back();
      const auto src = data.row(p);
      std::copy(src.begin(), src.end(), cen.begin());
    }
  }
  return res;
}

// ---------------------------------------------------------------- PQ

struct PqCodebook {
  std::size_t dim = 0;
  std::size_t m = 0;
  std::size_t ksub = 0;  // centroids per subspace, at most 256
  std::vector<float> centroids;  // m x ksub x sub_dim

  std::size_t sub_dim() const { return dim / m; }
  std::span<const float> centroid(std::size_t sub, std::size_t c) const {
    return {centroids.data() + (sub * ksub + c) * sub_dim(), sub_dim()};
  }
  std::size_t code_size() const { return m; }

  friend bool operator==(const PqCodebook&, const PqCodebook&) = default;
};

/// Byte codes, `m` per vector.
struct PqCodes {
  std::size_t count = 0;
  std::size_t m = 0;
  std::vector<std::uint8_t> codes;

  std::span<const std::uint8_t> row(std::size_t i) const { return {codes.data() + i * m, m}; }
  friend bool operator==(const PqCodes&, const PqCodes&) = default;
};

inline constexpr std::size_t kPqMaxCentroids = 256;

inline VectorDataset subspace(const VectorDataset& data, std::size_t sub, std::size_t sub_dim) {
  VectorDataset out(data.count(), sub_dim);
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto src = data.row(i).subspan(sub * sub_dim, sub_dim);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline PqCodebook pq_train(const VectorDataset& data, std::size_t m, std::size_t iters = kDefaultKMeansIters,
                           std::uint64_t seed = 0) {
  if (data.empty()) throw ConfigError("pq_train: empty training set");
  if (m == 0 || data.dim() % m != 0)
    throw ConfigError("pq_train: m = " + std::to_string(m) + " does not divide dim " + std::to_string(data.dim()));
  PqCodebook cb;
  cb.dim = data.dim();
  cb.m = m;
  cb.ksub = std::min(kPqMaxCentroids, data.count());
  const std::size_t sd = cb.sub_dim();
  cb.centroids.resize(m * cb.ksub * sd);
  for (std::size_t s = 0; s < m; ++s) {
    const auto km = kmeans(subspace(data, s, sd), cb.ksub, iters, seed + 0x9e3779b97f4a7c15ULL * (s + 1));
    std::copy(km.centroids.values().begin(), km.centroids.values().end(),
              cb.centroids.begin() + static_cast<std::ptrdiff_t>(s * cb.ksub * sd));
  }
  return cb;
}

inline void check_dim(const PqCodebook& cb, std::size_t dim, const char* what) {
  if (dim != cb.dim)
    throw ShapeError(std::string(what) + ": vector dim " + std::to_string(dim) + " != codebook dim " +
                     std::to_string(cb.dim));
}

inline PqCodes pq_encode(const PqCodebook& cb, const VectorDataset& data, unsigned workers = thread_count()) {
  if (!data.empty()) check_dim(cb, data.dim(), "pq_encode");
  PqCodes out{data.count(), cb.m, std::vector<std::uint8_t>(data.count() * cb.m)};
  const std::size_t sd = cb.sub_dim();
  parallel_for(
      data.count(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i)
          for (std::size_t s = 0; s < cb.m; ++s) {
            const auto x = data.row(i).subspan(s * sd, sd);
            std::size_t best = 0;
            float best_d = l2_sqr(x, cb.centroid(s, 0));
            for (std::size_t c = 1; c < cb.ksub; ++c) {
              const float d = l2_sqr(x, cb.centroid(s, c));
              if (d < best_d) {
                best_d = d;
                best = c;
              }
            }
            out.codes[i * cb.m + s] = static_cast<std::uint8_t>(best);
          }
      },
      workers);
  return out;
}

inline VectorDataset pq_decode(const PqCodebook& cb, const PqCodes& codes) {
  if (codes.m != cb.m) throw ShapeError("pq_decode: code width " + std::to_string(codes.m) + " != m " + std::to_string(cb.m));
  VectorDataset out(codes.count, codes.count == 0 ? 0 : cb.dim);
  const std::size_t sd = cb.sub_dim();
  for (std::size_t i = 0; i < codes.count; ++i)
    for (std::size_t s = 0; s < cb.m; ++s) {
      const std::size_t c = codes.codes[i * cb.m + s];
      if (c >= cb.ksub) throw FormatError("pq_decode: code " + std::to_string(c) + " out of range");
      const auto src = cb.centroid(s, c);
      std::copy(src.begin(), src.end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(s * sd));
    }
  return out;
}

/// Squared sub-distances from one query to every centroid: table[s * ksub + c].
inline std::vector<float> adc_table(const PqCodebook& cb, std::span<const float> query) {
  check_dim(cb, query.size(), "adc");
  const std::size_t sd = cb.sub_dim();
  std::vector<float> table(cb.m * cb.ksub);
  for (std::size_t s = 0; s < cb.m; ++s)
    for (std::size_t c = 0; c < cb.ksub; ++c) table[s * cb.ksub + c] = l2_sqr(query.subspan(s * sd, sd), cb.centroid(s, c));
  return table;
}

inline float adc_distance(std::span<const float> table, std::size_t ksub, std::span<const std::uint8_t> code) {
  float acc = 0.0f;
  for (std::size_t s = 0; s < code.size(); ++s) acc += table[s * ksub + code[s]];
  return acc;
}

/// Exhaustive ADC scan; distances reported as Euclidean (square-rooted).
inline void adc_search(const PqCodebook& cb, const PqCodes& codes, std::span<const float> query, std::size_t k,
                       std::span<std::int32_t> ids, std::span<float> dists = {}) {
  const auto table = adc_table(cb, query);
  TopK top(k);
  for (std::size_t i = 0; i < codes.count; ++i) top.push(adc_distance(table, cb.ksub, codes.row(i)), static_cast<std::int64_t>(i));
  top.write(ids, dists, true);
}

// ---------------------------------------------------------------- IVFADC

struct IvfIndex {
  VectorDataset coarse;  // nlist x dim
  PqCodebook codebook;
  std::vector<std::vector<std::uint32_t>> list_ids;
  std::vector<std::vector<std::uint8_t>> list_codes;  // m bytes per entry

  std::size_t nlist() const { return coarse.count(); }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : list_ids) n += l.size();
    return n;
  }
};

struct PqConfig {
  std::size_t m = 8;
  std::size_t iters = kDefaultKMeansIters;
};

/// Coarse k-means partition; every list stores PQ codes of the raw vectors.
inline IvfIndex ivf_build(const VectorDataset& data, std::size_t nlist, const PqConfig& pq, std::uint64_t seed = 0) {
  if (nlist == 0 || nlist > data.count())
    throw ConfigError("ivf_build: nlist must be in [1, " + std::to_string(data.count()) + "], got " + std::to_string(nlist));
  IvfIndex index;
  auto km = kmeans(data, nlist, pq.iters, seed);
  index.coarse = std::move(km.centroids);
  index.codebook = pq_train(data, pq.m, pq.iters, seed + 1);
  const auto codes = pq_encode(index.codebook, data);
  index.list_ids.resize(nlist);
  index.list_codes.resize(nlist);
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto list = detail::nearest(data.row(i), index.coarse).first;
    index.list_ids[list].push_back(static_cast<std::uint32_t>(i));
    const auto code = codes.row(i);
    index.list_codes[list].insert(index.list_codes[list].end(), code.begin(), code.end());
  }
  return index;
}

/// Scans the nprobe lists nearest to the query (lower list id on ties).
inline void ivf_search(const IvfIndex& index, std::span<const float> query, std::size_t k, std::size_t nprobe,
                       std::span<std::int32_t> ids, std::span<float> dists = {}) {
  if (nprobe == 0 || nprobe > index.nlist())
    throw ConfigError("ivf_search: nprobe must be in [1, " + std::to_string(index.nlist()) + "], got " +
                      std::to_string(nprobe));
  const auto table = adc_table(index.codebook, query);
  TopK lists(nprobe);
  for (std::size_t l = 0; l < index.nlist(); ++l) lists.push(l2_sqr(query, index.coarse.row(l)), static_cast<std::int64_t>(l));
  const std::size_t m = index.codebook.m;
  TopK top(k);
  for (const auto& probe : lists.take_sorted()) {
    const auto& idv = index.list_ids[static_cast<std::size_t>(probe.id)];
    const auto& codes = index.list_codes[static_cast<std::size_t>(probe.id)];
    for (std::size_t j = 0; j < idv.size(); ++j)
      top.push(adc_distance(table, index.codebook.ksub, std::span<const std::uint8_t>(codes.data() + j * m, m)), idv[j]);
  }
  top.write(ids, dists, true);
}

// ---------------------------------------------------------------- SQ8

struct SqParams {
  std::vector<float> min;
  std::vector<float> max;

  std::size_t dim() const { return min.size(); }
  /// Width of one quantization step in dimension d (0 for constant dimensions).
  double step(std::size_t d) const { return (static_cast<double>(max[d]) - min[d]) / 255.0; }
  friend bool operator==(const SqParams&, const SqParams&) = default;
};

/// Byte matrix, one byte per dimension.
struct SqCodes {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<std::uint8_t> codes;

  std::span<const std::uint8_t> row(std::size_t i) const { return {codes.data() + i * dim, dim}; }
  friend bool operator==(const SqCodes&, const SqCodes&) = default;
};

inline SqParams sq_train(const VectorDataset& data) {
  if (data.empty()) throw ConfigError("sq_train: empty training set");
  SqParams p;
  p.min.assign(data.row(0).begin(), data.row(0).end());
  p.max = p.min;
  for (std::size_t i = 1; i < data.count(); ++i) {
    const auto r = data.row(i);
    for (std::size_t d = 0; d < data.dim(); ++d) {
      p.min[d] = std::min(p.min[d], r[d]);
      p.max[d] = std::max(p.max[d], r[d]);
    }
  }
  return p;
}

/// Affine map of [min, max] onto [0, 255], round to nearest, clamped.
inline std::uint8_t sq_encode_value(const SqParams& p, std::size_t d, float x) {
  const double range = static_cast<double>(p.max[d]) - p.min[d];
  if (!(range > 0.0)) return 0;
  const double q = std::nearbyint((static_cast<double>(x) - p.min[d]) * (255.0 / range));
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline SqCodes sq_encode(const SqParams& p, const VectorDataset& data) {
  if (!data.empty() && data.dim() != p.dim())
    throw ShapeError("sq_encode: vector dim " + std::to_string(data.dim()) + " != params dim " + std::to_string(p.dim()));
  SqCodes out{data.count(), p.dim(), std::vector<std::uint8_t>(data.count() * p.dim())};
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto r = data.row(i);
    for (std::size_t d = 0; d < p.dim(); ++d) out.codes[i * p.dim() + d] = sq_encode_value(p, d, r[d]);
  }
  return out;
}

inline VectorDataset sq_decode(const SqParams& p, const SqCodes& codes) {
  VectorDataset out(codes.count, codes.count == 0 ? 0 : p.dim());
  for (std::size_t i = 0; i < codes.count; ++i)
    for (std::size_t d = 0; d < p.dim(); ++d)
      out.row(i)[d] = static_cast<float>(p.min[d] + p.step(d) * codes.codes[i * p.dim() + d]);
  return out;
}

/// Per-dimension squared step widths, the weights of the quantized-domain metric.
inline std::vector<float> sq_weights(const SqParams& p) {
  std::vector<float> w(p.dim());
  for (std::size_t d = 0; d < p.dim(); ++d) w[d] = static_cast<float>(p.step(d) * p.step(d));
  return w;
}

/// Squared distance between two coded vectors: integer differences widened
/// to 32 bits, weighted by the squared step of each dimension.
inline float sq_distance(std::span<const float> weights, std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  float acc = 0.0f;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const std::int32_t diff = static_cast<std::int16_t>(a[d]) - static_cast<std::int16_t>(b[d]);
    acc += weights[d] * static_cast<float>(diff * diff);
  }
  return acc;
}

inline float sq_distance(const SqParams& p, std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  return sq_distance(sq_weights(p), a, b);
}

/// Exhaustive scan in the quantized domain; the query is coded with the same params.
inline void sq_search(const SqParams& p, const SqCodes& base, std::span<const std::uint8_t> query, std::size_t k,
                      std::span<std::int32_t> ids, std::span<float> dists = {}) {
  if (query.size() != p.dim())
    throw ShapeError("sq_search: query dim " + std::to_string(query.size()) + " != params dim " + std::to_string(p.dim()));
  const auto w = sq_weights(p);
  TopK top(k);
  for (std::size_t i = 0; i < base.count; ++i) top.push(sq_distance(w, query, base.row(i)), static_cast<std::int64_t>(i));
  top.write(ids, dists, true);
}

// ---------------------------------------------------------------- persistence

namespace detail {

inline void put_codebook(BinaryWriter& w, const PqCodebook& cb) {
  w.put<std::uint64_t>(cb.dim);
  w.put<std::uint64_t>(cb.m);
  w.put<std::uint64_t>(cb.ksub);
  w.put_span(std::span<const float>(cb.centroids));
}

inline PqCodebook get_codebook(BinaryReader& r, const std::string& what) {
  PqCodebook cb;
  cb.dim = r.get<std::uint64_t>();
  cb.m = r.get<std::uint64_t>();
  cb.ksub = r.get<std::uint64_t>();
  if (cb.m == 0 || cb.dim == 0 || cb.dim % cb.m != 0 || cb.ksub == 0 || cb.ksub > kPqMaxCentroids)
    throw FormatError(what + ": invalid codebook geometry");
  cb.centroids = r.get_vector<float>(cb.m * cb.ksub * cb.sub_dim());
  return cb;
}

inline void check_codes(const std::vector<std::uint8_t>& codes, std::size_t ksub, const std::string& what) {
  for (auto c : codes)
    if (c >= ksub) throw FormatError(what + ": code " + std::to_string(c) + " exceeds codebook size");
}

inline void expect_header(BinaryReader& r, std::string_view magic, const std::string& what) {
  r.expect_magic(magic);
  if (const auto v = r.get<std::uint32_t>(); v != 1) throw FormatError(what + ": unsupported version " + std::to_string(v));
}

inline void expect_end(const BinaryReader& r, const std::string& what) {
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
}

}  // namespace detail

/// Codebook plus the codes of an indexed set.
struct PqIndex {
  PqCodebook codebook;
  PqCodes codes;
};

inline std::string serialize_pq(const PqIndex& idx) {
  BinaryWriter w;
  w.put_bytes("PQC1");
  w.put<std::uint32_t>(1);
  detail::put_codebook(w, idx.codebook);
  w.put<std::uint64_t>(idx.codes.count);
  w.put_span(std::span<const std::uint8_t>(idx.codes.codes));
  w.seal();
  return w.bytes();
}

inline PqIndex parse_pq(std::string_view bytes, const std::string& what = "pq index") {
  BinaryReader r(verify_sealed(bytes, what), what);
  detail::expect_header(r, "PQC1", what);
  PqIndex idx;
  idx.codebook = detail::get_codebook(r, what);
  idx.codes.m = idx.codebook.m;
  idx.codes.count = r.get<std::uint64_t>();
  idx.codes.codes = r.get_vector<std::uint8_t>(idx.codes.count * idx.codes.m);
  detail::check_codes(idx.codes.codes, idx.codebook.ksub, what);
  detail::expect_end(r, what);
  return idx;
}

inline std::string serialize_ivf(const IvfIndex& idx) {
  BinaryWriter w;
  w.put_bytes("IVF1");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(idx.nlist());
  w.put<std::uint64_t>(idx.coarse.dim());
  w.put_span(std::span<const float>(idx.coarse.values()));
  detail::put_codebook(w, idx.codebook);
  for (std::size_t l = 0; l < idx.nlist(); ++l) {
    w.put<std::uint64_t>(idx.list_ids[l].size());
    w.put_span(std::span<const std::uint32_t>(idx.list_ids[l]));
    w.put_span(std::span<const std::uint8_t>(idx.list_codes[l]));
  }
  w.seal();
  return w.bytes();
}

inline IvfIndex parse_ivf(std::string_view bytes, const std::string& what = "ivf index") {
  BinaryReader r(verify_sealed(bytes, what), what);
  detail::expect_header(r, "IVF1", what);
  IvfIndex idx;
  const auto nlist = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  if (nlist == 0 || dim == 0) throw FormatError(what + ": empty coarse quantizer");
  idx.coarse = VectorDataset(nlist, dim, r.get_vector<float>(nlist * dim));
  idx.codebook = detail::get_codebook(r, what);
  if (idx.codebook.dim != dim) throw FormatError(what + ": codebook dim differs from coarse dim");
  idx.list_ids.resize(nlist);
  idx.list_codes.resize(nlist);
  for (std::size_t l = 0; l < nlist; ++l) {
    const auto n = r.get<std::uint64_t>();
    idx.list_ids[l] = r.get_vector<std::uint32_t>(n);
    idx.list_codes[l] = r.get_vector<std::uint8_t>(n * idx.codebook.m);
    detail::check_codes(idx.list_codes[l], idx.codebook.ksub, what);
  }
  detail::expect_end(r, what);
  return idx;
}

/// Quantizer parameters plus the codes of an indexed set.
struct SqIndex {
  SqParams params;
  SqCodes codes;
};

inline std::string serialize_sq(const SqIndex& idx) {
  BinaryWriter w;
  w.put_bytes("SQP1");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(idx.params.dim());
  w.put_span(std::span<const float>(idx.params.min));
  w.put_span(std::span<const float>(idx.params.max));
  w.put<std::uint64_t>(idx.codes.count);
  w.put_span(std::span<const std::uint8_t>(idx.codes.codes));
  w.seal();
  return w.bytes();
}

inline SqIndex parse_sq(std::string_view bytes, const std::string& what = "sq index") {
  BinaryReader r(verify_sealed(bytes, what), what);
  detail::expect_header(r, "SQP1", what);
  SqIndex idx;
  const auto dim = r.get<std::uint64_t>();
  idx.params.min = r.get_vector<float>(dim);
  idx.params.max = r.get_vector<float>(dim);
  for (std::size_t d = 0; d < dim; ++d)
    if (!(idx.params.max[d] >= idx.params.min[d])) throw FormatError(what + ": max < min in dimension " + std::to_string(d));
  idx.codes.dim = dim;
  idx.codes.count = r.get<std::uint64_t>();
  idx.codes.codes = r.get_vector<std::uint8_t>(idx.codes.count * dim);
  detail::expect_end(r, what);
  return idx;
}

}  // namespace ccst
