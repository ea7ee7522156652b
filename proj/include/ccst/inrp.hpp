#pragma once

// Inhomogeneous neighborhood-relationship-preserving loss: a weighted mean of
// |compressed distance - original distance| over all ordered pairs, where
// the weight decays logarithmically with original distance relative to a
// dataset-wide `boundary` and is clipped to [beta, alpha].

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"
#include "ccst/tensor.hpp"

#include <Eigen/Core>

namespace ccst {

struct LossConfig {
  double alpha = 2.0;
  double beta = 0.01;
  double boundary = 1.0;
  // Penalise the squared gap instead of its magnitude.
  bool squared_gap = false;

  void validate() const {
    if (!(beta > 0.0 && beta < alpha)) throw ConfigError("loss config: need 0 < beta < alpha");
    if (!(boundary > 0.0) || !std::isfinite(boundary)) throw ConfigError("loss config: boundary must be positive");
  }
};

inline constexpr std::size_t kDefaultBoundaryPairs = 1'000'000;
inline constexpr std::size_t kExactBoundaryLimit = 2000;

/// Mean Euclidean distance between distinct points. Exact over all pairs
/// when count <= 2000, otherwise over `num_pairs` uniformly sampled pairs.
inline double estimate_boundary(const VectorDataset& data, std::size_t num_pairs = kDefaultBoundaryPairs,
                                std::uint64_t seed = 0) {
  const std::size_t n = data.count();
  if (n < 2) throw ConfigError("estimate_boundary: need at least 2 points, got " + std::to_string(n));
  if (num_pairs == 0) throw ConfigError("estimate_boundary: num_pairs must be >= 1");
  double total = 0.0;
  std::size_t pairs = 0;
  if (n <= kExactBoundaryLimit) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) total += std::sqrt(l2_sqr_f64(data.row(i), data.row(j)));
    pairs = n * (n - 1) / 2;
  } else {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::uniform_int_distribution<std::size_t> other(0, n - 2);
    for (std::size_t p = 0; p < num_pairs; ++p) {
      const std::size_t i = pick(rng);
      std::size_t j = other(rng);
      if (j >= i) ++j;
      total += std::sqrt(l2_sqr_f64(data.row(i), data.row(j)));
    }
    pairs = num_pairs;
  }
  const double boundary = total / static_cast<double>(pairs);
  if (!(boundary > 0.0))
    throw ConfigError("estimate_boundary: degenerate dataset, all sampled points coincide (boundary = 0)");
  return boundary;
}

/// min(alpha, max(beta, -ln(d / boundary))); d = 0 maps to alpha.
inline double pair_weight(double distance, const LossConfig& cfg) {
  if (distance <= 0.0) return cfg.alpha;
  return std::min(cfg.alpha, std::max(cfg.beta, -std::log(distance / cfg.boundary)));
}

namespace detail {

template <class U>
double row_distance(std::span<const U> x, std::size_t dim, std::size_t i, std::size_t j) {
  double acc = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    const double d = static_cast<double>(x[i * dim + c]) - static_cast<double>(x[j * dim + c]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

/// Loss value over one batch, evaluated in double. `original` is B x d_in and
/// `compressed` B x d_out, both row-major.
template <class U, class V>
double batch_inrp_loss(std::span<const U> original, std::size_t d_in, std::span<const V> compressed,
                       std::size_t d_out, const LossConfig& cfg) {
  const std::size_t B = original.size() / d_in;
  if (B * d_in != original.size() || B * d_out != compressed.size())
    throw ShapeError("batch_inrp_loss: batch sizes differ (" + std::to_string(B) + " original rows, " +
                     std::to_string(compressed.size() / std::max<std::size_t>(1, d_out)) + " compressed rows)");
  if (B < 2) throw ShapeError("batch_inrp_loss: batch must hold at least 2 rows");
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j) {
      if (i == j) continue;
      const double d = detail::row_distance(original, d_in, i, j);
      const double gap = detail::row_distance(compressed, d_out, i, j) - d;
      total += pair_weight(d, cfg) * (cfg.squared_gap ? gap * gap : std::abs(gap));
    }
  return total / static_cast<double>(B * B);
}

inline double batch_inrp_loss(const VectorDataset& original, const VectorDataset& compressed, const LossConfig& cfg) {
  if (original.count() != compressed.count())
    throw ShapeError("batch_inrp_loss: " + std::to_string(original.count()) + " original vs " +
                     std::to_string(compressed.count()) + " compressed rows");
  return batch_inrp_loss(std::span<const float>(original.values()), original.dim(),
                         std::span<const float>(compressed.values()), compressed.dim(), cfg);
}

/// Differentiable loss node. Weights and original distances are constants
/// computed from `original`; the gradient flows into `compressed` only.
/// Pairs whose compressed points coincide contribute no gradient.
template <class T>
ad::Var<T> inrp_loss(ad::Var<T> compressed, const ad::Tensor<T>& original, const LossConfig& cfg) {
  const auto& cv = compressed.value();
  if (cv.rank() != 2 || original.rank() != 2 || cv.shape[0] != original.shape[0])
    throw ShapeError("inrp_loss: shape mismatch " + shape_string(original.shape) + " vs " + shape_string(cv.shape));
  const std::size_t B = cv.shape[0], d_in = original.shape[1], d_out = cv.shape[1];
  if (B < 2) throw ShapeError("inrp_loss: batch must hold at least 2 rows");

  // Upper-triangle pair table; each unordered pair stands for both orders.
  const std::size_t pairs = B * (B - 1) / 2;
  std::vector<double> coeff(pairs);
  std::vector<T> dist(pairs);
  const std::span<const T> comp(cv.data);
  const std::span<const T> orig(original.data);
  double total = 0.0;
  std::size_t p = 0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = i + 1; j < B; ++j, ++p) {
      const double d = detail::row_distance(orig, d_in, i, j);
      const double w = pair_weight(d, cfg);
      T acc = T(0);
      for (std::size_t c = 0; c < d_out; ++c) {
        const T diff = comp[i * d_out + c] - comp[j * d_out + c];
        acc += diff * diff;
      }
      dist[p] = std::sqrt(acc);
      const double gap = static_cast<double>(dist[p]) - d;
      total += 2.0 * w * (cfg.squared_gap ? gap * gap : std::abs(gap));
      // d loss / d compressed-distance for this unordered pair
      const double slope = cfg.squared_gap ? 2.0 * gap : (gap > 0.0 ? 1.0 : (gap < 0.0 ? -1.0 : 0.0));
      coeff[p] = 2.0 * w * slope / static_cast<double>(B * B);
    }
  const double value = total / static_cast<double>(B * B);

  const std::size_t ic = compressed.id();
  return compressed.tape().record(
      ad::Tensor<T>(ad::Shape{1}, std::vector<T>{static_cast<T>(value)}), {ic},
      [ic, B, d_out, coeff = std::move(coeff), dist = std::move(dist)](ad::Tape<T>& tp, std::size_t self) {
        // grad_i = sum_j K_ij (f_i - f_j) with K symmetric: rowsum(K) f_i - (K f)_i.
        using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const T g = tp.grad(self)[0];
        const auto Bi = static_cast<Eigen::Index>(B), Di = static_cast<Eigen::Index>(d_out);
        Mat K = Mat::Zero(Bi, Bi);
        std::size_t p = 0;
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t j = i + 1; j < B; ++j, ++p) {
            if (dist[p] == T(0) || coeff[p] == 0.0) continue;
            const T k = g * static_cast<T>(coeff[p]) / dist[p];
            K(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = k;
            K(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = k;
          }
        Eigen::Map<const Mat> F(tp.value(ic).data.data(), Bi, Di);
        Eigen::Map<Mat> dF(tp.grad(ic).data(), Bi, Di);
        dF.noalias() += K.rowwise().sum().asDiagonal() * F;
        dF.noalias() -= K * F;
      },
      "inrp_loss");
}

/// Mean of w * |compressed distance - original distance| over explicit pairs.
inline double weighted_distortion(const VectorDataset& original, const VectorDataset& compressed,
                                  std::span<const std::pair<std::size_t, std::size_t>> pairs, const LossConfig& cfg) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (auto [i, j] : pairs) {
    const double d = std::sqrt(l2_sqr_f64(original.row(i), original.row(j)));
    const double c = std::sqrt(l2_sqr_f64(compressed.row(i), compressed.row(j)));
    total += pair_weight(d, cfg) * std::abs(c - d);
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace ccst
