#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ccst/dataio.hpp"
#include "ccst/error.hpp"

namespace ccst {

/// Gaussian mixture whose within-cluster variation lives on one shared
/// low-dimensional subspace, plus isotropic noise:
///   x = center[c] + A z + noise,  z ~ N(0, within^2 I_latent).
/// A has latent_dim random unit-norm columns in R^dim.
struct MixtureConfig {
  std::size_t count = 10000;
  std::size_t dim = 128;
  std::size_t clusters = 64;
  std::size_t latent_dim = 24;
  double center_spread = 1.0;  // per-coordinate std of cluster centres
  double within_spread = 1.0;  // per-latent-coordinate std inside a cluster
  double noise = 0.1;          // per-coordinate isotropic noise std
  std::uint64_t seed = 0;

  void validate() const {
    if (dim == 0 || clusters == 0 || latent_dim == 0) throw ConfigError("mixture: dim, clusters and latent_dim must be >= 1");
    if (center_spread < 0 || within_spread < 0 || noise < 0) throw ConfigError("mixture: spreads must be >= 0");
  }
};

/// Row i belongs to cluster i mod clusters.
inline VectorDataset make_mixture(const MixtureConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> centers(cfg.clusters * cfg.dim);
  for (auto& v : centers) v = cfg.center_spread * gauss(rng);
  std::vector<double> basis(cfg.dim * cfg.latent_dim);  // [dim x latent]
  for (std::size_t l = 0; l < cfg.latent_dim; ++l) {
    double norm = 0.0;
    for (std::size_t d = 0; d < cfg.dim; ++d) {
      const double v = gauss(rng);
      basis[d * cfg.latent_dim + l] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < cfg.dim; ++d) basis[d * cfg.latent_dim + l] /= norm;
  }

  VectorDataset out(cfg.count, cfg.count == 0 ? 0 : cfg.dim);
  std::vector<double> z(cfg.latent_dim);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const std::size_t c = i % cfg.clusters;
    for (auto& v : z) v = cfg.within_spread * gauss(rng);
    auto row = out.row(i);
    for (std::size_t d = 0; d < cfg.dim; ++d) {
      double v = centers[c * cfg.dim + d] + cfg.noise * gauss(rng);
      for (std::size_t l = 0; l < cfg.latent_dim; ++l) v += basis[d * cfg.latent_dim + l] * z[l];
      row[d] = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace ccst
