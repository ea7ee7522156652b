#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"
#include "ccst/inrp.hpp"
#include "ccst/model.hpp"
#include "ccst/tensor.hpp"

namespace ccst {

struct TrainConfig {
  std::size_t epochs = 2400;
  std::size_t batch_size = 1024;
  double lr0 = 1e-4;
  double poly_power = 0.9;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables

  void validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
    if (!(lr0 > 0.0)) throw ConfigError("train config: lr0 must be positive");
    if (poly_power < 0.0) throw ConfigError("train config: poly_power must be non-negative");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("train config: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train config: adam_eps must be positive");
  }
};

/// lr0 * (1 - epoch/epochs)^power, for epoch in [0, epochs).
inline double poly_lr(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs)
    throw ConfigError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  const double progress = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
  return cfg.lr0 * std::pow(1.0 - progress, cfg.poly_power);
}

template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

/// One AdamW update. Weight decay is decoupled: p <- p - lr*wd*p, then the
/// bias-corrected Adam step p <- p - lr * m_hat / (sqrt(v_hat) + eps).
template <class T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
                double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size())
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->numel(), T(0));
      state.second_moment.emplace_back(p->numel(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw_step: optimizer state size mismatch");
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k]->data;
    const auto& g = grads[k].data;
    if (p.size() != g.size() || state.first_moment[k].size() != p.size())
      throw ShapeError("adamw_step: shape mismatch for parameter " + std::to_string(k) + ": " +
                       shape_string(params[k]->shape) + " vs gradient " + shape_string(grads[k].shape));
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
      p[i] = static_cast<T>(decay * p[i] - lr * update);
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

struct TrainReport {
  double boundary = 0.0;
  std::vector<EpochRecord> epochs;
  double final_eval_loss = 0.0;

  /// Line-delimited plain text: two `#` header records then one
  /// `epoch lr mean_loss` line per epoch.
  std::string to_text() const {
    std::string out;
    char line[128];
    std::snprintf(line, sizeof line, "# boundary %.17g\n", boundary);
    out += line;
    std::snprintf(line, sizeof line, "# final_eval_loss %.17g\n", final_eval_loss);
    out += line;
    for (const auto& e : epochs) {
      std::snprintf(line, sizeof line, "%zu %.17g %.17g\n", e.epoch, e.lr, e.mean_loss);
      out += line;
    }
    return out;
  }
};

inline Tensor<float> batch_tensor(const VectorDataset& data, std::span<const std::size_t> rows) {
  Tensor<float> t(Shape{rows.size(), data.dim()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = data.row(rows[r]);
    std::copy(src.begin(), src.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * data.dim()));
  }
  return t;
}

/// Row i of the result is f(x_i). The model must be in infer mode, which
/// makes rows independent of how the dataset is partitioned into batches.
inline VectorDataset compress_dataset(const ModelState<float>& model, const VectorDataset& data,
                                      std::size_t batch_size = 1024) {
  if (model.mode != Mode::infer) throw ConfigError("compress_dataset: model must be in infer mode");
  if (batch_size == 0) throw ConfigError("compress_dataset: batch_size must be >= 1");
  const std::size_t d_out = model.config.d_out;
  if (data.empty()) return VectorDataset(0, d_out);
  if (data.dim() != model.config.d_in)
    throw ShapeError("compress_dataset: dataset dim " + std::to_string(data.dim()) + " != model d_in " +
                     std::to_string(model.config.d_in));
  VectorDataset out(data.count(), d_out);
  const std::size_t batches = (data.count() + batch_size - 1) / batch_size;
  parallel_for(batches, [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t lo = b * batch_size, hi = std::min(data.count(), lo + batch_size);
      Tensor<float> x(Shape{hi - lo, data.dim()},
                      std::vector<float>(data.values().begin() + static_cast<std::ptrdiff_t>(lo * data.dim()),
                                         data.values().begin() + static_cast<std::ptrdiff_t>(hi * data.dim())));
      const auto y = infer(model, x);
      std::copy(y.data.begin(), y.data.end(), out.values().begin() + static_cast<std::ptrdiff_t>(lo * d_out));
    }
  });
  return out;
}

/// Mean of batch_inrp_loss (in double) over consecutive full batches of the
/// infer-mode compressed dataset, in dataset order.
inline double evaluate_loss(const ModelState<float>& model, const VectorDataset& data, const LossConfig& loss,
                            std::size_t batch_size) {
  const auto compressed = compress_dataset(model, data, batch_size);
  const std::size_t batches = data.count() / batch_size;
  if (batches == 0) throw ConfigError("evaluate_loss: dataset smaller than one batch");
  double total = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t lo = b * batch_size;
    total += batch_inrp_loss(
        std::span<const float>(data.values()).subspan(lo * data.dim(), batch_size * data.dim()), data.dim(),
        std::span<const float>(compressed.values()).subspan(lo * compressed.dim(), batch_size * compressed.dim()),
        compressed.dim(), loss);
  }
  return total / static_cast<double>(batches);
}

struct TrainResult {
  ModelState<float> model;
  TrainReport report;
};

using CheckpointHook = std::function<void(std::size_t epoch, const ModelState<float>& model)>;

/// Mini-batch training on `data` itself. Each epoch reshuffles with the
/// seeded generator and drops the incomplete trailing batch. The returned
/// model is switched to infer mode.
inline TrainResult train(ModelState<float> model, const VectorDataset& data, const LossConfig& loss,
                         const TrainConfig& cfg, const CheckpointHook& on_checkpoint = {}) {
  cfg.validate();
  loss.validate();
  model.config.validate();
  if (data.dim() != model.config.d_in)
    throw ShapeError("train: dataset dim " + std::to_string(data.dim()) + " != model d_in " +
                     std::to_string(model.config.d_in));
  if (data.count() < cfg.batch_size)
    throw ConfigError("train: dataset has " + std::to_string(data.count()) + " rows, fewer than batch_size " +
                      std::to_string(cfg.batch_size));

  TrainResult result{std::move(model), {}};
  auto& m = result.model;
  m.mode = Mode::train;
  result.report.boundary = loss.boundary;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  OptimizerState<float> opt;
  const auto param_ptrs = m.param_tensors();
  const std::size_t batches = data.count() / cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = poly_lr(epoch, cfg);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto rows = std::span<const std::size_t>(order).subspan(b * cfg.batch_size, cfg.batch_size);
      const auto x = batch_tensor(data, rows);
      std::vector<Tensor<float>> grads;
      try {
        ad::Tape<float> tape;
        const auto params = bind_parameters(tape, m);
        const auto out = forward(m, std::span<const Var<float>>(params), tape.constant(x));
        const auto value = inrp_loss(out, x, loss);
        tape.backward(value);
        epoch_loss += value.value().data[0];
        grads.reserve(params.size());
        for (const auto& p : params) grads.push_back(tape.gradient(p));
        for (const auto& g : grads)
          for (float v : g.data)
            if (!std::isfinite(v)) throw NumericError("non-finite gradient");
      } catch (const NumericError& e) {
        throw NumericError("train: numeric failure at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b) + ": " + e.what());
      }
      adamw_step(std::span<Tensor<float>* const>(param_ptrs), std::span<const Tensor<float>>(grads), opt, lr, cfg);
    }
    result.report.epochs.push_back({epoch, lr, epoch_loss / static_cast<double>(batches)});
    if (on_checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      auto snapshot = m;
      snapshot.mode = Mode::infer;
      on_checkpoint(epoch, snapshot);
    }
  }
  m.mode = Mode::infer;
  result.report.final_eval_loss = evaluate_loss(m, data, loss, cfg.batch_size);
  return result;
}

/// Up to `max_pairs` distinct pairs (i < j) with original distance below
/// boundary / e, found by scanning seeded random pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_close_pairs(const VectorDataset& data, double boundary,
                                                                           std::size_t max_pairs, std::uint64_t seed,
                                                                           std::size_t max_trials = 10'000'000) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (data.count() < 2) return out;
  const double limit = boundary * std::exp(-1.0);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.count() - 1);
  for (std::size_t t = 0; t < max_trials && out.size() < max_pairs; ++t) {
    std::size_t i = pick(rng), j = pick(rng);
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    if (std::sqrt(l2_sqr_f64(data.row(i), data.row(j))) < limit) out.emplace_back(i, j);
  }
  return out;
}

}  // namespace ccst
