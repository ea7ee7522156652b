#pragma once

// The compressor network: a bank of sparse random projections feeding staged
// transformer encoders over [compression token, p^1(x), ..., p^n(x)], and a
// compression head that seeds the compression token, refreshes it between
// stages and reads it out.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/error.hpp"
#include "ccst/tensor.hpp"

namespace ccst {

using ad::Mode;
using ad::Shape;
using ad::Tensor;
using ad::Var;

struct ModelConfig {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t n_projections = 8;
  std::size_t stages = 2;
  std::vector<std::size_t> encoders_per_stage{2, 2};
  std::size_t heads = 4;
  std::size_t qk_dim = 0;  // 0 selects value_dim() / 2
  std::size_t mlp_expansion = 2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  std::size_t value_dim() const { return heads == 0 ? 0 : d_out / heads; }
  std::size_t query_dim() const { return qk_dim != 0 ? qk_dim : std::max<std::size_t>(1, value_dim() / 2); }
  std::size_t encoder_count() const {
    std::size_t n = 0;
    for (auto e : encoders_per_stage) n += e;
    return n;
  }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (d_in == 0 || d_out == 0) fail("d_in and d_out must be positive");
    if (n_projections == 0) fail("n_projections must be >= 1");
    if (stages == 0) fail("stages must be >= 1");
    if (encoders_per_stage.size() != stages)
      fail("encoders_per_stage has " + std::to_string(encoders_per_stage.size()) + " entries for " +
           std::to_string(stages) + " stages");
    for (auto e : encoders_per_stage)
      if (e == 0) fail("every stage needs at least one encoder");
    if (heads == 0 || d_out % heads != 0)
      fail("heads (" + std::to_string(heads) + ") must divide d_out (" + std::to_string(d_out) + ")");
    if (query_dim() > value_dim())
      fail("qk_dim " + std::to_string(query_dim()) + " exceeds value width " + std::to_string(value_dim()));
    if (mlp_expansion != 2) fail("mlp_expansion is fixed at 2");
    if (!(bn_eps > 0.0) || !(bn_momentum >= 0.0 && bn_momentum <= 1.0)) fail("batch-norm eps/momentum out of range");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameter trees are templated on the leaf type so the same structure holds
// stored tensors (P = Tensor<T>) and their tape variables (P = Var<T>).

template <class P>
struct LinearParams {
  P weight;  // [in, out]
  P bias;    // [out]
};

template <class P>
struct NormParams {
  P gamma;
  P beta;
};

/// linear -> ReLU -> batch norm
template <class P>
struct LinearAbnParams {
  LinearParams<P> linear;
  NormParams<P> norm;
};

template <class P>
struct HeadParams {
  P query;  // [d_out, qk_dim]
  P key;    // [d_out, qk_dim]
  P value;  // [d_out, v_dim]
};

template <class P>
struct EncoderParams {
  std::vector<HeadParams<P>> heads;
  LinearParams<P> output;  // [heads * v_dim, d_out]
  LinearAbnParams<P> mlp_expand;    // d_out -> 2 d_out
  LinearAbnParams<P> mlp_contract;  // 2 d_out -> d_out
};

template <class P>
struct ModelParams {
  std::vector<P> projections;     // n x [d_in, d_out]
  LinearAbnParams<P> compression;  // initial compression token
  LinearParams<P> linear_a;        // per-stage token refresh, d_in -> d_out
  LinearParams<P> linear_b;        // output head, d_out -> d_out
  std::vector<std::vector<EncoderParams<P>>> stages;
};

template <class P>
ModelParams<P> make_skeleton(const ModelConfig& cfg) {
  ModelParams<P> m;
  m.projections.resize(cfg.n_projections);
  m.stages.resize(cfg.stages);
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    m.stages[s].resize(cfg.encoders_per_stage[s]);
    for (auto& enc : m.stages[s]) enc.heads.resize(cfg.heads);
  }
  return m;
}

namespace detail {

template <class L, class F>
void visit_linear(L& l, const std::string& prefix, F& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

template <class L, class F>
void visit_abn(L& l, const std::string& prefix, F& f) {
  visit_linear(l.linear, prefix + ".linear", f);
  f(prefix + ".norm.gamma", l.norm.gamma);
  f(prefix + ".norm.beta", l.norm.beta);
}

}  // namespace detail

/// Visits every learnable leaf with its dotted name, in the canonical order
/// used by binding, checkpoints and the optimizer.
template <class M, class F>
void visit_params(M& m, F&& f) {
  for (std::size_t i = 0; i < m.projections.size(); ++i) f("projection." + std::to_string(i), m.projections[i]);
  detail::visit_abn(m.compression, "compression", f);
  detail::visit_linear(m.linear_a, "linear_a", f);
  detail::visit_linear(m.linear_b, "linear_b", f);
  for (std::size_t s = 0; s < m.stages.size(); ++s)
    for (std::size_t e = 0; e < m.stages[s].size(); ++e) {
      auto& enc = m.stages[s][e];
      const std::string p = "stage." + std::to_string(s) + ".encoder." + std::to_string(e);
      for (std::size_t h = 0; h < enc.heads.size(); ++h) {
        const std::string hp = p + ".head." + std::to_string(h);
        f(hp + ".query", enc.heads[h].query);
        f(hp + ".key", enc.heads[h].key);
        f(hp + ".value", enc.heads[h].value);
      }
      detail::visit_linear(enc.output, p + ".output", f);
      detail::visit_abn(enc.mlp_expand, p + ".mlp_expand", f);
      detail::visit_abn(enc.mlp_contract, p + ".mlp_contract", f);
    }
}

/// Batch-norm slots: 0 is the compression module, then (expand, contract)
/// per encoder in stage order.
inline std::size_t norm_slot_count(const ModelConfig& cfg) { return 1 + 2 * cfg.encoder_count(); }

template <class T>
struct ModelState {
  ModelConfig config;
  ModelParams<Tensor<T>> params;
  std::vector<ad::BatchNormStats<T>> norm_stats;
  Mode mode = Mode::train;

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    visit_params(params, [&](const std::string& n, const Tensor<T>&) { names.push_back(n); });
    return names;
  }

  std::vector<Tensor<T>*> param_tensors() {
    std::vector<Tensor<T>*> out;
    visit_params(params, [&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
    return out;
  }

  template <class U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.config = config;
    out.mode = mode;
    out.params = make_skeleton<Tensor<U>>(config);
    std::vector<const Tensor<T>*> src;
    visit_params(params, [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    visit_params(out.params, [&](const std::string&, Tensor<U>& t) { t = src[i++]->template cast<U>(); });
    for (const auto& s : norm_stats) {
      ad::BatchNormStats<U> u;
      u.running_mean = s.running_mean.template cast<U>();
      u.running_var = s.running_var.template cast<U>();
      out.norm_stats.push_back(std::move(u));
    }
    return out;
  }
};

namespace detail {

template <class T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(Shape{fan_in, fan_out});
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
LinearParams<Tensor<T>> init_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {xavier_uniform<T>(in, out, rng), Tensor<T>(Shape{out}, T(0))};
}

template <class T>
LinearAbnParams<Tensor<T>> init_abn(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {init_linear<T>(in, out, rng), {Tensor<T>(Shape{out}, T(1)), Tensor<T>(Shape{out}, T(0))}};
}

}  // namespace detail

/// Sparse random projection of the given shape: entries are
/// -sqrt(s/d_out), 0, +sqrt(s/d_out) with probabilities 1/2s, 1-1/s, 1/2s
/// where s = sqrt(d_in).
template <class T>
Tensor<T> sparse_random_projection(std::size_t d_in, std::size_t d_out, std::mt19937_64& rng) {
  const double sparsity = std::sqrt(static_cast<double>(d_in));
  const T magnitude = static_cast<T>(std::sqrt(sparsity / static_cast<double>(d_out)));
  const double p_nonzero = 1.0 / sparsity;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor<T> w(Shape{d_in, d_out});
  for (auto& v : w.data) {
    const double u = unit(rng);
    v = u < p_nonzero / 2 ? -magnitude : (u < p_nonzero ? magnitude : T(0));
  }
  return w;
}

/// Fresh model: the projection bank follows the sparse law above, other
/// weights are uniform in +-sqrt(6/(fan_in+fan_out)), biases 0, gamma 1.
template <class T>
ModelState<T> init_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ModelState<T> m;
  m.config = cfg;
  m.config.qk_dim = cfg.query_dim();
  m.params = make_skeleton<Tensor<T>>(cfg);
  const std::size_t d = cfg.d_out, qk = cfg.query_dim(), v = cfg.value_dim();
  for (auto& w : m.params.projections) w = sparse_random_projection<T>(cfg.d_in, d, rng);
  m.params.compression = detail::init_abn<T>(cfg.d_in, d, rng);
  m.params.linear_a = detail::init_linear<T>(cfg.d_in, d, rng);
  m.params.linear_b = detail::init_linear<T>(d, d, rng);
  for (auto& stage : m.params.stages)
    for (auto& enc : stage) {
      for (auto& h : enc.heads) {
        h.query = detail::xavier_uniform<T>(d, qk, rng);
        h.key = detail::xavier_uniform<T>(d, qk, rng);
        h.value = detail::xavier_uniform<T>(d, v, rng);
      }
      enc.output = detail::init_linear<T>(cfg.heads * v, d, rng);
      enc.mlp_expand = detail::init_abn<T>(d, cfg.mlp_expansion * d, rng);
      enc.mlp_contract = detail::init_abn<T>(cfg.mlp_expansion * d, d, rng);
    }
  m.norm_stats.emplace_back(d);
  for (std::size_t e = 0; e < cfg.encoder_count(); ++e) {
    m.norm_stats.emplace_back(cfg.mlp_expansion * d);
    m.norm_stats.emplace_back(d);
  }
  m.mode = Mode::train;
  return m;
}

/// Leaf variables for every parameter, in visit order. `trainable = false`
/// records them as constants (inference).
template <class T>
std::vector<Var<T>> bind_parameters(ad::Tape<T>& tape, const ModelState<T>& model, bool trainable = true) {
  std::vector<Var<T>> vars;
  visit_params(model.params, [&](const std::string&, const Tensor<T>& t) {
    vars.push_back(trainable ? tape.variable(t) : tape.constant(t));
  });
  return vars;
}

template <class T>
ModelParams<Var<T>> unflatten(const ModelConfig& cfg, std::span<const Var<T>> flat) {
  auto tree = make_skeleton<Var<T>>(cfg);
  std::size_t i = 0;
  visit_params(tree, [&](const std::string& name, Var<T>& v) {
    if (i >= flat.size()) throw ShapeError("parameter binding too short at '" + name + "'");
    v = flat[i++];
  });
  if (i != flat.size()) throw ShapeError("parameter binding has " + std::to_string(flat.size()) +
                                         " entries, model needs " + std::to_string(i));
  return tree;
}

struct ForwardOptions {
  bool update_running_stats = true;
  // When set, receives every attention-weight tensor [B, tokens, tokens]
  // in (stage, encoder, head) order.
  std::vector<std::size_t>* attention_ids = nullptr;
};

template <class T>
Var<T> linear(Var<T> x, const LinearParams<Var<T>>& p) {
  return ad::add_bias(ad::matmul(x, p.weight), p.bias);
}

template <class T>
Var<T> linear_abn(Var<T> x, const LinearAbnParams<Var<T>>& p, ad::BatchNormStats<T>& stats, Mode mode,
                  const ad::BatchNormOptions& bn) {
  return ad::batchnorm(ad::relu(linear(x, p.linear)), p.norm.gamma, p.norm.beta, stats, mode, bn);
}

/// [B, d_in] -> [B, n, d_out], token i = x W^i.
template <class T>
Var<T> project_tokens(Var<T> x, std::span<const Var<T>> projections) {
  std::vector<Var<T>> tokens;
  tokens.reserve(projections.size());
  for (const auto& w : projections) tokens.push_back(ad::matmul(x, w));
  return ad::concat_tokens(std::span<const Var<T>>(tokens));
}

/// Multi-head self attention with residual: tokens + out(concat_i
/// softmax(X Wq_i (X Wk_i)^T / sqrt(qk_dim)) X Wv_i).
template <class T>
Var<T> attention(Var<T> tokens, const EncoderParams<Var<T>>& enc, std::size_t qk_dim,
                 std::vector<std::size_t>* attention_ids = nullptr) {
  const T inv_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(qk_dim)));
  std::vector<Var<T>> heads;
  heads.reserve(enc.heads.size());
  for (const auto& h : enc.heads) {
    auto q = ad::matmul(tokens, h.query);
    auto k = ad::matmul(tokens, h.key);
    auto v = ad::matmul(tokens, h.value);
    auto weights = ad::softmax_rows(ad::scale(ad::batched_matmul(q, k, /*transpose_b=*/true), inv_scale));
    if (attention_ids) attention_ids->push_back(weights.id());
    heads.push_back(ad::batched_matmul(weights, v, /*transpose_b=*/false));
  }
  auto mixed = linear(ad::concat_features(std::span<const Var<T>>(heads)), enc.output);
  return ad::add(tokens, mixed);
}

template <class T>
Var<T> encoder(Var<T> tokens, const EncoderParams<Var<T>>& enc, std::size_t qk_dim, ad::BatchNormStats<T>& expand_stats,
               ad::BatchNormStats<T>& contract_stats, Mode mode, const ad::BatchNormOptions& bn,
               std::vector<std::size_t>* attention_ids = nullptr) {
  auto x = attention(tokens, enc, qk_dim, attention_ids);
  auto hidden = linear_abn(x, enc.mlp_expand, expand_stats, mode, bn);
  auto back = linear_abn(hidden, enc.mlp_contract, contract_stats, mode, bn);
  return ad::add(x, back);
}

/// f(x) for a batch [B, d_in] -> [B, d_out].
template <class T>
Var<T> forward(const ModelConfig& cfg, const ModelParams<Var<T>>& p, std::vector<ad::BatchNormStats<T>>& stats, Var<T> x,
               Mode mode, const ForwardOptions& opt = {}) {
  const auto& xs = x.shape();
  if (xs.size() != 2 || xs[1] != cfg.d_in)
    throw ShapeError("forward: expected batch [B, " + std::to_string(cfg.d_in) + "], got " + shape_string(xs));
  if (mode == Mode::train && xs[0] < 2)
    throw ShapeError("forward: train mode needs batch >= 2, got " + std::to_string(xs[0]));
  if (stats.size() != norm_slot_count(cfg)) throw ShapeError("forward: batch-norm state does not match config");
  const ad::BatchNormOptions bn{cfg.bn_eps, cfg.bn_momentum, opt.update_running_stats};

  auto token0 = linear_abn(x, p.compression, stats[0], mode, bn);
  auto projected = project_tokens(x, std::span<const Var<T>>(p.projections));
  auto tokens = ad::concat_tokens({token0, projected});
  const std::size_t total = cfg.n_projections + 1;
  std::size_t slot = 1;
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    for (const auto& enc : p.stages[s]) {
      tokens = encoder(tokens, enc, cfg.query_dim(), stats[slot], stats[slot + 1], mode, bn, opt.attention_ids);
      slot += 2;
    }
    if (s + 1 < cfg.stages) {
      auto refreshed = ad::add(ad::slice_token(tokens, 0), linear(x, p.linear_a));
      tokens = ad::concat_tokens({refreshed, ad::slice_tokens(tokens, 1, total)});
    }
  }
  return linear(ad::slice_token(tokens, 0), p.linear_b);
}

/// Convenience: forward on a model's own stored parameters. Train mode
/// updates the model's running statistics.
template <class T>
Var<T> forward(ModelState<T>& model, std::span<const Var<T>> params, Var<T> x, const ForwardOptions& opt = {}) {
  return forward(model.config, unflatten(model.config, params), model.norm_stats, x, model.mode, opt);
}

/// Inference-mode output for a batch; never touches model state.
template <class T>
Tensor<T> infer(const ModelState<T>& model, const Tensor<T>& batch) {
  ad::Tape<T> tape;
  auto params = bind_parameters(tape, model, /*trainable=*/false);
  auto stats = model.norm_stats;
  auto x = tape.constant(batch);
  return forward(model.config, unflatten(model.config, std::span<const Var<T>>(params)), stats, x, Mode::infer,
                 {.update_running_stats = false})
      .value();
}

struct ParamCounts {
  std::size_t projection_bank = 0;
  std::size_t compression_part = 0;  // compression module + linear A + linear B
  std::size_t attention = 0;         // all encoders
  std::size_t mlp = 0;               // all encoders, including biases and BN affine
  std::size_t mlp_weights_per_encoder = 0;  // weight matrices only
  std::size_t position_embedding = 0;
  std::size_t total = 0;
};

/// Counts by parameter inventory, grouped by role.
template <class T>
ParamCounts count_params(const ModelState<T>& model) {
  ParamCounts c;
  std::size_t mlp_weight_total = 0;
  visit_params(model.params, [&](const std::string& name, const Tensor<T>& t) {
    const std::size_t n = t.numel();
    c.total += n;
    if (name.starts_with("projection.")) {
      c.projection_bank += n;
    } else if (name.starts_with("compression.") || name.starts_with("linear_a.") || name.starts_with("linear_b.")) {
      c.compression_part += n;
    } else if (name.find(".mlp_") != std::string::npos) {
      c.mlp += n;
      if (name.ends_with(".linear.weight")) mlp_weight_total += n;
    } else if (name.find("position") != std::string::npos) {
      c.position_embedding += n;
    } else {
      c.attention += n;
    }
  });
  const std::size_t encoders = model.config.encoder_count();
  c.mlp_weights_per_encoder = encoders ? mlp_weight_total / encoders : 0;
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CCST", u32 version, config block, name/shape/offset table,
// f32 payload, trailing CRC-32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(BinaryWriter& w, const ModelConfig& c) {
  for (std::uint64_t v : {c.d_in, c.d_out, c.n_projections, c.stages}) w.put(v);
  w.put(static_cast<std::uint32_t>(c.encoders_per_stage.size()));
  for (auto e : c.encoders_per_stage) w.put(static_cast<std::uint64_t>(e));
  for (std::uint64_t v : {c.heads, c.query_dim(), c.value_dim(), c.mlp_expansion}) w.put(v);
  w.put(c.bn_eps);
  w.put(c.bn_momentum);
  w.put(c.seed);
}

inline ModelConfig read_config(BinaryReader& r) {
  ModelConfig c;
  c.d_in = r.get<std::uint64_t>();
  c.d_out = r.get<std::uint64_t>();
  c.n_projections = r.get<std::uint64_t>();
  c.stages = r.get<std::uint64_t>();
  const auto n = r.get<std::uint32_t>();
  if (n > 1'000'000) throw FormatError("checkpoint: implausible stage count " + std::to_string(n));
  c.encoders_per_stage.clear();
  for (std::uint32_t i = 0; i < n; ++i) c.encoders_per_stage.push_back(r.get<std::uint64_t>());
  c.heads = r.get<std::uint64_t>();
  c.qk_dim = r.get<std::uint64_t>();
  const auto v_dim = r.get<std::uint64_t>();
  c.mlp_expansion = r.get<std::uint64_t>();
  c.bn_eps = r.get<double>();
  c.bn_momentum = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  c.validate();
  if (v_dim != c.value_dim()) throw FormatError("checkpoint: stored value width disagrees with d_out/heads");
  return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const ModelState<float>& model) {
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  visit_params(model.params, [&](const std::string& n, const Tensor<float>& t) { entries.emplace_back(n, &t); });
  for (std::size_t i = 0; i < model.norm_stats.size(); ++i) {
    entries.emplace_back("norm." + std::to_string(i) + ".running_mean", &model.norm_stats[i].running_mean);
    entries.emplace_back("norm." + std::to_string(i) + ".running_var", &model.norm_stats[i].running_var);
  }
  BinaryWriter w;
  w.put_bytes("CCST");
  w.put(kCheckpointVersion);
  detail::write_config(w, model.config);
  w.put(static_cast<std::uint8_t>(model.mode == Mode::infer ? 1 : 0));
  w.put(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : entries) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape) w.put(static_cast<std::uint64_t>(d));
    w.put(offset);
    w.put(static_cast<std::uint64_t>(t->numel()));
    offset += t->numel();
  }
  w.put(offset);
  for (const auto& [name, t] : entries) w.put_span(std::span<const float>(t->data));
  w.seal();
  return w.bytes();
}

inline void save_checkpoint(const ModelState<float>& model, const std::string& path) {
  write_file(path, serialize_checkpoint(model));
}

inline ModelState<float> parse_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  const auto body = verify_sealed(bytes, what);
  BinaryReader r(body, what);
  r.expect_magic("CCST");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  ModelConfig cfg;
  try {
    cfg = detail::read_config(r);
  } catch (const ConfigError& e) {
    throw FormatError(what + ": invalid stored config: " + e.what());
  }
  ModelState<float> model = init_model<float>(cfg);
  model.mode = r.get<std::uint8_t>() ? Mode::infer : Mode::train;

  std::map<std::string, Tensor<float>*> slots;
  visit_params(model.params, [&](const std::string& n, Tensor<float>& t) { slots[n] = &t; });
  for (std::size_t i = 0; i < model.norm_stats.size(); ++i) {
    slots["norm." + std::to_string(i) + ".running_mean"] = &model.norm_stats[i].running_mean;
    slots["norm." + std::to_string(i) + ".running_var"] = &model.norm_stats[i].running_var;
  }

  struct Entry {
    Tensor<float>* slot;
    std::uint64_t offset, count;
  };
  std::vector<Entry> table;
  const auto n = r.get<std::uint32_t>();
  if (n != slots.size())
    throw FormatError(what + ": tensor table has " + std::to_string(n) + " entries, config implies " +
                      std::to_string(slots.size()));
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank < 1 || rank > 3) throw FormatError(what + ": bad rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint64_t>());
    const auto offset = r.get<std::uint64_t>();
    const auto count = r.get<std::uint64_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(what + ": unknown tensor '" + name + "'");
    if (it->second->shape != shape)
      throw FormatError(what + ": tensor '" + name + "' has shape " + shape_string(shape) + ", config expects " +
                        shape_string(it->second->shape));
    if (count != it->second->numel()) throw FormatError(what + ": element count mismatch for '" + name + "'");
    table.push_back({it->second, offset, count});
  }
  const auto payload_count = r.get<std::uint64_t>();
  const auto payload = r.get_vector<float>(payload_count);
  for (const auto& e : table) {
    if (e.offset + e.count > payload.size()) throw FormatError(what + ": tensor payload out of range");
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(e.offset), e.count, e.slot->data.begin());
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  return model;
}

inline ModelState<float> load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path), path); }

/// Loads and checks that the stored model accepts inputs of width `expected_d_in`.
inline ModelState<float> load_checkpoint(const std::string& path, std::size_t expected_d_in) {
  auto model = load_checkpoint(path);
  if (model.config.d_in != expected_d_in)
    throw ConfigError("checkpoint '" + path + "' was built for d_in=" + std::to_string(model.config.d_in) +
                      ", requested d_in=" + std::to_string(expected_d_in));
  return model;
}

}  // namespace ccst
