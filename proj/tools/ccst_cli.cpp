// Pipeline driver: synth, train, compress, gt, build, search, eval, bench.
//
// Each command reads an optional JSON config (--config) and then applies its
// flags on top; the resolved config, with every default filled in, is what
// gets hashed into the manifest written next to the command's outputs.
//
// Exit status: 0 success, 1 internal or numeric failure, 2 usage or
// validation failure (bad flags, missing files, malformed inputs, shape
// mismatches).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ccst/ccst.hpp"

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace ccst;

// ---------------------------------------------------------------- config

enum class Kind { number, string, json_value };

struct Override {
  std::string pointer;
  Kind kind;
  std::string raw;
  CLI::Option* option = nullptr;
};

/// Resolved settings of one invocation plus the files it touched.
class Settings {
 public:
  explicit Settings(json j) : j_(std::move(j)) {}

  template <class T>
  T get(const std::string& pointer, T fallback) {
    const json::json_pointer p(pointer);
    if (!j_.contains(p) || j_[p].is_null()) {
      j_[p] = fallback;
      return fallback;
    }
    try {
      return j_[p].template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config " + pointer + ": " + e.what());
    }
  }

  template <class T>
  std::optional<T> optional(const std::string& pointer) {
    const json::json_pointer p(pointer);
    if (!j_.contains(p) || j_[p].is_null()) return std::nullopt;
    try {
      return j_[p].template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config " + pointer + ": " + e.what());
    }
  }

  std::string required(const std::string& pointer, const std::string& flag) {
    auto v = optional<std::string>(pointer);
    if (!v || v->empty()) throw ConfigError("missing required setting " + pointer + " (flag " + flag + ")");
    return *v;
  }

  /// Required input path; must exist now.
  std::string input(const std::string& pointer, const std::string& flag) {
    auto path = required(pointer, flag);
    check_input(path);
    return path;
  }

  std::optional<std::string> optional_input(const std::string& pointer) {
    auto path = optional<std::string>(pointer);
    if (path && path->empty()) path.reset();
    if (path) check_input(*path);
    return path;
  }

  void output(const std::string& path) { outputs_.push_back(path); }

  /// Writes `<manifest_path>` describing this run. No timestamps, so
  /// identical runs produce identical manifests.
  void write_manifest(const std::string& command, const std::string& manifest_path, json extra = json::object()) const {
    json m;
    m["tool"] = "ccst";
    m["version"] = std::string(kVersion);
    m["command"] = command;
    const std::string dumped = j_.dump();
    char hash[16];
    std::snprintf(hash, sizeof hash, "%08x", crc32(dumped));
    m["config_hash"] = hash;
    m["config"] = j_;
    m["inputs"] = describe(inputs_);
    m["outputs"] = describe(outputs_);
    if (!extra.empty()) m["results"] = std::move(extra);
    write_file(manifest_path, m.dump(2) + "\n");
  }

  const json& resolved() const { return j_; }

 private:
  void check_input(const std::string& path) {
    if (!fs::exists(path)) throw IoError("input file does not exist: '" + path + "'");
    inputs_.push_back(path);
  }

  static json describe(const std::vector<std::string>& paths) {
    json arr = json::array();
    for (const auto& p : paths) {
      const auto bytes = read_file(p);
      char crc[16];
      std::snprintf(crc, sizeof crc, "%08x", crc32(bytes));
      arr.push_back({{"path", p}, {"bytes", bytes.size()}, {"crc32", crc}});
    }
    return arr;
  }

  json j_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

/// One subcommand with a --config option and flags mapped onto config keys.
class Command {
 public:
  Command(CLI::App& root, const std::string& name, const std::string& description)
      : app_(root.add_subcommand(name, description)) {
    app_->add_option("-c,--config", config_path_, "JSON config file; flags override its values");
  }

  Command& flag(const std::string& names, const std::string& pointer, Kind kind, const std::string& help) {
    auto ov = std::make_unique<Override>();
    ov->pointer = pointer;
    ov->kind = kind;
    ov->option = app_->add_option(names, ov->raw, help + " [" + pointer + "]");
    overrides_.push_back(std::move(ov));
    return *this;
  }

  CLI::App* app() const { return app_; }

  Settings resolve() const {
    json j = json::object();
    if (!config_path_.empty()) {
      const auto text = read_file(config_path_);
      try {
        j = json::parse(text);
      } catch (const json::exception& e) {
        throw ConfigError("config '" + config_path_ + "': " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config '" + config_path_ + "': top level must be an object");
    }
    for (const auto& ov : overrides_) {
      if (ov->option->count() == 0) continue;
      json value;
      if (ov->kind == Kind::string) {
        value = ov->raw;
      } else {
        try {
          value = json::parse(ov->raw);
        } catch (const json::exception&) {
          throw ConfigError("flag " + ov->option->get_name() + ": cannot parse '" + ov->raw + "'");
        }
        if (ov->kind == Kind::number && !value.is_number())
          throw ConfigError("flag " + ov->option->get_name() + ": expected a number, got '" + ov->raw + "'");
      }
      j[json::json_pointer(ov->pointer)] = std::move(value);
    }
    return Settings(std::move(j));
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::unique_ptr<Override>> overrides_;
};

std::string manifest_for(const std::string& output) { return output + ".manifest.json"; }

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// ---------------------------------------------------------------- indexes

/// Any index file, dispatched on its 4-byte magic.
class Searcher {
 public:
  static Searcher open(const std::string& path, const std::optional<std::string>& vectors_path,
                       const std::optional<std::string>& search_vectors_path) {
    const auto bytes = read_file(path);
    const auto magic = bytes.substr(0, 4);
    Searcher s;
    if (magic == "HNS1") {
      if (!vectors_path) throw ConfigError("hnsw index '" + path + "' needs its build vectors (--vectors)");
      auto index = HnswIndex::parse(bytes, read_vectors(*vectors_path), path);
      if (search_vectors_path) index.attach_search_vectors(read_vectors(*search_vectors_path));
      s.kind_ = "hnsw";
      s.index_ = std::move(index);
    } else if (magic == "PQC1") {
      s.kind_ = "pq";
      s.index_ = parse_pq(bytes, path);
    } else if (magic == "IVF1") {
      s.kind_ = "ivfadc";
      s.index_ = parse_ivf(bytes, path);
    } else if (magic == "SQP1") {
      s.kind_ = "sq";
      auto idx = parse_sq(bytes, path);
      s.sq_weights_ = sq_weights(idx.params);
      s.index_ = std::move(idx);
    } else if (magic == "FLT1") {
      s.kind_ = "flat";
      s.index_ = parse_flat(bytes, path);
    } else {
      throw FormatError(path + ": unrecognised index magic");
    }
    if (search_vectors_path && s.kind_ != "hnsw")
      throw ConfigError("--search-vectors applies only to hnsw indexes, '" + path + "' is " + s.kind_);
    return s;
  }

  const std::string& kind() const { return kind_; }

  std::size_t query_dim() const {
    if (const auto* h = std::get_if<HnswIndex>(&index_)) return h->search_dim();
    if (const auto* p = std::get_if<PqIndex>(&index_)) return p->codebook.dim;
    if (const auto* v = std::get_if<IvfIndex>(&index_)) return v->coarse.dim();
    if (const auto* q = std::get_if<SqIndex>(&index_)) return q->params.dim();
    return std::get<VectorDataset>(index_).dim();
  }

  /// Name of the knob `param` controls, or empty when the index has none.
  std::string param_name() const {
    if (kind_ == "hnsw") return "ef_search";
    if (kind_ == "ivfadc") return "nprobe";
    return "";
  }

  std::vector<std::size_t> default_sweep(std::size_t k) const {
    if (kind_ == "hnsw") return {std::max<std::size_t>(k, 100), std::max<std::size_t>(k, 200), std::max<std::size_t>(k, 400)};
    if (kind_ == "ivfadc") {
      std::vector<std::size_t> out;
      const auto nlist = std::get<IvfIndex>(index_).nlist();
      for (std::size_t p = 1; p < nlist; p *= 2) out.push_back(p);
      out.push_back(nlist);
      return out;
    }
    return {0};
  }

  /// `param` is ef_search for hnsw and nprobe for ivfadc; other kinds ignore it.
  void one(std::span<const float> q, std::size_t k, std::size_t param, std::span<std::int32_t> ids,
           std::span<float> dists) const {
    if (q.size() != query_dim())
      throw ShapeError("search: query dim " + std::to_string(q.size()) + " != index query dim " +
                       std::to_string(query_dim()));
    if (const auto* h = std::get_if<HnswIndex>(&index_)) {
      h->search(q, k, param, ids, dists);
    } else if (const auto* p = std::get_if<PqIndex>(&index_)) {
      adc_search(p->codebook, p->codes, q, k, ids, dists);
    } else if (const auto* v = std::get_if<IvfIndex>(&index_)) {
      ivf_search(*v, q, k, param, ids, dists);
    } else if (const auto* s = std::get_if<SqIndex>(&index_)) {
      std::vector<std::uint8_t> code(q.size());
      for (std::size_t d = 0; d < q.size(); ++d) code[d] = sq_encode_value(s->params, d, q[d]);
      TopK top(k);
      for (std::size_t i = 0; i < s->codes.count; ++i)
        top.push(sq_distance(sq_weights_, code, s->codes.row(i)), static_cast<std::int64_t>(i));
      top.write(ids, dists, true);
    } else {
      const auto& base = std::get<VectorDataset>(index_);
      TopK top(k);
      for (std::size_t i = 0; i < base.count(); ++i) top.push(l2_sqr(q, base.row(i)), static_cast<std::int64_t>(i));
      top.write(ids, dists, true);
    }
  }

  NeighborLists batch(const VectorDataset& queries, std::size_t k, std::size_t param) const {
    if (k == 0) throw ConfigError("search: k must be >= 1");
    NeighborLists out(queries.count(), k);
    parallel_for(queries.count(), [&](std::size_t b, std::size_t e) {
      for (std::size_t q = b; q < e; ++q) one(queries.row(q), k, param, out.row(q), out.distance_row(q));
    });
    return out;
  }

 private:
  std::string kind_;
  std::variant<HnswIndex, PqIndex, IvfIndex, SqIndex, VectorDataset> index_;
  std::vector<float> sq_weights_;
};

std::size_t search_param(Settings& s, const Searcher& searcher, std::size_t k) {
  if (searcher.kind() == "hnsw") return s.get<std::size_t>("/search/ef", std::max<std::size_t>(k, 100));
  if (searcher.kind() == "ivfadc") return s.get<std::size_t>("/search/nprobe", 8);
  return 0;
}

// ---------------------------------------------------------------- commands

void run_synth(const Command& cmd) {
  auto s = cmd.resolve();
  MixtureConfig mc;
  mc.count = s.get<std::size_t>("/synth/count", mc.count);
  mc.dim = s.get<std::size_t>("/synth/dim", mc.dim);
  mc.clusters = s.get<std::size_t>("/synth/clusters", mc.clusters);
  mc.latent_dim = s.get<std::size_t>("/synth/latent_dim", mc.latent_dim);
  mc.center_spread = s.get<double>("/synth/center_spread", mc.center_spread);
  mc.within_spread = s.get<double>("/synth/within_spread", mc.within_spread);
  mc.noise = s.get<double>("/synth/noise", mc.noise);
  mc.seed = s.get<std::uint64_t>("/seed", 0);
  const auto query_count = s.get<std::size_t>("/synth/query_count", 0);
  const auto out = s.required("/synth/out", "--out");
  const auto all = make_mixture(mc);
  ensure_parent(out);
  if (query_count == 0) {
    write_fvecs(all, out);
    s.output(out);
    std::cout << "synth: wrote " << all.count() << " x " << all.dim() << " to " << out << "\n";
  } else {
    const auto queries_out = s.required("/synth/queries_out", "--queries-out");
    ensure_parent(queries_out);
    const auto [base, queries] = split_queries(all, query_count, mc.seed);
    write_fvecs(base, out);
    write_fvecs(queries, queries_out);
    s.output(out);
    s.output(queries_out);
    std::cout << "synth: wrote " << base.count() << " base and " << queries.count() << " query vectors of dim "
              << all.dim() << "\n";
  }
  s.write_manifest("synth", manifest_for(out));
}

void run_train(const Command& cmd) {
  auto s = cmd.resolve();
  const auto base_path = s.input("/data/base", "--base");
  const auto out_dir = s.required("/output_dir", "--out-dir");
  const auto seed = s.get<std::uint64_t>("/seed", 0);
  const auto base = read_vectors(base_path);
  if (base.empty()) throw ConfigError("train: dataset '" + base_path + "' is empty");

  ModelConfig mc;
  mc.d_in = base.dim();
  mc.d_out = s.get<std::size_t>("/model/d_out", std::max<std::size_t>(1, base.dim() / 4));
  mc.n_projections = s.get<std::size_t>("/model/n_projections", mc.n_projections);
  mc.encoders_per_stage = s.get<std::vector<std::size_t>>("/model/encoders_per_stage", mc.encoders_per_stage);
  mc.stages = mc.encoders_per_stage.size();
  mc.heads = s.get<std::size_t>("/model/heads", mc.heads);
  mc.qk_dim = s.get<std::size_t>("/model/qk_dim", mc.qk_dim);
  mc.bn_eps = s.get<double>("/model/bn_eps", mc.bn_eps);
  mc.bn_momentum = s.get<double>("/model/bn_momentum", mc.bn_momentum);
  mc.seed = seed;

  TrainConfig tc;
  tc.epochs = s.get<std::size_t>("/train/epochs", tc.epochs);
  tc.batch_size = s.get<std::size_t>("/train/batch_size", tc.batch_size);
  tc.lr0 = s.get<double>("/train/lr0", tc.lr0);
  tc.poly_power = s.get<double>("/train/poly_power", tc.poly_power);
  tc.weight_decay = s.get<double>("/train/weight_decay", tc.weight_decay);
  tc.checkpoint_every = s.get<std::size_t>("/train/checkpoint_every", tc.checkpoint_every);
  tc.seed = seed;

  LossConfig lc;
  lc.alpha = s.get<double>("/loss/alpha", lc.alpha);
  lc.beta = s.get<double>("/loss/beta", lc.beta);
  const auto pairs = s.get<std::size_t>("/loss/boundary_pairs", kDefaultBoundaryPairs);
  if (const auto b = s.optional<double>("/loss/boundary")) {
    lc.boundary = *b;
  } else {
    lc.boundary = estimate_boundary(base, pairs, seed);
  }

  fs::create_directories(out_dir);
  const auto dir = fs::path(out_dir);
  auto model = init_model<float>(mc);
  std::cout << "train: " << base.count() << " x " << base.dim() << " -> " << mc.d_out << ", boundary "
            << lc.boundary << ", " << count_params(model).total << " parameters\n";
  std::vector<std::string> snapshots;
  auto result = train(std::move(model), base, lc, tc, [&](std::size_t epoch, const ModelState<float>& m) {
    const auto path = (dir / ("model_epoch" + std::to_string(epoch + 1) + ".ckpt")).string();
    save_checkpoint(m, path);
    snapshots.push_back(path);
  });
  const auto ckpt = (dir / "model.ckpt").string();
  const auto report = (dir / "train_report.txt").string();
  save_checkpoint(result.model, ckpt);
  write_file(report, result.report.to_text());
  for (const auto& p : snapshots) s.output(p);
  s.output(ckpt);
  s.output(report);
  const double first = result.report.epochs.front().mean_loss;
  const double last = result.report.epochs.back().mean_loss;
  std::cout << "train: loss " << first << " -> " << last << ", eval loss " << result.report.final_eval_loss << "\n";
  s.write_manifest("train", (dir / "manifest.json").string(),
                   {{"boundary", lc.boundary}, {"final_eval_loss", result.report.final_eval_loss}});
}

void run_compress(const Command& cmd) {
  auto s = cmd.resolve();
  const auto ckpt = s.input("/checkpoint", "--checkpoint");
  const auto input = s.input("/input", "--input");
  const auto out = s.required("/out", "--out");
  const auto batch = s.get<std::size_t>("/batch_size", 1024);
  const auto model = load_checkpoint(ckpt);
  const auto data = read_vectors(input);
  if (!data.empty() && data.dim() != model.config.d_in)
    throw ShapeError("compress: '" + input + "' has dim " + std::to_string(data.dim()) + " but checkpoint '" + ckpt +
                     "' expects d_in " + std::to_string(model.config.d_in));
  const auto compressed = compress_dataset(model, data, batch);
  ensure_parent(out);
  write_fvecs(compressed, out);
  s.output(out);
  std::cout << "compress: " << data.count() << " vectors -> dim " << model.config.d_out << "\n";
  s.write_manifest("compress", manifest_for(out));
}

void run_gt(const Command& cmd) {
  auto s = cmd.resolve();
  const auto base_path = s.input("/base", "--base");
  const auto queries_path = s.input("/queries", "--queries");
  const auto out = s.required("/out", "--out");
  const auto k = s.get<std::size_t>("/k", 100);
  const auto truth = brute_force_knn(read_vectors(base_path), read_vectors(queries_path), k);
  ensure_parent(out);
  write_ivecs(truth, out);
  s.output(out);
  std::cout << "gt: " << truth.query_count << " queries, k = " << truth.k << "\n";
  s.write_manifest("gt", manifest_for(out));
}

void run_build(const Command& cmd) {
  auto s = cmd.resolve();
  const auto kind = s.get<std::string>("/index/kind", "hnsw");
  const auto vectors_path = s.input("/vectors", "--vectors");
  const auto search_path = s.optional_input("/search_vectors");
  const auto out = s.required("/out", "--out");
  const auto seed = s.get<std::uint64_t>("/seed", 0);
  const auto data = read_vectors(vectors_path);
  if (data.empty()) throw ConfigError("build: '" + vectors_path + "' is empty");
  if (search_path && kind != "hnsw") throw ConfigError("build: --search-vectors applies only to hnsw");
  ensure_parent(out);
  json results = json::object();

  if (kind == "hnsw") {
    HnswConfig hc;
    hc.M = s.get<std::size_t>("/index/M", hc.M);
    hc.ef_construction = s.get<std::size_t>("/index/ef_construction", hc.ef_construction);
    hc.ef_search_default = s.get<std::size_t>("/index/ef_search", hc.ef_search_default);
    hc.level_lambda = s.optional<double>("/index/level_lambda");
    hc.seed = seed;
    auto index = HnswIndex::build(data, hc);
    if (search_path) index.attach_search_vectors(read_vectors(*search_path));
    index.save(out);
    const auto& c = index.build_counter();
    results = {{"build_distances", c.distances}, {"build_multiplies", c.multiplies}, {"max_level", index.max_level()}};
    std::cout << "build: hnsw over " << data.count() << " x " << data.dim() << ", " << c.distances
              << " distances, " << c.multiplies << " multiplies\n";
  } else if (kind == "pq") {
    const auto m = s.get<std::size_t>("/index/pq_m", PqConfig{}.m);
    const auto iters = s.get<std::size_t>("/index/kmeans_iters", kDefaultKMeansIters);
    PqIndex idx;
    idx.codebook = pq_train(data, m, iters, seed);
    idx.codes = pq_encode(idx.codebook, data);
    write_file(out, serialize_pq(idx));
    std::cout << "build: pq m=" << m << " ksub=" << idx.codebook.ksub << " over " << data.count() << " vectors\n";
  } else if (kind == "ivfadc") {
    PqConfig pc;
    pc.m = s.get<std::size_t>("/index/pq_m", pc.m);
    pc.iters = s.get<std::size_t>("/index/kmeans_iters", pc.iters);
    const auto nlist = s.get<std::size_t>("/index/nlist", 64);
    write_file(out, serialize_ivf(ivf_build(data, nlist, pc, seed)));
    std::cout << "build: ivfadc nlist=" << nlist << " m=" << pc.m << " over " << data.count() << " vectors\n";
  } else if (kind == "sq") {
    SqIndex idx;
    idx.params = sq_train(data);
    idx.codes = sq_encode(idx.params, data);
    write_file(out, serialize_sq(idx));
    std::cout << "build: sq8 over " << data.count() << " x " << data.dim() << "\n";
  } else if (kind == "flat") {
    write_file(out, serialize_flat(data));
    std::cout << "build: flat over " << data.count() << " x " << data.dim() << "\n";
  } else {
    throw ConfigError("build: unknown index kind '" + kind + "' (hnsw, pq, ivfadc, sq, flat)");
  }
  s.output(out);
  s.write_manifest("build", manifest_for(out), results);
}

void run_search(const Command& cmd) {
  auto s = cmd.resolve();
  const auto index_path = s.input("/index_path", "--index");
  const auto queries_path = s.input("/queries", "--queries");
  const auto vectors = s.optional_input("/vectors");
  const auto search_vectors = s.optional_input("/search_vectors");
  const auto out = s.required("/out", "--out");
  const auto k = s.get<std::size_t>("/k", 100);
  const auto searcher = Searcher::open(index_path, vectors, search_vectors);
  const auto param = search_param(s, searcher, k);
  const auto results = searcher.batch(read_vectors(queries_path), k, param);
  ensure_parent(out);
  write_ivecs(results, out);
  s.output(out);
  std::cout << "search: " << searcher.kind() << ", " << results.query_count << " queries, k = " << k << "\n";
  s.write_manifest("search", manifest_for(out));
}

void emit_reports(const std::vector<RecallReport>& reports, const std::string& format,
                  const std::optional<std::string>& out, Settings& s, const std::string& command) {
  std::string text;
  if (format == "table") {
    text = reports_to_table(reports);
  } else if (format == "json") {
    text = reports_to_jsonl(reports);
  } else {
    throw ConfigError(command + ": unknown format '" + format + "' (json, table)");
  }
  if (out) {
    ensure_parent(*out);
    write_file(*out, text);
    s.output(*out);
    s.write_manifest(command, manifest_for(*out));
  }
  std::cout << (format == "table" || !out ? text : reports_to_table(reports));
}

void run_eval(const Command& cmd) {
  auto s = cmd.resolve();
  const auto results_path = s.input("/results", "--results");
  const auto gt_path = s.input("/ground_truth", "--gt");
  const auto format = s.get<std::string>("/format", "json");
  const auto out = s.optional<std::string>("/out");
  const auto report = make_recall_report(read_ivecs(results_path), read_ivecs(gt_path));
  emit_reports({report}, format, out, s, "eval");
}

void run_bench(const Command& cmd) {
  auto s = cmd.resolve();
  const auto index_path = s.input("/index_path", "--index");
  const auto queries_path = s.input("/queries", "--queries");
  const auto gt_path = s.input("/ground_truth", "--gt");
  const auto vectors = s.optional_input("/vectors");
  const auto search_vectors = s.optional_input("/search_vectors");
  const auto k = s.get<std::size_t>("/k", 100);
  const auto reps = s.get<std::size_t>("/bench/repetitions", 1);
  const auto format = s.get<std::string>("/format", "json");
  const auto out = s.optional<std::string>("/out");
  const auto searcher = Searcher::open(index_path, vectors, search_vectors);
  const auto sweep = s.get<std::vector<std::size_t>>("/bench/sweep", searcher.default_sweep(k));
  const auto queries = read_vectors(queries_path);
  const auto truth = read_ivecs(gt_path);

  std::vector<RecallReport> reports;
  for (const auto param : sweep) {
    const auto results = searcher.batch(queries, k, param);
    std::map<std::string, std::string> params{{"index", searcher.kind()}};
    if (!searcher.param_name().empty()) params[searcher.param_name()] = std::to_string(param);
    auto report = make_recall_report(results, truth, params);
    if (reps > 0) {
      std::vector<std::int32_t> ids(k);
      std::vector<float> dists(k);
      report.qps = measure_qps([&](std::size_t q) { searcher.one(queries.row(q), k, param, ids, dists); },
                               queries.count(), reps);
    }
    reports.push_back(std::move(report));
  }
  emit_reports(reports, format, out, s, "bench");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 1;
  if (dynamic_cast<const Error*>(&e) || dynamic_cast<const json::exception*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e))
    return 2;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root{"ccst: learned vector compression and ANN search pipeline"};
  root.require_subcommand(1);
  root.set_version_flag("--version", std::string(kVersion));

  Command synth(root, "synth", "Generate a synthetic Gaussian-mixture dataset");
  synth.flag("-o,--out", "/synth/out", Kind::string, "Output fvecs (base vectors)")
      .flag("--queries-out", "/synth/queries_out", Kind::string, "Output fvecs for held-out queries")
      .flag("--query-count", "/synth/query_count", Kind::number, "Rows split off as queries (0 keeps all)")
      .flag("--count", "/synth/count", Kind::number, "Total rows")
      .flag("--dim", "/synth/dim", Kind::number, "Dimension")
      .flag("--clusters", "/synth/clusters", Kind::number, "Mixture components")
      .flag("--latent-dim", "/synth/latent_dim", Kind::number, "Within-cluster subspace dimension")
      .flag("--center-spread", "/synth/center_spread", Kind::number, "Std of cluster centres")
      .flag("--within-spread", "/synth/within_spread", Kind::number, "Std along the latent subspace")
      .flag("--noise", "/synth/noise", Kind::number, "Isotropic noise std")
      .flag("--seed", "/seed", Kind::number, "Seed");

  Command train_cmd(root, "train", "Train a compressor on a base set");
  train_cmd.flag("--base", "/data/base", Kind::string, "Training vectors (fvecs/bvecs)")
      .flag("-o,--out-dir", "/output_dir", Kind::string, "Run directory")
      .flag("--seed", "/seed", Kind::number, "Seed for init, shuffling and boundary sampling")
      .flag("--d-out", "/model/d_out", Kind::number, "Compressed dimension")
      .flag("--projections", "/model/n_projections", Kind::number, "Projection tokens")
      .flag("--encoders", "/model/encoders_per_stage", Kind::json_value, "Encoders per stage, e.g. [2,2]")
      .flag("--heads", "/model/heads", Kind::number, "Attention heads")
      .flag("--qk-dim", "/model/qk_dim", Kind::number, "Per-head query/key width (0 = value width / 2)")
      .flag("--epochs", "/train/epochs", Kind::number, "Epochs")
      .flag("--batch-size", "/train/batch_size", Kind::number, "Batch size")
      .flag("--lr", "/train/lr0", Kind::number, "Initial learning rate")
      .flag("--weight-decay", "/train/weight_decay", Kind::number, "AdamW weight decay")
      .flag("--checkpoint-every", "/train/checkpoint_every", Kind::number, "Snapshot period in epochs (0 = off)")
      .flag("--boundary", "/loss/boundary", Kind::number, "Fixed boundary instead of estimating it");

  Command compress_cmd(root, "compress", "Compress vectors with a trained checkpoint");
  compress_cmd.flag("--checkpoint", "/checkpoint", Kind::string, "Checkpoint file")
      .flag("-i,--input", "/input", Kind::string, "Vectors to compress")
      .flag("-o,--out", "/out", Kind::string, "Output fvecs")
      .flag("--batch-size", "/batch_size", Kind::number, "Inference batch size");

  Command gt_cmd(root, "gt", "Exact k-nearest-neighbour ground truth");
  gt_cmd.flag("--base", "/base", Kind::string, "Base vectors")
      .flag("--queries", "/queries", Kind::string, "Query vectors")
      .flag("-k,--k", "/k", Kind::number, "Neighbours per query")
      .flag("-o,--out", "/out", Kind::string, "Output ivecs");

  Command build_cmd(root, "build", "Build an index (hnsw, pq, ivfadc, sq, flat)");
  build_cmd.flag("--kind", "/index/kind", Kind::string, "Index kind")
      .flag("--vectors", "/vectors", Kind::string, "Vectors the index is built from")
      .flag("--search-vectors", "/search_vectors", Kind::string, "hnsw only: row-aligned vectors to check for search")
      .flag("-o,--out", "/out", Kind::string, "Output index file")
      .flag("--seed", "/seed", Kind::number, "Seed")
      .flag("--M", "/index/M", Kind::number, "hnsw: links per node")
      .flag("--ef-construction", "/index/ef_construction", Kind::number, "hnsw: construction beam width")
      .flag("--level-lambda", "/index/level_lambda", Kind::number, "hnsw: level multiplier (default 1/ln M)")
      .flag("--pq-m", "/index/pq_m", Kind::number, "pq/ivfadc: subspaces")
      .flag("--nlist", "/index/nlist", Kind::number, "ivfadc: coarse lists")
      .flag("--kmeans-iters", "/index/kmeans_iters", Kind::number, "pq/ivfadc: Lloyd iterations");

  Command search_cmd(root, "search", "Query an index and write result ids");
  search_cmd.flag("--index", "/index_path", Kind::string, "Index file")
      .flag("--queries", "/queries", Kind::string, "Query vectors")
      .flag("--vectors", "/vectors", Kind::string, "hnsw: the build vectors")
      .flag("--search-vectors", "/search_vectors", Kind::string, "hnsw: row-aligned vectors to search in")
      .flag("-k,--k", "/k", Kind::number, "Results per query")
      .flag("--ef", "/search/ef", Kind::number, "hnsw: ef_search")
      .flag("--nprobe", "/search/nprobe", Kind::number, "ivfadc: lists to scan")
      .flag("-o,--out", "/out", Kind::string, "Output ivecs");

  Command eval_cmd(root, "eval", "Recall of result lists against ground truth");
  eval_cmd.flag("--results", "/results", Kind::string, "Result ivecs")
      .flag("--gt", "/ground_truth", Kind::string, "Ground-truth ivecs")
      .flag("--format", "/format", Kind::string, "json or table")
      .flag("-o,--out", "/out", Kind::string, "Report file (stdout only when omitted)");

  Command bench_cmd(root, "bench", "Recall and throughput over a parameter sweep");
  bench_cmd.flag("--index", "/index_path", Kind::string, "Index file")
      .flag("--queries", "/queries", Kind::string, "Query vectors")
      .flag("--gt", "/ground_truth", Kind::string, "Ground-truth ivecs")
      .flag("--vectors", "/vectors", Kind::string, "hnsw: the build vectors")
      .flag("--search-vectors", "/search_vectors", Kind::string, "hnsw: row-aligned vectors to search in")
      .flag("-k,--k", "/k", Kind::number, "Results per query")
      .flag("--sweep", "/bench/sweep", Kind::json_value, "ef_search or nprobe values, e.g. [100,200]")
      .flag("--repetitions", "/bench/repetitions", Kind::number, "Timed passes per setting (0 = no timing)")
      .flag("--format", "/format", Kind::string, "json or table")
      .flag("-o,--out", "/out", Kind::string, "Report file");

  try {
    root.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = root.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::pair<const Command*, void (*)(const Command&)> table[] = {
      {&synth, run_synth},       {&train_cmd, run_train}, {&compress_cmd, run_compress},
      {&gt_cmd, run_gt},         {&build_cmd, run_build}, {&search_cmd, run_search},
      {&eval_cmd, run_eval},     {&bench_cmd, run_bench}};
  try {
    for (const auto& [cmd, run] : table)
      if (cmd->app()->parsed()) run(*cmd);
  } catch (const std::exception& e) {
    std::cerr << "ccst: error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
