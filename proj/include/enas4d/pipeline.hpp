#pragma once

// Subcommand bodies shared by the command-line tool and the tests. Every
// artifact is written under an output directory that also holds a manifest of
// SHA-256 hashes.

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "enas4d/data.hpp"
#include "enas4d/dyninfer.hpp"
#include "enas4d/errors.hpp"
#include "enas4d/evaldb.hpp"
#include "enas4d/evo.hpp"
#include "enas4d/predictor.hpp"
#include "enas4d/serialize.hpp"
#include "enas4d/supernet.hpp"
#include "enas4d/trainer.hpp"

namespace enas4d {

namespace fs = std::filesystem;

// 32x32 inputs, 10 classes, resolutions {24, 28, 32}, two groups of three
// blocks, three stages.
inline SearchSpaceConfig desk_search_space() {
  SearchSpaceConfig c;
  c.stages = 3;
  c.input_channels = 3;
  c.num_classes = 10;
  c.stem_channels = 16;
  c.stem_kernel = 3;
  c.stem_stride = 2;
  c.resolution_pool = {24, 28, 32};
  c.depth_pool = {1, 2, 3};
  c.kernel_pool = {3, 5, 7};
  c.ratio_pool = {0.5, 2.0 / 3.0, 1.0};
  c.groups = {{3, 16, 48, 1}, {3, 32, 96, 2}};
  return c;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct DataConfig {
  std::vector<fs::path> train_files;  // CIFAR-10 binary batches
  std::vector<fs::path> test_files;
  // Used when no files are listed: procedural shapes of this many images.
  int synthetic_train = 0;
  int synthetic_test = 0;
  std::uint64_t synthetic_seed = 7;
};

struct DbConfig {
  int num_arch = 300;
  int num_images = 2000;
  int batch_size = 100;
  int calibration_images = 500;
};

struct SearchOptions {
  int rescore_top_k = 10;
  fs::path latency_table;
  int bench_repeats = 20;
  int bench_warmups = 3;
};

struct ExperimentConfig {
  SearchSpaceConfig search_space = desk_search_space();
  TrainConfig train;
  MetricConfig metric;
  EvoConfig evo;
  PredictorConfig predictor;
  DataConfig data;
  DbConfig db;
  SearchOptions search;
  fs::path out = "out";
  std::uint64_t seed = 0;

  // Module seeds derived from the master seed.
  std::uint64_t train_seed() const { return seed; }
  std::uint64_t arch_sample_seed() const { return seed + 1; }
  std::uint64_t image_sample_seed() const { return seed + 2; }
  std::uint64_t predictor_seed() const { return seed + 3; }
  std::uint64_t evo_seed() const { return seed + 4; }
  std::uint64_t supernet_init_seed() const { return seed + 5; }

  void validate() const {
    try {
      search_space.validate();
      metric.validate();
      evo.validate();
      predictor.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    train.validate();
    if (data.train_files.empty() && data.synthetic_train <= 0) {
      throw ConfigError("config: data needs train_files or synthetic_train > 0");
    }
    if (db.num_arch < 1 || db.num_images < 1 || db.batch_size < 1 || db.calibration_images < 0) {
      throw ConfigError("config: db sizes must be positive");
    }
    if (search.rescore_top_k < 1) throw ConfigError("config: search.rescore_top_k must be >= 1");
  }

  // Every file the config points at must exist.
  void check_paths() const {
    for (const auto* list : {&data.train_files, &data.test_files}) {
      for (const auto& p : *list) {
        if (!fs::exists(p)) throw ConfigError("dataset path does not exist: " + p.string());
      }
    }
    if (!search.latency_table.empty() && !fs::exists(search.latency_table)) {
      throw ConfigError("latency table does not exist: " + search.latency_table.string());
    }
  }
};

inline json experiment_json(const ExperimentConfig& c) {
  auto paths = [](const std::vector<fs::path>& v) {
    std::vector<std::string> s;
    for (const auto& p : v) s.push_back(p.string());
    return s;
  };
  json evo = c.evo;
  evo.erase("seed");
  json train = c.train;
  train.erase("seed");
  return {{"search_space", c.search_space},
          {"train", train},
          {"metric", c.metric},
          {"evo", evo},
          {"predictor", c.predictor},
          {"data",
           {{"train_files", paths(c.data.train_files)},
            {"test_files", paths(c.data.test_files)},
            {"synthetic_train", c.data.synthetic_train},
            {"synthetic_test", c.data.synthetic_test},
            {"synthetic_seed", c.data.synthetic_seed}}},
          {"db",
           {{"num_arch", c.db.num_arch},
            {"num_images", c.db.num_images},
            {"batch_size", c.db.batch_size},
            {"calibration_images", c.db.calibration_images}}},
          {"search",
           {{"rescore_top_k", c.search.rescore_top_k},
            {"latency_table", c.search.latency_table.string()},
            {"bench_repeats", c.search.bench_repeats},
            {"bench_warmups", c.search.bench_warmups}}},
          {"out", c.out.string()},
          {"seed", c.seed}};
}

// Relative paths resolve against base_dir (normally the config file's directory).
inline ExperimentConfig experiment_from_json(const json& j, const fs::path& base_dir = {}) {
  auto resolve = [&](const std::string& s) -> fs::path {
    if (s.empty()) return {};
    fs::path p(s);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("search_space")) c.search_space = j.at("search_space").get<SearchSpaceConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("metric")) c.metric = j.at("metric").get<MetricConfig>();
    if (j.contains("evo")) c.evo = j.at("evo").get<EvoConfig>();
    if (j.contains("predictor")) c.predictor = j.at("predictor").get<PredictorConfig>();
    if (j.contains("data")) {
      const auto& d = j.at("data");
      for (const auto& p : d.value("train_files", std::vector<std::string>())) c.data.train_files.push_back(resolve(p));
      for (const auto& p : d.value("test_files", std::vector<std::string>())) c.data.test_files.push_back(resolve(p));
      c.data.synthetic_train = d.value("synthetic_train", 0);
      c.data.synthetic_test = d.value("synthetic_test", 0);
      c.data.synthetic_seed = d.value("synthetic_seed", c.data.synthetic_seed);
    }
    if (j.contains("db")) {
      const auto& d = j.at("db");
      c.db.num_arch = d.value("num_arch", c.db.num_arch);
      c.db.num_images = d.value("num_images", c.db.num_images);
      c.db.batch_size = d.value("batch_size", c.db.batch_size);
      c.db.calibration_images = d.value("calibration_images", c.db.calibration_images);
    }
    if (j.contains("search")) {
      const auto& s = j.at("search");
      c.search.rescore_top_k = s.value("rescore_top_k", c.search.rescore_top_k);
      c.search.latency_table = resolve(s.value("latency_table", std::string()));
      c.search.bench_repeats = s.value("bench_repeats", c.search.bench_repeats);
      c.search.bench_warmups = s.value("bench_warmups", c.search.bench_warmups);
    }
    c.out = resolve(j.value("out", std::string("out")));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train.seed = c.train_seed();
  c.evo.seed = c.evo_seed();
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file does not exist: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  auto c = experiment_from_json(j, path.parent_path());
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw InvariantError("SHA-256 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline constexpr const char* kManifestName = "manifest.json";

// Rehashes every file under out (except the manifest itself) into manifest.json.
inline json write_manifest(const fs::path& out) {
  std::map<std::string, std::string> files;
  if (fs::exists(out)) {
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), out).generic_string();
      if (rel == kManifestName || rel.ends_with(".tmp")) continue;
      files[rel] = sha256_hex(read_text_file(e.path()));
    }
  }
  json j = {{"format", "enas4d-manifest"}, {"algorithm", "sha256"}, {"files", files}};
  write_json_file(out / kManifestName, j);
  return j;
}

// ---------------------------------------------------------------------------
// Data

struct Splits {
  Dataset train;
  Dataset test;
};

inline Dataset load_files(const std::vector<fs::path>& files, const SearchSpaceConfig& cfg) {
  Dataset all{cfg.input_channels, cfg.max_resolution(), cfg.max_resolution(), {}, {}};
  for (const auto& f : files) {
    auto d = read_cifar_binary(f, cfg.num_classes, cfg.input_channels, cfg.max_resolution(), cfg.max_resolution());
    all.pixels.insert(all.pixels.end(), d.pixels.begin(), d.pixels.end());
    all.labels.insert(all.labels.end(), d.labels.begin(), d.labels.end());
  }
  return all;
}

inline Dataset load_train_split(const ExperimentConfig& c) {
  if (!c.data.train_files.empty()) return load_files(c.data.train_files, c.search_space);
  return make_synthetic_dataset(c.data.synthetic_train, c.data.synthetic_seed, c.search_space.max_resolution());
}

inline Dataset load_test_split(const ExperimentConfig& c) {
  if (!c.data.test_files.empty()) return load_files(c.data.test_files, c.search_space);
  if (c.data.synthetic_test <= 0) throw ConfigError("config: no test split (test_files or synthetic_test)");
  // Distinct generator stream from the training images.
  return make_synthetic_dataset(c.data.synthetic_test, c.data.synthetic_seed + 1000003,
                                c.search_space.max_resolution());
}

// Seeded without-replacement draw of n distinct indices below size.
inline std::vector<std::size_t> sample_indices(std::size_t size, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, size));
  return idx;
}

inline std::vector<Tensor<float>> calibration_batches(const Dataset& train, const std::vector<std::size_t>& ids,
                                                      int batch_size) {
  std::vector<Tensor<float>> out;
  for (std::size_t s = 0; s < ids.size(); s += batch_size) {
    std::vector<std::size_t> b(ids.begin() + s, ids.begin() + std::min(ids.size(), s + batch_size));
    out.push_back(train.batch<float>(b));
  }
  return out;
}

// Which training images a database was built on, so that later commands can
// evaluate new architectures on the same samples.
struct DbProvenance {
  std::vector<std::size_t> sample_ids;
  std::vector<std::size_t> calibration_ids;
  fs::path checkpoint;
};

// The checkpoint path is stored relative to the database directory so the
// output tree can be moved.
inline void save_provenance(const DbProvenance& p, const fs::path& db_dir) {
  fs::create_directories(db_dir);
  const auto ckpt = fs::relative(fs::absolute(p.checkpoint), fs::absolute(db_dir));
  write_json_file(db_dir / "provenance.json", {{"sample_ids", p.sample_ids},
                                               {"calibration_ids", p.calibration_ids},
                                               {"checkpoint", (ckpt.empty() ? p.checkpoint : ckpt).generic_string()}});
}
inline DbProvenance load_provenance(const fs::path& db_dir) {
  const auto j = read_json_file(db_dir / "provenance.json");
  try {
    fs::path ckpt = j.at("checkpoint").get<std::string>();
    if (ckpt.is_relative()) ckpt = (db_dir / ckpt).lexically_normal();
    return {j.at("sample_ids").get<std::vector<std::size_t>>(), j.at("calibration_ids").get<std::vector<std::size_t>>(),
            ckpt};
  } catch (const json::exception& e) {
    throw DataError((db_dir / "provenance.json").string() + ": " + e.what());
  }
}

// The evaluation context of a database: supernet, images and calibration.
struct DbContext {
  Supernet<float> supernet;
  Tensor<float> images;
  std::vector<int> labels;
  std::vector<int> sample_ids;
  DbBuildOptions options;
};

inline DbContext make_db_context(LoadedCheckpoint ckpt, const Dataset& train, const DbProvenance& prov, int batch_size) {
  for (auto i : prov.sample_ids) {
    if (i >= train.size()) throw DataError("database sample id " + std::to_string(i) + " outside the training split");
  }
  for (auto i : prov.calibration_ids) {
    if (i >= train.size()) throw DataError("calibration id " + std::to_string(i) + " outside the training split");
  }
  DbContext ctx{std::move(ckpt.supernet), train.batch<float>(prov.sample_ids), train.batch_labels(prov.sample_ids), {}, {}};
  for (auto i : prov.sample_ids) ctx.sample_ids.push_back(static_cast<int>(i));
  ctx.options.batch_size = batch_size;
  ctx.options.calibration_batches = calibration_batches(train, prov.calibration_ids, batch_size);
  return ctx;
}

// ---------------------------------------------------------------------------
// train-supernet

inline fs::path checkpoint_path(const ExperimentConfig& c) { return c.out / "supernet.ckpt"; }
inline fs::path db_dir(const ExperimentConfig& c) { return c.out / "db"; }

struct TrainCommandResult {
  TrainReport report;
  fs::path checkpoint;
  std::vector<double> maximal_test_accuracy;  // per stage, empty without a test split
};

inline TrainCommandResult cmd_train_supernet(const ExperimentConfig& c, std::ostream* log = &std::cerr) {
  c.check_paths();
  const Dataset train = load_train_split(c);
  auto supernet = build_supernet<float>(c.search_space, c.supernet_init_seed());
  fs::create_directories(c.out);
  const auto log_csv = c.out / "train_log.csv";
  fs::remove(log_csv);  // reruns start a fresh log
  TrainCommandResult res;
  res.checkpoint = checkpoint_path(c);
  res.report = train_supernet(supernet, train, c.train, {log_csv, res.checkpoint, log});
  if (!c.data.test_files.empty() || c.data.synthetic_test > 0) {
    const Dataset test = load_test_split(c);
    const auto calib = calibration_batches(
        train, sample_indices(train.size(), c.db.calibration_images, c.image_sample_seed() + 1), c.db.batch_size);
    res.maximal_test_accuracy = static_stage_accuracy(supernet, maximal_arch(c.search_space), test, calib);
  }
  json summary = {{"steps", res.report.steps}, {"seconds", res.report.seconds}};
  json epochs = json::array();
  for (const auto& e : res.report.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"stage_accuracy", e.stage_accuracy}});
  }
  summary["epochs"] = epochs;
  if (!res.maximal_test_accuracy.empty()) summary["maximal_arch_test_accuracy"] = res.maximal_test_accuracy;
  write_json_file(c.out / "train_report.json", summary);
  write_manifest(c.out);
  return res;
}

// ---------------------------------------------------------------------------
// build-db

inline std::optional<LatencyTable> load_latency_table(const fs::path& p) {
  if (p.empty()) return std::nullopt;
  if (!fs::exists(p)) throw ConfigError("latency table does not exist: " + p.string());
  try {
    return read_json_file(p).get<LatencyTable>();
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline EvalDatabase cmd_build_db(const ExperimentConfig& c, int num_arch, int num_images, fs::path checkpoint = {},
                                 std::ostream* log = &std::cerr) {
  c.check_paths();
  if (num_arch < 1 || num_images < 1) throw ConfigError("build-db: --num-arch and --num-images must be positive");
  if (checkpoint.empty()) checkpoint = checkpoint_path(c);
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint.string());
  auto ckpt = load_checkpoint(checkpoint);
  if (!(ckpt.meta.search_space == c.search_space)) {
    throw ConfigError("checkpoint search space differs from the config's");
  }
  const Dataset train = load_train_split(c);
  if (static_cast<std::size_t>(num_images) > train.size()) {
    throw ConfigError("build-db: --num-images exceeds the training split size " + std::to_string(train.size()));
  }
  const auto table = load_latency_table(c.search.latency_table);
  DbProvenance prov{sample_indices(train.size(), num_images, c.image_sample_seed()),
                    sample_indices(train.size(), c.db.calibration_images, c.image_sample_seed() + 1), checkpoint};
  std::sort(prov.sample_ids.begin(), prov.sample_ids.end());
  auto ctx = make_db_context(std::move(ckpt), train, prov, c.db.batch_size);
  ctx.options.latency_table = table ? &*table : nullptr;
  ctx.options.log = log;

  std::mt19937_64 rng(c.arch_sample_seed());
  std::vector<std::pair<int, MultiStageArch>> archs;
  for (int i = 0; i < num_arch; ++i) archs.emplace_back(i, sample_arch(c.search_space, rng));
  const auto t0 = std::chrono::steady_clock::now();
  auto db = build_eval_db(ctx.supernet, archs, ctx.images, ctx.labels, ctx.sample_ids, ctx.options);
  if (log) {
    *log << "build-db: " << db.registry.size() << " archs x " << db.num_samples << " images in "
         << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  }
  const auto dir = db_dir(c);
  fs::remove_all(dir);
  save_database(db, dir);
  save_provenance(prov, dir);
  write_manifest(c.out);
  return db;
}

// ---------------------------------------------------------------------------
// search

struct RescoredArch {
  MultiStageArch arch;
  double predicted_R = 0.0;
  GridSearchResult grid;
  CostProfile costs;
};

struct SearchReport {
  MetricConfig metric;
  PredictorReport predictor;
  RescoredArch winner;
  std::vector<RescoredArch> candidates;  // re-scored, in predicted order
  EvoResult evo;
  double predictor_seconds = 0.0;
  double evo_seconds = 0.0;
  double rescore_seconds = 0.0;
  fs::path dir;
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

inline fs::path search_dir(const ExperimentConfig& c, const MetricConfig& m) {
  return c.out / "search" /
         (std::string(to_string(m.cost_kind)) + "_w" + format_number(m.omega) + "_t" +
          (std::isfinite(m.cost_target) ? format_number(m.cost_target) : std::string("inf")));
}

inline json grid_result_json(const GridSearchResult& g, const CostProfile& costs) {
  std::vector<double> fractions;
  for (int s = 0; s < g.summary.stages(); ++s) fractions.push_back(g.summary.fraction(s));
  return {{"thresholds", g.thresholds}, {"R", g.R},
          {"acc_avg", g.metrics.acc},   {"cost_avg", g.metrics.cost},
          {"exit_counts", g.summary.exits},
          {"exit_fractions", fractions},
          {"exiter_accuracy", g.summary.accuracy},
          {"costs", costs}};
}

// True R of architectures outside the database, evaluated on the database's images.
inline std::vector<GridSearchResult> rescore_archs(DbContext& ctx, const std::vector<MultiStageArch>& archs,
                                                   const MetricConfig& metric, const LatencyTable* table,
                                                   std::vector<CostProfile>* costs_out = nullptr) {
  std::vector<GridSearchResult> out;
  const auto& cfg = ctx.supernet.config();
  for (const auto& a : archs) {
    const auto records = evaluate_arch_records(ctx.supernet, a, -1, ctx.images, ctx.labels, ctx.sample_ids, ctx.options);
    const CostProfile costs = metric.cost_kind == CostKind::macs ? count_macs(a, cfg) : profile_latency(a, cfg, *table);
    out.push_back(grid_search_thresholds(records, costs, metric, default_threshold_grid()));
    if (costs_out) costs_out->push_back(costs);
  }
  return out;
}

inline SearchReport cmd_search(const ExperimentConfig& c, const MetricConfig& metric, const fs::path& latency_table,
                               std::ostream* log = &std::cerr) {
  try {
    metric.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const bool wants_latency = metric.cost_kind == CostKind::latency;
  if (wants_latency && latency_table.empty()) throw ConfigError("search: --cost-kind latency requires --latency-table");
  if (!wants_latency && !latency_table.empty()) {
    throw ConfigError("search: --latency-table is only valid with --cost-kind latency");
  }
  const auto table = load_latency_table(latency_table);
  const auto dbd = db_dir(c);
  auto db = load_database(dbd);
  if (!(db.config == c.search_space)) throw ConfigError("database search space differs from the config's");

  SearchReport rep;
  rep.metric = metric;
  const auto grid = default_threshold_grid();
  auto t0 = std::chrono::steady_clock::now();
  const auto pairs = build_training_set(db, metric, grid, table ? &*table : nullptr);
  auto fit = fit_predictor(pairs, c.predictor, c.predictor_seed(), log);
  rep.predictor = fit.report;
  rep.predictor_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  t0 = std::chrono::steady_clock::now();
  rep.evo = evolve(fit.model, c.search_space, c.evo);
  rep.evo_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // Distinct evaluated architectures, best predicted first.
  std::vector<EvoCandidate> ranked = rep.evo.evaluated;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const EvoCandidate& a, const EvoCandidate& b) { return a.fitness > b.fitness; });
  std::vector<EvoCandidate> top;
  std::set<MultiStageArch> seen;
  for (const auto& cand : ranked) {
    if (static_cast<int>(top.size()) >= c.search.rescore_top_k) break;
    if (seen.insert(cand.arch).second) top.push_back(cand);
  }

  t0 = std::chrono::steady_clock::now();
  const auto prov = load_provenance(dbd);
  auto ckpt = load_checkpoint(prov.checkpoint);
  auto ctx = make_db_context(std::move(ckpt), load_train_split(c), prov, c.db.batch_size);
  ctx.options.log = log;
  std::vector<MultiStageArch> archs;
  for (const auto& t : top) archs.push_back(t.arch);
  std::vector<CostProfile> costs;
  const auto scored = rescore_archs(ctx, archs, metric, table ? &*table : nullptr, &costs);
  for (std::size_t i = 0; i < top.size(); ++i) rep.candidates.push_back({top[i].arch, top[i].fitness, scored[i], costs[i]});
  rep.rescore_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rep.winner = rep.candidates.front();
  for (const auto& cand : rep.candidates) {
    if (cand.grid.R > rep.winner.grid.R) rep.winner = cand;
  }

  rep.dir = search_dir(c, metric);
  fs::remove_all(rep.dir);
  fs::create_directories(rep.dir);
  json cands = json::array();
  for (const auto& cand : rep.candidates) {
    cands.push_back({{"arch", cand.arch}, {"predicted_R", cand.predicted_R}, {"true_R", cand.grid.R},
                     {"cost_avg", cand.grid.metrics.cost}});
  }
  json report = {{"format", "enas4d-search-report"},
                 {"metric", metric},
                 {"cost_unit", wants_latency ? "ms" : "macs"},
                 {"arch", rep.winner.arch},
                 {"predicted_R", rep.winner.predicted_R},
                 {"true_R", rep.winner.grid.R},
                 {"thresholds", rep.winner.grid.thresholds},
                 {"result", grid_result_json(rep.winner.grid, rep.winner.costs)},
                 {"macs", count_macs(rep.winner.arch, c.search_space)},
                 {"predictor",
                  {{"train_size", rep.predictor.train_size},
                   {"validation_size", rep.predictor.validation_size},
                   {"train_rmse", rep.predictor.train_rmse},
                   {"validation_rmse", rep.predictor.validation_rmse},
                   {"kendall_tau", rep.predictor.kendall_tau},
                   {"top10_overlap", rep.predictor.top10_overlap},
                   {"degenerate_labels", rep.predictor.degenerate_labels}}},
                 {"candidates", cands},
                 {"evaluations", rep.evo.evaluated.size()},
                 {"seconds", {{"predictor", rep.predictor_seconds}, {"evolution", rep.evo_seconds},
                              {"rescore", rep.rescore_seconds}}}};
  if (std::isfinite(metric.cost_target)) report["cost_target"] = metric.cost_target;
  write_json_file(rep.dir / "report.json", report);
  write_json_file(rep.dir / "arch.json", rep.winner.arch);
  write_json_file(rep.dir / "predictor.json", predictor_json(fit.model, encoding_layout(c.search_space), metric));
  std::ostringstream hist;
  hist << "evaluation,best_predicted_R\n" << std::setprecision(9);
  for (std::size_t i = 0; i < rep.evo.history.size(); ++i) hist << i << "," << rep.evo.history[i] << "\n";
  write_text_file(rep.dir / "fitness_history.csv", hist.str());
  write_manifest(c.out);
  return rep;
}

// ---------------------------------------------------------------------------
// eval-arch

struct SweepPoint {
  double threshold = 0.0;  // applied to every non-final stage
  double acc = 0.0;
  double cost = 0.0;
};

struct EvalArchReport {
  MultiStageArch arch;
  ThresholdVector thresholds;
  ExitSummary summary;         // from true early-exit inference
  AverageMetrics metrics;
  CostProfile costs;
  std::vector<double> static_accuracy;  // every stage run, per stage
  std::vector<SweepPoint> sweep;
  fs::path dir;
};

// Reads an architecture document, or a search report carrying "arch" and
// "thresholds".
inline std::pair<MultiStageArch, std::optional<ThresholdVector>> read_arch_document(const fs::path& p,
                                                                                  const SearchSpaceConfig& cfg) {
  if (!fs::exists(p)) throw ConfigError("architecture file does not exist: " + p.string());
  const json j = read_json_file(p);
  try {
    std::optional<ThresholdVector> thr;
    const json& a = j.contains("arch") ? j.at("arch") : j;
    if (j.contains("thresholds")) thr = j.at("thresholds").get<ThresholdVector>();
    auto arch = canonicalize_arch(a.get<MultiStageArch>(), cfg);
    validate_arch(arch, cfg);
    return {arch, thr};
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(p.string() + ": architecture does not fit the checkpoint's search space: " + e.what());
  }
}

inline EvalArchReport cmd_eval_arch(const ExperimentConfig& c, const fs::path& arch_file,
                                    std::optional<ThresholdVector> thresholds, fs::path checkpoint = {},
                                    const fs::path& latency_table = {}, std::ostream* log = &std::cerr) {
  c.check_paths();
  if (checkpoint.empty()) checkpoint = checkpoint_path(c);
  auto ckpt = load_checkpoint(checkpoint);
  const auto& cfg = ckpt.meta.search_space;
  auto [arch, doc_thr] = read_arch_document(arch_file, cfg);
  const int S = cfg.stages;
  if (!thresholds) thresholds = doc_thr;
  if (!thresholds) thresholds = ThresholdVector(S - 1, 1.1);
  if (static_cast<int>(thresholds->size()) != S - 1) {
    throw ConfigError("eval-arch: expected " + std::to_string(S - 1) + " thresholds");
  }
  const auto table = load_latency_table(latency_table);
  const Dataset train = load_train_split(c);
  const Dataset test = load_test_split(c);
  const auto calib =
      calibration_batches(train, sample_indices(train.size(), c.db.calibration_images, c.image_sample_seed() + 1),
                          c.db.batch_size);

  EvalArchReport rep;
  rep.arch = arch;
  rep.thresholds = *thresholds;
  rep.costs = table ? profile_latency(arch, cfg, *table) : count_macs(arch, cfg);
  NoGradGuard guard;
  auto net = ckpt.supernet.materialize(arch);
  const int R = arch.resolution;
  std::vector<Tensor<float>> rc;
  for (const auto& b : calib) rc.push_back(ops::resize_bilinear(b, R, R));
  recalibrate_norms(net, rc);
  net.set_mode(NormMode::eval);

  // True early-exit inference, one image at a time.
  std::vector<std::int64_t> exits(S, 0), correct(S, 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto img = ops::resize_bilinear(test.batch<float>({i}), R, R);
    const auto r = infer_dynamic(net, img, *thresholds);
    ++exits[r.exit_stage];
    correct[r.exit_stage] += r.predicted_class == test.labels[i];
  }
  rep.summary = make_summary(exits, correct);
  rep.metrics = average_metrics(rep.summary, rep.costs);

  // Every stage on every image, for static accuracy and the threshold sweep.
  RecordSet records(0, S);
  std::vector<std::size_t> all(test.size());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> ids(all.begin(), all.end());
  DbBuildOptions opt;
  opt.batch_size = c.db.batch_size;
  opt.calibration_batches = calib;
  opt.log = log;
  records = evaluate_arch_records(ckpt.supernet, arch, 0, test.batch<float>(all), test.labels, ids, opt);
  rep.static_accuracy.assign(S, 0.0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (int s = 0; s < S; ++s) rep.static_accuracy[s] += records.correct(i, s) ? 1.0 : 0.0;
  }
  for (auto& a : rep.static_accuracy) a /= static_cast<double>(records.size());
  for (double t : default_threshold_grid()) {
    const auto m = average_metrics(simulate_exits(records, ThresholdVector(S - 1, t)), rep.costs);
    rep.sweep.push_back({t, m.acc, m.cost});
  }

  rep.dir = c.out / "eval" / arch_file.stem();
  fs::create_directories(rep.dir);
  std::vector<double> fractions;
  for (int s = 0; s < S; ++s) fractions.push_back(rep.summary.fraction(s));
  json report = {{"format", "enas4d-eval-report"},
                 {"arch", arch},
                 {"thresholds", rep.thresholds},
                 {"test_images", test.size()},
                 {"acc_avg", rep.metrics.acc},
                 {"cost_avg", rep.metrics.cost},
                 {"cost_unit", table ? "ms" : "macs"},
                 {"cumulative_cost", rep.costs.cumulative},
                 {"exit_counts", rep.summary.exits},
                 {"exit_fractions", fractions},
                 {"exiter_accuracy", rep.summary.accuracy},
                 {"static_stage_accuracy", rep.static_accuracy}};
  write_json_file(rep.dir / "report.json", report);
  std::ostringstream csv;
  csv << "threshold,cost_avg,acc_avg\n" << std::setprecision(9);
  for (const auto& p : rep.sweep) csv << p.threshold << "," << p.cost << "," << p.acc << "\n";
  write_text_file(rep.dir / "threshold_sweep.csv", csv.str());
  write_manifest(c.out);
  return rep;
}

// ---------------------------------------------------------------------------
// bench-latency

inline fs::path latency_table_path(const ExperimentConfig& c, const std::string& device) {
  return c.out / ("latency_" + device + ".json");
}

inline LatencyTable cmd_bench_latency(const ExperimentConfig& c, const std::string& device,
                                      std::ostream* log = &std::cerr) {
  if (device.empty()) throw ConfigError("bench-latency: device label must not be empty");
  const auto sigs = enumerate_space_signatures(c.search_space);
  auto table = bench_latency(sigs, cpu_op_runner<float>(c.seed), c.search.bench_repeats, c.search.bench_warmups,
                             device, log);
  if (log) *log << "bench-latency: " << table.entries.size() << " of " << sigs.size() << " signatures timed\n";
  write_json_file(latency_table_path(c, device), table);
  write_manifest(c.out);
  return table;
}

// ---------------------------------------------------------------------------
// export-arch

// Writes a standalone architecture document with its cost profiles and
// per-stage operation list.
inline fs::path cmd_export_arch(const ExperimentConfig& c, const fs::path& source, const fs::path& latency_table = {},
                                const std::string& name = "exported") {
  const auto [arch, thr] = read_arch_document(source, c.search_space);
  const auto table = load_latency_table(latency_table);
  json doc = {{"format", "enas4d-arch"}, {"search_space", c.search_space}, {"arch", arch},
              {"macs", count_macs(arch, c.search_space)}};
  if (thr) doc["thresholds"] = *thr;
  if (table) doc["latency"] = profile_latency(arch, c.search_space, *table);
  const auto dir = c.out / "export";
  const auto path = dir / (name + ".json");
  write_json_file(path, doc);
  std::ostringstream csv;
  csv << "stage,op,in_channels,out_channels,kernel,stride,resolution,macs\n";
  const auto stages = enumerate_stage_ops(arch, c.search_space);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (const auto& op : stages[s]) {
      csv << s << "," << to_string(op.kind) << "," << op.in_channels << "," << op.out_channels << "," << op.kernel
          << "," << op.stride << "," << op.resolution << "," << op.macs() << "\n";
    }
  }
  write_text_file(dir / (name + "_ops.csv"), csv.str());
  write_manifest(c.out);
  return path;
}

}  // namespace enas4d
