#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "enas4d/dyninfer.hpp"
#include "enas4d/serialize.hpp"
#include "enas4d/supernet.hpp"

namespace enas4d {

// ---------------------------------------------------------------------------
// Metric

struct MetricConfig {
  double omega = 0.09;
  double cost_target = std::numeric_limits<double>::infinity();
  CostKind cost_kind = CostKind::macs;

  void validate() const {
    if (!(omega >= 0.0)) throw std::invalid_argument("MetricConfig: omega must be >= 0");
    if (!(cost_target > 0.0)) throw std::invalid_argument("MetricConfig: cost_target must be > 0");
  }
  bool operator==(const MetricConfig&) const = default;
};

inline void to_json(json& j, const MetricConfig& m) {
  j = {{"omega", m.omega}, {"cost_kind", to_string(m.cost_kind)}};
  // JSON has no infinity; an absent target means unbounded.
  if (std::isfinite(m.cost_target)) j["cost_target"] = m.cost_target;
}
inline void from_json(const json& j, MetricConfig& m) {
  m.omega = j.value("omega", 0.09);
  m.cost_target = j.contains("cost_target") && !j.at("cost_target").is_null() ? j.at("cost_target").get<double>()
                                                                             : std::numeric_limits<double>::infinity();
  m.cost_kind = parse_cost_kind(j.value("cost_kind", std::string("macs")));
}

// Per-stage exit counts and accuracy among the samples exiting there.
struct ExitSummary {
  std::vector<std::int64_t> exits;
  std::vector<double> accuracy;  // fraction; 0 where exits[s] == 0
  std::int64_t total = 0;

  int stages() const { return static_cast<int>(exits.size()); }
  double fraction(int s) const { return total == 0 ? 0.0 : static_cast<double>(exits[s]) / total; }
  bool operator==(const ExitSummary&) const = default;
};

// Builds a summary from per-stage exit and correct counts.
inline ExitSummary make_summary(const std::vector<std::int64_t>& exits, const std::vector<std::int64_t>& correct) {
  ExitSummary s;
  s.exits = exits;
  s.accuracy.resize(exits.size(), 0.0);
  for (std::size_t i = 0; i < exits.size(); ++i) {
    s.total += exits[i];
    if (exits[i] > 0) s.accuracy[i] = static_cast<double>(correct[i]) / exits[i];
  }
  return s;
}

struct AverageMetrics {
  double acc = 0.0;   // fraction
  double cost = 0.0;  // unit of the cost profile
};

// ACC_avg = Σ ACC_s N_s / |D|, COST_avg = Σ COST_s N_s / |D|.
inline AverageMetrics average_metrics(const ExitSummary& summary, const CostProfile& costs) {
  if (summary.total <= 0) throw std::invalid_argument("average_metrics: empty dataset");
  if (costs.stages() != summary.stages()) throw std::invalid_argument("average_metrics: stage count mismatch");
  double acc = 0, cost = 0;
  std::int64_t n = 0;
  for (int s = 0; s < summary.stages(); ++s) {
    acc += summary.accuracy[s] * static_cast<double>(summary.exits[s]);
    cost += costs.cumulative[s] * static_cast<double>(summary.exits[s]);
    n += summary.exits[s];
  }
  if (n != summary.total) throw std::invalid_argument("average_metrics: exit counts do not sum to |D|");
  return {acc / static_cast<double>(summary.total), cost / static_cast<double>(summary.total)};
}

// R = ACC_avg · min(target / COST_avg, 1)^ω.
inline double metric_R(double acc_avg, double cost_avg, const MetricConfig& cfg) {
  if (!(cost_avg > 0.0)) throw std::invalid_argument("metric_R: COST_avg must be > 0");
  const double ratio = std::min(cfg.cost_target / cost_avg, 1.0);
  return acc_avg * std::pow(ratio, cfg.omega);
}

// ---------------------------------------------------------------------------
// Records

struct EvalRecord {
  int arch_id = 0;
  int sample_id = 0;
  std::vector<float> conf;
  std::vector<bool> correct;

  bool operator==(const EvalRecord&) const = default;
};

// All records of one architecture, stored column-compact.
class RecordSet {
 public:
  RecordSet() = default;
  RecordSet(int arch_id, int stages) : arch_id_(arch_id), stages_(stages) {
    if (stages < 1) throw std::invalid_argument("RecordSet: stage count");
  }

  int arch_id() const { return arch_id_; }
  int stages() const { return stages_; }
  std::size_t size() const { return sample_ids_.size(); }
  bool empty() const { return sample_ids_.empty(); }

  void add(const EvalRecord& r) {
    if (r.arch_id != arch_id_) throw std::invalid_argument("RecordSet: record of arch " + std::to_string(r.arch_id));
    if (static_cast<int>(r.conf.size()) != stages_ || static_cast<int>(r.correct.size()) != stages_) {
      throw std::invalid_argument("RecordSet: record has wrong stage count");
    }
    sample_ids_.push_back(r.sample_id);
    conf_.insert(conf_.end(), r.conf.begin(), r.conf.end());
    for (bool c : r.correct) correct_.push_back(c ? 1 : 0);
  }

  int sample_id(std::size_t i) const { return sample_ids_[i]; }
  float conf(std::size_t i, int s) const { return conf_[i * stages_ + s]; }
  bool correct(std::size_t i, int s) const { return correct_[i * stages_ + s] != 0; }

  EvalRecord record(std::size_t i) const {
    EvalRecord r{arch_id_, sample_ids_[i], {}, {}};
    for (int s = 0; s < stages_; ++s) {
      r.conf.push_back(conf(i, s));
      r.correct.push_back(correct(i, s));
    }
    return r;
  }

  bool operator==(const RecordSet&) const = default;

 private:
  int arch_id_ = 0;
  int stages_ = 1;
  std::vector<int> sample_ids_;
  std::vector<float> conf_;
  std::vector<std::uint8_t> correct_;
};

inline ExitSummary simulate_exits(const RecordSet& records, const ThresholdVector& thresholds) {
  if (records.empty()) throw std::invalid_argument("simulate_exits: no records");
  const int S = records.stages();
  if (static_cast<int>(thresholds.size()) != S - 1) throw std::invalid_argument("simulate_exits: threshold count");
  std::vector<std::int64_t> exits(S, 0), correct(S, 0);
  std::vector<double> conf(S);
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (int s = 0; s < S; ++s) conf[s] = records.conf(i, s);
    const int e = exit_stage_for(conf, thresholds);
    ++exits[e];
    correct[e] += records.correct(i, e) ? 1 : 0;
  }
  return make_summary(exits, correct);
}

struct GridSearchResult {
  ThresholdVector thresholds;
  double R = 0.0;
  ExitSummary summary;
  AverageMetrics metrics;
};

// True when candidate (R, cost, thresholds) beats the incumbent: higher R,
// then lower COST_avg, then lexicographically smaller thresholds.
inline bool better_threshold_choice(double r, double cost, const ThresholdVector& t, const GridSearchResult& best) {
  if (r != best.R) return r > best.R;
  if (cost != best.metrics.cost) return cost < best.metrics.cost;
  return t < best.thresholds;
}

// Exhaustive search over grid^(S-1). Records are bucketed by, per stage, the
// number of grid values below their confidence, so each combination costs
// one pass over the occupied buckets.
inline GridSearchResult grid_search_thresholds(const RecordSet& records, const CostProfile& costs,
                                               const MetricConfig& cfg, std::vector<double> grid) {
  if (records.empty()) throw std::invalid_argument("grid_search_thresholds: no records");
  if (grid.empty()) throw std::invalid_argument("grid_search_thresholds: empty grid");
  const int S = records.stages();
  if (costs.stages() != S) throw std::invalid_argument("grid_search_thresholds: cost profile stage count");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const int G = static_cast<int>(grid.size());
  const int E = S - 1;  // free thresholds

  // Bucket key: base-(G+1) digits k_0..k_{E-1}.
  std::size_t cells = 1;
  for (int s = 0; s < E; ++s) cells *= static_cast<std::size_t>(G + 1);
  std::vector<std::int64_t> count(cells, 0), correct(cells * S, 0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::size_t key = 0;
    for (int s = 0; s < E; ++s) {
      const double c = records.conf(i, s);
      const auto k = static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), c) - grid.begin());
      key = key * (G + 1) + k;
    }
    ++count[key];
    for (int s = 0; s < S; ++s) correct[key * S + s] += records.correct(i, s) ? 1 : 0;
  }
  struct Cell {
    std::vector<int> k;
    std::int64_t n;
    std::vector<std::int64_t> correct;
  };
  std::vector<Cell> occupied;
  for (std::size_t key = 0; key < cells; ++key) {
    if (count[key] == 0) continue;
    Cell c{std::vector<int>(E), count[key], std::vector<std::int64_t>(correct.begin() + key * S,
                                                                  correct.begin() + (key + 1) * S)};
    std::size_t rest = key;
    for (int s = E - 1; s >= 0; --s) {
      c.k[s] = static_cast<int>(rest % (G + 1));
      rest /= (G + 1);
    }
    occupied.push_back(std::move(c));
  }

  GridSearchResult best;
  bool have = false;
  std::vector<int> j(E, 0);
  std::vector<std::int64_t> exits(S), corr(S);
  ThresholdVector t(E);
  while (true) {
    std::fill(exits.begin(), exits.end(), 0);
    std::fill(corr.begin(), corr.end(), 0);
    for (const auto& c : occupied) {
      int e = E;
      for (int s = 0; s < E; ++s) {
        if (j[s] < c.k[s]) {  // grid[j] < conf
          e = s;
          break;
        }
      }
      exits[e] += c.n;
      corr[e] += c.correct[e];
    }
    for (int s = 0; s < E; ++s) t[s] = grid[j[s]];
    ExitSummary summary = make_summary(exits, corr);
    const AverageMetrics m = average_metrics(summary, costs);
    const double r = metric_R(m.acc, m.cost, cfg);
    if (!have || better_threshold_choice(r, m.cost, t, best)) {
      best = {t, r, std::move(summary), m};
      have = true;
    }
    int pos = E - 1;
    while (pos >= 0 && j[pos] == G - 1) j[pos--] = 0;
    if (pos < 0) break;
    ++j[pos];
  }
  return best;
}

// {0, 0.05, ..., 1.0, 1.1}; 1.1 means "never exit here".
inline std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(i / 20.0);
  g.push_back(1.1);
  return g;
}

// ---------------------------------------------------------------------------
// Database

struct RegistryEntry {
  int arch_id = 0;
  MultiStageArch arch;
  CostProfile macs;
  std::optional<CostProfile> latency;
};

struct EvalDatabase {
  static constexpr int kVersion = 1;

  SearchSpaceConfig config;
  int num_samples = 0;
  std::string latency_device;
  std::vector<RegistryEntry> registry;
  std::map<int, RecordSet> records;

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& [id, r] : records) n += r.size();
    return n;
  }

  const RegistryEntry& entry(int arch_id) const {
    for (const auto& e : registry) {
      if (e.arch_id == arch_id) return e;
    }
    throw std::out_of_range("EvalDatabase: unknown arch_id " + std::to_string(arch_id));
  }

  // Cost profile of the requested kind; latency profiles missing from the
  // registry are derived from `table` when one is given.
  CostProfile costs(int arch_id, CostKind kind, const LatencyTable* table = nullptr) const {
    const auto& e = entry(arch_id);
    if (kind == CostKind::macs) return e.macs;
    if (e.latency) return *e.latency;
    if (!table) {
      throw std::invalid_argument("EvalDatabase: arch " + std::to_string(arch_id) +
                                  " has no latency profile and no latency table was given");
    }
    return profile_latency(e.arch, config, *table);
  }

  void add(RegistryEntry e, RecordSet r) {
    if (records.count(e.arch_id)) throw std::invalid_argument("EvalDatabase: duplicate arch_id " + std::to_string(e.arch_id));
    if (r.arch_id() != e.arch_id) throw std::invalid_argument("EvalDatabase: record set / registry id mismatch");
    records.emplace(e.arch_id, std::move(r));
    registry.push_back(std::move(e));
  }
};

namespace detail {

inline std::string records_file_name(int arch_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "arch_%05d.jsonl", arch_id);
  return buf;
}

inline void append_float(std::string& out, float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  out += buf;
}

inline std::string format_record(int arch_id, int sample_id, const RecordSet& r, std::size_t i) {
  std::string line = "{\"arch_id\":" + std::to_string(arch_id) + ",\"sample_id\":" + std::to_string(sample_id) +
                     ",\"conf\":[";
  for (int s = 0; s < r.stages(); ++s) {
    if (s) line += ',';
    append_float(line, r.conf(i, s));
  }
  line += "],\"correct\":[";
  for (int s = 0; s < r.stages(); ++s) {
    if (s) line += ',';
    line += r.correct(i, s) ? "true" : "false";
  }
  line += "]}\n";
  return line;
}

}  // namespace detail

inline std::string serialize_records(const RecordSet& r) {
  json header = {{"format", "enas4d-records"}, {"version", EvalDatabase::kVersion}, {"arch_id", r.arch_id()},
                 {"stages", r.stages()}, {"samples", r.size()}};
  std::string out = header.dump() + "\n";
  for (std::size_t i = 0; i < r.size(); ++i) out += detail::format_record(r.arch_id(), r.sample_id(i), r, i);
  return out;
}

inline RecordSet parse_records(const std::string& text, const std::string& origin) {
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    const auto end = text.find('\n', pos);
    line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() : end + 1;
    return true;
  };
  std::string line;
  if (!next_line(line)) throw DataError(origin + ": empty record file");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(origin + ": malformed header: " + e.what());
  }
  if (header.value("format", "") != "enas4d-records" || header.value("version", 0) != EvalDatabase::kVersion) {
    throw DataError(origin + ": unsupported record file format");
  }
  RecordSet r(header.at("arch_id").get<int>(), header.at("stages").get<int>());
  std::size_t lineno = 1;
  while (next_line(line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      EvalRecord rec;
      rec.arch_id = j.at("arch_id").get<int>();
      rec.sample_id = j.at("sample_id").get<int>();
      rec.conf = j.at("conf").get<std::vector<float>>();
      rec.correct = j.at("correct").get<std::vector<bool>>();
      r.add(rec);
    } catch (const std::exception& e) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (r.size() != header.at("samples").get<std::size_t>()) throw DataError(origin + ": record count differs from header");
  return r;
}

inline json registry_json(const EvalDatabase& db) {
  json archs = json::array();
  for (const auto& e : db.registry) {
    json costs = {{"macs", e.macs.cumulative}};
    if (e.latency) costs["latency"] = e.latency->cumulative;
    archs.push_back({{"arch_id", e.arch_id}, {"arch", e.arch}, {"costs", costs}});
  }
  json j = {{"format", "enas4d-registry"}, {"version", EvalDatabase::kVersion}, {"search_space", db.config},
            {"num_samples", db.num_samples}, {"archs", archs}};
  if (!db.latency_device.empty()) j["latency_device"] = db.latency_device;
  return j;
}

inline void save_database(const EvalDatabase& db, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "records");
  for (const auto& [id, r] : db.records) write_text_file(dir / "records" / detail::records_file_name(id), serialize_records(r));
  write_json_file(dir / "registry.json", registry_json(db));
}

inline EvalDatabase load_database(const std::filesystem::path& dir) {
  const auto reg_path = dir / "registry.json";
  if (!std::filesystem::exists(reg_path)) throw DataError("no database registry at " + reg_path.string());
  const json j = read_json_file(reg_path);
  if (j.value("format", "") != "enas4d-registry" || j.value("version", 0) != EvalDatabase::kVersion) {
    throw DataError(reg_path.string() + ": unsupported registry format");
  }
  EvalDatabase db;
  try {
    db.config = j.at("search_space").get<SearchSpaceConfig>();
    db.num_samples = j.at("num_samples").get<int>();
    db.latency_device = j.value("latency_device", std::string());
    for (const auto& a : j.at("archs")) {
      RegistryEntry e;
      e.arch_id = a.at("arch_id").get<int>();
      e.arch = canonicalize_arch(a.at("arch").get<MultiStageArch>(), db.config);
      e.macs = {CostKind::macs, a.at("costs").at("macs").get<std::vector<double>>()};
      if (a.at("costs").contains("latency")) {
        e.latency = CostProfile{CostKind::latency, a.at("costs").at("latency").get<std::vector<double>>()};
      }
      const auto path = dir / "records" / detail::records_file_name(e.arch_id);
      db.add(std::move(e), parse_records(read_text_file(path), path.string()));
    }
  } catch (const json::exception& e) {
    throw DataError(reg_path.string() + ": " + e.what());
  }
  return db;
}

// ---------------------------------------------------------------------------
// Building

struct DbBuildOptions {
  int batch_size = 100;
  // Batches at the maximal resolution used to recalibrate normalization
  // statistics of every materialized view (resized per architecture).
  std::vector<Tensor<float>> calibration_batches;
  const LatencyTable* latency_table = nullptr;
  std::ostream* log = &std::cerr;
};

// Per-stage confidence and correctness of arch on every image, without exits.
template <typename T>
RecordSet evaluate_arch_records(Supernet<T>& supernet, const MultiStageArch& arch, int arch_id,
                                const Tensor<T>& images, const std::vector<int>& labels,
                                const std::vector<int>& sample_ids, const DbBuildOptions& opt) {
  NoGradGuard guard;
  auto net = supernet.materialize(arch);
  const int R = arch.resolution;
  std::vector<Tensor<T>> calib;
  for (const auto& b : opt.calibration_batches) calib.push_back(ops::resize_bilinear(b.template cast<T>(), R, R));
  recalibrate_norms(net, calib);
  net.set_mode(NormMode::eval);
  const int N = images.dim(0), S = net.stages();
  RecordSet out(arch_id, S);
  const std::size_t per = images.size() / std::max(1, N);
  for (int start = 0; start < N; start += opt.batch_size) {
    const int n = std::min(opt.batch_size, N - start);
    std::vector<int> shape = images.shape();
    shape[0] = n;
    Tensor<T> batch(shape);
    std::copy(images.data() + start * per, images.data() + (start + n) * per, batch.data());
    auto logits = net.forward_all(Var<T>::constant(ops::resize_bilinear(batch, R, R)));
    std::vector<std::vector<StagePrediction>> preds;
    for (const auto& l : logits) preds.push_back(to_predictions(l.value()));
    for (int i = 0; i < n; ++i) {
      EvalRecord rec{arch_id, sample_ids[start + i], {}, {}};
      for (int s = 0; s < S; ++s) {
        const auto& p = preds[s][i];
        if (!std::isfinite(p.confidence)) throw InvariantError("non-finite confidence");
        rec.conf.push_back(static_cast<float>(p.confidence));
        rec.correct.push_back(p.predicted_class == labels[start + i]);
      }
      out.add(rec);
    }
  }
  return out;
}

// Evaluates every (id, arch) without early exit. Architectures whose
// inference fails are logged and skipped.
template <typename T>
EvalDatabase build_eval_db(Supernet<T>& supernet, const std::vector<std::pair<int, MultiStageArch>>& archs,
                           const Tensor<T>& images, const std::vector<int>& labels, const std::vector<int>& sample_ids,
                           const DbBuildOptions& opt = {}) {
  if (images.dim(0) != static_cast<int>(labels.size()) || labels.size() != sample_ids.size()) {
    throw std::invalid_argument("build_eval_db: images, labels and sample ids differ in length");
  }
  EvalDatabase db;
  db.config = supernet.config();
  db.num_samples = static_cast<int>(labels.size());
  if (opt.latency_table) db.latency_device = opt.latency_table->device;
  for (const auto& [id, arch] : archs) {
    if (db.records.count(id)) throw std::invalid_argument("build_eval_db: duplicate arch_id " + std::to_string(id));
    RegistryEntry e{id, arch, count_macs(arch, db.config), std::nullopt};
    if (opt.latency_table) e.latency = profile_latency(arch, db.config, *opt.latency_table);
    RecordSet r;
    try {
      r = evaluate_arch_records(supernet, arch, id, images, labels, sample_ids, opt);
    } catch (const std::exception& ex) {
      if (opt.log) *opt.log << "warning: skipping arch " << id << ": " << ex.what() << "\n";
      continue;
    }
    db.add(std::move(e), std::move(r));
  }
  return db;
}

}  // namespace enas4d
