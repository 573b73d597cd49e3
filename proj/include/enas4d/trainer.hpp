#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "enas4d/data.hpp"
#include "enas4d/errors.hpp"
#include "enas4d/serialize.hpp"
#include "enas4d/supernet.hpp"

namespace enas4d {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 64;
  double initial_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 3e-5;
  double kd_weight = 1.0;
  double kd_temperature = 1.0;
  std::uint64_t seed = 0;
  int max_steps_per_epoch = 0;  // 0: one full pass over the data

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be positive");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be positive");
    if (!(initial_lr > 0.0)) throw ConfigError("TrainConfig: initial_lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("TrainConfig: momentum in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (kd_weight < 0.0) throw ConfigError("TrainConfig: kd_weight must be >= 0");
    if (!(kd_temperature > 0.0)) throw ConfigError("TrainConfig: kd_temperature must be positive");
    if (max_steps_per_epoch < 0) throw ConfigError("TrainConfig: max_steps_per_epoch must be >= 0");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"initial_lr", c.initial_lr},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"kd_weight", c.kd_weight},
       {"kd_temperature", c.kd_temperature},
       {"seed", c.seed},
       {"max_steps_per_epoch", c.max_steps_per_epoch}};
}
inline void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.initial_lr = j.value("initial_lr", d.initial_lr);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.kd_weight = j.value("kd_weight", d.kd_weight);
  c.kd_temperature = j.value("kd_temperature", d.kd_temperature);
  c.seed = j.value("seed", d.seed);
  c.max_steps_per_epoch = j.value("max_steps_per_epoch", d.max_steps_per_epoch);
}

// lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)).
inline double cosine_lr(double initial_lr, long step, long total_steps) {
  if (total_steps <= 0) return initial_lr;
  return initial_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// SGD with Nesterov momentum. Decay is skipped for parameters flagged
// decay = false.
template <typename T>
class NesterovSgd {
 public:
  NesterovSgd(std::vector<Var<T>> params, std::vector<ParameterInfo> info, double momentum, double weight_decay)
      : params_(std::move(params)), info_(std::move(info)), momentum_(momentum), weight_decay_(weight_decay) {
    if (params_.size() != info_.size()) throw std::invalid_argument("NesterovSgd: parameter info count");
    for (const auto& p : params_) velocity_.emplace_back(p.value().size(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      Tensor<T>& w = p.mutable_value();
      const Tensor<T>& g = p.grad();
      auto& v = velocity_[i];
      const double wd = info_[i].decay ? weight_decay_ : 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double d = static_cast<double>(g[k]) + wd * static_cast<double>(w[k]);
        v[k] = momentum_ * v[k] + d;
        w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * (d + momentum_ * v[k]));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<ParameterInfo> info_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

// Thrown when a stage's loss is NaN or infinite; the step is not applied.
struct NonFiniteLossError : InvariantError {
  int stage;
  NonFiniteLossError(int s, double value)
      : InvariantError("non-finite loss " + std::to_string(value) + " at stage " + std::to_string(s)), stage(s) {}
};

struct StepResult {
  double total_loss = 0.0;
  std::vector<double> stage_losses;
  std::vector<int> stage_correct;  // top-1 hits per stage on the batch
  MultiStageArch arch;
};

// Final-stage logits of the maximal architecture at `resolution`, with batch
// statistics and no graph.
template <typename T>
Tensor<T> teacher_logits(Supernet<T>& supernet, const Tensor<T>& images, int resolution) {
  NoGradGuard guard;
  MultiStageArch teacher = maximal_arch(supernet.config());
  teacher.resolution = resolution;
  auto net = supernet.materialize(teacher);
  net.set_mode(NormMode::batch_frozen);
  auto logits = net.forward_all(Var<T>::constant(images));
  return logits.back().value();
}

// Sum over stages of CE(logits_s, labels) + lambda * tau^2 * KL(student_s || teacher).
template <typename T>
Var<T> multi_stage_loss(const std::vector<Var<T>>& logits, std::span<const int> labels, const Tensor<T>* teacher,
                        double kd_weight, double temperature, std::vector<double>* stage_losses = nullptr) {
  Var<T> total;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    Var<T> l = ops::cross_entropy(logits[s], labels);
    if (teacher && kd_weight > 0.0) {
      l = ops::add(l, ops::scale(ops::kl_divergence(logits[s], *teacher, temperature),
                                 static_cast<T>(kd_weight * temperature * temperature)));
    }
    const double v = static_cast<double>(l.value()[0]);
    if (!std::isfinite(v)) throw NonFiniteLossError(static_cast<int>(s), v);
    if (stage_losses) stage_losses->push_back(v);
    total = total ? ops::add(total, l) : l;
  }
  return total;
}

// One optimization step on a given architecture. images are at the maximal
// resolution and resized to arch.resolution here.
template <typename T>
StepResult train_step_on(Supernet<T>& supernet, NesterovSgd<T>& opt, const Tensor<T>& images,
                         const std::vector<int>& labels, const MultiStageArch& arch, const TrainConfig& cfg, double lr) {
  const int R = arch.resolution;
  Tensor<T> x = ops::resize_bilinear(images, R, R);
  Tensor<T> teacher;
  const bool use_kd = cfg.kd_weight > 0.0;
  if (use_kd) teacher = teacher_logits(supernet, x, R);
  auto net = supernet.materialize(arch);
  net.set_mode(NormMode::train);
  auto logits = net.forward_all(Var<T>::constant(x));
  StepResult res;
  res.arch = arch;
  Var<T> total = multi_stage_loss<T>(logits, labels, use_kd ? &teacher : nullptr, cfg.kd_weight, cfg.kd_temperature,
                                     &res.stage_losses);
  res.total_loss = static_cast<double>(total.value()[0]);
  for (const auto& l : logits) {
    int hits = 0;
    const auto preds = to_predictions(l.value());
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i].predicted_class == labels[i];
    res.stage_correct.push_back(hits);
  }
  opt.zero_grad();
  backward(total);
  opt.step(lr);
  return res;
}

// Samples one architecture from rng and trains on it.
template <typename T, typename Rng>
StepResult train_step(Supernet<T>& supernet, NesterovSgd<T>& opt, const Tensor<T>& images,
                      const std::vector<int>& labels, Rng& rng, const TrainConfig& cfg, double lr) {
  const MultiStageArch arch = sample_arch(supernet.config(), rng);
  return train_step_on(supernet, opt, images, labels, arch, cfg, lr);
}

// ---------------------------------------------------------------------------
// Checkpoint: a magic line, one JSON header line, then float32 payload
// (parameters in registration order, then running mean and variance of every
// normalization).

inline constexpr const char* kCheckpointMagic = "enas4d-checkpoint 1";

struct CheckpointMeta {
  SearchSpaceConfig search_space;
  TrainConfig train;
  std::string rng_state;
  long step = 0;
};

template <typename T>
void save_checkpoint(Supernet<T>& supernet, const CheckpointMeta& meta, const std::filesystem::path& path) {
  json params = json::array();
  const auto& info = supernet.parameter_info();
  std::vector<float> payload;
  for (std::size_t i = 0; i < supernet.parameters().size(); ++i) {
    const auto& v = supernet.parameters()[i].value();
    params.push_back({{"name", info[i].name}, {"shape", v.shape()}});
    payload.insert(payload.end(), v.storage().begin(), v.storage().end());
  }
  json norms = json::array();
  auto ptrs = supernet.norms();
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    norms.push_back({{"name", supernet.norm_names()[i]}, {"channels", ptrs[i]->running_mean.size()}});
    payload.insert(payload.end(), ptrs[i]->running_mean.begin(), ptrs[i]->running_mean.end());
    payload.insert(payload.end(), ptrs[i]->running_var.begin(), ptrs[i]->running_var.end());
  }
  const json header = {{"search_space", meta.search_space}, {"train", meta.train}, {"rng_state", meta.rng_state},
                       {"step", meta.step},                 {"params", params},    {"norms", norms},
                       {"floats", payload.size()}};
  std::string content = std::string(kCheckpointMagic) + "\n" + header.dump() + "\n";
  const auto offset = content.size();
  content.resize(offset + payload.size() * sizeof(float));
  std::memcpy(content.data() + offset, payload.data(), payload.size() * sizeof(float));
  write_text_file(path, content);
}

struct LoadedCheckpoint {
  Supernet<float> supernet;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  const std::string content = read_text_file(path);
  const auto nl1 = content.find('\n');
  if (nl1 == std::string::npos || content.substr(0, nl1) != kCheckpointMagic) {
    throw DataError(path.string() + ": not a supernet checkpoint");
  }
  const auto nl2 = content.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw DataError(path.string() + ": truncated header");
  json header;
  CheckpointMeta meta;
  try {
    header = json::parse(content.substr(nl1 + 1, nl2 - nl1 - 1));
    meta.search_space = header.at("search_space").get<SearchSpaceConfig>();
    meta.train = header.at("train").get<TrainConfig>();
    meta.rng_state = header.at("rng_state").get<std::string>();
    meta.step = header.at("step").get<long>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed header: " + e.what());
  }
  const std::size_t floats = header.at("floats").get<std::size_t>();
  if (content.size() - (nl2 + 1) != floats * sizeof(float)) throw DataError(path.string() + ": payload size mismatch");
  const float* data = reinterpret_cast<const float*>(content.data() + nl2 + 1);
  std::vector<float> payload(data, data + floats);

  Supernet<float> net(meta.search_space, 0);
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    if (pos + n > payload.size()) throw DataError(path.string() + ": payload too short");
    const float* p = payload.data() + pos;
    pos += n;
    return p;
  };
  const auto& params = header.at("params");
  if (params.size() != net.parameters().size()) throw DataError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = net.parameters()[i].mutable_value();
    if (params[i].at("name").get<std::string>() != net.parameter_info()[i].name ||
        params[i].at("shape").get<std::vector<int>>() != v.shape()) {
      throw DataError(path.string() + ": parameter " + params[i].at("name").get<std::string>() + " does not match");
    }
    const float* p = take(v.size());
    std::copy(p, p + v.size(), v.data());
  }
  auto ptrs = net.norms();
  if (header.at("norms").size() != ptrs.size()) throw DataError(path.string() + ": normalization count mismatch");
  for (auto* n : ptrs) {
    const float* m = take(n->running_mean.size());
    std::copy(m, m + n->running_mean.size(), n->running_mean.begin());
    const float* v = take(n->running_var.size());
    std::copy(v, v + n->running_var.size(), n->running_var.begin());
  }
  if (pos != payload.size()) throw DataError(path.string() + ": trailing payload");
  return {std::move(net), meta};
}

// ---------------------------------------------------------------------------

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0.0;
  std::vector<double> stage_accuracy;  // on the sampled training sub-networks
};

struct TrainReport {
  long steps = 0;
  std::vector<double> step_losses;
  std::vector<double> step_lrs;
  std::vector<EpochSummary> epochs;
  double seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path log_csv;     // appended; header written when new
  std::filesystem::path checkpoint;  // written at the end when non-empty
  std::ostream* progress = nullptr;
};

inline int steps_per_epoch(std::size_t dataset_size, const TrainConfig& cfg) {
  int steps = static_cast<int>(dataset_size / static_cast<std::size_t>(cfg.batch_size));
  if (steps == 0) steps = 1;  // smaller than one batch: train on everything
  if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, cfg.max_steps_per_epoch);
  return steps;
}

template <typename T>
TrainReport train_supernet(Supernet<T>& supernet, const Dataset& data, const TrainConfig& cfg,
                           const TrainOptions& opt = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("train_supernet: dataset is empty");
  const auto& sc = supernet.config();
  if (data.height != sc.max_resolution() || data.width != sc.max_resolution() || data.channels != sc.input_channels) {
    throw DataError("train_supernet: images must be " + std::to_string(sc.input_channels) + "x" +
                    std::to_string(sc.max_resolution()) + "x" + std::to_string(sc.max_resolution()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  NesterovSgd<T> sgd(supernet.parameters(), supernet.parameter_info(), cfg.momentum, cfg.weight_decay);
  const int spe = steps_per_epoch(data.size(), cfg);
  const long total = static_cast<long>(spe) * cfg.epochs;
  const int S = sc.stages;

  std::ofstream log;
  if (!opt.log_csv.empty()) {
    if (opt.log_csv.has_parent_path()) std::filesystem::create_directories(opt.log_csv.parent_path());
    const bool fresh = !std::filesystem::exists(opt.log_csv) || std::filesystem::file_size(opt.log_csv) == 0;
    log.open(opt.log_csv, std::ios::app);
    if (!log) throw DataError("cannot open training log " + opt.log_csv.string());
    if (fresh) {
      log << "epoch,step,lr,total_loss";
      for (int s = 0; s < S; ++s) log << ",loss_stage" << s;
      log << "\n";
    }
    log << std::setprecision(9);
  }

  TrainReport report;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  long t = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochSummary es{e, 0.0, std::vector<double>(S, 0.0)};
    std::size_t seen = 0;
    for (int k = 0; k < spe; ++k, ++t) {
      const std::size_t begin = static_cast<std::size_t>(k) * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
      const Tensor<T> images = data.batch<T>(idx);
      const std::vector<int> labels = data.batch_labels(idx);
      const double lr = cosine_lr(cfg.initial_lr, t, total);
      const StepResult r = train_step(supernet, sgd, images, labels, rng, cfg, lr);
      report.step_losses.push_back(r.total_loss);
      report.step_lrs.push_back(lr);
      es.mean_loss += r.total_loss;
      for (int s = 0; s < S; ++s) es.stage_accuracy[s] += r.stage_correct[s];
      seen += idx.size();
      if (log.is_open()) {
        log << e << "," << t << "," << lr << "," << r.total_loss;
        for (double l : r.stage_losses) log << "," << l;
        log << "\n";
      }
    }
    es.mean_loss /= spe;
    for (auto& a : es.stage_accuracy) a /= static_cast<double>(seen);
    if (opt.progress) {
      *opt.progress << "epoch " << e << " loss " << es.mean_loss << " acc";
      for (double a : es.stage_accuracy) *opt.progress << " " << a;
      *opt.progress << "\n";
    }
    report.epochs.push_back(std::move(es));
  }
  report.steps = t;
  if (log.is_open() && !log.flush()) throw DataError("write failed for " + opt.log_csv.string());
  if (!opt.checkpoint.empty()) {
    std::ostringstream rs;
    rs << rng;
    save_checkpoint(supernet, {sc, cfg, rs.str(), t}, opt.checkpoint);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Per-stage top-1 accuracy of arch without early exit, after recalibrating
// normalization statistics on `calibration` (maximal-resolution batches).
template <typename T>
std::vector<double> static_stage_accuracy(Supernet<T>& supernet, const MultiStageArch& arch, const Dataset& data,
                                          const std::vector<Tensor<T>>& calibration, int batch_size = 100) {
  NoGradGuard guard;
  auto net = supernet.materialize(arch);
  const int R = arch.resolution;
  std::vector<Tensor<T>> calib;
  for (const auto& b : calibration) calib.push_back(ops::resize_bilinear(b, R, R));
  recalibrate_norms(net, calib);
  net.set_mode(NormMode::eval);
  std::vector<double> hits(net.stages(), 0.0);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    auto logits = net.forward_all(Var<T>::constant(ops::resize_bilinear(data.batch<T>(idx), R, R)));
    for (int s = 0; s < net.stages(); ++s) {
      const auto preds = to_predictions(logits[s].value());
      for (std::size_t i = 0; i < idx.size(); ++i) hits[s] += preds[i].predicted_class == data.labels[idx[i]];
    }
  }
  for (auto& h : hits) h /= static_cast<double>(data.size());
  return hits;
}

}  // namespace enas4d
