#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "enas4d/evaldb.hpp"
#include "enas4d/search_space.hpp"
#include "enas4d/serialize.hpp"

namespace enas4d {

// ---------------------------------------------------------------------------
// Encoding

struct EncodingBlock {
  std::string name;  // e.g. "depth[1][0]"
  int offset = 0;
  int size = 0;
  bool operator==(const EncodingBlock&) const = default;
};

struct EncodingLayout {
  std::vector<EncodingBlock> blocks;
  int length = 0;
  bool operator==(const EncodingLayout&) const = default;
};

inline EncodingLayout encoding_layout(const SearchSpaceConfig& cfg) {
  EncodingLayout l;
  auto add = [&](std::string name, std::size_t size) {
    l.blocks.push_back({std::move(name), l.length, static_cast<int>(size)});
    l.length += static_cast<int>(size);
  };
  auto idx = [](std::initializer_list<std::size_t> v) {
    std::string s;
    for (auto i : v) s += "[" + std::to_string(i) + "]";
    return s;
  };
  add("resolution", cfg.resolution_pool.size());
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    for (int s = 0; s < cfg.stages; ++s) add("depth" + idx({g, std::size_t(s)}), cfg.depth_pool.size());
  }
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    for (int b = 0; b < cfg.groups[g].blocks; ++b) add("kernel" + idx({g, std::size_t(b)}), cfg.kernel_pool.size());
  }
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    for (int b = 0; b < cfg.groups[g].blocks; ++b) {
      for (int s = 0; s < cfg.stages; ++s) {
        add("ratio" + idx({g, std::size_t(b), std::size_t(s)}), cfg.ratio_pool.size());
      }
    }
  }
  return l;
}

using ArchEncoding = std::vector<float>;

inline ArchEncoding encode_arch(const MultiStageArch& arch, const SearchSpaceConfig& cfg) {
  validate_arch(arch, cfg);
  const auto layout = encoding_layout(cfg);
  ArchEncoding v(layout.length, 0.0f);
  std::size_t blk = 0;
  auto hot = [&](int index) { v[layout.blocks[blk++].offset + index] = 1.0f; };
  hot(detail::pool_index(cfg.resolution_pool, arch.resolution));
  for (const auto& d : arch.depths) {
    for (int x : d) hot(detail::pool_index(cfg.depth_pool, x));
  }
  for (const auto& k : arch.kernels) {
    for (int x : k) hot(detail::pool_index(cfg.kernel_pool, x));
  }
  for (const auto& g : arch.cum_ratios) {
    for (const auto& b : g) {
      for (double r : b) hot(detail::pool_index(cfg.ratio_pool, r));
    }
  }
  return v;
}

inline MultiStageArch decode_arch(const ArchEncoding& v, const SearchSpaceConfig& cfg) {
  const auto layout = encoding_layout(cfg);
  if (static_cast<int>(v.size()) != layout.length) throw std::invalid_argument("decode_arch: encoding length");
  std::size_t blk = 0;
  auto read = [&]() {
    const auto& b = layout.blocks[blk++];
    int hot = -1;
    for (int i = 0; i < b.size; ++i) {
      if (v[b.offset + i] != 0.0f) {
        if (hot >= 0 || v[b.offset + i] != 1.0f) throw std::invalid_argument("decode_arch: " + b.name + " is not one-hot");
        hot = i;
      }
    }
    if (hot < 0) throw std::invalid_argument("decode_arch: " + b.name + " has no hot bit");
    return hot;
  };
  MultiStageArch a;
  a.resolution = cfg.resolution_pool[read()];
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    a.depths.emplace_back();
    for (int s = 0; s < cfg.stages; ++s) a.depths[g].push_back(cfg.depth_pool[read()]);
  }
  for (const auto& gc : cfg.groups) {
    a.kernels.emplace_back();
    for (int b = 0; b < gc.blocks; ++b) a.kernels.back().push_back(cfg.kernel_pool[read()]);
  }
  for (const auto& gc : cfg.groups) {
    a.cum_ratios.emplace_back(gc.blocks);
    for (int b = 0; b < gc.blocks; ++b) {
      for (int s = 0; s < cfg.stages; ++s) a.cum_ratios.back()[b].push_back(cfg.ratio_pool[read()]);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Training data

struct TrainingPair {
  int arch_id = 0;
  ArchEncoding encoding;
  double R = 0.0;
};

inline std::vector<TrainingPair> build_training_set(const EvalDatabase& db, const MetricConfig& cfg,
                                                    const std::vector<double>& grid,
                                                    const LatencyTable* table = nullptr) {
  cfg.validate();
  std::vector<TrainingPair> out;
  for (const auto& e : db.registry) {
    const auto costs = db.costs(e.arch_id, cfg.cost_kind, table);
    const auto best = grid_search_thresholds(db.records.at(e.arch_id), costs, cfg, grid);
    out.push_back({e.arch_id, encode_arch(e.arch, db.config), best.R});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct PredictorConfig {
  int hidden_layers = 3;
  int hidden_units = 400;
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double validation_fraction = 0.1;

  void validate() const {
    if (hidden_layers < 1 || hidden_units < 1 || epochs < 1 || batch_size < 1) {
      throw std::invalid_argument("PredictorConfig: dimensions must be positive");
    }
    if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("PredictorConfig: lr/weight_decay");
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
      throw std::invalid_argument("PredictorConfig: validation_fraction in [0,1)");
    }
  }
};

inline void to_json(json& j, const PredictorConfig& c) {
  j = {{"hidden_layers", c.hidden_layers}, {"hidden_units", c.hidden_units}, {"epochs", c.epochs},
       {"batch_size", c.batch_size},       {"lr", c.lr},                     {"weight_decay", c.weight_decay},
       {"validation_fraction", c.validation_fraction}};
}
inline void from_json(const json& j, PredictorConfig& c) {
  PredictorConfig d;
  c.hidden_layers = j.value("hidden_layers", d.hidden_layers);
  c.hidden_units = j.value("hidden_units", d.hidden_units);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
}

// MLP regressor. Targets are standardized internally; predict() returns R.
class MetricPredictor {
 public:
  using Matrix = Eigen::MatrixXd;
  using Vector = Eigen::VectorXd;

  MetricPredictor() = default;
  MetricPredictor(int inputs, const PredictorConfig& cfg, std::uint64_t seed) : config_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    int fan_in = inputs;
    for (int l = 0; l <= cfg.hidden_layers; ++l) {
      const int out = l == cfg.hidden_layers ? 1 : cfg.hidden_units;
      // U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      Matrix w(out, fan_in);
      for (int i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
      Vector b(out);
      for (int i = 0; i < out; ++i) b[i] = u(rng);
      weights_.push_back(std::move(w));
      biases_.push_back(std::move(b));
      fan_in = out;
    }
  }

  int inputs() const { return weights_.empty() ? 0 : static_cast<int>(weights_.front().cols()); }
  const PredictorConfig& config() const { return config_; }
  double label_mean() const { return label_mean_; }
  double label_scale() const { return label_scale_; }
  void set_label_standardization(double mean, double scale) {
    label_mean_ = mean;
    label_scale_ = scale;
  }
  std::vector<Matrix>& weights() { return weights_; }
  std::vector<Vector>& biases() { return biases_; }
  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Vector>& biases() const { return biases_; }

  // Columns of x are samples. Returns standardized outputs; keeps activations
  // for backprop when acts is non-null.
  Eigen::RowVectorXd forward(const Matrix& x, std::vector<Matrix>* acts = nullptr) const {
    Matrix h = x;
    if (acts) acts->assign(1, h);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix z = (weights_[l] * h).colwise() + biases_[l];
      if (l + 1 < weights_.size()) z = z.cwiseMax(0.0);
      h = std::move(z);
      if (acts) acts->push_back(h);
    }
    return h.row(0);
  }

  double predict(const ArchEncoding& enc) const {
    if (static_cast<int>(enc.size()) != inputs()) {
      throw std::invalid_argument("predict_R: encoding length " + std::to_string(enc.size()) + ", model expects " +
                                  std::to_string(inputs()));
    }
    Matrix x(inputs(), 1);
    for (int i = 0; i < inputs(); ++i) x(i, 0) = enc[i];
    return label_mean_ + label_scale_ * forward(x)[0];
  }

  std::vector<double> predict_batch(const std::vector<ArchEncoding>& encs) const {
    Matrix x(inputs(), static_cast<Eigen::Index>(encs.size()));
    for (std::size_t n = 0; n < encs.size(); ++n) {
      if (static_cast<int>(encs[n].size()) != inputs()) throw std::invalid_argument("predict_R: encoding length");
      for (int i = 0; i < inputs(); ++i) x(i, static_cast<Eigen::Index>(n)) = encs[n][i];
    }
    const auto y = forward(x);
    std::vector<double> out(encs.size());
    for (std::size_t n = 0; n < encs.size(); ++n) out[n] = label_mean_ + label_scale_ * y[static_cast<Eigen::Index>(n)];
    return out;
  }

 private:
  PredictorConfig config_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
  double label_mean_ = 0.0;
  double label_scale_ = 1.0;
};

inline double predict_R(const MetricPredictor& m, const ArchEncoding& enc) { return m.predict(enc); }

// Kendall rank correlation (tau-b, tie-corrected).
inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("kendall_tau: length mismatch");
  const std::size_t n = a.size();
  double concordant = 0, discordant = 0, ties_a = 0, ties_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double da = a[i] - a[j], db = b[i] - b[j];
      if (da == 0 && db == 0) continue;
      if (da == 0) {
        ++ties_a;
      } else if (db == 0) {
        ++ties_b;
      } else if ((da > 0) == (db > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
  return denom == 0 ? 0.0 : (concordant - discordant) / denom;
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / pred.size());
}

// Fraction of the true top `fraction` (by R) that also ranks in the
// predicted top `fraction`.
inline double top_fraction_overlap(const std::vector<double>& pred, const std::vector<double>& truth,
                                   double fraction = 0.1) {
  const std::size_t n = pred.size();
  if (n == 0) return 0.0;
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(fraction * n)));
  auto top = [&](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] > v[j]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  const auto a = top(pred), b = top(truth);
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / k;
}

struct PredictorReport {
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  double train_rmse = 0.0;
  double validation_rmse = 0.0;
  double kendall_tau = 0.0;
  double top10_overlap = 0.0;
  std::vector<int> validation_arch_ids;
  bool degenerate_labels = false;
};

struct FitResult {
  MetricPredictor model;
  PredictorReport report;
};

// Adam with L2 weight decay on the RMSE loss, shuffled mini-batches, seeded
// 90/10 (configurable) split.
inline FitResult fit_predictor(const std::vector<TrainingPair>& pairs, const PredictorConfig& cfg, std::uint64_t seed,
                               std::ostream* log = &std::cerr) {
  cfg.validate();
  if (pairs.size() < 20) throw std::invalid_argument("fit_predictor: need at least 20 pairs");
  const int D = static_cast<int>(pairs.front().encoding.size());
  for (const auto& p : pairs) {
    if (static_cast<int>(p.encoding.size()) != D) throw std::invalid_argument("fit_predictor: encoding lengths differ");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::round(cfg.validation_fraction * pairs.size()));
  std::vector<std::size_t> val(order.begin(), order.begin() + n_val), train(order.begin() + n_val, order.end());

  FitResult res{MetricPredictor(D, cfg, rng()), {}};
  auto& model = res.model;
  auto& report = res.report;
  report.train_size = train.size();
  report.validation_size = val.size();

  double mean = 0;
  for (auto i : train) mean += pairs[i].R;
  mean /= train.size();
  double var = 0;
  for (auto i : train) var += (pairs[i].R - mean) * (pairs[i].R - mean);
  const double sd = std::sqrt(var / train.size());
  report.degenerate_labels = sd < 1e-12;
  if (report.degenerate_labels && log) *log << "warning: fit_predictor: all training labels are identical\n";
  // Floor keeps degenerate label sets from blowing up the standardized targets.
  const double scale = std::max(sd, 1e-3 * std::max(1.0, std::abs(mean)));
  model.set_label_standardization(mean, scale);

  auto& W = model.weights();
  auto& B = model.biases();
  const std::size_t L = W.size();
  std::vector<Eigen::MatrixXd> mW, vW;
  std::vector<Eigen::VectorXd> mB, vB;
  for (std::size_t l = 0; l < L; ++l) {
    mW.push_back(Eigen::MatrixXd::Zero(W[l].rows(), W[l].cols()));
    vW.push_back(mW.back());
    mB.push_back(Eigen::VectorXd::Zero(B[l].size()));
    vB.push_back(mB.back());
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, train.size() - start);
      Eigen::MatrixXd x(D, static_cast<Eigen::Index>(n));
      Eigen::RowVectorXd y(static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        const auto& p = pairs[train[start + k]];
        for (int i = 0; i < D; ++i) x(i, static_cast<Eigen::Index>(k)) = p.encoding[i];
        y[static_cast<Eigen::Index>(k)] = (p.R - mean) / scale;
      }
      std::vector<Eigen::MatrixXd> acts;
      const Eigen::RowVectorXd out = model.forward(x, &acts);
      const Eigen::RowVectorXd err = out - y;
      const double loss = std::sqrt(err.squaredNorm() / n);
      // d sqrt(mean e²) / d out = e / (n · loss)
      Eigen::MatrixXd delta = err / (static_cast<double>(n) * std::max(loss, 1e-12));
      ++step;
      for (std::size_t l = L; l-- > 0;) {
        Eigen::MatrixXd gW = delta * acts[l].transpose() + cfg.weight_decay * W[l];
        Eigen::VectorXd gB = delta.rowwise().sum() + cfg.weight_decay * B[l];
        if (l > 0) {
          delta = (W[l].transpose() * delta).cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
        }
        const double c1 = 1.0 - std::pow(beta1, step), c2 = 1.0 - std::pow(beta2, step);
        mW[l] = beta1 * mW[l] + (1 - beta1) * gW;
        vW[l] = beta2 * vW[l] + (1 - beta2) * gW.cwiseProduct(gW);
        W[l].array() -= cfg.lr * (mW[l].array() / c1) / ((vW[l].array() / c2).sqrt() + eps);
        mB[l] = beta1 * mB[l] + (1 - beta1) * gB;
        vB[l] = beta2 * vB[l] + (1 - beta2) * gB.cwiseProduct(gB);
        B[l].array() -= cfg.lr * (mB[l].array() / c1) / ((vB[l].array() / c2).sqrt() + eps);
      }
    }
  }

  auto evaluate = [&](const std::vector<std::size_t>& idx, std::vector<double>& pred, std::vector<double>& truth) {
    std::vector<ArchEncoding> encs;
    for (auto i : idx) {
      encs.push_back(pairs[i].encoding);
      truth.push_back(pairs[i].R);
    }
    pred = encs.empty() ? std::vector<double>() : model.predict_batch(encs);
  };
  std::vector<double> tp, tt, vp, vt;
  evaluate(train, tp, tt);
  evaluate(val, vp, vt);
  report.train_rmse = rmse(tp, tt);
  report.validation_rmse = rmse(vp, vt);
  report.kendall_tau = kendall_tau(vp, vt);
  report.top10_overlap = top_fraction_overlap(vp, vt, 0.1);
  for (auto i : val) report.validation_arch_ids.push_back(pairs[i].arch_id);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint

inline json predictor_json(const MetricPredictor& m, const EncodingLayout& layout, const MetricConfig& metric) {
  json layers = json::array();
  for (std::size_t l = 0; l < m.weights().size(); ++l) {
    const auto& w = m.weights()[l];
    std::vector<double> wv(w.size()), bv(m.biases()[l].data(), m.biases()[l].data() + m.biases()[l].size());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) wv[r * w.cols() + c] = w(r, c);
    }
    layers.push_back({{"rows", w.rows()}, {"cols", w.cols()}, {"weight", wv}, {"bias", bv}});
  }
  json blocks = json::array();
  for (const auto& b : layout.blocks) blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"size", b.size}});
  return {{"format", "enas4d-predictor"},
          {"version", 1},
          {"config", m.config()},
          {"metric", metric},
          {"layout", {{"length", layout.length}, {"blocks", blocks}}},
          {"label_mean", m.label_mean()},
          {"label_scale", m.label_scale()},
          {"layers", layers}};
}

struct LoadedPredictor {
  MetricPredictor model;
  EncodingLayout layout;
  MetricConfig metric;
};

inline LoadedPredictor predictor_from_json(const json& j) {
  if (j.value("format", "") != "enas4d-predictor") throw DataError("not a predictor checkpoint");
  LoadedPredictor out;
  const auto cfg = j.at("config").get<PredictorConfig>();
  out.metric = j.at("metric").get<MetricConfig>();
  out.layout.length = j.at("layout").at("length").get<int>();
  for (const auto& b : j.at("layout").at("blocks")) {
    out.layout.blocks.push_back({b.at("name").get<std::string>(), b.at("offset").get<int>(), b.at("size").get<int>()});
  }
  const auto& layers = j.at("layers");
  out.model = MetricPredictor(out.layout.length, cfg, 0);
  if (layers.size() != out.model.weights().size()) throw DataError("predictor checkpoint: layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& w = out.model.weights()[l];
    auto& b = out.model.biases()[l];
    const auto wv = layers[l].at("weight").get<std::vector<double>>();
    const auto bv = layers[l].at("bias").get<std::vector<double>>();
    if (layers[l].at("rows").get<Eigen::Index>() != w.rows() || layers[l].at("cols").get<Eigen::Index>() != w.cols() ||
        wv.size() != static_cast<std::size_t>(w.size()) || bv.size() != static_cast<std::size_t>(b.size())) {
      throw DataError("predictor checkpoint: layer shape");
    }
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = wv[r * w.cols() + c];
    }
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = bv[i];
  }
  out.model.set_label_standardization(j.at("label_mean").get<double>(), j.at("label_scale").get<double>());
  return out;
}

// Refuses a checkpoint trained for another metric or search space layout.
inline void check_predictor_compatible(const LoadedPredictor& p, const EncodingLayout& layout, const MetricConfig& metric) {
  if (!(p.layout == layout)) throw std::invalid_argument("predictor was trained for a different search space layout");
  if (!(p.metric == metric)) throw std::invalid_argument("predictor was trained for a different metric configuration");
}

}  // namespace enas4d
