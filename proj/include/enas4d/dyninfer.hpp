#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "enas4d/ms_ops.hpp"
#include "enas4d/search_space.hpp"

namespace enas4d {

// ---------------------------------------------------------------------------
// Early-exit inference

using ThresholdVector = std::vector<double>;

struct DynamicResult {
  int predicted_class = 0;
  int exit_stage = 0;  // 0-based
  std::vector<StagePrediction> stages;
};

// Index of the first stage s < S-1 whose confidence exceeds thresholds[s]
// (strictly); the last stage otherwise.
inline int exit_stage_for(std::span<const double> confidences, std::span<const double> thresholds) {
  const int S = static_cast<int>(confidences.size());
  for (int s = 0; s + 1 < S; ++s) {
    if (confidences[s] > thresholds[s]) return s;
  }
  return S - 1;
}

// Runs stages of one image [1,C,R,R] until the exit rule fires.
template <typename T>
DynamicResult infer_dynamic(MultiStageNetwork<T>& net, const Tensor<T>& image, const ThresholdVector& thresholds) {
  if (static_cast<int>(thresholds.size()) != net.stages() - 1) {
    throw std::invalid_argument("infer_dynamic: expected " + std::to_string(net.stages() - 1) + " thresholds");
  }
  if (image.rank() != 4 || image.dim(0) != 1) throw std::invalid_argument("infer_dynamic: expects one image");
  NoGradGuard guard;
  StageFeatureCache<T> cache;
  auto x = Var<T>::constant(image);
  DynamicResult r;
  for (int s = 0; s < net.stages(); ++s) {
    r.stages.push_back(to_predictions(net.forward_stage(s, x, cache).value()).front());
    if (s + 1 == net.stages() || r.stages.back().confidence > thresholds[s]) {
      r.exit_stage = s;
      r.predicted_class = r.stages.back().predicted_class;
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Cost accounting

enum class CostKind { macs, latency };

inline const char* to_string(CostKind k) { return k == CostKind::macs ? "macs" : "latency"; }

inline CostKind parse_cost_kind(const std::string& s) {
  if (s == "macs") return CostKind::macs;
  if (s == "latency") return CostKind::latency;
  throw std::invalid_argument("unknown cost kind '" + s + "' (expected macs or latency)");
}

// cumulative[s]: cost of an inference exiting at stage s. MAC profiles hold
// exact integers.
struct CostProfile {
  CostKind kind = CostKind::macs;
  std::vector<double> cumulative;

  int stages() const { return static_cast<int>(cumulative.size()); }
  bool strictly_increasing() const {
    for (std::size_t s = 0; s < cumulative.size(); ++s) {
      if (cumulative[s] <= (s == 0 ? 0.0 : cumulative[s - 1])) return false;
    }
    return true;
  }
  bool operator==(const CostProfile&) const = default;
};

enum class OpKind { stem_conv, pointwise_conv, depthwise_conv, batch_norm, relu, add, avg_pool, global_pool, linear };

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::stem_conv: return "stem_conv";
    case OpKind::pointwise_conv: return "pointwise_conv";
    case OpKind::depthwise_conv: return "depthwise_conv";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::global_pool: return "global_pool";
    case OpKind::linear: return "linear";
  }
  return "?";
}

inline OpKind parse_op_kind(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(OpKind::linear); ++i) {
    if (s == to_string(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
  }
  throw std::invalid_argument("unknown op kind '" + s + "'");
}

// One executed operation on a single image. resolution is the op's input
// spatial size (square).
struct OpSignature {
  OpKind kind = OpKind::relu;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int resolution = 1;

  auto operator<=>(const OpSignature&) const = default;

  int output_resolution() const { return strided_size(resolution, stride); }

  std::uint64_t macs() const {
    const std::uint64_t hw = static_cast<std::uint64_t>(output_resolution()) * output_resolution();
    const std::uint64_t kk = static_cast<std::uint64_t>(kernel) * kernel;
    switch (kind) {
      case OpKind::stem_conv:
      case OpKind::pointwise_conv:
        return static_cast<std::uint64_t>(out_channels) * in_channels * kk * hw;
      case OpKind::depthwise_conv:
        return static_cast<std::uint64_t>(in_channels) * kk * hw;
      case OpKind::linear:
        return static_cast<std::uint64_t>(in_channels) * out_channels;
      default:
        return 0;
    }
  }

  std::string to_string() const {
    std::ostringstream os;
    os << enas4d::to_string(kind) << "(in=" << in_channels << ",out=" << out_channels << ",k=" << kernel
       << ",stride=" << stride << ",res=" << resolution << ")";
    return os.str();
  }
};

namespace detail {

// Ops of one block for every stage (ops[s] empty for stages that skip it).
inline void append_block_ops(std::vector<std::vector<OpSignature>>& ops, int in_channels, int out_channels,
                             int mid_channels, int stride, bool residual, int first, int kernel,
                             const std::vector<double>& ratios, int H) {
  const int S = static_cast<int>(ops.size());
  const auto ranges = stage_channel_ranges(ratios, mid_channels, first);
  const int Ho = strided_size(H, stride);
  auto push = [](std::vector<OpSignature>& v, OpSignature sig) {
    if (sig.in_channels > 0 && (sig.out_channels > 0 || sig.kind == OpKind::avg_pool)) v.push_back(sig);
  };
  int reused = 0;
  for (int s = 0; s < S; ++s) {
    auto& v = ops[s];
    if (s < first) {
      if (stride != 1) push(v, {OpKind::avg_pool, in_channels, in_channels, stride, stride, H});
      continue;
    }
    const int m = ranges[s].size();
    reused += m;
    push(v, {OpKind::pointwise_conv, in_channels, m, 1, 1, H});
    push(v, {OpKind::batch_norm, m, m, 1, 1, H});
    push(v, {OpKind::relu, m, m, 1, 1, H});
    push(v, {OpKind::depthwise_conv, m, m, kernel, stride, H});
    push(v, {OpKind::batch_norm, m, m, 1, 1, Ho});
    push(v, {OpKind::relu, m, m, 1, 1, Ho});
    push(v, {OpKind::pointwise_conv, reused, m, 1, 1, Ho});
    push(v, {OpKind::batch_norm, m, m, 1, 1, Ho});
    push(v, {OpKind::relu, m, m, 1, 1, Ho});
    push(v, {OpKind::pointwise_conv, m, out_channels, 1, 1, Ho});
    if (s > first) push(v, {OpKind::add, out_channels, out_channels, 1, 1, Ho});
    push(v, {OpKind::batch_norm, out_channels, out_channels, 1, 1, Ho});
    if (residual) push(v, {OpKind::add, out_channels, out_channels, 1, 1, Ho});
  }
}

inline void append_head_ops(std::vector<OpSignature>& v, int features, int classes, int H) {
  v.push_back({OpKind::global_pool, features, features, 1, 1, H});
  v.push_back({OpKind::linear, features, classes, 1, 1, 1});
}

inline std::vector<OpSignature> stem_ops(const SearchSpaceConfig& cfg, int resolution) {
  const int H = stem_output_size(cfg, resolution);
  return {{OpKind::stem_conv, cfg.input_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, resolution},
          {OpKind::batch_norm, cfg.stem_channels, cfg.stem_channels, 1, 1, H},
          {OpKind::relu, cfg.stem_channels, cfg.stem_channels, 1, 1, H}};
}

}  // namespace detail

// Operations executed by each stage of arch on one image, in execution order.
// Stage 0 computes the shared stem; every stage runs its own head.
inline std::vector<std::vector<OpSignature>> enumerate_stage_ops(const MultiStageArch& arch,
                                                                 const SearchSpaceConfig& cfg) {
  validate_arch(arch, cfg);
  const int S = cfg.stages;
  std::vector<std::vector<OpSignature>> ops(S);
  ops[0] = detail::stem_ops(cfg, arch.resolution);
  int H = stem_output_size(cfg, arch.resolution);
  int C = cfg.stem_channels;
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    const auto& gc = cfg.groups[g];
    for (int b = 0; b < gc.blocks; ++b) {
      const int first = first_active_stage(arch.depths[g], b);
      if (first >= S) continue;
      const int stride = b == 0 ? gc.stride : 1;
      detail::append_block_ops(ops, C, gc.out_channels, gc.mid_channels, stride, C == gc.out_channels && stride == 1,
                               first, arch.kernels[g][b], arch.cum_ratios[g][b], H);
      H = strided_size(H, stride);
      C = gc.out_channels;
    }
  }
  for (int s = 0; s < S; ++s) detail::append_head_ops(ops[s], C, cfg.num_classes, H);
  return ops;
}

// Incremental MACs of each stage.
inline std::vector<std::uint64_t> stage_macs(const MultiStageArch& arch, const SearchSpaceConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (const auto& stage : enumerate_stage_ops(arch, cfg)) {
    std::uint64_t m = 0;
    for (const auto& op : stage) m += op.macs();
    out.push_back(m);
  }
  return out;
}

inline CostProfile count_macs(const MultiStageArch& arch, const SearchSpaceConfig& cfg) {
  CostProfile p{CostKind::macs, {}};
  std::uint64_t total = 0;
  for (auto m : stage_macs(arch, cfg)) {
    total += m;
    p.cumulative.push_back(static_cast<double>(total));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Latency lookup table

struct LatencyTable {
  std::string device;
  int repeats = 0;
  int warmups = 0;
  std::map<OpSignature, double> entries;  // milliseconds

  double lookup(const OpSignature& sig) const {
    auto it = entries.find(sig);
    if (it == entries.end()) throw std::out_of_range("LatencyTable: no entry for " + sig.to_string());
    return it->second;
  }
  void validate() const {
    for (const auto& [sig, ms] : entries) {
      if (!(ms > 0.0)) throw std::invalid_argument("LatencyTable: non-positive latency for " + sig.to_string());
    }
  }
};

inline CostProfile profile_latency(const MultiStageArch& arch, const SearchSpaceConfig& cfg,
                                   const LatencyTable& table) {
  CostProfile p{CostKind::latency, {}};
  double total = 0;
  for (const auto& stage : enumerate_stage_ops(arch, cfg)) {
    for (const auto& op : stage) total += table.lookup(op);
    p.cumulative.push_back(total);
  }
  return p;
}

// Every signature any architecture of the space can execute.
inline std::vector<OpSignature> enumerate_space_signatures(const SearchSpaceConfig& cfg) {
  cfg.validate();
  const int S = cfg.stages;
  std::set<OpSignature> all;
  // All sorted multisets of size S over a pool.
  auto multisets = [S](const auto& pool) {
    using V = typename std::decay_t<decltype(pool)>::value_type;
    std::vector<std::vector<V>> out;
    std::vector<int> idx(S, 0);
    while (true) {
      std::vector<V> m;
      for (int i : idx) m.push_back(pool[i]);
      out.push_back(std::move(m));
      int k = S - 1;
      while (k >= 0 && idx[k] == static_cast<int>(pool.size()) - 1) --k;
      if (k < 0) break;
      ++idx[k];
      for (int j = k + 1; j < S; ++j) idx[j] = idx[k];
    }
    return out;
  };
  const auto depth_sets = multisets(cfg.depth_pool);
  const auto ratio_sets = multisets(cfg.ratio_pool);
  for (int res : cfg.resolution_pool) {
    for (const auto& op : detail::stem_ops(cfg, res)) all.insert(op);
    int H = stem_output_size(cfg, res);
    int C = cfg.stem_channels;
    for (const auto& gc : cfg.groups) {
      for (int b = 0; b < gc.blocks; ++b) {
        std::set<int> firsts;
        for (const auto& d : depth_sets) firsts.insert(first_active_stage(d, b));
        const int stride = b == 0 ? gc.stride : 1;
        for (int first : firsts) {
          if (first >= S) continue;
          for (int k : cfg.kernel_pool) {
            for (const auto& r : ratio_sets) {
              std::vector<std::vector<OpSignature>> ops(S);
              detail::append_block_ops(ops, C, gc.out_channels, gc.mid_channels, stride,
                                       C == gc.out_channels && stride == 1, first, k, r, H);
              for (const auto& v : ops) all.insert(v.begin(), v.end());
            }
          }
        }
        H = strided_size(H, stride);
        C = gc.out_channels;
      }
    }
    std::vector<OpSignature> head;
    detail::append_head_ops(head, C, cfg.num_classes, H);
    all.insert(head.begin(), head.end());
  }
  return {all.begin(), all.end()};
}

// Returns the wall time of one execution of sig in milliseconds; throws on failure.
using OpRunner = std::function<double(const OpSignature&)>;

inline LatencyTable bench_latency(const std::vector<OpSignature>& signatures, const OpRunner& runner, int repeats,
                                  int warmups, std::string device, std::ostream* log = &std::cerr) {
  if (repeats < 1 || warmups < 0) throw std::invalid_argument("bench_latency: repeats >= 1, warmups >= 0");
  LatencyTable t;
  t.device = std::move(device);
  t.repeats = repeats;
  t.warmups = warmups;
  for (const auto& sig : signatures) {
    try {
      for (int i = 0; i < warmups; ++i) runner(sig);
      double sum = 0;
      for (int i = 0; i < repeats; ++i) sum += runner(sig);
      const double mean = sum / repeats;
      if (!(mean > 0.0)) throw std::runtime_error("non-positive time");
      t.entries[sig] = mean;
    } catch (const std::exception& e) {
      if (log) *log << "warning: bench_latency skipped " << sig.to_string() << ": " << e.what() << "\n";
    }
  }
  return t;
}

// Times signatures on this CPU with the library's own kernels (batch of one).
template <typename T = float>
OpRunner cpu_op_runner(std::uint64_t seed = 0) {
  return [seed](const OpSignature& sig) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    auto rand = [&](std::vector<int> shape) {
      Tensor<T> t(std::move(shape));
      for (auto& v : t.storage()) v = static_cast<T>(d(rng));
      return Var<T>::constant(std::move(t));
    };
    NoGradGuard guard;
    const int R = sig.resolution, C = sig.in_channels, O = sig.out_channels, K = sig.kernel;
    Var<T> x = sig.kind == OpKind::linear ? rand({1, C}) : rand({1, C, R, R});
    Var<T> w, b;
    std::vector<T> mean(C, T{0}), var(C, T{1});
    switch (sig.kind) {
      case OpKind::stem_conv:
      case OpKind::pointwise_conv: w = rand({O, C, K, K}); break;
      case OpKind::depthwise_conv: w = rand({C, K, K}); break;
      case OpKind::batch_norm: w = rand({C}); b = rand({C}); break;
      case OpKind::linear: w = rand({O, C}); b = rand({O}); break;
      default: break;
    }
    const auto start = std::chrono::steady_clock::now();
    switch (sig.kind) {
      case OpKind::stem_conv:
      case OpKind::pointwise_conv: ops::conv2d(x, w, sig.stride, K / 2); break;
      case OpKind::depthwise_conv: ops::depthwise_conv2d(x, w, sig.stride, K / 2); break;
      case OpKind::batch_norm: ops::batch_norm<T>(x, w, b, mean, var, false); break;
      case OpKind::relu: ops::relu(x); break;
      case OpKind::add: ops::add(x, x); break;
      case OpKind::avg_pool: ops::avg_pool(x, sig.stride); break;
      case OpKind::global_pool: ops::global_avg_pool(x); break;
      case OpKind::linear: ops::linear(x, w, b); break;
    }
    const auto stop = std::chrono::steady_clock::now();
    // Clamp to the clock's resolution so entries stay positive.
    return std::max(std::chrono::duration<double, std::milli>(stop - start).count(), 1e-6);
  };
}

}  // namespace enas4d
