#pragma once

// Reference implementations shared by the unit tests and the acceptance
// binary. None of them call the library routine they are checked against.

#include <algorithm>
#include <cmath>

#include "enas4d/dyninfer.hpp"
#include "enas4d/evaldb.hpp"
#include "enas4d/ms_ops.hpp"
#include "enas4d/pipeline.hpp"
#include "enas4d/predictor.hpp"
#include "enas4d/supernet.hpp"
#include "test_util.hpp"

namespace enas4d::testing {

using D = double;

inline ConvStageSpec make_spec(ReuseType type, std::vector<int> in, std::vector<int> out, int K, int stride = 1) {
  ConvStageSpec spec;
  spec.reuse = type;
  spec.in_channels = std::move(in);
  spec.out_channels = std::move(out);
  spec.kernel_sizes.assign(spec.in_channels.size(), K);
  spec.stride = stride;
  return spec;
}

inline std::vector<Var<D>> random_weights(const ConvStageSpec& spec, std::mt19937_64& rng, double scale = 1.0) {
  std::vector<Var<D>> w(spec.stages());
  for (int s = spec.first_active; s < spec.stages(); ++s) {
    w[s] = Var<D>::leaf(random_tensor(spec.weight_shape(s), rng, scale));
  }
  return w;
}

// Runs stages 0..S-1 of one layer through a cache, as the block would.
inline std::vector<Var<D>> run_layer(const ConvStageSpec& spec, const std::vector<Var<D>>& w, const std::vector<Var<D>>& x) {
  StageFeatureCache<D> cache;
  std::vector<Var<D>> y;
  for (int s = 0; s < spec.stages(); ++s) {
    y.push_back(msconv_forward<D>(spec, w, s, x[s], cache.layer(0)));
    cache.put_input(0, s, x[s]);
    cache.put_output(0, s, y.back());
  }
  return y;
}

// Y^s = Σ_{k≤s} Σ_i CONV(W^{ks}_i, X^k_i), evaluated block by block.
inline Tensor<D> input_reuse_oracle(const ConvStageSpec& spec, const Tensor<D>& w, const std::vector<Tensor<D>>& x, int s) {
  Tensor<D> acc;
  int col = 0;
  for (int k = spec.first_active; k <= s; ++k) {
    auto part = naive_conv(x[k], weight_in_slice(w, col, col + spec.in_channels[k]), spec.stride, spec.padding(s));
    acc = acc.size() == 0 ? part : tensor_add(acc, part);
    col += spec.in_channels[k];
  }
  return acc;
}

inline RecordSet records_from(const std::vector<std::vector<float>>& conf, const std::vector<std::vector<bool>>& correct,
                       int arch_id = 0) {
  RecordSet r(arch_id, static_cast<int>(conf.front().size()));
  for (std::size_t i = 0; i < conf.size(); ++i) r.add({arch_id, static_cast<int>(i), conf[i], correct[i]});
  return r;
}

inline RecordSet random_records(std::mt19937_64& rng, int n, int S, int arch_id = 0, int classes = 10) {
  std::uniform_real_distribution<float> u(1.0f / classes, 1.0f);
  std::bernoulli_distribution b(0.6);
  RecordSet r(arch_id, S);
  for (int i = 0; i < n; ++i) {
    EvalRecord rec{arch_id, i, {}, {}};
    for (int s = 0; s < S; ++s) {
      rec.conf.push_back(u(rng));
      rec.correct.push_back(b(rng));
    }
    r.add(rec);
  }
  return r;
}

// Independent brute force: per record, per threshold vector, direct exit
// trace; ties broken as specified.
inline GridSearchResult brute_force(const RecordSet& r, const CostProfile& costs, const MetricConfig& cfg,
                             std::vector<double> grid) {
  std::sort(grid.begin(), grid.end());
  const int S = r.stages(), E = S - 1;
  std::vector<ThresholdVector> all = {{}};
  for (int s = 0; s < E; ++s) {
    std::vector<ThresholdVector> next;
    for (const auto& t : all) {
      for (double g : grid) {
        auto u = t;
        u.push_back(g);
        next.push_back(u);
      }
    }
    all = next;
  }
  GridSearchResult best;
  bool have = false;
  for (const auto& t : all) {
    double hits = 0, cost = 0;
    std::vector<std::int64_t> exits(S, 0), corr(S, 0);
    for (std::size_t i = 0; i < r.size(); ++i) {
      int e = S - 1;
      for (int s = 0; s < E; ++s) {
        if (r.conf(i, s) > t[s]) {
          e = s;
          break;
        }
      }
      ++exits[e];
      corr[e] += r.correct(i, e);
      hits += r.correct(i, e);
      cost += costs.cumulative[e];
    }
    const double acc = hits / r.size(), c = cost / r.size();
    const double R = acc * std::pow(std::min(cfg.cost_target / c, 1.0), cfg.omega);
    bool better = !have || R > best.R || (R == best.R && (c < best.metrics.cost || (c == best.metrics.cost && t < best.thresholds)));
    if (better) {
      best.thresholds = t;
      best.R = R;
      best.metrics = {acc, c};
      best.summary = make_summary(exits, corr);
      have = true;
    }
  }
  return best;
}

// Stage MACs measured by running the materialized view one stage at a time
// under the multiply counter.
inline std::vector<std::uint64_t> instrumented_stage_macs(Supernet<float>& net, const MultiStageArch& a) {
  auto view = net.materialize(a);
  view.set_mode(NormMode::eval);
  std::mt19937_64 rng(1);
  auto x = Var<float>::constant(random_tensor<float>({1, 3, a.resolution, a.resolution}, rng));
  NoGradGuard guard;
  StageFeatureCache<float> cache;
  std::vector<std::uint64_t> out;
  for (int s = 0; s < view.stages(); ++s) {
    MacCounter counter;
    view.forward_stage(s, x, cache);
    out.push_back(counter.count());
  }
  return out;
}

// Pairs over the desk space whose R is linear in three one-hot blocks.
inline std::vector<TrainingPair> linear_pairs(int n, std::uint64_t seed) {
  const auto cfg = desk_search_space();
  const auto layout = encoding_layout(cfg);
  const auto& b0 = layout.blocks[0];
  const auto& b1 = layout.blocks[1];
  const auto& b2 = layout.blocks.back();
  const std::vector<double> c0 = {0.0, 0.05, 0.1}, c1 = {0.0, 0.03, 0.06}, c2 = {0.02, 0.0, 0.04};
  std::mt19937_64 rng(seed);
  std::vector<TrainingPair> out;
  for (int i = 0; i < n; ++i) {
    const auto enc = encode_arch(sample_arch(cfg, rng), cfg);
    double R = 0.5;
    for (int k = 0; k < 3; ++k) {
      R += c0[k] * enc[b0.offset + k] + c1[k] * enc[b1.offset + k] + c2[k] * enc[b2.offset + k];
    }
    out.push_back({i, enc, R});
  }
  return out;
}

}  // namespace enas4d::testing
