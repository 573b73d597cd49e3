#pragma once

#include <algorithm>
#include <array>
#include <memory>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "enas4d/ms_ops.hpp"
#include "enas4d/search_space.hpp"

namespace enas4d {

// Output-channel order by descending L1 norm of each channel's filter slice
// (axis 0 of w); ties keep the lower original index first.
template <typename T>
std::vector<int> sort_channels_by_l1(const Tensor<T>& w) {
  if (w.rank() < 1) throw std::invalid_argument("sort_channels_by_l1: scalar tensor");
  const int O = w.dim(0);
  const std::size_t per = O == 0 ? 0 : w.size() / static_cast<std::size_t>(O);
  std::vector<double> norms(O, 0.0);
  for (int o = 0; o < O; ++o) {
    for (std::size_t i = 0; i < per; ++i) norms[o] += std::abs(static_cast<double>(w[o * per + i]));
  }
  std::vector<int> perm(O);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return norms[a] > norms[b]; });
  return perm;
}

// Learned kernel-size transforms of one depthwise layer. kernel_sizes is the
// kernel pool in descending order; matrices[i] (k²×k² for k = kernel_sizes[i+1])
// maps the center crop of the kernel_sizes[i] kernel to the next smaller one.
template <typename T>
struct KernelTransform {
  std::vector<int> kernel_sizes;
  std::vector<Var<T>> matrices;

  static KernelTransform identity(const std::vector<int>& pool) {
    KernelTransform t;
    t.kernel_sizes.assign(pool.rbegin(), pool.rend());
    for (std::size_t i = 1; i < t.kernel_sizes.size(); ++i) {
      const int kk = t.kernel_sizes[i] * t.kernel_sizes[i];
      Tensor<T> m({kk, kk});
      for (int j = 0; j < kk; ++j) m[static_cast<std::size_t>(j) * kk + j] = T{1};
      t.matrices.push_back(Var<T>::leaf(std::move(m)));
    }
    return t;
  }
};

// Derives the K×K depthwise kernel from the full (largest) kernel: repeated
// center crop + transform down the kernel chain.
template <typename T>
Var<T> transform_kernel(const Var<T>& full, const KernelTransform<T>& t, int target) {
  auto it = std::find(t.kernel_sizes.begin(), t.kernel_sizes.end(), target);
  if (it == t.kernel_sizes.end()) {
    throw std::invalid_argument("transform_kernel: kernel " + std::to_string(target) + " not in pool");
  }
  if (full.value().rank() != 3 || full.dim(1) != t.kernel_sizes.front()) {
    throw std::invalid_argument("transform_kernel: expected [C," + std::to_string(t.kernel_sizes.front()) + ",k] kernel");
  }
  Var<T> w = full;
  const auto steps = static_cast<std::size_t>(it - t.kernel_sizes.begin());
  for (std::size_t i = 1; i <= steps; ++i) {
    w = ops::kernel_matmul(ops::center_crop_kernel(w, t.kernel_sizes[i]), t.matrices[i - 1]);
  }
  return w;
}

// Shared affine parameters and running statistics of one normalization,
// indexed by supernet channel.
template <typename T>
struct SupernetNorm {
  Var<T> gamma;
  Var<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit SupernetNorm(int channels = 0)
      : gamma(Var<T>::leaf(Tensor<T>({channels}, T{1}))), beta(Var<T>::leaf(Tensor<T>({channels}, T{0}))),
        running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

template <typename T>
struct SupernetBlock {
  int in_channels = 0;
  int out_channels = 0;
  int mid_channels = 0;
  int stride = 1;
  bool residual = false;
  Var<T> expand;      // [mid, in, 1, 1]
  Var<T> depthwise;   // [mid, kmax, kmax]
  KernelTransform<T> kernel_transform;
  Var<T> pointwise;   // [mid, mid, 1, 1]
  Var<T> project;     // [out, mid, 1, 1]
  // norms[layer][stage]
  std::array<std::vector<SupernetNorm<T>>, 4> norms;
};

struct ParameterInfo {
  std::string name;
  bool decay = true;  // weight decay applies (not for normalization parameters and biases)
};

// Weight-sharing supernet: maximal weights from which multi-stage sub-networks
// are materialized by slicing. Views hold pointers into this object, so it
// must outlive them and must not be copied.
template <typename T>
class Supernet {
 public:
  static constexpr double kNormMomentum = 0.1;

  Supernet(const SearchSpaceConfig& cfg, std::uint64_t seed) : config_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto he = [&](std::vector<int> shape, int fan_in) {
      Tensor<T> t(std::move(shape));
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
      for (auto& v : t.storage()) v = static_cast<T>(d(rng));
      return Var<T>::leaf(std::move(t));
    };
    const int S = cfg.stages;
    stem_weight_ = he({cfg.stem_channels, cfg.input_channels, cfg.stem_kernel, cfg.stem_kernel},
                      cfg.input_channels * cfg.stem_kernel * cfg.stem_kernel);
    stem_norm_ = std::make_unique<SupernetNorm<T>>(cfg.stem_channels);
    register_param("stem.weight", stem_weight_, true);
    register_norm("stem.norm", *stem_norm_);
    int in_c = cfg.stem_channels;
    const int kmax = cfg.max_kernel();
    for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
      const auto& gc = cfg.groups[g];
      for (int b = 0; b < gc.blocks; ++b) {
        SupernetBlock<T> blk;
        blk.in_channels = in_c;
        blk.out_channels = gc.out_channels;
        blk.mid_channels = gc.mid_channels;
        blk.stride = b == 0 ? gc.stride : 1;
        blk.residual = in_c == gc.out_channels && blk.stride == 1;
        const int mid = gc.mid_channels;
        blk.expand = he({mid, in_c, 1, 1}, in_c);
        blk.depthwise = he({mid, kmax, kmax}, kmax * kmax);
        blk.kernel_transform = KernelTransform<T>::identity(cfg.kernel_pool);
        blk.pointwise = he({mid, mid, 1, 1}, mid);
        blk.project = he({gc.out_channels, mid, 1, 1}, mid);
        const std::array<int, 4> widths = {mid, mid, mid, gc.out_channels};
        for (int L = 0; L < 4; ++L) {
          for (int s = 0; s < S; ++s) blk.norms[L].emplace_back(widths[L]);
        }
        blocks_.push_back(std::move(blk));
        in_c = gc.out_channels;
      }
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& blk = blocks_[i];
      const std::string p = "block" + std::to_string(i) + ".";
      register_param(p + "expand", blk.expand, true);
      register_param(p + "depthwise", blk.depthwise, true);
      for (std::size_t m = 0; m < blk.kernel_transform.matrices.size(); ++m) {
        register_param(p + "kernel_transform" + std::to_string(m), blk.kernel_transform.matrices[m], true);
      }
      register_param(p + "pointwise", blk.pointwise, true);
      register_param(p + "project", blk.project, true);
      for (int L = 0; L < 4; ++L) {
        for (int s = 0; s < S; ++s) {
          register_norm(p + "norm" + std::to_string(L) + ".stage" + std::to_string(s), blk.norms[L][s]);
        }
      }
    }
    std::normal_distribution<double> hd(0.0, 0.01);
    for (int s = 0; s < S; ++s) {
      Tensor<T> w({cfg.num_classes, in_c});
      for (auto& v : w.storage()) v = static_cast<T>(hd(rng));
      head_weights_.push_back(Var<T>::leaf(std::move(w)));
      head_biases_.push_back(Var<T>::leaf(Tensor<T>({cfg.num_classes}, T{0})));
    }
    for (int s = 0; s < S; ++s) {
      register_param("head" + std::to_string(s) + ".weight", head_weights_[s], true);
      register_param("head" + std::to_string(s) + ".bias", head_biases_[s], false);
    }
  }

  Supernet(const Supernet&) = delete;
  Supernet& operator=(const Supernet&) = delete;
  Supernet(Supernet&&) = default;
  Supernet& operator=(Supernet&&) = default;

  const SearchSpaceConfig& config() const { return config_; }
  std::vector<Var<T>>& parameters() { return params_; }
  const std::vector<Var<T>>& parameters() const { return params_; }
  const std::vector<ParameterInfo>& parameter_info() const { return param_info_; }
  std::vector<SupernetBlock<T>>& blocks() { return blocks_; }
  const std::vector<SupernetBlock<T>>& blocks() const { return blocks_; }
  Var<T>& stem_weight() { return stem_weight_; }
  SupernetNorm<T>& stem_norm() { return *stem_norm_; }

  // Every normalization's running statistics, in registration order.
  std::vector<SupernetNorm<T>*> norms() { return norm_ptrs_; }
  const std::vector<std::string>& norm_names() const { return norm_names_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Multi-stage view of arch. Weights are gathered through the graph, so a
  // backward pass through the view accumulates into the supernet parameters.
  MultiStageNetwork<T> materialize(const MultiStageArch& arch) {
    validate_arch(arch, config_);
    const int S = config_.stages;
    StemLayer<T> stem;
    stem.weight = stem_weight_;
    stem.stride = config_.stem_stride;
    stem.norm = make_norm(*stem_norm_, std::nullopt);

    std::vector<MultiStageBlock<T>> blocks;
    std::size_t bi = 0;
    for (std::size_t g = 0; g < config_.groups.size(); ++g) {
      for (int b = 0; b < config_.groups[g].blocks; ++b, ++bi) {
        const int first = first_active_stage(arch.depths[g], b);
        if (first >= S) continue;  // no stage runs this block
        blocks.push_back(materialize_block(blocks_[bi], first, arch.kernels[g][b], arch.cum_ratios[g][b]));
      }
    }
    std::vector<PredictionHead<T>> heads;
    for (int s = 0; s < S; ++s) heads.push_back({head_weights_[s], head_biases_[s]});
    return MultiStageNetwork<T>(S, arch.resolution, std::move(stem), std::move(blocks), std::move(heads));
  }

  // Plain single-path forward of the full-width network with the largest
  // kernels, using stage `norm_stage`'s normalizations and head.
  Var<T> forward_full(const Var<T>& images, int norm_stage, NormMode mode) {
    auto norm = [&](const Var<T>& x, SupernetNorm<T>& n) {
      if (mode == NormMode::eval) return ops::batch_norm<T>(x, n.gamma, n.beta, n.running_mean, n.running_var, false);
      return ops::batch_norm<T>(x, n.gamma, n.beta, n.running_mean, n.running_var, true);
    };
    Var<T> h = ops::relu(norm(ops::conv2d(images, stem_weight_, config_.stem_stride, config_.stem_kernel / 2), *stem_norm_));
    const int kmax = config_.max_kernel();
    for (auto& blk : blocks_) {
      Var<T> x = h;
      h = ops::relu(norm(ops::conv2d(h, blk.expand, 1, 0), blk.norms[0][norm_stage]));
      h = ops::relu(norm(ops::depthwise_conv2d(h, blk.depthwise, blk.stride, kmax / 2), blk.norms[1][norm_stage]));
      h = ops::relu(norm(ops::conv2d(h, blk.pointwise, 1, 0), blk.norms[2][norm_stage]));
      h = norm(ops::conv2d(h, blk.project, 1, 0), blk.norms[3][norm_stage]);
      if (blk.residual) h = ops::add(x, h);
    }
    return ops::linear(ops::global_avg_pool(h), head_weights_[norm_stage], head_biases_[norm_stage]);
  }

 private:
  void register_param(const std::string& name, const Var<T>& v, bool decay) {
    params_.push_back(v);
    param_info_.push_back({name, decay});
  }
  void register_norm(const std::string& name, SupernetNorm<T>& n) {
    register_param(name + ".gamma", n.gamma, false);
    register_param(name + ".beta", n.beta, false);
    norm_ptrs_.push_back(&n);
    norm_names_.push_back(name);
  }

  // Normalization over the supernet channels `idx` (all channels if absent).
  static NormState<T> make_norm(SupernetNorm<T>& src, std::optional<std::vector<int>> idx) {
    std::vector<int> channels;
    if (idx) {
      channels = *idx;
    } else {
      channels.resize(src.running_mean.size());
      std::iota(channels.begin(), channels.end(), 0);
    }
    NormState<T> n;
    n.gamma = ops::gather(src.gamma, channels);
    n.beta = ops::gather(src.beta, channels);
    for (int c : channels) {
      n.running_mean.push_back(src.running_mean[c]);
      n.running_var.push_back(src.running_var[c]);
    }
    SupernetNorm<T>* target = &src;
    n.on_batch_stats = [target, channels](const std::vector<T>& mean, const std::vector<T>& var, std::size_t count) {
      const double m = kNormMomentum;
      const double unbias = count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
      for (std::size_t i = 0; i < channels.size(); ++i) {
        auto& rm = target->running_mean[channels[i]];
        auto& rv = target->running_var[channels[i]];
        rm = static_cast<T>((1 - m) * rm + m * mean[i]);
        rv = static_cast<T>((1 - m) * rv + m * var[i] * unbias);
      }
    };
    return n;
  }

  static std::vector<int> stage_slice(const std::vector<int>& perm, ChannelRange r) {
    std::vector<int> idx(perm.begin() + r.begin, perm.begin() + r.end);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  MultiStageBlock<T> materialize_block(SupernetBlock<T>& blk, int first, int kernel, const std::vector<double>& ratios) {
    const int S = config_.stages;
    const auto ranges = stage_channel_ranges(ratios, blk.mid_channels, first);
    const auto perm_mid = sort_channels_by_l1(blk.expand.value());
    const auto perm_pw = sort_channels_by_l1(blk.pointwise.value());
    std::vector<std::vector<int>> mid_idx(S), pw_idx(S);
    for (int s = first; s < S; ++s) {
      mid_idx[s] = stage_slice(perm_mid, ranges[s]);
      pw_idx[s] = stage_slice(perm_pw, ranges[s]);
    }
    auto sizes = [&](const std::vector<std::vector<int>>& idx) {
      std::vector<int> v(S, 0);
      for (int s = first; s < S; ++s) v[s] = static_cast<int>(idx[s].size());
      return v;
    };
    std::vector<MultiStageLayer<T>> layers(4);
    for (auto& l : layers) {
      l.weights.resize(S);
      l.norms.resize(S);
    }
    // 0: pointwise expansion, independent.
    {
      auto& l = layers[0];
      l.spec.reuse = ReuseType::independent;
      l.spec.in_channels.assign(S, 0);
      for (int s = first; s < S; ++s) l.spec.in_channels[s] = blk.in_channels;
      l.spec.out_channels = sizes(mid_idx);
      l.spec.kernel_sizes.assign(S, 1);
      l.spec.first_active = first;
      for (int s = first; s < S; ++s) l.weights[s] = ops::gather(blk.expand, mid_idx[s]);
    }
    // 1: depthwise, independent, carries the block stride.
    {
      auto& l = layers[1];
      l.spec.reuse = ReuseType::independent;
      l.spec.depthwise = true;
      l.spec.in_channels = sizes(mid_idx);
      l.spec.out_channels = sizes(mid_idx);
      l.spec.kernel_sizes.assign(S, kernel);
      l.spec.stride = blk.stride;
      l.spec.first_active = first;
      Var<T> full = transform_kernel(blk.depthwise, blk.kernel_transform, kernel);
      for (int s = first; s < S; ++s) l.weights[s] = ops::gather(full, mid_idx[s]);
    }
    // 2: pointwise, input_reuse over the depthwise outputs of stages first..s.
    {
      auto& l = layers[2];
      l.spec.reuse = ReuseType::input_reuse;
      l.spec.in_channels = sizes(mid_idx);
      l.spec.out_channels = sizes(pw_idx);
      l.spec.kernel_sizes.assign(S, 1);
      l.spec.first_active = first;
      std::vector<int> cols;
      for (int s = first; s < S; ++s) {
        cols.insert(cols.end(), mid_idx[s].begin(), mid_idx[s].end());
        l.weights[s] = ops::gather(blk.pointwise, pw_idx[s], cols);
      }
    }
    // 3: projection, output_reuse.
    {
      auto& l = layers[3];
      l.spec.reuse = ReuseType::output_reuse;
      l.spec.in_channels = sizes(pw_idx);
      l.spec.out_channels.assign(S, 0);
      for (int s = first; s < S; ++s) l.spec.out_channels[s] = blk.out_channels;
      l.spec.kernel_sizes.assign(S, 1);
      l.spec.first_active = first;
      l.activation = false;
      for (int s = first; s < S; ++s) l.weights[s] = ops::gather(blk.project, std::nullopt, pw_idx[s]);
    }
    for (int s = first; s < S; ++s) {
      layers[0].norms[s] = make_norm(blk.norms[0][s], mid_idx[s]);
      layers[1].norms[s] = make_norm(blk.norms[1][s], mid_idx[s]);
      layers[2].norms[s] = make_norm(blk.norms[2][s], pw_idx[s]);
      layers[3].norms[s] = make_norm(blk.norms[3][s], std::nullopt);
    }
    return MultiStageBlock<T>(blk.in_channels, blk.out_channels, std::move(layers), blk.residual);
  }

  SearchSpaceConfig config_;
  Var<T> stem_weight_;
  std::unique_ptr<SupernetNorm<T>> stem_norm_;
  std::vector<SupernetBlock<T>> blocks_;
  std::vector<Var<T>> head_weights_;
  std::vector<Var<T>> head_biases_;
  std::vector<Var<T>> params_;
  std::vector<ParameterInfo> param_info_;
  std::vector<SupernetNorm<T>*> norm_ptrs_;
  std::vector<std::string> norm_names_;
};

template <typename T = float>
Supernet<T> build_supernet(const SearchSpaceConfig& cfg, std::uint64_t seed) {
  return Supernet<T>(cfg, seed);
}

}  // namespace enas4d
