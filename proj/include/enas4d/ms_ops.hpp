#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "enas4d/ops.hpp"

namespace enas4d {

enum class ReuseType { independent, input_reuse, output_reuse };

inline const char* to_string(ReuseType t) {
  switch (t) {
    case ReuseType::independent: return "independent";
    case ReuseType::input_reuse: return "input_reuse";
    case ReuseType::output_reuse: return "output_reuse";
  }
  return "?";
}

// One multi-stage convolution layer. Stage indices are 0-based.
//
// in_channels[s] is the number of new input channels owned by stage s and
// out_channels[s] the number of output channels stage s produces. Stages
// below first_active are skipped (their channel counts must be zero); the
// first active stage owns the union of the skipped stages' slices.
//
// Per-stage weight shapes:
//   independent   [O_s, C_s, K_s, K_s]        (depthwise: [C_s, K_s, K_s])
//   input_reuse   [O_s, C_first+..+C_s, K, K] (column blocks ordered by stage)
//   output_reuse  [O,   C_s, K, K]
struct ConvStageSpec {
  ReuseType reuse = ReuseType::independent;
  std::vector<int> in_channels;
  std::vector<int> out_channels;
  std::vector<int> kernel_sizes;
  int stride = 1;
  bool depthwise = false;
  int first_active = 0;

  int stages() const { return static_cast<int>(in_channels.size()); }
  int padding(int s) const { return kernel_sizes.at(s) / 2; }

  // Σ C_k for k in [first_active, s].
  int reused_in_channels(int s) const {
    int c = 0;
    for (int k = first_active; k <= s; ++k) c += in_channels[k];
    return c;
  }

  std::vector<int> weight_shape(int s) const {
    const int K = kernel_sizes[s];
    if (depthwise) return {in_channels[s], K, K};
    if (reuse == ReuseType::input_reuse) return {out_channels[s], reused_in_channels(s), K, K};
    return {out_channels[s], in_channels[s], K, K};
  }

  void validate() const {
    const int S = stages();
    auto fail = [](const std::string& m) { throw std::invalid_argument("ConvStageSpec: " + m); };
    if (S < 1) fail("stage count must be >= 1");
    if (static_cast<int>(out_channels.size()) != S || static_cast<int>(kernel_sizes.size()) != S) {
      fail("per-stage lists must all have length S");
    }
    if (stride < 1) fail("stride must be positive");
    if (first_active < 0 || first_active >= S) fail("first_active out of range");
    bool any = false;
    for (int s = 0; s < S; ++s) {
      if (in_channels[s] < 0 || out_channels[s] < 0) fail("negative channel count");
      if (kernel_sizes[s] < 1 || kernel_sizes[s] % 2 == 0) fail("kernel sizes must be odd");
      if (s < first_active && (in_channels[s] != 0 || out_channels[s] != 0)) {
        fail("skipped stages must own no channels");
      }
      any = any || in_channels[s] > 0;
    }
    if (!any) fail("at least one stage must own input channels");
    if (depthwise) {
      if (reuse != ReuseType::independent) fail("depthwise layers use the independent type");
      for (int s = first_active; s < S; ++s) {
        if (out_channels[s] != in_channels[s]) fail("depthwise layers keep channel counts");
      }
    }
    if (reuse == ReuseType::output_reuse) {
      for (int s = first_active + 1; s < S; ++s) {
        if (out_channels[s] != out_channels[first_active]) fail("output_reuse needs equal output channels");
      }
    }
    if (reuse != ReuseType::independent) {
      for (int s = first_active + 1; s < S; ++s) {
        if (kernel_sizes[s] != kernel_sizes[first_active]) fail("reuse types share one kernel size");
      }
    }
  }
};

// Features one layer has seen / produced per stage.
template <typename T>
struct LayerFeatures {
  std::vector<Var<T>> inputs;   // X^s
  std::vector<Var<T>> outputs;  // Y^s (pre-normalization)
};

// Per-layer, per-stage feature maps produced by already-executed stages of
// one forward pass (a batch at one resolution). Entries are write-once.
template <typename T>
class StageFeatureCache {
 public:
  int resolution() const { return resolution_; }
  int batch() const { return batch_; }
  int next_stage() const { return next_stage_; }

  void begin_stage(int stage, int resolution, int batch) {
    if (stage != next_stage_) {
      throw std::logic_error("StageFeatureCache: stage " + std::to_string(stage) +
                             " executed out of order (expected " + std::to_string(next_stage_) + ")");
    }
    if (stage > 0 && (resolution != resolution_ || batch != batch_)) {
      throw std::invalid_argument("StageFeatureCache: resolution or batch differs from earlier stages");
    }
    resolution_ = resolution;
    batch_ = batch;
  }
  void end_stage(int stage) { next_stage_ = stage + 1; }

  const LayerFeatures<T>& layer(int id) const {
    static const LayerFeatures<T> empty;
    auto it = layers_.find(id);
    return it == layers_.end() ? empty : it->second;
  }

  void put_input(int layer_id, int stage, Var<T> v) { put(layers_[layer_id].inputs, stage, std::move(v)); }
  void put_output(int layer_id, int stage, Var<T> v) { put(layers_[layer_id].outputs, stage, std::move(v)); }

 private:
  static void put(std::vector<Var<T>>& slot, int stage, Var<T> v) {
    if (static_cast<int>(slot.size()) <= stage) slot.resize(stage + 1);
    if (slot[stage]) throw std::logic_error("StageFeatureCache: entry already written");
    slot[stage] = std::move(v);
  }

  std::map<int, LayerFeatures<T>> layers_;
  int resolution_ = -1;
  int batch_ = -1;
  int next_stage_ = 0;
};

namespace detail {
template <typename T>
const Var<T>* cached(const std::vector<Var<T>>& v, int s) {
  if (s < 0 || s >= static_cast<int>(v.size()) || !v[s]) return nullptr;
  return &v[s];
}
}  // namespace detail

// Computes stage s of a multi-stage convolution from its own input X^s and
// the cached features of earlier stages. The caller stores X^s and Y^s.
template <typename T>
Var<T> msconv_forward(const ConvStageSpec& spec, std::span<const Var<T>> weights, int stage,
                      const Var<T>& own_input, const LayerFeatures<T>& cache) {
  const int S = spec.stages();
  if (stage < 0 || stage >= S) {
    throw std::out_of_range("msconv_forward: stage " + std::to_string(stage) + " outside 0.." +
                            std::to_string(S - 1));
  }
  if (stage < spec.first_active) throw std::invalid_argument("msconv_forward: stage is skipped in this layer");
  if (static_cast<int>(weights.size()) != S || !weights[stage]) {
    throw std::invalid_argument("msconv_forward: missing weights for stage " + std::to_string(stage));
  }
  if (own_input.value().rank() != 4 || own_input.dim(1) != spec.in_channels[stage]) {
    throw std::invalid_argument("msconv_forward: input has " +
                                (own_input.value().rank() == 4 ? std::to_string(own_input.dim(1)) : std::string("?")) +
                                " channels, stage owns " + std::to_string(spec.in_channels[stage]));
  }
  const Var<T>& w = weights[stage];
  if (w.shape() != spec.weight_shape(stage)) {
    throw std::invalid_argument("msconv_forward: weight shape " + Tensor<T>::shape_string(w.shape()) +
                                " expected " + Tensor<T>::shape_string(spec.weight_shape(stage)));
  }
  const int pad = spec.padding(stage);
  switch (spec.reuse) {
    case ReuseType::independent:
      if (spec.depthwise) return ops::depthwise_conv2d(own_input, w, spec.stride, pad);
      return ops::conv2d(own_input, w, spec.stride, pad);
    case ReuseType::input_reuse: {
      std::vector<Var<T>> parts;
      for (int k = spec.first_active; k < stage; ++k) {
        const Var<T>* x = detail::cached(cache.inputs, k);
        if (!x) {
          throw std::logic_error("msconv_forward: input_reuse needs cached input of stage " + std::to_string(k));
        }
        parts.push_back(*x);
      }
      parts.push_back(own_input);
      return ops::conv2d(ops::concat_channels(parts), w, spec.stride, pad);
    }
    case ReuseType::output_reuse: {
      Var<T> y = ops::conv2d(own_input, w, spec.stride, pad);
      if (stage == spec.first_active) return y;
      const Var<T>* prev = detail::cached(cache.outputs, stage - 1);
      if (!prev) {
        throw std::logic_error("msconv_forward: output_reuse needs cached output of stage " +
                               std::to_string(stage - 1));
      }
      return ops::add(y, *prev);
    }
  }
  throw std::logic_error("msconv_forward: unknown reuse type");
}

enum class NormMode {
  train,        // batch statistics, reported to on_batch_stats
  eval,         // running statistics
  calibrate,    // batch statistics, accumulated into the running statistics
  batch_frozen  // batch statistics, nothing recorded
};

// Normalization of one (layer, stage) pair.
template <typename T>
struct NormState {
  Var<T> gamma;
  Var<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  // Called in train mode with the batch mean and biased variance.
  std::function<void(const std::vector<T>&, const std::vector<T>&, std::size_t)> on_batch_stats;
  std::vector<double> calib_mean_sum, calib_var_sum;
  int calib_batches = 0;

  int channels() const { return static_cast<int>(running_mean.size()); }

  Var<T> apply(const Var<T>& x, NormMode mode) {
    if (mode == NormMode::eval) {
      return ops::batch_norm<T>(x, gamma, beta, running_mean, running_var, false);
    }
    std::vector<T> mean, var;
    Var<T> y = ops::batch_norm<T>(x, gamma, beta, running_mean, running_var, true, T(1e-5), &mean, &var);
    const std::size_t count = static_cast<std::size_t>(x.dim(0)) * x.dim(2) * x.dim(3);
    if (mode == NormMode::train && on_batch_stats) on_batch_stats(mean, var, count);
    if (mode == NormMode::calibrate) {
      calib_mean_sum.resize(mean.size(), 0.0);
      calib_var_sum.resize(var.size(), 0.0);
      for (std::size_t c = 0; c < mean.size(); ++c) {
        calib_mean_sum[c] += mean[c];
        calib_var_sum[c] += var[c];
      }
      ++calib_batches;
    }
    return y;
  }

  void begin_calibration() {
    calib_mean_sum.assign(running_mean.size(), 0.0);
    calib_var_sum.assign(running_var.size(), 0.0);
    calib_batches = 0;
  }
  void finish_calibration() {
    if (calib_batches == 0) return;
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
      running_mean[c] = static_cast<T>(calib_mean_sum[c] / calib_batches);
      running_var[c] = static_cast<T>(calib_var_sum[c] / calib_batches);
    }
  }
};

// One multi-stage layer with its per-stage weights and normalizations.
template <typename T>
struct MultiStageLayer {
  ConvStageSpec spec;
  std::vector<Var<T>> weights;     // per stage; empty for skipped stages
  std::vector<NormState<T>> norms; // per stage
  bool activation = true;
};

// Multi-stage residual block: a stack of multi-stage convolutions whose first
// layer is independent and whose last layer is output_reuse, so every stage
// produces the same external channel count.
template <typename T>
class MultiStageBlock {
 public:
  MultiStageBlock() = default;
  MultiStageBlock(int in_channels, int out_channels, std::vector<MultiStageLayer<T>> layers, bool residual)
      : in_channels_(in_channels), out_channels_(out_channels), layers_(std::move(layers)), residual_(residual) {
    if (layers_.empty()) throw std::invalid_argument("MultiStageBlock: no layers");
    const auto& first = layers_.front().spec;
    const auto& last = layers_.back().spec;
    if (first.reuse != ReuseType::independent) {
      throw std::invalid_argument("MultiStageBlock: first layer must be independent");
    }
    if (last.reuse != ReuseType::output_reuse) {
      throw std::invalid_argument("MultiStageBlock: last layer must be output_reuse");
    }
    const int S = first.stages();
    first_active_ = first.first_active;
    stride_ = 1;
    for (std::size_t L = 0; L < layers_.size(); ++L) {
      const auto& spec = layers_[L].spec;
      spec.validate();
      if (spec.stages() != S || spec.first_active != first_active_) {
        throw std::invalid_argument("MultiStageBlock: layers disagree on stages");
      }
      if (layers_[L].weights.size() != static_cast<std::size_t>(S) ||
          layers_[L].norms.size() != static_cast<std::size_t>(S)) {
        throw std::invalid_argument("MultiStageBlock: per-stage weights/norms missing");
      }
      stride_ *= spec.stride;
      for (int s = first_active_; s < S; ++s) {
        if (L == 0 && spec.in_channels[s] != in_channels_) {
          throw std::invalid_argument("MultiStageBlock: first layer must consume the whole stage input");
        }
        if (L > 0 && spec.in_channels[s] != layers_[L - 1].spec.out_channels[s]) {
          throw std::invalid_argument("MultiStageBlock: channel chain broken at layer " + std::to_string(L));
        }
      }
    }
    for (int s = first_active_; s < S; ++s) {
      if (last.out_channels[s] != out_channels_) {
        throw std::invalid_argument("MultiStageBlock: output channels must equal block width");
      }
    }
    if (residual_ && (in_channels_ != out_channels_ || stride_ != 1)) {
      throw std::invalid_argument("MultiStageBlock: residual block needs matching shapes");
    }
  }

  int stages() const { return layers_.front().spec.stages(); }
  int first_active() const { return first_active_; }
  int stride() const { return stride_; }
  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  bool residual() const { return residual_; }
  std::vector<MultiStageLayer<T>>& layers() { return layers_; }
  const std::vector<MultiStageLayer<T>>& layers() const { return layers_; }
  bool active(int s) const { return s >= first_active_; }

  // layer_base: cache id of this block's first layer (layers use consecutive ids).
  Var<T> forward(int stage, const Var<T>& input, StageFeatureCache<T>& cache, int layer_base, NormMode mode) {
    if (input.dim(1) != in_channels_) throw std::invalid_argument("MultiStageBlock: input channel mismatch");
    if (!active(stage)) {
      // Skipped stage: features pass through (pooled to stay aligned with strided blocks).
      if (stride_ == 1 && in_channels_ == out_channels_) return input;
      if (in_channels_ != out_channels_) {
        throw std::invalid_argument("MultiStageBlock: cannot pass a skipped stage through a width-changing block");
      }
      return ops::avg_pool(input, stride_);
    }
    Var<T> h = input;
    for (std::size_t L = 0; L < layers_.size(); ++L) {
      auto& layer = layers_[L];
      const int id = layer_base + static_cast<int>(L);
      Var<T> y = msconv_forward<T>(layer.spec, layer.weights, stage, h, cache.layer(id));
      cache.put_input(id, stage, h);
      cache.put_output(id, stage, y);
      h = layer.norms[stage].apply(y, mode);
      if (layer.activation) h = ops::relu(h);
    }
    if (!residual_) return h;
    if (h.shape() != input.shape()) {
      throw std::invalid_argument("MultiStageBlock: residual branch " + Tensor<T>::shape_string(h.shape()) +
                                  " vs identity " + Tensor<T>::shape_string(input.shape()));
    }
    return ops::add(input, h);
  }

 private:
  int in_channels_ = 0;
  int out_channels_ = 0;
  std::vector<MultiStageLayer<T>> layers_;
  bool residual_ = false;
  int first_active_ = 0;
  int stride_ = 1;
};

// Per-sample output of one stage's prediction head.
struct StagePrediction {
  std::vector<double> logits;
  double confidence = 0.0;
  int predicted_class = 0;
};

template <typename T>
std::vector<StagePrediction> to_predictions(const Tensor<T>& logits) {
  const int N = logits.dim(0), K = logits.dim(1);
  std::vector<StagePrediction> out(N);
  for (int n = 0; n < N; ++n) {
    auto& p = out[n];
    p.logits.assign(logits.data() + static_cast<std::size_t>(n) * K, logits.data() + static_cast<std::size_t>(n + 1) * K);
    int best = 0;
    for (int k = 1; k < K; ++k) {
      if (p.logits[k] > p.logits[best]) best = k;
    }
    double s = 0;
    for (int k = 0; k < K; ++k) s += std::exp(p.logits[k] - p.logits[best]);
    p.predicted_class = best;
    p.confidence = 1.0 / s;
  }
  return out;
}

// Stem convolution shared by every stage: computed once by stage 0 and reused.
template <typename T>
struct StemLayer {
  Var<T> weight;  // [O, C, K, K]
  int stride = 1;
  NormState<T> norm;
};

template <typename T>
struct PredictionHead {
  Var<T> weight;  // [classes, features]
  Var<T> bias;    // [classes]
};

// A multi-stage CNN: stem, a chain of multi-stage blocks and one prediction
// head per stage. Stages run incrementally through a StageFeatureCache.
template <typename T>
class MultiStageNetwork {
 public:
  MultiStageNetwork() = default;
  MultiStageNetwork(int stages, int resolution, StemLayer<T> stem, std::vector<MultiStageBlock<T>> blocks,
                    std::vector<PredictionHead<T>> heads)
      : stages_(stages), resolution_(resolution), stem_(std::move(stem)), blocks_(std::move(blocks)),
        heads_(std::move(heads)) {
    if (stages_ < 1) throw std::invalid_argument("MultiStageNetwork: stage count");
    if (static_cast<int>(heads_.size()) != stages_) throw std::invalid_argument("MultiStageNetwork: one head per stage");
    int c = stem_.weight.dim(0);
    for (const auto& b : blocks_) {
      if (b.stages() != stages_) throw std::invalid_argument("MultiStageNetwork: block stage count");
      if (b.in_channels() != c) throw std::invalid_argument("MultiStageNetwork: block chain channel mismatch");
      c = b.out_channels();
    }
    for (const auto& h : heads_) {
      if (h.weight.dim(1) != c) throw std::invalid_argument("MultiStageNetwork: head feature width");
    }
  }

  int stages() const { return stages_; }
  int resolution() const { return resolution_; }
  int num_classes() const { return heads_.front().weight.dim(0); }
  int input_channels() const { return stem_.weight.dim(1); }
  NormMode mode() const { return mode_; }
  void set_mode(NormMode m) { mode_ = m; }

  StemLayer<T>& stem() { return stem_; }
  std::vector<MultiStageBlock<T>>& blocks() { return blocks_; }
  const std::vector<MultiStageBlock<T>>& blocks() const { return blocks_; }
  std::vector<PredictionHead<T>>& heads() { return heads_; }

  static constexpr int kStemLayerId = 0;
  static int block_layer_base(std::size_t block_index, std::size_t layers_per_block) {
    return static_cast<int>(1 + block_index * layers_per_block);
  }

  // Runs stage s on images [N,C,R,R]; stages 0..s-1 must already be in cache.
  // Returns the stage's logits [N, classes].
  Var<T> forward_stage(int stage, const Var<T>& images, StageFeatureCache<T>& cache) {
    if (stage < 0 || stage >= stages_) throw std::out_of_range("forward_stage: stage out of range");
    if (images.value().rank() != 4 || images.dim(2) != resolution_ || images.dim(3) != resolution_) {
      throw std::invalid_argument("forward_stage: image resolution differs from the architecture's " +
                                  std::to_string(resolution_));
    }
    cache.begin_stage(stage, images.dim(2), images.dim(0));
    Var<T> h;
    if (stage == 0) {
      h = ops::conv2d(images, stem_.weight, stem_.stride, stem_.weight.dim(2) / 2);
      h = ops::relu(stem_.norm.apply(h, mode_));
      cache.put_output(kStemLayerId, 0, h);
    } else {
      const Var<T>* stem = detail::cached(cache.layer(kStemLayerId).outputs, 0);
      if (!stem) throw std::logic_error("forward_stage: stem features missing from cache");
      h = *stem;
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = blocks_[b].forward(stage, h, cache, block_layer_base(b, kMaxLayersPerBlock), mode_);
    }
    auto& head = heads_[stage];
    Var<T> logits = ops::linear(ops::global_avg_pool(h), head.weight, head.bias);
    cache.end_stage(stage);
    return logits;
  }

  // Runs stages 0..S-1 with a fresh cache.
  std::vector<Var<T>> forward_all(const Var<T>& images) {
    StageFeatureCache<T> cache;
    std::vector<Var<T>> out;
    for (int s = 0; s < stages_; ++s) out.push_back(forward_stage(s, images, cache));
    return out;
  }

  template <typename F>
  void for_each_norm(F&& f) {
    f(stem_.norm);
    for (auto& b : blocks_) {
      for (auto& l : b.layers()) {
        for (int s = b.first_active(); s < b.stages(); ++s) f(l.norms[s]);
      }
    }
  }

  static constexpr std::size_t kMaxLayersPerBlock = 8;

 private:
  int stages_ = 1;
  int resolution_ = 0;
  StemLayer<T> stem_;
  std::vector<MultiStageBlock<T>> blocks_;
  std::vector<PredictionHead<T>> heads_;
  NormMode mode_ = NormMode::eval;
};

// Replaces the network's running statistics with averages of batch statistics
// over the given batches (all stages are run on each batch).
template <typename T>
void recalibrate_norms(MultiStageNetwork<T>& net, const std::vector<Tensor<T>>& batches) {
  if (batches.empty()) return;
  NoGradGuard guard;
  const NormMode previous = net.mode();
  net.for_each_norm([](NormState<T>& n) { n.begin_calibration(); });
  net.set_mode(NormMode::calibrate);
  for (const auto& b : batches) net.forward_all(Var<T>::constant(b));
  net.for_each_norm([](NormState<T>& n) { n.finish_calibration(); });
  net.set_mode(previous);
}

}  // namespace enas4d
