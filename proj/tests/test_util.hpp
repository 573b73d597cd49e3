#pragma once

// Test-only helpers: random tensors, finite-difference gradient checks and
// naive reference convolutions that share no code with the library kernels.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "enas4d/autograd.hpp"
#include "enas4d/search_space.hpp"
#include "enas4d/tensor.hpp"

namespace enas4d::testing {

template <typename T = double>
Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.storage()) v = static_cast<T>(d(rng));
  return t;
}

// Scalar Σ x ⊙ r, a generic probe loss for gradient checks.
inline Var<double> weighted_sum(const Var<double>& x, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += x.value()[i] * r[i];
  return make_result<double>(Tensor<double>({1}, s), {x}, [r](Node<double>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < r.size(); ++i) g[i] += self.grad[0] * r[i];
  });
}

// Relative error with an absolute floor so that near-zero entries compare sanely.
inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename T>
double max_rel_err(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-8) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i], floor));
  return m;
}

// Worst relative error of analytic vs central-difference gradients of
// loss() with respect to every entry of every parameter.
inline double gradient_check(std::vector<Var<double>> params, const std::function<Var<double>()>& loss,
                             double step = 1e-3, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  Var<double> l = loss();
  backward(l);
  std::vector<Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k].mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double fp = loss().value()[0];
      v[i] = orig - step;
      const double fm = loss().value()[0];
      v[i] = orig;
      const double numeric = (fp - fm) / (2 * step);
      worst = std::max(worst, rel_err(analytic[k][i], numeric, floor));
    }
  }
  return worst;
}

// y = Σ_i CONV(W_ji, X_i) with zero padding; straightforward nested loops.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad,
                                 std::uint64_t* mac_count = nullptr) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), K = w.dim(2);
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({N, O, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double s = 0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                if (mac_count) ++*mac_count;
                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                s += w.at4(o, c, ky, kx) * x.at4(n, c, iy, ix);
              }
          y.at4(n, o, oy, ox) = s;
        }
  return y;
}

// Depthwise: w [C,K,K].
inline Tensor<double> naive_depthwise(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = w.dim(1);
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double s = 0;
          for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
              const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              s += w[(static_cast<std::size_t>(c) * K + ky) * K + kx] * x.at4(n, c, iy, ix);
            }
          y.at4(n, c, oy, ox) = s;
        }
  return y;
}

inline Tensor<double> tensor_add(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

// Channel slice [c0, c1) of an NCHW tensor.
inline Tensor<double> channel_slice(const Tensor<double>& x, int c0, int c1) {
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  Tensor<double> y({N, c1 - c0, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = c0; c < c1; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) y.at4(n, c - c0, i, j) = x.at4(n, c, i, j);
  return y;
}

// Weights [O, C, K, K] restricted to input channels [c0, c1).
inline Tensor<double> weight_in_slice(const Tensor<double>& w, int c0, int c1) {
  const int O = w.dim(0), K = w.dim(2);
  Tensor<double> y({O, c1 - c0, K, K});
  for (int o = 0; o < O; ++o)
    for (int c = c0; c < c1; ++c)
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) y.at4(o, c - c0, i, j) = w.at4(o, c, i, j);
  return y;
}

// Inference-mode normalization with explicit statistics.
inline Tensor<double> naive_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                                 const std::vector<double>& mean, const std::vector<double>& var,
                                 double eps = 1e-5) {
  Tensor<double> y = x;
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int i = 0; i < x.dim(2); ++i)
        for (int j = 0; j < x.dim(3); ++j)
          y.at4(n, c, i, j) = gamma[c] * (x.at4(n, c, i, j) - mean[c]) / std::sqrt(var[c] + eps) + beta[c];
  return y;
}

inline Tensor<double> naive_relu(Tensor<double> x) {
  for (auto& v : x.storage()) v = std::max(v, 0.0);
  return x;
}

// Every non-decreasing length-k tuple over pool.
template <typename V>
std::vector<std::vector<V>> sorted_tuples(const std::vector<V>& pool, int k) {
  std::vector<std::vector<V>> out = {{}};
  for (int i = 0; i < k; ++i) {
    std::vector<std::vector<V>> next;
    for (const auto& t : out) {
      for (const auto& v : pool) {
        if (!t.empty() && v < t.back()) continue;
        auto u = t;
        u.push_back(v);
        next.push_back(std::move(u));
      }
    }
    out = std::move(next);
  }
  return out;
}

// Exhaustive list of the search space, built gene by gene.
inline std::vector<MultiStageArch> enumerate_archs(const SearchSpaceConfig& cfg) {
  MultiStageArch proto;
  for (const auto& g : cfg.groups) {
    proto.depths.emplace_back(cfg.stages, 0);
    proto.kernels.emplace_back(g.blocks, 0);
    proto.cum_ratios.emplace_back(g.blocks, std::vector<double>(cfg.stages, 0.0));
  }
  std::vector<MultiStageArch> out;
  for (int r : cfg.resolution_pool) {
    auto a = proto;
    a.resolution = r;
    out.push_back(a);
  }
  auto expand = [&](auto assign, const auto& choices) {
    std::vector<MultiStageArch> next;
    for (const auto& a : out) {
      for (const auto& c : choices) {
        auto b = a;
        assign(b, c);
        next.push_back(std::move(b));
      }
    }
    out = std::move(next);
  };
  const auto depth_sets = sorted_tuples(cfg.depth_pool, cfg.stages);
  const auto ratio_sets = sorted_tuples(cfg.ratio_pool, cfg.stages);
  for (std::size_t g = 0; g < cfg.groups.size(); ++g) {
    expand([g](MultiStageArch& a, const std::vector<int>& d) { a.depths[g] = d; }, depth_sets);
    for (int i = 0; i < cfg.groups[g].blocks; ++i) {
      expand([g, i](MultiStageArch& a, int k) { a.kernels[g][i] = k; }, cfg.kernel_pool);
      expand([g, i](MultiStageArch& a, const std::vector<double>& r) { a.cum_ratios[g][i] = r; }, ratio_sets);
    }
  }
  return out;
}

}  // namespace enas4d::testing
