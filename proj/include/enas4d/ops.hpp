#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "enas4d/autograd.hpp"

// Differentiable tensor ops on NCHW activations. Each op computes its value
// eagerly and, when recording, a closure that accumulates parent gradients.
namespace enas4d::ops {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

template <typename T>
void require_rank(const Var<T>& v, int rank, const char* what) {
  if (v.value().rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + Tensor<T>::shape_string(v.shape()));
  }
}

// cols[(c*K + ky)*K + kx][oy*Wo + ox] = x[c][oy*s - p + ky][ox*s - p + kx]
template <typename T>
void im2col(const T* x, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo, T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* out = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + Wo, T{});
            continue;
          }
          const T* in = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < W) ? in[ix] : T{};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int K, int stride, int pad, int Ho, int Wo, T* x) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c * K + ky) * K + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* out = x + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* in = row + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

// Valid output-column range for a kernel tap (so the inner loop is branch-free).
inline std::pair<int, int> tap_range(int kx, int stride, int pad, int W, int Wo) {
  int lo = 0;
  while (lo < Wo && lo * stride - pad + kx < 0) ++lo;
  int hi = Wo;
  while (hi > lo && (hi - 1) * stride - pad + kx >= W) --hi;
  return {lo, hi};
}

}  // namespace detail

// Standard convolution, zero padding. x: [N,C,H,W], w: [O,C,K,K].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != C || w.dim(3) != K) {
    throw std::invalid_argument("conv2d: weight " + Tensor<T>::shape_string(w.shape()) +
                                " incompatible with input " + Tensor<T>::shape_string(x.shape()));
  }
  const int Ho = conv_out_size(H, K, stride, pad), Wo = conv_out_size(W, K, stride, pad);
  const int P = Ho * Wo, CKK = C * K * K;
  Tensor<T> y({N, O, Ho, Wo});
  record_macs(static_cast<std::uint64_t>(N) * O * CKK * P);
  const bool pointwise = K == 1 && stride == 1 && pad == 0;
  if (O > 0 && C > 0 && P > 0) {
    ConstMatMap<T> wm(w.value().data(), O, CKK);
    std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
    for (int n = 0; n < N; ++n) {
      const T* xn = x.value().data() + static_cast<std::size_t>(n) * C * H * W;
      if (!pointwise) detail::im2col(xn, C, H, W, K, stride, pad, Ho, Wo, cols.data());
      ConstMatMap<T> xm(pointwise ? xn : cols.data(), CKK, P);
      MatMap<T> ym(y.data() + static_cast<std::size_t>(n) * O * P, O, P);
      ym.noalias() = wm * xm;
    }
  }
  return make_result<T>(std::move(y), {x, w}, [=](Node<T>& self) {
    auto& xn_node = *self.parents[0];
    auto& wn_node = *self.parents[1];
    if (O == 0 || C == 0 || P == 0) return;
    ConstMatMap<T> wm(wn_node.value.data(), O, CKK);
    std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
    std::vector<T> dcols(pointwise ? 0 : static_cast<std::size_t>(CKK) * P);
    T* dw = wn_node.requires_grad ? wn_node.ensure_grad().data() : nullptr;
    T* dx = xn_node.requires_grad ? xn_node.ensure_grad().data() : nullptr;
    for (int n = 0; n < N; ++n) {
      const T* xn = xn_node.value.data() + static_cast<std::size_t>(n) * C * H * W;
      ConstMatMap<T> gy(self.grad.data() + static_cast<std::size_t>(n) * O * P, O, P);
      if (dw) {
        if (!pointwise) detail::im2col(xn, C, H, W, K, stride, pad, Ho, Wo, cols.data());
        ConstMatMap<T> xm(pointwise ? xn : cols.data(), CKK, P);
        MatMap<T>(dw, O, CKK).noalias() += gy * xm.transpose();
      }
      if (dx) {
        T* dxn = dx + static_cast<std::size_t>(n) * C * H * W;
        if (pointwise) {
          MatMap<T>(dxn, C, P).noalias() += wm.transpose() * gy;
        } else {
          MatMap<T>(dcols.data(), CKK, P).noalias() = wm.transpose() * gy;
          detail::col2im(dcols.data(), C, H, W, K, stride, pad, Ho, Wo, dxn);
        }
      }
    }
  });
}

// Depthwise convolution. x: [N,C,H,W], w: [C,K,K].
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  detail::require_rank(x, 4, "depthwise_conv2d input");
  detail::require_rank(w, 3, "depthwise_conv2d weight");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(1);
  if (w.dim(0) != C || w.dim(2) != K) {
    throw std::invalid_argument("depthwise_conv2d: weight " + Tensor<T>::shape_string(w.shape()) +
                                " incompatible with input " + Tensor<T>::shape_string(x.shape()));
  }
  const int Ho = conv_out_size(H, K, stride, pad), Wo = conv_out_size(W, K, stride, pad);
  Tensor<T> y({N, C, Ho, Wo});
  record_macs(static_cast<std::uint64_t>(N) * C * K * K * Ho * Wo);
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xp = xv + (static_cast<std::size_t>(n) * C + c) * H * W;
      T* yp = y.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
      const T* wp = wv + static_cast<std::size_t>(c) * K * K;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          const T wt = wp[ky * K + kx];
          const auto [lo, hi] = detail::tap_range(kx, stride, pad, W, Wo);
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const T* row = xp + static_cast<std::size_t>(iy) * W - pad + kx;
            T* out = yp + static_cast<std::size_t>(oy) * Wo;
            if (stride == 1) {
              for (int ox = lo; ox < hi; ++ox) out[ox] += wt * row[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) out[ox] += wt * row[ox * stride];
            }
          }
        }
      }
    }
  }
  return make_result<T>(std::move(y), {x, w}, [=](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    T* dx = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
    T* dw = wn.requires_grad ? wn.ensure_grad().data() : nullptr;
    const T* xv = xn.value.data();
    const T* wv = wn.value.data();
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
        const T* gp = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
        for (int ky = 0; ky < K; ++ky) {
          for (int kx = 0; kx < K; ++kx) {
            const auto [lo, hi] = detail::tap_range(kx, stride, pad, W, Wo);
            const T wt = wv[(static_cast<std::size_t>(c) * K + ky) * K + kx];
            T acc{};
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              const std::size_t base = xoff + static_cast<std::size_t>(iy) * W - pad + kx;
              const T* g = gp + static_cast<std::size_t>(oy) * Wo;
              if (dw) {
                const T* row = xv + base;
                T s{};
#pragma omp simd reduction(+ : s)
                for (int ox = lo; ox < hi; ++ox) s += g[ox] * row[ox * stride];
                acc += s;
              }
              if (dx) {
                T* drow = dx + base;
                for (int ox = lo; ox < hi; ++ox) drow[ox * stride] += wt * g[ox];
              }
            }
            if (dw) dw[(static_cast<std::size_t>(c) * K + ky) * K + kx] += acc;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + Tensor<T>::shape_string(a.shape()) +
                                " vs " + Tensor<T>::shape_string(b.shape()));
  }
  Tensor<T> y = a.value();
  const T* bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      T* g = p->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> y = a.value();
  for (auto& v : y.storage()) v *= factor;
  return make_result<T>(std::move(y), {a}, [factor](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> y = a.value();
  // NaN passes through so a diverged forward surfaces as a non-finite loss.
  for (auto& v : y.storage()) v = v <= T{} ? T{} : v;
  return make_result<T>(std::move(y), {a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.ensure_grad().data();
    const T* out = self.value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (out[i] > T{}) g[i] += self.grad[i];
    }
  });
}

// Batch normalization over (N,H,W) per channel.
//   use_batch_stats: normalize with the batch mean / biased variance, and
//   return them in *batch_mean / *batch_var when requested.
//   otherwise: normalize with the provided running statistics.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  std::span<const T> running_mean, std::span<const T> running_var,
                  bool use_batch_stats, T eps = T(1e-5), std::vector<T>* batch_mean = nullptr,
                  std::vector<T>* batch_var = nullptr) {
  detail::require_rank(x, 4, "batch_norm input");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.value().size() != static_cast<std::size_t>(C) ||
      beta.value().size() != static_cast<std::size_t>(C)) {
    throw std::invalid_argument("batch_norm: affine parameters do not match channel count");
  }
  const std::size_t M = static_cast<std::size_t>(N) * HW;
  std::vector<T> mean(C), invstd(C);
  const T* xv = x.value().data();
  if (use_batch_stats) {
    if (M == 0) throw std::invalid_argument("batch_norm: empty batch");
    std::vector<T> var(C);
    for (int c = 0; c < C; ++c) {
      double s = 0, ss = 0;
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(ss / static_cast<double>(M));
      invstd[c] = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(M) + eps));
    }
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var;
  } else {
    if (running_mean.size() != static_cast<std::size_t>(C) ||
        running_var.size() != static_cast<std::size_t>(C)) {
      throw std::invalid_argument("batch_norm: running statistics do not match channel count");
    }
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
    }
  }
  Tensor<T> y(x.shape());
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T a = gv[c] * invstd[c];
      const T b = bv[c] - mean[c] * a;
      for (int i = 0; i < HW; ++i) y[off + i] = xv[off + i] * a + b;
    }
  }
  return make_result<T>(std::move(y), {x, gamma, beta},
                        [=, mean = std::move(mean), invstd = std::move(invstd)](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const T* xv = xn.value.data();
    const T* gy = self.grad.data();
    const T* gv = gn.value.data();
    T* dx = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
    T* dg = gn.requires_grad ? gn.ensure_grad().data() : nullptr;
    T* db = bn.requires_grad ? bn.ensure_grad().data() : nullptr;
    for (int c = 0; c < C; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          const double xhat = (xv[off + i] - mean[c]) * invstd[c];
          sum_g += gy[off + i];
          sum_gx += gy[off + i] * xhat;
        }
      }
      if (dg) dg[c] += static_cast<T>(sum_gx);
      if (db) db[c] += static_cast<T>(sum_g);
      if (!dx) continue;
      const double scale = gv[c] * invstd[c];
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
        if (use_batch_stats) {
          const double mg = sum_g / static_cast<double>(M), mgx = sum_gx / static_cast<double>(M);
          for (int i = 0; i < HW; ++i) {
            const double xhat = (xv[off + i] - mean[c]) * invstd[c];
            dx[off + i] += static_cast<T>(scale * (gy[off + i] - mg - xhat * mgx));
          }
        } else {
          for (int i = 0; i < HW; ++i) dx[off + i] += static_cast<T>(scale * gy[off + i]);
        }
      }
    }
  });
}

// Average pooling with kernel == stride; windows clipped at the border so the
// output size matches a padded stride-s convolution (ceil(H/s)).
template <typename T>
Var<T> avg_pool(const Var<T>& x, int stride) {
  detail::require_rank(x, 4, "avg_pool input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  Tensor<T> y({N, C, Ho, Wo});
  const T* xv = x.value().data();
  for (int nc = 0; nc < N * C; ++nc) {
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        T s{};
        int cnt = 0;
        for (int iy = oy * stride; iy < std::min(H, (oy + 1) * stride); ++iy) {
          for (int ix = ox * stride; ix < std::min(W, (ox + 1) * stride); ++ix) {
            s += xv[(static_cast<std::size_t>(nc) * H + iy) * W + ix];
            ++cnt;
          }
        }
        y[(static_cast<std::size_t>(nc) * Ho + oy) * Wo + ox] = s / static_cast<T>(cnt);
      }
    }
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    for (int nc = 0; nc < N * C; ++nc) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const int y1 = std::min(H, (oy + 1) * stride), x1 = std::min(W, (ox + 1) * stride);
          const int cnt = (y1 - oy * stride) * (x1 - ox * stride);
          const T gv = self.grad[(static_cast<std::size_t>(nc) * Ho + oy) * Wo + ox] /
                       static_cast<T>(cnt);
          for (int iy = oy * stride; iy < y1; ++iy) {
            for (int ix = ox * stride; ix < x1; ++ix) g[(static_cast<std::size_t>(nc) * H + iy) * W + ix] += gv;
          }
        }
      }
    }
  });
}

// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool input");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> y({N, C});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* p = x.value().data() + static_cast<std::size_t>(nc) * HW;
    double s = 0;
    for (int i = 0; i < HW; ++i) s += p[i];
    y[nc] = static_cast<T>(s / HW);
  }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    for (int nc = 0; nc < N * C; ++nc) {
      const T gv = self.grad[nc] / static_cast<T>(HW);
      for (int i = 0; i < HW; ++i) g[static_cast<std::size_t>(nc) * HW + i] += gv;
    }
  });
}

// x: [N,F], w: [O,F], b: [O] -> [N,O]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(w, 2, "linear weight");
  const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
  if (w.dim(1) != F || b.value().size() != static_cast<std::size_t>(O)) {
    throw std::invalid_argument("linear: parameter shapes do not match input");
  }
  record_macs(static_cast<std::uint64_t>(N) * O * F);
  Tensor<T> y({N, O});
  MatMap<T> ym(y.data(), N, O);
  ym.noalias() = ConstMatMap<T>(x.value().data(), N, F) * ConstMatMap<T>(w.value().data(), O, F).transpose();
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) ym(n, o) += b.value()[o];
  }
  return make_result<T>(std::move(y), {x, w, b}, [=](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    ConstMatMap<T> gy(self.grad.data(), N, O);
    if (xn.requires_grad) {
      MatMap<T>(xn.ensure_grad().data(), N, F).noalias() +=
          gy * ConstMatMap<T>(wn.value.data(), O, F);
    }
    if (wn.requires_grad) {
      MatMap<T>(wn.ensure_grad().data(), O, F).noalias() +=
          gy.transpose() * ConstMatMap<T>(xn.value.data(), N, F);
    }
    if (bn.requires_grad) {
      T* gb = bn.ensure_grad().data();
      for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) gb[o] += gy(n, o);
      }
    }
  });
}

// Selects entries along the first two axes: out[i][j][...] = p[rows[i]][cols[j]][...].
// An absent index list selects the whole axis. Gradients scatter-add back.
template <typename T>
Var<T> gather(const Var<T>& p, std::optional<std::vector<int>> rows,
              std::optional<std::vector<int>> cols = std::nullopt) {
  const auto& shape = p.shape();
  if (shape.empty()) throw std::invalid_argument("gather: scalar parameter");
  if (cols && shape.size() < 2) throw std::invalid_argument("gather: column index on rank-1 tensor");
  const int A = shape[0];
  const int B = shape.size() >= 2 ? shape[1] : 1;
  std::size_t inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) inner *= static_cast<std::size_t>(shape[i]);
  std::vector<int> r = rows ? *rows : std::vector<int>();
  if (!rows) {
    r.resize(A);
    std::iota(r.begin(), r.end(), 0);
  }
  std::vector<int> c;
  if (cols) {
    c = *cols;
  } else {
    c.resize(B);
    std::iota(c.begin(), c.end(), 0);
  }
  for (int i : r) {
    if (i < 0 || i >= A) throw std::out_of_range("gather: row index out of range");
  }
  for (int j : c) {
    if (j < 0 || j >= B) throw std::out_of_range("gather: column index out of range");
  }
  std::vector<int> out_shape = shape;
  out_shape[0] = static_cast<int>(r.size());
  if (shape.size() >= 2) out_shape[1] = static_cast<int>(c.size());
  Tensor<T> y(out_shape);
  const T* pv = p.value().data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      const T* src = pv + (static_cast<std::size_t>(r[i]) * B + c[j]) * inner;
      std::copy(src, src + inner, y.data() + (i * c.size() + j) * inner);
    }
  }
  return make_result<T>(std::move(y), {p}, [=, r = std::move(r), c = std::move(c)](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    for (std::size_t i = 0; i < r.size(); ++i) {
      for (std::size_t j = 0; j < c.size(); ++j) {
        T* dst = g + (static_cast<std::size_t>(r[i]) * B + c[j]) * inner;
        const T* src = self.grad.data() + (i * c.size() + j) * inner;
        for (std::size_t k = 0; k < inner; ++k) dst[k] += src[k];
      }
    }
  });
}

// Concatenates [N,C_i,H,W] tensors along channels.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  for (const auto& v : parts) detail::require_rank(v, 4, "concat_channels input");
  const int N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  std::vector<int> offsets;
  for (const auto& v : parts) {
    if (v.dim(0) != N || v.dim(2) != H || v.dim(3) != W) {
      throw std::invalid_argument("concat_channels: batch or spatial size mismatch");
    }
    offsets.push_back(C);
    C += v.dim(1);
  }
  if (parts.size() == 1) return parts[0];
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Tensor<T> y({N, C, H, W});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int Ck = parts[k].dim(1);
    for (int n = 0; n < N; ++n) {
      const T* src = parts[k].value().data() + static_cast<std::size_t>(n) * Ck * HW;
      std::copy(src, src + Ck * HW, y.data() + (static_cast<std::size_t>(n) * C + offsets[k]) * HW);
    }
  }
  return make_result<T>(std::move(y), parts, [=](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& pn = *self.parents[k];
      if (!pn.requires_grad) continue;
      const int Ck = pn.value.dim(1);
      T* g = pn.ensure_grad().data();
      for (int n = 0; n < N; ++n) {
        const T* src = self.grad.data() + (static_cast<std::size_t>(n) * C + offsets[k]) * HW;
        T* dst = g + static_cast<std::size_t>(n) * Ck * HW;
        for (std::size_t i = 0; i < Ck * HW; ++i) dst[i] += src[i];
      }
    }
  });
}

// [C,K,K] -> [C,k,k] central crop.
template <typename T>
Var<T> center_crop_kernel(const Var<T>& w, int k) {
  detail::require_rank(w, 3, "center_crop_kernel input");
  const int C = w.dim(0), K = w.dim(1);
  if (k > K || (K - k) % 2 != 0) throw std::invalid_argument("center_crop_kernel: bad target size");
  const int off = (K - k) / 2;
  Tensor<T> y({C, k, k});
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        y[(static_cast<std::size_t>(c) * k + i) * k + j] =
            w.value()[(static_cast<std::size_t>(c) * K + i + off) * K + j + off];
      }
    }
  }
  return make_result<T>(std::move(y), {w}, [=](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    for (int c = 0; c < C; ++c) {
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          g[(static_cast<std::size_t>(c) * K + i + off) * K + j + off] +=
              self.grad[(static_cast<std::size_t>(c) * k + i) * k + j];
        }
      }
    }
  });
}

// Applies one k²×k² matrix to every flattened k×k kernel: out_c = M · vec(w_c).
template <typename T>
Var<T> kernel_matmul(const Var<T>& w, const Var<T>& m) {
  detail::require_rank(w, 3, "kernel_matmul kernel");
  const int C = w.dim(0), k = w.dim(1), kk = k * k;
  if (m.value().rank() != 2 || m.dim(0) != kk || m.dim(1) != kk) {
    throw std::invalid_argument("kernel_matmul: transform must be " + std::to_string(kk) + "x" +
                                std::to_string(kk));
  }
  Tensor<T> y({C, k, k});
  if (C > 0) {
    // Rows are flattened kernels: Y = W · Mᵀ.
    MatMap<T>(y.data(), C, kk).noalias() =
        ConstMatMap<T>(w.value().data(), C, kk) * ConstMatMap<T>(m.value().data(), kk, kk).transpose();
  }
  return make_result<T>(std::move(y), {w, m}, [=](Node<T>& self) {
    if (C == 0) return;
    auto& wn = *self.parents[0];
    auto& mn = *self.parents[1];
    ConstMatMap<T> gy(self.grad.data(), C, kk);
    if (wn.requires_grad) {
      MatMap<T>(wn.ensure_grad().data(), C, kk).noalias() += gy * ConstMatMap<T>(mn.value.data(), kk, kk);
    }
    if (mn.requires_grad) {
      MatMap<T>(mn.ensure_grad().data(), kk, kk).noalias() +=
          gy.transpose() * ConstMatMap<T>(wn.value.data(), C, kk);
    }
  });
}

// Row-wise numerically stable log-softmax of [N,K] logits (double precision).
template <typename T>
std::vector<double> log_softmax_rows(const Tensor<T>& logits, double temperature = 1.0) {
  const int N = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(static_cast<std::size_t>(N) * K);
  for (int n = 0; n < N; ++n) {
    double mx = -INFINITY;
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[n * K + k]) / temperature);
    double s = 0;
    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(logits[n * K + k]) / temperature - mx);
    const double lse = mx + std::log(s);
    for (int k = 0; k < K; ++k) out[n * K + k] = static_cast<double>(logits[n * K + k]) / temperature - lse;
  }
  return out;
}

// Mean cross-entropy over the batch.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(N)) throw std::invalid_argument("cross_entropy: label count");
  auto ls = log_softmax_rows(logits.value());
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K) throw std::out_of_range("cross_entropy: label out of range");
    loss -= ls[n * K + labels[n]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor<T> y({1}, static_cast<T>(loss / N));
  return make_result<T>(std::move(y), {logits}, [=, ls = std::move(ls), lab = std::move(lab)](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    const double go = self.grad[0] / N;
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        const double p = std::exp(ls[n * K + k]);
        g[n * K + k] += static_cast<T>(go * (p - (k == lab[n] ? 1.0 : 0.0)));
      }
    }
  });
}

// Mean over the batch of KL(softmax(student/τ) ‖ softmax(teacher/τ)).
// The teacher enters as a constant.
template <typename T>
Var<T> kl_divergence(const Var<T>& student_logits, const Tensor<T>& teacher_logits, double temperature) {
  detail::require_rank(student_logits, 2, "kl_divergence logits");
  if (teacher_logits.shape() != student_logits.shape()) throw std::invalid_argument("kl_divergence: shape");
  const int N = student_logits.dim(0), K = student_logits.dim(1);
  auto ls = log_softmax_rows(student_logits.value(), temperature);
  auto lt = log_softmax_rows(teacher_logits, temperature);
  double loss = 0;
  for (std::size_t i = 0; i < ls.size(); ++i) loss += std::exp(ls[i]) * (ls[i] - lt[i]);
  Tensor<T> y({1}, static_cast<T>(loss / N));
  return make_result<T>(std::move(y), {student_logits},
                        [=, ls = std::move(ls), lt = std::move(lt)](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad().data();
    const double go = self.grad[0] / N / temperature;
    for (int n = 0; n < N; ++n) {
      // d/dz_k of Σ p_j (log p_j − log q_j) with p = softmax(z/τ):
      //   (p_k / τ) · ((log p_k − log q_k) − Σ_j p_j (log p_j − log q_j))
      double kl = 0;
      for (int k = 0; k < K; ++k) kl += std::exp(ls[n * K + k]) * (ls[n * K + k] - lt[n * K + k]);
      for (int k = 0; k < K; ++k) {
        const double p = std::exp(ls[n * K + k]);
        g[n * K + k] += static_cast<T>(go * p * ((ls[n * K + k] - lt[n * K + k]) - kl));
      }
    }
  });
}

// Bilinear resize of a [N,C,H,W] batch (half-pixel centers, no gradient).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H == out_h && W == out_w) return x;
  Tensor<T> y({N, C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = std::max(0.0, (oy + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), H - 1);
    const int y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = std::max(0.0, (ox + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), W - 1);
      const int x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (int nc = 0; nc < N * C; ++nc) {
        const T* p = x.data() + static_cast<std::size_t>(nc) * H * W;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                         wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
        y[(static_cast<std::size_t>(nc) * out_h + oy) * out_w + ox] = static_cast<T>(v);
      }
    }
  }
  return y;
}

}  // namespace enas4d::ops
