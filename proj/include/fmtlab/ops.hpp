// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable primitives over fmtlab::Tensor.
//
// Conventions: "lastdim" ops act on the trailing axis; matmul flattens the
// leading axes of its left operand when the right operand is a matrix.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmtlab/error.hpp"
#include "fmtlab/tensor.hpp"

namespace fmtlab {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline void accumulate_scaled(Node* target, const std::vector<double>& g, double f) {
  if (!target) return;
  auto& buf = target->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += f * g[i];
}

// C(m×n) += A(m×k) · B(k×n)
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA(m×k) += f · dC(m×n) · B(k×n)ᵀ
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* dc,
                    const double* b, double* da, double f) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
      da[i * k + p] += f * acc;
    }
  }
}

// dB(k×n) += f · A(m×k)ᵀ · dC(m×n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* dc, double* db, double f) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = f * a[i * k + p];
      if (av == 0.0) continue;
      double* brow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * drow[j];
    }
  }
}

template <typename Forward, typename Deriv>
Tensor unary_map(const Tensor& x, OpKind kind, Forward fwd, Deriv deriv) {
  auto out = std::make_shared<std::vector<double>>(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) (*out)[i] = fwd(xs[i]);
  return Tensor::make_result(
      x.shape(), out, {&x}, [x, out, kind, deriv](Node& self) {
        auto& buf = self.inputs[0]->grad_buffer();
        const double f = fault_factor(kind);
        auto xs = x.data();
        for (std::size_t i = 0; i < buf.size(); ++i) {
          buf[i] += f * self.grad[i] * deriv(xs[i], (*out)[i]);
        }
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const double f = fault_factor(OpKind::add);
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, f);
    detail::accumulate_scaled(self.inputs[1].get(), self.grad, f);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, 1.0);
    detail::accumulate_scaled(self.inputs[1].get(), self.grad, -1.0);
  });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "multiply");
  std::vector<double> out(a.numel());
  auto as = a.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [a, b](Node& self) {
    const double f = fault_factor(OpKind::multiply);
    if (auto* na = self.inputs[0].get()) {
      auto& buf = na->grad_buffer();
      auto bs = b.data();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += f * self.grad[i] * bs[i];
    }
    if (auto* nb = self.inputs[1].get()) {
      auto& buf = nb->grad_buffer();
      auto as = a.data();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += f * self.grad[i] * as[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * xs[i];
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, s);
  });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + s;
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, 1.0);
  });
}

// x[..., n] + bias[n], broadcast over leading axes.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last dim of " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  auto xs = x.data();
  auto bs = bias.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] + bs[i % n];
  return Tensor::make_result(x.shape(), std::move(out), {&x, &bias}, [n](Node& self) {
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, 1.0);
    if (auto* nb = self.inputs[1].get()) {
      auto& buf = nb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) buf[i % n] += self.grad[i];
    }
  });
}

// Subgradient 0 at the origin.
inline Tensor relu(const Tensor& x) {
  return detail::unary_map(
      x, OpKind::relu, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_map(
      x, OpKind::sigmoid,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_map(
      x, OpKind::tanh, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m×k]·[k×n]; [...×k]·[k×n] (leading axes flattened); [B×m×k]·[B×k×n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();

  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool batched_rhs = false;
  Shape out_shape;
  if (b.rank() == 2) {
    k = a.shape().back();
    if (b.dim(0) != k) throw mismatch();
    n = b.dim(1);
    m = a.numel() / k;
    out_shape = a.shape();
    out_shape.back() = n;
  } else if (a.rank() == 3 && b.rank() == 3) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) throw mismatch();
    batch = a.dim(0);
    m = a.dim(1);
    k = a.dim(2);
    n = b.dim(2);
    batched_rhs = true;
    out_shape = {batch, m, n};
  } else {
    throw mismatch();
  }

  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_nn(m, k, n, ad + s * m * k, bd + (batched_rhs ? s * k * n : 0),
                    out.data() + s * m * n);
  }
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {&a, &b},
      [a, b, batch, m, k, n, batched_rhs](Node& self) {
        const double f = fault_factor(OpKind::matmul);
        const double* ad = a.data().data();
        const double* bd = b.data().data();
        const double* g = self.grad.data();
        if (auto* na = self.inputs[0].get()) {
          double* da = na->grad_buffer().data();
          for (std::size_t s = 0; s < batch; ++s) {
            detail::gemm_nt(m, k, n, g + s * m * n, bd + (batched_rhs ? s * k * n : 0),
                            da + s * m * k, f);
          }
        }
        if (auto* nb = self.inputs[1].get()) {
          double* db = nb->grad_buffer().data();
          for (std::size_t s = 0; s < batch; ++s) {
            detail::gemm_tn(m, k, n, ad + s * m * k, g + s * m * n,
                            db + (batched_rhs ? s * k * n : 0), f);
          }
        }
      });
}

// Swap the two trailing axes of a rank-2 or rank-3 tensor.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("transpose_last2: expected rank 2 or 3, got " + shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[x.rank() - 2];
  const std::size_t c = x.shape()[x.rank() - 1];
  const std::size_t batch = x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(x.numel());
  auto xs = x.data();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = xs[s * r * c + i * c + j];
  return Tensor::make_result(std::move(shape), std::move(out), {&x},
                             [batch, r, c](Node& self) {
                               auto& buf = self.inputs[0]->grad_buffer();
                               for (std::size_t s = 0; s < batch; ++s)
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     buf[s * r * c + i * c + j] += self.grad[s * r * c + j * r + i];
                             });
}

// ---------------------------------------------------------------------------
// Normalisers

// Softmax over the last axis. `keep` (1 = attend) has either T entries, shared
// by every row, or dim(0)·T entries, one key mask per leading slice. Masked
// entries are exactly 0.
inline Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> keep = {}) {
  const std::size_t len = scores.shape().back();
  const std::size_t rows = scores.numel() / len;
  std::size_t rows_per_group = rows;
  if (!keep.empty()) {
    if (keep.size() == len) {
      rows_per_group = rows;
    } else if (keep.size() == scores.dim(0) * len && scores.rank() >= 2) {
      rows_per_group = rows / scores.dim(0);
    } else {
      throw DimensionError("masked_softmax: mask of " + std::to_string(keep.size()) +
                           " entries does not fit scores " + shape_str(scores.shape()));
    }
  }
  auto out = std::make_shared<std::vector<double>>(scores.numel(), 0.0);
  auto xs = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = xs.data() + r * len;
    double* y = out->data() + r * len;
    const std::uint8_t* mk = nullptr;
    if (!keep.empty()) mk = keep.data() + (keep.size() == len ? 0 : (r / rows_per_group) * len);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j)
      if (!mk || mk[j]) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("masked_softmax: every position of row " + std::to_string(r) +
                         " is masked (degenerate attention row)");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      if (mk && !mk[j]) continue;
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < len; ++j) y[j] /= total;
  }
  return Tensor::make_result(scores.shape(), out, {&scores}, [out, len, rows](Node& self) {
    const double f = fault_factor(OpKind::softmax);
    auto& buf = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = out->data() + r * len;
      const double* g = self.grad.data() + r * len;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < len; ++j) buf[r * len + j] += f * y[j] * (g[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalise each last-axis row to zero mean / unit variance, then gain·x̂ + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " do not match input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  auto xs = x.data();
  auto gs = gain.data();
  auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gs[j] * h + bs[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [gain, xhat, inv_std, d, rows](Node& self) {
        const double f = fault_factor(OpKind::layer_norm);
        auto gs = gain.data();
        const auto& g = self.grad;
        if (auto* nx = self.inputs[0].get()) {
          auto& buf = nx->grad_buffer();
          std::vector<double> dxh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxh[j] = g[r * d + j] * gs[j];
              m1 += dxh[j];
              m2 += dxh[j] * (*xhat)[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              buf[r * d + j] += f * (*inv_std)[r] * (dxh[j] - m1 - (*xhat)[r * d + j] * m2);
            }
          }
        }
        if (auto* ng = self.inputs[1].get()) {
          auto& buf = ng->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) buf[i % d] += f * g[i] * (*xhat)[i];
        }
        if (auto* nb = self.inputs[2].get()) {
          auto& buf = nb->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) buf[i % d] += f * g[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

// Same-length cross-correlation along the last axis.
//
// x is [C_in × ... × L] (channels first, any number of middle axes that are
// treated as independent positions), kernels are [C_out × C_in × k]. Padding is
// ceil((k-1)/2) zeros on the left and floor((k-1)/2) on the right.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels,
                     const std::optional<Tensor>& bias = std::nullopt) {
  if (x.rank() < 2) {
    throw DimensionError("conv1d: input must be [C_in x ... x L], got " + shape_str(x.shape()));
  }
  if (kernels.rank() != 3 || kernels.dim(1) != x.dim(0)) {
    throw DimensionError("conv1d: kernels " + shape_str(kernels.shape()) +
                         " do not match input channels of " + shape_str(x.shape()));
  }
  const std::size_t c_in = x.dim(0);
  const std::size_t c_out = kernels.dim(0);
  const std::size_t k = kernels.dim(2);
  const std::size_t len = x.shape().back();
  const std::size_t inner = x.numel() / (c_in * len);
  const std::ptrdiff_t pad_left = static_cast<std::ptrdiff_t>(k / 2);  // == ceil((k-1)/2)
  if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
    throw DimensionError("conv1d: bias " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(c_out) + " output channels");
  }

  Shape out_shape = x.shape();
  out_shape[0] = c_out;
  std::vector<double> out(c_out * inner * len, 0.0);
  auto xs = x.data();
  auto ws = kernels.data();
  const auto L = static_cast<std::ptrdiff_t>(len);

  // Valid output range [lo, hi) for tap j.
  auto tap_range = [pad_left, L](std::size_t j) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad_left;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(L, L - shift);
    return std::tuple{shift, lo, hi};
  };

  for (std::size_t co = 0; co < c_out; ++co) {
    if (bias) {
      const double bv = bias->data()[co];
      for (std::size_t i = 0; i < inner * len; ++i) out[co * inner * len + i] = bv;
    }
    for (std::size_t ci = 0; ci < c_in; ++ci) {
      for (std::size_t j = 0; j < k; ++j) {
        const double w = ws[(co * c_in + ci) * k + j];
        auto [shift, lo, hi] = tap_range(j);
        if (w == 0.0 || lo >= hi) continue;
        for (std::size_t n = 0; n < inner; ++n) {
          double* orow = out.data() + (co * inner + n) * len;
          const double* xrow = xs.data() + (ci * inner + n) * len;
          for (std::ptrdiff_t l = lo; l < hi; ++l) orow[l] += w * xrow[l + shift];
        }
      }
    }
  }

  std::vector<const Tensor*> inputs{&x, &kernels};
  if (bias) inputs.push_back(&*bias);
  return Tensor::make_result(
      std::move(out_shape), std::move(out), inputs,
      [x, kernels, c_in, c_out, k, len, inner, tap_range](Node& self) {
        const double f = fault_factor(OpKind::conv1d);
        auto xs = x.data();
        auto ws = kernels.data();
        const auto& g = self.grad;
        Node* nx = self.inputs[0].get();
        Node* nw = self.inputs[1].get();
        Node* nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
        double* dx = nx ? nx->grad_buffer().data() : nullptr;
        double* dw = nw ? nw->grad_buffer().data() : nullptr;
        for (std::size_t co = 0; co < c_out; ++co) {
          if (nb) {
            double acc = 0.0;
            for (std::size_t i = 0; i < inner * len; ++i) acc += g[co * inner * len + i];
            nb->grad_buffer()[co] += f * acc;
          }
          for (std::size_t ci = 0; ci < c_in; ++ci) {
            for (std::size_t j = 0; j < k; ++j) {
              auto [shift, lo, hi] = tap_range(j);
              if (lo >= hi) continue;
              const std::size_t widx = (co * c_in + ci) * k + j;
              const double w = ws[widx];
              double wacc = 0.0;
              for (std::size_t n = 0; n < inner; ++n) {
                const double* grow = g.data() + (co * inner + n) * len;
                const double* xrow = xs.data() + (ci * inner + n) * len;
                double* dxrow = dx ? dx + (ci * inner + n) * len : nullptr;
                for (std::ptrdiff_t l = lo; l < hi; ++l) {
                  wacc += grow[l] * xrow[l + shift];
                  if (dxrow) dxrow[l + shift] += f * w * grow[l];
                }
              }
              if (dw) dw[widx] += f * wacc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return Tensor::make_result(std::move(shape), x.buffer(), {&x}, [](Node& self) {
    detail::accumulate_scaled(self.inputs[0].get(), self.grad, 1.0);
  });
}

inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_lastdim: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) {
      throw DimensionError("concat_lastdim: leading shape " + shape_str(p.shape()) +
                           " does not match " + shape_str(parts[0].shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto ps = parts[i].data();
    const std::size_t w = widths[i];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(ps.data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }
  Shape shape = lead;
  shape.push_back(total);
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return Tensor::make_result(std::move(shape), std::move(out), inputs,
                             [widths, rows, total](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t i = 0; i < widths.size(); ++i) {
                                 const std::size_t w = widths[i];
                                 if (auto* n = self.inputs[i].get()) {
                                   auto& buf = n->grad_buffer();
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t j = 0; j < w; ++j)
                                       buf[r * w + j] += self.grad[r * total + offset + j];
                                 }
                                 offset += w;
                               }
                             });
}

inline Tensor slice_lastdim(const Tensor& x, std::size_t offset, std::size_t width) {
  const std::size_t total = x.shape().back();
  if (width == 0 || offset + width > total) {
    throw DimensionError("slice_lastdim: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + width) + ") out of range for " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / total;
  std::vector<double> out(rows * width);
  auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xs.data() + r * total + offset, width, out.data() + r * width);
  Shape shape = x.shape();
  shape.back() = width;
  return Tensor::make_result(std::move(shape), std::move(out), {&x},
                             [rows, total, offset, width](Node& self) {
                               auto& buf = self.inputs[0]->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < width; ++j)
                                   buf[r * total + offset + j] += self.grad[r * width + j];
                             });
}

// Stack equally shaped tensors along a new leading axis.
inline Tensor stack_newdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("stack_newdim: no inputs");
  const Shape& s0 = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != s0) {
      throw DimensionError("stack_newdim: shape " + shape_str(p.shape()) + " differs from " +
                           shape_str(s0));
    }
  }
  const std::size_t each = parts[0].numel();
  std::vector<double> out(each * parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i)
    std::copy_n(parts[i].data().data(), each, out.data() + i * each);
  Shape shape{parts.size()};
  shape.insert(shape.end(), s0.begin(), s0.end());
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return Tensor::make_result(std::move(shape), std::move(out), inputs, [each](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (auto* n = self.inputs[i].get()) {
        auto& buf = n->grad_buffer();
        for (std::size_t j = 0; j < each; ++j) buf[j] += self.grad[i * each + j];
      }
    }
  });
}

// Pick `index` along `axis`, removing that axis.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank() || index >= x.dim(axis) || x.rank() < 2) {
    throw DimensionError("select: axis " + std::to_string(axis) + " index " +
                         std::to_string(index) + " invalid for " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t extent = x.dim(axis);
  std::vector<double> out(outer * inner);
  auto xs = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xs.data() + (o * extent + index) * inner, inner, out.data() + o * inner);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return Tensor::make_result(std::move(shape), std::move(out), {&x},
                             [outer, inner, extent, index](Node& self) {
                               auto& buf = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < inner; ++j)
                                   buf[(o * extent + index) * inner + j] += self.grad[o * inner + j];
                             });
}

// Row r of the result is a[r] when keep[r], else b[r]. Rows are dim(0) slices.
inline Tensor select_rows(std::span<const std::uint8_t> keep, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "select_rows");
  if (keep.size() != a.dim(0)) {
    throw DimensionError("select_rows: " + std::to_string(keep.size()) + " flags for " +
                         shape_str(a.shape()));
  }
  const std::size_t width = a.numel() / a.dim(0);
  std::vector<std::uint8_t> flags(keep.begin(), keep.end());
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < flags.size(); ++r) {
    const auto& src = flags[r] ? a : b;
    std::copy_n(src.data().data() + r * width, width, out.data() + r * width);
  }
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [flags, width](Node& self) {
    for (std::size_t r = 0; r < flags.size(); ++r) {
      Node* n = self.inputs[flags[r] ? 0 : 1].get();
      if (!n) continue;
      auto& buf = n->grad_buffer();
      for (std::size_t j = 0; j < width; ++j) buf[r * width + j] += self.grad[r * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({1}, {total}, {&x}, [](Node& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    for (auto& v : buf) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean absolute difference; subgradient 0 where a == b.
inline Tensor l1_distance(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "l1_distance");
  const double inv_n = 1.0 / static_cast<double>(a.numel());
  auto as = a.data();
  auto bs = b.data();
  double total = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) total += std::abs(as[i] - bs[i]);
  return Tensor::make_result({1}, {total * inv_n}, {&a, &b}, [a, b, inv_n](Node& self) {
    auto as = a.data();
    auto bs = b.data();
    const double g = self.grad[0] * inv_n;
    for (std::size_t side = 0; side < 2; ++side) {
      Node* n = self.inputs[side].get();
      if (!n) continue;
      auto& buf = n->grad_buffer();
      const double sgn_side = side == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < as.size(); ++i) {
        const double d = as[i] - bs[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        buf[i] += sgn_side * g * s;
      }
    }
  });
}

// Mean binary cross-entropy of logits against {0,1} targets.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.numel() != targets.numel()) {
    throw DimensionError("bce_with_logits: " + shape_str(logits.shape()) + " vs " +
                         shape_str(targets.shape()));
  }
  const double inv_n = 1.0 / static_cast<double>(logits.numel());
  auto xs = logits.data();
  auto ys = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = xs[i];
    total += std::max(x, 0.0) - x * ys[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return Tensor::make_result({1}, {total * inv_n}, {&logits}, [logits, targets, inv_n](Node& self) {
    auto xs = logits.data();
    auto ys = targets.data();
    auto& buf = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      buf[i] += self.grad[0] * inv_n * (s - ys[i]);
    }
  });
}

// Mean softmax cross-entropy of logits [N×k] against class indices.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(n * k);
  auto xs = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) {
      throw DimensionError("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                           " out of range for " + std::to_string(k) + " classes");
    }
    const double* x = xs.data() + r * k;
    double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(x[j] - mx) / z;
    total += -(x[labels[r]] - mx - std::log(z));
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const double inv_n = 1.0 / static_cast<double>(n);
  return Tensor::make_result({1}, {total * inv_n}, {&logits}, [probs, lab, k, inv_n](Node& self) {
    auto& buf = self.inputs[0]->grad_buffer();
    const double g = self.grad[0] * inv_n;
    for (std::size_t r = 0; r < lab.size(); ++r)
      for (std::size_t j = 0; j < k; ++j)
        buf[r * k + j] += g * ((*probs)[r * k + j] - (j == lab[r] ? 1.0 : 0.0));
  });
}

// Inverted dropout; identity when rate == 0.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution drop(rate);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = drop(rng) ? 0.0 : keep_scale;
  return multiply(x, Tensor(x.shape(), std::move(mask)));
}

// Throws NumericError naming `where` if any value is NaN or infinite.
inline void require_finite(const Tensor& x, const std::string& where) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in " + where);
  }
}

}  // namespace fmtlab
