// Copyright 2026 The THOR-MoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thor/errors.hpp"
#include "thor/rng.hpp"
#include "thor/tensor.hpp"

/// Differentiable primitives. All ops are define-by-run: results carry the
/// backward rule and references to their inputs.
namespace thor::ad {

inline constexpr double kKlFloor = 1e-9;
inline constexpr double kLayerNormEps = 1e-5;

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace kernels

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline std::span<double> grad_of(const Tensor& t) { return t.node()->ensure_grad(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ for " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  count_flops(2ULL * m * k * n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) kernels::gemm_nt(g, b.values().data(), detail::grad_of(a).data(), m, n, k);
    if (b.requires_grad()) kernels::gemm_tn(a.values().data(), g, detail::grad_of(b).data(), m, k, n);
  });
}

/// a[m x k] * b[n x k]^T.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ for " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  count_flops(2ULL * m * k * n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) kernels::gemm_nn(g, b.values().data(), detail::grad_of(a).data(), m, n, k);
    if (b.requires_grad()) kernels::gemm_tn(g, a.values().data(), detail::grad_of(b).data(), m, n, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  count_flops(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = detail::grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  count_flops(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    if (a.requires_grad()) {
      auto g = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto g = detail::grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  count_flops(out.size());
  return detail::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    if (a.requires_grad()) {
      auto g = detail::grad_of(a);
      const auto bv = b.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto g = detail::grad_of(b);
      const auto av = a.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= c;
  count_flops(out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, c](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not match " + to_string(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  count_flops(m * n);
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [x, bias, m, n](detail::Node& self) {
    if (x.requires_grad()) {
      auto g = detail::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bias.requires_grad()) {
      auto g = detail::grad_of(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  count_flops(out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
    auto g = detail::grad_of(x);
    const auto xv = x.values();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) g[i] += self.grad[i];
  });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ValidationError("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  count_flops(out.size());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  count_flops(x.numel());
  return detail::make_result({1}, {s}, {x}, [x](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalization

namespace detail {
struct AxisLayout {
  std::size_t outer, len, inner;
};
inline AxisLayout axis_layout(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisLayout l{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) l.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) l.inner *= shape[static_cast<std::size_t>(i)];
  return l;
}
}  // namespace detail

/// Softmax along `axis` (negative counts from the end), max-subtracted.
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const auto l = detail::axis_layout(x.shape(), axis);
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.len * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l.len; ++j) mx = std::max(mx, xv[base + j * l.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < l.len; ++j) {
        const double e = std::exp(xv[base + j * l.inner] - mx);
        out[base + j * l.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < l.len; ++j) out[base + j * l.inner] /= z;
    }
  }
  count_flops(3ULL * x.numel());
  auto result = detail::make_result(x.shape(), std::move(out), {x}, {});
  if (result.requires_grad()) {
    result.node()->backward = [x, l](detail::Node& self) {
      auto g = detail::grad_of(x);
      const auto& y = self.values;
      for (std::size_t o = 0; o < l.outer; ++o) {
        for (std::size_t in = 0; in < l.inner; ++in) {
          const std::size_t base = o * l.len * l.inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < l.len; ++j) dot += self.grad[base + j * l.inner] * y[base + j * l.inner];
          for (std::size_t j = 0; j < l.len; ++j) {
            const std::size_t idx = base + j * l.inner;
            g[idx] += y[idx] * (self.grad[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

/// Log-softmax along the last axis.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.cols(), m = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  count_flops(3ULL * x.numel());
  return detail::make_result(x.shape(), std::move(out), {x}, [x, m, n](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] - std::exp(self.values[i * n + j]) * gs;
    }
  });
}

/// Normalizes each row to zero mean / unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                     " do not match " + to_string(x.shape()));
  }
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  count_flops(8ULL * m * n);
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto gv = gain.values();
        if (gain.requires_grad()) {
          auto gg = detail::grad_of(gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += self.grad[i * n + j] * xhat[i * n + j];
        }
        if (bias.requires_grad()) {
          auto gb = detail::grad_of(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
        }
        if (x.requires_grad()) {
          auto gx = detail::grad_of(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gv[j];
              s1 += d;
              s2 += d * xhat[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double d = self.grad[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (d - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Lookup and row routing

/// Rows of `table[V x d]` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValidationError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(table.values().data() + rows[i] * d, d, out.data() + i * d);
  }
  return detail::make_result({ids.size(), d}, std::move(out), {table},
                             [table, d, rows = std::move(rows)](detail::Node& self) {
                               auto g = detail::grad_of(table);
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += self.grad[i * d + j];
                             });
}

/// Gathers rows `idx` of x[m x d] into a [|idx| x d] tensor.
inline Tensor take_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank2(x, "take_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m) throw ShapeError("take_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.values().data() + idx[i] * d, d, out.data() + i * d);
  }
  return detail::make_result({idx.size(), d}, std::move(out), {x},
                             [x, d, idx = std::vector<std::size_t>(idx.begin(), idx.end())](detail::Node& self) {
                               auto g = detail::grad_of(x);
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                             });
}

/// Scatter-adds part k's rows into rows `index[k]` of an m-row output.
/// Rows no part writes stay zero. Only a row's second and later
/// contributions cost adds.
inline Tensor combine_rows(const std::vector<Tensor>& parts, const std::vector<std::vector<std::size_t>>& index,
                           std::size_t m, std::size_t d) {
  if (parts.size() != index.size()) throw ShapeError("combine_rows: parts/index count mismatch");
  std::vector<double> out(m * d, 0.0);
  std::uint64_t contributions = 0;
  std::vector<std::uint8_t> touched(m, 0);
  std::uint64_t rows_touched = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].dim(0) != index[k].size() || parts[k].cols() != d) {
      throw ShapeError("combine_rows: part " + std::to_string(k) + " has shape " + to_string(parts[k].shape()));
    }
    const auto pv = parts[k].values();
    for (std::size_t i = 0; i < index[k].size(); ++i) {
      if (index[k][i] >= m) throw ShapeError("combine_rows: row index out of range");
      if (!touched[index[k][i]]) {
        touched[index[k][i]] = 1;
        ++rows_touched;
      }
      double* dst = out.data() + index[k][i] * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += pv[i * d + j];
    }
    contributions += index[k].size();
  }
  count_flops((contributions - rows_touched) * d);
  return detail::make_result({m, d}, std::move(out), parts, [parts, index, d](detail::Node& self) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      auto g = detail::grad_of(parts[k]);
      for (std::size_t i = 0; i < index[k].size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[index[k][i] * d + j];
    }
  });
}

/// Row-wise scaling: out[i, :] = s[i] * x[i, :], with s of shape [m x 1].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  detail::require_rank2(x, "scale_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (s.numel() != m) throw ShapeError("scale_rows: scale " + to_string(s.shape()) + " vs " + to_string(x.shape()));
  std::vector<double> out(m * d);
  const auto xv = x.values(), sv = s.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = sv[i] * xv[i * d + j];
  count_flops(m * d);
  return detail::make_result(x.shape(), std::move(out), {x, s}, [x, s, m, d](detail::Node& self) {
    if (x.requires_grad()) {
      auto g = detail::grad_of(x);
      const auto sv = s.values();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += sv[i] * self.grad[i * d + j];
    }
    if (s.requires_grad()) {
      auto g = detail::grad_of(s);
      const auto xv = x.values();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += xv[i * d + j] * self.grad[i * d + j];
        g[i] += acc;
      }
    }
  });
}

/// Picks x[rows[k], cols[k]] into a [k x 1] column.
inline Tensor pick(const Tensor& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  detail::require_rank2(x, "pick");
  if (rows.size() != cols.size()) throw ShapeError("pick: rows/cols length mismatch");
  const std::size_t n = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= x.dim(0) || cols[k] >= n) throw ShapeError("pick: index out of range");
    flat[k] = rows[k] * n + cols[k];
    out[k] = x.values()[flat[k]];
  }
  return detail::make_result({rows.size(), 1}, std::move(out), {x}, [x, flat = std::move(flat)](detail::Node& self) {
    auto g = detail::grad_of(x);
    for (std::size_t k = 0; k < flat.size(); ++k) g[flat[k]] += self.grad[k];
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Key validity and causality for a batch of B sequences laid out as B*len rows.
struct AttentionMask {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::vector<std::uint8_t> key_valid;  // B x key_len, empty = all valid
  bool causal = false;

  bool allowed(std::size_t b, std::size_t qi, std::size_t kj) const {
    if (causal && kj > qi) return false;
    return key_valid.empty() || key_valid[b * key_len + kj] != 0;
  }
};

/// Multi-head scaled dot-product attention over pre-projected q[B*Sq x D],
/// k, v[B*Sk x D]. Masked scores are excluded from the softmax; a row with no
/// admissible key produces a zero output. Optional dropout acts on the
/// attention weights.
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                           const AttentionMask& mask, double dropout_rate = 0.0,
                                           Rng* rng = nullptr) {
  detail::require_rank2(q, "attention");
  detail::require_rank2(k, "attention");
  detail::require_same_shape(k, v, "attention");
  const std::size_t B = mask.batch, Sq = mask.query_len, Sk = mask.key_len, D = q.dim(1);
  if (q.dim(0) != B * Sq || k.dim(0) != B * Sk || k.dim(1) != D) {
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + " vs mask " +
                     std::to_string(B) + "x(" + std::to_string(Sq) + "," + std::to_string(Sk) + ")");
  }
  if (!mask.key_valid.empty() && mask.key_valid.size() != B * Sk) throw ShapeError("attention: key mask size");
  if (heads == 0 || D % heads != 0) throw ShapeError("attention: model dim not divisible by heads");
  const std::size_t dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = dropout_rate > 0.0 && rng != nullptr;
  const double keep_scale = use_dropout ? 1.0 / (1.0 - dropout_rate) : 1.0;

  // probs[b][h][i][j]; weights = probs with dropout applied.
  const std::size_t P = B * heads * Sq * Sk;
  std::vector<double> probs(P, 0.0), weights(P, 0.0), out(B * Sq * D, 0.0);
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  std::vector<double> scores(Sk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Sq; ++i) {
        const double* qi = qv.data() + (b * Sq + i) * D + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < Sk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          const double* kj = kv.data() + (b * Sk + j) * D + h * dh;
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) continue;
        const std::size_t base = ((b * heads + h) * Sq + i) * Sk;
        double z = 0.0;
        for (std::size_t j = 0; j < Sk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          probs[base + j] = std::exp(scores[j] - mx);
          z += probs[base + j];
        }
        double* oi = out.data() + (b * Sq + i) * D + h * dh;
        for (std::size_t j = 0; j < Sk; ++j) {
          if (!mask.allowed(b, i, j)) continue;
          probs[base + j] /= z;
          double w = probs[base + j];
          if (use_dropout) w = rng->uniform() < dropout_rate ? 0.0 : w * keep_scale;
          weights[base + j] = w;
          if (w == 0.0) continue;
          const double* vj = vv.data() + (b * Sk + j) * D + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += w * vj[t];
        }
      }
    }
  }
  count_flops(4ULL * B * heads * Sq * Sk * dh + 3ULL * P);

  return detail::make_result(
      {B * Sq, D}, std::move(out), {q, k, v},
      [q, k, v, B, Sq, Sk, D, heads, dh, inv_sqrt, keep_scale, use_dropout, probs = std::move(probs),
       weights = std::move(weights)](detail::Node& self) {
        const auto qv = q.values(), kv = k.values(), vv = v.values();
        std::span<double> gq, gk, gv;
        if (q.requires_grad()) gq = detail::grad_of(q);
        if (k.requires_grad()) gk = detail::grad_of(k);
        if (v.requires_grad()) gv = detail::grad_of(v);
        std::vector<double> dprob(Sk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < Sq; ++i) {
              const std::size_t base = ((b * heads + h) * Sq + i) * Sk;
              const double* go = self.grad.data() + (b * Sq + i) * D + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < Sk; ++j) {
                dprob[j] = 0.0;
                if (probs[base + j] == 0.0) continue;
                const double* vj = vv.data() + (b * Sk + j) * D + h * dh;
                double dw = 0.0;
                for (std::size_t t = 0; t < dh; ++t) dw += go[t] * vj[t];
                if (!gv.empty() && weights[base + j] != 0.0) {
                  double* gvj = gv.data() + (b * Sk + j) * D + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gvj[t] += weights[base + j] * go[t];
                }
                // d weight / d prob is keep_scale when kept, 0 when dropped.
                if (use_dropout) dw = weights[base + j] == 0.0 ? 0.0 : dw * keep_scale;
                dprob[j] = dw;
                dot += dw * probs[base + j];
              }
              const double* qi = qv.data() + (b * Sq + i) * D + h * dh;
              for (std::size_t j = 0; j < Sk; ++j) {
                if (probs[base + j] == 0.0) continue;
                const double ds = probs[base + j] * (dprob[j] - dot) * inv_sqrt;
                const double* kj = kv.data() + (b * Sk + j) * D + h * dh;
                if (!gq.empty()) {
                  double* gqi = gq.data() + (b * Sq + i) * D + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                }
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * Sk + j) * D + h * dh;
                  for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over selected rows of KL(p || q) along the last axis. q is floored at
/// kKlFloor inside the logarithm. Rows with `row_mask[i] == 0` are skipped;
/// an empty mask selects every row.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q, std::span<const std::uint8_t> row_mask = {}) {
  detail::require_same_shape(p, q, "kl_divergence");
  const std::size_t n = p.cols(), m = p.numel() / n;
  if (!row_mask.empty() && row_mask.size() != m) throw ShapeError("kl_divergence: row mask length mismatch");
  const auto pv = p.values(), qv = q.values();
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask.empty() && !row_mask[i]) continue;
    double ps = 0.0, qs = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ps += pv[i * n + j];
      qs += qv[i * n + j];
    }
    if (std::abs(ps - 1.0) > 1e-6 || std::abs(qs - 1.0) > 1e-6) {
      throw ValidationError("kl_divergence: row " + std::to_string(i) + " is not a distribution (sums " +
                            std::to_string(ps) + ", " + std::to_string(qs) + ")");
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = pv[i * n + j];
      if (pj <= 0.0) continue;
      total += pj * (std::log(pj) - std::log(std::max(qv[i * n + j], kKlFloor)));
    }
    ++count;
  }
  const double value = count ? total / static_cast<double>(count) : 0.0;
  count_flops(4ULL * count * n);
  std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
  return detail::make_result({1}, {value}, {p, q}, [p, q, m, n, count, mask = std::move(mask)](detail::Node& self) {
    if (count == 0) return;
    const double g = self.grad[0] / static_cast<double>(count);
    const auto pv = p.values(), qv = q.values();
    std::span<double> gp, gq;
    if (p.requires_grad()) gp = detail::grad_of(p);
    if (q.requires_grad()) gq = detail::grad_of(q);
    for (std::size_t i = 0; i < m; ++i) {
      if (!mask.empty() && !mask[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = i * n + j;
        const double qj = std::max(qv[idx], kKlFloor);
        if (!gp.empty()) gp[idx] += g * (std::log(std::max(pv[idx], kKlFloor)) + 1.0 - std::log(qj));
        if (!gq.empty() && qv[idx] > kKlFloor) gq[idx] -= g * pv[idx] / qv[idx];
      }
    }
  });
}

/// Mean token cross-entropy of logits[n x V] against `targets`, skipping rows
/// whose target equals `pad_id`. With smoothing e the target distribution is
/// (1-e) one-hot + e/V uniform.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id,
                            double label_smoothing = 0.0) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t m = logits.dim(0), V = logits.dim(1);
  if (targets.size() != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + to_string(logits.shape()));
  }
  const auto xv = logits.values();
  std::vector<double> probs(m * V, 0.0);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  double total = 0.0;
  const double eps = label_smoothing, uni = label_smoothing / static_cast<double>(V);
  for (std::size_t i = 0; i < m; ++i) {
    if (tgt[i] == pad_id) continue;
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= V) {
      throw ValidationError("cross_entropy: target " + std::to_string(tgt[i]) + " outside vocabulary of size " +
                            std::to_string(V));
    }
    const double* row = xv.data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    double row_loss = -(1.0 - eps) * (row[tgt[i]] - lse);
    if (eps > 0.0) {
      double s = 0.0;
      for (std::size_t j = 0; j < V; ++j) s += row[j] - lse;
      row_loss -= uni * s;
    }
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] = std::exp(row[j] - lse);
    total += row_loss;
    ++count;
  }
  count_flops(5ULL * count * V);
  const double value = count ? total / static_cast<double>(count) : 0.0;
  return detail::make_result(
      {1}, {value}, {logits},
      [logits, m, V, count, eps, uni, pad_id, tgt = std::move(tgt), probs = std::move(probs)](detail::Node& self) {
        if (count == 0) return;
        auto g = detail::grad_of(logits);
        const double s = self.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < m; ++i) {
          if (tgt[i] == pad_id) continue;
          for (std::size_t j = 0; j < V; ++j) {
            double target = uni;
            if (static_cast<int>(j) == tgt[i]) target += 1.0 - eps;
            g[i * V + j] += s * (probs[i * V + j] - target);
          }
        }
      });
}

}  // namespace thor::ad
