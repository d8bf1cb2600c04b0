#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "entmask/rng.hpp"
#include "entmask/tensor.hpp"

namespace entmask {
namespace detail {

// All reductions below accumulate in double and round to float once at the
// end. When `accumulate` is set the existing contents of C are folded into
// the accumulator first, which is how backward passes add contributions.

// C[m,n] (+)= A[m,k] * B[k,n]
inline void gemm_nn(const float* A, const float* B, float* C, int m, int k,
                    int n, bool accumulate) {
  std::vector<double> row(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    float* crow = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) row[j] = accumulate ? crow[j] : 0.0;
    const float* arow = A + static_cast<size_t>(i) * k;
    for (int t = 0; t < k; ++t) {
      const double a = arow[t];
      if (a == 0.0) continue;
      const float* brow = B + static_cast<size_t>(t) * n;
      for (int j = 0; j < n; ++j) row[j] += a * brow[j];
    }
    for (int j = 0; j < n; ++j) crow[j] = static_cast<float>(row[j]);
  }
}

// C[m,p] (+)= A[m,n] * B[p,n]^T
inline void gemm_nt(const float* A, const float* B, float* C, int m, int n,
                    int p, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = A + static_cast<size_t>(i) * n;
    float* crow = C + static_cast<size_t>(i) * p;
    for (int j = 0; j < p; ++j) {
      const float* brow = B + static_cast<size_t>(j) * n;
      double acc = accumulate ? crow[j] : 0.0;
      for (int t = 0; t < n; ++t) acc += static_cast<double>(arow[t]) * brow[t];
      crow[j] = static_cast<float>(acc);
    }
  }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
inline void gemm_tn(const float* A, const float* B, float* C, int m, int k,
                    int n, bool accumulate) {
  std::vector<double> acc(static_cast<size_t>(k) * n, 0.0);
  if (accumulate) {
    for (size_t i = 0; i < acc.size(); ++i) acc[i] = C[i];
  }
  for (int t = 0; t < m; ++t) {
    const float* arow = A + static_cast<size_t>(t) * k;
    const float* brow = B + static_cast<size_t>(t) * n;
    for (int i = 0; i < k; ++i) {
      const double a = arow[i];
      if (a == 0.0) continue;
      double* crow = acc.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
  for (size_t i = 0; i < acc.size(); ++i) C[i] = static_cast<float>(acc[i]);
}

inline bool wants_grad(Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

inline Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.dims()) +
                     " x " + shape_str(b.dims()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::zeros({m, n});
  detail::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  if (detail::wants_grad(tape, {&a, &b})) {
    c.set_requires_grad(true);
    tape->record([a, b, c, m, k, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      if (a.requires_grad()) detail::gemm_nt(dc, b.data(), a.grad().data(), m, n, k, true);
      if (b.requires_grad()) detail::gemm_tn(a.data(), dc, b.grad().data(), m, k, n, true);
    });
  }
  return c;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
  }
  Tensor c = Tensor::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] + b.data()[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    c.set_requires_grad(true);
    tape->record([a, b, c, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      if (a.requires_grad()) {
        float* da = a.grad().data();
        for (int64_t i = 0; i < n; ++i) da[i] += dc[i];
      }
      if (b.requires_grad()) {
        float* db = b.grad().data();
        for (int64_t i = 0; i < n; ++i) db[i] += dc[i];
      }
    });
  }
  return c;
}

// a[m,n] + bias[n], broadcast over rows.
inline Tensor add_bias(Tape* tape, const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.cols()) {
    throw ShapeError("add_bias: shape mismatch " + shape_str(a.dims()) +
                     " + " + shape_str(bias.dims()));
  }
  const int m = a.rows(), n = a.cols();
  Tensor c = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) c.at(i, j) = a.at(i, j) + bias.data()[j];
  }
  if (detail::wants_grad(tape, {&a, &bias})) {
    c.set_requires_grad(true);
    tape->record([a, bias, c, m, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      if (a.requires_grad()) {
        float* da = a.grad().data();
        for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i) da[i] += dc[i];
      }
      if (bias.requires_grad()) {
        float* db = bias.grad().data();
        for (int j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += dc[static_cast<size_t>(i) * n + j];
          db[j] += static_cast<float>(acc);
        }
      }
    });
  }
  return c;
}

inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
  }
  Tensor c = Tensor::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * b.data()[i];
  if (detail::wants_grad(tape, {&a, &b})) {
    c.set_requires_grad(true);
    tape->record([a, b, c, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      if (a.requires_grad()) {
        float* da = a.grad().data();
        for (int64_t i = 0; i < n; ++i) da[i] += dc[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        float* db = b.grad().data();
        for (int64_t i = 0; i < n; ++i) db[i] += dc[i] * a.data()[i];
      }
    });
  }
  return c;
}

inline Tensor scale(Tape* tape, const Tensor& a, double s) {
  Tensor c = Tensor::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    c.data()[i] = static_cast<float>(a.data()[i] * s);
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, s, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      for (int64_t i = 0; i < n; ++i) da[i] += static_cast<float>(dc[i] * s);
    });
  }
  return c;
}

inline Tensor sum(Tape* tape, const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  Tensor c = Tensor::scalar(acc);
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c]() mutable {
      if (!c.has_grad()) return;
      const float g = c.grad()[0];
      float* da = a.grad().data();
      for (int64_t i = 0; i < a.numel(); ++i) da[i] += g;
    });
  }
  return c;
}

inline Tensor softmax_rows(Tape* tape, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(a.dims()));
  const int m = a.rows(), n = a.cols();
  Tensor c = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const float* x = a.data() + static_cast<size_t>(i) * n;
    float* p = c.data() + static_cast<size_t>(i) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max<double>(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(static_cast<double>(x[j]) - mx);
    for (int j = 0; j < n; ++j) {
      p[j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / z);
    }
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, m, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      for (int i = 0; i < m; ++i) {
        const float* p = c.data() + static_cast<size_t>(i) * n;
        const float* g = dc + static_cast<size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * p[j];
        float* d = da + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
          d[j] += static_cast<float>(p[j] * (g[j] - dot));
        }
      }
    });
  }
  return c;
}

inline Tensor gelu(Tape* tape, const Tensor& a) {
  Tensor c = Tensor::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    c.data()[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (int64_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
        da[i] += static_cast<float>(dc[i] * (cdf + x * pdf));
      }
    });
  }
  return c;
}

inline Tensor relu(Tape* tape, const Tensor& a) {
  Tensor c = Tensor::zeros(a.dims());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) c.data()[i] = std::max(0.0f, a.data()[i]);
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        if (a.data()[i] > 0.0f) da[i] += dc[i];
      }
    });
  }
  return c;
}

// Row-wise layer norm with learned gain and shift.
inline Tensor layer_norm(Tape* tape, const Tensor& a, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  if (a.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != a.cols() || beta.dim(0) != a.cols()) {
    throw ShapeError("layer_norm: shape mismatch " + shape_str(a.dims()) +
                     ", gamma " + shape_str(gamma.dims()) + ", beta " +
                     shape_str(beta.dims()));
  }
  const int m = a.rows(), n = a.cols();
  Tensor c = Tensor::zeros({m, n});
  std::vector<double> mean(static_cast<size_t>(m)), inv_std(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const float* x = a.data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x[j] - mu;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    mean[static_cast<size_t>(i)] = mu;
    inv_std[static_cast<size_t>(i)] = inv;
    float* y = c.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double xhat = (x[j] - mu) * inv;
      y[j] = static_cast<float>(gamma.data()[j] * xhat + beta.data()[j]);
    }
  }
  if (detail::wants_grad(tape, {&a, &gamma, &beta})) {
    c.set_requires_grad(true);
    tape->record([a, gamma, beta, c, m, n, mean, inv_std]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      std::vector<double> dgamma(static_cast<size_t>(n), 0.0);
      std::vector<double> dbeta(static_cast<size_t>(n), 0.0);
      std::vector<double> xhat(static_cast<size_t>(n)), dxhat(static_cast<size_t>(n));
      for (int i = 0; i < m; ++i) {
        const float* x = a.data() + static_cast<size_t>(i) * n;
        const float* g = dc + static_cast<size_t>(i) * n;
        const double mu = mean[static_cast<size_t>(i)];
        const double inv = inv_std[static_cast<size_t>(i)];
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < n; ++j) {
          xhat[static_cast<size_t>(j)] = (x[j] - mu) * inv;
          dxhat[static_cast<size_t>(j)] = static_cast<double>(g[j]) * gamma.data()[j];
          s1 += dxhat[static_cast<size_t>(j)];
          s2 += dxhat[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
          dgamma[static_cast<size_t>(j)] += static_cast<double>(g[j]) * xhat[static_cast<size_t>(j)];
          dbeta[static_cast<size_t>(j)] += g[j];
        }
        if (a.requires_grad()) {
          float* da = a.grad().data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const double d =
                inv * (dxhat[static_cast<size_t>(j)] - s1 / n -
                       xhat[static_cast<size_t>(j)] * s2 / n);
            da[j] += static_cast<float>(d);
          }
        }
      }
      if (gamma.requires_grad()) {
        float* dg = gamma.grad().data();
        for (int j = 0; j < n; ++j) dg[j] += static_cast<float>(dgamma[static_cast<size_t>(j)]);
      }
      if (beta.requires_grad()) {
        float* db = beta.grad().data();
        for (int j = 0; j < n; ++j) db[j] += static_cast<float>(dbeta[static_cast<size_t>(j)]);
      }
    });
  }
  return c;
}

// out[i] = table[idx[i]], rows gathered from a rank-2 table.
inline Tensor gather_rows(Tape* tape, const Tensor& table, std::vector<int> idx) {
  if (table.rank() != 2) {
    throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.dims()));
  }
  const int v = table.rows(), d = table.cols();
  for (int id : idx) {
    if (id < 0 || id >= v) {
      throw IndexError("gather_rows: index " + std::to_string(id) +
                       " out of range for table with " + std::to_string(v) + " rows");
    }
  }
  const int m = static_cast<int>(idx.size());
  Tensor c = Tensor::zeros({m, d});
  for (int i = 0; i < m; ++i) {
    const float* src = table.data() + static_cast<size_t>(idx[static_cast<size_t>(i)]) * d;
    float* dst = c.data() + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  if (detail::wants_grad(tape, {&table})) {
    c.set_requires_grad(true);
    tape->record([table, c, idx, m, d]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* dt = table.grad().data();
      for (int i = 0; i < m; ++i) {
        float* row = dt + static_cast<size_t>(idx[static_cast<size_t>(i)]) * d;
        const float* g = dc + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return c;
}

inline Tensor transpose(Tape* tape, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.dims()));
  const int m = a.rows(), n = a.cols();
  Tensor c = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) c.at(j, i) = a.at(i, j);
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, m, n]() mutable {
      if (!c.has_grad()) return;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) a.grad()[static_cast<size_t>(i) * n + j] += c.grad()[static_cast<size_t>(j) * m + i];
      }
    });
  }
  return c;
}

inline Tensor reshape(Tape* tape, const Tensor& a, std::vector<int> dims) {
  if (numel_of(dims) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.dims()) + " as " + shape_str(dims));
  }
  Tensor c = Tensor::from_values(std::move(dims), a.values());
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c]() mutable {
      if (!c.has_grad()) return;
      float* da = a.grad().data();
      const float* dc = c.grad().data();
      for (int64_t i = 0; i < a.numel(); ++i) da[i] += dc[i];
    });
  }
  return c;
}

inline Tensor slice_cols(Tape* tape, const Tensor& a, int c0, int c1) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expected rank 2, got " + shape_str(a.dims()));
  if (c0 < 0 || c1 > a.cols() || c0 >= c1) {
    throw IndexError("slice_cols: bad column range [" + std::to_string(c0) +
                     ", " + std::to_string(c1) + ") for " + shape_str(a.dims()));
  }
  const int m = a.rows(), n = a.cols(), w = c1 - c0;
  Tensor c = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i) {
    const float* src = a.data() + static_cast<size_t>(i) * n + c0;
    float* dst = c.data() + static_cast<size_t>(i) * w;
    for (int j = 0; j < w; ++j) dst[j] = src[j];
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, m, n, w, c0]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      for (int i = 0; i < m; ++i) {
        float* dst = da + static_cast<size_t>(i) * n + c0;
        const float* g = dc + static_cast<size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += g[j];
      }
    });
  }
  return c;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int m = parts[0].rows();
  int total = 0;
  bool needs = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch, " + shape_str(parts[0].dims()) +
                       " vs " + shape_str(p.dims()));
    }
    total += p.cols();
    needs = needs || p.requires_grad();
  }
  Tensor c = Tensor::zeros({m, total});
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i) {
      const float* src = p.data() + static_cast<size_t>(i) * w;
      float* dst = c.data() + static_cast<size_t>(i) * total + off;
      for (int j = 0; j < w; ++j) dst[j] = src[j];
    }
    off += w;
  }
  if (tape && needs) {
    c.set_requires_grad(true);
    tape->record([parts, c, m, total]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      int off = 0;
      for (Tensor& p : const_cast<std::vector<Tensor>&>(parts)) {
        const int w = p.cols();
        if (p.requires_grad()) {
          float* dp = p.grad().data();
          for (int i = 0; i < m; ++i) {
            const float* g = dc + static_cast<size_t>(i) * total + off;
            float* dst = dp + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += g[j];
          }
        }
        off += w;
      }
    });
  }
  return c;
}

// Inverted dropout: kept activations are rescaled by 1/(1-rate) so eval-time
// forwards need no correction. The mask is drawn from an explicit seed, so a
// given (seed, shape) pair always drops the same cells.
inline Tensor dropout(Tape* tape, const Tensor& a, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  const int64_t n = a.numel();
  std::vector<uint8_t> keep(static_cast<size_t>(n));
  Rng rng(seed);
  for (int64_t i = 0; i < n; ++i) keep[static_cast<size_t>(i)] = rng.uniform() >= rate ? 1 : 0;
  const float s = static_cast<float>(1.0 / (1.0 - rate));
  Tensor c = Tensor::zeros(a.dims());
  for (int64_t i = 0; i < n; ++i) {
    c.data()[i] = keep[static_cast<size_t>(i)] ? a.data()[i] * s : 0.0f;
  }
  if (detail::wants_grad(tape, {&a})) {
    c.set_requires_grad(true);
    tape->record([a, c, keep, s, n]() mutable {
      if (!c.has_grad()) return;
      const float* dc = c.grad().data();
      float* da = a.grad().data();
      for (int64_t i = 0; i < n; ++i) {
        if (keep[static_cast<size_t>(i)]) da[i] += dc[i] * s;
      }
    });
  }
  return c;
}

namespace detail {

inline void row_log_norms(const Tensor& logits, std::vector<double>& lse) {
  const int m = logits.rows(), v = logits.cols();
  lse.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const float* x = logits.data() + static_cast<size_t>(i) * v;
    double mx = x[0];
    for (int j = 1; j < v; ++j) mx = std::max<double>(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(x[j]) - mx);
    lse[static_cast<size_t>(i)] = mx + std::log(z);
  }
}

}  // namespace detail

// Mean negative log-likelihood over all rows.
inline Tensor cross_entropy(Tape* tape, const Tensor& logits,
                            const std::vector<int>& targets) {
  if (logits.rank() != 2 || static_cast<int>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(logits.dims()));
  }
  const int m = logits.rows(), v = logits.cols();
  for (int t : targets) {
    if (t < 0 || t >= v) throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range");
  }
  std::vector<double> lse;
  detail::row_log_norms(logits, lse);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    total += lse[static_cast<size_t>(i)] - logits.at(i, targets[static_cast<size_t>(i)]);
  }
  Tensor c = Tensor::scalar(total / m);
  if (detail::wants_grad(tape, {&logits})) {
    c.set_requires_grad(true);
    tape->record([logits, c, targets, lse, m, v]() mutable {
      if (!c.has_grad()) return;
      const double g = static_cast<double>(c.grad()[0]) / m;
      float* dl = logits.grad().data();
      for (int i = 0; i < m; ++i) {
        const float* x = logits.data() + static_cast<size_t>(i) * v;
        float* d = dl + static_cast<size_t>(i) * v;
        const double z = lse[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
          double p = std::exp(static_cast<double>(x[j]) - z);
          if (j == targets[static_cast<size_t>(i)]) p -= 1.0;
          d[j] += static_cast<float>(p * g);
        }
      }
    });
  }
  return c;
}

// Negative log-likelihood restricted to selected rows. Unselected rows are
// never touched in the backward pass, so their logits get an exact zero
// gradient. Reduction is the mean over selected rows unless sum is requested.
inline Tensor masked_cross_entropy(Tape* tape, const Tensor& logits,
                                   const std::vector<int>& targets,
                                   const std::vector<uint8_t>& selected,
                                   bool mean = true) {
  if (logits.rank() != 2 || static_cast<int>(targets.size()) != logits.rows() ||
      selected.size() != targets.size()) {
    throw ShapeError("masked_cross_entropy: row counts disagree for logits " +
                     shape_str(logits.dims()));
  }
  const int m = logits.rows(), v = logits.cols();
  int count = 0;
  for (uint8_t s : selected) count += s ? 1 : 0;
  if (count == 0) throw ContractError("masked_cross_entropy: no rows selected");
  std::vector<double> lse;
  detail::row_log_norms(logits, lse);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (!selected[static_cast<size_t>(i)]) continue;
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= v) throw IndexError("masked_cross_entropy: target " + std::to_string(t) + " out of range");
    total += lse[static_cast<size_t>(i)] - logits.at(i, t);
  }
  const double denom = mean ? count : 1;
  Tensor c = Tensor::scalar(total / denom);
  if (detail::wants_grad(tape, {&logits})) {
    c.set_requires_grad(true);
    tape->record([logits, c, targets, selected, lse, m, v, denom]() mutable {
      if (!c.has_grad()) return;
      const double g = static_cast<double>(c.grad()[0]) / denom;
      float* dl = logits.grad().data();
      for (int i = 0; i < m; ++i) {
        if (!selected[static_cast<size_t>(i)]) continue;
        const float* x = logits.data() + static_cast<size_t>(i) * v;
        float* d = dl + static_cast<size_t>(i) * v;
        const double z = lse[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
          double p = std::exp(static_cast<double>(x[j]) - z);
          if (j == targets[static_cast<size_t>(i)]) p -= 1.0;
          d[j] += static_cast<float>(p * g);
        }
      }
    });
  }
  return c;
}

// Cross-entropy of the student's softmax against a fixed target distribution,
// averaged over selected rows. The target side receives no gradient.
inline Tensor soft_cross_entropy(Tape* tape, const Tensor& logits,
                                 const Tensor& target_probs,
                                 const std::vector<uint8_t>& selected,
                                 bool mean = true) {
  if (logits.rank() != 2 || logits.dims() != target_probs.dims() ||
      selected.size() != static_cast<size_t>(logits.rows())) {
    throw ShapeError("soft_cross_entropy: shape mismatch, logits " +
                     shape_str(logits.dims()) + " vs targets " +
                     shape_str(target_probs.dims()));
  }
  if (target_probs.requires_grad()) {
    throw ContractError("soft_cross_entropy: target distribution must not require grad");
  }
  const int m = logits.rows(), v = logits.cols();
  int count = 0;
  for (uint8_t s : selected) count += s ? 1 : 0;
  if (count == 0) throw ContractError("soft_cross_entropy: no rows selected");
  std::vector<double> lse;
  detail::row_log_norms(logits, lse);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    if (!selected[static_cast<size_t>(i)]) continue;
    const float* x = logits.data() + static_cast<size_t>(i) * v;
    const float* q = target_probs.data() + static_cast<size_t>(i) * v;
    const double z = lse[static_cast<size_t>(i)];
    for (int j = 0; j < v; ++j) {
      total += static_cast<double>(q[j]) * (z - x[j]);
    }
  }
  const double denom = mean ? count : 1;
  Tensor c = Tensor::scalar(total / denom);
  if (detail::wants_grad(tape, {&logits})) {
    c.set_requires_grad(true);
    tape->record([logits, target_probs, c, selected, lse, m, v, denom]() mutable {
      if (!c.has_grad()) return;
      const double g = static_cast<double>(c.grad()[0]) / denom;
      float* dl = logits.grad().data();
      for (int i = 0; i < m; ++i) {
        if (!selected[static_cast<size_t>(i)]) continue;
        const float* x = logits.data() + static_cast<size_t>(i) * v;
        const float* q = target_probs.data() + static_cast<size_t>(i) * v;
        float* d = dl + static_cast<size_t>(i) * v;
        const double z = lse[static_cast<size_t>(i)];
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(static_cast<double>(x[j]) - z);
          d[j] += static_cast<float>((p - q[j]) * g);
        }
      }
    });
  }
  return c;
}

inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(tape, matmul(tape, x, w), b);
}

}  // namespace entmask
