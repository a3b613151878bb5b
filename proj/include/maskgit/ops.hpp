#pragma once

// The kernels a small transformer needs, each with a hand-written backward.
// No general broadcasting: every op states the shapes it accepts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "maskgit/errors.hpp"
#include "maskgit/random.hpp"
#include "maskgit/tape.hpp"
#include "maskgit/tensor.hpp"

namespace maskgit {

namespace kernel {

// C[m x n] += A[m x k] * B[k x n]. Accumulates over k in index order, so a
// zero-initialised C equals the naive triple loop bit for bit.
template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c,
             std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a matrix, got shape " +
                     shape_string(t.shape()));
  }
}

template <typename T>
Var matmul(GradTape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul inner extents disagree: " +
                     shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  kernel::gemm_nn<T>(av.data(), bv.data(), out.data(), m, k, n);
  return tape.push(
      "matmul", std::move(out), {a, b},
      [a, b, m, k, n](const GradTape<T>& tp, const Tensor<T>& g,
                      std::span<Tensor<T>* const> gin) {
        if (gin[0]) {
          kernel::gemm_nt<T>(g.data(), tp.value(b).data(), gin[0]->data(), m,
                             n, k);
        }
        if (gin[1]) {
          kernel::gemm_tn<T>(tp.value(a).data(), g.data(), gin[1]->data(), k,
                             m, n);
        }
      });
}

template <typename T>
Var add(GradTape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw ShapeError("add shape mismatch: " + shape_string(av.shape()) +
                     " vs " + shape_string(bv.shape()));
  }
  Tensor<T> out = av;
  auto o = out.data();
  auto bd = bv.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return tape.push("add", std::move(out), {a, b},
                   [](const GradTape<T>&, const Tensor<T>& g,
                      std::span<Tensor<T>* const> gin) {
                     for (Tensor<T>* acc : gin) {
                       if (!acc) continue;
                       auto d = acc->data();
                       auto gd = g.data();
                       for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
                     }
                   });
}

/// x[m x n] + bias[n], bias broadcast over rows.
template <typename T>
Var add_bias(GradTape<T>& tape, Var x, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& bv = tape.value(bias);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n) {
    throw ShapeError("add_bias: bias length " + std::to_string(bv.size()) +
                     " does not match " + std::to_string(n) + " columns");
  }
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < m; ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < n; ++c) row[c] += bv[c];
  }
  return tape.push("add_bias", std::move(out), {x, bias},
                   [m, n](const GradTape<T>&, const Tensor<T>& g,
                          std::span<Tensor<T>* const> gin) {
                     if (gin[0]) {
                       auto d = gin[0]->data();
                       auto gd = g.data();
                       for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
                     }
                     if (gin[1]) {
                       for (std::size_t r = 0; r < m; ++r) {
                         for (std::size_t c = 0; c < n; ++c) {
                           (*gin[1])[c] += g(r, c);
                         }
                       }
                     }
                   });
}

template <typename T>
Var mul(GradTape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (av.shape() != bv.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_string(av.shape()) +
                     " vs " + shape_string(bv.shape()));
  }
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.push("mul", std::move(out), {a, b},
                   [a, b](const GradTape<T>& tp, const Tensor<T>& g,
                          std::span<Tensor<T>* const> gin) {
                     const Tensor<T>& av = tp.value(a);
                     const Tensor<T>& bv = tp.value(b);
                     if (gin[0]) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         (*gin[0])[i] += g[i] * bv[i];
                       }
                     }
                     if (gin[1]) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         (*gin[1])[i] += g[i] * av[i];
                       }
                     }
                   });
}

template <typename T>
Var scale(GradTape<T>& tape, Var x, T factor) {
  Tensor<T> out = tape.value(x);
  for (T& v : out.data()) v *= factor;
  return tape.push("scale", std::move(out), {x},
                   [factor](const GradTape<T>&, const Tensor<T>& g,
                            std::span<Tensor<T>* const> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       (*gin[0])[i] += g[i] * factor;
                     }
                   });
}

template <typename T>
Var sum(GradTape<T>& tape, Var x) {
  T s{0};
  for (T v : tape.value(x).data()) s += v;
  return tape.push("sum", Tensor<T>::scalar(s), {x},
                   [](const GradTape<T>&, const Tensor<T>& g,
                      std::span<Tensor<T>* const> gin) {
                     const T gv = g[0];
                     for (T& d : gin[0]->data()) d += gv;
                   });
}

/// Softmax along `axis` of a matrix (axis 1 = within rows) or a vector.
/// Stabilised by subtracting the max along the axis.
template <typename T>
Var softmax(GradTape<T>& tape, Var x, int axis = -1) {
  const Tensor<T>& xv = tape.value(x);
  const int rank = static_cast<int>(xv.rank());
  if (axis < 0) axis += rank;
  if (rank < 1 || rank > 2 || axis < 0 || axis >= rank) {
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  // Walk lanes: along columns (axis 0 of a matrix) or along rows otherwise.
  const bool along_rows = !(rank == 2 && axis == 0);
  const std::size_t lanes = along_rows ? rows : cols;
  const std::size_t len = along_rows ? cols : rows;
  const std::size_t stride = along_rows ? 1 : cols;
  auto index = [=](std::size_t lane, std::size_t j) {
    return along_rows ? lane * cols + j * stride : j * cols + lane;
  };
  Tensor<T> out(xv.shape());
  for (std::size_t l = 0; l < lanes; ++l) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[index(l, j)]);
    T s{0};
    for (std::size_t j = 0; j < len; ++j) {
      const T e = std::exp(xv[index(l, j)] - mx);
      out[index(l, j)] = e;
      s += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[index(l, j)] /= s;
  }
  const Var y{tape.size()};
  return tape.push("softmax", std::move(out), {x},
                   [y, lanes, len, index](const GradTape<T>& tp,
                                          const Tensor<T>& g,
                                          std::span<Tensor<T>* const> gin) {
                     const Tensor<T>& yv = tp.value(y);
                     for (std::size_t l = 0; l < lanes; ++l) {
                       T dot{0};
                       for (std::size_t j = 0; j < len; ++j) {
                         dot += g[index(l, j)] * yv[index(l, j)];
                       }
                       for (std::size_t j = 0; j < len; ++j) {
                         const std::size_t i = index(l, j);
                         (*gin[0])[i] += yv[i] * (g[i] - dot);
                       }
                     }
                   });
}

/// Row-wise layer normalisation with learned gain and bias.
template <typename T>
Var layernorm(GradTape<T>& tape, Var x, Var gamma, Var beta,
              T eps = static_cast<T>(1e-5)) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) {
    throw ShapeError("layernorm: gain/bias length must equal " +
                     std::to_string(n));
  }
  Tensor<T> out(xv.shape());
  std::vector<T> xhat(m * n);
  std::vector<T> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    auto row = xv.row(r);
    T mean{0};
    for (T v : row) mean += v;
    mean /= static_cast<T>(n);
    T var{0};
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (row[c] - mean) * rs;
      xhat[r * n + c] = h;
      out(r, c) = h * gv[c] + bv[c];
    }
  }
  if (!tape.recording()) {
    xhat.clear();
    rstd.clear();
  }
  return tape.push(
      "layernorm", std::move(out), {x, gamma, beta},
      [gamma, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](
          const GradTape<T>& tp, const Tensor<T>& g,
          std::span<Tensor<T>* const> gin) {
        const Tensor<T>& gv = tp.value(gamma);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          T mean_d{0}, mean_dx{0};
          for (std::size_t c = 0; c < n; ++c) {
            const T gd = g(r, c);
            const T h = xhat[r * n + c];
            dxhat[c] = gd * gv[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * h;
            if (gin[1]) (*gin[1])[c] += gd * h;
            if (gin[2]) (*gin[2])[c] += gd;
          }
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          if (gin[0]) {
            for (std::size_t c = 0; c < n; ++c) {
              (*gin[0])(r, c) +=
                  rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
            }
          }
        }
      });
}

/// GELU, tanh approximation.
template <typename T>
Var gelu(GradTape<T>& tape, Var x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  Tensor<T> out = tape.value(x);
  for (T& v : out.data()) {
    const T u = kC * (v + kA * v * v * v);
    v = T{0.5} * v * (T{1} + std::tanh(u));
  }
  return tape.push("gelu", std::move(out), {x},
                   [x](const GradTape<T>& tp, const Tensor<T>& g,
                       std::span<Tensor<T>* const> gin) {
                     const Tensor<T>& xv = tp.value(x);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const T v = xv[i];
                       const T u = kC * (v + kA * v * v * v);
                       const T th = std::tanh(u);
                       const T du = kC * (T{1} + T{3} * kA * v * v);
                       const T d = T{0.5} * (T{1} + th) +
                                   T{0.5} * v * (T{1} - th * th) * du;
                       (*gin[0])[i] += g[i] * d;
                     }
                   });
}

/// Rows of `table` selected by `ids` (embedding lookup).
template <typename T>
Var gather_rows(GradTape<T>& tape, Var table, std::span<const std::int32_t> ids) {
  const Tensor<T>& tv = tape.value(table);
  require_matrix(tv, "gather_rows");
  const std::size_t d = tv.cols();
  if (ids.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(ids[r]) +
                       " out of range for " + std::to_string(tv.rows()) +
                       " rows");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<std::int32_t> saved;
  if (tape.recording()) saved.assign(ids.begin(), ids.end());
  return tape.push("gather_rows", std::move(out), {table},
                   [d, saved = std::move(saved)](
                       const GradTape<T>&, const Tensor<T>& g,
                       std::span<Tensor<T>* const> gin) {
                     for (std::size_t r = 0; r < saved.size(); ++r) {
                       auto dst = gin[0]->row(static_cast<std::size_t>(saved[r]));
                       auto src = g.row(r);
                       for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                     }
                   });
}

/// Inverted dropout with a counter-based mask; identity when rate is 0.
template <typename T>
Var dropout(GradTape<T>& tape, Var x, double rate, const CounterRng& key) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw InvalidArgument("dropout rate must be below 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> out = tape.value(x);
  std::vector<T> factors(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    factors[i] = key.uniform(i) >= rate ? keep_scale : T{0};
    out[i] *= factors[i];
  }
  return tape.push("dropout", std::move(out), {x},
                   [factors = std::move(factors)](
                       const GradTape<T>&, const Tensor<T>& g,
                       std::span<Tensor<T>* const> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       (*gin[0])[i] += g[i] * factors[i];
                     }
                   });
}

/// Full (bidirectional) multi-head scaled dot-product attention.
/// q, k, v: [batch*seq x dim]; heads split the columns.
template <typename T>
Var attention(GradTape<T>& tape, Var q, Var k, Var v, std::size_t batch,
              std::size_t seq, std::size_t heads) {
  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(k);
  const Tensor<T>& vv = tape.value(v);
  const std::size_t dim = qv.cols();
  if (qv.shape() != kv.shape() || qv.shape() != vv.shape() ||
      qv.rows() != batch * seq || heads == 0 || dim % heads != 0) {
    throw ShapeError("attention: inconsistent q/k/v shapes or head count");
  }
  const std::size_t hd = dim / heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(hd));
  const bool keep = tape.recording();
  std::vector<T> probs(keep ? batch * heads * seq * seq : 0);
  std::vector<T> row(seq);
  Tensor<T> out({batch * seq, dim});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * hd;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = &qv(b * seq + i, col);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = &kv(b * seq + j, col);
          T s{0};
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        T total{0};
        for (std::size_t j = 0; j < seq; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        T* oi = &out(b * seq + i, col);
        for (std::size_t j = 0; j < seq; ++j) {
          const T p = row[j] / total;
          if (keep) probs[((b * heads + h) * seq + i) * seq + j] = p;
          const T* vj = &vv(b * seq + j, col);
          for (std::size_t c = 0; c < hd; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  return tape.push(
      "attention", std::move(out), {q, k, v},
      [q, k, v, batch, seq, heads, hd, sc, probs = std::move(probs)](
          const GradTape<T>& tp, const Tensor<T>& g,
          std::span<Tensor<T>* const> gin) {
        const Tensor<T>& qv = tp.value(q);
        const Tensor<T>& kv = tp.value(k);
        const Tensor<T>& vv = tp.value(v);
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * hd;
            for (std::size_t i = 0; i < seq; ++i) {
              const T* p = &probs[((b * heads + h) * seq + i) * seq];
              const T* gi = &g(b * seq + i, col);
              T dot{0};
              for (std::size_t j = 0; j < seq; ++j) {
                const T* vj = &vv(b * seq + j, col);
                T s{0};
                for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                dot += s * p[j];
                if (gin[2]) {
                  T* dvj = &(*gin[2])(b * seq + j, col);
                  for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * gi[c];
                }
              }
              const T* qi = &qv(b * seq + i, col);
              for (std::size_t j = 0; j < seq; ++j) {
                const T ds = p[j] * (dp[j] - dot) * sc;
                const T* kj = &kv(b * seq + j, col);
                if (gin[0]) {
                  T* dqi = &(*gin[0])(b * seq + i, col);
                  for (std::size_t c = 0; c < hd; ++c) dqi[c] += ds * kj[c];
                }
                if (gin[1]) {
                  T* dkj = &(*gin[1])(b * seq + j, col);
                  for (std::size_t c = 0; c < hd; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

/// Weighted sum of label-smoothed cross-entropies over selected rows.
/// Rows with weight 0 are never read, so their logits cannot influence the
/// result. Smoothed target: (1 - s) * onehot + s / K.
template <typename T>
Var weighted_cross_entropy(GradTape<T>& tape, Var logits,
                           std::span<const std::int32_t> targets,
                           std::span<const T> weights, double smoothing) {
  const Tensor<T>& lv = tape.value(logits);
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.rows(), kk = lv.cols();
  if (targets.size() != rows || weights.size() != rows) {
    throw ShapeError("cross_entropy: targets/weights must have one entry per row");
  }
  const T s = static_cast<T>(smoothing);
  const T off = s / static_cast<T>(kk);
  const T on = T{1} - s + off;
  std::vector<std::size_t> active;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == T{0}) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= kk) {
      throw ShapeError("cross_entropy: target out of range");
    }
    active.push_back(r);
  }
  std::vector<T> probs(active.size() * kk);
  T loss{0};
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t r = active[a];
    auto row = lv.row(r);
    T mx = *std::max_element(row.begin(), row.end());
    T total{0};
    for (std::size_t c = 0; c < kk; ++c) total += std::exp(row[c] - mx);
    const T lse = mx + std::log(total);
    T ce{0};
    for (std::size_t c = 0; c < kk; ++c) {
      const T logp = row[c] - lse;
      probs[a * kk + c] = std::exp(logp);
      const T q = static_cast<std::size_t>(targets[r]) == c ? on : off;
      if (q != T{0}) ce -= q * logp;
    }
    loss += weights[r] * ce;
  }
  std::vector<std::int32_t> tgt;
  std::vector<T> w;
  if (tape.recording()) {
    tgt.assign(targets.begin(), targets.end());
    w.assign(weights.begin(), weights.end());
  }
  return tape.push(
      "cross_entropy", Tensor<T>::scalar(loss), {logits},
      [kk, on, off, active = std::move(active), probs = std::move(probs),
       tgt = std::move(tgt), w = std::move(w)](
          const GradTape<T>&, const Tensor<T>& g,
          std::span<Tensor<T>* const> gin) {
        const T gv = g[0];
        for (std::size_t a = 0; a < active.size(); ++a) {
          const std::size_t r = active[a];
          auto dst = gin[0]->row(r);
          for (std::size_t c = 0; c < kk; ++c) {
            const T q = static_cast<std::size_t>(tgt[r]) == c ? on : off;
            dst[c] += gv * w[r] * (probs[a * kk + c] - q);
          }
        }
      });
}

}  // namespace maskgit
