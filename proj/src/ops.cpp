#include "usm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace usm::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

CMapMat cmap(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapMat(v.data(), idx(r), idx(c));
}
MapMat map(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), idx(r), idx(c));
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

// Parent i's impl, with grad allocated, or nullptr if it takes no gradient.
TensorImpl* grad_target(TensorImpl& self, std::size_t i) {
  TensorImpl* p = self.parents[i].impl();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx_given_x_y) {
  const auto& x = a.impl()->values;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [dfdx_given_x_y](TensorImpl& self) {
    TensorImpl* pa = grad_target(self, 0);
    if (!pa) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * dfdx_given_x_y(pa->values[i], self.values[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n);
  map(out, m, n).noalias() = cmap(a.impl()->values, m, k) * cmap(b.impl()->values, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
    auto g = cmap(self.grad, m, n);
    if (TensorImpl* pa = grad_target(self, 0))
      map(pa->grad, m, k).noalias() += g * cmap(self.parents[1].impl()->values, k, n).transpose();
    if (TensorImpl* pb = grad_target(self, 1))
      map(pb->grad, k, n).noalias() += cmap(self.parents[0].impl()->values, m, k).transpose() * g;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  map(out, m, n).noalias() =
      cmap(a.impl()->values, m, k) * cmap(b.impl()->values, n, k).transpose();
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& self) {
    auto g = cmap(self.grad, m, n);
    if (TensorImpl* pa = grad_target(self, 0))
      map(pa->grad, m, k).noalias() += g * cmap(self.parents[1].impl()->values, n, k);
    if (TensorImpl* pb = grad_target(self, 1))
      map(pb->grad, n, k).noalias() += g.transpose() * cmap(self.parents[0].impl()->values, m, k);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> out(a.impl()->values);
  const auto& bv = b.impl()->values;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (TensorImpl* t = grad_target(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> out(a.impl()->values);
  const auto& bv = b.impl()->values;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i];
    if (TensorImpl* t = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> out(a.impl()->values);
  const auto& bv = b.impl()->values;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& self) {
    const auto& av = self.parents[0].impl()->values;
    const auto& bv = self.parents[1].impl()->values;
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i] * bv[i];
    if (TensorImpl* t = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i] * av[i];
  });
}

Tensor add_rowwise(const Tensor& a, const Tensor& row) {
  require_matrix("add_rowwise", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (row.numel() != n || row.rank() != 1)
    throw ShapeError("add_rowwise: shape mismatch " + shape_str(a.shape()) + " + " +
                     shape_str(row.shape()));
  std::vector<double> out(a.impl()->values);
  const auto& rv = row.impl()->values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return make_result(a.shape(), std::move(out), {a, row}, [m, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i];
    if (TensorImpl* t = grad_target(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t->grad[j] += self.grad[i * n + j];
  });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& row) {
  require_matrix("mul_rowwise", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (row.numel() != n || row.rank() != 1)
    throw ShapeError("mul_rowwise: shape mismatch " + shape_str(a.shape()) + " * " +
                     shape_str(row.shape()));
  std::vector<double> out(a.impl()->values);
  const auto& rv = row.impl()->values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= rv[j];
  return make_result(a.shape(), std::move(out), {a, row}, [m, n](TensorImpl& self) {
    const auto& av = self.parents[0].impl()->values;
    const auto& rv = self.parents[1].impl()->values;
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t->grad[i * n + j] += self.grad[i * n + j] * rv[j];
    if (TensorImpl* t = grad_target(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t->grad[j] += self.grad[i * n + j] * av[i * n + j];
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({1}, {s}, {a}, [](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (auto& g : t->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor masked_sum(const Tensor& a, const std::vector<unsigned char>& mask) {
  if (mask.size() != a.numel())
    throw ShapeError("masked_sum: mask of " + std::to_string(mask.size()) +
                     " entries for " + shape_str(a.shape()));
  double s = 0.0;
  const auto& av = a.impl()->values;
  for (std::size_t i = 0; i < av.size(); ++i)
    if (mask[i]) s += av[i];
  return make_result({1}, {s}, {a}, [mask](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) t->grad[i] += self.grad[0];
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor swish(const Tensor& a) {
  return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); },
               [](double x, double) {
                 double s = 1.0 / (1.0 + std::exp(-x));
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix("softmax_rows", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = a.impl()->values;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = &x[i * n];
    double* yi = &y[i * n];
    double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  return make_result(a.shape(), std::move(y), {a}, [m, n](TensorImpl& self) {
    TensorImpl* t = grad_target(self, 0);
    if (!t) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = &self.values[i * n];
      const double* gi = &self.grad[i * n];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
      for (std::size_t j = 0; j < n; ++j) t->grad[i * n + j] += yi[j] * (gi[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_matrix("log_softmax_rows", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = a.impl()->values;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = &x[i * n];
    double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = xi[j] - lse;
  }
  return make_result(a.shape(), std::move(y), {a}, [m, n](TensorImpl& self) {
    TensorImpl* t = grad_target(self, 0);
    if (!t) return;
    for (std::size_t i = 0; i < m; ++i) {
      const double* yi = &self.values[i * n];
      const double* gi = &self.grad[i * n];
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += gi[j];
      for (std::size_t j = 0; j < n; ++j) t->grad[i * n + j] += gi[j] - std::exp(yi[j]) * gs;
    }
  });
}

Tensor logsumexp(const Tensor& a) {
  const auto& x = a.impl()->values;
  double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  double lse = mx + std::log(z);
  return make_result({1}, {lse}, {a}, [](TensorImpl& self) {
    TensorImpl* t = grad_target(self, 0);
    if (!t) return;
    double lse = self.values[0];
    for (std::size_t i = 0; i < t->values.size(); ++i)
      t->grad[i] += self.grad[0] * std::exp(t->values[i] - lse);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_matrix("layer_norm", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n)
    throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + " beta " + shape_str(beta.shape()));
  const auto& xv = x.impl()->values;
  const auto& gv = gamma.impl()->values;
  const auto& bv = beta.impl()->values;
  std::vector<double> y(xv.size());
  // Saved normalized activations and inverse std per row.
  std::vector<double> xhat(xv.size()), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = &xv[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mu) * inv_std[i];
      y[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
    const auto& gv = self.parents[1].impl()->values;
    if (TensorImpl* tg = grad_target(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) tg->grad[j] += self.grad[i * n + j] * xhat[i * n + j];
    if (TensorImpl* tb = grad_target(self, 2))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) tb->grad[j] += self.grad[i * n + j];
    if (TensorImpl* tx = grad_target(self, 0)) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double dxh = self.grad[i * n + j] * gv[j];
          s1 += dxh;
          s2 += dxh * xhat[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          double dxh = self.grad[i * n + j] * gv[j];
          tx->grad[i * n + j] += inv_std[i] * (dxh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
        }
      }
    }
  });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix("depthwise_conv1d", x);
  require_matrix("depthwise_conv1d", weight);
  const std::size_t T = x.dim(0), d = x.dim(1), k = weight.dim(0);
  if (weight.dim(1) != d || bias.numel() != d || k % 2 == 0)
    throw ShapeError("depthwise_conv1d: shape mismatch x " + shape_str(x.shape()) +
                     " weight " + shape_str(weight.shape()) + " bias " +
                     shape_str(bias.shape()) + " (kernel must be odd)");
  const long half = static_cast<long>(k / 2);
  const auto& xv = x.impl()->values;
  const auto& wv = weight.impl()->values;
  const auto& bv = bias.impl()->values;
  std::vector<double> y(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    double* yt = &y[t * d];
    for (std::size_t c = 0; c < d; ++c) yt[c] = bv[c];
    for (std::size_t tap = 0; tap < k; ++tap) {
      long src = static_cast<long>(t) + static_cast<long>(tap) - half;
      if (src < 0 || src >= static_cast<long>(T)) continue;
      const double* xs = &xv[static_cast<std::size_t>(src) * d];
      const double* wt = &wv[tap * d];
      for (std::size_t c = 0; c < d; ++c) yt[c] += wt[c] * xs[c];
    }
  }
  return make_result({T, d}, std::move(y), {x, weight, bias}, [T, d, k, half](TensorImpl& self) {
    const auto& xv = self.parents[0].impl()->values;
    const auto& wv = self.parents[1].impl()->values;
    TensorImpl* tx = grad_target(self, 0);
    TensorImpl* tw = grad_target(self, 1);
    TensorImpl* tb = grad_target(self, 2);
    for (std::size_t t = 0; t < T; ++t) {
      const double* gt = &self.grad[t * d];
      if (tb)
        for (std::size_t c = 0; c < d; ++c) tb->grad[c] += gt[c];
      for (std::size_t tap = 0; tap < k; ++tap) {
        long src = static_cast<long>(t) + static_cast<long>(tap) - half;
        if (src < 0 || src >= static_cast<long>(T)) continue;
        std::size_t s = static_cast<std::size_t>(src);
        if (tw)
          for (std::size_t c = 0; c < d; ++c) tw->grad[tap * d + c] += gt[c] * xv[s * d + c];
        if (tx)
          for (std::size_t c = 0; c < d; ++c) tx->grad[s * d + c] += gt[c] * wv[tap * d + c];
      }
    }
  });
}

Tensor pick(const Tensor& a, const std::vector<std::size_t>& index) {
  require_matrix("pick", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (index.size() != m)
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " +
                     shape_str(a.shape()));
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw ShapeError("pick: index out of range for " + shape_str(a.shape()));
    out[i] = a.impl()->values[i * n + index[i]];
  }
  return make_result({m}, std::move(out), {a}, [index, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < index.size(); ++i) t->grad[i * n + index[i]] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  require_matrix("gather_rows", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (rows.empty()) throw ShapeError("gather_rows: empty row selection");
  std::vector<double> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m)
      throw ShapeError("gather_rows: row " + std::to_string(rows[r]) + " out of range for " +
                       shape_str(a.shape()));
    std::copy_n(&a.impl()->values[rows[r] * n], n, &out[r * n]);
  }
  return make_result({rows.size(), n}, std::move(out), {a}, [rows, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) t->grad[rows[r] * n + j] += self.grad[r * n + j];
  });
}

Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids) {
  return gather_rows(table, ids);
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix("slice_rows", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || begin + count > m)
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(a.shape()));
  std::vector<double> out(a.impl()->values.begin() + static_cast<long>(begin * n),
                          a.impl()->values.begin() + static_cast<long>((begin + count) * n));
  return make_result({count, n}, std::move(out), {a}, [begin, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix("slice_cols", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (count == 0 || begin + count > n)
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(a.shape()));
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(&a.impl()->values[i * n + begin], count, &out[i * count]);
  return make_result({m, count}, std::move(out), {a}, [m, n, begin, count](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j)
          t->grad[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p);
    if (p.dim(1) != n)
      throw ShapeError("concat_rows: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result({rows, n}, std::move(out), parts, [](TensorImpl& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      std::size_t len = self.parents[p].numel();
      if (TensorImpl* t = grad_target(self, p))
        for (std::size_t i = 0; i < len; ++i) t->grad[i] += self.grad[offset + i];
      offset += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p);
    if (p.dim(0) != m)
      throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    cols += p.dim(1);
  }
  std::vector<double> out(m * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&p.impl()->values[i * w], w, &out[i * cols + offset]);
    offset += w;
  }
  return make_result({m, cols}, std::move(out), parts, [m, cols](TensorImpl& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t w = self.parents[p].dim(1);
      if (TensorImpl* t = grad_target(self, p))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) t->grad[i * w + j] += self.grad[i * cols + offset + j];
      offset += w;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result(std::move(shape), a.impl()->values, {a}, [](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) t->grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  map(out, n, m) = cmap(a.impl()->values, m, n).transpose();
  return make_result({n, m}, std::move(out), {a}, [m, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      map(t->grad, m, n) += cmap(self.grad, n, m).transpose();
  });
}

Tensor repeat_rows(const Tensor& a, std::size_t factor) {
  require_matrix("repeat_rows", a);
  if (factor == 0) throw ShapeError("repeat_rows: factor must be >= 1");
  std::vector<std::size_t> rows;
  rows.reserve(a.dim(0) * factor);
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t r = 0; r < factor; ++r) rows.push_back(i);
  return gather_rows(a, rows);
}

Tensor interpolate_rows(const Tensor& a, std::size_t out_rows) {
  require_matrix("interpolate_rows", a);
  const std::size_t in_rows = a.dim(0);
  if (out_rows == 0) throw ShapeError("interpolate_rows: zero output rows");
  std::vector<double> w(out_rows * in_rows, 0.0);
  for (std::size_t i = 0; i < out_rows; ++i) {
    double pos = out_rows == 1 || in_rows == 1
                     ? 0.0
                     : static_cast<double>(i) * static_cast<double>(in_rows - 1) /
                           static_cast<double>(out_rows - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= in_rows - 1) {
      w[i * in_rows + in_rows - 1] = 1.0;
      continue;
    }
    double frac = pos - static_cast<double>(lo);
    w[i * in_rows + lo] += 1.0 - frac;
    w[i * in_rows + lo + 1] += frac;
  }
  return matmul(Tensor::from({out_rows, in_rows}, std::move(w)), a);
}

Tensor replace_rows(const Tensor& a, const std::vector<unsigned char>& mask, const Tensor& noise) {
  require_matrix("replace_rows", a);
  require_same("replace_rows", a, noise);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (mask.size() != m)
    throw ShapeError("replace_rows: mask of " + std::to_string(mask.size()) + " rows for " +
                     shape_str(a.shape()));
  std::vector<double> out(a.impl()->values);
  for (std::size_t i = 0; i < m; ++i)
    if (mask[i]) std::copy_n(&noise.impl()->values[i * n], n, &out[i * n]);
  return make_result(a.shape(), std::move(out), {a}, [mask, n](TensorImpl& self) {
    if (TensorImpl* t = grad_target(self, 0))
      for (std::size_t i = 0; i < mask.size(); ++i)
        if (!mask[i])
          for (std::size_t j = 0; j < n; ++j) t->grad[i * n + j] += self.grad[i * n + j];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

Tensor banded_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const Tensor& rel_bias, std::size_t heads, std::size_t cap,
                        const std::vector<std::size_t>& lo, const std::vector<std::size_t>& hi) {
  require_matrix("banded_attention", q);
  require_same("banded_attention", q, k);
  require_same("banded_attention", q, v);
  const std::size_t T = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("banded_attention: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  const bool has_bias = rel_bias.defined();
  if (has_bias && (rel_bias.rank() != 2 || rel_bias.dim(0) != heads || rel_bias.dim(1) != 2 * cap + 1))
    throw ShapeError("banded_attention: relative bias " + shape_str(rel_bias.shape()) +
                     " does not match heads=" + std::to_string(heads) +
                     " cap=" + std::to_string(cap));
  if (lo.size() != T || hi.size() != T) throw ShapeError("banded_attention: range size mismatch");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // Probabilities stored per (row, head) over the row's key range.
  std::vector<std::size_t> offset(T + 1, 0);
  for (std::size_t i = 0; i < T; ++i) {
    if (lo[i] > hi[i] || hi[i] >= T) throw ShapeError("banded_attention: bad key range");
    offset[i + 1] = offset[i] + (hi[i] - lo[i] + 1) * heads;
  }
  const auto& qv = q.impl()->values;
  const auto& kv = k.impl()->values;
  const auto& vv = v.impl()->values;
  const double* bias = has_bias ? rel_bias.impl()->values.data() : nullptr;
  const long lcap = static_cast<long>(cap);
  auto bias_index = [lcap](std::size_t i, std::size_t j) {
    long rel = static_cast<long>(j) - static_cast<long>(i);
    rel = std::clamp(rel, -lcap, lcap);
    return static_cast<std::size_t>(rel + lcap);
  };
  std::vector<double> probs(offset[T]);
  std::vector<double> out(T * d, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    const std::size_t len = hi[i] - lo[i] + 1;
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = &probs[offset[i] + h * len];
      const double* qi = &qv[i * d + h * dh];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t jj = 0; jj < len; ++jj) {
        const std::size_t j = lo[i] + jj;
        const double* kj = &kv[j * d + h * dh];
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        s *= sc;
        if (bias) s += bias[h * (2 * cap + 1) + bias_index(i, j)];
        p[jj] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (std::size_t jj = 0; jj < len; ++jj) z += (p[jj] = std::exp(p[jj] - mx));
      double* oi = &out[i * d + h * dh];
      for (std::size_t jj = 0; jj < len; ++jj) {
        p[jj] /= z;
        const double* vj = &vv[(lo[i] + jj) * d + h * dh];
        for (std::size_t c = 0; c < dh; ++c) oi[c] += p[jj] * vj[c];
      }
    }
  }
  std::vector<Tensor> inputs{q, k, v};
  if (has_bias) inputs.push_back(rel_bias);
  return make_result(
      {T, d}, std::move(out), std::move(inputs),
      [T, d, heads, dh, sc, cap, has_bias, lo, hi, offset, probs = std::move(probs),
       bias_index](TensorImpl& self) {
        const auto& qv = self.parents[0].impl()->values;
        const auto& kv = self.parents[1].impl()->values;
        const auto& vv = self.parents[2].impl()->values;
        TensorImpl* tq = grad_target(self, 0);
        TensorImpl* tk = grad_target(self, 1);
        TensorImpl* tv = grad_target(self, 2);
        TensorImpl* tb = has_bias ? grad_target(self, 3) : nullptr;
        std::vector<double> ds;
        for (std::size_t i = 0; i < T; ++i) {
          const std::size_t len = hi[i] - lo[i] + 1;
          ds.resize(len);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = &probs[offset[i] + h * len];
            const double* gi = &self.grad[i * d + h * dh];
            double dot = 0.0;
            for (std::size_t jj = 0; jj < len; ++jj) {
              const std::size_t j = lo[i] + jj;
              const double* vj = &vv[j * d + h * dh];
              double dp = 0.0;
              for (std::size_t c = 0; c < dh; ++c) dp += gi[c] * vj[c];
              ds[jj] = dp;
              dot += p[jj] * dp;
              if (tv)
                for (std::size_t c = 0; c < dh; ++c) tv->grad[j * d + h * dh + c] += p[jj] * gi[c];
            }
            for (std::size_t jj = 0; jj < len; ++jj) {
              const std::size_t j = lo[i] + jj;
              const double g = p[jj] * (ds[jj] - dot);
              if (tb) tb->grad[h * (2 * cap + 1) + bias_index(i, j)] += g;
              const double gs = g * sc;
              if (tq)
                for (std::size_t c = 0; c < dh; ++c)
                  tq->grad[i * d + h * dh + c] += gs * kv[j * d + h * dh + c];
              if (tk)
                for (std::size_t c = 0; c < dh; ++c)
                  tk->grad[j * d + h * dh + c] += gs * qv[i * d + h * dh + c];
            }
          }
        }
      });
}

Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& rel_bias, std::size_t heads, std::size_t cap,
                              const std::vector<unsigned char>& mask) {
  const std::size_t T = q.dim(0), d = q.dim(1);
  const std::size_t dh = d / heads;
  if (mask.size() != T * T) throw ShapeError("dense_masked_attention: mask is not [T,T]");
  // Masked logits get a large negative offset; exp underflows to exactly 0.
  std::vector<double> neg(T * T, 0.0);
  for (std::size_t i = 0; i < T * T; ++i)
    if (!mask[i]) neg[i] = -1e300;
  Tensor offset = Tensor::from({T, T}, std::move(neg));
  std::vector<std::size_t> rel_index(T * T);
  const long lcap = static_cast<long>(cap);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) {
      long rel = std::clamp(static_cast<long>(j) - static_cast<long>(i), -lcap, lcap);
      rel_index[i * T + j] = static_cast<std::size_t>(rel + lcap);
    }
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (rel_bias.defined()) {
      Tensor table = reshape(slice_rows(rel_bias, h, 1), {2 * cap + 1, 1});
      scores = add(scores, reshape(gather_rows(table, rel_index), {T, T}));
    }
    outs.push_back(matmul(softmax_rows(add(scores, offset)), vh));
  }
  return concat_cols(outs);
}

}  // namespace usm::ops
