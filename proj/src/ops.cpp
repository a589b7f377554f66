#include "alignlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "alignlab/errors.hpp"

namespace alignlab {

namespace {

Tape* tracking_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::current();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

// c[m x n] += a[m x k] . b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] . b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T . b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
  return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  }
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  check_finite(out, "matmul");
  if (auto* tape = tracking_tape({&a, &b})) {
    tape->record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), g, b.mutable_grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = weight.rows();
  if (weight.cols() != k) {
    throw DimensionError("linear input has " + std::to_string(k) + " columns but weight is " +
                         shape_to_string(weight.shape()));
  }
  if (bias.defined() && bias.numel() != n) {
    throw DimensionError("linear bias " + shape_to_string(bias.shape()) + " does not match " + std::to_string(n) +
                         " outputs");
  }
  Tensor out = Tensor::zeros({m, n});
  auto o = out.mutable_data();
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), o.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  gemm_nt(x.data().data(), weight.data().data(), o.data(), m, k, n);
  check_finite(out, "linear");
  if (auto* tape = tracking_tape({&x, &weight, &bias})) {
    tape->record({x, weight, bias}, out, [x, weight, bias, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (x.requires_grad()) gemm_nn(g, weight.data().data(), x.mutable_grad().data(), m, n, k);
      if (weight.requires_grad()) gemm_tn(g, x.data().data(), weight.mutable_grad().data(), m, n, k);
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.clone();
  out.set_requires_grad(false);
  auto o = out.mutable_data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  check_finite(out, "add");
  if (auto* tape = tracking_tape({&a, &b})) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.clone();
  out.set_requires_grad(false);
  auto o = out.mutable_data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  check_finite(out, "sub");
  if (auto* tape = tracking_tape({&a, &b})) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.clone();
  out.set_requires_grad(false);
  auto o = out.mutable_data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  check_finite(out, "mul");
  if (auto* tape = tracking_tape({&a, &b})) {
    tape->record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto ad = a.data();
      auto bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = a.clone();
  out.set_requires_grad(false);
  for (auto& v : out.mutable_data()) v *= factor;
  check_finite(out, "scale");
  if (auto* tape = tracking_tape({&a})) {
    tape->record({a}, out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (row.numel() != n) {
    throw DimensionError("add_row: row " + shape_to_string(row.shape()) + " vs matrix " + shape_to_string(x.shape()));
  }
  Tensor out = x.clone();
  out.set_requires_grad(false);
  auto o = out.mutable_data();
  auto r = row.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += r[j];
  }
  check_finite(out, "add_row");
  if (auto* tape = tracking_tape({&x, &row})) {
    tape->record({x, row}, out, [x, row, out, m, n]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (row.requires_grad()) {
        auto gr = row.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  check_finite(out, "sum");
  if (auto* tape = tracking_tape({&a})) {
    tape->record({a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  check_finite(x, "softmax_rows input");
  Tensor out = Tensor::zeros({m, n});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double* orow = o.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
  }
  check_finite(out, "softmax_rows");
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto p = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += p[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm parameters do not match width " + std::to_string(n));
  }
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      o[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  check_finite(out, "layer_norm");
  if (auto* tape = tracking_tape({&x, &gain, &bias})) {
    tape->record({x, gain, bias}, out,
                 [x, gain, bias, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                   auto g = out.grad();
                   auto gd = gain.data();
                   if (gain.requires_grad()) {
                     auto gg = gain.mutable_grad();
                     for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += g[i] * xhat[i];
                   }
                   if (bias.requires_grad()) {
                     auto gb = bias.mutable_grad();
                     for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += g[i];
                   }
                   if (x.requires_grad()) {
                     auto gx = x.mutable_grad();
                     std::vector<double> dxhat(n);
                     for (std::size_t i = 0; i < m; ++i) {
                       double mean_d = 0.0, mean_dx = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         dxhat[j] = g[i * n + j] * gd[j];
                         mean_d += dxhat[j];
                         mean_dx += dxhat[j] * xhat[i * n + j];
                       }
                       mean_d /= static_cast<double>(n);
                       mean_dx /= static_cast<double>(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                       }
                     }
                   }
                 });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Tensor out = x.clone();
  out.set_requires_grad(false);
  for (auto& v : out.mutable_data()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  check_finite(out, "gelu");
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out, inv_sqrt_2pi]() mutable {
      auto g = out.grad();
      auto xd = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xd[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding_lookup");
  if (ids.empty()) throw ContractError("embedding_lookup needs at least one id");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<std::size_t> id_copy(ids.begin(), ids.end());
  Tensor out = Tensor::zeros({ids.size(), d});
  auto o = out.mutable_data();
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) {
      throw IndexError("embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (auto* tape = tracking_tape({&table})) {
    tape->record({table}, out, [table, out, d, id_copy = std::move(id_copy)]() mutable {
      auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < id_copy.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) gt[id_copy[i] * d + j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  std::vector<Tensor> used;
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (!p.defined()) continue;
    require_matrix(p, "concat_rows");
    if (used.empty()) {
      cols = p.cols();
    } else if (p.cols() != cols) {
      throw DimensionError("concat_rows column mismatch: " + shape_to_string(used.front().shape()) + " vs " +
                           shape_to_string(p.shape()));
    }
    rows += p.rows();
    used.push_back(p);
  }
  if (used.empty()) throw ContractError("concat_rows needs at least one defined part");
  Tensor out = Tensor::zeros({rows, cols});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (const auto& p : used) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  Tape* tape = Tape::current();
  bool any = false;
  for (const auto& p : used) any = any || p.requires_grad();
  if (tape != nullptr && any) {
    tape->record(used, out, [used, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : used) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) {
    throw IndexError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") outside " +
                     shape_to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  auto xd = x.data();
  std::vector<double> values(xd.begin() + static_cast<std::ptrdiff_t>(begin * n),
                             xd.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  Tensor out = Tensor::from({count, n}, std::move(values));
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out, begin, n]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({n, m});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = xd[i * n + j];
  }
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor pad_rows(const Tensor& x, std::size_t total_rows) {
  require_matrix(x, "pad_rows");
  if (total_rows < x.rows()) throw DimensionError("pad_rows target smaller than input");
  if (total_rows == x.rows()) return x;
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({total_rows, n});
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  require_matrix(x, "repeat_rows");
  if (times == 0) throw ContractError("repeat_rows needs times >= 1");
  const std::size_t block = x.numel();
  Tensor out = Tensor::zeros({x.rows() * times, x.cols()});
  auto o = out.mutable_data();
  for (std::size_t t = 0; t < times; ++t) {
    std::copy(x.data().begin(), x.data().end(), o.begin() + static_cast<std::ptrdiff_t>(t * block));
  }
  if (auto* tape = tracking_tape({&x})) {
    tape->record({x}, out, [x, out, times, block]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t t = 0; t < times; ++t) {
        for (std::size_t i = 0; i < block; ++i) gx[i] += g[t * block + i];
      }
    });
  }
  return out;
}

Tensor apply_mask(const Tensor& scores, const AttentionMask& mask) {
  require_matrix(scores, "apply_mask");
  if (mask.rows != scores.rows() || mask.cols != scores.cols()) {
    throw DimensionError("mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                         " does not match scores " + shape_to_string(scores.shape()));
  }
  Tensor out = scores.clone();
  out.set_requires_grad(false);
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (!mask.allowed[i]) o[i] = kMaskedScore;
  }
  check_finite(out, "apply_mask");
  if (auto* tape = tracking_tape({&scores})) {
    tape->record({scores}, out, [scores, out, allowed = mask.allowed]() mutable {
      auto g = out.grad();
      auto gs = scores.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (allowed[i]) gs[i] += g[i];
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, const AttentionMask* mask) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) {
    throw DimensionError("attention shapes q " + shape_to_string(q.shape()) + " k " + shape_to_string(k.shape()) +
                         " v " + shape_to_string(v.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                         " heads");
  }
  if (mask != nullptr && (mask->rows != lq || mask->cols != lk)) {
    throw DimensionError("attention mask does not match " + std::to_string(lq) + "x" + std::to_string(lk));
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  // probs[h][i][j]
  std::vector<double> probs(n_heads * lq * lk);
  Tensor out = Tensor::zeros({lq, d});
  auto o = out.mutable_data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double* p = probs.data() + (h * lq + i) * lk;
      double mx = kMaskedScore;
      bool any = false;
      for (std::size_t j = 0; j < lk; ++j) {
        if (mask != nullptr && !(*mask)(i, j)) {
          p[j] = kMaskedScore;
          continue;
        }
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qd[i * d + c0 + c] * kd[j * d + c0 + c];
        p[j] = s * inv_sqrt;
        if (!any || p[j] > mx) mx = p[j];
        any = true;
      }
      if (!any) throw ContractError("attention row " + std::to_string(i) + " has no allowed keys");
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j < lk; ++j) p[j] /= z;
      for (std::size_t j = 0; j < lk; ++j) {
        const double pj = p[j];
        if (pj == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) o[i * d + c0 + c] += pj * vd[j * d + c0 + c];
      }
    }
  }
  check_finite(out, "attention");
  if (auto* tape = tracking_tape({&q, &k, &v})) {
    tape->record({q, k, v}, out,
                 [q, k, v, out, n_heads, lq, lk, d, dh, inv_sqrt, probs = std::move(probs)]() mutable {
                   auto g = out.grad();
                   auto qd = q.data();
                   auto kd = k.data();
                   auto vd = v.data();
                   const bool need_q = q.requires_grad(), need_k = k.requires_grad(), need_v = v.requires_grad();
                   std::span<double> gq, gk, gv;
                   if (need_q) gq = q.mutable_grad();
                   if (need_k) gk = k.mutable_grad();
                   if (need_v) gv = v.mutable_grad();
                   std::vector<double> dp(lk);
                   for (std::size_t h = 0; h < n_heads; ++h) {
                     const std::size_t c0 = h * dh;
                     for (std::size_t i = 0; i < lq; ++i) {
                       const double* p = probs.data() + (h * lq + i) * lk;
                       const double* gi = g.data() + i * d + c0;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < lk; ++j) {
                         if (p[j] == 0.0) {
                           dp[j] = 0.0;
                           continue;
                         }
                         double s = 0.0;
                         for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vd[j * d + c0 + c];
                         dp[j] = s;
                         dot += s * p[j];
                         if (need_v) {
                           for (std::size_t c = 0; c < dh; ++c) gv[j * d + c0 + c] += p[j] * gi[c];
                         }
                       }
                       for (std::size_t j = 0; j < lk; ++j) {
                         if (p[j] == 0.0) continue;
                         const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                         if (need_q) {
                           for (std::size_t c = 0; c < dh; ++c) gq[i * d + c0 + c] += ds * kd[j * d + c0 + c];
                         }
                         if (need_k) {
                           for (std::size_t c = 0; c < dh; ++c) gk[j * d + c0 + c] += ds * qd[i * d + c0 + c];
                         }
                       }
                     }
                   }
                 });
  }
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::size_t> targets,
                            std::span<const std::uint8_t> mask) {
  require_matrix(logits, "cross_entropy_masked");
  const std::size_t l = logits.rows(), vocab = logits.cols();
  if (targets.size() != l || mask.size() != l) {
    throw DimensionError("cross_entropy_masked: " + std::to_string(l) + " logit rows, " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] >= vocab) {
      throw IndexError("target id " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (count == 0) throw ContractError("cross_entropy_masked: mask selects no positions (degenerate loss)");
  auto x = logits.data();
  std::vector<double> probs(l * vocab, 0.0);
  std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
  std::vector<std::size_t> target_copy(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    const double* row = x.data() + i * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[i * vocab + j] = std::exp(row[j] - mx);
      z += probs[i * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(count));
  check_finite(out, "cross_entropy_masked");
  if (auto* tape = tracking_tape({&logits})) {
    tape->record({logits}, out,
                 [logits, out, vocab, count, probs = std::move(probs), mask_copy = std::move(mask_copy),
                  target_copy = std::move(target_copy)]() mutable {
                   const double g = out.grad()[0] / static_cast<double>(count);
                   auto gl = logits.mutable_grad();
                   for (std::size_t i = 0; i < mask_copy.size(); ++i) {
                     if (!mask_copy[i]) continue;
                     for (std::size_t j = 0; j < vocab; ++j) gl[i * vocab + j] += g * probs[i * vocab + j];
                     gl[i * vocab + target_copy[i]] -= g;
                   }
                 });
  }
  return out;
}

Tensor mse_masked(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> row_mask) {
  require_matrix(pred, "mse_masked");
  require_same_shape(pred, target, "mse_masked");
  const std::size_t m = pred.rows(), n = pred.cols();
  if (row_mask.size() != m) throw DimensionError("mse_masked: mask length does not match rows");
  std::size_t rows_used = 0;
  for (auto b : row_mask) rows_used += b ? 1 : 0;
  if (rows_used == 0) throw ContractError("mse_masked: mask selects no rows");
  const double denom = static_cast<double>(rows_used * n);
  auto p = pred.data();
  auto t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      const double diff = p[i * n + j] - t[i * n + j];
      total += diff * diff;
    }
  }
  Tensor out = Tensor::scalar(total / denom);
  check_finite(out, "mse_masked");
  if (auto* tape = tracking_tape({&pred})) {
    tape->record({pred}, out,
                 [pred, target, out, m, n, denom, mask = std::vector<std::uint8_t>(row_mask.begin(), row_mask.end())]() mutable {
                   const double g = out.grad()[0] * 2.0 / denom;
                   auto p = pred.data();
                   auto t = target.data();
                   auto gp = pred.mutable_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     if (!mask[i]) continue;
                     for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += g * (p[i * n + j] - t[i * n + j]);
                   }
                 });
  }
  return out;
}

}  // namespace alignlab
