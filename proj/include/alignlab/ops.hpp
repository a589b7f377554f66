#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "alignlab/tensor.hpp"

namespace alignlab {

// Boolean matrix, true where query row i may attend to key column j.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask full(std::size_t rows, std::size_t cols);
  static AttentionMask causal(std::size_t n);
  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

// Fill value used for disallowed attention scores. Finite so the forward
// finiteness check stays meaningful; exp() of it underflows to exactly 0.
inline constexpr double kMaskedScore = -1e9;

// Every op below records itself on the active tape when any input requires
// grad, and throws NumericError if it produces a non-finite value.

Tensor matmul(const Tensor& a, const Tensor& b);
// x[m x k] . weight[n x k]^T + bias[n]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[m x n] + row[n] on every row.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor sum(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids);
// Undefined parts are skipped; at least one part must be defined.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
// Appends zero rows up to `total_rows`.
Tensor pad_rows(const Tensor& x, std::size_t total_rows);
// Stacks `times` copies of x vertically.
Tensor repeat_rows(const Tensor& x, std::size_t times);

// Replaces disallowed entries with kMaskedScore; they receive no gradient.
Tensor apply_mask(const Tensor& scores, const AttentionMask& mask);

// Multi-head scaled dot-product attention with heads laid out as contiguous
// column blocks of q/k/v. `mask` may be null for full attention.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const AttentionMask* mask = nullptr);

// Mean negative log-likelihood over rows whose mask entry is set.
Tensor cross_entropy_masked(const Tensor& logits, std::span<const std::size_t> targets,
                            std::span<const std::uint8_t> mask);

// Mean squared error over the selected rows; `target` is treated as constant.
Tensor mse_masked(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> row_mask);

}  // namespace alignlab
