#pragma once

// Differentiable tensor operations.
//
// Broadcasting is limited to bias-add over the leading axis and the
// per-row scaling in mul_col; any other shape disagreement throws
// DimensionError naming both shapes.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "alpkd/tensor.hpp"

namespace alpkd::ops {

// [r,k] x [k,c] -> [r,c]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x[N,d] + bias[d]
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x[N,d] * s[N,1], each row scaled by its own scalar
Tensor mul_col(const Tensor& x, const Tensor& s);

Tensor relu(const Tensor& x);
// Exact erf-based GELU.
Tensor gelu(const Tensor& x);

// Normalizes the last axis; gamma and beta have the last-axis extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
// Log-softmax along the last axis.
Tensor log_softmax(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);

// Mean of squared differences over every element.
Tensor mse(const Tensor& a, const Tensor& b);
// Mean over rows of -sum_w targets[r,w] * log_softmax(logits)[r,w].
// Targets are constants; no gradient flows into them.
Tensor cross_entropy_with_soft_targets(const Tensor& logits, const Tensor& targets);

// Row lookup: table[V,d], ids -> [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
// Columns [begin, end) of a 2-D tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
// a[N,d], b[N,d] -> [N,1] rowwise dot products.
Tensor row_dot(const Tensor& a, const Tensor& b);
// Rowwise x / max(||x||_2, eps).
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// Multi-head scaled dot-product self-attention over packed sequences.
// q, k, v: [batch*seq, d]; key_mask: batch*seq entries, 0 marks padding
// keys that receive no attention. Returns [batch*seq, d].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> key_mask, std::size_t batch, std::size_t seq,
                 std::size_t num_heads);

}  // namespace alpkd::ops
