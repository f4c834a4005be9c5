// Differentiable primitives over Tensor.
//
// Matrices are rank-2 row-major tensors. Broadcasting exists only along the
// leading dimension (bias rows); anything else needs an explicit reshape.

#pragma once

#include <cstddef>
#include <vector>

#include "usm/tensor.hpp"

namespace usm::ops {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m,k] x [n,k]^T -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// [m,n] + [n] broadcast over rows.
Tensor add_rowwise(const Tensor& a, const Tensor& row);
// [m,n] * [n] broadcast over rows.
Tensor mul_rowwise(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum of a[i] where mask[i] != 0.
Tensor masked_sum(const Tensor& a, const std::vector<unsigned char>& mask);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor swish(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Scalar log-sum-exp over every element.
Tensor logsumexp(const Tensor& a);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Depthwise 1-D convolution along rows, zero "same" padding.
// x:[T,d], weight:[k,d] (k odd), bias:[d].
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

// out[i] = a[i, index[i]]; shape [m].
Tensor pick(const Tensor& a, const std::vector<std::size_t>& index);
// Rows of a selected by index (repeats allowed).
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
// Embedding lookup: table[V,d], ids -> [len,d].
Tensor embedding(const Tensor& table, const std::vector<std::size_t>& ids);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);

// Each row repeated `factor` times in order: AB -> AABB.
Tensor repeat_rows(const Tensor& a, std::size_t factor);
// Linear interpolation in time from [T_in,d] to [T_out,d] (endpoints aligned).
Tensor interpolate_rows(const Tensor& a, std::size_t out_rows);
// Rows with mask[r] != 0 replaced by the matching row of `noise` (a constant).
Tensor replace_rows(const Tensor& a, const std::vector<unsigned char>& mask,
                    const Tensor& noise);

// Mean squared error over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

// Stop-gradient.
inline Tensor stop_gradient(const Tensor& a) { return a.detach(); }

// Multi-head self-attention where row i attends to the contiguous key range
// [lo[i], hi[i]] (inclusive). q,k,v:[T,d] with d split into `heads` blocks;
// rel_bias:[heads, 2*cap+1] indexed by clamp(j-i, -cap, cap)+cap, may be
// undefined. Scores are scaled by 1/sqrt(d/heads).
Tensor banded_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const Tensor& rel_bias, std::size_t heads,
                        std::size_t cap, const std::vector<std::size_t>& lo,
                        const std::vector<std::size_t>& hi);

// Dense reference: same contract with an explicit boolean [T,T] mask.
// Built from generic primitives; used to cross-check banded_attention.
Tensor dense_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& rel_bias, std::size_t heads,
                              std::size_t cap,
                              const std::vector<unsigned char>& mask);

}  // namespace usm::ops
