#pragma once

#include <vector>

#include "mmkd/tensor.hpp"

namespace mmkd::ad {

// Elementwise and broadcast arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias); // [r x d] + [d], rows broadcast
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor sqrt_(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor gelu(const Tensor& x);

// Matrix products.
Tensor matmul(const Tensor& a, const Tensor& b);    // [m x k]·[k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b); // [m x k]·[n x k]^T -> [m x n]

// Structural ops over the row axis.
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor embed(const Tensor& table, const std::vector<int>& ids);

// Row-wise reductions and normalizations (last axis is the feature axis).
Tensor row_sum(const Tensor& x);                      // -> [rows]
Tensor sum(const Tensor& x);                          // -> scalar
Tensor pick_per_row(const Tensor& x, const std::vector<int>& cols); // -> [rows]
Tensor div_rows(const Tensor& x, const Tensor& v);    // x[i,:] / v[i]
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor softmax_t(const Tensor& x, double temperature);
Tensor log_softmax_t(const Tensor& x, double temperature);
// Per-row z-scoring with the population standard deviation; constant rows
// map to all zeros instead of dividing by zero.
Tensor standardize_rows(const Tensor& x);

} // namespace mmkd::ad
