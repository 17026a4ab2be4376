#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "falldet/tensor.hpp"

// Differentiable primitives. Each records itself on the tape of its taped
// inputs (all taped inputs must share one tape) and otherwise runs eagerly.
//
// Broadcasting is limited to two forms for add/mul: a single-element tensor
// against any tensor, and a rank-1 tensor whose extent equals the trailing
// axis of the other operand. Anything else is a ShapeError.
namespace falldet::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// (..., M, K) x (K, N) -> (..., M, N), or batched (B, M, K) x (B, K, N).
Tensor matmul(const Tensor& a, const Tensor& b);

// (N, T, C) -> (N, T, k*C); out[n, t, j*C + c] = x[n, t + j - k/2, c], zero outside [0, T).
Tensor window_gather(const Tensor& x, std::size_t kernel);

// Reductions drop the reduced axis.
Tensor reduce_max(const Tensor& x, std::size_t axis);
Tensor reduce_mean(const Tensor& x, std::size_t axis);
Tensor reduce_sum(const Tensor& x, std::size_t axis);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor erf(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
// Normalized exponential over the trailing axis, shifted by the row max.
Tensor softmax_last(const Tensor& x);
// (x - mean) / sqrt(var + epsilon) over the trailing axis, biased variance.
Tensor layer_norm_last(const Tensor& x, double epsilon);

// Inserts a new axis at `axis` with the given extent.
Tensor broadcast(const Tensor& x, std::size_t axis, std::size_t extent);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor reshape(const Tensor& x, Shape shape);

// Compositions of the above.
Tensor neg(const Tensor& x);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);

}  // namespace falldet::ops
