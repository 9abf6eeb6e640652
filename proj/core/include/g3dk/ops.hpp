#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "g3dk/tensor.hpp"

namespace g3dk {

// Elementwise binary ops accept equal shapes, or a `b` whose shape is a
// trailing suffix of `a`'s (broadcast over the leading batch axes).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add_scalar(Tape& tape, const Tensor& a, double c);
Tensor mul_scalar(Tape& tape, const Tensor& a, double c);
Tensor neg(Tape& tape, const Tensor& a);

Tensor exp(Tape& tape, const Tensor& a);
Tensor log(Tape& tape, const Tensor& a);  // throws std::domain_error on x <= 0
Tensor relu(Tape& tape, const Tensor& a);
Tensor gelu(Tape& tape, const Tensor& a);  // exact erf form

/// Repeats `t` over the trailing axes so the result has `full` shape;
/// t.shape must be a leading prefix of `full` (a scalar expands anywhere).
Tensor expand_from_prefix(Tape& tape, const Tensor& t, const Shape& full);

Tensor reshape(Tape& tape, const Tensor& a, Shape shape);
Tensor transpose(Tape& tape, const Tensor& a, int axis_a, int axis_b);
Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis);
Tensor slice(Tape& tape, const Tensor& a, int axis, std::int64_t start, std::int64_t len);

/// Selects rows along axis 0; duplicate indices accumulate gradient.
Tensor gather(Tape& tape, const Tensor& a, std::span<const std::int64_t> indices);

Tensor sum(Tape& tape, const Tensor& a, int axis);
Tensor mean(Tape& tape, const Tensor& a, int axis);
Tensor sum_all(Tape& tape, const Tensor& a);
Tensor mean_all(Tape& tape, const Tensor& a);

/// Euclidean norm along `axis` (axis removed from the output shape).
Tensor l2_norm(Tape& tape, const Tensor& a, int axis);

/// Max-subtraction-stabilized softmax along `axis`.
Tensor softmax(Tape& tape, const Tensor& a, int axis);

/// Softmax over the last axis restricted to entries with valid != 0.
/// Invalid entries produce 0; rows with no valid entry produce all zeros.
/// `valid` must have exactly a.size() entries.
Tensor masked_softmax_last(Tape& tape, const Tensor& a, const std::vector<std::uint8_t>& valid);

/// LayerNorm over the last axis; gamma/beta are rank-1 of that extent.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Batched matrix product: [..,m,k] @ [..,k,n]. The right operand may be
/// rank 2 (shared across batches) or carry identical leading batch dims.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// Mean over the batch of -log softmax(logits)[target]. Classes are the
/// last axis; targets has one entry per leading row.
Tensor cross_entropy_logits(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets);

/// Concatenates size-1 tensors into a rank-1 vector.
Tensor stack_scalars(Tape& tape, std::span<const Tensor> scalars);

}  // namespace g3dk
