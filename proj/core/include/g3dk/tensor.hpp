#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace g3dk {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major double tensor. Rank 0 (empty shape) is a scalar.
/// `node` is the handle of the tape node that tracks this tensor's
/// gradient; -1 means the tensor is not on any tape.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::int32_t node = -1;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> d);

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t extent(int axis) const;  // negative axis counts from the back

  double item() const;  // size-1 tensors only

  bool on_tape() const { return node >= 0; }
  bool all_finite() const;
};

Tensor tensor_of(std::vector<double> values);           // rank-1
Tensor scalar_tensor(double v);                         // rank-0
Tensor zeros(Shape shape);
Tensor ones(Shape shape);
Tensor full(Shape shape, double v);

/// Reverse-mode tape. Operations are recorded in execution order; the
/// backward pass replays them in exact reverse order. Gradient buffers
/// live in the tape, keyed by node id, so tensors stay plain values.
///
/// Single-threaded by design; independent tapes may run concurrently on
/// disjoint data.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  /// Registers a leaf (parameter or input) so gradients accumulate for it.
  void watch(Tensor& t);

  /// Allocates a zeroed gradient buffer and returns its node id.
  std::int32_t alloc_node(std::int64_t grad_size);

  /// Records one operation. Inputs of the op must already have nodes
  /// (or be absent); the closure reads the output grad via grad_buf and
  /// accumulates into the input buffers.
  void push_op(std::function<void(Tape&)> backward);

  std::vector<double>& grad_buf(std::int32_t node);

  /// Seeds d(root)/d(root) = 1 and replays ops in reverse. Root must be
  /// a size-1 tensor recorded on this tape.
  void backward(const Tensor& root);

  const std::vector<double>& grad(const Tensor& t) const;

  std::size_t num_ops() const { return ops_.size(); }
  std::size_t num_nodes() const { return grads_.size(); }
  void reset();

 private:
  std::vector<std::function<void(Tape&)>> ops_;
  std::vector<std::vector<double>> grads_;
  bool recording_ = true;
};

}  // namespace g3dk
