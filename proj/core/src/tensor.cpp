#include "g3dk/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace g3dk {

std::int64_t shape_size(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_size(shape)), fill);
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

std::int64_t Tensor::extent(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::out_of_range("axis out of range for rank " + std::to_string(r));
  return shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("item() requires a size-1 tensor, shape is " + shape_str(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor tensor_of(std::vector<double> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  return Tensor{Shape{n}, std::move(values)};
}

Tensor scalar_tensor(double v) { return Tensor{Shape{}, std::vector<double>{v}}; }

Tensor zeros(Shape shape) { return Tensor{std::move(shape), 0.0}; }
Tensor ones(Shape shape) { return Tensor{std::move(shape), 1.0}; }
Tensor full(Shape shape, double v) { return Tensor{std::move(shape), v}; }

void Tape::watch(Tensor& t) {
  if (!recording_) return;
  if (t.node >= 0) return;  // already watched on this tape
  t.requires_grad = true;
  t.node = alloc_node(t.size());
}

std::int32_t Tape::alloc_node(std::int64_t grad_size) {
  grads_.emplace_back(static_cast<std::size_t>(grad_size), 0.0);
  return static_cast<std::int32_t>(grads_.size() - 1);
}

void Tape::push_op(std::function<void(Tape&)> backward) {
  ops_.push_back(std::move(backward));
}

std::vector<double>& Tape::grad_buf(std::int32_t node) {
  if (node < 0 || node >= static_cast<std::int32_t>(grads_.size())) {
    throw std::logic_error("invalid tape node " + std::to_string(node));
  }
  return grads_[static_cast<std::size_t>(node)];
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1) throw std::logic_error("backward requires a size-1 root, shape is " + shape_str(root.shape));
  if (root.node < 0) throw std::logic_error("backward root is not recorded on this tape");
  grad_buf(root.node)[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)(*this);
}

const std::vector<double>& Tape::grad(const Tensor& t) const {
  if (t.node < 0 || t.node >= static_cast<std::int32_t>(grads_.size())) {
    throw std::logic_error("tensor has no gradient on this tape");
  }
  return grads_[static_cast<std::size_t>(t.node)];
}

void Tape::reset() {
  ops_.clear();
  grads_.clear();
}

}  // namespace g3dk
