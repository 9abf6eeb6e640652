#include "g3dk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace g3dk {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return axis;
}

struct AxisView {
  std::int64_t outer;
  std::int64_t extent;
  std::int64_t inner;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> ins) {
  if (!tape.recording()) return false;
  for (const Tensor* t : ins) {
    if (t != nullptr && t->node >= 0) return true;
  }
  return false;
}

void finish(Tape& tape, Tensor& out, bool tracked) {
  if (tracked) {
    out.requires_grad = true;
    out.node = tape.alloc_node(out.size());
  }
}

using UnaryGrad = double (*)(double x, double y);  // dy/dx from input and output

Tensor unary_op(Tape& tape, const Tensor& a, double (*fwd)(double), UnaryGrad dydx) {
  Tensor out{a.shape};
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = fwd(a.data[i]);
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, x = a.data, y = out.data, dydx](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * dydx(x[i], y[i]);
    });
  }
  return out;
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, BinKind kind) {
  if (!is_suffix(a.shape, b.shape)) {
    throw std::invalid_argument("elementwise shapes incompatible: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  const std::size_t bs = b.data.size();
  Tensor out{a.shape};
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double x = a.data[i];
    const double y = b.data[i % bs];
    switch (kind) {
      case BinKind::Add: out.data[i] = x + y; break;
      case BinKind::Sub: out.data[i] = x - y; break;
      case BinKind::Mul: out.data[i] = x * y; break;
      case BinKind::Div: out.data[i] = x / y; break;
    }
  }
  const bool tracked = want_grad(tape, {&a, &b});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, bn = b.node, on = out.node, ad = a.data, bd = b.data, kind, bs](Tape& t) {
      const auto& go = t.grad_buf(on);
      if (an >= 0) {
        auto& ga = t.grad_buf(an);
        for (std::size_t i = 0; i < go.size(); ++i) {
          switch (kind) {
            case BinKind::Add:
            case BinKind::Sub: ga[i] += go[i]; break;
            case BinKind::Mul: ga[i] += go[i] * bd[i % bs]; break;
            case BinKind::Div: ga[i] += go[i] / bd[i % bs]; break;
          }
        }
      }
      if (bn >= 0) {
        auto& gb = t.grad_buf(bn);
        for (std::size_t i = 0; i < go.size(); ++i) {
          const std::size_t j = i % bs;
          switch (kind) {
            case BinKind::Add: gb[j] += go[i]; break;
            case BinKind::Sub: gb[j] -= go[i]; break;
            case BinKind::Mul: gb[j] += go[i] * ad[i]; break;
            case BinKind::Div: gb[j] -= go[i] * ad[i] / (bd[j] * bd[j]); break;
          }
        }
      }
    });
  }
  return out;
}

// c[m,n] += a[m,k] @ b[k,n]
void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] @ b[k,n]^T
void mm_nt_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t n, std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[kk] += s;
    }
  }
}

// c[k,n] += a[m,k]^T @ b[m,n]
void mm_tn_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      double* crow = c + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose_raw(const std::vector<double>& src, const Shape& src_shape, int ax_a, int ax_b) {
  const int r = static_cast<int>(src_shape.size());
  std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * src_shape[static_cast<std::size_t>(i + 1)];
  }
  Shape out_shape = src_shape;
  std::swap(out_shape[static_cast<std::size_t>(ax_a)], out_shape[static_cast<std::size_t>(ax_b)]);
  std::vector<std::int64_t> coords(static_cast<std::size_t>(r), 0);
  std::vector<double> dst(src.size());
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    std::int64_t in_idx = 0;
    for (int i = 0; i < r; ++i) {
      std::int64_t c = coords[static_cast<std::size_t>(i)];
      const int src_axis = (i == ax_a) ? ax_b : (i == ax_b) ? ax_a : i;
      in_idx += c * in_strides[static_cast<std::size_t>(src_axis)];
    }
    dst[flat] = src[static_cast<std::size_t>(in_idx)];
    for (int i = r - 1; i >= 0; --i) {
      auto& c = coords[static_cast<std::size_t>(i)];
      if (++c < out_shape[static_cast<std::size_t>(i)]) break;
      c = 0;
    }
  }
  return dst;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Add); }
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Sub); }
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Mul); }
Tensor div(Tape& tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Div); }

Tensor add_scalar(Tape& tape, const Tensor& a, double c) {
  Tensor out{a.shape};
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + c;
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor mul_scalar(Tape& tape, const Tensor& a, double c) {
  Tensor out{a.shape};
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * c;
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, c](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

Tensor neg(Tape& tape, const Tensor& a) { return mul_scalar(tape, a, -1.0); }

Tensor exp(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(Tape& tape, const Tensor& a) {
  for (double v : a.data) {
    if (!(v > 0.0)) throw std::domain_error("log of non-positive input " + std::to_string(v));
  }
  return unary_op(
      tape, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(Tape& tape, const Tensor& a) {
  return unary_op(
      tape, a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor expand_from_prefix(Tape& tape, const Tensor& t, const Shape& full) {
  if (t.rank() > static_cast<int>(full.size()) ||
      !std::equal(t.shape.begin(), t.shape.end(), full.begin())) {
    throw std::invalid_argument("shape " + shape_str(t.shape) + " is not a prefix of " + shape_str(full));
  }
  const std::int64_t total = shape_size(full);
  const std::int64_t tail = total / std::max<std::int64_t>(t.size(), 1);
  Tensor out{full};
  for (std::int64_t i = 0; i < total; ++i) out.data[static_cast<std::size_t>(i)] = t.data[static_cast<std::size_t>(i / tail)];
  const bool tracked = want_grad(tape, {&t});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([tn = t.node, on = out.node, tail](Tape& tp) {
      const auto& go = tp.grad_buf(on);
      auto& gt = tp.grad_buf(tn);
      for (std::size_t i = 0; i < go.size(); ++i) gt[i / static_cast<std::size_t>(tail)] += go[i];
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw std::invalid_argument("cannot reshape " + shape_str(a.shape) + " to " + shape_str(shape));
  }
  Tensor out{std::move(shape), a.data};
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a, int axis_a, int axis_b) {
  const int r = a.rank();
  axis_a = normalize_axis(axis_a, r);
  axis_b = normalize_axis(axis_b, r);
  Shape out_shape = a.shape;
  std::swap(out_shape[static_cast<std::size_t>(axis_a)], out_shape[static_cast<std::size_t>(axis_b)]);
  Tensor out{out_shape, transpose_raw(a.data, a.shape, axis_a, axis_b)};
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, out_shape, axis_a, axis_b](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      const auto back = transpose_raw(go, out_shape, axis_a, axis_b);
      for (std::size_t i = 0; i < back.size(); ++i) ga[i] += back[i];
    });
  }
  return out;
}

Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape;
  std::int64_t total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.shape[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
        throw std::invalid_argument("concat shape mismatch: " + shape_str(p.shape) + " vs " + shape_str(out_shape));
      }
    }
    total_axis += p.extent(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  Tensor out{out_shape};
  const AxisView ov = axis_view(out_shape, axis);

  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    const std::int64_t pe = p.extent(axis);
    const std::int64_t block = pe * ov.inner;
    for (std::int64_t o = 0; o < ov.outer; ++o) {
      const double* src = p.data.data() + o * block;
      double* dst = out.data.data() + (o * ov.extent + off) * ov.inner;
      std::copy(src, src + block, dst);
    }
    offsets.push_back(off);
    off += pe;
  }

  bool any = false;
  std::vector<std::int32_t> nodes;
  std::vector<std::int64_t> extents;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node);
    extents.push_back(p.extent(axis));
    any = any || p.node >= 0;
  }
  const bool tracked = tape.recording() && any;
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([on = out.node, ov, nodes, extents, offsets](Tape& t) {
      const auto& go = t.grad_buf(on);
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        if (nodes[pi] < 0) continue;
        auto& gp = t.grad_buf(nodes[pi]);
        const std::int64_t block = extents[pi] * ov.inner;
        for (std::int64_t o = 0; o < ov.outer; ++o) {
          const double* src = go.data() + (o * ov.extent + offsets[pi]) * ov.inner;
          double* dst = gp.data() + o * block;
          for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(Tape& tape, const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  const int r = a.rank();
  axis = normalize_axis(axis, r);
  const std::int64_t e = a.extent(axis);
  if (start < 0 || len <= 0 || start + len > e) {
    throw std::invalid_argument("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of range for extent " + std::to_string(e));
  }
  Shape out_shape = a.shape;
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor out{out_shape};
  const AxisView av = axis_view(a.shape, axis);
  for (std::int64_t o = 0; o < av.outer; ++o) {
    const double* src = a.data.data() + (o * av.extent + start) * av.inner;
    double* dst = out.data.data() + o * len * av.inner;
    std::copy(src, src + len * av.inner, dst);
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, av, start, len](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        const double* src = go.data() + o * len * av.inner;
        double* dst = ga.data() + (o * av.extent + start) * av.inner;
        for (std::int64_t i = 0; i < len * av.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor gather(Tape& tape, const Tensor& a, std::span<const std::int64_t> indices) {
  if (a.rank() < 1) throw std::invalid_argument("gather requires rank >= 1");
  const std::int64_t rows = a.extent(0);
  const std::int64_t row_size = a.size() / rows;
  for (auto idx : indices) {
    if (idx < 0 || idx >= rows) {
      throw std::out_of_range("gather index " + std::to_string(idx) + " out of range [0," + std::to_string(rows) + ")");
    }
  }
  Shape out_shape = a.shape;
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  Tensor out{out_shape};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = a.data.data() + indices[i] * row_size;
    std::copy(src, src + row_size, out.data.data() + static_cast<std::int64_t>(i) * row_size);
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    tape.push_op([an = a.node, on = out.node, idx = std::move(idx), row_size](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* src = go.data() + static_cast<std::int64_t>(i) * row_size;
        double* dst = ga.data() + idx[i] * row_size;
        for (std::int64_t j = 0; j < row_size; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

namespace {

Tensor reduce_axis(Tape& tape, const Tensor& a, int axis, bool take_mean) {
  const int r = a.rank();
  axis = normalize_axis(axis, r);
  const AxisView av = axis_view(a.shape, axis);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i != axis) out_shape.push_back(a.shape[static_cast<std::size_t>(i)]);
  }
  Tensor out{out_shape};
  const double w = take_mean ? 1.0 / static_cast<double>(av.extent) : 1.0;
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t i = 0; i < av.inner; ++i) {
      double s = 0.0;
      for (std::int64_t k = 0; k < av.extent; ++k) s += a.data[static_cast<std::size_t>((o * av.extent + k) * av.inner + i)];
      out.data[static_cast<std::size_t>(o * av.inner + i)] = s * w;
    }
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, av, w](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        for (std::int64_t i = 0; i < av.inner; ++i) {
          const double g = go[static_cast<std::size_t>(o * av.inner + i)] * w;
          for (std::int64_t k = 0; k < av.extent; ++k) ga[static_cast<std::size_t>((o * av.extent + k) * av.inner + i)] += g;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor sum(Tape& tape, const Tensor& a, int axis) { return reduce_axis(tape, a, axis, false); }
Tensor mean(Tape& tape, const Tensor& a, int axis) { return reduce_axis(tape, a, axis, true); }

Tensor sum_all(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  Tensor out = scalar_tensor(s);
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node](Tape& t) {
      const double g = t.grad_buf(on)[0];
      auto& ga = t.grad_buf(an);
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

Tensor mean_all(Tape& tape, const Tensor& a) {
  return mul_scalar(tape, sum_all(tape, a), 1.0 / static_cast<double>(a.size()));
}

Tensor l2_norm(Tape& tape, const Tensor& a, int axis) {
  const int r = a.rank();
  axis = normalize_axis(axis, r);
  const AxisView av = axis_view(a.shape, axis);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i != axis) out_shape.push_back(a.shape[static_cast<std::size_t>(i)]);
  }
  Tensor out{out_shape};
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t i = 0; i < av.inner; ++i) {
      double s = 0.0;
      for (std::int64_t k = 0; k < av.extent; ++k) {
        const double v = a.data[static_cast<std::size_t>((o * av.extent + k) * av.inner + i)];
        s += v * v;
      }
      out.data[static_cast<std::size_t>(o * av.inner + i)] = std::sqrt(s);
    }
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, av, x = a.data, norms = out.data](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        for (std::int64_t i = 0; i < av.inner; ++i) {
          const double nv = norms[static_cast<std::size_t>(o * av.inner + i)];
          if (nv == 0.0) continue;  // subgradient 0 at the origin
          const double g = go[static_cast<std::size_t>(o * av.inner + i)] / nv;
          for (std::int64_t k = 0; k < av.extent; ++k) {
            const auto idx = static_cast<std::size_t>((o * av.extent + k) * av.inner + i);
            ga[idx] += g * x[idx];
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax(Tape& tape, const Tensor& a, int axis) {
  const int r = a.rank();
  axis = normalize_axis(axis, r);
  const AxisView av = axis_view(a.shape, axis);
  Tensor out{a.shape};
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t i = 0; i < av.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < av.extent; ++k) m = std::max(m, a.data[static_cast<std::size_t>((o * av.extent + k) * av.inner + i)]);
      double s = 0.0;
      for (std::int64_t k = 0; k < av.extent; ++k) {
        const auto idx = static_cast<std::size_t>((o * av.extent + k) * av.inner + i);
        out.data[idx] = std::exp(a.data[idx] - m);
        s += out.data[idx];
      }
      const double inv = 1.0 / s;
      for (std::int64_t k = 0; k < av.extent; ++k) out.data[static_cast<std::size_t>((o * av.extent + k) * av.inner + i)] *= inv;
    }
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, av, p = out.data](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::int64_t o = 0; o < av.outer; ++o) {
        for (std::int64_t i = 0; i < av.inner; ++i) {
          double dot = 0.0;
          for (std::int64_t k = 0; k < av.extent; ++k) {
            const auto idx = static_cast<std::size_t>((o * av.extent + k) * av.inner + i);
            dot += go[idx] * p[idx];
          }
          for (std::int64_t k = 0; k < av.extent; ++k) {
            const auto idx = static_cast<std::size_t>((o * av.extent + k) * av.inner + i);
            ga[idx] += p[idx] * (go[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor masked_softmax_last(Tape& tape, const Tensor& a, const std::vector<std::uint8_t>& valid) {
  if (static_cast<std::int64_t>(valid.size()) != a.size()) {
    throw std::invalid_argument("mask size " + std::to_string(valid.size()) + " != tensor size " + std::to_string(a.size()));
  }
  if (a.rank() < 1) throw std::invalid_argument("masked_softmax_last requires rank >= 1");
  const std::int64_t s_len = a.extent(-1);
  const std::int64_t rows = a.size() / s_len;
  Tensor out{a.shape};
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::int64_t base = row * s_len;
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::int64_t k = 0; k < s_len; ++k) {
      if (valid[static_cast<std::size_t>(base + k)]) {
        any = true;
        m = std::max(m, a.data[static_cast<std::size_t>(base + k)]);
      }
    }
    if (!any) {
      for (std::int64_t k = 0; k < s_len; ++k) out.data[static_cast<std::size_t>(base + k)] = 0.0;
      continue;
    }
    double sum = 0.0;
    for (std::int64_t k = 0; k < s_len; ++k) {
      const auto idx = static_cast<std::size_t>(base + k);
      if (valid[idx]) {
        out.data[idx] = std::exp(a.data[idx] - m);
        sum += out.data[idx];
      } else {
        out.data[idx] = 0.0;
      }
    }
    const double inv = 1.0 / sum;
    for (std::int64_t k = 0; k < s_len; ++k) {
      const auto idx = static_cast<std::size_t>(base + k);
      if (valid[idx]) out.data[idx] *= inv;
    }
  }
  const bool tracked = want_grad(tape, {&a});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, on = out.node, rows, s_len, p = out.data, valid](Tape& t) {
      const auto& go = t.grad_buf(on);
      auto& ga = t.grad_buf(an);
      for (std::int64_t row = 0; row < rows; ++row) {
        const std::int64_t base = row * s_len;
        double dot = 0.0;
        for (std::int64_t k = 0; k < s_len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k);
          if (valid[idx]) dot += go[idx] * p[idx];
        }
        for (std::int64_t k = 0; k < s_len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k);
          if (valid[idx]) ga[idx] += p[idx] * (go[idx] - dot);
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm requires rank >= 1");
  const std::int64_t s_len = x.extent(-1);
  if (gamma.size() != s_len || beta.size() != s_len) {
    throw std::invalid_argument("layer_norm gamma/beta must have last-axis extent " + std::to_string(s_len));
  }
  const std::int64_t rows = x.size() / s_len;
  Tensor out{x.shape};
  std::vector<double> xhat(x.data.size());
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::int64_t base = row * s_len;
    double mu = 0.0;
    for (std::int64_t k = 0; k < s_len; ++k) mu += x.data[static_cast<std::size_t>(base + k)];
    mu /= static_cast<double>(s_len);
    double var = 0.0;
    for (std::int64_t k = 0; k < s_len; ++k) {
      const double d = x.data[static_cast<std::size_t>(base + k)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(s_len);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(row)] = inv;
    for (std::int64_t k = 0; k < s_len; ++k) {
      const auto idx = static_cast<std::size_t>(base + k);
      xhat[idx] = (x.data[idx] - mu) * inv;
      out.data[idx] = xhat[idx] * gamma.data[static_cast<std::size_t>(k)] + beta.data[static_cast<std::size_t>(k)];
    }
  }
  const bool tracked = want_grad(tape, {&x, &gamma, &beta});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([xn = x.node, gn = gamma.node, bn = beta.node, on = out.node, rows, s_len,
                  xhat = std::move(xhat), inv_std = std::move(inv_std), gd = gamma.data](Tape& t) {
      const auto& go = t.grad_buf(on);
      for (std::int64_t row = 0; row < rows; ++row) {
        const std::int64_t base = row * s_len;
        if (gn >= 0) {
          auto& gg = t.grad_buf(gn);
          for (std::int64_t k = 0; k < s_len; ++k) {
            gg[static_cast<std::size_t>(k)] += go[static_cast<std::size_t>(base + k)] * xhat[static_cast<std::size_t>(base + k)];
          }
        }
        if (bn >= 0) {
          auto& gb = t.grad_buf(bn);
          for (std::int64_t k = 0; k < s_len; ++k) gb[static_cast<std::size_t>(k)] += go[static_cast<std::size_t>(base + k)];
        }
        if (xn >= 0) {
          auto& gx = t.grad_buf(xn);
          double m1 = 0.0;
          double m2 = 0.0;
          for (std::int64_t k = 0; k < s_len; ++k) {
            const auto idx = static_cast<std::size_t>(base + k);
            const double dxhat = go[idx] * gd[static_cast<std::size_t>(k)];
            m1 += dxhat;
            m2 += dxhat * xhat[idx];
          }
          m1 /= static_cast<double>(s_len);
          m2 /= static_cast<double>(s_len);
          const double inv = inv_std[static_cast<std::size_t>(row)];
          for (std::int64_t k = 0; k < s_len; ++k) {
            const auto idx = static_cast<std::size_t>(base + k);
            const double dxhat = go[idx] * gd[static_cast<std::size_t>(k)];
            gx[idx] += inv * (dxhat - m1 - xhat[idx] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul requires rank >= 2 operands, got " + shape_str(a.shape) + " @ " + shape_str(b.shape));
  }
  const std::int64_t m = a.extent(-2);
  const std::int64_t k = a.extent(-1);
  const std::int64_t k2 = b.extent(-2);
  const std::int64_t n = b.extent(-1);
  const bool shared_b = b.rank() == 2;
  if (k != k2) {
    throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape) + " @ " + shape_str(b.shape));
  }
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape.begin(), a.shape.end() - 2, b.shape.begin())) {
      throw std::invalid_argument("matmul batch dimensions disagree: " + shape_str(a.shape) + " @ " + shape_str(b.shape));
    }
  }
  const std::int64_t batch = a.size() / (m * k);
  Shape out_shape(a.shape.begin(), a.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out{out_shape};
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    const double* ap = a.data.data() + bi * m * k;
    const double* bp = b.data.data() + (shared_b ? 0 : bi * k * n);
    double* cp = out.data.data() + bi * m * n;
    mm_acc(ap, bp, cp, m, k, n);
  }
  const bool tracked = want_grad(tape, {&a, &b});
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([an = a.node, bn = b.node, on = out.node, ad = a.data, bd = b.data, m, k, n, batch, shared_b](Tape& t) {
      const auto& go = t.grad_buf(on);
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const double* gop = go.data() + bi * m * n;
        if (an >= 0) {
          auto& ga = t.grad_buf(an);
          mm_nt_acc(gop, bd.data() + (shared_b ? 0 : bi * k * n), ga.data() + bi * m * k, m, n, k);
        }
        if (bn >= 0) {
          auto& gb = t.grad_buf(bn);
          mm_tn_acc(ad.data() + bi * m * k, gop, gb.data() + (shared_b ? 0 : bi * k * n), m, k, n);
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy_logits(Tape& tape, const Tensor& logits, std::span<const std::int64_t> targets) {
  if (logits.rank() < 1) throw std::invalid_argument("cross_entropy_logits requires rank >= 1");
  const std::int64_t classes = logits.extent(-1);
  const std::int64_t rows = logits.size() / classes;
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    throw std::invalid_argument("cross_entropy_logits expects " + std::to_string(rows) + " targets, got " +
                                std::to_string(targets.size()));
  }
  double loss = 0.0;
  std::vector<double> probs(logits.data.size());
  for (std::int64_t row = 0; row < rows; ++row) {
    const std::int64_t t = targets[static_cast<std::size_t>(row)];
    if (t < 0 || t >= classes) throw std::out_of_range("target " + std::to_string(t) + " out of range");
    const std::int64_t base = row * classes;
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < classes; ++c) m = std::max(m, logits.data[static_cast<std::size_t>(base + c)]);
    double sum = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      const auto idx = static_cast<std::size_t>(base + c);
      probs[idx] = std::exp(logits.data[idx] - m);
      sum += probs[idx];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t c = 0; c < classes; ++c) probs[static_cast<std::size_t>(base + c)] *= inv;
    loss -= std::log(probs[static_cast<std::size_t>(base + t)]);
  }
  loss /= static_cast<double>(rows);
  Tensor out = scalar_tensor(loss);
  const bool tracked = want_grad(tape, {&logits});
  finish(tape, out, tracked);
  if (tracked) {
    std::vector<std::int64_t> tgt(targets.begin(), targets.end());
    tape.push_op([ln = logits.node, on = out.node, probs = std::move(probs), tgt = std::move(tgt), rows, classes](Tape& t) {
      const double g = t.grad_buf(on)[0] / static_cast<double>(rows);
      auto& gl = t.grad_buf(ln);
      for (std::int64_t row = 0; row < rows; ++row) {
        const std::int64_t base = row * classes;
        for (std::int64_t c = 0; c < classes; ++c) {
          const auto idx = static_cast<std::size_t>(base + c);
          const double y = (c == tgt[static_cast<std::size_t>(row)]) ? 1.0 : 0.0;
          gl[idx] += (probs[idx] - y) * g;
        }
      }
    });
  }
  return out;
}

Tensor stack_scalars(Tape& tape, std::span<const Tensor> scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack_scalars of zero tensors");
  Tensor out{Shape{static_cast<std::int64_t>(scalars.size())}};
  bool any = false;
  std::vector<std::int32_t> nodes;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw std::invalid_argument("stack_scalars requires size-1 tensors");
    out.data[i] = scalars[i].data[0];
    nodes.push_back(scalars[i].node);
    any = any || scalars[i].node >= 0;
  }
  const bool tracked = tape.recording() && any;
  finish(tape, out, tracked);
  if (tracked) {
    tape.push_op([on = out.node, nodes](Tape& t) {
      const auto& go = t.grad_buf(on);
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i] >= 0) t.grad_buf(nodes[i])[0] += go[i];
      }
    });
  }
  return out;
}

}  // namespace g3dk
