#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/kernels.hpp"

// Reverse-mode tape over dense row-major arrays. The scalar type is a
// template parameter: training runs on float, gradient checking re-evaluates
// the same graph code on double. A tape and its tensors form a
// single-threaded unit; tensors are immutable once created and may be read
// from other threads.
namespace pseg {

enum class Op : uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Transpose,
  Reshape,
  Relu,
  Exp,
  Log,
  Sigmoid,
  Scale,
  ReduceSum,
  LogSumExp,
  SliceRows,
  ConcatRows,
  GatherRows,
  UpsampleBilinear,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Reshape: return "reshape";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::Scale: return "scale";
    case Op::ReduceSum: return "reduce_sum";
    case Op::LogSumExp: return "logsumexp";
    case Op::SliceRows: return "slice_rows";
    case Op::ConcatRows: return "concat_rows";
    case Op::GatherRows: return "gather_rows";
    case Op::UpsampleBilinear: return "upsample_bilinear";
  }
  return "?";
}

template <class T>
class TapeT;

template <class T>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  TapeT<T>* tape = nullptr;
  int32_t node = -1;
  bool requires_grad = false;

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  const T* ptr() const { return data->data(); }
  T at(int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
  T scalar() const {
    if (numel() != 1) fail(ErrCode::Shape, "expected a scalar, got " + shape_str(shape));
    return (*data)[0];
  }
  NdArray to_ndarray() const {
    NdArray a(shape);
    for (int64_t i = 0; i < numel(); ++i) a.v[static_cast<size_t>(i)] = static_cast<float>(at(i));
    return a;
  }
};

template <class T>
struct NodeT {
  Op op = Op::Leaf;
  int32_t a = -1, b = -1;
  Shape shape;                              // output shape
  std::shared_ptr<std::vector<T>> out;      // output values
  std::shared_ptr<std::vector<T>> va, vb;   // saved input values
  Shape sa, sb;                             // input shapes
  std::vector<int64_t> idx;                 // reduce axes / gather row indices
  int64_t i0 = 0, i1 = 0;                   // slice bounds, upscale factor
  double alpha = 0.0;                       // scale factor
  bool keepdims = false;
  bool requires_grad = false;
};

template <class T>
struct GradTable {
  std::vector<std::vector<T>> by_node;

  bool reached(const TensorT<T>& t) const {
    return t.node >= 0 && t.node < static_cast<int32_t>(by_node.size()) &&
           !by_node[static_cast<size_t>(t.node)].empty();
  }
  // Gradient of the checked loss w.r.t. `t`; zeros when the tensor was not
  // reached (or does not require grad).
  std::vector<T> grad(const TensorT<T>& t) const {
    if (reached(t)) return by_node[static_cast<size_t>(t.node)];
    return std::vector<T>(static_cast<size_t>(t.numel()), T(0));
  }
};

template <class T>
class TapeT {
 public:
  TensorT<T> leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != numel(shape))
      fail(ErrCode::Shape, "leaf data length does not match shape " + shape_str(shape));
    NodeT<T> n;
    n.op = Op::Leaf;
    n.shape = shape;
    n.out = std::make_shared<std::vector<T>>(std::move(values));
    n.requires_grad = requires_grad;
    return push(std::move(n), shape);
  }

  TensorT<T> leaf(const NdArray& a, bool requires_grad) {
    std::vector<T> values(a.v.begin(), a.v.end());
    return leaf(a.shape, std::move(values), requires_grad);
  }

  TensorT<T> constant(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), false); }
  TensorT<T> constant(const NdArray& a) { return leaf(a, false); }
  TensorT<T> full(Shape shape, T value) {
    return leaf(shape, std::vector<T>(static_cast<size_t>(numel(shape)), value), false);
  }
  TensorT<T> scalar_const(T value) { return leaf(Shape{}, std::vector<T>{value}, false); }

  size_t size() const { return nodes_.size(); }
  const NodeT<T>& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }

  // Order-sensitive hash of every ReLU sign decision taken on this tape.
  // Central finite differences are only valid while the activation pattern
  // stays constant across the probe interval; the gradient checker compares
  // signatures of the two endpoint evaluations to detect kink crossings.
  uint64_t activation_signature() const { return activation_signature_; }
  void fold_activation(uint64_t bits) {
    activation_signature_ = (activation_signature_ ^ bits) * 1099511628211ULL;
  }

  // Reverse sweep from `loss` (a scalar on this tape); visits each node once.
  GradTable<T> backward(const TensorT<T>& loss) const;

  // internal: used by the op free functions
  TensorT<T> emit(NodeT<T> n) {
    if (!kern::all_finite(n.out->data(), static_cast<int64_t>(n.out->size())))
      fail(ErrCode::Numeric, std::string("non-finite value out of ") + op_name(n.op));
    Shape s = n.shape;
    return push(std::move(n), std::move(s));
  }

 private:
  TensorT<T> push(NodeT<T> n, Shape shape) {
    if (n.op == Op::Leaf && !kern::all_finite(n.out->data(), static_cast<int64_t>(n.out->size())))
      fail(ErrCode::Numeric, "non-finite value in leaf");
    nodes_.push_back(std::move(n));
    TensorT<T> t;
    t.shape = std::move(shape);
    t.data = nodes_.back().out;
    t.tape = this;
    t.node = static_cast<int32_t>(nodes_.size() - 1);
    t.requires_grad = nodes_.back().requires_grad;
    return t;
  }

  std::vector<NodeT<T>> nodes_;
  uint64_t activation_signature_ = 1469598103934665603ULL;
};

namespace detail {

template <class T>
TapeT<T>* same_tape(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    fail(ErrCode::Shape, "operands live on different tapes");
  return a.tape;
}

template <class T>
std::shared_ptr<std::vector<T>> alloc(int64_t n) {
  return std::make_shared<std::vector<T>>(static_cast<size_t>(n), T(0));
}

// Elementwise binary with numpy broadcasting.
template <class T, class F>
TensorT<T> binary(Op op, const TensorT<T>& a, const TensorT<T>& b, F f) {
  TapeT<T>* tape = same_tape(a, b);
  auto plan = kern::make_bcast_plan(a.shape, b.shape);
  NodeT<T> n;
  n.op = op;
  n.a = a.node;
  n.b = b.node;
  n.shape = plan.out_shape;
  n.sa = a.shape;
  n.sb = b.shape;
  n.va = a.data;
  n.vb = b.data;
  n.out = alloc<T>(plan.n);
  kern::broadcast_binary(plan, a.ptr(), b.ptr(), n.out->data(), f);
  n.requires_grad = a.requires_grad || b.requires_grad;
  return tape->emit(std::move(n));
}

template <class T, class F>
TensorT<T> unary(Op op, const TensorT<T>& a, F f, bool save_input) {
  NodeT<T> n;
  n.op = op;
  n.a = a.node;
  n.shape = a.shape;
  n.sa = a.shape;
  if (save_input) n.va = a.data;
  n.out = alloc<T>(a.numel());
  const T* in = a.ptr();
  T* out = n.out->data();
  kern::for_each(a.numel(), [&](int64_t i) { out[i] = f(in[i]); });
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary(Op::Add, a, b, [](T x, T y) { return x + y; });
}
template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary(Op::Sub, a, b, [](T x, T y) { return x - y; });
}
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary(Op::Mul, a, b, [](T x, T y) { return x * y; });
}
template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary(Op::Div, a, b, [](T x, T y) { return x / y; });
}

template <class T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <class T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <class T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  TapeT<T>* tape = detail::same_tape(a, b);
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    fail(ErrCode::Shape, "matmul needs (m,k)x(k,n), got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  NodeT<T> node;
  node.op = Op::MatMul;
  node.a = a.node;
  node.b = b.node;
  node.shape = {m, n};
  node.sa = a.shape;
  node.sb = b.shape;
  node.va = a.data;
  node.vb = b.data;
  node.out = detail::alloc<T>(m * n);
  kern::matmul(a.ptr(), b.ptr(), node.out->data(), m, k, n);
  node.requires_grad = a.requires_grad || b.requires_grad;
  return tape->emit(std::move(node));
}

template <class T>
TensorT<T> transpose(const TensorT<T>& a) {
  if (a.shape.size() != 2) fail(ErrCode::Shape, "transpose needs a matrix, got " + shape_str(a.shape));
  const int64_t r = a.shape[0], c = a.shape[1];
  NodeT<T> n;
  n.op = Op::Transpose;
  n.a = a.node;
  n.shape = {c, r};
  n.sa = a.shape;
  n.out = detail::alloc<T>(r * c);
  const T* in = a.ptr();
  T* out = n.out->data();
  kern::for_each(r * c, [&](int64_t i) {
    const int64_t row = i / c, col = i % c;
    out[col * r + row] = in[i];
  });
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    fail(ErrCode::Shape, "reshape " + shape_str(a.shape) + " -> " + shape_str(shape) + " changes element count");
  NodeT<T> n;
  n.op = Op::Reshape;
  n.a = a.node;
  n.shape = shape;
  n.sa = a.shape;
  n.out = a.data;  // views share storage
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
  auto out = detail::unary(Op::Relu, a, [](T x) { return x > T(0) ? x : T(0); }, true);
  uint64_t bits = 0;
  const T* in = a.ptr();
  for (int64_t i = 0; i < a.numel(); ++i)
    bits = (bits << 1 | static_cast<uint64_t>(in[i] > T(0))) ^ (bits >> 61);
  a.tape->fold_activation(bits);
  return out;
}
template <class T>
TensorT<T> exp(const TensorT<T>& a) {
  return detail::unary(Op::Exp, a, [](T x) { return std::exp(x); }, false);
}
template <class T>
TensorT<T> log(const TensorT<T>& a) {
  return detail::unary(Op::Log, a, [](T x) { return std::log(x); }, true);
}
template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return detail::unary(
      Op::Sigmoid, a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      false);
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, double alpha) {
  NodeT<T> n;
  n.op = Op::Scale;
  n.a = a.node;
  n.shape = a.shape;
  n.sa = a.shape;
  n.alpha = alpha;
  n.out = detail::alloc<T>(a.numel());
  const T* in = a.ptr();
  T* out = n.out->data();
  const T f = static_cast<T>(alpha);
  kern::for_each(a.numel(), [&](int64_t i) { out[i] = in[i] * f; });
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

// Sum over `axes` (negative axes count from the end). keepdims keeps the
// reduced extents as 1.
template <class T>
TensorT<T> reduce_sum(const TensorT<T>& a, std::vector<int64_t> axes, bool keepdims = false) {
  const int64_t rank = static_cast<int64_t>(a.shape.size());
  for (auto& ax : axes) {
    if (ax < 0) ax += rank;
    if (ax < 0 || ax >= rank) fail(ErrCode::Shape, "reduce axis out of range for " + shape_str(a.shape));
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  Shape aligned = a.shape;  // same rank, 1 on reduced dims
  for (int64_t ax : axes) aligned[static_cast<size_t>(ax)] = 1;
  Shape out_shape;
  if (keepdims) {
    out_shape = aligned;
  } else {
    for (int64_t i = 0; i < rank; ++i)
      if (!std::binary_search(axes.begin(), axes.end(), i)) out_shape.push_back(a.shape[static_cast<size_t>(i)]);
  }
  NodeT<T> n;
  n.op = Op::ReduceSum;
  n.a = a.node;
  n.shape = out_shape;
  n.sa = a.shape;
  n.idx = axes;
  n.keepdims = keepdims;
  n.out = detail::alloc<T>(numel(aligned));
  kern::reduce_to(a.ptr(), a.shape, n.out->data(), aligned);
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& a) {
  std::vector<int64_t> axes(a.shape.size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int64_t>(i);
  return reduce_sum(a, axes, false);
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Max-shifted log-sum-exp over the last axis, keepdims semantics
// (out shape = in shape with last extent 1).
template <class T>
TensorT<T> logsumexp_last(const TensorT<T>& a) {
  if (a.shape.empty()) fail(ErrCode::Shape, "logsumexp needs rank >= 1");
  const int64_t cols = a.shape.back();
  const int64_t rows = a.numel() / cols;
  Shape out_shape = a.shape;
  out_shape.back() = 1;
  NodeT<T> n;
  n.op = Op::LogSumExp;
  n.a = a.node;
  n.shape = out_shape;
  n.sa = a.shape;
  n.va = a.data;
  n.out = detail::alloc<T>(rows);
  kern::lse_rows(a.ptr(), n.out->data(), rows, cols);
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

// softmax over the last axis: exp(x - logsumexp(x)); rows sum to one.
template <class T>
TensorT<T> softmax_last(const TensorT<T>& a) {
  return exp(sub(a, logsumexp_last(a)));
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& a, int64_t begin, int64_t end) {
  if (a.shape.size() != 2) fail(ErrCode::Shape, "slice_rows needs a matrix");
  const int64_t r = a.shape[0], c = a.shape[1];
  if (begin < 0 || end > r || begin >= end) fail(ErrCode::Shape, "slice_rows bounds out of range");
  NodeT<T> n;
  n.op = Op::SliceRows;
  n.a = a.node;
  n.shape = {end - begin, c};
  n.sa = a.shape;
  n.i0 = begin;
  n.i1 = end;
  n.out = detail::alloc<T>((end - begin) * c);
  const T* in = a.ptr();
  T* out = n.out->data();
  kern::for_each((end - begin) * c, [&](int64_t i) { out[i] = in[begin * c + i]; });
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

template <class T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
  TapeT<T>* tape = detail::same_tape(a, b);
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1])
    fail(ErrCode::Shape, "concat_rows needs matrices with equal column counts");
  const int64_t ra = a.shape[0], rb = b.shape[0], c = a.shape[1];
  NodeT<T> n;
  n.op = Op::ConcatRows;
  n.a = a.node;
  n.b = b.node;
  n.shape = {ra + rb, c};
  n.sa = a.shape;
  n.sb = b.shape;
  n.out = detail::alloc<T>((ra + rb) * c);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* out = n.out->data();
  kern::for_each(ra * c, [&](int64_t i) { out[i] = pa[i]; });
  kern::for_each(rb * c, [&](int64_t i) { out[ra * c + i] = pb[i]; });
  n.requires_grad = a.requires_grad || b.requires_grad;
  return tape->emit(std::move(n));
}

// out[j, :] = a[indices[j], :]
template <class T>
TensorT<T> gather_rows(const TensorT<T>& a, std::vector<int64_t> indices) {
  if (a.shape.size() != 2) fail(ErrCode::Shape, "gather_rows needs a matrix");
  const int64_t r = a.shape[0], c = a.shape[1];
  for (int64_t ix : indices)
    if (ix < 0 || ix >= r) fail(ErrCode::Shape, "gather_rows index out of range");
  const int64_t k = static_cast<int64_t>(indices.size());
  NodeT<T> n;
  n.op = Op::GatherRows;
  n.a = a.node;
  n.shape = {k, c};
  n.sa = a.shape;
  n.idx = indices;
  n.out = detail::alloc<T>(k * c);
  const T* in = a.ptr();
  T* out = n.out->data();
  kern::for_each(k * c, [&](int64_t i) {
    const int64_t row = i / c, col = i % c;
    out[i] = in[indices[static_cast<size_t>(row)] * c + col];
  });
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

// (h, w, d) -> (u*h, u*w, d) bilinear.
template <class T>
TensorT<T> upsample_bilinear(const TensorT<T>& a, int64_t factor) {
  if (a.shape.size() != 3) fail(ErrCode::Shape, "upsample needs (h,w,d)");
  if (factor < 1) fail(ErrCode::Config, "upsample factor must be >= 1");
  const int64_t h = a.shape[0], w = a.shape[1], d = a.shape[2];
  NodeT<T> n;
  n.op = Op::UpsampleBilinear;
  n.a = a.node;
  n.shape = {h * factor, w * factor, d};
  n.sa = a.shape;
  n.i0 = factor;
  n.out = detail::alloc<T>(h * factor * w * factor * d);
  kern::bilinear_up(a.ptr(), n.out->data(), h, w, d, factor);
  n.requires_grad = a.requires_grad;
  return a.tape->emit(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

// tmp[i] = f(gout[i], a[ia], b[ib]) over the broadcast output index space.
template <class T, class F>
void backward_binary_map(const kern::BcastPlan& p, const T* gout, const T* a, const T* b, T* tmp, F f) {
  const size_t r = p.out_shape.size();
  const auto od = kern::row_major_strides(p.out_shape);
  kern::for_each(p.n, [&](int64_t i) {
    int64_t ia = 0, ib = 0;
    for (size_t dim = 0; dim < r; ++dim) {
      const int64_t coord = (i / od[dim]) % p.out_shape[dim];
      ia += coord * p.a_stride[dim];
      ib += coord * p.b_stride[dim];
    }
    tmp[i] = f(gout[i], a[ia], b[ib]);
  });
}

// Reduce `src` (broadcast output shape `os`) onto an operand with shape `dst_shape`,
// accumulating into `gin`.
template <class T>
void reduce_into(const std::vector<T>& src, const Shape& os, const Shape& dst_shape, std::vector<T>& gin) {
  // align dst_shape to the rank of os with leading 1s
  Shape aligned(os.size(), 1);
  const size_t off = os.size() - dst_shape.size();
  for (size_t i = 0; i < dst_shape.size(); ++i) aligned[off + i] = dst_shape[i];
  std::vector<T> scratch(static_cast<size_t>(numel(aligned)), T(0));
  kern::reduce_to(src.data(), os, scratch.data(), aligned);
  for (size_t i = 0; i < gin.size(); ++i) gin[i] += scratch[i];
}

}  // namespace detail

template <class T>
GradTable<T> TapeT<T>::backward(const TensorT<T>& loss) const {
  if (loss.tape != this) fail(ErrCode::Shape, "loss tensor is not on this tape");
  if (loss.numel() != 1) fail(ErrCode::Shape, "loss must be scalar, got " + shape_str(loss.shape));
  GradTable<T> table;
  table.by_node.resize(nodes_.size());
  auto& g = table.by_node;
  auto ensure = [&](int32_t id, int64_t n) -> std::vector<T>& {
    auto& v = g[static_cast<size_t>(id)];
    if (v.empty()) v.assign(static_cast<size_t>(n), T(0));
    return v;
  };
  ensure(loss.node, 1)[0] = T(1);

  for (int32_t id = loss.node; id >= 0; --id) {
    const NodeT<T>& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || n.op == Op::Leaf) continue;
    const auto& gout = g[static_cast<size_t>(id)];
    if (gout.empty()) continue;
    const bool need_a = n.a >= 0 && nodes_[static_cast<size_t>(n.a)].requires_grad;
    const bool need_b = n.b >= 0 && nodes_[static_cast<size_t>(n.b)].requires_grad;
    if (!need_a && !need_b) continue;

    switch (n.op) {
      case Op::Add: {
        if (need_a) detail::reduce_into(gout, n.shape, n.sa, ensure(n.a, numel(n.sa)));
        if (need_b) detail::reduce_into(gout, n.shape, n.sb, ensure(n.b, numel(n.sb)));
        break;
      }
      case Op::Sub: {
        if (need_a) detail::reduce_into(gout, n.shape, n.sa, ensure(n.a, numel(n.sa)));
        if (need_b) {
          std::vector<T> neg(gout.size());
          kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { neg[i] = -gout[i]; });
          detail::reduce_into(neg, n.shape, n.sb, ensure(n.b, numel(n.sb)));
        }
        break;
      }
      case Op::Mul: {
        auto plan = kern::make_bcast_plan(n.sa, n.sb);
        std::vector<T> tmp(gout.size());
        if (need_a) {
          detail::backward_binary_map(plan, gout.data(), n.va->data(), n.vb->data(), tmp.data(),
                                      [](T go, T, T y) { return go * y; });
          detail::reduce_into(tmp, n.shape, n.sa, ensure(n.a, numel(n.sa)));
        }
        if (need_b) {
          detail::backward_binary_map(plan, gout.data(), n.va->data(), n.vb->data(), tmp.data(),
                                      [](T go, T x, T) { return go * x; });
          detail::reduce_into(tmp, n.shape, n.sb, ensure(n.b, numel(n.sb)));
        }
        break;
      }
      case Op::Div: {
        auto plan = kern::make_bcast_plan(n.sa, n.sb);
        std::vector<T> tmp(gout.size());
        if (need_a) {
          detail::backward_binary_map(plan, gout.data(), n.va->data(), n.vb->data(), tmp.data(),
                                      [](T go, T, T y) { return go / y; });
          detail::reduce_into(tmp, n.shape, n.sa, ensure(n.a, numel(n.sa)));
        }
        if (need_b) {
          detail::backward_binary_map(plan, gout.data(), n.va->data(), n.vb->data(), tmp.data(),
                                      [](T go, T x, T y) { return -go * x / (y * y); });
          detail::reduce_into(tmp, n.shape, n.sb, ensure(n.b, numel(n.sb)));
        }
        break;
      }
      case Op::MatMul: {
        const int64_t m = n.sa[0], k = n.sa[1], cols = n.sb[1];
        if (need_a) {  // dA += G * B^T
          auto& ga = ensure(n.a, m * k);
          std::vector<T> tmp(static_cast<size_t>(m * k));
          kern::matmul_nt(gout.data(), n.vb->data(), tmp.data(), m, cols, k);
          kern::for_each(m * k, [&](int64_t i) { ga[i] += tmp[i]; });
        }
        if (need_b) {  // dB += A^T * G
          auto& gb = ensure(n.b, k * cols);
          std::vector<T> tmp(static_cast<size_t>(k * cols));
          kern::matmul_tn(n.va->data(), gout.data(), tmp.data(), k, m, cols);
          kern::for_each(k * cols, [&](int64_t i) { gb[i] += tmp[i]; });
        }
        break;
      }
      case Op::Transpose: {
        const int64_t r = n.sa[0], c = n.sa[1];
        auto& ga = ensure(n.a, r * c);
        kern::for_each(r * c, [&](int64_t i) {
          const int64_t row = i / c, col = i % c;
          ga[i] += gout[col * r + row];
        });
        break;
      }
      case Op::Reshape: {
        auto& ga = ensure(n.a, numel(n.sa));
        kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { ga[i] += gout[i]; });
        break;
      }
      case Op::Relu: {
        auto& ga = ensure(n.a, numel(n.sa));
        const T* in = n.va->data();
        kern::for_each(static_cast<int64_t>(gout.size()),
                       [&](int64_t i) { ga[i] += in[i] > T(0) ? gout[i] : T(0); });
        break;
      }
      case Op::Exp: {
        auto& ga = ensure(n.a, numel(n.sa));
        const T* out = n.out->data();
        kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { ga[i] += gout[i] * out[i]; });
        break;
      }
      case Op::Log: {
        auto& ga = ensure(n.a, numel(n.sa));
        const T* in = n.va->data();
        kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { ga[i] += gout[i] / in[i]; });
        break;
      }
      case Op::Sigmoid: {
        auto& ga = ensure(n.a, numel(n.sa));
        const T* out = n.out->data();
        kern::for_each(static_cast<int64_t>(gout.size()),
                       [&](int64_t i) { ga[i] += gout[i] * out[i] * (T(1) - out[i]); });
        break;
      }
      case Op::Scale: {
        auto& ga = ensure(n.a, numel(n.sa));
        const T alpha = static_cast<T>(n.alpha);
        kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { ga[i] += gout[i] * alpha; });
        break;
      }
      case Op::ReduceSum: {
        Shape aligned = n.sa;
        for (int64_t ax : n.idx) aligned[static_cast<size_t>(ax)] = 1;
        auto plan = kern::make_bcast_plan(aligned, n.sa);  // out shape == sa
        auto& ga = ensure(n.a, numel(n.sa));
        const auto od = kern::row_major_strides(plan.out_shape);
        kern::for_each(plan.n, [&](int64_t i) {
          int64_t ia = 0;
          for (size_t dim = 0; dim < plan.out_shape.size(); ++dim)
            ia += ((i / od[dim]) % plan.out_shape[dim]) * plan.a_stride[dim];
          ga[i] += gout[static_cast<size_t>(ia)];
        });
        break;
      }
      case Op::LogSumExp: {
        const int64_t cols = n.sa.back();
        const int64_t rows = numel(n.sa) / cols;
        auto& ga = ensure(n.a, numel(n.sa));
        const T* in = n.va->data();
        const T* out = n.out->data();
        kern::for_each(rows * cols, [&](int64_t i) {
          const int64_t r = i / cols;
          ga[i] += gout[static_cast<size_t>(r)] * std::exp(in[i] - out[r]);
        });
        break;
      }
      case Op::SliceRows: {
        const int64_t c = n.sa[1];
        auto& ga = ensure(n.a, numel(n.sa));
        kern::for_each(static_cast<int64_t>(gout.size()), [&](int64_t i) { ga[n.i0 * c + i] += gout[i]; });
        break;
      }
      case Op::ConcatRows: {
        const int64_t na = numel(n.sa);
        if (need_a) {
          auto& ga = ensure(n.a, na);
          kern::for_each(na, [&](int64_t i) { ga[i] += gout[i]; });
        }
        if (need_b) {
          auto& gb = ensure(n.b, numel(n.sb));
          const int64_t nb = numel(n.sb);
          kern::for_each(nb, [&](int64_t i) { gb[i] += gout[na + i]; });
        }
        break;
      }
      case Op::GatherRows: {
        const int64_t c = n.sa[1];
        auto& ga = ensure(n.a, numel(n.sa));
        // serial scatter keeps the accumulation order fixed
        for (size_t j = 0; j < n.idx.size(); ++j)
          for (int64_t col = 0; col < c; ++col)
            ga[static_cast<size_t>(n.idx[j] * c + col)] += gout[j * static_cast<size_t>(c) + static_cast<size_t>(col)];
        break;
      }
      case Op::UpsampleBilinear: {
        const int64_t h = n.sa[0], w = n.sa[1], d = n.sa[2];
        auto& ga = ensure(n.a, h * w * d);
        std::vector<T> tmp(static_cast<size_t>(h * w * d));
        kern::bilinear_up_back(gout.data(), tmp.data(), h, w, d, n.i0);
        kern::for_each(h * w * d, [&](int64_t i) { ga[i] += tmp[i]; });
        break;
      }
      case Op::Leaf:
        break;
    }
  }

  // keep only gradients of requires_grad leaves and the intermediate nodes
  // that were actually reached; callers query through GradTable::grad.
  return table;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace pseg
