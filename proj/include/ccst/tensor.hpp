#pragma once

// Dense tensors with a reverse-mode tape. The op set is deliberately small:
// exactly what the compression network and its loss need.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ccst/common.hpp"
#include "ccst/error.hpp"

namespace ccst::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) { validate(); }
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) { validate(); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // Last axis is the feature axis; everything before it is flattened into rows.
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate() const {
    if (shape.empty() || shape.size() > 3) throw ShapeError("tensor rank must be 1..3, got " + std::to_string(shape.size()));
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape));
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_string(shape));
  }
};

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  // Called during backward with the node's own id; accumulates into the
  // gradients of the node's inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, {}, false, "constant"); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), {}, {}, true, "variable"); }

  /// Records an op output. The node requires grad iff any input does; the
  /// value is checked for NaN/Inf. `op` must outlive the tape (a literal).
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, std::string_view op) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_[in].requires_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(fn) : BackwardFn{}, needs, op);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  std::string_view op(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer, zero-initialised on first touch.
  std::vector<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad;
  }

  /// Reverse-mode sweep from a scalar node, visiting nodes in exact reverse
  /// recording order.
  void backward(Var<T> loss) {
    if (loss.value().numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad(loss.id())[0] = T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  /// Gradient of `v` after backward; zeros when `v` was not on any path to the loss.
  Tensor<T> gradient(Var<T> v) const {
    const auto& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor<T>(n.value.shape, T(0));
    return Tensor<T>(n.value.shape, n.grad);
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::vector<T> grad;
    bool requires_grad = false;
    std::string_view op;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs, std::string_view op) {
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> view(value.data.data(),
                                                                     static_cast<Eigen::Index>(value.data.size()));
    // inf * 0 and nan * 0 are nan, so the packet-wise sum is finite iff every entry is.
    if (!std::isfinite((view * T(0)).sum())) throw NumericError("non-finite value produced by " + std::string(op));
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), {}, needs, op});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <class T>
MatMap<T> as_matrix(std::vector<T>& buf, std::size_t rows, std::size_t cols) {
  return MatMap<T>(buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are flattened into rows.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (bv.rank() != 2 || av.cols() != bv.shape[0])
    throw ShapeError("matmul: shape mismatch " + shape_string(av.shape) + " x " + shape_string(bv.shape));
  Shape out_shape = av.shape;
  out_shape.back() = bv.shape[1];
  Tensor<T> out(out_shape);
  detail::as_matrix(out.data, av.rows(), bv.shape[1]).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& tp, std::size_t self) {
        const auto& A = tp.value(ia);
        const auto& B = tp.value(ib);
        const auto dC = detail::ConstMatMap<T>(tp.grad(self).data(), static_cast<Eigen::Index>(A.rows()),
                                               static_cast<Eigen::Index>(B.shape[1]));
        if (tp.requires_grad(ia))
          detail::as_matrix(tp.grad(ia), A.rows(), A.cols()).noalias() += dC * detail::as_matrix(B).transpose();
        if (tp.requires_grad(ib))
          detail::as_matrix(tp.grad(ib), B.shape[0], B.shape[1]).noalias() += detail::as_matrix(A).transpose() * dC;
      },
      "matmul");
}

/// Per-sample product of rank-3 operands: a[B,t,k] x b[B,k,n], or with
/// `transpose_b` a[B,t,k] x b[B,n,k]^T.
template <class T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.shape[0] != bv.shape[0] ||
      av.shape[2] != (transpose_b ? bv.shape[2] : bv.shape[1]))
    throw ShapeError("batched_matmul: shape mismatch " + shape_string(av.shape) + " x " + shape_string(bv.shape) +
                     (transpose_b ? "^T" : ""));
  const std::size_t B = av.shape[0], t = av.shape[1], k = av.shape[2];
  const std::size_t n = transpose_b ? bv.shape[1] : bv.shape[2];
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  const auto ti = static_cast<Eigen::Index>(t), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
  // Stored operand b is [n x k] when transposed, [k x n] otherwise.
  const Eigen::Index br = transpose_b ? ni : ki, bc = transpose_b ? ki : ni;
  Tensor<T> out(Shape{B, t, n});
  for (std::size_t s = 0; s < B; ++s) {
    CMap A(av.data.data() + s * t * k, ti, ki);
    CMap Bm(bv.data.data() + s * k * n, br, bc);
    MMap C(out.data.data() + s * t * n, ti, ni);
    if (transpose_b)
      C.noalias() = A.lazyProduct(Bm.transpose());
    else
      C.noalias() = A.lazyProduct(Bm);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib, B, t, k, n, ti, ki, ni, br, bc, transpose_b](Tape<T>& tp, std::size_t self) {
        const auto& dCv = tp.grad(self);
        const auto& Av = tp.value(ia).data;
        const auto& Bv = tp.value(ib).data;
        const bool need_a = tp.requires_grad(ia), need_b = tp.requires_grad(ib);
        T* dAv = need_a ? tp.grad(ia).data() : nullptr;
        T* dBv = need_b ? tp.grad(ib).data() : nullptr;
        for (std::size_t s = 0; s < B; ++s) {
          CMap dC(dCv.data() + s * t * n, ti, ni);
          if (need_a) {
            CMap Bm(Bv.data() + s * k * n, br, bc);
            MMap dA(dAv + s * t * k, ti, ki);
            if (transpose_b)
              dA.noalias() += dC.lazyProduct(Bm);
            else
              dA.noalias() += dC.lazyProduct(Bm.transpose());
          }
          if (need_b) {
            CMap A(Av.data() + s * t * k, ti, ki);
            MMap dB(dBv + s * k * n, br, bc);
            if (transpose_b)
              dB.noalias() += dC.transpose().lazyProduct(A);
            else
              dB.noalias() += A.transpose().lazyProduct(dC);
          }
        }
      },
      "batched_matmul");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        for (auto in : {ia, ib}) {
          if (!tp.requires_grad(in)) continue;
          auto& d = tp.grad(in);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      },
      "add");
}

/// Adds a rank-1 bias of width cols(a) to every row of `a`.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (bv.rank() != 1 || bv.shape[0] != av.cols())
    throw ShapeError("add_bias: shape mismatch " + shape_string(av.shape) + " + " + shape_string(bv.shape));
  Tensor<T> out = av;
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += bv.data[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record(
      std::move(out), {ia, ib},
      [ia, ib, rows, cols](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) {
          auto& d = tp.grad(ia);
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
        if (tp.requires_grad(ib)) {
          auto& d = tp.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) d[c] += g[r * cols + c];
        }
      },
      "add_bias");
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= c;
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {ia},
      [ia, c](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& d = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
      },
      "scale");
}

/// Sum of all entries, as a shape-[1] scalar.
template <class T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (const T& v : a.value().data) acc += v;
  const std::size_t ia = a.id();
  return a.tape().record(
      Tensor<T>(Shape{1}, std::vector<T>{acc}), {ia},
      [ia](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(self)[0];
        for (auto& d : tp.grad(ia)) d += g;
      },
      "sum");
}

/// Stacks token blocks along axis 1. Rank-2 operands [B,d] count as one
/// token; rank-3 operands [B,t,d] contribute t tokens.
template <class T>
Var<T> concat_tokens(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_tokens: no operands");
  const std::size_t B = parts[0].shape()[0];
  const std::size_t d = parts[0].value().cols();
  std::vector<std::size_t> tokens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if ((s.size() != 2 && s.size() != 3) || s[0] != B || s.back() != d)
      throw ShapeError("concat_tokens: shape mismatch " + shape_string(parts[0].shape()) + " vs " + shape_string(s));
    tokens.push_back(s.size() == 2 ? 1 : s[1]);
    total += tokens.back();
  }
  Tensor<T> out(Shape{B, total, d});
  std::vector<std::size_t> ids;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = parts[p].value().data;
    const std::size_t t = tokens[p];
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(b * t * d), t * d,
                  out.data.begin() + static_cast<std::ptrdiff_t>((b * total + offset) * d));
    offset += t;
    ids.push_back(parts[p].id());
  }
  return parts[0].tape().record(
      std::move(out), ids,
      [ids, tokens, B, total, d](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::size_t t = tokens[p];
          if (tp.requires_grad(ids[p])) {
            auto& dst = tp.grad(ids[p]);
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t i = 0; i < t * d; ++i) dst[b * t * d + i] += g[(b * total + offset) * d + i];
          }
          offset += t;
        }
      },
      "concat_tokens");
}

template <class T>
Var<T> concat_tokens(std::initializer_list<Var<T>> parts) {
  return concat_tokens(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// Tokens [begin, end) of a [B,T,d] tensor, as [B,end-begin,d].
template <class T>
Var<T> slice_tokens(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  if (s.size() != 3 || begin >= end || end > s[1])
    throw ShapeError("slice_tokens: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_string(s));
  const std::size_t B = s[0], total = s[1], d = s[2], t = end - begin;
  Tensor<T> out(Shape{B, t, d});
  const auto& src = x.value().data;
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * total + begin) * d), t * d,
                out.data.begin() + static_cast<std::ptrdiff_t>(b * t * d));
  const std::size_t ix = x.id();
  return x.tape().record(
      std::move(out), {ix},
      [ix, B, total, d, t, begin](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& dst = tp.grad(ix);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < t * d; ++i) dst[(b * total + begin) * d + i] += g[b * t * d + i];
      },
      "slice_tokens");
}

/// Token `index` of a [B,T,d] tensor, as [B,d].
template <class T>
Var<T> slice_token(Var<T> x, std::size_t index) {
  const auto& s = x.shape();
  if (s.size() != 3 || index >= s[1])
    throw ShapeError("slice_token: index " + std::to_string(index) + " invalid for shape " + shape_string(s));
  const std::size_t B = s[0], total = s[1], d = s[2];
  Tensor<T> out(Shape{B, d});
  const auto& src = x.value().data;
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * total + index) * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(b * d));
  const std::size_t ix = x.id();
  return x.tape().record(
      std::move(out), {ix},
      [ix, B, total, d, index](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& dst = tp.grad(ix);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < d; ++i) dst[(b * total + index) * d + i] += g[b * d + i];
      },
      "slice_token");
}

/// Concatenates along the last axis; all leading axes must agree.
template <class T>
Var<T> concat_features(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_features: no operands");
  Shape out_shape = parts[0].shape();
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != out_shape.size() || !std::equal(s.begin(), s.end() - 1, out_shape.begin()))
      throw ShapeError("concat_features: shape mismatch " + shape_string(out_shape) + " vs " + shape_string(s));
    widths.push_back(s.back());
    ids.push_back(p.id());
    total += s.back();
  }
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = parts[p].value().data;
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.data.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += w;
  }
  return parts[0].tape().record(
      std::move(out), ids,
      [ids, widths, rows, total](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::size_t w = widths[p];
          if (tp.requires_grad(ids[p])) {
            auto& dst = tp.grad(ids[p]);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < w; ++c) dst[r * w + c] += g[r * total + offset + c];
          }
          offset += w;
        }
      },
      "concat_features");
}

/// max(0, v); the subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {ia},
      [ia](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& x = tp.value(ia).data;
        auto& d = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > T(0)) d[i] += g[i];
      },
      "relu");
}

/// Softmax over the last axis, with max subtraction.
template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tensor<T> out = a.value();
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T total = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  const std::size_t ia = a.id();
  return a.tape().record(
      std::move(out), {ia},
      [ia, rows, cols](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& y = tp.value(self).data;
        auto& d = tp.grad(ia);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = T(0);
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
      },
      "softmax_rows");
}

enum class Mode { train, infer };

/// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::size_t features = 1)
      : running_mean(Shape{features}, T(0)), running_var(Shape{features}, T(1)) {}
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  bool update_running_stats = true;  // train mode only
};

/// Per-feature normalisation over all rows of `x` followed by the affine
/// gamma/beta. Train mode uses the biased batch variance and folds the
/// unbiased one into the running estimate.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Mode mode,
                 const BatchNormOptions& opt = {}) {
  const auto& xv = x.value();
  const std::size_t N = xv.rows(), F = xv.cols();
  for (const Tensor<T>* p : {&gamma.value(), &beta.value(), static_cast<const Tensor<T>*>(&stats.running_mean),
                              static_cast<const Tensor<T>*>(&stats.running_var)})
    if (p->rank() != 1 || p->shape[0] != F)
      throw ShapeError("batchnorm: parameter shape " + shape_string(p->shape) + " does not match features of " +
                       shape_string(xv.shape));
  if (mode == Mode::train && N < 2)
    throw ShapeError("batchnorm: train mode needs at least 2 rows, got " + std::to_string(N));

  std::vector<T> mean(F, T(0)), inv_std(F);
  Tensor<T> xhat(xv.shape);
  if (mode == Mode::train) {
    std::vector<T> var(F, T(0));
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < F; ++c) mean[c] += xv.data[r * F + c];
    for (auto& m : mean) m /= static_cast<T>(N);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t c = 0; c < F; ++c) {
        const T dlt = xv.data[r * F + c] - mean[c];
        var[c] += dlt * dlt;
      }
    for (std::size_t c = 0; c < F; ++c) {
      var[c] /= static_cast<T>(N);
      inv_std[c] = T(1) / std::sqrt(var[c] + static_cast<T>(opt.eps));
    }
    if (opt.update_running_stats) {
      const T m = static_cast<T>(opt.momentum);
      for (std::size_t c = 0; c < F; ++c) {
        stats.running_mean.data[c] = (T(1) - m) * stats.running_mean.data[c] + m * mean[c];
        const T unbiased = var[c] * static_cast<T>(N) / static_cast<T>(N - 1);
        stats.running_var.data[c] = (T(1) - m) * stats.running_var.data[c] + m * unbiased;
      }
    }
  } else {
    for (std::size_t c = 0; c < F; ++c) {
      mean[c] = stats.running_mean.data[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var.data[c] + static_cast<T>(opt.eps));
    }
  }
  Tensor<T> out(xv.shape);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < F; ++c) {
      const T h = (xv.data[r * F + c] - mean[c]) * inv_std[c];
      xhat.data[r * F + c] = h;
      out.data[r * F + c] = gv[c] * h + bv[c];
    }

  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool batch_stats = mode == Mode::train;
  return x.tape().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, N, F, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tp,
                                                                                             std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ig)) {
          auto& dg = tp.grad(ig);
          for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < F; ++c) dg[c] += g[r * F + c] * xhat.data[r * F + c];
        }
        if (tp.requires_grad(ib)) {
          auto& db = tp.grad(ib);
          for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < F; ++c) db[c] += g[r * F + c];
        }
        if (!tp.requires_grad(ix)) return;
        const auto& gam = tp.value(ig).data;
        auto& dx = tp.grad(ix);
        if (!batch_stats) {
          for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < F; ++c) dx[r * F + c] += g[r * F + c] * gam[c] * inv_std[c];
          return;
        }
        std::vector<T> sum_d(F, T(0)), sum_dx(F, T(0));
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < F; ++c) {
            const T dh = g[r * F + c] * gam[c];
            sum_d[c] += dh;
            sum_dx[c] += dh * xhat.data[r * F + c];
          }
        const T n = static_cast<T>(N);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < F; ++c) {
            const T dh = g[r * F + c] * gam[c];
            dx[r * F + c] += inv_std[c] / n * (n * dh - sum_d[c] - xhat.data[r * F + c] * sum_dx[c]);
          }
      },
      "batchnorm");
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.

// Below this magnitude both gradients are indistinguishable from the
// roundoff of a central difference, so the error is taken relative to it.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(kGradCheckFloor, std::abs(analytic) + std::abs(numeric));
}

/// Smallest |input| over every relu on the tape: how far the recorded point
/// sits from the nearest kink. Finite differences with step h are only
/// meaningful when this comfortably exceeds h times the input sensitivity.
template <class T>
T relu_margin(const Tape<T>& tape) {
  T margin = std::numeric_limits<T>::infinity();
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (tape.op(id) != "relu") continue;
    for (T v : tape.value(tape.inputs(id)[0]).data) margin = std::min(margin, std::abs(v));
  }
  return margin;
}

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// Builds the scalar loss on a fresh tape from leaf variables of the
/// parameters, in the order given.
using LossBuilder = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

/// Compares the tape's gradient of every parameter entry against the
/// central difference (f(p+h) - f(p-h)) / 2h. Parameters are perturbed in
/// place and restored.
inline GradCheckReport finite_diff_check(const LossBuilder& fn, std::span<Tensor<double>* const> params, double h,
                                         double tol, std::span<const std::string> names = {}) {
  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(params.size());
    for (auto* p : params) vars.push_back(tape.variable(*p));
    Var<double> loss = fn(tape, vars);
    if (loss.value().numel() != 1) throw ShapeError("finite_diff_check: loss must be scalar");
    if (with_grad) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(tape.gradient(v));
    }
    return loss.value().data[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(true, &analytic);

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = p < names.size() ? names[p] : "param" + std::to_string(p);
    auto& data = params[p]->data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = evaluate(false, nullptr);
      data[i] = saved - h;
      const double down = evaluate(false, nullptr);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p].data[i];
      const double err = relative_error(a, numeric);
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ccst::ad
