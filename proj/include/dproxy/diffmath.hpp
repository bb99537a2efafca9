#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Tape records one forward pass. Every primitive computes its value
// eagerly and, when any input requires a gradient, stores a closure that
// pushes the output gradient back to its inputs. Tape::backward walks the
// nodes in reverse creation order. Leaves created with Tape::leaf carry a
// pointer to an external accumulator (a ParamStore gradient), which is where
// gradients end up; backward adds into it, so two backward passes double it.
//
// All reductions run sequentially left to right so that results are
// bitwise reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dproxy/error.hpp"
#include "dproxy/tensor.hpp"

namespace dproxy::diff {

#ifdef NDEBUG
inline constexpr bool kCheckFiniteDefault = false;
#else
inline constexpr bool kCheckFiniteDefault = true;
#endif

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor2<T>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  /// Scalar value of a 1x1 variable.
  T item() const { return value().data.at(0); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool check_finite = kCheckFiniteDefault) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor2<T> value) { return push(std::move(value), false, nullptr, {}, "constant"); }

  /// A differentiable input whose gradient is accumulated into `grad_sink`.
  Var<T> leaf(const Tensor2<T>& value, Tensor2<T>* grad_sink) {
    if (grad_sink != nullptr && !grad_sink->same_shape(value)) {
      throw Error(ErrorCode::ShapeMismatch, "leaf: gradient accumulator shape differs from value");
    }
    return push(value, true, grad_sink, {}, "leaf");
  }

  /// Records the output of a primitive. The backward closure is kept only
  /// when some parent requires a gradient.
  Var<T> record(Tensor2<T> value, std::initializer_list<Var<T>> parents, Backward backward,
                std::string_view op) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{}, op);
  }

  const Tensor2<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Tensor2<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad_ready) {
      n.grad = Tensor2<T>(n.value.rows, n.value.cols);
      n.grad_ready = true;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool check_finite() const { return check_finite_; }

  void backward(Var<T> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw Error(ErrorCode::ShapeMismatch, "backward: loss must be 1x1");
    }
    for (auto& n : nodes_) {
      n.grad_ready = false;
      n.grad = Tensor2<T>();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id()).data[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.grad_ready) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink != nullptr) {
        for (std::size_t k = 0; k < n.grad.data.size(); ++k) n.sink->data[k] += n.grad.data[k];
      }
    }
  }

 private:
  struct Node {
    Tensor2<T> value;
    Tensor2<T> grad;
    Backward backward;
    Tensor2<T>* sink = nullptr;
    bool requires_grad = false;
    bool grad_ready = false;
  };

  Var<T> push(Tensor2<T> value, bool requires_grad, Tensor2<T>* sink, Backward backward,
              std::string_view op) {
    if (check_finite_) {
      for (const T& x : value.data) {
        if (!std::isfinite(x)) {
          throw Error(ErrorCode::NonFiniteDetected, "non-finite value produced by " + std::string(op));
        }
      }
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.sink = sink;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool check_finite_;
};

namespace detail {

inline void require(bool ok, std::string_view op, std::string_view what) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + std::string(what));
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, std::string_view op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op, "operands must have identical shapes");
}

template <typename T>
void require_tape(const Var<T>& a, const Var<T>& b, std::string_view op) {
  require(&a.tape() == &b.tape(), op, "operands belong to different tapes");
}

// C += A * B  (A: n x k, B: k x m)
template <typename T>
void gemm_nn(const Tensor2<T>& a, const Tensor2<T>& b, Tensor2<T>& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    T* ci = c.data.data() + i * c.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const T aip = a.data[i * a.cols + p];
      const T* bp = b.data.data() + p * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C += A * B^T  (A: n x k, B: m x k)
template <typename T>
void gemm_nt(const Tensor2<T>& a, const Tensor2<T>& b, Tensor2<T>& c) {
  // Transposing B first keeps the inner loop contiguous.
  Tensor2<T> bt(b.cols, b.rows);
  for (std::size_t j = 0; j < b.rows; ++j)
    for (std::size_t p = 0; p < b.cols; ++p) bt.data[p * b.rows + j] = b.data[j * b.cols + p];
  gemm_nn(a, bt, c);
}

// C += A^T * B  (A: k x n, B: k x m)
template <typename T>
void gemm_tn(const Tensor2<T>& a, const Tensor2<T>& b, Tensor2<T>& c) {
  for (std::size_t p = 0; p < a.rows; ++p) {
    const T* ap = a.data.data() + p * a.cols;
    const T* bp = b.data.data() + p * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const T api = ap[i];
      T* ci = c.data.data() + i * c.cols;
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += api * bp[j];
    }
  }
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a (n x k) * b (k x m)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "matmul");
  detail::require(a.cols() == b.rows(), "matmul", "inner dimensions differ");
  Tensor2<T> out(a.rows(), b.cols());
  detail::gemm_nn(a.value(), b.value(), out);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) detail::gemm_nt(g, t.value(ib), t.grad(ia));
    if (t.requires_grad(ib)) detail::gemm_tn(t.value(ia), g, t.grad(ib));
  }, "matmul");
}

/// a (n x k) * b^T (b: m x k)
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "matmul_nt");
  detail::require(a.cols() == b.cols(), "matmul_nt", "inner dimensions differ");
  Tensor2<T> out(a.rows(), b.rows());
  detail::gemm_nt(a.value(), b.value(), out);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) detail::gemm_nn(g, t.value(ib), t.grad(ia));
    if (t.requires_grad(ib)) detail::gemm_tn(g, t.value(ia), t.grad(ib));
  }, "matmul_nt");
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "add");
  detail::require_same(a, b, "add");
  Tensor2<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += b.value().data[k];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gi = t.grad(id);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k];
    }
  }, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "sub");
  detail::require_same(a, b, "sub");
  Tensor2<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] -= b.value().data[k];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k];
    }
    if (t.requires_grad(ib)) {
      auto& gi = t.grad(ib);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] -= g.data[k];
    }
  }, "sub");
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "hadamard");
  detail::require_same(a, b, "hadamard");
  Tensor2<T> out = a.value();
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] *= b.value().data[k];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      const auto& vb = t.value(ib);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k] * vb.data[k];
    }
    if (t.requires_grad(ib)) {
      auto& gi = t.grad(ib);
      const auto& va = t.value(ia);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k] * va.data[k];
    }
  }, "hadamard");
}

// ---------------------------------------------------------------------------
// Broadcasts

/// a (n x c) + v (1 x c) on every row.
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> v) {
  detail::require_tape(a, v, "add_rowvec");
  detail::require(v.rows() == 1 && v.cols() == a.cols(), "add_rowvec", "vector must be 1 x cols");
  Tensor2<T> out = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += vv.data[j];
  const auto ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {a, v}, [ia, iv](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k];
    }
    if (t.requires_grad(iv)) {
      auto& gv = t.grad(iv);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gv.data[j] += g(i, j);
    }
  }, "add_rowvec");
}

/// a (n x c) - v (1 x c) on every row.
template <typename T>
Var<T> sub_rowvec(Var<T> a, Var<T> v) {
  detail::require_tape(a, v, "sub_rowvec");
  detail::require(v.rows() == 1 && v.cols() == a.cols(), "sub_rowvec", "vector must be 1 x cols");
  Tensor2<T> out = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) -= vv.data[j];
  const auto ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {a, v}, [ia, iv](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k];
    }
    if (t.requires_grad(iv)) {
      auto& gv = t.grad(iv);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gv.data[j] -= g(i, j);
    }
  }, "sub_rowvec");
}

/// Row i of a scaled by s_i (s: n x 1).
template <typename T>
Var<T> mul_colvec(Var<T> a, Var<T> s) {
  detail::require_tape(a, s, "mul_colvec");
  detail::require(s.cols() == 1 && s.rows() == a.rows(), "mul_colvec", "scale must be rows x 1");
  Tensor2<T> out = a.value();
  const auto& sv = s.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) *= sv.data[i];
  const auto ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {a, s}, [ia, is](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& sv = t.value(is);
    const auto& av = t.value(ia);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += g(i, j) * sv.data[i];
    }
    if (t.requires_grad(is)) {
      auto& gs = t.grad(is);
      for (std::size_t i = 0; i < g.rows; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < g.cols; ++j) acc += g(i, j) * av(i, j);
        gs.data[i] += acc;
      }
    }
  }, "mul_colvec");
}

/// Every entry of a scaled by the 1x1 variable s.
template <typename T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  detail::require_tape(a, s, "mul_scalar");
  detail::require(s.rows() == 1 && s.cols() == 1, "mul_scalar", "scale must be 1x1");
  Tensor2<T> out = a.value();
  const T sv = s.item();
  for (auto& x : out.data) x *= sv;
  const auto ia = a.id(), is = s.id();
  return a.tape().record(std::move(out), {a, s}, [ia, is](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const T sv = t.value(is).data[0];
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k] * sv;
    }
    if (t.requires_grad(is)) {
      const auto& av = t.value(ia);
      T acc = T(0);
      for (std::size_t k = 0; k < g.data.size(); ++k) acc += g.data[k] * av.data[k];
      t.grad(is).data[0] += acc;
    }
  }, "mul_scalar");
}

/// scale * a + shift, with constant scale and shift.
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift = T(0)) {
  Tensor2<T> out = a.value();
  for (auto& x : out.data) x = scale * x + shift;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, scale](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gi = t.grad(ia);
    for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += scale * g.data[k];
  }, "affine");
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return affine(a, factor, T(0));
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "concat_cols");
  detail::require(a.rows() == b.rows(), "concat_cols", "row counts differ");
  const std::size_t ca = a.cols(), cb = b.cols();
  Tensor2<T> out(a.rows(), ca + cb);
  for (std::size_t i = 0; i < out.rows; ++i) {
    auto ra = a.value().row(i);
    auto rb = b.value().row(i);
    std::copy(ra.begin(), ra.end(), out.row(i).begin());
    std::copy(rb.begin(), rb.end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) gi(i, j) += g(i, j);
    }
    if (t.requires_grad(ib)) {
      auto& gi = t.grad(ib);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < cb; ++j) gi(i, j) += g(i, ca + j);
    }
  }, "concat_cols");
}

/// Columns [begin, begin + count).
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  detail::require(begin + count <= a.cols(), "slice_cols", "range exceeds columns");
  Tensor2<T> out(a.rows(), count);
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, begin + j);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, begin](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) gi(i, begin + j) += g(i, j);
  }, "slice_cols");
}

/// Selected rows of a, in the given order; backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> idx) {
  for (auto r : idx) detail::require(r < a.rows(), "gather_rows", "row index out of range");
  Tensor2<T> out = dproxy::gather_rows(a.value(), std::span<const std::size_t>(idx));
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < g.cols; ++j) gi(idx[i], j) += g(i, j);
  }, "gather_rows");
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor2<T> out = a.value();
  for (auto& x : out.data) x = detail::sigmoid_scalar(x);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k] * y.data[k] * (T(1) - y.data[k]);
  }, "sigmoid");
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor2<T> out = a.value();
  for (auto& x : out.data) x = x > T(0) ? x : T(0);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& gi = t.grad(ia);
    for (std::size_t k = 0; k < g.data.size(); ++k)
      if (x.data[k] > T(0)) gi.data[k] += g.data[k];
  }, "relu");
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tensor2<T> out = a.value();
  for (auto& x : out.data) x = std::exp(x);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    for (std::size_t k = 0; k < g.data.size(); ++k) gi.data[k] += g.data[k] * y.data[k];
  }, "exp");
}

// ---------------------------------------------------------------------------
// Row-wise

/// softmax(a / temperature) over each row.
template <typename T>
Var<T> softmax_rows(Var<T> a, T temperature = T(1)) {
  detail::require(temperature > T(0), "softmax_rows", "temperature must be positive");
  Tensor2<T> out(a.rows(), a.cols());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.rows; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < x.cols; ++j) mx = std::max(mx, x(i, j) / temperature);
    T z = T(0);
    for (std::size_t j = 0; j < x.cols; ++j) {
      out(i, j) = std::exp(x(i, j) / temperature - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) /= z;
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, temperature](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < g.cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += y(i, j) * (g(i, j) - dot) / temperature;
    }
  }, "softmax_rows");
}

/// Per-row standardization to zero mean and unit (biased) variance.
template <typename T>
Var<T> layernorm_rows(Var<T> a, T eps) {
  const auto& x = a.value();
  const std::size_t n = x.cols;
  Tensor2<T> out(x.rows, n);
  std::vector<T> inv_std(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = (x(i, j) - mean) * inv_std[i];
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    const T n = static_cast<T>(g.cols);
    for (std::size_t i = 0; i < g.rows; ++i) {
      T mg = T(0), mgy = T(0);
      for (std::size_t j = 0; j < g.cols; ++j) {
        mg += g(i, j);
        mgy += g(i, j) * y(i, j);
      }
      mg /= n;
      mgy /= n;
      for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += inv_std[i] * (g(i, j) - mg - y(i, j) * mgy);
    }
  }, "layernorm_rows");
}

/// Each row divided by its Euclidean norm.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
  const auto& x = a.value();
  Tensor2<T> out(x.rows, x.cols);
  std::vector<T> norms(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < x.cols; ++j) s += x(i, j) * x(i, j);
    norms[i] = std::sqrt(s);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) / norms[i];
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < g.rows; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < g.cols; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += (g(i, j) - y(i, j) * dot) / norms[i];
    }
  }, "l2_normalize_rows");
}

/// Inner product of matching rows, n x 1.
template <typename T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "row_dot");
  detail::require_same(a, b, "row_dot");
  Tensor2<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < a.cols(); ++j) s += a.value()(i, j) * b.value()(i, j);
    out.data[i] = s;
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& va = t.value(ia);
    const auto& vb = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = 0; j < va.cols; ++j) gi(i, j) += g.data[i] * vb(i, j);
    }
    if (t.requires_grad(ib)) {
      auto& gi = t.grad(ib);
      for (std::size_t i = 0; i < va.rows; ++i)
        for (std::size_t j = 0; j < va.cols; ++j) gi(i, j) += g.data[i] * va(i, j);
    }
  }, "row_dot");
}

/// Cosine similarity of matching rows, n x 1.
template <typename T>
Var<T> cosine_rows(Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "cosine_rows");
  detail::require_same(a, b, "cosine_rows");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor2<T> out(n, 1);
  std::vector<T> na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0), sa = T(0), sb = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T x = a.value()(i, j), y = b.value()(i, j);
      s += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    out.data[i] = s / (na[i] * nb[i]);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, na = std::move(na), nb = std::move(nb)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& c = t.value(self);
        const auto& va = t.value(ia);
        const auto& vb = t.value(ib);
        for (std::size_t i = 0; i < va.rows; ++i) {
          const T inv = T(1) / (na[i] * nb[i]);
          if (t.requires_grad(ia)) {
            auto& gi = t.grad(ia);
            const T ca = c.data[i] / (na[i] * na[i]);
            for (std::size_t j = 0; j < va.cols; ++j) gi(i, j) += g.data[i] * (vb(i, j) * inv - ca * va(i, j));
          }
          if (t.requires_grad(ib)) {
            auto& gi = t.grad(ib);
            const T cb = c.data[i] / (nb[i] * nb[i]);
            for (std::size_t j = 0; j < va.cols; ++j) gi(i, j) += g.data[i] * (va(i, j) * inv - cb * vb(i, j));
          }
        }
      },
      "cosine_rows");
}

/// Per-row convex mix: lambda_i * a_i + (1 - lambda_i) * b_i (lambda: n x 1).
template <typename T>
Var<T> scalar_mix(Var<T> lambda, Var<T> a, Var<T> b) {
  detail::require_tape(a, b, "scalar_mix");
  detail::require_tape(lambda, a, "scalar_mix");
  detail::require_same(a, b, "scalar_mix");
  detail::require(lambda.cols() == 1 && lambda.rows() == a.rows(), "scalar_mix", "lambda must be rows x 1");
  Tensor2<T> out(a.rows(), a.cols());
  const auto& lv = lambda.value();
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j)
      out(i, j) = lv.data[i] * a.value()(i, j) + (T(1) - lv.data[i]) * b.value()(i, j);
  const auto il = lambda.id(), ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {lambda, a, b}, [il, ia, ib](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& lv = t.value(il);
    const auto& va = t.value(ia);
    const auto& vb = t.value(ib);
    if (t.requires_grad(il)) {
      auto& gl = t.grad(il);
      for (std::size_t i = 0; i < g.rows; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < g.cols; ++j) acc += g(i, j) * (va(i, j) - vb(i, j));
        gl.data[i] += acc;
      }
    }
    if (t.requires_grad(ia)) {
      auto& gi = t.grad(ia);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += lv.data[i] * g(i, j);
    }
    if (t.requires_grad(ib)) {
      auto& gi = t.grad(ib);
      for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) gi(i, j) += (T(1) - lv.data[i]) * g(i, j);
    }
  }, "scalar_mix");
}

/// Squared Euclidean norm of each row, n x 1.
template <typename T>
Var<T> row_sqnorm(Var<T> a) {
  Tensor2<T> out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < a.cols(); ++j) s += a.value()(i, j) * a.value()(i, j);
    out.data[i] = s;
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j) gi(i, j) += T(2) * g.data[i] * x(i, j);
  }, "row_sqnorm");
}

/// out_i = log sum_{j != i} exp(a_ij) for a square matrix, n x 1.
template <typename T>
Var<T> logsumexp_offdiag_rows(Var<T> a) {
  detail::require(a.rows() == a.cols(), "logsumexp_offdiag_rows", "matrix must be square");
  detail::require(a.rows() >= 2, "logsumexp_offdiag_rows", "needs at least two rows");
  const auto& x = a.value();
  const std::size_t n = x.rows;
  Tensor2<T> out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, x(i, j));
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) s += std::exp(x(i, j) - mx);
    out.data[i] = mx + std::log(s);
  }
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j)
        if (j != i) gi(i, j) += g.data[i] * std::exp(x(i, j) - y.data[i]);
  }, "logsumexp_offdiag_rows");
}

/// Column means, 1 x c.
template <typename T>
Var<T> mean_rows(Var<T> a) {
  detail::require(a.rows() >= 1, "mean_rows", "needs at least one row");
  Tensor2<T> out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.data[j] += a.value()(i, j);
  const T inv = T(1) / static_cast<T>(a.rows());
  for (auto& v : out.data) v *= inv;
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, inv](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gi = t.grad(ia);
    for (std::size_t i = 0; i < gi.rows; ++i)
      for (std::size_t j = 0; j < gi.cols; ++j) gi(i, j) += g.data[j] * inv;
  }, "mean_rows");
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(Var<T> a) {
  T s = T(0);
  for (const T& x : a.value().data) s += x;
  Tensor2<T> out(1, 1, s);
  const auto ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self).data[0];
    auto& gi = t.grad(ia);
    for (auto& x : gi.data) x += g;
  }, "sum_all");
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  detail::require(a.value().size() > 0, "mean_all", "empty input");
  const T inv = T(1) / static_cast<T>(a.value().size());
  return scale(sum_all(a), inv);
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct Param {
  std::string name;
  Tensor2<T> value;
  Tensor2<T> grad;
};

/// Named parameters with stable insertion-order iteration. Element addresses
/// never move, so tape leaves may point at gradient accumulators.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(std::string name, Tensor2<T> value) {
    if (index_.contains(name)) throw Error(ErrorCode::SchemaError, "duplicate parameter name: " + name);
    Tensor2<T> grad(value.rows, value.cols);
    index_.emplace(name, params_.size());
    params_.push_back(Param<T>{std::move(name), std::move(value), std::move(grad)});
    return params_.back();
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  Param<T>& at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error(ErrorCode::SchemaError, "unknown parameter: " + std::string(name));
    return params_[it->second];
  }
  const Param<T>& at(std::string_view name) const { return const_cast<ParamStore*>(this)->at(name); }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

  std::size_t size() const { return params_.size(); }
  std::size_t total_entries() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::deque<Param<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binds parameters to one tape, creating each leaf once.
template <typename T>
class Binder {
 public:
  Binder(Tape<T>& tape, ParamStore<T>& store) : tape_(tape), store_(store) {}

  Var<T> operator()(std::string_view name) {
    const std::string key(name);
    if (auto it = bound_.find(key); it != bound_.end()) return it->second;
    Param<T>& p = store_.at(key);
    Var<T> v = tape_.leaf(p.value, &p.grad);
    bound_.emplace(key, v);
    return v;
  }

  Tape<T>& tape() { return tape_; }
  ParamStore<T>& store() { return store_; }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  std::unordered_map<std::string, Var<T>> bound_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

/// Builds a scalar loss on the given tape from the parameters in the store.
using LossBuilder = std::function<Var<double>(Tape<double>&, ParamStore<double>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(θ+h) - f(θ-h)) / 2h for every parameter entry. Relative error is
/// |a - n| / max(|a|, |n|, abs_floor); abs_floor keeps entries whose true
/// gradient is zero from dividing round-off by zero.
GradCheckReport grad_check(const LossBuilder& f, ParamStore<double>& store, double step, double tolerance,
                           double abs_floor = 1e-6);

}  // namespace dproxy::diff
