#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation.
//
// Every value is an Eigen matrix; vectors are 1 x n rows and scalars are 1 x 1.
// A Graph owns the tape. Ops append nodes in creation order, so the node list
// is already topologically sorted and backward() simply walks it in reverse.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "use/errors.hpp"

namespace use {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Shape {
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename Derived>
Shape shape_of(const Eigen::DenseBase<Derived>& m) {
  return {m.rows(), m.cols()};
}

// The dimension an op reduces or normalizes over. Rows collapses each column
// (result 1 x cols); Cols collapses each row (result rows x 1).
enum class Axis { Rows, Cols, All };

template <typename Scalar>
class Graph;

// Lightweight handle to a node of a Graph. Copying a Tensor never copies data.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  Graph<Scalar>* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix<Scalar>& value() const { return graph_->value(*this); }
  const Matrix<Scalar>& grad() const { return graph_->grad(*this); }
  Shape shape() const { return shape_of(value()); }
  bool requires_grad() const { return graph_->requires_grad(*this); }

  Scalar item() const {
    if (shape() != Shape{1, 1}) throw DimensionError("item() on non-scalar tensor " + shape().str());
    return value()(0, 0);
  }

 private:
  friend class Graph<Scalar>;
  Tensor(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&, const Mat& out_grad)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Tensor<Scalar> leaf(Mat value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad && grad_enabled_, "leaf", {}, {}});
    return Tensor<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  Tensor<Scalar> constant(Mat value) { return leaf(std::move(value), false); }

  // Appends an op result. The backward closure is kept only when some input
  // needs a gradient.
  Tensor<Scalar> record(Mat value, std::string_view op, std::initializer_list<Tensor<Scalar>> inputs,
                        BackwardFn backward) {
    return record(std::move(value), op, std::vector<Tensor<Scalar>>(inputs), std::move(backward));
  }

  Tensor<Scalar> record(Mat value, std::string_view op, const std::vector<Tensor<Scalar>>& inputs,
                        BackwardFn backward) {
    bool needs = false;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) {
      if (t.graph() != this) throw GraphError(std::string(op) + ": operand belongs to a different graph");
      ids.push_back(t.id());
      needs = needs || nodes_[t.id()].requires_grad;
    }
    needs = needs && grad_enabled_;
    nodes_.push_back(Node{std::move(value), Mat(), needs, op, std::move(ids), needs ? std::move(backward) : BackwardFn{}});
    return Tensor<Scalar>(this, static_cast<int>(nodes_.size() - 1));
  }

  const Mat& value(const Tensor<Scalar>& t) const { return node(t).value; }

  const Mat& grad(const Tensor<Scalar>& t) const {
    const Node& n = node(t);
    if (!n.requires_grad) throw GraphError("grad() on a tensor that does not require grad");
    if (n.grad.size() == 0) {
      // Never reached by backward: the gradient is identically zero.
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  bool requires_grad(const Tensor<Scalar>& t) const { return node(t).requires_grad; }

  template <typename Derived>
  void accumulate(const Tensor<Scalar>& t, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[t.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Tensor<Scalar>& output) {
    if (backward_done_) throw GraphError("backward() called twice without reset()");
    if (output.graph() != this) throw GraphError("backward() on a tensor from another graph");
    if (output.shape() != Shape{1, 1}) throw DimensionError("backward() needs a scalar output, got " + output.shape().str());
    backward_done_ = true;
    Node& out = nodes_[output.id()];
    if (!out.requires_grad) return;
    out.grad = Mat::Ones(1, 1);
    for (int i = output.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  // Clears accumulated gradients so backward() may run again.
  void reset() {
    for (auto& n : nodes_) n.grad.resize(0, 0);
    backward_done_ = false;
  }

 private:
  struct Node {
    Mat value;
    mutable Mat grad;
    bool requires_grad = false;
    std::string_view op;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  const Node& node(const Tensor<Scalar>& t) const {
    if (t.graph() != this || t.id() < 0 || t.id() >= static_cast<int>(nodes_.size())) {
      throw GraphError("tensor handle does not belong to this graph");
    }
    return nodes_[t.id()];
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

namespace detail {

template <typename Scalar>
Graph<Scalar>& same_graph(const Tensor<Scalar>& a, const Tensor<Scalar>& b, std::string_view op) {
  if (!a.valid() || a.graph() != b.graph()) throw GraphError(std::string(op) + ": operands from different graphs");
  return *a.graph();
}

enum class Broadcast { None, LeftScalar, RightScalar };

template <typename Scalar>
Broadcast broadcast_kind(const Tensor<Scalar>& a, const Tensor<Scalar>& b, std::string_view op) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa == sb) return Broadcast::None;
  if (sa == Shape{1, 1}) return Broadcast::LeftScalar;
  if (sb == Shape{1, 1}) return Broadcast::RightScalar;
  throw DimensionError(std::string(op) + ": shape mismatch " + sa.str() + " vs " + sb.str());
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto& g = detail::same_graph(a, b, "matmul");
  if (a.shape().cols != b.shape().rows) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape().str() + " x " + b.shape().str());
  }
  return g.record(a.value() * b.value(), "matmul", {a, b}, [a, b](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    if (a.requires_grad()) g.accumulate(a, dout * b.value().transpose());
    if (b.requires_grad()) g.accumulate(b, a.value().transpose() * dout);
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  return g.record(a.value().transpose(), "transpose", {a},
                  [a](Graph<Scalar>& g, const Matrix<Scalar>& dout) { g.accumulate(a, dout.transpose()); });
}

// x * w + b with b (1 x n) added to every row.
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  auto& g = detail::same_graph(x, w, "affine");
  if (x.shape().cols != w.shape().rows || b.shape() != Shape{1, w.shape().cols}) {
    throw DimensionError("affine: " + x.shape().str() + " x " + w.shape().str() + " + " + b.shape().str());
  }
  Matrix<Scalar> out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return g.record(std::move(out), "affine", {x, w, b}, [x, w, b](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    if (x.requires_grad()) g.accumulate(x, dout * w.value().transpose());
    if (w.requires_grad()) g.accumulate(w, x.value().transpose() * dout);
    if (b.requires_grad()) g.accumulate(b, dout.colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto& g = detail::same_graph(a, b, "add");
  const auto kind = detail::broadcast_kind(a, b, "add");
  Matrix<Scalar> out;
  switch (kind) {
    case detail::Broadcast::None: out = a.value() + b.value(); break;
    case detail::Broadcast::LeftScalar: out = b.value().array() + a.value()(0, 0); break;
    case detail::Broadcast::RightScalar: out = a.value().array() + b.value()(0, 0); break;
  }
  return g.record(std::move(out), "add", {a, b}, [a, b, kind](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    const Matrix<Scalar> total = Matrix<Scalar>::Constant(1, 1, dout.sum());
    g.accumulate(a, kind == detail::Broadcast::LeftScalar ? total : dout);
    g.accumulate(b, kind == detail::Broadcast::RightScalar ? total : dout);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto& g = detail::same_graph(a, b, "sub");
  const auto kind = detail::broadcast_kind(a, b, "sub");
  Matrix<Scalar> out;
  switch (kind) {
    case detail::Broadcast::None: out = a.value() - b.value(); break;
    case detail::Broadcast::LeftScalar: out = (-b.value().array()) + a.value()(0, 0); break;
    case detail::Broadcast::RightScalar: out = a.value().array() - b.value()(0, 0); break;
  }
  return g.record(std::move(out), "sub", {a, b}, [a, b, kind](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    const Matrix<Scalar> total = Matrix<Scalar>::Constant(1, 1, dout.sum());
    g.accumulate(a, kind == detail::Broadcast::LeftScalar ? total : dout);
    if (kind == detail::Broadcast::RightScalar) {
      g.accumulate(b, -total);
    } else {
      g.accumulate(b, -dout);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto& g = detail::same_graph(a, b, "mul");
  const auto kind = detail::broadcast_kind(a, b, "mul");
  Matrix<Scalar> out;
  switch (kind) {
    case detail::Broadcast::None: out = a.value().cwiseProduct(b.value()); break;
    case detail::Broadcast::LeftScalar: out = a.value()(0, 0) * b.value(); break;
    case detail::Broadcast::RightScalar: out = b.value()(0, 0) * a.value(); break;
  }
  return g.record(std::move(out), "mul", {a, b}, [a, b, kind](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    switch (kind) {
      case detail::Broadcast::None:
        if (a.requires_grad()) g.accumulate(a, dout.cwiseProduct(b.value()));
        if (b.requires_grad()) g.accumulate(b, dout.cwiseProduct(a.value()));
        break;
      case detail::Broadcast::LeftScalar:
        g.accumulate(a, Matrix<Scalar>::Constant(1, 1, dout.cwiseProduct(b.value()).sum()));
        g.accumulate(b, a.value()(0, 0) * dout);
        break;
      case detail::Broadcast::RightScalar:
        g.accumulate(a, b.value()(0, 0) * dout);
        g.accumulate(b, Matrix<Scalar>::Constant(1, 1, dout.cwiseProduct(a.value()).sum()));
        break;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  auto& g = *a.graph();
  return g.record(factor * a.value(), "scale", {a},
                  [a, factor](Graph<Scalar>& g, const Matrix<Scalar>& dout) { g.accumulate(a, factor * dout); });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar factor, const Tensor<Scalar>& a) {
  return scale(a, factor);
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar x) { return detail::stable_sigmoid(x); });
  Matrix<Scalar> saved = out;
  return g.record(std::move(out), "sigmoid", {a}, [a, s = std::move(saved)](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    g.accumulate(a, (dout.array() * s.array() * (Scalar(1) - s.array())).matrix());
  });
}

// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Matrix<Scalar> out = a.value().unaryExpr(
      [](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
  return g.record(std::move(out), "gelu", {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
    const auto d = a.value().unaryExpr([](Scalar x) {
      const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
      return cdf + x * inv_sqrt2pi * std::exp(Scalar(-0.5) * x * x);
    });
    g.accumulate(a, dout.cwiseProduct(d));
  });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  Matrix<Scalar> out = a.value().array().exp().matrix();
  return g.record(std::move(out), "exp", {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    g.accumulate(a, dout.cwiseProduct(a.value().array().exp().matrix()));
  });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  const auto& v = a.value();
  for (Index i = 0; i < v.size(); ++i) {
    if (!(v.data()[i] > Scalar(0))) {
      throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(v.data()[i])));
    }
  }
  return g.record(v.array().log().matrix(), "log", {a}, [a](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    g.accumulate(a, (dout.array() / a.value().array()).matrix());
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a, Axis axis = Axis::All) {
  auto& g = *a.graph();
  const Shape s = a.shape();
  Matrix<Scalar> out;
  switch (axis) {
    case Axis::Rows: out = a.value().colwise().sum(); break;
    case Axis::Cols: out = a.value().rowwise().sum(); break;
    case Axis::All: out = Matrix<Scalar>::Constant(1, 1, a.value().sum()); break;
  }
  return g.record(std::move(out), "sum", {a}, [a, axis, s](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    switch (axis) {
      case Axis::Rows: g.accumulate(a, dout.replicate(s.rows, 1)); break;
      case Axis::Cols: g.accumulate(a, dout.replicate(1, s.cols)); break;
      case Axis::All: g.accumulate(a, Matrix<Scalar>::Constant(s.rows, s.cols, dout(0, 0))); break;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a, Axis axis = Axis::All) {
  const Shape s = a.shape();
  const Index count = axis == Axis::Rows ? s.rows : axis == Axis::Cols ? s.cols : s.size();
  if (count == 0) throw EmptyInputError("mean over an empty axis");
  return scale(sum(a, axis), Scalar(1) / static_cast<Scalar>(count));
}

// Max-subtracted softmax. Axis::Cols normalizes each row.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, Axis axis = Axis::Cols) {
  if (axis == Axis::All) throw DimensionError("softmax: axis must be Rows or Cols");
  auto& g = *a.graph();
  Matrix<Scalar> x = axis == Axis::Cols ? a.value() : Matrix<Scalar>(a.value().transpose());
  for (Index r = 0; r < x.rows(); ++r) {
    x.row(r).array() -= x.row(r).maxCoeff();
    x.row(r) = x.row(r).array().exp().matrix();
    x.row(r) /= x.row(r).sum();
  }
  Matrix<Scalar> out = axis == Axis::Cols ? x : Matrix<Scalar>(x.transpose());
  const Matrix<Scalar> saved = x;
  return g.record(std::move(out), "softmax", {a}, [a, axis, saved](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    const Matrix<Scalar> dy = axis == Axis::Cols ? dout : Matrix<Scalar>(dout.transpose());
    const Vector<Scalar> dots = dy.cwiseProduct(saved).rowwise().sum();
    Matrix<Scalar> dx = saved.cwiseProduct(dy.colwise() - dots);
    if (axis == Axis::Cols) {
      g.accumulate(a, dx);
    } else {
      g.accumulate(a, dx.transpose());
    }
  });
}

// Per-row layer normalization with affine gain and bias (both 1 x d).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& bias,
                          Scalar eps = Scalar(1e-5)) {
  auto& g = detail::same_graph(x, gain, "layer_norm");
  const Index d = x.shape().cols;
  if (gain.shape() != Shape{1, d} || bias.shape() != Shape{1, d}) {
    throw DimensionError("layer_norm: gain/bias " + gain.shape().str() + "/" + bias.shape().str() +
                         " for input " + x.shape().str());
  }
  const auto& v = x.value();
  Matrix<Scalar> xhat(v.rows(), d);
  Vector<Scalar> inv_std(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const Scalar mu = v.row(r).mean();
    const Scalar var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Scalar> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  if (!(g.grad_enabled() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad()))) {
    return g.record(std::move(out), "layer_norm", {x, gain, bias}, {});
  }
  return g.record(std::move(out), "layer_norm", {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<Scalar>& g,
                                                                                          const Matrix<Scalar>& dout) {
                    if (gain.requires_grad()) g.accumulate(gain, dout.cwiseProduct(xhat).colwise().sum());
                    if (bias.requires_grad()) g.accumulate(bias, dout.colwise().sum());
                    if (!x.requires_grad()) return;
                    const Matrix<Scalar> dxhat = dout.array().rowwise() * gain.value().row(0).array();
                    const Vector<Scalar> m1 = dxhat.rowwise().mean();
                    const Vector<Scalar> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                    Matrix<Scalar> dx = dxhat;
                    dx.colwise() -= m1;
                    dx -= xhat.cwiseProduct(m2.replicate(1, xhat.cols()));
                    dx = inv_std.asDiagonal() * dx;
                    g.accumulate(x, dx);
                  });
}

// Row-wise L2 normalization; zero rows are rejected.
template <typename Scalar>
Tensor<Scalar> normalize_rows(const Tensor<Scalar>& a) {
  auto& g = *a.graph();
  const Vector<Scalar> norms = a.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r) {
    if (!(norms(r) > Scalar(0))) throw DegenerateEmbeddingError("zero-norm row " + std::to_string(r));
  }
  Matrix<Scalar> out = norms.cwiseInverse().asDiagonal() * a.value();
  const Matrix<Scalar> y = out;
  return g.record(std::move(out), "normalize_rows", {a}, [a, y, norms](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    const Vector<Scalar> dots = dout.cwiseProduct(y).rowwise().sum();
    Matrix<Scalar> dx = dout - dots.asDiagonal() * y;
    g.accumulate(a, norms.cwiseInverse().asDiagonal() * dx);
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const int> ids) {
  auto& g = *table.graph();
  const auto& t = table.value();
  Matrix<Scalar> out(static_cast<Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(t.rows()) +
                       " rows");
    }
    out.row(static_cast<Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  const Shape s = table.shape();
  return g.record(std::move(out), "gather_rows", {table},
                  [table, saved = std::move(saved), s](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
                    Matrix<Scalar> dt = Matrix<Scalar>::Zero(s.rows, s.cols);
                    for (std::size_t i = 0; i < saved.size(); ++i) dt.row(saved[i]) += dout.row(static_cast<Index>(i));
                    g.accumulate(table, dt);
                  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count) {
  const Shape s = a.shape();
  if (start < 0 || count < 0 || start + count > s.rows) {
    throw IndexError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " + s.str());
  }
  auto& g = *a.graph();
  return g.record(a.value().middleRows(start, count), "slice_rows", {a},
                  [a, start, count, s](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
                    Matrix<Scalar> da = Matrix<Scalar>::Zero(s.rows, s.cols);
                    da.middleRows(start, count) = dout;
                    g.accumulate(a, da);
                  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, Index start, Index count) {
  const Shape s = a.shape();
  if (start < 0 || count < 0 || start + count > s.cols) {
    throw IndexError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") of " + s.str());
  }
  auto& g = *a.graph();
  return g.record(a.value().middleCols(start, count), "slice_cols", {a},
                  [a, start, count, s](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
                    Matrix<Scalar> da = Matrix<Scalar>::Zero(s.rows, s.cols);
                    da.middleCols(start, count) = dout;
                    g.accumulate(a, da);
                  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: no inputs");
  auto& g = *parts.front().graph();
  const Index rows = parts.front().shape().rows;
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.shape().rows != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.shape().cols;
  }
  Matrix<Scalar> out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.shape().cols) = p.value();
    offset += p.shape().cols;
  }
  return g.record(std::move(out), "concat_cols", parts, [parts](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    Index off = 0;
    for (const auto& p : parts) {
      const Index c = p.shape().cols;
      g.accumulate(p, dout.middleCols(off, c));
      off += c;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: no inputs");
  auto& g = *parts.front().graph();
  const Index cols = parts.front().shape().cols;
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.shape().cols != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.shape().rows;
  }
  Matrix<Scalar> out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.shape().rows) = p.value();
    offset += p.shape().rows;
  }
  return g.record(std::move(out), "concat_rows", parts, [parts](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
    Index off = 0;
    for (const auto& p : parts) {
      const Index r = p.shape().rows;
      g.accumulate(p, dout.middleRows(off, r));
      off += r;
    }
  });
}

// ---------------------------------------------------------------------------
// Fused losses

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, evaluated
// as max(z, 0) - z*y + log1p(exp(-|z|)) so no intermediate saturates.
template <typename Scalar>
Tensor<Scalar> bce_with_logits_mean(const Tensor<Scalar>& logits, const std::type_identity_t<Matrix<Scalar>>& targets) {
  if (logits.shape() != shape_of(targets)) {
    throw DimensionError("bce_with_logits: logits " + logits.shape().str() + " vs targets " + shape_of(targets).str());
  }
  if (targets.size() == 0) throw EmptyInputError("bce_with_logits: empty input");
  auto& g = *logits.graph();
  const auto z = logits.value().array();
  const auto y = targets.array();
  const Scalar total = (z.max(Scalar(0)) - z * y + (-z.abs()).exp().log1p()).sum();
  const Scalar count = static_cast<Scalar>(targets.size());
  return g.record(Matrix<Scalar>::Constant(1, 1, total / count), "bce_with_logits", {logits},
                  [logits, targets, count](Graph<Scalar>& g, const Matrix<Scalar>& dout) {
                    const Matrix<Scalar> s =
                        logits.value().unaryExpr([](Scalar x) { return detail::stable_sigmoid(x); });
                    g.accumulate(logits, (dout(0, 0) / count) * (s - targets));
                  });
}

// Mean over rows of -log softmax(row)[target]. Entries with exclude(r, c) set
// take no part in the normalizer; a row's target must not be excluded.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy_mean(const Tensor<Scalar>& logits, std::span<const int> targets,
                                          const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>* exclude = nullptr) {
  const Shape s = logits.shape();
  if (static_cast<Index>(targets.size()) != s.rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " + s.str());
  }
  if (s.rows == 0) throw EmptyInputError("softmax_cross_entropy: no rows");
  if (exclude && (exclude->rows() != s.rows || exclude->cols() != s.cols)) {
    throw DimensionError("softmax_cross_entropy: exclusion mask shape mismatch");
  }
  auto& g = *logits.graph();
  const auto& z = logits.value();
  Matrix<Scalar> probs = Matrix<Scalar>::Zero(s.rows, s.cols);
  Scalar total = 0;
  for (Index r = 0; r < s.rows; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= s.cols) throw IndexError("softmax_cross_entropy: target id " + std::to_string(t) + " out of range");
    if (exclude && (*exclude)(r, t)) throw IndexError("softmax_cross_entropy: target excluded in row " + std::to_string(r));
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index c = 0; c < s.cols; ++c) {
      if (!exclude || !(*exclude)(r, c)) mx = std::max(mx, z(r, c));
    }
    Scalar denom = 0;
    for (Index c = 0; c < s.cols; ++c) {
      if (!exclude || !(*exclude)(r, c)) {
        probs(r, c) = std::exp(z(r, c) - mx);
        denom += probs(r, c);
      }
    }
    probs.row(r) /= denom;
    total += -(z(r, t) - mx - std::log(denom));
  }
  std::vector<int> saved(targets.begin(), targets.end());
  const Scalar rows = static_cast<Scalar>(s.rows);
  return g.record(Matrix<Scalar>::Constant(1, 1, total / rows), "softmax_cross_entropy", {logits},
                  [logits, probs = std::move(probs), saved = std::move(saved), rows](Graph<Scalar>& g,
                                                                                      const Matrix<Scalar>& dout) {
                    Matrix<Scalar> d = probs;
                    for (std::size_t r = 0; r < saved.size(); ++r) d(static_cast<Index>(r), saved[r]) -= Scalar(1);
                    g.accumulate(logits, (dout(0, 0) / rows) * d);
                  });
}

// ---------------------------------------------------------------------------
// Reference kernels (no gradient)

// Causal softmax attention: row n attends to rows 1..n.
template <typename Scalar>
Matrix<Scalar> causal_attention(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows()) {
    throw DimensionError("causal_attention: incompatible q/k/v shapes");
  }
  Matrix<Scalar> out(q.rows(), v.cols());
  for (Index n = 0; n < q.rows(); ++n) {
    RowVector<Scalar> scores = q.row(n) * k.topRows(n + 1).transpose();
    scores.array() -= scores.maxCoeff();
    scores = scores.array().exp().matrix();
    scores /= scores.sum();
    out.row(n) = scores * v.topRows(n + 1);
  }
  return out;
}

}  // namespace use
