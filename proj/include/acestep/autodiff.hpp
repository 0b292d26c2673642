#pragma once

// Reverse-mode automatic differentiation over 2-D Eigen matrices.
//
// A Tape records every operation of one forward pass. Parameters enter as
// leaves referencing caller-owned matrices (no copy); after backward() their
// gradients can be fetched by the same matrix address. Nodes whose inputs
// carry no gradient never store a backward closure, so inference through a
// tape with only constants is a plain forward evaluation.

#include "acestep/core.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace acestep {

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix<T>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Tape {
 public:
  // Receives the node's output gradient and its forward value.
  using Backward = std::function<void(const Matrix<T>& grad, const Matrix<T>& out)>;

  // With grad_enabled == false every parameter enters as a constant and no
  // backward closures are stored.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), nullptr, false); }

  // Leaf referencing `value` without copying; the matrix must outlive the tape.
  Var<T> constant_ref(const Matrix<T>& value) { return push(Matrix<T>(), &value, false); }

  // Trainable leaf. Repeated calls with the same matrix return the same node.
  Var<T> param(const Matrix<T>& value) {
    if (!grad_enabled_) return constant_ref(value);
    auto it = leaves_.find(&value);
    if (it != leaves_.end()) return Var<T>(this, it->second);
    Var<T> v = push(Matrix<T>(), &value, true);
    leaves_.emplace(&value, v.id());
    return v;
  }

  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  Var<T> record(Matrix<T> value, std::span<const Var<T>> parents, Backward backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
    Var<T> v = push(std::move(value), nullptr, needs);
    if (needs) nodes_[v.id()].backward = std::move(backward);
    return v;
  }

  const Matrix<T>& value(int id) const { return nodes_[id].value(); }
  bool needs_grad(const Var<T>& v) const { return nodes_[v.id()].needs_grad; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  template <typename Derived>
  void accumulate(const Var<T>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id()];
    if (!n.needs_grad) return;
    const Matrix<T>& val = n.value();
    require(g.rows() == val.rows() && g.cols() == val.cols(), ErrorKind::kShapeMismatch,
            "gradient " + shape_str(g.rows(), g.cols()) + " for node of shape " + shape_str(val.rows(), val.cols()));
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf.
  void backward(const Var<T>& root) {
    require(root.rows() == 1 && root.cols() == 1, ErrorKind::kShapeMismatch,
            "backward() expects a scalar root, got " + shape_str(root.rows(), root.cols()));
    Node& r = nodes_[root.id()];
    if (!r.needs_grad) return;
    r.grad = Matrix<T>::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
      n.backward(n.grad, n.value());
      n.grad.resize(0, 0);  // interior gradients are not needed afterwards
    }
  }

  // Gradient of a parameter leaf, or nullptr if it did not take part.
  const Matrix<T>* grad(const Matrix<T>& param) const {
    auto it = leaves_.find(&param);
    if (it == leaves_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad.size() == 0 ? nullptr : &n.grad;
  }

 private:
  struct Node {
    Matrix<T> owned;
    const Matrix<T>* external = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    Backward backward;

    const Matrix<T>& value() const { return external ? *external : owned; }
  };

  Var<T> push(Matrix<T> value, const Matrix<T>* external, bool needs_grad) {
    Node n;
    n.owned = std::move(value);
    n.external = external;
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  bool grad_enabled_ = true;
  std::deque<Node> nodes_;
  std::unordered_map<const Matrix<T>*, int> leaves_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return tape_->value(id_);
}

namespace detail {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShapeMismatch,
          std::string(op) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
              shape_str(b.rows(), b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require(a.cols() == b.rows(), ErrorKind::kShapeMismatch,
          "matmul: " + shape_str(a.rows(), a.cols()) + " x " + shape_str(b.rows(), b.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out;
  out.noalias() = a.value() * b.value();
  return tape.record(std::move(out), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    if (tape.needs_grad(a)) tape.accumulate(a, g * b.value().transpose());
    if (tape.needs_grad(b)) tape.accumulate(b, a.value().transpose() * g);
  });
}

// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require(a.cols() == b.cols(), ErrorKind::kShapeMismatch,
          "matmul_nt: " + shape_str(a.rows(), a.cols()) + " x " + shape_str(b.rows(), b.cols()) + "^T");
  Tape<T>& tape = *a.tape();
  Matrix<T> out;
  out.noalias() = a.value() * b.value().transpose();
  return tape.record(std::move(out), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    if (tape.needs_grad(a)) tape.accumulate(a, g * b.value());
    if (tape.needs_grad(b)) tape.accumulate(b, g.transpose() * a.value());
  });
}

// a^T * b
template <typename T>
Var<T> matmul_tn(Var<T> a, Var<T> b) {
  require(a.rows() == b.rows(), ErrorKind::kShapeMismatch,
          "matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T x " + shape_str(b.rows(), b.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out;
  out.noalias() = a.value().transpose() * b.value();
  return tape.record(std::move(out), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    if (tape.needs_grad(a)) tape.accumulate(a, b.value() * g.transpose());
    if (tape.needs_grad(b)) tape.accumulate(b, a.value() * g);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().transpose();
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g.transpose());
  });
}

// Reinterprets the row-major storage with a new shape.
template <typename T>
Var<T> reshape(Var<T> a, Index rows, Index cols) {
  require(rows * cols == a.value().size(), ErrorKind::kShapeMismatch, "reshape: size mismatch");
  Tape<T>& tape = *a.tape();
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return tape.record(std::move(out), {a}, [&tape, a, r0, c0](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, Eigen::Map<const Matrix<T>>(g.data(), r0, c0));
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "add");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() + b.value(), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "sub");
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() - b.value(), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

// Hadamard product.
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "mul");
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return tape.record(std::move(out), {a, b}, [&tape, a, b](const Matrix<T>& g, const Matrix<T>&) {
    if (tape.needs_grad(a)) tape.accumulate(a, g.cwiseProduct(b.value()));
    if (tape.needs_grad(b)) tape.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& tape = *a.tape();
  return tape.record(a.value() * s, {a}, [&tape, a, s](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g * s);
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().array() + s;
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g);
  });
}

// a + r, with r a 1xC row broadcast over every row of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> r) {
  require(r.rows() == 1 && r.cols() == a.cols(), ErrorKind::kShapeMismatch,
          "add_row: " + shape_str(a.rows(), a.cols()) + " + " + shape_str(r.rows(), r.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().rowwise() + r.value().row(0);
  return tape.record(std::move(out), {a, r}, [&tape, a, r](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g);
    if (tape.needs_grad(r)) tape.accumulate(r, g.colwise().sum());
  });
}

// a * r, with r a 1xC row broadcast over every row of a.
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> r) {
  require(r.rows() == 1 && r.cols() == a.cols(), ErrorKind::kShapeMismatch,
          "mul_row: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(r.rows(), r.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().array().rowwise() * r.value().row(0).array();
  return tape.record(std::move(out), {a, r}, [&tape, a, r](const Matrix<T>& g, const Matrix<T>&) {
    if (tape.needs_grad(a)) {
      Matrix<T> ga = g.array().rowwise() * r.value().row(0).array();
      tape.accumulate(a, ga);
    }
    if (tape.needs_grad(r)) tape.accumulate(r, g.cwiseProduct(a.value()).colwise().sum());
  });
}

// a + c, with c an Rx1 column broadcast over every column of a.
template <typename T>
Var<T> add_col(Var<T> a, Var<T> c) {
  require(c.cols() == 1 && c.rows() == a.rows(), ErrorKind::kShapeMismatch,
          "add_col: " + shape_str(a.rows(), a.cols()) + " + " + shape_str(c.rows(), c.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().colwise() + c.value().col(0);
  return tape.record(std::move(out), {a, c}, [&tape, a, c](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g);
    if (tape.needs_grad(c)) tape.accumulate(c, g.rowwise().sum());
  });
}

// a / c, with c an Rx1 column broadcast over every column of a.
template <typename T>
Var<T> div_col(Var<T> a, Var<T> c) {
  require(c.cols() == 1 && c.rows() == a.rows(), ErrorKind::kShapeMismatch,
          "div_col: " + shape_str(a.rows(), a.cols()) + " / " + shape_str(c.rows(), c.cols()));
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().array().colwise() / c.value().col(0).array();
  return tape.record(std::move(out), {a, c}, [&tape, a, c](const Matrix<T>& g, const Matrix<T>& out) {
    if (tape.needs_grad(a)) {
      Matrix<T> ga = g.array().colwise() / c.value().col(0).array();
      tape.accumulate(a, ga);
    }
    if (tape.needs_grad(c)) {
      Matrix<T> gc = -(g.cwiseProduct(out).rowwise().sum().array() / c.value().col(0).array());
      tape.accumulate(c, gc);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return tape.record(std::move(out), {a}, [&tape, a, r, c](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, Matrix<T>::Constant(r, c, g(0, 0)));
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// Per-row sums, Rx1.
template <typename T>
Var<T> sum_cols(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().rowwise().sum();
  const Index c = a.cols();
  return tape.record(std::move(out), {a}, [&tape, a, c](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g.col(0).replicate(1, c));
  });
}

// Per-column sums, 1xC.
template <typename T>
Var<T> sum_rows(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().colwise().sum();
  const Index r = a.rows();
  return tape.record(std::move(out), {a}, [&tape, a, r](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, g.row(0).replicate(r, 1));
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <typename T>
Var<T> square(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().array().square();
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>&) {
    tape.accumulate(a, T(2) * g.cwiseProduct(a.value()));
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = (T(1) + (-a.value().array()).exp()).inverse();
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>& y) {
    Matrix<T> ga = g.array() * y.array() * (T(1) - y.array());
    tape.accumulate(a, ga);
  });
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> s = (T(1) + (-a.value().array()).exp()).inverse();
  Matrix<T> out = a.value().cwiseProduct(s);
  return tape.record(std::move(out), {a}, [&tape, a, s = std::move(s)](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> ga = g.array() * s.array() * (T(1) + a.value().array() * (T(1) - s.array()));
    tape.accumulate(a, ga);
  });
}

// elu(x) + 1: strictly positive feature map for linear attention.
template <typename T>
Var<T> elu_plus_one(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().unaryExpr([](T x) { return x > T(0) ? x + T(1) : std::exp(x); });
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>& y) {
    Matrix<T> d = a.value().binaryExpr(y, [](T x, T yv) { return x > T(0) ? T(1) : yv; });
    tape.accumulate(a, g.cwiseProduct(d));
  });
}

// Row-wise softmax.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    const T m = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return tape.record(std::move(out), {a}, [&tape, a](const Matrix<T>& g, const Matrix<T>& p) {
    Matrix<T> gp = g.cwiseProduct(p);
    Matrix<T> ga = gp - (p.array().colwise() * gp.rowwise().sum().array()).matrix();
    tape.accumulate(a, ga);
  });
}

// Row-wise normalization to zero mean and unit variance (no affine terms).
template <typename T>
Var<T> layer_norm_rows(Var<T> a, T eps = T(1e-6)) {
  Tape<T>& tape = *a.tape();
  const Index n = a.cols();
  Matrix<T> out(a.rows(), n);
  Matrix<T> inv_std(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const T mu = a.value().row(i).mean();
    const T var = (a.value().row(i).array() - mu).square().mean();
    inv_std(i, 0) = T(1) / std::sqrt(var + eps);
    out.row(i) = (a.value().row(i).array() - mu) * inv_std(i, 0);
  }
  return tape.record(std::move(out), {a},
                     [&tape, a, inv_std = std::move(inv_std)](const Matrix<T>& g, const Matrix<T>& y) {
                       Matrix<T> ga(g.rows(), g.cols());
                       for (Index i = 0; i < g.rows(); ++i) {
                         const T gm = g.row(i).mean();
                         const T gy = g.row(i).dot(y.row(i)) / static_cast<T>(g.cols());
                         ga.row(i) = inv_std(i, 0) * (g.row(i).array() - gm - y.row(i).array() * gy);
                       }
                       tape.accumulate(a, ga);
                     });
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> slice_cols(Var<T> a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorKind::kShapeMismatch,
          "slice_cols out of range");
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().middleCols(start, count);
  const Index r = a.rows(), c = a.cols();
  return tape.record(std::move(out), {a}, [&tape, a, start, count, r, c](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> ga = Matrix<T>::Zero(r, c);
    ga.middleCols(start, count) = g;
    tape.accumulate(a, ga);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorKind::kShapeMismatch,
          "slice_rows out of range");
  Tape<T>& tape = *a.tape();
  Matrix<T> out = a.value().middleRows(start, count);
  const Index r = a.rows(), c = a.cols();
  return tape.record(std::move(out), {a}, [&tape, a, start, count, r, c](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> ga = Matrix<T>::Zero(r, c);
    ga.middleRows(start, count) = g;
    tape.accumulate(a, ga);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::kInvalidArgument, "concat_cols: no inputs");
  Tape<T>& tape = *parts.front().tape();
  const Index r = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rows() == r, ErrorKind::kShapeMismatch, "concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix<T> out(r, total);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return tape.record(std::move(out), std::span<const Var<T>>(parts),
                     [&tape, parts](const Matrix<T>& g, const Matrix<T>&) {
                       Index o = 0;
                       for (const auto& p : parts) {
                         if (tape.needs_grad(p)) tape.accumulate(p, g.middleCols(o, p.cols()));
                         o += p.cols();
                       }
                     });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::kInvalidArgument, "concat_rows: no inputs");
  Tape<T>& tape = *parts.front().tape();
  const Index c = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, ErrorKind::kShapeMismatch, "concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix<T> out(total, c);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return tape.record(std::move(out), std::span<const Var<T>>(parts),
                     [&tape, parts](const Matrix<T>& g, const Matrix<T>&) {
                       Index o = 0;
                       for (const auto& p : parts) {
                         if (tape.needs_grad(p)) tape.accumulate(p, g.middleRows(o, p.rows()));
                         o += p.rows();
                       }
                     });
}

// Embedding lookup: row i of the result is row ids[i] of the table.
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int> ids) {
  Tape<T>& tape = *table.tape();
  Matrix<T> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), ErrorKind::kInvalidArgument,
            "gather_rows: id " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const Index r = table.rows(), c = table.cols();
  return tape.record(std::move(out), {table},
                     [&tape, table, ids = std::move(ids), r, c](const Matrix<T>& g, const Matrix<T>&) {
                       Matrix<T> gt = Matrix<T>::Zero(r, c);
                       for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Index>(i));
                       tape.accumulate(table, gt);
                     });
}

// Rotary phase rotation applied independently inside each head. Within a head
// of width head_dim, channel pair (2i, 2i+1) for 2i < rotary_dims is rotated
// by positions[r] * base^(-2i/rotary_dims); the remaining channels pass
// through unchanged.
template <typename T>
Var<T> rope(Var<T> a, const std::vector<T>& positions, Index head_dim, Index rotary_dims, T base = T(10000)) {
  require(static_cast<Index>(positions.size()) == a.rows(), ErrorKind::kShapeMismatch,
          "rope: one position per row required");
  require(rotary_dims % 2 == 0 && rotary_dims <= head_dim && a.cols() % head_dim == 0, ErrorKind::kShapeMismatch,
          "rope: width must be a multiple of head_dim and rotary_dims even and <= head_dim");
  Tape<T>& tape = *a.tape();
  const Index half = rotary_dims / 2;
  Matrix<T> cosv(a.rows(), half), sinv(a.rows(), half);
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const T freq = std::pow(base, -T(2) * static_cast<T>(i) / static_cast<T>(rotary_dims));
      cosv(r, i) = std::cos(positions[r] * freq);
      sinv(r, i) = std::sin(positions[r] * freq);
    }
  }
  auto rotate = [half, head_dim](const Matrix<T>& x, const Matrix<T>& c, const Matrix<T>& s, T sign) {
    Matrix<T> y = x;
    for (Index r = 0; r < x.rows(); ++r) {
      for (Index h = 0; h < x.cols(); h += head_dim) {
        for (Index i = 0; i < half; ++i) {
          const T x0 = x(r, h + 2 * i), x1 = x(r, h + 2 * i + 1);
          y(r, h + 2 * i) = x0 * c(r, i) - sign * x1 * s(r, i);
          y(r, h + 2 * i + 1) = sign * x0 * s(r, i) + x1 * c(r, i);
        }
      }
    }
    return y;
  };
  Matrix<T> out = rotate(a.value(), cosv, sinv, T(1));
  return tape.record(std::move(out), {a},
                     [&tape, a, rotate, cosv = std::move(cosv), sinv = std::move(sinv)](const Matrix<T>& g,
                                                                                        const Matrix<T>&) {
                       tape.accumulate(a, rotate(g, cosv, sinv, T(-1)));
                     });
}

// Per-row cosine similarity, Rx1. Rows where either side has norm below eps
// produce 0 and are reported through `valid` (1 = counted, 0 = skipped).
template <typename T>
Var<T> row_cosine(Var<T> a, Var<T> b, T eps, std::vector<char>* valid = nullptr) {
  detail::check_same_shape(a, b, "row_cosine");
  Tape<T>& tape = *a.tape();
  const Index n = a.rows();
  Matrix<T> out = Matrix<T>::Zero(n, 1);
  Matrix<T> na(n, 1), nb(n, 1);
  std::vector<char> ok(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    na(i, 0) = a.value().row(i).norm();
    nb(i, 0) = b.value().row(i).norm();
    if (na(i, 0) >= eps && nb(i, 0) >= eps) {
      ok[static_cast<std::size_t>(i)] = 1;
      out(i, 0) = a.value().row(i).dot(b.value().row(i)) / (na(i, 0) * nb(i, 0));
    }
  }
  if (valid) *valid = ok;
  return tape.record(std::move(out), {a, b},
                     [&tape, a, b, na = std::move(na), nb = std::move(nb), ok = std::move(ok)](
                         const Matrix<T>& g, const Matrix<T>& c) {
                       Matrix<T> ga = Matrix<T>::Zero(a.rows(), a.cols());
                       Matrix<T> gb = Matrix<T>::Zero(b.rows(), b.cols());
                       for (Index i = 0; i < a.rows(); ++i) {
                         if (!ok[static_cast<std::size_t>(i)]) continue;
                         const T s = g(i, 0);
                         const T inv = T(1) / (na(i, 0) * nb(i, 0));
                         ga.row(i) = s * (b.value().row(i) * inv - a.value().row(i) * (c(i, 0) / (na(i, 0) * na(i, 0))));
                         gb.row(i) = s * (a.value().row(i) * inv - b.value().row(i) * (c(i, 0) / (nb(i, 0) * nb(i, 0))));
                       }
                       if (tape.needs_grad(a)) tape.accumulate(a, ga);
                       if (tape.needs_grad(b)) tape.accumulate(b, gb);
                     });
}

// ---------------------------------------------------------------------------
// Convolutions. Feature maps are stored as [C x (H*W)], pixels row-major.

struct Conv2dGeometry {
  Index in_channels = 1;
  Index height = 1;
  Index width = 1;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;

  Index out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

namespace detail {

template <typename T>
Matrix<T> im2col(const Matrix<T>& x, const Conv2dGeometry& g) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  Matrix<T> cols = Matrix<T>::Zero(g.in_channels * k * k, ho * wo);
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Index row = (c * k + ky) * k + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * g.stride + kx - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            cols(row, oy * wo + ox) = x(c, iy * g.width + ix);
          }
        }
      }
  return cols;
}

template <typename T>
Matrix<T> col2im(const Matrix<T>& cols, const Conv2dGeometry& g) {
  const Index ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  Matrix<T> x = Matrix<T>::Zero(g.in_channels, g.height * g.width);
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Index row = (c * k + ky) * k + kx;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * g.stride + kx - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            x(c, iy * g.width + ix) += cols(row, oy * wo + ox);
          }
        }
      }
  return x;
}

}  // namespace detail

// weight: [C_out x (C_in*k*k)], bias: [C_out x 1].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, const Conv2dGeometry& geom) {
  require(x.rows() == geom.in_channels && x.cols() == geom.height * geom.width, ErrorKind::kShapeMismatch,
          "conv2d: input " + shape_str(x.rows(), x.cols()) + " does not match geometry");
  require(weight.cols() == geom.in_channels * geom.kernel * geom.kernel, ErrorKind::kShapeMismatch,
          "conv2d: weight width mismatch");
  Tape<T>& tape = *x.tape();
  Matrix<T> cols = detail::im2col(x.value(), geom);
  Matrix<T> out;
  out.noalias() = weight.value() * cols;
  out.colwise() += bias.value().col(0);
  return tape.record(std::move(out), {x, weight, bias},
                     [&tape, x, weight, bias, geom, cols = std::move(cols)](const Matrix<T>& g, const Matrix<T>&) {
                       if (tape.needs_grad(weight)) tape.accumulate(weight, g * cols.transpose());
                       if (tape.needs_grad(bias)) tape.accumulate(bias, g.rowwise().sum());
                       if (tape.needs_grad(x)) {
                         Matrix<T> dcols = weight.value().transpose() * g;
                         tape.accumulate(x, detail::col2im(dcols, geom));
                       }
                     });
}

namespace detail {

// Index map for space-to-depth: source (c, y, x) of [C x H*W] to destination
// (c*r*r + dy*r + dx, y/r, x/r) of [C*r*r x (H/r)*(W/r)].
inline std::vector<Index> unshuffle_index(Index channels, Index height, Index width, Index r) {
  const Index ho = height / r, wo = width / r;
  std::vector<Index> dst(static_cast<std::size_t>(channels * height * width));
  for (Index c = 0; c < channels; ++c)
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x) {
        const Index oc = c * r * r + (y % r) * r + (x % r);
        dst[static_cast<std::size_t>(c * height * width + y * width + x)] = oc * ho * wo + (y / r) * wo + (x / r);
      }
  return dst;
}

}  // namespace detail

// Space-to-depth: [C x H*W] -> [C*r*r x (H/r)*(W/r)].
template <typename T>
Var<T> pixel_unshuffle(Var<T> x, Index channels, Index height, Index width, Index r) {
  require(x.rows() == channels && x.cols() == height * width && height % r == 0 && width % r == 0,
          ErrorKind::kShapeMismatch, "pixel_unshuffle: bad geometry");
  Tape<T>& tape = *x.tape();
  auto map = detail::unshuffle_index(channels, height, width, r);
  Matrix<T> out(channels * r * r, (height / r) * (width / r));
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) dst[map[i]] = src[i];
  return tape.record(std::move(out), {x}, [&tape, x, map = std::move(map)](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> gx(x.rows(), x.cols());
    for (std::size_t i = 0; i < map.size(); ++i) gx.data()[i] = g.data()[map[i]];
    tape.accumulate(x, gx);
  });
}

// Depth-to-space, inverse of pixel_unshuffle: [C*r*r x H*W] -> [C x (rH)*(rW)].
template <typename T>
Var<T> pixel_shuffle(Var<T> x, Index channels, Index height, Index width, Index r) {
  require(x.rows() == channels * r * r && x.cols() == height * width, ErrorKind::kShapeMismatch,
          "pixel_shuffle: bad geometry");
  Tape<T>& tape = *x.tape();
  auto map = detail::unshuffle_index(channels, height * r, width * r, r);
  Matrix<T> out(channels, height * r * width * r);
  const T* src = x.value().data();
  T* dst = out.data();
  for (std::size_t i = 0; i < map.size(); ++i) dst[i] = src[map[i]];
  return tape.record(std::move(out), {x}, [&tape, x, map = std::move(map)](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> gx(x.rows(), x.cols());
    for (std::size_t i = 0; i < map.size(); ++i) gx.data()[map[i]] = g.data()[i];
    tape.accumulate(x, gx);
  });
}

// Depthwise 1-D convolution along rows (time) of x [L x C] with kernel
// weight [K x C], zero "same" padding, K odd.
template <typename T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> weight) {
  const Index k = weight.rows();
  require(k % 2 == 1 && weight.cols() == x.cols(), ErrorKind::kShapeMismatch,
          "depthwise_conv1d: kernel must be [K odd x C]");
  Tape<T>& tape = *x.tape();
  const Index len = x.rows(), pad = k / 2;
  Matrix<T> out = Matrix<T>::Zero(len, x.cols());
  for (Index j = 0; j < k; ++j) {
    const Index shift = j - pad;
    const Index lo = std::max<Index>(0, -shift), hi = std::min<Index>(len, len - shift);
    if (hi <= lo) continue;
    out.middleRows(lo, hi - lo).array() +=
        x.value().middleRows(lo + shift, hi - lo).array().rowwise() * weight.value().row(j).array();
  }
  return tape.record(std::move(out), {x, weight}, [&tape, x, weight, k, pad, len](const Matrix<T>& g, const Matrix<T>&) {
    Matrix<T> gx = Matrix<T>::Zero(len, x.cols());
    Matrix<T> gw = Matrix<T>::Zero(k, x.cols());
    for (Index j = 0; j < k; ++j) {
      const Index shift = j - pad;
      const Index lo = std::max<Index>(0, -shift), hi = std::min<Index>(len, len - shift);
      if (hi <= lo) continue;
      gx.middleRows(lo + shift, hi - lo).array() +=
          g.middleRows(lo, hi - lo).array().rowwise() * weight.value().row(j).array();
      gw.row(j) = g.middleRows(lo, hi - lo).cwiseProduct(x.value().middleRows(lo + shift, hi - lo)).colwise().sum();
    }
    if (tape.needs_grad(x)) tape.accumulate(x, gx);
    if (tape.needs_grad(weight)) tape.accumulate(weight, gw);
  });
}

}  // namespace acestep
