#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mstg/errors.hpp"

namespace mstg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Row-major storage of an N-d shape as a matrix: leading dims fold into rows,
// the last dim is the column count. Rank-1 shapes are a single row.
inline std::pair<Index, Index> matrix_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  return {shape_numel(shape) / shape.back(), shape.back()};
}

inline void check_shape(const Shape& shape) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
}

// Identity token that is fresh on construction, copy and assignment, so two
// tensors never share one even when an address is reused.
class TensorId {
 public:
  TensorId() : value_(next()) {}
  TensorId(const TensorId&) : value_(next()) {}
  TensorId& operator=(const TensorId&) {
    value_ = next();
    return *this;
  }
  std::uint64_t value() const { return value_; }

 private:
  static std::uint64_t next() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed) + 1;
  }
  std::uint64_t value_;
};

/// Dense row-major tensor with an optional gradient buffer.
///
/// The scalar type fixes the precision: `Tensor<double>` is used by the test
/// and verification paths, `Tensor<float>` by training.
template <typename Scalar>
class Tensor {
 public:
  using Mat = Matrix<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), requires_grad_(requires_grad) {
    check_shape(shape_);
    auto [r, c] = matrix_dims(shape_);
    data_ = Mat::Zero(r, c);
  }

  Tensor(Shape shape, Mat data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    check_shape(shape_);
    auto [r, c] = matrix_dims(shape_);
    if (data_.rows() != r || data_.cols() != c) {
      throw ShapeError("data " + std::to_string(data_.rows()) + "x" + std::to_string(data_.cols()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor from_matrix(Mat m, bool requires_grad = false) {
    Shape s{m.rows(), m.cols()};
    return Tensor(std::move(s), std::move(m), requires_grad);
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }

  Mat& data() { return data_; }
  const Mat& data() const { return data_; }

  /// Unique per object and refreshed whenever the tensor is assigned.
  std::uint64_t id() const { return id_.value(); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  const Mat& grad() const {
    if (!grad_) throw TapeError("tensor has no gradient; run backward first");
    return *grad_;
  }
  Mat& grad() {
    if (!grad_) throw TapeError("tensor has no gradient; run backward first");
    return *grad_;
  }
  void clear_grad() { grad_.reset(); }

  template <typename Derived>
  void accumulate_grad(const Eigen::MatrixBase<Derived>& g) {
    if (grad_) {
      *grad_ += g;
    } else {
      grad_ = g;
    }
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>(), requires_grad_);
  }

 private:
  Shape shape_{1};
  Mat data_ = Mat::Zero(1, 1);
  bool requires_grad_ = false;
  std::optional<Mat> grad_;
  TensorId id_;
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  using Mat = Matrix<Scalar>;

  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>& tape() const { return *tape_; }
  Index id() const { return id_; }

  const Mat& value() const { return tape_->value(id_); }
  const Shape& shape() const { return tape_->shape(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const { return value()(0, 0); }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, Index id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  Index id_ = -1;
};

/// Single-use record of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// `backward` walks the nodes once in reverse and deposits leaf gradients into
/// the Tensors the leaves were created from; after that the tape is consumed.
/// A tape created with `record_gradients = false` keeps forward values only.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  // Receives the gradient of the node's output and the output value itself.
  using BackwardFn = std::function<void(Tape&, const Mat& grad_out, const Mat& out)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {
    nodes_.reserve(1024);
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  /// Records a tensor as a leaf. Gradients flow back into `t` when it requires
  /// grad; `t` must outlive the tape. Repeated calls for the same tensor return
  /// the same node, so `t` must not be mutated while the tape is live.
  Var<Scalar> leaf(Tensor<Scalar>& t) {
    ensure_open();
    if (auto it = leaf_ids_.find(t.id()); it != leaf_ids_.end()) return Var<Scalar>(this, it->second);
    leaf_ids_.emplace(t.id(), size());
    Node n;
    n.value = t.data();
    n.shape = t.shape();
    n.needs_grad = recording_ && t.requires_grad();
    n.leaf = n.needs_grad ? &t : nullptr;
    n.op = "leaf";
    return push(std::move(n));
  }

  Var<Scalar> constant(Mat value, Shape shape = {}) {
    ensure_open();
    if (shape.empty()) shape = {value.rows(), value.cols()};
    check_matches(value, shape, "constant");
    check_finite(value, "constant");
    Node n;
    n.value = std::move(value);
    n.shape = std::move(shape);
    n.op = "constant";
    return push(std::move(n));
  }

  /// Appends an op output. `fn` is kept only when some input needs a gradient.
  Var<Scalar> record(const char* op, Mat value, Shape shape, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn fn) {
    ensure_open();
    check_matches(value, shape, op);
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.shape = std::move(shape);
    n.op = op;
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw TapeError(std::string(op) + ": input recorded on a different tape");
      n.inputs.push_back(in.id_);
      n.needs_grad = n.needs_grad || nodes_[in.id_].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  Var<Scalar> record(const char* op, Mat value, std::initializer_list<Var<Scalar>> inputs, BackwardFn fn) {
    Shape shape{value.rows(), value.cols()};
    return record(op, std::move(value), std::move(shape), inputs, std::move(fn));
  }

  bool needs_grad(const Var<Scalar>& v) const { return nodes_[v.id_].needs_grad; }

  /// Adds `g` into the pending gradient of `v`; no-op when `v` needs none.
  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id_];
    if (!n.needs_grad) return;
    if (n.has_grad) {
      n.grad += g;
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  void backward(const Var<Scalar>& loss) {
    if (loss.tape_ != this) throw TapeError("backward: loss belongs to a different tape");
    if (consumed_) throw TapeError("backward: tape already consumed; re-run the forward pass");
    if (!recording_) throw TapeError("backward: tape was created without gradient recording");
    const Node& root = nodes_[loss.id_];
    if (root.value.size() != 1) {
      throw TapeError("backward: loss must be scalar, got shape " + shape_str(root.shape));
    }
    consumed_ = true;
    if (!root.needs_grad) return;
    accumulate(loss, Mat::Ones(1, 1));
    for (Index id = loss.id_; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, n.grad, n.value);
      if (n.leaf) n.leaf->accumulate_grad(n.grad);
      n.backward = nullptr;
      n.grad.resize(0, 0);
      n.has_grad = false;
    }
  }

  const Mat& value(Index id) const { return nodes_[id].value; }
  const Shape& shape(Index id) const { return nodes_[id].shape; }
  const std::vector<Index>& inputs(Index id) const { return nodes_[id].inputs; }

 private:
  struct Node {
    Mat value;
    Shape shape;
    Mat grad;
    bool needs_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Tensor<Scalar>* leaf = nullptr;
    std::vector<Index> inputs;
    const char* op = "";
  };

  Var<Scalar> push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, size() - 1);
  }

  void ensure_open() const {
    if (consumed_) throw TapeError("tape already consumed by backward");
  }

  static void check_matches(const Mat& value, const Shape& shape, const char* op) {
    auto [r, c] = matrix_dims(shape);
    if (value.rows() != r || value.cols() != c) {
      throw ShapeError(std::string(op) + ": value does not match shape " + shape_str(shape));
    }
  }

  static void check_finite(const Mat& value, const char* op) {
    if (!value.allFinite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, Index> leaf_ids_;
  bool recording_ = true;
  bool consumed_ = false;
};

}  // namespace mstg
