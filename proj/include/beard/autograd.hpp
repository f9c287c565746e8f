#pragma once

#include "beard/common.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace beard {

/// Named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
};

/// Owns parameters in insertion order; names are unique.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, Matrix init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.cbegin(); }
  auto end() const { return params_.cend(); }

  void zero_grad();
  std::size_t scalar_count() const;
  std::uint64_t content_hash() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Thrown when backpropagation reaches a node without a gradient rule.
class UnsupportedOp : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order;
/// backward() visits them in reverse and only propagates into nodes that lie
/// on a path to the loss, so parameters off that path keep an exactly zero
/// gradient.
class Tape {
 public:
  /// Receives the gradient w.r.t. the node and the node's own value.
  using BackwardFn = std::function<void(const Matrix& grad_out, const Matrix& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf: gradients reaching it are added to p.grad.
  Var param(Parameter& p);
  /// Non-trainable leaf (frozen weights, inputs, masks).
  Var constant(Matrix value);

  /// Adds a node computed outside the built-in ops. `backward` receives the
  /// gradient w.r.t. this node and must call accumulate() on the parents.
  /// A null `backward` makes the node opaque: reaching it during backward()
  /// throws UnsupportedOp naming `op`.
  Var custom(std::string op, Matrix value, std::vector<Var> parents, BackwardFn backward);

  void accumulate(Var v, const Matrix& grad);
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Built-in differentiable ops. All shapes are checked; violations throw
// std::invalid_argument.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1 x C row over every row of a
Var mul_row(Var a, Var row);
Var add_const(Var a, const Matrix& c);
Var gelu(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var a, double eps = 1e-5);
/// Per-row normalize_vector (mean 0, std 1, divisor floored at 1e-5).
Var standardize_rows(Var a);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index n);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index n);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
/// Rows of `table` selected by `ids`.
Var gather_rows(Var table, const std::vector<int>& ids);
/// 1-D convolution lowering: row t holds input rows [t*stride - pad, t*stride - pad + kernel)
/// concatenated (zeros outside the input).
Var im2col(Var a, int kernel, int stride, int pad);
Var sum(Var a);
Var mean(Var a);

}  // namespace beard
