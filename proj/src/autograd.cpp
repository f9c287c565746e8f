#include "beard/autograd.hpp"

#include "beard/quantizer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace beard {

// ---------------------------------------------------------------------------
// ParameterSet

ParameterSet::ParameterSet(const ParameterSet& other) { *this = other; }

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) {
    auto& added = add(p->name, p->value);
    added.grad = p->grad;
  }
  return *this;
}

Parameter& ParameterSet::add(const std::string& name, Matrix init) {
  if (index_.contains(name)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->zero_grad();
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterSet: no parameter '" + name + "'");
  return *params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParameterSet: no parameter '" + name + "'");
  return *params_[it->second];
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::uint64_t ParameterSet::content_hash() const {
  Fnv1a h;
  for (const auto& p : params_) {
    h.update(p->name);
    h.update(p->value);
  }
  return h.digest();
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("Var: unbound variable");
  return tape_->value(id_);
}

double Var::scalar() const {
  const auto& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("Var::scalar: not a 1x1 value");
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::param(Parameter& p) {
  Node n;
  n.op = "param:" + p.name;
  n.value = p.value;
  n.requires_grad = true;
  Parameter* target = &p;
  n.backward = [target](const Matrix& g, const Matrix&) { target->grad += g; };
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::custom(std::string op, Matrix value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const auto& p : parents) {
    if (p.tape() != this) throw std::invalid_argument("Tape: parent '" + n.op + "' belongs to another tape");
    n.requires_grad = n.requires_grad || requires_grad(p.id());
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Matrix& grad) {
  auto& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (grad.rows() != n.value.rows() || grad.cols() != n.value.cols())
    throw std::logic_error("Tape: gradient shape mismatch at '" + n.op + "'");
  if (n.has_grad) {
    n.grad += grad;
  } else {
    n.grad = grad;
    n.has_grad = true;
  }
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("Tape::backward: loss belongs to another tape");
  if (loss.rows() != 1 || loss.cols() != 1) throw std::invalid_argument("Tape::backward: loss must be a scalar");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  if (!nodes_[loss.id()].requires_grad) return;
  accumulate(loss, Matrix::Ones(1, 1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad) continue;
    if (!n.backward) throw UnsupportedOp("no gradient rule for op '" + n.op + "'");
    n.backward(n.grad, n.value);
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string shape(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void same_shape(Var a, Var b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + shape(a.value()) + " vs " + shape(b.value()));
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: shape mismatch " + shape(a.value()) + " * " + shape(b.value()));
  Tape* t = a.tape();
  return t->custom("matmul", a.value() * b.value(), {a, b}, [t, a, b](const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t->accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t->accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt: shape mismatch " + shape(a.value()) + " * " + shape(b.value()) + "^T");
  Tape* t = a.tape();
  return t->custom("matmul_nt", a.value() * b.value().transpose(), {a, b}, [t, a, b](const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t->accumulate(a, g * b.value());
    if (b.requires_grad()) t->accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  Tape* t = a.tape();
  return t->custom("add", a.value() + b.value(), {a, b}, [t, a, b](const Matrix& g, const Matrix&) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  Tape* t = a.tape();
  return t->custom("sub", a.value() - b.value(), {a, b}, [t, a, b](const Matrix& g, const Matrix&) {
    t->accumulate(a, g);
    t->accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  Tape* t = a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  return t->custom("mul", std::move(out), {a, b}, [t, a, b](const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t->accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t->accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape();
  return t->custom("scale", a.value() * s, {a}, [t, a, s](const Matrix& g, const Matrix&) { t->accumulate(a, g * s); });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1x" + std::to_string(a.cols()));
  Tape* t = a.tape();
  Matrix out = a.value().rowwise() + RowVector(row.value().row(0));
  return t->custom("add_row", std::move(out), {a, row}, [t, a, row](const Matrix& g, const Matrix&) {
    t->accumulate(a, g);
    if (row.requires_grad()) t->accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row must be 1x" + std::to_string(a.cols()));
  Tape* t = a.tape();
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return t->custom("mul_row", std::move(out), {a, row}, [t, a, row](const Matrix& g, const Matrix&) {
    if (a.requires_grad()) t->accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (row.requires_grad()) t->accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var add_const(Var a, const Matrix& c) {
  require(a.rows() == c.rows() && a.cols() == c.cols(), "add_const: shape mismatch " + shape(a.value()) + " vs " + shape(c));
  Tape* t = a.tape();
  return t->custom("add_const", a.value() + c, {a}, [t, a](const Matrix& g, const Matrix&) { t->accumulate(a, g); });
}

Var gelu(Var a) {
  Tape* t = a.tape();
  Matrix out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); });
  return t->custom("gelu", std::move(out), {a}, [t, a](const Matrix& g, const Matrix&) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Matrix d = a.value().unaryExpr([inv_sqrt_2pi](double x) {
      return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    t->accumulate(a, g.cwiseProduct(d));
  });
}

Var softmax_rows(Var a) {
  Tape* t = a.tape();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return t->custom("softmax_rows", std::move(out), {a}, [t, a](const Matrix& g, const Matrix& y) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t->accumulate(a, y.cwiseProduct((g.colwise() - dot)));
  });
}

namespace {

// Shared backward of row standardization y = (x - mean) / s for a fixed
// divisor s per row: dx = (g - mean(g) - y * mean(g * y)) / s when s depends
// on x through the std, and (g - mean(g)) / s when s is a constant floor.
Matrix standardize_backward(const Matrix& g, const Matrix& y, const Eigen::VectorXd& divisor,
                            const std::vector<bool>& floored) {
  const auto n = static_cast<double>(g.cols());
  Matrix dx(g.rows(), g.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    const double gm = g.row(r).sum() / n;
    if (floored[static_cast<std::size_t>(r)]) {
      dx.row(r) = (g.row(r).array() - gm).matrix() / divisor(r);
    } else {
      const double gy = g.row(r).dot(y.row(r)) / n;
      dx.row(r) = ((g.row(r).array() - gm) - y.row(r).array() * gy).matrix() / divisor(r);
    }
  }
  return dx;
}

}  // namespace

Var layer_norm_rows(Var a, double eps) {
  require(a.cols() >= 1, "layer_norm_rows: empty rows");
  Tape* t = a.tape();
  const Matrix& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd divisor(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / n;
    divisor(r) = std::sqrt(var + eps);
    out.row(r) = ((x.row(r).array() - mu) / divisor(r)).matrix();
  }
  return t->custom("layer_norm_rows", std::move(out), {a}, [t, a, divisor](const Matrix& g, const Matrix& y) {
    t->accumulate(a, standardize_backward(g, y, divisor, std::vector<bool>(static_cast<std::size_t>(g.rows()), false)));
  });
}

Var standardize_rows(Var a) {
  require(a.cols() >= 2, "standardize_rows: rows must have length >= 2");
  Tape* t = a.tape();
  const Matrix& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Matrix out(x.rows(), x.cols());
  Eigen::VectorXd divisor(x.rows());
  std::vector<bool> floored(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = normalize_vector(RowVector(x.row(r)));
    const double mu = x.row(r).mean();
    const double sd = std::sqrt((x.row(r).array() - mu).square().sum() / n);
    floored[static_cast<std::size_t>(r)] = sd <= kNormStdFloor;
    divisor(r) = std::max(sd, kNormStdFloor);
  }
  return t->custom("standardize_rows", std::move(out), {a}, [t, a, divisor, floored](const Matrix& g, const Matrix& y) {
    t->accumulate(a, standardize_backward(g, y, divisor, floored));
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
  require(start >= 0 && n >= 0 && start + n <= a.cols(), "slice_cols: range out of bounds");
  Tape* t = a.tape();
  Matrix out = a.value().middleCols(start, n);
  return t->custom("slice_cols", std::move(out), {a}, [t, a, start, n](const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleCols(start, n) = g;
    t->accumulate(a, full);
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index n) {
  require(start >= 0 && n >= 0 && start + n <= a.rows(), "slice_rows: range out of bounds");
  Tape* t = a.tape();
  Matrix out = a.value().middleRows(start, n);
  return t->custom("slice_rows", std::move(out), {a}, [t, a, start, n](const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, n) = g;
    t->accumulate(a, full);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Tape* t = parts.front().tape();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts.front().rows(), "concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t->custom("concat_cols", std::move(out), parts, [t, parts](const Matrix& g, const Matrix&) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) t->accumulate(p, g.middleCols(at, p.cols()));
      at += p.cols();
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Tape* t = parts.front().tape();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts.front().cols(), "concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts.front().cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t->custom("concat_rows", std::move(out), parts, [t, parts](const Matrix& g, const Matrix&) {
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) t->accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Tape* t = table.tape();
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows: id " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return t->custom("gather_rows", std::move(out), {table}, [t, table, ids](const Matrix& g, const Matrix&) {
    Matrix full = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) full.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t->accumulate(table, full);
  });
}

Var im2col(Var a, int kernel, int stride, int pad) {
  require(kernel >= 1 && stride >= 1 && pad >= 0, "im2col: invalid geometry");
  const Eigen::Index T = a.rows(), C = a.cols();
  const Eigen::Index span = T + 2 * pad - kernel;
  require(span >= 0, "im2col: input shorter than kernel");
  const Eigen::Index T_out = span / stride + 1;
  Tape* t = a.tape();
  Matrix out = Matrix::Zero(T_out, kernel * C);
  for (Eigen::Index o = 0; o < T_out; ++o)
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index src = o * stride - pad + k;
      if (src >= 0 && src < T) out.block(o, k * C, 1, C) = a.value().row(src);
    }
  return t->custom("im2col", std::move(out), {a}, [t, a, kernel, stride, pad, T, C, T_out](const Matrix& g, const Matrix&) {
    Matrix dx = Matrix::Zero(T, C);
    for (Eigen::Index o = 0; o < T_out; ++o)
      for (int k = 0; k < kernel; ++k) {
        const Eigen::Index src = o * stride - pad + k;
        if (src >= 0 && src < T) dx.row(src) += g.block(o, k * C, 1, C);
      }
    t->accumulate(a, dx);
  });
}

Var sum(Var a) {
  Tape* t = a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t->custom("sum", std::move(out), {a}, [t, a](const Matrix& g, const Matrix&) {
    t->accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

}  // namespace beard
