#include "beard/losses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace beard {

namespace {

std::size_t count_selected(const FrameMask& m, bool value) {
  std::size_t n = 0;
  for (bool b : m) n += (b == value);
  return n;
}

void check_rows(Eigen::Index rows, std::size_t a, std::size_t b, const char* op) {
  if (static_cast<std::size_t>(rows) != a || a != b)
    throw std::invalid_argument(std::string(op) + ": row count, target count and mask length must agree");
}

double cosine(const RowVector& s, const RowVector& t) {
  return s.dot(t) / std::max(s.norm() * t.norm(), kCosineEps);
}

// d cos(s, t) / d s.
RowVector cosine_grad(const RowVector& s, const RowVector& t) {
  const double ns = s.norm(), nt = t.norm();
  const double prod = ns * nt;
  if (prod <= kCosineEps) return t / kCosineEps;
  return t / prod - (s.dot(t) / prod) * s / (ns * ns);
}

Matrix distill_grad(const Matrix& wrt, const Matrix& other, const FrameMask& mask) {
  const auto n = static_cast<double>(count_selected(mask, false));
  Matrix g = Matrix::Zero(wrt.rows(), wrt.cols());
  for (Eigen::Index r = 0; r < wrt.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) continue;
    g.row(r) = -cosine_grad(wrt.row(r), other.row(r)) / n;
  }
  return g;
}

}  // namespace

double cross_entropy_rows(const Matrix& logits, const std::vector<int>& targets, const FrameMask& select) {
  check_rows(logits.rows(), targets.size(), select.size(), "cross_entropy_rows");
  const std::size_t n = count_selected(select, true);
  if (n == 0) throw std::invalid_argument("cross_entropy_rows: no selected rows");
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!select[static_cast<std::size_t>(r)]) continue;
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw std::invalid_argument("cross_entropy_rows: target out of range");
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    total += lse - logits(r, y);
  }
  return total / static_cast<double>(n);
}

Matrix cross_entropy_rows_grad(const Matrix& logits, const std::vector<int>& targets, const FrameMask& select) {
  check_rows(logits.rows(), targets.size(), select.size(), "cross_entropy_rows");
  const std::size_t n = count_selected(select, true);
  if (n == 0) throw std::invalid_argument("cross_entropy_rows: no selected rows");
  Matrix g = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!select[static_cast<std::size_t>(r)]) continue;
    const double mx = logits.row(r).maxCoeff();
    RowVector p = (logits.row(r).array() - mx).exp().matrix();
    p /= p.sum();
    p(targets[static_cast<std::size_t>(r)]) -= 1.0;
    g.row(r) = p / static_cast<double>(n);
  }
  return g;
}

double prediction_loss(const Matrix& logits, const LabelSequence& labels, const FrameMask& output_mask) {
  if (count_selected(output_mask, true) == 0)
    throw std::invalid_argument("prediction_loss: no masked frames (degenerate objective)");
  return cross_entropy_rows(logits, labels, output_mask);
}

double distill_loss(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw std::invalid_argument("distill_loss: student and teacher shapes differ");
  if (output_mask.size() != static_cast<std::size_t>(student.rows()))
    throw std::invalid_argument("distill_loss: mask length does not match frame count");
  const std::size_t n = count_selected(output_mask, false);
  if (n == 0) throw std::invalid_argument("distill_loss: no unmasked frames");
  double total = 0.0;
  for (Eigen::Index r = 0; r < student.rows(); ++r) {
    if (output_mask[static_cast<std::size_t>(r)]) continue;
    total += 1.0 - cosine(student.row(r), teacher.row(r));
  }
  return total / static_cast<double>(n);
}

Matrix distill_loss_grad_student(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask) {
  return distill_grad(student, teacher, output_mask);
}

Matrix distill_loss_grad_teacher(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask) {
  return distill_grad(teacher, student, output_mask);
}

LossBreakdown combine(double l_q, double l_d_ell, double l_d_n, const LossWeights& w) {
  if (!std::isfinite(l_q) || !std::isfinite(l_d_ell) || !std::isfinite(l_d_n))
    throw std::invalid_argument("combine: non-finite loss term");
  if (!std::isfinite(w.lambda) || !std::isfinite(w.beta) || w.lambda < 0.0 || w.beta < 0.0)
    throw std::invalid_argument("combine: weights must be finite and non-negative");
  LossBreakdown b;
  b.l_q = l_q;
  b.l_d_ell = l_d_ell;
  b.l_d_n = l_d_n;
  b.total = l_q + w.lambda * l_d_ell + w.lambda * w.beta * l_d_n;
  return b;
}

Var cross_entropy_rows(Var logits, const std::vector<int>& targets, const FrameMask& select) {
  Tape* t = logits.tape();
  Matrix v(1, 1);
  v(0, 0) = cross_entropy_rows(logits.value(), targets, select);
  return t->custom("cross_entropy_rows", std::move(v), {logits}, [t, logits, targets, select](const Matrix& g, const Matrix&) {
    t->accumulate(logits, cross_entropy_rows_grad(logits.value(), targets, select) * g(0, 0));
  });
}

Var prediction_loss(Var logits, const LabelSequence& labels, const FrameMask& output_mask) {
  Tape* t = logits.tape();
  Matrix v(1, 1);
  v(0, 0) = prediction_loss(logits.value(), labels, output_mask);
  return t->custom("prediction_loss", std::move(v), {logits}, [t, logits, labels, output_mask](const Matrix& g, const Matrix&) {
    t->accumulate(logits, cross_entropy_rows_grad(logits.value(), labels, output_mask) * g(0, 0));
  });
}

Var distill_loss(Var student, Var teacher, const FrameMask& output_mask) {
  Tape* t = student.tape();
  Matrix v(1, 1);
  v(0, 0) = distill_loss(student.value(), teacher.value(), output_mask);
  return t->custom("distill_loss", std::move(v), {student, teacher},
                   [t, student, teacher, output_mask](const Matrix& g, const Matrix&) {
                     if (student.requires_grad())
                       t->accumulate(student, distill_loss_grad_student(student.value(), teacher.value(), output_mask) * g(0, 0));
                     if (teacher.requires_grad())
                       t->accumulate(teacher, distill_loss_grad_teacher(student.value(), teacher.value(), output_mask) * g(0, 0));
                   });
}

std::string loss_csv_header() { return "step,l_q,l_d_ell,l_d_n,total"; }

std::string loss_csv_row(long step, const LossBreakdown& b) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g", step, b.l_q, b.l_d_ell, b.l_d_n, b.total);
  return buf;
}

}  // namespace beard
