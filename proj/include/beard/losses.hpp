#pragma once

#include "beard/autograd.hpp"
#include "beard/masking.hpp"
#include "beard/quantizer.hpp"

#include <string>

namespace beard {

inline constexpr double kCosineEps = 1e-8;

struct LossWeights {
  double lambda = 0.5;  // distillation weight
  double beta = 0.1;    // extra down-weight of the output-layer distillation term
};

struct LossBreakdown {
  double l_q = 0.0;
  double l_d_ell = 0.0;
  double l_d_n = 0.0;
  double total = 0.0;
  std::size_t masked_count = 0;
  std::size_t unmasked_count = 0;
};

/// Mean softmax cross-entropy (natural log) over rows where `select` is true.
/// Throws std::invalid_argument if no row is selected or shapes disagree.
double cross_entropy_rows(const Matrix& logits, const std::vector<int>& targets, const FrameMask& select);
/// d(cross_entropy_rows)/d(logits).
Matrix cross_entropy_rows_grad(const Matrix& logits, const std::vector<int>& targets, const FrameMask& select);

/// Masked-prediction loss: cross-entropy over masked frames only.
double prediction_loss(const Matrix& logits, const LabelSequence& labels, const FrameMask& output_mask);

/// Mean over unmasked frames of 1 - cos(student_t, teacher_t); the cosine
/// denominator is max(|s| |t|, 1e-8).
double distill_loss(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask);
/// Gradients of distill_loss w.r.t. the student and teacher activations.
Matrix distill_loss_grad_student(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask);
Matrix distill_loss_grad_teacher(const Matrix& student, const Matrix& teacher, const FrameMask& output_mask);

/// total = l_q + lambda * l_d_ell + lambda * beta * l_d_n. Throws
/// std::invalid_argument on non-finite terms or invalid weights.
LossBreakdown combine(double l_q, double l_d_ell, double l_d_n, const LossWeights& w);

// Differentiable forms on a Tape.
Var cross_entropy_rows(Var logits, const std::vector<int>& targets, const FrameMask& select);
Var prediction_loss(Var logits, const LabelSequence& labels, const FrameMask& output_mask);
Var distill_loss(Var student, Var teacher, const FrameMask& output_mask);

std::string loss_csv_header();
std::string loss_csv_row(long step, const LossBreakdown& b);

}  // namespace beard
