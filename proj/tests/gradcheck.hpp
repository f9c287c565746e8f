#pragma once

#include "beard/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace beard::test {

/// Builds a scalar loss from trainable leaves bound on a fresh tape.
using LossBuilder = std::function<Var(Tape&, std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor), maximised over every entry of
/// every parameter, against central differences with step h.
inline GradCheck finite_difference_check(ParameterSet& params, const std::function<Var(Tape&, ParameterSet&)>& loss,
                                         double h = 1e-4, double floor = 1e-6) {
  params.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape, params));
  }
  auto eval = [&] {
    Tape tape;
    return loss(tape, params).scalar();
  };
  GradCheck out;
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double keep = x;
      x = keep + h;
      const double up = eval();
      x = keep - h;
      const double down = eval();
      x = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad.data()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace beard::test
