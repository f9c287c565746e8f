#include "beard/optim.hpp"

#include <cmath>

namespace beard {

Adam::Adam(std::vector<ParamGroup> groups, AdamOptions options) : groups_(std::move(groups)), options_(options) {
  for (const auto& g : groups_)
    if (!(g.lr > 0.0) || !std::isfinite(g.lr))
      throw std::invalid_argument("Adam: learning rate of group '" + g.name + "' must be positive");
}

double Adam::lr_for(const std::string& name) const {
  for (const auto& g : groups_)
    for (const auto& prefix : g.prefixes)
      if (name.starts_with(prefix)) return g.lr;
  return 0.0;
}

void Adam::step(ParameterSet& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& p : params) {
    const double lr = lr_for(p->name);
    if (lr == 0.0) continue;
    auto [it, fresh] = state_.try_emplace(p->name);
    if (fresh) {
      it->second.m = Matrix::Zero(p->value.rows(), p->value.cols());
      it->second.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    auto& s = it->second;
    s.m = options_.beta1 * s.m + (1.0 - options_.beta1) * p->grad;
    s.v = options_.beta2 * s.v + (1.0 - options_.beta2) * p->grad.cwiseProduct(p->grad);
    const double eps = options_.eps;
    p->value.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps);
  }
}

void Adam::restore(long steps, std::map<std::string, Moments> state) {
  steps_ = steps;
  state_ = std::move(state);
}

}  // namespace beard
