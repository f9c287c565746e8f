#pragma once

#include "beard/autograd.hpp"

#include <map>
#include <string>
#include <vector>

namespace beard {

/// Parameters whose names start with any of `prefixes` train at `lr`.
struct ParamGroup {
  std::string name;
  std::vector<std::string> prefixes;
  double lr = 1e-3;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

/// Adam with bias correction and per-group constant learning rates.
/// Parameters matching no group are left untouched.
class Adam {
 public:
  struct Moments {
    Matrix m;
    Matrix v;
  };

  Adam(std::vector<ParamGroup> groups, AdamOptions options = {});

  void step(ParameterSet& params);

  const std::vector<ParamGroup>& groups() const { return groups_; }
  const AdamOptions& options() const { return options_; }
  long steps() const { return steps_; }
  /// Learning rate for a parameter name, or 0 if it belongs to no group.
  double lr_for(const std::string& name) const;

  const std::map<std::string, Moments>& state() const { return state_; }
  void restore(long steps, std::map<std::string, Moments> state);

 private:
  std::vector<ParamGroup> groups_;
  AdamOptions options_;
  long steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace beard
