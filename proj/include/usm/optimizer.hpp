// Adam with independent parameter groups, each with its own learning-rate
// schedule: linear warmup, then inverse square-root decay.

#pragma once

#include <string>
#include <vector>

#include "usm/layers.hpp"

namespace usm {

class Checkpoint;

struct AdamSettings {
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double clip_norm = 5.0;  // per-group global norm; 0 disables

  // lr * min(t / warmup, sqrt(warmup / t)) for t = step + 1; constant when
  // warmup is 0.
  double rate_at(std::size_t step) const;
};

struct ParamGroup {
  std::string name;
  NamedParams params;
  AdamSettings settings;
  std::vector<std::vector<double>> first_moment, second_moment;
  std::size_t steps = 0;
};

class Optimizer {
 public:
  void add_group(std::string name, NamedParams params, const AdamSettings& settings);

  // Applies one update to every group from the current gradients, then
  // clears all gradients. Parameters without requires_grad are skipped.
  void step();
  void zero_grad();

  const std::vector<ParamGroup>& groups() const { return groups_; }
  ParamGroup& group(const std::string& name);

  // Moments and step counters under "optim.<group>.".
  void save_state(Checkpoint& ckpt) const;
  void load_state(const Checkpoint& ckpt);

 private:
  std::vector<ParamGroup> groups_;
};

}  // namespace usm
