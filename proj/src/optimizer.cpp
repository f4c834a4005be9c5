#include "usm/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "usm/checkpoint.hpp"

namespace usm {

double AdamSettings::rate_at(std::size_t step) const {
  if (warmup_steps == 0) return learning_rate;
  const double t = static_cast<double>(step + 1), w = static_cast<double>(warmup_steps);
  return learning_rate * std::min(t / w, std::sqrt(w / t));
}

void Optimizer::add_group(std::string name, NamedParams params, const AdamSettings& settings) {
  std::set<const TensorImpl*> seen;
  for (const auto& g : groups_)
    for (const auto& [n, t] : g.params) seen.insert(t.impl());
  for (const auto& [n, t] : params)
    if (!seen.insert(t.impl()).second)
      throw std::invalid_argument("optimizer: parameter '" + n + "' is already in another group");
  ParamGroup g;
  g.name = std::move(name);
  g.settings = settings;
  for (const auto& [n, t] : params) {
    g.first_moment.emplace_back(t.numel(), 0.0);
    g.second_moment.emplace_back(t.numel(), 0.0);
  }
  g.params = std::move(params);
  groups_.push_back(std::move(g));
}

ParamGroup& Optimizer::group(const std::string& name) {
  for (auto& g : groups_)
    if (g.name == name) return g;
  throw std::out_of_range("optimizer: no group '" + name + "'");
}

void Optimizer::zero_grad() {
  for (auto& g : groups_)
    for (auto& [n, t] : g.params) t.zero_grad();
}

void Optimizer::step() {
  for (auto& g : groups_) {
    const auto& s = g.settings;
    double norm2 = 0.0;
    for (const auto& [n, t] : g.params)
      if (t.requires_grad() && t.has_grad())
        for (double v : t.grad()) norm2 += v * v;
    double clip = 1.0;
    const double norm = std::sqrt(norm2);
    if (s.clip_norm > 0.0 && norm > s.clip_norm) clip = s.clip_norm / norm;

    const double lr = s.rate_at(g.steps);
    ++g.steps;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(g.steps));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(g.steps));
    for (std::size_t p = 0; p < g.params.size(); ++p) {
      Tensor& t = g.params[p].second;
      if (!t.requires_grad() || !t.has_grad()) continue;
      auto grad = t.grad();
      auto w = t.mutable_values();
      auto& m = g.first_moment[p];
      auto& v = g.second_moment[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = grad[i] * clip;
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + s.epsilon);
      }
    }
  }
  zero_grad();
}

void Optimizer::save_state(Checkpoint& ckpt) const {
  for (const auto& g : groups_) {
    const std::string prefix = "optim." + g.name + ".";
    ckpt.meta[prefix + "steps"] = std::to_string(g.steps);
    for (std::size_t p = 0; p < g.params.size(); ++p) {
      const auto& [n, t] = g.params[p];
      ckpt.put(prefix + "m." + n, t.shape(), g.first_moment[p]);
      ckpt.put(prefix + "v." + n, t.shape(), g.second_moment[p]);
    }
  }
}

void Optimizer::load_state(const Checkpoint& ckpt) {
  for (auto& g : groups_) {
    const std::string prefix = "optim." + g.name + ".";
    g.steps = std::stoul(ckpt.meta_at(prefix + "steps"));
    for (std::size_t p = 0; p < g.params.size(); ++p) {
      const auto& [n, t] = g.params[p];
      const auto& m = ckpt.at(prefix + "m." + n);
      const auto& v = ckpt.at(prefix + "v." + n);
      if (m.values.size() != t.numel() || v.values.size() != t.numel())
        throw ShapeError("optimizer state for '" + n + "' does not match " + shape_str(t.shape()));
      g.first_moment[p] = m.values;
      g.second_moment[p] = v.values;
    }
  }
}

}  // namespace usm
