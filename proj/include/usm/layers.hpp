// Parameterized building blocks shared by every model component.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "usm/random.hpp"
#include "usm/tensor.hpp"

namespace usm {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  // Weights ~ N(0, 1/in) unless zero_init.
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);

  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(NamedParams& out, const std::string& prefix) const;
};

std::size_t count_params(const NamedParams& params);

// Sets requires_grad on every listed tensor.
void set_trainable(const NamedParams& params, bool trainable);

}  // namespace usm
