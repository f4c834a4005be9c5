#include "usm/layers.hpp"

#include <cmath>

#include "usm/ops.hpp"

namespace usm {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init) {
  std::vector<double> w(in * out, 0.0);
  if (!zero_init) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w) v = rng.normal(0.0, stddev);
  }
  weight = Tensor::from({in, out}, std::move(w), true);
  bias = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  return ops::add_rowwise(ops::matmul(x, weight), bias);
}

void Linear::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::collect(NamedParams& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

std::size_t count_params(const NamedParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void set_trainable(const NamedParams& params, bool trainable) {
  for (const auto& [name, t] : params) {
    Tensor handle = t;
    handle.set_requires_grad(trainable);
  }
}

}  // namespace usm
