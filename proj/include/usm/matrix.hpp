// Plain row-major matrix for data that never takes gradients (features,
// frozen projections). Converts to Tensor at the model boundary.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "usm/tensor.hpp"

namespace usm {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool empty() const { return rows == 0; }

  Tensor to_tensor() const { return Tensor::from({rows, cols}, data); }
  static Matrix from_tensor(const Tensor& t) {
    Matrix m(t.dim(0), t.dim(1));
    m.data.assign(t.values().begin(), t.values().end());
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

}  // namespace usm
