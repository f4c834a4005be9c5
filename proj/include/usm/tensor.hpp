// Dense tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Operations in ops.hpp build
// a graph by recording their inputs and a backward closure on the result;
// calling backward() on a scalar walks that graph in reverse topological
// order. Leaves created with requires_grad=true receive gradients.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace usm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Raised when operands of a primitive disagree in shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  // Empty span when no gradient was populated.
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  // New leaf sharing no graph history; values are copied.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Populates gradients on every requires_grad tensor reachable from this
  // scalar. Gradients of reached tensors are reset first, so repeated calls
  // on identical graphs yield identical results.
  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  // Reads self.grad, accumulates into parents' grad.
  std::function<void(TensorImpl& self)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

// Graph recording is on by default; a NoGradGuard turns it off for the
// current thread (inference, parameter updates).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates the result node of an op. The backward closure is attached only
// if recording is enabled and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn);

// 64-bit FNV-1a over the raw bytes of the values.
std::uint64_t checksum(std::span<const double> values);

}  // namespace usm
