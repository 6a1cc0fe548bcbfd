#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pflrm/common.hpp"

namespace pflrm::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Tape participation: a tensor belongs to at most one live tape.
  Tape* tape = nullptr;
  std::int64_t node = -1;
};

/// Dense f64 array handle. Copy is shallow (shared buffer); ops never mutate
/// inputs, so shared buffers behave as values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }

  const double* data() const { return impl_->data.data(); }
  double* data() { return impl_->data.data(); }
  const std::vector<double>& vec() const { return impl_->data; }

  double item() const;
  double at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true);

  /// Value copy with no grad participation.
  Tensor detach() const;

  bool all_finite() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Gradients of one backward pass, keyed by leaf tensor identity.
class GradMap {
 public:
  bool contains(const Tensor& leaf) const;
  /// d(loss)/d(leaf); zeros for a registered leaf the loss does not depend on.
  Tensor grad(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }
  bool empty() const { return grads_.empty(); }

 private:
  friend GradMap backward(const Tensor&);
  std::unordered_map<const TensorImpl*, Tensor> grads_;
};

/// Records operations for reverse-mode differentiation. Constructing a Tape
/// makes it the active tape for the current thread; destroying it detaches
/// every tensor that was registered on it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  using BackwardFn = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  /// Registers `t` on this tape (leaf registration for requires_grad tensors).
  /// Returns the node id, or -1 for constants.
  std::int64_t node_for(const Tensor& t);

  /// Records `out = op(inputs...)`; called by op implementations after the
  /// forward value is computed, only when some input participates.
  void record(const Tensor& out, BackwardFn backward);

  /// Accumulates `g` (length = node size) into the grad buffer of `node`.
  void accumulate(std::int64_t node, const std::vector<double>& g);
  void accumulate(std::int64_t node, const double* g, std::size_t n);
  double* grad_buffer(std::int64_t node);

  std::size_t num_ops() const { return ops_.size(); }

 private:
  friend GradMap backward(const Tensor&);

  struct OpRecord {
    std::int64_t out;
    BackwardFn backward;
  };

  struct NodeRecord {
    std::shared_ptr<TensorImpl> tensor;  // keeps values alive for backward
    bool is_leaf = false;
  };

  std::vector<OpRecord> ops_;
  std::vector<NodeRecord> nodes_;
  std::vector<std::vector<double>> grads_;  // live only during backward()
};

/// Reverse pass from a scalar loss. Gradients accumulate in tape order, so
/// identical tapes produce bitwise-identical results.
GradMap backward(const Tensor& loss);

/// True when `t` would contribute gradients if used in an op right now.
bool grad_participating(const Tensor& t);

/// RAII scope that suppresses tape recording; ops inside compute values only.
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|)
/// for a scalar-valued f. Reports the error instead of failing.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace pflrm::ad
