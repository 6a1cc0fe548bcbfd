#include "pflrm/tensor.hpp"

#include <cmath>
#include <sstream>

#include "pflrm/ops.hpp"

namespace pflrm::ad {

namespace {
thread_local std::vector<Tape*> g_tape_stack;
thread_local int g_no_grad_depth = 0;
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != ndim()) throw ShapeError("Tensor::at: rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : idx) {
    if (i >= impl_->shape[axis]) throw ShapeError("Tensor::at: index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->node >= 0 && !flag)
    throw Error("set_requires_grad: tensor already participates in a tape");
  impl_->requires_grad = flag;
  return *this;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
  for (double v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  for (auto& node : nodes_) {
    if (node.tensor) {
      node.tensor->tape = nullptr;
      node.tensor->node = -1;
    }
  }
  g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

std::int64_t Tape::node_for(const Tensor& t) {
  TensorImpl* impl = t.impl();
  if (impl->tape == this) return impl->node;
  if (impl->tape != nullptr)
    throw Error("tensor already participates in a different tape");
  if (!impl->requires_grad) return -1;
  // First use of a requires_grad leaf on this tape: register it.
  impl->tape = this;
  impl->node = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(NodeRecord{t.impl_ptr(), true});
  return impl->node;
}

void Tape::record(const Tensor& out, BackwardFn backward) {
  TensorImpl* impl = out.impl();
  impl->tape = this;
  impl->node = static_cast<std::int64_t>(nodes_.size());
  nodes_.push_back(NodeRecord{out.impl_ptr(), false});
  ops_.push_back(OpRecord{impl->node, std::move(backward)});
}

double* Tape::grad_buffer(std::int64_t node) {
  auto& buf = grads_[static_cast<std::size_t>(node)];
  if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(node)].tensor->data.size(), 0.0);
  return buf.data();
}

void Tape::accumulate(std::int64_t node, const double* g, std::size_t n) {
  double* buf = grad_buffer(node);
  for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

void Tape::accumulate(std::int64_t node, const std::vector<double>& g) {
  accumulate(node, g.data(), g.size());
}

bool grad_participating(const Tensor& t) {
  if (!t.defined()) return false;
  if (g_no_grad_depth > 0) return false;
  Tape* tape = Tape::active();
  if (!tape) return false;
  TensorImpl* impl = t.impl();
  if (impl->tape == tape && impl->node >= 0) return true;
  if (impl->tape != nullptr && impl->tape != tape)
    throw Error("tensor already participates in a different tape");
  return impl->requires_grad;
}

GradMap backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined loss tensor");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  Tape* tape = loss.impl()->tape;
  GradMap result;
  if (tape == nullptr) {
    // A plain constant: nothing depends on any leaf.
    if (loss.requires_grad()) {
      result.grads_.emplace(loss.impl(), Tensor::ones(loss.shape()));
    }
    return result;
  }
  if (tape != Tape::active())
    throw Error("backward: loss lives on a tape that is not the active one");

  tape->grads_.assign(tape->nodes_.size(), {});
  tape->grads_[static_cast<std::size_t>(loss.impl()->node)] = {1.0};

  for (auto it = tape->ops_.rbegin(); it != tape->ops_.rend(); ++it) {
    const auto& g = tape->grads_[static_cast<std::size_t>(it->out)];
    if (g.empty()) continue;
    it->backward(*tape, g);
  }

  for (std::size_t i = 0; i < tape->nodes_.size(); ++i) {
    const auto& node = tape->nodes_[i];
    if (!node.is_leaf) continue;
    const auto& shape = node.tensor->shape;
    Tensor g = tape->grads_[i].empty() ? Tensor::zeros(shape)
                                       : Tensor::from(shape, std::move(tape->grads_[i]));
    result.grads_.emplace(node.tensor.get(), std::move(g));
  }
  tape->grads_.clear();
  return result;
}

bool GradMap::contains(const Tensor& leaf) const {
  return grads_.find(leaf.impl()) != grads_.end();
}

Tensor GradMap::grad(const Tensor& leaf) const {
  auto it = grads_.find(leaf.impl());
  if (it == grads_.end()) return Tensor::zeros(leaf.shape());
  return it->second;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor analytic;
  {
    Tape tape;
    Tensor probe = x.detach().set_requires_grad(true);
    Tensor y = f(probe);
    analytic = backward(y).grad(probe);
  }
  double max_err = 0.0;
  Tensor probe = x.detach();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + step;
    const double fp = f(probe).item();
    probe.data()[i] = saved - step;
    const double fm = f(probe).item();
    probe.data()[i] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic.data()[i] - numeric) / std::max(1.0, std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace pflrm::ad
