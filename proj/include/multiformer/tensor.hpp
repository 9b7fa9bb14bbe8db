#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <utility>

#include "multiformer/core.hpp"

namespace mf {

// Dense row-major tensor with shared storage. Copying a Tensor aliases the
// same buffer; clone() makes a deep copy. The gradient buffer lives next to
// the values and is allocated lazily on first accumulation.
template <typename T>
class Tensor {
  struct Data {
    Shape shape;
    std::vector<T> v;
    std::vector<T> g;  // empty until a gradient lands here
    bool requires_grad = false;
  };

 public:
  Tensor() : d_(std::make_shared<Data>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : d_(std::make_shared<Data>()) {
    d_->shape = std::move(shape);
    d_->v.assign(shape_numel(d_->shape), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : d_(std::make_shared<Data>()) {
    if (values.size() != shape_numel(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->v = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor({1}, std::vector<T>{value}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, T sigma) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : t.d_->v) x = static_cast<T>(dist(rng) * double(sigma));
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->v.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }

  T* data() { return d_->v.data(); }
  const T* data() const { return d_->v.data(); }
  std::vector<T>& values() { return d_->v; }
  const std::vector<T>& values() const { return d_->v; }

  T& operator[](std::size_t i) { return d_->v[i]; }
  const T& operator[](std::size_t i) const { return d_->v[i]; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d_->g.empty(); }

  /// Gradient buffer, allocated (zeroed) on first use.
  std::vector<T>& grad() {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), T(0));
    return d_->g;
  }
  const std::vector<T>& grad() const { return d_->g; }

  void zero_grad() {
    if (!d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), T(0));
  }

  void drop_grad() { d_->g.clear(); }

  Tensor clone() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  /// Deep copy under a new shape (element count must match). The autodiff
  /// reshape lives in ops.hpp; this one is for plain data plumbing.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(d_->shape) +
                       " as " + shape_str(shape));
    Tensor out;
    out.d_ = std::make_shared<Data>(*d_);
    out.d_->shape = std::move(shape);
    return out;
  }

  bool same_shape(const Tensor& o) const { return d_->shape == o.d_->shape; }

  bool all_finite() const {
    for (const T& x : d_->v)
      if (!std::isfinite(double(x))) return false;
    return true;
  }

  bool identical_buffer(const Tensor& o) const { return d_ == o.d_; }

 private:
  std::shared_ptr<Data> d_;
};

// Define-by-run gradient tape. Forward primitives append one node per
// application; the record order is a topological order of the graph, so the
// reverse sweep visits nodes in exact reverse topological order. A tape can
// be replayed once; a second backward() over it throws.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  void run_backward() {
    if (consumed_) throw NumericError("backward: tape already consumed");
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

template <typename T>
inline Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// RAII guard installing a tape as the recording target for this thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) {
    active_tape<T>() = &tape;
  }
  ~TapeScope() { active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Runs the reverse pass from a scalar loss. Gradients accumulate into the
/// grad() buffers of every tensor the tape reaches.
template <typename T>
inline void backward(Tensor<T> loss, Tape<T>& tape) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  loss.grad()[0] = T(1);
  tape.run_backward();
}

}  // namespace mf
