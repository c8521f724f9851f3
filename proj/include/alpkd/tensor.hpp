#pragma once

// Dense float64 tensors with a dynamic reverse-mode tape.
//
// Every op output records its parents and a local backward closure when any
// input requires a gradient and grad mode is on. Node ids come from a
// process-wide monotonically increasing counter, so a node's id is always
// larger than the ids of its parents; backward() visits the reachable
// subgraph once, in decreasing id order, which is a reverse topological
// order. A graph must stay on one thread; leaf tensors may move between
// threads when no graph references them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace alpkd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  // Materializes a zero-filled gradient buffer.
  void zero_grad();
  // Drops the gradient buffer entirely.
  void clear_grad();

  std::uint64_t node_id() const;
  bool is_leaf() const;

  // Seeds d(this)/d(this) = 1 and accumulates gradients into every
  // reachable tensor that requires grad. `this` must hold one element.
  void backward();

  // Value copy detached from any graph.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const noexcept { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward_fn;

  // Returns the parent's gradient buffer, allocating zeros on first use.
  static std::vector<double>& grad_of(const Tensor& parent);
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

namespace detail {
std::uint64_t next_node_id();
// Builds an op output. Parents are retained, and the closure installed,
// only when grad mode is on and some parent requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn);
}  // namespace detail

}  // namespace alpkd
