#pragma once

#include <cassert>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ralf::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily sized
  bool requires_grad = false;
  std::function<void()> backward_fn;
  std::vector<std::shared_ptr<Node>> parents;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

/// Reference-counted autograd tensor. Copying shares the underlying node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value.assign(numel(shape), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<T> data, const Shape& shape,
                     bool requires_grad = false) {
    if (data.size() != numel(shape))
      throw std::invalid_argument("tensor data/shape mismatch");
    auto n = std::make_shared<Node<T>>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({v}, {1}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->value.size(); }
  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool r) { n_->requires_grad = r; }
  std::shared_ptr<Node<T>> node() const { return n_; }

  T item() const {
    if (n_->value.size() != 1) throw std::logic_error("item() on non-scalar");
    return n_->value[0];
  }

  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  /// Reverse-mode sweep from this scalar.
  void backward() {
    if (n_->value.size() != 1)
      throw std::logic_error("backward() requires a scalar root");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{n_.get(), 0}};
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx == 0 && seen.count(node)) {
        stack.pop_back();
        continue;
      }
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (!seen.count(p)) stack.push_back({p, 0});
      } else {
        seen.insert(node);
        order.push_back(node);
        stack.pop_back();
      }
    }
    for (Node<T>* node : order) node->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward_fn) (*it)->backward_fn();
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

/// Allocate a result node wired to its parents; backward_fn set by the op.
template <typename T>
Tensor<T> make_result(const Shape& shape,
                      std::initializer_list<Tensor<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape;
  n->value.assign(numel(shape), T(0));
  for (const auto& p : parents) {
    n->parents.push_back(p.node());
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  return Tensor<T>(std::move(n));
}

}  // namespace ralf::nn
