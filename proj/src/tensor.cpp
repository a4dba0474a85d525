// SPDX-License-Identifier: Apache-2.0
#include "paracnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace paracnn {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

std::size_t numel_of(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape &shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    out << (i ? "×" : "") << shape[i];
  out << ']';
  return out.str();
}

std::span<double> Node::grad_buffer() {
  if (grad.size() != data.size())
    grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  for (auto extent : shape)
    if (extent == 0)
      throw ShapeError("tensor extents must be positive, got " +
                       to_string(shape));
  if (numel_of(shape) != values.size())
    throw ShapeError("shape " + to_string(shape) + " needs " +
                     std::to_string(numel_of(shape)) + " values, got " +
                     std::to_string(values.size()));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape &Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(node_->shape));
  return node_->shape[axis];
}
std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<double> Tensor::data() { return node_->data; }
std::span<const double> Tensor::data() const { return node_->data; }
std::vector<double> Tensor::values() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank())
    throw ShapeError("index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis])
      throw ShapeError("index out of range for " + to_string(shape()));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<double> Tensor::grad() { return node_->grad_buffer(); }
std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() {
  if (numel() != 1)
    throw ShapeError("backward() needs a scalar, got " + to_string(shape()));
  if (!node_->requires_grad)
    return;

  std::vector<Node *> order;
  std::unordered_set<Node *> visited;
  std::vector<std::pair<Node *, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      Node *parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *node = *it;
    if (node->backward_fn && !node->grad.empty())
      node->backward_fn(*node);
  }
  for (Node *node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace debug {
namespace {
Fault g_fault = Fault::none;
}
void inject_fault(Fault fault) { g_fault = fault; }
Fault active_fault() { return g_fault; }
} // namespace debug

} // namespace paracnn
