#include "cmrlm/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace cmrlm {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.size() > 4) throw ConfigError("tensor rank exceeds 4: " + shape_string(shape));
  for (int e : shape) {
    if (e < 0) throw ConfigError("negative extent in shape " + shape_string(shape));
  }
}

}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                      shape_string(shape_));
  }
}

template <class T>
std::span<T> Tensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  return grad_;
}

template <class T>
void Tensor<T>::zero_grad() {
  grad_.assign(data_.size(), T{0});
}

template <class T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
Var<T> Graph<T>::leaf(Tensor<T>& tensor) {
  Node node;
  node.value = &tensor;
  node.requires_grad = record_ && tensor.requires_grad();
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> tensor) {
  Node node;
  node.owned = std::make_unique<Tensor<T>>(std::move(tensor));
  node.owned->set_requires_grad(false);
  node.value = node.owned.get();
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::emit(Tensor<T> value, std::initializer_list<int> inputs, BackwardFn fn) {
  Node node;
  node.owned = std::make_unique<Tensor<T>>(std::move(value));
  node.value = node.owned.get();
  if (record_) {
    node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](int id) { return requires_grad(id); });
    if (node.requires_grad) node.backward = std::move(fn);
  }
  node.owned->set_requires_grad(node.requires_grad);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw UsageError("backward: loss belongs to a different graph");
  const auto root = static_cast<std::size_t>(loss.id);
  if (nodes_.at(root).value->size() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_string(nodes_[root].value->shape()));
  }
  if (!nodes_[root].requires_grad) throw UsageError("backward: loss does not depend on any trainable tensor");

  for (std::size_t i = 0; i <= root; ++i) {
    if (!nodes_[i].is_leaf && nodes_[i].requires_grad) nodes_[i].value->clear_grad();
  }
  nodes_[root].value->grad()[0] += T{1};

  for (std::size_t i = root + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.is_leaf || !node.requires_grad || !node.value->has_grad()) continue;
    node.backward(*this, node.value->grad());
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace cmrlm
