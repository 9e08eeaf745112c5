#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmrlm/errors.hpp"

namespace cmrlm {

/// Extents in batch x channel x height x width order; rank at most 4.
using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor with an optional gradient buffer of identical shape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access.
  T& at(int b, int c, int y, int x) { return data_[offset(b, c, y, x)]; }
  const T& at(int b, int c, int y, int x) const { return data_[offset(b, c, y, x)]; }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  /// Gradient buffer; allocated (zero-filled) on first access.
  std::span<T> grad();
  std::span<const T> grad() const noexcept { return grad_; }
  void zero_grad();
  void clear_grad() { grad_.clear(); }

  bool all_finite() const;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    Tensor<U> t(shape_, std::move(out));
    t.set_requires_grad(requires_grad_);
    return t;
  }

 private:
  std::size_t offset(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
  std::vector<T> grad_;
};

template <class T>
class Graph;

/// Handle to a node of a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int axis) const { return value().dim(axis); }
};

/// Tape of operations recorded in execution order, which is a topological order.
/// Leaves reference caller-owned tensors that must outlive the graph; gradients
/// of leaves accumulate into those tensors' grad buffers.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::span<const T> out_grad)>;

  /// With `record == false` no backward closures or saved activations are kept.
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> leaf(Tensor<T>& tensor);
  Var<T> constant(Tensor<T> tensor);
  /// Appends an op result. `inputs` decide whether the result requires grad.
  Var<T> emit(Tensor<T> value, std::initializer_list<int> inputs, BackwardFn fn);

  const Tensor<T>& value(int id) const { return *nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }
  /// Gradient accumulator of a node (allocated on demand).
  std::span<T> grad(int id) { return nodes_.at(static_cast<std::size_t>(id)).value->grad(); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar node. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset at the start of each call.
  void backward(Var<T> loss);

 private:
  struct Node {
    Tensor<T>* value = nullptr;
    std::unique_ptr<Tensor<T>> owned;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  std::vector<Node> nodes_;
  bool record_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace cmrlm
