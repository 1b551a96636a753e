#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace peftlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class Real>
class Tape;

// Dense row-major array with an optional gradient slot.
//
// Tensor is a handle: copies share the same storage, which is what the tape
// needs to route gradients back to parameters. Use clone() for a detached
// deep copy.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, bool trainable = false);
  Tensor(Shape shape, std::vector<Real> values, bool trainable = false);

  static Tensor scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->data.size(); }

  std::span<Real> data() { return node_->data; }
  std::span<const Real> data() const { return node_->data; }
  Real item() const;

  bool trainable() const { return node_->trainable; }
  void set_trainable(bool on);
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> grad() { return node_->grad; }
  void clear_grad();

  Tensor clone() const;
  bool is_same(const Tensor& other) const { return node_ == other.node_; }

  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> values(node_->data.begin(), node_->data.end());
    return Tensor<Other>(node_->shape, std::move(values), node_->trainable);
  }

 private:
  friend class Tape<Real>;

  struct Node {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool trainable = false;
    bool requires_grad = false;
    const void* producer = nullptr;
  };

  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace peftlab
