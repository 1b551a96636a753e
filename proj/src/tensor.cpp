#include "peftlab/tensor.hpp"

#include <sstream>

namespace peftlab {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <class Real>
Tensor<Real>::Tensor(Shape shape, bool trainable) : node_(std::make_shared<Node>()) {
  node_->data.assign(shape_size(shape), Real(0));
  node_->shape = std::move(shape);
  node_->trainable = trainable;
  node_->requires_grad = trainable;
}

template <class Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> values, bool trainable)
    : node_(std::make_shared<Node>()) {
  if (values.size() != shape_size(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->trainable = trainable;
  node_->requires_grad = trainable;
}

template <class Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(node_->shape));
  }
  return node_->shape[axis];
}

template <class Real>
Real Tensor<Real>::item() const {
  if (node_->data.size() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str(node_->shape));
  }
  return node_->data[0];
}

template <class Real>
void Tensor<Real>::set_trainable(bool on) {
  node_->trainable = on;
  node_->requires_grad = on;
  if (!on) clear_grad();
}

template <class Real>
void Tensor<Real>::clear_grad() {
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

template <class Real>
Tensor<Real> Tensor<Real>::clone() const {
  return Tensor(node_->shape, node_->data, node_->trainable);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace peftlab
