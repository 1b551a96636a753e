#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "peftlab/rng.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

// Reverse-mode tape. Every op evaluates eagerly and, when any input requires
// a gradient, appends a backward closure. backward() replays the closures
// once, newest first, then empties the tape.
//
// Intermediate gradients are released as soon as their producer has run, so
// after backward() only trainable leaves hold a grad.
template <class Real>
class Tape {
 public:
  using T = Tensor<Real>;

  // A tape constructed with record=false is an inference tape: nothing is
  // recorded and outputs never require a gradient.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return records_.size(); }

  // Linear algebra.
  T matmul(const T& a, const T& b);
  // a: [n, m, k]; b: [n, k, p] or, with transpose_b, [n, p, k].
  T bmm(const T& a, const T& b, bool transpose_b = false);

  // Elementwise.
  T add(const T& a, const T& b);
  T sub(const T& a, const T& b);
  T mul(const T& a, const T& b);
  T scale(const T& a, Real factor);
  T add_bias(const T& a, const T& bias);  // bias broadcast along the last axis
  T add_const(const T& a, std::span<const Real> constant);
  T divide(const T& a, const T& scalar);
  T gelu(const T& a);
  T relu(const T& a);
  T dropout(const T& a, double p, Rng& rng);

  // Reductions.
  T sum(const T& a);
  T mean(const T& a);
  T softmax_rows(const T& a);
  T layer_norm(const T& a, const T& gain, const T& bias, double eps);
  T max_pool_to_vector(const T& a);

  // Layout.
  T reshape(const T& a, Shape shape);
  T permute(const T& a, const std::vector<std::size_t>& axes);
  T concat(const T& a, const T& b, std::size_t axis);
  T take(const T& a, std::size_t index);  // along axis 0
  T stack(const std::vector<T>& parts);
  T broadcast_leading(const T& a, std::size_t count);
  T gather_rows(const T& table, std::span<const std::int32_t> rows);

  // Weighted combination sum_j w[j] * parts[j]; all parts share a shape.
  T weighted_sum(const T& weights, const std::vector<T>& parts);

  // Losses; both return the mean over rows as a scalar.
  T bce_with_logits(const T& logits, std::span<const int> labels);
  T cross_entropy_rows(const T& logits, std::span<const std::int32_t> targets);

  void backward(const T& loss);

 private:
  struct Record {
    std::function<void()> run;
    std::shared_ptr<typename T::Node> output;
  };

  T make_output(Shape shape, std::initializer_list<const T*> inputs);
  T make_output(Shape shape, const std::vector<const T*>& inputs);
  void push(const T& out, std::function<void()> fn);
  static Real* grad_buffer(const T& t);

  bool record_;
  std::vector<Record> records_;
};

// Non-recording helpers.
double sigmoid(double x);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace peftlab
