#pragma once

#include <cstdint>
#include <vector>

#include "peftlab/tensor.hpp"

namespace peftlab {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter moments. m and v always match the parameter's size.
template <class Real>
struct AdamState {
  std::vector<Real> m;
  std::vector<Real> v;
  std::int64_t t = 0;
};

// Bias-corrected adaptive-moment optimizer. step() consumes and clears the
// gradients of every managed parameter.
template <class Real>
class Adam {
 public:
  Adam(std::vector<Tensor<Real>> params, AdamOptions options);

  void step();
  std::int64_t steps() const { return states_.empty() ? 0 : states_.front().t; }
  const AdamOptions& options() const { return options_; }
  const AdamState<Real>& state(std::size_t i) const { return states_.at(i); }

 private:
  std::vector<Tensor<Real>> params_;
  std::vector<AdamState<Real>> states_;
  AdamOptions options_;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace peftlab
