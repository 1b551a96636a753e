#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "peftlab/tape.hpp"

namespace peftlab {

struct GradCheckOptions {
  double h = 1e-3;
  // Coordinates sampled per parameter; 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t coords_checked = 0;
};

template <class Real>
using ScalarFn = std::function<Tensor<Real>(Tape<Real>&)>;

// Compares tape gradients of f against central differences
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// and reports the worst coordinate. f must build its graph from `params`.
template <class Real>
GradCheckReport grad_check(const ScalarFn<Real>& f, std::vector<Tensor<Real>> params,
                           const GradCheckOptions& options = {});

extern template GradCheckReport grad_check<float>(const ScalarFn<float>&,
                                                  std::vector<Tensor<float>>,
                                                  const GradCheckOptions&);
extern template GradCheckReport grad_check<double>(const ScalarFn<double>&,
                                                   std::vector<Tensor<double>>,
                                                   const GradCheckOptions&);

}  // namespace peftlab
