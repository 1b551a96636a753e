#include "peftlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "peftlab/rng.hpp"

namespace peftlab {

template <class Real>
GradCheckReport grad_check(const ScalarFn<Real>& f, std::vector<Tensor<Real>> params,
                           const GradCheckOptions& options) {
  std::vector<bool> was_trainable;
  for (auto& p : params) {
    was_trainable.push_back(p.trainable());
    p.clear_grad();
    p.set_trainable(true);
  }
  {
    Tape<Real> tape;
    tape.backward(f(tape));
  }
  auto evaluate = [&f] {
    Tape<Real> tape(false);
    return double(f(tape).item());
  };

  Rng rng(options.seed);
  GradCheckReport report;
  for (auto& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param && coords.size() > options.max_coords_per_param) {
      shuffle_in_place(std::span(coords), rng);
      coords.resize(options.max_coords_per_param);
    }
    for (auto i : coords) {
      auto data = p.data();
      const Real saved = data[i];
      data[i] = static_cast<Real>(saved + options.h);
      const double up = evaluate();
      data[i] = static_cast<Real>(saved - options.h);
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++report.coords_checked;
    }
    p.clear_grad();
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_trainable(was_trainable[i]);
  return report;
}

template GradCheckReport grad_check<float>(const ScalarFn<float>&, std::vector<Tensor<float>>,
                                           const GradCheckOptions&);
template GradCheckReport grad_check<double>(const ScalarFn<double>&,
                                            std::vector<Tensor<double>>,
                                            const GradCheckOptions&);

}  // namespace peftlab
