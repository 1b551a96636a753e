#include "peftlab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace peftlab {

template <class Real>
Adam<Real>::Adam(std::vector<Tensor<Real>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  states_.reserve(params_.size());
  for (const auto& p : params_) {
    AdamState<Real> s;
    s.m.assign(p.size(), Real(0));
    s.v.assign(p.size(), Real(0));
    states_.push_back(std::move(s));
  }
}

template <class Real>
void Adam<Real>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].trainable() && !params_[i].has_grad() && params_[i].size() > 0) {
      throw std::logic_error("adam: trainable parameter #" + std::to_string(i) + " with shape " +
                             shape_str(params_[i].shape()) + " has no gradient");
    }
  }
  const double b1 = options_.beta1, b2 = options_.beta2;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto& s = states_[i];
    s.t += 1;
    if (!p.has_grad()) continue;
    const double c1 = 1.0 - std::pow(b1, double(s.t));
    const double c2 = 1.0 - std::pow(b2, double(s.t));
    auto g = p.grad();
    auto w = p.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double m = b1 * s.m[j] + (1.0 - b1) * g[j];
      const double v = b2 * s.v[j] + (1.0 - b2) * double(g[j]) * g[j];
      s.m[j] = static_cast<Real>(m);
      s.v[j] = static_cast<Real>(v);
      w[j] = static_cast<Real>(w[j] - options_.lr * (m / c1) / (std::sqrt(v / c2) + options_.eps));
    }
    p.clear_grad();
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace peftlab
