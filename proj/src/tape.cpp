#include "peftlab/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace peftlab {

namespace {

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using Map = Eigen::Map<RowMat<Real>>;
template <class Real>
using CMap = Eigen::Map<const RowMat<Real>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class Real>
Tensor<Real> Tape<Real>::make_output(Shape shape, std::initializer_list<const T*> inputs) {
  T out(std::move(shape));
  bool needs = false;
  for (const T* in : inputs) needs = needs || in->requires_grad();
  out.node_->requires_grad = record_ && needs;
  out.node_->producer = this;
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::make_output(Shape shape, const std::vector<const T*>& inputs) {
  T out(std::move(shape));
  bool needs = false;
  for (const T* in : inputs) needs = needs || in->requires_grad();
  out.node_->requires_grad = record_ && needs;
  out.node_->producer = this;
  return out;
}

template <class Real>
void Tape<Real>::push(const T& out, std::function<void()> fn) {
  if (!record_ || !out.requires_grad()) return;
  records_.push_back(Record{std::move(fn), out.node_});
}

template <class Real>
Real* Tape<Real>::grad_buffer(const T& t) {
  if (!t.requires_grad()) return nullptr;
  auto& g = t.node_->grad;
  if (g.empty()) g.assign(t.node_->data.size(), Real(0));
  return g.data();
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
Tensor<Real> Tape<Real>::matmul(const T& a, const T& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  T out = make_output({m, n}, {&a, &b});
  Map<Real>(out.data().data(), m, n).noalias() =
      CMap<Real>(a.data().data(), m, k) * CMap<Real>(b.data().data(), k, n);
  push(out, [a, b, out, m, k, n] {
    CMap<Real> g(out.grad().data(), m, n);
    if (Real* ga = grad_buffer(a)) {
      Map<Real>(ga, m, k).noalias() += g * CMap<Real>(b.data().data(), k, n).transpose();
    }
    if (Real* gb = grad_buffer(b)) {
      Map<Real>(gb, k, n).noalias() += CMap<Real>(a.data().data(), m, k).transpose() * g;
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::bmm(const T& a, const T& b, bool transpose_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto n = a.dim(0), m = a.dim(1), k = a.dim(2);
  const auto p = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k,
          "bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  T out = make_output({n, m, p}, {&a, &b});
  for (std::size_t i = 0; i < n; ++i) {
    CMap<Real> A(a.data().data() + i * m * k, m, k);
    Map<Real> C(out.data().data() + i * m * p, m, p);
    if (transpose_b) {
      C.noalias() = A * CMap<Real>(b.data().data() + i * p * k, p, k).transpose();
    } else {
      C.noalias() = A * CMap<Real>(b.data().data() + i * k * p, k, p);
    }
  }
  push(out, [a, b, out, n, m, k, p, transpose_b] {
    Real* ga = grad_buffer(a);
    Real* gb = grad_buffer(b);
    for (std::size_t i = 0; i < n; ++i) {
      CMap<Real> G(out.grad().data() + i * m * p, m, p);
      CMap<Real> A(a.data().data() + i * m * k, m, k);
      if (transpose_b) {
        CMap<Real> B(b.data().data() + i * p * k, p, k);
        if (ga) Map<Real>(ga + i * m * k, m, k).noalias() += G * B;
        if (gb) Map<Real>(gb + i * p * k, p, k).noalias() += G.transpose() * A;
      } else {
        CMap<Real> B(b.data().data() + i * k * p, k, p);
        if (ga) Map<Real>(ga + i * m * k, m, k).noalias() += G * B.transpose();
        if (gb) Map<Real>(gb + i * k * p, k, p).noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Tensor<Real> Tape<Real>::add(const T& a, const T& b) {
  require_same_shape(a, b, "add");
  T out = make_output(a.shape(), {&a, &b});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  push(out, [a, b, out] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (Real* gb = grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::sub(const T& a, const T& b) {
  require_same_shape(a, b, "sub");
  T out = make_output(a.shape(), {&a, &b});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  push(out, [a, b, out] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (Real* gb = grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::mul(const T& a, const T& b) {
  require_same_shape(a, b, "mul");
  T out = make_output(a.shape(), {&a, &b});
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  push(out, [a, b, out] {
    auto g = out.grad();
    auto x = a.data();
    auto y = b.data();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    if (Real* gb = grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::scale(const T& a, Real factor) {
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  push(out, [a, out, factor] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::add_bias(const T& a, const T& bias) {
  const std::size_t d = last_dim(a.shape());
  require(bias.rank() == 1 && bias.dim(0) == d,
          "add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(a.shape()));
  T out = make_output(a.shape(), {&a, &bias});
  auto o = out.data();
  auto x = a.data();
  auto bv = bias.data();
  const std::size_t rows = d ? o.size() / d : 0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = x[r * d + j] + bv[j];
  push(out, [a, bias, out, rows, d] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (Real* gb = grad_buffer(bias)) {
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t r = 0; r < rows; ++r) acc += g[r * d + j];
        gb[j] += static_cast<Real>(acc);
      }
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::add_const(const T& a, std::span<const Real> constant) {
  require(constant.size() == a.size(), "add_const: constant has " +
                                           std::to_string(constant.size()) + " values for " +
                                           shape_str(a.shape()));
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + constant[i];
  push(out, [a, out] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::divide(const T& a, const T& s) {
  require(s.size() == 1, "divide: divisor must be a scalar, got " + shape_str(s.shape()));
  T out = make_output(a.shape(), {&a, &s});
  const Real den = s.data()[0];
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] / den;
  push(out, [a, s, out] {
    const Real den = s.data()[0];
    auto g = out.grad();
    auto x = a.data();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / den;
    if (Real* gs = grad_buffer(s)) {
      double acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += double(g[i]) * x[i];
      gs[0] += static_cast<Real>(-acc / (double(den) * den));
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::gelu(const T& a) {
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = x[i];
    o[i] = static_cast<Real>(0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))));
  }
  push(out, [a, out] {
    auto g = out.grad();
    auto x = a.data();
    if (Real* ga = grad_buffer(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double d =
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        ga[i] += static_cast<Real>(g[i] * d);
      }
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::relu(const T& a) {
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0 ? x[i] : Real(0);
  push(out, [a, out] {
    auto g = out.grad();
    auto x = a.data();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0) ga[i] += g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::dropout(const T& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: probability must be below 1");
  std::vector<Real> keep(a.size());
  const Real scale = static_cast<Real>(1.0 / (1.0 - p));
  for (auto& k : keep) k = uniform01(rng) < p ? Real(0) : scale;
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * keep[i];
  push(out, [a, out, keep = std::move(keep)] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * keep[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class Real>
Tensor<Real> Tape<Real>::sum(const T& a) {
  T out = make_output({}, {&a});
  double acc = 0;
  for (auto v : a.data()) acc += v;
  out.data()[0] = static_cast<Real>(acc);
  push(out, [a, out] {
    const Real g = out.grad()[0];
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::mean(const T& a) {
  require(a.size() > 0, "mean: empty tensor");
  T out = make_output({}, {&a});
  double acc = 0;
  for (auto v : a.data()) acc += v;
  out.data()[0] = static_cast<Real>(acc / a.size());
  push(out, [a, out] {
    const Real g = static_cast<Real>(out.grad()[0] / double(a.size()));
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::softmax_rows(const T& a) {
  require(a.rank() >= 1 && a.shape().back() >= 1,
          "softmax_rows: need at least one column, got " + shape_str(a.shape()));
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.size() / c;
  T out = make_output(a.shape(), {&a});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * c;
    Real* orow = o.data() + r * c;
    Real mx = *std::max_element(xr, xr + c);
    double denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(double(xr[j]) - double(mx));
      orow[j] = static_cast<Real>(e);
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < c; ++j) orow[j] = static_cast<Real>(orow[j] * inv);
  }
  push(out, [a, out, rows, c] {
    auto g = out.grad();
    auto y = out.data();
    Real* ga = grad_buffer(a);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += double(g[r * c + j]) * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j)
        ga[r * c + j] += static_cast<Real>(y[r * c + j] * (g[r * c + j] - dot));
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::layer_norm(const T& a, const T& gain, const T& bias, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  require(a.rank() >= 1, "layer_norm: input must have at least one axis");
  const std::size_t d = a.shape().back();
  require(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
          "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
              " do not match " + shape_str(a.shape()));
  const std::size_t rows = d ? a.size() / d : 0;
  T out = make_output(a.shape(), {&a, &gain, &bias});
  std::vector<Real> xhat(a.size());
  std::vector<double> rstd(rows);
  auto x = a.data();
  auto o = out.data();
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = static_cast<Real>(h);
      o[r * d + j] = static_cast<Real>(gv[j] * h + bv[j]);
    }
  }
  push(out, [a, gain, bias, out, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)] {
    auto g = out.grad();
    auto gv = gain.data();
    if (Real* gg = grad_buffer(gain)) {
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t r = 0; r < rows; ++r) acc += double(g[r * d + j]) * xhat[r * d + j];
        gg[j] += static_cast<Real>(acc);
      }
    }
    if (Real* gb = grad_buffer(bias)) {
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0;
        for (std::size_t r = 0; r < rows; ++r) acc += g[r * d + j];
        gb[j] += static_cast<Real>(acc);
      }
    }
    if (Real* ga = grad_buffer(a)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = double(g[r * d + j]) * gv[j];
          m1 += dh;
          m2 += dh * xhat[r * d + j];
        }
        m1 /= d;
        m2 /= d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = double(g[r * d + j]) * gv[j];
          ga[r * d + j] += static_cast<Real>(rstd[r] * (dh - m1 - xhat[r * d + j] * m2));
        }
      }
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::max_pool_to_vector(const T& a) {
  if (a.size() == 0 || a.rank() == 0) {
    throw ShapeError("max_pool_to_vector: empty tensor " + shape_str(a.shape()));
  }
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  T out = make_output({d}, {&a});
  std::vector<std::size_t> arg(d, 0);
  auto x = a.data();
  auto o = out.data();
  for (std::size_t j = 0; j < d; ++j) {
    Real best = x[j];
    for (std::size_t r = 1; r < rows; ++r) {
      if (x[r * d + j] > best) {
        best = x[r * d + j];
        arg[j] = r;
      }
    }
    o[j] = best;
  }
  push(out, [a, out, d, arg = std::move(arg)] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t j = 0; j < d; ++j) ga[arg[j] * d + j] += g[j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout

template <class Real>
Tensor<Real> Tape<Real>::reshape(const T& a, Shape shape) {
  require(shape_size(shape) == a.size(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  T out = make_output(std::move(shape), {&a});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  push(out, [a, out] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::permute(const T& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  require(axes.size() == r, "permute: expected " + std::to_string(r) + " axes");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    require(ax < r && !seen[ax], "permute: invalid axis permutation");
    seen[ax] = true;
  }
  Shape in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[axes[i]];
  T out = make_output(out_shape, {&a});

  // Source offset for every output element, walked with an odometer.
  std::vector<std::size_t> source(a.size());
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < source.size(); ++j) {
    source[j] = offset;
    for (std::size_t i = r; i-- > 0;) {
      ++idx[i];
      offset += in_stride[axes[i]];
      if (idx[i] < out_shape[i]) break;
      offset -= idx[i] * in_stride[axes[i]];
      idx[i] = 0;
    }
  }
  auto x = a.data();
  auto o = out.data();
  for (std::size_t j = 0; j < source.size(); ++j) o[j] = x[source[j]];
  push(out, [a, out, source = std::move(source)] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t j = 0; j < g.size(); ++j) ga[source[j]] += g[j];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::concat(const T& a, const T& b, std::size_t axis) {
  require(a.rank() == b.rank(), "concat: rank mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  require(axis < a.rank(), "concat: axis " + std::to_string(axis) + " out of range for rank " +
                               std::to_string(a.rank()));
  Shape shape = a.shape();
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i == axis) continue;
    require(a.shape()[i] == b.shape()[i], "concat: dimension " + std::to_string(i) +
                                              " differs between " + shape_str(a.shape()) +
                                              " and " + shape_str(b.shape()));
  }
  shape[axis] += b.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  const std::size_t ca = a.shape()[axis] * inner;
  const std::size_t cb = b.shape()[axis] * inner;
  T out = make_output(std::move(shape), {&a, &b});
  auto o = out.data();
  for (std::size_t k = 0; k < outer; ++k) {
    std::copy_n(a.data().data() + k * ca, ca, o.data() + k * (ca + cb));
    std::copy_n(b.data().data() + k * cb, cb, o.data() + k * (ca + cb) + ca);
  }
  push(out, [a, b, out, outer, ca, cb] {
    auto g = out.grad();
    Real* ga = grad_buffer(a);
    Real* gb = grad_buffer(b);
    for (std::size_t k = 0; k < outer; ++k) {
      const Real* src = g.data() + k * (ca + cb);
      if (ga)
        for (std::size_t i = 0; i < ca; ++i) ga[k * ca + i] += src[i];
      if (gb)
        for (std::size_t i = 0; i < cb; ++i) gb[k * cb + i] += src[ca + i];
    }
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::take(const T& a, std::size_t index) {
  require(a.rank() >= 1 && index < a.dim(0), "take: index " + std::to_string(index) +
                                                 " out of range for " + shape_str(a.shape()));
  Shape shape(a.shape().begin() + 1, a.shape().end());
  const std::size_t n = shape_size(shape);
  T out = make_output(std::move(shape), {&a});
  std::copy_n(a.data().data() + index * n, n, out.data().data());
  push(out, [a, out, index, n] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i) ga[index * n + i] += g[i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::stack(const std::vector<T>& parts) {
  require(!parts.empty(), "stack: no inputs");
  std::vector<const T*> inputs;
  for (const auto& p : parts) {
    require(p.shape() == parts.front().shape(), "stack: shape mismatch " +
                                                    shape_str(p.shape()) + " vs " +
                                                    shape_str(parts.front().shape()));
    inputs.push_back(&p);
  }
  Shape shape = parts.front().shape();
  const std::size_t n = shape_size(shape);
  shape.insert(shape.begin(), parts.size());
  T out = make_output(std::move(shape), inputs);
  for (std::size_t j = 0; j < parts.size(); ++j)
    std::copy_n(parts[j].data().data(), n, out.data().data() + j * n);
  push(out, [parts, out, n] {
    auto g = out.grad();
    for (std::size_t j = 0; j < parts.size(); ++j)
      if (Real* gp = grad_buffer(parts[j]))
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[j * n + i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::broadcast_leading(const T& a, std::size_t count) {
  Shape shape = a.shape();
  shape.insert(shape.begin(), count);
  const std::size_t n = a.size();
  T out = make_output(std::move(shape), {&a});
  for (std::size_t c = 0; c < count; ++c)
    std::copy_n(a.data().data(), n, out.data().data() + c * n);
  push(out, [a, out, count, n] {
    auto g = out.grad();
    if (Real* ga = grad_buffer(a))
      for (std::size_t c = 0; c < count; ++c)
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[c * n + i];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::gather_rows(const T& table, std::span<const std::int32_t> rows) {
  require(table.rank() == 2, "gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (auto r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= v) {
      throw std::out_of_range("gather_rows: row " + std::to_string(r) + " outside [0, " +
                              std::to_string(v) + ")");
    }
  }
  T out = make_output({rows.size(), d}, {&table});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(table.data().data() + rows[i] * d, d, out.data().data() + i * d);
  std::vector<std::int32_t> idx(rows.begin(), rows.end());
  push(out, [table, out, d, idx = std::move(idx)] {
    auto g = out.grad();
    if (Real* gt = grad_buffer(table))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::weighted_sum(const T& weights, const std::vector<T>& parts) {
  require(weights.rank() == 1 && weights.dim(0) == parts.size() && !parts.empty(),
          "weighted_sum: " + std::to_string(parts.size()) + " parts for weights " +
              shape_str(weights.shape()));
  std::vector<const T*> inputs{&weights};
  for (const auto& p : parts) {
    require(p.shape() == parts.front().shape(), "weighted_sum: shape mismatch " +
                                                    shape_str(p.shape()) + " vs " +
                                                    shape_str(parts.front().shape()));
    inputs.push_back(&p);
  }
  const std::size_t n = parts.front().size();
  T out = make_output(parts.front().shape(), inputs);
  auto w = weights.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) acc += double(w[j]) * parts[j].data()[i];
    o[i] = static_cast<Real>(acc);
  }
  push(out, [weights, parts, out, n] {
    auto g = out.grad();
    auto w = weights.data();
    if (Real* gw = grad_buffer(weights)) {
      for (std::size_t j = 0; j < parts.size(); ++j) {
        double acc = 0;
        auto p = parts[j].data();
        for (std::size_t i = 0; i < n; ++i) acc += double(g[i]) * p[i];
        gw[j] += static_cast<Real>(acc);
      }
    }
    for (std::size_t j = 0; j < parts.size(); ++j)
      if (Real* gp = grad_buffer(parts[j]))
        for (std::size_t i = 0; i < n; ++i) gp[i] += w[j] * g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <class Real>
Tensor<Real> Tape<Real>::bce_with_logits(const T& logits, std::span<const int> labels) {
  require(labels.size() == logits.size() && !labels.empty(),
          "bce_with_logits: " + std::to_string(labels.size()) + " labels for logits " +
              shape_str(logits.shape()));
  for (int y : labels) {
    if (y != 0 && y != 1) {
      throw std::invalid_argument("bce_with_logits: label " + std::to_string(y) +
                                  " outside {0,1}");
    }
  }
  T out = make_output({}, {&logits});
  const auto z = logits.data();
  double acc = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    acc += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  out.data()[0] = static_cast<Real>(acc / z.size());
  std::vector<int> y(labels.begin(), labels.end());
  push(out, [logits, out, y = std::move(y)] {
    const double g = double(out.grad()[0]) / y.size();
    auto z = logits.data();
    if (Real* gl = grad_buffer(logits))
      for (std::size_t i = 0; i < y.size(); ++i)
        gl[i] += static_cast<Real>(g * (sigmoid(z[i]) - y[i]));
  });
  return out;
}

template <class Real>
Tensor<Real> Tape<Real>::cross_entropy_rows(const T& logits,
                                            std::span<const std::int32_t> targets) {
  require(logits.rank() == 2 && logits.dim(0) == targets.size() && !targets.empty(),
          "cross_entropy_rows: " + std::to_string(targets.size()) + " targets for logits " +
              shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy_rows: target " + std::to_string(t) +
                              " outside [0, " + std::to_string(v) + ")");
    }
  }
  T out = make_output({}, {&logits});
  auto z = logits.data();
  double acc = 0;
  std::vector<double> lse(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = z.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[r] = mx + std::log(s);
    acc += lse[r] - row[targets[r]];
  }
  out.data()[0] = static_cast<Real>(acc / n);
  std::vector<std::int32_t> t(targets.begin(), targets.end());
  push(out, [logits, out, n, v, t = std::move(t), lse = std::move(lse)] {
    const double g = double(out.grad()[0]) / n;
    auto z = logits.data();
    Real* gl = grad_buffer(logits);
    if (!gl) return;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < v; ++j) {
        const double p = std::exp(z[r * v + j] - lse[r]);
        gl[r * v + j] += static_cast<Real>(g * (p - (static_cast<std::int32_t>(j) == t[r])));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------

template <class Real>
void Tape<Real>::backward(const T& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    records_.clear();
    return;
  }
  if (loss.node_->producer != this) {
    throw std::invalid_argument("backward: loss was not produced on this tape");
  }
  loss.node_->grad.assign(1, Real(1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->run();
    if (!it->output->trainable) {
      it->output->grad.clear();
      it->output->grad.shrink_to_fit();
    }
  }
  records_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace peftlab
