#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "peftlab/diagnostics.hpp"
#include "peftlab/gradcheck.hpp"
#include "peftlab/optim.hpp"
#include "peftlab/tape.hpp"

using namespace peftlab;

namespace {

using Td = Tensor<double>;
using Tf = Tensor<float>;

Td make(Shape shape, std::vector<double> values, bool trainable = false) {
  return Td(std::move(shape), std::move(values), trainable);
}

Td random_uniform(Shape shape, Rng& rng, bool trainable = true) {
  Td t(std::move(shape), trainable);
  fill_uniform(t.data(), rng, -1.0, 1.0);
  return t;
}

std::vector<double> values(const Td& t) { return {t.data().begin(), t.data().end()}; }

// Naive triple loop, independent of the tape implementation.
std::vector<double> reference_matmul(const Td& a, const Td& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
  return out;
}

}  // namespace

TEST(Tensor, SizeMatchesShapeProduct) {
  Tf t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(shape_size({2, 3, 4}), 24u);
  EXPECT_THROW(Tf({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, CopiesShareStorageAndCloneDetaches) {
  Tf a({2}, {1, 2});
  Tf b = a;
  Tf c = a.clone();
  b.data()[0] = 5;
  EXPECT_EQ(a.data()[0], 5);
  EXPECT_EQ(c.data()[0], 1);
}

TEST(Matmul, IdentityAndDotProduct) {
  Tape<double> tape(false);
  auto a = make({2, 2}, {1, 2, 3, 4});
  auto eye = make({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(tape.matmul(a, eye)), (std::vector<double>{1, 2, 3, 4}));
  auto r = tape.matmul(make({1, 2}, {1, 2}), make({2, 1}, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.data()[0], 11);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<double> tape(false);
  try {
    tape.matmul(make({1, 2}, {1, 2}), make({1, 2}, {1, 2}));
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1,2) x (1,2)"), std::string::npos) << msg;
  }
}

TEST(Matmul, MatchesNaiveProductOnRandomInputs) {
  Rng rng(3);
  Tape<double> tape(false);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + uniform_index(rng, 6), k = 1 + uniform_index(rng, 6),
                      n = 1 + uniform_index(rng, 6);
    auto a = random_uniform({m, k}, rng), b = random_uniform({k, n}, rng);
    const auto got = values(tape.matmul(a, b));
    const auto want = reference_matmul(a, b);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Softmax, Examples) {
  Tape<double> tape(false);
  auto s = tape.softmax_rows(make({3, 2}, {0, 0, std::log(2.0), 0, 1000, 0}));
  EXPECT_NEAR(s.data()[0], 0.5, 1e-12);
  EXPECT_NEAR(s.data()[1], 0.5, 1e-12);
  EXPECT_NEAR(s.data()[2], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.data()[3], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.data()[4], 1.0, 1e-6);
  EXPECT_NEAR(s.data()[5], 0.0, 1e-6);
  for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Softmax, RowsSumToOneForLargeMagnitudes) {
  Rng rng(5);
  Tape<float> tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    Tf x({4, 7});
    fill_uniform(x.data(), rng, -1e4, 1e4);
    auto s = tape.softmax_rows(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 7; ++c) sum += s.data()[r * 7 + c];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, Examples) {
  Tape<double> tape(false);
  auto ones3 = make({3}, {1, 1, 1}), zeros3 = make({3}, {0, 0, 0});
  auto c = tape.layer_norm(make({3}, {5, 5, 5}), ones3, zeros3, 1e-5);
  for (double v : c.data()) EXPECT_NEAR(v, 0.0, 1e-12);
  auto ones2 = make({2}, {1, 1}), zeros2 = make({2}, {0, 0});
  auto pm = tape.layer_norm(make({2}, {1, -1}), ones2, zeros2, 1e-12);
  EXPECT_NEAR(pm.data()[0], 1.0, 1e-9);
  EXPECT_NEAR(pm.data()[1], -1.0, 1e-9);
  auto aff = tape.layer_norm(make({2}, {1, -1}), zeros2, make({2}, {7, 7}), 1e-5);
  EXPECT_EQ(values(aff), (std::vector<double>{7, 7}));
}

TEST(LayerNorm, NormalizesEveryRow) {
  Rng rng(9);
  Tape<double> tape(false);
  auto x = random_uniform({5, 8}, rng, false);
  Td gain({8}), bias({8});
  std::fill(gain.data().begin(), gain.data().end(), 1.0);
  auto y = tape.layer_norm(x, gain, bias, 1e-9);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y.data()[r * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) var += std::pow(y.data()[r * 8 + c] - mean, 2) / 8;
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Concat, PromptAndKeyLengthsAdd) {
  Tape<double> tape(false);
  Td prompts({3, 4}), keys({5, 4});
  EXPECT_EQ(tape.concat(prompts, keys, 0).shape(), (Shape{8, 4}));
}

TEST(Concat, EmptyPrefixLeavesInputUnchanged) {
  Rng rng(1);
  Tape<double> tape(false);
  Td empty({0, 4});
  auto k = random_uniform({5, 4}, rng, false);
  auto r = tape.concat(empty, k, 0);
  EXPECT_EQ(r.shape(), k.shape());
  EXPECT_EQ(values(r), values(k));
}

TEST(Concat, Errors) {
  Tape<double> tape(false);
  Td a({2, 3}), b({2, 3}), c({2, 4});
  EXPECT_THROW(tape.concat(a, b, 7), ShapeError);
  EXPECT_THROW(tape.concat(a, c, 0), ShapeError);
}

TEST(MaxPool, Examples) {
  Tape<double> tape(false);
  // Channel 0 holds its maximum 4 once; channel 1 is all negative.
  auto x = make({3, 2}, {1, -5, 4, -2, 0, -9});
  EXPECT_EQ(values(tape.max_pool_to_vector(x)), (std::vector<double>{4, -2}));
  Td p({2, 2, 3, 6});
  EXPECT_EQ(tape.max_pool_to_vector(p).shape(), (Shape{6}));
  Td empty({0, 6});
  EXPECT_THROW(tape.max_pool_to_vector(empty), std::invalid_argument);
}

TEST(Bce, Examples) {
  Tape<double> tape(false);
  const std::vector<int> one{1};
  EXPECT_NEAR(tape.bce_with_logits(make({1}, {0}), one).item(), std::log(2.0), 1e-12);
  EXPECT_LE(tape.bce_with_logits(make({1}, {20}), one).item(), 1e-8);
  const double big = tape.bce_with_logits(make({1}, {-20}), one).item();
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 20.0, 1e-8);
  Tape<float> ftape(false);
  EXPECT_TRUE(std::isfinite(ftape.bce_with_logits(Tf(Shape{1}, std::vector<float>{-200.0f}), one).item()));
}

TEST(Bce, RejectsLabelsOutsideZeroOne) {
  Tape<double> tape(false);
  const std::vector<int> bad{2};
  EXPECT_THROW(tape.bce_with_logits(make({1}, {0}), bad), std::invalid_argument);
}

TEST(Backward, SquareGradient) {
  Tape<double> tape;
  auto x = make({1}, {3}, true);
  tape.backward(tape.sum(tape.mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, FrozenTensorsGetNoGradient) {
  Rng rng(2);
  Tape<double> tape;
  auto w = random_uniform({3, 3}, rng, true);
  auto frozen = random_uniform({3, 3}, rng, false);
  auto h = tape.matmul(tape.matmul(w, frozen), frozen);
  tape.backward(tape.sum(tape.gelu(h)));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(w.grad().size(), w.size());
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  auto x = make({2}, {1, 2}, true);
  EXPECT_THROW(tape.backward(tape.scale(x, 2.0)), std::invalid_argument);
}

TEST(Backward, TapeIsEmptiedAfterReplay) {
  Tape<double> tape;
  auto x = make({2}, {1, 2}, true);
  auto loss = tape.sum(tape.mul(x, x));
  EXPECT_GT(tape.size(), 0u);
  tape.backward(loss);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, InferenceTapeRecordsNothing) {
  Tape<double> tape(false);
  auto x = make({2}, {1, 2}, true);
  auto y = tape.sum(tape.mul(x, x));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, MatmulChainMatchesFiniteDifferences) {
  Rng rng(4);
  auto a = random_uniform({3, 4}, rng), b = random_uniform({4, 5}, rng), c = random_uniform({5, 2}, rng);
  const ScalarFn<double> f = [&](Tape<double>& t) {
    return t.sum(t.gelu(t.matmul(t.matmul(a, b), c)));
  };
  EXPECT_LT(grad_check<double>(f, {a, b, c}).max_rel_error, 1e-4);
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(6);
  auto x = random_uniform({4, 3}, rng);
  const ScalarFn<double> f = [&](Tape<double>& t) { return t.sum(t.mul(x, x)); };
  const auto r = grad_check<double>(f, {x});
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(r.coords_checked, 12u);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  Rng rng(7);
  auto x = random_uniform({3}, rng);
  const ScalarFn<double> f = [&](Tape<double>& t) { return t.sum(t.scale(x, 0.0)); };
  EXPECT_LT(grad_check<double>(f, {x}).max_rel_error, 1e-12);
}

TEST(GradCheck, EveryPrimitiveAgreesWithFiniteDifferences) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    for (const auto& c : check_primitive_gradients(seed)) {
      EXPECT_LT(c.report.max_rel_error, 1e-4) << c.name << " seed " << seed;
      EXPECT_GT(c.report.coords_checked, 0u) << c.name;
    }
  }
}

TEST(GradCheck, ClassifierForwardOnTwoTokens) {
  GradCheckSetup s;
  s.model.layers = 1;
  s.model.hidden = 8;
  s.model.heads = 2;
  s.model.ffn = 16;
  s.model.vocab = 12;
  s.model.max_len = 4;
  s.batch = 2;
  s.length = 2;
  s.pl = 2;
  EXPECT_LT(check_classifier_gradients(s).max_rel_error, 1e-4);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tf p({4}, {1, 2, 3, 4}, true);
  Adam<float> opt({p}, {.lr = 1e-3});
  Tape<float> tape;
  tape.backward(tape.sum(p));  // gradient of one everywhere
  opt.step();
  // Reference update: m = 0.1, v = 0.001, bias correction gives m_hat = 1,
  // v_hat = 1, so the step is lr * 1 / (1 + eps).
  const double step = 1e-3 / (1.0 + 1e-8);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p.data()[i], (i + 1) - step, 1e-6);
  EXPECT_EQ(opt.steps(), 1);
  EXPECT_FALSE(p.has_grad());
  EXPECT_EQ(opt.state(0).m.size(), p.size());
  EXPECT_EQ(opt.state(0).v.size(), p.size());
}

TEST(Adam, MatchesReferenceOverSeveralSteps) {
  Rng rng(11);
  Td p({5}, true);
  fill_uniform(p.data(), rng, -1, 1);
  std::vector<double> ref(p.data().begin(), p.data().end()), m(5, 0), v(5, 0);
  const AdamOptions o{.lr = 0.01};
  Adam<double> opt({p}, o);
  for (int t = 1; t <= 5; ++t) {
    Tape<double> tape;
    tape.backward(tape.sum(tape.mul(p, p)));
    std::vector<double> g(p.grad().begin(), p.grad().end());
    opt.step();
    EXPECT_EQ(opt.steps(), t);
    for (int i = 0; i < 5; ++i) {
      m[i] = o.beta1 * m[i] + (1 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1 - o.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(o.beta1, t)), vh = v[i] / (1 - std::pow(o.beta2, t));
      ref[i] -= o.lr * mh / (std::sqrt(vh) + o.eps);
      EXPECT_NEAR(p.data()[i], ref[i], 1e-12);
    }
  }
}

TEST(Adam, ZeroGradientLeavesParameterUnchanged) {
  Tf p({3}, {1, 2, 3}, true);
  Adam<float> opt({p}, {});
  Tape<float> tape;
  tape.backward(tape.sum(tape.scale(p, 0.0f)));
  opt.step();
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{1, 2, 3}));
}

TEST(Adam, MissingGradientIsAnError) {
  Tf p({3}, {1, 2, 3}, true);
  Adam<float> opt({p}, {});
  EXPECT_THROW(opt.step(), std::logic_error);
}

TEST(Determinism, IdenticalRunsAreBitwiseEqual) {
  const auto run = [] {
    Rng rng(42);
    Tf w({4, 4}, true), x({3, 4});
    fill_normal(w.data(), rng, 0.5);
    fill_normal(x.data(), rng, 1.0);
    Adam<float> opt({w}, {.lr = 0.05});
    for (int i = 0; i < 10; ++i) {
      Tape<float> tape;
      Rng drop(7);
      auto h = tape.dropout(tape.gelu(tape.matmul(x, w)), 0.2, drop);
      tape.backward(tape.mean(tape.softmax_rows(h)));
      opt.step();
    }
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}
