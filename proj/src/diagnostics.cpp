#include "peftlab/diagnostics.hpp"

#include <functional>

#include "peftlab/prompt_mixture.hpp"

namespace peftlab {

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  T t(std::move(shape));
  fill_normal(t.data(), rng, stddev);
  return t;
}

GradCheckCase check_op(std::string name, std::vector<T> inputs,
                       const std::function<T(Tape<double>&)>& op, Rng& rng) {
  Tape<double> probe(false);
  const auto projection = random_tensor(op(probe).shape(), rng);
  const ScalarFn<double> f = [&](Tape<double>& tape) {
    return tape.sum(tape.mul(op(tape), projection));
  };
  return {std::move(name), grad_check<double>(f, std::move(inputs))};
}

TokenBatch random_batch(const GradCheckSetup& s, Rng& rng) {
  std::vector<std::vector<std::int32_t>> seqs;
  for (std::size_t b = 0; b < s.batch; ++b) {
    // Lengths vary so that padding is exercised.
    const std::size_t len = std::max<std::size_t>(2, s.length - (b % s.length) / 2);
    std::vector<std::int32_t> seq{kClsId};
    while (seq.size() < len) {
      seq.push_back(static_cast<std::int32_t>(4 + uniform_index(rng, s.model.vocab - 4)));
    }
    seqs.push_back(std::move(seq));
  }
  return TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>>(seqs));
}

// Parameters at the tiny initialization scale sit where the layer norms are
// strongly curved, which swamps finite differences; redraw them at a scale
// comparable to the activations.
EncoderModel<double> check_model(const ModelConfig& config, std::uint64_t seed) {
  auto model = EncoderModel<float>(config, seed, false).cast<double>();
  Rng rng(derive_seed(seed, "rescale"));
  for (auto& it : model.params().items()) {
    const bool gain = it.name.ends_with(".gain");
    std::normal_distribution<double> dist(gain ? 1.0 : 0.0, gain ? 0.1 : 0.3);
    for (auto& v : it.tensor.data()) v = dist(rng);
  }
  return model;
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(uniform_index(rng, 2));
  return y;
}

}  // namespace

std::vector<GradCheckCase> check_primitive_gradients(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "primitives"));
  std::vector<GradCheckCase> out;
  const auto r = [&](Shape s, double sd = 1.0) { return random_tensor(std::move(s), rng, sd); };

  {
    auto a = r({3, 4}), b = r({4, 2});
    out.push_back(check_op("matmul", {a, b}, [=](Tape<double>& t) { return t.matmul(a, b); }, rng));
  }
  {
    auto a = r({2, 3, 4}), b = r({2, 4, 5});
    out.push_back(check_op("bmm", {a, b}, [=](Tape<double>& t) { return t.bmm(a, b); }, rng));
  }
  {
    auto a = r({2, 3, 4}), b = r({2, 5, 4});
    out.push_back(
        check_op("bmm_transpose_b", {a, b}, [=](Tape<double>& t) { return t.bmm(a, b, true); }, rng));
  }
  {
    auto a = r({3, 4}), b = r({3, 4});
    out.push_back(check_op("add", {a, b}, [=](Tape<double>& t) { return t.add(a, b); }, rng));
    out.push_back(check_op("sub", {a, b}, [=](Tape<double>& t) { return t.sub(a, b); }, rng));
    out.push_back(check_op("mul", {a, b}, [=](Tape<double>& t) { return t.mul(a, b); }, rng));
    out.push_back(check_op("scale", {a}, [=](Tape<double>& t) { return t.scale(a, 0.7); }, rng));
  }
  {
    auto a = r({2, 3, 4}), bias = r({4});
    out.push_back(
        check_op("add_bias", {a, bias}, [=](Tape<double>& t) { return t.add_bias(a, bias); }, rng));
  }
  {
    auto a = r({3, 4});
    const auto c = r({3, 4});
    std::vector<double> constant(c.data().begin(), c.data().end());
    out.push_back(check_op("add_const", {a},
                           [=](Tape<double>& t) { return t.add_const(a, constant); }, rng));
  }
  {
    auto a = r({3, 4});
    auto s = T::scalar(1.7);
    out.push_back(check_op("divide", {a, s}, [=](Tape<double>& t) { return t.divide(a, s); }, rng));
  }
  {
    auto a = r({3, 4});
    out.push_back(check_op("gelu", {a}, [=](Tape<double>& t) { return t.gelu(a); }, rng));
    out.push_back(check_op("relu", {a}, [=](Tape<double>& t) { return t.relu(a); }, rng));
    out.push_back(check_op("dropout", {a},
                           [=](Tape<double>& t) {
                             Rng mask_rng(11);  // same mask on every evaluation
                             return t.dropout(a, 0.3, mask_rng);
                           },
                           rng));
    out.push_back(check_op("sum", {a}, [=](Tape<double>& t) { return t.sum(a); }, rng));
    out.push_back(check_op("mean", {a}, [=](Tape<double>& t) { return t.mean(a); }, rng));
    out.push_back(check_op("reshape", {a}, [=](Tape<double>& t) { return t.reshape(a, {2, 6}); }, rng));
    out.push_back(check_op("take", {a}, [=](Tape<double>& t) { return t.take(a, 1); }, rng));
    out.push_back(check_op("broadcast_leading", {a},
                           [=](Tape<double>& t) { return t.broadcast_leading(a, 2); }, rng));
  }
  {
    auto a = r({3, 5});
    out.push_back(check_op("softmax_rows", {a}, [=](Tape<double>& t) { return t.softmax_rows(a); }, rng));
  }
  {
    auto a = r({3, 6}), gain = r({6}), bias = r({6});
    out.push_back(check_op("layer_norm", {a, gain, bias},
                           [=](Tape<double>& t) { return t.layer_norm(a, gain, bias, 1e-5); }, rng));
  }
  {
    auto a = r({4, 3, 5});
    out.push_back(check_op("max_pool_to_vector", {a},
                           [=](Tape<double>& t) { return t.max_pool_to_vector(a); }, rng));
  }
  {
    auto a = r({2, 3, 4});
    out.push_back(check_op("permute", {a},
                           [=](Tape<double>& t) { return t.permute(a, {1, 0, 2}); }, rng));
  }
  {
    auto a = r({2, 3}), b = r({4, 3}), c = r({2, 5});
    out.push_back(check_op("concat_axis0", {a, b}, [=](Tape<double>& t) { return t.concat(a, b, 0); }, rng));
    out.push_back(check_op("concat_axis1", {a, c}, [=](Tape<double>& t) { return t.concat(a, c, 1); }, rng));
  }
  {
    auto a = r({2, 3}), b = r({2, 3}), c = r({2, 3});
    out.push_back(check_op("stack", {a, b, c}, [=](Tape<double>& t) { return t.stack({a, b, c}); }, rng));
    auto w = r({3});
    out.push_back(check_op("weighted_sum", {w, a, b, c},
                           [=](Tape<double>& t) { return t.weighted_sum(w, {a, b, c}); }, rng));
  }
  {
    auto table = r({5, 3});
    const std::vector<std::int32_t> rows{0, 2, 2, 4};
    out.push_back(check_op("gather_rows", {table},
                           [=](Tape<double>& t) { return t.gather_rows(table, rows); }, rng));
  }
  {
    auto logits = r({5}, 2.0);
    const std::vector<int> labels{1, 0, 0, 1, 1};
    out.push_back(check_op("bce_with_logits", {logits},
                           [=](Tape<double>& t) { return t.bce_with_logits(logits, labels); }, rng));
  }
  {
    auto logits = r({4, 5});
    const std::vector<std::int32_t> targets{0, 3, 4, 1};
    out.push_back(check_op("cross_entropy_rows", {logits},
                           [=](Tape<double>& t) { return t.cross_entropy_rows(logits, targets); }, rng));
  }
  return out;
}

GradCheckReport check_classifier_gradients(const GradCheckSetup& setup) {
  Rng rng(derive_seed(setup.seed, "classifier-check"));
  const auto model = check_model(setup.model, derive_seed(setup.seed, "model"));
  auto prompts = PromptSet<double>::random(setup.model.layers, setup.pl, setup.model.hidden, rng, 0.5);
  const auto batch = random_batch(setup, rng);
  const auto labels = random_labels(setup.batch, rng);
  std::vector<T> params;
  for (const auto& it : model.params().items()) params.push_back(it.tensor);
  params.push_back(prompts.key);
  params.push_back(prompts.value);
  const ScalarFn<double> f = [&](Tape<double>& tape) {
    return tape.bce_with_logits(classifier_logits(tape, model, batch, &prompts), labels);
  };
  // The deep composition needs a smaller step to keep truncation error low.
  return grad_check<double>(f, params, {1e-4, setup.coords_per_param, setup.seed});
}

GradCheckReport check_mixture_gradients(const GradCheckSetup& setup) {
  Rng rng(derive_seed(setup.seed, "mixture-check"));
  const auto& cfg = setup.model;
  const auto model = check_model(cfg, derive_seed(setup.seed, "model"));
  SourcePromptBank<double> bank;
  for (std::size_t i = 0; i < setup.sources; ++i) {
    bank.add("source" + std::to_string(i),
             PromptSet<double>::random(cfg.layers, setup.pl, cfg.hidden, rng, 0.5));
  }
  auto module = MixtureModule<double>::init(cfg.hidden, derive_seed(setup.seed, "module"));
  // A unit-scale query keeps the weights away from uniform.
  fill_normal(module.q.data(), rng, 1.0);
  fill_normal(module.norm_gain.data(), rng, 1.0);
  fill_normal(module.norm_bias.data(), rng, 0.3);
  const auto batch = random_batch(setup, rng);
  const auto labels = random_labels(setup.batch, rng);
  std::vector<T> params = module.params();
  for (const auto& p : bank.prompts) {
    params.push_back(p.key);
    params.push_back(p.value);
  }
  params.push_back(model.params().at("head.cls.weight"));
  params.push_back(model.params().at("head.cls.bias"));
  const ScalarFn<double> f = [&](Tape<double>& tape) {
    const auto w = mixture_weights(tape, module, bank);
    const auto target = compose_target(tape, w, bank);
    return tape.bce_with_logits(classifier_logits(tape, model, batch, &target), labels);
  };
  return grad_check<double>(f, params, {1e-4, setup.coords_per_param, setup.seed});
}

}  // namespace peftlab
