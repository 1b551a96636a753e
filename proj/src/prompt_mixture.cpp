#include "peftlab/prompt_mixture.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "peftlab/checkpoint.hpp"

namespace peftlab {

// ---------------------------------------------------------------------------
// Bank and module

template <class Real>
void SourcePromptBank<Real>::add(std::string name, PromptSet<Real> prompt) {
  for (const auto& n : names)
    if (n == name) throw std::invalid_argument("bank: duplicate task '" + name + "'");
  if (!prompts.empty() && (prompt.key.shape() != prompts.front().key.shape() ||
                           prompt.value.shape() != prompts.front().value.shape())) {
    throw ShapeError("bank: prompt for '" + name + "' has shape " + shape_str(prompt.key.shape()) +
                     ", bank holds " + shape_str(prompts.front().key.shape()));
  }
  if (prompt.key.shape() != prompt.value.shape()) {
    throw ShapeError("bank: key and value prompts for '" + name + "' differ in shape");
  }
  names.push_back(std::move(name));
  prompts.push_back(std::move(prompt));
}

template <class Real>
void SourcePromptBank<Real>::validate() const {
  if (prompts.empty()) throw std::invalid_argument("bank: no source prompts");
  if (names.size() != prompts.size()) throw std::invalid_argument("bank: names and prompts differ");
  for (const auto& p : prompts) {
    if (p.key.shape() != prompts.front().key.shape() || p.value.shape() != p.key.shape()) {
      throw ShapeError("bank: inconsistent prompt shapes");
    }
  }
}

template <class Real>
SourcePromptBank<Real> SourcePromptBank<Real>::permuted(std::span<const std::size_t> order) const {
  if (order.size() != size()) throw std::invalid_argument("bank: permutation length mismatch");
  SourcePromptBank out;
  for (auto i : order) out.add(names.at(i), prompts.at(i));
  return out;
}

template <class Real>
MixtureModule<Real> MixtureModule<Real>::init(std::size_t hidden, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "mixture-init"));
  MixtureModule m;
  m.wk = Tensor<Real>({hidden, hidden});
  fill_normal(m.wk.data(), rng, 1.0 / std::sqrt(double(hidden)));
  m.q = Tensor<Real>({hidden});
  fill_normal(m.q.data(), rng, 0.02);
  m.norm_gain = Tensor<Real>({hidden}, std::vector<Real>(hidden, Real(1)));
  m.norm_bias = Tensor<Real>({hidden});
  return m;
}

template <class Real>
void MixtureModule<Real>::set_trainable(bool on) {
  for (auto t : params()) t.set_trainable(on);
}

template <class Real>
MixtureModule<Real> MixtureModule<Real>::clone() const {
  return {wk.clone(), q.clone(), norm_gain.clone(), norm_bias.clone(), norm_eps};
}

// ---------------------------------------------------------------------------
// Eq. 2 on the tape

template <class Real>
Tensor<Real> pool_prompt(Tape<Real>& tape, const PromptSet<Real>& prompt) {
  return tape.max_pool_to_vector(tape.concat(prompt.key, prompt.value, 0));
}

std::vector<double> weights_from_scaled_dots(std::span<const double> scaled_dots) {
  if (scaled_dots.empty()) throw std::invalid_argument("mixture: no source prompts");
  double denom = 0;
  for (double s : scaled_dots) denom += s * s;
  std::vector<double> w(scaled_dots.size());
  if (denom < kMixtureGuard) {
    std::fill(w.begin(), w.end(), 1.0 / double(w.size()));
    return w;
  }
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = scaled_dots[i] * scaled_dots[i] / denom;
  return w;
}

namespace {

template <class Real>
void check_module(const MixtureModule<Real>& module, const SourcePromptBank<Real>& bank) {
  bank.validate();
  const auto d = bank.hidden();
  if (module.wk.shape() != Shape{d, d} || module.q.shape() != Shape{d} ||
      module.norm_gain.shape() != Shape{d} || module.norm_bias.shape() != Shape{d}) {
    throw ShapeError("mixture: module shapes do not match bank hidden size " + std::to_string(d));
  }
}

// Scaled dots as an [n, 1] tensor.
template <class Real>
Tensor<Real> scaled_dots(Tape<Real>& tape, const MixtureModule<Real>& module,
                         const SourcePromptBank<Real>& bank) {
  check_module(module, bank);
  const auto n = bank.size(), d = bank.hidden();
  std::vector<Tensor<Real>> pooled;
  pooled.reserve(n);
  for (const auto& p : bank.prompts) pooled.push_back(pool_prompt(tape, p));
  auto keys = tape.matmul(tape.stack(pooled), module.wk);  // [n, d]
  keys = tape.layer_norm(keys, module.norm_gain, module.norm_bias, module.norm_eps);
  auto dots = tape.matmul(keys, tape.reshape(module.q, {d, 1}));
  return tape.scale(dots, static_cast<Real>(1.0 / (std::numbers::e * double(d))));
}

}  // namespace

template <class Real>
Tensor<Real> mixture_weights(Tape<Real>& tape, const MixtureModule<Real>& module,
                             const SourcePromptBank<Real>& bank) {
  const auto n = bank.size();
  auto s = tape.reshape(scaled_dots(tape, module, bank), {n});
  auto sq = tape.mul(s, s);
  auto denom = tape.sum(sq);
  if (double(denom.item()) < kMixtureGuard) {
    return Tensor<Real>({n}, std::vector<Real>(n, static_cast<Real>(1.0 / double(n))));
  }
  return tape.divide(sq, denom);
}

template <class Real>
std::vector<double> mixture_scaled_dots(const MixtureModule<Real>& module,
                                        const SourcePromptBank<Real>& bank) {
  Tape<Real> tape(false);
  auto s = scaled_dots(tape, module, bank);
  return {s.data().begin(), s.data().end()};
}

template <class Real>
PromptSet<Real> compose_target(Tape<Real>& tape, const Tensor<Real>& weights,
                               const SourcePromptBank<Real>& bank) {
  bank.validate();
  if (weights.size() != bank.size()) {
    throw std::invalid_argument("compose: " + std::to_string(weights.size()) + " weights for " +
                                std::to_string(bank.size()) + " source prompts");
  }
  std::vector<Tensor<Real>> keys, values;
  for (const auto& p : bank.prompts) {
    keys.push_back(p.key);
    values.push_back(p.value);
  }
  auto w = tape.reshape(weights, {bank.size()});
  return {tape.weighted_sum(w, keys), tape.weighted_sum(w, values)};
}

template <class Real>
PromptSet<Real> compute_target(const MixtureModule<Real>& module, const SourcePromptBank<Real>& bank) {
  Tape<Real> tape(false);
  auto w = mixture_weights(tape, module, bank);
  return compose_target(tape, w, bank);
}

template <class Real>
std::vector<double> compute_weights(const MixtureModule<Real>& module,
                                    const SourcePromptBank<Real>& bank) {
  Tape<Real> tape(false);
  auto w = mixture_weights(tape, module, bank);
  return {w.data().begin(), w.data().end()};
}

std::vector<double> classify_with_mixture(const EncoderModel<float>& model,
                                          const MixtureModule<float>& module,
                                          const SourcePromptBank<float>& bank,
                                          const TokenBatch& batch) {
  Tape<float> tape(false);
  auto w = mixture_weights(tape, module, bank);
  auto target = compose_target(tape, w, bank);
  auto logits = classifier_logits(tape, model, batch, &target);
  std::vector<double> out(batch.batch);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(logits.data()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Training

std::map<std::string, Shape, std::less<>> multitask_shapes(const ModelConfig& config,
                                                           const SourcePromptBank<float>& bank) {
  auto out = classifier_shapes(config);
  const auto d = config.hidden;
  out.emplace("mixture.wk", Shape{d, d});
  out.emplace("mixture.q", Shape{d});
  out.emplace("mixture.norm.gain", Shape{d});
  out.emplace("mixture.norm.bias", Shape{d});
  for (std::size_t i = 0; i < bank.size(); ++i) {
    out.emplace("bank." + bank.names[i] + ".key", bank.prompts[i].key.shape());
    out.emplace("bank." + bank.names[i] + ".value", bank.prompts[i].value.shape());
  }
  return out;
}

ParameterPartition multitask_partition(const ModelConfig& config,
                                       const SourcePromptBank<float>& bank) {
  ParameterPartition p;
  for (auto& [n, s] : multitask_shapes(config, bank)) {
    if (is_classifier_param(n) || n.rfind("mixture.", 0) == 0) {
      p.trainable.insert(n);
    } else {
      p.frozen.insert(n);
    }
  }
  return p;
}

MultitaskResult train_multitask_target(const EncoderModel<float>& model,
                                       const SourcePromptBank<float>& bank,
                                       const LabeledData& train, const LabeledData& val,
                                       const TrainHyper& hyper) {
  bank.validate();
  const auto& cfg = model.config();
  if (bank.hidden() != cfg.hidden || bank.layers() != cfg.layers) {
    throw ShapeError("multitask: bank prompts [" + std::to_string(bank.layers()) + " layers, hidden " +
                     std::to_string(bank.hidden()) + "] do not fit the model");
  }
  if (train.size() == 0 || val.size() == 0) throw std::invalid_argument("multitask: empty split");
  hyper.validate();

  MultitaskResult res{MixtureModule<float>::init(cfg.hidden, derive_seed(hyper.seed, "mixture")),
                      {},
                      {Method::multitask, model.clone(), std::nullopt, {}, 0, all_one_class(val)}};
  auto& m = res.adaptation.model;
  m.drop_mlm_head();
  m.set_all_trainable(false);
  m.reset_classifier(derive_seed(hyper.seed, "classifier"));
  auto& module = res.module;

  TrainingProblem problem;
  problem.params = module.params();
  problem.params.push_back(m.params().at("head.cls.weight"));
  problem.params.push_back(m.params().at("head.cls.bias"));
  problem.train_size = train.size();
  problem.batch_loss = [&](Tape<float>& tape, std::span<const std::size_t> rows, Rng& rng) {
    auto batch = make_batch(train, rows);
    auto w = mixture_weights(tape, module, bank);
    auto target = compose_target(tape, w, bank);
    auto logits = classifier_logits(tape, m, batch, &target, {true, &rng});
    std::vector<int> y;
    for (auto r : rows) y.push_back(train.labels[r]);
    return tape.bce_with_logits(logits, y);
  };
  problem.validate = [&] {
    const auto target = compute_target(module, bank);
    return evaluate_data(m, &target, val).f1;
  };
  res.adaptation.outcome = run_training(problem, hyper);
  for (auto& p : problem.params) p.set_trainable(false);
  res.weights = compute_weights(module, bank);
  res.adaptation.prompts = compute_target(module, bank);
  res.adaptation.trainable_count =
      count_trainable(multitask_partition(cfg, bank), multitask_shapes(cfg, bank));
  return res;
}

void export_target_prompt(const std::filesystem::path& path, const MixtureModule<float>& module,
                          const SourcePromptBank<float>& bank) {
  const auto weights = compute_weights(module, bank);
  std::ostringstream meta;
  meta.precision(17);
  meta << "sources=";
  for (std::size_t i = 0; i < bank.size(); ++i) meta << (i ? "," : "") << bank.names[i];
  meta << "\nweights=";
  for (std::size_t i = 0; i < weights.size(); ++i) meta << (i ? "," : "") << weights[i];
  meta << "\n";
  save_prompts(path, compute_target(module, bank), meta.str());
}

// ---------------------------------------------------------------------------
// Files

namespace {

CheckpointEntry entry_of(std::string name, const Tensor<float>& t) {
  return {std::move(name), t.shape(), {t.data().begin(), t.data().end()}};
}

Tensor<float> tensor_of(const Checkpoint& c, const std::string& name) {
  const auto* e = c.find(name);
  if (!e) throw CheckpointError("checkpoint lacks " + name);
  return Tensor<float>(e->shape, e->values);
}

Checkpoint bank_checkpoint(const SourcePromptBank<float>& bank) {
  bank.validate();
  Checkpoint c;
  c.metadata = "kind=bank\ntasks=";
  for (std::size_t i = 0; i < bank.size(); ++i) {
    if (bank.names[i].find(',') != std::string::npos) {
      throw std::invalid_argument("bank: task names must not contain commas");
    }
    c.metadata += (i ? "," : "") + bank.names[i];
  }
  c.metadata += "\n";
  for (std::size_t i = 0; i < bank.size(); ++i) {
    c.entries.push_back(entry_of("bank." + bank.names[i] + ".key", bank.prompts[i].key));
    c.entries.push_back(entry_of("bank." + bank.names[i] + ".value", bank.prompts[i].value));
  }
  return c;
}

}  // namespace

void save_bank(const std::filesystem::path& path, const SourcePromptBank<float>& bank) {
  save_checkpoint(path, bank_checkpoint(bank));
}

SourcePromptBank<float> load_bank(const std::filesystem::path& path) {
  const auto c = load_checkpoint(path);
  const auto meta = KeyValueConfig::parse(c.metadata);
  if (meta.get_string("kind", "") != "bank") throw CheckpointError(path.string() + " is not a prompt bank");
  SourcePromptBank<float> bank;
  for (const auto& name : meta.get_list("tasks")) {
    bank.add(name, {tensor_of(c, "bank." + name + ".key"), tensor_of(c, "bank." + name + ".value")});
  }
  bank.validate();
  return bank;
}

std::string bank_digest(const SourcePromptBank<float>& bank) {
  return sha256_hex(encode_checkpoint(bank_checkpoint(bank)));
}

void save_mixture(const std::filesystem::path& path, const MixtureModule<float>& module) {
  Checkpoint c;
  std::ostringstream meta;
  meta.precision(17);
  meta << "kind=mixture\nnorm_eps=" << module.norm_eps << "\n";
  c.metadata = meta.str();
  c.entries = {entry_of("mixture.wk", module.wk), entry_of("mixture.q", module.q),
               entry_of("mixture.norm.gain", module.norm_gain),
               entry_of("mixture.norm.bias", module.norm_bias)};
  save_checkpoint(path, c);
}

MixtureModule<float> load_mixture(const std::filesystem::path& path) {
  const auto c = load_checkpoint(path);
  const auto meta = KeyValueConfig::parse(c.metadata);
  if (meta.get_string("kind", "") != "mixture") {
    throw CheckpointError(path.string() + " is not a mixture module");
  }
  return {tensor_of(c, "mixture.wk"), tensor_of(c, "mixture.q"), tensor_of(c, "mixture.norm.gain"),
          tensor_of(c, "mixture.norm.bias"), meta.get_double("norm_eps", 1e-5)};
}

template struct SourcePromptBank<float>;
template struct SourcePromptBank<double>;
template struct MixtureModule<float>;
template struct MixtureModule<double>;

#define PEFTLAB_INSTANTIATE(Real)                                                               \
  template Tensor<Real> pool_prompt<Real>(Tape<Real>&, const PromptSet<Real>&);                 \
  template Tensor<Real> mixture_weights<Real>(Tape<Real>&, const MixtureModule<Real>&,          \
                                              const SourcePromptBank<Real>&);                   \
  template std::vector<double> mixture_scaled_dots<Real>(const MixtureModule<Real>&,            \
                                                         const SourcePromptBank<Real>&);        \
  template PromptSet<Real> compose_target<Real>(Tape<Real>&, const Tensor<Real>&,               \
                                                const SourcePromptBank<Real>&);                 \
  template PromptSet<Real> compute_target<Real>(const MixtureModule<Real>&,                     \
                                                const SourcePromptBank<Real>&);                 \
  template std::vector<double> compute_weights<Real>(const MixtureModule<Real>&,                \
                                                     const SourcePromptBank<Real>&);

PEFTLAB_INSTANTIATE(float)
PEFTLAB_INSTANTIATE(double)

}  // namespace peftlab
