#include "peftlab/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace peftlab {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  if (hidden < 1 || heads < 1) throw ConfigError("model: hidden and heads must be >= 1");
  if (hidden % heads != 0) {
    throw ConfigError("model: hidden (" + std::to_string(hidden) +
                      ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (ffn < 1) throw ConfigError("model: ffn must be >= 1");
  if (vocab < 4) throw ConfigError("model: vocab must be >= 4 to hold the special tokens");
  if (max_len < 2) throw ConfigError("model: max_len must be >= 2");
  if (dropout < 0 || dropout >= 1) throw ConfigError("model: dropout must lie in [0, 1)");
  if (!(norm_eps > 0)) throw ConfigError("model: norm_eps must be positive");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "layers=" << layers << "\n"
     << "hidden=" << hidden << "\n"
     << "heads=" << heads << "\n"
     << "ffn=" << ffn << "\n"
     << "vocab=" << vocab << "\n"
     << "max_len=" << max_len << "\n"
     << "activation=" << (activation == Activation::gelu ? "gelu" : "relu") << "\n"
     << "dropout=" << dropout << "\n"
     << "norm_eps=" << norm_eps << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  auto kv = KeyValueConfig::parse(text);
  ModelConfig c;
  c.layers = kv.get_uint("layers", c.layers);
  c.hidden = kv.get_uint("hidden", c.hidden);
  c.heads = kv.get_uint("heads", c.heads);
  c.ffn = kv.get_uint("ffn", c.ffn);
  c.vocab = kv.get_uint("vocab", c.vocab);
  c.max_len = kv.get_uint("max_len", c.max_len);
  const auto act = kv.get_string("activation", "gelu");
  if (act == "gelu") {
    c.activation = Activation::gelu;
  } else if (act == "relu") {
    c.activation = Activation::relu;
  } else {
    throw ConfigError("model: unknown activation '" + act + "'");
  }
  c.dropout = kv.get_double("dropout", c.dropout);
  c.norm_eps = kv.get_double("norm_eps", c.norm_eps);
  return c;
}

// ---------------------------------------------------------------------------
// ParameterSet

template <class Real>
Tensor<Real>& ParameterSet<Real>::add(std::string name, Tensor<Real> tensor) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  index_.emplace(name, items_.size());
  items_.push_back({std::move(name), std::move(tensor)});
  return items_.back().tensor;
}

template <class Real>
bool ParameterSet<Real>::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <class Real>
Tensor<Real>& ParameterSet<Real>::at(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + std::string(name));
  return items_[it->second].tensor;
}

template <class Real>
const Tensor<Real>& ParameterSet<Real>::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + std::string(name));
  return items_[it->second].tensor;
}

template <class Real>
std::size_t ParameterSet<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& it : items_) n += it.tensor.size();
  return n;
}

template <class Real>
ParameterSet<Real> ParameterSet<Real>::clone() const {
  ParameterSet out;
  for (const auto& it : items_) out.add(it.name, it.tensor.clone());
  return out;
}

// ---------------------------------------------------------------------------
// PromptSet

template <class Real>
PromptSet<Real> PromptSet<Real>::zeros(std::size_t layers, std::size_t length,
                                       std::size_t hidden) {
  return {Tensor<Real>({layers, length, hidden}), Tensor<Real>({layers, length, hidden})};
}

template <class Real>
PromptSet<Real> PromptSet<Real>::random(std::size_t layers, std::size_t length, std::size_t hidden,
                                        Rng& rng, double stddev) {
  auto p = zeros(layers, length, hidden);
  fill_normal(p.key.data(), rng, stddev);
  fill_normal(p.value.data(), rng, stddev);
  return p;
}

template <class Real>
void PromptSet<Real>::validate(const ModelConfig& config) const {
  if (!key.defined() || !value.defined() || key.rank() != 3 || key.shape() != value.shape()) {
    throw ShapeError("prompts: key and value must share a [layers, length, hidden] shape");
  }
  if (key.dim(0) != config.layers || key.dim(2) != config.hidden) {
    throw ShapeError("prompts: shape " + shape_str(key.shape()) + " incompatible with a " +
                     std::to_string(config.layers) + "-layer model of width " +
                     std::to_string(config.hidden));
  }
}

template <class Real>
void PromptSet<Real>::set_trainable(bool on) {
  key.set_trainable(on);
  value.set_trainable(on);
}

template <class Real>
PromptSet<Real> PromptSet<Real>::clone() const {
  return {key.clone(), value.clone()};
}

// ---------------------------------------------------------------------------
// TokenBatch

namespace {
template <class Get>
TokenBatch build_batch(std::size_t n, Get get) {
  TokenBatch b;
  b.batch = n;
  for (std::size_t i = 0; i < n; ++i) b.length = std::max(b.length, get(i).size());
  b.ids.assign(b.batch * b.length, kPadId);
  b.mask.assign(b.batch * b.length, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& seq = get(i);
    std::copy(seq.begin(), seq.end(), b.ids.begin() + i * b.length);
    std::fill_n(b.mask.begin() + i * b.length, seq.size(), 1);
  }
  return b;
}
}  // namespace

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>> sequences) {
  return build_batch(sequences.size(), [&](std::size_t i) -> const std::vector<std::int32_t>& {
    return sequences[i];
  });
}

TokenBatch TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>* const> sequences) {
  return build_batch(sequences.size(), [&](std::size_t i) -> const std::vector<std::int32_t>& {
    return *sequences[i];
  });
}

// ---------------------------------------------------------------------------
// EncoderModel

bool is_classifier_param(std::string_view name) { return name.rfind("head.cls.", 0) == 0; }
bool is_mlm_param(std::string_view name) { return name.rfind("head.mlm.", 0) == 0; }
bool is_backbone_param(std::string_view name) {
  return !is_classifier_param(name) && !is_mlm_param(name);
}

namespace {
constexpr double kInitStd = 0.02;

template <class Real>
Tensor<Real> normal_tensor(Shape shape, Rng& rng, double stddev = kInitStd) {
  Tensor<Real> t(std::move(shape));
  fill_normal(t.data(), rng, stddev);
  return t;
}

template <class Real>
Tensor<Real> constant_tensor(Shape shape, Real value) {
  Tensor<Real> t(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

std::string layer_name(std::size_t i, const char* suffix) {
  return "layer." + std::to_string(i) + "." + suffix;
}
}  // namespace

std::vector<ParameterSpec> parameter_layout(const ModelConfig& config, bool with_mlm_head) {
  config.validate();
  const auto d = config.hidden, f = config.ffn, v = config.vocab;
  std::vector<ParameterSpec> out;
  auto add = [&](std::string name, Shape shape, ParameterInit init) {
    out.push_back({std::move(name), std::move(shape), init});
  };
  add("embed.token", {v, d}, ParameterInit::normal);
  add("embed.position", {config.max_len, d}, ParameterInit::normal);
  add("embed.norm.gain", {d}, ParameterInit::ones);
  add("embed.norm.bias", {d}, ParameterInit::zeros);
  for (std::size_t i = 0; i < config.layers; ++i) {
    for (auto [w, bias] : {std::pair{"attn.wq", "attn.bq"}, std::pair{"attn.wk", "attn.bk"},
                           std::pair{"attn.wv", "attn.bv"}, std::pair{"attn.wo", "attn.bo"}}) {
      add(layer_name(i, w), {d, d}, ParameterInit::normal);
      add(layer_name(i, bias), {d}, ParameterInit::zeros);
    }
    add(layer_name(i, "attn_norm.gain"), {d}, ParameterInit::ones);
    add(layer_name(i, "attn_norm.bias"), {d}, ParameterInit::zeros);
    add(layer_name(i, "ffn.w1"), {d, f}, ParameterInit::normal);
    add(layer_name(i, "ffn.b1"), {f}, ParameterInit::zeros);
    add(layer_name(i, "ffn.w2"), {f, d}, ParameterInit::normal);
    add(layer_name(i, "ffn.b2"), {d}, ParameterInit::zeros);
    add(layer_name(i, "ffn_norm.gain"), {d}, ParameterInit::ones);
    add(layer_name(i, "ffn_norm.bias"), {d}, ParameterInit::zeros);
  }
  add("head.cls.weight", {d, 1}, ParameterInit::normal);
  add("head.cls.bias", {1}, ParameterInit::zeros);
  if (with_mlm_head) {
    add("head.mlm.weight", {d, v}, ParameterInit::normal);
    add("head.mlm.bias", {v}, ParameterInit::zeros);
  }
  return out;
}

template <class Real>
EncoderModel<Real>::EncoderModel(const ModelConfig& config, std::uint64_t seed, bool with_mlm_head)
    : config_(config) {
  Rng rng(derive_seed(seed, "encoder-init"));
  for (auto& spec : parameter_layout(config_, with_mlm_head)) {
    switch (spec.init) {
      case ParameterInit::normal:
        params_.add(spec.name, normal_tensor<Real>(spec.shape, rng));
        break;
      case ParameterInit::zeros:
        params_.add(spec.name, constant_tensor<Real>(spec.shape, 0));
        break;
      case ParameterInit::ones:
        params_.add(spec.name, constant_tensor<Real>(spec.shape, 1));
        break;
    }
  }
}

template <class Real>
EncoderModel<Real>::EncoderModel(const ModelConfig& config, ParameterSet<Real> params)
    : config_(config), params_(std::move(params)) {
  const bool mlm = params_.contains("head.mlm.weight") || params_.contains("head.mlm.bias");
  const auto layout = parameter_layout(config_, mlm);
  for (const auto& spec : layout) {
    if (!params_.contains(spec.name)) throw ShapeError("encoder: missing parameter " + spec.name);
    if (params_.at(spec.name).shape() != spec.shape) {
      throw ShapeError("encoder: parameter " + spec.name + " has shape " +
                       shape_str(params_.at(spec.name).shape()) + ", expected " +
                       shape_str(spec.shape));
    }
  }
  if (params_.items().size() != layout.size()) {
    for (const auto& it : params_.items()) {
      const bool known = std::any_of(layout.begin(), layout.end(),
                                     [&](const ParameterSpec& s) { return s.name == it.name; });
      if (!known) throw ShapeError("encoder: unexpected parameter " + it.name);
    }
  }
}

template <class Real>
LayerParams<Real> EncoderModel<Real>::layer(std::size_t i) const {
  if (i >= config_.layers) throw std::out_of_range("encoder: no layer " + std::to_string(i));
  auto g = [&](const char* s) { return params_.at(layer_name(i, s)); };
  return {g("attn.wq"),        g("attn.bq"),        g("attn.wk"), g("attn.bk"),
          g("attn.wv"),        g("attn.bv"),        g("attn.wo"), g("attn.bo"),
          g("attn_norm.gain"), g("attn_norm.bias"), g("ffn.w1"),  g("ffn.b1"),
          g("ffn.w2"),         g("ffn.b2"),         g("ffn_norm.gain"), g("ffn_norm.bias")};
}

template <class Real>
void EncoderModel<Real>::reset_classifier(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "classifier-init"));
  fill_normal(params_.at("head.cls.weight").data(), rng, kInitStd);
  auto b = params_.at("head.cls.bias").data();
  std::fill(b.begin(), b.end(), Real(0));
}

template <class Real>
void EncoderModel<Real>::drop_mlm_head() {
  if (!has_mlm_head()) return;
  ParameterSet<Real> kept;
  for (auto& it : params_.items())
    if (!is_mlm_param(it.name)) kept.add(it.name, it.tensor);
  params_ = std::move(kept);
}

template <class Real>
void EncoderModel<Real>::set_all_trainable(bool on) {
  for (auto& it : params_.items()) it.tensor.set_trainable(on);
}

// ---------------------------------------------------------------------------
// Forward

namespace {

// [B*len, d] -> [B*H, len, dh]
template <class Real>
Tensor<Real> split_heads(Tape<Real>& tape, const Tensor<Real>& x, std::size_t b, std::size_t len,
                         std::size_t heads, std::size_t dh) {
  auto t = tape.reshape(x, {b, len, heads, dh});
  t = tape.permute(t, {0, 2, 1, 3});
  return tape.reshape(t, {b * heads, len, dh});
}

// [pl, d] -> [B*H, pl, dh], identical for every sequence in the batch.
template <class Real>
Tensor<Real> split_prompt(Tape<Real>& tape, const Tensor<Real>& p, std::size_t b,
                          std::size_t heads, std::size_t dh) {
  const std::size_t pl = p.dim(0);
  auto t = tape.reshape(p, {pl, heads, dh});
  t = tape.permute(t, {1, 0, 2});
  t = tape.broadcast_leading(t, b);
  return tape.reshape(t, {b * heads, pl, dh});
}

template <class Real>
Tensor<Real> linear(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& bias) {
  return tape.add_bias(tape.matmul(x, w), bias);
}

void check_batch(const TokenBatch& batch, const ModelConfig& config) {
  if (batch.batch == 0 || batch.length == 0) throw ShapeError("encoder: empty batch");
  if (batch.ids.size() != batch.batch * batch.length || batch.mask.size() != batch.ids.size()) {
    throw ShapeError("encoder: token batch buffers do not match its dimensions");
  }
  if (batch.length > config.max_len) {
    throw ShapeError("encoder: sequence length " + std::to_string(batch.length) +
                     " exceeds max_len " + std::to_string(config.max_len));
  }
  for (auto id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab) {
      throw std::invalid_argument("encoder: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config.vocab));
    }
  }
}

template <class Real>
Tensor<Real> encode_flat(Tape<Real>& tape, const EncoderModel<Real>& model,
                         const TokenBatch& batch, const PromptSet<Real>* prompts,
                         const ForwardOptions& options,
                         std::vector<AttentionTrace<Real>>* traces) {
  const auto& cfg = model.config();
  check_batch(batch, cfg);
  if (prompts) prompts->validate(cfg);
  const auto& p = model.params();
  const std::size_t b = batch.batch, s = batch.length;

  std::vector<std::int32_t> positions(b * s);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < s; ++j) positions[i * s + j] = static_cast<std::int32_t>(j);

  const double drop = options.train ? cfg.dropout : 0.0;
  auto maybe_dropout = [&](const Tensor<Real>& x) {
    if (drop <= 0.0) return x;
    if (!options.rng) throw std::invalid_argument("encoder: dropout requires an rng");
    return tape.dropout(x, drop, *options.rng);
  };

  auto h = tape.add(tape.gather_rows(p.at("embed.token"), batch.ids),
                    tape.gather_rows(p.at("embed.position"), positions));
  h = tape.layer_norm(h, p.at("embed.norm.gain"), p.at("embed.norm.bias"), cfg.norm_eps);
  h = maybe_dropout(h);

  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const auto layer = model.layer(i);
    Tensor<Real> pk, pv;
    if (prompts) {
      pk = tape.take(prompts->key, i);
      pv = tape.take(prompts->value, i);
    }
    AttentionTrace<Real> trace;
    auto a = attention_with_prompts(tape, h, layer, prompts ? &pk : nullptr,
                                    prompts ? &pv : nullptr, batch, cfg.heads,
                                    traces ? &trace : nullptr);
    if (traces) traces->push_back(std::move(trace));
    h = tape.layer_norm(tape.add(h, maybe_dropout(a)), layer.attn_norm_gain, layer.attn_norm_bias,
                        cfg.norm_eps);
    auto f = linear(tape, h, layer.w1, layer.b1);
    f = cfg.activation == Activation::gelu ? tape.gelu(f) : tape.relu(f);
    f = linear(tape, f, layer.w2, layer.b2);
    h = tape.layer_norm(tape.add(h, maybe_dropout(f)), layer.ffn_norm_gain, layer.ffn_norm_bias,
                        cfg.norm_eps);
  }
  return h;
}

}  // namespace

template <class Real>
Tensor<Real> attention_with_prompts(Tape<Real>& tape, const Tensor<Real>& h_prev,
                                    const LayerParams<Real>& layer,
                                    const Tensor<Real>* prompt_key,
                                    const Tensor<Real>* prompt_value, const TokenBatch& batch,
                                    std::size_t heads, AttentionTrace<Real>* trace) {
  const std::size_t b = batch.batch, s = batch.length;
  const std::size_t d = layer.wq.dim(0);
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: hidden not divisible by heads");
  const bool batched = h_prev.rank() == 3;
  if (h_prev.size() != b * s * d) {
    throw ShapeError("attention: input " + shape_str(h_prev.shape()) + " does not match batch " +
                     std::to_string(b) + "x" + std::to_string(s) + "x" + std::to_string(d));
  }
  if ((prompt_key == nullptr) != (prompt_value == nullptr)) {
    throw std::invalid_argument("attention: key and value prompts must be given together");
  }
  std::size_t pl = 0;
  if (prompt_key) {
    if (prompt_key->rank() != 2 || prompt_key->dim(1) != d ||
        prompt_value->shape() != prompt_key->shape()) {
      throw ShapeError("attention: prompts " + shape_str(prompt_key->shape()) + "/" +
                       shape_str(prompt_value->shape()) + " do not match hidden size " +
                       std::to_string(d));
    }
    pl = prompt_key->dim(0);
  }
  const std::size_t dh = d / heads;
  const std::size_t keys = pl + s;

  const auto x = batched ? tape.reshape(h_prev, {b * s, d}) : h_prev;
  auto q = split_heads(tape, linear(tape, x, layer.wq, layer.bq), b, s, heads, dh);
  auto k = split_heads(tape, linear(tape, x, layer.wk, layer.bk), b, s, heads, dh);
  auto v = split_heads(tape, linear(tape, x, layer.wv, layer.bv), b, s, heads, dh);
  if (prompt_key) {
    k = tape.concat(split_prompt(tape, *prompt_key, b, heads, dh), k, 1);
    v = tape.concat(split_prompt(tape, *prompt_value, b, heads, dh), v, 1);
  }

  auto scores = tape.scale(tape.bmm(q, k, true), static_cast<Real>(1.0 / std::sqrt(double(dh))));
  const bool any_pad = std::find(batch.mask.begin(), batch.mask.end(), 0) != batch.mask.end();
  if (any_pad) {
    // Padding keys get a large negative bias so exp() underflows to exactly 0.
    std::vector<Real> bias(b * heads * s * keys, Real(0));
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t hi = 0; hi < heads; ++hi)
        for (std::size_t qi = 0; qi < s; ++qi) {
          Real* row = bias.data() + ((bi * heads + hi) * s + qi) * keys;
          for (std::size_t kj = 0; kj < s; ++kj)
            if (!batch.mask[bi * s + kj]) row[pl + kj] = Real(-1e9);
        }
    scores = tape.add_const(scores, bias);
  }
  auto weights = tape.softmax_rows(scores);
  auto ctx = tape.bmm(weights, v);                   // [B*H, s, dh]
  ctx = tape.reshape(ctx, {b, heads, s, dh});
  ctx = tape.permute(ctx, {0, 2, 1, 3});
  ctx = tape.reshape(ctx, {b * s, d});
  if (trace) {
    trace->weights = weights;
    trace->context = ctx;
  }
  auto out = linear(tape, ctx, layer.wo, layer.bo);
  return batched ? tape.reshape(out, {b, s, d}) : out;
}

template <class Real>
Tensor<Real> encode(Tape<Real>& tape, const EncoderModel<Real>& model, const TokenBatch& batch,
                    const PromptSet<Real>* prompts, const ForwardOptions& options,
                    std::vector<AttentionTrace<Real>>* traces) {
  auto h = encode_flat(tape, model, batch, prompts, options, traces);
  return tape.reshape(h, {batch.batch, batch.length, model.config().hidden});
}

template <class Real>
Tensor<Real> classifier_logits(Tape<Real>& tape, const EncoderModel<Real>& model,
                               const TokenBatch& batch, const PromptSet<Real>* prompts,
                               const ForwardOptions& options) {
  auto h = encode_flat<Real>(tape, model, batch, prompts, options, nullptr);
  std::vector<std::int32_t> cls(batch.batch);
  for (std::size_t i = 0; i < batch.batch; ++i) cls[i] = static_cast<std::int32_t>(i * batch.length);
  const auto& p = model.params();
  auto logits = linear(tape, tape.gather_rows(h, cls), p.at("head.cls.weight"),
                       p.at("head.cls.bias"));
  return tape.reshape(logits, {batch.batch});
}

template <class Real>
std::vector<double> classify(const EncoderModel<Real>& model, const TokenBatch& batch,
                             const PromptSet<Real>* prompts) {
  Tape<Real> tape(false);
  auto logits = classifier_logits(tape, model, batch, prompts);
  std::vector<double> out(batch.batch);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(logits.data()[i]);
  return out;
}

template <class Real>
Tensor<Real> mlm_loss(Tape<Real>& tape, const EncoderModel<Real>& model, const TokenBatch& batch,
                      const ForwardOptions& options) {
  if (batch.masked_positions.empty()) {
    throw std::invalid_argument("mlm_loss: batch has no masked positions");
  }
  if (batch.masked_positions.size() != batch.masked_targets.size()) {
    throw std::invalid_argument("mlm_loss: masked positions and targets differ in length");
  }
  if (!model.has_mlm_head()) throw std::logic_error("mlm_loss: model has no masked-token head");
  auto h = encode_flat<Real>(tape, model, batch, nullptr, options, nullptr);
  const auto& p = model.params();
  auto logits = linear(tape, tape.gather_rows(h, batch.masked_positions),
                       p.at("head.mlm.weight"), p.at("head.mlm.bias"));
  return tape.cross_entropy_rows(logits, batch.masked_targets);
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct PromptSet<float>;
template struct PromptSet<double>;
template class EncoderModel<float>;
template class EncoderModel<double>;

#define PEFTLAB_INSTANTIATE(Real)                                                              \
  template Tensor<Real> attention_with_prompts<Real>(                                          \
      Tape<Real>&, const Tensor<Real>&, const LayerParams<Real>&, const Tensor<Real>*,         \
      const Tensor<Real>*, const TokenBatch&, std::size_t, AttentionTrace<Real>*);             \
  template Tensor<Real> encode<Real>(Tape<Real>&, const EncoderModel<Real>&,                   \
                                     const TokenBatch&, const PromptSet<Real>*,                \
                                     const ForwardOptions&, std::vector<AttentionTrace<Real>>*); \
  template Tensor<Real> classifier_logits<Real>(Tape<Real>&, const EncoderModel<Real>&,        \
                                                const TokenBatch&, const PromptSet<Real>*,     \
                                                const ForwardOptions&);                        \
  template std::vector<double> classify<Real>(const EncoderModel<Real>&, const TokenBatch&,    \
                                              const PromptSet<Real>*);                         \
  template Tensor<Real> mlm_loss<Real>(Tape<Real>&, const EncoderModel<Real>&,                 \
                                       const TokenBatch&, const ForwardOptions&);

PEFTLAB_INSTANTIATE(float)
PEFTLAB_INSTANTIATE(double)
#undef PEFTLAB_INSTANTIATE

}  // namespace peftlab
