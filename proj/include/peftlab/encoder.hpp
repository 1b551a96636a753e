#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/rng.hpp"
#include "peftlab/tape.hpp"

namespace peftlab {

// Special token ids shared by the vocabulary and the encoder.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kMaskId = 3;

enum class Activation { gelu, relu };

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t vocab = 512;
  std::size_t max_len = 64;
  Activation activation = Activation::gelu;
  double dropout = 0.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return hidden / heads; }
  void validate() const;

  // key=value lines, one per field, in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

template <class Real>
struct NamedTensor {
  std::string name;
  Tensor<Real> tensor;
};

// Ordered registry of named tensors. Registration order is the checkpoint
// order.
template <class Real>
class ParameterSet {
 public:
  Tensor<Real>& add(std::string name, Tensor<Real> tensor);
  bool contains(std::string_view name) const;
  Tensor<Real>& at(std::string_view name);
  const Tensor<Real>& at(std::string_view name) const;

  std::vector<NamedTensor<Real>>& items() { return items_; }
  const std::vector<NamedTensor<Real>>& items() const { return items_; }
  std::size_t element_count() const;

  ParameterSet clone() const;
  template <class Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& it : items_) out.add(it.name, it.tensor.template cast<Other>());
    return out;
  }

 private:
  std::vector<NamedTensor<Real>> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Per-layer key/value prompt tokens, each of shape [layers, length, hidden].
template <class Real>
struct PromptSet {
  Tensor<Real> key;
  Tensor<Real> value;

  std::size_t layers() const { return key.dim(0); }
  std::size_t length() const { return key.dim(1); }
  std::size_t hidden() const { return key.dim(2); }

  static PromptSet zeros(std::size_t layers, std::size_t length, std::size_t hidden);
  static PromptSet random(std::size_t layers, std::size_t length, std::size_t hidden, Rng& rng,
                          double stddev = 0.02);
  void validate(const ModelConfig& config) const;
  void set_trainable(bool on);
  PromptSet clone() const;
  std::size_t element_count() const { return key.size() + value.size(); }

  template <class Other>
  PromptSet<Other> cast() const {
    return {key.template cast<Other>(), value.template cast<Other>()};
  }
};

// Right-padded token ids. mask is 1 on real tokens and 0 on padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  // Masked-token pretraining targets, as flat positions into ids.
  std::vector<std::int32_t> masked_positions;
  std::vector<std::int32_t> masked_targets;

  static TokenBatch from_sequences(std::span<const std::vector<std::int32_t>> sequences);
  static TokenBatch from_sequences(std::span<const std::vector<std::int32_t>* const> sequences);
};

enum class ParameterInit { normal, zeros, ones };

struct ParameterSpec {
  std::string name;
  Shape shape;
  ParameterInit init;
};

// Names, shapes and initializers of every encoder parameter, in registration
// order. Lets callers count parameters without allocating them.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& config, bool with_mlm_head);

template <class Real>
struct LayerParams {
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> attn_norm_gain, attn_norm_bias;
  Tensor<Real> w1, b1, w2, b2;
  Tensor<Real> ffn_norm_gain, ffn_norm_bias;
};

// Transformer encoder with a [CLS] classification head and an optional
// masked-token head. Parameter names:
//   embed.token, embed.position, embed.norm.{gain,bias}
//   layer.<i>.attn.{wq,bq,wk,bk,wv,bv,wo,bo}, layer.<i>.attn_norm.{gain,bias}
//   layer.<i>.ffn.{w1,b1,w2,b2}, layer.<i>.ffn_norm.{gain,bias}
//   head.cls.{weight,bias}, head.mlm.{weight,bias}
template <class Real>
class EncoderModel {
 public:
  EncoderModel(const ModelConfig& config, std::uint64_t seed, bool with_mlm_head = true);
  EncoderModel(const ModelConfig& config, ParameterSet<Real> params);

  const ModelConfig& config() const { return config_; }
  ParameterSet<Real>& params() { return params_; }
  const ParameterSet<Real>& params() const { return params_; }
  LayerParams<Real> layer(std::size_t i) const;
  bool has_mlm_head() const { return params_.contains("head.mlm.weight"); }

  // Fresh classifier head drawn from normal(0, 0.02) with zero bias.
  void reset_classifier(std::uint64_t seed);
  void drop_mlm_head();
  void set_all_trainable(bool on);

  EncoderModel clone() const { return EncoderModel(config_, params_.clone()); }
  template <class Other>
  EncoderModel<Other> cast() const {
    return EncoderModel<Other>(config_, params_.template cast<Other>());
  }

 private:
  ModelConfig config_;
  ParameterSet<Real> params_;
};

bool is_classifier_param(std::string_view name);
bool is_mlm_param(std::string_view name);
// Everything that is neither a task head nor the pretraining head.
bool is_backbone_param(std::string_view name);

struct ForwardOptions {
  bool train = false;  // enables dropout when the config asks for it
  Rng* rng = nullptr;
};

template <class Real>
struct AttentionTrace {
  Tensor<Real> weights;  // [batch*heads, s, pl+s], post-softmax
  Tensor<Real> context;  // [batch*s, hidden], before the output projection
};

// Multi-head attention whose keys and values are [prompt; projected tokens].
// Queries come only from the tokens, so the output keeps the input's
// sequence length. Prompt positions are never masked. Passing null prompt
// tensors gives plain self-attention. h_prev is [B, s, d] or [B*s, d]; the
// output has the same shape.
template <class Real>
Tensor<Real> attention_with_prompts(Tape<Real>& tape, const Tensor<Real>& h_prev,
                                    const LayerParams<Real>& layer,
                                    const Tensor<Real>* prompt_key,
                                    const Tensor<Real>* prompt_value, const TokenBatch& batch,
                                    std::size_t heads, AttentionTrace<Real>* trace = nullptr);

// Returns h_L as [B, s, d].
template <class Real>
Tensor<Real> encode(Tape<Real>& tape, const EncoderModel<Real>& model, const TokenBatch& batch,
                    const PromptSet<Real>* prompts = nullptr, const ForwardOptions& options = {},
                    std::vector<AttentionTrace<Real>>* traces = nullptr);

// Classifier logits from the first ([CLS]) position, shape [B].
template <class Real>
Tensor<Real> classifier_logits(Tape<Real>& tape, const EncoderModel<Real>& model,
                               const TokenBatch& batch, const PromptSet<Real>* prompts = nullptr,
                               const ForwardOptions& options = {});

// Positive-class probabilities sigma(logit), one per sequence.
template <class Real>
std::vector<double> classify(const EncoderModel<Real>& model, const TokenBatch& batch,
                             const PromptSet<Real>* prompts = nullptr);

// Mean cross-entropy of the masked-token head at the masked positions.
template <class Real>
Tensor<Real> mlm_loss(Tape<Real>& tape, const EncoderModel<Real>& model, const TokenBatch& batch,
                      const ForwardOptions& options = {});

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template struct PromptSet<float>;
extern template struct PromptSet<double>;
extern template class EncoderModel<float>;
extern template class EncoderModel<double>;

}  // namespace peftlab
