#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "peftlab/adaptation.hpp"

namespace peftlab {

// Frozen source-task prompts sharing one shape.
template <class Real>
struct SourcePromptBank {
  std::vector<std::string> names;
  std::vector<PromptSet<Real>> prompts;

  std::size_t size() const { return prompts.size(); }
  std::size_t layers() const { return prompts.front().layers(); }
  std::size_t length() const { return prompts.front().length(); }
  std::size_t hidden() const { return prompts.front().hidden(); }

  void add(std::string name, PromptSet<Real> prompt);
  void validate() const;
  SourcePromptBank permuted(std::span<const std::size_t> order) const;
  template <class Other>
  SourcePromptBank<Other> cast() const {
    SourcePromptBank<Other> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names[i], prompts[i].template cast<Other>());
    return out;
  }
};

// Trainable attention block: keys k_i = LayerNorm(pool(P_i) W_K), query q.
template <class Real>
struct MixtureModule {
  Tensor<Real> wk;         // [d, d]
  Tensor<Real> q;          // [d]
  Tensor<Real> norm_gain;  // [d]
  Tensor<Real> norm_bias;  // [d]
  double norm_eps = 1e-5;

  // W_K ~ normal(0, 1/sqrt(d)), q ~ normal(0, 0.02), unit gain, zero bias.
  static MixtureModule init(std::size_t hidden, std::uint64_t seed);
  std::vector<Tensor<Real>> params() const { return {wk, q, norm_gain, norm_bias}; }
  void set_trainable(bool on);
  MixtureModule clone() const;
  template <class Other>
  MixtureModule<Other> cast() const {
    return {wk.template cast<Other>(), q.template cast<Other>(), norm_gain.template cast<Other>(),
            norm_bias.template cast<Other>(), norm_eps};
  }
};

// Denominators below this fall back to uniform weights.
inline constexpr double kMixtureGuard = 1e-12;

// Per-channel maximum over layers, the key/value pair and token positions.
template <class Real>
Tensor<Real> pool_prompt(Tape<Real>& tape, const PromptSet<Real>& prompt);

// s_i^2 / sum_j s_j^2 for scaled dots s_i = q.k_i / (e d); uniform when the
// sum is below the guard.
std::vector<double> weights_from_scaled_dots(std::span<const double> scaled_dots);

// Weights as a length-n tensor on the tape.
template <class Real>
Tensor<Real> mixture_weights(Tape<Real>& tape, const MixtureModule<Real>& module,
                             const SourcePromptBank<Real>& bank);

// The scaled dots q.k_i / (e d), for inspection.
template <class Real>
std::vector<double> mixture_scaled_dots(const MixtureModule<Real>& module,
                                        const SourcePromptBank<Real>& bank);

// P_target = sum_j w_j P_j, the same weight on every layer's keys and values.
template <class Real>
PromptSet<Real> compose_target(Tape<Real>& tape, const Tensor<Real>& weights,
                               const SourcePromptBank<Real>& bank);

// Weights and composed prompt evaluated without recording.
template <class Real>
PromptSet<Real> compute_target(const MixtureModule<Real>& module, const SourcePromptBank<Real>& bank);
template <class Real>
std::vector<double> compute_weights(const MixtureModule<Real>& module,
                                    const SourcePromptBank<Real>& bank);

// Classifier probabilities through the live mixture path.
std::vector<double> classify_with_mixture(const EncoderModel<float>& model,
                                          const MixtureModule<float>& module,
                                          const SourcePromptBank<float>& bank,
                                          const TokenBatch& batch);

std::map<std::string, Shape, std::less<>> multitask_shapes(const ModelConfig& config,
                                                           const SourcePromptBank<float>& bank);
ParameterPartition multitask_partition(const ModelConfig& config,
                                       const SourcePromptBank<float>& bank);

struct MultitaskResult {
  MixtureModule<float> module;
  std::vector<double> weights;   // final mixture weights
  AdaptationResult adaptation;   // model with trained head, prompts = exported target
};

// Trains W_K, q, the key layer-norm affine and a fresh classifier head; the
// backbone and the bank stay frozen.
MultitaskResult train_multitask_target(const EncoderModel<float>& model,
                                       const SourcePromptBank<float>& bank,
                                       const LabeledData& train, const LabeledData& val,
                                       const TrainHyper& hyper);

// Writes the composed prompt in the prompt checkpoint format.
void export_target_prompt(const std::filesystem::path& path, const MixtureModule<float>& module,
                          const SourcePromptBank<float>& bank);

// Bank file: metadata kind=bank with the task list; entries
// bank.<task>.key / bank.<task>.value, each [layers, length, hidden].
void save_bank(const std::filesystem::path& path, const SourcePromptBank<float>& bank);
SourcePromptBank<float> load_bank(const std::filesystem::path& path);
std::string bank_digest(const SourcePromptBank<float>& bank);

void save_mixture(const std::filesystem::path& path, const MixtureModule<float>& module);
MixtureModule<float> load_mixture(const std::filesystem::path& path);

extern template struct SourcePromptBank<float>;
extern template struct SourcePromptBank<double>;
extern template struct MixtureModule<float>;
extern template struct MixtureModule<double>;

}  // namespace peftlab
