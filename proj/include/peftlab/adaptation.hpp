#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>

#include "peftlab/training.hpp"

namespace peftlab {

// Names of artifact tensors that are not encoder parameters.
inline constexpr std::string_view kPromptKey = "prompt.key";
inline constexpr std::string_view kPromptValue = "prompt.value";

struct ParameterPartition {
  std::set<std::string, std::less<>> trainable;
  std::set<std::string, std::less<>> frozen;

  // Throws if the sets overlap or do not cover exactly the given names.
  void validate(const std::map<std::string, Shape, std::less<>>& artifacts) const;
};

// Shapes of the classifier model (encoder without the masked-token head).
std::map<std::string, Shape, std::less<>> classifier_shapes(const ModelConfig& config);
// Classifier shapes plus prompt.key / prompt.value of length pl.
std::map<std::string, Shape, std::less<>> prompt_model_shapes(const ModelConfig& config,
                                                              std::size_t pl);

ParameterPartition finetune_partition(const ModelConfig& config);
ParameterPartition prompt_tune_partition(const ModelConfig& config, std::size_t pl);

// Exact element count of the trainable tensors. Throws for a trainable name
// that has no shape.
std::size_t count_trainable(const ParameterPartition& partition,
                            const std::map<std::string, Shape, std::less<>>& artifacts);

enum class Method { finetune, prompt_tune, multitask };
std::string_view to_string(Method method);
Method method_from_string(std::string_view text);

struct AdaptationResult {
  Method method = Method::finetune;
  EncoderModel<float> model;
  std::optional<PromptSet<float>> prompts;
  TrainOutcome outcome;
  std::size_t trainable_count = 0;
  // Every validation label is the same class, so F1 cannot rank checkpoints.
  bool degenerate_validation = false;

  // Curve, counts and selected epoch.
  std::string to_json() const;
};

// All classifier parameters are trained; the masked-token head is dropped
// and a fresh classifier head is drawn. Zero epochs returns an exact copy of
// the input model.
AdaptationResult finetune(const EncoderModel<float>& model, const LabeledData& train,
                          const LabeledData& val, const TrainHyper& hyper);

// Backbone frozen; a fresh prompt set of length pl and a fresh classifier
// head are trained.
AdaptationResult prompt_tune(const EncoderModel<float>& model, const LabeledData& train,
                             const LabeledData& val, const TrainHyper& hyper, std::size_t pl);

bool all_one_class(const LabeledData& data);

}  // namespace peftlab
