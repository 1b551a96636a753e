#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "peftlab/corpus.hpp"
#include "peftlab/encoder.hpp"
#include "peftlab/metrics.hpp"
#include "peftlab/optim.hpp"

namespace peftlab {

struct TrainHyper {
  double epochs = 1000;       // may be fractional
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double eval_every = 1.0;    // validation cadence, in epochs
  std::uint64_t seed = 0;

  void validate() const;
};

// Tokenized sequences with one binary label each.
struct LabeledData {
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  static LabeledData from_reports(const Vocabulary& vocab, std::span<const Report> reports,
                                  const std::string& organ, std::size_t max_len);
};

TokenBatch make_batch(const LabeledData& data, std::span<const std::size_t> rows);

struct EvalPoint {
  double epoch = 0;
  std::size_t step = 0;
  double train_loss = 0;  // mean loss over the steps since the previous point
  double val_f1 = 0;
};

struct TrainOutcome {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  std::vector<EvalPoint> curve;
  std::size_t best_index = npos;  // into curve; npos when no step ran
  double best_val_f1 = 0;
  double selected_epoch = 0;
  std::size_t selected_step = 0;
  std::size_t steps = 0;
};

// One optimisation problem: the trainable tensors, a minibatch loss over
// training rows, and a validation score. The loop snapshots the trainable
// tensors whenever validation strictly improves (so ties keep the earliest)
// and restores the best snapshot at the end.
struct TrainingProblem {
  std::vector<Tensor<float>> params;
  std::size_t train_size = 0;
  std::function<Tensor<float>(Tape<float>&, std::span<const std::size_t>, Rng&)> batch_loss;
  std::function<double()> validate;
};

TrainOutcome run_training(TrainingProblem& problem, const TrainHyper& hyper);

// Probabilities for every sequence, computed in inference batches.
std::vector<double> predict(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                            std::span<const std::vector<std::int32_t>> sequences,
                            std::size_t batch_size = 256);

MetricsReport evaluate_data(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                            const LabeledData& data);

}  // namespace peftlab
