#include "peftlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace peftlab {

void TrainHyper::validate() const {
  if (!(epochs >= 0)) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(eval_every > 0)) throw ConfigError("eval_every must be positive");
}

LabeledData LabeledData::from_reports(const Vocabulary& vocab, std::span<const Report> reports,
                                      const std::string& organ, std::size_t max_len) {
  LabeledData d;
  d.labels = labels_for(reports, organ);
  d.sequences = encode_texts(vocab, reports, max_len);
  return d;
}

TokenBatch make_batch(const LabeledData& data, std::span<const std::size_t> rows) {
  std::vector<const std::vector<std::int32_t>*> seqs;
  seqs.reserve(rows.size());
  for (auto r : rows) seqs.push_back(&data.sequences.at(r));
  return TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>* const>(seqs));
}

TrainOutcome run_training(TrainingProblem& problem, const TrainHyper& hyper) {
  hyper.validate();
  TrainOutcome out;
  if (hyper.epochs == 0) return out;
  if (problem.train_size == 0) throw std::invalid_argument("training: empty training set");

  const std::size_t per_epoch = (problem.train_size + hyper.batch_size - 1) / hyper.batch_size;
  const auto total =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(hyper.epochs * double(per_epoch))));
  const auto interval = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(hyper.eval_every * double(per_epoch))));

  for (auto& p : problem.params) p.set_trainable(true);
  Adam<float> opt(problem.params, {hyper.lr});
  Rng order_rng(derive_seed(hyper.seed, "order"));
  Rng dropout_rng(derive_seed(hyper.seed, "dropout"));
  std::vector<std::size_t> order(problem.train_size);
  std::vector<std::vector<float>> best;

  double loss_sum = 0;
  std::size_t loss_count = 0;
  for (std::size_t step = 1; step <= total; ++step) {
    const std::size_t in_epoch = (step - 1) % per_epoch;
    if (in_epoch == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      shuffle_in_place(std::span<std::size_t>(order), order_rng);
    }
    const std::size_t lo = in_epoch * hyper.batch_size;
    const std::size_t hi = std::min(lo + hyper.batch_size, problem.train_size);
    {
      Tape<float> tape;
      auto loss = problem.batch_loss(tape, std::span<const std::size_t>(order).subspan(lo, hi - lo),
                                     dropout_rng);
      loss_sum += loss.item();
      ++loss_count;
      tape.backward(loss);
    }
    opt.step();

    if (step % interval == 0 || step == total) {
      EvalPoint pt;
      pt.step = step;
      pt.epoch = double(step) / double(per_epoch);
      pt.train_loss = loss_sum / double(loss_count);
      pt.val_f1 = problem.validate();
      loss_sum = 0;
      loss_count = 0;
      out.curve.push_back(pt);
      if (out.best_index == TrainOutcome::npos || pt.val_f1 > out.best_val_f1) {
        out.best_index = out.curve.size() - 1;
        out.best_val_f1 = pt.val_f1;
        out.selected_epoch = pt.epoch;
        out.selected_step = pt.step;
        best.clear();
        for (const auto& p : problem.params) best.emplace_back(p.data().begin(), p.data().end());
      }
    }
  }
  out.steps = total;
  for (std::size_t i = 0; i < problem.params.size(); ++i) {
    std::copy(best[i].begin(), best[i].end(), problem.params[i].data().begin());
  }
  return out;
}

std::vector<double> predict(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                            std::span<const std::vector<std::int32_t>> sequences,
                            std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(sequences.size());
  for (std::size_t lo = 0; lo < sequences.size(); lo += batch_size) {
    const auto n = std::min(batch_size, sequences.size() - lo);
    auto batch = TokenBatch::from_sequences(sequences.subspan(lo, n));
    auto probs = classify(model, batch, prompts);
    out.insert(out.end(), probs.begin(), probs.end());
  }
  return out;
}

MetricsReport evaluate_data(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                            const LabeledData& data) {
  const auto probs = predict(model, prompts, data.sequences);
  return compute_metrics(probs, data.labels);
}

}  // namespace peftlab
