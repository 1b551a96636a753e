#include "peftlab/pretrain.hpp"

#include <cmath>
#include <numeric>

#include "peftlab/optim.hpp"

namespace peftlab {

void PretrainHyper::validate() const {
  if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
  if (!(lr > 0)) throw ConfigError("pretrain: lr must be positive");
  if (!(mask_rate > 0 && mask_rate < 1)) throw ConfigError("pretrain: mask_rate must lie in (0, 1)");
}

void mask_tokens(TokenBatch& batch, double rate, Rng& rng) {
  batch.masked_positions.clear();
  batch.masked_targets.clear();
  std::vector<std::int32_t> candidates;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    candidates.clear();
    for (std::size_t j = 0; j < batch.length; ++j) {
      const auto pos = b * batch.length + j;
      if (batch.mask[pos] && batch.ids[pos] != kClsId) candidates.push_back(static_cast<std::int32_t>(pos));
    }
    if (candidates.empty()) continue;
    auto k = static_cast<std::size_t>(std::llround(rate * double(candidates.size())));
    k = std::clamp<std::size_t>(k, 1, candidates.size());
    // Partial Fisher-Yates: the first k entries become a uniform sample.
    for (std::size_t i = 0; i < k; ++i) {
      const auto j = i + uniform_index(rng, candidates.size() - i);
      std::swap(candidates[i], candidates[j]);
    }
    std::sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t i = 0; i < k; ++i) {
      const auto pos = static_cast<std::size_t>(candidates[i]);
      batch.masked_positions.push_back(candidates[i]);
      batch.masked_targets.push_back(batch.ids[pos]);
      batch.ids[pos] = kMaskId;
    }
  }
}

std::vector<double> pretrain_mlm(EncoderModel<float>& model,
                                 std::span<const std::vector<std::int32_t>> sequences,
                                 const PretrainHyper& hyper) {
  hyper.validate();
  if (sequences.empty()) throw std::invalid_argument("pretrain: no sequences");
  if (!model.has_mlm_head()) throw std::logic_error("pretrain: model has no masked-token head");
  std::vector<Tensor<float>> params;
  for (auto& it : model.params().items()) {
    const bool on = !is_classifier_param(it.name);
    it.tensor.set_trainable(on);
    if (on) params.push_back(it.tensor);
  }
  Adam<float> opt(params, {hyper.lr});
  Rng rng(derive_seed(hyper.seed, "pretrain"));
  std::vector<std::size_t> order(sequences.size());
  std::size_t cursor = order.size();
  std::vector<double> losses;
  losses.reserve(hyper.steps);
  std::vector<const std::vector<std::int32_t>*> rows;
  for (std::size_t step = 0; step < hyper.steps; ++step) {
    rows.clear();
    while (rows.size() < std::min(hyper.batch_size, sequences.size())) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_in_place(std::span<std::size_t>(order), rng);
        cursor = 0;
      }
      rows.push_back(&sequences[order[cursor++]]);
    }
    auto batch = TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>* const>(rows));
    mask_tokens(batch, hyper.mask_rate, rng);
    if (batch.masked_positions.empty()) continue;
    Tape<float> tape;
    auto loss = mlm_loss(tape, model, batch, {true, &rng});
    losses.push_back(loss.item());
    tape.backward(loss);
    opt.step();
  }
  model.set_all_trainable(false);
  return losses;
}

}  // namespace peftlab
