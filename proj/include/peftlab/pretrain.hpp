#pragma once

#include <span>
#include <vector>

#include "peftlab/encoder.hpp"

namespace peftlab {

struct PretrainHyper {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

// Selects round(rate * n) of the n non-pad, non-[CLS] tokens of each
// sequence (at least one when n > 0), records them as targets and replaces
// them with [MASK].
void mask_tokens(TokenBatch& batch, double rate, Rng& rng);

// Masked-token training of every encoder parameter except the classifier
// head. Returns the loss of every step.
std::vector<double> pretrain_mlm(EncoderModel<float>& model,
                                 std::span<const std::vector<std::int32_t>> sequences,
                                 const PretrainHyper& hyper);

}  // namespace peftlab
