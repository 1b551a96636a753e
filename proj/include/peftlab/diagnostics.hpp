#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/encoder.hpp"
#include "peftlab/gradcheck.hpp"

namespace peftlab {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

// Finite-difference checks of every tape primitive in double precision. Each
// output is reduced to a scalar by a fixed random projection.
std::vector<GradCheckCase> check_primitive_gradients(std::uint64_t seed = 0);

struct GradCheckSetup {
  ModelConfig model;
  std::size_t pl = 3;
  std::size_t sources = 3;  // mixture check only
  std::size_t batch = 3;
  std::size_t length = 6;
  std::size_t coords_per_param = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
};

// Classifier loss through the whole encoder with prompts, over every model
// parameter and both prompt tensors.
GradCheckReport check_classifier_gradients(const GradCheckSetup& setup);

// Classifier loss through the mixture weights, the composed target prompt
// and the encoder, over the mixture module, the source prompts and the head.
GradCheckReport check_mixture_gradients(const GradCheckSetup& setup);

}  // namespace peftlab
