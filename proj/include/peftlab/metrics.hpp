#pragma once

#include <cstddef>
#include <span>
#include <string>

namespace peftlab {

// Binary confusion counts and derived scores. A ratio whose denominator is
// zero is reported as 0 and flagged.
struct MetricsReport {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0;
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;

  static MetricsReport from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
  std::size_t total() const { return tp + fp + fn + tn; }
  std::string to_json() const;
};

// Predicted positive iff probability >= threshold.
MetricsReport compute_metrics(std::span<const double> probabilities, std::span<const int> labels,
                              double threshold = 0.5);

}  // namespace peftlab
