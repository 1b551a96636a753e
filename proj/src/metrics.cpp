#include "peftlab/metrics.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

namespace peftlab {

MetricsReport MetricsReport::from_counts(std::size_t tp, std::size_t fp, std::size_t fn,
                                         std::size_t tn) {
  MetricsReport m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  if (tp + fp == 0) {
    m.precision_undefined = true;
  } else {
    m.precision = double(tp) / double(tp + fp);
  }
  if (tp + fn == 0) {
    m.recall_undefined = true;
  } else {
    m.recall = double(tp) / double(tp + fn);
  }
  if (m.precision + m.recall == 0.0) {
    m.f1_undefined = true;
  } else {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["tp"] = tp;
  j["fp"] = fp;
  j["fn"] = fn;
  j["tn"] = tn;
  j["precision"] = precision;
  j["recall"] = recall;
  j["f1"] = f1;
  j["precision_undefined"] = precision_undefined;
  j["recall_undefined"] = recall_undefined;
  j["f1_undefined"] = f1_undefined;
  return j.dump();
}

MetricsReport compute_metrics(std::span<const double> probabilities, std::span<const int> labels,
                              double threshold) {
  if (probabilities.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(probabilities.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw std::invalid_argument("metrics: empty split");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("metrics: label outside {0,1}");
    const bool pred = probabilities[i] >= threshold;
    if (pred && labels[i]) ++tp;
    else if (pred) ++fp;
    else if (labels[i]) ++fn;
    else ++tn;
  }
  return MetricsReport::from_counts(tp, fp, fn, tn);
}

}  // namespace peftlab
