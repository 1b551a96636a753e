#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "peftlab/corpus.hpp"
#include "peftlab/training.hpp"

namespace peftlab {

// Fine-tuned encoder shared across organs. For each (report, organ) pair it
// reads the organ's findings entry and the impression and scores the pair
// with the classifier head.
class EncoderTeacher : public Teacher {
 public:
  EncoderTeacher(EncoderModel<float> model, std::vector<std::string> organs, Vocabulary vocab);

  bool knows(const std::string& organ) const override;
  std::vector<std::vector<double>> probabilities(std::span<const Report> reports,
                                                 std::span<const std::string> organs) const override;

  const std::vector<std::string>& organs() const { return organs_; }
  const EncoderModel<float>& model() const { return model_; }

  // The vocabulary is stored next to the checkpoint as <path>.vocab.
  void save(const std::filesystem::path& path) const;
  static EncoderTeacher load(const std::filesystem::path& path);

 private:
  EncoderModel<float> model_;
  std::vector<std::string> organs_;
  Vocabulary vocab_;
};

// One row per (report, organ) pair, organs varying fastest.
LabeledData teacher_pairs(const Vocabulary& vocab, std::span<const Report> reports,
                          const std::vector<std::string>& organs, std::size_t max_len);

struct TeacherTraining {
  EncoderTeacher teacher;
  TrainOutcome outcome;  // validation score is F1 over all pairs
};

// Fine-tunes the whole backbone on human-labeled (report, organ) pairs.
TeacherTraining train_teacher(const EncoderModel<float>& backbone, const Vocabulary& vocab,
                              std::span<const Report> train, std::span<const Report> val,
                              const std::vector<std::string>& organs, const TrainHyper& hyper);

}  // namespace peftlab
