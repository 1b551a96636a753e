#include "peftlab/teacher.hpp"

#include <algorithm>

#include "peftlab/adaptation.hpp"
#include "peftlab/checkpoint.hpp"

namespace peftlab {

EncoderTeacher::EncoderTeacher(EncoderModel<float> model, std::vector<std::string> organs,
                               Vocabulary vocab)
    : model_(std::move(model)), organs_(std::move(organs)), vocab_(std::move(vocab)) {
  if (organs_.empty()) throw std::invalid_argument("teacher: no organs");
  if (vocab_.size() > model_.config().vocab) {
    throw ShapeError("teacher: vocabulary larger than the model's embedding table");
  }
}

bool EncoderTeacher::knows(const std::string& organ) const {
  return std::find(organs_.begin(), organs_.end(), organ) != organs_.end();
}

LabeledData teacher_pairs(const Vocabulary& vocab, std::span<const Report> reports,
                          const std::vector<std::string>& organs, std::size_t max_len) {
  LabeledData d;
  d.sequences.reserve(reports.size() * organs.size());
  for (const auto& r : reports) {
    for (const auto& o : organs) {
      d.sequences.push_back(vocab.encode(teacher_input(r, o), max_len));
      auto it = r.labels.find(o);
      d.labels.push_back(it == r.labels.end() ? 0 : it->second);
    }
  }
  return d;
}

std::vector<std::vector<double>> EncoderTeacher::probabilities(
    std::span<const Report> reports, std::span<const std::string> organs) const {
  for (const auto& o : organs) {
    if (!knows(o)) throw std::invalid_argument("teacher: unknown organ '" + o + "'");
  }
  const std::vector<std::string> cols(organs.begin(), organs.end());
  const auto pairs = teacher_pairs(vocab_, reports, cols, model_.config().max_len);
  const auto probs = predict(model_, nullptr, pairs.sequences);
  std::vector<std::vector<double>> out(reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out[i].assign(probs.begin() + static_cast<std::ptrdiff_t>(i * cols.size()),
                  probs.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols.size()));
  }
  return out;
}

void EncoderTeacher::save(const std::filesystem::path& path) const {
  auto c = model_checkpoint(model_);
  c.metadata = "kind=teacher\norgans=";
  for (std::size_t i = 0; i < organs_.size(); ++i) c.metadata += (i ? "," : "") + organs_[i];
  c.metadata += "\n" + model_.config().to_text();
  save_checkpoint(path, c);
  vocab_.save(path.string() + ".vocab");
}

EncoderTeacher EncoderTeacher::load(const std::filesystem::path& path) {
  auto c = load_checkpoint(path);
  const auto meta = KeyValueConfig::parse(c.metadata);
  if (meta.get_string("kind", "") != "teacher") {
    throw CheckpointError(path.string() + " is not a teacher checkpoint");
  }
  const auto organs = meta.get_list("organs");
  c.metadata = "kind=encoder\n";
  for (const auto& [k, v] : meta.values())
    if (k != "kind" && k != "organs") c.metadata += k + "=" + v + "\n";
  return EncoderTeacher(model_from_checkpoint(c), organs, Vocabulary::load(path.string() + ".vocab"));
}

TeacherTraining train_teacher(const EncoderModel<float>& backbone, const Vocabulary& vocab,
                              std::span<const Report> train, std::span<const Report> val,
                              const std::vector<std::string>& organs, const TrainHyper& hyper) {
  if (train.empty() || val.empty()) throw std::invalid_argument("teacher: empty split");
  if (organs.empty()) throw std::invalid_argument("teacher: no organs");
  const auto max_len = backbone.config().max_len;
  // labels_for rejects reports without a human label for an organ.
  for (const auto& o : organs) {
    labels_for(train, o);
    labels_for(val, o);
  }
  const auto train_data = teacher_pairs(vocab, train, organs, max_len);
  const auto val_data = teacher_pairs(vocab, val, organs, max_len);
  auto res = finetune(backbone, train_data, val_data, hyper);
  return {EncoderTeacher(std::move(res.model), organs, vocab), res.outcome};
}

}  // namespace peftlab
