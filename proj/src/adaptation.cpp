#include "peftlab/adaptation.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

namespace peftlab {

void ParameterPartition::validate(const std::map<std::string, Shape, std::less<>>& artifacts) const {
  for (const auto& n : trainable) {
    if (frozen.count(n)) throw std::invalid_argument("partition: '" + n + "' is both trainable and frozen");
    if (!artifacts.count(n)) throw std::invalid_argument("partition: unknown parameter '" + n + "'");
  }
  for (const auto& n : frozen) {
    if (!artifacts.count(n)) throw std::invalid_argument("partition: unknown parameter '" + n + "'");
  }
  for (const auto& [n, s] : artifacts) {
    if (!trainable.count(n) && !frozen.count(n)) {
      throw std::invalid_argument("partition: parameter '" + n + "' is not assigned");
    }
  }
}

std::map<std::string, Shape, std::less<>> classifier_shapes(const ModelConfig& config) {
  std::map<std::string, Shape, std::less<>> out;
  for (auto& spec : parameter_layout(config, false)) out.emplace(spec.name, spec.shape);
  return out;
}

std::map<std::string, Shape, std::less<>> prompt_model_shapes(const ModelConfig& config,
                                                              std::size_t pl) {
  auto out = classifier_shapes(config);
  out.emplace(std::string(kPromptKey), Shape{config.layers, pl, config.hidden});
  out.emplace(std::string(kPromptValue), Shape{config.layers, pl, config.hidden});
  return out;
}

ParameterPartition finetune_partition(const ModelConfig& config) {
  ParameterPartition p;
  for (auto& [n, s] : classifier_shapes(config)) p.trainable.insert(n);
  return p;
}

ParameterPartition prompt_tune_partition(const ModelConfig& config, std::size_t pl) {
  ParameterPartition p;
  for (auto& [n, s] : prompt_model_shapes(config, pl)) {
    if (is_classifier_param(n) || n == kPromptKey || n == kPromptValue) {
      p.trainable.insert(n);
    } else {
      p.frozen.insert(n);
    }
  }
  return p;
}

std::size_t count_trainable(const ParameterPartition& partition,
                            const std::map<std::string, Shape, std::less<>>& artifacts) {
  std::size_t n = 0;
  for (const auto& name : partition.trainable) {
    auto it = artifacts.find(name);
    if (it == artifacts.end()) throw std::invalid_argument("count: unknown parameter '" + name + "'");
    n += shape_size(it->second);
  }
  return n;
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::finetune: return "finetune";
    case Method::prompt_tune: return "prompt_tune";
    case Method::multitask: return "multitask";
  }
  return "finetune";
}

Method method_from_string(std::string_view text) {
  if (text == "finetune") return Method::finetune;
  if (text == "prompt_tune") return Method::prompt_tune;
  if (text == "multitask") return Method::multitask;
  throw ConfigError("unknown method '" + std::string(text) + "'");
}

std::string AdaptationResult::to_json() const {
  nlohmann::json j;
  j["method"] = std::string(to_string(method));
  j["trainable_count"] = trainable_count;
  j["selected_epoch"] = outcome.selected_epoch;
  j["selected_step"] = outcome.selected_step;
  j["best_val_f1"] = outcome.best_val_f1;
  j["steps"] = outcome.steps;
  j["degenerate_validation"] = degenerate_validation;
  if (prompts) j["prompt_length"] = prompts->length();
  auto curve = nlohmann::json::array();
  for (const auto& p : outcome.curve) {
    curve.push_back({{"epoch", p.epoch}, {"step", p.step}, {"train_loss", p.train_loss},
                     {"val_f1", p.val_f1}});
  }
  j["curve"] = curve;
  return j.dump(2);
}

bool all_one_class(const LabeledData& data) {
  return std::all_of(data.labels.begin(), data.labels.end(),
                     [&](int y) { return y == data.labels.front(); });
}

namespace {

void check_data(const LabeledData& train, const LabeledData& val) {
  if (train.size() == 0) throw std::invalid_argument("adaptation: empty training split");
  if (val.size() == 0) throw std::invalid_argument("adaptation: empty validation split");
  for (const auto* d : {&train, &val}) {
    if (d->sequences.size() != d->labels.size()) {
      throw std::invalid_argument("adaptation: sequences and labels differ in length");
    }
    for (int y : d->labels)
      if (y != 0 && y != 1) throw std::invalid_argument("adaptation: label outside {0,1}");
  }
}

std::vector<int> batch_labels(const LabeledData& data, std::span<const std::size_t> rows) {
  std::vector<int> y;
  y.reserve(rows.size());
  for (auto r : rows) y.push_back(data.labels[r]);
  return y;
}

}  // namespace

AdaptationResult finetune(const EncoderModel<float>& model, const LabeledData& train,
                          const LabeledData& val, const TrainHyper& hyper) {
  check_data(train, val);
  hyper.validate();
  AdaptationResult res{Method::finetune, model.clone(), std::nullopt, {}, 0, all_one_class(val)};
  if (hyper.epochs == 0) {
    res.trainable_count = count_trainable(finetune_partition(model.config()),
                                          classifier_shapes(model.config()));
    return res;
  }
  auto& m = res.model;
  m.drop_mlm_head();
  m.reset_classifier(derive_seed(hyper.seed, "classifier"));
  m.set_all_trainable(true);

  TrainingProblem problem;
  for (auto& it : m.params().items()) problem.params.push_back(it.tensor);
  problem.train_size = train.size();
  problem.batch_loss = [&](Tape<float>& tape, std::span<const std::size_t> rows, Rng& rng) {
    auto batch = make_batch(train, rows);
    auto logits = classifier_logits<float>(tape, m, batch, nullptr, {true, &rng});
    return tape.bce_with_logits(logits, batch_labels(train, rows));
  };
  problem.validate = [&] { return evaluate_data(m, nullptr, val).f1; };
  res.outcome = run_training(problem, hyper);
  m.set_all_trainable(false);
  res.trainable_count = count_trainable(finetune_partition(m.config()), classifier_shapes(m.config()));
  return res;
}

AdaptationResult prompt_tune(const EncoderModel<float>& model, const LabeledData& train,
                             const LabeledData& val, const TrainHyper& hyper, std::size_t pl) {
  if (pl == 0) throw ConfigError("pl must be >= 1 for prompt tuning");
  check_data(train, val);
  hyper.validate();
  const auto& cfg = model.config();
  AdaptationResult res{Method::prompt_tune, model.clone(), std::nullopt, {}, 0, all_one_class(val)};
  auto& m = res.model;
  m.drop_mlm_head();
  m.set_all_trainable(false);
  m.reset_classifier(derive_seed(hyper.seed, "classifier"));
  Rng prompt_rng(derive_seed(hyper.seed, "prompt"));
  res.prompts = PromptSet<float>::random(cfg.layers, pl, cfg.hidden, prompt_rng);
  auto& prompts = *res.prompts;

  TrainingProblem problem;
  problem.params = {prompts.key, prompts.value, m.params().at("head.cls.weight"),
                    m.params().at("head.cls.bias")};
  problem.train_size = train.size();
  problem.batch_loss = [&](Tape<float>& tape, std::span<const std::size_t> rows, Rng& rng) {
    auto batch = make_batch(train, rows);
    auto logits = classifier_logits(tape, m, batch, &prompts, {true, &rng});
    return tape.bce_with_logits(logits, batch_labels(train, rows));
  };
  problem.validate = [&] { return evaluate_data(m, &prompts, val).f1; };
  res.outcome = run_training(problem, hyper);
  for (auto& p : problem.params) p.set_trainable(false);
  res.trainable_count = count_trainable(prompt_tune_partition(cfg, pl), prompt_model_shapes(cfg, pl));
  return res;
}

}  // namespace peftlab
