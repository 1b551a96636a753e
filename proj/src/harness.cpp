#include "peftlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "peftlab/checkpoint.hpp"
#include "peftlab/pretrain.hpp"

namespace peftlab {

using Json = nlohmann::json;

std::string_view to_string(DataTier tier) {
  return tier == DataTier::manual ? "manual" : "automatic";
}

DataTier tier_from_string(std::string_view text) {
  if (text == "manual") return DataTier::manual;
  if (text == "automatic") return DataTier::automatic;
  throw ConfigError("unknown data tier '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  hyper.validate();
  if (!(hyper.epochs >= 1)) throw ConfigError("epochs must be >= 1");
  if ((method == Method::prompt_tune || method == Method::multitask) && pl < 1) {
    throw ConfigError("pl must be >= 1 for " + std::string(to_string(method)));
  }
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg, std::string_view prefix,
                                     const TrainConfig& defaults) {
  const std::string p(prefix);
  TrainConfig c = defaults;
  if (cfg.has(p + "method")) c.method = method_from_string(cfg.get_string(p + "method", ""));
  if (cfg.has(p + "tier")) c.tier = tier_from_string(cfg.get_string(p + "tier", ""));
  c.hyper.epochs = cfg.get_double(p + "epochs", c.hyper.epochs);
  const auto batch = cfg.get_int(p + "batch_size", static_cast<std::int64_t>(c.hyper.batch_size));
  if (batch < 1) throw ConfigError(p + "batch_size must be >= 1");
  c.hyper.batch_size = static_cast<std::size_t>(batch);
  c.hyper.lr = cfg.get_double(p + "lr", c.hyper.lr);
  c.hyper.eval_every = cfg.get_double(p + "eval_every", c.hyper.eval_every);
  c.hyper.seed = cfg.get_uint(p + "seed", c.hyper.seed);
  const auto pl = cfg.get_int(p + "pl", static_cast<std::int64_t>(c.pl));
  if (pl < 0) throw ConfigError(p + "pl must be >= 0");
  c.pl = static_cast<std::size_t>(pl);
  c.upsample = cfg.get_bool(p + "upsample", c.upsample);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(p + e.what());
  }
  return c;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg, std::string_view prefix) {
  return from_config(cfg, prefix, TrainConfig{});
}

std::string TrainConfig::to_text(std::string_view prefix) const {
  const std::string p(prefix);
  std::ostringstream os;
  os.precision(17);
  os << p << "method=" << to_string(method) << "\n"
     << p << "tier=" << to_string(tier) << "\n"
     << p << "epochs=" << hyper.epochs << "\n"
     << p << "batch_size=" << hyper.batch_size << "\n"
     << p << "lr=" << hyper.lr << "\n"
     << p << "eval_every=" << hyper.eval_every << "\n"
     << p << "seed=" << hyper.seed << "\n"
     << p << "pl=" << pl << "\n"
     << p << "upsample=" << (upsample ? "true" : "false") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation and dispatch

MetricsReport evaluate(const EncoderModel<float>& model, const PromptSet<float>* prompts,
                       const Vocabulary& vocab, std::span<const Report> reports,
                       const std::string& organ) {
  if (reports.empty()) throw std::invalid_argument("evaluate: empty split");
  return evaluate_data(model, prompts,
                       LabeledData::from_reports(vocab, reports, organ, model.config().max_len));
}

TaskData prepare_task(const TrainConfig& config, const Vocabulary& vocab,
                      std::span<const Report> train, std::span<const Report> val,
                      const std::string& organ, std::size_t max_len) {
  TaskData t;
  if (config.upsample) {
    const auto up = upsample_positive(train, organ, derive_seed(config.hyper.seed, "upsample"));
    t.train = LabeledData::from_reports(vocab, up, organ, max_len);
  } else {
    t.train = LabeledData::from_reports(vocab, train, organ, max_len);
  }
  t.val = LabeledData::from_reports(vocab, val, organ, max_len);
  return t;
}

AdaptationResult train_with_checkpointing(const TrainConfig& config,
                                          const EncoderModel<float>& model,
                                          const LabeledData& train, const LabeledData& val,
                                          const SourcePromptBank<float>* bank,
                                          std::optional<MultitaskResult>* mixture) {
  config.validate();
  switch (config.method) {
    case Method::finetune:
      return finetune(model, train, val, config.hyper);
    case Method::prompt_tune:
      return prompt_tune(model, train, val, config.hyper, config.pl);
    case Method::multitask: {
      if (bank == nullptr) throw ConfigError("multitask requires a source prompt bank");
      auto res = train_multitask_target(model, *bank, train, val, config.hyper);
      auto adaptation = std::move(res.adaptation);
      if (mixture) {
        res.adaptation = AdaptationResult{adaptation.method, adaptation.model.clone(),
                                          adaptation.prompts, adaptation.outcome,
                                          adaptation.trainable_count,
                                          adaptation.degenerate_validation};
        mixture->emplace(std::move(res));
      }
      return adaptation;
    }
  }
  throw ConfigError("unknown method");
}

// ---------------------------------------------------------------------------
// ExperimentConfig

namespace {

TrainConfig row_defaults(Method method, DataTier tier, double epochs, double lr, double eval_every) {
  TrainConfig c;
  c.method = method;
  c.tier = tier;
  c.hyper.epochs = epochs;
  c.hyper.lr = lr;
  c.hyper.eval_every = eval_every;
  c.hyper.batch_size = 32;
  return c;
}

const std::vector<std::string>& corpus_keys() {
  static const std::vector<std::string> keys = {
      "id_prefix",  "organs",        "patients",      "reports_min",         "reports_max",
      "default_rate", "persistence", "negation_rate", "hedge_rate",          "noninformative_rate",
      "findings_ambiguity", "lexicon_seed", "label_source"};
  return keys;
}

const std::vector<std::string>& train_keys() {
  static const std::vector<std::string> keys = {"method", "tier",  "epochs", "batch_size", "lr",
                                                "eval_every", "seed", "pl", "upsample"};
  return keys;
}

const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys = {"layers", "hidden",     "heads",   "ffn",     "vocab",
                                                "max_len", "activation", "dropout", "norm_eps"};
  return keys;
}

constexpr std::string_view kCorpusPrefixes[] = {"manual.", "automatic.", "teacher_pool."};
constexpr std::string_view kRowPrefixes[] = {"source.",        "finetune_manual.", "prompt_manual.",
                                             "finetune_auto.", "prompt_auto.",     "multitask."};

std::string hyper_text(std::string_view prefix, const TrainHyper& h) {
  const std::string p(prefix);
  std::ostringstream os;
  os.precision(17);
  os << p << "epochs=" << h.epochs << "\n"
     << p << "batch_size=" << h.batch_size << "\n"
     << p << "lr=" << h.lr << "\n"
     << p << "eval_every=" << h.eval_every << "\n";
  return os.str();
}

std::string prefixed(std::string_view prefix, const std::string& text) {
  std::string out;
  for (const auto& line : split(text, '\n')) {
    if (!trim(line).empty()) out += std::string(prefix) + line + "\n";
  }
  return out;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  manual.id_prefix = "m";
  manual.patients = 300;
  manual.positive_rate = default_positive_rates();
  manual.label_source = LabelSource::human;
  automatic = manual;
  automatic.id_prefix = "a";
  automatic.patients = 16667;
  automatic.label_source = LabelSource::none;
  teacher_pool = manual;
  teacher_pool.id_prefix = "t";
  teacher_pool.patients = 700;

  model.layers = 2;
  model.hidden = 32;
  model.heads = 2;
  model.ffn = 64;
  model.vocab = 256;
  model.max_len = 128;
  model.dropout = 0.0;

  pretrain.steps = 2000;
  pretrain.batch_size = 32;
  pretrain.lr = 1e-3;

  teacher.epochs = 3;
  teacher.batch_size = 32;
  teacher.lr = 1e-3;
  teacher.eval_every = 0.5;

  source = row_defaults(Method::prompt_tune, DataTier::automatic, 1, 1e-2, 0.1);
  finetune_manual = row_defaults(Method::finetune, DataTier::manual, 30, 5e-4, 1);
  prompt_manual = row_defaults(Method::prompt_tune, DataTier::manual, 30, 1e-2, 1);
  finetune_auto = row_defaults(Method::finetune, DataTier::automatic, 1, 5e-4, 0.1);
  prompt_auto = row_defaults(Method::prompt_tune, DataTier::automatic, 1, 1e-2, 0.1);
  multitask = row_defaults(Method::multitask, DataTier::automatic, 1, 1e-2, 0.1);
  for (auto* r : {&source, &finetune_manual, &prompt_manual, &finetune_auto, &prompt_auto, &multitask}) {
    r->pl = pl;
    r->upsample = upsample;
  }
}

void ExperimentConfig::validate() const {
  if (k < 2) throw ConfigError("k must be >= 2 for the paired test");
  if (pl < 1) throw ConfigError("pl must be >= 1");
  if (vocab_size < 5) throw ConfigError("vocab_size must be >= 5");
  if (vocab_size > model.vocab) throw ConfigError("vocab_size exceeds model.vocab");
  model.validate();
  pretrain.validate();
  teacher.validate();
  for (const auto* c : {&manual, &automatic, &teacher_pool}) c->validate();
  for (const auto* c : {&manual, &teacher_pool}) {
    if (c->label_source != LabelSource::human) {
      throw ConfigError("manual and teacher_pool corpora must be human-labeled");
    }
  }
  for (const auto* c : {&automatic, &teacher_pool}) {
    if (std::find(c->organs.begin(), c->organs.end(), target) == c->organs.end()) {
      throw ConfigError("target '" + target + "' missing from a corpus organ list");
    }
  }
  if (std::find(manual.organs.begin(), manual.organs.end(), target) == manual.organs.end()) {
    throw ConfigError("target '" + target + "' missing from manual.organs");
  }
  for (const auto& o : automatic.organs) {
    if (std::find(teacher_pool.organs.begin(), teacher_pool.organs.end(), o) ==
            teacher_pool.organs.end() ||
        std::find(manual.organs.begin(), manual.organs.end(), o) == manual.organs.end()) {
      throw ConfigError("automatic organ '" + o + "' needs teacher_pool and manual labels");
    }
  }
  if (!(teacher_val_fraction > 0 && teacher_val_fraction < 1)) {
    throw ConfigError("teacher_val_fraction must be in (0, 1)");
  }
  const std::pair<const TrainConfig*, std::pair<Method, DataTier>> rows[] = {
      {&source, {Method::prompt_tune, DataTier::automatic}},
      {&finetune_manual, {Method::finetune, DataTier::manual}},
      {&prompt_manual, {Method::prompt_tune, DataTier::manual}},
      {&finetune_auto, {Method::finetune, DataTier::automatic}},
      {&prompt_auto, {Method::prompt_tune, DataTier::automatic}},
      {&multitask, {Method::multitask, DataTier::automatic}}};
  for (const auto& [row, expected] : rows) {
    row->validate();
    if (row->method != expected.first || row->tier != expected.second) {
      throw ConfigError("row method/tier may not be changed in the experiment matrix");
    }
  }
  if (source.pl != multitask.pl) throw ConfigError("source.pl and multitask.pl must match");
}

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& cfg) {
  std::set<std::string, std::less<>> allowed = {"target", "seed",   "corpus_seed", "k",
                                                "pl",     "vocab_size", "upsample",  "split.train",
                                                "split.val", "split.test", "teacher_val_fraction",
                                                "pretrain.steps", "pretrain.batch_size",
                                                "pretrain.lr", "pretrain.mask_rate",
                                                "teacher.epochs", "teacher.batch_size", "teacher.lr",
                                                "teacher.eval_every"};
  for (auto p : kCorpusPrefixes) {
    for (const auto& k : corpus_keys()) allowed.insert(std::string(p) + k);
  }
  for (auto p : kRowPrefixes) {
    for (const auto& k : train_keys()) {
      if (k != "seed") allowed.insert(std::string(p) + k);
    }
  }
  for (const auto& k : model_keys()) allowed.insert("model." + k);
  for (const auto& [key, value] : cfg.values()) {
    bool rate = false;
    for (auto p : kCorpusPrefixes) {
      if (key.rfind(std::string(p) + "positive_rate.", 0) == 0) rate = true;
    }
    if (!rate && !allowed.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  ExperimentConfig c;
  c.target = cfg.get_string("target", c.target);
  c.seed = cfg.get_uint("seed", c.seed);
  c.corpus_seed = cfg.get_uint("corpus_seed", c.corpus_seed);
  c.k = cfg.get_uint("k", c.k);
  c.pl = cfg.get_uint("pl", c.pl);
  c.vocab_size = cfg.get_uint("vocab_size", c.vocab_size);
  c.upsample = cfg.get_bool("upsample", c.upsample);
  c.split.train = cfg.get_double("split.train", c.split.train);
  c.split.val = cfg.get_double("split.val", c.split.val);
  c.split.test = cfg.get_double("split.test", c.split.test);
  c.teacher_val_fraction = cfg.get_double("teacher_val_fraction", c.teacher_val_fraction);

  // Corpus sections start from the experiment defaults for id prefix and
  // label source, then apply the keys under their prefix.
  const auto corpus = [&](std::string_view prefix, const CorpusConfig& base) {
    KeyValueConfig scoped;
    const std::string p(prefix);
    scoped.set(p + "id_prefix", base.id_prefix);
    scoped.set(p + "patients", std::to_string(base.patients));
    scoped.set(p + "label_source", std::string(to_string(base.label_source)));
    for (const auto& [key, value] : cfg.values()) {
      if (key.rfind(p, 0) == 0) scoped.set(key, value);
    }
    try {
      return CorpusConfig::from_config(scoped, prefix);
    } catch (const ConfigError& e) {
      throw ConfigError(p + e.what());
    }
  };
  c.manual = corpus("manual.", c.manual);
  c.automatic = corpus("automatic.", c.automatic);
  c.teacher_pool = corpus("teacher_pool.", c.teacher_pool);

  auto model_kv = KeyValueConfig::parse(c.model.to_text());
  for (const auto& k : model_keys()) {
    if (cfg.has("model." + k)) model_kv.set(k, cfg.get_string("model." + k, ""));
  }
  c.model = ModelConfig::from_text(model_kv.to_text());

  c.pretrain.steps = cfg.get_uint("pretrain.steps", c.pretrain.steps);
  c.pretrain.batch_size = cfg.get_uint("pretrain.batch_size", c.pretrain.batch_size);
  c.pretrain.lr = cfg.get_double("pretrain.lr", c.pretrain.lr);
  c.pretrain.mask_rate = cfg.get_double("pretrain.mask_rate", c.pretrain.mask_rate);
  c.teacher.epochs = cfg.get_double("teacher.epochs", c.teacher.epochs);
  c.teacher.batch_size = cfg.get_uint("teacher.batch_size", c.teacher.batch_size);
  c.teacher.lr = cfg.get_double("teacher.lr", c.teacher.lr);
  c.teacher.eval_every = cfg.get_double("teacher.eval_every", c.teacher.eval_every);

  TrainConfig* rows[] = {&c.source, &c.finetune_manual, &c.prompt_manual,
                         &c.finetune_auto, &c.prompt_auto, &c.multitask};
  for (std::size_t i = 0; i < std::size(kRowPrefixes); ++i) {
    TrainConfig base = *rows[i];
    base.pl = c.pl;
    base.upsample = c.upsample;
    *rows[i] = TrainConfig::from_config(cfg, kRowPrefixes[i], base);
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "target=" << target << "\nseed=" << seed << "\ncorpus_seed=" << corpus_seed << "\nk=" << k
     << "\npl=" << pl << "\nvocab_size=" << vocab_size
     << "\nupsample=" << (upsample ? "true" : "false") << "\nsplit.train=" << split.train
     << "\nsplit.val=" << split.val << "\nsplit.test=" << split.test
     << "\nteacher_val_fraction=" << teacher_val_fraction << "\n";
  os << prefixed("manual.", manual.to_text()) << prefixed("automatic.", automatic.to_text())
     << prefixed("teacher_pool.", teacher_pool.to_text()) << prefixed("model.", model.to_text());
  os << "pretrain.steps=" << pretrain.steps << "\npretrain.batch_size=" << pretrain.batch_size
     << "\npretrain.lr=" << pretrain.lr << "\npretrain.mask_rate=" << pretrain.mask_rate << "\n";
  os << hyper_text("teacher.", teacher);
  const TrainConfig* rows[] = {&source, &finetune_manual, &prompt_manual,
                               &finetune_auto, &prompt_auto, &multitask};
  for (std::size_t i = 0; i < std::size(kRowPrefixes); ++i) {
    for (const auto& line : peftlab::split(rows[i]->to_text(kRowPrefixes[i]), '\n')) {
      // Run seeds come from the master seed.
      if (!line.empty() && line.find(".seed=") == std::string::npos) os << line << "\n";
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline stages

ExperimentData generate_experiment_data(const ExperimentConfig& config) {
  config.validate();
  ExperimentData d;
  d.manual = generate_corpus(config.manual, derive_seed(config.corpus_seed, "manual"));
  d.automatic = generate_corpus(config.automatic, derive_seed(config.corpus_seed, "automatic"));
  d.teacher_pool = generate_corpus(config.teacher_pool, derive_seed(config.corpus_seed, "teacher_pool"));
  d.manual_split = split_by_patient(d.manual, config.split, derive_seed(config.corpus_seed, "split"));
  std::vector<std::string> texts;
  for (const auto* corpus : {&d.manual, &d.automatic, &d.teacher_pool}) {
    for (const auto& r : *corpus) {
      texts.push_back(r.text);
      texts.push_back(r.findings);
    }
  }
  d.vocab = Vocabulary::build(texts, config.vocab_size);
  return d;
}

std::vector<std::filesystem::path> save_experiment_data(const std::filesystem::path& dir,
                                                        const ExperimentData& data) {
  std::vector<std::filesystem::path> out;
  const auto put = [&](const std::string& name, std::span<const Report> reports) {
    write_jsonl(dir / name, reports);
    out.push_back(dir / name);
  };
  put("manual.jsonl", data.manual);
  put("automatic.jsonl", data.automatic);
  put("teacher_pool.jsonl", data.teacher_pool);
  put("manual_train.jsonl", data.manual_split.train);
  put("manual_val.jsonl", data.manual_split.val);
  put("manual_test.jsonl", data.manual_split.test);
  write_file(dir / "split.json", split_manifest_json(data.manual_split));
  out.push_back(dir / "split.json");
  data.vocab.save(dir / "vocab.txt");
  out.push_back(dir / "vocab.txt");
  return out;
}

ExperimentData load_experiment_data(const std::filesystem::path& dir) {
  const auto patients = [](const std::vector<Report>& reports) {
    std::vector<std::string> ids;
    for (const auto& r : reports) {
      if (std::find(ids.begin(), ids.end(), r.patient_id) == ids.end()) ids.push_back(r.patient_id);
    }
    return ids;
  };
  ExperimentData d;
  d.manual = read_jsonl(dir / "manual.jsonl");
  d.automatic = read_jsonl(dir / "automatic.jsonl");
  d.teacher_pool = read_jsonl(dir / "teacher_pool.jsonl");
  d.manual_split.train = read_jsonl(dir / "manual_train.jsonl");
  d.manual_split.val = read_jsonl(dir / "manual_val.jsonl");
  d.manual_split.test = read_jsonl(dir / "manual_test.jsonl");
  d.manual_split.train_patients = patients(d.manual_split.train);
  d.manual_split.val_patients = patients(d.manual_split.val);
  d.manual_split.test_patients = patients(d.manual_split.test);
  d.vocab = Vocabulary::load(dir / "vocab.txt");
  return d;
}

EncoderModel<float> pretrain_backbone(const ExperimentConfig& config, const ExperimentData& data,
                                      std::vector<double>* losses) {
  std::vector<std::vector<std::int32_t>> sequences;
  for (const auto* corpus : {&data.automatic, &data.teacher_pool}) {
    for (const auto& r : *corpus) {
      sequences.push_back(data.vocab.encode(r.text, config.model.max_len));
      sequences.push_back(data.vocab.encode(r.findings, config.model.max_len));
    }
  }
  EncoderModel<float> model(config.model, derive_seed(config.corpus_seed, "backbone"), true);
  auto hyper = config.pretrain;
  hyper.seed = derive_seed(config.corpus_seed, "pretrain");
  auto l = pretrain_mlm(model, sequences, hyper);
  if (losses) losses->insert(losses->end(), l.begin(), l.end());
  model.set_all_trainable(false);
  return model;
}

TeacherTraining train_experiment_teacher(const ExperimentConfig& config, const ExperimentData& data,
                                         const EncoderModel<float>& backbone) {
  const SplitRatios ratios{1.0 - config.teacher_val_fraction, config.teacher_val_fraction, 0.0};
  const auto split =
      split_by_patient(data.teacher_pool, ratios, derive_seed(config.corpus_seed, "teacher_split"));
  auto hyper = config.teacher;
  hyper.seed = derive_seed(config.corpus_seed, "teacher");
  return train_teacher(backbone, data.vocab, split.train, split.val, config.automatic.organs, hyper);
}

SourcePromptBank<float> train_source_bank(const ExperimentConfig& config,
                                          const EncoderModel<float>& backbone,
                                          const Vocabulary& vocab,
                                          std::span<const Report> automatic,
                                          std::span<const Report> validation, std::ostream* log) {
  SourcePromptBank<float> bank;
  for (const auto& organ : config.automatic.organs) {
    auto tc = config.source;
    tc.hyper.seed = derive_seed(config.seed, "source:" + organ);
    const auto task = prepare_task(tc, vocab, automatic, validation, organ, backbone.config().max_len);
    auto res = train_with_checkpointing(tc, backbone, task.train, task.val);
    if (log) {
      *log << "source " << organ << ": val F1 " << res.outcome.best_val_f1 << " at epoch "
           << res.outcome.selected_epoch << "\n";
    }
    bank.add(organ, std::move(*res.prompts));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Rows

std::size_t RowResult::trainable_count() const {
  return runs.empty() ? 0 : runs.front().trainable_count;
}

namespace {

template <class F>
MeanSd summarize(const std::vector<RunRecord>& runs, F field) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(field(r));
  return mean_sd(v);
}

Json metrics_json(const MetricsReport& m) {
  return {{"tp", m.tp},
          {"fp", m.fp},
          {"fn", m.fn},
          {"tn", m.tn},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"precision_undefined", m.precision_undefined},
          {"recall_undefined", m.recall_undefined},
          {"f1_undefined", m.f1_undefined}};
}

MetricsReport metrics_from_json(const Json& j) {
  MetricsReport m;
  m.tp = j.at("tp").get<std::size_t>();
  m.fp = j.at("fp").get<std::size_t>();
  m.fn = j.at("fn").get<std::size_t>();
  m.tn = j.at("tn").get<std::size_t>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.precision_undefined = j.at("precision_undefined").get<bool>();
  m.recall_undefined = j.at("recall_undefined").get<bool>();
  m.f1_undefined = j.at("f1_undefined").get<bool>();
  return m;
}

Json mean_sd_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}}; }

}  // namespace

MeanSd RowResult::val_f1() const {
  return summarize(runs, [](const RunRecord& r) { return r.val_f1; });
}
MeanSd RowResult::test_f1() const {
  return summarize(runs, [](const RunRecord& r) { return r.test.f1; });
}
MeanSd RowResult::precision() const {
  return summarize(runs, [](const RunRecord& r) { return r.test.precision; });
}
MeanSd RowResult::recall() const {
  return summarize(runs, [](const RunRecord& r) { return r.test.recall; });
}

std::vector<double> RowResult::test_f1_values() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.test.f1);
  return v;
}

std::vector<std::uint64_t> RowResult::seeds() const {
  std::vector<std::uint64_t> v;
  for (const auto& r : runs) v.push_back(r.seed);
  return v;
}

std::string RowResult::to_json() const {
  Json j;
  j["name"] = name;
  j["method"] = std::string(to_string(method));
  j["tier"] = std::string(to_string(tier));
  j["organ"] = organ;
  j["error"] = error;
  j["trainable_count"] = trainable_count();
  j["summary"] = {{"val_f1", mean_sd_json(val_f1())},
                  {"test_f1", mean_sd_json(test_f1())},
                  {"precision", mean_sd_json(precision())},
                  {"recall", mean_sd_json(recall())}};
  auto arr = Json::array();
  for (const auto& r : runs) {
    arr.push_back({{"seed", r.seed},
                   {"val_f1", r.val_f1},
                   {"val_f1_reevaluated", r.val_f1_reevaluated},
                   {"test", metrics_json(r.test)},
                   {"trainable_count", r.trainable_count},
                   {"selected_epoch", r.selected_epoch},
                   {"selected_step", r.selected_step},
                   {"steps", r.steps},
                   {"degenerate_validation", r.degenerate_validation},
                   {"mixture_weights", r.mixture_weights}});
  }
  j["runs"] = arr;
  return j.dump(2) + "\n";
}

RowResult RowResult::from_json(std::string_view text) {
  try {
    const auto j = Json::parse(text);
    RowResult row;
    row.name = j.at("name").get<std::string>();
    row.method = method_from_string(j.at("method").get<std::string>());
    row.tier = tier_from_string(j.at("tier").get<std::string>());
    row.organ = j.at("organ").get<std::string>();
    row.error = j.value("error", std::string());
    for (const auto& r : j.at("runs")) {
      RunRecord rec;
      rec.seed = r.at("seed").get<std::uint64_t>();
      rec.val_f1 = r.at("val_f1").get<double>();
      rec.val_f1_reevaluated = r.at("val_f1_reevaluated").get<double>();
      rec.test = metrics_from_json(r.at("test"));
      rec.trainable_count = r.at("trainable_count").get<std::size_t>();
      rec.selected_epoch = r.at("selected_epoch").get<double>();
      rec.selected_step = r.at("selected_step").get<std::size_t>();
      rec.steps = r.at("steps").get<std::size_t>();
      rec.degenerate_validation = r.at("degenerate_validation").get<bool>();
      rec.mixture_weights = r.at("mixture_weights").get<std::vector<double>>();
      row.runs.push_back(std::move(rec));
    }
    return row;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("metrics JSON: ") + e.what());
  }
}

std::vector<std::string> table_columns() {
  return {"Method", "Training data", "Val. F1", "Test F1", "Precision", "Recall", "# Tunable param."};
}

std::string MatrixResult::to_json() const {
  Json j;
  j["columns"] = table_columns();
  auto rows_json = Json::array();
  for (const auto& r : rows) rows_json.push_back(Json::parse(r.to_json()));
  j["rows"] = rows_json;
  auto sig = Json::array();
  for (const auto& s : significance) {
    sig.push_back({{"better", s.better},
                   {"other", s.other},
                   {"t", std::isfinite(s.test.t) ? Json(s.test.t) : Json(s.test.t > 0 ? "inf" : "-inf")},
                   {"df", s.test.df},
                   {"p", s.test.p},
                   {"mean_difference", s.test.mean_difference},
                   {"degenerate", s.test.degenerate}});
  }
  j["significance"] = sig;
  j["warnings"] = warnings;
  return j.dump(2) + "\n";
}

namespace {

std::string percent(const MeanSd& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * m.mean << " ± " << 100.0 * m.sd;
  return os.str();
}

// Display width counting UTF-8 code points.
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

}  // namespace

std::string MatrixResult::to_table() const {
  std::vector<std::vector<std::string>> cells = {table_columns()};
  for (const auto& r : rows) {
    if (!r.error.empty() || r.runs.empty()) {
      cells.push_back({r.name, "", "error", "", "", "", ""});
      continue;
    }
    cells.push_back({std::string(to_string(r.method)), std::string(to_string(r.tier)),
                     percent(r.val_f1()), percent(r.test_f1()), percent(r.precision()),
                     percent(r.recall()), std::to_string(r.trainable_count())});
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display_width(row[c]));
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      os << (c ? " | " : "") << cells[i][c];
      if (c + 1 < cells[i].size()) os << std::string(width[c] - display_width(cells[i][c]), ' ');
    }
    os << "\n";
    if (i == 0) {
      for (std::size_t c = 0; c < width.size(); ++c) os << (c ? "-|-" : "") << std::string(width[c], '-');
      os << "\n";
    }
  }
  for (const auto& r : rows) {
    if (!r.error.empty()) os << "error in " << r.name << ": " << r.error << "\n";
  }
  for (const auto& s : significance) {
    os << std::setprecision(4) << s.better << " > " << s.other << ": t=" << s.test.t
       << ", df=" << s.test.df << ", p=" << s.test.p << " (one-tailed paired by seed)"
       << (s.test.degenerate ? " [degenerate: zero variance]" : "") << "\n";
  }
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

MatrixResult assemble_report(std::vector<RowResult> rows) {
  MatrixResult m;
  std::set<std::pair<Method, DataTier>> seen;
  for (const auto& r : rows) {
    if (!r.error.empty()) continue;
    if (!seen.insert({r.method, r.tier}).second) {
      m.warnings.push_back("duplicate row " + std::string(to_string(r.method)) + "/" +
                           std::string(to_string(r.tier)) + " (" + r.name + ")");
    }
  }
  for (const auto& mt : rows) {
    if (mt.method != Method::multitask || !mt.error.empty()) continue;
    for (const auto& other : rows) {
      if (other.method == Method::multitask || other.tier != mt.tier || !other.error.empty()) continue;
      if (other.seeds() != mt.seeds() || mt.runs.size() < 2) {
        m.warnings.push_back("no paired test " + mt.name + " vs " + other.name + ": seeds differ");
        continue;
      }
      const auto a = mt.test_f1_values(), b = other.test_f1_values();
      m.significance.push_back({mt.name, other.name, paired_one_tailed_ttest(a, b)});
    }
  }
  m.rows = std::move(rows);
  return m;
}

std::vector<std::uint64_t> run_seeds(const ExperimentConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.k; ++i) seeds.push_back(derive_seed(config.seed, i));
  return seeds;
}

namespace {

struct RowSpec {
  std::string name;
  const TrainConfig* config;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace

RunRecord run_single(const TrainConfig& base, std::uint64_t seed, const EncoderModel<float>& backbone,
                     const Vocabulary& vocab, std::span<const Report> train,
                     std::span<const Report> val, std::span<const Report> test,
                     const std::string& organ, const SourcePromptBank<float>* bank,
                     const std::filesystem::path* dir, const std::string& row_name) {
  auto tc = base;
  tc.hyper.seed = seed;
  const auto task = prepare_task(tc, vocab, train, val, organ, backbone.config().max_len);
  std::optional<MultitaskResult> mixture;
  auto res = train_with_checkpointing(tc, backbone, task.train, task.val, bank, &mixture);
  const PromptSet<float>* prompts = res.prompts ? &*res.prompts : nullptr;
  RunRecord rec;
  rec.seed = seed;
  rec.val_f1 = res.outcome.best_val_f1;
  rec.val_f1_reevaluated = evaluate(res.model, prompts, vocab, val, organ).f1;
  rec.test = evaluate(res.model, prompts, vocab, test, organ);
  rec.trainable_count = res.trainable_count;
  rec.selected_epoch = res.outcome.selected_epoch;
  rec.selected_step = res.outcome.selected_step;
  rec.steps = res.outcome.steps;
  rec.degenerate_validation = res.degenerate_validation;
  if (mixture) rec.mixture_weights = mixture->weights;
  if (dir) {
    std::filesystem::create_directories(*dir);
    write_file(*dir / "config.txt", tc.to_text() + "organ=" + organ + "\n");
    RowResult single{row_name, tc.method, tc.tier, organ, {rec}, {}};
    write_file(*dir / "metrics.json", single.to_json());
    write_file(*dir / "training.json", res.to_json() + "\n");
    save_model(*dir / "model.ckpt", res.model);
    if (prompts) save_prompts(*dir / "prompt.ckpt", *prompts);
    if (mixture) {
      save_mixture(*dir / "mixture.ckpt", mixture->module);
      Json w;
      for (std::size_t i = 0; i < mixture->weights.size(); ++i) w[bank->names[i]] = mixture->weights[i];
      write_file(*dir / "weights.json", w.dump(2) + "\n");
    }
  }
  return rec;
}

MatrixResult run_experiment_matrix(const ExperimentConfig& config,
                                   const std::filesystem::path* out_dir, std::ostream* log) {
  config.validate();
  Stopwatch clock;
  const auto note = [&](const std::string& msg) {
    if (!log) return;
    std::ostringstream stamp;
    stamp << std::fixed << std::setprecision(1) << clock.seconds();
    *log << "[" << stamp.str() << "s] " << msg << "\n";
  };
  if (out_dir) write_file(*out_dir / "config.txt", config.to_text());

  auto data = generate_experiment_data(config);
  note("data: " + std::to_string(data.manual.size()) + " manual, " +
       std::to_string(data.automatic.size()) + " automatic, " +
       std::to_string(data.teacher_pool.size()) + " teacher-pool reports");
  const auto backbone = pretrain_backbone(config, data);
  note("backbone pretrained");
  {
    const auto teacher = train_experiment_teacher(config, data, backbone);
    note("teacher trained: macro val F1 " + std::to_string(teacher.outcome.best_val_f1));
    data.automatic = teacher_annotate_all(teacher.teacher, data.automatic, config.automatic.organs);
    note("automatic tier annotated: " + config.target + " agreement " +
         std::to_string(label_agreement(data.automatic, config.target)));
  }

  std::optional<SourcePromptBank<float>> bank;
  std::string bank_error;
  try {
    bank = train_source_bank(config, backbone, data.vocab, data.automatic, data.manual_split.val, log);
    if (out_dir) save_bank(*out_dir / "bank.ckpt", *bank);
    note("source bank trained");
  } catch (const std::exception& e) {
    bank_error = std::string("source bank unavailable: ") + e.what();
    note(bank_error);
  }

  const std::vector<RowSpec> specs = {{"finetune_manual", &config.finetune_manual},
                                      {"prompt_manual", &config.prompt_manual},
                                      {"finetune_auto", &config.finetune_auto},
                                      {"prompt_auto", &config.prompt_auto},
                                      {"multitask_auto", &config.multitask}};
  const auto seeds = run_seeds(config);
  std::vector<RowResult> rows;
  for (const auto& spec : specs) {
    RowResult row{spec.name, spec.config->method, spec.config->tier, config.target, {}, {}};
    const std::span<const Report> train = spec.config->tier == DataTier::manual
                                              ? std::span<const Report>(data.manual_split.train)
                                              : std::span<const Report>(data.automatic);
    const bool needs_bank = spec.config->method == Method::multitask;
    if (needs_bank && !bank) {
      row.error = bank_error;
    } else {
      try {
        for (std::size_t i = 0; i < seeds.size(); ++i) {
          std::optional<std::filesystem::path> dir;
          if (out_dir) dir = *out_dir / "runs" / spec.name / ("seed-" + std::to_string(i));
          row.runs.push_back(run_single(*spec.config, seeds[i], backbone, data.vocab, train,
                                        data.manual_split.val, data.manual_split.test, config.target, needs_bank ? &*bank : nullptr,
                                     dir ? &*dir : nullptr, spec.name));
          std::ostringstream msg;
          msg << spec.name << " seed " << i << ": val F1 " << row.runs.back().val_f1 << ", test F1 "
              << row.runs.back().test.f1;
          note(msg.str());
        }
      } catch (const std::exception& e) {
        row.runs.clear();
        row.error = e.what();
        note(spec.name + " failed: " + row.error);
      }
    }
    if (out_dir) write_file(*out_dir / "rows" / spec.name / "metrics.json", row.to_json());
    rows.push_back(std::move(row));
  }
  auto result = assemble_report(std::move(rows));
  if (out_dir) {
    write_file(*out_dir / "results.json", result.to_json());
    write_file(*out_dir / "results.txt", result.to_table());
  }
  return result;
}

}  // namespace peftlab
