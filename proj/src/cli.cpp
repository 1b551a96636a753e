#include "peftlab/cli.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "peftlab/checkpoint.hpp"
#include "peftlab/diagnostics.hpp"
#include "peftlab/harness.hpp"

namespace peftlab {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::string RunManifest::to_json() const {
  Json j;
  j["command"] = command;
  Json cfg = Json::object();
  const auto parsed = KeyValueConfig::parse(config);
  for (const auto& [k, v] : parsed.values()) cfg[k] = v;
  j["config"] = cfg;
  auto in = Json::array();
  for (const auto& [path, digest] : inputs) in.push_back({{"path", path}, {"sha256", digest}});
  j["inputs"] = in;
  j["outputs"] = outputs;
  j["duration_seconds"] = duration_seconds;
  return j.dump(2) + "\n";
}

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> dirs;  // report only
};

// Tracks the files a command reads. Inputs may not live under the output
// directory, so writing results never touches them.
class Context {
 public:
  Context(const Options& options, std::ostream& out, std::ostream& err)
      : options(options), out(out), err(err) {
    if (!options.out.empty()) out_dir = fs::absolute(options.out).lexically_normal();
  }

  void record(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw ConfigError("input file not found: " + path.string());
    if (out_dir) {
      const auto abs = fs::absolute(path).lexically_normal();
      const auto rel = abs.lexically_relative(*out_dir);
      if (!rel.empty() && *rel.begin() != "..") {
        throw ConfigError("input " + path.string() + " lies inside the output directory");
      }
    }
    manifest.inputs.emplace_back(path.string(), file_sha256(path));
  }

  const Options& options;
  std::ostream& out;
  std::ostream& err;
  std::optional<fs::path> out_dir;
  RunManifest manifest;
};

const std::vector<std::string>& data_files() {
  static const std::vector<std::string> names = {
      "manual.jsonl",     "automatic.jsonl", "teacher_pool.jsonl", "manual_train.jsonl",
      "manual_val.jsonl", "manual_test.jsonl", "vocab.txt"};
  return names;
}

KeyValueConfig load_config(Context& ctx) {
  if (ctx.options.config.empty()) return {};
  ctx.record(ctx.options.config);
  return KeyValueConfig::load(ctx.options.config);
}

// Removes the given keys and returns their values.
std::map<std::string, std::string> take_keys(KeyValueConfig& cfg, const std::vector<std::string>& keys) {
  std::map<std::string, std::string> taken;
  KeyValueConfig rest;
  for (const auto& [k, v] : cfg.values()) {
    if (std::find(keys.begin(), keys.end(), k) != keys.end()) {
      taken[k] = v;
    } else {
      rest.set(k, v);
    }
  }
  cfg = rest;
  return taken;
}

std::string required(const std::map<std::string, std::string>& keys, const std::string& name) {
  auto it = keys.find(name);
  if (it == keys.end() || it->second.empty()) throw ConfigError("missing required key '" + name + "'");
  return it->second;
}

std::string optional_key(const std::map<std::string, std::string>& keys, const std::string& name,
                         const std::string& fallback = "") {
  auto it = keys.find(name);
  return it == keys.end() ? fallback : it->second;
}

ExperimentData load_data(Context& ctx, const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("data directory not found: " + dir.string());
  for (const auto& name : data_files()) ctx.record(dir / name);
  return load_experiment_data(dir);
}

EncoderModel<float> load_backbone(Context& ctx, const fs::path& path) {
  ctx.record(path);
  auto model = load_model(path);
  model.set_all_trainable(false);
  return model;
}

std::string prefixed_lines(const std::string& prefix, const std::string& text) {
  std::string s;
  for (const auto& line : split(text, '\n'))
    if (!trim(line).empty()) s += prefix + line + "\n";
  return s;
}

std::string resolved_keys(const std::map<std::string, std::string>& keys) {
  std::string s;
  for (const auto& [k, v] : keys) s += k + "=" + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(Context& ctx) {
  auto cfg = load_config(ctx);
  auto ec = ExperimentConfig::from_config(cfg);
  if (ctx.options.seed) ec.corpus_seed = *ctx.options.seed;
  ec.validate();
  const auto data = generate_experiment_data(ec);
  save_experiment_data(*ctx.out_dir, data);
  write_file(*ctx.out_dir / "config.txt", ec.to_text());
  ctx.manifest.config = ec.to_text();
  ctx.out << "generated " << data.manual.size() << " manual, " << data.automatic.size()
          << " automatic and " << data.teacher_pool.size() << " teacher-pool reports\n";
}

void cmd_pretrain(Context& ctx) {
  auto cfg = load_config(ctx);
  const auto keys = take_keys(cfg, {"data"});
  auto ec = ExperimentConfig::from_config(cfg);
  if (ctx.options.seed) ec.corpus_seed = *ctx.options.seed;
  ec.validate();
  const fs::path data_dir = required(keys, "data");
  const auto data = load_data(ctx, data_dir);
  std::vector<double> losses;
  const auto backbone = pretrain_backbone(ec, data, &losses);
  save_model(*ctx.out_dir / "backbone.ckpt", backbone);
  Json j;
  j["parameter_digest"] = parameter_digest(backbone.params());
  j["losses"] = losses;
  write_file(*ctx.out_dir / "pretrain.json", j.dump(2) + "\n");
  ctx.manifest.config = resolved_keys(keys) + ec.to_text();
  ctx.out << "pretrained " << losses.size() << " steps, final loss "
          << (losses.empty() ? 0.0 : losses.back()) << "\n";
}

void train_teacher_command(Context& ctx, KeyValueConfig cfg, std::map<std::string, std::string> keys) {
  const ExperimentConfig defaults;
  const auto extra = take_keys(cfg, {"method", "organs", "val_fraction"});
  cfg.reject_unknown({"epochs", "batch_size", "lr", "eval_every", "seed"});
  TrainHyper hyper = defaults.teacher;
  hyper.epochs = cfg.get_double("epochs", hyper.epochs);
  hyper.batch_size = cfg.get_uint("batch_size", hyper.batch_size);
  hyper.lr = cfg.get_double("lr", hyper.lr);
  hyper.eval_every = cfg.get_double("eval_every", hyper.eval_every);
  hyper.seed = cfg.get_uint("seed", derive_seed(defaults.corpus_seed, "teacher"));
  if (ctx.options.seed) hyper.seed = *ctx.options.seed;
  hyper.validate();
  auto organs = extra.count("organs") ? split(extra.at("organs"), ',') : default_organs();
  for (auto& o : organs) o = trim(o);
  double val_fraction = defaults.teacher_val_fraction;
  if (extra.count("val_fraction")) {
    KeyValueConfig v;
    v.set("val_fraction", extra.at("val_fraction"));
    val_fraction = v.get_double("val_fraction", val_fraction);
  }
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in (0, 1)");

  const fs::path data_dir = required(keys, "data");
  auto data = load_data(ctx, data_dir);
  const auto backbone = load_backbone(ctx, required(keys, "backbone"));
  std::vector<Report> automatic = data.automatic;
  if (keys.count("automatic")) {
    ctx.record(keys.at("automatic"));
    automatic = read_jsonl(keys.at("automatic"));
  }
  const auto split = split_by_patient(data.teacher_pool, {1.0 - val_fraction, val_fraction, 0.0},
                                      derive_seed(hyper.seed, "teacher_split"));
  const auto trained = train_teacher(backbone, data.vocab, split.train, split.val, organs, hyper);
  trained.teacher.save(*ctx.out_dir / "teacher.ckpt");
  const auto annotated = teacher_annotate_all(trained.teacher, automatic, organs);
  write_jsonl(*ctx.out_dir / "automatic_annotated.jsonl", annotated);

  Json j;
  j["val_f1"] = trained.outcome.best_val_f1;
  j["selected_epoch"] = trained.outcome.selected_epoch;
  j["steps"] = trained.outcome.steps;
  Json agreement = Json::object();
  for (const auto& o : organs) {
    const bool has_gold = std::all_of(annotated.begin(), annotated.end(),
                                      [&](const Report& r) { return r.gold.count(o) > 0; });
    if (has_gold && !annotated.empty()) agreement[o] = label_agreement(annotated, o);
  }
  j["gold_agreement"] = agreement;
  write_file(*ctx.out_dir / "metrics.json", j.dump(2) + "\n");

  std::string org;
  for (std::size_t i = 0; i < organs.size(); ++i) org += (i ? "," : "") + organs[i];
  std::ostringstream resolved;
  resolved << resolved_keys(keys) << "method=teacher\norgans=" << org << "\nval_fraction=" << val_fraction
           << "\nepochs=" << hyper.epochs << "\nbatch_size=" << hyper.batch_size << "\nlr=" << hyper.lr
           << "\neval_every=" << hyper.eval_every << "\nseed=" << hyper.seed << "\n";
  ctx.manifest.config = resolved.str();
  ctx.out << "teacher val F1 " << trained.outcome.best_val_f1 << "; annotated " << annotated.size()
          << " reports\n";
}

void cmd_train(Context& ctx) {
  auto cfg = load_config(ctx);
  auto keys = take_keys(cfg, {"data", "backbone", "organ", "automatic", "bank", "name"});
  if (cfg.get_string("method", "finetune") == "teacher") {
    train_teacher_command(ctx, cfg, keys);
    return;
  }
  const ExperimentConfig defaults;
  const auto method = method_from_string(cfg.get_string("method", "finetune"));
  const auto tier = tier_from_string(cfg.get_string("tier", "manual"));
  const TrainConfig* base = nullptr;
  if (method == Method::multitask) {
    base = &defaults.multitask;
  } else if (tier == DataTier::manual) {
    base = method == Method::finetune ? &defaults.finetune_manual : &defaults.prompt_manual;
  } else {
    base = method == Method::finetune ? &defaults.finetune_auto : &defaults.prompt_auto;
  }
  auto tc = TrainConfig::from_config(cfg, "", *base);
  if (ctx.options.seed) tc.hyper.seed = *ctx.options.seed;
  tc.validate();
  const std::string organ = optional_key(keys, "organ", defaults.target);
  keys["organ"] = organ;
  const std::string name =
      optional_key(keys, "name", std::string(to_string(method)) + "_" + std::string(to_string(tier)));
  keys["name"] = name;

  const auto data = load_data(ctx, required(keys, "data"));
  const auto backbone = load_backbone(ctx, required(keys, "backbone"));
  std::vector<Report> train;
  if (tier == DataTier::manual) {
    train = data.manual_split.train;
  } else {
    fs::path path = fs::path(required(keys, "data")) / "automatic.jsonl";
    if (keys.count("automatic")) {
      path = keys.at("automatic");
      ctx.record(path);
    }
    train = read_jsonl(path);
    if (with_label(train, organ).size() != train.size()) {
      throw ConfigError("automatic tier at " + path.string() + " has no labels for '" + organ +
                        "'; annotate it with method=teacher first");
    }
  }
  std::optional<SourcePromptBank<float>> bank;
  if (method == Method::multitask) {
    const fs::path path = required(keys, "bank");
    ctx.record(path);
    bank = load_bank(path);
  }
  const auto rec = run_single(tc, tc.hyper.seed, backbone, data.vocab, train, data.manual_split.val,
                              data.manual_split.test, organ, bank ? &*bank : nullptr,
                              &*ctx.out_dir, name);
  ctx.manifest.config = resolved_keys(keys) + tc.to_text();
  ctx.out << name << ": val F1 " << rec.val_f1 << ", test F1 " << rec.test.f1 << ", precision "
          << rec.test.precision << ", recall " << rec.test.recall << ", " << rec.trainable_count
          << " trainable parameters\n";
}

void cmd_mix(Context& ctx) {
  auto cfg = load_config(ctx);
  const auto keys = take_keys(cfg, {"prompts", "names", "bank", "mixture"});
  cfg.reject_unknown({});
  std::optional<SourcePromptBank<float>> bank;
  if (keys.count("prompts")) {
    if (keys.count("bank")) throw ConfigError("give either prompts or bank, not both");
    auto paths = split(keys.at("prompts"), ',');
    std::vector<std::string> names;
    if (keys.count("names")) {
      names = split(keys.at("names"), ',');
      if (names.size() != paths.size()) throw ConfigError("names and prompts differ in length");
    }
    bank.emplace();
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const fs::path path = trim(paths[i]);
      ctx.record(path);
      bank->add(names.empty() ? path.stem().string() : trim(names[i]), load_prompts(path));
    }
    bank->validate();
    save_bank(*ctx.out_dir / "bank.ckpt", *bank);
  } else if (keys.count("bank")) {
    ctx.record(keys.at("bank"));
    bank = load_bank(keys.at("bank"));
  }
  if (keys.count("mixture")) {
    if (!bank) throw ConfigError("mixture needs a bank or prompts");
    ctx.record(keys.at("mixture"));
    const auto module = load_mixture(keys.at("mixture"));
    export_target_prompt(*ctx.out_dir / "target.ckpt", module, *bank);
    const auto w = compute_weights(module, *bank);
    Json j = Json::object();
    for (std::size_t i = 0; i < w.size(); ++i) j[bank->names[i]] = w[i];
    write_file(*ctx.out_dir / "weights.json", j.dump(2) + "\n");
    ctx.out << "exported target prompt from " << bank->size() << " source prompts\n";
  } else if (!keys.count("prompts")) {
    throw ConfigError("mix needs prompts (to build a bank) or mixture (to export a target)");
  } else {
    ctx.out << "bank of " << bank->size() << " prompts, digest " << bank_digest(*bank) << "\n";
  }
  ctx.manifest.config = resolved_keys(keys);
}

void cmd_eval(Context& ctx) {
  auto cfg = load_config(ctx);
  auto keys = take_keys(cfg, {"data", "split", "reports", "model", "prompt", "bank", "mixture", "organ"});
  cfg.reject_unknown({});
  const fs::path data_dir = required(keys, "data");
  const fs::path vocab_path = data_dir / "vocab.txt";
  ctx.record(vocab_path);
  const auto vocab = Vocabulary::load(vocab_path);
  fs::path reports_path;
  if (keys.count("reports")) {
    reports_path = keys.at("reports");
  } else {
    const auto which = optional_key(keys, "split", "test");
    if (which != "train" && which != "val" && which != "test") {
      throw ConfigError("split must be train, val or test");
    }
    keys["split"] = which;
    reports_path = data_dir / ("manual_" + which + ".jsonl");
  }
  ctx.record(reports_path);
  const auto reports = read_jsonl(reports_path);
  const std::string organ = optional_key(keys, "organ", ExperimentConfig().target);
  keys["organ"] = organ;
  const fs::path model_path = required(keys, "model");
  ctx.record(model_path);
  const auto model = load_model(model_path);
  if (keys.count("prompt") && (keys.count("bank") || keys.count("mixture"))) {
    throw ConfigError("give either prompt or bank and mixture");
  }
  if (keys.count("bank") != keys.count("mixture")) throw ConfigError("bank and mixture go together");

  const auto labeled = with_label(reports, organ);
  if (labeled.empty()) throw ConfigError("no reports labeled for '" + organ + "'");
  MetricsReport metrics;
  if (keys.count("bank")) {
    ctx.record(keys.at("bank"));
    ctx.record(keys.at("mixture"));
    const auto bank = load_bank(keys.at("bank"));
    const auto module = load_mixture(keys.at("mixture"));
    const auto data = LabeledData::from_reports(vocab, labeled, organ, model.config().max_len);
    std::vector<double> probs;
    constexpr std::size_t kChunk = 256;
    for (std::size_t i = 0; i < data.size(); i += kChunk) {
      const std::size_t end = std::min(data.size(), i + kChunk);
      const auto batch = TokenBatch::from_sequences(
          std::span<const std::vector<std::int32_t>>(data.sequences.data() + i, end - i));
      const auto p = classify_with_mixture(model, module, bank, batch);
      probs.insert(probs.end(), p.begin(), p.end());
    }
    metrics = compute_metrics(probs, data.labels);
  } else {
    std::optional<PromptSet<float>> prompts;
    if (keys.count("prompt")) {
      ctx.record(keys.at("prompt"));
      prompts = load_prompts(keys.at("prompt"));
    }
    metrics = evaluate(model, prompts ? &*prompts : nullptr, vocab, labeled, organ);
  }
  write_file(*ctx.out_dir / "metrics.json", metrics.to_json() + "\n");
  ctx.manifest.config = resolved_keys(keys);
  ctx.out << organ << " on " << labeled.size() << " reports: F1 " << metrics.f1 << ", precision "
          << metrics.precision << ", recall " << metrics.recall << "\n";
}

int cmd_report(Context& ctx) {
  if (ctx.options.dirs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<RowResult> rows;
  bool failed = false;
  for (const auto& d : ctx.options.dirs) {
    const fs::path path = fs::path(d) / "metrics.json";
    try {
      ctx.record(path);
      rows.push_back(RowResult::from_json(read_file(path)));
    } catch (const std::exception& e) {
      RowResult bad;
      bad.name = d;
      bad.error = fs::exists(path) ? std::string("corrupt metrics.json: ") + e.what()
                                   : "missing metrics.json";
      ctx.err << "error: " << d << ": " << bad.error << "\n";
      rows.push_back(std::move(bad));
      failed = true;
    }
  }
  const auto report = assemble_report(std::move(rows));
  for (const auto& w : report.warnings) ctx.err << "warning: " << w << "\n";
  const auto table = report.to_table();
  ctx.out << table;
  if (ctx.out_dir) {
    write_file(*ctx.out_dir / "table.txt", table);
    write_file(*ctx.out_dir / "report.json", report.to_json());
  }
  std::string dirs;
  for (std::size_t i = 0; i < ctx.options.dirs.size(); ++i) dirs += (i ? "," : "") + ctx.options.dirs[i];
  ctx.manifest.config = "dirs=" + dirs + "\n";
  return failed ? kExitInvalid : kExitOk;
}

int cmd_gradcheck(Context& ctx) {
  auto cfg = load_config(ctx);
  KeyValueConfig model_cfg;
  model_cfg.set("layers", "2");
  model_cfg.set("hidden", "16");
  model_cfg.set("heads", "2");
  model_cfg.set("ffn", "32");
  model_cfg.set("vocab", "40");
  model_cfg.set("max_len", "16");
  KeyValueConfig rest;
  for (const auto& [k, v] : cfg.values()) {
    if (k.starts_with("model.")) {
      model_cfg.set(k.substr(6), v);
    } else {
      rest.set(k, v);
    }
  }
  rest.reject_unknown({"pl", "sources", "batch", "length", "coords_per_param", "threshold", "seed"});
  GradCheckSetup setup;
  setup.model = ModelConfig::from_text(model_cfg.to_text());
  setup.model.dropout = 0.0;
  setup.model.validate();
  setup.pl = rest.get_uint("pl", setup.pl);
  setup.sources = rest.get_uint("sources", setup.sources);
  setup.batch = rest.get_uint("batch", setup.batch);
  setup.length = rest.get_uint("length", setup.length);
  setup.coords_per_param = rest.get_uint("coords_per_param", setup.coords_per_param);
  setup.seed = rest.get_uint("seed", setup.seed);
  if (ctx.options.seed) setup.seed = *ctx.options.seed;
  const double threshold = rest.get_double("threshold", 1e-4);
  if (setup.pl < 1 || setup.sources < 1 || setup.batch < 1 || setup.length < 2) {
    throw ConfigError("gradcheck needs pl >= 1, sources >= 1, batch >= 1 and length >= 2");
  }
  if (setup.length > setup.model.max_len) throw ConfigError("length exceeds model.max_len");

  auto cases = check_primitive_gradients(setup.seed);
  for (auto& c : cases) c.name = "primitive " + c.name;
  cases.push_back({"classifier", check_classifier_gradients(setup)});
  cases.push_back({"mixture", check_mixture_gradients(setup)});
  double worst = 0;
  Json j = Json::array();
  for (const auto& c : cases) {
    worst = std::max(worst, c.report.max_rel_error);
    ctx.out << std::left << std::setw(32) << c.name << std::scientific << std::setprecision(3)
            << c.report.max_rel_error << " over " << c.report.coords_checked << " coordinates\n";
    j.push_back({{"name", c.name},
                 {"max_rel_error", c.report.max_rel_error},
                 {"coords_checked", c.report.coords_checked}});
  }
  ctx.out << "max relative error: " << std::scientific << std::setprecision(3) << worst
          << (worst < threshold ? " (pass)" : " (FAIL)") << "\n";
  if (ctx.out_dir) {
    Json doc{{"threshold", threshold}, {"max_rel_error", worst}, {"cases", j}};
    write_file(*ctx.out_dir / "gradcheck.json", doc.dump(2) + "\n");
  }
  std::ostringstream resolved;
  resolved << prefixed_lines("model.", setup.model.to_text()) << "pl=" << setup.pl
           << "\nsources=" << setup.sources << "\nbatch=" << setup.batch << "\nlength=" << setup.length
           << "\ncoords_per_param=" << setup.coords_per_param << "\nseed=" << setup.seed
           << "\nthreshold=" << threshold << "\n";
  ctx.manifest.config = resolved.str();
  return worst < threshold ? kExitOk : kExitRuntime;
}

void cmd_experiment(Context& ctx) {
  auto cfg = load_config(ctx);
  auto ec = ExperimentConfig::from_config(cfg);
  if (ctx.options.seed) ec.seed = *ctx.options.seed;
  ec.validate();
  const fs::path out = *ctx.out_dir;
  const auto result = run_experiment_matrix(ec, &out, &ctx.err);
  ctx.manifest.config = ec.to_text();
  ctx.out << result.to_table();
}

std::vector<std::string> list_outputs(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(dir).generic_string();
    if (rel != "manifest.json") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Parameter-efficient adaptation of a small report encoder", "peftlab"};
  app.require_subcommand(1);
  Options options;
  std::uint64_t seed = 0;

  struct Command {
    std::string name, help;
    bool needs_out;
    std::function<int(Context&)> run;
  };
  const auto wrap = [](void (*f)(Context&)) {
    return [f](Context& c) {
      f(c);
      return kExitOk;
    };
  };
  const std::vector<Command> commands = {
      {"gen-data", "Generate the synthetic corpora, the manual split and the vocabulary", true,
       wrap(cmd_gen_data)},
      {"pretrain", "Masked-token pretraining of the backbone on a data directory", true,
       wrap(cmd_pretrain)},
      {"train", "One adaptation run: finetune, prompt_tune, multitask or teacher", true,
       wrap(cmd_train)},
      {"mix", "Build a source prompt bank or export a composed target prompt", true, wrap(cmd_mix)},
      {"eval", "Score a trained model on labeled reports", true, wrap(cmd_eval)},
      {"report", "Render the comparison table from run directories", false, cmd_report},
      {"gradcheck", "Compare analytic gradients with central differences", false, cmd_gradcheck},
      {"experiment", "Run the full comparison matrix end to end", true, wrap(cmd_experiment)},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", options.config, "Flat key=value config file");
    sub->add_option("--seed", seed, "Seed override");
    auto* o = sub->add_option("--out", options.out, "Output directory");
    if (c.needs_out) o->required();
    if (c.name == "report") sub->add_option("dirs", options.dirs, "Run directories with metrics.json");
    subs[c.name] = sub;
  }

  std::vector<const char*> argv{"peftlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  const Command* chosen = nullptr;
  for (const auto& c : commands)
    if (subs.at(c.name)->parsed()) chosen = &c;
  if (subs.at(chosen->name)->count("--seed")) options.seed = seed;

  const auto start = std::chrono::steady_clock::now();
  Context ctx(options, out, err);
  ctx.manifest.command = chosen->name;
  try {
    if (ctx.out_dir) fs::create_directories(*ctx.out_dir);
    const int code = chosen->run(ctx);
    if (ctx.out_dir) {
      ctx.manifest.outputs = list_outputs(*ctx.out_dir);
      ctx.manifest.duration_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_file(*ctx.out_dir / "manifest.json", ctx.manifest.to_json());
    }
    return code;
  } catch (const std::invalid_argument& e) {  // ConfigError and ShapeError included
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace peftlab
