// Acceptance gate: one PASS/FAIL line per criterion. Exit status is 0 only
// when every criterion passes. An optional argument names a directory that
// receives the full experiment matrix output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "peftlab/adaptation.hpp"
#include "peftlab/checkpoint.hpp"
#include "peftlab/diagnostics.hpp"
#include "peftlab/harness.hpp"
#include "peftlab/prompt_mixture.hpp"
#include "peftlab/stats.hpp"

using namespace peftlab;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

ModelConfig small_model() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab = 40;
  c.max_len = 16;
  return c;
}

std::vector<std::vector<std::int32_t>> random_sequences(std::size_t n, const ModelConfig& c, Rng& rng) {
  std::vector<std::vector<std::int32_t>> seqs(n);
  for (auto& s : seqs) {
    const std::size_t len = 2 + uniform_index(rng, c.max_len - 1);
    s.push_back(kClsId);
    while (s.size() < len) s.push_back(static_cast<std::int32_t>(4 + uniform_index(rng, c.vocab - 4)));
  }
  return seqs;
}

TokenBatch batch_of(const std::vector<std::vector<std::int32_t>>& seqs) {
  return TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>>(seqs));
}

LabeledData random_labeled(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  LabeledData d;
  d.sequences = random_sequences(n, c, rng);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 2));
  return d;
}

SourcePromptBank<float> random_bank(std::size_t n, const ModelConfig& c, std::size_t pl, Rng& rng) {
  SourcePromptBank<float> bank;
  for (std::size_t i = 0; i < n; ++i) {
    bank.add("task" + std::to_string(i), PromptSet<float>::random(c.layers, pl, c.hidden, rng, 0.5));
  }
  return bank;
}

MixtureModule<float> random_module(std::size_t d, std::uint64_t seed) {
  auto m = MixtureModule<float>::init(d, seed);
  Rng rng(seed + 1);
  fill_normal(m.q.data(), rng, 1.0);
  fill_normal(m.norm_gain.data(), rng, 1.0);
  fill_normal(m.norm_bias.data(), rng, 0.3);
  return m;
}

std::string backbone_digest(const EncoderModel<float>& m) {
  return parameter_digest(m.params(), [](std::string_view n) { return is_backbone_param(n); });
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

void criterion1() {
  Stopwatch clock;
  const auto c = small_model();
  const EncoderModel<float> model(c, 1);
  Rng rng(2);
  const auto seqs = random_sequences(100, c, rng);
  const auto empty = PromptSet<float>::zeros(c.layers, 0, c.hidden);
  double worst = 0;
  for (const auto& s : seqs) {
    const std::vector<std::vector<std::int32_t>> one{s};
    const auto batch = batch_of(one);
    Tape<float> tape(false);
    const auto a = encode(tape, model, batch);
    const auto b = encode(tape, model, batch, &empty);
    for (std::size_t i = 0; i < a.size(); ++i)
      worst = std::max(worst, std::abs(double(a.data()[i]) - double(b.data()[i])));
  }
  const double t = clock.seconds();
  verdict(1, worst <= 1e-6 && t < 10,
          "pl=0 matches the plain encoder on 100 inputs, max abs diff " + fmt(worst) + " in " + fmt(t) + " s");
}

void criterion2() {
  Stopwatch clock;
  GradCheckSetup setup;
  setup.model = small_model();
  double worst = 0;
  std::string where;
  auto cases = check_primitive_gradients(0);
  cases.push_back({"classifier", check_classifier_gradients(setup)});
  cases.push_back({"mixture", check_mixture_gradients(setup)});
  for (const auto& c : cases) {
    if (c.report.max_rel_error >= worst) {
      worst = c.report.max_rel_error;
      where = c.name;
    }
  }
  const double t = clock.seconds();
  verdict(2, worst < 1e-4 && t < 120,
          std::to_string(cases.size()) + " gradient checks, max relative error " + fmt(worst) + " (" + where +
              ") in " + fmt(t) + " s");
}

void criterion3() {
  Stopwatch clock;
  const auto c = small_model();
  EncoderModel<float> model(c, 3, false);
  model.set_all_trainable(false);
  Rng rng(4);
  const auto bank = random_bank(3, c, 3, rng);
  const auto model_before = parameter_digest(model.params());
  const auto bank_before = bank_digest(bank);
  const auto train = random_labeled(32, c, 5), val = random_labeled(16, c, 6);
  const TrainHyper h{.epochs = 3, .batch_size = 8, .lr = 1e-2, .seed = 7};
  const auto pt = prompt_tune(model, train, val, h, 3);
  const auto mt = train_multitask_target(model, bank, train, val, h);
  const bool unchanged = parameter_digest(model.params()) == model_before && bank_digest(bank) == bank_before &&
                         backbone_digest(pt.model) == backbone_digest(model) &&
                         backbone_digest(mt.adaptation.model) == backbone_digest(model);
  const double t = clock.seconds();
  verdict(3, unchanged && t < 60,
          std::string("backbone and bank checksums ") + (unchanged ? "unchanged" : "CHANGED") +
              " after prompt and multitask training, " + fmt(t) + " s");
}

void criterion4() {
  const auto basic = weights_from_scaled_dots(std::vector<double>{1, 2});
  const double example_err = std::max(std::abs(basic[0] - 0.2), std::abs(basic[1] - 0.8));

  const auto c = small_model();
  double sum_err = 0, uniform_err = 0, scale_err = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(100 + trial);
    const auto bank = random_bank(2 + trial % 5, c, 1 + trial % 4, rng);
    auto module = random_module(c.hidden, 200 + trial);
    const auto w = compute_weights(module, bank);
    sum_err = std::max(sum_err, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
    for (double s : {-3.0, 0.01, 250.0}) {
      auto scaled = module.clone();
      for (auto& v : scaled.q.data()) v = static_cast<float>(v * s);
      const auto ws = compute_weights(scaled, bank);
      for (std::size_t i = 0; i < w.size(); ++i) scale_err = std::max(scale_err, std::abs(ws[i] - w[i]));
    }
    SourcePromptBank<float> same;
    const auto p = PromptSet<float>::random(c.layers, 2, c.hidden, rng, 0.5);
    for (std::size_t i = 0; i < 4; ++i) same.add("copy" + std::to_string(i), p.clone());
    for (double v : compute_weights(module, same)) uniform_err = std::max(uniform_err, std::abs(v - 0.25));
  }
  verdict(4, example_err < 1e-9 && sum_err < 1e-6 && uniform_err < 1e-6 && scale_err < 1e-6,
          "[1,2] -> [0.2,0.8] err " + fmt(example_err) + ", sum err " + fmt(sum_err) + ", identical-key err " +
              fmt(uniform_err) + ", q-scale err " + fmt(scale_err));
}

void criterion5() {
  ModelConfig c;
  c.layers = 12;
  c.hidden = 768;
  c.heads = 12;
  c.ffn = 3072;
  c.vocab = 30000;
  c.max_len = 512;
  const double fine = double(count_trainable(finetune_partition(c), classifier_shapes(c)));
  const auto p16 = count_trainable(prompt_tune_partition(c, 16), prompt_model_shapes(c, 16));
  const auto p67 = count_trainable(prompt_tune_partition(c, 67), prompt_model_shapes(c, 67));
  const double r16 = double(p16) / fine, r67 = double(p67) / fine;
  const double rel = std::abs(double(p67) - 1236e3) / 1236e3;
  verdict(5, r16 < 0.02 && r67 < 0.02 && p67 == 1235713 && rel < 0.01,
          "finetune " + std::to_string(std::size_t(fine)) + ", pl16 " + std::to_string(p16) + " (" +
              fmt(100 * r16) + "%), pl67 " + std::to_string(p67) + " (" + fmt(100 * r67) + "%, " +
              fmt(100 * rel) + "% from 1,236K)");
}

void criterion6() {
  const auto c = small_model();
  Rng rng(8);
  const auto bank = random_bank(5, c, 3, rng);
  const auto module = random_module(c.hidden, 9);
  const EncoderModel<float> model(c, 10, false);
  const auto dir = std::filesystem::temp_directory_path() / "peftlab_acceptance_export";
  std::filesystem::create_directories(dir);
  export_target_prompt(dir / "target.ckpt", module, bank);
  const auto exported = load_prompts(dir / "target.ckpt");
  std::filesystem::remove_all(dir);
  const auto seqs = random_sequences(100, c, rng);
  const auto batch = batch_of(seqs);
  const auto live = classify_with_mixture(model, module, bank, batch);
  const auto saved = classify(model, batch, &exported);
  double worst = 0;
  for (std::size_t i = 0; i < live.size(); ++i) worst = std::max(worst, std::abs(live[i] - saved[i]));
  verdict(6, live.size() == 100 && worst <= 1e-6,
          "exported prompt matches the live mixture on 100 inputs, max abs diff " + fmt(worst));
}

const RowResult& find_row(const MatrixResult& m, const std::string& name) {
  for (const auto& r : m.rows)
    if (r.name == name) return r;
  throw std::runtime_error("row " + name + " missing");
}

void criterion7(const MatrixResult& m, double seconds) {
  for (const auto& r : m.rows) {
    if (!r.error.empty()) {
      verdict(7, false, "row " + r.name + " failed: " + r.error);
      return;
    }
  }
  const double ft_m = mean(find_row(m, "finetune_manual").test_f1_values());
  const double pt_m = mean(find_row(m, "prompt_manual").test_f1_values());
  const double ft_a = mean(find_row(m, "finetune_auto").test_f1_values());
  const double pt_a = mean(find_row(m, "prompt_auto").test_f1_values());
  const auto mt = find_row(m, "multitask_auto").test_f1_values();
  const auto pa = find_row(m, "prompt_auto").test_f1_values();
  std::size_t wins = 0;
  for (std::size_t i = 0; i < std::min(mt.size(), pa.size()); ++i) wins += mt[i] >= pa[i];
  const bool a = pt_m >= ft_m;
  const bool b = ft_a > ft_m && pt_a > pt_m;
  const bool c = wins >= 3;
  const bool in_time = seconds < 3600;
  verdict(7, a && b && c && in_time,
          std::string("(a) prompt ") + fmt(pt_m) + (a ? " >= " : " < ") + "finetune " + fmt(ft_m) +
              " on manual; (b) automatic beats manual: finetune " + fmt(ft_a) + " vs " + fmt(ft_m) +
              ", prompt " + fmt(pt_a) + " vs " + fmt(pt_m) + (b ? " (holds)" : " (fails)") +
              "; (c) multitask >= prompt in " + std::to_string(wins) + " of " + std::to_string(mt.size()) +
              " seeds; matrix took " + fmt(seconds / 60) + " min");
}

void criterion8(const MatrixResult& m) {
  const ExperimentConfig config;
  const auto reports = generate_corpus(config.manual, config.corpus_seed);
  bool disjoint = true;
  Rng rng(11);
  for (int draw = 0; draw < 1000 && disjoint; ++draw) {
    const auto s = split_by_patient(reports, config.split, rng());
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto* part : {&s.train_patients, &s.val_patients, &s.test_patients}) {
      for (const auto& p : *part) seen.insert(p);
      total += part->size();
    }
    disjoint = seen.size() == total && s.train.size() + s.val.size() + s.test.size() == reports.size();
  }

  const auto split = split_by_patient(reports, config.split, config.corpus_seed);
  const auto up = upsample_positive(split.train, config.target, 1);
  std::size_t pos = 0;
  for (const auto& r : up) pos += r.labels.at(config.target);
  std::size_t orig_pos = 0;
  for (const auto& r : split.train) orig_pos += r.labels.at(config.target);
  const std::size_t orig_neg = split.train.size() - orig_pos;
  const bool exact = 2 * pos == up.size() && up.size() == 2 * std::max(orig_pos, orig_neg);

  double reeval = 0;
  std::size_t runs = 0;
  for (const auto& r : m.rows)
    for (const auto& x : r.runs) {
      reeval = std::max(reeval, std::abs(x.val_f1 - x.val_f1_reevaluated));
      ++runs;
    }

  const std::vector<double> d{0.02, 0.01, 0.03}, zero{0, 0, 0};
  const auto t = paired_one_tailed_ttest(d, zero);
  const bool p_ok = std::abs(t.p - 0.0371) <= 0.0005;
  verdict(8, disjoint && exact && runs > 0 && reeval <= 1e-6 && p_ok,
          std::string("splits ") + (disjoint ? "disjoint" : "OVERLAP") + " over 1000 draws; upsampling " +
              std::to_string(orig_pos) + "+" + std::to_string(orig_neg) + " -> " + std::to_string(pos) + "+" +
              std::to_string(up.size() - pos) + "; re-evaluation max diff " + fmt(reeval) + " over " +
              std::to_string(runs) + " runs; t-test p " + fmt(t.p));
}

}  // namespace

int main(int argc, char** argv) {
  const std::optional<std::filesystem::path> out =
      argc > 1 ? std::optional<std::filesystem::path>(argv[1]) : std::nullopt;
  const std::pair<int, void (*)()> quick[] = {{1, criterion1}, {2, criterion2}, {3, criterion3},
                                              {4, criterion4}, {5, criterion5}, {6, criterion6}};
  for (const auto& [id, run] : quick) {
    try {
      run();
    } catch (const std::exception& e) {
      verdict(id, false, std::string("threw: ") + e.what());
    }
  }

  MatrixResult matrix;
  try {
    const ExperimentConfig config;
    Stopwatch clock;
    if (out) std::filesystem::create_directories(*out);
    matrix = run_experiment_matrix(config, out ? &*out : nullptr, &std::cerr);
    const double seconds = clock.seconds();
    std::cerr << matrix.to_table();
    criterion7(matrix, seconds);
  } catch (const std::exception& e) {
    verdict(7, false, std::string("threw: ") + e.what());
  }
  try {
    criterion8(matrix);
  } catch (const std::exception& e) {
    verdict(8, false, std::string("threw: ") + e.what());
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
