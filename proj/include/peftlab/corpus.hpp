#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/config.hpp"
#include "peftlab/encoder.hpp"

namespace peftlab {

enum class LabelSource { human, teacher, none };

std::string_view to_string(LabelSource source);
LabelSource label_source_from_string(std::string_view text);

struct Report {
  std::string id;
  std::string patient_id;
  std::string text;      // impression section, the only student input
  std::string findings;  // per-organ findings section, read only by the teacher
  std::map<std::string, int> labels;
  // Latent ground truth, kept for noise measurement. Never used for training
  // when label_source is teacher.
  std::map<std::string, int> gold;
  LabelSource label_source = LabelSource::human;

  bool operator==(const Report&) const = default;
};

std::vector<std::string> default_organs();

struct CorpusConfig {
  std::string id_prefix = "r";
  std::vector<std::string> organs = default_organs();
  std::size_t patients = 300;
  std::size_t reports_min = 1;
  std::size_t reports_max = 5;
  // Marginal positive rate per organ; organs absent here use default_rate.
  std::map<std::string, double> positive_rate;
  double default_rate = 0.1;
  // Probability that a metastatic state carries over to the next report.
  double persistence = 0.7;
  // Rate of "no new <organ> lesions" phrasing, which is uninformative about
  // whether disease persists.
  double negation_rate = 0.15;
  // Rate of hedged or indeterminate phrasing.
  double hedge_rate = 0.1;
  // Rate of follow-up impressions that only state "no interval change".
  double noninformative_rate = 0.1;
  // Rate of indeterminate statements in the findings section.
  double findings_ambiguity = 0.04;
  // Perturbs which surface synonym each organ prefers.
  std::uint64_t lexicon_seed = 7;
  // labels are filled from the latent state when human, left empty otherwise.
  LabelSource label_source = LabelSource::human;

  double rate_for(const std::string& organ) const;
  void validate() const;

  // Reads keys: id_prefix, organs, patients, reports_min, reports_max,
  // default_rate, positive_rate.<organ>, persistence, negation_rate,
  // hedge_rate, noninformative_rate, findings_ambiguity, lexicon_seed,
  // label_source. Keys are looked up under the given prefix.
  static CorpusConfig from_config(const KeyValueConfig& cfg, std::string_view prefix = "");
  std::string to_text() const;
};

// Default rates used by the experiment configuration: liver is the target
// task; other organs are less frequent.
std::map<std::string, double> default_positive_rates();

std::vector<Report> generate_corpus(const CorpusConfig& config, std::uint64_t seed);

// JSONL interchange: one object per line with id, patient_id, text, findings,
// labels, gold, label_source.
std::string report_to_json(const Report& report);
Report report_from_json(std::string_view line);
void write_jsonl(const std::filesystem::path& path, std::span<const Report> reports);
std::vector<Report> read_jsonl(const std::filesystem::path& path);

struct Split {
  std::vector<Report> train, val, test;
  std::vector<std::string> train_patients, val_patients, test_patients;
};

struct SplitRatios {
  double train = 0.2, val = 0.3, test = 0.5;
};

// Patients are shuffled and assigned whole; train and val patient counts are
// rounded from the ratios and test takes the rest.
Split split_by_patient(std::span<const Report> reports, SplitRatios ratios, std::uint64_t seed);
std::string split_manifest_json(const Split& split);

// Duplicates minority-class examples round-robin until both classes have the
// same count, then shuffles deterministically.
std::vector<Report> upsample_positive(std::span<const Report> train, const std::string& organ,
                                      std::uint64_t seed);

// Reports that carry a label for the organ.
std::vector<Report> with_label(std::span<const Report> reports, const std::string& organ);
std::vector<int> labels_for(std::span<const Report> reports, const std::string& organ);

// Lower-cased words split on whitespace and punctuation.
std::vector<std::string> tokenize_words(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kMask = "[MASK]";

  Vocabulary();
  // Keeps the max_size - 4 most frequent words; ties break alphabetically.
  static Vocabulary build(std::span<const std::string> texts, std::size_t max_size);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(std::string_view word) const;
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // [CLS] followed by word ids, truncated to max_len.
  std::vector<std::int32_t> encode(std::string_view text, std::size_t max_len) const;

  std::string to_text() const;  // one token per line
  static Vocabulary from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t, std::less<>> index_;
};

std::vector<std::vector<std::int32_t>> encode_texts(const Vocabulary& vocab,
                                                    std::span<const Report> reports,
                                                    std::size_t max_len);

// The "<organ>: <finding>" entry of the findings section, or "" when the
// organ is not listed.
std::string organ_findings(const Report& report, const std::string& organ);

// The organ's findings entry followed by the impression, as read by the
// teacher.
std::string teacher_input(const Report& report, const std::string& organ);

class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual bool knows(const std::string& organ) const = 0;
  // Probabilities per report, one row per report and one column per organ.
  virtual std::vector<std::vector<double>> probabilities(std::span<const Report> reports,
                                                         std::span<const std::string> organs) const = 0;
};

// Returns the gold labels as probabilities 0 or 1.
class OracleTeacher : public Teacher {
 public:
  explicit OracleTeacher(std::vector<std::string> organs) : organs_(organs.begin(), organs.end()) {}
  bool knows(const std::string& organ) const override { return organs_.count(organ) > 0; }
  std::vector<std::vector<double>> probabilities(std::span<const Report> reports,
                                                 std::span<const std::string> organs) const override;

 private:
  std::set<std::string> organs_;
};

// Labels each report with 1 iff the teacher probability is >= 0.5 and marks
// it as teacher-labeled. Gold labels are carried over untouched.
std::vector<Report> teacher_annotate(const Teacher& teacher, std::span<const Report> reports,
                                     const std::string& organ);
std::vector<Report> teacher_annotate_all(const Teacher& teacher, std::span<const Report> reports,
                                         std::span<const std::string> organs);

// Fraction of reports whose label agrees with gold for the organ.
double label_agreement(std::span<const Report> reports, const std::string& organ);

}  // namespace peftlab
