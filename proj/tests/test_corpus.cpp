#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "peftlab/corpus.hpp"
#include "peftlab/metrics.hpp"

using namespace peftlab;

namespace {

CorpusConfig small_corpus(std::size_t patients = 60) {
  CorpusConfig c;
  c.patients = patients;
  c.positive_rate = default_positive_rates();
  return c;
}

std::set<std::string> patient_set(const std::vector<Report>& reports) {
  std::set<std::string> s;
  for (const auto& r : reports) s.insert(r.patient_id);
  return s;
}

Report labeled(std::string id, std::string patient, int liver) {
  Report r;
  r.id = std::move(id);
  r.patient_id = std::move(patient);
  r.text = "liver " + std::to_string(liver);
  r.labels["liver"] = liver;
  r.gold["liver"] = liver;
  return r;
}

// Flips the gold label of every report whose id hashes into the flip set.
class NoisyTeacher : public Teacher {
 public:
  explicit NoisyTeacher(double flip) : flip_(flip) {}
  bool knows(const std::string& organ) const override { return organ == "liver"; }
  std::vector<std::vector<double>> probabilities(std::span<const Report> reports,
                                                 std::span<const std::string>) const override {
    std::vector<std::vector<double>> out;
    for (const auto& r : reports) {
      Rng rng(derive_seed(99, r.id));
      const int g = r.gold.at("liver");
      out.push_back({double(uniform01(rng) < flip_ ? 1 - g : g)});
    }
    return out;
  }

 private:
  double flip_;
};

}  // namespace

TEST(Corpus, GenerationIsAPureFunctionOfConfigAndSeed) {
  const auto c = small_corpus();
  EXPECT_EQ(generate_corpus(c, 5), generate_corpus(c, 5));
  EXPECT_NE(generate_corpus(c, 5), generate_corpus(c, 6));
}

TEST(Corpus, HumanReportsCarryEveryOrganLabel) {
  const auto c = small_corpus();
  for (const auto& r : generate_corpus(c, 1)) {
    EXPECT_EQ(r.label_source, LabelSource::human);
    for (const auto& o : c.organs) {
      ASSERT_TRUE(r.labels.count(o)) << o;
      EXPECT_TRUE(r.labels.at(o) == 0 || r.labels.at(o) == 1);
      EXPECT_EQ(r.labels.at(o), r.gold.at(o));
    }
    EXPECT_FALSE(r.text.empty());
  }
}

TEST(Corpus, UnlabeledTierKeepsOnlyGold) {
  auto c = small_corpus();
  c.label_source = LabelSource::none;
  for (const auto& r : generate_corpus(c, 1)) {
    EXPECT_TRUE(r.labels.empty());
    EXPECT_EQ(r.gold.size(), c.organs.size());
  }
}

TEST(Corpus, ZeroRateGivesOnlyNegatives) {
  auto c = small_corpus();
  c.positive_rate["liver"] = 0.0;
  for (const auto& r : generate_corpus(c, 2)) EXPECT_EQ(r.labels.at("liver"), 0);
}

TEST(Corpus, EmpiricalLiverRateMatchesConfig) {
  auto c = small_corpus(3500);
  const double rate = c.rate_for("liver");
  const auto reports = generate_corpus(c, 3);
  ASSERT_GE(reports.size(), 10000u);
  double positives = 0;
  for (std::size_t i = 0; i < 10000; ++i) positives += reports[i].labels.at("liver");
  EXPECT_NEAR(positives / 10000.0, rate, 0.02);
}

TEST(Corpus, OrganLabelsAreNearlyUncorrelated) {
  const auto c = small_corpus(3000);
  const auto reports = generate_corpus(c, 4);
  for (const std::string other : {"lungs", "spleen", "renal"}) {
    double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (const auto& r : reports) {
      const int a = r.labels.at("liver"), b = r.labels.at(other);
      (a ? (b ? n11 : n10) : (b ? n01 : n00)) += 1;
    }
    const double phi = (n11 * n00 - n10 * n01) /
                       std::sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00));
    EXPECT_LT(std::abs(phi), 0.05) << other;
  }
}

// Even a perfect liver classifier scores at chance on another organ: F1 of an
// independent predictor with positive rate q against label rate p is
// 2pq / (p + q).
TEST(Corpus, PerfectClassifierForOneOrganIsAtChanceOnAnother) {
  const auto reports = generate_corpus(small_corpus(3000), 6);
  std::vector<double> liver;
  for (const auto& r : reports) liver.push_back(r.labels.at("liver"));
  const double q = std::accumulate(liver.begin(), liver.end(), 0.0) / double(liver.size());
  for (const std::string other : {"lungs", "spleen", "bones/soft tissues"}) {
    const auto y = labels_for(reports, other);
    const double p = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
    const auto m = compute_metrics(liver, y);
    EXPECT_NEAR(m.f1, 2 * p * q / (p + q), 0.03) << other;
  }
}

TEST(Corpus, LabelsAreNotRecoverableFromOrganMention) {
  // Mentioning the liver alone must not decide the label.
  const auto reports = generate_corpus(small_corpus(2000), 5);
  std::size_t mention_neg = 0, silent_pos = 0;
  for (const auto& r : reports) {
    const auto words = tokenize_words(r.text);
    const bool mention = std::any_of(words.begin(), words.end(),
                                     [](const std::string& w) { return w == "liver" || w == "hepatic"; });
    if (mention && r.labels.at("liver") == 0) ++mention_neg;
    if (!mention && r.labels.at("liver") == 1) ++silent_pos;
  }
  EXPECT_GT(mention_neg, 20u);
  EXPECT_GT(silent_pos, 20u);
}

TEST(Corpus, InvalidConfigIsRejected) {
  auto c = small_corpus();
  c.patients = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_corpus();
  c.positive_rate["liver"] = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_corpus();
  c.organs.push_back("liver");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Split, TenPatientsGiveTwoThreeFive) {
  std::vector<Report> reports;
  for (int p = 0; p < 10; ++p)
    for (int k = 0; k < 3; ++k) reports.push_back(labeled("r" + std::to_string(p * 3 + k), "p" + std::to_string(p), k % 2));
  const auto s = split_by_patient(reports, {}, 7);
  EXPECT_EQ(s.train_patients.size(), 2u);
  EXPECT_EQ(s.val_patients.size(), 3u);
  EXPECT_EQ(s.test_patients.size(), 5u);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), reports.size());
}

TEST(Split, PatientsNeverLeakOverManyDraws) {
  const auto reports = generate_corpus(small_corpus(80), 8);
  Rng rng(9);
  for (int draw = 0; draw < 1000; ++draw) {
    const auto s = split_by_patient(reports, {}, rng());
    const auto a = patient_set(s.train), b = patient_set(s.val), c = patient_set(s.test);
    for (const auto& p : a) ASSERT_FALSE(b.count(p) || c.count(p));
    for (const auto& p : b) ASSERT_FALSE(c.count(p));
    const double n = double(a.size() + b.size() + c.size());
    ASSERT_LE(std::abs(double(a.size()) - 0.2 * n), 1.0);
    ASSERT_LE(std::abs(double(b.size()) - 0.3 * n), 1.0);
  }
}

TEST(Split, SameSeedSameSplitAndErrors) {
  const auto reports = generate_corpus(small_corpus(), 10);
  EXPECT_EQ(split_by_patient(reports, {}, 3).train, split_by_patient(reports, {}, 3).train);
  std::vector<Report> two{labeled("a", "p1", 0), labeled("b", "p2", 1)};
  EXPECT_THROW(split_by_patient(two, {}, 1), ConfigError);
  EXPECT_THROW(split_by_patient(reports, {0.5, 0.5, 0.5}, 1), ConfigError);
}

TEST(Upsample, TenNegativesFourPositives) {
  std::vector<Report> train;
  for (int i = 0; i < 10; ++i) train.push_back(labeled("n" + std::to_string(i), "p", 0));
  for (int i = 0; i < 4; ++i) train.push_back(labeled("y" + std::to_string(i), "p", 1));
  const auto up = upsample_positive(train, "liver", 1);
  std::map<std::string, int> copies;
  int neg = 0, pos = 0;
  for (const auto& r : up) {
    ++copies[r.id];
    (r.labels.at("liver") ? pos : neg) += 1;
  }
  EXPECT_EQ(neg, 10);
  EXPECT_EQ(pos, 10);
  for (int i = 0; i < 4; ++i) {
    const int k = copies["y" + std::to_string(i)];
    EXPECT_TRUE(k == 2 || k == 3) << k;
  }
  for (int i = 0; i < 10; ++i) EXPECT_EQ(copies["n" + std::to_string(i)], 1);
}

TEST(Upsample, BalancedInputKeepsItsMultiset) {
  std::vector<Report> train{labeled("a", "p", 0), labeled("b", "p", 1), labeled("c", "p", 0), labeled("d", "p", 1)};
  auto up = upsample_positive(train, "liver", 2);
  std::vector<std::string> a, b;
  for (const auto& r : train) a.push_back(r.id);
  for (const auto& r : up) b.push_back(r.id);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Upsample, EqualizesGeneratedDataAndKeepsDistinctExamples) {
  const auto reports = generate_corpus(small_corpus(), 11);
  const auto up = upsample_positive(reports, "liver", 3);
  std::size_t pos = 0;
  std::set<std::string> before, after;
  for (const auto& r : reports) before.insert(r.id);
  for (const auto& r : up) {
    pos += r.labels.at("liver");
    after.insert(r.id);
  }
  EXPECT_EQ(2 * pos, up.size());
  EXPECT_EQ(before, after);
  EXPECT_EQ(up, upsample_positive(reports, "liver", 3));
}

TEST(Upsample, SingleClassIsAnError) {
  std::vector<Report> train{labeled("a", "p", 0), labeled("b", "p", 0)};
  EXPECT_THROW(upsample_positive(train, "liver", 1), std::invalid_argument);
}

TEST(Vocabulary, SpecialIdsAndEncoding) {
  const std::vector<std::string> texts{"Liver lesions. liver", "no new lesions"};
  const auto v = Vocabulary::build(texts, 6);
  EXPECT_EQ(v.id("[PAD]"), kPadId);
  EXPECT_EQ(v.id("[UNK]"), kUnkId);
  EXPECT_EQ(v.id("[CLS]"), kClsId);
  EXPECT_EQ(v.id("[MASK]"), kMaskId);
  EXPECT_EQ(v.size(), 6u);
  // "lesions" and "liver" are the two most frequent words.
  EXPECT_NE(v.id("liver"), kUnkId);
  EXPECT_NE(v.id("lesions"), kUnkId);
  EXPECT_EQ(v.id("new"), kUnkId);
  const auto ids = v.encode("Liver, new lesions!", 3);
  EXPECT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], kClsId);
  EXPECT_EQ(ids[1], v.id("liver"));
  EXPECT_EQ(ids[2], kUnkId);
  EXPECT_EQ(Vocabulary::from_text(v.to_text()).tokens(), v.tokens());
  EXPECT_EQ(Vocabulary::build(texts, 6).tokens(), v.tokens());
  EXPECT_THROW(Vocabulary::build(std::vector<std::string>{}, 10), std::invalid_argument);
}

TEST(Vocabulary, EverySequenceStartsWithCls) {
  const auto reports = generate_corpus(small_corpus(), 12);
  std::vector<std::string> texts;
  for (const auto& r : reports) texts.push_back(r.text);
  const auto v = Vocabulary::build(texts, 64);
  for (const auto& seq : encode_texts(v, reports, 16)) {
    ASSERT_FALSE(seq.empty());
    EXPECT_EQ(seq[0], kClsId);
    EXPECT_LE(seq.size(), 16u);
  }
}

TEST(Jsonl, RoundTrip) {
  const auto reports = generate_corpus(small_corpus(10), 13);
  const auto path = std::filesystem::temp_directory_path() / "peftlab_test_corpus.jsonl";
  write_jsonl(path, reports);
  EXPECT_EQ(read_jsonl(path), reports);
  std::filesystem::remove(path);
  EXPECT_THROW(report_from_json("{not json"), std::invalid_argument);
}

TEST(TeacherInput, PicksTheOrgansFindingsEntry) {
  Report r;
  r.text = "New hepatic metastases.";
  r.findings = "liver: multiple new lesions. lung: clear.";
  EXPECT_EQ(organ_findings(r, "lung"), "lung: clear");
  EXPECT_NE(teacher_input(r, "liver").find("impression: New hepatic metastases."), std::string::npos);
  EXPECT_EQ(organ_findings(r, "spleen"), "");
}

TEST(TeacherAnnotate, OracleReproducesGold) {
  auto c = small_corpus();
  c.label_source = LabelSource::none;
  const auto reports = generate_corpus(c, 14);
  const OracleTeacher oracle(c.organs);
  const auto out = teacher_annotate(oracle, reports, "liver");
  ASSERT_EQ(out.size(), reports.size());
  for (const auto& r : out) {
    EXPECT_EQ(r.labels.at("liver"), r.gold.at("liver"));
    EXPECT_EQ(r.label_source, LabelSource::teacher);
  }
  EXPECT_DOUBLE_EQ(label_agreement(out, "liver"), 1.0);
  EXPECT_TRUE(teacher_annotate(oracle, std::vector<Report>{}, "liver").empty());
  EXPECT_THROW(teacher_annotate(oracle, reports, "brain"), std::invalid_argument);
}

TEST(TeacherAnnotate, AgreementTracksTeacherAccuracy) {
  auto c = small_corpus(1500);
  c.label_source = LabelSource::none;
  const NoisyTeacher teacher(0.12);
  const auto test = teacher_annotate(teacher, generate_corpus(c, 15), "liver");
  const auto fresh = teacher_annotate(teacher, generate_corpus(c, 16), "liver");
  EXPECT_NEAR(label_agreement(fresh, "liver"), label_agreement(test, "liver"), 0.03);
}
