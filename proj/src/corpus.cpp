#include "peftlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "peftlab/checkpoint.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

using Json = nlohmann::json;

std::string_view to_string(LabelSource source) {
  switch (source) {
    case LabelSource::human: return "human";
    case LabelSource::teacher: return "teacher";
    case LabelSource::none: return "none";
  }
  return "none";
}

LabelSource label_source_from_string(std::string_view text) {
  if (text == "human") return LabelSource::human;
  if (text == "teacher") return LabelSource::teacher;
  if (text == "none") return LabelSource::none;
  throw ConfigError("unknown label_source '" + std::string(text) + "'");
}

std::vector<std::string> default_organs() {
  return {"liver",           "lungs",          "pleura",
          "thoracic nodes",  "spleen",         "adrenal glands",
          "renal",           "abdominopelvic nodes", "pelvic organs",
          "bowel/peritoneum", "bones/soft tissues", "pancreas",
          "biliary"};
}

std::map<std::string, double> default_positive_rates() {
  return {{"liver", 0.3},
          {"lungs", 0.25},
          {"pleura", 0.1},
          {"thoracic nodes", 0.2},
          {"spleen", 0.05},
          {"adrenal glands", 0.08},
          {"renal", 0.05},
          {"abdominopelvic nodes", 0.15},
          {"pelvic organs", 0.05},
          {"bowel/peritoneum", 0.1},
          {"bones/soft tissues", 0.2},
          {"pancreas", 0.05},
          {"biliary", 0.05}};
}

// ---------------------------------------------------------------------------
// CorpusConfig

double CorpusConfig::rate_for(const std::string& organ) const {
  auto it = positive_rate.find(organ);
  return it == positive_rate.end() ? default_rate : it->second;
}

void CorpusConfig::validate() const {
  if (organs.empty()) throw ConfigError("corpus: organs must not be empty");
  std::set<std::string> seen;
  for (const auto& o : organs) {
    if (o.empty()) throw ConfigError("corpus: empty organ name");
    if (!seen.insert(o).second) throw ConfigError("corpus: duplicate organ '" + o + "'");
  }
  if (patients < 2) throw ConfigError("corpus: patients must be >= 2");
  if (reports_min < 1 || reports_max < reports_min) {
    throw ConfigError("corpus: reports_min/reports_max must satisfy 1 <= min <= max");
  }
  auto unit = [](double v, const std::string& name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("corpus: " + name + " must lie in [0, 1]");
  };
  for (const auto& o : organs) {
    const double r = rate_for(o);
    if (!(r >= 0.0 && r < 1.0)) {
      throw ConfigError("corpus: positive_rate." + o + " must lie in [0, 1)");
    }
  }
  for (const auto& [o, r] : positive_rate) {
    if (!seen.count(o)) throw ConfigError("corpus: positive_rate given for unknown organ '" + o + "'");
  }
  unit(persistence, "persistence");
  unit(negation_rate, "negation_rate");
  unit(hedge_rate, "hedge_rate");
  unit(noninformative_rate, "noninformative_rate");
  unit(findings_ambiguity, "findings_ambiguity");
}

CorpusConfig CorpusConfig::from_config(const KeyValueConfig& cfg, std::string_view prefix) {
  const std::string p(prefix);
  CorpusConfig c;
  c.id_prefix = cfg.get_string(p + "id_prefix", c.id_prefix);
  if (cfg.has(p + "organs")) c.organs = cfg.get_list(p + "organs");
  c.patients = cfg.get_uint(p + "patients", c.patients);
  c.reports_min = cfg.get_uint(p + "reports_min", c.reports_min);
  c.reports_max = cfg.get_uint(p + "reports_max", c.reports_max);
  c.default_rate = cfg.get_double(p + "default_rate", c.default_rate);
  c.positive_rate = default_positive_rates();
  for (auto it = c.positive_rate.begin(); it != c.positive_rate.end();) {
    if (std::find(c.organs.begin(), c.organs.end(), it->first) == c.organs.end()) {
      it = c.positive_rate.erase(it);
    } else {
      ++it;
    }
  }
  const std::string rate_prefix = p + "positive_rate.";
  for (const auto& [k, v] : cfg.values()) {
    if (k.rfind(rate_prefix, 0) == 0) {
      c.positive_rate[k.substr(rate_prefix.size())] = cfg.get_double(k, 0.0);
    }
  }
  c.persistence = cfg.get_double(p + "persistence", c.persistence);
  c.negation_rate = cfg.get_double(p + "negation_rate", c.negation_rate);
  c.hedge_rate = cfg.get_double(p + "hedge_rate", c.hedge_rate);
  c.noninformative_rate = cfg.get_double(p + "noninformative_rate", c.noninformative_rate);
  c.findings_ambiguity = cfg.get_double(p + "findings_ambiguity", c.findings_ambiguity);
  c.lexicon_seed = cfg.get_uint(p + "lexicon_seed", c.lexicon_seed);
  c.label_source = label_source_from_string(cfg.get_string(p + "label_source", "human"));
  c.validate();
  return c;
}

std::string CorpusConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "id_prefix=" << id_prefix << "\norgans=";
  for (std::size_t i = 0; i < organs.size(); ++i) os << (i ? "," : "") << organs[i];
  os << "\npatients=" << patients << "\nreports_min=" << reports_min
     << "\nreports_max=" << reports_max << "\ndefault_rate=" << default_rate << "\n";
  for (const auto& o : organs) os << "positive_rate." << o << "=" << rate_for(o) << "\n";
  os << "persistence=" << persistence << "\nnegation_rate=" << negation_rate
     << "\nhedge_rate=" << hedge_rate << "\nnoninformative_rate=" << noninformative_rate
     << "\nfindings_ambiguity=" << findings_ambiguity << "\nlexicon_seed=" << lexicon_seed
     << "\nlabel_source=" << to_string(label_source) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Generator

namespace {

using Phrases = std::vector<std::string_view>;

struct Lexicon {
  std::vector<std::string> adjectives;
  std::vector<double> weights;
};

std::vector<std::string> organ_adjectives(const std::string& organ) {
  static const std::map<std::string, std::vector<std::string>> table = {
      {"liver", {"hepatic", "liver"}},
      {"lungs", {"pulmonary", "lung"}},
      {"pleura", {"pleural"}},
      {"thoracic nodes", {"mediastinal nodal", "hilar nodal", "thoracic nodal"}},
      {"spleen", {"splenic"}},
      {"adrenal glands", {"adrenal"}},
      {"renal", {"renal", "kidney"}},
      {"abdominopelvic nodes", {"retroperitoneal nodal", "mesenteric nodal", "pelvic nodal"}},
      {"pelvic organs", {"adnexal", "uterine", "bladder"}},
      {"bowel/peritoneum", {"peritoneal", "omental", "bowel"}},
      {"bones/soft tissues", {"osseous", "bone", "soft tissue"}},
      {"pancreas", {"pancreatic"}},
      {"biliary", {"biliary", "bile duct"}},
  };
  auto it = table.find(organ);
  if (it != table.end()) return it->second;
  return {organ};
}

Lexicon make_lexicon(const std::string& organ, std::uint64_t lexicon_seed) {
  Lexicon lex;
  lex.adjectives = organ_adjectives(organ);
  Rng rng(derive_seed(lexicon_seed, organ));
  for (std::size_t i = 0; i < lex.adjectives.size(); ++i) lex.weights.push_back(0.5 + uniform01(rng));
  return lex;
}

std::string_view pick(Rng& rng, const Phrases& phrases) {
  return phrases[uniform_index(rng, phrases.size())];
}

const std::string& pick_weighted(Rng& rng, const Lexicon& lex) {
  const double total = std::accumulate(lex.weights.begin(), lex.weights.end(), 0.0);
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < lex.weights.size(); ++i) {
    if (u < lex.weights[i]) return lex.adjectives[i];
    u -= lex.weights[i];
  }
  return lex.adjectives.back();
}

std::string fill(std::string_view pattern, const std::string& adjective) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == '@') {
      out += adjective;
    } else {
      out.push_back(pattern[i]);
    }
  }
  return out;
}

// '@' marks the organ adjective.
const Phrases kOnset = {"new @ metastases", "new @ lesions concerning for metastases",
                        "interval development of @ metastatic disease",
                        "new @ lesions compatible with metastatic disease"};
const Phrases kOnsetHedged = {"new indeterminate @ lesion, metastasis not excluded",
                              "new subtle @ lesion, possibly metastatic"};
const Phrases kStable = {"stable @ metastases", "@ metastases are unchanged",
                         "unchanged @ metastatic disease"};
const Phrases kProgress = {"increasing @ metastases", "enlarging @ lesions consistent with progression",
                           "progression of @ metastatic disease"};
const Phrases kResponse = {"decreased size of @ metastases", "slightly smaller @ metastases",
                           "partial response of @ metastatic disease"};
const Phrases kNoNew = {"no new @ lesions", "no evidence of new @ disease"};
const Phrases kSimilar = {"@ lesions are not significantly changed", "similar appearance of @ lesions"};
const Phrases kResolved = {"resolved @ metastases", "no residual @ metastatic disease",
                           "complete response of @ metastases"};
const Phrases kPostop = {"postsurgical changes of @ resection without evidence of recurrence",
                         "postoperative change in the @ bed without residual disease"};
const Phrases kNoEvidence = {"no evidence of @ metastasis", "no @ metastatic disease"};
const Phrases kBenign = {"stable benign @ cyst", "stable @ hemangioma", "unchanged @ granuloma"};
const Phrases kIndeterminate = {"stable indeterminate @ hypodensity",
                                "@ lesion too small to characterize, likely benign"};
const Phrases kInitialPositive = {"@ metastases", "multiple @ lesions compatible with metastases"};
const Phrases kInitialHedged = {"@ lesions suspicious for metastatic disease"};
const Phrases kNonInformative = {"no interval change", "stable examination since prior",
                                 "no significant change compared to prior study",
                                 "no new sites of disease"};
const Phrases kDistractors = {"status post chemotherapy", "cholelithiasis",
                              "atherosclerotic calcifications", "small hiatal hernia",
                              "degenerative changes of the spine", "trace ascites",
                              "postsurgical changes of the abdomen"};
const Phrases kEmpty = {"no acute findings in the chest, abdomen and pelvis",
                        "no evidence of metastatic disease"};
const Phrases kFindingPositive = {"metastases", "lesions compatible with metastases",
                                  "metastatic disease"};
const Phrases kFindingNegative = {"unremarkable", "normal", "no suspicious lesion", "simple cyst"};
const Phrases kFindingAmbiguous = {"indeterminate lesion", "subcentimeter hypodensity"};

struct Choice {
  double weight;
  const Phrases* phrases;  // null means the organ is not mentioned
};

std::string choose(Rng& rng, const std::vector<Choice>& choices, const std::string& adjective) {
  double total = 0;
  for (const auto& c : choices) total += c.weight;
  double u = uniform01(rng) * total;
  const Phrases* chosen = choices.back().phrases;
  for (const auto& c : choices) {
    if (u < c.weight) {
      chosen = c.phrases;
      break;
    }
    u -= c.weight;
  }
  if (!chosen) return {};
  return fill(pick(rng, *chosen), adjective);
}

// Empty string means the organ is not mentioned.
std::string organ_statement(Rng& rng, const CorpusConfig& cfg, const std::string& adjective,
                            bool first, int prev, int cur) {
  const double neg = cfg.negation_rate, hedge = cfg.hedge_rate;
  if (first) {
    if (cur) return choose(rng, {{1.0 - hedge, &kInitialPositive}, {hedge, &kInitialHedged}}, adjective);
    return choose(rng, {{0.93, nullptr}, {0.03, &kNoEvidence}, {0.04 * (1 - hedge), &kBenign},
                        {0.04 * hedge, &kIndeterminate}},
                  adjective);
  }
  if (!prev && cur) return choose(rng, {{1.0 - hedge, &kOnset}, {hedge, &kOnsetHedged}}, adjective);
  if (prev && cur) {
    return choose(rng, {{0.35, &kStable}, {0.2, &kProgress}, {0.15, &kResponse}, {neg, &kNoNew},
                        {hedge, &kSimilar}, {0.15, nullptr}},
                  adjective);
  }
  if (prev && !cur) {
    return choose(rng, {{0.5, &kResolved}, {0.25, &kPostop}, {0.5 * neg, &kNoNew}, {0.15, nullptr}},
                  adjective);
  }
  return choose(rng, {{0.92, nullptr}, {0.025, &kNoEvidence}, {0.025, &kBenign},
                      {0.2 * neg, &kNoNew}, {0.2 * hedge, &kIndeterminate}},
                adjective);
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string two_digits(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

void generate_patient(const CorpusConfig& cfg, const std::vector<Lexicon>& lexicons,
                      std::uint64_t seed, std::size_t index, std::vector<Report>& out) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
  const std::size_t n_reports =
      cfg.reports_min + uniform_index(rng, cfg.reports_max - cfg.reports_min + 1);
  std::ostringstream pid;
  pid << cfg.id_prefix << "-p" << index;
  const std::string patient_id = pid.str();

  const std::size_t n_organs = cfg.organs.size();
  std::vector<int> state(n_organs, 0);
  int year = 2009 + static_cast<int>(uniform_index(rng, 12));
  int month = 1 + static_cast<int>(uniform_index(rng, 12));
  int day = 1 + static_cast<int>(uniform_index(rng, 28));

  for (std::size_t r = 0; r < n_reports; ++r) {
    const bool first = r == 0;
    std::vector<int> prev = state;
    // Two-state chain whose stationary distribution is Bernoulli(rate): the
    // marginal positive rate is exact at every report.
    for (std::size_t o = 0; o < n_organs; ++o) {
      const double pi = cfg.rate_for(cfg.organs[o]);
      const double p1 = first ? pi
                              : (prev[o] ? cfg.persistence + (1.0 - cfg.persistence) * pi
                                         : (1.0 - cfg.persistence) * pi);
      state[o] = uniform01(rng) < p1 ? 1 : 0;
    }

    std::vector<std::string> statements;
    for (std::size_t o = 0; o < n_organs; ++o) {
      const auto& adjective = pick_weighted(rng, lexicons[o]);
      auto s = organ_statement(rng, cfg, adjective, first, prev[o], state[o]);
      if (!s.empty()) statements.push_back(std::move(s));
    }
    shuffle_in_place(std::span<std::string>(statements), rng);
    if (statements.size() > 4) statements.resize(4);
    if (!first && uniform01(rng) < cfg.noninformative_rate) {
      statements = {std::string(pick(rng, kNonInformative))};
    }
    if (uniform01(rng) < 0.35) {
      statements.insert(statements.begin() + static_cast<std::ptrdiff_t>(
                                                  uniform_index(rng, statements.size() + 1)),
                        std::string(pick(rng, kDistractors)));
    }
    if (statements.empty()) statements.push_back(std::string(pick(rng, kEmpty)));

    std::string text;
    if (!first && uniform01(rng) < 0.5) {
      text = "Compared to " + two_digits(month) + "/" + two_digits(day) + "/" +
             std::to_string(year) + ": ";
    }
    const bool enumerate = uniform01(rng) < 0.6;
    for (std::size_t i = 0; i < statements.size(); ++i) {
      if (i) text += " ";
      if (enumerate) text += std::to_string(i + 1) + ". ";
      text += capitalize(statements[i]) + ".";
    }

    std::string findings;
    for (std::size_t o = 0; o < n_organs; ++o) {
      std::string_view f;
      if (uniform01(rng) < cfg.findings_ambiguity) {
        f = pick(rng, kFindingAmbiguous);
      } else {
        f = pick(rng, state[o] ? kFindingPositive : kFindingNegative);
      }
      if (o) findings += " ";
      findings += cfg.organs[o] + ": " + std::string(f) + ".";
    }

    Report rep;
    rep.id = patient_id + "-r" + std::to_string(r);
    rep.patient_id = patient_id;
    rep.text = std::move(text);
    rep.findings = std::move(findings);
    for (std::size_t o = 0; o < n_organs; ++o) rep.gold[cfg.organs[o]] = state[o];
    if (cfg.label_source == LabelSource::human) rep.labels = rep.gold;
    rep.label_source = cfg.label_source;
    out.push_back(std::move(rep));

    month += 2 + static_cast<int>(uniform_index(rng, 4));
    if (month > 12) {
      month -= 12;
      ++year;
    }
  }
}

}  // namespace

std::vector<Report> generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  std::vector<Lexicon> lexicons;
  for (const auto& o : config.organs) lexicons.push_back(make_lexicon(o, config.lexicon_seed));
  std::vector<Report> out;
  for (std::size_t p = 0; p < config.patients; ++p) generate_patient(config, lexicons, seed, p, out);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string report_to_json(const Report& report) {
  Json j;
  j["id"] = report.id;
  j["patient_id"] = report.patient_id;
  j["text"] = report.text;
  j["findings"] = report.findings;
  j["labels"] = report.labels;
  j["gold"] = report.gold;
  j["label_source"] = std::string(to_string(report.label_source));
  return j.dump();
}

Report report_from_json(std::string_view line) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("corpus: malformed JSON line: ") + e.what());
  }
  try {
    Report r;
    r.id = j.at("id").get<std::string>();
    r.patient_id = j.at("patient_id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    if (j.contains("findings")) r.findings = j["findings"].get<std::string>();
    r.labels = j.at("labels").get<std::map<std::string, int>>();
    if (j.contains("gold")) r.gold = j["gold"].get<std::map<std::string, int>>();
    r.label_source = label_source_from_string(j.at("label_source").get<std::string>());
    for (const auto& [k, v] : r.labels) {
      if (v != 0 && v != 1) throw ConfigError("corpus: label for " + k + " in " + r.id + " is not 0/1");
    }
    return r;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("corpus: bad report object: ") + e.what());
  }
}

void write_jsonl(const std::filesystem::path& path, std::span<const Report> reports) {
  std::string out;
  for (const auto& r : reports) {
    out += report_to_json(r);
    out.push_back('\n');
  }
  write_file(path, out);
}

std::vector<Report> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read corpus file " + path.string());
  std::vector<Report> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(report_from_json(line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits and sampling

Split split_by_patient(std::span<const Report> reports, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split: ratios must be nonnegative and sum to 1");
  }
  std::set<std::string> unique;
  for (const auto& r : reports) unique.insert(r.patient_id);
  if (unique.size() < 3) {
    throw ConfigError("split: need at least 3 patients, got " + std::to_string(unique.size()));
  }
  std::vector<std::string> patients(unique.begin(), unique.end());
  Rng rng(derive_seed(seed, "split"));
  shuffle_in_place(std::span<std::string>(patients), rng);
  const std::size_t n = patients.size();
  std::size_t n_train = static_cast<std::size_t>(std::llround(ratios.train * double(n)));
  std::size_t n_val = static_cast<std::size_t>(std::llround(ratios.val * double(n)));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);

  Split s;
  s.train_patients.assign(patients.begin(), patients.begin() + n_train);
  s.val_patients.assign(patients.begin() + n_train, patients.begin() + n_train + n_val);
  s.test_patients.assign(patients.begin() + n_train + n_val, patients.end());
  std::map<std::string, int> where;
  for (const auto& p : s.train_patients) where[p] = 0;
  for (const auto& p : s.val_patients) where[p] = 1;
  for (const auto& p : s.test_patients) where[p] = 2;
  for (const auto& r : reports) {
    switch (where.at(r.patient_id)) {
      case 0: s.train.push_back(r); break;
      case 1: s.val.push_back(r); break;
      default: s.test.push_back(r); break;
    }
  }
  return s;
}

std::string split_manifest_json(const Split& split) {
  Json j;
  j["train_patients"] = split.train_patients;
  j["val_patients"] = split.val_patients;
  j["test_patients"] = split.test_patients;
  j["train_reports"] = split.train.size();
  j["val_reports"] = split.val.size();
  j["test_reports"] = split.test.size();
  return j.dump(2);
}

std::vector<Report> with_label(std::span<const Report> reports, const std::string& organ) {
  std::vector<Report> out;
  for (const auto& r : reports)
    if (r.labels.count(organ)) out.push_back(r);
  return out;
}

std::vector<int> labels_for(std::span<const Report> reports, const std::string& organ) {
  std::vector<int> out;
  out.reserve(reports.size());
  for (const auto& r : reports) {
    auto it = r.labels.find(organ);
    if (it == r.labels.end()) {
      throw ConfigError("report " + r.id + " has no label for organ '" + organ + "'");
    }
    out.push_back(it->second);
  }
  return out;
}

std::vector<Report> upsample_positive(std::span<const Report> train, const std::string& organ,
                                      std::uint64_t seed) {
  const auto labels = labels_for(train, organ);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) {
    throw std::invalid_argument("upsample: training data for '" + organ +
                                "' contains a single class");
  }
  const auto& minority = pos.size() <= neg.size() ? pos : neg;
  const std::size_t target = std::max(pos.size(), neg.size());
  std::vector<Report> out(train.begin(), train.end());
  for (std::size_t k = 0; minority.size() + k < target; ++k) {
    out.push_back(train[minority[k % minority.size()]]);
  }
  Rng rng(derive_seed(seed, "upsample"));
  shuffle_in_place(std::span<Report>(out), rng);
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary() {
  for (auto t : {kPad, kUnk, kCls, kMask}) {
    index_.emplace(std::string(t), static_cast<std::int32_t>(tokens_.size()));
    tokens_.emplace_back(t);
  }
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 4 || tokens[kPadId] != kPad || tokens[kUnkId] != kUnk ||
      tokens[kClsId] != kCls || tokens[kMaskId] != kMask) {
    throw ConfigError("vocabulary: the first four tokens must be [PAD] [UNK] [CLS] [MASK]");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.index_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw ConfigError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t max_size) {
  if (texts.empty()) throw std::invalid_argument("vocabulary: empty corpus");
  if (max_size < 4) throw ConfigError("vocabulary: max size must be >= 4");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts)
    for (auto& w : tokenize_words(t)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = {std::string(kPad), std::string(kUnk), std::string(kCls),
                                     std::string(kMask)};
  for (const auto& [w, c] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(w);
  }
  return from_tokens(std::move(tokens));
}

std::int32_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(std::string_view text, std::size_t max_len) const {
  std::vector<std::int32_t> out = {kClsId};
  for (const auto& w : tokenize_words(text)) {
    if (out.size() >= max_len) break;
    out.push_back(id(w));
  }
  return out;
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (const auto& t : tokens_) out += t + "\n";
  return out;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  std::vector<std::string> tokens;
  for (auto& line : split(text, '\n'))
    if (!line.empty()) tokens.push_back(std::move(line));
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const { write_file(path, to_text()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return from_text(read_file(path));
}

std::vector<std::vector<std::int32_t>> encode_texts(const Vocabulary& vocab,
                                                    std::span<const Report> reports,
                                                    std::size_t max_len) {
  std::vector<std::vector<std::int32_t>> out;
  out.reserve(reports.size());
  for (const auto& r : reports) out.push_back(vocab.encode(r.text, max_len));
  return out;
}

std::string organ_findings(const Report& report, const std::string& organ) {
  const std::string key = organ + ": ";
  const auto& f = report.findings;
  for (std::size_t pos = f.find(key); pos != std::string::npos; pos = f.find(key, pos + 1)) {
    if (pos == 0 || f[pos - 1] == ' ') {
      const auto end = f.find('.', pos);
      return f.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    }
  }
  return {};
}

std::string teacher_input(const Report& report, const std::string& organ) {
  return organ_findings(report, organ) + " . impression: " + report.text;
}

// ---------------------------------------------------------------------------
// Teacher annotation

std::vector<std::vector<double>> OracleTeacher::probabilities(
    std::span<const Report> reports, std::span<const std::string> organs) const {
  std::vector<std::vector<double>> out;
  for (const auto& r : reports) {
    std::vector<double> row;
    for (const auto& o : organs) {
      auto it = r.gold.find(o);
      if (it == r.gold.end()) throw std::invalid_argument("oracle teacher: no gold label for " + o);
      row.push_back(it->second ? 1.0 : 0.0);
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<Report> teacher_annotate_all(const Teacher& teacher, std::span<const Report> reports,
                                         std::span<const std::string> organs) {
  for (const auto& o : organs) {
    if (!teacher.knows(o)) throw std::invalid_argument("teacher: unknown organ '" + o + "'");
  }
  std::vector<Report> out;
  if (reports.empty()) return out;
  const auto probs = teacher.probabilities(reports, organs);
  out.reserve(reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    Report r = reports[i];
    r.labels.clear();
    for (std::size_t k = 0; k < organs.size(); ++k) r.labels[organs[k]] = probs[i][k] >= 0.5 ? 1 : 0;
    r.label_source = LabelSource::teacher;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Report> teacher_annotate(const Teacher& teacher, std::span<const Report> reports,
                                     const std::string& organ) {
  const std::string organs[] = {organ};
  return teacher_annotate_all(teacher, reports, organs);
}

double label_agreement(std::span<const Report> reports, const std::string& organ) {
  std::size_t agree = 0, total = 0;
  for (const auto& r : reports) {
    auto l = r.labels.find(organ);
    auto g = r.gold.find(organ);
    if (l == r.labels.end() || g == r.gold.end()) continue;
    ++total;
    agree += l->second == g->second;
  }
  return total ? double(agree) / double(total) : 0.0;
}

}  // namespace peftlab
