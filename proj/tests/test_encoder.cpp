#include <cmath>
#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "peftlab/checkpoint.hpp"
#include "peftlab/diagnostics.hpp"
#include "peftlab/encoder.hpp"
#include "peftlab/pretrain.hpp"

using namespace peftlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab = 30;
  c.max_len = 12;
  return c;
}

std::vector<std::vector<std::int32_t>> random_sequences(std::size_t n, std::size_t max_len,
                                                        std::size_t vocab, Rng& rng) {
  std::vector<std::vector<std::int32_t>> seqs(n);
  for (auto& s : seqs) {
    const std::size_t len = 2 + uniform_index(rng, max_len - 1);
    s.push_back(kClsId);
    while (s.size() < len) s.push_back(static_cast<std::int32_t>(4 + uniform_index(rng, vocab - 4)));
  }
  return seqs;
}

TokenBatch batch_of(const std::vector<std::vector<std::int32_t>>& seqs) {
  return TokenBatch::from_sequences(std::span<const std::vector<std::int32_t>>(seqs));
}

std::vector<float> to_vec(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

// Reads the container layout byte by byte, independently of the library.
struct RawEntry {
  std::string name;
  std::vector<std::uint32_t> axes;
  std::vector<float> values;
};
struct RawCheckpoint {
  std::string magic, metadata;
  std::vector<RawEntry> entries;
};

std::uint32_t read_u32(const std::string& bytes, std::size_t& pos) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  pos += 4;
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

RawCheckpoint parse_raw(const std::string& bytes) {
  RawCheckpoint c;
  std::size_t pos = 9;
  c.magic = bytes.substr(0, 9);
  const auto meta_len = read_u32(bytes, pos);
  c.metadata = bytes.substr(pos, meta_len);
  pos += meta_len;
  while (pos < bytes.size()) {
    RawEntry e;
    const auto name_len = read_u32(bytes, pos);
    e.name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = read_u32(bytes, pos);
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      e.axes.push_back(read_u32(bytes, pos));
      count *= e.axes.back();
    }
    e.values.resize(count);
    for (auto& v : e.values) {
      const std::uint32_t bits = read_u32(bytes, pos);
      std::memcpy(&v, &bits, 4);
    }
    c.entries.push_back(std::move(e));
  }
  return c;
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.max_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ModelConfig::from_text(tiny_config().to_text()), tiny_config());
}

TEST(Encoder, ParameterNamesAreUniqueAndDotted) {
  EncoderModel<float> m(tiny_config(), 1);
  std::set<std::string> names;
  for (const auto& it : m.params().items()) EXPECT_TRUE(names.insert(it.name).second) << it.name;
  EXPECT_TRUE(names.count("layer.1.attn.wq"));
  EXPECT_TRUE(names.count("head.cls.weight"));
  EXPECT_TRUE(names.count("head.mlm.weight"));
}

TEST(Encoder, ZeroLengthPromptEqualsNoPrompt) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(4);
  const auto batch = batch_of(random_sequences(8, cfg.max_len, cfg.vocab, rng));
  const auto empty = PromptSet<float>::zeros(cfg.layers, 0, cfg.hidden);
  Tape<float> tape(false);
  const auto a = to_vec(encode(tape, m, batch));
  const auto b = to_vec(encode(tape, m, batch, &empty));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Encoder, PromptsKeepSequenceLengthAndWidenAttentionRows) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(5);
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5, 6, 7, 8}};
  const auto batch = batch_of(seqs);
  for (std::size_t pl : {0u, 1u, 3u, 7u}) {
    const auto prompts = PromptSet<float>::random(cfg.layers, pl, cfg.hidden, rng);
    Tape<float> tape(false);
    std::vector<AttentionTrace<float>> traces;
    const auto h = encode(tape, m, batch, &prompts, {}, &traces);
    EXPECT_EQ(h.shape(), (Shape{1, 5, cfg.hidden}));
    ASSERT_EQ(traces.size(), cfg.layers);
    EXPECT_EQ(traces[0].weights.shape(), (Shape{cfg.heads, 5, pl + 5}));
  }
}

TEST(Encoder, AttentionRowsSumToOneAndIgnorePadding) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(6);
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5, 6, 7, 8, 9}, {kClsId, 4, 5}};
  const auto batch = batch_of(seqs);
  const std::size_t pl = 3, s = batch.length, keys = pl + s;
  const auto prompts = PromptSet<float>::random(cfg.layers, pl, cfg.hidden, rng, 0.5);
  Tape<float> tape(false);
  std::vector<AttentionTrace<float>> traces;
  encode(tape, m, batch, &prompts, {}, &traces);
  for (const auto& tr : traces) {
    const auto w = tr.weights.data();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t h = 0; h < cfg.heads; ++h)
        for (std::size_t q = 0; q < s; ++q) {
          const float* row = w.data() + ((b * cfg.heads + h) * s + q) * keys;
          double sum = 0;
          for (std::size_t k = 0; k < keys; ++k) sum += row[k];
          EXPECT_NEAR(sum, 1.0, 1e-6);
          for (std::size_t k = 0; k < pl; ++k) EXPECT_GT(row[k], 0.0f);
          for (std::size_t k = 0; k < s; ++k)
            if (!batch.mask[b * s + k]) EXPECT_EQ(row[pl + k], 0.0f);
        }
  }
}

TEST(Encoder, IdenticalValuesGiveThatValueAsContext) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(8);
  std::vector<float> u(cfg.hidden);
  fill_normal(std::span<float>(u), rng, 1.0);
  // Token values are W_v h + b_v = u when W_v is zero.
  auto layer = m.layer(0);
  std::fill(layer.wv.data().begin(), layer.wv.data().end(), 0.0f);
  std::copy(u.begin(), u.end(), layer.bv.data().begin());
  const std::size_t pl = 4;
  auto pk = Tensor<float>({pl, cfg.hidden});
  fill_normal(pk.data(), rng, 1.0);
  auto pv = Tensor<float>({pl, cfg.hidden});
  for (std::size_t i = 0; i < pl; ++i) std::copy(u.begin(), u.end(), pv.data().begin() + i * cfg.hidden);
  Tensor<float> h({1, 5, cfg.hidden});
  fill_normal(h.data(), rng, 1.0);
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5, 6, 7, 8}};
  const auto batch = batch_of(seqs);
  Tape<float> tape(false);
  AttentionTrace<float> trace;
  attention_with_prompts(tape, h, layer, &pk, &pv, batch, cfg.heads, &trace);
  for (std::size_t pos = 0; pos < 5; ++pos)
    for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_NEAR(trace.context.data()[pos * cfg.hidden + c], u[c], 1e-5);
}

TEST(Encoder, PromptHiddenSizeMismatchIsRejected) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(1);
  const auto wrong = PromptSet<float>::random(cfg.layers, 2, cfg.hidden + 2, rng);
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5}};
  Tape<float> tape(false);
  EXPECT_THROW(encode(tape, m, batch_of(seqs), &wrong), ShapeError);
}

TEST(Encoder, LastLayerKeyPromptChangesOutput) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(9);
  const auto batch = batch_of(random_sequences(4, cfg.max_len, cfg.vocab, rng));
  const auto prompts = PromptSet<float>::random(cfg.layers, 3, cfg.hidden, rng, 0.5);
  auto changed = prompts.clone();
  const std::size_t last = (cfg.layers - 1) * 3 * cfg.hidden;
  for (std::size_t i = 0; i < 3 * cfg.hidden; ++i) changed.key.data()[last + i] += 1.0f;
  Tape<float> tape(false);
  const auto a = to_vec(encode(tape, m, batch, &prompts));
  const auto b = to_vec(encode(tape, m, batch, &changed));
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a[i] - b[i])));
  EXPECT_GT(diff, 0.0);
}

TEST(Encoder, BatchPermutationPermutesOutputs) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  Rng rng(10);
  auto seqs = random_sequences(5, cfg.max_len, cfg.vocab, rng);
  for (auto& s : seqs) s.resize(6, 5);  // same length, so padding does not move
  auto reversed = seqs;
  std::reverse(reversed.begin(), reversed.end());
  const auto a = classify(m, batch_of(seqs));
  const auto b = classify(m, batch_of(reversed));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[4 - i], 1e-6);
}

TEST(Encoder, RejectsTooLongSequencesAndUnknownIds) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 3);
  std::vector<std::vector<std::int32_t>> long_seq = {std::vector<std::int32_t>(cfg.max_len + 1, 5)};
  std::vector<std::vector<std::int32_t>> bad_id = {{kClsId, static_cast<std::int32_t>(cfg.vocab)}};
  EXPECT_THROW(classify(m, batch_of(long_seq)), std::invalid_argument);
  EXPECT_THROW(classify(m, batch_of(bad_id)), std::invalid_argument);
}

TEST(Classify, ProbabilitiesAreInOpenUnitIntervalAndDeterministic) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 11);
  Rng rng(12);
  const auto batch = batch_of(random_sequences(16, cfg.max_len, cfg.vocab, rng));
  const auto p = classify(m, batch);
  for (double v : p) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(p, classify(m, batch));
}

TEST(Classify, ZeroHeadGivesOneHalf) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 11);
  for (auto name : {"head.cls.weight", "head.cls.bias"}) {
    auto& t = m.params().at(name);
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  }
  Rng rng(13);
  for (double v : classify(m, batch_of(random_sequences(6, cfg.max_len, cfg.vocab, rng)))) EXPECT_EQ(v, 0.5);
}

TEST(MlmLoss, ZeroHeadGivesLogVocab) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 14);
  for (auto name : {"head.mlm.weight", "head.mlm.bias"}) {
    auto& t = m.params().at(name);
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  }
  Rng rng(15);
  auto batch = batch_of(random_sequences(6, cfg.max_len, cfg.vocab, rng));
  mask_tokens(batch, 0.15, rng);
  Tape<float> tape(false);
  EXPECT_NEAR(mlm_loss(tape, m, batch).item(), std::log(double(cfg.vocab)), 1e-5);
}

TEST(MlmLoss, ConfidentCorrectHeadGivesNearZeroLoss) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 14);
  // A bias that strongly prefers token 5 with a zero weight matrix.
  auto& w = m.params().at("head.mlm.weight");
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  auto& b = m.params().at("head.mlm.bias");
  std::fill(b.data().begin(), b.data().end(), 0.0f);
  b.data()[5] = 50.0f;
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5, 5, 5}};
  auto batch = batch_of(seqs);
  batch.masked_positions = {1, 2};
  batch.masked_targets = {5, 5};
  Tape<float> tape(false);
  EXPECT_LT(mlm_loss(tape, m, batch).item(), 1e-6);
}

TEST(MlmLoss, RequiresMaskedPositions) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 14);
  std::vector<std::vector<std::int32_t>> seqs = {{kClsId, 5, 6}};
  Tape<float> tape(false);
  EXPECT_THROW(mlm_loss(tape, m, batch_of(seqs)), std::invalid_argument);
}

TEST(MaskTokens, SelectsFifteenPercentOfRealTokens) {
  Rng rng(16);
  std::vector<std::vector<std::int32_t>> seqs = {std::vector<std::int32_t>(21, 7)};
  seqs[0][0] = kClsId;
  auto batch = batch_of(seqs);
  mask_tokens(batch, 0.15, rng);
  EXPECT_EQ(batch.masked_positions.size(), 3u);  // round(0.15 * 20)
  for (auto p : batch.masked_positions) {
    EXPECT_NE(p, 0);
    EXPECT_EQ(batch.ids[p], kMaskId);
  }
}

TEST(Encoder, ClassifierGradientsPassFiniteDifferenceCheck) {
  GradCheckSetup s;
  s.model = tiny_config();
  s.model.vocab = 20;
  s.pl = 3;
  EXPECT_LT(check_classifier_gradients(s).max_rel_error, 1e-4);
}

TEST(Checkpoint, RoundTripIsBitExactAndFollowsTheLayout) {
  const auto cfg = tiny_config();
  EncoderModel<float> m(cfg, 21);
  const auto dir = std::filesystem::temp_directory_path() / "peftlab_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_model(path, m);
  const auto bytes = read_file(path);
  const auto raw = parse_raw(bytes);
  EXPECT_EQ(raw.magic, "PEFTMINI1");
  EXPECT_NE(raw.metadata.find("hidden=16"), std::string::npos);
  ASSERT_EQ(raw.entries.size(), m.params().items().size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < raw.entries.size(); ++i) {
    const auto& it = m.params().items()[i];
    EXPECT_EQ(raw.entries[i].name, it.name);
    EXPECT_EQ(raw.entries[i].values, to_vec(it.tensor));
    total += raw.entries[i].values.size();
  }
  EXPECT_EQ(total, m.params().element_count());

  const auto loaded = load_model(path);
  EXPECT_EQ(loaded.config(), cfg);
  EXPECT_EQ(parameter_digest(loaded.params()), parameter_digest(m.params()));
  save_model(dir / "again.ckpt", loaded);
  EXPECT_EQ(read_file(dir / "again.ckpt"), bytes);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  EXPECT_THROW(decode_checkpoint("NOTMAGIC1xxxx"), CheckpointError);
  EncoderModel<float> m(tiny_config(), 21);
  auto bytes = encode_checkpoint(model_checkpoint(m));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, PromptsRoundTrip) {
  Rng rng(22);
  const auto p = PromptSet<float>::random(2, 5, 16, rng);
  const auto back = prompts_from_checkpoint(prompt_checkpoint(p));
  EXPECT_EQ(to_vec(back.key), to_vec(p.key));
  EXPECT_EQ(to_vec(back.value), to_vec(p.value));
  const auto c = prompt_checkpoint(p);
  EXPECT_NE(c.find("prompt.key.0"), nullptr);
  EXPECT_NE(c.find("prompt.value.1"), nullptr);
}

TEST(Encoder, ForwardIsDeterministic) {
  const auto cfg = tiny_config();
  EncoderModel<float> a(cfg, 30), b(cfg, 30);
  EXPECT_EQ(parameter_digest(a.params()), parameter_digest(b.params()));
  Rng rng(31);
  const auto batch = batch_of(random_sequences(4, cfg.max_len, cfg.vocab, rng));
  Tape<float> t1(false), t2(false);
  EXPECT_EQ(to_vec(encode(t1, a, batch)), to_vec(encode(t2, b, batch)));
}
