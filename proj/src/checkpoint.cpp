#include "peftlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace peftlab {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string layer_key(const char* slot, std::size_t layer) {
  return std::string("prompt.") + slot + "." + std::to_string(layer);
}

}  // namespace

std::size_t Checkpoint::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.values.size();
  return n;
}

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  std::string out(kCheckpointMagic);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.metadata.size()));
  out += checkpoint.metadata;
  for (const auto& e : checkpoint.entries) {
    if (e.values.size() != shape_size(e.shape)) {
      throw CheckpointError("checkpoint entry " + e.name + " has " +
                            std::to_string(e.values.size()) + " values for shape " +
                            shape_str(e.shape));
    }
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) put_f32(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw CheckpointError("not a checkpoint: bad magic");
  }
  Checkpoint c;
  c.metadata = std::string(r.take(r.u32("metadata length"), "metadata"));
  while (!r.done()) {
    CheckpointEntry e;
    e.name = std::string(r.take(r.u32("name length"), "name"));
    const auto rank = r.u32("axis count");
    for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.u32("axis"));
    const auto raw = r.take(shape_size(e.shape) * 4, "values");
    e.values.resize(shape_size(e.shape));
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      std::uint32_t v = 0;
      for (int k = 0; k < 4; ++k)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + k])) << (8 * k);
      e.values[i] = std::bit_cast<float>(v);
    }
    c.entries.push_back(std::move(e));
  }
  return c;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

Checkpoint model_checkpoint(const EncoderModel<float>& model, const NameFilter& keep) {
  Checkpoint c;
  c.metadata = "kind=encoder\n" + model.config().to_text();
  for (const auto& it : model.params().items()) {
    if (keep && !keep(it.name)) continue;
    c.entries.push_back(
        {it.name, it.tensor.shape(), {it.tensor.data().begin(), it.tensor.data().end()}});
  }
  return c;
}

EncoderModel<float> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto meta = KeyValueConfig::parse(checkpoint.metadata);
  if (meta.get_string("kind", "") != "encoder") {
    throw CheckpointError("checkpoint does not hold an encoder");
  }
  std::string model_text;
  for (const auto& [k, v] : meta.values())
    if (k != "kind") model_text += k + "=" + v + "\n";
  const auto config = ModelConfig::from_text(model_text);
  ParameterSet<float> params;
  for (const auto& e : checkpoint.entries) params.add(e.name, Tensor<float>(e.shape, e.values));
  return EncoderModel<float>(config, std::move(params));
}

void save_model(const std::filesystem::path& path, const EncoderModel<float>& model,
                const NameFilter& keep) {
  save_checkpoint(path, model_checkpoint(model, keep));
}

EncoderModel<float> load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(load_checkpoint(path));
}

Checkpoint prompt_checkpoint(const PromptSet<float>& prompts, std::string_view extra_metadata) {
  Checkpoint c;
  c.metadata = "kind=prompt\nlayers=" + std::to_string(prompts.layers()) +
               "\nlength=" + std::to_string(prompts.length()) +
               "\nhidden=" + std::to_string(prompts.hidden()) + "\n" + std::string(extra_metadata);
  const std::size_t per_layer = prompts.length() * prompts.hidden();
  for (std::size_t l = 0; l < prompts.layers(); ++l) {
    for (auto [slot, t] : {std::pair{"key", &prompts.key}, std::pair{"value", &prompts.value}}) {
      const float* src = t->data().data() + l * per_layer;
      c.entries.push_back({layer_key(slot, l),
                           {prompts.length(), prompts.hidden()},
                           std::vector<float>(src, src + per_layer)});
    }
  }
  return c;
}

PromptSet<float> prompts_from_checkpoint(const Checkpoint& checkpoint) {
  auto meta = KeyValueConfig::parse(checkpoint.metadata);
  if (meta.get_string("kind", "") != "prompt") {
    throw CheckpointError("checkpoint does not hold a prompt set");
  }
  const auto layers = meta.get_uint("layers", 0);
  const auto length = meta.get_uint("length", 0);
  const auto hidden = meta.get_uint("hidden", 0);
  auto prompts = PromptSet<float>::zeros(layers, length, hidden);
  const std::size_t per_layer = length * hidden;
  for (std::size_t l = 0; l < layers; ++l) {
    for (auto [slot, t] : {std::pair{"key", &prompts.key}, std::pair{"value", &prompts.value}}) {
      const auto* e = checkpoint.find(layer_key(slot, l));
      if (!e) throw CheckpointError("prompt file lacks " + layer_key(slot, l));
      if (e->shape != Shape{length, hidden}) {
        throw CheckpointError("prompt entry " + e->name + " has shape " + shape_str(e->shape));
      }
      std::copy(e->values.begin(), e->values.end(), t->data().begin() + l * per_layer);
    }
  }
  return prompts;
}

void save_prompts(const std::filesystem::path& path, const PromptSet<float>& prompts,
                  std::string_view extra_metadata) {
  save_checkpoint(path, prompt_checkpoint(prompts, extra_metadata));
}

PromptSet<float> load_prompts(const std::filesystem::path& path) {
  return prompts_from_checkpoint(load_checkpoint(path));
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string parameter_digest(const ParameterSet<float>& params, const NameFilter& keep) {
  Checkpoint c;
  for (const auto& it : params.items()) {
    if (keep && !keep(it.name)) continue;
    c.entries.push_back(
        {it.name, it.tensor.shape(), {it.tensor.data().begin(), it.tensor.data().end()}});
  }
  return sha256_hex(encode_checkpoint(c));
}

std::string prompt_digest(const PromptSet<float>& prompts) {
  return sha256_hex(encode_checkpoint(prompt_checkpoint(prompts)));
}

}  // namespace peftlab
