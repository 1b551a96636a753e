#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "peftlab/encoder.hpp"

namespace peftlab {

// Binary container:
//   "PEFTMINI1"
//   u32 metadata length, metadata bytes (key=value text)
//   repeated until EOF:
//     u32 name length, name bytes, u32 axis count, u32 axes..., f32 values...
// All integers and floats are little-endian.
inline constexpr std::string_view kCheckpointMagic = "PEFTMINI1";

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointEntry> entries;

  std::size_t element_count() const;
  const CheckpointEntry* find(std::string_view name) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

using NameFilter = std::function<bool(std::string_view)>;

// Encoder checkpoints carry "kind=encoder" plus the model config as metadata.
Checkpoint model_checkpoint(const EncoderModel<float>& model, const NameFilter& keep = {});
EncoderModel<float> model_from_checkpoint(const Checkpoint& checkpoint);
void save_model(const std::filesystem::path& path, const EncoderModel<float>& model,
                const NameFilter& keep = {});
EncoderModel<float> load_model(const std::filesystem::path& path);

// Prompt files use the names prompt.key.<layer> / prompt.value.<layer>, each
// [length, hidden].
Checkpoint prompt_checkpoint(const PromptSet<float>& prompts, std::string_view extra_metadata = {});
PromptSet<float> prompts_from_checkpoint(const Checkpoint& checkpoint);
void save_prompts(const std::filesystem::path& path, const PromptSet<float>& prompts,
                  std::string_view extra_metadata = {});
PromptSet<float> load_prompts(const std::filesystem::path& path);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);
// Digest over names, shapes and raw values of the selected parameters.
std::string parameter_digest(const ParameterSet<float>& params, const NameFilter& keep = {});
std::string prompt_digest(const PromptSet<float>& prompts);

}  // namespace peftlab
