#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

// Raised for invalid configuration or data; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat UTF-8 key=value text. Blank lines and lines starting with '#' are
// ignored; whitespace around keys and values is trimmed.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(std::string_view key) const { return values_.find(key) != values_.end(); }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(std::string_view key, const std::string& fallback) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  std::uint64_t get_uint(std::string_view key, std::uint64_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<std::string> get_list(std::string_view key) const;  // comma separated

  // Throws ConfigError naming the first key not in `allowed`.
  void reject_unknown(const std::set<std::string, std::less<>>& allowed) const;

  const std::map<std::string, std::string, std::less<>>& values() const { return values_; }
  std::string to_text() const;

 private:
  const std::string* find(std::string_view key) const;
  std::map<std::string, std::string, std::less<>> values_;
};

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace peftlab
