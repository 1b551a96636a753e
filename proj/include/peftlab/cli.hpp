#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace peftlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitInvalid = 2;  // data or config validation
inline constexpr int kExitRuntime = 3;

// Written as manifest.json at the top of every output directory.
struct RunManifest {
  std::string command;
  std::string config;  // resolved key=value text, defaults included
  std::vector<std::pair<std::string, std::string>> inputs;  // path, SHA-256
  std::vector<std::string> outputs;  // files under the output directory
  double duration_seconds = 0;

  std::string to_json() const;
};

// Runs one subcommand. `args` excludes the program name. Results go to
// `out`; usage text, progress and errors go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace peftlab
