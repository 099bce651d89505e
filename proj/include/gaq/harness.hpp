#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gaq/model.hpp"

namespace gaq {

/// Flat key/value run configuration. Every key has a default; unknown keys
/// are rejected with UsageError.
class RunConfig {
 public:
  RunConfig();

  static const std::vector<std::string>& keys();
  static std::string default_value(const std::string& key);
  static std::string describe(const std::string& key);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// `key = value` lines; blank lines and `#` comments are ignored.
  void load(std::istream& is);
  void load_file(const std::string& path);
  /// Every key in sorted order, loadable by load().
  void write(std::ostream& os) const;

  ModelConfig model_config() const;

 private:
  std::map<std::string, std::string> values_;
};

struct LeeSample {
  int frame = 0;
  int rotation = 0;
  double lee = 0.0;
};

struct LeeStats {
  double mean = 0.0;
  double max = 0.0;
  double std = 0.0;
  std::vector<LeeSample> samples;
};

/// LEE over frames x rotations. Needs n_rotations >= 10; identity_only
/// replaces the Haar draws with the identity.
LeeStats eval_lee(const Model& model, std::span<const MolecularFrame> frames, int n_rotations, std::uint64_t seed,
                  bool identity_only = false);

/// Command-line entry point: gen-data, train, quantize, eval, eval-lee, md,
/// bench, codebook. Returns 0 on success, 2 for usage errors and 1 for
/// runtime failures (with a one-line diagnostic on `err`).
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Environment variable holding the root for relative run directories.
inline constexpr const char* kRunRootEnv = "GAQ_RUN_ROOT";

}  // namespace gaq
