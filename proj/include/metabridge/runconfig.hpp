#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "metabridge/meta.hpp"

namespace metabridge::cli {

/// Everything a run needs, addressable by flat dotted keys (meta.alpha,
/// encoder.d_model, data.path, ...). Defaults are the shipped
/// hyperparameters; a config file overrides the defaults and command-line
/// flags override the file. The schema is closed: unknown keys are rejected.
struct RunConfig {
  meta::MetaConfig meta;  // includes the encoder block; meta.threads is a
                          // flag-only execution knob, never a config key

  std::string data_path;       // data.path: JSONL record file
  int64_t ratio_train = 3;     // data.ratio_train — category split proportions
  int64_t ratio_val = 1;       // data.ratio_val
  int64_t ratio_test = 6;      // data.ratio_test
  uint64_t split_seed = 0;     // data.split_seed
  int64_t vocab_min_freq = 1;  // data.vocab_min_freq

  std::string out_dir;         // out.dir
  int64_t repeats = 5;         // eval.repeats
  std::string split = "test";  // eval.split: train | val | test
  std::vector<double> r_at_p{0.7, 0.8, 0.9, 0.95};  // eval.r_at_p

  void validate() const;
};

/// All recognized config keys, in canonical order.
const std::vector<std::string>& config_keys();

/// One-line description of a key. Throws on an unknown key.
std::string key_help(const std::string& key);

/// Sets one key from its text form. Throws std::invalid_argument on an
/// unknown key or an unparsable value.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

/// The fully resolved config as key -> text. Round-trips exactly through
/// apply_key (shortest-round-trip formatting for floating-point values).
std::map<std::string, std::string> config_echo(const RunConfig& cfg);

/// Reads a flat `key = value` file (UTF-8; blank lines and lines starting
/// with '#' are ignored; later lines win). Errors carry the file name and
/// line number.
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Writes the resolved config as a flat `key = value` file that
/// load_config_file reads back to an identical configuration.
void save_config_file(const RunConfig& cfg, const std::filesystem::path& path);

}  // namespace metabridge::cli
