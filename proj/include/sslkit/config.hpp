#pragma once

// Flat key=value run configuration: file parsing, canonical (sorted-key)
// serialization, and validation with method-specific defaults.

#include <map>
#include <stdexcept>
#include <string>

#include "sslkit/methods.hpp"
#include "sslkit/trainer.hpp"

namespace sslkit::config {

// user/config mistakes; the CLI maps these to exit code 2
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  methods::MethodConfig method;  // name + per-method knobs
  std::string dataset = "synth";  // "synth" or "cifar"
  std::string data_path;          // cifar: directory with *_batch*.bin files
  std::string checkpoint;         // input checkpoint for eval subcommands
  std::string out;                // run directory
  int64_t epochs = 10;
  int64_t batch_size = 128;
  int64_t workers = 2;
  int64_t buffer = 4;
  double lr = 0.3;
  double weight_decay = 1e-4;
  int64_t warmup_steps = 0;
  double probe_lr = 0.1;
  uint64_t seed = 0;
  // synthetic dataset shape
  int64_t synth_classes = 10;
  int64_t synth_per_class = 200;
  int64_t synth_size = 32;  // image height = width
  double synth_sigma = 0.1;

  bool operator==(const RunConfig& o) const;

  trainer::TrainConfig train_config() const;
};

// flat key=value text; blank lines and "#" comments ignored
std::map<std::string, std::string> parse_kv(const std::string& text);

// defaults for `method`, overlaid with `kv`; throws ConfigError on unknown
// method (listing the valid names), unknown keys, or out-of-range values
RunConfig from_kv(const std::map<std::string, std::string>& kv);

// canonical form: every key, sorted, shortest round-trip number formatting;
// parse_kv/from_kv of this string reproduces the config exactly
std::string serialize(const RunConfig& cfg);

}  // namespace sslkit::config
