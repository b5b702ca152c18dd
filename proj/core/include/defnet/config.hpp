#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "defnet/attacks.hpp"
#include "defnet/trainer.hpp"

namespace defnet {

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
  std::string origin;

  // "origin:line: key" for error messages.
  std::string where() const;
};

// Line-oriented `key = value` text. Keys are dotted (`model.keep_prob`);
// `#` starts a comment; blank lines are ignored. Duplicate keys are errors.
class ConfigText {
 public:
  static ConfigText parse(std::string_view text, const std::string& origin = "<text>");
  static ConfigText load(const std::filesystem::path& path);

  void add(ConfigEntry entry);
  void set(const std::string& key, const std::string& value);
  const ConfigEntry* find(std::string_view key) const;
  const std::vector<ConfigEntry>& entries() const { return entries_; }

 private:
  std::vector<ConfigEntry> entries_;
};

std::size_t parse_size(const ConfigEntry& e);
std::uint64_t parse_u64(const ConfigEntry& e);
double parse_double(const ConfigEntry& e);
bool parse_bool(const ConfigEntry& e);
// Comma separated, e.g. "1,2,4".
std::vector<double> parse_double_list(const ConfigEntry& e);
std::vector<std::size_t> parse_size_list(const ConfigEntry& e);

// Shortest text that parses back to the same double.
std::string format_double(double value);
std::string format_list(const std::vector<double>& values);
std::string format_list(const std::vector<std::size_t>& values);

// `model.*` keys. Missing keys keep the architecture's defaults.
std::string model_spec_to_text(const ModelSpec& spec, std::string_view prefix = "model");
ModelSpec model_spec_from_config(const ConfigText& cfg, std::string_view prefix = "model");

struct DataSettings {
  std::filesystem::path dir;          // dataset root; default from DEFNET_DATA_DIR
  std::string dataset = "mnist";      // mnist | cifar10
  std::size_t train_subset = 0;       // 0 = all, otherwise stratified
  std::size_t test_subset = 0;

  std::filesystem::path dataset_dir() const;
};

enum class GrayboxMode { kReinit, kRemask };
const char* to_string(GrayboxMode mode);
GrayboxMode parse_graybox_mode(std::string_view text);

struct EvalSettings {
  bool whitebox = false;
  bool count_unfooled = false;
  std::vector<double> sigmas{1, 2, 4, 8, 12, 16, 20, 24, 28, 32};
  std::vector<std::size_t> shuffle_k{2, 4, 7};  // divisors of 28
  std::uint64_t probe_seed = 0;
  GrayboxMode graybox_mode = GrayboxMode::kReinit;
  std::uint64_t target_seed = 1;
};

struct ExperimentConfig {
  ModelSpec model = resnet_small_spec({1, 28, 28}, 10);
  TrainConfig train;
  AttackSpec attack;
  DataSettings data;
  EvalSettings eval;

  // Copies the seed into model, training, attack and probe seeds.
  void apply_seed(std::uint64_t seed);
  void validate() const;
};

// Unknown keys raise ConfigError naming the key and line.
ExperimentConfig experiment_from_config(const ConfigText& cfg);
ExperimentConfig load_experiment(const std::filesystem::path& path);
std::string experiment_to_text(const ExperimentConfig& cfg);

std::string attack_spec_to_text(const AttackSpec& spec, std::string_view prefix = "attack");

}  // namespace defnet
