#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "makd/distill.hpp"
#include "makd/factorize.hpp"
#include "makd/model.hpp"
#include "makd/train.hpp"

namespace makd {

// Flat key-value run configuration. Files hold "key = value" lines with
// '#' comments; command-line overrides replace individual keys.
struct RunConfig {
  std::map<std::string, std::string> values;

  static RunConfig from_file(const std::string& path);
  void merge_override(const std::string& key, const std::string& value) { values[key] = value; }

  bool has(const std::string& key) const { return values.count(key) != 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  // Layer sets: "none", "1-6", "1,3,5", or mixtures like "1-2,5".
  std::vector<int> get_layer_set(const std::string& key, const std::vector<int>& fallback) const;

  // Errors on any present key not in `allowed` (typo guard).
  void check_known(const std::vector<std::string>& allowed) const;
};

// Typed views; defaults applied for absent keys.
ModelConfig model_config_from(const RunConfig& rc);
TrainConfig train_config_from(const RunConfig& rc);
// num_layers fixes the default schedule; explicit plan.* keys override it.
DistillPlan plan_from(const RunConfig& rc, int num_layers);
FactorizationSpec factorization_spec_from(const RunConfig& rc);

// Key lists the typed views understand (for check_known).
const std::vector<std::string>& model_config_keys();
const std::vector<std::string>& train_config_keys();
const std::vector<std::string>& plan_keys();
const std::vector<std::string>& factorization_keys();
const std::vector<std::string>& data_keys();

// Reproducibility record written next to every artifact.
struct RunManifest {
  std::string command;
  std::string version;
  uint64_t seed = 0;
  std::map<std::string, std::string> effective_config;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_seconds = 0.0;
};

void write_manifest(const RunManifest& m, const std::string& path);

}  // namespace makd
