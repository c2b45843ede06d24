#pragma once

#include <string>
#include <utility>
#include <vector>

#include "makd/model.hpp"
#include "makd/tensor.hpp"

namespace makd {

// Container file layout (documented in README):
//   line 1: "<magic>"
//   meta lines: "<key> <value...>"
//   per tensor: "tensor <name> <ndims> <d0> [d1 ...]"
//   "end_header"
//   payload: raw little-endian float64, tensors in manifest order
// Saves go through a temp file + rename so a crash never leaves a torn
// checkpoint at the target path. Round trips are bit-exact.
namespace container {

struct Item {
  std::string name;
  Tensor tensor;
};

struct File {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Item> tensors;
};

void write(const std::string& path, const std::string& magic,
           const std::vector<std::pair<std::string, std::string>>& meta, const std::vector<Item>& tensors);
File read(const std::string& path, const std::string& magic);

}  // namespace container

inline constexpr const char* kModelMagic = "makd-checkpoint v1";

struct ManifestEntry {
  std::string name;
  std::vector<int> shape;
  int64_t numel = 0;
};

struct CheckpointInfo {
  ModelConfig config;
  std::vector<ManifestEntry> manifest;
  int64_t total_params = 0;
};

void save_checkpoint(const TransformerModel& m, const std::string& path);
TransformerModel load_checkpoint(const std::string& path);
// Header only; does not touch the payload bytes.
CheckpointInfo read_checkpoint_info(const std::string& path);

}  // namespace makd
