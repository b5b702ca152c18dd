#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "defnet/models.hpp"

namespace defnet {

enum class EntryKind : std::uint8_t {
  kParam = 0,    // float32
  kMask = 1,     // uint8
  kBnStat = 2,   // float32 (running stats and the input mean)
  kMetadata = 3, // uint8 UTF-8 text: model spec and training metadata
};

struct CheckpointEntry {
  std::string name;
  EntryKind kind;
  Tensor tensor;
};

struct TrainingMetadata {
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double train_accuracy = -1.0;
  double test_accuracy = -1.0;

  bool operator==(const TrainingMetadata&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelSpec spec;
  TrainingMetadata meta;
  std::vector<CheckpointEntry> entries;  // params, masks, BN stats, in model order
};

Checkpoint make_checkpoint(const Model& model, const TrainingMetadata& meta = {});
// Rebuilds the model from the stored spec, then overwrites parameters,
// statistics, and masks with the stored tensors.
Model restore_model(const Checkpoint& ckpt);

// "DFNT", u32 version, u32 count, entries (u16 name length, name, u8 kind,
// u8 rank, rank x u32 dims, row-major payload), trailing u32 CRC32 of every
// preceding byte. Little-endian throughout.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                             const std::string& origin = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace defnet
