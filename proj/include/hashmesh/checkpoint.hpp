#pragma once

#include <string>

#include "hashmesh/engine.hpp"

namespace hashmesh {

// Checkpoint directory layout:
//   layer<k>_shard<r>.bin  -- versioned header + little-endian f32 arrays
//                             (weights, biases, Adam m/v), bit-exact
//   manifest.json          -- node count, layer specs, shard table, step
//
// Every rank writes its own shard files; with_manifest additionally writes
// the manifest (callers let rank 0 do that). No communication happens here;
// callers place barriers around save when they need completion guarantees.
void save_shard_files(const std::string& dir, Trainer& trainer);
void save_manifest(const std::string& dir, const Trainer& trainer);

// Loads this node's shards and rebuilds the hash indices from the restored
// weights. The manifest must match the trainer's network, node count, and
// shard plan exactly (ConfigError otherwise).
void load_checkpoint(const std::string& dir, Trainer& trainer);

// Standalone shard-file reader (header + weights + biases); lets tools walk
// every shard of a checkpoint without a cluster.
struct RawShardFile {
  std::uint32_t layer_index = 0;
  std::uint32_t in_dim = 0;
  std::uint32_t width = 0;
  std::uint8_t activation = 0;
  float sparsity = 1.0f;
  std::uint32_t shard_id = 0;
  std::uint32_t range_begin = 0;
  std::uint32_t range_end = 0;
  std::uint64_t step_t = 0;
  std::vector<float> weights;
  std::vector<float> biases;
};
RawShardFile read_shard_file(const std::string& path);

}  // namespace hashmesh
