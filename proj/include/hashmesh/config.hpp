#pragma once

#include <string>
#include <vector>

#include "hashmesh/engine.hpp"

#include "json.hpp"

namespace hashmesh {

struct ClusterConfig {
  std::string transport = "loopback";  // "loopback" | "tcp"
  std::uint32_t nodes = 1;
  std::vector<std::string> peers;  // host:port per rank (tcp)
  int timeout_ms = 30000;
  std::uint64_t scheduler_seed = 0;  // loopback schedule perturbation knob
};

// Complete declarative run description. JSON with a required "version"
// field; any key can be overridden through the environment:
//   HASHMESH_<PATH>=<json value>   with "__" separating path segments,
//   e.g. HASHMESH_TRAINING__BATCH_SIZE=128
struct RunConfig {
  int version = 1;
  std::uint64_t seed = 1;
  std::string train_path;
  std::string test_path;
  NetworkSpec network;
  TrainingConfig training;
  ClusterConfig cluster;
  std::string output_dir = "run_out";
  std::uint32_t bench_batches = 3;

  static RunConfig from_json(const nlohmann::json& j);
  // Reads the file, applies environment overrides, validates.
  static RunConfig load(const std::string& path, const char* env_prefix = "HASHMESH_");
  nlohmann::json to_json() const;

  // Cross-field validation (dims chain, cluster shape, batch size, ...).
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Applies HASHMESH_* environment overrides onto a raw JSON document.
void apply_env_overrides(nlohmann::json& j, const char* prefix);

}  // namespace hashmesh
