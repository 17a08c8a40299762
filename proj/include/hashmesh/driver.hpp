#pragma once

#include <string>
#include <vector>

#include "hashmesh/config.hpp"

#include "json.hpp"

namespace hashmesh {

// Command implementations behind the CLI. Each writes its artifacts under
// cfg.output_dir and returns the rank-0 report document (summaries exclude
// wall-clock values so identical deterministic runs hash identically).

// Runs training (all loopback ranks in-process, or this node for tcp);
// writes metrics.jsonl, checkpoint/, summary.json. A transport failure dumps
// a local emergency checkpoint before rethrowing.
nlohmann::json run_train(const RunConfig& cfg, std::uint32_t node_id);

// Loads a checkpoint and reports precision@1/@5 on the configured dataset
// (test split when present, else train).
nlohmann::json run_eval(const RunConfig& cfg, const std::string& checkpoint_dir,
                        std::uint32_t node_id, std::uint64_t max_samples = 0);

// Fixed-batch-count passes in DENSE_BASELINE and SPARSE mode on loopback;
// reports forward-gather bytes/batch, the sparse/dense ratio, and analytic
// transfer-time projections at the given bandwidths.
nlohmann::json run_bench_comm(const RunConfig& cfg, const std::vector<double>& bandwidths_gbps);

// Per layer/shard/table occupancy statistics of the hash indices rebuilt
// from checkpointed weights.
nlohmann::json run_inspect_tables(const RunConfig& cfg, const std::string& checkpoint_dir);

}  // namespace hashmesh
