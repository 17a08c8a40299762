#include "hashmesh/driver.hpp"

#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "hashmesh/checkpoint.hpp"

namespace hashmesh {

namespace {

using nlohmann::json;

NetworkSpec network_of(const RunConfig& cfg) {
  NetworkSpec net = cfg.network;
  net.seed = cfg.seed;
  net.finalize_and_validate();
  return net;
}

json stats_json(const transport::CommStats& s) {
  return json::parse(s.to_json_string());
}

// Runs fn(rank, endpoint) on every loopback rank (rank 0 on this thread).
// The first failure poisons the cluster so peers blocked in a collective
// abort instead of waiting forever.
void run_on_loopback(std::uint32_t n, std::uint64_t scheduler_seed,
                     const std::function<void(std::uint32_t, transport::CollectiveEndpoint&)>& fn) {
  transport::LoopbackCluster cluster(n, scheduler_seed);
  std::mutex mu;
  std::exception_ptr first;
  auto guarded = [&](std::uint32_t rank) {
    try {
      fn(rank, cluster.endpoint(rank));
    } catch (...) {
      {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
      }
      cluster.poison("rank " + std::to_string(rank) + " failed");
    }
  };
  std::vector<std::thread> threads;
  for (std::uint32_t r = 1; r < n; ++r) threads.emplace_back(guarded, r);
  guarded(0);
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

struct MetricsWriter {
  std::ofstream out;
  explicit MetricsWriter(const std::string& path) : out(path, std::ios::trunc) {
    if (!out) throw ConfigError("cannot open metrics file '" + path + "'");
  }
  void operator()(const BatchMetrics& m) {
    json j{{"epoch", m.epoch},
           {"batch", m.batch},
           {"loss", m.loss},
           {"bytes",
            {{"forward_gather", m.bytes_forward_gather},
             {"error_sync", m.bytes_error_sync},
             {"grad_reduce", m.bytes_grad_reduce}}},
           {"wall_ms", m.wall_ms}};
    out << j.dump() << '\n';
  }
};

}  // namespace

json run_train(const RunConfig& cfg, std::uint32_t node_id) {
  if (cfg.train_path.empty()) throw ConfigError("dataset.train: is required for training");
  const DatasetHandle train_data = DatasetHandle::parse_xc(cfg.train_path);
  std::optional<DatasetHandle> test_data;
  if (!cfg.test_path.empty()) test_data = DatasetHandle::parse_xc(cfg.test_path);

  std::filesystem::create_directories(cfg.output_dir);
  const std::string ckpt_dir = (std::filesystem::path(cfg.output_dir) / "checkpoint").string();

  json summary;
  std::mutex summary_mu;
  auto metrics = std::make_shared<MetricsWriter>(
      (std::filesystem::path(cfg.output_dir) / "metrics.jsonl").string());

  auto node_main = [&](std::uint32_t rank, transport::CollectiveEndpoint& ep) {
    Trainer trainer(network_of(cfg), cfg.training, ep);
    if (rank == 0) {
      trainer.set_metrics_sink([metrics](const BatchMetrics& m) { (*metrics)(m); });
    }
    // Resumable checkpoint after every epoch (overwritten in place).
    trainer.set_epoch_hook([&](std::uint32_t) {
      save_shard_files(ckpt_dir, trainer);
      ep.barrier();  // all shard files on disk before the manifest appears
      if (rank == 0) save_manifest(ckpt_dir, trainer);
      ep.barrier();
    });
    TrainResult result;
    try {
      result = trainer.train(train_data);
    } catch (const TransportError&) {
      // Keep whatever progress this node holds; resumable via load_checkpoint.
      save_shard_files(
          (std::filesystem::path(cfg.output_dir) / "emergency_checkpoint").string(), trainer);
      throw;
    }
    EvalResult eval;
    const bool with_eval = test_data.has_value();
    if (with_eval) eval = trainer.evaluate(*test_data);

    if (rank == 0) {
      json s;
      s["version"] = 1;
      s["nodes"] = ep.world_size();
      s["mode"] = cfg.training.mode == RunMode::kDenseBaseline ? "dense_baseline" : "sparse";
      s["epochs"] = cfg.training.epochs;
      s["batches"] = result.batches;
      s["per_epoch_loss"] = result.per_epoch_loss;
      s["final_loss"] = result.final_loss;
      if (with_eval) {
        s["precision_at_1"] = eval.precision_at_1;
        s["precision_at_5"] = eval.precision_at_5;
        s["eval_samples"] = eval.samples;
      }
      s["comm"] = stats_json(ep.stats());
      s["checkpoint"] = "checkpoint";  // relative to output_dir
      std::lock_guard lock(summary_mu);
      summary = std::move(s);
    }
  };

  if (cfg.cluster.transport == "loopback") {
    run_on_loopback(cfg.cluster.nodes, cfg.cluster.scheduler_seed, node_main);
  } else {
    transport::TcpTopology topo;
    topo.node_id = node_id;
    topo.peers = cfg.cluster.peers;
    topo.timeout_ms = cfg.cluster.timeout_ms;
    auto ep = transport::connect_tcp_mesh(topo);
    node_main(node_id, *ep);
  }

  if (!summary.is_null()) {
    std::ofstream out((std::filesystem::path(cfg.output_dir) / "summary.json").string(),
                      std::ios::trunc);
    out << summary.dump(2) << '\n';
  }
  return summary;
}

json run_eval(const RunConfig& cfg, const std::string& checkpoint_dir, std::uint32_t node_id,
              std::uint64_t max_samples) {
  const std::string data_path = cfg.test_path.empty() ? cfg.train_path : cfg.test_path;
  if (data_path.empty()) throw ConfigError("dataset: train or test path is required for eval");
  const DatasetHandle data = DatasetHandle::parse_xc(data_path);

  json report;
  std::mutex mu;
  auto node_main = [&](std::uint32_t rank, transport::CollectiveEndpoint& ep) {
    Trainer trainer(network_of(cfg), cfg.training, ep);
    load_checkpoint(checkpoint_dir, trainer);
    const EvalResult eval = trainer.evaluate(data, max_samples);
    if (rank == 0) {
      json r{{"precision_at_1", eval.precision_at_1},
             {"precision_at_5", eval.precision_at_5},
             {"samples", eval.samples},
             {"checkpoint", checkpoint_dir},
             {"dataset", data_path}};
      std::lock_guard lock(mu);
      report = std::move(r);
    }
  };

  if (cfg.cluster.transport == "loopback") {
    run_on_loopback(cfg.cluster.nodes, cfg.cluster.scheduler_seed, node_main);
  } else {
    transport::TcpTopology topo;
    topo.node_id = node_id;
    topo.peers = cfg.cluster.peers;
    topo.timeout_ms = cfg.cluster.timeout_ms;
    auto ep = transport::connect_tcp_mesh(topo);
    node_main(node_id, *ep);
  }

  if (!report.is_null()) {
    std::filesystem::create_directories(cfg.output_dir);
    std::ofstream out((std::filesystem::path(cfg.output_dir) / "eval.json").string(),
                      std::ios::trunc);
    out << report.dump(2) << '\n';
  }
  return report;
}

json run_bench_comm(const RunConfig& cfg, const std::vector<double>& bandwidths_gbps) {
  if (cfg.cluster.transport != "loopback") {
    throw ConfigError("cluster.transport: bench-comm runs on the loopback transport");
  }
  if (cfg.train_path.empty()) throw ConfigError("dataset.train: is required for bench-comm");
  const DatasetHandle data = DatasetHandle::parse_xc(cfg.train_path);

  auto measure = [&](RunMode mode) -> std::uint64_t {
    std::uint64_t forward_sent_total = 0;
    std::mutex mu;
    std::uint32_t batches_run = 0;
    run_on_loopback(cfg.cluster.nodes, cfg.cluster.scheduler_seed,
                    [&](std::uint32_t, transport::CollectiveEndpoint& ep) {
                      TrainingConfig tc = cfg.training;
                      tc.mode = mode;
                      Trainer trainer(network_of(cfg), tc, ep);
                      BatchStream stream(data, tc.batch_size, std::nullopt);
                      const std::size_t batches =
                          std::min<std::size_t>(cfg.bench_batches, stream.num_batches());
                      for (std::size_t b = 0; b < batches; ++b) {
                        trainer.train_batch(stream.batch(b), 0, static_cast<std::uint32_t>(b));
                      }
                      const auto s = ep.stats();
                      std::lock_guard lock(mu);
                      forward_sent_total +=
                          s.phase[static_cast<std::size_t>(transport::Phase::kForwardGather)]
                              .bytes_sent;
                      batches_run = static_cast<std::uint32_t>(batches);
                    });
    if (batches_run == 0) throw ConfigError("bench_batches: dataset yields no batches");
    return forward_sent_total / batches_run;
  };

  const std::uint64_t dense_bytes = measure(RunMode::kDenseBaseline);
  const std::uint64_t sparse_bytes = measure(RunMode::kSparse);
  const double ratio = static_cast<double>(sparse_bytes) / static_cast<double>(dense_bytes);

  json projections = json::array();
  for (double gbps : bandwidths_gbps) {
    const double bits_per_s = gbps * 1e9;
    projections.push_back({{"bandwidth_gbps", gbps},
                           {"sparse_seconds_per_batch", sparse_bytes * 8.0 / bits_per_s},
                           {"dense_seconds_per_batch", dense_bytes * 8.0 / bits_per_s}});
  }
  json report{{"batches", cfg.bench_batches},
              {"nodes", cfg.cluster.nodes},
              {"sparse_forward_bytes_per_batch", sparse_bytes},
              {"dense_forward_bytes_per_batch", dense_bytes},
              {"ratio", ratio},
              {"compression_percent", 100.0 * (1.0 - ratio)},
              {"bandwidth_projections", std::move(projections)}};

  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream out((std::filesystem::path(cfg.output_dir) / "bench_comm.json").string(),
                    std::ios::trunc);
  out << report.dump(2) << '\n';
  return report;
}

json run_inspect_tables(const RunConfig& cfg, const std::string& checkpoint_dir) {
  const std::string manifest_path =
      (std::filesystem::path(checkpoint_dir) / "manifest.json").string();
  std::ifstream min(manifest_path);
  if (!min) throw ConfigError("cannot open checkpoint manifest '" + manifest_path + "'");
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    throw ConfigError("manifest is not valid JSON: " + std::string(e.what()));
  }

  NetworkSpec net = network_of(cfg);
  if (manifest.value("input_dim", 0u) != net.input_dim ||
      manifest["layers"].size() != net.layers.size()) {
    throw ConfigError("checkpoint does not match the configured network");
  }

  json layers = json::array();
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const lsh::LshConfig base = net.layers[k].lsh;
    lsh::LshConfig lc = base;
    lc.seed = derive_seed({base.seed, net.seed, 0x4c5348u /* "LSH" */, k});
    auto family = lsh::HashFamily::create(lc, net.layers[k].spec.in_dim);

    json shards = json::array();
    for (const json& sh : manifest["layers"][k]["shards"]) {
      const std::string file =
          (std::filesystem::path(checkpoint_dir) / sh.at("file").get<std::string>()).string();
      const RawShardFile raw = read_shard_file(file);
      if (raw.in_dim != net.layers[k].spec.in_dim || raw.width != net.layers[k].spec.width) {
        throw ConfigError("shard file '" + file + "' does not match the configured network");
      }
      const std::uint32_t local = raw.range_end - raw.range_begin;
      const lsh::LshIndex index =
          lsh::build_index(family, raw.weights.data(), raw.in_dim, local, raw.shard_id);
      json tables = json::array();
      for (std::uint32_t t = 0; t < index.num_tables(); ++t) {
        const auto stats = index.table_stats(t);
        json hist = json::object();
        for (const auto& [size, count] : stats.size_histogram) {
          hist[std::to_string(size)] = count;
        }
        tables.push_back({{"table", t},
                          {"code_space", stats.code_space},
                          {"nonempty_buckets", stats.nonempty_buckets},
                          {"max_bucket", stats.max_bucket},
                          {"empty_fraction", stats.empty_fraction},
                          {"histogram", std::move(hist)}});
      }
      shards.push_back({{"shard", raw.shard_id},
                        {"range", {raw.range_begin, raw.range_end}},
                        {"neurons", local},
                        {"tables", std::move(tables)}});
    }
    layers.push_back(
        {{"layer", k},
         {"key_dim", net.layers[k].spec.in_dim},
         {"family", base.family == lsh::Family::kSrp ? "srp" : "dwta"},
         {"shards", std::move(shards)}});
  }
  return json{{"version", 1}, {"layers", std::move(layers)}};
}

}  // namespace hashmesh
