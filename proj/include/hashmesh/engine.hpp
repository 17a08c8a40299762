#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "hashmesh/common.hpp"
#include "hashmesh/dataset.hpp"
#include "hashmesh/layer.hpp"
#include "hashmesh/lsh.hpp"
#include "hashmesh/transport.hpp"

namespace hashmesh {

struct LayerConfig {
  LayerSpec spec;  // in_dim filled by NetworkSpec::finalize_and_validate
  lsh::LshConfig lsh;
};

struct NetworkSpec {
  std::uint32_t input_dim = 0;
  std::vector<LayerConfig> layers;
  std::uint64_t seed = 0;

  // Chains in_dims (input_dim -> widths) and validates every layer; the
  // final layer must be SOFTMAX.
  void finalize_and_validate();
};

enum class RunMode : std::uint8_t { kSparse = 0, kDenseBaseline = 1 };
enum class ParallelMode : std::uint8_t { kDeterministic = 0, kHogwild = 1 };

struct TrainingConfig {
  std::uint32_t batch_size = 64;
  std::uint32_t epochs = 1;
  OptimizerConfig optimizer;
  std::uint32_t rebuild_period = 50;      // batches between index rebuilds
  std::uint32_t hash_regen_interval = 4;  // every k-th rebuild gets fresh functions
  RunMode mode = RunMode::kSparse;
  ParallelMode parallelism = ParallelMode::kDeterministic;
  std::uint32_t worker_threads = 1;
  lsh::FillPolicy fill = lsh::FillPolicy::kUniformFill;
  std::optional<std::uint64_t> shuffle_seed;

  void validate() const;
};

// Contiguous balanced partition: the first (width mod n) shards hold
// ceil(width/n) neurons. Throws ConfigError when width < n.
ShardRange partition_layer(std::uint32_t width, std::uint32_t n, std::uint32_t node);

struct ShardPlan {
  std::vector<std::vector<ShardRange>> per_layer;  // [layer][node]

  static ShardPlan balanced(const NetworkSpec& net, std::uint32_t n);
};

struct BatchMetrics {
  std::uint32_t epoch = 0;
  std::uint32_t batch = 0;
  double loss = 0.0;
  std::uint64_t bytes_forward_gather = 0;  // this node, sent+received
  std::uint64_t bytes_error_sync = 0;
  std::uint64_t bytes_grad_reduce = 0;
  double wall_ms = 0.0;
};
using MetricsSink = std::function<void(const BatchMetrics&)>;

// Test/replay hook: the global ids this node selected, per layer and sample.
using SelectionRecorder = std::function<void(
    std::uint32_t epoch, std::uint32_t batch,
    const std::vector<std::vector<std::vector<std::uint32_t>>>& per_layer_sample)>;

// Runs on every rank after each epoch's closing barrier (checkpoint writes;
// may itself issue collectives as long as every rank installs the hook).
using EpochHook = std::function<void(std::uint32_t epoch)>;

struct TrainResult {
  std::vector<double> per_epoch_loss;
  double final_loss = 0.0;
  std::uint64_t batches = 0;
};

struct EvalResult {
  double precision_at_1 = 0.0;
  double precision_at_5 = 0.0;
  std::uint64_t samples = 0;
};

// One engine per node. Drives the per-batch loop: per layer select + forward
// + gather, output errors + error sync, backward with one partial-error
// reduce per non-input layer, one Adam step per layer, and scheduled index
// rebuilds. Weight vectors never enter a transport payload; only snapshot
// activations, errors, and error partials do.
class Trainer {
 public:
  Trainer(NetworkSpec net, TrainingConfig cfg, transport::CollectiveEndpoint& ep);
  ~Trainer();

  const NetworkSpec& network() const { return net_; }
  const TrainingConfig& config() const { return cfg_; }
  const ShardPlan& plan() const { return plan_; }
  std::uint32_t num_layers() const { return static_cast<std::uint32_t>(net_.layers.size()); }
  NeuronShard& shard(std::uint32_t layer) { return *shards_[layer]; }
  const NeuronShard& shard(std::uint32_t layer) const { return *shards_[layer]; }
  const lsh::LshIndex& index(std::uint32_t layer) const { return indices_[layer]; }

  // Rebuild observability: how many rebuilds each layer's index has seen and
  // how many times the hash functions were regenerated.
  std::uint64_t index_generation(std::uint32_t layer) const { return index_generation_[layer]; }
  std::uint64_t function_generation(std::uint32_t layer) const {
    return function_generation_[layer];
  }

  void set_metrics_sink(MetricsSink sink) { metrics_ = std::move(sink); }
  void set_selection_recorder(SelectionRecorder rec) { recorder_ = std::move(rec); }
  void set_epoch_hook(EpochHook hook) { epoch_hook_ = std::move(hook); }

  TrainResult train(const DatasetHandle& data);

  // One optimization step over a batch; returns the mean loss. Exposed for
  // tests that drive batches manually (rebuild scheduling then lives with
  // the caller; train() handles it internally).
  double train_batch(const Batch& batch, std::uint32_t epoch, std::uint32_t batch_index);

  void rebuild_indices(bool regenerate_functions);

  // Dense (sparsity = 1) inference; precision@1/@5 against true labels.
  // max_samples = 0 evaluates the full set. Identical on every node.
  EvalResult evaluate(const DatasetHandle& data, std::uint64_t max_samples = 0,
                      std::uint32_t eval_batch_size = 256);

  // Gathered snapshots of the most recent batch (replication and
  // load-balance assertions in tests).
  const std::vector<LayerSnapshot>& last_snapshots() const { return gathered_; }

 private:
  struct SampleInput;
  void validate_dataset(const DatasetHandle& data) const;
  void select_and_forward(std::uint32_t layer, const Batch& batch, std::uint32_t epoch,
                          std::uint32_t batch_index, bool training);
  SampleInput input_of(std::uint32_t layer, const Batch& batch, std::uint32_t sample) const;
  void compute_output_errors(const Batch& batch, LayerSnapshot& local_err_partial,
                             std::vector<double>& loss_per_sample);
  void backward_layer(std::uint32_t layer, const Batch& batch);
  void adam_step_all();

  NetworkSpec net_;
  TrainingConfig cfg_;
  transport::CollectiveEndpoint& ep_;
  ShardPlan plan_;
  std::vector<std::unique_ptr<NeuronShard>> shards_;  // one per layer, this node
  std::vector<lsh::LshIndex> indices_;
  std::vector<std::uint64_t> index_generation_;
  std::vector<std::uint64_t> function_generation_;
  std::uint64_t rebuild_count_ = 0;
  std::vector<lsh::SelectionPolicy> policies_;  // per layer
  WorkerPool pool_;
  MetricsSink metrics_;
  SelectionRecorder recorder_;
  EpochHook epoch_hook_;

  // per-batch state
  std::vector<LayerSnapshot> gathered_;
  std::vector<std::vector<std::uint32_t>> selections_;  // [sample] local ids (own shard)
  std::vector<std::vector<std::vector<std::uint32_t>>> recorded_;  // [layer][sample] global
  std::vector<std::vector<float>> worker_scratch_;
  std::vector<std::uint32_t> iota_local_;  // 0..max shard size
  std::vector<std::uint32_t> iota_full_;   // 0..max in_dim (contiguous-query keys)
  std::vector<float> partials_;
  std::vector<std::vector<float>> worker_partials_;  // full-width backward
};

}  // namespace hashmesh
