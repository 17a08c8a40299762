#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hashmesh/sparse.hpp"

namespace hashmesh {

enum class Activation : std::uint8_t { kRelu = 0, kSoftmax = 1 };

struct LayerSpec {
  std::uint32_t in_dim = 0;
  std::uint32_t width = 0;  // L_w, across all shards
  Activation activation = Activation::kRelu;
  float sparsity = 1.0f;  // fraction of neurons activated per sample

  void validate(bool is_final) const;  // throws ConfigError
};

struct OptimizerConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;

  void validate() const;
};

struct ShardRange {
  std::uint32_t begin = 0;
  std::uint32_t end = 0;

  std::uint32_t size() const { return end - begin; }
  bool contains(std::uint32_t g) const { return g >= begin && g < end; }
};

// Per-batch record of one layer's active neurons: ids (global, sorted per
// sample), activations, backpropagated errors, and per-shard counts. This is
// the unit gathered across nodes. Flat layout: sample s owns positions
// [offsets[s], offsets[s+1]).
struct LayerSnapshot {
  std::uint32_t width = 0;
  std::uint32_t num_shards = 1;
  // Dense (full-width) snapshots keep their ids implicit: position i within
  // a sample is neuron i. The ids array stays empty then.
  bool implicit_full_ids = false;
  std::vector<std::uint32_t> offsets;       // batch+1
  std::vector<std::uint32_t> ids;
  std::vector<float> acts;
  std::vector<float> errs;
  std::vector<std::uint32_t> shard_counts;  // batch x num_shards

  std::uint32_t batch() const {
    return offsets.empty() ? 0 : static_cast<std::uint32_t>(offsets.size() - 1);
  }
  std::uint32_t count_of(std::uint32_t s) const { return offsets[s + 1] - offsets[s]; }
  std::uint32_t id_at(std::uint32_t s, std::uint32_t rel) const {
    return implicit_full_ids ? rel : ids[offsets[s] + rel];
  }
  std::span<const std::uint32_t> ids_of(std::uint32_t s) const {
    return {ids.data() + offsets[s], implicit_full_ids ? 0 : count_of(s)};
  }
  std::span<const float> acts_of(std::uint32_t s) const {
    return {acts.data() + offsets[s], count_of(s)};
  }
  std::span<float> acts_of_mut(std::uint32_t s) {
    return {acts.data() + offsets[s], count_of(s)};
  }
  std::span<const float> errs_of(std::uint32_t s) const {
    return {errs.data() + offsets[s], count_of(s)};
  }
  std::span<float> errs_of_mut(std::uint32_t s) {
    return {errs.data() + offsets[s], count_of(s)};
  }
  // Absolute position of shard r's slice within sample s (ranks gathered in
  // order, shard ranges contiguous, so slices are consecutive).
  std::pair<std::uint32_t, std::uint32_t> shard_slice(std::uint32_t s, std::uint32_t r) const {
    std::uint32_t off = offsets[s];
    for (std::uint32_t q = 0; q < r; ++q) off += shard_counts[s * num_shards + q];
    return {off, shard_counts[s * num_shards + r]};
  }

  // Throws std::logic_error when any well-formedness invariant is broken
  // (sorted unique in-range ids, matching lengths, count consistency).
  void check_well_formed() const;
};

// One node's contiguous partition of a layer: weights, biases, Adam moment
// arrays, and per-batch gradient accumulators with touched-cell tracking.
// Weights for neuron g live in row (g - range.begin).
class NeuronShard {
 public:
  NeuronShard(const LayerSpec& spec, std::uint32_t layer_index, std::uint32_t shard_id,
              ShardRange range, std::uint64_t init_seed);

  const LayerSpec& spec() const { return spec_; }
  std::uint32_t shard_id() const { return shard_id_; }
  ShardRange range() const { return range_; }
  std::uint32_t local_count() const { return range_.size(); }
  std::uint64_t step() const { return step_t_; }

  std::span<const float> weight_row(std::uint32_t local) const {
    return {weights_.data() + static_cast<std::size_t>(local) * spec_.in_dim, spec_.in_dim};
  }
  std::span<const float> weights() const { return weights_; }
  std::span<const float> biases() const { return biases_; }

  // Checkpoint access (bit-exact save/load).
  struct State {
    std::span<float> weights, biases, m_w, v_w, m_b, v_b;
  };
  State state();
  void set_step(std::uint64_t t) { step_t_ = t; }

  // Accumulated (pre-Adam) gradients; consumed and zeroed by adam_step.
  std::span<const float> weight_grads() const { return grad_w_; }
  std::span<const float> bias_grads() const { return grad_b_; }

  // Pre-activation + bias for each listed local neuron; RELU optional
  // (softmax is applied later, over the gathered active set).
  void forward(const InputView& input, std::span<const std::uint32_t> local_ids,
               std::span<float> out_acts, bool apply_relu) const;

  // Single-neuron forward; lets full-width callers iterate rows in the
  // outer loop so each weight row is streamed once per batch.
  float activation(std::uint32_t local, const InputView& input, bool apply_relu) const;

  // Accumulates err * input into the gradient row of `local` (nonzero input
  // coordinates only) and err into the bias gradient, marking touched cells.
  // atomic_marks selects race-safe touch marking for HOGWILD callers; the
  // float accumulation itself is unsynchronized there by contract.
  template <bool atomic_marks>
  void accumulate(std::uint32_t local, float err, const InputView& input);

  // Split form for full-width batches, where every row shares one touched
  // union: gradient-only accumulation per (row, sample), then a single mask
  // OR per row. The caller owns the row (no concurrent writers).
  void accumulate_grad_only(std::uint32_t local, float err, const InputView& input);
  void mark_touched(std::uint32_t local, std::span<const std::uint64_t> mask);

  // One Adam step over every cell touched since the previous step; clears
  // gradients and touch marks, increments t. Throws NumericError (with
  // global neuron/coordinate ids) when an update produces a non-finite
  // weight. Touched rows can be processed in parallel; this runs serially.
  void adam_step(const OptimizerConfig& cfg);
  // Row-range slice of the same step, for the engine's worker pool. The
  // caller is responsible for bumping the step exactly once per batch via
  // begin_adam_step().
  std::uint64_t begin_adam_step();  // returns new t
  void adam_step_rows(const OptimizerConfig& cfg, std::uint64_t t, std::uint32_t row_begin,
                      std::uint32_t row_end);

 private:
  LayerSpec spec_;
  std::uint32_t shard_id_;
  ShardRange range_;
  std::uint32_t words_per_row_;
  std::uint64_t step_t_ = 0;

  std::vector<float> weights_, biases_;
  std::vector<float> m_w_, v_w_, m_b_, v_b_;
  std::vector<float> grad_w_, grad_b_;
  std::vector<std::uint64_t> touch_w_;  // [local][words_per_row]
  std::vector<std::uint64_t> touch_b_;
};

// Numerically stable softmax over one sample's active pre-activations.
void softmax_inplace(std::span<float> v);

// Per-sample probabilities over each sample's active output neurons.
std::vector<std::vector<float>> compute_output_distribution(const LayerSnapshot& output);

// Multi-label cross-entropy gradient: err_j = p_j - y_j with y_j =
// 1/|labels| on true labels. Labels must be present in ids (label forcing
// guarantees this during training); throws std::logic_error otherwise.
void output_error(std::span<const std::uint32_t> ids, std::span<const float> probs,
                  std::span<const std::uint32_t> labels, std::span<float> errs);

// -sum_labels log(p_label) / |labels| for one sample.
double cross_entropy(std::span<const std::uint32_t> ids, std::span<const float> probs,
                     std::span<const std::uint32_t> labels);

}  // namespace hashmesh
