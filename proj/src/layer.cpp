#include "hashmesh/layer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "hashmesh/common.hpp"
#include "hashmesh/kernels.hpp"

namespace hashmesh {

void LayerSpec::validate(bool is_final) const {
  if (in_dim == 0 || width == 0) throw ConfigError("layer dims must be positive");
  if (!(sparsity > 0.0f) || sparsity > 1.0f) {
    throw ConfigError("layer sparsity must be in (0, 1]");
  }
  if (sparsity * static_cast<float>(width) < 1.0f) {
    throw ConfigError("layer sparsity * width must be >= 1");
  }
  if ((activation == Activation::kSoftmax) != is_final) {
    throw ConfigError("softmax is required on the final layer and only there");
  }
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0f)) throw ConfigError("optimizer.lr must be > 0");
  if (beta1 < 0.0f || beta1 >= 1.0f || beta2 < 0.0f || beta2 >= 1.0f) {
    throw ConfigError("optimizer betas must be in [0, 1)");
  }
  if (!(epsilon > 0.0f)) throw ConfigError("optimizer.epsilon must be > 0");
}

void LayerSnapshot::check_well_formed() const {
  const std::uint32_t b = batch();
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != acts.size()) {
    throw std::logic_error("snapshot offsets inconsistent");
  }
  if (!implicit_full_ids && acts.size() != ids.size()) {
    throw std::logic_error("snapshot array lengths differ");
  }
  if (errs.size() != acts.size()) {
    throw std::logic_error("snapshot array lengths differ");
  }
  if (shard_counts.size() != static_cast<std::size_t>(b) * num_shards) {
    throw std::logic_error("snapshot shard_counts size mismatch");
  }
  for (std::uint32_t s = 0; s < b; ++s) {
    std::uint64_t total = 0;
    for (std::uint32_t r = 0; r < num_shards; ++r) total += shard_counts[s * num_shards + r];
    if (total != count_of(s)) throw std::logic_error("snapshot shard counts do not sum");
    if (implicit_full_ids) {
      if (count_of(s) != width) throw std::logic_error("dense snapshot not full width");
      continue;
    }
    const auto sample_ids = ids_of(s);
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
      if (sample_ids[i] >= width) throw std::logic_error("snapshot id out of range");
      if (i > 0 && sample_ids[i] <= sample_ids[i - 1]) {
        throw std::logic_error("snapshot ids not strictly increasing");
      }
    }
  }
}

NeuronShard::NeuronShard(const LayerSpec& spec, std::uint32_t layer_index, std::uint32_t shard_id,
                         ShardRange range, std::uint64_t init_seed)
    : spec_(spec), shard_id_(shard_id), range_(range) {
  const std::uint32_t local = range.size();
  const std::size_t wcells = static_cast<std::size_t>(local) * spec.in_dim;
  words_per_row_ = (spec.in_dim + 63) / 64;
  weights_.resize(wcells);
  m_w_.assign(wcells, 0.0f);
  v_w_.assign(wcells, 0.0f);
  grad_w_.assign(wcells, 0.0f);
  biases_.assign(local, 0.0f);
  m_b_.assign(local, 0.0f);
  v_b_.assign(local, 0.0f);
  grad_b_.assign(local, 0.0f);
  touch_w_.assign(static_cast<std::size_t>(local) * words_per_row_, 0);
  touch_b_.assign((local + 63) / 64, 0);

  // Row g is a pure function of (seed, layer, g): every node generates the
  // same full-layer initialization and keeps its own slice.
  const float bound = 1.0f / std::sqrt(static_cast<float>(spec.in_dim));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (std::uint32_t local_j = 0; local_j < local; ++local_j) {
    auto rng = derive_rng({init_seed, 0x57u /* 'W' */, layer_index, range.begin + local_j});
    float* row = weights_.data() + static_cast<std::size_t>(local_j) * spec.in_dim;
    for (std::uint32_t i = 0; i < spec.in_dim; ++i) row[i] = dist(rng);
  }
}

NeuronShard::State NeuronShard::state() {
  return State{weights_, biases_, m_w_, v_w_, m_b_, v_b_};
}

float NeuronShard::activation(std::uint32_t local, const InputView& input,
                              bool apply_relu) const {
  const auto& k = kernels::ops();
  const float* row = weights_.data() + static_cast<std::size_t>(local) * spec_.in_dim;
  float pre = input.contiguous() ? k.dot_dense(input.val, row, input.nnz)
                                 : k.dot_sparse(input.idx, input.val, input.nnz, row);
  pre += biases_[local];
  return (apply_relu && pre < 0.0f) ? 0.0f : pre;
}

void NeuronShard::forward(const InputView& input, std::span<const std::uint32_t> local_ids,
                          std::span<float> out_acts, bool apply_relu) const {
  if (input.dim != spec_.in_dim) {
    throw std::invalid_argument("forward: input dim " + std::to_string(input.dim) +
                                " != layer in_dim " + std::to_string(spec_.in_dim));
  }
  for (std::size_t i = 0; i < local_ids.size(); ++i) {
    const std::uint32_t j = local_ids[i];
    if (j >= local_count()) {
      throw std::invalid_argument("forward: local id " + std::to_string(j) + " out of shard");
    }
    out_acts[i] = activation(j, input, apply_relu);
  }
}

template <bool atomic_marks>
void NeuronShard::accumulate(std::uint32_t local, float err, const InputView& input) {
  auto mark = [](std::uint64_t* word, std::uint64_t bit) {
    if constexpr (atomic_marks) {
      std::atomic_ref<std::uint64_t>(*word).fetch_or(bit, std::memory_order_relaxed);
    } else {
      *word |= bit;
    }
  };
  grad_b_[local] += err;
  // Bias touch words are shared across neuron rows, so the mark must be
  // atomic even under row-partitioned (deterministic) accumulation.
  std::atomic_ref<std::uint64_t>(touch_b_[local / 64])
      .fetch_or(std::uint64_t{1} << (local % 64), std::memory_order_relaxed);

  float* grad = grad_w_.data() + static_cast<std::size_t>(local) * spec_.in_dim;
  std::uint64_t* touch = touch_w_.data() + static_cast<std::size_t>(local) * words_per_row_;
  if (input.contiguous() && !atomic_marks) {
    // Dense-input fast path: vectorized axpy plus nonzero-coordinate touch
    // marks (adding err * 0.0 leaves untouched cells bit-identical).
    const auto& k = kernels::ops();
    k.axpy_dense(grad, input.val, input.nnz, err);
    k.touch_nonzero(touch, input.val, input.nnz);
    return;
  }
  for (std::uint32_t p = 0; p < input.nnz; ++p) {
    const float v = input.val[p];
    if (v == 0.0f) continue;  // zero coordinates are no-ops and stay untouched
    const std::uint32_t i = input.contiguous() ? p : input.idx[p];
    grad[i] += err * v;
    mark(&touch[i / 64], std::uint64_t{1} << (i % 64));
  }
}

template void NeuronShard::accumulate<false>(std::uint32_t, float, const InputView&);
template void NeuronShard::accumulate<true>(std::uint32_t, float, const InputView&);

void NeuronShard::accumulate_grad_only(std::uint32_t local, float err, const InputView& input) {
  grad_b_[local] += err;
  float* grad = grad_w_.data() + static_cast<std::size_t>(local) * spec_.in_dim;
  if (input.contiguous()) {
    kernels::ops().axpy_dense(grad, input.val, input.nnz, err);
    return;
  }
  for (std::uint32_t p = 0; p < input.nnz; ++p) {
    const float v = input.val[p];
    if (v == 0.0f) continue;
    grad[input.idx[p]] += err * v;
  }
}

void NeuronShard::mark_touched(std::uint32_t local, std::span<const std::uint64_t> mask) {
  std::atomic_ref<std::uint64_t>(touch_b_[local / 64])
      .fetch_or(std::uint64_t{1} << (local % 64), std::memory_order_relaxed);
  std::uint64_t* touch = touch_w_.data() + static_cast<std::size_t>(local) * words_per_row_;
  for (std::size_t w = 0; w < mask.size(); ++w) touch[w] |= mask[w];
}

namespace {

kernels::AdamParams make_params(const OptimizerConfig& cfg, std::uint64_t t) {
  kernels::AdamParams p{};
  p.beta1 = cfg.beta1;
  p.beta2 = cfg.beta2;
  p.one_minus_beta1 = 1.0f - cfg.beta1;
  p.one_minus_beta2 = 1.0f - cfg.beta2;
  p.inv_bias1 = 1.0f / (1.0f - std::pow(cfg.beta1, static_cast<float>(t)));
  p.inv_bias2 = 1.0f / (1.0f - std::pow(cfg.beta2, static_cast<float>(t)));
  p.lr = cfg.lr;
  p.epsilon = cfg.epsilon;
  return p;
}

bool all_finite(const float* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!(std::fabs(x[i]) <= std::numeric_limits<float>::max())) return false;
  }
  return true;
}

// Applies Adam to the touched cells of one row, zeroes the consumed
// gradients, clears the marks. Returns the coordinate of the first
// non-finite updated weight, or -1.
std::int64_t adam_row(const kernels::Ops& k, const kernels::AdamParams& p, std::uint64_t* touch,
                      std::size_t words, float* w, float* m, float* v, float* g) {
  std::int64_t bad = -1;
  for (std::size_t word = 0; word < words; ++word) {
    std::uint64_t bits = touch[word];
    if (bits == 0) continue;
    touch[word] = 0;
    const std::size_t base = word * 64;
    while (bits != 0) {
      const unsigned lo = static_cast<unsigned>(std::countr_zero(bits));
      // Length of the run of consecutive set bits starting at lo.
      const std::uint64_t shifted = bits >> lo;
      const unsigned run = static_cast<unsigned>(std::countr_one(shifted));
      const std::size_t off = base + lo;
      k.adam_span(w + off, m + off, v + off, g + off, run, p);
      if (bad < 0 && !all_finite(w + off, run)) {
        for (unsigned i = 0; i < run; ++i) {
          if (!(std::fabs(w[off + i]) <= std::numeric_limits<float>::max())) {
            bad = static_cast<std::int64_t>(off + i);
            break;
          }
        }
      }
      std::fill(g + off, g + off + run, 0.0f);
      bits = (run + lo >= 64) ? 0 : bits & ~(((std::uint64_t{1} << run) - 1) << lo);
    }
  }
  return bad;
}

}  // namespace

std::uint64_t NeuronShard::begin_adam_step() { return ++step_t_; }

void NeuronShard::adam_step_rows(const OptimizerConfig& cfg, std::uint64_t t,
                                 std::uint32_t row_begin, std::uint32_t row_end) {
  const auto& k = kernels::ops();
  const kernels::AdamParams p = make_params(cfg, t);
  for (std::uint32_t j = row_begin; j < row_end; ++j) {
    const std::size_t woff = static_cast<std::size_t>(j) * spec_.in_dim;
    const std::int64_t bad =
        adam_row(k, p, touch_w_.data() + static_cast<std::size_t>(j) * words_per_row_,
                 words_per_row_, weights_.data() + woff, m_w_.data() + woff, v_w_.data() + woff,
                 grad_w_.data() + woff);
    if (bad >= 0) {
      throw NumericError("non-finite weight after update at neuron " +
                         std::to_string(range_.begin + j) + ", coordinate " +
                         std::to_string(bad) + " (non-finite gradient?)");
    }
  }
  // Bias row: process once, by the worker that owns row 0.
  if (row_begin == 0) {
    const std::int64_t bad = adam_row(k, p, touch_b_.data(), touch_b_.size(), biases_.data(),
                                      m_b_.data(), v_b_.data(), grad_b_.data());
    if (bad >= 0) {
      throw NumericError("non-finite bias after update at neuron " +
                         std::to_string(range_.begin + bad) + " (non-finite gradient?)");
    }
  }
}

void NeuronShard::adam_step(const OptimizerConfig& cfg) {
  const std::uint64_t t = begin_adam_step();
  adam_step_rows(cfg, t, 0, local_count());
}

void softmax_inplace(std::span<float> v) {
  if (v.empty()) {
    throw std::invalid_argument("softmax over an empty active set");
  }
  float mx = v[0];
  for (float x : v) mx = std::max(mx, x);
  float sum = 0.0f;
  for (float& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (float& x : v) x /= sum;
}

std::vector<std::vector<float>> compute_output_distribution(const LayerSnapshot& output) {
  std::vector<std::vector<float>> probs(output.batch());
  for (std::uint32_t s = 0; s < output.batch(); ++s) {
    const auto acts = output.acts_of(s);
    probs[s].assign(acts.begin(), acts.end());
    softmax_inplace(probs[s]);
  }
  return probs;
}

namespace {

std::size_t position_of(std::span<const std::uint32_t> ids, std::uint32_t label) {
  const auto it = std::lower_bound(ids.begin(), ids.end(), label);
  if (it == ids.end() || *it != label) {
    throw std::logic_error("label " + std::to_string(label) +
                           " missing from the active output set");
  }
  return static_cast<std::size_t>(it - ids.begin());
}

}  // namespace

void output_error(std::span<const std::uint32_t> ids, std::span<const float> probs,
                  std::span<const std::uint32_t> labels, std::span<float> errs) {
  for (std::size_t i = 0; i < probs.size(); ++i) errs[i] = probs[i];
  const float y = 1.0f / static_cast<float>(labels.size());
  for (std::uint32_t label : labels) errs[position_of(ids, label)] -= y;
}

double cross_entropy(std::span<const std::uint32_t> ids, std::span<const float> probs,
                     std::span<const std::uint32_t> labels) {
  double loss = 0.0;
  for (std::uint32_t label : labels) {
    const double p = std::max<double>(probs[position_of(ids, label)], 1e-30);
    loss -= std::log(p);
  }
  return loss / static_cast<double>(labels.size());
}

}  // namespace hashmesh
