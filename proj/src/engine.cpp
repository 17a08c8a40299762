#include "hashmesh/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "hashmesh/kernels.hpp"

namespace hashmesh {

void NetworkSpec::finalize_and_validate() {
  if (input_dim == 0) throw ConfigError("network.input_dim must be positive");
  if (layers.empty()) throw ConfigError("network needs at least one layer");
  std::uint32_t in = input_dim;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    layers[k].spec.in_dim = in;
    layers[k].spec.validate(/*is_final=*/k + 1 == layers.size());
    layers[k].lsh.validate();
    in = layers[k].spec.width;
  }
}

void TrainingConfig::validate() const {
  if (batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("training.epochs must be >= 1");
  if (rebuild_period < 1) throw ConfigError("training.rebuild_period must be >= 1");
  if (hash_regen_interval < 1) throw ConfigError("training.hash_regen_interval must be >= 1");
  if (worker_threads < 1) throw ConfigError("training.worker_threads must be >= 1");
  optimizer.validate();
}

ShardRange partition_layer(std::uint32_t width, std::uint32_t n, std::uint32_t node) {
  if (n < 1 || node >= n) throw ConfigError("partition_layer: bad node count or id");
  if (width < n) {
    throw ConfigError("layer width " + std::to_string(width) + " < node count " +
                      std::to_string(n));
  }
  const std::uint32_t base = width / n;
  const std::uint32_t extra = width % n;  // first `extra` shards get base+1
  const std::uint32_t begin = node * base + std::min(node, extra);
  const std::uint32_t size = base + (node < extra ? 1 : 0);
  return ShardRange{begin, begin + size};
}

ShardPlan ShardPlan::balanced(const NetworkSpec& net, std::uint32_t n) {
  ShardPlan plan;
  plan.per_layer.resize(net.layers.size());
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    plan.per_layer[k].reserve(n);
    for (std::uint32_t r = 0; r < n; ++r) {
      plan.per_layer[k].push_back(partition_layer(net.layers[k].spec.width, n, r));
    }
  }
  return plan;
}

namespace {

std::uint32_t shard_budget(const LayerSpec& spec, std::uint32_t n) {
  const auto total =
      static_cast<std::uint64_t>(std::ceil(static_cast<double>(spec.sparsity) * spec.width));
  return static_cast<std::uint32_t>((std::max<std::uint64_t>(1, total) + n - 1) / n);
}

}  // namespace

struct Trainer::SampleInput {
  InputView view;
};

Trainer::Trainer(NetworkSpec net, TrainingConfig cfg, transport::CollectiveEndpoint& ep)
    : net_(std::move(net)), cfg_(cfg), ep_(ep), pool_(cfg.worker_threads) {
  cfg_.validate();
  net_.finalize_and_validate();
  const std::uint32_t n = ep_.world_size();
  const std::uint32_t rank = ep_.node_id();
  plan_ = ShardPlan::balanced(net_, n);

  const std::uint32_t layers = num_layers();
  std::uint32_t max_local = 0;
  std::uint32_t max_in_dim = 0;
  for (std::uint32_t k = 0; k < layers; ++k) {
    const ShardRange range = plan_.per_layer[k][rank];
    shards_.push_back(
        std::make_unique<NeuronShard>(net_.layers[k].spec, k, rank, range, net_.seed));
    lsh::SelectionPolicy policy;
    policy.budget = shard_budget(net_.layers[k].spec, n);
    policy.fill = cfg_.fill;
    policy.rng_seed = derive_seed({net_.seed, 0x53454cu /* "SEL" */, k});
    policies_.push_back(policy);
    max_local = std::max(max_local, range.size());
    max_in_dim = std::max(max_in_dim, net_.layers[k].spec.in_dim);
  }
  iota_local_.resize(max_local);
  for (std::uint32_t i = 0; i < max_local; ++i) iota_local_[i] = i;
  iota_full_.resize(max_in_dim);
  for (std::uint32_t i = 0; i < max_in_dim; ++i) iota_full_[i] = i;

  indices_.resize(layers);
  index_generation_.assign(layers, 0);
  function_generation_.assign(layers, 0);
  if (cfg_.mode != RunMode::kDenseBaseline) {
    for (std::uint32_t k = 0; k < layers; ++k) {
      lsh::LshConfig lc = net_.layers[k].lsh;
      lc.seed = derive_seed({lc.seed, net_.seed, 0x4c5348u /* "LSH" */, k});
      auto family = lsh::HashFamily::create(lc, net_.layers[k].spec.in_dim);
      indices_[k] = lsh::build_index(std::move(family), shards_[k]->weights().data(),
                                     net_.layers[k].spec.in_dim, shards_[k]->local_count(), rank);
    }
  }
  worker_scratch_.resize(pool_.size());
  gathered_.resize(layers);
}

Trainer::~Trainer() = default;

void Trainer::validate_dataset(const DatasetHandle& data) const {
  if (data.header().feature_dim != net_.input_dim) {
    throw ConfigError("dataset feature_dim " + std::to_string(data.header().feature_dim) +
                      " != network input_dim " + std::to_string(net_.input_dim));
  }
  if (data.header().label_dim > net_.layers.back().spec.width) {
    throw ConfigError("dataset label_dim " + std::to_string(data.header().label_dim) +
                      " exceeds output layer width " +
                      std::to_string(net_.layers.back().spec.width));
  }
}

Trainer::SampleInput Trainer::input_of(std::uint32_t layer, const Batch& batch,
                                       std::uint32_t sample) const {
  if (layer == 0) {
    return SampleInput{InputView::of(batch[sample].features)};
  }
  const LayerSnapshot& prev = gathered_[layer - 1];
  if (prev.implicit_full_ids) {
    return SampleInput{InputView::dense(prev.acts_of(sample))};
  }
  return SampleInput{
      InputView::sparse(prev.ids_of(sample), prev.acts_of(sample), prev.width)};
}

void Trainer::select_and_forward(std::uint32_t layer, const Batch& batch, std::uint32_t epoch,
                                 std::uint32_t batch_index, bool training) {
  const std::uint32_t B = static_cast<std::uint32_t>(batch.size());
  const std::uint32_t rank = ep_.node_id();
  NeuronShard& shard = *shards_[layer];
  const ShardRange range = shard.range();
  const std::uint32_t local = range.size();
  const bool is_output = (layer + 1 == num_layers());
  const lsh::SelectionPolicy& policy = policies_[layer];

  // With a budget covering the whole shard under UNIFORM_FILL (or in the
  // dense baseline) every neuron is active; skip the hash path entirely.
  const bool all_active =
      cfg_.mode == RunMode::kDenseBaseline ||
      (policy.fill == lsh::FillPolicy::kUniformFill && policy.budget >= local);

  if (selections_.size() < B) selections_.resize(B);
  if (!all_active) {
    pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
      std::vector<std::uint32_t> forced;
      for (std::size_t s = sb; s < se; ++s) {
        forced.clear();
        if (is_output && training) {
          for (std::uint32_t label : batch[s].labels) {
            if (range.contains(label)) forced.push_back(label - range.begin);
          }
          std::sort(forced.begin(), forced.end());
          forced.erase(std::unique(forced.begin(), forced.end()), forced.end());
        }
        const SampleInput in = input_of(layer, batch, static_cast<std::uint32_t>(s));
        const std::span<const std::uint32_t> qidx =
            in.view.contiguous() ? std::span<const std::uint32_t>{iota_full_.data(), in.view.nnz}
                                 : std::span<const std::uint32_t>{in.view.idx, in.view.nnz};
        const std::span<const float> qval{in.view.val, in.view.nnz};
        auto rng = derive_rng({policy.rng_seed, epoch, batch_index, layer,
                               static_cast<std::uint64_t>(s), rank});
        auto picked =
            lsh::select_active(indices_[layer], qidx, qval, in.view.dim, policy, rng, forced);
        std::sort(picked.begin(), picked.end());
        selections_[s] = std::move(picked);
      }
    });
  }

  // Flatten into this shard's partial snapshot.
  LayerSnapshot partial;
  partial.width = net_.layers[layer].spec.width;
  partial.num_shards = 1;
  partial.offsets.assign(B + 1, 0);
  for (std::uint32_t s = 0; s < B; ++s) {
    const std::uint32_t c = all_active ? local : static_cast<std::uint32_t>(selections_[s].size());
    partial.offsets[s + 1] = partial.offsets[s] + c;
  }
  const std::size_t total = partial.offsets[B];
  const bool dense_wire = cfg_.mode == RunMode::kDenseBaseline;
  if (!dense_wire) partial.ids.resize(total);
  partial.acts.assign(total, 0.0f);
  partial.errs.assign(total, 0.0f);
  partial.shard_counts.resize(B);
  for (std::uint32_t s = 0; s < B; ++s) partial.shard_counts[s] = partial.count_of(s);

  if (all_active) {
    // Full-width forward: rows in the outer loop, so each weight row is
    // streamed once per batch instead of once per sample.
    std::vector<InputView> inputs(B);
    for (std::uint32_t s = 0; s < B; ++s) inputs[s] = input_of(layer, batch, s).view;
    if (!dense_wire) {
      pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
        for (std::size_t s = sb; s < se; ++s) {
          std::uint32_t* out_ids = partial.ids.data() + partial.offsets[s];
          for (std::uint32_t i = 0; i < local; ++i) out_ids[i] = range.begin + i;
        }
      });
    }
    pool_.for_chunks(local, [&](std::size_t a, std::size_t b, unsigned) {
      for (std::uint32_t j = static_cast<std::uint32_t>(a); j < b; ++j) {
        for (std::uint32_t s = 0; s < B; ++s) {
          partial.acts[partial.offsets[s] + j] =
              shard.activation(j, inputs[s], /*apply_relu=*/!is_output);
        }
      }
    });
  } else {
    pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
      for (std::size_t s = sb; s < se; ++s) {
        const std::uint32_t c = partial.count_of(static_cast<std::uint32_t>(s));
        const std::span<const std::uint32_t> local_ids{selections_[s]};
        std::uint32_t* out_ids = partial.ids.data() + partial.offsets[s];
        for (std::uint32_t i = 0; i < c; ++i) out_ids[i] = range.begin + local_ids[i];
        const SampleInput in = input_of(layer, batch, static_cast<std::uint32_t>(s));
        shard.forward(in.view, local_ids, partial.acts_of_mut(static_cast<std::uint32_t>(s)),
                      /*apply_relu=*/!is_output);
      }
    });
  }

  if (recorder_ && training) {
    auto& rec = recorded_[layer];
    rec.resize(B);
    for (std::uint32_t s = 0; s < B; ++s) {
      rec[s].clear();
      const std::uint32_t c = partial.count_of(s);
      for (std::uint32_t i = 0; i < c; ++i) {
        rec[s].push_back(all_active ? range.begin + iota_local_[i] : range.begin + selections_[s][i]);
      }
    }
  }

  gathered_[layer] = transport::snapshot_sync(ep_, partial, plan_.per_layer[layer], dense_wire,
                                              transport::Phase::kForwardGather);
}

void Trainer::compute_output_errors(const Batch& batch, LayerSnapshot& local_err_partial,
                                    std::vector<double>& loss_per_sample) {
  const std::uint32_t L = num_layers();
  const LayerSnapshot& out = gathered_[L - 1];
  const std::uint32_t B = out.batch();
  const std::uint32_t rank = ep_.node_id();

  local_err_partial.width = out.width;
  local_err_partial.num_shards = 1;
  local_err_partial.offsets.assign(B + 1, 0);
  for (std::uint32_t s = 0; s < B; ++s) {
    local_err_partial.offsets[s + 1] =
        local_err_partial.offsets[s] + out.shard_counts[static_cast<std::size_t>(s) * out.num_shards + rank];
  }
  local_err_partial.errs.assign(local_err_partial.offsets[B], 0.0f);

  pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned worker) {
    std::vector<float>& probs = worker_scratch_[worker];
    for (std::size_t si = sb; si < se; ++si) {
      const auto s = static_cast<std::uint32_t>(si);
      const auto acts = out.acts_of(s);
      probs.assign(acts.begin(), acts.end());
      softmax_inplace(probs);

      const auto& labels = batch[s].labels;
      auto rel_position = [&](std::uint32_t label) -> std::uint32_t {
        if (out.implicit_full_ids) return label;
        const auto ids = out.ids_of(s);
        const auto it = std::lower_bound(ids.begin(), ids.end(), label);
        if (it == ids.end() || *it != label) {
          throw std::logic_error("label " + std::to_string(label) +
                                 " missing from the active output set");
        }
        return static_cast<std::uint32_t>(it - ids.begin());
      };

      double loss = 0.0;
      for (std::uint32_t label : labels) {
        loss -= std::log(std::max<double>(probs[rel_position(label)], 1e-30));
      }
      loss_per_sample[s] = loss / static_cast<double>(labels.size());

      // This shard's error slice: p - y restricted to owned positions.
      const auto [own_off, own_cnt] = out.shard_slice(s, rank);
      const std::uint32_t own_rel = own_off - out.offsets[s];
      float* dst = local_err_partial.errs.data() + local_err_partial.offsets[s];
      for (std::uint32_t i = 0; i < own_cnt; ++i) dst[i] = probs[own_rel + i];
      const float y = 1.0f / static_cast<float>(labels.size());
      for (std::uint32_t label : labels) {
        const std::uint32_t q = rel_position(label);
        if (q >= own_rel && q < own_rel + own_cnt) dst[q - own_rel] -= y;
      }
    }
  });
}

void Trainer::backward_layer(std::uint32_t layer, const Batch& batch) {
  const LayerSnapshot& out = gathered_[layer];
  NeuronShard& shard = *shards_[layer];
  const ShardRange range = shard.range();
  const std::uint32_t B = out.batch();
  const std::uint32_t rank = ep_.node_id();
  const auto& k = kernels::ops();

  // Weight/bias gradients for the owned active neurons. The deterministic
  // mode partitions by neuron row (no write conflicts, fixed sample order);
  // HOGWILD partitions by sample and tolerates racy accumulation (§ layer
  // contract), with atomic touch marks so no update is dropped from Adam.
  if (cfg_.parallelism == ParallelMode::kDeterministic && out.implicit_full_ids) {
    // Full-width accumulation with rows outer: every gradient row stays hot
    // across the whole batch, and all rows share one touched-coordinate
    // union (every row is active in every sample).
    std::vector<InputView> inputs(B);
    std::vector<std::uint32_t> own_offs(B);
    const std::size_t words = (shard.spec().in_dim + 63) / 64;
    std::vector<std::uint64_t> batch_mask(words, 0);
    for (std::uint32_t s = 0; s < B; ++s) {
      inputs[s] = input_of(layer, batch, s).view;
      own_offs[s] = out.shard_slice(s, rank).first;
      const InputView& in = inputs[s];
      if (in.contiguous()) {
        kernels::ops().touch_nonzero(batch_mask.data(), in.val, in.nnz);
      } else {
        for (std::uint32_t p = 0; p < in.nnz; ++p) {
          if (in.val[p] != 0.0f) {
            batch_mask[in.idx[p] / 64] |= std::uint64_t{1} << (in.idx[p] % 64);
          }
        }
      }
    }
    pool_.for_chunks(shard.local_count(), [&](std::size_t a, std::size_t b, unsigned) {
      for (std::uint32_t j = static_cast<std::uint32_t>(a); j < b; ++j) {
        for (std::uint32_t s = 0; s < B; ++s) {
          shard.accumulate_grad_only(j, out.errs[own_offs[s] + j], inputs[s]);
        }
        shard.mark_touched(j, batch_mask);
      }
    });
  } else if (cfg_.parallelism == ParallelMode::kDeterministic) {
    pool_.for_chunks(shard.local_count(), [&](std::size_t a, std::size_t b, unsigned) {
      for (std::uint32_t s = 0; s < B; ++s) {
        const auto [own_off, own_cnt] = out.shard_slice(s, rank);
        const SampleInput in = input_of(layer, batch, s);
        const std::uint32_t* base = out.ids.data();
        const std::uint32_t lo = static_cast<std::uint32_t>(
            std::lower_bound(base + own_off, base + own_off + own_cnt,
                             range.begin + static_cast<std::uint32_t>(a)) -
            base);
        const std::uint32_t hi = static_cast<std::uint32_t>(
            std::lower_bound(base + lo, base + own_off + own_cnt,
                             range.begin + static_cast<std::uint32_t>(b)) -
            base);
        for (std::uint32_t pos = lo; pos < hi; ++pos) {
          shard.accumulate<false>(out.ids[pos] - range.begin, out.errs[pos], in.view);
        }
      }
    });
  } else {
    pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
      for (std::size_t si = sb; si < se; ++si) {
        const auto s = static_cast<std::uint32_t>(si);
        const auto [own_off, own_cnt] = out.shard_slice(s, rank);
        const SampleInput in = input_of(layer, batch, s);
        for (std::uint32_t pos = own_off; pos < own_off + own_cnt; ++pos) {
          const std::uint32_t local =
              (out.implicit_full_ids ? pos - own_off : out.ids[pos] - range.begin);
          shard.accumulate<true>(local, out.errs[pos], in.view);
        }
      }
    });
  }

  if (layer == 0) return;

  // Partial input errors over the previous layer's active union, reduced
  // across nodes, then RELU-masked locally (the gathered activations are
  // replicated, so every node applies the identical mask).
  LayerSnapshot& prev = gathered_[layer - 1];
  partials_.assign(prev.acts.size(), 0.0f);
  if (out.implicit_full_ids) {
    // Rows outer with per-worker destination buffers; merging in worker
    // order reproduces the row-ascending summation of the serial loop.
    std::vector<std::uint32_t> own_offs(B);
    for (std::uint32_t s = 0; s < B; ++s) own_offs[s] = out.shard_slice(s, rank).first;
    if (worker_partials_.size() < pool_.size()) worker_partials_.resize(pool_.size());
    for (auto& buf : worker_partials_) buf.clear();  // idle workers stay empty
    const std::size_t total = partials_.size();
    pool_.for_chunks(shard.local_count(), [&](std::size_t a, std::size_t b, unsigned w) {
      auto& buf = worker_partials_[w];
      buf.assign(total, 0.0f);
      for (std::uint32_t j = static_cast<std::uint32_t>(a); j < b; ++j) {
        const float* row = shard.weight_row(j).data();
        for (std::uint32_t s = 0; s < B; ++s) {
          const float err = out.errs[own_offs[s] + j];
          if (err == 0.0f) continue;
          float* dst = buf.data() + prev.offsets[s];
          if (prev.implicit_full_ids) {
            k.axpy_dense(dst, row, prev.count_of(s), err);
          } else {
            k.axpy_gather(dst, row, prev.ids.data() + prev.offsets[s], prev.count_of(s), err);
          }
        }
      }
    });
    for (unsigned w = 0; w < pool_.size(); ++w) {
      const auto& buf = worker_partials_[w];
      if (buf.empty()) continue;
      for (std::size_t i = 0; i < total; ++i) partials_[i] += buf[i];
    }
  } else {
    pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
      for (std::size_t si = sb; si < se; ++si) {
        const auto s = static_cast<std::uint32_t>(si);
        const auto [own_off, own_cnt] = out.shard_slice(s, rank);
        const std::uint32_t prev_off = prev.offsets[s];
        const std::uint32_t prev_cnt = prev.count_of(s);
        float* dst = partials_.data() + prev_off;
        for (std::uint32_t pos = own_off; pos < own_off + own_cnt; ++pos) {
          const float err = out.errs[pos];
          if (err == 0.0f) continue;
          const std::uint32_t local = out.ids[pos] - range.begin;
          const float* w = shard.weight_row(local).data();
          if (prev.implicit_full_ids) {
            k.axpy_dense(dst, w, prev_cnt, err);
          } else {
            k.axpy_gather(dst, w, prev.ids.data() + prev_off, prev_cnt, err);
          }
        }
      }
    });
  }
  ep_.all_reduce_sum(partials_, transport::PayloadKind::kErrorPartials,
                     transport::Phase::kGradReduce);
  pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
    for (std::size_t si = sb; si < se; ++si) {
      const auto s = static_cast<std::uint32_t>(si);
      for (std::uint32_t pos = prev.offsets[s]; pos < prev.offsets[s + 1]; ++pos) {
        prev.errs[pos] = prev.acts[pos] > 0.0f ? partials_[pos] : 0.0f;
      }
    }
  });
}

void Trainer::adam_step_all() {
  for (std::uint32_t layer = 0; layer < num_layers(); ++layer) {
    NeuronShard& shard = *shards_[layer];
    const std::uint64_t t = shard.begin_adam_step();
    pool_.for_chunks(shard.local_count(), [&](std::size_t a, std::size_t b, unsigned) {
      shard.adam_step_rows(cfg_.optimizer, t, static_cast<std::uint32_t>(a),
                           static_cast<std::uint32_t>(b));
    });
  }
}

double Trainer::train_batch(const Batch& batch, std::uint32_t epoch, std::uint32_t batch_index) {
  const std::uint32_t B = static_cast<std::uint32_t>(batch.size());
  const std::uint32_t L = num_layers();
  if (recorder_) {
    recorded_.assign(L, {});
  }
  for (std::uint32_t k = 0; k < L; ++k) {
    select_and_forward(k, batch, epoch, batch_index, /*training=*/true);
  }
  std::vector<double> loss_per_sample(B, 0.0);
  LayerSnapshot err_partial;
  compute_output_errors(batch, err_partial, loss_per_sample);
  transport::error_sync(ep_, gathered_[L - 1], err_partial);

  double loss = 0.0;
  for (double v : loss_per_sample) loss += v;
  loss /= B;
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch_index));
  }

  for (std::uint32_t k = L; k-- > 0;) {
    backward_layer(k, batch);
  }
  adam_step_all();

  if (recorder_) recorder_(epoch, batch_index, recorded_);
  return loss;
}

void Trainer::rebuild_indices(bool regenerate_functions) {
  if (cfg_.mode == RunMode::kDenseBaseline) return;
  for (std::uint32_t k = 0; k < num_layers(); ++k) {
    std::optional<std::uint64_t> new_seed;
    if (regenerate_functions) {
      new_seed = derive_seed({net_.layers[k].lsh.seed, net_.seed, 0x524247u /* "RBG" */, k,
                              function_generation_[k] + 1});
      ++function_generation_[k];
    }
    indices_[k] = lsh::rebuild(indices_[k], shards_[k]->weights().data(),
                               net_.layers[k].spec.in_dim, new_seed);
    ++index_generation_[k];
  }
}

TrainResult Trainer::train(const DatasetHandle& data) {
  validate_dataset(data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.record(i).labels.empty()) {
      throw ConfigError("record " + std::to_string(i) + " has no labels");
    }
  }
  TrainResult result;
  std::uint64_t global_batch = 0;
  for (std::uint32_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    std::optional<std::uint64_t> seed;
    if (cfg_.shuffle_seed) seed = derive_seed({*cfg_.shuffle_seed, epoch});
    BatchStream stream(data, cfg_.batch_size, seed);
    double epoch_loss = 0.0;
    const std::size_t batches = stream.num_batches();
    for (std::size_t b = 0; b < batches; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      const transport::CommStats before = ep_.stats();
      const Batch batch = stream.batch(b);
      const double loss =
          train_batch(batch, epoch, static_cast<std::uint32_t>(b));
      epoch_loss += loss;
      ++global_batch;
      if (global_batch % cfg_.rebuild_period == 0) {
        ++rebuild_count_;
        rebuild_indices(rebuild_count_ % cfg_.hash_regen_interval == 0);
      }
      if (metrics_) {
        const transport::CommStats after = ep_.stats();
        BatchMetrics m;
        m.epoch = epoch;
        m.batch = static_cast<std::uint32_t>(b);
        m.loss = loss;
        auto phase_delta = [&](transport::Phase p) {
          const auto& pa = after.phase[static_cast<std::size_t>(p)];
          const auto& pb = before.phase[static_cast<std::size_t>(p)];
          return pa.bytes_sent + pa.bytes_received - pb.bytes_sent - pb.bytes_received;
        };
        m.bytes_forward_gather = phase_delta(transport::Phase::kForwardGather);
        m.bytes_error_sync = phase_delta(transport::Phase::kErrorSync);
        m.bytes_grad_reduce = phase_delta(transport::Phase::kGradReduce);
        m.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
        metrics_(m);
      }
    }
    result.per_epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
    result.batches = global_batch;
    ep_.barrier();
    if (epoch_hook_) epoch_hook_(epoch);
  }
  result.final_loss = result.per_epoch_loss.back();
  return result;
}

EvalResult Trainer::evaluate(const DatasetHandle& data, std::uint64_t max_samples,
                             std::uint32_t eval_batch_size) {
  validate_dataset(data);
  const std::uint64_t samples =
      max_samples == 0 ? data.size() : std::min<std::uint64_t>(max_samples, data.size());
  const std::uint32_t L = num_layers();
  const std::uint32_t out_width = net_.layers.back().spec.width;
  const std::uint32_t topk = std::min(5u, out_width);

  double hits1 = 0.0;
  double hits5 = 0.0;
  std::vector<LayerSnapshot> snaps(L);
  std::vector<double> h1(eval_batch_size), h5(eval_batch_size);

  for (std::uint64_t begin = 0; begin < samples; begin += eval_batch_size) {
    const std::uint32_t B =
        static_cast<std::uint32_t>(std::min<std::uint64_t>(eval_batch_size, samples - begin));
    Batch batch;
    batch.records.reserve(B);
    for (std::uint32_t i = 0; i < B; ++i) batch.records.push_back(&data.record(begin + i));

    for (std::uint32_t k = 0; k < L; ++k) {
      NeuronShard& shard = *shards_[k];
      const std::uint32_t local = shard.local_count();
      LayerSnapshot partial;
      partial.width = net_.layers[k].spec.width;
      partial.num_shards = 1;
      partial.offsets.resize(B + 1);
      for (std::uint32_t s = 0; s <= B; ++s) partial.offsets[s] = s * local;
      partial.acts.assign(static_cast<std::size_t>(B) * local, 0.0f);
      partial.errs.assign(static_cast<std::size_t>(B) * local, 0.0f);
      partial.shard_counts.assign(B, local);
      const bool is_output = (k + 1 == L);
      std::vector<InputView> inputs(B);
      for (std::uint32_t s = 0; s < B; ++s) {
        inputs[s] = (k == 0) ? InputView::of(batch[s].features)
                             : InputView::dense(snaps[k - 1].acts_of(s));
      }
      pool_.for_chunks(local, [&](std::size_t a, std::size_t b, unsigned) {
        for (std::uint32_t j = static_cast<std::uint32_t>(a); j < b; ++j) {
          for (std::uint32_t s = 0; s < B; ++s) {
            partial.acts[partial.offsets[s] + j] = shard.activation(j, inputs[s], !is_output);
          }
        }
      });
      snaps[k] = transport::snapshot_sync(ep_, partial, plan_.per_layer[k], /*dense=*/true,
                                          transport::Phase::kForwardGather);
    }

    const LayerSnapshot& out = snaps[L - 1];
    pool_.for_chunks(B, [&](std::size_t sb, std::size_t se, unsigned) {
      for (std::size_t si = sb; si < se; ++si) {
        const auto s = static_cast<std::uint32_t>(si);
        const auto acts = out.acts_of(s);
        // Top-k by score, ties to the lower id.
        std::uint32_t top_ids[5];
        float top_vals[5];
        std::uint32_t filled = 0;
        for (std::uint32_t id = 0; id < acts.size(); ++id) {
          const float v = acts[id];
          std::uint32_t pos = filled;
          while (pos > 0 && top_vals[pos - 1] < v) --pos;
          if (pos >= topk) continue;
          const std::uint32_t last = std::min(filled, topk - 1);
          for (std::uint32_t q = last; q > pos; --q) {
            top_vals[q] = top_vals[q - 1];
            top_ids[q] = top_ids[q - 1];
          }
          top_vals[pos] = v;
          top_ids[pos] = id;
          if (filled < topk) ++filled;
        }
        const auto& labels = batch[s].labels;
        auto is_label = [&](std::uint32_t id) {
          return std::find(labels.begin(), labels.end(), id) != labels.end();
        };
        h1[s] = is_label(top_ids[0]) ? 1.0 : 0.0;
        double inter = 0.0;
        for (std::uint32_t q = 0; q < filled; ++q) inter += is_label(top_ids[q]) ? 1.0 : 0.0;
        h5[s] = inter / topk;
      }
    });
    for (std::uint32_t s = 0; s < B; ++s) {
      hits1 += h1[s];
      hits5 += h5[s];
    }
  }

  EvalResult res;
  res.samples = samples;
  res.precision_at_1 = hits1 / static_cast<double>(samples);
  res.precision_at_5 = hits5 / static_cast<double>(samples);
  return res;
}

}  // namespace hashmesh
