#pragma once

// Float64 dense reference implementation, independent of the production
// code paths: dense matrices, sequential loops, no kernels, no snapshots.
// It mirrors the documented semantics (softmax over the active union,
// cross-entropy gradient p - y, per-batch accumulation, Adam restricted to
// touched cells with global-step bias correction) so the float32 engine can
// be checked against it to tight tolerances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "hashmesh/common.hpp"
#include "hashmesh/layer.hpp"
#include "hashmesh/sparse.hpp"

namespace oracle {

struct DenseNet {
  struct Layer {
    std::uint32_t in_dim = 0;
    std::uint32_t width = 0;
    bool relu = true;
    std::vector<double> w, b;
    std::vector<double> mw, vw, mb, vb;
    std::vector<double> gw, gb;
    std::vector<std::uint8_t> touch_w, touch_b;
  };
  std::vector<Layer> layers;
  std::uint64_t t = 0;

  // Replicates the engine's float32 initialization (same per-row seeded
  // generator), then promotes to double.
  static DenseNet init(std::uint32_t input_dim, const std::vector<std::uint32_t>& widths,
                       std::uint64_t seed) {
    DenseNet net;
    std::uint32_t in = input_dim;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Layer layer;
      layer.in_dim = in;
      layer.width = widths[k];
      layer.relu = (k + 1 != widths.size());
      layer.w.resize(static_cast<std::size_t>(layer.width) * in);
      layer.b.assign(layer.width, 0.0);
      layer.mw.assign(layer.w.size(), 0.0);
      layer.vw.assign(layer.w.size(), 0.0);
      layer.mb.assign(layer.width, 0.0);
      layer.vb.assign(layer.width, 0.0);
      layer.gw.assign(layer.w.size(), 0.0);
      layer.gb.assign(layer.width, 0.0);
      layer.touch_w.assign(layer.w.size(), 0);
      layer.touch_b.assign(layer.width, 0);
      const float bound = 1.0f / std::sqrt(static_cast<float>(in));
      std::uniform_real_distribution<float> dist(-bound, bound);
      for (std::uint32_t g = 0; g < layer.width; ++g) {
        auto rng = hashmesh::derive_rng(
            {seed, 0x57u, static_cast<std::uint64_t>(k), g});
        for (std::uint32_t i = 0; i < in; ++i) {
          layer.w[static_cast<std::size_t>(g) * in + i] = static_cast<double>(dist(rng));
        }
      }
      in = layer.width;
      net.layers.push_back(std::move(layer));
    }
    return net;
  }

  // Forward pass for one sample over explicit active sets; fills per-layer
  // dense activation vectors. active[k] must be sorted global ids.
  void forward_sample(const hashmesh::DataRecord& rec,
                      const std::vector<std::vector<std::uint32_t>>& active,
                      std::vector<std::vector<double>>& acts) const {
    std::vector<double> x(layers[0].in_dim, 0.0);
    for (std::size_t i = 0; i < rec.features.indices.size(); ++i) {
      x[rec.features.indices[i]] = static_cast<double>(rec.features.values[i]);
    }
    acts.assign(layers.size() + 1, {});
    acts[0] = x;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const Layer& L = layers[k];
      std::vector<double> y(L.width, 0.0);
      for (std::uint32_t j : active[k]) {
        double pre = L.b[j];
        const double* row = L.w.data() + static_cast<std::size_t>(j) * L.in_dim;
        for (std::uint32_t i = 0; i < L.in_dim; ++i) pre += row[i] * acts[k][i];
        y[j] = (L.relu && pre < 0.0) ? 0.0 : pre;
      }
      acts[k + 1] = std::move(y);
    }
  }

  // Softmax over the sample's active output set; p indexed by position in
  // active_out.
  static std::vector<double> softmax_active(const std::vector<double>& out_acts,
                                            const std::vector<std::uint32_t>& active_out) {
    double mx = -1e300;
    for (std::uint32_t j : active_out) mx = std::max(mx, out_acts[j]);
    std::vector<double> p(active_out.size());
    double sum = 0.0;
    for (std::size_t q = 0; q < active_out.size(); ++q) {
      p[q] = std::exp(out_acts[active_out[q]] - mx);
      sum += p[q];
    }
    for (double& v : p) v /= sum;
    return p;
  }

  // One batch step over recorded/explicit active sets: accumulate gradients
  // across the batch, then a single Adam update over the touched cells.
  // Returns the mean multi-label cross-entropy.
  double step(const std::vector<const hashmesh::DataRecord*>& batch,
              const std::vector<std::vector<std::vector<std::uint32_t>>>& active,  // [k][s]
              const hashmesh::OptimizerConfig& opt) {
    const std::size_t L = layers.size();
    double loss_sum = 0.0;
    std::vector<std::vector<double>> acts;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      std::vector<std::vector<std::uint32_t>> sample_active(L);
      for (std::size_t k = 0; k < L; ++k) sample_active[k] = active[k][s];
      forward_sample(*batch[s], sample_active, acts);

      const auto& active_out = sample_active[L - 1];
      const std::vector<double> p = softmax_active(acts[L], active_out);
      const auto& labels = batch[s]->labels;
      const double y = 1.0 / static_cast<double>(labels.size());
      std::vector<double> err(layers[L - 1].width, 0.0);
      for (std::size_t q = 0; q < active_out.size(); ++q) err[active_out[q]] = p[q];
      for (std::uint32_t label : labels) {
        const auto it = std::lower_bound(active_out.begin(), active_out.end(), label);
        loss_sum += -std::log(std::max(p[static_cast<std::size_t>(it - active_out.begin())],
                                       1e-300)) *
                    y;
        err[label] -= y;
      }

      for (std::size_t k = L; k-- > 0;) {
        Layer& lay = layers[k];
        const std::vector<double>& x = acts[k];
        for (std::uint32_t j : sample_active[k]) {
          const double e = err[j];
          lay.gb[j] += e;
          lay.touch_b[j] = 1;
          double* grow = lay.gw.data() + static_cast<std::size_t>(j) * lay.in_dim;
          std::uint8_t* trow = lay.touch_w.data() + static_cast<std::size_t>(j) * lay.in_dim;
          for (std::uint32_t i = 0; i < lay.in_dim; ++i) {
            if (x[i] != 0.0) {
              grow[i] += e * x[i];
              trow[i] = 1;
            }
          }
        }
        if (k > 0) {
          std::vector<double> eprev(layers[k - 1].width, 0.0);
          for (std::uint32_t i : sample_active[k - 1]) {
            double sum = 0.0;
            for (std::uint32_t j : sample_active[k]) {
              sum += err[j] * lay.w[static_cast<std::size_t>(j) * lay.in_dim + i];
            }
            eprev[i] = (x[i] > 0.0) ? sum : 0.0;
          }
          err = std::move(eprev);
        }
      }
    }

    ++t;
    const double ib1 = 1.0 / (1.0 - std::pow(static_cast<double>(opt.beta1), t));
    const double ib2 = 1.0 / (1.0 - std::pow(static_cast<double>(opt.beta2), t));
    for (Layer& lay : layers) {
      auto update = [&](double& w, double& m, double& v, double& g, std::uint8_t& touch) {
        if (!touch) return;
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
        w -= opt.lr * (m * ib1) / (std::sqrt(v * ib2) + opt.epsilon);
        g = 0.0;
        touch = 0;
      };
      for (std::size_t c = 0; c < lay.w.size(); ++c) {
        update(lay.w[c], lay.mw[c], lay.vw[c], lay.gw[c], lay.touch_w[c]);
      }
      for (std::size_t c = 0; c < lay.b.size(); ++c) {
        update(lay.b[c], lay.mb[c], lay.vb[c], lay.gb[c], lay.touch_b[c]);
      }
    }
    return loss_sum / static_cast<double>(batch.size());
  }

  // Sum over the batch of per-sample cross-entropies with every neuron
  // active; no mutation (finite-difference probes).
  double loss_sum_full(const std::vector<const hashmesh::DataRecord*>& batch) const {
    const std::size_t L = layers.size();
    std::vector<std::vector<std::uint32_t>> full(L);
    for (std::size_t k = 0; k < L; ++k) {
      full[k].resize(layers[k].width);
      for (std::uint32_t j = 0; j < layers[k].width; ++j) full[k][j] = j;
    }
    double total = 0.0;
    std::vector<std::vector<double>> acts;
    for (const auto* rec : batch) {
      forward_sample(*rec, full, acts);
      const std::vector<double> p = softmax_active(acts[L], full[L - 1]);
      const double y = 1.0 / static_cast<double>(rec->labels.size());
      for (std::uint32_t label : rec->labels) {
        total += -std::log(std::max(p[label], 1e-300)) * y;
      }
    }
    return total;
  }
};

// All-active set builder for dense-mode comparisons.
inline std::vector<std::vector<std::vector<std::uint32_t>>> full_active(
    const std::vector<std::uint32_t>& widths, std::size_t batch) {
  std::vector<std::vector<std::vector<std::uint32_t>>> active(widths.size());
  for (std::size_t k = 0; k < widths.size(); ++k) {
    std::vector<std::uint32_t> ids(widths[k]);
    for (std::uint32_t j = 0; j < widths[k]; ++j) ids[j] = j;
    active[k].assign(batch, ids);
  }
  return active;
}

}  // namespace oracle
