#include "hashmesh/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace hashmesh {

namespace {

constexpr char kMagic[4] = {'H', 'M', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

#pragma pack(push, 1)
struct ShardFileHeader {
  char magic[4];
  std::uint16_t version;
  std::uint16_t reserved;
  std::uint32_t layer_index;
  std::uint32_t in_dim;
  std::uint32_t width;
  std::uint8_t activation;
  std::uint8_t pad[3];
  float sparsity;
  std::uint32_t shard_id;
  std::uint32_t range_begin;
  std::uint32_t range_end;
  std::uint64_t step_t;
};
#pragma pack(pop)

std::string shard_file_name(std::uint32_t layer, std::uint32_t shard) {
  return "layer" + std::to_string(layer) + "_shard" + std::to_string(shard) + ".bin";
}

void write_span(std::ofstream& out, std::span<const float> data) {
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

void read_span(std::ifstream& in, std::span<float> data, const std::string& path) {
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw ConfigError("checkpoint file '" + path + "' is truncated");
}

}  // namespace

void save_shard_files(const std::string& dir, Trainer& trainer) {
  std::filesystem::create_directories(dir);
  for (std::uint32_t k = 0; k < trainer.num_layers(); ++k) {
    NeuronShard& shard = trainer.shard(k);
    const std::string path =
        (std::filesystem::path(dir) / shard_file_name(k, shard.shard_id())).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open checkpoint file '" + path + "' for writing");

    ShardFileHeader h{};
    std::memcpy(h.magic, kMagic, 4);
    h.version = kVersion;
    h.layer_index = k;
    h.in_dim = shard.spec().in_dim;
    h.width = shard.spec().width;
    h.activation = static_cast<std::uint8_t>(shard.spec().activation);
    h.sparsity = shard.spec().sparsity;
    h.shard_id = shard.shard_id();
    h.range_begin = shard.range().begin;
    h.range_end = shard.range().end;
    h.step_t = shard.step();
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));

    auto state = shard.state();
    write_span(out, state.weights);
    write_span(out, state.biases);
    write_span(out, state.m_w);
    write_span(out, state.v_w);
    write_span(out, state.m_b);
    write_span(out, state.v_b);
    if (!out) throw ConfigError("write to checkpoint file '" + path + "' failed");
  }
}

void save_manifest(const std::string& dir, const Trainer& trainer) {
  std::filesystem::create_directories(dir);
  const NetworkSpec& net = trainer.network();
  nlohmann::json j;
  j["version"] = kVersion;
  j["nodes"] = trainer.plan().per_layer.front().size();
  j["input_dim"] = net.input_dim;
  j["seed"] = net.seed;
  j["layers"] = nlohmann::json::array();
  for (std::uint32_t k = 0; k < trainer.num_layers(); ++k) {
    const LayerSpec& spec = net.layers[k].spec;
    nlohmann::json layer;
    layer["in_dim"] = spec.in_dim;
    layer["width"] = spec.width;
    layer["activation"] = spec.activation == Activation::kSoftmax ? "softmax" : "relu";
    layer["sparsity"] = spec.sparsity;
    layer["shards"] = nlohmann::json::array();
    for (std::uint32_t r = 0; r < trainer.plan().per_layer[k].size(); ++r) {
      const ShardRange range = trainer.plan().per_layer[k][r];
      layer["shards"].push_back({{"shard", r},
                                 {"range", {range.begin, range.end}},
                                 {"file", shard_file_name(k, r)}});
    }
    j["layers"].push_back(std::move(layer));
  }
  const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint manifest '" + path + "'");
  out << j.dump(2) << '\n';
}

void load_checkpoint(const std::string& dir, Trainer& trainer) {
  const std::string manifest_path = (std::filesystem::path(dir) / "manifest.json").string();
  std::ifstream min(manifest_path);
  if (!min) throw ConfigError("cannot open checkpoint manifest '" + manifest_path + "'");
  nlohmann::json manifest;
  try {
    min >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint manifest '" + manifest_path + "' is not valid JSON: " +
                      e.what());
  }
  if (manifest.value("version", 0) != kVersion) {
    throw ConfigError("checkpoint manifest version mismatch");
  }
  const auto n = static_cast<std::uint32_t>(trainer.plan().per_layer.front().size());
  if (manifest.value("nodes", 0u) != n) {
    throw ConfigError("checkpoint was written for " +
                      std::to_string(manifest.value("nodes", 0u)) + " nodes, cluster has " +
                      std::to_string(n));
  }
  if (manifest.value("input_dim", 0u) != trainer.network().input_dim ||
      manifest["layers"].size() != trainer.num_layers()) {
    throw ConfigError("checkpoint network shape does not match the configuration");
  }

  for (std::uint32_t k = 0; k < trainer.num_layers(); ++k) {
    NeuronShard& shard = trainer.shard(k);
    const std::string path =
        (std::filesystem::path(dir) / shard_file_name(k, shard.shard_id())).string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint file '" + path + "'");
    ShardFileHeader h{};
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in || std::memcmp(h.magic, kMagic, 4) != 0) {
      throw ConfigError("checkpoint file '" + path + "' has a bad magic");
    }
    if (h.version != kVersion) {
      throw ConfigError("checkpoint file '" + path + "' has version " +
                        std::to_string(h.version) + ", expected " + std::to_string(kVersion));
    }
    const LayerSpec& spec = shard.spec();
    if (h.layer_index != k || h.in_dim != spec.in_dim || h.width != spec.width ||
        h.activation != static_cast<std::uint8_t>(spec.activation) ||
        h.shard_id != shard.shard_id() || h.range_begin != shard.range().begin ||
        h.range_end != shard.range().end) {
      throw ConfigError("checkpoint file '" + path + "' does not match layer " +
                        std::to_string(k) + " shard " + std::to_string(shard.shard_id()));
    }
    auto state = shard.state();
    read_span(in, state.weights, path);
    read_span(in, state.biases, path);
    read_span(in, state.m_w, path);
    read_span(in, state.v_w, path);
    read_span(in, state.m_b, path);
    read_span(in, state.v_b, path);
    shard.set_step(h.step_t);
    char extra;
    if (in.read(&extra, 1)) {
      throw ConfigError("checkpoint file '" + path + "' has trailing bytes");
    }
  }
  trainer.rebuild_indices(/*regenerate_functions=*/false);
}

RawShardFile read_shard_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint file '" + path + "'");
  ShardFileHeader h{};
  in.read(reinterpret_cast<char*>(&h), sizeof(h));
  if (!in || std::memcmp(h.magic, kMagic, 4) != 0) {
    throw ConfigError("checkpoint file '" + path + "' has a bad magic");
  }
  if (h.version != kVersion) {
    throw ConfigError("checkpoint file '" + path + "' has version " + std::to_string(h.version) +
                      ", expected " + std::to_string(kVersion));
  }
  RawShardFile raw;
  raw.layer_index = h.layer_index;
  raw.in_dim = h.in_dim;
  raw.width = h.width;
  raw.activation = h.activation;
  raw.sparsity = h.sparsity;
  raw.shard_id = h.shard_id;
  raw.range_begin = h.range_begin;
  raw.range_end = h.range_end;
  raw.step_t = h.step_t;
  const std::uint32_t local = h.range_end - h.range_begin;
  raw.weights.resize(static_cast<std::size_t>(local) * h.in_dim);
  raw.biases.resize(local);
  read_span(in, raw.weights, path);
  read_span(in, raw.biases, path);
  return raw;
}

}  // namespace hashmesh
