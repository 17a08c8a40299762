#include "hashmesh/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>

extern char** environ;

namespace hashmesh {

namespace {

using nlohmann::json;

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw ConfigError(field + ": " + msg);
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& scope) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    field_error(scope + key, "has the wrong type");
  }
}

lsh::Family parse_family(const std::string& s, const std::string& scope) {
  if (s == "srp") return lsh::Family::kSrp;
  if (s == "dwta") return lsh::Family::kDwta;
  field_error(scope, "unknown hash family '" + s + "' (srp|dwta)");
}

Activation parse_activation(const std::string& s, const std::string& scope) {
  if (s == "relu") return Activation::kRelu;
  if (s == "softmax") return Activation::kSoftmax;
  field_error(scope, "unknown activation '" + s + "' (relu|softmax)");
}

lsh::LshConfig parse_lsh(const json& j, const std::string& scope) {
  lsh::LshConfig cfg;
  const std::string fam = get_or<std::string>(j, "family", "dwta", scope);
  cfg.family = parse_family(fam, scope + "family");
  cfg.hashes_per_table =
      get_or<std::uint32_t>(j, "hashes_per_table", cfg.family == lsh::Family::kSrp ? 9u : 6u,
                            scope);
  cfg.num_tables = get_or<std::uint32_t>(j, "tables", 8u, scope);
  cfg.dwta_bin_size = get_or<std::uint32_t>(j, "dwta_bin_size", 8u, scope);
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0u, scope);
  return cfg;
}

json lsh_to_json(const lsh::LshConfig& cfg) {
  return json{{"family", cfg.family == lsh::Family::kSrp ? "srp" : "dwta"},
              {"hashes_per_table", cfg.hashes_per_table},
              {"tables", cfg.num_tables},
              {"dwta_bin_size", cfg.dwta_bin_size},
              {"seed", cfg.seed}};
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  if (!j.contains("version")) field_error("version", "is required");
  cfg.version = j.at("version").get<int>();
  if (cfg.version != 1) field_error("version", "unsupported value " + std::to_string(cfg.version));
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1u, "");

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    cfg.train_path = get_or<std::string>(d, "train", "", "dataset.");
    cfg.test_path = get_or<std::string>(d, "test", "", "dataset.");
  }

  if (!j.contains("network")) field_error("network", "is required");
  const json& net = j.at("network");
  cfg.network.input_dim = get_or<std::uint32_t>(net, "input_dim", 0u, "network.");
  cfg.network.seed = cfg.seed;
  if (!net.contains("layers") || !net.at("layers").is_array() || net.at("layers").empty()) {
    field_error("network.layers", "must be a non-empty array");
  }
  std::size_t li = 0;
  for (const json& l : net.at("layers")) {
    const std::string scope = "network.layers[" + std::to_string(li) + "].";
    LayerConfig layer;
    layer.spec.width = get_or<std::uint32_t>(l, "width", 0u, scope);
    layer.spec.sparsity = get_or<float>(l, "sparsity", 1.0f, scope);
    const std::string act = get_or<std::string>(
        l, "activation", li + 1 == net.at("layers").size() ? "softmax" : "relu", scope);
    layer.spec.activation = parse_activation(act, scope + "activation");
    layer.lsh = parse_lsh(l.contains("lsh") ? l.at("lsh") : json::object(), scope + "lsh.");
    cfg.network.layers.push_back(std::move(layer));
    ++li;
  }

  if (j.contains("training")) {
    const json& t = j.at("training");
    const std::string scope = "training.";
    cfg.training.batch_size = get_or<std::uint32_t>(t, "batch_size", 64u, scope);
    cfg.training.epochs = get_or<std::uint32_t>(t, "epochs", 1u, scope);
    cfg.training.rebuild_period = get_or<std::uint32_t>(t, "rebuild_period", 50u, scope);
    cfg.training.hash_regen_interval =
        get_or<std::uint32_t>(t, "hash_regen_interval", 4u, scope);
    cfg.training.worker_threads = get_or<std::uint32_t>(t, "worker_threads", 1u, scope);
    const std::string mode = get_or<std::string>(t, "mode", "sparse", scope);
    if (mode == "sparse") {
      cfg.training.mode = RunMode::kSparse;
    } else if (mode == "dense_baseline") {
      cfg.training.mode = RunMode::kDenseBaseline;
    } else {
      field_error("training.mode", "unknown value '" + mode + "' (sparse|dense_baseline)");
    }
    const std::string par = get_or<std::string>(t, "parallelism", "deterministic", scope);
    if (par == "deterministic") {
      cfg.training.parallelism = ParallelMode::kDeterministic;
    } else if (par == "hogwild") {
      cfg.training.parallelism = ParallelMode::kHogwild;
    } else {
      field_error("training.parallelism", "unknown value '" + par + "'");
    }
    const std::string fill = get_or<std::string>(t, "fill", "uniform", scope);
    if (fill == "uniform") {
      cfg.training.fill = lsh::FillPolicy::kUniformFill;
    } else if (fill == "stop_early") {
      cfg.training.fill = lsh::FillPolicy::kStopEarly;
    } else {
      field_error("training.fill", "unknown value '" + fill + "' (uniform|stop_early)");
    }
    if (t.contains("shuffle_seed")) {
      cfg.training.shuffle_seed = t.at("shuffle_seed").get<std::uint64_t>();
    }
    if (t.contains("optimizer")) {
      const json& o = t.at("optimizer");
      cfg.training.optimizer.lr = get_or<float>(o, "lr", 1e-4f, "training.optimizer.");
      cfg.training.optimizer.beta1 = get_or<float>(o, "beta1", 0.9f, "training.optimizer.");
      cfg.training.optimizer.beta2 = get_or<float>(o, "beta2", 0.999f, "training.optimizer.");
      cfg.training.optimizer.epsilon = get_or<float>(o, "epsilon", 1e-8f, "training.optimizer.");
    }
  }

  if (j.contains("cluster")) {
    const json& c = j.at("cluster");
    cfg.cluster.transport = get_or<std::string>(c, "transport", "loopback", "cluster.");
    cfg.cluster.nodes = get_or<std::uint32_t>(c, "nodes", 1u, "cluster.");
    cfg.cluster.peers = get_or<std::vector<std::string>>(c, "peers", {}, "cluster.");
    cfg.cluster.timeout_ms = get_or<int>(c, "timeout_ms", 30000, "cluster.");
    cfg.cluster.scheduler_seed = get_or<std::uint64_t>(c, "scheduler_seed", 0u, "cluster.");
  }

  cfg.output_dir = get_or<std::string>(j, "output_dir", "run_out", "");
  cfg.bench_batches = get_or<std::uint32_t>(j, "bench_batches", 3u, "");
  return cfg;
}

json RunConfig::to_json() const {
  json j;
  j["version"] = version;
  j["seed"] = seed;
  j["dataset"] = {{"train", train_path}, {"test", test_path}};
  json layers = json::array();
  for (const LayerConfig& l : network.layers) {
    layers.push_back({{"width", l.spec.width},
                      {"sparsity", l.spec.sparsity},
                      {"activation", l.spec.activation == Activation::kSoftmax ? "softmax"
                                                                               : "relu"},
                      {"lsh", lsh_to_json(l.lsh)}});
  }
  j["network"] = {{"input_dim", network.input_dim}, {"layers", std::move(layers)}};
  json t;
  t["batch_size"] = training.batch_size;
  t["epochs"] = training.epochs;
  t["rebuild_period"] = training.rebuild_period;
  t["hash_regen_interval"] = training.hash_regen_interval;
  t["worker_threads"] = training.worker_threads;
  t["mode"] = training.mode == RunMode::kDenseBaseline ? "dense_baseline" : "sparse";
  t["parallelism"] =
      training.parallelism == ParallelMode::kHogwild ? "hogwild" : "deterministic";
  t["fill"] = training.fill == lsh::FillPolicy::kStopEarly ? "stop_early" : "uniform";
  if (training.shuffle_seed) t["shuffle_seed"] = *training.shuffle_seed;
  t["optimizer"] = {{"lr", training.optimizer.lr},
                    {"beta1", training.optimizer.beta1},
                    {"beta2", training.optimizer.beta2},
                    {"epsilon", training.optimizer.epsilon}};
  j["training"] = std::move(t);
  j["cluster"] = {{"transport", cluster.transport},
                  {"nodes", cluster.nodes},
                  {"peers", cluster.peers},
                  {"timeout_ms", cluster.timeout_ms},
                  {"scheduler_seed", cluster.scheduler_seed}};
  j["output_dir"] = output_dir;
  j["bench_batches"] = bench_batches;
  return j;
}

void RunConfig::validate() const {
  NetworkSpec net = network;
  net.finalize_and_validate();  // dims chain + per-layer checks
  training.validate();
  if (cluster.transport != "loopback" && cluster.transport != "tcp") {
    field_error("cluster.transport", "must be 'loopback' or 'tcp'");
  }
  if (cluster.nodes < 1) field_error("cluster.nodes", "must be >= 1");
  if (cluster.transport == "tcp" && cluster.peers.size() != cluster.nodes) {
    field_error("cluster.peers",
                "must list exactly one host:port per node (" + std::to_string(cluster.nodes) +
                    " expected, " + std::to_string(cluster.peers.size()) + " given)");
  }
  for (const LayerConfig& l : net.layers) {
    if (l.spec.width < cluster.nodes) {
      field_error("network.layers", "layer width " + std::to_string(l.spec.width) +
                                        " is smaller than the node count");
    }
  }
  if (cluster.timeout_ms <= 0) field_error("cluster.timeout_ms", "must be positive");
}

void apply_env_overrides(nlohmann::json& j, const char* prefix) {
  const std::size_t plen = std::strlen(prefix);
  for (char** env = environ; *env != nullptr; ++env) {
    const std::string_view entry(*env);
    if (entry.substr(0, plen) != prefix) continue;
    const auto eq = entry.find('=');
    if (eq == std::string_view::npos) continue;
    std::string keypath(entry.substr(plen, eq - plen));
    const std::string value(entry.substr(eq + 1));
    // HASHMESH_TRAINING__BATCH_SIZE -> /training/batch_size
    std::string pointer;
    std::size_t pos = 0;
    while (pos < keypath.size()) {
      std::size_t sep = keypath.find("__", pos);
      if (sep == std::string::npos) sep = keypath.size();
      std::string seg = keypath.substr(pos, sep - pos);
      std::transform(seg.begin(), seg.end(), seg.begin(),
                     [](unsigned char c) { return std::tolower(c); });
      pointer += "/" + seg;
      pos = sep + 2;
    }
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      parsed = value;  // plain string
    }
    j[nlohmann::json::json_pointer(pointer)] = parsed;
  }
}

RunConfig RunConfig::load(const std::string& path, const char* env_prefix) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (env_prefix != nullptr) apply_env_overrides(j, env_prefix);
  RunConfig cfg = from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace hashmesh
