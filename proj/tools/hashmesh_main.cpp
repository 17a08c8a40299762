#include <cstdio>
#include <iostream>

#include "hashmesh/driver.hpp"

#include "CLI11.hpp"

namespace {

// Exit codes: 0 ok, 1 unexpected, 2 config/input, 3 transport, 4 numeric.
int guarded(const std::function<nlohmann::json()>& body) {
  try {
    const nlohmann::json report = body();
    if (!report.is_null()) std::cout << report.dump(2) << std::endl;
    return 0;
  } catch (const hashmesh::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const hashmesh::TransportError& e) {
    std::cerr << "transport error: " << e.what() << std::endl;
    return 3;
  } catch (const hashmesh::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LSH-sparse model-parallel trainer for fully connected networks"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_dir, out_path, dataset_override;
  std::uint32_t node_id = 0;
  std::uint64_t max_samples = 0;
  std::vector<double> bandwidths{1.0, 100.0};

  auto* train = app.add_subcommand("train", "train a network per the config");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--node-id", node_id, "this node's rank (tcp transport)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (precision@1/@5)");
  eval->add_option("--config", config_path)->required();
  eval->add_option("--checkpoint", checkpoint_dir)->required();
  eval->add_option("--node-id", node_id);
  eval->add_option("--max-samples", max_samples, "cap evaluated samples (0 = all)");

  auto* bench = app.add_subcommand("bench-comm",
                                   "sparse vs dense-baseline communication comparison");
  bench->add_option("--config", config_path)->required();
  bench->add_option("--bandwidth-gbps", bandwidths, "bandwidths for transfer projections")
      ->delimiter(',');

  auto* inspect = app.add_subcommand("inspect-tables", "hash-table occupancy histograms");
  inspect->add_option("--config", config_path)->required();
  inspect->add_option("--checkpoint", checkpoint_dir)->required();
  inspect->add_option("--out", out_path, "write the JSON report here instead of stdout");

  std::uint32_t classes = 100, features = 1024, per_class = 10;
  float noise = 0.1f;
  std::uint64_t seed = 1;
  auto* synth = app.add_subcommand("synth", "generate a clustered synthetic dataset");
  synth->add_option("--classes", classes);
  synth->add_option("--features", features);
  synth->add_option("--per-class", per_class);
  synth->add_option("--noise", noise);
  synth->add_option("--seed", seed);
  synth->add_option("--out", out_path)->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    return guarded([&] {
      return hashmesh::run_train(hashmesh::RunConfig::load(config_path), node_id);
    });
  }
  if (eval->parsed()) {
    return guarded([&] {
      return hashmesh::run_eval(hashmesh::RunConfig::load(config_path), checkpoint_dir, node_id,
                                max_samples);
    });
  }
  if (bench->parsed()) {
    return guarded([&] {
      const auto report =
          hashmesh::run_bench_comm(hashmesh::RunConfig::load(config_path), bandwidths);
      std::fprintf(stderr, "~%.1f%% communication compression (sparse/dense ratio %.5f)\n",
                   report["compression_percent"].get<double>(), report["ratio"].get<double>());
      return report;
    });
  }
  if (inspect->parsed()) {
    return guarded([&] {
      auto report = hashmesh::run_inspect_tables(hashmesh::RunConfig::load(config_path),
                                                 checkpoint_dir);
      if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        if (!out) throw hashmesh::ConfigError("cannot write '" + out_path + "'");
        out << report.dump(2) << '\n';
        return nlohmann::json{{"written", out_path}};
      }
      return report;
    });
  }
  if (synth->parsed()) {
    return guarded([&] {
      const auto data =
          hashmesh::DatasetHandle::synth_clustered(classes, features, per_class, noise, seed);
      data.write_xc(out_path);
      return nlohmann::json{{"written", out_path},
                            {"num_points", data.header().num_points},
                            {"feature_dim", data.header().feature_dim},
                            {"label_dim", data.header().label_dim}};
    });
  }
  return 1;
}
