// fedzoo: run, compare and validate federated zeroth-order experiments.
//
//   fedzoo run <config.json>
//   fedzoo compare <config.json> --algorithms FedZO,FZooS
//   fedzoo validate <config.json>
//
// Exit status: 0 on success, 1 on runtime failure, 2 on config errors.
// FEDZOO_OUTPUT_DIR overrides the output_dir key of the config.

#include "fzoos/harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

std::vector<fzoos::Algorithm> parse_algorithm_list(const std::string& csv) {
  std::vector<fzoos::Algorithm> out;
  std::stringstream in(csv);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    const auto a = fzoos::parse_algorithm(item);
    if (!a) throw fzoos::ConfigError("algorithms", "unknown algorithm '" + item + "'");
    out.push_back(*a);
  }
  if (out.empty()) throw fzoos::ConfigError("algorithms", "expected at least one algorithm");
  return out;
}

fzoos::ExperimentConfig load(const std::string& path) {
  auto cfg = fzoos::load_experiment_config(path);
  fzoos::apply_environment_overrides(cfg);
  return cfg;
}

void report(const fzoos::ExperimentResult& result) {
  for (const auto& f : result.files) std::cout << "wrote " << f.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated zeroth-order optimization benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::string algorithm_list;

  auto* run = app.add_subcommand("run", "Run every configured algorithm for every seed");
  run->add_option("config", config_path, "JSON config file")->required();

  auto* compare = app.add_subcommand("compare", "Run several algorithms and write a wide comparison CSV");
  compare->add_option("config", config_path, "JSON config file")->required();
  compare->add_option("--algorithms", algorithm_list, "Comma-separated algorithm names")->required();

  auto* validate = app.add_subcommand("validate", "Parse and validate a config without running it");
  validate->add_option("config", config_path, "JSON config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    auto cfg = load(config_path);
    if (*validate) {
      std::cout << "config OK: " << cfg.algorithms.size() << " algorithm(s), " << cfg.seeds.size()
                << " seed(s), output_dir " << cfg.output_dir << '\n';
      return 0;
    }
    if (*run) {
      report(fzoos::run_experiment(cfg));
      return 0;
    }
    report(fzoos::compare_algorithms(cfg, parse_algorithm_list(algorithm_list)));
    return 0;
  } catch (const fzoos::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fzoos::FederationError& e) {
    std::cerr << "runtime error at round " << e.round()
              << (e.client() >= 0 ? ", client " + std::to_string(e.client()) : std::string(", server")) << ": "
              << e.cause() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
