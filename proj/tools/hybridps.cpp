// SPDX-License-Identifier: Apache-2.0
// hybridps train|bench|compare [flags]
//
// Every config key is also a long flag; flags override --config. Child
// processes of a tcp run re-enter here with HPS_ROLE set.

#include <iostream>

#include "CLI11.hpp"
#include "hybridps/launcher/launcher.hpp"

using namespace hps;
using namespace hps::launcher;

int main(int argc, char** argv) {
  if (std::getenv(kEnvRole)) return node_main();

  CLI::App app{"hybrid parameter-server / allreduce training launcher"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  bool verbose = false;
  app.add_option("--config", config_path, "key=value config file");
  app.add_flag("-v,--verbose", verbose, "log progress");
  std::map<std::string, std::string> flag_values;
  for (const auto& f : config_fields()) app.add_option("--" + f.name, flag_values[f.name], f.help);
  auto* train_cmd = app.add_subcommand("train", "train a model and write per-epoch metrics");
  auto* bench_cmd = app.add_subcommand("bench", "time allreduce variants over message sizes");
  auto* compare_cmd = app.add_subcommand("compare", "train in all six modes and summarize");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (verbose) set_log_level(LogLevel::info);

  RunConfig cfg;
  auto result = guarded([&] {
    if (!config_path.empty()) cfg = load_config_file(config_path);
    for (const auto& f : config_fields())
      if (app.count("--" + f.name) > 0) set_key(cfg, f.name, flag_values[f.name]);
    if (train_cmd->parsed()) {
      auto metrics = run_training(cfg);
      if (!metrics.empty())
        std::cout << mode_label(cfg) << ": " << metrics.size() << " epochs, final val_acc "
                  << metrics.back().val_acc << ", metrics in " << cfg.out << "\n";
    } else if (bench_cmd->parsed()) {
      if (app.count("--mode") == 0) cfg.mode = kv::StoreMode::PureMpi;
      if (app.count("--servers") == 0) cfg.servers = 0;
      if (app.count("--clients") == 0) cfg.clients = 1;
      validate(cfg);
      auto rows = bench_allreduce(cfg, verbose ? &std::cerr : nullptr);
      std::ofstream f(cfg.out);
      if (!f) throw ConfigError("cannot write '" + cfg.out + "'");
      write_bench_csv(f, rows);
      write_bench_csv(std::cout, rows);
    } else if (compare_cmd->parsed()) {
      auto report = compare_modes(cfg, {}, verbose ? &std::cerr : nullptr);
      std::cout << kSummaryHeader << "\n";
      for (const auto& r : report.summary)
        std::cout << r.mode << ',' << r.final_val_acc << ',' << r.total_time_s << ','
                  << r.server_in_bytes << ',' << r.epochs << "\n";
    }
  });
  if (result.exit_code != kExitOk) std::cerr << "hybridps: " << result.error << "\n";
  return result.exit_code;
}
