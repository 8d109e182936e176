// prunability <task> --config <path> [--out <dir>] [--seed <n>]
//
// Exit codes: 0 success, 1 config or usage error, 2 stage failure,
// 3 output directory locked by another run.

#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "prunability/parallel.hpp"
#include "prunability/pipeline.hpp"

namespace pb = prunability;

int main(int argc, char** argv) {
  pb::init_logging_from_env();

  CLI::App app{"Predict and measure the maximum one-shot pruning ratio of a small network"};
  std::string task_name;
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  int threads = 0;
  app.add_option("task", task_name, "train | spectrum | predict | sweep | verify-escape | report | full")
      ->required()
      ->check(CLI::IsMember({"train", "spectrum", "predict", "sweep", "verify-escape", "report", "full"}));
  app.add_option("--config", config_path, "run configuration file")->required()->check(CLI::ExistingFile);
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides run.out)");
  auto* seed_opt = app.add_option("--seed", seed, "global seed (overrides run.seed)");
  app.add_option("--threads", threads, "OpenMP threads, 0 = runtime default")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  pb::RunConfig cfg;
  try {
    cfg = pb::load_config(config_path);
    cfg.task = pb::parse_task(task_name);
    if (*out_opt) cfg.out = out_dir;
    if (*seed_opt) cfg.seed = seed;
    cfg.validate();
  } catch (const pb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  if (threads > 0) pb::set_threads(threads);

  try {
    pb::Pipeline pipeline(cfg, pb::Exec::Parallel);
    switch (cfg.task) {
      case pb::Task::Full:
        std::cout << pipeline.full().to_text();
        break;
      case pb::Task::Report:
        std::cout << pipeline.report().to_text();
        break;
      case pb::Task::VerifyEscape: {
        const auto table = pipeline.verify_escape();
        std::cout << "escape sweep: D = " << table.dim << ", width " << table.width << ", " << table.rows.size()
                  << " rows in " << (pipeline.out_dir() / "escape.csv").string() << "\n";
        break;
      }
      default:
        pipeline.run();
        std::cout << "wrote " << pipeline.out_dir().string() << "\n";
    }
  } catch (const pb::LockError& e) {
    std::cerr << "lock conflict: " << e.what() << "\n";
    return 3;
  } catch (const pb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const pb::StageError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
