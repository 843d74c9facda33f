// ennshift: train and evaluate epistemic neural networks on synthetic
// distribution-shift suites.
//
//   ennshift <command> [--config PATH] [--out DIR] [--seed N] [--jobs K]
//
// Commands: make-shifts, train-base, train-epinet, train-ensemble, evaluate,
// tune-temp, temp-report, run-all.

#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ennshift/errors.hpp"
#include "ennshift/pipeline.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Epistemic neural networks under distribution shift"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "runs/default";
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;

  using Step = void (ennshift::Pipeline::*)();
  const std::pair<const char*, std::pair<const char*, Step>> commands[] = {
      {"make-shifts", {"Generate clean, corrupted, OOD and adversarial splits",
                       &ennshift::Pipeline::make_shifts}},
      {"train-base", {"Train one base net per ladder rung", &ennshift::Pipeline::train_base}},
      {"train-epinet", {"Train one epinet per base net", &ennshift::Pipeline::train_epinet}},
      {"train-ensemble", {"Train the ensemble member pool", &ennshift::Pipeline::train_ensemble}},
      {"evaluate", {"Evaluate every model on the shift suite", &ennshift::Pipeline::evaluate}},
      {"tune-temp", {"Tune a temperature per model on validation data",
                     &ennshift::Pipeline::tune_temp}},
      {"temp-report", {"Ratios of metrics with and without temperature",
                       &ennshift::Pipeline::temp_report}},
      {"run-all", {"Run every step in order", &ennshift::Pipeline::run_all}},
  };

  Step selected = nullptr;
  for (const auto& [name, info] : commands) {
    CLI::App* sub = app.add_subcommand(name, info.first);
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--seed", seed, "Override the run seed");
    sub->add_option("--jobs", jobs, "Parallel trainings/evaluations")->check(CLI::PositiveNumber);
    const Step step = info.second;
    sub->callback([&selected, step] { selected = step; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage_error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    ennshift::RunConfig config;
    if (!config_path.empty()) config = ennshift::load_run_config(config_path);
    if (seed) config.seed = *seed;
    ennshift::Pipeline pipeline(config, out_dir, jobs);
    (pipeline.*selected)();
  } catch (const ennshift::Error& e) {
    std::cerr << e.kind() << ": " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal_error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
