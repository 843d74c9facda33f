#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ennshift/artifact_io.hpp"
#include "ennshift/metrics.hpp"
#include "json.hpp"

namespace ennshift {

struct RunConfig {
  std::uint64_t seed = 0;

  struct Data {
    std::size_t classes = 10;
    std::vector<int> in_dist{0, 1, 2, 3, 4, 5, 6};
    // Sizes before the in-distribution/OOD split.
    std::size_t train = 10000;
    std::size_t val = 2000;
    std::size_t test = 2000;
    GratingParams grating;
    // Positions within in_dist used for the adversarial split.
    std::vector<int> class_subset{0, 1, 2, 3, 4};
    std::vector<std::string> corruptions;  // empty means all types
    std::vector<int> severities{1, 2, 3, 4, 5};
  } data;

  struct Models {
    std::vector<std::size_t> ladder{1, 2, 3, 4};  // channel multipliers
    std::vector<std::size_t> base_channels{8, 16};
    std::vector<std::size_t> strides{1, 2};
    std::size_t kernel = 3;
    std::vector<std::size_t> ensemble_sizes{1, 3, 10, 30};
    std::size_t ensemble_pool = 30;
    std::size_t ensemble_rung = 0;     // ladder rung used for ensemble members
    std::vector<std::size_t> member_order;  // empty means seed order
    std::size_t baseline_rung = 0;     // mCE baseline is this rung's base net
    EpinetConfig epinet;
  } models;

  // Training seeds are derived from `seed`; the `seed` fields here are unused.
  TrainConfig base_train;
  TrainConfig epinet_train = [] {
    TrainConfig c;
    c.epochs = 10;
    return c;
  }();

  EvalConfig eval;  // seeds come from the fields below
  std::optional<std::uint64_t> dyadic_seed;  // default derived from `seed`
  std::optional<std::uint64_t> index_seed;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  // Throws ConfigError naming the offending field path.
  void validate() const;

  std::vector<std::string> corruption_names() const;
  ConvNetSpec rung_spec(std::size_t rung) const;
  EvalConfig eval_config() const;
  std::uint64_t base_seed(std::size_t rung) const;
  std::uint64_t pool_seed() const;
  std::uint64_t epinet_seed(std::size_t rung) const;
};

RunConfig load_run_config(const std::filesystem::path& path);

struct NamedModel {
  std::string name;
  std::shared_ptr<const EnnModel> model;
};

// Orchestrates every command against one output directory. Artifacts are
// immutable files; commands skip work whose checkpoint already matches the
// current configuration.
class Pipeline {
 public:
  Pipeline(RunConfig config, std::filesystem::path out, std::size_t jobs = 1);

  void train_base();
  void train_epinet();
  void train_ensemble();
  void make_shifts();
  void evaluate();
  void tune_temp();
  void temp_report();
  void run_all();

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return out_; }
  std::filesystem::path base_path(std::size_t rung) const;
  std::filesystem::path epinet_path(std::size_t rung) const;
  std::filesystem::path pool_path() const;
  std::filesystem::path suite_manifest_path() const;
  std::filesystem::path manifest_path() const;
  std::filesystem::path reports_dir() const;

  struct CleanData {
    ImageDataset train;
    ImageDataset val;
    ImageDataset test;
    ImageDataset ood;
  };
  // Deterministic from the configuration; training data is never stored.
  CleanData clean_data() const;
  ShiftSuite load_suite() const;
  ImageDataset load_validation() const;
  std::vector<NamedModel> load_models() const;

  // Number of models trained (not skipped) by this instance.
  std::size_t trainings_performed() const { return trainings_; }

 private:
  std::string fingerprint(const nlohmann::json& part) const;
  bool up_to_date(const std::filesystem::path& ckpt, const std::string& fingerprint) const;
  void record(const std::string& name, const std::filesystem::path& path, const std::string& kind);
  void echo_config() const;
  std::filesystem::path require(const std::filesystem::path& path, const std::string& what) const;

  RunConfig config_;
  std::filesystem::path out_;
  std::size_t jobs_;
  std::size_t trainings_ = 0;
};

// Rows for one model's suite metrics (plus mCE against `baseline_errors`).
std::vector<ReportRow> suite_rows(const SuiteMetrics& metrics, const ErrorGrid& baseline_errors,
                                  std::uint64_t seed);

}  // namespace ennshift
