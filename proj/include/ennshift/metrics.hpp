#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ennshift/enn.hpp"
#include "ennshift/shiftbench.hpp"

namespace ennshift {

inline constexpr std::size_t kDefaultDyadicTau = 10;
inline constexpr double kDefaultFailureThreshold = 0.95;

struct DyadicConfig {
  std::size_t tau = kDefaultDyadicTau;
  std::size_t n_batches = 1000;
  std::size_t n_index = kDefaultPredictiveIndices;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Temperature {
  double value = 1.0;
  std::string tuned_on;
};

// One dyadic batch: tau row ids, each one of two distinct anchors.
struct DyadicBatch {
  std::size_t anchors[2] = {0, 0};
  std::vector<std::size_t> rows;
};

// Draws n_batches batches over `examples` rows: two distinct anchors chosen
// uniformly, then tau slots filled i.i.d. uniformly from the anchors.
std::vector<DyadicBatch> dyadic_batches(std::size_t examples, const DyadicConfig& config);

// --- metrics over cached predictions ------------------------------------
// All accumulate in 64-bit. `temperature` divides logits inside every
// per-index softmax, before averaging over indices.

double accuracy(const PredictionSet& preds, std::span<const int> labels);
double ece(const PredictionSet& preds, std::span<const int> labels, std::size_t n_bins = 10,
           double temperature = 1.0);
double marginal_nll(const PredictionSet& preds, std::span<const int> labels,
                    double temperature = 1.0);
// Per-label joint NLL of each dyadic batch: -joint_logprob / tau.
std::vector<double> dyadic_batch_nlls(const PredictionSet& preds, std::span<const int> labels,
                                      const DyadicConfig& config, double temperature = 1.0);
double dyadic_joint_nll(const PredictionSet& preds, std::span<const int> labels,
                        const DyadicConfig& config, double temperature = 1.0);
double confidence_score(const PredictionSet& preds, double temperature = 1.0);
double failure_rate(const PredictionSet& preds, std::span<const int> labels,
                    double threshold = kDefaultFailureThreshold, double temperature = 1.0);
// Negative maximum class probability per example.
std::vector<double> anomaly_scores(const PredictionSet& preds, double temperature = 1.0);

// --- metrics over probability tables ([n][c], row-major) ----------------

double accuracy_from_probs(std::span<const double> probs, std::size_t classes,
                           std::span<const int> labels);
// Equal-width bins over (0, 1] by max probability; empty bins contribute 0.
double ece_from_probs(std::span<const double> probs, std::size_t classes,
                      std::span<const int> labels, std::size_t n_bins = 10);
double confidence_from_probs(std::span<const double> probs, std::size_t classes);
double failure_rate_from_probs(std::span<const double> probs, std::size_t classes,
                               std::span<const int> labels,
                               double threshold = kDefaultFailureThreshold);

// Average precision with OOD as the positive class. Scores are sorted in
// descending order and ties form a single threshold.
double aupr(std::span<const double> in_dist_scores, std::span<const double> ood_scores);

// errors[type][severity]
using ErrorGrid = std::map<std::string, std::map<int, double>>;

// mean over types of sum_sev E_model / sum_sev E_baseline.
double mce(const ErrorGrid& model_errors, const ErrorGrid& baseline_errors);

// Golden-section search over log T in [log 0.1, log 10] minimizing marginal
// NLL on in-distribution validation predictions.
Temperature tune_temperature(const PredictionSet& validation, std::span<const int> labels,
                             std::string tuned_on = "validation");

// --- model-level conveniences -------------------------------------------

double accuracy(const EnnModel& model, const ImageDataset& data,
                std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);
double ece(const EnnModel& model, const ImageDataset& data, std::size_t n_bins = 10,
           std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);
double marginal_nll(const EnnModel& model, const ImageDataset& data,
                    std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);
double dyadic_joint_nll(const EnnModel& model, const ImageDataset& data,
                        const DyadicConfig& config);
double confidence_score(const EnnModel& model, const ImageDataset& data,
                        std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);
double failure_rate(const EnnModel& model, const ImageDataset& data,
                    double threshold = kDefaultFailureThreshold,
                    std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);
Temperature tune_temperature(const EnnModel& model, const ImageDataset& validation,
                             std::size_t n_index = kDefaultPredictiveIndices,
                             std::uint64_t seed = 0);

// --- suite evaluation -----------------------------------------------------

struct ShiftSuite {
  ImageDataset clean;     // in-distribution test split
  std::vector<ImageDataset> corrupted;  // provenance carries corruption/severity
  ImageDataset ood;
  ImageDataset adversarial;
  std::vector<int> class_subset;
  std::string reference_model;
};

struct EvalConfig {
  std::size_t n_index = kDefaultPredictiveIndices;
  std::size_t tau = kDefaultDyadicTau;
  std::size_t n_batches = 1000;
  std::size_t ece_bins = 10;
  double failure_threshold = kDefaultFailureThreshold;
  std::uint64_t seed = 0;        // dyadic batch sampling
  std::uint64_t index_seed = 0;  // epistemic index sampling
};

struct DatasetMetrics {
  std::string dataset;
  std::string corruption_type;  // empty unless corrupted
  int severity = 0;
  std::size_t examples = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  double marginal_nll = 0.0;
  double joint_nll = 0.0;
  double confidence = 0.0;
  double failure_rate = 0.0;
};

struct SuiteMetrics {
  std::string model;
  std::size_t model_size_params = 0;
  double temperature = 1.0;
  DatasetMetrics clean;
  std::vector<DatasetMetrics> corrupted;
  std::optional<DatasetMetrics> adversarial;  // absent when the split is empty
  double aupr = 0.0;
  double ood_confidence = 0.0;

  ErrorGrid corruption_errors() const;
  // Simple averages over every corrupted dataset.
  double corrupted_mean(double DatasetMetrics::*field) const;
  // Mean confidence per severity, averaged over corruption types.
  std::map<int, double> confidence_by_severity() const;
};

// Evaluates one model on every split of a suite for each temperature, reusing
// the same predictions (and index draws) across temperatures.
std::vector<SuiteMetrics> evaluate_suite(const EnnModel& model, const ShiftSuite& suite,
                                         const EvalConfig& config,
                                         std::span<const double> temperatures);
SuiteMetrics evaluate_suite(const EnnModel& model, const ShiftSuite& suite,
                            const EvalConfig& config, double temperature = 1.0);

struct RatioRecord {
  std::string dataset;  // imagenet-a analog "adversarial", "ood", "corrupted"
  std::string metric;
  std::optional<double> ratio;
  std::string note;
};

// metric(with T) / metric(without T) for ECE, marginal NLL, joint NLL on the
// adversarial and corrupted sets, AUPR on the OOD task, and accuracy and mCE
// (which are invariant to T).
std::vector<RatioRecord> temperature_ratio_report(const SuiteMetrics& without,
                                                  const SuiteMetrics& with,
                                                  const ErrorGrid& baseline_errors);

std::uint64_t stable_hash(std::string_view text);

}  // namespace ennshift
