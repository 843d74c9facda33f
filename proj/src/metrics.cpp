#include "ennshift/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace {

constexpr double kLogTMin = -2.302585092994046;  // log 0.1
constexpr double kLogTMax = 2.302585092994046;   // log 10
constexpr double kLogTTolerance = 1e-3;

void require_labels(const PredictionSet& preds, std::span<const int> labels) {
  if (labels.size() != preds.examples) {
    throw ContractError(std::to_string(labels.size()) + " labels for " +
                        std::to_string(preds.examples) + " predictions");
  }
  if (labels.empty()) throw ContractError("metric over an empty dataset");
}

double max_prob(const double* row, std::size_t classes) {
  return *std::max_element(row, row + classes);
}

double nll_from_label_log_probs(std::span<const double> label_lp, std::size_t indices) {
  const std::size_t n = label_lp.size() / indices;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total -= log_mean_exp(label_lp.subspan(i * indices, indices));
  return total / static_cast<double>(n);
}

double joint_from_label_log_probs(std::span<const double> label_lp, std::size_t indices,
                                  const std::vector<DyadicBatch>& batches, std::size_t tau,
                                  std::vector<double>* per_batch) {
  double total = 0.0;
  for (const DyadicBatch& b : batches) {
    const double v = -joint_logprob_from(label_lp, indices, b.rows) / static_cast<double>(tau);
    if (per_batch) per_batch->push_back(v);
    total += v;
  }
  return total / static_cast<double>(batches.size());
}

DatasetMetrics metrics_at(const PredictionSet& preds, const PredictionSet::Summary& summary,
                          std::span<const int> labels, const std::vector<int>& decisions,
                          const std::vector<DyadicBatch>& batches, const EvalConfig& config) {
  DatasetMetrics m;
  m.examples = preds.examples;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += decisions[i] == labels[i];
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.ece = ece_from_probs(summary.marginal, preds.classes, labels, config.ece_bins);
  m.marginal_nll = nll_from_label_log_probs(summary.label_log_probs, preds.indices);
  m.joint_nll = batches.empty() ? 0.0
                                : joint_from_label_log_probs(summary.label_log_probs,
                                                             preds.indices, batches,
                                                             config.tau, nullptr);
  m.confidence = confidence_from_probs(summary.marginal, preds.classes);
  m.failure_rate = failure_rate_from_probs(summary.marginal, preds.classes, labels,
                                           config.failure_threshold);
  return m;
}

}  // namespace

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void DyadicConfig::validate() const {
  if (tau < 2 || n_batches == 0 || n_index == 0) {
    throw ContractError("dyadic config needs tau >= 2 and positive counts");
  }
}

std::vector<DyadicBatch> dyadic_batches(std::size_t examples, const DyadicConfig& config) {
  config.validate();
  if (examples < 2) throw ContractError("dyadic sampling needs at least 2 examples");
  Rng rng(derive_seed(config.seed, 0xd7ad));
  std::vector<DyadicBatch> out(config.n_batches);
  for (DyadicBatch& b : out) {
    const std::size_t first = rng.below(examples);
    std::size_t second = rng.below(examples - 1);
    if (second >= first) ++second;
    b.anchors[0] = first;
    b.anchors[1] = second;
    b.rows.resize(config.tau);
    for (std::size_t& r : b.rows) r = b.anchors[rng.below(2)];
  }
  return out;
}

// --- probability-table metrics ---------------------------------------------

double accuracy_from_probs(std::span<const double> probs, std::size_t classes,
                           std::span<const int> labels) {
  if (labels.empty()) throw ContractError("accuracy over an empty dataset");
  const std::vector<int> pred = predicted_labels(probs, classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double ece_from_probs(std::span<const double> probs, std::size_t classes,
                      std::span<const int> labels, std::size_t n_bins) {
  if (n_bins < 1) throw ContractError("ece needs at least one bin");
  if (labels.empty()) throw ContractError("ece over an empty dataset");
  std::vector<double> conf(n_bins, 0.0), hits(n_bins, 0.0);
  std::vector<std::size_t> count(n_bins, 0);
  const std::vector<int> pred = predicted_labels(probs, classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = max_prob(probs.data() + i * classes, classes);
    // Bin b covers (b/B, (b+1)/B].
    auto b = static_cast<std::ptrdiff_t>(std::ceil(p * static_cast<double>(n_bins))) - 1;
    b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(n_bins) - 1);
    conf[static_cast<std::size_t>(b)] += p;
    hits[static_cast<std::size_t>(b)] += pred[i] == labels[i] ? 1.0 : 0.0;
    ++count[static_cast<std::size_t>(b)];
  }
  double total = 0.0;
  const auto n = static_cast<double>(labels.size());
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (count[b] == 0) continue;
    const auto nb = static_cast<double>(count[b]);
    total += (nb / n) * std::abs(hits[b] / nb - conf[b] / nb);
  }
  return total;
}

double confidence_from_probs(std::span<const double> probs, std::size_t classes) {
  const std::size_t n = probs.size() / classes;
  if (n == 0) throw ContractError("confidence over an empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += max_prob(probs.data() + i * classes, classes);
  return total / static_cast<double>(n);
}

double failure_rate_from_probs(std::span<const double> probs, std::size_t classes,
                               std::span<const int> labels, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("failure threshold must be in (0, 1)");
  }
  if (labels.empty()) throw ContractError("failure rate over an empty dataset");
  const std::vector<int> pred = predicted_labels(probs, classes);
  std::size_t failures = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (pred[i] != labels[i] && max_prob(probs.data() + i * classes, classes) > threshold) {
      ++failures;
    }
  }
  return static_cast<double>(failures) / static_cast<double>(labels.size());
}

// --- prediction-set metrics ------------------------------------------------

double accuracy(const PredictionSet& preds, std::span<const int> labels) {
  require_labels(preds, labels);
  return accuracy_from_probs(preds.marginal_probs(), preds.classes, labels);
}

double ece(const PredictionSet& preds, std::span<const int> labels, std::size_t n_bins,
           double temperature) {
  require_labels(preds, labels);
  return ece_from_probs(preds.marginal_probs(temperature), preds.classes, labels, n_bins);
}

double marginal_nll(const PredictionSet& preds, std::span<const int> labels,
                    double temperature) {
  require_labels(preds, labels);
  return nll_from_label_log_probs(preds.label_log_probs(labels, temperature), preds.indices);
}

std::vector<double> dyadic_batch_nlls(const PredictionSet& preds, std::span<const int> labels,
                                      const DyadicConfig& config, double temperature) {
  require_labels(preds, labels);
  const std::vector<DyadicBatch> batches = dyadic_batches(preds.examples, config);
  std::vector<double> out;
  out.reserve(batches.size());
  joint_from_label_log_probs(preds.label_log_probs(labels, temperature), preds.indices, batches,
                             config.tau, &out);
  return out;
}

double dyadic_joint_nll(const PredictionSet& preds, std::span<const int> labels,
                        const DyadicConfig& config, double temperature) {
  require_labels(preds, labels);
  const std::vector<DyadicBatch> batches = dyadic_batches(preds.examples, config);
  return joint_from_label_log_probs(preds.label_log_probs(labels, temperature), preds.indices,
                                    batches, config.tau, nullptr);
}

double confidence_score(const PredictionSet& preds, double temperature) {
  return confidence_from_probs(preds.marginal_probs(temperature), preds.classes);
}

double failure_rate(const PredictionSet& preds, std::span<const int> labels, double threshold,
                    double temperature) {
  require_labels(preds, labels);
  return failure_rate_from_probs(preds.marginal_probs(temperature), preds.classes, labels,
                                 threshold);
}

std::vector<double> anomaly_scores(const PredictionSet& preds, double temperature) {
  const std::vector<double> probs = preds.marginal_probs(temperature);
  std::vector<double> out(preds.examples);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = -max_prob(probs.data() + i * preds.classes, preds.classes);
  }
  return out;
}

double aupr(std::span<const double> in_dist_scores, std::span<const double> ood_scores) {
  if (in_dist_scores.empty() || ood_scores.empty()) {
    throw ContractError("aupr needs non-empty in-distribution and OOD score lists");
  }
  std::vector<std::pair<double, bool>> scored;
  scored.reserve(in_dist_scores.size() + ood_scores.size());
  for (double s : in_dist_scores) scored.emplace_back(s, false);
  for (double s : ood_scores) scored.emplace_back(s, true);
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto positives = static_cast<double>(ood_scores.size());
  double tp = 0.0, fp = 0.0, recall_prev = 0.0, area = 0.0;
  for (std::size_t i = 0; i < scored.size();) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / positives;
    const double precision = tp / (tp + fp);
    area += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return area;
}

double mce(const ErrorGrid& model_errors, const ErrorGrid& baseline_errors) {
  if (model_errors.empty()) throw ContractError("mce over an empty error grid");
  if (model_errors.size() != baseline_errors.size()) {
    throw ContractError("mce: model and baseline cover different corruption types");
  }
  double total = 0.0;
  for (const auto& [type, severities] : model_errors) {
    const auto it = baseline_errors.find(type);
    if (it == baseline_errors.end() || it->second.size() != severities.size()) {
      throw ContractError("mce: grids differ for corruption type '" + type + "'");
    }
    double model_sum = 0.0, baseline_sum = 0.0;
    for (const auto& [severity, error] : severities) {
      const auto b = it->second.find(severity);
      if (b == it->second.end()) {
        throw ContractError("mce: baseline lacks severity " + std::to_string(severity) +
                            " for '" + type + "'");
      }
      model_sum += error;
      baseline_sum += b->second;
    }
    if (!(baseline_sum > 0.0)) {
      throw DegenerateBaselineError("mce: baseline error sum is zero for corruption type '" +
                                    type + "'");
    }
    total += model_sum / baseline_sum;
  }
  return total / static_cast<double>(model_errors.size());
}

Temperature tune_temperature(const PredictionSet& validation, std::span<const int> labels,
                             std::string tuned_on) {
  require_labels(validation, labels);
  auto objective = [&](double log_t) {
    const double v = marginal_nll(validation, labels, std::exp(log_t));
    if (!std::isfinite(v)) {
      throw SearchError("non-finite NLL during temperature search at T=" +
                        std::to_string(std::exp(log_t)));
    }
    return v;
  };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = kLogTMin, b = kLogTMax;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = objective(c), fd = objective(d);
  while (b - a > kLogTTolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = objective(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = objective(d);
    }
  }
  return {std::exp((a + b) / 2.0), std::move(tuned_on)};
}

// --- model-level conveniences ----------------------------------------------

double accuracy(const EnnModel& model, const ImageDataset& data, std::size_t n_index,
                std::uint64_t seed) {
  return accuracy(predict(model, data.images, n_index, seed), data.labels);
}

double ece(const EnnModel& model, const ImageDataset& data, std::size_t n_bins,
           std::size_t n_index, std::uint64_t seed) {
  return ece(predict(model, data.images, n_index, seed), data.labels, n_bins);
}

double marginal_nll(const EnnModel& model, const ImageDataset& data, std::size_t n_index,
                    std::uint64_t seed) {
  return marginal_nll(predict(model, data.images, n_index, seed), data.labels);
}

double dyadic_joint_nll(const EnnModel& model, const ImageDataset& data,
                        const DyadicConfig& config) {
  if (data.size() < 2) throw ContractError("dyadic sampling needs at least 2 examples");
  return dyadic_joint_nll(predict(model, data.images, config.n_index, config.seed), data.labels,
                          config);
}

double confidence_score(const EnnModel& model, const ImageDataset& data, std::size_t n_index,
                        std::uint64_t seed) {
  return confidence_score(predict(model, data.images, n_index, seed));
}

double failure_rate(const EnnModel& model, const ImageDataset& data, double threshold,
                    std::size_t n_index, std::uint64_t seed) {
  return failure_rate(predict(model, data.images, n_index, seed), data.labels, threshold);
}

Temperature tune_temperature(const EnnModel& model, const ImageDataset& validation,
                             std::size_t n_index, std::uint64_t seed) {
  return tune_temperature(predict(model, validation.images, n_index, seed), validation.labels,
                          validation.split);
}

// --- suite evaluation --------------------------------------------------------

ErrorGrid SuiteMetrics::corruption_errors() const {
  ErrorGrid grid;
  for (const DatasetMetrics& m : corrupted) grid[m.corruption_type][m.severity] = 1.0 - m.accuracy;
  return grid;
}

double SuiteMetrics::corrupted_mean(double DatasetMetrics::*field) const {
  if (corrupted.empty()) return 0.0;
  double total = 0.0;
  for (const DatasetMetrics& m : corrupted) total += m.*field;
  return total / static_cast<double>(corrupted.size());
}

std::map<int, double> SuiteMetrics::confidence_by_severity() const {
  std::map<int, double> sum;
  std::map<int, std::size_t> count;
  for (const DatasetMetrics& m : corrupted) {
    sum[m.severity] += m.confidence;
    ++count[m.severity];
  }
  for (auto& [severity, v] : sum) v /= static_cast<double>(count[severity]);
  return sum;
}

std::vector<SuiteMetrics> evaluate_suite(const EnnModel& model, const ShiftSuite& suite,
                                         const EvalConfig& config,
                                         std::span<const double> temperatures) {
  std::vector<SuiteMetrics> out(temperatures.size());
  for (std::size_t t = 0; t < temperatures.size(); ++t) {
    out[t].model = model.id();
    out[t].model_size_params = model.parameter_count();
    out[t].temperature = temperatures[t];
  }

  // Evaluates one labeled split; returns the clean-split anomaly scores on request.
  auto run = [&](const EnnModel& m, const ImageDataset& data, const std::string& name,
                 auto&& store, std::vector<std::vector<double>>* scores) {
    const std::uint64_t key = stable_hash(name);
    const PredictionSet preds =
        predict(m, data.images, config.n_index, derive_seed(config.index_seed, key));
    std::vector<DyadicBatch> batches;
    if (data.size() >= 2) {
      batches = dyadic_batches(data.size(), {config.tau, config.n_batches, config.n_index,
                                             derive_seed(config.seed, key)});
    }
    // Decisions come from the untempered predictive distribution.
    const std::vector<int> decisions =
        predicted_labels(preds.marginal_probs(1.0), preds.classes);
    for (std::size_t t = 0; t < temperatures.size(); ++t) {
      const PredictionSet::Summary summary = preds.summarize(data.labels, temperatures[t]);
      DatasetMetrics dm = metrics_at(preds, summary, data.labels, decisions, batches, config);
      dm.dataset = name;
      store(out[t], std::move(dm));
      if (scores) {
        std::vector<double> s(preds.examples);
        for (std::size_t i = 0; i < s.size(); ++i) {
          s[i] = -max_prob(summary.marginal.data() + i * preds.classes, preds.classes);
        }
        (*scores)[t] = std::move(s);
      }
    }
  };

  std::vector<std::vector<double>> clean_scores(temperatures.size());
  run(model, suite.clean, "clean",
      [](SuiteMetrics& s, DatasetMetrics m) { s.clean = std::move(m); }, &clean_scores);

  for (const ImageDataset& data : suite.corrupted) {
    const std::string type = data.provenance.at("corruption").get<std::string>();
    const int severity = data.provenance.at("severity").get<int>();
    run(model, data, type + "/" + std::to_string(severity),
        [&](SuiteMetrics& s, DatasetMetrics m) {
          m.corruption_type = type;
          m.severity = severity;
          s.corrupted.push_back(std::move(m));
        },
        nullptr);
  }

  if (suite.adversarial.size() > 0) {
    // Non-owning alias; the restricted wrapper only reads through it.
    std::shared_ptr<const EnnModel> alias(std::shared_ptr<const EnnModel>(), &model);
    const auto restricted = restrict_classes(alias, suite.class_subset);
    for (int y : suite.adversarial.labels) {
      if (std::find(suite.class_subset.begin(), suite.class_subset.end(), y) == suite.class_subset.end()) {
        throw ContractError("evaluate_suite: adversarial label " + std::to_string(y) +
                            " outside the class subset");
      }
    }
    run(*restricted, suite.adversarial, "adversarial",
        [](SuiteMetrics& s, DatasetMetrics m) { s.adversarial = std::move(m); }, nullptr);
  }

  if (suite.ood.size() > 0) {
    const PredictionSet preds = predict(model, suite.ood.images, config.n_index,
                                        derive_seed(config.index_seed, stable_hash("ood")));
    for (std::size_t t = 0; t < temperatures.size(); ++t) {
      const std::vector<double> scores = anomaly_scores(preds, temperatures[t]);
      out[t].aupr = aupr(clean_scores[t], scores);
      double conf = 0.0;
      for (double s : scores) conf -= s;
      out[t].ood_confidence = conf / static_cast<double>(scores.size());
    }
  }
  return out;
}

SuiteMetrics evaluate_suite(const EnnModel& model, const ShiftSuite& suite,
                            const EvalConfig& config, double temperature) {
  const double temps[] = {temperature};
  return evaluate_suite(model, suite, config, temps).front();
}

std::vector<RatioRecord> temperature_ratio_report(const SuiteMetrics& without,
                                                  const SuiteMetrics& with,
                                                  const ErrorGrid& baseline_errors) {
  std::vector<RatioRecord> out;
  auto add = [&](const std::string& dataset, const std::string& metric, double num,
                 double den) {
    RatioRecord r{dataset, metric, std::nullopt, ""};
    if (den == 0.0) {
      r.note = "metric without temperature is zero";
    } else {
      r.ratio = num / den;
    }
    out.push_back(std::move(r));
  };
  if (without.adversarial && with.adversarial) {
    const DatasetMetrics& a = *without.adversarial;
    const DatasetMetrics& b = *with.adversarial;
    add("adversarial", "accuracy", b.accuracy, a.accuracy);
    add("adversarial", "ece", b.ece, a.ece);
    add("adversarial", "marginal_nll", b.marginal_nll, a.marginal_nll);
    add("adversarial", "joint_nll", b.joint_nll, a.joint_nll);
  }
  add("ood", "aupr", with.aupr, without.aupr);
  if (!without.corrupted.empty()) {
    add("corrupted", "mce", mce(with.corruption_errors(), baseline_errors),
        mce(without.corruption_errors(), baseline_errors));
    add("corrupted", "ece", with.corrupted_mean(&DatasetMetrics::ece),
        without.corrupted_mean(&DatasetMetrics::ece));
    add("corrupted", "marginal_nll", with.corrupted_mean(&DatasetMetrics::marginal_nll),
        without.corrupted_mean(&DatasetMetrics::marginal_nll));
    add("corrupted", "joint_nll", with.corrupted_mean(&DatasetMetrics::joint_nll),
        without.corrupted_mean(&DatasetMetrics::joint_nll));
  }
  return out;
}

}  // namespace ennshift
