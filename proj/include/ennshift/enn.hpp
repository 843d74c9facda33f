#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ennshift/tensor.hpp"

namespace ennshift {

inline constexpr std::size_t kDefaultPredictiveIndices = 1000;

// P_Z: either a standard Gaussian over R^dim or a uniform choice among `dim`
// discrete members.
struct ReferenceDistribution {
  enum class Kind { gaussian, discrete };

  Kind kind = Kind::discrete;
  std::size_t dim = 1;

  static ReferenceDistribution gaussian(std::size_t index_dim);
  static ReferenceDistribution discrete(std::size_t members);

  bool operator==(const ReferenceDistribution&) const = default;
};

struct EpistemicIndex {
  ReferenceDistribution::Kind kind = ReferenceDistribution::Kind::discrete;
  std::vector<float> vector;  // gaussian draws
  std::size_t member = 0;     // discrete draws

  static EpistemicIndex gaussian(std::vector<float> values);
  static EpistemicIndex discrete(std::size_t member);
};

// The indices used for one predictive evaluation. Discrete references are
// enumerated in full regardless of `n_index`; Gaussian references draw
// `n_index` samples from a stream derived from `seed`.
std::vector<EpistemicIndex> draw_indices(const ReferenceDistribution& reference,
                                         std::size_t n_index, std::uint64_t seed);

// An epistemic neural network: logits f(x, z) together with its reference
// distribution. Inputs carry a leading batch dimension.
class EnnModel {
 public:
  virtual ~EnnModel() = default;

  virtual std::size_t num_classes() const = 0;
  virtual ReferenceDistribution reference() const = 0;
  // Logits [n, C] for every row of x under the same index z.
  virtual Tensor logits(const Tensor& x, const EpistemicIndex& z) const = 0;
  // Logits for several indices, laid out [index][row][class]. The default
  // calls logits() once per index; models override it with faster paths.
  virtual std::vector<float> logits_for_indices(const Tensor& x,
                                                std::span<const EpistemicIndex> zs) const;
  // When set, probabilities are taken over these classes only.
  virtual std::optional<std::vector<int>> class_mask() const { return std::nullopt; }
  virtual std::string id() const = 0;
  virtual std::size_t parameter_count() const = 0;

  // True when the model ignores z (a single discrete member).
  bool index_independent() const;
};

// Cached logits of a model on a fixed set of inputs and indices; every
// predictive quantity is derived from this with 64-bit arithmetic. Indices
// are equally weighted. Temperature divides logits before each softmax.
struct PredictionSet {
  std::size_t examples = 0;
  std::size_t indices = 0;
  std::size_t classes = 0;
  std::vector<float> logits;  // [index][example][class]
  std::optional<std::vector<int>> mask;

  // log softmax(logits / T) per index, masked classes at -inf. [k][n][c]
  std::vector<double> log_probs(double temperature = 1.0) const;
  // Index-averaged probabilities. [n][c]
  std::vector<double> marginal_probs(double temperature = 1.0) const;
  // log p_k(y_n | x_n) for every index. [n][k]
  std::vector<double> label_log_probs(std::span<const int> labels,
                                      double temperature = 1.0) const;

  struct Summary {
    std::vector<double> marginal;         // [n][c]
    std::vector<double> label_log_probs;  // [n][k]
  };
  // Both of the above from a single softmax pass.
  Summary summarize(std::span<const int> labels, double temperature = 1.0) const;

  std::vector<double> marginal_from_log_probs(std::span<const double> log_probs) const;
  std::vector<double> label_log_probs_from(std::span<const double> log_probs,
                                           std::span<const int> labels) const;
};

PredictionSet predict(const EnnModel& model, const Tensor& inputs, std::size_t n_index,
                      std::uint64_t seed);

// Mean over indices of softmax(masked logits); row-major [n][c].
std::vector<double> marginal_probs(const EnnModel& model, const Tensor& inputs,
                                   std::size_t n_index = kDefaultPredictiveIndices,
                                   std::uint64_t seed = 0);

// log[(1/K) sum_z exp(sum_t log softmax(f(x_t, z))_{y_t})], with the same
// index shared by every input of the batch.
double joint_logprob(const EnnModel& model, const Tensor& inputs, std::span<const int> labels,
                     std::size_t n_index = kDefaultPredictiveIndices, std::uint64_t seed = 0);

// Same quantity from precomputed per-index label log-probabilities ([n][k]
// as returned by PredictionSet::label_log_probs) for the rows in `rows`.
double joint_logprob_from(std::span<const double> label_log_probs, std::size_t indices,
                          std::span<const std::size_t> rows);

double log_sum_exp(std::span<const double> values);
// log((1/n) sum exp(v)), exact when all values are equal.
double log_mean_exp(std::span<const double> values);

// Wraps a model so probabilities are supported only on `subset`.
std::shared_ptr<EnnModel> restrict_classes(std::shared_ptr<const EnnModel> model,
                                           std::vector<int> subset);

}  // namespace ennshift
