#include "ennshift/enn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace {

constexpr std::uint64_t kIndexStream = 0x1d;
constexpr std::size_t kPredictChunk = 512;

// Rows [begin, end) of a batched tensor.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  Shape shape = x.shape();
  const std::size_t row = x.numel() / shape[0];
  shape[0] = end - begin;
  auto d = x.data();
  return Tensor(std::move(shape),
                std::vector<float>(d.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                   d.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

class RestrictedModel final : public EnnModel {
 public:
  RestrictedModel(std::shared_ptr<const EnnModel> inner, std::vector<int> subset)
      : inner_(std::move(inner)), subset_(std::move(subset)) {}

  std::size_t num_classes() const override { return inner_->num_classes(); }
  ReferenceDistribution reference() const override { return inner_->reference(); }
  Tensor logits(const Tensor& x, const EpistemicIndex& z) const override {
    return inner_->logits(x, z);
  }
  std::vector<float> logits_for_indices(const Tensor& x,
                                        std::span<const EpistemicIndex> zs) const override {
    return inner_->logits_for_indices(x, zs);
  }
  std::optional<std::vector<int>> class_mask() const override { return subset_; }
  std::string id() const override { return inner_->id(); }
  std::size_t parameter_count() const override { return inner_->parameter_count(); }

 private:
  std::shared_ptr<const EnnModel> inner_;
  std::vector<int> subset_;
};

}  // namespace

ReferenceDistribution ReferenceDistribution::gaussian(std::size_t index_dim) {
  if (index_dim == 0) throw ContractError("gaussian reference needs a positive dimension");
  return {Kind::gaussian, index_dim};
}

ReferenceDistribution ReferenceDistribution::discrete(std::size_t members) {
  if (members == 0) throw ContractError("discrete reference needs at least one member");
  return {Kind::discrete, members};
}

EpistemicIndex EpistemicIndex::gaussian(std::vector<float> values) {
  return {ReferenceDistribution::Kind::gaussian, std::move(values), 0};
}

EpistemicIndex EpistemicIndex::discrete(std::size_t member) {
  return {ReferenceDistribution::Kind::discrete, {}, member};
}

std::vector<EpistemicIndex> draw_indices(const ReferenceDistribution& reference,
                                         std::size_t n_index, std::uint64_t seed) {
  if (n_index < 1) throw ContractError("n_index must be at least 1");
  std::vector<EpistemicIndex> out;
  if (reference.kind == ReferenceDistribution::Kind::discrete) {
    out.reserve(reference.dim);
    for (std::size_t m = 0; m < reference.dim; ++m) out.push_back(EpistemicIndex::discrete(m));
    return out;
  }
  Rng rng(derive_seed(seed, kIndexStream));
  out.reserve(n_index);
  for (std::size_t k = 0; k < n_index; ++k) {
    std::vector<float> z(reference.dim);
    for (float& v : z) v = static_cast<float>(rng.normal());
    out.push_back(EpistemicIndex::gaussian(std::move(z)));
  }
  return out;
}

std::vector<float> EnnModel::logits_for_indices(const Tensor& x,
                                                std::span<const EpistemicIndex> zs) const {
  NoGradGuard guard;
  std::vector<float> out;
  out.reserve(zs.size() * x.dim(0) * num_classes());
  for (const EpistemicIndex& z : zs) {
    Tensor l = logits(x, z);
    out.insert(out.end(), l.data().begin(), l.data().end());
  }
  return out;
}

bool EnnModel::index_independent() const {
  const ReferenceDistribution ref = reference();
  return ref.kind == ReferenceDistribution::Kind::discrete && ref.dim == 1;
}

std::vector<double> PredictionSet::log_probs(double temperature) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ContractError("temperature must be positive and finite");
  }
  std::vector<char> active(classes, mask ? 0 : 1);
  if (mask) {
    for (int c : *mask) active[static_cast<std::size_t>(c)] = 1;
  }
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> out(logits.size());
  const std::size_t rows = indices * examples;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = logits.data() + r * classes;
    double* dst = out.data() + r * classes;
    double mx = ninf;
    for (std::size_t c = 0; c < classes; ++c) {
      if (active[c]) mx = std::max(mx, static_cast<double>(in[c]) / temperature);
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (active[c]) acc += std::exp(static_cast<double>(in[c]) / temperature - mx);
    }
    const double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < classes; ++c) {
      dst[c] = active[c] ? static_cast<double>(in[c]) / temperature - lse : ninf;
    }
  }
  return out;
}

std::vector<double> PredictionSet::marginal_probs(double temperature) const {
  return marginal_from_log_probs(log_probs(temperature));
}

// mean_k exp(lp_k) evaluated as exp(m) * (sum_k exp(lp_k - m) / K). When all
// indices agree the bracket is exactly 1, so a mixture of identical members
// reproduces the single-member probabilities bit for bit.
std::vector<double> PredictionSet::marginal_from_log_probs(std::span<const double> lp) const {
  const std::size_t width = examples * classes;
  std::vector<double> peak(width, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < indices; ++k) {
    const double* src = lp.data() + k * width;
    for (std::size_t i = 0; i < width; ++i) peak[i] = std::max(peak[i], src[i]);
  }
  std::vector<double> acc(width, 0.0);
  for (std::size_t k = 0; k < indices; ++k) {
    const double* src = lp.data() + k * width;
    for (std::size_t i = 0; i < width; ++i) {
      if (std::isfinite(peak[i])) acc[i] += std::exp(src[i] - peak[i]);
    }
  }
  std::vector<double> out(width, 0.0);
  for (std::size_t i = 0; i < width; ++i) {
    if (std::isfinite(peak[i])) {
      out[i] = std::exp(peak[i]) * (acc[i] / static_cast<double>(indices));
    }
  }
  return out;
}

PredictionSet::Summary PredictionSet::summarize(std::span<const int> labels,
                                                double temperature) const {
  const std::vector<double> lp = log_probs(temperature);
  return {marginal_from_log_probs(lp), label_log_probs_from(lp, labels)};
}

std::vector<double> PredictionSet::label_log_probs(std::span<const int> labels,
                                                   double temperature) const {
  return label_log_probs_from(log_probs(temperature), labels);
}

std::vector<double> PredictionSet::label_log_probs_from(std::span<const double> lp,
                                                        std::span<const int> labels) const {
  if (labels.size() != examples) {
    throw ContractError("label_log_probs: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(examples) + " examples");
  }
  std::vector<double> out(examples * indices);
  for (std::size_t n = 0; n < examples; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("label " + std::to_string(y) + " out of range");
    }
    for (std::size_t k = 0; k < indices; ++k) {
      out[n * indices + k] = lp[(k * examples + n) * classes + static_cast<std::size_t>(y)];
    }
  }
  return out;
}

PredictionSet predict(const EnnModel& model, const Tensor& inputs, std::size_t n_index,
                      std::uint64_t seed) {
  const std::vector<EpistemicIndex> zs = draw_indices(model.reference(), n_index, seed);
  PredictionSet out;
  out.examples = inputs.dim(0);
  out.indices = zs.size();
  out.classes = model.num_classes();
  out.mask = model.class_mask();
  out.logits.resize(out.indices * out.examples * out.classes);
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < out.examples; begin += kPredictChunk) {
    const std::size_t end = std::min(out.examples, begin + kPredictChunk);
    const Tensor chunk = (begin == 0 && end == out.examples) ? inputs
                                                             : slice_rows(inputs, begin, end);
    const std::vector<float> l = model.logits_for_indices(chunk, zs);
    const std::size_t rows = end - begin;
    for (std::size_t k = 0; k < out.indices; ++k) {
      std::copy_n(l.data() + k * rows * out.classes, rows * out.classes,
                  out.logits.data() + (k * out.examples + begin) * out.classes);
    }
  }
  check_finite(out.logits, "predict");
  return out;
}

std::vector<double> marginal_probs(const EnnModel& model, const Tensor& inputs,
                                   std::size_t n_index, std::uint64_t seed) {
  return predict(model, inputs, n_index, seed).marginal_probs();
}

double log_sum_exp(std::span<const double> values) {
  const double ninf = -std::numeric_limits<double>::infinity();
  double mx = ninf;
  for (double v : values) mx = std::max(mx, v);
  if (mx == ninf) return ninf;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

double log_mean_exp(std::span<const double> values) {
  const double ninf = -std::numeric_limits<double>::infinity();
  double mx = ninf;
  for (double v : values) mx = std::max(mx, v);
  if (mx == ninf) return ninf;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - mx);
  return mx + std::log(acc / static_cast<double>(values.size()));
}

double joint_logprob_from(std::span<const double> label_log_probs, std::size_t indices,
                          std::span<const std::size_t> rows) {
  std::vector<double> per_index(indices, 0.0);
  for (std::size_t row : rows) {
    const double* src = label_log_probs.data() + row * indices;
    for (std::size_t k = 0; k < indices; ++k) per_index[k] += src[k];
  }
  return log_mean_exp(per_index);
}

double joint_logprob(const EnnModel& model, const Tensor& inputs, std::span<const int> labels,
                     std::size_t n_index, std::uint64_t seed) {
  if (inputs.dim(0) != labels.size() || labels.empty()) {
    throw ContractError("joint_logprob: " + std::to_string(inputs.dim(0)) + " inputs vs " +
                        std::to_string(labels.size()) + " labels");
  }
  const PredictionSet preds = predict(model, inputs, n_index, seed);
  const std::vector<double> lp = preds.label_log_probs(labels);
  std::vector<std::size_t> rows(labels.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return joint_logprob_from(lp, preds.indices, rows);
}

std::shared_ptr<EnnModel> restrict_classes(std::shared_ptr<const EnnModel> model,
                                           std::vector<int> subset) {
  if (!model) throw ContractError("restrict_classes: null model");
  if (subset.empty()) throw ContractError("restrict_classes: empty class subset");
  const int classes = static_cast<int>(model->num_classes());
  for (int c : subset) {
    if (c < 0 || c >= classes) {
      throw ContractError("restrict_classes: class " + std::to_string(c) + " out of range");
    }
  }
  std::sort(subset.begin(), subset.end());
  subset.erase(std::unique(subset.begin(), subset.end()), subset.end());
  if (auto existing = model->class_mask()) {
    std::vector<int> both;
    std::set_intersection(subset.begin(), subset.end(), existing->begin(), existing->end(),
                          std::back_inserter(both));
    if (both.empty()) throw ContractError("restrict_classes: subset disjoint from mask");
    subset = std::move(both);
  }
  return std::make_shared<RestrictedModel>(std::move(model), std::move(subset));
}

}  // namespace ennshift
