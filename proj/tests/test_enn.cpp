#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ennshift/enn.hpp"
#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"
#include "support/toy.hpp"

using namespace ennshift;

namespace {

std::vector<double> softmax(const std::vector<float>& logits) {
  double m = -INFINITY;
  for (float v : logits) m = std::max(m, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= s;
  return p;
}

std::vector<float> random_logits(Rng& rng, std::size_t c, double scale = 3.0) {
  std::vector<float> v(c);
  for (float& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

// Random table: members x rows x classes.
std::vector<std::vector<std::vector<float>>> random_table(Rng& rng, std::size_t k, std::size_t n,
                                                          std::size_t c) {
  std::vector<std::vector<std::vector<float>>> t(k);
  for (auto& member : t) {
    for (std::size_t i = 0; i < n; ++i) member.push_back(random_logits(rng, c));
  }
  return t;
}

// logits(x, z) = x + z W: a Gaussian-index toy with [n, C] inputs.
class LinearIndexModel final : public EnnModel {
 public:
  LinearIndexModel(std::size_t classes, std::size_t dim, std::uint64_t seed)
      : classes_(classes), dim_(dim), w_(classes * dim) {
    Rng rng(seed);
    for (float& v : w_) v = static_cast<float>(rng.normal());
  }
  std::size_t num_classes() const override { return classes_; }
  ReferenceDistribution reference() const override {
    return ReferenceDistribution::gaussian(dim_);
  }
  Tensor logits(const Tensor& x, const EpistemicIndex& z) const override {
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t r = 0; r < x.dim(0); ++r) {
      for (std::size_t c = 0; c < classes_; ++c) {
        for (std::size_t d = 0; d < dim_; ++d) out[r * classes_ + c] += z.vector[d] * w_[d * classes_ + c];
      }
    }
    return Tensor(x.shape(), std::move(out));
  }
  std::string id() const override { return "linear"; }
  std::size_t parameter_count() const override { return w_.size(); }

 private:
  std::size_t classes_, dim_;
  std::vector<float> w_;
};

}  // namespace

TEST_CASE("gaussian draws have the index dimension and are seed-deterministic") {
  const auto ref = ReferenceDistribution::gaussian(8);
  const auto a = draw_indices(ref, 50, 3);
  const auto b = draw_indices(ref, 50, 3);
  const auto c = draw_indices(ref, 50, 4);
  REQUIRE(a.size() == 50);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].kind == ReferenceDistribution::Kind::gaussian);
    CHECK(a[i].vector.size() == 8);
    CHECK(a[i].vector == b[i].vector);
  }
  CHECK(a[0].vector != c[0].vector);
}

TEST_CASE("discrete references are enumerated regardless of n_index") {
  const auto ref = ReferenceDistribution::discrete(5);
  for (std::size_t n : {1u, 5u, 1000u}) {
    const auto zs = draw_indices(ref, n, 7);
    REQUIRE(zs.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(zs[i].member == i);
  }
}

TEST_CASE("default predictive index count is 1000") {
  CHECK(kDefaultPredictiveIndices == 1000);
}

TEST_CASE("n_index below one is a contract error") {
  const toy::TableModel m({{{0.0f, 1.0f}}});
  CHECK_THROWS_AS(marginal_probs(m, toy::row_ids(1), 0, 0), ContractError);
}

TEST_CASE("index-independent model: marginal equals a single softmax for any n_index") {
  Rng rng(1);
  const toy::TableModel m(random_table(rng, 1, 6, 4));
  CHECK(m.index_independent());
  const auto one = marginal_probs(m, toy::row_ids(6), 1, 0);
  const auto many = marginal_probs(m, toy::row_ids(6), 1000, 99);
  const Tensor logits = m.logits(toy::row_ids(6), EpistemicIndex::discrete(0));
  for (std::size_t r = 0; r < 6; ++r) {
    const auto row = logits.data().subspan(r * 4, 4);
    const auto p = softmax(std::vector<float>(row.begin(), row.end()));
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(one[r * 4 + c] == many[r * 4 + c]);
      CHECK(one[r * 4 + c] == doctest::Approx(p[c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("two-member ensemble marginal is (p + q) / 2") {
  const std::vector<float> a{1.0f, -0.5f, 2.0f}, b{-1.0f, 3.0f, 0.25f};
  const toy::TableModel m({{a}, {b}});
  const auto probs = marginal_probs(m, toy::row_ids(1), 1000, 0);
  const auto p = softmax(a), q = softmax(b);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(probs[c] - (p[c] + q[c]) / 2) < 1e-15);
}

TEST_CASE("marginals are probability vectors") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(6), n = 1 + rng.below(5), c = 2 + rng.below(6);
    const toy::TableModel m(random_table(rng, k, n, c));
    const auto probs = marginal_probs(m, toy::row_ids(n), 10, trial);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        CHECK(probs[r * c + j] >= 0.0);
        s += probs[r * c + j];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  const LinearIndexModel g(5, 3, 4);
  const Tensor x({2, 5}, {0.1f, 0.2f, -1.0f, 0.0f, 2.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f});
  const auto probs = marginal_probs(g, x, 200, 9);
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK(std::abs(std::accumulate(probs.begin() + static_cast<std::ptrdiff_t>(r * 5),
                                   probs.begin() + static_cast<std::ptrdiff_t>(r * 5 + 5), 0.0) -
                   1.0) < 1e-6);
  }
}

TEST_CASE("gaussian-index marginals are deterministic given the seed") {
  const LinearIndexModel g(4, 2, 11);
  const Tensor x = Tensor::full({3, 4}, 0.5f);
  CHECK(marginal_probs(g, x, 100, 5) == marginal_probs(g, x, 100, 5));
  CHECK(marginal_probs(g, x, 100, 5) != marginal_probs(g, x, 100, 6));
}

TEST_CASE("joint with tau = 1 is the log marginal") {
  Rng rng(3);
  const toy::TableModel m(random_table(rng, 4, 5, 3));
  const auto probs = marginal_probs(m, toy::row_ids(5), 1000, 0);
  for (std::size_t r = 0; r < 5; ++r) {
    for (int y = 0; y < 3; ++y) {
      const int labels[] = {y};
      const double j = joint_logprob(m, toy::row_ids(std::vector<std::size_t>{r}), labels, 1000, 0);
      CHECK(std::abs(j - std::log(probs[r * 3 + y])) < 1e-9);
    }
  }
  const LinearIndexModel g(3, 2, 5);
  const Tensor x({1, 3}, {0.3f, -0.2f, 0.9f});
  const auto gp = marginal_probs(g, x, 500, 17);
  for (int y = 0; y < 3; ++y) {
    const int labels[] = {y};
    CHECK(std::abs(joint_logprob(g, x, labels, 500, 17) - std::log(gp[y])) < 1e-9);
  }
}

TEST_CASE("index-independent joint factorizes into the sum of log marginals") {
  Rng rng(4);
  const toy::TableModel m(random_table(rng, 1, 10, 5));
  std::vector<int> labels(10);
  for (int& y : labels) y = static_cast<int>(rng.below(5));
  const auto probs = marginal_probs(m, toy::row_ids(10), 1, 0);
  double expected = 0.0;
  for (std::size_t t = 0; t < 10; ++t) expected += std::log(probs[t * 5 + labels[t]]);
  CHECK(std::abs(joint_logprob(m, toy::row_ids(10), labels, 1000, 0) - expected) < 1e-9);
}

TEST_CASE("two-member joint over two inputs matches brute force") {
  // Members x rows x classes, with tau = 2 and 3 classes.
  const std::vector<std::vector<std::vector<float>>> table{
      {{2.0f, 0.0f, -1.0f}, {0.5f, 0.5f, 1.5f}},
      {{-1.0f, 1.0f, 0.0f}, {3.0f, -2.0f, 0.0f}}};
  const toy::TableModel m(table);
  for (int y0 = 0; y0 < 3; ++y0) {
    for (int y1 = 0; y1 < 3; ++y1) {
      double mix = 0.0;
      for (int k = 0; k < 2; ++k) mix += 0.5 * softmax(table[k][0])[y0] * softmax(table[k][1])[y1];
      const int labels[] = {y0, y1};
      const double got = joint_logprob(m, toy::row_ids(2), labels, 1000, 0);
      CHECK(std::abs(got - std::log(mix)) < 1e-12);
    }
  }
}

TEST_CASE("ensemble joints are mixtures, not products") {
  // Two members that disagree completely on two inputs.
  const toy::TableModel m({{{4.0f, 0.0f}, {4.0f, 0.0f}}, {{0.0f, 4.0f}, {0.0f, 4.0f}}});
  const int labels[] = {0, 0};
  const double joint = joint_logprob(m, toy::row_ids(2), labels, 1000, 0);
  const auto probs = marginal_probs(m, toy::row_ids(2), 1000, 0);
  const double product = std::log(probs[0]) + std::log(probs[2]);
  const double p = softmax({4.0f, 0.0f})[0], q = 1.0 - p;
  CHECK(std::abs(joint - std::log(0.5 * p * p + 0.5 * q * q)) < 1e-12);
  CHECK(std::abs(product - 2.0 * std::log(0.5)) < 1e-12);
  CHECK(joint - product > 0.5);
}

TEST_CASE("mixture joint probability lies between member products") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(5), tau = 2 + rng.below(9), c = 2 + rng.below(4);
    const auto table = random_table(rng, k, tau, c);
    const toy::TableModel m(table);
    std::vector<int> labels(tau);
    for (int& y : labels) y = static_cast<int>(rng.below(c));
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t z = 0; z < k; ++z) {
      double s = 0.0;
      for (std::size_t t = 0; t < tau; ++t) s += std::log(softmax(table[z][t])[labels[t]]);
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    const double j = joint_logprob(m, toy::row_ids(tau), labels, 1000, 0);
    CHECK(j >= lo - 1e-9);
    CHECK(j <= hi + 1e-9);
  }
}

TEST_CASE("joint stays finite on extreme logits") {
  const toy::TableModel m({{{-80.0f, 80.0f}}, {{-60.0f, 60.0f}}});
  const std::vector<int> labels(1, 0);
  const double j = joint_logprob(m, toy::row_ids(1), labels, 1000, 0);
  CHECK(std::isfinite(j));
  CHECK(j == doctest::Approx(std::log(0.5 * (std::exp(-160.0) + std::exp(-120.0)))).epsilon(1e-9));
}

TEST_CASE("joint length mismatch is a contract error") {
  const toy::TableModel m({{{0.0f, 1.0f}, {1.0f, 0.0f}}});
  const int labels[] = {0};
  CHECK_THROWS_AS(joint_logprob(m, toy::row_ids(2), labels, 1, 0), ContractError);
}

TEST_CASE("log_mean_exp is exact on equal values") {
  for (double v : {-1234.5, -0.3, 0.0, 17.25}) {
    const std::vector<double> xs(1000, v);
    CHECK(log_mean_exp(xs) == v);
  }
  const std::vector<double> xs{std::log(1.0), std::log(3.0)};
  CHECK(log_mean_exp(xs) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(log_sum_exp(xs) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("restricting to all classes leaves probabilities unchanged") {
  Rng rng(6);
  auto m = std::make_shared<toy::TableModel>(random_table(rng, 3, 4, 5));
  const auto r = restrict_classes(m, {0, 1, 2, 3, 4});
  const auto a = marginal_probs(*m, toy::row_ids(4), 1000, 0);
  const auto b = marginal_probs(*r, toy::row_ids(4), 1000, 0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
}

TEST_CASE("uniform logits restricted to k classes are uniform on the subset") {
  auto m = std::make_shared<toy::TableModel>(
      std::vector<std::vector<std::vector<float>>>{{{0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.5f}}});
  const auto r = restrict_classes(m, {1, 4, 5});
  const auto p = marginal_probs(*r, toy::row_ids(1), 1, 0);
  for (std::size_t c = 0; c < 6; ++c) {
    const bool in = c == 1 || c == 4 || c == 5;
    CHECK(std::abs(p[c] - (in ? 1.0 / 3.0 : 0.0)) < 1e-15);
  }
}

TEST_CASE("restricted probabilities are the renormalized full probabilities") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 3 + rng.below(6);
    auto m = std::make_shared<toy::TableModel>(random_table(rng, 1, 3, c));
    std::vector<int> subset;
    for (std::size_t j = 0; j < c; ++j) {
      if (rng.uniform() < 0.5) subset.push_back(static_cast<int>(j));
    }
    if (subset.empty()) subset.push_back(0);
    const auto r = restrict_classes(m, subset);
    const auto full = marginal_probs(*m, toy::row_ids(3), 1, 0);
    const auto sub = marginal_probs(*r, toy::row_ids(3), 1, 0);
    for (std::size_t row = 0; row < 3; ++row) {
      double mass = 0.0;
      for (int j : subset) mass += full[row * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        const bool in = std::find(subset.begin(), subset.end(), static_cast<int>(j)) != subset.end();
        const double expected = in ? full[row * c + j] / mass : 0.0;
        CHECK(std::abs(sub[row * c + j] - expected) < 1e-6);
      }
    }
  }
}

TEST_CASE("bad subsets are contract errors") {
  auto m = std::make_shared<toy::TableModel>(
      std::vector<std::vector<std::vector<float>>>{{{0.0f, 1.0f, 2.0f}}});
  CHECK_THROWS_AS(restrict_classes(m, {}), ContractError);
  CHECK_THROWS_AS(restrict_classes(m, {3}), ContractError);
  CHECK_THROWS_AS(restrict_classes(m, {-1}), ContractError);
}

TEST_CASE("temperature divides logits before each softmax") {
  const std::vector<float> a{1.0f, 3.0f}, b{2.0f, -2.0f};
  const toy::TableModel m({{a}, {b}});
  const PredictionSet preds = predict(m, toy::row_ids(1), 1000, 0);
  const auto probs = preds.marginal_probs(2.0);
  const auto pa = softmax({0.5f, 1.5f}), pb = softmax({1.0f, -1.0f});
  for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(probs[c] - (pa[c] + pb[c]) / 2) < 1e-15);
}

TEST_CASE("summarize agrees with the separate computations") {
  Rng rng(8);
  const toy::TableModel m(random_table(rng, 4, 6, 3));
  const PredictionSet preds = predict(m, toy::row_ids(6), 1000, 0);
  const std::vector<int> labels{0, 1, 2, 2, 1, 0};
  for (double t : {0.5, 1.0, 3.0}) {
    const auto s = preds.summarize(labels, t);
    CHECK(s.marginal == preds.marginal_probs(t));
    CHECK(s.label_log_probs == preds.label_log_probs(labels, t));
  }
}
