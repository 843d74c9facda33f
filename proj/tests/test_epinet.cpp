#include <cmath>
#include <cstring>

#include "doctest.h"
#include "ennshift/epinet.hpp"
#include "ennshift/errors.hpp"
#include "ennshift/metrics.hpp"
#include "ennshift/random.hpp"
#include "ennshift/training.hpp"
#include "support/tiny_epinet.hpp"

using namespace ennshift;

namespace {

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Tensor z_row(const std::vector<double>& z) {
  return Tensor({1, z.size()}, std::vector<float>(z.begin(), z.end()));
}

std::vector<double> as_double(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace

TEST_CASE("hand-set tiny epinet matches a hand evaluation of the three terms") {
  const auto m = tiny::make_model(1.0, 0.5);
  const std::vector<std::vector<double>> zs{{0.7, -1.2}, {-0.3, 0.4}, {1.5, 2.0}, {0.0, 0.9}};
  for (std::size_t s = 0; s < 4; ++s) {
    const auto x = tiny::image(s);
    for (const auto& z : zs) {
      // z values are exact in float, so the reference sees the same index.
      const std::vector<double> zf{static_cast<float>(z[0]), static_cast<float>(z[1])};
      const tiny::Terms ref = tiny::reference(*m, x, zf);
      const Tensor slow =
          m->logits(tiny::image_tensor(x), EpistemicIndex::gaussian({static_cast<float>(z[0]),
                                                                     static_cast<float>(z[1])}));
      const std::vector<EpistemicIndex> idx{EpistemicIndex::gaussian(
          {static_cast<float>(z[0]), static_cast<float>(z[1])})};
      const std::vector<float> fast = m->logits_for_indices(tiny::image_tensor(x), idx);
      for (std::size_t c = 0; c < tiny::kC; ++c) {
        CHECK(std::abs(slow.data()[c] - ref.total[c]) < 1e-6);
        CHECK(std::abs(fast[c] - ref.total[c]) < 1e-6);
      }
    }
  }
}

TEST_CASE("logits minus base equal learnable plus prior terms") {
  const auto m = tiny::make_model(0.8, 0.3);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = tiny::image(trial);
    const std::vector<double> z{rng.normal(), rng.normal()};
    const Tensor zt = z_row(z);
    const auto in = m->prepare(tiny::image_tensor(x));
    const Tensor full = m->logits_from(in, zt);
    const Tensor learn = m->learnable_term(in, zt);
    const Tensor prior = m->prior_term(in, zt);
    const tiny::Terms ref = tiny::reference(*m, x, as_double(std::vector<float>(zt.data().begin(), zt.data().end())));
    for (std::size_t c = 0; c < tiny::kC; ++c) {
      CHECK(std::abs((full.data()[c] - in.base_logits.data()[c]) -
                     (learn.data()[c] + prior.data()[c])) < 1e-6);
      CHECK(std::abs(learn.data()[c] - ref.learnable[c]) < 1e-6);
      CHECK(std::abs(prior.data()[c] - (0.8 * ref.prior_mlp[c] + 0.3 * ref.prior_conv[c])) < 1e-6);
      CHECK(std::abs(in.base_logits.data()[c] - ref.base[c]) < 1e-6);
    }
  }
}

TEST_CASE("zero learnable weights and zero prior scales reduce to the base net") {
  const auto m = tiny::make_model(0.0, 0.0, true);
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = tiny::image_tensor(tiny::image(trial));
    const EpistemicIndex z = EpistemicIndex::gaussian(
        {static_cast<float>(rng.normal()), static_cast<float>(rng.normal())});
    const Tensor e = m->logits(x, z);
    const Tensor b = m->base().logits(x);
    for (std::size_t c = 0; c < tiny::kC; ++c) CHECK(e.data()[c] == b.data()[c]);
  }
}

TEST_CASE("a zero index gives the base logits") {
  const auto m = tiny::make_model(1.0, 0.5);
  for (std::size_t s = 0; s < 5; ++s) {
    const Tensor x = tiny::image_tensor(tiny::image(s));
    const Tensor e = m->logits(x, EpistemicIndex::gaussian({0.0f, 0.0f}));
    const Tensor b = m->base().logits(x);
    for (std::size_t c = 0; c < tiny::kC; ++c) CHECK(e.data()[c] == b.data()[c]);
  }
}

TEST_CASE("the conv prior term is linear in z") {
  const auto m = tiny::make_model(0.0, 1.0);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto in = m->prepare(tiny::image_tensor(tiny::image(trial)));
    const std::vector<double> z{rng.normal(), rng.normal()};
    const double a = rng.uniform(-3.0, 3.0);
    const Tensor p1 = m->prior_term(in, z_row(z));
    const Tensor pa = m->prior_term(in, z_row({a * z[0], a * z[1]}));
    for (std::size_t c = 0; c < tiny::kC; ++c) {
      CHECK(std::abs(pa.data()[c] - a * p1.data()[c]) < 1e-5);
    }
  }
}

TEST_CASE("index dimension mismatch is a contract error") {
  const auto m = tiny::make_model(1.0, 0.5);
  const Tensor x = tiny::image_tensor(tiny::image(0));
  CHECK_THROWS_AS(m->logits(x, EpistemicIndex::gaussian({1.0f, 2.0f, 3.0f})), ContractError);
  CHECK_THROWS_AS(m->logits(x, EpistemicIndex::discrete(0)), ContractError);
  CHECK_THROWS_AS(m->learnable_term(m->prepare(x), Tensor::zeros({1, 3})), ContractError);
}

TEST_CASE("variance probe: zero with no epinet, positive with conv priors") {
  const Tensor x({2, 1, 3, 3}, std::vector<float>(18, 0.6f));
  const auto none = tiny::make_model(0.0, 0.0, true);
  for (double v : epinet_variance_probe(*none, x, 50, 1)) CHECK(v == 0.0);
  const auto conv = tiny::make_model(0.0, 0.5, true);
  const auto v = epinet_variance_probe(*conv, x, 50, 1);
  CHECK(*std::max_element(v.begin(), v.end()) > 0.0);
  CHECK_THROWS_AS(epinet_variance_probe(*conv, x, 1, 1), ContractError);
}

TEST_CASE("variance scales with the square of the mlp prior scale") {
  const Tensor x = tiny::image_tensor(tiny::image(3));
  const auto v1 = epinet_variance_probe(*tiny::make_model(1.0, 0.0, true), x, 400, 5);
  const auto v3 = epinet_variance_probe(*tiny::make_model(3.0, 0.0, true), x, 400, 5);
  for (std::size_t c = 0; c < tiny::kC; ++c) {
    REQUIRE(v1[c] > 0.0);
    CHECK(v3[c] / v1[c] == doctest::Approx(9.0).epsilon(1e-4));
  }
}

TEST_CASE("default epinet structure") {
  const EpinetConfig cfg;
  CHECK(cfg.index_dim == 8);
  CHECK(cfg.hidden == std::vector<std::size_t>{50, 50});
  CHECK(cfg.alpha_mlp == 1.0);
  CHECK(cfg.alpha_conv == 0.5);
  CHECK(cfg.prior_conv_channels == 4);

  ConvNetSpec spec;
  spec.classes = 7;
  auto base = std::make_shared<BaseNet>(build_small_convnet(spec, {InitScheme::uniform_fan_in, 1}));
  base->freeze();
  const EpinetModel m(base, cfg);
  CHECK(m.feature_dim() == 256 + base->network().feature_dim());
  CHECK(m.learnable().input_shape() == Shape{m.feature_dim() + 8});
  CHECK(m.learnable().output_shape() == Shape{7 * 8});
  REQUIRE(m.prior_convs().size() == 8);
  for (const Network& net : m.prior_convs()) {
    CHECK(net.output_shape() == Shape{7});
    CHECK_FALSE(net.trainable());
    bool has_four_channel_conv = false;
    for (const LayerSpec& l : net.layers()) {
      has_four_channel_conv |= l.kind == LayerSpec::Kind::conv && l.out == 4;
    }
    CHECK(has_four_channel_conv);
  }
  CHECK_FALSE(m.prior_mlp().trainable());
  CHECK(m.learnable().trainable());
  CHECK(m.reference() == ReferenceDistribution::gaussian(8));
}

TEST_CASE("fast multi-index path agrees with per-index evaluation") {
  ConvNetSpec spec;
  spec.classes = 5;
  auto base = std::make_shared<BaseNet>(build_small_convnet(spec, {InitScheme::uniform_fan_in, 2}));
  base->freeze();
  EpinetConfig cfg;
  cfg.seed = 4;
  const EpinetModel m(base, cfg);
  const ImageDataset data = generate_dataset(6, 5, 3);
  const auto zs = draw_indices(m.reference(), 40, 8);
  const std::vector<float> fast = m.logits_for_indices(data.images, zs);
  for (std::size_t j = 0; j < zs.size(); ++j) {
    const Tensor slow = m.logits(data.images, zs[j]);
    for (std::size_t i = 0; i < slow.numel(); ++i) {
      CHECK(std::abs(fast[j * slow.numel() + i] - slow.data()[i]) < 1e-4);
    }
  }
}

TEST_CASE("prior and base are untouched by epinet training") {
  const auto m = tiny::make_model(1.0, 0.5);
  const std::vector<float> base_before = m->base().network().parameter_snapshot();
  const std::vector<float> prior_before = m->prior_snapshot();
  const std::vector<float> learn_before = m->learnable().parameter_snapshot();
  const auto in = m->prepare(tiny::image_tensor(tiny::image(1)));
  const Tensor z = z_row({0.4, -0.9});
  const Tensor prior_term_before = m->prior_term(in, z);

  ImageDataset data;
  std::vector<float> px;
  for (std::size_t i = 0; i < 12; ++i) {
    const auto x = tiny::image(i);
    px.insert(px.end(), x.begin(), x.end());
    data.labels.push_back(static_cast<int>(i % 3));
  }
  data.images = Tensor({12, 1, 3, 3}, px);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 2;
  train_epinet_in_place(*m, data, tc);

  CHECK(same_bytes(base_before, m->base().network().parameter_snapshot()));
  CHECK(same_bytes(prior_before, m->prior_snapshot()));
  CHECK_FALSE(same_bytes(learn_before, m->learnable().parameter_snapshot()));
  const Tensor prior_term_after = m->prior_term(in, z);
  CHECK(std::memcmp(prior_term_before.data().data(), prior_term_after.data().data(),
                    tiny::kC * sizeof(float)) == 0);
}

TEST_CASE("no gradient reaches the base through the features") {
  const auto m = tiny::make_model(1.0, 0.5);
  const auto in = m->prepare(tiny::image_tensor(tiny::image(2)));
  CHECK_FALSE(in.phi.requires_grad());
  CHECK_FALSE(in.base_logits.requires_grad());
  const Tensor loss = sum(m->logits_from(in, z_row({1.0, 1.0})));
  loss.backward();
  for (const Tensor& p : m->base().network().parameters()) CHECK_FALSE(p.has_grad());
  for (const Tensor& p : m->prior_mlp().parameters()) CHECK_FALSE(p.has_grad());
  bool learnable_grad = false;
  for (const Tensor& p : m->learnable().parameters()) learnable_grad |= p.has_grad();
  CHECK(learnable_grad);
}

TEST_CASE("epinet metrics equal the base net's when the epinet is switched off") {
  ConvNetSpec spec;
  spec.classes = 4;
  auto base = std::make_shared<BaseNet>(build_small_convnet(spec, {InitScheme::uniform_fan_in, 6}));
  base->freeze();
  EpinetConfig cfg;
  cfg.alpha_mlp = 0.0;
  cfg.alpha_conv = 0.0;
  EpinetModel m(base, cfg);
  for (Tensor& t : m.learnable().parameters()) {
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  }
  const ImageDataset data = make_ood_split(6, {0, 1, 2, 3}, generate_dataset(60, 6, 4)).in_dist;
  const PredictionSet pe = predict(m, data.images, 200, 1);
  const PredictionSet pb = predict(*base, data.images, 200, 1);
  DyadicConfig dc;
  dc.n_batches = 50;
  CHECK(pe.marginal_probs() == pb.marginal_probs());
  CHECK(accuracy(pe, data.labels) == accuracy(pb, data.labels));
  CHECK(ece(pe, data.labels) == ece(pb, data.labels));
  CHECK(marginal_nll(pe, data.labels) == marginal_nll(pb, data.labels));
  CHECK(dyadic_joint_nll(pe, data.labels, dc) == dyadic_joint_nll(pb, data.labels, dc));
  CHECK(confidence_score(pe) == confidence_score(pb));
  CHECK(failure_rate(pe, data.labels) == failure_rate(pb, data.labels));
}
