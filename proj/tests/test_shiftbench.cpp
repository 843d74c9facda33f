#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <Eigen/Dense>

#include "doctest.h"
#include "ennshift/errors.hpp"
#include "ennshift/pipeline.hpp"
#include "ennshift/shiftbench.hpp"

using namespace ennshift;
namespace fs = std::filesystem;

namespace {

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

void all_in_unit(const Tensor& t) {
  for (float v : t.data()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
}

fs::path temp_file(const std::string& name, const std::vector<unsigned char>& bytes) {
  const fs::path p = fs::temp_directory_path() / ("ennshift_test_" + name);
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return p;
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  return s / static_cast<double>(a.numel());
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const ImageDataset a = generate_dataset(50, 10, 9);
  const ImageDataset b = generate_dataset(50, 10, 9);
  CHECK(same_bytes(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK_FALSE(same_bytes(a.images, generate_dataset(50, 10, 10).images));
  CHECK(a.images.shape() == Shape{50, 1, 16, 16});
}

TEST_CASE("generated classes are balanced within one") {
  for (auto [n, c] : std::vector<std::pair<std::size_t, std::size_t>>{{1000, 10}, {37, 7}, {5, 3}}) {
    const ImageDataset d = generate_dataset(n, c, 4);
    std::vector<std::size_t> counts(c, 0);
    for (int y : d.labels) {
      REQUIRE(y >= 0);
      REQUIRE(static_cast<std::size_t>(y) < c);
      ++counts[static_cast<std::size_t>(y)];
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 1);
    if (n == 1000) CHECK(*lo == 100);
  }
}

TEST_CASE("generator preconditions") {
  CHECK_THROWS_AS(generate_dataset(10, 11, 0), ContractError);
  CHECK_THROWS_AS(generate_dataset(10, 0, 0), ContractError);
  CHECK_THROWS_AS(generate_dataset(0, 3, 0), ContractError);
}

TEST_CASE("pixels stay in [0, 1] after generation and every corruption") {
  const ImageDataset d = generate_dataset(40, 10, 2, {0.18, 0.5, 0.6, 0.2});
  all_in_unit(d.images);
  for (Corruption c : all_corruptions()) {
    for (int s = 1; s <= kSeverityLevels; ++s) all_in_unit(corrupt(d, to_string(c), s, 3).images);
  }
}

TEST_CASE("corruption keeps labels, order and size and is seeded") {
  const ImageDataset d = generate_dataset(30, 10, 5);
  for (Corruption c : all_corruptions()) {
    for (int s = 1; s <= kSeverityLevels; ++s) {
      const ImageDataset out = corrupt(d, to_string(c), s, 8);
      CHECK(out.labels == d.labels);
      CHECK(out.images.shape() == d.images.shape());
      CHECK(same_bytes(out.images, corrupt(d, to_string(c), s, 8).images));
      CHECK(out.provenance["parameter"].get<double>() == severity_parameter(c, s));
    }
  }
  CHECK_THROWS_AS(corrupt(d, "fog", 1, 0), ContractError);
  CHECK_THROWS_AS(corrupt(d, "contrast", 0, 0), ContractError);
  CHECK_THROWS_AS(corrupt(d, "contrast", 6, 0), ContractError);
}

TEST_CASE("severity tables are strictly monotone") {
  for (Corruption c : all_corruptions()) {
    const auto& t = severity_table(c);
    const bool decreasing = c == Corruption::shot_noise || c == Corruption::contrast;
    for (std::size_t i = 1; i < t.size(); ++i) {
      if (decreasing) {
        CHECK(t[i] < t[i - 1]);
      } else {
        CHECK(t[i] > t[i - 1]);
      }
    }
    CHECK(corruption_from_string(to_string(c)) == c);
  }
  const auto& g = severity_table(Corruption::gaussian_noise);
  CHECK(std::vector<double>(g.begin(), g.end()) == std::vector<double>{0.04, 0.08, 0.12, 0.18, 0.26});
  const auto& k = severity_table(Corruption::contrast);
  CHECK(std::vector<double>(k.begin(), k.end()) == std::vector<double>{0.75, 0.6, 0.45, 0.3, 0.2});
}

TEST_CASE("zero-sigma gaussian noise is the identity") {
  std::vector<float> plane(16 * 16);
  for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = static_cast<float>(i % 17) / 16.0f;
  const std::vector<float> before = plane;
  Rng rng(1);
  apply_corruption(plane, 16, 16, Corruption::gaussian_noise, 0.0, rng);
  CHECK(plane == before);
  CHECK_THROWS_AS(apply_corruption(plane, 15, 16, Corruption::contrast, 0.5, rng), DimensionError);
}

TEST_CASE("mean distortion grows with severity") {
  const ImageDataset d = generate_dataset(200, 10, 6);
  for (Corruption c : all_corruptions()) {
    double previous = 0.0;
    for (int s = 1; s <= kSeverityLevels; ++s) {
      const double dist = mean_abs_diff(corrupt(d, to_string(c), s, 1).images, d.images);
      INFO(to_string(c), " severity ", s);
      CHECK(dist > previous);
      previous = dist;
    }
  }
}

TEST_CASE("ood split is class-disjoint and remaps in-distribution labels") {
  const ImageDataset d = generate_dataset(300, 10, 7);
  const std::vector<int> in{0, 1, 2, 3, 4, 5, 6};
  const OodSplit s = make_ood_split(10, in, d);
  CHECK(s.in_dist.size() + s.ood.size() == d.size());
  std::set<int> ood_labels(s.ood.labels.begin(), s.ood.labels.end());
  CHECK(ood_labels == std::set<int>{7, 8, 9});
  for (int y : s.in_dist.labels) CHECK((y >= 0 && y < 7));

  // A permuted subset remaps to positions.
  const OodSplit p = make_ood_split(10, {9, 2}, d);
  std::size_t j = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] == 9 || d.labels[i] == 2) {
      CHECK(p.in_dist.labels[j] == (d.labels[i] == 9 ? 0 : 1));
      ++j;
    }
  }
  CHECK(j == p.in_dist.size());

  std::vector<int> all(10);
  for (int c = 0; c < 10; ++c) all[static_cast<std::size_t>(c)] = c;
  CHECK_THROWS_AS(make_ood_split(10, all, d), ContractError);
  CHECK_THROWS_AS(make_ood_split(10, {}, d), ContractError);
  CHECK_THROWS_AS(make_ood_split(10, {1, 1}, d), ContractError);
  CHECK_THROWS_AS(make_ood_split(10, {10}, d), ContractError);
}

TEST_CASE("default split is seven in-distribution classes and three ood") {
  const RunConfig c;
  CHECK(c.data.classes == 10);
  CHECK(c.data.in_dist == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("adversarial split is exactly the restricted misclassified subset") {
  ConvNetSpec spec;
  spec.channels = {3, 3};
  spec.classes = 7;
  auto ref = std::make_shared<BaseNet>(build_small_convnet(spec, {InitScheme::uniform_fan_in, 3}),
                                       "member-0");
  ref->freeze();
  const ImageDataset test = make_ood_split(10, {0, 1, 2, 3, 4, 5, 6}, generate_dataset(400, 10, 8)).in_dist;
  const std::vector<int> subset{0, 2, 3, 5, 6};
  const ImageDataset adv = make_adversarial_split(ref, test, subset, 1000, 0);

  // Oracle: argmax of raw logits over the subset columns, lowest id on ties.
  const Tensor logits = ref->network().forward(test.images);
  std::vector<std::size_t> expected;
  std::size_t candidates = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int y = test.labels[i];
    if (std::find(subset.begin(), subset.end(), y) == subset.end()) continue;
    ++candidates;
    int best = subset[0];
    for (int c : subset) {
      if (logits.data()[i * 7 + static_cast<std::size_t>(c)] >
          logits.data()[i * 7 + static_cast<std::size_t>(best)]) {
        best = c;
      }
    }
    if (best != y) expected.push_back(i);
  }
  REQUIRE(!expected.empty());
  CHECK(adv.size() == expected.size());
  CHECK(same_bytes(adv.images, test.subset(expected).images));
  CHECK(adv.labels == test.subset(expected).labels);
  CHECK(adv.provenance["reference_model"] == "member-0");
  CHECK(adv.provenance["candidates"] == candidates);

  // The reference scores zero on its own split.
  const auto restricted = restrict_classes(ref, subset);
  const auto pred = predicted_labels(marginal_probs(*restricted, adv.images, 1000, 0), 7);
  for (std::size_t i = 0; i < adv.size(); ++i) CHECK(pred[i] != adv.labels[i]);

  // Byte-stable on recomputation.
  const ImageDataset again = make_adversarial_split(ref, test, subset, 1000, 0);
  CHECK(same_bytes(again.images, adv.images));
}

TEST_CASE("a perfect reference yields an empty split with a warning") {
  // Logits equal the label-indicator pixel value, so the model is always right.
  Network net({1, 16, 16}, {LayerSpec::flatten(), LayerSpec::dense(256, 2)}, {InitScheme::zeros, 0});
  net.weight(1).mutable_data()[0 * 2 + 1] = 10.0f;
  auto ref = std::make_shared<BaseNet>(std::move(net));
  ref->freeze();
  ImageDataset d;
  std::vector<float> px(4 * 256, 0.0f);
  d.labels = {0, 1, 0, 1};
  for (std::size_t i = 0; i < 4; ++i) px[i * 256] = d.labels[i] == 1 ? 1.0f : -1.0f;
  d.images = Tensor({4, 1, 16, 16}, px);
  const ImageDataset adv = make_adversarial_split(ref, d, {0, 1}, 10, 0);
  CHECK(adv.size() == 0);
  CHECK(adv.provenance.contains("warning"));
}

TEST_CASE("IDX fixture recovers pixels exactly") {
  std::vector<unsigned char> img;
  put_be32(img, 0x00000803);
  put_be32(img, 1);
  put_be32(img, 16);
  put_be32(img, 16);
  for (int i = 0; i < 256; ++i) img.push_back(static_cast<unsigned char>(i));
  std::vector<unsigned char> lab;
  put_be32(lab, 0x00000801);
  put_be32(lab, 1);
  lab.push_back(7);
  const ImageDataset d = load_idx(temp_file("img.idx", img), temp_file("lab.idx", lab));
  REQUIRE(d.size() == 1);
  CHECK(d.labels[0] == 7);
  for (int i = 0; i < 256; ++i) {
    CHECK(d.images.data()[static_cast<std::size_t>(i)] == static_cast<float>(i) / 255.0f);
  }
}

TEST_CASE("IDX images of other sizes are area-resampled") {
  std::vector<unsigned char> img;
  put_be32(img, 0x00000803);
  put_be32(img, 1);
  put_be32(img, 32);
  put_be32(img, 32);
  // 2x2 blocks of constant value: block (by, bx) holds (by * 16 + bx) % 256.
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) img.push_back(static_cast<unsigned char>((y / 2 * 16 + x / 2) % 256));
  }
  const ImageDataset d = load_idx(temp_file("img32.idx", img));
  for (int i = 0; i < 256; ++i) {
    CHECK(d.images.data()[static_cast<std::size_t>(i)] ==
          doctest::Approx(static_cast<float>(i) / 255.0f).epsilon(1e-6));
  }
  const std::vector<float> plane{0.0f, 1.0f, 1.0f, 0.0f};
  CHECK(resample_area(plane, 2, 2, 1, 1)[0] == doctest::Approx(0.5));
}

TEST_CASE("IDX format errors") {
  CHECK_THROWS_AS(load_idx(temp_file("empty.idx", {})), FormatError);
  std::vector<unsigned char> bad;
  put_be32(bad, 0x00000801);
  put_be32(bad, 1);
  put_be32(bad, 2);
  put_be32(bad, 2);
  CHECK_THROWS_AS(load_idx(temp_file("bad.idx", bad)), FormatError);
  std::vector<unsigned char> trunc;
  put_be32(trunc, 0x00000803);
  put_be32(trunc, 2);
  put_be32(trunc, 2);
  put_be32(trunc, 2);
  trunc.push_back(1);
  try {
    load_idx(temp_file("trunc.idx", trunc));
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  CHECK_THROWS_AS(load_idx(temp_file("short.idx", {0, 0, 8})), FormatError);
  CHECK_THROWS_AS(load_idx(fs::temp_directory_path() / "ennshift_test_missing.idx"), IoError);
}

TEST_CASE("a linear probe on raw pixels learns the classes") {
  // Exact least-squares fit of one-hot targets on centered pixels plus a bias.
  const std::size_t n = 1000;
  const ImageDataset d = generate_dataset(n, 10, 11);
  Eigen::MatrixXd x(n, 257);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, 10);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < 256; ++p) x(i, p) = d.images.data()[i * 256 + p] - 0.5;
    x(i, 256) = 1.0;
    y(i, d.labels[i]) = 1.0;
  }
  const Eigen::MatrixXd gram = x.transpose() * x + 1e-6 * Eigen::MatrixXd::Identity(257, 257);
  const Eigen::MatrixXd fit = x * gram.ldlt().solve(x.transpose() * y);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    fit.row(i).maxCoeff(&best);
    correct += best == d.labels[i];
  }
  const double acc = static_cast<double>(correct) / n;
  MESSAGE("linear probe train accuracy " << acc);
  CHECK(acc > 0.6);
}
