#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ennshift/enn.hpp"
#include "ennshift/layers.hpp"

namespace ennshift {

// A conventional classifier viewed as an ENN with a single discrete member.
// The last-layer features (input to the final dense layer) are exposed for
// the epinet.
class BaseNet final : public EnnModel {
 public:
  explicit BaseNet(Network net, std::string name = "base");

  std::size_t num_classes() const override;
  ReferenceDistribution reference() const override { return ReferenceDistribution::discrete(1); }
  Tensor logits(const Tensor& x, const EpistemicIndex& z) const override;
  std::string id() const override { return name_; }
  std::size_t parameter_count() const override { return net_.parameter_count(); }

  Tensor logits(const Tensor& x) const { return net_.forward(x); }
  Network::FeatureOutput features(const Tensor& x) const { return net_.forward_with_features(x); }

  const Network& network() const { return net_; }
  Network& network() { return net_; }
  void freeze() { net_.set_trainable(false); }
  bool frozen() const { return !net_.trainable(); }
  void set_id(std::string name) { name_ = std::move(name); }

 private:
  Network net_;
  std::string name_;
};

struct EpinetConfig {
  std::size_t index_dim = 8;
  std::vector<std::size_t> hidden{50, 50};
  double alpha_mlp = 1.0;
  double alpha_conv = 0.5;
  std::size_t prior_conv_channels = 4;
  std::size_t prior_conv_kernel = 3;
  std::size_t prior_conv_stride = 2;
  std::uint64_t seed = 0;
};

// f(x, z) = base(x) + learnable(phi(x), z) + prior(phi(x), z).
//
// phi(x) is the flattened input concatenated with the base net's last-layer
// features, detached from the base graph. Both MLP heads map concat(phi, z) to
// C * D_z outputs that are contracted with z. The prior additionally holds D_z
// small convnets on the raw image whose outputs are mixed by z.
class EpinetModel final : public EnnModel {
 public:
  EpinetModel(std::shared_ptr<const BaseNet> base, const EpinetConfig& config,
              std::string name = "epinet");
  // Assembles a model from existing parts (checkpoint loading, hand-set tests).
  EpinetModel(std::shared_ptr<const BaseNet> base, Network learnable, Network prior_mlp,
              std::vector<Network> prior_convs, const EpinetConfig& config,
              std::string name = "epinet");

  std::size_t num_classes() const override { return classes_; }
  ReferenceDistribution reference() const override {
    return ReferenceDistribution::gaussian(config_.index_dim);
  }
  Tensor logits(const Tensor& x, const EpistemicIndex& z) const override;
  std::vector<float> logits_for_indices(const Tensor& x,
                                        std::span<const EpistemicIndex> zs) const override;
  std::string id() const override { return name_; }
  std::size_t parameter_count() const override;

  // Per-input quantities that do not depend on z.
  struct Inputs {
    Tensor phi;          // [n, F]
    Tensor base_logits;  // [n, C]
    Tensor conv_prior;   // [n, C * D_z], entry c * D_z + i is convnet_i(x)_c
  };
  Inputs prepare(const Tensor& x) const;
  Inputs select_rows(const Inputs& in, std::span<const std::size_t> rows) const;

  // Full logits for per-row indices zs [n, D_z]. Differentiable with respect
  // to the learnable parameters only.
  Tensor logits_from(const Inputs& in, const Tensor& zs) const;
  Tensor learnable_term(const Inputs& in, const Tensor& zs) const;
  Tensor prior_term(const Inputs& in, const Tensor& zs) const;

  const BaseNet& base() const { return *base_; }
  std::shared_ptr<const BaseNet> base_ptr() const { return base_; }
  const Network& learnable() const { return learnable_; }
  Network& learnable() { return learnable_; }
  const Network& prior_mlp() const { return prior_mlp_; }
  const std::vector<Network>& prior_convs() const { return prior_convs_; }
  const EpinetConfig& config() const { return config_; }
  std::size_t feature_dim() const { return feature_dim_; }
  void set_id(std::string name) { name_ = std::move(name); }

  // All prior parameter values (MLP then convnets), for invariance checks.
  std::vector<float> prior_snapshot() const;

 private:
  void validate() const;
  Tensor index_matrix(const EpistemicIndex& z, std::size_t rows) const;

  std::shared_ptr<const BaseNet> base_;
  Network learnable_;
  Network prior_mlp_;
  std::vector<Network> prior_convs_;
  EpinetConfig config_;
  std::string name_;
  std::size_t classes_ = 0;
  std::size_t feature_dim_ = 0;
};

// Empirical per-class variance of the logits over sampled indices, averaged
// over the rows of x. Requires n_index >= 2.
std::vector<double> epinet_variance_probe(const EpinetModel& model, const Tensor& x,
                                          std::size_t n_index, std::uint64_t seed);

}  // namespace ennshift
