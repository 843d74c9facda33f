#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ennshift/epinet.hpp"

namespace ennshift {

// Deep ensemble: an ENN whose index is a uniformly drawn member id.
class EnsembleModel final : public EnnModel {
 public:
  explicit EnsembleModel(std::vector<std::shared_ptr<const BaseNet>> members,
                         std::string name = "ensemble");

  std::size_t num_classes() const override;
  ReferenceDistribution reference() const override {
    return ReferenceDistribution::discrete(members_.size());
  }
  Tensor logits(const Tensor& x, const EpistemicIndex& z) const override;
  std::string id() const override { return name_; }
  std::size_t parameter_count() const override;

  std::size_t size() const { return members_.size(); }
  const BaseNet& member(std::size_t i) const { return *members_.at(i); }
  const std::vector<std::shared_ptr<const BaseNet>>& members() const { return members_; }
  void set_id(std::string name) { name_ = std::move(name); }

 private:
  std::vector<std::shared_ptr<const BaseNet>> members_;
  std::string name_;
};

// Member z's logits. Throws ContractError for an out-of-range member.
Tensor ensemble_logits(const EnsembleModel& model, const Tensor& x, std::size_t member);

// The first k members in `order` (a permutation of member ids). Nested:
// subensemble(k) is contained in subensemble(k') for k <= k'.
EnsembleModel subensemble(const EnsembleModel& model, std::size_t k,
                          const std::vector<std::size_t>& order);
// Same, using the identity order.
EnsembleModel subensemble(const EnsembleModel& model, std::size_t k);

}  // namespace ennshift
