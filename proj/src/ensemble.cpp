#include "ennshift/ensemble.hpp"

#include <algorithm>
#include <numeric>

#include "ennshift/errors.hpp"

namespace ennshift {

EnsembleModel::EnsembleModel(std::vector<std::shared_ptr<const BaseNet>> members,
                             std::string name)
    : members_(std::move(members)), name_(std::move(name)) {
  if (members_.empty()) throw ContractError("ensemble needs at least one member");
  for (const auto& m : members_) {
    if (!m) throw ContractError("ensemble member is null");
    if (m->num_classes() != members_.front()->num_classes() ||
        m->network().input_shape() != members_.front()->network().input_shape()) {
      throw DimensionError("ensemble members must share input shape and class count");
    }
  }
}

std::size_t EnsembleModel::num_classes() const { return members_.front()->num_classes(); }

Tensor EnsembleModel::logits(const Tensor& x, const EpistemicIndex& z) const {
  if (z.kind != ReferenceDistribution::Kind::discrete) {
    throw ContractError("ensemble index must be a member id");
  }
  return ensemble_logits(*this, x, z.member);
}

std::size_t EnsembleModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& m : members_) n += m->parameter_count();
  return n;
}

Tensor ensemble_logits(const EnsembleModel& model, const Tensor& x, std::size_t member) {
  if (member >= model.size()) {
    throw ContractError("ensemble member " + std::to_string(member) + " out of range [0, " +
                        std::to_string(model.size()) + ")");
  }
  return model.member(member).logits(x);
}

EnsembleModel subensemble(const EnsembleModel& model, std::size_t k,
                          const std::vector<std::size_t>& order) {
  if (k == 0 || k > model.size()) {
    throw ContractError("subensemble size " + std::to_string(k) + " not in [1, " +
                        std::to_string(model.size()) + "]");
  }
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> identity(model.size());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  if (sorted != identity) throw ContractError("subensemble order must be a permutation");
  std::vector<std::shared_ptr<const BaseNet>> picked;
  for (std::size_t i = 0; i < k; ++i) picked.push_back(model.members()[order[i]]);
  return EnsembleModel(std::move(picked), model.id() + "-" + std::to_string(k));
}

EnsembleModel subensemble(const EnsembleModel& model, std::size_t k) {
  std::vector<std::size_t> order(model.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return subensemble(model, k, order);
}

}  // namespace ennshift
