#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ennshift/ensemble.hpp"
#include "ennshift/epinet.hpp"
#include "ennshift/shiftbench.hpp"

namespace ennshift {

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  double weight_decay = 1e-4;  // ridge coefficient lambda
  std::size_t n_train_z = 1;   // fresh indices per example per step (epinet)
  double max_grad_norm = 5.0;  // global gradient-norm clip; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Heavy-ball SGD: v <- momentum * v + grad; p <- p - lr * v. With
// max_grad_norm > 0 the gradient is first rescaled so its global L2 norm is
// at most max_grad_norm.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor> params, double learning_rate, double momentum,
              double max_grad_norm = 0.0);
  void zero_grad();
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> velocity_;
  double learning_rate_;
  double momentum_;
  double max_grad_norm_;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
  double final_train_accuracy = 0.0;
};

// Mean over (example, index) pairs of -log softmax(f(x, z))_y plus
// lambda * ||eta||^2 over the learnable epinet parameters. Rows of `zs`
// pair with rows of `inputs`.
Tensor xent_ridge_loss(const EpinetModel& model, const EpinetModel::Inputs& inputs,
                       std::span<const int> labels, const Tensor& zs, double lambda);
Tensor xent_ridge_loss(const EpinetModel& model, const Tensor& xs, std::span<const int> labels,
                       const Tensor& zs, double lambda);

// Supervised SGD on a convnet. The returned net is frozen.
std::shared_ptr<BaseNet> train_base(Network initial, const ImageDataset& data,
                                    const TrainConfig& config, TrainLog* log = nullptr);
std::shared_ptr<BaseNet> train_base(const ConvNetSpec& spec, const ImageDataset& data,
                                    const TrainConfig& config, TrainLog* log = nullptr);

// Trains only the learnable epinet weights on top of a frozen base. Throws
// TrainingError if base or prior parameters change.
std::shared_ptr<EpinetModel> train_epinet(std::shared_ptr<const BaseNet> base,
                                          const ImageDataset& data, const TrainConfig& config,
                                          const EpinetConfig& epinet_config,
                                          TrainLog* log = nullptr);
// Continues training an existing epinet in place.
void train_epinet_in_place(EpinetModel& model, const ImageDataset& data,
                           const TrainConfig& config, TrainLog* log = nullptr);

// M members with seeds config.seed + m; jobs > 1 trains members on threads.
std::shared_ptr<EnsembleModel> train_ensemble(const ConvNetSpec& spec, const ImageDataset& data,
                                              const TrainConfig& config, std::size_t members,
                                              std::size_t jobs = 1);

}  // namespace ennshift
