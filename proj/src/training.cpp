#include "ennshift/training.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace {

constexpr std::uint64_t kShuffleStream = 100;
constexpr std::uint64_t kIndexStream = 7;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, kShuffleStream + epoch));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

Tensor gather_images(const Tensor& images, std::span<const std::size_t> rows) {
  const std::size_t width = images.numel() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * width);
  auto d = images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.data() + rows[i] * width, width, out.data() + i * width);
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor ridge(const std::vector<Tensor>& params) {
  Tensor total;
  for (const Tensor& p : params) {
    Tensor s = sum_squares(p);
    total = total.defined() ? add(total, s) : s;
  }
  return total;
}

std::vector<Tensor> trainable(const Network& net) {
  std::vector<Tensor> out;
  for (const Tensor& p : net.parameters()) {
    if (p.requires_grad()) out.push_back(p);
  }
  return out;
}

void require_data(const ImageDataset& data) {
  if (data.size() == 0) throw ContractError("training data is empty");
}

double accuracy_of(const Network& net, const ImageDataset& data) {
  NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += 512) {
    const std::size_t end = std::min(data.size(), begin + 512);
    std::vector<std::size_t> rows(end - begin);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
    const Tensor logits = net.forward(gather_images(data.images, rows));
    const std::size_t c = logits.dim(1);
    auto d = logits.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const float* row = d.data() + i * c;
      const auto best = static_cast<int>(std::max_element(row, row + c) - row);
      if (best == data.labels[begin + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0 || batch_size == 0 ||
      weight_decay < 0.0 || n_train_z == 0 || !(max_grad_norm >= 0.0)) {
    throw ConfigError("invalid training configuration");
  }
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double learning_rate, double momentum,
                         double max_grad_norm)
    : params_(std::move(params)),
      learning_rate_(learning_rate),
      momentum_(momentum),
      max_grad_norm_(max_grad_norm) {
  for (const Tensor& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void SgdMomentum::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void SgdMomentum::step() {
  const auto lr = static_cast<float>(learning_rate_);
  const auto mu = static_cast<float>(momentum_);
  float clip = 1.0f;
  if (max_grad_norm_ > 0.0) {
    double sq = 0.0;
    for (const Tensor& p : params_) {
      if (!p.has_grad()) continue;
      check_finite(p.grad(), "gradient");
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_grad_norm_) clip = static_cast<float>(max_grad_norm_ / norm);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    check_finite(g, "gradient");
    auto data = p.mutable_data();
    std::vector<float>& v = velocity_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = mu * v[j] + clip * g[j];
      data[j] -= lr * v[j];
    }
    check_finite(data, "parameter update");
  }
}

Tensor xent_ridge_loss(const EpinetModel& model, const EpinetModel::Inputs& inputs,
                       std::span<const int> labels, const Tensor& zs, double lambda) {
  if (labels.empty()) throw ContractError("xent_ridge_loss: empty batch");
  if (lambda < 0.0) throw ContractError("xent_ridge_loss: lambda must be non-negative");
  const Tensor logits = model.logits_from(inputs, zs);
  Tensor loss = nll_loss(log_softmax(logits), labels);
  if (lambda > 0.0) {
    loss = add(loss, scale(ridge(trainable(model.learnable())), static_cast<float>(lambda)));
  }
  return loss;
}

Tensor xent_ridge_loss(const EpinetModel& model, const Tensor& xs, std::span<const int> labels,
                       const Tensor& zs, double lambda) {
  if (labels.empty()) throw ContractError("xent_ridge_loss: empty batch");
  return xent_ridge_loss(model, model.prepare(xs), labels, zs, lambda);
}

std::shared_ptr<BaseNet> train_base(Network net, const ImageDataset& data,
                                    const TrainConfig& config, TrainLog* log) {
  config.validate();
  require_data(data);
  net.set_trainable(true);
  const std::vector<Tensor> params = trainable(net);
  SgdMomentum opt(params, config.learning_rate, config.momentum, config.max_grad_norm);
  TrainLog local;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(data.size(), config.seed, epoch);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      std::vector<int> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.labels[rows[i]];
      try {
        opt.zero_grad();
        Tensor loss = nll_loss(log_softmax(net.forward(gather_images(data.images, rows))), labels);
        if (config.weight_decay > 0.0) {
          loss = add(loss, scale(ridge(params), static_cast<float>(config.weight_decay)));
        }
        loss.backward();
        opt.step();
        total += loss.item();
      } catch (const NumericError& e) {
        throw TrainingError("base training diverged at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(local.steps) + ": " + e.what());
      }
      ++batches;
      ++local.steps;
    }
    local.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  net.set_trainable(false);
  local.final_train_accuracy = accuracy_of(net, data);
  if (log) *log = local;
  return std::make_shared<BaseNet>(std::move(net));
}

std::shared_ptr<BaseNet> train_base(const ConvNetSpec& spec, const ImageDataset& data,
                                    const TrainConfig& config, TrainLog* log) {
  return train_base(build_small_convnet(spec, {InitScheme::uniform_fan_in, config.seed}), data,
                    config, log);
}

void train_epinet_in_place(EpinetModel& model, const ImageDataset& data,
                           const TrainConfig& config, TrainLog* log) {
  config.validate();
  require_data(data);
  if (!model.base().frozen()) throw ContractError("epinet training requires a frozen base");
  const std::vector<float> base_before = model.base().network().parameter_snapshot();
  const std::vector<float> prior_before = model.prior_snapshot();

  const EpinetModel::Inputs all = model.prepare(data.images);
  const std::vector<Tensor> params = trainable(model.learnable());
  SgdMomentum opt(params, config.learning_rate, config.momentum, config.max_grad_norm);
  Rng index_rng(derive_seed(config.seed, kIndexStream));
  const std::size_t d = model.config().index_dim;
  TrainLog local;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(data.size(), config.seed, epoch);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<std::size_t> rows;
      std::vector<int> labels;
      for (std::size_t r = 0; r < config.n_train_z; ++r) {
        for (std::size_t i = begin; i < end; ++i) {
          rows.push_back(order[i]);
          labels.push_back(data.labels[order[i]]);
        }
      }
      std::vector<float> z(rows.size() * d);
      for (float& v : z) v = static_cast<float>(index_rng.normal());
      try {
        opt.zero_grad();
        const Tensor loss = xent_ridge_loss(model, model.select_rows(all, rows), labels,
                                            Tensor({rows.size(), d}, std::move(z)),
                                            config.weight_decay);
        loss.backward();
        opt.step();
        total += loss.item();
      } catch (const NumericError& e) {
        throw TrainingError("epinet training diverged at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(local.steps) + ": " + e.what());
      }
      ++batches;
      ++local.steps;
    }
    local.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  if (model.base().network().parameter_snapshot() != base_before) {
    throw TrainingError("base parameters changed during epinet training");
  }
  if (model.prior_snapshot() != prior_before) {
    throw TrainingError("prior parameters changed during epinet training");
  }
  if (log) *log = local;
}

std::shared_ptr<EpinetModel> train_epinet(std::shared_ptr<const BaseNet> base,
                                          const ImageDataset& data, const TrainConfig& config,
                                          const EpinetConfig& epinet_config, TrainLog* log) {
  if (!base) throw ContractError("train_epinet: null base");
  auto model = std::make_shared<EpinetModel>(std::move(base), epinet_config);
  train_epinet_in_place(*model, data, config, log);
  return model;
}

std::shared_ptr<EnsembleModel> train_ensemble(const ConvNetSpec& spec, const ImageDataset& data,
                                              const TrainConfig& config, std::size_t members,
                                              std::size_t jobs) {
  if (members == 0) throw ContractError("train_ensemble: need at least one member");
  std::vector<std::shared_ptr<const BaseNet>> trained(members);
  auto train_member = [&](std::size_t m) {
    TrainConfig member_config = config;
    member_config.seed = config.seed + m;
    auto net = train_base(spec, data, member_config);
    net->set_id("member-" + std::to_string(m));
    trained[m] = std::move(net);
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, members));
  if (jobs == 1) {
    for (std::size_t m = 0; m < members; ++m) train_member(m);
  } else {
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> workers;
    for (std::size_t j = 0; j < jobs; ++j) {
      workers.emplace_back([&, j] {
        try {
          for (std::size_t m = j; m < members; m += jobs) train_member(m);
        } catch (...) {
          errors[j] = std::current_exception();
        }
      });
    }
    for (std::thread& t : workers) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return std::make_shared<EnsembleModel>(std::move(trained));
}

}  // namespace ennshift
