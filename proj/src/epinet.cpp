#include "ennshift/epinet.hpp"

#include <algorithm>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace {

constexpr std::size_t kIndexChunk = 64;

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t width = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * width);
  auto d = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.data() + rows[i] * width, width, out.data() + i * width);
  }
  return Tensor(std::move(shape), std::move(out));
}

// Rows [begin, end) of a rank-2 weight matrix as a new tensor.
Tensor weight_rows(const Tensor& w, std::size_t begin, std::size_t end) {
  const std::size_t cols = w.dim(1);
  auto d = w.data();
  return Tensor({end - begin, cols},
                std::vector<float>(d.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                   d.begin() + static_cast<std::ptrdiff_t>(end * cols)));
}

Network make_prior_conv(const Shape& image, const EpinetConfig& config, std::size_t classes,
                        std::uint64_t seed) {
  std::vector<LayerSpec> layers{
      LayerSpec::shift(kPixelOffset),
      LayerSpec::conv(image[0], config.prior_conv_channels, config.prior_conv_kernel,
                      config.prior_conv_stride),
      LayerSpec::relu(), LayerSpec::flatten()};
  Network trunk(image, layers, {InitScheme::zeros, 0});
  layers.push_back(LayerSpec::dense(trunk.output_shape()[0], classes));
  Network net(image, std::move(layers), {InitScheme::uniform_fan_in, seed});
  net.set_trainable(false);
  return net;
}

// Evaluates a dense->relu->... head whose first layer input is concat(phi, z)
// without materializing the concatenation: phi W_phi is shared by all indices.
class SplitHead {
 public:
  SplitHead(const Network& net, const Tensor& phi, std::size_t feature_dim)
      : net_(net), hidden_(net.weight(0).dim(1)) {
    const Tensor& w = net.weight(0);
    pre_phi_ = matmul(phi, weight_rows(w, 0, feature_dim));
    w_index_ = weight_rows(w, feature_dim, w.dim(0));
  }

  // Output rows ordered (index j, example n); zs is [kc, D].
  Tensor run(const Tensor& zs) const {
    const std::size_t kc = zs.dim(0), n = pre_phi_.dim(0);
    const Tensor z_part = add_bias(matmul(zs, w_index_), net_.bias(0));
    std::vector<float> h(kc * n * hidden_);
    auto pp = pre_phi_.data(), zp = z_part.data();
    for (std::size_t j = 0; j < kc; ++j) {
      for (std::size_t r = 0; r < n; ++r) {
        float* dst = h.data() + (j * n + r) * hidden_;
        const float* a = pp.data() + r * hidden_;
        const float* b = zp.data() + j * hidden_;
        for (std::size_t c = 0; c < hidden_; ++c) dst[c] = a[c] + b[c];
      }
    }
    return net_.forward_range(Tensor({kc * n, hidden_}, std::move(h)), 1, net_.layers().size());
  }

 private:
  const Network& net_;
  std::size_t hidden_;
  Tensor pre_phi_;
  Tensor w_index_;
};

}  // namespace

// --- BaseNet -------------------------------------------------------------

BaseNet::BaseNet(Network net, std::string name) : net_(std::move(net)), name_(std::move(name)) {
  if (net_.output_shape().size() != 1) {
    throw DimensionError("base net must output a flat logit vector, got " +
                         shape_string(net_.output_shape()));
  }
}

std::size_t BaseNet::num_classes() const { return net_.output_shape()[0]; }

Tensor BaseNet::logits(const Tensor& x, const EpistemicIndex& z) const {
  if (z.kind != ReferenceDistribution::Kind::discrete || z.member != 0) {
    throw ContractError("base net accepts only the single discrete index 0");
  }
  return net_.forward(x);
}

// --- EpinetModel ---------------------------------------------------------

EpinetModel::EpinetModel(std::shared_ptr<const BaseNet> base, const EpinetConfig& config,
                         std::string name)
    : base_(std::move(base)), config_(config), name_(std::move(name)) {
  if (!base_) throw ContractError("epinet needs a base net");
  if (config_.index_dim == 0) throw ContractError("epinet index dimension must be positive");
  classes_ = base_->num_classes();
  const Shape& image = base_->network().input_shape();
  feature_dim_ = shape_numel(image) + base_->network().feature_dim();

  std::vector<std::size_t> sizes{feature_dim_ + config_.index_dim};
  sizes.insert(sizes.end(), config_.hidden.begin(), config_.hidden.end());
  sizes.push_back(classes_ * config_.index_dim);
  learnable_ = build_mlp(sizes, {InitScheme::uniform_fan_in, derive_seed(config_.seed, 1)});
  prior_mlp_ = build_mlp(sizes, {InitScheme::uniform_fan_in, derive_seed(config_.seed, 2)});
  prior_mlp_.set_trainable(false);
  if (image.size() == 3) {
    for (std::size_t i = 0; i < config_.index_dim; ++i) {
      prior_convs_.push_back(
          make_prior_conv(image, config_, classes_, derive_seed(config_.seed, 100 + i)));
    }
  }
  validate();
}

EpinetModel::EpinetModel(std::shared_ptr<const BaseNet> base, Network learnable,
                         Network prior_mlp, std::vector<Network> prior_convs,
                         const EpinetConfig& config, std::string name)
    : base_(std::move(base)),
      learnable_(std::move(learnable)),
      prior_mlp_(std::move(prior_mlp)),
      prior_convs_(std::move(prior_convs)),
      config_(config),
      name_(std::move(name)) {
  if (!base_) throw ContractError("epinet needs a base net");
  classes_ = base_->num_classes();
  feature_dim_ = shape_numel(base_->network().input_shape()) + base_->network().feature_dim();
  prior_mlp_.set_trainable(false);
  for (Network& net : prior_convs_) net.set_trainable(false);
  validate();
}

void EpinetModel::validate() const {
  const std::size_t d = config_.index_dim;
  const Shape head_in{feature_dim_ + d};
  const Shape head_out{classes_ * d};
  for (const Network* head : {&learnable_, &prior_mlp_}) {
    if (head->input_shape() != head_in || head->output_shape() != head_out ||
        head->layers().front().kind != LayerSpec::Kind::dense) {
      throw DimensionError("epinet head must map " + shape_string(head_in) + " to " +
                           shape_string(head_out) + " starting with a dense layer");
    }
  }
  if (!prior_convs_.empty() && prior_convs_.size() != d) {
    throw DimensionError("epinet needs one prior convnet per index dimension");
  }
  for (const Network& net : prior_convs_) {
    if (net.input_shape() != base_->network().input_shape() ||
        net.output_shape() != Shape{classes_}) {
      throw DimensionError("prior convnet shape does not match the base net");
    }
  }
}

std::size_t EpinetModel::parameter_count() const {
  std::size_t n = base_->parameter_count() + learnable_.parameter_count() +
                  prior_mlp_.parameter_count();
  for (const Network& net : prior_convs_) n += net.parameter_count();
  return n;
}

EpinetModel::Inputs EpinetModel::prepare(const Tensor& x) const {
  NoGradGuard guard;
  const std::size_t n = x.dim(0), d = config_.index_dim;
  auto [features, base_logits] = base_->features(x);
  Inputs in;
  in.phi = concat_cols(flatten(add(x, Tensor::full(x.shape(), kPixelOffset))), features)
               .detach();
  in.base_logits = base_logits.detach();
  std::vector<float> conv(n * classes_ * d, 0.0f);
  for (std::size_t i = 0; i < prior_convs_.size(); ++i) {
    const Tensor out = prior_convs_[i].forward(x);
    auto od = out.data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < classes_; ++c) {
        conv[(r * classes_ + c) * d + i] = od[r * classes_ + c];
      }
    }
  }
  in.conv_prior = Tensor({n, classes_ * d}, std::move(conv));
  return in;
}

EpinetModel::Inputs EpinetModel::select_rows(const Inputs& in,
                                             std::span<const std::size_t> rows) const {
  return {gather_rows(in.phi, rows), gather_rows(in.base_logits, rows),
          gather_rows(in.conv_prior, rows)};
}

Tensor EpinetModel::learnable_term(const Inputs& in, const Tensor& zs) const {
  if (zs.ndim() != 2 || zs.dim(1) != config_.index_dim) {
    throw ContractError("epinet index must have dimension " +
                        std::to_string(config_.index_dim) + ", got " + shape_string(zs.shape()));
  }
  return index_contract(learnable_.forward(concat_cols(in.phi, zs)), zs);
}

Tensor EpinetModel::prior_term(const Inputs& in, const Tensor& zs) const {
  NoGradGuard guard;
  if (zs.ndim() != 2 || zs.dim(1) != config_.index_dim) {
    throw ContractError("epinet index must have dimension " +
                        std::to_string(config_.index_dim) + ", got " + shape_string(zs.shape()));
  }
  const Tensor mlp = index_contract(prior_mlp_.forward(concat_cols(in.phi, zs)), zs);
  const Tensor conv = index_contract(in.conv_prior, zs);
  return add(scale(mlp, static_cast<float>(config_.alpha_mlp)),
             scale(conv, static_cast<float>(config_.alpha_conv)));
}

Tensor EpinetModel::logits_from(const Inputs& in, const Tensor& zs) const {
  const Tensor epinet = add(learnable_term(in, zs), prior_term(in, zs));
  return add(in.base_logits, epinet);
}

Tensor EpinetModel::index_matrix(const EpistemicIndex& z, std::size_t rows) const {
  if (z.kind != ReferenceDistribution::Kind::gaussian || z.vector.size() != config_.index_dim) {
    throw ContractError("epinet index must be a Gaussian vector of dimension " +
                        std::to_string(config_.index_dim));
  }
  std::vector<float> data;
  data.reserve(rows * config_.index_dim);
  for (std::size_t r = 0; r < rows; ++r) data.insert(data.end(), z.vector.begin(), z.vector.end());
  return Tensor({rows, config_.index_dim}, std::move(data));
}

Tensor EpinetModel::logits(const Tensor& x, const EpistemicIndex& z) const {
  const Inputs in = prepare(x);
  return logits_from(in, index_matrix(z, x.dim(0)));
}

std::vector<float> EpinetModel::logits_for_indices(const Tensor& x,
                                                   std::span<const EpistemicIndex> zs) const {
  NoGradGuard guard;
  const std::size_t n = x.dim(0), d = config_.index_dim, c = classes_;
  const Inputs in = prepare(x);
  const SplitHead learn(learnable_, in.phi, feature_dim_);
  const SplitHead prior(prior_mlp_, in.phi, feature_dim_);
  const float a_mlp = static_cast<float>(config_.alpha_mlp);
  const float a_conv = static_cast<float>(config_.alpha_conv);
  auto base = in.base_logits.data();
  auto conv = in.conv_prior.data();

  std::vector<float> out(zs.size() * n * c);
  for (std::size_t begin = 0; begin < zs.size(); begin += kIndexChunk) {
    const std::size_t kc = std::min(zs.size(), begin + kIndexChunk) - begin;
    std::vector<float> zdata;
    zdata.reserve(kc * d);
    for (std::size_t j = 0; j < kc; ++j) {
      const EpistemicIndex& z = zs[begin + j];
      if (z.kind != ReferenceDistribution::Kind::gaussian || z.vector.size() != d) {
        throw ContractError("epinet index must be a Gaussian vector of dimension " +
                            std::to_string(d));
      }
      zdata.insert(zdata.end(), z.vector.begin(), z.vector.end());
    }
    const Tensor zmat({kc, d}, zdata);
    const Tensor lh = learn.run(zmat);
    const Tensor ph = prior.run(zmat);
    auto ld = lh.data(), pd = ph.data();
    for (std::size_t j = 0; j < kc; ++j) {
      const float* z = zdata.data() + j * d;
      for (std::size_t r = 0; r < n; ++r) {
        const float* lrow = ld.data() + (j * n + r) * c * d;
        const float* prow = pd.data() + (j * n + r) * c * d;
        const float* crow = conv.data() + r * c * d;
        float* dst = out.data() + ((begin + j) * n + r) * c;
        for (std::size_t k = 0; k < c; ++k) {
          float l = 0.0f, p = 0.0f, q = 0.0f;
          for (std::size_t i = 0; i < d; ++i) {
            l += lrow[k * d + i] * z[i];
            p += prow[k * d + i] * z[i];
            q += crow[k * d + i] * z[i];
          }
          dst[k] = base[r * c + k] + (l + (a_mlp * p + a_conv * q));
        }
      }
    }
  }
  check_finite(out, "epinet logits");
  return out;
}

std::vector<float> EpinetModel::prior_snapshot() const {
  std::vector<float> out = prior_mlp_.parameter_snapshot();
  for (const Network& net : prior_convs_) {
    const std::vector<float> p = net.parameter_snapshot();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<double> epinet_variance_probe(const EpinetModel& model, const Tensor& x,
                                          std::size_t n_index, std::uint64_t seed) {
  if (n_index < 2) throw ContractError("variance probe needs n_index >= 2");
  const std::vector<EpistemicIndex> zs = draw_indices(model.reference(), n_index, seed);
  const std::vector<float> logits = model.logits_for_indices(x, zs);
  const std::size_t n = x.dim(0), c = model.num_classes();
  std::vector<double> variance(c, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      double mean = 0.0;
      for (std::size_t j = 0; j < n_index; ++j) mean += logits[(j * n + r) * c + k];
      mean /= static_cast<double>(n_index);
      double ss = 0.0;
      for (std::size_t j = 0; j < n_index; ++j) {
        const double dlt = logits[(j * n + r) * c + k] - mean;
        ss += dlt * dlt;
      }
      variance[k] += ss / static_cast<double>(n_index - 1) / static_cast<double>(n);
    }
  }
  return variance;
}

}  // namespace ennshift
