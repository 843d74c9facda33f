#include "ennshift/layers.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace {

constexpr std::size_t kNoParams = std::numeric_limits<std::size_t>::max();

Tensor init_tensor(Shape shape, std::size_t fan_in, const ParamInit& init,
                   std::uint64_t stream) {
  const std::size_t n = shape_numel(shape);
  std::vector<float> values(n, 0.0f);
  if (init.scheme == InitScheme::uniform_fan_in) {
    Rng rng(derive_seed(init.seed, stream));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (float& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return Tensor(std::move(shape), std::move(values), true);
}

std::string layer_label(std::size_t i, const LayerSpec& spec) {
  return "layer " + std::to_string(i) + " (" + to_string(spec.kind) + ")";
}

}  // namespace

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  return {Kind::dense, in, out, 0, 1, true};
}

LayerSpec LayerSpec::conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          std::size_t stride) {
  return {Kind::conv, in_channels, out_channels, kernel, stride, true};
}

LayerSpec LayerSpec::relu() { return {Kind::relu, 0, 0, 0, 1, true}; }
LayerSpec LayerSpec::flatten() { return {Kind::flatten, 0, 0, 0, 1, true}; }
LayerSpec LayerSpec::shift(double offset) { return {Kind::shift, 0, 0, 0, 1, true, offset}; }

const char* to_string(LayerSpec::Kind kind) {
  switch (kind) {
    case LayerSpec::Kind::dense: return "dense";
    case LayerSpec::Kind::conv: return "conv";
    case LayerSpec::Kind::relu: return "relu";
    case LayerSpec::Kind::flatten: return "flatten";
    case LayerSpec::Kind::shift: return "shift";
  }
  return "?";
}

LayerSpec::Kind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerSpec::Kind::dense;
  if (name == "conv") return LayerSpec::Kind::conv;
  if (name == "relu") return LayerSpec::Kind::relu;
  if (name == "flatten") return LayerSpec::Kind::flatten;
  if (name == "shift") return LayerSpec::Kind::shift;
  throw FormatError("unknown layer kind '" + name + "'");
}

Network::Network(Shape input_shape, std::vector<LayerSpec> layers, ParamInit init)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw ContractError("network needs at least one layer");
  shapes_.push_back(input_shape_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& spec = layers_[i];
    const Shape& in = shapes_.back();
    Shape out;
    slots_.push_back(spec.has_params() ? params_.size() : kNoParams);
    switch (spec.kind) {
      case LayerSpec::Kind::dense: {
        if (in.size() != 1 || in[0] != spec.in || spec.out == 0) {
          throw DimensionError(layer_label(i, spec) + ": expects input [" +
                               std::to_string(spec.in) + "], got " + shape_string(in));
        }
        params_.push_back(init_tensor({spec.in, spec.out}, spec.in, init, 2 * i));
        params_.push_back(init_tensor({spec.out}, spec.in, init, 2 * i + 1));
        out = {spec.out};
        break;
      }
      case LayerSpec::Kind::conv: {
        if (in.size() != 3 || in[0] != spec.in || spec.out == 0 || spec.kernel == 0 ||
            spec.stride == 0) {
          throw DimensionError(layer_label(i, spec) + ": expects input with " +
                               std::to_string(spec.in) + " channels, got " + shape_string(in));
        }
        if (spec.kernel > in[1] || spec.kernel > in[2]) {
          throw DimensionError(layer_label(i, spec) + ": kernel " +
                               std::to_string(spec.kernel) + " larger than feature map " +
                               shape_string(in));
        }
        const std::size_t fan_in = spec.in * spec.kernel * spec.kernel;
        params_.push_back(
            init_tensor({spec.out, spec.in, spec.kernel, spec.kernel}, fan_in, init, 2 * i));
        params_.push_back(init_tensor({spec.out}, fan_in, init, 2 * i + 1));
        out = {spec.out, (in[1] - spec.kernel) / spec.stride + 1,
               (in[2] - spec.kernel) / spec.stride + 1};
        break;
      }
      case LayerSpec::Kind::relu:
      case LayerSpec::Kind::shift:
        out = in;
        break;
      case LayerSpec::Kind::flatten:
        out = {shape_numel(in)};
        break;
    }
    shapes_.push_back(std::move(out));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (slots_[i] == kNoParams) continue;
    params_[slots_[i]].set_requires_grad(layers_[i].trainable);
    params_[slots_[i] + 1].set_requires_grad(layers_[i].trainable);
  }
}

Tensor Network::forward(const Tensor& x) const { return forward_range(x, 0, layers_.size()); }

Tensor Network::forward_range(const Tensor& x, std::size_t first, std::size_t last) const {
  if (first > last || last > layers_.size()) throw ContractError("forward_range: bad range");
  if (x.ndim() != shapes_[first].size() + 1 ||
      !std::equal(shapes_[first].begin(), shapes_[first].end(), x.shape().begin() + 1)) {
    throw DimensionError("network input " + shape_string(x.shape()) +
                         " does not match expected per-example shape " +
                         shape_string(shapes_[first]));
  }
  Tensor h = x;
  for (std::size_t i = first; i < last; ++i) {
    const LayerSpec& spec = layers_[i];
    switch (spec.kind) {
      case LayerSpec::Kind::dense:
        h = add_bias(matmul(h, params_[slots_[i]]), params_[slots_[i] + 1]);
        break;
      case LayerSpec::Kind::conv:
        h = add_channel_bias(conv2d(h, params_[slots_[i]], spec.stride), params_[slots_[i] + 1]);
        break;
      case LayerSpec::Kind::relu:
        h = relu(h);
        break;
      case LayerSpec::Kind::flatten:
        h = flatten(h);
        break;
      case LayerSpec::Kind::shift:
        h = add(h, Tensor::full(h.shape(), static_cast<float>(spec.offset)));
        break;
    }
  }
  return h;
}

Network::FeatureOutput Network::forward_with_features(const Tensor& x) const {
  const std::size_t last = layers_.size() - 1;
  if (layers_[last].kind != LayerSpec::Kind::dense) {
    throw ContractError("feature tap requires a final dense layer");
  }
  Tensor features = forward_range(x, 0, last);
  if (features.ndim() != 2) features = flatten(features);
  Tensor output = forward_range(features, last, layers_.size());
  return {features, output};
}

std::size_t Network::feature_dim() const {
  return shape_numel(shapes_[layers_.size() - 1]);
}

std::vector<std::string> Network::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (slots_[i] == kNoParams) continue;
    names.push_back("layer" + std::to_string(i) + ".weight");
    names.push_back("layer" + std::to_string(i) + ".bias");
  }
  return names;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& p : params_) n += p.numel();
  return n;
}

std::size_t Network::param_slot(std::size_t layer) const {
  if (layer >= layers_.size() || slots_[layer] == kNoParams) {
    throw ContractError("layer " + std::to_string(layer) + " has no parameters");
  }
  return slots_[layer];
}

Tensor& Network::weight(std::size_t layer) { return params_[param_slot(layer)]; }
Tensor& Network::bias(std::size_t layer) { return params_[param_slot(layer) + 1]; }
const Tensor& Network::weight(std::size_t layer) const { return params_[param_slot(layer)]; }
const Tensor& Network::bias(std::size_t layer) const { return params_[param_slot(layer) + 1]; }

void Network::set_trainable(bool on) {
  for (LayerSpec& spec : layers_) spec.trainable = on;
  for (Tensor& p : params_) p.set_requires_grad(on);
}

bool Network::trainable() const {
  for (const Tensor& p : params_) {
    if (p.requires_grad()) return true;
  }
  return false;
}

Network Network::clone() const {
  Network copy = *this;
  for (Tensor& p : copy.params_) p = p.clone();
  return copy;
}

std::vector<float> Network::parameter_snapshot() const {
  std::vector<float> out;
  out.reserve(parameter_count());
  for (const Tensor& p : params_) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

Network build_mlp(const std::vector<std::size_t>& sizes, ParamInit init) {
  if (sizes.size() < 2) throw ContractError("build_mlp: need at least two layer sizes");
  for (std::size_t s : sizes) {
    if (s == 0) throw ContractError("build_mlp: layer sizes must be positive");
  }
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    layers.push_back(LayerSpec::dense(sizes[i], sizes[i + 1]));
    if (i + 2 < sizes.size()) layers.push_back(LayerSpec::relu());
  }
  return Network({sizes.front()}, std::move(layers), init);
}

Network build_small_convnet(const ConvNetSpec& spec, ParamInit init) {
  if (spec.image_shape.size() != 3) {
    throw DimensionError("build_small_convnet: image shape must be [c,h,w], got " +
                         shape_string(spec.image_shape));
  }
  if (!spec.strides.empty() && spec.strides.size() != spec.channels.size()) {
    throw ContractError("build_small_convnet: strides must match channels");
  }
  if (spec.classes == 0) throw ContractError("build_small_convnet: classes must be positive");
  std::vector<LayerSpec> layers{LayerSpec::shift(kPixelOffset)};
  std::size_t in_channels = spec.image_shape[0];
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    const std::size_t stride = spec.strides.empty() ? 1 : spec.strides[i];
    layers.push_back(LayerSpec::conv(in_channels, spec.channels[i], spec.kernel, stride));
    layers.push_back(LayerSpec::relu());
    in_channels = spec.channels[i];
  }
  layers.push_back(LayerSpec::flatten());
  // Shape of the flattened features is only known after validation, so build
  // the trunk first and read it back.
  Network trunk(spec.image_shape, layers, {InitScheme::zeros, 0});
  layers.push_back(LayerSpec::dense(trunk.output_shape()[0], spec.classes));
  return Network(spec.image_shape, std::move(layers), init);
}

}  // namespace ennshift
