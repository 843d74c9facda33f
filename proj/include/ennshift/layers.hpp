#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ennshift/tensor.hpp"

namespace ennshift {

struct LayerSpec {
  enum class Kind { dense, conv, relu, flatten, shift };

  Kind kind = Kind::relu;
  // dense: in/out features. conv: in/out channels.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  bool trainable = true;
  double offset = 0.0;  // shift: added to every element

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                        std::size_t stride = 1);
  static LayerSpec relu();
  static LayerSpec flatten();
  static LayerSpec shift(double offset);

  bool has_params() const { return kind == Kind::dense || kind == Kind::conv; }
  bool operator==(const LayerSpec&) const = default;
};

const char* to_string(LayerSpec::Kind kind);
LayerSpec::Kind layer_kind_from_string(const std::string& name);

enum class InitScheme { uniform_fan_in, zeros };

struct ParamInit {
  InitScheme scheme = InitScheme::uniform_fan_in;
  std::uint64_t seed = 0;
};

// A feed-forward stack of layers with owned parameters.
//
// Shapes are per-example (no batch dimension) and are validated at
// construction. Parameters are stored as weight/bias pairs for every dense or
// conv layer, in layer order.
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<LayerSpec> layers, ParamInit init);

  Tensor forward(const Tensor& x) const;
  // Runs layers [first, last) on x.
  Tensor forward_range(const Tensor& x, std::size_t first, std::size_t last) const;

  struct FeatureOutput {
    Tensor features;  // input to the final dense layer, flattened
    Tensor output;
  };
  FeatureOutput forward_with_features(const Tensor& x) const;

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return shapes_.back(); }
  // Per-example shape after layer i (index 0 is the input shape).
  const Shape& shape_after(std::size_t i) const { return shapes_.at(i); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t feature_dim() const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
  // Parameter tensors belonging to layer i: {weight, bias}.
  Tensor& weight(std::size_t layer);
  Tensor& bias(std::size_t layer);
  const Tensor& weight(std::size_t layer) const;
  const Tensor& bias(std::size_t layer) const;

  void set_trainable(bool on);
  bool trainable() const;

  // Independent deep copy (parameters are not shared).
  Network clone() const;

  // Concatenated copy of every parameter value, in parameter order.
  std::vector<float> parameter_snapshot() const;

 private:
  std::size_t param_slot(std::size_t layer) const;

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<Tensor> params_;
  std::vector<std::size_t> slots_;  // first param index per layer, or npos
};

// dense -> relu -> ... -> dense. Requires at least two sizes, all positive.
Network build_mlp(const std::vector<std::size_t>& sizes, ParamInit init);

struct ConvNetSpec {
  Shape image_shape{1, 16, 16};
  std::vector<std::size_t> channels{8, 16};
  std::vector<std::size_t> strides{1, 2};  // empty means stride 1 everywhere
  std::size_t kernel = 3;
  std::size_t classes = 10;
};

// Pixels in [0,1] are shifted by this before the first conv. Without it the
// 0.5 background dominates the first layer and some seeds never leave the
// uniform-prediction plateau.
inline constexpr double kPixelOffset = -0.5;

// shift, then conv -> relu repeated, flatten, dense head to `classes` logits.
Network build_small_convnet(const ConvNetSpec& spec, ParamInit init);

}  // namespace ennshift
