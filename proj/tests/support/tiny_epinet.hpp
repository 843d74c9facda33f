#pragma once

// A hand-set epinet on 1x3x3 images with D_z = 2 and C = 3, plus an
// independent double-precision evaluation of its logits.

#include <algorithm>
#include <memory>
#include <vector>

#include "ennshift/epinet.hpp"
#include "ennshift/layers.hpp"

namespace tiny {

inline constexpr std::size_t kC = 3, kD = 2, kPix = 9, kF = 18;

// Deterministic, uneven values in roughly [-0.6, 0.6].
inline float hand_value(std::size_t i, std::size_t salt) {
  return static_cast<float>(static_cast<int>((i * 7 + salt * 13) % 11) - 5) * 0.12f +
         static_cast<float>(salt % 3) * 0.01f;
}

inline void fill(ennshift::Network& net, std::size_t salt, float scale = 1.0f) {
  std::size_t k = 0;
  for (ennshift::Tensor& p : net.parameters()) {
    for (float& v : p.mutable_data()) v = scale * hand_value(k++, salt);
  }
}

struct Parts {
  ennshift::Network base, learnable, prior_mlp;
  std::vector<ennshift::Network> convs;
};

inline Parts make_parts() {
  using ennshift::LayerSpec;
  const ennshift::ParamInit zeros{ennshift::InitScheme::zeros, 0};
  Parts p;
  p.base = ennshift::Network({1, 3, 3}, {LayerSpec::flatten(), LayerSpec::dense(kPix, kC)}, zeros);
  p.learnable = ennshift::build_mlp({kF + kD, 2, kC * kD}, zeros);
  p.prior_mlp = ennshift::build_mlp({kF + kD, 2, kC * kD}, zeros);
  for (std::size_t i = 0; i < kD; ++i) {
    p.convs.emplace_back(ennshift::Shape{1, 3, 3},
                         std::vector<LayerSpec>{LayerSpec::conv(1, 1, 2), LayerSpec::relu(),
                                                LayerSpec::flatten(), LayerSpec::dense(4, kC)},
                         zeros);
  }
  fill(p.base, 1);
  fill(p.learnable, 2);
  fill(p.prior_mlp, 3);
  fill(p.convs[0], 4);
  fill(p.convs[1], 5);
  return p;
}

inline std::shared_ptr<ennshift::EpinetModel> make_model(double alpha_mlp, double alpha_conv,
                                                         bool zero_learnable = false) {
  Parts p = make_parts();
  if (zero_learnable) {
    for (ennshift::Tensor& t : p.learnable.parameters()) {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
    }
  }
  ennshift::EpinetConfig cfg;
  cfg.index_dim = kD;
  cfg.hidden = {2};
  cfg.alpha_mlp = alpha_mlp;
  cfg.alpha_conv = alpha_conv;
  auto base = std::make_shared<ennshift::BaseNet>(std::move(p.base));
  base->freeze();
  return std::make_shared<ennshift::EpinetModel>(base, std::move(p.learnable),
                                                 std::move(p.prior_mlp), std::move(p.convs), cfg);
}

// --- double-precision reference -----------------------------------------

inline std::vector<double> values(const ennshift::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

// y = x W + b with W stored [in, out].
inline std::vector<double> dense(const std::vector<double>& x, const ennshift::Tensor& w,
                                 const ennshift::Tensor& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<double> y = values(b);
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t i = 0; i < in; ++i) y[j] += x[i] * w.data()[i * out + j];
  }
  return y;
}

inline std::vector<double> relu(std::vector<double> v) {
  for (double& x : v) x = std::max(0.0, x);
  return v;
}

// dense -> relu -> dense head, contracted with z.
inline std::vector<double> head(const ennshift::Network& net, const std::vector<double>& phi,
                                const std::vector<double>& z) {
  std::vector<double> in = phi;
  in.insert(in.end(), z.begin(), z.end());
  const auto h = relu(dense(in, net.weight(0), net.bias(0)));
  const auto o = dense(h, net.weight(2), net.bias(2));
  std::vector<double> out(kC, 0.0);
  for (std::size_t c = 0; c < kC; ++c) {
    for (std::size_t d = 0; d < kD; ++d) out[c] += o[c * kD + d] * z[d];
  }
  return out;
}

inline std::vector<double> conv_net(const ennshift::Network& net, const std::vector<double>& x) {
  const ennshift::Tensor& k = net.weight(0);
  std::vector<double> fm(4);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = net.bias(0).data()[0];
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t b = 0; b < 2; ++b) s += x[(i + a) * 3 + (j + b)] * k.data()[a * 2 + b];
      }
      fm[i * 2 + j] = std::max(0.0, s);
    }
  }
  return dense(fm, net.weight(3), net.bias(3));
}

struct Terms {
  std::vector<double> base, learnable, prior_mlp, prior_conv, total;
};

inline Terms reference(const ennshift::EpinetModel& m, const std::vector<double>& x,
                       const std::vector<double>& z) {
  Terms t;
  const ennshift::Network& bn = m.base().network();
  t.base = dense(x, bn.weight(1), bn.bias(1));
  std::vector<double> phi;
  for (double v : x) phi.push_back(v + ennshift::kPixelOffset);
  phi.insert(phi.end(), x.begin(), x.end());  // base features are the flattened input
  t.learnable = head(m.learnable(), phi, z);
  t.prior_mlp = head(m.prior_mlp(), phi, z);
  t.prior_conv.assign(kC, 0.0);
  for (std::size_t i = 0; i < kD; ++i) {
    const auto o = conv_net(m.prior_convs()[i], x);
    for (std::size_t c = 0; c < kC; ++c) t.prior_conv[c] += z[i] * o[c];
  }
  for (std::size_t c = 0; c < kC; ++c) {
    t.total.push_back(t.base[c] + t.learnable[c] + m.config().alpha_mlp * t.prior_mlp[c] +
                      m.config().alpha_conv * t.prior_conv[c]);
  }
  return t;
}

inline std::vector<double> image(std::size_t salt) {
  std::vector<double> x(kPix);
  for (std::size_t i = 0; i < kPix; ++i) {
    x[i] = static_cast<double>(static_cast<float>(((i * 5 + salt * 3) % 10) / 9.0));
  }
  return x;
}

inline ennshift::Tensor image_tensor(const std::vector<double>& x) {
  return ennshift::Tensor({1, 1, 3, 3}, std::vector<float>(x.begin(), x.end()));
}

}  // namespace tiny
