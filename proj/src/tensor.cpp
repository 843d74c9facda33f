#include "ennshift/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "ennshift/errors.hpp"

namespace ennshift {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<detail::Node>;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Creates the output node; wires parents and backward only when tracking.
NodePtr make_result(Shape shape, std::vector<float> data, const char* op,
                    std::initializer_list<const Tensor*> inputs,
                    std::function<void(detail::Node&)> backward_fn) {
  check_finite(data, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_ndim(const Tensor& t, std::size_t n, const char* op) {
  require_defined(t, op);
  if (t.ndim() != n) {
    std::ostringstream os;
    os << op << ": expected rank " << n << ", got shape " << shape_string(t.shape());
    throw DimensionError(os.str());
  }
}

// Accumulate into a parent's grad if it participates in the graph.
float* grad_target(const NodePtr& parent) {
  if (!parent->requires_grad) return nullptr;
  parent->ensure_grad();
  return parent->grad.data();
}

// Column buffer for one image: rows (c, ki, kj), columns (oi, oj).
void im2col(const float* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t out_h,
            std::size_t out_w, float* cols) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        float* dst = cols + row * out_h * out_w;
        for (std::size_t oi = 0; oi < out_h; ++oi) {
          const float* src = plane + (oi * stride + ki) * width + kj;
          for (std::size_t oj = 0; oj < out_w; ++oj) dst[oi * out_w + oj] = src[oj * stride];
        }
      }
    }
  }
}

void col2im_add(const float* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t kh, std::size_t kw, std::size_t stride, std::size_t out_h,
                std::size_t out_w, float* image) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = image + c * height * width;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
        const float* src = cols + row * out_h * out_w;
        for (std::size_t oi = 0; oi < out_h; ++oi) {
          float* dst = plane + (oi * stride + ki) * width + kj;
          for (std::size_t oj = 0; oj < out_w; ++oj) dst[oj * stride] += src[oi * out_w + oj];
        }
      }
    }
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_finite(std::span<const float> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << where << ": non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape.empty()) shape = {1};
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor shape must be positive: " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    std::ostringstream os;
    os << "tensor data length " << data.size() << " does not match shape "
       << shape_string(shape);
    throw DimensionError(os.str());
  }
  check_finite(data, "Tensor");
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const Shape& s = shape();
  if (i >= s.size()) {
    throw DimensionError("dim index " + std::to_string(i) + " out of range for " +
                         shape_string(s));
  }
  return s[i];
}

std::size_t Tensor::numel() const { return defined() ? node_->data.size() : 0; }

std::span<const float> Tensor::data() const {
  require_defined(*this, "data");
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  require_defined(*this, "mutable_data");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->data[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  require_defined(*this, "set_requires_grad");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  require_defined(*this, "grad");
  return node_->grad;
}

std::span<float> Tensor::mutable_grad() {
  require_defined(*this, "grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (defined()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order; each node once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) {
      node->backward_fn(*node);
      check_finite(node->grad, node->op);
    }
  }
  // Interior gradients are not needed after the pass.
  for (detail::Node* node : order) {
    if (node->backward_fn) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach");
  return Tensor(node_->shape, node_->data, false);
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone");
  return Tensor(node_->shape, node_->data, node_->requires_grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// --- operations --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  std::vector<float> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  NodePtr an = a.node(), bn = b.node();
  return Tensor::from_node(make_result(
      {m, n}, std::move(out), "matmul", {&a, &b}, [an, bn, m, k, n](detail::Node& self) {
        ConstMatMap g(self.grad.data(), m, n);
        if (float* ga = grad_target(an)) {
          MatMap(ga, m, k).noalias() += g * ConstMatMap(bn->data.data(), k, n).transpose();
        }
        if (float* gb = grad_target(bn)) {
          MatMap(gb, k, n).noalias() += ConstMatMap(an->data.data(), m, k).transpose() * g;
        }
      }));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<float> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  NodePtr an = a.node(), bn = b.node();
  return Tensor::from_node(
      make_result(a.shape(), std::move(out), "add", {&a, &b}, [an, bn](detail::Node& self) {
        for (const NodePtr& p : {an, bn}) {
          if (float* g = grad_target(p)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
        }
      }));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_ndim(x, 2, "add_bias");
  require_ndim(bias, 1, "add_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match columns of " + shape_string(x.shape()));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bd[c];
  }
  NodePtr xn = x.node(), bn = bias.node();
  return Tensor::from_node(make_result(
      x.shape(), std::move(out), "add_bias", {&x, &bias},
      [xn, bn, rows, cols](detail::Node& self) {
        if (float* gx = grad_target(xn)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        }
        if (float* gb = grad_target(bn)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) gb[c] += self.grad[r * cols + c];
          }
        }
      }));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_ndim(x, 4, "add_channel_bias");
  require_ndim(bias, 1, "add_channel_bias");
  const std::size_t n = x.dim(0), f = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (bias.dim(0) != f) {
    throw DimensionError("add_channel_bias: bias " + shape_string(bias.shape()) +
                         " does not match channels of " + shape_string(x.shape()));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < f; ++c) {
      float* p = out.data() + (i * f + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] += bd[c];
    }
  }
  NodePtr xn = x.node(), bn = bias.node();
  return Tensor::from_node(make_result(
      x.shape(), std::move(out), "add_channel_bias", {&x, &bias},
      [xn, bn, n, f, plane](detail::Node& self) {
        if (float* gx = grad_target(xn)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        }
        if (float* gb = grad_target(bn)) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < f; ++c) {
              const float* p = self.grad.data() + (i * f + c) * plane;
              double acc = 0.0;
              for (std::size_t j = 0; j < plane; ++j) acc += p[j];
              gb[c] += static_cast<float>(acc);
            }
          }
        }
      }));
}

Tensor scale(const Tensor& x, float factor) {
  require_defined(x, "scale");
  std::vector<float> out(x.data().begin(), x.data().end());
  for (float& v : out) v *= factor;
  NodePtr xn = x.node();
  return Tensor::from_node(
      make_result(x.shape(), std::move(out), "scale", {&x}, [xn, factor](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
        }
      }));
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  std::vector<float> out(x.data().begin(), x.data().end());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;
  NodePtr xn = x.node();
  return Tensor::from_node(
      make_result(x.shape(), std::move(out), "relu", {&x}, [xn](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (xn->data[i] > 0.0f) g[i] += self.grad[i];
          }
        }
      }));
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride) {
  require_ndim(input, 4, "conv2d");
  require_ndim(kernel, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " channel count does not match input " + shape_string(input.shape()));
  }
  if (kh > h || kw > w) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than input " + shape_string(input.shape()));
  }
  const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
  const std::size_t patch = c * kh * kw, positions = oh * ow;

  std::vector<float> out(n * f * positions);
  std::vector<float> cols(patch * positions);
  ConstMatMap kmat(kernel.data().data(), f, patch);
  for (std::size_t i = 0; i < n; ++i) {
    im2col(input.data().data() + i * c * h * w, c, h, w, kh, kw, stride, oh, ow, cols.data());
    MatMap(out.data() + i * f * positions, f, positions).noalias() =
        kmat * ConstMatMap(cols.data(), patch, positions);
  }

  NodePtr in = input.node(), kn = kernel.node();
  return Tensor::from_node(make_result(
      {n, f, oh, ow}, std::move(out), "conv2d", {&input, &kernel},
      [=](detail::Node& self) {
        float* gin = grad_target(in);
        float* gk = grad_target(kn);
        std::vector<float> buf(patch * positions);
        std::vector<float> dcols(gin ? patch * positions : 0);
        ConstMatMap km(kn->data.data(), f, patch);
        for (std::size_t i = 0; i < n; ++i) {
          ConstMatMap gout(self.grad.data() + i * f * positions, f, positions);
          if (gk) {
            im2col(in->data.data() + i * c * h * w, c, h, w, kh, kw, stride, oh, ow,
                   buf.data());
            MatMap(gk, f, patch).noalias() +=
                gout * ConstMatMap(buf.data(), patch, positions).transpose();
          }
          if (gin) {
            MatMap(dcols.data(), patch, positions).noalias() = km.transpose() * gout;
            col2im_add(dcols.data(), c, h, w, kh, kw, stride, oh, ow, gin + i * c * h * w);
          }
        }
      }));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  NodePtr xn = x.node();
  return Tensor::from_node(
      make_result(std::move(shape), std::move(out), "reshape", {&x}, [xn](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      }));
}

Tensor flatten(const Tensor& x) {
  require_defined(x, "flatten");
  const std::size_t n = x.dim(0);
  return reshape(x, {n, x.numel() / n});
}

Tensor log_softmax(const Tensor& logits) {
  require_ndim(logits, 2, "log_softmax");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<float> out(rows * cols);
  auto ld = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = ld.data() + r * cols;
    const float mx = *std::max_element(row, row + cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = static_cast<float>(static_cast<double>(row[c]) - lse);
    }
  }
  NodePtr xn = logits.node();
  return Tensor::from_node(make_result(
      logits.shape(), std::move(out), "log_softmax", {&logits},
      [xn, rows, cols](detail::Node& self) {
        float* g = grad_target(xn);
        if (!g) return;
        // d/dx_j = g_j - softmax_j * sum_k g_k
        for (std::size_t r = 0; r < rows; ++r) {
          const float* gy = self.grad.data() + r * cols;
          const float* y = self.data.data() + r * cols;
          double total = 0.0;
          for (std::size_t c = 0; c < cols; ++c) total += gy[c];
          for (std::size_t c = 0; c < cols; ++c) {
            g[r * cols + c] += static_cast<float>(gy[c] - std::exp(static_cast<double>(y[c])) * total);
          }
        }
      }));
}

Tensor nll_loss(const Tensor& logprobs, std::span<const int> labels) {
  require_ndim(logprobs, 2, "nll_loss");
  const std::size_t rows = logprobs.dim(0), cols = logprobs.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("nll_loss: " + std::to_string(labels.size()) + " labels for " +
                         shape_string(logprobs.shape()));
  }
  std::vector<int> targets(labels.begin(), labels.end());
  double acc = 0.0;
  auto lp = logprobs.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw ContractError("nll_loss: label " + std::to_string(targets[r]) + " out of range");
    }
    acc -= lp[r * cols + static_cast<std::size_t>(targets[r])];
  }
  NodePtr xn = logprobs.node();
  return Tensor::from_node(make_result(
      {1}, {static_cast<float>(acc / static_cast<double>(rows))}, "nll_loss", {&logprobs},
      [xn, targets = std::move(targets), rows, cols](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          const float per_row = self.grad[0] / static_cast<float>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            g[r * cols + static_cast<std::size_t>(targets[r])] -= per_row;
          }
        }
      }));
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  NodePtr xn = x.node();
  return Tensor::from_node(
      make_result({1}, {static_cast<float>(acc)}, "sum", {&x}, [xn](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
        }
      }));
}

Tensor sum_squares(const Tensor& x) {
  require_defined(x, "sum_squares");
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  NodePtr xn = x.node();
  return Tensor::from_node(make_result(
      {1}, {static_cast<float>(acc)}, "sum_squares", {&x}, [xn](detail::Node& self) {
        if (float* g = grad_target(xn)) {
          for (std::size_t i = 0; i < xn->data.size(); ++i) {
            g[i] += 2.0f * xn->data[i] * self.grad[0];
          }
        }
      }));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "concat_cols");
  require_ndim(b, 2, "concat_cols");
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  if (b.dim(0) != rows) {
    throw DimensionError("concat_cols: row mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  const std::size_t width = ca + cb;
  std::vector<float> out(rows * width);
  auto ad = a.data(), bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.data() + r * ca, ca, out.data() + r * width);
    std::copy_n(bd.data() + r * cb, cb, out.data() + r * width + ca);
  }
  NodePtr an = a.node(), bn = b.node();
  return Tensor::from_node(make_result(
      {rows, width}, std::move(out), "concat_cols", {&a, &b},
      [an, bn, rows, ca, cb, width](detail::Node& self) {
        float* ga = grad_target(an);
        float* gb = grad_target(bn);
        for (std::size_t r = 0; r < rows; ++r) {
          const float* src = self.grad.data() + r * width;
          if (ga) {
            for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += src[c];
          }
          if (gb) {
            for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += src[ca + c];
          }
        }
      }));
}

Tensor index_contract(const Tensor& h, const Tensor& z) {
  require_ndim(h, 2, "index_contract");
  require_ndim(z, 2, "index_contract");
  const std::size_t rows = h.dim(0), d = z.dim(1);
  if (z.dim(0) != rows || d == 0 || h.dim(1) % d != 0) {
    throw DimensionError("index_contract: head " + shape_string(h.shape()) +
                         " incompatible with index " + shape_string(z.shape()));
  }
  const std::size_t classes = h.dim(1) / d;
  std::vector<float> out(rows * classes);
  auto hd = h.data(), zd = z.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* zr = zd.data() + r * d;
    for (std::size_t c = 0; c < classes; ++c) {
      const float* hr = hd.data() + r * classes * d + c * d;
      float acc = 0.0f;
      for (std::size_t k = 0; k < d; ++k) acc += hr[k] * zr[k];
      out[r * classes + c] = acc;
    }
  }
  NodePtr hn = h.node(), zn = z.node();
  return Tensor::from_node(make_result(
      {rows, classes}, std::move(out), "index_contract", {&h, &z},
      [hn, zn, rows, classes, d](detail::Node& self) {
        float* gh = grad_target(hn);
        float* gz = grad_target(zn);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < classes; ++c) {
            const float go = self.grad[r * classes + c];
            const std::size_t base = r * classes * d + c * d;
            for (std::size_t k = 0; k < d; ++k) {
              if (gh) gh[base + k] += go * zn->data[r * d + k];
              if (gz) gz[r * d + k] += go * hn->data[base + k];
            }
          }
        }
      }));
}

}  // namespace ennshift
