#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ennshift {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

// Dense row-major float32 tensor with optional reverse-mode gradient tracking.
//
// A Tensor is a cheap handle onto shared storage: copies alias the same data.
// Operations record a graph edge only when at least one input requires a
// gradient and recording is enabled (see NoGradGuard).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  // Mutable access to the values. Intended for leaves (parameters, inputs).
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Populates gradients of every reachable leaf that requires one.
  // The tensor must hold exactly one element.
  void backward() const;

  // Same values, no graph attachment, independent storage.
  Tensor detach() const;
  // Deep copy of values (and requires_grad flag), detached from any graph.
  Tensor clone() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Throws NumericError if any value is NaN or infinite.
void check_finite(std::span<const float> values, const char* where);

// --- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k] x [k,n]
Tensor add(const Tensor& a, const Tensor& b);               // same shape
Tensor add_bias(const Tensor& x, const Tensor& bias);       // [n,m] + [m]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // [n,f,h,w] + [f]
Tensor scale(const Tensor& x, float factor);
Tensor relu(const Tensor& x);
// Valid-padding 2-D cross-correlation: [n,c,h,w] * [f,c,kh,kw] -> [n,f,h',w'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride);
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);                            // [n, ...] -> [n, rest]
Tensor log_softmax(const Tensor& logits);                   // row-wise on [n,c]
// Mean of -logprobs[i, labels[i]].
Tensor nll_loss(const Tensor& logprobs, std::span<const int> labels);
Tensor sum(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor concat_cols(const Tensor& a, const Tensor& b);       // [n,a] ++ [n,b]
// out[n,c] = sum_d h[n, c*D + d] * z[n, d] for h: [n, C*D], z: [n, D].
Tensor index_contract(const Tensor& h, const Tensor& z);

}  // namespace ennshift
