// Copyright 2026 The capforge Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capforge/rng.h"

namespace capforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::span<S> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), S{0});
    return grad;
  }
};

}  // namespace detail

// Process-wide switch for graph recording, scoped per thread.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major tensor with reverse-mode autodiff.
//
// A BasicTensor is a handle: copies share storage. Ops never write into their
// inputs; they allocate a fresh node and, when grad recording is on and any
// input requires grad, remember how to push gradients back. Only leaves
// (parameters, inputs) should be written through mutable_data().
template <typename S>
class BasicTensor {
 public:
  using value_type = S;
  using NodePtr = std::shared_ptr<detail::Node<S>>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<S> values, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, S value, bool requires_grad = false);
  static BasicTensor scalar(S value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const S> data() const { return node_->data; }
  std::span<S> mutable_data() { return node_->data; }
  S item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(this)/d(this) = 1 and propagates. Leaf gradients accumulate
  // across calls; intermediate gradients are recomputed every call.
  void backward() const;

  // Value copy with no graph history.
  BasicTensor detach() const;
  bool shares_storage_with(const BasicTensor& other) const {
    return node_ == other.node_;
  }

  const NodePtr& node() const { return node_; }
  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& x, bool requires_grad = false) {
  std::vector<To> values(x.data().begin(), x.data().end());
  return BasicTensor<To>(x.shape(), std::move(values), requires_grad);
}

enum class Activation { kRelu, kGelu };

// Running statistics of a batch-norm layer. Leaves without gradients.
template <typename S>
struct BatchNormStats {
  BasicTensor<S> running_mean;
  BasicTensor<S> running_var;
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kLayerNormEps = 1e-12;

// ---- ops -------------------------------------------------------------------

// a[m x k] * b[k x n].
template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b);
// a[m x k] * b[n x k]^T.
template <typename S>
BasicTensor<S> matmul_transposed(const BasicTensor<S>& a,
                                 const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a);

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor);
// x[..., D] + bias[D], broadcast over leading axes.
template <typename S>
BasicTensor<S> add_bias(const BasicTensor<S>& x, const BasicTensor<S>& bias);
// x[m x n] * w[n x o] + b[o].
template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& w,
                      const BasicTensor<S>& b);

// relu(x) = max(0, x).
// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))), the tanh form.
template <typename S>
BasicTensor<S> activation(const BasicTensor<S>& x, Activation kind);
template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& x) {
  return activation(x, Activation::kRelu);
}
template <typename S>
BasicTensor<S> gelu(const BasicTensor<S>& x) {
  return activation(x, Activation::kGelu);
}

// Softmax along `axis` (negative counts from the end), max-subtracted.
template <typename S>
BasicTensor<S> softmax(const BasicTensor<S>& x, int axis = -1);
template <typename S>
BasicTensor<S> log_softmax(const BasicTensor<S>& x);

template <typename S>
BasicTensor<S> layer_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta,
                          double eps = kLayerNormEps);

// Cross-correlation of x[C_in x H x W] with kernels[C_out x C_in x k x k],
// zero padding `padding` on every side, stride 1.
template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& x, const BasicTensor<S>& kernels,
                      std::size_t padding = 1);

// 2x2 mean pooling, stride 2; a trailing odd row or column is dropped.
template <typename S>
BasicTensor<S> avg_pool2d(const BasicTensor<S>& x);

// Per-channel normalization of x[C x H x W]. Training mode uses the
// statistics of x (biased variance) and folds them into `stats` with
// `momentum` (unbiased variance, as the running estimate). Eval mode reads
// `stats` only.
template <typename S>
BasicTensor<S> batch_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, BatchNormStats<S>& stats,
                          bool training, double momentum = kBatchNormMomentum,
                          double eps = kBatchNormEps);

// Inverted dropout; identity unless training and rate > 0.
template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double rate, bool training,
                       Rng& rng);

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& x);
template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& x);
// Mean over one axis, which is removed from the shape.
template <typename S>
BasicTensor<S> mean_axis(const BasicTensor<S>& x, int axis);
template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape);

// Columns [begin, end) of a 2-D tensor.
template <typename S>
BasicTensor<S> slice_cols(const BasicTensor<S>& x, std::size_t begin,
                          std::size_t end);
template <typename S>
BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>& parts);
// Rows [begin, end) of a 2-D tensor.
template <typename S>
BasicTensor<S> slice_rows(const BasicTensor<S>& x, std::size_t begin,
                          std::size_t end);

// Gathers rows of table[V x D]; result is ids.size() x D.
template <typename S>
BasicTensor<S> embedding(const BasicTensor<S>& table,
                         std::span<const std::int32_t> ids);

// Mean token-level cross-entropy of logits[N x V] against targets, skipping
// rows whose target equals ignore_index. Throws when every row is skipped.
template <typename S>
BasicTensor<S> cross_entropy(const BasicTensor<S>& logits,
                             std::span<const std::int32_t> targets,
                             std::int32_t ignore_index = -1);

}  // namespace capforge
