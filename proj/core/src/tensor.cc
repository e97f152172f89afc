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

#include "capforge/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "capforge/error.h"

namespace capforge {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- BasicTensor -----------------------------------------------------------

template <typename S>
BasicTensor<S>::BasicTensor(Shape shape, std::vector<S> values,
                            bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node<S>>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename S>
BasicTensor<S> BasicTensor<S>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), S{0}, requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::full(Shape shape, S value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<S>(n, value), requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::scalar(S value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<S>{value}, requires_grad);
}

template <typename S>
S BasicTensor<S>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename S>
BasicTensor<S> BasicTensor<S>::detach() const {
  return BasicTensor(shape(), node_->data, false);
}

template <typename S>
void BasicTensor<S>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  using NodeT = detail::Node<S>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* node : order) {
    if (!node->is_leaf()) node->grad.clear();
  }
  node_->grad_buffer()[0] += S{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->is_leaf() && !node->grad.empty()) node->backward_fn(*node);
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

// ---- op helpers ------------------------------------------------------------

namespace {

template <typename S>
using NodeT = detail::Node<S>;

template <typename S>
bool needs_grad(std::initializer_list<const BasicTensor<S>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds the output node; attaches `backward` only when recording.
template <typename S>
BasicTensor<S> make_result(Shape shape, std::vector<S> data,
                           std::initializer_list<const BasicTensor<S>*> inputs,
                           std::function<void(NodeT<S>&)> backward) {
  auto node = std::make_shared<NodeT<S>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (needs_grad<S>(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward_fn = std::move(backward);
  }
  return BasicTensor<S>::from_node(std::move(node));
}

// Grad buffer of a parent, or an empty span when it does not want one.
template <typename S>
std::span<S> grad_of(const std::shared_ptr<NodeT<S>>& node) {
  if (!node->requires_grad) return {};
  return node->grad_buffer();
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <typename S>
void require_rank(const BasicTensor<S>& t, std::size_t rank, const char* op) {
  require(t.defined(), std::string(op) + ": undefined tensor");
  require(t.rank() == rank, std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " +
                                shape_str(t.shape()));
}

// Raw kernel: c[m x n] += a[m x k] * b[k x n].
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = a[i * k + p];
      if (av == S{0}) continue;
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T.
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n].
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S av = a[i * k + p];
      if (av == S{0}) continue;
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  require(a >= 0 && a < r, "axis " + std::to_string(axis) + " out of range for rank " +
                               std::to_string(rank));
  return static_cast<std::size_t>(a);
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(m * n, S{0});
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_result<S>({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](NodeT<S>& self) {
    if (auto ga = grad_of<S>(an); !ga.empty()) {
      gemm_nt(self.grad.data(), bn->data.data(), ga.data(), m, n, k);
    }
    if (auto gb = grad_of<S>(bn); !gb.empty()) {
      gemm_tn(an->data.data(), self.grad.data(), gb.data(), m, k, n);
    }
  });
}

template <typename S>
BasicTensor<S> matmul_transposed(const BasicTensor<S>& a,
                                 const BasicTensor<S>& b) {
  require_rank(a, 2, "matmul_transposed");
  require_rank(b, 2, "matmul_transposed");
  require(a.dim(1) == b.dim(1), "matmul_transposed: inner dimensions differ, " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<S> out(m * n, S{0});
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_result<S>({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](NodeT<S>& self) {
    // dA = dC * B, dB = dC^T * A
    if (auto ga = grad_of<S>(an); !ga.empty()) {
      gemm_nn(self.grad.data(), bn->data.data(), ga.data(), m, n, k);
    }
    if (auto gb = grad_of<S>(bn); !gb.empty()) {
      gemm_tn(self.grad.data(), an->data.data(), gb.data(), m, n, k);
    }
  });
}

template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<S> out(r * c);
  const auto src = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
  auto an = a.node();
  return make_result<S>({c, r}, std::move(out), {&a}, [an, r, c](NodeT<S>& self) {
    auto ga = grad_of<S>(an);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

// ---- elementwise -----------------------------------------------------------

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require(a.shape() == b.shape(), "add: shapes differ, " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<S>(a.shape(), std::move(out), {&a, &b}, [an, bn](NodeT<S>& self) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      auto g = n->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require(a.shape() == b.shape(), "sub: shapes differ, " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<S>(a.shape(), std::move(out), {&a, &b}, [an, bn](NodeT<S>& self) {
    if (auto g = grad_of<S>(an); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = grad_of<S>(bn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  require(a.shape() == b.shape(), "mul: shapes differ, " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_result<S>(a.shape(), std::move(out), {&a, &b}, [an, bn](NodeT<S>& self) {
    if (auto g = grad_of<S>(an); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    if (auto g = grad_of<S>(bn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
  });
}

template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto an = a.node();
  return make_result<S>(a.shape(), std::move(out), {&a}, [an, factor](NodeT<S>& self) {
    auto g = grad_of<S>(an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename S>
BasicTensor<S> add_bias(const BasicTensor<S>& x, const BasicTensor<S>& bias) {
  require_rank(bias, 1, "add_bias");
  require(x.shape().back() == bias.dim(0), "add_bias: last axis " +
                                               shape_str(x.shape()) + " vs bias " +
                                               shape_str(bias.shape()));
  const std::size_t d = bias.dim(0), rows = x.numel() / d;
  std::vector<S> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += b[j];
  auto xn = x.node(), bn = bias.node();
  return make_result<S>(x.shape(), std::move(out), {&x, &bias}, [xn, bn, rows, d](NodeT<S>& self) {
    if (auto g = grad_of<S>(xn); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = grad_of<S>(bn); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
  });
}

template <typename S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& w,
                      const BasicTensor<S>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename S>
BasicTensor<S> activation(const BasicTensor<S>& x, Activation kind) {
  const auto in = x.data();
  std::vector<S> out(in.size());
  constexpr S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  constexpr S kA = static_cast<S>(0.044715);
  if (kind == Activation::kRelu) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > S{0} ? in[i] : S{0};
  } else {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const S v = in[i];
      out[i] = S{0.5} * v * (S{1} + std::tanh(kC * (v + kA * v * v * v)));
    }
  }
  auto xn = x.node();
  return make_result<S>(x.shape(), std::move(out), {&x}, [xn, kind](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    const auto& in = xn->data;
    if (kind == Activation::kRelu) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (in[i] > S{0}) g[i] += self.grad[i];
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = in[i];
      const S u = kC * (v + kA * v * v * v);
      const S t = std::tanh(u);
      const S du = kC * (S{1} + S{3} * kA * v * v);
      const S d = S{0.5} * (S{1} + t) + S{0.5} * v * (S{1} - t * t) * du;
      g[i] += self.grad[i] * d;
    }
  });
}

// ---- softmax family --------------------------------------------------------

template <typename S>
BasicTensor<S> softmax(const BasicTensor<S>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t n = x.dim(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto in = x.data();
  std::vector<S> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * n * inner + q;
      S mx = in[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      S total{0};
      for (std::size_t k = 0; k < n; ++k) {
        const S e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  auto xn = x.node();
  return make_result<S>(x.shape(), std::move(out), {&x}, [xn, outer, inner, n](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    const auto& y = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * n * inner + q;
        S dot{0};
        for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += y[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

template <typename S>
BasicTensor<S> log_softmax(const BasicTensor<S>& x) {
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  const auto in = x.data();
  std::vector<S> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = in.data() + r * n;
    const S mx = *std::max_element(row, row + n);
    S total{0};
    for (std::size_t k = 0; k < n; ++k) total += std::exp(row[k] - mx);
    const S lse = mx + std::log(total);
    for (std::size_t k = 0; k < n; ++k) out[r * n + k] = row[k] - lse;
  }
  auto xn = x.node();
  return make_result<S>(x.shape(), std::move(out), {&x}, [xn, rows, n](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t r = 0; r < rows; ++r) {
      S total{0};
      for (std::size_t k = 0; k < n; ++k) total += self.grad[r * n + k];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = r * n + k;
        g[i] += self.grad[i] - std::exp(self.data[i]) * total;
      }
    }
  });
}

template <typename S>
BasicTensor<S> layer_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, double eps) {
  const std::size_t d = x.shape().back();
  require(gamma.numel() == d && beta.numel() == d,
          "layer_norm: gamma/beta must have " + std::to_string(d) + " values");
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  std::vector<S> out(in.size()), xhat(in.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = in.data() + r * d;
    S mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<S>(d);
    S var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<S>(d);
    inv_std[r] = S{1} / std::sqrt(var + static_cast<S>(eps));
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = r * d + j;
      xhat[i] = (row[j] - mu) * inv_std[r];
      out[i] = xhat[i] * gamma.data()[j] + beta.data()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<S>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<S>& self) {
        auto gg = grad_of<S>(gn);
        auto gb = grad_of<S>(bn);
        auto gx = grad_of<S>(xn);
        for (std::size_t r = 0; r < rows; ++r) {
          S sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            const S dy = self.grad[i];
            if (!gg.empty()) gg[j] += dy * xhat[i];
            if (!gb.empty()) gb[j] += dy;
            const S dxhat = dy * gn->data[j];
            sum_dy += dxhat;
            sum_dy_xhat += dxhat * xhat[i];
          }
          if (gx.empty()) continue;
          const S inv_d = S{1} / static_cast<S>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            const S dxhat = self.grad[i] * gn->data[j];
            gx[i] += inv_std[r] * (dxhat - inv_d * sum_dy - xhat[i] * inv_d * sum_dy_xhat);
          }
        }
      });
}

// ---- convolution / pooling / batch norm ------------------------------------

template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& x, const BasicTensor<S>& kernels,
                      std::size_t padding) {
  require_rank(x, 3, "conv2d");
  require_rank(kernels, 4, "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  require(kernels.dim(1) == cin, "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                     " vs kernels " + shape_str(kernels.shape()));
  require(h + 2 * padding >= kh && w + 2 * padding >= kw, "conv2d: input smaller than kernel");
  const std::size_t ho = h + 2 * padding - kh + 1, wo = w + 2 * padding - kw + 1;
  const long pad = static_cast<long>(padding);

  // Visits every (output row, input row, output col range) triple for a tap.
  auto for_tap = [=](std::size_t ky, std::size_t kx, auto&& body) {
    const long dx = static_cast<long>(kx) - pad;
    const std::size_t ox_lo = static_cast<std::size_t>(std::max<long>(0, -dx));
    const std::size_t ox_hi =
        static_cast<std::size_t>(std::min<long>(static_cast<long>(wo), static_cast<long>(w) - dx));
    if (ox_lo >= ox_hi) return;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      const long iy = static_cast<long>(oy + ky) - pad;
      if (iy < 0 || iy >= static_cast<long>(h)) continue;
      body(oy, static_cast<std::size_t>(iy), ox_lo, ox_hi, dx);
    }
  };

  std::vector<S> out(cout * ho * wo, S{0});
  const S* in = x.data().data();
  const S* kern = kernels.data().data();
  for (std::size_t co = 0; co < cout; ++co) {
    S* oplane = out.data() + co * ho * wo;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const S* iplane = in + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const S wv = kern[((co * cin + ci) * kh + ky) * kw + kx];
          for_tap(ky, kx, [&](std::size_t oy, std::size_t iy, std::size_t lo, std::size_t hi, long dx) {
            S* orow = oplane + oy * wo;
            const S* irow = iplane + iy * w + dx;
            for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox];
          });
        }
      }
    }
  }
  auto xn = x.node(), kn = kernels.node();
  return make_result<S>(
      {cout, ho, wo}, std::move(out), {&x, &kernels},
      [xn, kn, cin, cout, h, w, ho, wo, kh, kw, for_tap](NodeT<S>& self) {
        const S* gout = self.grad.data();
        if (auto gx = grad_of<S>(xn); !gx.empty()) {
          for (std::size_t ci = 0; ci < cin; ++ci) {
            S* giplane = gx.data() + ci * h * w;
            for (std::size_t co = 0; co < cout; ++co) {
              const S* goplane = gout + co * ho * wo;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const S wv = kn->data[((co * cin + ci) * kh + ky) * kw + kx];
                  for_tap(ky, kx, [&](std::size_t oy, std::size_t iy, std::size_t lo, std::size_t hi, long dx) {
                    const S* grow = goplane + oy * wo;
                    S* irow = giplane + iy * w + dx;
                    for (std::size_t ox = lo; ox < hi; ++ox) irow[ox] += wv * grow[ox];
                  });
                }
              }
            }
          }
        }
        if (auto gk = grad_of<S>(kn); !gk.empty()) {
          for (std::size_t co = 0; co < cout; ++co) {
            const S* goplane = gout + co * ho * wo;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const S* iplane = xn->data.data() + ci * h * w;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  S acc{0};
                  for_tap(ky, kx, [&](std::size_t oy, std::size_t iy, std::size_t lo, std::size_t hi, long dx) {
                    const S* grow = goplane + oy * wo;
                    const S* irow = iplane + iy * w + dx;
                    for (std::size_t ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[ox];
                  });
                  gk[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                }
              }
            }
          }
        }
      });
}

template <typename S>
BasicTensor<S> avg_pool2d(const BasicTensor<S>& x) {
  require_rank(x, 3, "avg_pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(h >= 2 && w >= 2, "avg_pool2d: spatial extent below 2 in " + shape_str(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<S> out(c * ho * wo);
  const auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t base = (ch * h + 2 * oy) * w + 2 * ox;
        out[(ch * ho + oy) * wo + ox] =
            S{0.25} * (in[base] + in[base + 1] + in[base + w] + in[base + w + 1]);
      }
  auto xn = x.node();
  return make_result<S>({c, ho, wo}, std::move(out), {&x}, [xn, c, h, w, ho, wo](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const S v = S{0.25} * self.grad[(ch * ho + oy) * wo + ox];
          const std::size_t base = (ch * h + 2 * oy) * w + 2 * ox;
          g[base] += v;
          g[base + 1] += v;
          g[base + w] += v;
          g[base + w + 1] += v;
        }
  });
}

template <typename S>
BasicTensor<S> batch_norm(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                          const BasicTensor<S>& beta, BatchNormStats<S>& stats,
                          bool training, double momentum, double eps) {
  require_rank(x, 3, "batch_norm");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  require(gamma.numel() == c && beta.numel() == c && stats.running_mean.numel() == c &&
              stats.running_var.numel() == c,
          "batch_norm: per-channel parameters must have " + std::to_string(c) + " values");
  const auto in = x.data();
  std::vector<S> out(in.size()), xhat(in.size()), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const S* p = in.data() + ch * plane;
    S mu, var;
    if (training) {
      mu = S{0};
      for (std::size_t i = 0; i < plane; ++i) mu += p[i];
      mu /= static_cast<S>(plane);
      var = S{0};
      for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      var /= static_cast<S>(plane);
      const S unbiased = plane > 1 ? var * static_cast<S>(plane) / static_cast<S>(plane - 1) : var;
      auto rm = stats.running_mean.mutable_data();
      auto rv = stats.running_var.mutable_data();
      const S m = static_cast<S>(momentum);
      rm[ch] = (S{1} - m) * rm[ch] + m * mu;
      rv[ch] = (S{1} - m) * rv[ch] + m * unbiased;
    } else {
      mu = stats.running_mean.data()[ch];
      var = stats.running_var.data()[ch];
    }
    inv_std[ch] = S{1} / std::sqrt(var + static_cast<S>(eps));
    const S g = gamma.data()[ch], b = beta.data()[ch];
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = ch * plane + i;
      xhat[k] = (p[i] - mu) * inv_std[ch];
      out[k] = xhat[k] * g + b;
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<S>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, c, plane, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<S>& self) {
        auto gg = grad_of<S>(gn);
        auto gb = grad_of<S>(bn);
        auto gx = grad_of<S>(xn);
        for (std::size_t ch = 0; ch < c; ++ch) {
          S sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t k = ch * plane + i;
            sum_dy += self.grad[k];
            sum_dy_xhat += self.grad[k] * xhat[k];
          }
          if (!gg.empty()) gg[ch] += sum_dy_xhat;
          if (!gb.empty()) gb[ch] += sum_dy;
          if (gx.empty()) continue;
          const S scale_factor = gn->data[ch] * inv_std[ch];
          if (!training) {
            for (std::size_t i = 0; i < plane; ++i) gx[ch * plane + i] += self.grad[ch * plane + i] * scale_factor;
            continue;
          }
          const S inv_n = S{1} / static_cast<S>(plane);
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t k = ch * plane + i;
            gx[k] += scale_factor * (self.grad[k] - inv_n * sum_dy - xhat[k] * inv_n * sum_dy_xhat);
          }
        }
      });
}

template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double rate, bool training,
                       Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw InvariantError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  const float threshold = static_cast<float>(rate);
  std::vector<S> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() < threshold ? S{0} : keep_scale;
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return make_result<S>(x.shape(), std::move(out), {&x}, [xn, mask = std::move(mask)](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// ---- reductions / reshaping ------------------------------------------------

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& x) {
  S total{0};
  for (S v : x.data()) total += v;
  auto xn = x.node();
  return make_result<S>({1}, {total}, {&x}, [xn](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& x) {
  return scale(sum(x), S{1} / static_cast<S>(x.numel()));
}

template <typename S>
BasicTensor<S> mean_axis(const BasicTensor<S>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t n = x.dim(ax);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != ax) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<S> out(outer * inner, S{0});
  const auto in = x.data();
  const S inv = S{1} / static_cast<S>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t q = 0; q < inner; ++q) out[o * inner + q] += in[(o * n + k) * inner + q];
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return make_result<S>(std::move(out_shape), std::move(out), {&x}, [xn, outer, inner, n, inv](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t q = 0; q < inner; ++q) g[(o * n + k) * inner + q] += self.grad[o * inner + q] * inv;
  });
}

template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<S> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return make_result<S>(std::move(shape), std::move(out), {&x}, [xn](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename S>
BasicTensor<S> slice_cols(const BasicTensor<S>& x, std::size_t begin,
                          std::size_t end) {
  require_rank(x, 2, "slice_cols");
  require(begin < end && end <= x.dim(1), "slice_cols: bad range [" + std::to_string(begin) +
                                              ", " + std::to_string(end) + ") for " +
                                              shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), width = end - begin;
  std::vector<S> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + begin, width, out.data() + r * width);
  auto xn = x.node();
  return make_result<S>({rows, width}, std::move(out), {&x}, [xn, rows, cols, begin, width](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < width; ++j) g[r * cols + begin + j] += self.grad[r * width + j];
  });
}

template <typename S>
BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == rows, "concat_cols: row counts differ");
    cols += p.dim(1);
  }
  std::vector<S> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t width = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * width, width, out.data() + r * cols + offset);
    offset += width;
  }
  auto node = std::make_shared<NodeT<S>>();
  node->shape = {rows, cols};
  node->data = std::move(out);
  bool any = false;
  if (GradMode::enabled())
    for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    std::vector<std::shared_ptr<NodeT<S>>> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    node->parents = inputs;
    node->backward_fn = [inputs, rows, cols](NodeT<S>& self) {
      std::size_t off = 0;
      for (const auto& in : inputs) {
        const std::size_t width = in->shape[1];
        if (auto g = grad_of<S>(in); !g.empty())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) g[r * width + j] += self.grad[r * cols + off + j];
        off += width;
      }
    };
  }
  return BasicTensor<S>::from_node(std::move(node));
}

template <typename S>
BasicTensor<S> slice_rows(const BasicTensor<S>& x, std::size_t begin,
                          std::size_t end) {
  require_rank(x, 2, "slice_rows");
  require(begin < end && end <= x.dim(0), "slice_rows: bad range for " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<S> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  auto xn = x.node();
  return make_result<S>({end - begin, cols}, std::move(out), {&x}, [xn, begin, cols](NodeT<S>& self) {
    auto g = grad_of<S>(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

template <typename S>
BasicTensor<S> embedding(const BasicTensor<S>& table,
                         std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  require(!ids.empty(), "embedding: no ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<S> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  return make_result<S>({ids.size(), d}, std::move(out), {&table}, [tn, d, id_copy = std::move(id_copy)](NodeT<S>& self) {
    auto g = grad_of<S>(tn);
    for (std::size_t i = 0; i < id_copy.size(); ++i) {
      S* row = g.data() + static_cast<std::size_t>(id_copy[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

template <typename S>
BasicTensor<S> cross_entropy(const BasicTensor<S>& logits,
                             std::span<const std::int32_t> targets,
                             std::int32_t ignore_index) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " rows");
  std::size_t kept = 0;
  for (auto t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
    ++kept;
  }
  if (kept == 0) throw InvariantError("cross_entropy: every target is ignored");
  const auto in = logits.data();
  std::vector<S> probs(rows * v, S{0});
  S total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    const S* row = in.data() + r * v;
    const S mx = *std::max_element(row, row + v);
    S z{0};
    for (std::size_t k = 0; k < v; ++k) {
      probs[r * v + k] = std::exp(row[k] - mx);
      z += probs[r * v + k];
    }
    for (std::size_t k = 0; k < v; ++k) probs[r * v + k] /= z;
    total += (mx + std::log(z)) - row[targets[r]];
  }
  const S inv = S{1} / static_cast<S>(kept);
  auto ln = logits.node();
  std::vector<std::int32_t> tcopy(targets.begin(), targets.end());
  return make_result<S>(
      {1}, {total * inv}, {&logits},
      [ln, rows, v, inv, ignore_index, probs = std::move(probs), tcopy = std::move(tcopy)](NodeT<S>& self) {
        auto g = grad_of<S>(ln);
        const S up = self.grad[0] * inv;
        for (std::size_t r = 0; r < rows; ++r) {
          if (tcopy[r] == ignore_index) continue;
          for (std::size_t k = 0; k < v; ++k) g[r * v + k] += up * probs[r * v + k];
          g[r * v + static_cast<std::size_t>(tcopy[r])] -= up;
        }
      });
}

// ---- explicit instantiation ------------------------------------------------

#define CAPFORGE_INSTANTIATE_OPS(S)                                                        \
  template BasicTensor<S> matmul(const BasicTensor<S>&, const BasicTensor<S>&);            \
  template BasicTensor<S> matmul_transposed(const BasicTensor<S>&, const BasicTensor<S>&); \
  template BasicTensor<S> transpose(const BasicTensor<S>&);                                \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);               \
  template BasicTensor<S> sub(const BasicTensor<S>&, const BasicTensor<S>&);               \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);               \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                 \
  template BasicTensor<S> add_bias(const BasicTensor<S>&, const BasicTensor<S>&);          \
  template BasicTensor<S> linear(const BasicTensor<S>&, const BasicTensor<S>&,             \
                                 const BasicTensor<S>&);                                   \
  template BasicTensor<S> activation(const BasicTensor<S>&, Activation);                   \
  template BasicTensor<S> softmax(const BasicTensor<S>&, int);                             \
  template BasicTensor<S> log_softmax(const BasicTensor<S>&);                              \
  template BasicTensor<S> layer_norm(const BasicTensor<S>&, const BasicTensor<S>&,         \
                                     const BasicTensor<S>&, double);                       \
  template BasicTensor<S> conv2d(const BasicTensor<S>&, const BasicTensor<S>&,             \
                                 std::size_t);                                             \
  template BasicTensor<S> avg_pool2d(const BasicTensor<S>&);                               \
  template BasicTensor<S> batch_norm(const BasicTensor<S>&, const BasicTensor<S>&,         \
                                     const BasicTensor<S>&, BatchNormStats<S>&, bool,      \
                                     double, double);                                      \
  template BasicTensor<S> dropout(const BasicTensor<S>&, double, bool, Rng&);              \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                      \
  template BasicTensor<S> mean(const BasicTensor<S>&);                                     \
  template BasicTensor<S> mean_axis(const BasicTensor<S>&, int);                           \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                           \
  template BasicTensor<S> slice_cols(const BasicTensor<S>&, std::size_t, std::size_t);     \
  template BasicTensor<S> concat_cols(const std::vector<BasicTensor<S>>&);                 \
  template BasicTensor<S> slice_rows(const BasicTensor<S>&, std::size_t, std::size_t);     \
  template BasicTensor<S> embedding(const BasicTensor<S>&, std::span<const std::int32_t>); \
  template BasicTensor<S> cross_entropy(const BasicTensor<S>&,                             \
                                        std::span<const std::int32_t>, std::int32_t);

CAPFORGE_INSTANTIATE_OPS(float)
CAPFORGE_INSTANTIATE_OPS(double)

#undef CAPFORGE_INSTANTIATE_OPS

}  // namespace capforge
