// Copyright 2026 The tractflow Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tractflow/common.hpp"
#include "tractflow/linalg.hpp"
#include "tractflow/tensor.hpp"

namespace tractflow {

// ------------------------------------------------------------ mm kernels
//
// Accumulating matrix products. Each output row is written by one thread
// only, so the result does not depend on the thread count.

template <typename T>
inline void mm_nn_acc(T* c, const T* a, const T* b, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1 && static_cast<int64_t>(m) * k * n > 16384)
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
inline void mm_nt_acc(T* c, const T* a, const T* b, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1 && static_cast<int64_t>(m) * k * n > 16384)
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
template <typename T>
inline void mm_tn_acc(T* c, const T* a, const T* b, int m, int k, int n) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1 && static_cast<int64_t>(m) * k * n > 16384)
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = a[static_cast<size_t>(p) * m + i];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ------------------------------------------------------------ graph

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on demand; leaves accumulate across backwards
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  std::function<void(Node<T>&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
  }
};

/// Handle to a graph node. Copies share the node.
template <typename T>
struct Var {
  NodePtr<T> n;

  Var() = default;
  explicit Var(NodePtr<T> node) : n(std::move(node)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(v);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const { return n != nullptr; }
  Tensor<T>& value() { return n->value; }
  const Tensor<T>& value() const { return n->value; }
  Tensor<T>& grad() {
    n->ensure_grad();
    return n->grad;
  }
  const std::vector<int>& shape() const { return n->value.shape; }
  int64_t numel() const { return n->value.numel(); }

  void zero_grad() {
    if (n->grad.shape == n->value.shape) n->grad.fill(T(0));
  }
};

template <typename T, typename... Parents>
NodePtr<T> make_node(const char* op, Tensor<T> value, Parents... parents) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->value = std::move(value);
  (node->parents.push_back(parents), ...);
  for (const auto& p : node->parents)
    if (p->requires_grad) node->requires_grad = true;
  return node;
}

// Accumulate t into p's grad if p wants one.
template <typename T, typename F>
inline void acc_grad(const NodePtr<T>& p, F&& fill) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  fill(p->grad);
}

/// Reverse-mode sweep from a scalar root.
template <typename T>
inline void backward(const Var<T>& root) {
  if (root.n->value.numel() != 1)
    throw ShapeError("backward: root must be scalar, got " +
                     shape_str(root.n->value.shape));
  if (!root.n->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  struct Frame {
    Node<T>* node;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.n.get(), 0});
  visited.insert(root.n.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Fresh zero grads for interior nodes; leaves keep accumulating.
  for (Node<T>* nd : order)
    if (nd->backward_fn) nd->grad = Tensor<T>(nd->value.shape);
    else nd->ensure_grad();

  root.n->grad.data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ------------------------------------------------------------ elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto node = make_node("add", std::move(out), a.n, b.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  auto node = make_node("sub", std::move(out), a.n, b.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= nd.grad[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto node = make_node("mul", std::move(out), a.n, b.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& av = nd.parents[0]->value;
    const Tensor<T>& bv = nd.parents[1]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * bv[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * av[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = -v;
  auto node = make_node("neg", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= nd.grad[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> add_const(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += static_cast<T>(c);
  auto node = make_node("add_const", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> mul_const(const Var<T>& a, double c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= static_cast<T>(c);
  auto node = make_node("mul_const", std::move(out), a.n);
  node->backward_fn = [c](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] += nd.grad[i] * static_cast<T>(c);
    });
  };
  return Var<T>(node);
}

// y = x * s with s a one-element Var broadcast over x.
template <typename T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must have one element");
  T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.data) v *= sv;
  auto node = make_node("scale_by", std::move(out), x.n, s.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    T sv2 = nd.parents[1]->value[0];
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * sv2;
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      T acc = 0;
      for (int64_t i = 0; i < xv.numel(); ++i) acc += nd.grad[i] * xv[i];
      g[0] += acc;
    });
  };
  return Var<T>(node);
}

// y = x + s with s a one-element Var broadcast over x.
template <typename T>
Var<T> add_scalar_v(const Var<T>& x, const Var<T>& s) {
  if (s.numel() != 1)
    throw ShapeError("add_scalar_v: addend must have one element");
  T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.data) v += sv;
  auto node = make_node("add_scalar_v", std::move(out), x.n, s.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      T acc = 0;
      for (int64_t i = 0; i < nd.grad.numel(); ++i) acc += nd.grad[i];
      g[0] += acc;
    });
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ activations

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  auto node = make_node("relu", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        if (xv[i] > T(0)) g[i] += nd.grad[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, double slope = 0.2) {
  Tensor<T> out = a.value();
  for (auto& v : out.data)
    if (v < T(0)) v *= static_cast<T>(slope);
  auto node = make_node("leaky_relu", std::move(out), a.n);
  node->backward_fn = [slope](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] += nd.grad[i] * (xv[i] > T(0) ? T(1) : static_cast<T>(slope));
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  auto node = make_node("sigmoid", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& y = nd.value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] += nd.grad[i] * y[i] * (T(1) - y[i]);
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  auto node = make_node("tanh", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& y = nd.value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] += nd.grad[i] * (T(1) - y[i] * y[i]);
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::exp(v);
  auto node = make_node("exp", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& y = nd.value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * y[i];
    });
  };
  return Var<T>(node);
}

/// log|x| elementwise; gradient 1/x.
template <typename T>
Var<T> log_abs(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = std::log(std::fabs(static_cast<double>(v)));
  auto node = make_node("log_abs", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] / xv[i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> reciprocal(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = T(1) / v;
  auto node = make_node("reciprocal", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    const Tensor<T>& y = nd.value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] -= nd.grad[i] * y[i] * y[i];
    });
  };
  return Var<T>(node);
}

/// Hard clamp; subgradient 1 inside [lo, hi], 0 outside.
template <typename T>
Var<T> clamp(const Var<T>& a, double lo, double hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.data)
    v = v < static_cast<T>(lo) ? static_cast<T>(lo)
                               : (v > static_cast<T>(hi) ? static_cast<T>(hi) : v);
  auto node = make_node("clamp", std::move(out), a.n);
  node->backward_fn = [lo, hi](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i)
        if (xv[i] >= static_cast<T>(lo) && xv[i] <= static_cast<T>(hi))
          g[i] += nd.grad[i];
    });
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ bias/scale

// x:[B,F] + b:[F]
template <typename T>
Var<T> add_feature(const Var<T>& x, const Var<T>& b) {
  if (x.shape().size() != 2 || b.shape().size() != 1 ||
      x.shape()[1] != b.shape()[0])
    throw ShapeError("add_feature: " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  int B = x.shape()[0], F = x.shape()[1];
  Tensor<T> out = x.value();
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < F; ++j) out[static_cast<int64_t>(i) * F + j] += b.value()[j];
  auto node = make_node("add_feature", std::move(out), x.n, b.n);
  node->backward_fn = [B, F](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < F; ++j) g[j] += nd.grad[static_cast<int64_t>(i) * F + j];
    });
  };
  return Var<T>(node);
}

// x:[B,F] * s:[F]
template <typename T>
Var<T> scale_feature(const Var<T>& x, const Var<T>& s) {
  if (x.shape().size() != 2 || s.shape().size() != 1 ||
      x.shape()[1] != s.shape()[0])
    throw ShapeError("scale_feature: " + shape_str(x.shape()) + " vs " +
                     shape_str(s.shape()));
  int B = x.shape()[0], F = x.shape()[1];
  Tensor<T> out = x.value();
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < F; ++j) out[static_cast<int64_t>(i) * F + j] *= s.value()[j];
  auto node = make_node("scale_feature", std::move(out), x.n, s.n);
  node->backward_fn = [B, F](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const Tensor<T>& sv = nd.parents[1]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < F; ++j)
          g[static_cast<int64_t>(i) * F + j] +=
              nd.grad[static_cast<int64_t>(i) * F + j] * sv[j];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < F; ++j)
          g[j] += nd.grad[static_cast<int64_t>(i) * F + j] *
                  xv[static_cast<int64_t>(i) * F + j];
    });
  };
  return Var<T>(node);
}

// x:[B,C,H,W] + b:[C]
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& b) {
  if (x.shape().size() != 4 || b.shape().size() != 1 ||
      x.shape()[1] != b.shape()[0])
    throw ShapeError("add_channel: " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  int B = x.shape()[0], C = x.shape()[1];
  int64_t hw = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
  Tensor<T> out = x.value();
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      T bv = b.value()[c];
      T* p = out.ptr() + (static_cast<int64_t>(i) * C + c) * hw;
      for (int64_t k = 0; k < hw; ++k) p[k] += bv;
    }
  auto node = make_node("add_channel", std::move(out), x.n, b.n);
  node->backward_fn = [B, C, hw](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
          const T* p = nd.grad.ptr() + (static_cast<int64_t>(i) * C + c) * hw;
          T acc = 0;
          for (int64_t k = 0; k < hw; ++k) acc += p[k];
          g[c] += acc;
        }
    });
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ matmul

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<T> out({M, N});
  mm_nn_acc(out.ptr(), a.value().ptr(), b.value().ptr(), M, K, N);
  auto node = make_node("matmul", std::move(out), a.n, b.n);
  node->backward_fn = [M, K, N](Node<T>& nd) {
    const Tensor<T>& av = nd.parents[0]->value;
    const Tensor<T>& bv = nd.parents[1]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      mm_nt_acc(g.ptr(), nd.grad.ptr(), bv.ptr(), M, N, K);
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      mm_tn_acc(g.ptr(), av.ptr(), nd.grad.ptr(), K, M, N);
    });
  };
  return Var<T>(node);
}

// a:[M,K] * b:[N,K]^T -> [M,N]
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int M = a.shape()[0], K = a.shape()[1], N = b.shape()[0];
  Tensor<T> out({M, N});
  mm_nt_acc(out.ptr(), a.value().ptr(), b.value().ptr(), M, K, N);
  auto node = make_node("matmul_nt", std::move(out), a.n, b.n);
  node->backward_fn = [M, K, N](Node<T>& nd) {
    const Tensor<T>& av = nd.parents[0]->value;
    const Tensor<T>& bv = nd.parents[1]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      mm_nn_acc(g.ptr(), nd.grad.ptr(), bv.ptr(), M, N, K);
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      mm_tn_acc(g.ptr(), nd.grad.ptr(), av.ptr(), N, M, K);
    });
  };
  return Var<T>(node);
}

// batched matmul a:[B,M,K] * b:[B,K,N] -> [B,M,N]
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1])
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[2];
  Tensor<T> out({B, M, N});
  for (int i = 0; i < B; ++i)
    mm_nn_acc(out.ptr() + static_cast<int64_t>(i) * M * N,
              a.value().ptr() + static_cast<int64_t>(i) * M * K,
              b.value().ptr() + static_cast<int64_t>(i) * K * N, M, K, N);
  auto node = make_node("bmm", std::move(out), a.n, b.n);
  node->backward_fn = [B, M, K, N](Node<T>& nd) {
    const Tensor<T>& av = nd.parents[0]->value;
    const Tensor<T>& bv = nd.parents[1]->value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        mm_nt_acc(g.ptr() + static_cast<int64_t>(i) * M * K,
                  nd.grad.ptr() + static_cast<int64_t>(i) * M * N,
                  bv.ptr() + static_cast<int64_t>(i) * K * N, M, N, K);
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int i = 0; i < B; ++i)
        mm_tn_acc(g.ptr() + static_cast<int64_t>(i) * K * N,
                  av.ptr() + static_cast<int64_t>(i) * M * K,
                  nd.grad.ptr() + static_cast<int64_t>(i) * M * N, K, M, N);
    });
  };
  return Var<T>(node);
}

// [B,M,N] -> [B,N,M]
template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  if (a.shape().size() != 3)
    throw ShapeError("transpose_last2 expects rank 3, got " +
                     shape_str(a.shape()));
  int B = a.shape()[0], M = a.shape()[1], N = a.shape()[2];
  Tensor<T> out({B, N, M});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j)
        out[(static_cast<int64_t>(b) * N + j) * M + i] =
            a.value()[(static_cast<int64_t>(b) * M + i) * N + j];
  auto node = make_node("transpose_last2", std::move(out), a.n);
  node->backward_fn = [B, M, N](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j)
            g[(static_cast<int64_t>(b) * M + i) * N + j] +=
                nd.grad[(static_cast<int64_t>(b) * N + j) * M + i];
    });
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ conv2d

struct ConvGeom {
  int C, H, W, kh, kw, stride, pad, Ho, Wo;
};

inline ConvGeom conv_geom(int C, int H, int W, int kh, int kw, int stride,
                          int pad) {
  ConvGeom g{C, H, W, kh, kw, stride, pad, 0, 0};
  g.Ho = (H + 2 * pad - kh) / stride + 1;
  g.Wo = (W + 2 * pad - kw) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0)
    throw ShapeError("conv: kernel larger than padded input");
  return g;
}

// image [C,H,W] -> col [C*kh*kw, Ho*Wo]
template <typename T>
inline void im2col(const ConvGeom& g, const T* img, T* col) {
  int rows = g.C * g.kh * g.kw;
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1 && rows * g.Ho * g.Wo > 16384)
  for (int r = 0; r < rows; ++r) {
    int c = r / (g.kh * g.kw);
    int ki = (r / g.kw) % g.kh;
    int kj = r % g.kw;
    T* dst = col + static_cast<int64_t>(r) * g.Ho * g.Wo;
    const T* src = img + static_cast<int64_t>(c) * g.H * g.W;
    for (int oh = 0; oh < g.Ho; ++oh) {
      int ih = oh * g.stride - g.pad + ki;
      for (int ow = 0; ow < g.Wo; ++ow) {
        int iw = ow * g.stride - g.pad + kj;
        dst[oh * g.Wo + ow] =
            (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                ? src[static_cast<int64_t>(ih) * g.W + iw]
                : T(0);
      }
    }
  }
}

// adjoint of im2col: col [C*kh*kw, Ho*Wo] scatter-added into image [C,H,W]
template <typename T>
inline void col2im_acc(const ConvGeom& g, const T* col, T* img) {
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1 && g.C > 1 && g.C * g.H * g.W > 16384)
  for (int c = 0; c < g.C; ++c) {
    T* dst = img + static_cast<int64_t>(c) * g.H * g.W;
    for (int ki = 0; ki < g.kh; ++ki)
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* src =
            col + (static_cast<int64_t>(c) * g.kh * g.kw + ki * g.kw + kj) *
                      g.Ho * g.Wo;
        for (int oh = 0; oh < g.Ho; ++oh) {
          int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.H) continue;
          for (int ow = 0; ow < g.Wo; ++ow) {
            int iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.W)
              dst[static_cast<int64_t>(ih) * g.W + iw] += src[oh * g.Wo + ow];
          }
        }
      }
  }
}

/// conv2d: x [B,Cin,H,W], w [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]. Bias is a
/// separate add_channel op.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[1])
    throw ShapeError("conv2d: " + shape_str(x.shape()) + " with kernel " +
                     shape_str(w.shape()));
  int B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  ConvGeom g = conv_geom(Cin, H, W, kh, kw, stride, pad);
  int ckk = Cin * kh * kw, hw = g.Ho * g.Wo;
  Tensor<T> out({B, Cout, g.Ho, g.Wo});
  std::vector<T> col(static_cast<size_t>(ckk) * hw);
  for (int b = 0; b < B; ++b) {
    im2col(g, x.value().ptr() + static_cast<int64_t>(b) * Cin * H * W, col.data());
    mm_nn_acc(out.ptr() + static_cast<int64_t>(b) * Cout * hw, w.value().ptr(),
              col.data(), Cout, ckk, hw);
  }
  auto node = make_node("conv2d", std::move(out), x.n, w.n);
  node->backward_fn = [B, Cin, H, W, Cout, ckk, hw, g](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const Tensor<T>& wv = nd.parents[1]->value;
    std::vector<T> col(static_cast<size_t>(ckk) * hw);
    bool need_dx = nd.parents[0]->requires_grad;
    bool need_dw = nd.parents[1]->requires_grad;
    if (need_dx) nd.parents[0]->ensure_grad();
    if (need_dw) nd.parents[1]->ensure_grad();
    std::vector<T> dcol(need_dx ? static_cast<size_t>(ckk) * hw : 0);
    for (int b = 0; b < B; ++b) {
      const T* dy = nd.grad.ptr() + static_cast<int64_t>(b) * Cout * hw;
      if (need_dw) {
        im2col(g, xv.ptr() + static_cast<int64_t>(b) * Cin * H * W, col.data());
        mm_nt_acc(nd.parents[1]->grad.ptr(), dy, col.data(), Cout, hw, ckk);
      }
      if (need_dx) {
        std::fill(dcol.begin(), dcol.end(), T(0));
        mm_tn_acc(dcol.data(), wv.ptr(), dy, ckk, Cout, hw);
        col2im_acc(g, dcol.data(),
                   nd.parents[0]->grad.ptr() + static_cast<int64_t>(b) * Cin * H * W);
      }
    }
  };
  return Var<T>(node);
}

/// conv_transpose2d: x [B,Cin,Hi,Wi], w [Cin,Cout,kh,kw] ->
/// [B,Cout,Ho,Wo] with Ho = (Hi-1)*stride - 2*pad + kh + out_pad_h.
/// Separate output paddings let odd and even spatial sizes invert exactly.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, int stride, int pad,
                        int out_pad_h = 0, int out_pad_w = -1) {
  if (out_pad_w < 0) out_pad_w = out_pad_h;
  if (x.shape().size() != 4 || w.shape().size() != 4 ||
      x.shape()[1] != w.shape()[0])
    throw ShapeError("conv_transpose2d: " + shape_str(x.shape()) +
                     " with kernel " + shape_str(w.shape()));
  if (out_pad_h < 0 || out_pad_h >= stride || out_pad_w >= stride)
    throw ShapeError("conv_transpose2d: out_pad must be in [0, stride)");
  int B = x.shape()[0], Cin = x.shape()[1], Hi = x.shape()[2], Wi = x.shape()[3];
  int Cout = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  int Ho = (Hi - 1) * stride - 2 * pad + kh + out_pad_h;
  int Wo = (Wi - 1) * stride - 2 * pad + kw + out_pad_w;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: empty output");
  // geometry of the adjoint convolution over the output image
  ConvGeom g = conv_geom(Cout, Ho, Wo, kh, kw, stride, pad);
  if (g.Ho != Hi || g.Wo != Wi)
    throw ShapeError("conv_transpose2d: inconsistent geometry");
  int ckk = Cout * kh * kw, hwi = Hi * Wi;
  Tensor<T> out({B, Cout, Ho, Wo});
  std::vector<T> ycol(static_cast<size_t>(ckk) * hwi);
  for (int b = 0; b < B; ++b) {
    std::fill(ycol.begin(), ycol.end(), T(0));
    // w viewed as [Cin, Cout*kh*kw]
    mm_tn_acc(ycol.data(), w.value().ptr(),
              x.value().ptr() + static_cast<int64_t>(b) * Cin * hwi, ckk, Cin, hwi);
    col2im_acc(g, ycol.data(), out.ptr() + static_cast<int64_t>(b) * Cout * Ho * Wo);
  }
  auto node = make_node("conv_transpose2d", std::move(out), x.n, w.n);
  node->backward_fn = [B, Cin, Cout, Ho, Wo, ckk, hwi, g](Node<T>& nd) {
    const Tensor<T>& xv = nd.parents[0]->value;
    const Tensor<T>& wv = nd.parents[1]->value;
    bool need_dx = nd.parents[0]->requires_grad;
    bool need_dw = nd.parents[1]->requires_grad;
    if (need_dx) nd.parents[0]->ensure_grad();
    if (need_dw) nd.parents[1]->ensure_grad();
    std::vector<T> dycol(static_cast<size_t>(ckk) * hwi);
    for (int b = 0; b < B; ++b) {
      im2col(g, nd.grad.ptr() + static_cast<int64_t>(b) * Cout * Ho * Wo,
             dycol.data());
      if (need_dx)
        mm_nn_acc(nd.parents[0]->grad.ptr() + static_cast<int64_t>(b) * Cin * hwi,
                  wv.ptr(), dycol.data(), Cin, ckk, hwi);
      if (need_dw)
        mm_nt_acc(nd.parents[1]->grad.ptr(),
                  xv.ptr() + static_cast<int64_t>(b) * Cin * hwi, dycol.data(),
                  Cin, hwi, ckk);
    }
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  if (Tensor<T>::numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  auto node = make_node("reshape", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
  };
  return Var<T>(node);
}

namespace detail {
inline void axis_spans(const std::vector<int>& shape, int axis, int64_t& outer,
                       int64_t& dim, int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw ShapeError("axis out of range for " + shape_str(shape));
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  dim = shape[static_cast<size_t>(axis)];
  inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= shape[i];
}
}  // namespace detail

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int start, int len) {
  int64_t outer, dim, inner;
  detail::axis_spans(a.shape(), axis, outer, dim, inner);
  if (start < 0 || len <= 0 || start + len > dim)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of axis size " +
                     std::to_string(dim));
  std::vector<int> oshape = a.shape();
  oshape[static_cast<size_t>(axis)] = len;
  Tensor<T> out(oshape);
  const T* src = a.value().ptr();
  T* dst = out.ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t d = 0; d < len; ++d)
      std::copy_n(src + (o * dim + start + d) * inner, inner,
                  dst + (o * len + d) * inner);
  auto node = make_node("slice", std::move(out), a.n);
  node->backward_fn = [outer, dim, inner, start, len](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t d = 0; d < len; ++d) {
          const T* gs = nd.grad.ptr() + (o * len + d) * inner;
          T* gd = g.ptr() + (o * dim + start + d) * inner;
          for (int64_t i = 0; i < inner; ++i) gd[i] += gs[i];
        }
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  std::vector<int> oshape = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    if (static_cast<int>(x.shape().size()) != static_cast<int>(oshape.size()))
      throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < oshape.size(); ++i)
      if (static_cast<int>(i) != axis && x.shape()[i] != oshape[i])
        throw ShapeError("concat: shape mismatch " + shape_str(x.shape()) +
                         " vs " + shape_str(oshape));
    total += x.shape()[static_cast<size_t>(axis)];
  }
  oshape[static_cast<size_t>(axis)] = static_cast<int>(total);
  int64_t outer, dim, inner;
  detail::axis_spans(oshape, axis, outer, dim, inner);
  Tensor<T> out(oshape);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    int64_t d = x.shape()[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x.value().ptr() + o * d * inner, d * inner,
                  out.ptr() + (o * dim + off) * inner);
    off += d;
  }
  std::vector<int64_t> lens;
  for (const auto& x : xs) lens.push_back(x.shape()[static_cast<size_t>(axis)]);
  auto node = std::make_shared<Node<T>>();
  node->op = "concat";
  node->value = std::move(out);
  for (const auto& x : xs) node->parents.push_back(x.n);
  for (const auto& p : node->parents)
    if (p->requires_grad) node->requires_grad = true;
  node->backward_fn = [outer, dim, inner, offsets, lens](Node<T>& nd) {
    for (size_t pi = 0; pi < nd.parents.size(); ++pi) {
      auto& p = nd.parents[pi];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      int64_t dlen = lens[pi];
      for (int64_t o = 0; o < outer; ++o) {
        const T* gs = nd.grad.ptr() + (o * dim + offsets[pi]) * inner;
        T* gd = p->grad.ptr() + o * dlen * inner;
        for (int64_t i = 0; i < dlen * inner; ++i) gd[i] += gs[i];
      }
    }
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = 0;
  for (const auto& v : a.value().data) s += v;
  Tensor<T> out({1});
  out[0] = s;
  auto node = make_node("sum_all", std::move(out), a.n);
  node->backward_fn = [](Node<T>& nd) {
    T g0 = nd.grad[0];
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += g0;
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  int64_t n = a.numel();
  T s = 0;
  for (const auto& v : a.value().data) s += v;
  Tensor<T> out({1});
  out[0] = s / static_cast<T>(n);
  auto node = make_node("mean_all", std::move(out), a.n);
  node->backward_fn = [n](Node<T>& nd) {
    T g0 = nd.grad[0] / static_cast<T>(n);
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += g0;
    });
  };
  return Var<T>(node);
}

/// Sum over one axis (the axis is removed from the shape).
template <typename T>
Var<T> sum_axis(const Var<T>& a, int axis) {
  int64_t outer, dim, inner;
  detail::axis_spans(a.shape(), axis, outer, dim, inner);
  std::vector<int> oshape;
  for (size_t i = 0; i < a.shape().size(); ++i)
    if (static_cast<int>(i) != axis) oshape.push_back(a.shape()[i]);
  if (oshape.empty()) oshape.push_back(1);
  Tensor<T> out(oshape);
  const T* src = a.value().ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t d = 0; d < dim; ++d)
      for (int64_t i = 0; i < inner; ++i)
        out[o * inner + i] += src[(o * dim + d) * inner + i];
  auto node = make_node("sum_axis", std::move(out), a.n);
  node->backward_fn = [outer, dim, inner](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t d = 0; d < dim; ++d)
          for (int64_t i = 0; i < inner; ++i)
            g[(o * dim + d) * inner + i] += nd.grad[o * inner + i];
    });
  };
  return Var<T>(node);
}

template <typename T>
Var<T> softmax(const Var<T>& a, int axis) {
  int64_t outer, dim, inner;
  detail::axis_spans(a.shape(), axis, outer, dim, inner);
  Tensor<T> out = a.value();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      T mx = out[(o * dim) * inner + i];
      for (int64_t d = 1; d < dim; ++d)
        mx = std::max(mx, out[(o * dim + d) * inner + i]);
      T sum = 0;
      for (int64_t d = 0; d < dim; ++d) {
        T& v = out[(o * dim + d) * inner + i];
        v = std::exp(v - mx);
        sum += v;
      }
      for (int64_t d = 0; d < dim; ++d) out[(o * dim + d) * inner + i] /= sum;
    }
  auto node = make_node("softmax", std::move(out), a.n);
  node->backward_fn = [outer, dim, inner](Node<T>& nd) {
    const Tensor<T>& y = nd.value;
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          T dot = 0;
          for (int64_t d = 0; d < dim; ++d) {
            int64_t ix = (o * dim + d) * inner + i;
            dot += nd.grad[ix] * y[ix];
          }
          for (int64_t d = 0; d < dim; ++d) {
            int64_t ix = (o * dim + d) * inner + i;
            g[ix] += y[ix] * (nd.grad[ix] - dot);
          }
        }
    });
  };
  return Var<T>(node);
}

/// Mean squared error over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "mse");
  int64_t n = a.numel();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) {
    T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  Tensor<T> out({1});
  out[0] = s / static_cast<T>(n);
  auto node = make_node("mse", std::move(out), a.n, b.n);
  node->backward_fn = [n](Node<T>& nd) {
    const Tensor<T>& av = nd.parents[0]->value;
    const Tensor<T>& bv = nd.parents[1]->value;
    T g0 = nd.grad[0] * T(2) / static_cast<T>(n);
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < n; ++i) g[i] += g0 * (av[i] - bv[i]);
    });
    acc_grad(nd.parents[1], [&](Tensor<T>& g) {
      for (int64_t i = 0; i < n; ++i) g[i] -= g0 * (av[i] - bv[i]);
    });
  };
  return Var<T>(node);
}

// ------------------------------------------------------------ matrix ops

/// log|det W| for square W, with singularity guard.
template <typename T>
Var<T> logabsdet(const Var<T>& w, double min_abs_det = 1e-12) {
  if (w.shape().size() != 2 || w.shape()[0] != w.shape()[1])
    throw ShapeError("logabsdet: square matrix required, got " +
                     shape_str(w.shape()));
  int n = w.shape()[0];
  std::vector<double> m(w.value().data.begin(), w.value().data.end());
  double ld;
  if (!mat_logabsdet(m, n, ld) || ld < std::log(min_abs_det))
    throw NumericError("logabsdet: matrix is numerically singular");
  Tensor<T> out({1});
  out[0] = static_cast<T>(ld);
  auto node = make_node("logabsdet", std::move(out), w.n);
  node->backward_fn = [n, m](Node<T>& nd) {
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      std::vector<double> inv;
      if (!mat_inverse_d(m, n, inv))
        throw NumericError("logabsdet backward: singular matrix");
      T g0 = nd.grad[0];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          g[static_cast<int64_t>(i) * n + j] +=
              g0 * static_cast<T>(inv[static_cast<size_t>(j) * n + i]);
    });
  };
  return Var<T>(node);
}

/// W^{-1} for square W (LU-based), differentiable.
template <typename T>
Var<T> mat_inverse(const Var<T>& w) {
  if (w.shape().size() != 2 || w.shape()[0] != w.shape()[1])
    throw ShapeError("mat_inverse: square matrix required, got " +
                     shape_str(w.shape()));
  int n = w.shape()[0];
  std::vector<double> m(w.value().data.begin(), w.value().data.end());
  std::vector<double> inv;
  if (!mat_inverse_d(m, n, inv))
    throw NumericError("mat_inverse: matrix is numerically singular");
  Tensor<T> out({n, n});
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(inv[static_cast<size_t>(i)]);
  auto node = make_node("mat_inverse", std::move(out), w.n);
  node->backward_fn = [n](Node<T>& nd) {
    const Tensor<T>& y = nd.value;  // W^{-1}
    acc_grad(nd.parents[0], [&](Tensor<T>& g) {
      // dW = -Y^T dY Y^T
      std::vector<T> tmp(static_cast<size_t>(n) * n, T(0));
      mm_tn_acc(tmp.data(), y.ptr(), nd.grad.ptr(), n, n, n);
      std::vector<T> tmp2(static_cast<size_t>(n) * n, T(0));
      mm_nt_acc(tmp2.data(), tmp.data(), y.ptr(), n, n, n);
      for (int64_t i = 0; i < static_cast<int64_t>(n) * n; ++i)
        g[i] -= tmp2[static_cast<size_t>(i)];
    });
  };
  return Var<T>(node);
}

}  // namespace tractflow
