#pragma once

// Reverse-mode automatic differentiation over dense double tensors. Small
// tape of shared-ptr nodes; each op records a closure that scatters the
// output gradient into its parents. Single-threaded and deterministic:
// identical inputs produce bit-identical values and gradients.

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "lrt/common.hpp"
#include "lrt/geometry.hpp"

namespace lrt::ad {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;
  std::vector<Value> parents;
  std::function<void(Node&)> back;
  bool needs_grad = false;

  size_t count() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

inline size_t shape_count(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  return n;
}

inline Value make_node(std::vector<int> shape, bool needs_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val.assign(shape_count(n->shape), 0.0);
  n->needs_grad = needs_grad;
  return n;
}

inline Value constant(std::vector<int> shape, std::vector<double> data) {
  auto n = make_node(std::move(shape), false);
  check(n->count() == data.size(), "constant: data size mismatch");
  n->val = std::move(data);
  return n;
}

inline Value scalar_const(double v) { return constant({1}, {v}); }

/// A differentiable leaf (network parameter or input under test).
inline Value leaf(std::vector<int> shape, std::vector<double> data) {
  auto n = make_node(std::move(shape), true);
  check(n->count() == data.size(), "leaf: data size mismatch");
  n->val = std::move(data);
  n->ensure_grad();
  return n;
}

inline bool any_grad(std::initializer_list<const Value*> vs) {
  for (const Value* v : vs)
    if ((*v)->needs_grad) return true;
  return false;
}

/// Reverse pass from a scalar root; seeds d(root)/d(root) = 1.
inline void backward(const Value& root) {
  check(root->count() == 1, "backward: root must be scalar");
  // iterative post-order topo sort
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back) n->back(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  check(a->shape == b->shape, "add: shape mismatch");
  auto out = make_node(a->shape, any_grad({&a, &b}));
  for (size_t i = 0; i < out->count(); ++i) out->val[i] = a->val[i] + b->val[i];
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [](Node& n) {
      for (auto& p : n.parents) {
        if (!p->needs_grad) continue;
        for (size_t i = 0; i < n.count(); ++i) p->grad[i] += n.grad[i];
      }
    };
  }
  return out;
}

inline Value sub(const Value& a, const Value& b) {
  check(a->shape == b->shape, "sub: shape mismatch");
  auto out = make_node(a->shape, any_grad({&a, &b}));
  for (size_t i = 0; i < out->count(); ++i) out->val[i] = a->val[i] - b->val[i];
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [](Node& n) {
      Node* pa = n.parents[0].get();
      Node* pb = n.parents[1].get();
      for (size_t i = 0; i < n.count(); ++i) {
        if (pa->needs_grad) pa->grad[i] += n.grad[i];
        if (pb->needs_grad) pb->grad[i] -= n.grad[i];
      }
    };
  }
  return out;
}

inline Value mul(const Value& a, const Value& b) {
  check(a->shape == b->shape, "mul: shape mismatch");
  auto out = make_node(a->shape, any_grad({&a, &b}));
  for (size_t i = 0; i < out->count(); ++i) out->val[i] = a->val[i] * b->val[i];
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [](Node& n) {
      Node* pa = n.parents[0].get();
      Node* pb = n.parents[1].get();
      for (size_t i = 0; i < n.count(); ++i) {
        if (pa->needs_grad) pa->grad[i] += n.grad[i] * pb->val[i];
        if (pb->needs_grad) pb->grad[i] += n.grad[i] * pa->val[i];
      }
    };
  }
  return out;
}

/// k*a + c, elementwise with scalar constants.
inline Value affine_elem(const Value& a, double k, double c) {
  auto out = make_node(a->shape, a->needs_grad);
  for (size_t i = 0; i < out->count(); ++i) out->val[i] = k * a->val[i] + c;
  if (out->needs_grad) {
    out->parents = {a};
    out->back = [k](Node& n) {
      Node* p = n.parents[0].get();
      for (size_t i = 0; i < n.count(); ++i) p->grad[i] += k * n.grad[i];
    };
  }
  return out;
}

inline Value scale(const Value& a, double k) { return affine_elem(a, k, 0.0); }

template <typename F, typename DF>
inline Value unary_op(const Value& a, F f, DF df) {
  auto out = make_node(a->shape, a->needs_grad);
  for (size_t i = 0; i < out->count(); ++i) out->val[i] = f(a->val[i]);
  if (out->needs_grad) {
    out->parents = {a};
    out->back = [df](Node& n) {
      Node* p = n.parents[0].get();
      for (size_t i = 0; i < n.count(); ++i)
        p->grad[i] += n.grad[i] * df(p->val[i], n.val[i]);
    };
  }
  return out;
}

// df takes (x, y=f(x))
inline Value tanh_op(const Value& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}
inline Value exp_op(const Value& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}
inline Value leaky_relu(const Value& a, double slope = 0.2) {
  return unary_op(a, [slope](double x) { return x >= 0 ? x : slope * x; },
                  [slope](double x, double) { return x >= 0 ? 1.0 : slope; });
}
inline Value gelu(const Value& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;
  return unary_op(
      a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}
inline Value clamp01(const Value& a) {
  return unary_op(a, [](double x) { return std::clamp(x, 0.0, 1.0); },
                  [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and scalar arithmetic
// ---------------------------------------------------------------------------

inline Value sum(const Value& a) {
  auto out = make_node({1}, a->needs_grad);
  double s = 0.0;
  for (double v : a->val) s += v;
  out->val[0] = s;
  if (out->needs_grad) {
    out->parents = {a};
    out->back = [](Node& n) {
      Node* p = n.parents[0].get();
      for (size_t i = 0; i < p->count(); ++i) p->grad[i] += n.grad[0];
    };
  }
  return out;
}

inline Value mean(const Value& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a->count()));
}

inline Value dot(const Value& a, const Value& b) {
  check(a->count() == b->count(), "dot: size mismatch");
  auto out = make_node({1}, any_grad({&a, &b}));
  double s = 0.0;
  for (size_t i = 0; i < a->count(); ++i) s += a->val[i] * b->val[i];
  out->val[0] = s;
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [](Node& n) {
      Node* pa = n.parents[0].get();
      Node* pb = n.parents[1].get();
      for (size_t i = 0; i < pa->count(); ++i) {
        if (pa->needs_grad) pa->grad[i] += n.grad[0] * pb->val[i];
        if (pb->needs_grad) pb->grad[i] += n.grad[0] * pa->val[i];
      }
    };
  }
  return out;
}

/// sqrt of a nonnegative scalar; the subgradient at 0 is taken as 0 so a
/// perfectly matched l2 term does not blow up the tape.
inline Value sqrt_scalar(const Value& a) {
  check(a->count() == 1, "sqrt_scalar: scalar expected");
  auto out = make_node({1}, a->needs_grad);
  out->val[0] = std::sqrt(std::max(a->val[0], 0.0));
  if (out->needs_grad) {
    out->parents = {a};
    out->back = [](Node& n) {
      Node* p = n.parents[0].get();
      if (n.val[0] > 0.0) p->grad[0] += n.grad[0] * 0.5 / n.val[0];
    };
  }
  return out;
}

inline Value div_scalar(const Value& a, const Value& b) {
  check(a->count() == 1 && b->count() == 1, "div_scalar: scalars expected");
  auto out = make_node({1}, any_grad({&a, &b}));
  out->val[0] = a->val[0] / b->val[0];
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [](Node& n) {
      Node* pa = n.parents[0].get();
      Node* pb = n.parents[1].get();
      if (pa->needs_grad) pa->grad[0] += n.grad[0] / pb->val[0];
      if (pb->needs_grad)
        pb->grad[0] -= n.grad[0] * pa->val[0] / (pb->val[0] * pb->val[0]);
    };
  }
  return out;
}

inline Value smul(const Value& a, const Value& s) {
  check(s->count() == 1, "smul: scalar expected");
  auto out = make_node(a->shape, any_grad({&a, &s}));
  for (size_t i = 0; i < a->count(); ++i) out->val[i] = a->val[i] * s->val[0];
  if (out->needs_grad) {
    out->parents = {a, s};
    out->back = [](Node& n) {
      Node* pa = n.parents[0].get();
      Node* ps = n.parents[1].get();
      for (size_t i = 0; i < pa->count(); ++i) {
        if (pa->needs_grad) pa->grad[i] += n.grad[i] * ps->val[0];
        if (ps->needs_grad) ps->grad[0] += n.grad[i] * pa->val[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra (Eigen-backed)
// ---------------------------------------------------------------------------

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

/// C[m,n] = A[m,k] * B[k,n]
inline Value matmul(const Value& a, const Value& b) {
  check(a->shape.size() == 2 && b->shape.size() == 2, "matmul: rank-2 expected");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  check(b->shape[0] == k, "matmul: inner dim mismatch");
  auto out = make_node({m, n}, any_grad({&a, &b}));
  ECMap A(a->val.data(), m, k), B(b->val.data(), k, n);
  EMap C(out->val.data(), m, n);
  C.noalias() = A * B;
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [m, k, n](Node& node) {
      Node* pa = node.parents[0].get();
      Node* pb = node.parents[1].get();
      ECMap dC(node.grad.data(), m, n);
      ECMap A(pa->val.data(), m, k), B(pb->val.data(), k, n);
      if (pa->needs_grad) {
        EMap dA(pa->grad.data(), m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (pb->needs_grad) {
        EMap dB(pb->grad.data(), k, n);
        dB.noalias() += A.transpose() * dC;
      }
    };
  }
  return out;
}

/// C[m,n] = A[m,k] * B[n,k]^T  (attention scores: queries x keys)
inline Value matmul_nt(const Value& a, const Value& b) {
  check(a->shape.size() == 2 && b->shape.size() == 2,
        "matmul_nt: rank-2 expected");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  check(b->shape[1] == k, "matmul_nt: inner dim mismatch");
  auto out = make_node({m, n}, any_grad({&a, &b}));
  ECMap A(a->val.data(), m, k), B(b->val.data(), n, k);
  EMap C(out->val.data(), m, n);
  C.noalias() = A * B.transpose();
  if (out->needs_grad) {
    out->parents = {a, b};
    out->back = [m, k, n](Node& node) {
      Node* pa = node.parents[0].get();
      Node* pb = node.parents[1].get();
      ECMap dC(node.grad.data(), m, n);
      ECMap A(pa->val.data(), m, k), B(pb->val.data(), n, k);
      if (pa->needs_grad) {
        EMap dA(pa->grad.data(), m, k);
        dA.noalias() += dC * B;
      }
      if (pb->needs_grad) {
        EMap dB(pb->grad.data(), n, k);
        dB.noalias() += dC.transpose() * A;
      }
    };
  }
  return out;
}

/// X[m,n] + v[n] broadcast over rows.
inline Value add_rowvec(const Value& x, const Value& v) {
  check(x->shape.size() == 2 && v->shape.size() == 1 &&
            x->shape[1] == v->shape[0],
        "add_rowvec: shape mismatch");
  const int m = x->shape[0], n = x->shape[1];
  auto out = make_node(x->shape, any_grad({&x, &v}));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->val[i * n + j] = x->val[i * n + j] + v->val[j];
  if (out->needs_grad) {
    out->parents = {x, v};
    out->back = [m, n](Node& node) {
      Node* px = node.parents[0].get();
      Node* pv = node.parents[1].get();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          if (px->needs_grad) px->grad[i * n + j] += node.grad[i * n + j];
          if (pv->needs_grad) pv->grad[j] += node.grad[i * n + j];
        }
    };
  }
  return out;
}

inline Value linear(const Value& x, const Value& w, const Value& b) {
  return add_rowvec(matmul(x, w), b);
}

inline Value col_slice(const Value& x, int c0, int c1) {
  check(x->shape.size() == 2, "col_slice: rank-2 expected");
  const int m = x->shape[0], n = x->shape[1];
  check(0 <= c0 && c0 < c1 && c1 <= n, "col_slice: bad range");
  const int w = c1 - c0;
  auto out = make_node({m, w}, x->needs_grad);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out->val[i * w + j] = x->val[i * n + c0 + j];
  if (out->needs_grad) {
    out->parents = {x};
    out->back = [m, n, w, c0](Node& node) {
      Node* p = node.parents[0].get();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          p->grad[i * n + c0 + j] += node.grad[i * w + j];
    };
  }
  return out;
}

inline Value concat_cols(const std::vector<Value>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  const int m = parts[0]->shape[0];
  int n = 0;
  bool ng = false;
  for (const auto& p : parts) {
    check(p->shape.size() == 2 && p->shape[0] == m, "concat_cols: shape");
    n += p->shape[1];
    ng = ng || p->needs_grad;
  }
  auto out = make_node({m, n}, ng);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p->shape[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out->val[i * n + off + j] = p->val[i * w + j];
    off += w;
  }
  if (ng) {
    out->parents = parts;
    out->back = [m, n](Node& node) {
      int off = 0;
      for (auto& p : node.parents) {
        const int w = p->shape[1];
        if (p->needs_grad) {
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              p->grad[i * w + j] += node.grad[i * n + off + j];
        }
        off += w;
      }
    };
  }
  return out;
}

inline Value concat_vec(const std::vector<Value>& parts) {
  check(!parts.empty(), "concat_vec: empty");
  int n = 0;
  bool ng = false;
  for (const auto& p : parts) {
    check(p->shape.size() == 1, "concat_vec: rank-1 expected");
    n += p->shape[0];
    ng = ng || p->needs_grad;
  }
  auto out = make_node({n}, ng);
  int off = 0;
  for (const auto& p : parts) {
    std::copy(p->val.begin(), p->val.end(), out->val.begin() + off);
    off += p->shape[0];
  }
  if (ng) {
    out->parents = parts;
    out->back = [](Node& node) {
      int off = 0;
      for (auto& p : node.parents) {
        if (p->needs_grad)
          for (int j = 0; j < p->shape[0]; ++j)
            p->grad[j] += node.grad[off + j];
        off += p->shape[0];
      }
    };
  }
  return out;
}

/// Mean over rows: X[m,n] -> [n]. Global average pooling over tokens.
inline Value reduce_mean_rows(const Value& x) {
  check(x->shape.size() == 2, "reduce_mean_rows: rank-2 expected");
  const int m = x->shape[0], n = x->shape[1];
  auto out = make_node({n}, x->needs_grad);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->val[j] += x->val[i * n + j];
  for (int j = 0; j < n; ++j) out->val[j] /= m;
  if (out->needs_grad) {
    out->parents = {x};
    out->back = [m, n](Node& node) {
      Node* p = node.parents[0].get();
      const double inv = 1.0 / m;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          p->grad[i * n + j] += node.grad[j] * inv;
    };
  }
  return out;
}

inline Value softmax_rows(const Value& x) {
  check(x->shape.size() == 2, "softmax_rows: rank-2 expected");
  const int m = x->shape[0], n = x->shape[1];
  auto out = make_node(x->shape, x->needs_grad);
  for (int i = 0; i < m; ++i) {
    const double* row = x->val.data() + static_cast<size_t>(i) * n;
    double* orow = out->val.data() + static_cast<size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= z;
  }
  if (out->needs_grad) {
    out->parents = {x};
    out->back = [m, n](Node& node) {
      Node* p = node.parents[0].get();
      for (int i = 0; i < m; ++i) {
        const double* s = node.val.data() + static_cast<size_t>(i) * n;
        const double* dy = node.grad.data() + static_cast<size_t>(i) * n;
        double dotv = 0.0;
        for (int j = 0; j < n; ++j) dotv += s[j] * dy[j];
        double* dx = p->grad.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) dx[j] += s[j] * (dy[j] - dotv);
      }
    };
  }
  return out;
}

/// Per-row layer normalization with learned gain/bias.
inline Value layer_norm(const Value& x, const Value& gamma, const Value& beta,
                        double eps = 1e-5) {
  check(x->shape.size() == 2, "layer_norm: rank-2 expected");
  const int m = x->shape[0], n = x->shape[1];
  check(gamma->shape == std::vector<int>{n} && beta->shape == std::vector<int>{n},
        "layer_norm: param shape mismatch");
  auto out = make_node(x->shape, any_grad({&x, &gamma, &beta}));
  std::vector<double> mu(m), inv_sd(m);
  for (int i = 0; i < m; ++i) {
    const double* row = x->val.data() + static_cast<size_t>(i) * n;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += row[j];
    mu[i] = s / n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = row[j] - mu[i];
      var += d * d;
    }
    inv_sd[i] = 1.0 / std::sqrt(var / n + eps);
    double* orow = out->val.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j)
      orow[j] = (row[j] - mu[i]) * inv_sd[i] * gamma->val[j] + beta->val[j];
  }
  if (out->needs_grad) {
    out->parents = {x, gamma, beta};
    out->back = [m, n, mu, inv_sd](Node& node) {
      Node* px = node.parents[0].get();
      Node* pg = node.parents[1].get();
      Node* pb = node.parents[2].get();
      for (int i = 0; i < m; ++i) {
        const double* row = px->val.data() + static_cast<size_t>(i) * n;
        const double* dy = node.grad.data() + static_cast<size_t>(i) * n;
        // xhat along the row
        double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xhat = (row[j] - mu[i]) * inv_sd[i];
          const double dyg = dy[j] * pg->val[j];
          sum_dyg += dyg;
          sum_dyg_xhat += dyg * xhat;
          if (pg->needs_grad) pg->grad[j] += dy[j] * xhat;
          if (pb->needs_grad) pb->grad[j] += dy[j];
        }
        if (px->needs_grad) {
          double* dx = px->grad.data() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu[i]) * inv_sd[i];
            dx[j] += inv_sd[i] *
                     (dy[j] * pg->val[j] - (sum_dyg + xhat * sum_dyg_xhat) / n);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image ops: channel layout is planar [C, H, W]
// ---------------------------------------------------------------------------

/// [C,H,W] -> tokens [H*W, C]
inline Value chw_to_tokens(const Value& x) {
  check(x->shape.size() == 3, "chw_to_tokens: rank-3 expected");
  const int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  const int nt = h * w;
  auto out = make_node({nt, c}, x->needs_grad);
  for (int ch = 0; ch < c; ++ch)
    for (int t = 0; t < nt; ++t)
      out->val[static_cast<size_t>(t) * c + ch] =
          x->val[static_cast<size_t>(ch) * nt + t];
  if (out->needs_grad) {
    out->parents = {x};
    out->back = [c, nt](Node& node) {
      Node* p = node.parents[0].get();
      for (int ch = 0; ch < c; ++ch)
        for (int t = 0; t < nt; ++t)
          p->grad[static_cast<size_t>(ch) * nt + t] +=
              node.grad[static_cast<size_t>(t) * c + ch];
    };
  }
  return out;
}

/// Broadcast-multiply a [C,H,W] tensor by a single-channel [1,H,W] map.
inline Value mul_chan_bcast(const Value& x, const Value& m) {
  check(x->shape.size() == 3 && m->shape.size() == 3 && m->shape[0] == 1 &&
            x->shape[1] == m->shape[1] && x->shape[2] == m->shape[2],
        "mul_chan_bcast: shape mismatch");
  const int c = x->shape[0];
  const size_t plane = static_cast<size_t>(x->shape[1]) * x->shape[2];
  auto out = make_node(x->shape, any_grad({&x, &m}));
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < plane; ++i)
      out->val[ch * plane + i] = x->val[ch * plane + i] * m->val[i];
  if (out->needs_grad) {
    out->parents = {x, m};
    out->back = [c, plane](Node& node) {
      Node* px = node.parents[0].get();
      Node* pm = node.parents[1].get();
      for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < plane; ++i) {
          if (px->needs_grad)
            px->grad[ch * plane + i] += node.grad[ch * plane + i] * pm->val[i];
          if (pm->needs_grad)
            pm->grad[i] += node.grad[ch * plane + i] * px->val[ch * plane + i];
        }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d, im2col based
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col: [IC*kh*kw, OH*OW]
inline void im2col(const double* x, int ic, int h, int w, int kh, int kw,
                   int stride, int pad, int oh, int ow, double* col) {
  const size_t plane = static_cast<size_t>(h) * w;
  size_t r = 0;
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        double* dst = col + r * static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[c * plane + iy * w + ix]
                                    : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const double* col, int ic, int h, int w, int kh, int kw,
                       int stride, int pad, int oh, int ow, double* dx) {
  const size_t plane = static_cast<size_t>(h) * w;
  size_t r = 0;
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const double* src = col + r * static_cast<size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            dx[c * plane + iy * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x: [IC,H,W], w: [OC, IC*kh*kw], b: [OC] -> [OC,OH,OW]
inline Value conv2d(const Value& x, const Value& w, const Value& b, int ic,
                    int kh, int kw, int stride, int pad) {
  check(x->shape.size() == 3 && x->shape[0] == ic, "conv2d: input shape");
  const int h = x->shape[1], wd = x->shape[2];
  const int oc = w->shape[0];
  check(w->shape.size() == 2 && w->shape[1] == ic * kh * kw,
        "conv2d: weight shape");
  check(b->shape == std::vector<int>{oc}, "conv2d: bias shape");
  const int oh = detail::conv_out_size(h, kh, stride, pad);
  const int ow = detail::conv_out_size(wd, kw, stride, pad);
  check(oh > 0 && ow > 0, "conv2d: input smaller than kernel");

  const int ck = ic * kh * kw;
  const int on = oh * ow;
  std::vector<double> col(static_cast<size_t>(ck) * on);
  detail::im2col(x->val.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                 col.data());

  auto out = make_node({oc, oh, ow}, any_grad({&x, &w, &b}));
  {
    ECMap W(w->val.data(), oc, ck), Col(col.data(), ck, on);
    EMap O(out->val.data(), oc, on);
    O.noalias() = W * Col;
    for (int o = 0; o < oc; ++o)
      for (int i = 0; i < on; ++i) out->val[static_cast<size_t>(o) * on + i] += b->val[o];
  }
  if (out->needs_grad) {
    out->parents = {x, w, b};
    // keep the col matrix for the backward GEMMs
    auto col_keep = std::make_shared<std::vector<double>>(std::move(col));
    out->back = [=](Node& node) {
      Node* px = node.parents[0].get();
      Node* pw = node.parents[1].get();
      Node* pb = node.parents[2].get();
      ECMap dO(node.grad.data(), oc, on);
      if (pb->needs_grad) {
        for (int o = 0; o < oc; ++o) {
          double s = 0.0;
          for (int i = 0; i < on; ++i) s += node.grad[static_cast<size_t>(o) * on + i];
          pb->grad[o] += s;
        }
      }
      if (pw->needs_grad) {
        ECMap Col(col_keep->data(), ck, on);
        EMap dW(pw->grad.data(), oc, ck);
        dW.noalias() += dO * Col.transpose();
      }
      if (px->needs_grad) {
        ECMap W(pw->val.data(), oc, ck);
        std::vector<double> dcol(static_cast<size_t>(ck) * on);
        EMap dCol(dcol.data(), ck, on);
        dCol.noalias() = W.transpose() * dO;
        detail::col2im_acc(dcol.data(), ic, h, wd, kh, kw, stride, pad, oh, ow,
                           px->grad.data());
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling ops
// ---------------------------------------------------------------------------

/// Bilinear sampling of src [C,H,W] at grid [Hg,Wg,2] (normalized (y,x)).
/// Differentiable in both the source values and the grid coordinates.
inline Value grid_sample(const Value& src, const Value& grid,
                         Pad pad = Pad::Zero) {
  check(src->shape.size() == 3, "grid_sample: src must be [C,H,W]");
  check(grid->shape.size() == 3 && grid->shape[2] == 2,
        "grid_sample: grid must be [H,W,2]");
  const int c = src->shape[0], h = src->shape[1], w = src->shape[2];
  const int gh = grid->shape[0], gw = grid->shape[1];
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(gh) * gw;
  auto out = make_node({c, gh, gw}, any_grad({&src, &grid}));

  for (size_t g = 0; g < oplane; ++g) {
    const BilinearTaps t =
        bilinear_taps(grid->val[g * 2], grid->val[g * 2 + 1], h, w);
    for (int ch = 0; ch < c; ++ch)
      out->val[ch * oplane + g] =
          detail::sample_plane(pad, src->val.data() + ch * plane, h, w, 1, t);
  }
  if (out->needs_grad) {
    out->parents = {src, grid};
    out->back = [=](Node& node) {
      Node* ps = node.parents[0].get();
      Node* pg = node.parents[1].get();
      const bool want_src = ps->needs_grad;
      const bool want_grid = pg->needs_grad;
      for (size_t g = 0; g < oplane; ++g) {
        const double ny = pg->val[g * 2], nx = pg->val[g * 2 + 1];
        const BilinearTaps t = bilinear_taps(ny, nx, h, w);
        const int ys[2] = {t.y0, t.y0 + 1};
        const int xs[2] = {t.x0, t.x0 + 1};
        const double wy[2] = {1.0 - t.wy, t.wy};
        const double wx[2] = {1.0 - t.wx, t.wx};
        double dpy = 0.0, dpx = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double go = node.grad[ch * oplane + g];
          if (go == 0.0 && !want_grid) continue;
          double v[2][2];
          for (int a = 0; a < 2; ++a)
            for (int bq = 0; bq < 2; ++bq) {
              int yy = ys[a], xx = xs[bq];
              if (pad == Pad::Clamp) {
                yy = detail::tap_clamp(yy, h);
                xx = detail::tap_clamp(xx, w);
                v[a][bq] = ps->val[ch * plane + static_cast<size_t>(yy) * w + xx];
              } else {
                v[a][bq] = (detail::tap_in(yy, h) && detail::tap_in(xx, w))
                               ? ps->val[ch * plane + static_cast<size_t>(yy) * w + xx]
                               : 0.0;
              }
            }
          if (want_src && go != 0.0) {
            for (int a = 0; a < 2; ++a)
              for (int bq = 0; bq < 2; ++bq) {
                int yy = ys[a], xx = xs[bq];
                if (pad == Pad::Clamp) {
                  yy = detail::tap_clamp(yy, h);
                  xx = detail::tap_clamp(xx, w);
                } else if (!detail::tap_in(yy, h) || !detail::tap_in(xx, w)) {
                  continue;
                }
                ps->grad[ch * plane + static_cast<size_t>(yy) * w + xx] +=
                    go * wy[a] * wx[bq];
              }
          }
          if (want_grid) {
            // d/d(py): rows differ; d/d(px): cols differ
            dpy += go * (wx[0] * (v[1][0] - v[0][0]) + wx[1] * (v[1][1] - v[0][1]));
            dpx += go * (wy[0] * (v[0][1] - v[0][0]) + wy[1] * (v[1][1] - v[1][0]));
          }
        }
        if (want_grid) {
          // chain through px = ((nx+1)*W - 1)/2
          pg->grad[g * 2] += dpy * (0.5 * h);
          pg->grad[g * 2 + 1] += dpx * (0.5 * w);
        }
      }
    };
  }
  return out;
}

/// Bilinear resize as border-clamped sampling at the identity grid.
inline Value resize(const Value& src, int h, int w) {
  check(src->shape.size() == 3, "resize: [C,H,W] expected");
  if (src->shape[1] == h && src->shape[2] == w) return src;
  SamplingGrid id = identity_grid(h, w);
  auto grid = constant({h, w, 2}, std::move(id.coords));
  return grid_sample(src, grid, Pad::Clamp);
}

/// theta[6] = (a00,a01,a02,a10,a11,a12) applied to the identity grid of
/// (h, w); output [h,w,2] with (y,x) order.
inline Value affine_grid(const Value& theta, int h, int w) {
  check(theta->shape == std::vector<int>{6}, "affine_grid: theta must be [6]");
  if (h < 2 || w < 2)
    throw InvalidParamError("affine_grid: target size must be >= 2x2");
  auto out = make_node({h, w, 2}, theta->needs_grad);
  const double* a = theta->val.data();
  for (int i = 0; i < h; ++i) {
    const double y = pixel_center_norm(i, h);
    for (int j = 0; j < w; ++j) {
      const double x = pixel_center_norm(j, w);
      const size_t g = (static_cast<size_t>(i) * w + j) * 2;
      out->val[g] = a[0] * y + a[1] * x + a[2];
      out->val[g + 1] = a[3] * y + a[4] * x + a[5];
    }
  }
  if (out->needs_grad) {
    out->parents = {theta};
    out->back = [h, w](Node& node) {
      Node* p = node.parents[0].get();
      double d[6] = {0, 0, 0, 0, 0, 0};
      for (int i = 0; i < h; ++i) {
        const double y = pixel_center_norm(i, h);
        for (int j = 0; j < w; ++j) {
          const double x = pixel_center_norm(j, w);
          const size_t g = (static_cast<size_t>(i) * w + j) * 2;
          d[0] += node.grad[g] * y;
          d[1] += node.grad[g] * x;
          d[2] += node.grad[g];
          d[3] += node.grad[g + 1] * y;
          d[4] += node.grad[g + 1] * x;
          d[5] += node.grad[g + 1];
        }
      }
      for (int k = 0; k < 6; ++k) p->grad[k] += d[k];
    };
  }
  return out;
}

/// raw[5] -> theta[6] per the affine head parameterization
/// (r = pi*tanh(o1), s_x = exp(o2), s_y = exp(o3), t = (o4, o5)).
inline Value affine_theta_from_raw(const Value& raw) {
  check(raw->shape == std::vector<int>{5}, "affine_theta_from_raw: raw[5]");
  auto out = make_node({6}, raw->needs_grad);
  const double th = std::tanh(raw->val[0]);
  const double r = M_PI * th;
  const double sx = std::exp(raw->val[1]);
  const double sy = std::exp(raw->val[2]);
  const double c = std::cos(r), s = std::sin(r);
  out->val[0] = sx * c;
  out->val[1] = -sy * s;
  out->val[2] = raw->val[3];
  out->val[3] = sy * s;
  out->val[4] = sx * c;
  out->val[5] = raw->val[4];
  if (out->needs_grad) {
    out->parents = {raw};
    out->back = [th, sx, sy, c, s](Node& node) {
      Node* p = node.parents[0].get();
      const double dr = M_PI * (1.0 - th * th);  // dr/do1
      const double* g = node.grad.data();
      // A00 = A11 = sx*c; A01 = -sy*s; A10 = sy*s
      p->grad[0] += dr * (-sx * s * (g[0] + g[4]) - sy * c * g[1] + sy * c * g[3]);
      p->grad[1] += sx * c * (g[0] + g[4]);
      p->grad[2] += -sy * s * g[1] + sy * s * g[3];
      p->grad[3] += g[2];
      p->grad[4] += g[5];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conversions between the pure types and graph nodes
// ---------------------------------------------------------------------------

/// ImageBuffer (HWC interleaved) -> planar [C,H,W] constant or leaf.
inline Value image_to_node(const ImageBuffer& img, bool needs_grad = false) {
  std::vector<double> planar(img.size());
  const size_t plane = static_cast<size_t>(img.height) * img.width;
  for (int ch = 0; ch < img.channels; ++ch)
    for (size_t i = 0; i < plane; ++i)
      planar[ch * plane + i] = img.data[i * img.channels + ch];
  auto shape = std::vector<int>{img.channels, img.height, img.width};
  return needs_grad ? leaf(std::move(shape), std::move(planar))
                    : constant(std::move(shape), std::move(planar));
}

inline ImageBuffer node_to_image(const Value& v) {
  check(v->shape.size() == 3, "node_to_image: [C,H,W] expected");
  ImageBuffer img(v->shape[1], v->shape[2], v->shape[0]);
  const size_t plane = static_cast<size_t>(img.height) * img.width;
  for (int ch = 0; ch < img.channels; ++ch)
    for (size_t i = 0; i < plane; ++i)
      img.data[i * img.channels + ch] = v->val[ch * plane + i];
  return img;
}

inline Value mask_to_node(const SaliencyMask& m, bool needs_grad = false) {
  auto shape = std::vector<int>{1, m.height, m.width};
  return needs_grad ? leaf(std::move(shape), m.values)
                    : constant(std::move(shape), m.values);
}

inline SamplingGrid node_to_grid(const Value& v) {
  check(v->shape.size() == 3 && v->shape[2] == 2, "node_to_grid: [H,W,2]");
  SamplingGrid g(v->shape[0], v->shape[1]);
  g.coords = v->val;
  return g;
}

inline Value grid_to_node(const SamplingGrid& g, bool needs_grad = false) {
  auto shape = std::vector<int>{g.height, g.width, 2};
  return needs_grad ? leaf(std::move(shape), g.coords)
                    : constant(std::move(shape), g.coords);
}

}  // namespace lrt::ad
