#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "veloio/common.hpp"

// Dense-tensor compute kernel with reverse-mode differentiation.
//
// A Graph owns the tape: ops execute eagerly, record their inputs, and
// backward() replays the tape in reverse. Tensors are cheap handles into the
// graph. Everything is 64-bit; a graph instance is single-threaded, distinct
// graphs may run concurrently.

namespace veloio::ad {

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // same length as value, zeroed by zero_grad()

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
};

// Ordered, stable-address parameter store. Registration order defines the
// serialization and checksum order.
class ParamSet {
 public:
  Parameter& add(std::string name, std::vector<int> shape,
                 std::vector<double> init) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    if (static_cast<std::int64_t>(init.size()) != n)
      throw ShapeError("ParamSet::add: init size does not match shape " +
                       shape_str(shape));
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    params_.push_back(Parameter{std::move(name), std::move(shape),
                                std::move(init),
                                std::vector<double>(static_cast<std::size_t>(n), 0.0)});
    index_[params_.back().name] = &params_.back();
    return params_.back();
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return *it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t count() const { return params_.size(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, Parameter*> index_;
};

class Graph;

struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated by backward()
  bool requires_grad = false;
  Parameter* bound = nullptr;  // set for parameter leaves
  std::vector<Node*> parents;
  std::function<void(Node&)> back;  // pulls this->grad into parents' grads

  std::int64_t numel() const { return static_cast<std::int64_t>(val.size()); }
};

// Handle into a Graph. Valid only while the owning Graph is alive.
class Tensor {
 public:
  Tensor() = default;
  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  const std::vector<double>& values() const { return node_->val; }
  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw ContractError("Tensor: gradient not computed");
    return node_->grad;
  }
  double value() const {
    if (node_->val.size() != 1) throw ShapeError("Tensor::value: not a scalar");
    return node_->val[0];
  }
  bool requires_grad() const { return node_->requires_grad; }

 private:
  friend class Graph;
  explicit Tensor(Node* n) : node_(n) {}
  Node* node_ = nullptr;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // ---- leaves -----------------------------------------------------------

  Tensor constant(std::vector<int> shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), false));
  }
  Tensor constant_scalar(double v) { return constant({1}, {v}); }

  Tensor leaf(std::vector<int> shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), true));
  }

  Tensor param(Parameter& p) {
    Node* n = make_leaf(p.shape, p.value, true);
    n->bound = &p;
    n->back = [](Node& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        self.bound->grad[i] += self.grad[i];
    };
    return Tensor(n);
  }

  // ---- elementwise ------------------------------------------------------

  Tensor add(Tensor a, Tensor b) {
    require_same_shape("add", a, b);
    Node* n = make(a.node_->shape, {a.node_, b.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i)
      n->val[i] = a.node_->val[i] + b.node_->val[i];
    n->back = [](Node& self) {
      accumulate(self.parents[0], self.grad, 1.0);
      accumulate(self.parents[1], self.grad, 1.0);
    };
    return Tensor(n);
  }

  Tensor sub(Tensor a, Tensor b) {
    require_same_shape("sub", a, b);
    Node* n = make(a.node_->shape, {a.node_, b.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i)
      n->val[i] = a.node_->val[i] - b.node_->val[i];
    n->back = [](Node& self) {
      accumulate(self.parents[0], self.grad, 1.0);
      accumulate(self.parents[1], self.grad, -1.0);
    };
    return Tensor(n);
  }

  Tensor mul(Tensor a, Tensor b) {
    require_same_shape("mul", a, b);
    Node* n = make(a.node_->shape, {a.node_, b.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i)
      n->val[i] = a.node_->val[i] * b.node_->val[i];
    n->back = [](Node& self) {
      Node *a = self.parents[0], *b = self.parents[1];
      if (a->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          a->grad[i] += self.grad[i] * b->val[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          b->grad[i] += self.grad[i] * a->val[i];
    };
    return Tensor(n);
  }

  Tensor scale(Tensor a, double c) {
    Node* n = make(a.node_->shape, {a.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i) n->val[i] = c * a.node_->val[i];
    n->back = [c](Node& self) { accumulate(self.parents[0], self.grad, c); };
    return Tensor(n);
  }

  Tensor square(Tensor a) {
    Node* n = make(a.node_->shape, {a.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i)
      n->val[i] = a.node_->val[i] * a.node_->val[i];
    n->back = [](Node& self) {
      Node* a = self.parents[0];
      if (!a->requires_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a->grad[i] += 2.0 * a->val[i] * self.grad[i];
    };
    return Tensor(n);
  }

  Tensor exp(Tensor a) {
    Node* n = make(a.node_->shape, {a.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i) n->val[i] = std::exp(a.node_->val[i]);
    n->back = [](Node& self) {
      Node* a = self.parents[0];
      if (!a->requires_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a->grad[i] += self.val[i] * self.grad[i];
    };
    return Tensor(n);
  }

  Tensor log(Tensor a) {
    Node* n = make(a.node_->shape, {a.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i) {
      if (a.node_->val[i] <= 0.0)
        throw NumericError("log: non-positive input " + str(a.node_->val[i]));
      n->val[i] = std::log(a.node_->val[i]);
    }
    n->back = [](Node& self) {
      Node* a = self.parents[0];
      if (!a->requires_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        a->grad[i] += self.grad[i] / a->val[i];
    };
    return Tensor(n);
  }

  /// GELU, tanh approximation: 0.5 x (1 + tanh(c1 (x + c2 x^3))).
  Tensor gelu(Tensor a) {
    static constexpr double c1 = 0.7978845608;
    static constexpr double c2 = 0.044715;
    Node* n = make(a.node_->shape, {a.node_});
    for (std::int64_t i = 0; i < n->numel(); ++i) {
      const double x = a.node_->val[i];
      n->val[i] = 0.5 * x * (1.0 + std::tanh(c1 * (x + c2 * x * x * x)));
    }
    n->back = [](Node& self) {
      Node* a = self.parents[0];
      if (!a->requires_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = a->val[i];
        const double t = std::tanh(c1 * (x + c2 * x * x * x));
        const double d = 0.5 * (1.0 + t) +
                         0.5 * x * (1.0 - t * t) * c1 * (1.0 + 3.0 * c2 * x * x);
        a->grad[i] += d * self.grad[i];
      }
    };
    return Tensor(n);
  }

  // ---- scalar-broadcast -------------------------------------------------

  /// y = x * s where s is a scalar node (broadcast).
  Tensor mul_scalar(Tensor x, Tensor s) {
    require_scalar("mul_scalar", s);
    Node* n = make(x.node_->shape, {x.node_, s.node_});
    const double sv = s.node_->val[0];
    for (std::int64_t i = 0; i < n->numel(); ++i) n->val[i] = x.node_->val[i] * sv;
    n->back = [](Node& self) {
      Node *x = self.parents[0], *s = self.parents[1];
      const double sv = s->val[0];
      if (x->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          x->grad[i] += sv * self.grad[i];
      if (s->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          acc += x->val[i] * self.grad[i];
        s->grad[0] += acc;
      }
    };
    return Tensor(n);
  }

  /// y = x / s where s is a scalar node.
  Tensor div_scalar(Tensor x, Tensor s) {
    require_scalar("div_scalar", s);
    if (s.node_->val[0] == 0.0) throw NumericError("div_scalar: division by zero");
    Node* n = make(x.node_->shape, {x.node_, s.node_});
    const double sv = s.node_->val[0];
    for (std::int64_t i = 0; i < n->numel(); ++i) n->val[i] = x.node_->val[i] / sv;
    n->back = [](Node& self) {
      Node *x = self.parents[0], *s = self.parents[1];
      const double sv = s->val[0];
      if (x->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          x->grad[i] += self.grad[i] / sv;
      if (s->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          acc += -x->val[i] / (sv * sv) * self.grad[i];
        s->grad[0] += acc;
      }
    };
    return Tensor(n);
  }

  // ---- layers -----------------------------------------------------------

  /// y = x W + b. x is [in] or [rows, in]; W is [in, out]; b is [out].
  Tensor linear(Tensor x, Tensor w, Tensor b) {
    const auto& xs = x.node_->shape;
    const auto& ws = w.node_->shape;
    if (ws.size() != 2)
      throw ShapeError("linear: W must be rank 2, got " + shape_str(ws));
    const int in = ws[0], out = ws[1];
    const int rows = xs.size() == 1 ? 1 : xs[0];
    const int xin = xs.size() == 1 ? xs[0] : xs[1];
    if (xs.size() > 2 || xin != in)
      throw ShapeError("linear: x " + shape_str(xs) + " incompatible with W " +
                       shape_str(ws));
    if (b.node_->shape != std::vector<int>{out})
      throw ShapeError("linear: b " + shape_str(b.node_->shape) +
                       " incompatible with W " + shape_str(ws));

    std::vector<int> yshape = xs.size() == 1 ? std::vector<int>{out}
                                             : std::vector<int>{rows, out};
    Node* n = make(std::move(yshape), {x.node_, w.node_, b.node_});
    const double* xv = x.node_->val.data();
    const double* wv = w.node_->val.data();
    const double* bv = b.node_->val.data();
    double* yv = n->val.data();
    for (int r = 0; r < rows; ++r) {
      for (int o = 0; o < out; ++o) yv[r * out + o] = bv[o];
      for (int i = 0; i < in; ++i) {
        const double xi = xv[r * in + i];
        const double* wrow = wv + i * out;
        double* yrow = yv + r * out;
        for (int o = 0; o < out; ++o) yrow[o] += xi * wrow[o];
      }
    }
    n->back = [rows, in, out](Node& self) {
      Node *x = self.parents[0], *w = self.parents[1], *b = self.parents[2];
      const double* g = self.grad.data();
      if (x->requires_grad) {
        double* xg = x->grad.data();
        const double* wv = w->val.data();
        for (int r = 0; r < rows; ++r)
          for (int i = 0; i < in; ++i) {
            const double* wrow = wv + i * out;
            const double* grow = g + r * out;
            double acc = 0.0;
            for (int o = 0; o < out; ++o) acc += grow[o] * wrow[o];
            xg[r * in + i] += acc;
          }
      }
      if (w->requires_grad) {
        double* wg = w->grad.data();
        const double* xv = x->val.data();
        for (int r = 0; r < rows; ++r)
          for (int i = 0; i < in; ++i) {
            const double xi = xv[r * in + i];
            const double* grow = g + r * out;
            double* wrow = wg + i * out;
            for (int o = 0; o < out; ++o) wrow[o] += xi * grow[o];
          }
      }
      if (b->requires_grad) {
        double* bg = b->grad.data();
        for (int r = 0; r < rows; ++r)
          for (int o = 0; o < out; ++o) bg[o] += g[r * out + o];
      }
    };
    return Tensor(n);
  }

  /// Kernel-size-1 1-D convolution: x [C_in, T], W [C_out, C_in], b [C_out].
  /// Per-timestep channel mixing; equals linear at each of the T positions.
  Tensor conv1d_k1(Tensor x, Tensor w, Tensor b) {
    const auto& xs = x.node_->shape;
    const auto& ws = w.node_->shape;
    if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[0])
      throw ShapeError("conv1d_k1: x " + shape_str(xs) + " incompatible with W " +
                       shape_str(ws));
    const int cin = xs[0], t = xs[1], cout = ws[0];
    if (b.node_->shape != std::vector<int>{cout})
      throw ShapeError("conv1d_k1: b " + shape_str(b.node_->shape) +
                       " incompatible with W " + shape_str(ws));
    Node* n = make({cout, t}, {x.node_, w.node_, b.node_});
    const double* xv = x.node_->val.data();
    const double* wv = w.node_->val.data();
    const double* bv = b.node_->val.data();
    double* yv = n->val.data();
    for (int o = 0; o < cout; ++o) {
      double* yrow = yv + o * t;
      for (int k = 0; k < t; ++k) yrow[k] = bv[o];
      const double* wrow = wv + o * cin;
      for (int i = 0; i < cin; ++i) {
        const double wi = wrow[i];
        const double* xrow = xv + i * t;
        for (int k = 0; k < t; ++k) yrow[k] += wi * xrow[k];
      }
    }
    n->back = [cin, t, cout](Node& self) {
      Node *x = self.parents[0], *w = self.parents[1], *b = self.parents[2];
      const double* g = self.grad.data();
      if (x->requires_grad) {
        double* xg = x->grad.data();
        const double* wv = w->val.data();
        for (int o = 0; o < cout; ++o) {
          const double* grow = g + o * t;
          const double* wrow = wv + o * cin;
          for (int i = 0; i < cin; ++i) {
            const double wi = wrow[i];
            double* xrow = xg + i * t;
            for (int k = 0; k < t; ++k) xrow[k] += wi * grow[k];
          }
        }
      }
      if (w->requires_grad) {
        double* wg = w->grad.data();
        const double* xv = x->val.data();
        for (int o = 0; o < cout; ++o) {
          const double* grow = g + o * t;
          double* wrow = wg + o * cin;
          for (int i = 0; i < cin; ++i) {
            const double* xrow = xv + i * t;
            double acc = 0.0;
            for (int k = 0; k < t; ++k) acc += grow[k] * xrow[k];
            wrow[i] += acc;
          }
        }
      }
      if (b->requires_grad) {
        double* bg = b->grad.data();
        for (int o = 0; o < cout; ++o) {
          const double* grow = g + o * t;
          double acc = 0.0;
          for (int k = 0; k < t; ++k) acc += grow[k];
          bg[o] += acc;
        }
      }
    };
    return Tensor(n);
  }

  /// y[..., d] = alpha[d] * x[..., d] + beta[d]; x is [D] or [rows, D].
  Tensor affine(Tensor x, Tensor alpha, Tensor beta) {
    const auto& xs = x.node_->shape;
    const int d = xs.back();
    const int rows = xs.size() == 1 ? 1 : xs[0];
    if (xs.size() > 2) throw ShapeError("affine: rank > 2 input " + shape_str(xs));
    if (alpha.node_->shape != std::vector<int>{d} ||
        beta.node_->shape != std::vector<int>{d})
      throw ShapeError("affine: x " + shape_str(xs) + " incompatible with alpha " +
                       shape_str(alpha.node_->shape));
    Node* n = make(xs, {x.node_, alpha.node_, beta.node_});
    const double* xv = x.node_->val.data();
    const double* av = alpha.node_->val.data();
    const double* bv = beta.node_->val.data();
    double* yv = n->val.data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) yv[r * d + j] = av[j] * xv[r * d + j] + bv[j];
    n->back = [rows, d](Node& self) {
      Node *x = self.parents[0], *a = self.parents[1], *b = self.parents[2];
      const double* g = self.grad.data();
      if (x->requires_grad)
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j)
            x->grad[r * d + j] += a->val[j] * g[r * d + j];
      if (a->requires_grad)
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j)
            a->grad[j] += x->val[r * d + j] * g[r * d + j];
      if (b->requires_grad)
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j) b->grad[j] += g[r * d + j];
    };
    return Tensor(n);
  }

  /// Row-wise softmax over the trailing axis, max-subtracted.
  Tensor softmax(Tensor x) {
    const auto& xs = x.node_->shape;
    const int d = xs.back();
    const int rows = xs.size() == 1 ? 1 : xs[0];
    if (xs.size() > 2) throw ShapeError("softmax: rank > 2 input " + shape_str(xs));
    Node* n = make(xs, {x.node_});
    for (int r = 0; r < rows; ++r) {
      const double* xrow = x.node_->val.data() + r * d;
      double* yrow = n->val.data() + r * d;
      double mx = xrow[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, xrow[j]);
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        yrow[j] = std::exp(xrow[j] - mx);
        sum += yrow[j];
      }
      for (int j = 0; j < d; ++j) yrow[j] /= sum;
    }
    n->back = [rows, d](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (int r = 0; r < rows; ++r) {
        const double* y = self.val.data() + r * d;
        const double* g = self.grad.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += y[j] * g[j];
        double* xg = x->grad.data() + r * d;
        for (int j = 0; j < d; ++j) xg[j] += y[j] * (g[j] - dot);
      }
    };
    return Tensor(n);
  }

  /// Mean over the trailing axis: [C, T] -> [C]. T >= 1.
  Tensor global_avg_pool(Tensor x) {
    const auto& xs = x.node_->shape;
    if (xs.size() != 2) throw ShapeError("global_avg_pool: need rank 2, got " +
                                         shape_str(xs));
    const int c = xs[0], t = xs[1];
    if (t < 1) throw ShapeError("global_avg_pool: empty time axis");
    Node* n = make({c}, {x.node_});
    for (int i = 0; i < c; ++i) {
      double acc = 0.0;
      const double* row = x.node_->val.data() + i * t;
      for (int k = 0; k < t; ++k) acc += row[k];
      n->val[i] = acc / t;
    }
    n->back = [c, t](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (int i = 0; i < c; ++i) {
        const double gi = self.grad[i] / t;
        double* row = x->grad.data() + i * t;
        for (int k = 0; k < t; ++k) row[k] += gi;
      }
    };
    return Tensor(n);
  }

  /// Mean over the leading axis: [R, C] -> [C].
  Tensor mean_axis0(Tensor x) {
    const auto& xs = x.node_->shape;
    if (xs.size() != 2) throw ShapeError("mean_axis0: need rank 2, got " + shape_str(xs));
    const int r = xs[0], c = xs[1];
    Node* n = make({c}, {x.node_});
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += x.node_->val[i * c + j];
      n->val[j] = acc / r;
    }
    n->back = [r, c](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) x->grad[i * c + j] += self.grad[j] / r;
    };
    return Tensor(n);
  }

  /// Sum over the leading axis: [R, C] -> [C].
  Tensor sum_axis0(Tensor x) {
    const auto& xs = x.node_->shape;
    if (xs.size() != 2) throw ShapeError("sum_axis0: need rank 2, got " + shape_str(xs));
    const int r = xs[0], c = xs[1];
    Node* n = make({c}, {x.node_});
    for (int j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += x.node_->val[i * c + j];
      n->val[j] = acc;
    }
    n->back = [r, c](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) x->grad[i * c + j] += self.grad[j];
    };
    return Tensor(n);
  }

  Tensor transpose(Tensor x) {
    const auto& xs = x.node_->shape;
    if (xs.size() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(xs));
    const int r = xs[0], c = xs[1];
    Node* n = make({c, r}, {x.node_});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) n->val[j * r + i] = x.node_->val[i * c + j];
    n->back = [r, c](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) x->grad[i * c + j] += self.grad[j * r + i];
    };
    return Tensor(n);
  }

  Tensor sum(Tensor x) {
    Node* n = make({1}, {x.node_});
    double acc = 0.0;
    for (double v : x.node_->val) acc += v;
    n->val[0] = acc;
    n->back = [](Node& self) { accumulate(self.parents[0], {self.grad[0]}, 0.0, true); };
    return Tensor(n);
  }

  Tensor mean(Tensor x) {
    const double inv = 1.0 / static_cast<double>(x.node_->numel());
    Node* n = make({1}, {x.node_});
    double acc = 0.0;
    for (double v : x.node_->val) acc += v;
    n->val[0] = acc * inv;
    n->back = [inv](Node& self) {
      Node* x = self.parents[0];
      if (!x->requires_grad) return;
      for (auto& g : x->grad) g += self.grad[0] * inv;
    };
    return Tensor(n);
  }

  /// Differentiable element pick: x flat index i -> scalar.
  Tensor at(Tensor x, int flat_index) {
    if (flat_index < 0 || flat_index >= x.node_->numel())
      throw ShapeError("at: index " + std::to_string(flat_index) +
                       " out of range for " + shape_str(x.node_->shape));
    Node* n = make({1}, {x.node_});
    n->val[0] = x.node_->val[flat_index];
    n->back = [flat_index](Node& self) {
      Node* x = self.parents[0];
      if (x->requires_grad) x->grad[flat_index] += self.grad[0];
    };
    return Tensor(n);
  }

  /// Stack B rank-1 tensors of length N into [B, N].
  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input");
    const int len = rows[0].node_->shape.back();
    std::vector<Node*> parents;
    parents.reserve(rows.size());
    for (const auto& r : rows) {
      if (r.node_->shape != std::vector<int>{len})
        throw ShapeError("stack_rows: inconsistent row shape " +
                         shape_str(r.node_->shape) + " vs [" + std::to_string(len) + "]");
      parents.push_back(r.node_);
    }
    Node* n = make({static_cast<int>(rows.size()), len}, std::move(parents));
    for (std::size_t b = 0; b < rows.size(); ++b)
      std::copy(rows[b].node_->val.begin(), rows[b].node_->val.end(),
                n->val.begin() + static_cast<std::ptrdiff_t>(b) * len);
    n->back = [len](Node& self) {
      for (std::size_t b = 0; b < self.parents.size(); ++b) {
        Node* p = self.parents[b];
        if (!p->requires_grad) continue;
        for (int j = 0; j < len; ++j) p->grad[j] += self.grad[b * len + j];
      }
    };
    return Tensor(n);
  }

  /// Concatenate along the trailing axis: [R, C1] + [R, C2] -> [R, C1+C2].
  Tensor concat_cols(Tensor a, Tensor b) {
    const auto& as = a.node_->shape;
    const auto& bs = b.node_->shape;
    if (as.size() != 2 || bs.size() != 2 || as[0] != bs[0])
      throw ShapeError("concat_cols: " + shape_str(as) + " vs " + shape_str(bs));
    const int r = as[0], c1 = as[1], c2 = bs[1];
    Node* n = make({r, c1 + c2}, {a.node_, b.node_});
    for (int i = 0; i < r; ++i) {
      std::copy_n(a.node_->val.data() + i * c1, c1, n->val.data() + i * (c1 + c2));
      std::copy_n(b.node_->val.data() + i * c2, c2,
                  n->val.data() + i * (c1 + c2) + c1);
    }
    n->back = [r, c1, c2](Node& self) {
      Node *a = self.parents[0], *b = self.parents[1];
      for (int i = 0; i < r; ++i) {
        if (a->requires_grad)
          for (int j = 0; j < c1; ++j)
            a->grad[i * c1 + j] += self.grad[i * (c1 + c2) + j];
        if (b->requires_grad)
          for (int j = 0; j < c2; ++j)
            b->grad[i * c2 + j] += self.grad[i * (c1 + c2) + c1 + j];
      }
    };
    return Tensor(n);
  }

  // ---- backward ---------------------------------------------------------

  /// Reverse sweep from a scalar loss. Every requires-grad leaf ends up with
  /// d loss / d leaf; gradients accumulate additively across uses. Leaves not
  /// reachable from the loss keep zero grad. Parameter leaves additionally
  /// accumulate into Parameter::grad.
  void backward(Tensor loss) {
    if (!loss.defined() || loss.node_->numel() != 1)
      throw ShapeError("backward: loss must be a defined scalar");
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.val.size(), 0.0);
    if (!loss.node_->requires_grad) return;  // all-constant graph
    loss.node_->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->requires_grad && it->back) it->back(*it);
    }
  }

 private:
  static void accumulate(Node* p, const std::vector<double>& g, double s,
                         bool broadcast = false) {
    if (!p->requires_grad) return;
    if (broadcast) {
      for (auto& pg : p->grad) pg += g[0];
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += s * g[i];
  }

  static void require_same_shape(const char* op, Tensor a, Tensor b) {
    if (a.node_->shape != b.node_->shape)
      throw ShapeError(std::string(op) + ": shape mismatch " +
                       shape_str(a.node_->shape) + " vs " + shape_str(b.node_->shape));
  }
  static void require_scalar(const char* op, Tensor s) {
    if (s.node_->numel() != 1)
      throw ShapeError(std::string(op) + ": scalar operand required, got " +
                       shape_str(s.node_->shape));
  }

  Node* make(std::vector<int> shape, std::vector<Node*> parents) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
      n *= e;
    }
    nodes_.emplace_back();
    Node& node = nodes_.back();
    node.shape = std::move(shape);
    node.val.resize(static_cast<std::size_t>(n));
    node.parents = std::move(parents);
    for (Node* p : node.parents)
      if (p->requires_grad) node.requires_grad = true;
    return &node;
  }

  Node* make_leaf(std::vector<int> shape, std::vector<double> data, bool req) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
      n *= e;
    }
    if (static_cast<std::int64_t>(data.size()) != n)
      throw ShapeError("leaf: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    nodes_.emplace_back();
    Node& node = nodes_.back();
    node.shape = std::move(shape);
    node.val = std::move(data);
    node.requires_grad = req;
    return &node;
  }

  std::deque<Node> nodes_;
};

}  // namespace veloio::ad
