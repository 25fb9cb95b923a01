#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tspf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major array of doubles. Plain value type; gradients live on
// graph nodes (ad::Var), not here.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(values.size()) + " values");
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row_vector(std::vector<double> v) {
    auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace ad {

// One vertex of a reverse-mode computation graph. `parents` holds only the
// differentiable inputs; constant inputs are captured by the backprop
// closure but never appear as edges.
struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;

  static Var param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  static Var constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = false;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  const std::vector<double>& grad() const {
    if (node_->grad.size() != node_->value.numel())
      node_->grad.assign(node_->value.numel(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.numel(), 0.0); }
  bool grad_populated() const { return node_->grad.size() == node_->value.numel(); }

  double scalar() const {
    if (numel() != 1) throw std::logic_error("Var::scalar on non-scalar " + shape_str(shape()));
    return node_->value.values[0];
  }

  NodePtr node() const { return node_; }

  explicit Var(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs)
    if (in.requires_grad()) n->parents.push_back(in.node());
  if (!n->parents.empty()) {
    n->requires_grad = true;
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

inline void accumulate(const NodePtr& n, const std::vector<double>& contrib) {
  auto& g = n->grad_buffer();
  for (std::size_t i = 0; i < contrib.size(); ++i) g[i] += contrib[i];
}

}  // namespace detail

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(std::move(out), {a, b}, [an, bn](Node& o) {
    if (an->requires_grad) detail::accumulate(an, o.grad);
    if (bn->requires_grad) detail::accumulate(bn, o.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(std::move(out), {a, b}, [an, bn](Node& o) {
    if (an->requires_grad) detail::accumulate(an, o.grad);
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(std::move(out), {a, b}, [an, bn](Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      const auto& bv2 = bn->value.values;
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bv2[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      const auto& av2 = an->value.values;
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * av2[i];
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values) v *= c;
  auto an = a.node();
  return detail::make_op(std::move(out), {a}, [an, c](Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += c * o.grad[i];
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.values) v += c;
  auto an = a.node();
  return detail::make_op(std::move(out), {a}, [an](Node& o) { detail::accumulate(an, o.grad); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

// ---- activations / transcendentals ----

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = v > 0.0 ? v : 0.0;
  auto an = a.node();
  return detail::make_op(std::move(out), {a}, [an](Node& o) {
    auto& g = an->grad_buffer();
    const auto& x = an->value.values;
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (x[i] > 0.0) g[i] += o.grad[i];
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = std::tanh(v);
  auto an = a.node();
  auto saved = std::make_shared<std::vector<double>>(out.values);
  return detail::make_op(std::move(out), {a}, [an, saved](Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double t = (*saved)[i];
      g[i] += o.grad[i] * (1.0 - t * t);
    }
  });
}

inline Var exp(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = std::exp(v);
  auto an = a.node();
  auto saved = std::make_shared<std::vector<double>>(out.values);
  return detail::make_op(std::move(out), {a}, [an, saved](Node& o) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * (*saved)[i];
  });
}

inline Var log(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values) v = std::log(v);
  auto an = a.node();
  return detail::make_op(std::move(out), {a}, [an](Node& o) {
    auto& g = an->grad_buffer();
    const auto& x = an->value.values;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / x[i];
  });
}

// ---- reductions ----

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values) s += v;
  auto an = a.node();
  return detail::make_op(Tensor::scalar(s), {a}, [an](Node& o) {
    auto& g = an->grad_buffer();
    const double up = o.grad[0];
    for (auto& gi : g) gi += up;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Var sum_squares(const Var& a) { return sum(mul(a, a)); }

// ---- shape ----

inline Var reshape(const Var& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  Tensor out(std::move(s), a.value().values);
  auto an = a.node();
  return detail::make_op(std::move(out), {a}, [an](Node& o) { detail::accumulate(an, o.grad); });
}

inline Var concat_cols(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_cols: incompatible shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  Tensor out = Tensor::zeros({n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out.values[i * (ca + cb) + j] = a.value().values[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out.values[i * (ca + cb) + ca + j] = b.value().values[i * cb + j];
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op(std::move(out), {a, b}, [an, bn, n, ca, cb](Node& o) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += o.grad[i * (ca + cb) + j];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += o.grad[i * (ca + cb) + ca + j];
    }
  });
}

// Stops gradient flow; shares the forward value.
inline Var detach(const Var& a) { return Var::constant(a.value()); }

// Gathers rows of a matrix by index; duplicate indices accumulate grads.
inline Var take_rows(const Var& m, const std::vector<std::size_t>& idx) {
  if (m.shape().size() != 2)
    throw std::invalid_argument("take_rows: expected matrix, got " + shape_str(m.shape()));
  const std::size_t c = m.shape()[1];
  for (auto i : idx)
    if (i >= m.shape()[0])
      throw std::out_of_range("take_rows: row " + std::to_string(i) + " out of " +
                              std::to_string(m.shape()[0]));
  Tensor out = Tensor::zeros({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < c; ++j) out.values[r * c + j] = m.value().values[idx[r] * c + j];
  auto mn = m.node();
  auto rows = std::make_shared<std::vector<std::size_t>>(idx);
  return detail::make_op(std::move(out), {m}, [mn, rows, c](Node& o) {
    auto& g = mn->grad_buffer();
    for (std::size_t r = 0; r < rows->size(); ++r)
      for (std::size_t j = 0; j < c; ++j) g[(*rows)[r] * c + j] += o.grad[r * c + j];
  });
}

// ---- affine layer ----

// y[i,o] = sum_k x[i,k] * w[o,k] + b[o]; w is stored out_dim x in_dim.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2)
    throw std::invalid_argument("linear: expected matrices, got " + shape_str(x.shape()) + " and " +
                                shape_str(w.shape()));
  const std::size_t n = x.shape()[0], in = x.shape()[1];
  const std::size_t out_dim = w.shape()[0], w_in = w.shape()[1];
  if (in != w_in)
    throw std::invalid_argument("linear: input dim " + std::to_string(in) +
                                " does not match weight dim " + std::to_string(w_in));
  if (b.numel() != out_dim)
    throw std::invalid_argument("linear: bias dim " + std::to_string(b.numel()) +
                                " does not match output dim " + std::to_string(out_dim));

  Tensor out = Tensor::zeros({n, out_dim});
  const double* xv = x.value().values.data();
  const double* wv = w.value().values.data();
  const double* bv = b.value().values.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.values.data() + i * out_dim;
    const double* xrow = xv + i * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wrow = wv + o * in;
      double acc = bv[o];
      for (std::size_t k = 0; k < in; ++k) acc += xrow[k] * wrow[k];
      orow[o] = acc;
    }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return detail::make_op(std::move(out), {x, w, b}, [xn, wn, bn, n, in, out_dim](Node& o) {
    const double* gy = o.grad.data();
    if (xn->requires_grad) {
      auto& gx = xn->grad_buffer();
      const double* wv2 = wn->value.values.data();
      for (std::size_t i = 0; i < n; ++i) {
        double* gxrow = gx.data() + i * in;
        const double* gyrow = gy + i * out_dim;
        for (std::size_t o2 = 0; o2 < out_dim; ++o2) {
          const double g = gyrow[o2];
          if (g == 0.0) continue;
          const double* wrow = wv2 + o2 * in;
          for (std::size_t k = 0; k < in; ++k) gxrow[k] += g * wrow[k];
        }
      }
    }
    if (wn->requires_grad) {
      auto& gw = wn->grad_buffer();
      const double* xv2 = xn->value.values.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* xrow = xv2 + i * in;
        const double* gyrow = gy + i * out_dim;
        for (std::size_t o2 = 0; o2 < out_dim; ++o2) {
          const double g = gyrow[o2];
          if (g == 0.0) continue;
          double* gwrow = gw.data() + o2 * in;
          for (std::size_t k = 0; k < in; ++k) gwrow[k] += g * xrow[k];
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o2 = 0; o2 < out_dim; ++o2) gb[o2] += gy[i * out_dim + o2];
    }
  });
}

// ---- matrix/vector broadcast helpers (Sinkhorn building blocks) ----

inline Var add_rowvec(const Var& m, const Var& v) {
  if (m.shape().size() != 2 || v.numel() != m.shape()[1])
    throw std::invalid_argument("add_rowvec: " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor out = m.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.values[i * c + j] += v.value().values[j];
  auto mn = m.node();
  auto vn = v.node();
  return detail::make_op(std::move(out), {m, v}, [mn, vn, r, c](Node& o) {
    if (mn->requires_grad) detail::accumulate(mn, o.grad);
    if (vn->requires_grad) {
      auto& g = vn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

inline Var add_colvec(const Var& m, const Var& v) {
  if (m.shape().size() != 2 || v.numel() != m.shape()[0])
    throw std::invalid_argument("add_colvec: " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor out = m.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.values[i * c + j] += v.value().values[i];
  auto mn = m.node();
  auto vn = v.node();
  return detail::make_op(std::move(out), {m, v}, [mn, vn, r, c](Node& o) {
    if (mn->requires_grad) detail::accumulate(mn, o.grad);
    if (vn->requires_grad) {
      auto& g = vn->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i] += o.grad[i * c + j];
    }
  });
}

// Row-wise log(sum(exp)); softmax saved for the backward pass.
inline Var logsumexp_rows(const Var& m) {
  if (m.shape().size() != 2) throw std::invalid_argument("logsumexp_rows: expected matrix");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor out = Tensor::zeros({r});
  auto soft = std::make_shared<std::vector<double>>(r * c);
  const auto& mv = m.value().values;
  for (std::size_t i = 0; i < r; ++i) {
    double mx = mv[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, mv[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(mv[i * c + j] - mx);
      (*soft)[i * c + j] = e;
      s += e;
    }
    out.values[i] = mx + std::log(s);
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) (*soft)[i * c + j] *= inv;
  }
  auto mn = m.node();
  return detail::make_op(std::move(out), {m}, [mn, soft, r, c](Node& o) {
    auto& g = mn->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double up = o.grad[i];
      if (up == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up * (*soft)[i * c + j];
    }
  });
}

inline Var logsumexp_cols(const Var& m) {
  if (m.shape().size() != 2) throw std::invalid_argument("logsumexp_cols: expected matrix");
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor out = Tensor::zeros({c});
  auto soft = std::make_shared<std::vector<double>>(r * c);
  const auto& mv = m.value().values;
  for (std::size_t j = 0; j < c; ++j) {
    double mx = mv[j];
    for (std::size_t i = 1; i < r; ++i) mx = std::max(mx, mv[i * c + j]);
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      const double e = std::exp(mv[i * c + j] - mx);
      (*soft)[i * c + j] = e;
      s += e;
    }
    out.values[j] = mx + std::log(s);
    const double inv = 1.0 / s;
    for (std::size_t i = 0; i < r; ++i) (*soft)[i * c + j] *= inv;
  }
  auto mn = m.node();
  return detail::make_op(std::move(out), {m}, [mn, soft, r, c](Node& o) {
    auto& g = mn->grad_buffer();
    for (std::size_t j = 0; j < c; ++j) {
      const double up = o.grad[j];
      if (up == 0.0) continue;
      for (std::size_t i = 0; i < r; ++i) g[i * c + j] += up * (*soft)[i * c + j];
    }
  });
}

// C[i,j] = ||a_i - b_j||_2. Zero-distance pairs get a zero subgradient.
inline Var pairwise_euclidean(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("pairwise_euclidean: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const std::size_t na = a.shape()[0], nb = b.shape()[0], p = a.shape()[1];
  Tensor out = Tensor::zeros({na, nb});
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double d = av[i * p + k] - bv[j * p + k];
        s += d * d;
      }
      out.values[i * nb + j] = std::sqrt(s);
    }
  auto an = a.node();
  auto bn = b.node();
  auto dist = std::make_shared<std::vector<double>>(out.values);
  return detail::make_op(std::move(out), {a, b}, [an, bn, dist, na, nb, p](Node& o) {
    const auto& av2 = an->value.values;
    const auto& bv2 = bn->value.values;
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        const double d = (*dist)[i * nb + j];
        const double up = o.grad[i * nb + j];
        if (up == 0.0 || d <= 0.0) continue;
        const double f = up / d;
        for (std::size_t k = 0; k < p; ++k) {
          const double diff = av2[i * p + k] - bv2[j * p + k];
          if (an->requires_grad) an->grad_buffer()[i * p + k] += f * diff;
          if (bn->requires_grad) bn->grad_buffer()[j * p + k] -= f * diff;
        }
      }
  });
}

// L[i,j] = log N(zu_j; mu_i, diag(exp(lv_i))).
inline Var gauss_logdensity_pairs(const Var& mu, const Var& lv, const Var& zu) {
  if (mu.shape() != lv.shape() || mu.shape() != zu.shape() || mu.shape().size() != 2)
    throw std::invalid_argument("gauss_logdensity_pairs: rows/dims must align, got " +
                                shape_str(mu.shape()) + ", " + shape_str(lv.shape()) + ", " +
                                shape_str(zu.shape()));
  const std::size_t m = mu.shape()[0], q = mu.shape()[1];
  constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5*log(2*pi)
  Tensor out = Tensor::zeros({m, m});
  const auto& muv = mu.value().values;
  const auto& lvv = lv.value().values;
  const auto& zuv = zu.value().values;
  for (std::size_t i = 0; i < m; ++i) {
    double base = 0.0;
    for (std::size_t k = 0; k < q; ++k) base -= kHalfLog2Pi + 0.5 * lvv[i * q + k];
    for (std::size_t j = 0; j < m; ++j) {
      double acc = base;
      for (std::size_t k = 0; k < q; ++k) {
        const double d = zuv[j * q + k] - muv[i * q + k];
        acc -= d * d / (2.0 * std::exp(lvv[i * q + k]));
      }
      out.values[i * m + j] = acc;
    }
  }
  auto mun = mu.node();
  auto lvn = lv.node();
  auto zun = zu.node();
  return detail::make_op(std::move(out), {mu, lv, zu}, [mun, lvn, zun, m, q](Node& o) {
    const auto& muv2 = mun->value.values;
    const auto& lvv2 = lvn->value.values;
    const auto& zuv2 = zun->value.values;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double up = o.grad[i * m + j];
        if (up == 0.0) continue;
        for (std::size_t k = 0; k < q; ++k) {
          const double inv_var = std::exp(-lvv2[i * q + k]);
          const double d = zuv2[j * q + k] - muv2[i * q + k];
          if (mun->requires_grad) mun->grad_buffer()[i * q + k] += up * d * inv_var;
          if (lvn->requires_grad)
            lvn->grad_buffer()[i * q + k] += up * (-0.5 + 0.5 * d * d * inv_var);
          if (zun->requires_grad) zun->grad_buffer()[j * q + k] += up * (-d * inv_var);
        }
      }
  });
}

inline Var diag(const Var& m) {
  if (m.shape().size() != 2 || m.shape()[0] != m.shape()[1])
    throw std::invalid_argument("diag: expected square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.shape()[0];
  Tensor out = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) out.values[i] = m.value().values[i * n + i];
  auto mn = m.node();
  return detail::make_op(std::move(out), {m}, [mn, n](Node& o) {
    auto& g = mn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += o.grad[i];
  });
}

// ---- backward ----

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable node that requires grad; leaves keep theirs until zeroed.
inline void backward(const Var& loss) {
  if (loss.numel() != 1)
    throw std::logic_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // iterative post-order DFS
  std::vector<NodePtr> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      auto child = n->parents[idx++];
      if (visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto root = loss.node();
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// All nodes reachable from `root` through differentiable edges.
inline std::unordered_set<const Node*> reachable_nodes(const Var& root) {
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  return seen;
}

}  // namespace ad
}  // namespace tspf
