// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dig/tensor.hpp"

namespace dig {

// ============================================================================
// Reverse-mode tape. Built dynamically per forward pass; one thread per tape.
// Nodes hold values; pullback closures capture parent ids and saved tensors.
// ============================================================================

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Tensor& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Vjp = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Var leaf(Tensor value) { return push_node(std::move(value), nullptr); }

  Var push_node(Tensor value, Vjp vjp) {
    nodes_.push_back(Node{std::move(value), std::move(vjp)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulate an adjoint contribution into node `id`.
  void accumulate(int id, const Tensor& g) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot.defined()) {
      slot = g.clone();
      return;
    }
    if (!slot.same_shape(g)) throw ShapeError("adjoint shape mismatch");
    double* a = slot.mutable_data();
    const double* b = g.data();
    for (std::int64_t i = 0, n = g.numel(); i < n; ++i) a[i] += b[i];
  }

  /// Reverse pass from a scalar (or any) root; visits each node once,
  /// in reverse topological (= reverse creation) order.
  void backward(const Var& root) {
    grads_.assign(nodes_.size(), Tensor{});
    accumulate(root.id, Tensor::ones(nodes_[static_cast<std::size_t>(root.id)].value.shape()));
    for (int id = root.id; id >= 0; --id) {
      auto& g = grads_[static_cast<std::size_t>(id)];
      if (g.defined() && nodes_[static_cast<std::size_t>(id)].vjp)
        nodes_[static_cast<std::size_t>(id)].vjp(g, *this);
    }
  }

  /// Adjoint of `v` after backward(); zeros if the node was never reached.
  Tensor grad(const Var& v) const {
    const auto& slot = grads_[static_cast<std::size_t>(v.id)];
    if (slot.defined()) return slot;
    return Tensor::zeros(nodes_[static_cast<std::size_t>(v.id)].value.shape());
  }

  bool touched(const Var& v) const { return grads_[static_cast<std::size_t>(v.id)].defined(); }

 private:
  struct Node {
    Tensor value;
    Vjp vjp;  // nullptr for leaves
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ============================================================================
// Primitive differentiable ops
// ============================================================================

namespace ad {

inline Var add(Var a, Var b) {
  Tensor v = dig::add(a.value(), b.value());
  int pa = a.id, pb = b.id;
  return a.tape->push_node(std::move(v), [pa, pb](const Tensor& g, Tape& t) {
    t.accumulate(pa, g);
    t.accumulate(pb, g);
  });
}

inline Var sub(Var a, Var b) {
  Tensor v = dig::sub(a.value(), b.value());
  int pa = a.id, pb = b.id;
  return a.tape->push_node(std::move(v), [pa, pb](const Tensor& g, Tape& t) {
    t.accumulate(pa, g);
    t.accumulate(pb, dig::neg(g));
  });
}

inline Var mul(Var a, Var b) {
  Tensor av = a.value(), bv = b.value();
  Tensor v = dig::mul(av, bv);
  int pa = a.id, pb = b.id;
  return a.tape->push_node(std::move(v), [pa, pb, av, bv](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::mul(g, bv));
    t.accumulate(pb, dig::mul(g, av));
  });
}

inline Var scale(Var a, double s) {
  int pa = a.id;
  return a.tape->push_node(dig::scale(a.value(), s),
                           [pa, s](const Tensor& g, Tape& t) { t.accumulate(pa, dig::scale(g, s)); });
}

inline Var add_scalar(Var a, double s) {
  int pa = a.id;
  return a.tape->push_node(dig::add_scalar(a.value(), s),
                           [pa](const Tensor& g, Tape& t) { t.accumulate(pa, g); });
}

inline Var add_const(Var a, const Tensor& c) {
  int pa = a.id;
  return a.tape->push_node(dig::add(a.value(), c),
                           [pa](const Tensor& g, Tape& t) { t.accumulate(pa, g); });
}

inline Var matmul(Var a, Var b) {
  Tensor av = a.value(), bv = b.value();
  Tensor v = dig::matmul(av, bv);
  int pa = a.id, pb = b.id;
  return a.tape->push_node(std::move(v), [pa, pb, av, bv](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::matmul(g, dig::transpose2d(bv)));
    t.accumulate(pb, dig::matmul(dig::transpose2d(av), g));
  });
}

inline Var transpose2d(Var a) {
  int pa = a.id;
  return a.tape->push_node(dig::transpose2d(a.value()),
                           [pa](const Tensor& g, Tape& t) { t.accumulate(pa, dig::transpose2d(g)); });
}

inline Var reshape(Var a, std::vector<std::int64_t> shape) {
  int pa = a.id;
  auto old_shape = a.value().shape();
  return a.tape->push_node(a.value().reshape(std::move(shape)), [pa, old_shape](const Tensor& g, Tape& t) {
    t.accumulate(pa, g.reshape(old_shape));
  });
}

inline Var flip_seq(Var a) {
  int pa = a.id;
  return a.tape->push_node(dig::flip_seq(a.value()),
                           [pa](const Tensor& g, Tape& t) { t.accumulate(pa, dig::flip_seq(g)); });
}

inline Var permute_rows(Var a, const std::vector<std::int64_t>& perm) {
  int pa = a.id;
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
  return a.tape->push_node(dig::permute_rows(a.value(), perm), [pa, inv](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::permute_rows(g, inv));
  });
}

/// out.flat[i] = x.flat[index_map[i]]; vjp is scatter-add.
inline Var gather_flat(Var a, const std::vector<std::int64_t>& index_map, std::vector<std::int64_t> out_shape) {
  const Tensor& x = a.value();
  Tensor v(std::move(out_shape));
  if (static_cast<std::int64_t>(index_map.size()) != v.numel())
    throw ShapeError("gather_flat: index map does not cover output");
  for (std::size_t i = 0; i < index_map.size(); ++i)
    v.mutable_data()[i] = x.at(index_map[i]);
  int pa = a.id;
  auto in_shape = x.shape();
  return a.tape->push_node(std::move(v), [pa, index_map, in_shape](const Tensor& g, Tape& t) {
    Tensor gx = Tensor::zeros(in_shape);
    for (std::size_t i = 0; i < index_map.size(); ++i)
      gx.mutable_data()[index_map[i]] += g.at(static_cast<std::int64_t>(i));
    t.accumulate(pa, gx);
  });
}

inline Var slice_rows(Var a, std::int64_t lo, std::int64_t hi) {
  int pa = a.id;
  auto in_shape = a.value().shape();
  return a.tape->push_node(dig::slice_rows(a.value(), lo, hi), [pa, lo, in_shape](const Tensor& g, Tape& t) {
    Tensor gx = Tensor::zeros(in_shape);
    std::copy(g.data(), g.data() + g.numel(), gx.mutable_data() + lo * in_shape[1]);
    t.accumulate(pa, gx);
  });
}

inline Var slice_cols(Var a, std::int64_t lo, std::int64_t hi) {
  int pa = a.id;
  auto in_shape = a.value().shape();
  return a.tape->push_node(dig::slice_cols(a.value(), lo, hi), [pa, lo, hi, in_shape](const Tensor& g, Tape& t) {
    Tensor gx = Tensor::zeros(in_shape);
    std::int64_t c = in_shape[1], w = hi - lo;
    for (std::int64_t i = 0; i < in_shape[0]; ++i)
      std::copy(g.data() + i * w, g.data() + (i + 1) * w, gx.mutable_data() + i * c + lo);
    t.accumulate(pa, gx);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  Tensor v = dig::concat_cols(vals);
  std::vector<int> ids;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    widths.push_back(p.value().extent(1));
  }
  return parts[0].tape->push_node(std::move(v), [ids, widths](const Tensor& g, Tape& t) {
    std::int64_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], dig::slice_cols(g, off, off + widths[k]));
      off += widths[k];
    }
  });
}

inline Var sigmoid(Var a) {
  Tensor s = dig::sigmoid(a.value());
  int pa = a.id;
  return a.tape->push_node(s, [pa, s](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, s, [](double gi, double si) { return gi * si * (1.0 - si); }, "sigmoid'"));
  });
}

inline Var exp(Var a) {
  Tensor e = dig::exp_t(a.value());
  int pa = a.id;
  return a.tape->push_node(e, [pa, e](const Tensor& g, Tape& t) { t.accumulate(pa, dig::mul(g, e)); });
}

inline Var log(Var a) {
  Tensor x = a.value();
  int pa = a.id;
  return a.tape->push_node(dig::log_t(x), [pa, x](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, x, [](double gi, double xi) { return gi / xi; }, "log'"));
  });
}

/// Standard normal CDF, elementwise.
inline Var normal_cdf(Var a) {
  Tensor x = a.value();
  int pa = a.id;
  Tensor v = dig::map(x, [](double xi) { return 0.5 * (1.0 + std::erf(xi * M_SQRT1_2)); });
  return a.tape->push_node(std::move(v), [pa, x](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, x,
                              [](double gi, double xi) {
                                return gi * std::exp(-0.5 * xi * xi) / std::sqrt(2.0 * M_PI);
                              },
                              "normal_cdf'"));
  });
}

inline Var pow_scalar(Var a, double p) {
  Tensor x = a.value();
  int pa = a.id;
  return a.tape->push_node(dig::pow_scalar(x, p), [pa, p, x](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, x, [p](double gi, double xi) { return gi * p * std::pow(xi, p - 1.0); }, "pow'"));
  });
}

inline Var silu(Var a) {
  Tensor x = a.value();
  int pa = a.id;
  return a.tape->push_node(dig::silu(x), [pa, x](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, x,
                              [](double gi, double xi) {
                                double s = 1.0 / (1.0 + std::exp(-xi));
                                return gi * (s + xi * s * (1.0 - s));
                              },
                              "silu'"));
  });
}

inline Var gelu(Var a) {
  Tensor x = a.value();
  int pa = a.id;
  return a.tape->push_node(dig::gelu(x), [pa, x](const Tensor& g, Tape& t) {
    t.accumulate(pa, dig::zip(g, x,
                              [](double gi, double xi) {
                                double cdf = 0.5 * (1.0 + std::erf(xi * M_SQRT1_2));
                                double pdf = std::exp(-0.5 * xi * xi) / std::sqrt(2.0 * M_PI);
                                return gi * (cdf + xi * pdf);
                              },
                              "gelu'"));
  });
}

inline Var add_row(Var x, Var v) {
  Tensor out = dig::add_row(x.value(), v.value());
  int px = x.id, pv = v.id;
  auto vshape = v.value().shape();
  return x.tape->push_node(std::move(out), [px, pv, vshape](const Tensor& g, Tape& t) {
    t.accumulate(px, g);
    t.accumulate(pv, dig::col_sum(g).reshape(vshape));
  });
}

inline Var mul_row(Var x, Var v) {
  Tensor xv = x.value(), vv = v.value();
  Tensor out = dig::mul_row(xv, vv);
  int px = x.id, pv = v.id;
  auto vshape = vv.shape();
  return x.tape->push_node(std::move(out), [px, pv, xv, vv, vshape](const Tensor& g, Tape& t) {
    t.accumulate(px, dig::mul_row(g, vv));
    t.accumulate(pv, dig::col_sum(dig::mul(g, xv)).reshape(vshape));
  });
}

/// Non-affine LayerNorm over the last axis of [T x D].
inline Var layernorm(Var x, double eps = kLayerNormEps) {
  Tensor xv = x.value();
  Tensor y = dig::layernorm_rows(xv, nullptr, nullptr, eps);
  int px = x.id;
  return x.tape->push_node(y, [px, xv, y, eps](const Tensor& g, Tape& t) {
    std::int64_t rows = xv.extent(0), d = xv.extent(1);
    Tensor gx(xv.shape());
    for (std::int64_t i = 0; i < rows; ++i) {
      double m = 0.0;
      for (std::int64_t j = 0; j < d; ++j) m += xv(i, j);
      m /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        double c = xv(i, j) - m;
        var += c * c;
      }
      var /= static_cast<double>(d);
      double r = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gymean = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        gmean += g(i, j);
        gymean += g(i, j) * y(i, j);
      }
      gmean /= static_cast<double>(d);
      gymean /= static_cast<double>(d);
      for (std::int64_t j = 0; j < d; ++j)
        gx.set(i, j, r * (g(i, j) - gmean - y(i, j) * gymean));
    }
    t.accumulate(px, gx);
  });
}

/// Affine LayerNorm: gamma/beta are row vectors of width D.
inline Var layernorm_affine(Var x, Var gamma, Var beta, double eps = kLayerNormEps) {
  Var n = layernorm(x, eps);
  return add_row(mul_row(n, gamma), beta);
}

inline Var sum_all(Var a) {
  Tensor v({1, 1});
  v.set(0, dig::sum(a.value()));
  int pa = a.id;
  auto shape = a.value().shape();
  return a.tape->push_node(std::move(v), [pa, shape](const Tensor& g, Tape& t) {
    t.accumulate(pa, Tensor::full(shape, g.at(0)));
  });
}

inline Var mean_all(Var a) {
  double inv_n = 1.0 / static_cast<double>(a.value().numel());
  return scale(sum_all(a), inv_n);
}

/// Stop-gradient: value flows, adjoint does not.
inline Var detach(Var a) { return a.tape->leaf(a.value()); }

inline Var square(Var a) { return mul(a, a); }

/// mean((a - c)^2) against a constant target.
inline Var mse_to_const(Var a, const Tensor& c) { return mean_all(square(add_const(a, dig::neg(c)))); }

}  // namespace ad

// ============================================================================
// grad_check: reverse-mode vs central differences
// ============================================================================

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double ad_at_worst = 0.0;
  double fd_at_worst = 0.0;
  bool zero_adjoint = false;  // analytic gradient identically zero (detached path)
  bool pass = false;
};

/// `f` builds a scalar Var from a leaf holding `x`.
inline GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                  double h = 1e-5, double tol = 1e-4, double denom_floor = 1e-2) {
  auto eval = [&](const Tensor& xt) {
    Tape tape;
    Var root = f(tape, tape.leaf(xt));
    if (root.value().numel() != 1) throw ShapeError("grad_check expects a scalar function");
    double v = root.value().at(0);
    if (std::isnan(v)) throw NumericError("NaN in grad_check function evaluation");
    return v;
  };

  Tape tape;
  Var leaf = tape.leaf(x);
  Var root = f(tape, leaf);
  if (root.value().numel() != 1) throw ShapeError("grad_check expects a scalar function");
  if (std::isnan(root.value().at(0))) throw NumericError("NaN in grad_check function evaluation");
  tape.backward(root);
  Tensor g_ad = tape.grad(leaf);

  GradCheckReport rep;
  rep.zero_adjoint = (max_abs(g_ad) == 0.0);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.clone(), xm = x.clone();
    xp.mutable_data()[i] += h;
    xm.mutable_data()[i] -= h;
    double fd = (eval(xp) - eval(xm)) / (2.0 * h);
    double a = g_ad.at(i);
    double rel = std::abs(a - fd) / std::max({denom_floor, std::abs(a), std::abs(fd)});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.ad_at_worst = a;
      rep.fd_at_worst = fd;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace dig
