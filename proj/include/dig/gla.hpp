// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <tuple>
#include <vector>

#include "dig/autodiff.hpp"
#include "dig/tensor.hpp"

namespace dig {

// ============================================================================
// Gated linear attention cell.
//
// Per token: S_t = G_t (.) S_{t-1} + K_t^T V_t,  O_t = Q_t S_t  (row vectors),
// with G_t = alpha_t^T beta_t, alpha = sigmoid(X Wa + ba)^(1/tau), beta alike.
// Output path: Y_t = (Swish(X_t Wr + br) (.) LN(O_t)) Wo.
// ============================================================================

struct ChunkSpec {
  std::int64_t chunk_len = 64;  // M; last chunk may be shorter

  explicit ChunkSpec(std::int64_t m) : chunk_len(m) {
    if (m < 1) throw ConfigError("chunk length must be >= 1");
  }
};

struct GLAMode {
  enum class Kind { recurrent, chunked };
  Kind kind = Kind::recurrent;
  std::int64_t chunk = 64;

  static GLAMode recurrent() { return GLAMode{Kind::recurrent, 0}; }
  static GLAMode chunked(std::int64_t m) { return GLAMode{Kind::chunked, ChunkSpec(m).chunk_len}; }
};

struct GLAParams {
  Tensor w_q, w_k, w_v;     // [d x dk], [d x dk], [d x dv]
  Tensor w_alpha, b_alpha;  // [d x dk], [1 x dk]
  Tensor w_beta, b_beta;    // [d x dv], [1 x dv]
  Tensor w_r, b_r;          // [d x dv], [1 x dv]
  Tensor w_o;               // [dv x d]
  double tau = 16.0;
  std::int64_t heads = 1;

  std::int64_t d() const { return w_q.extent(0); }
  std::int64_t dk() const { return w_q.extent(1); }
  std::int64_t dv() const { return w_v.extent(1); }

  void validate() const {
    if (tau <= 0.0) throw ConfigError("gate temperature tau must be positive");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (dk() % heads != 0 || dv() % heads != 0)
      throw ConfigError("key/value widths must divide evenly across heads");
  }

  static GLAParams init(Rng& rng, std::int64_t d, std::int64_t dk, std::int64_t dv,
                        std::int64_t heads = 1, double tau = 16.0) {
    GLAParams p;
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.w_q = Tensor::randn(rng, {d, dk}, s);
    p.w_k = Tensor::randn(rng, {d, dk}, s);
    p.w_v = Tensor::randn(rng, {d, dv}, s);
    p.w_alpha = Tensor::randn(rng, {d, dk}, s);
    p.b_alpha = Tensor::zeros({1, dk});
    p.w_beta = Tensor::randn(rng, {d, dv}, s);
    p.b_beta = Tensor::zeros({1, dv});
    p.w_r = Tensor::randn(rng, {d, dv}, s);
    p.b_r = Tensor::zeros({1, dv});
    p.w_o = Tensor::randn(rng, {dv, d}, 1.0 / std::sqrt(static_cast<double>(dv)));
    p.tau = tau;
    p.heads = heads;
    p.validate();
    return p;
  }
};

/// Recurrent state: one [dk_h x dv_h] matrix per head, zero-initialized.
struct GLAState {
  std::vector<Tensor> s;

  static GLAState zeros(std::int64_t heads, std::int64_t dk_h, std::int64_t dv_h) {
    GLAState st;
    for (std::int64_t h = 0; h < heads; ++h) st.s.push_back(Tensor::zeros({dk_h, dv_h}));
    return st;
  }
};

// ============================================================================
// Gates
// ============================================================================

/// alpha [L x dk], beta [L x dv], G [L x dk x dv] with G_t = alpha_t^T beta_t.
inline std::tuple<Tensor, Tensor, Tensor> gla_gates(const Tensor& x, const GLAParams& p) {
  p.validate();
  Tensor alpha = pow_scalar(sigmoid(add_row(matmul(x, p.w_alpha), p.b_alpha)), 1.0 / p.tau);
  Tensor beta = pow_scalar(sigmoid(add_row(matmul(x, p.w_beta), p.b_beta)), 1.0 / p.tau);
  std::int64_t l = x.extent(0), dk = alpha.extent(1), dv = beta.extent(1);
  Tensor gate({l, dk, dv});
  for (std::int64_t t = 0; t < l; ++t)
    for (std::int64_t a = 0; a < dk; ++a)
      for (std::int64_t b = 0; b < dv; ++b) gate.set(t, a, b, alpha(t, a) * beta(t, b));
  return {alpha, beta, gate};
}

// ============================================================================
// Scan kernels (shared by f64 path and the f32 bench path)
// ============================================================================

namespace kernels {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Token-recurrent gated scan, single head. state is dk*dv, in/out.
template <typename S>
void gla_recurrent(const S* q, const S* k, const S* v, const S* alpha, const S* beta,
                   std::int64_t l, std::int64_t dk, std::int64_t dv, S* out, S* state) {
  for (std::int64_t t = 0; t < l; ++t) {
    const S* qt = q + t * dk;
    const S* kt = k + t * dk;
    const S* vt = v + t * dv;
    const S* at = alpha + t * dk;
    const S* bt = beta + t * dv;
    S* ot = out + t * dv;
    for (std::int64_t j = 0; j < dv; ++j) ot[j] = S(0);
    for (std::int64_t i = 0; i < dk; ++i) {
      S* srow = state + i * dv;
      S ai = at[i], ki = kt[i], qi = qt[i];
      for (std::int64_t j = 0; j < dv; ++j) {
        srow[j] = ai * bt[j] * srow[j] + ki * vt[j];
        ot[j] += qi * srow[j];
      }
    }
  }
}

/// Chunk-parallel gated scan, single head. Inter-chunk state carried via
/// accumulated gate products; intra-chunk contribution via the M x M
/// causal-decay matrix in log space. Falls back to a per-pair exponent
/// form when cumulative decay would overflow exp().
template <typename S>
void gla_chunked(const S* q, const S* k, const S* v, const S* alpha, const S* beta,
                 std::int64_t l, std::int64_t dk, std::int64_t dv, std::int64_t chunk_len,
                 S* out, S* state) {
  const double safe_log_span = std::is_same_v<S, float> ? 25.0 : 280.0;
  std::vector<S> la(static_cast<std::size_t>(chunk_len * dk));
  std::vector<S> lb(static_cast<std::size_t>(chunk_len * dv));
  std::vector<S> qa(la.size()), kd(la.size());
  std::vector<S> vb(lb.size());
  std::vector<S> p(static_cast<std::size_t>(chunk_len * chunk_len));
  std::vector<S> oi(lb.size());
  std::vector<S> k2(la.size()), v2(lb.size());

  for (std::int64_t c0 = 0; c0 < l; c0 += chunk_len) {
    std::int64_t m = std::min(chunk_len, l - c0);
    const S* qc = q + c0 * dk;
    const S* kc = k + c0 * dk;
    const S* vc = v + c0 * dv;
    const S* ac = alpha + c0 * dk;
    const S* bc = beta + c0 * dv;
    S* oc = out + c0 * dv;

    // cumulative log-gates within the chunk (inclusive)
    double min_la = 0.0, min_lb = 0.0;
    for (std::int64_t t = 0; t < m; ++t) {
      for (std::int64_t i = 0; i < dk; ++i) {
        S prev = t ? la[(t - 1) * dk + i] : S(0);
        la[t * dk + i] = prev + std::log(ac[t * dk + i]);
        min_la = std::min(min_la, static_cast<double>(la[t * dk + i]));
      }
      for (std::int64_t j = 0; j < dv; ++j) {
        S prev = t ? lb[(t - 1) * dv + j] : S(0);
        lb[t * dv + j] = prev + std::log(bc[t * dv + j]);
        min_lb = std::min(min_lb, static_cast<double>(lb[t * dv + j]));
      }
    }
    bool fast = (-min_la < safe_log_span) && (-min_lb < safe_log_span);

    // inter-chunk contribution: O_t += ((Q_t (.) e^LA_t) S_in) (.) e^LB_t
    for (std::int64_t t = 0; t < m; ++t)
      for (std::int64_t i = 0; i < dk; ++i) qa[t * dk + i] = qc[t * dk + i] * std::exp(la[t * dk + i]);
    {
      Eigen::Map<const RowMat<S>> mq(qa.data(), m, dk);
      Eigen::Map<const RowMat<S>> ms(state, dk, dv);
      Eigen::Map<RowMat<S>> mo(oi.data(), m, dv);
      mo.noalias() = mq * ms;
    }
    for (std::int64_t t = 0; t < m; ++t)
      for (std::int64_t j = 0; j < dv; ++j) oc[t * dv + j] = oi[t * dv + j] * std::exp(lb[t * dv + j]);

    // intra-chunk contribution
    if (fast) {
      for (std::int64_t t = 0; t < m; ++t)
        for (std::int64_t i = 0; i < dk; ++i) kd[t * dk + i] = kc[t * dk + i] * std::exp(-la[t * dk + i]);
      for (std::int64_t t = 0; t < m; ++t)
        for (std::int64_t j = 0; j < dv; ++j) vb[t * dv + j] = vc[t * dv + j] * std::exp(-lb[t * dv + j]);
      {
        Eigen::Map<const RowMat<S>> mq(qa.data(), m, dk);
        Eigen::Map<const RowMat<S>> mk(kd.data(), m, dk);
        Eigen::Map<RowMat<S>> mp(p.data(), m, m);
        mp.noalias() = mq * mk.transpose();
      }
      for (std::int64_t t = 0; t < m; ++t)
        for (std::int64_t i = t + 1; i < m; ++i) p[t * m + i] = S(0);
      {
        Eigen::Map<const RowMat<S>> mp(p.data(), m, m);
        Eigen::Map<const RowMat<S>> mv(vb.data(), m, dv);
        Eigen::Map<RowMat<S>> mo(oi.data(), m, dv);
        mo.noalias() = mp * mv;
      }
      for (std::int64_t t = 0; t < m; ++t)
        for (std::int64_t j = 0; j < dv; ++j) oc[t * dv + j] += oi[t * dv + j] * std::exp(lb[t * dv + j]);
    } else {
      // per-pair exponents; every exponent is <= 0, cannot overflow
      for (std::int64_t t = 0; t < m; ++t) {
        for (std::int64_t i = 0; i <= t; ++i) {
          S acc = S(0);
          for (std::int64_t x = 0; x < dk; ++x)
            acc += qc[t * dk + x] * kc[i * dk + x] * std::exp(la[t * dk + x] - la[i * dk + x]);
          p[t * m + i] = acc;
        }
        for (std::int64_t j = 0; j < dv; ++j) {
          S acc = S(0);
          for (std::int64_t i = 0; i <= t; ++i)
            acc += p[t * m + i] * vc[i * dv + j] * std::exp(lb[t * dv + j] - lb[i * dv + j]);
          oc[t * dv + j] += acc;
        }
      }
    }

    // state carry: S <- (e^LA_m ^T e^LB_m) (.) S + K2^T V2 (all exponents <= 0)
    const S* la_m = la.data() + (m - 1) * dk;
    const S* lb_m = lb.data() + (m - 1) * dv;
    for (std::int64_t t = 0; t < m; ++t) {
      for (std::int64_t i = 0; i < dk; ++i) k2[t * dk + i] = kc[t * dk + i] * std::exp(la_m[i] - la[t * dk + i]);
      for (std::int64_t j = 0; j < dv; ++j) v2[t * dv + j] = vc[t * dv + j] * std::exp(lb_m[j] - lb[t * dv + j]);
    }
    for (std::int64_t i = 0; i < dk; ++i) {
      S decay_i = std::exp(la_m[i]);
      for (std::int64_t j = 0; j < dv; ++j) state[i * dv + j] *= decay_i * std::exp(lb_m[j]);
    }
    {
      Eigen::Map<const RowMat<S>> mk(k2.data(), m, dk);
      Eigen::Map<const RowMat<S>> mv(v2.data(), m, dv);
      Eigen::Map<RowMat<S>> ms(state, dk, dv);
      ms.noalias() += mk.transpose() * mv;
    }
  }
}

}  // namespace kernels

// ============================================================================
// Public scan ops (f64 tensors)
// ============================================================================

namespace detail {

inline void require_scan_shapes(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("gla_scan expects rank-2 Q/K/V");
  std::int64_t l = q.extent(0), dk = q.extent(1), dv = v.extent(1);
  if (k.extent(0) != l || v.extent(0) != l || k.extent(1) != dk)
    throw ShapeError("gla_scan shape mismatch across Q/K/V");
  if (g.rank() != 3 || g.extent(0) != l || g.extent(1) != dk || g.extent(2) != dv)
    throw ShapeError("gla_scan gate must be [L x dk x dv]");
}

inline void require_no_nan(const Tensor& o, const char* name) {
  if (has_nan(o)) throw NumericError(std::string(name) + " produced NaN");
}

}  // namespace detail

/// Token-recurrent scan with explicit (possibly non-separable) gate tensor.
inline Tensor gla_scan(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g) {
  detail::require_scan_shapes(q, k, v, g);
  std::int64_t l = q.extent(0), dk = q.extent(1), dv = v.extent(1);
  Tensor s = Tensor::zeros({dk, dv});
  Tensor out({l, dv});
  for (std::int64_t t = 0; t < l; ++t) {
    for (std::int64_t i = 0; i < dk; ++i) {
      double* srow = s.mutable_data() + i * dv;
      double ki = k(t, i), qi = q(t, i);
      for (std::int64_t j = 0; j < dv; ++j) {
        srow[j] = g(t, i, j) * srow[j] + ki * v(t, j);
        out.mutable_data()[t * dv + j] += qi * srow[j];
      }
    }
  }
  flops::add(4 * l * dk * dv);
  detail::require_no_nan(out, "gla_scan");
  return out;
}

/// Chunk-parallel scan for a general gate tensor: inter-chunk state via
/// accumulated gate products, intra-chunk via explicit pairwise decay
/// products. Identical output to gla_scan.
inline Tensor gla_scan_chunked(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& g,
                               const ChunkSpec& spec) {
  detail::require_scan_shapes(q, k, v, g);
  std::int64_t l = q.extent(0), dk = q.extent(1), dv = v.extent(1), m = spec.chunk_len;
  Tensor s = Tensor::zeros({dk, dv});
  Tensor out = Tensor::zeros({l, dv});
  Tensor cum({dk, dv}), pairdecay({dk, dv}), acc({dk, dv});
  for (std::int64_t c0 = 0; c0 < l; c0 += m) {
    std::int64_t ce = std::min(c0 + m, l);
    // inter-chunk: O_t += Q_t ((prod_{j<=t} G_j) (.) S_in)
    std::fill(cum.mut().begin(), cum.mut().end(), 1.0);
    for (std::int64_t t = c0; t < ce; ++t) {
      for (std::int64_t i = 0; i < dk; ++i)
        for (std::int64_t j = 0; j < dv; ++j) cum.mutable_data()[i * dv + j] *= g(t, i, j);
      for (std::int64_t i = 0; i < dk; ++i) {
        double qi = q(t, i);
        for (std::int64_t j = 0; j < dv; ++j)
          out.mutable_data()[t * dv + j] += qi * cum(i, j) * s(i, j);
      }
    }
    // intra-chunk: pairwise decay products
    for (std::int64_t t = c0; t < ce; ++t) {
      std::fill(pairdecay.mut().begin(), pairdecay.mut().end(), 1.0);
      std::fill(acc.mut().begin(), acc.mut().end(), 0.0);
      for (std::int64_t i = t; i >= c0; --i) {
        if (i < t)
          for (std::int64_t a = 0; a < dk; ++a)
            for (std::int64_t b = 0; b < dv; ++b) pairdecay.mutable_data()[a * dv + b] *= g(i + 1, a, b);
        for (std::int64_t a = 0; a < dk; ++a) {
          double ka = k(i, a);
          for (std::int64_t b = 0; b < dv; ++b)
            acc.mutable_data()[a * dv + b] += pairdecay(a, b) * ka * v(i, b);
        }
      }
      for (std::int64_t a = 0; a < dk; ++a) {
        double qa = q(t, a);
        for (std::int64_t b = 0; b < dv; ++b) out.mutable_data()[t * dv + b] += qa * acc(a, b);
      }
    }
    // state carry: acc currently holds the t = ce-1 intra sum
    for (std::int64_t a = 0; a < dk; ++a)
      for (std::int64_t b = 0; b < dv; ++b)
        s.mutable_data()[a * dv + b] = cum(a, b) * s(a, b) + acc(a, b);
  }
  detail::require_no_nan(out, "gla_scan_chunked");
  return out;
}

/// Chunk-parallel scan for the separable gate G_t = alpha_t^T beta_t
/// (the form the cell actually produces); log-space decay accumulation.
inline Tensor gla_scan_chunked_ab(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const Tensor& alpha, const Tensor& beta, const ChunkSpec& spec) {
  std::int64_t l = q.extent(0), dk = q.extent(1), dv = v.extent(1);
  if (alpha.extent(0) != l || alpha.extent(1) != dk || beta.extent(0) != l || beta.extent(1) != dv)
    throw ShapeError("gla_scan_chunked_ab gate factor shapes");
  Tensor out({l, dv});
  Tensor state = Tensor::zeros({dk, dv});
  kernels::gla_chunked<double>(q.data(), k.data(), v.data(), alpha.data(), beta.data(), l, dk, dv,
                               spec.chunk_len, out.mutable_data(), state.mutable_data());
  flops::add(4 * l * dk * dv);
  detail::require_no_nan(out, "gla_scan_chunked_ab");
  return out;
}

/// Gated output path: Y = (Swish(X Wr + br) (.) LN(O)) Wo; LN is non-affine.
inline Tensor gla_output(const Tensor& o, const Tensor& x, const GLAParams& p) {
  Tensor r = silu(add_row(matmul(x, p.w_r), p.b_r));
  return matmul(mul(r, layernorm_rows(o)), p.w_o);
}

/// Full multi-head cell: project, gate, scan (per head on disjoint channel
/// slices), concat, gated output.
inline Tensor gla_forward(const Tensor& x, const GLAParams& p, GLAMode mode = GLAMode::recurrent()) {
  p.validate();
  if (has_nan(x)) throw NumericError("gla_forward input contains NaN");
  std::int64_t l = x.extent(0);
  std::int64_t dk = p.dk(), dv = p.dv(), h = p.heads;
  std::int64_t dkh = dk / h, dvh = dv / h;
  Tensor q = matmul(x, p.w_q);
  Tensor k = matmul(x, p.w_k);
  Tensor v = matmul(x, p.w_v);
  Tensor alpha = pow_scalar(sigmoid(add_row(matmul(x, p.w_alpha), p.b_alpha)), 1.0 / p.tau);
  Tensor beta = pow_scalar(sigmoid(add_row(matmul(x, p.w_beta), p.b_beta)), 1.0 / p.tau);

  Tensor o({l, dv});
  GLAState state = GLAState::zeros(h, dkh, dvh);
  std::vector<double> qh(static_cast<std::size_t>(l * dkh)), kh(qh.size()), ah(qh.size());
  std::vector<double> vh(static_cast<std::size_t>(l * dvh)), bh(vh.size()), oh(vh.size());
  for (std::int64_t head = 0; head < h; ++head) {
    for (std::int64_t t = 0; t < l; ++t) {
      for (std::int64_t i = 0; i < dkh; ++i) {
        qh[t * dkh + i] = q(t, head * dkh + i);
        kh[t * dkh + i] = k(t, head * dkh + i);
        ah[t * dkh + i] = alpha(t, head * dkh + i);
      }
      for (std::int64_t j = 0; j < dvh; ++j) {
        vh[t * dvh + j] = v(t, head * dvh + j);
        bh[t * dvh + j] = beta(t, head * dvh + j);
      }
    }
    double* s = state.s[static_cast<std::size_t>(head)].mutable_data();
    if (mode.kind == GLAMode::Kind::recurrent)
      kernels::gla_recurrent<double>(qh.data(), kh.data(), vh.data(), ah.data(), bh.data(), l, dkh, dvh,
                                     oh.data(), s);
    else
      kernels::gla_chunked<double>(qh.data(), kh.data(), vh.data(), ah.data(), bh.data(), l, dkh, dvh,
                                   mode.chunk, oh.data(), s);
    for (std::int64_t t = 0; t < l; ++t)
      for (std::int64_t j = 0; j < dvh; ++j) o.set(t, head * dvh + j, oh[t * dvh + j]);
  }
  for (const auto& s : state.s) detail::require_no_nan(s, "gla_forward state");
  flops::add(4 * l * dkh * dvh * h);
  detail::require_no_nan(o, "gla_forward scan");
  return gla_output(o, x, p);
}

// ============================================================================
// Differentiable cell
// ============================================================================

namespace ad {

/// Fused multi-head gated scan with hand-derived reverse pass (BPTT).
/// Forward may run the chunked kernel; the outputs are identical.
inline Var gla_scan_gated(Var q, Var k, Var v, Var alpha, Var beta, std::int64_t heads,
                          GLAMode mode = GLAMode::recurrent()) {
  Tensor qv = q.value(), kv = k.value(), vv = v.value(), av = alpha.value(), bv = beta.value();
  std::int64_t l = qv.extent(0), dk = qv.extent(1), dv = vv.extent(1);
  if (dk % heads != 0 || dv % heads != 0) throw ConfigError("head split must be even");
  std::int64_t dkh = dk / heads, dvh = dv / heads;

  Tensor out({l, dv});
  {
    std::vector<double> state(static_cast<std::size_t>(dkh * dvh));
    std::vector<double> qh(static_cast<std::size_t>(l * dkh)), kh(qh.size()), ah(qh.size());
    std::vector<double> vh(static_cast<std::size_t>(l * dvh)), bh(vh.size()), oh(vh.size());
    for (std::int64_t head = 0; head < heads; ++head) {
      for (std::int64_t t = 0; t < l; ++t) {
        for (std::int64_t i = 0; i < dkh; ++i) {
          qh[t * dkh + i] = qv(t, head * dkh + i);
          kh[t * dkh + i] = kv(t, head * dkh + i);
          ah[t * dkh + i] = av(t, head * dkh + i);
        }
        for (std::int64_t j = 0; j < dvh; ++j) {
          vh[t * dvh + j] = vv(t, head * dvh + j);
          bh[t * dvh + j] = bv(t, head * dvh + j);
        }
      }
      std::fill(state.begin(), state.end(), 0.0);
      if (mode.kind == GLAMode::Kind::recurrent)
        kernels::gla_recurrent<double>(qh.data(), kh.data(), vh.data(), ah.data(), bh.data(), l, dkh, dvh,
                                       oh.data(), state.data());
      else
        kernels::gla_chunked<double>(qh.data(), kh.data(), vh.data(), ah.data(), bh.data(), l, dkh, dvh,
                                     mode.chunk, oh.data(), state.data());
      for (std::int64_t t = 0; t < l; ++t)
        for (std::int64_t j = 0; j < dvh; ++j) out.set(t, head * dvh + j, oh[t * dvh + j]);
    }
  }
  flops::add(4 * l * dkh * dvh * heads);
  detail::require_no_nan(out, "gla_scan_gated");

  int pq = q.id, pk = k.id, pv = v.id, pa = alpha.id, pb = beta.id;
  auto vjp = [pq, pk, pv, pa, pb, qv, kv, vv, av, bv, l, dkh, dvh, heads](const Tensor& g, Tape& t) {
    Tensor gq = Tensor::zeros(qv.shape()), gk = Tensor::zeros(kv.shape()), gv = Tensor::zeros(vv.shape());
    Tensor ga = Tensor::zeros(av.shape()), gb = Tensor::zeros(bv.shape());
    std::int64_t dk = dkh * heads, dv = dvh * heads;
    // replay the recurrence per head, storing all states, then run BPTT
    std::vector<double> states(static_cast<std::size_t>((l + 1) * dkh * dvh));
    std::vector<double> ds(static_cast<std::size_t>(dkh * dvh));
    for (std::int64_t head = 0; head < heads; ++head) {
      auto A = [&](std::int64_t tt, std::int64_t i) { return av(tt, head * dkh + i); };
      auto B = [&](std::int64_t tt, std::int64_t j) { return bv(tt, head * dvh + j); };
      auto K = [&](std::int64_t tt, std::int64_t i) { return kv(tt, head * dkh + i); };
      auto V = [&](std::int64_t tt, std::int64_t j) { return vv(tt, head * dvh + j); };
      auto Q = [&](std::int64_t tt, std::int64_t i) { return qv(tt, head * dkh + i); };
      std::fill(states.begin(), states.begin() + dkh * dvh, 0.0);
      for (std::int64_t tt = 0; tt < l; ++tt) {
        const double* sp = states.data() + tt * dkh * dvh;
        double* sn = states.data() + (tt + 1) * dkh * dvh;
        for (std::int64_t i = 0; i < dkh; ++i)
          for (std::int64_t j = 0; j < dvh; ++j)
            sn[i * dvh + j] = A(tt, i) * B(tt, j) * sp[i * dvh + j] + K(tt, i) * V(tt, j);
      }
      std::fill(ds.begin(), ds.end(), 0.0);
      for (std::int64_t tt = l - 1; tt >= 0; --tt) {
        const double* st = states.data() + (tt + 1) * dkh * dvh;
        const double* sprev = states.data() + tt * dkh * dvh;
        // O_t = Q_t S_t
        for (std::int64_t i = 0; i < dkh; ++i) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < dvh; ++j) {
            acc += g(tt, head * dvh + j) * st[i * dvh + j];
            ds[i * dvh + j] += Q(tt, i) * g(tt, head * dvh + j);
          }
          gq.mutable_data()[tt * dk + head * dkh + i] += acc;
        }
        // S_t = (a^T b) (.) S_{t-1} + K^T V
        for (std::int64_t i = 0; i < dkh; ++i) {
          double dk_acc = 0.0, da_acc = 0.0;
          for (std::int64_t j = 0; j < dvh; ++j) {
            double dsij = ds[i * dvh + j];
            dk_acc += dsij * V(tt, j);
            double dgij = dsij * sprev[i * dvh + j];
            da_acc += dgij * B(tt, j);
            gv.mutable_data()[tt * dv + head * dvh + j] += dsij * K(tt, i);
            gb.mutable_data()[tt * dv + head * dvh + j] += dgij * A(tt, i);
          }
          gk.mutable_data()[tt * dk + head * dkh + i] += dk_acc;
          ga.mutable_data()[tt * dk + head * dkh + i] += da_acc;
        }
        for (std::int64_t i = 0; i < dkh; ++i)
          for (std::int64_t j = 0; j < dvh; ++j) ds[i * dvh + j] *= A(tt, i) * B(tt, j);
      }
    }
    t.accumulate(pq, gq);
    t.accumulate(pk, gk);
    t.accumulate(pv, gv);
    t.accumulate(pa, ga);
    t.accumulate(pb, gb);
  };
  return q.tape->push_node(std::move(out), vjp);
}

struct GLAVarParams {
  Var w_q, w_k, w_v, w_alpha, b_alpha, w_beta, b_beta, w_r, b_r, w_o;
  double tau = 16.0;
  std::int64_t heads = 1;
};

inline GLAVarParams lift(Tape& tape, const GLAParams& p) {
  GLAVarParams v;
  v.w_q = tape.leaf(p.w_q);
  v.w_k = tape.leaf(p.w_k);
  v.w_v = tape.leaf(p.w_v);
  v.w_alpha = tape.leaf(p.w_alpha);
  v.b_alpha = tape.leaf(p.b_alpha);
  v.w_beta = tape.leaf(p.w_beta);
  v.b_beta = tape.leaf(p.b_beta);
  v.w_r = tape.leaf(p.w_r);
  v.b_r = tape.leaf(p.b_r);
  v.w_o = tape.leaf(p.w_o);
  v.tau = p.tau;
  v.heads = p.heads;
  return v;
}

inline Var gla_forward(Var x, const GLAVarParams& p, GLAMode mode = GLAMode::recurrent()) {
  Var q = matmul(x, p.w_q);
  Var k = matmul(x, p.w_k);
  Var v = matmul(x, p.w_v);
  Var alpha = pow_scalar(sigmoid(add_row(matmul(x, p.w_alpha), p.b_alpha)), 1.0 / p.tau);
  Var beta = pow_scalar(sigmoid(add_row(matmul(x, p.w_beta), p.b_beta)), 1.0 / p.tau);
  Var o = gla_scan_gated(q, k, v, alpha, beta, p.heads, mode);
  Var r = silu(add_row(matmul(x, p.w_r), p.b_r));
  return matmul(mul(r, layernorm(o)), p.w_o);
}

}  // namespace ad

}  // namespace dig
