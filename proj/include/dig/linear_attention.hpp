// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "dig/tensor.hpp"

namespace dig {

// ============================================================================
// Plain linear attention (normalized and simplified) used as oracles and as
// the gate-free degenerate case of the gated cell.
// ============================================================================

enum class FeatureMap { identity, elu_plus_one };

inline double apply_feature(FeatureMap kind, double x) {
  switch (kind) {
    case FeatureMap::identity:
      return x;
    case FeatureMap::elu_plus_one:
      return x > 0.0 ? x + 1.0 : std::exp(x);
  }
  return x;
}

inline Tensor apply_feature_map(FeatureMap kind, const Tensor& x) {
  if (kind == FeatureMap::identity) return x;
  return map(x, [kind](double v) { return apply_feature(kind, v); });
}

inline constexpr double kDegenerateNormalizer = 1e-12;

/// Streaming state: S = sum of phi(K_i)^T V_i, z = sum of phi(K_i)^T.
struct LinAttnState {
  Tensor S;  // [d x d]
  Tensor z;  // [d x 1]

  explicit LinAttnState(std::int64_t d) : S(Tensor::zeros({d, d})), z(Tensor::zeros({d, 1})) {}

  /// Absorb one token; returns the normalized output row O_t [1 x d].
  Tensor step(const Tensor& q_row, const Tensor& k_row, const Tensor& v_row, FeatureMap phi) {
    std::int64_t d = S.extent(0);
    Tensor pk = apply_feature_map(phi, k_row);
    Tensor pq = apply_feature_map(phi, q_row);
    for (std::int64_t a = 0; a < d; ++a) {
      z.mutable_data()[a] += pk.at(a);
      for (std::int64_t b = 0; b < d; ++b) S.mutable_data()[a * d + b] += pk.at(a) * v_row.at(b);
    }
    double denom = 0.0;
    for (std::int64_t a = 0; a < d; ++a) denom += pq.at(a) * z.at(a);
    if (std::abs(denom) < kDegenerateNormalizer)
      throw NumericError("degenerate normalizer in linear attention");
    Tensor out({1, d});
    for (std::int64_t b = 0; b < d; ++b) {
      double acc = 0.0;
      for (std::int64_t a = 0; a < d; ++a) acc += pq.at(a) * S(a, b);
      out.set(0, b, acc / denom);
    }
    return out;
  }
};

namespace detail {

inline void require_lxd(const Tensor& q, const Tensor& k, const Tensor& v, const char* name) {
  if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
    throw ShapeError(std::string(name) + ": Q, K, V must share shape [L x d]");
}

}  // namespace detail

inline Tensor lin_attn_normalized_streaming(const Tensor& q, const Tensor& k, const Tensor& v,
                                            FeatureMap phi = FeatureMap::identity) {
  detail::require_lxd(q, k, v, "lin_attn_normalized");
  std::int64_t l = q.extent(0), d = q.extent(1);
  LinAttnState st(d);
  Tensor out({l, d});
  for (std::int64_t t = 0; t < l; ++t) {
    Tensor o = st.step(slice_rows(q, t, t + 1), slice_rows(k, t, t + 1), slice_rows(v, t, t + 1), phi);
    std::copy(o.data(), o.data() + d, out.mutable_data() + t * d);
  }
  return out;
}

/// Batch form: prefix sums of phi(K)^T V and phi(K)^T, normalized per token.
inline Tensor lin_attn_normalized_batch(const Tensor& q, const Tensor& k, const Tensor& v,
                                        FeatureMap phi = FeatureMap::identity) {
  detail::require_lxd(q, k, v, "lin_attn_normalized");
  std::int64_t l = q.extent(0), d = q.extent(1);
  Tensor pq = apply_feature_map(phi, q);
  Tensor pk = apply_feature_map(phi, k);
  Tensor s = Tensor::zeros({d, d});
  Tensor z = Tensor::zeros({d, 1});
  Tensor out({l, d});
  for (std::int64_t t = 0; t < l; ++t) {
    for (std::int64_t a = 0; a < d; ++a) {
      z.mutable_data()[a] += pk(t, a);
      for (std::int64_t b = 0; b < d; ++b) s.mutable_data()[a * d + b] += pk(t, a) * v(t, b);
    }
    double denom = 0.0;
    for (std::int64_t a = 0; a < d; ++a) denom += pq(t, a) * z.at(a);
    if (std::abs(denom) < kDegenerateNormalizer)
      throw NumericError("degenerate normalizer in linear attention");
    for (std::int64_t b = 0; b < d; ++b) {
      double acc = 0.0;
      for (std::int64_t a = 0; a < d; ++a) acc += pq(t, a) * s(a, b);
      out.set(t, b, acc / denom);
    }
  }
  return out;
}

/// Normalized linear attention; both routes computed and cross-checked.
inline Tensor lin_attn_normalized(const Tensor& q, const Tensor& k, const Tensor& v,
                                  FeatureMap phi = FeatureMap::identity) {
  Tensor a = lin_attn_normalized_batch(q, k, v, phi);
  Tensor b = lin_attn_normalized_streaming(q, k, v, phi);
  if (max_abs_diff(a, b) > 1e-9)
    throw NumericError("linear attention batch/streaming routes diverged");
  return a;
}

/// Simplified form: S_t = S_{t-1} + K_t^T V_t, O_t = Q_t S_t.
inline Tensor lin_attn_simple(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::require_lxd(q, k, v, "lin_attn_simple");
  std::int64_t l = q.extent(0), d = q.extent(1);
  Tensor s = Tensor::zeros({d, d});
  Tensor out({l, d});
  for (std::int64_t t = 0; t < l; ++t) {
    for (std::int64_t a = 0; a < d; ++a)
      for (std::int64_t b = 0; b < d; ++b) s.mutable_data()[a * d + b] += k(t, a) * v(t, b);
    for (std::int64_t b = 0; b < d; ++b) {
      double acc = 0.0;
      for (std::int64_t a = 0; a < d; ++a) acc += q(t, a) * s(a, b);
      out.set(t, b, acc);
    }
  }
  return out;
}

/// Quadratic scaled dot-product baseline, optional causal mask.
inline Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal = false) {
  detail::require_lxd(q, k, v, "softmax_attention");
  std::int64_t l = q.extent(0), d = q.extent(1);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor scores = scale(matmul(q, transpose2d(k)), inv_sqrt_d);
  if (causal) {
    for (std::int64_t i = 0; i < l; ++i)
      for (std::int64_t j = i + 1; j < l; ++j) scores.set(i, j, -1e300);
  }
  return matmul(softmax_rows(scores), v);
}

}  // namespace dig
