// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "dig/gla.hpp"
#include "dig/tensor.hpp"

namespace dig {

// ============================================================================
// Spatial Reorient & Enhancement Module pieces: identity-initialized 3x3
// depthwise convolution + block-wise scan direction control, plus the two
// multi-path scanning baselines it replaces.
// ============================================================================

struct DWConvKernel {
  Tensor weights;  // [D x 3 x 3], no bias

  std::int64_t channels() const { return weights.extent(0); }
};

/// Kernel center 1, surroundings 0, every channel.
inline DWConvKernel identity_init(std::int64_t channels) {
  if (channels < 1) throw ConfigError("identity_init needs channels >= 1");
  Tensor w = Tensor::zeros({channels, 3, 3});
  for (std::int64_t c = 0; c < channels; ++c) w.set(c, 1, 1, 1.0);
  return DWConvKernel{w};
}

/// Per-channel 3x3 convolution on a [n x n x D] grid, zero padding, stride 1.
inline Tensor dwconv2d(const Tensor& grid, const DWConvKernel& kernel) {
  if (grid.rank() != 3 || grid.extent(0) != grid.extent(1))
    throw ShapeError("dwconv2d expects a square [n x n x D] grid");
  std::int64_t n = grid.extent(0), d = grid.extent(2);
  if (kernel.weights.extent(0) != d) throw ShapeError("dwconv2d kernel channel mismatch");
  Tensor out({n, n, d});
  const Tensor& w = kernel.weights;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::int64_t u = 0; u < 3; ++u) {
          std::int64_t ii = i + u - 1;
          if (ii < 0 || ii >= n) continue;
          for (std::int64_t vv = 0; vv < 3; ++vv) {
            std::int64_t jj = j + vv - 1;
            if (jj < 0 || jj >= n) continue;
            acc += grid(ii, jj, c) * w(c, u, vv);
          }
        }
        out.set(i, j, c, acc);
      }
  flops::add(n * n * d * 9);
  return out;
}

/// Token-level convenience: [T x D] -> [T x D].
inline Tensor dwconv2d_tokens(const Tensor& tokens, const DWConvKernel& kernel) {
  return flatten_grid(dwconv2d(reshape2d(tokens), kernel));
}

// ============================================================================
// Reorientation schedule: even layer -> grid transpose, odd layer -> flip.
// Any 4 consecutive layers compose to the identity permutation.
// ============================================================================

inline std::vector<std::int64_t> identity_perm(std::int64_t n) {
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

inline std::vector<std::int64_t> inverse_perm(const std::vector<std::int64_t>& p) {
  std::vector<std::int64_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<std::int64_t>(i);
  return inv;
}

/// compose(p, q)[i] = p[q[i]]: gather by q after gathering by p.
inline std::vector<std::int64_t> compose_perm(const std::vector<std::int64_t>& p,
                                              const std::vector<std::int64_t>& q) {
  std::vector<std::int64_t> r(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) r[i] = p[static_cast<std::size_t>(q[i])];
  return r;
}

struct ReorientSchedule {
  std::int64_t num_layers = 0;

  enum class Op { transpose, flip };

  static Op op_for_layer(std::int64_t layer) { return layer % 2 == 0 ? Op::transpose : Op::flip; }

  /// Gather permutation applied by layer `layer` on T tokens.
  static std::vector<std::int64_t> layer_perm(std::int64_t layer, std::int64_t tokens) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(tokens));
    if (op_for_layer(layer) == Op::transpose) {
      std::int64_t n = grid_side(tokens);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) p[static_cast<std::size_t>(i * n + j)] = j * n + i;
    } else {
      for (std::int64_t t = 0; t < tokens; ++t) p[static_cast<std::size_t>(t)] = tokens - 1 - t;
    }
    return p;
  }

  /// Cumulative gather permutation after layers first..last inclusive.
  static std::vector<std::int64_t> cumulative_perm(std::int64_t first, std::int64_t last,
                                                   std::int64_t tokens) {
    auto cum = identity_perm(tokens);
    for (std::int64_t l = first; l <= last; ++l) cum = compose_perm(cum, layer_perm(l, tokens));
    return cum;
  }

  /// Cumulative permutation of layers 0..layer.
  static std::vector<std::int64_t> cumulative_perm(std::int64_t layer, std::int64_t tokens) {
    return cumulative_perm(0, layer, tokens);
  }
};

/// One reorientation step on [T x D] tokens: even layer transposes the token
/// grid then flattens; odd layer flattens then flips the sequence.
inline Tensor reorient(const Tensor& tokens, std::int64_t layer) {
  if (tokens.rank() != 2) throw ShapeError("reorient expects [T x D]");
  return permute_rows(tokens, ReorientSchedule::layer_perm(layer, tokens.extent(0)));
}

// ============================================================================
// Scan strategies. OpCounter tallies extra work relative to a single causal
// scan: each flip/transpose/reshape2d/flatten/elementwise-add is one matrix
// op; extra GLA invocations beyond the first are scan ops.
// ============================================================================

struct OpCounter {
  std::int64_t matrix_ops = 0;
  std::int64_t scan_ops = 0;

  void reset() { matrix_ops = 0; scan_ops = 0; }
};

/// GLA(X) + flip(GLA(flip(X))).
inline Tensor scan_bidirectional(const Tensor& x, const GLAParams& p,
                                 GLAMode mode = GLAMode::recurrent(), OpCounter* counter = nullptr) {
  OpCounter local;
  OpCounter& c = counter ? *counter : local;
  c.reset();
  Tensor z1 = gla_forward(x, p, mode);
  Tensor x2 = flip_seq(x);
  c.matrix_ops++;
  Tensor z2 = gla_forward(x2, p, mode);
  c.scan_ops++;
  Tensor z2to1 = flip_seq(z2);
  c.matrix_ops++;
  Tensor out = add(z1, z2to1);
  c.matrix_ops++;
  return out;
}

/// Sum of scans over the four grid reading orders, each mapped back to
/// row-major. The two transposed branches share one restoration pipeline.
inline Tensor scan_4directional(const Tensor& x, const GLAParams& p,
                                GLAMode mode = GLAMode::recurrent(), OpCounter* counter = nullptr) {
  OpCounter local;
  OpCounter& c = counter ? *counter : local;
  c.reset();
  grid_side(x.extent(0));

  Tensor z1 = gla_forward(x, p, mode);

  Tensor x2 = flip_seq(x);
  c.matrix_ops++;
  Tensor z2 = gla_forward(x2, p, mode);
  c.scan_ops++;
  Tensor z2to1 = flip_seq(z2);
  c.matrix_ops++;

  auto transpose_tokens = [&c](const Tensor& t) {
    Tensor grid = reshape2d(t);
    c.matrix_ops++;
    Tensor tr = transpose_grid(grid);
    c.matrix_ops++;
    Tensor flat = flatten_grid(tr);
    c.matrix_ops++;
    return flat;
  };

  Tensor x3 = transpose_tokens(x);
  Tensor z3 = gla_forward(x3, p, mode);
  c.scan_ops++;
  Tensor x4 = flip_seq(x3);
  c.matrix_ops++;
  Tensor z4 = gla_forward(x4, p, mode);
  c.scan_ops++;
  Tensor z4f = flip_seq(z4);
  c.matrix_ops++;
  Tensor inner = add(z3, z4f);
  c.matrix_ops++;
  Tensor restored = transpose_tokens(inner);

  Tensor out = add(z1, z2to1);
  c.matrix_ops++;
  out = add(out, restored);
  c.matrix_ops++;
  return out;
}

/// Single causal scan followed by one reorientation (transpose+flatten on
/// even layers, flatten+flip on odd layers).
inline Tensor scan_block(const Tensor& x, const GLAParams& p, std::int64_t layer,
                         GLAMode mode = GLAMode::recurrent(), OpCounter* counter = nullptr) {
  OpCounter local;
  OpCounter& c = counter ? *counter : local;
  c.reset();
  Tensor z = gla_forward(x, p, mode);
  Tensor out = permute_rows(z, ReorientSchedule::layer_perm(layer, z.extent(0)));
  c.matrix_ops += 2;
  return out;
}

// ============================================================================
// Differentiable depthwise convolution
// ============================================================================

namespace ad {

/// [T x D] tokens through the per-channel 3x3 conv (zero pad, stride 1).
inline Var dwconv2d_tokens(Var tokens, Var kernel) {
  Tensor xv = tokens.value(), wv = kernel.value();
  std::int64_t t_count = xv.extent(0), d = xv.extent(1);
  std::int64_t n = grid_side(t_count);
  if (wv.rank() != 3 || wv.extent(0) != d || wv.extent(1) != 3 || wv.extent(2) != 3)
    throw ShapeError("dwconv2d kernel must be [D x 3 x 3]");

  Tensor out({t_count, d});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::int64_t u = 0; u < 3; ++u) {
          std::int64_t ii = i + u - 1;
          if (ii < 0 || ii >= n) continue;
          for (std::int64_t vv = 0; vv < 3; ++vv) {
            std::int64_t jj = j + vv - 1;
            if (jj < 0 || jj >= n) continue;
            acc += xv((ii * n + jj), c) * wv(c, u, vv);
          }
        }
        out.set(i * n + j, c, acc);
      }
  flops::add(t_count * d * 9);

  int px = tokens.id, pw = kernel.id;
  auto vjp = [px, pw, xv, wv, n, d](const Tensor& g, Tape& t) {
    Tensor gx = Tensor::zeros(xv.shape());
    Tensor gw = Tensor::zeros(wv.shape());
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        for (std::int64_t u = 0; u < 3; ++u) {
          std::int64_t ii = i + u - 1;
          if (ii < 0 || ii >= n) continue;
          for (std::int64_t vv = 0; vv < 3; ++vv) {
            std::int64_t jj = j + vv - 1;
            if (jj < 0 || jj >= n) continue;
            for (std::int64_t c = 0; c < d; ++c) {
              double go = g(i * n + j, c);
              gx.mutable_data()[(ii * n + jj) * d + c] += go * wv(c, u, vv);
              gw.mutable_data()[(c * 3 + u) * 3 + vv] += go * xv(ii * n + jj, c);
            }
          }
        }
    t.accumulate(px, gx);
    t.accumulate(pw, gw);
  };
  return tokens.tape->push_node(std::move(out), vjp);
}

/// Reorientation as a differentiable row permutation.
inline Var reorient(Var tokens, std::int64_t layer) {
  return permute_rows(tokens, ReorientSchedule::layer_perm(layer, tokens.value().extent(0)));
}

}  // namespace ad

}  // namespace dig
