// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dig/gla.hpp"
#include "dig/srem.hpp"

namespace dig {

// ============================================================================
// One DiG block: adaLN parameter regression, modulated GLA, modulated FFN,
// then SREM (identity-initialized depthwise conv + one reorientation).
// ============================================================================

enum class SremPosition { after_ffn, before_attn, between_attn_ffn };

struct FFNParams {
  Tensor w1, b1;  // [D x H], [1 x H]
  Tensor w2, b2;  // [H x D], [1 x D]
};

struct AdaLNParams {
  Tensor w;  // [cond_dim x 6D], zero-initialized
  Tensor b;  // [1 x 6D], zero-initialized
};

struct DiGBlockParams {
  AdaLNParams adaln;
  GLAParams gla;
  FFNParams ffn;
  DWConvKernel dwconv;

  std::int64_t width() const { return gla.d(); }

  static DiGBlockParams init(Rng& rng, std::int64_t d, std::int64_t dk, std::int64_t dv,
                             std::int64_t heads, double tau, std::int64_t cond_dim,
                             std::int64_t ffn_mult = 4) {
    DiGBlockParams p;
    p.adaln.w = Tensor::zeros({cond_dim, 6 * d});
    p.adaln.b = Tensor::zeros({1, 6 * d});
    p.gla = GLAParams::init(rng, d, dk, dv, heads, tau);
    std::int64_t h = ffn_mult * d;
    p.ffn.w1 = Tensor::randn(rng, {d, h}, 1.0 / std::sqrt(static_cast<double>(d)));
    p.ffn.b1 = Tensor::zeros({1, h});
    p.ffn.w2 = Tensor::randn(rng, {h, d}, 1.0 / std::sqrt(static_cast<double>(h)));
    p.ffn.b2 = Tensor::zeros({1, d});
    p.dwconv = identity_init(d);
    return p;
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".adaln.w", &adaln.w);
    out.emplace_back(prefix + ".adaln.b", &adaln.b);
    out.emplace_back(prefix + ".gla.w_q", &gla.w_q);
    out.emplace_back(prefix + ".gla.w_k", &gla.w_k);
    out.emplace_back(prefix + ".gla.w_v", &gla.w_v);
    out.emplace_back(prefix + ".gla.w_alpha", &gla.w_alpha);
    out.emplace_back(prefix + ".gla.b_alpha", &gla.b_alpha);
    out.emplace_back(prefix + ".gla.w_beta", &gla.w_beta);
    out.emplace_back(prefix + ".gla.b_beta", &gla.b_beta);
    out.emplace_back(prefix + ".gla.w_r", &gla.w_r);
    out.emplace_back(prefix + ".gla.b_r", &gla.b_r);
    out.emplace_back(prefix + ".gla.w_o", &gla.w_o);
    out.emplace_back(prefix + ".ffn.w1", &ffn.w1);
    out.emplace_back(prefix + ".ffn.b1", &ffn.b1);
    out.emplace_back(prefix + ".ffn.w2", &ffn.w2);
    out.emplace_back(prefix + ".ffn.b2", &ffn.b2);
    out.emplace_back(prefix + ".dwconv", &dwconv.weights);
  }
};

/// Six regressed modulation vectors [1 x D]: a1, b1, g1, a2, b2, g2.
inline std::array<Tensor, 6> adaln_modulation(const Tensor& t_emb, const Tensor& y_emb,
                                              const AdaLNParams& p) {
  Tensor cond = add(t_emb, y_emb);
  Tensor out = add_row(matmul(silu(cond), p.w), p.b);
  std::int64_t d = out.extent(1) / 6;
  std::array<Tensor, 6> parts;
  for (int i = 0; i < 6; ++i) parts[static_cast<std::size_t>(i)] = slice_cols(out, i * d, (i + 1) * d);
  return parts;
}

namespace ad {

struct DiGBlockVarParams {
  Var adaln_w, adaln_b;
  GLAVarParams gla;
  Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Var dwconv;
};

inline DiGBlockVarParams lift(Tape& tape, const DiGBlockParams& p) {
  DiGBlockVarParams v;
  v.adaln_w = tape.leaf(p.adaln.w);
  v.adaln_b = tape.leaf(p.adaln.b);
  v.gla = lift(tape, p.gla);
  v.ffn_w1 = tape.leaf(p.ffn.w1);
  v.ffn_b1 = tape.leaf(p.ffn.b1);
  v.ffn_w2 = tape.leaf(p.ffn.w2);
  v.ffn_b2 = tape.leaf(p.ffn.b2);
  v.dwconv = tape.leaf(p.dwconv.weights);
  return v;
}

inline std::array<Var, 6> adaln_modulation(Var t_emb, Var y_emb, Var w, Var b) {
  Var cond = add(t_emb, y_emb);
  Var out = add_row(matmul(silu(cond), w), b);
  std::int64_t d = out.value().extent(1) / 6;
  std::array<Var, 6> parts;
  for (int i = 0; i < 6; ++i) parts[static_cast<std::size_t>(i)] = slice_cols(out, i * d, (i + 1) * d);
  return parts;
}

struct BlockOptions {
  SremPosition srem_pos = SremPosition::after_ffn;
  bool bidirectional_mixer = false;  // ablation: GLA replaced by a two-way scan
  GLAMode mode = GLAMode::recurrent();
};

inline Var dig_block_forward(Var z, Var t_emb, Var y_emb, std::int64_t layer,
                             const DiGBlockVarParams& p, const BlockOptions& opt = {}) {
  auto mods = adaln_modulation(t_emb, y_emb, p.adaln_w, p.adaln_b);
  Var a1 = mods[0], b1 = mods[1], g1 = mods[2];
  Var a2 = mods[3], b2 = mods[4], g2 = mods[5];

  auto mixer = [&](Var in) {
    if (!opt.bidirectional_mixer) return gla_forward(in, p.gla, opt.mode);
    Var fwd = gla_forward(in, p.gla, opt.mode);
    Var bwd = flip_seq(gla_forward(flip_seq(in), p.gla, opt.mode));
    return add(fwd, bwd);
  };
  auto attn_branch = [&](Var in) {
    Var moded = add_row(mul_row(layernorm(in), add_scalar(g1, 1.0)), b1);
    return add(in, mul_row(mixer(moded), a1));
  };
  auto ffn_branch = [&](Var in) {
    Var moded = add_row(mul_row(layernorm(in), add_scalar(g2, 1.0)), b2);
    Var hcol = gelu(add_row(matmul(moded, p.ffn_w1), p.ffn_b1));
    Var out = add_row(matmul(hcol, p.ffn_w2), p.ffn_b2);
    return add(in, mul_row(out, a2));
  };
  auto srem = [&](Var in) { return reorient(dwconv2d_tokens(in, p.dwconv), layer); };

  switch (opt.srem_pos) {
    case SremPosition::after_ffn:
      return srem(ffn_branch(attn_branch(z)));
    case SremPosition::before_attn:
      return ffn_branch(attn_branch(srem(z)));
    case SremPosition::between_attn_ffn:
      return ffn_branch(srem(attn_branch(z)));
  }
  throw ConfigError("unknown SREM position");
}

}  // namespace ad

/// Convenience non-differentiating wrapper.
inline Tensor dig_block_forward(const Tensor& z, const Tensor& t_emb, const Tensor& y_emb,
                                std::int64_t layer, const DiGBlockParams& p,
                                const ad::BlockOptions& opt = {}) {
  Tape tape;
  auto lifted = ad::lift(tape, p);
  Var out = ad::dig_block_forward(tape.leaf(z), tape.leaf(t_emb), tape.leaf(y_emb), layer, lifted, opt);
  return out.value();
}

}  // namespace dig
