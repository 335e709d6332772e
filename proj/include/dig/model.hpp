// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dig/dig_block.hpp"

namespace dig {

// ============================================================================
// Backbone assembly: patchify, positional + conditioning embeddings, block
// stack (plain or U-shaped), final head. Configuration presets.
// ============================================================================

struct ModelConfig {
  enum class Variant { plain, ushape };

  std::string name = "custom";
  Variant variant = Variant::plain;
  std::int64_t layers = 2;    // N (total blocks; for ushape must equal sum of stage depths)
  std::int64_t hidden = 16;   // D (stage-0 width for ushape)
  std::int64_t patch = 2;     // P
  std::int64_t image = 8;     // I (latent spatial side)
  std::int64_t channels = 1;  // C
  std::int64_t num_classes = 2;
  std::int64_t heads = 0;  // 0 -> width/64, at least 1
  double expand_k = 0.5;
  double expand_v = 1.0;
  double tau = 16.0;
  std::int64_t ffn_mult = 4;
  SremPosition srem_pos = SremPosition::after_ffn;
  bool bidirectional_mixer = false;
  GLAMode mode = GLAMode::recurrent();

  // ushape
  std::vector<std::int64_t> stage_widths;  // one per resolution stage
  std::vector<std::int64_t> stage_depths;  // 2*stages-1 segments (encoder, middle, decoder)
  bool shortcuts = true;

  // DiT baseline used for the flops ratio; 0 means same layers/hidden/patch
  std::int64_t dit_layers = 0, dit_hidden = 0, dit_patch = 0;

  std::int64_t grid() const { return image / patch; }
  std::int64_t tokens() const { return grid() * grid(); }
  std::int64_t patch_dim() const { return patch * patch * channels; }

  std::int64_t heads_for(std::int64_t width) const {
    if (heads > 0) return heads;
    return std::max<std::int64_t>(1, width / 64);
  }
  std::int64_t dk_for(std::int64_t width) const {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(width * expand_k));
  }
  std::int64_t dv_for(std::int64_t width) const {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(width * expand_v));
  }

  void validate() const {
    if (layers < 1 || hidden < 1 || patch < 1 || image < 1 || channels < 1 || num_classes < 1)
      throw ConfigError("model dimensions must be positive");
    if (image % patch != 0) throw ConfigError("latent size must be divisible by the patch size");
    if (hidden % 2 != 0) throw ConfigError("hidden size must be even for frequency embeddings");
    if (hidden % 4 != 0)
      throw ConfigError("hidden size must be divisible by 4 (sin/cos pairs on two axes)");
    auto check_width = [this](std::int64_t w) {
      std::int64_t h = heads_for(w);
      if (dk_for(w) % h != 0 || dv_for(w) % h != 0)
        throw ConfigError("key/value widths must divide across heads at width " + std::to_string(w));
    };
    if (variant == Variant::plain) {
      check_width(hidden);
    } else {
      if (stage_widths.size() < 2) throw ConfigError("ushape needs at least 2 stage widths");
      if (stage_depths.size() != 2 * stage_widths.size() - 1)
        throw ConfigError("ushape needs 2*stages-1 segment depths");
      if (stage_widths[0] != hidden) throw ConfigError("ushape stage 0 width must equal hidden");
      std::int64_t total = 0;
      for (auto d : stage_depths) total += d;
      if (total != layers) throw ConfigError("ushape segment depths must sum to layers");
      std::int64_t side = grid();
      for (std::size_t s = 1; s < stage_widths.size(); ++s) {
        if (side % 2 != 0) throw ConfigError("grid side not divisible by total downsampling");
        side /= 2;
      }
      for (auto w : stage_widths) check_width(w);
    }
  }
};

// ============================================================================
// Embeddings
// ============================================================================

/// 2-D sin/cos grid embedding over the sqrt(T) x sqrt(T) grid; deterministic.
inline Tensor pos_embed_frequency(std::int64_t tokens, std::int64_t dim) {
  if (dim % 2 != 0) throw ConfigError("positional embedding dimension must be even");
  if (dim % 4 != 0) throw ConfigError("positional embedding dimension must be divisible by 4");
  std::int64_t side = grid_side(tokens);
  std::int64_t half = dim / 2;     // per axis
  std::int64_t quarter = dim / 4;  // frequencies per axis
  Tensor out({tokens, dim});
  for (std::int64_t gi = 0; gi < side; ++gi)
    for (std::int64_t gj = 0; gj < side; ++gj) {
      std::int64_t t = gi * side + gj;
      for (std::int64_t k = 0; k < quarter; ++k) {
        double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
        out.set(t, k, std::sin(gi * omega));
        out.set(t, quarter + k, std::cos(gi * omega));
        out.set(t, half + k, std::sin(gj * omega));
        out.set(t, half + quarter + k, std::cos(gj * omega));
      }
    }
  return out;
}

/// Sinusoidal frequency vector for a timestep, [1 x dim].
inline Tensor timestep_freq(std::int64_t t, std::int64_t dim) {
  if (t < 0) throw std::out_of_range("timestep must be non-negative");
  if (dim % 2 != 0) throw ConfigError("timestep embedding dimension must be even");
  std::int64_t half = dim / 2;
  Tensor out({1, dim});
  for (std::int64_t k = 0; k < half; ++k) {
    double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
    out.set(0, k, std::cos(t * freq));
    out.set(0, half + k, std::sin(t * freq));
  }
  return out;
}

struct TimestepEmbedParams {
  Tensor w1, b1, w2, b2;  // [D x D], [1 x D] each
};

/// Frequency vector through the 2-layer MLP, [1 x D].
inline Tensor embed_timestep(std::int64_t t, const TimestepEmbedParams& p) {
  std::int64_t d = p.w1.extent(0);
  Tensor h = silu(add_row(matmul(timestep_freq(t, d), p.w1), p.b1));
  return add_row(matmul(h, p.w2), p.b2);
}

/// Table lookup, [1 x D].
inline Tensor embed_label(std::int64_t y, const Tensor& table) {
  if (y < 0 || y >= table.extent(0)) throw std::out_of_range("label index out of range");
  return slice_rows(table, y, y + 1);
}

// ============================================================================
// Patchify index maps
// ============================================================================

/// map[t * P^2C + f] = flat index into the [C x I x I] latent.
inline std::vector<std::int64_t> patchify_map(std::int64_t image, std::int64_t patch, std::int64_t channels) {
  std::int64_t side = image / patch;
  std::vector<std::int64_t> m(static_cast<std::size_t>(side * side * patch * patch * channels));
  std::size_t idx = 0;
  for (std::int64_t gi = 0; gi < side; ++gi)
    for (std::int64_t gj = 0; gj < side; ++gj)
      for (std::int64_t pi = 0; pi < patch; ++pi)
        for (std::int64_t pj = 0; pj < patch; ++pj)
          for (std::int64_t c = 0; c < channels; ++c)
            m[idx++] = c * image * image + (gi * patch + pi) * image + (gj * patch + pj);
  return m;
}

/// map[(c,i,j)] = flat index into the [T x P^2C] token matrix.
inline std::vector<std::int64_t> unpatchify_map(std::int64_t image, std::int64_t patch, std::int64_t channels) {
  std::int64_t side = image / patch;
  std::int64_t pd = patch * patch * channels;
  std::vector<std::int64_t> m(static_cast<std::size_t>(channels * image * image));
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < image; ++i)
      for (std::int64_t j = 0; j < image; ++j) {
        std::int64_t t = (i / patch) * side + (j / patch);
        std::int64_t f = ((i % patch) * patch + (j % patch)) * channels + c;
        m[static_cast<std::size_t>(c * image * image + i * image + j)] = t * pd + f;
      }
  return m;
}

/// Raw patchify: [C x I x I] -> [T x D] projected tokens plus positions.
inline Tensor patchify(const Tensor& z, const Tensor& w, const Tensor& e_pos) {
  if (z.rank() != 3) throw ShapeError("patchify expects [C x I x I]");
  std::int64_t c = z.extent(0), image = z.extent(1);
  if (z.extent(2) != image) throw ShapeError("patchify expects a square latent");
  std::int64_t pd = w.extent(0);
  std::int64_t patch = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(pd / c))));
  if (patch * patch * c != pd) throw ShapeError("projection rows must equal P^2*C");
  if (image % patch != 0) throw ShapeError("latent size not divisible by patch size");
  auto m = patchify_map(image, patch, c);
  std::int64_t t = (image / patch) * (image / patch);
  Tensor tok({t, pd});
  for (std::size_t i = 0; i < m.size(); ++i) tok.mutable_data()[i] = z.at(m[i]);
  return add(matmul(tok, w), e_pos);
}

// ============================================================================
// Model parameters
// ============================================================================

struct DiGModelParams {
  Tensor patch_w;  // [P^2C x D]
  Tensor pos;      // [T x D], frequency-based, not learned
  TimestepEmbedParams t_mlp;
  Tensor label_table;  // [classes x D]
  std::vector<DiGBlockParams> blocks;
  std::vector<Tensor> down_w;  // ushape transitions [4*w_in x w_out]
  std::vector<Tensor> up_w;    // ushape transitions [w_in x 4*w_out]
  Tensor head_w, head_b;       // [w0 x 2*P^2C], zero-initialized
};

struct SegmentPlan {
  std::int64_t width = 0, tokens = 0, depth = 0, stage = 0;
};

inline std::vector<SegmentPlan> ushape_plan(const ModelConfig& cfg) {
  std::int64_t stages = static_cast<std::int64_t>(cfg.stage_widths.size());
  std::vector<SegmentPlan> plan;
  for (std::int64_t seg = 0; seg < 2 * stages - 1; ++seg) {
    std::int64_t s = seg < stages ? seg : 2 * stages - 2 - seg;
    SegmentPlan sp;
    sp.stage = s;
    sp.width = cfg.stage_widths[static_cast<std::size_t>(s)];
    sp.tokens = cfg.tokens() >> (2 * s);
    sp.depth = cfg.stage_depths[static_cast<std::size_t>(seg)];
    plan.push_back(sp);
  }
  return plan;
}

class DiGModel {
 public:
  ModelConfig cfg;
  DiGModelParams params;

  static DiGModel create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DiGModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, 0xd16));
    std::int64_t d0 = cfg.hidden;
    m.params.patch_w =
        Tensor::randn(rng, {cfg.patch_dim(), d0}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
    m.params.pos = pos_embed_frequency(cfg.tokens(), d0);
    double s0 = 1.0 / std::sqrt(static_cast<double>(d0));
    m.params.t_mlp.w1 = Tensor::randn(rng, {d0, d0}, s0);
    m.params.t_mlp.b1 = Tensor::zeros({1, d0});
    m.params.t_mlp.w2 = Tensor::randn(rng, {d0, d0}, s0);
    m.params.t_mlp.b2 = Tensor::zeros({1, d0});
    m.params.label_table = Tensor::randn(rng, {cfg.num_classes, d0}, 0.02);

    if (cfg.variant == ModelConfig::Variant::plain) {
      for (std::int64_t l = 0; l < cfg.layers; ++l)
        m.params.blocks.push_back(DiGBlockParams::init(rng, d0, cfg.dk_for(d0), cfg.dv_for(d0),
                                                       cfg.heads_for(d0), cfg.tau, d0, cfg.ffn_mult));
    } else {
      auto plan = ushape_plan(cfg);
      std::int64_t stages = static_cast<std::int64_t>(cfg.stage_widths.size());
      for (const auto& seg : plan)
        for (std::int64_t l = 0; l < seg.depth; ++l)
          m.params.blocks.push_back(DiGBlockParams::init(rng, seg.width, cfg.dk_for(seg.width),
                                                         cfg.dv_for(seg.width), cfg.heads_for(seg.width),
                                                         cfg.tau, d0, cfg.ffn_mult));
      for (std::int64_t s = 0; s + 1 < stages; ++s) {
        std::int64_t wi = cfg.stage_widths[static_cast<std::size_t>(s)];
        std::int64_t wo = cfg.stage_widths[static_cast<std::size_t>(s + 1)];
        m.params.down_w.push_back(Tensor::randn(rng, {4 * wi, wo}, 1.0 / std::sqrt(4.0 * wi)));
      }
      for (std::int64_t s = stages - 1; s > 0; --s) {
        std::int64_t wi = cfg.stage_widths[static_cast<std::size_t>(s)];
        std::int64_t wo = cfg.stage_widths[static_cast<std::size_t>(s - 1)];
        m.params.up_w.push_back(Tensor::randn(rng, {wi, 4 * wo}, 1.0 / std::sqrt(static_cast<double>(wi))));
      }
    }
    m.params.head_w = Tensor::zeros({d0, 2 * cfg.patch_dim()});
    m.params.head_b = Tensor::zeros({1, 2 * cfg.patch_dim()});
    return m;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("patch_w", &params.patch_w);
    out.emplace_back("t_mlp.w1", &params.t_mlp.w1);
    out.emplace_back("t_mlp.b1", &params.t_mlp.b1);
    out.emplace_back("t_mlp.w2", &params.t_mlp.w2);
    out.emplace_back("t_mlp.b2", &params.t_mlp.b2);
    out.emplace_back("label_table", &params.label_table);
    for (std::size_t i = 0; i < params.blocks.size(); ++i)
      params.blocks[i].collect("block" + std::to_string(i), out);
    for (std::size_t i = 0; i < params.down_w.size(); ++i)
      out.emplace_back("down" + std::to_string(i), &params.down_w[i]);
    for (std::size_t i = 0; i < params.up_w.size(); ++i)
      out.emplace_back("up" + std::to_string(i), &params.up_w[i]);
    out.emplace_back("head_w", &params.head_w);
    out.emplace_back("head_b", &params.head_b);
    return out;
  }

  struct Lifted {
    Var patch_w;
    Var t_w1, t_b1, t_w2, t_b2;
    Var label_table;
    std::vector<ad::DiGBlockVarParams> blocks;
    std::vector<Var> down_w, up_w;
    Var head_w, head_b;

    /// Leaves in the same order as DiGModel::named_params().
    std::vector<Var> param_vars() const {
      std::vector<Var> out{patch_w, t_w1, t_b1, t_w2, t_b2, label_table};
      for (const auto& b : blocks) {
        out.push_back(b.adaln_w);
        out.push_back(b.adaln_b);
        out.push_back(b.gla.w_q);
        out.push_back(b.gla.w_k);
        out.push_back(b.gla.w_v);
        out.push_back(b.gla.w_alpha);
        out.push_back(b.gla.b_alpha);
        out.push_back(b.gla.w_beta);
        out.push_back(b.gla.b_beta);
        out.push_back(b.gla.w_r);
        out.push_back(b.gla.b_r);
        out.push_back(b.gla.w_o);
        out.push_back(b.ffn_w1);
        out.push_back(b.ffn_b1);
        out.push_back(b.ffn_w2);
        out.push_back(b.ffn_b2);
        out.push_back(b.dwconv);
      }
      for (const auto& w : down_w) out.push_back(w);
      for (const auto& w : up_w) out.push_back(w);
      out.push_back(head_w);
      out.push_back(head_b);
      return out;
    }
  };

  Lifted lift(Tape& tape) const {
    Lifted lf;
    lf.patch_w = tape.leaf(params.patch_w);
    lf.t_w1 = tape.leaf(params.t_mlp.w1);
    lf.t_b1 = tape.leaf(params.t_mlp.b1);
    lf.t_w2 = tape.leaf(params.t_mlp.w2);
    lf.t_b2 = tape.leaf(params.t_mlp.b2);
    lf.label_table = tape.leaf(params.label_table);
    for (const auto& b : params.blocks) lf.blocks.push_back(ad::lift(tape, b));
    for (const auto& w : params.down_w) lf.down_w.push_back(tape.leaf(w));
    for (const auto& w : params.up_w) lf.up_w.push_back(tape.leaf(w));
    lf.head_w = tape.leaf(params.head_w);
    lf.head_b = tape.leaf(params.head_b);
    return lf;
  }

  /// Differentiable forward: latent [C x I x I] -> (noise_pred, cov_raw), same shape.
  std::pair<Var, Var> forward_ad(Tape& tape, const Lifted& lf, Var x, std::int64_t t,
                                 std::int64_t y) const {
    if (x.value().rank() != 3 || x.value().extent(0) != cfg.channels || x.value().extent(1) != cfg.image ||
        x.value().extent(2) != cfg.image)
      throw ShapeError("model input must be [C x I x I]");
    std::int64_t d0 = cfg.hidden, pd = cfg.patch_dim(), tok = cfg.tokens();

    Var tokens = ad::gather_flat(x, patchify_map(cfg.image, cfg.patch, cfg.channels), {tok, pd});
    Var z = ad::add_const(ad::matmul(tokens, lf.patch_w), params.pos);

    Var th = ad::silu(ad::add_row(ad::matmul(tape.leaf(timestep_freq(t, d0)), lf.t_w1), lf.t_b1));
    Var t_emb = ad::add_row(ad::matmul(th, lf.t_w2), lf.t_b2);
    if (y < 0 || y >= cfg.num_classes) throw std::out_of_range("label index out of range");
    Var y_emb = ad::slice_rows(lf.label_table, y, y + 1);

    ad::BlockOptions opt;
    opt.srem_pos = cfg.srem_pos;
    opt.bidirectional_mixer = cfg.bidirectional_mixer;
    opt.mode = cfg.mode;

    auto run_segment = [&](Var zin, std::int64_t first_block, std::int64_t depth) {
      Var cur = zin;
      for (std::int64_t l = 0; l < depth; ++l)
        cur = ad::dig_block_forward(cur, t_emb, y_emb, l, lf.blocks[static_cast<std::size_t>(first_block + l)],
                                    opt);
      if (depth % 4 != 0) {
        auto cum = ReorientSchedule::cumulative_perm(0, depth - 1, cur.value().extent(0));
        cur = ad::permute_rows(cur, inverse_perm(cum));
      }
      return cur;
    };

    if (cfg.variant == ModelConfig::Variant::plain) {
      z = run_segment(z, 0, cfg.layers);
    } else {
      auto plan = ushape_plan(cfg);
      std::int64_t stages = static_cast<std::int64_t>(cfg.stage_widths.size());
      std::vector<Var> saved(static_cast<std::size_t>(stages));
      std::int64_t block_at = 0;
      for (std::int64_t seg = 0; seg < static_cast<std::int64_t>(plan.size()); ++seg) {
        const auto& sp = plan[static_cast<std::size_t>(seg)];
        bool encoder_side = seg < stages - 1;
        bool decoder_side = seg >= stages;
        if (decoder_side) {
          // arrive from the deeper stage: expand tokens then add the shortcut
          const auto& prev = plan[static_cast<std::size_t>(seg - 1)];
          std::int64_t side_in = grid_side(prev.tokens);
          Var u = ad::matmul(z, lf.up_w[static_cast<std::size_t>(seg - stages)]);
          std::vector<std::int64_t> m(static_cast<std::size_t>(sp.tokens * sp.width));
          std::int64_t side_out = side_in * 2;
          for (std::int64_t i = 0; i < side_out; ++i)
            for (std::int64_t j = 0; j < side_out; ++j) {
              std::int64_t src_tok = (i / 2) * side_in + (j / 2);
              std::int64_t q = (i % 2) * 2 + (j % 2);
              for (std::int64_t f = 0; f < sp.width; ++f)
                m[static_cast<std::size_t>((i * side_out + j) * sp.width + f)] =
                    src_tok * 4 * sp.width + q * sp.width + f;
            }
          z = ad::gather_flat(u, m, {sp.tokens, sp.width});
          if (cfg.shortcuts) z = ad::add(z, saved[static_cast<std::size_t>(sp.stage)]);
        }
        z = run_segment(z, block_at, sp.depth);
        block_at += sp.depth;
        if (encoder_side) {
          saved[static_cast<std::size_t>(sp.stage)] = z;
          // merge 2x2 token groups and project to the next width
          std::int64_t side = grid_side(sp.tokens);
          std::int64_t side_out = side / 2;
          std::vector<std::int64_t> m(static_cast<std::size_t>(side_out * side_out * 4 * sp.width));
          std::size_t idx = 0;
          for (std::int64_t gi = 0; gi < side_out; ++gi)
            for (std::int64_t gj = 0; gj < side_out; ++gj)
              for (std::int64_t q = 0; q < 4; ++q)
                for (std::int64_t f = 0; f < sp.width; ++f)
                  m[idx++] = ((2 * gi + q / 2) * side + (2 * gj + q % 2)) * sp.width + f;
          Var grouped = ad::gather_flat(z, m, {side_out * side_out, 4 * sp.width});
          z = ad::matmul(grouped, lf.down_w[static_cast<std::size_t>(seg)]);
        }
      }
    }

    z = ad::layernorm(z);
    Var out = ad::add_row(ad::matmul(z, lf.head_w), lf.head_b);
    Var noise_tok = ad::slice_cols(out, 0, pd);
    Var cov_tok = ad::slice_cols(out, pd, 2 * pd);
    auto um = unpatchify_map(cfg.image, cfg.patch, cfg.channels);
    Var noise = ad::gather_flat(noise_tok, um, {cfg.channels, cfg.image, cfg.image});
    Var cov = ad::gather_flat(cov_tok, um, {cfg.channels, cfg.image, cfg.image});
    return {noise, cov};
  }

  /// Non-differentiating forward.
  std::pair<Tensor, Tensor> forward(const Tensor& x, std::int64_t t, std::int64_t y) const {
    Tape tape;
    auto lf = lift(tape);
    auto [noise, cov] = forward_ad(tape, lf, tape.leaf(x), t, y);
    return {noise.value(), cov.value()};
  }
};

// ============================================================================
// Analytic FLOP model (multiply-accumulate counts, reported as Gflops the
// way common profilers do). Mirrors the instrumented tape counts exactly.
// ============================================================================

inline std::int64_t block_macs(std::int64_t t, std::int64_t d, std::int64_t dk, std::int64_t dv,
                               std::int64_t h, std::int64_t cond_dim, std::int64_t ffn_mult) {
  std::int64_t proj = t * d * (3 * dk + 3 * dv) + t * dv * d;
  std::int64_t scan = 4 * t * (dk / h) * (dv / h) * h;
  std::int64_t ffn = 2 * ffn_mult * t * d * d;
  std::int64_t adaln = cond_dim * 6 * d;
  std::int64_t conv = 9 * t * d;
  return proj + scan + ffn + adaln + conv;
}

inline std::int64_t model_macs(const ModelConfig& cfg) {
  cfg.validate();
  std::int64_t d0 = cfg.hidden, tok = cfg.tokens(), pd = cfg.patch_dim();
  std::int64_t total = tok * pd * d0;  // patchify
  total += 2 * d0 * d0;                // timestep MLP
  total += tok * d0 * 2 * pd;          // head
  if (cfg.variant == ModelConfig::Variant::plain) {
    total += cfg.layers *
             block_macs(tok, d0, cfg.dk_for(d0), cfg.dv_for(d0), cfg.heads_for(d0), d0, cfg.ffn_mult);
  } else {
    auto plan = ushape_plan(cfg);
    std::int64_t stages = static_cast<std::int64_t>(cfg.stage_widths.size());
    for (const auto& sp : plan)
      total += sp.depth * block_macs(sp.tokens, sp.width, cfg.dk_for(sp.width), cfg.dv_for(sp.width),
                                     cfg.heads_for(sp.width), d0, cfg.ffn_mult);
    for (std::int64_t s = 0; s + 1 < stages; ++s) {
      std::int64_t wi = cfg.stage_widths[static_cast<std::size_t>(s)];
      std::int64_t wo = cfg.stage_widths[static_cast<std::size_t>(s + 1)];
      std::int64_t t_out = cfg.tokens() >> (2 * (s + 1));
      total += t_out * (4 * wi) * wo;  // down: merge 2x2 then project
      total += t_out * wo * (4 * wi);  // up: project then expand 2x2
    }
  }
  return total;
}

/// Same-size softmax-attention DiT baseline.
inline std::int64_t dit_model_macs(std::int64_t layers, std::int64_t d, std::int64_t image,
                                   std::int64_t patch, std::int64_t channels) {
  std::int64_t tok = (image / patch) * (image / patch);
  std::int64_t pd = patch * patch * channels;
  std::int64_t per_block = 12 * tok * d * d + 2 * tok * tok * d + 6 * d * d;
  return layers * per_block + tok * pd * d + 2 * d * d + tok * d * 2 * pd + 2 * d * d;
}

struct FlopsEstimate {
  double gflops = 0.0;
  double dit_gflops = 0.0;
  double ratio_vs_dit = 0.0;
};

inline FlopsEstimate flops_estimate(const ModelConfig& cfg) {
  FlopsEstimate e;
  e.gflops = static_cast<double>(model_macs(cfg)) / 1e9;
  std::int64_t dl = cfg.dit_layers ? cfg.dit_layers : cfg.layers;
  std::int64_t dd = cfg.dit_hidden ? cfg.dit_hidden : cfg.hidden;
  std::int64_t dp = cfg.dit_patch ? cfg.dit_patch : cfg.patch;
  e.dit_gflops = static_cast<double>(dit_model_macs(dl, dd, cfg.image, dp, cfg.channels)) / 1e9;
  e.ratio_vs_dit = e.gflops / e.dit_gflops;
  return e;
}

// ============================================================================
// Presets
// ============================================================================

inline ModelConfig make_preset(const std::string& name) {
  ModelConfig c;
  c.name = name;
  auto plain = [&](std::int64_t n, std::int64_t d) {
    c.variant = ModelConfig::Variant::plain;
    c.layers = n;
    c.hidden = d;
    c.patch = 2;
    c.image = 32;
    c.channels = 4;
    c.num_classes = 1000;
    c.expand_k = 0.125;
    c.expand_v = 0.25;
  };
  auto ushape = [&](std::int64_t n, std::int64_t d, std::vector<std::int64_t> depths,
                    std::int64_t dit_n, std::int64_t dit_d, std::int64_t fixed_heads = 0) {
    c.heads = fixed_heads;
    c.variant = ModelConfig::Variant::ushape;
    c.layers = n;
    c.hidden = d;
    c.patch = 1;
    c.image = 32;
    c.channels = 4;
    c.num_classes = 1000;
    c.expand_k = 0.5;
    c.expand_v = 0.5;
    c.stage_widths = {d, 2 * d, 4 * d};
    c.stage_depths = std::move(depths);
    c.dit_layers = dit_n;
    c.dit_hidden = dit_d;
    c.dit_patch = 2;
  };
  if (name == "dig-s") plain(12, 384);
  else if (name == "dig-b") plain(12, 768);
  else if (name == "dig-l") plain(24, 1024);
  else if (name == "dig-xl") plain(28, 1152);
  else if (name == "udig-s") ushape(20, 128, {4, 4, 4, 4, 4}, 12, 384);
  else if (name == "udig-b") ushape(20, 256, {4, 4, 4, 4, 4}, 12, 768);
  else if (name == "udig-l") ushape(40, 320, {8, 8, 8, 8, 8}, 24, 1024);
  else if (name == "udig-xl") ushape(40, 416, {8, 8, 8, 8, 8}, 28, 1152, 4);  // 416 = 64*6.5
  else if (name == "toy-s") {
    c.layers = 2;
    c.hidden = 32;
    c.patch = 2;
    c.image = 8;
    c.channels = 1;
    c.num_classes = 2;
    c.heads = 1;
  } else if (name == "toy-b") {
    c.layers = 4;
    c.hidden = 32;
    c.patch = 2;
    c.image = 16;
    c.channels = 1;
    c.num_classes = 2;
    c.heads = 2;
  } else if (name == "toy-u") {
    c.variant = ModelConfig::Variant::ushape;
    c.layers = 5;
    c.hidden = 16;
    c.patch = 1;
    c.image = 16;
    c.channels = 1;
    c.num_classes = 2;
    c.heads = 1;
    c.stage_widths = {16, 32, 64};
    c.stage_depths = {1, 1, 1, 1, 1};
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  c.validate();
  return c;
}

}  // namespace dig
