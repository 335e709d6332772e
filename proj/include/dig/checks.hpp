// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <ostream>
#include <string>

#include "dig/bench.hpp"
#include "dig/harness.hpp"

namespace dig {

// ============================================================================
// Fast invariant battery behind `dig check`: the structural identities that
// must hold on any healthy build. Roughly a minute end to end.
// ============================================================================

inline bool run_self_checks(std::ostream& os, std::uint64_t seed = 0) {
  int failed = 0;
  auto step = [&](const std::string& name, const std::function<bool()>& fn) {
    bool ok = false;
    std::string note;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      note = std::string(" (") + e.what() + ")";
    }
    os << (ok ? "[PASS] " : "[FAIL] ") << name << note << "\n";
    if (!ok) ++failed;
  };

  step("chunked scan equals recurrent scan", [&] {
    Rng rng(derive_seed(seed, 1));
    for (int rep = 0; rep < 20; ++rep) {
      std::int64_t l = 1 + static_cast<std::int64_t>(rng.randint(48));
      std::int64_t dk = 1 + static_cast<std::int64_t>(rng.randint(8));
      std::int64_t dv = 1 + static_cast<std::int64_t>(rng.randint(8));
      Tensor q = Tensor::randn(rng, {l, dk}), k = Tensor::randn(rng, {l, dk});
      Tensor v = Tensor::randn(rng, {l, dv});
      Tensor a = Tensor::uniform(rng, {l, dk}, 0.05, 0.99);
      Tensor b = Tensor::uniform(rng, {l, dv}, 0.05, 0.99);
      Tensor g({l, dk, dv});
      for (std::int64_t t = 0; t < l; ++t)
        for (std::int64_t i = 0; i < dk; ++i)
          for (std::int64_t j = 0; j < dv; ++j) g.set(t, i, j, a(t, i) * b(t, j));
      std::int64_t m = 1 + static_cast<std::int64_t>(rng.randint(l));
      if (max_abs_diff(gla_scan_chunked_ab(q, k, v, a, b, ChunkSpec(m)), gla_scan(q, k, v, g)) > 1e-9)
        return false;
    }
    return true;
  });

  step("all-ones gate reduces to simplified linear attention", [&] {
    Rng rng(derive_seed(seed, 2));
    Tensor q = Tensor::randn(rng, {12, 5}), k = Tensor::randn(rng, {12, 5}), v = Tensor::randn(rng, {12, 5});
    return max_abs_diff(gla_scan(q, k, v, Tensor::ones({12, 5, 5})), lin_attn_simple(q, k, v)) < 1e-12;
  });

  step("normalized linear attention: streaming equals batch", [&] {
    Rng rng(derive_seed(seed, 3));
    Tensor q = Tensor::randn(rng, {10, 4}), k = Tensor::randn(rng, {10, 4}), v = Tensor::randn(rng, {10, 4});
    return max_abs_diff(lin_attn_normalized_batch(q, k, v, FeatureMap::elu_plus_one),
                        lin_attn_normalized_streaming(q, k, v, FeatureMap::elu_plus_one)) < 1e-12;
  });

  step("identity-initialized depthwise conv is the identity", [&] {
    Rng rng(derive_seed(seed, 4));
    Tensor x = Tensor::randn(rng, {25, 6});
    return max_abs_diff(dwconv2d_tokens(x, identity_init(6)), x) == 0.0;
  });

  step("reorientation windows of four compose to the identity", [&] {
    for (std::int64_t side = 2; side <= 8; ++side)
      for (std::int64_t first = 0; first < 4; ++first)
        if (ReorientSchedule::cumulative_perm(first, first + 3, side * side) != identity_perm(side * side))
          return false;
    return true;
  });

  step("scan strategies report (2,0), (3,1), (13,3) extra ops", [&] {
    Rng rng(derive_seed(seed, 5));
    GLAParams p = GLAParams::init(rng, 4, 4, 4, 1, 16.0);
    Tensor x = Tensor::randn(rng, {16, 4});
    OpCounter c;
    scan_block(x, p, 0, GLAMode::recurrent(), &c);
    if (c.matrix_ops != 2 || c.scan_ops != 0) return false;
    scan_bidirectional(x, p, GLAMode::recurrent(), &c);
    if (c.matrix_ops != 3 || c.scan_ops != 1) return false;
    scan_4directional(x, p, GLAMode::recurrent(), &c);
    return c.matrix_ops == 13 && c.scan_ops == 3;
  });

  step("freshly initialized model predicts exactly zero", [&] {
    ModelConfig cfg = make_preset("toy-s");
    DiGModel m = DiGModel::create(cfg, seed);
    Rng rng(derive_seed(seed, 6));
    Tensor x = Tensor::randn(rng, {cfg.channels, cfg.image, cfg.image});
    auto [noise, cov] = m.forward(x, 1, 0);
    return max_abs(noise) == 0.0 && max_abs(cov) == 0.0;
  });

  step("analytic flops reproduce the reference table", [&] {
    FlopsEstimate s = flops_estimate(make_preset("dig-s"));
    FlopsEstimate u = flops_estimate(make_preset("udig-s"));
    return std::abs(s.gflops - 4.30) <= 0.05 * 4.30 && std::abs(s.ratio_vs_dit - 0.708) <= 0.02 &&
           std::abs(u.gflops - 4.10) <= 0.05 * 4.10 && std::abs(u.ratio_vs_dit - 0.676) <= 0.02;
  });

  step("noise schedule identity sqrt(abar)^2 + (1 - abar) = 1", [&] {
    NoiseSchedule s = NoiseSchedule::linear(1000);
    for (std::int64_t t = 0; t < s.steps; ++t)
      if (std::abs(s.sqrt_alpha_bar[t] * s.sqrt_alpha_bar[t] + (1.0 - s.alpha_bar[t]) - 1.0) > 1e-14)
        return false;
    return s.posterior_var[0] == 0.0;
  });

  step("sampler is deterministic for a fixed seed", [&] {
    ModelConfig cfg = make_preset("toy-s");
    DiGModel m = DiGModel::create(cfg, seed);
    NoiseSchedule s = NoiseSchedule::linear(20);
    return max_abs_diff(p_sample_loop(m, 0, s, 7), p_sample_loop(m, 0, s, 7)) == 0.0;
  });

  step("instrumented forward matches the analytic flop count", [&] {
    ModelConfig cfg = make_preset("toy-u");
    DiGModel m = DiGModel::create(cfg, seed);
    Rng rng(derive_seed(seed, 7));
    Tensor x = Tensor::randn(rng, {cfg.channels, cfg.image, cfg.image});
    flops::ScopedCount scope;
    m.forward(x, 1, 0);
    return flops::counter == model_macs(cfg);
  });

  os << (failed == 0 ? "all checks passed\n" : std::to_string(failed) + " check(s) failed\n");
  return failed == 0;
}

}  // namespace dig
