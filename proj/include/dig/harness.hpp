// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "dig/config.hpp"
#include "dig/diffusion.hpp"
#include "dig/serialize.hpp"

namespace dig {

// ============================================================================
// Toy datasets: latent-shaped arrays, per-channel ~unit variance.
// ============================================================================

struct ToyDataset {
  std::string kind;
  std::vector<Tensor> images;  // [C x I x I] each
  std::vector<std::int64_t> labels;
  std::int64_t num_classes = 2;
};

inline ToyDataset make_toy_dataset(const std::string& kind, std::int64_t n, std::uint64_t seed,
                                   std::int64_t channels = 1, std::int64_t image = 8,
                                   std::int64_t num_classes = 2) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  // tight modes: noise at mid/low t stays recoverable, channel variance ~ 1
  const double mode_std = 0.15;
  const double mode_scale = std::sqrt(1.0 - mode_std * mode_std);
  Rng rng(derive_seed(seed, 0xda7a));
  ToyDataset ds;
  ds.kind = kind;

  auto standardized_pattern = [&](Rng& r) {
    Tensor p = Tensor::randn(r, {channels, image, image});
    std::int64_t pix = image * image;
    for (std::int64_t c = 0; c < channels; ++c) {
      double m = 0, v = 0;
      for (std::int64_t i = 0; i < pix; ++i) m += p.at(c * pix + i);
      m /= static_cast<double>(pix);
      for (std::int64_t i = 0; i < pix; ++i) {
        double d = p.at(c * pix + i) - m;
        v += d * d;
      }
      v /= static_cast<double>(pix);
      double inv = 1.0 / std::sqrt(v + 1e-12);
      for (std::int64_t i = 0; i < pix; ++i) p.mutable_data()[c * pix + i] = (p.at(c * pix + i) - m) * inv;
    }
    return p;
  };

  if (kind == "gaussian_mixture") {
    ds.num_classes = num_classes;
    std::vector<Tensor> modes;
    for (std::int64_t k = 0; k < num_classes; ++k) modes.push_back(standardized_pattern(rng));
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t k = i % num_classes;
      Tensor x = add(scale(modes[static_cast<std::size_t>(k)], mode_scale),
                     Tensor::randn(rng, {channels, image, image}, mode_std));
      ds.images.push_back(std::move(x));
      ds.labels.push_back(k);
    }
  } else if (kind == "checkerboard") {
    ds.num_classes = 2;
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t phase = i % 2;
      Tensor x({channels, image, image});
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t a = 0; a < image; ++a)
          for (std::int64_t b = 0; b < image; ++b) {
            double sign = ((a + b + phase) % 2 == 0) ? 1.0 : -1.0;
            x.mutable_data()[(c * image + a) * image + b] = mode_scale * sign + mode_std * rng.normal();
          }
      ds.images.push_back(std::move(x));
      ds.labels.push_back(phase);
    }
  } else if (kind == "two_class_blobs") {
    ds.num_classes = 2;
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t k = i % 2;  // exactly balanced
      double center = k == 0 ? mode_scale : -mode_scale;
      Tensor x = add_scalar(Tensor::randn(rng, {channels, image, image}, mode_std), center);
      ds.images.push_back(std::move(x));
      ds.labels.push_back(k);
    }
  } else {
    throw ConfigError("unknown toy dataset kind: " + kind);
  }
  return ds;
}

// ============================================================================
// AdamW + EMA
// ============================================================================

struct AdamW {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  std::int64_t t = 0;
  std::vector<Tensor> m, v;

  void init(const std::vector<std::pair<std::string, Tensor*>>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      (void)name;
      m.push_back(Tensor::zeros(p->shape()));
      v.push_back(Tensor::zeros(p->shape()));
    }
  }

  void step(const std::vector<std::pair<std::string, Tensor*>>& params, const std::vector<Tensor>& grads) {
    if (m.size() != params.size() || grads.size() != params.size())
      throw ConfigError("optimizer state does not match parameter list");
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].second;
      Tensor out = p.clone();
      double* pd = out.mutable_data();
      double* md = m[i].mutable_data();
      double* vd = v[i].mutable_data();
      const double* gd = grads[i].data();
      for (std::int64_t j = 0, nel = p.numel(); j < nel; ++j) {
        md[j] = beta1 * md[j] + (1.0 - beta1) * gd[j];
        vd[j] = beta2 * vd[j] + (1.0 - beta2) * gd[j] * gd[j];
        double mhat = md[j] / bc1;
        double vhat = vd[j] / bc2;
        pd[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pd[j]);
      }
      p = out;
    }
  }
};

// ============================================================================
// Training
// ============================================================================

struct TrainConfig {
  std::int64_t steps = 2000, batch = 32;
  double lr = 1e-4, weight_decay = 0.0, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double ema_decay = 0.9999, lambda_vb = 1.0;
  std::int64_t t_steps = 100;
  double beta_start = 1e-4, beta_end = 2e-2;
  std::string dataset = "gaussian_mixture";
  std::int64_t dataset_size = 2048;
  std::uint64_t seed = 0;
};

inline TrainConfig train_config_from_map(const ConfigMap& m) {
  TrainConfig c;
  c.steps = cfg_int(m, "train.steps", c.steps);
  c.batch = cfg_int(m, "train.batch", c.batch);
  c.lr = cfg_double(m, "train.lr", c.lr);
  c.weight_decay = cfg_double(m, "train.weight_decay", c.weight_decay);
  c.ema_decay = cfg_double(m, "train.ema_decay", c.ema_decay);
  c.lambda_vb = cfg_double(m, "train.lambda_vb", c.lambda_vb);
  c.t_steps = cfg_int(m, "train.t_steps", c.t_steps);
  c.beta_start = cfg_double(m, "train.beta_start", c.beta_start);
  c.beta_end = cfg_double(m, "train.beta_end", c.beta_end);
  c.dataset = cfg_str(m, "train.dataset", c.dataset);
  c.dataset_size = cfg_int(m, "train.dataset_size", c.dataset_size);
  c.seed = static_cast<std::uint64_t>(cfg_int(m, "train.seed", 0));
  return c;
}

struct StepMetrics {
  std::int64_t step = 0;
  double loss_simple = 0.0, loss_vb = 0.0, grad_norm = 0.0, wallclock_ms = 0.0;
};

struct TrainState {
  std::int64_t step = 0;
  DiGModel model;
  std::vector<Tensor> ema;  // aligned with model.named_params()
  AdamW opt;
  NoiseSchedule schedule;
  std::uint64_t seed = 0;

  DiGModel ema_model() const {
    DiGModel em = model;
    auto named = em.named_params();
    if (named.size() != ema.size()) throw ConfigError("EMA state out of sync");
    for (std::size_t i = 0; i < named.size(); ++i) *named[i].second = ema[i];
    return em;
  }
};

/// Deterministic eval loss on a fixed batch with stratified timesteps.
inline std::pair<double, double> eval_losses(const DiGModel& model, const ToyDataset& ds,
                                             const NoiseSchedule& s, std::uint64_t seed,
                                             std::int64_t n_eval = 64, double lambda_vb = 1.0) {
  (void)lambda_vb;
  Rng rng(derive_seed(seed, 0xe7a1));
  double simple = 0.0, vb = 0.0;
  for (std::int64_t i = 0; i < n_eval; ++i) {
    std::size_t idx = static_cast<std::size_t>(rng.randint(ds.images.size()));
    std::int64_t t = (i * s.steps) / n_eval;
    Tensor eps = Tensor::randn(rng, ds.images[idx].shape());
    Tape tape;
    auto lf = model.lift(tape);
    auto losses = diffusion_losses_ad(tape, model, lf, ds.images[idx], t,
                                      ds.labels[idx], eps, s, 1.0);
    simple += losses.simple.value().at(0);
    vb += losses.vb.value().at(0);
  }
  return {simple / static_cast<double>(n_eval), vb / static_cast<double>(n_eval)};
}

/// AdamW training of L_simple + lambda_vb * L_vb with per-step EMA update.
inline TrainState train(const ModelConfig& mc, const TrainConfig& tc, const ToyDataset& ds,
                        std::ostream* metrics_jsonl = nullptr,
                        const std::function<void(const StepMetrics&)>& on_step = {}) {
  TrainState st;
  st.model = DiGModel::create(mc, tc.seed);
  st.schedule = NoiseSchedule::linear(tc.t_steps, tc.beta_start, tc.beta_end);
  st.seed = tc.seed;
  auto named = st.model.named_params();
  st.opt.lr = tc.lr;
  st.opt.beta1 = tc.beta1;
  st.opt.beta2 = tc.beta2;
  st.opt.eps = tc.adam_eps;
  st.opt.weight_decay = tc.weight_decay;
  st.opt.init(named);
  st.ema.clear();
  for (const auto& [name, p] : named) {
    (void)name;
    st.ema.push_back(p->clone());
  }

  Rng rng(derive_seed(tc.seed, 0x7ea1));
  for (std::int64_t step = 0; step < tc.steps; ++step) {
    auto tick = std::chrono::steady_clock::now();
    std::vector<Tensor> gsum;
    for (const auto& [name, p] : named) {
      (void)name;
      gsum.push_back(Tensor::zeros(p->shape()));
    }
    double simple_sum = 0.0, vb_sum = 0.0;
    for (std::int64_t b = 0; b < tc.batch; ++b) {
      std::size_t idx = static_cast<std::size_t>(rng.randint(ds.images.size()));
      std::int64_t t = static_cast<std::int64_t>(rng.randint(static_cast<std::uint64_t>(st.schedule.steps)));
      Tensor eps = Tensor::randn(rng, ds.images[idx].shape());
      Tape tape;
      auto lf = st.model.lift(tape);
      auto losses = diffusion_losses_ad(tape, st.model, lf, ds.images[idx], t, ds.labels[idx], eps,
                                        st.schedule, tc.lambda_vb);
      double sv = losses.simple.value().at(0), vv = losses.vb.value().at(0);
      if (std::isnan(sv) || std::isnan(vv))
        throw NumericError("NaN loss at step " + std::to_string(step));
      simple_sum += sv;
      vb_sum += vv;
      tape.backward(losses.total);
      auto vars = lf.param_vars();
      for (std::size_t i = 0; i < vars.size(); ++i) {
        if (!tape.touched(vars[i])) continue;
        Tensor g = tape.grad(vars[i]);
        double* acc = gsum[i].mutable_data();
        const double* gd = g.data();
        for (std::int64_t j = 0, nel = g.numel(); j < nel; ++j) acc[j] += gd[j];
      }
    }
    double inv_b = 1.0 / static_cast<double>(tc.batch);
    double gnorm2 = 0.0;
    for (auto& g : gsum) {
      double* gd = g.mutable_data();
      for (std::int64_t j = 0, nel = g.numel(); j < nel; ++j) {
        gd[j] *= inv_b;
        gnorm2 += gd[j] * gd[j];
      }
    }
    st.opt.step(named, gsum);
    for (std::size_t i = 0; i < named.size(); ++i) {
      double* e = st.ema[i].mutable_data();
      const double* p = named[i].second->data();
      for (std::int64_t j = 0, nel = st.ema[i].numel(); j < nel; ++j)
        e[j] = tc.ema_decay * e[j] + (1.0 - tc.ema_decay) * p[j];
    }
    st.step = step + 1;

    StepMetrics sm;
    sm.step = st.step;
    sm.loss_simple = simple_sum * inv_b;
    sm.loss_vb = vb_sum * inv_b;
    sm.grad_norm = std::sqrt(gnorm2);
    sm.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tick).count();
    if (metrics_jsonl) {
      (*metrics_jsonl) << "{\"step\":" << sm.step << ",\"loss_simple\":" << sm.loss_simple
                       << ",\"loss_vb\":" << sm.loss_vb << ",\"grad_norm\":" << sm.grad_norm
                       << ",\"wallclock_ms\":" << sm.wallclock_ms << "}\n";
    }
    if (on_step) on_step(sm);
  }
  return st;
}

// ============================================================================
// Checkpoints
// ============================================================================

inline void save_train_state(const std::string& path, TrainState& st) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  auto named = st.model.named_params();
  for (const auto& [name, p] : named) tensors.emplace_back("param." + name, *p);
  for (std::size_t i = 0; i < named.size(); ++i) tensors.emplace_back("ema." + named[i].first, st.ema[i]);
  save_checkpoint(path, model_config_to_json(st.model.cfg), st.step, tensors);
}

inline TrainState load_train_state(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  TrainState st;
  st.model = DiGModel::create(model_config_from_json(ck.config), 0);
  st.step = ck.step;
  auto named = st.model.named_params();
  for (auto& [name, p] : named) {
    const Tensor* t = ck.find("param." + name);
    if (!t) throw IoError("checkpoint missing tensor param." + name);
    if (t->shape() != p->shape()) throw IoError("checkpoint shape mismatch for " + name);
    *p = t->clone();
  }
  st.ema.clear();
  for (auto& [name, p] : named) {
    const Tensor* t = ck.find("ema." + name);
    st.ema.push_back(t ? t->clone() : p->clone());
  }
  return st;
}

// ============================================================================
// Sample-quality probe: energy distance between 2-D projections
// ============================================================================

inline std::vector<std::array<double, 2>> project_2d(const std::vector<Tensor>& xs, std::uint64_t seed) {
  if (xs.empty()) return {};
  std::int64_t n = xs[0].numel();
  Rng rng(derive_seed(seed, 0x2d90));
  std::vector<double> p1(static_cast<std::size_t>(n)), p2(static_cast<std::size_t>(n));
  double inv = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& v : p1) v = rng.normal() * inv;
  for (auto& v : p2) v = rng.normal() * inv;
  std::vector<std::array<double, 2>> out;
  for (const auto& x : xs) {
    double a = 0, b = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      a += x.at(i) * p1[static_cast<std::size_t>(i)];
      b += x.at(i) * p2[static_cast<std::size_t>(i)];
    }
    out.push_back({a, b});
  }
  return out;
}

inline double energy_distance_2d(const std::vector<std::array<double, 2>>& a,
                                 const std::vector<std::array<double, 2>>& b) {
  auto dist = [](const std::array<double, 2>& x, const std::array<double, 2>& y) {
    double dx = x[0] - y[0], dy = x[1] - y[1];
    return std::sqrt(dx * dx + dy * dy);
  };
  auto mean_cross = [&](const auto& xs, const auto& ys) {
    double s = 0;
    for (const auto& x : xs)
      for (const auto& y : ys) s += dist(x, y);
    return s / (static_cast<double>(xs.size()) * static_cast<double>(ys.size()));
  };
  return 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
}

}  // namespace dig
