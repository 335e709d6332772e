// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "dig/model.hpp"

namespace dig {

// ============================================================================
// DDPM machinery: noise schedule, forward corruption, posterior, losses,
// ancestral sampler with learned covariance.
// ============================================================================

struct NoiseSchedule {
  std::int64_t steps = 0;
  std::vector<double> beta, alpha, alpha_bar;
  std::vector<double> sqrt_alpha_bar, sqrt_one_minus_alpha_bar;
  std::vector<double> posterior_var;              // beta_t (1 - abar_{t-1}) / (1 - abar_t); 0 at t=0
  std::vector<double> posterior_log_var_clipped;  // t=0 slot clipped to the t=1 value

  static NoiseSchedule linear(std::int64_t t_steps = 1000, double beta_start = 1e-4,
                              double beta_end = 2e-2) {
    if (t_steps < 2) throw ConfigError("schedule needs at least 2 steps");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start < beta_end))
      throw ConfigError("betas must satisfy 0 < start < end < 1");
    NoiseSchedule s;
    s.steps = t_steps;
    double abar = 1.0;
    for (std::int64_t t = 0; t < t_steps; ++t) {
      double b = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                  static_cast<double>(t_steps - 1);
      double abar_prev = abar;
      abar *= 1.0 - b;
      s.beta.push_back(b);
      s.alpha.push_back(1.0 - b);
      s.alpha_bar.push_back(abar);
      s.sqrt_alpha_bar.push_back(std::sqrt(abar));
      s.sqrt_one_minus_alpha_bar.push_back(std::sqrt(1.0 - abar));
      double abar_pre = (t == 0) ? 1.0 : abar_prev;
      s.posterior_var.push_back(b * (1.0 - abar_pre) / (1.0 - abar));
    }
    for (std::int64_t t = 0; t < t_steps; ++t) {
      double v = (t == 0) ? s.posterior_var[1] : s.posterior_var[static_cast<std::size_t>(t)];
      s.posterior_log_var_clipped.push_back(std::log(v));
    }
    return s;
  }

  void check_index(std::int64_t t) const {
    if (t < 0 || t >= steps) throw std::out_of_range("diffusion timestep out of range");
  }
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; caller supplies eps.
inline Tensor q_sample(const Tensor& x0, std::int64_t t, const Tensor& eps, const NoiseSchedule& s) {
  s.check_index(t);
  if (!x0.same_shape(eps)) throw ShapeError("q_sample: eps shape must match x0");
  return add(scale(x0, s.sqrt_alpha_bar[static_cast<std::size_t>(t)]),
             scale(eps, s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(t)]));
}

struct Posterior {
  Tensor mean;
  double var = 0.0;
};

/// q*(x_{t-1} | x_t, x_0); undefined at t = 0.
inline Posterior q_posterior(const Tensor& x0, const Tensor& xt, std::int64_t t, const NoiseSchedule& s) {
  s.check_index(t);
  if (t == 0) throw NumericError("posterior undefined at t = 0");
  double abar = s.alpha_bar[static_cast<std::size_t>(t)];
  double abar_prev = s.alpha_bar[static_cast<std::size_t>(t - 1)];
  double b = s.beta[static_cast<std::size_t>(t)];
  double c0 = std::sqrt(abar_prev) * b / (1.0 - abar);
  double ct = std::sqrt(s.alpha[static_cast<std::size_t>(t)]) * (1.0 - abar_prev) / (1.0 - abar);
  Posterior p;
  p.mean = add(scale(x0, c0), scale(xt, ct));
  p.var = s.posterior_var[static_cast<std::size_t>(t)];
  return p;
}

/// mu_theta(x_t, eps_hat) = (x_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t)
inline Tensor mean_from_eps(const Tensor& xt, const Tensor& eps_hat, std::int64_t t,
                            const NoiseSchedule& s) {
  s.check_index(t);
  double b = s.beta[static_cast<std::size_t>(t)];
  double som = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(t)];
  double inv_sa = 1.0 / std::sqrt(s.alpha[static_cast<std::size_t>(t)]);
  return scale(add(xt, scale(eps_hat, -b / som)), inv_sa);
}

/// log Sigma_theta = v log beta_t + (1-v) log btilde_t with v = sigmoid(cov_raw).
inline Tensor log_var_from_cov_raw(const Tensor& cov_raw, std::int64_t t, const NoiseSchedule& s) {
  s.check_index(t);
  double lo = s.posterior_log_var_clipped[static_cast<std::size_t>(t)];
  double hi = std::log(s.beta[static_cast<std::size_t>(t)]);
  return map(cov_raw, [lo, hi](double r) {
    double v = 1.0 / (1.0 + std::exp(-r));
    return v * hi + (1.0 - v) * lo;
  });
}

// ============================================================================
// Losses (differentiable forms share one model forward)
// ============================================================================

struct DiffusionLosses {
  Var simple;  // mean squared error between predicted and true noise
  Var vb;      // KL term (or decoder NLL at t = 0), mean over elements
  Var total;   // simple + lambda_vb * vb
};

namespace detail {

/// Discretized Gaussian log-likelihood of x0 under N(mu, Sigma), iDDPM bins.
inline Var discretized_gaussian_loglik(Var mu, Var log_var, const Tensor& x0) {
  const double h = 1.0 / 255.0;
  Var inv_std = ad::exp(ad::scale(log_var, -0.5));
  Var centered = ad::add_const(ad::scale(mu, -1.0), x0);  // x0 - mu
  Var plus_in = ad::mul(ad::add_scalar(centered, h), inv_std);
  Var min_in = ad::mul(ad::add_scalar(centered, -h), inv_std);
  Var cdf_plus = ad::normal_cdf(plus_in);
  Var cdf_min = ad::normal_cdf(min_in);

  auto clamp_floor = [](Var v, double floor_val) {
    // max(v, floor) built from constants: v + relu-free mask trick is overkill;
    // add the floor inside log via log(v + floor) is biased, so use a mask
    Tensor mask = map(v.value(), [floor_val](double x) { return x > floor_val ? 1.0 : 0.0; });
    Tensor fill = map(v.value(), [floor_val](double x) { return x > floor_val ? 0.0 : floor_val; });
    return ad::add_const(ad::mul(v, v.tape->leaf(mask)), fill);
  };

  Tensor lo_mask = map(x0, [](double x) { return x < -0.999 ? 1.0 : 0.0; });
  Tensor hi_mask = map(x0, [](double x) { return x > 0.999 ? 1.0 : 0.0; });
  Tensor mid_mask = map(x0, [](double x) { return (x >= -0.999 && x <= 0.999) ? 1.0 : 0.0; });

  Var log_cdf_plus = ad::log(clamp_floor(cdf_plus, 1e-12));
  Var log_one_minus_cdf_min = ad::log(clamp_floor(ad::add_scalar(ad::scale(cdf_min, -1.0), 1.0), 1e-12));
  Var log_mid = ad::log(clamp_floor(ad::sub(cdf_plus, cdf_min), 1e-12));

  Tape& t = *mu.tape;
  Var ll = ad::add(ad::add(ad::mul(log_cdf_plus, t.leaf(lo_mask)), ad::mul(log_one_minus_cdf_min, t.leaf(hi_mask))),
                   ad::mul(log_mid, t.leaf(mid_mask)));
  return ad::mean_all(ll);
}

}  // namespace detail

/// Build both training losses from one forward pass at (x0, t, y, eps).
/// With `detach_mean` (the training default) the KL's mean path uses the
/// gradient-detached noise prediction; the simple loss never touches the
/// covariance head either way. Finite-difference validation needs
/// `detach_mean = false`, since central differences cannot see a detach.
inline DiffusionLosses diffusion_losses_ad(Tape& tape, const DiGModel& model,
                                           const DiGModel::Lifted& lf, const Tensor& x0,
                                           std::int64_t t, std::int64_t y, const Tensor& eps,
                                           const NoiseSchedule& s, double lambda_vb = 1.0,
                                           bool detach_mean = true) {
  s.check_index(t);
  Tensor xt = q_sample(x0, t, eps, s);
  auto [noise_pred, cov_raw] = model.forward_ad(tape, lf, tape.leaf(xt), t, y);

  DiffusionLosses out;
  out.simple = ad::mse_to_const(noise_pred, eps);

  double b = s.beta[static_cast<std::size_t>(t)];
  double som = s.sqrt_one_minus_alpha_bar[static_cast<std::size_t>(t)];
  double inv_sa = 1.0 / std::sqrt(s.alpha[static_cast<std::size_t>(t)]);
  Var eps_for_mean = detach_mean ? ad::detach(noise_pred) : noise_pred;
  Var mu_theta = ad::scale(ad::add_const(ad::scale(eps_for_mean, -b / som), xt), inv_sa);
  double log_lo = s.posterior_log_var_clipped[static_cast<std::size_t>(t)];
  double log_hi = std::log(b);
  Var vgate = ad::sigmoid(cov_raw);
  Var log_var = ad::add_scalar(ad::scale(vgate, log_hi - log_lo), log_lo);

  if (t == 0) {
    out.vb = ad::scale(detail::discretized_gaussian_loglik(mu_theta, log_var, x0), -1.0);
  } else {
    Posterior post = q_posterior(x0, xt, t, s);
    double log_btilde = std::log(post.var);
    Var d = ad::add_const(mu_theta, neg(post.mean));
    Var inner = ad::add(ad::add_scalar(log_var, -log_btilde - 1.0),
                        ad::mul(ad::exp(ad::scale(log_var, -1.0)),
                                ad::add_scalar(ad::square(d), post.var)));
    out.vb = ad::scale(ad::mean_all(inner), 0.5);
  }
  out.total = ad::add(out.simple, ad::scale(out.vb, lambda_vb));
  return out;
}

/// ||eps_theta(x_t) - eps||^2, mean over elements.
inline double loss_simple(const DiGModel& model, const Tensor& x0, std::int64_t t, std::int64_t y,
                          const Tensor& eps, const NoiseSchedule& s) {
  Tape tape;
  auto lf = model.lift(tape);
  return diffusion_losses_ad(tape, model, lf, x0, t, y, eps, s).simple.value().at(0);
}

/// KL(q* || p_theta) at t >= 1 (decoder NLL at t = 0), mean over elements.
/// x_t must be the corrupted sample this term is evaluated at.
inline double loss_vb_term(const DiGModel& model, const Tensor& x0, const Tensor& xt, std::int64_t t,
                           const NoiseSchedule& s, std::int64_t y = 0) {
  s.check_index(t);
  Tape tape;
  auto lf = model.lift(tape);
  auto [noise_pred, cov_raw] = model.forward_ad(tape, lf, tape.leaf(xt), t, y);
  Tensor mu = mean_from_eps(xt, noise_pred.value(), t, s);
  Tensor log_var = log_var_from_cov_raw(cov_raw.value(), t, s);
  if (t == 0) {
    Var ll = detail::discretized_gaussian_loglik(tape.leaf(mu), tape.leaf(log_var), x0);
    return -ll.value().at(0);
  }
  Posterior post = q_posterior(x0, xt, t, s);
  double log_btilde = std::log(post.var);
  double acc = 0.0;
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    double lv = log_var.at(i);
    double d = post.mean.at(i) - mu.at(i);
    acc += 0.5 * (lv - log_btilde - 1.0 + std::exp(-lv) * (post.var + d * d));
  }
  return acc / static_cast<double>(x0.numel());
}

/// Scalar-Gaussian KL used by tests and the vb term derivation.
inline double gaussian_kl(double mu1, double var1, double mu2, double var2) {
  return 0.5 * (std::log(var2 / var1) + (var1 + (mu1 - mu2) * (mu1 - mu2)) / var2 - 1.0);
}

// ============================================================================
// Ancestral sampler
// ============================================================================

/// Iterates t = steps-1 .. 0 drawing x_{t-1} ~ N(mu_theta, Sigma_theta);
/// no noise at the final step. Deterministic for a fixed seed.
inline Tensor p_sample_loop(const DiGModel& model, std::int64_t y, const NoiseSchedule& s,
                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5a11));
  Tensor x = Tensor::randn(rng, {model.cfg.channels, model.cfg.image, model.cfg.image});
  for (std::int64_t t = s.steps - 1; t >= 0; --t) {
    auto [eps_hat, cov_raw] = model.forward(x, t, y);
    Tensor mu = mean_from_eps(x, eps_hat, t, s);
    if (has_nan(mu)) throw NumericError("NaN in sampler at step " + std::to_string(t));
    if (t == 0) {
      x = mu;
    } else {
      Tensor log_var = log_var_from_cov_raw(cov_raw, t, s);
      Tensor z = Tensor::randn(rng, x.shape());
      Tensor sigma = map(log_var, [](double lv) { return std::exp(0.5 * lv); });
      x = add(mu, mul(sigma, z));
    }
  }
  if (has_nan(x)) throw NumericError("NaN in sampler output");
  return x;
}

}  // namespace dig
