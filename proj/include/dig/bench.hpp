// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dig/linear_attention.hpp"
#include "dig/model.hpp"
#include "dig/srem.hpp"

namespace dig::bench {

// ============================================================================
// Bench kernels (templated on scalar; f32 by default for speed, correctness
// pre-checked against the f64 reference before any timing).
// ============================================================================

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Non-causal scaled dot-product attention with two-level tiling and a
/// streaming (running max/sum) softmax, so score tiles stay cache-resident
/// at every sequence length. Exact softmax attention, O(T^2 d) work.
template <typename S>
void softmax_attention_fwd(const S* q, const S* k, const S* v, std::int64_t t_len, std::int64_t d,
                           S* out, std::vector<S>& scratch, std::int64_t row_block = 256,
                           std::int64_t col_tile = 1024) {
  S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  std::int64_t rb = std::min(row_block, t_len);
  std::int64_t ct = std::min(col_tile, t_len);
  // layout: score tile | running acc | running max | running sum
  scratch.resize(static_cast<std::size_t>(rb * ct + rb * d + 2 * rb));
  S* tile = scratch.data();
  S* acc = tile + rb * ct;
  S* run_max = acc + rb * d;
  S* run_sum = run_max + rb;

  for (std::int64_t r0 = 0; r0 < t_len; r0 += rb) {
    std::int64_t rows = std::min(rb, t_len - r0);
    Eigen::Map<const RowMat<S>> mq(q + r0 * d, rows, d);
    std::fill(acc, acc + rows * d, S(0));
    std::fill(run_sum, run_sum + rows, S(0));
    std::fill(run_max, run_max + rows, std::numeric_limits<S>::lowest());
    for (std::int64_t c0 = 0; c0 < t_len; c0 += ct) {
      std::int64_t cols = std::min(ct, t_len - c0);
      Eigen::Map<const RowMat<S>> mk(k + c0 * d, cols, d);
      Eigen::Map<const RowMat<S>> mv(v + c0 * d, cols, d);
      Eigen::Map<RowMat<S>> mt(tile, rows, cols);
      mt.noalias() = mq * mk.transpose() * scale;
      for (std::int64_t i = 0; i < rows; ++i) {
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> row(tile + i * cols, cols);
        S m_new = std::max(run_max[i], row.maxCoeff());
        S corr = std::exp(run_max[i] - m_new);
        row = (row - m_new).exp();
        run_sum[i] = run_sum[i] * corr + row.sum();
        run_max[i] = m_new;
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> acc_row(acc + i * d, d);
        acc_row *= corr;
      }
      Eigen::Map<RowMat<S>> macc(acc, rows, d);
      macc.noalias() += mt * mv;
    }
    for (std::int64_t i = 0; i < rows; ++i) {
      S inv = S(1) / run_sum[i];
      for (std::int64_t j = 0; j < d; ++j) out[(r0 + i) * d + j] = acc[i * d + j] * inv;
    }
  }
}

/// Backward of the row-blocked attention (probabilities recomputed per block).
template <typename S>
void softmax_attention_bwd(const S* q, const S* k, const S* v, const S* dout, std::int64_t t_len,
                           std::int64_t d, S* dq, S* dk, S* dv, std::vector<S>& scratch,
                           std::int64_t row_block = 1024) {
  S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  std::int64_t rb = std::min(row_block, t_len);
  scratch.resize(static_cast<std::size_t>(2 * rb * t_len));
  std::fill(dk, dk + t_len * d, S(0));
  std::fill(dv, dv + t_len * d, S(0));
  Eigen::Map<const RowMat<S>> mk(k, t_len, d);
  Eigen::Map<const RowMat<S>> mv(v, t_len, d);
  Eigen::Map<const RowMat<S>> mq_all(q, t_len, d);
  Eigen::Map<RowMat<S>> mdk(dk, t_len, d);
  Eigen::Map<RowMat<S>> mdv(dv, t_len, d);
  for (std::int64_t r0 = 0; r0 < t_len; r0 += rb) {
    std::int64_t rows = std::min(rb, t_len - r0);
    S* p = scratch.data();
    S* dp = scratch.data() + rows * t_len;
    Eigen::Map<const RowMat<S>> mq(q + r0 * d, rows, d);
    Eigen::Map<const RowMat<S>> mdo(dout + r0 * d, rows, d);
    Eigen::Map<RowMat<S>> mp(p, rows, t_len);
    Eigen::Map<RowMat<S>> mdp(dp, rows, t_len);
    mp.noalias() = mq * mk.transpose() * scale;
    for (std::int64_t i = 0; i < rows; ++i) {
      S* row = p + i * t_len;
      S mx = row[0];
      for (std::int64_t j = 1; j < t_len; ++j) mx = std::max(mx, row[j]);
      S z = S(0);
      for (std::int64_t j = 0; j < t_len; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      S inv = S(1) / z;
      for (std::int64_t j = 0; j < t_len; ++j) row[j] *= inv;
    }
    mdv.noalias() += mp.transpose() * mdo;
    mdp.noalias() = mdo * mv.transpose();
    for (std::int64_t i = 0; i < rows; ++i) {
      S dot = S(0);
      for (std::int64_t j = 0; j < t_len; ++j) dot += dp[i * t_len + j] * p[i * t_len + j];
      for (std::int64_t j = 0; j < t_len; ++j)
        dp[i * t_len + j] = (dp[i * t_len + j] - dot) * p[i * t_len + j] * scale;
    }
    Eigen::Map<RowMat<S>> mdq(dq + r0 * d, rows, d);
    mdq.noalias() = mdp * mk;
    mdk.noalias() += mdp.transpose() * mq_all.middleRows(r0, rows);
  }
}

/// Checkpointed BPTT for the gated scan: states stored at chunk boundaries,
/// recomputed within a chunk during the reverse sweep.
template <typename S>
void gla_recurrent_bwd(const S* q, const S* k, const S* v, const S* alpha, const S* beta,
                       const S* dout, std::int64_t l, std::int64_t dk_n, std::int64_t dv_n,
                       S* dq, S* dkk, S* dvv, S* da, S* db, std::int64_t ckpt = 64) {
  std::int64_t n_ckpt = (l + ckpt - 1) / ckpt;
  std::vector<S> boundary(static_cast<std::size_t>((n_ckpt + 1) * dk_n * dv_n), S(0));
  std::vector<S> states(static_cast<std::size_t>((ckpt + 1) * dk_n * dv_n));
  std::vector<S> ds(static_cast<std::size_t>(dk_n * dv_n), S(0));
  // forward pass saving boundary states
  {
    std::vector<S> s(static_cast<std::size_t>(dk_n * dv_n), S(0));
    for (std::int64_t t = 0; t < l; ++t) {
      if (t % ckpt == 0)
        std::copy(s.begin(), s.end(), boundary.begin() + (t / ckpt) * dk_n * dv_n);
      for (std::int64_t i = 0; i < dk_n; ++i)
        for (std::int64_t j = 0; j < dv_n; ++j)
          s[i * dv_n + j] = alpha[t * dk_n + i] * beta[t * dv_n + j] * s[i * dv_n + j] +
                            k[t * dk_n + i] * v[t * dv_n + j];
    }
  }
  for (std::int64_t c = n_ckpt - 1; c >= 0; --c) {
    std::int64_t c0 = c * ckpt, ce = std::min(c0 + ckpt, l);
    std::copy(boundary.begin() + c * dk_n * dv_n, boundary.begin() + (c + 1) * dk_n * dv_n,
              states.begin());
    for (std::int64_t t = c0; t < ce; ++t) {
      const S* sp = states.data() + (t - c0) * dk_n * dv_n;
      S* sn = states.data() + (t - c0 + 1) * dk_n * dv_n;
      for (std::int64_t i = 0; i < dk_n; ++i)
        for (std::int64_t j = 0; j < dv_n; ++j)
          sn[i * dv_n + j] = alpha[t * dk_n + i] * beta[t * dv_n + j] * sp[i * dv_n + j] +
                             k[t * dk_n + i] * v[t * dv_n + j];
    }
    for (std::int64_t t = ce - 1; t >= c0; --t) {
      const S* st = states.data() + (t - c0 + 1) * dk_n * dv_n;
      const S* sprev = states.data() + (t - c0) * dk_n * dv_n;
      for (std::int64_t i = 0; i < dk_n; ++i) {
        S acc_q = S(0), acc_k = S(0), acc_a = S(0);
        for (std::int64_t j = 0; j < dv_n; ++j) {
          S go = dout[t * dv_n + j];
          acc_q += go * st[i * dv_n + j];
          S dsij = ds[i * dv_n + j] + q[t * dk_n + i] * go;
          acc_k += dsij * v[t * dv_n + j];
          S dgij = dsij * sprev[i * dv_n + j];
          acc_a += dgij * beta[t * dv_n + j];
          dvv[t * dv_n + j] += dsij * k[t * dk_n + i];
          db[t * dv_n + j] += dgij * alpha[t * dk_n + i];
          ds[i * dv_n + j] = dsij * alpha[t * dk_n + i] * beta[t * dv_n + j];
        }
        dq[t * dk_n + i] += acc_q;
        dkk[t * dk_n + i] += acc_k;
        da[t * dk_n + i] += acc_a;
      }
    }
  }
}

// ============================================================================
// Timing
// ============================================================================

struct TimingStats {
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
};

/// Medians over `repeats` samples after warmups. Fast bodies run in an inner
/// loop sized so each sample spans at least `min_sample_ms` of wall clock.
inline TimingStats time_median(const std::function<void()>& fn, int repeats = 5, int warmups = 2,
                               double min_sample_ms = 10.0) {
  auto once = [&] {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  double est = once();
  int iters = est >= min_sample_ms ? 1 : static_cast<int>(std::ceil(min_sample_ms / std::max(est, 1e-4)));
  for (int i = 1; i < warmups; ++i) fn();
  std::vector<double> ms;
  for (int i = 0; i < repeats; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    for (int k = 0; k < iters; ++k) fn();
    double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ms.push_back(total / iters);
  }
  std::sort(ms.begin(), ms.end());
  auto at = [&](double f) {
    double pos = f * static_cast<double>(ms.size() - 1);
    return ms[static_cast<std::size_t>(std::llround(pos))];
  };
  return {at(0.5), at(0.1), at(0.9)};
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope fit needs matched points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  double n = static_cast<double>(x.size());
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ============================================================================
// Scaling study: chunked GLA vs softmax attention across sequence lengths
// ============================================================================

struct BenchSample {
  std::string method;
  std::int64_t t_len = 0, d = 0, m = 0;
  TimingStats stats;
  std::int64_t est_peak_bytes = 0;
};

struct ScalingReport {
  std::vector<BenchSample> samples;
  std::map<std::string, double> slopes;
  std::int64_t crossover_t = -1;  // smallest T where chunked GLA beats softmax
  bool backward = false;
  bool f32 = true;
};

namespace detail {

template <typename S>
void fill_qkv(Rng& rng, std::int64_t t_len, std::int64_t d, std::vector<S>& q, std::vector<S>& k,
              std::vector<S>& v, std::vector<S>& a, std::vector<S>& b, double tau = 16.0) {
  q.resize(static_cast<std::size_t>(t_len * d));
  k.resize(q.size());
  v.resize(q.size());
  a.resize(q.size());
  b.resize(q.size());
  double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& x : q) x = static_cast<S>(rng.normal() * inv);
  for (auto& x : k) x = static_cast<S>(rng.normal() * inv);
  for (auto& x : v) x = static_cast<S>(rng.normal() * inv);
  auto gate = [&] {
    double z = rng.normal();
    return static_cast<S>(std::pow(1.0 / (1.0 + std::exp(-z)), 1.0 / tau));
  };
  for (auto& x : a) x = gate();
  for (auto& x : b) x = gate();
}

/// Kernels must agree with the f64 reference before they are timed.
template <typename S>
void equivalence_precheck() {
  Rng rng(97);
  std::int64_t t_len = 48, d = 12;
  std::vector<S> q, k, v, a, b;
  fill_qkv<S>(rng, t_len, d, q, k, v, a, b);
  auto to_tensor = [&](const std::vector<S>& src, std::vector<std::int64_t> shape) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] = static_cast<double>(src[static_cast<std::size_t>(i)]);
    return t;
  };
  Tensor tq = to_tensor(q, {t_len, d}), tk = to_tensor(k, {t_len, d}), tv = to_tensor(v, {t_len, d});
  Tensor ta = to_tensor(a, {t_len, d}), tb = to_tensor(b, {t_len, d});
  double tol = std::is_same_v<S, float> ? 2e-3 : 1e-10;

  std::vector<S> out(static_cast<std::size_t>(t_len * d)), scratch;
  softmax_attention_fwd<S>(q.data(), k.data(), v.data(), t_len, d, out.data(), scratch);
  Tensor ref = softmax_attention(tq, tk, tv, false);
  if (max_abs_diff(to_tensor(out, {t_len, d}), ref) > tol)
    throw NumericError("bench softmax kernel failed its oracle precheck");

  std::vector<S> state(static_cast<std::size_t>(d * d), S(0));
  kernels::gla_chunked<S>(q.data(), k.data(), v.data(), a.data(), b.data(), t_len, d, d, 16,
                          out.data(), state.data());
  Tensor gref = gla_scan_chunked_ab(tq, tk, tv, ta, tb, ChunkSpec(16));
  if (max_abs_diff(to_tensor(out, {t_len, d}), gref) > tol)
    throw NumericError("bench chunked GLA kernel failed its oracle precheck");
}

}  // namespace detail

struct ScalingOptions {
  std::int64_t d = 64;
  std::int64_t chunk = 64;
  std::vector<std::int64_t> t_list = {256, 1024, 4096, 16384};
  std::int64_t batch = 1;
  int repeats = 5, warmups = 2;
  bool backward = false;
  bool f32 = true;
  std::uint64_t seed = 0;
};

template <typename S>
ScalingReport scaling_run_typed(const ScalingOptions& opt) {
  for (std::size_t i = 1; i < opt.t_list.size(); ++i)
    if (opt.t_list[i] <= opt.t_list[i - 1]) throw ConfigError("T list must be ascending");
  detail::equivalence_precheck<S>();

  ScalingReport rep;
  rep.backward = opt.backward;
  rep.f32 = std::is_same_v<S, float>;
  std::int64_t bytes = static_cast<std::int64_t>(sizeof(S));
  std::vector<double> soft_ms, gla_ms, ts;

  for (std::int64_t t_len : opt.t_list) {
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(t_len)));
    std::vector<S> q, k, v, a, b;
    detail::fill_qkv<S>(rng, t_len, opt.d, q, k, v, a, b);
    std::vector<S> out(static_cast<std::size_t>(t_len * opt.d)), scratch;
    std::vector<S> dq, dkk, dvv, da, db, dout;
    if (opt.backward) {
      dq.resize(out.size());
      dkk.resize(out.size());
      dvv.resize(out.size());
      da.resize(out.size());
      db.resize(out.size());
      dout.assign(out.size(), S(1));
    }

    auto soft = time_median(
        [&] {
          for (std::int64_t rep_b = 0; rep_b < opt.batch; ++rep_b) {
            softmax_attention_fwd<S>(q.data(), k.data(), v.data(), t_len, opt.d, out.data(), scratch);
            if (opt.backward)
              softmax_attention_bwd<S>(q.data(), k.data(), v.data(), dout.data(), t_len, opt.d,
                                       dq.data(), dkk.data(), dvv.data(), scratch);
          }
        },
        opt.repeats, opt.warmups);
    rep.samples.push_back(
        {"softmax", t_len, opt.d, 0, soft, opt.batch * t_len * t_len * bytes});

    std::vector<S> state(static_cast<std::size_t>(opt.d * opt.d));
    auto gla = time_median(
        [&] {
          for (std::int64_t rep_b = 0; rep_b < opt.batch; ++rep_b) {
            std::fill(state.begin(), state.end(), S(0));
            kernels::gla_chunked<S>(q.data(), k.data(), v.data(), a.data(), b.data(), t_len, opt.d,
                                    opt.d, opt.chunk, out.data(), state.data());
            if (opt.backward) {
              std::fill(dq.begin(), dq.end(), S(0));
              std::fill(da.begin(), da.end(), S(0));
              std::fill(db.begin(), db.end(), S(0));
              std::fill(dvv.begin(), dvv.end(), S(0));
              gla_recurrent_bwd<S>(q.data(), k.data(), v.data(), a.data(), b.data(), dout.data(),
                                   t_len, opt.d, opt.d, dq.data(), dkk.data(), dvv.data(), da.data(),
                                   db.data(), opt.chunk);
            }
          }
        },
        opt.repeats, opt.warmups);
    rep.samples.push_back(
        {"gla_chunked", t_len, opt.d, opt.chunk, gla, opt.batch * (opt.chunk * opt.d + opt.d * opt.d) * bytes});

    ts.push_back(static_cast<double>(t_len));
    soft_ms.push_back(soft.median_ms);
    gla_ms.push_back(gla.median_ms);
    if (rep.crossover_t < 0 && gla.median_ms < soft.median_ms) rep.crossover_t = t_len;
  }
  if (ts.size() >= 4) {
    rep.slopes["softmax"] = loglog_slope(ts, soft_ms);
    rep.slopes["gla_chunked"] = loglog_slope(ts, gla_ms);
  }
  return rep;
}

inline ScalingReport scaling_run(const ScalingOptions& opt) {
  return opt.f32 ? scaling_run_typed<float>(opt) : scaling_run_typed<double>(opt);
}

/// Analytic working-memory estimate, bytes per batch element.
inline std::int64_t softmax_peak_bytes(std::int64_t t_len, std::int64_t elem = 4) {
  return t_len * t_len * elem;
}
inline std::int64_t gla_peak_bytes(std::int64_t m, std::int64_t d, std::int64_t dk, std::int64_t dv,
                                   std::int64_t elem = 4) {
  return (m * d + dk * dv) * elem;
}

// ============================================================================
// Scan-strategy comparison
// ============================================================================

struct ScanStrategyRow {
  std::string name;
  std::int64_t matrix_ops = 0, scan_ops = 0;
  TimingStats stats;
};

/// Times the three scan strategies on equal inputs and records their extra
/// operation counts. Sizes follow an XL-flavoured toy: T=256 tokens.
inline std::vector<ScanStrategyRow> scan_strategy_bench(std::int64_t d = 512, std::int64_t t_len = 256,
                                                        int repeats = 5, std::uint64_t seed = 3) {
  Rng rng(derive_seed(seed, 0xbe9c));
  GLAParams p = GLAParams::init(rng, d, std::max<std::int64_t>(1, d / 8),
                                std::max<std::int64_t>(1, d / 4), std::max<std::int64_t>(1, d / 64),
                                16.0);
  Tensor x = Tensor::randn(rng, {t_len, d});
  GLAMode mode = GLAMode::chunked(64);

  std::vector<ScanStrategyRow> rows;
  OpCounter c;
  {
    ScanStrategyRow r{"block_by_block", 0, 0, {}};
    r.stats = time_median([&] { scan_block(x, p, 0, mode, &c); }, repeats);
    r.matrix_ops = c.matrix_ops;
    r.scan_ops = c.scan_ops;
    rows.push_back(r);
  }
  {
    ScanStrategyRow r{"bidirectional", 0, 0, {}};
    r.stats = time_median([&] { scan_bidirectional(x, p, mode, &c); }, repeats);
    r.matrix_ops = c.matrix_ops;
    r.scan_ops = c.scan_ops;
    rows.push_back(r);
  }
  {
    ScanStrategyRow r{"four_directional", 0, 0, {}};
    r.stats = time_median([&] { scan_4directional(x, p, mode, &c); }, repeats);
    r.matrix_ops = c.matrix_ops;
    r.scan_ops = c.scan_ops;
    rows.push_back(r);
  }
  return rows;
}

// ============================================================================
// FLOP table
// ============================================================================

struct FlopsRow {
  std::string name;
  double gflops = 0, dit_gflops = 0, ratio = 0;
};

inline std::vector<FlopsRow> flops_table(const std::vector<std::string>& presets) {
  std::vector<FlopsRow> rows;
  for (const auto& name : presets) {
    ModelConfig cfg = make_preset(name);
    FlopsEstimate e = flops_estimate(cfg);
    rows.push_back({name, e.gflops, e.dit_gflops, e.ratio_vs_dit});
  }
  return rows;
}

// ============================================================================
// Emission
// ============================================================================

inline std::string scaling_csv(const ScalingReport& rep) {
  std::ostringstream os;
  os << "method,T,D,M,median_ms,p10_ms,p90_ms,est_peak_bytes\n";
  for (const auto& s : rep.samples)
    os << s.method << "," << s.t_len << "," << s.d << "," << s.m << "," << s.stats.median_ms << ","
       << s.stats.p10_ms << "," << s.stats.p90_ms << "," << s.est_peak_bytes << "\n";
  return os.str();
}

inline nlohmann::json scaling_json(const ScalingReport& rep) {
  nlohmann::json j;
  j["backward"] = rep.backward;
  j["f32"] = rep.f32;
  j["crossover_T"] = rep.crossover_t;
  for (const auto& [k, v] : rep.slopes) j["slopes"][k] = v;
  return j;
}

inline std::string scan_strategy_csv(const std::vector<ScanStrategyRow>& rows) {
  std::ostringstream os;
  os << "strategy,extra_matrix_ops,extra_scan_ops,median_ms,p10_ms,p90_ms\n";
  for (const auto& r : rows)
    os << r.name << "," << r.matrix_ops << "," << r.scan_ops << "," << r.stats.median_ms << ","
       << r.stats.p10_ms << "," << r.stats.p90_ms << "\n";
  return os.str();
}

}  // namespace dig::bench
