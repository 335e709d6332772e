// SPDX-License-Identifier: Apache-2.0
//
// Benchmark plumbing: kernel prechecks, slope fitting, op-count table,
// memory estimators. Full-size timing lives in the acceptance suite.

#include <catch2/catch_amalgamated.hpp>

#include "dig/bench.hpp"

using namespace dig;

TEST_CASE("loglog slope recovers exact power laws", "[bench]") {
  std::vector<double> x{256, 1024, 4096, 16384}, y1, y2;
  for (double v : x) {
    y1.push_back(3.0 * v * v);
    y2.push_back(0.5 * v);
  }
  CHECK(bench::loglog_slope(x, y1) == Catch::Approx(2.0).margin(1e-9));
  CHECK(bench::loglog_slope(x, y2) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("bench f64 kernels agree with tensor-level references", "[bench]") {
  Rng rng(141);
  std::int64_t t_len = 40, d = 8;
  Tensor q = Tensor::randn(rng, {t_len, d});
  Tensor k = Tensor::randn(rng, {t_len, d});
  Tensor v = Tensor::randn(rng, {t_len, d});

  std::vector<double> out(static_cast<std::size_t>(t_len * d)), scratch;
  bench::softmax_attention_fwd<double>(q.data(), k.data(), v.data(), t_len, d, out.data(), scratch, 16);
  Tensor got({t_len, d}, out);
  CHECK(max_abs_diff(got, softmax_attention(q, k, v, false)) < 1e-11);
}

TEST_CASE("bench softmax backward matches finite differences", "[bench]") {
  Rng rng(142);
  std::int64_t t_len = 6, d = 3;
  std::vector<double> q(t_len * d), k(t_len * d), v(t_len * d), scratch;
  for (auto& x : q) x = rng.normal();
  for (auto& x : k) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  std::vector<double> out(t_len * d), dout(t_len * d);
  Rng rng2(143);
  for (auto& x : dout) x = rng2.normal();

  auto loss = [&](const std::vector<double>& qq, const std::vector<double>& kk,
                  const std::vector<double>& vv) {
    std::vector<double> o(t_len * d), s;
    bench::softmax_attention_fwd<double>(qq.data(), kk.data(), vv.data(), t_len, d, o.data(), s, 4);
    double acc = 0;
    for (std::size_t i = 0; i < o.size(); ++i) acc += o[i] * dout[i];
    return acc;
  };

  std::vector<double> dq(t_len * d), dk(t_len * d), dv(t_len * d);
  bench::softmax_attention_bwd<double>(q.data(), k.data(), v.data(), dout.data(), t_len, d, dq.data(),
                                       dk.data(), dv.data(), scratch, 4);
  double h = 1e-6;
  auto fd_check = [&](std::vector<double>& buf, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < buf.size(); i += 3) {
      double orig = buf[i];
      buf[i] = orig + h;
      double fp = loss(q, k, v);
      buf[i] = orig - h;
      double fm = loss(q, k, v);
      buf[i] = orig;
      double fd = (fp - fm) / (2 * h);
      CHECK(std::abs(fd - grad[i]) < 1e-5 * std::max({1.0, std::abs(fd), std::abs(grad[i])}));
    }
  };
  fd_check(q, dq);
  fd_check(k, dk);
  fd_check(v, dv);
}

TEST_CASE("checkpointed scan backward equals the autodiff node", "[bench]") {
  Rng rng(144);
  std::int64_t l = 23, dk_n = 3, dv_n = 4;
  Tensor q = Tensor::randn(rng, {l, dk_n});
  Tensor k = Tensor::randn(rng, {l, dk_n});
  Tensor v = Tensor::randn(rng, {l, dv_n});
  Tensor a = Tensor::uniform(rng, {l, dk_n}, 0.2, 0.95);
  Tensor b = Tensor::uniform(rng, {l, dv_n}, 0.2, 0.95);

  Tape tape;
  Var qv = tape.leaf(q), kv = tape.leaf(k), vv = tape.leaf(v), av = tape.leaf(a), bv = tape.leaf(b);
  Var o = ad::gla_scan_gated(qv, kv, vv, av, bv, 1);
  tape.backward(ad::sum_all(o));

  std::vector<double> dq(l * dk_n), dkk(l * dk_n), da(l * dk_n), dvv(l * dv_n), db(l * dv_n);
  std::vector<double> dout(static_cast<std::size_t>(l * dv_n), 1.0);
  bench::gla_recurrent_bwd<double>(q.data(), k.data(), v.data(), a.data(), b.data(), dout.data(), l,
                                   dk_n, dv_n, dq.data(), dkk.data(), dvv.data(), da.data(), db.data(),
                                   8);
  CHECK(max_abs_diff(Tensor({l, dk_n}, dq), tape.grad(qv)) < 1e-11);
  CHECK(max_abs_diff(Tensor({l, dk_n}, dkk), tape.grad(kv)) < 1e-11);
  CHECK(max_abs_diff(Tensor({l, dv_n}, dvv), tape.grad(vv)) < 1e-11);
  CHECK(max_abs_diff(Tensor({l, dk_n}, da), tape.grad(av)) < 1e-11);
  CHECK(max_abs_diff(Tensor({l, dv_n}, db), tape.grad(bv)) < 1e-11);
}

TEST_CASE("scaling smoke run produces samples, slopes and prechecks", "[bench]") {
  bench::ScalingOptions opt;
  opt.d = 16;
  opt.chunk = 16;
  opt.t_list = {64, 128, 256, 512};
  opt.repeats = 2;
  opt.warmups = 1;
  bench::ScalingReport rep = bench::scaling_run(opt);
  CHECK(rep.samples.size() == 8);
  CHECK(rep.slopes.count("softmax") == 1);
  CHECK(rep.slopes.count("gla_chunked") == 1);
  std::string csv = bench::scaling_csv(rep);
  CHECK(csv.find("method,T,D,M") == 0);
  auto bad_run = [] {
    bench::ScalingOptions bad;
    bad.t_list = {64, 64};
    bench::scaling_run(bad);
  };
  CHECK_THROWS_AS(bad_run(), ConfigError);
}

TEST_CASE("M=T degenerates the chunked scan toward quadratic cost", "[bench][slow]") {
  std::vector<std::int64_t> ts{128, 256, 512, 1024};
  std::int64_t d = 32;
  auto slope_for = [&](bool full_chunk) {
    std::vector<double> xs, ys;
    for (std::int64_t t_len : ts) {
      Rng rng(7);
      std::vector<float> q, k, v, a, b;
      bench::detail::fill_qkv<float>(rng, t_len, d, q, k, v, a, b);
      std::vector<float> out(static_cast<std::size_t>(t_len * d));
      std::vector<float> state(static_cast<std::size_t>(d * d));
      std::int64_t m = full_chunk ? t_len : 64;
      auto stats = bench::time_median(
          [&] {
            std::fill(state.begin(), state.end(), 0.f);
            kernels::gla_chunked<float>(q.data(), k.data(), v.data(), a.data(), b.data(), t_len, d, d,
                                        m, out.data(), state.data());
          },
          3, 1, 5.0);
      xs.push_back(static_cast<double>(t_len));
      ys.push_back(stats.median_ms);
    }
    return bench::loglog_slope(xs, ys);
  };
  double slope_m64 = slope_for(false);
  double slope_mt = slope_for(true);
  INFO("slope M=64: " << slope_m64 << ", slope M=T: " << slope_mt);
  CHECK(slope_mt > slope_m64 + 0.3);
}

TEST_CASE("memory estimate favors chunked GLA by over 10x at T=4096", "[bench]") {
  double ratio = static_cast<double>(bench::softmax_peak_bytes(4096)) /
                 static_cast<double>(bench::gla_peak_bytes(64, 64, 64, 64));
  CHECK(ratio > 10.0);
}

TEST_CASE("scan strategy rows carry the exact op counts", "[bench]") {
  auto rows = bench::scan_strategy_bench(64, 64, 1);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "block_by_block");
  CHECK(rows[0].matrix_ops == 2);
  CHECK(rows[0].scan_ops == 0);
  CHECK(rows[1].name == "bidirectional");
  CHECK(rows[1].matrix_ops == 3);
  CHECK(rows[1].scan_ops == 1);
  CHECK(rows[2].name == "four_directional");
  CHECK(rows[2].matrix_ops == 13);
  CHECK(rows[2].scan_ops == 3);
  std::string csv = bench::scan_strategy_csv(rows);
  CHECK(csv.find("strategy,") == 0);
}

TEST_CASE("flops table covers the presets", "[bench]") {
  auto rows = bench::flops_table({"dig-s", "dig-b", "dig-l", "dig-xl", "udig-s"});
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].gflops == Catch::Approx(4.30).margin(0.05 * 4.30));
  CHECK(rows[1].gflops == Catch::Approx(17.07).margin(0.05 * 17.07));
  CHECK(rows[2].gflops == Catch::Approx(61.66).margin(0.05 * 61.66));
  CHECK(rows[3].gflops == Catch::Approx(89.40).margin(0.05 * 89.40));
  CHECK(rows[4].gflops == Catch::Approx(4.10).margin(0.05 * 4.10));
}
