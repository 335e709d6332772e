// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: train / sample / bench / flops / check.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "dig/checks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct LoadedConfig {
  dig::ModelConfig model;
  dig::TrainConfig train;
};

LoadedConfig load_config(const std::string& name_or_path) {
  LoadedConfig lc;
  if (name_or_path.find('.') == std::string::npos && name_or_path.find('/') == std::string::npos) {
    lc.model = dig::make_preset(name_or_path);
    if (name_or_path.rfind("toy", 0) == 0) {
      lc.train.t_steps = 100;
      if (name_or_path == "toy-s" || name_or_path == "toy-b") lc.train.ema_decay = 0.996;
    }
    return lc;
  }
  dig::ConfigMap m = dig::parse_config_file(name_or_path);
  lc.model = dig::model_config_from_map(m);
  lc.train = dig::train_config_from_map(m);
  return lc;
}

void write_pgm(const std::string& path, const dig::Tensor& img) {
  if (img.extent(0) != 1) return;  // grayscale dump only makes sense for C = 1
  std::int64_t h = img.extent(1), w = img.extent(2);
  double lo = img.at(0), hi = img.at(0);
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    lo = std::min(lo, img.at(i));
    hi = std::max(hi, img.at(i));
  }
  double span = std::max(hi - lo, 1e-12);
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    auto byte = static_cast<unsigned char>(std::llround(255.0 * (img.at(i) - lo) / span));
    os.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

int cmd_train(const std::string& config, std::int64_t steps, std::int64_t seed, const std::string& out) {
  LoadedConfig lc = load_config(config);
  if (steps >= 0) lc.train.steps = steps;
  if (seed >= 0) lc.train.seed = static_cast<std::uint64_t>(seed);
  fs::create_directories(out);

  dig::ToyDataset ds = dig::make_toy_dataset(lc.train.dataset, lc.train.dataset_size, lc.train.seed,
                                             lc.model.channels, lc.model.image, lc.model.num_classes);
  std::ofstream metrics(out + "/metrics.jsonl");
  dig::NoiseSchedule sched =
      dig::NoiseSchedule::linear(lc.train.t_steps, lc.train.beta_start, lc.train.beta_end);
  dig::DiGModel init_model = dig::DiGModel::create(lc.model, lc.train.seed);
  auto [s0, v0] = dig::eval_losses(init_model, ds, sched, lc.train.seed + 99);

  dig::TrainState st = dig::train(lc.model, lc.train, ds, &metrics, [](const dig::StepMetrics& m) {
    if (m.step % 100 == 0)
      std::cerr << "step " << m.step << " loss_simple " << m.loss_simple << " loss_vb " << m.loss_vb
                << "\n";
  });
  auto [s1, v1] = dig::eval_losses(st.model, ds, sched, lc.train.seed + 99);
  dig::save_train_state(out + "/checkpoint.dig", st);

  json summary;
  summary["preset"] = lc.model.name;
  summary["steps"] = st.step;
  summary["eval_loss_simple_initial"] = s0;
  summary["eval_loss_simple_final"] = s1;
  summary["eval_loss_vb_initial"] = v0;
  summary["eval_loss_vb_final"] = v1;
  summary["checkpoint"] = out + "/checkpoint.dig";
  summary["metrics"] = out + "/metrics.jsonl";
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_sample(const std::string& config, const std::string& ckpt, std::int64_t seed, std::int64_t count,
               std::int64_t label, std::int64_t t_steps, const std::string& out) {
  fs::create_directories(out);
  dig::DiGModel model;
  if (!ckpt.empty()) {
    dig::TrainState st = dig::load_train_state(ckpt);
    model = st.ema_model();  // images come from the EMA weights
  } else {
    LoadedConfig lc = load_config(config);
    model = dig::DiGModel::create(lc.model, static_cast<std::uint64_t>(std::max<std::int64_t>(seed, 0)));
  }
  dig::NoiseSchedule sched = dig::NoiseSchedule::linear(t_steps);
  json summary;
  summary["count"] = count;
  summary["files"] = json::array();
  for (std::int64_t i = 0; i < count; ++i) {
    std::int64_t y = label >= 0 ? label : i % model.cfg.num_classes;
    dig::Tensor img =
        dig::p_sample_loop(model, y, sched, static_cast<std::uint64_t>(seed) + static_cast<std::uint64_t>(i));
    std::string base = out + "/sample_" + std::to_string(i);
    dig::save_tensor_file(base + ".tensor", img);
    summary["files"].push_back(base + ".tensor");
    if (model.cfg.channels == 1) write_pgm(base + ".pgm", img);
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_bench(const std::string& out, const std::string& mode, std::int64_t chunk, bool backward,
              bool quick, std::int64_t d, std::int64_t seed) {
  fs::create_directories(out);
  dig::bench::ScalingOptions opt;
  opt.d = d;
  opt.chunk = mode == "recurrent" ? 1 : chunk;  // M = 1 runs the scan token by token
  opt.backward = backward;
  opt.seed = static_cast<std::uint64_t>(seed);
  if (quick) opt.t_list = {128, 256, 512, 1024};
  dig::bench::ScalingReport rep = dig::bench::scaling_run(opt);
  {
    std::ofstream os(out + "/scaling.csv");
    os << dig::bench::scaling_csv(rep);
  }
  auto rows = dig::bench::scan_strategy_bench(quick ? 128 : 512, 256, quick ? 3 : 5,
                                              static_cast<std::uint64_t>(seed));
  {
    std::ofstream os(out + "/scan_strategies.csv");
    os << dig::bench::scan_strategy_csv(rows);
  }
  json summary = dig::bench::scaling_json(rep);
  summary["scan_strategy_order_ok"] = rows[0].stats.median_ms < rows[1].stats.median_ms &&
                                      rows[1].stats.median_ms < rows[2].stats.median_ms;
  summary["files"] = {out + "/scaling.csv", out + "/scan_strategies.csv"};
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_flops(const std::string& config, bool all) {
  std::vector<std::string> names;
  if (all)
    names = {"dig-s", "dig-b", "dig-l", "dig-xl", "udig-s", "udig-b", "udig-l", "udig-xl"};
  else
    names = {config};
  for (const auto& n : names) {
    dig::ModelConfig cfg = dig::resolve_model_config(n);
    dig::FlopsEstimate e = dig::flops_estimate(cfg);
    json j;
    j["name"] = cfg.name;
    j["gflops"] = e.gflops;
    j["dit_gflops"] = e.dit_gflops;
    j["ratio_vs_dit"] = e.ratio_vs_dit;
    std::cout << j.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gated linear attention diffusion backbone: training, sampling and efficiency tools"};
  app.require_subcommand(1);

  std::string config = "toy-s", out = "out", ckpt, mode = "chunked";
  std::int64_t steps = -1, seed = 0, chunk = 64, count = 1, label = -1, t_steps = 100, d = 64;
  bool backward = false, quick = false, all = false;

  auto* train_cmd = app.add_subcommand("train", "train a toy diffusion model");
  train_cmd->add_option("--config", config, "preset name or config file");
  train_cmd->add_option("--steps", steps, "override training steps");
  train_cmd->add_option("--seed", seed, "seed");
  train_cmd->add_option("--out", out, "output directory");

  auto* sample_cmd = app.add_subcommand("sample", "draw samples with the ancestral sampler");
  sample_cmd->add_option("--config", config, "preset name or config file");
  sample_cmd->add_option("--ckpt", ckpt, "checkpoint file (samples use the EMA weights)");
  sample_cmd->add_option("--seed", seed, "seed");
  sample_cmd->add_option("--count", count, "number of samples");
  sample_cmd->add_option("--label", label, "class label (default: cycle)");
  sample_cmd->add_option("--t-steps", t_steps, "diffusion steps");
  sample_cmd->add_option("--out", out, "output directory");

  auto* bench_cmd = app.add_subcommand("bench", "scaling study and scan-strategy timing");
  bench_cmd->add_option("--out", out, "output directory");
  bench_cmd->add_option("--mode", mode, "recurrent|chunked")
      ->check(CLI::IsMember({"recurrent", "chunked"}));
  bench_cmd->add_option("--chunk", chunk, "chunk length M");
  bench_cmd->add_option("--d", d, "head width");
  bench_cmd->add_option("--seed", seed, "seed");
  bench_cmd->add_flag("--backward", backward, "time forward+backward");
  bench_cmd->add_flag("--quick", quick, "small T grid");

  auto* flops_cmd = app.add_subcommand("flops", "analytic Gflops for a config");
  flops_cmd->add_option("--config", config, "preset name or config file");
  flops_cmd->add_flag("--all", all, "all paper presets");

  auto* check_cmd = app.add_subcommand("check", "run the invariant battery");
  check_cmd->add_option("--seed", seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config, steps, seed, out);
    if (sample_cmd->parsed()) return cmd_sample(config, ckpt, seed, count, label, t_steps, out);
    if (bench_cmd->parsed()) return cmd_bench(out, mode, chunk, backward, quick, d, seed);
    if (flops_cmd->parsed()) return cmd_flops(config, all);
    if (check_cmd->parsed())
      return dig::run_self_checks(std::cout, static_cast<std::uint64_t>(seed)) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
