// Copyright Contributors to the blendfields project
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "blendfields/commands.hpp"

namespace bf = blendfields;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (defaults apply to missing keys)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "seed override");
  cmd->add_option("--set", c.set, "override, key.path=value (repeatable)");
}

std::vector<std::string> overrides(const Common& c) {
  std::vector<std::string> all = c.set;
  if (c.seed) all.push_back("seed=" + std::to_string(*c.seed));
  return all;
}

bf::RunConfig resolve(const Common& c) {
  const bf::RunConfig base = c.config.empty() ? bf::parse_config("{}") : bf::load_config(c.config);
  return bf::apply_overrides(base, overrides(c));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expression-driven volumetric avatars with blended residual radiance fields"};
  app.require_subcommand(1);

  Common gen_opts;
  auto* gen = app.add_subcommand("gen-data", "render the synthetic cylinder dataset");
  add_common(gen, gen_opts);

  Common train_opts;
  std::string train_data;
  std::string resume;
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_common(train, train_opts);
  train->add_option("--data", train_data, "dataset directory (default: paths.data)");
  train->add_option("--resume", resume, "checkpoint to continue from");

  Common render_opts;
  std::string render_ckpt;
  double render_e = 0.0;
  std::optional<int> render_cam;
  int orbit = 0;
  auto* render = app.add_subcommand("render", "render a trained model at an expression code");
  add_common(render, render_opts);
  render->add_option("--checkpoint", render_ckpt, "model checkpoint")->required();
  render->add_option("--expression", render_e, "expression code e")->required();
  auto* cam_opt = render->add_option("--camera", render_cam, "dataset camera index");
  render->add_option("--orbit", orbit, "render an orbit of N cameras")->excludes(cam_opt);

  Common eval_opts;
  std::string eval_ckpt;
  std::string eval_data;
  std::string split = "eval";
  bool save_images = false;
  auto* eval = app.add_subcommand("eval", "PSNR / SSIM against ground truth");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory (default: the one used for training)");
  eval->add_option("--split", split, "train or eval");
  eval->add_flag("--save-images", save_images, "also write the rendered images");

  Common inspect_opts;
  std::string inspect_ckpt;
  double inspect_e = 0.5;
  int inspect_cam = 0;
  auto* inspect = app.add_subcommand("inspect-weights", "visualise blend weights before and after smoothing");
  add_common(inspect, inspect_opts);
  inspect->add_option("--checkpoint", inspect_ckpt, "model checkpoint")->required();
  inspect->add_option("--expression", inspect_e, "expression code e");
  inspect->add_option("--camera", inspect_cam, "dataset camera index");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      bf::RunConfig cfg = resolve(gen_opts);
      const std::string out = gen_opts.out.empty() ? cfg.data_dir : gen_opts.out;
      const bf::Dataset ds = bf::cmd_gen_data(cfg, out);
      std::cout << "wrote " << ds.poses.size() << " poses x " << ds.cameras.size() << " cameras to " << out << '\n';
    } else if (*train) {
      bf::RunConfig cfg = resolve(train_opts);
      const std::string data = train_data.empty() ? cfg.data_dir : train_data;
      const std::string out = train_opts.out.empty() ? cfg.out_dir : train_opts.out;
      std::optional<bf::fs::path> from;
      if (!resume.empty()) from = resume;
      const auto result = bf::cmd_train(cfg, data, out, from, &std::cout);
      std::cout << "checkpoint " << result.checkpoint.string() << '\n';
    } else if (*render) {
      const auto run = bf::LoadedRun::open(render_ckpt, overrides(render_opts));
      const std::string out = render_opts.out.empty() ? "renders" : render_opts.out;
      if (!render_cam && orbit == 0) render_cam = 0;
      for (const auto& p : bf::cmd_render(run, render_e, render_cam, orbit, out)) std::cout << p.string() << '\n';
    } else if (*eval) {
      std::optional<bf::fs::path> data;
      if (!eval_data.empty()) data = eval_data;
      const auto run = bf::LoadedRun::open(eval_ckpt, overrides(eval_opts), data);
      const std::string out = eval_opts.out.empty() ? bf::fs::path(eval_ckpt).parent_path().string() : eval_opts.out;
      std::cout << bf::cmd_eval(run, split, out.empty() ? "." : out, save_images).to_text();
    } else if (*inspect) {
      const auto run = bf::LoadedRun::open(inspect_ckpt, overrides(inspect_opts));
      const std::string out = inspect_opts.out.empty() ? "weights" : inspect_opts.out;
      bf::cmd_inspect_weights(run, inspect_e, inspect_cam, out);
      std::cout << "wrote weight visualisations to " << out << '\n';
    }
  } catch (const bf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const bf::NonFiniteLoss& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const bf::SolverDiverged& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const bf::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
