// Copyright 2026 The picontrol Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// picontrol: generate demonstrations, train and evaluate path-integral
// networks, check gradients and export cost maps.
//
//   picontrol gen-data --config linear.json --out runs/lin/data
//   picontrol train --config linear.json --data runs/lin/data --out runs/lin/train
//   picontrol eval --profile paper --checkpoint runs/p/train/checkpoint.json --out runs/p/eval

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "picontrol/app.hpp"

namespace app = picontrol::app;

int main(int argc, char** argv) {
  CLI::App cli{"Path-integral network experiments"};
  cli.require_subcommand(1);

  app::CommonOptions common;
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<long long> grid;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", config, "JSON experiment configuration")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Master seed (overrides the config)");
    sub->add_option("--profile", common.profile, "Default profile")
        ->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--env", common.environment, "Environment (overrides the config)")
        ->check(CLI::IsMember({"linear", "pendulum"}));
    sub->add_option("--threads", common.threads, "Worker threads, 0 = all cores");
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
    auto* o = sub->add_option("--out", out, "Output directory");
    if (needs_out) o->required();
  };

  auto* gen = cli.add_subcommand("gen-data", "Generate a demonstration dataset");
  add_common(gen, true);

  auto* train = cli.add_subcommand("train", "Pre-train and train a PI-Net");
  add_common(train, true);
  train->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--resume", resume, "Continue from checkpoint_last.json")
      ->check(CLI::ExistingFile);

  auto* eval = cli.add_subcommand("eval", "Dataset MSEs and closed-loop metrics");
  add_common(eval, true);
  eval->add_option("--data", data, "Dataset directory")->check(CLI::ExistingDirectory);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->check(CLI::ExistingFile);

  auto* sim = cli.add_subcommand("simulate", "Write closed-loop trajectory logs");
  add_common(sim, true);
  sim->add_option("--data", data, "Dataset directory")->check(CLI::ExistingDirectory);
  sim->add_option("--checkpoint", checkpoint, "Checkpoint to simulate")->check(CLI::ExistingFile);

  auto* gc = cli.add_subcommand("gradcheck", "Finite-difference check of the reverse pass");
  add_common(gc, false);

  auto* cm = cli.add_subcommand("export-costmap", "Evaluate a cost model on a state grid");
  add_common(cm, true);
  cm->add_option("--checkpoint", checkpoint, "Checkpoint holding the cost model (default: teacher)")
      ->check(CLI::ExistingFile);
  cm->add_option("--grid", grid, "Points per axis")->check(CLI::Range(2, 100000));

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? app::kExitOk : app::kExitValidation;
  }

  return app::run_guarded(
      [&]() -> int {
        if (config) common.config = *config;
        app::ExperimentConfig cfg = [&] {
          if (!grid) return app::resolve_config(common);
          // Fold the flag into the resolved configuration so it is echoed.
          app::ExperimentConfig base = app::resolve_config(common);
          base.resolved["costmap"]["grid"] = *grid;
          return app::parse_config(base.resolved);
        }();
        std::optional<app::fs::path> ck;
        if (checkpoint) ck = *checkpoint;
        std::optional<app::fs::path> dd;
        if (data) dd = *data;

        if (gen->parsed()) return app::cmd_gen_data(cfg, *out, common.force);
        if (train->parsed()) {
          app::TrainOptions t{*data, std::nullopt};
          if (resume) t.resume = *resume;
          return app::cmd_train(cfg, t, *out, common.force);
        }
        if (eval->parsed()) return app::cmd_eval(cfg, {dd, ck}, *out, common.force);
        if (sim->parsed()) return app::cmd_simulate(cfg, {dd, ck}, *out, common.force);
        if (gc->parsed()) {
          std::optional<app::fs::path> o;
          if (out) o = *out;
          return app::cmd_gradcheck(cfg, o, common.force);
        }
        return app::cmd_export_costmap(cfg, ck, *out, common.force);
      },
      std::cerr);
}
