// Copyright 2026 The ns Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Command-line entry point:
//   ns synth|pretrain|train|eval|probe --config <path> [overrides]
// The NS_SEED environment variable overrides the config seed.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ns/pipeline.hpp"

namespace {

void apply_ablation(ns::RunConfig& cfg, const std::string& spec) {
  if (spec == "shared-encoder") {
    cfg.model.shared_encoder = true;
  } else if (spec == "no-pe") {
    cfg.model.use_sinusoidal_pe = false;
  } else if (spec.rfind("layers=", 0) == 0) {
    cfg.model.layers = std::stoi(spec.substr(7));
  } else if (spec.rfind("m=", 0) == 0) {
    cfg.train.m_enroll = std::stoi(spec.substr(2));
  } else {
    throw ns::ConfigError("unknown ablation '" + spec +
                          "' (expected shared-encoder|layers=k|no-pe|m=k)");
  }
}

ns::RunConfig make_config(const std::string& config_path, const std::string& out_override,
                          uint64_t seed_override, bool seed_given,
                          const std::vector<std::string>& ablations) {
  ns::RunConfig cfg = ns::load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (seed_given) cfg.seed = seed_override;
  if (const char* env = std::getenv("NS_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
  for (const auto& a : ablations) apply_ablation(cfg, a);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trial-scoring speaker verification pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_override, checkpoint, extractor, system = "ns";
  uint64_t seed_override = 0;
  bool force = false;
  std::vector<std::string> ablations;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run configuration (JSON)")->required();
    cmd->add_option("--out", out_override, "Override output_dir");
    cmd->add_option("--seed", seed_override, "Override config seed");
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
  add_common(synth);

  CLI::App* pretrain =
      app.add_subcommand("pretrain", "Pretrain and freeze the enrollment extractor");
  add_common(pretrain);
  pretrain->add_flag("--force", force, "Overwrite an existing extractor checkpoint");

  CLI::App* train = app.add_subcommand("train", "Train the scoring network");
  add_common(train);
  train->add_option("--extractor", extractor, "Extractor checkpoint path");
  train->add_option("--ablation", ablations,
                    "Ablation switch: shared-encoder|layers=k|no-pe|m=k");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--system", system, "Scoring system: ns|cosine");

  CLI::App* probe = app.add_subcommand("probe", "Embedding unidentifiability probe");
  add_common(probe);
  probe->add_option("--extractor", extractor, "Extractor checkpoint path");

  CLI11_PARSE(app, argc, argv);

  try {
    const bool seed_given = app.get_subcommands().front()->count("--seed") > 0;
    ns::RunConfig cfg =
        make_config(config_path, out_override, seed_override, seed_given, ablations);

    if (synth->parsed()) {
      auto s = ns::cmd_synth(cfg);
      std::printf("synth: %d train utts, %d eval utts, %d enroll utts, %d trials -> %s\n",
                  s.train_utterances, s.eval_utterances, s.enroll_utterances, s.trials,
                  ns::corpus_dir(cfg).c_str());
    } else if (pretrain->parsed()) {
      auto s = ns::cmd_pretrain(cfg, force);
      std::printf("pretrain: final train accuracy %.4f -> %s\n", s.final_train_acc,
                  s.checkpoint.c_str());
    } else if (train->parsed()) {
      auto s = ns::cmd_train(cfg, extractor);
      std::printf("train: %zu epochs, final loss %.6f, heldout EER %.4f -> %s\n",
                  s.log.size(), s.log.back().loss, s.log.back().heldout_eer,
                  s.averaged_checkpoint.c_str());
    } else if (eval_cmd->parsed()) {
      auto s = ns::cmd_eval(cfg, checkpoint, system);
      for (const auto& [cond, m] : s.metrics)
        std::printf("eval[%s] %-14s EER %6.2f%%  minDCF %.3f  (%d tgt / %d non)\n",
                    system.c_str(), cond.c_str(), 100.0 * m.eer, m.min_dcf, m.n_target,
                    m.n_nontarget);
    } else if (probe->parsed()) {
      auto s = ns::cmd_probe(cfg, extractor);
      for (size_t i = 0; i < s.snr_grid.size(); ++i)
        std::printf("probe: %+6.1f dB  cos_a %.4f  cos_b %.4f\n", s.snr_grid[i],
                    s.mean_cos_a[i], s.mean_cos_b[i]);
      std::printf("probe: clean same-speaker cosine %.4f\n", s.mean_clean_same_cos);
    }
  } catch (const ns::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ns::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ns::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
