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

#include <catch2/catch.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ns/config.hpp"
#include "ns/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "ns_cli_test";

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + NS_CLI_BIN " " + args +
                          " > /dev/null 2> /dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string tiny_config_json(const std::string& out_dir, uint64_t seed = 11) {
  std::ostringstream os;
  os << R"({
  "seed": )"
     << seed << R"(,
  "output_dir": ")"
     << out_dir << R"(",
  "corpus": {
    "n_train_speakers": 6, "n_heldout_speakers": 4,
    "train_utts_per_speaker": 4, "heldout_utts_per_speaker": 6,
    "duration_min_s": 1.0, "duration_max_s": 1.3,
    "train_tests_per_condition": 8, "eval_tests_per_condition": 8,
    "trials_target_per_condition": 10, "trials_nontarget_per_condition": 30
  },
  "frontend": { "n_mels": 12 },
  "model": { "embed_dim": 16, "model_dim": 16, "ff_dim": 32, "conv_channels": 12 },
  "train": { "batch_size": 4, "enrolls_per_test": 4, "epochs": 2, "batches_per_epoch": 2, "avg_last_k": 2 },
  "pretrain": { "epochs": 2, "batch_size": 12 },
  "heldout_monitor_trials": 12
})";
  return os.str();
}

std::string write_tiny_config(const std::string& name, uint64_t seed = 11) {
  fs::create_directories(kWork);
  const std::string out_dir = (kWork / name).string();
  const std::string cfg_path = (kWork / (name + ".json")).string();
  std::ofstream(cfg_path) << tiny_config_json(out_dir, seed);
  return cfg_path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("config rejects unknown keys and bad values", "[cli]") {
  CHECK_THROWS_AS(ns::parse_config(nlohmann::json::parse(R"({"sede": 3})")),
                  ns::ConfigError);
  CHECK_THROWS_AS(
      ns::parse_config(nlohmann::json::parse(R"({"train": {"lamda": 0.9}})")),
      ns::ConfigError);
  CHECK_THROWS_AS(
      ns::parse_config(nlohmann::json::parse(R"({"precision": "f16"})")),
      ns::ConfigError);
  CHECK_THROWS_AS(
      ns::parse_config(nlohmann::json::parse(R"({"train": {"lambda": 1.5}})")),
      ns::ConfigError);
  CHECK_THROWS_AS(ns::parse_config(nlohmann::json::parse(R"({"seed": "abc"})")),
                  ns::ConfigError);
}

TEST_CASE("resolved config parses back to the same values", "[cli]") {
  ns::RunConfig cfg;
  cfg.seed = 99;
  cfg.train.m_enroll = 5;
  cfg.model.layers = 3;
  cfg.probe.snr_grid_db = {-5, 0, 5};
  auto round = ns::parse_config(nlohmann::json::parse(ns::resolved_json(cfg).dump()));
  CHECK(round.seed == 99);
  CHECK(round.train.m_enroll == 5);
  CHECK(round.model.layers == 3);
  CHECK(round.probe.snr_grid_db == std::vector<double>{-5, 0, 5});
}

TEST_CASE("cli pipeline: synth is idempotent and lays out conditions", "[cli][slow]") {
  fs::remove_all(kWork);
  const std::string cfg = write_tiny_config("run_a");
  REQUIRE(run_cli("synth --config " + cfg) == 0);

  const fs::path out = kWork / "run_a" / "corpus";
  CHECK(fs::exists(out / "resolved_config.json"));
  for (const char* cond : {"clean", "noisy", "concatenation", "overlap", "mixing"}) {
    CHECK(fs::is_directory(out / "train" / cond));
    CHECK(fs::is_directory(out / "eval" / cond));
  }
  CHECK(fs::exists(out / "train" / "manifest.tsv"));

  // Trial counts match the config.
  for (const char* cond : {"clean", "noisy", "concatenation", "overlap", "mixing"})
    CHECK(line_count(out / "eval" / (std::string("trials_") + cond + ".tsv")) == 40);

  const std::string manifest = slurp(out / "train" / "manifest.tsv");
  const std::string wav = slurp(out / "train" / "clean" / "tr_clean_s000_u000.f32");
  REQUIRE(run_cli("synth --config " + cfg) == 0);
  CHECK(slurp(out / "train" / "manifest.tsv") == manifest);
  CHECK(slurp(out / "train" / "clean" / "tr_clean_s000_u000.f32") == wav);

  // Sidecar header contract.
  CHECK(slurp(out / "train" / "clean" / "tr_clean_s000_u000.f32.hdr") ==
        "sample_rate=16000\n");
}

TEST_CASE("cli pipeline: pretrain, train, eval and exit codes", "[cli][slow]") {
  const std::string cfg = write_tiny_config("run_a");  // corpus from previous case
  const fs::path out = kWork / "run_a";
  if (!fs::exists(out / "corpus" / "train" / "manifest.tsv"))
    REQUIRE(run_cli("synth --config " + cfg) == 0);

  REQUIRE(run_cli("pretrain --config " + cfg) == 0);
  CHECK(fs::exists(out / "pretrain" / "extractor.ckpt"));
  CHECK(fs::exists(out / "pretrain" / "pretrain_log.jsonl"));

  // Refuses to overwrite without --force; allows with it.
  CHECK(run_cli("pretrain --config " + cfg) == 2);
  CHECK(run_cli("pretrain --config " + cfg + " --force") == 0);

  REQUIRE(run_cli("train --config " + cfg) == 0);
  CHECK(fs::exists(out / "train" / "averaged.ckpt"));
  CHECK(fs::exists(out / "train" / "epoch_001.ckpt"));
  CHECK(line_count(out / "train" / "train_log.jsonl") == 2);

  // Missing checkpoint is a data error (exit 3).
  CHECK(run_cli("eval --config " + cfg + " --checkpoint /nonexistent.ckpt") == 3);

  REQUIRE(run_cli("eval --config " + cfg + " --checkpoint " +
                  (out / "train" / "averaged.ckpt").string() + " --system ns") == 0);
  // Score-file line count equals the trial-list line count.
  CHECK(line_count(out / "eval" / "scores_ns_mixing.tsv") ==
        line_count(out / "corpus" / "eval" / "trials_mixing.tsv"));
  CHECK(fs::exists(out / "eval" / "metrics_ns.json"));

  REQUIRE(run_cli("eval --config " + cfg + " --checkpoint " +
                  (out / "pretrain" / "extractor.ckpt").string() + " --system cosine") == 0);
  CHECK(fs::exists(out / "eval" / "metrics_cosine.json"));

  // Overall metrics pool every per-condition trial.
  auto metrics = nlohmann::json::parse(slurp(out / "eval" / "metrics_ns.json"));
  int sum_t = 0, sum_n = 0, overall_t = -1, overall_n = -1;
  for (const auto& row : metrics.at("conditions")) {
    if (row.at("condition") == "overall") {
      overall_t = row.at("n_target").get<int>();
      overall_n = row.at("n_nontarget").get<int>();
    } else {
      sum_t += row.at("n_target").get<int>();
      sum_n += row.at("n_nontarget").get<int>();
    }
  }
  CHECK(overall_t == sum_t);
  CHECK(overall_n == sum_n);

  // Bad ablation and bad config file are config errors (exit 2).
  CHECK(run_cli("train --config " + cfg + " --ablation bogus") == 2);
  CHECK(run_cli("synth --config /nonexistent.json") == 2);
}

TEST_CASE("NS_SEED env var overrides the config seed", "[cli][slow]") {
  const std::string cfg = write_tiny_config("run_seed", 5);
  REQUIRE(run_cli("synth --config " + cfg, "NS_SEED=777") == 0);
  auto resolved = nlohmann::json::parse(
      slurp(kWork / "run_seed" / "corpus" / "resolved_config.json"));
  CHECK(resolved.at("seed").get<uint64_t>() == 777);
}

TEST_CASE("ablation flags map onto the model config", "[cli]") {
  ns::RunConfig cfg;
  // Mirror of the CLI mapping, exercised through the config document.
  auto j = ns::resolved_json(cfg);
  j["model"]["layers"] = 8;
  j["model"]["use_sinusoidal_pe"] = false;
  j["model"]["shared_encoder"] = true;
  j["train"]["enrolls_per_test"] = 1;
  auto parsed = ns::parse_config(nlohmann::json::parse(j.dump()));
  CHECK(parsed.model.layers == 8);
  CHECK_FALSE(parsed.model.use_sinusoidal_pe);
  CHECK(parsed.model.shared_encoder);
  CHECK(parsed.train.m_enroll == 1);
}
