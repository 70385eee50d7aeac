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
// One flat run-configuration document. Unknown keys are rejected; every
// command persists the fully-resolved config next to its outputs before any
// computation starts.

#ifndef NS_CONFIG_HPP
#define NS_CONFIG_HPP

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ns/common.hpp"
#include "ns/fbank.hpp"
#include "ns/model.hpp"
#include "ns/trainer.hpp"

namespace ns {

using ordered_json = nlohmann::ordered_json;

struct CorpusConfig {
  int n_train_speakers = 40;
  int n_heldout_speakers = 10;
  int train_utts_per_speaker = 25;
  int heldout_utts_per_speaker = 12;
  double duration_min_s = 1.6;
  double duration_max_s = 2.2;
  int sample_rate = 16000;
  double snr_min_db = -3.0;
  double snr_max_db = 3.0;
  int train_tests_per_condition = 160;
  int eval_tests_per_condition = 100;
  int trials_target_per_condition = 120;
  int trials_nontarget_per_condition = 360;
};

struct EvalConfig {
  double p_target = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;
};

struct ProbeConfig {
  std::vector<double> snr_grid_db = {-20, -10, -3, 0, 3, 10, 20};
  int n_pairs = 50;
};

struct RunConfig {
  uint64_t seed = 42;
  std::string precision = "f32";  // f64 for bit-exact replication runs
  std::string output_dir = "runs/default";
  CorpusConfig corpus;
  FbankConfig frontend;
  ModelConfig model;
  TrainConfig train;
  PretrainConfig pretrain;
  EvalConfig eval;
  ProbeConfig probe;
  int heldout_monitor_trials = 200;

  void validate() const {
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64");
    if (corpus.duration_min_s < 1.0 || corpus.duration_max_s < corpus.duration_min_s)
      throw ConfigError("corpus durations must satisfy 1 <= min <= max");
    if (model.model_dim % 2 != 0) throw ConfigError("model.model_dim must be even");
    if (model.model_dim % model.heads != 0)
      throw ConfigError("model.model_dim must be divisible by heads");
    train.validate();
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       std::initializer_list<const char*> allowed,
                       const std::string& scope) {
  if (!j.is_object()) throw ConfigError("config section '" + scope + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    for (const char* a : allowed) found = found || key == a;
    if (!found) throw ConfigError("unknown config key '" + scope + key + "'");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  RunConfig cfg;
  detail::check_keys(j,
                     {"seed", "precision", "output_dir", "corpus", "frontend", "model",
                      "train", "pretrain", "eval", "probe", "heldout_monitor_trials"},
                     "");
  detail::read_field(j, "seed", cfg.seed);
  detail::read_field(j, "precision", cfg.precision);
  detail::read_field(j, "output_dir", cfg.output_dir);
  detail::read_field(j, "heldout_monitor_trials", cfg.heldout_monitor_trials);

  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    detail::check_keys(c,
                       {"n_train_speakers", "n_heldout_speakers", "train_utts_per_speaker",
                        "heldout_utts_per_speaker", "duration_min_s", "duration_max_s",
                        "sample_rate", "snr_min_db", "snr_max_db",
                        "train_tests_per_condition", "eval_tests_per_condition",
                        "trials_target_per_condition", "trials_nontarget_per_condition"},
                       "corpus.");
    detail::read_field(c, "n_train_speakers", cfg.corpus.n_train_speakers);
    detail::read_field(c, "n_heldout_speakers", cfg.corpus.n_heldout_speakers);
    detail::read_field(c, "train_utts_per_speaker", cfg.corpus.train_utts_per_speaker);
    detail::read_field(c, "heldout_utts_per_speaker", cfg.corpus.heldout_utts_per_speaker);
    detail::read_field(c, "duration_min_s", cfg.corpus.duration_min_s);
    detail::read_field(c, "duration_max_s", cfg.corpus.duration_max_s);
    detail::read_field(c, "sample_rate", cfg.corpus.sample_rate);
    detail::read_field(c, "snr_min_db", cfg.corpus.snr_min_db);
    detail::read_field(c, "snr_max_db", cfg.corpus.snr_max_db);
    detail::read_field(c, "train_tests_per_condition", cfg.corpus.train_tests_per_condition);
    detail::read_field(c, "eval_tests_per_condition", cfg.corpus.eval_tests_per_condition);
    detail::read_field(c, "trials_target_per_condition",
                       cfg.corpus.trials_target_per_condition);
    detail::read_field(c, "trials_nontarget_per_condition",
                       cfg.corpus.trials_nontarget_per_condition);
  }

  if (j.contains("frontend")) {
    const auto& f = j.at("frontend");
    detail::check_keys(
        f, {"n_mels", "n_fft", "frame_len_ms", "frame_shift_ms", "fmin_hz", "fmax_hz"},
        "frontend.");
    detail::read_field(f, "n_mels", cfg.frontend.n_mels);
    detail::read_field(f, "n_fft", cfg.frontend.n_fft);
    detail::read_field(f, "frame_len_ms", cfg.frontend.frame_len_ms);
    detail::read_field(f, "frame_shift_ms", cfg.frontend.frame_shift_ms);
    detail::read_field(f, "fmin_hz", cfg.frontend.fmin_hz);
    detail::read_field(f, "fmax_hz", cfg.frontend.fmax_hz);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m,
                       {"embed_dim", "model_dim", "ff_dim", "heads", "layers",
                        "conv_channels", "shared_encoder", "use_sinusoidal_pe",
                        "test_attends_enroll"},
                       "model.");
    detail::read_field(m, "embed_dim", cfg.model.embed_dim);
    detail::read_field(m, "model_dim", cfg.model.model_dim);
    detail::read_field(m, "ff_dim", cfg.model.ff_dim);
    detail::read_field(m, "heads", cfg.model.heads);
    detail::read_field(m, "layers", cfg.model.layers);
    detail::read_field(m, "conv_channels", cfg.model.conv_channels);
    detail::read_field(m, "shared_encoder", cfg.model.shared_encoder);
    detail::read_field(m, "use_sinusoidal_pe", cfg.model.use_sinusoidal_pe);
    detail::read_field(m, "test_attends_enroll", cfg.model.test_attends_enroll);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t,
                       {"batch_size", "enrolls_per_test", "lambda", "lr", "epochs",
                        "batches_per_epoch", "avg_last_k", "scenario"},
                       "train.");
    detail::read_field(t, "batch_size", cfg.train.n_batch);
    detail::read_field(t, "enrolls_per_test", cfg.train.m_enroll);
    detail::read_field(t, "lambda", cfg.train.lambda);
    detail::read_field(t, "lr", cfg.train.lr);
    detail::read_field(t, "epochs", cfg.train.epochs);
    detail::read_field(t, "batches_per_epoch", cfg.train.batches_per_epoch);
    detail::read_field(t, "avg_last_k", cfg.train.avg_last_k);
    detail::read_field(t, "scenario", cfg.train.scenario);
  }

  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    detail::check_keys(p, {"epochs", "lr", "batch_size"}, "pretrain.");
    detail::read_field(p, "epochs", cfg.pretrain.epochs);
    detail::read_field(p, "lr", cfg.pretrain.lr);
    detail::read_field(p, "batch_size", cfg.pretrain.batch_size);
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"p_target", "c_miss", "c_fa"}, "eval.");
    detail::read_field(e, "p_target", cfg.eval.p_target);
    detail::read_field(e, "c_miss", cfg.eval.c_miss);
    detail::read_field(e, "c_fa", cfg.eval.c_fa);
  }

  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    detail::check_keys(p, {"snr_grid_db", "n_pairs"}, "probe.");
    detail::read_field(p, "snr_grid_db", cfg.probe.snr_grid_db);
    detail::read_field(p, "n_pairs", cfg.probe.n_pairs);
  }

  // The frontend n_mels is the model's input width.
  cfg.model.n_mels = cfg.frontend.n_mels;
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return parse_config(j);
}

inline ordered_json resolved_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  j["output_dir"] = cfg.output_dir;
  j["corpus"] = {{"n_train_speakers", cfg.corpus.n_train_speakers},
                 {"n_heldout_speakers", cfg.corpus.n_heldout_speakers},
                 {"train_utts_per_speaker", cfg.corpus.train_utts_per_speaker},
                 {"heldout_utts_per_speaker", cfg.corpus.heldout_utts_per_speaker},
                 {"duration_min_s", cfg.corpus.duration_min_s},
                 {"duration_max_s", cfg.corpus.duration_max_s},
                 {"sample_rate", cfg.corpus.sample_rate},
                 {"snr_min_db", cfg.corpus.snr_min_db},
                 {"snr_max_db", cfg.corpus.snr_max_db},
                 {"train_tests_per_condition", cfg.corpus.train_tests_per_condition},
                 {"eval_tests_per_condition", cfg.corpus.eval_tests_per_condition},
                 {"trials_target_per_condition", cfg.corpus.trials_target_per_condition},
                 {"trials_nontarget_per_condition", cfg.corpus.trials_nontarget_per_condition}};
  j["frontend"] = {{"n_mels", cfg.frontend.n_mels},
                   {"n_fft", cfg.frontend.n_fft},
                   {"frame_len_ms", cfg.frontend.frame_len_ms},
                   {"frame_shift_ms", cfg.frontend.frame_shift_ms},
                   {"fmin_hz", cfg.frontend.fmin_hz},
                   {"fmax_hz", cfg.frontend.fmax_hz}};
  j["model"] = {{"embed_dim", cfg.model.embed_dim},
                {"model_dim", cfg.model.model_dim},
                {"ff_dim", cfg.model.ff_dim},
                {"heads", cfg.model.heads},
                {"layers", cfg.model.layers},
                {"conv_channels", cfg.model.conv_channels},
                {"shared_encoder", cfg.model.shared_encoder},
                {"use_sinusoidal_pe", cfg.model.use_sinusoidal_pe},
                {"test_attends_enroll", cfg.model.test_attends_enroll}};
  j["train"] = {{"batch_size", cfg.train.n_batch},
                {"enrolls_per_test", cfg.train.m_enroll},
                {"lambda", cfg.train.lambda},
                {"lr", cfg.train.lr},
                {"epochs", cfg.train.epochs},
                {"batches_per_epoch", cfg.train.batches_per_epoch},
                {"avg_last_k", cfg.train.avg_last_k},
                {"scenario", cfg.train.scenario}};
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"lr", cfg.pretrain.lr},
                   {"batch_size", cfg.pretrain.batch_size}};
  j["eval"] = {{"p_target", cfg.eval.p_target},
               {"c_miss", cfg.eval.c_miss},
               {"c_fa", cfg.eval.c_fa}};
  j["probe"] = {{"snr_grid_db", cfg.probe.snr_grid_db}, {"n_pairs", cfg.probe.n_pairs}};
  j["heldout_monitor_trials"] = cfg.heldout_monitor_trials;
  return j;
}

}  // namespace ns

#endif  // NS_CONFIG_HPP
