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
#include <cmath>
#include <set>

#include "ns/trainer.hpp"

using ns::BatchSource;
using ns::Condition;
using ns::Rng;
using ns::Tensor;
using ns::TrainConfig;

namespace {

// A source with single-speaker clean tests and two-speaker mixing tests,
// ids only (batch assembly never touches audio).
BatchSource stub_source(int n_speakers, int utts_per_speaker, int n_mix) {
  BatchSource src;
  for (int s = 0; s < n_speakers; ++s)
    for (int u = 0; u < utts_per_speaker; ++u) {
      const std::string id = "clean_" + std::to_string(s) + "_" + std::to_string(u);
      src.enroll_utts_by_speaker[s].push_back(id);
      src.tests_by_condition[Condition::clean].push_back({id, Condition::clean, {s}});
    }
  Rng rng(5);
  for (int i = 0; i < n_mix; ++i) {
    int a = int(rng.uniform_int(uint64_t(n_speakers)));
    int b = int(rng.uniform_int(uint64_t(n_speakers)));
    while (b == a) b = int(rng.uniform_int(uint64_t(n_speakers)));
    src.tests_by_condition[Condition::mixing].push_back(
        {"mix_" + std::to_string(i), Condition::mixing, {std::min(a, b), std::max(a, b)}});
  }
  return src;
}

ns::ModelConfig tiny_cfg() {
  ns::ModelConfig cfg;
  cfg.n_mels = 8;
  cfg.embed_dim = 16;
  cfg.model_dim = 16;
  cfg.ff_dim = 32;
  cfg.heads = 4;
  cfg.layers = 1;
  cfg.conv_channels = 12;
  return cfg;
}

ns::FbankMatrix random_fbank(int t, int f, Rng& rng) {
  ns::FbankMatrix fb;
  fb.n_frames = t;
  fb.n_mels = f;
  fb.values.resize(size_t(t) * f);
  for (auto& v : fb.values) v = float(rng.uniform(-2.0, 2.0));
  return fb;
}

}  // namespace

TEST_CASE("batch counting: N=16, m=2, M=8 over mixing tests", "[trainer]") {
  auto src = stub_source(20, 3, 60);
  TrainConfig cfg;
  cfg.n_batch = 16;
  cfg.m_enroll = 8;
  cfg.scenario = "mixing";

  int two_target_batches = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto batch = ns::build_batch(src, cfg, seed);
    REQUIRE(batch.items.size() == 16);
    int loaded = 0;
    bool all_two = true;
    for (const auto& item : batch.items) {
      REQUIRE(item.enroll_ids.size() == 8);
      REQUIRE(item.labels.size() == 8);
      int row_sum = 0;
      for (uint8_t y : item.labels) row_sum += y;
      CHECK(row_sum == item.m_targets);
      CHECK(item.m_targets >= 1);
      CHECK(item.m_targets <= 2);
      all_two = all_two && item.m_targets == 2;
      loaded += item.m_targets;
      // Total trials per item: targets first, then reused non-targets.
      for (int j = 0; j < item.m_targets; ++j) CHECK(item.labels[size_t(j)] == 1);
    }
    CHECK(batch.loaded_enrollments == loaded);
    if (all_two) {
      CHECK(loaded == 2 * 16);
      ++two_target_batches;
    }
  }
  // Multi-talker mixing tests carry m = |speakers_present| = 2.
  CHECK(two_target_batches == 20);
}

TEST_CASE("batches are collision-free over many draws", "[trainer][property]") {
  auto src = stub_source(24, 2, 80);
  TrainConfig cfg;
  cfg.n_batch = 16;
  cfg.m_enroll = 8;
  cfg.scenario = "multi";

  size_t trials_seen = 0;
  for (uint64_t seed = 0; seed < 10000; ++seed) {
    auto batch = ns::build_batch(src, cfg, seed);
    for (const auto& item : batch.items) {
      REQUIRE(int(item.enroll_ids.size()) == cfg.m_enroll);
      std::set<std::string> uniq(item.enroll_ids.begin(), item.enroll_ids.end());
      REQUIRE(uniq.size() == item.enroll_ids.size());
      for (size_t j = 0; j < item.enroll_ids.size(); ++j) {
        const bool present = ns::speaker_in(item.enroll_speakers[j], item.test_speakers);
        // Label 1 iff the enrollment speaker is present; a reused enrollment
        // whose speaker is present must never be labeled 0.
        REQUIRE((item.labels[j] == 1) == present);
      }
      trials_seen += item.enroll_ids.size();
    }
    REQUIRE(int(batch.items.size()) == cfg.n_batch);
  }
  CHECK(trials_seen == size_t(10000) * 16 * 8);
}

TEST_CASE("total trials per batch is N*M", "[trainer]") {
  auto src = stub_source(20, 2, 40);
  TrainConfig cfg;
  cfg.n_batch = 16;
  cfg.m_enroll = 8;
  auto batch = ns::build_batch(src, cfg, 3);
  size_t trials = 0;
  for (const auto& item : batch.items) trials += item.enroll_ids.size();
  CHECK(trials == 128);
}

TEST_CASE("M=1 batches keep both trial classes via the seeded coin", "[trainer]") {
  auto src = stub_source(20, 3, 0);
  TrainConfig cfg;
  cfg.n_batch = 16;
  cfg.m_enroll = 1;
  cfg.scenario = "clean";
  int targets = 0, nontargets = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto batch = ns::build_batch(src, cfg, seed);
    for (const auto& item : batch.items) {
      REQUIRE(item.enroll_ids.size() == 1);
      (item.labels[0] ? targets : nontargets) += 1;
      CHECK(item.enroll_ids[0] != item.test_id);
    }
  }
  CHECK(targets > 200);
  CHECK(nontargets > 200);
}

TEST_CASE("batch falls back to pool sampling, then fails on true dead ends", "[trainer]") {
  // 3 speakers x 3 utts cannot supply 7 distinct reused non-targets, so the
  // builder samples the pool with replacement and flags it.
  auto small = stub_source(3, 3, 0);
  TrainConfig cfg;
  cfg.n_batch = 4;
  cfg.m_enroll = 6;
  cfg.scenario = "clean";
  auto batch = ns::build_batch(small, cfg, 9);
  CHECK(batch.sampled_with_replacement);
  for (const auto& item : batch.items)
    for (size_t j = 0; j < item.enroll_ids.size(); ++j)
      REQUIRE((item.labels[j] == 1) ==
              ns::speaker_in(item.enroll_speakers[j], item.test_speakers));

  // 2 speakers x 1 utt: a collision-free assignment of 4 slots cannot exist.
  auto dead = stub_source(2, 1, 0);
  TrainConfig dead_cfg;
  dead_cfg.n_batch = 2;
  dead_cfg.m_enroll = 4;
  dead_cfg.scenario = "clean";
  CHECK_THROWS_AS(ns::build_batch(dead, dead_cfg, 1), ns::DataError);
}

TEST_CASE("weighted BCE unit values", "[trainer]") {
  // All r = 0.5, lambda = 0.95, half the labels 1: (1/2)(0.95+0.05) log 2.
  const int k = 8;
  std::vector<uint8_t> labels = {1, 1, 1, 1, 0, 0, 0, 0};
  auto scores = Tensor<double>::from_data({k, 1}, std::vector<double>(k, 0.5));
  auto loss = ns::weighted_bce_loss(scores, labels, 0.95);
  CHECK(loss.item() == Approx(0.34657359027997264).margin(1e-9));

  // lambda = 0.5 is exactly half the unweighted mean BCE.
  auto loss_half = ns::weighted_bce_loss(scores, labels, 0.5);
  double unweighted = 0.0;
  for (int i = 0; i < k; ++i) unweighted += ns::bce(Tensor<double>::scalar(0.5), labels[size_t(i)]).item();
  unweighted /= k;
  CHECK(loss_half.item() == Approx(0.5 * unweighted).margin(1e-12));
  CHECK(loss_half.item() == Approx(0.5 * std::log(2.0)).margin(1e-12));

  // Perfect (clamped) predictions are bounded below 1e-5.
  std::vector<double> perfect(k);
  for (int i = 0; i < k; ++i) perfect[size_t(i)] = labels[size_t(i)] ? 1.0 : 0.0;
  auto loss_perfect =
      ns::weighted_bce_loss(Tensor<double>::from_data({k, 1}, std::move(perfect)),
                            labels, 0.95);
  CHECK(loss_perfect.item() < 1e-5);
  CHECK(loss_perfect.item() >= 0.0);
}

TEST_CASE("weighted BCE gradient matches the analytic formula", "[trainer][grad]") {
  Rng rng(71);
  const int k = 24;
  std::vector<uint8_t> labels(k);
  std::vector<double> vals(k);
  for (int i = 0; i < k; ++i) {
    labels[size_t(i)] = rng.coin() ? 1 : 0;
    vals[size_t(i)] = rng.uniform(0.05, 0.95);
  }
  auto scores = Tensor<double>::from_data({k, 1}, vals, true);
  const double lambda = 0.95;
  auto loss = ns::weighted_bce_loss(scores, labels, lambda);
  loss.backward();
  for (int i = 0; i < k; ++i) {
    const double r = vals[size_t(i)];
    const double y = labels[size_t(i)];
    const double analytic = -(1.0 / k) * (lambda * y / r - (1.0 - lambda) * (1.0 - y) / (1.0 - r));
    CHECK(scores.grads()[size_t(i)] == Approx(analytic).epsilon(1e-6));
  }
}

TEST_CASE("lambda -> 1 silences non-target gradients", "[trainer]") {
  std::vector<uint8_t> labels = {1, 0, 0, 1};
  auto scores = Tensor<double>::from_data({4, 1}, {0.3, 0.6, 0.2, 0.8}, true);
  auto loss = ns::weighted_bce_loss(scores, labels, 1.0 - 1e-12);
  loss.backward();
  CHECK(std::abs(scores.grads()[1]) < 1e-10);
  CHECK(std::abs(scores.grads()[2]) < 1e-10);
  CHECK(std::abs(scores.grads()[0]) > 1e-3);
}

TEST_CASE("pretraining descends and reaches high accuracy on a tiny roster", "[trainer][slow]") {
  auto cfg = tiny_cfg();
  const int n_speakers = 6, utts = 8;
  Rng rng(41);

  // Linearly separable per-speaker fbank patterns with noise.
  std::map<std::string, ns::FbankMatrix> fbanks;
  std::vector<ns::PretrainSample> samples;
  for (int s = 0; s < n_speakers; ++s)
    for (int u = 0; u < utts; ++u) {
      const std::string id = "c" + std::to_string(s) + "_" + std::to_string(u);
      auto fb = random_fbank(24, cfg.n_mels, rng);
      for (int t = 0; t < fb.n_frames; ++t)
        fb.values[size_t(t) * cfg.n_mels + (s % cfg.n_mels)] += 3.0f;
      fbanks[id] = fb;
      samples.push_back({id, s});
    }
  auto fbank_of = [&](const std::string& id) -> const ns::FbankMatrix& {
    return fbanks.at(id);
  };

  auto extractor = ns::init_extractor<double>(cfg, 29);
  ns::PretrainConfig pcfg;
  pcfg.epochs = 25;
  pcfg.lr = 5e-3;
  pcfg.batch_size = 16;
  auto result = ns::pretrain_embedder<double>(extractor, n_speakers, samples, fbank_of,
                                              pcfg, 13);
  REQUIRE(result.log.size() == 25);
  CHECK(result.log[1].loss < result.log[0].loss);
  CHECK(result.final_train_acc >= 0.95);
  CHECK(extractor.trained);
  CHECK_FALSE(extractor.emb_w.requires_grad());
}

TEST_CASE("NS training descends, stays deterministic, keeps the extractor frozen",
          "[trainer][slow]") {
  auto cfg = tiny_cfg();
  const int n_speakers = 8;
  Rng rng(61);

  std::map<std::string, ns::FbankMatrix> fbanks;
  BatchSource src;
  auto speaker_fbank = [&](int s, int t_frames) {
    auto fb = random_fbank(t_frames, cfg.n_mels, rng);
    for (int t = 0; t < fb.n_frames; ++t)
      fb.values[size_t(t) * cfg.n_mels + (s % cfg.n_mels)] += 3.0f;
    return fb;
  };
  for (int s = 0; s < n_speakers; ++s)
    for (int u = 0; u < 4; ++u) {
      const std::string id = "c" + std::to_string(s) + "_" + std::to_string(u);
      fbanks[id] = speaker_fbank(s, 24);
      src.enroll_utts_by_speaker[s].push_back(id);
      src.tests_by_condition[Condition::clean].push_back({id, Condition::clean, {s}});
    }
  Rng mixr(71);
  for (int i = 0; i < 16; ++i) {
    int a = int(mixr.uniform_int(n_speakers));
    int b = int(mixr.uniform_int(n_speakers));
    while (b == a) b = int(mixr.uniform_int(n_speakers));
    const std::string id = "m" + std::to_string(i);
    auto fa = speaker_fbank(a, 24);
    auto fsum = speaker_fbank(b, 24);
    for (size_t j = 0; j < fsum.values.size(); ++j)
      fsum.values[j] = 0.5f * (fsum.values[j] + fa.values[j]);
    fbanks[id] = fsum;
    src.tests_by_condition[Condition::mixing].push_back(
        {id, Condition::mixing, {std::min(a, b), std::max(a, b)}});
  }
  auto fbank_of = [&](const std::string& id) -> const ns::FbankMatrix& {
    return fbanks.at(id);
  };

  auto extractor = ns::init_extractor<double>(cfg, 3);
  ns::freeze_extractor(extractor);
  std::map<std::string, std::vector<double>> embeddings;
  for (const auto& [spk, ids] : src.enroll_utts_by_speaker)
    for (const auto& id : ids) embeddings[id] = ns::embed_enrollment(extractor, fbanks[id]);
  auto emb_of = [&](const std::string& id) -> const std::vector<double>& {
    return embeddings.at(id);
  };

  TrainConfig tcfg;
  tcfg.n_batch = 4;
  tcfg.m_enroll = 4;
  tcfg.epochs = 6;
  tcfg.batches_per_epoch = 4;

  auto run = [&](std::vector<ns::Checkpoint>* ckpts) {
    auto model = ns::init_ns_model<double>(cfg, 7, extractor);
    ns::TrainHooks<double> hooks;
    if (ckpts)
      hooks.on_checkpoint = [&](int, const ns::Checkpoint& c) { ckpts->push_back(c); };
    return ns::train_ns<double>(model, src, fbank_of, emb_of, tcfg, 99, hooks);
  };

  const auto w1_before = extractor.trunk.w1.values();
  std::vector<ns::Checkpoint> ckpts;
  auto log = run(&ckpts);
  REQUIRE(log.size() == 6);
  REQUIRE(ckpts.size() == 6);
  CHECK(extractor.trunk.w1.values() == w1_before);

  // Loss decreases in the 3-epoch moving average.
  auto avg3 = [&](size_t i) { return (log[i].loss + log[i + 1].loss + log[i + 2].loss) / 3.0; };
  CHECK(avg3(3) < avg3(0));

  // Frozen extractor parameters are bit-identical inside every checkpoint.
  for (const auto& c : ckpts)
    CHECK(c.at("extractor.conv1.w").data == ckpts[0].at("extractor.conv1.w").data);

  // Bit-identical training log in f64 across reruns.
  auto log2 = run(nullptr);
  for (size_t i = 0; i < log.size(); ++i) {
    CHECK(log[i].loss == log2[i].loss);
  }
}

TEST_CASE("train_ns requires a pretrained extractor", "[trainer]") {
  auto cfg = tiny_cfg();
  auto extractor = ns::init_extractor<float>(cfg, 3);
  auto model = ns::init_ns_model<float>(cfg, 7, extractor);
  auto src = stub_source(4, 2, 4);
  TrainConfig tcfg;
  tcfg.n_batch = 2;
  auto fbank_of = [](const std::string&) -> const ns::FbankMatrix& {
    static ns::FbankMatrix fb;
    return fb;
  };
  auto emb_of = [](const std::string&) -> const std::vector<float>& {
    static std::vector<float> v;
    return v;
  };
  CHECK_THROWS_AS(ns::train_ns<float>(model, src, fbank_of, emb_of, tcfg, 1),
                  ns::DataError);
}

TEST_CASE("train config validation", "[trainer]") {
  TrainConfig cfg;
  cfg.lambda = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ns::ConfigError);
  cfg.lambda = 0.5;
  cfg.m_enroll = 0;
  CHECK_THROWS_AS(cfg.validate(), ns::ConfigError);
}
