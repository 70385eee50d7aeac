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
// Large-scale trial training: every batch pairs N test utterances with M
// enrollments each (m of them targets, the rest reused from other tests'
// loaded enrollments), yielding N*M verification trials per step under the
// weighted BCE loss.

#ifndef NS_TRAINER_HPP
#define NS_TRAINER_HPP

#include <chrono>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ns/checkpoint.hpp"
#include "ns/model.hpp"
#include "ns/synth.hpp"
#include "ns/tensor.hpp"

namespace ns {

struct TrainConfig {
  int n_batch = 16;        // N; 256 at full scale
  int m_enroll = 8;        // M; 200 at full scale
  double lambda = 0.95;    // target weight in the loss
  double lr = 1e-3;
  int epochs = 20;
  int batches_per_epoch = 60;
  int avg_last_k = 3;      // 10 at full scale
  std::string scenario = "multi";

  void validate() const {
    if (lambda <= 0.0 || lambda >= 1.0)
      throw ConfigError("train.lambda must be in (0, 1)");
    if (m_enroll < 1) throw ConfigError("train.m_enroll must be >= 1");
    if (n_batch < 2) throw ConfigError("train.n_batch must be >= 2");
  }
};

struct PretrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 32;
};

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

struct UttInfo {
  std::string id;
  Condition condition = Condition::clean;
  std::vector<int> speakers;
};

struct BatchSource {
  std::map<Condition, std::vector<UttInfo>> tests_by_condition;
  std::map<int, std::vector<std::string>> enroll_utts_by_speaker;  // clean pool
};

struct TrialBatchItem {
  std::string test_id;
  std::vector<int> test_speakers;
  std::vector<std::string> enroll_ids;  // length M
  std::vector<int> enroll_speakers;     // length M
  std::vector<uint8_t> labels;          // length M, targets first
  int m_targets = 0;
};

struct TrialBatch {
  std::vector<TrialBatchItem> items;
  int loaded_enrollments = 0;  // target slots loaded this batch
  bool sampled_with_replacement = false;
};

namespace detail {

inline const std::vector<UttInfo>& scenario_tests(const BatchSource& src,
                                                  const std::string& scenario,
                                                  Condition pick) {
  auto it = src.tests_by_condition.find(pick);
  if (it == src.tests_by_condition.end() || it->second.empty())
    throw DataError(std::string("build_batch: no tests for condition ") +
                    condition_name(pick));
  (void)scenario;
  return it->second;
}

}  // namespace detail

// Assembles one large-scale-trial batch. m is derived per test from
// |speakers_present|
// (capped at M); when a test has no free non-target slot (m == M), one
// target is dropped by a seeded coin so verification stays two-class even at
// M = 1. Non-target slots reuse target enrollments loaded by other tests,
// rejecting any whose speaker appears in this test.
inline TrialBatch build_batch(const BatchSource& src, const TrainConfig& cfg,
                              uint64_t seed) {
  Rng rng(hash_seed(seed, 0x6261ull));
  TrialBatch batch;

  std::vector<Condition> conditions;
  if (cfg.scenario == "multi") {
    for (auto c : all_conditions())
      if (src.tests_by_condition.count(c)) conditions.push_back(c);
    if (conditions.empty()) throw DataError("build_batch: empty source");
  } else {
    conditions.push_back(condition_from_name(cfg.scenario));
  }

  // Pick N tests and load their target enrollments.
  struct Loaded {
    size_t item;
    std::string enroll_id;
    int speaker;
  };
  std::vector<Loaded> loaded;
  for (int i = 0; i < cfg.n_batch; ++i) {
    const Condition cond = conditions[rng.uniform_int(conditions.size())];
    const auto& tests = detail::scenario_tests(src, cfg.scenario, cond);
    const UttInfo& test = tests[rng.uniform_int(tests.size())];

    TrialBatchItem item;
    item.test_id = test.id;
    item.test_speakers = test.speakers;

    std::vector<int> speakers = test.speakers;
    rng.shuffle(speakers);
    int m = std::min<int>(int(speakers.size()), cfg.m_enroll);
    if (m == cfg.m_enroll && rng.coin()) m -= 1;  // keep a non-target slot half the time
    item.m_targets = m;
    for (int k = 0; k < m; ++k) {
      const auto it = src.enroll_utts_by_speaker.find(speakers[size_t(k)]);
      if (it == src.enroll_utts_by_speaker.end() || it->second.empty())
        throw DataError("build_batch: no enrollment utterances for speaker");
      std::string pick;
      for (int attempt = 0; attempt < 100; ++attempt) {
        pick = it->second[rng.uniform_int(it->second.size())];
        if (pick != test.id) break;
        pick.clear();
      }
      if (pick.empty()) throw DataError("build_batch: cannot pick enrollment != test");
      item.enroll_ids.push_back(pick);
      item.enroll_speakers.push_back(speakers[size_t(k)]);
      item.labels.push_back(1);
      loaded.push_back({size_t(i), pick, speakers[size_t(k)]});
    }
    batch.items.push_back(std::move(item));
  }
  batch.loaded_enrollments = int(loaded.size());

  // Fill non-target slots by reusing other tests' loaded enrollments.
  std::vector<int> all_speakers;
  for (const auto& [spk, utts] : src.enroll_utts_by_speaker) all_speakers.push_back(spk);

  for (size_t i = 0; i < batch.items.size(); ++i) {
    auto& item = batch.items[i];
    std::vector<size_t> candidates;
    for (size_t k = 0; k < loaded.size(); ++k)
      if (loaded[k].item != i && !speaker_in(loaded[k].speaker, item.test_speakers))
        candidates.push_back(k);
    rng.shuffle(candidates);

    std::set<std::string> used(item.enroll_ids.begin(), item.enroll_ids.end());
    size_t next = 0;
    while (int(item.enroll_ids.size()) < cfg.m_enroll) {
      bool filled = false;
      while (next < candidates.size()) {
        const Loaded& cand = loaded[candidates[next++]];
        if (used.count(cand.enroll_id)) continue;
        item.enroll_ids.push_back(cand.enroll_id);
        item.enroll_speakers.push_back(cand.speaker);
        item.labels.push_back(0);
        used.insert(cand.enroll_id);
        filled = true;
        break;
      }
      if (filled) continue;

      // Not enough reusable enrollments: sample the full pool with
      // replacement (flagged), still collision-checked.
      batch.sampled_with_replacement = true;
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        const int spk = all_speakers[rng.uniform_int(all_speakers.size())];
        if (speaker_in(spk, item.test_speakers)) continue;
        const auto& utts = src.enroll_utts_by_speaker.at(spk);
        const std::string& pick = utts[rng.uniform_int(utts.size())];
        if (used.count(pick)) continue;
        item.enroll_ids.push_back(pick);
        item.enroll_speakers.push_back(spk);
        item.labels.push_back(0);
        used.insert(pick);
        ok = true;
      }
      if (!ok) throw DataError("build_batch: collision-free assignment failed");
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// L = -(1/K) sum_k [ lambda*y_k*log r_k + (1-lambda)*(1-y_k)*log(1-r_k) ],
// composed from primitive ops so the reverse-mode gradient is derived.
template <typename T>
Tensor<T> weighted_bce_loss(const Tensor<T>& scores, const std::vector<uint8_t>& labels,
                            double lambda) {
  const size_t k = scores.numel();
  if (labels.size() != k) throw DataError("weighted_bce_loss: label count mismatch");
  std::vector<T> wy(k), wn(k);
  for (size_t i = 0; i < k; ++i) {
    wy[i] = labels[i] ? T(lambda) : T(0);
    wn[i] = labels[i] ? T(0) : T(1.0 - lambda);
  }
  Tensor<T> r = clamp(scores, T(1e-7), T(1) - T(1e-7));
  Tensor<T> pos = mul(log_op(r), Tensor<T>::from_data(scores.shape(), std::move(wy)));
  Tensor<T> neg = mul(log_op(affine(r, T(-1), T(1))),
                      Tensor<T>::from_data(scores.shape(), std::move(wn)));
  return scale(sum_all(add(pos, neg)), T(-1.0 / double(k)));
}

// ---------------------------------------------------------------------------
// Embedding extractor pretraining
// ---------------------------------------------------------------------------

struct PretrainSample {
  std::string utt_id;
  int class_index = 0;
};

struct PretrainEpochStats {
  int epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
};

struct PretrainResult {
  std::vector<PretrainEpochStats> log;
  double final_train_acc = 0.0;
};

// Speaker-classification pretraining (softmax CE over the roster); the
// extractor is frozen afterwards. Aborts with the seed in the message if the
// loss goes non-finite.
template <typename T>
PretrainResult pretrain_embedder(
    EnrollExtractor<T>& extractor, int n_classes,
    const std::vector<PretrainSample>& samples,
    const std::function<const FbankMatrix&(const std::string&)>& fbank_of,
    const PretrainConfig& cfg, uint64_t seed) {
  if (samples.empty()) throw DataError("pretrain_embedder: no samples");
  const int e_dim = int(extractor.emb_b.numel());
  Tensor<T> cls_w = init_uniform<T>({e_dim, n_classes}, e_dim, seed, "classifier.w");
  Tensor<T> cls_b = Tensor<T>::zeros({n_classes}, true);

  std::vector<Parameter<T>> params = {
      {"extractor.conv1.w", extractor.trunk.w1}, {"extractor.conv1.b", extractor.trunk.b1},
      {"extractor.conv2.w", extractor.trunk.w2}, {"extractor.conv2.b", extractor.trunk.b2},
      {"extractor.emb.w", extractor.emb_w},      {"extractor.emb.b", extractor.emb_b},
      {"classifier.w", cls_w},                   {"classifier.b", cls_b}};
  AdamState<T> adam;
  Rng order_rng(hash_seed(seed, 0x707265ull));

  PretrainResult result;
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t(0));

  auto forward_logits = [&](const std::vector<size_t>& idx) {
    std::vector<Tensor<T>> embs;
    embs.reserve(idx.size());
    for (size_t s : idx)
      embs.push_back(extractor_forward(extractor, fbank_tensor<T>(fbank_of(samples[s].utt_id))));
    return linear(concat_rows(embs), cls_w, cls_b);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t correct = 0;
    size_t n_batches = 0;
    for (size_t off = 0; off < order.size(); off += size_t(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), off + size_t(cfg.batch_size));
      std::vector<size_t> idx(order.begin() + std::ptrdiff_t(off),
                              order.begin() + std::ptrdiff_t(stop));
      std::vector<int> labels;
      for (size_t s : idx) labels.push_back(samples[s].class_index);

      for (auto& p : params) {
        auto* n = p.tensor.node();
        if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
      }
      Tensor<T> logits = forward_logits(idx);
      Tensor<T> loss = softmax_xent(logits, labels);
      if (!std::isfinite(double(loss.item())))
        throw NumericalError("pretrain_embedder: loss diverged (seed " +
                             std::to_string(seed) + ")");
      loss.backward();
      adam_step<T>(params, adam, T(cfg.lr));

      epoch_loss += double(loss.item());
      n_batches += 1;
      for (size_t row = 0; row < idx.size(); ++row) {
        int best = 0;
        for (int c = 1; c < n_classes; ++c)
          if (logits.at(int(row), c) > logits.at(int(row), best)) best = c;
        correct += best == labels[row] ? 1 : 0;
      }
    }
    result.log.push_back({epoch, epoch_loss / double(n_batches),
                          double(correct) / double(order.size())});
  }

  // Final accuracy with frozen weights over the full set.
  size_t correct = 0;
  for (size_t s = 0; s < samples.size(); ++s) {
    Tensor<T> logits = forward_logits({s});
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (logits.at(0, c) > logits.at(0, best)) best = c;
    correct += best == samples[s].class_index ? 1 : 0;
  }
  result.final_train_acc = double(correct) / double(samples.size());
  freeze_extractor(extractor);
  return result;
}

// ---------------------------------------------------------------------------
// NS training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double heldout_eer = -1.0;
  double heldout_mindcf = -1.0;
  double wallclock_s = 0.0;
};

template <typename T>
struct TrainHooks {
  std::function<void(int, const Checkpoint&)> on_checkpoint;
  std::function<std::pair<double, double>(const NsModel<T>&)> heldout_eval;
};

// One optimizer step over a prepared batch; returns the loss value.
template <typename T>
double train_step(NsModel<T>& model, const TrialBatch& batch,
                  const std::function<const FbankMatrix&(const std::string&)>& fbank_of,
                  const std::function<const std::vector<T>&(const std::string&)>& embedding_of,
                  double lambda, std::vector<Parameter<T>>& trainable, AdamState<T>& adam,
                  double lr) {
  // Encode each test once, pad features to the batch max.
  std::vector<FrameFeatures<T>> feats;
  int t_pad = 0;
  for (const auto& item : batch.items) {
    feats.push_back(encode_test_frames(model, fbank_of(item.test_id)));
    t_pad = std::max(t_pad, feats.back().features.rows());
  }
  std::vector<Tensor<T>> score_parts;
  std::vector<uint8_t> labels;
  for (size_t i = 0; i < batch.items.size(); ++i) {
    const auto& item = batch.items[i];
    const int m = int(item.enroll_ids.size());
    std::vector<T> emb(size_t(m) * model.cfg.embed_dim);
    for (int j = 0; j < m; ++j) {
      const auto& e = embedding_of(item.enroll_ids[size_t(j)]);
      std::copy(e.begin(), e.end(), emb.begin() + size_t(j) * model.cfg.embed_dim);
    }
    score_parts.push_back(score_forward(
        model, Tensor<T>::from_data({m, model.cfg.embed_dim}, std::move(emb)),
        pad_frame_features(feats[i], t_pad)));
    labels.insert(labels.end(), item.labels.begin(), item.labels.end());
  }
  Tensor<T> scores = concat_rows(score_parts);
  Tensor<T> loss = weighted_bce_loss(scores, labels, lambda);
  const double loss_val = double(loss.item());
  if (!std::isfinite(loss_val)) throw NumericalError("train_ns: loss is not finite");

  for (auto& p : trainable) {
    auto* n = p.tensor.node();
    if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
  }
  loss.backward();
  adam_step<T>(trainable, adam, T(lr));
  return loss_val;
}

template <typename T>
std::vector<EpochStats> train_ns(
    NsModel<T>& model, const BatchSource& source,
    const std::function<const FbankMatrix&(const std::string&)>& fbank_of,
    const std::function<const std::vector<T>&(const std::string&)>& embedding_of,
    const TrainConfig& cfg, uint64_t seed, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (!model.extractor.trained) throw DataError("train_ns: extractor not pretrained");
  auto params = ns_params(model);
  auto trainable = params.trainable();
  AdamState<T> adam;
  std::vector<EpochStats> log;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Cosine learning-rate decay over the epoch budget.
    const double lr = cfg.lr * 0.5 *
                      (1.0 + std::cos(3.14159265358979 * double(epoch) / double(cfg.epochs)));
    double epoch_loss = 0.0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      TrialBatch batch =
          build_batch(source, cfg, hash_seed(seed, uint64_t(epoch), uint64_t(b)));
      epoch_loss += train_step(model, batch, fbank_of, embedding_of, cfg.lambda,
                               trainable, adam, lr);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = epoch_loss / double(cfg.batches_per_epoch);
    if (hooks.heldout_eval) {
      auto [eer, mindcf] = hooks.heldout_eval(model);
      stats.heldout_eer = eer;
      stats.heldout_mindcf = mindcf;
    }
    stats.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_checkpoint) hooks.on_checkpoint(epoch, to_checkpoint(params));
    log.push_back(stats);
  }
  return log;
}

}  // namespace ns

#endif  // NS_TRAINER_HPP
