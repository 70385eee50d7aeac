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
// End-to-end pipeline behind the CLI: corpus synthesis, extractor
// pretraining, NS training, evaluation and the unidentifiability probe.
// Every command resolves its configuration to disk before computing and is
// deterministic given (config, seed).

#ifndef NS_PIPELINE_HPP
#define NS_PIPELINE_HPP

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ns/config.hpp"
#include "ns/metrics.hpp"
#include "ns/model.hpp"
#include "ns/synth.hpp"
#include "ns/trainer.hpp"

namespace ns {

namespace fs = std::filesystem;

inline std::string corpus_dir(const RunConfig& cfg) { return cfg.output_dir + "/corpus"; }
inline std::string pretrain_dir(const RunConfig& cfg) { return cfg.output_dir + "/pretrain"; }
inline std::string train_dir(const RunConfig& cfg) { return cfg.output_dir + "/train"; }
inline std::string eval_dir(const RunConfig& cfg) { return cfg.output_dir + "/eval"; }
inline std::string probe_dir(const RunConfig& cfg) { return cfg.output_dir + "/probe"; }
inline std::string extractor_ckpt_path(const RunConfig& cfg) {
  return pretrain_dir(cfg) + "/extractor.ckpt";
}
inline std::string averaged_ckpt_path(const RunConfig& cfg) {
  return train_dir(cfg) + "/averaged.ckpt";
}

inline void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir + "/resolved_config.json", std::ios::trunc);
  if (!out) throw DataError("cannot write resolved config in " + dir);
  out << resolved_json(cfg).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// cmd_synth
// ---------------------------------------------------------------------------

struct SynthSummary {
  int train_utterances = 0;
  int eval_utterances = 0;
  int enroll_utterances = 0;
  int trials = 0;
};

namespace detail {

struct CleanPool {
  // index: speaker -> utterances, generation order
  std::map<int, std::vector<Utterance>> by_speaker;
};

inline const Utterance& pick_clean(const CleanPool& pool, Rng& rng, int* speaker_out,
                                   int exclude_speaker = -1) {
  std::vector<int> speakers;
  for (const auto& [s, utts] : pool.by_speaker)
    if (s != exclude_speaker && !utts.empty()) speakers.push_back(s);
  const int s = speakers[rng.uniform_int(speakers.size())];
  if (speaker_out) *speaker_out = s;
  const auto& utts = pool.by_speaker.at(s);
  return utts[rng.uniform_int(utts.size())];
}

inline ManifestEntry store(const Utterance& u, const std::string& root,
                           const std::string& rel_dir) {
  fs::create_directories(root + "/" + rel_dir);
  const std::string rel = rel_dir + "/" + u.id + ".f32";
  write_waveform(root + "/" + rel, u);
  ManifestEntry e;
  e.id = u.id;
  e.condition = u.condition;
  e.speaker_ids = u.speakers_present;
  e.duration_s = u.duration_s;
  e.path = rel;
  return e;
}

inline Utterance corrupt(Condition cond, const Utterance& a, const Utterance& b,
                         const CorpusConfig& cc, Rng& rng, uint64_t noise_seed) {
  const double snr = rng.uniform(cc.snr_min_db, cc.snr_max_db);
  switch (cond) {
    case Condition::noisy: {
      const NoiseKind kind = rng.coin() ? NoiseKind::babble_like : NoiseKind::stationary;
      return make_noisy(a, kind, snr, noise_seed);
    }
    case Condition::concatenation:
      return rng.coin() ? make_concatenation(a, b) : make_concatenation(b, a);
    case Condition::overlap:
      return make_overlap(a, b, rng.uniform(0.1, 0.9), snr).mixed;
    case Condition::mixing:
      return make_mixing(a, b, snr).mixed;
    case Condition::clean:
      break;
  }
  throw DataError("corrupt: clean is not a corruption");
}

}  // namespace detail

inline SynthSummary cmd_synth(const RunConfig& cfg) {
  const std::string root = corpus_dir(cfg);
  write_resolved_config(cfg, root);
  const CorpusConfig& cc = cfg.corpus;
  const auto roster = gen_speakers(cc.n_train_speakers + cc.n_heldout_speakers, cfg.seed);
  SynthSummary summary;

  char idbuf[64];

  // Train split: clean utterances per training speaker.
  detail::CleanPool train_pool;
  std::vector<ManifestEntry> train_manifest;
  for (int s = 0; s < cc.n_train_speakers; ++s) {
    for (int u = 0; u < cc.train_utts_per_speaker; ++u) {
      Rng rng(hash_seed(cfg.seed, 0x7472636cull, uint64_t(s), uint64_t(u)));
      const double dur = rng.uniform(cc.duration_min_s, cc.duration_max_s);
      Utterance utt = gen_utterance(roster[size_t(s)], dur,
                                    hash_seed(cfg.seed, 1, uint64_t(s), uint64_t(u)),
                                    cc.sample_rate);
      std::snprintf(idbuf, sizeof(idbuf), "tr_clean_s%03d_u%03d", s, u);
      utt.id = idbuf;
      train_manifest.push_back(detail::store(utt, root, "train/clean"));
      train_pool.by_speaker[roster[size_t(s)].speaker_id].push_back(std::move(utt));
    }
  }

  // Train split: the four corrupted variants drawn from the clean pool.
  for (Condition cond : {Condition::noisy, Condition::concatenation, Condition::overlap,
                         Condition::mixing}) {
    for (int k = 0; k < cc.train_tests_per_condition; ++k) {
      Rng rng(hash_seed(cfg.seed, 0x74726372ull, uint64_t(cond), uint64_t(k)));
      int sa = 0, sb = 0;
      const Utterance& a = detail::pick_clean(train_pool, rng, &sa);
      const Utterance& b = detail::pick_clean(train_pool, rng, &sb, sa);
      Utterance out = detail::corrupt(cond, a, b, cc, rng,
                                      hash_seed(cfg.seed, 0x6e7ull, uint64_t(cond), uint64_t(k)));
      std::snprintf(idbuf, sizeof(idbuf), "tr_%s_%04d", condition_name(cond), k);
      out.id = idbuf;
      train_manifest.push_back(
          detail::store(out, root, std::string("train/") + condition_name(cond)));
    }
  }
  write_manifest(train_manifest, root + "/train/manifest.tsv");
  summary.train_utterances = int(train_manifest.size());

  // Eval split over held-out speakers: an enrollment pool plus test sources.
  const int n_enroll = cc.heldout_utts_per_speaker / 2;
  detail::CleanPool eval_pool;
  std::vector<ManifestEntry> enroll_manifest, eval_manifest;
  std::vector<Utterance> eval_clean_tests;
  for (int h = 0; h < cc.n_heldout_speakers; ++h) {
    const int s = cc.n_train_speakers + h;
    for (int u = 0; u < cc.heldout_utts_per_speaker; ++u) {
      Rng rng(hash_seed(cfg.seed, 0x6576636cull, uint64_t(s), uint64_t(u)));
      const double dur = rng.uniform(cc.duration_min_s, cc.duration_max_s);
      Utterance utt = gen_utterance(roster[size_t(s)], dur,
                                    hash_seed(cfg.seed, 2, uint64_t(s), uint64_t(u)),
                                    cc.sample_rate);
      if (u < n_enroll) {
        std::snprintf(idbuf, sizeof(idbuf), "ev_enroll_s%03d_u%02d", s, u);
        utt.id = idbuf;
        enroll_manifest.push_back(detail::store(utt, root, "eval/enroll"));
      } else {
        std::snprintf(idbuf, sizeof(idbuf), "ev_clean_s%03d_u%02d", s, u);
        utt.id = idbuf;
        eval_manifest.push_back(detail::store(utt, root, "eval/clean"));
        eval_clean_tests.push_back(utt);
        eval_pool.by_speaker[roster[size_t(s)].speaker_id].push_back(std::move(utt));
      }
    }
  }
  summary.enroll_utterances = int(enroll_manifest.size());

  std::map<Condition, std::vector<Utterance>> eval_tests;
  eval_tests[Condition::clean] = std::move(eval_clean_tests);
  for (Condition cond : {Condition::noisy, Condition::concatenation, Condition::overlap,
                         Condition::mixing}) {
    for (int k = 0; k < cc.eval_tests_per_condition; ++k) {
      Rng rng(hash_seed(cfg.seed, 0x65766372ull, uint64_t(cond), uint64_t(k)));
      int sa = 0, sb = 0;
      const Utterance& a = detail::pick_clean(eval_pool, rng, &sa);
      const Utterance& b = detail::pick_clean(eval_pool, rng, &sb, sa);
      Utterance out = detail::corrupt(cond, a, b, cc, rng,
                                      hash_seed(cfg.seed, 0x6e8ull, uint64_t(cond), uint64_t(k)));
      std::snprintf(idbuf, sizeof(idbuf), "ev_%s_%04d", condition_name(cond), k);
      out.id = idbuf;
      eval_manifest.push_back(
          detail::store(out, root, std::string("eval/") + condition_name(cond)));
      eval_tests[cond].push_back(std::move(out));
    }
  }
  write_manifest(eval_manifest, root + "/eval/manifest.tsv");
  write_manifest(enroll_manifest, root + "/eval/enroll_manifest.tsv");
  summary.eval_utterances = int(eval_manifest.size());

  // Per-condition trial lists against the enrollment pool.
  std::vector<Utterance> enroll_utts;
  for (const auto& e : enroll_manifest) {
    Utterance u;
    u.id = e.id;
    u.condition = Condition::clean;
    u.speakers_present = e.speaker_ids;
    enroll_utts.push_back(std::move(u));
  }
  for (const auto& [cond, tests] : eval_tests) {
    auto trials = build_trial_list(tests, enroll_utts, cc.trials_target_per_condition,
                                   cc.trials_nontarget_per_condition,
                                   hash_seed(cfg.seed, 0x7472ull, uint64_t(cond)));
    write_trial_list(trials,
                     root + "/eval/trials_" + condition_name(cond) + ".tsv");
    summary.trials += int(trials.size());
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Corpus access for the later stages
// ---------------------------------------------------------------------------

class CorpusView {
 public:
  static CorpusView load(const RunConfig& cfg) {
    CorpusView v;
    v.root_ = corpus_dir(cfg);
    v.fb_cfg_ = cfg.frontend;
    if (!fs::exists(v.root_ + "/train/manifest.tsv"))
      throw DataError("corpus not found under " + v.root_ + " (run `ns synth` first)");
    v.train_ = read_manifest(v.root_ + "/train/manifest.tsv");
    v.eval_tests_ = read_manifest(v.root_ + "/eval/manifest.tsv");
    v.eval_enroll_ = read_manifest(v.root_ + "/eval/enroll_manifest.tsv");
    for (const auto* list : {&v.train_, &v.eval_tests_, &v.eval_enroll_})
      for (const auto& e : *list) v.by_id_[e.id] = &e;
    return v;
  }

  const std::vector<ManifestEntry>& train_entries() const { return train_; }
  const std::vector<ManifestEntry>& eval_test_entries() const { return eval_tests_; }
  const std::vector<ManifestEntry>& eval_enroll_entries() const { return eval_enroll_; }

  const ManifestEntry& entry(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw DataError("unknown utterance id " + id);
    return *it->second;
  }

  Utterance utterance(const std::string& id) const {
    const ManifestEntry& e = entry(id);
    Utterance u;
    u.id = e.id;
    u.condition = e.condition;
    u.speakers_present = e.speaker_ids;
    u.duration_s = e.duration_s;
    u.samples = read_waveform(root_ + "/" + e.path, &u.sample_rate);
    return u;
  }

  const FbankMatrix& fbank(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    Utterance u = utterance(id);
    return cache_.emplace(id, extract_fbank(u.samples, fb_cfg_)).first->second;
  }

  std::vector<TrialListEntry> trials(Condition cond) const {
    return read_trial_list(root_ + "/eval/trials_" + std::string(condition_name(cond)) +
                           ".tsv");
  }

  BatchSource batch_source() const {
    BatchSource src;
    for (const auto& e : train_) {
      src.tests_by_condition[e.condition].push_back({e.id, e.condition, e.speaker_ids});
      if (e.condition == Condition::clean)
        src.enroll_utts_by_speaker[e.speaker_ids.at(0)].push_back(e.id);
    }
    return src;
  }

  std::vector<int> train_speakers() const {
    std::set<int> s;
    for (const auto& e : train_)
      if (e.condition == Condition::clean) s.insert(e.speaker_ids.at(0));
    return {s.begin(), s.end()};
  }

 private:
  std::string root_;
  FbankConfig fb_cfg_;
  std::vector<ManifestEntry> train_, eval_tests_, eval_enroll_;
  std::map<std::string, const ManifestEntry*> by_id_;
  std::map<std::string, FbankMatrix> cache_;
};

template <typename T>
std::map<std::string, std::vector<T>> embed_pool(const EnrollExtractor<T>& extractor,
                                                 CorpusView& corpus,
                                                 const std::vector<ManifestEntry>& utts) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& e : utts) out[e.id] = embed_enrollment(extractor, corpus.fbank(e.id));
  return out;
}

// ---------------------------------------------------------------------------
// cmd_pretrain
// ---------------------------------------------------------------------------

struct PretrainSummary {
  double final_train_acc = 0.0;
  std::string checkpoint;
};

namespace detail {

template <typename T>
PretrainSummary run_pretrain(const RunConfig& cfg) {
  CorpusView corpus = CorpusView::load(cfg);
  std::vector<int> speakers = corpus.train_speakers();
  std::map<int, int> class_of;
  for (size_t i = 0; i < speakers.size(); ++i) class_of[speakers[i]] = int(i);

  std::vector<PretrainSample> samples;
  for (const auto& e : corpus.train_entries())
    if (e.condition == Condition::clean)
      samples.push_back({e.id, class_of.at(e.speaker_ids.at(0))});

  auto extractor = init_extractor<T>(cfg.model, cfg.seed);
  auto fbank_of = [&](const std::string& id) -> const FbankMatrix& {
    return corpus.fbank(id);
  };
  PretrainResult result = pretrain_embedder<T>(extractor, int(speakers.size()), samples,
                                               fbank_of, cfg.pretrain, cfg.seed);

  ParamSet<T> params;
  register_extractor_params(extractor, params);
  params.sort_by_name();
  const std::string ckpt = extractor_ckpt_path(cfg);
  save_checkpoint(to_checkpoint(params), ckpt);

  std::ofstream log(pretrain_dir(cfg) + "/pretrain_log.jsonl", std::ios::trunc);
  for (const auto& row : result.log) {
    ordered_json j = {{"epoch", row.epoch},
                      {"loss", row.loss},
                      {"train_acc", row.train_acc},
                      {"seed", cfg.seed}};
    log << j.dump() << "\n";
  }
  ordered_json fin = {{"final_train_acc", result.final_train_acc}, {"seed", cfg.seed}};
  log << fin.dump() << "\n";
  return {result.final_train_acc, ckpt};
}

}  // namespace detail

inline PretrainSummary cmd_pretrain(const RunConfig& cfg, bool force = false) {
  if (!force && fs::exists(extractor_ckpt_path(cfg)))
    throw ConfigError("refusing to overwrite " + extractor_ckpt_path(cfg) +
                      " (use --force)");
  write_resolved_config(cfg, pretrain_dir(cfg));
  return cfg.precision == "f64" ? detail::run_pretrain<double>(cfg)
                                : detail::run_pretrain<float>(cfg);
}

// ---------------------------------------------------------------------------
// cmd_train
// ---------------------------------------------------------------------------

struct TrainSummary {
  std::vector<EpochStats> log;
  std::string averaged_checkpoint;
};

namespace detail {

template <typename T>
EnrollExtractor<T> load_extractor(const RunConfig& cfg, const std::string& ckpt_path) {
  if (!fs::exists(ckpt_path)) throw DataError("missing checkpoint " + ckpt_path);
  auto extractor = init_extractor<T>(cfg.model, cfg.seed);
  ParamSet<T> params;
  register_extractor_params(extractor, params);
  load_into(params, load_checkpoint(ckpt_path));
  freeze_extractor(extractor);
  return extractor;
}

// Held-out monitor: a fixed subset of the mixing-condition eval trials.
template <typename T>
std::function<std::pair<double, double>(const NsModel<T>&)> make_heldout_hook(
    const RunConfig& cfg, CorpusView& corpus,
    const std::map<std::string, std::vector<T>>& eval_embeddings) {
  auto all = corpus.trials(Condition::mixing);
  const size_t n = std::min(all.size(), size_t(cfg.heldout_monitor_trials));
  std::vector<TrialRef> subset;
  for (size_t i = 0; i < n; ++i)
    subset.push_back({all[i].enroll_utt_id, all[i].test_utt_id, all[i].target});
  return [&corpus, &eval_embeddings, subset, &cfg](const NsModel<T>& model) {
    auto fbank_of = [&corpus](const std::string& id) -> const FbankMatrix& {
      return corpus.fbank(id);
    };
    auto emb_of = [&eval_embeddings](const std::string& id) -> const std::vector<T>& {
      return eval_embeddings.at(id);
    };
    auto scored = score_trials<T>(model, subset, fbank_of, emb_of);
    std::vector<double> tgt, non;
    for (const auto& s : scored) (s.target ? tgt : non).push_back(s.score);
    const auto m = compute_metrics(tgt, non, cfg.eval.p_target, cfg.eval.c_miss,
                                   cfg.eval.c_fa);
    return std::make_pair(m.eer, m.min_dcf);
  };
}

template <typename T>
TrainSummary run_train(const RunConfig& cfg, const std::string& extractor_ckpt) {
  CorpusView corpus = CorpusView::load(cfg);
  auto extractor = load_extractor<T>(cfg, extractor_ckpt);
  auto model = init_ns_model<T>(cfg.model, cfg.seed, std::move(extractor));

  BatchSource source = corpus.batch_source();
  std::vector<ManifestEntry> train_clean;
  for (const auto& e : corpus.train_entries())
    if (e.condition == Condition::clean) train_clean.push_back(e);
  auto train_embeddings = embed_pool<T>(model.extractor, corpus, train_clean);
  auto eval_embeddings =
      embed_pool<T>(model.extractor, corpus, corpus.eval_enroll_entries());

  auto fbank_of = [&corpus](const std::string& id) -> const FbankMatrix& {
    return corpus.fbank(id);
  };
  auto emb_of = [&train_embeddings](const std::string& id) -> const std::vector<T>& {
    return train_embeddings.at(id);
  };

  const std::string dir = train_dir(cfg);
  std::vector<std::string> epoch_ckpts;
  TrainHooks<T> hooks;
  hooks.on_checkpoint = [&](int epoch, const Checkpoint& ckpt) {
    char name[48];
    std::snprintf(name, sizeof(name), "/epoch_%03d.ckpt", epoch);
    const std::string path = dir + name;
    save_checkpoint(ckpt, path);
    epoch_ckpts.push_back(path);
  };
  hooks.heldout_eval = make_heldout_hook<T>(cfg, corpus, eval_embeddings);

  TrainSummary summary;
  summary.log = train_ns<T>(model, source, fbank_of, emb_of, cfg.train, cfg.seed, hooks);

  std::ofstream log(dir + "/train_log.jsonl", std::ios::trunc);
  for (const auto& row : summary.log) {
    ordered_json j = {{"epoch", row.epoch},
                      {"loss", row.loss},
                      {"heldout_eer", row.heldout_eer},
                      {"heldout_mindcf", row.heldout_mindcf},
                      {"wallclock_s", row.wallclock_s},
                      {"seed", cfg.seed}};
    log << j.dump() << "\n";
  }

  const int k = std::min<int>(cfg.train.avg_last_k, int(epoch_ckpts.size()));
  std::vector<Checkpoint> last;
  for (int i = int(epoch_ckpts.size()) - k; i < int(epoch_ckpts.size()); ++i)
    last.push_back(load_checkpoint(epoch_ckpts[size_t(i)]));
  save_checkpoint(average_weights(last), averaged_ckpt_path(cfg));
  summary.averaged_checkpoint = averaged_ckpt_path(cfg);
  return summary;
}

}  // namespace detail

inline TrainSummary cmd_train(const RunConfig& cfg, std::string extractor_ckpt = "") {
  if (extractor_ckpt.empty()) extractor_ckpt = extractor_ckpt_path(cfg);
  write_resolved_config(cfg, train_dir(cfg));
  return cfg.precision == "f64" ? detail::run_train<double>(cfg, extractor_ckpt)
                                : detail::run_train<float>(cfg, extractor_ckpt);
}

// ---------------------------------------------------------------------------
// cmd_eval
// ---------------------------------------------------------------------------

struct EvalSummary {
  // Per condition (plus "overall"): the detection metrics.
  std::map<std::string, DetMetrics> metrics;
};

namespace detail {

template <typename T>
EvalSummary run_eval(const RunConfig& cfg, const std::string& ckpt_path,
                     const std::string& system) {
  if (system != "ns" && system != "cosine")
    throw ConfigError("eval system must be ns or cosine");
  if (!fs::exists(ckpt_path)) throw DataError("missing checkpoint " + ckpt_path);
  CorpusView corpus = CorpusView::load(cfg);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);

  auto extractor = init_extractor<T>(cfg.model, cfg.seed);
  {
    ParamSet<T> ext_params;
    register_extractor_params(extractor, ext_params);
    load_into(ext_params, ckpt);
    freeze_extractor(extractor);
  }
  auto enroll_embeddings = embed_pool<T>(extractor, corpus, corpus.eval_enroll_entries());

  NsModel<T> model;
  if (system == "ns") {
    model = init_ns_model<T>(cfg.model, cfg.seed, extractor);
    auto params = ns_params(model);
    load_into(params, ckpt);
  }

  const std::string dir = eval_dir(cfg);
  auto fbank_of = [&corpus](const std::string& id) -> const FbankMatrix& {
    return corpus.fbank(id);
  };
  auto emb_of = [&enroll_embeddings](const std::string& id) -> const std::vector<T>& {
    return enroll_embeddings.at(id);
  };

  std::map<std::string, std::vector<T>> test_emb_cache;  // cosine system only
  auto test_embedding = [&](const std::string& id) -> const std::vector<T>& {
    auto it = test_emb_cache.find(id);
    if (it != test_emb_cache.end()) return it->second;
    return test_emb_cache.emplace(id, embed_enrollment(extractor, corpus.fbank(id)))
        .first->second;
  };

  EvalSummary summary;
  std::vector<double> pooled_tgt, pooled_non;
  ordered_json rows = ordered_json::array();
  for (Condition cond : all_conditions()) {
    auto trial_list = corpus.trials(cond);
    std::vector<TrialRef> refs;
    for (const auto& t : trial_list)
      refs.push_back({t.enroll_utt_id, t.test_utt_id, t.target});

    std::vector<ScoredTrial> scored;
    if (system == "ns") {
      scored = score_trials<T>(model, refs, fbank_of, emb_of);
    } else {
      scored.reserve(refs.size());
      for (const auto& r : refs)
        scored.push_back({r.enroll_utt_id, r.test_utt_id,
                          cosine_score(emb_of(r.enroll_utt_id), test_embedding(r.test_utt_id)),
                          r.target});
    }
    write_score_file(scored, dir + "/scores_" + system + "_" + condition_name(cond) +
                                 ".tsv");

    std::vector<double> tgt, non;
    for (const auto& s : scored) (s.target ? tgt : non).push_back(s.score);
    pooled_tgt.insert(pooled_tgt.end(), tgt.begin(), tgt.end());
    pooled_non.insert(pooled_non.end(), non.begin(), non.end());
    DetMetrics m =
        compute_metrics(tgt, non, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa);
    write_det_csv(m.curve, dir + "/det_" + system + "_" + condition_name(cond) + ".csv");
    summary.metrics[condition_name(cond)] = m;
    rows.push_back({{"system", system},
                    {"condition", condition_name(cond)},
                    {"n_target", m.n_target},
                    {"n_nontarget", m.n_nontarget},
                    {"eer", m.eer},
                    {"min_dcf", m.min_dcf},
                    {"threshold_at_eer", m.threshold_at_eer}});
  }

  // Pooled overall metrics over concatenated score lists, never averaged EERs.
  DetMetrics overall = compute_metrics(pooled_tgt, pooled_non, cfg.eval.p_target,
                                       cfg.eval.c_miss, cfg.eval.c_fa);
  summary.metrics["overall"] = overall;
  rows.push_back({{"system", system},
                  {"condition", "overall"},
                  {"n_target", overall.n_target},
                  {"n_nontarget", overall.n_nontarget},
                  {"eer", overall.eer},
                  {"min_dcf", overall.min_dcf},
                  {"threshold_at_eer", overall.threshold_at_eer}});

  ordered_json doc = {{"system", system},
                      {"checkpoint", ckpt_path},
                      {"p_target", cfg.eval.p_target},
                      {"c_miss", cfg.eval.c_miss},
                      {"c_fa", cfg.eval.c_fa},
                      {"min_dcf_normalization", "min(c_miss*p_tar, c_fa*(1-p_tar))"},
                      {"conditions", rows}};
  std::ofstream out(dir + "/metrics_" + system + ".json", std::ios::trunc);
  out << doc.dump(2) << "\n";
  return summary;
}

}  // namespace detail

inline EvalSummary cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                            const std::string& system) {
  write_resolved_config(cfg, eval_dir(cfg));
  return cfg.precision == "f64" ? detail::run_eval<double>(cfg, checkpoint, system)
                                : detail::run_eval<float>(cfg, checkpoint, system);
}

// ---------------------------------------------------------------------------
// Unidentifiability probe
// ---------------------------------------------------------------------------

struct ProbePairResult {
  int speaker_a = 0;
  int speaker_b = 0;
  std::vector<double> cos_a;        // per grid entry, cosine to A's centroid
  std::vector<double> cos_b;        // per grid entry, cosine to B's centroid
  double clean_same_cos = 0.0;      // fresh clean A utterance vs A centroid
};

namespace detail {

template <typename T>
std::vector<T> centroid(const EnrollExtractor<T>& extractor, CorpusView& corpus,
                        const std::vector<std::string>& utt_ids) {
  std::vector<T> c;
  for (const auto& id : utt_ids) {
    auto e = embed_enrollment(extractor, corpus.fbank(id));
    if (c.empty()) c.assign(e.size(), T(0));
    for (size_t i = 0; i < e.size(); ++i) c[i] += e[i];
  }
  for (auto& v : c) v = T(double(v) / double(utt_ids.size()));
  return c;
}

}  // namespace detail

// Mixes one utterance pair per grid SNR (speaker A as target) and reports
// the mixture embedding's cosine to both speakers' clean centroids.
template <typename T>
ProbePairResult unidentifiability_probe(const EnrollExtractor<T>& extractor,
                                        CorpusView& corpus,
                                        const std::vector<std::string>& a_utts,
                                        const std::vector<std::string>& b_utts,
                                        const std::vector<double>& snr_grid,
                                        const FbankConfig& fb_cfg) {
  if (!extractor.trained) throw DataError("unidentifiability_probe: extractor untrained");
  if (a_utts.size() < 11 || b_utts.size() < 11)
    throw DataError("unidentifiability_probe: need >= 11 utterances per speaker");
  const std::vector<std::string> a_cent(a_utts.begin(), a_utts.begin() + 10);
  const std::vector<std::string> b_cent(b_utts.begin(), b_utts.begin() + 10);
  auto ca = detail::centroid(extractor, corpus, a_cent);
  auto cb = detail::centroid(extractor, corpus, b_cent);

  Utterance ua = corpus.utterance(a_utts[10]);
  Utterance ub = corpus.utterance(b_utts[10]);

  ProbePairResult r;
  r.speaker_a = corpus.entry(a_utts[0]).speaker_ids.at(0);
  r.speaker_b = corpus.entry(b_utts[0]).speaker_ids.at(0);
  for (double snr : snr_grid) {
    MixResult mixed = make_mixing(ua, ub, snr);
    auto emb = embed_enrollment(extractor, extract_fbank(mixed.mixed.samples, fb_cfg));
    r.cos_a.push_back(cosine_score(emb, ca));
    r.cos_b.push_back(cosine_score(emb, cb));
  }
  auto fresh = embed_enrollment(extractor, corpus.fbank(a_utts[10]));
  r.clean_same_cos = cosine_score(fresh, ca);
  return r;
}

struct ProbeSummary {
  std::vector<double> snr_grid;
  std::vector<double> mean_cos_a;
  std::vector<double> mean_cos_b;
  double mean_clean_same_cos = 0.0;
  std::vector<ProbePairResult> pairs;
};

namespace detail {

template <typename T>
ProbeSummary run_probe(const RunConfig& cfg, const std::string& extractor_ckpt) {
  CorpusView corpus = CorpusView::load(cfg);
  auto extractor = load_extractor<T>(cfg, extractor_ckpt);

  // Clean train utterances per speaker, in manifest order.
  std::map<int, std::vector<std::string>> utts_by_speaker;
  for (const auto& e : corpus.train_entries())
    if (e.condition == Condition::clean)
      utts_by_speaker[e.speaker_ids.at(0)].push_back(e.id);
  std::vector<int> speakers;
  for (const auto& [s, utts] : utts_by_speaker)
    if (utts.size() >= 11) speakers.push_back(s);
  if (speakers.size() < 2) throw DataError("probe: not enough speakers with 11+ utts");

  Rng rng(hash_seed(cfg.seed, 0x70726f62ull));
  std::set<std::pair<int, int>> seen;
  ProbeSummary summary;
  summary.snr_grid = cfg.probe.snr_grid_db;
  summary.mean_cos_a.assign(summary.snr_grid.size(), 0.0);
  summary.mean_cos_b.assign(summary.snr_grid.size(), 0.0);
  for (int k = 0; k < cfg.probe.n_pairs; ++k) {
    int a = 0, b = 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      a = speakers[rng.uniform_int(speakers.size())];
      b = speakers[rng.uniform_int(speakers.size())];
      if (a != b && !seen.count({a, b})) break;
    }
    seen.insert({a, b});
    auto pair = unidentifiability_probe<T>(extractor, corpus, utts_by_speaker.at(a),
                                           utts_by_speaker.at(b), summary.snr_grid,
                                           cfg.frontend);
    for (size_t i = 0; i < summary.snr_grid.size(); ++i) {
      summary.mean_cos_a[i] += pair.cos_a[i];
      summary.mean_cos_b[i] += pair.cos_b[i];
    }
    summary.mean_clean_same_cos += pair.clean_same_cos;
    summary.pairs.push_back(std::move(pair));
  }
  const double n = double(cfg.probe.n_pairs);
  for (auto& v : summary.mean_cos_a) v /= n;
  for (auto& v : summary.mean_cos_b) v /= n;
  summary.mean_clean_same_cos /= n;
  return summary;
}

}  // namespace detail

inline ProbeSummary cmd_probe(const RunConfig& cfg, std::string extractor_ckpt = "") {
  if (extractor_ckpt.empty()) extractor_ckpt = extractor_ckpt_path(cfg);
  write_resolved_config(cfg, probe_dir(cfg));
  ProbeSummary summary = cfg.precision == "f64"
                             ? detail::run_probe<double>(cfg, extractor_ckpt)
                             : detail::run_probe<float>(cfg, extractor_ckpt);

  std::ofstream csv(probe_dir(cfg) + "/probe.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write probe.csv");
  csv << "snr_db,cos_a,cos_b\n";
  char buf[96];
  for (size_t i = 0; i < summary.snr_grid.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.1f,%.9f,%.9f\n", summary.snr_grid[i],
                  summary.mean_cos_a[i], summary.mean_cos_b[i]);
    csv << buf;
  }
  ordered_json j = {{"n_pairs", int(summary.pairs.size())},
                    {"mean_clean_same_speaker_cosine", summary.mean_clean_same_cos},
                    {"seed", cfg.seed}};
  std::ofstream js(probe_dir(cfg) + "/probe_summary.json", std::ios::trunc);
  js << j.dump(2) << "\n";
  return summary;
}

}  // namespace ns

#endif  // NS_PIPELINE_HPP
