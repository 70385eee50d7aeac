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
// Deterministic synthetic speaker corpus: source-filter speakers defined by
// three formant resonances and a pitch, plus the four corruption recipes
// (noisy, concatenation, overlap, mixing) and trial-list construction.

#ifndef NS_SYNTH_HPP
#define NS_SYNTH_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ns/common.hpp"
#include "ns/fbank.hpp"

namespace ns {

enum class Condition { clean, noisy, concatenation, overlap, mixing };

inline const char* condition_name(Condition c) {
  switch (c) {
    case Condition::clean: return "clean";
    case Condition::noisy: return "noisy";
    case Condition::concatenation: return "concatenation";
    case Condition::overlap: return "overlap";
    case Condition::mixing: return "mixing";
  }
  return "?";
}

inline Condition condition_from_name(const std::string& s) {
  for (Condition c : {Condition::clean, Condition::noisy, Condition::concatenation,
                      Condition::overlap, Condition::mixing})
    if (s == condition_name(c)) return c;
  throw DataError("unknown condition " + s);
}

inline const std::array<Condition, 5>& all_conditions() {
  static const std::array<Condition, 5> k = {Condition::clean, Condition::noisy,
                                             Condition::concatenation,
                                             Condition::overlap, Condition::mixing};
  return k;
}

// Synthetic babble speakers live in an id block far above any corpus split.
constexpr int kBabbleIdBase = 1 << 20;

struct SpeakerProfile {
  int speaker_id = 0;
  std::array<double, 3> formant_centers{};     // Hz, strictly increasing
  std::array<double, 3> formant_bandwidths{};  // Hz
  double pitch_base = 0;                       // Hz
  uint64_t seed = 0;                           // roster master seed
};

struct Utterance {
  std::string id;
  std::vector<float> samples;
  int sample_rate = 16000;
  std::vector<int> speakers_present;  // sorted, unique
  Condition condition = Condition::clean;
  double duration_s = 0.0;
};

struct TrialListEntry {
  std::string enroll_utt_id;
  std::string test_utt_id;
  bool target = false;
};

// ---------------------------------------------------------------------------
// Speakers
// ---------------------------------------------------------------------------

// Euclidean distance between formant-center tuples.
inline double profile_distance(const SpeakerProfile& a, const SpeakerProfile& b) {
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = a.formant_centers[i] - b.formant_centers[i];
    d2 += d * d;
  }
  return std::sqrt(d2);
}

namespace detail {

inline SpeakerProfile profile_candidate(int speaker_id, uint64_t master_seed,
                                        int attempt) {
  Rng rng(hash_seed(master_seed, 0x73706b72ull, uint64_t(speaker_id),
                    uint64_t(attempt)));
  SpeakerProfile p;
  p.speaker_id = speaker_id;
  p.seed = master_seed;
  p.formant_centers[0] = rng.uniform(320.0, 850.0);
  p.formant_centers[1] = rng.uniform(1000.0, 2300.0);
  p.formant_centers[2] = rng.uniform(2600.0, 3400.0);
  p.formant_bandwidths[0] = rng.uniform(60.0, 90.0);
  p.formant_bandwidths[1] = rng.uniform(80.0, 120.0);
  p.formant_bandwidths[2] = rng.uniform(100.0, 150.0);
  // Snap the pitch so one harmonic lands exactly on the first formant; the
  // strongest periodogram peak then identifies the speaker's F1.
  const double nominal = rng.uniform(95.0, 190.0);
  const double k = std::max(2.0, std::round(p.formant_centers[0] / nominal));
  p.pitch_base = p.formant_centers[0] / k;
  return p;
}

}  // namespace detail

// Deterministic roster; candidates colliding with an earlier speaker
// (formant-tuple distance < 30 Hz) are resampled.
inline std::vector<SpeakerProfile> gen_speakers(int n, uint64_t master_seed) {
  std::vector<SpeakerProfile> roster;
  roster.reserve(size_t(n));
  for (int id = 0; id < n; ++id) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      SpeakerProfile cand = detail::profile_candidate(id, master_seed, attempt);
      placed = true;
      for (const auto& prev : roster)
        if (profile_distance(cand, prev) < 30.0) {
          placed = false;
          break;
        }
      if (placed) roster.push_back(cand);
    }
    if (!placed) throw DataError("gen_speakers: could not place speaker");
  }
  return roster;
}

inline SpeakerProfile gen_speaker(int speaker_id, uint64_t master_seed) {
  if (speaker_id < 0) throw DataError("gen_speaker: negative id");
  return gen_speakers(speaker_id + 1, master_seed).back();
}

// ---------------------------------------------------------------------------
// Waveform synthesis
// ---------------------------------------------------------------------------

inline void peak_normalize(std::vector<float>& samples, float peak = 0.97f) {
  float mx = 0.0f;
  for (float v : samples) mx = std::max(mx, std::abs(v));
  if (mx <= 0.0f) throw NumericalError("peak_normalize: zero signal");
  const float s = peak / mx;
  for (auto& v : samples) v *= s;
}

// Pitch-jittered harmonic source shaped by the profile's formant resonances,
// a slow amplitude envelope, and a low-level noise floor.
inline Utterance gen_utterance(const SpeakerProfile& profile, double duration_s,
                               uint64_t seed, int sample_rate = 16000) {
  if (duration_s < 1.0 || duration_s > 30.0)
    throw DataError("gen_utterance: duration out of [1, 30] s");
  Rng rng(hash_seed(profile.seed, 0x75747400ull, uint64_t(profile.speaker_id), seed));

  const size_t n = size_t(std::llround(duration_s * sample_rate));
  const double f_max = 3800.0;
  const int n_harm = std::max(1, int(f_max / (profile.pitch_base * 1.04)));

  const double vib_rate = rng.uniform(2.0, 3.5);
  const double vib_phase = rng.uniform(0.0, 6.2831853);
  const double env_rate = rng.uniform(0.6, 1.4);
  const double env_phase = rng.uniform(0.0, 6.2831853);
  std::vector<double> phase(static_cast<size_t>(n_harm));
  for (auto& p : phase) p = rng.uniform(0.0, 6.2831853);

  static constexpr double kGain[3] = {1.0, 0.63, 0.35};
  const int block = 160;  // 10 ms amplitude/pitch update
  std::vector<float> out(n, 0.0f);
  std::vector<double> amp(size_t(n_harm), 0.0);
  double walk = 0.0;

  for (size_t start = 0; start < n; start += size_t(block)) {
    const size_t stop = std::min(n, start + size_t(block));
    const double t0 = double(start) / sample_rate;
    walk = std::clamp(walk + rng.normal() * 0.002, -0.01, 0.01);
    const double f0 = profile.pitch_base *
                      (1.0 + 0.02 * std::sin(6.2831853 * vib_rate * t0 + vib_phase) + walk);
    for (int h = 1; h <= n_harm; ++h) {
      const double fh = h * f0;
      double resonance = 0.0;
      for (int j = 0; j < 3; ++j) {
        const double d = (fh - profile.formant_centers[j]) / profile.formant_bandwidths[j];
        resonance += kGain[j] / (1.0 + d * d);
      }
      amp[size_t(h) - 1] = resonance / double(h);
    }
    const double env = 0.8 + 0.2 * std::sin(6.2831853 * env_rate * t0 + env_phase);
    for (size_t i = start; i < stop; ++i) {
      double s = 0.0;
      for (int h = 1; h <= n_harm; ++h) {
        double& ph = phase[size_t(h) - 1];
        ph += 6.28318530717958647692 * h * f0 / sample_rate;
        if (ph > 6.28318530717958647692) ph -= 6.28318530717958647692;
        s += amp[size_t(h) - 1] * std::sin(ph);
      }
      out[i] = float(s * env);
    }
  }

  // Onset/offset ramps against clicks, then a -28 dB noise floor.
  const size_t ramp = std::min(n / 2, size_t(sample_rate) * 30 / 1000);
  for (size_t i = 0; i < ramp; ++i) {
    const float w = float(0.5 - 0.5 * std::cos(3.14159265358979 * double(i) / double(ramp)));
    out[i] *= w;
    out[n - 1 - i] *= w;
  }
  double rms = 0.0;
  for (float v : out) rms += double(v) * v;
  rms = std::sqrt(rms / double(n));
  const double noise_scale = rms * std::pow(10.0, -28.0 / 20.0);
  for (auto& v : out) v += float(rng.normal() * noise_scale);
  peak_normalize(out);

  Utterance u;
  u.samples = std::move(out);
  u.sample_rate = sample_rate;
  u.speakers_present = {profile.speaker_id};
  u.condition = Condition::clean;
  u.duration_s = double(n) / sample_rate;
  return u;
}

// ---------------------------------------------------------------------------
// Mixing primitives
// ---------------------------------------------------------------------------

inline double mean_power(const std::vector<float>& v) {
  if (v.empty()) return 0.0;
  double p = 0.0;
  for (float s : v) p += double(s) * s;
  return p / double(v.size());
}

// Post-gain component tracks are kept so SNR can be re-measured after the fact.
struct MixResult {
  Utterance mixed;
  std::vector<float> component_target;
  std::vector<float> component_interferer;
};

// Scales the interferer by g so 10*log10(P_target / (g^2 * P_interferer))
// equals snr_db, sums, then peak-normalizes (both components share the
// normalization factor, so the measured ratio is preserved).
inline MixResult mix_at_snr(const Utterance& target,
                            const std::vector<float>& interferer, double snr_db) {
  if (interferer.size() != target.samples.size())
    throw DataError("mix_at_snr: length mismatch");
  const double pt = mean_power(target.samples);
  const double pi = mean_power(interferer);
  if (pt <= 0.0 || pi <= 0.0) throw DataError("mix_at_snr: zero-power input");
  const double g = std::sqrt(pt / (pi * std::pow(10.0, snr_db / 10.0)));

  MixResult r;
  r.component_target = target.samples;
  r.component_interferer.resize(interferer.size());
  for (size_t i = 0; i < interferer.size(); ++i)
    r.component_interferer[i] = float(g * interferer[i]);

  r.mixed = target;
  r.mixed.samples.resize(target.samples.size());
  float mx = 0.0f;
  for (size_t i = 0; i < target.samples.size(); ++i) {
    r.mixed.samples[i] = r.component_target[i] + r.component_interferer[i];
    mx = std::max(mx, std::abs(r.mixed.samples[i]));
  }
  if (mx <= 0.0f) throw NumericalError("mix_at_snr: silent mix");
  const float s = 0.97f / mx;
  for (size_t i = 0; i < r.mixed.samples.size(); ++i) {
    r.mixed.samples[i] *= s;
    r.component_target[i] *= s;
    r.component_interferer[i] *= s;
  }
  return r;
}

enum class NoiseKind { stationary, babble_like };

// Sum of >= 4 synthetic speakers drawn from the reserved babble id block,
// i.e. guaranteed outside any corpus split.
inline std::vector<float> babble_noise(size_t n_samples, int n_speakers,
                                       uint64_t seed, int sample_rate,
                                       std::vector<int>* used_ids = nullptr) {
  std::vector<float> noise(n_samples, 0.0f);
  const double dur = std::max(1.0, double(n_samples) / sample_rate);
  for (int j = 0; j < n_speakers; ++j) {
    const int id = kBabbleIdBase + int(hash_seed(seed, uint64_t(j)) % 9973);
    if (used_ids) used_ids->push_back(id);
    SpeakerProfile p = detail::profile_candidate(id, hash_seed(seed, 0xba5eull), j);
    p.speaker_id = id;
    Utterance u = gen_utterance(p, dur, hash_seed(seed, 0xbabb1eull, uint64_t(j)),
                                sample_rate);
    for (size_t i = 0; i < n_samples; ++i) noise[i] += u.samples[i % u.samples.size()];
  }
  return noise;
}

inline Utterance make_noisy(const Utterance& target, NoiseKind kind, double snr_db,
                            uint64_t seed) {
  std::vector<float> noise(target.samples.size());
  if (kind == NoiseKind::stationary) {
    // One-pole lowpassed white noise.
    Rng rng(hash_seed(seed, 0x6e6f6973ull));
    double y = 0.0;
    for (auto& v : noise) {
      y += 0.25 * (rng.normal() - y);
      v = float(y);
    }
  } else {
    noise = babble_noise(target.samples.size(), 4, seed, target.sample_rate);
  }
  MixResult r = mix_at_snr(target, noise, snr_db);
  r.mixed.condition = Condition::noisy;
  r.mixed.speakers_present = target.speakers_present;  // noise carries no identity
  r.mixed.duration_s = target.duration_s;
  return r.mixed;
}

inline void require_distinct_single_speakers(const Utterance& a, const Utterance& b,
                                             const char* who) {
  if (a.speakers_present.size() != 1 || b.speakers_present.size() != 1 ||
      a.speakers_present[0] == b.speakers_present[0])
    throw DataError(std::string(who) + ": needs two distinct single-speaker inputs");
}

inline std::vector<int> speaker_union(const Utterance& a, const Utterance& b) {
  std::vector<int> u = a.speakers_present;
  u.insert(u.end(), b.speakers_present.begin(), b.speakers_present.end());
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

// samples = a ++ b; the caller decides the order (seeded coin flip upstream).
inline Utterance make_concatenation(const Utterance& a, const Utterance& b) {
  require_distinct_single_speakers(a, b, "make_concatenation");
  Utterance u;
  u.samples = a.samples;
  u.samples.insert(u.samples.end(), b.samples.begin(), b.samples.end());
  u.sample_rate = a.sample_rate;
  u.speakers_present = speaker_union(a, b);
  u.condition = Condition::concatenation;
  u.duration_s = double(u.samples.size()) / a.sample_rate;
  return u;
}

inline std::vector<float> tile_to(const std::vector<float>& v, size_t n) {
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = v[i % v.size()];
  return out;
}

struct OverlapResult {
  Utterance mixed;
  std::vector<float> component_a;  // full-length track of the leading speaker
  std::vector<float> component_b;  // full-length track of the trailing speaker
  size_t onset_b = 0;
  size_t overlap_len = 0;
};

// Suffix overlap: b enters at the tail of a so that the shared region spans
// overlap_ratio of the total output. Inputs are tiled to a common length
// first, which makes every ratio in [0.1, 0.9] feasible. The shared region
// is mixed at snr_db (a as target).
inline OverlapResult make_overlap(const Utterance& a, const Utterance& b,
                                  double overlap_ratio, double snr_db) {
  require_distinct_single_speakers(a, b, "make_overlap");
  if (overlap_ratio < 0.1 || overlap_ratio > 0.9)
    throw DataError("make_overlap: ratio outside [0.1, 0.9]");
  const size_t len = std::max(a.samples.size(), b.samples.size());
  std::vector<float> sa = tile_to(a.samples, len);
  std::vector<float> sb = tile_to(b.samples, len);

  const size_t ov = std::max<size_t>(
      1, size_t(std::llround(2.0 * double(len) * overlap_ratio / (1.0 + overlap_ratio))));
  const size_t total = 2 * len - ov;
  const size_t onset = len - ov;

  // Gain from the shared-region powers.
  double pa = 0.0, pb = 0.0;
  for (size_t i = 0; i < ov; ++i) {
    pa += double(sa[onset + i]) * sa[onset + i];
    pb += double(sb[i]) * sb[i];
  }
  if (pa <= 0.0 || pb <= 0.0) throw DataError("make_overlap: zero-power region");
  pa /= double(ov);
  pb /= double(ov);
  const double g = std::sqrt(pa / (pb * std::pow(10.0, snr_db / 10.0)));

  OverlapResult r;
  r.onset_b = onset;
  r.overlap_len = ov;
  r.component_a.assign(total, 0.0f);
  r.component_b.assign(total, 0.0f);
  for (size_t i = 0; i < len; ++i) r.component_a[i] = sa[i];
  for (size_t i = 0; i < len; ++i) r.component_b[onset + i] = float(g * sb[i]);

  r.mixed.samples.assign(total, 0.0f);
  float mx = 0.0f;
  for (size_t i = 0; i < total; ++i) {
    r.mixed.samples[i] = r.component_a[i] + r.component_b[i];
    mx = std::max(mx, std::abs(r.mixed.samples[i]));
  }
  const float s = 0.97f / mx;
  for (size_t i = 0; i < total; ++i) {
    r.mixed.samples[i] *= s;
    r.component_a[i] *= s;
    r.component_b[i] *= s;
  }
  r.mixed.sample_rate = a.sample_rate;
  r.mixed.speakers_present = speaker_union(a, b);
  r.mixed.condition = Condition::overlap;
  r.mixed.duration_s = double(total) / a.sample_rate;
  return r;
}

// Full-length mix: the shorter signal is tiled to the longer one's length.
inline MixResult make_mixing(const Utterance& a, const Utterance& b, double snr_db) {
  require_distinct_single_speakers(a, b, "make_mixing");
  const size_t len = std::max(a.samples.size(), b.samples.size());
  Utterance target = a;
  target.samples = tile_to(a.samples, len);
  MixResult r = mix_at_snr(target, tile_to(b.samples, len), snr_db);
  r.mixed.speakers_present = speaker_union(a, b);
  r.mixed.condition = Condition::mixing;
  r.mixed.duration_s = double(len) / a.sample_rate;
  return r;
}

// ---------------------------------------------------------------------------
// Trial lists
// ---------------------------------------------------------------------------

inline bool speaker_in(int id, const std::vector<int>& present) {
  return std::find(present.begin(), present.end(), id) != present.end();
}

// Samples n_target + n_nontarget unique (enrollment, test) pairs; the label
// is target iff the enrollment speaker is present in the test utterance.
inline std::vector<TrialListEntry> build_trial_list(
    const std::vector<Utterance>& tests, const std::vector<Utterance>& enroll_pool,
    int n_target, int n_nontarget, uint64_t seed) {
  for (const auto& e : enroll_pool)
    if (e.condition != Condition::clean || e.speakers_present.size() != 1)
      throw DataError("build_trial_list: enrollment pool must be clean single-speaker");

  std::vector<TrialListEntry> targets, nontargets;
  for (const auto& t : tests)
    for (const auto& e : enroll_pool) {
      if (e.id == t.id) continue;
      if (speaker_in(e.speakers_present[0], t.speakers_present))
        targets.push_back({e.id, t.id, true});
      else
        nontargets.push_back({e.id, t.id, false});
    }
  if (int(targets.size()) < n_target || int(nontargets.size()) < n_nontarget)
    throw DataError("build_trial_list: insufficient corpus for requested counts");

  Rng rng(hash_seed(seed, 0x7472ull));
  rng.shuffle(targets);
  rng.shuffle(nontargets);
  targets.resize(size_t(n_target));
  nontargets.resize(size_t(n_nontarget));
  std::vector<TrialListEntry> out = std::move(targets);
  out.insert(out.end(), nontargets.begin(), nontargets.end());
  rng.shuffle(out);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------

// Waveforms: raw 32-bit LE floats plus a one-line sidecar header.
inline void write_waveform(const std::string& path, const Utterance& u) {
  write_f32_file(path, u.samples);
  std::ofstream hdr(path + ".hdr", std::ios::trunc);
  if (!hdr) throw DataError("cannot write " + path + ".hdr");
  hdr << "sample_rate=" << u.sample_rate << "\n";
}

inline std::vector<float> read_waveform(const std::string& path, int* sample_rate) {
  std::ifstream hdr(path + ".hdr");
  if (!hdr) throw DataError("missing sidecar header for " + path);
  std::string line;
  std::getline(hdr, line);
  if (line.rfind("sample_rate=", 0) != 0)
    throw DataError("bad sidecar header for " + path);
  if (sample_rate) *sample_rate = std::stoi(line.substr(12));
  return read_f32_file(path);
}

struct ManifestEntry {
  std::string id;
  Condition condition = Condition::clean;
  std::vector<int> speaker_ids;
  double duration_s = 0.0;
  std::string path;  // relative to the manifest directory
};

inline std::string format_duration(double s) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", s);
  return buf;
}

inline void write_manifest(const std::vector<ManifestEntry>& entries,
                           const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path);
  for (const auto& e : entries) {
    out << e.id << '\t' << condition_name(e.condition) << '\t';
    for (size_t i = 0; i < e.speaker_ids.size(); ++i)
      out << (i ? "," : "") << e.speaker_ids[i];
    out << '\t' << format_duration(e.duration_s) << '\t' << e.path << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string cond, ids, dur;
    if (!std::getline(ls, e.id, '\t') || !std::getline(ls, cond, '\t') ||
        !std::getline(ls, ids, '\t') || !std::getline(ls, dur, '\t') ||
        !std::getline(ls, e.path))
      throw DataError("malformed manifest line: " + line);
    e.condition = condition_from_name(cond);
    std::istringstream is(ids);
    std::string tok;
    while (std::getline(is, tok, ',')) e.speaker_ids.push_back(std::stoi(tok));
    e.duration_s = std::stod(dur);
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_trial_list(const std::vector<TrialListEntry>& trials,
                             const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write trial list " + path);
  for (const auto& t : trials)
    out << t.enroll_utt_id << '\t' << t.test_utt_id << '\t'
        << (t.target ? "target" : "nontarget") << '\n';
}

inline std::vector<TrialListEntry> read_trial_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trial list " + path);
  std::vector<TrialListEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TrialListEntry t;
    std::string label;
    if (!std::getline(ls, t.enroll_utt_id, '\t') ||
        !std::getline(ls, t.test_utt_id, '\t') || !std::getline(ls, label))
      throw DataError("malformed trial line: " + line);
    if (label != "target" && label != "nontarget")
      throw DataError("bad trial label: " + label);
    t.target = label == "target";
    out.push_back(std::move(t));
  }
  return out;
}

inline FbankMatrix extract_fbank(const Utterance& u, const FbankConfig& cfg) {
  return extract_fbank(u.samples, cfg);
}

}  // namespace ns

#endif  // NS_SYNTH_HPP
