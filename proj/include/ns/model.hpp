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
// The scoring model: a frozen enrollment embedding extractor, a strided
// convolutional test-frame encoder, and a masked Transformer that reads one
// latent per enrollment branch and maps it through an MLP head to a
// verification posterior. Enrollment branches are kept independent by the
// attention mask, so scoring M enrollments in one pass equals M separate
// single-enrollment passes.

#ifndef NS_MODEL_HPP
#define NS_MODEL_HPP

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ns/fbank.hpp"
#include "ns/tensor.hpp"

namespace ns {

struct ModelConfig {
  int n_mels = 24;        // F
  int embed_dim = 64;     // E; 256 at full scale
  int model_dim = 64;     // D; 256 at full scale
  int ff_dim = 128;       // 512 at full scale
  int heads = 4;
  int layers = 1;
  int conv_channels = 32;  // trunk output width, the flattened (F x C) stand-in
  bool shared_encoder = false;
  bool use_sinusoidal_pe = true;
  bool test_attends_enroll = false;  // only honored for M = 1
};

// Two stride-2 convolutions over time; total temporal stride 4. Output
// length is ceil(T / stride) with a fixed floor(kernel/2) left pad, so
// appending zero frames never changes earlier output rows.
template <typename T>
struct ConvTrunk {
  Tensor<T> w1, b1;  // [5*F, C], [C]
  Tensor<T> w2, b2;  // [3*C, C], [C]
};

inline int conv_out_len(int t_in, int stride) { return (t_in + stride - 1) / stride; }

// Encoder frames produced for a test utterance of t_in feature frames.
inline int encoder_frames(int t_in) {
  return conv_out_len(conv_out_len(t_in, 2), 2);
}

template <typename T>
Tensor<T> trunk_forward(const ConvTrunk<T>& trunk, const Tensor<T>& x) {
  const int t1 = conv_out_len(x.rows(), 2);
  Tensor<T> h = relu(linear(unfold1d(x, 5, 2, 2, t1), trunk.w1, trunk.b1));
  const int t2 = conv_out_len(t1, 2);
  return relu(linear(unfold1d(h, 3, 2, 1, t2), trunk.w2, trunk.b2));
}

template <typename T>
struct EnrollExtractor {
  ConvTrunk<T> trunk;
  Tensor<T> emb_w, emb_b;  // [2C, E], [E]
  bool trained = false;
};

template <typename T>
struct EncoderLayer {
  MhaParams<T> attn;
  Tensor<T> ln1_g, ln1_b;
  FfnParams<T> ffn;
  Tensor<T> ln2_g, ln2_b;
};

template <typename T>
struct NsModel {
  ModelConfig cfg;
  EnrollExtractor<T> extractor;
  ConvTrunk<T> test_trunk;  // aliases extractor.trunk when shared_encoder
  Tensor<T> frame_proj_w, frame_proj_b;    // [C, D], [D]
  Tensor<T> enroll_proj_w, enroll_proj_b;  // [E, D], [D]
  Tensor<T> input_ln_g, input_ln_b;        // [D]; evens out enroll/frame row scales
  Tensor<T> type_embedding;                // [2, D]
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> mlp_w1, mlp_b1;  // [D, D]
  Tensor<T> mlp_w2, mlp_b2;  // [D, D/2]
  Tensor<T> mlp_w3, mlp_b3;  // [D/2, 1]
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> zeros_param(std::vector<int> shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones_param(std::vector<int> shape) {
  auto t = Tensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.values()) v = T(1);
  return t;
}

template <typename T>
ConvTrunk<T> init_trunk(const ModelConfig& cfg, uint64_t seed, const std::string& prefix) {
  ConvTrunk<T> t;
  const int f = cfg.n_mels, c = cfg.conv_channels;
  t.w1 = init_uniform<T>({5 * f, c}, 5 * f, seed, prefix + ".conv1.w");
  t.b1 = zeros_param<T>({c});
  t.w2 = init_uniform<T>({3 * c, c}, 3 * c, seed, prefix + ".conv2.w");
  t.b2 = zeros_param<T>({c});
  return t;
}

template <typename T>
MhaParams<T> init_mha(int d, uint64_t seed, const std::string& prefix) {
  MhaParams<T> p;
  p.wq = init_uniform<T>({d, d}, d, seed, prefix + ".wq");
  // Keys start tied to queries so q.k begins as a positive-semidefinite
  // similarity; enrollment tokens then attend frames resembling them from
  // the first step.
  p.wk = Tensor<T>::from_data({d, d}, p.wq.values(), true);
  p.wv = init_uniform<T>({d, d}, d, seed, prefix + ".wv");
  p.wo = init_uniform<T>({d, d}, d, seed, prefix + ".wo");
  p.bq = zeros_param<T>({d});
  p.bk = zeros_param<T>({d});
  p.bv = zeros_param<T>({d});
  p.bo = zeros_param<T>({d});
  return p;
}

}  // namespace detail

template <typename T>
EnrollExtractor<T> init_extractor(const ModelConfig& cfg, uint64_t seed) {
  EnrollExtractor<T> e;
  e.trunk = detail::init_trunk<T>(cfg, seed, "extractor");
  e.emb_w = init_uniform<T>({2 * cfg.conv_channels, cfg.embed_dim},
                            2 * cfg.conv_channels, seed, "extractor.emb.w");
  e.emb_b = detail::zeros_param<T>({cfg.embed_dim});
  return e;
}

namespace detail {

// Trainable deep copy: the test feature extractor starts from the same
// weights that produce the enrollment embeddings.
template <typename T>
ConvTrunk<T> clone_trunk(const ConvTrunk<T>& src) {
  ConvTrunk<T> t;
  t.w1 = Tensor<T>::from_data(src.w1.shape(), src.w1.values(), true);
  t.b1 = Tensor<T>::from_data(src.b1.shape(), src.b1.values(), true);
  t.w2 = Tensor<T>::from_data(src.w2.shape(), src.w2.values(), true);
  t.b2 = Tensor<T>::from_data(src.b2.shape(), src.b2.values(), true);
  return t;
}

}  // namespace detail

template <typename T>
NsModel<T> init_ns_model(const ModelConfig& cfg, uint64_t seed,
                         EnrollExtractor<T> extractor) {
  NsModel<T> m;
  m.cfg = cfg;
  m.extractor = std::move(extractor);
  m.test_trunk = cfg.shared_encoder ? m.extractor.trunk
                                    : detail::clone_trunk(m.extractor.trunk);
  const int d = cfg.model_dim;
  // When widths line up, both projections start in the extractor's embedding
  // space (frame_proj from the mean-pooling rows of emb_w, enroll_proj as
  // identity), extending the baseline initialization through the interface.
  if (d == cfg.embed_dim) {
    std::vector<T> wm(size_t(cfg.conv_channels) * d);
    for (int c = 0; c < cfg.conv_channels; ++c)
      for (int k = 0; k < d; ++k)
        wm[size_t(c) * d + k] = m.extractor.emb_w.at(c, k);
    m.frame_proj_w = Tensor<T>::from_data({cfg.conv_channels, d}, std::move(wm), true);
    std::vector<T> eye(size_t(cfg.embed_dim) * d, T(0));
    for (int k = 0; k < d; ++k) eye[size_t(k) * d + k] = T(1);
    m.enroll_proj_w = Tensor<T>::from_data({cfg.embed_dim, d}, std::move(eye), true);
  } else {
    m.frame_proj_w = init_uniform<T>({cfg.conv_channels, d}, cfg.conv_channels, seed,
                                     "ns.frame_proj.w");
    m.enroll_proj_w = init_uniform<T>({cfg.embed_dim, d}, cfg.embed_dim, seed,
                                      "ns.enroll_proj.w");
  }
  m.frame_proj_b = detail::zeros_param<T>({d});
  m.enroll_proj_b = detail::zeros_param<T>({d});
  m.input_ln_g = detail::ones_param<T>({d});
  m.input_ln_b = detail::zeros_param<T>({d});
  m.type_embedding = init_uniform<T>({2, d}, d, seed, "ns.type_embedding");
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string prefix = "ns.enc" + std::to_string(l);
    EncoderLayer<T> layer;
    layer.attn = detail::init_mha<T>(d, seed, prefix + ".attn");
    layer.ln1_g = detail::ones_param<T>({d});
    layer.ln1_b = detail::zeros_param<T>({d});
    layer.ffn.w1 = init_uniform<T>({d, cfg.ff_dim}, d, seed, prefix + ".ffn.w1");
    layer.ffn.b1 = detail::zeros_param<T>({cfg.ff_dim});
    layer.ffn.w2 = init_uniform<T>({cfg.ff_dim, d}, cfg.ff_dim, seed, prefix + ".ffn.w2");
    layer.ffn.b2 = detail::zeros_param<T>({d});
    layer.ln2_g = detail::ones_param<T>({d});
    layer.ln2_b = detail::zeros_param<T>({d});
    m.layers.push_back(std::move(layer));
  }
  m.mlp_w1 = init_uniform<T>({d, d}, d, seed, "ns.mlp.w1");
  m.mlp_b1 = detail::zeros_param<T>({d});
  m.mlp_w2 = init_uniform<T>({d, d / 2}, d, seed, "ns.mlp.w2");
  m.mlp_b2 = detail::zeros_param<T>({d / 2});
  m.mlp_w3 = init_uniform<T>({d / 2, 1}, d / 2, seed, "ns.mlp.w3");
  m.mlp_b3 = detail::zeros_param<T>({1});
  return m;
}

template <typename T>
void register_extractor_params(const EnrollExtractor<T>& e, ParamSet<T>& out) {
  out.add("extractor.conv1.w", e.trunk.w1);
  out.add("extractor.conv1.b", e.trunk.b1);
  out.add("extractor.conv2.w", e.trunk.w2);
  out.add("extractor.conv2.b", e.trunk.b2);
  out.add("extractor.emb.w", e.emb_w);
  out.add("extractor.emb.b", e.emb_b);
}

// Full parameter registry (frozen extractor included, so one checkpoint
// carries everything needed at eval time).
template <typename T>
ParamSet<T> ns_params(const NsModel<T>& m) {
  ParamSet<T> out;
  register_extractor_params(m.extractor, out);
  if (!m.cfg.shared_encoder) {
    out.add("ns.test_trunk.conv1.w", m.test_trunk.w1);
    out.add("ns.test_trunk.conv1.b", m.test_trunk.b1);
    out.add("ns.test_trunk.conv2.w", m.test_trunk.w2);
    out.add("ns.test_trunk.conv2.b", m.test_trunk.b2);
  }
  out.add("ns.frame_proj.w", m.frame_proj_w);
  out.add("ns.frame_proj.b", m.frame_proj_b);
  out.add("ns.enroll_proj.w", m.enroll_proj_w);
  out.add("ns.enroll_proj.b", m.enroll_proj_b);
  out.add("ns.input_ln.g", m.input_ln_g);
  out.add("ns.input_ln.b", m.input_ln_b);
  out.add("ns.type_embedding", m.type_embedding);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const std::string p = "ns.enc" + std::to_string(l);
    const auto& layer = m.layers[l];
    out.add(p + ".attn.wq", layer.attn.wq);
    out.add(p + ".attn.bq", layer.attn.bq);
    out.add(p + ".attn.wk", layer.attn.wk);
    out.add(p + ".attn.bk", layer.attn.bk);
    out.add(p + ".attn.wv", layer.attn.wv);
    out.add(p + ".attn.bv", layer.attn.bv);
    out.add(p + ".attn.wo", layer.attn.wo);
    out.add(p + ".attn.bo", layer.attn.bo);
    out.add(p + ".ln1.g", layer.ln1_g);
    out.add(p + ".ln1.b", layer.ln1_b);
    out.add(p + ".ffn.w1", layer.ffn.w1);
    out.add(p + ".ffn.b1", layer.ffn.b1);
    out.add(p + ".ffn.w2", layer.ffn.w2);
    out.add(p + ".ffn.b2", layer.ffn.b2);
    out.add(p + ".ln2.g", layer.ln2_g);
    out.add(p + ".ln2.b", layer.ln2_b);
  }
  out.add("ns.mlp.w1", m.mlp_w1);
  out.add("ns.mlp.b1", m.mlp_b1);
  out.add("ns.mlp.w2", m.mlp_w2);
  out.add("ns.mlp.b2", m.mlp_b2);
  out.add("ns.mlp.w3", m.mlp_w3);
  out.add("ns.mlp.b3", m.mlp_b3);
  out.sort_by_name();
  return out;
}

template <typename T>
void freeze_extractor(EnrollExtractor<T>& e) {
  e.trunk.w1.set_requires_grad(false);
  e.trunk.b1.set_requires_grad(false);
  e.trunk.w2.set_requires_grad(false);
  e.trunk.b2.set_requires_grad(false);
  e.emb_w.set_requires_grad(false);
  e.emb_b.set_requires_grad(false);
  e.trained = true;
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> fbank_tensor(const FbankMatrix& fb, int pad_to_frames = 0) {
  const int t = std::max(fb.n_frames, pad_to_frames);
  std::vector<T> data(size_t(t) * fb.n_mels, T(0));
  for (size_t i = 0; i < fb.values.size(); ++i) data[i] = T(fb.values[i]);
  return Tensor<T>::from_data({t, fb.n_mels}, std::move(data));
}

// Embedding forward as a graph (used by pretraining); [1, E].
template <typename T>
Tensor<T> extractor_forward(const EnrollExtractor<T>& e, const Tensor<T>& fbank) {
  return linear(mean_std_pool(trunk_forward(e.trunk, fbank)), e.emb_w, e.emb_b);
}

// Unit-norm enrollment embedding from a frozen, pretrained extractor.
template <typename T>
std::vector<T> embed_enrollment(const EnrollExtractor<T>& e, const FbankMatrix& fb) {
  if (!e.trained) throw DataError("embed_enrollment: extractor not pretrained");
  Tensor<T> out = extractor_forward(e, fbank_tensor<T>(fb));
  std::vector<T> v = out.values();
  double norm = 0.0;
  for (T x : v) norm += double(x) * double(x);
  norm = std::sqrt(norm);
  if (norm <= 0.0) throw NumericalError("embed_enrollment: zero embedding");
  for (T& x : v) x = T(double(x) / norm);
  return v;
}

template <typename T>
struct FrameFeatures {
  Tensor<T> features;  // [T_enc_padded, D]
  int valid_len = 0;   // leading rows that correspond to real frames
};

// Frame features for the scoring network: [ceil(T/4), D].
template <typename T>
FrameFeatures<T> encode_test_frames(const NsModel<T>& m, const FbankMatrix& fb) {
  Tensor<T> x = fbank_tensor<T>(fb);
  FrameFeatures<T> out;
  out.valid_len = encoder_frames(fb.n_frames);
  if (out.valid_len < 1) throw DataError("encode_test_frames: input too short");
  out.features = linear(trunk_forward(m.test_trunk, x), m.frame_proj_w, m.frame_proj_b);
  return out;
}

// Pad to a batch-common frame count with exact-zero rows; the attention mask
// hides them as keys, so scores are unchanged by construction.
template <typename T>
FrameFeatures<T> pad_frame_features(const FrameFeatures<T>& f, int t_pad) {
  if (t_pad < f.features.rows()) throw DataError("pad_frame_features: shrinking pad");
  if (t_pad == f.features.rows()) return f;
  FrameFeatures<T> out;
  out.valid_len = f.valid_len;
  out.features = concat_rows<T>(
      {f.features, Tensor<T>::zeros({t_pad - f.features.rows(), f.features.cols()})});
  return out;
}

// Mask layout: rows/cols 0..M-1 are enrollment tokens, M.. are test frames.
// Enrollment branches never see each other; test frames never see enrollment
// tokens (unless the single-trial variant is enabled with M = 1); padded
// test frames are masked as keys everywhere. Diagonals stay allowed so no
// query row is empty.
inline AttentionMask build_attention_mask(int m, int valid_len, int t_pad,
                                          bool test_attends_enroll = false) {
  if (m < 1 || valid_len < 1 || t_pad < valid_len)
    throw DataError("build_attention_mask: bad sizes");
  const int s = m + t_pad;
  AttentionMask mask;
  mask.size = s;
  mask.allow.assign(size_t(s) * s, 0);
  mask.key_padding.assign(size_t(s), 0);
  const bool test_to_enroll = test_attends_enroll && m == 1;
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      bool ok;
      if (i < m && j < m)
        ok = i == j;
      else if (i < m)
        ok = (j - m) < valid_len;
      else if (j < m)
        ok = test_to_enroll;
      else
        ok = (j - m) < valid_len;
      if (i == j) ok = true;
      mask.set(i, j, ok);
    }
  }
  for (int j = m + valid_len; j < s; ++j) mask.key_padding[size_t(j)] = 1;
  return mask;
}

// Position 0 for every enrollment token, positions 1..T for test frames,
// plus the learnable enrollment/test type embeddings.
template <typename T>
Tensor<T> positional_encoding(int m, int t, int d, const Tensor<T>& type_embedding,
                              bool use_sinusoidal = true) {
  Tensor<T> types = concat_rows<T>({tile_row(slice_rows(type_embedding, 0, 1), m),
                                    tile_row(slice_rows(type_embedding, 1, 2), t)});
  if (!use_sinusoidal) return types;
  std::vector<int> positions(size_t(m) + size_t(t), 0);
  for (int i = 0; i < t; ++i) positions[size_t(m) + size_t(i)] = i + 1;
  return add(sinusoidal_pe<T>(positions, d), types);
}

// Scores for M enrollment branches against one test utterance: [M, 1] in
// (0, 1). Branch independence is structural: identical scores for any
// grouping of the same enrollments.
template <typename T>
Tensor<T> score_forward(const NsModel<T>& m, const Tensor<T>& enroll_matrix,
                        const FrameFeatures<T>& test) {
  const int n_enroll = enroll_matrix.rows();
  if (n_enroll < 1) throw DataError("score_forward: M = 0");
  if (enroll_matrix.cols() != m.cfg.embed_dim)
    throw DataError("score_forward: embedding width mismatch");
  const int t_pad = test.features.rows();
  Tensor<T> enr = linear(enroll_matrix, m.enroll_proj_w, m.enroll_proj_b);
  Tensor<T> x = layer_norm(concat_rows<T>({enr, test.features}), m.input_ln_g,
                           m.input_ln_b);
  x = add(x, positional_encoding(n_enroll, t_pad, m.cfg.model_dim, m.type_embedding,
                                 m.cfg.use_sinusoidal_pe));
  const AttentionMask mask = build_attention_mask(n_enroll, test.valid_len, t_pad,
                                                  m.cfg.test_attends_enroll);
  for (const auto& layer : m.layers) {
    x = layer_norm(add(x, masked_mha(x, mask, m.cfg.heads, layer.attn)),
                   layer.ln1_g, layer.ln1_b);
    x = layer_norm(add(x, ffn(x, layer.ffn)), layer.ln2_g, layer.ln2_b);
  }
  Tensor<T> z = slice_rows(x, 0, n_enroll);
  Tensor<T> h = relu(linear(z, m.mlp_w1, m.mlp_b1));
  h = relu(linear(h, m.mlp_w2, m.mlp_b2));
  return sigmoid(linear(h, m.mlp_w3, m.mlp_b3));
}

// ---------------------------------------------------------------------------
// Trial scoring
// ---------------------------------------------------------------------------

struct ScoredTrial {
  std::string enroll_utt_id;
  std::string test_utt_id;
  double score = 0.0;
  bool target = false;
};

struct TrialRef {
  std::string enroll_utt_id;
  std::string test_utt_id;
  bool target = false;
};

// One forward per test utterance with all its enrollments as branches
// (chunked at 64). Scores come back aligned with the input trial order.
template <typename T>
std::vector<ScoredTrial> score_trials(
    const NsModel<T>& model, const std::vector<TrialRef>& trials,
    const std::function<const FbankMatrix&(const std::string&)>& fbank_of,
    const std::function<const std::vector<T>&(const std::string&)>& embedding_of,
    int max_branches = 64) {
  std::vector<ScoredTrial> out(trials.size());
  // Group trial indices by test utterance, preserving first-seen order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < trials.size(); ++i) {
    auto [it, inserted] = groups.try_emplace(trials[i].test_utt_id);
    if (inserted) order.push_back(trials[i].test_utt_id);
    it->second.push_back(i);
  }
  for (const auto& test_id : order) {
    const auto& idx = groups[test_id];
    const FbankMatrix& fb = fbank_of(test_id);
    FrameFeatures<T> feats = encode_test_frames(model, fb);
    for (size_t chunk = 0; chunk < idx.size(); chunk += size_t(max_branches)) {
      const size_t stop = std::min(idx.size(), chunk + size_t(max_branches));
      const int m_branches = int(stop - chunk);
      std::vector<T> emb(size_t(m_branches) * model.cfg.embed_dim);
      for (int j = 0; j < m_branches; ++j) {
        const auto& e = embedding_of(trials[idx[chunk + size_t(j)]].enroll_utt_id);
        std::copy(e.begin(), e.end(), emb.begin() + size_t(j) * model.cfg.embed_dim);
      }
      Tensor<T> scores = score_forward(
          model, Tensor<T>::from_data({m_branches, model.cfg.embed_dim}, std::move(emb)),
          feats);
      for (int j = 0; j < m_branches; ++j) {
        const size_t i = idx[chunk + size_t(j)];
        out[i] = {trials[i].enroll_utt_id, trials[i].test_utt_id,
                  double(scores.values()[size_t(j)]), trials[i].target};
      }
    }
  }
  return out;
}

// Score file: `enroll_utt_id  test_utt_id  score(9 decimals)  label`.
inline void write_score_file(const std::vector<ScoredTrial>& scored,
                             const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write score file " + path);
  char buf[32];
  for (const auto& s : scored) {
    std::snprintf(buf, sizeof(buf), "%.9f", s.score);
    out << s.enroll_utt_id << '\t' << s.test_utt_id << '\t' << buf << '\t'
        << (s.target ? "target" : "nontarget") << '\n';
  }
}

}  // namespace ns

#endif  // NS_MODEL_HPP
