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

#include "ns/checkpoint.hpp"
#include "ns/model.hpp"

using ns::FbankMatrix;
using ns::ModelConfig;
using ns::Rng;
using ns::Tensor;

namespace {

FbankMatrix random_fbank(int t, int f, Rng& rng) {
  FbankMatrix fb;
  fb.n_frames = t;
  fb.n_mels = f;
  fb.values.resize(size_t(t) * f);
  for (auto& v : fb.values) v = float(rng.uniform(-2.0, 2.0));
  return fb;
}

template <typename T>
Tensor<T> random_embeddings(int m, int e, Rng& rng) {
  std::vector<T> data(size_t(m) * e);
  for (auto& v : data) v = T(rng.uniform(-1.0, 1.0));
  // Unit-normalize rows like real enrollment embeddings.
  for (int i = 0; i < m; ++i) {
    double norm = 0;
    for (int j = 0; j < e; ++j) norm += double(data[size_t(i) * e + j]) * data[size_t(i) * e + j];
    norm = std::sqrt(norm);
    for (int j = 0; j < e; ++j) data[size_t(i) * e + j] = T(data[size_t(i) * e + j] / norm);
  }
  return Tensor<T>::from_data({m, e}, std::move(data));
}

ModelConfig small_cfg(int layers = 1) {
  ModelConfig cfg;
  cfg.n_mels = 8;
  cfg.embed_dim = 16;
  cfg.model_dim = 16;
  cfg.ff_dim = 32;
  cfg.heads = 4;
  cfg.layers = layers;
  cfg.conv_channels = 12;
  return cfg;
}

template <typename T>
ns::NsModel<T> make_model(const ModelConfig& cfg, uint64_t seed) {
  auto extractor = ns::init_extractor<T>(cfg, seed);
  ns::freeze_extractor(extractor);
  return ns::init_ns_model<T>(cfg, seed, std::move(extractor));
}

// Max |grouped - singleton| over all branches of one random model draw.
template <typename T>
double branch_independence_dev(uint64_t seed, int m, int layers) {
  Rng rng(seed);
  ModelConfig cfg = small_cfg(layers);
  auto model = make_model<T>(cfg, seed);
  auto fb = random_fbank(22, cfg.n_mels, rng);
  auto enrolls = random_embeddings<T>(m, cfg.embed_dim, rng);
  auto feats = ns::encode_test_frames(model, fb);
  auto grouped = ns::score_forward(model, enrolls, feats);

  double dev = 0.0;
  for (int j = 0; j < m; ++j) {
    std::vector<T> one(enrolls.values().begin() + size_t(j) * cfg.embed_dim,
                       enrolls.values().begin() + size_t(j + 1) * cfg.embed_dim);
    auto single = ns::score_forward(
        model, Tensor<T>::from_data({1, cfg.embed_dim}, std::move(one)), feats);
    dev = std::max(dev, std::abs(double(grouped.values()[size_t(j)]) -
                                 double(single.values()[0])));
  }
  return dev;
}

}  // namespace

TEST_CASE("attention mask enumerations", "[model]") {
  auto m1 = ns::build_attention_mask(1, 2, 2);
  REQUIRE(m1.size == 3);
  const bool expect1[3][3] = {{1, 1, 1}, {0, 1, 1}, {0, 1, 1}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(m1.allowed(i, j) == expect1[i][j]);

  auto m3 = ns::build_attention_mask(3, 2, 2);
  const bool row1[5] = {0, 1, 0, 1, 1};
  for (int j = 0; j < 5; ++j) CHECK(m3.allowed(1, j) == row1[j]);

  // Padded frame: masked as a key for every other row; key_padding set.
  auto mp = ns::build_attention_mask(2, 1, 2);
  REQUIRE(mp.size == 4);
  for (int i = 0; i < 4; ++i)
    if (i != 3) CHECK_FALSE(mp.allowed(i, 3));
  CHECK(mp.allowed(3, 3));
  CHECK(mp.key_padding[3] == 1);
  CHECK(mp.key_padding[2] == 0);

  // Single-trial variant: the test frames may attend the enrollment token.
  auto mv = ns::build_attention_mask(1, 2, 2, true);
  CHECK(mv.allowed(1, 0));
  CHECK(mv.allowed(2, 0));
  // ...but never with M > 1, where it would break branch independence.
  auto mv2 = ns::build_attention_mask(2, 2, 2, true);
  CHECK_FALSE(mv2.allowed(2, 0));
}

TEST_CASE("positional encoding structure", "[model]") {
  const int d = 8;
  auto type = Tensor<double>::from_data(
      {2, d}, {0.3, -0.1, 0.2, 0.5, -0.4, 0.1, 0.0, 0.7,
               -0.2, 0.4, 0.1, -0.3, 0.6, -0.5, 0.2, 0.1});
  auto pe = ns::positional_encoding(3, 4, d, type);
  REQUIRE(pe.rows() == 7);

  for (int i = 1; i < 3; ++i)
    for (int j = 0; j < d; ++j) CHECK(pe.at(i, j) == pe.at(0, j));

  // enroll row - first test row = (PE(0) - PE(1)) + (type0 - type1)
  auto sin0 = ns::sinusoidal_pe<double>({0}, d);
  auto sin1 = ns::sinusoidal_pe<double>({1}, d);
  for (int j = 0; j < d; ++j) {
    const double expect = (sin0.at(0, j) - sin1.at(0, j)) + (type.at(0, j) - type.at(1, j));
    CHECK(pe.at(0, j) - pe.at(3, j) == Approx(expect).margin(1e-12));
  }

  auto zero_type = Tensor<double>::zeros({2, d});
  auto pe0 = ns::positional_encoding(2, 1, d, zero_type);
  for (int i = 0; i < 4; ++i) {
    CHECK(pe0.at(0, 2 * i) == 0.0);
    CHECK(pe0.at(0, 2 * i + 1) == 1.0);
  }

  // w/o sinusoidal term the rows are just the type embeddings.
  auto pe_nope = ns::positional_encoding(1, 2, d, type, false);
  for (int j = 0; j < d; ++j) {
    CHECK(pe_nope.at(0, j) == type.at(0, j));
    CHECK(pe_nope.at(1, j) == type.at(1, j));
    CHECK(pe_nope.at(2, j) == type.at(1, j));
  }
}

TEST_CASE("encoder frame count follows ceil(T/4)", "[model]") {
  CHECK(ns::encoder_frames(298) == 75);
  CHECK(ns::encoder_frames(4) == 1);
  CHECK(ns::encoder_frames(5) == 2);

  Rng rng(3);
  ModelConfig cfg = small_cfg();
  auto model = make_model<double>(cfg, 3);
  auto fb = random_fbank(298, cfg.n_mels, rng);
  auto feats = ns::encode_test_frames(model, fb);
  CHECK(feats.features.rows() == 75);
  CHECK(feats.valid_len == 75);
  CHECK(feats.features.cols() == cfg.model_dim);
}

TEST_CASE("zero input encodes to bias-only rows", "[model]") {
  ModelConfig cfg = small_cfg();
  auto model = make_model<double>(cfg, 5);
  FbankMatrix fb;
  fb.n_frames = 40;
  fb.n_mels = cfg.n_mels;
  fb.values.assign(size_t(40) * cfg.n_mels, 0.0f);
  auto feats = ns::encode_test_frames(model, fb);
  // Interior rows (full conv windows) are identical; edge rows only see the
  // implicit zero padding.
  for (int i = 2; i + 2 < feats.features.rows(); ++i)
    for (int j = 0; j < feats.features.cols(); ++j)
      CHECK(feats.features.at(i, j) == feats.features.at(2, j));
}

TEST_CASE("gradients flow through the test encoder", "[model][grad]") {
  Rng rng(17);
  ModelConfig cfg = small_cfg();
  auto model = make_model<double>(cfg, 17);
  auto fb = random_fbank(19, cfg.n_mels, rng);
  std::vector<double> probe_data(size_t(ns::encoder_frames(19)) * cfg.model_dim);
  for (auto& v : probe_data) v = rng.uniform(-1.0, 1.0);
  auto probe = Tensor<double>::from_data(
      {ns::encoder_frames(19), cfg.model_dim}, std::move(probe_data));
  auto f = [&]() {
    return ns::sum_all(ns::mul(ns::encode_test_frames(model, fb).features, probe));
  };
  std::vector<ns::Parameter<double>> params = {
      {"trunk.w1", model.test_trunk.w1}, {"trunk.b1", model.test_trunk.b1},
      {"trunk.w2", model.test_trunk.w2}, {"trunk.b2", model.test_trunk.b2},
      {"proj.w", model.frame_proj_w},    {"proj.b", model.frame_proj_b}};
  auto report = ns::grad_check<double>(f, params, 60, 23, 1e-4);
  CHECK(report.ok(1e-4));
}

TEST_CASE("enrollment embedding is unit norm and deterministic", "[model]") {
  Rng rng(29);
  ModelConfig cfg = small_cfg();
  auto ex = ns::init_extractor<double>(cfg, 7);
  auto fb = random_fbank(33, cfg.n_mels, rng);
  CHECK_THROWS_AS(ns::embed_enrollment(ex, fb), ns::DataError);

  ns::freeze_extractor(ex);
  auto a = ns::embed_enrollment(ex, fb);
  auto b = ns::embed_enrollment(ex, fb);
  CHECK(a == b);
  double norm = 0;
  for (double v : a) norm += v * v;
  CHECK(std::sqrt(norm) == Approx(1.0).margin(1e-6));
}

TEST_CASE("branch independence: M branches equal M singleton passes", "[model][property]") {
  // f64: structural property, bit-exact summation order.
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
    CHECK(branch_independence_dev<double>(seed, 8, 1) < 1e-10);
  }
  CHECK(branch_independence_dev<double>(5, 33, 2) < 1e-10);
  CHECK(branch_independence_dev<double>(6, 64, 4) < 1e-10);
  // f32 at its stated tolerance.
  for (uint64_t seed : {7ull, 8ull}) {
    CHECK(branch_independence_dev<float>(seed, 8, 1) < 1e-5);
  }
}

TEST_CASE("permuting enrollments permutes scores identically", "[model]") {
  Rng rng(31);
  ModelConfig cfg = small_cfg(2);
  auto model = make_model<double>(cfg, 31);
  auto fb = random_fbank(25, cfg.n_mels, rng);
  auto feats = ns::encode_test_frames(model, fb);
  const int m = 6;
  auto enrolls = random_embeddings<double>(m, cfg.embed_dim, rng);
  auto base = ns::score_forward(model, enrolls, feats);

  std::vector<int> perm = {4, 0, 5, 2, 1, 3};
  std::vector<double> permuted(size_t(m) * cfg.embed_dim);
  for (int i = 0; i < m; ++i)
    std::copy(enrolls.values().begin() + size_t(perm[size_t(i)]) * cfg.embed_dim,
              enrolls.values().begin() + size_t(perm[size_t(i)] + 1) * cfg.embed_dim,
              permuted.begin() + size_t(i) * cfg.embed_dim);
  auto shuffled = ns::score_forward(
      model, Tensor<double>::from_data({m, cfg.embed_dim}, std::move(permuted)), feats);
  for (int i = 0; i < m; ++i)
    CHECK(shuffled.values()[size_t(i)] == base.values()[size_t(perm[size_t(i)])]);
}

TEST_CASE("scores are finite and inside (0,1) for an untrained model", "[model]") {
  Rng rng(37);
  ModelConfig cfg = small_cfg();
  auto model = make_model<float>(cfg, 37);
  auto fb = random_fbank(30, cfg.n_mels, rng);
  auto scores = ns::score_forward(model, random_embeddings<float>(5, cfg.embed_dim, rng),
                                  ns::encode_test_frames(model, fb));
  for (float s : scores.values()) {
    CHECK(std::isfinite(s));
    CHECK(s > 0.0f);
    CHECK(s < 1.0f);
  }
}

TEST_CASE("appending padded frames never changes a score", "[model]") {
  Rng rng(41);
  ModelConfig cfg = small_cfg(2);
  auto model = make_model<double>(cfg, 41);
  auto fb = random_fbank(26, cfg.n_mels, rng);
  auto enrolls = random_embeddings<double>(4, cfg.embed_dim, rng);

  auto feats = ns::encode_test_frames(model, fb);
  auto plain = ns::score_forward(model, enrolls, feats);
  auto padded = ns::score_forward(model, enrolls,
                                  ns::pad_frame_features(feats, feats.features.rows() + 9));
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(plain.values()[size_t(i)] - padded.values()[size_t(i)]) <= 1e-6);
}

TEST_CASE("grouped trial scoring equals one-at-a-time scoring", "[model]") {
  Rng rng(43);
  ModelConfig cfg = small_cfg();
  auto model = make_model<float>(cfg, 43);

  std::map<std::string, FbankMatrix> fbanks;
  std::map<std::string, std::vector<float>> embeddings;
  for (int t = 0; t < 3; ++t)
    fbanks["test" + std::to_string(t)] = random_fbank(20 + 3 * t, cfg.n_mels, rng);
  for (int e = 0; e < 5; ++e) {
    auto emb = random_embeddings<float>(1, cfg.embed_dim, rng);
    embeddings["enroll" + std::to_string(e)] = emb.values();
  }

  std::vector<ns::TrialRef> trials;
  Rng pick(99);
  for (int i = 0; i < 12; ++i)
    trials.push_back({"enroll" + std::to_string(pick.uniform_int(5)),
                      "test" + std::to_string(pick.uniform_int(3)), pick.coin()});

  auto fbank_of = [&](const std::string& id) -> const FbankMatrix& { return fbanks.at(id); };
  auto emb_of = [&](const std::string& id) -> const std::vector<float>& {
    return embeddings.at(id);
  };
  auto grouped = ns::score_trials<float>(model, trials, fbank_of, emb_of);
  REQUIRE(grouped.size() == trials.size());

  for (size_t i = 0; i < trials.size(); ++i) {
    CHECK(grouped[i].enroll_utt_id == trials[i].enroll_utt_id);
    CHECK(grouped[i].test_utt_id == trials[i].test_utt_id);
    std::vector<ns::TrialRef> lone = {trials[i]};
    auto single = ns::score_trials<float>(model, lone, fbank_of, emb_of);
    CHECK(std::abs(grouped[i].score - single[0].score) < 1e-5);
  }

  auto again = ns::score_trials<float>(model, trials, fbank_of, emb_of);
  for (size_t i = 0; i < trials.size(); ++i) CHECK(again[i].score == grouped[i].score);
}

TEST_CASE("frozen extractor receives no gradient", "[model]") {
  Rng rng(47);
  ModelConfig cfg = small_cfg();
  auto model = make_model<double>(cfg, 47);
  auto fb = random_fbank(21, cfg.n_mels, rng);
  auto before = model.extractor.trunk.w1.values();

  auto scores = ns::score_forward(model, random_embeddings<double>(3, cfg.embed_dim, rng),
                                  ns::encode_test_frames(model, fb));
  ns::sum_all(scores).backward();
  CHECK(model.extractor.trunk.w1.node()->grad.empty());

  auto params = ns::ns_params(model);
  auto trainable = params.trainable();
  for (const auto& p : trainable) CHECK(p.name.rfind("extractor.", 0) != 0);
  ns::AdamState<double> state;
  ns::adam_step<double>(trainable, state, 0.01);
  CHECK(model.extractor.trunk.w1.values() == before);
}

TEST_CASE("model parameters round trip through a checkpoint", "[model]") {
  ModelConfig cfg = small_cfg(2);
  auto a = make_model<float>(cfg, 101);
  auto b = make_model<float>(cfg, 202);
  auto pa = ns::ns_params(a);
  auto pb = ns::ns_params(b);
  REQUIRE(pa.items().size() == pb.items().size());

  ns::load_into(pb, ns::to_checkpoint(pa));
  for (size_t i = 0; i < pa.items().size(); ++i) {
    CHECK(pa.items()[i].name == pb.items()[i].name);
    CHECK(pa.items()[i].tensor.values() == pb.items()[i].tensor.values());
  }
}

TEST_CASE("shared-encoder ablation aliases the extractor trunk", "[model]") {
  ModelConfig cfg = small_cfg();
  cfg.shared_encoder = true;
  auto model = make_model<float>(cfg, 11);
  CHECK(model.test_trunk.w1.node() == model.extractor.trunk.w1.node());
  auto params = ns::ns_params(model);
  CHECK(params.find("ns.test_trunk.conv1.w") == nullptr);
}
