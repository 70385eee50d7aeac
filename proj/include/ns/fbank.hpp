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
// Log-mel filterbank front end: Hann-windowed power STFT, triangular HTK-mel
// filters, log energies with per-utterance mean normalization over time.

#ifndef NS_FBANK_HPP
#define NS_FBANK_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "ns/common.hpp"

namespace ns {

struct RealMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;  // row-major

  double& at(int r, int c) { return v[size_t(r) * cols + c]; }
  double at(int r, int c) const { return v[size_t(r) * cols + c]; }
};

struct FbankConfig {
  int sample_rate = 16000;
  int n_mels = 24;       // 80 at full scale, 24 for desk runs
  int n_fft = 512;
  double frame_len_ms = 25.0;
  double frame_shift_ms = 10.0;
  double fmin_hz = 50.0;
  double fmax_hz = 4000.0;

  int frame_len() const { return int(frame_len_ms * sample_rate / 1000.0); }
  int frame_shift() const { return int(frame_shift_ms * sample_rate / 1000.0); }
};

// T x F log-mel energies. T = floor((n_samples - frame_len)/frame_shift) + 1.
struct FbankMatrix {
  int n_frames = 0;
  int n_mels = 0;
  std::vector<float> values;  // row-major, frames x mels

  float at(int t, int f) const { return values[size_t(t) * n_mels + f]; }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace detail {

// In-place iterative radix-2 FFT; n must be a power of two.
inline void fft(std::vector<double>& re, std::vector<double>& im) {
  const size_t n = re.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * 3.14159265358979323846 / double(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t j = 0; j < len / 2; ++j) {
        const double ur = re[i + j], ui = im[i + j];
        const double vr = re[i + j + len / 2] * cr - im[i + j + len / 2] * ci;
        const double vi = re[i + j + len / 2] * ci + im[i + j + len / 2] * cr;
        re[i + j] = ur + vr;
        im[i + j] = ui + vi;
        re[i + j + len / 2] = ur - vr;
        im[i + j + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace detail

inline int stft_frame_count(size_t n_samples, int frame_len, int frame_shift) {
  if (n_samples < size_t(frame_len)) return 0;
  return int((n_samples - size_t(frame_len)) / size_t(frame_shift)) + 1;
}

// Per-frame Hann-windowed power spectrum (magnitude squared), one-sided:
// T x (n_fft/2 + 1).
inline RealMatrix stft_power(const std::vector<float>& samples, int frame_len,
                             int frame_shift, int n_fft) {
  if (!detail::is_pow2(n_fft) || n_fft < frame_len)
    throw DataError("stft_power: n_fft must be a power of two >= frame_len");
  const int t = stft_frame_count(samples.size(), frame_len, frame_shift);
  if (t < 1) throw DataError("stft_power: signal shorter than one frame");
  const int n_bins = n_fft / 2 + 1;

  std::vector<double> window(static_cast<size_t>(frame_len));
  for (int i = 0; i < frame_len; ++i)
    window[size_t(i)] =
        0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / (frame_len - 1));

  RealMatrix out{t, n_bins, std::vector<double>(size_t(t) * n_bins)};
  std::vector<double> re(static_cast<size_t>(n_fft)), im(static_cast<size_t>(n_fft));
  for (int f = 0; f < t; ++f) {
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    const size_t off = size_t(f) * frame_shift;
    for (int i = 0; i < frame_len; ++i)
      re[size_t(i)] = double(samples[off + size_t(i)]) * window[size_t(i)];
    detail::fft(re, im);
    for (int k = 0; k < n_bins; ++k)
      out.at(f, k) = re[size_t(k)] * re[size_t(k)] + im[size_t(k)] * im[size_t(k)];
  }
  return out;
}

// Triangular mel filters on the HTK scale; (n_fft/2 + 1) x n_mels.
inline RealMatrix mel_filterbank(int n_fft, int n_mels, int sample_rate,
                                 double fmin_hz = 50.0, double fmax_hz = 4000.0) {
  const int n_bins = n_fft / 2 + 1;
  if (n_mels < 1 || n_mels >= n_fft / 2)
    throw DataError("mel_filterbank: need 1 <= n_mels < n_fft/2");
  if (fmax_hz > sample_rate / 2.0 || fmin_hz < 0.0 || fmin_hz >= fmax_hz)
    throw DataError("mel_filterbank: bad band edges");
  const double mel_lo = hz_to_mel(fmin_hz), mel_hi = hz_to_mel(fmax_hz);
  std::vector<double> edges(size_t(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[size_t(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));

  RealMatrix fb{n_bins, n_mels, std::vector<double>(size_t(n_bins) * n_mels, 0.0)};
  for (int k = 0; k < n_bins; ++k) {
    const double f = double(k) * sample_rate / n_fft;
    for (int m = 0; m < n_mels; ++m) {
      const double lo = edges[size_t(m)], mid = edges[size_t(m) + 1],
                   hi = edges[size_t(m) + 2];
      if (f > lo && f < mid)
        fb.at(k, m) = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        fb.at(k, m) = (hi - f) / (hi - mid);
    }
  }
  return fb;
}

// log(power . melbank + 1e-10), no mean normalization.
inline FbankMatrix extract_fbank_raw(const std::vector<float>& samples,
                                     const FbankConfig& cfg) {
  const RealMatrix power =
      stft_power(samples, cfg.frame_len(), cfg.frame_shift(), cfg.n_fft);
  const RealMatrix fb = mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate,
                                       cfg.fmin_hz, cfg.fmax_hz);
  FbankMatrix out;
  out.n_frames = power.rows;
  out.n_mels = cfg.n_mels;
  out.values.resize(size_t(power.rows) * cfg.n_mels);
  for (int t = 0; t < power.rows; ++t)
    for (int m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (int k = 0; k < power.cols; ++k) e += power.at(t, k) * fb.at(k, m);
      out.values[size_t(t) * cfg.n_mels + m] = float(std::log(e + 1e-10));
    }
  return out;
}

// Full front end: log-mel energies with per-utterance mean normalization
// over time.
inline FbankMatrix extract_fbank(const std::vector<float>& samples,
                                 const FbankConfig& cfg) {
  FbankMatrix out = extract_fbank_raw(samples, cfg);
  for (int m = 0; m < out.n_mels; ++m) {
    double mean = 0.0;
    for (int t = 0; t < out.n_frames; ++t) mean += out.at(t, m);
    mean /= out.n_frames;
    for (int t = 0; t < out.n_frames; ++t)
      out.values[size_t(t) * out.n_mels + m] -= float(mean);
  }
  return out;
}

// Feature dump: header (T, F as 32-bit LE unsigned) + row-major f32 values.
inline void write_fbank(const FbankMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  write_u32_le(out, uint32_t(m.n_frames));
  write_u32_le(out, uint32_t(m.n_mels));
  write_f32_le(out, m.values.data(), m.values.size());
}

}  // namespace ns

#endif  // NS_FBANK_HPP
