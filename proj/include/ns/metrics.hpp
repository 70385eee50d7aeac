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
// Detection metrics. Operating points sweep every distinct score as a
// threshold (accept iff score >= threshold) plus the two trivial endpoints;
// EER is linearly interpolated between the adjacent points around the
// p_miss = p_fa crossing.

#ifndef NS_METRICS_HPP
#define NS_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ns/common.hpp"

namespace ns {

struct DetPoint {
  double threshold = 0.0;
  double p_miss = 0.0;
  double p_fa = 0.0;
};

struct DetMetrics {
  double eer = 0.0;
  double min_dcf = 0.0;
  double threshold_at_eer = 0.0;
  int n_target = 0;
  int n_nontarget = 0;
  std::vector<DetPoint> curve;  // sorted by threshold
};

// All operating points, sorted by rising threshold. p_miss is nondecreasing
// and p_fa nonincreasing along the list.
inline std::vector<DetPoint> det_curve(std::vector<double> targets,
                                       std::vector<double> nontargets) {
  if (targets.empty() || nontargets.empty())
    throw DataError("det_curve: empty score list");
  std::sort(targets.begin(), targets.end());
  std::sort(nontargets.begin(), nontargets.end());

  std::vector<double> thresholds;
  thresholds.reserve(targets.size() + nontargets.size() + 2);
  thresholds.push_back(std::min(targets.front(), nontargets.front()) - 1.0);
  {
    std::vector<double> pooled(targets);
    pooled.insert(pooled.end(), nontargets.begin(), nontargets.end());
    std::sort(pooled.begin(), pooled.end());
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
    thresholds.insert(thresholds.end(), pooled.begin(), pooled.end());
  }
  thresholds.push_back(std::max(targets.back(), nontargets.back()) + 1.0);

  std::vector<DetPoint> points;
  points.reserve(thresholds.size());
  size_t miss_idx = 0;  // targets strictly below the threshold
  size_t fa_idx = 0;    // nontargets strictly below the threshold
  for (double th : thresholds) {
    while (miss_idx < targets.size() && targets[miss_idx] < th) ++miss_idx;
    while (fa_idx < nontargets.size() && nontargets[fa_idx] < th) ++fa_idx;
    DetPoint p;
    p.threshold = th;
    p.p_miss = double(miss_idx) / double(targets.size());
    p.p_fa = double(nontargets.size() - fa_idx) / double(nontargets.size());
    points.push_back(p);
  }
  return points;
}

namespace detail {

// Shared interpolation rule: crossing of (p_miss - p_fa) between two
// adjacent operating points.
inline void eer_from_points(const std::vector<DetPoint>& pts, double* eer,
                            double* threshold) {
  for (size_t k = 0; k + 1 < pts.size(); ++k) {
    const double d0 = pts[k].p_miss - pts[k].p_fa;
    const double d1 = pts[k + 1].p_miss - pts[k + 1].p_fa;
    if (d0 <= 0.0 && d1 >= 0.0) {
      const double alpha = (d1 == d0) ? 0.0 : d0 / (d0 - d1);
      *eer = pts[k].p_miss + alpha * (pts[k + 1].p_miss - pts[k].p_miss);
      *threshold = pts[k].threshold + alpha * (pts[k + 1].threshold - pts[k].threshold);
      return;
    }
  }
  throw NumericalError("eer: no crossing found");
}

}  // namespace detail

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

inline EerResult compute_eer(const std::vector<double>& targets,
                             const std::vector<double>& nontargets) {
  const auto pts = det_curve(targets, nontargets);
  EerResult r;
  detail::eer_from_points(pts, &r.eer, &r.threshold);
  return r;
}

// DCF(th) = c_miss*p_tar*p_miss + c_fa*(1-p_tar)*p_fa, minimized over all
// operating points and normalized by the best trivial system's cost
// min(c_miss*p_tar, c_fa*(1-p_tar)).
inline double compute_mindcf(const std::vector<double>& targets,
                             const std::vector<double>& nontargets,
                             double p_tar = 0.01, double c_miss = 1.0,
                             double c_fa = 1.0) {
  const auto pts = det_curve(targets, nontargets);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pts)
    best = std::min(best, c_miss * p_tar * p.p_miss + c_fa * (1.0 - p_tar) * p.p_fa);
  return best / std::min(c_miss * p_tar, c_fa * (1.0 - p_tar));
}

inline DetMetrics compute_metrics(const std::vector<double>& targets,
                                  const std::vector<double>& nontargets,
                                  double p_tar = 0.01, double c_miss = 1.0,
                                  double c_fa = 1.0) {
  DetMetrics m;
  m.curve = det_curve(targets, nontargets);
  detail::eer_from_points(m.curve, &m.eer, &m.threshold_at_eer);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : m.curve)
    best = std::min(best, c_miss * p_tar * p.p_miss + c_fa * (1.0 - p_tar) * p.p_fa);
  m.min_dcf = best / std::min(c_miss * p_tar, c_fa * (1.0 - p_tar));
  m.n_target = int(targets.size());
  m.n_nontarget = int(nontargets.size());
  return m;
}

template <typename V>
double cosine_score(const V& a, const V& b) {
  if (a.size() != b.size()) throw DataError("cosine_score: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  if (na <= 0.0 || nb <= 0.0) throw DataError("cosine_score: zero vector");
  return dot / std::sqrt(na * nb);
}

// DET curve CSV: `threshold,p_miss,p_fa` per line.
inline void write_det_csv(const std::vector<DetPoint>& pts, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "threshold,p_miss,p_fa\n";
  char buf[96];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof(buf), "%.9f,%.9f,%.9f\n", p.threshold, p.p_miss, p.p_fa);
    out << buf;
  }
}

}  // namespace ns

#endif  // NS_METRICS_HPP
