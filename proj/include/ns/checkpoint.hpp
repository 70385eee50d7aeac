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
// Checkpoint format (bit-exact contract for averaging and resume):
//   line   "ns-ckpt v1"
//   per parameter, ordered lexicographically by name:
//     line "<name> <d0> <d1> ..."
//     raw row-major 32-bit little-endian floats (prod(shape) of them)

#ifndef NS_CHECKPOINT_HPP
#define NS_CHECKPOINT_HPP

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ns/common.hpp"
#include "ns/tensor.hpp"

namespace ns {

struct CheckpointEntry {
  std::vector<int> shape;
  std::vector<float> data;
};

// std::map keeps entries in the lexicographic order the format requires.
using Checkpoint = std::map<std::string, CheckpointEntry>;

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << "ns-ckpt v1\n";
  for (const auto& [name, entry] : ckpt) {
    out << name;
    for (int d : entry.shape) out << ' ' << d;
    out << '\n';
    write_f32_le(out, entry.data.data(), entry.data.size());
  }
  if (!out) throw DataError("write failure on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string header;
  std::getline(in, header);
  if (header != "ns-ckpt v1") throw DataError("bad checkpoint header in " + path);
  Checkpoint ckpt;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    CheckpointEntry entry;
    int d;
    size_t len = 1;
    while (ls >> d) {
      entry.shape.push_back(d);
      len *= size_t(d);
    }
    entry.data.resize(len);
    in.read(reinterpret_cast<char*>(entry.data.data()),
            std::streamsize(len * sizeof(float)));
    if (!in) throw DataError("truncated checkpoint " + path);
    ckpt[name] = std::move(entry);
  }
  return ckpt;
}

template <typename T>
Checkpoint to_checkpoint(const ParamSet<T>& params) {
  Checkpoint ckpt;
  for (const auto& p : params.items()) {
    CheckpointEntry entry;
    entry.shape = p.tensor.shape();
    entry.data.reserve(p.tensor.numel());
    for (T v : p.tensor.values()) entry.data.push_back(float(v));
    ckpt[p.name] = std::move(entry);
  }
  return ckpt;
}

template <typename T>
void load_into(ParamSet<T>& params, const Checkpoint& ckpt) {
  for (auto& p : params.items()) {
    auto it = ckpt.find(p.name);
    if (it == ckpt.end()) throw DataError("checkpoint missing parameter " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw DataError("checkpoint shape mismatch for " + p.name);
    auto& vals = p.tensor.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = T(it->second.data[i]);
  }
}

// Coordinatewise arithmetic mean of K checkpoints with identical name sets.
// Accumulation runs in double so averaging K identical checkpoints returns
// them bit-identically.
inline Checkpoint average_weights(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw DataError("average_weights: no checkpoints");
  Checkpoint out = ckpts[0];
  for (auto& [name, entry] : out) {
    std::vector<double> acc(entry.data.begin(), entry.data.end());
    for (size_t k = 1; k < ckpts.size(); ++k) {
      const auto& c = ckpts[k];
      if (c.size() != out.size()) throw DataError("average_weights: name-set mismatch");
      auto it = c.find(name);
      if (it == c.end()) throw DataError("average_weights: name-set mismatch at " + name);
      if (it->second.shape != entry.shape)
        throw DataError("average_weights: shape mismatch at " + name);
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += double(it->second.data[i]);
    }
    const double inv_k = double(ckpts.size());
    for (size_t i = 0; i < acc.size(); ++i)
      entry.data[i] = float(acc[i] / inv_k);
  }
  return out;
}

}  // namespace ns

#endif  // NS_CHECKPOINT_HPP
