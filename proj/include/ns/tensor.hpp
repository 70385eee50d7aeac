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
// Minimal reverse-mode differentiable tensor layer. It provides exactly the
// operations the scoring network needs (dense affine maps, masked softmax
// attention, layer norm, pooling, losses) over row-major 1-D/2-D values,
// templated on float for training speed and double for gradient checks.

#ifndef NS_TENSOR_HPP
#define NS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "ns/common.hpp"

namespace ns {

// (M+T)x(M+T) boolean allow-matrix for the scoring network's self-attention,
// plus the key-padding row marking padded test frames. Diagonals are always
// allowed so no query row is left without a key.
struct AttentionMask {
  int size = 0;
  std::vector<uint8_t> allow;        // row-major size x size
  std::vector<uint8_t> key_padding;  // length size, 1 = padded frame

  bool allowed(int i, int j) const { return allow[size_t(i) * size + j] != 0; }
  void set(int i, int j, bool v) { allow[size_t(i) * size + j] = v ? 1 : 0; }
};

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on demand, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    size_t len = 1;
    for (int d : shape) len *= size_t(d);
    n->shape = std::move(shape);
    n->value.assign(len, T(0));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                          bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    size_t len = 1;
    for (int d : shape) len *= size_t(d);
    if (len != data.size()) throw DataError("tensor shape/data mismatch");
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  TensorNode<T>* node() const { return node_.get(); }
  std::shared_ptr<TensorNode<T>> handle() const { return node_; }

  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return rank() >= 2 ? node_->shape.at(1) : 1; }
  size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) const { node_->requires_grad = rg; }

  std::vector<T>& values() const { return node_->value; }
  std::vector<T>& grads() const {
    node_->ensure_grad();
    return node_->grad;
  }
  T& at(int r, int c) const { return node_->value[size_t(r) * cols() + c]; }
  T item() const { return node_->value.at(0); }

  // Reverse pass from a scalar output. Accumulates into .grad of every
  // reachable node with requires_grad set.
  void backward() const {
    if (numel() != 1) throw NumericalError("backward() needs a scalar");
    std::vector<TensorNode<T>*> order;
    topo_sort(order);
    node_->ensure_grad();
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
  }

 private:
  void topo_sort(std::vector<TensorNode<T>*>& order) const {
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<T>* p = n->parents[idx++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_node(
    std::vector<int> shape, std::vector<T> value,
    std::vector<Tensor<T>> parents) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) {
    rg = rg || p.requires_grad();
    n->parents.push_back(p.handle());
  }
  n->requires_grad = rg;
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DataError("add: shape mismatch");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto n = detail::make_node<T>(a.shape(), std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.handle(), pb = b.handle();
    n->backward_fn = [pa, pb](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(n);
}

// y = a*x + b, elementwise with scalar coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T a, T b) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b;
  auto n = detail::make_node<T>(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, a](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += a * self.grad[i];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return affine(x, s, T(0));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DataError("mul: shape mismatch");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto n = detail::make_node<T>(a.shape(), std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.handle(), pb = b.handle();
    n->backward_fn = [pa, pb](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  auto n = detail::make_node<T>(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        px->grad[i] += self.grad[i] / px->value[i];
    };
  }
  return Tensor<T>(n);
}

// Gradient flows only where the value is strictly inside [lo, hi].
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, xv[i]));
  auto n = detail::make_node<T>(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, lo, hi](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (px->value[i] > lo && px->value[i] < hi)
          px->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto n = detail::make_node<T>(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (px->value[i] > T(0)) px->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xv[i]));
  auto n = detail::make_node<T>(x.shape(), std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const T y = self.value[i];
        px->grad[i] += self.grad[i] * y * (T(1) - y);
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  auto n = detail::make_node<T>({1}, {s}, {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px](TensorNode<T>& self) {
      px->ensure_grad();
      const T g = self.grad[0];
      for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
    };
  }
  return Tensor<T>(n);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const int r = x.rows(), c = x.cols();
  std::vector<T> out(size_t(r) * c);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[size_t(j) * r + i] = xv[size_t(i) * c + j];
  auto n = detail::make_node<T>({c, r}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, r, c](TensorNode<T>& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          px->grad[size_t(i) * c + j] += self.grad[size_t(j) * r + i];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
  const int c = x.cols();
  if (r0 < 0 || r1 > x.rows() || r0 >= r1) throw DataError("slice_rows: bad range");
  std::vector<T> out(size_t(r1 - r0) * c);
  std::copy(x.values().begin() + size_t(r0) * c, x.values().begin() + size_t(r1) * c,
            out.begin());
  auto n = detail::make_node<T>({r1 - r0, c}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, r0, c](TensorNode<T>& self) {
      px->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        px->grad[size_t(r0) * c + i] += self.grad[i];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
  const int r = x.rows(), c = x.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw DataError("slice_cols: bad range");
  const int w = c1 - c0;
  std::vector<T> out(size_t(r) * w);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out[size_t(i) * w + j] = xv[size_t(i) * c + c0 + j];
  auto n = detail::make_node<T>({r, w}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, r, c, c0, w](TensorNode<T>& self) {
      px->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
          px->grad[size_t(i) * c + c0 + j] += self.grad[size_t(i) * w + j];
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DataError("concat_rows: empty");
  const int c = parts[0].cols();
  int r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DataError("concat_rows: col mismatch");
    r += p.rows();
  }
  std::vector<T> out;
  out.reserve(size_t(r) * c);
  for (const auto& p : parts)
    out.insert(out.end(), p.values().begin(), p.values().end());
  auto n = detail::make_node<T>({r, c}, std::move(out), parts);
  if (n->requires_grad) {
    std::vector<std::shared_ptr<TensorNode<T>>> hs;
    for (const auto& p : parts) hs.push_back(p.handle());
    n->backward_fn = [hs](TensorNode<T>& self) {
      size_t off = 0;
      for (const auto& h : hs) {
        if (h->requires_grad) {
          h->ensure_grad();
          for (size_t i = 0; i < h->grad.size(); ++i)
            h->grad[i] += self.grad[off + i];
        }
        off += h->value.size();
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DataError("concat_cols: empty");
  const int r = parts[0].rows();
  int c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DataError("concat_cols: row mismatch");
    c += p.cols();
  }
  std::vector<T> out(size_t(r) * c);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    const auto& pv = p.values();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out[size_t(i) * c + off + j] = pv[size_t(i) * w + j];
    off += w;
  }
  auto n = detail::make_node<T>({r, c}, std::move(out), parts);
  if (n->requires_grad) {
    std::vector<std::shared_ptr<TensorNode<T>>> hs;
    for (const auto& p : parts) hs.push_back(p.handle());
    n->backward_fn = [hs, r, c](TensorNode<T>& self) {
      int off2 = 0;
      for (const auto& h : hs) {
        const int w = int(h->shape[1]);
        if (h->requires_grad) {
          h->ensure_grad();
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
              h->grad[size_t(i) * w + j] += self.grad[size_t(i) * c + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return Tensor<T>(n);
}

// Repeat a length-C vector (or 1xC matrix) as n identical rows.
template <typename T>
Tensor<T> tile_row(const Tensor<T>& v, int n_rows) {
  const int c = int(v.numel());
  std::vector<T> out(size_t(n_rows) * c);
  for (int i = 0; i < n_rows; ++i)
    std::copy(v.values().begin(), v.values().end(), out.begin() + size_t(i) * c);
  auto n = detail::make_node<T>({n_rows, c}, std::move(out), {v});
  if (n->requires_grad) {
    auto pv = v.handle();
    n->backward_fn = [pv, n_rows, c](TensorNode<T>& self) {
      pv->ensure_grad();
      for (int i = 0; i < n_rows; ++i)
        for (int j = 0; j < c; ++j) pv->grad[j] += self.grad[size_t(i) * c + j];
    };
  }
  return Tensor<T>(n);
}

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

namespace detail {

// C[r,c] += A[r,k] * B[k,c], row-major, fixed iteration order.
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, int r, int k, int c) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (size_t(r) * k * c > size_t(1) << 16)
#endif
  for (int i = 0; i < r; ++i) {
    T* crow = C + size_t(i) * c;
    for (int p = 0; p < k; ++p) {
      const T a = A[size_t(i) * k + p];
      const T* brow = B + size_t(p) * c;
      for (int j = 0; j < c; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[r,c] += A^T[r,k] * B[k,c] where A is stored [k,r].
template <typename T>
void gemm_at_acc(const T* A, const T* B, T* C, int r, int k, int c) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (size_t(r) * k * c > size_t(1) << 16)
#endif
  for (int i = 0; i < r; ++i) {
    T* crow = C + size_t(i) * c;
    for (int p = 0; p < k; ++p) {
      const T a = A[size_t(p) * r + i];
      const T* brow = B + size_t(p) * c;
      for (int j = 0; j < c; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[r,c] += A[r,k] * B^T[k,c] where B is stored [c,k].
template <typename T>
void gemm_bt_acc(const T* A, const T* B, T* C, int r, int k, int c) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (size_t(r) * k * c > size_t(1) << 16)
#endif
  for (int i = 0; i < r; ++i) {
    const T* arow = A + size_t(i) * k;
    T* crow = C + size_t(i) * c;
    for (int j = 0; j < c; ++j) {
      const T* brow = B + size_t(j) * k;
      T s = T(0);
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) throw DataError("matmul: inner dim mismatch");
  const int r = a.rows(), k = a.cols(), c = b.cols();
  std::vector<T> out(size_t(r) * c, T(0));
  detail::gemm_acc(a.values().data(), b.values().data(), out.data(), r, k, c);
  auto n = detail::make_node<T>({r, c}, std::move(out), {a, b});
  if (n->requires_grad) {
    auto pa = a.handle(), pb = b.handle();
    n->backward_fn = [pa, pb, r, k, c](TensorNode<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();  // dA += G * B^T
        detail::gemm_bt_acc(self.grad.data(), pb->value.data(), pa->grad.data(), r, c, k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();  // dB += A^T * G
        detail::gemm_at_acc(pa->value.data(), self.grad.data(), pb->grad.data(), k, r, c);
      }
    };
  }
  return Tensor<T>(n);
}

// y = x * W + b (b optional, broadcast over rows).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W, const Tensor<T>& b) {
  if (x.cols() != W.rows()) throw DataError("linear: shape mismatch");
  const int r = x.rows(), k = x.cols(), c = W.cols();
  const bool has_bias = b.defined();
  if (has_bias && int(b.numel()) != c) throw DataError("linear: bias mismatch");
  std::vector<T> out(size_t(r) * c, T(0));
  detail::gemm_acc(x.values().data(), W.values().data(), out.data(), r, k, c);
  if (has_bias) {
    const auto& bv = b.values();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[size_t(i) * c + j] += bv[j];
  }
  std::vector<Tensor<T>> parents = {x, W};
  if (has_bias) parents.push_back(b);
  auto n = detail::make_node<T>({r, c}, std::move(out), parents);
  if (n->requires_grad) {
    auto px = x.handle(), pw = W.handle();
    auto pb = has_bias ? b.handle() : nullptr;
    n->backward_fn = [px, pw, pb, r, k, c](TensorNode<T>& self) {
      if (px->requires_grad) {
        px->ensure_grad();
        detail::gemm_bt_acc(self.grad.data(), pw->value.data(), px->grad.data(), r, c, k);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        detail::gemm_at_acc(px->value.data(), self.grad.data(), pw->grad.data(), k, r, c);
      }
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) pb->grad[j] += self.grad[size_t(i) * c + j];
      }
    };
  }
  return Tensor<T>(n);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& W) {
  return linear(x, W, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Structured ops
// ---------------------------------------------------------------------------

// Row-wise softmax with an additive -1e9 bias on disallowed pairs, so the
// attention weight of a disallowed key is exactly zero and its gradient
// vanishes through the saturated exponent.
template <typename T>
Tensor<T> masked_softmax_rows(const Tensor<T>& logits, const AttentionMask& mask) {
  const int S = logits.rows();
  if (logits.cols() != S || mask.size != S)
    throw DataError("masked_softmax_rows: mask/logit mismatch");
  static constexpr T kNegInf = T(-1e9);
  std::vector<T> out(size_t(S) * S, T(0));
  const auto& zv = logits.values();
  for (int i = 0; i < S; ++i) {
    if (!mask.allowed(i, i)) throw DataError("masked_softmax_rows: fully masked row");
    T m = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < S; ++j) {
      const T a = zv[size_t(i) * S + j] + (mask.allowed(i, j) ? T(0) : kNegInf);
      m = std::max(m, a);
    }
    T denom = T(0);
    for (int j = 0; j < S; ++j) {
      const T a = zv[size_t(i) * S + j] + (mask.allowed(i, j) ? T(0) : kNegInf);
      const T e = std::exp(a - m);
      out[size_t(i) * S + j] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < S; ++j) out[size_t(i) * S + j] *= inv;
  }
  auto n = detail::make_node<T>({S, S}, std::move(out), {logits});
  if (n->requires_grad) {
    auto pz = logits.handle();
    n->backward_fn = [pz, S](TensorNode<T>& self) {
      pz->ensure_grad();
      for (int i = 0; i < S; ++i) {
        const T* w = self.value.data() + size_t(i) * S;
        const T* g = self.grad.data() + size_t(i) * S;
        T dot = T(0);
        for (int j = 0; j < S; ++j) dot += w[j] * g[j];
        T* dz = pz->grad.data() + size_t(i) * S;
        for (int j = 0; j < S; ++j) dz[j] += w[j] * (g[j] - dot);
      }
    };
  }
  return Tensor<T>(n);
}

// Per-row normalization to zero mean / unit variance (eps 1e-5), then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const int r = x.rows(), c = x.cols();
  if (int(gamma.numel()) != c || int(beta.numel()) != c)
    throw DataError("layer_norm: affine shape mismatch");
  static constexpr T kEps = T(1e-5);
  std::vector<T> out(size_t(r) * c);
  std::vector<T> inv_sigma(r), mu(r);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int i = 0; i < r; ++i) {
    const T* xi = xv.data() + size_t(i) * c;
    T m = T(0);
    for (int j = 0; j < c; ++j) m += xi[j];
    m /= T(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) var += (xi[j] - m) * (xi[j] - m);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + kEps);
    mu[i] = m;
    inv_sigma[i] = is;
    for (int j = 0; j < c; ++j)
      out[size_t(i) * c + j] = gv[j] * (xi[j] - m) * is + bv[j];
  }
  auto n = detail::make_node<T>({r, c}, std::move(out), {x, gamma, beta});
  if (n->requires_grad) {
    auto px = x.handle(), pg = gamma.handle(), pb = beta.handle();
    n->backward_fn = [px, pg, pb, r, c, mu, inv_sigma](TensorNode<T>& self) {
      for (int i = 0; i < r; ++i) {
        const T* xi = px->value.data() + size_t(i) * c;
        const T* g = self.grad.data() + size_t(i) * c;
        const T is = inv_sigma[i], m = mu[i];
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (int j = 0; j < c; ++j) pg->grad[j] += g[j] * (xi[j] - m) * is;
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int j = 0; j < c; ++j) pb->grad[j] += g[j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          // dxhat = g * gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          T sum_dx = T(0), sum_dxx = T(0);
          for (int j = 0; j < c; ++j) {
            const T dxh = g[j] * pg->value[j];
            const T xh = (xi[j] - m) * is;
            sum_dx += dxh;
            sum_dxx += dxh * xh;
          }
          sum_dx /= T(c);
          sum_dxx /= T(c);
          T* dx = px->grad.data() + size_t(i) * c;
          for (int j = 0; j < c; ++j) {
            const T dxh = g[j] * pg->value[j];
            const T xh = (xi[j] - m) * is;
            dx[j] += is * (dxh - sum_dx - xh * sum_dxx);
          }
        }
      }
    };
  }
  return Tensor<T>(n);
}

// im2row for a strided 1-D convolution over time with zero padding:
// out[t, j*C+c] = x[t*stride - pad_left + j, c].
template <typename T>
Tensor<T> unfold1d(const Tensor<T>& x, int kernel, int stride, int pad_left, int t_out) {
  const int t_in = x.rows(), c = x.cols();
  std::vector<T> out(size_t(t_out) * kernel * c, T(0));
  const auto& xv = x.values();
  for (int t = 0; t < t_out; ++t)
    for (int j = 0; j < kernel; ++j) {
      const int src = t * stride - pad_left + j;
      if (src < 0 || src >= t_in) continue;
      std::copy(xv.begin() + size_t(src) * c, xv.begin() + size_t(src + 1) * c,
                out.begin() + (size_t(t) * kernel + j) * c);
    }
  auto n = detail::make_node<T>({t_out, kernel * c}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, kernel, stride, pad_left, t_out, t_in, c](TensorNode<T>& self) {
      px->ensure_grad();
      for (int t = 0; t < t_out; ++t)
        for (int j = 0; j < kernel; ++j) {
          const int src = t * stride - pad_left + j;
          if (src < 0 || src >= t_in) continue;
          const T* g = self.grad.data() + (size_t(t) * kernel + j) * c;
          T* dx = px->grad.data() + size_t(src) * c;
          for (int q = 0; q < c; ++q) dx[q] += g[q];
        }
    };
  }
  return Tensor<T>(n);
}

// Temporal statistics pooling: per column mean and std over rows -> [1, 2C].
template <typename T>
Tensor<T> mean_std_pool(const Tensor<T>& x) {
  const int r = x.rows(), c = x.cols();
  static constexpr T kEps = T(1e-8);
  std::vector<T> out(size_t(2) * c);
  const auto& xv = x.values();
  for (int j = 0; j < c; ++j) {
    T m = T(0);
    for (int i = 0; i < r; ++i) m += xv[size_t(i) * c + j];
    m /= T(r);
    T var = T(0);
    for (int i = 0; i < r; ++i) {
      const T d = xv[size_t(i) * c + j] - m;
      var += d * d;
    }
    var /= T(r);
    out[j] = m;
    out[c + j] = std::sqrt(var + kEps);
  }
  auto n = detail::make_node<T>({1, 2 * c}, std::move(out), {x});
  if (n->requires_grad) {
    auto px = x.handle();
    n->backward_fn = [px, r, c](TensorNode<T>& self) {
      px->ensure_grad();
      for (int j = 0; j < c; ++j) {
        const T gm = self.grad[j];
        const T gs = self.grad[c + j];
        const T m = self.value[j];
        const T s = self.value[c + j];
        for (int i = 0; i < r; ++i) {
          const T d = px->value[size_t(i) * c + j] - m;
          px->grad[size_t(i) * c + j] += gm / T(r) + gs * d / (T(r) * s);
        }
      }
    };
  }
  return Tensor<T>(n);
}

// Mean softmax cross-entropy over rows against integer class labels.
template <typename T>
Tensor<T> softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int b = logits.rows(), k = logits.cols();
  if (int(labels.size()) != b) throw DataError("softmax_xent: label count mismatch");
  std::vector<T> probs(size_t(b) * k);
  const auto& zv = logits.values();
  T loss = T(0);
  for (int i = 0; i < b; ++i) {
    const T* z = zv.data() + size_t(i) * k;
    T m = z[0];
    for (int j = 1; j < k; ++j) m = std::max(m, z[j]);
    T denom = T(0);
    for (int j = 0; j < k; ++j) {
      const T e = std::exp(z[j] - m);
      probs[size_t(i) * k + j] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (int j = 0; j < k; ++j) probs[size_t(i) * k + j] *= inv;
    loss -= std::log(std::max(probs[size_t(i) * k + labels[i]], T(1e-30)));
  }
  loss /= T(b);
  auto n = detail::make_node<T>({1}, {loss}, {logits});
  if (n->requires_grad) {
    auto pz = logits.handle();
    n->backward_fn = [pz, probs, labels, b, k](TensorNode<T>& self) {
      pz->ensure_grad();
      const T g = self.grad[0] / T(b);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < k; ++j) {
          T p = probs[size_t(i) * k + j];
          if (j == labels[i]) p -= T(1);
          pz->grad[size_t(i) * k + j] += g * p;
        }
    };
  }
  return Tensor<T>(n);
}

// Plain binary cross-entropy of a clamped score against a {0,1} label.
template <typename T>
Tensor<T> bce(const Tensor<T>& r, int y) {
  Tensor<T> rc = clamp(r, T(1e-7), T(1) - T(1e-7));
  if (y == 1) return scale(sum_all(log_op(rc)), T(-1));
  return scale(sum_all(log_op(affine(rc, T(-1), T(1)))), T(-1));
}

template <typename T>
struct MhaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product multi-head self-attention under an allow-mask.
// Composed from verified primitives so reverse-mode gradients are derived,
// not hand-written.
template <typename T>
Tensor<T> masked_mha(const Tensor<T>& x, const AttentionMask& mask, int heads,
                     const MhaParams<T>& p) {
  const int d = x.cols();
  if (d % heads != 0) throw DataError("masked_mha: D not divisible by heads");
  const int dh = d / heads;
  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
  Tensor<T> q = linear(x, p.wq, p.bq);
  Tensor<T> k = linear(x, p.wk, p.bk);
  Tensor<T> v = linear(x, p.wv, p.bv);
  std::vector<Tensor<T>> ctx;
  ctx.reserve(size_t(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<T> logits = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    Tensor<T> weights = masked_softmax_rows(logits, mask);
    ctx.push_back(matmul(weights, vh));
  }
  return linear(concat_cols(ctx), p.wo, p.bo);
}

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;
};

// linear -> ReLU -> linear.
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FfnParams<T>& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

// PE(pos,2i)=sin(pos/10000^(2i/D)), PE(pos,2i+1)=cos(same). Constant tensor.
template <typename T>
Tensor<T> sinusoidal_pe(const std::vector<int>& positions, int D) {
  if (D % 2 != 0) throw DataError("sinusoidal_pe: D must be even");
  std::vector<T> out(positions.size() * size_t(D));
  for (size_t p = 0; p < positions.size(); ++p) {
    const double pos = double(positions[p]);
    for (int i = 0; i < D / 2; ++i) {
      const double div = std::pow(10000.0, double(2 * i) / double(D));
      out[p * D + size_t(2 * i)] = T(std::sin(pos / div));
      out[p * D + size_t(2 * i) + 1] = T(std::cos(pos / div));
    }
  }
  return Tensor<T>::from_data({int(positions.size()), D}, std::move(out));
}

// ---------------------------------------------------------------------------
// Parameters, init, optimizer
// ---------------------------------------------------------------------------

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Named parameter registry; names are unique and define the checkpoint order.
template <typename T>
class ParamSet {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    for (const auto& p : items_)
      if (p.name == name) throw DataError("duplicate parameter name " + name);
    items_.push_back({name, t});
    return t;
  }

  void sort_by_name() {
    std::sort(items_.begin(), items_.end(),
              [](const Parameter<T>& a, const Parameter<T>& b) { return a.name < b.name; });
  }

  const std::vector<Parameter<T>>& items() const { return items_; }
  std::vector<Parameter<T>>& items() { return items_; }

  std::vector<Parameter<T>> trainable() const {
    std::vector<Parameter<T>> out;
    for (const auto& p : items_)
      if (p.tensor.requires_grad()) out.push_back(p);
    return out;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : items_) {
      auto* n = p.tensor.node();
      if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
  }

  size_t total_coords() const {
    size_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<Parameter<T>> items_;
};

// Kaiming-style uniform init scaled by fan-in; the stream is derived from
// (seed, name) so initialization is independent of registration order.
template <typename T>
Tensor<T> init_uniform(std::vector<int> shape, int fan_in, uint64_t seed,
                       const std::string& name) {
  Rng rng(hash_seed(seed, hash_str(name)));
  const double bound = std::sqrt(6.0 / double(std::max(1, fan_in)));
  size_t len = 1;
  for (int d : shape) len *= size_t(d);
  std::vector<T> data(len);
  for (auto& v : data) v = T(rng.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(data), true);
}

template <typename T>
struct AdamState {
  std::map<std::string, std::pair<std::vector<T>, std::vector<T>>> moments;
  long step = 0;
};

// Standard Adam with bias correction; parameters are visited in name order.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, T lr,
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8)) {
  std::sort(params.begin(), params.end(),
            [](const Parameter<T>& a, const Parameter<T>& b) { return a.name < b.name; });
  state.step += 1;
  const T bc1 = T(1) - std::pow(beta1, T(state.step));
  const T bc2 = T(1) - std::pow(beta2, T(state.step));
  for (auto& p : params) {
    auto* n = p.tensor.node();
    n->ensure_grad();
    auto& [m, v] = state.moments[p.name];
    if (m.size() != n->value.size()) {
      m.assign(n->value.size(), T(0));
      v.assign(n->value.size(), T(0));
    }
    for (size_t i = 0; i < n->value.size(); ++i) {
      const T g = n->grad[i];
      m[i] = beta1 * m[i] + (T(1) - beta1) * g;
      v[i] = beta2 * v[i] + (T(1) - beta2) * g * g;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      n->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

template <typename T>
struct GradCheckFailure {
  std::string param;
  size_t coord;
  double analytic;
  double numeric;
  double rel_err;
};

template <typename T>
struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t n_checked = 0;
  std::vector<GradCheckFailure<T>> failures;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Central finite differences (h=1e-5) against reverse-mode gradients on a
// sampled subset of parameter coordinates. The closure must rebuild the
// forward graph on every call and be deterministic.
template <typename T>
GradCheckReport<T> grad_check(const std::function<Tensor<T>()>& f,
                              std::vector<Parameter<T>> params, size_t n_coords,
                              uint64_t seed, double tol, double h = 1e-5) {
  GradCheckReport<T> report;
  std::sort(params.begin(), params.end(),
            [](const Parameter<T>& a, const Parameter<T>& b) { return a.name < b.name; });
  for (auto& p : params) {
    auto* n = p.tensor.node();
    if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
  }
  Tensor<T> loss = f();
  loss.backward();

  size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  if (total == 0) throw DataError("grad_check: no parameters");
  n_coords = std::min(n_coords, total);

  // Sample distinct flat coordinates.
  Rng rng(hash_seed(seed, 0x67726164ull));
  std::vector<size_t> flat(total);
  std::iota(flat.begin(), flat.end(), size_t(0));
  rng.shuffle(flat);
  flat.resize(n_coords);

  for (size_t fc : flat) {
    size_t off = fc;
    size_t pi = 0;
    while (off >= params[pi].tensor.numel()) {
      off -= params[pi].tensor.numel();
      ++pi;
    }
    auto* n = params[pi].tensor.node();
    const double analytic = n->grad.empty() ? 0.0 : double(n->grad[off]);
    const T saved = n->value[off];
    n->value[off] = saved + T(h);
    const double fp = double(f().item());
    n->value[off] = saved - T(h);
    const double fm = double(f().item());
    n->value[off] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    // The floor absorbs central-difference roundoff (~eps*|f|/h) on
    // coordinates whose true gradient is near zero.
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / denom;
    report.n_checked += 1;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    if (rel >= tol)
      report.failures.push_back({params[pi].name, off, analytic, numeric, rel});
  }
  return report;
}

}  // namespace ns

#endif  // NS_TENSOR_HPP
