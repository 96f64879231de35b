// Copyright 2026 The NestPipe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Replicated dense model: sum-pooled embeddings feed L ReLU layers of width
// h, then a linear head to one logit with sigmoid / binary cross-entropy.
// Templated on the scalar so gradient checks can run on a 64-bit clone.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "nestpipe/core.hpp"
#include "nestpipe/embedding.hpp"

namespace nestpipe::dense {

struct DenseShape {
  std::size_t input_dim = 1;   // d
  std::size_t hidden_dim = 1;  // h
  std::size_t layers = 0;      // L

  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dim; }
  std::size_t head_in() const { return layers == 0 ? input_dim : hidden_dim; }

  std::size_t weight_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < l; ++i) off += hidden_dim * layer_in(i) + hidden_dim;
    return off;
  }
  std::size_t bias_offset(std::size_t l) const {
    return weight_offset(l) + hidden_dim * layer_in(l);
  }
  std::size_t head_offset() const { return weight_offset(layers); }
  std::size_t param_count() const { return head_offset() + head_in() + 1; }

  friend bool operator==(const DenseShape&, const DenseShape&) = default;
};

// All parameters in one flat vector: [W_1, b_1, ..., W_L, b_L, w_out, b_out],
// W_l row-major (h x fan_in). Gradients use the same type.
template <typename Real>
class DenseParams {
 public:
  DenseParams() = default;
  explicit DenseParams(DenseShape shape) : shape_(shape), values_(shape.param_count(), Real(0)) {}

  // Weights uniform in +-1/sqrt(fan_in) from the "dense" PRF stream; biases 0.
  static DenseParams init(const Prf& prf, DenseShape shape) {
    DenseParams p(shape);
    for (std::size_t l = 0; l <= shape.layers; ++l) {
      const bool head = l == shape.layers;
      const std::size_t fan_in = head ? shape.head_in() : shape.layer_in(l);
      const std::size_t rows = head ? 1 : shape.hidden_dim;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Real* w = p.values_.data() + (head ? shape.head_offset() : shape.weight_offset(l));
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < fan_in; ++j)
          w[i * fan_in + j] = static_cast<Real>(prf_uniform(prf, "dense", {l, i, j}, -bound, bound));
    }
    return p;
  }

  const DenseShape& shape() const { return shape_; }
  std::span<Real> flat() { return values_; }
  std::span<const Real> flat() const { return values_; }

  std::span<Real> weight(std::size_t l) {
    return flat().subspan(shape_.weight_offset(l), shape_.hidden_dim * shape_.layer_in(l));
  }
  std::span<const Real> weight(std::size_t l) const {
    return flat().subspan(shape_.weight_offset(l), shape_.hidden_dim * shape_.layer_in(l));
  }
  std::span<Real> bias(std::size_t l) {
    return flat().subspan(shape_.bias_offset(l), shape_.hidden_dim);
  }
  std::span<const Real> bias(std::size_t l) const {
    return flat().subspan(shape_.bias_offset(l), shape_.hidden_dim);
  }
  std::span<Real> out_weight() { return flat().subspan(shape_.head_offset(), shape_.head_in()); }
  std::span<const Real> out_weight() const {
    return flat().subspan(shape_.head_offset(), shape_.head_in());
  }
  Real& out_bias() { return values_.back(); }
  Real out_bias() const { return values_.back(); }

  template <typename Other>
  DenseParams<Other> cast() const {
    DenseParams<Other> o(shape_);
    for (std::size_t i = 0; i < values_.size(); ++i) o.flat()[i] = static_cast<Other>(values_[i]);
    return o;
  }

  // Bitwise equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
  bool bit_equal(const DenseParams& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(Real)) == 0;
  }

 private:
  DenseShape shape_;
  std::vector<Real> values_;
};

template <typename Real>
struct SampleActivations {
  std::vector<Real> input;
  std::vector<std::vector<Real>> pre;  // per hidden layer
  std::vector<std::vector<Real>> act;  // per hidden layer, ReLU(pre)
  Real logit = 0;
  Real prob = 0;
};

template <typename Real>
struct ForwardCache {
  DenseShape shape;
  std::vector<SampleActivations<Real>> samples;
};

template <typename Real>
struct ForwardResult {
  std::vector<Real> losses;
  ForwardCache<Real> cache;
};

template <typename Real>
struct BackwardResult {
  std::vector<DenseParams<Real>> dense;     // per sample
  std::vector<std::vector<Real>> pooled;    // per sample, length d
};

// Element-wise sum of the sample's rows, in the sample's (ascending) key order.
inline std::vector<float> pool(const Sample& sample, const embedding::RowMap& rows,
                               std::size_t dim) {
  std::vector<float> out(dim, 0.0f);
  for (auto k : sample.keys) {
    auto it = rows.find(k);
    if (it == rows.end())
      throw std::invalid_argument("pool: key " + std::to_string(k.id) + " missing");
    if (it->second.size() != dim) throw ShapeError("pool: row length mismatch");
    for (std::size_t j = 0; j < dim; ++j) out[j] += it->second[j];
  }
  return out;
}

// Numerically stable softplus(z) - y*z.
template <typename Real>
Real bce_with_logit(Real z, Real y) {
  const Real pos = z > Real(0) ? z : Real(0);
  return pos - y * z + std::log1p(std::exp(-std::abs(z)));
}

template <typename Real>
Real sigmoid(Real z) {
  if (z >= Real(0)) return Real(1) / (Real(1) + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real(1) + e);
}

template <typename Real>
ForwardResult<Real> forward(const DenseParams<Real>& params,
                            std::span<const std::vector<Real>> inputs,
                            std::span<const std::uint8_t> labels) {
  const DenseShape& sh = params.shape();
  if (inputs.size() != labels.size()) throw ShapeError("forward: inputs/labels size mismatch");
  ForwardResult<Real> r;
  r.cache.shape = sh;
  r.cache.samples.reserve(inputs.size());
  r.losses.reserve(inputs.size());
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    if (inputs[s].size() != sh.input_dim) throw ShapeError("forward: input length != d");
    SampleActivations<Real> a;
    a.input = inputs[s];
    const std::vector<Real>* x = &a.input;
    for (std::size_t l = 0; l < sh.layers; ++l) {
      const std::size_t fan_in = sh.layer_in(l);
      auto w = params.weight(l);
      auto b = params.bias(l);
      std::vector<Real> pre(sh.hidden_dim), act(sh.hidden_dim);
      for (std::size_t i = 0; i < sh.hidden_dim; ++i) {
        Real acc = b[i];
        for (std::size_t j = 0; j < fan_in; ++j) acc += w[i * fan_in + j] * (*x)[j];
        pre[i] = acc;
        act[i] = acc > Real(0) ? acc : Real(0);
      }
      a.pre.push_back(std::move(pre));
      a.act.push_back(std::move(act));
      x = &a.act.back();
    }
    auto wo = params.out_weight();
    Real z = params.out_bias();
    for (std::size_t j = 0; j < wo.size(); ++j) z += wo[j] * (*x)[j];
    a.logit = z;
    a.prob = sigmoid(z);
    r.losses.push_back(bce_with_logit(z, static_cast<Real>(labels[s])));
    r.cache.samples.push_back(std::move(a));
  }
  return r;
}

// Per-sample gradients of the (un-averaged) per-sample losses.
template <typename Real>
BackwardResult<Real> backward(const DenseParams<Real>& params, const ForwardCache<Real>& cache,
                              std::span<const std::uint8_t> labels) {
  const DenseShape& sh = params.shape();
  if (!(cache.shape == sh)) throw ShapeError("backward: cache built for a different shape");
  if (cache.samples.size() != labels.size())
    throw ShapeError("backward: cache/labels size mismatch");
  BackwardResult<Real> r;
  r.dense.reserve(labels.size());
  r.pooled.reserve(labels.size());
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const auto& a = cache.samples[s];
    DenseParams<Real> g(sh);
    const Real dz = a.prob - static_cast<Real>(labels[s]);
    const std::vector<Real>& head_x = sh.layers == 0 ? a.input : a.act.back();
    auto gwo = g.out_weight();
    auto wo = params.out_weight();
    std::vector<Real> dx(head_x.size());
    for (std::size_t j = 0; j < head_x.size(); ++j) {
      gwo[j] = dz * head_x[j];
      dx[j] = dz * wo[j];
    }
    g.out_bias() = dz;
    for (std::size_t l = sh.layers; l-- > 0;) {
      const std::size_t fan_in = sh.layer_in(l);
      const std::vector<Real>& x = l == 0 ? a.input : a.act[l - 1];
      auto w = params.weight(l);
      auto gw = g.weight(l);
      auto gb = g.bias(l);
      std::vector<Real> dprev(fan_in, Real(0));
      for (std::size_t i = 0; i < sh.hidden_dim; ++i) {
        const Real dpre = a.pre[l][i] > Real(0) ? dx[i] : Real(0);
        gb[i] = dpre;
        for (std::size_t j = 0; j < fan_in; ++j) {
          gw[i * fan_in + j] = dpre * x[j];
          dprev[j] += dpre * w[i * fan_in + j];
        }
      }
      dx = std::move(dprev);
    }
    r.dense.push_back(std::move(g));
    r.pooled.push_back(std::move(dx));
  }
  return r;
}

// One contribution per (sample, key): the sample's pooled-input gradient,
// since sum pooling passes it unchanged to every member row.
inline std::vector<embedding::KeyGrad> scatter_embedding_grads(
    std::span<const Sample> samples, std::span<const std::vector<float>> pooled_grads) {
  if (samples.size() != pooled_grads.size())
    throw ShapeError("scatter_embedding_grads: samples/grads size mismatch");
  std::vector<embedding::KeyGrad> out;
  for (std::size_t s = 0; s < samples.size(); ++s)
    for (auto k : samples[s].keys) out.push_back({k, pooled_grads[s], samples[s].sample_id});
  return out;
}

// theta -= lr * grad_sum / batch, element-wise.
template <typename Sum>
void sgd_step(DenseParams<float>& params, std::span<const Sum> grad_sum, std::size_t batch,
              float lr) {
  auto p = params.flat();
  if (grad_sum.size() != p.size()) throw ShapeError("sgd_step: gradient shape mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sgd_update(p[i], grad_sum[i], batch, lr);
}

// Stable byte image of the parameters, used to check replication.
inline std::vector<unsigned char> serialize(const DenseParams<float>& params) {
  auto f = params.flat();
  std::vector<unsigned char> out(f.size() * sizeof(float));
  std::memcpy(out.data(), f.data(), out.size());
  return out;
}

}  // namespace nestpipe::dense
