#pragma once

// Parameterized layers. Each layer owns its weights as leaf tensors and
// exposes them through `collect(list, prefix)` with dotted names that are
// stable across runs (they key checkpoints).

#include <cmath>
#include <string>

#include "gfm/ops.hpp"
#include "gfm/optim.hpp"
#include "gfm/rng.hpp"

namespace gfm {

template <class T>
void init_truncated_normal(Tensor<T>& t, Rng& rng, double std) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(std));
}

template <class T>
void init_normal(Tensor<T>& t, Rng& rng, double std) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, std));
}

template <class T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

template <class T>
Tensor<T> param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng rng, double std = 0.02)
      : weight(param<T>({in, out})), bias(param<T>({out})) {
    init_truncated_normal(weight, rng, std);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t n) : gamma(param<T>({n})), beta(param<T>({n})) {
    fill(gamma, T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", gamma});
    out.push_back({prefix + ".bias", beta});
  }
};

template <class T>
struct GroupNorm {
  std::int64_t groups = 1;
  Tensor<T> gamma, beta;

  GroupNorm() = default;
  GroupNorm(std::int64_t channels, std::int64_t g)
      : groups(g), gamma(param<T>({channels})), beta(param<T>({channels})) {
    fill(gamma, T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", gamma});
    out.push_back({prefix + ".bias", beta});
  }
};

// 2D convolution over [C,H,W] with He-normal init.
template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::int64_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride_, std::int64_t pad_,
         Rng rng, double std = -1)
      : weight(param<T>({out, in, k, k})), bias(param<T>({out})), stride(stride_), pad(pad_) {
    init_normal(weight, rng, std > 0 ? std : std::sqrt(2.0 / static_cast<double>(in * k * k)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct ConvTranspose2d {
  Tensor<T> weight;  // [in, out, k, k]
  Tensor<T> bias;
  std::int64_t stride = 2;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride_, Rng rng)
      : weight(param<T>({in, out, k, k})), bias(param<T>({out})), stride(stride_) {
    init_normal(weight, rng, std::sqrt(2.0 / static_cast<double>(in)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight, bias, stride, 0);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace gfm
