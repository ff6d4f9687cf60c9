#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gfm/tensor.hpp"

namespace gfm {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedTensor<T>>;

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

// One AdamW update (decoupled weight decay, bias-corrected moments) using the
// gradients currently stored on each parameter. Parameters without a gradient
// are treated as having a zero gradient.
template <class T>
void adamw_step(ParamList<T>& params, AdamState<T>& state, const AdamWConfig& cfg) {
  if (state.step < 0) throw UsageError("adamw_step: negative step counter");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adamw_step: state/parameter mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].tensor.numel())
      throw DimensionError("adamw_step: state shape mismatch for " + params[k].name);
    const auto g = params[k].tensor.grad();
    if (!g.empty() && !all_finite(g))
      throw NumericError("non-finite gradient in parameter '" + params[k].name + "'");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] = static_cast<T>(w[i] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <class T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }
  void step() { adamw_step(params_, state_, cfg_); }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamWConfig& config() const { return cfg_; }
  const ParamList<T>& params() const { return params_; }
  std::int64_t steps() const { return state_.step; }

 private:
  ParamList<T> params_;
  AdamWConfig cfg_;
  AdamState<T> state_;
};

}  // namespace gfm
