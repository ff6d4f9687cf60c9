#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gfm/rng.hpp"
#include "gfm/tensor.hpp"

namespace gfm {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

template <class T>
double eval_scalar(const std::function<Tensor<T>()>& f) {
  NoGradGuard guard;
  const Tensor<T> y = f();
  if (y.numel() != 1) throw UsageError("grad_check: function must return a scalar");
  const double v = static_cast<double>(y.item());
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

// Compares reverse-mode gradients of `loss()` against central differences for
// the given leaves. When `max_coords` is nonzero a seeded random subset of
// coordinates is checked (used for large composites).
template <class T>
GradCheckResult grad_check_params(const std::function<Tensor<T>()>& loss,
                                  std::vector<Tensor<T>> leaves, double h,
                                  std::size_t max_coords = 0, std::uint64_t seed = 0) {
  if (!(h > 0)) throw UsageError("grad_check: step must be positive");
  for (auto& p : leaves) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    const Tensor<T> y = loss();
    if (y.numel() != 1) throw UsageError("grad_check: function must return a scalar");
    if (!std::isfinite(static_cast<double>(y.item())))
      throw NumericError("grad_check: non-finite function value");
    backward(y);
  }
  struct Coord {
    std::size_t leaf, index;
  };
  std::vector<Coord> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::size_t i = 0; i < leaves[l].numel(); ++i) coords.push_back({l, i});
  if (max_coords && coords.size() > max_coords) {
    Rng rng(seed);
    rng.shuffle(coords);
    coords.resize(max_coords);
  }
  GradCheckResult res;
  std::size_t flat = 0;
  for (const auto& c : coords) {
    auto data = leaves[c.leaf].mutable_data();
    const T orig = data[c.index];
    data[c.index] = static_cast<T>(orig + h);
    const double fp = detail::eval_scalar<T>(loss);
    data[c.index] = static_cast<T>(orig - h);
    const double fm = detail::eval_scalar<T>(loss);
    data[c.index] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = static_cast<double>(leaves[c.leaf].grad()[c.index]);
    const double err = relative_error(analytic, numeric);
    if (err > res.max_rel_error || res.checked == 0) {
      res.max_rel_error = err;
      res.worst_index = flat;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
    ++res.checked;
    ++flat;
  }
  return res;
}

// Single-input form: f maps `point` to a scalar.
template <class T>
GradCheckResult grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> point,
                           double h) {
  return grad_check_params<T>([&] { return f(point); }, {point}, h);
}

}  // namespace gfm
