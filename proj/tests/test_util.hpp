#pragma once

#include <filesystem>
#include <string>

#include "gfm/rng.hpp"
#include "gfm/tensor.hpp"

namespace gfm::testing {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  auto t = Tensor<T>::zeros(std::move(shape), requires_grad);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gfm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace gfm::testing
