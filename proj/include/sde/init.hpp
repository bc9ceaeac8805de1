#pragma once

#include <cmath>

#include "sde/common.hpp"
#include "sde/tensor.hpp"

namespace sde::init {

// Fan-in-scaled uniform draw in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
template <typename T>
Tensor<T> uniform_fan_in(Shape shape, int fan_in, SplitMix64& rng) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  auto t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform_sym(bound));
  return t;
}

template <typename T>
Tensor<T> zeros(Shape shape) {
  return Tensor<T>::zeros(std::move(shape));
}

template <typename T>
Tensor<T> ones(Shape shape) {
  return Tensor<T>::filled(std::move(shape), T(1));
}

}  // namespace sde::init
