#pragma once

#include <cmath>
#include <vector>

#include "sde/ops.hpp"
#include "sde/tensor.hpp"

namespace sde {

// Central-difference gradient of a scalar-valued function of one tensor:
// g_i = (f(x + h e_i) - f(x - h e_i)) / 2h. Test oracle, independent of the
// tape it checks.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F f, const Tensor<T>& x, double h) {
  Tensor<T> probe = x.detach();
  Tensor<T> g = Tensor<T>::zeros(x.shape());
  auto& vals = probe.values();
  for (size_t i = 0; i < vals.size(); ++i) {
    const T orig = vals[i];
    vals[i] = static_cast<T>(double(orig) + h);
    const double fp = f(probe);
    vals[i] = static_cast<T>(double(orig) - h);
    const double fm = f(probe);
    vals[i] = orig;
    g.values()[i] = static_cast<T>((fp - fm) / (2.0 * h));
  }
  return g;
}

struct GradCheckReport {
  double max_abs_diff = 0;  // ||analytic - numeric||_inf
  double grad_scale = 0;    // max(||analytic||_inf, ||numeric||_inf)
  double rel_err = 0;       // max_abs_diff / max(grad_scale, tiny)
};

namespace detail {

template <typename T>
GradCheckReport compare_grads(const std::vector<T>& analytic,
                              const std::vector<double>& numeric) {
  GradCheckReport r;
  for (size_t i = 0; i < analytic.size(); ++i) {
    r.max_abs_diff =
        std::max(r.max_abs_diff, std::abs(double(analytic[i]) - numeric[i]));
    r.grad_scale = std::max(r.grad_scale, std::abs(double(analytic[i])));
    r.grad_scale = std::max(r.grad_scale, std::abs(numeric[i]));
  }
  r.rel_err = r.max_abs_diff / std::max(r.grad_scale, 1e-12);
  return r;
}

}  // namespace detail

// Compares tape gradients of loss = <make_out(), probe> against central
// differences for one target tensor. `make_out` rebuilds the forward from
// current tensor values, so the same closure serves composite blocks whose
// other inputs stay fixed. The probe dot product on the numeric side is
// accumulated in double so the oracle is not limited by the final-reduction
// rounding of the storage type.
template <typename T, typename MakeOut>
GradCheckReport check_gradient(MakeOut make_out, Tensor<T> target, double h,
                               uint64_t probe_seed = 0x5eed) {
  auto first = make_out();
  Tensor<T> probe = Tensor<T>::zeros(first.shape());
  {
    SplitMix64 rng(probe_seed);
    for (auto& p : probe.values()) {
      double v = rng.uniform_sym(1.0);
      if (std::abs(v) < 0.25) v += v < 0 ? -0.5 : 0.5;
      p = static_cast<T>(v);
    }
  }

  const bool was = target.requires_grad();
  target.set_requires_grad(true);
  auto loss = sum(mul(make_out(), probe));
  backward(loss);
  std::vector<T> analytic = target.grad();
  target.set_requires_grad(was);

  auto dot = [&probe](const Tensor<T>& out) {
    double acc = 0;
    for (size_t i = 0; i < out.numel(); ++i)
      acc += double(out.values()[i]) * double(probe.values()[i]);
    return acc;
  };

  std::vector<double> numeric(target.numel());
  auto& vals = target.values();
  for (size_t i = 0; i < vals.size(); ++i) {
    const T orig = vals[i];
    vals[i] = static_cast<T>(double(orig) + h);
    const double fp = dot(make_out());
    vals[i] = static_cast<T>(double(orig) - h);
    const double fm = dot(make_out());
    vals[i] = orig;
    numeric[i] = (fp - fm) / (2.0 * h);
  }
  return detail::compare_grads(analytic, numeric);
}

}  // namespace sde
