#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "care/tensor.hpp"

// Finite-difference gradient oracle. Everything runs in double: single
// precision FD is too noisy for the tolerances used here.

namespace care {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool deterministic = true;
  std::string worst;  // "input[i][j]" of the worst coordinate
};

// f rebuilds its computation from the current values of `inputs` on every
// call and returns a scalar. Inputs are perturbed in place for the central
// differences, so f must not cache values across calls.
template <class Fn>
GradCheckReport grad_check(Fn&& f, std::vector<Tensor<double>> inputs,
                           double step = 1e-5) {
  GradCheckReport rep;

  auto eval = [&]() -> double {
    Tensor<double> y = f(inputs);
    if (y.numel() != 1)
      throw TensorError("grad_check", "objective must be scalar", y.shape());
    return y.item();
  };

  const double y1 = eval();
  const double y2 = eval();
  if (std::memcmp(&y1, &y2, sizeof(double)) != 0) rep.deterministic = false;

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f(inputs);
    tape.backward(loss);
  }
  for (auto& t : inputs) analytic.push_back(t.grad());

  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& vals = inputs[ti].mutable_value();
    for (size_t j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      vals[j] = saved + step;
      const double yp = eval();
      vals[j] = saved - step;
      const double ym = eval();
      vals[j] = saved;
      const double fd = (yp - ym) / (2.0 * step);
      const double an = analytic[ti][j];
      const double denom =
          std::max({std::fabs(an), std::fabs(fd), 1e-12});
      const double rel = std::fabs(an - fd) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = "input[" + std::to_string(ti) + "][" + std::to_string(j) +
                    "] analytic=" + std::to_string(an) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return rep;
}

}  // namespace care
