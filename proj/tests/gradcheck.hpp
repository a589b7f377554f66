#pragma once

// Central finite-difference oracle for the autodiff tests. Independent of the
// backward rules: it only evaluates forward passes with no tape active.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "alignlab/ops.hpp"
#include "alignlab/tensor.hpp"

namespace gradcheck {

using alignlab::Tensor;

struct Result {
  bool ok = true;
  double worst_rel = 0.0;
  double worst_abs = 0.0;
  std::string detail;
};

// Compares tape gradients of `loss_fn` w.r.t. every entry of every leaf with
// (f(x+h) - f(x-h)) / 2h. An entry passes if its relative error is within
// `rel_tol` or its absolute error within `abs_tol`.
inline Result check(std::vector<Tensor> leaves, const std::function<Tensor()>& loss_fn, double h = 1e-5,
                    double rel_tol = 1e-4, double abs_tol = 1e-6) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    alignlab::Tape tape;
    Tensor loss = loss_fn();
    alignlab::backward(loss);
  }
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }
  Result result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = loss_fn().item();
      data[i] = orig - h;
      const double down = loss_fn().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[li][i];
      const double abs_err = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = scale > 0 ? abs_err / scale : 0.0;
      result.worst_abs = std::max(result.worst_abs, abs_err);
      if (abs_err > abs_tol) result.worst_rel = std::max(result.worst_rel, rel);
      if (abs_err > abs_tol && rel > rel_tol) {
        result.ok = false;
        std::ostringstream msg;
        msg << "leaf " << li << " entry " << i << ": analytic " << a << " numeric " << numeric;
        result.detail = msg.str();
        return result;
      }
    }
  }
  return result;
}

inline Tensor random_tensor(alignlab::Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  return Tensor::randn(std::move(shape), stddev, rng);
}

// Contracts a non-scalar output against fixed random weights so every output
// entry gets a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& out, const Tensor& weights) {
  return alignlab::sum(alignlab::mul(out, weights));
}

}  // namespace gradcheck
