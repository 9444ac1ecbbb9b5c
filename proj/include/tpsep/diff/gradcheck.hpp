#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tpsep/diff/graph.hpp"
#include "tpsep/diff/ops.hpp"

namespace tpsep::diff {

struct CheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

using CheckFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct CheckOptions {
  double tol = 1e-4;
  double step = 1e-5;
  // Denominator floor so near-zero gradients are compared absolutely.
  double floor = 1e-4;
  // 0 checks every element; otherwise a seeded random subset per input.
  std::size_t max_per_input = 0;
  std::uint64_t seed = 1234;
};

/// Compares analytic gradients of a random projection of `fn`'s output against
/// central finite differences. The projection weights are fixed by the seed
/// so every output component contributes to the scalar being differentiated.
inline CheckReport grad_check(const CheckFn& fn, const std::vector<Tensor<double>>& inputs,
                              const CheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  Tensor<double> proj;

  auto evaluate = [&](const std::vector<Tensor<double>>& xs, bool with_grad,
                      std::vector<Tensor<double>>* grads) {
    Graph<double> g;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(g.leaf(x, with_grad));
    Var<double> out = fn(g, vars);
    if (proj.empty()) {
      std::uniform_real_distribution<double> u(0.5, 1.5);
      proj = Tensor<double>(out.shape());
      for (auto& p : proj.data()) p = u(rng);
    }
    Var<double> loss = sum(mul(out, g.constant(proj)));
    if (grads) {
      auto gm = g.backward(loss);
      grads->clear();
      for (const auto& v : vars) grads->push_back(gm.at(v));
    }
    return loss.value()[0];
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, true, &analytic);

  CheckReport rep;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> idx(inputs[i].numel());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (opt.max_per_input != 0 && idx.size() > opt.max_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_per_input);
      std::sort(idx.begin(), idx.end());
    }
    for (auto k : idx) {
      const double x0 = inputs[i][k];
      work[i][k] = x0 + opt.step;
      const double fp = evaluate(work, false, nullptr);
      work[i][k] = x0 - opt.step;
      const double fm = evaluate(work, false, nullptr);
      work[i][k] = x0;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[i][k];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = i;
        rep.worst_index = k;
      }
    }
  }
  rep.passed = rep.max_rel_error < opt.tol;
  return rep;
}

}  // namespace tpsep::diff
