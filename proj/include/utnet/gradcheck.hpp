#pragma once

#include <functional>
#include <string>
#include <vector>

#include "utnet/ops.hpp"

namespace utnet {

// Scalar function of several tensors, used by grad_check.
using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Where the worst relative error was found, for failure diagnostics.
struct GradCheckWorst {
  int input = -1;       // index into the inputs vector
  int64_t element = -1; // flat element index within that input
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of `f` against central finite differences
// at step `eps`, over every element of every input. Returns the worst
// relative error |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const LossFn& f, std::vector<Tensor> inputs,
                         double eps = 1e-5, GradCheckWorst* worst_out = nullptr) {
  // Deep-copy so the perturbation loop cannot write through shared buffers.
  for (Tensor& t : inputs) t = Tensor::from(t.shape, *t.data);
  for (Tensor& t : inputs) t.set_requires_grad();

  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    GraphScope scope(g);
    Tensor loss = f(inputs);
    g.backward(loss);
    for (Tensor& t : inputs) analytic.push_back(*t.grad);
  }

  double worst = 0.0;
  NoGradScope no_grad;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.at(i);
      t.at(i) = saved + eps;
      const double lp = f(inputs).scalar();
      t.at(i) = saved - eps;
      const double lm = f(inputs).scalar();
      t.at(i) = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = analytic[ti][size_t(i)];
      const double rel = std::abs(an - fd) / std::max(1.0, std::abs(fd));
      if (rel > worst) {
        worst = rel;
        if (worst_out) *worst_out = {int(ti), i, an, fd};
      }
    }
  }
  return worst;
}

// One row of a gradient-check report.
struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  GradCheckWorst worst;
};

inline GradCheckRow run_grad_check(const std::string& name, const LossFn& f,
                                   std::vector<Tensor> inputs,
                                   double tolerance = 1e-5, double eps = 1e-5) {
  GradCheckRow row;
  row.name = name;
  row.max_rel_err = grad_check(f, std::move(inputs), eps, &row.worst);
  row.tolerance = tolerance;
  row.pass = row.max_rel_err < tolerance;
  return row;
}

}  // namespace utnet
