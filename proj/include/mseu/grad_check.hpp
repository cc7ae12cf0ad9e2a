#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mseu/tensor.hpp"

namespace mseu {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t failures = 0;
  double tol = 0.0;
  std::string worst;  // "input i, element j: analytic=... fd=..."
  bool ok() const { return checked > 0 && failures == 0; }
};

namespace detail {
inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
  return std::fabs(a - b) / denom;
}
}  // namespace detail

// Central-difference check of the tape gradient. `f` maps the input list to a
// scalar tensor and must be a pure function of those inputs. Probes every
// element unless max_probes caps it (probed indices then come from `rng`).
template <class F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<double>> inputs, double step, double tol,
                           int64_t max_probes = -1, Rng* rng = nullptr) {
  require(step > 0.0, "grad_check: step must be positive");
  require(!inputs.empty(), "grad_check: no inputs");

  for (auto& t : inputs) t.set_requires_grad(true);

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    for (auto& t : inputs) tape.watch(t);
    Tensor<double> loss = f(const_cast<const std::vector<Tensor<double>>&>(inputs));
    require(loss.numel() == 1, "grad_check: f must return a scalar");
    tape.backward(loss);
    for (auto& t : inputs) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
      t.zero_grad();
    }
  }

  GradCheckReport rep;
  rep.tol = tol;
  auto eval_at = [&](size_t which, int64_t elem, double v) {
    std::vector<Tensor<double>> probe = inputs;
    std::vector<double> vals(inputs[which].data().begin(), inputs[which].data().end());
    vals[(size_t)elem] = v;
    probe[which] = Tensor<double>::from(std::move(vals), inputs[which].shape());
    return f(const_cast<const std::vector<Tensor<double>>&>(probe)).item();
  };

  for (size_t i = 0; i < inputs.size(); ++i) {
    int64_t n = inputs[i].numel();
    std::vector<int64_t> elems;
    if (max_probes > 0 && n > max_probes) {
      require(rng != nullptr, "grad_check: sampling requires an rng");
      for (int64_t k = 0; k < max_probes; ++k) elems.push_back(rng->integer(0, n - 1));
    } else {
      elems.resize((size_t)n);
      for (int64_t k = 0; k < n; ++k) elems[(size_t)k] = k;
    }
    for (int64_t e : elems) {
      double x0 = inputs[i].data()[(size_t)e];
      double h = step * std::max(1.0, std::fabs(x0));
      double fp = eval_at(i, e, x0 + h);
      double fm = eval_at(i, e, x0 - h);
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[i][(size_t)e];
      double err = detail::rel_err(an, fd);
      rep.checked++;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst = "input " + std::to_string(i) + ", element " + std::to_string(e) +
                    ": analytic=" + std::to_string(an) + " fd=" + std::to_string(fd);
      }
      if (err > tol) rep.failures++;
    }
  }
  return rep;
}

// Single-input convenience form.
template <class F>
GradCheckReport grad_check(F&& f, Tensor<double> x, double step, double tol) {
  return grad_check([&f](const std::vector<Tensor<double>>& in) { return f(in[0]); },
                    std::vector<Tensor<double>>{std::move(x)}, step, tol);
}

}  // namespace mseu
