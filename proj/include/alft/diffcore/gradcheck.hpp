#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/params.hpp"

namespace alft::ad {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst;  // "<input or parameter name>[index]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace detail {

inline double checked(double v) {
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

inline void record_worst(GradCheckReport& rep, const std::string& name, std::size_t k, double analytic, double numeric) {
  const double err = relative_error(analytic, numeric);
  ++rep.coordinates;
  if (rep.worst.empty() || err > rep.max_relative_error) {
    rep.max_relative_error = err;
    rep.worst = name + "[" + std::to_string(k) + "]";
    rep.worst_analytic = analytic;
    rep.worst_numeric = numeric;
  }
}

}  // namespace detail

using GraphFunction = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Central-difference check of a scalar function of the given inputs.
inline GradCheckReport grad_check(const GraphFunction& f, std::vector<Tensor> inputs, double eps = 1e-6) {
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(g.input(t));
    Var out = f(g, vars);
    detail::checked(out.item());
    g.backward(out);
    for (const Var& v : vars) analytic.emplace_back(v.grad().begin(), v.grad().end());
  }
  auto eval = [&]() {
    Graph g;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(g.constant(t));
    return detail::checked(f(g, vars).item());
  };
  GradCheckReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].data.size(); ++k) {
      const double orig = inputs[i].data[k];
      inputs[i].data[k] = orig + eps;
      const double fp = eval();
      inputs[i].data[k] = orig - eps;
      const double fm = eval();
      inputs[i].data[k] = orig;
      detail::record_worst(rep, "input" + std::to_string(i), k, analytic[i][k], (fp - fm) / (2.0 * eps));
    }
  return rep;
}

/// Central-difference check of every coordinate of every parameter accepted by
/// `filter`. `f` builds the scalar objective, binding parameters via g.param().
inline GradCheckReport grad_check_params(ParameterStore& store, const std::function<Var(Graph&)>& f, double eps = 1e-6,
                                         const std::function<bool(const Parameter&)>& filter = {}) {
  store.zero_grad();
  {
    Graph g;
    Var out = f(g);
    detail::checked(out.item());
    g.backward(out);
    g.flush_param_grads();
  }
  auto eval = [&]() {
    Graph g;
    return detail::checked(f(g).item());
  };
  GradCheckReport rep;
  for (std::size_t i = 0; i < store.count(); ++i) {
    Parameter& p = store[i];
    if (filter && !filter(p)) continue;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + eps;
      const double fp = eval();
      p.value[k] = orig - eps;
      const double fm = eval();
      p.value[k] = orig;
      detail::record_worst(rep, p.name, k, p.grad[k], (fp - fm) / (2.0 * eps));
    }
  }
  store.zero_grad();
  return rep;
}

/// Parameter check for piecewise-smooth objectives (bilinear cells, clamps).
/// Each coordinate is differentiated at every step h in `steps` with the
/// Richardson combination (4 D(h/2) - D(h)) / 3 of central differences, and
/// keeps its closest estimate: large steps beat roundoff on near-zero
/// gradients, small steps stay inside one interpolation cell.
inline GradCheckReport grad_check_params_multistep(ParameterStore& store, const std::function<Var(Graph&)>& f,
                                                   const std::vector<double>& steps = {1e-3, 1e-4, 1e-5, 1e-6},
                                                   const std::function<bool(const Parameter&)>& filter = {}) {
  if (steps.empty()) throw std::invalid_argument("grad_check_params_multistep: no steps");
  store.zero_grad();
  {
    Graph g;
    Var out = f(g);
    detail::checked(out.item());
    g.backward(out);
    g.flush_param_grads();
  }
  auto eval = [&]() {
    Graph g;
    return detail::checked(f(g).item());
  };
  GradCheckReport rep;
  for (std::size_t i = 0; i < store.count(); ++i) {
    Parameter& p = store[i];
    if (filter && !filter(p)) continue;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      auto central = [&](double h) {
        p.value[k] = orig + h;
        const double fp = eval();
        p.value[k] = orig - h;
        const double fm = eval();
        p.value[k] = orig;
        return (fp - fm) / (2.0 * h);
      };
      double best = 0.0, best_err = std::numeric_limits<double>::infinity();
      for (double h : steps) {
        const double d = (4.0 * central(0.5 * h) - central(h)) / 3.0;
        const double err = relative_error(p.grad[k], d);
        if (err < best_err) {
          best_err = err;
          best = d;
        }
      }
      detail::record_worst(rep, p.name, k, p.grad[k], best);
    }
  }
  store.zero_grad();
  return rep;
}

}  // namespace alft::ad
