#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "alft/diffcore/graph.hpp"
#include "alft/diffcore/rng.hpp"

namespace alft::ad {

/// Learnable array with its gradient and adaptive-moment state.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> m;
  std::vector<double> v;

  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(std::move(s)), value(shape.size(), 0.0), grad(shape.size(), 0.0),
        m(shape.size(), 0.0), v(shape.size(), 0.0) {}
};

/// Named parameter groups in registration order. Addresses are stable, so a
/// Graph may hold Parameter pointers for the lifetime of a forward pass.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) {
      index_.emplace(p->name, params_.size());
      params_.push_back(std::make_unique<Parameter>(*p));
    }
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(const std::string& name, Shape shape) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter>(name, std::move(shape)));
    return *params_.back();
  }

  /// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Parameter& add_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng, double gain = 1.0) {
    Parameter& p = add(name, std::move(shape));
    const double bound = gain / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    for (double& x : p.value) x = rng.uniform(-bound, bound);
    return p;
  }
  Parameter& add_constant(const std::string& name, Shape shape, double c) {
    Parameter& p = add(name, std::move(shape));
    std::fill(p.value.begin(), p.value.end(), c);
    return p;
  }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }
  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  [[nodiscard]] const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }

  [[nodiscard]] std::size_t count() const { return params_.size(); }
  [[nodiscard]] std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  [[nodiscard]] const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad() {
    for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Var Graph::param(Parameter& p) {
  Var v = leaf(p.shape, p.value, true);
  bindings_.emplace_back(&p, v.id());
  return v;
}

inline void Graph::flush_param_grads(double scale) {
  for (auto [p, id] : bindings_) {
    const Node& n = node(id);
    if (n.grad.empty()) continue;
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += scale * n.grad[i];
  }
}

}  // namespace alft::ad
