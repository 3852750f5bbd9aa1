#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace alft::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major extents. The last dimension is the "column" axis; every op that
/// works on matrices views a tensor as rows() x cols().
struct Shape {
  std::vector<int> dims;

  Shape() = default;
  Shape(std::initializer_list<int> d) : dims(d) {}
  explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

  [[nodiscard]] std::size_t size() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  }
  [[nodiscard]] int rank() const { return static_cast<int>(dims.size()); }
  [[nodiscard]] int operator[](int i) const { return dims.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] int cols() const { return dims.empty() ? 1 : dims.back(); }
  [[nodiscard]] int rows() const {
    const int c = cols();
    return c == 0 ? 0 : static_cast<int>(size() / static_cast<std::size_t>(c));
  }
  bool operator==(const Shape&) const = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << ']';
    return os.str();
  }
};

/// Plain owned array, used for graph inputs and serialized blobs.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape.size())
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " + shape.str());
  }
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape.size(), 0.0) {}
};

struct Parameter;
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : g_(g), id_(id) {}

  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Graph& graph() const { return *g_; }
  [[nodiscard]] bool valid() const { return g_ != nullptr; }

  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::span<const double> value() const;
  [[nodiscard]] std::span<const double> grad() const;
  [[nodiscard]] double item() const;
  [[nodiscard]] double at(std::size_t i) const { return value()[i]; }
  [[nodiscard]] int rows() const { return shape().rows(); }
  [[nodiscard]] int cols() const { return shape().cols(); }
  [[nodiscard]] std::size_t size() const { return shape().size(); }

 private:
  Graph* g_ = nullptr;
  int id_ = -1;
};

/// Tape of tensor nodes in creation order. Creation order is a topological
/// order, so backward() walks the tape in reverse and visits each node once.
class Graph {
 public:
  using Backward = std::function<void(Graph&, int)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Shape shape, std::vector<double> value) { return leaf(std::move(shape), std::move(value), false); }
  Var constant(const Tensor& t) { return constant(t.shape, t.data); }
  Var input(Shape shape, std::vector<double> value) { return leaf(std::move(shape), std::move(value), true); }
  Var input(const Tensor& t) { return input(t.shape, t.data); }

  /// Leaf holding a copy of the parameter; flush_param_grads() writes its
  /// gradient back.
  Var param(Parameter& p);

  /// Adds a derived node. `backward` runs only when some parent needs a gradient.
  Var record(Shape shape, std::vector<double> value, std::initializer_list<Var> parents, Backward backward) {
    bool req = false;
    for (const Var& p : parents) req = req || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
    return push(std::move(shape), std::move(value), req, req ? std::move(backward) : Backward{});
  }
  Var record(Shape shape, std::vector<double> value, const std::vector<Var>& parents, Backward backward) {
    bool req = false;
    for (const Var& p : parents) req = req || nodes_[static_cast<std::size_t>(p.id())].requires_grad;
    return push(std::move(shape), std::move(value), req, req ? std::move(backward) : Backward{});
  }

  [[nodiscard]] const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  [[nodiscard]] bool needs(int id) const { return node(id).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  [[nodiscard]] const std::vector<double>& value(int id) const { return node(id).value; }

  /// Gradient of `id`; zeros if nothing was accumulated yet.
  [[nodiscard]] const std::vector<double>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  std::vector<double>& grad_mut(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and propagates. Root must be a scalar.
  void backward(Var root) {
    if (root.size() != 1) throw ShapeError("backward() needs a scalar root, got " + root.shape().str());
    grad_mut(root.id())[0] += 1.0;
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, id);
    }
  }

  /// Adds scale * gradient of every bound parameter leaf into Parameter::grad.
  void flush_param_grads(double scale = 1.0);

  [[nodiscard]] const std::vector<std::pair<Parameter*, int>>& bindings() const { return bindings_; }

 private:
  Var leaf(Shape shape, std::vector<double> value, bool requires_grad) {
    if (value.size() != shape.size())
      throw ShapeError("leaf data size " + std::to_string(value.size()) + " does not match shape " + shape.str());
    return push(std::move(shape), std::move(value), requires_grad, {});
  }

  Var push(Shape shape, std::vector<double> value, bool req, Backward backward) {
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, req, std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;
  std::vector<std::pair<Parameter*, int>> bindings_;
};

inline const Shape& Var::shape() const { return g_->node(id_).shape; }
inline std::span<const double> Var::value() const { return g_->node(id_).value; }
inline std::span<const double> Var::grad() const { return g_->grad(id_); }
inline double Var::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
  return value()[0];
}

}  // namespace alft::ad
