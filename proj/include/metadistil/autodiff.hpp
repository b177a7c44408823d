#pragma once

// Reverse-mode differentiation over a define-by-run graph.
//
// Building an expression evaluates it immediately and records a node. backward()
// does not return detached numbers: it appends the adjoint computation to the
// same graph and hands back nodes, so a gradient can itself be differentiated.
// This is what lets a teacher be trained through a student's SGD step.

#include "metadistil/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace metadistil {

enum class Op {
  constant,
  parameter,
  add,
  sub,
  mul,
  matmul,
  relu,
  step,  // Heaviside mask used by relu's adjoint; has zero derivative.
  exp,
  log,
  sum,
  mean,
  square,
  softmax,
  scale,
};

std::string_view op_name(Op op);

/// Reduction axis for sum(). `rows` collapses rank-2 [n x k] to [k];
/// `cols` collapses it to [n x 1].
enum class Axis { all, rows, cols };

using NodeId = std::size_t;

class Graph;

/// Handle to a node. Cheap to copy; valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

struct Node {
  Op op = Op::constant;
  std::vector<NodeId> parents;
  Tensor value;
  Scalar factor = 1.0;  // scale
  Axis axis = Axis::all;  // sum
  bool transpose_a = false;  // matmul
  bool transpose_b = false;
};

/// Owns the nodes of one computation. Confined to a single thread.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  Var var(NodeId id) const;

  /// Appends a node and evaluates it from its parents' current values.
  Var emit(Node node);

  /// Recomputes every node up to `root` with the given parameter values.
  const Tensor& evaluate(Var root, const std::vector<std::pair<Var, Tensor>>& bindings);

  /// True when `root` reaches any of `leaves` through differentiable edges.
  bool depends_on(Var root, std::span<const Var> leaves) const;

 private:
  friend class GradientMap;
  Tensor compute(const Node& node) const;

  // A deque keeps references to existing nodes valid while the graph grows.
  std::deque<Node> nodes_;
};

// Primitive builders. Binary elementwise ops broadcast a scalar against
// anything, a [k] vector against the rows of [n x k], and an [n x 1] column
// against the columns of [n x k].
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
Var relu(Var a);
Var step(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a, Axis axis = Axis::all);
Var mean(Var a);
Var square(Var a);
Var softmax(Var a);  // row-wise, max-shifted; rank 2 only
Var scale(Var a, Scalar factor);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Scalar c, Var a) { return scale(a, c); }
inline Var operator*(Var a, Scalar c) { return scale(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

/// Gradient nodes keyed by parameter id. Entries live in the source graph.
class GradientMap {
 public:
  Var at(Var param) const;
  bool contains(Var param) const { return grads_.count(param.id) != 0; }
  std::size_t size() const { return grads_.size(); }
  void insert(Var param, Var grad) { grads_.insert_or_assign(param.id, grad); }

 private:
  std::unordered_map<NodeId, Var> grads_;
};

/// Differentiates a scalar root with respect to parameter leaves.
/// The returned gradients are new nodes in the root's graph.
GradientMap backward(Var root, std::span<const Var> wrt);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_diff_grad(const std::function<Scalar(const Tensor&)>& f, const Tensor& x, Scalar h);

/// ||a - b|| / max(||a||, ||b||), falling back to the absolute difference
/// when both norms are below `floor`.
Scalar relative_error(const Tensor& a, const Tensor& b, Scalar floor = 1e-12);

}  // namespace metadistil
