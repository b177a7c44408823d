#include "metadistil/autodiff.hpp"

#include "metadistil/error.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_set>

namespace metadistil {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::relu: return "relu";
    case Op::step: return "step";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::square: return "square";
    case Op::softmax: return "softmax";
    case Op::scale: return "scale";
  }
  return "?";
}

const Tensor& Var::value() const { return graph->node(id).value; }

namespace {

enum class Broadcast { same, scalar_a, scalar_b, row_a, row_b, col_a, col_b };

Broadcast classify(const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (a.empty()) return Broadcast::scalar_a;
  if (b.empty()) return Broadcast::scalar_b;
  if (a.size() == 1 && b.size() == 2 && a[0] == b[1]) return Broadcast::row_a;
  if (b.size() == 1 && a.size() == 2 && b[0] == a[1]) return Broadcast::row_b;
  if (a.size() == 2 && b.size() == 2 && a[0] == b[0]) {
    if (a[1] == 1) return Broadcast::col_a;
    if (b[1] == 1) return Broadcast::col_b;
  }
  throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  switch (classify(a, b)) {
    case Broadcast::same:
    case Broadcast::scalar_b:
    case Broadcast::row_b:
    case Broadcast::col_b: return a;
    default: return b;
  }
}

Matrix expand(const Tensor& t, const Shape& to) {
  const auto rows = storage_rows(to);
  const auto cols = storage_cols(to);
  if (t.shape() == to) return t.matrix();
  if (t.rank() == 0) return Matrix::Constant(rows, cols, t.item());
  if (t.rank() == 1) return t.matrix().replicate(rows, 1);
  return t.matrix().replicate(1, cols);
}

Matrix transpose_if(const Matrix& m, bool t) { return t ? Matrix(m.transpose()) : m; }

}  // namespace

Var Graph::var(NodeId id) const {
  if (id >= nodes_.size()) throw ConfigError("node id " + std::to_string(id) + " out of range");
  return Var{const_cast<Graph*>(this), id};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  Node n;
  n.op = Op::parameter;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor Graph::compute(const Node& n) const {
  auto arg = [&](std::size_t i) -> const Tensor& { return nodes_[n.parents[i]].value; };
  auto finish = [&](Shape shape, Matrix m) {
    if (!m.allFinite()) {
      throw NumericError("non-finite value at node " + std::to_string(nodes_.size()) + " (" +
                         std::string(op_name(n.op)) + ")");
    }
    return Tensor(std::move(shape), std::move(m));
  };

  switch (n.op) {
    case Op::constant:
    case Op::parameter: return n.value;
    case Op::add:
    case Op::sub:
    case Op::mul: {
      const auto& a = arg(0);
      const auto& b = arg(1);
      Shape shape = broadcast_shape(a.shape(), b.shape());
      Matrix ea = expand(a, shape);
      Matrix eb = expand(b, shape);
      Matrix out;
      if (n.op == Op::add) out = ea + eb;
      else if (n.op == Op::sub) out = ea - eb;
      else out = ea.cwiseProduct(eb);
      return finish(std::move(shape), std::move(out));
    }
    case Op::matmul: {
      const auto& a = arg(0);
      const auto& b = arg(1);
      if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul needs rank-2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
      }
      Matrix ma = transpose_if(a.matrix(), n.transpose_a);
      Matrix mb = transpose_if(b.matrix(), n.transpose_b);
      if (ma.cols() != mb.rows()) {
        throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
      }
      Matrix out = ma * mb;
      Shape shape{static_cast<std::size_t>(out.rows()), static_cast<std::size_t>(out.cols())};
      return finish(std::move(shape), std::move(out));
    }
    case Op::relu: return finish(arg(0).shape(), arg(0).matrix().cwiseMax(0.0));
    case Op::step:
      return finish(arg(0).shape(), (arg(0).matrix().array() > 0.0).cast<Scalar>().matrix());
    case Op::exp: return finish(arg(0).shape(), arg(0).matrix().array().exp().matrix());
    case Op::log: return finish(arg(0).shape(), arg(0).matrix().array().log().matrix());
    case Op::square: return finish(arg(0).shape(), arg(0).matrix().array().square().matrix());
    case Op::scale: return finish(arg(0).shape(), arg(0).matrix() * n.factor);
    case Op::sum: {
      const auto& a = arg(0);
      switch (n.axis) {
        case Axis::all: return finish({}, Matrix::Constant(1, 1, a.matrix().sum()));
        case Axis::rows:
          if (a.rank() != 2) throw ShapeError("sum over rows needs rank 2, got " + to_string(a.shape()));
          return finish({a.shape()[1]}, a.matrix().colwise().sum());
        case Axis::cols:
          if (a.rank() != 2) throw ShapeError("sum over cols needs rank 2, got " + to_string(a.shape()));
          return finish({a.shape()[0], 1}, a.matrix().rowwise().sum());
      }
      break;
    }
    case Op::mean: {
      const auto& a = arg(0);
      return finish({}, Matrix::Constant(1, 1, a.matrix().sum() / static_cast<Scalar>(a.size())));
    }
    case Op::softmax: {
      const auto& a = arg(0);
      if (a.rank() != 2) throw ShapeError("softmax needs rank 2, got " + to_string(a.shape()));
      Matrix out = a.matrix();
      for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const Scalar peak = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - peak).exp().matrix();
        out.row(r) /= out.row(r).sum();
      }
      return finish(a.shape(), std::move(out));
    }
  }
  throw ConfigError("unknown op");
}

Var Graph::emit(Node n) {
  for (auto p : n.parents) {
    if (p >= nodes_.size()) throw ConfigError("parent node " + std::to_string(p) + " does not exist");
  }
  n.value = compute(n);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::evaluate(Var root, const std::vector<std::pair<Var, Tensor>>& bindings) {
  if (root.graph != this || root.id >= nodes_.size()) throw ConfigError("root does not belong to this graph");

  std::vector<char> reachable(root.id + 1, 0);
  reachable[root.id] = 1;
  for (NodeId id = root.id + 1; id-- > 0;) {
    if (!reachable[id]) continue;
    for (auto p : nodes_[id].parents) reachable[p] = 1;
  }

  std::unordered_map<NodeId, const Tensor*> bound;
  for (const auto& [param, value] : bindings) {
    if (param.graph != this || nodes_.at(param.id).op != Op::parameter) {
      throw ConfigError("binding for node " + std::to_string(param.id) + " which is not a parameter");
    }
    if (value.shape() != nodes_[param.id].value.shape()) {
      throw ShapeError("binding for parameter " + std::to_string(param.id) + " has shape " +
                       to_string(value.shape()) + ", expected " + to_string(nodes_[param.id].value.shape()));
    }
    bound[param.id] = &value;
  }

  for (NodeId id = 0; id <= root.id; ++id) {
    if (!reachable[id]) continue;
    Node& n = nodes_[id];
    if (n.op == Op::parameter) {
      auto it = bound.find(id);
      if (it == bound.end()) throw ConfigError("unbound parameter node " + std::to_string(id));
      n.value = *it->second;
    } else if (n.op != Op::constant) {
      try {
        n.value = compute(n);
      } catch (const NumericError&) {
        throw NumericError("non-finite value at node " + std::to_string(id) + " (" +
                           std::string(op_name(n.op)) + ")");
      }
    }
  }
  return nodes_[root.id].value;
}

bool Graph::depends_on(Var root, std::span<const Var> leaves) const {
  std::vector<char> reachable(root.id + 1, 0);
  reachable[root.id] = 1;
  for (NodeId id = root.id + 1; id-- > 0;) {
    if (!reachable[id] || nodes_[id].op == Op::step) continue;
    for (auto p : nodes_[id].parents) reachable[p] = 1;
  }
  return std::any_of(leaves.begin(), leaves.end(),
                     [&](Var v) { return v.graph == this && v.id <= root.id && reachable[v.id]; });
}

namespace {

Graph& same_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) throw ConfigError("operands belong to different graphs");
  return *a.graph;
}

Var unary(Op op, Var a) {
  Node n;
  n.op = op;
  n.parents = {a.id};
  return a.graph->emit(std::move(n));
}

Var binary(Op op, Var a, Var b) {
  Graph& g = same_graph(a, b);
  Node n;
  n.op = op;
  n.parents = {a.id, b.id};
  return g.emit(std::move(n));
}

}  // namespace

Var add(Var a, Var b) { return binary(Op::add, a, b); }
Var sub(Var a, Var b) { return binary(Op::sub, a, b); }
Var mul(Var a, Var b) { return binary(Op::mul, a, b); }

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  Graph& g = same_graph(a, b);
  Node n;
  n.op = Op::matmul;
  n.parents = {a.id, b.id};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  return g.emit(std::move(n));
}

Var relu(Var a) { return unary(Op::relu, a); }
Var step(Var a) { return unary(Op::step, a); }
Var exp(Var a) { return unary(Op::exp, a); }
Var log(Var a) { return unary(Op::log, a); }
Var mean(Var a) { return unary(Op::mean, a); }
Var square(Var a) { return unary(Op::square, a); }
Var softmax(Var a) { return unary(Op::softmax, a); }

Var sum(Var a, Axis axis) {
  Node n;
  n.op = Op::sum;
  n.parents = {a.id};
  n.axis = axis;
  return a.graph->emit(std::move(n));
}

Var scale(Var a, Scalar factor) {
  Node n;
  n.op = Op::scale;
  n.parents = {a.id};
  n.factor = factor;
  return a.graph->emit(std::move(n));
}

Var GradientMap::at(Var param) const {
  auto it = grads_.find(param.id);
  if (it == grads_.end()) throw ConfigError("no gradient entry for node " + std::to_string(param.id));
  return it->second;
}

namespace {

Var broadcast_to(Var g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return mul(g.graph->constant(Tensor::full(shape, 1.0)), g);
}

// Sums an adjoint back down to the shape of the operand that was broadcast.
Var reduce_to(Var g, const Shape& target) {
  const Shape& s = g.shape();
  if (s == target) return g;
  if (target.empty()) return sum(g, Axis::all);
  if (target.size() == 1 && s.size() == 2) return sum(g, Axis::rows);
  if (target.size() == 2 && target[1] == 1 && s.size() == 2) return sum(g, Axis::cols);
  throw ShapeError("cannot reduce adjoint " + to_string(s) + " to " + to_string(target));
}

}  // namespace

GradientMap backward(Var root, std::span<const Var> wrt) {
  if (root.graph == nullptr) throw ConfigError("backward on a detached variable");
  Graph& g = *root.graph;
  if (root.value().rank() != 0) {
    throw ShapeError("backward needs a scalar root, got " + to_string(root.shape()));
  }

  std::unordered_set<NodeId> targets;
  for (Var w : wrt) {
    if (w.graph != &g) throw ConfigError("gradient requested for a node of another graph");
    if (g.node(w.id).op != Op::parameter) {
      throw ConfigError("node " + std::to_string(w.id) + " is not a leaf parameter");
    }
    targets.insert(w.id);
  }

  const NodeId end = root.id + 1;
  std::vector<char> needs(end, 0);
  for (NodeId id = 0; id < end; ++id) {
    const Node& n = g.node(id);
    if (n.op == Op::parameter) {
      needs[id] = targets.count(id) != 0;
    } else if (n.op != Op::constant && n.op != Op::step) {
      needs[id] = std::any_of(n.parents.begin(), n.parents.end(), [&](NodeId p) { return needs[p] != 0; });
    }
  }

  std::vector<std::optional<Var>> adjoint(end);
  adjoint[root.id] = g.constant(Tensor::scalar(1.0));

  auto accumulate = [&](NodeId target, Var contribution) {
    if (!needs[target]) return;
    auto& slot = adjoint[target];
    slot = slot ? add(*slot, contribution) : contribution;
  };

  for (NodeId id = end; id-- > 0;) {
    if (!needs[id] || !adjoint[id] || g.node(id).op == Op::parameter) continue;
    const Op op = g.node(id).op;
    const std::vector<NodeId> parents = g.node(id).parents;
    const Scalar factor = g.node(id).factor;
    const Axis axis = g.node(id).axis;
    const bool ta = g.node(id).transpose_a;
    const bool tb = g.node(id).transpose_b;
    const Var up = *adjoint[id];
    const Var self = g.var(id);

    auto parent = [&](std::size_t i) { return g.var(parents[i]); };
    auto wants = [&](std::size_t i) { return needs[parents[i]] != 0; };

    switch (op) {
      case Op::add:
        if (wants(0)) accumulate(parents[0], reduce_to(up, parent(0).shape()));
        if (wants(1)) accumulate(parents[1], reduce_to(up, parent(1).shape()));
        break;
      case Op::sub:
        if (wants(0)) accumulate(parents[0], reduce_to(up, parent(0).shape()));
        if (wants(1)) accumulate(parents[1], reduce_to(scale(up, -1.0), parent(1).shape()));
        break;
      case Op::mul:
        if (wants(0)) accumulate(parents[0], reduce_to(mul(up, parent(1)), parent(0).shape()));
        if (wants(1)) accumulate(parents[1], reduce_to(mul(up, parent(0)), parent(1).shape()));
        break;
      case Op::matmul: {
        const Var a = parent(0);
        const Var b = parent(1);
        if (wants(0)) accumulate(parents[0], ta ? matmul(b, up, tb, true) : matmul(up, b, false, !tb));
        if (wants(1)) accumulate(parents[1], tb ? matmul(up, a, true, ta) : matmul(a, up, !ta, false));
        break;
      }
      case Op::relu: accumulate(parents[0], mul(up, step(parent(0)))); break;
      case Op::exp: accumulate(parents[0], mul(up, self)); break;
      // d log(x) = 1/x, written as exp(-log x) to stay inside the primitive set.
      case Op::log: accumulate(parents[0], mul(up, exp(scale(self, -1.0)))); break;
      case Op::square: accumulate(parents[0], mul(up, scale(parent(0), 2.0))); break;
      case Op::scale: accumulate(parents[0], scale(up, factor)); break;
      case Op::sum:
        (void)axis;
        accumulate(parents[0], broadcast_to(up, parent(0).shape()));
        break;
      case Op::mean: {
        const Shape& shape = parent(0).shape();
        accumulate(parents[0], scale(broadcast_to(up, shape), 1.0 / static_cast<Scalar>(shape_size(shape))));
        break;
      }
      case Op::softmax: {
        // ds = s * (g - rowsum(g * s))
        Var inner = sum(mul(up, self), Axis::cols);
        accumulate(parents[0], mul(self, sub(up, inner)));
        break;
      }
      case Op::constant:
      case Op::parameter:
      case Op::step: break;
    }
  }

  GradientMap out;
  for (Var w : wrt) {
    if (adjoint[w.id]) {
      out.insert(w, *adjoint[w.id]);
    } else {
      out.insert(w, g.constant(Tensor::zeros(w.shape())));
    }
  }
  return out;
}

Tensor finite_diff_grad(const std::function<Scalar(const Tensor&)>& f, const Tensor& x, Scalar h) {
  if (!(h > 0.0)) throw ConfigError("finite difference step must be positive");
  std::vector<Scalar> base(x.data().begin(), x.data().end());
  std::vector<Scalar> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto probe = base;
    probe[i] = base[i] + h;
    const Scalar up = f(Tensor(x.shape(), probe));
    probe[i] = base[i] - h;
    const Scalar down = f(Tensor(x.shape(), probe));
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value in finite differences at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), grad);
}

Scalar relative_error(const Tensor& a, const Tensor& b, Scalar floor) {
  if (a.shape() != b.shape()) throw ShapeError("relative_error on " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Scalar diff = (a.matrix() - b.matrix()).norm();
  const Scalar scale = std::max(a.matrix().norm(), b.matrix().norm());
  return scale < floor ? diff : diff / scale;
}

}  // namespace metadistil
