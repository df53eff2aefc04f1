#include "voxfuse/autodiff.hpp"

#include "voxfuse/error.hpp"

#include <algorithm>
#include <cmath>

namespace vf {

const Shape& Var::shape() const {
  if (graph == nullptr) throw std::logic_error("Var is not attached to a graph");
  return graph->shape(*this);
}

Var Graph::add_leaf(Kind kind, const std::string& name, Shape shape, bool requires_grad) {
  if (!name.empty() && leaves_.count(name)) throw std::invalid_argument("duplicate leaf name: " + name);
  Node n;
  n.kind = kind;
  n.name = name;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  if (!name.empty()) leaves_[name] = id;
  evaluated_ = false;
  return Var{this, id};
}

Var Graph::input(const std::string& name, Shape shape, bool requires_grad) {
  if (name.empty()) throw std::invalid_argument("inputs need a name");
  return add_leaf(Kind::Input, name, std::move(shape), requires_grad);
}

Var Graph::parameter(const std::string& name, const Tensor& value) {
  if (auto it = leaves_.find(name); it != leaves_.end()) {
    const Node& existing = nodes_[it->second];
    if (existing.kind != Kind::Parameter) throw std::invalid_argument("leaf " + name + " is not a parameter");
    require_shape(value.shape(), existing.shape, name.c_str());
    return Var{this, it->second};
  }
  Var v = add_leaf(Kind::Parameter, name, value.shape(), true);
  nodes_[v.id].value = value;
  nodes_[v.id].bound = true;
  return v;
}

Var Graph::constant(Tensor value) {
  Var v = add_leaf(Kind::Constant, "", value.shape(), false);
  nodes_[v.id].value = std::move(value);
  nodes_[v.id].bound = true;
  return v;
}

Var Graph::apply(std::unique_ptr<Op> op, std::vector<Var> inputs) {
  Node n;
  n.kind = Kind::Operation;
  std::vector<Shape> shapes;
  shapes.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.graph != this) throw std::invalid_argument("Var from another graph passed to " + std::string(op->name()));
    shapes.push_back(nodes_[v.id].shape);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.shape = op->output_shape(shapes);
  n.op = std::move(op);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return Var{this, nodes_.size() - 1};
}

void Graph::set_output(const std::string& name, Var v) {
  node(v);
  outputs_[name] = v.id;
}

const Graph::Node& Graph::node(Var v) const {
  if (v.graph != this || v.id >= nodes_.size()) throw std::invalid_argument("Var does not belong to this graph");
  return nodes_[v.id];
}

NamedTensors Graph::forward(const NamedTensors& bindings) {
  for (const auto& [name, value] : bindings) {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw std::invalid_argument("no leaf named " + name);
    Node& n = nodes_[it->second];
    require_shape(value.shape(), n.shape, name.c_str());
    n.value = value;
    n.bound = true;
  }
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind != Kind::Operation) {
      if (!n.bound) throw std::invalid_argument("unbound graph input: " + n.name);
      continue;
    }
    args.clear();
    for (std::size_t j : n.inputs) args.push_back(&nodes_[j].value);
    n.value = n.op->forward(args);
    if (n.value.shape() != n.shape) {
      throw ShapeError(std::string(n.op->name()) + " produced " + to_string(n.value.shape()) + ", declared " +
                       to_string(n.shape));
    }
    if (debug_checks_ && !n.value.all_finite()) {
      throw NumericalError("non-finite output from " + std::string(n.op->name()) + " (node " + std::to_string(i) +
                           ")");
    }
  }
  evaluated_ = true;
  NamedTensors out;
  for (const auto& [name, id] : outputs_) out[name] = nodes_[id].value;
  return out;
}

NamedTensors Graph::backward(Var output, const Tensor& seed) {
  if (!evaluated_) throw std::logic_error("backward called before forward");
  const Node& out = node(output);
  require_shape(seed.shape(), out.shape, "backward seed");

  std::vector<Tensor> grads(output.id + 1);
  grads[output.id] = seed;
  std::vector<const Tensor*> args;
  std::vector<Tensor*> arg_grads;
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.kind != Kind::Operation || !n.requires_grad || grads[i].size() == 0) continue;
    args.clear();
    arg_grads.clear();
    for (std::size_t j : n.inputs) {
      args.push_back(&nodes_[j].value);
      if (nodes_[j].requires_grad) {
        if (grads[j].size() == 0) grads[j] = Tensor(nodes_[j].shape);
        arg_grads.push_back(&grads[j]);
      } else {
        arg_grads.push_back(nullptr);
      }
    }
    n.op->backward(args, n.value, grads[i], arg_grads);
    // Release intermediate adjoints as soon as they are consumed.
    if (i != output.id) grads[i] = Tensor();
  }

  NamedTensors result;
  for (const auto& [name, id] : leaves_) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.kind == Kind::Operation) continue;
    if (id <= output.id && grads[id].size() > 0) {
      result[name] = std::move(grads[id]);
    } else {
      result[name] = Tensor(n.shape);
    }
  }
  return result;
}

NamedTensors Graph::backward(Var output) {
  if (num_elements(shape(output)) != 1) throw ShapeError("backward without a seed needs a scalar output");
  return backward(output, Tensor(shape(output), 1.0));
}

const Tensor& Graph::value(Var v) const {
  if (!evaluated_) throw std::logic_error("graph has not been evaluated");
  return node(v).value;
}

const Shape& Graph::shape(Var v) const { return node(v).shape; }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : leaves_) {
    if (nodes_[id].kind == Kind::Parameter) names.push_back(name);
  }
  return names;
}

const Tensor& Graph::leaf_value(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw std::invalid_argument("no leaf named " + name);
  return nodes_[it->second].value;
}

void Graph::set_leaf_value(const std::string& name, Tensor value) {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw std::invalid_argument("no leaf named " + name);
  Node& n = nodes_[it->second];
  require_shape(value.shape(), n.shape, name.c_str());
  n.value = std::move(value);
  n.bound = true;
  evaluated_ = false;
}

bool Graph::has_leaf(const std::string& name) const { return leaves_.count(name) > 0; }

Var Graph::leaf(const std::string& name) const {
  auto it = leaves_.find(name);
  if (it == leaves_.end()) throw std::invalid_argument("no leaf named " + name);
  return Var{const_cast<Graph*>(this), it->second};
}

GradCheckResult grad_check(Graph& graph, Var output, const NamedTensors& point, double step) {
  if (num_elements(graph.shape(output)) != 1) throw ShapeError("grad_check needs a scalar output");
  graph.forward(point);
  const NamedTensors analytic = graph.backward(output);

  GradCheckResult result;
  for (const std::string& name : graph.parameter_names()) {
    const Tensor original = graph.leaf_value(name);
    const Tensor& grad = analytic.at(name);
    Tensor probe = original;
    for (Index i = 0; i < original.size(); ++i) {
      probe[i] = original[i] + step;
      graph.set_leaf_value(name, probe);
      graph.forward();
      const double plus = graph.value(output).item();
      probe[i] = original[i] - step;
      graph.set_leaf_value(name, probe);
      graph.forward();
      const double minus = graph.value(output).item();
      probe[i] = original[i];

      const double fd = (plus - minus) / (2.0 * step);
      const double err = std::abs(grad[i] - fd) / std::max({1.0, std::abs(grad[i]), std::abs(fd)});
      ++result.checked_entries;
      if (err > result.max_relative_error || result.worst_index < 0) {
        result.max_relative_error = std::max(result.max_relative_error, err);
        if (err >= result.max_relative_error) {
          result.worst_leaf = name;
          result.worst_index = i;
        }
      }
    }
    graph.set_leaf_value(name, original);
  }
  graph.forward();
  return result;
}

}  // namespace vf
