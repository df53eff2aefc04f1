#pragma once

#include "voxfuse/tensor.hpp"

#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace vf {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Shape& shape() const;
  Index size() const { return num_elements(shape()); }
};

/// A primitive of the tape. Implementations may cache forward state for backward.
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  /// Validates input shapes and returns the output shape.
  virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;
  /// Accumulates (+=) input adjoints. grads[i] is null when input i needs no gradient.
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        const Tensor& grad_output, std::span<Tensor* const> grads) const = 0;
};

/// Define-then-run reverse-mode tape over dense tensors.
///
/// Leaves are inputs (bound at forward time), parameters (bound at definition, overridable)
/// and constants. Nodes are appended in topological order, so a node's inputs always precede it.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(const std::string& name, Shape shape, bool requires_grad = false);
  /// Registers a learnable leaf. A second call with the same name returns the same node.
  Var parameter(const std::string& name, const Tensor& value);
  Var constant(Tensor value);
  Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs);

  template <class OpT, class... Args>
  Var emplace(std::vector<Var> inputs, Args&&... args) {
    return apply(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(inputs));
  }

  void set_output(const std::string& name, Var v);

  /// Evaluates every node. `bindings` must cover all inputs and may override parameters.
  NamedTensors forward(const NamedTensors& bindings = {});
  /// Gradients of `output` for every parameter and every gradient-requiring input, by name.
  NamedTensors backward(Var output, const Tensor& seed);
  /// Seed of ones; `output` must be scalar.
  NamedTensors backward(Var output);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const;
  bool requires_grad(Var v) const;
  std::vector<std::string> parameter_names() const;
  const Tensor& leaf_value(const std::string& name) const;
  void set_leaf_value(const std::string& name, Tensor value);
  bool has_leaf(const std::string& name) const;
  Var leaf(const std::string& name) const;

  /// When on, forward throws NumericalError on the first non-finite node output.
  void set_debug_checks(bool on) { debug_checks_ = on; }
  std::size_t size() const { return nodes_.size(); }
  bool evaluated() const { return evaluated_; }

 private:
  enum class Kind { Input, Parameter, Constant, Operation };
  struct Node {
    Kind kind;
    std::string name;
    std::unique_ptr<Op> op;
    std::vector<std::size_t> inputs;
    Shape shape;
    bool requires_grad = false;
    bool bound = false;
    Tensor value;
  };

  Var add_leaf(Kind kind, const std::string& name, Shape shape, bool requires_grad);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> leaves_;
  std::map<std::string, std::size_t> outputs_;
  bool evaluated_ = false;
  bool debug_checks_ = false;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_leaf;
  Index worst_index = -1;
  Index checked_entries = 0;
};

/// Compares backward() against central finite differences on every parameter entry.
/// Relative error per entry is |analytic - fd| / max(1, |analytic|, |fd|).
GradCheckResult grad_check(Graph& graph, Var output, const NamedTensors& point, double step = 1e-5);

}  // namespace vf
