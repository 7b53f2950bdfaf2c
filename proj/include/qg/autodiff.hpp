#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qg/tensor.hpp"

namespace qg {

// A learned tensor together with its gradient buffer.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// The computation record: every primitive appends a node holding its output
// and the closure that propagates the output adjoint to its inputs. Nodes are
// created in topological order, so backward just walks them in reverse.
class Tape {
 public:
  using Adjoint = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Registers a parameter leaf. Registering the same parameter twice returns
  // the same node, so shared weights accumulate into one gradient.
  Var param(Parameter& p);

  Var push(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  // Adjoint buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id);
  // Adds g into a node's adjoint, taking ownership when none exists yet.
  void add_grad(std::size_t id, Tensor&& g);
  void add_grad(std::size_t id, const Tensor& g);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  // True when the node depends on at least one parameter.
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  // Drops every node recorded after the first `size`. Vars pointing past it
  // become invalid.
  void truncate(std::size_t size);

  // Zeroes the gradient of every registered parameter, then propagates
  // d(loss)/d(node) back through the record. Loss must hold one element.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    Parameter* parameter = nullptr;
    bool needs_grad = false;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
};

// Primitive operations. Shapes are checked eagerly and mismatches raise
// ShapeError naming both operands.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a · bᵀ
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[m×n] + bias[1×n] broadcast over rows.
Var add_row(Var x, Var bias);
// x + c where c is a fixed (non-differentiable) tensor, used for masks.
Var add_constant(Var x, const Tensor& c);
// x ⊙ c with c fixed, used for dropout masks.
Var mul_constant(Var x, const Tensor& c);
Var relu(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6);
// Rows of table selected by ids.
Var embedding(Var table, const std::vector<std::int32_t>& ids);
// Mean softmax cross-entropy over rows whose target differs from ignore_id.
// With smoothing ε the target distribution is (1-ε)·onehot + ε/V.
Var cross_entropy(Var logits, const std::vector<std::int32_t>& targets, std::int32_t ignore_id,
                  double smoothing = 0.0);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var x, std::size_t start, std::size_t width);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var sum(Var x);
Var sum_squares(Var x);

// Central-difference gradient check of `loss_fn` with respect to `p`.
// Returns ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)
// over the whole parameter block.
// Throws InputError for step <= 0 or when two forward passes disagree.
double check_gradients(const std::function<Var(Tape&)>& loss_fn, Parameter& p, double step);

}  // namespace qg
