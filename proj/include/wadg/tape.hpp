#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "wadg/tensor.hpp"

namespace wadg {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid as long as its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of traced operations with reverse-mode accumulation.
///
/// With tracing disabled the tape still stores forward values (so the same
/// model code runs in both modes) but records no backward closures, and
/// backward() refuses to run.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool tracing = true) : tracing_(tracing) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracing() const noexcept { return tracing_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the last backward() loss with respect to v. Zero for nodes
  /// the loss does not depend on.
  const Tensor& grad(Var v) const;

  /// Resets every accumulator and back-propagates from a scalar loss.
  void backward(Var loss);

  /// Used by operations: appends a result node whose inputs are `inputs`.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  /// Adds g into the accumulator of node id (no-op if it needs no gradient).
  void accumulate(std::size_t id, const Tensor& g);
  void accumulate_at(std::size_t id, std::size_t flat, double g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  bool tracing_;
  bool have_grads_ = false;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// Traced primitives. Every one validates shapes through the matching kernel.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var a, Var row);
Var add_scalar(Var a, double c);
Var scale(Var a, double c);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
/// Derivative at exactly 0 is taken as 0.
Var sqrt(Var a);
Var sum(Var a);
Var mean(Var a);
Var sum_rows(Var a);
Var log_sum_exp_rows(Var a);
/// log(1 + sum_k exp(a_k)) as a scalar, stabilized; 0 for an empty input.
Var log1p_sum_exp(Var a);
/// Rows divided by their L2 norm (with a 1e-24 floor inside the square root).
Var normalize_rows(Var a);
Var select_rows(Var a, std::span<const std::size_t> rows);
Var gather(Var a, std::span<const std::size_t> flat_indices);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace wadg
