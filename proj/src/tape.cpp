#include "wadg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace wadg {

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, requires_grad && tracing_});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw std::logic_error("operation mixes variables from different tapes");
    needs = needs || nodes_[in.id].requires_grad;
  }
  needs = needs && tracing_;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs ? std::move(fn) : nullptr, needs});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(Var v) const {
  if (!have_grads_) throw std::logic_error("grad() requested before backward()");
  const Node& node = nodes_.at(v.id);
  if (node.grad.shape() != node.value.shape()) {
    // Node was never reached: its gradient is exactly zero.
    static thread_local Tensor zero;
    zero = Tensor(node.value.shape(), 0.0);
    return zero;
  }
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return;
  if (g.size() != node.value.size())
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match node " + shape_str(node.value.shape()));
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

void Tape::accumulate_at(std::size_t id, std::size_t flat, double g) {
  Node& node = nodes_[id];
  if (node.requires_grad) node.grad[flat] += g;
}

void Tape::backward(Var loss) {
  if (!tracing_) throw std::logic_error("backward() on a tape with tracing disabled");
  if (loss.tape != this) throw std::logic_error("backward() on a variable from another tape");
  const Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1 || root.value.rank() != 0)
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(root.value.shape()));

  for (Node& node : nodes_) node.grad = Tensor(node.value.shape(), 0.0);
  have_grads_ = true;
  nodes_[loss.id].grad[0] = 1.0;
  if (!nodes_[loss.id].requires_grad) return;

  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward) continue;
    node.backward(*this, node.grad);
  }
}

namespace {

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record(kernels::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a.id)) tp.accumulate(a.id, kernels::matmul(g, kernels::transpose(tp.value(b))));
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, kernels::matmul(kernels::transpose(tp.value(a)), g));
  });
}

Var transpose(Var a) {
  return a.tape->record(kernels::transpose(a.value()), {a},
                        [a](Tape& tp, const Tensor& g) { tp.accumulate(a.id, kernels::transpose(g)); });
}

Var add(Var a, Var b) {
  return a.tape->record(kernels::add(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a.id, g);
    tp.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  return a.tape->record(kernels::sub(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a.id, g);
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, kernels::scale(g, -1.0));
  });
}

Var mul(Var a, Var b) {
  return a.tape->record(kernels::mul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a.id)) tp.accumulate(a.id, kernels::mul(g, tp.value(b)));
    if (tp.requires_grad(b.id)) tp.accumulate(b.id, kernels::mul(g, tp.value(a)));
  });
}

Var add_row(Var a, Var row) {
  return a.tape->record(kernels::add_row(a.value(), row.value()), {a, row}, [a, row](Tape& tp, const Tensor& g) {
    tp.accumulate(a.id, g);
    if (tp.requires_grad(row.id)) {
      const std::size_t m = g.rows(), n = g.cols();
      Tensor col_sums(tp.value(row).shape(), 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) col_sums[j] += g[i * n + j];
      tp.accumulate(row.id, col_sums);
    }
  });
}

Var add_scalar(Var a, double c) {
  return a.tape->record(kernels::add_scalar(a.value(), c), {a},
                        [a](Tape& tp, const Tensor& g) { tp.accumulate(a.id, g); });
}

Var scale(Var a, double c) {
  return a.tape->record(kernels::scale(a.value(), c), {a},
                        [a, c](Tape& tp, const Tensor& g) { tp.accumulate(a.id, kernels::scale(g, c)); });
}

Var relu(Var a) {
  return a.tape->record(kernels::relu(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] > 0.0 ? g[i] : 0.0;
    tp.accumulate(a.id, d);
  });
}

Var exp(Var a) {
  return a.tape->record(kernels::exp(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = g[i] * std::exp(x[i]);
    tp.accumulate(a.id, d);
  });
}

Var log(Var a) {
  return a.tape->record(kernels::log(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = g[i] / x[i];
    tp.accumulate(a.id, d);
  });
}

Var sqrt(Var a) {
  return a.tape->record(kernels::sqrt(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] > 0.0 ? g[i] / (2.0 * std::sqrt(x[i])) : 0.0;
    tp.accumulate(a.id, d);
  });
}

Var sum(Var a) {
  return a.tape->record(kernels::sum(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    tp.accumulate(a.id, Tensor(tp.value(a).shape(), g.item()));
  });
}

Var mean(Var a) {
  return a.tape->record(kernels::mean(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    tp.accumulate(a.id, Tensor(x.shape(), g.item() / static_cast<double>(x.size())));
  });
}

Var sum_rows(Var a) {
  return a.tape->record(kernels::sum_rows(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    const std::size_t n = x.cols();
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i / n];
    tp.accumulate(a.id, d);
  });
}

Var log_sum_exp_rows(Var a) {
  return a.tape->record(kernels::log_sum_exp_rows(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    const Tensor lse = kernels::log_sum_exp_rows(x);
    const std::size_t n = x.cols();
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i / n] * std::exp(x[i] - lse[i / n]);
    tp.accumulate(a.id, d);
  });
}

Var log1p_sum_exp(Var a) {
  return a.tape->record(kernels::log1p_sum_exp(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    const double out = kernels::log1p_sum_exp(x).item();
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g.item() * std::exp(x[i] - out);
    tp.accumulate(a.id, d);
  });
}

Var normalize_rows(Var a) {
  return a.tape->record(kernels::normalize_rows(a.value()), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    const std::size_t m = x.rows(), n = x.cols();
    Tensor d = zeros_like(x);
    for (std::size_t i = 0; i < m; ++i) {
      double ss = 0.0, xg = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        ss += x[i * n + j] * x[i * n + j];
        xg += x[i * n + j] * g[i * n + j];
      }
      const double norm2 = ss + 1e-24;
      const double norm = std::sqrt(norm2);
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] = g[i * n + j] / norm - x[i * n + j] * xg / (norm2 * norm);
    }
    tp.accumulate(a.id, d);
  });
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out = kernels::select_rows(a.value(), idx);
  return a.tape->record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& tp, const Tensor& g) {
    const std::size_t n = tp.value(a).cols();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) tp.accumulate_at(a.id, idx[r] * n + j, g[r * n + j]);
  });
}

Var gather(Var a, std::span<const std::size_t> flat_indices) {
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  Tensor out = kernels::gather(a.value(), idx);
  return a.tape->record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < idx.size(); ++i) tp.accumulate_at(a.id, idx[i], g[i]);
  });
}

}  // namespace wadg
