#include "wadg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace wadg {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  if (shape_.size() > 2) throw ShapeError("tensor rank above 2 is not supported: " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 2) throw ShapeError("tensor rank above 2 is not supported: " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> v) {
  const auto n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor(Shape{rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
  switch (shape_.size()) {
    case 0: return 1;
    case 1: return shape_[0];
    default: return shape_[1];
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace kernels {
namespace {

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(a.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", [](double x, double y) { return x + y; }); }
Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", [](double x, double y) { return x - y; }); }
Tensor mul(const Tensor& a, const Tensor& b) { return zip(a, b, "mul", [](double x, double y) { return x * y; }); }

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_matrix(a, "add_row");
  const std::size_t n = a.shape()[1];
  if (row.size() != n || (row.rank() == 2 && row.shape()[0] != 1))
    throw ShapeError("add_row: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(row.shape()));
  Tensor out = a;
  for (std::size_t i = 0; i < a.shape()[0]; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row[j];
  return out;
}

Tensor add_scalar(const Tensor& a, double c) { return map(a, [c](double x) { return x + c; }); }
Tensor scale(const Tensor& a, double c) { return map(a, [c](double x) { return x * c; }); }
Tensor relu(const Tensor& a) { return map(a, [](double x) { return x > 0.0 ? x : 0.0; }); }
Tensor exp(const Tensor& a) { return map(a, [](double x) { return std::exp(x); }); }

Tensor log(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(a[i]) + " at index " + std::to_string(i));
  return map(a, [](double x) { return std::log(x); });
}

Tensor sqrt(const Tensor& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] < 0.0) throw DomainError("sqrt of negative value " + std::to_string(a[i]) + " at index " + std::to_string(i));
  return map(a, [](double x) { return std::sqrt(x); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::scalar(s);
}

Tensor mean(const Tensor& a) {
  if (a.empty()) throw ShapeError("mean of empty tensor " + shape_str(a.shape()));
  return Tensor::scalar(sum(a).item() / static_cast<double>(a.size()));
}

Tensor sum_rows(const Tensor& a) {
  require_matrix(a, "sum_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
    out[i] = s;
  }
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

Tensor log_sum_exp_rows(const Tensor& a) {
  const std::size_t m = a.rows();
  if (a.cols() == 0) throw ShapeError("log_sum_exp over empty rows " + shape_str(a.shape()));
  Tensor out(a.rank() == 2 ? Shape{m} : Shape{});
  for (std::size_t i = 0; i < m; ++i) out[i] = log_sum_exp(a.row(i));
  return out;
}

Tensor log1p_sum_exp(const Tensor& a) {
  // log(1 + sum exp(v)) == log_sum_exp([0, v...])
  const double mx = std::max(0.0, a.empty() ? 0.0 : *std::max_element(a.data().begin(), a.data().end()));
  double s = std::exp(-mx);
  for (double x : a.data()) s += std::exp(x - mx);
  return Tensor::scalar(mx + std::log(s));
}

Tensor normalize_rows(const Tensor& a) {
  require_matrix(a, "normalize_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += a[i * n + j] * a[i * n + j];
    const double norm = std::sqrt(ss + 1e-24);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] / norm;
  }
  return out;
}

Tensor select_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "select_rows");
  const std::size_t n = a.shape()[1];
  Tensor out(Shape{rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.shape()[0])
      throw ShapeError("select_rows: row " + std::to_string(rows[r]) + " out of range for " + shape_str(a.shape()));
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return out;
}

Tensor gather(const Tensor& a, std::span<const std::size_t> flat_indices) {
  Tensor out(Shape{flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= a.size())
      throw ShapeError("gather: index " + std::to_string(flat_indices[i]) + " out of range for " + shape_str(a.shape()));
    out[i] = a[flat_indices[i]];
  }
  return out;
}

}  // namespace kernels
}  // namespace wadg
