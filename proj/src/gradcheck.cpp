#include "wadg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace wadg {

Tensor finite_difference_gradient(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  Tensor grad(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    double hi = 0.0, lo = 0.0;
    try {
      probe[i] = orig + h;
      hi = f(probe);
      probe[i] = orig - h;
      lo = f(probe);
    } catch (const std::exception& e) {
      throw GradientCheckError(i, e.what());
    }
    probe[i] = orig;
    grad[i] = (hi - lo) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < 1e-12) return std::sqrt(diff) < 1e-12 ? 0.0 : std::sqrt(diff) / 1e-12;
  return std::sqrt(diff) / denom;
}

}  // namespace wadg
