#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>

#include "wadg/tensor.hpp"

namespace wadg {

class GradientCheckError : public std::runtime_error {
 public:
  GradientCheckError(std::size_t coordinate, const std::string& what)
      : std::runtime_error("evaluation failed at coordinate " + std::to_string(coordinate) + ": " + what),
        coordinate_(coordinate) {}
  std::size_t coordinate() const noexcept { return coordinate_; }

 private:
  std::size_t coordinate_;
};

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_difference_gradient(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// ||a - b|| / max(||a||, ||b||), or 0 when both are below 1e-12 in norm.
double relative_error(const Tensor& a, const Tensor& b);

}  // namespace wadg
