#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace dmftlab {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

// Gauss-Legendre rule on [-1, 1].
QuadratureRule gauss_legendre(std::size_t n);

// Probabilists' Gauss-Hermite rule: sum w_i f(x_i) ~ E f(Z), Z ~ N(0,1).
QuadratureRule gauss_hermite_normal(std::size_t n);

// Adaptive Gauss-Kronrod on [a, b]; throws PrecisionError when the error
// estimate stays above max(abs_tol, rel_tol*|I|).
double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                          double rel_tol = 1e-10, double abs_tol = 1e-14);

}  // namespace dmftlab
