#include "dmftlab/quadrature.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>

#include "dmftlab/errors.hpp"

namespace dmftlab {

QuadratureRule gauss_legendre(std::size_t n) {
  if (n == 0) throw DomainError("gauss_legendre: n must be positive");
  QuadratureRule q;
  q.nodes.resize(n);
  q.weights.resize(n);
  const std::size_t half = (n + 1) / 2;
  for (std::size_t i = 0; i < half; ++i) {
    // Tricomi initial guess, then Newton on P_n
    double x = std::cos(std::numbers::pi * (static_cast<double>(i) + 0.75) /
                        (static_cast<double>(n) + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
        p0 = p1;
        p1 = pk;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // recompute derivative at the converged node
    double p0 = 1.0, p1 = x;
    for (std::size_t k = 2; k <= n; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
      p0 = p1;
      p1 = pk;
    }
    dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    q.nodes[i] = -x;
    q.nodes[n - 1 - i] = x;
    q.weights[i] = w;
    q.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) q.nodes[n / 2] = 0.0;
  return q;
}

namespace {

// Orthonormal Hermite recurrence for weight exp(-x^2); returns (p_n, p_{n-1}).
std::pair<double, double> hermite_pair(std::size_t n, double x) {
  double pm1 = 0.0;
  double p = 1.0 / std::pow(std::numbers::pi, 0.25);
  for (std::size_t j = 0; j < n; ++j) {
    const double pn = x * std::sqrt(2.0 / (j + 1.0)) * p - std::sqrt(j / (j + 1.0)) * pm1;
    pm1 = p;
    p = pn;
  }
  return {p, pm1};
}

}  // namespace

QuadratureRule gauss_hermite_normal(std::size_t n) {
  if (n == 0) throw DomainError("gauss_hermite_normal: n must be positive");
  std::vector<double> x(n), w(n);
  const double nd = static_cast<double>(n);
  double z = 0.0;
  // largest roots first, initial guesses as in the classical asymptotic scheme
  for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
    if (i == 0)
      z = std::sqrt(2.0 * nd + 1.0) - 1.85575 * std::pow(2.0 * nd + 1.0, -1.0 / 6.0);
    else if (i == 1)
      z -= 1.14 * std::pow(nd, 0.426) / z;
    else if (i == 2)
      z = 1.86 * z - 0.86 * x[0];
    else if (i == 3)
      z = 1.91 * z - 0.91 * x[1];
    else
      z = 2.0 * z - x[i - 2];
    double dp = 0.0;
    for (int it = 0; it < 200; ++it) {
      auto [p, pm1] = hermite_pair(n, z);
      dp = std::sqrt(2.0 * nd) * pm1;
      const double dz = p / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15 * std::max(1.0, std::abs(z))) break;
    }
    auto [p, pm1] = hermite_pair(n, z);
    (void)p;
    dp = std::sqrt(2.0 * nd) * pm1;
    x[i] = z;
    x[n - 1 - i] = -z;
    w[i] = 2.0 / (dp * dp);
    w[n - 1 - i] = w[i];
  }
  if (n % 2 == 1) x[n / 2] = 0.0;
  QuadratureRule q;
  q.nodes.resize(n);
  q.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    q.nodes[i] = std::numbers::sqrt2 * x[n - 1 - i];
    q.weights[i] = w[n - 1 - i] / std::sqrt(std::numbers::pi);
  }
  return q;
}

double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                          double rel_tol, double abs_tol) {
  double err = 0.0, l1 = 0.0;
  const double val = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(
      f, a, b, 20, rel_tol, &err, &l1);
  if (!std::isfinite(val) || err > std::max(abs_tol, 10.0 * rel_tol * std::max(std::abs(val), l1)))
    throw PrecisionError("adaptive quadrature did not converge (error estimate " +
                         std::to_string(err) + ")");
  return val;
}

}  // namespace dmftlab
