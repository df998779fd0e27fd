#include "dmftlab/mp_oracle.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "dmftlab/errors.hpp"
#include "dmftlab/quadrature.hpp"

namespace dmftlab {

namespace {

// e^{-x} with the far tail flushed to zero
double expneg(double x) { return x > 700.0 ? 0.0 : std::exp(-x); }
// 1 - e^{-x}
double one_minus_expneg(double x) { return x > 700.0 ? 1.0 : -std::expm1(-x); }

double rate(double x, const OracleParams& p) { return p.lambda + p.delta * x / p.sigma2; }

void check_time(double t, const char* who) {
  if (!(t >= 0.0) || !std::isfinite(t)) throw DomainError(std::string(who) + ": time must be >= 0");
}

}  // namespace

MPLaw mp_quadrature(double delta, std::size_t n_nodes) {
  if (!(delta > 0.0) || !std::isfinite(delta)) throw DomainError("mp_quadrature: delta must be positive");
  if (n_nodes < 8) throw DomainError("mp_quadrature: need at least 8 nodes");
  MPLaw law;
  law.delta = delta;
  const double rs = 1.0 / std::sqrt(delta);
  law.lambda_minus = (1.0 - rs) * (1.0 - rs);
  law.lambda_plus = (1.0 + rs) * (1.0 + rs);
  law.atom = std::max(0.0, 1.0 - delta);
  const double r = 2.0 * rs;  // bulk radius
  const auto gl = gauss_legendre(n_nodes);
  law.nodes.resize(n_nodes);
  law.weights.resize(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const double phi = 0.5 * std::numbers::pi * gl.nodes[i];
    // 1 + sin(phi) without cancellation near the lower edge
    const double sp = std::sin(0.5 * phi + 0.25 * std::numbers::pi);
    const double one_plus_sin = 2.0 * sp * sp;
    const double x = law.lambda_minus + r * one_plus_sin;
    const double c = std::cos(phi);
    law.nodes[i] = x;
    law.weights[i] = 0.5 * std::numbers::pi * gl.weights[i] * delta * r * r * c * c / (2.0 * std::numbers::pi * x);
  }
  return law;
}

double stieltjes_m(double z, double delta) {
  if (!(z < 0.0)) throw DomainError("stieltjes_m: requires z < 0");
  if (!(delta > 0.0)) throw DomainError("stieltjes_m: delta must be positive");
  // (z/delta) m^2 + (1/delta + z - 1) m + 1 = 0
  const double a = z / delta;
  const double b = 1.0 / delta + z - 1.0;
  const double disc = std::sqrt(b * b - 4.0 * a);
  return b > 0.0 ? (b + disc) / (-2.0 * a) : 2.0 / (disc - b);
}

void OracleParams::validate() const {
  if (!(lambda > 0.0) || !(sigma2 > 0.0) || !(delta > 0.0) || !(tau_star2 > 0.0))
    throw DomainError("OracleParams: lambda, sigma2, delta, tau_star2 must be positive");
}

bool OracleParams::matched() const { return std::abs(lambda * tau_star2 - 1.0) <= 1e-12; }

RespKernels resp_kernels(double t, const OracleParams& p, const MPLaw& law) {
  check_time(t, "resp_kernels");
  p.validate();
  RespKernels k{};
  k.alpha_mp = law.integrate([&](double x) { return expneg(rate(x, p) * t); });
  k.beta_mp = -law.integrate([&](double x) { return x * expneg(rate(x, p) * t); }) / p.sigma2;
  k.gamma_mp = law.integrate([&](double x) {
    const double a = rate(x, p);
    return x * one_minus_expneg(a * t) / a;
  }) / p.sigma2;
  return k;
}

double gamma_mp_limit(const OracleParams& p, const MPLaw& law) {
  p.validate();
  return law.integrate([&](double x) { return x / rate(x, p); }) / p.sigma2;
}

CorrKernels corr_kernels(double t, double s, const OracleParams& p, const MPLaw& law) {
  check_time(t, "corr_kernels");
  check_time(s, "corr_kernels");
  p.validate();
  const double d = p.delta, ts2 = p.tau_star2, s2 = p.sigma2, s4 = s2 * s2;
  const double lag = std::abs(t - s), sum = t + s;
  CorrKernels k{};
  k.C_theta_star = d * ts2 * resp_kernels(t, p, law).gamma_mp;

  k.C_theta = law.integrate([&](double x) {
    const double a = rate(x, p);
    const double ft = one_minus_expneg(a * t), fs = one_minus_expneg(a * s);
    return (d * d * ts2 * x * x + d * s2 * x) / (a * a) * ft * fs / s4 + (expneg(a * lag) - expneg(a * sum)) / a;
  });

  // eta-side: sigma^-4 P(t,s) - sigma^-4 Q(t) - sigma^-4 Q(s) + delta/sigma^2
  const double P = law.integrate([&](double x) {
                     const double a = rate(x, p);
                     const double ft = one_minus_expneg(a * t), fs = one_minus_expneg(a * s);
                     return (d * d * d * ts2 * x * x * x + d * d * s2 * x * x) / (a * a) * ft * fs / s4 +
                            d * x * (expneg(a * lag) - expneg(a * sum)) / a -
                            d * d * x * x * ts2 * (ft + fs) / (a * s2);
                   }) +
                   d * ts2;
  auto Q = [&](double u) {
    return law.integrate([&](double x) {
      const double a = rate(x, p);
      return d * x * one_minus_expneg(a * u) / a;
    });
  };
  k.C_eta = (P - Q(t) - Q(s)) / s4 + d / s2;
  return k;
}

namespace {
void require_matched(const OracleParams& p) {
  p.validate();
  if (!p.matched()) throw UnsupportedError("ceta_stationary: requires lambda = 1/tau_star2");
}
}  // namespace

double ceta_stationary(double r, const OracleParams& p, const MPLaw& law) {
  require_matched(p);
  const double ar = std::abs(r), s2 = p.sigma2;
  return law.integrate([&](double x) {
           const double a = rate(x, p);
           return -p.delta * x * one_minus_expneg(a * ar) / a;
         }) / (s2 * s2) +
         p.delta / s2;
}

double ceta_stationary_via_gamma(double r, const OracleParams& p, const MPLaw& law) {
  require_matched(p);
  return -(p.delta / p.sigma2) * (resp_kernels(std::abs(r), p, law).gamma_mp - 1.0);
}

double ceta_stationary_limit(const OracleParams& p, const MPLaw& law) {
  require_matched(p);
  const double s2 = p.sigma2;
  return p.delta / s2 - law.integrate([&](double x) { return p.delta * x / rate(x, p); }) / (s2 * s2);
}

double tti_correlation(double tau, const OracleParams& p, const MPLaw& law) {
  check_time(tau, "tti_correlation");
  p.validate();
  return law.integrate([&](double x) {
    const double a = rate(x, p);
    return expneg(a * tau) / a;
  });
}

double tti_correlation_derivative(double tau, const OracleParams& p, const MPLaw& law) {
  check_time(tau, "tti_correlation_derivative");
  p.validate();
  return law.integrate([&](double x) {
    const double a = rate(x, p);
    return -a * (expneg(a * tau) / a);
  });
}

double fdt_check(std::span<const double> taus, const OracleParams& p, const MPLaw& law) {
  double worst = 0.0;
  for (double tau : taus)
    worst = std::max(worst, std::abs(tti_correlation_derivative(tau, p, law) + resp_kernels(tau, p, law).alpha_mp));
  return worst;
}

FiniteDOracle::FiniteDOracle(const ModelInstance& instance, const OracleParams& p) : p_(p) {
  p.validate();
  const double d = static_cast<double>(instance.d()), n = static_cast<double>(instance.n());
  if (std::abs(n / d - p.delta) > 1e-12 * p.delta) throw DomainError("finite_d_oracle: delta does not match the instance");
  const Eigen::MatrixXd G = (d / n) * (instance.X.transpose() * instance.X);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw PrecisionError("finite_d_oracle: eigen-decomposition failed");
  eig_.resize(static_cast<std::size_t>(G.rows()));
  for (Eigen::Index i = 0; i < G.rows(); ++i) eig_[static_cast<std::size_t>(i)] = std::max(0.0, es.eigenvalues()(i));
}

FiniteDKernels FiniteDOracle::operator()(double t, double s) const {
  check_time(t, "finite_d_oracle");
  check_time(s, "finite_d_oracle");
  const double d = p_.delta, ts2 = p_.tau_star2, s2 = p_.sigma2, s4 = s2 * s2;
  const double lag = std::abs(t - s), sum = t + s;
  FiniteDKernels k{0.0, 0.0};
  for (double x : eig_) {
    const double a = rate(x, p_);
    const double ft = one_minus_expneg(a * t), fs = one_minus_expneg(a * s);
    // E zeta_i^2 = sigma^-4 (delta^2 x^2 tau*^2 + delta sigma^2 x), E zeta_i xi*_i = sigma^-2 delta x tau*^2
    k.C_theta += (d * d * x * x * ts2 + d * s2 * x) / s4 * ft * fs / (a * a) + (expneg(a * lag) - expneg(a * sum)) / a;
    k.C_theta_star += d * x * ts2 / s2 * ft / a;
  }
  const double m = static_cast<double>(eig_.size());
  k.C_theta /= m;
  k.C_theta_star /= m;
  return k;
}

FiniteDKernels finite_d_oracle(const ModelInstance& instance, const OracleParams& p, double t, double s) {
  return FiniteDOracle(instance, p)(t, s);
}

}  // namespace dmftlab
