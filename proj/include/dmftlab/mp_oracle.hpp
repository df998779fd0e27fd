#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmftlab/model.hpp"

namespace dmftlab {

// Quadrature for the Marcenko-Pastur law mu of delta^{-1} X^T X
// (X with i.i.d. entries of variance 1/d, n/d = delta): bulk
// [(1-delta^{-1/2})^2, (1+delta^{-1/2})^2] plus an atom (1-delta)_+ at 0.
struct MPLaw {
  double delta = 1.0;
  double lambda_minus = 0.0, lambda_plus = 0.0;
  double atom = 0.0;
  std::vector<double> nodes, weights;

  template <class F>
  double integrate(F&& f) const {
    double s = atom > 0.0 ? atom * f(0.0) : 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

MPLaw mp_quadrature(double delta, std::size_t n_nodes = 400);

// Positive root of (1 + z m)(1 + m/delta) = m, z < 0.
double stieltjes_m(double z, double delta);

struct OracleParams {
  double lambda = 1.0;  // prior precision
  double sigma2 = 1.0;
  double delta = 2.0;
  double tau_star2 = 1.0;  // E theta*^2
  void validate() const;
  bool matched() const;  // lambda == 1/tau*^2
};

// The three response kernels; gamma_mp is the kernel, not the Euler step.
// In the discrete-engine convention R_theta(t,s) -> alpha_mp(t-s),
// R_eta(t,s) -> -(delta/sigma2) beta_mp(t-s), R_eta(t,*) -> -(delta/sigma2) gamma_mp(t).
struct RespKernels {
  double alpha_mp, beta_mp, gamma_mp;
};
RespKernels resp_kernels(double t, const OracleParams& p, const MPLaw& law);

// t -> infinity value of gamma_mp
double gamma_mp_limit(const OracleParams& p, const MPLaw& law);

struct CorrKernels {
  double C_theta;       // C_theta(t, s)
  double C_theta_star;  // C_theta(t, *)
  double C_eta;         // C_eta(t, s)
};
CorrKernels corr_kernels(double t, double s, const OracleParams& p, const MPLaw& law);

// Stationary eta correlation in the matched case, lag r.
double ceta_stationary(double r, const OracleParams& p, const MPLaw& law);
// Same quantity through -(delta/sigma2)(gamma_mp(r) - 1).
double ceta_stationary_via_gamma(double r, const OracleParams& p, const MPLaw& law);
// r -> infinity limit of ceta_stationary.
double ceta_stationary_limit(const OracleParams& p, const MPLaw& law);

// Time-translation-invariant part of C_theta and its tau-derivative.
double tti_correlation(double tau, const OracleParams& p, const MPLaw& law);
double tti_correlation_derivative(double tau, const OracleParams& p, const MPLaw& law);

// max over the grid of |d/dtau c^tti(tau) + alpha_mp(tau)|
double fdt_check(std::span<const double> taus, const OracleParams& p, const MPLaw& law);

struct FiniteDKernels {
  double C_theta;
  double C_theta_star;
};

// Exact conditional kernels given the design X (spectral decomposition of
// delta^{-1} X^T X), averaging analytically over theta*, eps and the Brownian path.
class FiniteDOracle {
 public:
  FiniteDOracle(const ModelInstance& instance, const OracleParams& p);
  FiniteDKernels operator()(double t, double s) const;
  const std::vector<double>& eigenvalues() const { return eig_; }

 private:
  OracleParams p_;
  std::vector<double> eig_;
};

FiniteDKernels finite_d_oracle(const ModelInstance& instance, const OracleParams& p, double t, double s);

}  // namespace dmftlab
