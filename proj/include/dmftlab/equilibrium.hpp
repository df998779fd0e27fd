#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "dmftlab/model.hpp"

namespace dmftlab {

// A prior frozen at a parameter value.
struct PriorAt {
  Prior prior;
  std::vector<double> alpha;
};

struct PosteriorMoments {
  double mean;
  double second;
};

// Moments of the posterior density proportional to exp(-omega (y-theta)^2/2) g(theta).
PosteriorMoments posterior_moments(double y, const PriorAt& g, double omega);

// log of the scalar-channel marginal P_{g,omega}(y)
double log_marginal(double y, const PriorAt& g, double omega);

struct ScalarChannelSpec {
  PriorAt g_star;
  PriorAt g;
  double omega_star = 1.0;
  double omega = 1.0;
  std::size_t hermite_nodes = 64;
};

struct MsePair {
  double mse;
  double mse_star;
};

MsePair mse_pair(const ScalarChannelSpec& spec);

struct FixedPointOptions {
  double damping = 0.5;
  double tolerance = 1e-12;
  std::size_t max_sweeps = 10000;
};

struct EquilibriumSolution {
  double omega = 0, omega_star = 0;
  double mse = 0, mse_star = 0;
  double ymse = 0, ymse_star = 0;
  double free_energy = 0;
  double c_eta_tti0 = 0;  // delta/sigma2 - omega
  double c_eta_inf = 0;   // omega^2 / omega_star
  std::size_t sweeps = 0;
  std::vector<std::array<double, 2>> trace;  // residuals per sweep
};

EquilibriumSolution solve_fixed_point(double delta, double sigma2, const PriorAt& g_star, const PriorAt& g,
                                      const FixedPointOptions& options = {});

double free_energy(double omega, double omega_star, const PriorAt& g_star, const PriorAt& g, double delta,
                   double sigma2);

// -E grad_alpha log g(theta, alpha) under the scalar-channel law at the
// alpha-dependent fixed point.
std::vector<double> grad_F(std::span<const double> alpha, double delta, double sigma2, const PriorAt& g_star,
                           const Prior& family, const FixedPointOptions& options = {});

}  // namespace dmftlab
