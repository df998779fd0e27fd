#include <cmath>
#include <vector>

#include "dmftlab/dmft.hpp"
#include "dmftlab/equilibrium.hpp"
#include "dmftlab/errors.hpp"
#include "dmftlab/mp_oracle.hpp"
#include "doctest.h"

using namespace dmftlab;

namespace {

PriorAt gauss(double tau2) { return {Prior(GaussianFixed{1.0 / tau2}), {}}; }

// -E log P_{g,omega}(Y), Y = theta* + z/sqrt(omega*), all Gaussian
double gaussian_free_energy(double omega, double omega_star, double tau2, double tau_star2, double delta,
                            double sigma2) {
  const double v = tau2 + 1.0 / omega;
  const double nll = 0.5 * std::log(2 * M_PI * v) + (tau_star2 + 1.0 / omega_star) / (2 * v);
  const double s = 1.0 / sigma2;
  return nll - 0.5 * (2 * delta + std::log(2 * M_PI / omega) - delta * std::log(delta * s / omega) +
                      (1 - delta) * omega / omega_star + (omega / s) * (omega / omega_star - 2));
}

struct Family {
  const char* name;
  PriorAt at;
};

std::vector<Family> matched_families() {
  return {
      {"gaussian_fixed", {Prior(GaussianFixed{0.7}), {}}},
      {"gaussian_location", {Prior(GaussianLocation{0.8}), {0.4}}},
      {"mean_mixture", {Prior(GaussianMeanMixture{{0.3, 0.7}, {3.0, 2.0}}), {-1.2, 0.9}}},
      {"weight_mixture", {Prior(GaussianWeightMixture{{-1.0, 1.0}, {4.0, 4.0}}), {0.3, -0.2}}},
      {"exp_family", {Prior(ExpFamily{{Statistic::Linear, Statistic::LogCosh}, 1.0}), {0.2, 0.8}}},
      {"atoms", {Prior(Atoms{{-1.0, 0.5, 2.0}, {0.3, 0.5, 0.2}}), {}}},
  };
}

}  // namespace

TEST_SUITE("equilibrium") {
  TEST_CASE("posterior moments") {
    CHECK(posterior_moments(2.0, gauss(1.0), 1.0).mean == doctest::Approx(1.0).epsilon(1e-14));
    const auto pm = posterior_moments(2.0, gauss(1.0), 1.0);
    CHECK(pm.second - pm.mean * pm.mean == doctest::Approx(0.5).epsilon(1e-13));
    const PriorAt rad{Prior(Atoms{{-1.0, 1.0}, {0.5, 0.5}}), {}};
    CHECK(posterior_moments(0.5, rad, 1.0).mean == doctest::Approx(0.4621171573).epsilon(1e-10));
    CHECK(posterior_moments(0.5, rad, 1.0).second == doctest::Approx(1.0).epsilon(1e-14));
    for (const auto& f : {gauss(2.0), PriorAt{Prior(GaussianMeanMixture{{0.5, 0.5}, {1.0, 1.0}}), {-1.0, 1.0}},
                          PriorAt{Prior(ExpFamily{{Statistic::Quadratic, Statistic::LogCosh}, 1.0}), {0.0, 1.5}}, rad})
      CHECK(std::abs(posterior_moments(0.0, f, 1.3).mean) <= 1e-12);
    // exponential-family posterior against a quadratic-statistic Gaussian: N(mu, 1/(b - 2a2))
    const PriorAt ef{Prior(ExpFamily{{Statistic::Linear, Statistic::Quadratic}, 1.0}), {0.5, 0.25}};
    const double prec = 1.0 - 2 * 0.25, mu = 0.5 / prec, om = 2.0, y = 0.7;
    const double post_prec = prec + om;
    CHECK(posterior_moments(y, ef, om).mean == doctest::Approx((prec * mu + om * y) / post_prec).epsilon(1e-10));
    const double lm = log_marginal(y, ef, om), v = 1 / prec + 1 / om;
    CHECK(lm == doctest::Approx(-0.5 * std::log(2 * M_PI * v) - (y - mu) * (y - mu) / (2 * v)).epsilon(1e-10));
  }

  TEST_CASE("mse pair") {
    for (double om : {0.3, 1.0, 4.0}) {
      const auto m = mse_pair({gauss(1.0), gauss(1.0), om, om});
      CHECK(m.mse == doctest::Approx(1.0 / (1.0 + om)).epsilon(1e-12));
      CHECK(m.mse_star == doctest::Approx(1.0 / (1.0 + om)).epsilon(1e-12));
    }
    for (const auto& f : matched_families()) {
      CAPTURE(f.name);
      const auto m = mse_pair({f.at, f.at, 1.7, 1.7});
      CHECK(std::abs(m.mse - m.mse_star) <= 1e-9);
      CHECK(m.mse >= 0.0);
    }
    const PriorAt mix{Prior(GaussianMeanMixture{{0.5, 0.5}, {2.0, 2.0}}), {-1.0, 1.0}};
    double prev = INFINITY;
    for (double om : {1e2, 1e4, 1e6}) {
      const auto m = mse_pair({mix, mix, om, om});
      CHECK(m.mse < prev);
      prev = m.mse;
    }
    CHECK(prev < 2e-6);
  }

  TEST_CASE("fixed point: matched gaussian") {
    const auto s = solve_fixed_point(2.0, 1.0, gauss(1.0), gauss(1.0));
    CHECK(s.omega == doctest::Approx(std::sqrt(2.0)).epsilon(1e-10));
    CHECK(s.omega_star == doctest::Approx(std::sqrt(2.0)).epsilon(1e-10));
    CHECK(s.mse == doctest::Approx(0.4142135624).epsilon(1e-9));
    CHECK(s.mse_star == doctest::Approx(0.4142135624).epsilon(1e-9));
    CHECK(std::abs(s.omega - 2.0 / (1.0 + s.mse)) <= 1e-10);
    CHECK(std::abs(s.omega_star - 2.0 / (1.0 + s.mse_star)) <= 1e-10);
    CHECK(!s.trace.empty());
    CHECK(s.sweeps == s.trace.size());
  }

  TEST_CASE("fixed point: mismatched gaussian") {
    const double delta = 2, sigma2 = 1, ts2 = 1, t2 = 2;
    const double x = (-1 + std::sqrt(17.0)) / 4;
    const double mse_star = (sigma2 * t2 * t2 + delta * x * x * ts2) / (delta * (x + t2) * (x + t2) - t2 * t2);
    const auto s = solve_fixed_point(delta, sigma2, gauss(ts2), gauss(t2));
    CHECK(std::abs(1.0 / s.omega - x) <= 1e-8);
    CHECK(std::abs(s.mse_star - mse_star) <= 1e-8);
    CHECK(s.mse_star == doctest::Approx(0.4552).epsilon(1e-4));
  }

  TEST_CASE("fixed point: uninformative channel") {
    const auto s = solve_fixed_point(2.0, 1e7, gauss(0.6), gauss(0.6));
    CHECK(s.omega < 1e-6);
    CHECK(std::abs(s.mse - 0.6) <= 1e-6);
  }

  TEST_CASE("fixed point: non-gaussian families converge") {
    for (const auto& f : matched_families()) {
      if (!f.at.prior.has_density()) continue;
      CAPTURE(f.name);
      const auto s = solve_fixed_point(1.5, 0.8, f.at, f.at);
      CHECK(std::abs(s.omega - 1.5 / (0.8 + s.mse)) <= 1e-10);
      CHECK(std::abs(s.omega_star - 1.5 / (0.8 + s.mse_star)) <= 1e-10);
      CHECK(std::abs(s.omega - s.omega_star) <= 1e-8);
    }
  }

  TEST_CASE("free energy: gaussian closed form") {
    for (auto [t2, ts2] : {std::pair{1.0, 1.0}, std::pair{2.0, 1.0}, std::pair{0.5, 1.5}}) {
      for (auto [om, oms] : {std::pair{1.0, 1.0}, std::pair{0.7, 2.3}}) {
        const double f = free_energy(om, oms, gauss(ts2), gauss(t2), 2.0, 1.0);
        CHECK(std::abs(f - gaussian_free_energy(om, oms, t2, ts2, 2.0, 1.0)) <= 1e-8);
      }
    }
  }

  TEST_CASE("free energy stationarity at the fixed point") {
    const PriorAt gs{Prior(GaussianMeanMixture{{0.4, 0.6}, {3.0, 3.0}}), {-1.0, 0.8}};
    for (const auto& [gstar, g] : {std::pair{gauss(1.0), gauss(1.0)}, std::pair{gauss(1.0), gauss(2.0)}, std::pair{gs, gauss(1.0)}, std::pair{gs, gs}}) {
      const double delta = 2.0, sigma2 = 0.7, h = 1e-5;
      const auto s = solve_fixed_point(delta, sigma2, gstar, g);
      auto f = [&](double om, double oms) { return free_energy(om, oms, gstar, g, delta, sigma2); };
      const double dw = (f(s.omega + h, s.omega_star) - f(s.omega - h, s.omega_star)) / (2 * h);
      const double dws = (f(s.omega, s.omega_star + h) - f(s.omega, s.omega_star - h)) / (2 * h);
      CHECK(std::abs(dw) <= 1e-6);
      CHECK(std::abs(dws) <= 1e-6);
      CHECK(s.free_energy == doctest::Approx(f(s.omega, s.omega_star)).epsilon(1e-14));
    }
  }

  TEST_CASE("I-MMSE slope") {
    const PriorAt gs{Prior(GaussianMeanMixture{{0.4, 0.6}, {3.0, 3.0}}), {-1.0, 0.8}};
    for (const auto& [gstar, g] : {std::pair{gauss(1.0), gauss(2.0)}, std::pair{gs, gs}}) {
      const double delta = 2.0, s0 = 1.3, h = 1e-3;
      auto F = [&](double s) { return solve_fixed_point(delta, 1.0 / s, gstar, g).free_energy; };
      const double slope = (F(s0 - 2 * h) - 8 * F(s0 - h) + 8 * F(s0 + h) - F(s0 + 2 * h)) / (12 * h);
      const auto sol = solve_fixed_point(delta, 1.0 / s0, gstar, g);
      CHECK(std::abs(slope - 0.5 * delta * sol.ymse_star) <= 1e-4);
    }
  }

  TEST_CASE("grad_F") {
    const double delta = 2.0, sigma2 = 1.0;
    for (const auto& f : matched_families()) {
      if (f.at.alpha.empty()) continue;
      CAPTURE(f.name);
      const auto g = grad_F(f.at.alpha, delta, sigma2, f.at, f.at.prior);
      for (double v : g) CHECK(std::abs(v) <= 1e-6);
    }
    // symmetric truth centered at the location parameter
    const PriorAt sym{Prior(GaussianMeanMixture{{0.5, 0.5}, {2.0, 2.0}}), {0.3 - 1.0, 0.3 + 1.0}};
    const std::vector<double> a{0.3};
    CHECK(std::abs(grad_F(a, delta, sigma2, sym, Prior(GaussianLocation{1.0}))[0]) <= 1e-10);
    // finite differences of the free energy in alpha
    const PriorAt truth{Prior(GaussianMeanMixture{{0.3, 0.7}, {3.0, 2.0}}), {-1.2, 0.9}};
    const std::vector<Family> models{
        {"location", {Prior(GaussianLocation{0.8}), {0.1}}},
        {"weight_mixture", {Prior(GaussianWeightMixture{{-1.0, 1.0}, {4.0, 4.0}}), {0.3, -0.2}}},
        {"exp_family", {Prior(ExpFamily{{Statistic::Linear, Statistic::LogCosh}, 1.0}), {0.2, 0.8}}},
    };
    for (const auto& m : models) {
      CAPTURE(m.name);
      const auto g = grad_F(m.at.alpha, delta, sigma2, truth, m.at.prior);
      const double h = 1e-4;
      for (std::size_t k = 0; k < m.at.alpha.size(); ++k) {
        auto F = [&](double shift) {
          PriorAt p = m.at;
          p.alpha[k] += shift;
          return solve_fixed_point(delta, sigma2, truth, p).free_energy;
        };
        CHECK(std::abs((F(h) - F(-h)) / (2 * h) - g[k]) <= 1e-5);
      }
    }
  }

  TEST_CASE("eta quantities against the oracle") {
    for (double lambda : {1.0, 2.5}) {
      const double delta = 2.0, sigma2 = 0.8;
      const auto s = solve_fixed_point(delta, sigma2, gauss(1 / lambda), gauss(1 / lambda));
      const OracleParams op{lambda, sigma2, delta, 1 / lambda};
      const auto law = mp_quadrature(delta);
      const double tti0 = ceta_stationary(0.0, op, law) - ceta_stationary_limit(op, law);
      CHECK(std::abs(sigma2 * sigma2 / delta * tti0 - s.ymse) <= 1e-6);
      CHECK(std::abs(s.c_eta_tti0 - tti0) <= 1e-6);
      CHECK(std::abs(s.c_eta_inf - ceta_stationary_limit(op, law)) <= 1e-6);
    }
  }

  TEST_CASE("long-time dmft second moment equals the equilibrium value") {
    const auto p = ModelParams::from_dims(800, 400, 1.0, 1.0, 0.01, 10.0);
    const auto k = linear_gaussian_dmft(p, 1.0, 1.0);
    const auto s = solve_fixed_point(2.0, 1.0, gauss(1.0), gauss(1.0));
    const double post_mean2 = 1.0 - s.mse;  // E<theta>^2 in the matched case
    CHECK(std::abs(k.C_theta(1000, 1000) - (s.mse + post_mean2)) <= 0.01);
  }

  TEST_CASE("non-convergence is reported") {
    FixedPointOptions o;
    o.max_sweeps = 2;
    CHECK_THROWS_AS(solve_fixed_point(2.0, 1.0, gauss(1.0), gauss(2.0), o), ConvergenceError);
  }
}
