#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "dmftlab/errors.hpp"
#include "dmftlab/model.hpp"
#include "dmftlab/rng.hpp"
#include "doctest.h"

using namespace dmftlab;

namespace {

std::vector<std::pair<Prior, std::vector<double>>> all_families() {
  return {
      {Prior(GaussianFixed{1.7}), {}},
      {Prior(GaussianLocation{0.8}), {0.3}},
      {Prior(GaussianMeanMixture{{0.3, 0.7}, {2.0, 0.5}}), {-1.0, 1.5}},
      {Prior(GaussianWeightMixture{{-1.0, 0.5, 2.0}, {1.0, 3.0, 0.7}}), {0.2, -0.4, 0.9}},
      {Prior(ExpFamily{{Statistic::Linear, Statistic::LogCosh}, 1.0}), {0.4, 1.2}},
      {Prior(ExpFamily{{Statistic::Linear, Statistic::Quadratic}, 1.0}), {0.5, -0.3}},
  };
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("drift examples") {
    CHECK(drift_s(1.0, {}, Prior(GaussianFixed{1.0})) == -1.0);
    const std::vector<double> a2{2.0};
    CHECK(drift_s(2.0, a2, Prior(GaussianLocation{1.0})) == 0.0);
    const std::vector<double> a0{0.0};
    CHECK(drift_s(1.0, a0, Prior(GaussianMeanMixture{{1.0}, {2.0}})) == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK_THROWS_AS(drift_s(NAN, {}, Prior(GaussianFixed{1.0})), DomainError);
    const std::vector<double> bad{NAN};
    CHECK_THROWS_AS(drift_s(0.0, bad, Prior(GaussianLocation{1.0})), DomainError);
  }

  TEST_CASE("gradient map examples") {
    const Prior loc(GaussianLocation{1.0});
    const std::vector<double> a0{0.0}, s13{1.0, 3.0};
    CHECK(gradient_map_G(a0, s13, loc)[0] == doctest::Approx(2.0));
    const std::vector<double> ac{0.37}, sc{0.37};
    CHECK(gradient_map_G(ac, sc, loc)[0] == 0.0);
    const Prior wm(GaussianWeightMixture{{0.5}, {2.0}});
    const std::vector<double> aw{0.8}, sw{-1.0, 0.2, 3.0};
    CHECK(std::abs(gradient_map_G(aw, sw, wm)[0]) <= 1e-15);
    CHECK_THROWS_AS(gradient_map_G(a0, std::vector<double>{}, loc), DomainError);
  }

  TEST_CASE("regularizer enters the gradient map") {
    const Prior loc(GaussianLocation{1.0});
    const SmoothHinge R{1.0, 0.5};
    const std::vector<double> a{2.0}, s{2.0};
    // |a| - D = 1 > eps: linear regime, slope 1
    CHECK(gradient_map_G(a, s, loc, R)[0] == doctest::Approx(-1.0));
  }

  TEST_CASE("score matches finite differences of log g for every family") {
    const CounterRng rng(11, 0);
    for (const auto& [prior, alpha] : all_families()) {
      for (int i = 0; i < 40; ++i) {
        const double th = -4.0 + 8.0 * rng.uniform(static_cast<std::uint64_t>(i));
        const double h = 1e-5;
        const double fd = (prior.log_density(th + h, alpha) - prior.log_density(th - h, alpha)) / (2 * h);
        CHECK_MESSAGE(rel_err(prior.score(th, alpha), fd) < 1e-6, prior.name());
        const double fd2 = (prior.score(th + h, alpha) - prior.score(th - h, alpha)) / (2 * h);
        CHECK_MESSAGE(rel_err(prior.score_derivative(th, alpha), fd2) < 1e-6, prior.name());
      }
    }
  }

  TEST_CASE("alpha gradient matches finite differences of log g for every family") {
    const CounterRng rng(12, 0);
    for (const auto& [prior, alpha] : all_families()) {
      std::vector<double> g(alpha.size());
      for (int i = 0; i < 20; ++i) {
        const double th = -3.0 + 6.0 * rng.uniform(static_cast<std::uint64_t>(i));
        prior.alpha_gradient(th, alpha, g);
        for (std::size_t k = 0; k < alpha.size(); ++k) {
          auto ap = alpha, am = alpha;
          const double h = 1e-5;
          ap[k] += h;
          am[k] -= h;
          const double fd = (prior.log_density(th, ap) - prior.log_density(th, am)) / (2 * h);
          CHECK_MESSAGE(rel_err(g[k], fd) < 1e-6, prior.name() << " k=" << k);
        }
      }
    }
  }

  TEST_CASE("weight-mixture alpha gradient sums to zero") {
    const Prior wm(GaussianWeightMixture{{-2.0, 0.0, 1.0, 4.0}, {1.0, 2.0, 0.5, 3.0}});
    const std::vector<double> a{0.3, -1.0, 2.0, 0.1};
    std::vector<double> g(4);
    for (double th : {-10.0, -1.0, 0.0, 0.7, 3.9, 25.0}) {
      wm.alpha_gradient(th, a, g);
      CHECK(std::abs(std::accumulate(g.begin(), g.end(), 0.0)) <= 1e-12);
    }
  }

  TEST_CASE("drift obeys a linear growth bound on a box") {
    const CounterRng rng(13, 0);
    for (const auto& [prior, alpha] : all_families()) {
      double anorm = 0.0;
      for (double v : alpha) anorm += v * v;
      anorm = std::sqrt(anorm);
      double worst = 0.0;
      for (int i = 0; i < 200; ++i) {
        const double th = -50.0 + 100.0 * rng.uniform(static_cast<std::uint64_t>(i));
        worst = std::max(worst, std::abs(prior.score(th, alpha)) / (1.0 + std::abs(th) + anorm));
      }
      CHECK_MESSAGE(worst < 10.0, prior.name());
    }
  }

  TEST_CASE("exp-family log partition against the Gaussian closed form") {
    // log g = a1 t + a2 t^2 - b t^2/2 - A, a Gaussian with precision p = b - 2 a2
    const double b = 1.3, a1 = 0.7, a2 = -0.4;
    const Prior ef(ExpFamily{{Statistic::Linear, Statistic::Quadratic}, b});
    const std::vector<double> a{a1, a2};
    const double p = b - 2 * a2;
    const double A = 0.5 * std::log(2 * std::numbers::pi / p) + a1 * a1 / (2 * p);
    CHECK(ef.log_partition(a) == doctest::Approx(A).epsilon(1e-11));
    CHECK(ef.mean(a) == doctest::Approx(a1 / p).epsilon(1e-10));
    CHECK(ef.second_moment(a) == doctest::Approx(1 / p + a1 * a1 / (p * p)).epsilon(1e-10));
    const auto ms = ef.mean_statistics(a);
    CHECK(ms[0] == doctest::Approx(a1 / p).epsilon(1e-10));
    const std::vector<double> bad{0.0, 1.0};
    CHECK_THROWS_AS(ef.check_alpha(bad), DomainError);
  }

  TEST_CASE("prior sampler moments") {
    const CounterRng rng(14, 0), nrng(14, 1);
    for (const auto& [prior, alpha] : all_families()) {
      const PriorSampler draw(prior, alpha);
      const int n = 40000;
      double m1 = 0, m2 = 0;
      for (int i = 0; i < n; ++i) {
        const double x = draw(rng.uniform(static_cast<std::uint64_t>(i)), nrng.normal(static_cast<std::uint64_t>(i)));
        m1 += x;
        m2 += x * x;
      }
      m1 /= n;
      m2 /= n;
      const double var = prior.second_moment(alpha) - prior.mean(alpha) * prior.mean(alpha);
      CHECK_MESSAGE(std::abs(m1 - prior.mean(alpha)) < 5 * std::sqrt(var / n), prior.name());
      CHECK_MESSAGE(std::abs(m2 - prior.second_moment(alpha)) < 0.05 * prior.second_moment(alpha), prior.name());
    }
    const Prior atoms(Atoms{{-1.0, 1.0}, {0.5, 0.5}});
    const PriorSampler ad(atoms, {});
    for (int i = 0; i < 100; ++i) CHECK(std::abs(ad(rng.uniform(static_cast<std::uint64_t>(i)), 0.0)) == 1.0);
  }

  TEST_CASE("smooth hinge is C1 with linear growth") {
    const SmoothHinge R{2.0, 0.5};
    auto val = [&](double x) { return R.value(std::vector<double>{x}); };
    auto grad = [&](double x) {
      std::vector<double> g(1);
      R.gradient(std::vector<double>{x}, g);
      return g[0];
    };
    CHECK(val(1.9) == 0.0);
    CHECK(val(2.5) == doctest::Approx(0.5 / 3));
    CHECK(val(2.0 + 0.5 - 1e-9) == doctest::Approx(val(2.0 + 0.5 + 1e-9)).epsilon(1e-8));
    CHECK(grad(2.5 - 1e-9) == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(grad(10.0) == doctest::Approx(1.0));
    CHECK(val(10.0) >= 10.0 - 2.0 - 1.0);
    for (double x : {2.1, 2.3, 3.0, -2.4}) {
      const double h = 1e-6;
      CHECK(grad(x) == doctest::Approx((val(x + h) - val(x - h)) / (2 * h)).epsilon(1e-6));
    }
  }

  TEST_CASE("model params invariants") {
    CHECK_THROWS_AS(ModelParams::from_dims(10, 5, 0.0, 1.0, 0.1, 1.0), DomainError);
    CHECK_THROWS_AS(ModelParams::from_dims(10, 5, 1.0, 1.0, 0.3, 1.0), DomainError);
    CHECK_THROWS_AS(ModelParams::from_dims(0, 5, 1.0, 1.0, 0.1, 1.0), DomainError);
    const auto p = ModelParams::from_dims(10, 4, 1.0, 1.0, 0.1, 1.0);
    CHECK(p.delta == 2.5);
    CHECK(p.n_steps() == 10);
  }

  TEST_CASE("instances are pure functions of the seed") {
    const auto p = ModelParams::from_dims(30, 20, 0.5, 2.0, 0.1, 1.0);
    PriorSpec spec{Prior(GaussianLocation{1.0}), {0.0}, Prior(GaussianLocation{1.0}), {1.0}, InitLaw::StandardNormal, {}};
    const auto a = sample_instance(p, spec, 99), b = sample_instance(p, spec, 99), c = sample_instance(p, spec, 100);
    CHECK(a.X == b.X);
    CHECK(a.theta_star == b.theta_star);
    CHECK(a.eps == b.eps);
    CHECK(a.theta0 == b.theta0);
    CHECK(a.X != c.X);
    CHECK((a.y - a.X * a.theta_star - a.eps).cwiseAbs().maxCoeff() <= 1e-14);
  }

  TEST_CASE("noiseless scalar instance") {
    ModelParams p = ModelParams::from_dims(1, 1, 1.0, 1.0, 0.1, 1.0);
    p.sigma2 = 0.0;
    PriorSpec spec{Prior(GaussianFixed{1.0}), {}, Prior(GaussianFixed{1.0}), {}, InitLaw::Zero, {}};
    const auto inst = sample_instance(p, spec, 5);
    CHECK(inst.y(0) == inst.X(0, 0) * inst.theta_star(0));
  }

  TEST_CASE("design entries have the right scale") {
    const auto p = ModelParams::from_dims(2000, 1000, 1.0, 1.0, 0.1, 1.0);
    PriorSpec spec{Prior(GaussianFixed{1.0}), {}, Prior(GaussianFixed{1.0}), {}, InitLaw::Zero, {}};
    for (Design design : {Design::Gaussian, Design::Rademacher}) {
      const auto inst = sample_instance(p, spec, 7, design);
      const double nd = 2000.0 * 1000.0;
      const Eigen::ArrayXXd z = inst.X.array() * std::sqrt(1000.0);
      CHECK(std::abs(z.mean()) <= 4.0 / std::sqrt(nd));
      CHECK(std::abs(z.square().mean() - 1.0) <= 5.0 / std::sqrt(nd));
    }
  }

  TEST_CASE("initial laws") {
    const auto p = ModelParams::from_dims(10, 5000, 1.0, 1.0, 0.1, 1.0);
    PriorSpec spec{Prior(GaussianFixed{4.0}), {}, Prior(GaussianFixed{1.0}), {}, InitLaw::Zero, {}};
    CHECK(sample_instance(p, spec, 1).theta0.cwiseAbs().maxCoeff() == 0.0);
    spec.init = InitLaw::StandardNormal;
    CHECK(sample_instance(p, spec, 1).theta0.squaredNorm() / 5000 == doctest::Approx(1.0).epsilon(0.1));
    spec.init = InitLaw::FromPrior;
    CHECK(sample_instance(p, spec, 1).theta0.squaredNorm() / 5000 == doctest::Approx(0.25).epsilon(0.1));
  }
}
