#include "dmftlab/equilibrium.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>

#include "dmftlab/errors.hpp"
#include "dmftlab/quadrature.hpp"

namespace dmftlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double lse(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double stat_value(Statistic s, double t) {
  switch (s) {
    case Statistic::Linear: return t;
    case Statistic::Quadratic: return t * t;
    case Statistic::LogCosh: {
      const double a = std::abs(t);
      return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
    }
  }
  return 0.0;
}

struct Summary {
  double mean = 0, second = 0, log_marginal = 0;
  std::vector<double> alpha_grad;  // posterior mean of grad_alpha log g
};

// Scalar-channel computations for one prior at fixed alpha; expensive
// per-prior quantities (log-partition, prior statistic means) are computed once.
class ChannelPrior {
 public:
  explicit ChannelPrior(const PriorAt& g) : g_(g) {
    g.prior.check_alpha(g.alpha);
    if (auto c = g.prior.gaussian_components(g.alpha)) {
      comps_ = *c;
    } else if (auto* a = std::get_if<Atoms>(&g.prior.family())) {
      atoms_ = *a;
      const double ps = std::accumulate(a->probs.begin(), a->probs.end(), 0.0);
      for (double& p : atoms_->probs) p /= ps;
    } else if (auto* f = std::get_if<ExpFamily>(&g.prior.family())) {
      ef_ = *f;
      logA_ = g.prior.log_partition(g.alpha);
      stat_means_ = g.prior.mean_statistics(g.alpha);
      L_ = g.prior.support_radius(g.alpha);
    } else {
      throw UnsupportedError("scalar channel: improper prior " + g.prior.name());
    }
  }

  Summary summarize(double y, double omega, bool want_grad) const {
    if (!(omega > 0.0)) throw DomainError("scalar channel: omega must be positive");
    Summary out;
    if (!comps_.empty()) {
      const std::size_t K = comps_.size();
      std::vector<double> lw(K), pm(K), pv(K);
      for (std::size_t k = 0; k < K; ++k) {
        const auto& c = comps_[k];
        const double v = 1.0 / c.precision + 1.0 / omega;
        const double r = y - c.mean;
        lw[k] = std::log(c.weight) - 0.5 * (kLog2Pi + std::log(v)) - 0.5 * r * r / v;
        pm[k] = (c.precision * c.mean + omega * y) / (c.precision + omega);
        pv[k] = 1.0 / (c.precision + omega);
      }
      out.log_marginal = lse(lw);
      for (std::size_t k = 0; k < K; ++k) {
        const double p = std::exp(lw[k] - out.log_marginal);
        lw[k] = p;
        out.mean += p * pm[k];
        out.second += p * (pm[k] * pm[k] + pv[k]);
      }
      if (want_grad) out.alpha_grad = gaussian_alpha_grad(lw, pm, out.mean);
      return out;
    }
    if (atoms_) {
      const std::size_t K = atoms_->values.size();
      std::vector<double> lw(K);
      for (std::size_t k = 0; k < K; ++k) {
        const double r = y - atoms_->values[k];
        lw[k] = std::log(atoms_->probs[k]) + 0.5 * (std::log(omega) - kLog2Pi) - 0.5 * omega * r * r;
      }
      out.log_marginal = lse(lw);
      for (std::size_t k = 0; k < K; ++k) {
        const double p = std::exp(lw[k] - out.log_marginal);
        out.mean += p * atoms_->values[k];
        out.second += p * atoms_->values[k] * atoms_->values[k];
      }
      return out;
    }
    return exp_family(y, omega, want_grad);
  }

  // outer rule over theta ~ g: (node, weight)
  std::vector<std::pair<double, double>> outer_rule(std::size_t n_gh) const {
    std::vector<std::pair<double, double>> r;
    if (!comps_.empty()) {
      const auto gh = gauss_hermite_normal(n_gh);
      for (const auto& c : comps_)
        for (std::size_t i = 0; i < gh.nodes.size(); ++i)
          r.emplace_back(c.mean + gh.nodes[i] / std::sqrt(c.precision), c.weight * gh.weights[i]);
      return r;
    }
    if (atoms_) {
      for (std::size_t k = 0; k < atoms_->values.size(); ++k) r.emplace_back(atoms_->values[k], atoms_->probs[k]);
      return r;
    }
    static const QuadratureRule gl = gauss_legendre(256);
    double tot = 0.0;
    for (std::size_t i = 0; i < gl.nodes.size(); ++i) {
      const double t = L_ * gl.nodes[i];
      const double w = L_ * gl.weights[i] * std::exp(energy(t) - logA_);
      r.emplace_back(t, w);
      tot += w;
    }
    if (std::abs(tot - 1.0) > 1e-9) throw PrecisionError("exp_family outer rule: mass " + std::to_string(tot));
    for (auto& [t, w] : r) w /= tot;
    return r;
  }

 private:
  std::vector<double> gaussian_alpha_grad(const std::vector<double>& post_w, const std::vector<double>& post_m,
                                          double mean) const {
    const auto& fam = g_.prior.family();
    const auto& a = g_.alpha;
    std::vector<double> gr(a.size(), 0.0);
    if (auto* f = std::get_if<GaussianLocation>(&fam)) {
      gr[0] = (mean - a[0]) / (f->scale * f->scale);
    } else if (auto* f = std::get_if<GaussianMeanMixture>(&fam)) {
      for (std::size_t i = 0; i < a.size(); ++i) gr[i] = post_w[i] * f->precisions[i] * (post_m[i] - a[i]);
    } else if (std::holds_alternative<GaussianWeightMixture>(fam)) {
      for (std::size_t i = 0; i < a.size(); ++i) gr[i] = post_w[i] - comps_[i].weight;
    }
    return gr;
  }

  double energy(double t) const {
    double e = -0.5 * ef_->base_precision * t * t;
    for (std::size_t k = 0; k < ef_->statistics.size(); ++k) e += g_.alpha[k] * stat_value(ef_->statistics[k], t);
    return e;
  }

  Summary exp_family(double y, double omega, bool want_grad) const {
    auto post = [&](double t) { return energy(t) - 0.5 * omega * (y - t) * (y - t); };
    const double spread = 12.0 / std::sqrt(omega);
    double lo = std::min(-L_, y - spread), hi = std::max(L_, y + spread);
    // coarse scan, then golden section inside the best cell pair
    constexpr int kScan = 256;
    const double cell = (hi - lo) / kScan;
    double peak = -INFINITY, mode = 0.0;
    for (int i = 0; i <= kScan; ++i) {
      const double t = lo + cell * i;
      const double e = post(t);
      if (e > peak) peak = e, mode = t;
    }
    {
      constexpr double r = 0.6180339887498949;
      double a = mode - cell, b = mode + cell;
      double x1 = b - r * (b - a), x2 = a + r * (b - a), f1 = post(x1), f2 = post(x2);
      for (int it = 0; it < 60 && b - a > 1e-10 * (1.0 + std::abs(mode)); ++it) {
        if (f1 < f2) a = x1, x1 = x2, f1 = f2, x2 = a + r * (b - a), f2 = post(x2);
        else b = x2, x2 = x1, f2 = f1, x1 = b - r * (b - a), f1 = post(x1);
      }
      const double t = 0.5 * (a + b), e = post(t);
      if (e > peak) peak = e, mode = t;
    }
    // shrink to where the integrand has dropped by e^-60
    auto edge = [&](double dir) {
      double step = 0.05 * (hi - lo), t = mode;
      while (post(t + dir * step) > peak - 60.0) t += dir * step;
      return t + dir * step;
    };
    const double a = edge(-1.0), b = edge(1.0);
    const std::size_t K = ef_->statistics.size();
    static const QuadratureRule gl128 = gauss_legendre(128), gl256 = gauss_legendre(256);
    auto moments = [&](std::size_t n) {
      const auto& gl = n == 128 ? gl128 : gl256;
      std::vector<double> m(3 + K, 0.0);
      const double c = 0.5 * (a + b), h = 0.5 * (b - a);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = c + h * gl.nodes[i];
        const double w = h * gl.weights[i] * std::exp(post(t) - peak);
        m[0] += w;
        m[1] += w * t;
        m[2] += w * t * t;
        for (std::size_t k = 0; k < K; ++k) m[3 + k] += w * stat_value(ef_->statistics[k], t);
      }
      return m;
    };
    const auto m1 = moments(128), m2 = moments(256);
    for (std::size_t j = 0; j < m1.size(); ++j) {
      const double scale = std::max(std::abs(m2[j]), m2[0] * (1.0 + std::abs(mode) * std::abs(mode)));
      if (std::abs(m1[j] - m2[j]) > 1e-11 * scale)
        throw PrecisionError("exp_family posterior quadrature did not converge at y=" + std::to_string(y));
    }
    Summary out;
    out.mean = m2[1] / m2[0];
    out.second = m2[2] / m2[0];
    out.log_marginal = peak + std::log(m2[0]) - logA_ + 0.5 * (std::log(omega) - kLog2Pi);
    if (want_grad) {
      out.alpha_grad.resize(K);
      for (std::size_t k = 0; k < K; ++k) out.alpha_grad[k] = m2[3 + k] / m2[0] - stat_means_[k];
    }
    return out;
  }

  const PriorAt& g_;
  std::vector<GaussianComponent> comps_;
  std::optional<Atoms> atoms_;
  std::optional<ExpFamily> ef_;
  double logA_ = 0, L_ = 0;
  std::vector<double> stat_means_;
};

struct ChannelAverages {
  double mse = 0, mse_star = 0, mean_log_marginal = 0;
  std::vector<double> alpha_grad;
};

// E over theta* ~ g*, z ~ N(0, 1/omega*) of posterior functionals under (g, omega).
// The prior-dependent setup is built once and reused across omega values.
class Channel {
 public:
  Channel(const PriorAt& g_star, const PriorAt& g, std::size_t n_gh)
      : truth_(g_star), nominal_(g), outer_(truth_.outer_rule(n_gh)), gh_(gauss_hermite_normal(n_gh)),
        K_(g.alpha.size()) {}

  ChannelAverages operator()(double omega, double omega_star, bool want_grad) const {
    if (!(omega > 0.0) || !(omega_star > 0.0)) throw DomainError("scalar channel: precisions must be positive");
    const double zs = 1.0 / std::sqrt(omega_star);
    ChannelAverages av;
    av.alpha_grad.assign(K_, 0.0);
    for (const auto& [ts, wt] : outer_) {
      for (std::size_t i = 0; i < gh_.nodes.size(); ++i) {
        const double w = wt * gh_.weights[i];
        if (w == 0.0) continue;
        const double y = ts + zs * gh_.nodes[i];
        const Summary s = nominal_.summarize(y, omega, want_grad);
        av.mse += w * (s.second - s.mean * s.mean);
        av.mse_star += w * (ts - s.mean) * (ts - s.mean);
        av.mean_log_marginal += w * s.log_marginal;
        for (std::size_t k = 0; k < s.alpha_grad.size(); ++k) av.alpha_grad[k] += w * s.alpha_grad[k];
      }
    }
    return av;
  }

 private:
  ChannelPrior truth_, nominal_;
  std::vector<std::pair<double, double>> outer_;
  QuadratureRule gh_;
  std::size_t K_;
};

ChannelAverages channel_averages(const PriorAt& g_star, const PriorAt& g, double omega, double omega_star,
                                 std::size_t n_gh, bool want_grad) {
  return Channel(g_star, g, n_gh)(omega, omega_star, want_grad);
}

double free_energy_from(double mean_log_marginal, double omega, double omega_star, double delta, double sigma2) {
  const double s = 1.0 / sigma2;
  return -mean_log_marginal - 0.5 * (2.0 * delta + std::log(2.0 * std::numbers::pi / omega) -
                                     delta * std::log(delta * s / omega) + (1.0 - delta) * omega / omega_star +
                                     (omega / s) * (omega / omega_star - 2.0));
}

}  // namespace

PosteriorMoments posterior_moments(double y, const PriorAt& g, double omega) {
  if (!std::isfinite(y)) throw DomainError("posterior_moments: non-finite y");
  const Summary s = ChannelPrior(g).summarize(y, omega, false);
  return {s.mean, s.second};
}

double log_marginal(double y, const PriorAt& g, double omega) {
  return ChannelPrior(g).summarize(y, omega, false).log_marginal;
}

MsePair mse_pair(const ScalarChannelSpec& spec) {
  const auto av = channel_averages(spec.g_star, spec.g, spec.omega, spec.omega_star, spec.hermite_nodes, false);
  return {std::max(0.0, av.mse), std::max(0.0, av.mse_star)};
}

EquilibriumSolution solve_fixed_point(double delta, double sigma2, const PriorAt& g_star, const PriorAt& g,
                                      const FixedPointOptions& opt) {
  if (!(delta > 0.0) || !(sigma2 > 0.0)) throw DomainError("solve_fixed_point: delta and sigma2 must be positive");
  EquilibriumSolution sol;
  double w = delta / sigma2, ws = w;
  double damping = opt.damping;
  double prev = INFINITY;
  const Channel channel(g_star, g, 64);
  for (std::size_t sweep = 0;; ++sweep) {
    const auto av = channel(w, ws, false);
    const double fw = delta / (sigma2 + av.mse), fws = delta / (sigma2 + av.mse_star);
    const double r1 = std::abs(w - fw), r2 = std::abs(ws - fws);
    sol.trace.push_back({r1, r2});
    const double r = std::max(r1, r2);
    if (r <= opt.tolerance) {
      sol.omega = w;
      sol.omega_star = ws;
      sol.mse = av.mse;
      sol.mse_star = av.mse_star;
      sol.sweeps = sweep + 1;
      sol.free_energy = free_energy_from(av.mean_log_marginal, w, ws, delta, sigma2);
      break;
    }
    if (sweep + 1 >= opt.max_sweeps) {
      std::ostringstream os;
      os << "solve_fixed_point: no convergence after " << opt.max_sweeps << " sweeps; last residuals " << r1 << ", "
         << r2;
      throw ConvergenceError(os.str());
    }
    // halve the step when the residual grows (oscillation)
    if (r > prev) damping = std::max(0.5 * damping, 1e-3);
    prev = r;
    w = (1.0 - damping) * w + damping * fw;
    ws = (1.0 - damping) * ws + damping * fws;
  }
  // c_eta^tti(0) = delta/sigma2 - omega,  c_eta(inf) = omega^2/omega*
  sol.c_eta_tti0 = delta / sigma2 - sol.omega;
  sol.c_eta_inf = sol.omega * sol.omega / sol.omega_star;
  const double s4 = sigma2 * sigma2;
  sol.ymse = s4 / delta * sol.c_eta_tti0;
  sol.ymse_star = sigma2 + (s4 * sol.omega / delta) * (sol.omega / sol.omega_star - 2.0);
  return sol;
}

double free_energy(double omega, double omega_star, const PriorAt& g_star, const PriorAt& g, double delta,
                   double sigma2) {
  if (!(delta > 0.0) || !(sigma2 > 0.0)) throw DomainError("free_energy: delta and sigma2 must be positive");
  const auto av = channel_averages(g_star, g, omega, omega_star, 64, false);
  return free_energy_from(av.mean_log_marginal, omega, omega_star, delta, sigma2);
}

std::vector<double> grad_F(std::span<const double> alpha, double delta, double sigma2, const PriorAt& g_star,
                           const Prior& family, const FixedPointOptions& options) {
  PriorAt g{family, std::vector<double>(alpha.begin(), alpha.end())};
  const auto sol = solve_fixed_point(delta, sigma2, g_star, g, options);
  auto av = channel_averages(g_star, g, sol.omega, sol.omega_star, 64, true);
  for (double& v : av.alpha_grad) v = -v;
  return av.alpha_grad;
}

}  // namespace dmftlab
