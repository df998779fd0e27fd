#include "dmftlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dmftlab/errors.hpp"
#include "dmftlab/quadrature.hpp"
#include "dmftlab/rng.hpp"

namespace dmftlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool all_finite(Alpha a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// log-space responsibilities, returns log normalizer
double softmax_inplace(std::vector<double>& v) {
  const double lse = log_sum_exp(v);
  for (double& x : v) x = std::exp(x - lse);
  return lse;
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
double stat_d1(Statistic s, double t) {
  switch (s) {
    case Statistic::Linear: return 1.0;
    case Statistic::Quadratic: return 2.0 * t;
    case Statistic::LogCosh: return std::tanh(t);
  }
  return 0.0;
}
double stat_d2(Statistic s, double t) {
  switch (s) {
    case Statistic::Linear: return 0.0;
    case Statistic::Quadratic: return 2.0;
    case Statistic::LogCosh: {
      const double c = std::cosh(t);
      return std::isfinite(c) ? 1.0 / (c * c) : 0.0;
    }
  }
  return 0.0;
}

// unnormalized log-density of an exponential family
double ef_energy(const ExpFamily& f, double t, Alpha alpha) {
  double e = -0.5 * f.base_precision * t * t;
  for (std::size_t k = 0; k < f.statistics.size(); ++k) e += alpha[k] * stat_value(f.statistics[k], t);
  return e;
}

struct EfGrid {
  double L;
  double peak;  // approximate maximum of the energy
  double argmax;
};

EfGrid ef_grid(const ExpFamily& f, Alpha alpha) {
  double L = 4.0;
  for (;;) {
    double peak = -INFINITY, arg = 0.0;
    const int m = 4000;
    for (int i = 0; i <= m; ++i) {
      const double t = -L + 2.0 * L * i / m;
      const double e = ef_energy(f, t, alpha);
      if (e > peak) peak = e, arg = t;
    }
    // energy is eventually concave-quadratic, so the edges bound the tails
    const double edge = std::max(ef_energy(f, L, alpha), ef_energy(f, -L, alpha));
    if (peak - edge > 60.0 && std::abs(arg) < 0.75 * L) return {L, peak, arg};
    L *= 2.0;
    if (L > 1e6) throw PrecisionError("ExpFamily: could not bracket the mass");
  }
}

double ef_integrate(const ExpFamily& f, Alpha alpha, const EfGrid& g,
                    const std::function<double(double)>& h) {
  auto integrand = [&](double t) { return h(t) * std::exp(ef_energy(f, t, alpha) - g.peak); };
  const double a = std::clamp(g.argmax, -g.L, g.L);
  double total = 0.0;
  if (a > -g.L) total += integrate_adaptive(integrand, -g.L, a, 1e-12, 1e-300);
  if (a < g.L) total += integrate_adaptive(integrand, a, g.L, 1e-12, 1e-300);
  return total;
}

}  // namespace

// ---- ModelParams -----------------------------------------------------------

ModelParams ModelParams::from_dims(std::size_t n, std::size_t d, double sigma2, double beta,
                                   double gamma_step, double horizon) {
  ModelParams p;
  p.n = n;
  p.d = d;
  p.delta = static_cast<double>(n) / static_cast<double>(d);
  p.sigma2 = sigma2;
  p.beta = beta;
  p.gamma_step = gamma_step;
  p.horizon = horizon;
  p.validate();
  return p;
}

std::size_t ModelParams::n_steps() const {
  const double r = horizon / gamma_step;
  const double k = std::round(r);
  if (k < 1.0 || std::abs(r - k) > 1e-9 * std::max(1.0, r))
    throw DomainError("horizon/gamma_step must be a positive integer (got " + std::to_string(r) + ")");
  return static_cast<std::size_t>(k);
}

void ModelParams::validate() const {
  if (n < 1 || d < 1) throw DomainError("n and d must be at least 1");
  if (!(delta > 0.0) || !std::isfinite(delta)) throw DomainError("delta must be positive");
  if (std::abs(delta - static_cast<double>(n) / static_cast<double>(d)) > 1e-12 * delta)
    throw DomainError("delta must equal n/d");
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw DomainError("sigma2 must be positive");
  if (!std::isfinite(beta)) throw DomainError("beta must be finite");
  if (!(gamma_step > 0.0)) throw DomainError("gamma_step must be positive");
  if (!(horizon >= gamma_step)) throw DomainError("horizon must be at least gamma_step");
  (void)n_steps();
}

// ---- Prior -----------------------------------------------------------------

Prior::Prior(PriorFamily family) : family_(std::move(family)) {
  std::visit(overloaded{
                 [](const GaussianFixed& f) {
                   if (!(f.lambda >= 0.0)) throw DomainError("GaussianFixed: lambda must be >= 0");
                 },
                 [](const GaussianLocation& f) {
                   if (!(f.scale > 0.0)) throw DomainError("GaussianLocation: scale must be > 0");
                 },
                 [](const GaussianMeanMixture& f) {
                   if (f.weights.empty() || f.weights.size() != f.precisions.size())
                     throw DomainError("GaussianMeanMixture: weights/precisions size mismatch");
                   for (std::size_t k = 0; k < f.weights.size(); ++k)
                     if (!(f.weights[k] > 0.0) || !(f.precisions[k] > 0.0))
                       throw DomainError("GaussianMeanMixture: weights and precisions must be > 0");
                 },
                 [](const GaussianWeightMixture& f) {
                   if (f.means.empty() || f.means.size() != f.precisions.size())
                     throw DomainError("GaussianWeightMixture: means/precisions size mismatch");
                   for (double w : f.precisions)
                     if (!(w > 0.0)) throw DomainError("GaussianWeightMixture: precisions must be > 0");
                 },
                 [](const ExpFamily& f) {
                   if (!(f.base_precision >= 0.0)) throw DomainError("ExpFamily: base_precision must be >= 0");
                 },
                 [](const Atoms& f) {
                   if (f.values.empty() || f.values.size() != f.probs.size())
                     throw DomainError("Atoms: values/probs size mismatch");
                   for (double p : f.probs)
                     if (!(p > 0.0)) throw DomainError("Atoms: probabilities must be > 0");
                 },
             },
             family_);
}

std::string Prior::name() const {
  return std::visit(overloaded{
                        [](const GaussianFixed&) { return std::string("gaussian_fixed"); },
                        [](const GaussianLocation&) { return std::string("gaussian_location"); },
                        [](const GaussianMeanMixture&) { return std::string("gaussian_mean_mixture"); },
                        [](const GaussianWeightMixture&) { return std::string("gaussian_weight_mixture"); },
                        [](const ExpFamily&) { return std::string("exp_family"); },
                        [](const Atoms&) { return std::string("atoms"); },
                    },
                    family_);
}

std::size_t Prior::alpha_dim() const {
  return std::visit(overloaded{
                        [](const GaussianFixed&) -> std::size_t { return 0; },
                        [](const GaussianLocation&) -> std::size_t { return 1; },
                        [](const GaussianMeanMixture& f) { return f.weights.size(); },
                        [](const GaussianWeightMixture& f) { return f.means.size(); },
                        [](const ExpFamily& f) { return f.statistics.size(); },
                        [](const Atoms&) -> std::size_t { return 0; },
                    },
                    family_);
}

bool Prior::constant_curvature() const {
  if (std::holds_alternative<GaussianFixed>(family_) || std::holds_alternative<GaussianLocation>(family_))
    return true;
  if (auto* f = std::get_if<ExpFamily>(&family_))
    return std::none_of(f->statistics.begin(), f->statistics.end(),
                        [](Statistic s) { return s == Statistic::LogCosh; });
  return false;
}

void Prior::check_alpha(Alpha alpha) const {
  if (alpha.size() != alpha_dim())
    throw DomainError(name() + ": alpha has dimension " + std::to_string(alpha.size()) +
                      ", expected " + std::to_string(alpha_dim()));
  if (!all_finite(alpha)) throw DomainError(name() + ": non-finite alpha");
  if (auto* f = std::get_if<ExpFamily>(&family_)) {
    double q = 0.5 * f->base_precision;
    for (std::size_t k = 0; k < f->statistics.size(); ++k)
      if (f->statistics[k] == Statistic::Quadratic) q -= alpha[k];
    if (!(q > 0.0)) throw DomainError("ExpFamily: density not integrable (quadratic coefficient >= 0)");
  }
}

namespace {
void check_theta(double theta) {
  if (!std::isfinite(theta)) throw DomainError("non-finite theta");
}
}  // namespace

double Prior::log_density(double theta, Alpha alpha) const {
  check_theta(theta);
  check_alpha(alpha);
  return std::visit(
      overloaded{
          [&](const GaussianFixed& f) {
            if (!(f.lambda > 0.0)) throw DomainError("GaussianFixed: lambda = 0 has no density");
            return 0.5 * (std::log(f.lambda) - kLog2Pi) - 0.5 * f.lambda * theta * theta;
          },
          [&](const GaussianLocation& f) {
            const double z = (theta - alpha[0]) / f.scale;
            return -0.5 * kLog2Pi - std::log(f.scale) - 0.5 * z * z;
          },
          [&](const GaussianMeanMixture& f) {
            const double wsum = std::accumulate(f.weights.begin(), f.weights.end(), 0.0);
            std::vector<double> l(f.weights.size());
            for (std::size_t k = 0; k < l.size(); ++k) {
              const double r = theta - alpha[k];
              l[k] = std::log(f.weights[k] / wsum) + 0.5 * (std::log(f.precisions[k]) - kLog2Pi) -
                     0.5 * f.precisions[k] * r * r;
            }
            return log_sum_exp(l);
          },
          [&](const GaussianWeightMixture& f) {
            std::vector<double> l(f.means.size());
            for (std::size_t k = 0; k < l.size(); ++k) {
              const double r = theta - f.means[k];
              l[k] = alpha[k] + 0.5 * (std::log(f.precisions[k]) - kLog2Pi) - 0.5 * f.precisions[k] * r * r;
            }
            return log_sum_exp(l) - log_sum_exp(alpha);
          },
          [&](const ExpFamily& f) { return ef_energy(f, theta, alpha) - log_partition(alpha); },
          [&](const Atoms&) -> double { throw UnsupportedError("atoms: no Lebesgue density"); },
      },
      family_);
}

double Prior::score(double theta, Alpha alpha) const {
  check_theta(theta);
  return std::visit(
      overloaded{
          [&](const GaussianFixed& f) { return -f.lambda * theta; },
          [&](const GaussianLocation& f) { return (alpha[0] - theta) / (f.scale * f.scale); },
          [&](const GaussianMeanMixture& f) {
            std::vector<double> r(f.weights.size());
            for (std::size_t k = 0; k < r.size(); ++k) {
              const double d = theta - alpha[k];
              r[k] = std::log(f.weights[k]) + 0.5 * std::log(f.precisions[k]) - 0.5 * f.precisions[k] * d * d;
            }
            softmax_inplace(r);
            double s = 0.0;
            for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * f.precisions[k] * (alpha[k] - theta);
            return s;
          },
          [&](const GaussianWeightMixture& f) {
            std::vector<double> r(f.means.size());
            for (std::size_t k = 0; k < r.size(); ++k) {
              const double d = theta - f.means[k];
              r[k] = alpha[k] + 0.5 * std::log(f.precisions[k]) - 0.5 * f.precisions[k] * d * d;
            }
            softmax_inplace(r);
            double s = 0.0;
            for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * f.precisions[k] * (f.means[k] - theta);
            return s;
          },
          [&](const ExpFamily& f) {
            double s = -f.base_precision * theta;
            for (std::size_t k = 0; k < f.statistics.size(); ++k) s += alpha[k] * stat_d1(f.statistics[k], theta);
            return s;
          },
          [&](const Atoms&) -> double { throw UnsupportedError("atoms: score undefined"); },
      },
      family_);
}

double Prior::score_derivative(double theta, Alpha alpha) const {
  check_theta(theta);
  auto mixture = [&](const std::vector<double>& logw, const std::vector<double>& centers,
                     const std::vector<double>& prec) {
    std::vector<double> r(logw.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
      const double d = theta - centers[k];
      r[k] = logw[k] + 0.5 * std::log(prec[k]) - 0.5 * prec[k] * d * d;
    }
    softmax_inplace(r);
    double s = 0.0, s2 = 0.0, w = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
      const double v = prec[k] * (centers[k] - theta);
      s += r[k] * v;
      s2 += r[k] * v * v;
      w += r[k] * prec[k];
    }
    return s2 - s * s - w;
  };
  return std::visit(
      overloaded{
          [&](const GaussianFixed& f) { return -f.lambda; },
          [&](const GaussianLocation& f) { return -1.0 / (f.scale * f.scale); },
          [&](const GaussianMeanMixture& f) {
            std::vector<double> lw(f.weights.size());
            for (std::size_t k = 0; k < lw.size(); ++k) lw[k] = std::log(f.weights[k]);
            return mixture(lw, std::vector<double>(alpha.begin(), alpha.end()), f.precisions);
          },
          [&](const GaussianWeightMixture& f) {
            return mixture(std::vector<double>(alpha.begin(), alpha.end()), f.means, f.precisions);
          },
          [&](const ExpFamily& f) {
            double s = -f.base_precision;
            for (std::size_t k = 0; k < f.statistics.size(); ++k) s += alpha[k] * stat_d2(f.statistics[k], theta);
            return s;
          },
          [&](const Atoms&) -> double { throw UnsupportedError("atoms: score undefined"); },
      },
      family_);
}

void Prior::alpha_gradient(double theta, Alpha alpha, std::span<double> out) const {
  const double one[1] = {theta};
  alpha_gradient_sum(one, alpha, out);
}

void Prior::alpha_gradient_sum(std::span<const double> samples, Alpha alpha,
                               std::span<double> out) const {
  check_alpha(alpha);
  if (out.size() != alpha.size()) throw DomainError("alpha_gradient: output size mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (double t : samples) check_theta(t);
  std::visit(
      overloaded{
          [&](const GaussianFixed&) {},
          [&](const GaussianLocation& f) {
            double acc = 0.0;
            for (double t : samples) acc += t - alpha[0];
            out[0] = acc / (f.scale * f.scale);
          },
          [&](const GaussianMeanMixture& f) {
            std::vector<double> r(f.weights.size());
            for (double t : samples) {
              for (std::size_t k = 0; k < r.size(); ++k) {
                const double d = t - alpha[k];
                r[k] = std::log(f.weights[k]) + 0.5 * std::log(f.precisions[k]) - 0.5 * f.precisions[k] * d * d;
              }
              softmax_inplace(r);
              for (std::size_t k = 0; k < r.size(); ++k) out[k] += r[k] * f.precisions[k] * (t - alpha[k]);
            }
          },
          [&](const GaussianWeightMixture& f) {
            std::vector<double> r(f.means.size());
            std::vector<double> prior(alpha.begin(), alpha.end());
            softmax_inplace(prior);
            for (double t : samples) {
              for (std::size_t k = 0; k < r.size(); ++k) {
                const double d = t - f.means[k];
                r[k] = alpha[k] + 0.5 * std::log(f.precisions[k]) - 0.5 * f.precisions[k] * d * d;
              }
              softmax_inplace(r);
              for (std::size_t k = 0; k < r.size(); ++k) out[k] += r[k] - prior[k];
            }
          },
          [&](const ExpFamily& f) {
            const auto m = mean_statistics(alpha);
            for (double t : samples)
              for (std::size_t k = 0; k < m.size(); ++k) out[k] += stat_value(f.statistics[k], t) - m[k];
          },
          [&](const Atoms&) {},
      },
      family_);
}

double Prior::log_partition(Alpha alpha) const {
  auto* f = std::get_if<ExpFamily>(&family_);
  if (!f) throw UnsupportedError("log_partition: ExpFamily only");
  check_alpha(alpha);
  const EfGrid g = ef_grid(*f, alpha);
  return g.peak + std::log(ef_integrate(*f, alpha, g, [](double) { return 1.0; }));
}

std::vector<double> Prior::mean_statistics(Alpha alpha) const {
  auto* f = std::get_if<ExpFamily>(&family_);
  if (!f) throw UnsupportedError("mean_statistics: ExpFamily only");
  check_alpha(alpha);
  const EfGrid g = ef_grid(*f, alpha);
  const double z = ef_integrate(*f, alpha, g, [](double) { return 1.0; });
  std::vector<double> m(f->statistics.size());
  for (std::size_t k = 0; k < m.size(); ++k) {
    const Statistic s = f->statistics[k];
    m[k] = ef_integrate(*f, alpha, g, [s](double t) { return stat_value(s, t); }) / z;
  }
  return m;
}

double Prior::support_radius(Alpha alpha) const {
  auto* f = std::get_if<ExpFamily>(&family_);
  if (!f) throw UnsupportedError("support_radius: ExpFamily only");
  check_alpha(alpha);
  return ef_grid(*f, alpha).L;
}

double Prior::second_moment(Alpha alpha) const {
  check_alpha(alpha);
  if (auto* f = std::get_if<ExpFamily>(&family_)) {
    const EfGrid g = ef_grid(*f, alpha);
    return ef_integrate(*f, alpha, g, [](double t) { return t * t; }) /
           ef_integrate(*f, alpha, g, [](double) { return 1.0; });
  }
  if (auto* a = std::get_if<Atoms>(&family_)) {
    const double ps = std::accumulate(a->probs.begin(), a->probs.end(), 0.0);
    double m = 0.0;
    for (std::size_t k = 0; k < a->values.size(); ++k) m += a->probs[k] * a->values[k] * a->values[k];
    return m / ps;
  }
  if (auto* g = std::get_if<GaussianFixed>(&family_); g && !(g->lambda > 0.0))
    throw DomainError("GaussianFixed: lambda = 0 has no second moment");
  double m = 0.0;
  const auto comps = *gaussian_components(alpha);
  for (const auto& c : comps) m += c.weight * (c.mean * c.mean + 1.0 / c.precision);
  return m;
}

double Prior::mean(Alpha alpha) const {
  check_alpha(alpha);
  if (auto* f = std::get_if<ExpFamily>(&family_)) {
    const EfGrid g = ef_grid(*f, alpha);
    return ef_integrate(*f, alpha, g, [](double t) { return t; }) /
           ef_integrate(*f, alpha, g, [](double) { return 1.0; });
  }
  if (auto* a = std::get_if<Atoms>(&family_)) {
    const double ps = std::accumulate(a->probs.begin(), a->probs.end(), 0.0);
    double m = 0.0;
    for (std::size_t k = 0; k < a->values.size(); ++k) m += a->probs[k] * a->values[k];
    return m / ps;
  }
  double m = 0.0;
  const auto comps = *gaussian_components(alpha);
  for (const auto& c : comps) m += c.weight * c.mean;
  return m;
}

std::optional<std::vector<GaussianComponent>> Prior::gaussian_components(Alpha alpha) const {
  check_alpha(alpha);
  return std::visit(
      overloaded{
          [&](const GaussianFixed& f) -> std::optional<std::vector<GaussianComponent>> {
            if (!(f.lambda > 0.0)) return std::nullopt;
            return std::vector<GaussianComponent>{{1.0, 0.0, f.lambda}};
          },
          [&](const GaussianLocation& f) -> std::optional<std::vector<GaussianComponent>> {
            return std::vector<GaussianComponent>{{1.0, alpha[0], 1.0 / (f.scale * f.scale)}};
          },
          [&](const GaussianMeanMixture& f) -> std::optional<std::vector<GaussianComponent>> {
            const double ws = std::accumulate(f.weights.begin(), f.weights.end(), 0.0);
            std::vector<GaussianComponent> c;
            for (std::size_t k = 0; k < f.weights.size(); ++k)
              c.push_back({f.weights[k] / ws, alpha[k], f.precisions[k]});
            return c;
          },
          [&](const GaussianWeightMixture& f) -> std::optional<std::vector<GaussianComponent>> {
            std::vector<double> p(alpha.begin(), alpha.end());
            softmax_inplace(p);
            std::vector<GaussianComponent> c;
            for (std::size_t k = 0; k < p.size(); ++k) c.push_back({p[k], f.means[k], f.precisions[k]});
            return c;
          },
          [&](const ExpFamily&) -> std::optional<std::vector<GaussianComponent>> { return std::nullopt; },
          [&](const Atoms&) -> std::optional<std::vector<GaussianComponent>> { return std::nullopt; },
      },
      family_);
}

// ---- sampling --------------------------------------------------------------

PriorSampler::PriorSampler(const Prior& prior, Alpha alpha) {
  prior.check_alpha(alpha);
  if (auto comps = prior.gaussian_components(alpha)) {
    comps_ = *comps;
    double c = 0.0;
    for (const auto& g : comps_) cum_.push_back(c += g.weight);
    return;
  }
  if (auto* a = std::get_if<Atoms>(&prior.family())) {
    atoms_ = a->values;
    const double ps = std::accumulate(a->probs.begin(), a->probs.end(), 0.0);
    double c = 0.0;
    for (double p : a->probs) cum_.push_back(c += p / ps);
    return;
  }
  if (auto* f = std::get_if<ExpFamily>(&prior.family())) {
    const EfGrid g = ef_grid(*f, alpha);
    const std::size_t m = 1 << 15;
    grid_.resize(m + 1);
    cdf_.assign(m + 1, 0.0);
    double prev = 0.0;
    for (std::size_t i = 0; i <= m; ++i) {
      grid_[i] = -g.L + 2.0 * g.L * static_cast<double>(i) / m;
      const double dens = std::exp(ef_energy(*f, grid_[i], alpha) - g.peak);
      if (i > 0) cdf_[i] = cdf_[i - 1] + 0.5 * (dens + prev) * (grid_[i] - grid_[i - 1]);
      prev = dens;
    }
    for (double& c : cdf_) c /= cdf_.back();
    return;
  }
  throw UnsupportedError("cannot sample from " + prior.name() + " (improper)");
}

double PriorSampler::operator()(double uniform, double normal) const {
  if (!grid_.empty()) {
    auto it = std::lower_bound(cdf_.begin(), cdf_.end(), uniform);
    const std::size_t i = std::clamp<std::size_t>(it - cdf_.begin(), 1, cdf_.size() - 1);
    const double c0 = cdf_[i - 1], c1 = cdf_[i];
    const double w = c1 > c0 ? (uniform - c0) / (c1 - c0) : 0.5;
    return grid_[i - 1] + w * (grid_[i] - grid_[i - 1]);
  }
  std::size_t k = static_cast<std::size_t>(std::lower_bound(cum_.begin(), cum_.end(), uniform) - cum_.begin());
  k = std::min(k, cum_.size() - 1);
  if (!atoms_.empty()) return atoms_[k];
  return comps_[k].mean + normal / std::sqrt(comps_[k].precision);
}

// ---- regularizer, drift, gradient map --------------------------------------

double SmoothHinge::value(Alpha alpha) const {
  double n2 = 0.0;
  for (double a : alpha) n2 += a * a;
  const double x = std::sqrt(n2) - radius;
  if (x <= 0.0) return 0.0;
  if (x <= width) return x * x * x / (3.0 * width * width);
  return width / 3.0 + (x - width);
}

void SmoothHinge::gradient(Alpha alpha, std::span<double> out) const {
  double n2 = 0.0;
  for (double a : alpha) n2 += a * a;
  const double nrm = std::sqrt(n2);
  const double x = nrm - radius;
  double slope = 0.0;
  if (x > 0.0) slope = x <= width ? x * x / (width * width) : 1.0;
  for (std::size_t k = 0; k < alpha.size(); ++k) out[k] = slope > 0.0 ? slope * alpha[k] / nrm : 0.0;
}

void PriorSpec::validate() const {
  nominal.check_alpha(alpha0);
  truth.check_alpha(alpha_star);
  if (init == InitLaw::FromPrior) (void)PriorSampler(nominal, alpha0);
  if (regularizer && (!(regularizer->radius >= 0.0) || !(regularizer->width > 0.0)))
    throw DomainError("regularizer needs radius >= 0 and width > 0");
}

double drift_s(double theta, Alpha alpha, const Prior& prior) {
  if (!std::isfinite(theta)) throw DomainError("drift_s: non-finite theta");
  prior.check_alpha(alpha);
  return prior.score(theta, alpha);
}

std::vector<double> gradient_map_G(Alpha alpha, std::span<const double> samples, const Prior& prior,
                                   const std::optional<SmoothHinge>& regularizer) {
  if (samples.empty()) throw DomainError("gradient_map_G: empty sample set");
  std::vector<double> g(alpha.size());
  prior.alpha_gradient_sum(samples, alpha, g);
  for (double& v : g) v /= static_cast<double>(samples.size());
  if (regularizer) {
    std::vector<double> r(alpha.size());
    regularizer->gradient(alpha, r);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] -= r[k];
  }
  return g;
}

// ---- instances -------------------------------------------------------------

ModelInstance sample_instance(const ModelParams& params, const PriorSpec& spec, std::uint64_t seed,
                              Design design) {
  if (params.n < 1 || params.d < 1) throw DomainError("sample_instance: n, d must be >= 1");
  if (!(params.sigma2 >= 0.0)) throw DomainError("sample_instance: sigma2 must be >= 0");
  spec.validate();
  const auto n = static_cast<Eigen::Index>(params.n);
  const auto d = static_cast<Eigen::Index>(params.d);
  ModelInstance inst;
  inst.seed = seed;

  const CounterRng xr(seed, streams::design);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  inst.X.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto idx = static_cast<std::uint64_t>(i * d + j);
      inst.X(i, j) = scale * (design == Design::Gaussian ? xr.normal(idx) : xr.rademacher(idx));
    }

  const CounterRng tr(seed, streams::theta_star);
  const PriorSampler star(spec.truth, spec.alpha_star);
  inst.theta_star.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto idx = static_cast<std::uint64_t>(j);
    inst.theta_star(j) = star(tr.substream(0).uniform(idx), tr.substream(1).normal(idx));
  }

  const CounterRng er(seed, streams::noise);
  const double sd = std::sqrt(params.sigma2);
  inst.eps.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) inst.eps(i) = sd * er.normal(static_cast<std::uint64_t>(i));

  inst.y = inst.X * inst.theta_star + inst.eps;

  const CounterRng ir(seed, streams::theta0);
  inst.theta0 = Eigen::VectorXd::Zero(d);
  if (spec.init == InitLaw::StandardNormal) {
    for (Eigen::Index j = 0; j < d; ++j) inst.theta0(j) = ir.normal(static_cast<std::uint64_t>(j));
  } else if (spec.init == InitLaw::FromPrior) {
    const PriorSampler s0(spec.nominal, spec.alpha0);
    for (Eigen::Index j = 0; j < d; ++j) {
      const auto idx = static_cast<std::uint64_t>(j);
      inst.theta0(j) = s0(ir.substream(0).uniform(idx), ir.substream(1).normal(idx));
    }
  }
  return inst;
}

}  // namespace dmftlab
