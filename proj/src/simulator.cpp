#include "dmftlab/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dmftlab/errors.hpp"
#include "dmftlab/parallel.hpp"
#include "dmftlab/rng.hpp"

namespace dmftlab {

std::optional<std::size_t> Trajectory::row_of(std::size_t step) const {
  auto it = std::lower_bound(retained.begin(), retained.end(), step);
  if (it == retained.end() || *it != step) return std::nullopt;
  return static_cast<std::size_t>(it - retained.begin());
}

std::uint64_t replica_seed(std::uint64_t seed, std::size_t replica) {
  return CounterRng(seed, 0xa11ce).bits(replica);
}

Trajectory evolve(const ModelInstance& instance, const PriorSpec& spec, const ModelParams& params,
                  std::uint64_t seed, NoiseMode noise_mode, const EvolveOptions& options) {
  params.validate();
  spec.nominal.check_alpha(spec.alpha0);
  if (instance.n() != params.n || instance.d() != params.d)
    throw DomainError("evolve: instance dimensions do not match params");
  if (options.retain_every == 0) throw DomainError("evolve: retain_every must be >= 1");

  const std::size_t N = params.n_steps();
  const auto d = static_cast<Eigen::Index>(params.d);
  const std::size_t K = spec.alpha0.size();
  const double gamma = params.gamma_step;
  const double noise_scale = noise_mode == NoiseMode::Stochastic ? std::sqrt(2.0 * gamma) : 0.0;
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  const CounterRng brown(seed, streams::brownian);

  Trajectory tr;
  tr.gamma = gamma;
  tr.n_steps = N;
  tr.seed = seed;
  for (std::size_t t = 0; t <= N; ++t)
    if (t % options.retain_every == 0 || t == N) tr.retained.push_back(t);
  tr.theta_path.resize(static_cast<Eigen::Index>(tr.retained.size()), d);
  tr.alpha_path.resize(static_cast<Eigen::Index>(N + 1), static_cast<Eigen::Index>(K));
  if (options.keep_residuals)
    tr.residual_path.resize(static_cast<Eigen::Index>(tr.retained.size()), instance.X.rows());

  Eigen::VectorXd theta = instance.theta0;
  std::vector<double> alpha = spec.alpha0;
  Eigen::VectorXd resid(instance.X.rows()), grad(d);
  std::size_t row = 0;

  for (std::size_t t = 0;; ++t) {
    if (!theta.allFinite() || theta.norm() / sqrt_d > 1e6)
      throw DivergenceError("evolve: state diverged", t);
    for (std::size_t k = 0; k < K; ++k) {
      if (!std::isfinite(alpha[k])) throw DivergenceError("evolve: alpha diverged", t);
      tr.alpha_path(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = alpha[k];
    }
    resid.noalias() = instance.X * theta;
    resid -= instance.y;
    if (row < tr.retained.size() && tr.retained[row] == t) {
      tr.theta_path.row(static_cast<Eigen::Index>(row)) = theta.transpose();
      if (options.keep_residuals) tr.residual_path.row(static_cast<Eigen::Index>(row)) = resid.transpose();
      ++row;
    }
    if (options.observer) options.observer(t, theta, alpha);
    if (t == N) break;

    grad.noalias() = instance.X.transpose() * resid;
    grad *= -params.beta;
    for (Eigen::Index j = 0; j < d; ++j) grad(j) += spec.nominal.score(theta(j), alpha);
    if (options.perturbation && options.perturbation->step == t)
      grad(static_cast<Eigen::Index>(options.perturbation->coord)) += options.perturbation->eps;

    std::vector<double> g;
    if (K > 0) g = gradient_map_G(alpha, std::span<const double>(theta.data(), theta.size()), spec.nominal,
                                  spec.regularizer);

    theta += gamma * grad;
    if (noise_scale > 0.0) {
      const std::uint64_t base = static_cast<std::uint64_t>(t) * static_cast<std::uint64_t>(d);
      for (Eigen::Index j = 0; j < d; ++j) theta(j) += noise_scale * brown.normal(base + static_cast<std::uint64_t>(j));
    }
    for (std::size_t k = 0; k < K; ++k) alpha[k] += gamma * g[k];
  }
  return tr;
}

std::vector<Replica> run_replicas(const ModelParams& params, const PriorSpec& spec, std::uint64_t seed,
                                  std::size_t n_replicas, const EvolveOptions& options, unsigned threads,
                                  Design design) {
  if (n_replicas == 0) throw DomainError("run_replicas: need at least one replica");
  std::vector<Replica> out(n_replicas);
  for_each_chunk(n_replicas, 1, threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      const std::uint64_t rs = replica_seed(seed, r);
      out[r].instance = sample_instance(params, spec, rs, design);
      out[r].trajectory = evolve(out[r].instance, spec, params, rs, NoiseMode::Stochastic, options);
    }
  });
  return out;
}

namespace {

// running mean / standard error of the mean over replicas
struct MeanSe {
  Eigen::ArrayXXd sum, sum2;
  std::size_t count = 0;
  void add(const Eigen::ArrayXXd& x) {
    if (count == 0) {
      sum = Eigen::ArrayXXd::Zero(x.rows(), x.cols());
      sum2 = sum;
    }
    sum += x;
    sum2 += x.square();
    ++count;
  }
  Eigen::ArrayXXd mean() const { return sum / static_cast<double>(count); }
  Eigen::ArrayXXd se() const {
    if (count < 2) return Eigen::ArrayXXd::Zero(sum.rows(), sum.cols());
    const double c = static_cast<double>(count);
    Eigen::ArrayXXd var = (sum2 - sum.square() / c) / (c - 1.0);
    return (var.max(0.0) / c).sqrt();
  }
};

}  // namespace

EmpiricalKernels empirical_kernels(std::span<const Trajectory> replicas, std::span<const ModelInstance> instances,
                                   const ModelParams& params) {
  if (replicas.empty()) throw DomainError("empirical_kernels: no replicas");
  if (replicas.size() != instances.size()) throw DomainError("empirical_kernels: replicas/instances mismatch");
  const auto& steps = replicas.front().retained;
  for (const auto& r : replicas)
    if (r.retained != steps || r.gamma != replicas.front().gamma || r.theta_path.cols() != replicas.front().theta_path.cols() ||
        r.alpha_path.rows() != replicas.front().alpha_path.rows())
      throw DomainError("empirical_kernels: mismatched grids across replicas");

  const auto m = static_cast<Eigen::Index>(steps.size());
  const double d = static_cast<double>(params.d), n = static_cast<double>(params.n);
  const double eta_scale = params.delta * params.beta * params.beta / n;
  MeanSe ct, cts, css, ce, al;
  for (std::size_t r = 0; r < replicas.size(); ++r) {
    const auto& tr = replicas[r];
    const auto& inst = instances[r];
    if (static_cast<std::size_t>(tr.theta_path.cols()) != inst.d())
      throw DomainError("empirical_kernels: instance does not match trajectory");
    Eigen::MatrixXd resid;
    if (tr.residual_path.rows() == m) {
      resid = tr.residual_path;
    } else {
      resid = tr.theta_path * inst.X.transpose();
      resid.rowwise() -= inst.y.transpose();
    }
    Eigen::MatrixXd gt = Eigen::MatrixXd::Zero(m, m), ge = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) {
        gt(i, j) = gt(j, i) = tr.theta_path.row(i).dot(tr.theta_path.row(j)) / d;
        ge(i, j) = ge(j, i) = eta_scale * resid.row(i).dot(resid.row(j));
      }
    ct.add(gt.array());
    ce.add(ge.array());
    cts.add((tr.theta_path * inst.theta_star / d).array());
    Eigen::ArrayXXd ss(1, 1);
    ss(0, 0) = inst.theta_star.squaredNorm() / d;
    css.add(ss);
    al.add(tr.alpha_path.array());
  }
  EmpiricalKernels k;
  k.gamma = replicas.front().gamma;
  k.steps = steps;
  k.replicas = replicas.size();
  k.C_theta = ct.mean().matrix();
  k.C_theta_se = ct.se().matrix();
  k.C_eta = ce.mean().matrix();
  k.C_eta_se = ce.se().matrix();
  k.C_theta_star = cts.mean().matrix().col(0);
  k.C_theta_star_se = cts.se().matrix().col(0);
  k.C_star_star = css.mean()(0, 0);
  k.C_star_star_se = css.se()(0, 0);
  k.alpha = al.mean().matrix();
  k.alpha_se = al.se().matrix();
  return k;
}

ResponseGrid response_traces(const Trajectory& trajectory, const ModelInstance& instance, const PriorSpec& spec,
                             const ModelParams& params, std::span<const StepPair> pairs, ResponseMethod method,
                             std::size_t n_probes, std::uint64_t probe_seed) {
  const auto d = static_cast<Eigen::Index>(instance.d());
  const double n = static_cast<double>(instance.n());
  const double gamma = params.gamma_step;
  const double eta_pref = params.delta * params.beta * params.beta * gamma / n;
  if (method == ResponseMethod::Probe && n_probes < 2) throw DomainError("response_traces: need >= 2 probes");

  // group requested t's by s
  std::map<std::size_t, std::vector<std::size_t>> by_s;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].s >= pairs[i].t) throw DomainError("response_traces: requires s < t");
    if (pairs[i].t > trajectory.n_steps) throw DomainError("response_traces: t beyond horizon");
    by_s[pairs[i].s].push_back(i);
  }
  ResponseGrid out;
  out.pairs.assign(pairs.begin(), pairs.end());
  out.R_theta.assign(pairs.size(), 0.0);
  out.R_eta.assign(pairs.size(), 0.0);
  out.R_theta_se.assign(pairs.size(), 0.0);
  out.R_eta_se.assign(pairs.size(), 0.0);

  const Eigen::MatrixXd G = instance.X.transpose() * instance.X;
  Eigen::VectorXd dg(d);
  auto load_curvature = [&](std::size_t k) {
    auto row = trajectory.row_of(k);
    if (!row) throw DomainError("response_traces: step " + std::to_string(k) + " not retained");
    const auto a = trajectory.alpha_path.row(static_cast<Eigen::Index>(k));
    std::vector<double> alpha(static_cast<std::size_t>(a.size()));
    for (Eigen::Index q = 0; q < a.size(); ++q) alpha[static_cast<std::size_t>(q)] = a(q);
    for (Eigen::Index j = 0; j < d; ++j)
      dg(j) = spec.nominal.score_derivative(trajectory.theta_path(static_cast<Eigen::Index>(*row), j), alpha);
  };

  const CounterRng prng(probe_seed, streams::probes);
  for (auto& [s, idx] : by_s) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pairs[a].t < pairs[b].t; });
    const std::size_t t_max = pairs[idx.back()].t;
    if (method == ResponseMethod::ExactProduct) {
      Eigen::MatrixXd P = Eigen::MatrixXd::Identity(d, d), GP(d, d);
      std::size_t next = 0;
      for (std::size_t t = s + 1; t <= t_max; ++t) {
        // P holds Omega^{t-1} ... Omega^{s+1}
        if (t > s + 1) {
          load_curvature(t - 1);
          GP.noalias() = G * P;
          P += gamma * (dg.asDiagonal() * P) - (gamma * params.beta) * GP;
        }
        while (next < idx.size() && pairs[idx[next]].t == t) {
          const std::size_t i = idx[next++];
          out.R_theta[i] = gamma * (P.trace() / static_cast<double>(d));
          out.R_eta[i] = eta_pref * P.cwiseProduct(G).sum();
        }
      }
    } else {
      const auto m = static_cast<Eigen::Index>(n_probes);
      Eigen::MatrixXd V0(d, m);
      const CounterRng pr = prng.substream(s);
      for (Eigen::Index p = 0; p < m; ++p)
        for (Eigen::Index j = 0; j < d; ++j) V0(j, p) = pr.rademacher(static_cast<std::uint64_t>(p * d + j));
      Eigen::MatrixXd V = V0, U = G * V0, tmp(d, m);
      std::size_t next = 0;
      for (std::size_t t = s + 1; t <= t_max; ++t) {
        if (t > s + 1) {
          load_curvature(t - 1);
          tmp.noalias() = G * V;
          V += gamma * (dg.asDiagonal() * V) - (gamma * params.beta) * tmp;
          tmp.noalias() = G * U;
          U += gamma * (dg.asDiagonal() * U) - (gamma * params.beta) * tmp;
        }
        while (next < idx.size() && pairs[idx[next]].t == t) {
          const std::size_t i = idx[next++];
          Eigen::ArrayXd a = (V0.cwiseProduct(V)).colwise().sum().transpose().array();
          Eigen::ArrayXd b = (V0.cwiseProduct(U)).colwise().sum().transpose().array();
          auto mean_se = [&](const Eigen::ArrayXd& x) {
            const double mu = x.mean();
            const double var = (x - mu).square().sum() / static_cast<double>(m - 1);
            return std::pair{mu, std::sqrt(var / static_cast<double>(m))};
          };
          auto [ma, sa] = mean_se(a);
          auto [mb, sb] = mean_se(b);
          out.R_theta[i] = gamma * (ma / static_cast<double>(d));
          out.R_theta_se[i] = gamma * sa / static_cast<double>(d);
          out.R_eta[i] = eta_pref * mb;
          out.R_eta_se[i] = eta_pref * sb;
        }
      }
    }
  }
  return out;
}

ResponseGrid average_responses(std::span<const ResponseGrid> grids) {
  if (grids.empty()) throw DomainError("average_responses: empty");
  ResponseGrid out = grids.front();
  const std::size_t m = out.pairs.size();
  const double c = static_cast<double>(grids.size());
  for (std::size_t i = 0; i < m; ++i) {
    double s1 = 0, s2 = 0, e1 = 0, e2 = 0;
    for (const auto& g : grids) {
      if (g.pairs.size() != m || g.pairs[i].t != out.pairs[i].t || g.pairs[i].s != out.pairs[i].s)
        throw DomainError("average_responses: mismatched pairs");
      s1 += g.R_theta[i];
      s2 += g.R_theta[i] * g.R_theta[i];
      e1 += g.R_eta[i];
      e2 += g.R_eta[i] * g.R_eta[i];
    }
    out.R_theta[i] = s1 / c;
    out.R_eta[i] = e1 / c;
    out.R_theta_se[i] = grids.size() > 1 ? std::sqrt(std::max(0.0, (s2 - s1 * s1 / c) / (c - 1.0)) / c) : grids[0].R_theta_se[i];
    out.R_eta_se[i] = grids.size() > 1 ? std::sqrt(std::max(0.0, (e2 - e1 * e1 / c) / (c - 1.0)) / c) : grids[0].R_eta_se[i];
  }
  return out;
}

std::vector<double> finite_diff_response(const ModelInstance& instance, const PriorSpec& spec,
                                         const ModelParams& params, std::size_t s, std::size_t j, double eps,
                                         std::uint64_t seed, NoiseMode noise_mode) {
  const std::size_t N = params.n_steps();
  if (s >= N) throw DomainError("finite_diff_response: s must be below the last step");
  if (j >= instance.d()) throw DomainError("finite_diff_response: coordinate out of range");
  std::vector<double> base(N + 1), pert(N + 1);
  double norm_s = 0.0;
  EvolveOptions opt;
  opt.retain_every = N;
  opt.observer = [&](std::size_t t, const Eigen::VectorXd& th, Alpha) {
    base[t] = th(static_cast<Eigen::Index>(j));
    if (t == s) norm_s = th.norm();
  };
  evolve(instance, spec, params, seed, noise_mode, opt);
  if (!(eps > 0.0)) eps = 1e-4 * (1.0 + norm_s / std::sqrt(static_cast<double>(instance.d())));
  opt.perturbation = Perturbation{s, j, eps};
  opt.observer = [&](std::size_t t, const Eigen::VectorXd& th, Alpha) { pert[t] = th(static_cast<Eigen::Index>(j)); };
  evolve(instance, spec, params, seed, noise_mode, opt);
  std::vector<double> out;
  out.reserve(N - s);
  for (std::size_t t = s + 1; t <= N; ++t) out.push_back((pert[t] - base[t]) / eps);
  return out;
}

double wasserstein2_1d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein2_1d: empty input");
  if (a.size() != b.size()) throw DomainError("wasserstein2_1d: sample counts differ (use resample_sorted)");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

std::vector<double> resample_sorted(std::span<const double> x, std::size_t m) {
  if (x.empty() || m == 0) throw DomainError("resample_sorted: empty input");
  const double n = static_cast<double>(x.size());
  std::vector<double> out(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double pos = (static_cast<double>(k) + 0.5) / static_cast<double>(m) * n - 0.5;
    if (pos <= 0.0) {
      out[k] = x.front();
    } else if (pos >= n - 1.0) {
      out[k] = x.back();
    } else {
      const auto i = static_cast<std::size_t>(pos);
      const double w = pos - static_cast<double>(i);
      out[k] = (1.0 - w) * x[i] + w * x[i + 1];
    }
  }
  return out;
}

}  // namespace dmftlab
