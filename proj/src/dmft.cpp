#include "dmftlab/dmft.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dmftlab/errors.hpp"
#include "dmftlab/parallel.hpp"
#include "dmftlab/rng.hpp"

namespace dmftlab {

namespace {
using Idx = Eigen::Index;
Idx ix(std::size_t i) { return static_cast<Idx>(i); }
constexpr std::size_t kChunk = 256;
}  // namespace

// ---- KernelTable -----------------------------------------------------------

KernelTable KernelTable::zeros(double gamma, std::size_t n_steps, std::size_t alpha_dim) {
  KernelTable k;
  k.gamma = gamma;
  k.n_steps = n_steps;
  const Idx m = ix(n_steps + 1);
  k.C_theta = k.C_eta = k.R_theta = k.R_eta = Eigen::MatrixXd::Zero(m, m);
  k.C_theta_se = k.C_eta_se = k.R_theta_se = Eigen::MatrixXd::Zero(m, m);
  k.C_theta_star = k.R_eta_star = k.C_theta_star_se = Eigen::VectorXd::Zero(m);
  k.alpha = Eigen::MatrixXd::Zero(m, ix(alpha_dim));
  return k;
}

std::size_t KernelTable::index_of(double time) const {
  const double r = time / gamma;
  const double k = std::round(r);
  if (k < 0 || std::abs(r - k) > 1e-7 || k > static_cast<double>(n_steps))
    throw DomainError("time " + std::to_string(time) + " is not on the grid");
  return static_cast<std::size_t>(k);
}

// ---- GrowingCholesky -------------------------------------------------------

std::span<const double> GrowingCholesky::extend(std::span<const double> cov_row) {
  const std::size_t k = rows_.size();
  if (cov_row.size() != k + 1)
    throw DomainError("GrowingCholesky::extend: row has " + std::to_string(cov_row.size()) + " entries, expected " +
                      std::to_string(k + 1));
  std::vector<double> l(k + 1, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double acc = cov_row[i];
    const auto& ri = rows_[i];
    for (std::size_t j = 0; j < i; ++j) acc -= ri[j] * l[j];
    l[i] = ri[i] > 0.0 ? acc / ri[i] : 0.0;
  }
  const double c = cov_row[k];
  double v = c;
  for (std::size_t i = 0; i < k; ++i) v -= l[i] * l[i];
  const double scale = std::max(1.0, std::abs(c));
  const double tol = 1e-10 * scale;
  if (v < 0.0) {
    if (v >= -tol) {
      ++stats_.clamped;
      stats_.log.push_back("row " + std::to_string(k) + ": conditional variance " + std::to_string(v) + " clamped to 0");
      v = 0.0;
    } else {
      bool ok = false;
      for (double j = 1e-12; j <= 1e-8 * 1.0000001; j *= 10.0) {
        if (v + j * scale >= -tol) {
          ++stats_.jittered;
          stats_.max_jitter = std::max(stats_.max_jitter, j * scale);
          stats_.log.push_back("row " + std::to_string(k) + ": diagonal shift " + std::to_string(j * scale));
          v = std::max(0.0, v + j * scale);
          ok = true;
          break;
        }
      }
      if (!ok)
        throw IllConditionedError("conditional variance " + std::to_string(v) + " beyond the regularization budget", k);
    }
  }
  // directions carrying a negligible fraction of the variance are treated as degenerate
  l[k] = v > 1e-14 * scale ? std::sqrt(v) : 0.0;
  rows_.push_back(std::move(l));
  return rows_.back();
}

std::vector<double> GrowingCholesky::whiten(std::span<const double> draws) const {
  if (draws.size() > rows_.size()) throw DomainError("GrowingCholesky::whiten: too many draws");
  std::vector<double> z(draws.size(), 0.0);
  for (std::size_t i = 0; i < draws.size(); ++i) {
    const auto& r = rows_[i];
    double acc = draws[i];
    for (std::size_t j = 0; j < i; ++j) acc -= r[j] * z[j];
    z[i] = r[i] > 0.0 ? acc / r[i] : 0.0;
  }
  return z;
}

double extend_conditional_gaussian(GrowingCholesky& chol, std::span<const double> new_cov_row,
                                   std::span<const double> past_draws, double standard_normal) {
  if (past_draws.size() != chol.size()) throw DomainError("extend_conditional_gaussian: past draws do not match factor");
  const auto z = chol.whiten(past_draws);
  const auto l = chol.extend(new_cov_row);
  double x = l[z.size()] * standard_normal;
  for (std::size_t i = 0; i < z.size(); ++i) x += l[i] * z[i];
  return x;
}

// ---- eta-side --------------------------------------------------------------

EtaPropagator::EtaPropagator(EtaSideParams p, std::size_t n_steps)
    : p_(p),
      A_(Eigen::MatrixXd::Zero(ix(n_steps + 1), ix(n_steps + 3))),
      deta_(Eigen::MatrixXd::Zero(ix(n_steps + 1), ix(n_steps + 1))),
      dstar_(Eigen::VectorXd::Zero(ix(n_steps + 1))) {}

void EtaPropagator::step(std::size_t t, KernelTable& k) {
  const double beta = p_.beta;
  const double db = p_.delta * p_.beta;
  const double db2 = db * p_.beta;
  const Idx T = ix(t);
  // xi^t = -beta sum_{s<t} R_theta(t,s) xi^s + w* - eps - w^t
  A_(T, 0) = 1.0;
  A_(T, 1) = -1.0;
  A_(T, 2 + T) = -1.0;
  for (Idx s = 0; s < T; ++s) {
    const double c = -beta * k.R_theta(T, s);
    if (c == 0.0) continue;
    for (Idx b = 0; b <= 2 + s; ++b) A_(T, b) += c * A_(s, b);
  }
  // v = Sigma a_t over (w*, eps, w^0..w^t)
  Eigen::VectorXd v = Eigen::VectorXd::Zero(T + 3);
  v(0) = A_(T, 0) * k.C_star_star;
  for (Idx j = 0; j <= T; ++j) v(0) += A_(T, 2 + j) * k.C_theta_star(j);
  v(1) = p_.sigma2 * A_(T, 1);
  for (Idx i = 0; i <= T; ++i) {
    double acc = A_(T, 0) * k.C_theta_star(i);
    for (Idx j = 0; j <= T; ++j) acc += A_(T, 2 + j) * k.C_theta(i, j);
    v(2 + i) = acc;
  }
  for (Idx s = 0; s <= T; ++s) {
    double acc = 0.0;
    for (Idx b = 0; b <= 2 + s; ++b) acc += v(b) * A_(s, b);
    k.C_eta(T, s) = k.C_eta(s, T) = db2 * acc;
  }
  // responses
  for (Idx s = 0; s < T; ++s) {
    double acc = k.R_theta(T, s);
    for (Idx r = s + 1; r < T; ++r) acc -= k.R_theta(T, r) * deta_(r, s);
    deta_(T, s) = beta * acc;
    k.R_eta(T, s) = db * deta_(T, s);
  }
  double acc = 0.0;
  for (Idx s = 0; s < T; ++s) acc += k.R_theta(T, s) * (dstar_(s) + 1.0);
  dstar_(T) = -beta * acc;
  k.R_eta_star(T) = db * dstar_(T);
}

KernelTable propagate_eta(const KernelTable& theta_side, double sigma2, double delta, double beta) {
  KernelTable k = theta_side;
  EtaPropagator eta({sigma2, delta, beta}, k.n_steps);
  for (std::size_t t = 0; t <= k.n_steps; ++t) eta.step(t, k);
  return k;
}

// ---- Monte Carlo theta-side ------------------------------------------------

namespace {

std::size_t tri(std::size_t t, std::size_t s) { return t * (t - 1) / 2 + s; }

class ThetaSide {
 public:
  ThetaSide(const ModelParams& p, const PriorSpec& spec, std::size_t n_paths, std::uint64_t seed,
            const DmftOptions& opt)
      : p_(p), spec_(spec), n_(n_paths), N_(p.n_steps()), opt_(opt),
        urng_(seed, streams::dmft_u), brng_(seed, streams::dmft_brownian), irng_(seed, streams::dmft_init) {
    if (n_paths < 100) throw DomainError("solve_dmft: need at least 100 paths");
    const bool cc = spec.nominal.constant_curvature();
    switch (opt.response_mode) {
      case ResponseMode::Auto: shared_ = cc; break;
      case ResponseMode::Shared:
        if (!cc) throw UnsupportedError("shared response requires a prior with theta-independent curvature");
        shared_ = true;
        break;
      case ResponseMode::PerPath: shared_ = false; break;
    }
    if (!shared_) {
      const double bytes = static_cast<double>(n_) * static_cast<double>(N_) * static_cast<double>(N_ + 1) / 2.0 * 8.0;
      if (bytes > opt.memory_cap_bytes) {
        std::ostringstream os;
        os << "per-path response storage needs " << bytes / (1 << 20) << " MiB, above the cap of "
           << opt.memory_cap_bytes / (1 << 20) << " MiB; reduce paths to at most "
           << static_cast<std::size_t>(opt.memory_cap_bytes / (8.0 * N_ * (N_ + 1) / 2.0)) << " or raise the cap";
        throw DomainError(os.str());
      }
      resp_.assign(n_ * (N_ * (N_ + 1) / 2), 0.0);
    } else {
      shared_resp_ = Eigen::MatrixXd::Zero(ix(N_ + 1), ix(N_ + 1));
    }
    ens_.n_paths = n_;
    ens_.n_steps = N_;
    ens_.theta.setZero(ix(n_), ix(N_ + 1));
    ens_.z.setZero(ix(n_), ix(N_ + 1));
    ens_.theta_star.resize(ix(n_));
  }

  bool shared() const { return shared_; }

  void init(KernelTable& k, bool set_alpha) {
    const PriorSampler star(spec_.truth, spec_.alpha_star);
    std::optional<PriorSampler> init_s;
    if (spec_.init == InitLaw::FromPrior) init_s.emplace(spec_.nominal, spec_.alpha0);
    for (std::size_t q = 0; q < n_; ++q) {
      ens_.theta_star(ix(q)) = star(irng_.substream(0).uniform(q), irng_.substream(1).normal(q));
      double t0 = 0.0;
      if (spec_.init == InitLaw::StandardNormal) t0 = irng_.substream(2).normal(q);
      if (init_s) t0 = (*init_s)(irng_.substream(3).uniform(q), irng_.substream(4).normal(q));
      ens_.theta(ix(q), 0) = t0;
    }
    const auto th0 = ens_.theta.col(0).array();
    const auto ts = ens_.theta_star.array();
    auto mean_se = [&](const Eigen::ArrayXd& x) {
      const double m = x.mean();
      const double var = (x - m).square().sum() / static_cast<double>(n_ - 1);
      return std::pair{m, std::sqrt(var / static_cast<double>(n_))};
    };
    std::tie(k.C_theta(0, 0), k.C_theta_se(0, 0)) = mean_se(th0 * th0);
    std::tie(k.C_theta_star(0), k.C_theta_star_se(0)) = mean_se(th0 * ts);
    std::tie(k.C_star_star, k.C_star_star_se) = mean_se(ts * ts);
    if (set_alpha)
      for (std::size_t j = 0; j < spec_.alpha0.size(); ++j) k.alpha(0, ix(j)) = spec_.alpha0[j];
  }

  // theta^t -> theta^{t+1} for every path; fills row t+1 of the theta-side kernels
  void advance(std::size_t t, KernelTable& k, std::span<const double> lrow, bool update_alpha) {
    const std::size_t K = static_cast<std::size_t>(k.alpha.cols());
    std::vector<double> alpha(K);
    for (std::size_t j = 0; j < K; ++j) alpha[j] = k.alpha(ix(t), ix(j));
    const double g = p_.gamma_step, db = p_.delta * p_.beta;
    const double noise = std::sqrt(2.0 * g);
    const std::size_t W = N_ + 1;
    std::vector<double> reta(t);
    for (std::size_t s = 0; s < t; ++s) reta[s] = k.R_eta(ix(t), ix(s));

    if (shared_) {
      const double curv = spec_.nominal.score_derivative(0.0, alpha);
      update_response_row(t, curv, reta, [&](std::size_t a, std::size_t b) -> double& { return shared_resp_(ix(a), ix(b)); });
    }

    const std::size_t n_chunks = (n_ + kChunk - 1) / kChunk;
    const std::size_t width = t + 2;  // s = 0..t+1
    struct Partial {
      std::vector<double> c, c2, r, r2, ga;
      double cs = 0, cs2 = 0;
    };
    std::vector<Partial> parts(n_chunks);
    for_each_chunk(n_, kChunk, opt_.threads, [&](std::size_t c, std::size_t b, std::size_t e) {
      Partial& P = parts[c];
      P.c.assign(width, 0.0);
      P.c2.assign(width, 0.0);
      if (!shared_) {
        P.r.assign(t + 1, 0.0);
        P.r2.assign(t + 1, 0.0);
      }
      std::vector<double> samples;
      samples.reserve(e - b);
      for (std::size_t q = b; q < e; ++q) {
        double* th = ens_.theta.row(ix(q)).data();
        double* z = ens_.z.row(ix(q)).data();
        const double ts = ens_.theta_star(ix(q));
        const double x = th[t];
        samples.push_back(x);
        z[t] = urng_.normal(q * W + t);
        double u = 0.0;
        for (std::size_t j = 0; j <= t; ++j) u += lrow[j] * z[j];
        double mem = 0.0;
        for (std::size_t s = 0; s < t; ++s) mem += reta[s] * (th[s] - ts);
        const double drift = -db * (x - ts) + spec_.nominal.score(x, alpha) + mem + u;
        const double xn = x + g * drift + noise * brng_.normal(q * W + t);
        if (!std::isfinite(xn)) throw DivergenceError("solve_dmft: path " + std::to_string(q) + " diverged", t);
        th[t + 1] = xn;
        if (!shared_) {
          double* rp = resp_.data() + q * (N_ * (N_ + 1) / 2);
          update_response_row(t, spec_.nominal.score_derivative(x, alpha), reta,
                              [&](std::size_t a, std::size_t bb) -> double& { return rp[tri(a, bb)]; });
          for (std::size_t s = 0; s <= t; ++s) {
            const double v = rp[tri(t + 1, s)];
            P.r[s] += v;
            P.r2[s] += v * v;
          }
        }
        for (std::size_t s = 0; s <= t + 1; ++s) {
          const double v = xn * th[s];
          P.c[s] += v;
          P.c2[s] += v * v;
        }
        const double vs = xn * ts;
        P.cs += vs;
        P.cs2 += vs * vs;
      }
      if (update_alpha && K > 0) {
        P.ga.assign(K, 0.0);
        spec_.nominal.alpha_gradient_sum(samples, alpha, P.ga);
      }
    });

    // fixed-order merge
    std::vector<double> c(width, 0.0), c2(width, 0.0), r(t + 1, 0.0), r2(t + 1, 0.0), ga(K, 0.0);
    double cs = 0, cs2 = 0;
    for (const auto& P : parts) {
      for (std::size_t s = 0; s < width; ++s) c[s] += P.c[s], c2[s] += P.c2[s];
      for (std::size_t s = 0; s < P.r.size(); ++s) r[s] += P.r[s], r2[s] += P.r2[s];
      for (std::size_t j = 0; j < P.ga.size(); ++j) ga[j] += P.ga[j];
      cs += P.cs;
      cs2 += P.cs2;
    }
    const double n = static_cast<double>(n_);
    auto se = [&](double s1, double s2) { return std::sqrt(std::max(0.0, (s2 - s1 * s1 / n) / (n - 1.0)) / n); };
    const Idx T1 = ix(t + 1);
    for (std::size_t s = 0; s < width; ++s) {
      k.C_theta(T1, ix(s)) = k.C_theta(ix(s), T1) = c[s] / n;
      k.C_theta_se(T1, ix(s)) = k.C_theta_se(ix(s), T1) = se(c[s], c2[s]);
    }
    k.C_theta_star(T1) = cs / n;
    k.C_theta_star_se(T1) = se(cs, cs2);
    for (std::size_t s = 0; s <= t; ++s) {
      if (shared_) {
        k.R_theta(T1, ix(s)) = shared_resp_(T1, ix(s));
      } else {
        k.R_theta(T1, ix(s)) = r[s] / n;
        k.R_theta_se(T1, ix(s)) = se(r[s], r2[s]);
      }
    }
    if (update_alpha) {
      std::vector<double> G(K);
      for (std::size_t j = 0; j < K; ++j) G[j] = ga[j] / n;
      if (spec_.regularizer && K > 0) {
        std::vector<double> rg(K);
        spec_.regularizer->gradient(alpha, rg);
        for (std::size_t j = 0; j < K; ++j) G[j] -= rg[j];
      }
      for (std::size_t j = 0; j < K; ++j) {
        k.alpha(T1, ix(j)) = alpha[j] + g * G[j];
        if (!std::isfinite(k.alpha(T1, ix(j)))) throw DivergenceError("solve_dmft: alpha diverged", t + 1);
      }
    }
  }

  // eta-side Monte Carlo error: xi^t restricted to the w-block is a fixed linear
  // combination of the ensemble's (theta*, theta^0..theta^t).
  void eta_stderr(KernelTable& k, const EtaPropagator& eta) const {
    const std::size_t W = N_ + 1;
    const double pref = p_.delta * p_.beta * p_.beta;
    Eigen::MatrixXd coef(ix(W), ix(W + 1));  // [w*, w^0..w^N]
    for (std::size_t t = 0; t < W; ++t) {
      coef(ix(t), 0) = eta.coefficient(t, 0);
      for (std::size_t j = 0; j < W; ++j) coef(ix(t), ix(j + 1)) = eta.coefficient(t, 2 + j);
    }
    const std::size_t n_chunks = (n_ + kChunk - 1) / kChunk;
    std::vector<Eigen::MatrixXd> s1(n_chunks), s2(n_chunks);
    for_each_chunk(n_, kChunk, opt_.threads, [&](std::size_t c, std::size_t b, std::size_t e) {
      s1[c] = Eigen::MatrixXd::Zero(ix(W), ix(W));
      s2[c] = Eigen::MatrixXd::Zero(ix(W), ix(W));
      std::vector<double> zeta(W);
      for (std::size_t q = b; q < e; ++q) {
        const double* th = ens_.theta.row(ix(q)).data();
        const double ts = ens_.theta_star(ix(q));
        for (std::size_t t = 0; t < W; ++t) {
          double acc = coef(ix(t), 0) * ts;
          for (std::size_t j = 0; j <= t; ++j) acc += coef(ix(t), ix(j + 1)) * th[j];
          zeta[t] = acc;
        }
        for (std::size_t t = 0; t < W; ++t)
          for (std::size_t s = 0; s <= t; ++s) {
            const double v = zeta[t] * zeta[s];
            s1[c](ix(t), ix(s)) += v;
            s2[c](ix(t), ix(s)) += v * v;
          }
      }
    });
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(ix(W), ix(W)), b = a;
    for (std::size_t c = 0; c < n_chunks; ++c) a += s1[c], b += s2[c];
    const double n = static_cast<double>(n_);
    for (std::size_t t = 0; t < W; ++t)
      for (std::size_t s = 0; s <= t; ++s) {
        const double m1 = a(ix(t), ix(s)), m2 = b(ix(t), ix(s));
        const double v = pref * std::sqrt(std::max(0.0, (m2 - m1 * m1 / n) / (n - 1.0)) / n);
        k.C_eta_se(ix(t), ix(s)) = k.C_eta_se(ix(s), ix(t)) = v;
      }
  }

  PathEnsemble release() { return std::move(ens_); }

 private:
  // r(t+1, t) = gamma; r(t+1, s) = r(t,s) + gamma[(curv - delta beta) r(t,s) + sum_{q=s+1}^{t-1} R_eta(t,q) r(q,s)]
  template <class Acc>
  void update_response_row(std::size_t t, double curv, const std::vector<double>& reta, Acc&& r) const {
    const double g = p_.gamma_step;
    const double damp = 1.0 + g * (curv - p_.delta * p_.beta);
    for (std::size_t s = 0; s < t; ++s) {
      double mem = 0.0;
      for (std::size_t q = s + 1; q < t; ++q) mem += reta[q] * r(q, s);
      r(t + 1, s) = damp * r(t, s) + g * mem;
    }
    r(t + 1, t) = g;
  }

  const ModelParams& p_;
  const PriorSpec& spec_;
  std::size_t n_, N_;
  DmftOptions opt_;
  CounterRng urng_, brng_, irng_;
  bool shared_ = true;
  std::vector<double> resp_;
  Eigen::MatrixXd shared_resp_;
  PathEnsemble ens_;
};

void extend_u_factor(GrowingCholesky& chol, const KernelTable& k, std::size_t t) {
  std::vector<double> row(t + 1);
  for (std::size_t s = 0; s <= t; ++s) row[s] = k.C_eta(ix(t), ix(s));
  chol.extend(row);
}

}  // namespace

DmftResult solve_dmft(const ModelParams& params, const PriorSpec& spec, std::size_t n_paths, std::uint64_t seed,
                      const DmftOptions& options) {
  params.validate();
  spec.validate();
  const std::size_t N = params.n_steps();
  DmftResult res;
  KernelTable& k = res.table;
  k = KernelTable::zeros(params.gamma_step, N, spec.alpha0.size());
  k.source = "dmft-mc";
  ThetaSide th(params, spec, n_paths, seed, options);
  EtaPropagator eta({params.sigma2, params.delta, params.beta}, N);
  GrowingCholesky chol;
  th.init(k, true);
  eta.step(0, k);
  for (std::size_t t = 0; t < N; ++t) {
    extend_u_factor(chol, k, t);
    th.advance(t, k, chol.row(t), true);
    eta.step(t + 1, k);
  }
  if (options.eta_stderr) th.eta_stderr(k, eta);
  res.diagnostics.shared_response = th.shared();
  res.diagnostics.cholesky = chol.stats();
  if (options.retain_paths) res.paths = th.release();
  return res;
}

KernelTable rerun_theta_side(const KernelTable& table, const ModelParams& params, const PriorSpec& spec,
                             std::size_t n_paths, std::uint64_t seed, const DmftOptions& options) {
  params.validate();
  spec.validate();
  const std::size_t N = params.n_steps();
  if (table.n_steps != N || std::abs(table.gamma - params.gamma_step) > 1e-15)
    throw DomainError("rerun_theta_side: table grid does not match params");
  KernelTable k = KernelTable::zeros(params.gamma_step, N, spec.alpha0.size());
  k.C_eta = table.C_eta;
  k.R_eta = table.R_eta;
  k.R_eta_star = table.R_eta_star;
  k.alpha = table.alpha;
  k.source = "dmft-mc";
  ThetaSide th(params, spec, n_paths, seed, options);
  GrowingCholesky chol;
  th.init(k, false);
  for (std::size_t t = 0; t < N; ++t) {
    extend_u_factor(chol, k, t);
    th.advance(t, k, chol.row(t), false);
  }
  return k;
}

// ---- linear Gaussian case ----------------------------------------------------

KernelTable linear_gaussian_dmft(const ModelParams& params, double lambda, double tau_star2) {
  params.validate();
  if (!(lambda >= 0.0) || !(tau_star2 >= 0.0)) throw DomainError("linear_gaussian_dmft: lambda, tau*^2 must be >= 0");
  const std::size_t N = params.n_steps();
  const double g = params.gamma_step, db = params.delta * params.beta;
  KernelTable k = KernelTable::zeros(g, N, 0);
  k.source = "dmft-linear";
  k.C_star_star = tau_star2;
  EtaPropagator eta({params.sigma2, params.delta, params.beta}, N);
  eta.step(0, k);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(ix(N + 1));  // theta^t coefficient on theta*
  auto& R = k.R_theta;
  const double damp = 1.0 + g * (-lambda - db);
  std::vector<double> w;
  for (std::size_t t = 0; t < N; ++t) {
    const Idx T = ix(t), T1 = ix(t + 1);
    for (Idx s = 0; s < T; ++s) {
      double mem = 0.0;
      for (Idx q = s + 1; q < T; ++q) mem += k.R_eta(T, q) * R(q, s);
      R(T1, s) = damp * R(T, s) + g * mem;
    }
    R(T1, T) = g;
    double mem = 0.0;
    for (Idx s = 0; s < T; ++s) mem += k.R_eta(T, s) * (c(s) - 1.0);
    c(T1) = c(T) + g * (-db * c(T) + db - lambda * c(T) + mem);
    // w_j = sum_{q<=t} R(t+1,q) C_eta(q,j)
    w.assign(t + 1, 0.0);
    for (Idx q = 0; q <= T; ++q) {
      const double rq = R(T1, q);
      for (Idx j = 0; j <= T; ++j) w[static_cast<std::size_t>(j)] += rq * k.C_eta(q, j);
    }
    for (Idx s = 0; s <= T1; ++s) {
      double field = 0.0, brown = 0.0;
      for (Idx j = 0; j < s; ++j) {
        field += w[static_cast<std::size_t>(j)] * R(s, j);
        brown += R(T1, j) * R(s, j);
      }
      k.C_theta(T1, s) = k.C_theta(s, T1) = tau_star2 * c(T1) * c(s) + field + (2.0 / g) * brown;
    }
    k.C_theta_star(T1) = tau_star2 * c(T1);
    eta.step(t + 1, k);
  }
  return k;
}

KernelTable linear_gaussian_dmft(const ModelParams& params, const PriorSpec& spec) {
  const auto* gf = std::get_if<GaussianFixed>(&spec.nominal.family());
  if (!gf) throw UnsupportedError("linear_gaussian_dmft: nominal prior must be GaussianFixed, got " + spec.nominal.name());
  if (spec.init != InitLaw::Zero) throw UnsupportedError("linear_gaussian_dmft: requires theta^0 = 0");
  return linear_gaussian_dmft(params, gf->lambda, spec.truth.second_moment(spec.alpha_star));
}

std::vector<std::pair<double, double>> dmft_marginal_samples(const DmftResult& result, std::size_t t, std::size_t n) {
  if (!result.paths) throw DomainError("dmft_marginal_samples: path retention was disabled");
  const auto& e = *result.paths;
  if (t > e.n_steps) throw DomainError("dmft_marginal_samples: t beyond the horizon");
  if (n > e.n_paths) throw DomainError("dmft_marginal_samples: requested more samples than paths");
  std::vector<std::pair<double, double>> out(n);
  for (std::size_t q = 0; q < n; ++q) out[q] = {e.theta_star(ix(q)), e.theta(ix(q), ix(t))};
  return out;
}

}  // namespace dmftlab
