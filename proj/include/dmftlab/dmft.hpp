#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmftlab/model.hpp"

namespace dmftlab {

// Kernels on the grid t = 0..N (time t*gamma).  R_theta and R_eta hold the raw
// discrete responses (R_theta(s+1,s) = gamma); divide by gamma for the
// continuous-time density.  R_eta_star is a sum of O(gamma) terms and is
// stored as is.
struct KernelTable {
  double gamma = 0.0;
  std::size_t n_steps = 0;
  Eigen::MatrixXd C_theta, C_eta;  // symmetric
  Eigen::MatrixXd R_theta, R_eta;  // strictly lower triangular
  Eigen::VectorXd C_theta_star;
  double C_star_star = 0.0;
  Eigen::VectorXd R_eta_star;
  Eigen::MatrixXd alpha;  // (N+1) x K

  // Monte Carlo standard errors; zero where the entry is deterministic.
  Eigen::MatrixXd C_theta_se, C_eta_se, R_theta_se;
  Eigen::VectorXd C_theta_star_se;
  double C_star_star_se = 0.0;

  std::string source;

  static KernelTable zeros(double gamma, std::size_t n_steps, std::size_t alpha_dim);
  double time(std::size_t t) const { return static_cast<double>(t) * gamma; }
  // grid index of a physical time; throws if off-grid
  std::size_t index_of(double time) const;
};

// Lower-triangular factor of a covariance that grows one variable at a time.
class GrowingCholesky {
 public:
  struct Stats {
    std::size_t clamped = 0;        // conditional variances in [-tol, 0) set to 0
    std::size_t jittered = 0;       // rows needing a diagonal shift
    double max_jitter = 0.0;
    std::vector<std::string> log;
  };

  std::size_t size() const { return rows_.size(); }
  // cov_row = covariances of the new variable with variables 0..k-1, then its variance.
  // Returns the new factor row; the last entry is the conditional standard deviation.
  std::span<const double> extend(std::span<const double> cov_row);
  std::span<const double> row(std::size_t i) const { return rows_.at(i); }
  // Solves L z = draws, with z = 0 along degenerate (zero-pivot) directions.
  std::vector<double> whiten(std::span<const double> draws) const;
  const Stats& stats() const { return stats_; }

 private:
  std::vector<std::vector<double>> rows_;
  Stats stats_;
};

// Extends the factor by one variable and returns a draw from its exact
// conditional law given past_draws (draws of the existing variables).
double extend_conditional_gaussian(GrowingCholesky& chol, std::span<const double> new_cov_row,
                                   std::span<const double> past_draws, double standard_normal);

struct EtaSideParams {
  double sigma2 = 1.0;
  double delta = 1.0;
  double beta = 1.0;
};

// Deterministic eta-side.  xi^t = eta^t + w* - eps is linear in (w*, eps, w^0..w^t);
// the coefficient vectors are propagated and contracted against the joint
// covariance, so C_eta carries no sampling error of its own.
class EtaPropagator {
 public:
  EtaPropagator(EtaSideParams p, std::size_t n_steps);
  // Needs C_theta(0..t,0..t), C_theta_star(0..t), C_star_star and R_theta(t, 0..t-1).
  // Fills C_eta(t, 0..t) (mirrored), R_eta(t, 0..t-1) and R_eta_star(t).
  void step(std::size_t t, KernelTable& table);
  // coefficient of xi^t on basis index b: 0 = w*, 1 = eps, 2+k = w^k
  double coefficient(std::size_t t, std::size_t b) const { return A_(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(b)); }
  const EtaSideParams& params() const { return p_; }

 private:
  EtaSideParams p_;
  Eigen::MatrixXd A_;      // (N+1) x (N+3)
  Eigen::MatrixXd deta_;   // d eta^t / d w^s
  Eigen::VectorXd dstar_;  // d eta^t / d w*
};

// Whole-grid eta-side from a table whose theta-side is complete.
KernelTable propagate_eta(const KernelTable& theta_side, double sigma2, double delta, double beta);

enum class ResponseMode { Auto, Shared, PerPath };

struct DmftOptions {
  bool retain_paths = false;
  ResponseMode response_mode = ResponseMode::Auto;
  double memory_cap_bytes = 2.0 * 1024 * 1024 * 1024;
  unsigned threads = 1;
  bool eta_stderr = true;
};

struct PathEnsemble {
  std::size_t n_paths = 0;
  std::size_t n_steps = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> theta;  // n_paths x (N+1)
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> z;      // whitened u draws
  Eigen::VectorXd theta_star;
};

struct DmftDiagnostics {
  bool shared_response = true;
  GrowingCholesky::Stats cholesky;
};

struct DmftResult {
  KernelTable table;
  std::optional<PathEnsemble> paths;
  DmftDiagnostics diagnostics;
};

DmftResult solve_dmft(const ModelParams& params, const PriorSpec& spec, std::size_t n_paths,
                      std::uint64_t seed, const DmftOptions& options = {});

// Runs only the theta-side with C_eta, R_eta and alpha frozen from `table`;
// returns a table with fresh C_theta, C_theta_star, R_theta (and their errors).
KernelTable rerun_theta_side(const KernelTable& table, const ModelParams& params, const PriorSpec& spec,
                             std::size_t n_paths, std::uint64_t seed, const DmftOptions& options = {});

// Exact kernels for s(theta) = -lambda theta, theta^0 = 0, E theta*^2 = tau_star2.
KernelTable linear_gaussian_dmft(const ModelParams& params, double lambda, double tau_star2);
// Same, reading lambda / tau*^2 from a prior spec; rejects other families.
KernelTable linear_gaussian_dmft(const ModelParams& params, const PriorSpec& spec);

// (theta*, theta^t) pairs of the first n retained paths at grid index t.
std::vector<std::pair<double, double>> dmft_marginal_samples(const DmftResult& result, std::size_t t,
                                                             std::size_t n);

}  // namespace dmftlab
