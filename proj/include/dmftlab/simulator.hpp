#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dmftlab/model.hpp"

namespace dmftlab {

enum class NoiseMode { Stochastic, FrozenZero };

// Extra drift eps * e_coord injected once, at the update from step `step`.
struct Perturbation {
  std::size_t step = 0;
  std::size_t coord = 0;
  double eps = 0.0;
};

using StepObserver = std::function<void(std::size_t step, const Eigen::VectorXd& theta, Alpha alpha)>;

struct EvolveOptions {
  std::size_t retain_every = 10;  // snapshot spacing in steps; the last step is always kept
  bool keep_residuals = false;
  std::optional<Perturbation> perturbation;
  StepObserver observer;  // called at every step 0..N before the update
};

struct Trajectory {
  double gamma = 0.0;
  std::size_t n_steps = 0;
  std::vector<std::size_t> retained;  // step indices of theta_path rows
  Eigen::MatrixXd theta_path;         // retained.size() x d
  Eigen::MatrixXd alpha_path;         // (n_steps+1) x K, every step
  Eigen::MatrixXd residual_path;      // retained.size() x n when requested
  std::uint64_t seed = 0;

  // Row of theta_path holding `step`, if retained.
  std::optional<std::size_t> row_of(std::size_t step) const;
};

Trajectory evolve(const ModelInstance& instance, const PriorSpec& spec, const ModelParams& params,
                  std::uint64_t seed, NoiseMode noise_mode, const EvolveOptions& options = {});

// Seed for replica r derived from a master seed.
std::uint64_t replica_seed(std::uint64_t seed, std::size_t replica);

struct Replica {
  ModelInstance instance;
  Trajectory trajectory;
};

// Independent instance + Brownian path per replica, run in parallel.
std::vector<Replica> run_replicas(const ModelParams& params, const PriorSpec& spec, std::uint64_t seed,
                                  std::size_t n_replicas, const EvolveOptions& options, unsigned threads,
                                  Design design = Design::Gaussian);

struct EmpiricalKernels {
  double gamma = 0.0;
  std::vector<std::size_t> steps;  // common retained steps
  Eigen::MatrixXd C_theta, C_theta_se;
  Eigen::VectorXd C_theta_star, C_theta_star_se;
  double C_star_star = 0.0, C_star_star_se = 0.0;
  Eigen::MatrixXd C_eta, C_eta_se;
  Eigen::MatrixXd alpha, alpha_se;  // every step
  std::size_t replicas = 0;
};

EmpiricalKernels empirical_kernels(std::span<const Trajectory> replicas,
                                   std::span<const ModelInstance> instances, const ModelParams& params);

enum class ResponseMethod { ExactProduct, Probe };

struct StepPair {
  std::size_t t;
  std::size_t s;
};

// Discrete (un-rescaled) traces: R_theta = (gamma/d) Tr(Omega^{t-1}...Omega^{s+1}),
// R_eta = delta beta^2 (gamma/n) Tr(X Omega^{t-1}...Omega^{s+1} X^T).
struct ResponseGrid {
  std::vector<StepPair> pairs;
  std::vector<double> R_theta, R_eta;
  std::vector<double> R_theta_se, R_eta_se;
};

ResponseGrid response_traces(const Trajectory& trajectory, const ModelInstance& instance,
                             const PriorSpec& spec, const ModelParams& params,
                             std::span<const StepPair> pairs, ResponseMethod method,
                             std::size_t n_probes = 32, std::uint64_t probe_seed = 0);

// Mean over replicas with standard error of the mean.
ResponseGrid average_responses(std::span<const ResponseGrid> grids);

// (theta_j^{t,eps} - theta_j^t)/eps for t = s+1..N (index 0 of the result is t = s+1).
// eps <= 0 selects the default 1e-4 (1 + |theta^s|/sqrt(d)).
std::vector<double> finite_diff_response(const ModelInstance& instance, const PriorSpec& spec,
                                         const ModelParams& params, std::size_t s, std::size_t j,
                                         double eps, std::uint64_t seed,
                                         NoiseMode noise_mode = NoiseMode::Stochastic);

double wasserstein2_1d(std::span<const double> sorted_a, std::span<const double> sorted_b);

// Quantile resampling of a sorted sample to m points (midpoint rule).
std::vector<double> resample_sorted(std::span<const double> sorted, std::size_t m);

}  // namespace dmftlab
