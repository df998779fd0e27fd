#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace dmftlab {

using Alpha = std::span<const double>;

struct ModelParams {
  std::size_t n = 1;
  std::size_t d = 1;
  double delta = 1.0;
  double sigma2 = 1.0;
  double beta = 1.0;
  double gamma_step = 0.01;
  double horizon = 1.0;

  // delta is derived from n and d.
  static ModelParams from_dims(std::size_t n, std::size_t d, double sigma2, double beta,
                               double gamma_step, double horizon);
  // Number of Euler steps T/gamma; throws unless T/gamma is an integer.
  std::size_t n_steps() const;
  void validate() const;
};

// ---- prior families --------------------------------------------------------
//
// alpha layouts:
//   GaussianFixed          K=0            g = N(0, 1/lambda)
//   GaussianLocation       K=1            alpha[0] = mean, fixed scale
//   GaussianMeanMixture    K=#components  alpha[k] = mean of component k
//   GaussianWeightMixture  K=#components  alpha[k] = logit of component k
//   ExpFamily              K=#statistics  natural parameters
//   Atoms                  K=0            discrete law (true prior / scalar channel only)

struct GaussianFixed {
  double lambda = 1.0;
};
struct GaussianLocation {
  double scale = 1.0;
};
struct GaussianMeanMixture {
  std::vector<double> weights;
  std::vector<double> precisions;
};
struct GaussianWeightMixture {
  std::vector<double> means;
  std::vector<double> precisions;
};
enum class Statistic { Linear, Quadratic, LogCosh };
// log g = sum_k alpha_k T_k(theta) - base_precision theta^2/2 - A(alpha)
struct ExpFamily {
  std::vector<Statistic> statistics;
  double base_precision = 1.0;
};
struct Atoms {
  std::vector<double> values;
  std::vector<double> probs;
};

using PriorFamily =
    std::variant<GaussianFixed, GaussianLocation, GaussianMeanMixture, GaussianWeightMixture,
                 ExpFamily, Atoms>;

struct GaussianComponent {
  double weight;
  double mean;
  double precision;
};

class Prior {
 public:
  Prior() = default;
  explicit Prior(PriorFamily family);

  const PriorFamily& family() const { return family_; }
  std::string name() const;
  std::size_t alpha_dim() const;
  bool has_density() const { return !std::holds_alternative<Atoms>(family_); }
  // True when d/dtheta s(theta, alpha) does not depend on theta.
  bool constant_curvature() const;

  double log_density(double theta, Alpha alpha) const;
  double score(double theta, Alpha alpha) const;             // s = d/dtheta log g
  double score_derivative(double theta, Alpha alpha) const;  // d/dtheta s
  void alpha_gradient(double theta, Alpha alpha, std::span<double> out) const;
  // Sum over samples of grad_alpha log g, into out (size K).
  void alpha_gradient_sum(std::span<const double> samples, Alpha alpha,
                          std::span<double> out) const;

  double second_moment(Alpha alpha) const;
  double mean(Alpha alpha) const;

  // Mixture-of-Gaussians view (Gaussian families only).
  std::optional<std::vector<GaussianComponent>> gaussian_components(Alpha alpha) const;

  // ExpFamily helpers
  double log_partition(Alpha alpha) const;
  std::vector<double> mean_statistics(Alpha alpha) const;
  // [-L, L] holding all but ~1e-12 of the mass (ExpFamily only)
  double support_radius(Alpha alpha) const;

  void check_alpha(Alpha alpha) const;

 private:
  PriorFamily family_ = GaussianFixed{};
};

// Draws from a prior at fixed alpha, given one uniform and one standard normal.
class PriorSampler {
 public:
  PriorSampler(const Prior& prior, Alpha alpha);
  double operator()(double uniform, double normal) const;

 private:
  std::vector<GaussianComponent> comps_;
  std::vector<double> cum_;
  std::vector<double> atoms_;
  // inverse-cdf table for ExpFamily
  std::vector<double> grid_, cdf_;
};

// R(a) = 0 for |a| <= D, x^3/(3 eps^2) for x = |a|-D in (0, eps], eps/3 + (x-eps) beyond.
struct SmoothHinge {
  double radius = 10.0;
  double width = 1.0;
  double value(Alpha alpha) const;
  void gradient(Alpha alpha, std::span<double> out) const;
};

enum class InitLaw { Zero, StandardNormal, FromPrior };

struct PriorSpec {
  Prior nominal;
  std::vector<double> alpha0;
  Prior truth;
  std::vector<double> alpha_star;
  InitLaw init = InitLaw::Zero;
  std::optional<SmoothHinge> regularizer;

  void validate() const;
};

double drift_s(double theta, Alpha alpha, const Prior& prior);

// Empirical mean of grad_alpha log g(theta_j, alpha) minus grad R(alpha).
std::vector<double> gradient_map_G(Alpha alpha, std::span<const double> samples,
                                   const Prior& prior,
                                   const std::optional<SmoothHinge>& regularizer = std::nullopt);

enum class Design { Gaussian, Rademacher };

struct ModelInstance {
  Eigen::MatrixXd X;
  Eigen::VectorXd theta_star;
  Eigen::VectorXd eps;
  Eigen::VectorXd y;
  Eigen::VectorXd theta0;
  std::uint64_t seed = 0;
  std::size_t n() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(X.cols()); }
};

// Pure function of (params, spec, seed).  sigma2 = 0 is accepted here and
// gives a noiseless instance.
ModelInstance sample_instance(const ModelParams& params, const PriorSpec& spec,
                              std::uint64_t seed, Design design = Design::Gaussian);

}  // namespace dmftlab
