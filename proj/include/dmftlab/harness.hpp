#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmftlab/dmft.hpp"
#include "dmftlab/equilibrium.hpp"
#include "dmftlab/model.hpp"
#include "dmftlab/simulator.hpp"
#include "json.hpp"

namespace dmftlab {

enum class Pipeline { Simulate, Dmft, DmftLinear, Oracle, Equilibrium, Compare, Response };

Pipeline parse_pipeline(const std::string& name);
std::string pipeline_name(Pipeline p);

struct SimulateConfig {
  std::size_t replicas = 20;
  Design design = Design::Gaussian;
  std::string response = "auto";  // auto | exact | probe | none
  std::size_t probes = 32;
  std::size_t response_replicas = 0;  // 0 = all replicas
};

struct DmftConfig {
  std::size_t paths = 20000;
  ResponseMode response_mode = ResponseMode::Auto;
  double memory_cap_gib = 2.0;
};

struct EquilibriumConfig {
  std::string sweep_param;  // "", "sigma2" or "delta"
  std::vector<double> sweep_values;
  double tolerance = 1e-12;
};

struct ResponseConfig {
  double s = 0.5;       // physical perturbation time
  std::size_t coord = 0;
  double eps = 0.0;     // <= 0: default rule
  std::string method = "exact";
  std::size_t probes = 32;
};

struct CompareConfig {
  // computed source names, or "dir:<path>" for a previous run's output directory
  std::vector<std::string> sources = {"mp-oracle", "dmft-linear"};
  double max_abs = 0.05;
  std::map<std::string, double> per_kernel;  // overrides by kernel name
  double w2_tolerance = 0.05;
};

struct RunConfig {
  std::string name;
  std::optional<Pipeline> pipeline;
  ModelParams params;
  PriorSpec prior;
  double grid_spacing = 0.25;  // physical spacing of the output grid
  std::size_t oracle_nodes = 400;
  SimulateConfig simulate;
  DmftConfig dmft;
  EquilibriumConfig equilibrium;
  ResponseConfig response;
  CompareConfig compare;
  std::uint64_t seed = 0;
  std::string output_dir;
  unsigned threads = 1;
  nlohmann::json raw;  // validated input document

  // config hash: FNV-1a of the canonical dump of `raw`
  std::string hash() const;
};

// Throws ValidationError listing every offending field.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::filesystem::path& path);

// Kernels on a physical output grid; R's in density form (raw discrete / gamma).
// Entries a source does not provide are NaN.
struct GridKernels {
  std::string source;
  double native_gamma = 0.0;
  std::vector<double> times;
  Eigen::MatrixXd C_theta, C_theta_se, C_eta, C_eta_se;
  Eigen::MatrixXd R_theta, R_theta_se, R_eta, R_eta_se;  // t > s only
  Eigen::VectorXd C_theta_star, C_theta_star_se, R_eta_star;
  double C_star_star = NAN, C_star_star_se = NAN;
  Eigen::MatrixXd alpha, alpha_se;  // times x K

  static GridKernels empty(const std::string& source, double gamma, const std::vector<double>& times,
                           std::size_t alpha_dim);
};

// Restricts the finer table to the coarser step; identity on equal grids.
// Throws DomainError unless one step is an integer multiple of the other.
std::pair<KernelTable, KernelTable> grid_align(const KernelTable& a, const KernelTable& b);
KernelTable restrict_table(const KernelTable& t, double coarse_gamma);

std::vector<double> output_grid(double spacing, double horizon, double gamma);
GridKernels to_grid(const KernelTable& table, const std::vector<double>& times);

// One CSV per kernel: <dir>/kernels_<source>_<kernel>.csv with header t,s,value,stderr.
std::vector<std::filesystem::path> write_kernels(const GridKernels& k, const std::filesystem::path& dir);
GridKernels read_kernels(const std::filesystem::path& dir, const std::string& source);

struct KernelDiscrepancy {
  std::string kernel;
  double max_abs = 0.0;
  double rms = 0.0;
  std::size_t entries = 0;
  double tolerance = 0.0;
  bool pass = true;
};

struct CompareReport {
  std::string source_a, source_b;
  std::vector<double> times;
  std::vector<KernelDiscrepancy> kernels;
  std::vector<std::pair<double, double>> w2;  // (time, distance)
  double w2_tolerance = 0.0;
  bool pass = true;
  nlohmann::json to_json() const;
};

CompareReport compare_kernels(const GridKernels& a, const GridKernels& b, double max_abs,
                              const std::map<std::string, double>& per_kernel = {});

// ---- sources ---------------------------------------------------------------

struct SimulatorRun {
  GridKernels kernels;
  // pooled coordinates of theta at each output time (sorted)
  std::vector<std::vector<double>> marginals;
};

SimulatorRun simulate_source(const RunConfig& cfg, bool want_marginals);
GridKernels dmft_source(const RunConfig& cfg, std::vector<std::vector<double>>* marginals);
GridKernels dmft_linear_source(const RunConfig& cfg);
GridKernels oracle_source(const RunConfig& cfg);

// Output directory precedence: --out, DMFT_LAB_OUT, config output_dir, ./out.
std::filesystem::path resolve_output_dir(const std::optional<std::string>& cli_out, const RunConfig& cfg);

struct RunResult {
  int exit_code = 0;
  std::vector<std::filesystem::path> artifacts;
  std::string summary;
};

RunResult run(const RunConfig& cfg, Pipeline pipeline, const std::filesystem::path& out_dir);

std::string git_describe();

}  // namespace dmftlab
