// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmftlab/dmft.hpp"
#include "dmftlab/equilibrium.hpp"
#include "dmftlab/harness.hpp"
#include "dmftlab/mp_oracle.hpp"
#include "dmftlab/simulator.hpp"

using namespace dmftlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void report(int n, bool pass, const std::string& what, const std::string& detail) {
  std::printf("[%s] criterion %d: %s | %s\n", pass ? "PASS" : "FAIL", n, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

json default_doc() {
  std::ifstream in(fs::path(DMFTLAB_CONFIG_DIR) / "gaussian-default.json");
  return json::parse(in);
}

ModelParams default_params(double gamma = 0.01, double horizon = 2.0) {
  return ModelParams::from_dims(800, 400, 1.0, 1.0, gamma, horizon);
}

PriorSpec gaussian_spec() {
  return {Prior(GaussianFixed{1.0}), {}, Prior(GaussianFixed{1.0}), {}, InitLaw::Zero, {}};
}

const OracleParams kOracle{1.0, 1.0, 2.0, 1.0};

// ---- 1 ---------------------------------------------------------------------

void criterion1() {
  Stopwatch sw;
  const auto cfg = parse_config(default_doc());
  const OracleParams op{1.0, cfg.params.sigma2, cfg.params.delta, 1.0};
  const auto law = mp_quadrature(cfg.params.delta, cfg.oracle_nodes);
  const auto k0 = resp_kernels(0.0, op, law);
  double worst = 0.0;
  worst = std::max(worst, std::abs(k0.alpha_mp - 1.0));
  worst = std::max(worst, std::abs(k0.gamma_mp));
  worst = std::max(worst, std::abs(k0.beta_mp + 1.0 / op.sigma2));
  const double mass = law.integrate([](double) { return 1.0; });
  const double mean = law.integrate([](double x) { return x; });
  worst = std::max({worst, std::abs(mass - 1.0), std::abs(mean - 1.0)});
  double mz = 0.0;
  for (double z : {-0.5, -1.0, -5.0})
    mz = std::max(mz, std::abs(law.integrate([&](double x) { return 1.0 / (x - z); }) - stieltjes_m(z, op.delta)));
  std::vector<double> taus;
  for (int i = 0; i <= 200; ++i) taus.push_back(0.01 * i);
  const double fdt = fdt_check(taus, op, law);
  const double secs = sw.seconds();
  const bool pass = worst <= 1e-10 && mz <= 1e-10 && fdt <= 1e-10 && secs < 1.0;
  report(1, pass, "oracle self-consistency",
         "kernels at 0 / mass / mean max err " + fmt("%.2e", worst) + ", m(z) err " + fmt("%.2e", mz) +
             ", FDT residual " + fmt("%.2e", fdt) + ", " + fmt("%.3f", secs) + " s");
}

// ---- 2 ---------------------------------------------------------------------

struct KernelErrors {
  std::map<std::string, double> by_kernel;
  double max() const {
    double m = 0.0;
    for (const auto& [k, v] : by_kernel) m = std::max(m, v);
    return m;
  }
  std::string str() const {
    std::string s;
    for (const auto& [k, v] : by_kernel) s += (s.empty() ? "" : ", ") + k + "=" + fmt("%.4f", v);
    return s;
  }
};

// linear_gaussian_dmft against the oracle on {0, 0.25, ..., 2}^2, in the oracle's units
KernelErrors linear_vs_oracle(double gamma) {
  const auto p = default_params(gamma);
  const auto k = linear_gaussian_dmft(p, 1.0, 1.0);
  const auto law = mp_quadrature(2.0, 400);
  const double to_beta = -p.sigma2 / p.delta;
  KernelErrors e;
  auto upd = [&](const char* name, double v) { e.by_kernel[name] = std::max(e.by_kernel[name], std::abs(v)); };
  for (int i = 0; i <= 8; ++i) {
    const double t = 0.25 * i;
    const auto I = static_cast<Eigen::Index>(k.index_of(t));
    const auto rt = resp_kernels(t, kOracle, law);
    upd("R_eta_star", k.R_eta_star(I) * to_beta - rt.gamma_mp);
    for (int j = 0; j <= i; ++j) {
      const double s = 0.25 * j;
      const auto J = static_cast<Eigen::Index>(k.index_of(s));
      const auto ck = corr_kernels(t, s, kOracle, law);
      upd("C_theta", k.C_theta(I, J) - ck.C_theta);
      upd("C_eta", k.C_eta(I, J) - ck.C_eta);
      if (j == 0) upd("C_theta_star", k.C_theta_star(I) - ck.C_theta_star);
      if (j < i) {
        const auto rk = resp_kernels(t - s, kOracle, law);
        upd("R_theta", k.R_theta(I, J) / gamma - rk.alpha_mp);
        upd("R_eta", k.R_eta(I, J) / gamma * to_beta - rk.beta_mp);
      }
    }
  }
  return e;
}

void criterion2() {
  Stopwatch sw;
  const auto e1 = linear_vs_oracle(0.01);
  const auto e2 = linear_vs_oracle(0.005);
  const double secs = sw.seconds();
  const bool pass = e1.max() <= 0.01 && e2.max() < e1.max() && secs < 30.0;
  report(2, pass, "deterministic DMFT vs oracle",
         "gamma=0.01 max " + fmt("%.4f", e1.max()) + " [" + e1.str() + "]; gamma=0.005 max " + fmt("%.4f", e2.max()) +
             " [" + e2.str() + "]; " + fmt("%.1f", secs) + " s");
}

// ---- 3 and 5 ---------------------------------------------------------------

void criterion3_and_5() {
  Stopwatch sw;
  const auto p = default_params();
  const auto mc = solve_dmft(p, gaussian_spec(), 20000, 20240601);
  const auto lin = linear_gaussian_dmft(p, 1.0, 1.0);
  const double secs = sw.seconds();
  const auto& a = mc.table;
  double max_z = 0.0, max_abs = 0.0, max_det = 0.0;
  std::size_t entries = 0;
  auto cmp = [&](double x, double y, double se) {
    const double d = std::abs(x - y);
    max_abs = std::max(max_abs, d);
    ++entries;
    if (se > 0.0) max_z = std::max(max_z, d / se);
    else max_det = std::max(max_det, d);  // entries the solver computes without sampling
  };
  for (int i = 0; i <= 8; ++i) {
    const auto I = static_cast<Eigen::Index>(a.index_of(0.25 * i));
    cmp(a.C_theta_star(I), lin.C_theta_star(I), a.C_theta_star_se(I));
    cmp(a.R_eta_star(I), lin.R_eta_star(I), 0.0);
    for (int j = 0; j <= i; ++j) {
      const auto J = static_cast<Eigen::Index>(a.index_of(0.25 * j));
      cmp(a.C_theta(I, J), lin.C_theta(I, J), a.C_theta_se(I, J));
      cmp(a.C_eta(I, J), lin.C_eta(I, J), a.C_eta_se(I, J));
      if (j < i) {
        cmp(a.R_theta(I, J) / p.gamma_step, lin.R_theta(I, J) / p.gamma_step, a.R_theta_se(I, J) / p.gamma_step);
        cmp(a.R_eta(I, J) / p.gamma_step, lin.R_eta(I, J) / p.gamma_step, 0.0);
      }
    }
  }
  cmp(a.C_star_star, lin.C_star_star, a.C_star_star_se);
  const bool pass3 = max_z <= 4.0 && max_abs <= 0.05 && max_det <= 1e-10 && secs < 300.0;
  report(3, pass3, "MC DMFT vs deterministic DMFT",
         std::to_string(entries) + " entries, max |z| " + fmt("%.2f", max_z) + ", max abs " + fmt("%.4f", max_abs) +
             ", non-sampled entries max abs " + fmt("%.1e", max_det) + ", " + fmt("%.1f", secs) + " s");

  // identities, on the MC table and on a per-path (non-constant curvature) run
  PriorSpec mix{Prior(GaussianMeanMixture{{0.5, 0.5}, {2.0, 2.0}}), {-1.0, 1.0},
                Prior(GaussianMeanMixture{{0.5, 0.5}, {2.0, 2.0}}), {-1.0, 1.0}, InitLaw::Zero, {}};
  const auto pp = solve_dmft(default_params(0.02, 2.0), mix, 2000, 7).table;
  double rt = 0.0, rid = 0.0;
  for (const KernelTable* k : {&a, &pp}) {
    for (std::size_t s = 0; s < k->n_steps; ++s) {
      const auto S = static_cast<Eigen::Index>(s);
      rt = std::max(rt, std::abs(k->R_theta(S + 1, S) - k->gamma));
    }
    for (Eigen::Index t = 0; t <= static_cast<Eigen::Index>(k->n_steps); ++t) {
      double sum = 0.0;
      for (Eigen::Index s = 0; s < t; ++s) sum += k->R_eta(t, s);
      rid = std::max(rid, std::abs(k->R_eta_star(t) + sum));
    }
  }
  // simulator base case at every grid step
  const auto inst = sample_instance(p, gaussian_spec(), 11);
  EvolveOptions eo;
  eo.retain_every = 1;
  const auto tr = evolve(inst, gaussian_spec(), p, 11, NoiseMode::Stochastic, eo);
  std::vector<StepPair> pairs;
  for (std::size_t s = 0; s < p.n_steps(); ++s) pairs.push_back({s + 1, s});
  const auto g = response_traces(tr, inst, gaussian_spec(), p, pairs, ResponseMethod::ExactProduct);
  double sim = 0.0;
  for (double v : g.R_theta) sim = std::max(sim, std::abs(v - p.gamma_step));
  const bool pass5 = rt <= 1e-12 && rid <= 1e-12 && sim <= 1e-14;
  report(5, pass5, "response identities",
         "max |R_theta(s+1,s)-gamma| " + fmt("%.1e", rt) + ", max |R_eta* + sum R_eta| " + fmt("%.1e", rid) +
             ", simulator base case " + fmt("%.1e", sim));
}

// ---- 4 ---------------------------------------------------------------------

void criterion4() {
  Stopwatch sw;
  auto doc = default_doc();
  doc["grid"]["spacing"] = 0.5;
  doc["simulate"]["response"] = "exact";
  const auto cfg = parse_config(doc);
  const auto sim = simulate_source(cfg, false);
  const auto orc = oracle_source(cfg);
  const auto rep = compare_kernels(sim.kernels, orc, 0.05);
  const double secs = sw.seconds();
  std::string detail;
  for (const auto& k : rep.kernels) detail += k.kernel + "=" + fmt("%.4f", k.max_abs) + " ";
  report(4, rep.pass && secs < 600.0, "simulator vs oracle (d=400, n=800, 20 replicas)",
         "max abs per kernel: " + detail + "(tol 0.05); " + fmt("%.1f", secs) + " s");
}

// ---- 6 ---------------------------------------------------------------------

void criterion6() {
  const auto params = ModelParams::from_dims(4000, 2000, 1.0, 1.0, 0.01, 1.0);
  double c = 0.0, cs = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto inst = sample_instance(params, gaussian_spec(), seed);
    const auto f = finite_d_oracle(inst, kOracle, 1.0, 0.5);
    c += f.C_theta / 5.0;
    cs += f.C_theta_star / 5.0;
  }
  const auto ref = corr_kernels(1.0, 0.5, kOracle, mp_quadrature(2.0));
  const double e1 = std::abs(c - ref.C_theta), e2 = std::abs(cs - ref.C_theta_star);
  report(6, e1 <= 0.02 && e2 <= 0.02, "finite-d oracle bridge (d=2000, 5 designs)",
         "|C_theta(1,0.5)| err " + fmt("%.4f", e1) + ", |C_theta(1,*)| err " + fmt("%.4f", e2));
}

// ---- 7 and 8 ---------------------------------------------------------------

PriorAt gauss(double tau2) { return {Prior(GaussianFixed{1.0 / tau2}), {}}; }

void criterion7() {
  Stopwatch sw;
  const auto m = solve_fixed_point(2.0, 1.0, gauss(1.0), gauss(1.0));
  const double e_omega = std::abs(m.omega - std::sqrt(2.0)), e_mse = std::abs(m.mse - (std::sqrt(2.0) - 1.0));
  const double x = (-1 + std::sqrt(17.0)) / 4;
  const double mse_star = (1.0 * 4.0 + 2.0 * x * x * 1.0) / (2.0 * (x + 2.0) * (x + 2.0) - 4.0);
  const auto mm = solve_fixed_point(2.0, 1.0, gauss(1.0), gauss(2.0));
  const double e_star = std::abs(mm.mse_star - mse_star);
  const double secs = sw.seconds();
  report(7, e_omega <= 1e-10 && e_mse <= 1e-10 && e_star <= 1e-8 && secs < 1.0, "equilibrium closed forms",
         "omega err " + fmt("%.1e", e_omega) + ", mse err " + fmt("%.1e", e_mse) + ", mismatched mse* err " +
             fmt("%.1e", e_star) + ", " + fmt("%.3f", secs) + " s");
}

void criterion8() {
  const PriorAt mix{Prior(GaussianMeanMixture{{0.4, 0.6}, {3.0, 3.0}}), {-1.0, 0.8}};
  const std::vector<std::pair<PriorAt, PriorAt>> cases{
      {gauss(1.0), gauss(1.0)}, {gauss(1.0), gauss(2.0)}, {mix, gauss(1.0)}, {mix, mix}};
  const double delta = 2.0;
  double stat = 0.0, immse = 0.0;
  for (const auto& [gs, g] : cases) {
    const auto sol = solve_fixed_point(delta, 1.0, gs, g);
    auto f = [&](double w, double ws) { return free_energy(w, ws, gs, g, delta, 1.0); };
    const double h = 1e-5;
    stat = std::max(stat, std::abs((f(sol.omega + h, sol.omega_star) - f(sol.omega - h, sol.omega_star)) / (2 * h)));
    stat = std::max(stat, std::abs((f(sol.omega, sol.omega_star + h) - f(sol.omega, sol.omega_star - h)) / (2 * h)));
    auto F = [&](double s) { return solve_fixed_point(delta, 1.0 / s, gs, g).free_energy; };
    for (double s : {0.5, 1.0, 2.0}) {
      const double k = 1e-3;
      const double slope = (F(s - 2 * k) - 8 * F(s - k) + 8 * F(s + k) - F(s + 2 * k)) / (12 * k);
      immse = std::max(immse, std::abs(slope - 0.5 * delta * solve_fixed_point(delta, 1.0 / s, gs, g).ymse_star));
    }
  }
  report(8, stat <= 1e-6 && immse <= 1e-4, "equilibrium stationarity and I-MMSE",
         "max |df/domega|, |df/domega*| " + fmt("%.1e", stat) + ", max I-MMSE slope err " + fmt("%.1e", immse) +
             " over 4 prior pairs, s in {0.5,1,2}");
}

// ---- 9 ---------------------------------------------------------------------

void criterion9() {
  const auto k = linear_gaussian_dmft(default_params(0.01, 10.0), 1.0, 1.0);
  const double ct = k.C_theta(1000, 1000), ce = k.C_eta(1000, 1000);
  const double target = ceta_stationary(0.0, kOracle, mp_quadrature(2.0));
  report(9, std::abs(ct - 1.0) <= 0.01 && std::abs(ce - target) <= 0.02, "long-time handoff (T=10)",
         "C_theta(T,T) " + fmt("%.5f", ct) + " vs tau*^2=1, C_eta(T,T) " + fmt("%.5f", ce) + " vs " +
             fmt("%.5f", target));
}

// ---- 10 and 11 -------------------------------------------------------------

json location_doc() {
  auto doc = default_doc();
  doc["name"] = "gaussian-location";
  doc["prior"] = json::parse(R"({
    "nominal": {"family": "gaussian_location", "scale": 1.0}, "alpha0": [0.0],
    "truth": {"family": "gaussian_location", "scale": 1.0}, "alpha_star": [1.0],
    "init": "zero"})");
  doc["grid"]["spacing"] = 0.01;
  doc["simulate"]["response"] = "none";
  return doc;
}

double w2_at_one(const RunConfig& cfg, const SimulatorRun& sim, const std::vector<std::vector<double>>& dm) {
  const auto times = output_grid(cfg.grid_spacing, cfg.params.horizon, cfg.params.gamma_step);
  const auto it = std::find_if(times.begin(), times.end(), [](double t) { return std::abs(t - 1.0) < 1e-9; });
  const auto i = static_cast<std::size_t>(it - times.begin());
  const auto& a = sim.marginals[i];
  const auto& b = dm[i];
  const std::size_t m = std::min(a.size(), b.size());  // quantile-match the larger sample
  return wasserstein2_1d(a.size() == m ? a : resample_sorted(a, m), b.size() == m ? b : resample_sorted(b, m));
}

void criteria10_11() {
  auto gdoc = default_doc();
  gdoc["grid"]["spacing"] = 0.5;
  gdoc["simulate"]["response"] = "none";
  const auto gcfg = parse_config(gdoc);
  const auto gsim = simulate_source(gcfg, true);
  std::vector<std::vector<double>> gdm;
  dmft_source(gcfg, &gdm);
  const double w_gauss = w2_at_one(gcfg, gsim, gdm);

  const auto lcfg = parse_config(location_doc());
  const auto lsim = simulate_source(lcfg, true);
  std::vector<std::vector<double>> ldm;
  const auto ld = dmft_source(lcfg, &ldm);
  const double w_loc = w2_at_one(lcfg, lsim, ldm);
  report(10, w_gauss <= 0.05 && w_loc <= 0.05, "marginal law at t=1 (W2)",
         "gaussian-default " + fmt("%.4f", w_gauss) + ", gaussian-location (adaptive) " + fmt("%.4f", w_loc) +
             " (tol 0.05)");

  double amax = 0.0;
  for (Eigen::Index i = 0; i < ld.alpha.rows(); ++i) amax = std::max(amax, std::abs(lsim.kernels.alpha(i, 0) - ld.alpha(i, 0)));
  const PriorAt truth{Prior(GaussianLocation{1.0}), {1.0}};
  const std::vector<double> astar{1.0};
  const auto gF = grad_F(astar, 2.0, 1.0, truth, Prior(GaussianLocation{1.0}));
  double gn = 0.0;
  for (double v : gF) gn += v * v;
  gn = std::sqrt(gn);
  report(11, amax <= 0.05 && gn <= 1e-6, "adaptive alpha trajectory",
         "max |alpha_sim - alpha_dmft| over " + std::to_string(ld.alpha.rows()) + " grid times " + fmt("%.4f", amax) +
             " (alpha_dmft(2)=" + fmt("%.4f", ld.alpha(ld.alpha.rows() - 1, 0)) + "), |grad_F(alpha*)| " +
             fmt("%.1e", gn));
}

// ---- 12 --------------------------------------------------------------------

std::map<std::string, std::string> csv_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[e.path().filename().string()] = ss.str();
  }
  return out;
}

void criterion12() {
  const fs::path root = fs::temp_directory_path() / "dmftlab-acceptance-repro";
  fs::remove_all(root);
  auto base = json::parse(R"({
    "name": "repro",
    "model": {"n": 240, "d": 120, "sigma2": 0.8, "gamma": 0.02, "horizon": 1.0},
    "prior": {"nominal": {"family": "gaussian_location", "scale": 1.0}, "alpha0": [0.0],
              "truth": {"family": "gaussian_location", "scale": 1.0}, "alpha_star": [0.7]},
    "grid": {"spacing": 0.1},
    "simulate": {"replicas": 6, "response": "probe", "probes": 8},
    "dmft": {"paths": 3000},
    "equilibrium": {"sweep": {"param": "sigma2", "values": [0.5, 1.0, 2.0]}},
    "response": {"s": 0.2, "coord": 3, "method": "exact"},
    "seed": 314159
  })");
  auto gauss_doc = base;
  gauss_doc["prior"] = json::parse(R"({"nominal": {"family": "gaussian_fixed", "lambda": 1.25}})");
  gauss_doc["model"]["beta"] = 1.25;
  const std::vector<std::pair<Pipeline, json>> runs{
      {Pipeline::Simulate, base},   {Pipeline::Dmft, base},         {Pipeline::Response, base},
      {Pipeline::Equilibrium, base}, {Pipeline::DmftLinear, gauss_doc}, {Pipeline::Oracle, gauss_doc}};
  std::size_t files = 0, mismatches = 0;
  std::string bad;
  for (const auto& [pipe, doc] : runs) {
    std::map<std::string, std::string> first;
    int variant = 0;
    for (unsigned threads : {1u, 1u, 2u, 4u}) {
      json d = doc;
      d["threads"] = threads;
      const fs::path dir = root / (pipeline_name(pipe) + "-" + std::to_string(variant++));
      run(parse_config(d), pipe, dir);
      auto got = csv_bytes(dir);
      if (first.empty()) {
        first = std::move(got);
        files += first.size();
        if (first.empty()) ++mismatches, bad += pipeline_name(pipe) + "(no csv) ";
      } else if (got != first) {
        ++mismatches;
        bad += pipeline_name(pipe) + "(threads=" + std::to_string(threads) + ") ";
      }
    }
  }
  report(12, mismatches == 0, "reproducibility across reruns and thread counts",
         std::to_string(runs.size()) + " pipelines x 4 runs (threads 1,1,2,4), " + std::to_string(files) +
             " CSV files per run set, mismatches: " + (bad.empty() ? std::string("none") : bad));
}

}  // namespace

int main() {
  struct Step {
    const char* name;
    void (*fn)();
  };
  const Step steps[] = {{"1", criterion1},  {"2", criterion2},        {"3,5", criterion3_and_5},
                        {"4", criterion4},  {"6", criterion6},        {"7", criterion7},
                        {"8", criterion8},  {"9", criterion9},        {"10,11", criteria10_11},
                        {"12", criterion12}};
  for (const auto& s : steps) {
    try {
      s.fn();
    } catch (const std::exception& e) {
      std::printf("[FAIL] criterion %s: threw: %s\n", s.name, e.what());
      ++failures;
    }
  }
  std::printf("%d criterion check(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
