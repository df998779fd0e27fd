#include "dmftlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dmftlab/errors.hpp"
#include "dmftlab/mp_oracle.hpp"
#include "dmftlab/parallel.hpp"
#include "dmftlab/rng.hpp"

#ifndef DMFTLAB_GIT_DESCRIBE
#define DMFTLAB_GIT_DESCRIBE "unknown"
#endif

namespace dmftlab {

using nlohmann::json;
namespace fs = std::filesystem;

std::string git_describe() { return DMFTLAB_GIT_DESCRIBE; }

Pipeline parse_pipeline(const std::string& name) {
  static const std::map<std::string, Pipeline> m = {
      {"simulate", Pipeline::Simulate},       {"dmft", Pipeline::Dmft},
      {"dmft-linear", Pipeline::DmftLinear},  {"oracle", Pipeline::Oracle},
      {"equilibrium", Pipeline::Equilibrium}, {"compare", Pipeline::Compare},
      {"response", Pipeline::Response}};
  auto it = m.find(name);
  if (it == m.end()) throw ValidationError("unknown pipeline '" + name + "'");
  return it->second;
}

std::string pipeline_name(Pipeline p) {
  switch (p) {
    case Pipeline::Simulate: return "simulate";
    case Pipeline::Dmft: return "dmft";
    case Pipeline::DmftLinear: return "dmft-linear";
    case Pipeline::Oracle: return "oracle";
    case Pipeline::Equilibrium: return "equilibrium";
    case Pipeline::Compare: return "compare";
    case Pipeline::Response: return "response";
  }
  return "?";
}

// ---- config ----------------------------------------------------------------

namespace {

class Checker {
 public:
  std::vector<std::string> errors;

  void fail(const std::string& path, const std::string& msg) { errors.push_back(path + ": " + msg); }

  const json* object(const json& parent, const std::string& key, const std::string& path, bool required) {
    if (!parent.contains(key)) {
      if (required) fail(path + key, "missing");
      return nullptr;
    }
    const json& v = parent.at(key);
    if (!v.is_object()) {
      fail(path + key, "expected an object");
      return nullptr;
    }
    return &v;
  }

  std::optional<double> number(const json& parent, const std::string& key, const std::string& path, bool required) {
    if (!parent.contains(key)) {
      if (required) fail(path + key, "missing");
      return std::nullopt;
    }
    const json& v = parent.at(key);
    if (!v.is_number() || !std::isfinite(v.get<double>())) {
      fail(path + key, "expected a finite number");
      return std::nullopt;
    }
    return v.get<double>();
  }

  std::optional<std::uint64_t> count(const json& parent, const std::string& key, const std::string& path,
                                     bool required) {
    if (!parent.contains(key)) {
      if (required) fail(path + key, "missing");
      return std::nullopt;
    }
    const json& v = parent.at(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
    fail(path + key, "expected a non-negative integer");
    return std::nullopt;
  }

  std::optional<std::string> string(const json& parent, const std::string& key, const std::string& path,
                                    bool required) {
    if (!parent.contains(key)) {
      if (required) fail(path + key, "missing");
      return std::nullopt;
    }
    const json& v = parent.at(key);
    if (!v.is_string()) {
      fail(path + key, "expected a string");
      return std::nullopt;
    }
    return v.get<std::string>();
  }

  std::optional<std::vector<double>> numbers(const json& parent, const std::string& key, const std::string& path,
                                             bool required) {
    if (!parent.contains(key)) {
      if (required) fail(path + key, "missing");
      return std::nullopt;
    }
    const json& v = parent.at(key);
    if (!v.is_array()) {
      fail(path + key, "expected an array of numbers");
      return std::nullopt;
    }
    std::vector<double> out;
    for (const auto& x : v) {
      if (!x.is_number() || !std::isfinite(x.get<double>())) {
        fail(path + key, "expected an array of finite numbers");
        return std::nullopt;
      }
      out.push_back(x.get<double>());
    }
    return out;
  }

  void unknown_keys(const json& o, std::initializer_list<const char*> allowed, const std::string& path) {
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = o.begin(); it != o.end(); ++it)
      if (!ok.count(it.key())) fail(path + it.key(), "unknown field");
  }
};

std::optional<Prior> parse_family(const json& j, const std::string& path, Checker& c) {
  if (!j.is_object()) {
    c.fail(path, "expected an object");
    return std::nullopt;
  }
  const auto fam = c.string(j, "family", path + ".", true);
  if (!fam) return std::nullopt;
  const std::string p = path + ".";
  const std::size_t before = c.errors.size();
  std::optional<PriorFamily> f;
  if (*fam == "gaussian_fixed") {
    c.unknown_keys(j, {"family", "lambda"}, p);
    if (auto l = c.number(j, "lambda", p, true)) f = GaussianFixed{*l};
  } else if (*fam == "gaussian_location") {
    c.unknown_keys(j, {"family", "scale"}, p);
    f = GaussianLocation{c.number(j, "scale", p, false).value_or(1.0)};
  } else if (*fam == "gaussian_mean_mixture") {
    c.unknown_keys(j, {"family", "weights", "precisions"}, p);
    auto w = c.numbers(j, "weights", p, true);
    auto q = c.numbers(j, "precisions", p, true);
    if (w && q) f = GaussianMeanMixture{*w, *q};
  } else if (*fam == "gaussian_weight_mixture") {
    c.unknown_keys(j, {"family", "means", "precisions"}, p);
    auto m = c.numbers(j, "means", p, true);
    auto q = c.numbers(j, "precisions", p, true);
    if (m && q) f = GaussianWeightMixture{*m, *q};
  } else if (*fam == "exp_family") {
    c.unknown_keys(j, {"family", "statistics", "base_precision"}, p);
    ExpFamily e;
    e.base_precision = c.number(j, "base_precision", p, false).value_or(1.0);
    if (!j.contains("statistics") || !j.at("statistics").is_array()) {
      c.fail(p + "statistics", "expected an array of names");
    } else {
      for (const auto& s : j.at("statistics")) {
        const std::string name = s.is_string() ? s.get<std::string>() : "";
        if (name == "linear") e.statistics.push_back(Statistic::Linear);
        else if (name == "quadratic") e.statistics.push_back(Statistic::Quadratic);
        else if (name == "log_cosh") e.statistics.push_back(Statistic::LogCosh);
        else c.fail(p + "statistics", "unknown statistic (linear, quadratic, log_cosh)");
      }
    }
    f = e;
  } else if (*fam == "atoms") {
    c.unknown_keys(j, {"family", "values", "probs"}, p);
    auto v = c.numbers(j, "values", p, true);
    auto q = c.numbers(j, "probs", p, true);
    if (v && q) f = Atoms{*v, *q};
  } else {
    c.fail(p + "family", "unknown family '" + *fam + "'");
  }
  if (!f || c.errors.size() != before) return std::nullopt;
  try {
    return Prior(*f);
  } catch (const std::exception& e) {
    c.fail(path, e.what());
    return std::nullopt;
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool is_multiple(double big, double small) {
  const double r = big / small;
  return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, r) && std::round(r) >= 1.0;
}

void check_pipeline(const RunConfig& cfg, Pipeline p, Checker& c);

void check_linear_gaussian(const RunConfig& cfg, const std::string& who, Checker& c) {
  if (!std::holds_alternative<GaussianFixed>(cfg.prior.nominal.family()) ||
      std::get<GaussianFixed>(cfg.prior.nominal.family()).lambda <= 0.0)
    c.fail("prior.nominal", who + " requires family gaussian_fixed with lambda > 0");
  if (cfg.prior.init != InitLaw::Zero) c.fail("prior.init", who + " requires init 'zero'");
  if (cfg.prior.regularizer) c.fail("prior.regularizer", who + " has no parameter to regularize");
}

void check_pipeline(const RunConfig& cfg, Pipeline p, Checker& c) {
  switch (p) {
    case Pipeline::Simulate:
      if (cfg.simulate.replicas < 1) c.fail("simulate.replicas", "must be at least 1");
      if (cfg.simulate.probes < 2) c.fail("simulate.probes", "must be at least 2");
      break;
    case Pipeline::Dmft:
      if (cfg.dmft.paths < 100) c.fail("dmft.paths", "must be at least 100");
      if (!(cfg.dmft.memory_cap_gib > 0.0)) c.fail("dmft.memory_cap_gib", "must be positive");
      break;
    case Pipeline::DmftLinear: check_linear_gaussian(cfg, "dmft-linear", c); break;
    case Pipeline::Oracle:
      check_linear_gaussian(cfg, "oracle", c);
      if (std::abs(cfg.params.beta * cfg.params.sigma2 - 1.0) > 1e-12)
        c.fail("model.beta", "oracle requires beta = 1/sigma2");
      if (cfg.oracle_nodes < 8) c.fail("oracle.nodes", "must be at least 8");
      break;
    case Pipeline::Equilibrium:
      if (std::holds_alternative<GaussianFixed>(cfg.prior.nominal.family()) &&
          std::get<GaussianFixed>(cfg.prior.nominal.family()).lambda <= 0.0)
        c.fail("prior.nominal", "equilibrium needs a proper prior (lambda > 0)");
      if (std::holds_alternative<GaussianFixed>(cfg.prior.truth.family()) &&
          std::get<GaussianFixed>(cfg.prior.truth.family()).lambda <= 0.0)
        c.fail("prior.truth", "equilibrium needs a proper true prior (lambda > 0)");
      if (!cfg.equilibrium.sweep_param.empty() && cfg.equilibrium.sweep_param != "sigma2" &&
          cfg.equilibrium.sweep_param != "delta")
        c.fail("equilibrium.sweep.param", "must be 'sigma2' or 'delta'");
      for (double v : cfg.equilibrium.sweep_values)
        if (!(v > 0.0)) c.fail("equilibrium.sweep.values", "values must be positive");
      break;
    case Pipeline::Compare: {
      if (cfg.compare.sources.size() < 2) c.fail("compare.sources", "need at least two sources");
      for (const auto& s : cfg.compare.sources) {
        if (s.rfind("dir:", 0) == 0) continue;
        if (s == "simulator") check_pipeline(cfg, Pipeline::Simulate, c);
        else if (s == "dmft-mc") check_pipeline(cfg, Pipeline::Dmft, c);
        else if (s == "dmft-linear") check_pipeline(cfg, Pipeline::DmftLinear, c);
        else if (s == "mp-oracle") check_pipeline(cfg, Pipeline::Oracle, c);
        else c.fail("compare.sources", "unknown source '" + s + "' (simulator, dmft-mc, dmft-linear, mp-oracle, dir:<path>)");
      }
      if (!(cfg.compare.max_abs > 0.0)) c.fail("compare.tolerance.max_abs", "must be positive");
      break;
    }
    case Pipeline::Response: {
      const double r = cfg.response.s / cfg.params.gamma_step;
      if (cfg.response.s < 0.0 || std::abs(r - std::round(r)) > 1e-9 * std::max(1.0, r) ||
          cfg.response.s >= cfg.params.horizon)
        c.fail("response.s", "must be a grid time in [0, horizon)");
      if (cfg.response.coord >= cfg.params.d) c.fail("response.coord", "must be < d");
      if (cfg.response.method != "exact" && cfg.response.method != "probe")
        c.fail("response.method", "must be 'exact' or 'probe'");
      break;
    }
  }
}

void throw_if(const Checker& c) {
  if (c.errors.empty()) return;
  std::ostringstream os;
  os << "invalid configuration (" << c.errors.size() << " problem" << (c.errors.size() > 1 ? "s" : "") << "):";
  for (const auto& e : c.errors) os << "\n  - " << e;
  throw ValidationError(os.str());
}

}  // namespace

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(raw.dump())));
  return buf;
}

RunConfig parse_config(const json& doc) {
  Checker c;
  RunConfig cfg;
  if (!doc.is_object()) throw ValidationError("invalid configuration: top level must be an object");
  cfg.raw = doc;
  c.unknown_keys(doc, {"name", "pipeline", "model", "prior", "grid", "oracle", "simulate", "dmft", "equilibrium",
                       "response", "compare", "seed", "output_dir", "threads"},
                 "");
  cfg.name = c.string(doc, "name", "", false).value_or("");
  if (auto p = c.string(doc, "pipeline", "", false)) {
    try {
      cfg.pipeline = parse_pipeline(*p);
    } catch (const ValidationError& e) {
      c.fail("pipeline", e.what());
    }
  }

  bool model_ok = false;
  if (const json* m = c.object(doc, "model", "", true)) {
    c.unknown_keys(*m, {"n", "d", "delta", "sigma2", "beta", "gamma", "horizon"}, "model.");
    auto n = c.count(*m, "n", "model.", true);
    auto d = c.count(*m, "d", "model.", true);
    auto s2 = c.number(*m, "sigma2", "model.", true);
    auto beta = c.number(*m, "beta", "model.", false);
    auto g = c.number(*m, "gamma", "model.", true);
    auto T = c.number(*m, "horizon", "model.", true);
    auto delta = c.number(*m, "delta", "model.", false);
    if (n && d && s2 && g && T) {
      if (*n < 1) c.fail("model.n", "must be at least 1");
      if (*d < 1) c.fail("model.d", "must be at least 1");
      if (!(*s2 > 0.0)) c.fail("model.sigma2", "must be positive");
      if (!(*g > 0.0)) c.fail("model.gamma", "must be positive");
      if (!(*T >= *g)) c.fail("model.horizon", "must be at least gamma");
      else if (!is_multiple(*T, *g)) c.fail("model.horizon", "must be an integer multiple of gamma");
      if (*n >= 1 && *d >= 1 && delta &&
          std::abs(*delta - static_cast<double>(*n) / static_cast<double>(*d)) > 1e-12 * *delta)
        c.fail("model.delta", "must equal n/d");
      if (c.errors.empty()) {
        try {
          cfg.params = ModelParams::from_dims(*n, *d, *s2, beta.value_or(1.0 / *s2), *g, *T);
          model_ok = true;
        } catch (const std::exception& e) {
          c.fail("model", e.what());
        }
      }
    }
  }

  if (const json* p = c.object(doc, "prior", "", true)) {
    c.unknown_keys(*p, {"nominal", "alpha0", "truth", "alpha_star", "init", "regularizer"}, "prior.");
    std::optional<Prior> nominal, truth;
    if (p->contains("nominal")) nominal = parse_family(p->at("nominal"), "prior.nominal", c);
    else c.fail("prior.nominal", "missing");
    if (p->contains("truth")) truth = parse_family(p->at("truth"), "prior.truth", c);
    else if (nominal) truth = nominal;
    cfg.prior.alpha0 = c.numbers(*p, "alpha0", "prior.", false).value_or(std::vector<double>{});
    cfg.prior.alpha_star = c.numbers(*p, "alpha_star", "prior.", false).value_or(cfg.prior.alpha0);
    const std::string init = c.string(*p, "init", "prior.", false).value_or("zero");
    if (init == "zero") cfg.prior.init = InitLaw::Zero;
    else if (init == "standard_normal") cfg.prior.init = InitLaw::StandardNormal;
    else if (init == "from_prior") cfg.prior.init = InitLaw::FromPrior;
    else c.fail("prior.init", "must be zero, standard_normal or from_prior");
    if (const json* r = c.object(*p, "regularizer", "prior.", false)) {
      c.unknown_keys(*r, {"radius", "width"}, "prior.regularizer.");
      cfg.prior.regularizer = SmoothHinge{c.number(*r, "radius", "prior.regularizer.", false).value_or(10.0),
                                          c.number(*r, "width", "prior.regularizer.", false).value_or(1.0)};
    }
    if (nominal && truth) {
      cfg.prior.nominal = *nominal;
      cfg.prior.truth = *truth;
      try {
        cfg.prior.validate();
      } catch (const std::exception& e) {
        c.fail("prior", e.what());
      }
      if (!nominal->has_density()) c.fail("prior.nominal", "the nominal prior needs a density (atoms are truth-only)");
    }
  }

  if (const json* g = c.object(doc, "grid", "", false)) {
    c.unknown_keys(*g, {"spacing"}, "grid.");
    cfg.grid_spacing = c.number(*g, "spacing", "grid.", false).value_or(cfg.grid_spacing);
  }
  if (model_ok) {
    if (!(cfg.grid_spacing > 0.0) || !is_multiple(cfg.grid_spacing, cfg.params.gamma_step) ||
        !is_multiple(cfg.params.horizon, cfg.grid_spacing))
      c.fail("grid.spacing", "must be a multiple of gamma that divides the horizon");
  }
  if (const json* o = c.object(doc, "oracle", "", false)) {
    c.unknown_keys(*o, {"nodes"}, "oracle.");
    cfg.oracle_nodes = c.count(*o, "nodes", "oracle.", false).value_or(cfg.oracle_nodes);
  }
  if (const json* s = c.object(doc, "simulate", "", false)) {
    c.unknown_keys(*s, {"replicas", "design", "response", "probes", "response_replicas"}, "simulate.");
    cfg.simulate.replicas = c.count(*s, "replicas", "simulate.", false).value_or(cfg.simulate.replicas);
    const std::string design = c.string(*s, "design", "simulate.", false).value_or("gaussian");
    if (design == "gaussian") cfg.simulate.design = Design::Gaussian;
    else if (design == "rademacher") cfg.simulate.design = Design::Rademacher;
    else c.fail("simulate.design", "must be gaussian or rademacher");
    cfg.simulate.response = c.string(*s, "response", "simulate.", false).value_or("auto");
    if (cfg.simulate.response != "auto" && cfg.simulate.response != "exact" && cfg.simulate.response != "probe" &&
        cfg.simulate.response != "none")
      c.fail("simulate.response", "must be auto, exact, probe or none");
    cfg.simulate.probes = c.count(*s, "probes", "simulate.", false).value_or(cfg.simulate.probes);
    cfg.simulate.response_replicas =
        c.count(*s, "response_replicas", "simulate.", false).value_or(cfg.simulate.response_replicas);
  }
  if (const json* s = c.object(doc, "dmft", "", false)) {
    c.unknown_keys(*s, {"paths", "response_mode", "memory_cap_gib"}, "dmft.");
    cfg.dmft.paths = c.count(*s, "paths", "dmft.", false).value_or(cfg.dmft.paths);
    const std::string mode = c.string(*s, "response_mode", "dmft.", false).value_or("auto");
    if (mode == "auto") cfg.dmft.response_mode = ResponseMode::Auto;
    else if (mode == "shared") cfg.dmft.response_mode = ResponseMode::Shared;
    else if (mode == "per_path") cfg.dmft.response_mode = ResponseMode::PerPath;
    else c.fail("dmft.response_mode", "must be auto, shared or per_path");
    cfg.dmft.memory_cap_gib = c.number(*s, "memory_cap_gib", "dmft.", false).value_or(cfg.dmft.memory_cap_gib);
  }
  if (const json* s = c.object(doc, "equilibrium", "", false)) {
    c.unknown_keys(*s, {"sweep", "tolerance"}, "equilibrium.");
    cfg.equilibrium.tolerance = c.number(*s, "tolerance", "equilibrium.", false).value_or(1e-12);
    if (!(cfg.equilibrium.tolerance > 0.0)) c.fail("equilibrium.tolerance", "must be positive");
    if (const json* w = c.object(*s, "sweep", "equilibrium.", false)) {
      c.unknown_keys(*w, {"param", "values"}, "equilibrium.sweep.");
      cfg.equilibrium.sweep_param = c.string(*w, "param", "equilibrium.sweep.", true).value_or("");
      cfg.equilibrium.sweep_values = c.numbers(*w, "values", "equilibrium.sweep.", true).value_or(std::vector<double>{});
    }
  }
  if (const json* s = c.object(doc, "response", "", false)) {
    c.unknown_keys(*s, {"s", "coord", "eps", "method", "probes"}, "response.");
    cfg.response.s = c.number(*s, "s", "response.", false).value_or(cfg.response.s);
    cfg.response.coord = c.count(*s, "coord", "response.", false).value_or(0);
    cfg.response.eps = c.number(*s, "eps", "response.", false).value_or(0.0);
    cfg.response.method = c.string(*s, "method", "response.", false).value_or("exact");
    cfg.response.probes = c.count(*s, "probes", "response.", false).value_or(32);
  }
  if (const json* s = c.object(doc, "compare", "", false)) {
    c.unknown_keys(*s, {"sources", "tolerance"}, "compare.");
    if (s->contains("sources")) {
      const json& src = s->at("sources");
      if (!src.is_array()) {
        c.fail("compare.sources", "expected an array of names");
      } else {
        cfg.compare.sources.clear();
        for (const auto& x : src) {
          if (x.is_string()) cfg.compare.sources.push_back(x.get<std::string>());
          else c.fail("compare.sources", "expected an array of names");
        }
      }
    }
    if (const json* t = c.object(*s, "tolerance", "compare.", false)) {
      for (auto it = t->begin(); it != t->end(); ++it) {
        const std::string path = "compare.tolerance." + it.key();
        if (!it->is_number() || !(it->get<double>() > 0.0)) {
          c.fail(path, "expected a positive number");
          continue;
        }
        if (it.key() == "max_abs") cfg.compare.max_abs = it->get<double>();
        else if (it.key() == "w2") cfg.compare.w2_tolerance = it->get<double>();
        else if (static const std::set<std::string> known{"C_theta", "C_eta", "R_theta", "R_eta", "C_theta_star",
                                                          "R_eta_star", "C_star_star"};
                 known.count(it.key()) || it.key().rfind("alpha", 0) == 0)
          cfg.compare.per_kernel[it.key()] = it->get<double>();
        else c.fail(path, "unknown kernel (or max_abs, w2)");
      }
    }
  }
  // reproducibility: no implicit or wall-clock seeding
  if (auto s = c.count(doc, "seed", "", true)) cfg.seed = *s;
  cfg.output_dir = c.string(doc, "output_dir", "", false).value_or("");
  if (auto t = c.count(doc, "threads", "", false)) {
    if (*t < 1) c.fail("threads", "must be at least 1");
    cfg.threads = static_cast<unsigned>(std::max<std::uint64_t>(1, *t));
  }

  if (cfg.pipeline) {
    // Pipeline rules are reported alongside parse errors, except those that
    // read model/prior/response values which may not have parsed.
    const bool base_ok = c.errors.empty();
    Checker pc;
    check_pipeline(cfg, *cfg.pipeline, pc);
    for (auto& e : pc.errors)
      if (base_ok || !(e.rfind("model", 0) == 0 || e.rfind("prior", 0) == 0 || e.rfind("response", 0) == 0))
        c.errors.push_back(std::move(e));
  }
  throw_if(c);
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

// ---- grids -----------------------------------------------------------------

KernelTable restrict_table(const KernelTable& t, double coarse_gamma) {
  if (!is_multiple(coarse_gamma, t.gamma)) throw DomainError("restrict_table: step is not a multiple of the table's");
  const auto k = static_cast<std::size_t>(std::llround(coarse_gamma / t.gamma));
  if (t.n_steps % k != 0) throw DomainError("restrict_table: horizon not on the coarse grid");
  const std::size_t N = t.n_steps / k;
  KernelTable r = KernelTable::zeros(coarse_gamma, N, static_cast<std::size_t>(t.alpha.cols()));
  r.source = t.source;
  r.C_star_star = t.C_star_star;
  r.C_star_star_se = t.C_star_star_se;
  // R's are rescaled so that R/gamma keeps its meaning on the coarse grid
  const double rs = static_cast<double>(k);
  for (std::size_t i = 0; i <= N; ++i) {
    const auto a = static_cast<Eigen::Index>(i), A = static_cast<Eigen::Index>(i * k);
    r.C_theta_star(a) = t.C_theta_star(A);
    r.C_theta_star_se(a) = t.C_theta_star_se(A);
    r.R_eta_star(a) = t.R_eta_star(A);
    r.alpha.row(a) = t.alpha.row(A);
    for (std::size_t j = 0; j <= N; ++j) {
      const auto b = static_cast<Eigen::Index>(j), B = static_cast<Eigen::Index>(j * k);
      r.C_theta(a, b) = t.C_theta(A, B);
      r.C_eta(a, b) = t.C_eta(A, B);
      r.C_theta_se(a, b) = t.C_theta_se(A, B);
      r.C_eta_se(a, b) = t.C_eta_se(A, B);
      r.R_theta(a, b) = rs * t.R_theta(A, B);
      r.R_eta(a, b) = rs * t.R_eta(A, B);
      r.R_theta_se(a, b) = rs * t.R_theta_se(A, B);
    }
  }
  return r;
}

std::pair<KernelTable, KernelTable> grid_align(const KernelTable& a, const KernelTable& b) {
  if (std::abs(a.gamma - b.gamma) <= 1e-12 * std::max(a.gamma, b.gamma)) {
    if (a.n_steps != b.n_steps) throw DomainError("grid_align: horizons differ");
    return {a, b};
  }
  if (a.gamma < b.gamma) {
    if (!is_multiple(b.gamma, a.gamma)) throw DomainError("grid_align: incommensurate steps");
    return {restrict_table(a, b.gamma), b};
  }
  if (!is_multiple(a.gamma, b.gamma)) throw DomainError("grid_align: incommensurate steps");
  auto r = grid_align(b, a);
  return {r.second, r.first};
}

std::vector<double> output_grid(double spacing, double horizon, double gamma) {
  if (!is_multiple(spacing, gamma) || !is_multiple(horizon, spacing))
    throw DomainError("output grid spacing must be a multiple of gamma dividing the horizon");
  const auto k = std::llround(spacing / gamma), N = std::llround(horizon / gamma);
  std::vector<double> times;
  for (long long i = 0; i <= N; i += k) times.push_back(static_cast<double>(i) * gamma);
  return times;
}

GridKernels GridKernels::empty(const std::string& source, double gamma, const std::vector<double>& times,
                               std::size_t alpha_dim) {
  GridKernels g;
  g.source = source;
  g.native_gamma = gamma;
  g.times = times;
  const auto m = static_cast<Eigen::Index>(times.size());
  for (auto* M : {&g.C_theta, &g.C_theta_se, &g.C_eta, &g.C_eta_se, &g.R_theta, &g.R_theta_se, &g.R_eta, &g.R_eta_se})
    M->setConstant(m, m, NAN);
  for (auto* v : {&g.C_theta_star, &g.C_theta_star_se, &g.R_eta_star}) v->setConstant(m, NAN);
  g.alpha.setConstant(m, static_cast<Eigen::Index>(alpha_dim), NAN);
  g.alpha_se.setConstant(m, static_cast<Eigen::Index>(alpha_dim), NAN);
  return g;
}

GridKernels to_grid(const KernelTable& t, const std::vector<double>& times) {
  GridKernels g = GridKernels::empty(t.source, t.gamma, times, static_cast<std::size_t>(t.alpha.cols()));
  std::vector<Eigen::Index> idx;
  for (double x : times) idx.push_back(static_cast<Eigen::Index>(t.index_of(x)));
  const auto m = static_cast<Eigen::Index>(times.size());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto I = idx[static_cast<std::size_t>(i)];
    g.C_theta_star(i) = t.C_theta_star(I);
    g.C_theta_star_se(i) = t.C_theta_star_se(I);
    g.R_eta_star(i) = t.R_eta_star(I);
    g.alpha.row(i) = t.alpha.row(I);
    g.alpha_se.row(i).setZero();
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto J = idx[static_cast<std::size_t>(j)];
      g.C_theta(i, j) = t.C_theta(I, J);
      g.C_theta_se(i, j) = t.C_theta_se(I, J);
      g.C_eta(i, j) = t.C_eta(I, J);
      g.C_eta_se(i, j) = t.C_eta_se(I, J);
      if (i > j) {
        g.R_theta(i, j) = t.R_theta(I, J) / t.gamma;
        g.R_theta_se(i, j) = t.R_theta_se(I, J) / t.gamma;
        g.R_eta(i, j) = t.R_eta(I, J) / t.gamma;
        g.R_eta_se(i, j) = 0.0;
      }
    }
  }
  g.C_star_star = t.C_star_star;
  g.C_star_star_se = t.C_star_star_se;
  return g;
}

// ---- CSV -------------------------------------------------------------------

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt_time(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

struct CsvRow {
  std::string t, s;
  double value, se;
};

void write_csv(const fs::path& path, const std::vector<CsvRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "t,s,value,stderr\n";
  for (const auto& r : rows) out << r.t << ',' << r.s << ',' << fmt17(r.value) << ',' << fmt17(r.se) << '\n';
}

double se_or_zero(double v) { return std::isfinite(v) ? v : 0.0; }

std::vector<std::pair<std::string, std::vector<CsvRow>>> kernel_rows(const GridKernels& k) {
  std::vector<std::pair<std::string, std::vector<CsvRow>>> out;
  const auto m = static_cast<Eigen::Index>(k.times.size());
  auto tm = [&](Eigen::Index i) { return fmt_time(k.times[static_cast<std::size_t>(i)]); };
  auto matrix = [&](const char* name, const Eigen::MatrixXd& M, const Eigen::MatrixXd& S, bool strict) {
    std::vector<CsvRow> rows;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < (strict ? i : i + 1); ++j)
        if (std::isfinite(M(i, j))) rows.push_back({tm(i), tm(j), M(i, j), se_or_zero(S(i, j))});
    if (!rows.empty()) out.emplace_back(name, std::move(rows));
  };
  matrix("C_theta", k.C_theta, k.C_theta_se, false);
  matrix("C_eta", k.C_eta, k.C_eta_se, false);
  matrix("R_theta", k.R_theta, k.R_theta_se, true);
  matrix("R_eta", k.R_eta, k.R_eta_se, true);
  auto vec = [&](const char* name, const Eigen::VectorXd& v, const Eigen::VectorXd* s) {
    std::vector<CsvRow> rows;
    for (Eigen::Index i = 0; i < m; ++i)
      if (std::isfinite(v(i))) rows.push_back({tm(i), "*", v(i), s ? se_or_zero((*s)(i)) : 0.0});
    if (!rows.empty()) out.emplace_back(name, std::move(rows));
  };
  vec("C_theta_star", k.C_theta_star, &k.C_theta_star_se);
  vec("R_eta_star", k.R_eta_star, nullptr);
  if (std::isfinite(k.C_star_star)) out.push_back({"C_star_star", {{"*", "*", k.C_star_star, se_or_zero(k.C_star_star_se)}}});
  for (Eigen::Index q = 0; q < k.alpha.cols(); ++q) {
    std::vector<CsvRow> rows;
    for (Eigen::Index i = 0; i < m; ++i)
      if (std::isfinite(k.alpha(i, q))) rows.push_back({tm(i), "", k.alpha(i, q), se_or_zero(k.alpha_se(i, q))});
    if (!rows.empty()) out.emplace_back("alpha" + std::to_string(q), std::move(rows));
  }
  return out;
}

}  // namespace

std::vector<fs::path> write_kernels(const GridKernels& k, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> paths;
  for (const auto& [name, rows] : kernel_rows(k)) {
    paths.push_back(dir / ("kernels_" + k.source + "_" + name + ".csv"));
    write_csv(paths.back(), rows);
  }
  return paths;
}

GridKernels read_kernels(const fs::path& dir, const std::string& source) {
  const std::string prefix = "kernels_" + source + "_";
  std::map<std::string, std::vector<CsvRow>> files;
  std::set<double> times;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string fname = entry.path().filename().string();
    if (fname.rfind(prefix, 0) != 0 || entry.path().extension() != ".csv") continue;
    const std::string kernel = fname.substr(prefix.size(), fname.size() - prefix.size() - 4);
    std::ifstream in(entry.path());
    std::string line;
    std::getline(in, line);
    if (line != "t,s,value,stderr") throw DomainError("read_kernels: bad header in " + fname);
    auto& rows = files[kernel];
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      CsvRow r;
      std::string v, e;
      std::getline(ss, r.t, ',');
      std::getline(ss, r.s, ',');
      std::getline(ss, v, ',');
      std::getline(ss, e, ',');
      r.value = std::strtod(v.c_str(), nullptr);
      r.se = std::strtod(e.c_str(), nullptr);
      if (r.t != "*") times.insert(std::strtod(r.t.c_str(), nullptr));
      if (r.s != "*" && !r.s.empty()) times.insert(std::strtod(r.s.c_str(), nullptr));
      rows.push_back(r);
    }
  }
  if (files.empty()) throw DomainError("read_kernels: no kernels for source '" + source + "' in " + dir.string());
  std::size_t K = 0;
  while (files.count("alpha" + std::to_string(K))) ++K;
  const std::vector<double> tv(times.begin(), times.end());
  GridKernels g = GridKernels::empty(source, NAN, tv, K);
  auto at = [&](const std::string& s) {
    const double x = std::strtod(s.c_str(), nullptr);
    auto it = std::lower_bound(tv.begin(), tv.end(), x);
    return static_cast<Eigen::Index>(it - tv.begin());
  };
  for (const auto& [kernel, rows] : files) {
    for (const auto& r : rows) {
      if (kernel == "C_star_star") {
        g.C_star_star = r.value;
        g.C_star_star_se = r.se;
        continue;
      }
      const auto i = at(r.t);
      if (kernel == "C_theta_star") g.C_theta_star(i) = r.value, g.C_theta_star_se(i) = r.se;
      else if (kernel == "R_eta_star") g.R_eta_star(i) = r.value;
      else if (kernel.rfind("alpha", 0) == 0) {
        const auto q = static_cast<Eigen::Index>(std::stoul(kernel.substr(5)));
        g.alpha(i, q) = r.value;
        g.alpha_se(i, q) = r.se;
      } else {
        const auto j = at(r.s);
        auto put = [&](Eigen::MatrixXd& M, Eigen::MatrixXd& S, bool sym) {
          M(i, j) = r.value;
          S(i, j) = r.se;
          if (sym) M(j, i) = r.value, S(j, i) = r.se;
        };
        if (kernel == "C_theta") put(g.C_theta, g.C_theta_se, true);
        else if (kernel == "C_eta") put(g.C_eta, g.C_eta_se, true);
        else if (kernel == "R_theta") put(g.R_theta, g.R_theta_se, false);
        else if (kernel == "R_eta") put(g.R_eta, g.R_eta_se, false);
      }
    }
  }
  return g;
}

// ---- comparison ------------------------------------------------------------

json CompareReport::to_json() const {
  json j;
  j["source_a"] = source_a;
  j["source_b"] = source_b;
  j["times"] = times;
  j["kernels"] = json::array();
  for (const auto& k : kernels)
    j["kernels"].push_back({{"kernel", k.kernel},
                            {"max_abs", k.max_abs},
                            {"rms", k.rms},
                            {"entries", k.entries},
                            {"tolerance", k.tolerance},
                            {"pass", k.pass}});
  if (!w2.empty()) {
    j["w2"] = json::array();
    for (const auto& [t, v] : w2) j["w2"].push_back({{"t", t}, {"distance", v}});
    j["w2_tolerance"] = w2_tolerance;
  }
  j["pass"] = pass;
  return j;
}

CompareReport compare_kernels(const GridKernels& a, const GridKernels& b, double max_abs,
                              const std::map<std::string, double>& per_kernel) {
  if (a.times.size() != b.times.size())
    throw DomainError("compare_kernels: grids differ (" + a.source + " vs " + b.source + ")");
  for (std::size_t i = 0; i < a.times.size(); ++i)
    if (std::abs(a.times[i] - b.times[i]) > 1e-9 * std::max(1.0, a.times[i]))
      throw DomainError("compare_kernels: grids differ (" + a.source + " vs " + b.source + ")");
  CompareReport rep;
  rep.source_a = a.source;
  rep.source_b = b.source;
  rep.times = a.times;
  auto add = [&](const std::string& name, auto&& visit) {
    KernelDiscrepancy k;
    k.kernel = name;
    double ss = 0.0;
    visit([&](double x, double y) {
      if (!std::isfinite(x) || !std::isfinite(y)) return;
      const double dlt = std::abs(x - y);
      k.max_abs = std::max(k.max_abs, dlt);
      ss += dlt * dlt;
      ++k.entries;
    });
    if (k.entries == 0) return;
    k.rms = std::sqrt(ss / static_cast<double>(k.entries));
    auto it = per_kernel.find(name);
    k.tolerance = it != per_kernel.end() ? it->second : max_abs;
    k.pass = k.max_abs <= k.tolerance;
    rep.pass = rep.pass && k.pass;
    rep.kernels.push_back(k);
  };
  const auto m = static_cast<Eigen::Index>(a.times.size());
  auto lower = [&](const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, bool strict) {
    return [&, strict](auto&& f) {
      for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < (strict ? i : i + 1); ++j) f(A(i, j), B(i, j));
    };
  };
  add("C_theta", lower(a.C_theta, b.C_theta, false));
  add("C_eta", lower(a.C_eta, b.C_eta, false));
  add("R_theta", lower(a.R_theta, b.R_theta, true));
  add("R_eta", lower(a.R_eta, b.R_eta, true));
  add("C_theta_star", [&](auto&& f) {
    for (Eigen::Index i = 0; i < m; ++i) f(a.C_theta_star(i), b.C_theta_star(i));
  });
  add("R_eta_star", [&](auto&& f) {
    for (Eigen::Index i = 0; i < m; ++i) f(a.R_eta_star(i), b.R_eta_star(i));
  });
  add("C_star_star", [&](auto&& f) { f(a.C_star_star, b.C_star_star); });
  for (Eigen::Index q = 0; q < std::min(a.alpha.cols(), b.alpha.cols()); ++q)
    add("alpha" + std::to_string(q), [&](auto&& f) {
      for (Eigen::Index i = 0; i < m; ++i) f(a.alpha(i, q), b.alpha(i, q));
    });
  return rep;
}

// ---- sources ---------------------------------------------------------------

namespace {

constexpr std::uint64_t kSourceStream = 0x5eed;

std::uint64_t source_seed(std::uint64_t master, const std::string& source) {
  return CounterRng(master, kSourceStream).bits(fnv1a(source));
}

std::vector<std::size_t> grid_steps(const std::vector<double>& times, double gamma) {
  std::vector<std::size_t> s;
  for (double t : times) s.push_back(static_cast<std::size_t>(std::llround(t / gamma)));
  return s;
}

}  // namespace

SimulatorRun simulate_source(const RunConfig& cfg, bool want_marginals) {
  const auto& p = cfg.params;
  const auto times = output_grid(cfg.grid_spacing, p.horizon, p.gamma_step);
  const auto steps = grid_steps(times, p.gamma_step);
  std::string method = cfg.simulate.response;
  if (method == "auto") method = p.d <= 500 ? "exact" : "probe";
  const bool want_response = method != "none";

  EvolveOptions opt;
  opt.retain_every = want_response ? 1 : steps.size() > 1 ? steps[1] : 1;
  const std::uint64_t seed = source_seed(cfg.seed, "simulator");
  auto reps = run_replicas(p, cfg.prior, seed, cfg.simulate.replicas, opt, cfg.threads, cfg.simulate.design);

  std::vector<Trajectory> trajs;
  std::vector<ModelInstance> insts;
  for (auto& r : reps) {
    trajs.push_back(std::move(r.trajectory));
    insts.push_back(std::move(r.instance));
  }
  reps.clear();
  const EmpiricalKernels ek = empirical_kernels(trajs, insts, p);

  SimulatorRun out;
  GridKernels& g = out.kernels;
  g = GridKernels::empty("simulator", p.gamma_step, times, cfg.prior.nominal.alpha_dim());
  std::vector<Eigen::Index> pos;
  for (std::size_t st : steps) {
    auto it = std::find(ek.steps.begin(), ek.steps.end(), st);
    if (it == ek.steps.end()) throw std::logic_error("simulate: output step not retained");
    pos.push_back(static_cast<Eigen::Index>(it - ek.steps.begin()));
  }
  const auto m = static_cast<Eigen::Index>(times.size());
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto I = pos[static_cast<std::size_t>(i)];
    g.C_theta_star(i) = ek.C_theta_star(I);
    g.C_theta_star_se(i) = ek.C_theta_star_se(I);
    const auto st = static_cast<Eigen::Index>(steps[static_cast<std::size_t>(i)]);
    if (g.alpha.cols() > 0) {
      g.alpha.row(i) = ek.alpha.row(st);
      g.alpha_se.row(i) = ek.alpha_se.row(st);
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto J = pos[static_cast<std::size_t>(j)];
      g.C_theta(i, j) = ek.C_theta(I, J);
      g.C_theta_se(i, j) = ek.C_theta_se(I, J);
      g.C_eta(i, j) = ek.C_eta(I, J);
      g.C_eta_se(i, j) = ek.C_eta_se(I, J);
    }
  }
  g.C_star_star = ek.C_star_star;
  g.C_star_star_se = ek.C_star_star_se;

  if (want_response) {
    std::vector<StepPair> pairs;
    for (std::size_t i = 0; i < steps.size(); ++i)
      for (std::size_t j = 0; j < i; ++j) pairs.push_back({steps[i], steps[j]});
    const std::size_t nr =
        cfg.simulate.response_replicas == 0 ? trajs.size() : std::min(cfg.simulate.response_replicas, trajs.size());
    std::vector<ResponseGrid> grids(nr);
    const auto rm = method == "exact" ? ResponseMethod::ExactProduct : ResponseMethod::Probe;
    for_each_chunk(nr, 1, cfg.threads, [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t r = b; r < e; ++r)
        grids[r] = response_traces(trajs[r], insts[r], cfg.prior, p, pairs, rm, cfg.simulate.probes,
                                   replica_seed(seed, r) ^ 0x9b0be5ULL);
    });
    const ResponseGrid avg = average_responses(grids);
    std::size_t q = 0;
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < i; ++j, ++q) {
        g.R_theta(i, j) = avg.R_theta[q] / p.gamma_step;
        g.R_theta_se(i, j) = avg.R_theta_se[q] / p.gamma_step;
        g.R_eta(i, j) = avg.R_eta[q] / p.gamma_step;
        g.R_eta_se(i, j) = avg.R_eta_se[q] / p.gamma_step;
      }
  }

  if (want_marginals) {
    for (std::size_t st : steps) {
      std::vector<double> v;
      for (const auto& tr : trajs) {
        const auto row = tr.row_of(st);
        if (!row) throw std::logic_error("simulate: marginal step not retained");
        const auto r = tr.theta_path.row(static_cast<Eigen::Index>(*row));
        for (Eigen::Index j = 0; j < r.size(); ++j) v.push_back(r(j));
      }
      std::sort(v.begin(), v.end());
      out.marginals.push_back(std::move(v));
    }
  }
  return out;
}

GridKernels dmft_source(const RunConfig& cfg, std::vector<std::vector<double>>* marginals) {
  const auto& p = cfg.params;
  DmftOptions opt;
  opt.retain_paths = marginals != nullptr;
  opt.response_mode = cfg.dmft.response_mode;
  opt.memory_cap_bytes = cfg.dmft.memory_cap_gib * 1024.0 * 1024.0 * 1024.0;
  opt.threads = cfg.threads;
  const auto res = solve_dmft(p, cfg.prior, cfg.dmft.paths, source_seed(cfg.seed, "dmft-mc"), opt);
  const auto times = output_grid(cfg.grid_spacing, p.horizon, p.gamma_step);
  GridKernels g = to_grid(res.table, times);
  g.source = "dmft-mc";
  if (marginals) {
    marginals->clear();
    for (double t : times) {
      const auto pairs = dmft_marginal_samples(res, res.table.index_of(t), res.paths->n_paths);
      std::vector<double> v;
      v.reserve(pairs.size());
      for (const auto& pr : pairs) v.push_back(pr.second);
      std::sort(v.begin(), v.end());
      marginals->push_back(std::move(v));
    }
  }
  return g;
}

GridKernels dmft_linear_source(const RunConfig& cfg) {
  const auto t = linear_gaussian_dmft(cfg.params, cfg.prior);
  GridKernels g = to_grid(t, output_grid(cfg.grid_spacing, cfg.params.horizon, cfg.params.gamma_step));
  g.source = "dmft-linear";
  return g;
}

GridKernels oracle_source(const RunConfig& cfg) {
  const auto& p = cfg.params;
  if (!std::holds_alternative<GaussianFixed>(cfg.prior.nominal.family()))
    throw UnsupportedError("oracle: nominal prior must be gaussian_fixed");
  OracleParams op;
  op.lambda = std::get<GaussianFixed>(cfg.prior.nominal.family()).lambda;
  op.sigma2 = p.sigma2;
  op.delta = p.delta;
  op.tau_star2 = cfg.prior.truth.second_moment(cfg.prior.alpha_star);
  op.validate();
  const MPLaw law = mp_quadrature(p.delta, cfg.oracle_nodes);
  const auto times = output_grid(cfg.grid_spacing, p.horizon, p.gamma_step);
  GridKernels g = GridKernels::empty("mp-oracle", 0.0, times, 0);
  const auto m = static_cast<Eigen::Index>(times.size());
  const double ratio = p.delta / p.sigma2;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double t = times[static_cast<std::size_t>(i)];
    const auto rk = resp_kernels(t, op, law);
    g.R_eta_star(i) = -ratio * rk.gamma_mp;
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double s = times[static_cast<std::size_t>(j)];
      const auto ck = corr_kernels(t, s, op, law);
      g.C_theta(i, j) = g.C_theta(j, i) = ck.C_theta;
      g.C_eta(i, j) = g.C_eta(j, i) = ck.C_eta;
      g.C_theta_se(i, j) = g.C_theta_se(j, i) = 0.0;
      g.C_eta_se(i, j) = g.C_eta_se(j, i) = 0.0;
      if (j == 0) {
        g.C_theta_star(i) = ck.C_theta_star;
        g.C_theta_star_se(i) = 0.0;
      }
      if (j < i) {
        const auto lag = resp_kernels(t - s, op, law);
        g.R_theta(i, j) = lag.alpha_mp;
        g.R_eta(i, j) = -ratio * lag.beta_mp;
        g.R_theta_se(i, j) = g.R_eta_se(i, j) = 0.0;
      }
    }
  }
  g.C_star_star = op.tau_star2;
  g.C_star_star_se = 0.0;
  return g;
}

fs::path resolve_output_dir(const std::optional<std::string>& cli_out, const RunConfig& cfg) {
  if (cli_out && !cli_out->empty()) return *cli_out;
  if (const char* env = std::getenv("DMFT_LAB_OUT"); env && *env) return env;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "out";
}

// ---- pipelines -------------------------------------------------------------

namespace {

json model_json(const ModelParams& p) {
  return {{"n", p.n},         {"d", p.d},         {"delta", p.delta},
          {"sigma2", p.sigma2}, {"beta", p.beta},   {"gamma", p.gamma_step},
          {"horizon", p.horizon}};
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_manifest(const fs::path& dir, const RunConfig& cfg, Pipeline p, const json& sources,
                    const std::vector<fs::path>& artifacts, const json& extra = json::object()) {
  json seeds = {{"master", cfg.seed}};
  for (const auto& s : sources)
    if (s.is_string() && s.get<std::string>().rfind("dir:", 0) != 0)
      seeds[s.get<std::string>()] = source_seed(cfg.seed, s.get<std::string>());
  json files = json::array();
  for (const auto& a : artifacts) files.push_back(a.filename().string());
  json m = {{"tool", "dmft-lab"},
            {"pipeline", pipeline_name(p)},
            {"config_name", cfg.name},
            {"config_hash", cfg.hash()},
            {"source", sources.size() == 1 ? sources[0] : sources},
            {"seeds", seeds},
            {"model", model_json(cfg.params)},
            {"grid_spacing", cfg.grid_spacing},
            {"git_describe", git_describe()},
            {"artifacts", files}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
  write_json(dir / "manifest.json", m);
}

double w2_sorted(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t m = std::min(a.size(), b.size());
  const auto ra = a.size() == m ? a : resample_sorted(a, m);
  const auto rb = b.size() == m ? b : resample_sorted(b, m);
  return wasserstein2_1d(ra, rb);
}

json solution_json(const EquilibriumSolution& s) {
  return {{"omega", s.omega},         {"omega_star", s.omega_star}, {"mse", s.mse},
          {"mse_star", s.mse_star},   {"ymse", s.ymse},             {"ymse_star", s.ymse_star},
          {"free_energy", s.free_energy}, {"c_eta_tti0", s.c_eta_tti0}, {"c_eta_inf", s.c_eta_inf},
          {"sweeps", s.sweeps},       {"trace", s.trace}};
}

}  // namespace

RunResult run(const RunConfig& cfg_in, Pipeline pipeline, const fs::path& out_dir) {
  RunConfig cfg = cfg_in;
  {
    Checker c;
    check_pipeline(cfg, pipeline, c);
    throw_if(c);
  }
  fs::create_directories(out_dir);
  RunResult rr;
  const auto& p = cfg.params;
  auto context = [&](const std::string& what, auto&& fn) {
    try {
      return fn();
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw std::runtime_error(pipeline_name(pipeline) + " pipeline, " + what + ": " + e.what());
    }
  };

  switch (pipeline) {
    case Pipeline::Simulate: {
      auto sim = context("simulator", [&] { return simulate_source(cfg, false); });
      rr.artifacts = write_kernels(sim.kernels, out_dir);
      write_manifest(out_dir, cfg, pipeline, json::array({"simulator"}), rr.artifacts,
                     {{"replicas", cfg.simulate.replicas}});
      rr.summary = "simulator kernels written";
      break;
    }
    case Pipeline::Dmft: {
      auto g = context("dmft-mc", [&] { return dmft_source(cfg, nullptr); });
      rr.artifacts = write_kernels(g, out_dir);
      write_manifest(out_dir, cfg, pipeline, json::array({"dmft-mc"}), rr.artifacts, {{"paths", cfg.dmft.paths}});
      rr.summary = "dmft-mc kernels written";
      break;
    }
    case Pipeline::DmftLinear: {
      auto g = context("dmft-linear", [&] { return dmft_linear_source(cfg); });
      rr.artifacts = write_kernels(g, out_dir);
      write_manifest(out_dir, cfg, pipeline, json::array({"dmft-linear"}), rr.artifacts);
      rr.summary = "dmft-linear kernels written";
      break;
    }
    case Pipeline::Oracle: {
      auto g = context("mp-oracle", [&] { return oracle_source(cfg); });
      rr.artifacts = write_kernels(g, out_dir);
      write_manifest(out_dir, cfg, pipeline, json::array({"mp-oracle"}), rr.artifacts,
                     {{"oracle_nodes", cfg.oracle_nodes}});
      rr.summary = "mp-oracle kernels written";
      break;
    }
    case Pipeline::Equilibrium: {
      FixedPointOptions fo;
      fo.tolerance = cfg.equilibrium.tolerance;
      const PriorAt g_star{cfg.prior.truth, cfg.prior.alpha_star};
      const PriorAt g{cfg.prior.nominal, cfg.prior.alpha0};
      json doc;
      doc["solution"] = context("fixed point", [&] {
        return solution_json(solve_fixed_point(p.delta, p.sigma2, g_star, g, fo));
      });
      if (cfg.prior.nominal.alpha_dim() > 0)
        doc["grad_F"] = context("grad_F", [&] {
          return grad_F(cfg.prior.alpha0, p.delta, p.sigma2, g_star, cfg.prior.nominal, fo);
        });
      rr.artifacts.push_back(out_dir / "equilibrium.json");
      write_json(rr.artifacts.back(), doc);
      if (!cfg.equilibrium.sweep_param.empty()) {
        rr.artifacts.push_back(out_dir / "equilibrium_sweep.csv");
        std::ofstream out(rr.artifacts.back(), std::ios::binary);
        out << "param,omega,omega_star,mse,mse_star,ymse,free_energy\n";
        for (double v : cfg.equilibrium.sweep_values) {
          const double delta = cfg.equilibrium.sweep_param == "delta" ? v : p.delta;
          const double s2 = cfg.equilibrium.sweep_param == "sigma2" ? v : p.sigma2;
          const auto s = context("sweep", [&] { return solve_fixed_point(delta, s2, g_star, g, fo); });
          out << fmt17(v) << ',' << fmt17(s.omega) << ',' << fmt17(s.omega_star) << ',' << fmt17(s.mse) << ','
              << fmt17(s.mse_star) << ',' << fmt17(s.ymse) << ',' << fmt17(s.free_energy) << '\n';
        }
      }
      write_manifest(out_dir, cfg, pipeline, json::array({"equilibrium"}), rr.artifacts);
      rr.summary = "equilibrium solution written";
      break;
    }
    case Pipeline::Compare: {
      const auto& srcs = cfg.compare.sources;
      const bool marg = std::count(srcs.begin(), srcs.end(), "simulator") &&
                        std::count(srcs.begin(), srcs.end(), "dmft-mc");
      std::vector<GridKernels> tables;
      std::map<std::string, std::vector<std::vector<double>>> marginals;
      for (const auto& s : srcs) {
        if (s.rfind("dir:", 0) == 0) {
          const fs::path dir = s.substr(4);
          std::ifstream in(dir / "manifest.json");
          if (!in) throw ValidationError("compare: no manifest.json in " + dir.string());
          const json man = json::parse(in);
          if (man.at("model") != model_json(p))
            throw ValidationError("compare: artifacts in " + dir.string() + " were produced with different model parameters");
          if (!man.at("source").is_string())
            throw ValidationError("compare: " + dir.string() + " holds more than one source");
          tables.push_back(read_kernels(dir, man.at("source").get<std::string>()));
          continue;
        }
        if (s == "simulator") {
          auto sim = context("simulator", [&] { return simulate_source(cfg, marg); });
          if (marg) marginals["simulator"] = std::move(sim.marginals);
          tables.push_back(std::move(sim.kernels));
        } else if (s == "dmft-mc") {
          tables.push_back(context("dmft-mc", [&] { return dmft_source(cfg, marg ? &marginals["dmft-mc"] : nullptr); }));
        } else if (s == "dmft-linear") {
          tables.push_back(context("dmft-linear", [&] { return dmft_linear_source(cfg); }));
        } else {
          tables.push_back(context("mp-oracle", [&] { return oracle_source(cfg); }));
        }
        auto files = write_kernels(tables.back(), out_dir);
        rr.artifacts.insert(rr.artifacts.end(), files.begin(), files.end());
      }
      json report = {{"reference", tables[0].source}, {"comparisons", json::array()}};
      bool pass = true;
      for (std::size_t i = 1; i < tables.size(); ++i) {
        CompareReport rep = compare_kernels(tables[0], tables[i], cfg.compare.max_abs, cfg.compare.per_kernel);
        const bool pair_marg = marg && ((tables[0].source == "simulator" && tables[i].source == "dmft-mc") ||
                                        (tables[0].source == "dmft-mc" && tables[i].source == "simulator"));
        if (pair_marg) {
          rep.w2_tolerance = cfg.compare.w2_tolerance;
          const auto& ms = marginals["simulator"];
          const auto& md = marginals["dmft-mc"];
          for (std::size_t k = 1; k < tables[0].times.size(); ++k) {
            const double w = w2_sorted(ms[k], md[k]);
            rep.w2.emplace_back(tables[0].times[k], w);
            rep.pass = rep.pass && w <= rep.w2_tolerance;
          }
        }
        pass = pass && rep.pass;
        report["comparisons"].push_back(rep.to_json());
      }
      report["pass"] = pass;
      rr.artifacts.push_back(out_dir / "report.json");
      write_json(rr.artifacts.back(), report);
      json names = json::array();
      for (const auto& s : srcs) names.push_back(s);
      write_manifest(out_dir, cfg, pipeline, names, rr.artifacts);
      rr.exit_code = pass ? 0 : 2;
      rr.summary = pass ? "compare: all kernels within tolerance" : "compare: tolerance exceeded (see report.json)";
      break;
    }
    case Pipeline::Response: {
      const auto s = static_cast<std::size_t>(std::llround(cfg.response.s / p.gamma_step));
      const std::uint64_t seed = source_seed(cfg.seed, "response");
      const ModelInstance inst = sample_instance(p, cfg.prior, seed, cfg.simulate.design);
      const auto fd = context("finite difference", [&] {
        return finite_diff_response(inst, cfg.prior, p, s, cfg.response.coord, cfg.response.eps, seed);
      });
      EvolveOptions eo;
      eo.retain_every = 1;
      const Trajectory tr = context("evolve", [&] { return evolve(inst, cfg.prior, p, seed, NoiseMode::Stochastic, eo); });
      std::vector<StepPair> pairs;
      for (std::size_t t = s + 1; t <= p.n_steps(); ++t) pairs.push_back({t, s});
      const auto grid = context("response traces", [&] {
        return response_traces(tr, inst, cfg.prior, p, pairs,
                               cfg.response.method == "exact" ? ResponseMethod::ExactProduct : ResponseMethod::Probe,
                               cfg.response.probes, seed);
      });
      rr.artifacts.push_back(out_dir / "response.csv");
      std::ofstream out(rr.artifacts.back(), std::ios::binary);
      out << "t,s,fd,trace,trace_stderr\n";
      for (std::size_t k = 0; k < pairs.size(); ++k)
        out << fmt_time(static_cast<double>(pairs[k].t) * p.gamma_step) << ','
            << fmt_time(static_cast<double>(s) * p.gamma_step) << ',' << fmt17(fd[k] / p.gamma_step) << ','
            << fmt17(grid.R_theta[k] / p.gamma_step) << ',' << fmt17(grid.R_theta_se[k] / p.gamma_step) << '\n';
      out.close();
      write_manifest(out_dir, cfg, pipeline, json::array({"response"}), rr.artifacts,
                     {{"coord", cfg.response.coord}, {"s", cfg.response.s}});
      rr.summary = "response traces written";
      break;
    }
  }
  return rr;
}

}  // namespace dmftlab
