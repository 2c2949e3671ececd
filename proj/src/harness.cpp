#include "mlsmc/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#ifndef MLSMC_GIT_REVISION
#define MLSMC_GIT_REVISION "unknown"
#endif

namespace mlsmc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
// stream tags private to the harness
constexpr std::uint64_t kCellTag = 0xce11;
constexpr std::uint64_t kReferenceTag = 0x4ef;
constexpr std::uint64_t kSpikedTarget = 0x5a1;
constexpr std::uint64_t kSpikedSamples = 0x5a2;

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw InvalidArgument("unknown config key '" + it.key() + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace

// ---------------------------------------------------------------------------
// names

std::string to_string(ModelKind kind) {
  return kind == ModelKind::Diffusion ? "diffusion" : "elliptic";
}

std::string to_string(Method method) {
  switch (method) {
    case Method::Smc: return "smc";
    case Method::MlsmcPcn: return "mlsmc-pcn";
    case Method::MlsmcDili: return "mlsmc-dili";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "smc") return Method::Smc;
  if (name == "mlsmc-pcn") return Method::MlsmcPcn;
  if (name == "mlsmc-dili") return Method::MlsmcDili;
  throw InvalidArgument("unknown method '" + name + "' (smc, mlsmc-pcn, mlsmc-dili)");
}

ModelKind parse_model(const std::string& name) {
  if (name == "diffusion") return ModelKind::Diffusion;
  if (name == "elliptic") return ModelKind::Elliptic;
  throw InvalidArgument("unknown model '" + name + "' (diffusion, elliptic)");
}

namespace {
DriftKind parse_drift(const std::string& s) {
  if (s == "zero") return DriftKind::Zero;
  if (s == "linear") return DriftKind::Linear;
  if (s == "sine") return DriftKind::Sine;
  throw InvalidArgument("unknown drift '" + s + "' (zero, linear, sine)");
}
std::string drift_name(DriftKind k) {
  switch (k) {
    case DriftKind::Zero: return "zero";
    case DriftKind::Linear: return "linear";
    case DriftKind::Sine: return "sine";
  }
  return "?";
}
}  // namespace

// ---------------------------------------------------------------------------
// config

ExperimentConfig config_from_json(const json& j) {
  check_keys(j,
             {"model", "diffusion", "elliptic", "levels", "eps", "replicates", "seed", "workers",
              "methods", "kernel", "schedule", "pilot", "reference", "clis_demo", "data", "out"},
             "config");
  ExperimentConfig c;
  if (j.contains("model")) c.model = parse_model(j.at("model").get<std::string>());
  if (j.contains("diffusion")) {
    const json& d = j.at("diffusion");
    check_keys(d, {"horizon", "num_obs", "first_obs", "noise_variance", "d0", "p0", "drift",
                   "drift_scale", "sigma", "radius_factor"},
               "diffusion");
    auto& o = c.diffusion;
    read(d, "horizon", o.horizon);
    read(d, "num_obs", o.num_obs);
    read(d, "first_obs", o.first_obs);
    read(d, "noise_variance", o.noise_variance);
    read(d, "d0", o.d0);
    read(d, "p0", o.p0);
    if (d.contains("drift")) o.drift = parse_drift(d.at("drift").get<std::string>());
    read(d, "drift_scale", o.drift_scale);
    read(d, "sigma", o.sigma);
    read(d, "radius_factor", o.radius_factor);
  }
  if (j.contains("elliptic")) {
    const json& e = j.at("elliptic");
    check_keys(e, {"k0", "sigma2", "alpha", "source_sigma", "bumps", "obs_per_side", "obs_lo",
                   "obs_hi", "snr", "radius_factor", "cost_exponent", "cg_tol"},
               "elliptic");
    auto& o = c.elliptic;
    read(e, "k0", o.k0);
    read(e, "sigma2", o.sigma2);
    read(e, "alpha", o.alpha);
    read(e, "source_sigma", o.source_sigma);
    if (e.contains("bumps")) {
      o.bumps.clear();
      for (const auto& b : e.at("bumps")) {
        auto v = b.get<std::vector<double>>();
        require(v.size() == 3, "each bump is [x, y, weight]");
        o.bumps.push_back({v[0], v[1], v[2]});
      }
    }
    read(e, "obs_per_side", o.obs_per_side);
    read(e, "obs_lo", o.obs_lo);
    read(e, "obs_hi", o.obs_hi);
    read(e, "snr", o.snr);
    read(e, "radius_factor", o.radius_factor);
    read(e, "cost_exponent", o.cost_exponent);
    read(e, "cg_tol", o.cg_tol);
  }
  read(j, "levels", c.levels);
  read(j, "eps", c.eps);
  read(j, "replicates", c.replicates);
  read(j, "seed", c.seed);
  read(j, "workers", c.workers);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
  }
  if (j.contains("kernel")) {
    const json& k = j.at("kernel");
    check_keys(k, {"b_m", "b_perp", "n_steps", "adapt", "target", "burn_in_fraction", "tune_perp",
                   "level0_steps", "level0_refreshes", "level0_tempering", "tempering_ess", "tempering_steps", "m_policy", "m", "tol", "m_max",
                   "use_mean_shift", "resample", "track_discrepancy"},
               "kernel");
    auto& o = c.kernel;
    read(k, "b_m", o.b_m);
    read(k, "b_perp", o.b_perp);
    read(k, "n_steps", o.n_steps);
    read(k, "adapt", o.adapt);
    read(k, "target", o.target);
    read(k, "burn_in_fraction", o.burn_in_fraction);
    read(k, "tune_perp", o.tune_perp);
    read(k, "level0_steps", o.level0_steps);
    read(k, "level0_refreshes", o.level0_refreshes);
    read(k, "level0_tempering", o.level0_tempering);
    read(k, "tempering_ess", o.tempering_ess);
    read(k, "tempering_steps", o.tempering_steps);
    read(k, "m_policy", o.m_policy);
    read(k, "m", o.m);
    read(k, "tol", o.tol);
    read(k, "m_max", o.m_max);
    read(k, "use_mean_shift", o.use_mean_shift);
    read(k, "resample", o.resample);
    read(k, "track_discrepancy", o.track_discrepancy);
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    check_keys(s, {"beta", "zeta", "zeta_clis", "n_floor", "c0", "cv", "smc_c", "level0_work",
                   "step_work", "cutoff"},
               "schedule");
    auto& o = c.schedule;
    read(s, "beta", o.beta);
    read(s, "zeta", o.zeta);
    if (s.contains("zeta_clis") && !s.at("zeta_clis").is_null())
      o.zeta_clis = s.at("zeta_clis").get<double>();
    read(s, "n_floor", o.n_floor);
    read(s, "c0", o.c0);
    read(s, "cv", o.cv);
    read(s, "smc_c", o.smc_c);
    read(s, "level0_work", o.level0_work);
    read(s, "step_work", o.step_work);
    read(s, "cutoff", o.cutoff);
  }
  if (j.contains("pilot")) {
    const json& p = j.at("pilot");
    check_keys(p, {"n", "levels"}, "pilot");
    read(p, "n", c.pilot.n);
    read(p, "levels", c.pilot.levels);
  }
  if (j.contains("reference")) {
    const json& r = j.at("reference");
    check_keys(r, {"extra_levels", "budget_factor", "runs", "method"}, "reference");
    read(r, "extra_levels", c.reference.extra_levels);
    read(r, "budget_factor", c.reference.budget_factor);
    read(r, "runs", c.reference.runs);
    read(r, "method", c.reference.method);
  }
  if (j.contains("clis_demo")) {
    const json& d = j.at("clis_demo");
    check_keys(d, {"d", "m", "targets", "sample_sizes", "tol"}, "clis_demo");
    read(d, "d", c.clis_demo.d);
    read(d, "m", c.clis_demo.m);
    read(d, "targets", c.clis_demo.targets);
    read(d, "sample_sizes", c.clis_demo.sample_sizes);
    read(d, "tol", c.clis_demo.tol);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, {"path", "seed", "level"}, "data");
    read(d, "path", c.data_path);
    read(d, "seed", c.data_seed);
    read(d, "level", c.data_level);
  }
  read(j, "out", c.out_dir);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = to_string(c.model);
  const auto& d = c.diffusion;
  j["diffusion"] = {{"horizon", d.horizon},     {"num_obs", d.num_obs},
                    {"first_obs", d.first_obs}, {"noise_variance", d.noise_variance},
                    {"d0", d.d0},               {"p0", d.p0},
                    {"drift", drift_name(d.drift)}, {"drift_scale", d.drift_scale},
                    {"sigma", d.sigma},         {"radius_factor", d.radius_factor}};
  const auto& e = c.elliptic;
  json bumps = json::array();
  for (const auto& b : e.bumps) bumps.push_back({b.x, b.y, b.weight});
  j["elliptic"] = {{"k0", e.k0},
                   {"sigma2", e.sigma2},
                   {"alpha", e.alpha},
                   {"source_sigma", e.source_sigma},
                   {"bumps", bumps},
                   {"obs_per_side", e.obs_per_side},
                   {"obs_lo", e.obs_lo},
                   {"obs_hi", e.obs_hi},
                   {"snr", e.snr},
                   {"radius_factor", e.radius_factor},
                   {"cost_exponent", e.cost_exponent},
                   {"cg_tol", e.cg_tol}};
  j["levels"] = c.levels;
  j["eps"] = c.eps;
  j["replicates"] = c.replicates;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  j["methods"] = methods;
  const auto& k = c.kernel;
  j["kernel"] = {{"b_m", k.b_m},
                 {"b_perp", k.b_perp},
                 {"n_steps", k.n_steps},
                 {"adapt", k.adapt},
                 {"target", k.target},
                 {"burn_in_fraction", k.burn_in_fraction},
                 {"tune_perp", k.tune_perp},
                 {"level0_steps", k.level0_steps},
                 {"level0_refreshes", k.level0_refreshes},
                 {"level0_tempering", k.level0_tempering},
                 {"tempering_ess", k.tempering_ess},
                 {"tempering_steps", k.tempering_steps},
                 {"m_policy", k.m_policy},
                 {"m", k.m},
                 {"tol", k.tol},
                 {"m_max", k.m_max},
                 {"use_mean_shift", k.use_mean_shift},
                 {"resample", k.resample},
                 {"track_discrepancy", k.track_discrepancy}};
  const auto& s = c.schedule;
  j["schedule"] = {{"beta", s.beta},   {"zeta", s.zeta},       {"n_floor", s.n_floor},
                   {"c0", s.c0},       {"cv", s.cv},           {"smc_c", s.smc_c},
                   {"level0_work", s.level0_work}, {"step_work", s.step_work},
                   {"cutoff", s.cutoff}};
  j["schedule"]["zeta_clis"] = s.zeta_clis ? json(*s.zeta_clis) : json(nullptr);
  j["pilot"] = {{"n", c.pilot.n}, {"levels", c.pilot.levels}};
  j["reference"] = {{"extra_levels", c.reference.extra_levels},
                    {"budget_factor", c.reference.budget_factor},
                    {"runs", c.reference.runs},
                    {"method", c.reference.method}};
  j["clis_demo"] = {{"d", c.clis_demo.d},
                    {"m", c.clis_demo.m},
                    {"targets", c.clis_demo.targets},
                    {"sample_sizes", c.clis_demo.sample_sizes},
                    {"tol", c.clis_demo.tol}};
  j["data"] = {{"path", c.data_path}, {"seed", c.data_seed}, {"level", c.data_level}};
  j["out"] = c.out_dir;
  return j;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read config " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw InvalidArgument("malformed config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

void validate(const ExperimentConfig& c) {
  require(c.levels >= 0, "levels must be >= 0");
  require(!c.eps.empty(), "eps grid is empty");
  for (std::size_t i = 0; i < c.eps.size(); ++i) {
    require(c.eps[i] > 0, "eps values must be positive");
    if (i > 0) require(c.eps[i] < c.eps[i - 1], "eps grid must be strictly decreasing");
  }
  require(c.replicates >= 1, "replicates must be >= 1");
  require(!c.methods.empty(), "no methods selected");
  require(c.schedule.n_floor >= 2, "n_floor must be >= 2");
  require(c.schedule.c0 > 0 && c.schedule.cv > 0 && c.schedule.smc_c > 0 &&
              c.schedule.level0_work > 0 && c.schedule.step_work > 0,
          "schedule scale factors must be positive");
  require(c.pilot.n >= 2 && c.pilot.levels >= 0, "invalid pilot settings");
  require(c.reference.extra_levels >= 0 && c.reference.runs >= 1, "invalid reference settings");
  require(c.reference.budget_factor >= 4,
          "reference.budget_factor must be >= 4 (reference budget at least 4x the finest cell)");
  parse_method(c.reference.method);
  require(c.kernel.m_policy == "auto" || c.kernel.m_policy == "fixed",
          "kernel.m_policy must be 'auto' or 'fixed'");
  require(c.kernel.resample == "multinomial" || c.kernel.resample == "systematic",
          "kernel.resample must be 'multinomial' or 'systematic'");
  require(c.kernel.level0_steps >= 0, "level0_steps must be >= 0");
  require(c.kernel.tempering_steps >= 0, "tempering_steps must be >= 0");
  require(c.kernel.tempering_ess > 0 && c.kernel.tempering_ess < 1, "tempering_ess must lie in (0, 1)");
  DiliParams p;
  p.b_m = c.kernel.b_m;
  p.b_perp = c.kernel.b_perp;
  p.n_steps = c.kernel.n_steps;
  p.adapt.target = c.kernel.target;
  p.adapt.burn_in_fraction = c.kernel.burn_in_fraction;
  validate(p);
  if (c.data_level >= 0)
    require(c.data_level >= c.levels, "data level must not be coarser than the finest inference level");
}

int finest_solve_level(const ExperimentConfig& c) {
  return std::max(c.levels + c.reference.extra_levels, c.pilot.levels);
}

int data_level(const ExperimentConfig& c) {
  return c.data_level >= 0 ? c.data_level : finest_solve_level(c) + 1;
}

// ---------------------------------------------------------------------------
// problems

namespace {
std::shared_ptr<const GaussianHierarchy> make_hierarchy(const ExperimentConfig& c, int num_levels) {
  if (c.model == ModelKind::Diffusion)
    return std::make_shared<BrownianHierarchy>(c.diffusion.horizon, c.diffusion.d0, num_levels);
  return std::make_shared<GridHierarchy2D>(c.elliptic.k0, num_levels, c.elliptic.sigma2,
                                           c.elliptic.alpha);
}
}  // namespace

ObservationData generate_data(const ExperimentConfig& c, int level, std::uint64_t seed) {
  require(level >= 0, "data level must be >= 0");
  auto hier = make_hierarchy(c, level + 1);
  RandomStream rng = RandomStream::derive(seed, {stream::kData, std::uint64_t(level)});
  ObservationData data;
  data.model = to_string(c.model);
  data.level = level;
  data.seed = seed;
  if (c.model == ModelKind::Diffusion) {
    auto bh = std::static_pointer_cast<const BrownianHierarchy>(hier);
    DiffusionModel model(c.diffusion, bh, Vec::Zero(c.diffusion.num_obs));
    Vec u;
    do u = hier->sample_prior(level, rng);
    while (!model.in_restriction(u));
    data.truth = model.observe(level, u);
    data.noise_variance = c.diffusion.noise_variance;
    data.times = c.diffusion.obs_times();
  } else {
    auto gh = std::static_pointer_cast<const GridHierarchy2D>(hier);
    const Index q = Index(c.elliptic.obs_points().size());
    EllipticModel model(c.elliptic, gh, Vec::Zero(q), 1.0);
    Vec u;
    do u = hier->sample_prior(level, rng);
    while (!model.in_restriction(u));
    const Mat nodal = model.solve(level, u);
    data.truth = model.observe(nodal);
    const double sigma_y = nodal.cwiseAbs().maxCoeff() / c.elliptic.snr;
    data.noise_variance = sigma_y * sigma_y;
    data.points = c.elliptic.obs_points();
  }
  const double sd = std::sqrt(data.noise_variance);
  data.values = data.truth + sd * draw_normals(rng, data.truth.size());
  return data;
}

Problem build_problem(const ExperimentConfig& c, const ObservationData& data, int num_levels) {
  require(num_levels >= 1, "need at least one level");
  if (data.model != to_string(c.model))
    throw InvalidArgument("observation file is for model '" + data.model + "'");
  Problem p;
  p.data = data;
  p.hierarchy = make_hierarchy(c, num_levels);
  if (c.model == ModelKind::Diffusion) {
    DiffusionConfig dc = c.diffusion;
    dc.noise_variance = data.noise_variance;
    p.model = std::make_shared<DiffusionModel>(
        dc, std::static_pointer_cast<const BrownianHierarchy>(p.hierarchy), data.values);
  } else {
    p.model = std::make_shared<EllipticModel>(
        c.elliptic, std::static_pointer_cast<const GridHierarchy2D>(p.hierarchy), data.values,
        data.noise_variance);
  }
  return p;
}

Problem make_problem(const ExperimentConfig& c) {
  const ObservationData data = c.data_path.empty() ? generate_data(c, data_level(c), c.data_seed)
                                                   : load_observations(c.data_path);
  return build_problem(c, data, finest_solve_level(c) + 1);
}

SamplerOptions sampler_options(const ExperimentConfig& c, Method method) {
  SamplerOptions o;
  o.kernel = method == Method::MlsmcDili ? KernelKind::Dili : KernelKind::Pcn;
  o.params.b_m = c.kernel.b_m;
  o.params.b_perp = c.kernel.b_perp;
  o.params.n_steps = c.kernel.n_steps;
  o.params.adapt.enabled = c.kernel.adapt;
  o.params.adapt.target = c.kernel.target;
  o.params.adapt.burn_in_fraction = c.kernel.burn_in_fraction;
  o.params.adapt.tune_perp = c.kernel.tune_perp;
  o.init.steps = c.kernel.level0_steps;
  o.level0_refreshes = c.kernel.level0_refreshes;
  o.init.tempering = c.kernel.level0_tempering;
  o.init.tempering_ess = c.kernel.tempering_ess;
  o.init.tempering_steps = c.kernel.tempering_steps;
  o.m_policy = c.kernel.m_policy == "fixed" ? MPolicy::fixed(c.kernel.m)
                                            : MPolicy::automatic(c.kernel.tol, c.kernel.m_max);
  o.cutoff_level = c.schedule.cutoff;
  o.use_mean_shift = c.kernel.use_mean_shift;
  o.telescoping = method != Method::Smc;
  o.advance.scheme =
      c.kernel.resample == "systematic" ? ResampleScheme::Systematic : ResampleScheme::Multinomial;
  o.advance.track_discrepancy = c.kernel.track_discrepancy;
  return o;
}

// ---------------------------------------------------------------------------
// schedules

namespace {
double level_zeta(const ScheduleConfig& s, int level) {
  if (s.zeta_clis && s.cutoff >= 0 && level <= s.cutoff) return *s.zeta_clis;
  return s.zeta;
}
double level_cost(const ScheduleConfig& s, double r, int level) {
  return (level == 0 ? s.level0_work : s.step_work) * std::pow(r, -level_zeta(s, level));
}
double level_variance(const ScheduleConfig& s, double r, int level) {
  return level == 0 ? s.c0 : s.cv * std::pow(r, s.beta);
}
}  // namespace

std::vector<Index> sample_schedule(double eps, const ScheduleConfig& s, const std::vector<double>& h,
                                   std::vector<std::string>* warnings) {
  require(eps > 0, "sample_schedule: eps must be positive");
  require(!h.empty() && h[0] > 0, "sample_schedule: need h_0 > 0");
  const std::size_t levels = h.size();
  std::vector<double> v(levels), cst(levels);
  bool any_ok = levels == 1;
  for (std::size_t l = 0; l < levels; ++l) {
    const double r = h[l] / h[0];
    v[l] = level_variance(s, r, int(l));
    cst[l] = level_cost(s, r, int(l));
    if (l > 0 && s.beta > level_zeta(s, int(l))) any_ok = true;
  }
  if (!any_ok && warnings)
    warnings->push_back("schedule: beta <= zeta at every level; cost will exceed O(eps^-2)");
  double k_l = 0.0;
  for (std::size_t l = 0; l < levels; ++l) k_l += std::sqrt(v[l] * cst[l]);
  std::vector<Index> n(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    const double raw = k_l * std::sqrt(v[l] / cst[l]) / (eps * eps);
    n[l] = std::max<Index>(s.n_floor, Index(std::ceil(raw - 1e-9)));
    if (l > 0) n[l] = std::min(n[l], n[l - 1]);
  }
  return n;
}

double scheduled_cost(const std::vector<Index>& n, const ScheduleConfig& s,
                      const std::vector<double>& h) {
  require(n.size() == h.size(), "scheduled_cost: size mismatch");
  double total = 0.0;
  for (std::size_t l = 0; l < n.size(); ++l)
    total += double(n[l]) * level_cost(s, h[l] / h[0], int(l));
  return total;
}

int sweep_level(const ExperimentConfig& c, double eps) {
  const double eps_min = c.eps.back();
  const int shift = int(std::lround(std::log2(eps / eps_min)));
  return std::max(0, c.levels - shift);
}

// ---------------------------------------------------------------------------
// rates

LogLogFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), "fit_loglog: size mismatch");
  if (x.size() < 3) throw InvalidArgument("rate regression needs at least 3 levels");
  const std::size_t n = x.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw InvalidArgument("log-log fit needs positive data");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / double(n);
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / double(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  require(sxx > 0, "log-log fit needs distinct x values");
  LogLogFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  const double rss = std::max(0.0, syy - f.slope * sxy);
  f.r2 = syy > 0 ? 1.0 - rss / syy : 1.0;
  f.slope_se = n > 2 ? std::sqrt(rss / double(n - 2) / sxx) : 0.0;
  f.points = Index(n);
  return f;
}

RateEstimate estimate_rates(const std::vector<LevelRecord>& levels,
                            const std::vector<double>& unit_cost,
                            const std::vector<double>& unit_wall) {
  require(unit_cost.size() == levels.size(), "estimate_rates: one unit cost per level");
  RateEstimate r;
  r.levels = levels;
  r.unit_cost = unit_cost;
  r.unit_wall = unit_wall;
  std::vector<double> h, v;
  for (const auto& rec : levels)
    if (rec.level >= 1) {
      h.push_back(rec.h);
      v.push_back(rec.vhat);
    }
  r.beta = fit_loglog(h, v);
  double steps = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& rec = levels[i];
    const double w = rec.n > 0 && unit_cost[i] > 0 ? rec.cost / (double(rec.n) * unit_cost[i]) : 0.0;
    r.work_per_particle.push_back(w);
    if (rec.level == 0) r.level0_work = w;
    else steps += w;
  }
  if (h.size()) r.step_work = steps / double(h.size());
  std::vector<double> hall;
  for (const auto& rec : levels) hall.push_back(rec.h);
  r.zeta = fit_loglog(hall, unit_cost);
  r.zeta.slope = -r.zeta.slope;
  if (unit_wall.size() == levels.size()) {
    LogLogFit w = fit_loglog(hall, unit_wall);
    w.slope = -w.slope;
    r.zeta_wall = w;
  }
  return r;
}

RateEstimate run_pilot(const ExperimentConfig& c, const Problem& problem, Method method) {
  const int top = c.pilot.levels;
  require(top + 1 <= problem.hierarchy->num_levels(), "pilot deeper than the problem hierarchy");
  if (top < 3) throw InvalidArgument("rate regression needs at least 3 levels");
  SamplerOptions opts = sampler_options(c, method);
  opts.telescoping = true;
  opts.advance.track_discrepancy = true;
  std::vector<Index> n(std::size_t(top + 1), c.pilot.n);
  const RunResult run = run_mlsmc(*problem.model, n, opts, c.seed);

  // per-solve costs: ledger units and a short wall-clock measurement
  std::vector<double> unit_cost, unit_wall;
  for (int l = 0; l <= top; ++l) {
    unit_cost.push_back(problem.model->cost(l));
    RandomStream rng = RandomStream::derive(c.seed, {stream::kPrior, 0xc057, std::uint64_t(l)});
    const Vec u = problem.hierarchy->unwhiten(l, draw_normals(rng, problem.hierarchy->dim(l)));
    const int reps = 5;
    auto t0 = std::chrono::steady_clock::now();
    for (int k = 0; k < reps; ++k) (void)problem.model->evaluate(l, u);
    unit_wall.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps);
  }
  RateEstimate r = estimate_rates(run.levels, unit_cost, unit_wall);
  r.clis = run.clis;
  r.tempering_stages = run.tempering_stages;
  return r;
}

// ---------------------------------------------------------------------------
// sweeps

std::uint64_t cell_seed(std::uint64_t seed, Method method, std::size_t eps_index, int replicate) {
  RandomStream s = RandomStream::derive(
      seed, {kCellTag, std::uint64_t(method), std::uint64_t(eps_index), std::uint64_t(replicate)});
  return s.bits() & ~std::uint64_t(1);  // even: never collides with a reference seed
}

namespace {
std::uint64_t reference_seed(std::uint64_t seed, int run) {
  RandomStream s = RandomStream::derive(seed, {kReferenceTag, std::uint64_t(run)});
  return s.bits() | std::uint64_t(1);
}

std::vector<double> level_h(const GaussianHierarchy& hier, int top) {
  std::vector<double> h;
  for (int l = 0; l <= top; ++l) h.push_back(hier.layout(l).h);
  return h;
}

std::vector<Index> method_schedule(const ExperimentConfig& c, const GaussianHierarchy& hier,
                                   Method method, double eps, int top,
                                   std::vector<std::string>* warnings) {
  if (method == Method::Smc) {
    const Index n = std::max<Index>(c.schedule.n_floor,
                                    Index(std::ceil(c.schedule.smc_c / (eps * eps) - 1e-9)));
    return std::vector<Index>(std::size_t(top + 1), n);
  }
  return sample_schedule(eps, c.schedule, level_h(hier, top), warnings);
}

void check_dili_schedule(const ExperimentConfig& c, const GaussianHierarchy& hier,
                         const std::vector<Index>& n) {
  if (c.schedule.cutoff >= 0) {
    const int cut = std::min<int>(c.schedule.cutoff, int(n.size()) - 1);
    if (n[std::size_t(cut)] <= hier.dim(cut))
      throw InvalidArgument("schedule violates N_l* > d_l* at l* = " + std::to_string(cut));
  } else if (n[0] <= hier.dim(0)) {
    throw InvalidArgument("schedule gives N_0 = " + std::to_string(n[0]) +
                          " <= d_0 = " + std::to_string(hier.dim(0)) +
                          "; raise n_floor or c0 for the cLIS");
  }
}

json reference_key(const ExperimentConfig& c, const Problem& p) {
  json cfg = config_to_json(c);
  json key;
  for (const char* k : {"model", "diffusion", "elliptic", "levels", "kernel", "schedule",
                        "reference", "seed"})
    key[k] = cfg[k];
  key["eps_min"] = c.eps.back();
  key["y"] = std::vector<double>(p.data.values.data(), p.data.values.data() + p.data.values.size());
  return key;
}

const char* kResultsHeader = "method,eps,level,replicate,estimate,mse,cost_units";
const char* kTimingsHeader = "method,eps,replicate,wall_s";

std::string result_line(const SweepRow& r) {
  return to_string(r.method) + "," + fmt(r.eps) + "," + std::to_string(r.level) + "," +
         std::to_string(r.replicate) + "," + fmt(r.estimate) + "," + fmt(r.mse) + "," +
         fmt(r.cost_units);
}

std::string timing_line(const SweepRow& r) {
  return to_string(r.method) + "," + fmt(r.eps) + "," + std::to_string(r.replicate) + "," +
         fmt(r.wall_s);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

bool same_eps(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); }
}  // namespace

Reference reference_estimate(const ExperimentConfig& c, const Problem& p, const std::string& out_dir) {
  const fs::path cache = fs::path(out_dir) / "reference.json";
  const json key = reference_key(c, p);
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    json j;
    try {
      in >> j;
      if (j.at("key") == key) {
        Reference r;
        r.value = j.at("value").get<double>();
        r.eps = j.at("eps").get<double>();
        r.level = j.at("level").get<int>();
        r.cost_units = j.at("cost_units").get<double>();
        r.runs = j.at("runs").get<std::vector<double>>();
        return r;
      }
    } catch (const std::exception&) {
      warn("ignoring unreadable reference cache " + cache.string());
    }
  }
  Reference r;
  r.level = c.levels + c.reference.extra_levels;
  require(r.level <= p.hierarchy->finest_level(), "reference level beyond the problem hierarchy");
  r.eps = c.eps.back() / std::sqrt(c.reference.budget_factor);
  const Method method = parse_method(c.reference.method);
  std::vector<std::string> warnings;
  const auto n = method_schedule(c, *p.hierarchy, method, r.eps, r.level, &warnings);
  for (const auto& w : warnings) warn(w);
  if (method == Method::MlsmcDili) check_dili_schedule(c, *p.hierarchy, n);
  const SamplerOptions opts = sampler_options(c, method);
  for (int k = 0; k < c.reference.runs; ++k) {
    const RunResult run = run_mlsmc(*p.model, n, opts, reference_seed(c.seed, k));
    r.runs.push_back(run.estimate);
    r.cost_units += run.total_cost;
  }
  r.value = std::accumulate(r.runs.begin(), r.runs.end(), 0.0) / double(r.runs.size());
  fs::create_directories(out_dir);
  json j{{"key", key},   {"value", r.value},           {"eps", r.eps},
         {"level", r.level}, {"cost_units", r.cost_units}, {"runs", r.runs}};
  std::ofstream out(cache);
  out << j.dump(2) << '\n';
  return r;
}

std::vector<SweepRow> read_results(const std::string& path) {
  std::vector<SweepRow> rows;
  std::ifstream in(path);
  if (!in) return rows;
  std::string line;
  if (!std::getline(in, line)) return rows;
  if (line != kResultsHeader) throw InvalidArgument(path + ": unexpected results header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 7) throw InvalidArgument(path + ": malformed row '" + line + "'");
    SweepRow r;
    r.method = parse_method(f[0]);
    r.eps = std::stod(f[1]);
    r.level = std::stoi(f[2]);
    r.replicate = std::stoi(f[3]);
    r.estimate = std::stod(f[4]);
    r.mse = std::stod(f[5]);
    r.cost_units = std::stod(f[6]);
    rows.push_back(r);
  }
  return rows;
}

namespace {
std::vector<SweepRow> read_timings(const std::string& path, std::vector<SweepRow> rows) {
  std::ifstream in(path);
  if (!in) return rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = split(line, ',');
    if (f.size() != 4) continue;
    const Method m = parse_method(f[0]);
    const double eps = std::stod(f[1]);
    const int rep = std::stoi(f[2]);
    for (auto& r : rows)
      if (r.method == m && same_eps(r.eps, eps) && r.replicate == rep) r.wall_s = std::stod(f[3]);
  }
  return rows;
}
}  // namespace

void write_results(const std::vector<SweepRow>& rows, const std::string& results_path,
                   const std::string& timings_path) {
  std::ofstream res(results_path), tim(timings_path);
  if (!res || !tim) throw InvalidArgument("cannot write sweep outputs");
  res << kResultsHeader << '\n';
  tim << kTimingsHeader << '\n';
  for (const auto& r : rows) {
    res << result_line(r) << '\n';
    tim << timing_line(r) << '\n';
  }
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& c, const std::string& out_dir) {
  validate(c);
  set_worker_count(c.workers);
  fs::create_directories(out_dir);
  const Problem p = make_problem(c);
  const auto& hier = *p.hierarchy;
  require(c.levels <= hier.finest_level(), "sweep levels beyond the hierarchy");

  // plan every cell up front so configuration errors surface before any work
  struct Cell {
    Method method;
    std::size_t eps_index;
    int level;
    std::vector<Index> n;
  };
  std::vector<Cell> plan;
  std::set<std::string> warned;
  for (Method m : c.methods)
    for (std::size_t e = 0; e < c.eps.size(); ++e) {
      const int level = sweep_level(c, c.eps[e]);
      std::vector<std::string> warnings;
      auto n = method_schedule(c, hier, m, c.eps[e], level, &warnings);
      for (const auto& w : warnings)
        if (warned.insert(w).second) warn(w);
      if (m == Method::MlsmcDili) check_dili_schedule(c, hier, n);
      plan.push_back({m, e, level, std::move(n)});
    }

  const Reference ref = reference_estimate(c, p, out_dir);

  const std::string results_path = (fs::path(out_dir) / "results.csv").string();
  const std::string timings_path = (fs::path(out_dir) / "timings.csv").string();
  std::vector<SweepRow> rows = read_timings(timings_path, read_results(results_path));
  auto done = [&](Method m, double eps, int rep) {
    return std::any_of(rows.begin(), rows.end(), [&](const SweepRow& r) {
      return r.method == m && same_eps(r.eps, eps) && r.replicate == rep;
    });
  };
  if (rows.empty()) write_results({}, results_path, timings_path);

  for (const Cell& cell : plan) {
    const double eps = c.eps[cell.eps_index];
    const SamplerOptions opts = sampler_options(c, cell.method);
    for (int rep = 0; rep < c.replicates; ++rep) {
      if (done(cell.method, eps, rep)) continue;
      const auto t0 = std::chrono::steady_clock::now();
      const RunResult run =
          run_mlsmc(*p.model, cell.n, opts, cell_seed(c.seed, cell.method, cell.eps_index, rep));
      SweepRow row;
      row.method = cell.method;
      row.eps = eps;
      row.level = cell.level;
      row.replicate = rep;
      row.estimate = run.estimate;
      row.mse = (run.estimate - ref.value) * (run.estimate - ref.value);
      row.cost_units = run.total_cost;
      row.wall_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rows.push_back(row);
      // append so an interrupted sweep keeps finished cells
      std::ofstream(results_path, std::ios::app) << result_line(row) << '\n';
      std::ofstream(timings_path, std::ios::app) << timing_line(row) << '\n';
    }
  }

  // canonical order: configured method order, ε as configured, replicate
  auto method_rank = [&](Method m) {
    return std::size_t(std::find(c.methods.begin(), c.methods.end(), m) - c.methods.begin());
  };
  auto eps_rank = [&](double eps) {
    for (std::size_t i = 0; i < c.eps.size(); ++i)
      if (same_eps(c.eps[i], eps)) return i;
    return c.eps.size();
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const SweepRow& a, const SweepRow& b) {
    return std::make_tuple(method_rank(a.method), eps_rank(a.eps), a.replicate) <
           std::make_tuple(method_rank(b.method), eps_rank(b.eps), b.replicate);
  });
  write_results(rows, results_path, timings_path);
  return rows;
}

std::vector<MethodSummary> summarize(const std::vector<SweepRow>& rows) {
  std::map<Method, std::vector<const SweepRow*>> by_method;
  for (const auto& r : rows) by_method[r.method].push_back(&r);
  std::vector<MethodSummary> out;
  for (auto& [method, list] : by_method) {
    MethodSummary s;
    s.method = method;
    std::vector<double> eps_values;
    for (const SweepRow* r : list)
      if (std::none_of(eps_values.begin(), eps_values.end(),
                       [&](double e) { return same_eps(e, r->eps); }))
        eps_values.push_back(r->eps);
    std::sort(eps_values.begin(), eps_values.end(), std::greater<>());
    for (double e : eps_values) {
      std::vector<double> mse, cost;
      for (const SweepRow* r : list)
        if (same_eps(r->eps, e)) {
          mse.push_back(r->mse);
          cost.push_back(r->cost_units);
        }
      const double n = double(mse.size());
      const double mm = std::accumulate(mse.begin(), mse.end(), 0.0) / n;
      double var = 0.0;
      for (double x : mse) var += (x - mm) * (x - mm);
      s.eps.push_back(e);
      s.mean_mse.push_back(mm);
      s.mean_cost.push_back(std::accumulate(cost.begin(), cost.end(), 0.0) / n);
      s.mse_se.push_back(n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0);
      s.replicates.push_back(int(mse.size()));
    }
    if (s.eps.size() >= 3) {
      try {
        s.cost_vs_mse = fit_loglog(s.mean_mse, s.mean_cost);
      } catch (const InvalidArgument&) {
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

json summary_json(const std::vector<MethodSummary>& summary) {
  json j;
  json methods = json::object();
  const MethodSummary* smc = nullptr;
  const MethodSummary* pcn = nullptr;
  const MethodSummary* dili = nullptr;
  for (const auto& s : summary) {
    json m;
    m["eps"] = s.eps;
    m["mean_mse"] = s.mean_mse;
    m["mse_se"] = s.mse_se;
    m["mean_cost"] = s.mean_cost;
    m["replicates"] = s.replicates;
    if (s.cost_vs_mse) {
      m["cost_vs_mse_slope"] = s.cost_vs_mse->slope;
      m["cost_vs_mse_slope_se"] = s.cost_vs_mse->slope_se;
      m["cost_vs_mse_r2"] = s.cost_vs_mse->r2;
    } else {
      m["cost_vs_mse_slope"] = nullptr;
    }
    methods[to_string(s.method)] = m;
    if (s.method == Method::Smc) smc = &s;
    if (s.method == Method::MlsmcPcn) pcn = &s;
    if (s.method == Method::MlsmcDili) dili = &s;
  }
  j["methods"] = methods;
  if (smc && dili && !smc->eps.empty() && !dili->eps.empty() &&
      same_eps(smc->eps.back(), dili->eps.back()))
    j["smc_over_dili_cost_at_min_eps"] = smc->mean_cost.back() / dili->mean_cost.back();
  if (pcn && dili && pcn->eps.size() == dili->eps.size()) {
    int wins = 0;
    for (std::size_t i = 0; i < pcn->eps.size(); ++i)
      if (dili->mean_mse[i] <= pcn->mean_mse[i]) ++wins;
    j["dili_mse_le_pcn_cells"] = wins;
    j["cells"] = pcn->eps.size();
  }
  return j;
}

// ---------------------------------------------------------------------------
// synthetic cLIS study

SpikedTarget make_spiked_target(Index d, Index m, RandomStream& rng) {
  require(m >= 1 && m < d, "spiked target needs 1 <= m < d");
  Mat a(d, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < d; ++i) a(i, j) = rng.normal();
  SpikedTarget t;
  Eigen::LLT<Mat> llt(a * a.transpose() + Mat::Identity(d, d));
  t.chol_precision = llt.matrixL();
  Eigen::HouseholderQR<Mat> qr(a);
  t.basis = qr.householderQ() * Mat::Identity(d, m);
  return t;
}

Mat sample_spiked(const SpikedTarget& t, Index n, RandomStream& rng) {
  const Index d = t.chol_precision.rows();
  Mat z(d, n);
  for (Index k = 0; k < n; ++k)
    for (Index i = 0; i < d; ++i) z(i, k) = rng.normal();
  // x = L^{-T} z has covariance (LLᵀ)^{-1}
  const Mat x = t.chol_precision.transpose().triangularView<Eigen::Upper>().solve(z);
  return x.transpose();
}

std::vector<ClisDemoRow> run_clis_demo(const ClisDemoConfig& cfg, std::uint64_t seed) {
  require(!cfg.sample_sizes.empty(), "clis demo needs sample sizes");
  const Index n_max = *std::max_element(cfg.sample_sizes.begin(), cfg.sample_sizes.end());
  std::vector<std::vector<ClisDemoRow>> per_target(std::size_t(cfg.targets));
  parallel_for(cfg.targets, [&](Index k) {
    RandomStream trng = RandomStream::derive(seed, {kSpikedTarget, std::uint64_t(k)});
    const SpikedTarget target = make_spiked_target(cfg.d, cfg.m, trng);
    RandomStream srng = RandomStream::derive(seed, {kSpikedSamples, std::uint64_t(k)});
    const Mat all = sample_spiked(target, n_max, srng);
    for (Index n : cfg.sample_sizes) {
      const Mat x = all.topRows(n);
      const Mat h = Mat::Identity(cfg.d, cfg.d) - sample_covariance(x);
      Eigen::SelfAdjointEigenSolver<Mat> es(h);
      if (es.info() != Eigen::Success) throw NumericalError("clis demo: eigensolver failed");
      const Vec desc = es.eigenvalues().reverse();
      ClisDemoRow row;
      row.target = int(k);
      row.n_samples = n;
      const SpectrumDiagnostics diag = detect_dimension(desc, cfg.tol);
      row.detected_m = diag.detected_m;
      row.delta_max = diag.delta.size() ? diag.delta.maxCoeff() : 0.0;
      row.spectrum = diag.h;
      const Mat p_est = es.eigenvectors().rightCols(cfg.m);
      row.fidelity = fidelity(target.basis, p_est);
      per_target[std::size_t(k)].push_back(std::move(row));
    }
  });
  std::vector<ClisDemoRow> rows;
  for (auto& v : per_target)
    for (auto& r : v) rows.push_back(std::move(r));
  return rows;
}

// ---------------------------------------------------------------------------
// files

void write_rates_csv(const RateEstimate& rates, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << "level,h,d,n,Vhat,g_moment,rho_moment,discrepancy_moment,increment_variance,ess,cost,"
         "wall_s,mean_log_g,var_log_g,acceptance,b_m,b_perp,m,increment,work_per_particle\n";
  for (std::size_t i = 0; i < rates.levels.size(); ++i) {
    const auto& r = rates.levels[i];
    out << r.level << ',' << fmt(r.h) << ',' << r.d << ',' << r.n << ',' << fmt(r.vhat) << ','
        << fmt(r.g_moment) << ',' << fmt(r.rho_moment) << ',' << fmt(r.discrepancy_moment) << ','
        << fmt(r.increment_variance) << ',' << fmt(r.ess) << ',' << fmt(rates.unit_cost[i]) << ','
        << (i < rates.unit_wall.size() ? fmt(rates.unit_wall[i]) : std::string()) << ','
        << fmt(r.mean_log_g) << ',' << fmt(r.var_log_g) << ',' << fmt(r.acceptance) << ','
        << fmt(r.b_m) << ',' << fmt(r.b_perp) << ',' << r.m << ',' << fmt(r.increment) << ','
        << fmt(i < rates.work_per_particle.size() ? rates.work_per_particle[i] : 0.0) << '\n';
  }
}

void write_clis_csv(const std::vector<ClisDemoRow>& demo, const std::vector<ClisRecord>& runs,
                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << "source,level,target,n_samples,m,fidelity,delta_max,spectrum\n";
  auto spectrum = [](const Vec& h) {
    std::string s;
    for (Index i = 0; i < std::min<Index>(h.size(), 40); ++i) s += (i ? ";" : "") + fmt(h[i]);
    return s;
  };
  for (const auto& r : demo)
    out << "demo,0," << r.target << ',' << r.n_samples << ','
        << (r.detected_m ? std::to_string(*r.detected_m) : std::string()) << ','
        << fmt(r.fidelity) << ',' << fmt(r.delta_max) << ',' << spectrum(r.spectrum) << '\n';
  for (const auto& r : runs) {
    const auto& d = r.diagnostics;
    out << "run," << r.level << ",," << r.n << ',' << r.m << ",,"
        << (d.delta.size() ? fmt(d.delta.maxCoeff()) : std::string()) << ','
        << spectrum(d.h) << '\n';
  }
}

void write_meta(const ExperimentConfig& cfg, const std::string& command,
                const std::vector<std::string>& warnings, const std::string& path,
                const json& extra) {
  json j;
  j["command"] = command;
  j["config"] = config_to_json(cfg);
  j["seed"] = cfg.seed;
  j["git_revision"] = git_revision();
  j["warnings"] = warnings;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::string git_revision() { return MLSMC_GIT_REVISION; }

}  // namespace mlsmc
