#pragma once
/// Experiment runner: configuration, data generation, sample-size schedules,
/// variance-rate pilots, cost-vs-error sweeps, the synthetic cLIS study and the
/// CSV / JSON outputs consumed by the plotting scripts.

#include "mlsmc/clis.hpp"
#include "mlsmc/hierarchy.hpp"
#include "mlsmc/models.hpp"
#include "mlsmc/smc.hpp"

#include <json.hpp>

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mlsmc {

enum class ModelKind { Diffusion, Elliptic };
enum class Method { Smc, MlsmcPcn, MlsmcDili };

std::string to_string(ModelKind kind);
std::string to_string(Method method);
Method parse_method(const std::string& name);
ModelKind parse_model(const std::string& name);

struct KernelSettings {
  double b_m = 0.5;
  double b_perp = 0.1;
  int n_steps = 5;
  bool adapt = true;
  double target = 0.3;
  double burn_in_fraction = 0.5;
  bool tune_perp = true;
  int level0_steps = 50;
  int level0_refreshes = 4;
  bool level0_tempering = true;
  double tempering_ess = 0.5;
  int tempering_steps = 0;  ///< 0: n_steps
  std::string m_policy = "auto";  ///< "auto" | "fixed"
  Index m = 0;                    ///< fixed m
  double tol = 10.0;
  Index m_max = 20;
  bool use_mean_shift = false;
  std::string resample = "multinomial";
  bool track_discrepancy = true;
};

struct ScheduleConfig {
  double beta = 1.0;
  double zeta = 1.0;
  std::optional<double> zeta_clis;  ///< cost exponent for levels ≤ ℓ* (default: zeta)
  Index n_floor = 50;
  double c0 = 1.0;   ///< variance of the level-0 term
  double cv = 1.0;   ///< V_l = cv·(h_l/h_0)^β for l ≥ 1
  double smc_c = 1.0;  ///< single-level SMC: N = ⌈smc_c·ε⁻²⌉ at every level
  /// Work per particle in solves of its own level: a level-0 particle pays for
  /// tempering and burn-in, a level-ℓ particle for n_steps moves at ℓ-1 plus one
  /// solve. Both only rescale C_ℓ in the allocation.
  double level0_work = 1.0;
  double step_work = 1.0;
  int cutoff = -1;   ///< ℓ* (-1: derived from the schedule)
};

struct PilotConfig {
  Index n = 500;
  int levels = 4;
};

struct ReferenceConfig {
  int extra_levels = 1;
  double budget_factor = 4.0;  ///< ε_ref = ε_min / √budget_factor
  int runs = 1;                ///< independent runs averaged into the reference
  std::string method = "mlsmc-pcn";
};

struct ClisDemoConfig {
  Index d = 100;
  Index m = 10;
  int targets = 20;
  std::vector<Index> sample_sizes{100, 150, 200, 250, 400};
  double tol = 10.0;
};

struct ExperimentConfig {
  ModelKind model = ModelKind::Diffusion;
  DiffusionConfig diffusion;
  EllipticConfig elliptic;
  int levels = 4;  ///< L_max of the sweep
  std::vector<double> eps{0.08, 0.04, 0.02, 0.01};
  int replicates = 20;
  std::uint64_t seed = 1;
  unsigned workers = 0;
  std::vector<Method> methods{Method::Smc, Method::MlsmcPcn, Method::MlsmcDili};
  KernelSettings kernel;
  ScheduleConfig schedule;
  PilotConfig pilot;
  ReferenceConfig reference;
  ClisDemoConfig clis_demo;
  std::string data_path;             ///< optional observation file
  std::uint64_t data_seed = 20240;
  int data_level = -1;               ///< -1: one above the finest level ever solved
  std::string out_dir = "out";
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);
/// Structural checks (ε-grid decreasing, positive sizes, ...).
void validate(const ExperimentConfig& cfg);

/// Finest level any command of this config solves on.
int finest_solve_level(const ExperimentConfig& cfg);
int data_level(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// problems

struct Problem {
  std::shared_ptr<const GaussianHierarchy> hierarchy;
  std::shared_ptr<const ForwardModel> model;
  ObservationData data;
};

/// Synthetic observations from a prior draw solved at `level`.
ObservationData generate_data(const ExperimentConfig& cfg, int level, std::uint64_t seed);

/// Hierarchy with levels 0..num_levels-1 and the model bound to `data`.
Problem build_problem(const ExperimentConfig& cfg, const ObservationData& data, int num_levels);

/// Loads cfg.data_path if set, otherwise generates data at data_level(cfg).
Problem make_problem(const ExperimentConfig& cfg);

SamplerOptions sampler_options(const ExperimentConfig& cfg, Method method);

// ---------------------------------------------------------------------------
// schedules and rates

/// N_l = max(N_floor, ⌈ε⁻² √(V_l/C_l) Σ_k √(V_k C_k)⌉), V_0 = c0, V_l = cv·r_l^β,
/// C_0 = level0_work, C_l = step_work·r_l^{-ζ_l} with r_l = h_l/h_0; clamped
/// nonincreasing in l.
std::vector<Index> sample_schedule(double eps, const ScheduleConfig& sched,
                                   const std::vector<double>& h, std::vector<std::string>* warnings = nullptr);

/// Sum of N_l·C_l in the schedule's own cost units.
double scheduled_cost(const std::vector<Index>& n, const ScheduleConfig& sched,
                      const std::vector<double>& h);

/// Level of the sweep at ε: L_max - round(log2(ε/ε_min)), at least 0.
int sweep_level(const ExperimentConfig& cfg, double eps);

struct LogLogFit {
  double slope = 0.0;
  double slope_se = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  Index points = 0;
};

/// OLS of log y on log x; refuses fewer than 3 points or nonpositive data.
LogLogFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

struct RateEstimate {
  LogLogFit beta;  ///< log V̂_l vs log h_l (l ≥ 1)
  LogLogFit zeta;  ///< -(log C_l vs log h_l), work units
  std::optional<LogLogFit> zeta_wall;  ///< same on wall-clock per solve
  std::vector<LevelRecord> levels;
  std::vector<double> unit_cost;
  std::vector<double> unit_wall;
  /// Ledger work per particle in solves of its own level; [0] and the mean
  /// over l ≥ 1 are the schedule's level0_work and step_work.
  std::vector<double> work_per_particle;
  double level0_work = 1.0, step_work = 1.0;
  std::vector<ClisRecord> clis;  ///< pilot run with the DILI kernel only
  int tempering_stages = 0;
};

/// β̂ from per-level records (levels ≥ 1), ζ̂ from the per-solve work units
/// C_l and, when given, measured per-solve wall-clock.
RateEstimate estimate_rates(const std::vector<LevelRecord>& levels,
                            const std::vector<double>& unit_cost,
                            const std::vector<double>& unit_wall = {});

/// Pilot MLSMC run with N_pilot particles per level up to pilot.levels.
RateEstimate run_pilot(const ExperimentConfig& cfg, const Problem& problem, Method method);

// ---------------------------------------------------------------------------
// sweeps

struct SweepRow {
  Method method = Method::MlsmcPcn;
  double eps = 0.0;
  int level = 0;
  int replicate = 0;
  double estimate = 0.0;
  double mse = 0.0;
  double cost_units = 0.0;
  double wall_s = 0.0;
};

struct Reference {
  double value = 0.0;
  double eps = 0.0;
  int level = 0;
  double cost_units = 0.0;
  std::vector<double> runs;
};

/// Cached in <out>/reference.json keyed by the config; recomputed when absent.
Reference reference_estimate(const ExperimentConfig& cfg, const Problem& problem,
                             const std::string& out_dir);

/// Runs every missing (method, ε, replicate) cell, appending as it goes, and
/// finally rewrites results.csv / timings.csv in canonical order.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, const std::string& out_dir);

/// Seed of one sweep cell; disjoint from the reference seeds.
std::uint64_t cell_seed(std::uint64_t seed, Method method, std::size_t eps_index, int replicate);

std::vector<SweepRow> read_results(const std::string& path);
void write_results(const std::vector<SweepRow>& rows, const std::string& results_path,
                   const std::string& timings_path);

struct MethodSummary {
  Method method = Method::MlsmcPcn;
  std::vector<double> eps, mean_mse, mean_cost, mse_se;
  std::vector<int> replicates;
  std::optional<LogLogFit> cost_vs_mse;  ///< log cost vs log MSE over ε cells
};

std::vector<MethodSummary> summarize(const std::vector<SweepRow>& rows);
nlohmann::json summary_json(const std::vector<MethodSummary>& summary);

// ---------------------------------------------------------------------------
// synthetic cLIS study

struct SpikedTarget {
  Mat chol_precision;  ///< lower L with LLᵀ = AAᵀ + I
  Mat basis;           ///< exact cLIS (orthonormal d × m)
};

/// A ~ N(0,1)^{d×m}, C = (AAᵀ + I)^{-1}.
SpikedTarget make_spiked_target(Index d, Index m, RandomStream& rng);
/// n i.i.d. rows from N(0, C).
Mat sample_spiked(const SpikedTarget& target, Index n, RandomStream& rng);

struct ClisDemoRow {
  int target = 0;
  Index n_samples = 0;
  std::optional<Index> detected_m;
  double fidelity = 0.0;  ///< with the known m
  double delta_max = 0.0;
  Vec spectrum;           ///< clipped eigenvalues of H_N, descending
};

std::vector<ClisDemoRow> run_clis_demo(const ClisDemoConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// files

void write_rates_csv(const RateEstimate& rates, const std::string& path);
void write_clis_csv(const std::vector<ClisDemoRow>& demo, const std::vector<ClisRecord>& runs,
                    const std::string& path);
/// Config echo plus seed, git revision and collected warnings.
void write_meta(const ExperimentConfig& cfg, const std::string& command,
                const std::vector<std::string>& warnings, const std::string& path,
                const nlohmann::json& extra = nlohmann::json::object());

std::string git_revision();

}  // namespace mlsmc
