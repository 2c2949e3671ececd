#pragma once
/// The MLSMC engine: weighted particle populations per level, resampling, the
/// level transition (resample → mutate → extend → reweight) and the multilevel
/// estimators.

#include "mlsmc/clis.hpp"
#include "mlsmc/core.hpp"
#include "mlsmc/kernels.hpp"
#include "mlsmc/models.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace mlsmc {

enum class ResampleScheme { Multinomial, Systematic };

/// Indices drawn with probability w_i / Σw.
std::vector<Index> resample(const Vec& weights, Index n_out, ResampleScheme scheme,
                            RandomStream& rng);

/// (Σw)² / Σw².
double ess(const Vec& weights);

/// Normalized weights exp(log_w - max) / Σ, robust to -inf entries.
Vec normalized_weights(const Vec& log_w);

struct ParticleSystem {
  int level = 0;
  std::vector<Vec> particles;   ///< whitened coordinates of level `level`
  Vec loglike;                  ///< log L_l
  Vec log_g;                    ///< log G_l (0 at level 0)
  std::vector<Vec> rho_fine;    ///< ρ_l
  std::vector<Vec> rho_coarse;  ///< ρ_{l-1}; empty at level 0
  std::vector<Vec> coarse;      ///< whitened level-(l-1) states; empty at level 0
  Vec discrepancy;              ///< optional model discrepancies (empty if untracked)
  double cost = 0.0;            ///< work units spent building this system

  Index size() const { return Index(particles.size()); }
  Vec weights() const { return normalized_weights(log_g); }
  Mat particle_matrix() const;
  Mat coarse_matrix() const;
};

/// Current mutation kernel: a cLIS basis (m = 0 gives pCN) plus step sizes.
struct KernelState {
  ClisBasis basis;
  DiliParams params;
  bool use_mean = false;

  ProposalOperators operators() const;
};

struct MutationReport {
  double acceptance = 0.0;
  std::vector<double> acceptance_per_step;
  DiliParams final_params;
  int tempering_stages = 0;
};

using RefreshHook = std::function<void(const ParticleSystem&, KernelState&, int step)>;

/// n_steps MH sweeps of every particle of `pop` targeting η̂_{pop.level}.
/// Step sizes adapt (population acceptance) during the burn-in fraction; the
/// optional hook may rebuild the basis after each burn-in step.
/// `temperature` τ targets prior × L^τ (level-0 tempering only).
MutationReport mutate(ParticleSystem& pop, const ForwardModel& model, KernelState& kernel,
                      StepSizeAdapter* adapter, int n_steps, std::uint64_t seed,
                      std::uint64_t stage, const RefreshHook& refresh = nullptr,
                      double temperature = 1.0);

struct InitOptions {
  int steps = 50;                 ///< J0
  int max_prior_tries = 1000;     ///< rejection sampling into S_R
  bool tempering = true;          ///< bridge prior → η̂_0 by likelihood tempering first
  double tempering_ess = 0.5;     ///< ESS fraction kept per tempering stage
  int tempering_steps = 0;        ///< MH sweeps per tempering stage (0: kernel n_steps)
  int max_tempering_stages = 500;
};

/// Restricted-prior draws, optional adaptive tempering of L_0 (resample +
/// tempering_steps MH moves per stage, refresh hook after each stage), then J0 level-0 MH steps;
/// G_0 ≡ 1. The report covers the final J0 steps.
ParticleSystem init_level0(const ForwardModel& model, Index n0, KernelState& kernel,
                           StepSizeAdapter* adapter, const InitOptions& options,
                           std::uint64_t seed, const RefreshHook& refresh = nullptr,
                           MutationReport* report = nullptr);

struct AdvanceOptions {
  ResampleScheme scheme = ResampleScheme::Multinomial;
  bool track_discrepancy = false;
};

/// Φ_l: resample by G_{l-1}, mutate with K_{l-1}, extend by q_l, weight by
/// G_l = L_l / L_{l-1}.
ParticleSystem advance_level(const ParticleSystem& prev, const ForwardModel& model,
                             KernelState& kernel, StepSizeAdapter* adapter, Index n_out,
                             std::uint64_t seed, const AdvanceOptions& options = {},
                             MutationReport* report = nullptr);

// ---------------------------------------------------------------------------
// estimators

using Functional = std::function<double(const Vec& rho)>;

/// φ(ρ) = ρ_0.
Functional first_observable();

struct LevelTerm {
  double fine = 0.0;      ///< η(G φ∘ρ_l) / η(G)
  double coarse = 0.0;    ///< η(φ∘ρ_{l-1}); 0 at level 0
  double value = 0.0;     ///< fine - coarse
  double variance = 0.0;  ///< per-sample variance of the linearized increment
  double log_normalizer = 0.0;  ///< log η(G_l)
  double ess = 0.0;
};

LevelTerm level_term(const ParticleSystem& sys, const Functional& phi);

struct MlEstimate {
  double value = 0.0;
  double log_value = 0.0;  ///< normalizer mode: log of value
  std::vector<double> increments;
  std::vector<double> ess_per_level;
  std::vector<double> cost_ledger;
};

MlEstimate ml_expectation(const std::vector<ParticleSystem>& systems, const Functional& phi);
MlEstimate ml_normalizer(const std::vector<ParticleSystem>& systems);

// ---------------------------------------------------------------------------
// full runs

enum class KernelKind { Pcn, Dili };

struct SamplerOptions {
  KernelKind kernel = KernelKind::Dili;
  DiliParams params;
  InitOptions init;
  int level0_refreshes = 4;  ///< cLIS rebuilds during level-0 burn-in (DILI)
  MPolicy m_policy = MPolicy::automatic();
  int cutoff_level = -1;     ///< ℓ*; -1: largest l with N_k > d_k for all k ≤ l
  bool use_mean_shift = false;
  bool telescoping = true;   ///< false: single-level SMC estimate at the finest level
  AdvanceOptions advance;
  ClisOptions clis;
};

struct LevelRecord {
  int level = 0;
  Index n = 0;
  Index d = 0;
  double h = 0.0;
  double ess = 0.0;
  double mean_log_g = 0.0;
  double var_log_g = 0.0;
  double increment = 0.0;
  double increment_variance = 0.0;
  double log_normalizer = 0.0;
  double cost = 0.0;
  double cumulative_cost = 0.0;
  double acceptance = 0.0;  ///< of the kernel that mutated this level's parents
  double b_m = 0.0, b_perp = 0.0;
  Index m = 0;              ///< cLIS dimension used by K_l
  double g_moment = 0.0;    ///< mean (G_l/Ḡ_l - 1)², relative weight variance
  double rho_moment = 0.0;  ///< mean |ρ_l - ρ_{l-1}|²
  double discrepancy_moment = 0.0;
  double vhat = 0.0;
  double g_min = 0.0, g_max = 0.0;
  double wall_s = 0.0;      ///< wall-clock spent building this level (not reproducible)
};

struct ClisRecord {
  int level = 0;
  Index n = 0;
  Index m = 0;
  bool transported = false;
  SpectrumDiagnostics diagnostics;
};

struct RunResult {
  double estimate = 0.0;
  MlEstimate expectation;
  MlEstimate normalizer;
  double total_cost = 0.0;
  int cutoff_level = -1;
  std::vector<LevelRecord> levels;
  std::vector<ClisRecord> clis;
  int tempering_stages = 0;
};

/// ℓ* rule: largest l with n[k] > d_k for every k ≤ l (-1 if none).
int default_cutoff(const GaussianHierarchy& hier, const std::vector<Index>& n_per_level);

/// One MLSMC (or SMC) run over levels 0..n_per_level.size()-1.
RunResult run_mlsmc(const ForwardModel& model, const std::vector<Index>& n_per_level,
                    const SamplerOptions& options, std::uint64_t seed,
                    const Functional& phi = first_observable());

}  // namespace mlsmc
