#pragma once
/// Prior-reversible Metropolis–Hastings mutation kernels in whitened coordinates:
/// pCN and the cLIS-informed DILI proposal u' = ū + A(u-ū) + Bw.

#include "mlsmc/clis.hpp"
#include "mlsmc/core.hpp"

#include <functional>
#include <vector>

namespace mlsmc {

struct AdaptConfig {
  bool enabled = true;
  double target = 0.3;
  double burn_in_fraction = 0.5;  ///< of the mutation steps in a stage
  bool tune_perp = true;          ///< false: only b_m adapts (keeps b_perp matched across kernels)
};

struct DiliParams {
  double b_m = 0.5;
  double b_perp = 0.1;
  int n_steps = 5;
  AdaptConfig adapt;
};

void validate(const DiliParams& params);

/// A = P(I - b_mΣ)^{1/2}Pᵀ + √(1-b_⊥²)(I - PPᵀ),  B = P(b_mΣ)^{1/2}Pᵀ + b_⊥(I - PPᵀ).
class ProposalOperators {
 public:
  /// Empty basis: plain pCN with step b_perp.
  ProposalOperators(Index dim, double b_perp);
  /// `mean_shift` is ū in whitened coordinates (empty = 0).
  ProposalOperators(const Mat& p, const Mat& sigma, double b_m, double b_perp,
                    Vec mean_shift = Vec());
  ProposalOperators(const ClisBasis& basis, const DiliParams& params, bool use_mean = false);

  /// Variant preserving N(0, PΣPᵀ + I - PPᵀ) instead of the prior:
  /// A = √(1-b_m) PPᵀ + √(1-b_⊥²)(I - PPᵀ), B = P(b_mΣ)^{1/2}Pᵀ + b_⊥(I - PPᵀ).
  /// Not geometrically ergodic in general; off by default, kept for comparison.
  /// Σ must be positive definite; log_correction carries the density ratio.
  static ProposalOperators posterior_preserving(const Mat& p, const Mat& sigma, double b_m,
                                                double b_perp);

  Index dim() const { return dim_; }
  Index rank() const { return p_.cols(); }

  Vec apply_a(const Vec& x) const;
  Vec apply_b(const Vec& x) const;
  const Vec& mean_shift() const { return mean_; }

  /// Log-ratio correction ⟨ū, u - u'⟩: for ū ≠ 0 the proposal is reversible
  /// with respect to N(ū, I) instead of the whitened prior N(0, I). For the
  /// posterior-preserving variant, the N(0,I) / N(0,Σ) ratio on the subspace.
  double log_correction(const Vec& current, const Vec& proposed) const;

  Mat dense_a() const;
  Mat dense_b() const;

 private:
  Index dim_;
  double c_perp_, b_perp_;
  Mat p_;      ///< d × m
  Mat a_sub_;  ///< (I - b_mΣ)^{1/2}
  Mat b_sub_;  ///< (b_mΣ)^{1/2}
  Vec mean_;
  Mat sigma_inv_;  ///< posterior-preserving variant only
};

/// u' = ū + A(u - ū) + Bw with w ~ N(0, I).
Vec dili_propose(const ProposalOperators& ops, const Vec& u, NormalSource& noise);

using LogLikelihood = std::function<double(const Vec&)>;

/// Accept/reject for a prior-reversible proposal: log α = ℓ(u') - ℓ(u) + correction.
/// Always consumes exactly one uniform; a non-finite proposal log-likelihood
/// (outside S_R) is rejected.
bool metropolis_accept(double log_alpha, double loglike_proposal, RandomStream& rng);

struct MhOutcome {
  Vec state;
  double loglike = 0.0;
  bool accepted = false;
};

/// One MH step; loglike_u must be model_loglike(u) and finite.
MhOutcome mh_step(const LogLikelihood& model_loglike, const ProposalOperators& ops, const Vec& u,
                  double loglike_u, RandomStream& rng);

struct ChainResult {
  Vec state;
  double loglike = 0.0;
  int accepted = 0;
  int steps = 0;
};

/// params.n_steps MH steps with fixed operators.
ChainResult mh_chain(const LogLikelihood& model_loglike, const ProposalOperators& ops,
                     const DiliParams& params, const Vec& u, double loglike_u, RandomStream& rng);

/// Robbins–Monro on the log-odds of both step sizes toward the target rate with
/// learning rate 1/(10+t), t counting proposals since the start of the stage.
class StepSizeAdapter {
 public:
  explicit StepSizeAdapter(AdaptConfig config = {}) : config_(config) {}

  /// New SMC stage: the learning rate restarts.
  void start_stage() { t_ = 0; }

  /// history: acceptance flags in proposal order, one update per flag.
  DiliParams update(const std::vector<bool>& history, const DiliParams& params);
  /// Population form: `n` proposals with acceptance rate `rate`, i.e. the per-flag
  /// updates with the flags' order averaged out (depends only on the counts).
  DiliParams update(double rate, Index n, const DiliParams& params);

  long iteration() const { return t_; }
  const AdaptConfig& config() const { return config_; }

 private:
  AdaptConfig config_;
  long t_ = 0;
};

/// Stateless form: one update at iteration t.
DiliParams adapt_step_sizes(const std::vector<bool>& history, const DiliParams& params, long t);

}  // namespace mlsmc
