#pragma once
/// Covariance-based likelihood-informed subspace (cLIS) estimation.
///
/// Everything here works in whitened coordinates, where the prior is N(0, I)
/// and the posterior covariance is modelled as C = I - QQᵀ.

#include "mlsmc/core.hpp"
#include "mlsmc/hierarchy.hpp"

#include <optional>
#include <vector>

namespace mlsmc {

/// Symmetric operator known only through its action.
struct SymmetricOperator {
  Index dim = 0;
  std::function<Vec(const Vec&)> apply;
};

SymmetricOperator dense_operator(const Mat& a);

/// Unweighted sample covariance of the rows of x (divisor N-1).
Mat sample_covariance(const Mat& x);

/// Weighted covariance with normalized weights w; divisor 1 - Σw² so uniform
/// weights reproduce sample_covariance.
Mat weighted_covariance(const Mat& x, const Vec& w);
Vec weighted_mean(const Mat& x, const Vec& w);

/// H_N = I - sample covariance, dense.
Mat sample_correction(const Mat& whitened_particles);

/// H_N as a matrix-free operator (keeps a centered copy of the particles).
SymmetricOperator sample_correction_operator(const Mat& whitened_particles);

struct LanczosOptions {
  Index max_steps = 0;  ///< 0: 20·m
  double tol = 1e-6;
  std::uint64_t seed = 0x5eedULL;
};

struct EigenPairs {
  Mat vectors;  ///< d × m, orthonormal
  Vec values;   ///< descending
  Index steps = 0;
};

/// Largest m eigenpairs by Lanczos with full reorthogonalization.
EigenPairs dominant_eigenpairs(const SymmetricOperator& h, Index m,
                               const LanczosOptions& options = {});
EigenPairs dominant_eigenpairs(const Mat& h, Index m, const LanczosOptions& options = {});

struct SpectrumDiagnostics {
  Vec h;      ///< clipped spectrum, descending
  Vec delta;  ///< normalized increments, length d-1
  std::optional<Index> detected_m;
  double tol = 10.0;
};

/// Eigen-gap detection: first i with h_i > 0 whose increment |h_{i+1} - h_i|,
/// divided by the mean increment, exceeds tol. `h_desc` may be the leading part
/// of a longer spectrum of length `full_dim` whose smallest value is `h_min`.
SpectrumDiagnostics detect_dimension(const Vec& h_desc, double tol);
SpectrumDiagnostics detect_dimension(const Vec& h_desc, double tol, Index full_dim, double h_min);

/// ‖P Pᵀ (I - Q Qᵀ)‖_F for orthonormal P (exact) and Q (estimate).
double fidelity(const Mat& p_exact, const Mat& p_est);

// ---------------------------------------------------------------------------
// multilevel covariance

struct MlCovariance {
  std::vector<Mat> per_level_terms;  ///< level 0: C_0, then C_l - T C_{l-1} Tᵀ
  Mat total;
  Vec mean;
  int level = -1;
};

/// Level-0 start: plain (weighted) covariance of the particles.
MlCovariance ml_covariance_init(const Mat& particles, const Vec& weights);

/// Adds the level-l increment: weighted fine covariance minus the coarse sample
/// covariance upscaled by the whitened transport T (d_l × d_{l-1}). The running
/// total is carried up by the same linear upscaling.
MlCovariance ml_covariance_update(MlCovariance acc, const Mat& fine_particles,
                                  const Mat& coarse_slice, const Mat& transport,
                                  const Vec& fine_weights);

struct MPolicy {
  enum class Kind { Fixed, Auto };
  Kind kind = Kind::Auto;
  Index m = 0;        ///< Fixed
  double tol = 10.0;  ///< Auto
  Index m_max = 20;   ///< Auto fallback
  static MPolicy fixed(Index m) { return {Kind::Fixed, m, 10.0, m}; }
  static MPolicy automatic(double tol = 10.0, Index m_max = 20) {
    return {Kind::Auto, 0, tol, m_max};
  }
};

struct ClisOptions {
  Index dense_cap = 4096;  ///< above: matrix-free H and a partial spectrum
  LanczosOptions lanczos;
};

struct ClisBasis {
  Mat P;         ///< d × m orthonormal
  Vec eigvals;   ///< eigenvalues of H on the subspace, in [0, 1)
  Mat sigma;     ///< on-subspace covariance, eigenvalues in [0, 1]
  Vec mean;      ///< on-subspace mean coefficients (ū = P·mean)
  Index m = 0;
  int level = 0;
  SpectrumDiagnostics diagnostics;

  Index dim() const { return P.rows(); }
};

/// Eigendecomposes H = I - C, picks m, clamps, sets Σ = Pᵀ C P and the mean.
ClisBasis build_basis(const Mat& covariance, const Vec& mean, const MPolicy& policy, int level,
                      const ClisOptions& options = {});
ClisBasis build_basis(const MlCovariance& ml, const MPolicy& policy, int level,
                      const ClisOptions& options = {});

/// Replaces Σ by a clamped symmetric version of `sigma_raw`.
Mat clamp_subspace_covariance(const Mat& sigma_raw);

/// Carries a basis to a finer level by the whitened transport; Σ and the mean
/// coefficients are unchanged (the transport is an isometry).
ClisBasis transport_clis(const GaussianHierarchy& hier, const ClisBasis& basis, int level_dst);

/// On-subspace multilevel sums after the cutoff level: costs O(N m²) per level.
class SubspaceCovariance {
 public:
  SubspaceCovariance() = default;
  SubspaceCovariance(Mat sigma_raw, Vec mean) : total_(std::move(sigma_raw)), mean_(std::move(mean)) {}

  /// fine_proj = V_l P_l (weighted), coarse_proj = V_{l-1} P_{l-1} (unweighted).
  void update(const Mat& fine_proj, const Mat& coarse_proj, const Vec& fine_weights);

  const Mat& total() const { return total_; }
  const Vec& mean() const { return mean_; }

 private:
  Mat total_;
  Vec mean_;
};

}  // namespace mlsmc
