#pragma once
/// Nested Gaussian priors N(0, Γ_{0:l}) over a hierarchy of growing state spaces.
///
/// States are stored in "stacked" order: the first d_{l-1} coordinates of a
/// level-l state are the level-(l-1) state, the d'_l new coordinates follow.
/// Grid hierarchies map to geometric (grid) order internally.

#include "mlsmc/core.hpp"

#include <memory>
#include <vector>

namespace mlsmc {

enum class HierarchyMode { GridConditional, KarhunenLoeve };

struct LevelLayout {
  int level = 0;
  Index d_total = 0;
  Index d_new = 0;
  double h = 1.0;  ///< dimensionless resolution, halves per level on grids
  int spatial_dim = 1;
};

class GaussianHierarchy {
 public:
  virtual ~GaussianHierarchy() = default;

  virtual HierarchyMode mode() const = 0;

  int num_levels() const { return static_cast<int>(layouts_.size()); }
  int finest_level() const { return num_levels() - 1; }
  const LevelLayout& layout(int level) const;
  Index dim(int level) const { return layout(level).d_total; }

  /// A_{l|l-1} u_c: conditional-mean embedding; first d_{l-1} entries are u_c.
  virtual Vec lift(int level, const Vec& coarse) const = 0;

  /// Draws (u_c, u_new) with u_new ~ q_l(u_c, .).
  virtual Vec extend(int level, const Vec& coarse, NormalSource& noise) const = 0;

  /// L_l^{-1} u and L_l v.
  virtual Vec whiten(int level, const Vec& u) const = 0;
  virtual Vec unwhiten(int level, const Vec& v) const = 0;

  /// Whitened transport T_l = L_l^{-1} A_{l|l-1} L_{l-1} applied to a vector.
  virtual Vec transport(int level, const Vec& v_coarse) const;

  /// Dense Γ_{0:l}; only for moderate d (throws above the dense cap).
  virtual Mat covariance(int level) const = 0;

  /// Dense conditional covariance Γ_l of the new block given the coarse state.
  virtual Mat conditional_covariance(int level) const;

  /// Prior marginal standard deviations at level l (stacked order).
  virtual Vec marginal_std(int level) const;

  Vec sample_prior(int level, NormalSource& noise) const;

  Index dense_cap() const { return dense_cap_; }
  void set_dense_cap(Index cap) { dense_cap_ = cap; }

 protected:
  void check_level(int level, int min_level = 0) const;
  void check_dense(int level) const;

  std::vector<LevelLayout> layouts_;
  Index dense_cap_ = 16384;
};

// ---------------------------------------------------------------------------

/// Karhunen–Loeve mode: Γ diagonal with eigenvalues λ_i; extension is independent
/// of the coarse state and the transport zero-pads.
class KarhunenLoeveHierarchy final : public GaussianHierarchy {
 public:
  /// `level_dims` strictly increasing; `eigenvalues` has at least level_dims.back() entries.
  KarhunenLoeveHierarchy(Vec eigenvalues, std::vector<Index> level_dims, int spatial_dim = 1);

  /// λ_i = scale · i^{-decay}, d_l = d0 · 2^{l·D}.
  static std::shared_ptr<KarhunenLoeveHierarchy> power_law(double decay, Index d0, int levels,
                                                           int spatial_dim = 1,
                                                           double scale = 1.0);

  HierarchyMode mode() const override { return HierarchyMode::KarhunenLoeve; }
  Vec lift(int level, const Vec& coarse) const override;
  Vec extend(int level, const Vec& coarse, NormalSource& noise) const override;
  Vec whiten(int level, const Vec& u) const override;
  Vec unwhiten(int level, const Vec& v) const override;
  Vec transport(int level, const Vec& v_coarse) const override;
  Mat covariance(int level) const override;
  Mat conditional_covariance(int level) const override;
  Vec marginal_std(int level) const override;

  const Vec& eigenvalues() const { return lambda_; }

 private:
  Vec lambda_;
};

// ---------------------------------------------------------------------------

/// Brownian motion on [0, T] observed at t = k·T/d_l, k = 1..d_l (u(0) = 0).
/// Each level bisects every interval; new points follow the Brownian bridge.
class BrownianHierarchy final : public GaussianHierarchy {
 public:
  BrownianHierarchy(double horizon, Index d0, int levels);

  HierarchyMode mode() const override { return HierarchyMode::GridConditional; }
  Vec lift(int level, const Vec& coarse) const override;
  Vec extend(int level, const Vec& coarse, NormalSource& noise) const override;
  Vec whiten(int level, const Vec& u) const override;
  Vec unwhiten(int level, const Vec& v) const override;
  Vec transport(int level, const Vec& v_coarse) const override;
  Mat covariance(int level) const override;
  Mat conditional_covariance(int level) const override;
  Vec marginal_std(int level) const override;

  double horizon() const { return horizon_; }
  /// Physical grid spacing T/d_l.
  double spacing(int level) const;
  /// Path values in time order (t = h, 2h, ..., T) from a stacked state.
  Vec grid_path(int level, const Vec& u) const;
  /// Inverse of grid_path.
  Vec stacked_from_path(int level, const Vec& path) const;
  /// Time-order index of each stacked coordinate.
  const std::vector<Index>& grid_index(int level) const { return perm_[level]; }

 private:
  double horizon_;
  std::vector<std::vector<Index>> perm_;
};

// ---------------------------------------------------------------------------

/// Gaussian field on the (K+1)^2 nodes of [0,1]^2, K = K0·2^l, with covariance
/// σ² exp(-|x-x'|²/α). The kernel separates, so Γ = σ² S⊗S with S the 1D
/// kernel matrix plus a small nugget chosen once on the finest grid.
class GridHierarchy2D final : public GaussianHierarchy {
 public:
  GridHierarchy2D(Index k0, int levels, double sigma2 = 1.0, double alpha = 1.0);

  HierarchyMode mode() const override { return HierarchyMode::GridConditional; }
  Vec lift(int level, const Vec& coarse) const override;
  Vec extend(int level, const Vec& coarse, NormalSource& noise) const override;
  Vec whiten(int level, const Vec& u) const override;
  Vec unwhiten(int level, const Vec& v) const override;
  Vec transport(int level, const Vec& v_coarse) const override;
  Mat covariance(int level) const override;
  Vec marginal_std(int level) const override;

  Index cells(int level) const { return k0_ << level; }
  double nugget() const { return nugget_; }

  /// Nodal values as a (K+1)×(K+1) matrix, entry (i, j) at x = (i/K, j/K).
  Mat grid_values(int level, const Vec& u) const;
  Vec stacked_from_grid(int level, const Mat& grid) const;

 private:
  Mat kernel_1d(Index nodes) const;

  Index k0_;
  double sigma_;
  double alpha_;
  double nugget_ = 0.0;
  std::vector<Mat> chol_;       ///< L1 per level, S_l = L1 L1ᵀ
  std::vector<Mat> lift_1d_;    ///< B_l = S_{fc} S_{cc}^{-1}
  std::vector<Mat> transport_1d_;  ///< L1_f^{-1} B_l L1_c
  std::vector<std::vector<Index>> perm_;  ///< stacked -> row-major grid index
};

// ---------------------------------------------------------------------------
// free operations

/// (u_c, u_new) with u_new ~ q_l(u_c, .); validates dimensions.
Vec extend_sample(const GaussianHierarchy& hier, int level, const Vec& u_coarse,
                  NormalSource& noise);

/// log q_l(u_c, u_new).
double extension_log_density(const GaussianHierarchy& hier, int level, const Vec& u_coarse,
                             const Vec& u_new);

/// L_dst^{-1} A_{dst|src} L_src P_src.
Mat transport_basis(const GaussianHierarchy& hier, const Mat& p_src, int level_src,
                    int level_dst);

/// Dense A_{l|l-1} (d_l × d_{l-1}).
Mat lift_matrix(const GaussianHierarchy& hier, int level);

/// Dense A_{l\l-1} (d_l × d'_l): zero on the coarse block, chol(Γ_l) below.
Mat noise_matrix(const GaussianHierarchy& hier, int level);

/// Dense whitened transport T_l (d_l × d_{l-1}).
Mat transport_matrix(const GaussianHierarchy& hier, int level);

/// Cholesky with the jitter ladder 0, 1e-12·tr/d, ×10 ... 1e-6·tr/d. Returns the
/// lower factor and the jitter used. Factors whose smallest pivot falls below
/// `min_pivot_ratio` × the largest are treated as failures.
struct JitteredCholesky {
  Mat lower;
  double jitter = 0.0;
};
JitteredCholesky jittered_cholesky(const Mat& a, double min_pivot_ratio = 0.0);

}  // namespace mlsmc
