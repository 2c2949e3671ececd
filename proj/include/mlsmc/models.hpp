#pragma once
/// Forward models with Gaussian likelihoods on the restricted prior S_R:
/// a scalar conditioned diffusion and a 2D elliptic PDE (bilinear FEM).

#include "mlsmc/core.hpp"
#include "mlsmc/hierarchy.hpp"

#include <Eigen/Sparse>

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mlsmc {

struct Evaluation {
  double loglike = 0.0;  ///< -inf outside S_R
  Vec rho;               ///< observables ρ_l(u)
};

class ForwardModel {
 public:
  virtual ~ForwardModel() = default;

  virtual const GaussianHierarchy& hierarchy() const = 0;
  /// u in stacked (unwhitened) coordinates of level l.
  virtual Evaluation evaluate(int level, const Vec& u) const = 0;
  /// Work units per evaluation at level l.
  virtual double cost(int level) const = 0;
  virtual Index observable_dim() const = 0;
  virtual std::string name() const = 0;

  /// Squared strong discrepancy between the level-l and level-(l-1) solutions
  /// driven by the same u, when the model defines one (used in variance rates).
  virtual std::optional<double> discrepancy(int level, const Vec& u) const;

  double loglike(int level, const Vec& u) const { return evaluate(level, u).loglike; }
  Vec rho(int level, const Vec& u) const { return evaluate(level, u).rho; }
  double radius() const { return radius_; }
  bool in_restriction(const Vec& u) const;
  int max_level() const { return hierarchy().finest_level(); }

 protected:
  double radius_ = 0.0;
};

/// Gaussian misfit -½ Σ (y - g)² / noise_variance.
double gaussian_loglike(const Vec& y, const Vec& g, double noise_variance);

/// Observations shared by both models (JSON on disk).
struct ObservationData {
  std::string model;
  int level = 0;                 ///< level used to generate the data
  std::uint64_t seed = 0;
  double noise_variance = 1.0;
  Vec values;                    ///< y
  Vec truth;                     ///< noiseless observables of the generating state
  std::vector<double> times;     ///< diffusion
  std::vector<std::array<double, 2>> points;  ///< PDE
};

void save_observations(const ObservationData& data, const std::string& path);
ObservationData load_observations(const std::string& path);

// ---------------------------------------------------------------------------
// conditioned diffusion dp = f(p) dt + σ du

enum class DriftKind { Zero, Linear, Sine };

struct DiffusionConfig {
  double horizon = 16.0;
  int num_obs = 16;
  double first_obs = 1.0;
  double noise_variance = 0.01;
  Index d0 = 32;
  double p0 = 0.0;
  DriftKind drift = DriftKind::Sine;
  double drift_scale = 0.05;
  double sigma = 1.0;
  double radius_factor = 4.0;

  /// Evenly spaced from first_obs to horizon.
  std::vector<double> obs_times() const;
  double drift_at(double p) const;
};

/// EM on positions u_1..u_d at t = h..T (u_0 = 0): returns p_1..p_d.
Vec euler_maruyama(const Vec& path, double h, const DiffusionConfig& cfg);

/// Left-endpoint piecewise-constant interpolant: p(t) = p_k for t in [kh, (k+1)h),
/// with p_0 the initial condition and p_k the value at grid time kh.
double interpolate_path(const Vec& p, double p0, double h, double t);

class DiffusionModel final : public ForwardModel {
 public:
  DiffusionModel(DiffusionConfig cfg, std::shared_ptr<const BrownianHierarchy> hier,
                 Vec observations);

  const GaussianHierarchy& hierarchy() const override { return *hier_; }
  Evaluation evaluate(int level, const Vec& u) const override;
  double cost(int level) const override;
  Index observable_dim() const override { return Index(times_.size()); }
  std::string name() const override { return "diffusion"; }
  std::optional<double> discrepancy(int level, const Vec& u) const override;

  /// Noiseless observables G_l(u) and the full EM path.
  Vec observe(int level, const Vec& u) const;
  Vec solve_path(int level, const Vec& u) const;

  const DiffusionConfig& config() const { return cfg_; }
  const BrownianHierarchy& brownian() const { return *hier_; }

 private:
  std::vector<Index> obs_index(int level) const;

  DiffusionConfig cfg_;
  std::shared_ptr<const BrownianHierarchy> hier_;
  Vec y_;
  std::vector<double> times_;
};

// ---------------------------------------------------------------------------
// bilinear FEM for -∇·(κ∇p) = f on [0,1]², p = 0 on the boundary

class FemSolver2D {
 public:
  using Source = std::function<double(double, double)>;

  FemSolver2D(Index cells, const Source& source, double tol = 1e-10);

  Index cells() const { return k_; }
  /// Stiffness matrix on interior nodes for nodal permeability κ ((K+1)² grid).
  Eigen::SparseMatrix<double> stiffness(const Mat& kappa) const;
  /// Nodal solution on the full grid (boundary rows/cols zero).
  Mat solve(const Mat& kappa) const;
  const Vec& load() const { return load_; }

  /// Bilinear interpolation of nodal values at (x, y).
  static double interpolate(const Mat& nodal, double x, double y);
  /// |p_h - p*|_V = (∫|∇(p_h - p*)|²)^{1/2} by 3×3 Gauss per cell.
  double energy_error(const Mat& nodal,
                      const std::function<std::array<double, 2>(double, double)>& grad) const;

 private:
  Index k_;
  double tol_;
  Vec load_;  ///< interior nodes, row-major over (i, j) = 1..K-1
};

struct Bump {
  double x, y, weight;
};

struct EllipticConfig {
  Index k0 = 10;
  double sigma2 = 1.0;
  double alpha = 1.0;
  double source_sigma = 0.05;
  std::vector<Bump> bumps{{0.3, 0.3, 2.0}, {0.3, 0.7, -3.0}, {0.7, 0.3, -2.0}, {0.7, 0.7, 3.0}};
  int obs_per_side = 5;
  double obs_lo = 0.2, obs_hi = 0.6;
  double snr = 10.0;
  double radius_factor = 4.0;
  double cost_exponent = 1.5;  ///< work ∝ d^γ for diagonal-PCG
  double cg_tol = 1e-10;

  std::vector<std::array<double, 2>> obs_points() const;
  double source(double x, double y) const;
};

class EllipticModel final : public ForwardModel {
 public:
  EllipticModel(EllipticConfig cfg, std::shared_ptr<const GridHierarchy2D> hier, Vec observations,
                double noise_variance);

  const GaussianHierarchy& hierarchy() const override { return *hier_; }
  Evaluation evaluate(int level, const Vec& u) const override;
  double cost(int level) const override;
  Index observable_dim() const override { return Index(points_.size()); }
  std::string name() const override { return "elliptic"; }

  Mat solve(int level, const Vec& u) const;
  Vec observe(const Mat& nodal) const;

  const EllipticConfig& config() const { return cfg_; }
  const FemSolver2D& solver(int level) const { return solvers_.at(level); }
  double noise_variance() const { return noise_variance_; }

 private:
  EllipticConfig cfg_;
  std::shared_ptr<const GridHierarchy2D> hier_;
  Vec y_;
  double noise_variance_;
  std::vector<std::array<double, 2>> points_;
  std::vector<FemSolver2D> solvers_;
};

}  // namespace mlsmc
