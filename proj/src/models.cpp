#include "mlsmc/models.hpp"

#include <json.hpp>

#include <Eigen/IterativeLinearSolvers>

#include <cmath>
#include <fstream>
#include <limits>

namespace mlsmc {

std::optional<double> ForwardModel::discrepancy(int, const Vec&) const { return std::nullopt; }

bool ForwardModel::in_restriction(const Vec& u) const {
  return u.size() == 0 || u.cwiseAbs().maxCoeff() <= radius_;
}

double gaussian_loglike(const Vec& y, const Vec& g, double noise_variance) {
  require(y.size() == g.size(), "gaussian_loglike: observation count mismatch");
  return -0.5 * (y - g).squaredNorm() / noise_variance;
}

// ---------------------------------------------------------------------------
// observation files

void save_observations(const ObservationData& data, const std::string& path) {
  nlohmann::json j;
  j["model"] = data.model;
  j["level"] = data.level;
  j["seed"] = data.seed;
  j["noise_variance"] = data.noise_variance;
  j["values"] = std::vector<double>(data.values.data(), data.values.data() + data.values.size());
  j["truth"] = std::vector<double>(data.truth.data(), data.truth.data() + data.truth.size());
  if (!data.times.empty()) j["times"] = data.times;
  if (!data.points.empty()) j["points"] = data.points;
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write observation file " + path);
  out << j.dump(2) << '\n';
}

ObservationData load_observations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read observation file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw InvalidArgument("malformed observation file " + path + ": " + e.what());
  }
  ObservationData d;
  d.model = j.at("model").get<std::string>();
  d.level = j.at("level").get<int>();
  d.seed = j.at("seed").get<std::uint64_t>();
  d.noise_variance = j.at("noise_variance").get<double>();
  auto vals = j.at("values").get<std::vector<double>>();
  d.values = Eigen::Map<Vec>(vals.data(), Index(vals.size()));
  if (j.contains("truth")) {
    auto t = j.at("truth").get<std::vector<double>>();
    d.truth = Eigen::Map<Vec>(t.data(), Index(t.size()));
  }
  if (j.contains("times")) d.times = j.at("times").get<std::vector<double>>();
  if (j.contains("points")) d.points = j.at("points").get<std::vector<std::array<double, 2>>>();
  return d;
}

// ---------------------------------------------------------------------------
// diffusion

std::vector<double> DiffusionConfig::obs_times() const {
  std::vector<double> t(num_obs);
  const double step = num_obs > 1 ? (horizon - first_obs) / double(num_obs - 1) : 0.0;
  for (int j = 0; j < num_obs; ++j) t[j] = first_obs + step * j;
  return t;
}

double DiffusionConfig::drift_at(double p) const {
  switch (drift) {
    case DriftKind::Zero: return 0.0;
    case DriftKind::Linear: return -drift_scale * p;
    case DriftKind::Sine: return drift_scale * std::sin(p);
  }
  return 0.0;
}

Vec euler_maruyama(const Vec& path, double h, const DiffusionConfig& cfg) {
  Vec p(path.size());
  double cur = cfg.p0, prev_u = 0.0;
  for (Index i = 0; i < path.size(); ++i) {
    cur = cur + cfg.drift_at(cur) * h + cfg.sigma * (path[i] - prev_u);
    prev_u = path[i];
    if (!std::isfinite(cur)) throw NumericalError("Euler–Maruyama produced a non-finite state");
    p[i] = cur;
  }
  return p;
}

double interpolate_path(const Vec& p, double p0, double h, double t) {
  const Index k = static_cast<Index>(std::floor(t / h + 1e-9));
  if (k <= 0) return p0;
  return p[std::min(k, p.size()) - 1];
}

DiffusionModel::DiffusionModel(DiffusionConfig cfg, std::shared_ptr<const BrownianHierarchy> hier,
                               Vec observations)
    : cfg_(std::move(cfg)), hier_(std::move(hier)), y_(std::move(observations)) {
  require(hier_ != nullptr, "diffusion model needs a hierarchy");
  require(cfg_.noise_variance > 0, "noise variance must be positive");
  times_ = cfg_.obs_times();
  require(y_.size() == Index(times_.size()), "observation count does not match num_obs");
  radius_ = cfg_.radius_factor * std::sqrt(hier_->horizon());
  obs_index(0);  // validates that observations sit on the level-0 grid
}

std::vector<Index> DiffusionModel::obs_index(int level) const {
  const double h = hier_->spacing(level);
  std::vector<Index> idx;
  for (double t : times_) {
    const double k = t / h;
    if (std::abs(k - std::round(k)) > 1e-9 || std::round(k) < 1 ||
        std::round(k) > double(hier_->dim(level)))
      throw InvalidArgument("observation time " + std::to_string(t) + " is off the grid");
    idx.push_back(static_cast<Index>(std::round(k)) - 1);
  }
  return idx;
}

Vec DiffusionModel::solve_path(int level, const Vec& u) const {
  return euler_maruyama(hier_->grid_path(level, u), hier_->spacing(level), cfg_);
}

Vec DiffusionModel::observe(int level, const Vec& u) const {
  const Vec p = solve_path(level, u);
  const auto idx = obs_index(level);
  Vec g(Index(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) g[Index(j)] = p[idx[j]];
  return g;
}

Evaluation DiffusionModel::evaluate(int level, const Vec& u) const {
  Evaluation e;
  e.rho = observe(level, u);
  e.loglike = in_restriction(u) ? gaussian_loglike(y_, e.rho, cfg_.noise_variance)
                                : -std::numeric_limits<double>::infinity();
  return e;
}

double DiffusionModel::cost(int level) const { return double(hier_->dim(level)); }

std::optional<double> DiffusionModel::discrepancy(int level, const Vec& u) const {
  if (level < 1) return std::nullopt;
  const Vec pf = solve_path(level, u);
  const Vec pc = solve_path(level - 1, u.head(hier_->dim(level - 1)));
  // both interpolants are constant on fine cells; compare cell by cell
  double worst = 0.0;
  for (Index k = 0; k <= pf.size(); ++k) {
    const double vf = k == 0 ? cfg_.p0 : pf[k - 1];
    const Index kc = k / 2;
    const double vc = kc == 0 ? cfg_.p0 : pc[kc - 1];
    worst = std::max(worst, std::abs(vf - vc));
  }
  return worst * worst;
}

// ---------------------------------------------------------------------------
// FEM

namespace {
const std::array<double, 3> kGaussX{0.5 - 0.5 * 0.7745966692414834, 0.5,
                                     0.5 + 0.5 * 0.7745966692414834};
const std::array<double, 3> kGaussW{5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};

// local node order: (i,j), (i+1,j), (i+1,j+1), (i,j+1)
constexpr int kDi[4] = {0, 1, 1, 0};
constexpr int kDj[4] = {0, 0, 1, 1};

double shape(int a, double xi, double eta) {
  const double sx = kDi[a] ? xi : 1.0 - xi;
  const double sy = kDj[a] ? eta : 1.0 - eta;
  return sx * sy;
}

std::array<double, 2> shape_grad(int a, double xi, double eta) {
  const double sx = kDi[a] ? xi : 1.0 - xi, dx = kDi[a] ? 1.0 : -1.0;
  const double sy = kDj[a] ? eta : 1.0 - eta, dy = kDj[a] ? 1.0 : -1.0;
  return {dx * sy, sx * dy};
}

// M[k][a][b] = ∫_{[0,1]²} φ_k ∇φ_a·∇φ_b (mesh width cancels in 2D)
struct ReferenceTensors {
  double m[4][4][4]{};
  ReferenceTensors() {
    for (int qx = 0; qx < 3; ++qx)
      for (int qy = 0; qy < 3; ++qy) {
        const double xi = kGaussX[qx], eta = kGaussX[qy], w = kGaussW[qx] * kGaussW[qy];
        for (int k = 0; k < 4; ++k) {
          const double phik = shape(k, xi, eta);
          for (int a = 0; a < 4; ++a) {
            const auto ga = shape_grad(a, xi, eta);
            for (int b = 0; b < 4; ++b) {
              const auto gb = shape_grad(b, xi, eta);
              m[k][a][b] += w * phik * (ga[0] * gb[0] + ga[1] * gb[1]);
            }
          }
        }
      }
  }
};

const ReferenceTensors& reference() {
  static const ReferenceTensors r;
  return r;
}
}  // namespace

FemSolver2D::FemSolver2D(Index cells, const Source& source, double tol) : k_(cells), tol_(tol) {
  require(cells >= 2, "FEM needs at least 2 cells per side");
  const Index ni = k_ - 1;
  const double h = 1.0 / double(k_);
  load_ = Vec::Zero(ni * ni);
  for (Index i = 0; i < k_; ++i)
    for (Index j = 0; j < k_; ++j)
      for (int qx = 0; qx < 3; ++qx)
        for (int qy = 0; qy < 3; ++qy) {
          const double xi = kGaussX[qx], eta = kGaussX[qy];
          const double fw = source((i + xi) * h, (j + eta) * h) * kGaussW[qx] * kGaussW[qy] * h * h;
          for (int a = 0; a < 4; ++a) {
            const Index gi = i + kDi[a], gj = j + kDj[a];
            if (gi == 0 || gj == 0 || gi == k_ || gj == k_) continue;
            load_[(gi - 1) * ni + (gj - 1)] += fw * shape(a, xi, eta);
          }
        }
}

Eigen::SparseMatrix<double> FemSolver2D::stiffness(const Mat& kappa) const {
  require(kappa.rows() == k_ + 1 && kappa.cols() == k_ + 1, "stiffness: κ grid shape mismatch");
  const Index ni = k_ - 1;
  const auto& ref = reference();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(std::size_t(k_ * k_ * 16));
  for (Index i = 0; i < k_; ++i)
    for (Index j = 0; j < k_; ++j) {
      double kap[4];
      Index dof[4];
      for (int a = 0; a < 4; ++a) {
        const Index gi = i + kDi[a], gj = j + kDj[a];
        kap[a] = kappa(gi, gj);
        dof[a] = (gi == 0 || gj == 0 || gi == k_ || gj == k_) ? -1 : (gi - 1) * ni + (gj - 1);
      }
      for (int a = 0; a < 4; ++a) {
        if (dof[a] < 0) continue;
        for (int b = 0; b < 4; ++b) {
          if (dof[b] < 0) continue;
          double v = 0.0;
          for (int k = 0; k < 4; ++k) v += kap[k] * ref.m[k][a][b];
          trip.emplace_back(dof[a], dof[b], v);
        }
      }
    }
  Eigen::SparseMatrix<double> a(ni * ni, ni * ni);
  a.setFromTriplets(trip.begin(), trip.end());
  return a;
}

Mat FemSolver2D::solve(const Mat& kappa) const {
  const Eigen::SparseMatrix<double> a = stiffness(kappa);
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                           Eigen::DiagonalPreconditioner<double>>
      cg;
  cg.setTolerance(tol_);
  cg.setMaxIterations(20 * (k_ + 1) * (k_ + 1));
  cg.compute(a);
  const Vec x = cg.solve(load_);
  if (cg.info() != Eigen::Success)
    throw NumericalError("FEM solve did not converge (residual " + std::to_string(cg.error()) + ")");
  const Index ni = k_ - 1;
  Mat p = Mat::Zero(k_ + 1, k_ + 1);
  for (Index i = 1; i < k_; ++i)
    for (Index j = 1; j < k_; ++j) p(i, j) = x[(i - 1) * ni + (j - 1)];
  return p;
}

double FemSolver2D::interpolate(const Mat& nodal, double x, double y) {
  const Index k = nodal.rows() - 1;
  const Index i = std::clamp<Index>(Index(std::floor(x * k)), 0, k - 1);
  const Index j = std::clamp<Index>(Index(std::floor(y * k)), 0, k - 1);
  const double xi = x * k - i, eta = y * k - j;
  return nodal(i, j) * (1 - xi) * (1 - eta) + nodal(i + 1, j) * xi * (1 - eta) +
         nodal(i + 1, j + 1) * xi * eta + nodal(i, j + 1) * (1 - xi) * eta;
}

double FemSolver2D::energy_error(
    const Mat& nodal, const std::function<std::array<double, 2>(double, double)>& grad) const {
  const double h = 1.0 / double(k_);
  double acc = 0.0;
  for (Index i = 0; i < k_; ++i)
    for (Index j = 0; j < k_; ++j)
      for (int qx = 0; qx < 3; ++qx)
        for (int qy = 0; qy < 3; ++qy) {
          const double xi = kGaussX[qx], eta = kGaussX[qy];
          double gx = 0, gy = 0;
          for (int a = 0; a < 4; ++a) {
            const auto g = shape_grad(a, xi, eta);
            const double v = nodal(i + kDi[a], j + kDj[a]);
            gx += v * g[0] / h;
            gy += v * g[1] / h;
          }
          const auto ge = grad((i + xi) * h, (j + eta) * h);
          acc += kGaussW[qx] * kGaussW[qy] * h * h *
                 ((gx - ge[0]) * (gx - ge[0]) + (gy - ge[1]) * (gy - ge[1]));
        }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// elliptic model

std::vector<std::array<double, 2>> EllipticConfig::obs_points() const {
  std::vector<std::array<double, 2>> pts;
  for (int a = 0; a < obs_per_side; ++a)
    for (int b = 0; b < obs_per_side; ++b) {
      const double s = obs_per_side > 1 ? (obs_hi - obs_lo) / (obs_per_side - 1) : 0.0;
      pts.push_back({obs_lo + s * a, obs_lo + s * b});
    }
  return pts;
}

double EllipticConfig::source(double x, double y) const {
  const double s2 = source_sigma * source_sigma;
  double f = 0.0;
  for (const auto& b : bumps) {
    const double r2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
    f += b.weight / (2.0 * M_PI * s2) * std::exp(-0.5 * r2 / s2);
  }
  return f;
}

EllipticModel::EllipticModel(EllipticConfig cfg, std::shared_ptr<const GridHierarchy2D> hier,
                             Vec observations, double noise_variance)
    : cfg_(std::move(cfg)), hier_(std::move(hier)), y_(std::move(observations)),
      noise_variance_(noise_variance) {
  require(hier_ != nullptr, "elliptic model needs a hierarchy");
  require(noise_variance_ > 0, "noise variance must be positive");
  points_ = cfg_.obs_points();
  require(y_.size() == Index(points_.size()), "observation count does not match obs points");
  radius_ = cfg_.radius_factor * hier_->marginal_std(0).maxCoeff();
  const EllipticConfig& c = cfg_;
  for (int l = 0; l <= hier_->finest_level(); ++l)
    solvers_.emplace_back(hier_->cells(l), [&c](double x, double y) { return c.source(x, y); },
                          cfg_.cg_tol);
}

Mat EllipticModel::solve(int level, const Vec& u) const {
  return solvers_.at(level).solve(hier_->grid_values(level, u).array().exp().matrix());
}

Vec EllipticModel::observe(const Mat& nodal) const {
  Vec g(Index(points_.size()));
  for (std::size_t m = 0; m < points_.size(); ++m)
    g[Index(m)] = FemSolver2D::interpolate(nodal, points_[m][0], points_[m][1]);
  return g;
}

Evaluation EllipticModel::evaluate(int level, const Vec& u) const {
  Evaluation e;
  e.rho = observe(solve(level, u));
  e.loglike = in_restriction(u) ? gaussian_loglike(y_, e.rho, noise_variance_)
                                : -std::numeric_limits<double>::infinity();
  return e;
}

double EllipticModel::cost(int level) const {
  return std::pow(double(hier_->dim(level)), cfg_.cost_exponent);
}

}  // namespace mlsmc
