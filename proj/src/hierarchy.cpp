#include "mlsmc/hierarchy.hpp"

#include <cmath>
#include <numbers>

namespace mlsmc {

// ---------------------------------------------------------------------------
// GaussianHierarchy

const LevelLayout& GaussianHierarchy::layout(int level) const {
  check_level(level);
  return layouts_[level];
}

void GaussianHierarchy::check_level(int level, int min_level) const {
  if (level < min_level || level >= num_levels())
    throw InvalidArgument("level " + std::to_string(level) + " out of range [" +
                          std::to_string(min_level) + ", " + std::to_string(finest_level()) +
                          "]");
}

void GaussianHierarchy::check_dense(int level) const {
  if (dim(level) > dense_cap_)
    throw InvalidArgument("dense covariance requested above the dense cap (d = " +
                          std::to_string(dim(level)) + ")");
}

Vec GaussianHierarchy::transport(int level, const Vec& v_coarse) const {
  check_level(level, 1);
  return whiten(level, lift(level, unwhiten(level - 1, v_coarse)));
}

Mat GaussianHierarchy::conditional_covariance(int level) const {
  check_level(level, 1);
  const Mat g = covariance(level);
  const Index dc = dim(level - 1), dn = layout(level).d_new;
  Eigen::LLT<Mat> llt(g.topLeftCorner(dc, dc));
  if (llt.info() != Eigen::Success) throw NumericalError("coarse covariance not positive definite");
  const Mat cross = g.topRightCorner(dc, dn);
  Mat s = g.bottomRightCorner(dn, dn) - cross.transpose() * llt.solve(cross);
  return 0.5 * (s + s.transpose());
}

Vec GaussianHierarchy::marginal_std(int level) const {
  return covariance(level).diagonal().cwiseSqrt();
}

Vec GaussianHierarchy::sample_prior(int level, NormalSource& noise) const {
  return unwhiten(level, draw_normals(noise, dim(level)));
}

// ---------------------------------------------------------------------------
// Karhunen–Loeve

KarhunenLoeveHierarchy::KarhunenLoeveHierarchy(Vec eigenvalues, std::vector<Index> level_dims,
                                               int spatial_dim)
    : lambda_(std::move(eigenvalues)) {
  require(!level_dims.empty(), "KL hierarchy needs at least one level");
  require(lambda_.size() >= level_dims.back(), "not enough KL eigenvalues for the finest level");
  require((lambda_.array() > 0).all(), "KL eigenvalues must be positive");
  Index prev = 0;
  for (std::size_t l = 0; l < level_dims.size(); ++l) {
    require(level_dims[l] > prev, "KL level dimensions must strictly increase");
    LevelLayout lay;
    lay.level = static_cast<int>(l);
    lay.d_total = level_dims[l];
    lay.d_new = level_dims[l] - prev;
    lay.spatial_dim = spatial_dim;
    lay.h = std::pow(static_cast<double>(level_dims[l]), -1.0 / spatial_dim);
    layouts_.push_back(lay);
    prev = level_dims[l];
  }
}

std::shared_ptr<KarhunenLoeveHierarchy> KarhunenLoeveHierarchy::power_law(
    double decay, Index d0, int levels, int spatial_dim, double scale) {
  std::vector<Index> dims;
  for (int l = 0; l < levels; ++l) dims.push_back(d0 << (l * spatial_dim));
  Vec lambda(dims.back());
  for (Index i = 0; i < lambda.size(); ++i) lambda[i] = scale * std::pow(double(i + 1), -decay);
  return std::make_shared<KarhunenLoeveHierarchy>(lambda, dims, spatial_dim);
}

Vec KarhunenLoeveHierarchy::lift(int level, const Vec& coarse) const {
  check_level(level, 1);
  require(coarse.size() == dim(level - 1), "lift: coarse dimension mismatch");
  Vec u = Vec::Zero(dim(level));
  u.head(coarse.size()) = coarse;
  return u;
}

Vec KarhunenLoeveHierarchy::extend(int level, const Vec& coarse, NormalSource& noise) const {
  Vec u = lift(level, coarse);
  for (Index i = coarse.size(); i < u.size(); ++i) u[i] = std::sqrt(lambda_[i]) * noise.normal();
  return u;
}

Vec KarhunenLoeveHierarchy::whiten(int level, const Vec& u) const {
  require(u.size() == dim(level), "whiten: dimension mismatch");
  return u.cwiseQuotient(lambda_.head(u.size()).cwiseSqrt());
}

Vec KarhunenLoeveHierarchy::unwhiten(int level, const Vec& v) const {
  require(v.size() == dim(level), "unwhiten: dimension mismatch");
  return v.cwiseProduct(lambda_.head(v.size()).cwiseSqrt());
}

Vec KarhunenLoeveHierarchy::transport(int level, const Vec& v_coarse) const {
  return lift(level, v_coarse);
}

Mat KarhunenLoeveHierarchy::covariance(int level) const {
  check_dense(level);
  return lambda_.head(dim(level)).asDiagonal();
}

Mat KarhunenLoeveHierarchy::conditional_covariance(int level) const {
  check_level(level, 1);
  return lambda_.segment(dim(level - 1), layout(level).d_new).asDiagonal();
}

Vec KarhunenLoeveHierarchy::marginal_std(int level) const {
  return lambda_.head(dim(level)).cwiseSqrt();
}

// ---------------------------------------------------------------------------
// Brownian

BrownianHierarchy::BrownianHierarchy(double horizon, Index d0, int levels) : horizon_(horizon) {
  require(horizon > 0 && d0 >= 1 && levels >= 1, "invalid Brownian hierarchy");
  for (int l = 0; l < levels; ++l) {
    LevelLayout lay;
    lay.level = l;
    lay.d_total = d0 << l;
    lay.d_new = l == 0 ? d0 : lay.d_total / 2;
    lay.h = 1.0 / static_cast<double>(lay.d_total);
    layouts_.push_back(lay);

    std::vector<Index> perm(lay.d_total);
    if (l == 0) {
      for (Index s = 0; s < d0; ++s) perm[s] = s;
    } else {
      const auto& prev = perm_.back();
      const Index dc = layouts_[l - 1].d_total;
      // coarse time index j (t = (j+1)h_c) sits at fine index 2j+1; midpoints at 2k
      for (Index s = 0; s < dc; ++s) perm[s] = 2 * prev[s] + 1;
      for (Index k = 0; k < dc; ++k) perm[dc + k] = 2 * k;
    }
    perm_.push_back(std::move(perm));
  }
}

double BrownianHierarchy::spacing(int level) const { return horizon_ * layout(level).h; }

Vec BrownianHierarchy::grid_path(int level, const Vec& u) const {
  require(u.size() == dim(level), "grid_path: dimension mismatch");
  const auto& perm = perm_[level];
  Vec path(u.size());
  for (Index s = 0; s < u.size(); ++s) path[perm[s]] = u[s];
  return path;
}

Vec BrownianHierarchy::stacked_from_path(int level, const Vec& path) const {
  require(path.size() == dim(level), "stacked_from_path: dimension mismatch");
  const auto& perm = perm_[level];
  Vec u(path.size());
  for (Index s = 0; s < u.size(); ++s) u[s] = path[perm[s]];
  return u;
}

Vec BrownianHierarchy::lift(int level, const Vec& coarse) const {
  check_level(level, 1);
  require(coarse.size() == dim(level - 1), "lift: coarse dimension mismatch");
  const Vec pc = grid_path(level - 1, coarse);
  const Index dc = coarse.size();
  Vec u(dim(level));
  u.head(dc) = coarse;
  for (Index k = 0; k < dc; ++k) u[dc + k] = 0.5 * ((k > 0 ? pc[k - 1] : 0.0) + pc[k]);
  return u;
}

Vec BrownianHierarchy::extend(int level, const Vec& coarse, NormalSource& noise) const {
  Vec u = lift(level, coarse);
  const double sd = std::sqrt(spacing(level - 1) / 4.0);
  for (Index i = coarse.size(); i < u.size(); ++i) u[i] += sd * noise.normal();
  return u;
}

Vec BrownianHierarchy::whiten(int level, const Vec& u) const {
  const Vec p = grid_path(level, u);
  const double s = 1.0 / std::sqrt(spacing(level));
  Vec v(p.size());
  double prev = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    v[i] = (p[i] - prev) * s;
    prev = p[i];
  }
  return v;
}

Vec BrownianHierarchy::unwhiten(int level, const Vec& v) const {
  require(v.size() == dim(level), "unwhiten: dimension mismatch");
  const double s = std::sqrt(spacing(level));
  Vec p(v.size());
  double acc = 0.0;
  for (Index i = 0; i < v.size(); ++i) {
    acc += v[i] * s;
    p[i] = acc;
  }
  return stacked_from_path(level, p);
}

Vec BrownianHierarchy::transport(int level, const Vec& v_coarse) const {
  check_level(level, 1);
  require(v_coarse.size() == dim(level - 1), "transport: coarse dimension mismatch");
  // a coarse increment splits into two equal fine increments
  Vec v(2 * v_coarse.size());
  for (Index i = 0; i < v_coarse.size(); ++i) v[2 * i] = v[2 * i + 1] = v_coarse[i] * M_SQRT1_2;
  return v;
}

Mat BrownianHierarchy::covariance(int level) const {
  check_dense(level);
  const Index d = dim(level);
  const double h = spacing(level);
  const auto& perm = perm_[level];
  Mat g(d, d);
  for (Index a = 0; a < d; ++a)
    for (Index b = 0; b < d; ++b) g(a, b) = h * double(std::min(perm[a], perm[b]) + 1);
  return g;
}

Mat BrownianHierarchy::conditional_covariance(int level) const {
  check_level(level, 1);
  return Mat::Identity(layout(level).d_new, layout(level).d_new) * (spacing(level - 1) / 4.0);
}

Vec BrownianHierarchy::marginal_std(int level) const {
  const auto& perm = perm_[level];
  Vec s(dim(level));
  for (Index a = 0; a < s.size(); ++a) s[a] = std::sqrt(spacing(level) * double(perm[a] + 1));
  return s;
}

// ---------------------------------------------------------------------------
// 2D grid field

JitteredCholesky jittered_cholesky(const Mat& a, double min_pivot_ratio) {
  const double base = a.trace() / double(a.rows());
  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    if (attempt == 1) jitter = 1e-12 * base;
    if (attempt > 1) jitter *= 10.0;
    Mat shifted = a;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Mat> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Mat l = llt.matrixL();
      const Vec piv = l.diagonal().array().square();
      if (piv.minCoeff() > min_pivot_ratio * piv.maxCoeff()) return {l, jitter};
    }
  }
  throw NumericalError("Cholesky failed even with jitter 1e-6·trace/d");
}

Mat GridHierarchy2D::kernel_1d(Index nodes) const {
  const double h = 1.0 / double(nodes - 1);
  Mat c(nodes, nodes);
  for (Index i = 0; i < nodes; ++i)
    for (Index j = 0; j < nodes; ++j) {
      const double dx = double(i - j) * h;
      c(i, j) = std::exp(-dx * dx / alpha_);
    }
  return c;
}

GridHierarchy2D::GridHierarchy2D(Index k0, int levels, double sigma2, double alpha)
    : k0_(k0), sigma_(std::sqrt(sigma2)), alpha_(alpha) {
  require(k0 >= 1 && levels >= 1 && sigma2 > 0 && alpha > 0, "invalid grid hierarchy");
  // The nugget is fixed once on the finest grid so that every coarse 1D matrix is
  // exactly the restriction of the fine one (keeps the levels nested).
  const Index n_fine = (k0 << (levels - 1)) + 1;
  nugget_ = jittered_cholesky(kernel_1d(n_fine), 1e-10).jitter;

  for (int l = 0; l < levels; ++l) {
    const Index n = (k0 << l) + 1;
    LevelLayout lay;
    lay.level = l;
    lay.d_total = n * n;
    lay.d_new = l == 0 ? n * n : n * n - layouts_.back().d_total;
    lay.h = 1.0 / double(k0 << l);
    lay.spatial_dim = 2;
    layouts_.push_back(lay);

    Mat s = kernel_1d(n);
    s.diagonal().array() += nugget_;
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success) throw NumericalError("1D prior factor failed");
    chol_.push_back(llt.matrixL());

    std::vector<Index> perm;
    perm.reserve(n * n);
    if (l == 0) {
      for (Index i = 0; i < n * n; ++i) perm.push_back(i);
      lift_1d_.emplace_back();
      transport_1d_.emplace_back();
    } else {
      const Index nc = (k0 << (l - 1)) + 1;
      for (Index g : perm_.back()) perm.push_back(2 * (g / nc) * n + 2 * (g % nc));
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
          if (i % 2 == 1 || j % 2 == 1) perm.push_back(i * n + j);

      // B = S_{f,c} S_{c,c}^{-1}; rows at coarse nodes are exact unit rows
      Mat s_fc(n, nc);
      for (Index c = 0; c < nc; ++c) s_fc.col(c) = s.col(2 * c);
      const Mat& lc = chol_[l - 1];
      Mat b = lc.transpose().triangularView<Eigen::Upper>().solve(
          lc.triangularView<Eigen::Lower>().solve(s_fc.transpose()));
      b.transposeInPlace();
      for (Index c = 0; c < nc; ++c) {
        b.row(2 * c).setZero();
        b(2 * c, c) = 1.0;
      }
      lift_1d_.push_back(b);
      transport_1d_.push_back(chol_[l].triangularView<Eigen::Lower>().solve(b * lc));
    }
    perm_.push_back(std::move(perm));
  }
}

Mat GridHierarchy2D::grid_values(int level, const Vec& u) const {
  require(u.size() == dim(level), "grid_values: dimension mismatch");
  const Index n = cells(level) + 1;
  Mat g(n, n);
  const auto& perm = perm_[level];
  for (Index s = 0; s < u.size(); ++s) g(perm[s] / n, perm[s] % n) = u[s];
  return g;
}

Vec GridHierarchy2D::stacked_from_grid(int level, const Mat& grid) const {
  const Index n = cells(level) + 1;
  require(grid.rows() == n && grid.cols() == n, "stacked_from_grid: shape mismatch");
  const auto& perm = perm_[level];
  Vec u(n * n);
  for (Index s = 0; s < u.size(); ++s) u[s] = grid(perm[s] / n, perm[s] % n);
  return u;
}

namespace {
// row-major flattening of a square matrix (whitened coordinates live in grid order)
Vec flatten(const Mat& m) {
  Vec v(m.size());
  for (Index i = 0; i < m.rows(); ++i) v.segment(i * m.cols(), m.cols()) = m.row(i).transpose();
  return v;
}
Mat unflatten(const Vec& v, Index n) {
  Mat m(n, n);
  for (Index i = 0; i < n; ++i) m.row(i) = v.segment(i * n, n).transpose();
  return m;
}
}  // namespace

Vec GridHierarchy2D::lift(int level, const Vec& coarse) const {
  check_level(level, 1);
  require(coarse.size() == dim(level - 1), "lift: coarse dimension mismatch");
  const Mat& b = lift_1d_[level];
  Vec u = stacked_from_grid(level, b * grid_values(level - 1, coarse) * b.transpose());
  u.head(coarse.size()) = coarse;
  return u;
}

Vec GridHierarchy2D::extend(int level, const Vec& coarse, NormalSource& noise) const {
  check_level(level, 1);
  // Matheron's rule: conditional draw = mean + (z - E[z | z at coarse nodes])
  const Index nc = cells(level - 1) + 1;
  const Mat z = grid_values(level, sample_prior(level, noise));
  Mat zc(nc, nc);
  for (Index i = 0; i < nc; ++i)
    for (Index j = 0; j < nc; ++j) zc(i, j) = z(2 * i, 2 * j);
  const Mat& b = lift_1d_[level];
  const Mat resid = z - b * zc * b.transpose();
  Vec u = lift(level, coarse) + stacked_from_grid(level, resid);
  u.head(coarse.size()) = coarse;
  return u;
}

Vec GridHierarchy2D::whiten(int level, const Vec& u) const {
  const Mat& l = chol_[level];
  const Mat x = l.triangularView<Eigen::Lower>().solve(grid_values(level, u));
  const Mat v = l.triangularView<Eigen::Lower>().solve(x.transpose()).transpose();
  return flatten(v) / sigma_;
}

Vec GridHierarchy2D::unwhiten(int level, const Vec& v) const {
  require(v.size() == dim(level), "unwhiten: dimension mismatch");
  const Mat& l = chol_[level];
  const Index n = cells(level) + 1;
  const Mat g = sigma_ * (l * unflatten(v, n) * l.transpose());
  return stacked_from_grid(level, g);
}

Vec GridHierarchy2D::transport(int level, const Vec& v_coarse) const {
  check_level(level, 1);
  require(v_coarse.size() == dim(level - 1), "transport: coarse dimension mismatch");
  const Mat& t = transport_1d_[level];
  return flatten(t * unflatten(v_coarse, cells(level - 1) + 1) * t.transpose());
}

Mat GridHierarchy2D::covariance(int level) const {
  check_dense(level);
  const Index n = cells(level) + 1;
  Mat s = kernel_1d(n);
  s.diagonal().array() += nugget_;
  const auto& perm = perm_[level];
  const Index d = dim(level);
  Mat g(d, d);
  for (Index a = 0; a < d; ++a)
    for (Index b = 0; b < d; ++b)
      g(a, b) = sigma_ * sigma_ * s(perm[a] / n, perm[b] / n) * s(perm[a] % n, perm[b] % n);
  return g;
}

Vec GridHierarchy2D::marginal_std(int level) const {
  return Vec::Constant(dim(level), sigma_ * (1.0 + nugget_));
}

// ---------------------------------------------------------------------------
// free operations

Vec extend_sample(const GaussianHierarchy& hier, int level, const Vec& u_coarse,
                  NormalSource& noise) {
  if (level < 1 || level > hier.finest_level())
    throw InvalidArgument("extend_sample: level " + std::to_string(level) + " out of range");
  require(u_coarse.size() == hier.dim(level - 1), "extend_sample: coarse dimension mismatch");
  return hier.extend(level, u_coarse, noise);
}

double extension_log_density(const GaussianHierarchy& hier, int level, const Vec& u_coarse,
                             const Vec& u_new) {
  require(level >= 1 && level <= hier.finest_level(), "extension_log_density: bad level");
  require(u_coarse.size() == hier.dim(level - 1) && u_new.size() == hier.layout(level).d_new,
          "extension_log_density: dimension mismatch");
  const Vec mean = hier.lift(level, u_coarse).tail(u_new.size());
  const Mat cov = hier.conditional_covariance(level);
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("singular conditional covariance");
  const Vec r = llt.matrixL().solve(u_new - mean);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (r.squaredNorm() + logdet + double(u_new.size()) * std::log(2.0 * M_PI));
}

Mat transport_basis(const GaussianHierarchy& hier, const Mat& p_src, int level_src,
                    int level_dst) {
  require(level_dst >= level_src, "transport_basis: destination below source");
  require(p_src.rows() == hier.dim(level_src), "transport_basis: basis dimension mismatch");
  const Index m = p_src.cols();
  if ((p_src.transpose() * p_src - Mat::Identity(m, m)).norm() >= 1e-8)
    throw InvalidArgument("transport_basis: input columns are not orthonormal");
  Mat p = p_src;
  for (int l = level_src + 1; l <= level_dst; ++l) {
    Mat next(hier.dim(l), m);
    for (Index j = 0; j < m; ++j) next.col(j) = hier.transport(l, p.col(j));
    p = std::move(next);
  }
  return p;
}

Mat lift_matrix(const GaussianHierarchy& hier, int level) {
  const Index dc = hier.dim(level - 1);
  Mat a(hier.dim(level), dc);
  for (Index j = 0; j < dc; ++j) a.col(j) = hier.lift(level, Vec::Unit(dc, j));
  return a;
}

Mat noise_matrix(const GaussianHierarchy& hier, int level) {
  const Index dc = hier.dim(level - 1), dn = hier.layout(level).d_new;
  const Mat cond = hier.conditional_covariance(level);
  Mat a = Mat::Zero(dc + dn, dn);
  Eigen::LLT<Mat> llt(cond);
  if (llt.info() == Eigen::Success) {
    a.bottomRows(dn) = llt.matrixL();
    return a;
  }
  // numerically singular (smooth kernels): PSD square root, round-off negatives clipped
  Eigen::SelfAdjointEigenSolver<Mat> es(cond);
  const Vec lam = es.eigenvalues();
  if (lam.minCoeff() < -1e-8 * std::max(1.0, lam.maxCoeff()))
    throw NumericalError("conditional covariance not positive semidefinite");
  a.bottomRows(dn) = es.eigenvectors() * lam.cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                     es.eigenvectors().transpose();
  return a;
}

Mat transport_matrix(const GaussianHierarchy& hier, int level) {
  const Index dc = hier.dim(level - 1);
  Mat t(hier.dim(level), dc);
  for (Index j = 0; j < dc; ++j) t.col(j) = hier.transport(level, Vec::Unit(dc, j));
  return t;
}

}  // namespace mlsmc
