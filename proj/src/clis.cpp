#include "mlsmc/clis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mlsmc {

SymmetricOperator dense_operator(const Mat& a) {
  require(a.rows() == a.cols(), "dense_operator: matrix not square");
  return {a.rows(), [a](const Vec& v) -> Vec { return a.selfadjointView<Eigen::Lower>() * v; }};
}

Mat sample_covariance(const Mat& x) {
  require(x.rows() >= 2, "sample covariance needs N >= 2");
  const Mat c = x.rowwise() - x.colwise().mean();
  Mat s = (c.transpose() * c) / double(x.rows() - 1);
  return 0.5 * (s + s.transpose());
}

Vec weighted_mean(const Mat& x, const Vec& w) {
  require(w.size() == x.rows(), "weighted_mean: weight count mismatch");
  return x.transpose() * w;
}

Mat weighted_covariance(const Mat& x, const Vec& w) {
  require(x.rows() >= 2 && w.size() == x.rows(), "weighted_covariance: bad input");
  const double denom = 1.0 - w.squaredNorm();
  if (denom <= 0) throw NumericalError("weighted covariance of a single effective particle");
  const Mat c = x.rowwise() - weighted_mean(x, w).transpose();
  Mat s = (c.transpose() * w.asDiagonal() * c) / denom;
  return 0.5 * (s + s.transpose());
}

Mat sample_correction(const Mat& whitened_particles) {
  const Index d = whitened_particles.cols();
  return Mat::Identity(d, d) - sample_covariance(whitened_particles);
}

SymmetricOperator sample_correction_operator(const Mat& whitened_particles) {
  require(whitened_particles.rows() >= 2, "sample correction needs N >= 2");
  const Mat c = (whitened_particles.rowwise() - whitened_particles.colwise().mean()) /
                std::sqrt(double(whitened_particles.rows() - 1));
  return {whitened_particles.cols(),
          [c](const Vec& v) -> Vec { return v - c.transpose() * (c * v); }};
}

// ---------------------------------------------------------------------------
// Lanczos

namespace {

struct LanczosFailure {
  Index steps;
  double resid;
};

// One Lanczos pass with a Krylov budget of kmax; non-convergence is reported via failure.
EigenPairs lanczos_pass(const SymmetricOperator& h, Index m, Index kmax,
                        const LanczosOptions& options, LanczosFailure* failure) {
  const Index d = h.dim;

  RandomStream rng = RandomStream::derive(options.seed, {stream::kLanczos});
  Mat q(d, kmax);
  Vec alpha = Vec::Zero(kmax), beta = Vec::Zero(kmax);

  auto fresh_direction = [&](Index k) {
    // random start orthogonal to the current Krylov basis
    for (int attempt = 0; attempt < 5; ++attempt) {
      Vec r = draw_normals(rng, d);
      for (int pass = 0; pass < 2; ++pass)
        if (k > 0) r -= q.leftCols(k) * (q.leftCols(k).transpose() * r);
      const double nr = r.norm();
      if (nr > 1e-8) return Vec(r / nr);
    }
    throw NumericalError("Lanczos could not find a new direction");
  };

  Eigen::SelfAdjointEigenSolver<Mat> ritz;
  double scale = 0.0;
  Index k = 0;
  bool converged = false;
  q.col(0) = fresh_direction(0);
  for (; k < kmax; ++k) {
    Vec w = h.apply(q.col(k));
    alpha[k] = q.col(k).dot(w);
    scale = std::max(scale, std::abs(alpha[k]));
    for (int pass = 0; pass < 2; ++pass) w -= q.leftCols(k + 1) * (q.leftCols(k + 1).transpose() * w);
    beta[k] = w.norm();

    const Index steps = k + 1;
    if (steps >= m) {
      Mat t = Mat::Zero(steps, steps);
      t.diagonal() = alpha.head(steps);
      for (Index i = 0; i + 1 < steps; ++i) t(i, i + 1) = t(i + 1, i) = beta[i];
      ritz.compute(t);
      const Vec theta = ritz.eigenvalues();
      const double thresh = options.tol * std::max(theta.cwiseAbs().maxCoeff(), 1e-300);
      bool ok = true;
      for (Index j = 0; j < m && ok; ++j)
        ok = std::abs(beta[k] * ritz.eigenvectors()(steps - 1, steps - 1 - j)) <= 0.1 * thresh;
      if (ok || steps == d) {
        converged = true;
        ++k;
        break;
      }
    }
    if (k + 1 < kmax) {
      if (beta[k] <= 1e-12 * std::max(scale, 1.0)) {
        beta[k] = 0.0;  // invariant subspace: restart in the orthogonal complement
        q.col(k + 1) = fresh_direction(k + 1);
      } else {
        q.col(k + 1) = w / beta[k];
      }
    }
  }
  if (!converged) {
    // use what we have; the residual check below decides
    const Index steps = k;
    Mat t = Mat::Zero(steps, steps);
    t.diagonal() = alpha.head(steps);
    for (Index i = 0; i + 1 < steps; ++i) t(i, i + 1) = t(i + 1, i) = beta[i];
    ritz.compute(t);
  }

  const Index steps = k;
  EigenPairs out;
  out.steps = steps;
  out.values.resize(m);
  out.vectors.resize(d, m);
  for (Index j = 0; j < m; ++j) {
    out.values[j] = ritz.eigenvalues()[steps - 1 - j];
    out.vectors.col(j) = q.leftCols(steps) * ritz.eigenvectors().col(steps - 1 - j);
  }
  // re-orthonormalize against rounding
  Eigen::HouseholderQR<Mat> qr(out.vectors);
  Mat qthin = qr.householderQ() * Mat::Identity(d, m);
  for (Index j = 0; j < m; ++j)
    if (qthin.col(j).dot(out.vectors.col(j)) < 0) qthin.col(j) *= -1.0;
  out.vectors = qthin;

  Mat hp(d, m);
  for (Index j = 0; j < m; ++j) hp.col(j) = h.apply(out.vectors.col(j));
  const double resid = (hp - out.vectors * out.values.asDiagonal()).norm();
  if (resid > options.tol * std::max(out.values.norm(), 1e-300) && resid > 1e-12)
    *failure = {steps, resid};
  return out;
}

}  // namespace

EigenPairs dominant_eigenpairs(const SymmetricOperator& h, Index m, const LanczosOptions& options) {
  const Index d = h.dim;
  require(m >= 1 && m <= d, "dominant_eigenpairs: need 1 <= m <= d");
  Index kmax = options.max_steps > 0 ? options.max_steps : 20 * m;
  kmax = std::min(d, std::max(kmax, m));
  // clustered spectra can need a larger Krylov space: grow it before giving up
  for (;;) {
    LanczosFailure failure{0, 0.0};
    EigenPairs out = lanczos_pass(h, m, kmax, options, &failure);
    if (failure.steps == 0) return out;
    if (kmax >= d) {
      std::ostringstream msg;
      msg << "Lanczos did not converge after " << failure.steps << " steps (residual "
          << failure.resid << ")";
      throw NumericalError(msg.str());
    }
    kmax = std::min(d, 4 * kmax);
  }
}

EigenPairs dominant_eigenpairs(const Mat& h, Index m, const LanczosOptions& options) {
  return dominant_eigenpairs(dense_operator(h), m, options);
}

// ---------------------------------------------------------------------------
// dimension detection

SpectrumDiagnostics detect_dimension(const Vec& h_desc, double tol) {
  return detect_dimension(h_desc, tol, h_desc.size(),
                          h_desc.size() ? h_desc[h_desc.size() - 1] : 0.0);
}

SpectrumDiagnostics detect_dimension(const Vec& h_desc, double tol, Index full_dim, double h_min) {
  require(tol > 0, "detect_dimension: tol must be positive");
  require(full_dim >= h_desc.size(), "detect_dimension: full_dim below spectrum length");
  for (Index i = 1; i < h_desc.size(); ++i)
    require(h_desc[i] <= h_desc[i - 1] + 1e-12 * std::max(1.0, std::abs(h_desc[i - 1])),
            "detect_dimension: spectrum must be sorted descending");

  SpectrumDiagnostics diag;
  diag.tol = tol;
  diag.h = h_desc.cwiseMax(0.0);
  const Index k = diag.h.size();
  diag.delta = Vec::Zero(std::max<Index>(k - 1, 0));
  if (full_dim < 2 || k < 1) return diag;

  // sorted spectrum: increments telescope, so their mean is the range over d-1
  const double mean = (diag.h[0] - std::max(h_min, 0.0)) / double(full_dim - 1);
  if (mean <= 0) return diag;
  for (Index i = 0; i + 1 < k; ++i) diag.delta[i] = std::abs(diag.h[i + 1] - diag.h[i]) / mean;

  if ((diag.h.array() > 0).count() < 2) return diag;
  for (Index i = 0; i + 1 < k; ++i) {
    if (diag.h[i] > 0 && diag.delta[i] > tol) {
      diag.detected_m = i + 1;
      break;
    }
  }
  return diag;
}

double fidelity(const Mat& p_exact, const Mat& p_est) {
  require(p_exact.rows() == p_est.rows(), "fidelity: dimension mismatch");
  // P Pᵀ (I - Q Qᵀ) = P (Pᵀ - (PᵀQ) Qᵀ)
  const Mat pq = p_exact.transpose() * p_est;
  const Mat inner = p_exact.transpose() - pq * p_est.transpose();
  return (p_exact * inner).norm();
}

// ---------------------------------------------------------------------------
// multilevel covariance

MlCovariance ml_covariance_init(const Mat& particles, const Vec& weights) {
  MlCovariance acc;
  acc.total = weighted_covariance(particles, weights);
  acc.mean = weighted_mean(particles, weights);
  acc.per_level_terms.push_back(acc.total);
  acc.level = 0;
  return acc;
}

MlCovariance ml_covariance_update(MlCovariance acc, const Mat& fine_particles,
                                  const Mat& coarse_slice, const Mat& transport,
                                  const Vec& fine_weights) {
  require(acc.level >= 0, "ml_covariance_update: accumulator not initialized");
  require(fine_particles.rows() == coarse_slice.rows(),
          "ml_covariance_update: fine and coarse particle counts differ");
  require(transport.rows() == fine_particles.cols() && transport.cols() == coarse_slice.cols(),
          "ml_covariance_update: transport shape mismatch");
  require(acc.total.rows() == coarse_slice.cols(),
          "ml_covariance_update: accumulator dimension mismatch");

  const Index n = coarse_slice.rows();
  const Vec uniform = Vec::Constant(n, 1.0 / double(n));
  const Mat cf = weighted_covariance(fine_particles, fine_weights);
  const Mat cc = weighted_covariance(coarse_slice, uniform);
  Mat inc = cf - transport * cc * transport.transpose();
  inc = 0.5 * (inc + inc.transpose());

  acc.total = transport * acc.total * transport.transpose() + inc;
  acc.total = 0.5 * (acc.total + acc.total.transpose());
  acc.mean = transport * acc.mean + weighted_mean(fine_particles, fine_weights) -
             transport * weighted_mean(coarse_slice, uniform);
  acc.per_level_terms.push_back(std::move(inc));
  ++acc.level;
  return acc;
}

Mat clamp_subspace_covariance(const Mat& sigma_raw) {
  return symmetric_function(sigma_raw, [](double x) { return std::clamp(x, 0.0, 1.0); });
}

ClisBasis build_basis(const Mat& covariance, const Vec& mean, const MPolicy& policy, int level,
                      const ClisOptions& options) {
  const Index d = covariance.rows();
  require(covariance.cols() == d && mean.size() == d, "build_basis: shape mismatch");
  const Mat h = Mat::Identity(d, d) - 0.5 * (covariance + covariance.transpose());

  ClisBasis basis;
  basis.level = level;

  // spectrum for detection
  Index want = policy.kind == MPolicy::Kind::Fixed ? policy.m : policy.m_max;
  want = std::min(want, d);
  EigenPairs dense;
  if (d <= options.dense_cap) {
    Eigen::SelfAdjointEigenSolver<Mat> es(h);
    if (es.info() != Eigen::Success) throw NumericalError("spectrum of H failed");
    basis.diagnostics = detect_dimension(es.eigenvalues().reverse(), policy.tol);
    dense.values = es.eigenvalues().reverse();
    dense.vectors = es.eigenvectors().rowwise().reverse();
  } else {
    const Index k = std::min(d, want + 2);
    const EigenPairs top = dominant_eigenpairs(h, k, options.lanczos);
    SymmetricOperator neg{d, [&h](const Vec& v) -> Vec { return -(h * v); }};
    const double h_min = -dominant_eigenpairs(neg, 1, options.lanczos).values[0];
    basis.diagnostics = detect_dimension(top.values, policy.tol, d, h_min);
  }
  basis.diagnostics.tol = policy.tol;

  Index m = 0;
  if (policy.kind == MPolicy::Kind::Fixed) {
    m = std::min(policy.m, d);
  } else if (basis.diagnostics.detected_m) {
    m = std::min(*basis.diagnostics.detected_m, d);
  } else if (basis.diagnostics.h.size() == 0 || basis.diagnostics.h[0] <= 1e-12) {
    m = 0;  // no likelihood information: plain pCN
  } else {
    m = std::min<Index>(policy.m_max, (basis.diagnostics.h.array() > 0).count());
    warn("cLIS dimension detection found no spike at level " + std::to_string(level) +
         "; using m_max = " + std::to_string(m));
  }

  basis.m = m;
  if (m == 0) {
    basis.P = Mat::Zero(d, 0);
    basis.eigvals = Vec::Zero(0);
    basis.sigma = Mat::Zero(0, 0);
    basis.mean = Vec::Zero(0);
    return basis;
  }
  EigenPairs pairs;
  if (dense.values.size() > 0) {
    pairs.values = dense.values.head(m);
    pairs.vectors = dense.vectors.leftCols(m);
  } else {
    pairs = dominant_eigenpairs(h, m, options.lanczos);
  }
  basis.P = pairs.vectors;
  basis.eigvals = pairs.values.unaryExpr([](double x) { return std::clamp(x, 0.0, 1.0 - 1e-8); });
  basis.sigma = clamp_subspace_covariance(basis.P.transpose() * covariance * basis.P);
  basis.mean = basis.P.transpose() * mean;
  return basis;
}

ClisBasis build_basis(const MlCovariance& ml, const MPolicy& policy, int level,
                      const ClisOptions& options) {
  return build_basis(ml.total, ml.mean, policy, level, options);
}

ClisBasis transport_clis(const GaussianHierarchy& hier, const ClisBasis& basis, int level_dst) {
  ClisBasis out = basis;
  out.level = level_dst;
  if (basis.m > 0) out.P = transport_basis(hier, basis.P, basis.level, level_dst);
  else out.P = Mat::Zero(hier.dim(level_dst), 0);
  return out;
}

void SubspaceCovariance::update(const Mat& fine_proj, const Mat& coarse_proj,
                                const Vec& fine_weights) {
  const Index n = coarse_proj.rows();
  require(fine_proj.rows() == n && fine_proj.cols() == total_.rows() &&
              coarse_proj.cols() == total_.rows(),
          "SubspaceCovariance::update: shape mismatch");
  if (total_.rows() == 0) return;
  const Vec uniform = Vec::Constant(n, 1.0 / double(n));
  total_ += weighted_covariance(fine_proj, fine_weights) - weighted_covariance(coarse_proj, uniform);
  total_ = 0.5 * (total_ + total_.transpose());
  mean_ += weighted_mean(fine_proj, fine_weights) - weighted_mean(coarse_proj, uniform);
}

}  // namespace mlsmc
