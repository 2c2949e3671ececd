#include "mlsmc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mlsmc {

void validate(const DiliParams& params) {
  require(params.b_m > 0 && params.b_m < 1, "b_m must lie in (0, 1)");
  require(params.b_perp > 0 && params.b_perp < 1, "b_perp must lie in (0, 1)");
  require(params.n_steps >= 1, "n_steps must be >= 1");
  require(params.adapt.target > 0 && params.adapt.target < 1, "adaptation target must lie in (0, 1)");
  require(params.adapt.burn_in_fraction >= 0 && params.adapt.burn_in_fraction <= 1,
          "burn-in fraction must lie in [0, 1]");
}

ProposalOperators::ProposalOperators(Index dim, double b_perp)
    : dim_(dim), c_perp_(std::sqrt(1.0 - b_perp * b_perp)), b_perp_(b_perp), p_(dim, 0) {
  require(b_perp > 0 && b_perp < 1, "b_perp must lie in (0, 1)");
}

ProposalOperators::ProposalOperators(const Mat& p, const Mat& sigma, double b_m, double b_perp,
                                     Vec mean_shift)
    : dim_(p.rows()), c_perp_(std::sqrt(1.0 - b_perp * b_perp)), b_perp_(b_perp), p_(p),
      mean_(std::move(mean_shift)) {
  require(b_m > 0 && b_m < 1 && b_perp > 0 && b_perp < 1, "step sizes must lie in (0, 1)");
  require(sigma.rows() == p.cols() && sigma.cols() == p.cols(), "Σ must be m × m");
  require(mean_.size() == 0 || mean_.size() == dim_, "mean shift dimension mismatch");
  if (p.cols() > 0) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (sigma + sigma.transpose()));
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition of Σ failed");
    const Vec lam = es.eigenvalues();
    const double tiny = 1e-10;
    if (lam.minCoeff() < -tiny || b_m * lam.maxCoeff() > 1.0 + tiny)
      throw NumericalError("I - b_mΣ is not PSD: Σ was not clamped");
    const Vec s_on = (b_m * lam).cwiseMax(0.0).cwiseMin(1.0);
    const Mat& v = es.eigenvectors();
    a_sub_ = v * (1.0 - s_on.array()).sqrt().matrix().asDiagonal() * v.transpose();
    b_sub_ = v * s_on.cwiseSqrt().asDiagonal() * v.transpose();
  }
  if (mean_.size() > 0 && mean_.squaredNorm() == 0.0) mean_.resize(0);
}

ProposalOperators::ProposalOperators(const ClisBasis& basis, const DiliParams& params,
                                     bool use_mean)
    : ProposalOperators(basis.P, basis.sigma, params.b_m, params.b_perp,
                        use_mean && basis.m > 0 ? Vec(basis.P * basis.mean) : Vec()) {}

ProposalOperators ProposalOperators::posterior_preserving(const Mat& p, const Mat& sigma,
                                                          double b_m, double b_perp) {
  require(p.cols() > 0, "posterior-preserving proposal needs a nonempty basis");
  ProposalOperators ops(p, sigma, b_m, b_perp);
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (sigma + sigma.transpose()));
  const Vec lam = es.eigenvalues();
  if (lam.minCoeff() <= 1e-12) throw NumericalError("posterior-preserving proposal: Σ is singular");
  const Mat& v = es.eigenvectors();
  ops.a_sub_ = std::sqrt(1.0 - b_m) * Mat::Identity(p.cols(), p.cols());
  ops.b_sub_ = v * (b_m * lam).cwiseSqrt().asDiagonal() * v.transpose();
  ops.sigma_inv_ = v * lam.cwiseInverse().asDiagonal() * v.transpose();
  return ops;
}

Vec ProposalOperators::apply_a(const Vec& x) const {
  if (p_.cols() == 0) return c_perp_ * x;
  const Vec c = p_.transpose() * x;
  return c_perp_ * x + p_ * (a_sub_ * c - c_perp_ * c);
}

Vec ProposalOperators::apply_b(const Vec& x) const {
  if (p_.cols() == 0) return b_perp_ * x;
  const Vec c = p_.transpose() * x;
  return b_perp_ * x + p_ * (b_sub_ * c - b_perp_ * c);
}

double ProposalOperators::log_correction(const Vec& current, const Vec& proposed) const {
  double out = mean_.size() == 0 ? 0.0 : mean_.dot(current - proposed);
  if (sigma_inv_.size() > 0) {
    // log N(u'; 0, I) - log N(u; 0, I) - [log N(c'; 0, Σ) - log N(c; 0, Σ)], c = Pᵀu
    const Vec c = p_.transpose() * current, cp = p_.transpose() * proposed;
    out += 0.5 * (c.squaredNorm() - cp.squaredNorm()) +
           0.5 * (cp.dot(sigma_inv_ * cp) - c.dot(sigma_inv_ * c));
  }
  return out;
}

Mat ProposalOperators::dense_a() const {
  Mat a(dim_, dim_);
  for (Index j = 0; j < dim_; ++j) a.col(j) = apply_a(Vec::Unit(dim_, j));
  return a;
}

Mat ProposalOperators::dense_b() const {
  Mat b(dim_, dim_);
  for (Index j = 0; j < dim_; ++j) b.col(j) = apply_b(Vec::Unit(dim_, j));
  return b;
}

Vec dili_propose(const ProposalOperators& ops, const Vec& u, NormalSource& noise) {
  require(u.size() == ops.dim(), "dili_propose: dimension mismatch");
  const Vec w = draw_normals(noise, ops.dim());
  if (ops.mean_shift().size() == 0) return ops.apply_a(u) + ops.apply_b(w);
  const Vec& m = ops.mean_shift();
  return m + ops.apply_a(u - m) + ops.apply_b(w);
}

bool metropolis_accept(double log_alpha, double loglike_proposal, RandomStream& rng) {
  const double unif = rng.uniform();
  return std::isfinite(loglike_proposal) && !std::isnan(log_alpha) && std::log(unif) < log_alpha;
}

MhOutcome mh_step(const LogLikelihood& model_loglike, const ProposalOperators& ops, const Vec& u,
                  double loglike_u, RandomStream& rng) {
  if (!std::isfinite(loglike_u))
    throw NumericalError("mh_step: non-finite log-likelihood at the current state");
  Vec prop = dili_propose(ops, u, rng);
  const double ll = model_loglike(prop);
  const double log_alpha = ll - loglike_u + ops.log_correction(u, prop);
  if (metropolis_accept(log_alpha, ll, rng)) return {std::move(prop), ll, true};
  return {u, loglike_u, false};
}

ChainResult mh_chain(const LogLikelihood& model_loglike, const ProposalOperators& ops,
                     const DiliParams& params, const Vec& u, double loglike_u, RandomStream& rng) {
  ChainResult r{u, loglike_u, 0, 0};
  for (int s = 0; s < params.n_steps; ++s) {
    MhOutcome o = mh_step(model_loglike, ops, r.state, r.loglike, rng);
    r.state = std::move(o.state);
    r.loglike = o.loglike;
    r.accepted += o.accepted ? 1 : 0;
    ++r.steps;
  }
  return r;
}

namespace {
double logit(double p) { return std::log(p / (1.0 - p)); }
double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }
// keep step sizes strictly inside (0, 1)
double bounded(double b) { return std::clamp(b, 1e-4, 1.0 - 1e-4); }

DiliParams shift_log_odds(const DiliParams& params, const AdaptConfig& cfg, double delta) {
  DiliParams out = params;
  out.b_m = bounded(expit(logit(params.b_m) + delta));
  if (cfg.tune_perp) out.b_perp = bounded(expit(logit(params.b_perp) + delta));
  return out;
}

double gain(long t) { return 1.0 / (10.0 + double(t)); }
}  // namespace

DiliParams adapt_step_sizes(const std::vector<bool>& history, const DiliParams& params, long t) {
  if (!params.adapt.enabled) return params;
  double delta = 0.0;
  for (bool accepted : history) delta += gain(t++) * ((accepted ? 1.0 : 0.0) - params.adapt.target);
  return shift_log_odds(params, params.adapt, delta);
}

DiliParams StepSizeAdapter::update(const std::vector<bool>& history, const DiliParams& params) {
  if (!config_.enabled) return params;
  double delta = 0.0;
  for (bool accepted : history) delta += gain(t_++) * ((accepted ? 1.0 : 0.0) - config_.target);
  return shift_log_odds(params, config_, delta);
}

DiliParams StepSizeAdapter::update(double rate, Index n, const DiliParams& params) {
  if (!config_.enabled || n <= 0) return params;
  double g = 0.0;
  for (Index j = 0; j < n; ++j) g += gain(t_++);
  return shift_log_odds(params, config_, g * (rate - config_.target));
}

}  // namespace mlsmc
