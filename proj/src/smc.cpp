#include "mlsmc/smc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace mlsmc {

// ---------------------------------------------------------------------------
// weights and resampling

Vec normalized_weights(const Vec& log_w) {
  require(log_w.size() > 0, "normalized_weights: empty weight vector");
  const double m = log_w.maxCoeff();
  if (!(m > -std::numeric_limits<double>::infinity()) || std::isnan(m))
    throw InvalidArgument("normalized_weights: all weights are zero");
  // vectorized exp clamps its argument, so -inf must be zeroed explicitly
  Vec w = (log_w.array() - m).exp().matrix();
  for (Index i = 0; i < w.size(); ++i)
    if (log_w[i] == -std::numeric_limits<double>::infinity()) w[i] = 0.0;
  return w / w.sum();
}

double ess(const Vec& weights) {
  require(weights.size() > 0 && (weights.array() >= 0).all(), "ess: weights must be nonnegative");
  const double s = weights.sum();
  if (s <= 0) throw InvalidArgument("ess: all weights are zero");
  return s * s / weights.squaredNorm();
}

std::vector<Index> resample(const Vec& weights, Index n_out, ResampleScheme scheme,
                            RandomStream& rng) {
  require(weights.size() > 0 && (weights.array() >= 0).all(),
          "resample: weights must be nonnegative");
  const double total = weights.sum();
  if (!(total > 0)) throw InvalidArgument("resample: all weights are zero");
  std::vector<double> cum(weights.size());
  std::partial_sum(weights.data(), weights.data() + weights.size(), cum.begin());
  for (double& c : cum) c /= total;
  cum.back() = 1.0;

  std::vector<Index> idx(n_out);
  auto locate = [&](double u) {
    auto it = std::upper_bound(cum.begin(), cum.end(), u);
    Index i = std::min<Index>(Index(it - cum.begin()), weights.size() - 1);
    while (weights[i] == 0.0 && i > 0) --i;  // never pick a zero-weight index at a tie
    return i;
  };
  if (scheme == ResampleScheme::Multinomial) {
    for (Index k = 0; k < n_out; ++k) idx[k] = locate(rng.uniform());
  } else {
    const double u0 = rng.uniform();
    for (Index k = 0; k < n_out; ++k) idx[k] = locate((u0 + double(k)) / double(n_out));
  }
  return idx;
}

// ---------------------------------------------------------------------------

namespace {
Mat stack_rows(const std::vector<Vec>& rows) {
  if (rows.empty()) return Mat();
  Mat m(Index(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(Index(i)) = rows[i].transpose();
  return m;
}

ClisBasis empty_basis(Index d, int level) {
  ClisBasis b;
  b.P = Mat::Zero(d, 0);
  b.eigvals = Vec::Zero(0);
  b.sigma = Mat::Zero(0, 0);
  b.mean = Vec::Zero(0);
  b.level = level;
  return b;
}
}  // namespace

Mat ParticleSystem::particle_matrix() const { return stack_rows(particles); }
Mat ParticleSystem::coarse_matrix() const { return stack_rows(coarse); }

ProposalOperators KernelState::operators() const {
  const bool shift = use_mean && basis.m > 0;
  return ProposalOperators(basis.P, basis.sigma, params.b_m, params.b_perp,
                           shift ? Vec(basis.P * basis.mean) : Vec());
}

MutationReport mutate(ParticleSystem& pop, const ForwardModel& model, KernelState& kernel,
                      StepSizeAdapter* adapter, int n_steps, std::uint64_t seed,
                      std::uint64_t stage, const RefreshHook& refresh, double temperature) {
  const int level = pop.level;
  const auto& hier = model.hierarchy();
  const Index n = pop.size();
  for (Index i = 0; i < n; ++i)
    if (!std::isfinite(pop.loglike[i]))
      throw NumericalError("mutate: particle with non-finite log-likelihood at level " +
                           std::to_string(level));

  const int burn = int(std::floor(kernel.params.adapt.burn_in_fraction * n_steps));
  if (adapter) adapter->start_stage();
  MutationReport report;
  double accepted_total = 0.0;
  for (int s = 0; s < n_steps; ++s) {
    const ProposalOperators ops = kernel.operators();
    require(ops.dim() == hier.dim(level), "mutate: kernel dimension does not match the level");
    std::vector<char> acc(std::size_t(n), 0);
    parallel_for(n, [&](Index i) {
      RandomStream rng = RandomStream::derive(
          seed, {stream::kMutation, std::uint64_t(level), stage, std::uint64_t(s), std::uint64_t(i)});
      Vec prop = dili_propose(ops, pop.particles[i], rng);
      Evaluation e = model.evaluate(level, hier.unwhiten(level, prop));
      const double log_alpha = temperature * (e.loglike - pop.loglike[i]) +
                               ops.log_correction(pop.particles[i], prop);
      if (metropolis_accept(log_alpha, e.loglike, rng)) {
        pop.particles[i] = std::move(prop);
        pop.loglike[i] = e.loglike;
        pop.rho_fine[i] = std::move(e.rho);
        acc[std::size_t(i)] = 1;
      }
    });
    pop.cost += double(n) * model.cost(level);
    const double rate = double(std::count(acc.begin(), acc.end(), 1)) / double(n);
    report.acceptance_per_step.push_back(rate);
    accepted_total += rate;
    if (s < burn) {
      if (adapter) kernel.params = adapter->update(rate, n, kernel.params);
      if (refresh) refresh(pop, kernel, s);
    }
  }
  report.acceptance = n_steps > 0 ? accepted_total / n_steps : 0.0;
  report.final_params = kernel.params;
  return report;
}

ParticleSystem init_level0(const ForwardModel& model, Index n0, KernelState& kernel,
                           StepSizeAdapter* adapter, const InitOptions& options,
                           std::uint64_t seed, const RefreshHook& refresh,
                           MutationReport* report) {
  require(n0 >= 2, "init_level0: need at least 2 particles");
  require(options.steps >= 0, "init_level0: J0 must be nonnegative");
  const auto& hier = model.hierarchy();
  const Index d = hier.dim(0);
  ParticleSystem sys;
  sys.level = 0;
  sys.particles.resize(std::size_t(n0));
  sys.rho_fine.resize(std::size_t(n0));
  sys.loglike.resize(n0);
  sys.log_g = Vec::Zero(n0);
  std::vector<char> ok(std::size_t(n0), 0);
  parallel_for(n0, [&](Index i) {
    RandomStream rng = RandomStream::derive(seed, {stream::kPrior, 0, std::uint64_t(i)});
    for (int t = 0; t < options.max_prior_tries; ++t) {
      Vec v = draw_normals(rng, d);
      Vec u = hier.unwhiten(0, v);
      if (!model.in_restriction(u)) continue;
      Evaluation e = model.evaluate(0, u);
      sys.particles[std::size_t(i)] = std::move(v);
      sys.loglike[i] = e.loglike;
      sys.rho_fine[std::size_t(i)] = std::move(e.rho);
      ok[std::size_t(i)] = 1;
      return;
    }
  });
  if (std::count(ok.begin(), ok.end(), 1) != n0)
    throw NumericalError("init_level0: prior draws keep leaving S_R; radius too small");
  sys.cost = double(n0) * model.cost(0);

  int stages = 0;
  if (options.tempering) {
    // next τ by bisection on the ESS of the incremental weights exp((τ' - τ) ℓ)
    const Vec& ll = sys.loglike;
    auto ess_at = [&](double dt) { return ess(normalized_weights(dt * ll)); };
    const double target = options.tempering_ess * double(n0);
    double tau = 0.0;
    while (tau < 1.0) {
      if (stages >= options.max_tempering_stages)
        throw NumericalError("level-0 tempering did not reach τ = 1");
      double next = 1.0;
      if (ess_at(1.0 - tau) < target) {
        double lo = 0.0, hi = 1.0 - tau;
        for (int it = 0; it < 60; ++it) {
          const double mid = 0.5 * (lo + hi);
          (ess_at(mid) >= target ? lo : hi) = mid;
        }
        next = tau + std::max(lo, 1e-12);
      }
      ++stages;
      RandomStream rs = RandomStream::derive(seed, {stream::kResample, 0, std::uint64_t(stages)});
      const auto idx = resample(normalized_weights((next - tau) * ll), n0, ResampleScheme::Multinomial, rs);
      ParticleSystem moved = sys;
      for (Index k = 0; k < n0; ++k) {
        const auto j = std::size_t(idx[std::size_t(k)]);
        moved.particles[std::size_t(k)] = sys.particles[j];
        moved.rho_fine[std::size_t(k)] = sys.rho_fine[j];
        moved.loglike[k] = sys.loglike[Index(j)];
      }
      sys = std::move(moved);
      tau = next;
      const int per_stage = options.tempering_steps > 0 ? options.tempering_steps : kernel.params.n_steps;
      mutate(sys, model, kernel, adapter, per_stage, seed,
             (std::uint64_t(1) << 32) + std::uint64_t(stages), nullptr, tau);
      if (refresh) refresh(sys, kernel, -1);
    }
  }

  MutationReport rep = mutate(sys, model, kernel, adapter, options.steps, seed, 0, refresh);
  rep.tempering_stages = stages;
  if (report) *report = rep;
  return sys;
}

ParticleSystem advance_level(const ParticleSystem& prev, const ForwardModel& model,
                             KernelState& kernel, StepSizeAdapter* adapter, Index n_out,
                             std::uint64_t seed, const AdvanceOptions& options,
                             MutationReport* report) {
  const int level = prev.level + 1;
  const auto& hier = model.hierarchy();
  if (level > hier.finest_level())
    throw InvalidArgument("advance_level: level " + std::to_string(level) + " out of range");
  require(n_out >= 2, "advance_level: need at least 2 particles");

  RandomStream rs = RandomStream::derive(seed, {stream::kResample, std::uint64_t(level)});
  const std::vector<Index> idx = resample(prev.weights(), n_out, options.scheme, rs);

  ParticleSystem pop;
  pop.level = prev.level;
  pop.particles.reserve(std::size_t(n_out));
  pop.rho_fine.reserve(std::size_t(n_out));
  pop.loglike.resize(n_out);
  pop.log_g = Vec::Zero(n_out);
  for (Index k = 0; k < n_out; ++k) {
    pop.particles.push_back(prev.particles[std::size_t(idx[std::size_t(k)])]);
    pop.rho_fine.push_back(prev.rho_fine[std::size_t(idx[std::size_t(k)])]);
    pop.loglike[k] = prev.loglike[idx[std::size_t(k)]];
  }
  MutationReport rep =
      mutate(pop, model, kernel, adapter, kernel.params.n_steps, seed, std::uint64_t(level));
  if (report) *report = rep;

  ParticleSystem out;
  out.level = level;
  out.cost = pop.cost;
  out.particles.resize(std::size_t(n_out));
  out.rho_fine.resize(std::size_t(n_out));
  out.rho_coarse = pop.rho_fine;
  out.coarse = pop.particles;
  out.loglike.resize(n_out);
  out.log_g.resize(n_out);
  if (options.track_discrepancy) out.discrepancy = Vec::Zero(n_out);
  parallel_for(n_out, [&](Index i) {
    RandomStream rng =
        RandomStream::derive(seed, {stream::kExtension, std::uint64_t(level), std::uint64_t(i)});
    const Vec uc = hier.unwhiten(level - 1, pop.particles[std::size_t(i)]);
    const Vec uf = hier.extend(level, uc, rng);
    Evaluation e = model.evaluate(level, uf);
    out.particles[std::size_t(i)] = hier.whiten(level, uf);
    out.loglike[i] = e.loglike;
    out.log_g[i] = e.loglike - pop.loglike[i];
    out.rho_fine[std::size_t(i)] = std::move(e.rho);
    if (options.track_discrepancy) {
      auto disc = model.discrepancy(level, uf);
      out.discrepancy[i] = disc ? *disc : 0.0;
    }
  });
  out.cost += double(n_out) * model.cost(level);
  if (!(out.log_g.maxCoeff() > -std::numeric_limits<double>::infinity()))
    throw WeightDegeneracy(level, "all incremental weights vanished at level " +
                                      std::to_string(level));
  return out;
}

// ---------------------------------------------------------------------------
// estimators

Functional first_observable() {
  return [](const Vec& rho) { return rho.size() ? rho[0] : 0.0; };
}

LevelTerm level_term(const ParticleSystem& sys, const Functional& phi) {
  const Index n = sys.size();
  require(n >= 2, "level_term: need at least 2 particles");
  LevelTerm t;
  const Vec w = sys.weights();
  Vec pf(n), pc = Vec::Zero(n);
  for (Index i = 0; i < n; ++i) pf[i] = phi(sys.rho_fine[std::size_t(i)]);
  const bool coarse = sys.level > 0;
  if (coarse)
    for (Index i = 0; i < n; ++i) pc[i] = phi(sys.rho_coarse[std::size_t(i)]);
  t.fine = w.dot(pf);
  t.coarse = coarse ? pc.mean() : 0.0;
  t.value = t.fine - t.coarse;
  t.log_normalizer = logsumexp(sys.log_g) - std::log(double(n));
  t.ess = ess(w);
  // linearization of the ratio estimator: ψ_i = (G_i/Ḡ)(φ_i - fine) - (φ^c_i - coarse)
  const Vec psi = (double(n) * w.array() * (pf.array() - t.fine)).matrix() -
                  (coarse ? Vec(pc.array() - t.coarse) : Vec(Vec::Zero(n)));
  t.variance = psi.squaredNorm() / double(n - 1);
  return t;
}

MlEstimate ml_expectation(const std::vector<ParticleSystem>& systems, const Functional& phi) {
  require(!systems.empty(), "ml_expectation: no levels");
  MlEstimate est;
  for (std::size_t l = 0; l < systems.size(); ++l) {
    require(systems[l].level == int(l), "ml_expectation: systems must be levels 0..L in order");
    const LevelTerm t = level_term(systems[l], phi);
    if (!std::isfinite(t.log_normalizer)) throw NumericalError("zero normalizer η(G)");
    est.increments.push_back(t.value);
    est.ess_per_level.push_back(t.ess);
    est.cost_ledger.push_back(systems[l].cost);
    est.value += t.value;
  }
  return est;
}

MlEstimate ml_normalizer(const std::vector<ParticleSystem>& systems) {
  require(!systems.empty(), "ml_normalizer: no levels");
  MlEstimate est;
  for (const auto& sys : systems) {
    const double ln = logsumexp(sys.log_g) - std::log(double(sys.size()));
    if (!std::isfinite(ln)) throw NumericalError("zero normalizer η(G)");
    est.increments.push_back(ln);
    est.ess_per_level.push_back(ess(sys.weights()));
    est.cost_ledger.push_back(sys.cost);
    est.log_value += ln;
  }
  est.value = std::exp(est.log_value);
  return est;
}

// ---------------------------------------------------------------------------
// driver

int default_cutoff(const GaussianHierarchy& hier, const std::vector<Index>& n_per_level) {
  int cut = -1;
  for (std::size_t l = 0; l < n_per_level.size() && int(l) <= hier.finest_level(); ++l) {
    if (n_per_level[l] > hier.dim(int(l)))
      cut = int(l);
    else
      break;
  }
  return cut;
}

namespace {

constexpr double kWeightSpread = 1e12;

LevelRecord make_record(const ParticleSystem& sys, const LevelTerm& t, const ForwardModel& model,
                        const MutationReport& rep, const KernelState& ks, double cumulative) {
  const auto& hier = model.hierarchy();
  LevelRecord r;
  r.level = sys.level;
  r.n = sys.size();
  r.d = hier.dim(sys.level);
  r.h = hier.layout(sys.level).h;
  r.ess = t.ess;
  r.increment = t.value;
  r.increment_variance = t.variance;
  r.log_normalizer = t.log_normalizer;
  r.cost = sys.cost;
  r.cumulative_cost = cumulative;
  r.acceptance = rep.acceptance;
  r.b_m = rep.final_params.b_m;
  r.b_perp = rep.final_params.b_perp;
  r.m = ks.basis.m;

  const Index n = sys.size();
  std::vector<double> finite;
  double r2 = 0;
  r.g_min = std::numeric_limits<double>::infinity();
  r.g_max = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double g = std::exp(sys.log_g[i]);
    if (std::isfinite(sys.log_g[i])) finite.push_back(sys.log_g[i]);
    r.g_min = std::min(r.g_min, g);
    r.g_max = std::max(r.g_max, g);
    if (sys.level > 0)
      r2 += (sys.rho_fine[std::size_t(i)] - sys.rho_coarse[std::size_t(i)]).squaredNorm();
  }
  if (!finite.empty()) {
    const double mean = std::accumulate(finite.begin(), finite.end(), 0.0) / double(finite.size());
    double var = 0;
    for (double x : finite) var += (x - mean) * (x - mean);
    r.mean_log_g = mean;
    r.var_log_g = finite.size() > 1 ? var / double(finite.size() - 1) : 0.0;
  }
  if (sys.level > 0) {
    // mean (G/Ḡ - 1)² = N Σw² - 1: invariant under rescaling G
    r.g_moment = std::max(0.0, double(n) * sys.weights().squaredNorm() - 1.0);
    r.rho_moment = r2 / double(n);
    if (sys.discrepancy.size() == n) r.discrepancy_moment = sys.discrepancy.mean();
    r.vhat = std::max({r.g_moment, r.rho_moment, r.discrepancy_moment});
  }
  return r;
}

}  // namespace

RunResult run_mlsmc(const ForwardModel& model, const std::vector<Index>& n_per_level,
                    const SamplerOptions& options, std::uint64_t seed, const Functional& phi) {
  require(!n_per_level.empty(), "run_mlsmc: empty schedule");
  const auto& hier = model.hierarchy();
  const int top = int(n_per_level.size()) - 1;
  require(top <= hier.finest_level(), "run_mlsmc: schedule deeper than the hierarchy");
  validate(options.params);
  const bool dili = options.kernel == KernelKind::Dili;

  RunResult result;
  result.cutoff_level =
      options.cutoff_level >= 0 ? std::min(options.cutoff_level, top) : default_cutoff(hier, n_per_level);
  result.cutoff_level = std::min(result.cutoff_level, top);
  if (dili && result.cutoff_level < 0)
    throw InvalidArgument("DILI needs N_0 > d_0 to estimate the cLIS");
  if (dili && n_per_level[std::size_t(result.cutoff_level)] <= hier.dim(result.cutoff_level))
    throw InvalidArgument("cLIS cutoff level needs N > d");

  KernelState ks;
  ks.params = options.params;
  ks.use_mean = options.use_mean_shift;
  ks.basis = empty_basis(hier.dim(0), 0);
  StepSizeAdapter adapter(options.params.adapt);
  StepSizeAdapter* adapt = options.params.adapt.enabled ? &adapter : nullptr;

  // level-0 burn-in: periodically rebuild the cLIS from the current population
  RefreshHook refresh;
  if (dili && options.level0_refreshes > 0) {
    const int burn = int(std::floor(options.params.adapt.burn_in_fraction * options.init.steps));
    const int every = std::max(1, burn / (options.level0_refreshes + 1));
    refresh = [&, every](const ParticleSystem& pop, KernelState& k, int step) {
      if (step >= 0 && (step + 1) % every != 0) return;  // step -1: after a tempering stage
      const Mat x = pop.particle_matrix();
      k.basis = build_basis(sample_covariance(x), x.colwise().mean().transpose(),
                            options.m_policy, 0, options.clis);
    };
  }

  using Clock = std::chrono::steady_clock;
  auto since = [](Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };
  auto t0 = Clock::now();
  MutationReport rep;
  ParticleSystem sys = init_level0(model, n_per_level[0], ks, adapt, options.init, seed, refresh, &rep);
  result.tempering_stages = rep.tempering_stages;

  MlCovariance ml;
  SubspaceCovariance sub;
  auto record_clis = [&](int level, bool transported) {
    ClisRecord c;
    c.level = level;
    c.n = sys.size();
    c.m = ks.basis.m;
    c.transported = transported;
    c.diagnostics = ks.basis.diagnostics;
    result.clis.push_back(std::move(c));
  };
  auto update_kernel = [&](int level) {
    if (!dili) {
      ks.basis = empty_basis(hier.dim(level), level);
      return;
    }
    const Vec w = sys.weights();
    if (level <= result.cutoff_level) {
      if (level == 0)
        ml = ml_covariance_init(sys.particle_matrix(), w);
      else
        ml = ml_covariance_update(std::move(ml), sys.particle_matrix(), sys.coarse_matrix(),
                                  transport_matrix(hier, level), w);
      ks.basis = build_basis(ml, options.m_policy, level, options.clis);
      if (level == result.cutoff_level)
        sub = SubspaceCovariance(ks.basis.P.transpose() * ml.total * ks.basis.P, ks.basis.mean);
      record_clis(level, false);
    } else {
      const Mat p_prev = ks.basis.P;
      ks.basis = transport_clis(hier, ks.basis, level);
      if (ks.basis.m > 0) {
        sub.update(sys.particle_matrix() * ks.basis.P, sys.coarse_matrix() * p_prev, w);
        ks.basis.sigma = clamp_subspace_covariance(sub.total());
        ks.basis.mean = sub.mean();
      }
      record_clis(level, true);
    }
  };

  double cumulative = sys.cost;
  LevelTerm last = level_term(sys, phi);
  LevelRecord rec0 = make_record(sys, last, model, rep, ks, cumulative);
  rec0.wall_s = since(t0);
  result.levels.push_back(rec0);
  auto absorb = [&](const LevelTerm& t) {
    result.expectation.increments.push_back(t.value);
    result.expectation.ess_per_level.push_back(t.ess);
    result.expectation.cost_ledger.push_back(sys.cost);
    result.expectation.value += t.value;
    result.normalizer.increments.push_back(t.log_normalizer);
    result.normalizer.ess_per_level.push_back(t.ess);
    result.normalizer.cost_ledger.push_back(sys.cost);
    result.normalizer.log_value += t.log_normalizer;
  };
  absorb(last);
  if (top > 0) update_kernel(0);

  for (int l = 1; l <= top; ++l) {
    const Index m_used = ks.basis.m;
    t0 = Clock::now();
    sys = advance_level(sys, model, ks, adapt, n_per_level[std::size_t(l)], seed, options.advance,
                        &rep);
    cumulative += sys.cost;
    last = level_term(sys, phi);
    LevelRecord r = make_record(sys, last, model, rep, ks, cumulative);
    r.m = m_used;
    // G_l is assumed bounded above and away from zero; report, don't stop
    if (!(r.g_min > 0.0) || r.g_max > kWeightSpread * r.g_min)
      warn("level " + std::to_string(l) +
           ": incremental weights include zeros or span more than 1e12 (see g_min/g_max)");
    r.wall_s = since(t0);
    result.levels.push_back(r);
    absorb(last);
    if (l < top) update_kernel(l);
  }

  result.normalizer.value = std::exp(result.normalizer.log_value);
  result.total_cost = cumulative;
  result.estimate = options.telescoping ? result.expectation.value : last.fine;
  return result;
}

}  // namespace mlsmc
