#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mlsmc/smc.hpp"
#include "test_util.hpp"
#include "toy_models.hpp"

#include <cmath>
#include <limits>
#include <map>

using namespace mlsmc;
using mlsmc_test::BinTableModel;
using mlsmc_test::ConjugateModel;

namespace {

std::vector<int> counts(const std::vector<Index>& idx, Index n) {
  std::vector<int> c(std::size_t(n), 0);
  for (Index i : idx) ++c[std::size_t(i)];
  return c;
}

ParticleSystem fake_system(int level, const Vec& log_g, const Vec& fine, const Vec& coarse) {
  ParticleSystem s;
  s.level = level;
  s.log_g = log_g;
  s.loglike = Vec::Zero(log_g.size());
  for (Index i = 0; i < log_g.size(); ++i) {
    s.particles.push_back(Vec::Zero(1));
    s.rho_fine.push_back(Vec::Constant(1, fine[i]));
    if (level > 0) s.rho_coarse.push_back(Vec::Constant(1, coarse[i]));
  }
  return s;
}

}  // namespace

TEST_CASE("ESS examples") {
  CHECK(ess(Vec::Ones(4)) == doctest::Approx(4.0));
  CHECK(ess(Vec::Unit(4, 2)) == doctest::Approx(1.0));
  CHECK(ess(Vec::LinSpaced(3, 1, 3)) == doctest::Approx(36.0 / 14.0));
  CHECK(ess(7.0 * Vec::LinSpaced(3, 1, 3)) == doctest::Approx(36.0 / 14.0));
  CHECK_THROWS_AS(ess(Vec::Zero(3)), InvalidArgument);
  CHECK_THROWS_AS(ess(Vec::Constant(2, -1.0)), InvalidArgument);
}

TEST_CASE("normalized weights tolerate -inf and huge offsets") {
  Vec lw(3);
  lw << 1000.0, -std::numeric_limits<double>::infinity(), 1000.0 + std::log(3.0);
  const Vec w = normalized_weights(lw);
  CHECK(w[0] == doctest::Approx(0.25));
  CHECK(w[1] == 0.0);
  CHECK(w[2] == doctest::Approx(0.75));
  CHECK_THROWS_AS(normalized_weights(Vec::Constant(2, -std::numeric_limits<double>::infinity())),
                  InvalidArgument);
}

TEST_CASE("systematic resampling of weights (1, 2, 3) is exact") {
  Vec w(3);
  w << 1, 2, 3;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    RandomStream rng(seed);
    CHECK(counts(resample(w, 6, ResampleScheme::Systematic, rng), 3) == std::vector<int>{1, 2, 3});
  }
}

TEST_CASE("multinomial resampling frequencies and zero weights") {
  Vec w(4);
  w << 0.1, 0.0, 0.6, 0.3;
  RandomStream rng(17);
  const Index n = 200000;
  const auto c = counts(resample(w, n, ResampleScheme::Multinomial, rng), 4);
  CHECK(c[1] == 0);
  for (int i : {0, 2, 3}) {
    const double p = w[i];
    CHECK(std::abs(c[std::size_t(i)] / double(n) - p) < 4.0 * std::sqrt(p * (1 - p) / double(n)));
  }
  RandomStream r2(3);
  for (auto scheme : {ResampleScheme::Multinomial, ResampleScheme::Systematic}) {
    const auto idx = resample(Vec::Unit(5, 4), 100, scheme, r2);
    CHECK(counts(idx, 5)[4] == 100);
  }
  CHECK_THROWS_AS(resample(Vec::Zero(3), 3, ResampleScheme::Systematic, r2), InvalidArgument);
}

TEST_CASE("level term: weighted ratio, coarse mean and G-scale invariance") {
  Vec log_g(4), fine(4), coarse(4);
  log_g << 0.0, std::log(2.0), std::log(3.0), std::log(4.0);
  fine << 1.0, 2.0, 3.0, 4.0;
  coarse << 0.5, 0.5, 1.0, 2.0;
  const Functional phi = first_observable();
  const LevelTerm t = level_term(fake_system(1, log_g, fine, coarse), phi);
  CHECK(t.fine == doctest::Approx(30.0 / 10.0));
  CHECK(t.coarse == doctest::Approx(1.0));
  CHECK(t.value == doctest::Approx(2.0));
  CHECK(t.log_normalizer == doctest::Approx(std::log(2.5)));
  CHECK(t.ess == doctest::Approx(100.0 / 30.0));

  const LevelTerm s = level_term(fake_system(1, (log_g.array() + 37.0).matrix(), fine, coarse), phi);
  CHECK(s.value == doctest::Approx(t.value));
  CHECK(s.variance == doctest::Approx(t.variance));
  CHECK(s.log_normalizer == doctest::Approx(t.log_normalizer + 37.0));

  const LevelTerm z = level_term(fake_system(0, Vec::Zero(4), fine, coarse), phi);
  CHECK(z.coarse == 0.0);
  CHECK(z.value == doctest::Approx(2.5));
}

TEST_CASE("ML estimators sum the per-level terms") {
  const Functional phi = first_observable();
  std::vector<ParticleSystem> sys;
  sys.push_back(fake_system(0, Vec::Zero(3), Vec::LinSpaced(3, 1, 3), Vec()));
  sys.push_back(fake_system(1, Vec::LinSpaced(3, 0, 1), Vec::LinSpaced(3, 2, 4), Vec::Ones(3)));
  const MlEstimate e = ml_expectation(sys, phi);
  REQUIRE(e.increments.size() == 2);
  CHECK(e.value == doctest::Approx(e.increments[0] + e.increments[1]));
  CHECK(e.increments[0] == doctest::Approx(level_term(sys[0], phi).value));
  const MlEstimate z = ml_normalizer(sys);
  CHECK(z.log_value == doctest::Approx(level_term(sys[1], phi).log_normalizer));
  CHECK(z.value == doctest::Approx(std::exp(z.log_value)));

  std::vector<ParticleSystem> out_of_order{sys[1], sys[0]};
  CHECK_THROWS_AS(ml_expectation(out_of_order, phi), InvalidArgument);
}

TEST_CASE("level-0 population targets the conjugate posterior") {
  const ConjugateModel model(1.0, 0.25);
  KernelState ks;
  ks.basis.P = Mat::Zero(1, 0);
  ks.basis.sigma = Mat::Zero(0, 0);
  ks.params.b_perp = 0.5;
  StepSizeAdapter adapter(ks.params.adapt);
  InitOptions init;
  init.steps = 30;
  MutationReport rep;
  const ParticleSystem sys = init_level0(model, 20000, ks, &adapter, init, 99, nullptr, &rep);
  CHECK(rep.tempering_stages >= 1);
  std::vector<double> x;
  for (const Vec& v : sys.particles) x.push_back(v[0]);
  const double m = mlsmc_test::mean(x);
  double var = 0.0;
  for (double v : x) var += (v - m) * (v - m);
  var /= double(x.size() - 1);
  // the population is correlated through resampling, so allow a few standard errors more
  CHECK(std::abs(m - model.posterior_mean()) < 6.0 * std::sqrt(model.posterior_var() / 20000.0));
  CHECK(var == doctest::Approx(model.posterior_var()).epsilon(0.05));
  CHECK((sys.log_g.array() == 0.0).all());
  CHECK(rep.acceptance > 0.1);
}

TEST_CASE("level-independent model: higher increments vanish exactly") {
  const ConjugateModel model(0.5, 0.5, 3);
  for (KernelKind kind : {KernelKind::Pcn, KernelKind::Dili}) {
    SamplerOptions o = mlsmc_test::toy_options(kind);
    const RunResult r = run_mlsmc(model, {400, 300, 200}, o, 5);
    REQUIRE(r.expectation.increments.size() == 3);
    CHECK(r.expectation.increments[1] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(r.expectation.increments[2] == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(r.normalizer.log_value == doctest::Approx(0.0));
    CHECK(r.estimate == doctest::Approx(r.expectation.increments[0]));
  }
}

TEST_CASE("single-level SMC estimate targets the finest posterior") {
  const BinTableModel model(4);
  SamplerOptions o = mlsmc_test::toy_options(KernelKind::Pcn);
  o.telescoping = false;
  std::vector<double> est;
  for (int rep = 0; rep < 40; ++rep)
    est.push_back(run_mlsmc(model, {500, 500, 500}, o, 300 + std::uint64_t(rep)).estimate);
  CHECK(std::abs(mlsmc_test::mean(est) - model.exact_mean(2)) < 3.0 * mlsmc_test::std_error(est));
  // same run, telescoping on: a different combination of the same populations
  o.telescoping = true;
  const RunResult ml = run_mlsmc(model, {500, 500, 500}, o, 300);
  o.telescoping = false;
  const RunResult sl = run_mlsmc(model, {500, 500, 500}, o, 300);
  CHECK(ml.total_cost == sl.total_cost);
  CHECK(ml.expectation.value == sl.expectation.value);
  CHECK(sl.estimate != ml.estimate);
}

TEST_CASE("results do not depend on the worker count") {
  const BinTableModel model(11);
  const SamplerOptions o = mlsmc_test::toy_options(KernelKind::Dili);
  set_worker_count(1);
  const RunResult a = run_mlsmc(model, {300, 200, 100}, o, 21);
  set_worker_count(4);
  const RunResult b = run_mlsmc(model, {300, 200, 100}, o, 21);
  set_worker_count(0);
  CHECK(a.estimate == b.estimate);
  CHECK(a.normalizer.log_value == b.normalizer.log_value);
  CHECK(a.total_cost == b.total_cost);
  const RunResult c = run_mlsmc(model, {300, 200, 100}, o, 22);
  CHECK(a.estimate != c.estimate);
}

TEST_CASE("vanishing incremental weights raise WeightDegeneracy") {
  // level 1 rejects every state: S_R shrinks to nothing
  class Vanishing final : public ForwardModel {
   public:
    Vanishing() {
      hier_ = std::make_shared<KarhunenLoeveHierarchy>(Vec::Ones(2), std::vector<Index>{1, 2});
      radius_ = std::numeric_limits<double>::infinity();
    }
    const GaussianHierarchy& hierarchy() const override { return *hier_; }
    Evaluation evaluate(int level, const Vec& u) const override {
      return {level == 0 ? 0.0 : -std::numeric_limits<double>::infinity(), u.head(1)};
    }
    double cost(int) const override { return 1.0; }
    Index observable_dim() const override { return 1; }
    std::string name() const override { return "vanishing"; }

   private:
    std::shared_ptr<KarhunenLoeveHierarchy> hier_;
  } model;
  SamplerOptions o = mlsmc_test::toy_options(KernelKind::Pcn);
  try {
    run_mlsmc(model, {50, 50}, o, 1);
    FAIL("expected WeightDegeneracy");
  } catch (const WeightDegeneracy& e) {
    CHECK(e.level() == 1);
  }
}

TEST_CASE("schedule and cutoff validation") {
  const BinTableModel model(4);
  const SamplerOptions dili = mlsmc_test::toy_options(KernelKind::Dili);
  CHECK_THROWS_AS(run_mlsmc(model, {}, dili, 1), InvalidArgument);
  CHECK_THROWS_AS(run_mlsmc(model, {10, 10, 10, 10}, dili, 1), InvalidArgument);
  // N_0 must exceed d_0 for the cLIS
  CHECK_THROWS_AS(run_mlsmc(model, {1, 10}, dili, 1), InvalidArgument);
  CHECK(default_cutoff(model.hierarchy(), {10, 10, 2}) == 1);
  CHECK(default_cutoff(model.hierarchy(), {1, 10, 10}) == -1);
  CHECK(default_cutoff(model.hierarchy(), {10, 10, 10}) == 2);
}

TEST_CASE("enumeration toy: ML expectation and normalizer are unbiased") {
  const BinTableModel model(2024);
  const double exact = model.exact_mean(2);
  const double exact_z = model.exact_normalizer(2);
  for (KernelKind kind : {KernelKind::Pcn, KernelKind::Dili}) {
    const SamplerOptions o = mlsmc_test::toy_options(kind);
    std::vector<double> est, z;
    for (int rep = 0; rep < 100; ++rep) {
      const RunResult r = run_mlsmc(model, {1000, 1000, 1000}, o, 1000 + std::uint64_t(rep));
      est.push_back(r.estimate);
      z.push_back(r.normalizer.value);
    }
    CHECK(std::abs(mlsmc_test::mean(est) - exact) < 3.0 * mlsmc_test::std_error(est));
    CHECK(std::abs(mlsmc_test::mean(z) - exact_z) < 3.0 * mlsmc_test::std_error(z));
    // and the estimates are informative, not just noisy
    CHECK(mlsmc_test::std_error(est) < 0.01);
  }
}
