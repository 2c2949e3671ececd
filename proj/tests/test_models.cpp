#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mlsmc/models.hpp"
#include "test_util.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace mlsmc;

namespace {

double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const Index n = Index(x.size());
  double mx = 0, my = 0;
  for (Index i = 0; i < n; ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (Index i = 0; i < n; ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

std::shared_ptr<DiffusionModel> diffusion(const DiffusionConfig& cfg, int levels, const Vec& y) {
  auto hier = std::make_shared<BrownianHierarchy>(cfg.horizon, cfg.d0, levels);
  return std::make_shared<DiffusionModel>(cfg, hier, y);
}

}  // namespace

// ---------------------------------------------------------------------------
// diffusion

TEST_CASE("Euler–Maruyama: zero drift reproduces the driving path") {
  DiffusionConfig cfg;
  cfg.drift = DriftKind::Zero;
  RandomStream rng(1);
  const Vec path = draw_normals(rng, 40);
  CHECK(rel_err(euler_maruyama(path, 0.25, cfg), path) < 1e-15);
  cfg.p0 = 1.5;
  CHECK(rel_err(euler_maruyama(path, 0.25, cfg), Vec(path.array() + 1.5)) < 1e-15);
}

TEST_CASE("Euler–Maruyama: linear drift without noise is the explicit Euler recursion") {
  DiffusionConfig cfg;
  cfg.drift = DriftKind::Linear;
  cfg.drift_scale = 1.0;
  cfg.sigma = 0.0;
  cfg.p0 = 2.0;
  const double h = 0.1;
  RandomStream rng(2);
  const Vec p = euler_maruyama(draw_normals(rng, 30), h, cfg);
  for (Index i = 0; i < p.size(); ++i)
    CHECK(p[i] == doctest::Approx(std::pow(1.0 - h, double(i + 1)) * 2.0).epsilon(1e-13));
}

TEST_CASE("Euler–Maruyama rejects blow-up") {
  DiffusionConfig cfg;
  cfg.drift = DriftKind::Linear;
  cfg.drift_scale = -1e300;
  CHECK_THROWS_AS(euler_maruyama(Vec::Constant(5, 1.0), 1.0, cfg), NumericalError);
}

TEST_CASE("piecewise-constant interpolation uses the left grid value") {
  Vec p(3);
  p << 1.0, 2.0, 3.0;
  CHECK(interpolate_path(p, -1.0, 0.5, 0.0) == -1.0);
  CHECK(interpolate_path(p, -1.0, 0.5, 0.49) == -1.0);
  CHECK(interpolate_path(p, -1.0, 0.5, 0.5) == 1.0);
  CHECK(interpolate_path(p, -1.0, 0.5, 1.2) == 2.0);
  CHECK(interpolate_path(p, -1.0, 0.5, 5.0) == 3.0);
}

TEST_CASE("strong sup-norm error decays like h^(1/2)") {
  // self-refinement oracle: each level against a path 2^6 times finer on shared increments
  DiffusionConfig cfg;
  cfg.horizon = 1.0;
  cfg.d0 = 8;
  cfg.drift = DriftKind::Sine;
  cfg.drift_scale = 1.0;
  const int levels = 4, ref = levels - 1 + 6;
  const BrownianHierarchy hier(1.0, 8, ref + 1);
  RandomStream rng(3);
  const int samples = 200;
  std::vector<double> hs, err(levels, 0.0);
  const double hf = hier.spacing(ref);
  for (int s = 0; s < samples; ++s) {
    const Vec u = hier.sample_prior(ref, rng);
    const Vec pf = euler_maruyama(hier.grid_path(ref, u), hf, cfg);
    for (int l = 0; l < levels; ++l) {
      const Vec pl = euler_maruyama(hier.grid_path(l, u.head(hier.dim(l))), hier.spacing(l), cfg);
      double worst = 0.0;
      for (Index j = 0; j < pf.size(); ++j) {
        const double t = double(j + 1) * hf;
        worst = std::max(worst, std::abs(pf[j] - interpolate_path(pl, cfg.p0, hier.spacing(l), t)));
      }
      err[std::size_t(l)] += worst * worst / samples;
    }
  }
  for (int l = 0; l < levels; ++l) {
    hs.push_back(hier.spacing(l));
    err[std::size_t(l)] = std::sqrt(err[std::size_t(l)]);
  }
  const double rate = slope(hs, err);
  MESSAGE("sup-norm strong rate " << rate);
  CHECK(rate > 0.3);
  CHECK(rate < 0.7);
}

TEST_CASE("diffusion likelihood: residual formula, restriction and defaults") {
  const DiffusionConfig defaults;
  CHECK(defaults.horizon == 16.0);
  CHECK(defaults.num_obs == 16);
  CHECK(defaults.first_obs == 1.0);
  CHECK(defaults.noise_variance == 0.01);
  CHECK(defaults.d0 == 32);
  const auto times = defaults.obs_times();
  REQUIRE(times.size() == 16);
  for (int j = 0; j < 16; ++j) CHECK(times[std::size_t(j)] == doctest::Approx(1.0 + j));

  DiffusionConfig one = defaults;
  one.num_obs = 1;
  one.first_obs = 3.0;
  auto probe = diffusion(one, 2, Vec::Zero(1));
  RandomStream rng(4);
  const Vec u = probe->hierarchy().sample_prior(1, rng);
  const double g = probe->observe(1, u)[0];
  const double r = 0.37;
  auto model = diffusion(one, 2, Vec::Constant(1, g + r));
  CHECK(model->loglike(1, u) == doctest::Approx(-50.0 * r * r));
  auto exact = diffusion(one, 2, Vec::Constant(1, g));
  CHECK(exact->loglike(1, u) == 0.0);

  Vec outside = u;
  outside[0] = 1.01 * model->radius();
  CHECK(model->loglike(1, outside) == -std::numeric_limits<double>::infinity());
  CHECK(model->radius() == doctest::Approx(4.0 * std::sqrt(16.0)));

  DiffusionConfig off = defaults;
  off.first_obs = 0.3;
  CHECK_THROWS_AS(diffusion(off, 1, Vec::Zero(16)), InvalidArgument);
  CHECK_THROWS_AS(diffusion(defaults, 1, Vec::Zero(3)), InvalidArgument);
}

TEST_CASE("diffusion observables match an independent re-solve at every level") {
  const DiffusionConfig cfg;
  auto model = diffusion(cfg, 4, Vec::Zero(16));
  const auto& hier = model->brownian();
  RandomStream rng(5);
  const Vec u = hier.sample_prior(3, rng);
  for (int l = 0; l <= 3; ++l) {
    const Vec ul = u.head(hier.dim(l));
    const Vec p = euler_maruyama(hier.grid_path(l, ul), 16.0 / double(hier.dim(l)), cfg);
    const Vec rho = model->rho(l, ul);
    for (int j = 0; j < 16; ++j)
      CHECK(rho[j] == doctest::Approx(interpolate_path(p, cfg.p0, hier.spacing(l), 1.0 + j)));
    CHECK(model->cost(l) >= (l > 0 ? model->cost(l - 1) : 0.0));
  }
  // zero driving path and p0 = 0 with an odd drift: the solution stays at zero
  CHECK(model->rho(2, Vec::Zero(hier.dim(2))).norm() == 0.0);
}

TEST_CASE("diffusion discrepancy is the squared sup distance of consecutive interpolants") {
  const DiffusionConfig cfg;
  auto model = diffusion(cfg, 3, Vec::Zero(16));
  const auto& hier = model->brownian();
  RandomStream rng(6);
  const Vec u = hier.sample_prior(2, rng);
  const Vec pf = model->solve_path(2, u), pc = model->solve_path(1, u.head(hier.dim(1)));
  double worst = 0.0;
  const double hf = hier.spacing(2);
  for (Index j = 0; j <= pf.size(); ++j) {
    const double t = (double(j) + 0.5) * hf;
    worst = std::max(worst, std::abs(interpolate_path(pf, cfg.p0, hf, t) -
                                     interpolate_path(pc, cfg.p0, hier.spacing(1), t)));
  }
  REQUIRE(model->discrepancy(2, u).has_value());
  CHECK(*model->discrepancy(2, u) == doctest::Approx(worst * worst));
  CHECK_FALSE(model->discrepancy(0, u.head(hier.dim(0))).has_value());
}

TEST_CASE("observation files round-trip") {
  ObservationData d;
  d.model = "diffusion";
  d.level = 3;
  d.seed = 77;
  d.noise_variance = 0.01;
  d.values = Vec::LinSpaced(4, 0.1, 0.4);
  d.truth = Vec::LinSpaced(4, 0.0, 0.3);
  d.times = {1, 2, 3, 4};
  d.points = {{0.2, 0.3}};
  const auto path = (std::filesystem::temp_directory_path() / "mlsmc_obs_roundtrip.json").string();
  save_observations(d, path);
  const ObservationData e = load_observations(path);
  CHECK(e.model == d.model);
  CHECK(e.level == 3);
  CHECK(e.seed == 77);
  CHECK(e.values == d.values);
  CHECK(e.truth == d.truth);
  CHECK(e.times == d.times);
  CHECK(e.points == d.points);
  CHECK_THROWS_AS(load_observations(path + ".missing"), InvalidArgument);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// FEM and the elliptic model

TEST_CASE("FEM: manufactured solution converges at first order in the energy norm") {
  const double pi = M_PI;
  const auto source = [pi](double x, double y) {
    return 2.0 * pi * pi * std::sin(pi * x) * std::sin(pi * y);
  };
  const auto grad = [pi](double x, double y) -> std::array<double, 2> {
    return {pi * std::cos(pi * x) * std::sin(pi * y), pi * std::sin(pi * x) * std::cos(pi * y)};
  };
  std::vector<double> hs, errs;
  for (Index k : {10, 20, 40, 80}) {
    const FemSolver2D fem(k, source);
    const Mat p = fem.solve(Mat::Ones(k + 1, k + 1));
    hs.push_back(1.0 / double(k));
    errs.push_back(fem.energy_error(p, grad));
  }
  const double rate = slope(hs, errs);
  MESSAGE("energy-norm rate " << rate);
  CHECK(rate > 0.5);
  CHECK(rate < 2.0);
  CHECK(rate == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("FEM: unit source matches the Poisson series at nodes to second order") {
  // p(x,y) = Σ_{m,n odd} 16 / (π⁴ m n (m² + n²)) sin(mπx) sin(nπy)
  const auto series = [](double x, double y) {
    double s = 0.0;
    for (int m = 1; m < 400; m += 2)
      for (int n = 1; n < 400; n += 2)
        s += 16.0 / (std::pow(M_PI, 4) * m * n * (m * m + n * n)) * std::sin(m * M_PI * x) *
             std::sin(n * M_PI * y);
    return s;
  };
  const double centre = series(0.5, 0.5), quarter = series(0.5, 0.25);
  std::vector<double> hs, errs;
  for (Index k : {8, 16, 32}) {
    const FemSolver2D fem(k, [](double, double) { return 1.0; });
    const Mat p = fem.solve(Mat::Ones(k + 1, k + 1));
    hs.push_back(1.0 / double(k));
    errs.push_back(std::max(std::abs(p(k / 2, k / 2) - centre), std::abs(p(k / 2, k / 4) - quarter)));
  }
  CHECK(errs.back() < 2e-4);
  CHECK(slope(hs, errs) > 1.8);
}

TEST_CASE("FEM: scaling the permeability by c scales the solution by 1/c") {
  const EllipticConfig cfg;
  const FemSolver2D fem(12, [&cfg](double x, double y) { return cfg.source(x, y); });
  RandomStream rng(8);
  Mat kappa(13, 13);
  for (Index i = 0; i < 13; ++i)
    for (Index j = 0; j < 13; ++j) kappa(i, j) = std::exp(0.5 * rng.normal());
  const Mat p = fem.solve(kappa);
  for (double c : {0.1, 3.0, 250.0}) CHECK(rel_err(Mat(c * fem.solve(c * kappa)), p) < 1e-8);
}

TEST_CASE("stiffness is SPD on 50 restricted prior draws") {
  const EllipticConfig cfg;
  auto hier = std::make_shared<GridHierarchy2D>(cfg.k0, 2, cfg.sigma2, cfg.alpha);
  const EllipticModel model(cfg, hier, Vec::Zero(25), 1.0);
  RandomStream rng(9);
  int checked = 0;
  while (checked < 50) {
    const int level = checked % 2;
    const Vec u = hier->sample_prior(level, rng);
    if (!model.in_restriction(u)) continue;
    const Mat kappa = hier->grid_values(level, u).array().exp().matrix();
    const Mat a = Mat(model.solver(level).stiffness(kappa));
    CHECK(rel_err(a, Mat(a.transpose())) < 1e-14);
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
    ++checked;
  }
}

TEST_CASE("elliptic model: observation layout, zero source and misfit structure") {
  EllipticConfig cfg;
  const auto pts = cfg.obs_points();
  REQUIRE(pts.size() == 25);
  for (const auto& p : pts) {
    CHECK(p[0] >= 0.2 - 1e-12);
    CHECK(p[0] <= 0.6 + 1e-12);
    CHECK(p[1] >= 0.2 - 1e-12);
    CHECK(p[1] <= 0.6 + 1e-12);
  }
  CHECK(pts[1][1] - pts[0][1] == doctest::Approx(0.1));
  CHECK(cfg.k0 == 10);

  auto hier = std::make_shared<GridHierarchy2D>(cfg.k0, 2, cfg.sigma2, cfg.alpha);
  RandomStream rng(10);
  const Vec u = hier->sample_prior(1, rng);
  {
    EllipticConfig none = cfg;
    none.bumps.clear();
    const EllipticModel zero(none, hier, Vec::Zero(25), 1.0);
    CHECK(zero.rho(1, u).norm() == 0.0);
  }
  const EllipticModel probe(cfg, hier, Vec::Zero(25), 1.0);
  const Vec g = probe.rho(1, u);
  const double s2 = 0.04;
  const EllipticModel exact(cfg, hier, g, s2);
  CHECK(exact.loglike(1, u) == 0.0);
  Vec y = g;
  y[7] += 0.3;
  const EllipticModel off(cfg, hier, y, s2);
  CHECK(off.loglike(1, u) == doctest::Approx(-0.3 * 0.3 / (2.0 * s2)));
  CHECK(gaussian_loglike(y, g, s2) == doctest::Approx(off.loglike(1, u)));

  // ρ of a coarse level equals an independent coarse solve at the same state
  const Vec uc = u.head(hier->dim(0));
  CHECK(rel_err(probe.rho(0, uc), probe.observe(probe.solve(0, uc))) < 1e-15);
  const FemSolver2D fresh(hier->cells(0), [&cfg](double x, double yy) { return cfg.source(x, yy); });
  const Mat p0 = fresh.solve(hier->grid_values(0, uc).array().exp().matrix());
  CHECK(rel_err(probe.rho(0, uc), probe.observe(p0)) < 1e-12);
  CHECK(probe.cost(1) > probe.cost(0));

  Vec outside = u;
  outside[0] = 1.01 * probe.radius();
  CHECK(probe.loglike(1, outside) == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(EllipticModel(cfg, hier, Vec::Zero(24), 1.0), InvalidArgument);
}

TEST_CASE("level observables agree across levels on smooth states") {
  // ρ_l(u) for the lift of a coarse state converges as the mesh refines
  const EllipticConfig cfg;
  auto hier = std::make_shared<GridHierarchy2D>(cfg.k0, 4, cfg.sigma2, cfg.alpha);
  const EllipticModel model(cfg, hier, Vec::Zero(25), 1.0);
  RandomStream rng(11);
  const Vec u0 = hier->sample_prior(0, rng);
  Vec u = u0;
  std::vector<Vec> rho{model.rho(0, u)};
  for (int l = 1; l <= 3; ++l) {
    u = hier->lift(l, u);
    rho.push_back(model.rho(l, u));
  }
  const double d1 = (rho[1] - rho[0]).norm(), d2 = (rho[2] - rho[1]).norm(),
               d3 = (rho[3] - rho[2]).norm();
  CHECK(d2 < d1);
  CHECK(d3 < d2);
}
