// Acceptance checks: `acceptance --criterion N [--out DIR]` prints one
// "CRITERION N: PASS|FAIL ..." line and exits nonzero on failure.

#include <CLI11.hpp>

#include "mlsmc/harness.hpp"
#include "mlsmc/kernels.hpp"
#include "test_util.hpp"
#include "toy_models.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#ifndef MLSMC_SOURCE_DIR
#define MLSMC_SOURCE_DIR "."
#endif

using namespace mlsmc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
  json data = json::object();
};

double median(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << x;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1, 2: synthetic cLIS study

ClisDemoConfig demo_config() {
  ClisDemoConfig c;  // d = 100, m = 10, 20 targets, N ∈ {100, 150, 200, 250, 400}, TOL = 10
  return c;
}

Outcome criterion_1() {
  const ClisDemoConfig cfg = demo_config();
  const auto t0 = Clock::now();
  const auto rows = run_clis_demo(cfg, 1);
  const double wall = seconds_since(t0);
  int hits = 0, total = 0;
  for (const auto& r : rows)
    if (r.n_samples == 250) {
      ++total;
      if (r.detected_m && *r.detected_m == cfg.m) ++hits;
    }
  Outcome o;
  o.pass = hits >= 18 && total == 20 && wall < 30.0;
  o.detail = "m = 10 detected for " + std::to_string(hits) + "/" + std::to_string(total) +
             " targets at N = 250 in " + fmt(wall, 3) + " s";
  o.data = {{"hits", hits}, {"targets", total}, {"wall_s", wall}};
  return o;
}

Outcome criterion_2() {
  const ClisDemoConfig cfg = demo_config();
  const auto rows = run_clis_demo(cfg, 1);
  std::vector<double> med;
  for (Index n : cfg.sample_sizes) {
    std::vector<double> f;
    for (const auto& r : rows)
      if (r.n_samples == n) f.push_back(r.fidelity);
    med.push_back(median(f));
  }
  bool decreasing = true;
  for (std::size_t i = 1; i < med.size(); ++i) decreasing = decreasing && med[i] < med[i - 1];
  Outcome o;
  o.pass = decreasing && med.back() < 0.5 * med.front();
  std::string list;
  for (std::size_t i = 0; i < med.size(); ++i)
    list += (i ? ", " : "") + std::to_string(cfg.sample_sizes[i]) + ":" + fmt(med[i], 3);
  o.detail = "median fidelity " + list + (decreasing ? " (strictly decreasing)" : " (NOT decreasing)");
  o.data = {{"sample_sizes", cfg.sample_sizes}, {"median_fidelity", med}};
  return o;
}

// ---------------------------------------------------------------------------
// 3: DILI operator algebra

Mat random_sigma(Index m, RandomStream& rng) {
  const Mat q = random_orthonormal(m, m, rng);
  Vec lam(m);
  for (Index i = 0; i < m; ++i) lam[i] = rng.uniform();
  return q * lam.asDiagonal() * q.transpose();
}

double log_normal_pdf(double x, double mean, double var) {
  return -0.5 * (x - mean) * (x - mean) / var - 0.5 * std::log(2.0 * M_PI * var);
}

Outcome criterion_3() {
  RandomStream rng(3);

  // (a) A² + B² = I on 100 random bases, d ≤ 64
  double worst_ab = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index d = 1 + Index(rng.uniform() * 64.0);
    const Index m = 1 + Index(rng.uniform() * double(std::min<Index>(d, 12)));
    const Mat p = random_orthonormal(d, std::min(m, d), rng);
    const ProposalOperators ops(p, random_sigma(p.cols(), rng), 0.05 + 0.9 * rng.uniform(),
                                0.05 + 0.9 * rng.uniform());
    const Mat a = ops.dense_a(), b = ops.dense_b();
    worst_ab = std::max(worst_ab, (a * a + b * b - Mat::Identity(d, d)).norm());
  }

  // (b) 10⁶ MH steps on a Gaussian posterior in d = 16: moments of the chain
  // in the posterior eigenbasis, z-scores from 1000 batch means
  const Index d = 16, m = 4;
  const Mat p = random_orthonormal(d, m, rng);
  Vec spike(m);
  spike << 30.0, 10.0, 3.0, 1.0;
  const Mat prec_like = p * spike.asDiagonal() * p.transpose();
  const Mat post_cov = (Mat::Identity(d, d) + prec_like).inverse();
  Eigen::SelfAdjointEigenSolver<Mat> es(post_cov);
  const Mat q = es.eigenvectors();
  const Vec lam = es.eigenvalues();
  const Mat sigma = p.transpose() * post_cov * p;
  const ProposalOperators ops(p, sigma, 0.6, 0.4);
  const LogLikelihood ll = [&prec_like](const Vec& u) { return -0.5 * u.dot(prec_like * u); };
  const long steps = 1000000, batches = 1000, per = steps / batches;
  Vec u = Vec::Zero(d);
  double l = ll(u);
  for (int s = 0; s < 2000; ++s) {  // burn-in
    const MhOutcome mo = mh_step(ll, ops, u, l, rng);
    u = mo.state;
    l = mo.loglike;
  }
  Mat bm1 = Mat::Zero(d, batches), bm2 = Mat::Zero(d, batches);
  long accepted = 0;
  for (long s = 0; s < steps; ++s) {
    const MhOutcome mo = mh_step(ll, ops, u, l, rng);
    accepted += mo.accepted;
    u = mo.state;
    l = mo.loglike;
    const Vec w = q.transpose() * u;
    bm1.col(s / per) += w / double(per);
    bm2.col(s / per) += (w.array().square().matrix() - lam) / double(per);
  }
  double worst_z = 0.0;
  for (const Mat* bm : {&bm1, &bm2})
    for (Index i = 0; i < d; ++i) {
      const Vec row = bm->row(i).transpose();
      const double mu = row.mean();
      const double se = std::sqrt((row.array() - mu).square().sum() / double(batches - 1) /
                                  double(batches));
      worst_z = std::max(worst_z, std::abs(mu) / se);
    }

  // (c) detailed balance of the discretised kernel on a grid, random parameters
  double worst_db = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 41;
    const Vec x = Vec::LinSpaced(n, -4.0, 4.0);
    const double dx = x[1] - x[0];
    Vec loglike(n);
    for (int i = 0; i < n; ++i) loglike[i] = -3.0 * rng.uniform();
    const double ubar = rep % 2 ? rng.uniform() - 0.5 : 0.0;
    const ProposalOperators op1(Mat::Ones(1, 1), Mat::Constant(1, 1, 0.1 + 0.9 * rng.uniform()),
                                0.05 + 0.9 * rng.uniform(), 0.5, Vec::Constant(1, ubar));
    const double a = op1.dense_a()(0, 0), b = op1.dense_b()(0, 0);
    Mat k = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      double off = 0.0;
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        const double qij = std::exp(log_normal_pdf(x[j], ubar + a * (x[i] - ubar), b * b)) * dx;
        const double log_alpha =
            loglike[j] - loglike[i] +
            op1.log_correction(Vec::Constant(1, x[i]), Vec::Constant(1, x[j]));
        k(i, j) = qij * std::min(1.0, std::exp(log_alpha));
        off += k(i, j);
      }
      k(i, i) = 1.0 - off;
    }
    Vec pi(n);
    for (int i = 0; i < n; ++i) pi[i] = std::exp(log_normal_pdf(x[i], 0.0, 1.0) + loglike[i]);
    const Mat flow = pi.asDiagonal() * k;
    worst_db = std::max(worst_db, (flow - flow.transpose()).cwiseAbs().maxCoeff() /
                                      flow.cwiseAbs().maxCoeff());
  }

  Outcome o;
  o.pass = worst_ab < 1e-10 && worst_z < 4.0 && worst_db < 1e-8;
  o.detail = "max |A²+B²-I| " + fmt(worst_ab, 3) + ", max moment z " + fmt(worst_z, 3) +
             " (acceptance " + fmt(double(accepted) / double(steps), 3) +
             "), detailed-balance residual " + fmt(worst_db, 3);
  o.data = {{"ab_residual", worst_ab}, {"max_z", worst_z}, {"detailed_balance", worst_db}};
  return o;
}

// ---------------------------------------------------------------------------
// 4: enumeration toy

Outcome criterion_4() {
  const mlsmc_test::BinTableModel model(2024);
  const double exact = model.exact_mean(2), exact_z = model.exact_normalizer(2);
  Outcome o;
  o.pass = true;
  for (KernelKind kind : {KernelKind::Pcn, KernelKind::Dili}) {
    const SamplerOptions opts = mlsmc_test::toy_options(kind);
    std::vector<double> est, z;
    for (int rep = 0; rep < 200; ++rep) {
      const RunResult r = run_mlsmc(model, {1000, 1000, 1000}, opts, 5000 + std::uint64_t(rep));
      est.push_back(r.estimate);
      z.push_back(r.normalizer.value);
    }
    const double ze = (mlsmc_test::mean(est) - exact) / mlsmc_test::std_error(est);
    const double zz = (mlsmc_test::mean(z) - exact_z) / mlsmc_test::std_error(z);
    const bool ok = std::abs(ze) < 3.0 && std::abs(zz) < 3.0;
    o.pass = o.pass && ok;
    const std::string name = kind == KernelKind::Pcn ? "pcn" : "dili";
    o.detail += (o.detail.empty() ? "" : "; ") + name + ": expectation z " + fmt(ze, 3) +
                ", normalizer z " + fmt(zz, 3);
    o.data[name] = {{"expectation_z", ze}, {"normalizer_z", zz}, {"exact", exact},
                    {"mean", mlsmc_test::mean(est)}};
  }
  return o;
}

// ---------------------------------------------------------------------------
// 5: hierarchy identities

Mat dense_factor(const GaussianHierarchy& h, int level) {
  const Index d = h.dim(level);
  Mat l(d, d);
  for (Index j = 0; j < d; ++j) l.col(j) = h.unwhiten(level, Vec::Unit(d, j));
  return l;
}

Mat dense_inverse_factor(const GaussianHierarchy& h, int level) {
  const Index d = h.dim(level);
  Mat w(d, d);
  for (Index j = 0; j < d; ++j) w.col(j) = h.whiten(level, Vec::Unit(d, j));
  return w;
}

Outcome criterion_5() {
  const std::vector<std::shared_ptr<GaussianHierarchy>> hs{
      std::make_shared<BrownianHierarchy>(16.0, 4, 5),
      std::make_shared<BrownianHierarchy>(1.0, 3, 4),
      std::make_shared<GridHierarchy2D>(2, 3, 1.0, 1.0),
      std::make_shared<GridHierarchy2D>(3, 2, 2.0, 0.5),
      KarhunenLoeveHierarchy::power_law(2.0, 4, 4),
      KarhunenLoeveHierarchy::power_law(1.5, 2, 3, 2)};
  RandomStream rng(5);
  double identity = 0.0, ortho = 0.0;
  int checked = 0;
  for (const auto& h : hs)
    for (int l = 1; l < h->num_levels(); ++l) {
      if (h->dim(l) > 64) continue;
      ++checked;
      const Mat a = lift_matrix(*h, l), n = noise_matrix(*h, l);
      // covariance split, factorisation and whitened transport
      identity = std::max(identity, rel_err(Mat(a * h->covariance(l - 1) * a.transpose() +
                                                n * n.transpose()),
                                            h->covariance(l)));
      const Mat f = dense_factor(*h, l);
      identity = std::max(identity, rel_err(Mat(f * f.transpose()), h->covariance(l)));
      const Mat t = transport_matrix(*h, l);
      const Mat oracle = dense_inverse_factor(*h, l) * a * dense_factor(*h, l - 1);
      identity = std::max(identity, rel_err(t, oracle));
      const Index dc = h->dim(l - 1);
      const Mat p = random_orthonormal(dc, std::min<Index>(3, dc), rng);
      const Mat moved = transport_basis(*h, p, l - 1, l);
      ortho = std::max(ortho, rel_err(Mat(moved.transpose() * moved),
                                      Mat::Identity(p.cols(), p.cols())));
    }

  // Brownian refinement of prior draws against min(s, t), N = 10⁵
  const BrownianHierarchy b(1.0, 4, 3);
  const int n = 100000;
  const Index d = b.dim(2);
  Mat emp = Mat::Zero(d, d);
  for (int i = 0; i < n; ++i) {
    const Vec u0 = b.sample_prior(0, rng);
    const Vec path = b.grid_path(2, extend_sample(b, 2, extend_sample(b, 1, u0, rng), rng));
    emp.noalias() += path * path.transpose();
  }
  emp /= double(n);
  double wiener = 0.0;
  const double h = b.spacing(2);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j)
      wiener = std::max(wiener, std::abs(emp(i, j) - h * double(std::min(i, j) + 1)));
  const double wiener_tol = 5.0 / std::sqrt(double(n));

  Outcome o;
  o.pass = identity < 1e-8 && ortho < 1e-8 && wiener < wiener_tol && checked > 0;
  o.detail = "identities " + fmt(identity, 3) + " over " + std::to_string(checked) +
             " level pairs, transported orthonormality " + fmt(ortho, 3) +
             ", Wiener covariance error " + fmt(wiener, 3) + " (tol " + fmt(wiener_tol, 3) + ")";
  o.data = {{"identity", identity}, {"orthonormality", ortho}, {"wiener", wiener}};
  return o;
}

// ---------------------------------------------------------------------------
// 6: FEM

Outcome criterion_6() {
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
    hs.push_back(1.0 / double(k));
    errs.push_back(fem.energy_error(fem.solve(Mat::Ones(k + 1, k + 1)), grad));
  }
  const double slope = fit_loglog(hs, errs).slope;

  const EllipticConfig cfg;
  auto hier = std::make_shared<GridHierarchy2D>(cfg.k0, 2, cfg.sigma2, cfg.alpha);
  const EllipticModel model(cfg, hier, Vec::Zero(Index(cfg.obs_points().size())), 1.0);
  RandomStream rng(6);
  int spd = 0, draws = 0;
  double min_eig = 1e300;
  while (draws < 50) {
    const int level = draws % 2;
    const Vec u = hier->sample_prior(level, rng);
    if (!model.in_restriction(u)) continue;
    ++draws;
    const Mat a = Mat(model.solver(level).stiffness(hier->grid_values(level, u).array().exp().matrix()));
    Eigen::SelfAdjointEigenSolver<Mat> es(a, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    min_eig = std::min(min_eig, lo);
    if (rel_err(a, Mat(a.transpose())) < 1e-14 && lo > 0) ++spd;
  }
  Outcome o;
  o.pass = slope > 0.5 && slope < 2.0 && spd == 50;
  o.detail = "V-norm slope " + fmt(slope, 3) + ", stiffness SPD on " + std::to_string(spd) +
             "/50 draws (min eigenvalue " + fmt(min_eig, 3) + ")";
  o.data = {{"slope", slope}, {"spd", spd}, {"min_eigenvalue", min_eig}};
  return o;
}

// ---------------------------------------------------------------------------
// 7: pilot rate fits

Outcome criterion_7(const fs::path& out) {
  const auto t0 = Clock::now();
  ExperimentConfig dc;
  dc.levels = 4;
  dc.reference.extra_levels = 0;
  dc.pilot.levels = 4;
  dc.pilot.n = 500;
  dc.diffusion.d0 = 32;
  const RateEstimate rd = run_pilot(dc, make_problem(dc), Method::MlsmcDili);

  ExperimentConfig ec;
  ec.model = ModelKind::Elliptic;
  ec.elliptic.k0 = 10;
  ec.levels = 3;
  ec.reference.extra_levels = 0;
  ec.pilot.levels = 3;
  ec.pilot.n = 500;
  const RateEstimate re = run_pilot(ec, make_problem(ec), Method::MlsmcDili);
  const double wall = seconds_since(t0);

  fs::create_directories(out);
  write_rates_csv(rd, (out / "rates_diffusion.csv").string());
  write_rates_csv(re, (out / "rates_elliptic.csv").string());

  const bool ok_d = rd.beta.slope > 0.5 && rd.beta.slope < 1.5 && rd.beta.r2 > 0.9;
  const bool ok_e = re.beta.slope > 1.5 && re.beta.slope < 4.5 && re.beta.r2 > 0.9;
  Outcome o;
  o.pass = ok_d && ok_e && wall < 1200.0;
  o.detail = "diffusion beta " + fmt(rd.beta.slope, 3) + " (R² " + fmt(rd.beta.r2, 3) +
             "), PDE beta " + fmt(re.beta.slope, 3) + " (R² " + fmt(re.beta.r2, 3) + ") in " +
             fmt(wall, 4) + " s";
  o.data = {{"diffusion_beta", rd.beta.slope}, {"diffusion_r2", rd.beta.r2},
            {"elliptic_beta", re.beta.slope},  {"elliptic_r2", re.beta.r2},
            {"wall_s", wall}};
  return o;
}

// ---------------------------------------------------------------------------
// 8, 9: the diffusion desk sweep

struct DeskSweep {
  std::vector<MethodSummary> summary;
  json summary_json;
  double wall = 0.0;
  bool complete = false;
};

DeskSweep desk_sweep(const std::string& config_path, const fs::path& dir, bool fresh) {
  const ExperimentConfig cfg = load_config(config_path);
  if (fresh) fs::remove_all(dir);
  const auto t0 = Clock::now();
  const auto rows = run_sweep(cfg, dir.string());
  DeskSweep s;
  s.wall = seconds_since(t0);
  s.summary = summarize(rows);
  s.summary_json = summary_json(s.summary);
  s.complete = rows.size() == cfg.methods.size() * cfg.eps.size() * std::size_t(cfg.replicates);
  std::ofstream(dir / "summary.json") << s.summary_json.dump(2) << '\n';
  return s;
}

Outcome criterion_8(const std::string& config_path, const fs::path& out, bool reuse) {
  const DeskSweep s = desk_sweep(config_path, out / "desk", !reuse);
  Outcome o;
  std::map<Method, double> slopes;
  bool slopes_ok = true;
  for (const auto& m : s.summary)
    if (m.method != Method::Smc) {
      const double sl = m.cost_vs_mse ? m.cost_vs_mse->slope : std::nan("");
      slopes[m.method] = sl;
      slopes_ok = slopes_ok && sl > -1.4 && sl < -0.7;
    }
  const double ratio = s.summary_json.value("smc_over_dili_cost_at_min_eps", 0.0);
  o.pass = s.complete && slopes.size() == 2 && slopes_ok && ratio >= 2.0 && s.wall < 7200.0;
  o.detail = "cost-vs-MSE slope DILI " + fmt(slopes[Method::MlsmcDili], 3) + ", pCN " +
             fmt(slopes[Method::MlsmcPcn], 3) + "; SMC/DILI cost at min eps " + fmt(ratio, 3) +
             "; wall " + fmt(s.wall, 5) + " s" + (reuse ? " (reused cells)" : "");
  o.data = s.summary_json;
  o.data["wall_s"] = s.wall;
  return o;
}

Outcome criterion_9(const std::string& config_path, const fs::path& out) {
  // reuses (and completes, if needed) the sweep of criterion 8
  const DeskSweep s = desk_sweep(config_path, out / "desk", false);
  const int wins = s.summary_json.value("dili_mse_le_pcn_cells", -1);
  const int cells = s.summary_json.value("cells", 0);
  Outcome o;
  o.pass = s.complete && cells == 4 && wins >= 3;
  std::string mses;
  for (const auto& m : s.summary)
    if (m.method != Method::Smc) {
      mses += std::string(mses.empty() ? "" : "; ") + to_string(m.method) + " MSE";
      for (double v : m.mean_mse) mses += " " + fmt(v, 3);
    }
  o.detail = "DILI MSE <= pCN MSE on " + std::to_string(wins) + "/" + std::to_string(cells) +
             " cells (" + mses + ")";
  o.data = {{"wins", wins}, {"cells", cells}};
  return o;
}

// ---------------------------------------------------------------------------
// 10: reproducibility

Outcome criterion_10(const fs::path& out) {
  const ExperimentConfig cfg = load_config(std::string(MLSMC_SOURCE_DIR) + "/tests/data/tiny.json");
  const fs::path a = out / "repro_a", b = out / "repro_b";
  fs::remove_all(a);
  fs::remove_all(b);
  run_sweep(cfg, a.string());
  ExperimentConfig other = cfg;
  other.workers = cfg.workers == 1 ? 3 : 1;  // the worker count must not matter
  run_sweep(other, b.string());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string ra = slurp(a / "results.csv"), rb = slurp(b / "results.csv");
  Outcome o;
  o.pass = !ra.empty() && ra == rb;
  o.detail = "results.csv " + std::string(ra == rb ? "byte-identical" : "DIFFERS") + " across two runs (" +
             std::to_string(ra.size()) + " bytes)";
  o.data = {{"bytes", ra.size()}, {"identical", ra == rb}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  int criterion = 0;
  std::string out = "acceptance_out";
  std::string desk = std::string(MLSMC_SOURCE_DIR) + "/configs/diffusion_desk.json";
  bool reuse = false;
  app.add_option("--criterion", criterion, "criterion number 1-10")->required()->check(CLI::Range(1, 10));
  app.add_option("--out", out, "output directory");
  app.add_option("--desk-config", desk, "sweep config for criteria 8 and 9");
  app.add_flag("--reuse", reuse, "criterion 8: keep finished sweep cells instead of starting fresh");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir(out);
  fs::create_directories(dir);
  Outcome o;
  try {
    switch (criterion) {
      case 1: o = criterion_1(); break;
      case 2: o = criterion_2(); break;
      case 3: o = criterion_3(); break;
      case 4: o = criterion_4(); break;
      case 5: o = criterion_5(); break;
      case 6: o = criterion_6(); break;
      case 7: o = criterion_7(dir / "pilot"); break;
      case 8: o = criterion_8(desk, dir, reuse); break;
      case 9: o = criterion_9(desk, dir); break;
      case 10: o = criterion_10(dir); break;
    }
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("error: ") + e.what();
  }
  std::cout << "CRITERION " << criterion << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
            << std::endl;
  json record = {{"criterion", criterion}, {"pass", o.pass}, {"detail", o.detail}, {"data", o.data}};
  std::ofstream(dir / ("criterion_" + std::to_string(criterion) + ".json")) << record.dump(2) << '\n';
  return o.pass ? 0 : 1;
}
