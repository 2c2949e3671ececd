// mlsmc: command-line front end for the experiment harness.

#include "mlsmc/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>

namespace fs = std::filesystem;
using namespace mlsmc;
using nlohmann::json;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> methods;
  std::optional<int> levels;
  std::vector<double> eps;
  std::optional<int> replicates;
  std::optional<unsigned> workers;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON experiment config");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--method", o.methods, "smc | mlsmc-pcn | mlsmc-dili (repeatable)");
  cmd->add_option("--levels", o.levels, "finest level L");
  cmd->add_option("--eps", o.eps, "ε grid, strictly decreasing")->delimiter(',');
  cmd->add_option("--replicates", o.replicates, "replicates per (method, ε)");
  cmd->add_option("--workers", o.workers, "worker threads (0 = all cores)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  if (!o.methods.empty()) {
    c.methods.clear();
    for (const auto& m : o.methods) c.methods.push_back(parse_method(m));
  }
  if (o.levels) {
    c.levels = *o.levels;
    c.pilot.levels = *o.levels;
  }
  if (!o.eps.empty()) c.eps = o.eps;
  if (o.replicates) c.replicates = *o.replicates;
  if (o.workers) c.workers = *o.workers;
  validate(c);
  set_worker_count(c.workers);
  return c;
}

std::vector<std::string> g_warnings;
std::mutex g_warn_mutex;

// each distinct warning is printed and recorded once
void collect_warnings() {
  set_warning_sink([](const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_warn_mutex);
    if (std::find(g_warnings.begin(), g_warnings.end(), msg) != g_warnings.end()) return;
    g_warnings.push_back(msg);
    std::cerr << "warning: " << msg << '\n';
  });
}

json fit_json(const LogLogFit& f) {
  return {{"slope", f.slope}, {"slope_se", f.slope_se}, {"r2", f.r2}, {"points", f.points}};
}

int cmd_run(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const auto rows = run_sweep(c, c.out_dir);
  const json summary = summary_json(summarize(rows));
  std::ofstream(fs::path(c.out_dir) / "summary.json") << summary.dump(2) << '\n';
  write_meta(c, "run", g_warnings, (fs::path(c.out_dir) / "meta.json").string());
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_pilot(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const Method method = c.methods.size() == 1 ? c.methods.front() : Method::MlsmcPcn;
  fs::create_directories(c.out_dir);
  const Problem p = make_problem(c);
  const RateEstimate r = run_pilot(c, p, method);
  write_rates_csv(r, (fs::path(c.out_dir) / "rates.csv").string());
  write_clis_csv({}, r.clis, (fs::path(c.out_dir) / "clis.csv").string());
  json extra{{"method", to_string(method)},
             {"beta", fit_json(r.beta)},
             {"zeta", fit_json(r.zeta)},
             {"tempering_stages", r.tempering_stages},
             {"level0_work", r.level0_work},
             {"step_work", r.step_work}};
  if (r.zeta_wall) extra["zeta_wall"] = fit_json(*r.zeta_wall);
  write_meta(c, "pilot", g_warnings, (fs::path(c.out_dir) / "meta.json").string(), extra);
  std::cout << "beta_hat = " << r.beta.slope << " ± " << r.beta.slope_se << " (R² " << r.beta.r2
            << ")\nzeta_hat = " << r.zeta.slope << "\ntempering stages = " << r.tempering_stages
            << "\nwork per particle: level0_work = " << r.level0_work
            << ", step_work = " << r.step_work << '\n';
  if (r.zeta_wall) std::cout << "zeta_wall = " << r.zeta_wall->slope << '\n';
  return 0;
}

int cmd_clis_demo(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  fs::create_directories(c.out_dir);
  const auto rows = run_clis_demo(c.clis_demo, c.seed);
  write_clis_csv(rows, {}, (fs::path(c.out_dir) / "clis.csv").string());
  json per_n = json::array();
  for (Index n : c.clis_demo.sample_sizes) {
    std::vector<double> fid;
    int correct = 0;
    for (const auto& r : rows)
      if (r.n_samples == n) {
        fid.push_back(r.fidelity);
        if (r.detected_m && *r.detected_m == c.clis_demo.m) ++correct;
      }
    std::sort(fid.begin(), fid.end());
    const double median = fid.size() % 2 ? fid[fid.size() / 2]
                                         : 0.5 * (fid[fid.size() / 2 - 1] + fid[fid.size() / 2]);
    per_n.push_back({{"n", n}, {"median_fidelity", median}, {"detected_correct", correct}});
    std::cout << "N=" << n << "  median fidelity " << median << "  m detected correctly "
              << correct << "/" << fid.size() << '\n';
  }
  write_meta(c, "clis-demo", g_warnings, (fs::path(c.out_dir) / "meta.json").string(),
             {{"per_n", per_n}});
  return 0;
}

int cmd_gen_data(const Overrides& o, int level) {
  const ExperimentConfig c = resolve(o);
  const int lvl = level >= 0 ? level : data_level(c);
  const ObservationData d = generate_data(c, lvl, c.data_seed);
  fs::path out = c.out_dir;
  if (out.extension() != ".json") {
    fs::create_directories(out);
    out /= "observations.json";
  }
  save_observations(d, out.string());
  std::cout << "wrote " << out.string() << " (level " << lvl << ", noise variance "
            << d.noise_variance << ")\n";
  return 0;
}

int cmd_report(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const auto rows = read_results((fs::path(c.out_dir) / "results.csv").string());
  if (rows.empty()) throw InvalidArgument("no results in " + c.out_dir);
  const json summary = summary_json(summarize(rows));
  std::ofstream(fs::path(c.out_dir) / "summary.json") << summary.dump(2) << '\n';
  std::cout << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilevel SMC with likelihood-informed (DILI) mutations"};
  app.require_subcommand(1);
  Overrides run_o, pilot_o, demo_o, gen_o, report_o;
  int gen_level = -1;
  auto* run = app.add_subcommand("run", "cost-vs-error sweep");
  add_common(run, run_o);
  auto* pilot = app.add_subcommand("pilot", "variance/cost rate estimation");
  add_common(pilot, pilot_o);
  auto* demo = app.add_subcommand("clis-demo", "synthetic spiked-covariance cLIS study");
  add_common(demo, demo_o);
  auto* gen = app.add_subcommand("gen-data", "write synthetic observations");
  add_common(gen, gen_o);
  gen->add_option("--data-level", gen_level, "generating level (default: above the finest)");
  auto* report = app.add_subcommand("report", "aggregate results.csv into summary.json");
  add_common(report, report_o);

  CLI11_PARSE(app, argc, argv);
  collect_warnings();
  try {
    if (*run) return cmd_run(run_o);
    if (*pilot) return cmd_pilot(pilot_o);
    if (*demo) return cmd_clis_demo(demo_o);
    if (*gen) return cmd_gen_data(gen_o, gen_level);
    if (*report) return cmd_report(report_o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
