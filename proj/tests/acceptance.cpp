// Acceptance gate: one [PASS]/[FAIL] line per criterion, nonzero exit if any
// criterion fails.  Config-driven criteria run the committed files under
// configs/acceptance; the rest are checked directly against library calls.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include <json.hpp>

#include "ctlab/analysis.hpp"
#include "ctlab/config.hpp"
#include "ctlab/errors.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/noise.hpp"
#include "ctlab/particles.hpp"
#include "ctlab/runner.hpp"
#include "ctlab/transport.hpp"

using namespace ctlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void line(int idx, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", idx,
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string num(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}

fs::path out_root() {
  static fs::path d = [] {
    fs::path p = fs::temp_directory_path() /
                 ("ctlab_acceptance_" + std::to_string(getpid()));
    fs::create_directories(p);
    return p;
  }();
  return d;
}

ExperimentConfig criterion_config(int n) {
  ExperimentConfig cfg =
      parse_config_file(std::string(CTLAB_CONFIG_DIR) + "/acceptance/criterion" +
                        std::to_string(n) + ".json");
  cfg.output_dir = (out_root() / ("criterion" + std::to_string(n))).string();
  return cfg;
}

struct Timed {
  RunOutcome outcome;
  double seconds = 0.0;
};

Timed run_criterion(int n) {
  auto t0 = std::chrono::steady_clock::now();
  Timed t;
  t.outcome = run_experiment(criterion_config(n));
  t.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return t;
}

std::string check_summary(const json& report) {
  std::string s;
  for (const auto& c : report.at("checks")) {
    if (!s.empty()) s += ", ";
    s += c.at("name").get<std::string>() +
         (c.at("pass").get<bool>() ? " ok" : " FAILED");
  }
  return s;
}

json strip_meta(json j) {
  j.erase("meta");
  return j;
}

template <typename Fn>
void guarded(int idx, Fn fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    line(idx, false, std::string("exception: ") + e.what());
  }
}

void criterion1() {
  Timed t = run_criterion(1);
  const json& res = t.outcome.report.at("results");
  bool ok = t.outcome.pass && t.seconds <= 30.0;
  line(1, ok,
       "reynolds: L1(hist, analytic) " + num(res.at("l1_analytic")) +
           " <= 0.02, L1(hist, pde) " + num(res.at("l1_pde")) +
           " <= 0.05, " + num(t.seconds) + " s (limit 30)");
}

void criterion2() {
  Timed t = run_criterion(2);
  const json& res = t.outcome.report.at("results");
  bool ok = t.outcome.pass && t.seconds <= 60.0;
  line(2, ok,
       "recovery: max rel error " + num(res.at("max_rel_error")) +
           " <= 0.05, wrong-field residual ratio " +
           num(res.at("residual_ratio")) + " >= 10, " + num(t.seconds) +
           " s (limit 60)");
}

void criterion3() {
  Timed t = run_criterion(3);
  const json& res = t.outcome.report.at("results");
  const json& order = res.at("mean_report").at("fitted_order");
  bool ok = t.outcome.pass && t.seconds <= 120.0;
  line(3, ok,
       "moment expansion: mean order " +
           (order.is_number() ? num(order) : order.get<std::string>()) +
           " >= 1.5, " + check_summary(t.outcome.report) + ", " +
           num(t.seconds) + " s (limit 120)");
}

void criterion4() {
  Timed t = run_criterion(4);
  bool ok = t.outcome.pass && t.seconds <= 30.0;
  line(4, ok,
       "dual expansion: " + check_summary(t.outcome.report) + ", " +
           num(t.seconds) + " s (limit 30)");
}

void criterion5() {
  Timed t = run_criterion(5);
  double value = t.outcome.report.at("results").at("value")[0].get<double>();
  double dev = std::abs(value - std::expm1(-0.1));
  bool ok = t.outcome.pass && dev <= 1e-10 && t.seconds <= 1.0;
  line(5, ok,
       "shift series: |g(1,0;0.1) - (e^-0.1 - 1)| = " + num(dev) +
           " <= 1e-10, " + num(t.seconds) + " s (limit 1)");
}

void criterion6() {
  Timed t = run_criterion(6);
  const json& v = t.outcome.report.at("results").at("verdicts")[0];
  const json& twin = t.outcome.report.at("results").at("twin");
  bool ok = t.outcome.pass && t.seconds <= 120.0;
  line(6, ok,
       "detector: rate " + num(v.at("net_rate")) + " vs 0.01 +- 20%, decision " +
           v.at("decision").get<std::string>() + ", twin " +
           twin.at("decision").get<std::string>() + ", " + num(t.seconds) +
           " s (limit 120)");
}

void criterion7() {
  auto t0 = std::chrono::steady_clock::now();
  NoiseSpec spec;
  spec.kind = NoiseKind::poly_brownian;
  spec.degree = 2;
  spec.dim = 1;
  spec.seed = 33;
  VarianceEstimate est = increment_variance(spec, 0.0, 0.1, 1000000);
  double dev = std::abs(est.variance[0] - 0.015);
  bool mc_ok = dev <= 3.0 * est.stderr_[0];

  Timed t = run_criterion(7);
  double slope = t.outcome.report.at("results").at("rate_slope").get<double>();
  double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  bool ok = mc_ok && t.outcome.pass && seconds <= 180.0;
  line(7, ok,
       "cubic noise: |Var(W(0.1)) - 0.015| = " + num(dev) + " <= 3 se = " +
           num(3.0 * est.stderr_[0]) + ", detector " +
           check_summary(t.outcome.report) + ", slope " + num(slope) + ", " +
           num(seconds) + " s (limit 180)");
}

void criterion8() {
  auto t0 = std::chrono::steady_clock::now();
  Timed t = run_criterion(8);

  // Per-step conservation and positivity, not just at snapshots.
  VelocityField v = make_field("damped", {{"dim", 1}});
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {1.0};
  dist.cov = {0.04};
  GridSpec g;
  g.axes = {Axis{-4.0, 4.0, 200}};
  DensityGrid rho = initial_density(dist, g, 0.0);
  double dt = 0.9 * cfl_limit(v, rho, 0.0);
  double drift = 0.0, min_value = 0.0;
  while (rho.time < 0.5) {
    rho = step_continuity(v, rho, std::min(dt, 0.5 - rho.time));
    drift = std::max(drift, std::abs(rho.mass() - 1.0));
    for (double x : rho.values) min_value = std::min(min_value, x);
  }
  bool steps_ok = drift <= 1e-12 && min_value >= 0.0;

  // RK4 order on the damped flow.
  Ensemble one;
  one.dim = 1;
  one.positions = {1.0};
  auto err = [&](double step) {
    OdeOptions opts;
    opts.dt = step;
    double x = integrate_ode(v, one, 1.0, opts).back().positions[0];
    return std::abs(x - std::exp(-1.0));
  };
  double order = std::log2(err(0.2) / err(0.1));

  // Exact 1D rank preservation through a non-uniform field.
  VelocityField bump = make_field(
      "bump", {{"center", {0.0}}, {"amplitude", {0.5}}, {"radius", 1.0}});
  Ensemble row;
  row.dim = 1;
  for (int i = 0; i <= 200; ++i)
    row.positions.push_back(-2.0 + 4.0 * i / 200.0);
  OdeOptions opts;
  opts.dt = 0.01;
  Ensemble moved = integrate_ode(bump, row, 1.0, opts).back();
  bool ranked = true;
  for (std::size_t i = 0; i + 1 < moved.positions.size(); ++i)
    ranked = ranked && moved.positions[i] < moved.positions[i + 1];

  double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  bool ok = t.outcome.pass && steps_ok && order >= 3.8 && ranked &&
            seconds <= 60.0;
  line(8, ok,
       "conservation: per-step mass drift " + num(drift) +
           " <= 1e-12, min value " + num(min_value) + " >= 0, rk4 order " +
           num(order) + " >= 3.8, rank " + (ranked ? "exact" : "BROKEN") +
           ", " + num(seconds) + " s (limit 60)");
}

void criterion9() {
  bool ok = true;
  std::string detail = "re-run:";
  for (int n : {5, 6}) {
    json a = strip_meta(run_experiment(criterion_config(n)).report);
    json b = strip_meta(run_experiment(criterion_config(n)).report);
    bool same = a.dump() == b.dump();
    ok = ok && same;
    detail += " criterion" + std::to_string(n) +
              (same ? " byte-identical" : " DIFFERS");
  }
  line(9, ok, detail + " (meta excluded)");
}

}  // namespace

int main() {
  std::printf("acceptance gate, outputs under %s\n", out_root().c_str());
  guarded(1, criterion1);
  guarded(2, criterion2);
  guarded(3, criterion3);
  guarded(4, criterion4);
  guarded(5, criterion5);
  guarded(6, criterion6);
  guarded(7, criterion7);
  guarded(8, criterion8);
  guarded(9, criterion9);
  std::printf("acceptance: %d/9 criteria pass\n", 9 - failures);
  return failures == 0 ? 0 : 1;
}
