#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ctlab/analysis.hpp"
#include "ctlab/density.hpp"
#include "ctlab/errors.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/particles.hpp"

using namespace ctlab;
using nlohmann::json;

namespace {

GridSpec grid1d(double lo, double hi, int cells) {
  GridSpec g;
  g.axes = {Axis{lo, hi, cells}};
  return g;
}

InitialDist gaussian1d(double mean, double var) {
  InitialDist d;
  d.kind = InitialDist::Kind::gaussian;
  d.mean = {mean};
  d.cov = {var};
  return d;
}

// Trajectory bundle for the detector: conditioning ensemble at t0 plus
// snapshots every delta/10 up to t0 + delta.
std::vector<double> detect_grid(double t0, double delta) {
  std::vector<double> ts;
  for (int k = 1; k <= 10; ++k) ts.push_back(t0 + delta * k / 10.0);
  return ts;
}

std::vector<Ensemble> ode_traj(const VelocityField& v, double t0, double delta,
                               std::size_t n, std::uint64_t seed) {
  Ensemble init = sample_initial(gaussian1d(1.0, 0.04), n, seed);
  init.time = t0;
  OdeOptions opts;
  opts.dt = delta / 10.0;
  opts.output_times = detect_grid(t0, delta);
  auto snaps = integrate_ode(v, init, t0 + delta, opts);
  snaps.insert(snaps.begin(), init);
  return snaps;
}

std::vector<Ensemble> sde_traj(const VelocityField& v, double sigma_star,
                               NoiseKind kind, int degree, double t0,
                               double delta, std::size_t n,
                               std::uint64_t seed) {
  Ensemble init = sample_initial(gaussian1d(1.0, 0.04), n, seed);
  init.time = t0;
  SdeSpec spec;
  spec.drift = v;
  Mat m = constant_diffusion_matrix(sigma_star, 1);
  spec.diffusion = [m](double, const double*) { return m; };
  spec.noise.kind = kind;
  spec.noise.degree = degree;
  spec.noise.seed = seed + 1000;
  auto snaps =
      integrate_sde(spec, init, t0 + delta, delta / 10.0, detect_grid(t0, delta));
  snaps.insert(snaps.begin(), init);
  return snaps;
}

}  // namespace

TEST_CASE("log-log order fit") {
  std::vector<double> xs{0.2, 0.1, 0.05};
  std::vector<double> ys{4.0 * 0.04, 4.0 * 0.01, 4.0 * 0.0025};
  CHECK(fit_loglog_order(xs, ys) == doctest::Approx(2.0).epsilon(1e-12));
  // Points at or below the floor are excluded; fewer than two left means
  // the quantity has already converged.
  CHECK(fit_loglog_order(xs, {1e-20, 1e-21, 1e-22}, 1e-15) ==
        std::numeric_limits<double>::infinity());
  CHECK(fit_loglog_order(xs, {0.8, 0.4, 1e-20}, 1e-15) ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("initial density projects boxes exactly") {
  InitialDist box;
  box.kind = InitialDist::Kind::uniform;
  box.lo = {0.25};
  box.hi = {0.75};
  DensityGrid d = initial_density(box, grid1d(0.0, 1.0, 8), 0.0);
  for (int i = 0; i < 8; ++i)
    CHECK(d.values[i] == (i >= 2 && i <= 5 ? 2.0 : 0.0));
  CHECK(d.mass() == doctest::Approx(1.0).epsilon(1e-12));

  box.lo = {0.275};
  box.hi = {0.725};
  DensityGrid part = initial_density(box, grid1d(0.0, 1.0, 10), 0.0);
  CHECK(part.values[2] == doctest::Approx(0.025 / (0.1 * 0.45)).epsilon(1e-9));
  CHECK(part.values[5] == doctest::Approx(1.0 / 0.45).epsilon(1e-9));
  CHECK(part.mass() == doctest::Approx(1.0).epsilon(1e-12));

  InitialDist cloud;
  cloud.kind = InitialDist::Kind::delta_cloud;
  cloud.center = {0.5};
  cloud.radius = 0.25;
  DensityGrid c = initial_density(cloud, grid1d(0.0, 1.0, 8), 0.0);
  CHECK(c.values[3] == 2.0);
  CHECK(c.values[1] == 0.0);

  cloud.radius = 0.0;
  CHECK_THROWS_AS(initial_density(cloud, grid1d(0, 1, 8), 0.0),
                  ContractViolation);
  cloud.center = {0.5, 0.5};
  cloud.radius = 0.25;
  GridSpec g2;
  g2.axes = {Axis{0, 1, 8}, Axis{0, 1, 8}};
  CHECK_THROWS_AS(initial_density(cloud, g2, 0.0), ContractViolation);

  box.lo = {5.0};
  box.hi = {6.0};
  CHECK_THROWS_AS(initial_density(box, grid1d(0, 1, 8), 0.0),
                  ContractViolation);
}

TEST_CASE("gaussian flow moments for linear-flow fields") {
  Vec mu{1.0, 0.0};
  Mat cov{0.04, 0.0, 0.0, 0.09};

  auto c = gaussian_flow_moments(
      make_field("constant", {{"value", {0.5, -0.5}}}), mu, cov, 2.0);
  REQUIRE(c.has_value());
  CHECK(c->first[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(c->first[1] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(c->second == cov);

  auto d = gaussian_flow_moments(make_field("damped", {{"dim", 2}}), mu, cov,
                                 0.5);
  REQUIRE(d.has_value());
  CHECK(d->first[0] == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(d->second[0] == doctest::Approx(0.04 * std::exp(-1.0)).epsilon(1e-12));

  double quarter = std::acos(-1.0) / 2.0;
  auto r = gaussian_flow_moments(make_field("rotation2d", json::object()), mu,
                                 cov, quarter);
  REQUIRE(r.has_value());
  CHECK(std::abs(r->first[0]) < 1e-12);
  CHECK(r->first[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r->second[0] == doctest::Approx(0.09).epsilon(1e-9));
  CHECK(r->second[3] == doctest::Approx(0.04).epsilon(1e-9));

  auto l = gaussian_flow_moments(
      make_field("linear", {{"matrix", {{-2.0}}}}), {1.0}, {0.01}, 0.3);
  REQUIRE(l.has_value());
  CHECK(l->first[0] == doctest::Approx(std::exp(-0.6)).epsilon(1e-10));

  auto b = gaussian_flow_moments(
      make_field("bump",
                 {{"center", {0.0}}, {"radius", 1.0}, {"amplitude", {1.0}}}),
      {0.0}, {0.01}, 0.1);
  CHECK(!b.has_value());
}

TEST_CASE("coarsen averages children conservatively") {
  DensityGrid fine;
  fine.axes = {Axis{0.0, 1.0, 4}};
  fine.values = {1.0, 3.0, 2.0, 6.0};
  DensityGrid coarse = coarsen(fine, 2);
  CHECK(coarse.axes[0].cells == 2);
  CHECK(coarse.values[0] == 2.0);
  CHECK(coarse.values[1] == 4.0);
  CHECK(coarse.mass() == doctest::Approx(fine.mass()).epsilon(1e-12));
  CHECK_THROWS_AS(coarsen(fine, 3), ContractViolation);

  DensityGrid f2;
  f2.axes = {Axis{0, 1, 2}, Axis{0, 1, 2}};
  f2.values = {1.0, 2.0, 3.0, 6.0};
  DensityGrid c2 = coarsen(f2, 2);
  CHECK(c2.values[0] == 3.0);
}

TEST_CASE("analytic gaussian runs carry flowed moments") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  GridSpec g = grid1d(-0.8, 2.8, 400);
  TransportRun run = analytic_gaussian_run(v, {1.0}, {0.04}, {0.0, 0.25, 0.5},
                                           g);
  REQUIRE(run.snapshots.size() == 3);
  CHECK(run.scheme == Scheme::none);
  MomentReport m = moments(run.snapshots[2]);
  CHECK(std::abs(m.mean[0] - std::exp(-0.5)) < 1e-6);
  CHECK_THROWS_AS(analytic_gaussian_run(v, {1.0}, {0.04}, {0.5, 0.25}, g),
                  ContractViolation);
  CHECK_THROWS_AS(analytic_gaussian_run(v, {1.0}, {0.04}, {0.5}, g),
                  ContractViolation);
}

TEST_CASE("recovery error is measured on unmasked cells only") {
  VelocityEstimate est;
  est.axes = {Axis{0.0, 1.0, 4}};
  est.values = {0.51, 999.0, 0.48, 0.0};
  est.mask = {1, 0, 1, 0};
  est.axis = 0;
  VelocityField v = make_field("constant", {{"value", {0.5}}});
  CHECK(recovery_max_rel_error(est, v, 0.0) ==
        doctest::Approx(0.04).epsilon(1e-9));
}

TEST_CASE("concentration ladder") {
  std::vector<double> sigmas{0.2, 0.1, 0.05, 0.025};

  SUBCASE("linear functions are already converged") {
    ScalingReport r =
        concentration_check(coordinate_field(0), 10.0, {0.7}, sigmas);
    CHECK(r.pass);
    CHECK(r.fitted_order == std::numeric_limits<double>::infinity());
  }
  SUBCASE("quadratic error decays at second order") {
    ScalarField f = make_scalar_field(
        [](auto, const auto* x) { return x[0] * x[0]; });
    ScalingReport r = concentration_check(f, 10.0, {0.7}, sigmas);
    CHECK(r.pass);
    CHECK(r.fitted_order == doctest::Approx(2.0).epsilon(0.03));
    CHECK(r.quantities[0] == doctest::Approx(0.04).epsilon(0.01));
  }
  SUBCASE("smooth bounded nonpolynomial") {
    ScalarField f;
    f.eval_d = [](double, const double* x) { return std::cos(x[0]); };
    ScalingReport r = concentration_check(f, 1.0, {0.0}, sigmas);
    CHECK(r.pass);
    CHECK(r.quantities[0] ==
          doctest::Approx(1.0 - std::exp(-0.02)).epsilon(0.01));
  }
  SUBCASE("a violated bound is rejected") {
    ScalarField f = make_scalar_field(
        [](auto, const auto* x) { return x[0] * x[0]; });
    CHECK_THROWS_AS(concentration_check(f, 0.1, {0.7}, sigmas),
                    ContractViolation);
  }
  SUBCASE("the ladder must strictly decrease") {
    CHECK_THROWS_AS(
        concentration_check(coordinate_field(0), 10.0, {0.7}, {0.1, 0.1}),
        ContractViolation);
    CHECK_THROWS_AS(
        concentration_check(coordinate_field(0), 10.0, {0.7}, {0.1, 0.2}),
        ContractViolation);
  }
}

TEST_CASE("moment expansion through the pde") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  std::vector<double> sigmas{0.2, 0.1};
  MomentExpansionReport r =
      moment_expansion_check(v, {1.0}, sigmas, 0.01, ExpansionMode::pde);
  CHECK(r.mean_report.pass);
  CHECK(r.variance_report.pass);
  REQUIRE(r.var_coeff.size() == 2);
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    double s2 = sigmas[k] * sigmas[k];
    CHECK(r.var_coeff[k][0] == doctest::Approx(-2.0 * s2).epsilon(0.15));
    CHECK(r.cross_dt[k][0] == doctest::Approx(-2.0 * s2).epsilon(0.10));
  }
  CHECK(r.var_coeff[0][0] / r.var_coeff[1][0] ==
        doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("moment expansion through particles agrees with the pde") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  ExpansionOptions opts;
  opts.n_particles = 300000;
  MomentExpansionReport r = moment_expansion_check(
      v, {1.0}, {0.2, 0.1}, 0.01, ExpansionMode::particles, opts);
  CHECK(r.variance_report.pass);
  for (std::size_t k = 0; k < 2; ++k) {
    double s2 = (k == 0 ? 0.04 : 0.01);
    CHECK(r.var_coeff[k][0] == doctest::Approx(-2.0 * s2).epsilon(0.3));
  }
  // Sample-mean noise keeps the mean quantities bounded but not decaying.
  CHECK(r.mean_report.quantities[0] < 0.1);
}

TEST_CASE("dual expansion matches at first and second order") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  DualExpansionReport r =
      dual_expansion_check(v, coordinate_field(0), {1.0}, 0.1, 0.05, 2);
  REQUIRE(r.left.size() == 2);
  CHECK(r.deviation[0] <= 0.02 * std::abs(r.right[0]));
  CHECK(r.deviation[1] <= 0.05 * std::max(std::abs(r.right[1]), 1e-12));

  ScalarField one = make_scalar_field(
      [](auto, const auto* x) { return x[0] * 0.0 + 1.0; });
  DualExpansionReport flat =
      dual_expansion_check(v, one, {1.0}, 0.1, 0.05, 2);
  CHECK(std::abs(flat.deviation[0]) < 1e-7);
  CHECK(std::abs(flat.deviation[1]) < 1e-7);

  CHECK_THROWS_AS(dual_expansion_check(v, one, {1.0}, 0.1, 0.05, 3),
                  ContractViolation);
}

TEST_CASE("detector clears a deterministic flow") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  auto traj = ode_traj(v, 0.2, 0.05, 20000, 41);
  DetectionVerdict verdict = detect_stochasticity(traj, v, 0.05);
  CHECK(!verdict.stochastic);
  CHECK(verdict.delta == 0.05);
  CHECK(verdict.threshold_used ==
        doctest::Approx(5.0 * verdict.calibration_floor).epsilon(1e-12));
  CHECK(verdict.kept >= 10000);
  CHECK(verdict.bins_used >= 10);
  CHECK(verdict.mean_shift_check < 1e-6);
  CHECK(verdict.conditional_variance_rate[0] <= verdict.threshold_used);
  double lhs = verdict.total_variance;
  double rhs = verdict.within_variance + verdict.between_variance;
  CHECK(std::abs(lhs - rhs) <= 0.05 * lhs);
}

TEST_CASE("detector flags brownian diffusion at the right rate") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  auto traj = sde_traj(v, 0.1, NoiseKind::brownian, 2, 0.2, 0.05, 40000, 42);
  DetectionVerdict verdict = detect_stochasticity(traj, v, 0.05);
  CHECK(verdict.stochastic);
  CHECK(verdict.conditional_variance_rate[0] ==
        doctest::Approx(0.01).epsilon(0.2));
  // Conditioning does not manufacture O(delta) mean shifts from noise.
  CHECK(verdict.mean_shift_check < 0.01);

  auto traj2 = sde_traj(v, 0.2, NoiseKind::brownian, 2, 0.2, 0.05, 40000, 43);
  DetectionVerdict v2 = detect_stochasticity(traj2, v, 0.05);
  double ratio = v2.conditional_variance_rate[0] /
                 verdict.conditional_variance_rate[0];
  CHECK(ratio == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("rate scaling separates noise laws") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  std::vector<double> deltas{0.02, 0.04};
  std::vector<double> brate, prate;
  for (double d : deltas) {
    auto bt = sde_traj(v, 0.1, NoiseKind::brownian, 2, 0.2, d, 30000, 51);
    brate.push_back(
        detect_stochasticity(bt, v, d).conditional_variance_rate[0]);
    auto pt = sde_traj(v, 0.3, NoiseKind::poly_brownian, 2, 1.0, d, 30000, 52);
    DetectionVerdict pv = detect_stochasticity(pt, v, d);
    CHECK(pv.stochastic);
    prate.push_back(pv.conditional_variance_rate[0]);
  }
  CHECK(std::abs(fit_loglog_order(deltas, brate)) < 0.25);
  CHECK(fit_loglog_order(deltas, prate) == doctest::Approx(2.0).epsilon(0.2));
  // The cubic path started at t0 carries Var = 15 delta^3 increments.
  CHECK(prate[1] ==
        doctest::Approx(15.0 * 0.09 * 0.04 * 0.04).epsilon(0.15));
}

TEST_CASE("detector contracts") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  auto traj = ode_traj(v, 0.2, 0.05, 10000, 44);
  DetectOptions narrow;
  narrow.bin_frac = 1e-4;
  CHECK_THROWS_AS(detect_stochasticity(traj, v, 0.05, narrow), BinningError);
  try {
    detect_stochasticity(traj, v, 0.05, narrow);
  } catch (const BinningError& e) {
    CHECK(e.suggested_width > 0.0);
  }

  auto tiny = ode_traj(v, 0.2, 0.05, 5000, 45);
  CHECK_THROWS_AS(detect_stochasticity(tiny, v, 0.05), ContractViolation);
  // No snapshot lands at t0 + delta for a mismatched delta.
  CHECK_THROWS_AS(detect_stochasticity(traj, v, 0.033), ContractViolation);
  // Spacing coarser than delta/10 is refused.
  CHECK_THROWS_AS(detect_stochasticity(traj, v, 0.02), ContractViolation);
}

TEST_CASE("density-mode detection separates the two regimes") {
  // Coarse grids with many particles keep the residual
  // discretization-dominated, so refinement halves it for deterministic
  // data while diffusion leaves a term no refinement removes.
  VelocityField v = make_field("damped", {{"dim", 1}});
  std::vector<GridSpec> res{grid1d(-0.5, 2.0, 12), grid1d(-0.5, 2.0, 24)};
  Ensemble init = sample_initial(gaussian1d(1.0, 0.04), 500000, 61);
  std::vector<double> times{0.1, 0.2, 0.3};

  OdeOptions opts;
  opts.dt = 0.005;
  opts.output_times = times;
  auto det = integrate_ode(v, init, 0.3, opts);
  DensityModeVerdict clean = density_mode_detection(det, v, res);
  CHECK(!clean.stochastic);
  CHECK(clean.refinement_ratio >= 1.3);
  CHECK(clean.residual_norms.size() == 2);
  CHECK(clean.floors.size() == 2);

  SdeSpec spec;
  spec.drift = v;
  Mat m = constant_diffusion_matrix(0.3, 1);
  spec.diffusion = [m](double, const double*) { return m; };
  spec.noise.seed = 62;
  auto noisy = integrate_sde(spec, init, 0.3, 2e-3, times);
  DensityModeVerdict flagged = density_mode_detection(noisy, v, res);
  CHECK(flagged.stochastic);
  CHECK(flagged.refinement_ratio <= 1.1);
  CHECK(flagged.residual_norms[1] > 2.0 * flagged.floors[1]);

  CHECK_THROWS_AS(density_mode_detection({det[0], det[1]}, v, res),
                  ContractViolation);
  CHECK_THROWS_AS(density_mode_detection(det, v, {res[0]}),
                  ContractViolation);
}

TEST_CASE("reynolds comparison on a contracting line") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  ReynoldsOptions opts;
  opts.refine = 4;
  auto rep = reynolds_check(v, gaussian1d(1.0, 0.04), 50000, 0.5,
                            grid1d(-4.0, 4.0, 100), opts);
  REQUIRE(rep.l1_analytic.has_value());
  REQUIRE(rep.l1_pde.has_value());
  CHECK(*rep.l1_analytic < 0.03);
  CHECK(*rep.l1_pde < 0.2);
  CHECK(rep.particle_hist.mass() == doctest::Approx(1.0).epsilon(1e-12));
  REQUIRE(rep.pde_aggregated.has_value());
  CHECK(same_axes(rep.particle_hist, *rep.pde_aggregated));
}

TEST_CASE("reynolds comparison under plane rotation") {
  VelocityField v = make_field("rotation2d", json::object());
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {1.0, 0.0};
  dist.cov = {0.04, 0.0, 0.0, 0.04};
  GridSpec g;
  g.axes = {Axis{-2.8, 2.8, 28}, Axis{-2.8, 2.8, 28}};
  ReynoldsOptions opts;
  opts.refine = 8;
  opts.particle_dt = 2e-3;
  auto rep = reynolds_check(v, dist, 50000, 0.25, g, opts);
  REQUIRE(rep.l1_analytic.has_value());
  REQUIRE(rep.l1_pde.has_value());
  CHECK(*rep.l1_analytic < 0.05);
  CHECK(*rep.l1_pde < 0.12);
}

TEST_CASE("detector rate is nondecreasing in the noise amplitude") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  std::vector<double> amps{0.0, 0.05, 0.1, 0.2};
  std::vector<double> rates;
  for (double a : amps) {
    auto traj = sde_traj(v, a, NoiseKind::brownian, 0, 0.0, 0.05, 20000, 71);
    rates.push_back(
        detect_stochasticity(traj, v, 0.05).conditional_variance_rate[0]);
  }
  CHECK(rates[0] <= rates[1]);
  CHECK(rates[1] <= rates[2]);
  CHECK(rates[2] <= rates[3]);
  // sigma*^2 delta separates consecutive amplitudes by 4x, far above noise.
  CHECK(rates[3] > 2.0 * rates[2]);
}

TEST_CASE("decision is invariant under rescaling positions") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  auto det = ode_traj(v, 0.0, 0.05, 20000, 73);
  auto sto = sde_traj(v, 0.1, NoiseKind::brownian, 0, 0.0, 0.05, 20000, 73);
  // For the linear hypothesis, rescaled trajectories solve the same field
  // with rescaled noise, and the twin recalibrates on the rescaled ensemble,
  // so the verdict (not the rate) must survive the change of units.
  auto scaled = [](std::vector<Ensemble> t, double c) {
    for (auto& e : t)
      for (double& x : e.positions) x *= c;
    return t;
  };
  CHECK(!detect_stochasticity(det, v, 0.05).stochastic);
  CHECK(detect_stochasticity(sto, v, 0.05).stochastic);
  for (double c : {0.5, 2.0}) {
    DetectionVerdict d = detect_stochasticity(scaled(det, c), v, 0.05);
    DetectionVerdict s = detect_stochasticity(scaled(sto, c), v, 0.05);
    CHECK(!d.stochastic);
    CHECK(s.stochastic);
    CHECK(s.threshold_used == 5.0 * s.calibration_floor);
  }
}

TEST_CASE("scaling reports replay bit-identically") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  ExpansionOptions opts;
  opts.n_particles = 20000;
  auto a = moment_expansion_check(v, {1.0}, {0.2, 0.1}, 0.01,
                                  ExpansionMode::particles, opts);
  auto b = moment_expansion_check(v, {1.0}, {0.2, 0.1}, 0.01,
                                  ExpansionMode::particles, opts);
  CHECK(a.mean_report.quantities == b.mean_report.quantities);
  CHECK(a.variance_report.quantities == b.variance_report.quantities);
  CHECK(a.mean_report.fitted_order == b.mean_report.fitted_order);
  CHECK(a.mean_report.pass == b.mean_report.pass);
  CHECK(a.variance_report.pass == b.variance_report.pass);

  auto c1 = concentration_check(coordinate_field(0), 10.0, {0.7},
                                {0.2, 0.1, 0.05});
  auto c2 = concentration_check(coordinate_field(0), 10.0, {0.7},
                                {0.2, 0.1, 0.05});
  CHECK(c1.quantities == c2.quantities);
}
