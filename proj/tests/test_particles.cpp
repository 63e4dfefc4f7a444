#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "ctlab/errors.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/particles.hpp"

using namespace ctlab;
using nlohmann::json;

namespace {

Ensemble single(double t, Vec x) {
  Ensemble e;
  e.time = t;
  e.dim = static_cast<int>(x.size());
  e.positions = std::move(x);
  return e;
}

double axis_mean(const Ensemble& e, int d) {
  double s = 0.0;
  for (std::size_t i = 0; i < e.n(); ++i) s += e.at(i)[d];
  return s / static_cast<double>(e.n());
}

double axis_cov(const Ensemble& e, int a, int b) {
  double ma = axis_mean(e, a), mb = axis_mean(e, b);
  double s = 0.0;
  for (std::size_t i = 0; i < e.n(); ++i)
    s += (e.at(i)[a] - ma) * (e.at(i)[b] - mb);
  return s / static_cast<double>(e.n() - 1);
}

double final_error_1d(OdeMethod m, double dt) {
  VelocityField v = make_field("damped", {{"dim", 1}});
  OdeOptions opts;
  opts.method = m;
  opts.dt = dt;
  auto snaps = integrate_ode(v, single(0.0, {1.0}), 1.0, opts);
  return std::abs(snaps.back().positions[0] - std::exp(-1.0));
}

}  // namespace

TEST_CASE("step grid restarts the stride after each landing") {
  auto ts = build_step_times(0.0, 1.0, 0.3, {0.5});
  REQUIRE(ts.size() == 5);
  CHECK(ts[0] == 0.0);
  CHECK(ts[1] == doctest::Approx(0.3));
  CHECK(ts[2] == 0.5);
  CHECK(ts[3] == doctest::Approx(0.8));
  CHECK(ts[4] == 1.0);

  auto even = build_step_times(0.0, 1.0, 0.25, {});
  REQUIRE(even.size() == 5);
  CHECK(even[3] == doctest::Approx(0.75));

  CHECK_THROWS_AS(build_step_times(0.0, 1.0, -0.1, {}), ContractViolation);
  CHECK_THROWS_AS(build_step_times(0.0, 1.0, 0.1, {1.5}), ContractViolation);
  CHECK_THROWS_AS(build_step_times(0.0, 1.0, 0.1, {0.0}), ContractViolation);
  CHECK_THROWS_AS(build_step_times(0.0, 0.0, 0.1, {}), ContractViolation);
}

TEST_CASE("rk4 tracks exponential decay to 1e-9") {
  CHECK(final_error_1d(OdeMethod::rk4, 1e-3) < 1e-9);
}

TEST_CASE("rk4 closes a quarter turn") {
  VelocityField v = make_field("rotation2d", json::object());
  OdeOptions opts;
  opts.dt = 1e-3;
  auto snaps = integrate_ode(v, single(0.0, {1.0, 0.0}),
                             std::acos(-1.0) / 2.0, opts);
  CHECK(std::abs(snaps.back().positions[0] - 0.0) < 1e-8);
  CHECK(std::abs(snaps.back().positions[1] - 1.0) < 1e-8);
}

TEST_CASE("constant drift translates exactly") {
  VelocityField v = make_field("constant", {{"value", {2.0, -1.0}}});
  for (OdeMethod m : {OdeMethod::euler, OdeMethod::rk4}) {
    OdeOptions opts;
    opts.method = m;
    opts.dt = 0.1;
    auto snaps = integrate_ode(v, single(0.25, {0.5, 0.5}), 1.0, opts);
    CHECK(snaps.back().time == 1.0);
    CHECK(snaps.back().positions[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(snaps.back().positions[1] == doctest::Approx(-0.25).epsilon(1e-12));
  }
}

TEST_CASE("integrator convergence orders") {
  double r4 = std::log2(final_error_1d(OdeMethod::rk4, 0.2) /
                        final_error_1d(OdeMethod::rk4, 0.1));
  CHECK(r4 > 3.8);
  double r1 = std::log2(final_error_1d(OdeMethod::euler, 0.02) /
                        final_error_1d(OdeMethod::euler, 0.01));
  CHECK(std::abs(r1 - 1.0) < 0.2);
}

TEST_CASE("1d flow preserves particle order and compact support") {
  VelocityField v = make_field(
      "bump", {{"center", {0.0}}, {"radius", 1.0}, {"amplitude", {0.5}}});
  Ensemble init;
  init.dim = 1;
  std::size_t n = 201;
  for (std::size_t i = 0; i < n; ++i)
    init.positions.push_back(-2.0 + 4.0 * static_cast<double>(i) /
                                        static_cast<double>(n - 1));
  OdeOptions opts;
  opts.dt = 0.01;
  auto snaps = integrate_ode(v, init, 1.0, opts);
  const Ensemble& fin = snaps.back();
  for (std::size_t i = 0; i + 1 < n; ++i)
    CHECK(fin.at(i)[0] < fin.at(i + 1)[0]);
  CHECK(fin.at(0)[0] == -2.0);
  CHECK(fin.at(n - 1)[0] == 2.0);
}

TEST_CASE("zero diffusion reproduces the euler path bitwise") {
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {0.3};
  dist.cov = {0.04};
  Ensemble init = sample_initial(dist, 64, 5);

  SdeSpec spec;
  spec.drift = make_field("damped", {{"dim", 1}});
  spec.diffusion = [](double, const double*) { return Mat{0.0}; };
  spec.noise.kind = NoiseKind::brownian;
  spec.noise.seed = 3;
  auto sde = integrate_sde(spec, init, 0.5, 0.01);

  OdeOptions opts;
  opts.method = OdeMethod::euler;
  opts.dt = 0.01;
  auto ode = integrate_ode(spec.drift, init, 0.5, opts);
  CHECK(sde.back().positions == ode.back().positions);

  spec.diffusion = nullptr;
  spec.noise.kind = NoiseKind::zero;
  // Zero noise kind with a unit diffusion matrix is the same degenerate SDE.
  spec.diffusion = [](double, const double*) { return Mat{1.0}; };
  auto sde0 = integrate_sde(spec, init, 0.5, 0.01);
  CHECK(sde0.back().positions == ode.back().positions);
}

TEST_CASE("driftless unit diffusion gives brownian spread") {
  SdeSpec spec;
  spec.drift = make_field("constant", {{"value", {0.0}}});
  spec.diffusion = [](double, const double*) { return Mat{1.0}; };
  spec.noise.kind = NoiseKind::brownian;
  spec.noise.seed = 11;
  InitialDist dist;
  dist.kind = InitialDist::Kind::delta_cloud;
  dist.center = {0.0};
  Ensemble init = sample_initial(dist, 50000, 7);
  auto snaps = integrate_sde(spec, init, 1.0, 0.05);
  CHECK(std::abs(axis_mean(snaps.back(), 0)) < 0.02);
  CHECK(axis_cov(snaps.back(), 0, 0) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("ornstein-uhlenbeck relaxation variance") {
  SdeSpec spec;
  spec.drift = make_field("damped", {{"dim", 1}});
  spec.diffusion = [](double, const double*) { return Mat{1.0}; };
  spec.noise.seed = 13;
  InitialDist dist;
  dist.kind = InitialDist::Kind::delta_cloud;
  dist.center = {0.0};
  Ensemble init = sample_initial(dist, 50000, 9);
  auto snaps = integrate_sde(spec, init, 2.0, 0.01);
  double expected = 0.5 * (1.0 - std::exp(-4.0));
  CHECK(axis_cov(snaps.back(), 0, 0) ==
        doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("initial distributions: gaussian moments") {
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {1.0, -2.0};
  dist.cov = {0.04, 0.01, 0.01, 0.09};
  Ensemble e = sample_initial(dist, 200000, 21);
  CHECK(std::abs(axis_mean(e, 0) - 1.0) < 2e-3);
  CHECK(std::abs(axis_mean(e, 1) + 2.0) < 3e-3);
  CHECK(axis_cov(e, 0, 0) == doctest::Approx(0.04).epsilon(0.02));
  CHECK(axis_cov(e, 1, 1) == doctest::Approx(0.09).epsilon(0.02));
  CHECK(std::abs(axis_cov(e, 0, 1) - 0.01) < 1e-3);
}

TEST_CASE("initial distributions: uniform box and delta cloud") {
  InitialDist box;
  box.kind = InitialDist::Kind::uniform;
  box.lo = {0.0, 1.0};
  box.hi = {2.0, 3.0};
  Ensemble e = sample_initial(box, 100000, 2);
  for (std::size_t i = 0; i < e.n(); ++i) {
    CHECK(e.at(i)[0] >= 0.0);
    CHECK(e.at(i)[0] <= 2.0);
  }
  CHECK(std::abs(axis_mean(e, 0) - 1.0) < 0.02);
  CHECK(std::abs(axis_mean(e, 1) - 2.0) < 0.02);
  CHECK(axis_cov(e, 0, 0) == doctest::Approx(1.0 / 3.0).epsilon(0.03));

  InitialDist point;
  point.kind = InitialDist::Kind::delta_cloud;
  point.center = {0.5, -0.5};
  Ensemble p = sample_initial(point, 1000, 3);
  for (std::size_t i = 0; i < p.n(); ++i) {
    CHECK(p.at(i)[0] == 0.5);
    CHECK(p.at(i)[1] == -0.5);
  }

  point.radius = 0.25;
  Ensemble cloud = sample_initial(point, 5000, 4);
  for (std::size_t i = 0; i < cloud.n(); ++i) {
    double dx = cloud.at(i)[0] - 0.5, dy = cloud.at(i)[1] + 0.5;
    CHECK(dx * dx + dy * dy <= 0.25 * 0.25 * (1.0 + 1e-12));
  }
}

TEST_CASE("per-particle streams make samples prefix-stable") {
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {0.0};
  dist.cov = {1.0};
  Ensemble a = sample_initial(dist, 100, 17);
  Ensemble b = sample_initial(dist, 200, 17);
  Ensemble c = sample_initial(dist, 100, 18);
  CHECK(std::equal(a.positions.begin(), a.positions.end(),
                   b.positions.begin()));
  CHECK(a.positions != c.positions);
}

TEST_CASE("ensemble csv round-trips exactly") {
  VelocityField v = make_field("damped", {{"dim", 2}});
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {0.0, 0.0};
  dist.cov = {1.0, 0.2, 0.2, 1.0};
  Ensemble init = sample_initial(dist, 25, 1);
  OdeOptions opts;
  opts.dt = 0.05;
  opts.output_times = {0.25, 0.5};
  auto snaps = integrate_ode(v, init, 0.5, opts);
  REQUIRE(snaps.size() == 2);

  std::string file = "ensembles_roundtrip.csv";
  write_ensembles_csv(file, snaps);
  auto back = read_ensembles_csv(file);
  REQUIRE(back.size() == snaps.size());
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    CHECK(back[k].time == snaps[k].time);
    CHECK(back[k].dim == snaps[k].dim);
    CHECK(back[k].positions == snaps[k].positions);
  }
  std::remove(file.c_str());
}

TEST_CASE("dimension mismatches are rejected") {
  VelocityField v = make_field("damped", {{"dim", 2}});
  CHECK_THROWS_AS(integrate_ode(v, single(0.0, {1.0}), 1.0, OdeOptions{}),
                  ContractViolation);
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {0.0, 0.0};
  dist.cov = {1.0};
  CHECK_THROWS_AS(sample_initial(dist, 10, 0), ContractViolation);
}

TEST_CASE("finite-time blowup raises a divergence error") {
  VelocityField v = make_velocity_field(
      1, [](auto, const auto* x, auto* out) { out[0] = x[0] * x[0]; });
  bool threw = false;
  try {
    OdeOptions opts;
    opts.dt = 0.01;
    integrate_ode(v, single(0.0, {5.0}), 0.5, opts);
  } catch (const DivergenceError& e) {
    threw = true;
    CHECK(e.particle == 0);
    CHECK(e.time > 0.0);
  }
  CHECK(threw);
}
