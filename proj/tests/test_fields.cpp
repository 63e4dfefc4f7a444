#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctlab/errors.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/linalg.hpp"

using namespace ctlab;

TEST_CASE("catalog is stable and validates names") {
  std::vector<std::string> names = field_catalog();
  CHECK(names == std::vector<std::string>{"bump", "constant", "damped",
                                          "linear", "rotation2d"});
  CHECK_THROWS_AS(make_field("vortex", {}), ContractViolation);
}

TEST_CASE("damped field evaluates to -x") {
  VelocityField v = make_field("damped", {{"dim", 2}});
  Vec out = evaluate(v, 0.0, {3.0, -1.5});
  CHECK(out[0] == -3.0);
  CHECK(out[1] == 1.5);
  CHECK(v.has_oracle());
}

TEST_CASE("shift series matches the exponential flow of v = -x") {
  // g(1, 0; 0.1) = e^{-0.1} - 1, the closed-form displacement.
  VelocityField v = make_field("damped", {{"dim", 1}});
  ShiftSeries s = shift_series(v, 0.0, {1.0}, 10);
  double expected = std::expm1(-0.1);
  CHECK(std::abs(s.eval(0.1)[0] - expected) < 1e-10);
  CHECK(s.last_term_magnitude(0.1) < 1e-16);
  CHECK(s.truncation == 10);
  CHECK(s.coefficients.size() == 10);
  // Coefficient j-1 is D^j(id)/j! = (-1)^j x / j!.
  CHECK(s.coefficients[0][0] == doctest::Approx(-1.0));
  CHECK(s.coefficients[1][0] == doctest::Approx(0.5));
}

TEST_CASE("series displacement agrees with the matrix exponential") {
  nlohmann::json params;
  params["matrix"] = {{0.3, -1.0}, {1.0, -0.2}};
  VelocityField v = make_field("linear", params);
  Vec x0{0.7, -0.4};
  double s = 0.2;
  ShiftSeries series = shift_series(v, 0.0, x0, 14);
  Vec g = series.eval(s);

  Mat a{0.3, -1.0, 1.0, -0.2};
  for (double& e : a) e *= s;
  Vec moved = matvec(mat_exp(a, 2), x0);
  CHECK(std::abs(g[0] - (moved[0] - x0[0])) < 1e-12);
  CHECK(std::abs(g[1] - (moved[1] - x0[1])) < 1e-12);
}

TEST_CASE("material derivative of the identity under v = -x") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  ScalarField f = coordinate_field(0);
  // D x = -x, D^2 x = x, D^3 x = -x at x = 2.
  CHECK(apply_D(v, f, 0.0, {2.0}, 1) == doctest::Approx(-2.0));
  CHECK(apply_D(v, f, 0.0, {2.0}, 2) == doctest::Approx(2.0));
  CHECK(apply_D(v, f, 0.0, {2.0}, 3) == doctest::Approx(-2.0));
}

TEST_CASE("numeric fallback tracks the oracle") {
  VelocityField v = make_field("rotation2d", {});
  ScalarField f = coordinate_field(1);
  Vec x{0.8, 0.3};
  for (int order = 1; order <= 2; ++order) {
    double exact = apply_D(v, f, 0.0, x, order);
    double numeric = apply_D(v, f, 0.0, x, order, true);
    CHECK(std::abs(numeric - exact) < 1e-4);
  }
  CHECK_THROWS_AS(apply_D(v, f, 0.0, x, kMaxNumericOrder + 1, true),
                  UnsupportedOrderError);
}

TEST_CASE("divergence: oracle exact, numeric second order") {
  VelocityField damped = make_field("damped", {{"dim", 3}});
  CHECK(divergence(damped, 0.0, {0.2, -0.1, 0.4}) == doctest::Approx(-3.0));

  nlohmann::json params;
  params["center"] = {0.0};
  params["radius"] = 1.0;
  params["amplitude"] = {1.0};
  VelocityField bump = make_field("bump", params);
  Vec x{0.3};
  double exact = divergence(bump, 0.0, x);
  double e1 = std::abs(divergence(bump, 0.0, x, 1e-2, true) - exact);
  double e2 = std::abs(divergence(bump, 0.0, x, 5e-3, true) - exact);
  double order = std::log(e1 / e2) / std::log(2.0);
  CHECK(order > 1.8);
}

TEST_CASE("bump field vanishes outside its support") {
  nlohmann::json params;
  params["center"] = {0.0, 0.0};
  params["radius"] = 0.5;
  params["amplitude"] = {2.0, 0.0};
  VelocityField v = make_field("bump", params);
  Vec inside = evaluate(v, 0.0, {0.1, 0.1});
  CHECK(norm2(inside) > 0.0);
  Vec outside = evaluate(v, 0.0, {0.6, 0.0});
  CHECK(outside[0] == 0.0);
  CHECK(outside[1] == 0.0);
  CHECK(v.sup_bound.has_value());
  CHECK(v.support.has_value());
}

TEST_CASE("flow jets start at the base point with velocity") {
  VelocityField v = make_field("constant", {{"value", {2.0, -1.0}}});
  std::vector<Vec> jets = flow_jets(v, 0.0, {5.0, 5.0}, 3);
  CHECK(jets[0][0] == 5.0);
  CHECK(jets[1][0] == 2.0);
  CHECK(jets[1][1] == -1.0);
  // Constant flow has no curvature.
  CHECK(jets[2][0] == 0.0);
  CHECK(jets[3][1] == 0.0);
}

TEST_CASE("shift series convergence diagnostic grows with s") {
  VelocityField v = make_field("damped", {{"dim", 1}});
  ShiftSeries s = shift_series(v, 0.0, {1.0}, 4);
  CHECK(s.last_term_magnitude(0.5) > s.last_term_magnitude(0.1));
  // Term J at shift s is |s^J / J!| for this field.
  CHECK(s.last_term_magnitude(0.5) ==
        doctest::Approx(std::pow(0.5, 4) / 24.0));
}

TEST_CASE("time-dependent custom field uses the clock") {
  VelocityField v = make_velocity_field(1, [](const auto& t, const auto* x,
                                              auto* out) {
    out[0] = t * x[0];
  });
  CHECK(evaluate(v, 2.0, {3.0})[0] == 6.0);
  // D x = t x, D^2 x = x + t^2 x.
  ScalarField f = coordinate_field(0);
  CHECK(apply_D(v, f, 2.0, {3.0}, 2) == doctest::Approx(3.0 + 4.0 * 3.0));
}
