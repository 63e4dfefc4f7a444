#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctlab/jet.hpp"
#include "ctlab/linalg.hpp"

namespace ctlab {

// Prototype-directed construction of a scalar of the active numeric type.
inline double like_constant(double v, const double&) { return v; }
inline Jet like_constant(double v, const Jet& proto) {
  return Jet::constant(v, proto.order());
}
inline double value_of(const double& v) { return v; }
inline double value_of(const Jet& j) { return j.value(); }

// Time-dependent velocity field on R^p.  Immutable value type; eval_d is the
// plain evaluation and eval_j, when present, evaluates the same closed form
// on truncated Taylor series and so acts as an exact derivative oracle of
// arbitrary order.  All catalog fields provide eval_j; user fields built
// from a double-only callable fall back to nested central differences.
struct VelocityField {
  int dim = 0;
  std::function<void(double, const double*, double*)> eval_d;
  std::function<void(const Jet&, const Jet*, Jet*)> eval_j;
  std::optional<double> sup_bound;
  std::optional<std::pair<Vec, Vec>> support;  // axis-aligned box lo, hi
  std::string name = "custom";
  nlohmann::json params = nlohmann::json::object();

  bool has_oracle() const { return static_cast<bool>(eval_j); }
};

// Scalar observable f(t, x); eval_j optional, required for exact D^j f.
struct ScalarField {
  std::function<double(double, const double*)> eval_d;
  std::function<Jet(const Jet&, const Jet*)> eval_j;

  bool has_oracle() const { return static_cast<bool>(eval_j); }
};

template <class F>
VelocityField make_velocity_field(int dim, F f) {
  VelocityField v;
  v.dim = dim;
  v.eval_d = [f](double t, const double* x, double* out) { f(t, x, out); };
  v.eval_j = [f](const Jet& t, const Jet* x, Jet* out) { f(t, x, out); };
  return v;
}

template <class F>
ScalarField make_scalar_field(F f) {
  ScalarField s;
  s.eval_d = [f](double t, const double* x) { return f(t, x); };
  s.eval_j = [f](const Jet& t, const Jet* x) { return f(t, x); };
  return s;
}

// The i-th coordinate function u -> u_i.
ScalarField coordinate_field(int i);

// Catalog: bump, constant, damped, linear, rotation2d (stable order).
std::vector<std::string> field_catalog();
VelocityField make_field(const std::string& name, const nlohmann::json& params);

Vec evaluate(const VelocityField& v, double t, const Vec& x);

// div v at (t, x); exact through the oracle when present, otherwise central
// differences with the given spacing.
double divergence(const VelocityField& v, double t, const Vec& x,
                  double step = 1e-4, bool force_numeric = false);

// Taylor coefficients of the characteristic x'(s) = v(t+s, x(s)), x(0) = x,
// for orders 0..order.  Coefficient j equals D^j(id)/j! at (t, x).
std::vector<Vec> flow_jets(const VelocityField& v, double t, const Vec& x,
                           int order);

// (d/dt + v . grad)^order applied to f at (t, x).  Uses the jet oracle when
// both the field and f carry one; the numeric path nests central differences
// with the step cascade h_j = h0^(1/j), h0 = 1e-5, and supports order <= 4.
double apply_D(const VelocityField& v, const ScalarField& f, double t,
               const Vec& x, int order, bool force_numeric = false);

// Truncated shift power series g(x, t; s) = sum_{j=1..J} coefficients[j-1] s^j
// with coefficients[j-1] = D^j(id)/j!.
struct ShiftSeries {
  Vec base_point;
  double base_time = 0.0;
  int truncation = 0;
  std::vector<Vec> coefficients;

  Vec eval(double s) const;
  // Magnitude of the last retained term at shift s; the convergence
  // diagnostic reported alongside every series evaluation.
  double last_term_magnitude(double s) const;
};

ShiftSeries shift_series(const VelocityField& v, double t, const Vec& x,
                         int truncation, bool force_numeric = false);

inline constexpr int kMaxNumericOrder = 4;
inline constexpr double kNumericH0 = 1e-5;

}  // namespace ctlab
