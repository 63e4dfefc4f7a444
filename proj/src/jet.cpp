#include "ctlab/jet.hpp"

#include <cmath>

#include "ctlab/errors.hpp"

namespace ctlab {

Jet Jet::constant(double v, std::size_t order) {
  Jet j(order);
  j.c_[0] = v;
  return j;
}

Jet Jet::variable(double v, std::size_t order) {
  Jet j(order);
  j.c_[0] = v;
  if (order >= 1) j.c_[1] = 1.0;
  return j;
}

Jet Jet::operator-() const {
  Jet r(*this);
  for (double& v : r.c_) v = -v;
  return r;
}

Jet& Jet::operator+=(const Jet& o) {
  for (std::size_t k = 0; k < c_.size(); ++k) c_[k] += o.c_[k];
  return *this;
}

Jet& Jet::operator-=(const Jet& o) {
  for (std::size_t k = 0; k < c_.size(); ++k) c_[k] -= o.c_[k];
  return *this;
}

Jet& Jet::operator+=(double v) {
  c_[0] += v;
  return *this;
}

Jet& Jet::operator-=(double v) {
  c_[0] -= v;
  return *this;
}

Jet& Jet::operator*=(double v) {
  for (double& x : c_) x *= v;
  return *this;
}

Jet operator-(double a, const Jet& b) {
  Jet r = -b;
  r += a;
  return r;
}

Jet operator*(const Jet& a, const Jet& b) {
  Jet r(a.order());
  for (std::size_t i = 0; i < a.c_.size(); ++i) {
    if (a.c_[i] == 0.0) continue;
    for (std::size_t j = 0; i + j < b.c_.size(); ++j)
      r.c_[i + j] += a.c_[i] * b.c_[j];
  }
  return r;
}

Jet reciprocal(const Jet& a) {
  if (a[0] == 0.0)
    throw ContractViolation("series reciprocal with zero constant term");
  Jet r(a.order());
  r[0] = 1.0 / a[0];
  for (std::size_t k = 1; k <= a.order(); ++k) {
    double s = 0.0;
    for (std::size_t j = 1; j <= k; ++j) s += a[j] * r[k - j];
    r[k] = -s / a[0];
  }
  return r;
}

Jet operator/(const Jet& a, const Jet& b) { return a * reciprocal(b); }

Jet Jet::integrate() const {
  Jet r(order());
  for (std::size_t k = 0; k + 1 <= order(); ++k)
    r.c_[k + 1] = c_[k] / static_cast<double>(k + 1);
  return r;
}

namespace {

// Lift a scalar function with known derivative series at a[0] through the
// composition rule f(a)' = f'(a) a'.  For exp/sin/cos the primitive solves a
// linear ODE, which gives the standard recurrences below.
Jet compose_exp(const Jet& a) {
  Jet r(a.order());
  r[0] = std::exp(a[0]);
  for (std::size_t k = 1; k <= a.order(); ++k) {
    double s = 0.0;
    for (std::size_t j = 1; j <= k; ++j) s += j * a[j] * r[k - j];
    r[k] = s / static_cast<double>(k);
  }
  return r;
}

}  // namespace

Jet exp(const Jet& a) { return compose_exp(a); }

Jet sin(const Jet& a) {
  Jet s(a.order()), c(a.order());
  s[0] = std::sin(a[0]);
  c[0] = std::cos(a[0]);
  for (std::size_t k = 1; k <= a.order(); ++k) {
    double ds = 0.0, dc = 0.0;
    for (std::size_t j = 1; j <= k; ++j) {
      ds += j * a[j] * c[k - j];
      dc += j * a[j] * s[k - j];
    }
    s[k] = ds / static_cast<double>(k);
    c[k] = -dc / static_cast<double>(k);
  }
  return s;
}

Jet cos(const Jet& a) {
  Jet s(a.order()), c(a.order());
  s[0] = std::sin(a[0]);
  c[0] = std::cos(a[0]);
  for (std::size_t k = 1; k <= a.order(); ++k) {
    double ds = 0.0, dc = 0.0;
    for (std::size_t j = 1; j <= k; ++j) {
      ds += j * a[j] * c[k - j];
      dc += j * a[j] * s[k - j];
    }
    s[k] = ds / static_cast<double>(k);
    c[k] = -dc / static_cast<double>(k);
  }
  return c;
}

}  // namespace ctlab
