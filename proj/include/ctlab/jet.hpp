#pragma once

#include <cstddef>
#include <vector>

namespace ctlab {

// Truncated Taylor polynomial in one formal variable s.  All arithmetic is
// exact series arithmetic truncated at a common order, which turns any
// closed-form velocity field into an exact derivative oracle: evaluating the
// field on the flow's jet yields the material-derivative cascade D^j without
// finite differencing.
class Jet {
 public:
  explicit Jet(std::size_t order) : c_(order + 1, 0.0) {}
  static Jet constant(double v, std::size_t order);
  // Value v with unit first derivative: v + s.
  static Jet variable(double v, std::size_t order);

  std::size_t order() const { return c_.size() - 1; }
  double operator[](std::size_t k) const { return c_[k]; }
  double& operator[](std::size_t k) { return c_[k]; }
  double value() const { return c_[0]; }

  Jet operator-() const;
  Jet& operator+=(const Jet& o);
  Jet& operator-=(const Jet& o);
  Jet& operator+=(double v);
  Jet& operator-=(double v);
  Jet& operator*=(double v);

  friend Jet operator+(Jet a, const Jet& b) { return a += b; }
  friend Jet operator-(Jet a, const Jet& b) { return a -= b; }
  friend Jet operator+(Jet a, double b) { return a += b; }
  friend Jet operator+(double a, Jet b) { return b += a; }
  friend Jet operator-(Jet a, double b) { return a -= b; }
  friend Jet operator-(double a, const Jet& b);
  friend Jet operator*(const Jet& a, const Jet& b);
  friend Jet operator*(Jet a, double b) { return a *= b; }
  friend Jet operator*(double a, Jet b) { return b *= a; }
  friend Jet operator/(const Jet& a, const Jet& b);
  friend Jet operator/(Jet a, double b) { return a *= 1.0 / b; }

  // Antiderivative with zero constant term: coefficient k -> k+1 slot.
  Jet integrate() const;

 private:
  std::vector<double> c_;
};

Jet exp(const Jet& a);
Jet sin(const Jet& a);
Jet cos(const Jet& a);
// Series reciprocal; requires a nonzero constant term.
Jet reciprocal(const Jet& a);

}  // namespace ctlab
