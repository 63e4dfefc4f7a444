#include "ctlab/fields.hpp"

#include <cmath>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

void check_dim(const VelocityField& v, const Vec& x) {
  if (static_cast<int>(x.size()) != v.dim)
    throw ContractViolation("point dimension does not match field dimension");
}

struct ConstantF {
  Vec c;
  template <class S>
  void operator()(const S& t, const S*, S* out) const {
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = like_constant(c[i], t);
  }
};

struct LinearF {
  Mat a;
  int p;
  template <class S>
  void operator()(const S& t, const S* x, S* out) const {
    for (int i = 0; i < p; ++i) {
      S acc = like_constant(0.0, t);
      for (int j = 0; j < p; ++j) acc += x[j] * a[i * p + j];
      out[i] = acc;
    }
  }
};

struct Rotation2dF {
  template <class S>
  void operator()(const S&, const S* x, S* out) const {
    out[0] = -x[1];
    out[1] = x[0];
  }
};

struct DampedF {
  int p;
  template <class S>
  void operator()(const S&, const S* x, S* out) const {
    for (int i = 0; i < p; ++i) out[i] = -x[i];
  }
};

// Smooth compactly supported bell: amplitude * exp(1 - 1/(1 - |x-c|^2/r^2))
// inside the ball, identically zero outside.
struct BumpF {
  Vec center;
  double radius;
  Vec amplitude;
  template <class S>
  void operator()(const S& t, const S* x, S* out) const {
    int p = static_cast<int>(center.size());
    S q = like_constant(0.0, t);
    for (int i = 0; i < p; ++i) {
      S d = x[i] - center[i];
      q += d * d;
    }
    q *= 1.0 / (radius * radius);
    if (value_of(q) >= 1.0) {
      for (int i = 0; i < p; ++i) out[i] = like_constant(0.0, t);
      return;
    }
    using std::exp;
    S b = exp(1.0 - reciprocal_like(1.0 - q));
    for (int i = 0; i < p; ++i) out[i] = b * amplitude[i];
  }

  static double reciprocal_like(const double& v) { return 1.0 / v; }
  static Jet reciprocal_like(const Jet& j) { return reciprocal(j); }
};

Vec parse_vec(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array())
    throw ContractViolation(std::string("field parameter '") + key +
                            "' missing or not an array");
  return j.at(key).get<Vec>();
}

}  // namespace

ScalarField coordinate_field(int i) {
  ScalarField s;
  s.eval_d = [i](double, const double* x) { return x[i]; };
  s.eval_j = [i](const Jet&, const Jet* x) { return x[i]; };
  return s;
}

std::vector<std::string> field_catalog() {
  return {"bump", "constant", "damped", "linear", "rotation2d"};
}

VelocityField make_field(const std::string& name,
                         const nlohmann::json& params) {
  VelocityField v;
  if (name == "constant") {
    Vec c = parse_vec(params, "value");
    v = make_velocity_field(static_cast<int>(c.size()), ConstantF{c});
    v.sup_bound = norm_inf(c);
  } else if (name == "linear") {
    if (!params.contains("matrix"))
      throw ContractViolation("field parameter 'matrix' missing");
    auto rows = params.at("matrix").get<std::vector<Vec>>();
    int p = static_cast<int>(rows.size());
    Mat a(static_cast<std::size_t>(p) * p);
    for (int i = 0; i < p; ++i) {
      if (static_cast<int>(rows[i].size()) != p)
        throw ContractViolation("field parameter 'matrix' is not square");
      for (int j = 0; j < p; ++j) a[i * p + j] = rows[i][j];
    }
    v = make_velocity_field(p, LinearF{a, p});
  } else if (name == "rotation2d") {
    v = make_velocity_field(2, Rotation2dF{});
  } else if (name == "damped") {
    int p = params.value("dim", 1);
    if (p < 1) throw ContractViolation("field parameter 'dim' must be >= 1");
    v = make_velocity_field(p, DampedF{p});
  } else if (name == "bump") {
    Vec c = parse_vec(params, "center");
    Vec a = parse_vec(params, "amplitude");
    double r = params.value("radius", 0.0);
    if (r <= 0.0) throw ContractViolation("field parameter 'radius' must be positive");
    if (a.size() != c.size())
      throw ContractViolation("bump center and amplitude dimensions differ");
    v = make_velocity_field(static_cast<int>(c.size()), BumpF{c, r, a});
    v.sup_bound = norm_inf(a);
    Vec lo(c), hi(c);
    for (std::size_t i = 0; i < c.size(); ++i) {
      lo[i] -= r;
      hi[i] += r;
    }
    v.support = std::make_pair(lo, hi);
  } else {
    throw ContractViolation("unknown field name '" + name + "'");
  }
  v.name = name;
  v.params = params;
  return v;
}

Vec evaluate(const VelocityField& v, double t, const Vec& x) {
  check_dim(v, x);
  Vec out(v.dim);
  v.eval_d(t, x.data(), out.data());
  return out;
}

double divergence(const VelocityField& v, double t, const Vec& x, double step,
                  bool force_numeric) {
  check_dim(v, x);
  int p = v.dim;
  if (v.has_oracle() && !force_numeric) {
    double div = 0.0;
    Jet tj = Jet::constant(t, 1);
    std::vector<Jet> xj, out;
    for (int d = 0; d < p; ++d) {
      xj.assign(p, Jet(1));
      out.assign(p, Jet(1));
      for (int e = 0; e < p; ++e)
        xj[e] = (e == d) ? Jet::variable(x[e], 1) : Jet::constant(x[e], 1);
      v.eval_j(tj, xj.data(), out.data());
      div += out[d][1];
    }
    return div;
  }
  if (step <= 0.0) throw ContractViolation("divergence step must be positive");
  double div = 0.0;
  Vec xp(x), xm(x);
  Vec vp(p), vm(p);
  for (int d = 0; d < p; ++d) {
    xp[d] = x[d] + step;
    xm[d] = x[d] - step;
    v.eval_d(t, xp.data(), vp.data());
    v.eval_d(t, xm.data(), vm.data());
    div += (vp[d] - vm[d]) / (2.0 * step);
    xp[d] = x[d];
    xm[d] = x[d];
  }
  return div;
}

std::vector<Vec> flow_jets(const VelocityField& v, double t, const Vec& x,
                           int order) {
  check_dim(v, x);
  if (order < 0) throw ContractViolation("flow_jets order must be >= 0");
  if (!v.has_oracle())
    throw ContractViolation("flow_jets requires a field with a jet oracle");
  int p = v.dim;
  std::size_t ord = static_cast<std::size_t>(order);
  std::vector<Jet> xs(p, Jet(ord));
  for (int d = 0; d < p; ++d) xs[d] = Jet::constant(x[d], ord);
  Jet tj = Jet::variable(t, ord);
  std::vector<Jet> out(p, Jet(ord));
  // Picard iteration on truncated series; pass k fixes coefficient k.
  for (int k = 0; k < order; ++k) {
    v.eval_j(tj, xs.data(), out.data());
    for (int d = 0; d < p; ++d) {
      Jet next = out[d].integrate();
      next += x[d];
      xs[d] = next;
    }
  }
  std::vector<Vec> coeff(ord + 1, Vec(p));
  for (std::size_t k = 0; k <= ord; ++k)
    for (int d = 0; d < p; ++d) coeff[k][d] = xs[d][k];
  return coeff;
}

namespace {

// One material derivative of g by central differences with spacing h.
double d_once(const VelocityField& v, const std::function<double(double, const Vec&)>& g,
              double t, const Vec& x, double h) {
  int p = v.dim;
  Vec vel(p);
  v.eval_d(t, x.data(), vel.data());
  double res = (g(t + h, x) - g(t - h, x)) / (2.0 * h);
  Vec xp(x);
  for (int d = 0; d < p; ++d) {
    xp[d] = x[d] + h;
    double fp = g(t, xp);
    xp[d] = x[d] - h;
    double fm = g(t, xp);
    xp[d] = x[d];
    res += vel[d] * (fp - fm) / (2.0 * h);
  }
  return res;
}

double apply_d_numeric(const VelocityField& v,
                       const std::function<double(double, const double*)>& f,
                       double t, const Vec& x, int order) {
  std::function<double(double, const Vec&)> level =
      [&f](double tt, const Vec& xx) { return f(tt, xx.data()); };
  // Build D^k bottom-up; level k differences with h_k = h0^(1/k), so outer
  // (noisier) levels take larger steps.
  for (int k = 1; k <= order; ++k) {
    double h = std::pow(kNumericH0, 1.0 / static_cast<double>(k));
    auto prev = level;
    level = [&v, prev, h](double tt, const Vec& xx) {
      return d_once(v, prev, tt, xx, h);
    };
    if (k == order) return level(t, x);
  }
  return level(t, x);
}

}  // namespace

double apply_D(const VelocityField& v, const ScalarField& f, double t,
               const Vec& x, int order, bool force_numeric) {
  check_dim(v, x);
  if (order < 1) throw ContractViolation("apply_D order must be >= 1");
  bool oracle = v.has_oracle() && f.has_oracle() && !force_numeric;
  if (oracle) {
    auto coeff = flow_jets(v, t, x, order);
    std::size_t ord = static_cast<std::size_t>(order);
    Jet tj = Jet::variable(t, ord);
    std::vector<Jet> xj(v.dim, Jet(ord));
    for (int d = 0; d < v.dim; ++d) {
      for (std::size_t k = 0; k <= ord; ++k) xj[d][k] = coeff[k][d];
    }
    Jet F = f.eval_j(tj, xj.data());
    double fact = 1.0;
    for (int k = 2; k <= order; ++k) fact *= k;
    return F[ord] * fact;
  }
  if (order > kMaxNumericOrder)
    throw UnsupportedOrderError(
        "numeric apply_D supports order <= 4; provide a jet oracle for higher orders");
  return apply_d_numeric(v, f.eval_d, t, x, order);
}

Vec ShiftSeries::eval(double s) const {
  Vec g(base_point.size(), 0.0);
  double sj = 1.0;
  for (int j = 1; j <= truncation; ++j) {
    sj *= s;
    const Vec& c = coefficients[j - 1];
    for (std::size_t d = 0; d < g.size(); ++d) g[d] += c[d] * sj;
  }
  return g;
}

double ShiftSeries::last_term_magnitude(double s) const {
  if (coefficients.empty()) return 0.0;
  return norm_inf(coefficients.back()) * std::pow(std::fabs(s), truncation);
}

ShiftSeries shift_series(const VelocityField& v, double t, const Vec& x,
                         int truncation, bool force_numeric) {
  check_dim(v, x);
  if (truncation < 1)
    throw ContractViolation("shift series truncation must be >= 1");
  ShiftSeries s;
  s.base_point = x;
  s.base_time = t;
  s.truncation = truncation;
  if (v.has_oracle() && !force_numeric) {
    auto coeff = flow_jets(v, t, x, truncation);
    s.coefficients.assign(coeff.begin() + 1, coeff.end());
    return s;
  }
  // D^j id = D^(j-1) v componentwise; the numeric cascade caps the depth.
  if (truncation - 1 > kMaxNumericOrder)
    throw UnsupportedOrderError(
        "numeric shift series supports truncation <= 5; provide a jet oracle");
  s.coefficients.assign(truncation, Vec(v.dim, 0.0));
  Vec v0 = evaluate(v, t, x);
  double fact = 1.0;
  for (int j = 1; j <= truncation; ++j) {
    fact *= j;
    for (int d = 0; d < v.dim; ++d) {
      double dj;
      if (j == 1) {
        dj = v0[d];
      } else {
        ScalarField comp;
        const auto eval_d = v.eval_d;
        int dim = v.dim;
        comp.eval_d = [eval_d, dim, d](double tt, const double* xx) {
          Vec out(dim);
          eval_d(tt, xx, out.data());
          return out[d];
        };
        dj = apply_D(v, comp, t, x, j - 1, true);
      }
      s.coefficients[j - 1][d] = dj / fact;
    }
  }
  return s;
}

}  // namespace ctlab
