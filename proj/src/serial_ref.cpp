#include "ctlab/serial_ref.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "ctlab/errors.hpp"
#include "ctlab/rng.hpp"

// Deliberate duplication: these loops repeat the parallel kernels line for
// line so that any drift between the two shows up as a bit difference in the
// tests, not as a silently shared bug.

namespace ctlab::serial {

namespace {

bool near(double a, double b) {
  double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) <= 1e-12 * scale;
}

struct StepGrid {
  std::vector<double> times;
  std::vector<std::size_t> snap_idx;
};

StepGrid make_step_grid(double t0, double t_end, double dt,
                        const std::vector<double>& output_times) {
  if (!(dt > 0.0)) throw ContractViolation("dt must be positive");
  if (!(t_end > t0)) throw ContractViolation("t_end must exceed start time");

  std::vector<double> targets = output_times;
  targets.push_back(t_end);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end(),
                            [](double a, double b) { return near(a, b); }),
                targets.end());
  for (double s : targets)
    if (s <= t0 || s > t_end + 1e-12 * std::max(1.0, std::abs(t_end)))
      throw ContractViolation("output times must lie in (t0, t_end]");
  targets.back() = t_end;

  StepGrid g;
  g.times.push_back(t0);
  for (double target : targets) {
    double start = g.times.back();
    double span = target - start;
    auto m = static_cast<std::size_t>(std::floor(span / dt + 1e-9));
    bool exact = m > 0 && span - static_cast<double>(m) * dt < dt * 1e-9;
    std::size_t interior = exact ? m - 1 : m;
    for (std::size_t k = 1; k <= interior; ++k)
      g.times.push_back(start + static_cast<double>(k) * dt);
    g.times.push_back(target);
    g.snap_idx.push_back(g.times.size() - 1);
  }
  return g;
}

void check_init(const VelocityField& v, const Ensemble& init) {
  if (v.dim < 1) throw ContractViolation("field dimension must be >= 1");
  if (init.dim != v.dim)
    throw ContractViolation("ensemble dimension does not match the field");
}

std::vector<Ensemble> alloc_snapshots(const StepGrid& g, const Ensemble& init) {
  std::vector<Ensemble> snaps(g.snap_idx.size());
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    snaps[k].time = g.times[g.snap_idx[k]];
    snaps[k].dim = init.dim;
    snaps[k].positions.assign(init.positions.size(), 0.0);
  }
  return snaps;
}

bool finite_row(const double* x, int p) {
  for (int d = 0; d < p; ++d)
    if (!std::isfinite(x[d])) return false;
  return true;
}

Vec poly_transform(const Vec& b, int degree) {
  double r2 = 0.0;
  for (double v : b) r2 += v * v;
  double f = std::pow(r2, degree / 2.0);
  Vec w(b);
  for (double& v : w) v *= f;
  return w;
}

std::vector<std::size_t> strides_of(const std::vector<Axis>& axes) {
  std::vector<std::size_t> s(axes.size(), 1);
  for (int d = static_cast<int>(axes.size()) - 2; d >= 0; --d)
    s[d] = s[d + 1] * static_cast<std::size_t>(axes[d + 1].cells);
  return s;
}

struct Shape {
  int p = 0;
  std::vector<std::size_t> stride;
  std::vector<int> cells;
  std::vector<double> width;
  std::size_t n = 1;
};

Shape shape_of(const DensityGrid& d) {
  Shape s;
  s.p = d.dim();
  s.stride = strides_of(d.axes);
  s.cells.resize(s.p);
  s.width.resize(s.p);
  for (int a = 0; a < s.p; ++a) {
    s.cells[a] = d.axes[a].cells;
    s.width[a] = d.axes[a].width();
    s.n *= static_cast<std::size_t>(s.cells[a]);
  }
  return s;
}

int axis_index(const Shape& s, std::size_t flat, int a) {
  return static_cast<int>(flat / s.stride[a] %
                          static_cast<std::size_t>(s.cells[a]));
}

void check_margin(const DensityGrid& d, const Shape& s) {
  double maxv = 0.0;
  for (double v : d.values) maxv = std::max(maxv, v);
  double thr = 1e-12 * maxv;
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    if (d.values[i] <= thr) continue;
    for (int a = 0; a < s.p; ++a) {
      int ia = axis_index(s, i, a);
      if (ia < 2 || ia >= s.cells[a] - 2)
        throw BoundaryLeakError(
            "density support reached the 2-cell boundary margin");
    }
  }
}

void face_point(const DensityGrid& d, const Shape& s, std::size_t flat, int a,
                double* x) {
  for (int b = 0; b < s.p; ++b) {
    int ib = axis_index(s, flat, b);
    x[b] = b == a ? d.axes[b].lo + ib * s.width[b] : d.axes[b].center(ib);
  }
}

double max_face_speed(const VelocityField& v, const DensityGrid& d,
                      const Shape& s, double t, int a) {
  double speed = 0.0;
  Vec x(s.p), vv(s.p);
  for (std::size_t i = 0; i < s.n; ++i) {
    face_point(d, s, i, a, x.data());
    v.eval_d(t, x.data(), vv.data());
    speed = std::max(speed, std::abs(vv[a]));
    if (axis_index(s, i, a) == s.cells[a] - 1) {
      x[a] = d.axes[a].hi;
      v.eval_d(t, x.data(), vv.data());
      speed = std::max(speed, std::abs(vv[a]));
    }
  }
  return speed;
}

double admissible_dt(const VelocityField& v, const DensityGrid& d,
                     const Shape& s, double t) {
  double denom = 0.0;
  for (int a = 0; a < s.p; ++a)
    denom += max_face_speed(v, d, s, t, a) / s.width[a];
  if (denom == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / denom;
}

}  // namespace

Ensemble sample_initial(const InitialDist& dist, std::size_t n,
                        std::uint64_t seed) {
  int p = dist.dim();
  if (p < 1) throw ContractViolation("initial distribution has dimension 0");

  Mat chol;
  if (dist.kind == InitialDist::Kind::gaussian)
    chol = cholesky_psd(dist.cov, p);

  Ensemble e;
  e.dim = p;
  e.positions.assign(n * static_cast<std::size_t>(p), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(seed, i);
    double* x = e.at(i);
    switch (dist.kind) {
      case InitialDist::Kind::gaussian: {
        Vec z(p);
        for (int d = 0; d < p; ++d) z[d] = rng.normal();
        for (int r = 0; r < p; ++r) {
          double s = dist.mean[r];
          for (int c = 0; c <= r; ++c) s += chol[r * p + c] * z[c];
          x[r] = s;
        }
        break;
      }
      case InitialDist::Kind::uniform:
        for (int d = 0; d < p; ++d)
          x[d] = dist.lo[d] + rng.uniform() * (dist.hi[d] - dist.lo[d]);
        break;
      case InitialDist::Kind::delta_cloud: {
        if (dist.radius == 0.0) {
          for (int d = 0; d < p; ++d) x[d] = dist.center[d];
          break;
        }
        Vec z(p);
        for (int d = 0; d < p; ++d) z[d] = rng.normal();
        double r = norm2(z);
        if (r < 1e-300) {
          z.assign(p, 0.0);
          z[0] = 1.0;
          r = 1.0;
        }
        double scale = dist.radius *
                       std::pow(rng.uniform(), 1.0 / static_cast<double>(p)) /
                       r;
        for (int d = 0; d < p; ++d) x[d] = dist.center[d] + scale * z[d];
        break;
      }
    }
  }
  return e;
}

std::vector<Ensemble> integrate_ode(const VelocityField& v,
                                    const Ensemble& init, double t_end,
                                    const OdeOptions& opts) {
  check_init(v, init);
  if (near(t_end, init.time)) {
    Ensemble final = init;
    final.time = t_end;
    return {final};
  }
  StepGrid grid = make_step_grid(init.time, t_end, opts.dt, opts.output_times);
  std::vector<Ensemble> snaps = alloc_snapshots(grid, init);

  int p = init.dim;
  bool rk4 = opts.method == OdeMethod::rk4;
  Vec x(p), k1(p), k2(p), k3(p), k4(p), xt(p);
  for (std::size_t i = 0; i < init.n(); ++i) {
    std::copy(init.at(i), init.at(i) + p, x.begin());
    std::size_t next_snap = 0;
    for (std::size_t s = 0; s + 1 < grid.times.size(); ++s) {
      double t = grid.times[s];
      double h = grid.times[s + 1] - t;
      v.eval_d(t, x.data(), k1.data());
      if (rk4) {
        for (int d = 0; d < p; ++d) xt[d] = x[d] + 0.5 * h * k1[d];
        v.eval_d(t + 0.5 * h, xt.data(), k2.data());
        for (int d = 0; d < p; ++d) xt[d] = x[d] + 0.5 * h * k2[d];
        v.eval_d(t + 0.5 * h, xt.data(), k3.data());
        for (int d = 0; d < p; ++d) xt[d] = x[d] + h * k3[d];
        v.eval_d(t + h, xt.data(), k4.data());
        for (int d = 0; d < p; ++d)
          x[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
      } else {
        for (int d = 0; d < p; ++d) x[d] += h * k1[d];
      }
      if (!finite_row(x.data(), p)) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu diverged at t = %.6g", i,
                      grid.times[s + 1]);
        throw DivergenceError("particle " + std::string(buf), i,
                              grid.times[s + 1]);
      }
      if (next_snap < grid.snap_idx.size() &&
          s + 1 == grid.snap_idx[next_snap]) {
        std::copy(x.begin(), x.end(), snaps[next_snap].at(i));
        ++next_snap;
      }
    }
  }
  return snaps;
}

std::vector<Ensemble> integrate_sde(const SdeSpec& spec, const Ensemble& init,
                                    double t_end, double dt,
                                    const std::vector<double>& output_times) {
  check_init(spec.drift, init);
  int p = init.dim;
  bool driven = spec.noise.kind != NoiseKind::zero;
  if (driven && spec.noise.dim != p)
    throw ContractViolation("noise dimension does not match the ensemble");
  if (driven && !spec.diffusion)
    throw ContractViolation("driven SDE needs a diffusion coefficient");
  if (near(t_end, init.time)) {
    Ensemble final = init;
    final.time = t_end;
    return {final};
  }
  StepGrid grid = make_step_grid(init.time, t_end, dt, output_times);
  std::vector<Ensemble> snaps = alloc_snapshots(grid, init);
  bool poly = spec.noise.kind == NoiseKind::poly_brownian;

  Vec x(p), k1(p), b(p), w(p), w_prev(p), dw(p);
  for (std::size_t i = 0; i < init.n(); ++i) {
    std::copy(init.at(i), init.at(i) + p, x.begin());
    RngStream rng(spec.noise.seed, i);
    std::fill(b.begin(), b.end(), 0.0);
    std::fill(w_prev.begin(), w_prev.end(), 0.0);
    std::size_t next_snap = 0;
    for (std::size_t s = 0; s + 1 < grid.times.size(); ++s) {
      double t = grid.times[s];
      double h = grid.times[s + 1] - t;
      spec.drift.eval_d(t, x.data(), k1.data());
      Mat sig;
      if (driven) sig = spec.diffusion(t, x.data());
      for (int d = 0; d < p; ++d) x[d] += h * k1[d];
      if (driven) {
        double sd = std::sqrt(h);
        for (int d = 0; d < p; ++d) b[d] += sd * rng.normal();
        w = poly ? poly_transform(b, spec.noise.degree) : b;
        for (int d = 0; d < p; ++d) dw[d] = w[d] - w_prev[d];
        w_prev = w;
        for (int r = 0; r < p; ++r) {
          double s2 = 0.0;
          for (int c = 0; c < p; ++c) s2 += sig[r * p + c] * dw[c];
          x[r] += s2;
        }
      }
      if (!finite_row(x.data(), p)) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu diverged at t = %.6g", i,
                      grid.times[s + 1]);
        throw DivergenceError("particle " + std::string(buf), i,
                              grid.times[s + 1]);
      }
      if (next_snap < grid.snap_idx.size() &&
          s + 1 == grid.snap_idx[next_snap]) {
        std::copy(x.begin(), x.end(), snaps[next_snap].at(i));
        ++next_snap;
      }
    }
  }
  return snaps;
}

DensityGrid histogram(const Ensemble& e, const GridSpec& spec) {
  if (e.n() == 0) throw ContractViolation("cannot histogram an empty ensemble");
  if (static_cast<int>(spec.axes.size()) != e.dim)
    throw ContractViolation("grid dimension does not match the ensemble");

  DensityGrid d;
  d.axes = spec.axes;
  d.time = e.time;
  d.values.assign(d.n_cells(), 0.0);
  int p = e.dim;
  auto strides = strides_of(d.axes);

  std::vector<long long> counts(d.n_cells(), 0);
  long long dropped = 0;
  for (std::size_t i = 0; i < e.n(); ++i) {
    const double* x = e.at(i);
    std::size_t flat = 0;
    bool inside = true;
    for (int dd = 0; dd < p; ++dd) {
      const Axis& ax = d.axes[dd];
      auto c = static_cast<long long>(std::floor((x[dd] - ax.lo) / ax.width()));
      if (x[dd] == ax.hi) c = ax.cells - 1;
      if (c < 0 || c >= ax.cells) {
        if (spec.policy == OutOfGrid::drop) {
          inside = false;
          break;
        }
        c = c < 0 ? 0 : ax.cells - 1;
      }
      flat += strides[dd] * static_cast<std::size_t>(c);
    }
    if (!inside) {
      ++dropped;
      continue;
    }
    ++counts[flat];
  }

  d.dropped = static_cast<std::size_t>(dropped);
  std::size_t kept = e.n() - d.dropped;
  if (kept == 0)
    throw ContractViolation("grid does not cover any particle of the ensemble");
  double scale = 1.0 / (static_cast<double>(kept) * d.cell_volume());
  for (std::size_t i = 0; i < counts.size(); ++i)
    d.values[i] = static_cast<double>(counts[i]) * scale;
  return d;
}

DensityGrid kde(const Ensemble& e, const GridSpec& spec, const Vec& bandwidth) {
  if (e.n() == 0) throw ContractViolation("cannot smooth an empty ensemble");
  if (static_cast<int>(spec.axes.size()) != e.dim)
    throw ContractViolation("grid dimension does not match the ensemble");

  DensityGrid d;
  d.axes = spec.axes;
  d.time = e.time;
  d.values.assign(d.n_cells(), 0.0);
  int p = e.dim;
  std::size_t n = e.n();
  double norm = 1.0 / static_cast<double>(n);
  for (int dd = 0; dd < p; ++dd)
    norm /= bandwidth[dd] * std::sqrt(2.0 * 3.14159265358979323846);

  std::vector<int> idx(p);
  Vec center(p);
  for (std::size_t ci = 0; ci < d.values.size(); ++ci) {
    unravel_index(d.axes, ci, idx.data());
    for (int dd = 0; dd < p; ++dd) center[dd] = d.axes[dd].center(idx[dd]);
    double s = 0.0, c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = e.at(i);
      double q = 0.0;
      for (int dd = 0; dd < p; ++dd) {
        double z = (center[dd] - x[dd]) / bandwidth[dd];
        q += z * z;
      }
      double y = std::exp(-0.5 * q) - c;
      double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    d.values[ci] = s * norm;
  }

  double m = d.mass();
  if (!(m > 0.0)) throw ContractViolation("kernel mass vanished on the grid");
  for (double& v : d.values) v /= m;
  return d;
}

DensityGrid step_continuity(const VelocityField& v, const DensityGrid& d,
                            double dt) {
  if (v.dim != d.dim())
    throw ContractViolation("field dimension does not match the grid");
  if (!(dt > 0.0)) throw ContractViolation("dt must be positive");
  Shape s = shape_of(d);
  check_margin(d, s);
  double adm = admissible_dt(v, d, s, d.time);
  if (dt > adm * (1.0 + 1e-12)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", adm);
    throw CflViolation(
        "dt exceeds the stability limit; admissible dt = " + std::string(buf),
        adm);
  }

  DensityGrid out = d;
  std::vector<double> flux(s.n);
  Vec x(s.p), vv(s.p);
  for (int a = 0; a < s.p; ++a) {
    std::size_t nlines = s.n / static_cast<std::size_t>(s.cells[a]);
    std::vector<double> top(nlines);
    std::size_t slab = s.stride[a] * static_cast<std::size_t>(s.cells[a]);

    for (std::size_t i = 0; i < s.n; ++i) {
      int ia = axis_index(s, i, a);
      double ul = ia > 0 ? d.values[i - s.stride[a]] : 0.0;
      double ur = d.values[i];
      face_point(d, s, i, a, x.data());
      v.eval_d(d.time, x.data(), vv.data());
      flux[i] = vv[a] > 0.0 ? vv[a] * ul : vv[a] * ur;
    }
    for (std::size_t line = 0; line < nlines; ++line) {
      std::size_t outer = line / s.stride[a];
      std::size_t inner = line % s.stride[a];
      std::size_t last = outer * slab +
                         static_cast<std::size_t>(s.cells[a] - 1) *
                             s.stride[a] +
                         inner;
      double ul = d.values[last];
      face_point(d, s, last, a, x.data());
      x[a] = d.axes[a].hi;
      v.eval_d(d.time, x.data(), vv.data());
      top[line] = vv[a] > 0.0 ? vv[a] * ul : 0.0;
    }

    double r = dt / s.width[a];
    for (std::size_t i = 0; i < s.n; ++i) {
      int ia = axis_index(s, i, a);
      double f_up;
      if (ia == s.cells[a] - 1) {
        std::size_t outer = i / slab;
        std::size_t inner = i % s.stride[a];
        f_up = top[outer * s.stride[a] + inner];
      } else {
        f_up = flux[i + s.stride[a]];
      }
      out.values[i] -= r * (f_up - flux[i]);
    }
  }

  double maxv = 0.0;
  for (double v2 : d.values) maxv = std::max(maxv, v2);
  for (double& v2 : out.values) {
    if (v2 < 0.0) {
      if (v2 < -1e-13 * maxv)
        throw Error("upwind step produced a negative cell");
      v2 = 0.0;
    }
  }
  out.time = d.time + dt;
  return out;
}

}  // namespace ctlab::serial
