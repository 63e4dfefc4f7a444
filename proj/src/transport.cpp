#include "ctlab/transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

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
  s.stride.assign(s.p, 1);
  s.cells.resize(s.p);
  s.width.resize(s.p);
  for (int a = 0; a < s.p; ++a) {
    s.cells[a] = d.axes[a].cells;
    s.width[a] = d.axes[a].width();
  }
  for (int a = s.p - 2; a >= 0; --a)
    s.stride[a] = s.stride[a + 1] * static_cast<std::size_t>(s.cells[a + 1]);
  for (int a = 0; a < s.p; ++a) s.n *= static_cast<std::size_t>(s.cells[a]);
  return s;
}

int axis_index(const Shape& s, std::size_t flat, int a) {
  return static_cast<int>(flat / s.stride[a] %
                          static_cast<std::size_t>(s.cells[a]));
}

// Support must stay 2 cells clear of every boundary; leakage would silently
// break the unit-mass invariant the whole pipeline rests on.
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

// Face center along axis a at the lower face of cell `flat`.
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
#pragma omp parallel
  {
    Vec x(s.p), vv(s.p);
    double local = 0.0;
#pragma omp for schedule(static) nowait
    for (long long i = 0; i < static_cast<long long>(s.n); ++i) {
      face_point(d, s, static_cast<std::size_t>(i), a, x.data());
      v.eval_d(t, x.data(), vv.data());
      local = std::max(local, std::abs(vv[a]));
      if (axis_index(s, static_cast<std::size_t>(i), a) == s.cells[a] - 1) {
        x[a] = d.axes[a].hi;
        v.eval_d(t, x.data(), vv.data());
        local = std::max(local, std::abs(vv[a]));
      }
    }
#pragma omp critical
    speed = std::max(speed, local);
  }
  return speed;
}

bool any_nonzero(const Mat& m) {
  for (double v : m)
    if (v != 0.0) return true;
  return false;
}

// Central gradient of rho along axis b at cell `flat`, zero outside the grid.
double cell_gradient(const Vec& rho, const Shape& s, std::size_t flat, int b) {
  int ib = axis_index(s, flat, b);
  double lo = ib > 0 ? rho[flat - s.stride[b]] : 0.0;
  double hi = ib < s.cells[b] - 1 ? rho[flat + s.stride[b]] : 0.0;
  return (hi - lo) / (2.0 * s.width[b]);
}

// One unsplit explicit step: donor-cell advective flux per face, plus
// central diffusive flux -D grad(rho) when D is nonzero.  The caller has
// already validated dt; time is advanced by the caller.
DensityGrid step_impl(const VelocityField& v, const Mat& D,
                      const DensityGrid& d, double dt) {
  Shape s = shape_of(d);
  bool diffuse = !D.empty() && any_nonzero(D);
  DensityGrid out = d;

  std::vector<double> flux(s.n);
  for (int a = 0; a < s.p; ++a) {
    std::size_t nlines = s.n / static_cast<std::size_t>(s.cells[a]);
    std::vector<double> top(nlines);
    std::size_t slab = s.stride[a] * static_cast<std::size_t>(s.cells[a]);

#pragma omp parallel
    {
      Vec x(s.p), vv(s.p);
#pragma omp for schedule(static) nowait
      for (long long ii = 0; ii < static_cast<long long>(s.n); ++ii) {
        auto i = static_cast<std::size_t>(ii);
        int ia = axis_index(s, i, a);
        double ul = ia > 0 ? d.values[i - s.stride[a]] : 0.0;
        double ur = d.values[i];
        face_point(d, s, i, a, x.data());
        v.eval_d(d.time, x.data(), vv.data());
        double f = vv[a] > 0.0 ? vv[a] * ul : vv[a] * ur;
        if (diffuse) {
          f -= D[a * s.p + a] * (ur - ul) / s.width[a];
          for (int b = 0; b < s.p; ++b) {
            if (b == a || D[a * s.p + b] == 0.0) continue;
            double gr = cell_gradient(d.values, s, i, b);
            double gl = ia > 0 ? cell_gradient(d.values, s, i - s.stride[a], b)
                               : gr;
            f -= D[a * s.p + b] * 0.5 * (gl + gr);
          }
        }
        flux[i] = f;
      }
// Top boundary faces of each grid line along axis a.
#pragma omp for schedule(static)
      for (long long li = 0; li < static_cast<long long>(nlines); ++li) {
        auto line = static_cast<std::size_t>(li);
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
        double f = vv[a] > 0.0 ? vv[a] * ul : 0.0;
        if (diffuse) {
          f -= D[a * s.p + a] * (0.0 - ul) / s.width[a];
          for (int b = 0; b < s.p; ++b) {
            if (b == a || D[a * s.p + b] == 0.0) continue;
            f -= D[a * s.p + b] * cell_gradient(d.values, s, last, b);
          }
        }
        top[line] = f;
      }
    }

    double r = dt / s.width[a];
#pragma omp parallel for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(s.n); ++ii) {
      auto i = static_cast<std::size_t>(ii);
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
      v2 = 0.0;  // roundoff shadow of an exact zero
    }
  }
  out.time = d.time + dt;
  return out;
}

double admissible_dt(const VelocityField& v, const DensityGrid& d,
                     const Shape& s, double t, const Mat& D) {
  double denom = 0.0;
  for (int a = 0; a < s.p; ++a)
    denom += max_face_speed(v, d, s, t, a) / s.width[a];
  if (!D.empty()) {
    for (int a = 0; a < s.p; ++a)
      for (int b = 0; b < s.p; ++b) {
        double dab = std::abs(D[a * s.p + b]);
        if (dab == 0.0) continue;
        denom += (a == b ? 2.0 : 1.0) * dab / (s.width[a] * s.width[b]);
      }
  }
  if (denom == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / denom;
}

void check_dim(const VelocityField& v, const DensityGrid& d) {
  if (v.dim != d.dim())
    throw ContractViolation("field dimension does not match the grid");
}

TransportRun solve_impl(const VelocityField& v, const Mat& D,
                        const DensityGrid& d0, double t_end, double cfl,
                        const std::vector<double>& output_times) {
  check_dim(v, d0);
  if (!(cfl > 0.0 && cfl <= 1.0))
    throw ContractViolation("cfl must lie in (0, 1]");
  if (!(t_end > d0.time))
    throw ContractViolation("t_end must exceed the initial time");

  std::vector<double> targets = output_times;
  targets.push_back(t_end);
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end(),
                            [](double a, double b) {
                              return std::abs(a - b) <=
                                     1e-12 * std::max(1.0, std::abs(b));
                            }),
                targets.end());
  for (double s : targets)
    if (s <= d0.time || s > t_end + 1e-12 * std::max(1.0, std::abs(t_end)))
      throw ContractViolation("output times must lie in (t0, t_end]");
  targets.back() = t_end;

  TransportRun run;
  run.field = v;
  run.cfl = cfl;
  run.scheme = Scheme::upwind1;
  run.snapshots.push_back(d0);

  DensityGrid cur = d0;
  Shape s = shape_of(d0);
  for (double target : targets) {
    while (cur.time < target) {
      check_margin(cur, s);
      double adm = admissible_dt(v, cur, s, cur.time, D);
      double dt = cfl * adm;
      double remaining = target - cur.time;
      bool landing = dt >= remaining * (1.0 - 1e-12);
      if (landing) dt = remaining;
      cur = step_impl(v, D, cur, dt);
      if (landing) cur.time = target;
    }
    run.snapshots.push_back(cur);
  }
  return run;
}

}  // namespace

std::string scheme_name(Scheme s) {
  return s == Scheme::upwind1 ? "upwind1" : "none";
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "upwind1") return Scheme::upwind1;
  if (name == "none") return Scheme::none;
  throw ContractViolation("unknown scheme '" + name + "'");
}

double cfl_limit(const VelocityField& v, const DensityGrid& d, double t,
                 const Mat& diffusion) {
  check_dim(v, d);
  Shape s = shape_of(d);
  return admissible_dt(v, d, s, t, diffusion);
}

DensityGrid step_continuity(const VelocityField& v, const DensityGrid& d,
                            double dt) {
  check_dim(v, d);
  if (!(dt > 0.0)) throw ContractViolation("dt must be positive");
  Shape s = shape_of(d);
  check_margin(d, s);
  double adm = admissible_dt(v, d, s, d.time, {});
  if (dt > adm * (1.0 + 1e-12)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", adm);
    throw CflViolation(
        "dt exceeds the stability limit; admissible dt = " + std::string(buf),
        adm);
  }
  return step_impl(v, {}, d, dt);
}

TransportRun solve_continuity(const VelocityField& v, const DensityGrid& d0,
                              double t_end, double cfl,
                              const std::vector<double>& output_times) {
  return solve_impl(v, {}, d0, t_end, cfl, output_times);
}

TransportRun solve_fokker_planck(const VelocityField& drift, const Mat& sigma,
                                 const DensityGrid& d0, double t_end,
                                 double cfl,
                                 const std::vector<double>& output_times) {
  int p = d0.dim();
  if (sigma.size() != static_cast<std::size_t>(p) * p)
    throw ContractViolation("sigma must be a dim x dim matrix");
  Mat st = transpose(sigma, p);
  Mat D = matmul(sigma, st, p);
  for (double& x : D) x *= 0.5;
  // A zero sigma must reproduce solve_continuity exactly, so the diffusion
  // tensor is dropped rather than carried as a zero matrix.
  if (!any_nonzero(D)) return solve_impl(drift, {}, d0, t_end, cfl, output_times);
  return solve_impl(drift, D, d0, t_end, cfl, output_times);
}

TransportRun solve_fokker_planck(const VelocityField& drift, double sigma,
                                 const DensityGrid& d0, double t_end,
                                 double cfl,
                                 const std::vector<double>& output_times) {
  Mat s = identity(d0.dim());
  for (double& v : s) v *= sigma;
  return solve_fokker_planck(drift, s, d0, t_end, cfl, output_times);
}

ResidualGrid residual(const VelocityField& v, const TransportRun& run,
                      std::size_t index) {
  if (index == 0 || index + 1 >= run.snapshots.size())
    throw ContractViolation("residual needs both time neighbors");
  const DensityGrid& prev = run.snapshots[index - 1];
  const DensityGrid& mid = run.snapshots[index];
  const DensityGrid& next = run.snapshots[index + 1];
  if (!same_axes(prev, mid) || !same_axes(mid, next))
    throw ContractViolation("residual snapshots must share one grid");
  double dt1 = mid.time - prev.time;
  double dt2 = next.time - mid.time;
  if (std::abs(dt1 - dt2) > 1e-9 * std::max(dt1, dt2))
    throw ContractViolation("residual needs equally spaced snapshots");
  check_dim(v, mid);

  Shape s = shape_of(mid);
  ResidualGrid r;
  r.axes = mid.axes;
  r.time = mid.time;
  r.values.assign(s.n, 0.0);

#pragma omp parallel
  {
    Vec x(s.p), vv(s.p);
#pragma omp for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(s.n); ++ii) {
      auto i = static_cast<std::size_t>(ii);
      double ddt = (next.values[i] - prev.values[i]) / (dt1 + dt2);
      double div = 0.0;
      for (int a = 0; a < s.p; ++a) {
        int ia = axis_index(s, i, a);
        double lo = 0.0, hi = 0.0;
        if (ia > 0) {
          std::size_t j = i - s.stride[a];
          for (int b = 0; b < s.p; ++b)
            x[b] = mid.axes[b].center(axis_index(s, j, b));
          v.eval_d(mid.time, x.data(), vv.data());
          lo = vv[a] * mid.values[j];
        }
        if (ia < s.cells[a] - 1) {
          std::size_t j = i + s.stride[a];
          for (int b = 0; b < s.p; ++b)
            x[b] = mid.axes[b].center(axis_index(s, j, b));
          v.eval_d(mid.time, x.data(), vv.data());
          hi = vv[a] * mid.values[j];
        }
        div += (hi - lo) / (2.0 * s.width[a]);
      }
      r.values[i] = ddt + div;
    }
  }
  return r;
}

VelocityEstimate recover_velocity(const TransportRun& run, std::size_t index,
                                  int axis, double floor_frac) {
  if (index == 0 || index + 1 >= run.snapshots.size())
    throw ContractViolation("recovery needs both time neighbors");
  const DensityGrid& prev = run.snapshots[index - 1];
  const DensityGrid& mid = run.snapshots[index];
  const DensityGrid& next = run.snapshots[index + 1];
  if (!same_axes(prev, mid) || !same_axes(mid, next))
    throw ContractViolation("recovery snapshots must share one grid");
  double dt1 = mid.time - prev.time;
  double dt2 = next.time - mid.time;
  if (std::abs(dt1 - dt2) > 1e-9 * std::max(dt1, dt2))
    throw ContractViolation("recovery needs equally spaced snapshots");
  Shape s = shape_of(mid);
  if (axis < 0 || axis >= s.p)
    throw ContractViolation("recovery axis out of range");

  double maxrho = 0.0;
  for (double v : mid.values) maxrho = std::max(maxrho, v);
  double floor = floor_frac * maxrho;

  VelocityEstimate est;
  est.axes = mid.axes;
  est.axis = axis;
  est.floor_used = floor;
  est.values.assign(s.n, 0.0);
  est.mask.assign(s.n, 0);

  std::size_t nlines = s.n / static_cast<std::size_t>(s.cells[axis]);
  std::size_t slab = s.stride[axis] * static_cast<std::size_t>(s.cells[axis]);
  double w = s.width[axis];

#pragma omp parallel for schedule(static)
  for (long long li = 0; li < static_cast<long long>(nlines); ++li) {
    auto line = static_cast<std::size_t>(li);
    std::size_t outer = line / s.stride[axis];
    std::size_t inner = line % s.stride[axis];
    double g_low = 0.0;  // cumulative d(rho)/dt flux at the lower face
    for (int ia = 0; ia < s.cells[axis]; ++ia) {
      std::size_t i = outer * slab +
                      static_cast<std::size_t>(ia) * s.stride[axis] + inner;
      double ddt = (next.values[i] - prev.values[i]) / (dt1 + dt2);
      double g_high = g_low + ddt * w;
      if (mid.values[i] > floor) {
        est.values[i] = -0.5 * (g_low + g_high) / mid.values[i];
        est.mask[i] = 1;
      }
      g_low = g_high;
    }
  }

  bool any = false;
  for (unsigned char m : est.mask) any = any || m != 0;
  if (!any)
    throw UnrecoverableError("every cell sits below the density floor");
  return est;
}

VelocityEstimate recover_velocity(const TransportRun& run) {
  if (run.snapshots.size() < 3)
    throw ContractViolation("recovery needs at least three snapshots");
  return recover_velocity(run, run.snapshots.size() / 2, 0, 1e-3);
}

void write_run(const std::string& dir, const TransportRun& run) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["field"] = {{"name", run.field.name}, {"params", run.field.params}};
  manifest["cfl"] = run.cfl;
  manifest["scheme"] = scheme_name(run.scheme);
  auto times = nlohmann::json::array();
  for (const DensityGrid& d : run.snapshots) times.push_back(d.time);
  manifest["times"] = times;

  char name[32];
  for (std::size_t i = 0; i < run.snapshots.size(); ++i) {
    std::snprintf(name, sizeof name, "snapshot_%04zu.csv", i);
    write_density_csv(dir + "/" + name, run.snapshots[i]);
  }
  std::ofstream out(dir + "/manifest.json", std::ios::binary);
  if (!out) throw Error("cannot open '" + dir + "/manifest.json' for writing");
  out << manifest.dump(2) << "\n";
}

TransportRun read_run(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json", std::ios::binary);
  if (!in) throw Error("cannot open '" + dir + "/manifest.json' for reading");
  nlohmann::json manifest = nlohmann::json::parse(in);

  TransportRun run;
  run.field = make_field(manifest.at("field").at("name").get<std::string>(),
                         manifest.at("field").at("params"));
  run.cfl = manifest.at("cfl").get<double>();
  run.scheme = scheme_from_name(manifest.at("scheme").get<std::string>());
  std::size_t count = manifest.at("times").size();
  char name[32];
  for (std::size_t i = 0; i < count; ++i) {
    std::snprintf(name, sizeof name, "snapshot_%04zu.csv", i);
    run.snapshots.push_back(read_density_csv(dir + "/" + name));
  }
  return run;
}

}  // namespace ctlab
