#include "ctlab/particles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ctlab/errors.hpp"
#include "ctlab/rng.hpp"

namespace ctlab {

namespace {

bool near(double a, double b) {
  double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) <= 1e-12 * scale;
}

// Step grid plus the indices of the snapshot points within it.
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
  if (init.positions.size() % static_cast<std::size_t>(init.dim) != 0)
    throw ContractViolation("ensemble storage is not a whole number of rows");
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

[[noreturn]] void throw_divergence(const std::vector<long long>& fail_step,
                                   const std::vector<double>& times) {
  long long best_step = -1;
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < fail_step.size(); ++i) {
    if (fail_step[i] < 0) continue;
    if (best_step < 0 || fail_step[i] < best_step) {
      best_step = fail_step[i];
      best_i = i;
    }
  }
  double t = times[static_cast<std::size_t>(best_step)];
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu diverged at t = %.6g", best_i, t);
  throw DivergenceError("particle " + std::string(buf), best_i, t);
}

Vec poly_transform(const Vec& b, int degree) {
  double r2 = 0.0;
  for (double v : b) r2 += v * v;
  double f = std::pow(r2, degree / 2.0);
  Vec w(b);
  for (double& v : w) v *= f;
  return w;
}

}  // namespace

int InitialDist::dim() const {
  switch (kind) {
    case Kind::gaussian: return static_cast<int>(mean.size());
    case Kind::uniform: return static_cast<int>(lo.size());
    case Kind::delta_cloud: return static_cast<int>(center.size());
  }
  return 0;
}

Ensemble sample_initial(const InitialDist& dist, std::size_t n,
                        std::uint64_t seed) {
  int p = dist.dim();
  if (p < 1) throw ContractViolation("initial distribution has dimension 0");

  Mat chol;
  switch (dist.kind) {
    case InitialDist::Kind::gaussian:
      if (dist.cov.size() != static_cast<std::size_t>(p) * p)
        throw ContractViolation("covariance must be dim x dim");
      chol = cholesky_psd(dist.cov, p);
      break;
    case InitialDist::Kind::uniform:
      if (dist.hi.size() != dist.lo.size())
        throw ContractViolation("uniform box bounds disagree in dimension");
      for (int d = 0; d < p; ++d)
        if (!(dist.hi[d] >= dist.lo[d]))
          throw ContractViolation("uniform box needs hi >= lo");
      break;
    case InitialDist::Kind::delta_cloud:
      if (dist.radius < 0.0)
        throw ContractViolation("delta cloud radius must be >= 0");
      break;
  }

  Ensemble e;
  e.dim = p;
  e.positions.assign(n * static_cast<std::size_t>(p), 0.0);

#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    auto i = static_cast<std::size_t>(ii);
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

std::vector<double> build_step_times(double t0, double t_end, double dt,
                                     const std::vector<double>& output_times) {
  return make_step_grid(t0, t_end, dt, output_times).times;
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
  std::size_t n = init.n();
  std::vector<long long> fail_step(n, -1);
  bool rk4 = opts.method == OdeMethod::rk4;

#pragma omp parallel
  {
    Vec x(p), k1(p), k2(p), k3(p), k4(p), xt(p);
#pragma omp for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
      auto i = static_cast<std::size_t>(ii);
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
          fail_step[i] = static_cast<long long>(s + 1);
          break;
        }
        if (next_snap < grid.snap_idx.size() &&
            s + 1 == grid.snap_idx[next_snap]) {
          std::copy(x.begin(), x.end(), snaps[next_snap].at(i));
          ++next_snap;
        }
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i)
    if (fail_step[i] >= 0) throw_divergence(fail_step, grid.times);
  return snaps;
}

Mat constant_diffusion_matrix(double sigma, int dim) {
  Mat m = identity(dim);
  for (double& v : m) v *= sigma;
  return m;
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

  std::size_t n = init.n();
  std::vector<long long> fail_step(n, -1);
  bool poly = spec.noise.kind == NoiseKind::poly_brownian;

#pragma omp parallel
  {
    Vec x(p), k1(p), b(p), w(p), w_prev(p), dw(p);
#pragma omp for schedule(static)
    for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
      auto i = static_cast<std::size_t>(ii);
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
          fail_step[i] = static_cast<long long>(s + 1);
          break;
        }
        if (next_snap < grid.snap_idx.size() &&
            s + 1 == grid.snap_idx[next_snap]) {
          std::copy(x.begin(), x.end(), snaps[next_snap].at(i));
          ++next_snap;
        }
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i)
    if (fail_step[i] >= 0) throw_divergence(fail_step, grid.times);
  return snaps;
}

void write_ensembles_csv(const std::string& path,
                         const std::vector<Ensemble>& snapshots) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  int dim = snapshots.empty() ? 0 : snapshots[0].dim;
  out << "t,particle_id";
  for (int d = 1; d <= dim; ++d) out << ",x_" << d;
  out << "\n";
  char buf[32];
  for (const Ensemble& e : snapshots) {
    for (std::size_t i = 0; i < e.n(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", e.time);
      out << buf << ',' << i;
      for (int d = 0; d < dim; ++d) {
        std::snprintf(buf, sizeof buf, "%.17g", e.at(i)[d]);
        out << ',' << buf;
      }
      out << "\n";
    }
  }
}

std::vector<Ensemble> read_ensembles_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw Error("empty ensemble file '" + path + "'");
  std::vector<Ensemble> snaps;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() < 3) throw Error("malformed ensemble row in '" + path + "'");
    double t = vals[0];
    auto id = static_cast<std::size_t>(vals[1]);
    if (snaps.empty() || id == 0) {
      Ensemble e;
      e.time = t;
      e.dim = static_cast<int>(vals.size()) - 2;
      snaps.push_back(std::move(e));
    }
    for (std::size_t k = 2; k < vals.size(); ++k)
      snaps.back().positions.push_back(vals[k]);
  }
  return snaps;
}

}  // namespace ctlab
