#include "ctlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

void check_sigmas(const std::vector<double>& sigmas) {
  if (sigmas.empty()) throw ContractViolation("sigma ladder is empty");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw ContractViolation("sigmas must be positive");
    if (i > 0 && !(sigmas[i] < sigmas[i - 1]))
      throw ContractViolation("sigmas must be strictly decreasing");
  }
}

Mat diag_matrix(double v, int p) {
  Mat m = identity(p);
  for (double& x : m) x *= v;
  return m;
}

double max_abs_entry(const Mat& m) {
  double r = 0.0;
  for (double v : m) r = std::max(r, std::abs(v));
  return r;
}

// Quadrature of f against a density grid at the grid's own time.
double integrate_f(const ScalarField& f, const DensityGrid& d) {
  int p = d.dim();
  double vol = d.cell_volume();
  return blocked_sum(d.values.size(), [&](std::size_t i) {
           std::vector<int> ix(p);
           unravel_index(d.axes, i, ix.data());
           Vec x(p);
           for (int dd = 0; dd < p; ++dd) x[dd] = d.axes[dd].center(ix[dd]);
           return d.values[i] * f.eval_d(d.time, x.data());
         }) *
         vol;
}

// One grid cell width tuned so the solver error tracks the sigma^2 signal.
GridSpec expansion_grid(const VelocityField& field, const Vec& x0,
                        const Vec& x_end, double sigma,
                        const ExpansionOptions& opts) {
  int p = field.dim;
  Vec v0(p);
  field.eval_d(0.0, x0.data(), v0.data());
  double maxv = std::max(norm_inf(v0), 0.1);
  double h = std::min(sigma / 8.0, opts.accuracy * sigma * sigma / maxv);
  GridSpec spec;
  for (int d = 0; d < p; ++d) {
    double lo = std::min(x0[d], x_end[d]) - opts.domain_sigmas * sigma;
    double hi = std::max(x0[d], x_end[d]) + opts.domain_sigmas * sigma;
    int cells = static_cast<int>(std::ceil((hi - lo) / h));
    cells += cells % 2;
    if (cells > 400000)
      throw ContractViolation("expansion grid would exceed 4e5 cells");
    spec.axes.push_back(Axis{lo, hi, cells});
  }
  return spec;
}

Ensemble half_ensemble(const Ensemble& e, int parity) {
  Ensemble h;
  h.time = e.time;
  h.dim = e.dim;
  for (std::size_t i = static_cast<std::size_t>(parity); i < e.n(); i += 2)
    h.positions.insert(h.positions.end(), e.at(i), e.at(i) + e.dim);
  return h;
}

double masked_norm_inf(const ResidualGrid& r, const std::vector<char>& mask) {
  double m = 0.0;
  for (std::size_t i = 0; i < r.values.size(); ++i)
    if (mask[i]) m = std::max(m, std::abs(r.values[i]));
  return m;
}

}  // namespace

double fit_loglog_order(const std::vector<double>& xs,
                        const std::vector<double>& ys, double floor) {
  if (xs.size() != ys.size())
    throw ContractViolation("order fit needs matching lists");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0)) throw ContractViolation("order fit needs positive x");
    if (ys[i] > floor) {
      lx.push_back(std::log(xs[i]));
      ly.push_back(std::log(ys[i]));
    }
  }
  if (lx.size() < 2) return std::numeric_limits<double>::infinity();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= lx.size();
  my /= lx.size();
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    num += (lx[i] - mx) * (ly[i] - my);
    den += (lx[i] - mx) * (lx[i] - mx);
  }
  return num / den;
}

DensityGrid initial_density(const InitialDist& dist, const GridSpec& spec,
                            double time) {
  int p = static_cast<int>(spec.axes.size());
  if (dist.dim() != p)
    throw ContractViolation("distribution dimension does not match the grid");

  if (dist.kind == InitialDist::Kind::gaussian)
    return analytic_gaussian(dist.mean, dist.cov, spec, time);

  Vec lo, hi;
  if (dist.kind == InitialDist::Kind::uniform) {
    lo = dist.lo;
    hi = dist.hi;
  } else {
    if (dist.radius <= 0.0 || p != 1)
      throw ContractViolation(
          "only 1D delta clouds with positive radius have a density");
    lo = {dist.center[0] - dist.radius};
    hi = {dist.center[0] + dist.radius};
  }

  DensityGrid d;
  d.axes = spec.axes;
  d.time = time;
  d.values.assign(d.n_cells(), 0.0);
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    std::vector<int> ix(p);
    unravel_index(d.axes, i, ix.data());
    double v = 1.0;
    for (int dd = 0; dd < p; ++dd) {
      const Axis& ax = d.axes[dd];
      double a = ax.lo + ix[dd] * ax.width();
      double b = a + ax.width();
      double olap = std::min(b, hi[dd]) - std::max(a, lo[dd]);
      v *= std::max(olap, 0.0) / (ax.width() * (hi[dd] - lo[dd]));
    }
    d.values[i] = v;
  }
  double m = d.mass();
  if (!(m > 0.0)) throw ContractViolation("box lies outside the grid");
  for (double& v : d.values) v /= m;
  return d;
}

std::optional<std::pair<Vec, Mat>> gaussian_flow_moments(
    const VelocityField& field, const Vec& mean0, const Mat& cov0, double t) {
  int p = field.dim;
  if (field.name == "constant") {
    Vec c = field.params.at("value").get<Vec>();
    Vec mean = mean0;
    for (int d = 0; d < p; ++d) mean[d] += c[d] * t;
    return std::make_pair(mean, cov0);
  }
  Mat a;
  if (field.name == "damped") {
    a = diag_matrix(-1.0, p);
  } else if (field.name == "rotation2d") {
    a = {0.0, -1.0, 1.0, 0.0};
  } else if (field.name == "linear") {
    auto rows = field.params.at("matrix").get<std::vector<Vec>>();
    a.clear();
    for (const Vec& r : rows) a.insert(a.end(), r.begin(), r.end());
  } else {
    return std::nullopt;
  }
  Mat at = a;
  for (double& v : at) v *= t;
  Mat e = mat_exp(at, p);
  Vec mean = matvec(e, mean0);
  Mat cov = matmul(matmul(e, cov0, p), transpose(e, p), p);
  return std::make_pair(mean, cov);
}

DensityGrid coarsen(const DensityGrid& fine, int refine) {
  if (refine < 1) throw ContractViolation("refine factor must be >= 1");
  int p = fine.dim();
  DensityGrid d;
  d.time = fine.time;
  d.dropped = fine.dropped;
  for (const Axis& a : fine.axes) {
    if (a.cells % refine != 0)
      throw ContractViolation("fine cells are not a multiple of refine");
    d.axes.push_back(Axis{a.lo, a.hi, a.cells / refine});
  }
  d.values.assign(d.n_cells(), 0.0);
  std::size_t children = 1;
  for (int dd = 0; dd < p; ++dd) children *= static_cast<std::size_t>(refine);

#pragma omp parallel for schedule(static)
  for (long long ci = 0; ci < static_cast<long long>(d.values.size()); ++ci) {
    std::vector<int> coarse(p), offset(p, 0), idx(p);
    unravel_index(d.axes, static_cast<std::size_t>(ci), coarse.data());
    double s = 0.0;
    for (std::size_t k = 0; k < children; ++k) {
      std::size_t rem = k;
      for (int dd = p - 1; dd >= 0; --dd) {
        offset[dd] = static_cast<int>(rem % static_cast<std::size_t>(refine));
        rem /= static_cast<std::size_t>(refine);
      }
      for (int dd = 0; dd < p; ++dd)
        idx[dd] = coarse[dd] * refine + offset[dd];
      s += fine.values[ravel_index(fine.axes, idx.data())];
    }
    d.values[static_cast<std::size_t>(ci)] = s / static_cast<double>(children);
  }
  return d;
}

TransportRun analytic_gaussian_run(const VelocityField& field, const Vec& mean0,
                                   const Mat& cov0,
                                   const std::vector<double>& times,
                                   const GridSpec& spec) {
  if (times.size() < 2)
    throw ContractViolation("analytic run needs at least two times");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] <= times[i - 1])
      throw ContractViolation("analytic run times must increase");
  TransportRun run;
  run.field = field;
  run.scheme = Scheme::none;
  for (double t : times) {
    auto mom = gaussian_flow_moments(field, mean0, cov0, t - times.front());
    if (!mom)
      throw ContractViolation("field '" + field.name + "' has no linear flow");
    run.snapshots.push_back(analytic_gaussian(mom->first, mom->second, spec, t));
  }
  return run;
}

double recovery_max_rel_error(const VelocityEstimate& est,
                              const VelocityField& field, double t) {
  int p = static_cast<int>(est.axes.size());
  if (field.dim != p)
    throw ContractViolation("field dimension does not match the estimate");
  double worst = 0.0;
  std::vector<int> ix(p);
  Vec x(p), v(p);
  for (std::size_t i = 0; i < est.values.size(); ++i) {
    if (!est.mask[i]) continue;
    unravel_index(est.axes, i, ix.data());
    for (int dd = 0; dd < p; ++dd) x[dd] = est.axes[dd].center(ix[dd]);
    field.eval_d(t, x.data(), v.data());
    double denom = std::abs(v[est.axis]);
    if (denom < 1e-300) denom = 1e-300;
    worst = std::max(worst, std::abs(est.values[i] - v[est.axis]) / denom);
  }
  return worst;
}

ReynoldsReport reynolds_check(const VelocityField& field,
                              const InitialDist& dist, std::size_t n_particles,
                              double t_end, const GridSpec& grid,
                              const ReynoldsOptions& opts) {
  if (n_particles == 0) throw ContractViolation("need at least one particle");
  if (!(t_end > 0.0)) throw ContractViolation("t_end must be positive");

  Ensemble e0 = sample_initial(dist, n_particles, opts.seed);
  OdeOptions ode;
  ode.method = OdeMethod::rk4;
  ode.dt = opts.particle_dt;
  Ensemble final = integrate_ode(field, e0, t_end, ode).back();

  ReynoldsReport report;
  report.particle_hist = histogram(final, grid);

  if (opts.refine >= 1) {
    GridSpec fine;
    fine.policy = grid.policy;
    for (const Axis& a : grid.axes)
      fine.axes.push_back(Axis{a.lo, a.hi, a.cells * opts.refine});
    DensityGrid d0 = initial_density(dist, fine, 0.0);
    report.run =
        solve_continuity(field, d0, t_end, opts.cfl, opts.pde_output_times);
    report.pde_aggregated = coarsen(report.run.snapshots.back(), opts.refine);
    report.l1_pde = l1_distance(report.particle_hist, *report.pde_aggregated);
  }

  if (dist.kind == InitialDist::Kind::gaussian) {
    auto mom = gaussian_flow_moments(field, dist.mean, dist.cov, t_end);
    if (mom) {
      DensityGrid exact =
          analytic_gaussian(mom->first, mom->second, grid, t_end);
      report.l1_analytic = l1_distance(report.particle_hist, exact);
    }
  }
  return report;
}

ScalingReport concentration_check(const ScalarField& f, double f_bound,
                                  const Vec& x0,
                                  const std::vector<double>& sigmas,
                                  double t) {
  check_sigmas(sigmas);
  if (!(f_bound > 0.0)) throw ContractViolation("f bound must be positive");
  int p = static_cast<int>(x0.size());
  if (p < 1) throw ContractViolation("x0 must be nonempty");
  int cells = p == 1 ? 400 : (p == 2 ? 120 : 48);

  Vec x0v = x0;
  double fx0 = f.eval_d(t, x0v.data());

  ScalingReport report;
  report.sigmas = sigmas;
  report.floor = 1e-13 * std::max(1.0, std::abs(fx0));

  for (double sigma : sigmas) {
    GridSpec spec;
    for (int d = 0; d < p; ++d)
      spec.axes.push_back(Axis{x0[d] - 8.0 * sigma, x0[d] + 8.0 * sigma, cells});
    DensityGrid rho =
        analytic_gaussian(x0, diag_matrix(sigma * sigma, p), spec, t);
    // Bound check doubles as the quadrature pass.
    double integral =
        blocked_sum(rho.values.size(), [&](std::size_t i) {
          std::vector<int> ix(p);
          unravel_index(rho.axes, i, ix.data());
          Vec x(p);
          for (int dd = 0; dd < p; ++dd) x[dd] = rho.axes[dd].center(ix[dd]);
          double fv = f.eval_d(t, x.data());
          if (std::abs(fv) > f_bound)
            throw ContractViolation("f exceeds its declared bound on the grid");
          return rho.values[i] * fv;
        }) *
        rho.cell_volume();
    report.quantities.push_back(std::abs(integral - fx0));
  }

  report.fitted_order =
      fit_loglog_order(report.sigmas, report.quantities, report.floor);
  bool decays = report.quantities.back() <= report.floor ||
                report.quantities.back() < report.quantities.front();
  report.pass = decays && report.fitted_order >= 1.8;
  return report;
}

MomentExpansionReport moment_expansion_check(const VelocityField& field,
                                             const Vec& x0,
                                             const std::vector<double>& sigmas,
                                             double dt, ExpansionMode mode,
                                             const ExpansionOptions& opts) {
  check_sigmas(sigmas);
  if (!(dt > 0.0)) throw ContractViolation("dt must be positive");
  int p = field.dim;
  if (x0.size() != static_cast<std::size_t>(p))
    throw ContractViolation("x0 dimension does not match the field");

  ShiftSeries ss0 = shift_series(field, 0.0, x0, opts.series_truncation);
  if (ss0.last_term_magnitude(dt) > 1e-10)
    throw ContractViolation(
        "shift series truncation diagnostic exceeds 1e-10 at this dt");
  Vec g0 = ss0.eval(dt);
  Vec expected_mean = x0;
  for (int d = 0; d < p; ++d) expected_mean[d] += g0[d];

  MomentExpansionReport out;
  out.dt = dt;
  out.mean_report.sigmas = sigmas;
  out.mean_report.floor = 1e-12;
  out.variance_report.sigmas = sigmas;
  out.variance_report.floor = 1e-12;

  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    double sigma = sigmas[k];
    Mat sig2 = diag_matrix(sigma * sigma, p);
    GridSpec spec = expansion_grid(field, x0, expected_mean, sigma, opts);
    DensityGrid rho0 = analytic_gaussian(x0, sig2, spec, 0.0);

    MomentReport m;
    if (mode == ExpansionMode::pde) {
      TransportRun run = solve_continuity(field, rho0, dt, opts.cfl);
      m = moments(run.snapshots.back());
    } else {
      InitialDist dist;
      dist.kind = InitialDist::Kind::gaussian;
      dist.mean = x0;
      dist.cov = sig2;
      Ensemble e = sample_initial(dist, opts.n_particles, opts.seed + k);
      OdeOptions ode;
      ode.method = OdeMethod::rk4;
      ode.dt = dt / 10.0;
      m = moments_ensemble(integrate_ode(field, e, dt, ode).back());
    }

    // Analytic linear-order cross terms by quadrature over the initial
    // Gaussian: integral of (u-x0) g(u;dt)^T + g(u;dt) (u-x0)^T against rho0.
    std::size_t nc = rho0.values.size();
    Vec g_flat(nc * static_cast<std::size_t>(p));
    std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(static)
    for (long long ci = 0; ci < static_cast<long long>(nc); ++ci) {
      try {
        std::vector<int> ix(p);
        unravel_index(rho0.axes, static_cast<std::size_t>(ci), ix.data());
        Vec u(p);
        for (int dd = 0; dd < p; ++dd) u[dd] = rho0.axes[dd].center(ix[dd]);
        Vec gu = shift_series(field, 0.0, u, opts.series_truncation).eval(dt);
        for (int dd = 0; dd < p; ++dd)
          g_flat[static_cast<std::size_t>(ci) * p + dd] = gu[dd];
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
    double vol = rho0.cell_volume();
    Mat cross(static_cast<std::size_t>(p) * p, 0.0);
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) {
        cross[a * p + b] =
            blocked_sum(nc, [&](std::size_t i) {
              std::vector<int> ix(p);
              unravel_index(rho0.axes, i, ix.data());
              double ua = rho0.axes[a].center(ix[a]) - x0[a];
              double ub = rho0.axes[b].center(ix[b]) - x0[b];
              return rho0.values[i] * (ua * g_flat[i * p + b] +
                                       g_flat[i * p + a] * ub);
            }) *
            vol;
      }

    Mat coeff(static_cast<std::size_t>(p) * p, 0.0);
    Mat resid(static_cast<std::size_t>(p) * p, 0.0);
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) {
        double dev = m.cov[a * p + b] - sig2[a * p + b];
        coeff[a * p + b] = dev / dt;
        resid[a * p + b] = dev - cross[a * p + b];
      }
    Mat cross_dt = cross;
    for (double& v : cross_dt) v /= dt;
    out.var_coeff.push_back(coeff);
    out.cross_dt.push_back(cross_dt);

    double qmean = 0.0;
    for (int d = 0; d < p; ++d)
      qmean = std::max(qmean, std::abs(m.mean[d] - expected_mean[d]));
    out.mean_report.quantities.push_back(qmean / dt);
    out.variance_report.quantities.push_back(max_abs_entry(resid) / dt);
  }

  out.mean_report.fitted_order = fit_loglog_order(
      out.mean_report.sigmas, out.mean_report.quantities, out.mean_report.floor);
  out.variance_report.fitted_order =
      fit_loglog_order(out.variance_report.sigmas,
                       out.variance_report.quantities,
                       out.variance_report.floor);
  out.mean_report.pass = out.mean_report.fitted_order >= 1.5;
  out.variance_report.pass = out.variance_report.fitted_order >= 1.5;
  return out;
}

DualExpansionReport dual_expansion_check(const VelocityField& field,
                                         const ScalarField& f, const Vec& x0,
                                         double sigma, double dt, int max_order,
                                         const ExpansionOptions& opts) {
  if (max_order < 1 || max_order > 2)
    throw ContractViolation("dual expansion supports orders 1 and 2");
  if (!(sigma > 0.0 && dt > 0.0))
    throw ContractViolation("sigma and dt must be positive");
  int p = field.dim;

  ShiftSeries ss0 = shift_series(field, 0.0, x0, opts.series_truncation);
  Vec x_end = x0;
  Vec g_end = ss0.eval(2.0 * dt);
  for (int d = 0; d < p; ++d) x_end[d] += g_end[d];

  GridSpec spec = expansion_grid(field, x0, x_end, sigma, opts);
  DensityGrid rho0 = analytic_gaussian(x0, diag_matrix(sigma * sigma, p),
                                       spec, 0.0);
  TransportRun run =
      solve_continuity(field, rho0, 2.0 * dt, opts.cfl, {dt, 2.0 * dt});
  const DensityGrid& mid = run.snapshots[1];

  double f0 = integrate_f(f, run.snapshots[0]);
  double f1 = integrate_f(f, mid);
  double f2 = integrate_f(f, run.snapshots[2]);

  double vol = mid.cell_volume();
  DualExpansionReport report;
  for (int j = 1; j <= max_order; ++j) {
    double left = j == 1 ? (f2 - f0) / (2.0 * dt)
                         : (f2 - 2.0 * f1 + f0) / (dt * dt);
    double right = blocked_sum(mid.values.size(), [&](std::size_t i) {
                     std::vector<int> ix(p);
                     unravel_index(mid.axes, i, ix.data());
                     Vec x(p);
                     for (int dd = 0; dd < p; ++dd)
                       x[dd] = mid.axes[dd].center(ix[dd]);
                     return mid.values[i] * apply_D(field, f, mid.time, x, j);
                   }) *
                   vol;
    report.left.push_back(left);
    report.right.push_back(right);
    report.deviation.push_back(std::abs(left - right));
  }
  return report;
}

DetectionVerdict detect_stochasticity(const std::vector<Ensemble>& trajectories,
                                      const VelocityField& field_hypothesis,
                                      double delta, const DetectOptions& opts) {
  if (trajectories.size() < 2)
    throw ContractViolation("need trajectory snapshots over time");
  if (!(delta > 0.0)) throw ContractViolation("delta must be positive");
  const Ensemble& start = trajectories[0];
  std::size_t n = start.n();
  int p = start.dim;
  if (n < 10000)
    throw ContractViolation("detector needs at least 10^4 trajectories");
  if (field_hypothesis.dim != p)
    throw ContractViolation("hypothesis dimension does not match trajectories");

  std::vector<double> times;
  for (const Ensemble& e : trajectories) {
    if (e.n() != n || e.dim != p)
      throw ContractViolation("trajectory snapshots disagree in shape");
    times.push_back(e.time);
  }
  double spacing = 0.0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    double d = times[i] - times[i - 1];
    if (!(d > 0.0)) throw ContractViolation("trajectory times must increase");
    spacing = std::max(spacing, d);
  }
  if (spacing > delta / 10.0 * (1.0 + 1e-9))
    throw ContractViolation("trajectory sampling exceeds delta/10");

  double t0 = times.front();
  double t1 = t0 + delta;
  std::size_t i1 = times.size();
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - t1) <= 1e-9 * std::max(1.0, std::abs(t1))) i1 = i;
  if (i1 == times.size())
    throw ContractViolation("no trajectory snapshot at t0 + delta");
  const Ensemble& later = trajectories[i1];

  // Bin on the state at t0; width = bin_frac of the per-axis spread.
  MomentReport m0 = moments_ensemble(start);
  Vec width(p);
  double max_width = 0.0;
  for (int d = 0; d < p; ++d) {
    double sd = std::sqrt(std::max(m0.cov[d * p + d], 0.0));
    width[d] = sd > 0.0 ? opts.bin_frac * sd : 1.0;
    max_width = std::max(max_width, width[d]);
  }

  std::map<long long, std::vector<std::size_t>> bins;
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = start.at(i);
    long long key = 0;
    for (int d = 0; d < p; ++d) {
      auto idx =
          static_cast<long long>(std::floor((x[d] - m0.mean[d]) / width[d]));
      if (idx <= -(1LL << 20) || idx >= (1LL << 20))
        throw BinningError("state at t0 spans too many bins", 2.0 * max_width);
      key = key * (1LL << 21) + idx + (1LL << 20);
    }
    bins[key].push_back(i);
  }

  std::size_t kept = 0;
  std::size_t used = 0;
  for (const auto& [key, members] : bins) {
    (void)key;
    if (members.size() >= opts.min_bin) {
      kept += members.size();
      ++used;
    }
  }
  if (used == 0 || kept < static_cast<std::size_t>(opts.min_kept_frac *
                                                   static_cast<double>(n)))
    throw BinningError("bins too sparse for conditional statistics",
                       2.0 * max_width);

  // sigma = 0 twin from the same initial states: the integration-noise floor.
  OdeOptions twin_opts;
  twin_opts.method = OdeMethod::euler;
  twin_opts.dt = spacing;
  Ensemble twin = integrate_ode(field_hypothesis, start, t1, twin_opts).back();

  // Predicted landing under the hypothesis field, one series per particle.
  Vec pred(n * static_cast<std::size_t>(p));
  std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
    try {
      auto i = static_cast<std::size_t>(ii);
      Vec x(start.at(i), start.at(i) + p);
      Vec g = shift_series(field_hypothesis, t0, x, opts.series_truncation)
                  .eval(delta);
      for (int d = 0; d < p; ++d) pred[i * p + d] = x[d] + g[d];
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  Mat within(static_cast<std::size_t>(p) * p, 0.0);
  Mat within_twin(static_cast<std::size_t>(p) * p, 0.0);
  Mat between(static_cast<std::size_t>(p) * p, 0.0);
  Vec grand(p, 0.0);
  double mean_shift_sq = 0.0;

  // Grand mean over kept particles at t1.
  for (const auto& [key, members] : bins) {
    (void)key;
    if (members.size() < opts.min_bin) continue;
    for (std::size_t i : members)
      for (int d = 0; d < p; ++d) grand[d] += later.at(i)[d];
  }
  for (int d = 0; d < p; ++d) grand[d] /= static_cast<double>(kept);

  for (const auto& [key, members] : bins) {
    (void)key;
    std::size_t nb = members.size();
    if (nb < opts.min_bin) continue;
    double w = static_cast<double>(nb) / static_cast<double>(kept);

    Vec mb(p, 0.0), mt(p, 0.0), mp(p, 0.0);
    for (std::size_t i : members)
      for (int d = 0; d < p; ++d) {
        mb[d] += later.at(i)[d];
        mt[d] += twin.at(i)[d];
        mp[d] += pred[i * p + d];
      }
    for (int d = 0; d < p; ++d) {
      mb[d] /= static_cast<double>(nb);
      mt[d] /= static_cast<double>(nb);
      mp[d] /= static_cast<double>(nb);
    }

    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) {
        double cb = 0.0, ct = 0.0;
        for (std::size_t i : members) {
          cb += (later.at(i)[a] - mb[a]) * (later.at(i)[b] - mb[b]);
          ct += (twin.at(i)[a] - mt[a]) * (twin.at(i)[b] - mt[b]);
        }
        within[a * p + b] += w * cb / static_cast<double>(nb - 1);
        within_twin[a * p + b] += w * ct / static_cast<double>(nb - 1);
        between[a * p + b] += w * (mb[a] - grand[a]) * (mb[b] - grand[b]);
      }

    double dev2 = 0.0;
    for (int d = 0; d < p; ++d) dev2 += (mb[d] - mp[d]) * (mb[d] - mp[d]);
    mean_shift_sq += w * dev2;
  }

  DetectionVerdict v;
  v.delta = delta;
  v.bin_width = max_width;
  v.bins_used = used;
  v.kept = kept;
  v.mean_shift_check = std::sqrt(mean_shift_sq);

  v.raw_rate.assign(static_cast<std::size_t>(p) * p, 0.0);
  v.conditional_variance_rate.assign(static_cast<std::size_t>(p) * p, 0.0);
  double floor = 0.0;
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b) {
      v.raw_rate[a * p + b] = within[a * p + b] / delta;
      v.conditional_variance_rate[a * p + b] =
          (within[a * p + b] - within_twin[a * p + b]) / delta;
      if (a == b) floor = std::max(floor, within_twin[a * p + b] / delta);
    }
  v.calibration_floor = floor;
  v.threshold_used = opts.threshold_factor * floor;

  double net_max = 0.0;
  for (int d = 0; d < p; ++d)
    net_max = std::max(net_max, v.conditional_variance_rate[d * p + d]);
  v.stochastic = net_max > v.threshold_used;

  // Law-of-total-variance bookkeeping over the kept particles.
  for (int d = 0; d < p; ++d) {
    double tv = 0.0;
    for (const auto& [key, members] : bins) {
      (void)key;
      if (members.size() < opts.min_bin) continue;
      for (std::size_t i : members) {
        double dx = later.at(i)[d] - grand[d];
        tv += dx * dx;
      }
    }
    v.total_variance += tv / static_cast<double>(kept - 1);
    v.within_variance += within[d * p + d];
    v.between_variance += between[d * p + d];
  }
  return v;
}

DensityModeVerdict density_mode_detection(
    const std::vector<Ensemble>& snapshots,
    const VelocityField& field_hypothesis,
    const std::vector<GridSpec>& resolutions, double ratio_threshold) {
  if (snapshots.size() < 3)
    throw ContractViolation("density-mode detection needs three snapshots");
  if (resolutions.size() < 2)
    throw ContractViolation("density-mode detection needs two resolutions");
  for (std::size_t r = 1; r < resolutions.size(); ++r)
    for (std::size_t d = 0; d < resolutions[r].axes.size(); ++d)
      if (resolutions[r].axes[d].cells <= resolutions[r - 1].axes[d].cells)
        throw ContractViolation("resolutions must be ordered coarse to fine");

  std::size_t mid = snapshots.size() / 2;
  if (mid == 0) mid = 1;
  if (mid + 1 >= snapshots.size()) mid = snapshots.size() - 2;

  DensityModeVerdict verdict;
  verdict.ratio_threshold = ratio_threshold;

  for (const GridSpec& spec : resolutions) {
    auto make_run = [&](const Ensemble& a, const Ensemble& b,
                        const Ensemble& c) {
      TransportRun run;
      run.field = field_hypothesis;
      run.scheme = Scheme::none;
      run.snapshots = {histogram(a, spec), histogram(b, spec),
                       histogram(c, spec)};
      return run;
    };
    TransportRun full =
        make_run(snapshots[mid - 1], snapshots[mid], snapshots[mid + 1]);
    ResidualGrid r_full = residual(field_hypothesis, full, 1);

    double maxrho = 0.0;
    for (double v : full.snapshots[1].values) maxrho = std::max(maxrho, v);
    std::vector<char> mask(r_full.values.size(), 0);
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask[i] = full.snapshots[1].values[i] > 1e-3 * maxrho ? 1 : 0;

    TransportRun even = make_run(half_ensemble(snapshots[mid - 1], 0),
                                 half_ensemble(snapshots[mid], 0),
                                 half_ensemble(snapshots[mid + 1], 0));
    TransportRun odd = make_run(half_ensemble(snapshots[mid - 1], 1),
                                half_ensemble(snapshots[mid], 1),
                                half_ensemble(snapshots[mid + 1], 1));
    ResidualGrid r_even = residual(field_hypothesis, even, 1);
    ResidualGrid r_odd = residual(field_hypothesis, odd, 1);
    ResidualGrid diff;
    diff.axes = r_even.axes;
    diff.time = r_even.time;
    diff.values.resize(r_even.values.size());
    for (std::size_t i = 0; i < diff.values.size(); ++i)
      diff.values[i] = 0.5 * (r_even.values[i] - r_odd.values[i]);

    verdict.residual_norms.push_back(masked_norm_inf(r_full, mask));
    verdict.floors.push_back(masked_norm_inf(diff, mask));
  }

  verdict.refinement_ratio =
      verdict.residual_norms.front() / verdict.residual_norms.back();
  bool at_floor = verdict.residual_norms.back() <= 2.0 * verdict.floors.back();
  verdict.stochastic =
      !(at_floor || verdict.refinement_ratio >= ratio_threshold);
  return verdict;
}

}  // namespace ctlab
