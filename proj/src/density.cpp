#include "ctlab/density.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctlab/errors.hpp"

namespace ctlab {

namespace {

void check_axes(const std::vector<Axis>& axes) {
  if (axes.empty()) throw ContractViolation("grid needs at least one axis");
  for (const Axis& a : axes) {
    if (a.cells < 1) throw ContractViolation("axis needs at least one cell");
    if (!(a.hi > a.lo)) throw ContractViolation("axis needs hi > lo");
  }
}

std::vector<std::size_t> strides_of(const std::vector<Axis>& axes) {
  std::vector<std::size_t> s(axes.size(), 1);
  for (int d = static_cast<int>(axes.size()) - 2; d >= 0; --d)
    s[d] = s[d + 1] * static_cast<std::size_t>(axes[d + 1].cells);
  return s;
}

// Postcondition shared by every constructor: nonnegative values, unit mass.
void validate(const DensityGrid& d) {
  for (double v : d.values)
    if (!(v >= 0.0)) throw Error("density grid holds a negative cell");
  double m = d.mass();
  if (std::abs(m - 1.0) > 1e-9)
    throw Error("density grid mass " + std::to_string(m) + " is not 1");
}

double phi_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

bool is_diagonal(const Mat& cov, int p) {
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) {
      if (r == c) continue;
      double scale = std::sqrt(cov[r * p + r] * cov[c * p + c]);
      if (std::abs(cov[r * p + c]) > 1e-12 * std::max(scale, 1e-300))
        return false;
    }
  return true;
}

}  // namespace

std::size_t DensityGrid::n_cells() const {
  std::size_t n = 1;
  for (const Axis& a : axes) n *= static_cast<std::size_t>(a.cells);
  return n;
}

double DensityGrid::cell_volume() const {
  double v = 1.0;
  for (const Axis& a : axes) v *= a.width();
  return v;
}

double DensityGrid::mass() const {
  return kahan_sum(values.data(), values.size()) * cell_volume();
}

bool same_axes(const DensityGrid& a, const DensityGrid& b) {
  if (a.axes.size() != b.axes.size()) return false;
  for (std::size_t d = 0; d < a.axes.size(); ++d)
    if (a.axes[d].lo != b.axes[d].lo || a.axes[d].hi != b.axes[d].hi ||
        a.axes[d].cells != b.axes[d].cells)
      return false;
  return true;
}

std::size_t ravel_index(const std::vector<Axis>& axes, const int* idx) {
  auto s = strides_of(axes);
  std::size_t flat = 0;
  for (std::size_t d = 0; d < axes.size(); ++d)
    flat += s[d] * static_cast<std::size_t>(idx[d]);
  return flat;
}

void unravel_index(const std::vector<Axis>& axes, std::size_t flat, int* idx) {
  auto s = strides_of(axes);
  for (std::size_t d = 0; d < axes.size(); ++d) {
    idx[d] = static_cast<int>(flat / s[d]);
    flat %= s[d];
  }
}

DensityGrid histogram(const Ensemble& e, const GridSpec& spec) {
  check_axes(spec.axes);
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
// Integer increments are exact, so the counts are schedule-independent.
#pragma omp parallel for schedule(static) reduction(+ : dropped)
  for (long long ii = 0; ii < static_cast<long long>(e.n()); ++ii) {
    const double* x = e.at(static_cast<std::size_t>(ii));
    std::size_t flat = 0;
    bool inside = true;
    for (int dd = 0; dd < p; ++dd) {
      const Axis& ax = d.axes[dd];
      auto c = static_cast<long long>(std::floor((x[dd] - ax.lo) / ax.width()));
      if (x[dd] == ax.hi) c = ax.cells - 1;  // closed upper edge
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
#pragma omp atomic
    ++counts[flat];
  }

  d.dropped = static_cast<std::size_t>(dropped);
  std::size_t kept = e.n() - d.dropped;
  if (kept == 0)
    throw ContractViolation("grid does not cover any particle of the ensemble");
  double scale = 1.0 / (static_cast<double>(kept) * d.cell_volume());
  for (std::size_t i = 0; i < counts.size(); ++i)
    d.values[i] = static_cast<double>(counts[i]) * scale;
  validate(d);
  return d;
}

Vec default_bandwidth(const Ensemble& e) {
  MomentReport m = moments_ensemble(e);
  int p = e.dim;
  double rate = std::pow(static_cast<double>(e.n()),
                         -1.0 / static_cast<double>(p + 4));
  Vec bw(p);
  for (int d = 0; d < p; ++d) {
    double sd = std::sqrt(std::max(m.cov[d * p + d], 0.0));
    if (sd == 0.0) sd = 1e-8;  // point masses still need a positive kernel
    bw[d] = sd * rate;
  }
  return bw;
}

DensityGrid kde(const Ensemble& e, const GridSpec& spec, const Vec& bandwidth) {
  check_axes(spec.axes);
  if (e.n() == 0) throw ContractViolation("cannot smooth an empty ensemble");
  if (static_cast<int>(spec.axes.size()) != e.dim)
    throw ContractViolation("grid dimension does not match the ensemble");
  if (bandwidth.size() != static_cast<std::size_t>(e.dim))
    throw ContractViolation("need one bandwidth per axis");
  for (double h : bandwidth)
    if (!(h > 0.0)) throw ContractViolation("bandwidth must be positive");

  DensityGrid d;
  d.axes = spec.axes;
  d.time = e.time;
  d.values.assign(d.n_cells(), 0.0);
  int p = e.dim;
  std::size_t n = e.n();
  double norm = 1.0 / static_cast<double>(n);
  for (int dd = 0; dd < p; ++dd)
    norm /= bandwidth[dd] * std::sqrt(2.0 * 3.14159265358979323846);

// Gather per cell: each cell sums all particles in index order, so the
// result does not depend on how cells are scheduled across threads.
#pragma omp parallel for schedule(static)
  for (long long ci = 0; ci < static_cast<long long>(d.values.size()); ++ci) {
    std::vector<int> idx(p);
    unravel_index(d.axes, static_cast<std::size_t>(ci), idx.data());
    Vec center(p);
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
    d.values[static_cast<std::size_t>(ci)] = s * norm;
  }

  double m = d.mass();
  if (!(m > 0.0)) throw ContractViolation("kernel mass vanished on the grid");
  for (double& v : d.values) v /= m;
  validate(d);
  return d;
}

DensityGrid kde(const Ensemble& e, const GridSpec& spec) {
  return kde(e, spec, default_bandwidth(e));
}

MomentReport moments(const DensityGrid& d) {
  check_axes(d.axes);
  double m = d.mass();
  if (std::abs(m - 1.0) > 1e-6)
    throw StaleGridError("grid mass " + std::to_string(m) +
                         " deviates from 1 beyond 1e-6");
  int p = d.dim();
  double vol = d.cell_volume();
  std::size_t nc = d.values.size();

  MomentReport r;
  r.mass = m;
  r.mean.assign(p, 0.0);
  r.cov.assign(static_cast<std::size_t>(p) * p, 0.0);

  auto strides = strides_of(d.axes);
  auto coord = [&](int dd, std::size_t flat) {
    auto i = static_cast<int>(flat / strides[dd] %
                              static_cast<std::size_t>(d.axes[dd].cells));
    return d.axes[dd].center(i);
  };
  for (int dd = 0; dd < p; ++dd) {
    r.mean[dd] = blocked_sum(nc, [&](std::size_t i) {
                   return d.values[i] * coord(dd, i);
                 }) *
                 vol;
  }
  for (int a = 0; a < p; ++a)
    for (int b = a; b < p; ++b) {
      double cab = blocked_sum(nc, [&](std::size_t i) {
                     return d.values[i] * (coord(a, i) - r.mean[a]) *
                            (coord(b, i) - r.mean[b]);
                   }) *
                   vol;
      r.cov[a * p + b] = cab;
      r.cov[b * p + a] = cab;
    }
  for (int a = 0; a < p; ++a) r.trace_cov += r.cov[a * p + a];

  Vec eig = sym_eigenvalues(r.cov, p);
  if (eig.front() < -1e-10 * std::max(1.0, std::abs(eig.back())))
    throw Error("quadrature covariance is not positive semi-definite");
  return r;
}

MomentReport moments_ensemble(const Ensemble& e) {
  if (e.n() == 0) throw ContractViolation("empty ensemble has no moments");
  int p = e.dim;
  std::size_t n = e.n();
  MomentReport r;
  r.mass = 1.0;
  r.mean.assign(p, 0.0);
  r.cov.assign(static_cast<std::size_t>(p) * p, 0.0);
  for (int d = 0; d < p; ++d)
    r.mean[d] = blocked_sum(n, [&](std::size_t i) { return e.at(i)[d]; }) /
                static_cast<double>(n);
  for (int a = 0; a < p; ++a)
    for (int b = a; b < p; ++b) {
      double cab = blocked_sum(n, [&](std::size_t i) {
                     return (e.at(i)[a] - r.mean[a]) * (e.at(i)[b] - r.mean[b]);
                   }) /
                   static_cast<double>(n);
      r.cov[a * p + b] = cab;
      r.cov[b * p + a] = cab;
    }
  for (int a = 0; a < p; ++a) r.trace_cov += r.cov[a * p + a];
  return r;
}

double l1_distance(const DensityGrid& a, const DensityGrid& b) {
  if (!same_axes(a, b))
    throw ContractViolation("L1 distance needs identical grids");
  double vol = a.cell_volume();
  return blocked_sum(a.values.size(), [&](std::size_t i) {
           return std::abs(a.values[i] - b.values[i]);
         }) *
         vol;
}

DensityGrid analytic_gaussian(const Vec& mean, const Mat& cov,
                              const GridSpec& spec, double time) {
  check_axes(spec.axes);
  int p = static_cast<int>(spec.axes.size());
  if (mean.size() != static_cast<std::size_t>(p) ||
      cov.size() != static_cast<std::size_t>(p) * p)
    throw ContractViolation("gaussian moments do not match the grid dimension");
  for (int d = 0; d < p; ++d)
    if (!(cov[d * p + d] > 0.0))
      throw ContractViolation("gaussian covariance must be positive definite");

  DensityGrid d;
  d.axes = spec.axes;
  d.time = time;
  d.values.assign(d.n_cells(), 0.0);

  if (is_diagonal(cov, p)) {
    // Exact cell averages: per-axis erf mass divided by the cell width.
    std::vector<Vec> axis_avg(p);
    for (int dd = 0; dd < p; ++dd) {
      const Axis& ax = d.axes[dd];
      double sd = std::sqrt(cov[dd * p + dd]);
      axis_avg[dd].resize(ax.cells);
      for (int i = 0; i < ax.cells; ++i) {
        double a = (ax.lo + i * ax.width() - mean[dd]) / sd;
        double b = (ax.lo + (i + 1) * ax.width() - mean[dd]) / sd;
        axis_avg[dd][i] = (phi_cdf(b) - phi_cdf(a)) / ax.width();
      }
    }
#pragma omp parallel for schedule(static)
    for (long long ci = 0; ci < static_cast<long long>(d.values.size()); ++ci) {
      std::vector<int> idx(p);
      unravel_index(d.axes, static_cast<std::size_t>(ci), idx.data());
      double v = 1.0;
      for (int dd = 0; dd < p; ++dd) v *= axis_avg[dd][idx[dd]];
      d.values[static_cast<std::size_t>(ci)] = v;
    }
  } else {
    // Cell-center evaluation; solve_spd rejects singular covariances.
    double log_det = 0.0;
    solve_spd(cov, Vec(p, 0.0), &log_det);
#pragma omp parallel for schedule(static)
    for (long long ci = 0; ci < static_cast<long long>(d.values.size()); ++ci) {
      std::vector<int> idx(p);
      unravel_index(d.axes, static_cast<std::size_t>(ci), idx.data());
      Vec dx(p);
      for (int dd = 0; dd < p; ++dd)
        dx[dd] = d.axes[dd].center(idx[dd]) - mean[dd];
      Vec w = solve_spd(cov, dx);
      double q = dot(dx, w);
      double logv = -0.5 * q - 0.5 * log_det -
                    0.5 * p * std::log(2.0 * 3.14159265358979323846);
      d.values[static_cast<std::size_t>(ci)] = std::exp(logv);
    }
  }

  double m = d.mass();
  if (!(m > 0.0))
    throw ContractViolation("gaussian mass vanished on the grid");
  for (double& v : d.values) v /= m;
  validate(d);
  return d;
}

void write_density_csv(const std::string& path, const DensityGrid& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  int p = d.dim();
  for (int dd = 1; dd <= p; ++dd) out << "cell_index_" << dd << ',';
  out << "value\n";
  char buf[32];
  std::vector<int> idx(p);
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    unravel_index(d.axes, i, idx.data());
    for (int dd = 0; dd < p; ++dd) out << idx[dd] << ',';
    std::snprintf(buf, sizeof buf, "%.17g", d.values[i]);
    out << buf << "\n";
  }

  nlohmann::json side;
  side["axes"] = nlohmann::json::array();
  for (const Axis& a : d.axes)
    side["axes"].push_back({{"lo", a.lo}, {"hi", a.hi}, {"cells", a.cells}});
  side["time"] = d.time;
  side["mass"] = d.mass();
  side["dropped"] = d.dropped;
  std::ofstream meta(path + ".json", std::ios::binary);
  if (!meta) throw Error("cannot open '" + path + ".json' for writing");
  meta << side.dump(2) << "\n";
}

DensityGrid read_density_csv(const std::string& path) {
  std::ifstream meta(path + ".json", std::ios::binary);
  if (!meta) throw Error("cannot open '" + path + ".json' for reading");
  nlohmann::json side = nlohmann::json::parse(meta);

  DensityGrid d;
  for (const auto& a : side.at("axes"))
    d.axes.push_back(Axis{a.at("lo").get<double>(), a.at("hi").get<double>(),
                          a.at("cells").get<int>()});
  d.time = side.at("time").get<double>();
  d.dropped = side.at("dropped").get<std::size_t>();
  d.values.assign(d.n_cells(), 0.0);

  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw Error("empty density file '" + path + "'");
  int p = d.dim();
  std::vector<int> idx(p);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.size() != static_cast<std::size_t>(p) + 1)
      throw Error("malformed density row in '" + path + "'");
    for (int dd = 0; dd < p; ++dd) idx[dd] = static_cast<int>(vals[dd]);
    d.values[ravel_index(d.axes, idx.data())] = vals.back();
  }
  return d;
}

}  // namespace ctlab
