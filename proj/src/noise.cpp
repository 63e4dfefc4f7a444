#include "ctlab/noise.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ctlab/errors.hpp"
#include "ctlab/rng.hpp"

namespace ctlab {

std::string noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::brownian: return "brownian";
    case NoiseKind::poly_brownian: return "poly_brownian";
    case NoiseKind::zero: return "zero";
  }
  return "?";
}

NoiseKind noise_kind_from_name(const std::string& name) {
  if (name == "brownian") return NoiseKind::brownian;
  if (name == "poly_brownian") return NoiseKind::poly_brownian;
  if (name == "zero") return NoiseKind::zero;
  throw ContractViolation("unknown noise kind '" + name + "'");
}

namespace {

void check_spec(const NoiseSpec& spec) {
  if (spec.dim < 1) throw ContractViolation("noise dimension must be >= 1");
  if (spec.kind == NoiseKind::poly_brownian &&
      (spec.degree < 0 || spec.degree % 2 != 0))
    throw ContractViolation("poly_brownian degree must be even and >= 0");
}

Vec transform_poly(const Vec& b, int degree) {
  double r2 = 0.0;
  for (double v : b) r2 += v * v;
  double f = std::pow(r2, degree / 2.0);
  Vec w(b);
  for (double& v : w) v *= f;
  return w;
}

}  // namespace

NoisePath sample_path(const NoiseSpec& spec, const std::vector<double>& times,
                      std::uint64_t stream) {
  check_spec(spec);
  if (times.empty()) throw ContractViolation("path needs at least one time");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] <= times[i - 1])
      throw ContractViolation("path times must be strictly increasing");

  NoisePath path;
  path.times = times;
  path.values.assign(times.size(), Vec(spec.dim, 0.0));
  if (spec.kind == NoiseKind::zero) return path;

  RngStream rng(spec.seed, stream);
  Vec b(spec.dim, 0.0);
  for (std::size_t i = 1; i < times.size(); ++i) {
    double sd = std::sqrt(times[i] - times[i - 1]);
    for (int d = 0; d < spec.dim; ++d) b[d] += sd * rng.normal();
    path.values[i] =
        spec.kind == NoiseKind::brownian ? b : transform_poly(b, spec.degree);
  }
  return path;
}

VarianceEstimate increment_variance(const NoiseSpec& spec, double t,
                                    double delta, int n_mc) {
  check_spec(spec);
  if (n_mc < 1000)
    throw ContractViolation("increment_variance requires n_mc >= 1000");
  if (delta <= 0.0) throw ContractViolation("delta must be positive");
  if (t < 0.0) throw ContractViolation("t must be >= 0");

  std::vector<double> grid;
  grid.push_back(0.0);
  if (t > 0.0) grid.push_back(t);
  grid.push_back(t + delta);

  int p = spec.dim;
  std::size_t n = static_cast<std::size_t>(n_mc);
  std::vector<Vec> incr(n);
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < static_cast<long long>(n); ++r) {
    NoisePath path = sample_path(spec, grid, static_cast<std::uint64_t>(r));
    const Vec& w1 = path.values.back();
    const Vec& w0 = path.values[path.values.size() - 2];
    Vec d(p);
    for (int k = 0; k < p; ++k) d[k] = w1[k] - w0[k];
    incr[static_cast<std::size_t>(r)] = std::move(d);
  }

  VarianceEstimate est;
  est.n_mc = n_mc;
  est.mean.assign(p, 0.0);
  est.mean_se.assign(p, 0.0);
  est.variance.assign(static_cast<std::size_t>(p) * p, 0.0);
  est.stderr_.assign(static_cast<std::size_t>(p) * p, 0.0);

  for (int k = 0; k < p; ++k)
    est.mean[k] = blocked_sum(n, [&](std::size_t i) { return incr[i][k]; }) /
                  static_cast<double>(n);
  for (int a = 0; a < p; ++a)
    for (int b = 0; b < p; ++b) {
      double ma = est.mean[a], mb = est.mean[b];
      double s2 = blocked_sum(n, [&](std::size_t i) {
                    return (incr[i][a] - ma) * (incr[i][b] - mb);
                  }) /
                  static_cast<double>(n - 1);
      double m22 = blocked_sum(n, [&](std::size_t i) {
                     double q = (incr[i][a] - ma) * (incr[i][b] - mb);
                     return q * q;
                   }) /
                   static_cast<double>(n);
      est.variance[a * p + b] = s2;
      double var_of_var = (m22 - s2 * s2) / static_cast<double>(n);
      est.stderr_[a * p + b] = var_of_var > 0.0 ? std::sqrt(var_of_var) : 0.0;
    }
  for (int k = 0; k < p; ++k)
    est.mean_se[k] =
        std::sqrt(est.variance[k * p + k] / static_cast<double>(n));
  return est;
}

void write_path_csv(const std::string& path, const NoisePath& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  int dim = p.values.empty() ? 0 : static_cast<int>(p.values[0].size());
  out << "t";
  for (int d = 1; d <= dim; ++d) out << ",w_" << d;
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < p.times.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", p.times[i]);
    out << buf;
    for (int d = 0; d < dim; ++d) {
      std::snprintf(buf, sizeof buf, "%.17g", p.values[i][d]);
      out << ',' << buf;
    }
    out << "\n";
  }
}

NoisePath read_path_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw Error("empty path file '" + path + "'");
  NoisePath p;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.empty()) continue;
    p.times.push_back(vals[0]);
    p.values.emplace_back(vals.begin() + 1, vals.end());
  }
  return p;
}

}  // namespace ctlab
