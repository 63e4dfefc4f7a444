#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctlab/linalg.hpp"

namespace ctlab {

enum class NoiseKind { brownian, poly_brownian, zero };

std::string noise_kind_name(NoiseKind k);
NoiseKind noise_kind_from_name(const std::string& name);

// Driving process W(t).  brownian: W = B.  poly_brownian of even degree k:
// W = |B|^k B, obtained by transforming a sampled Brownian path, never by
// discretizing an SDE for W.  zero: identically 0.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::brownian;
  int degree = 2;  // poly_brownian only; must be even and >= 0
  int dim = 1;
  std::uint64_t seed = 0;
};

// Path sampled on a fixed grid; starts at the origin: values[0] = 0 at
// times[0].  The clock is the grid itself, so a path "started at t0" has
// B(t0) = 0.
struct NoisePath {
  std::vector<double> times;
  std::vector<Vec> values;
};

// Deterministic in (spec.seed, stream): replicate streams are disjoint
// Philox counter blocks, so parallel sampling never overlaps.
NoisePath sample_path(const NoiseSpec& spec, const std::vector<double>& times,
                      std::uint64_t stream = 0);

struct VarianceEstimate {
  Mat variance;   // sample covariance of the increment, dim x dim
  Mat stderr_;    // per-entry Monte Carlo standard errors
  Vec mean;
  Vec mean_se;
  int n_mc = 0;
};

// Monte Carlo estimate of Var(W(t+delta) - W(t)) over n_mc replicate paths
// (streams 0..n_mc-1).  Requires n_mc >= 1000.
VarianceEstimate increment_variance(const NoiseSpec& spec, double t,
                                    double delta, int n_mc);

// CSV with header t,w_1,...,w_p.
void write_path_csv(const std::string& path, const NoisePath& p);
NoisePath read_path_csv(const std::string& path);

}  // namespace ctlab
