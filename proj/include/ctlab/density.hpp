#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ctlab/linalg.hpp"
#include "ctlab/particles.hpp"

namespace ctlab {

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  int cells = 1;

  double width() const { return (hi - lo) / cells; }
  double center(int i) const { return lo + (i + 0.5) * width(); }
};

// What happens to particles outside the grid box.
enum class OutOfGrid { drop, clip };

struct GridSpec {
  std::vector<Axis> axes;
  OutOfGrid policy = OutOfGrid::drop;
};

// Cell-averaged density on a rectangular grid, unit total mass.  Values are
// stored row-major with the last axis fastest.  Immutable by convention once
// returned from a constructor.
struct DensityGrid {
  std::vector<Axis> axes;
  Vec values;
  double time = 0.0;
  std::size_t dropped = 0;  // particles outside the grid under the drop policy

  int dim() const { return static_cast<int>(axes.size()); }
  std::size_t n_cells() const;
  double cell_volume() const;
  // Total integral of the density over the grid.
  double mass() const;
};

bool same_axes(const DensityGrid& a, const DensityGrid& b);

// Row-major linear index helpers (last axis fastest).
std::size_t ravel_index(const std::vector<Axis>& axes, const int* idx);
void unravel_index(const std::vector<Axis>& axes, std::size_t flat, int* idx);

struct MomentReport {
  Vec mean;
  Mat cov;  // dim x dim
  double trace_cov = 0.0;
  double mass = 0.0;
};

// Cell value = count / (retained N * cell volume); under the drop policy the
// drop count is recorded and normalization uses the retained count.
DensityGrid histogram(const Ensemble& e, const GridSpec& spec);

// Gaussian product kernel evaluated at cell centers, one bandwidth per axis,
// renormalized to unit mass on the grid.
DensityGrid kde(const Ensemble& e, const GridSpec& spec, const Vec& bandwidth);
// Plug-in default: per-axis sample sigma * N^(-1/(dim+4)).
DensityGrid kde(const Ensemble& e, const GridSpec& spec);
Vec default_bandwidth(const Ensemble& e);

// Mean and covariance by cell-center quadrature; requires unit mass within
// 1e-6 (stale grids are rejected rather than silently renormalized).
MomentReport moments(const DensityGrid& d);

// Sample mean and covariance (denominator N).
MomentReport moments_ensemble(const Ensemble& e);

double l1_distance(const DensityGrid& a, const DensityGrid& b);

// Discretized Gaussian reference density.  Diagonal covariance gets exact
// per-axis erf cell averages; a general covariance is evaluated at cell
// centers.  Either way the grid is renormalized to unit mass.
DensityGrid analytic_gaussian(const Vec& mean, const Mat& cov,
                              const GridSpec& spec, double time);

// CSV `cell_index_1,...,cell_index_p,value` in row-major cell order, plus a
// JSON sidecar at path + ".json" holding axes, time, mass, and drop count.
void write_density_csv(const std::string& path, const DensityGrid& d);
DensityGrid read_density_csv(const std::string& path);

}  // namespace ctlab
