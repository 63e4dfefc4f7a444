#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ctlab/density.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/linalg.hpp"

namespace ctlab {

enum class Scheme { upwind1, none };  // none marks analytically built runs

std::string scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);

struct TransportRun {
  std::vector<DensityGrid> snapshots;  // strictly increasing times
  VelocityField field;
  double cfl = 0.0;
  Scheme scheme = Scheme::upwind1;
};

// Largest stable explicit step at time t: 1 / (sum_a max|v_a|/w_a) for pure
// advection, with the diffusion tensor D (if any) adding 2 D_aa / w_a^2 and
// |D_ab| / (w_a w_b) terms to the denominator.
double cfl_limit(const VelocityField& v, const DensityGrid& d, double t,
                 const Mat& diffusion = {});

// One donor-cell upwind step of the continuity equation.  Conserves mass to
// roundoff, preserves nonnegativity under the CFL bound, zero-inflow
// boundaries.  Refuses dt beyond the stability limit (CflViolation carries
// the admissible step) and refuses densities whose support reaches within 2
// cells of the boundary (BoundaryLeakError).
DensityGrid step_continuity(const VelocityField& v, const DensityGrid& d,
                            double dt);

// Repeated upwind steps with dt = cfl * admissible, shortened to land
// exactly on every output time and on t_end.  snapshots[0] is the initial
// density; output times must lie in (d0.time, t_end].
TransportRun solve_continuity(const VelocityField& v, const DensityGrid& d0,
                              double t_end, double cfl,
                              const std::vector<double>& output_times = {});

// Upwind advection plus explicit central diffusion with constant
// D = sigma sigma^T / 2 in conservative flux form.  With sigma = 0 the code
// path and the step sequence are the ones of solve_continuity.
TransportRun solve_fokker_planck(const VelocityField& drift, const Mat& sigma,
                                 const DensityGrid& d0, double t_end,
                                 double cfl,
                                 const std::vector<double>& output_times = {});
TransportRun solve_fokker_planck(const VelocityField& drift, double sigma,
                                 const DensityGrid& d0, double t_end,
                                 double cfl,
                                 const std::vector<double>& output_times = {});

// Cellwise continuity residual R = drho/dt + div(v rho) at snapshot `index`,
// central differences in both time and space.  Needs equally spaced
// neighbor snapshots.
struct ResidualGrid {
  std::vector<Axis> axes;
  Vec values;
  double time = 0.0;

  double norm_inf() const { return ctlab::norm_inf(values); }
};

ResidualGrid residual(const VelocityField& v, const TransportRun& run,
                      std::size_t index);

// Velocity component along `axis` from the cumulative time-derivative flux,
// v_hat = -(integral of drho/dt up to x) / rho, on cells where rho exceeds
// floor_frac * max(rho); mask marks the usable cells.
struct VelocityEstimate {
  std::vector<Axis> axes;
  Vec values;                       // estimate, 0 on masked cells
  std::vector<unsigned char> mask;  // 1 = usable
  int axis = 0;
  double floor_used = 0.0;
};

VelocityEstimate recover_velocity(const TransportRun& run, std::size_t index,
                                  int axis = 0, double floor_frac = 1e-3);
// Middle snapshot, axis 0.
VelocityEstimate recover_velocity(const TransportRun& run);

// Run directory: snapshot_0000.csv (+ sidecars) and manifest.json with the
// field name and parameters, cfl, scheme, and snapshot times.  Reading
// requires a catalog field (custom closures cannot be rebuilt from a name).
void write_run(const std::string& dir, const TransportRun& run);
TransportRun read_run(const std::string& dir);

}  // namespace ctlab
