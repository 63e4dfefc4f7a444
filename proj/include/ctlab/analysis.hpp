#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctlab/density.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/linalg.hpp"
#include "ctlab/particles.hpp"
#include "ctlab/transport.hpp"

namespace ctlab {

// Measured decay of a quantity over a sigma ladder; fitted_order is the
// log-log slope using points above `floor` (infinite when fewer than two
// points remain, which counts as converged).
struct ScalingReport {
  std::vector<double> sigmas;  // strictly decreasing
  std::vector<double> quantities;
  double fitted_order = 0.0;
  bool pass = false;
  double floor = 0.0;
};

double fit_loglog_order(const std::vector<double>& xs,
                        const std::vector<double>& ys, double floor = 0.0);

// Exact density of an initial distribution projected on a grid: erf cell
// averages for gaussians, overlap fractions for boxes (delta clouds with
// positive radius count as 1D boxes).
DensityGrid initial_density(const InitialDist& dist, const GridSpec& spec,
                            double time);

// Transported mean and covariance of a Gaussian under a catalog field with
// linear flow (constant, damped, linear, rotation2d); nullopt otherwise.
std::optional<std::pair<Vec, Mat>> gaussian_flow_moments(
    const VelocityField& field, const Vec& mean0, const Mat& cov0, double t);

// Conservative aggregation of a refined grid back onto the grid it refines
// (each coarse value is the mean of its refine^p children).
DensityGrid coarsen(const DensityGrid& fine, int refine);

// Exact Gaussian snapshots under a linear-flow field, packaged as a run.
TransportRun analytic_gaussian_run(const VelocityField& field, const Vec& mean0,
                                   const Mat& cov0,
                                   const std::vector<double>& times,
                                   const GridSpec& spec);

// Largest relative error of a recovered velocity against the true field on
// the unmasked cells.
double recovery_max_rel_error(const VelocityEstimate& est,
                              const VelocityField& field, double t);

struct ReynoldsOptions {
  double cfl = 0.45;
  int refine = 16;  // PDE runs refine the comparison grid; 0 skips the PDE
  double particle_dt = 1e-3;
  std::uint64_t seed = 1;
  std::vector<double> pde_output_times;
};

struct ReynoldsReport {
  std::optional<double> l1_pde;
  std::optional<double> l1_analytic;
  DensityGrid particle_hist;
  std::optional<DensityGrid> pde_aggregated;
  TransportRun run;  // refined-resolution PDE run (empty when refine = 0)
};

// Same initial density through particles and through the PDE; histograms the
// ensemble at t_end and reports L1 distances on the comparison grid.
ReynoldsReport reynolds_check(const VelocityField& field,
                              const InitialDist& dist, std::size_t n_particles,
                              double t_end, const GridSpec& grid,
                              const ReynoldsOptions& opts = {});

// quantity(sigma) = |integral of f against Gaussian(x0, sigma^2 I) - f(x0)|
// by erf-cell quadrature; pass needs overall decay and order >= 1.8.
ScalingReport concentration_check(const ScalarField& f, double f_bound,
                                  const Vec& x0,
                                  const std::vector<double>& sigmas,
                                  double t = 0.0);

enum class ExpansionMode { pde, particles };

struct ExpansionOptions {
  double cfl = 0.25;
  // PDE cell width: min(sigma/8, accuracy*sigma^2/max(|v(x0)|inf, 0.1)),
  // so discretization error shrinks like the sigma^2 signal it must resolve.
  double accuracy = 0.1;
  double domain_sigmas = 8.0;
  int series_truncation = 8;
  std::size_t n_particles = 400000;
  std::uint64_t seed = 11;
};

struct MomentExpansionReport {
  ScalingReport mean_report;      // |mean - (x0 + g(x0;dt))| / dt
  ScalingReport variance_report;  // |cov - sigma^2 I - cross| / dt, inf norm
  std::vector<Mat> var_coeff;     // (cov - sigma^2 I)/dt per sigma
  std::vector<Mat> cross_dt;      // analytic cross term/dt per sigma
  double dt = 0.0;
};

MomentExpansionReport moment_expansion_check(const VelocityField& field,
                                             const Vec& x0,
                                             const std::vector<double>& sigmas,
                                             double dt, ExpansionMode mode,
                                             const ExpansionOptions& opts = {});

struct DualExpansionReport {
  std::vector<double> left;       // time difference quotients of integral f rho
  std::vector<double> right;      // quadrature of D^j f against rho
  std::vector<double> deviation;  // |left - right| per order
};

DualExpansionReport dual_expansion_check(const VelocityField& field,
                                         const ScalarField& f, const Vec& x0,
                                         double sigma, double dt, int max_order,
                                         const ExpansionOptions& opts = {});

struct DetectOptions {
  double bin_frac = 0.02;  // bin width as a fraction of the ensemble sd
  std::size_t min_bin = 30;
  double min_kept_frac = 0.5;
  double threshold_factor = 5.0;
  int series_truncation = 6;
};

struct DetectionVerdict {
  Mat conditional_variance_rate;  // within-bin variance/delta, net of floor
  Mat raw_rate;                   // before the calibration subtraction
  double mean_shift_check = 0.0;  // weighted RMS of bin means vs x + g*(x;delta)
  bool stochastic = false;
  double threshold_used = 0.0;
  double calibration_floor = 0.0;
  double bin_width = 0.0;
  std::size_t bins_used = 0;
  std::size_t kept = 0;
  double delta = 0.0;
  // Law-of-total-variance bookkeeping (traces).
  double total_variance = 0.0;
  double within_variance = 0.0;
  double between_variance = 0.0;
};

inline const char* decision_name(bool stochastic) {
  return stochastic ? "stochastic" : "deterministic";
}

// trajectories[0] holds the conditioning time t0; later entries are the same
// particles at later times on a common grid with spacing <= delta/10.  Every
// verdict is calibrated against an internally integrated sigma = 0 twin of
// the same initial ensemble under the hypothesis field.
DetectionVerdict detect_stochasticity(const std::vector<Ensemble>& trajectories,
                                      const VelocityField& field_hypothesis,
                                      double delta,
                                      const DetectOptions& opts = {});

struct DensityModeVerdict {
  std::vector<double> residual_norms;  // masked inf norm per resolution
  std::vector<double> floors;          // split-half noise floor per resolution
  double refinement_ratio = 0.0;       // coarse residual / fine residual
  bool stochastic = false;
  double ratio_threshold = 0.0;
};

// Histograms the snapshots at each resolution (coarse to fine), evaluates
// the continuity residual against the hypothesis field at the middle
// snapshot, and calls the run stochastic when the residual neither shrinks
// under refinement nor sits at the sampling noise floor.
DensityModeVerdict density_mode_detection(
    const std::vector<Ensemble>& snapshots,
    const VelocityField& field_hypothesis,
    const std::vector<GridSpec>& resolutions, double ratio_threshold = 1.3);

}  // namespace ctlab
