#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctlab/fields.hpp"
#include "ctlab/linalg.hpp"
#include "ctlab/noise.hpp"

namespace ctlab {

// N particles in R^p at a common time; positions row-major (particle, axis).
struct Ensemble {
  double time = 0.0;
  int dim = 0;
  std::vector<double> positions;

  std::size_t n() const {
    return dim == 0 ? 0 : positions.size() / static_cast<std::size_t>(dim);
  }
  double* at(std::size_t i) {
    return positions.data() + i * static_cast<std::size_t>(dim);
  }
  const double* at(std::size_t i) const {
    return positions.data() + i * static_cast<std::size_t>(dim);
  }
};

enum class OdeMethod { euler, rk4 };

struct InitialDist {
  enum class Kind { gaussian, uniform, delta_cloud };
  Kind kind = Kind::gaussian;
  Vec mean;        // gaussian
  Mat cov;         // gaussian, row-major p x p
  Vec lo, hi;      // uniform box
  Vec center;      // delta_cloud
  double radius = 0.0;

  int dim() const;
};

// Particle i is drawn from its own Philox stream (key = seed, stream = i),
// so the sample is independent of iteration order and thread schedule.
Ensemble sample_initial(const InitialDist& dist, std::size_t n,
                        std::uint64_t seed);

struct OdeOptions {
  OdeMethod method = OdeMethod::rk4;
  double dt = 1e-3;
  // Snapshot times in (t0, t_end]; t_end is always included.  Steps use the
  // fixed dt with shortened steps landing exactly on each snapshot time.
  std::vector<double> output_times;
};

std::vector<Ensemble> integrate_ode(const VelocityField& v,
                                    const Ensemble& init, double t_end,
                                    const OdeOptions& opts);

// dXi = v*(t, Xi) dt + sigma*(t, Xi) dW, Euler-Maruyama with the diffusion
// evaluated at the left endpoint.  One noise path per particle: W is sampled
// on the step grid from stream = particle index of noise.seed, and
// poly_brownian paths are exact transforms of the sampled Brownian path.
struct SdeSpec {
  VelocityField drift;
  std::function<Mat(double, const double*)> diffusion;  // p x p, row-major
  NoiseSpec noise;
};

Mat constant_diffusion_matrix(double sigma, int dim);

std::vector<Ensemble> integrate_sde(const SdeSpec& spec, const Ensemble& init,
                                    double t_end, double dt,
                                    const std::vector<double>& output_times = {});

// CSV with header t,particle_id,x_1,...,x_p; snapshots concatenated in time
// order.
void write_ensembles_csv(const std::string& path,
                         const std::vector<Ensemble>& snapshots);
std::vector<Ensemble> read_ensembles_csv(const std::string& path);

// Step-time grid shared by the integrators: fixed dt from t0, shortened
// steps landing exactly on every output time and on t_end.
std::vector<double> build_step_times(double t0, double t_end, double dt,
                                     const std::vector<double>& output_times);

}  // namespace ctlab
