#pragma once

#include <cstdint>
#include <vector>

#include "ctlab/density.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/particles.hpp"
#include "ctlab/transport.hpp"

namespace ctlab::serial {

// Single-threaded rewrites of the parallel kernels.  Every function here must
// return bit-identical results to its ctlab:: counterpart at any thread
// count; the parallel tests assert that and the benchmark measures the gap.

Ensemble sample_initial(const InitialDist& dist, std::size_t n,
                        std::uint64_t seed);

std::vector<Ensemble> integrate_ode(const VelocityField& v,
                                    const Ensemble& init, double t_end,
                                    const OdeOptions& opts = {});

std::vector<Ensemble> integrate_sde(const SdeSpec& spec, const Ensemble& init,
                                    double t_end, double dt,
                                    const std::vector<double>& output_times = {});

DensityGrid histogram(const Ensemble& e, const GridSpec& spec);

DensityGrid kde(const Ensemble& e, const GridSpec& spec, const Vec& bandwidth);

DensityGrid step_continuity(const VelocityField& v, const DensityGrid& d,
                            double dt);

}  // namespace ctlab::serial
