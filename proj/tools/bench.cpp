#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "ctlab/density.hpp"
#include "ctlab/fields.hpp"
#include "ctlab/particles.hpp"
#include "ctlab/serial_ref.hpp"
#include "ctlab/transport.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace ctlab;

namespace {

double seconds(const std::function<void()>& work) {
  auto start = std::chrono::steady_clock::now();
  work();
  std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
  return dt.count();
}

void report(const std::string& name, double serial, double parallel,
            bool identical) {
  std::printf("%-18s serial %8.3fs  parallel %8.3fs  speedup %5.2fx  %s\n",
              name.c_str(), serial, parallel, serial / parallel,
              identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  std::printf("threads: 1 (built without OpenMP)\n");
#endif

  VelocityField field = make_field("damped", {{"dim", 1}});
  InitialDist dist;
  dist.kind = InitialDist::Kind::gaussian;
  dist.mean = {1.0};
  dist.cov = {0.04};

  {
    Ensemble e0 = sample_initial(dist, 300000, 1);
    OdeOptions opts;
    opts.dt = 1e-3;
    std::vector<Ensemble> par, ser;
    double tp = seconds([&] { par = integrate_ode(field, e0, 0.2, opts); });
    double ts =
        seconds([&] { ser = serial::integrate_ode(field, e0, 0.2, opts); });
    report("integrate_ode", ts, tp,
           par.back().positions == ser.back().positions);
  }

  {
    Ensemble e0 = sample_initial(dist, 4000000, 2);
    GridSpec spec;
    spec.axes = {Axis{-4.0, 4.0, 400}};
    DensityGrid par, ser;
    double tp = seconds([&] { par = histogram(e0, spec); });
    double ts = seconds([&] { ser = serial::histogram(e0, spec); });
    report("histogram", ts, tp, par.values == ser.values);
  }

  {
    Ensemble e0 = sample_initial(dist, 40000, 3);
    GridSpec spec;
    spec.axes = {Axis{-4.0, 4.0, 400}};
    Vec bw = default_bandwidth(e0);
    DensityGrid par, ser;
    double tp = seconds([&] { par = kde(e0, spec, bw); });
    double ts = seconds([&] { ser = serial::kde(e0, spec, bw); });
    report("kde", ts, tp, par.values == ser.values);
  }

  {
    VelocityField rot = make_field("rotation2d", {});
    GridSpec spec;
    spec.axes = {Axis{-4.0, 4.0, 500}, Axis{-4.0, 4.0, 500}};
    Vec mean{1.0, 0.0};
    Mat cov{0.04, 0.0, 0.0, 0.04};
    DensityGrid d0 = analytic_gaussian(mean, cov, spec, 0.0);
    double dt = 0.4 * cfl_limit(rot, d0, 0.0);
    DensityGrid par, ser;
    double tp = seconds([&] {
      DensityGrid d = d0;
      for (int k = 0; k < 20; ++k) d = step_continuity(rot, d, dt);
      par = d;
    });
    double ts = seconds([&] {
      DensityGrid d = d0;
      for (int k = 0; k < 20; ++k) d = serial::step_continuity(rot, d, dt);
      ser = d;
    });
    report("upwind_step", ts, tp, par.values == ser.values);
  }

  return 0;
}
