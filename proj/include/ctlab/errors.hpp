#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctlab {

// Base class for every error the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A documented precondition was violated by the caller.
struct ContractViolation : Error {
  using Error::Error;
};

// A particle left the finite range of double arithmetic.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, std::size_t particle, double time)
      : Error(msg), particle(particle), time(time) {}
  std::size_t particle;
  double time;
};

// Requested step exceeds the stability limit; carries the admissible step.
struct CflViolation : Error {
  CflViolation(const std::string& msg, double admissible)
      : Error(msg), admissible_dt(admissible) {}
  double admissible_dt;
};

// Density support reached the guarded boundary margin of the grid.
struct BoundaryLeakError : Error {
  using Error::Error;
};

// Derivative order beyond what the numeric fallback supports.
struct UnsupportedOrderError : Error {
  using Error::Error;
};

// Grid mass is inconsistent with a normalized density.
struct StaleGridError : Error {
  using Error::Error;
};

// Detector binning produced too-sparse bins; carries a usable width.
struct BinningError : Error {
  BinningError(const std::string& msg, double suggested)
      : Error(msg), suggested_width(suggested) {}
  double suggested_width;
};

// Velocity recovery found no cell above the density floor.
struct UnrecoverableError : Error {
  using Error::Error;
};

}  // namespace ctlab
