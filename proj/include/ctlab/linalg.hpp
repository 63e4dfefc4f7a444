#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace ctlab {

using Vec = std::vector<double>;
// Square matrices are stored row-major in a flat vector.
using Mat = std::vector<double>;

double dot(const Vec& a, const Vec& b);
double norm2(const Vec& a);
double norm_inf(const Vec& a);

Vec matvec(const Mat& a, const Vec& x);
Mat matmul(const Mat& a, const Mat& b, int p);
Mat transpose(const Mat& a, int p);
Mat identity(int p);

// Induced infinity norm (max absolute row sum).
double mat_norm_inf(const Mat& a, int p);

// e^A by scaling and squaring on a truncated Taylor series; intended for
// the small matrices (p <= 3) this library works with.
Mat mat_exp(const Mat& a, int p);

// Lower-triangular L with L L^T = A; throws ContractViolation when A is not
// positive semi-definite within `tol` (semi-definite directions get a zero
// column).
Mat cholesky_psd(const Mat& a, int p, double tol = 1e-12);

// Eigenvalues of a symmetric matrix by cyclic Jacobi, ascending.
Vec sym_eigenvalues(Mat a, int p);

// Solve A x = b for symmetric positive definite A (used for Gaussian
// densities); throws ContractViolation when singular.
Vec solve_spd(const Mat& a, const Vec& b, double* log_det = nullptr);

// Compensated (Kahan) serial sum; deterministic for a fixed input order.
double kahan_sum(const double* x, std::size_t n);

// Deterministic parallel reduction: the index range is cut into fixed-size
// blocks, each block is summed serially, block sums are combined in block
// order.  The result is independent of the thread count.
template <class F>
double blocked_sum(std::size_t n, F&& value_at, std::size_t block = 4096) {
  if (n == 0) return 0.0;
  std::size_t nblocks = (n + block - 1) / block;
  std::vector<double> partial(nblocks, 0.0);
  std::exception_ptr failure = nullptr;
// Exceptions cannot leave an OpenMP region, so the first one is parked and
// rethrown after the join.
#pragma omp parallel for schedule(static)
  for (long long b = 0; b < static_cast<long long>(nblocks); ++b) {
    try {
      std::size_t lo = static_cast<std::size_t>(b) * block;
      std::size_t hi = lo + block < n ? lo + block : n;
      double s = 0.0, c = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        double y = value_at(i) - c;
        double t = s + y;
        c = (t - s) - y;
        s = t;
      }
      partial[static_cast<std::size_t>(b)] = s;
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return kahan_sum(partial.data(), partial.size());
}

}  // namespace ctlab
