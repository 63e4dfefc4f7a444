#include "ctlab/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "ctlab/errors.hpp"

namespace ctlab {

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

double norm_inf(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::fabs(v));
  return m;
}

Vec matvec(const Mat& a, const Vec& x) {
  std::size_t p = x.size();
  Vec y(p, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) y[i] += a[i * p + j] * x[j];
  return y;
}

Mat matmul(const Mat& a, const Mat& b, int p) {
  Mat c(static_cast<std::size_t>(p) * p, 0.0);
  for (int i = 0; i < p; ++i)
    for (int k = 0; k < p; ++k) {
      double aik = a[i * p + k];
      for (int j = 0; j < p; ++j) c[i * p + j] += aik * b[k * p + j];
    }
  return c;
}

Mat transpose(const Mat& a, int p) {
  Mat t(static_cast<std::size_t>(p) * p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) t[j * p + i] = a[i * p + j];
  return t;
}

Mat identity(int p) {
  Mat m(static_cast<std::size_t>(p) * p, 0.0);
  for (int i = 0; i < p; ++i) m[i * p + i] = 1.0;
  return m;
}

double mat_norm_inf(const Mat& a, int p) {
  double m = 0.0;
  for (int i = 0; i < p; ++i) {
    double row = 0.0;
    for (int j = 0; j < p; ++j) row += std::fabs(a[i * p + j]);
    m = std::max(m, row);
  }
  return m;
}

Mat mat_exp(const Mat& a, int p) {
  // Scale A down until ||A/2^s|| <= 1/2, sum the Taylor series to machine
  // precision, square s times.
  int s = 0;
  double nrm = mat_norm_inf(a, p);
  while (nrm > 0.5) {
    nrm *= 0.5;
    ++s;
  }
  double scale = std::ldexp(1.0, -s);
  Mat b(a);
  for (double& v : b) v *= scale;

  Mat result = identity(p);
  Mat term = identity(p);
  for (int k = 1; k <= 30; ++k) {
    term = matmul(term, b, p);
    for (double& v : term) v /= k;
    for (std::size_t i = 0; i < result.size(); ++i) result[i] += term[i];
    if (mat_norm_inf(term, p) < 1e-18) break;
  }
  for (int i = 0; i < s; ++i) result = matmul(result, result, p);
  return result;
}

Mat cholesky_psd(const Mat& a, int p, double tol) {
  Mat l(static_cast<std::size_t>(p) * p, 0.0);
  double scale = std::max(mat_norm_inf(a, p), 1.0);
  for (int j = 0; j < p; ++j) {
    double d = a[j * p + j];
    for (int k = 0; k < j; ++k) d -= l[j * p + k] * l[j * p + k];
    if (d < -tol * scale)
      throw ContractViolation("covariance is not positive semi-definite");
    if (d <= tol * scale) {
      // Semi-definite direction: zero column, but off-diagonal entries must
      // vanish too for A to be PSD.
      for (int i = j + 1; i < p; ++i) {
        double off = a[i * p + j];
        for (int k = 0; k < j; ++k) off -= l[i * p + k] * l[j * p + k];
        if (std::fabs(off) > tol * scale * 10.0)
          throw ContractViolation("covariance is not positive semi-definite");
      }
      continue;
    }
    double ljj = std::sqrt(d);
    l[j * p + j] = ljj;
    for (int i = j + 1; i < p; ++i) {
      double v = a[i * p + j];
      for (int k = 0; k < j; ++k) v -= l[i * p + k] * l[j * p + k];
      l[i * p + j] = v / ljj;
    }
  }
  return l;
}

Vec sym_eigenvalues(Mat a, int p) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < p; ++i)
      for (int j = i + 1; j < p; ++j) off += a[i * p + j] * a[i * p + j];
    if (off < 1e-30) break;
    for (int i = 0; i < p; ++i)
      for (int j = i + 1; j < p; ++j) {
        double apq = a[i * p + j];
        if (std::fabs(apq) < 1e-300) continue;
        double app = a[i * p + i], aqq = a[j * p + j];
        double theta = 0.5 * (aqq - app) / apq;
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < p; ++k) {
          double aik = a[i * p + k], ajk = a[j * p + k];
          a[i * p + k] = c * aik - s * ajk;
          a[j * p + k] = s * aik + c * ajk;
        }
        for (int k = 0; k < p; ++k) {
          double aki = a[k * p + i], akj = a[k * p + j];
          a[k * p + i] = c * aki - s * akj;
          a[k * p + j] = s * aki + c * akj;
        }
      }
  }
  Vec ev(p);
  for (int i = 0; i < p; ++i) ev[i] = a[i * p + i];
  std::sort(ev.begin(), ev.end());
  return ev;
}

Vec solve_spd(const Mat& a, const Vec& b, double* log_det) {
  int p = static_cast<int>(b.size());
  Mat l = cholesky_psd(a, p, 1e-14);
  for (int j = 0; j < p; ++j)
    if (l[j * p + j] == 0.0)
      throw ContractViolation("covariance is singular");
  if (log_det) {
    *log_det = 0.0;
    for (int j = 0; j < p; ++j) *log_det += 2.0 * std::log(l[j * p + j]);
  }
  Vec y(p);
  for (int i = 0; i < p; ++i) {
    double v = b[i];
    for (int k = 0; k < i; ++k) v -= l[i * p + k] * y[k];
    y[i] = v / l[i * p + i];
  }
  Vec x(p);
  for (int i = p - 1; i >= 0; --i) {
    double v = y[i];
    for (int k = i + 1; k < p; ++k) v -= l[k * p + i] * x[k];
    x[i] = v / l[i * p + i];
  }
  return x;
}

double kahan_sum(const double* x, std::size_t n) {
  double s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double y = x[i] - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

}  // namespace ctlab
