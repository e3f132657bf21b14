#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdlib>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace qwalk {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;

/// Lattice offset x in Z^s.
using Offset = std::vector<int>;

inline constexpr double pi = std::numbers::pi;
inline constexpr cplx I{0.0, 1.0};

/// Base error. `check()` names the originating validation so the CLI can
/// surface it in its machine-readable error record.
class Error : public std::runtime_error {
public:
  Error(std::string check, const std::string& what)
      : std::runtime_error(what), check_(std::move(check)) {}
  const std::string& check() const noexcept { return check_; }

private:
  std::string check_;
};

/// Input or model failed a precondition or a module-level check.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// A numerical consistency check failed (two routes disagree, residual too
/// large, ...). Signals a model outside the theory's hypotheses or a bug.
class NumericalError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const char* check, const std::string& msg) {
  if (!cond) throw ValidationError(check, msg);
}

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * pi);
  return a;
}

inline std::size_t ipow(std::size_t base, int e) {
  std::size_t r = 1;
  for (int i = 0; i < e; ++i) r *= base;
  return r;
}

/// Decode a row-major linear index into a multi-index with `n` per axis.
inline std::vector<int> unravel(std::size_t lin, int n, int s) {
  std::vector<int> idx(static_cast<std::size_t>(s));
  for (int a = s - 1; a >= 0; --a) {
    idx[static_cast<std::size_t>(a)] = static_cast<int>(lin % static_cast<std::size_t>(n));
    lin /= static_cast<std::size_t>(n);
  }
  return idx;
}

inline std::size_t ravel(std::span<const int> idx, int n) {
  std::size_t lin = 0;
  for (int v : idx) lin = lin * static_cast<std::size_t>(n) + static_cast<std::size_t>(v);
  return lin;
}

inline double operator_norm(const CMatrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<CMatrix> svd(m);
  return svd.singularValues()(0);
}

inline int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace detail

/// Uniform midpoint grid on (-pi, pi]: p_j = -pi + (2j+1) pi / n.
/// Midpoints avoid p = 0 and p = pi for even n, where many textbook walks
/// have exact band touchings.
inline std::vector<double> momentum_grid(int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] = -pi + (2.0 * j + 1.0) * pi / n;
  return g;
}

/// Momentum vector for a row-major grid point.
inline std::vector<double> grid_point(const std::vector<double>& axis, std::size_t lin, int s) {
  const int n = static_cast<int>(axis.size());
  auto idx = detail::unravel(lin, n, s);
  std::vector<double> p(static_cast<std::size_t>(s));
  for (int a = 0; a < s; ++a) p[static_cast<std::size_t>(a)] = axis[static_cast<std::size_t>(idx[static_cast<std::size_t>(a)])];
  return p;
}

}  // namespace qwalk
