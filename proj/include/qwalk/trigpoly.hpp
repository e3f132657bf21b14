#pragma once

// Matrix-valued trigonometric polynomials W(p) = sum_x C_x e^{i p.x}: the
// momentum-space form of translation-invariant walk and Kraus operators.

#include "qwalk/common.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace qwalk {

class TrigPolyMatrix {
public:
  using CoeffMap = std::map<Offset, CMatrix>;

  TrigPolyMatrix(int latticeDim, int coinDim) : s_(latticeDim), d_(coinDim) {
    detail::require(latticeDim > 0 && coinDim > 0, "trigpoly.shape",
                    "lattice and coin dimension must be positive");
  }

  static TrigPolyMatrix constant(const CMatrix& c, int latticeDim) {
    TrigPolyMatrix r(latticeDim, static_cast<int>(c.rows()));
    r.add_term(Offset(static_cast<std::size_t>(latticeDim), 0), c);
    return r;
  }

  static TrigPolyMatrix identity(int latticeDim, int coinDim) {
    return constant(CMatrix::Identity(coinDim, coinDim), latticeDim);
  }

  static TrigPolyMatrix monomial(const Offset& x, const CMatrix& c) {
    TrigPolyMatrix r(static_cast<int>(x.size()), static_cast<int>(c.rows()));
    r.add_term(x, c);
    return r;
  }

  /// Diagonal conditional shift diag(e^{i p.x_0}, ..., e^{i p.x_{d-1}}).
  static TrigPolyMatrix diagonal_shift(const std::vector<Offset>& shifts) {
    detail::require(!shifts.empty(), "trigpoly.shape", "empty shift list");
    const int d = static_cast<int>(shifts.size());
    TrigPolyMatrix r(static_cast<int>(shifts.front().size()), d);
    for (int k = 0; k < d; ++k) {
      CMatrix e = CMatrix::Zero(d, d);
      e(k, k) = 1.0;
      r.add_term(shifts[static_cast<std::size_t>(k)], e);
    }
    return r;
  }

  /// Accumulates c into the coefficient at offset x.
  void add_term(const Offset& x, const CMatrix& c) {
    detail::require(static_cast<int>(x.size()) == s_, "trigpoly.shape",
                    "offset has wrong lattice dimension");
    detail::require(c.rows() == d_ && c.cols() == d_, "trigpoly.shape",
                    "coefficient is not coinDim x coinDim");
    auto it = coeffs_.find(x);
    if (it == coeffs_.end())
      coeffs_.emplace(x, c);
    else
      it->second += c;
  }

  int lattice_dim() const noexcept { return s_; }
  int coin_dim() const noexcept { return d_; }
  const CoeffMap& coefficients() const noexcept { return coeffs_; }

  /// Largest |x_a| over the support.
  int max_degree() const {
    int m = 0;
    for (const auto& [x, c] : coeffs_)
      for (int v : x) m = std::max(m, std::abs(v));
    return m;
  }

  CMatrix evaluate(std::span<const double> p) const {
    detail::require(static_cast<int>(p.size()) == s_, "trigpoly.evaluate",
                    "momentum has wrong dimension");
    CMatrix out = CMatrix::Zero(d_, d_);
    for (const auto& [x, c] : coeffs_) {
      double phase = 0.0;
      for (int a = 0; a < s_; ++a) phase += p[static_cast<std::size_t>(a)] * x[static_cast<std::size_t>(a)];
      out += std::polar(1.0, phase) * c;
    }
    return out;
  }

  CMatrix evaluate(double p) const { return evaluate(std::span<const double>(&p, 1)); }

  CMatrix evaluate(const std::vector<double>& p) const {
    return evaluate(std::span<const double>(p.data(), p.size()));
  }

  /// Pointwise adjoint: W(p)^* = sum_x C_x^* e^{-i p.x}.
  TrigPolyMatrix adjoint() const {
    TrigPolyMatrix r(s_, d_);
    for (const auto& [x, c] : coeffs_) {
      Offset y(x.size());
      std::transform(x.begin(), x.end(), y.begin(), [](int v) { return -v; });
      r.add_term(y, c.adjoint());
    }
    return r;
  }

  /// Copy without coefficients of operator norm below tol.
  TrigPolyMatrix pruned(double tol = 1e-14) const {
    TrigPolyMatrix r(s_, d_);
    for (const auto& [x, c] : coeffs_)
      if (detail::operator_norm(c) >= tol) r.coeffs_.emplace(x, c);
    return r;
  }

  /// Polynomial equality by coefficient comparison after pruning.
  bool equals(const TrigPolyMatrix& o, double tol = 1e-14) const {
    if (s_ != o.s_ || d_ != o.d_) return false;
    const auto a = pruned(tol), b = o.pruned(tol);
    if (a.coeffs_.size() != b.coeffs_.size()) return false;
    for (const auto& [x, c] : a.coeffs_) {
      auto it = b.coeffs_.find(x);
      if (it == b.coeffs_.end()) return false;
      if (detail::operator_norm(c - it->second) > tol) return false;
    }
    return true;
  }

  TrigPolyMatrix& operator+=(const TrigPolyMatrix& o) {
    detail::require(s_ == o.s_ && d_ == o.d_, "trigpoly.shape", "dimension mismatch in sum");
    for (const auto& [x, c] : o.coeffs_) add_term(x, c);
    return *this;
  }

  friend TrigPolyMatrix operator+(TrigPolyMatrix a, const TrigPolyMatrix& b) { return a += b; }

  friend TrigPolyMatrix operator-(TrigPolyMatrix a, const TrigPolyMatrix& b) {
    return a += (b * cplx(-1.0));
  }

  friend TrigPolyMatrix operator*(TrigPolyMatrix a, cplx z) {
    for (auto& [x, c] : a.coeffs_) c *= z;
    return a;
  }

  friend TrigPolyMatrix operator*(cplx z, TrigPolyMatrix a) { return std::move(a) * z; }

private:
  int s_;
  int d_;
  CoeffMap coeffs_;
};

inline CMatrix evaluate(const TrigPolyMatrix& poly, std::span<const double> p) {
  return poly.evaluate(p);
}

/// Coefficient convolution; evaluate(multiply(a,b),p) = a(p) b(p).
inline TrigPolyMatrix multiply(const TrigPolyMatrix& a, const TrigPolyMatrix& b) {
  detail::require(a.lattice_dim() == b.lattice_dim() && a.coin_dim() == b.coin_dim(),
                  "trigpoly.multiply", "dimension mismatch");
  TrigPolyMatrix r(a.lattice_dim(), a.coin_dim());
  for (const auto& [x, ca] : a.coefficients())
    for (const auto& [y, cb] : b.coefficients()) {
      Offset z(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + y[i];
      r.add_term(z, ca * cb);
    }
  return r;
}

inline TrigPolyMatrix operator*(const TrigPolyMatrix& a, const TrigPolyMatrix& b) {
  return multiply(a, b);
}

/// d/dp_axis: coefficient at x becomes i x_axis C_x.
inline TrigPolyMatrix derivative(const TrigPolyMatrix& poly, int axis) {
  detail::require(axis >= 0 && axis < poly.lattice_dim(), "trigpoly.derivative",
                  "axis out of range");
  TrigPolyMatrix r(poly.lattice_dim(), poly.coin_dim());
  for (const auto& [x, c] : poly.coefficients()) {
    const int k = x[static_cast<std::size_t>(axis)];
    if (k != 0) r.add_term(x, (I * static_cast<double>(k)) * c);
  }
  return r;
}

/// Directional derivative lambda . grad.
inline TrigPolyMatrix directional_derivative(const TrigPolyMatrix& poly, std::span<const double> lambda) {
  detail::require(static_cast<int>(lambda.size()) == poly.lattice_dim(), "trigpoly.derivative",
                  "direction has wrong dimension");
  TrigPolyMatrix r(poly.lattice_dim(), poly.coin_dim());
  for (const auto& [x, c] : poly.coefficients()) {
    double k = 0.0;
    for (std::size_t a = 0; a < x.size(); ++a) k += lambda[a] * x[a];
    if (k != 0.0) r.add_term(x, (I * k) * c);
  }
  return r;
}

struct CheckReport {
  std::string check;
  bool pass = false;
  double maxDeviation = 0.0;
  int gridPerAxis = 0;
};

namespace detail {

// sum_alpha K_alpha^* K_alpha - 1 has offsets in N - N, so its vanishing on
// (4 maxdeg + 1)^s points per axis certifies it for all p.
inline int certifying_grid(int maxDegree) { return 4 * maxDegree + 1; }

template <class F>
void for_each_grid_point(int s, int n, F&& f) {
  const std::size_t total = ipow(static_cast<std::size_t>(n), s);
  std::vector<double> p(static_cast<std::size_t>(s));
  for (std::size_t lin = 0; lin < total; ++lin) {
    auto idx = unravel(lin, n, s);
    for (int a = 0; a < s; ++a) p[static_cast<std::size_t>(a)] = 2.0 * pi * idx[static_cast<std::size_t>(a)] / n;
    f(std::span<const double>(p.data(), p.size()));
  }
}

}  // namespace detail

/// Max over a grid of ||W(p) W(p)^* - 1||. Passing on the certifying grid
/// certifies unitarity at every p.
inline CheckReport check_unitary(const TrigPolyMatrix& poly, int gridPerAxis, double tol) {
  const int need = detail::certifying_grid(poly.max_degree());
  detail::require(gridPerAxis >= need, "trigpoly.check_unitary",
                  "gridPerAxis must be at least " + std::to_string(need));
  CheckReport rep{"unitarity", false, 0.0, gridPerAxis};
  const CMatrix id = CMatrix::Identity(poly.coin_dim(), poly.coin_dim());
  detail::for_each_grid_point(poly.lattice_dim(), gridPerAxis, [&](std::span<const double> p) {
    const CMatrix w = poly.evaluate(p);
    rep.maxDeviation = std::max(rep.maxDeviation, detail::operator_norm(w * w.adjoint() - id));
  });
  rep.pass = rep.maxDeviation <= tol;
  return rep;
}

inline CheckReport check_unitary(const TrigPolyMatrix& poly, double tol = 1e-10) {
  return check_unitary(poly, detail::certifying_grid(poly.max_degree()), tol);
}

/// Max over a grid of ||sum_alpha K_alpha(p)^* K_alpha(p) - 1||.
inline CheckReport check_kraus_normalization(const std::vector<TrigPolyMatrix>& family,
                                             int gridPerAxis, double tol) {
  detail::require(!family.empty(), "trigpoly.check_kraus_normalization", "empty Kraus family");
  int deg = 0;
  for (const auto& k : family) {
    detail::require(k.lattice_dim() == family.front().lattice_dim() &&
                        k.coin_dim() == family.front().coin_dim(),
                    "trigpoly.check_kraus_normalization", "Kraus operators differ in shape");
    deg = std::max(deg, k.max_degree());
  }
  const int need = detail::certifying_grid(deg);
  detail::require(gridPerAxis >= need, "trigpoly.check_kraus_normalization",
                  "gridPerAxis must be at least " + std::to_string(need));
  const int d = family.front().coin_dim();
  CheckReport rep{"kraus_normalization", false, 0.0, gridPerAxis};
  detail::for_each_grid_point(family.front().lattice_dim(), gridPerAxis, [&](std::span<const double> p) {
    CMatrix sum = -CMatrix::Identity(d, d);
    for (const auto& k : family) {
      const CMatrix kp = k.evaluate(p);
      sum += kp.adjoint() * kp;
    }
    rep.maxDeviation = std::max(rep.maxDeviation, detail::operator_norm(sum));
  });
  rep.pass = rep.maxDeviation <= tol;
  return rep;
}

inline CheckReport check_kraus_normalization(const std::vector<TrigPolyMatrix>& family, double tol = 1e-10) {
  int deg = 0;
  for (const auto& k : family) deg = std::max(deg, k.max_degree());
  return check_kraus_normalization(family, detail::certifying_grid(deg), tol);
}

/// Integer vector with det W(p) = det W(0) e^{i ind.p}.
struct IndexVector {
  std::vector<int> components;
  std::vector<double> rawWinding;
  bool operator==(const IndexVector& o) const { return components == o.components; }
};

/// Winding of p_j -> det W(p_j e_j) over one period, per axis.
inline IndexVector index(const TrigPolyMatrix& poly, int samplesPerAxis) {
  const int s = poly.lattice_dim();
  const int d = poly.coin_dim();
  const int need = std::max(4 * poly.max_degree() * d, 4);
  detail::require(samplesPerAxis >= need, "trigpoly.index",
                  "samplesPerAxis must be at least " + std::to_string(need));
  IndexVector out;
  for (int axis = 0; axis < s; ++axis) {
    int m = samplesPerAxis;
    bool ok = false;
    double total = 0.0;
    for (int refine = 0; refine <= 4 && !ok; ++refine, m *= 2) {
      ok = true;
      total = 0.0;
      std::vector<double> p(static_cast<std::size_t>(s), 0.0);
      cplx prev = poly.evaluate(p).determinant();
      if (std::abs(prev) < 1e-12) throw ValidationError("trigpoly.index", "zero determinant encountered");
      for (int k = 1; k <= m; ++k) {
        p[static_cast<std::size_t>(axis)] = 2.0 * pi * k / m;
        const cplx cur = poly.evaluate(p).determinant();
        if (std::abs(cur) < 1e-12) throw ValidationError("trigpoly.index", "zero determinant encountered");
        const double inc = std::arg(cur / prev);
        if (std::abs(inc) >= pi / 2) {
          ok = false;
          break;
        }
        total += inc;
        prev = cur;
      }
    }
    if (!ok) throw NumericalError("trigpoly.index", "determinant phase aliased after refinement");
    const double w = total / (2.0 * pi);
    const double r = std::round(w);
    if (std::abs(w - r) > 1e-6) {
      std::ostringstream os;
      os << "non-integer winding " << w << " on axis " << axis;
      throw NumericalError("trigpoly.index", os.str());
    }
    out.components.push_back(static_cast<int>(r));
    out.rawWinding.push_back(w);
  }
  return out;
}

inline IndexVector index(const TrigPolyMatrix& poly) {
  return index(poly, std::max(4 * poly.max_degree() * poly.coin_dim(), 16));
}

}  // namespace qwalk
