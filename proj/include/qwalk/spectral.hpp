#pragma once

// Band structure of unitary walks: dispersion branches, group velocities,
// ballistic limit densities and caustics.

#include "qwalk/models.hpp"

#include <Eigen/Eigenvalues>

#include <numeric>

namespace qwalk {

/// Eigen-decomposition of W(p) on the midpoint grid momentum_grid(n)^s with
/// branches continued by eigenvector overlap.
struct DispersionData {
  int latticeDim = 1;
  int coinDim = 1;
  int nGrid = 0;
  std::vector<double> axis;
  double degeneracyTol = 1e-8;
  std::vector<double> phase;       ///< [pt * d + k], continuous lift
  std::vector<CMatrix> vectors;    ///< columns phi_k
  std::vector<char> regular;       ///< min eigenphase gap > degeneracyTol
  std::vector<double> velocity;    ///< [(pt * d + k) * s + a], NaN where irregular
  bool hasVelocity = false;

  std::size_t points() const { return detail::ipow(static_cast<std::size_t>(nGrid), latticeDim); }
  std::vector<double> momentum(std::size_t pt) const { return grid_point(axis, pt, latticeDim); }
  double omega(std::size_t pt, int k) const { return phase[pt * static_cast<std::size_t>(coinDim) + static_cast<std::size_t>(k)]; }
  double v(std::size_t pt, int k, int a = 0) const {
    return velocity[(pt * static_cast<std::size_t>(coinDim) + static_cast<std::size_t>(k)) * static_cast<std::size_t>(latticeDim) +
                    static_cast<std::size_t>(a)];
  }
  CMatrix projector(std::size_t pt, int k) const {
    const CVector phi = vectors[pt].col(k);
    return phi * phi.adjoint();
  }
  double irregular_fraction() const {
    const auto bad = std::count(regular.begin(), regular.end(), char(0));
    return static_cast<double>(bad) / static_cast<double>(regular.size());
  }
};

namespace detail {

struct Eig {
  RVector phase;  // raw arg in (-pi, pi]
  CMatrix vecs;
};

// Schur form of a unitary (normal) matrix is diagonal with unitary Q.
inline Eig unitary_eig(const CMatrix& w) {
  Eigen::ComplexSchur<CMatrix> schur(w);
  if (schur.info() != Eigen::Success) throw NumericalError("spectral.eigensolver", "Schur decomposition failed");
  Eig e;
  const auto n = w.rows();
  e.phase.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) e.phase(k) = std::arg(schur.matrixT()(k, k));
  e.vecs = schur.matrixU();
  return e;
}

inline double min_gap(const RVector& ph) {
  double g = 2 * pi;
  for (Eigen::Index i = 0; i < ph.size(); ++i)
    for (Eigen::Index j = i + 1; j < ph.size(); ++j) g = std::min(g, std::abs(wrap_angle(ph(i) - ph(j))));
  return g;
}

/// Permutation perm with new branch k = column perm[k] of `cur`, maximizing
/// sum_k |<ref_k | cur_perm[k]>|^2.
inline std::vector<int> match_branches(const CMatrix& ref, const CMatrix& cur) {
  const int d = static_cast<int>(ref.cols());
  const RMatrix ov = (ref.adjoint() * cur).cwiseAbs2();
  std::vector<int> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), 0);
  if (d <= 5) {
    std::vector<int> best = perm, p = perm;
    double bestScore = -1.0;
    do {
      double sc = 0.0;
      for (int k = 0; k < d; ++k) sc += ov(k, p[static_cast<std::size_t>(k)]);
      if (sc > bestScore) {
        bestScore = sc;
        best = p;
      }
    } while (std::next_permutation(p.begin(), p.end()));
    return best;
  }
  std::vector<char> used(static_cast<std::size_t>(d), 0);
  std::vector<char> done(static_cast<std::size_t>(d), 0);
  for (int round = 0; round < d; ++round) {
    double b = -1.0;
    int bi = 0, bj = 0;
    for (int i = 0; i < d; ++i) {
      if (done[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < d; ++j)
        if (!used[static_cast<std::size_t>(j)] && ov(i, j) > b) b = ov(i, j), bi = i, bj = j;
    }
    perm[static_cast<std::size_t>(bi)] = bj;
    done[static_cast<std::size_t>(bi)] = 1;
    used[static_cast<std::size_t>(bj)] = 1;
  }
  return perm;
}

}  // namespace detail

/// Dispersion on an n^s midpoint grid. Branch labels follow a spanning tree
/// (parent = predecessor along the last axis with a nonzero index).
inline DispersionData dispersion(const TrigPolyMatrix& walk, int nGrid, double degeneracyTol = 1e-8) {
  detail::require(nGrid >= 2, "spectral.dispersion", "grid needs at least two points per axis");
  if (!check_unitary(walk, 1e-10).pass) throw ValidationError("spectral.dispersion", "walk is not unitary");
  DispersionData data;
  data.latticeDim = walk.lattice_dim();
  data.coinDim = walk.coin_dim();
  data.nGrid = nGrid;
  data.axis = momentum_grid(nGrid);
  data.degeneracyTol = degeneracyTol;
  const int s = data.latticeDim, d = data.coinDim;
  const std::size_t pts = data.points();
  std::vector<detail::Eig> eig(pts);
  data.regular.assign(pts, 1);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts); ++i) {
    const auto p = data.momentum(static_cast<std::size_t>(i));
    eig[static_cast<std::size_t>(i)] = detail::unitary_eig(walk.evaluate(p));
    data.regular[static_cast<std::size_t>(i)] = detail::min_gap(eig[static_cast<std::size_t>(i)].phase) > degeneracyTol;
  }
  data.phase.assign(pts * static_cast<std::size_t>(d), 0.0);
  data.vectors.resize(pts);
  // Sequential sweep: parents precede children in row-major order.
  for (std::size_t i = 0; i < pts; ++i) {
    auto& e = eig[i];
    auto idx = detail::unravel(i, nGrid, s);
    int axisUp = -1;
    for (int a = s - 1; a >= 0; --a)
      if (idx[static_cast<std::size_t>(a)] > 0) {
        axisUp = a;
        break;
      }
    if (axisUp < 0) {
      // Root: order by phase for a reproducible labelling.
      std::vector<int> ord(static_cast<std::size_t>(d));
      std::iota(ord.begin(), ord.end(), 0);
      std::sort(ord.begin(), ord.end(), [&](int a, int b) { return e.phase(a) < e.phase(b); });
      CMatrix v(d, d);
      for (int k = 0; k < d; ++k) {
        v.col(k) = e.vecs.col(ord[static_cast<std::size_t>(k)]);
        data.phase[static_cast<std::size_t>(k)] = e.phase(ord[static_cast<std::size_t>(k)]);
      }
      data.vectors[i] = v;
      continue;
    }
    idx[static_cast<std::size_t>(axisUp)] -= 1;
    const std::size_t par = detail::ravel(idx, nGrid);
    const auto perm = detail::match_branches(data.vectors[par], e.vecs);
    CMatrix v(d, d);
    for (int k = 0; k < d; ++k) {
      const int c = perm[static_cast<std::size_t>(k)];
      CVector col = e.vecs.col(c);
      const cplx ov = data.vectors[par].col(k).dot(col);
      if (std::abs(ov) > 0.0) col *= std::conj(ov) / std::abs(ov);
      v.col(k) = col;
      const double prev = data.phase[par * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
      data.phase[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] = prev + detail::wrap_angle(e.phase(c) - prev);
    }
    data.vectors[i] = v;
  }
  return data;
}

namespace detail {

// v_a = <phi| -i W^* d_a W |phi>; the operator is Hermitian for unitary W.
inline RVector hf_velocity(const CMatrix& w, const std::vector<CMatrix>& dw, const CVector& phi) {
  const int s = static_cast<int>(dw.size());
  RVector v(s);
  for (int a = 0; a < s; ++a) {
    const cplx val = -I * phi.dot(w.adjoint() * dw[static_cast<std::size_t>(a)] * phi);
    if (std::abs(val.imag()) > 1e-9)
      throw NumericalError("spectral.group_velocity", "velocity expectation has imaginary part " + std::to_string(val.imag()));
    v(a) = val.real();
  }
  return v;
}

}  // namespace detail

/// Fills Hellmann-Feynman velocities at regular grid points.
inline DispersionData group_velocity(DispersionData data, const TrigPolyMatrix& walk) {
  const int s = data.latticeDim, d = data.coinDim;
  std::vector<TrigPolyMatrix> dw;
  for (int a = 0; a < s; ++a) dw.push_back(derivative(walk, a));
  const std::size_t pts = data.points();
  data.velocity.assign(pts * static_cast<std::size_t>(d) * static_cast<std::size_t>(s), std::numeric_limits<double>::quiet_NaN());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pts); ++i) {
    const auto pt = static_cast<std::size_t>(i);
    if (!data.regular[pt]) continue;
    const auto p = data.momentum(pt);
    const CMatrix w = walk.evaluate(p);
    std::vector<CMatrix> dwp;
    for (const auto& x : dw) dwp.push_back(x.evaluate(p));
    for (int k = 0; k < d; ++k) {
      const RVector v = detail::hf_velocity(w, dwp, data.vectors[pt].col(k));
      for (int a = 0; a < s; ++a)
        data.velocity[(pt * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)) * static_cast<std::size_t>(s) + static_cast<std::size_t>(a)] = v(a);
    }
  }
  data.hasVelocity = true;
  return data;
}

/// Eigenphases, eigenvectors and velocities at an arbitrary momentum.
struct PointSpectrum {
  RVector phase;
  CMatrix vectors;
  RMatrix velocity;  ///< d x s
  bool regular = true;
};

inline PointSpectrum spectrum_at(const TrigPolyMatrix& walk, std::span<const double> p, double degeneracyTol = 1e-8) {
  const int s = walk.lattice_dim(), d = walk.coin_dim();
  const CMatrix w = walk.evaluate(p);
  auto e = detail::unitary_eig(w);
  std::vector<CMatrix> dwp;
  for (int a = 0; a < s; ++a) dwp.push_back(derivative(walk, a).evaluate(p));
  PointSpectrum ps;
  ps.phase = e.phase;
  ps.vectors = e.vecs;
  ps.regular = detail::min_gap(e.phase) > degeneracyTol;
  ps.velocity.resize(d, s);
  for (int k = 0; k < d; ++k) ps.velocity.row(k) = detail::hf_velocity(w, dwp, e.vecs.col(k)).transpose();
  return ps;
}

/// Atoms (velocity, weight) of the pushforward of
/// sum_k tr(rho(p) P_k(p)) dp/(2 pi)^s under p -> v_k(p), on the grid.
struct VelocityMeasure {
  int latticeDim = 1;
  std::vector<RVector> velocity;
  std::vector<double> weight;
  double excludedMass = 0.0;  ///< mass at irregular points
};

inline VelocityMeasure velocity_measure(const DispersionData& data, const InitialState& rho) {
  detail::require(data.hasVelocity, "spectral.ballistic_density", "velocities not computed");
  detail::require(rho.coin_dim() == data.coinDim && rho.lattice_dim() == data.latticeDim, "spectral.ballistic_density",
                  "initial state does not match walk dimensions");
  const int s = data.latticeDim, d = data.coinDim;
  const std::size_t pts = data.points();
  VelocityMeasure vm;
  vm.latticeDim = s;
  const double norm = 1.0 / static_cast<double>(pts);
  for (std::size_t pt = 0; pt < pts; ++pt) {
    const auto p = data.momentum(pt);
    const CMatrix r = rho.density(p);
    for (int k = 0; k < d; ++k) {
      const CVector phi = data.vectors[pt].col(k);
      const double w = phi.dot(r * phi).real() * norm;
      if (!data.regular[pt]) {
        vm.excludedMass += w;
        continue;
      }
      RVector v(s);
      for (int a = 0; a < s; ++a) v(a) = data.v(pt, k, a);
      vm.velocity.push_back(v);
      vm.weight.push_back(w);
    }
  }
  return vm;
}

/// Histogram density on [lo, hi]^s with `bins` per axis (row-major).
struct Histogram {
  int latticeDim = 1;
  int bins = 0;
  std::vector<double> lo, hi;
  std::vector<double> density;
  double mass = 0.0;
  double excludedMass = 0.0;

  double width(int a) const { return (hi[static_cast<std::size_t>(a)] - lo[static_cast<std::size_t>(a)]) / bins; }
  double center(int a, int j) const { return lo[static_cast<std::size_t>(a)] + (j + 0.5) * width(a); }
};

inline Histogram histogram(const VelocityMeasure& vm, int bins, std::optional<std::pair<double, double>> range = {}) {
  detail::require(bins >= 1, "spectral.ballistic_density", "need at least one bin");
  const int s = vm.latticeDim;
  Histogram h;
  h.latticeDim = s;
  h.bins = bins;
  h.excludedMass = vm.excludedMass;
  h.lo.assign(static_cast<std::size_t>(s), 0.0);
  h.hi.assign(static_cast<std::size_t>(s), 0.0);
  for (int a = 0; a < s; ++a) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& v : vm.velocity) {
      lo = std::min(lo, v(a));
      hi = std::max(hi, v(a));
    }
    if (range) {
      lo = range->first;
      hi = range->second;
    } else if (!(hi - lo > 1e-9)) {
      lo -= 0.5;
      hi += 0.5;
    } else {
      const double pad = 1e-9 * (hi - lo);
      lo -= pad;
      hi += pad;
    }
    h.lo[static_cast<std::size_t>(a)] = lo;
    h.hi[static_cast<std::size_t>(a)] = hi;
  }
  h.density.assign(detail::ipow(static_cast<std::size_t>(bins), s), 0.0);
  double vol = 1.0;
  for (int a = 0; a < s; ++a) vol *= h.width(a);
  std::vector<int> idx(static_cast<std::size_t>(s));
  for (std::size_t i = 0; i < vm.velocity.size(); ++i) {
    bool inside = true;
    for (int a = 0; a < s; ++a) {
      const int j = static_cast<int>(std::floor((vm.velocity[i](a) - h.lo[static_cast<std::size_t>(a)]) / h.width(a)));
      if (j < 0 || j >= bins) inside = false;
      idx[static_cast<std::size_t>(a)] = std::clamp(j, 0, bins - 1);
    }
    if (!inside) continue;
    h.density[detail::ravel(idx, bins)] += vm.weight[i] / vol;
    h.mass += vm.weight[i];
  }
  return h;
}

inline Histogram ballistic_density_unitary(const DispersionData& data, const InitialState& rho, int bins,
                                           std::optional<std::pair<double, double>> range = {}) {
  return histogram(velocity_measure(data, rho), bins, range);
}

namespace detail {

// Branch continued from a reference eigenvector by maximal overlap.
struct BranchPoint {
  double phase;
  double velocity;
  CVector vec;
};

inline BranchPoint follow_branch_1d(const TrigPolyMatrix& walk, const TrigPolyMatrix& dwalk, double p, const CVector& ref) {
  const CMatrix w = walk.evaluate(p);
  const auto e = unitary_eig(w);
  Eigen::Index best = 0;
  (e.vecs.adjoint() * ref).cwiseAbs2().maxCoeff(&best);
  BranchPoint bp;
  bp.phase = e.phase(best);
  bp.vec = e.vecs.col(best);
  bp.velocity = hf_velocity(w, {dwalk.evaluate(p)}, bp.vec)(0);
  return bp;
}

inline double branch_velocity_slope(const TrigPolyMatrix& walk, const TrigPolyMatrix& dwalk, double p, const CVector& ref,
                                    double h = 1e-5) {
  const double vp = follow_branch_1d(walk, dwalk, p + h, ref).velocity;
  const double vm = follow_branch_1d(walk, dwalk, p - h, ref).velocity;
  return (vp - vm) / (2.0 * h);
}

}  // namespace detail

struct Caustic {
  std::vector<double> p;
  int branch = 0;
  std::vector<double> velocity;
};

struct CausticOptions {
  double flatTol = 1e-10;
  double bisectionTol = 1e-12;
};

/// 1D: refined zeros of v'_k. sD: cell centers where det Hess omega_k
/// changes sign between grid neighbours.
inline std::vector<Caustic> caustics(const DispersionData& data, const TrigPolyMatrix& walk, const CausticOptions& opt = {}) {
  detail::require(data.hasVelocity, "spectral.caustics", "velocities not computed");
  const int s = data.latticeDim, d = data.coinDim, n = data.nGrid;
  const double h = 2.0 * pi / n;
  std::vector<Caustic> out;
  if (s == 1) {
    const auto dwalk = derivative(walk, 0);
    for (int k = 0; k < d; ++k) {
      std::vector<double> slope(static_cast<std::size_t>(n), 0.0);
      double maxAbs = 0.0;
      bool ok = true;
      for (int j = 0; j < n; ++j) {
        const std::size_t a = static_cast<std::size_t>((j + n - 1) % n), b = static_cast<std::size_t>((j + 1) % n);
        if (!data.regular[a] || !data.regular[b]) {
          ok = false;
          continue;
        }
        slope[static_cast<std::size_t>(j)] = (data.v(b, k) - data.v(a, k)) / (2 * h);
        maxAbs = std::max(maxAbs, std::abs(slope[static_cast<std::size_t>(j)]));
      }
      (void)ok;
      if (maxAbs < opt.flatTol) continue;
      for (int j = 0; j < n; ++j) {
        const std::size_t a = static_cast<std::size_t>(j), b = static_cast<std::size_t>((j + 1) % n);
        if (!data.regular[a] || !data.regular[b]) continue;
        const double sa = slope[a], sb = slope[b];
        if (!((sa > 0.0 && sb <= 0.0) || (sa <= 0.0 && sb > 0.0))) continue;
        double lo = data.axis[a], hi = data.axis[a] + h;
        CVector ref = data.vectors[a].col(k);
        double flo = detail::branch_velocity_slope(walk, dwalk, lo, ref);
        while (hi - lo > opt.bisectionTol) {
          const double mid = 0.5 * (lo + hi);
          const auto bp = detail::follow_branch_1d(walk, dwalk, mid, ref);
          const double fm = detail::branch_velocity_slope(walk, dwalk, mid, bp.vec);
          if ((flo > 0.0) == (fm > 0.0)) {
            lo = mid;
            flo = fm;
            ref = bp.vec;
          } else {
            hi = mid;
          }
        }
        const double p = detail::wrap_angle(0.5 * (lo + hi));
        const auto bp = detail::follow_branch_1d(walk, dwalk, p, ref);
        out.push_back({{p}, k, {bp.velocity}});
      }
    }
    return out;
  }
  // Hessian of omega_k from central differences of the velocity field.
  const std::size_t pts = data.points();
  std::vector<double> det(pts * static_cast<std::size_t>(d), std::numeric_limits<double>::quiet_NaN());
  auto neighbour = [&](std::size_t pt, int axis, int delta) {
    auto idx = detail::unravel(pt, n, s);
    idx[static_cast<std::size_t>(axis)] = (idx[static_cast<std::size_t>(axis)] + delta + n) % n;
    return detail::ravel(idx, n);
  };
  for (std::size_t pt = 0; pt < pts; ++pt) {
    for (int k = 0; k < d; ++k) {
      RMatrix hess(s, s);
      bool ok = data.regular[pt] != 0;
      for (int b = 0; b < s && ok; ++b) {
        const auto up = neighbour(pt, b, 1), dn = neighbour(pt, b, -1);
        if (!data.regular[up] || !data.regular[dn]) {
          ok = false;
          break;
        }
        for (int a = 0; a < s; ++a) hess(a, b) = (data.v(up, k, a) - data.v(dn, k, a)) / (2 * h);
      }
      if (!ok) continue;
      hess = 0.5 * (hess + hess.transpose());
      det[pt * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] = hess.determinant();
    }
  }
  for (std::size_t pt = 0; pt < pts; ++pt)
    for (int k = 0; k < d; ++k) {
      const double a = det[pt * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
      if (std::isnan(a)) continue;
      for (int ax = 0; ax < s; ++ax) {
        const auto nb = neighbour(pt, ax, 1);
        const double b = det[nb * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
        if (std::isnan(b) || (a > 0.0) == (b > 0.0)) continue;
        auto p = data.momentum(pt);
        p[static_cast<std::size_t>(ax)] += 0.5 * h;
        std::vector<double> v(static_cast<std::size_t>(s));
        for (int c = 0; c < s; ++c) v[static_cast<std::size_t>(c)] = 0.5 * (data.v(pt, k, c) + data.v(nb, k, c));
        out.push_back({p, k, v});
      }
    }
  return out;
}

struct JacobianOptions {
  double causticTol = 1e-6;
  double bisectionTol = 1e-13;
  /// Caustic velocities; computed from the dispersion when empty.
  std::vector<double> causticVelocities;
};

/// Ballistic density at u via sum over preimages of |v'(p)|^{-1} tr(rho P_k) / (2 pi).
inline double jacobian_density_1d(const DispersionData& data, const TrigPolyMatrix& walk, const InitialState& rho, double u,
                                  const JacobianOptions& opt = {}) {
  detail::require(data.latticeDim == 1, "spectral.jacobian_density_1d", "one-dimensional walks only");
  detail::require(data.hasVelocity, "spectral.jacobian_density_1d", "velocities not computed");
  const int d = data.coinDim, n = data.nGrid;
  std::vector<double> cv = opt.causticVelocities;
  if (cv.empty())
    for (const auto& c : caustics(data, walk)) cv.push_back(c.velocity[0]);
  for (double c : cv)
    if (std::abs(u - c) < opt.causticTol)
      throw ValidationError("spectral.jacobian_density_1d", "query velocity lies on a caustic; density diverges");
  const auto dwalk = derivative(walk, 0);
  double total = 0.0;
  for (int k = 0; k < d; ++k) {
    for (int j = 0; j < n; ++j) {
      const std::size_t a = static_cast<std::size_t>(j), b = static_cast<std::size_t>((j + 1) % n);
      if (!data.regular[a] || !data.regular[b]) continue;
      const double fa = data.v(a, k) - u, fb = data.v(b, k) - u;
      if (fa == 0.0 && fb == 0.0) continue;
      if (!((fa <= 0.0 && fb > 0.0) || (fa > 0.0 && fb <= 0.0))) continue;
      double lo = data.axis[a], hi = data.axis[a] + 2.0 * pi / n;
      CVector ref = data.vectors[a].col(k);
      double flo = fa;
      while (hi - lo > opt.bisectionTol) {
        const double mid = 0.5 * (lo + hi);
        const auto bp = detail::follow_branch_1d(walk, dwalk, mid, ref);
        const double fm = bp.velocity - u;
        if ((flo <= 0.0) == (fm <= 0.0)) {
          lo = mid;
          flo = fm;
          ref = bp.vec;
        } else {
          hi = mid;
        }
      }
      const double p = 0.5 * (lo + hi);
      const auto bp = detail::follow_branch_1d(walk, dwalk, p, ref);
      const double slope = detail::branch_velocity_slope(walk, dwalk, p, bp.vec);
      if (std::abs(slope) < opt.causticTol)
        throw ValidationError("spectral.jacobian_density_1d", "query velocity lies on a caustic; density diverges");
      const double w = bp.vec.dot(rho.density(p) * bp.vec).real();
      total += w / std::abs(slope) / (2.0 * pi);
    }
  }
  return total;
}

/// 1/(pi (1-u) sqrt(1-2u^2)) + (1/t) u / (pi (1-2u^2)^{3/2}): Hadamard walk
/// from (1,0) at the origin, to first order in 1/t.
inline double hadamard_leading(double u) {
  detail::require(2.0 * u * u < 1.0, "spectral.hadamard_correction", "u outside the velocity range");
  return 1.0 / (pi * (1.0 - u) * std::sqrt(1.0 - 2.0 * u * u));
}

inline double hadamard_correction(int t, double u, double margin = 1e-3) {
  detail::require(t > 0, "spectral.hadamard_correction", "t must be positive");
  detail::require(std::abs(u) < 1.0 / std::sqrt(2.0) - margin, "spectral.hadamard_correction",
                  "u too close to or beyond the caustics");
  const double q = 1.0 - 2.0 * u * u;
  return hadamard_leading(u) + u / (pi * q * std::sqrt(q)) / t;
}

/// mean_p -i tr(W(p)^* d_a W(p)) on an n^s grid; basis free, so it also
/// covers walks with degenerate bands.
inline RVector mean_velocity_trace(const TrigPolyMatrix& walk, int nGrid) {
  const int s = walk.lattice_dim();
  const auto axis = momentum_grid(nGrid);
  std::vector<TrigPolyMatrix> dw;
  for (int a = 0; a < s; ++a) dw.push_back(derivative(walk, a));
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(nGrid), s);
  RVector out = RVector::Zero(s);
  for (std::size_t i = 0; i < pts; ++i) {
    const auto p = grid_point(axis, i, s);
    const CMatrix wa = walk.evaluate(p).adjoint();
    for (int a = 0; a < s; ++a) out(a) += (-I * (wa * dw[static_cast<std::size_t>(a)].evaluate(p)).trace()).real();
  }
  return out / static_cast<double>(pts);
}

/// mean_p tr V_a(p) over regular points; equals the index component for unitary walks.
inline RVector mean_velocity_trace(const DispersionData& data) {
  detail::require(data.hasVelocity, "spectral.mean_velocity_trace", "velocities not computed");
  const int s = data.latticeDim, d = data.coinDim;
  RVector out = RVector::Zero(s);
  std::size_t cnt = 0;
  for (std::size_t pt = 0; pt < data.points(); ++pt) {
    if (!data.regular[pt]) continue;
    ++cnt;
    for (int k = 0; k < d; ++k)
      for (int a = 0; a < s; ++a) out(a) += data.v(pt, k, a);
  }
  return out / static_cast<double>(cnt);
}

}  // namespace qwalk
