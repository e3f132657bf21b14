#pragma once

// Smoothed comparisons between sampled/exact position laws and asymptotic
// densities.

#include "qwalk/simulate.hpp"
#include "qwalk/spectral.hpp"

namespace qwalk {

/// Weighted point masses on the real line.
struct Atoms {
  std::vector<double> x;
  std::vector<double> w;

  double mass() const { return std::accumulate(w.begin(), w.end(), 0.0); }
};

/// Atoms x/t (ballistic) or (x - v t)/sqrt(t) (diffusive) of a 1D distribution.
inline Atoms scaled_atoms(const PositionDistribution& dist, Scaling scaling, double drift = 0.0) {
  detail::require(dist.latticeDim == 1, "compare.atoms", "one-dimensional distributions only");
  Atoms a;
  const double t = dist.time;
  for (const auto& [x, p] : dist.probs) {
    double u = x[0];
    if (scaling == Scaling::Ballistic) {
      detail::require(t > 0, "compare.atoms", "ballistic scaling needs t > 0");
      u /= t;
    } else if (scaling == Scaling::Diffusive) {
      detail::require(t > 0, "compare.atoms", "diffusive scaling needs t > 0");
      u = (u - drift * t) / std::sqrt(t);
    }
    a.x.push_back(u);
    a.w.push_back(p);
  }
  return a;
}

/// Velocity atoms of the ballistic limit (1D).
inline Atoms velocity_atoms(const VelocityMeasure& vm) {
  detail::require(vm.latticeDim == 1, "compare.atoms", "one-dimensional measures only");
  Atoms a;
  for (std::size_t i = 0; i < vm.velocity.size(); ++i) {
    a.x.push_back(vm.velocity[i](0));
    a.w.push_back(vm.weight[i]);
  }
  return a;
}

inline double gaussian(double z, double sigma) {
  return std::exp(-0.5 * z * z / (sigma * sigma)) / (sigma * std::sqrt(2.0 * pi));
}

/// Gaussian kernel density estimate at z. Atoms further than 9 sigma are skipped.
inline double kde(const Atoms& a, double sigma, double z) {
  double f = 0.0;
  for (std::size_t i = 0; i < a.x.size(); ++i) {
    const double d = z - a.x[i];
    if (std::abs(d) < 9.0 * sigma) f += a.w[i] * gaussian(d, sigma);
  }
  return f;
}

struct Interval {
  double lo, hi;
};

struct L1Options {
  double lo = -1.0;
  double hi = 1.0;
  int points = 4000;
  std::vector<Interval> exclude;
};

/// Midpoint-rule L1 distance between two callables on [lo, hi] minus the excluded set.
template <class F, class G>
double l1_distance(F&& f, G&& g, const L1Options& opt) {
  detail::require(opt.hi > opt.lo && opt.points > 0, "compare.l1", "empty integration range");
  const double h = (opt.hi - opt.lo) / opt.points;
  double acc = 0.0;
  for (int k = 0; k < opt.points; ++k) {
    const double z = opt.lo + (k + 0.5) * h;
    bool skip = false;
    for (const auto& iv : opt.exclude)
      if (z > iv.lo && z < iv.hi) skip = true;
    if (!skip) acc += std::abs(f(z) - g(z)) * h;
  }
  return acc;
}

/// L1 distance between two Gaussian-smoothed atom sets.
inline double smoothed_l1(const Atoms& a, const Atoms& b, double sigma, const L1Options& opt) {
  return l1_distance([&](double z) { return kde(a, sigma, z); }, [&](double z) { return kde(b, sigma, z); }, opt);
}

/// Neighbourhoods of radius r around the given velocities.
inline std::vector<Interval> neighbourhoods(const std::vector<double>& centres, double r) {
  std::vector<Interval> out;
  for (double c : centres) out.push_back({c - r, c + r});
  return out;
}

/// Gaussian smoothing of a density on (a, b) with inverse-square-root edges,
/// using u = mid + half sin(theta) so the quadrature stays regular.
template <class F>
double smooth_edge_density(F&& weightTimesSqrt, double a, double b, double sigma, double z, int nodes = 4000) {
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double acc = 0.0;
  for (int j = 0; j < nodes; ++j) {
    const double th = -0.5 * pi + (j + 0.5) * pi / nodes;
    const double u = mid + half * std::sin(th);
    acc += weightTimesSqrt(u, th) * gaussian(z - u, sigma) * (pi / nodes);
  }
  return acc;
}

/// Gaussian smoothing of the Hadamard limit density, optionally with the
/// 1/t term. The 1/t term is (1/2 pi) d/du (1-2u^2)^{-1/2}, which is paired
/// with the kernel by parts so the integral converges up to the caustics.
inline double hadamard_smoothed(int t, double z, double sigma, bool corrected, int nodes = 4000) {
  const double um = 1.0 / std::sqrt(2.0);
  // du / sqrt(1-2u^2) = dtheta / sqrt(2) under u = um sin(theta)
  const double lead = smooth_edge_density(
      [](double u, double) { return 1.0 / (pi * (1.0 - u) * std::sqrt(2.0)); }, -um, um, sigma, z, nodes);
  if (!corrected) return lead;
  double corr = 0.0;
  for (int j = 0; j < nodes; ++j) {
    const double th = -0.5 * pi + (j + 0.5) * pi / nodes;
    const double u = um * std::sin(th);
    const double d = z - u;
    // -d/du g(z-u) = g'(z-u) = -(z-u)/sigma^2 g(z-u)
    corr += (1.0 / (2.0 * pi * std::sqrt(2.0))) * (-d / (sigma * sigma)) * gaussian(d, sigma) * (pi / nodes);
  }
  return lead + corr / t;
}

}  // namespace qwalk
