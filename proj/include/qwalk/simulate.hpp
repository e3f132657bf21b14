#pragma once

// Finite-time evolution: exact unitary propagation by FFT, Monte Carlo over
// control trajectories, and exact density-matrix evolution of scalar walks.

#include "qwalk/models.hpp"

#include <fftw3.h>

#include <mutex>
#include <random>

namespace qwalk {

enum class Scaling { None, Ballistic, Diffusive };

inline const char* to_string(Scaling s) {
  switch (s) {
    case Scaling::None: return "none";
    case Scaling::Ballistic: return "ballistic";
    case Scaling::Diffusive: return "diffusive";
  }
  return "none";
}

/// Probability of each lattice site at time t. stderr is filled by Monte
/// Carlo runs only.
struct PositionDistribution {
  int time = 0;
  int latticeDim = 1;
  std::map<Offset, double> probs;
  std::map<Offset, double> stderr;

  double total() const {
    double s = 0.0;
    for (const auto& [x, p] : probs) s += p;
    return s;
  }
};

struct Moments {
  RVector mean;
  RMatrix second;      ///< E[Y Y^T]
  RMatrix covariance;  ///< E[Y Y^T] - E[Y] E[Y]^T
};

/// Mean (order 1) or mean and second moments (order 2) of Y = Q, Q/t or Q/sqrt(t).
inline Moments moments(const PositionDistribution& dist, int order, Scaling scaling = Scaling::None) {
  detail::require(order == 1 || order == 2, "simulate.moments", "order must be 1 or 2");
  detail::require(!dist.probs.empty(), "simulate.moments", "empty distribution");
  double scale = 1.0;
  if (scaling != Scaling::None) {
    detail::require(dist.time > 0, "simulate.moments", "scaled moments need t > 0");
    scale = scaling == Scaling::Ballistic ? 1.0 / dist.time : 1.0 / std::sqrt(static_cast<double>(dist.time));
  }
  const int s = dist.latticeDim;
  Moments m;
  m.mean = RVector::Zero(s);
  m.second = RMatrix::Zero(s, s);
  RVector y(s);
  for (const auto& [x, p] : dist.probs) {
    for (int a = 0; a < s; ++a) y(a) = x[static_cast<std::size_t>(a)] * scale;
    m.mean += p * y;
    if (order == 2) m.second += p * y * y.transpose();
  }
  if (order == 2) m.covariance = m.second - m.mean * m.mean.transpose();
  return m;
}

namespace detail {

// Amplitudes below this squared modulus in a finished FFT are round-off.
inline constexpr double kFftFloor = 1e-28;

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// Smallest n' >= n whose prime factors are all in {2, 3, 5, 7}.
inline int fft_friendly(int n) {
  for (int m = std::max(n, 1);; ++m) {
    int r = m;
    for (int f : {2, 3, 5, 7})
      while (r % f == 0) r /= f;
    if (r == 1) return m;
  }
}

inline CMatrix matrix_power(CMatrix base, int e) {
  CMatrix r = CMatrix::Identity(base.rows(), base.cols());
  while (e > 0) {
    if (e & 1) r = r * base;
    e >>= 1;
    if (e) base = base * base;
  }
  return r;
}

}  // namespace detail

struct EvolveOptions {
  std::size_t memoryCapBytes = std::size_t{1} << 30;
};

/// Exact psi_t = W^t psi_0 via psi^(p) -> W(p)^t psi^(p) on a periodic grid
/// large enough that the light cone never wraps.
inline PositionDistribution evolve_unitary(const TrigPolyMatrix& walk, const InitialState& psi0, int t,
                                           const EvolveOptions& opt = {}) {
  detail::require(t >= 0, "simulate.evolve_unitary", "t must be nonnegative");
  detail::require(psi0.is_pure(), "simulate.evolve_unitary", "initial state must be pure");
  detail::require(psi0.lattice_dim() == walk.lattice_dim() && psi0.coin_dim() == walk.coin_dim(),
                  "simulate.evolve_unitary", "initial state does not match walk dimensions");
  const auto rep = check_unitary(walk, 1e-10);
  if (!rep.pass) throw ValidationError("simulate.evolve_unitary", "walk is not unitary");

  const int s = walk.lattice_dim(), d = walk.coin_dim();
  const long long reach = static_cast<long long>(t) * walk.max_degree() + psi0.radius();
  const int n = detail::fft_friendly(static_cast<int>(2 * reach + 1));
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(n), s);
  const double bytes = static_cast<double>(pts) * d * sizeof(fftw_complex);
  detail::require(bytes <= static_cast<double>(opt.memoryCapBytes), "simulate.memory_cap",
                  "FFT grid exceeds memory cap");

  auto* buf = static_cast<cplx*>(fftw_malloc(sizeof(fftw_complex) * pts * static_cast<std::size_t>(d)));
  std::fill(buf, buf + pts * static_cast<std::size_t>(d), cplx(0.0));
  std::vector<int> dims(static_cast<std::size_t>(s), n);
  fftw_plan fwd, bwd;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    auto* raw = reinterpret_cast<fftw_complex*>(buf);
    bwd = fftw_plan_many_dft(s, dims.data(), d, raw, nullptr, d, 1, raw, nullptr, d, 1, FFTW_BACKWARD, FFTW_ESTIMATE);
    fwd = fftw_plan_many_dft(s, dims.data(), d, raw, nullptr, d, 1, raw, nullptr, d, 1, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  auto wrap = [n](int x) { return ((x % n) + n) % n; };
  std::vector<int> idx(static_cast<std::size_t>(s));
  for (const auto& [x, v] : psi0.amplitudes()) {
    for (int a = 0; a < s; ++a) idx[static_cast<std::size_t>(a)] = wrap(x[static_cast<std::size_t>(a)]);
    const std::size_t lin = detail::ravel(idx, n);
    for (int k = 0; k < d; ++k) buf[lin * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)] = v(k);
  }
  // Backward DFT: sum_x e^{+2 pi i j x / n} psi(x) = psi^(p_j), p_j = 2 pi j / n.
  fftw_execute(bwd);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t lin = 0; lin < static_cast<std::ptrdiff_t>(pts); ++lin) {
    const auto j = detail::unravel(static_cast<std::size_t>(lin), n, s);
    std::vector<double> p(static_cast<std::size_t>(s));
    for (int a = 0; a < s; ++a) p[static_cast<std::size_t>(a)] = 2.0 * pi * j[static_cast<std::size_t>(a)] / n;
    const CMatrix wt = detail::matrix_power(walk.evaluate(p), t);
    Eigen::Map<CVector> v(buf + static_cast<std::size_t>(lin) * static_cast<std::size_t>(d), d);
    const CVector out = wt * v;
    v = out;
  }
  fftw_execute(fwd);
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(bwd);
  }

  PositionDistribution dist;
  dist.time = t;
  dist.latticeDim = s;
  const double norm = 1.0 / (static_cast<double>(pts) * static_cast<double>(pts));
  for (std::size_t lin = 0; lin < pts; ++lin) {
    double pr = 0.0;
    for (int k = 0; k < d; ++k) pr += std::norm(buf[lin * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)]);
    pr *= norm;
    if (pr < detail::kFftFloor) continue;
    const auto j = detail::unravel(lin, n, s);
    Offset x(static_cast<std::size_t>(s));
    bool inside = true;
    for (int a = 0; a < s; ++a) {
      int v = j[static_cast<std::size_t>(a)];
      if (v > n / 2) v -= n;
      x[static_cast<std::size_t>(a)] = v;
      if (std::abs(v) > reach) inside = false;
    }
    if (inside) dist.probs[x] = pr;
  }
  fftw_free(buf);
  return dist;
}

/// Per-checkpoint Monte Carlo moments of Q. Each trajectory contributes its
/// quantum expectation; means and standard errors are over trajectories.
struct MomentSeries {
  std::vector<int> times;
  std::vector<RVector> meanQ;        ///< E[Q]
  std::vector<RMatrix> secondQ;      ///< E[Q Q^T]
  std::vector<RMatrix> secondStderr; ///< stderr of E[Q Q^T] entries
  std::vector<RVector> meanStderr;

  std::vector<RVector> varianceStderr;

  /// Var Q_a = E[Q_a^2] - E[Q_a]^2 at checkpoint i with its delta-method stderr.
  std::pair<double, double> variance(std::size_t i, int axis = 0) const {
    const double m = meanQ[i](axis);
    return {secondQ[i](axis, axis) - m * m, varianceStderr[i](axis)};
  }
};

struct MarkovRun {
  PositionDistribution distribution;
  MomentSeries series;
  long long trajectories = 0;
};

struct MarkovOptions {
  std::vector<int> checkpoints;  ///< times at which moments are recorded (t is always added)
  int blockSize = 64;
  /// Edge amplitudes with |psi|^2 below this are dropped (1D only).
  double trimFloor = 1e-30;
};

namespace detail {

// Sparse real/imag representation of one coefficient C_y(k, l).
struct StepTerm {
  int shift;  // linear offset
  int k, l;
  double re, im;
  bool realOnly;
};

struct CompiledWalk {
  std::vector<StepTerm> terms;
  std::vector<Offset> offsets;
};

inline CompiledWalk compile_walk(const TrigPolyMatrix& w, int side) {
  CompiledWalk cw;
  const int s = w.lattice_dim();
  for (const auto& [x, c] : w.coefficients()) {
    int lin = 0;
    for (int a = 0; a < s; ++a) lin = lin * side + x[static_cast<std::size_t>(a)];
    for (int k = 0; k < c.rows(); ++k)
      for (int l = 0; l < c.cols(); ++l) {
        const cplx v = c(k, l);
        if (std::abs(v) < 1e-15) continue;
        cw.terms.push_back({lin, k, l, v.real(), v.imag(), std::abs(v.imag()) < 1e-300});
      }
    cw.offsets.push_back(x);
  }
  return cw;
}

// Wave function on a box of side L = 2R+1 per axis, stored per coin
// component as separate real and imaginary arrays.
struct BoxState {
  int s = 1, d = 1, R = 0, L = 1;
  std::vector<std::vector<double>> re, im;
  // Active window along axis 0 in 1D (inclusive, box coordinates).
  int lo = 0, hi = 0;

  void init(int s_, int d_, int R_, const InitialState& psi0) {
    s = s_;
    d = d_;
    R = R_;
    L = 2 * R + 1;
    const std::size_t n = ipow(static_cast<std::size_t>(L), s);
    re.assign(static_cast<std::size_t>(d), std::vector<double>(n, 0.0));
    im = re;
    lo = L;
    hi = -1;
    for (const auto& [x, v] : psi0.amplitudes()) {
      std::size_t lin = 0;
      for (int a = 0; a < s; ++a) lin = lin * static_cast<std::size_t>(L) + static_cast<std::size_t>(x[static_cast<std::size_t>(a)] + R);
      for (int k = 0; k < d; ++k) {
        re[static_cast<std::size_t>(k)][lin] = v(k).real();
        im[static_cast<std::size_t>(k)][lin] = v(k).imag();
      }
      lo = std::min(lo, x[0] + R);
      hi = std::max(hi, x[0] + R);
    }
  }
};

// out = sum_y C_y in(. - y) on the 1D window [lo - ymax, hi - ymin]... with
// y the coefficient offsets: psi'(z) = sum_y C_y psi(z - y).
inline void step_1d(const CompiledWalk& cw, int maxdeg, BoxState& st, BoxState& out, double trimFloor) {
  const int nlo = std::max(0, st.lo - maxdeg), nhi = std::min(st.L - 1, st.hi + maxdeg);
  for (int k = 0; k < st.d; ++k) {
    std::fill(out.re[static_cast<std::size_t>(k)].begin() + nlo, out.re[static_cast<std::size_t>(k)].begin() + nhi + 1, 0.0);
    std::fill(out.im[static_cast<std::size_t>(k)].begin() + nlo, out.im[static_cast<std::size_t>(k)].begin() + nhi + 1, 0.0);
  }
  for (const auto& tm : cw.terms) {
    // z = src + shift with src in [lo, hi].
    const int zlo = st.lo + tm.shift, zhi = st.hi + tm.shift;
    double* __restrict orr = out.re[static_cast<std::size_t>(tm.k)].data();
    double* __restrict oii = out.im[static_cast<std::size_t>(tm.k)].data();
    const double* __restrict irr = st.re[static_cast<std::size_t>(tm.l)].data() - tm.shift;
    const double* __restrict iii = st.im[static_cast<std::size_t>(tm.l)].data() - tm.shift;
    if (tm.realOnly) {
      const double a = tm.re;
      for (int z = zlo; z <= zhi; ++z) {
        orr[z] += a * irr[z];
        oii[z] += a * iii[z];
      }
    } else {
      const double a = tm.re, b = tm.im;
      for (int z = zlo; z <= zhi; ++z) {
        orr[z] += a * irr[z] - b * iii[z];
        oii[z] += a * iii[z] + b * irr[z];
      }
    }
  }
  out.lo = nlo;
  out.hi = nhi;
  auto weight = [&](int z) {
    double w = 0.0;
    for (int k = 0; k < out.d; ++k) {
      const double a = out.re[static_cast<std::size_t>(k)][static_cast<std::size_t>(z)];
      const double b = out.im[static_cast<std::size_t>(k)][static_cast<std::size_t>(z)];
      w += a * a + b * b;
    }
    return w;
  };
  auto zero = [&](int z) {
    for (int k = 0; k < out.d; ++k) {
      out.re[static_cast<std::size_t>(k)][static_cast<std::size_t>(z)] = 0.0;
      out.im[static_cast<std::size_t>(k)][static_cast<std::size_t>(z)] = 0.0;
    }
  };
  if (trimFloor > 0.0) {
    while (out.lo < out.hi && weight(out.lo) < trimFloor) zero(out.lo++);
    while (out.hi > out.lo && weight(out.hi) < trimFloor) zero(out.hi--);
  }
}

// General s: full box sweep.
inline void step_box(const CompiledWalk& cw, const BoxState& st, BoxState& out) {
  const std::size_t n = st.re.front().size();
  for (int k = 0; k < st.d; ++k) {
    std::fill(out.re[static_cast<std::size_t>(k)].begin(), out.re[static_cast<std::size_t>(k)].end(), 0.0);
    std::fill(out.im[static_cast<std::size_t>(k)].begin(), out.im[static_cast<std::size_t>(k)].end(), 0.0);
  }
  const int s = st.s, L = st.L;
  std::vector<int> idx(static_cast<std::size_t>(s));
  for (std::size_t src = 0; src < n; ++src) {
    bool any = false;
    for (int l = 0; l < st.d && !any; ++l)
      any = st.re[static_cast<std::size_t>(l)][src] != 0.0 || st.im[static_cast<std::size_t>(l)][src] != 0.0;
    if (!any) continue;
    for (const auto& tm : cw.terms) {
      const std::size_t dst = src + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(tm.shift));
      const double a = tm.re, b = tm.im;
      const double xr = st.re[static_cast<std::size_t>(tm.l)][src], xi = st.im[static_cast<std::size_t>(tm.l)][src];
      out.re[static_cast<std::size_t>(tm.k)][dst] += a * xr - b * xi;
      out.im[static_cast<std::size_t>(tm.k)][dst] += a * xi + b * xr;
    }
  }
  (void)L;
}

// Welford accumulator over a fixed-length vector; optional full co-moment
// matrix. Blocks combine with the pairwise update of Chan et al.
struct RunningStats {
  double n = 0.0;
  std::vector<double> mean, m2;
  RMatrix comoment;
  bool full = false;

  void init(std::size_t len, bool fullCov) {
    n = 0.0;
    full = fullCov;
    mean.assign(len, 0.0);
    m2.assign(len, 0.0);
    if (full) comoment = RMatrix::Zero(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(len));
  }

  void add(const double* x) {
    n += 1.0;
    const std::size_t len = mean.size();
    if (full) {
      RVector delta(static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i) delta(static_cast<Eigen::Index>(i)) = x[i] - mean[i];
      for (std::size_t i = 0; i < len; ++i) mean[i] += delta(static_cast<Eigen::Index>(i)) / n;
      RVector after(static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i) after(static_cast<Eigen::Index>(i)) = x[i] - mean[i];
      comoment += delta * after.transpose();
      for (std::size_t i = 0; i < len; ++i) m2[i] = comoment(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
      return;
    }
    for (std::size_t i = 0; i < len; ++i) {
      const double delta = x[i] - mean[i];
      if (delta == 0.0) continue;
      mean[i] += delta / n;
      m2[i] += delta * (x[i] - mean[i]);
    }
  }

  void merge(const RunningStats& o) {
    if (o.n == 0.0) return;
    if (n == 0.0) {
      *this = o;
      return;
    }
    const double tot = n + o.n;
    const std::size_t len = mean.size();
    if (full) {
      RVector delta(static_cast<Eigen::Index>(len));
      for (std::size_t i = 0; i < len; ++i) delta(static_cast<Eigen::Index>(i)) = o.mean[i] - mean[i];
      comoment += o.comoment + delta * delta.transpose() * (n * o.n / tot);
    }
    for (std::size_t i = 0; i < len; ++i) {
      const double delta = o.mean[i] - mean[i];
      mean[i] += delta * o.n / tot;
      m2[i] += o.m2[i] + delta * delta * n * o.n / tot;
      if (full) m2[i] = comoment(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
    }
    n = tot;
  }

  double covariance(std::size_t i, std::size_t j) const {
    return n > 1 ? comoment(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / (n - 1) : 0.0;
  }

  double stderr_of(std::size_t i) const { return n > 1 ? std::sqrt(std::max(0.0, m2[i]) / (n - 1) / n) : 0.0; }
};

inline std::mt19937_64 trajectory_rng(std::uint64_t seed, std::uint64_t traj) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(traj), static_cast<std::uint32_t>(traj >> 32)};
  return std::mt19937_64(seq);
}

inline int sample_index(std::mt19937_64& rng, const std::vector<double>& cdf) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  for (std::size_t i = 0; i + 1 < cdf.size(); ++i)
    if (u < cdf[i]) return static_cast<int>(i);
  return static_cast<int>(cdf.size()) - 1;
}

}  // namespace detail

/// Monte Carlo over control trajectories gamma(0) ~ stationary law; each
/// trajectory evolves psi exactly under W_{gamma(t-1)} ... W_{gamma(0)}.
/// Output is bit-identical for a given seed regardless of thread count.
inline MarkovRun simulate_markov_series(const MarkovWalkModel& model, const InitialState& psi0, int t, long long nTraj,
                                        std::uint64_t seed, const MarkovOptions& opt = {}) {
  detail::require(model.unitary_flag(), "simulate.simulate_markov",
                  "model is not unitary per control state; use density evolution");
  detail::require(psi0.is_pure(), "simulate.simulate_markov", "initial state must be pure");
  detail::require(psi0.lattice_dim() == model.lattice_dim() && psi0.coin_dim() == model.coin_dim(),
                  "simulate.simulate_markov", "initial state does not match model dimensions");
  detail::require(t >= 0 && nTraj >= 1, "simulate.simulate_markov", "need t >= 0 and at least one trajectory");
  const int s = model.lattice_dim(), d = model.coin_dim(), G = model.state_count();
  const int maxdeg = model.max_degree();
  const int R = t * maxdeg + psi0.radius();
  const int L = 2 * R + 1;
  const std::size_t boxSize = detail::ipow(static_cast<std::size_t>(L), s);
  detail::require(static_cast<double>(boxSize) * d * 16.0 * 3 < 4e9, "simulate.memory_cap",
                  "Monte Carlo box exceeds memory cap");

  std::vector<detail::CompiledWalk> walks;
  for (int g = 0; g < G; ++g) walks.push_back(detail::compile_walk(model.channel(g).front(), L));
  std::vector<double> cdf0(static_cast<std::size_t>(G));
  std::vector<std::vector<double>> cdf(static_cast<std::size_t>(G), std::vector<double>(static_cast<std::size_t>(G)));
  {
    double acc = 0.0;
    for (int g = 0; g < G; ++g) cdf0[static_cast<std::size_t>(g)] = acc += model.control().stationary()(g);
    for (int g = 0; g < G; ++g) {
      acc = 0.0;
      for (int h = 0; h < G; ++h) cdf[static_cast<std::size_t>(g)][static_cast<std::size_t>(h)] = acc += model.control().transition()(g, h);
    }
  }

  std::vector<int> cps = opt.checkpoints;
  cps.push_back(t);
  std::sort(cps.begin(), cps.end());
  cps.erase(std::unique(cps.begin(), cps.end()), cps.end());
  detail::require(cps.front() >= 0, "simulate.simulate_markov", "negative checkpoint");
  const std::size_t nc = cps.size();

  const long long bs = std::max(1, opt.blockSize);
  const long long nBlocks = (nTraj + bs - 1) / bs;

  // Per-block running statistics, merged in block order afterwards.
  struct BlockStats {
    detail::RunningStats sites;
    std::vector<detail::RunningStats> mom;
  };
  std::vector<BlockStats> blocks(static_cast<std::size_t>(nBlocks));
  const std::size_t nm = static_cast<std::size_t>(s + s * s);

#pragma omp parallel
  {
    detail::BoxState a, b;
    std::vector<double> w(boxSize), mv(nm);
#pragma omp for schedule(dynamic, 1)
    for (long long blk = 0; blk < nBlocks; ++blk) {
      BlockStats st;
      st.sites.init(boxSize, false);
      st.mom.resize(nc);
      for (auto& m : st.mom) m.init(nm, true);
      const long long first = blk * bs, last = std::min(nTraj, first + bs);
      for (long long tr = first; tr < last; ++tr) {
        auto rng = detail::trajectory_rng(seed, static_cast<std::uint64_t>(tr));
        a.init(s, d, R, psi0);
        b.init(s, d, R, psi0);
        int g = detail::sample_index(rng, cdf0);
        std::size_t ci = 0;
        auto weights = [&](const detail::BoxState& bx) {
          std::fill(w.begin(), w.end(), 0.0);
          const std::size_t beg = s == 1 ? static_cast<std::size_t>(bx.lo) : 0;
          const std::size_t end = s == 1 ? static_cast<std::size_t>(bx.hi + 1) : boxSize;
          for (std::size_t lin = beg; lin < end; ++lin) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) {
              const double x = bx.re[static_cast<std::size_t>(k)][lin], z = bx.im[static_cast<std::size_t>(k)][lin];
              acc += x * x + z * z;
            }
            w[lin] = acc;
          }
        };
        auto record = [&](const detail::BoxState& bx) {
          weights(bx);
          std::fill(mv.begin(), mv.end(), 0.0);
          for (std::size_t lin = 0; lin < boxSize; ++lin) {
            if (w[lin] == 0.0) continue;
            const auto idx = detail::unravel(lin, L, s);
            for (int i = 0; i < s; ++i) {
              const double yi = idx[static_cast<std::size_t>(i)] - R;
              mv[static_cast<std::size_t>(i)] += w[lin] * yi;
              for (int j = 0; j < s; ++j)
                mv[static_cast<std::size_t>(s + i * s + j)] += w[lin] * yi * (idx[static_cast<std::size_t>(j)] - R);
            }
          }
          st.mom[ci].add(mv.data());
        };
        if (cps[0] == 0) record(a), ++ci;
        for (int step = 1; step <= t; ++step) {
          if (s == 1)
            detail::step_1d(walks[static_cast<std::size_t>(g)], maxdeg, a, b, opt.trimFloor);
          else
            detail::step_box(walks[static_cast<std::size_t>(g)], a, b);
          std::swap(a, b);
          g = detail::sample_index(rng, cdf[static_cast<std::size_t>(g)]);
          if (ci < nc && cps[ci] == step) record(a), ++ci;
        }
        weights(a);
        st.sites.add(w.data());
      }
      blocks[static_cast<std::size_t>(blk)] = std::move(st);
    }
  }

  detail::RunningStats sites;
  sites.init(boxSize, false);
  std::vector<detail::RunningStats> mom(nc);
  for (auto& m : mom) m.init(nm, true);
  for (const auto& blk : blocks) {
    sites.merge(blk.sites);
    for (std::size_t c = 0; c < nc; ++c) mom[c].merge(blk.mom[c]);
  }

  MarkovRun run;
  run.trajectories = nTraj;
  run.distribution.time = t;
  run.distribution.latticeDim = s;
  for (std::size_t lin = 0; lin < boxSize; ++lin) {
    if (sites.mean[lin] == 0.0) continue;
    const auto idx = detail::unravel(lin, L, s);
    Offset x(static_cast<std::size_t>(s));
    for (int a = 0; a < s; ++a) x[static_cast<std::size_t>(a)] = idx[static_cast<std::size_t>(a)] - R;
    run.distribution.probs[x] = sites.mean[lin];
    run.distribution.stderr[x] = sites.stderr_of(lin);
  }
  for (std::size_t c = 0; c < nc; ++c) {
    const auto& m = mom[c];
    run.series.times.push_back(cps[c]);
    RVector m1(s), ms(s);
    RMatrix m2(s, s), m2s(s, s);
    for (int i = 0; i < s; ++i) {
      m1(i) = m.mean[static_cast<std::size_t>(i)];
      ms(i) = m.stderr_of(static_cast<std::size_t>(i));
      for (int j = 0; j < s; ++j) {
        m2(i, j) = m.mean[static_cast<std::size_t>(s + i * s + j)];
        m2s(i, j) = m.stderr_of(static_cast<std::size_t>(s + i * s + j));
      }
    }
    run.series.meanQ.push_back(m1);
    run.series.meanStderr.push_back(ms);
    run.series.secondQ.push_back(m2);
    run.series.secondStderr.push_back(m2s);
    // Var Q_a = mean(B) - mean(A)^2 with A = E_traj[Q_a], B = E_traj[Q_a^2];
    // gradient (-2 mean(A), 1) against the trajectory covariance of (A, B).
    RVector vs(s);
    for (int i = 0; i < s; ++i) {
      const std::size_t ia = static_cast<std::size_t>(i), ib = static_cast<std::size_t>(s + i * s + i);
      const double ga = -2.0 * m1(i);
      const double var = ga * ga * m.covariance(ia, ia) + 2.0 * ga * m.covariance(ia, ib) + m.covariance(ib, ib);
      vs(i) = m.n > 1 ? std::sqrt(std::max(0.0, var) / m.n) : 0.0;
    }
    run.series.varianceStderr.push_back(vs);
  }
  return run;
}

inline PositionDistribution simulate_markov(const MarkovWalkModel& model, const InitialState& psi0, int t, long long nTraj,
                                            std::uint64_t seed) {
  return simulate_markov_series(model, psi0, t, nTraj, seed).distribution;
}

/// Exact mean and second moment of Q(t) (1D) for the control-averaged
/// evolution, started with gamma(0) ~ stationary law. Tracks
/// X(q) = rho_t(q + lambda, q) to second order in lambda, pointwise in q, per
/// control state; E[Q^n] = (-i d/dlambda)^n mean_q tr X at lambda = 0.
/// The grid is exact for trigonometric integrands.
struct ExactMoments {
  std::vector<int> times;
  std::vector<double> mean, second;
  double variance(std::size_t i) const { return second[i] - mean[i] * mean[i]; }
};

inline ExactMoments exact_moments(const MarkovWalkModel& model, const InitialState& psi0, const std::vector<int>& times) {
  detail::require(model.lattice_dim() == 1, "simulate.exact_moments", "one-dimensional models only");
  detail::require(psi0.is_pure() && psi0.coin_dim() == model.coin_dim() && psi0.lattice_dim() == 1,
                  "simulate.exact_moments", "initial state must be a matching pure state");
  detail::require(!times.empty() && std::is_sorted(times.begin(), times.end()) && times.front() >= 0,
                  "simulate.exact_moments", "times must be sorted and nonnegative");
  const int tmax = times.back();
  const int G = model.state_count(), d = model.coin_dim();
  const int n = detail::fft_friendly(2 * (tmax * model.max_degree() + psi0.radius()) + 8);
  const auto& m = model.control().transition();
  const auto& mbar = model.control().stationary();

  struct Kr {
    CMatrix k, dk, d2k;
  };
  std::vector<double> mean(times.size(), 0.0), second(times.size(), 0.0);
  std::vector<std::vector<TrigPolyMatrix>> d1(static_cast<std::size_t>(G)), d2(static_cast<std::size_t>(G));
  for (int g = 0; g < G; ++g)
    for (const auto& k : model.channel(g)) {
      d1[static_cast<std::size_t>(g)].push_back(derivative(k, 0));
      d2[static_cast<std::size_t>(g)].push_back(derivative(derivative(k, 0), 0));
    }

#pragma omp parallel
  {
    std::vector<double> lm(times.size(), 0.0), ls(times.size(), 0.0);
#pragma omp for schedule(static)
    for (int j = 0; j < n; ++j) {
      const double q = 2.0 * pi * j / n;
      std::vector<std::vector<Kr>> kr(static_cast<std::size_t>(G));
      for (int g = 0; g < G; ++g)
        for (std::size_t a = 0; a < model.channel(g).size(); ++a)
          kr[static_cast<std::size_t>(g)].push_back({model.channel(g)[a].evaluate(q), d1[static_cast<std::size_t>(g)][a].evaluate(q),
                                                     d2[static_cast<std::size_t>(g)][a].evaluate(q)});
      CVector a0 = CVector::Zero(d), a1 = CVector::Zero(d), a2 = CVector::Zero(d);
      for (const auto& [x, v] : psi0.amplitudes()) {
        const cplx e = std::polar(1.0, q * x[0]);
        a0 += e * v;
        a1 += (I * double(x[0])) * e * v;
        a2 += -double(x[0]) * double(x[0]) * e * v;
      }
      std::vector<CMatrix> x0(static_cast<std::size_t>(G)), x1(static_cast<std::size_t>(G)), x2(static_cast<std::size_t>(G));
      for (int g = 0; g < G; ++g) {
        x0[static_cast<std::size_t>(g)] = mbar(g) * a0 * a0.adjoint();
        x1[static_cast<std::size_t>(g)] = mbar(g) * a1 * a0.adjoint();
        x2[static_cast<std::size_t>(g)] = mbar(g) * a2 * a0.adjoint();
      }
      std::size_t ti = 0;
      for (int step = 0; step <= tmax; ++step) {
        while (ti < times.size() && times[ti] == step) {
          cplx t1 = 0.0, t2 = 0.0;
          for (int g = 0; g < G; ++g) {
            t1 += x1[static_cast<std::size_t>(g)].trace();
            t2 += x2[static_cast<std::size_t>(g)].trace();
          }
          lm[ti] += (-I * t1).real();
          ls[ti] += (-t2).real();
          ++ti;
        }
        if (step == tmax) break;
        std::vector<CMatrix> y0(static_cast<std::size_t>(G), CMatrix::Zero(d, d)), y1 = y0, y2 = y0;
        for (int g = 0; g < G; ++g) {
          CMatrix v0 = CMatrix::Zero(d, d), v1 = v0, v2 = v0;
          for (const auto& k : kr[static_cast<std::size_t>(g)]) {
            const CMatrix ka = k.k.adjoint();
            v0 += k.k * x0[static_cast<std::size_t>(g)] * ka;
            v1 += (k.dk * x0[static_cast<std::size_t>(g)] + k.k * x1[static_cast<std::size_t>(g)]) * ka;
            v2 += (k.d2k * x0[static_cast<std::size_t>(g)] + 2.0 * k.dk * x1[static_cast<std::size_t>(g)] +
                   k.k * x2[static_cast<std::size_t>(g)]) * ka;
          }
          for (int h = 0; h < G; ++h) {
            if (m(g, h) == 0.0) continue;
            y0[static_cast<std::size_t>(h)] += m(g, h) * v0;
            y1[static_cast<std::size_t>(h)] += m(g, h) * v1;
            y2[static_cast<std::size_t>(h)] += m(g, h) * v2;
          }
        }
        x0 = std::move(y0);
        x1 = std::move(y1);
        x2 = std::move(y2);
      }
    }
#pragma omp critical
    for (std::size_t i = 0; i < times.size(); ++i) {
      mean[i] += lm[i];
      second[i] += ls[i];
    }
  }
  ExactMoments out;
  out.times = times;
  for (std::size_t i = 0; i < times.size(); ++i) {
    out.mean.push_back(mean[i] / n);
    out.second.push_back(second[i] / n);
  }
  return out;
}

namespace detail {

// rho' = sum_i K_i rho K_i^* on the window [lo, hi]^2 of an L x L kernel,
// with (K psi)(x) = sum_k a_k psi(x - k).
struct ScalarKernel {
  std::vector<std::vector<std::pair<int, cplx>>> kraus;  // (k, a_k)
  int reach = 0;
};

inline ScalarKernel scalar_kernel_from(const std::vector<ScalarCoefficients>& coeffs) {
  ScalarKernel sk;
  for (const auto& a : coeffs) {
    std::vector<std::pair<int, cplx>> v;
    for (const auto& [k, c] : a) {
      if (std::abs(c) == 0.0) continue;
      v.emplace_back(k, c);
      sk.reach = std::max(sk.reach, std::abs(k));
    }
    sk.kraus.push_back(std::move(v));
  }
  return sk;
}

inline std::vector<ScalarCoefficients> scalar_coefficients_of(const MarkovWalkModel& model) {
  detail::require(model.coin_dim() == 1 && model.lattice_dim() == 1 && model.state_count() == 1,
                  "simulate.evolve_density_scalar", "needs a one-dimensional coin-free single-state model");
  std::vector<ScalarCoefficients> out;
  for (const auto& k : model.channel(0)) {
    ScalarCoefficients a;
    for (const auto& [x, c] : k.coefficients()) a[x[0]] += c(0, 0);
    out.push_back(a);
  }
  return out;
}

inline PositionDistribution evolve_density_kernel(const ScalarKernel& sk, double q, const InitialState& rho0, int t,
                                                  int latticeRadius) {
  detail::require(rho0.is_pure() && rho0.coin_dim() == 1 && rho0.lattice_dim() == 1, "simulate.evolve_density_scalar",
                  "initial state must be a pure coin-free 1D state");
  detail::require(t >= 0, "simulate.evolve_density_scalar", "t must be nonnegative");
  const int r0 = rho0.radius();
  detail::require(latticeRadius >= t * sk.reach + r0, "simulate.evolve_density_scalar",
                  "latticeRadius must be at least t * maxdeg + initial radius");
  const int R = latticeRadius, L = 2 * R + 1;
  std::vector<cplx> rho(static_cast<std::size_t>(L) * static_cast<std::size_t>(L), 0.0), tmp(rho.size()), acc(rho.size());
  auto at = [L](std::vector<cplx>& m, int x, int y) -> cplx& {
    return m[static_cast<std::size_t>(x) * static_cast<std::size_t>(L) + static_cast<std::size_t>(y)];
  };
  int lo = L, hi = -1;
  for (const auto& [x1, v1] : rho0.amplitudes())
    for (const auto& [x2, v2] : rho0.amplitudes()) at(rho, x1[0] + R, x2[0] + R) = v1(0) * std::conj(v2(0));
  for (const auto& [x, v] : rho0.amplitudes()) {
    lo = std::min(lo, x[0] + R);
    hi = std::max(hi, x[0] + R);
  }
  std::vector<cplx> phase(static_cast<std::size_t>(L));
  for (int x = 0; x < L; ++x) phase[static_cast<std::size_t>(x)] = std::polar(1.0, -q * (x - R));

  for (int step = 0; step < t; ++step) {
    const int nlo = lo - sk.reach, nhi = hi + sk.reach;
    for (int x = nlo; x <= nhi; ++x)
      std::fill(&at(acc, x, nlo), &at(acc, x, nhi) + 1, cplx(0.0));
    for (const auto& kr : sk.kraus) {
      // tmp = K rho: row x gets sum_k a_k rho(x - k, .)
      for (int x = nlo; x <= nhi; ++x) std::fill(&at(tmp, x, lo), &at(tmp, x, hi) + 1, cplx(0.0));
      for (const auto& [k, a] : kr) {
        for (int src = lo; src <= hi; ++src) {
          const int x = src + k;
          cplx* dst = &at(tmp, x, 0);
          const cplx* sp = &at(rho, src, 0);
          for (int y = lo; y <= hi; ++y) dst[y] += a * sp[y];
        }
      }
      // acc += tmp K^*: column y gets sum_k conj(a_k) tmp(., y - k)
      for (const auto& [k, a] : kr) {
        const cplx ca = std::conj(a);
        for (int x = nlo; x <= nhi; ++x) {
          cplx* dst = &at(acc, x, 0);
          const cplx* sp = &at(tmp, x, 0);
          for (int y = lo; y <= hi; ++y) dst[y + k] += ca * sp[y];
        }
      }
    }
    lo = nlo;
    hi = nhi;
    if (q != 0.0) {
      for (int x = lo; x <= hi; ++x) {
        const cplx px = phase[static_cast<std::size_t>(x)];
        cplx* row = &at(acc, x, 0);
        for (int y = lo; y <= hi; ++y) row[y] *= px * std::conj(phase[static_cast<std::size_t>(y)]);
      }
    }
    std::swap(rho, acc);
  }
  PositionDistribution dist;
  dist.time = t;
  dist.latticeDim = 1;
  for (int x = lo; x <= hi; ++x) {
    const double pr = at(rho, x, x).real();
    dist.probs[{x - R}] = pr;
  }
  return dist;
}

}  // namespace detail

/// Exact evolution rho -> sum_i K_i rho K_i^* of a coin-free walk on the
/// truncated lattice [-latticeRadius, latticeRadius]; returns the diagonal.
inline PositionDistribution evolve_density_scalar(const MarkovWalkModel& model, const InitialState& rho0, int t,
                                                  int latticeRadius) {
  return detail::evolve_density_kernel(detail::scalar_kernel_from(detail::scalar_coefficients_of(model)), 0.0, rho0, t,
                                       latticeRadius);
}

/// Exact evolution rho -> sum_g m(g) sum_a K_ga rho K_ga^* of a memoryless
/// 1D Kraus model, in position space on the light-cone window.
inline PositionDistribution evolve_density_kraus(const MarkovWalkModel& model, const InitialState& rho0, int t) {
  detail::require(model.lattice_dim() == 1, "simulate.evolve_density_kraus", "one lattice dimension only");
  detail::require(model.state_count() == 1 || model.control().is_bernoulli(1e-12), "simulate.evolve_density_kraus",
                  "control process has memory");
  detail::require(rho0.is_pure() && rho0.coin_dim() == model.coin_dim() && rho0.lattice_dim() == 1,
                  "simulate.evolve_density_kraus", "initial state must be a matching pure state");
  detail::require(t >= 0, "simulate.evolve_density_kraus", "t must be nonnegative");
  struct Term {
    int k;
    CMatrix c;
  };
  const int d = model.coin_dim();
  const RVector w = model.control().transition().row(0).transpose();
  std::vector<std::vector<Term>> fam;
  int reach = 0;
  for (int g = 0; g < model.state_count(); ++g)
    for (const auto& kr : model.channel(g)) {
      std::vector<Term> terms;
      for (const auto& [x, c] : kr.coefficients()) {
        terms.push_back({x[0], std::sqrt(w(g)) * c});
        reach = std::max(reach, std::abs(x[0]));
      }
      fam.push_back(std::move(terms));
    }
  const int R = rho0.radius() + t * reach, L = 2 * R + 1, N = L * d;
  CMatrix rho = CMatrix::Zero(N, N), tmp = CMatrix::Zero(N, N), acc = CMatrix::Zero(N, N);
  int lo = L, hi = -1;
  for (const auto& [x1, v1] : rho0.amplitudes()) {
    lo = std::min(lo, x1[0] + R);
    hi = std::max(hi, x1[0] + R);
    for (const auto& [x2, v2] : rho0.amplitudes()) rho.block((x1[0] + R) * d, (x2[0] + R) * d, d, d) = v1 * v2.adjoint();
  }
  for (int step = 0; step < t; ++step) {
    const int nlo = lo - reach, nhi = hi + reach;
    const int wd = (hi - lo + 1) * d, nw = (nhi - nlo + 1) * d;
    acc.block(nlo * d, nlo * d, nw, nw).setZero();
    for (const auto& terms : fam) {
      tmp.block(nlo * d, lo * d, nw, wd).setZero();
      for (const auto& [k, c] : terms)
        for (int src = lo; src <= hi; ++src) tmp.block((src + k) * d, lo * d, d, wd) += c * rho.block(src * d, lo * d, d, wd);
      for (const auto& [k, c] : terms) {
        const CMatrix ca = c.adjoint();
        for (int y = lo; y <= hi; ++y) acc.block(nlo * d, (y + k) * d, nw, d) += tmp.block(nlo * d, y * d, nw, d) * ca;
      }
    }
    std::swap(rho, acc);
    lo = nlo;
    hi = nhi;
  }
  PositionDistribution dist;
  dist.time = t;
  dist.latticeDim = 1;
  for (int x = lo; x <= hi; ++x) dist.probs[{x - R}] = rho.block(x * d, x * d, d, d).trace().real();
  return dist;
}

/// Momentum-shift variant: each Kraus operator of the halving walk followed
/// by multiplication with e^{-iqx}, which shifts momentum by q.
inline PositionDistribution evolve_density_scalar(const MomentumShiftModel& model, const InitialState& rho0, int t,
                                                  int latticeRadius) {
  return detail::evolve_density_kernel(detail::scalar_kernel_from(halving_walk_coefficients()), model.q, rho0, t,
                                       latticeRadius);
}

}  // namespace qwalk
