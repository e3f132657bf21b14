#pragma once

// Walk families, control processes and initial states.

#include "qwalk/trigpoly.hpp"

#include <map>
#include <numeric>
#include <optional>

namespace qwalk {

/// Finite Markov chain selecting the operation applied at each step.
/// transition(g, h) = m_g(h), the probability of moving from g to h.
class ControlProcess {
public:
  ControlProcess() : ControlProcess(RMatrix::Ones(1, 1)) {}

  explicit ControlProcess(RMatrix transition) : m_(std::move(transition)) {
    const auto n = m_.rows();
    detail::require(n > 0 && m_.cols() == n, "control.shape", "transition matrix must be square and nonempty");
    for (Eigen::Index g = 0; g < n; ++g) {
      double sum = 0.0;
      for (Eigen::Index h = 0; h < n; ++h) {
        detail::require(m_(g, h) >= 0.0 && std::isfinite(m_(g, h)), "control.rows",
                        "transition entries must be finite and nonnegative");
        sum += m_(g, h);
      }
      detail::require(std::abs(sum - 1.0) <= 1e-12, "control.rows", "transition rows must sum to 1");
    }
    stationary_ = solve_stationary(m_);
  }

  int state_count() const noexcept { return static_cast<int>(m_.rows()); }
  const RMatrix& transition() const noexcept { return m_; }
  const RVector& stationary() const noexcept { return stationary_; }

  /// All rows equal: the control is memoryless.
  bool is_bernoulli(double tol = 1e-12) const {
    for (Eigen::Index g = 1; g < m_.rows(); ++g)
      if ((m_.row(g) - m_.row(0)).cwiseAbs().maxCoeff() > tol) return false;
    return true;
  }

  /// Some power M^k, k <= |Gamma|^2, has only strictly positive entries.
  bool is_primitive() const {
    const int n = state_count();
    RMatrix pw = m_;
    for (int k = 1; k <= n * n; ++k) {
      if (pw.minCoeff() > 0.0) return true;
      pw = pw * m_;
    }
    return false;
  }

  /// Stationary law by power iteration from the uniform vector.
  RVector stationary_by_power(int maxIter = 100000, double tol = 1e-14) const {
    const int n = state_count();
    RVector x = RVector::Constant(n, 1.0 / n);
    // Lazy chain (M + 1)/2 has the same stationary law and no periodicity.
    const RMatrix lazy = 0.5 * (m_ + RMatrix::Identity(n, n));
    for (int it = 0; it < maxIter; ++it) {
      RVector y = lazy.transpose() * x;
      y /= y.sum();
      const double diff = (y - x).cwiseAbs().maxCoeff();
      x = y;
      if (diff < tol) break;
    }
    return x;
  }

private:
  static RVector solve_stationary(const RMatrix& m) {
    const auto n = m.rows();
    RMatrix a(n + 1, n);
    a.topRows(n) = m.transpose() - RMatrix::Identity(n, n);
    a.row(n).setOnes();
    RVector b = RVector::Zero(n + 1);
    b(n) = 1.0;
    RVector x = a.completeOrthogonalDecomposition().solve(b);
    const double res = (a * x - b).norm();
    if (res > 1e-8) throw NumericalError("control.stationary", "no stationary distribution (residual " + std::to_string(res) + ")");
    for (Eigen::Index i = 0; i < n; ++i) x(i) = std::max(0.0, x(i));
    x /= x.sum();
    return x;
  }

  RMatrix m_;
  RVector stationary_;
};

using KrausFamily = std::vector<TrigPolyMatrix>;

/// Control process plus one Kraus family per control state.
class MarkovWalkModel {
public:
  MarkovWalkModel(ControlProcess control, std::vector<KrausFamily> channels, std::string name = "")
      : control_(std::move(control)), channels_(std::move(channels)), name_(std::move(name)) {
    detail::require(static_cast<int>(channels_.size()) == control_.state_count(), "model.shape",
                    "need exactly one Kraus family per control state");
    detail::require(!channels_.front().empty(), "model.shape", "empty Kraus family");
    s_ = channels_.front().front().lattice_dim();
    d_ = channels_.front().front().coin_dim();
    unitary_ = true;
    for (const auto& fam : channels_) {
      detail::require(!fam.empty(), "model.shape", "empty Kraus family");
      for (const auto& k : fam)
        detail::require(k.lattice_dim() == s_ && k.coin_dim() == d_, "model.shape",
                        "all Kraus operators must share lattice and coin dimension");
      const auto rep = check_kraus_normalization(fam, 1e-10);
      if (!rep.pass)
        throw ValidationError("model.kraus_normalization",
                              "Kraus family violates normalization (deviation " + std::to_string(rep.maxDeviation) + ")");
      if (fam.size() != 1) unitary_ = false;
    }
    if (unitary_)
      for (const auto& fam : channels_)
        if (!check_unitary(fam.front(), 1e-10).pass)
          throw ValidationError("model.unitary", "single Kraus operator is not unitary");
  }

  const ControlProcess& control() const noexcept { return control_; }
  const std::vector<KrausFamily>& channels() const noexcept { return channels_; }
  const KrausFamily& channel(int g) const { return channels_.at(static_cast<std::size_t>(g)); }
  bool unitary_flag() const noexcept { return unitary_; }
  int lattice_dim() const noexcept { return s_; }
  int coin_dim() const noexcept { return d_; }
  int state_count() const noexcept { return control_.state_count(); }
  const std::string& name() const noexcept { return name_; }

  int max_degree() const {
    int m = 0;
    for (const auto& fam : channels_)
      for (const auto& k : fam) m = std::max(m, k.max_degree());
    return m;
  }

private:
  ControlProcess control_;
  std::vector<KrausFamily> channels_;
  std::string name_;
  int s_ = 1;
  int d_ = 1;
  bool unitary_ = true;
};

/// Initial state: finitely supported pure state, tabulated momentum density,
/// or the uniform (maximally mixed, translation-invariant) density.
///
/// Momentum densities are normalized against the mean over the Brillouin
/// zone: mean_p tr rho(p) = 1. For a pure state rho(p) = psi^(p) psi^(p)^*
/// with psi^(p) = sum_x e^{i p.x} psi(x).
class InitialState {
public:
  enum class Kind { Pure, Tabulated, Uniform };

  static InitialState pure(std::map<Offset, CVector> amplitudes) {
    detail::require(!amplitudes.empty(), "initial.pure", "empty amplitude map");
    InitialState st;
    st.kind_ = Kind::Pure;
    st.s_ = static_cast<int>(amplitudes.begin()->first.size());
    st.d_ = static_cast<int>(amplitudes.begin()->second.size());
    double norm = 0.0;
    for (const auto& [x, v] : amplitudes) {
      detail::require(static_cast<int>(x.size()) == st.s_ && v.size() == st.d_, "initial.pure",
                      "inconsistent site or coin dimension");
      norm += v.squaredNorm();
    }
    detail::require(std::abs(norm - 1.0) <= 1e-12, "initial.pure", "amplitudes must have unit norm");
    st.amps_ = std::move(amplitudes);
    return st;
  }

  /// Single site x with coin vector c (normalized here).
  static InitialState localized(const Offset& x, CVector c) {
    const double n = c.norm();
    detail::require(n > 0.0, "initial.pure", "zero coin vector");
    c /= n;
    return pure({{x, c}});
  }

  static InitialState localized(int s, CVector c) { return localized(Offset(static_cast<std::size_t>(s), 0), std::move(c)); }

  /// rho(p) = 1/d for every p.
  static InitialState uniform(int s, int d) {
    InitialState st;
    st.kind_ = Kind::Uniform;
    st.s_ = s;
    st.d_ = d;
    return st;
  }

  /// Values on the midpoint grid momentum_grid(n)^s, row-major.
  static InitialState tabulated(int s, int n, std::vector<CMatrix> values) {
    detail::require(n > 0 && values.size() == detail::ipow(static_cast<std::size_t>(n), s), "initial.tabulated",
                    "value count does not match grid");
    InitialState st;
    st.kind_ = Kind::Tabulated;
    st.s_ = s;
    st.n_ = n;
    st.d_ = static_cast<int>(values.front().rows());
    double tr = 0.0;
    for (const auto& r : values) {
      detail::require(r.rows() == st.d_ && r.cols() == st.d_, "initial.tabulated", "inconsistent matrix size");
      detail::require((r - r.adjoint()).norm() <= 1e-10, "initial.tabulated", "density not Hermitian");
      Eigen::SelfAdjointEigenSolver<CMatrix> es(0.5 * (r + r.adjoint()));
      detail::require(es.eigenvalues().minCoeff() >= -1e-10, "initial.tabulated", "density not positive semidefinite");
      tr += r.trace().real();
    }
    tr /= static_cast<double>(values.size());
    detail::require(std::abs(tr - 1.0) <= 1e-8, "initial.tabulated", "mean trace must be 1");
    st.tab_ = std::move(values);
    return st;
  }

  Kind kind() const noexcept { return kind_; }
  bool is_pure() const noexcept { return kind_ == Kind::Pure; }
  int lattice_dim() const noexcept { return s_; }
  int coin_dim() const noexcept { return d_; }
  const std::map<Offset, CVector>& amplitudes() const noexcept { return amps_; }

  /// Largest |x_a| over the support (pure states only; 0 otherwise).
  int radius() const {
    int r = 0;
    for (const auto& [x, v] : amps_)
      for (int c : x) r = std::max(r, std::abs(c));
    return r;
  }

  CVector amplitude_hat(std::span<const double> p) const {
    detail::require(is_pure(), "initial.kernel", "momentum amplitude needs a pure state");
    CVector out = CVector::Zero(d_);
    for (const auto& [x, v] : amps_) {
      double ph = 0.0;
      for (int a = 0; a < s_; ++a) ph += p[static_cast<std::size_t>(a)] * x[static_cast<std::size_t>(a)];
      out += std::polar(1.0, ph) * v;
    }
    return out;
  }

  CMatrix density(std::span<const double> p) const {
    switch (kind_) {
      case Kind::Pure: {
        const CVector a = amplitude_hat(p);
        return a * a.adjoint();
      }
      case Kind::Uniform:
        return CMatrix::Identity(d_, d_) / static_cast<double>(d_);
      case Kind::Tabulated: {
        std::vector<int> idx(static_cast<std::size_t>(s_));
        for (int a = 0; a < s_; ++a) {
          const double u = (p[static_cast<std::size_t>(a)] + pi) * n_ / (2.0 * pi) - 0.5;
          int j = static_cast<int>(std::lround(u));
          j = ((j % n_) + n_) % n_;
          idx[static_cast<std::size_t>(a)] = j;
        }
        return tab_[detail::ravel(idx, n_)];
      }
    }
    return {};
  }

  CMatrix density(double p) const { return density(std::span<const double>(&p, 1)); }

  /// rho(p1, p2) = psi^(p1) psi^(p2)^* (pure states only).
  CMatrix kernel(std::span<const double> p1, std::span<const double> p2) const {
    return amplitude_hat(p1) * amplitude_hat(p2).adjoint();
  }

private:
  Kind kind_ = Kind::Uniform;
  int s_ = 1;
  int d_ = 1;
  int n_ = 0;
  std::map<Offset, CVector> amps_;
  std::vector<CMatrix> tab_;
};

/// Momentum-shift walk with q = 2 pi n / m: not translation invariant in
/// the coin-free sense, handled by dedicated routines only.
struct MomentumShiftModel {
  int n = 0;
  int m = 1;
  double q = 0.0;
  bool zeroShift() const noexcept { return n % m == 0; }
  bool period2() const noexcept { return m == 2; }
};

namespace detail {

inline CMatrix hadamard_coin() {
  CMatrix h(2, 2);
  h << 1.0, 1.0, 1.0, -1.0;
  return h / std::sqrt(2.0);
}

inline CMatrix pauli_x() {
  CMatrix x(2, 2);
  x << 0.0, 1.0, 1.0, 0.0;
  return x;
}

inline TrigPolyMatrix shift_1d() { return TrigPolyMatrix::diagonal_shift({{1}, {-1}}); }

inline TrigPolyMatrix shift_axis(int s, int axis) {
  Offset up(static_cast<std::size_t>(s), 0), down(static_cast<std::size_t>(s), 0);
  up[static_cast<std::size_t>(axis)] = 1;
  down[static_cast<std::size_t>(axis)] = -1;
  return TrigPolyMatrix::diagonal_shift({up, down});
}

/// [[cos phi e^{i theta}, sin phi e^{i chi}], [-sin phi e^{-i chi}, cos phi e^{-i theta}]]
inline CMatrix su2(double theta, double chi, double phi) {
  CMatrix u(2, 2);
  u << std::cos(phi) * std::polar(1.0, theta), std::sin(phi) * std::polar(1.0, chi),
      -std::sin(phi) * std::polar(1.0, -chi), std::cos(phi) * std::polar(1.0, -theta);
  return u;
}

}  // namespace detail

/// C S with C = [[cos b e^{ia}, sin b e^{ig}], [-sin b e^{-ig}, cos b e^{-ia}]],
/// so that cos omega(p) = cos(p + a) cos b.
inline TrigPolyMatrix coin_shift_walk_1d(double alpha, double beta, double gammaPhase) {
  return TrigPolyMatrix::constant(detail::su2(alpha, gammaPhase, beta), 1) * detail::shift_1d();
}

inline TrigPolyMatrix hadamard_walk() {
  return TrigPolyMatrix::constant(detail::hadamard_coin(), 1) * detail::shift_1d();
}

/// S H: coin applied before the shift. Same dispersion as H S; finite-time
/// position laws differ by O(1) sites.
inline TrigPolyMatrix hadamard_walk_coin_first() {
  return detail::shift_1d() * TrigPolyMatrix::constant(detail::hadamard_coin(), 1);
}

struct CoinParams {
  double theta = 0.0;
  double chi = 0.0;
  double phi = 0.0;
};

/// W = U2 S2 U1 S1 on Z^2 with S_j shifting along axis j.
inline TrigPolyMatrix walk_2d(const CoinParams& u1, const CoinParams& u2) {
  const auto c1 = TrigPolyMatrix::constant(detail::su2(u1.theta, u1.chi, u1.phi), 2);
  const auto c2 = TrigPolyMatrix::constant(detail::su2(u2.theta, u2.chi, u2.phi), 2);
  return (c2 * detail::shift_axis(2, 1) * c1 * detail::shift_axis(2, 0)).pruned();
}

/// Single unitary walk as a one-state model.
inline MarkovWalkModel unitary_model(const TrigPolyMatrix& w, std::string name = "unitary") {
  return MarkovWalkModel(ControlProcess(), {{w}}, std::move(name));
}

/// Single-state model with an arbitrary Kraus family.
inline MarkovWalkModel kraus_model(KrausFamily family, std::string name = "kraus") {
  return MarkovWalkModel(ControlProcess(), {std::move(family)}, std::move(name));
}

/// Hadamard coin HS, replaced by the reflection sigma_x S. Without rates the
/// reflection is drawn independently with probability epsilon; with rates
/// (m1, m2) the chain stays in the Hadamard state with probability m1 and in
/// the reflecting state with probability m2.
inline MarkovWalkModel hadamard_reflection_model(double epsilon, std::optional<std::pair<double, double>> markovRates = {}) {
  double m1 = 0.0, m2 = 0.0;
  if (markovRates) {
    m1 = markovRates->first;
    m2 = markovRates->second;
    detail::require(m1 >= 0.0 && m1 < 1.0 && m2 >= 0.0 && m2 < 1.0, "model.markov_rates",
                    "Markov rates must lie in [0,1)");
  } else {
    detail::require(epsilon >= 0.0 && epsilon <= 1.0, "model.epsilon", "epsilon must lie in [0,1]");
    m1 = 1.0 - epsilon;
    m2 = epsilon;
  }
  RMatrix t(2, 2);
  t << m1, 1.0 - m1, 1.0 - m2, m2;
  const auto s = detail::shift_1d();
  return MarkovWalkModel(ControlProcess(t),
                         {{TrigPolyMatrix::constant(detail::hadamard_coin(), 1) * s},
                          {TrigPolyMatrix::constant(detail::pauli_x(), 1) * s}},
                         "hadamard_reflection");
}

/// Kraus pair sqrt(eps) H S, sqrt(1-eps) H R(theta) S, R = diag(e^{i theta}, e^{-i theta}).
inline MarkovWalkModel dephased_hadamard_model(double theta, double epsilon) {
  detail::require(epsilon >= 0.0 && epsilon <= 1.0, "model.epsilon", "epsilon must lie in [0,1]");
  CMatrix r = CMatrix::Zero(2, 2);
  r(0, 0) = std::polar(1.0, theta);
  r(1, 1) = std::polar(1.0, -theta);
  const auto s = detail::shift_1d();
  const CMatrix h = detail::hadamard_coin();
  return kraus_model({TrigPolyMatrix::constant(std::sqrt(epsilon) * h, 1) * s,
                      TrigPolyMatrix::constant(std::sqrt(1.0 - epsilon) * h * r, 1) * s},
                     "dephased_hadamard");
}

using ScalarCoefficients = std::map<int, cplx>;

/// Coin-free Kraus family K_i(p) = sum_k a_ik e^{i p k}.
inline MarkovWalkModel scalar_kraus_model(const std::vector<ScalarCoefficients>& coefficients) {
  detail::require(!coefficients.empty(), "model.scalar", "no Kraus operators");
  int lo = 0, hi = 0;
  for (const auto& a : coefficients)
    for (const auto& [k, v] : a) {
      lo = std::min(lo, k);
      hi = std::max(hi, k);
    }
  for (int x = lo - hi; x <= hi - lo; ++x) {
    cplx c = 0.0;
    for (const auto& a : coefficients)
      for (const auto& [k, v] : a) {
        auto it = a.find(k + x);
        if (it != a.end()) c += std::conj(it->second) * v;
      }
    const double target = x == 0 ? 1.0 : 0.0;
    if (std::abs(c - target) > 1e-12)
      throw ValidationError("model.scalar_normalization",
                            "coefficient correlation at lag " + std::to_string(x) + " is " + std::to_string(std::abs(c)));
  }
  KrausFamily fam;
  for (const auto& a : coefficients) {
    TrigPolyMatrix k(1, 1);
    for (const auto& [off, v] : a) k.add_term({off}, CMatrix::Constant(1, 1, v));
    fam.push_back(k);
  }
  return kraus_model(std::move(fam), "scalar_kraus");
}

/// K1 = (1 + e^{ip})/2, K2 = (1 - e^{-ip})/2.
inline std::vector<ScalarCoefficients> halving_walk_coefficients() {
  return {{{0, 0.5}, {1, 0.5}}, {{0, 0.5}, {-1, -0.5}}};
}

/// K1 = (1 + W)/2, K2 = (1 - W)/2.
inline MarkovWalkModel symmetrized_pair(const TrigPolyMatrix& w) {
  detail::require(check_unitary(w, 1e-10).pass, "model.unitary", "symmetrized pair needs a unitary walk");
  const auto id = TrigPolyMatrix::identity(w.lattice_dim(), w.coin_dim());
  return kraus_model({((id + w) * cplx(0.5)).pruned(), ((id - w) * cplx(0.5)).pruned()}, "symmetrized_pair");
}

inline MomentumShiftModel momentum_shift_model(int n, int m) {
  detail::require(m >= 1, "model.momentum_shift", "denominator must be positive");
  detail::require(std::gcd(n, m) == 1 || (n == 0 && m == 1), "model.momentum_shift", "n and m must be coprime");
  MomentumShiftModel h;
  h.n = n;
  h.m = m;
  h.q = 2.0 * pi * n / m;
  return h;
}

/// Re-encodes a one-state family K_i = c_i U_i (U_i unitary) as a memoryless
/// control process choosing U_i with probability |c_i|^2.
inline MarkovWalkModel bernoulli_embedding(const MarkovWalkModel& model) {
  detail::require(model.state_count() == 1, "model.bernoulli_embedding", "needs a single control state");
  const auto& fam = model.channel(0);
  const int n = static_cast<int>(fam.size());
  RVector w(n);
  std::vector<KrausFamily> chans;
  const std::vector<double> p0(static_cast<std::size_t>(model.lattice_dim()), 0.0);
  for (int i = 0; i < n; ++i) {
    const CMatrix k0 = fam[static_cast<std::size_t>(i)].evaluate(p0);
    const double weight = (k0.adjoint() * k0).trace().real() / model.coin_dim();
    w(i) = weight;
    detail::require(weight > 0.0, "model.bernoulli_embedding", "zero Kraus operator");
    auto u = fam[static_cast<std::size_t>(i)] * cplx(1.0 / std::sqrt(weight));
    if (!check_unitary(u, 1e-10).pass)
      throw ValidationError("model.bernoulli_embedding", "Kraus operator is not a multiple of a unitary");
    chans.push_back({u});
  }
  w /= w.sum();
  RMatrix t(n, n);
  for (int g = 0; g < n; ++g) t.row(g) = w.transpose();
  return MarkovWalkModel(ControlProcess(t), std::move(chans), model.name() + "_embedded");
}

}  // namespace qwalk
