#pragma once

// Perturbation theory of the eigenvalue 1 of the momentum-space transition
// operator: drift, first-order eigenvector, diffusion matrix, next-order
// characteristic function, and closed-form analyzers for special families.

#include "qwalk/simulate.hpp"
#include "qwalk/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <atomic>
#include <exception>
#include <functional>
#include <optional>

namespace qwalk {

/// One d x d block per control state.
using BlockVector = std::vector<CMatrix>;

namespace detail {

inline CMatrix kron(const CMatrix& a, const CMatrix& b) {
  CMatrix r(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) r.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return r;
}

/// Column-major flattening of a block vector.
inline CVector flatten(const BlockVector& a) {
  const auto d = a.front().rows();
  CVector v(static_cast<Eigen::Index>(a.size()) * d * d);
  for (std::size_t g = 0; g < a.size(); ++g)
    v.segment(static_cast<Eigen::Index>(g) * d * d, d * d) = Eigen::Map<const CVector>(a[g].data(), d * d);
  return v;
}

inline BlockVector unflatten(const CVector& v, int states, int d) {
  BlockVector a(static_cast<std::size_t>(states));
  for (int g = 0; g < states; ++g) {
    CVector seg = v.segment(static_cast<Eigen::Index>(g) * d * d, d * d);
    a[static_cast<std::size_t>(g)] = Eigen::Map<CMatrix>(seg.data(), d, d);
  }
  return a;
}

/// Runs f(i) for i < n on all threads; the first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  std::exception_ptr err;
  std::atomic<bool> failed{false};
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    if (failed.load()) continue;
    try {
      f(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(qwalk_parallel_for)
      if (!failed.exchange(true)) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

/// Fixed momenta used where a check must hold for all p.
inline std::vector<std::vector<double>> probe_momenta(int s, int count = 6) {
  std::vector<std::vector<double>> out;
  for (int k = 0; k < count; ++k) {
    std::vector<double> p(static_cast<std::size_t>(s));
    for (int a = 0; a < s; ++a) p[static_cast<std::size_t>(a)] = wrap_angle(0.37 + 1.913 * k + 0.71 * a * (k + 1));
    out.push_back(p);
  }
  return out;
}

inline std::vector<double> unit(int s, int j) {
  std::vector<double> e(static_cast<std::size_t>(s), 0.0);
  e[static_cast<std::size_t>(j)] = 1.0;
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Transition operator

struct TransitionOperator {
  std::vector<double> p;
  std::vector<double> lambda;
  double epsilon = 0.0;
  int states = 1;
  int coinDim = 1;
  CMatrix matrix;  ///< acts on flatten(A), block g at offset g d^2
};

/// (W_eps A)(g) = sum_h m_g(h) sum_a K_ga(p)^* A(h) K_ga(p + eps lambda).
inline TransitionOperator build_transition(const MarkovWalkModel& model, std::span<const double> p,
                                           std::span<const double> lambda, double epsilon) {
  const int s = model.lattice_dim(), d = model.coin_dim(), G = model.state_count();
  detail::require(static_cast<int>(p.size()) == s && static_cast<int>(lambda.size()) == s, "perturb.build_transition",
                  "momentum and direction must have the lattice dimension");
  std::vector<double> q(p.begin(), p.end());
  for (int a = 0; a < s; ++a) q[static_cast<std::size_t>(a)] += epsilon * lambda[static_cast<std::size_t>(a)];
  TransitionOperator t;
  t.p.assign(p.begin(), p.end());
  t.lambda.assign(lambda.begin(), lambda.end());
  t.epsilon = epsilon;
  t.states = G;
  t.coinDim = d;
  const int n = d * d;
  t.matrix = CMatrix::Zero(G * n, G * n);
  const auto& m = model.control().transition();
  for (int g = 0; g < G; ++g) {
    CMatrix local = CMatrix::Zero(n, n);
    for (const auto& k : model.channel(g)) local += detail::kron(k.evaluate(q).transpose(), k.evaluate(p).adjoint());
    for (int h = 0; h < G; ++h)
      if (m(g, h) != 0.0) t.matrix.block(g * n, h * n, n, n) = m(g, h) * local;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Invariant state

struct InvariantState {
  RVector mbar;
  CMatrix rho;
  double minEigenvalue = 0.0;
  bool faithful = false;
};

/// Common fixed state of all channels rho -> sum_a K_ga rho K_ga^*, checked
/// at a fixed set of momenta, together with the stationary control law.
inline InvariantState invariant_state(const MarkovWalkModel& model) {
  const int d = model.coin_dim(), G = model.state_count(), s = model.lattice_dim();
  InvariantState st;
  st.mbar = model.control().stationary();
  const CMatrix id = CMatrix::Identity(d, d) / static_cast<double>(d);
  const auto probes = detail::probe_momenta(s);
  bool identityFixed = true;
  if (!model.unitary_flag()) {
    for (const auto& p : probes)
      for (int g = 0; g < G && identityFixed; ++g) {
        CMatrix img = CMatrix::Zero(d, d);
        for (const auto& k : model.channel(g)) {
          const CMatrix kp = k.evaluate(p);
          img += kp * id * kp.adjoint();
        }
        if ((img - id).cwiseAbs().maxCoeff() > 1e-12) identityFixed = false;
      }
  }
  if (identityFixed) {
    st.rho = id;
  } else {
    const int n = d * d;
    CMatrix stack(static_cast<Eigen::Index>(probes.size()) * G * n, n);
    Eigen::Index row = 0;
    for (const auto& p : probes)
      for (int g = 0; g < G; ++g) {
        CMatrix sch = -CMatrix::Identity(n, n);
        for (const auto& k : model.channel(g)) {
          const CMatrix kp = k.evaluate(p);
          sch += detail::kron(kp.conjugate(), kp);
        }
        stack.block(row, 0, n, n) = sch;
        row += n;
      }
    Eigen::JacobiSVD<CMatrix> svd(stack, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    std::vector<Eigen::Index> null;
    for (Eigen::Index k = 0; k < n; ++k)
      if (sv(k) < 1e-10 * std::max(1.0, sv(0))) null.push_back(k);
    if (null.empty()) throw ValidationError("perturb.invariant_state", "channels have no common fixed state");
    CMatrix basis(n, static_cast<Eigen::Index>(null.size()));
    for (std::size_t j = 0; j < null.size(); ++j) basis.col(static_cast<Eigen::Index>(j)) = svd.matrixV().col(null[j]);
    const CMatrix eye = CMatrix::Identity(d, d);
    const CVector proj = basis * (basis.adjoint() * Eigen::Map<const CVector>(eye.data(), n));
    CMatrix r = Eigen::Map<const CMatrix>(proj.data(), d, d);
    r = 0.5 * (r + r.adjoint()).eval();
    const cplx tr = r.trace();
    if (std::abs(tr) < 1e-12) throw ValidationError("perturb.invariant_state", "fixed space contains no state");
    st.rho = r / tr.real();
  }
  Eigen::SelfAdjointEigenSolver<CMatrix> es(st.rho);
  st.minEigenvalue = es.eigenvalues().minCoeff();
  st.faithful = st.minEigenvalue > 1e-10;
  return st;
}

// ---------------------------------------------------------------------------
// Assumption diagnostics

struct MomentumDiagnostics {
  std::vector<double> p;
  double gap = 0.0;        ///< 1 - largest modulus after removing one eigenvalue 1
  int multiplicity = 0;    ///< eigenvalues with |mu - 1| < 1e-9
  bool commutingKraus = false;
  int algebraRank = 0;     ///< rank of the span of Kraus words up to length 4
};

struct AssumptionReport {
  std::vector<MomentumDiagnostics> points;
  bool primitive = false;
  int minAlgebraRank = 0;
  bool spansAlgebra = false;
  bool faithfulState = false;
  std::string invariantStateError;
  double gapThreshold = 1e-8;
  bool pass = false;

  double min_gap() const {
    double g = std::numeric_limits<double>::infinity();
    for (const auto& pt : points) g = std::min(g, pt.gap);
    return g;
  }
};

namespace detail {

inline int kraus_algebra_rank(const std::vector<CMatrix>& ks, int d, int maxLength = 4) {
  std::vector<CMatrix> words{CMatrix::Identity(d, d)};
  std::vector<CMatrix> frontier = words;
  for (int len = 1; len <= maxLength; ++len) {
    std::vector<CMatrix> next;
    for (const auto& w : frontier)
      for (const auto& k : ks) next.push_back(w * k);
    words.insert(words.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  const int n = d * d;
  CMatrix span(n, static_cast<Eigen::Index>(words.size()));
  for (std::size_t j = 0; j < words.size(); ++j)
    span.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const CVector>(words[j].data(), n);
  Eigen::JacobiSVD<CMatrix> svd(span);
  const auto& sv = svd.singularValues();
  int r = 0;
  for (Eigen::Index k = 0; k < sv.size(); ++k)
    if (sv(k) > 1e-10 * std::max(1.0, sv(0))) ++r;
  return r;
}

inline bool kraus_commute(const std::vector<CMatrix>& ks, double tol = 1e-10) {
  for (std::size_t i = 0; i < ks.size(); ++i)
    for (std::size_t j = i + 1; j < ks.size(); ++j)
      if (operator_norm(ks[i] * ks[j] - ks[j] * ks[i]) > tol) return false;
  return true;
}

}  // namespace detail

inline AssumptionReport check_assumptions(const MarkovWalkModel& model, const std::vector<std::vector<double>>& pSamples,
                                          double gapThreshold = 1e-8) {
  const int s = model.lattice_dim(), d = model.coin_dim(), G = model.state_count();
  AssumptionReport rep;
  rep.gapThreshold = gapThreshold;
  rep.primitive = model.control().is_primitive();
  try {
    rep.faithfulState = invariant_state(model).faithful;
    if (!rep.faithfulState) rep.invariantStateError = "invariant state is not faithful";
  } catch (const Error& e) {
    rep.invariantStateError = e.what();
  }
  const std::vector<double> zero(static_cast<std::size_t>(s), 0.0);
  rep.points.resize(pSamples.size());
  detail::parallel_for(pSamples.size(), [&](std::size_t i) {
    const auto& p = pSamples[i];
    MomentumDiagnostics md;
    md.p = p;
    const auto t = build_transition(model, p, zero, 0.0);
    Eigen::ComplexEigenSolver<CMatrix> es(t.matrix, false);
    const CVector ev = es.eigenvalues();
    Eigen::Index one = 0;
    (ev.array() - 1.0).abs().minCoeff(&one);
    double second = 0.0;
    for (Eigen::Index k = 0; k < ev.size(); ++k) {
      if (std::abs(ev(k) - 1.0) < 1e-9) ++md.multiplicity;
      if (k != one) second = std::max(second, std::abs(ev(k)));
    }
    md.gap = 1.0 - second;
    std::vector<CMatrix> ks;
    for (int g = 0; g < G; ++g)
      for (const auto& k : model.channel(g)) ks.push_back(k.evaluate(p));
    md.commutingKraus = ks.size() > 1 && detail::kraus_commute(ks);
    md.algebraRank = detail::kraus_algebra_rank(ks, d);
    rep.points[i] = md;
  });
  rep.minAlgebraRank = d * d;
  bool pointsOk = true;
  for (const auto& md : rep.points) {
    rep.minAlgebraRank = std::min(rep.minAlgebraRank, md.algebraRank);
    if (md.multiplicity != 1 || md.gap <= gapThreshold || md.commutingKraus) pointsOk = false;
  }
  rep.spansAlgebra = rep.minAlgebraRank == d * d;
  rep.pass = pointsOk && rep.primitive && rep.spansAlgebra && rep.faithfulState;
  return rep;
}

// ---------------------------------------------------------------------------
// Perturbation solver

struct FirstOrder {
  std::vector<double> lambda;
  cplx mu1;            ///< first derivative of the eigenvalue, i lambda.v
  BlockVector A;       ///< first-order eigenvector correction
  double residual = 0.0;
  double skewDeviation = 0.0;
  double normalization = 0.0;  ///< |mbar x rhobar (A')|
};

struct SecondOrder {
  FirstOrder first;
  cplx mu2;            ///< second derivative of the eigenvalue
  cplx quadratic;      ///< lambda.s.lambda = -mu2 + mu1^2
};

struct Diffusion {
  std::vector<double> p;
  RVector v;
  CMatrix s;
  bool real = true;            ///< |Im s| < 1e-9
  bool psd = true;             ///< eigenvalues of Re s >= -1e-10
  double routeDeviation = std::numeric_limits<double>::quiet_NaN();  ///< unitary cross-check
  double maxResidual = 0.0;
  std::vector<SecondOrder> directions;  ///< e_j, then e_j + e_k for j < k
};

/// Holds a model, its invariant state and the derivative polynomials of all
/// Kraus operators. Methods evaluate the expansion at one momentum.
class PerturbationSolver {
public:
  explicit PerturbationSolver(const MarkovWalkModel& model) : model_(model), inv_(invariant_state(model)) {
    if (!inv_.faithful)
      throw ValidationError("perturb.invariant_state",
                            "invariant state is not faithful (min eigenvalue " + std::to_string(inv_.minEigenvalue) + ")");
    const int s = model_.lattice_dim();
    for (int g = 0; g < model_.state_count(); ++g) {
      std::vector<Jet> fam;
      for (const auto& k : model_.channel(g)) {
        Jet j{k, {}, {}};
        for (int a = 0; a < s; ++a) j.d1.push_back(derivative(k, a));
        for (int a = 0; a < s; ++a)
          for (int b = 0; b < s; ++b) j.d2.push_back(derivative(j.d1[static_cast<std::size_t>(a)], b));
        fam.push_back(std::move(j));
      }
      jets_.push_back(std::move(fam));
    }
  }

  const MarkovWalkModel& model() const noexcept { return model_; }
  const InvariantState& invariant() const noexcept { return inv_; }

  /// Kraus operators and lambda-directional derivatives at p.
  struct Local {
    std::vector<std::vector<CMatrix>> k, d1, d2;
  };

  Local local(std::span<const double> p, std::span<const double> lambda) const {
    const int s = model_.lattice_dim();
    detail::require(static_cast<int>(p.size()) == s && static_cast<int>(lambda.size()) == s, "perturb.momentum",
                    "momentum and direction must have the lattice dimension");
    Local l;
    for (const auto& fam : jets_) {
      std::vector<CMatrix> k, d1, d2;
      for (const auto& j : fam) {
        k.push_back(j.k.evaluate(p));
        const auto d = model_.coin_dim();
        CMatrix a = CMatrix::Zero(d, d), b = CMatrix::Zero(d, d);
        for (int x = 0; x < s; ++x) {
          const double lx = lambda[static_cast<std::size_t>(x)];
          if (lx == 0.0) continue;
          a += lx * j.d1[static_cast<std::size_t>(x)].evaluate(p);
          for (int y = 0; y < s; ++y) {
            const double ly = lambda[static_cast<std::size_t>(y)];
            if (ly != 0.0) b += lx * ly * j.d2[static_cast<std::size_t>(x * s + y)].evaluate(p);
          }
        }
        d1.push_back(a);
        d2.push_back(b);
      }
      l.k.push_back(std::move(k));
      l.d1.push_back(std::move(d1));
      l.d2.push_back(std::move(d2));
    }
    return l;
  }

  /// (Phi A)(g) = sum_h m_g(h) sum_a K_ga^* A(h) R_ga with R one of K, K', K''.
  BlockVector apply(const Local& l, int order, const BlockVector& a) const {
    const int G = model_.state_count(), d = model_.coin_dim();
    const auto& m = model_.control().transition();
    BlockVector out(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g) {
      CMatrix avg = CMatrix::Zero(d, d);
      for (int h = 0; h < G; ++h) avg += m(g, h) * a[static_cast<std::size_t>(h)];
      const auto& ks = l.k[static_cast<std::size_t>(g)];
      const auto& rs = order == 0 ? ks : order == 1 ? l.d1[static_cast<std::size_t>(g)] : l.d2[static_cast<std::size_t>(g)];
      CMatrix r = CMatrix::Zero(d, d);
      for (std::size_t al = 0; al < ks.size(); ++al) r += ks[al].adjoint() * avg * rs[al];
      out[static_cast<std::size_t>(g)] = r;
    }
    return out;
  }

  /// mbar x rhobar expectation.
  cplx phi(const BlockVector& a) const {
    cplx r = 0.0;
    for (std::size_t g = 0; g < a.size(); ++g) r += inv_.mbar(static_cast<Eigen::Index>(g)) * (inv_.rho * a[g]).trace();
    return r;
  }

  BlockVector ones() const {
    return BlockVector(static_cast<std::size_t>(model_.state_count()), CMatrix::Identity(model_.coin_dim(), model_.coin_dim()));
  }

  FirstOrder first_order(std::span<const double> p, std::span<const double> lambda) const {
    return first_order(local(p, lambda), p, lambda);
  }

  FirstOrder first_order(const Local& l, std::span<const double> p, std::span<const double> lambda) const {
    const int G = model_.state_count(), d = model_.coin_dim(), n = d * d;
    FirstOrder fo;
    fo.lambda.assign(lambda.begin(), lambda.end());
    const BlockVector w1 = apply(l, 1, ones());
    fo.mu1 = phi(w1);
    BlockVector rhs(static_cast<std::size_t>(G));
    for (int g = 0; g < G; ++g)
      rhs[static_cast<std::size_t>(g)] = fo.mu1 * CMatrix::Identity(d, d) - w1[static_cast<std::size_t>(g)];
    const std::vector<double> zero(lambda.size(), 0.0);
    const auto t = build_transition(model_, p, zero, 0.0);
    CMatrix sys = CMatrix::Zero(G * n + 1, G * n);
    sys.topRows(G * n) = t.matrix - CMatrix::Identity(G * n, G * n);
    for (int g = 0; g < G; ++g)
      for (int j = 0; j < d; ++j)
        for (int i = 0; i < d; ++i) sys(G * n, g * n + i + j * d) = inv_.mbar(g) * inv_.rho(j, i);
    CVector b = CVector::Zero(G * n + 1);
    b.head(G * n) = detail::flatten(rhs);
    Eigen::ColPivHouseholderQR<CMatrix> qr(sys);
    if (qr.rank() < G * n) {
      Eigen::ComplexEigenSolver<CMatrix> es(t.matrix, false);
      std::vector<double> mods;
      for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k) mods.push_back(std::abs(es.eigenvalues()(k)));
      std::sort(mods.rbegin(), mods.rend());
      const double gap = mods.size() > 1 ? 1.0 - mods[1] : 1.0;
      throw NumericalError("perturb.first_order", "eigenvalue 1 is not isolated (gap " + std::to_string(gap) + ")");
    }
    const CVector x = qr.solve(b);
    fo.residual = (sys * x - b).norm();
    if (fo.residual > 1e-9)
      throw NumericalError("perturb.first_order",
                           "first-order equation has no solution (residual " + std::to_string(fo.residual) + ")");
    fo.A = detail::unflatten(x, G, d);
    for (const auto& blk : fo.A) fo.skewDeviation = std::max(fo.skewDeviation, (blk + blk.adjoint()).cwiseAbs().maxCoeff());
    fo.normalization = std::abs(phi(fo.A));
    return fo;
  }

  SecondOrder second_order(std::span<const double> p, std::span<const double> lambda) const {
    const Local l = local(p, lambda);
    SecondOrder so;
    so.first = first_order(l, p, lambda);
    so.mu2 = 2.0 * phi(apply(l, 1, so.first.A)) + phi(apply(l, 2, ones()));
    so.quadratic = -so.mu2 + so.first.mu1 * so.first.mu1;
    return so;
  }

  /// v(p) = -i sum mbar sum_a tr rhobar K^* grad K.
  RVector velocity(std::span<const double> p) const {
    const int s = model_.lattice_dim();
    RVector v(s);
    for (int j = 0; j < s; ++j) {
      const auto e = detail::unit(s, j);
      const cplx mu1 = phi(apply(local(p, e), 1, ones()));
      if (std::abs(mu1.real()) > 1e-9)
        throw NumericalError("perturb.ballistic_velocity",
                             "velocity has imaginary part " + std::to_string(mu1.real()));
      v(j) = mu1.imag();
    }
    return v;
  }

  /// Unitary route: lambda.s.lambda = mbar x rhobar(|A'|^2 - |W(A')|^2).
  cplx quadratic_unitary(std::span<const double> p, const FirstOrder& fo) const {
    const std::vector<double> zero(fo.lambda.size(), 0.0);
    const Local l = local(p, zero);
    const BlockVector wa = apply(l, 0, fo.A);
    BlockVector x(fo.A.size()), y(fo.A.size());
    for (std::size_t g = 0; g < fo.A.size(); ++g) {
      x[g] = fo.A[g].adjoint() * fo.A[g];
      y[g] = wa[g].adjoint() * wa[g];
    }
    return phi(x) - phi(y);
  }

  Diffusion diffusion(std::span<const double> p) const {
    const int s = model_.lattice_dim();
    Diffusion df;
    df.p.assign(p.begin(), p.end());
    df.s = CMatrix::Zero(s, s);
    df.v = RVector::Zero(s);
    std::vector<cplx> diag(static_cast<std::size_t>(s));
    for (int j = 0; j < s; ++j) {
      const auto e = detail::unit(s, j);
      auto so = second_order(p, e);
      if (std::abs(so.first.mu1.real()) > 1e-9)
        throw NumericalError("perturb.ballistic_velocity",
                             "velocity has imaginary part " + std::to_string(so.first.mu1.real()));
      df.v(j) = so.first.mu1.imag();
      df.s(j, j) = so.quadratic;
      df.maxResidual = std::max(df.maxResidual, so.first.residual);
      df.directions.push_back(std::move(so));
    }
    for (int j = 0; j < s; ++j)
      for (int k = j + 1; k < s; ++k) {
        std::vector<double> e(static_cast<std::size_t>(s), 0.0);
        e[static_cast<std::size_t>(j)] = e[static_cast<std::size_t>(k)] = 1.0;
        auto so = second_order(p, e);
        df.s(j, k) = df.s(k, j) = 0.5 * (so.quadratic - df.s(j, j) - df.s(k, k));
        df.maxResidual = std::max(df.maxResidual, so.first.residual);
        df.directions.push_back(std::move(so));
      }
    df.real = df.s.imag().cwiseAbs().maxCoeff() < 1e-9;
    Eigen::SelfAdjointEigenSolver<RMatrix> es(0.5 * (df.s.real() + df.s.real().transpose()));
    df.psd = es.eigenvalues().minCoeff() >= -1e-10;
    if (model_.unitary_flag()) {
      double dev = 0.0;
      for (const auto& so : df.directions)
        dev = std::max(dev, std::abs(quadratic_unitary(p, so.first) - so.quadratic));
      df.routeDeviation = dev;
      if (dev > 1e-8)
        throw NumericalError("perturb.diffusion_matrix",
                             "second-order routes disagree by " + std::to_string(dev));
      if (!df.psd) throw NumericalError("perturb.diffusion_matrix", "diffusion matrix of a unitary model is not PSD");
    }
    return df;
  }

private:
  struct Jet {
    TrigPolyMatrix k;
    std::vector<TrigPolyMatrix> d1, d2;
  };
  MarkovWalkModel model_;
  InvariantState inv_;
  std::vector<std::vector<Jet>> jets_;
};

inline RVector ballistic_velocity(const MarkovWalkModel& model, std::span<const double> p) {
  return PerturbationSolver(model).velocity(p);
}

inline RVector ballistic_velocity(const MarkovWalkModel& model, double p) {
  return ballistic_velocity(model, std::span<const double>(&p, 1));
}

/// v = sum_g mbar(g) ind(W_g) / d, cross-checked against the perturbative
/// velocity at 8 momenta.
inline RVector mean_index_velocity(const MarkovWalkModel& model) {
  detail::require(model.unitary_flag(), "perturb.mean_index_velocity", "needs one unitary per control state");
  const int s = model.lattice_dim(), d = model.coin_dim();
  const auto& mbar = model.control().stationary();
  RVector v = RVector::Zero(s);
  for (int g = 0; g < model.state_count(); ++g) {
    const auto ind = index(model.channel(g).front());
    for (int a = 0; a < s; ++a) v(a) += mbar(g) * ind.components[static_cast<std::size_t>(a)] / static_cast<double>(d);
  }
  const PerturbationSolver solver(model);
  for (const auto& p : detail::probe_momenta(s, 8)) {
    const double dev = (solver.velocity(p) - v).cwiseAbs().maxCoeff();
    if (dev > 1e-9)
      throw NumericalError("perturb.mean_index_velocity", "index velocity differs from drift by " + std::to_string(dev));
  }
  return v;
}

inline FirstOrder first_order(const MarkovWalkModel& model, std::span<const double> p, std::span<const double> lambda) {
  return PerturbationSolver(model).first_order(p, lambda);
}

inline Diffusion diffusion_matrix(const MarkovWalkModel& model, std::span<const double> p) {
  return PerturbationSolver(model).diffusion(p);
}

inline Diffusion diffusion_matrix(const MarkovWalkModel& model, double p) {
  return diffusion_matrix(model, std::span<const double>(&p, 1));
}

// ---------------------------------------------------------------------------
// Memoryless control

struct BernoulliDiffusion {
  CMatrix s;
  RVector v;
  std::vector<CMatrix> X;  ///< averaged first-order correction, per axis
  double maxResidual = 0.0;
};

/// Eliminates the control: V0 = sum_g mbar(g) V_g acts on d x d matrices,
/// V0(X) - X = mu' - V0'(1), tr rhobar X = 0, mu'' = 2 tr rhobar V0'(X) + tr rhobar V0''(1).
inline BernoulliDiffusion bernoulli_diffusion(const MarkovWalkModel& model, std::span<const double> p) {
  detail::require(model.control().is_bernoulli(1e-12), "perturb.bernoulli_diffusion",
                  "control process has memory");
  const int s = model.lattice_dim(), d = model.coin_dim(), G = model.state_count(), n = d * d;
  const auto inv = invariant_state(model);
  detail::require(inv.faithful, "perturb.invariant_state", "invariant state is not faithful");
  const RVector mbar = model.control().transition().row(0).transpose();
  const CMatrix& rho = inv.rho;
  const CMatrix id = CMatrix::Identity(d, d);

  std::vector<TrigPolyMatrix> ks;
  std::vector<double> w;
  for (int g = 0; g < G; ++g)
    for (const auto& k : model.channel(g)) {
      ks.push_back(k);
      w.push_back(mbar(g));
    }
  std::vector<CMatrix> k0;
  for (const auto& k : ks) k0.push_back(k.evaluate(p));
  CMatrix sys = CMatrix::Zero(n + 1, n);
  for (std::size_t a = 0; a < ks.size(); ++a) sys.topRows(n) += w[a] * detail::kron(k0[a].transpose(), k0[a].adjoint());
  sys.topRows(n) -= CMatrix::Identity(n, n);
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < d; ++i) sys(n, i + j * d) = rho(j, i);
  Eigen::ColPivHouseholderQR<CMatrix> qr(sys);
  if (qr.rank() < n) throw NumericalError("perturb.bernoulli_diffusion", "eigenvalue 1 of V0 is not isolated");

  auto solve_dir = [&](const std::vector<double>& lam, CMatrix& xOut, double& res) {
    std::vector<CMatrix> k1, k2;
    for (const auto& k : ks) {
      const auto dk = directional_derivative(k, lam);
      k1.push_back(dk.evaluate(p));
      k2.push_back(directional_derivative(dk, lam).evaluate(p));
    }
    auto v0 = [&](const CMatrix& x, const std::vector<CMatrix>& r) {
      CMatrix out = CMatrix::Zero(d, d);
      for (std::size_t a = 0; a < ks.size(); ++a) out += w[a] * k0[a].adjoint() * x * r[a];
      return out;
    };
    const CMatrix v1 = v0(id, k1);
    const cplx mu1 = (rho * v1).trace();
    const CMatrix rhs = mu1 * id - v1;
    CVector b = CVector::Zero(n + 1);
    b.head(n) = Eigen::Map<const CVector>(rhs.data(), n);
    const CVector x = qr.solve(b);
    res = (sys * x - b).norm();
    if (res > 1e-9)
      throw NumericalError("perturb.bernoulli_diffusion", "reduced equation has no solution (residual " + std::to_string(res) + ")");
    xOut = Eigen::Map<const CMatrix>(x.data(), d, d);
    const cplx mu2 = 2.0 * (rho * v0(xOut, k1)).trace() + (rho * v0(id, k2)).trace();
    return std::pair<cplx, cplx>{mu1, -mu2 + mu1 * mu1};
  };

  BernoulliDiffusion bd;
  bd.s = CMatrix::Zero(s, s);
  bd.v = RVector::Zero(s);
  for (int j = 0; j < s; ++j) {
    CMatrix x;
    double res = 0.0;
    const auto [mu1, q] = solve_dir(detail::unit(s, j), x, res);
    bd.v(j) = mu1.imag();
    bd.s(j, j) = q;
    bd.X.push_back(x);
    bd.maxResidual = std::max(bd.maxResidual, res);
  }
  for (int j = 0; j < s; ++j)
    for (int k = j + 1; k < s; ++k) {
      std::vector<double> e(static_cast<std::size_t>(s), 0.0);
      e[static_cast<std::size_t>(j)] = e[static_cast<std::size_t>(k)] = 1.0;
      CMatrix x;
      double res = 0.0;
      const auto q = solve_dir(e, x, res).second;
      bd.s(j, k) = bd.s(k, j) = 0.5 * (q - bd.s(j, j) - bd.s(k, k));
      bd.maxResidual = std::max(bd.maxResidual, res);
    }
  return bd;
}

inline BernoulliDiffusion bernoulli_diffusion(const MarkovWalkModel& model, double p) {
  return bernoulli_diffusion(model, std::span<const double>(&p, 1));
}

// ---------------------------------------------------------------------------
// Diffusive limit

/// Mixture sum_p w(p) N(0, s(p)) over the analysis grid.
struct GaussianMixture {
  int latticeDim = 1;
  RVector v;
  std::vector<double> weight;
  std::vector<RMatrix> covariance;
  double mass = 0.0;

  double density(std::span<const double> x) const {
    const int s = latticeDim;
    Eigen::Map<const RVector> xv(x.data(), s);
    double f = 0.0;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      Eigen::LDLT<RMatrix> ldlt(covariance[i]);
      const double det = ldlt.vectorD().prod();
      const double quad = xv.dot(ldlt.solve(xv));
      f += weight[i] * std::exp(-0.5 * quad) / std::sqrt(std::pow(2.0 * pi, s) * det);
    }
    return f;
  }

  double density(double x) const { return density(std::span<const double>(&x, 1)); }

  RMatrix mean_covariance() const {
    RMatrix c = RMatrix::Zero(latticeDim, latticeDim);
    for (std::size_t i = 0; i < weight.size(); ++i) c += weight[i] * covariance[i];
    return c;
  }
};

/// Limit law of (Q - v t)/sqrt(t). Requires a constant drift and a real,
/// positive definite diffusion matrix on the grid.
inline GaussianMixture gaussian_limit(const MarkovWalkModel& model, const InitialState& rho, int nGrid = 64) {
  detail::require(rho.coin_dim() == model.coin_dim() && rho.lattice_dim() == model.lattice_dim(),
                  "perturb.gaussian_limit", "initial state does not match the model");
  const int s = model.lattice_dim();
  const PerturbationSolver solver(model);
  const auto axis = momentum_grid(nGrid);
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(nGrid), s);
  std::vector<Diffusion> dfs(pts);
  detail::parallel_for(pts, [&](std::size_t i) { dfs[i] = solver.diffusion(grid_point(axis, i, s)); });
  GaussianMixture gm;
  gm.latticeDim = s;
  gm.v = dfs.front().v;
  for (std::size_t i = 0; i < pts; ++i) {
    const double dev = (dfs[i].v - gm.v).cwiseAbs().maxCoeff();
    if (dev > 1e-8)
      throw ValidationError("perturb.gaussian_limit", "drift depends on momentum (deviation " + std::to_string(dev) + ")");
    if (!dfs[i].real) throw ValidationError("perturb.gaussian_limit", "diffusion matrix is complex");
    const RMatrix c = dfs[i].s.real();
    Eigen::SelfAdjointEigenSolver<RMatrix> es(c);
    if (es.eigenvalues().minCoeff() <= 1e-12)
      throw ValidationError("perturb.gaussian_limit", "diffusion matrix is singular");
    const double w = rho.density(grid_point(axis, i, s)).trace().real() / static_cast<double>(pts);
    gm.weight.push_back(w);
    gm.covariance.push_back(c);
    gm.mass += w;
  }
  if (std::abs(gm.mass - 1.0) > 1e-6)
    throw NumericalError("perturb.gaussian_limit", "mixture weights sum to " + std::to_string(gm.mass));
  return gm;
}

inline std::vector<double> gaussian_limit_density(const MarkovWalkModel& model, const InitialState& rho,
                                                  const std::vector<double>& xGrid, int nGrid = 64) {
  const auto gm = gaussian_limit(model, rho, nGrid);
  detail::require(gm.latticeDim == 1, "perturb.gaussian_limit", "grid form needs one lattice dimension");
  std::vector<double> f;
  for (double x : xGrid) f.push_back(gm.density(x));
  return f;
}

// ---------------------------------------------------------------------------
// Next order in ballistic scaling

struct NextOrderOptions {
  int nGrid = 256;
  bool linearized = false;  ///< e^{i lambda v}(1 - lambda s lambda / 2t) in place of the Gaussian factor
};

/// Per-momentum drift, diffusion matrix and averaged first-order corrections.
struct NextOrderTable {
  int latticeDim = 1;
  int coinDim = 1;
  std::vector<std::vector<double>> p;
  std::vector<RVector> v;
  std::vector<CMatrix> s;
  std::vector<std::vector<CMatrix>> X;  ///< sum_g mbar(g) A'_{e_j}(g)
};

inline NextOrderTable next_order_table(const MarkovWalkModel& model, int nGrid = 256) {
  const int s = model.lattice_dim();
  const PerturbationSolver solver(model);
  const auto axis = momentum_grid(nGrid);
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(nGrid), s);
  NextOrderTable tab;
  tab.latticeDim = s;
  tab.coinDim = model.coin_dim();
  tab.p.resize(pts);
  tab.v.resize(pts);
  tab.s.resize(pts);
  tab.X.resize(pts);
  const RVector& mbar = solver.invariant().mbar;
  detail::parallel_for(pts, [&](std::size_t i) {
    const auto p = grid_point(axis, i, s);
    const auto df = solver.diffusion(p);
    tab.p[i] = p;
    tab.v[i] = df.v;
    tab.s[i] = df.s;
    for (int j = 0; j < s; ++j) {
      const auto& a = df.directions[static_cast<std::size_t>(j)].first.A;
      CMatrix x = CMatrix::Zero(tab.coinDim, tab.coinDim);
      for (std::size_t g = 0; g < a.size(); ++g) x += mbar(static_cast<Eigen::Index>(g)) * a[g];
      tab.X[i].push_back(x);
    }
  });
  return tab;
}

/// C_t(lambda) = mean_p e^{i lambda.v - lambda.s.lambda/2t}
///               (C0(lambda/t, p) + tr rho(p) X_lambda(p) / t),
/// C0(mu, p) = tr rho(p + mu, p).
inline cplx next_order_cf(const NextOrderTable& tab, const InitialState& rho, std::span<const double> lambda, double t,
                          bool linearized = false) {
  detail::require(rho.is_pure(), "perturb.next_order_cf", "initial state needs an accessible kernel (pure state)");
  detail::require(t > 0.0, "perturb.next_order_cf", "time must be positive");
  const int s = tab.latticeDim;
  Eigen::Map<const RVector> lam(lambda.data(), s);
  cplx acc = 0.0;
  std::vector<double> shifted(static_cast<std::size_t>(s));
  for (std::size_t i = 0; i < tab.p.size(); ++i) {
    const auto& p = tab.p[i];
    for (int a = 0; a < s; ++a) shifted[static_cast<std::size_t>(a)] = p[static_cast<std::size_t>(a)] + lam(a) / t;
    const cplx c0 = rho.kernel(shifted, p).trace();
    CMatrix x = CMatrix::Zero(tab.coinDim, tab.coinDim);
    for (int a = 0; a < s; ++a) x += lam(a) * tab.X[i][static_cast<std::size_t>(a)];
    const cplx corr = (rho.density(p) * x).trace();
    const cplx q = lam.cast<cplx>().dot(tab.s[i] * lam.cast<cplx>());
    const cplx phase = std::exp(I * lam.dot(tab.v[i]));
    const cplx env = linearized ? phase * (1.0 - q / (2.0 * t)) : phase * std::exp(-q / (2.0 * t));
    acc += env * (c0 + corr / t);
  }
  return acc / static_cast<double>(tab.p.size());
}

inline cplx next_order_cf(const MarkovWalkModel& model, const InitialState& rho, std::span<const double> lambda, double t,
                          const NextOrderOptions& opt = {}) {
  return next_order_cf(next_order_table(model, opt.nGrid), rho, lambda, t, opt.linearized);
}

struct NextOrderDensityOptions {
  double cutoff = 0.0;     ///< Lambda in e^{-(lambda/Lambda)^2}; 0 selects t
  double lambdaMax = 0.0;  ///< integration range; 0 selects 6 Lambda
  int nodes = 4096;
  bool linearized = false;
};

/// Density of Q(t)/t recovered from the next-order characteristic function
/// (one lattice dimension) with a Gaussian cutoff.
inline std::vector<double> next_order_density(const NextOrderTable& tab, const InitialState& rho, double t,
                                              const std::vector<double>& xGrid, const NextOrderDensityOptions& opt = {}) {
  detail::require(tab.latticeDim == 1, "perturb.next_order_density", "one lattice dimension only");
  const double cut = opt.cutoff > 0.0 ? opt.cutoff : t;
  const double L = opt.lambdaMax > 0.0 ? opt.lambdaMax : 6.0 * cut;
  const int n = opt.nodes;
  const double h = 2.0 * L / n;
  std::vector<double> lam(static_cast<std::size_t>(n));
  std::vector<cplx> c(static_cast<std::size_t>(n));
  detail::parallel_for(static_cast<std::size_t>(n), [&](std::size_t k) {
    const double l = -L + (static_cast<double>(k) + 0.5) * h;
    lam[k] = l;
    c[k] = next_order_cf(tab, rho, std::span<const double>(&l, 1), t, opt.linearized) * std::exp(-(l / cut) * (l / cut));
  });
  std::vector<double> f;
  for (double x : xGrid) {
    cplx acc = 0.0;
    for (int k = 0; k < n; ++k) acc += std::exp(-I * lam[static_cast<std::size_t>(k)] * x) * c[static_cast<std::size_t>(k)];
    f.push_back((acc * h).real() / (2.0 * pi));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Coin-free Kraus walks

/// v(p) = sum_x gamma_x e^{ipx}, gamma_x = sum_i sum_k conj(a_{i,k-x}) a_{ik} k.
struct ScalarVelocity {
  std::map<int, cplx> gamma;

  double operator()(double p) const {
    cplx v = 0.0;
    for (const auto& [x, g] : gamma) v += g * std::polar(1.0, p * x);
    return v.real();
  }
};

inline ScalarVelocity scalar_velocity(const MarkovWalkModel& model) {
  detail::require(model.coin_dim() == 1 && model.lattice_dim() == 1, "perturb.scalar_velocity",
                  "needs a one-dimensional coin-free model");
  const auto coeffs = detail::scalar_coefficients_of(model);
  ScalarVelocity sv;
  for (const auto& a : coeffs)
    for (const auto& [k, ak] : a)
      for (const auto& [k2, ak2] : a) sv.gamma[k - k2] += std::conj(ak2) * ak * static_cast<double>(k);
  // second route: -i sum_i conj(K_i) K_i'
  std::vector<TrigPolyMatrix> dk;
  for (const auto& k : model.channel(0)) dk.push_back(derivative(k, 0));
  for (double p : momentum_grid(64)) {
    cplx v = 0.0;
    for (std::size_t i = 0; i < dk.size(); ++i)
      v += -I * std::conj(model.channel(0)[i].evaluate(p)(0, 0)) * dk[i].evaluate(p)(0, 0);
    if (std::abs(v - sv(p)) > 1e-10 || std::abs(v.imag()) > 1e-10)
      throw NumericalError("perturb.scalar_velocity", "coefficient and derivative routes disagree at p = " + std::to_string(p));
  }
  return sv;
}

// ---------------------------------------------------------------------------
// Commuting normal Kraus operators

struct CommutingVelocity {
  int latticeDim = 1;
  int coinDim = 1;
  int nGrid = 0;
  std::vector<double> axis;
  std::vector<CMatrix> vectors;        ///< joint eigenvectors psi_alpha as columns
  std::vector<RMatrix> velocity;       ///< d x s, row alpha
  std::vector<char> regular;
  std::vector<std::size_t> irregular;  ///< points where two joint eigenvalue tuples coincide

  std::size_t points() const { return detail::ipow(static_cast<std::size_t>(nGrid), latticeDim); }
  std::vector<double> momentum(std::size_t pt) const { return grid_point(axis, pt, latticeDim); }
};

/// Flattens the model into one commuting family sqrt(mbar(g)) K_ga.
inline KrausFamily commuting_family(const MarkovWalkModel& model) {
  detail::require(model.state_count() == 1 || model.control().is_bernoulli(1e-12), "perturb.commuting_kraus",
                  "control process has memory");
  const RVector w = model.control().transition().row(0).transpose();
  KrausFamily fam;
  for (int g = 0; g < model.state_count(); ++g)
    for (const auto& k : model.channel(g)) fam.push_back(k * cplx(std::sqrt(w(g))));
  return fam;
}

/// V_tau = -i sum_{j,alpha} conj(k_{j alpha}) d k_{j alpha}/dp_tau |psi_alpha><psi_alpha|.
inline CommutingVelocity commuting_kraus_velocity(const MarkovWalkModel& model, int nGrid) {
  const auto fam = commuting_family(model);
  const int s = model.lattice_dim(), d = model.coin_dim();
  std::vector<std::vector<TrigPolyMatrix>> dk(fam.size());
  for (std::size_t j = 0; j < fam.size(); ++j)
    for (int a = 0; a < s; ++a) dk[j].push_back(derivative(fam[j], a));
  std::vector<cplx> coef;
  for (std::size_t j = 0; j < fam.size(); ++j) coef.push_back(std::polar(1.0 + 0.37 * static_cast<double>(j), 0.91 + 1.7 * static_cast<double>(j)));

  CommutingVelocity cv;
  cv.latticeDim = s;
  cv.coinDim = d;
  cv.nGrid = nGrid;
  cv.axis = momentum_grid(nGrid);
  const std::size_t pts = cv.points();
  cv.vectors.resize(pts);
  cv.velocity.resize(pts);
  cv.regular.assign(pts, 1);
  detail::parallel_for(pts, [&](std::size_t pt) {
    const auto p = cv.momentum(pt);
    std::vector<CMatrix> ks;
    for (const auto& k : fam) ks.push_back(k.evaluate(p));
    for (const auto& k : ks)
      if (detail::operator_norm(k * k.adjoint() - k.adjoint() * k) > 1e-10)
        throw ValidationError("perturb.commuting_kraus", "Kraus operator is not normal");
    if (!detail::kraus_commute(ks)) throw ValidationError("perturb.commuting_kraus", "Kraus operators do not commute");
    CMatrix comb = CMatrix::Zero(d, d);
    for (std::size_t j = 0; j < ks.size(); ++j) comb += coef[j] * ks[j];
    Eigen::ComplexSchur<CMatrix> schur(comb);
    const CMatrix u = schur.matrixU();
    CMatrix kev(static_cast<Eigen::Index>(ks.size()), d);
    for (std::size_t j = 0; j < ks.size(); ++j)
      for (int al = 0; al < d; ++al) kev(static_cast<Eigen::Index>(j), al) = u.col(al).dot(ks[j] * u.col(al));
    RMatrix vel(d, s);
    for (int a = 0; a < s; ++a) {
      for (int al = 0; al < d; ++al) {
        cplx acc = 0.0;
        for (std::size_t j = 0; j < ks.size(); ++j)
          acc += std::conj(kev(static_cast<Eigen::Index>(j), al)) * u.col(al).dot(dk[j][static_cast<std::size_t>(a)].evaluate(p) * u.col(al));
        acc *= -I;
        if (std::abs(acc.imag()) > 1e-9)
          throw NumericalError("perturb.commuting_kraus", "velocity has imaginary part " + std::to_string(acc.imag()));
        vel(al, a) = acc.real();
      }
    }
    for (int al = 0; al < d; ++al)
      for (int be = al + 1; be < d; ++be)
        if (std::abs(kev.col(al).dot(kev.col(be)) - 1.0) < 1e-8) cv.regular[pt] = 0;
    cv.vectors[pt] = u;
    cv.velocity[pt] = vel;
  });
  for (std::size_t pt = 0; pt < pts; ++pt)
    if (!cv.regular[pt]) cv.irregular.push_back(pt);
  return cv;
}

/// Pushforward of tr(rho(p) P_alpha(p)) under the commuting-Kraus velocities.
inline VelocityMeasure commuting_velocity_measure(const CommutingVelocity& cv, const InitialState& rho) {
  detail::require(rho.coin_dim() == cv.coinDim && rho.lattice_dim() == cv.latticeDim, "perturb.commuting_kraus",
                  "initial state does not match the model");
  VelocityMeasure vm;
  vm.latticeDim = cv.latticeDim;
  const double norm = 1.0 / static_cast<double>(cv.points());
  for (std::size_t pt = 0; pt < cv.points(); ++pt) {
    const CMatrix r = rho.density(cv.momentum(pt));
    for (int al = 0; al < cv.coinDim; ++al) {
      const CVector psi = cv.vectors[pt].col(al);
      const double w = psi.dot(r * psi).real() * norm;
      if (!cv.regular[pt]) {
        vm.excludedMass += w;
        continue;
      }
      vm.velocity.push_back(cv.velocity[pt].row(al).transpose());
      vm.weight.push_back(w);
    }
  }
  return vm;
}

// ---------------------------------------------------------------------------
// Momentum-shift walk

struct MomentumShiftAsymptotics {
  Scaling scaling = Scaling::Diffusive;
  std::string law;        ///< "ballistic", "P1" or "P2"
  double variance = 0.0;  ///< of the limit law in its scaling
  std::vector<double> density;
};

/// q = 0: ballistic law of v(p) = cos(p)/2. q = pi: mixture P2 from the
/// double integral. Otherwise: Gaussian P1 of variance 3/8.
inline MomentumShiftAsymptotics momentum_shift_asymptotics(const MomentumShiftModel& model, const InitialState& rho,
                                                           const std::vector<double>& xGrid, int nGrid = 512,
                                                           int lambdaNodes = 2048) {
  detail::require(rho.coin_dim() == 1 && rho.lattice_dim() == 1, "perturb.momentum_shift",
                  "initial state must be coin-free and one-dimensional");
  MomentumShiftAsymptotics out;
  auto weight = [&](double p) { return rho.density(p)(0, 0).real(); };
  if (model.zeroShift()) {
    out.scaling = Scaling::Ballistic;
    out.law = "ballistic";
    double var = 0.0;
    for (double p : momentum_grid(nGrid)) var += weight(p) * 0.25 * std::cos(p) * std::cos(p);
    out.variance = var / nGrid;
    for (double x : xGrid) {
      if (std::abs(x) >= 0.5) {
        out.density.push_back(0.0);
        continue;
      }
      const double p0 = std::acos(2.0 * x);
      out.density.push_back((weight(p0) + weight(-p0)) / (pi * std::sqrt(1.0 - 4.0 * x * x)));
    }
    return out;
  }
  out.scaling = Scaling::Diffusive;
  if (!model.period2()) {
    out.law = "P1";
    out.variance = 3.0 / 8.0;
    for (double x : xGrid) out.density.push_back(2.0 / std::sqrt(3.0 * pi) * std::exp(-4.0 * x * x / 3.0));
    return out;
  }
  out.law = "P2";
  const auto grid = momentum_grid(nGrid);
  std::vector<double> w, c2;
  double var = 0.0;
  for (double p : grid) {
    w.push_back(weight(p) / nGrid);
    c2.push_back(std::cos(2.0 * p));
    var += w.back() * (3.0 - c2.back()) / 8.0;
  }
  out.variance = var;
  // e^{-3 l^2/16} mean_p rho(p) e^{l^2 cos(2p)/16} decays at least like e^{-l^2/8}
  const double L = 18.0;
  const double h = 2.0 * L / lambdaNodes;
  std::vector<double> lam, cf;
  for (int k = 0; k < lambdaNodes; ++k) {
    const double l = -L + (k + 0.5) * h;
    double acc = 0.0;
    for (std::size_t j = 0; j < grid.size(); ++j) acc += w[j] * std::exp(l * l * c2[j] / 16.0);
    lam.push_back(l);
    cf.push_back(std::exp(-3.0 * l * l / 16.0) * acc);
  }
  for (double x : xGrid) {
    double acc = 0.0;
    for (std::size_t k = 0; k < lam.size(); ++k) acc += std::cos(lam[k] * x) * cf[k];
    out.density.push_back(acc * h / (2.0 * pi));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct PerturbationReport {
  std::vector<double> p;
  RVector v;
  std::vector<FirstOrder> firstOrder;  ///< per axis
  std::vector<cplx> secondOrder;       ///< mu'' per axis
  CMatrix s;
  bool sReal = true;
  bool psd = true;
  InvariantState invariant;
  double gap = 0.0;
  std::vector<double> residuals;
};

inline PerturbationReport perturbation_report(const PerturbationSolver& solver, std::span<const double> p) {
  const auto df = solver.diffusion(p);
  PerturbationReport r;
  r.p.assign(p.begin(), p.end());
  r.v = df.v;
  r.s = df.s;
  r.sReal = df.real;
  r.psd = df.psd;
  r.invariant = solver.invariant();
  for (int j = 0; j < solver.model().lattice_dim(); ++j) {
    const auto& so = df.directions[static_cast<std::size_t>(j)];
    r.firstOrder.push_back(so.first);
    r.secondOrder.push_back(so.mu2);
  }
  for (const auto& so : df.directions) r.residuals.push_back(so.first.residual);
  const auto diag = check_assumptions(solver.model(), {r.p});
  r.gap = diag.points.front().gap;
  return r;
}

}  // namespace qwalk
