#include <gtest/gtest.h>

#include "qwalk/perturb.hpp"
#include "random_models.hpp"

using namespace qwalk;

namespace {

std::vector<double> one(double p) { return {p}; }

InitialState coin_up() { return InitialState::localized(1, CVector::Unit(2, 0)); }

CMatrix pauli(int k) {
  CMatrix m(2, 2);
  if (k == 1) m << 0, 1, 1, 0;
  if (k == 2) m << 0, -I, I, 0;
  if (k == 3) m << 1, 0, 0, -1;
  return m;
}

// Quotient from the dephased closed form with the lambda^2 factor dropped.
double dephased_quotient(double p, double theta, double eps) {
  const double c = std::cos(p + theta);
  return (c * c + eps * std::sin(2 * p + theta) * std::sin(theta)) / (eps * (1 - eps) * std::sin(theta) * std::sin(theta));
}

MarkovWalkModel shift_or_rest() {
  RMatrix m(2, 2);
  m << 0.5, 0.5, 0.5, 0.5;
  return MarkovWalkModel(ControlProcess(m),
                         {{TrigPolyMatrix::diagonal_shift({{1}, {1}})}, {TrigPolyMatrix::identity(1, 2)}}, "shift_or_rest");
}

MarkovWalkModel pure_shift_scalar() { return scalar_kraus_model({{{1, 1.0}}}); }

MarkovWalkModel damped_walk(double gamma) {
  CMatrix a(2, 2), b(2, 2);
  a << 1, 0, 0, std::sqrt(1 - gamma);
  b << 0, std::sqrt(gamma), 0, 0;
  const auto s = detail::shift_1d();
  return kraus_model({TrigPolyMatrix::constant(a, 1) * s, TrigPolyMatrix::constant(b, 1) * s}, "damped");
}

}  // namespace

TEST(TransitionOperator, Dimension) {
  const auto t = build_transition(hadamard_reflection_model(0.3), one(0.4), one(1.0), 0.1);
  EXPECT_EQ(t.matrix.rows(), 8);
  EXPECT_EQ(t.matrix.cols(), 8);
}

TEST(TransitionOperator, BlockIdentityFixedAtZero) {
  for (const auto& m : {hadamard_reflection_model(0.3), hadamard_reflection_model(0, std::pair{0.9, 0.3}),
                        dephased_hadamard_model(0.7, 0.4)}) {
    const auto t = build_transition(m, one(1.1), one(1.0), 0.0);
    const CVector ones = detail::flatten(BlockVector(static_cast<std::size_t>(m.state_count()), CMatrix::Identity(2, 2)));
    EXPECT_LT((t.matrix * ones - ones).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TransitionOperator, SimpleEigenvalueOne) {
  const auto t = build_transition(hadamard_reflection_model(0.5), one(0.7), one(1.0), 0.0);
  Eigen::ComplexEigenSolver<CMatrix> es(t.matrix, false);
  int near = 0;
  for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k) {
    const cplx mu = es.eigenvalues()(k);
    if (std::abs(mu - 1.0) < 1e-9) ++near;
    else EXPECT_LT(std::abs(mu), 1.0 - 1e-6);
  }
  EXPECT_EQ(near, 1);
}

TEST(Assumptions, HadamardReflectionPasses) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-pi, pi);
  std::vector<std::vector<double>> ps;
  for (int k = 0; k < 16; ++k) ps.push_back(one(u(rng)));
  const auto rep = check_assumptions(hadamard_reflection_model(0.2), ps);
  EXPECT_TRUE(rep.pass);
  EXPECT_GT(rep.min_gap(), 0.0);
  for (const auto& pt : rep.points) EXPECT_EQ(pt.multiplicity, 1);
}

TEST(Assumptions, SingleCoinIsDegenerate) {
  const auto rep = check_assumptions(hadamard_reflection_model(0.0), {one(0.3), one(-1.7)});
  EXPECT_FALSE(rep.pass);
  for (const auto& pt : rep.points) EXPECT_GE(pt.multiplicity, 2);
}

TEST(Assumptions, DephasingAtPiCommutes) {
  for (double eps : {0.2, 0.6}) {
    const auto rep = check_assumptions(dephased_hadamard_model(pi, eps), {one(0.3), one(2.1)});
    EXPECT_FALSE(rep.pass);
    for (const auto& pt : rep.points) EXPECT_TRUE(pt.commutingKraus);
    EXPECT_LT(rep.minAlgebraRank, 4);
  }
}

TEST(InvariantState, UnitaryIsTracial) {
  const auto st = invariant_state(hadamard_reflection_model(0.2));
  EXPECT_LT((st.rho - CMatrix::Identity(2, 2) / 2.0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(st.mbar(0), 0.8, 1e-12);
  EXPECT_NEAR(st.mbar(1), 0.2, 1e-12);
  EXPECT_TRUE(st.faithful);
}

TEST(InvariantState, ScalarIsOne) {
  const auto st = invariant_state(scalar_kraus_model(halving_walk_coefficients()));
  EXPECT_NEAR(std::abs(st.rho(0, 0) - 1.0), 0.0, 1e-14);
}

TEST(InvariantState, MarkovStationaryLaw) {
  const auto st = invariant_state(hadamard_reflection_model(0, std::pair{0.9, 0.3}));
  // stationary law of [[0.9, 0.1], [0.7, 0.3]]
  EXPECT_NEAR(st.mbar(0), 0.875, 1e-12);
  EXPECT_NEAR(st.mbar(1), 0.125, 1e-12);
}

TEST(InvariantState, NonFaithfulReported) {
  const auto st = invariant_state(damped_walk(0.4));
  EXPECT_FALSE(st.faithful);
  EXPECT_NEAR(std::abs(st.rho(0, 0)), 1.0, 1e-9);
  EXPECT_THROW(PerturbationSolver{damped_walk(0.4)}, ValidationError);
  const auto rep = check_assumptions(damped_walk(0.4), {one(0.5)});
  EXPECT_FALSE(rep.faithfulState);
  EXPECT_FALSE(rep.pass);
}

TEST(BallisticVelocity, HadamardReflectionIsZero) {
  for (double p : {-2.5, -0.3, 0.9, 2.2}) EXPECT_NEAR(ballistic_velocity(hadamard_reflection_model(0.3), p)(0), 0.0, 1e-12);
}

TEST(BallisticVelocity, HalvingWalk) {
  const auto m = scalar_kraus_model(halving_walk_coefficients());
  for (double p : momentum_grid(17)) EXPECT_NEAR(ballistic_velocity(m, p)(0), std::cos(p) / 2, 1e-13);
}

TEST(BallisticVelocity, PureShift) {
  EXPECT_NEAR(ballistic_velocity(pure_shift_scalar(), 0.4)(0), 1.0, 1e-14);
  EXPECT_NEAR(ballistic_velocity(unitary_model(TrigPolyMatrix::diagonal_shift({{1}, {1}})), 1.3)(0), 1.0, 1e-14);
}

TEST(MeanIndexVelocity, Examples) {
  EXPECT_NEAR(mean_index_velocity(hadamard_reflection_model(0.3))(0), 0.0, 1e-12);
  EXPECT_NEAR(mean_index_velocity(shift_or_rest())(0), 0.5, 1e-12);
  EXPECT_NEAR(mean_index_velocity(unitary_model(hadamard_walk()))(0), 0.0, 1e-12);
}

TEST(MeanIndexVelocity, ConstantDriftOnRandomModels) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-pi, pi);
  for (int k = 0; k < 8; ++k) {
    const auto m = randomized::random_unitary_mixture(rng, true);
    const double v = mean_index_velocity(m)(0);
    const PerturbationSolver solver(m);
    for (int j = 0; j < 32; ++j) EXPECT_NEAR(solver.velocity(one(u(rng)))(0), v, 1e-9);
  }
}

TEST(FirstOrder, HadamardReflectionPauliCoefficients) {
  for (double eps : {0.2, 0.5}) {
    for (double p : {0.3, 1.1, -2.0}) {
      const auto bd = bernoulli_diffusion(hadamard_reflection_model(eps), p);
      const CMatrix& x = bd.X[0];
      EXPECT_NEAR(std::abs(x.trace()), 0.0, 1e-12);
      EXPECT_NEAR(std::abs((pauli(1) * x).trace() / 2.0 - I / (2 * eps)), 0.0, 1e-10);
      EXPECT_NEAR(std::abs((pauli(2) * x).trace() / 2.0 - I * std::tan(p) / (2 * eps)), 0.0, 1e-9);
      EXPECT_NEAR(std::abs((pauli(3) * x).trace() / 2.0 - I / (2 * eps)), 0.0, 1e-10);
    }
  }
}

TEST(FirstOrder, VanishesForScalarWalks) {
  for (const auto& m : {scalar_kraus_model(halving_walk_coefficients()), pure_shift_scalar()}) {
    const auto fo = first_order(m, one(0.8), one(1.0));
    for (const auto& blk : fo.A) EXPECT_LT(blk.cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FirstOrder, SkewHermitianAndNormalized) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-pi, pi);
  for (int k = 0; k < 10; ++k) {
    const auto m = k % 2 ? randomized::random_unitary_mixture(rng) : randomized::random_kraus_mixture(rng);
    const auto fo = first_order(m, one(u(rng)), one(1.0));
    EXPECT_LT(fo.skewDeviation, 1e-9);
    EXPECT_LT(fo.normalization, 1e-10);
    EXPECT_LT(fo.residual, 1e-9);
    EXPECT_LT(std::abs(fo.mu1.real()), 1e-10);
  }
}

TEST(Diffusion, HadamardReflectionBernoulli) {
  for (double eps : {0.1, 0.2, 0.5, 0.8})
    for (double p : {-1.0, 0.4, 2.9}) {
      const auto df = diffusion_matrix(hadamard_reflection_model(eps), p);
      EXPECT_NEAR(df.s(0, 0).real(), (1 - eps) / eps, 1e-9);
      EXPECT_TRUE(df.real);
      EXPECT_LT(df.routeDeviation, 1e-8);
    }
}

TEST(Diffusion, HadamardReflectionMarkov) {
  EXPECT_NEAR(diffusion_matrix(hadamard_reflection_model(0, std::pair{0.9, 0.3}), 0.7).s(0, 0).real(), 10.5, 1e-9);
  // general two-rate law ((1-m2)/(1-m1)) (m1+m2)/(2-m1-m2)
  for (auto [m1, m2] : {std::pair{0.2, 0.6}, std::pair{0.5, 0.5}, std::pair{0.05, 0.95}}) {
    const double expect = (1 - m2) / (1 - m1) * (m1 + m2) / (2 - m1 - m2);
    EXPECT_NEAR(diffusion_matrix(hadamard_reflection_model(0, std::pair{m1, m2}), -0.4).s(0, 0).real(), expect, 1e-9);
  }
}

TEST(Diffusion, DephasedClosedFormMinusOne) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> th(0.2, pi - 0.2), ep(0.1, 0.9), pp(-pi, pi);
  for (int k = 0; k < 12; ++k) {
    const double theta = th(rng), eps = ep(rng), p = pp(rng);
    const auto df = diffusion_matrix(dephased_hadamard_model(theta, eps), p);
    EXPECT_NEAR(df.s(0, 0).real(), dephased_quotient(p, theta, eps) - 1.0, 1e-8);
    EXPECT_NEAR(df.s(0, 0).imag(), 0.0, 1e-10);
  }
  for (double p : {-2.0, 0.1, 1.4}) EXPECT_NEAR(diffusion_matrix(dephased_hadamard_model(pi / 2, 0.5), p).s(0, 0).real(), 1.0, 1e-10);
}

TEST(Diffusion, DephasedMatchesExactVariance) {
  const auto m = dephased_hadamard_model(pi / 3, 0.3);
  double mean = 0.0;
  for (double p : momentum_grid(128)) mean += diffusion_matrix(m, p).s(0, 0).real();
  mean /= 128;
  CVector c(2);
  c << 1 / std::sqrt(2.0), I / std::sqrt(2.0);
  const auto em = exact_moments(m, InitialState::localized(1, c), {1000});
  EXPECT_NEAR(em.variance(0) / 1000, mean, 0.01);
}

TEST(Diffusion, PositiveOnRandomUnitaryMixtures) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-pi, pi);
  for (int k = 0; k < 10; ++k) {
    const auto m = randomized::random_unitary_mixture(rng, k % 3 == 0);
    for (int j = 0; j < 4; ++j) {
      const auto df = diffusion_matrix(m, u(rng));
      EXPECT_GE(df.s(0, 0).real(), -1e-10);
      EXPECT_LT(df.routeDeviation, 1e-8);
      EXPECT_LT(std::abs(df.s(0, 0).imag()), 1e-10);
    }
  }
}

TEST(Diffusion, TwoDimensionalSymmetricPsd) {
  const auto w = walk_2d({0.3, 1.1, 0.7}, {-0.4, 0.2, 1.2});
  RMatrix t(2, 2);
  t << 0.6, 0.4, 0.3, 0.7;
  CMatrix x(2, 2);
  x << 0, 1, 1, 0;
  const auto w2 = TrigPolyMatrix::constant(x, 2) * w;
  const MarkovWalkModel m2(ControlProcess(t), {{w}, {w2}});
  const std::vector<double> p{0.4, -1.3};
  const auto df = diffusion_matrix(m2, p);
  EXPECT_LT(std::abs(df.s(0, 1) - df.s(1, 0)), 1e-14);
  Eigen::SelfAdjointEigenSolver<RMatrix> es(df.s.real());
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
  EXPECT_LT(df.routeDeviation, 1e-8);
  // polarization: quadratic form in a generic direction
  const std::vector<double> lam{0.7, -1.9};
  const auto so = PerturbationSolver(m2).second_order(p, lam);
  Eigen::Vector2cd l(0.7, -1.9);
  EXPECT_NEAR(std::abs(so.quadratic - l.dot(df.s * l)), 0.0, 1e-9);
}

TEST(Diffusion, ScalarWalkIsComplex) {
  const auto m = scalar_kraus_model(halving_walk_coefficients());
  for (double p : {-2.0, 0.3, 1.1}) {
    const auto df = diffusion_matrix(m, p);
    const cplx expect = cplx(2 - std::cos(p) * std::cos(p), 2 * std::sin(p)) / 4.0;
    EXPECT_NEAR(std::abs(df.s(0, 0) - expect), 0.0, 1e-12);
    EXPECT_FALSE(df.real);
  }
}

TEST(BernoulliDiffusion, HadamardReflection) {
  EXPECT_NEAR(bernoulli_diffusion(hadamard_reflection_model(0.5), 0.3).s(0, 0).real(), 1.0, 1e-10);
}

TEST(BernoulliDiffusion, ReductionConsistency) {
  const auto m = dephased_hadamard_model(pi / 3, 0.3);
  const double full = diffusion_matrix(m, 0.4).s(0, 0).real();
  EXPECT_NEAR(bernoulli_diffusion(m, 0.4).s(0, 0).real(), full, 1e-9);
  EXPECT_NEAR(diffusion_matrix(bernoulli_embedding(m), 0.4).s(0, 0).real(), full, 1e-9);
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(-pi, pi);
  for (int k = 0; k < 6; ++k) {
    const auto km = randomized::random_kraus_mixture(rng);
    const auto em = bernoulli_embedding(km);
    const double p = u(rng);
    const cplx a = diffusion_matrix(em, p).s(0, 0);
    EXPECT_NEAR(std::abs(bernoulli_diffusion(em, p).s(0, 0) - a), 0.0, 1e-9);
    EXPECT_NEAR(std::abs(bernoulli_diffusion(km, p).s(0, 0) - a), 0.0, 1e-9);
  }
  for (double eps : {0.2, 0.7}) {
    const auto hr = hadamard_reflection_model(eps);
    EXPECT_NEAR(std::abs(bernoulli_diffusion(hr, 1.2).s(0, 0) - diffusion_matrix(hr, 1.2).s(0, 0)), 0.0, 1e-9);
  }
}

TEST(BernoulliDiffusion, ScalarWalk) {
  const auto bd = bernoulli_diffusion(scalar_kraus_model(halving_walk_coefficients()), 0.9);
  EXPECT_NEAR(bd.s(0, 0).real(), (2 - std::cos(0.9) * std::cos(0.9)) / 4, 1e-12);
  EXPECT_NEAR(bd.s(0, 0).imag(), std::sin(0.9) / 2, 1e-12);
}

TEST(BernoulliDiffusion, RejectsMemory) {
  EXPECT_THROW(bernoulli_diffusion(hadamard_reflection_model(0, std::pair{0.9, 0.3}), 0.1), ValidationError);
}

namespace {

cplx eigenvalue_near_one(const MarkovWalkModel& m, const std::vector<double>& p, const std::vector<double>& lam, double eps) {
  const auto t = build_transition(m, p, lam, eps);
  Eigen::ComplexEigenSolver<CMatrix> es(t.matrix, false);
  Eigen::Index best = 0;
  (es.eigenvalues().array() - 1.0).abs().minCoeff(&best);
  return es.eigenvalues()(best);
}

}  // namespace

TEST(EigenvalueExpansion, MatchesTransitionOperator) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-pi, pi), l(0.3, 2.0);
  const double eps = 1e-4;
  int checked = 0;
  while (checked < 20) {
    const auto m = checked % 4 == 3 ? randomized::random_kraus_mixture(rng) : randomized::random_unitary_mixture(rng, checked % 2 == 1);
    const auto p = one(u(rng));
    const auto lam = one(l(rng));
    if (check_assumptions(m, {p}).points.front().gap < 0.05) continue;
    const auto so = PerturbationSolver(m).second_order(p, lam);
    const cplx predicted = 1.0 + eps * so.first.mu1 + 0.5 * eps * eps * so.mu2;
    EXPECT_LT(std::abs(eigenvalue_near_one(m, p, lam, eps) - predicted), 5e-11) << "model " << checked;
    ++checked;
  }
}

TEST(EigenvalueExpansion, RemainderIsThirdOrder) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-pi, pi), l(0.3, 2.0);
  for (int k = 0; k < 20; ++k) {
    const auto m = k % 4 == 3 ? randomized::random_kraus_mixture(rng) : randomized::random_unitary_mixture(rng, k % 2 == 1);
    const auto p = one(u(rng));
    const auto lam = one(l(rng));
    const auto so = PerturbationSolver(m).second_order(p, lam);
    auto remainder = [&](double eps) {
      return std::abs(eigenvalue_near_one(m, p, lam, eps) - (1.0 + eps * so.first.mu1 + 0.5 * eps * eps * so.mu2));
    };
    // an O(eps^2) error would shrink only 100-fold
    const double coarse = remainder(1e-3), fine = remainder(1e-4);
    if (coarse < 1e-10) continue;
    EXPECT_LT(fine, 5e-3 * coarse) << "model " << k;
  }
}

TEST(GaussianLimit, HadamardReflectionDensity) {
  for (double eps : {0.2, 0.5}) {
    const std::vector<double> xs{-3.0, -1.0, 0.0, 0.5, 2.0};
    const auto f = gaussian_limit_density(hadamard_reflection_model(eps), coin_up(), xs, 32);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double expect = std::sqrt(eps / (2 * pi * (1 - eps))) * std::exp(-x * x * eps / (2 * (1 - eps)));
      EXPECT_NEAR(f[i], expect, 1e-10);
    }
  }
}

TEST(GaussianLimit, NormalizedMixture) {
  const auto gm = gaussian_limit(dephased_hadamard_model(pi / 3, 0.3), coin_up(), 64);
  EXPECT_NEAR(gm.mass, 1.0, 1e-6);
  double integral = 0.0;
  for (int k = 0; k < 4000; ++k) integral += gm.density(-20.0 + (k + 0.5) * 0.01) * 0.01;
  EXPECT_NEAR(integral, 1.0, 1e-6);
}

TEST(GaussianLimit, RejectsMomentumDependentDrift) {
  EXPECT_THROW(gaussian_limit(scalar_kraus_model(halving_walk_coefficients()), InitialState::localized(1, CVector::Ones(1))),
               ValidationError);
}

TEST(GaussianLimit, CharacteristicFunctionLimit) {
  const double t = 1e6;
  for (const auto& m : {hadamard_reflection_model(0.3), dephased_hadamard_model(pi / 3, 0.3),
                        hadamard_reflection_model(0, std::pair{0.7, 0.4})}) {
    for (double lam : {0.5, 1.0, 2.0}) {
      const auto so = PerturbationSolver(m).second_order(one(0.6), one(lam));
      const double v = so.first.mu1.imag() / lam;
      const cplx power = std::exp(t * std::log(1.0 + so.first.mu1 / std::sqrt(t) + so.mu2 / (2 * t)));
      const cplx lhs = power * std::exp(-I * lam * v * std::sqrt(t));
      const cplx rhs = std::exp((so.mu2 + lam * lam * v * v) / 2.0);
      EXPECT_LT(std::abs(lhs - rhs), 1e-4);
    }
  }
}

TEST(NextOrder, NormalizedAtZero) {
  const auto tab = next_order_table(hadamard_reflection_model(0.3), 32);
  const double z = 0.0;
  EXPECT_NEAR(std::abs(next_order_cf(tab, coin_up(), std::span<const double>(&z, 1), 10) - 1.0), 0.0, 1e-12);
}

TEST(NextOrder, HalvingWalkBesselForm) {
  const auto tab = next_order_table(scalar_kraus_model(halving_walk_coefficients()), 256);
  const auto psi = InitialState::localized(1, CVector::Ones(1));
  const double t = 10;
  for (double l : {0.0, 0.7, 3.0, 9.5, 20.0}) {
    const cplx c = next_order_cf(tab, psi, std::span<const double>(&l, 1), t, true);
    const double expect = ((8 * t - l * l) * std::cyl_bessel_j(0.0, l / 2) - 2 * l * std::cyl_bessel_j(1.0, l / 2)) / (8 * t);
    EXPECT_NEAR(std::abs(c - expect), 0.0, 1e-12) << l;
  }
}

TEST(NextOrder, HadamardReflectionShape) {
  const double eps = 0.5, t = 10;
  const auto tab = next_order_table(hadamard_reflection_model(eps), 64);
  std::vector<double> xs;
  for (int k = 0; k <= 300; ++k) xs.push_back(-1.5 + 0.01 * k);
  NextOrderDensityOptions opt;
  opt.cutoff = 1e4;
  opt.lambdaMax = 40;
  const auto f = next_order_density(tab, coin_up(), t, xs, opt);
  double sf = 0, sg = 0;
  std::vector<double> g;
  for (double x : xs) g.push_back((1 + x / (2 * (1 - eps))) * std::exp(-t * x * x * eps / (2 * (1 - eps))));
  for (std::size_t i = 0; i < xs.size(); ++i) sf += f[i], sg += g[i];
  EXPECT_NEAR(sf * 0.01, 1.0, 1e-4);
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(f[i] / sf, g[i] / sg, 1e-7);
}

TEST(NextOrder, MeanMatchesExactEvolution) {
  // first moment of the 1/t correction: E Q -> 1/(2 eps) from the coin-up state
  const double eps = 0.5;
  const auto tab = next_order_table(hadamard_reflection_model(eps), 64);
  const double h = 1e-4;
  const cplx cp = next_order_cf(tab, coin_up(), std::span<const double>(&h, 1), 1.0);
  const double mh = -h;
  const cplx cm = next_order_cf(tab, coin_up(), std::span<const double>(&mh, 1), 1.0);
  const double meanQ = ((cp - cm) / (2.0 * h * I)).real();
  EXPECT_NEAR(meanQ, 1 / (2 * eps), 1e-6);
  const auto em = exact_moments(hadamard_reflection_model(eps), coin_up(), {2000});
  EXPECT_NEAR(em.mean[0], meanQ, 0.02);
}

TEST(ScalarVelocity, HalvingWalk) {
  const auto m = scalar_kraus_model(halving_walk_coefficients());
  const auto v = scalar_velocity(m);
  for (double p : momentum_grid(23)) {
    EXPECT_NEAR(v(p), std::cos(p) / 2, 1e-13);
    EXPECT_NEAR(v(p), ballistic_velocity(m, p)(0), 1e-10);
  }
}

TEST(ScalarVelocity, SingleShift) {
  const auto v = scalar_velocity(pure_shift_scalar());
  EXPECT_NEAR(v(0.3), 1.0, 1e-14);
}

TEST(ScalarVelocity, MirroredCoefficients) {
  std::vector<ScalarCoefficients> mirrored;
  for (const auto& a : halving_walk_coefficients()) {
    ScalarCoefficients b;
    for (const auto& [k, c] : a) b[-k] = c;
    mirrored.push_back(b);
  }
  const auto v = scalar_velocity(scalar_kraus_model(halving_walk_coefficients()));
  const auto vm = scalar_velocity(scalar_kraus_model(mirrored));
  for (double p : momentum_grid(13)) EXPECT_NEAR(vm(p), -v(-p), 1e-13);
}

TEST(CommutingKraus, SymmetrizedPairHalvesVelocity) {
  const auto cv = commuting_kraus_velocity(symmetrized_pair(hadamard_walk()), 64);
  EXPECT_TRUE(cv.irregular.empty());
  for (std::size_t pt = 0; pt < cv.points(); ++pt) {
    const auto sp = spectrum_at(hadamard_walk(), cv.momentum(pt));
    std::vector<double> a{cv.velocity[pt](0, 0), cv.velocity[pt](1, 0)}, b{sp.velocity(0, 0) / 2, sp.velocity(1, 0) / 2};
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_NEAR(a[0], b[0], 1e-9);
    EXPECT_NEAR(a[1], b[1], 1e-9);
  }
}

TEST(CommutingKraus, IdentityPairIsStatic) {
  const auto cv = commuting_kraus_velocity(symmetrized_pair(TrigPolyMatrix::identity(1, 2)), 16);
  for (const auto& v : cv.velocity) EXPECT_LT(v.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CommutingKraus, WeightedSumOfVelocities) {
  const auto w = hadamard_walk();
  const double eta = 0.3;
  const auto m = kraus_model({w * cplx(std::sqrt(eta)), (w * w) * cplx(std::sqrt(1 - eta))});
  const auto cv = commuting_kraus_velocity(m, 32);
  for (std::size_t pt = 0; pt < cv.points(); pt += 3) {
    const auto sp = spectrum_at(w, cv.momentum(pt));
    std::vector<double> a{cv.velocity[pt](0, 0), cv.velocity[pt](1, 0)};
    std::vector<double> b{(eta + 2 * (1 - eta)) * sp.velocity(0, 0), (eta + 2 * (1 - eta)) * sp.velocity(1, 0)};
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_NEAR(a[0], b[0], 1e-9);
    EXPECT_NEAR(a[1], b[1], 1e-9);
  }
}

TEST(CommutingKraus, MeasureHasUnitMass) {
  const auto cv = commuting_kraus_velocity(symmetrized_pair(hadamard_walk()), 256);
  const auto vm = commuting_velocity_measure(cv, coin_up());
  double mass = vm.excludedMass;
  for (double w : vm.weight) mass += w;
  EXPECT_NEAR(mass, 1.0, 1e-12);
  const auto h = histogram(vm, 40);
  EXPECT_NEAR(h.mass, 1.0, 1e-12);
}

TEST(CommutingKraus, RejectsNonCommuting) {
  const auto s = detail::shift_1d();
  const auto m = kraus_model({TrigPolyMatrix::constant(std::sqrt(0.5) * detail::hadamard_coin(), 1) * s,
                              TrigPolyMatrix::constant(std::sqrt(0.5) * detail::pauli_x(), 1) * s});
  EXPECT_THROW(commuting_kraus_velocity(m, 8), ValidationError);
}

TEST(MomentumShift, GenericShiftIsGaussian) {
  const auto a = momentum_shift_asymptotics(momentum_shift_model(1, 32), InitialState::localized(1, CVector::Ones(1)),
                                            {0.0, 0.5, 1.0});
  EXPECT_EQ(a.law, "P1");
  EXPECT_EQ(a.scaling, Scaling::Diffusive);
  EXPECT_NEAR(a.variance, 0.375, 1e-15);
  EXPECT_NEAR(a.density[0], 2 / std::sqrt(3 * pi), 1e-14);
  EXPECT_NEAR(a.density[2], 2 / std::sqrt(3 * pi) * std::exp(-4.0 / 3), 1e-14);
}

TEST(MomentumShift, HalfShiftMixture) {
  const std::vector<double> xs{0.0, 0.3, 0.8, 1.5, 2.5};
  const auto uni = momentum_shift_asymptotics(momentum_shift_model(1, 2), InitialState::localized(1, CVector::Ones(1)), xs);
  EXPECT_EQ(uni.law, "P2");
  EXPECT_NEAR(uni.variance, 0.375, 1e-12);
  // rho(p) = 1 + cos 2p
  std::map<Offset, CVector> amps{{{0}, CVector::Constant(1, 1 / std::sqrt(2.0))}, {{2}, CVector::Constant(1, 1 / std::sqrt(2.0))}};
  const auto two = momentum_shift_asymptotics(momentum_shift_model(1, 2), InitialState::pure(amps), xs);
  EXPECT_NEAR(two.variance, 5.0 / 16, 1e-12);
  const auto grid = momentum_grid(2048);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double u = 0, w = 0;
    for (double p : grid) {
      const double var = (3 - std::cos(2 * p)) / 8;
      const double g = std::exp(-xs[i] * xs[i] / (2 * var)) / std::sqrt(2 * pi * var);
      u += g / grid.size();
      w += (1 + std::cos(2 * p)) * g / grid.size();
    }
    EXPECT_NEAR(uni.density[i], u, 1e-9);
    EXPECT_NEAR(two.density[i], w, 1e-9);
  }
}

TEST(MomentumShift, ZeroShiftIsBallistic) {
  const auto a = momentum_shift_asymptotics(momentum_shift_model(0, 1), InitialState::localized(1, CVector::Ones(1)),
                                            {-0.3, 0.0, 0.2, 0.6});
  EXPECT_EQ(a.scaling, Scaling::Ballistic);
  EXPECT_NEAR(a.density[1], 2 / pi, 1e-12);
  EXPECT_NEAR(a.density[2], 2 / (pi * std::sqrt(1 - 0.16)), 1e-12);
  EXPECT_EQ(a.density[3], 0.0);
  EXPECT_NEAR(a.variance, 0.125, 1e-12);
}

TEST(Report, CollectsPerMomentumData) {
  const PerturbationSolver solver(hadamard_reflection_model(0.25));
  const auto r = perturbation_report(solver, one(0.5));
  EXPECT_NEAR(r.s(0, 0).real(), 3.0, 1e-9);
  EXPECT_NEAR(r.v(0), 0.0, 1e-12);
  ASSERT_EQ(r.firstOrder.size(), 1u);
  EXPECT_LT(r.firstOrder[0].skewDeviation, 1e-9);
  EXPECT_GT(r.gap, 0.0);
  for (double res : r.residuals) EXPECT_LT(res, 1e-9);
  EXPECT_NEAR(std::abs(r.secondOrder[0] + 3.0), 0.0, 1e-9);
}
