#include <gtest/gtest.h>

#include "qwalk/simulate.hpp"

using namespace qwalk;

namespace {

InitialState up_at_origin() { return InitialState::localized(1, CVector::Unit(2, 0)); }

TrigPolyMatrix reflection_walk() {
  CMatrix x(2, 2);
  x << 0, 1, 1, 0;
  return TrigPolyMatrix::constant(x, 1) * TrigPolyMatrix::diagonal_shift({{1}, {-1}});
}

// Position-space application (K psi)(x) = sum_k a_k psi(x - k), enumerated
// over every Kraus sequence.
std::map<int, double> brute_force_scalar(const std::vector<ScalarCoefficients>& coeffs, int t) {
  std::map<int, double> out;
  const int nk = static_cast<int>(coeffs.size());
  int total = 1;
  for (int i = 0; i < t; ++i) total *= nk;
  for (int seq = 0; seq < total; ++seq) {
    std::map<int, cplx> psi{{0, 1.0}};
    int code = seq;
    for (int step = 0; step < t; ++step) {
      const auto& a = coeffs[static_cast<std::size_t>(code % nk)];
      code /= nk;
      std::map<int, cplx> next;
      for (const auto& [x, v] : psi)
        for (const auto& [k, c] : a) next[x + k] += c * v;
      psi = next;
    }
    for (const auto& [x, v] : psi) out[x] += std::norm(v);
  }
  return out;
}

}  // namespace

TEST(Simulate, HadamardTwoSteps) {
  const auto d = evolve_unitary(hadamard_walk(), up_at_origin(), 2);
  ASSERT_EQ(d.probs.size(), 2u);
  EXPECT_NEAR(d.probs.at({0}), 0.5, 1e-14);
  EXPECT_NEAR(d.probs.at({2}), 0.5, 1e-14);
}

TEST(Simulate, ZeroStepsIsInitial) {
  CVector a(2), b(2);
  a << 0.6, 0.0;
  b << 0.0, 0.8;
  const auto st = InitialState::pure({{{-1}, a}, {{3}, b}});
  const auto d = evolve_unitary(hadamard_walk(), st, 0);
  EXPECT_NEAR(d.probs.at({-1}), 0.36, 1e-14);
  EXPECT_NEAR(d.probs.at({3}), 0.64, 1e-14);
  EXPECT_EQ(d.probs.size(), 2u);
}

TEST(Simulate, ReflectionWalkStaysLocal) {
  for (int t = 0; t <= 50; t += 7) {
    const auto d = evolve_unitary(reflection_walk(), up_at_origin(), t);
    for (const auto& [x, p] : d.probs) EXPECT_LE(std::abs(x[0]), 1) << "t=" << t;
    EXPECT_NEAR(d.total(), 1.0, 1e-12);
  }
}

TEST(Simulate, ProbabilityConservedAndSupportBounded) {
  const auto w = coin_shift_walk_1d(0.3, 0.8, -0.2);
  for (int t : {1, 5, 33, 120}) {
    const auto d = evolve_unitary(w, up_at_origin(), t);
    EXPECT_NEAR(d.total(), 1.0, 1e-9);
    for (const auto& [x, p] : d.probs) EXPECT_LE(std::abs(x[0]), t);
  }
}

TEST(Simulate, RejectsNonUnitary) {
  EXPECT_THROW(evolve_unitary(hadamard_walk() * cplx(0.9), up_at_origin(), 3), ValidationError);
}

TEST(Simulate, MemoryCapGuard) {
  EvolveOptions opt;
  opt.memoryCapBytes = 1024;
  EXPECT_THROW(evolve_unitary(hadamard_walk(), up_at_origin(), 1000, opt), ValidationError);
}

TEST(Simulate, TwoDimensionalConservesProbability) {
  const auto w = walk_2d({pi / 3, pi / 4, pi / 4}, {-pi / 3, -pi / 4, pi / 3});
  const auto st = InitialState::localized(Offset{0, 0}, CVector::Unit(2, 0));
  const auto d = evolve_unitary(w, st, 20);
  EXPECT_NEAR(d.total(), 1.0, 1e-10);
  // One step by hand: U2 S2 U1 S1 acting on |0,0>|up>.
  const auto d1 = evolve_unitary(w, st, 1);
  double total = 0.0;
  for (const auto& [x, p] : d1.probs) {
    EXPECT_LE(std::abs(x[0]) + std::abs(x[1]), 2);
    total += p;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Simulate, DeterministicShiftMoments) {
  const auto w = TrigPolyMatrix::monomial({1}, CMatrix::Identity(1, 1));
  const auto d = evolve_unitary(w, InitialState::localized(1, CVector::Ones(1)), 7);
  const auto m = moments(d, 2, Scaling::Ballistic);
  EXPECT_NEAR(m.mean(0), 1.0, 1e-14);
  EXPECT_NEAR(m.covariance(0, 0), 0.0, 1e-14);
}

TEST(Simulate, SymmetricDistributionMeanZero) {
  PositionDistribution d;
  d.time = 4;
  d.probs = {{{-2}, 0.25}, {{0}, 0.5}, {{2}, 0.25}};
  const auto m = moments(d, 2, Scaling::Diffusive);
  EXPECT_NEAR(m.mean(0), 0.0, 1e-15);
  EXPECT_NEAR(m.second(0, 0), 2.0 / 4.0, 1e-15);
  EXPECT_THROW(moments(d, 3), ValidationError);
  EXPECT_THROW(moments(PositionDistribution{}, 1), ValidationError);
}

TEST(Simulate, MarkovDegenerateChainMatchesUnitary) {
  const auto m = hadamard_reflection_model(0.0);
  const auto exact = evolve_unitary(hadamard_walk(), up_at_origin(), 40);
  const auto mc = simulate_markov(m, up_at_origin(), 40, 3, 99);
  for (const auto& [x, p] : exact.probs) {
    auto it = mc.probs.find(x);
    const double q = it == mc.probs.end() ? 0.0 : it->second;
    EXPECT_NEAR(p, q, 1e-12);
  }
  for (const auto& [x, e] : mc.stderr) EXPECT_NEAR(e, 0.0, 1e-12);
  const auto always = hadamard_reflection_model(1.0);
  const auto refl = evolve_unitary(reflection_walk(), up_at_origin(), 25);
  const auto mc2 = simulate_markov(always, up_at_origin(), 25, 2, 5);
  for (const auto& [x, p] : refl.probs) EXPECT_NEAR(p, mc2.probs.at(x), 1e-12);
}

TEST(Simulate, MarkovDeterministicGivenSeed) {
  const auto m = hadamard_reflection_model(0.0, std::pair{0.9, 0.3});
  const auto a = simulate_markov(m, up_at_origin(), 60, 200, 1234);
  const auto b = simulate_markov(m, up_at_origin(), 60, 200, 1234);
  EXPECT_EQ(a.probs, b.probs);
  const auto c = simulate_markov(m, up_at_origin(), 60, 200, 1235);
  EXPECT_NE(a.probs, c.probs);
}

TEST(Simulate, MarkovIndependentOfBlockSize) {
  // Trajectory seeding is per index, so partitioning cannot change results
  // beyond summation order.
  const auto m = hadamard_reflection_model(0.3);
  MarkovOptions o1, o2;
  o1.blockSize = 7;
  o2.blockSize = 64;
  const auto a = simulate_markov_series(m, up_at_origin(), 50, 100, 42, o1);
  const auto b = simulate_markov_series(m, up_at_origin(), 50, 100, 42, o2);
  for (const auto& [x, p] : a.distribution.probs) EXPECT_NEAR(p, b.distribution.probs.at(x), 1e-14);
}

TEST(Simulate, MarkovConservesProbability) {
  const auto m = hadamard_reflection_model(0.2);
  const auto run = simulate_markov_series(m, up_at_origin(), 100, 50, 7, {{10, 50}});
  EXPECT_NEAR(run.distribution.total(), 1.0, 1e-9);
  ASSERT_EQ(run.series.times, (std::vector<int>{10, 50, 100}));
  const auto mom = moments(run.distribution, 2);
  EXPECT_NEAR(mom.second(0, 0), run.series.secondQ[2](0, 0), 1e-8);
}

TEST(Simulate, MarkovRejectsKrausModel) {
  EXPECT_THROW(simulate_markov(dephased_hadamard_model(0.5, 0.3), up_at_origin(), 5, 1, 1), ValidationError);
}

TEST(Simulate, MarkovTwoDimensionalMatchesUnitary) {
  const auto w = walk_2d({0.3, 0.1, 0.7}, {1.1, -0.4, 0.2});
  const auto st = InitialState::localized(Offset{0, 0}, CVector::Unit(2, 1));
  const auto exact = evolve_unitary(w, st, 9);
  const auto mc = simulate_markov(unitary_model(w), st, 9, 1, 3);
  for (const auto& [x, p] : exact.probs) EXPECT_NEAR(p, mc.probs.at(x), 1e-12);
}

TEST(Simulate, DensityScalarMatchesPathEnumeration) {
  const auto coeffs = halving_walk_coefficients();
  const auto model = scalar_kraus_model(coeffs);
  const auto st = InitialState::localized(1, CVector::Ones(1));
  for (int t : {0, 1, 4, 9}) {
    const auto d = evolve_density_scalar(model, st, t, t + 1);
    const auto oracle = brute_force_scalar(coeffs, t);
    for (const auto& [x, p] : oracle) EXPECT_NEAR(d.probs.at({x}), p, 1e-13) << "t=" << t << " x=" << x;
    EXPECT_NEAR(d.total(), 1.0, 1e-12);
  }
}

TEST(Simulate, DensityScalarRadiusGuard) {
  const auto model = scalar_kraus_model(halving_walk_coefficients());
  EXPECT_THROW(evolve_density_scalar(model, InitialState::localized(1, CVector::Ones(1)), 10, 9), ValidationError);
}

TEST(Simulate, DensityScalarTraceAndPositivity) {
  const auto h = momentum_shift_model(1, 7);
  const auto d = evolve_density_scalar(h, InitialState::localized(1, CVector::Ones(1)), 60, 60);
  EXPECT_NEAR(d.total(), 1.0, 1e-10);
  for (const auto& [x, p] : d.probs) EXPECT_GE(p, -1e-12);
}

TEST(Simulate, MomentumShiftZeroIsHalvingWalk) {
  const auto st = InitialState::localized(1, CVector::Ones(1));
  const auto a = evolve_density_scalar(momentum_shift_model(0, 1), st, 30, 30);
  const auto b = evolve_density_scalar(scalar_kraus_model(halving_walk_coefficients()), st, 30, 30);
  for (const auto& [x, p] : a.probs) EXPECT_NEAR(p, b.probs.at(x), 1e-14);
}

TEST(Simulate, MomentumShiftMatchesPathEnumeration) {
  // Brute force with explicit phases e^{-iqx} after each Kraus operator.
  const double q = 2 * pi / 5;
  const int t = 7;
  const auto coeffs = halving_walk_coefficients();
  std::map<int, double> oracle;
  for (int seq = 0; seq < (1 << t); ++seq) {
    std::map<int, cplx> psi{{0, 1.0}};
    for (int step = 0; step < t; ++step) {
      const auto& a = coeffs[static_cast<std::size_t>((seq >> step) & 1)];
      std::map<int, cplx> next;
      for (const auto& [x, v] : psi)
        for (const auto& [k, c] : a) next[x + k] += c * v * std::polar(1.0, -q * (x + k));
      psi = next;
    }
    for (const auto& [x, v] : psi) oracle[x] += std::norm(v);
  }
  const auto d = evolve_density_scalar(momentum_shift_model(1, 5), InitialState::localized(1, CVector::Ones(1)), t, t);
  for (const auto& [x, p] : oracle) EXPECT_NEAR(d.probs.at({x}), p, 1e-13);
}

TEST(Simulate, HalvingWalkSecondMoment) {
  // mean over p of v(p)^2 = mean of cos^2(p)/4 = 1/8
  const auto d = evolve_density_scalar(scalar_kraus_model(halving_walk_coefficients()),
                                       InitialState::localized(1, CVector::Ones(1)), 200, 200);
  EXPECT_NEAR(moments(d, 2, Scaling::Ballistic).second(0, 0), 0.125, 0.01);
}

TEST(Simulate, DensityKrausMatchesScalarEvolution) {
  const auto model = scalar_kraus_model(halving_walk_coefficients());
  const auto st = InitialState::localized(1, CVector::Ones(1));
  const auto a = evolve_density_kraus(model, st, 25);
  const auto b = evolve_density_scalar(model, st, 25, 25);
  for (const auto& [x, p] : b.probs) EXPECT_NEAR(a.probs.at(x), p, 1e-13);
}

TEST(Simulate, DensityKrausMatchesUnitaryEvolution) {
  const auto w = hadamard_walk();
  CVector c(2);
  c << 1 / std::sqrt(2.0), cplx(0, 1 / std::sqrt(2.0));
  const auto st = InitialState::localized(1, c);
  const auto a = evolve_density_kraus(unitary_model(w), st, 40);
  const auto b = evolve_unitary(w, st, 40);
  for (const auto& [x, p] : b.probs) EXPECT_NEAR(a.probs.at(x), p, 1e-12);
}

TEST(Simulate, DensityKrausMatchesExactMoments) {
  const auto model = hadamard_reflection_model(0.3);
  const auto st = up_at_origin();
  const auto ex = exact_moments(model, st, {30});
  const auto d = evolve_density_kraus(model, st, 30);
  double m1 = 0, m2 = 0;
  for (const auto& [x, p] : d.probs) {
    m1 += x[0] * p;
    m2 += x[0] * x[0] * p;
  }
  EXPECT_NEAR(m1, ex.mean[0], 1e-10);
  EXPECT_NEAR(m2, ex.second[0], 1e-9);
}

TEST(Simulate, DensityKrausTraceAndPositivity) {
  const auto model = symmetrized_pair(hadamard_walk());
  const auto d = evolve_density_kraus(model, up_at_origin(), 50);
  EXPECT_NEAR(d.total(), 1.0, 1e-12);
  for (const auto& [x, p] : d.probs) EXPECT_GE(p, -1e-13);
}

TEST(Simulate, DensityKrausRejectsMemory) {
  const auto model = hadamard_reflection_model(0.3, std::pair{0.2, 0.5});
  EXPECT_THROW(evolve_density_kraus(model, up_at_origin(), 3), ValidationError);
}
