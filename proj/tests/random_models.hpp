#pragma once

// Random Markov-controlled walks for property tests: 2x2 unitary coins
// times the shift, two or three control states, strictly positive chains.

#include "qwalk/models.hpp"

#include <random>

namespace qwalk::randomized {

inline CMatrix random_coin(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ang(-pi, pi);
  return std::polar(1.0, ang(rng)) * detail::su2(ang(rng), ang(rng), ang(rng));
}

inline RMatrix random_chain(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  RMatrix m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) m(i, j) = u(rng);
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

/// drift: some states also translate both coin components by one site.
inline MarkovWalkModel random_unitary_mixture(std::mt19937_64& rng, bool drift = false) {
  std::uniform_int_distribution<int> states(2, 3);
  const int n = states(rng);
  std::vector<KrausFamily> chans;
  const auto s = detail::shift_1d();
  const auto both = TrigPolyMatrix::diagonal_shift({{1}, {1}});
  for (int g = 0; g < n; ++g) {
    auto w = TrigPolyMatrix::constant(random_coin(rng), 1) * s;
    if (drift && g % 2 == 0) w = both * w;
    chans.push_back({w});
  }
  return MarkovWalkModel(ControlProcess(random_chain(rng, n)), chans, "random_mixture");
}

/// Memoryless mixture of coin-shift unitaries, encoded as one Kraus family.
inline MarkovWalkModel random_kraus_mixture(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(2, 3);
  const int n = count(rng);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> weight;
  for (int i = 0; i < n; ++i) weight.push_back(u(rng));
  double tot = 0.0;
  for (double x : weight) tot += x;
  KrausFamily fam;
  for (int i = 0; i < n; ++i)
    fam.push_back(TrigPolyMatrix::constant(std::sqrt(weight[static_cast<std::size_t>(i)] / tot) * random_coin(rng), 1) *
                  detail::shift_1d());
  return kraus_model(fam, "random_kraus");
}

}  // namespace qwalk::randomized
