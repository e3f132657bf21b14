// qwalk: command-line front end for spectra, simulations and asymptotic laws.

#include "qwalk/qwalk.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace qwalk;

namespace {

struct Options {
  std::string walk;
  std::optional<int> grid;
  std::optional<int> steps;
  long long samples = 10000;
  std::uint64_t seed = 1;
  std::string out = "-";
  std::string format = "csv";
  std::string scaling;
  std::optional<double> tol;
  double sigma = 0.02;
  double radius = 0.02;
  int order = 0;
  int bins = 200;
  std::optional<double> xmax;
  bool strict = false;
};

/// Raised when a requested check fails under --strict.
struct VerdictFailure : ValidationError {
  using ValidationError::ValidationError;
};

Scaling parse_scaling(const std::string& s, Scaling fallback) {
  if (s.empty()) return fallback;
  if (s == "none") return Scaling::None;
  if (s == "ballistic") return Scaling::Ballistic;
  if (s == "diffusive") return Scaling::Diffusive;
  throw ValidationError("cli.scaling", "scaling is none, ballistic or diffusive");
}

void emit(const ResultFile& r, const Options& o) {
  if (o.out == "-")
    std::cout << r.render(o.format);
  else
    r.write(o.out, o.format);
}

ResultFile result(const std::string& command, const Options& o, const ResolvedWalk& w, Scaling scaling, std::string units) {
  ResultFile r(command, scaling, std::move(units));
  r.meta["walk"] = o.walk;
  r.meta["classification"] = w.classification;
  return r;
}

int lattice_dim(const ResolvedWalk& w) { return w.model ? w.model->lattice_dim() : 1; }

InitialState initial_state(const ResolvedWalk& w) {
  const int s = lattice_dim(w);
  const int d = w.model ? w.model->coin_dim() : 1;
  return w.initial_or(InitialState::localized(s, CVector::Unit(d, 0)));
}

std::vector<std::string> axis_names(const std::string& base, int s) {
  if (s == 1) return {base};
  std::vector<std::string> out;
  for (int a = 0; a < s; ++a) out.push_back(base + std::to_string(a));
  return out;
}

Json vector_json(const RVector& v) {
  if (v.size() == 1) return v(0);
  Json j = Json::array();
  for (int i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j;
}

Json matrix_or_scalar(const RMatrix& m) {
  if (m.size() == 1) return m(0, 0);
  return detail::matrix_json(m);
}

DispersionData unitary_dispersion(const ResolvedWalk& w, int grid) { return group_velocity(dispersion(w.walk(), grid), w.walk()); }

std::vector<double> caustic_velocities(const DispersionData& data, const TrigPolyMatrix& walk) {
  std::vector<double> out;
  for (const auto& c : caustics(data, walk)) out.push_back(c.velocity[0]);
  return out;
}

/// Ballistic limit measure of Q/t for every classification that has one.
VelocityMeasure ballistic_measure(const ResolvedWalk& w, const InitialState& rho, int grid) {
  const auto& c = w.classification;
  if (c == "unitary") return velocity_measure(unitary_dispersion(w, grid), rho);
  if (c == "commuting") return commuting_velocity_measure(commuting_kraus_velocity(w.markov(), grid), rho);
  VelocityMeasure vm;
  vm.latticeDim = lattice_dim(w);
  const int s = vm.latticeDim;
  const auto axis = momentum_grid(grid);
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(grid), s);
  auto add = [&](const std::vector<double>& p, RVector v) {
    vm.velocity.push_back(std::move(v));
    vm.weight.push_back(rho.density(p).trace().real() / static_cast<double>(pts));
  };
  if (c == "momentum_shift") {
    if (!w.shift->zeroShift()) throw ValidationError("cli.ballistic", "momentum-shift walk with q != 0 has no ballistic law");
    for (double p : axis) add({p}, RVector::Constant(1, 0.5 * std::cos(p)));
    return vm;
  }
  if (c == "scalar_kraus") {
    const auto sv = scalar_velocity(w.markov());
    for (double p : axis) add({p}, RVector::Constant(1, sv(p)));
    return vm;
  }
  std::vector<RVector> v(pts);
  detail::parallel_for(pts, [&](std::size_t i) { v[i] = ballistic_velocity(w.markov(), grid_point(axis, i, s)); });
  for (std::size_t i = 0; i < pts; ++i) add(grid_point(axis, i, s), v[i]);
  return vm;
}

/// Exact or sampled finite-time distribution matched to the classification.
PositionDistribution finite_time(const ResolvedWalk& w, const InitialState& rho, int t, const Options& o, std::string& method) {
  const auto& c = w.classification;
  if (c == "unitary") {
    method = "exact_unitary";
    return evolve_unitary(w.walk(), rho, t);
  }
  if (c == "momentum_shift") {
    method = "exact_density_matrix";
    return evolve_density_scalar(*w.shift, rho, t, rho.radius() + t);
  }
  const auto& m = w.markov();
  if (c == "scalar_kraus" && m.state_count() == 1) {
    method = "exact_density_matrix";
    return evolve_density_scalar(m, rho, t, rho.radius() + t * m.max_degree());
  }
  if (m.unitary_flag()) {
    method = "monte_carlo";
    return simulate_markov(m, rho, t, o.samples, o.seed);
  }
  method = "exact_density_matrix";
  return evolve_density_kraus(m, rho, t);
}

std::vector<double> linspace_mid(double lo, double hi, int n) {
  std::vector<double> x;
  for (int k = 0; k < n; ++k) x.push_back(lo + (k + 0.5) * (hi - lo) / n);
  return x;
}

// ---------------------------------------------------------------------------

int cmd_spectrum(const Options& o, const ResolvedWalk& w) {
  detail::require(w.classification == "unitary", "cli.spectrum", "spectrum needs a single unitary walk");
  const int s = lattice_dim(w);
  const int grid = o.grid.value_or(s == 1 ? 1024 : 128);
  const auto data = unitary_dispersion(w, grid);
  const int d = data.coinDim;
  auto r = result("spectrum", o, w, Scaling::None, "momentum and phase in radians; velocity in sites per step");
  r.meta["grid"] = grid;
  r.meta["degeneracy_tol"] = data.degeneracyTol;
  r.columns = axis_names("p", s);
  for (int k = 0; k < d; ++k) r.columns.push_back("omega_" + std::to_string(k));
  for (int k = 0; k < d; ++k)
    for (const auto& n : axis_names("v_" + std::to_string(k), s)) r.columns.push_back(n);
  RVector vmax = RVector::Zero(s), vmin = RVector::Zero(s);
  for (std::size_t pt = 0; pt < data.points(); ++pt) {
    const auto p = data.momentum(pt);
    std::vector<double> row(p.begin(), p.end());
    for (int k = 0; k < d; ++k) row.push_back(data.omega(pt, k));
    for (int k = 0; k < d; ++k)
      for (int a = 0; a < s; ++a) {
        const double v = data.v(pt, k, a);
        row.push_back(v);
        if (data.regular[pt]) {
          vmax(a) = std::max(vmax(a), v);
          vmin(a) = std::min(vmin(a), v);
        }
      }
    r.add_row(std::move(row));
  }
  if (s == 1)
    for (double v : caustic_velocities(data, w.walk())) {
      vmax(0) = std::max(vmax(0), v);
      vmin(0) = std::min(vmin(0), v);
    }
  r.summary["v_max"] = vector_json(vmax);
  r.summary["v_min"] = vector_json(vmin);
  r.summary["irregular_fraction"] = data.irregular_fraction();
  emit(r, o);
  return 0;
}

int cmd_ballistic(const Options& o, const ResolvedWalk& w) {
  const int s = lattice_dim(w);
  const int grid = o.grid.value_or(s == 1 ? 4096 : 256);
  const auto rho = initial_state(w);
  const auto vm = ballistic_measure(w, rho, grid);
  std::optional<std::pair<double, double>> range;
  if (o.xmax) range = std::pair{-*o.xmax, *o.xmax};
  const auto h = histogram(vm, o.bins, range);
  auto r = result("ballistic", o, w, Scaling::Ballistic, "u = Q/t in sites per step; density per unit velocity volume");
  r.meta["grid"] = grid;
  r.meta["bins"] = o.bins;
  r.columns = axis_names("u", s);
  r.columns.push_back("density");
  const std::size_t cells = detail::ipow(static_cast<std::size_t>(o.bins), s);
  for (std::size_t i = 0; i < cells; ++i) {
    const auto idx = detail::unravel(i, o.bins, s);
    std::vector<double> row;
    for (int a = 0; a < s; ++a) row.push_back(h.center(a, idx[static_cast<std::size_t>(a)]));
    row.push_back(h.density[i]);
    r.add_row(std::move(row));
  }
  RVector mean = RVector::Zero(s);
  RMatrix second = RMatrix::Zero(s, s);
  for (std::size_t i = 0; i < vm.velocity.size(); ++i) {
    mean += vm.weight[i] * vm.velocity[i];
    second += vm.weight[i] * vm.velocity[i] * vm.velocity[i].transpose();
  }
  r.summary["mean"] = vector_json(mean);
  r.summary["second_moment"] = matrix_or_scalar(second);
  r.summary["mass"] = h.mass;
  r.summary["excluded_mass"] = h.excludedMass;
  emit(r, o);
  return 0;
}

int cmd_caustics(const Options& o, const ResolvedWalk& w) {
  detail::require(w.classification == "unitary", "cli.caustics", "caustics need a single unitary walk");
  const int s = lattice_dim(w);
  const int grid = o.grid.value_or(s == 1 ? 1024 : 128);
  const auto data = unitary_dispersion(w, grid);
  const auto cs = caustics(data, w.walk());
  auto r = result("caustics", o, w, Scaling::Ballistic, "momentum in radians; velocity in sites per step");
  r.meta["grid"] = grid;
  r.columns = axis_names("p", s);
  r.columns.push_back("branch");
  for (const auto& n : axis_names("v", s)) r.columns.push_back(n);
  for (const auto& c : cs) {
    std::vector<double> row(c.p.begin(), c.p.end());
    row.push_back(c.branch);
    row.insert(row.end(), c.velocity.begin(), c.velocity.end());
    r.add_row(std::move(row));
  }
  r.summary["count"] = cs.size();
  emit(r, o);
  return 0;
}

int cmd_simulate(const Options& o, const ResolvedWalk& w) {
  const int t = o.steps.value_or(100);
  const auto rho = initial_state(w);
  std::string method;
  const auto dist = finite_time(w, rho, t, o, method);
  const Scaling sc = parse_scaling(o.scaling, Scaling::None);
  const int s = dist.latticeDim;
  auto r = result("simulate", o, w, sc, "x in lattice sites; u = x/t (ballistic) or x/sqrt(t) (diffusive); probability per site");
  r.meta["steps"] = t;
  r.meta["method"] = method;
  if (method == "monte_carlo") {
    r.meta["samples"] = o.samples;
    r.meta["seed"] = o.seed;
  }
  r.columns = axis_names("x", s);
  if (sc != Scaling::None)
    for (const auto& n : axis_names("u", s)) r.columns.push_back(n);
  r.columns.push_back("probability");
  if (!dist.stderr.empty()) r.columns.push_back("stderr");
  const double scale = sc == Scaling::Ballistic ? 1.0 / std::max(t, 1) : sc == Scaling::Diffusive ? 1.0 / std::sqrt(std::max(t, 1)) : 1.0;
  for (const auto& [x, p] : dist.probs) {
    std::vector<double> row(x.begin(), x.end());
    if (sc != Scaling::None)
      for (int v : x) row.push_back(v * scale);
    row.push_back(p);
    if (!dist.stderr.empty()) {
      auto it = dist.stderr.find(x);
      row.push_back(it == dist.stderr.end() ? 0.0 : it->second);
    }
    r.add_row(std::move(row));
  }
  const auto m = moments(dist, 2, sc);
  r.summary["total"] = dist.total();
  r.summary["mean"] = vector_json(m.mean);
  r.summary["covariance"] = matrix_or_scalar(m.covariance);
  emit(r, o);
  return 0;
}

int cmd_diffusion(const Options& o, const ResolvedWalk& w) {
  auto r = result("diffusion", o, w, Scaling::Diffusive, "v in sites per step; s = covariance of (Q - v t)/sqrt(t)");
  if (w.classification == "momentum_shift") {
    const auto a = momentum_shift_asymptotics(*w.shift, initial_state(w), {});
    r.meta["scaling"] = to_string(a.scaling);
    r.summary["law"] = a.law;
    r.summary["variance"] = a.variance;
    emit(r, o);
    return 0;
  }
  const auto& m = w.markov();
  const int s = m.lattice_dim();
  const int grid = o.grid.value_or(s == 1 ? 64 : 16);
  const auto axis = momentum_grid(grid);
  const std::size_t pts = detail::ipow(static_cast<std::size_t>(grid), s);
  const PerturbationSolver solver(m);
  std::vector<Diffusion> dfs(pts);
  detail::parallel_for(pts, [&](std::size_t i) { dfs[i] = solver.diffusion(grid_point(axis, i, s)); });
  r.meta["grid"] = grid;
  r.columns = axis_names("p", s);
  for (const auto& n : axis_names("v", s)) r.columns.push_back(n);
  for (int a = 0; a < s; ++a)
    for (int b = a; b < s; ++b) {
      const std::string tag = s == 1 ? "" : std::to_string(a) + std::to_string(b);
      r.columns.push_back("s" + tag + "_re");
      r.columns.push_back("s" + tag + "_im");
    }
  RVector vmean = RVector::Zero(s);
  RMatrix smean = RMatrix::Zero(s, s);
  double vdev = 0.0, sdev = 0.0, imag = 0.0;
  bool psd = true;
  for (std::size_t i = 0; i < pts; ++i) {
    const auto& df = dfs[i];
    std::vector<double> row = grid_point(axis, i, s);
    for (int a = 0; a < s; ++a) row.push_back(df.v(a));
    for (int a = 0; a < s; ++a)
      for (int b = a; b < s; ++b) {
        row.push_back(df.s(a, b).real());
        row.push_back(df.s(a, b).imag());
      }
    r.add_row(std::move(row));
    vmean += df.v / static_cast<double>(pts);
    smean += df.s.real() / static_cast<double>(pts);
    vdev = std::max(vdev, (df.v - dfs.front().v).cwiseAbs().maxCoeff());
    sdev = std::max(sdev, (df.s - dfs.front().s).cwiseAbs().maxCoeff());
    imag = std::max(imag, df.s.imag().cwiseAbs().maxCoeff());
    psd = psd && df.psd;
  }
  r.summary["v"] = vector_json(vmean);
  r.summary["s"] = matrix_or_scalar(smean);
  r.summary["v_constant"] = vdev <= 1e-8;
  r.summary["s_constant"] = sdev <= 1e-8;
  r.summary["s_real"] = imag <= 1e-9;
  r.summary["s_psd"] = psd;
  emit(r, o);
  return 0;
}

int cmd_asymptotic(const Options& o, const ResolvedWalk& w) {
  const auto rho = initial_state(w);
  const auto& c = w.classification;
  detail::require(lattice_dim(w) == 1, "cli.asymptotic", "density tables need one lattice dimension; use ballistic for 2D");
  detail::require(o.order == 0 || o.order == 1, "cli.asymptotic", "order is 0 or 1");
  std::optional<MomentumShiftAsymptotics> msa;
  Scaling fallback = Scaling::Ballistic;
  if (c == "momentum_shift") {
    msa = momentum_shift_asymptotics(*w.shift, rho, {});
    fallback = msa->scaling;
  } else if (c == "markov" || c == "kraus") {
    fallback = Scaling::Diffusive;
  }
  const Scaling sc = parse_scaling(o.scaling, fallback);
  detail::require(sc != Scaling::None, "cli.scaling", "asymptotic laws need ballistic or diffusive scaling");
  auto r = result("asymptotic", o, w, sc, sc == Scaling::Ballistic ? "u = Q/t; density per unit u" : "z = (Q - v t)/sqrt(t); density per unit z");
  r.meta["order"] = o.order;
  r.columns = {sc == Scaling::Ballistic ? "u" : "z", "density"};
  std::vector<double> xs, fs;

  if (c == "momentum_shift") {
    detail::require(sc == msa->scaling, "cli.asymptotic", "this momentum-shift walk has a " + std::string(to_string(msa->scaling)) + " law");
    detail::require(o.order == 0, "cli.asymptotic", "no next-order law for the momentum-shift walk");
    const double L = o.xmax.value_or(sc == Scaling::Ballistic ? 0.5 : 3.0);
    xs = linspace_mid(-L, L, o.bins);
    const auto a = momentum_shift_asymptotics(*w.shift, rho, xs, o.grid.value_or(512));
    fs = a.density;
    r.summary["law"] = a.law;
    r.summary["variance"] = a.variance;
  } else if (sc == Scaling::Diffusive) {
    detail::require(o.order == 0, "cli.asymptotic", "next order is available in ballistic scaling only");
    const auto gm = gaussian_limit(w.markov(), rho, o.grid.value_or(64));
    const double smax = gm.mean_covariance()(0, 0);
    const double L = o.xmax.value_or(5.0 * std::sqrt(smax));
    xs = linspace_mid(-L, L, o.bins);
    for (double x : xs) fs.push_back(gm.density(x));
    r.summary["v"] = vector_json(gm.v);
    r.summary["variance"] = smax;
  } else if (o.order == 1) {
    const int t = o.steps.value_or(100);
    r.meta["steps"] = t;
    if (c == "unitary") {
      detail::require(w.markov().name() == "hadamard_coin_first" && !w.initial, "cli.asymptotic",
                      "first-order ballistic correction for unitary walks is tabulated for the coin-first Hadamard walk from (1,0)");
      const double um = 1.0 / std::sqrt(2.0);
      xs = linspace_mid(-um, um, o.bins);
      for (double u : xs) fs.push_back(std::abs(u) < um - 1e-3 ? hadamard_correction(t, u) : std::nan(""));
    } else {
      detail::require(c == "markov" || c == "kraus" || c == "commuting", "cli.asymptotic", "no next-order law for this model");
      const auto tab = next_order_table(w.markov(), o.grid.value_or(256));
      const double L = o.xmax.value_or(1.2);
      xs = linspace_mid(-L, L, o.bins);
      fs = next_order_density(tab, rho, t, xs);
    }
  } else {
    const int grid = o.grid.value_or(4096);
    if (c == "unitary") {
      const auto data = unitary_dispersion(w, grid);
      JacobianOptions jo;
      jo.causticVelocities = caustic_velocities(data, w.walk());
      double lo = 0.0, hi = 0.0;
      for (double v : jo.causticVelocities) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const double L = o.xmax.value_or(std::max(-lo, hi));
      xs = linspace_mid(-L, L, o.bins);
      for (double u : xs) {
        bool near = false;
        for (double v : jo.causticVelocities) near = near || std::abs(u - v) < 1e-6;
        fs.push_back(near || u <= lo || u >= hi ? (near ? std::nan("") : 0.0) : jacobian_density_1d(data, w.walk(), rho, u, jo));
      }
    } else {
      const auto vm = ballistic_measure(w, rho, grid);
      std::optional<std::pair<double, double>> range;
      if (o.xmax) range = std::pair{-*o.xmax, *o.xmax};
      const auto h = histogram(vm, o.bins, range);
      for (int j = 0; j < o.bins; ++j) {
        xs.push_back(h.center(0, j));
        fs.push_back(h.density[static_cast<std::size_t>(j)]);
      }
    }
  }
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isnan(fs[i])) r.add_row({xs[i], fs[i]});
  emit(r, o);
  return 0;
}

int cmd_index(const Options& o, const ResolvedWalk& w) {
  auto r = result("index", o, w, Scaling::None, "index in lattice sites per step");
  detail::require(w.model.has_value(), "cli.index", "index needs a walk model");
  const auto& m = w.markov();
  if (w.classification == "unitary") {
    const auto idx = index(w.walk());
    r.summary["index"] = idx.components.size() == 1 ? Json(idx.components[0]) : Json(idx.components);
  } else {
    Json per = Json::array();
    if (m.unitary_flag())
      for (int g = 0; g < m.state_count(); ++g) per.push_back(index(m.channel(g).front()).components);
    if (!per.empty()) r.summary["state_indices"] = per;
    r.summary["mean_index_velocity"] = vector_json(mean_index_velocity(m));
  }
  emit(r, o);
  return 0;
}

int cmd_check(const Options& o, const ResolvedWalk& w) {
  auto r = result("check", o, w, Scaling::None, "momentum in radians; gap of the transition operator at eps = 0");
  if (w.classification == "momentum_shift") {
    r.summary["pass"] = true;
    r.summary["law"] = momentum_shift_asymptotics(*w.shift, initial_state(w), {}).law;
    emit(r, o);
    return 0;
  }
  const auto& m = w.markov();
  const int s = m.lattice_dim();
  const int count = o.grid.value_or(16);
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(-pi, pi);
  std::vector<std::vector<double>> ps;
  for (int i = 0; i < count; ++i) {
    std::vector<double> p;
    for (int a = 0; a < s; ++a) p.push_back(u(rng));
    ps.push_back(p);
  }
  const double tol = o.tol.value_or(1e-8);
  const auto rep = check_assumptions(m, ps, tol);
  r.meta["samples"] = count;
  r.meta["seed"] = o.seed;
  r.meta["gap_threshold"] = tol;
  r.columns = axis_names("p", s);
  for (const char* c : {"gap", "multiplicity", "commuting", "algebra_rank"}) r.columns.push_back(c);
  for (const auto& pt : rep.points) {
    std::vector<double> row(pt.p.begin(), pt.p.end());
    row.push_back(pt.gap);
    row.push_back(pt.multiplicity);
    row.push_back(pt.commutingKraus ? 1.0 : 0.0);
    row.push_back(pt.algebraRank);
    r.add_row(std::move(row));
  }
  r.summary["pass"] = rep.pass;
  r.summary["primitive"] = rep.primitive;
  r.summary["faithful_state"] = rep.faithfulState;
  r.summary["spans_algebra"] = rep.spansAlgebra;
  r.summary["min_algebra_rank"] = rep.minAlgebraRank;
  r.summary["min_gap"] = rep.min_gap();
  if (!rep.invariantStateError.empty()) r.summary["invariant_state_error"] = rep.invariantStateError;
  emit(r, o);
  if (o.strict && !rep.pass) throw VerdictFailure("check.assumptions", "model fails the perturbation-theory assumptions");
  return 0;
}

int cmd_compare(const Options& o, const ResolvedWalk& w) {
  const auto rho = initial_state(w);
  const auto& c = w.classification;
  detail::require(lattice_dim(w) == 1, "cli.compare", "comparison harness covers one lattice dimension");
  std::string method;
  int t = o.steps.value_or(300);
  Scaling sc = Scaling::Ballistic;
  std::optional<MomentumShiftAsymptotics> msa;
  if (c == "momentum_shift") {
    msa = momentum_shift_asymptotics(*w.shift, rho, {});
    sc = msa->scaling;
  } else if (c == "markov" || c == "kraus") {
    sc = Scaling::Diffusive;
  }
  sc = parse_scaling(o.scaling, sc);
  detail::require(sc != Scaling::None, "cli.scaling", "comparison needs ballistic or diffusive scaling");
  std::optional<MarkovRun> run;
  PositionDistribution dist;
  if (w.model && c == "markov") {
    method = "monte_carlo";
    run = simulate_markov_series(w.markov(), rho, t, o.samples, o.seed);
    dist = run->distribution;
  } else {
    dist = finite_time(w, rho, t, o, method);
  }
  auto r = result("compare", o, w, sc, sc == Scaling::Ballistic ? "u = Q/t" : "z = (Q - v t)/sqrt(t)");
  r.meta["steps"] = t;
  r.meta["method"] = method;
  if (method == "monte_carlo") {
    r.meta["samples"] = o.samples;
    r.meta["seed"] = o.seed;
  }
  const double spacing = sc == Scaling::Ballistic ? 1.0 / t : 1.0 / std::sqrt(static_cast<double>(t));
  const double sigma = std::max(o.sigma, 2.0 * spacing);
  r.meta["sigma"] = o.sigma;
  r.meta["sigma_effective"] = sigma;

  const auto sim = moments(dist, 2, sc);
  std::function<double(double)> law;
  L1Options l1;
  double lawSecond = std::nan(""), lawMean = 0.0, drift = 0.0;
  bool pass = true;
  Json checks = Json::object();
  try {
    if (sc == Scaling::Ballistic) {
      const int grid = o.grid.value_or(4096);
      const auto vm = ballistic_measure(w, rho, grid);
      double lo = 0.0, hi = 0.0, second = 0.0;
      for (std::size_t i = 0; i < vm.velocity.size(); ++i) {
        lo = std::min(lo, vm.velocity[i](0));
        hi = std::max(hi, vm.velocity[i](0));
        lawMean += vm.weight[i] * vm.velocity[i](0);
        second += vm.weight[i] * vm.velocity[i](0) * vm.velocity[i](0);
      }
      lawSecond = second;
      std::vector<double> edges{lo, hi};
      if (c == "unitary") edges = caustic_velocities(unitary_dispersion(w, grid), w.walk());
      l1.exclude = neighbourhoods(edges, o.radius);
      l1.lo = lo - 0.1;
      l1.hi = hi + 0.1;
      const auto atoms = velocity_atoms(vm);
      law = [atoms, sigma](double z) { return kde(atoms, sigma, z); };
      r.meta["grid"] = grid;
      r.meta["excluded_radius"] = o.radius;
    } else if (msa) {
      const double L = 4.0 * std::sqrt(msa->variance);
      l1.lo = -L;
      l1.hi = L;
      const auto xs = linspace_mid(l1.lo, l1.hi, l1.points);
      const auto dens = momentum_shift_asymptotics(*w.shift, rho, xs).density;
      const double h = (l1.hi - l1.lo) / l1.points;
      law = [dens, lo = l1.lo, h](double z) {
        const auto k = static_cast<long>(std::floor((z - lo) / h));
        return k >= 0 && k < static_cast<long>(dens.size()) ? dens[static_cast<std::size_t>(k)] : 0.0;
      };
      lawSecond = msa->variance;
    } else {
      const auto gm = gaussian_limit(w.markov(), rho, o.grid.value_or(64));
      drift = gm.v(0);
      lawMean = 0.0;
      lawSecond = gm.mean_covariance()(0, 0);
      const double L = 5.0 * std::sqrt(lawSecond);
      l1.lo = -L;
      l1.hi = L;
      auto smoothed = gm;
      for (auto& cov : smoothed.covariance) cov(0, 0) += sigma * sigma;
      law = [smoothed](double z) { return smoothed.density(z); };
    }
  } catch (const ValidationError& e) {
    r.summary["law"] = nullptr;
    r.summary["unclassified"] = std::string(e.check()) + ": " + e.what();
  }

  const auto atoms = scaled_atoms(dist, sc, drift);
  const double simMean = sim.mean(0) - (sc == Scaling::Diffusive ? drift * std::sqrt(static_cast<double>(t)) : 0.0);
  const double simVar = sc == Scaling::Diffusive ? sim.covariance(0, 0) : sim.second(0, 0);
  r.summary["simulated_mean"] = simMean;
  r.summary[sc == Scaling::Diffusive ? "simulated_variance" : "simulated_second_moment"] = simVar;
  if (law) {
    const double l1v = l1_distance([&](double z) { return kde(atoms, sigma, z); }, law, l1);
    r.summary["l1"] = l1v;
    r.summary["law_mean"] = lawMean;
    r.summary[sc == Scaling::Diffusive ? "law_variance" : "law_second_moment"] = lawSecond;
    if (sc == Scaling::Ballistic) {
      const double tol = o.tol.value_or(0.05);
      checks["l1"] = {{"value", l1v}, {"tolerance", tol}, {"pass", l1v < tol}};
      pass = l1v < tol;
    } else {
      double bound = o.tol.value_or(0.05) * lawSecond;
      std::string rule = "relative";
      if (run) {
        const auto [var, se] = run->series.variance(run->series.times.size() - 1);
        r.summary["simulated_variance"] = var / t;
        r.summary["simulated_variance_stderr"] = se / t;
        bound = 3.0 * se / t;
        rule = "three_standard_errors";
        const double dev = std::abs(var / t - lawSecond);
        checks["variance"] = {{"deviation", dev}, {"bound", bound}, {"rule", rule}, {"pass", dev <= bound}};
        pass = dev <= bound;
      } else {
        const double dev = std::abs(simVar - lawSecond);
        checks["variance"] = {{"deviation", dev}, {"bound", bound}, {"rule", rule}, {"pass", dev <= bound}};
        pass = dev <= bound;
      }
    }
    r.columns = {sc == Scaling::Ballistic ? "u" : "z", "simulated", "asymptotic"};
    const auto xs = linspace_mid(l1.lo, l1.hi, o.bins);
    for (double z : xs) r.add_row({z, kde(atoms, sigma, z), law(z)});
  } else {
    pass = false;
  }
  r.summary["checks"] = checks;
  r.summary["pass"] = pass;
  emit(r, o);
  if (o.strict && !pass) throw VerdictFailure("compare.verdict", "simulation and asymptotic law disagree beyond tolerance");
  return 0;
}

void print_error(const char* kind, const std::string& check, const std::string& message) {
  std::cerr << Json{{"error", kind}, {"check", check}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
#ifdef _OPENMP
  if (const char* env = std::getenv("QWALK_NUM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
#endif
  CLI::App app{"Translation-invariant quantum walks: spectra, simulation and asymptotic position laws"};
  app.set_version_flag("--version", std::string(version));
  app.require_subcommand(1);
  Options o;
  using Handler = int (*)(const Options&, const ResolvedWalk&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands{
      {"spectrum", "dispersion branches and group velocities on a momentum grid", cmd_spectrum},
      {"ballistic", "limit law of Q/t as a histogram", cmd_ballistic},
      {"caustics", "momenta where a branch velocity is stationary", cmd_caustics},
      {"simulate", "finite-time position distribution", cmd_simulate},
      {"diffusion", "drift and diffusion matrix per momentum", cmd_diffusion},
      {"asymptotic", "limit density in ballistic or diffusive scaling (--order 1: next order)", cmd_asymptotic},
      {"index", "index of a unitary walk or mean index velocity", cmd_index},
      {"check", "diagnostics for the perturbation-theory assumptions", cmd_check},
      {"compare", "simulation against the matched asymptotic law", cmd_compare},
  };
  std::map<std::string, Handler> handlers;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    handlers[name] = fn;
    sub->add_option("--walk", o.walk, "walk spec file (JSON)")->required();
    sub->add_option("--grid", o.grid, "momentum grid points per axis (check: number of random momenta)");
    sub->add_option("--steps", o.steps, "number of time steps");
    sub->add_option("--samples", o.samples, "Monte Carlo trajectories");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--out", o.out, "output path, - for stdout");
    sub->add_option("--format", o.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--scaling", o.scaling, "none, ballistic or diffusive")->check(CLI::IsMember({"none", "ballistic", "diffusive"}));
    sub->add_option("--tol", o.tol, "tolerance of the command's pass/fail check");
    sub->add_option("--sigma", o.sigma, "Gaussian smoothing width in scaled units");
    sub->add_option("--radius", o.radius, "excluded radius around caustic velocities");
    sub->add_option("--order", o.order, "0 for the limit law, 1 for the next-order correction");
    sub->add_option("--bins", o.bins, "histogram bins or density table points")->check(CLI::PositiveNumber);
    sub->add_option("--xmax", o.xmax, "half-width of the output range in scaled units");
    sub->add_flag("--strict", o.strict, "exit with status 2 when the verdict fails");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("validation", "cli.arguments", e.what());
    return 2;
  }
  try {
    const auto spec = load_walk_spec(o.walk);
    const auto w = resolve(spec);
    for (auto* sub : app.get_subcommands()) return handlers.at(sub->get_name())(o, w);
  } catch (const ValidationError& e) {
    print_error("validation", e.check(), e.what());
    return 2;
  } catch (const Error& e) {
    print_error("internal", e.check(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", "unknown", e.what());
    return 1;
  }
  return 1;
}
