#pragma once

// Walk spec files (JSON) and self-describing result files (CSV or JSON).

#include "qwalk/perturb.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace qwalk {

inline constexpr const char* version = "1.0.0";

using Json = nlohmann::ordered_json;

namespace detail {

template <class M>
bool same_matrix(const M& a, const M& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.size() == 0 || a == b);
}

}  // namespace detail

struct CoefficientEntry {
  Offset offset;
  RMatrix re;
  RMatrix im;
  bool operator==(const CoefficientEntry& o) const {
    return offset == o.offset && detail::same_matrix(re, o.re) && detail::same_matrix(im, o.im);
  }
};

using OperatorSpec = std::vector<CoefficientEntry>;

struct InitialEntry {
  Offset site;
  CVector coin;
  bool operator==(const InitialEntry& o) const { return site == o.site && detail::same_matrix(coin, o.coin); }
};

/// kind: unitary (operators[0]), kraus (one family), markov (transition
/// plus per-state lists of operator indices), builtin (name + params).
struct WalkSpec {
  std::string kind;
  std::string name;
  int latticeDim = 1;
  int coinDim = 2;
  std::vector<OperatorSpec> operators;
  RMatrix transition;
  std::vector<std::vector<int>> channels;
  std::string builtin;
  Json params = Json::object();
  std::vector<InitialEntry> initial;
  bool operator==(const WalkSpec& o) const {
    return kind == o.kind && name == o.name && latticeDim == o.latticeDim && coinDim == o.coinDim &&
           operators == o.operators && detail::same_matrix(transition, o.transition) && channels == o.channels &&
           builtin == o.builtin && params == o.params && initial == o.initial;
  }
};

namespace detail {

inline Json matrix_json(const RMatrix& m) {
  Json rows = Json::array();
  for (int i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (int j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline RMatrix matrix_from(const Json& j, int rows, int cols, const char* what) {
  const std::string check = std::string("io.") + what;
  detail::require(j.is_array() && static_cast<int>(j.size()) == rows, check.c_str(), "expected " + std::to_string(rows) + " rows");
  RMatrix m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const auto& r = j[static_cast<std::size_t>(i)];
    detail::require(r.is_array() && static_cast<int>(r.size()) == cols, check.c_str(), "expected " + std::to_string(cols) + " columns");
    for (int k = 0; k < cols; ++k) {
      detail::require(r[static_cast<std::size_t>(k)].is_number(), check.c_str(), "matrix entries must be numbers");
      m(i, k) = r[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return m;
}

inline Json cplx_json(cplx z) { return Json{{"re", z.real()}, {"im", z.imag()}}; }

inline cplx cplx_from(const Json& j) {
  if (j.is_number()) return j.get<double>();
  detail::require(j.is_object() && j.contains("re"), "io.complex", "complex numbers are {re, im} objects or plain numbers");
  return {j.at("re").get<double>(), j.value("im", 0.0)};
}

template <class T>
T field(const Json& j, const char* key, const char* check) {
  detail::require(j.contains(key), check, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(check, std::string("field '") + key + "' has the wrong type");
  }
}

inline TrigPolyMatrix operator_from(const OperatorSpec& op, int s, int d) {
  TrigPolyMatrix k(s, d);
  for (const auto& e : op) k.add_term(e.offset, e.re.cast<cplx>() + I * e.im.cast<cplx>());
  return k;
}

inline OperatorSpec operator_spec(const TrigPolyMatrix& k) {
  OperatorSpec op;
  for (const auto& [x, c] : k.coefficients()) op.push_back({x, c.real(), c.imag()});
  return op;
}

}  // namespace detail

inline Json to_json(const WalkSpec& w) {
  Json j;
  j["kind"] = w.kind;
  if (!w.name.empty()) j["name"] = w.name;
  if (w.kind == "builtin") {
    j["builtin"] = Json{{"name", w.builtin}, {"params", w.params}};
  } else {
    j["latticeDim"] = w.latticeDim;
    j["coinDim"] = w.coinDim;
    Json ops = Json::array();
    for (const auto& op : w.operators) {
      Json terms = Json::array();
      for (const auto& e : op)
        terms.push_back(Json{{"offset", e.offset}, {"re", detail::matrix_json(e.re)}, {"im", detail::matrix_json(e.im)}});
      ops.push_back(terms);
    }
    j["operators"] = ops;
    if (w.kind == "markov") {
      j["transition"] = detail::matrix_json(w.transition);
      j["channels"] = w.channels;
    }
  }
  if (!w.initial.empty()) {
    Json init = Json::array();
    for (const auto& e : w.initial) {
      Json coin = Json::array();
      for (int i = 0; i < e.coin.size(); ++i) coin.push_back(detail::cplx_json(e.coin(i)));
      init.push_back(Json{{"site", e.site}, {"coin", coin}});
    }
    j["initial"] = init;
  }
  return j;
}

inline WalkSpec walk_spec_from_json(const Json& j) {
  detail::require(j.is_object(), "io.spec", "walk spec must be a JSON object");
  WalkSpec w;
  w.kind = detail::field<std::string>(j, "kind", "io.spec");
  w.name = j.value("name", std::string());
  if (w.kind == "builtin") {
    detail::require(j.contains("builtin") && j.at("builtin").is_object(), "io.spec", "builtin spec needs a 'builtin' object");
    w.builtin = detail::field<std::string>(j.at("builtin"), "name", "io.spec");
    w.params = j.at("builtin").value("params", Json::object());
    detail::require(w.params.is_object(), "io.spec", "builtin params must be an object");
  } else if (w.kind == "unitary" || w.kind == "kraus" || w.kind == "markov") {
    w.latticeDim = detail::field<int>(j, "latticeDim", "io.spec");
    w.coinDim = detail::field<int>(j, "coinDim", "io.spec");
    detail::require(w.latticeDim > 0 && w.coinDim > 0, "io.spec", "latticeDim and coinDim must be positive");
    detail::require(j.contains("operators") && j.at("operators").is_array() && !j.at("operators").empty(), "io.spec",
            "need a nonempty 'operators' list");
    for (const auto& op : j.at("operators")) {
      detail::require(op.is_array() && !op.empty(), "io.spec", "each operator is a nonempty list of coefficients");
      OperatorSpec spec;
      for (const auto& t : op) {
        CoefficientEntry e;
        e.offset = detail::field<Offset>(t, "offset", "io.coefficient");
        detail::require(static_cast<int>(e.offset.size()) == w.latticeDim, "io.coefficient", "offset length must equal latticeDim");
        e.re = detail::matrix_from(t.at("re"), w.coinDim, w.coinDim, "coefficient");
        e.im = t.contains("im") ? detail::matrix_from(t.at("im"), w.coinDim, w.coinDim, "coefficient")
                                : RMatrix::Zero(w.coinDim, w.coinDim);
        spec.push_back(std::move(e));
      }
      w.operators.push_back(std::move(spec));
    }
    if (w.kind == "unitary") detail::require(w.operators.size() == 1, "io.spec", "unitary spec needs exactly one operator");
    if (w.kind == "markov") {
      w.channels = detail::field<std::vector<std::vector<int>>>(j, "channels", "io.spec");
      const int n = static_cast<int>(w.channels.size());
      detail::require(n > 0, "io.spec", "markov spec needs channels");
      w.transition = detail::matrix_from(j.at("transition"), n, n, "transition");
      for (const auto& ch : w.channels)
        for (int i : ch)
          detail::require(i >= 0 && i < static_cast<int>(w.operators.size()), "io.spec", "channel references an unknown operator");
    }
  } else {
    throw ValidationError("io.spec", "unknown kind '" + w.kind + "'");
  }
  if (j.contains("initial")) {
    detail::require(j.at("initial").is_array(), "io.initial", "'initial' must be a list");
    for (const auto& e : j.at("initial")) {
      InitialEntry ie;
      ie.site = detail::field<Offset>(e, "site", "io.initial");
      detail::require(e.contains("coin") && e.at("coin").is_array() && !e.at("coin").empty(), "io.initial", "missing coin vector");
      ie.coin.resize(static_cast<Eigen::Index>(e.at("coin").size()));
      for (std::size_t i = 0; i < e.at("coin").size(); ++i) ie.coin(static_cast<Eigen::Index>(i)) = detail::cplx_from(e.at("coin")[i]);
      w.initial.push_back(std::move(ie));
    }
  }
  return w;
}

inline WalkSpec parse_walk_spec(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("io.parse", e.what());
  }
  return walk_spec_from_json(j);
}

inline WalkSpec load_walk_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("io.read", "cannot read walk spec '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_walk_spec(buf.str());
}

inline std::string dump(const WalkSpec& w) { return to_json(w).dump(2) + "\n"; }

inline void save_walk_spec(const WalkSpec& w, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("io.write", "cannot write '" + path + "'");
  out << dump(w);
}

/// Explicit spec with the model's coefficients: unitary, kraus or markov.
inline WalkSpec spec_from_model(const MarkovWalkModel& model) {
  WalkSpec w;
  w.name = model.name();
  w.latticeDim = model.lattice_dim();
  w.coinDim = model.coin_dim();
  if (model.state_count() == 1) {
    w.kind = model.unitary_flag() ? "unitary" : "kraus";
    for (const auto& k : model.channel(0)) w.operators.push_back(detail::operator_spec(k));
    return w;
  }
  w.kind = "markov";
  w.transition = model.control().transition();
  for (int g = 0; g < model.state_count(); ++g) {
    std::vector<int> refs;
    for (const auto& k : model.channel(g)) {
      refs.push_back(static_cast<int>(w.operators.size()));
      w.operators.push_back(detail::operator_spec(k));
    }
    w.channels.push_back(refs);
  }
  return w;
}

inline WalkSpec builtin_spec(std::string name, Json params = Json::object()) {
  WalkSpec w;
  w.kind = "builtin";
  w.builtin = std::move(name);
  w.params = std::move(params);
  return w;
}

/// unitary, markov, scalar_kraus, commuting, kraus, momentum_shift.
struct ResolvedWalk {
  std::string classification;
  std::optional<MarkovWalkModel> model;
  std::optional<MomentumShiftModel> shift;
  std::optional<InitialState> initial;

  const MarkovWalkModel& markov() const {
    detail::require(model.has_value(), "io.resolve", "walk is not a Markov/Kraus model");
    return *model;
  }
  /// The single unitary of a unitary classification.
  const TrigPolyMatrix& walk() const {
    detail::require(classification == "unitary", "io.resolve", "walk is not a single unitary");
    return model->channel(0).front();
  }
  InitialState initial_or(InitialState fallback) const { return initial ? *initial : std::move(fallback); }
};

namespace detail {

inline CoinParams coin_params(const Json& j) {
  return {j.value("theta", 0.0), j.value("chi", 0.0), j.value("phi", 0.0)};
}

inline std::string classify(const MarkovWalkModel& m) {
  if (m.coin_dim() == 1) return "scalar_kraus";
  if (m.unitary_flag()) return m.state_count() == 1 ? "unitary" : "markov";
  if (m.state_count() == 1) {
    bool commuting = true;
    for (const auto& p : probe_momenta(m.lattice_dim())) {
      std::vector<CMatrix> ks;
      for (const auto& k : m.channel(0)) ks.push_back(k.evaluate(p));
      commuting = commuting && kraus_commute(ks);
    }
    if (commuting) return "commuting";
  }
  return "kraus";
}

}  // namespace detail

inline MarkovWalkModel build_model(const WalkSpec& w);

inline ResolvedWalk resolve(const WalkSpec& w) {
  ResolvedWalk r;
  if (w.kind == "builtin" && w.builtin == "momentum_shift") {
    const auto& p = w.params;
    r.shift = momentum_shift_model(p.value("n", 1), p.value("m", 16));
    r.classification = "momentum_shift";
  } else {
    r.model = build_model(w);
    r.classification = detail::classify(*r.model);
  }
  if (!w.initial.empty()) {
    const int s = r.model ? r.model->lattice_dim() : 1;
    const int d = r.model ? r.model->coin_dim() : 1;
    std::map<Offset, CVector> amps;
    for (const auto& e : w.initial) {
      detail::require(static_cast<int>(e.site.size()) == s, "io.initial", "site length must equal latticeDim");
      detail::require(e.coin.size() == d, "io.initial", "coin vector length must equal coinDim");
      amps[e.site] = e.coin;
    }
    r.initial = InitialState::pure(std::move(amps));
  }
  return r;
}

inline MarkovWalkModel build_model(const WalkSpec& w) {
  if (w.kind == "unitary" || w.kind == "kraus") {
    KrausFamily fam;
    for (const auto& op : w.operators) fam.push_back(detail::operator_from(op, w.latticeDim, w.coinDim));
    const std::string name = w.name.empty() ? w.kind : w.name;
    if (w.kind == "unitary") {
      if (!check_unitary(fam.front(), 1e-10).pass) throw ValidationError("model.unitary", "operator is not unitary");
      return unitary_model(fam.front(), name);
    }
    return kraus_model(std::move(fam), name);
  }
  if (w.kind == "markov") {
    std::vector<KrausFamily> chans;
    for (const auto& refs : w.channels) {
      KrausFamily fam;
      for (int i : refs) fam.push_back(detail::operator_from(w.operators[static_cast<std::size_t>(i)], w.latticeDim, w.coinDim));
      chans.push_back(std::move(fam));
    }
    return MarkovWalkModel(ControlProcess(w.transition), std::move(chans), w.name.empty() ? "markov" : w.name);
  }
  detail::require(w.kind == "builtin", "io.spec", "unknown kind '" + w.kind + "'");
  const auto& p = w.params;
  const std::string& b = w.builtin;
  try {
    if (b == "hadamard") {
      const std::string order = p.value("order", std::string("shift_first"));
      detail::require(order == "shift_first" || order == "coin_first", "io.builtin", "order is shift_first or coin_first");
      if (order == "coin_first") return unitary_model(hadamard_walk_coin_first(), "hadamard_coin_first");
      return unitary_model(hadamard_walk(), "hadamard");
    }
    if (b == "coin_shift_1d")
      return unitary_model(coin_shift_walk_1d(p.value("alpha", 0.0), p.value("beta", pi / 4), p.value("gamma", 0.0)), "coin_shift_1d");
    if (b == "walk_2d")
      return unitary_model(walk_2d(detail::coin_params(p.value("u1", Json::object())), detail::coin_params(p.value("u2", Json::object()))),
                           "walk_2d");
    if (b == "hadamard_reflection") {
      if (p.contains("m1") || p.contains("m2"))
        return hadamard_reflection_model(0.0, std::pair{detail::field<double>(p, "m1", "io.builtin"), detail::field<double>(p, "m2", "io.builtin")});
      return hadamard_reflection_model(detail::field<double>(p, "epsilon", "io.builtin"));
    }
    if (b == "dephased_hadamard")
      return dephased_hadamard_model(detail::field<double>(p, "theta", "io.builtin"), detail::field<double>(p, "epsilon", "io.builtin"));
    if (b == "scalar_kraus") {
      if (!p.contains("kraus")) return scalar_kraus_model(halving_walk_coefficients());
      std::vector<ScalarCoefficients> coeffs;
      for (const auto& op : p.at("kraus")) {
        ScalarCoefficients a;
        for (const auto& t : op) a[detail::field<int>(t, "offset", "io.builtin")] += detail::cplx_from(t.at("value"));
        coeffs.push_back(a);
      }
      return scalar_kraus_model(coeffs);
    }
    if (b == "symmetrized_pair") {
      const auto inner = p.contains("walk") ? build_model(walk_spec_from_json(p.at("walk"))) : unitary_model(hadamard_walk());
      detail::require(inner.unitary_flag() && inner.state_count() == 1, "io.builtin", "symmetrized_pair needs a single unitary walk");
      return symmetrized_pair(inner.channel(0).front());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("io.builtin", std::string("bad parameters for '") + b + "': " + e.what());
  }
  if (b == "momentum_shift") throw ValidationError("io.builtin", "momentum_shift is not a Markov model; use resolve()");
  throw ValidationError("io.builtin", "unknown builtin '" + b + "'");
}

/// Result file: metadata, optional scalar summary, optional table.
struct ResultFile {
  Json meta = Json::object();
  Json summary = Json::object();
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  ResultFile(std::string command, Scaling scaling, std::string units) {
    meta["command"] = std::move(command);
    meta["version"] = version;
    meta["scaling"] = to_string(scaling);
    meta["units"] = std::move(units);
  }

  void add_row(std::vector<double> r) {
    detail::require(r.size() == columns.size(), "io.result", "row length differs from header");
    rows.push_back(std::move(r));
  }

  static std::string number(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
  }

  std::string csv() const {
    std::string out = "# " + meta.dump() + "\n";
    if (!summary.empty()) out += "# summary " + summary.dump() + "\n";
    if (columns.empty()) return out;
    for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
    out += "\n";
    for (const auto& r : rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + number(r[i]);
      out += "\n";
    }
    return out;
  }

  std::string json() const {
    Json j;
    j["meta"] = meta;
    if (!summary.empty()) j["summary"] = summary;
    if (!columns.empty()) {
      j["columns"] = columns;
      j["rows"] = rows;
    }
    return j.dump(2) + "\n";
  }

  std::string render(const std::string& format) const {
    detail::require(format == "csv" || format == "json", "io.format", "format is csv or json");
    return format == "csv" ? csv() : json();
  }

  void write(const std::string& path, const std::string& format) const {
    std::ofstream out(path);
    if (!out) throw ValidationError("io.write", "cannot write '" + path + "'");
    out << render(format);
  }
};

}  // namespace qwalk
