#include "enkf/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "enkf/errors.hpp"

namespace enkf {

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Tracks which keys of an object were consumed so leftovers can be rejected.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::optional<double> number(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_number()) throw ConfigError(join(path_, key), "must be a number");
    return v->get<double>();
  }

  std::optional<std::int64_t> integer(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_number_integer()) throw ConfigError(join(path_, key), "must be an integer");
    return v->get<std::int64_t>();
  }

  std::optional<std::string> string(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_string()) throw ConfigError(join(path_, key), "must be a string");
    return v->get<std::string>();
  }

  std::optional<std::vector<double>> numbers(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw ConfigError(join(path_, key), "must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : *v) {
      if (!e.is_number()) throw ConfigError(join(path_, key), "must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::optional<std::vector<std::int64_t>> integers(const std::string& key) {
    const json* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_array()) throw ConfigError(join(path_, key), "must be an array of integers");
    std::vector<std::int64_t> out;
    for (const auto& e : *v) {
      if (!e.is_number_integer()) throw ConfigError(join(path_, key), "must be an array of integers");
      out.push_back(e.get<std::int64_t>());
    }
    return out;
  }

  std::string field(const std::string& key) const { return join(path_, key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(join(path_, it.key()), "unknown key \"" + it.key() + "\"");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Matrix parse_matrix(const json& j, const std::string& field) {
  if (!j.is_array() || j.empty()) throw ConfigError(field, "must be a non-empty array of rows");
  const Index rows = static_cast<Index>(j.size());
  if (!j[0].is_array()) throw ConfigError(field, "must be an array of rows");
  const Index cols = static_cast<Index>(j[0].size());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != cols) throw ConfigError(field, "rows must have equal length");
    for (Index k = 0; k < cols; ++k) {
      const json& v = row[static_cast<std::size_t>(k)];
      if (!v.is_number()) throw ConfigError(field, "entries must be numbers");
      m(i, k) = v.get<double>();
    }
  }
  return m;
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(row);
  }
  return rows;
}

std::uint64_t non_negative(std::int64_t v, const std::string& field) {
  if (v < 0) throw ConfigError(field, "must be >= 0");
  return static_cast<std::uint64_t>(v);
}

}  // namespace

std::vector<std::uint64_t> ExperimentConfig::seeds() const {
  if (!seed_list.empty()) return seed_list;
  std::vector<std::uint64_t> out;
  for (std::uint64_t i = 0; i < seed_count; ++i) out.push_back(seed_base + i);
  return out;
}

Index ExperimentConfig::resolved_p() const {
  if (p) return *p;
  const DimReport rep = verify_dim(model);
  return std::clamp<Index>(rep.p_state_dims, 1, model.dim());
}

TurbulenceParams parse_model(const json& j, const std::string& where) {
  ObjectReader rd(j, where);
  TurbulenceParams p;
  if (auto b = rd.string("builtin")) {
    if (*b != "kolmogorov") throw ConfigError(rd.field("builtin"), "unknown builtin model \"" + *b + "\"");
    p = TurbulenceParams::kolmogorov();
  }
  if (auto v = rd.integer("J")) {
    if (*v < 0 || *v > 100000) throw ConfigError(rd.field("J"), "must be in [0, 100000]");
    p.J = static_cast<int>(*v);
  }
  if (auto v = rd.number("alpha")) p.alpha = *v;
  if (auto v = rd.number("beta")) p.beta = *v;
  if (auto v = rd.number("gamma0")) p.gamma0 = *v;
  if (auto v = rd.number("nu_visc")) p.nu_visc = *v;
  if (auto v = rd.number("E0")) p.E0 = *v;
  if (auto v = rd.number("h")) p.h = *v;
  if (auto v = rd.numbers("omega")) p.omega = *v;
  if (auto v = rd.numbers("forcing")) p.forcing = *v;
  if (auto v = rd.number("r")) p.r = *v;
  // an omitted tau means 1, also under the builtin preset
  p.tau = rd.number("tau").value_or(1.0);
  if (auto v = rd.number("rho")) p.rho = *v;
  if (const json* v = rd.raw("sigma_obs")) {
    if (v->is_null()) {
      p.sigma_obs.reset();
    } else {
      if (!v->is_number()) throw ConfigError(rd.field("sigma_obs"), "must be a number or null");
      p.sigma_obs = v->get<double>();
    }
  }
  if (const json* v = rd.raw("jump_spec")) {
    if (v->is_null()) {
      p.jump_spec.reset();
    } else {
      const std::string f = rd.field("jump_spec");
      ObjectReader jr(*v, f);
      JumpSpec js;
      const json* tr = jr.raw("transition");
      if (!tr) throw ConfigError(jr.field("transition"), "is required");
      js.transition = parse_matrix(*tr, jr.field("transition"));
      const json* mu = jr.raw("multipliers");
      if (!mu) throw ConfigError(jr.field("multipliers"), "is required");
      js.multipliers = parse_matrix(*mu, jr.field("multipliers"));
      auto modes = jr.integers("modes");
      if (!modes) throw ConfigError(jr.field("modes"), "is required");
      for (auto m : *modes) js.modes.push_back(static_cast<int>(m));
      if (auto s = jr.integer("initial_state")) js.initial_state = static_cast<int>(*s);
      if (auto s = jr.integer("seed")) p.jump_seed = non_negative(*s, jr.field("seed"));
      jr.finish();
      try {
        js.validate();
      } catch (const InvalidChain& e) {
        throw ConfigError(f, e.what());
      }
      p.jump_spec = js;
    }
  }
  rd.finish();
  try {
    p.validate();
  } catch (const InvalidParams& e) {
    throw ConfigError(where, e.what());
  }
  return p;
}

json to_json(const TurbulenceParams& p) {
  json j;
  j["J"] = p.J;
  j["alpha"] = p.alpha;
  j["beta"] = p.beta;
  j["gamma0"] = p.gamma0;
  j["nu_visc"] = p.nu_visc;
  j["E0"] = p.E0;
  j["h"] = p.h;
  j["omega"] = p.omega;
  j["forcing"] = p.forcing;
  j["r"] = p.r;
  j["tau"] = p.tau;
  j["rho"] = p.rho;
  j["sigma_obs"] = p.sigma_obs ? json(*p.sigma_obs) : json(nullptr);
  if (p.jump_spec) {
    json js;
    js["transition"] = matrix_json(p.jump_spec->transition);
    js["multipliers"] = matrix_json(p.jump_spec->multipliers);
    js["modes"] = p.jump_spec->modes;
    js["initial_state"] = p.jump_spec->initial_state;
    js["seed"] = p.jump_seed;
    j["jump_spec"] = js;
  } else {
    j["jump_spec"] = nullptr;
  }
  return j;
}

ExperimentConfig parse_config(const json& j) {
  ObjectReader rd(j, "");
  ExperimentConfig c;
  if (auto v = rd.string("experiment")) {
    static const std::set<std::string> known{"simulate", "verify-dim", "rmt", "stability", "accuracy"};
    if (!known.count(*v)) throw ConfigError("experiment", "unknown experiment \"" + *v + "\"");
    c.experiment = *v;
  }
  if (const json* m = rd.raw("model")) c.model = parse_model(*m, "model");
  if (const json* e = rd.raw("enkf")) {
    ObjectReader er(*e, "enkf");
    if (auto v = er.integer("K")) {
      if (*v < 2) throw ConfigError("enkf.K", "must be >= 2");
      c.K = *v;
    }
    if (const json* pv = er.raw("p")) {
      if (pv->is_string()) {
        if (pv->get<std::string>() != "auto") throw ConfigError("enkf.p", "must be an integer or \"auto\"");
        c.p.reset();
      } else if (pv->is_number_integer()) {
        c.p = pv->get<Index>();
      } else {
        throw ConfigError("enkf.p", "must be an integer or \"auto\"");
      }
    }
    if (auto v = er.integer("dense_eig_max_dim")) {
      if (*v < 0) throw ConfigError("enkf.dense_eig_max_dim", "must be >= 0");
      c.dense_eig_max_dim = *v;
    }
    er.finish();
  }
  if (c.p && (*c.p < 1 || *c.p > c.model.dim()))
    throw ConfigError("enkf.p", "must satisfy 1 <= p <= d = " + std::to_string(c.model.dim()));
  if (auto v = rd.integer("T")) {
    if (*v < 1) throw ConfigError("T", "T must be >= 1");
    c.T = static_cast<std::uint64_t>(*v);
  }
  if (const json* s = rd.raw("seeds")) {
    if (s->is_array()) {
      for (const auto& e : *s) {
        if (!e.is_number_integer() || e.get<std::int64_t>() < 0)
          throw ConfigError("seeds", "must be non-negative integers");
        c.seed_list.push_back(e.get<std::uint64_t>());
      }
      if (c.seed_list.empty()) throw ConfigError("seeds", "must not be empty");
    } else {
      ObjectReader sr(*s, "seeds");
      if (auto v = sr.integer("base")) c.seed_base = non_negative(*v, "seeds.base");
      if (auto v = sr.integer("count")) {
        if (*v < 1) throw ConfigError("seeds.count", "must be >= 1");
        c.seed_count = static_cast<std::uint64_t>(*v);
      }
      sr.finish();
    }
  }
  if (auto v = rd.number("init_var")) {
    if (!(*v > 0)) throw ConfigError("init_var", "must be > 0");
    c.init_var = *v;
  }
  if (auto v = rd.string("reference")) {
    if (*v != "auto" && *v != "stationary" && *v != "riccati")
      throw ConfigError("reference", "must be one of auto, stationary, riccati");
    if (*v == "stationary" && !c.model.sigma_obs)
      throw ConfigError("reference", "stationary reference needs model.sigma_obs");
    c.reference = *v;
  }
  if (const json* s = rd.raw("stability")) {
    ObjectReader sr(*s, "stability");
    if (auto v = sr.numbers("shifts")) c.shifts = *v;
    sr.finish();
  }
  if (const json* s = rd.raw("accuracy")) {
    ObjectReader ar(*s, "accuracy");
    if (auto v = ar.numbers("eps")) {
      for (double e : *v)
        if (!(e > 0)) throw ConfigError("accuracy.eps", "entries must be > 0");
      if (v->empty()) throw ConfigError("accuracy.eps", "must not be empty");
      c.eps = *v;
    }
    ar.finish();
  }
  if (const json* s = rd.raw("verify_dim")) {
    ObjectReader vr(*s, "verify_dim");
    if (auto v = vr.numbers("rho_grid")) {
      for (double e : *v)
        if (!(e > 0)) throw ConfigError("verify_dim.rho_grid", "entries must be > 0");
      c.rho_grid = *v;
    }
    vr.finish();
  }
  if (const json* s = rd.raw("rmt")) {
    ObjectReader rr(*s, "rmt");
    if (auto v = rr.integer("d")) c.rmt.d = *v;
    if (auto v = rr.integer("p")) c.rmt.p = *v;
    if (auto v = rr.integers("K_list")) {
      c.rmt.K_list.clear();
      for (auto k : *v) {
        if (k < 2) throw ConfigError("rmt.K_list", "entries must be >= 2");
        c.rmt.K_list.push_back(k);
      }
      if (c.rmt.K_list.empty()) throw ConfigError("rmt.K_list", "must not be empty");
    }
    if (auto v = rr.number("rho")) c.rmt.rho = *v;
    if (auto v = rr.number("delta")) c.rmt.delta = *v;
    if (auto v = rr.integer("trials")) c.rmt.trials = static_cast<int>(*v);
    if (auto v = rr.numbers("condition_numbers")) c.rmt.condition_numbers = *v;
    if (auto v = rr.integer("tail_K")) c.rmt.tail_K = *v;
    if (auto v = rr.integer("tail_points")) c.rmt.tail_points = static_cast<int>(*v);
    if (auto v = rr.integer("tail_min_count")) c.rmt.tail_min_count = static_cast<int>(*v);
    rr.finish();
    if (c.rmt.d < 1 || c.rmt.p < 1 || c.rmt.p > c.rmt.d) throw ConfigError("rmt.p", "must satisfy 1 <= p <= d");
    if (!(c.rmt.rho > 0)) throw ConfigError("rmt.rho", "must be > 0");
    if (!(c.rmt.delta > 0)) throw ConfigError("rmt.delta", "must be > 0");
    if (c.rmt.trials < 1) throw ConfigError("rmt.trials", "must be >= 1");
    if (c.rmt.tail_K < 2) throw ConfigError("rmt.tail_K", "must be >= 2");
    for (double v : c.rmt.condition_numbers)
      if (!(v > 1)) throw ConfigError("rmt.condition_numbers", "entries must be > 1");
  }
  if (auto v = rd.string("output_dir")) c.output_dir = *v;
  rd.finish();
  c.rmt.seed = c.seed_list.empty() ? c.seed_base : c.seed_list.front();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open config file " + path);
  json j;
  try {
    j = json::parse(in, nullptr, true, false);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", path + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = c.experiment;
  j["model"] = to_json(c.model);
  j["enkf"] = {{"K", c.K}, {"dense_eig_max_dim", c.dense_eig_max_dim}};
  j["enkf"]["p"] = c.p ? json(*c.p) : json("auto");
  j["T"] = c.T;
  if (c.seed_list.empty())
    j["seeds"] = {{"base", c.seed_base}, {"count", c.seed_count}};
  else
    j["seeds"] = c.seed_list;
  j["init_var"] = c.init_var;
  j["reference"] = c.reference;
  j["stability"] = {{"shifts", c.shifts}};
  j["accuracy"] = {{"eps", c.eps}};
  j["verify_dim"] = {{"rho_grid", c.rho_grid}};
  json r;
  r["d"] = c.rmt.d;
  r["p"] = c.rmt.p;
  r["K_list"] = c.rmt.K_list;
  r["rho"] = c.rmt.rho;
  r["delta"] = c.rmt.delta;
  r["trials"] = c.rmt.trials;
  r["condition_numbers"] = c.rmt.condition_numbers;
  r["tail_K"] = c.rmt.tail_K;
  r["tail_points"] = c.rmt.tail_points;
  r["tail_min_count"] = c.rmt.tail_min_count;
  j["rmt"] = r;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  return j;
}

json to_json(const DimReport& r) {
  json j;
  j["kind"] = r.kind;
  j["p"] = r.p_effective;
  j["p_effective"] = r.p_effective;
  j["p_instability"] = r.p_instability;
  j["p_covariance"] = r.p_covariance;
  j["p_plus_minus"] = r.p_plus_minus;
  j["p_state_dims"] = r.p_state_dims;
  j["mode0_failing"] = r.mode0_failing;
  j["failing_modes"] = r.failing_modes;
  j["rho"] = r.rho;
  j["r"] = r.r;
  j["tau"] = r.tau;
  json modes = json::array();
  for (const auto& m : r.modes) {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    modes.push_back({{"k", m.k},
                     {"gamma_k", m.gamma_k},
                     {"sigma_kk", m.sigma_kk},
                     {"branch1", num(m.branch1)},
                     {"branch2", num(m.branch2)},
                     {"r_k", num(m.r_k)},
                     {"covariance_fail", m.covariance_fail},
                     {"instability_fail", m.instability_fail},
                     {"pass", m.pass}});
  }
  j["modes"] = modes;
  return j;
}

json to_json(const ConcentrationResult& r) {
  json j;
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"K", row.K},
                    {"condition_number", row.condition_number},
                    {"rare_event_freq", row.rare_event_freq},
                    {"lambda_median", row.lambda_median},
                    {"mu_median", row.mu_median}});
  j["rows"] = rows;
  json tail = json::array();
  for (const auto& t : r.tail) tail.push_back({{"t", t.t}, {"prob", t.prob}, {"count", t.count}});
  j["tail"] = tail;
  j["tail_fit"] = {{"slope", r.tail_fit.slope},
                   {"intercept", r.tail_fit.intercept},
                   {"r2", r.tail_fit.r2},
                   {"points", r.tail_fit.points}};
  j["monotone_fraction"] = r.monotone_fraction;
  return j;
}

json to_json(const StabilityResult& r) {
  json j;
  json fits = json::array();
  for (const auto& f : r.fits)
    fits.push_back({{"seed", f.seed},
                    {"shift", f.shift},
                    {"slope", f.fit.slope},
                    {"intercept", f.fit.intercept},
                    {"r2", f.fit.r2},
                    {"points", f.fit.points},
                    {"spreads_identical", f.spreads_identical}});
  j["fits"] = fits;
  j["negative_slope_fraction"] = r.negative_slope_fraction;
  j["all_spreads_identical"] = r.all_spreads_identical;
  return j;
}

json to_json(const std::vector<AccuracyRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"eps", r.eps}, {"mean_error", r.mean_error}, {"error_over_eps", r.mean_error / r.eps},
                   {"per_seed", r.per_seed}});
  return arr;
}

json to_json(const FilterDiagnostics& d) {
  return {{"step", d.step}, {"maha_sq_per_d", d.maha_sq_per_d}, {"l2_error", d.l2_error}, {"nu", d.nu},
          {"lambda", d.lambda}, {"mu", d.mu}, {"chi", d.chi}, {"cov_fidelity", d.cov_fidelity}};
}

void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

void write_json(const json& j, const std::string& path) { write_text(j.dump(2) + "\n", path); }

std::string dim_report_csv(const DimReport& r) {
  std::ostringstream os;
  os << "k,gamma_k,sigma_kk,branch1,branch2,r_k,pass\n";
  for (const auto& m : r.modes)
    os << m.k << ',' << format_double(m.gamma_k) << ',' << format_double(m.sigma_kk) << ','
       << format_double(m.branch1) << ',' << format_double(m.branch2) << ',' << format_double(m.r_k) << ','
       << (m.pass ? 1 : 0) << '\n';
  return os.str();
}

}  // namespace enkf
