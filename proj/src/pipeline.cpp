#include "regsurv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "regsurv/coxmod.hpp"
#include "regsurv/gestaft.hpp"
#include "regsurv/missing.hpp"
#include "regsurv/nonparam.hpp"
#include "regsurv/registry.hpp"
#include "regsurv/simlab.hpp"
#include "regsurv/standardize.hpp"
#include "regsurv/weighting.hpp"

namespace fs = std::filesystem;

namespace regsurv {

const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"simulate", "describe", "km",     "cif",    "logrank", "ps",
                                             "ipw",      "standardize", "impute", "gest", "sweep", "pipeline"};
  return c;
}

namespace {

constexpr const char* kFlags = "diabetes + hypertension + ihd + pad + cvd";

json default_criteria_json() {
  json out = json::array();
  for (const auto& c : default_criteria()) out.push_back(c.definition);
  return out;
}

}  // namespace

json default_config() {
  const CovariateSpec outcome = CovariateSpec::outcome_default().with(kFlags);
  const CovariateSpec propensity = CovariateSpec::propensity_default().with(kFlags);
  GestOptions gest;
  gest.spec = outcome;
  return {
      {"input", nullptr},
      {"schema", Schema::defaults().to_json()},
      {"simulation", to_json(preset("paper_calibration"))},
      {"truth", true},
      {"eligibility", default_criteria_json()},
      {"describe", {{"bootstrap_reps", 200}, {"seed", 20240101}}},
      {"specs",
       {{"outcome", outcome.to_json()},
        {"secondary", CovariateSpec::outcome_default().to_json()},
        {"propensity", propensity.to_json()},
        {"positivity", CovariateSpec::propensity_default().to_json()}}},
      {"positivity", {{"epsilon", 0.01}, {"bins", 20}}},
      {"imputation", to_json(ImputationConfig{})},
      {"standardize",
       {{"estimands", {"ATE", "ATT", "ATNT"}},
        {"horizons", default_horizons()},
        {"grid_step_years", 0.1},
        {"ties", "efron"},
        {"secondary", true}}},
      {"bootstrap", {{"B", 200}, {"seed", 2}, {"pool", "percentile"}}},
      {"weights", {{"estimand", "ATE"}, {"stabilized", true}, {"truncate_percentile", 0.0}}},
      {"gest", {{"options", to_json(gest)}, {"two_parameter", true}, {"imputed_set", 1}}},
      {"sweep", {{"cutoffs", default_cutoffs()}, {"min_events", 50}}},
      {"profiles",
       {{"enabled", true}, {"from_year", 1998.0}, {"arm", "pkt"}, {"percentiles", {5, 25, 50, 75, 95, 100}}}},
      {"outputs", {{"imputed_sets", false}}},
  };
}

namespace {

void merge_into(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    // Free-form sections are replaced wholesale and checked by their parsers.
    const bool free_form = key == "simulation" || key == "eligibility" || key == "imputation";
    if (slot.is_object() && it.value().is_object() && !free_form) merge_into(slot, it.value(), key);
    else slot = it.value();
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

PoolMethod pool_method(const std::string& s) {
  if (s == "percentile") return PoolMethod::percentile;
  if (s == "rubin") return PoolMethod::rubin;
  throw ConfigError("bootstrap.pool must be percentile or rubin");
}

Ties ties_from(const std::string& s) {
  if (s == "efron") return Ties::efron;
  if (s == "breslow") return Ties::breslow;
  throw ConfigError("ties must be efron or breslow");
}

}  // namespace

json resolve_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  json cfg = default_config();
  json rest = user;
  rest.erase("simulation");
  merge_into(cfg, rest, "");

  // Simulation: a preset is the starting point for any other keys given.
  if (user.contains("simulation")) {
    const json& s = user.at("simulation");
    if (!s.is_object()) throw ConfigError("simulation must be an object");
    json base = s.contains("preset") ? json::object() : cfg["simulation"];
    for (auto it = s.begin(); it != s.end(); ++it) base[it.key()] = it.value();
    cfg["simulation"] = base;
  }
  cfg["simulation"] = to_json(sim_config_from_json(cfg["simulation"]));

  if (!cfg["input"].is_null() && !cfg["input"].is_string()) throw ConfigError("input must be a path or null");
  cfg["schema"] = Schema::from_json(cfg["schema"]).to_json();
  if (cfg["eligibility"].is_string()) {
    if (cfg["eligibility"] != "default") throw ConfigError("eligibility must be \"default\" or a list");
    cfg["eligibility"] = default_criteria_json();
  }
  {
    json canon = json::array();
    for (const auto& c : criteria_from_json(cfg["eligibility"])) canon.push_back(c.definition);
    cfg["eligibility"] = canon;
  }
  for (auto& [name, spec] : cfg["specs"].items()) spec = CovariateSpec::from_json(spec).to_json();
  cfg["imputation"] = to_json(imputation_config_from_json(cfg["imputation"]));

  const json& st = cfg["standardize"];
  for (const auto& e : get<std::vector<std::string>>(st, "estimands", "standardize")) estimand_from_string(e);
  for (double h : get<std::vector<double>>(st, "horizons", "standardize"))
    if (!(h > 0)) throw ConfigError("standardize.horizons must be positive");
  if (!(get<double>(st, "grid_step_years", "standardize") > 0))
    throw ConfigError("standardize.grid_step_years must be positive");
  ties_from(get<std::string>(st, "ties", "standardize"));
  get<bool>(st, "secondary", "standardize");

  const json& bs = cfg["bootstrap"];
  if (get<int>(bs, "B", "bootstrap") < 0) throw ConfigError("bootstrap.B must be nonnegative");
  get<std::uint64_t>(bs, "seed", "bootstrap");
  pool_method(get<std::string>(bs, "pool", "bootstrap"));

  const json& w = cfg["weights"];
  estimand_from_string(get<std::string>(w, "estimand", "weights"));
  get<bool>(w, "stabilized", "weights");
  const double trunc = get<double>(w, "truncate_percentile", "weights");
  if (trunc != 0.0 && !(trunc > 50.0 && trunc < 100.0))
    throw ConfigError("weights.truncate_percentile must be 0 or in (50, 100)");

  json& g = cfg["gest"];
  g["options"] = to_json(gest_options_from_json(g["options"]));
  get<bool>(g, "two_parameter", "gest");
  if (get<int>(g, "imputed_set", "gest") < 1) throw ConfigError("gest.imputed_set is 1-based");

  const json& sw = cfg["sweep"];
  for (double c : get<std::vector<double>>(sw, "cutoffs", "sweep"))
    if (!(c > 0)) throw ConfigError("sweep.cutoffs must be positive");
  get<int>(sw, "min_events", "sweep");

  const json& pr = cfg["profiles"];
  get<bool>(pr, "enabled", "profiles");
  get<double>(pr, "from_year", "profiles");
  const auto arm = get<std::string>(pr, "arm", "profiles");
  if (arm != "pkt" && arm != "dialysis") throw ConfigError("profiles.arm must be pkt or dialysis");
  for (double p : get<std::vector<double>>(pr, "percentiles", "profiles"))
    if (!(p > 0 && p <= 100)) throw ConfigError("profiles.percentiles must lie in (0, 100]");

  get<bool>(cfg["outputs"], "imputed_sets", "outputs");
  get<int>(cfg["describe"], "bootstrap_reps", "describe");
  get<std::uint64_t>(cfg["describe"], "seed", "describe");
  get<double>(cfg["positivity"], "epsilon", "positivity");
  get<int>(cfg["positivity"], "bins", "positivity");
  return cfg;
}

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.value("tool", "") == "regsurv" && j.contains("config")) return j.at("config");
  return j;
}

// ---------------------------------------------------------------------------

namespace {

struct Context {
  Context(std::string cmd, fs::path dir, std::ostream& l) : command(std::move(cmd)), out(std::move(dir)), log(l) {}

  std::string command;
  json cfg;
  fs::path out;
  std::ostream& log;
  std::string stage = "setup";
  std::map<std::string, std::string> artifacts;  // file -> content hash
  json input_info = json::object();
  json details;  // extra error context, e.g. rejected rows

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(out / name, std::ios::binary);
    if (!f) throw DataError("cannot write " + (out / name).string());
    f << content;
    artifacts[name] = hex64(fnv1a64(content));
  }
  template <class F>
  void emit(const std::string& name, F&& fill) {
    std::ostringstream s;
    fill(s);
    write(name, s.str());
  }
  void emit_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
  void begin(const std::string& s) {
    stage = s;
    log << "[" << command << "] " << s << '\n';
  }
};

CovariateSpec spec_of(const Context& ctx, const char* name) {
  return CovariateSpec::from_json(ctx.cfg["specs"][name]);
}

struct Loaded {
  Cohort raw;
  std::optional<GroundTruth> truth;
};

Loaded load_data(Context& ctx) {
  ctx.begin("load");
  Loaded d;
  if (ctx.cfg["input"].is_string()) {
    const auto path = ctx.cfg["input"].get<std::string>();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open input '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::istringstream in(bytes);
    auto res = load_registry(in, Schema::from_json(ctx.cfg["schema"]));
    ctx.input_info = {{"path", path}, {"hash", hex64(fnv1a64(bytes))}, {"rows", res.records.size()}};
    if (!res.rejects.empty()) {
      json rows = json::array();
      for (const auto& r : res.rejects)
        rows.push_back({{"row", r.row}, {"column", r.column}, {"message", r.message}});
      ctx.details = {{"rejected_rows", rows}};
      throw DataError(std::to_string(res.rejects.size()) + " input row(s) rejected; first: row " +
                      std::to_string(res.rejects.front().row) + ": " + res.rejects.front().message);
    }
    d.raw = std::move(res.records);
    return d;
  }
  const SimConfig sc = sim_config_from_json(ctx.cfg["simulation"]);
  const bool truth = ctx.cfg["truth"].get<bool>();
  Simulation sim = simulate_registry(sc, sc.seed, truth);
  ctx.input_info = {{"simulation", sc.name}, {"seed", sc.seed}, {"rows", sim.records.size()}};
  ctx.emit("registry.csv", [&](std::ostream& o) { write_registry(o, sim.records); });
  if (truth) {
    ctx.emit_json("truth.json", to_json(sim.truth));
    d.truth = std::move(sim.truth);
  }
  d.raw = std::move(sim.records);
  return d;
}

Cohort eligible_cohort(Context& ctx, const Cohort& raw, bool write) {
  ctx.begin("eligibility");
  const auto criteria = criteria_from_json(ctx.cfg["eligibility"]);
  auto res = apply_eligibility(raw, criteria);
  if (write) {
    ctx.emit("exclusions.csv", [&](std::ostream& o) { write_exclusion_csv(o, res.table); });
    ctx.emit_json("exclusions.json", to_json(res.table));
  }
  if (res.records.empty()) throw DataError("no subjects remain after eligibility criteria");
  return std::move(res.records);
}

bool needs_imputation(std::span<const SubjectRecord> records, const CovariateSpec& spec) {
  for (std::size_t k = 0; k < kComorbidityCount; ++k) {
    if (!spec.uses(kComorbidityNames[k])) continue;
    for (const auto& r : records)
      if (!r.comorbidity[k]) return true;
  }
  return false;
}

// Completed data sets: the imputed sets when any listed spec meets a missing
// flag, else the cohort itself.
struct Completed {
  std::vector<Cohort> sets;
  bool imputed = false;
};

Completed complete_sets(Context& ctx, const Cohort& cohort, std::initializer_list<CovariateSpec> specs,
                        bool write) {
  Completed c;
  bool need = false;
  for (const auto& s : specs) need = need || needs_imputation(cohort, s);
  if (!need) {
    c.sets.push_back(cohort);
    return c;
  }
  ctx.begin("impute");
  const ImputationConfig ic = imputation_config_from_json(ctx.cfg["imputation"]);
  auto res = impute_chained(cohort, ic);
  if (write) {
    ctx.emit("imputation_trace.csv", [&](std::ostream& o) { write_trace_csv(o, res); });
    json summary = {{"m", ic.m}, {"iterations", ic.iterations}, {"seed", ic.seed}};
    json prev = json::object();
    for (std::size_t k = 0; k < kComorbidityCount; ++k) {
      std::size_t missing = 0, observed = 0, ones = 0;
      for (const auto& r : cohort) {
        if (!r.comorbidity[k]) ++missing;
        else {
          ++observed;
          ones += *r.comorbidity[k];
        }
      }
      double pooled = 0.0;
      for (const auto& set : res.sets) {
        double s = 0.0;
        for (const auto& r : set) s += *r.comorbidity[k];
        pooled += s / set.size() / res.sets.size();
      }
      prev[kComorbidityNames[k]] = {{"missing", missing},
                                    {"observed_prevalence", observed ? double(ones) / observed : NAN},
                                    {"pooled_prevalence", pooled}};
    }
    summary["flags"] = prev;
    ctx.emit_json("imputation.json", summary);
    if (ctx.cfg["outputs"]["imputed_sets"].get<bool>() || ctx.command == "impute")
      ctx.emit("imputed.csv", [&](std::ostream& o) { write_imputed_csv(o, res.sets); });
  }
  c.sets = std::move(res.sets);
  c.imputed = true;
  return c;
}

// ---------------------------------------------------------------------------
// Stages

void stage_describe(Context& ctx, const Cohort& cohort) {
  ctx.begin("describe");
  DescribeOptions o;
  o.bootstrap_reps = ctx.cfg["describe"]["bootstrap_reps"].get<int>();
  o.seed = ctx.cfg["describe"]["seed"].get<std::uint64_t>();
  const auto t = describe(cohort, o);
  ctx.emit("survival_summary.csv", [&](std::ostream& s) { write_survival_summary_csv(s, t); });
  ctx.emit("covariates.csv", [&](std::ostream& s) { write_covariate_csv(s, t); });
  ctx.emit_json("describe.json", to_json(t));
}

std::vector<double> times_of(std::span<const SubjectRecord> r) {
  std::vector<double> t(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) t[i] = r[i].t_days;
  return t;
}
std::vector<int> events_of(std::span<const SubjectRecord> r) {
  std::vector<int> e(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) e[i] = r[i].event ? 1 : 0;
  return e;
}
SurvivalCurve km_of(std::span<const SubjectRecord> r) { return kaplan_meier(times_of(r), events_of(r)); }

void stage_km(Context& ctx, const Cohort& cohort) {
  ctx.begin("km");
  Cohort pkt, dial, delayed;
  for (const auto& r : cohort) {
    (r.pkt ? pkt : dial).push_back(r);
    if (!r.pkt && r.t_switch_days) delayed.push_back(r);
  }
  std::vector<std::pair<std::string, SurvivalCurve>> curves;
  curves.emplace_back("RRT cohort", km_of(cohort));
  if (!pkt.empty()) curves.emplace_back("PKT", km_of(pkt));
  if (!dial.empty()) curves.emplace_back("Dialysis first", km_of(dial));
  if (!delayed.empty()) curves.emplace_back("Delayed transplant", km_of(delayed));
  ctx.emit("km.csv", [&](std::ostream& o) {
    write_curve_csv_header(o);
    for (const auto& [label, c] : curves) write_curve_csv(o, label, c);
  });
  json j = json::object();
  for (const auto& [label, c] : curves) {
    const double med = median_time(c);
    j[label] = {{"n", c.at_risk.size() > 1 ? c.at_risk[1] : 0.0},
                {"median_years", std::isnan(med) ? json(nullptr) : json(med / kDaysPerYear)}};
  }
  ctx.emit_json("km.json", j);
}

void stage_cif(Context& ctx, const Cohort& cohort) {
  ctx.begin("cif");
  std::vector<double> t;
  std::vector<int> type;
  for (const auto& r : cohort) {
    if (r.pkt) continue;
    if (r.t_switch_days) {
      t.push_back(*r.t_switch_days);
      type.push_back(1);
    } else {
      t.push_back(r.t_days);
      type.push_back(r.event ? 2 : 0);
    }
  }
  if (t.empty()) throw DataError("cif: no dialysis-first subjects");
  const auto c = cumulative_incidence(t, type);
  const std::vector<std::string> names = {"transplant", "death"};
  ctx.emit("cif.csv", [&](std::ostream& o) { write_cif_csv(o, c, names); });
}

void stage_logrank(Context& ctx, const Cohort& cohort) {
  ctx.begin("logrank");
  std::vector<int> g(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) g[i] = cohort[i].pkt ? 1 : 0;
  const auto res = log_rank(g, times_of(cohort), events_of(cohort));
  json j = to_json(res);
  j["groups"] = {"dialysis first", "PKT"};
  ctx.emit_json("logrank.json", j);
}

void stage_positivity(Context& ctx, const Cohort& registry) {
  ctx.begin("positivity");
  const auto pm = fit_propensity(registry, spec_of(ctx, "positivity"));
  const auto ps = pm.predict(registry);
  const auto cells = default_positivity_cells(registry);
  const auto rep = positivity_report(ps, registry, cells, ctx.cfg["positivity"]["epsilon"].get<double>(),
                                     ctx.cfg["positivity"]["bins"].get<int>());
  ctx.emit_json("propensity_registry.json", to_json(pm.fit));
  ctx.emit_json("positivity.json", to_json(rep));
  ctx.emit("overlap.csv", [&](std::ostream& o) { write_overlap_csv(o, rep); });
  ctx.emit("ps_registry.csv", [&](std::ostream& o) {
    o << "id,pkt,ps\n";
    for (std::size_t i = 0; i < registry.size(); ++i)
      o << registry[i].id << ',' << (registry[i].pkt ? 1 : 0) << ',' << format_double(ps[i]) << '\n';
  });
}

std::vector<Estimand> estimands_of(const Context& ctx) {
  std::vector<Estimand> out;
  for (const auto& s : ctx.cfg["standardize"]["estimands"]) out.push_back(estimand_from_string(s.get<std::string>()));
  return out;
}

CoxOptions cox_options(const Context& ctx) {
  CoxOptions o;
  o.ties = ties_from(ctx.cfg["standardize"]["ties"].get<std::string>());
  return o;
}

// Evaluation grid in days: regular steps in years plus the horizons.
std::vector<double> year_grid(double max_days, double step_years, std::span<const double> horizons) {
  std::vector<double> g;
  const auto k_max = static_cast<long>(std::floor(max_days / kDaysPerYear / step_years + 1e-9));
  for (long k = 0; k <= k_max; ++k) g.push_back(static_cast<double>(k) * step_years * kDaysPerYear);
  for (double h : horizons) g.push_back(h * kDaysPerYear);
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

struct StandardizeOutput {
  std::vector<StandardizedContrast> contrasts;  // per estimand, averaged over sets
};

StandardizeOutput stage_standardize(Context& ctx, std::span<const Cohort> sets, const CovariateSpec& spec,
                                    const std::string& suffix) {
  ctx.begin("standardize" + suffix);
  const auto estimands = estimands_of(ctx);
  const auto horizons = ctx.cfg["standardize"]["horizons"].get<std::vector<double>>();
  const CoxOptions co = cox_options(ctx);
  double max_days = 0.0;
  for (const auto& r : sets.front()) max_days = std::max<double>(max_days, r.t_days);
  const auto grid = year_grid(max_days, ctx.cfg["standardize"]["grid_step_years"].get<double>(), horizons);

  StandardizeOutput out;
  for (auto e : estimands) {
    StandardizedContrast c;
    c.population = to_string(e);
    c.time = grid;
    c.s1.assign(grid.size(), 0.0);
    c.s0.assign(grid.size(), 0.0);
    out.contrasts.push_back(std::move(c));
  }
  json models = json::array();
  std::ostringstream coef;
  coef << "set,arm,term,beta,se\n";
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const ArmModels m = fit_arm_models(sets[s], spec, co);
    require_converged(m.pkt.fit, "PKT arm model");
    require_converged(m.dialysis.fit, "dialysis arm model");
    if (s == 0) models = {to_json(m.pkt), to_json(m.dialysis)};
    for (const auto* cm : {&m.pkt, &m.dialysis})
      for (Eigen::Index j = 0; j < cm->fit.beta.size(); ++j)
        coef << s + 1 << ',' << cm->fit.arm << ',' << cm->fit.names[static_cast<std::size_t>(j)] << ','
             << format_double(cm->fit.beta[j]) << ',' << format_double(cm->fit.se(j)) << '\n';
    for (std::size_t e = 0; e < estimands.size(); ++e) {
      const Cohort pop = population_rows(sets[s], estimands[e]);
      const auto s1 = standardized_survival(m.pkt, pop, grid);
      const auto s0 = standardized_survival(m.dialysis, pop, grid);
      auto& c = out.contrasts[e];
      for (std::size_t k = 0; k < grid.size(); ++k) {
        c.s1[k] += s1[k] / sets.size();
        c.s0[k] += s0[k] / sets.size();
      }
      c.max_time = std::min(m.pkt.fit.last_time, m.dialysis.fit.last_time);
    }
  }
  for (auto& c : out.contrasts) {
    c.diff.resize(c.time.size());
    for (std::size_t k = 0; k < c.time.size(); ++k) c.diff[k] = c.s1[k] - c.s0[k];
  }
  ctx.emit_json("cox_models" + suffix + ".json", models);
  ctx.write("cox_coefficients" + suffix + ".csv", coef.str());

  // Bootstrap within each completed set.
  const int B = ctx.cfg["bootstrap"]["B"].get<int>();
  std::vector<std::vector<HorizonBounds>> bounds(estimands.size());
  json boot_info = {{"B", B}};
  if (B > 0) {
    ctx.begin("bootstrap" + suffix);
    const auto stat = standardize_statistic(spec, horizons, estimands, co);
    const auto seed = ctx.cfg["bootstrap"]["seed"].get<std::uint64_t>();
    std::vector<BootstrapResult> results;
    std::size_t failures = 0, requested = 0;
    for (std::size_t s = 0; s < sets.size(); ++s) {
      results.push_back(bootstrap(stat, sets[s], B, derive_seed(seed, s), true));
      failures += results.back().failures;
      requested += results.back().requested;
    }
    std::vector<double> lo, hi;
    Eigen::Index total = 0;
    for (const auto& r : results) total += r.replicates.rows();
    if (total < 2) throw EstimationError("bootstrap: fewer than two successful replicates");
    const auto method = pool_method(ctx.cfg["bootstrap"]["pool"].get<std::string>());
    if (results.size() > 1) {
      const auto pooled = pool(results, method);
      lo = pooled.lo;
      hi = pooled.hi;
    } else {
      lo = results.front().lo;
      hi = results.front().hi;
    }
    const std::size_t H = horizons.size();
    std::vector<std::string> names;
    for (std::size_t e = 0; e < estimands.size(); ++e)
      for (std::size_t h = 0; h < H; ++h) {
        HorizonBounds b;
        const std::size_t base = (e * H + h) * 3;
        b.s1 = {lo[base], hi[base]};
        b.s0 = {lo[base + 1], hi[base + 1]};
        b.diff = {lo[base + 2], hi[base + 2]};
        bounds[e].push_back(b);
        for (const char* q : {"s1", "s0", "diff"})
          names.push_back(to_string(estimands[e]) + ":" + format_double(horizons[h]) + "y:" + q);
      }
    Eigen::MatrixXd all(total, static_cast<Eigen::Index>(names.size()));
    Eigen::Index row = 0;
    for (const auto& r : results) {
      all.middleRows(row, r.replicates.rows()) = r.replicates;
      row += r.replicates.rows();
    }
    ctx.emit("bootstrap_replicates" + suffix + ".csv", [&](std::ostream& o) { write_replicates_csv(o, all, names); });
    boot_info["requested"] = requested;
    boot_info["failures"] = failures;
    boot_info["failure_rate"] = requested ? double(failures) / requested : 0.0;
    boot_info["pool"] = ctx.cfg["bootstrap"]["pool"];
    boot_info["sets"] = sets.size();
  }

  std::vector<RiskDifferenceRow> rows;
  for (std::size_t e = 0; e < estimands.size(); ++e) {
    auto r = risk_difference_table(out.contrasts[e], horizons, bounds[e]);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  ctx.emit("risk_differences" + suffix + ".csv", [&](std::ostream& o) { write_risk_difference_csv(o, rows); });
  ctx.emit("standardized_curves" + suffix + ".csv", [&](std::ostream& o) {
    bool header = true;
    for (const auto& c : out.contrasts) {
      write_contrast_csv(o, c, header);
      header = false;
    }
  });
  json j = {{"spec", spec.to_json()}, {"sets", sets.size()}, {"bootstrap", boot_info}, {"rows", json::array()}};
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  ctx.emit_json("standardize" + suffix + ".json", j);
  return out;
}

void stage_ipw(Context& ctx, const Cohort& cohort, std::span<const Cohort> sets,
               const StandardizeOutput* standardized) {
  ctx.begin("ipw");
  const CovariateSpec spec = spec_of(ctx, "propensity");
  WeightOptions wo;
  wo.estimand = estimand_from_string(ctx.cfg["weights"]["estimand"].get<std::string>());
  wo.stabilized = ctx.cfg["weights"]["stabilized"].get<bool>();
  wo.truncate_percentile = ctx.cfg["weights"]["truncate_percentile"].get<double>();
  std::vector<std::vector<double>> ps_sets, w_sets;
  json fits = json::array();
  for (const auto& set : sets) {
    const auto pm = fit_propensity(set, spec);
    if (!pm.fit.converged) throw EstimationError("propensity model did not converge");
    if (pm.fit.separated) throw EstimationError("propensity model shows separation");
    ps_sets.push_back(pm.predict(set));
    w_sets.push_back(ipw_weights(ps_sets.back(), set, wo));
    if (fits.empty()) fits.push_back(to_json(pm.fit));
  }
  const auto ps = average_over_sets(ps_sets);
  const auto w = average_over_sets(w_sets);
  const auto ipw = ipw_km(cohort, w);
  const auto km = arm_km(cohort);
  ctx.emit_json("propensity_model.json", fits.front());
  ctx.emit("weights.csv", [&](std::ostream& o) {
    o << "id,pkt,ps,weight\n";
    for (std::size_t i = 0; i < cohort.size(); ++i)
      o << cohort[i].id << ',' << (cohort[i].pkt ? 1 : 0) << ',' << format_double(ps[i]) << ','
        << format_double(w[i]) << '\n';
  });
  ctx.emit("ipw_curves.csv", [&](std::ostream& o) {
    write_curve_csv_header(o);
    write_curve_csv(o, "PKT KM", km.pkt);
    write_curve_csv(o, "Dialysis first KM", km.dialysis);
    write_curve_csv(o, "PKT IPW-KM", ipw.pkt);
    write_curve_csv(o, "Dialysis first IPW-KM", ipw.dialysis);
  });

  // Horizon comparison of the estimators per arm.
  const auto horizons = ctx.cfg["standardize"]["horizons"].get<std::vector<double>>();
  const StandardizedContrast* ate = nullptr;
  const StandardizedContrast* att = nullptr;
  const StandardizedContrast* atnt = nullptr;
  if (standardized)
    for (const auto& c : standardized->contrasts) {
      if (c.population == "ATE") ate = &c;
      if (c.population == "ATT") att = &c;
      if (c.population == "ATNT") atnt = &c;
    }
  json comp = json::array();
  ctx.emit("ipw_comparison.csv", [&](std::ostream& o) {
    o << "arm,horizon_years,method,estimate\n";
    auto row = [&](const char* arm, double h, const char* method, double v) {
      o << arm << ',' << format_double(h) << ',' << method << ',' << format_double(v) << '\n';
      comp.push_back({{"arm", arm}, {"horizon_years", h}, {"method", method}, {"estimate", v}});
    };
    for (double h : horizons) {
      const double t = h * kDaysPerYear;
      row("PKT", h, "KM", km.pkt(t));
      row("PKT", h, "IPW-KM", ipw.pkt(t));
      if (att) row("PKT", h, "standardized own arm", att->s1_at(t));
      if (ate) row("PKT", h, "standardized RRT", ate->s1_at(t));
      row("Dialysis first", h, "KM", km.dialysis(t));
      row("Dialysis first", h, "IPW-KM", ipw.dialysis(t));
      if (atnt) row("Dialysis first", h, "standardized own arm", atnt->s0_at(t));
      if (ate) row("Dialysis first", h, "standardized RRT", ate->s0_at(t));
    }
  });
  double sum_pkt = 0, sum_dial = 0, sq_pkt = 0, sq_dial = 0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    (cohort[i].pkt ? sum_pkt : sum_dial) += w[i];
    (cohort[i].pkt ? sq_pkt : sq_dial) += w[i] * w[i];
  }
  ctx.emit_json("ipw.json", {{"estimand", to_string(wo.estimand)},
                             {"stabilized", wo.stabilized},
                             {"truncate_percentile", wo.truncate_percentile},
                             {"sets", sets.size()},
                             {"weight_min", *std::min_element(w.begin(), w.end())},
                             {"weight_max", *std::max_element(w.begin(), w.end())},
                             {"effective_n", {{"pkt", sum_pkt * sum_pkt / sq_pkt}, {"dialysis", sum_dial * sum_dial / sq_dial}}},
                             {"comparison", comp}});
}

GestOptions gest_options(const Context& ctx) { return gest_options_from_json(ctx.cfg["gest"]["options"]); }

const Cohort& gest_data(Context& ctx, const Cohort& cohort, const Completed& sets) {
  const GestOptions go = gest_options(ctx);
  if (!needs_imputation(cohort, go.spec)) return cohort;
  const auto k = static_cast<std::size_t>(ctx.cfg["gest"]["imputed_set"].get<int>());
  if (!sets.imputed) throw ConfigError("gest: confounders have missing values; imputation required");
  if (k > sets.sets.size()) throw ConfigError("gest.imputed_set exceeds the number of imputed sets");
  return sets.sets[k - 1];
}

void stage_gest(Context& ctx, const Cohort& data) {
  ctx.begin("gest");
  const GestOptions go = gest_options(ctx);
  const auto one = solve_psi(data, go);
  ctx.log << "  " << one.report() << '\n';
  json j = {{"one_parameter", to_json(one)}};
  ctx.emit("aft_trace.csv", [&](std::ostream& o) { write_trace_csv(o, one); });
  if (ctx.cfg["gest"]["two_parameter"].get<bool>()) {
    ctx.begin("gest two-parameter");
    const auto two = solve_psi_two(data, go);
    ctx.log << "  " << two.report() << '\n';
    j["two_parameter"] = to_json(two);
    ctx.emit("aft_two_trace.csv", [&](std::ostream& o) { write_trace_csv(o, two); });
  }
  ctx.emit_json("aft.json", j);
}

void stage_sweep(Context& ctx, const Cohort& data) {
  ctx.begin("sweep");
  const auto cutoffs = ctx.cfg["sweep"]["cutoffs"].get<std::vector<double>>();
  const auto rows = recensoring_sweep(data, gest_options(ctx), cutoffs, ctx.cfg["sweep"]["min_events"].get<int>());
  ctx.emit("sweep.csv", [&](std::ostream& o) { write_sweep_csv(o, rows); });
  json j = json::array();
  for (const auto& r : rows) j.push_back(to_json(r));
  ctx.emit_json("sweep.json", j);
}

void stage_profiles(Context& ctx, const Cohort& cohort) {
  ctx.begin("profiles");
  const json& pc = ctx.cfg["profiles"];
  const double from = pc["from_year"].get<double>();
  const bool pkt = pc["arm"].get<std::string>() == "pkt";
  const CovariateSpec a = spec_of(ctx, "secondary"), b = spec_of(ctx, "outcome");
  Cohort sub;
  for (const auto& r : cohort) {
    if (r.pkt != pkt || r.entry_year() < from) continue;
    bool complete = true;
    for (std::size_t k = 0; k < kComorbidityCount; ++k)
      if (b.uses(kComorbidityNames[k]) && !r.comorbidity[k]) complete = false;
    if (complete) sub.push_back(r);
  }
  if (sub.empty()) throw DataError("profiles: no complete cases in the selected window");
  const CoxOptions co = cox_options(ctx);
  const CoxModel ma = fit_cox(sub, a, co), mb = fit_cox(sub, b, co);
  require_converged(ma.fit, "profile model A");
  require_converged(mb.fit, "profile model B");
  const auto pct = pc["percentiles"].get<std::vector<double>>();
  const auto p = profile_curves(ma, mb, sub, pct);
  ctx.emit("profiles.csv", [&](std::ostream& o) { write_profile_csv(o, p); });
  ctx.emit("profile_scatter.csv", [&](std::ostream& o) { write_scatter_csv(o, p); });
  double sup = 0.0;
  for (std::size_t k = 0; k < p.time.size(); ++k)
    sup = std::max(sup, std::abs(p.standardized_a[k] - p.standardized_b[k]));
  json rows = json::array();
  for (std::size_t j = 0; j < p.percentiles.size(); ++j)
    rows.push_back({{"percentile", p.percentiles[j]}, {"id_a", p.id_a[j]}, {"id_b", p.id_b[j]}});
  ctx.emit_json("profiles.json", {{"subjects", sub.size()},
                                  {"arm", pkt ? "pkt" : "dialysis"},
                                  {"from_year", from},
                                  {"model_a", a.to_json()},
                                  {"model_b", b.to_json()},
                                  {"standardized_sup_difference", sup},
                                  {"profiles", rows}});
}

// ---------------------------------------------------------------------------

void dispatch(Context& ctx) {
  const std::string& cmd = ctx.command;
  Loaded data = load_data(ctx);
  if (cmd == "simulate") {
    ctx.emit_json("simulation.json", ctx.cfg["simulation"]);
    return;
  }
  if (cmd == "ps") {
    stage_positivity(ctx, data.raw);
    return;
  }
  const bool pipeline = cmd == "pipeline";
  const Cohort cohort = eligible_cohort(ctx, data.raw, cmd == "describe" || pipeline);
  if (cmd == "describe") return stage_describe(ctx, cohort);
  if (cmd == "km") return stage_km(ctx, cohort);
  if (cmd == "cif") return stage_cif(ctx, cohort);
  if (cmd == "logrank") return stage_logrank(ctx, cohort);
  if (cmd == "impute") {
    const CovariateSpec all = CovariateSpec::parse(kFlags);
    const auto c = complete_sets(ctx, cohort, {all}, true);
    if (!c.imputed) ctx.emit_json("imputation.json", {{"m", 0}, {"note", "no missing comorbidity values"}});
    return;
  }
  if (cmd == "standardize") {
    const auto c = complete_sets(ctx, cohort, {spec_of(ctx, "outcome")}, true);
    stage_standardize(ctx, c.sets, spec_of(ctx, "outcome"), "");
    return;
  }
  if (cmd == "ipw") {
    const auto c = complete_sets(ctx, cohort, {spec_of(ctx, "propensity")}, true);
    stage_ipw(ctx, cohort, c.sets, nullptr);
    return;
  }
  if (cmd == "gest" || cmd == "sweep") {
    const auto c = complete_sets(ctx, cohort, {gest_options(ctx).spec}, true);
    const Cohort& d = gest_data(ctx, cohort, c);
    if (cmd == "gest") stage_gest(ctx, d);
    else stage_sweep(ctx, d);
    return;
  }
  if (!pipeline) throw ConfigError("unknown command '" + cmd + "'");

  stage_describe(ctx, cohort);
  stage_km(ctx, cohort);
  stage_cif(ctx, cohort);
  stage_logrank(ctx, cohort);
  stage_positivity(ctx, data.raw);
  const auto c = complete_sets(
      ctx, cohort, {spec_of(ctx, "outcome"), spec_of(ctx, "propensity"), gest_options(ctx).spec}, true);
  const auto std_main = stage_standardize(ctx, c.sets, spec_of(ctx, "outcome"), "");
  if (ctx.cfg["standardize"]["secondary"].get<bool>()) {
    const CovariateSpec sec = spec_of(ctx, "secondary");
    if (needs_imputation(cohort, sec)) throw ConfigError("specs.secondary must not need imputation");
    const std::vector<Cohort> one{cohort};
    stage_standardize(ctx, one, sec, "_secondary");
  }
  stage_ipw(ctx, cohort, c.sets, &std_main);
  const Cohort& gd = gest_data(ctx, cohort, c);
  stage_gest(ctx, gd);
  stage_sweep(ctx, gd);
  if (ctx.cfg["profiles"]["enabled"].get<bool>()) stage_profiles(ctx, cohort);
}

class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("output directory is locked by another run: " + path_.string());
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

const char* kind_name(int code) {
  switch (code) {
    case 2: return "config";
    case 3: return "estimation";
    case 4: return "data";
    default: return "internal";
  }
}

}  // namespace

int run_command(const std::string& command, const json& config, const fs::path& out_dir, std::ostream& log) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    log << "error: cannot create " << out_dir << ": " << ec.message() << '\n';
    return 4;
  }
  std::optional<DirLock> lock;
  try {
    lock.emplace(out_dir);
  } catch (const Error& e) {
    log << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  }
  for (const char* stale : {"FAILED", "error.json", "manifest.json"}) fs::remove(out_dir / stale, ec);

  Context ctx(command, out_dir, log);
  int code = 0;
  std::string message;
  try {
    if (std::find(commands().begin(), commands().end(), command) == commands().end())
      throw ConfigError("unknown command '" + command + "'");
    ctx.cfg = resolve_config(config);
    dispatch(ctx);
  } catch (const Error& e) {
    code = static_cast<int>(e.kind());
    message = e.what();
  } catch (const json::exception& e) {
    code = 2;
    message = e.what();
  } catch (const std::exception& e) {
    code = 1;
    message = e.what();
  }

  if (code != 0) {
    log << "error [" << ctx.stage << "]: " << message << '\n';
    json err = {{"status", "failed"},  {"exit_code", code},       {"kind", kind_name(code)},
                {"stage", ctx.stage},  {"message", message},      {"command", command},
                {"artifacts", ctx.artifacts}};
    if (message.find("no sign change") != std::string::npos) err["reason"] = "no sign change";
    if (!ctx.details.is_null()) err["details"] = ctx.details;
    std::ofstream(out_dir / "error.json") << err.dump(2) << '\n';
    std::ofstream(out_dir / "FAILED") << ctx.stage << '\n';
    return code;
  }

  json seeds = {{"simulation", ctx.cfg["simulation"]["seed"]},
                {"imputation", ctx.cfg["imputation"]["seed"]},
                {"bootstrap", ctx.cfg["bootstrap"]["seed"]},
                {"describe", ctx.cfg["describe"]["seed"]}};
  json manifest = {{"tool", "regsurv"},
                   {"version", kVersion},
                   {"command", command},
                   {"config", ctx.cfg},
                   {"config_hash", hex64(fnv1a64(ctx.cfg.dump()))},
                   {"seeds", seeds},
                   {"input", ctx.input_info},
                   {"artifacts", ctx.artifacts}};
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << '\n';
  return 0;
}

}  // namespace regsurv
