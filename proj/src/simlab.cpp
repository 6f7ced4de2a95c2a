#include "regsurv/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace regsurv {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CategoricalModel, levels, probs, log_hr, ps_coef)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ComorbidityModel, intercept, age_slope, year_slope,
                                                log_hr, ps_coef)

namespace {

// Field list shared by both directions of the JSON mapping.
#define REGSURV_SIM_FIELDS(X)                                                                     \
  X(name) X(n) X(seed) X(entry_start) X(entry_end) X(entry_growth) X(censor_date)                 \
  X(administrative_censoring) X(age_mean) X(age_sd) X(age_min) X(age_max) X(age_year_drift)       \
  X(female_prob) X(region) X(pkd) X(comorbidity) X(comorbidity_observed_from) X(comorbidity_mcar) \
  X(gfr) X(age_ref) X(year_ref) X(ps_intercept) X(ps_age) X(ps_age_over75) X(ps_female)          \
  X(ps_year) X(hazard_cuts) X(hazard_rates) X(hr_age) X(hr_female) X(hr_year) X(psi_w) X(psi_r)   \
  X(switch_rate_male) X(switch_rate_female) X(switch_age) X(cancer_prob) X(abroad_prob)           \
  X(foreign_prob) X(arm_quota) X(truth_n) X(truth_step_years) X(truth_max_years)

double effect(const std::vector<double>& v, std::size_t k) { return v.empty() ? 0.0 : v[k]; }

void check_categorical(const CategoricalModel& m, const std::string& what) {
  if (m.levels.empty() || m.levels.size() != m.probs.size())
    throw ConfigError(what + ": levels and probs must be nonempty and of equal length");
  double sum = 0.0;
  for (double p : m.probs) {
    if (!(p >= 0.0)) throw ConfigError(what + ": negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(what + ": probabilities must sum to 1");
  if (!m.log_hr.empty() && m.log_hr.size() != m.levels.size())
    throw ConfigError(what + ": log_hr length mismatch");
  if (!m.ps_coef.empty() && m.ps_coef.size() != m.levels.size())
    throw ConfigError(what + ": ps_coef length mismatch");
}

std::size_t draw_level(const CategoricalModel& m, Rng& rng) {
  double u = uniform01(rng);
  for (std::size_t k = 0; k + 1 < m.probs.size(); ++k) {
    if (u < m.probs[k]) return k;
    u -= m.probs[k];
  }
  return m.probs.size() - 1;
}

bool bernoulli(double p, Rng& rng) { return uniform01(rng) < p; }

// Latent subject before observation (censoring, missingness).
struct Latent {
  double year = 0.0;
  double age = 0.0;
  bool female = false;
  std::size_t region = 0, pkd = 0;
  std::array<bool, kComorbidityCount> flags{};
  bool pkt = false;
  double t1 = 0.0;      // potential survival under PKT, years
  double t0 = 0.0;      // potential survival under dialysis first
  double t_switch = 0;  // delayed transplant time under dialysis first (inf if none)
};

double ps_logit(const SimConfig& c, double age, double year, bool female,
                const std::array<bool, kComorbidityCount>& flags, std::size_t region,
                std::size_t pkd) {
  double lp = c.ps_intercept + c.ps_age * (age - c.age_ref) + c.ps_year * (year - c.year_ref) +
              (female ? c.ps_female : 0.0) + (age > 75.0 ? c.ps_age_over75 : 0.0) +
              effect(c.region.ps_coef, region) + effect(c.pkd.ps_coef, pkd);
  for (std::size_t k = 0; k < kComorbidityCount; ++k)
    if (flags[k]) lp += c.comorbidity[k].ps_coef;
  return lp;
}

// Inverts the piecewise-constant cumulative hazard at level h (years).
double invert_cumhaz(const SimConfig& c, double h) {
  const auto& cuts = c.hazard_cuts;
  const auto& rates = c.hazard_rates;
  for (std::size_t k = 0; k < cuts.size(); ++k) {
    const double width = k + 1 < cuts.size() ? cuts[k + 1] - cuts[k] : std::numeric_limits<double>::infinity();
    const double mass = rates[k] * width;
    if (h < mass) return cuts[k] + h / rates[k];
    h -= mass;
  }
  return std::numeric_limits<double>::infinity();
}

Latent draw_latent(const SimConfig& c, Rng& rng) {
  Latent s;
  const double span = c.entry_end - c.entry_start;
  const double u = uniform01(rng);
  s.year = c.entry_start + (c.entry_growth > 0.0
                                ? std::log1p(u * std::expm1(c.entry_growth * span)) / c.entry_growth
                                : u * span);
  const double mean_age = c.age_mean + c.age_year_drift * (s.year - c.year_ref);
  do {
    s.age = mean_age + c.age_sd * standard_normal(rng);
  } while (s.age < c.age_min || s.age > c.age_max);
  s.female = bernoulli(c.female_prob, rng);
  s.region = draw_level(c.region, rng);
  s.pkd = draw_level(c.pkd, rng);
  double lp = c.hr_age * (s.age - c.age_ref) + c.hr_year * (s.year - c.year_ref) +
              (s.female ? c.hr_female : 0.0) + effect(c.region.log_hr, s.region) +
              effect(c.pkd.log_hr, s.pkd);
  for (std::size_t k = 0; k < kComorbidityCount; ++k) {
    const auto& m = c.comorbidity[k];
    s.flags[k] = bernoulli(
        expit(m.intercept + m.age_slope * (s.age - c.age_ref) + m.year_slope * (s.year - c.year_ref)), rng);
    if (s.flags[k]) lp += m.log_hr;
  }
  s.pkt = bernoulli(expit(ps_logit(c, s.age, s.year, s.female, s.flags, s.region, s.pkd)), rng);

  const double e = -std::log(uniform01(rng));
  s.t1 = invert_cumhaz(c, e * std::exp(-lp));
  const double rate = (s.female ? c.switch_rate_female : c.switch_rate_male) *
                      std::exp(c.switch_age * (s.age - c.age_ref));
  const double v = uniform01(rng);
  const double clock = rate > 0.0 ? -std::log(v) / rate : std::numeric_limits<double>::infinity();

  // Dialysis first: T1 = T_w exp(-psi_w) + T_r exp(-psi_r).
  const double natural = s.t1 * std::exp(c.psi_w);
  if (clock >= natural) {
    s.t0 = natural;
    s.t_switch = std::numeric_limits<double>::infinity();
  } else {
    s.t_switch = clock;
    s.t0 = clock + (s.t1 - clock * std::exp(-c.psi_w)) * std::exp(c.psi_r);
  }
  return s;
}

}  // namespace

void SimConfig::validate() const {
  if (n == 0 && arm_quota[0] + arm_quota[1] == 0) throw ConfigError("simulation: n must be positive");
  if (!(entry_end > entry_start)) throw ConfigError("simulation: empty entry window");
  if (entry_growth < 0.0) throw ConfigError("simulation: entry_growth must be nonnegative");
  if (!parse_date(censor_date)) throw ConfigError("simulation: invalid censor_date '" + censor_date + "'");
  if (!(age_sd > 0.0) || !(age_max > age_min)) throw ConfigError("simulation: invalid age distribution");
  if (!(female_prob > 0.0 && female_prob < 1.0))
    throw ConfigError("simulation: female_prob must lie in (0,1)");
  check_categorical(region, "simulation region");
  check_categorical(pkd, "simulation pkd");
  if (hazard_cuts.empty() || hazard_cuts.size() != hazard_rates.size() || hazard_cuts[0] != 0.0)
    throw ConfigError("simulation: hazard_cuts must start at 0 and match hazard_rates");
  for (std::size_t k = 0; k < hazard_rates.size(); ++k) {
    if (!(hazard_rates[k] > 0.0)) throw ConfigError("simulation: hazards must be positive");
    if (k && !(hazard_cuts[k] > hazard_cuts[k - 1])) throw ConfigError("simulation: hazard_cuts must increase");
  }
  if (switch_rate_male < 0.0 || switch_rate_female < 0.0)
    throw ConfigError("simulation: switch rates must be nonnegative");
  for (const auto* a : {&cancer_prob, &abroad_prob, &foreign_prob})
    for (double p : *a)
      if (!(p >= 0.0 && p < 1.0)) throw ConfigError("simulation: eligibility probabilities must lie in [0,1)");
  if (!(comorbidity_mcar >= 0.0 && comorbidity_mcar < 1.0))
    throw ConfigError("simulation: comorbidity_mcar must lie in [0,1)");
  if (!(truth_step_years > 0.0) || !(truth_max_years > truth_step_years))
    throw ConfigError("simulation: invalid truth grid");
}

json to_json(const SimConfig& c) {
  json j;
#define X(f) j[#f] = c.f;
  REGSURV_SIM_FIELDS(X)
#undef X
  return j;
}

SimConfig sim_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("simulation config must be a JSON object");
  SimConfig c;
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  const json known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "preset" && !known.contains(it.key()))
      throw ConfigError("unknown simulation key '" + it.key() + "'");
  try {
#define X(f) if (j.contains(#f)) j.at(#f).get_to(c.f);
    REGSURV_SIM_FIELDS(X)
#undef X
  } catch (const json::exception& e) {
    throw ConfigError(std::string("simulation config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Presets

namespace {

CategoricalModel default_regions() {
  return {{"Stockholm", "UppsalaOrebro", "Northern", "Southern", "Southeastern", "Western"},
          {0.22, 0.20, 0.10, 0.18, 0.10, 0.20},
          {},
          {}};
}

CategoricalModel default_pkd() {
  return {{"DN", "GN", "UNK", "PKD", "PYN", "OTH"}, {0.25, 0.20, 0.15, 0.10, 0.10, 0.20}, {}, {}};
}

std::array<ComorbidityModel, kComorbidityCount> flat_comorbidities() {
  std::array<ComorbidityModel, kComorbidityCount> m{};
  const double prev[] = {0.3, 0.6, 0.2, 0.1, 0.15};
  for (std::size_t k = 0; k < kComorbidityCount; ++k) m[k].intercept = logit(prev[k]);
  return m;
}

SimConfig base_config(const std::string& name) {
  SimConfig c;
  c.name = name;
  c.region = default_regions();
  c.pkd = default_pkd();
  c.comorbidity = flat_comorbidities();
  return c;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"null_effect", "calendar_trend", "immortal_time",
                                                 "aft_effect", "paper_calibration"};
  return names;
}

SimConfig preset(const std::string& name) {
  if (name == "null_effect") {
    // Treatment unrelated to everything; exponential survival at 0.1/y.
    SimConfig c = base_config(name);
    c.ps_intercept = -1.0;
    c.hazard_rates = {0.1};
    c.switch_rate_male = c.switch_rate_female = 0.1;
    return c;
  }
  if (name == "calendar_trend") {
    // Hazard falls 3% per calendar year, intake grows, PKT spreads to later cohorts.
    SimConfig c = base_config(name);
    c.entry_growth = 0.1;
    c.year_ref = 2004.5;
    c.hr_year = -0.03;
    c.hr_age = 0.06;
    c.hr_female = -0.1;
    c.comorbidity[0] = {-0.5, 0.04, 0.0, 0.7, -0.8};
    c.ps_intercept = -1.0;
    c.ps_age = -0.08;
    c.ps_year = 0.02;
    c.hazard_cuts = {0.0, 2.0, 5.0};
    c.hazard_rates = {0.021, 0.07, 0.175};
    c.psi_w = c.psi_r = -std::log(2.0);
    c.switch_rate_male = c.switch_rate_female = 0.1;
    return c;
  }
  if (name == "immortal_time") {
    // No treatment effect; younger dialysis patients are transplanted sooner.
    SimConfig c = base_config(name);
    c.hr_age = 0.04;
    c.ps_intercept = -2.0;
    c.ps_age = -0.05;
    c.hazard_rates = {0.1};
    c.switch_rate_male = c.switch_rate_female = 0.3;
    c.switch_age = -0.03;
    return c;
  }
  if (name == "aft_effect") {
    // exp(-psi_w) = 2, psi_r = 0; confounded by age and sex, no calendar trend.
    // Sex-specific transplant rates identify the two-parameter model.
    SimConfig c = base_config(name);
    c.female_prob = 0.5;
    c.hr_age = 0.05;
    c.hr_female = -0.2;
    c.ps_intercept = -0.4;
    c.ps_age = -0.05;
    c.ps_female = -0.3;
    c.hazard_rates = {0.05};
    c.psi_w = -std::log(2.0);
    c.psi_r = 0.0;
    c.switch_rate_male = 0.05;
    c.switch_rate_female = 0.5;
    return c;
  }
  if (name == "paper_calibration") {
    // Margins of the Swedish registry tables: arm split, exclusions, crude rates.
    SimConfig c = base_config(name);
    c.n = 29526;
    c.entry_growth = 0.02;
    c.age_mean = 64.7;
    c.age_sd = 15.0;
    c.age_max = 95.0;
    c.age_year_drift = 0.25;
    c.year_ref = 2004.0;
    c.female_prob = 0.36;
    c.region.ps_coef = {0.0, 0.1, -0.2, 0.2, 0.0, 0.1};
    c.pkd.ps_coef = {-0.8, 0.6, -0.2, 1.2, 0.4, 0.0};
    c.pkd.log_hr = {0.0, -0.4, -0.1, -0.7, -0.3, -0.1};
    c.comorbidity[0] = {logit(0.3), 0.01, 0.02, 0.4, -0.7};
    c.comorbidity[1] = {logit(0.6), 0.02, 0.0, 0.1, -0.2};
    c.comorbidity[2] = {logit(0.2), 0.05, -0.02, 0.3, -0.6};
    c.comorbidity[3] = {logit(0.1), 0.05, 0.0, 0.3, -0.5};
    c.comorbidity[4] = {logit(0.15), 0.05, 0.0, 0.3, -0.5};
    c.comorbidity_observed_from = 1998.0;
    c.comorbidity_mcar = 0.05;
    c.gfr = true;
    c.ps_intercept = -3.0;
    c.ps_age = -0.08;
    c.ps_age_over75 = -3.0;
    c.ps_female = -0.1;
    c.ps_year = 0.04;
    c.hr_age = 0.04;
    c.hr_female = -0.05;
    c.hr_year = -0.02;
    c.hazard_cuts = {0.0, 1.0};
    c.hazard_rates = {0.036, 0.031};
    c.psi_w = -std::log(4.8);
    c.psi_r = 0.0;
    c.switch_rate_male = 0.11;
    c.switch_rate_female = 0.06;
    c.switch_age = -0.06;
    // Conditional on passing the earlier exclusions.
    c.cancer_prob = {0.119, 0.032};
    c.abroad_prob = {0.004, 0.048};
    c.foreign_prob = {0.006, 0.015};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------

double GroundTruth::at(const std::vector<double>& grid, const std::vector<double>& curve, double t) {
  if (grid.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (t <= grid.front()) return curve.front();
  if (t >= grid.back()) return curve.back();
  const auto it = std::upper_bound(grid.begin(), grid.end(), t);
  const auto k = static_cast<std::size_t>(it - grid.begin());
  const double f = (t - grid[k - 1]) / (grid[k] - grid[k - 1]);
  return curve[k - 1] + f * (curve[k] - curve[k - 1]);
}

json to_json(const GroundTruth& g) {
  auto curves = [](const TruthCurves& c) { return json{{"s1", c.s1}, {"s0", c.s0}}; };
  return {{"config", to_json(g.config)},
          {"psi_w", g.config.psi_w},
          {"psi_r", g.config.psi_r},
          {"exp_neg_psi_w", std::exp(-g.config.psi_w)},
          {"exp_neg_psi_r", std::exp(-g.config.psi_r)},
          {"pkt_fraction", g.pkt_fraction},
          {"propensity",
           {{"intercept", g.config.ps_intercept},
            {"age", g.config.ps_age},
            {"age_over75", g.config.ps_age_over75},
            {"female", g.config.ps_female},
            {"year", g.config.ps_year},
            {"age_ref", g.config.age_ref},
            {"year_ref", g.config.year_ref}}},
          {"time_years", g.time_years},
          {"ate", curves(g.ate)},
          {"att", curves(g.att)},
          {"atnt", curves(g.atnt)}};
}

double true_propensity(const SimConfig& c, const SubjectRecord& r) {
  std::array<bool, kComorbidityCount> flags{};
  for (std::size_t k = 0; k < kComorbidityCount; ++k) flags[k] = r.comorbidity[k].value_or(false);
  auto index = [](const CategoricalModel& m, const std::string& v) {
    auto it = std::find(m.levels.begin(), m.levels.end(), v);
    return it == m.levels.end() ? std::size_t{0} : static_cast<std::size_t>(it - m.levels.begin());
  };
  return expit(ps_logit(c, r.age, r.entry_year(), r.sex == Sex::female, flags, index(c.region, r.region),
                        index(c.pkd, r.pkd)));
}

namespace {

GroundTruth monte_carlo_truth(const SimConfig& c, std::uint64_t seed) {
  GroundTruth g;
  g.config = c;
  const auto k_max = static_cast<std::size_t>(std::llround(c.truth_max_years / c.truth_step_years));
  g.time_years.resize(k_max + 1);
  for (std::size_t k = 0; k <= k_max; ++k) g.time_years[k] = k * c.truth_step_years;

  // Histogram of potential times by grid bin; S(t_k) = share with bin >= k.
  std::array<std::vector<double>, 6> hist;
  for (auto& h : hist) h.assign(k_max + 2, 0.0);
  auto bin = [&](double t) {
    const double b = std::floor(t / c.truth_step_years);
    return b > static_cast<double>(k_max) ? k_max + 1 : static_cast<std::size_t>(b);
  };
  Rng rng = make_rng(seed, fnv1a64("ground-truth"));
  std::size_t n_pkt = 0;
  for (std::size_t i = 0; i < c.truth_n; ++i) {
    const Latent s = draw_latent(c, rng);
    const auto b1 = bin(s.t1), b0 = bin(s.t0);
    hist[0][b1] += 1;
    hist[1][b0] += 1;
    hist[s.pkt ? 2 : 4][b1] += 1;
    hist[s.pkt ? 3 : 5][b0] += 1;
    n_pkt += s.pkt;
  }
  g.pkt_fraction = static_cast<double>(n_pkt) / c.truth_n;
  auto survival = [&](const std::vector<double>& h, double total) {
    std::vector<double> s(k_max + 1);
    double above = h[k_max + 1];  // beyond the grid
    for (std::size_t k = k_max + 1; k-- > 0;) {
      above += h[k];
      s[k] = total > 0 ? above / total : std::numeric_limits<double>::quiet_NaN();
    }
    // bin >= k counts times >= t_k; the first point is survival at 0.
    s[0] = 1.0;
    return s;
  };
  const double n = static_cast<double>(c.truth_n);
  g.ate = {survival(hist[0], n), survival(hist[1], n)};
  g.att = {survival(hist[2], n_pkt), survival(hist[3], n_pkt)};
  g.atnt = {survival(hist[4], n - n_pkt), survival(hist[5], n - n_pkt)};
  return g;
}

}  // namespace

Simulation simulate_registry(const SimConfig& config, std::uint64_t seed, bool compute_truth) {
  config.validate();
  Simulation sim;
  const Date censor = *parse_date(config.censor_date);
  Rng rng = make_rng(seed, fnv1a64("cohort"));
  const bool quota = config.arm_quota[0] + config.arm_quota[1] > 0;
  std::array<std::size_t, 2> filled{0, 0};
  const std::size_t target = quota ? config.arm_quota[0] + config.arm_quota[1] : config.n;
  sim.records.reserve(target);

  for (std::size_t drawn = 0; sim.records.size() < target; ++drawn) {
    if (quota && drawn > 1000 * target) throw ConfigError("simulation: arm quota cannot be filled");
    const Latent s = draw_latent(config, rng);
    SubjectRecord r;
    r.entry_date = date_from_calendar_year(s.year);
    r.age = std::round(s.age * 100.0) / 100.0;
    r.sex = s.female ? Sex::female : Sex::male;
    r.region = config.region.levels[s.region];
    r.pkd = config.pkd.levels[s.pkd];
    r.pkt = s.pkt;
    const bool missing_era = s.year < config.comorbidity_observed_from;
    for (std::size_t k = 0; k < kComorbidityCount; ++k) {
      const bool mcar = bernoulli(config.comorbidity_mcar, rng);
      if (missing_era || mcar) r.comorbidity[k] = std::nullopt;
      else r.comorbidity[k] = s.flags[k];
    }
    const double g = 8.0 + 3.0 * standard_normal(rng);
    if (config.gfr && s.year >= 2008.0) r.gfr = std::round(std::max(1.0, g) * 10.0) / 10.0;
    const int arm = s.pkt ? 1 : 0;
    r.cancer = bernoulli(config.cancer_prob[arm], rng);
    r.abroad = bernoulli(config.abroad_prob[arm], rng);
    if (bernoulli(config.foreign_prob[arm], rng)) r.region = "Foreign";

    if (quota) {
      if (filled[arm] >= config.arm_quota[arm]) continue;
      ++filled[arm];
    }

    const double c_days = config.administrative_censoring
                              ? static_cast<double>((censor - r.entry_date).count())
                              : std::numeric_limits<double>::infinity();
    const double t_days = (s.pkt ? s.t1 : s.t0) * kDaysPerYear;
    if (t_days < c_days) {
      r.event = true;
      r.t_days = static_cast<int>(std::min<double>(std::llround(t_days), c_days));
    } else {
      r.event = false;
      r.t_days = static_cast<int>(std::max(0.0, c_days));
    }
    if (!s.pkt && std::isfinite(s.t_switch)) {
      const double sw = s.t_switch * kDaysPerYear;
      if (sw < std::min(t_days, c_days) && r.t_days >= 1)
        r.t_switch_days = static_cast<int>(std::clamp<long long>(std::llround(sw), 1, r.t_days));
    }
    r.id = "S" + std::to_string(sim.records.size() + 1);
    sim.records.push_back(std::move(r));
  }
  if (compute_truth) sim.truth = monte_carlo_truth(config, seed);
  else sim.truth.config = config;
  return sim;
}

}  // namespace regsurv
