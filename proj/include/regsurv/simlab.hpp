#pragma once

#include <array>
#include <string>
#include <vector>

#include "regsurv/registry.hpp"

namespace regsurv {

/// Categorical covariate with per-level hazard and treatment log-odds effects.
struct CategoricalModel {
  std::vector<std::string> levels;
  std::vector<double> probs;
  std::vector<double> log_hr;   // empty means all zero
  std::vector<double> ps_coef;  // empty means all zero
};

/// Comorbidity prevalence: logit p = intercept + age_slope (age - age_ref)
/// + year_slope (year - year_ref).
struct ComorbidityModel {
  double intercept = -1.0;
  double age_slope = 0.0;
  double year_slope = 0.0;
  double log_hr = 0.0;
  double ps_coef = 0.0;
};

struct SimConfig {
  std::string name = "custom";
  std::size_t n = 20000;
  std::uint64_t seed = 1;

  // Registry intake: entry density proportional to exp(entry_growth * (y - entry_start)).
  double entry_start = 1991.0;
  double entry_end = 2018.0;
  double entry_growth = 0.0;
  std::string censor_date = "2017-12-31";
  bool administrative_censoring = true;

  double age_mean = 58.0, age_sd = 13.0, age_min = 18.0, age_max = 75.0;
  double age_year_drift = 0.0;  // change in mean age per calendar year
  double female_prob = 0.35;
  CategoricalModel region{{"Stockholm"}, {1.0}, {}, {}};
  CategoricalModel pkd{{"DN"}, {1.0}, {}, {}};
  std::array<ComorbidityModel, kComorbidityCount> comorbidity{};
  // Entries before this calendar year have all comorbidity flags missing (0 = none).
  double comorbidity_observed_from = 0.0;
  double comorbidity_mcar = 0.0;  // per-cell MCAR missingness after that
  bool gfr = false;               // emit a gfr column (observed from 2008 on)

  double age_ref = 58.0;
  double year_ref = 2004.0;

  // Treatment model, logit P(PKT).
  double ps_intercept = -1.0;
  double ps_age = 0.0;
  double ps_age_over75 = 0.0;
  double ps_female = 0.0;
  double ps_year = 0.0;

  // Potential survival under PKT: piecewise-constant baseline hazard per year
  // with cut points in years (first cut 0), times exp(linear predictor).
  std::vector<double> hazard_cuts{0.0};
  std::vector<double> hazard_rates{0.1};
  double hr_age = 0.0;
  double hr_female = 0.0;
  double hr_year = 0.0;  // log hazard change per calendar year

  // Structural AFT parameters: a year on initial dialysis is worth exp(-psi_w)
  // years under PKT, a year after a delayed transplant exp(-psi_r).
  double psi_w = 0.0;
  double psi_r = 0.0;

  // Delayed transplant clock while on dialysis, events per year.
  double switch_rate_male = 0.0;
  double switch_rate_female = 0.0;
  double switch_age = 0.0;  // log rate change per year of age

  // Eligibility-only attributes, probability per arm {dialysis, pkt}.
  std::array<double, 2> cancer_prob{0.0, 0.0};
  std::array<double, 2> abroad_prob{0.0, 0.0};
  std::array<double, 2> foreign_prob{0.0, 0.0};

  // Draw subjects until {dialysis, pkt} counts are met; n is ignored when set.
  std::array<std::size_t, 2> arm_quota{0, 0};

  std::size_t truth_n = 1000000;
  double truth_step_years = 0.05;
  double truth_max_years = 30.0;

  void validate() const;
};

json to_json(const SimConfig& c);
// Missing keys keep their defaults; unknown keys are a ConfigError.
SimConfig sim_config_from_json(const json& j);

/// Named scenario configs.
SimConfig preset(const std::string& name);
const std::vector<std::string>& preset_names();

struct TruthCurves {
  std::vector<double> s1, s0;
};

struct GroundTruth {
  SimConfig config;
  std::vector<double> time_years;
  TruthCurves ate, att, atnt;  // marginal over full / PKT / dialysis populations
  double pkt_fraction = 0.0;

  // Linear interpolation on the grid; t in years.
  static double at(const std::vector<double>& grid, const std::vector<double>& curve, double t);
  double s1(double t) const { return at(time_years, ate.s1, t); }
  double s0(double t) const { return at(time_years, ate.s0, t); }
};

json to_json(const GroundTruth& g);

// Probability of PKT under the configured treatment model.
double true_propensity(const SimConfig& c, const SubjectRecord& r);

struct Simulation {
  Cohort records;
  GroundTruth truth;
};

/// Draws a registry cohort. `compute_truth` runs the Monte Carlo oracle.
Simulation simulate_registry(const SimConfig& config, std::uint64_t seed, bool compute_truth = true);
inline Simulation simulate_registry(const SimConfig& config, bool compute_truth = true) {
  return simulate_registry(config, config.seed, compute_truth);
}

}  // namespace regsurv
