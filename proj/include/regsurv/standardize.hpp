#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regsurv/coxmod.hpp"
#include "regsurv/missing.hpp"
#include "regsurv/weighting.hpp"

namespace regsurv {

/// Model-based survival under each initial treatment, averaged over one
/// covariate population. Times in days.
struct StandardizedContrast {
  std::string population;  // ATE, ATT, ATNT or a custom tag
  std::vector<double> time;
  std::vector<double> s1, s0, diff;
  double max_time = 0.0;  // shorter of the two arms' follow-up

  std::size_t index_at(double t) const;
  double s1_at(double t) const { return s1[index_at(t)]; }
  double s0_at(double t) const { return s0[index_at(t)]; }
};

// Rows of `records` forming the standard population for an estimand.
Cohort population_rows(std::span<const SubjectRecord> records, Estimand e);

// Mean of exp(-Lambda(t) exp(eta_i)) over the population at each time (days).
std::vector<double> standardized_survival(const CoxModel& model, std::span<const SubjectRecord> population,
                                          std::span<const double> times);

/// Grid defaults to the union of both fits' event times, with 0 prepended.
StandardizedContrast standardized_curves(const CoxModel& fit_pkt, const CoxModel& fit_dial,
                                         std::span<const SubjectRecord> population,
                                         const std::string& label, std::span<const double> grid = {});

// Per-arm Cox fits with categorical levels taken from the whole cohort.
struct ArmModels {
  CoxModel pkt;
  CoxModel dialysis;
};
ArmModels fit_arm_models(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                         const CoxOptions& opts = {});

inline const std::vector<double>& default_horizons() {
  static const std::vector<double> h = {1, 5, 10, 15, 20, 25};
  return h;
}

/// Bootstrap statistic: refit both arms and return, for each estimand and
/// horizon (years), the triple S1, S0, S1 - S0.
Statistic standardize_statistic(const CovariateSpec& spec, std::vector<double> horizons_years,
                                std::vector<Estimand> estimands, const CoxOptions& opts = {});

struct HorizonBounds {
  std::array<double, 2> s1{}, s0{}, diff{};
};

struct RiskDifferenceRow {
  std::string label;
  double horizon_years = 0.0;
  bool extrapolated = false;  // horizon beyond follow-up, no value reported
  double s1 = 0, s0 = 0, diff = 0;
  std::optional<HorizonBounds> ci;

  // "RRT, 5y: 0.78 (0.72,0.86) | 0.55 (0.54,0.56) | 0.23 (0.17,0.31)"
  std::string format() const;
};

// Display label of an estimand's population: RRT, PKT or Dialysis first.
std::string population_label(const std::string& tag);

/// Evaluates the contrast at each horizon (value at the latest grid time <= horizon).
std::vector<RiskDifferenceRow> risk_difference_table(const StandardizedContrast& c,
                                                     std::span<const double> horizons_years,
                                                     std::span<const HorizonBounds> ci = {});

void write_risk_difference_csv(std::ostream& out, std::span<const RiskDifferenceRow> rows);
void write_contrast_csv(std::ostream& out, const StandardizedContrast& c, bool header = true);
json to_json(const RiskDifferenceRow& r);

struct ProfileCurves {
  std::vector<double> time;  // days
  std::vector<double> percentiles;
  std::vector<std::string> id_a, id_b;  // profile subject per percentile
  std::vector<std::vector<double>> curve_a, curve_b;
  std::vector<std::string> ids;  // scatter
  std::vector<double> score_a, score_b;
  std::vector<double> standardized_a, standardized_b;
};

/// Subjects at the given percentiles of each model's own linear-predictor
/// distribution (high score = high risk), plus the per-subject score scatter.
ProfileCurves profile_curves(const CoxModel& fit_a, const CoxModel& fit_b,
                             std::span<const SubjectRecord> records,
                             std::span<const double> percentiles = std::vector<double>{5, 25, 50, 75, 95, 100},
                             std::span<const double> grid = {});

void write_profile_csv(std::ostream& out, const ProfileCurves& p);
void write_scatter_csv(std::ostream& out, const ProfileCurves& p);

}  // namespace regsurv
