#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace regsurv {

using json = nlohmann::json;

/// Right-continuous step function starting at (0, 1). Entries after the first
/// sit at distinct event times, in days.
struct SurvivalCurve {
  std::vector<double> time{0.0};
  std::vector<double> surv{1.0};
  std::vector<double> lo{1.0};
  std::vector<double> hi{1.0};
  std::vector<double> at_risk{0.0};
  std::vector<double> events{0.0};
  // Greenwood sum  sum d / (n (n - d)) up to each time.
  std::vector<double> greenwood{0.0};
  double last_time = 0.0;  // largest observed time, event or censored
  bool weighted = false;

  std::size_t index_at(double t) const;
  // Value at the latest grid time <= t.
  double operator()(double t) const { return surv[index_at(t)]; }
  // Greenwood standard error of S(t).
  double se(double t) const;
};

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events,
                           std::span<const double> weights = {});

// Smallest grid time with S(t) <= 0.5; NaN if the curve never gets there.
double median_time(const SurvivalCurve& c);

struct CifCurves {
  std::vector<double> time{0.0};
  std::vector<std::vector<double>> cif;  // [type - 1][k]
  std::vector<double> surv{1.0};         // overall event-free survival
  std::vector<double> at_risk{0.0};

  std::size_t types() const { return cif.size(); }
};

/// Aalen-Johansen estimator; event codes 0 (censored) and 1..K.
CifCurves cumulative_incidence(std::span<const double> times, std::span<const int> event_type);

struct TestResult {
  double statistic = 0.0;
  int df = 0;
  double p = 1.0;
  std::vector<double> observed, expected;
};

TestResult log_rank(std::span<const int> groups, std::span<const double> times,
                    std::span<const int> events);

/// Long-format export. Times are written in years.
void write_curve_csv_header(std::ostream& out);
void write_curve_csv(std::ostream& out, const std::string& label, const SurvivalCurve& c);
void write_cif_csv(std::ostream& out, const CifCurves& c, std::span<const std::string> type_names);
json to_json(const SurvivalCurve& c);
json to_json(const TestResult& r);

}  // namespace regsurv
