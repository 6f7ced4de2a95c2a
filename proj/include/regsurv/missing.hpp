#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "regsurv/registry.hpp"

namespace regsurv {

struct ImputationConfig {
  int m = 10;
  int iterations = 10;
  std::uint64_t seed = 1;
  // Draw coefficients from the asymptotic normal of each fit before imputing.
  bool proper = true;
  // Subset of: age, sex, region, pkd, year, pkt, event, log_time.
  std::vector<std::string> predictors{"age", "sex", "region", "pkd", "year", "pkt", "event", "log_time"};

  void validate() const;
};

json to_json(const ImputationConfig& c);
ImputationConfig imputation_config_from_json(const json& j);

struct ImputationResult {
  std::vector<Cohort> sets;
  // trace[set][iteration][flag]: prevalence of the flag after that iteration.
  std::vector<std::vector<std::array<double, kComorbidityCount>>> trace;
};

/// Chained-equations imputation of the five comorbidity flags with one
/// logistic model per flag; the other flags enter at their current values.
ImputationResult impute_chained(std::span<const SubjectRecord> records, const ImputationConfig& config);

void write_imputed_csv(std::ostream& out, std::span<const Cohort> sets);
void write_trace_csv(std::ostream& out, const ImputationResult& r);

// ---------------------------------------------------------------------------
// Bootstrap

using Statistic = std::function<std::vector<double>(std::span<const SubjectRecord>)>;

struct BootstrapResult {
  std::vector<double> point;   // statistic on the original sample
  Eigen::MatrixXd replicates;  // successful replicates x dimension
  std::vector<double> lo, hi;  // 2.5 / 97.5 percentiles
  std::size_t requested = 0;
  std::size_t failures = 0;

  double failure_rate() const { return requested ? static_cast<double>(failures) / requested : 0.0; }
};

/// Subject-level resampling. Draws are keyed to the id-sorted subject list, so
/// replicates do not depend on input row order. A replicate whose statistic
/// throws or returns non-finite values is dropped and counted.
BootstrapResult bootstrap(const Statistic& statistic, std::span<const SubjectRecord> records, int B,
                          std::uint64_t seed, bool compute_point = true);

// Percentile interval of each replicate column.
void percentile_ci(const Eigen::MatrixXd& replicates, std::vector<double>& lo, std::vector<double>& hi,
                   double level = 0.95);

enum class PoolMethod { percentile, rubin };

struct PooledEstimate {
  std::vector<double> point, lo, hi;
  std::vector<std::vector<double>> per_set;
  std::size_t m = 0;
  std::size_t replicates = 0;  // pooled replicate count
  PoolMethod method = PoolMethod::percentile;
};

/// Boot-within-impute pooling: point is the mean of per-set points, CI the
/// percentiles of the concatenated replicate pool (or Rubin's rules).
PooledEstimate pool(std::span<const BootstrapResult> sets, PoolMethod method = PoolMethod::percentile);

// Per-subject mean over imputed sets, e.g. for IPW weights.
std::vector<double> average_over_sets(std::span<const std::vector<double>> per_set);

void write_replicates_csv(std::ostream& out, const Eigen::MatrixXd& replicates,
                          std::span<const std::string> names);

}  // namespace regsurv
