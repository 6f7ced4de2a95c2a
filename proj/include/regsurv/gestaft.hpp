#pragma once

#include <Eigen/Dense>
#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "regsurv/coxmod.hpp"

namespace regsurv {

struct TransformedTime {
  double time = 0.0;  // days
  int event = 0;
};

/// T(psi) = t_w exp(-psi_w) + t_r exp(-psi_r) for subjects starting on
/// dialysis. PKT subjects are observed under treatment already and keep their
/// time. With `recensor_years`, times beyond the cutoff are censored there.
TransformedTime transform_time(const SubjectRecord& r, double psi_w, double psi_r,
                               std::optional<double> recensor_years = std::nullopt);

struct GestOptions {
  CovariateSpec spec = CovariateSpec::outcome_default();
  double lower = -3.0, upper = 1.0;  // bracket for each psi
  double grid_step = 0.02;
  double tolerance = 1e-4;  // bisection width on psi
  double z_crit = 1.96;
  std::optional<double> recensor_years;
  Ties ties = Ties::efron;
  // Two-parameter search.
  double coarse_step = 0.25;
  double fine_step = 0.05;
  double joint_tolerance = 0.05;  // max |z| at the reported joint root

  void validate() const;
};

json to_json(const GestOptions& o);
GestOptions gest_options_from_json(const json& j);

/// Coefficients of PKT (and PKT x female in the two-parameter model) from a
/// Cox fit on transformed times.
struct EstimatingValue {
  double psi_w = 0.0, psi_r = 0.0;
  bool available = false;  // fit failed or did not converge
  std::array<double, 2> beta{}, se{}, z{};
  double corr = 0.0;  // correlation of the two coefficients
  int events = 0;

  double max_abs_z(int k) const;
};

/// Design is encoded once; each evaluation only re-times the subjects.
class GestProblem {
 public:
  GestProblem(std::span<const SubjectRecord> records, const GestOptions& opts, int parameters);

  EstimatingValue evaluate(double psi_w, double psi_r);
  int parameters() const { return parameters_; }
  std::size_t size() const { return records_.size(); }
  const GestOptions& options() const { return opts_; }

 private:
  std::vector<SubjectRecord> records_;
  GestOptions opts_;
  int parameters_;
  Eigen::MatrixXd X_;
  Eigen::VectorXd warm_;
  std::vector<double> time_;
  std::vector<int> event_;
};

EstimatingValue estimating_statistic(std::span<const SubjectRecord> records, double psi,
                                     const GestOptions& opts = {});

struct AftEstimate {
  int parameters = 1;
  double psi_w = 0.0, psi_r = 0.0;
  std::array<double, 2> ci_w{}, ci_r{};  // on the psi scale
  std::array<bool, 2> ci_w_open{}, ci_r_open{};  // endpoint ran into the bracket
  double max_abs_z = 0.0;                         // at the estimate
  bool converged = false;
  bool ambiguous = false;
  std::vector<std::array<double, 2>> roots;  // every candidate (psi_w, psi_r)
  std::optional<double> recensor_years;
  int events_retained = 0;
  std::vector<EstimatingValue> trace;

  // "exp(−ψ̂)=4.8 (95% CI 3.9, 5.8)" or the two-parameter form.
  std::string report() const;
};

/// One-parameter model (psi_r = 0): grid scan for sign changes of z, then
/// bisection. Throws EstimationError when z never changes sign in the bracket.
AftEstimate solve_psi(std::span<const SubjectRecord> records, const GestOptions& opts = {});

/// Two-parameter model: grid search on max |z| followed by damped Newton.
AftEstimate solve_psi_two(std::span<const SubjectRecord> records, const GestOptions& opts = {});

struct SweepRow {
  std::optional<double> cutoff_years;  // none for the uncensored row
  std::optional<AftEstimate> estimate;
  int events = 0;
  bool too_few_events = false;
  std::string status = "ok";
};

inline const std::vector<double>& default_cutoffs() {
  static const std::vector<double> c = {20, 15, 10, 5};
  return c;
}

/// Uncensored estimate followed by one row per cutoff, longest first. Rows
/// with fewer than `min_events` events or no root are flagged, not fatal.
std::vector<SweepRow> recensoring_sweep(std::span<const SubjectRecord> records, const GestOptions& opts = {},
                                        std::span<const double> cutoffs_years = default_cutoffs(),
                                        int min_events = 50);

json to_json(const EstimatingValue& v);
json to_json(const AftEstimate& e);
json to_json(const SweepRow& r);
void write_trace_csv(std::ostream& out, const AftEstimate& e);
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

}  // namespace regsurv
