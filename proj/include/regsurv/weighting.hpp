#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "regsurv/design.hpp"
#include "regsurv/nonparam.hpp"

namespace regsurv {

struct LogisticOptions {
  double tolerance = 1e-8;  // score max-norm
  int max_iter = 50;
  double beta_limit = 20.0;  // separation flag
};

/// Coefficients on the original (uncentered) design, intercept first.
struct LogisticFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
  double loglik = 0.0;
  double score_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separated = false;
  std::vector<double> trace;

  double se(Eigen::Index j) const { return std::sqrt(cov(j, j)); }
  // X without the intercept column.
  Eigen::VectorXd predict(const Eigen::MatrixXd& X) const;
};

/// IRLS with step-halving. An intercept is added; X must not contain one.
LogisticFit fit_logistic(const Eigen::MatrixXd& X, std::span<const int> y,
                         const LogisticOptions& opts = {});

struct PropensityModel {
  DesignEncoder encoder;
  LogisticFit fit;

  std::vector<double> predict(std::span<const SubjectRecord> records) const;
};

PropensityModel fit_propensity(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                               const LogisticOptions& opts = {});

/// A subgroup checked for positivity, e.g. {"label":"age>75","field":"age","op":">","value":75}.
struct CellFlag {
  std::string label;
  std::size_t n = 0;
  double mean_ps = 0.0;
  bool flagged = false;
};

struct OverlapReport {
  std::vector<double> bin_edges;
  std::vector<std::size_t> hist_pkt, hist_dialysis;
  double min_pkt = 0, max_pkt = 0, min_dialysis = 0, max_dialysis = 0;
  double epsilon = 0.01;
  std::size_t below_eps = 0, above_eps = 0;
  std::vector<CellFlag> cells;
};

// Cells whose mean PS falls below epsilon are flagged.
OverlapReport positivity_report(std::span<const double> ps, std::span<const SubjectRecord> records,
                                std::span<const Criterion> cells, double epsilon = 0.01,
                                int bins = 20);
// Age over 75, cancer history, and every region and pkd level present.
std::vector<Criterion> default_positivity_cells(std::span<const SubjectRecord> records);

enum class Estimand { ate, att, atnt };

Estimand estimand_from_string(const std::string& s);
std::string to_string(Estimand e);

struct WeightOptions {
  Estimand estimand = Estimand::ate;
  bool stabilized = true;
  double truncate_percentile = 0.0;  // e.g. 99; 0 disables
};

std::vector<double> ipw_weights(std::span<const double> ps, std::span<const SubjectRecord> records,
                                const WeightOptions& opts = {});

struct ArmCurves {
  SurvivalCurve pkt;
  SurvivalCurve dialysis;
};

ArmCurves ipw_km(std::span<const SubjectRecord> records, std::span<const double> weights);
ArmCurves arm_km(std::span<const SubjectRecord> records);

json to_json(const LogisticFit& f);
json to_json(const OverlapReport& r);
void write_overlap_csv(std::ostream& out, const OverlapReport& r);

}  // namespace regsurv
