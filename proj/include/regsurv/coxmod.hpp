#pragma once

#include <Eigen/Dense>
#include <span>
#include <string>
#include <vector>

#include "regsurv/design.hpp"
#include "regsurv/nonparam.hpp"

namespace regsurv {

enum class Ties { efron, breslow };

struct CoxOptions {
  Ties ties = Ties::efron;
  double tolerance = 1e-8;  // gradient max-norm
  int max_iter = 50;
  double beta_limit = 20.0;  // |beta| beyond this is treated as monotone likelihood
  bool check_rank = true;
  Eigen::VectorXd init;  // warm start; empty means zeros
};

/// Step function on event times (days), zero before the first one.
struct StepFunction {
  std::vector<double> time;
  std::vector<double> value;

  double operator()(double t) const;
};

struct CoxFit {
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::VectorXd center;  // covariate means subtracted before fitting
  Eigen::MatrixXd cov;     // inverse observed information
  double loglik = 0.0;
  double loglik_null = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool monotone = false;
  std::vector<double> trace;  // log partial likelihood per iteration
  Ties ties = Ties::efron;
  // Breslow cumulative hazard for a subject at the centering point.
  StepFunction cumhaz_centered;
  double last_time = 0.0;
  std::string arm;

  double se(Eigen::Index j) const { return std::sqrt(cov(j, j)); }
  double z(Eigen::Index j) const { return beta[j] / se(j); }
  double linear_predictor(const Eigen::RowVectorXd& x) const {
    return beta.size() ? (x - center.transpose()).dot(beta) : 0.0;
  }
};

/// Newton-Raphson on the log partial likelihood with step-halving. Monotone
/// likelihood and non-convergence are flagged on the result; empty input, no
/// events and rank deficiency throw EstimationError.
CoxFit fit_cox(const Eigen::MatrixXd& X, std::span<const double> time, std::span<const int> event,
               const CoxOptions& opts = {});

double cox_loglik(const Eigen::MatrixXd& X, std::span<const double> time,
                  std::span<const int> event, const Eigen::VectorXd& beta, Ties ties = Ties::efron);

/// Breslow baseline cumulative hazard at covariate vector zero.
StepFunction baseline_cumhaz(const CoxFit& fit);

/// exp(-Lambda0(t) exp(beta'x)) on `grid` (days); the fit's event times when empty.
SurvivalCurve predict_survival(const CoxFit& fit, const Eigen::RowVectorXd& x,
                               std::span<const double> grid = {});

/// Design encoder bundled with the fit.
struct CoxModel {
  DesignEncoder encoder;
  CoxFit fit;
};

// Levels come from `levels_from` when nonempty, else from the fitting records.
CoxModel fit_cox(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                 const CoxOptions& opts = {}, std::span<const SubjectRecord> levels_from = {});

SurvivalCurve predict_survival(const CoxModel& model, const SubjectRecord& r,
                               std::span<const double> grid = {});

// Throws EstimationError unless the fit converged without monotone likelihood.
void require_converged(const CoxFit& fit, const std::string& what);

json to_json(const CoxFit& fit);
CoxFit cox_fit_from_json(const json& j);
json to_json(const CoxModel& m);
CoxModel cox_model_from_json(const json& j);

}  // namespace regsurv
