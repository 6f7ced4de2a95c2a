#pragma once

#include <Eigen/Dense>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "regsurv/registry.hpp"

namespace regsurv {

/// Ordered list of model terms. A term with one factor is a main effect, two
/// factors form an interaction. Variables: age, year, gfr, pkt, diabetes,
/// hypertension, ihd, pad, cvd (numeric) and sex, region, pkd (categorical).
struct CovariateSpec {
  std::vector<std::vector<std::string>> terms;
  std::map<std::string, std::string> reference;  // overrides of the default reference levels
  bool center = true;

  // "age + sex + region + pkd + year + age:sex"
  static CovariateSpec parse(std::string_view formula);
  static CovariateSpec from_json(const json& j);  // formula string or object
  json to_json() const;
  std::string formula() const;

  CovariateSpec with(std::string_view extra_terms) const;
  CovariateSpec without(const std::string& variable) const;
  bool uses(const std::string& variable) const;

  static CovariateSpec outcome_default();
  static CovariateSpec propensity_default();
};

bool is_categorical(const std::string& variable);

/// Maps records to a dense design matrix with reference-level dummies.
class DesignEncoder {
 public:
  DesignEncoder() = default;
  // Levels are learned from `levels_from`; unseen levels at encode time throw.
  static DesignEncoder fit(std::span<const SubjectRecord> levels_from, const CovariateSpec& spec);

  Eigen::MatrixXd encode(std::span<const SubjectRecord> records) const;
  Eigen::RowVectorXd encode(const SubjectRecord& r) const;

  const CovariateSpec& spec() const { return spec_; }
  const std::vector<std::string>& names() const { return names_; }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(names_.size()); }
  // Column index by name, -1 if absent.
  Eigen::Index column(const std::string& name) const;

  json to_json() const;
  static DesignEncoder from_json(const json& j);

 private:
  void build_names();
  void encode_row(const SubjectRecord& r, double* out) const;

  CovariateSpec spec_;
  std::map<std::string, std::vector<std::string>> levels_;  // non-reference levels
  std::map<std::string, std::string> refs_;
  std::vector<std::string> names_;
};

// Throws EstimationError naming aliased columns when X lacks full column rank.
void check_full_rank(const Eigen::MatrixXd& X, const std::vector<std::string>& names);

}  // namespace regsurv
