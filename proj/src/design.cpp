#include "regsurv/design.hpp"

#include <algorithm>
#include <set>

namespace regsurv {

namespace {

const std::set<std::string>& numeric_variables() {
  static const std::set<std::string> v = {"age",          "year", "gfr", "pkt", "diabetes",
                                          "hypertension", "ihd",  "pad", "cvd"};
  return v;
}

const std::set<std::string>& categorical_variables() {
  static const std::set<std::string> v = {"sex", "region", "pkd"};
  return v;
}

std::string default_reference(const std::string& var) {
  if (var == "sex") return "male";
  if (var == "region") return kReferenceRegion;
  if (var == "pkd") return kReferencePkd;
  return {};
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\n");
  return std::string(s.substr(b, e - b + 1));
}

void validate_variable(const std::string& v) {
  if (!numeric_variables().contains(v) && !categorical_variables().contains(v))
    throw ConfigError("unknown covariate '" + v + "'");
}

double numeric_value(const SubjectRecord& r, const std::string& var) {
  if (var == "age") return r.age;
  if (var == "year") return r.entry_year();
  if (var == "pkt") return r.pkt ? 1.0 : 0.0;
  if (var == "gfr") {
    if (!r.gfr) throw DataError("record " + r.id + ": gfr is missing");
    return *r.gfr;
  }
  for (std::size_t k = 0; k < kComorbidityCount; ++k) {
    if (var == kComorbidityNames[k]) {
      if (!r.comorbidity[k]) throw DataError("record " + r.id + ": " + var + " is missing");
      return *r.comorbidity[k] ? 1.0 : 0.0;
    }
  }
  throw ConfigError("unknown covariate '" + var + "'");
}

std::string categorical_value(const SubjectRecord& r, const std::string& var) {
  if (var == "sex") return r.sex == Sex::female ? "female" : "male";
  if (var == "region") return r.region;
  if (var == "pkd") return r.pkd;
  throw ConfigError("unknown covariate '" + var + "'");
}

}  // namespace

bool is_categorical(const std::string& variable) {
  return categorical_variables().contains(variable);
}

CovariateSpec CovariateSpec::parse(std::string_view formula) {
  CovariateSpec s;
  std::size_t start = 0;
  while (start <= formula.size()) {
    auto end = formula.find('+', start);
    if (end == std::string_view::npos) end = formula.size();
    const auto term = trim(formula.substr(start, end - start));
    start = end + 1;
    if (term.empty()) {
      if (end == formula.size()) break;
      throw ConfigError("empty term in formula '" + std::string(formula) + "'");
    }
    std::vector<std::string> factors;
    std::size_t fs = 0;
    while (true) {
      auto fe = term.find(':', fs);
      auto f = trim(std::string_view(term).substr(fs, fe == std::string::npos ? std::string::npos : fe - fs));
      validate_variable(f);
      factors.push_back(f);
      if (fe == std::string::npos) break;
      fs = fe + 1;
    }
    if (factors.size() > 2) throw ConfigError("only two-way interactions are supported: " + term);
    if (factors.size() == 2 && factors[0] == factors[1])
      throw ConfigError("self-interaction in term " + term);
    if (std::find(s.terms.begin(), s.terms.end(), factors) == s.terms.end())
      s.terms.push_back(std::move(factors));
  }
  return s;
}

std::string CovariateSpec::formula() const {
  std::string out;
  for (const auto& t : terms) {
    if (!out.empty()) out += " + ";
    for (std::size_t i = 0; i < t.size(); ++i) out += (i ? ":" : "") + t[i];
  }
  return out;
}

CovariateSpec CovariateSpec::from_json(const json& j) {
  if (j.is_string()) return parse(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("covariate spec must be a formula string or object");
  CovariateSpec s = parse(j.at("formula").get<std::string>());
  if (j.contains("reference")) {
    for (auto it = j["reference"].begin(); it != j["reference"].end(); ++it) {
      if (!is_categorical(it.key())) throw ConfigError("reference level for non-categorical '" + it.key() + "'");
      s.reference[it.key()] = it.value().get<std::string>();
    }
  }
  s.center = j.value("center", true);
  return s;
}

json CovariateSpec::to_json() const {
  json ref = json::object();
  for (const auto& [k, v] : reference) ref[k] = v;
  return {{"formula", formula()}, {"reference", ref}, {"center", center}};
}

CovariateSpec CovariateSpec::with(std::string_view extra_terms) const {
  CovariateSpec out = *this;
  for (auto& t : parse(extra_terms).terms)
    if (std::find(out.terms.begin(), out.terms.end(), t) == out.terms.end()) out.terms.push_back(t);
  return out;
}

CovariateSpec CovariateSpec::without(const std::string& variable) const {
  CovariateSpec out = *this;
  std::erase_if(out.terms, [&](const auto& t) {
    return std::find(t.begin(), t.end(), variable) != t.end();
  });
  return out;
}

bool CovariateSpec::uses(const std::string& variable) const {
  return std::any_of(terms.begin(), terms.end(), [&](const auto& t) {
    return std::find(t.begin(), t.end(), variable) != t.end();
  });
}

CovariateSpec CovariateSpec::outcome_default() {
  return parse("age + sex + region + pkd + year");
}

CovariateSpec CovariateSpec::propensity_default() {
  return parse("age + sex + region + pkd + year + age:sex + age:pkd + age:year + sex:pkd + sex:year");
}

// ---------------------------------------------------------------------------

DesignEncoder DesignEncoder::fit(std::span<const SubjectRecord> levels_from,
                                 const CovariateSpec& spec) {
  DesignEncoder e;
  e.spec_ = spec;
  for (const auto& term : spec.terms) {
    for (const auto& var : term) {
      if (!is_categorical(var) || e.levels_.contains(var)) continue;
      auto ref_it = spec.reference.find(var);
      const std::string ref = ref_it != spec.reference.end() ? ref_it->second : default_reference(var);
      std::set<std::string> seen;
      for (const auto& r : levels_from) seen.insert(categorical_value(r, var));
      if (var == "sex") seen = {"female", "male"};
      // Fall back to the first observed level when the configured reference is absent.
      const std::string used = seen.contains(ref) || seen.empty() ? ref : *seen.begin();
      std::vector<std::string> lv;
      for (const auto& s : seen)
        if (s != used) lv.push_back(s);
      e.levels_[var] = std::move(lv);
      e.refs_[var] = used;
    }
  }
  e.build_names();
  return e;
}

void DesignEncoder::build_names() {
  names_.clear();
  auto labels = [&](const std::string& var) {
    std::vector<std::string> out;
    if (!is_categorical(var)) return std::vector<std::string>{var};
    for (const auto& l : levels_.at(var)) out.push_back(var + "=" + l);
    return out;
  };
  for (const auto& term : spec_.terms) {
    if (term.size() == 1) {
      for (auto& n : labels(term[0])) names_.push_back(n);
    } else {
      for (const auto& a : labels(term[0]))
        for (const auto& b : labels(term[1])) names_.push_back(a + ":" + b);
    }
  }
}

void DesignEncoder::encode_row(const SubjectRecord& r, double* out) const {
  auto values = [&](const std::string& var, std::vector<double>& v) {
    v.clear();
    if (!is_categorical(var)) {
      v.push_back(numeric_value(r, var));
      return;
    }
    const auto& lv = levels_.at(var);
    const auto x = categorical_value(r, var);
    bool matched = false;
    for (const auto& l : lv) {
      v.push_back(l == x ? 1.0 : 0.0);
      matched |= l == x;
    }
    if (!matched && x != refs_.at(var))
      throw DataError("record " + r.id + ": unseen level '" + x + "' for " + var);
  };
  std::vector<double> a, b;
  std::size_t k = 0;
  for (const auto& term : spec_.terms) {
    values(term[0], a);
    if (term.size() == 1) {
      for (double x : a) out[k++] = x;
    } else {
      values(term[1], b);
      for (double x : a)
        for (double y : b) out[k++] = x * y;
    }
  }
}

Eigen::MatrixXd DesignEncoder::encode(std::span<const SubjectRecord> records) const {
  // Row-major scratch keeps encode_row writes contiguous.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> X(
      static_cast<Eigen::Index>(records.size()), cols());
  for (std::size_t i = 0; i < records.size(); ++i)
    encode_row(records[i], X.row(static_cast<Eigen::Index>(i)).data());
  return X;
}

Eigen::RowVectorXd DesignEncoder::encode(const SubjectRecord& r) const {
  Eigen::RowVectorXd x(cols());
  encode_row(r, x.data());
  return x;
}

Eigen::Index DesignEncoder::column(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  return it == names_.end() ? -1 : static_cast<Eigen::Index>(it - names_.begin());
}

json DesignEncoder::to_json() const {
  json lv = json::object(), refs = json::object();
  for (const auto& [k, v] : levels_) lv[k] = v;
  for (const auto& [k, v] : refs_) refs[k] = v;
  return {{"spec", spec_.to_json()}, {"levels", lv}, {"reference", refs}, {"names", names_}};
}

DesignEncoder DesignEncoder::from_json(const json& j) {
  DesignEncoder e;
  e.spec_ = CovariateSpec::from_json(j.at("spec"));
  for (auto it = j.at("levels").begin(); it != j.at("levels").end(); ++it)
    e.levels_[it.key()] = it.value().get<std::vector<std::string>>();
  for (auto it = j.at("reference").begin(); it != j.at("reference").end(); ++it)
    e.refs_[it.key()] = it.value().get<std::string>();
  e.build_names();
  return e;
}

void check_full_rank(const Eigen::MatrixXd& X, const std::vector<std::string>& names) {
  if (X.cols() == 0) return;
  if (X.rows() < X.cols()) throw EstimationError("rank deficiency: fewer rows than covariates");
  Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
  // Column scaling so the rank threshold is unit-free.
  for (Eigen::Index j = 0; j < Xc.cols(); ++j) {
    const double n = Xc.col(j).norm();
    if (n == 0.0) throw EstimationError("rank deficiency: covariate '" + names[j] + "' is constant");
    Xc.col(j) /= n;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xc);
  qr.setThreshold(1e-10);
  if (qr.rank() < Xc.cols()) {
    std::string aliased;
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < Xc.cols(); ++k)
      aliased += (aliased.empty() ? "" : ", ") + names[perm[k]];
    throw EstimationError("rank deficiency: aliased covariates " + aliased);
  }
}

}  // namespace regsurv
