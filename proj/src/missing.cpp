#include "regsurv/missing.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "regsurv/design.hpp"
#include "regsurv/weighting.hpp"

namespace regsurv {

void ImputationConfig::validate() const {
  if (m < 2) throw ConfigError("imputation: m must be at least 2");
  if (iterations < 1) throw ConfigError("imputation: iterations must be at least 1");
  static const std::set<std::string> allowed = {"age",  "sex", "region", "pkd",
                                                "year", "pkt", "event",  "log_time"};
  for (const auto& p : predictors)
    if (!allowed.contains(p)) throw ConfigError("imputation: unknown predictor '" + p + "'");
}

json to_json(const ImputationConfig& c) {
  return {{"m", c.m}, {"iterations", c.iterations}, {"seed", c.seed}, {"proper", c.proper},
          {"predictors", c.predictors}};
}

ImputationConfig imputation_config_from_json(const json& j) {
  ImputationConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "m") c.m = it->get<int>();
    else if (k == "iterations") c.iterations = it->get<int>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else if (k == "proper") c.proper = it->get<bool>();
    else if (k == "predictors") c.predictors = it->get<std::vector<std::string>>();
    else throw ConfigError("unknown imputation key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace {

// Fixed predictor block shared by every flag model.
Eigen::MatrixXd base_predictors(std::span<const SubjectRecord> records, const ImputationConfig& c) {
  std::string formula;
  for (const auto& p : c.predictors) {
    if (p == "event" || p == "log_time") continue;
    formula += (formula.empty() ? "" : " + ") + p;
  }
  const bool with_event = std::find(c.predictors.begin(), c.predictors.end(), "event") != c.predictors.end();
  const bool with_time = std::find(c.predictors.begin(), c.predictors.end(), "log_time") != c.predictors.end();
  Eigen::MatrixXd enc;
  if (!formula.empty()) enc = DesignEncoder::fit(records, CovariateSpec::parse(formula)).encode(records);
  else enc.resize(static_cast<Eigen::Index>(records.size()), 0);
  const Eigen::Index extra = (with_event ? 1 : 0) + (with_time ? 1 : 0);
  Eigen::MatrixXd X(enc.rows(), enc.cols() + extra);
  X.leftCols(enc.cols()) = enc;
  Eigen::Index col = enc.cols();
  for (std::size_t i = 0; i < records.size(); ++i) {
    Eigen::Index c2 = col;
    const auto row = static_cast<Eigen::Index>(i);
    if (with_event) X(row, c2++) = records[i].event ? 1.0 : 0.0;
    // Half a day keeps day-zero follow-up finite.
    if (with_time) X(row, c2++) = std::log((records[i].t_days + 0.5) / kDaysPerYear);
  }
  return X;
}

}  // namespace

ImputationResult impute_chained(std::span<const SubjectRecord> records, const ImputationConfig& config) {
  config.validate();
  ImputationResult result;
  const std::size_t n = records.size();

  std::array<std::vector<std::size_t>, kComorbidityCount> missing_rows, observed_rows;
  bool any_missing = false;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < kComorbidityCount; ++k)
      (records[i].comorbidity[k] ? observed_rows[k] : missing_rows[k]).push_back(i);
  for (std::size_t k = 0; k < kComorbidityCount; ++k) {
    if (missing_rows[k].empty()) continue;
    any_missing = true;
    std::size_t ones = 0;
    for (auto i : observed_rows[k]) ones += *records[i].comorbidity[k];
    if (ones == 0 || ones == observed_rows[k].size())
      throw EstimationError(std::string("impute_chained: ") + kComorbidityNames[k] +
                            " is observed in only one class");
  }
  if (!any_missing) {
    result.sets.assign(static_cast<std::size_t>(config.m), Cohort(records.begin(), records.end()));
    result.trace.resize(static_cast<std::size_t>(config.m));
    return result;
  }

  const Eigen::MatrixXd base = base_predictors(records, config);
  const Eigen::Index pb = base.cols();

  for (int set = 0; set < config.m; ++set) {
    Rng rng = make_rng(config.seed, static_cast<std::uint64_t>(set));
    // Current completed flag values as a dense n x 5 block.
    Eigen::MatrixXd flags(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kComorbidityCount));
    for (std::size_t k = 0; k < kComorbidityCount; ++k) {
      double prev = 0.0;
      for (auto i : observed_rows[k]) prev += *records[i].comorbidity[k];
      prev = observed_rows[k].empty() ? 0.5 : prev / observed_rows[k].size();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& f = records[i].comorbidity[k];
        flags(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
            f ? (*f ? 1.0 : 0.0) : (uniform01(rng) < prev ? 1.0 : 0.0);
      }
    }

    std::vector<std::array<double, kComorbidityCount>> trace;
    for (int it = 0; it < config.iterations; ++it) {
      for (std::size_t k = 0; k < kComorbidityCount; ++k) {
        if (missing_rows[k].empty()) continue;
        const auto& obs = observed_rows[k];
        // Predictors: base block plus the other four flags.
        auto row_of = [&](std::size_t i, auto&& out) {
          const auto r = static_cast<Eigen::Index>(i);
          out.head(pb) = base.row(r);
          Eigen::Index c = pb;
          for (std::size_t l = 0; l < kComorbidityCount; ++l)
            if (l != k) out[c++] = flags(r, static_cast<Eigen::Index>(l));
        };
        const Eigen::Index p = pb + static_cast<Eigen::Index>(kComorbidityCount) - 1;
        Eigen::MatrixXd Xo(static_cast<Eigen::Index>(obs.size()), p);
        std::vector<int> y(obs.size());
        for (std::size_t r = 0; r < obs.size(); ++r) {
          auto dst = Xo.row(static_cast<Eigen::Index>(r));
          row_of(obs[r], dst);
          y[r] = *records[obs[r]].comorbidity[k] ? 1 : 0;
        }
        // Columns constant among observed rows (e.g. an absent level) carry no information.
        std::vector<Eigen::Index> keep;
        for (Eigen::Index j = 0; j < p; ++j)
          if ((Xo.col(j).array() - Xo(0, j)).abs().maxCoeff() > 0.0) keep.push_back(j);
        Eigen::MatrixXd Xk(Xo.rows(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t j = 0; j < keep.size(); ++j) Xk.col(static_cast<Eigen::Index>(j)) = Xo.col(keep[j]);
        const LogisticFit fit = fit_logistic(Xk, y);

        Eigen::VectorXd beta = fit.beta;
        if (config.proper) {
          Eigen::LLT<Eigen::MatrixXd> llt(fit.cov);
          if (llt.info() == Eigen::Success) {
            Eigen::VectorXd z(beta.size());
            for (auto& v : z) v = standard_normal(rng);
            beta += llt.matrixL() * z;
          }
        }
        Eigen::RowVectorXd x(p);
        for (auto i : missing_rows[k]) {
          row_of(i, x);
          double eta = beta[0];
          for (std::size_t j = 0; j < keep.size(); ++j) eta += beta[static_cast<Eigen::Index>(j) + 1] * x[keep[j]];
          flags(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = uniform01(rng) < expit(eta) ? 1.0 : 0.0;
        }
      }
      std::array<double, kComorbidityCount> prev{};
      for (std::size_t k = 0; k < kComorbidityCount; ++k)
        prev[k] = flags.col(static_cast<Eigen::Index>(k)).mean();
      trace.push_back(prev);
    }

    Cohort completed(records.begin(), records.end());
    for (std::size_t k = 0; k < kComorbidityCount; ++k)
      for (auto i : missing_rows[k])
        completed[i].comorbidity[k] = flags(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) > 0.5;
    result.sets.push_back(std::move(completed));
    result.trace.push_back(std::move(trace));
  }
  return result;
}

void write_imputed_csv(std::ostream& out, std::span<const Cohort> sets) {
  for (std::size_t s = 0; s < sets.size(); ++s) {
    std::ostringstream buf;
    write_registry(buf, sets[s]);
    std::istringstream in(buf.str());
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      if (header) {
        if (s == 0) out << "set," << line << '\n';
        header = false;
      } else {
        out << s + 1 << ',' << line << '\n';
      }
    }
  }
}

void write_trace_csv(std::ostream& out, const ImputationResult& r) {
  out << "set,iteration";
  for (const char* name : kComorbidityNames) out << ',' << name;
  out << '\n';
  for (std::size_t s = 0; s < r.trace.size(); ++s)
    for (std::size_t it = 0; it < r.trace[s].size(); ++it) {
      out << s + 1 << ',' << it + 1;
      for (double v : r.trace[s][it]) out << ',' << format_double(v);
      out << '\n';
    }
}

// ---------------------------------------------------------------------------

void percentile_ci(const Eigen::MatrixXd& replicates, std::vector<double>& lo, std::vector<double>& hi,
                   double level) {
  const double a = (1.0 - level) / 2.0;
  lo.assign(static_cast<std::size_t>(replicates.cols()), std::numeric_limits<double>::quiet_NaN());
  hi = lo;
  if (replicates.rows() == 0) return;
  std::vector<double> col(static_cast<std::size_t>(replicates.rows()));
  for (Eigen::Index j = 0; j < replicates.cols(); ++j) {
    for (Eigen::Index i = 0; i < replicates.rows(); ++i) col[static_cast<std::size_t>(i)] = replicates(i, j);
    lo[static_cast<std::size_t>(j)] = quantile(col, a);
    hi[static_cast<std::size_t>(j)] = quantile(col, 1.0 - a);
  }
}

BootstrapResult bootstrap(const Statistic& statistic, std::span<const SubjectRecord> records, int B,
                          std::uint64_t seed, bool compute_point) {
  if (B < 1) throw ConfigError("bootstrap: B must be at least 1");
  if (records.empty()) throw DataError("bootstrap: empty sample");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return records[a].id < records[b].id; });

  BootstrapResult res;
  res.requested = static_cast<std::size_t>(B);
  if (compute_point) res.point = statistic(records);
  std::vector<std::vector<double>> rows;
  Cohort sample(records.size());
  for (int b = 0; b < B; ++b) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(b));
    for (auto& s : sample) s = records[order[static_cast<std::size_t>(uniform01(rng) * records.size())]];
    try {
      auto v = statistic(sample);
      if (!rows.empty() && v.size() != rows.front().size())
        throw EstimationError("bootstrap: statistic dimension changed between replicates");
      if (std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }))
        rows.push_back(std::move(v));
      else
        ++res.failures;
    } catch (const EstimationError& e) {
      if (std::string_view(e.what()).starts_with("bootstrap:")) throw;
      ++res.failures;
    } catch (const DataError&) {
      ++res.failures;
    }
  }
  const auto dim = rows.empty() ? res.point.size() : rows.front().size();
  res.replicates.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j) res.replicates(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  percentile_ci(res.replicates, res.lo, res.hi);
  return res;
}

PooledEstimate pool(std::span<const BootstrapResult> sets, PoolMethod method) {
  if (sets.size() < 2) throw ConfigError("pool: need at least two imputed sets");
  const auto dim = sets.front().point.size();
  Eigen::Index total = 0;
  for (const auto& s : sets) {
    if (s.point.size() != dim || static_cast<std::size_t>(s.replicates.cols()) != dim)
      throw DataError("pool: statistic dimension mismatch between sets");
    total += s.replicates.rows();
  }
  PooledEstimate out;
  out.m = sets.size();
  out.method = method;
  out.replicates = static_cast<std::size_t>(total);
  out.point.assign(dim, 0.0);
  for (const auto& s : sets) {
    out.per_set.push_back(s.point);
    for (std::size_t j = 0; j < dim; ++j) out.point[j] += s.point[j] / sets.size();
  }
  if (method == PoolMethod::percentile) {
    Eigen::MatrixXd all(total, static_cast<Eigen::Index>(dim));
    Eigen::Index row = 0;
    for (const auto& s : sets) {
      all.middleRows(row, s.replicates.rows()) = s.replicates;
      row += s.replicates.rows();
    }
    percentile_ci(all, out.lo, out.hi);
    return out;
  }
  // Rubin: within-set bootstrap variance plus inflated between-set variance.
  const double m = static_cast<double>(sets.size());
  out.lo.resize(dim);
  out.hi.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    double w = 0.0, b = 0.0;
    for (const auto& s : sets) {
      const Eigen::VectorXd c = s.replicates.col(static_cast<Eigen::Index>(j));
      const double var = c.size() > 1 ? (c.array() - c.mean()).square().sum() / (c.size() - 1.0) : 0.0;
      w += var / m;
      b += (s.point[j] - out.point[j]) * (s.point[j] - out.point[j]) / (m - 1.0);
    }
    const double t = w + (1.0 + 1.0 / m) * b;
    const double r = b > 0.0 ? (1.0 + 1.0 / m) * b / w : 0.0;
    const double df = r > 0.0 ? (m - 1.0) * std::pow(1.0 + 1.0 / r, 2) : std::numeric_limits<double>::infinity();
    const double q = student_t_quantile(0.975, df);
    out.lo[j] = out.point[j] - q * std::sqrt(t);
    out.hi[j] = out.point[j] + q * std::sqrt(t);
  }
  return out;
}

std::vector<double> average_over_sets(std::span<const std::vector<double>> per_set) {
  if (per_set.empty()) return {};
  std::vector<double> out(per_set.front().size(), 0.0);
  for (const auto& s : per_set) {
    if (s.size() != out.size()) throw DataError("average_over_sets: length mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) out[i] += s[i] / per_set.size();
  }
  return out;
}

void write_replicates_csv(std::ostream& out, const Eigen::MatrixXd& replicates,
                          std::span<const std::string> names) {
  out << "replicate";
  for (Eigen::Index j = 0; j < replicates.cols(); ++j)
    out << ',' << (static_cast<std::size_t>(j) < names.size() ? names[j] : "stat" + std::to_string(j));
  out << '\n';
  for (Eigen::Index i = 0; i < replicates.rows(); ++i) {
    out << i + 1;
    for (Eigen::Index j = 0; j < replicates.cols(); ++j) out << ',' << format_double(replicates(i, j));
    out << '\n';
  }
}

}  // namespace regsurv
