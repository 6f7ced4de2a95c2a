#include "regsurv/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

namespace regsurv {

namespace {

double bernoulli_loglik(const Eigen::VectorXd& eta, std::span<const int> y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + e^x) without overflow
    const double e = eta[i];
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += (y[static_cast<std::size_t>(i)] ? e : 0.0) - softplus;
  }
  return ll;
}

}  // namespace

Eigen::VectorXd LogisticFit::predict(const Eigen::MatrixXd& X) const {
  Eigen::VectorXd eta = (X * beta.tail(beta.size() - 1)).array() + beta[0];
  return eta.unaryExpr([](double e) { return expit(e); });
}

LogisticFit fit_logistic(const Eigen::MatrixXd& X, std::span<const int> y, const LogisticOptions& opts) {
  const Eigen::Index n = X.rows(), p = X.cols();
  if (static_cast<std::size_t>(n) != y.size()) throw EstimationError("fit_logistic: input lengths differ");
  const auto ones = std::count_if(y.begin(), y.end(), [](int v) { return v != 0; });
  if (ones == 0 || ones == n) throw EstimationError("fit_logistic: labels contain a single class");

  // Work on standardized columns and map back at the end.
  const Eigen::RowVectorXd mean = X.colwise().mean();
  Eigen::RowVectorXd scale(p);
  Eigen::MatrixXd Z(n, p + 1);
  Z.col(0).setOnes();
  for (Eigen::Index j = 0; j < p; ++j) {
    const Eigen::VectorXd c = X.col(j).array() - mean[j];
    scale[j] = std::sqrt(c.squaredNorm() / static_cast<double>(n));
    if (scale[j] == 0.0) throw EstimationError("fit_logistic: rank deficiency (constant column " + std::to_string(j) + ")");
    Z.col(j + 1) = c / scale[j];
  }
  {
    std::vector<std::string> names(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j) names[j] = "column " + std::to_string(j);
    check_full_rank(X, names);
  }
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) yv[i] = y[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  LogisticFit fit;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p + 1);
  b[0] = logit(static_cast<double>(ones) / n);
  Eigen::VectorXd eta = Z * b;
  double ll = bernoulli_loglik(eta, y);
  fit.trace.push_back(ll);
  Eigen::MatrixXd info(p + 1, p + 1);
  auto score_info = [&](const Eigen::VectorXd& e, Eigen::VectorXd& score) {
    const Eigen::VectorXd mu = e.unaryExpr([](double v) { return expit(v); });
    score = Z.transpose() * (yv - mu);
    const Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
    info.noalias() = Z.transpose() * w.asDiagonal() * Z;
  };
  Eigen::VectorXd score;
  score_info(eta, score);
  while (true) {
    // Score on the standardized design; the tolerance is unit-free there.
    fit.score_norm = score.lpNorm<Eigen::Infinity>();
    if (fit.score_norm < opts.tolerance) {
      fit.converged = true;
      break;
    }
    Eigen::VectorXd unscaled = b;
    unscaled.tail(p).array() /= scale.transpose().array();
    if (unscaled.tail(p).lpNorm<Eigen::Infinity>() > opts.beta_limit) {
      fit.separated = true;
      break;
    }
    if (fit.iterations >= opts.max_iter) break;
    ++fit.iterations;
    Eigen::VectorXd step = info.ldlt().solve(score);
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      const Eigen::VectorXd cand = b + step;
      const Eigen::VectorXd ecand = Z * cand;
      const double llc = bernoulli_loglik(ecand, y);
      if (llc >= ll - 1e-12 * std::abs(ll)) {
        b = cand;
        eta = ecand;
        ll = llc;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) {
      fit.converged = fit.score_norm < 1e-5;
      break;
    }
    fit.trace.push_back(ll);
    score_info(eta, score);
  }
  fit.loglik = ll;

  // beta_orig = A b with slopes b_j / s_j and intercept b_0 - sum_j b_j m_j / s_j.
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(p + 1, p + 1);
  for (Eigen::Index j = 0; j < p; ++j) {
    A(j + 1, j + 1) = 1.0 / scale[j];
    A(0, j + 1) = -mean[j] / scale[j];
  }
  fit.beta = A * b;
  fit.cov = A * info.ldlt().solve(Eigen::MatrixXd::Identity(p + 1, p + 1)) * A.transpose();
  fit.separated = fit.separated || fit.beta.tail(p).lpNorm<Eigen::Infinity>() > opts.beta_limit;
  if (fit.separated) fit.converged = false;
  fit.names.push_back("(intercept)");
  for (Eigen::Index j = 0; j < p; ++j) fit.names.push_back("column " + std::to_string(j));
  return fit;
}

std::vector<double> PropensityModel::predict(std::span<const SubjectRecord> records) const {
  const Eigen::VectorXd p = fit.predict(encoder.encode(records));
  return {p.data(), p.data() + p.size()};
}

PropensityModel fit_propensity(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                               const LogisticOptions& opts) {
  PropensityModel m;
  m.encoder = DesignEncoder::fit(records, spec);
  const Eigen::MatrixXd X = m.encoder.encode(records);
  check_full_rank(X, m.encoder.names());
  std::vector<int> y(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) y[i] = records[i].pkt ? 1 : 0;
  m.fit = fit_logistic(X, y, opts);
  m.fit.names = {"(intercept)"};
  for (const auto& n : m.encoder.names()) m.fit.names.push_back(n);
  return m;
}

// ---------------------------------------------------------------------------

std::vector<Criterion> default_positivity_cells(std::span<const SubjectRecord> records) {
  std::vector<Criterion> cells;
  cells.push_back(criterion_from_json({{"label", "age>75"}, {"field", "age"}, {"op", ">"}, {"value", 75}}));
  cells.push_back(criterion_from_json({{"label", "cancer"}, {"field", "cancer"}, {"op", "=="}, {"value", 1}}));
  std::set<std::string> regions, pkds;
  for (const auto& r : records) {
    regions.insert(r.region);
    pkds.insert(r.pkd);
  }
  for (const auto& v : regions)
    cells.push_back(criterion_from_json({{"label", "region=" + v}, {"field", "region"}, {"op", "=="}, {"value", v}}));
  for (const auto& v : pkds)
    cells.push_back(criterion_from_json({{"label", "pkd=" + v}, {"field", "pkd"}, {"op", "=="}, {"value", v}}));
  return cells;
}

OverlapReport positivity_report(std::span<const double> ps, std::span<const SubjectRecord> records,
                                std::span<const Criterion> cells, double epsilon, int bins) {
  if (ps.size() != records.size()) throw DataError("positivity_report: input lengths differ");
  if (bins < 1) throw ConfigError("positivity_report: bins must be positive");
  OverlapReport r;
  r.epsilon = epsilon;
  for (int b = 0; b <= bins; ++b) r.bin_edges.push_back(static_cast<double>(b) / bins);
  r.hist_pkt.assign(static_cast<std::size_t>(bins), 0);
  r.hist_dialysis.assign(static_cast<std::size_t>(bins), 0);
  r.min_pkt = r.min_dialysis = 1.0;
  r.max_pkt = r.max_dialysis = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double p = ps[i];
    const auto b = std::min(static_cast<std::size_t>(p * bins), static_cast<std::size_t>(bins - 1));
    if (records[i].pkt) {
      ++r.hist_pkt[b];
      r.min_pkt = std::min(r.min_pkt, p);
      r.max_pkt = std::max(r.max_pkt, p);
    } else {
      ++r.hist_dialysis[b];
      r.min_dialysis = std::min(r.min_dialysis, p);
      r.max_dialysis = std::max(r.max_dialysis, p);
    }
    if (p < epsilon) ++r.below_eps;
    if (p > 1.0 - epsilon) ++r.above_eps;
  }
  for (const auto& c : cells) {
    CellFlag f;
    f.label = c.label;
    double sum = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!c.excludes(records[i])) continue;
      ++f.n;
      sum += ps[i];
    }
    if (f.n == 0) continue;
    f.mean_ps = sum / f.n;
    f.flagged = f.mean_ps < epsilon;
    r.cells.push_back(f);
  }
  return r;
}

Estimand estimand_from_string(const std::string& s) {
  if (s == "ATE" || s == "ate") return Estimand::ate;
  if (s == "ATT" || s == "att") return Estimand::att;
  if (s == "ATNT" || s == "atnt") return Estimand::atnt;
  throw ConfigError("unknown estimand '" + s + "'");
}

std::string to_string(Estimand e) {
  switch (e) {
    case Estimand::ate: return "ATE";
    case Estimand::att: return "ATT";
    case Estimand::atnt: return "ATNT";
  }
  return {};
}

std::vector<double> ipw_weights(std::span<const double> ps, std::span<const SubjectRecord> records,
                                const WeightOptions& opts) {
  if (ps.size() != records.size()) throw DataError("ipw_weights: input lengths differ");
  std::string violators;
  std::size_t n_viol = 0, n_pkt = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    n_pkt += records[i].pkt;
    if (!(ps[i] > 0.0 && ps[i] < 1.0)) {
      if (n_viol++ < 5) violators += (violators.empty() ? "" : ", ") + records[i].id;
    }
  }
  if (n_viol)
    throw EstimationError("ipw_weights: propensity score 0 or 1 for " + std::to_string(n_viol) +
                          " records (" + violators + (n_viol > 5 ? ", ..." : "") + ")");
  const double p1 = static_cast<double>(n_pkt) / ps.size();
  const double odds = p1 / (1.0 - p1);
  std::vector<double> w(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const double e = ps[i];
    const bool t = records[i].pkt;
    switch (opts.estimand) {
      case Estimand::ate:
        w[i] = t ? 1.0 / e : 1.0 / (1.0 - e);
        if (opts.stabilized) w[i] *= t ? p1 : 1.0 - p1;
        break;
      case Estimand::att:
        w[i] = t ? 1.0 : e / (1.0 - e);
        if (opts.stabilized && !t) w[i] /= odds;
        break;
      case Estimand::atnt:
        w[i] = t ? (1.0 - e) / e : 1.0;
        if (opts.stabilized && t) w[i] *= odds;
        break;
    }
  }
  if (opts.truncate_percentile > 0.0) {
    const double cap = quantile(w, opts.truncate_percentile / 100.0);
    for (auto& x : w) x = std::min(x, cap);
  }
  return w;
}

ArmCurves ipw_km(std::span<const SubjectRecord> records, std::span<const double> weights) {
  if (weights.size() != records.size()) throw DataError("ipw_km: input lengths differ");
  std::array<std::vector<double>, 2> t, w;
  std::array<std::vector<int>, 2> d;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!(weights[i] > 0.0)) throw DataError("ipw_km: nonpositive weight for record " + records[i].id);
    const int a = records[i].pkt ? 1 : 0;
    t[a].push_back(records[i].t_days);
    d[a].push_back(records[i].event ? 1 : 0);
    w[a].push_back(weights[i]);
  }
  if (t[0].empty() || t[1].empty()) throw DataError("ipw_km: both arms must be nonempty");
  return {kaplan_meier(t[1], d[1], w[1]), kaplan_meier(t[0], d[0], w[0])};
}

ArmCurves arm_km(std::span<const SubjectRecord> records) {
  std::array<std::vector<double>, 2> t;
  std::array<std::vector<int>, 2> d;
  for (const auto& r : records) {
    t[r.pkt].push_back(r.t_days);
    d[r.pkt].push_back(r.event ? 1 : 0);
  }
  if (t[0].empty() || t[1].empty()) throw DataError("arm_km: both arms must be nonempty");
  return {kaplan_meier(t[1], d[1]), kaplan_meier(t[0], d[0])};
}

json to_json(const LogisticFit& f) {
  json se = json::array();
  for (Eigen::Index j = 0; j < f.beta.size(); ++j) se.push_back(f.se(j));
  return {{"names", f.names},
          {"beta", std::vector<double>(f.beta.data(), f.beta.data() + f.beta.size())},
          {"se", se},
          {"loglik", f.loglik},
          {"score_norm", f.score_norm},
          {"iterations", f.iterations},
          {"converged", f.converged},
          {"separated", f.separated},
          {"trace", f.trace}};
}

json to_json(const OverlapReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"cell", c.label}, {"n", c.n}, {"mean_ps", c.mean_ps}, {"flagged", c.flagged}});
  return {{"bin_edges", r.bin_edges},
          {"hist_pkt", r.hist_pkt},
          {"hist_dialysis", r.hist_dialysis},
          {"range_pkt", {r.min_pkt, r.max_pkt}},
          {"range_dialysis", {r.min_dialysis, r.max_dialysis}},
          {"epsilon", r.epsilon},
          {"below_epsilon", r.below_eps},
          {"above_one_minus_epsilon", r.above_eps},
          {"cells", cells}};
}

void write_overlap_csv(std::ostream& out, const OverlapReport& r) {
  out << "bin_lo,bin_hi,pkt,dialysis\n";
  for (std::size_t b = 0; b < r.hist_pkt.size(); ++b)
    out << format_double(r.bin_edges[b]) << ',' << format_double(r.bin_edges[b + 1]) << ','
        << r.hist_pkt[b] << ',' << r.hist_dialysis[b] << '\n';
}

}  // namespace regsurv
