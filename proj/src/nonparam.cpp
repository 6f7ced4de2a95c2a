#include "regsurv/nonparam.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

#include "regsurv/common.hpp"

namespace regsurv {

std::size_t SurvivalCurve::index_at(double t) const {
  auto it = std::upper_bound(time.begin(), time.end(), t);
  if (it == time.begin()) return 0;
  return static_cast<std::size_t>(it - time.begin()) - 1;
}

double SurvivalCurve::se(double t) const {
  const auto k = index_at(t);
  return surv[k] * std::sqrt(greenwood[k]);
}

namespace {

std::vector<std::size_t> order_by_time(std::span<const double> times) {
  std::vector<std::size_t> idx(times.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return times[a] < times[b]; });
  return idx;
}

void loglog_ci(double s, double gw, double& lo, double& hi) {
  if (s <= 0.0 || s >= 1.0 || !std::isfinite(gw)) {
    lo = hi = s;
    return;
  }
  const double se = std::sqrt(gw) / std::abs(std::log(s));
  lo = std::pow(s, std::exp(kZ975 * se));
  hi = std::pow(s, std::exp(-kZ975 * se));
}

}  // namespace

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events,
                           std::span<const double> weights) {
  if (times.empty()) throw DataError("kaplan_meier: empty input");
  if (events.size() != times.size() || (!weights.empty() && weights.size() != times.size()))
    throw DataError("kaplan_meier: input lengths differ");
  SurvivalCurve c;
  c.weighted = !weights.empty();
  double total = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] >= 0.0)) throw DataError("kaplan_meier: negative time");
    const double w = c.weighted ? weights[i] : 1.0;
    if (!(w > 0.0)) throw DataError("kaplan_meier: weights must be positive");
    total += w;
    c.last_time = std::max(c.last_time, times[i]);
  }
  c.at_risk[0] = total;

  const auto idx = order_by_time(times);
  double n = total, s = 1.0, gw = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    const double t = times[idx[i]];
    double d = 0.0, removed = 0.0;
    std::size_t j = i;
    for (; j < idx.size() && times[idx[j]] == t; ++j) {
      const double w = c.weighted ? weights[idx[j]] : 1.0;
      removed += w;
      if (events[idx[j]]) d += w;
    }
    if (d > 0.0) {
      s *= 1.0 - d / n;
      gw += (n > d) ? d / (n * (n - d)) : std::numeric_limits<double>::infinity();
      double lo, hi;
      loglog_ci(s, gw, lo, hi);
      c.time.push_back(t);
      c.surv.push_back(s);
      c.lo.push_back(lo);
      c.hi.push_back(hi);
      c.at_risk.push_back(n);
      c.events.push_back(d);
      c.greenwood.push_back(gw);
    }
    n -= removed;
    i = j;
  }
  return c;
}

double median_time(const SurvivalCurve& c) {
  for (std::size_t k = 0; k < c.time.size(); ++k)
    if (c.surv[k] <= 0.5) return c.time[k];
  return std::numeric_limits<double>::quiet_NaN();
}

CifCurves cumulative_incidence(std::span<const double> times, std::span<const int> event_type) {
  if (times.empty()) throw DataError("cumulative_incidence: empty input");
  if (event_type.size() != times.size()) throw DataError("cumulative_incidence: input lengths differ");
  int k_types = 0;
  for (int e : event_type) {
    if (e < 0) throw DataError("cumulative_incidence: negative event code");
    k_types = std::max(k_types, e);
  }
  CifCurves c;
  c.cif.assign(static_cast<std::size_t>(k_types), std::vector<double>{0.0});
  c.at_risk[0] = static_cast<double>(times.size());

  const auto idx = order_by_time(times);
  double n = static_cast<double>(times.size()), s = 1.0;
  std::vector<double> d(static_cast<std::size_t>(k_types));
  for (std::size_t i = 0; i < idx.size();) {
    const double t = times[idx[i]];
    std::fill(d.begin(), d.end(), 0.0);
    double removed = 0.0, any = 0.0;
    std::size_t j = i;
    for (; j < idx.size() && times[idx[j]] == t; ++j) {
      removed += 1.0;
      if (const int e = event_type[idx[j]]; e > 0) {
        d[static_cast<std::size_t>(e - 1)] += 1.0;
        any += 1.0;
      }
    }
    if (any > 0.0) {
      c.time.push_back(t);
      c.at_risk.push_back(n);
      for (std::size_t k = 0; k < d.size(); ++k) c.cif[k].push_back(c.cif[k].back() + s * d[k] / n);
      s *= 1.0 - any / n;
      c.surv.push_back(s);
    }
    n -= removed;
    i = j;
  }
  return c;
}

TestResult log_rank(std::span<const int> groups, std::span<const double> times,
                    std::span<const int> events) {
  if (groups.size() != times.size() || events.size() != times.size())
    throw DataError("log_rank: input lengths differ");
  std::map<int, std::size_t> label_index;
  for (int g : groups) label_index.emplace(g, 0);
  if (label_index.size() < 2) throw DataError("log_rank: need at least two groups");
  std::size_t g_count = 0;
  for (auto& [label, ix] : label_index) ix = g_count++;

  const auto idx = order_by_time(times);
  Eigen::VectorXd n_g = Eigen::VectorXd::Zero(g_count), obs = n_g, expct = n_g;
  Eigen::MatrixXd var = Eigen::MatrixXd::Zero(g_count, g_count);
  for (int g : groups) n_g[label_index[g]] += 1.0;

  double total_events = 0.0;
  Eigen::VectorXd d_g(g_count), removed_g(g_count);
  for (std::size_t i = 0; i < idx.size();) {
    const double t = times[idx[i]];
    d_g.setZero();
    removed_g.setZero();
    std::size_t j = i;
    for (; j < idx.size() && times[idx[j]] == t; ++j) {
      const auto g = label_index[groups[idx[j]]];
      removed_g[g] += 1.0;
      if (events[idx[j]]) d_g[g] += 1.0;
    }
    const double d = d_g.sum(), n = n_g.sum();
    if (d > 0.0) {
      total_events += d;
      obs += d_g;
      expct += d * n_g / n;
      if (n > 1.0) {
        const double f = d * (n - d) / (n * n * (n - 1.0));
        var.diagonal() += f * n * n_g;
        var.noalias() -= f * n_g * n_g.transpose();
      }
    }
    n_g -= removed_g;
    i = j;
  }
  if (total_events == 0.0) throw DataError("log_rank: no events");

  TestResult r;
  r.df = static_cast<int>(g_count) - 1;
  r.observed.assign(obs.data(), obs.data() + g_count);
  r.expected.assign(expct.data(), expct.data() + g_count);
  const Eigen::VectorXd u = (obs - expct).head(r.df);
  const Eigen::MatrixXd v = var.topLeftCorner(r.df, r.df);
  if (u.squaredNorm() == 0.0) {
    r.statistic = 0.0;
  } else {
    r.statistic = u.dot(v.ldlt().solve(u));
  }
  r.p = chi2_sf(r.statistic, r.df);
  return r;
}

void write_curve_csv_header(std::ostream& out) { out << "curve,time,estimate,lo,hi,at_risk\n"; }

void write_curve_csv(std::ostream& out, const std::string& label, const SurvivalCurve& c) {
  for (std::size_t k = 0; k < c.time.size(); ++k)
    out << label << ',' << format_double(c.time[k] / kDaysPerYear) << ','
        << format_double(c.surv[k]) << ',' << format_double(c.lo[k]) << ','
        << format_double(c.hi[k]) << ',' << format_double(c.at_risk[k]) << '\n';
}

void write_cif_csv(std::ostream& out, const CifCurves& c, std::span<const std::string> type_names) {
  out << "type,time,estimate,at_risk\n";
  for (std::size_t k = 0; k < c.types(); ++k) {
    const std::string name = k < type_names.size() ? type_names[k] : "type" + std::to_string(k + 1);
    for (std::size_t i = 0; i < c.time.size(); ++i)
      out << name << ',' << format_double(c.time[i] / kDaysPerYear) << ','
          << format_double(c.cif[k][i]) << ',' << format_double(c.at_risk[i]) << '\n';
  }
  for (std::size_t i = 0; i < c.time.size(); ++i)
    out << "event-free," << format_double(c.time[i] / kDaysPerYear) << ','
        << format_double(c.surv[i]) << ',' << format_double(c.at_risk[i]) << '\n';
}

json to_json(const SurvivalCurve& c) {
  return {{"time_days", c.time}, {"estimate", c.surv}, {"lo", c.lo},
          {"hi", c.hi},          {"at_risk", c.at_risk}, {"weighted", c.weighted}};
}

json to_json(const TestResult& r) {
  return {{"statistic", r.statistic}, {"df", r.df}, {"p", r.p},
          {"observed", r.observed},   {"expected", r.expected}};
}

}  // namespace regsurv
