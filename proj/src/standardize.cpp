#include "regsurv/standardize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace regsurv {

std::size_t StandardizedContrast::index_at(double t) const {
  auto it = std::upper_bound(time.begin(), time.end(), t);
  return it == time.begin() ? 0 : static_cast<std::size_t>(it - time.begin()) - 1;
}

Cohort population_rows(std::span<const SubjectRecord> records, Estimand e) {
  Cohort out;
  for (const auto& r : records)
    if (e == Estimand::ate || (e == Estimand::att) == r.pkt) out.push_back(r);
  return out;
}

std::vector<double> standardized_survival(const CoxModel& model, std::span<const SubjectRecord> population,
                                          std::span<const double> times) {
  if (population.empty()) throw DataError("standardize: empty population");
  const Eigen::MatrixXd X = model.encoder.encode(population);
  Eigen::VectorXd hr(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) hr[i] = std::exp(model.fit.linear_predictor(X.row(i)));
  std::vector<double> out(times.size());
  const double inv_n = 1.0 / static_cast<double>(X.rows());
  for (std::size_t k = 0; k < times.size(); ++k) {
    const double cumhaz = model.fit.cumhaz_centered(times[k]);
    if (cumhaz == 0.0) {
      out[k] = 1.0;
      continue;
    }
    out[k] = (-cumhaz * hr.array()).exp().sum() * inv_n;
  }
  return out;
}

StandardizedContrast standardized_curves(const CoxModel& fit_pkt, const CoxModel& fit_dial,
                                         std::span<const SubjectRecord> population,
                                         const std::string& label, std::span<const double> grid) {
  require_converged(fit_pkt.fit, "standardize (PKT arm)");
  require_converged(fit_dial.fit, "standardize (dialysis arm)");
  StandardizedContrast c;
  c.population = label;
  if (grid.empty()) {
    const auto& a = fit_pkt.fit.cumhaz_centered.time;
    const auto& b = fit_dial.fit.cumhaz_centered.time;
    c.time.push_back(0.0);
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(c.time));
    c.time.erase(std::unique(c.time.begin(), c.time.end()), c.time.end());
  } else {
    c.time.assign(grid.begin(), grid.end());
  }
  c.s1 = standardized_survival(fit_pkt, population, c.time);
  c.s0 = standardized_survival(fit_dial, population, c.time);
  c.diff.resize(c.time.size());
  for (std::size_t k = 0; k < c.time.size(); ++k) c.diff[k] = c.s1[k] - c.s0[k];
  c.max_time = std::min(fit_pkt.fit.last_time, fit_dial.fit.last_time);
  return c;
}

ArmModels fit_arm_models(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                         const CoxOptions& opts) {
  Cohort pkt, dial;
  for (const auto& r : records) (r.pkt ? pkt : dial).push_back(r);
  if (pkt.empty() || dial.empty()) throw DataError("both treatment arms must be nonempty");
  ArmModels m{fit_cox(pkt, spec, opts, records), fit_cox(dial, spec, opts, records)};
  m.pkt.fit.arm = "pkt";
  m.dialysis.fit.arm = "dialysis";
  return m;
}

Statistic standardize_statistic(const CovariateSpec& spec, std::vector<double> horizons_years,
                                std::vector<Estimand> estimands, const CoxOptions& opts) {
  return [=](std::span<const SubjectRecord> records) {
    const ArmModels m = fit_arm_models(records, spec, opts);
    require_converged(m.pkt.fit, "PKT arm");
    require_converged(m.dialysis.fit, "dialysis arm");
    std::vector<double> days(horizons_years.size());
    for (std::size_t h = 0; h < days.size(); ++h) days[h] = horizons_years[h] * kDaysPerYear;
    std::vector<double> out;
    for (auto e : estimands) {
      const Cohort pop = population_rows(records, e);
      const auto s1 = standardized_survival(m.pkt, pop, days);
      const auto s0 = standardized_survival(m.dialysis, pop, days);
      for (std::size_t h = 0; h < days.size(); ++h) {
        out.push_back(s1[h]);
        out.push_back(s0[h]);
        out.push_back(s1[h] - s0[h]);
      }
    }
    return out;
  };
}

std::string population_label(const std::string& tag) {
  if (tag == "ATE") return "RRT";
  if (tag == "ATT") return "PKT";
  if (tag == "ATNT") return "Dialysis first";
  return tag;
}

std::string RiskDifferenceRow::format() const {
  std::string h = format_double(horizon_years);
  std::string out = label + ", " + h + "y: ";
  if (extrapolated) return out + "beyond follow-up";
  auto cell = [&](double v, const std::array<double, 2>* b) {
    std::string s = format_fixed(v, 2);
    if (b) s += " (" + format_fixed((*b)[0], 2) + "," + format_fixed((*b)[1], 2) + ")";
    return s;
  };
  out += cell(s1, ci ? &ci->s1 : nullptr) + " | " + cell(s0, ci ? &ci->s0 : nullptr) + " | " +
         cell(diff, ci ? &ci->diff : nullptr);
  return out;
}

std::vector<RiskDifferenceRow> risk_difference_table(const StandardizedContrast& c,
                                                     std::span<const double> horizons_years,
                                                     std::span<const HorizonBounds> ci) {
  if (!ci.empty() && ci.size() != horizons_years.size())
    throw ConfigError("risk_difference_table: one interval per horizon required");
  std::vector<RiskDifferenceRow> rows;
  for (std::size_t h = 0; h < horizons_years.size(); ++h) {
    RiskDifferenceRow r;
    r.label = population_label(c.population);
    r.horizon_years = horizons_years[h];
    const double t = horizons_years[h] * kDaysPerYear;
    r.extrapolated = t > c.max_time;
    if (!r.extrapolated) {
      r.s1 = c.s1_at(t);
      r.s0 = c.s0_at(t);
      r.diff = r.s1 - r.s0;
      if (!ci.empty()) r.ci = ci[h];
    } else {
      r.s1 = r.s0 = r.diff = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(r);
  }
  return rows;
}

void write_risk_difference_csv(std::ostream& out, std::span<const RiskDifferenceRow> rows) {
  out << "population,horizon_years,extrapolated,s1,s1_lo,s1_hi,s0,s0_lo,s0_hi,diff,diff_lo,diff_hi,row\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rows) {
    const HorizonBounds b = r.ci.value_or(HorizonBounds{{nan, nan}, {nan, nan}, {nan, nan}});
    out << r.label << ',' << format_double(r.horizon_years) << ',' << (r.extrapolated ? 1 : 0) << ','
        << format_double(r.s1) << ',' << format_double(b.s1[0]) << ',' << format_double(b.s1[1]) << ','
        << format_double(r.s0) << ',' << format_double(b.s0[0]) << ',' << format_double(b.s0[1]) << ','
        << format_double(r.diff) << ',' << format_double(b.diff[0]) << ',' << format_double(b.diff[1])
        << ",\"" << r.format() << "\"\n";
  }
}

void write_contrast_csv(std::ostream& out, const StandardizedContrast& c, bool header) {
  if (header) out << "population,time,s1,s0,diff\n";
  for (std::size_t k = 0; k < c.time.size(); ++k)
    out << c.population << ',' << format_double(c.time[k] / kDaysPerYear) << ',' << format_double(c.s1[k])
        << ',' << format_double(c.s0[k]) << ',' << format_double(c.diff[k]) << '\n';
}

json to_json(const RiskDifferenceRow& r) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json j = {{"population", r.label}, {"horizon_years", r.horizon_years}, {"extrapolated", r.extrapolated},
            {"s1", num(r.s1)},       {"s0", num(r.s0)},                   {"diff", num(r.diff)},
            {"text", r.format()}};
  if (r.ci)
    j["ci"] = {{"s1", r.ci->s1}, {"s0", r.ci->s0}, {"diff", r.ci->diff}};
  return j;
}

// ---------------------------------------------------------------------------

ProfileCurves profile_curves(const CoxModel& fit_a, const CoxModel& fit_b,
                             std::span<const SubjectRecord> records,
                             std::span<const double> percentiles, std::span<const double> grid) {
  if (records.empty()) throw DataError("profile_curves: empty population");
  for (double p : percentiles)
    if (!(p > 0.0 && p <= 100.0)) throw ConfigError("profile_curves: percentile outside (0,100]");
  ProfileCurves out;
  if (grid.empty()) {
    const auto& a = fit_a.fit.cumhaz_centered.time;
    const auto& b = fit_b.fit.cumhaz_centered.time;
    out.time.push_back(0.0);
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out.time));
    out.time.erase(std::unique(out.time.begin(), out.time.end()), out.time.end());
  } else {
    out.time.assign(grid.begin(), grid.end());
  }
  const Eigen::MatrixXd Xa = fit_a.encoder.encode(records);
  const Eigen::MatrixXd Xb = fit_b.encoder.encode(records);
  const auto n = records.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.ids.push_back(records[i].id);
    out.score_a.push_back(fit_a.fit.linear_predictor(Xa.row(static_cast<Eigen::Index>(i))));
    out.score_b.push_back(fit_b.fit.linear_predictor(Xb.row(static_cast<Eigen::Index>(i))));
  }
  auto ranked = [&](const std::vector<double>& score) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return score[x] < score[y]; });
    return idx;
  };
  const auto ra = ranked(out.score_a), rb = ranked(out.score_b);
  auto curve = [&](const CoxModel& m, std::size_t i) {
    return predict_survival(m.fit, m.encoder.encode(records[i]), out.time).surv;
  };
  for (double p : percentiles) {
    // Nearest-rank percentile: smallest rank covering p percent of subjects.
    const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(p / 100.0 * n))) - 1;
    out.percentiles.push_back(p);
    out.id_a.push_back(records[ra[k]].id);
    out.id_b.push_back(records[rb[k]].id);
    out.curve_a.push_back(curve(fit_a, ra[k]));
    out.curve_b.push_back(curve(fit_b, rb[k]));
  }
  out.standardized_a = standardized_survival(fit_a, records, out.time);
  out.standardized_b = standardized_survival(fit_b, records, out.time);
  return out;
}

void write_profile_csv(std::ostream& out, const ProfileCurves& p) {
  out << "percentile,model,id,time,estimate\n";
  for (std::size_t j = 0; j < p.percentiles.size(); ++j)
    for (std::size_t k = 0; k < p.time.size(); ++k) {
      const auto t = format_double(p.time[k] / kDaysPerYear);
      out << format_double(p.percentiles[j]) << ",A," << p.id_a[j] << ',' << t << ','
          << format_double(p.curve_a[j][k]) << '\n';
      out << format_double(p.percentiles[j]) << ",B," << p.id_b[j] << ',' << t << ','
          << format_double(p.curve_b[j][k]) << '\n';
    }
  for (std::size_t k = 0; k < p.time.size(); ++k) {
    const auto t = format_double(p.time[k] / kDaysPerYear);
    out << "standardized,A,," << t << ',' << format_double(p.standardized_a[k]) << '\n';
    out << "standardized,B,," << t << ',' << format_double(p.standardized_b[k]) << '\n';
  }
}

void write_scatter_csv(std::ostream& out, const ProfileCurves& p) {
  out << "id,score_a,score_b\n";
  for (std::size_t i = 0; i < p.ids.size(); ++i)
    out << p.ids[i] << ',' << format_double(p.score_a[i]) << ',' << format_double(p.score_b[i]) << '\n';
}

}  // namespace regsurv
