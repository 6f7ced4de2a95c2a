#include "regsurv/gestaft.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace regsurv {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// 95% quantile of chi-square with 2 df.
constexpr double kChi2Two95 = 5.991464547107979;

std::string psi_scale(double psi) { return format_fixed(std::exp(-psi), 1); }

}  // namespace

TransformedTime transform_time(const SubjectRecord& r, double psi_w, double psi_r,
                               std::optional<double> recensor_years) {
  TransformedTime out{static_cast<double>(r.t_days), r.event ? 1 : 0};
  if (!r.pkt) {
    const Decomposition d = decompose(r);
    out.time = d.t_w * std::exp(-psi_w) + d.t_r * std::exp(-psi_r);
  }
  if (recensor_years) {
    const double cap = *recensor_years * kDaysPerYear;
    if (out.time > cap) {
      out.time = cap;
      out.event = 0;
    }
  }
  return out;
}

void GestOptions::validate() const {
  if (!(lower < upper)) throw ConfigError("gest: bracket lower must be below upper");
  if (!(grid_step > 0) || !(coarse_step > 0) || !(fine_step > 0))
    throw ConfigError("gest: grid steps must be positive");
  if (!(tolerance > 0)) throw ConfigError("gest: tolerance must be positive");
  if (!(z_crit > 0)) throw ConfigError("gest: z_crit must be positive");
  if (!(joint_tolerance > 0)) throw ConfigError("gest: joint_tolerance must be positive");
  if (recensor_years && !(*recensor_years > 0)) throw ConfigError("gest: recensor_years must be positive");
  if (spec.uses("pkt")) throw ConfigError("gest: the confounder spec must not contain pkt");
}

json to_json(const GestOptions& o) {
  return {{"spec", o.spec.to_json()},
          {"bracket", {o.lower, o.upper}},
          {"grid_step", o.grid_step},
          {"tolerance", o.tolerance},
          {"z_crit", o.z_crit},
          {"recensor_years", o.recensor_years ? json(*o.recensor_years) : json(nullptr)},
          {"ties", o.ties == Ties::efron ? "efron" : "breslow"},
          {"coarse_step", o.coarse_step},
          {"fine_step", o.fine_step},
          {"joint_tolerance", o.joint_tolerance}};
}

GestOptions gest_options_from_json(const json& j) {
  GestOptions o;
  if (!j.is_object()) throw ConfigError("gest options must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "spec") o.spec = CovariateSpec::from_json(v);
    else if (key == "bracket") {
      if (!v.is_array() || v.size() != 2) throw ConfigError("gest: bracket must be [lower, upper]");
      o.lower = v[0].get<double>();
      o.upper = v[1].get<double>();
    } else if (key == "grid_step") o.grid_step = v.get<double>();
    else if (key == "tolerance") o.tolerance = v.get<double>();
    else if (key == "z_crit") o.z_crit = v.get<double>();
    else if (key == "recensor_years") {
      if (v.is_null()) o.recensor_years.reset();
      else o.recensor_years = v.get<double>();
    } else if (key == "ties") {
      const auto s = v.get<std::string>();
      if (s == "efron") o.ties = Ties::efron;
      else if (s == "breslow") o.ties = Ties::breslow;
      else throw ConfigError("gest: ties must be efron or breslow");
    } else if (key == "coarse_step") o.coarse_step = v.get<double>();
    else if (key == "fine_step") o.fine_step = v.get<double>();
    else if (key == "joint_tolerance") o.joint_tolerance = v.get<double>();
    else throw ConfigError("gest: unknown option '" + key + "'");
  }
  o.validate();
  return o;
}

double EstimatingValue::max_abs_z(int k) const {
  if (!available) return std::numeric_limits<double>::infinity();
  double m = std::abs(z[0]);
  if (k > 1) m = std::max(m, std::abs(z[1]));
  return m;
}

// ---------------------------------------------------------------------------

GestProblem::GestProblem(std::span<const SubjectRecord> records, const GestOptions& opts, int parameters)
    : records_(records.begin(), records.end()), opts_(opts), parameters_(parameters) {
  opts_.validate();
  if (parameters != 1 && parameters != 2) throw ConfigError("gest: parameters must be 1 or 2");
  if (records_.empty()) throw DataError("gest: empty cohort");
  std::size_t treated = 0;
  for (const auto& r : records_) treated += r.pkt;
  if (treated == 0 || treated == records_.size()) throw DataError("gest: both treatment arms must be nonempty");

  const DesignEncoder enc = DesignEncoder::fit(records_, opts_.spec);
  const Eigen::MatrixXd Z = enc.encode(records_);
  const auto n = static_cast<Eigen::Index>(records_.size());
  X_.resize(n, Z.cols() + parameters_);
  X_.leftCols(Z.cols()) = Z;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = records_[static_cast<std::size_t>(i)];
    X_(i, Z.cols()) = r.pkt ? 1.0 : 0.0;
    if (parameters_ == 2) X_(i, Z.cols() + 1) = (r.pkt && r.sex == Sex::female) ? 1.0 : 0.0;
  }
  std::vector<std::string> names = enc.names();
  names.push_back("pkt");
  if (parameters_ == 2) names.push_back("pkt:female");
  check_full_rank(X_, names);
  time_.resize(records_.size());
  event_.resize(records_.size());
}

EstimatingValue GestProblem::evaluate(double psi_w, double psi_r) {
  EstimatingValue v;
  v.psi_w = psi_w;
  v.psi_r = psi_r;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto t = transform_time(records_[i], psi_w, psi_r, opts_.recensor_years);
    time_[i] = t.time;
    event_[i] = t.event;
    v.events += t.event;
  }
  CoxOptions co;
  co.ties = opts_.ties;
  co.check_rank = false;  // checked once in the constructor
  co.init = warm_;
  CoxFit fit;
  try {
    fit = fit_cox(X_, time_, event_, co);
  } catch (const EstimationError&) {
    return v;
  }
  if (!fit.converged || fit.monotone) return v;
  const Eigen::Index p = X_.cols() - parameters_;
  for (int k = 0; k < parameters_; ++k) {
    v.beta[static_cast<std::size_t>(k)] = fit.beta[p + k];
    v.se[static_cast<std::size_t>(k)] = fit.se(p + k);
    v.z[static_cast<std::size_t>(k)] = fit.z(p + k);
  }
  if (parameters_ == 2) v.corr = fit.cov(p, p + 1) / (v.se[0] * v.se[1]);
  v.available = std::isfinite(v.z[0]) && std::isfinite(v.z[1]);
  if (v.available) warm_ = fit.beta;
  return v;
}

EstimatingValue estimating_statistic(std::span<const SubjectRecord> records, double psi,
                                     const GestOptions& opts) {
  GestProblem problem(records, opts, 1);
  return problem.evaluate(psi, 0.0);
}

// ---------------------------------------------------------------------------

std::string AftEstimate::report() const {
  auto interval = [](double psi, const std::array<double, 2>& ci, const char* sep) {
    // exp(-psi) reverses the order of the endpoints.
    return psi_scale(psi) + " (" + std::string(sep) + psi_scale(ci[1]) + ", " + psi_scale(ci[0]) + ")";
  };
  if (parameters == 1) return "exp(−ψ̂)=" + interval(psi_w, ci_w, "95% CI ");
  auto compact = [](double psi, const std::array<double, 2>& ci) {
    return psi_scale(psi) + " (" + psi_scale(ci[1]) + "," + psi_scale(ci[0]) + ")";
  };
  return "exp(−ψ̂_w)=" + compact(psi_w, ci_w) + ", exp(−ψ̂_r)=" + compact(psi_r, ci_r);
}

namespace {

std::vector<double> grid_points(double lo, double hi, double step) {
  std::vector<double> g;
  const auto k = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= k; ++i) g.push_back(lo + static_cast<double>(i) * step);
  if (hi - g.back() > 1e-9) g.push_back(hi);
  return g;
}

// Bisection on a sign change of f between a (f(a) = fa) and b.
template <class F>
double bisect(F&& f, double a, double fa, double b, double tol) {
  while (std::abs(b - a) > tol) {
    const double m = 0.5 * (a + b);
    const double fm = f(m);
    if (!std::isfinite(fm)) break;
    if ((fm < 0) == (fa < 0)) {
      a = m;
      fa = fm;
    } else {
      b = m;
    }
  }
  return 0.5 * (a + b);
}

// Walks from `start` in steps of `step` (signed) until `inside` fails, then
// bisects the boundary. Returns the endpoint and whether it hit `limit`.
template <class In>
std::pair<double, bool> invert(In&& inside, double start, double step, double limit, double tol) {
  double last_in = start;
  for (;;) {
    double next = last_in + step;
    const bool past = step > 0 ? next >= limit : next <= limit;
    if (past) next = limit;
    const double fn = inside(next);
    if (fn > 0) {
      auto f = [&](double x) { return inside(x); };
      return {bisect(f, last_in, -1.0, next, tol), false};
    }
    if (past) return {limit, true};
    last_in = next;
  }
}

}  // namespace

AftEstimate solve_psi(std::span<const SubjectRecord> records, const GestOptions& opts) {
  GestProblem problem(records, opts, 1);
  AftEstimate est;
  est.parameters = 1;
  est.recensor_years = opts.recensor_years;

  auto z_at = [&](double psi) {
    const auto v = problem.evaluate(psi, 0.0);
    est.trace.push_back(v);
    return v.available ? v.z[0] : kNaN;
  };

  const auto grid = grid_points(opts.lower, opts.upper, opts.grid_step);
  std::vector<double> z(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) z[i] = z_at(grid[i]);

  // Sign changes between consecutive available grid points; an exact zero counts once.
  std::vector<std::pair<std::size_t, std::size_t>> changes;
  std::size_t prev = grid.size();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!std::isfinite(z[i])) continue;
    if (prev < grid.size() && z[prev] != 0.0 && ((z[i] < 0) != (z[prev] < 0) || z[i] == 0.0))
      changes.emplace_back(prev, i);
    prev = i;
  }
  if (changes.empty())
    throw EstimationError("gest: no sign change of the estimating statistic in bracket [" +
                          format_double(opts.lower) + ", " + format_double(opts.upper) + "]");

  auto root_of = [&](std::pair<std::size_t, std::size_t> c) {
    if (z[c.second] == 0.0) return grid[c.second];
    return bisect(z_at, grid[c.first], z[c.first], grid[c.second], opts.tolerance);
  };
  for (const auto& c : changes) est.roots.push_back({root_of(c), 0.0});
  est.ambiguous = est.roots.size() > 1;
  est.psi_w = est.roots.front()[0];

  const auto at_root = problem.evaluate(est.psi_w, 0.0);
  est.trace.push_back(at_root);
  est.max_abs_z = at_root.max_abs_z(1);
  est.events_retained = at_root.events;
  // The statistic is a step function in psi; 0.01 in z is far below its sampling noise.
  est.converged = est.max_abs_z < 0.01;

  auto outside = [&](double psi) {
    const double zz = z_at(psi);
    return std::isfinite(zz) ? std::abs(zz) - opts.z_crit : 1.0;
  };
  const auto lo = invert(outside, est.psi_w, -opts.grid_step, opts.lower, opts.tolerance);
  const auto hi = invert(outside, est.psi_w, opts.grid_step, opts.upper, opts.tolerance);
  est.ci_w = {lo.first, hi.first};
  est.ci_w_open = {lo.second, hi.second};
  est.ci_r = {0.0, 0.0};

  std::stable_sort(est.trace.begin(), est.trace.end(),
                   [](const auto& a, const auto& b) { return a.psi_w < b.psi_w; });
  return est;
}

AftEstimate solve_psi_two(std::span<const SubjectRecord> records, const GestOptions& opts) {
  GestProblem problem(records, opts, 2);
  AftEstimate est;
  est.parameters = 2;
  est.recensor_years = opts.recensor_years;

  auto eval = [&](double w, double r) {
    const auto v = problem.evaluate(w, r);
    est.trace.push_back(v);
    return v;
  };

  // Coarse grid over the bracket square.
  const auto g = grid_points(opts.lower, opts.upper, opts.coarse_step);
  const std::size_t m = g.size();
  std::vector<double> score(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) score[i * m + j] = eval(g[i], g[j]).max_abs_z(2);

  // Separate regions where both coordinates pass the 1.96 test signal multiple roots.
  std::vector<int> label(m * m, -1);
  std::vector<std::size_t> best_in_region;
  for (std::size_t s = 0; s < m * m; ++s) {
    if (label[s] >= 0 || score[s] > opts.z_crit) continue;
    const int id = static_cast<int>(best_in_region.size());
    best_in_region.push_back(s);
    std::vector<std::size_t> stack{s};
    label[s] = id;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      if (score[c] < score[best_in_region.back()]) best_in_region.back() = c;
      const std::size_t ci = c / m, cj = c % m;
      const std::array<std::pair<long, long>, 4> nb{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
      for (auto [di, dj] : nb) {
        const long ni = static_cast<long>(ci) + di, nj = static_cast<long>(cj) + dj;
        if (ni < 0 || nj < 0 || ni >= static_cast<long>(m) || nj >= static_cast<long>(m)) continue;
        const std::size_t q = static_cast<std::size_t>(ni) * m + static_cast<std::size_t>(nj);
        if (label[q] < 0 && score[q] <= opts.z_crit) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
  }
  const std::size_t best_coarse =
      static_cast<std::size_t>(std::min_element(score.begin(), score.end()) - score.begin());
  if (!std::isfinite(score[best_coarse]))
    throw EstimationError("gest: estimating statistic unavailable over the whole bracket");

  // Fine grid around the best coarse point.
  double bw = g[best_coarse / m], br = g[best_coarse % m];
  EstimatingValue best = problem.evaluate(bw, br);
  {
    const double half = opts.coarse_step;
    const auto fw = grid_points(std::max(opts.lower, bw - half), std::min(opts.upper, bw + half), opts.fine_step);
    const auto fr = grid_points(std::max(opts.lower, br - half), std::min(opts.upper, br + half), opts.fine_step);
    for (double w : fw)
      for (double r : fr) {
        const auto v = eval(w, r);
        if (v.max_abs_z(2) < best.max_abs_z(2)) best = v;
      }
  }

  // Damped Newton on z with a forward-difference Jacobian.
  const double h = opts.fine_step;
  for (int it = 0; it < 30 && best.max_abs_z(2) >= opts.joint_tolerance; ++it) {
    const auto vw = eval(best.psi_w + h, best.psi_r);
    const auto vr = eval(best.psi_w, best.psi_r + h);
    if (!vw.available || !vr.available) break;
    Eigen::Matrix2d J;
    J << (vw.z[0] - best.z[0]) / h, (vr.z[0] - best.z[0]) / h, (vw.z[1] - best.z[1]) / h,
        (vr.z[1] - best.z[1]) / h;
    const Eigen::Vector2d zv(best.z[0], best.z[1]);
    const Eigen::FullPivLU<Eigen::Matrix2d> lu(J);
    if (!lu.isInvertible()) break;
    Eigen::Vector2d step = -lu.solve(zv);
    bool improved = false;
    for (int half = 0; half < 8; ++half) {
      const double w = std::clamp(best.psi_w + step[0], opts.lower, opts.upper);
      const double r = std::clamp(best.psi_r + step[1], opts.lower, opts.upper);
      const auto v = eval(w, r);
      if (v.max_abs_z(2) < best.max_abs_z(2)) {
        best = v;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
  }
  if (best.max_abs_z(2) > opts.z_crit)
    throw EstimationError("gest: no joint zero of the estimating statistic in the bracket square");

  est.psi_w = best.psi_w;
  est.psi_r = best.psi_r;
  est.max_abs_z = best.max_abs_z(2);
  est.converged = est.max_abs_z < opts.joint_tolerance;
  est.events_retained = best.events;
  for (std::size_t s : best_in_region) est.roots.push_back({g[s / m], g[s % m]});
  if (est.roots.empty()) est.roots.push_back({est.psi_w, est.psi_r});
  else est.roots.front() = {est.psi_w, est.psi_r};  // refined root replaces its coarse seed
  est.ambiguous = best_in_region.size() > 1;

  // Per-axis intervals: slices of the joint 2-df Wald test at the estimate.
  auto wald_excess = [&](double w, double r) {
    const auto v = eval(w, r);
    if (!v.available) return 1.0;
    const double c = v.corr;
    const double q = (v.z[0] * v.z[0] - 2 * c * v.z[0] * v.z[1] + v.z[1] * v.z[1]) / (1 - c * c);
    return q - kChi2Two95;
  };
  const double tol = opts.tolerance * 10;
  auto along_w = [&](double w) { return wald_excess(w, est.psi_r); };
  auto along_r = [&](double r) { return wald_excess(est.psi_w, r); };
  const auto wl = invert(along_w, est.psi_w, -opts.fine_step, opts.lower, tol);
  const auto wh = invert(along_w, est.psi_w, opts.fine_step, opts.upper, tol);
  const auto rl = invert(along_r, est.psi_r, -opts.fine_step, opts.lower, tol);
  const auto rh = invert(along_r, est.psi_r, opts.fine_step, opts.upper, tol);
  est.ci_w = {wl.first, wh.first};
  est.ci_w_open = {wl.second, wh.second};
  est.ci_r = {rl.first, rh.first};
  est.ci_r_open = {rl.second, rh.second};
  return est;
}

std::vector<SweepRow> recensoring_sweep(std::span<const SubjectRecord> records, const GestOptions& opts,
                                        std::span<const double> cutoffs_years, int min_events) {
  std::vector<double> cutoffs(cutoffs_years.begin(), cutoffs_years.end());
  std::sort(cutoffs.begin(), cutoffs.end(), std::greater<>());
  std::vector<SweepRow> rows;

  auto run = [&](std::optional<double> cutoff, double psi_guess) {
    SweepRow row;
    row.cutoff_years = cutoff;
    GestOptions o = opts;
    o.recensor_years = cutoff;
    for (const auto& r : records) row.events += transform_time(r, psi_guess, 0.0, cutoff).event;
    if (row.events < min_events) {
      row.too_few_events = true;
      row.status = "too few events";
      return row;
    }
    try {
      row.estimate = solve_psi(records, o);
      row.events = row.estimate->events_retained;
    } catch (const EstimationError& e) {
      row.status = e.what();
    }
    return row;
  };

  rows.push_back(run(std::nullopt, 0.0));
  const double guess = rows.front().estimate ? rows.front().estimate->psi_w : 0.0;
  for (double c : cutoffs) rows.push_back(run(c, guess));
  return rows;
}

// ---------------------------------------------------------------------------

json to_json(const EstimatingValue& v) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return {{"psi_w", v.psi_w}, {"psi_r", v.psi_r}, {"available", v.available}, {"beta", {num(v.beta[0]), num(v.beta[1])}},
          {"se", {num(v.se[0]), num(v.se[1])}}, {"z", {num(v.z[0]), num(v.z[1])}}, {"events", v.events}};
}

json to_json(const AftEstimate& e) {
  json j = {{"parameters", e.parameters},
            {"psi_w", e.psi_w},
            {"exp_neg_psi_w", std::exp(-e.psi_w)},
            {"ci_w", e.ci_w},
            {"exp_neg_ci_w", {std::exp(-e.ci_w[1]), std::exp(-e.ci_w[0])}},
            {"ci_w_open", e.ci_w_open},
            {"max_abs_z", e.max_abs_z},
            {"converged", e.converged},
            {"ambiguous", e.ambiguous},
            {"roots", e.roots},
            {"recensor_years", e.recensor_years ? json(*e.recensor_years) : json(nullptr)},
            {"events_retained", e.events_retained},
            {"report", e.report()}};
  if (e.parameters == 2) {
    j["psi_r"] = e.psi_r;
    j["exp_neg_psi_r"] = std::exp(-e.psi_r);
    j["ci_r"] = e.ci_r;
    j["exp_neg_ci_r"] = {std::exp(-e.ci_r[1]), std::exp(-e.ci_r[0])};
    j["ci_r_open"] = e.ci_r_open;
  }
  return j;
}

json to_json(const SweepRow& r) {
  json j = {{"cutoff_years", r.cutoff_years ? json(*r.cutoff_years) : json(nullptr)},
            {"events", r.events},
            {"too_few_events", r.too_few_events},
            {"status", r.status}};
  if (r.estimate) j["estimate"] = to_json(*r.estimate);
  return j;
}

void write_trace_csv(std::ostream& out, const AftEstimate& e) {
  out << "psi_w,psi_r,available,beta,se,z";
  if (e.parameters == 2) out << ",beta_female,se_female,z_female";
  out << ",events\n";
  for (const auto& v : e.trace) {
    out << format_double(v.psi_w) << ',' << format_double(v.psi_r) << ',' << (v.available ? 1 : 0);
    for (int k = 0; k < e.parameters; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      out << ',' << format_double(v.available ? v.beta[kk] : kNaN) << ','
          << format_double(v.available ? v.se[kk] : kNaN) << ',' << format_double(v.available ? v.z[kk] : kNaN);
    }
    out << ',' << v.events << '\n';
  }
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "cutoff_years,psi,lo,hi,exp_neg_psi,exp_lo,exp_hi,events,too_few_events,status\n";
  for (const auto& r : rows) {
    out << (r.cutoff_years ? format_double(*r.cutoff_years) : "none") << ',';
    if (r.estimate) {
      const auto& e = *r.estimate;
      out << format_double(e.psi_w) << ',' << format_double(e.ci_w[0]) << ',' << format_double(e.ci_w[1]) << ','
          << format_double(std::exp(-e.psi_w)) << ',' << format_double(std::exp(-e.ci_w[1])) << ','
          << format_double(std::exp(-e.ci_w[0]));
    } else {
      out << "NA,NA,NA,NA,NA,NA";
    }
    out << ',' << r.events << ',' << (r.too_few_events ? 1 : 0) << ",\"" << r.status << "\"\n";
  }
}

}  // namespace regsurv
