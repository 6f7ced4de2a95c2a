#include "regsurv/coxmod.hpp"

#include <algorithm>
#include <numeric>

namespace regsurv {

double StepFunction::operator()(double t) const {
  auto it = std::upper_bound(time.begin(), time.end(), t);
  if (it == time.begin()) return 0.0;
  return value[static_cast<std::size_t>(it - time.begin()) - 1];
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Data sorted by decreasing time, with tied groups delimited.
struct SortedData {
  RowMatrix X;  // centered
  std::vector<double> time;
  std::vector<int> event;
  std::vector<std::size_t> group_start;  // start index of each distinct time, plus n
};

SortedData sort_data(const Eigen::MatrixXd& X, const Eigen::VectorXd& center,
                     std::span<const double> time, std::span<const int> event) {
  const auto n = time.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return time[a] > time[b]; });
  SortedData s;
  s.X.resize(static_cast<Eigen::Index>(n), X.cols());
  s.time.resize(n);
  s.event.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto i = static_cast<Eigen::Index>(idx[k]);
    if (X.cols()) s.X.row(static_cast<Eigen::Index>(k)) = X.row(i) - center.transpose();
    s.time[k] = time[idx[k]];
    s.event[k] = event[idx[k]] ? 1 : 0;
  }
  for (std::size_t k = 0; k < n; ++k)
    if (k == 0 || s.time[k] != s.time[k - 1]) s.group_start.push_back(k);
  s.group_start.push_back(n);
  return s;
}

struct Evaluation {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;
};

// Log partial likelihood, score and observed information at beta.
Evaluation evaluate(const SortedData& s, const Eigen::VectorXd& beta, Ties ties, bool derivatives) {
  const Eigen::Index p = beta.size();
  const std::size_t n = s.time.size();
  Eigen::VectorXd eta = p ? Eigen::VectorXd(s.X * beta) : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  const double shift = eta.size() ? eta.maxCoeff() : 0.0;

  Evaluation ev;
  ev.grad = Eigen::VectorXd::Zero(p);
  ev.info = Eigen::MatrixXd::Zero(p, p);
  double S0 = 0.0;
  Eigen::VectorXd S1 = Eigen::VectorXd::Zero(p), D1(p), s1(p);
  Eigen::MatrixXd S2 = Eigen::MatrixXd::Zero(p, p), D2(p, p), s2(p, p);

  for (std::size_t g = 0; g + 1 < s.group_start.size(); ++g) {
    const auto a = s.group_start[g], b = s.group_start[g + 1];
    double D0 = 0.0;
    int d = 0;
    if (derivatives) {
      D1.setZero();
      D2.setZero();
    }
    for (auto k = a; k < b; ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      const double w = std::exp(eta[row] - shift);
      S0 += w;
      if (derivatives && p) {
        const auto x = s.X.row(row).transpose();
        S1.noalias() += w * x;
        S2.selfadjointView<Eigen::Lower>().rankUpdate(x, w);
      }
      if (s.event[k]) {
        ++d;
        D0 += w;
        ev.loglik += eta[row];
        if (derivatives && p) {
          const auto x = s.X.row(row).transpose();
          ev.grad.noalias() += x;
          D1.noalias() += w * x;
          D2.selfadjointView<Eigen::Lower>().rankUpdate(x, w);
        }
      }
    }
    if (d == 0) continue;
    if (ties == Ties::breslow || d == 1) {
      ev.loglik -= d * (std::log(S0) + shift);
      if (derivatives && p) {
        ev.grad.noalias() -= d * S1 / S0;
        ev.info.noalias() += d * (S2 / S0 - S1 * S1.transpose() / (S0 * S0));
      }
    } else {
      for (int l = 0; l < d; ++l) {
        const double f = static_cast<double>(l) / d;
        const double s0 = S0 - f * D0;
        ev.loglik -= std::log(s0) + shift;
        if (derivatives && p) {
          s1 = S1 - f * D1;
          s2 = S2 - f * D2;
          ev.grad.noalias() -= s1 / s0;
          ev.info.noalias() += s2 / s0 - s1 * s1.transpose() / (s0 * s0);
        }
      }
    }
  }
  if (derivatives && p) ev.info = ev.info.selfadjointView<Eigen::Lower>();
  return ev;
}

void validate_inputs(const Eigen::MatrixXd& X, std::span<const double> time,
                     std::span<const int> event) {
  if (time.empty()) throw EstimationError("fit_cox: empty input");
  if (event.size() != time.size() || static_cast<std::size_t>(X.rows()) != time.size())
    throw EstimationError("fit_cox: input lengths differ");
  if (std::none_of(event.begin(), event.end(), [](int e) { return e != 0; }))
    throw EstimationError("fit_cox: no events");
}

}  // namespace

double cox_loglik(const Eigen::MatrixXd& X, std::span<const double> time,
                  std::span<const int> event, const Eigen::VectorXd& beta, Ties ties) {
  validate_inputs(X, time, event);
  const auto s = sort_data(X, Eigen::VectorXd::Zero(X.cols()), time, event);
  return evaluate(s, beta, ties, false).loglik;
}

CoxFit fit_cox(const Eigen::MatrixXd& X, std::span<const double> time, std::span<const int> event,
               const CoxOptions& opts) {
  validate_inputs(X, time, event);
  const Eigen::Index p = X.cols();
  CoxFit fit;
  fit.ties = opts.ties;
  fit.center = p ? Eigen::VectorXd(X.colwise().mean().transpose()) : Eigen::VectorXd();
  fit.last_time = *std::max_element(time.begin(), time.end());
  if (opts.check_rank && p) {
    std::vector<std::string> names(static_cast<std::size_t>(p));
    for (Eigen::Index j = 0; j < p; ++j) names[j] = "column " + std::to_string(j);
    check_full_rank(X, names);
  }
  const auto s = sort_data(X, fit.center, time, event);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  if (opts.init.size() == p) beta = opts.init;
  Evaluation ev = evaluate(s, beta, opts.ties, true);
  fit.loglik_null = p ? evaluate(s, Eigen::VectorXd::Zero(p), opts.ties, false).loglik : ev.loglik;
  fit.trace.push_back(ev.loglik);

  while (p) {
    fit.grad_norm = ev.grad.lpNorm<Eigen::Infinity>();
    if (fit.grad_norm < opts.tolerance) {
      fit.converged = true;
      break;
    }
    if (beta.lpNorm<Eigen::Infinity>() > opts.beta_limit) {
      fit.monotone = true;
      break;
    }
    if (fit.iterations >= opts.max_iter) break;
    ++fit.iterations;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.info);
    Eigen::VectorXd step = ldlt.solve(ev.grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) step = ev.grad * 1e-3;
    Evaluation next;
    Eigen::VectorXd candidate;
    bool improved = false;
    for (int half = 0; half < 30; ++half) {
      candidate = beta + step;
      next = evaluate(s, candidate, opts.ties, true);
      if (std::isfinite(next.loglik) && next.loglik >= ev.loglik - 1e-12 * std::abs(ev.loglik)) {
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) {
      // Stalled at the floating-point floor of the likelihood.
      fit.converged = fit.grad_norm < 1e-5;
      break;
    }
    beta = candidate;
    ev = std::move(next);
    fit.trace.push_back(ev.loglik);
  }
  fit.beta = beta;
  fit.loglik = ev.loglik;
  if (!p) fit.converged = true;
  if (p && beta.lpNorm<Eigen::Infinity>() > opts.beta_limit) {
    fit.monotone = true;
    fit.converged = false;
  }

  if (p) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ev.info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
      if (!fit.monotone) throw EstimationError("fit_cox: singular information matrix (rank deficiency)");
      fit.cov = Eigen::MatrixXd::Constant(p, p, std::numeric_limits<double>::quiet_NaN());
    } else {
      fit.cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
      fit.cov = 0.5 * (fit.cov + fit.cov.transpose()).eval();
      // The gradient can vanish numerically on the way to infinity.
      for (Eigen::Index j = 0; j < p; ++j)
        if (std::abs(beta[j]) > opts.beta_limit / 2 && !(fit.se(j) < std::abs(beta[j]))) {
          fit.monotone = true;
          fit.converged = false;
        }
    }
  }

  // Breslow increments d / sum_risk exp(eta), accumulated forward in time.
  Eigen::VectorXd eta = p ? Eigen::VectorXd(s.X * beta) : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.time.size()));
  std::vector<double> times, increments;
  double S0 = 0.0;
  for (std::size_t g = 0; g + 1 < s.group_start.size(); ++g) {
    int d = 0;
    for (auto k = s.group_start[g]; k < s.group_start[g + 1]; ++k) {
      S0 += std::exp(eta[static_cast<Eigen::Index>(k)]);
      d += s.event[k];
    }
    if (d) {
      times.push_back(s.time[s.group_start[g]]);
      increments.push_back(d / S0);
    }
  }
  std::reverse(times.begin(), times.end());
  std::reverse(increments.begin(), increments.end());
  fit.cumhaz_centered.time = times;
  fit.cumhaz_centered.value.resize(increments.size());
  std::partial_sum(increments.begin(), increments.end(), fit.cumhaz_centered.value.begin());
  return fit;
}

StepFunction baseline_cumhaz(const CoxFit& fit) {
  if (!fit.converged) throw EstimationError("baseline_cumhaz: fit did not converge");
  StepFunction f = fit.cumhaz_centered;
  const double scale = fit.beta.size() ? std::exp(-fit.center.dot(fit.beta)) : 1.0;
  for (auto& v : f.value) v *= scale;
  return f;
}

SurvivalCurve predict_survival(const CoxFit& fit, const Eigen::RowVectorXd& x,
                               std::span<const double> grid) {
  if (x.size() != fit.beta.size()) throw DataError("predict_survival: covariate row has wrong length");
  const double hr = std::exp(fit.linear_predictor(x));
  std::vector<double> g;
  if (grid.empty()) {
    g.push_back(0.0);
    g.insert(g.end(), fit.cumhaz_centered.time.begin(), fit.cumhaz_centered.time.end());
  } else {
    g.assign(grid.begin(), grid.end());
  }
  SurvivalCurve c;
  c.time = g;
  c.surv.resize(g.size());
  for (std::size_t k = 0; k < g.size(); ++k) c.surv[k] = std::exp(-fit.cumhaz_centered(g[k]) * hr);
  c.lo = c.hi = c.surv;
  c.at_risk.assign(g.size(), std::numeric_limits<double>::quiet_NaN());
  c.events.assign(g.size(), 0.0);
  c.greenwood.assign(g.size(), 0.0);
  c.last_time = fit.last_time;
  return c;
}

CoxModel fit_cox(std::span<const SubjectRecord> records, const CovariateSpec& spec,
                 const CoxOptions& opts, std::span<const SubjectRecord> levels_from) {
  CoxModel m;
  m.encoder = DesignEncoder::fit(levels_from.empty() ? records : levels_from, spec);
  const Eigen::MatrixXd X = m.encoder.encode(records);
  if (opts.check_rank) check_full_rank(X, m.encoder.names());
  std::vector<double> t(records.size());
  std::vector<int> d(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    t[i] = records[i].t_days;
    d[i] = records[i].event ? 1 : 0;
  }
  CoxOptions o = opts;
  o.check_rank = false;
  m.fit = fit_cox(X, t, d, o);
  m.fit.names = m.encoder.names();
  return m;
}

SurvivalCurve predict_survival(const CoxModel& model, const SubjectRecord& r,
                               std::span<const double> grid) {
  return predict_survival(model.fit, model.encoder.encode(r), grid);
}

void require_converged(const CoxFit& fit, const std::string& what) {
  if (fit.monotone)
    throw EstimationError(what + ": monotone likelihood, coefficients are not identifiable");
  if (!fit.converged) throw EstimationError(what + ": Cox fit did not converge");
}

namespace {

json vec(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd to_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

json to_json(const CoxFit& fit) {
  json cov = json::array();
  for (Eigen::Index i = 0; i < fit.cov.rows(); ++i) cov.push_back(vec(fit.cov.row(i).transpose()));
  json se = json::array();
  for (Eigen::Index i = 0; i < fit.beta.size(); ++i) se.push_back(fit.se(i));
  return {{"arm", fit.arm},
          {"names", fit.names},
          {"beta", vec(fit.beta)},
          {"se", se},
          {"center", vec(fit.center)},
          {"cov", cov},
          {"loglik", fit.loglik},
          {"loglik_null", fit.loglik_null},
          {"iterations", fit.iterations},
          {"converged", fit.converged},
          {"monotone", fit.monotone},
          {"grad_norm", fit.grad_norm},
          {"trace", fit.trace},
          {"ties", fit.ties == Ties::efron ? "efron" : "breslow"},
          {"last_time", fit.last_time},
          {"baseline", {{"time", fit.cumhaz_centered.time}, {"cumhaz_centered", fit.cumhaz_centered.value}}}};
}

CoxFit cox_fit_from_json(const json& j) {
  CoxFit f;
  f.arm = j.value("arm", std::string{});
  f.names = j.at("names").get<std::vector<std::string>>();
  f.beta = to_vec(j.at("beta"));
  f.center = to_vec(j.at("center"));
  const auto& cov = j.at("cov");
  f.cov.resize(static_cast<Eigen::Index>(cov.size()), static_cast<Eigen::Index>(cov.size()));
  for (std::size_t i = 0; i < cov.size(); ++i) f.cov.row(static_cast<Eigen::Index>(i)) = to_vec(cov[i]).transpose();
  f.loglik = j.at("loglik").get<double>();
  f.loglik_null = j.at("loglik_null").get<double>();
  f.iterations = j.at("iterations").get<int>();
  f.converged = j.at("converged").get<bool>();
  f.monotone = j.at("monotone").get<bool>();
  f.grad_norm = j.at("grad_norm").get<double>();
  f.trace = j.at("trace").get<std::vector<double>>();
  f.ties = j.at("ties").get<std::string>() == "breslow" ? Ties::breslow : Ties::efron;
  f.last_time = j.at("last_time").get<double>();
  f.cumhaz_centered.time = j.at("baseline").at("time").get<std::vector<double>>();
  f.cumhaz_centered.value = j.at("baseline").at("cumhaz_centered").get<std::vector<double>>();
  return f;
}

json to_json(const CoxModel& m) { return {{"encoder", m.encoder.to_json()}, {"fit", to_json(m.fit)}}; }

CoxModel cox_model_from_json(const json& j) {
  return {DesignEncoder::from_json(j.at("encoder")), cox_fit_from_json(j.at("fit"))};
}

}  // namespace regsurv
