#include <cmath>

#include "doctest.h"
#include "gen.hpp"
#include "regsurv/coxmod.hpp"
#include "regsurv/simlab.hpp"

using namespace regsurv;

namespace {

// A(x=1,t=1), B(x=0,t=2), C(x=1,t=3), D(x=0,t=4), all events.
struct Four {
  Eigen::MatrixXd X{{1.0}, {0.0}, {1.0}, {0.0}};
  std::vector<double> t{1, 2, 3, 4};
  std::vector<int> e{1, 1, 1, 1};
};

double four_loglik(double b) {
  const double eb = std::exp(b);
  return b - std::log(2 * eb + 2) - std::log(eb + 2) + b - std::log(eb + 1);
}

struct Sample {
  Eigen::MatrixXd X;
  std::vector<double> t;
  std::vector<int> e;
};

// Exponential times with hazard exp(x'beta), uniform censoring, no ties.
Sample ph_sample(Rng& rng, int n, const Eigen::VectorXd& beta) {
  Sample s;
  s.X.resize(n, beta.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < beta.size(); ++j) s.X(i, j) = j == 0 ? gen::coin(rng) : standard_normal(rng);
    const double rate = 0.1 * std::exp(s.X.row(i).dot(beta));
    const double ti = -std::log(uniform01(rng)) / rate;
    const double ci = 20 * uniform01(rng);
    s.t.push_back(std::min(ti, ci));
    s.e.push_back(ti <= ci);
  }
  return s;
}

}  // namespace

TEST_CASE("four-subject partial likelihood") {
  Four f;
  auto fit = fit_cox(f.X, f.t, f.e);
  REQUIRE(fit.converged);
  CHECK(fit.loglik == doctest::Approx(four_loglik(fit.beta[0])).epsilon(1e-12));
  CHECK(cox_loglik(f.X, f.t, f.e, fit.beta) == doctest::Approx(fit.loglik));
  // Grid maximization at 1e-6 spacing around the estimate.
  double best = 0, best_ll = -1e300;
  for (int k = -200000; k <= 200000; ++k) {
    const double b = fit.beta[0] + k * 1e-6;
    const double ll = four_loglik(b);
    if (ll > best_ll) {
      best_ll = ll;
      best = b;
    }
  }
  CHECK(std::abs(best - fit.beta[0]) <= 1e-6);

  // Breslow increments 1 / sum of exp(b x) over the risk set.
  const double eb = std::exp(fit.beta[0]);
  const double inc[] = {1 / (2 * eb + 2), 1 / (eb + 2), 1 / (eb + 1), 1.0};
  auto base = baseline_cumhaz(fit);
  double cum = 0;
  for (int k = 0; k < 4; ++k) {
    cum += inc[k];
    CHECK(std::abs(base(k + 1.0) - cum) < 1e-10);
  }
  CHECK(base(0.5) == 0.0);
}

TEST_CASE("mirrored design gives zero coefficient") {
  Eigen::MatrixXd X{{1.0}, {0.0}, {1.0}, {0.0}};
  std::vector<double> t = {1, 1, 2, 2};
  std::vector<int> e = {1, 1, 1, 0 + 1};
  auto fit = fit_cox(X, t, e);
  CHECK(std::abs(fit.beta[0]) < 1e-10);
}

TEST_CASE("null model baseline is nelson-aalen") {
  auto rng = make_rng(1);
  auto t = gen::times(rng, 30);
  auto e = gen::events(rng, 30);
  Eigen::MatrixXd X(30, 0);
  auto fit = fit_cox(X, t, e, {.ties = Ties::breslow});
  auto base = baseline_cumhaz(fit);
  double na = 0;
  for (int day = 1; day <= 20; ++day) {
    double at_risk = 0, d = 0;
    for (int i = 0; i < 30; ++i) {
      at_risk += t[i] >= day;
      d += t[i] == day && e[i];
    }
    if (d > 0) na += d / at_risk;
    CHECK(std::abs(base(day) - na) < 1e-12);
  }
}

TEST_CASE("efron and breslow agree without ties") {
  auto rng = make_rng(2);
  Eigen::VectorXd beta(3);
  beta << 0.7, -0.3, 0.2;
  auto s = ph_sample(rng, 300, beta);
  auto a = fit_cox(s.X, s.t, s.e, {.ties = Ties::efron});
  auto b = fit_cox(s.X, s.t, s.e, {.ties = Ties::breslow});
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(a.loglik - b.loglik) < 1e-12);
}

TEST_CASE("fit is a local maximum with small gradient and psd covariance") {
  auto rng = make_rng(3);
  Eigen::VectorXd beta(3);
  beta << 0.5, 0.4, -0.6;
  for (auto ties : {Ties::efron, Ties::breslow}) {
    auto s = ph_sample(rng, 200, beta);
    for (auto& x : s.t) x = std::ceil(x);  // ties
    auto fit = fit_cox(s.X, s.t, s.e, {.ties = ties});
    REQUIRE(fit.converged);
    CHECK(fit.grad_norm < 1e-8);
    CHECK((fit.cov - fit.cov.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.cov);
    CHECK(es.eigenvalues().minCoeff() >= 0.0);
    const double at = cox_loglik(s.X, s.t, s.e, fit.beta, ties);
    for (int k = 0; k < 100; ++k) {
      Eigen::VectorXd b = fit.beta;
      for (int j = 0; j < b.size(); ++j) b[j] += 0.1 * standard_normal(rng);
      REQUIRE(cox_loglik(s.X, s.t, s.e, b, ties) <= at);
    }
  }
}

TEST_CASE("errors and flags") {
  Eigen::MatrixXd X{{1.0, 2.0}, {0.0, 0.0}, {1.0, 2.0}};
  std::vector<double> t = {1, 2, 3};
  std::vector<int> e = {1, 1, 0};
  CHECK_THROWS_AS(fit_cox(X, t, e), EstimationError);  // aliased columns
  std::vector<int> none = {0, 0, 0};
  CHECK_THROWS_AS(fit_cox(X.leftCols(1), t, none), EstimationError);
  // Every event in the x=1 group: monotone likelihood.
  Eigen::MatrixXd Y{{1.0}, {1.0}, {0.0}, {0.0}};
  std::vector<double> t2 = {1, 2, 3, 4};
  std::vector<int> e2 = {1, 1, 0, 0};
  auto fit = fit_cox(Y, t2, e2);
  CHECK(fit.monotone);
  CHECK_THROWS_AS(require_converged(fit, "test"), EstimationError);
}

TEST_CASE("predict survival") {
  auto rng = make_rng(4);
  Eigen::VectorXd beta(2);
  beta << 0.8, 0.3;
  auto s = ph_sample(rng, 400, beta);
  auto fit = fit_cox(s.X, s.t, s.e);
  auto base = baseline_cumhaz(fit);

  Eigen::RowVectorXd zero = Eigen::RowVectorXd::Zero(2);
  auto s0 = predict_survival(fit, zero);
  for (std::size_t k = 0; k < s0.time.size(); ++k) {
    CHECK(s0.surv[k] == doctest::Approx(std::exp(-base(s0.time[k]))).epsilon(1e-12));
    if (k) CHECK(s0.surv[k] <= s0.surv[k - 1]);
  }

  // Shifting the linear predictor by ln 2 squares S(t).
  Eigen::RowVectorXd x(2);
  x << 0.3, -0.2;
  Eigen::RowVectorXd x2 = x;
  x2[1] += std::log(2.0) / fit.beta[1];
  auto a = predict_survival(fit, x);
  auto b = predict_survival(fit, x2);
  for (std::size_t k = 0; k < a.surv.size(); ++k) CHECK(b.surv[k] == doctest::Approx(a.surv[k] * a.surv[k]).epsilon(1e-10));
}

TEST_CASE("prediction does not depend on covariate offsets") {
  auto rng = make_rng(5);
  Eigen::VectorXd beta(2);
  beta << 0.5, -0.4;
  auto s = ph_sample(rng, 300, beta);
  Eigen::MatrixXd shifted = s.X;
  shifted.col(1).array() += 40.0;
  auto a = fit_cox(s.X, s.t, s.e);
  auto b = fit_cox(shifted, s.t, s.e);
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-8);
  Eigen::RowVectorXd x(2);
  x << 1.0, 0.7;
  Eigen::RowVectorXd xs = x;
  xs[1] += 40.0;
  auto pa = predict_survival(a, x);
  auto pb = predict_survival(b, xs);
  for (std::size_t k = 0; k < pa.surv.size(); ++k) CHECK(std::abs(pa.surv[k] - pb.surv[k]) < 1e-8);
}

TEST_CASE("exponential null baseline") {
  auto c = preset("null_effect");
  c.administrative_censoring = false;
  auto sim = simulate_registry(c, 6, false);
  std::vector<double> t;
  std::vector<int> e;
  for (const auto& r : sim.records) {
    t.push_back(r.t_days);
    e.push_back(r.event);
  }
  auto fit = fit_cox(Eigen::MatrixXd(t.size(), 0), t, e);
  auto base = baseline_cumhaz(fit);
  double worst = 0;
  for (std::size_t k = 0; k < base.time.size(); ++k) {
    const double y = base.time[k] / kDaysPerYear;
    if (y > 10) break;
    worst = std::max(worst, std::abs(base.value[k] - 0.1 * y));
  }
  CHECK(worst < 0.02);
}

TEST_CASE("model json round trip") {
  auto c = preset("calendar_trend");
  c.n = 1500;
  auto sim = simulate_registry(c, 7, false);
  auto m = fit_cox(sim.records, CovariateSpec::parse("age + sex + year + pkd"));
  auto back = cox_model_from_json(to_json(m));
  CHECK(back.fit.beta.isApprox(m.fit.beta));
  auto a = predict_survival(m, sim.records[3]);
  auto b = predict_survival(back, sim.records[3]);
  CHECK(a.surv == b.surv);
  auto r = sim.records[0];
  r.pkd = "unseen";
  CHECK_THROWS(predict_survival(m, r));
}
