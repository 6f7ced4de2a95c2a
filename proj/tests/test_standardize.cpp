#include <cmath>

#include "doctest.h"
#include "gen.hpp"
#include "regsurv/simlab.hpp"
#include "regsurv/standardize.hpp"

using namespace regsurv;

namespace {

Cohort sample(const char* name, std::size_t n, std::uint64_t seed) {
  auto c = preset(name);
  c.n = n;
  return simulate_registry(c, seed, false).records;
}

const CovariateSpec kSpec = CovariateSpec::parse("age + sex + year + diabetes");

}  // namespace

TEST_CASE("one-row population equals the covariate-specific curve") {
  auto c = sample("calendar_trend", 3000, 1);
  auto arms = fit_arm_models(c, kSpec);
  std::vector<SubjectRecord> one = {c[10]};
  auto curve = predict_survival(arms.pkt, c[10]);
  auto s = standardized_survival(arms.pkt, one, curve.time);
  for (std::size_t k = 0; k < s.size(); ++k) CHECK(s[k] == doctest::Approx(curve.surv[k]).epsilon(1e-12));
}

TEST_CASE("standardization is linear in the population") {
  auto c = sample("calendar_trend", 3000, 2);
  auto arms = fit_arm_models(c, kSpec);
  Cohort a(c.begin(), c.begin() + 700), b(c.begin() + 700, c.begin() + 1000), all(c.begin(), c.begin() + 1000);
  std::vector<double> grid = {0, 365, 1800, 3650, 5000};
  auto sa = standardized_survival(arms.dialysis, a, grid);
  auto sb = standardized_survival(arms.dialysis, b, grid);
  auto sall = standardized_survival(arms.dialysis, all, grid);
  for (std::size_t k = 0; k < grid.size(); ++k) CHECK(std::abs(sall[k] - (0.7 * sa[k] + 0.3 * sb[k])) < 1e-12);
}

TEST_CASE("two-row population averages its rows") {
  auto c = sample("calendar_trend", 2000, 3);
  auto arms = fit_arm_models(c, kSpec);
  const double t = 5 * kDaysPerYear;
  std::vector<double> grid = {t};
  std::vector<SubjectRecord> p = {c[0], c[1]};
  const double s0 = standardized_survival(arms.pkt, std::span(p).first(1), grid)[0];
  const double s1 = standardized_survival(arms.pkt, std::span(p).last(1), grid)[0];
  CHECK(standardized_survival(arms.pkt, p, grid)[0] == doctest::Approx((s0 + s1) / 2).epsilon(1e-12));
}

TEST_CASE("contrast invariants") {
  auto c = sample("calendar_trend", 4000, 4);
  auto arms = fit_arm_models(c, kSpec);
  std::map<Estimand, StandardizedContrast> by;
  for (auto e : {Estimand::ate, Estimand::att, Estimand::atnt}) {
    auto pop = population_rows(c, e);
    by[e] = standardized_curves(arms.pkt, arms.dialysis, pop, to_string(e));
    const auto& s = by[e];
    CHECK(s.time.front() == 0.0);
    for (std::size_t k = 0; k < s.time.size(); ++k) {
      REQUIRE(s.diff[k] == s.s1[k] - s.s0[k]);
      REQUIRE(s.s1[k] >= 0.0);
      REQUIRE(s.s1[k] <= 1.0);
      if (k) {
        REQUIRE(s.s1[k] <= s.s1[k - 1]);
        REQUIRE(s.s0[k] <= s.s0[k - 1]);
      }
    }
  }
  const auto &ate = by[Estimand::ate], &att = by[Estimand::att], &atnt = by[Estimand::atnt];
  for (std::size_t k = 0; k < ate.time.size(); ++k) {
    for (auto m : {&StandardizedContrast::s1, &StandardizedContrast::s0}) {
      const double a = (ate.*m)[k], t = (att.*m)[k], n = (atnt.*m)[k];
      REQUIRE(a >= std::min(t, n) - 1e-12);
      REQUIRE(a <= std::max(t, n) + 1e-12);
    }
  }
}

TEST_CASE("identical fits give zero differences") {
  auto c = sample("calendar_trend", 2000, 5);
  auto m = fit_cox(c, kSpec);
  auto s = standardized_curves(m, m, c, "ATE");
  for (double d : s.diff) CHECK(d == 0.0);
  auto rows = risk_difference_table(s, default_horizons());
  for (const auto& r : rows)
    if (!r.extrapolated) CHECK(r.diff == 0.0);
}

TEST_CASE("risk difference rows") {
  RiskDifferenceRow r;
  r.label = population_label("ATE");
  r.horizon_years = 5;
  r.s1 = 0.78;
  r.s0 = 0.55;
  r.diff = 0.23;
  r.ci = HorizonBounds{{0.72, 0.86}, {0.54, 0.56}, {0.17, 0.31}};
  CHECK(r.format() == "RRT, 5y: 0.78 (0.72,0.86) | 0.55 (0.54,0.56) | 0.23 (0.17,0.31)");
  CHECK(population_label("ATT") == "PKT");
  CHECK(population_label("ATNT") == "Dialysis first");

  StandardizedContrast s;
  s.population = "ATE";
  s.time = {0, 100, 400};
  s.s1 = {1, 0.9, 0.8};
  s.s0 = {1, 0.7, 0.6};
  s.diff = {0, 0.2, 0.2};
  s.max_time = 500;
  std::vector<double> h = {300 / kDaysPerYear, 2};
  auto rows = risk_difference_table(s, h);
  CHECK(rows[0].s1 == 0.9);  // latest time at or before the horizon
  CHECK_FALSE(rows[0].extrapolated);
  CHECK(rows[1].extrapolated);
  CHECK(rows[1].format().find("beyond follow-up") != std::string::npos);
}

TEST_CASE("null effect gives overlapping standardized curves") {
  auto c = sample("null_effect", 20000, 6);
  auto arms = fit_arm_models(c, CovariateSpec::parse("age + sex"));
  auto s = standardized_curves(arms.pkt, arms.dialysis, c, "ATE");
  for (std::size_t k = 0; k < s.time.size(); ++k)
    if (s.time[k] <= 15 * kDaysPerYear) REQUIRE(std::abs(s.diff[k]) < 0.02);
}

TEST_CASE("aft effect gives a positive 5y difference with an interval above zero") {
  auto c = sample("aft_effect", 20000, 7);
  const std::vector<double> h = {5};
  auto stat = standardize_statistic(CovariateSpec::parse("age + sex"), h, {Estimand::ate});
  auto b = bootstrap(stat, c, 30, 1);
  REQUIRE(b.point.size() == 3);
  CHECK(b.point[2] > 0.0);
  CHECK(b.lo[2] > 0.0);
}

TEST_CASE("profiles") {
  auto c = sample("calendar_trend", 6000, 8);
  Cohort pkt;
  for (const auto& r : c)
    if (r.pkt) pkt.push_back(r);
  auto a = fit_cox(pkt, CovariateSpec::parse("age + sex + year"));
  auto b = fit_cox(pkt, CovariateSpec::parse("age + sex + year + diabetes"));

  SUBCASE("same model twice") {
    auto p = profile_curves(a, a, pkt);
    CHECK(p.score_a == p.score_b);
    CHECK(p.curve_a == p.curve_b);
    CHECK(p.id_a == p.id_b);
  }

  SUBCASE("percentile range") {
    std::vector<double> bad = {0};
    CHECK_THROWS_AS(profile_curves(a, b, pkt, bad), ConfigError);
  }
}

TEST_CASE("leaving out a strong comorbidity moves the profiles but not the average") {
  auto cfg = preset("calendar_trend");
  cfg.comorbidity[0] = {0.0, 0.04, 0.0, 1.5, -0.8};
  auto sim = simulate_registry(cfg, 8, false);
  Cohort pkt;
  for (const auto& r : sim.records)
    if (r.pkt) pkt.push_back(r);
  auto a = fit_cox(pkt, CovariateSpec::parse("age + sex + year"));
  auto b = fit_cox(pkt, CovariateSpec::parse("age + sex + year + diabetes"));
  auto p = profile_curves(a, b, pkt);
  // Largest signed gap A - B over time for one percentile.
  auto gap = [&](std::size_t j) {
    double g = 0;
    for (std::size_t k = 0; k < p.time.size(); ++k) {
      const double d = p.curve_a[j][k] - p.curve_b[j][k];
      if (std::abs(d) > std::abs(g)) g = d;
    }
    return g;
  };
  REQUIRE(p.percentiles[0] == 5);
  REQUIRE(p.percentiles[4] == 95);
  // The reduced model has less spread: it is too pessimistic for low-risk
  // profiles and too optimistic for high-risk ones.
  CHECK(gap(0) < -0.05);
  CHECK(gap(4) > 0.05);
  double sup = 0;
  for (std::size_t k = 0; k < p.time.size(); ++k)
    sup = std::max(sup, std::abs(p.standardized_a[k] - p.standardized_b[k]));
  CHECK(sup < 0.02);
  for (std::size_t i = 0; i < p.ids.size(); ++i) REQUIRE(std::isfinite(p.score_a[i] + p.score_b[i]));
}
