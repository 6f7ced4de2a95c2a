#include <sstream>

#include "doctest.h"
#include "regsurv/nonparam.hpp"
#include "regsurv/registry.hpp"
#include "regsurv/simlab.hpp"
#include "regsurv/weighting.hpp"

using namespace regsurv;

TEST_CASE("presets") {
  for (const auto& name : preset_names()) CHECK_NOTHROW(preset(name).validate());
  CHECK_THROWS_AS(preset("nope"), ConfigError);
  auto n = preset("null_effect");
  CHECK(n.psi_w == 0.0);
  CHECK(n.psi_r == 0.0);
  auto a = preset("aft_effect");
  CHECK(std::exp(-a.psi_w) == doctest::Approx(2.0));
  CHECK(a.psi_r == 0.0);
  auto i = preset("immortal_time");
  CHECK(i.switch_rate_male == 0.3);
  CHECK(i.psi_w == 0.0);
  auto c = preset("calendar_trend");
  CHECK(std::exp(c.hr_year) == doctest::Approx(0.97).epsilon(0.001));
  CHECK(c.ps_year != 0.0);
}

TEST_CASE("config json round trip and validation") {
  auto c = preset("paper_calibration");
  auto back = sim_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(sim_config_from_json(json{{"bogus", 1}}), ConfigError);
  auto bad = c;
  bad.hazard_rates = {0.0, 0.1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.entry_end = bad.entry_start;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.female_prob = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("same config and seed give byte-identical output") {
  auto c = preset("calendar_trend");
  c.n = 2000;
  std::ostringstream a, b, d;
  write_registry(a, simulate_registry(c, 4, false).records);
  write_registry(b, simulate_registry(c, 4, false).records);
  write_registry(d, simulate_registry(c, 5, false).records);
  CHECK(a.str() == b.str());
  CHECK(a.str() != d.str());
}

TEST_CASE("generated records satisfy the record invariants") {
  for (const auto& name : preset_names()) {
    auto c = preset(name);
    c.n = 20000;
    auto sim = simulate_registry(c, 12, false);
    CHECK(sim.records.size() == c.n);
    for (const auto& r : sim.records) REQUIRE_FALSE(check_invariants(r));
  }
}

TEST_CASE("arm quota") {
  auto c = preset("null_effect");
  c.arm_quota = {300, 100};
  auto sim = simulate_registry(c, 1, false);
  std::size_t pkt = 0;
  for (const auto& r : sim.records) pkt += r.pkt;
  CHECK(pkt == 100);
  CHECK(sim.records.size() == 400);
}

TEST_CASE("truth curves start at one and never increase") {
  auto c = preset("calendar_trend");
  c.n = 100;
  c.truth_n = 20000;
  auto truth = simulate_registry(c, 2, true).truth;
  for (const auto* tc : {&truth.ate, &truth.att, &truth.atnt})
    for (const auto* s : {&tc->s1, &tc->s0}) {
      REQUIRE(s->size() == truth.time_years.size());
      CHECK(s->front() == doctest::Approx(1.0));
      for (std::size_t k = 1; k < s->size(); ++k) REQUIRE((*s)[k] <= (*s)[k - 1]);
    }
}

TEST_CASE("null preset arms have matching km") {
  auto c = preset("null_effect");
  auto sim = simulate_registry(c, 3, false);
  auto arms = arm_km(sim.records);
  for (double y : {1.0, 3.0, 5.0, 8.0}) {
    const double t = y * kDaysPerYear;
    const double se = std::hypot(arms.pkt.se(t), arms.dialysis.se(t));
    CHECK(std::abs(arms.pkt(t) - arms.dialysis(t)) < 3 * se);
  }
}

TEST_CASE("flat propensity when treatment ignores covariates") {
  auto c = preset("null_effect");
  c.n = 2000;
  int covered = 0;
  for (int rep = 0; rep < 100; ++rep) {
    auto sim = simulate_registry(c, 100 + rep, false);
    auto ps = fit_propensity(sim.records, CovariateSpec::parse("age"));
    const double b = ps.fit.beta[1], se = ps.fit.se(1);
    covered += std::abs(b) <= kZ975 * se;
  }
  CHECK(covered >= 93);
}

TEST_CASE("paper calibration margins") {
  auto c = preset("paper_calibration");
  auto sim = simulate_registry(c, c.seed, false);
  auto el = apply_eligibility(sim.records, default_criteria());
  auto f = el.table.final_counts();
  CHECK(double(f.pkt) / f.total() == doctest::Approx(0.056).epsilon(0.15));
  Cohort pkt, dial;
  for (const auto& r : el.records) (r.pkt ? pkt : dial).push_back(r);
  auto s1 = survival_summary("PKT", pkt, el.records.size(), 0);
  auto s0 = survival_summary("Dialysis", dial, el.records.size(), 0);
  CHECK(std::abs(s1.crude_rate - 0.02) < 0.005);
  CHECK(std::abs(s0.crude_rate - 0.11) < 0.005);

  // Time on initial dialysis until transplant, death or censoring.
  std::vector<double> t;
  std::vector<int> e;
  for (const auto& r : dial) {
    t.push_back(r.t_switch_days ? *r.t_switch_days : r.t_days);
    e.push_back(r.t_switch_days || r.event);
  }
  CHECK(median_time(kaplan_meier(t, e)) / kDaysPerYear == doctest::Approx(2.0).epsilon(0.25));

  std::vector<int> g;
  t.clear();
  e.clear();
  for (const auto& r : el.records) {
    g.push_back(r.pkt);
    t.push_back(r.t_days);
    e.push_back(r.event);
  }
  CHECK(log_rank(g, t, e).p < 0.001);
}
