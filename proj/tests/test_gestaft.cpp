#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gen.hpp"
#include "regsurv/gestaft.hpp"
#include "regsurv/simlab.hpp"

using namespace regsurv;

namespace {

Cohort sample(const char* name, std::size_t n, std::uint64_t seed) {
  auto c = preset(name);
  c.n = n;
  return simulate_registry(c, seed, false).records;
}

GestOptions age_sex() {
  GestOptions o;
  o.spec = CovariateSpec::parse("age + sex");
  return o;
}

}  // namespace

TEST_CASE("transform time") {
  auto r = gen::record("a", false, 3000, true, 730);
  auto t = transform_time(r, 0, 0);
  CHECK(t.time == 3000);
  CHECK(t.event == 1);

  auto w = gen::record("b", false, 730, true);
  CHECK(transform_time(w, -std::log(2.0), 0).time == doctest::Approx(1460));

  // 2y on dialysis at 5.6 and 4y after the switch at 0.7
  auto y = gen::record("c", false, static_cast<int>(6 * 365), true, 2 * 365);
  auto ty = transform_time(y, -std::log(5.6), -std::log(0.7));
  CHECK(ty.time / 365 == doctest::Approx(14.0));

  auto pkt = gen::record("p", true, 1000, true);
  CHECK(transform_time(pkt, -1.0, -0.5).time == 1000);

  auto cap = transform_time(w, -std::log(2.0), 0, 2.0);
  CHECK(cap.time == doctest::Approx(2 * kDaysPerYear));
  CHECK(cap.event == 0);
  auto under = transform_time(w, -std::log(2.0), 0, 10.0);
  CHECK(under.time == doctest::Approx(1460));
  CHECK(under.event == 1);
}

TEST_CASE("transform time is monotone in each component") {
  auto rng = make_rng(3);
  for (int i = 0; i < 5000; ++i) {
    const double pw = -3 + 4 * uniform01(rng), pr = -3 + 4 * uniform01(rng);
    const int tw = gen::uniform_int(rng, 1, 5000), tr = gen::uniform_int(rng, 0, 5000);
    auto r = gen::record("x", false, tw + tr, true, tr ? std::optional<int>(tw) : std::nullopt);
    const double base = transform_time(r, pw, pr).time;
    auto longer_w = r;
    longer_w.t_days += 10;
    if (longer_w.t_switch_days) *longer_w.t_switch_days += 10;
    REQUIRE(transform_time(longer_w, pw, pr).time > base);
    auto longer_r = r;
    longer_r.t_days += 10;
    if (!longer_r.t_switch_days) longer_r.t_switch_days = longer_r.t_days - 10;
    REQUIRE(transform_time(longer_r, pw, pr).time > base);
  }
}

TEST_CASE("options") {
  GestOptions o;
  CHECK_NOTHROW(o.validate());
  auto back = gest_options_from_json(to_json(o));
  CHECK(to_json(back) == to_json(o));
  o.lower = 2;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  o = {};
  o.spec = CovariateSpec::parse("age + pkt");
  CHECK_THROWS_AS(o.validate(), ConfigError);
}

TEST_CASE("estimating statistic sign") {
  auto c = sample("aft_effect", 20000, 2);
  auto v = estimating_statistic(c, 0.0, age_sex());
  REQUIRE(v.available);
  // PKT subjects live longer at psi = 0
  CHECK(v.z[0] < -5);

  auto n = sample("null_effect", 5000, 3);
  auto rng = make_rng(4);
  for (auto& r : n) {
    r.pkt = gen::coin(rng, 0.3);
    if (r.pkt) r.t_switch_days.reset();
  }
  auto z = estimating_statistic(n, 0.0, age_sex());
  CHECK(std::abs(z.z[0]) < kZ975);
}

TEST_CASE("solve psi on aft effect") {
  auto c = sample("aft_effect", 20000, 5);
  auto e = solve_psi(c, age_sex());
  CHECK(e.converged);
  CHECK_FALSE(e.ambiguous);
  CHECK(std::exp(-e.psi_w) > 1.85);
  CHECK(std::exp(-e.psi_w) < 2.15);
  CHECK(e.ci_w[0] <= -std::log(2.0));
  CHECK(e.ci_w[1] >= -std::log(2.0));
  CHECK(e.max_abs_z < 0.01);
  CHECK(e.report().rfind("exp(−ψ̂)=", 0) == 0);
  CHECK_FALSE(e.trace.empty());

  SUBCASE("times scaled by a constant") {
    auto scaled = c;
    for (auto& r : scaled) {
      r.t_days *= 3;
      if (r.t_switch_days) *r.t_switch_days *= 3;
    }
    CHECK(std::abs(solve_psi(scaled, age_sex()).psi_w - e.psi_w) < 1e-3);
  }

  SUBCASE("bracket without a root") {
    auto o = age_sex();
    o.lower = 0.5;
    o.upper = 1.0;
    CHECK_THROWS_WITH_AS(solve_psi(c, o), doctest::Contains("no sign change"), EstimationError);
  }

  SUBCASE("recensoring beyond all follow-up changes nothing") {
    auto o = age_sex();
    o.recensor_years = 200;
    auto r = solve_psi(c, o);
    CHECK(r.psi_w == e.psi_w);
    CHECK(r.events_retained == e.events_retained);
  }
}

TEST_CASE("report formats") {
  AftEstimate e;
  e.psi_w = -std::log(4.8);
  e.ci_w = {-std::log(5.8), -std::log(3.9)};
  CHECK(e.report() == "exp(−ψ̂)=4.8 (95% CI 3.9, 5.8)");
  e.parameters = 2;
  e.psi_w = -std::log(5.6);
  e.ci_w = {-std::log(6.6), -std::log(5.1)};
  e.psi_r = -std::log(0.7);
  e.ci_r = {-std::log(0.9), -std::log(0.5)};
  CHECK(e.report() == "exp(−ψ̂_w)=5.6 (5.1,6.6), exp(−ψ̂_r)=0.7 (0.5,0.9)");
}

TEST_CASE("two-parameter model") {
  auto c = sample("aft_effect", 20000, 6);
  auto e = solve_psi_two(c, age_sex());
  CHECK(e.converged);
  CHECK(e.max_abs_z < 0.05);
  CHECK(std::exp(-e.psi_w) > 1.8);
  CHECK(std::exp(-e.psi_w) < 2.2);
  CHECK(std::exp(-e.psi_r) > 0.9);
  CHECK(std::exp(-e.psi_r) < 1.1);
  std::ostringstream out;
  write_trace_csv(out, e);
  CHECK(out.str().rfind("psi_w,psi_r,available,beta,se,z,beta_female", 0) == 0);
}

TEST_CASE("two-parameter statistic at psi_r = 0 matches the one-parameter root") {
  // With no switches the post-switch parameter has nothing to act on.
  auto c = sample("aft_effect", 20000, 8);
  for (auto& r : c) r.t_switch_days.reset();
  auto one = solve_psi(c, age_sex());
  GestProblem p(c, age_sex(), 1);
  auto v = p.evaluate(one.psi_w, 0.0);
  CHECK(std::abs(v.z[0]) < 0.01);
  auto w = p.evaluate(one.psi_w, -1.0);
  CHECK(w.z[0] == v.z[0]);
}

TEST_CASE("recensoring sweep") {
  auto c = sample("aft_effect", 20000, 9);
  auto rows = recensoring_sweep(c, age_sex());
  REQUIRE(rows.size() == 5);
  CHECK_FALSE(rows[0].cutoff_years.has_value());
  const double truth = -std::log(2.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].estimate.has_value());
    CHECK(rows[i].estimate->ci_w[0] <= truth);
    CHECK(rows[i].estimate->ci_w[1] >= truth);
    if (i) CHECK(rows[i].events <= rows[i - 1].events);
  }
  const double width = rows[0].estimate->ci_w[1] - rows[0].estimate->ci_w[0];
  for (const auto& r : rows) CHECK(std::abs(r.estimate->psi_w - rows[0].estimate->psi_w) < width);

  std::vector<double> tiny = {0.01};
  auto flagged = recensoring_sweep(c, age_sex(), tiny);
  CHECK(flagged[1].too_few_events);
  CHECK(flagged[1].status != "ok");
}
