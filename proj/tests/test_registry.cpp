#include <sstream>

#include "doctest.h"
#include "gen.hpp"
#include "regsurv/registry.hpp"
#include "regsurv/simlab.hpp"

using namespace regsurv;

namespace {

const char* kHeader =
    "id,entry_date,age,sex,region,pkd,diabetes,hypertension,ihd,pad,cvd,pkt,t_switch_days,t_days,event\n";

LoadResult load_text(const std::string& body) {
  std::istringstream in(std::string(kHeader) + body);
  return load_registry(in);
}

}  // namespace

TEST_CASE("csv row maps onto a record") {
  auto res = load_text("S1,1995-03-02,47,female,Western,GN,,,,,,1,,2800,0\n");
  REQUIRE(res.rejects.empty());
  REQUIRE(res.records.size() == 1);
  const auto& r = res.records[0];
  CHECK(r.id == "S1");
  CHECK(r.entry_date == make_date(1995, 3, 2));
  CHECK(r.age == 47);
  CHECK(r.sex == Sex::female);
  CHECK(r.region == "Western");
  CHECK(r.pkd == "GN");
  CHECK(r.pkt);
  CHECK(r.t_days == 2800);
  CHECK_FALSE(r.event);
  CHECK_FALSE(r.t_switch_days.has_value());
  for (const auto& f : r.comorbidity) CHECK_FALSE(f.has_value());
}

TEST_CASE("switch after follow-up end is rejected, other rows still load") {
  auto res = load_text(
      "A,2001-01-01,50,male,Northern,DN,0,1,0,0,0,0,900,600,1\n"
      "B,2001-01-01,50,male,Northern,DN,0,1,0,0,0,0,,600,1\n");
  REQUIRE(res.rejects.size() == 1);
  CHECK(res.rejects[0].row == 1);
  CHECK(res.rejects[0].message == "switch after follow-up end");
  REQUIRE(res.records.size() == 1);
  CHECK(res.records[0].id == "B");
}

TEST_CASE("missing required column is a data error") {
  std::istringstream in("id,age\nA,3\n");
  CHECK_THROWS_AS(load_registry(in), DataError);
}

TEST_CASE("schema renames columns") {
  auto schema = Schema::from_json(json{{"t_days", "followup"}});
  std::string header = kHeader;
  header.replace(header.find("t_days"), 6, "followup");
  std::istringstream in(header + "A,2001-01-01,50,male,Northern,DN,0,1,0,0,0,0,,600,1\n");
  auto res = load_registry(in, schema);
  REQUIRE(res.records.size() == 1);
  CHECK(res.records[0].t_days == 600);
  CHECK_THROWS_AS(Schema::from_json(json{{"nope", "x"}}), ConfigError);
}

TEST_CASE("write then load round-trips any records") {
  auto rng = make_rng(11);
  Cohort in;
  for (int i = 0; i < 500; ++i) in.push_back(gen::any_record(rng, i));
  std::stringstream buf;
  write_registry(buf, in);
  auto res = load_registry(buf);
  CHECK(res.rejects.empty());
  REQUIRE(res.records.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(res.records[i] == in[i]);
}

TEST_CASE("decompose") {
  auto d = decompose(gen::record("a", false, 3000, true, 730));
  CHECK(d.t_w == 730);
  CHECK(d.t_r == 2270);
  d = decompose(gen::record("b", true, 2800, false));
  CHECK(d.t_w == 0);
  CHECK(d.t_r == 2800);
  d = decompose(gen::record("c", false, 400, true));
  CHECK(d.t_w == 400);
  CHECK(d.t_r == 0);
  CHECK(d.on_dialysis(399));
  CHECK_FALSE(d.on_dialysis(400));
}

TEST_CASE("decompose sums to follow-up on every valid record") {
  auto rng = make_rng(3);
  for (int i = 0; i < 20000; ++i) {
    auto r = gen::any_record(rng, i);
    REQUIRE_FALSE(check_invariants(r));
    auto d = decompose(r);
    REQUIRE(d.t_w + d.t_r == r.t_days);
    if (r.pkt) REQUIRE(d.t_w == 0);
    if (!r.t_switch_days) REQUIRE((r.pkt ? d.t_w : d.t_r) == 0);
  }
}

TEST_CASE("eligibility") {
  auto old = gen::record("old", false, 100, true);
  old.age = 80;
  auto crit = default_criteria();
  CHECK(exclusion_reason(old, crit) == std::optional<std::string>("age>75"));

  SUBCASE("empty criteria is the identity") {
    Cohort c = {old, gen::record("x", true, 5, false)};
    auto res = apply_eligibility(c, {});
    CHECK(res.records == c);
    CHECK(res.table.rows.empty());
    CHECK(res.table.final_counts() == ArmCounts{1, 1});
  }

  SUBCASE("table reconciles with input and output sizes") {
    auto rng = make_rng(5);
    Cohort c;
    for (int i = 0; i < 3000; ++i) c.push_back(gen::any_record(rng, i));
    c[0].region = "Foreign";
    c[1].age = 90;
    c[1].region = "Foreign";  // counted once, under the first criterion
    auto res = apply_eligibility(c, crit);
    ArmCounts prev = res.table.initial;
    CHECK(prev.total() == c.size());
    std::size_t excluded = 0;
    for (const auto& row : res.table.rows) {
      CHECK(row.remaining.pkt == prev.pkt - row.excluded.pkt);
      CHECK(row.remaining.dialysis == prev.dialysis - row.excluded.dialysis);
      excluded += row.excluded.total();
      prev = row.remaining;
    }
    CHECK(res.table.final_counts().total() == res.records.size());
    CHECK(excluded + res.records.size() == c.size());
    for (const auto& r : res.records) CHECK_FALSE(exclusion_reason(r, crit));
  }

  SUBCASE("json criteria") {
    auto c = criterion_from_json(json{{"label", "young"}, {"field", "age"}, {"op", "<"}, {"value", 30}});
    auto r = gen::record("y", false, 1, false);
    r.age = 25;
    CHECK(c.excludes(r));
    CHECK_THROWS_AS(criterion_from_json(json{{"label", "bad"}, {"field", "nope"}, {"op", "<"}, {"value", 1}}),
                    ConfigError);
  }
}

TEST_CASE("planted over-75 fraction shows up in the exclusion table") {
  auto cfg = preset("paper_calibration");
  cfg.n = 20000;
  auto sim = simulate_registry(cfg, 9, false);
  std::size_t planted = 0, dial = 0;
  for (const auto& r : sim.records)
    if (!r.pkt) {
      ++dial;
      planted += r.age > 75;
    }
  auto res = apply_eligibility(sim.records, default_criteria());
  const auto& row = res.table.rows.front();
  CHECK(row.label == "age>75");
  const double share = double(row.excluded.dialysis) / res.table.initial.dialysis;
  CHECK(share == doctest::Approx(double(planted) / dial).epsilon(0.005));
  CHECK(share == doctest::Approx(0.251).epsilon(0.1));
}

TEST_CASE("describe") {
  SUBCASE("crude rate is deaths over person-years") {
    Cohort c;
    // 196 deaths over 9,800 person-years.
    for (int i = 0; i < 196; ++i) c.push_back(gen::record("d" + std::to_string(i), true, 0, true));
    const int days = static_cast<int>(9800 * kDaysPerYear / 196);
    for (auto& r : c) r.t_days = days;
    auto s = survival_summary("PKT", c, c.size(), 196);
    CHECK(s.crude_rate == doctest::Approx(0.02).epsilon(1e-4));
    CHECK(s.crude_rate == doctest::Approx(s.deaths / s.person_years));
  }

  SUBCASE("two identical arms give zero differences") {
    auto rng = make_rng(8);
    Cohort c;
    for (int i = 0; i < 200; ++i) {
      auto r = gen::any_record(rng, i);
      r.pkt = false;
      r.t_switch_days.reset();
      auto twin = r;
      twin.id += "t";
      twin.pkt = true;
      c.push_back(r);
      c.push_back(twin);
    }
    auto t = describe(c, {50, 1});
    for (const auto& row : t.categorical) {
      if (!row.available) continue;
      CHECK(row.diff == doctest::Approx(0.0));
      CHECK(row.lo <= 0.0);
      CHECK(row.hi >= 0.0);
    }
    for (const auto& row : t.continuous) {
      if (!row.available) continue;
      CHECK(row.diff == doctest::Approx(0.0));
      CHECK(row.lo <= 0.0);
      CHECK(row.hi >= 0.0);
    }
  }

  SUBCASE("two-proportion difference") {
    // 37.5% of 1,097 against 35.0% of 18,434.
    auto d = proportion_difference(411, 1097, 6452, 18434);
    CHECK(d.diff == doctest::Approx(411.0 / 1097 - 6452.0 / 18434));
    CHECK(d.diff == doctest::Approx(0.025).epsilon(0.05));
    CHECK((d.hi - d.lo) / 2 == doctest::Approx(0.030).epsilon(0.05));
  }

  SUBCASE("category shares within an arm sum to one") {
    auto rng = make_rng(4);
    Cohort c;
    for (int i = 0; i < 400; ++i) c.push_back(gen::any_record(rng, i));
    auto t = describe(c, {20, 1});
    std::map<std::string, std::array<double, 3>> sums;
    for (const auto& row : t.categorical)
      if (row.covariate == "region" || row.covariate == "pkd")
        for (int g = 0; g < 3; ++g) sums[row.covariate][g] += row.proportion[g];
    REQUIRE(sums.size() == 2);
    for (const auto& [k, s] : sums)
      for (double v : s) CHECK(v == doctest::Approx(1.0));
  }

  SUBCASE("all-missing covariate is flagged") {
    Cohort c = {gen::record("a", true, 10, true), gen::record("b", false, 20, true)};
    auto t = describe(c, {10, 1});
    bool found = false;
    for (const auto& row : t.continuous)
      if (row.covariate == "gfr") {
        found = true;
        CHECK_FALSE(row.available);
      }
    CHECK(found);
  }
}
