#include "regsurv/registry.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_set>
#include <variant>

namespace regsurv {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

bool parse_bit(const std::string& s, bool& out) {
  if (s == "0") { out = false; return true; }
  if (s == "1") { out = true; return true; }
  return false;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  return out + "\"";
}

std::string flag_text(const Flag& f) { return f ? (*f ? "1" : "0") : ""; }

struct RowError {
  std::string column;
  std::string message;
};

}  // namespace

// ---------------------------------------------------------------------------

std::optional<std::string> check_invariants(const SubjectRecord& r) {
  if (r.t_days < 0) return "follow-up time is negative";
  if (r.t_switch_days) {
    if (r.pkt) return "PKT subject cannot have a delayed transplant";
    if (*r.t_switch_days <= 0) return "switch time must be positive";
    if (*r.t_switch_days > r.t_days) return "switch after follow-up end";
  }
  if (!(r.age >= 0.0) || !std::isfinite(r.age)) return "age must be a nonnegative number";
  return std::nullopt;
}

Decomposition decompose(const SubjectRecord& r) {
  Decomposition d;
  d.pkt = r.pkt;
  if (r.t_switch_days) d.t_w = *r.t_switch_days;
  else d.t_w = r.pkt ? 0 : r.t_days;
  d.t_r = r.t_days - d.t_w;
  return d;
}

// ---------------------------------------------------------------------------
// Schema

const std::vector<std::string>& Schema::required_fields() {
  static const std::vector<std::string> f = {
      "id",  "entry_date", "age", "sex", "region",        "pkd",    "diabetes", "hypertension",
      "ihd", "pad",        "cvd", "pkt", "t_switch_days", "t_days", "event"};
  return f;
}

const std::vector<std::string>& Schema::optional_fields() {
  static const std::vector<std::string> f = {"gfr", "cancer", "abroad"};
  return f;
}

Schema Schema::defaults() {
  Schema s;
  for (const auto& f : required_fields()) s.columns[f] = f;
  for (const auto& f : optional_fields()) s.columns[f] = f;
  return s;
}

Schema Schema::from_json(const json& j) {
  Schema s = defaults();
  if (j.is_null()) return s;
  if (!j.is_object()) throw ConfigError("schema map must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!s.columns.contains(it.key())) throw ConfigError("unknown schema field '" + it.key() + "'");
    if (!it.value().is_string()) throw ConfigError("schema column for '" + it.key() + "' must be a string");
    s.columns[it.key()] = it.value().get<std::string>();
  }
  return s;
}

json Schema::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : columns) j[k] = v;
  return j;
}

const std::string& Schema::column(const std::string& field) const {
  auto it = columns.find(field);
  if (it == columns.end()) throw ConfigError("schema has no field '" + field + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Loading

LoadResult load_registry(std::istream& in, const Schema& schema) {
  LoadResult result;
  std::string line;
  if (!std::getline(in, line)) throw DataError("registry CSV is empty (header row required)");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index[trim(header[i])] = i;

  std::map<std::string, std::size_t> pos;
  for (const auto& f : Schema::required_fields()) {
    const auto& col = schema.column(f);
    auto it = index.find(col);
    if (it == index.end()) throw DataError("missing required column '" + col + "'");
    pos[f] = it->second;
  }
  for (const auto& f : Schema::optional_fields()) {
    auto it = index.find(schema.column(f));
    if (it != index.end()) pos[f] = it->second;
  }

  std::unordered_set<std::string> seen;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto cells = split_csv_line(line);
    auto cell = [&](const std::string& field) -> std::string {
      auto it = pos.find(field);
      if (it == pos.end() || it->second >= cells.size()) return {};
      return trim(cells[it->second]);
    };

    SubjectRecord r;
    std::optional<RowError> err;
    auto fail = [&](const std::string& field, std::string msg) {
      if (!err) err = RowError{schema.column(field), std::move(msg)};
    };

    if (cells.size() < header.size()) fail("id", "row has fewer cells than the header");
    r.id = cell("id");
    if (r.id.empty()) fail("id", "empty id");

    if (auto d = parse_date(cell("entry_date"))) r.entry_date = *d;
    else fail("entry_date", "invalid ISO-8601 date '" + cell("entry_date") + "'");

    if (!parse_number(cell("age"), r.age)) fail("age", "unparseable age '" + cell("age") + "'");

    {
      auto s = cell("sex");
      std::transform(s.begin(), s.end(), s.begin(), ::tolower);
      if (s == "female" || s == "f") r.sex = Sex::female;
      else if (s == "male" || s == "m") r.sex = Sex::male;
      else fail("sex", "sex must be female or male");
    }
    r.region = cell("region");
    if (r.region.empty()) fail("region", "empty region");
    r.pkd = cell("pkd");
    if (r.pkd.empty()) fail("pkd", "empty primary kidney disease");

    for (std::size_t k = 0; k < kComorbidityCount; ++k) {
      const std::string f = kComorbidityNames[k];
      const auto v = cell(f);
      bool b = false;
      if (v.empty()) r.comorbidity[k] = std::nullopt;
      else if (parse_bit(v, b)) r.comorbidity[k] = b;
      else fail(f, "comorbidity flag must be 0, 1 or empty");
    }

    if (pos.contains("gfr")) {
      const auto v = cell("gfr");
      double g = 0;
      if (v.empty()) r.gfr = std::nullopt;
      else if (parse_number(v, g)) r.gfr = g;
      else fail("gfr", "unparseable gfr '" + v + "'");
    }

    if (!parse_bit(cell("pkt"), r.pkt)) fail("pkt", "pkt must be 0 or 1");

    {
      const auto v = cell("t_switch_days");
      int s = 0;
      if (v.empty()) r.t_switch_days = std::nullopt;
      else if (parse_number(v, s)) r.t_switch_days = s;
      else fail("t_switch_days", "unparseable switch time '" + v + "'");
    }
    if (!parse_number(cell("t_days"), r.t_days)) fail("t_days", "unparseable follow-up '" + cell("t_days") + "'");
    if (!parse_bit(cell("event"), r.event)) fail("event", "event must be 0 or 1");

    for (const char* f : {"cancer", "abroad"}) {
      Flag& target = std::string_view(f) == "cancer" ? r.cancer : r.abroad;
      if (!pos.contains(f)) continue;
      const auto v = cell(f);
      bool b = false;
      if (v.empty()) target = std::nullopt;
      else if (parse_bit(v, b)) target = b;
      else fail(f, std::string(f) + " must be 0, 1 or empty");
    }

    if (!err) {
      if (auto why = check_invariants(r)) {
        const std::string col = r.t_switch_days ? "t_switch_days" : "t_days";
        fail(col, *why);
      }
    }
    if (!err && !seen.insert(r.id).second) fail("id", "duplicate id '" + r.id + "'");

    if (err) result.rejects.push_back({row, err->column, err->message});
    else result.records.push_back(std::move(r));
  }
  return result;
}

LoadResult load_registry_file(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open registry file '" + path + "'");
  return load_registry(in, schema);
}

void write_registry(std::ostream& out, std::span<const SubjectRecord> records,
                    const Schema& schema) {
  std::vector<std::string> fields = Schema::required_fields();
  for (const auto& f : Schema::optional_fields()) fields.push_back(f);
  for (std::size_t i = 0; i < fields.size(); ++i)
    out << (i ? "," : "") << csv_escape(schema.column(fields[i]));
  out << '\n';
  for (const auto& r : records) {
    out << csv_escape(r.id) << ',' << format_date(r.entry_date) << ',' << format_double(r.age)
        << ',' << (r.sex == Sex::female ? "female" : "male") << ',' << csv_escape(r.region) << ','
        << csv_escape(r.pkd);
    for (const auto& c : r.comorbidity) out << ',' << flag_text(c);
    out << ',' << (r.pkt ? 1 : 0) << ','
        << (r.t_switch_days ? std::to_string(*r.t_switch_days) : std::string{}) << ','
        << r.t_days << ',' << (r.event ? 1 : 0) << ','
        << (r.gfr ? format_double(*r.gfr) : std::string{}) << ',' << flag_text(r.cancer) << ','
        << flag_text(r.abroad) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Eligibility

namespace {

using FieldValue = std::variant<std::monostate, double, std::string>;

FieldValue field_value(const SubjectRecord& r, const std::string& field) {
  auto flag = [](const Flag& f) -> FieldValue {
    if (!f) return std::monostate{};
    return *f ? 1.0 : 0.0;
  };
  if (field == "age") return r.age;
  if (field == "year") return r.entry_year();
  if (field == "region") return r.region;
  if (field == "pkd") return r.pkd;
  if (field == "sex") return std::string(r.sex == Sex::female ? "female" : "male");
  if (field == "pkt") return r.pkt ? 1.0 : 0.0;
  if (field == "t_days") return static_cast<double>(r.t_days);
  if (field == "event") return r.event ? 1.0 : 0.0;
  if (field == "t_switch_days") {
    if (!r.t_switch_days) return std::monostate{};
    return static_cast<double>(*r.t_switch_days);
  }
  if (field == "gfr") {
    if (!r.gfr) return std::monostate{};
    return *r.gfr;
  }
  if (field == "cancer") return flag(r.cancer);
  if (field == "abroad") return flag(r.abroad);
  for (std::size_t k = 0; k < kComorbidityCount; ++k)
    if (field == kComorbidityNames[k]) return flag(r.comorbidity[k]);
  throw ConfigError("unknown record field '" + field + "'");
}

bool compare(const FieldValue& v, const std::string& op, const json& target) {
  if (op == "missing") return std::holds_alternative<std::monostate>(v);
  if (op == "not_missing") return !std::holds_alternative<std::monostate>(v);
  if (std::holds_alternative<std::monostate>(v)) return false;
  if (op == "in") {
    for (const auto& t : target)
      if (compare(v, "==", t)) return true;
    return false;
  }
  if (const auto* s = std::get_if<std::string>(&v)) {
    const auto t = target.get<std::string>();
    if (op == "==") return *s == t;
    if (op == "!=") return *s != t;
    throw ConfigError("operator '" + op + "' not supported for text fields");
  }
  const double x = std::get<double>(v);
  const double t = target.get<double>();
  if (op == ">") return x > t;
  if (op == ">=") return x >= t;
  if (op == "<") return x < t;
  if (op == "<=") return x <= t;
  if (op == "==") return x == t;
  if (op == "!=") return x != t;
  throw ConfigError("unknown operator '" + op + "'");
}

}  // namespace

Criterion criterion_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("criterion must be a JSON object");
  if (j.contains("any")) {
    // Disjunction of sub-criteria under one label.
    std::vector<Criterion> parts;
    for (const auto& sub : j.at("any")) parts.push_back(criterion_from_json(sub));
    Criterion c;
    c.label = j.value("label", std::string("any"));
    c.definition = j;
    c.excludes = [parts](const SubjectRecord& r) {
      return std::any_of(parts.begin(), parts.end(), [&](const Criterion& p) { return p.excludes(r); });
    };
    return c;
  }
  const auto field = j.at("field").get<std::string>();
  const auto op = j.at("op").get<std::string>();
  const json value = j.value("value", json{});
  // Validate the field and operator eagerly.
  compare(field_value(SubjectRecord{}, field), op == "in" || op == "missing" || op == "not_missing" ? op : "missing", value);
  Criterion c;
  c.label = j.value("label", field + op + (value.is_null() ? std::string{} : value.dump()));
  c.definition = j;
  c.excludes = [field, op, value](const SubjectRecord& r) {
    return compare(field_value(r, field), op, value);
  };
  return c;
}

std::vector<Criterion> criteria_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("eligibility criteria must be a JSON array");
  std::vector<Criterion> out;
  for (const auto& c : j) out.push_back(criterion_from_json(c));
  return out;
}

std::vector<Criterion> default_criteria() {
  const json defs = json::parse(R"([
    {"label": "age>75", "field": "age", "op": ">", "value": 75},
    {"label": "foreign or unknown region", "field": "region", "op": "in",
     "value": ["Foreign", "Unknown"]},
    {"label": "RRT abroad", "field": "abroad", "op": "==", "value": 1},
    {"label": "died or censored on day of RRT onset", "field": "t_days", "op": "==", "value": 0},
    {"label": "history of cancer or unknown cancer status", "any": [
      {"field": "cancer", "op": "==", "value": 1},
      {"field": "cancer", "op": "missing"}]}
  ])");
  return criteria_from_json(defs);
}

std::optional<std::string> exclusion_reason(const SubjectRecord& r,
                                            std::span<const Criterion> criteria) {
  for (const auto& c : criteria)
    if (c.excludes(r)) return c.label;
  return std::nullopt;
}

EligibilityResult apply_eligibility(std::span<const SubjectRecord> records,
                                    std::span<const Criterion> criteria) {
  EligibilityResult res;
  for (const auto& r : records) (r.pkt ? res.table.initial.pkt : res.table.initial.dialysis)++;
  std::vector<ExclusionRow> rows(criteria.size());
  for (std::size_t i = 0; i < criteria.size(); ++i) rows[i].label = criteria[i].label;
  for (const auto& r : records) {
    bool kept = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
      if (criteria[i].excludes(r)) {
        (r.pkt ? rows[i].excluded.pkt : rows[i].excluded.dialysis)++;
        kept = false;
        break;
      }
    }
    if (kept) res.records.push_back(r);
  }
  ArmCounts remaining = res.table.initial;
  for (auto& row : rows) {
    remaining.pkt -= row.excluded.pkt;
    remaining.dialysis -= row.excluded.dialysis;
    row.remaining = remaining;
  }
  res.table.rows = std::move(rows);
  return res;
}

void write_exclusion_csv(std::ostream& out, const ExclusionTable& t) {
  auto pct = [](std::size_t x, std::size_t n) { return format_fixed(n ? 100.0 * x / n : 0.0, 1); };
  out << "criterion,excluded_pkt,excluded_pkt_pct,excluded_dialysis,excluded_dialysis_pct,"
         "remaining_pkt,remaining_dialysis\n";
  out << "registry total,0,0.0,0,0.0," << t.initial.pkt << ',' << t.initial.dialysis << '\n';
  for (const auto& r : t.rows) {
    out << csv_escape(r.label) << ',' << r.excluded.pkt << ',' << pct(r.excluded.pkt, t.initial.pkt)
        << ',' << r.excluded.dialysis << ',' << pct(r.excluded.dialysis, t.initial.dialysis) << ','
        << r.remaining.pkt << ',' << r.remaining.dialysis << '\n';
  }
  const auto f = t.final_counts();
  out << "total sample,," << pct(f.pkt, t.initial.pkt) << ",," << pct(f.dialysis, t.initial.dialysis)
      << ',' << f.pkt << ',' << f.dialysis << '\n';
}

json to_json(const ExclusionTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"criterion", r.label},
                    {"excluded", {{"pkt", r.excluded.pkt}, {"dialysis", r.excluded.dialysis}}},
                    {"remaining", {{"pkt", r.remaining.pkt}, {"dialysis", r.remaining.dialysis}}}});
  const auto f = t.final_counts();
  return {{"initial", {{"pkt", t.initial.pkt}, {"dialysis", t.initial.dialysis}}},
          {"rows", rows},
          {"final", {{"pkt", f.pkt}, {"dialysis", f.dialysis}}}};
}

// ---------------------------------------------------------------------------
// Describe

ProportionDifference proportion_difference(std::size_t x1, std::size_t n1, std::size_t x2,
                                           std::size_t n2) {
  const double p1 = n1 ? static_cast<double>(x1) / n1 : 0.0;
  const double p2 = n2 ? static_cast<double>(x2) / n2 : 0.0;
  const double v1 = n1 ? p1 * (1 - p1) / n1 : 0.0;
  const double v2 = n2 ? p2 * (1 - p2) / n2 : 0.0;
  const double half = kZ975 * std::sqrt(v1 + v2);
  return {p1 - p2, p1 - p2 - half, p1 - p2 + half};
}

SurvivalSummaryRow survival_summary(const std::string& label, std::span<const SubjectRecord> rows,
                                    std::size_t cohort_size, std::size_t cohort_deaths) {
  SurvivalSummaryRow s;
  s.group = label;
  s.patients = rows.size();
  std::vector<double> fu;
  fu.reserve(rows.size());
  for (const auto& r : rows) {
    s.deaths += r.event ? 1 : 0;
    const double years = r.t_days / kDaysPerYear;
    s.person_years += years;
    fu.push_back(years);
  }
  s.patients_share = cohort_size ? static_cast<double>(s.patients) / cohort_size : 0.0;
  s.deaths_share = cohort_deaths ? static_cast<double>(s.deaths) / cohort_deaths : 0.0;
  s.deaths_in_row = s.patients ? static_cast<double>(s.deaths) / s.patients : 0.0;
  s.median_followup_years = fu.empty() ? 0.0 : quantile(fu, 0.5);
  s.crude_rate = s.person_years > 0 ? s.deaths / s.person_years : 0.0;
  return s;
}

namespace {

Quartiles quartiles(const std::vector<double>& v) {
  Quartiles q;
  q.n = v.size();
  if (v.empty()) return q;
  q.q1 = quantile(v, 0.25);
  q.median = quantile(v, 0.5);
  q.q3 = quantile(v, 0.75);
  return q;
}

ContinuousRow continuous_row(const std::string& name, std::span<const SubjectRecord> records,
                             const std::function<std::optional<double>(const SubjectRecord&)>& get,
                             const DescribeOptions& opts) {
  ContinuousRow row;
  row.covariate = name;
  std::array<std::vector<double>, 3> vals;
  for (const auto& r : records) {
    if (auto v = get(r)) {
      vals[kOverall].push_back(*v);
      vals[r.pkt ? kPkt : kDialysis].push_back(*v);
    }
  }
  for (std::size_t g = 0; g < 3; ++g) row.groups[g] = quartiles(vals[g]);
  if (vals[kPkt].empty() || vals[kDialysis].empty()) {
    row.available = !vals[kOverall].empty();
    row.diff = row.lo = row.hi = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  row.diff = row.groups[kPkt].median - row.groups[kDialysis].median;
  // Stratified percentile bootstrap of the median difference.
  Rng rng = make_rng(opts.seed, fnv1a64(name));
  std::vector<double> reps;
  reps.reserve(opts.bootstrap_reps);
  std::vector<double> a, b;
  for (int i = 0; i < opts.bootstrap_reps; ++i) {
    auto resample = [&](const std::vector<double>& src, std::vector<double>& dst) {
      dst.resize(src.size());
      for (auto& x : dst) x = src[static_cast<std::size_t>(uniform01(rng) * src.size())];
    };
    resample(vals[kPkt], a);
    resample(vals[kDialysis], b);
    reps.push_back(quantile(a, 0.5) - quantile(b, 0.5));
  }
  if (reps.empty()) {
    row.lo = row.hi = row.diff;
  } else {
    row.lo = quantile(reps, 0.025);
    row.hi = quantile(reps, 0.975);
  }
  return row;
}

CategoricalRow categorical_row(const std::string& name, const std::string& level,
                               std::span<const SubjectRecord> records,
                               const std::function<Flag(const SubjectRecord&)>& get) {
  CategoricalRow row;
  row.covariate = name;
  row.level = level;
  for (const auto& r : records) {
    const Flag f = get(r);
    if (!f) continue;
    for (std::size_t g : {static_cast<std::size_t>(kOverall), static_cast<std::size_t>(r.pkt ? kPkt : kDialysis)}) {
      row.denominator[g]++;
      row.count[g] += *f ? 1 : 0;
    }
  }
  for (std::size_t g = 0; g < 3; ++g)
    row.proportion[g] = row.denominator[g] ? static_cast<double>(row.count[g]) / row.denominator[g] : 0.0;
  row.available = row.denominator[kOverall] > 0;
  if (!row.available || row.denominator[kPkt] == 0 || row.denominator[kDialysis] == 0) {
    row.diff = row.lo = row.hi = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  const auto d = proportion_difference(row.count[kPkt], row.denominator[kPkt], row.count[kDialysis],
                                       row.denominator[kDialysis]);
  row.diff = d.diff;
  row.lo = d.lo;
  row.hi = d.hi;
  return row;
}

std::vector<std::string> levels_with_reference(std::span<const SubjectRecord> records,
                                               std::string SubjectRecord::*member,
                                               const std::string& reference) {
  std::set<std::string> seen;
  for (const auto& r : records) seen.insert(r.*member);
  std::vector<std::string> out;
  if (seen.contains(reference)) out.push_back(reference);
  for (const auto& s : seen)
    if (s != reference) out.push_back(s);
  return out;
}

}  // namespace

CovariateTable describe(std::span<const SubjectRecord> records, const DescribeOptions& opts) {
  if (records.empty()) throw DataError("describe requires a nonempty cohort");
  CovariateTable t;
  t.continuous.push_back(continuous_row(
      "age", records, [](const SubjectRecord& r) { return std::optional<double>(r.age); }, opts));
  t.continuous.push_back(continuous_row(
      "gfr", records, [](const SubjectRecord& r) { return r.gfr; }, opts));
  t.continuous.push_back(continuous_row(
      "follow-up years", records,
      [](const SubjectRecord& r) { return std::optional<double>(r.t_days / kDaysPerYear); }, opts));

  t.categorical.push_back(categorical_row("sex", "female", records, [](const SubjectRecord& r) {
    return Flag(r.sex == Sex::female);
  }));
  for (const auto& lvl : levels_with_reference(records, &SubjectRecord::region, kReferenceRegion))
    t.categorical.push_back(categorical_row("region", lvl, records, [lvl](const SubjectRecord& r) {
      return Flag(r.region == lvl);
    }));
  for (const auto& lvl : levels_with_reference(records, &SubjectRecord::pkd, kReferencePkd))
    t.categorical.push_back(categorical_row("pkd", lvl, records, [lvl](const SubjectRecord& r) {
      return Flag(r.pkd == lvl);
    }));
  for (std::size_t k = 0; k < kComorbidityCount; ++k)
    t.categorical.push_back(categorical_row(kComorbidityNames[k], "1", records,
                                            [k](const SubjectRecord& r) { return r.comorbidity[k]; }));
  t.categorical.push_back(categorical_row("deaths", "1", records, [](const SubjectRecord& r) {
    return Flag(r.event);
  }));

  std::vector<SubjectRecord> pkt, dial;
  std::size_t deaths = 0;
  for (const auto& r : records) {
    (r.pkt ? pkt : dial).push_back(r);
    deaths += r.event ? 1 : 0;
  }
  t.survival.push_back(survival_summary("RRT cohort", records, records.size(), deaths));
  t.survival.push_back(survival_summary("PKT group", pkt, records.size(), deaths));
  t.survival.push_back(survival_summary("Dialysis first group", dial, records.size(), deaths));
  return t;
}

void write_survival_summary_csv(std::ostream& out, const CovariateTable& t) {
  out << "group,patients,patients_pct,deaths,deaths_pct,deaths_in_row_pct,"
         "median_followup_years,person_years,crude_rate\n";
  for (const auto& s : t.survival)
    out << s.group << ',' << s.patients << ',' << format_fixed(100 * s.patients_share, 1) << ','
        << s.deaths << ',' << format_fixed(100 * s.deaths_share, 1) << ','
        << format_fixed(100 * s.deaths_in_row, 1) << ',' << format_fixed(s.median_followup_years, 2)
        << ',' << format_fixed(s.person_years, 1) << ',' << format_fixed(s.crude_rate, 4) << '\n';
}

void write_covariate_csv(std::ostream& out, const CovariateTable& t) {
  out << "covariate,level,summary,overall,pkt,dialysis,difference,diff_lo,diff_hi,available\n";
  for (const auto& c : t.continuous) {
    auto cell = [](const Quartiles& q) {
      return q.n ? format_fixed(q.median, 1) + " (" + format_fixed(q.q3 - q.q1, 1) + ")"
                 : std::string("not available");
    };
    out << csv_escape(c.covariate) << ",,median (IQR)," << csv_escape(cell(c.groups[kOverall])) << ','
        << csv_escape(cell(c.groups[kPkt])) << ',' << csv_escape(cell(c.groups[kDialysis])) << ','
        << format_fixed(c.diff, 2) << ',' << format_fixed(c.lo, 2) << ',' << format_fixed(c.hi, 2)
        << ',' << (c.available ? 1 : 0) << '\n';
  }
  for (const auto& c : t.categorical) {
    auto cell = [&](std::size_t g) {
      return c.denominator[g] ? std::to_string(c.count[g]) + " (" +
                                    format_fixed(100 * c.proportion[g], 1) + ")"
                              : std::string("not available");
    };
    out << csv_escape(c.covariate) << ',' << csv_escape(c.level) << ",n (%),"
        << csv_escape(cell(kOverall)) << ',' << csv_escape(cell(kPkt)) << ','
        << csv_escape(cell(kDialysis)) << ',' << format_fixed(100 * c.diff, 2) << ','
        << format_fixed(100 * c.lo, 2) << ',' << format_fixed(100 * c.hi, 2) << ','
        << (c.available ? 1 : 0) << '\n';
  }
}

json to_json(const CovariateTable& t) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json cont = json::array(), cat = json::array(), surv = json::array();
  for (const auto& c : t.continuous) {
    json groups = json::array();
    for (const auto& q : c.groups)
      groups.push_back({{"n", q.n}, {"q1", q.q1}, {"median", q.median}, {"q3", q.q3}});
    cont.push_back({{"covariate", c.covariate}, {"available", c.available}, {"groups", groups},
                    {"difference", num(c.diff)}, {"ci", {num(c.lo), num(c.hi)}}});
  }
  for (const auto& c : t.categorical)
    cat.push_back({{"covariate", c.covariate}, {"level", c.level}, {"available", c.available},
                   {"count", c.count}, {"denominator", c.denominator},
                   {"proportion", c.proportion}, {"difference", num(c.diff)},
                   {"ci", {num(c.lo), num(c.hi)}}});
  for (const auto& s : t.survival)
    surv.push_back({{"group", s.group}, {"patients", s.patients}, {"deaths", s.deaths},
                    {"deaths_in_row", s.deaths_in_row},
                    {"median_followup_years", s.median_followup_years},
                    {"person_years", s.person_years}, {"crude_rate", s.crude_rate}});
  return {{"continuous", cont}, {"categorical", cat}, {"survival", surv}};
}

}  // namespace regsurv
