#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "regsurv/common.hpp"

namespace regsurv {

using json = nlohmann::json;

enum class Sex : std::uint8_t { female, male };

// Tri-state indicator: false, true or missing.
using Flag = std::optional<bool>;

inline constexpr std::size_t kComorbidityCount = 5;
inline constexpr std::array<const char*, kComorbidityCount> kComorbidityNames = {
    "diabetes", "hypertension", "ihd", "pad", "cvd"};

// Reference levels used for dummy coding unless a spec overrides them.
inline constexpr const char* kReferenceRegion = "Stockholm";
inline constexpr const char* kReferencePkd = "DN";

/// One registry entry. Times are integer days from RRT onset.
struct SubjectRecord {
  std::string id;
  Date entry_date{};
  double age = 0.0;
  Sex sex = Sex::male;
  std::string region;
  std::string pkd;
  std::array<Flag, kComorbidityCount> comorbidity{};
  std::optional<double> gfr;
  bool pkt = false;
  std::optional<int> t_switch_days;
  int t_days = 0;
  bool event = false;
  // Eligibility-only fields; absent columns load as "known negative".
  Flag cancer = false;
  Flag abroad = false;

  double entry_year() const { return calendar_year(entry_date); }
  bool operator==(const SubjectRecord&) const = default;
};

using Cohort = std::vector<SubjectRecord>;

// Returns a description of the first violated record invariant, if any.
std::optional<std::string> check_invariants(const SubjectRecord& r);

struct Decomposition {
  int t_w = 0;  // days without initial transplant
  int t_r = 0;  // days after a delayed transplant
  bool pkt = false;

  bool on_dialysis(double day) const { return !pkt && day < t_w; }
};

Decomposition decompose(const SubjectRecord& r);

// ---------------------------------------------------------------------------
// CSV ingestion

/// Logical field name -> CSV column header.
struct Schema {
  std::map<std::string, std::string> columns;

  static Schema defaults();
  // Overrides on top of the defaults, e.g. {"t_days": "followup"}.
  static Schema from_json(const json& j);
  json to_json() const;

  const std::string& column(const std::string& field) const;
  static const std::vector<std::string>& required_fields();
  static const std::vector<std::string>& optional_fields();
};

struct RowDiagnostic {
  std::size_t row = 0;  // 1-based data row (header excluded)
  std::string column;
  std::string message;
};

struct LoadResult {
  Cohort records;
  std::vector<RowDiagnostic> rejects;
};

/// Parses a registry CSV. Missing required columns throw DataError; bad rows are
/// rejected with diagnostics and the rest of the file is still loaded.
LoadResult load_registry(std::istream& in, const Schema& schema = Schema::defaults());
LoadResult load_registry_file(const std::string& path, const Schema& schema = Schema::defaults());

void write_registry(std::ostream& out, std::span<const SubjectRecord> records,
                    const Schema& schema = Schema::defaults());

// ---------------------------------------------------------------------------
// Eligibility

struct Criterion {
  std::string label;
  std::function<bool(const SubjectRecord&)> excludes;
  json definition;  // echo of the config that built it
};

/// Exclusion criteria in the order of the registry study-population table.
std::vector<Criterion> default_criteria();

/// Builds a predicate from {"label", "field", "op", "value"}. Supported ops:
/// ">", ">=", "<", "<=", "==", "!=", "in", "missing", "not_missing".
Criterion criterion_from_json(const json& j);
std::vector<Criterion> criteria_from_json(const json& j);

struct ArmCounts {
  std::size_t pkt = 0;
  std::size_t dialysis = 0;

  std::size_t total() const { return pkt + dialysis; }
  bool operator==(const ArmCounts&) const = default;
};

struct ExclusionRow {
  std::string label;
  ArmCounts excluded;
  ArmCounts remaining;
};

struct ExclusionTable {
  ArmCounts initial;
  std::vector<ExclusionRow> rows;

  ArmCounts final_counts() const { return rows.empty() ? initial : rows.back().remaining; }
};

struct EligibilityResult {
  Cohort records;
  ExclusionTable table;
};

// Label of the first criterion that excludes `r`.
std::optional<std::string> exclusion_reason(const SubjectRecord& r,
                                            std::span<const Criterion> criteria);

EligibilityResult apply_eligibility(std::span<const SubjectRecord> records,
                                    std::span<const Criterion> criteria);

void write_exclusion_csv(std::ostream& out, const ExclusionTable& t);
json to_json(const ExclusionTable& t);

// ---------------------------------------------------------------------------
// Descriptive tables

struct Quartiles {
  double q1 = 0, median = 0, q3 = 0;
  std::size_t n = 0;
};

// Group index order used by every describe row.
enum Group : std::size_t { kOverall = 0, kPkt = 1, kDialysis = 2 };

struct ContinuousRow {
  std::string covariate;
  bool available = true;
  std::array<Quartiles, 3> groups{};
  // PKT minus dialysis median, bootstrap percentile CI.
  double diff = 0, lo = 0, hi = 0;
};

struct CategoricalRow {
  std::string covariate;
  std::string level;
  bool available = true;
  std::array<std::size_t, 3> count{};
  std::array<std::size_t, 3> denominator{};
  std::array<double, 3> proportion{};
  // PKT minus dialysis proportion with normal-approximation CI.
  double diff = 0, lo = 0, hi = 0;
};

struct SurvivalSummaryRow {
  std::string group;
  std::size_t patients = 0;
  double patients_share = 0;  // of the whole cohort
  std::size_t deaths = 0;
  double deaths_share = 0;  // of all deaths
  double deaths_in_row = 0;
  double median_followup_years = 0;
  double person_years = 0;
  double crude_rate = 0;  // deaths per person-year
};

struct CovariateTable {
  std::vector<ContinuousRow> continuous;
  std::vector<CategoricalRow> categorical;
  std::vector<SurvivalSummaryRow> survival;
};

struct DescribeOptions {
  int bootstrap_reps = 200;
  std::uint64_t seed = 20240101;
};

struct ProportionDifference {
  double diff, lo, hi;
};

ProportionDifference proportion_difference(std::size_t x1, std::size_t n1, std::size_t x2,
                                           std::size_t n2);

SurvivalSummaryRow survival_summary(const std::string& label,
                                    std::span<const SubjectRecord> rows, std::size_t cohort_size,
                                    std::size_t cohort_deaths);

CovariateTable describe(std::span<const SubjectRecord> records, const DescribeOptions& opts = {});

void write_survival_summary_csv(std::ostream& out, const CovariateTable& t);
void write_covariate_csv(std::ostream& out, const CovariateTable& t);
json to_json(const CovariateTable& t);

}  // namespace regsurv
