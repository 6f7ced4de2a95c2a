#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace regsurv {

inline constexpr double kDaysPerYear = 365.25;
inline constexpr double kZ975 = 1.959963984540054;

// Exit codes double as error categories.
enum class ErrorKind : int { config = 2, estimation = 3, data = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};
struct EstimationError : Error {
  explicit EstimationError(const std::string& what) : Error(ErrorKind::estimation, what) {}
};
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

// ---------------------------------------------------------------------------
// Calendar dates at day resolution.

using Date = std::chrono::sys_days;

std::optional<Date> parse_date(std::string_view text);
std::string format_date(Date d);
Date make_date(int y, unsigned m, unsigned d);
// Fractional calendar year, e.g. 1995.5 for early July 1995.
double calendar_year(Date d);
Date date_from_calendar_year(double year);

// ---------------------------------------------------------------------------
// Randomness. All streams are derived from a named seed; no ambient entropy.

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(derive_seed(seed, stream));
}

// Uniform in the open interval (0, 1).
double uniform01(Rng& rng);
double standard_normal(Rng& rng);

// ---------------------------------------------------------------------------
// Scalar helpers.

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

double normal_cdf(double x);
double normal_quantile(double p);
// Upper tail of the chi-square distribution.
double chi2_sf(double x, double df);
// Regularized upper incomplete gamma Q(a, x).
double gamma_q(double a, double x);
// Regularized incomplete beta I_x(a, b).
double beta_inc(double a, double b, double x);
double student_t_cdf(double t, double df);
double student_t_quantile(double p, double df);

// Sample quantile with linear interpolation between order statistics
// (Hyndman-Fan type 7). `values` need not be sorted.
double quantile(std::vector<double> values, double prob);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Shortest round-trip decimal representation.
std::string format_double(double v);
std::string format_fixed(double v, int digits);

}  // namespace regsurv
