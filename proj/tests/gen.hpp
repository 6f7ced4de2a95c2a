#pragma once

// Small hand-rolled generators for property tests.

#include <string>
#include <vector>

#include "regsurv/common.hpp"
#include "regsurv/registry.hpp"

namespace gen {

using regsurv::Rng;

inline int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(regsurv::uniform01(rng) * (hi - lo + 1));
}

inline bool coin(Rng& rng, double p = 0.5) { return regsurv::uniform01(rng) < p; }

inline regsurv::SubjectRecord record(const std::string& id, bool pkt, int t_days, bool event,
                                     std::optional<int> t_switch = std::nullopt) {
  regsurv::SubjectRecord r;
  r.id = id;
  r.entry_date = regsurv::make_date(2000, 1, 1);
  r.age = 50;
  r.region = "Stockholm";
  r.pkd = "DN";
  r.pkt = pkt;
  r.t_days = t_days;
  r.event = event;
  r.t_switch_days = t_switch;
  return r;
}

// Valid record with every field randomized, including missing flags.
inline regsurv::SubjectRecord any_record(Rng& rng, int i) {
  static const char* regions[] = {"Stockholm", "UppsalaOrebro", "Northern", "Southern", "Southeastern", "Western"};
  static const char* pkds[] = {"DN", "GN", "UNK", "PKD", "PYN", "OTH"};
  regsurv::SubjectRecord r;
  r.id = "g" + std::to_string(i);
  r.entry_date = regsurv::make_date(uniform_int(rng, 1991, 2017), uniform_int(rng, 1, 12), uniform_int(rng, 1, 28));
  r.age = uniform_int(rng, 18, 90) + 0.5 * uniform_int(rng, 0, 1);
  r.sex = coin(rng) ? regsurv::Sex::female : regsurv::Sex::male;
  r.region = regions[uniform_int(rng, 0, 5)];
  r.pkd = pkds[uniform_int(rng, 0, 5)];
  for (auto& f : r.comorbidity) {
    if (!coin(rng, 0.2)) f = coin(rng, 0.3);
  }
  if (coin(rng)) r.gfr = uniform_int(rng, 5, 15) + 0.25;
  r.pkt = coin(rng, 0.2);
  r.t_days = uniform_int(rng, 0, 9000);
  if (!r.pkt && r.t_days > 0 && coin(rng, 0.4)) r.t_switch_days = uniform_int(rng, 1, r.t_days);
  r.event = coin(rng);
  r.cancer = coin(rng, 0.1) ? regsurv::Flag{} : regsurv::Flag{coin(rng, 0.1)};
  r.abroad = coin(rng, 0.05);
  return r;
}

inline std::vector<double> times(Rng& rng, int n, int max_day = 20) {
  std::vector<double> t(n);
  for (auto& x : t) x = uniform_int(rng, 1, max_day);
  return t;
}

inline std::vector<int> events(Rng& rng, int n, double p = 0.7) {
  std::vector<int> e(n);
  for (auto& x : e) x = coin(rng, p);
  return e;
}

}  // namespace gen
