#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "regsurv/common.hpp"
#include "regsurv/pipeline.hpp"

using regsurv::json;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string input;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n;
  std::optional<int> B;
  std::optional<int> m;
  std::vector<double> bracket;
  std::optional<double> recensor;
  std::vector<double> cutoffs;
  std::vector<double> horizons;
  std::string estimand;
  std::string spec;
  bool two = false;
  bool one = false;
  bool no_truth = false;
  bool print_config = false;
};

void add_flags(CLI::App* sub, Flags& f) {
  sub->add_option("-c,--config", f.config, "JSON config, or a manifest.json to re-run");
  sub->add_option("-o,--out", f.out, "output directory")->required();
  sub->add_option("-i,--input", f.input, "registry CSV (otherwise the configured simulation is used)");
  sub->add_option("--preset", f.preset, "simulation preset");
  sub->add_option("--seed", f.seed, "simulation seed");
  sub->add_option("--n", f.n, "simulated cohort size");
  sub->add_option("--B", f.B, "bootstrap replicates per imputed set");
  sub->add_option("--m", f.m, "number of imputed sets");
  sub->add_option("--bracket", f.bracket, "psi search bracket: lower upper")->expected(2);
  sub->add_option("--recensor", f.recensor, "artificial censoring cutoff in years");
  sub->add_option("--cutoffs", f.cutoffs, "recensoring cutoffs in years");
  sub->add_option("--horizons", f.horizons, "horizons in years");
  sub->add_option("--estimand", f.estimand, "IPW weight estimand: ATE, ATT or ATNT");
  sub->add_option("--spec", f.spec, "outcome model formula, e.g. \"age + sex + year\"");
  sub->add_flag("--two", f.two, "also fit the two-parameter AFT model");
  sub->add_flag("--one", f.one, "skip the two-parameter AFT model");
  sub->add_flag("--no-truth", f.no_truth, "skip the Monte Carlo ground truth when simulating");
  sub->add_flag("--print-config", f.print_config, "print the resolved config and exit");
}

json overrides(const Flags& f) {
  json user = f.config.empty() ? json::object() : regsurv::load_config_file(f.config);
  if (!user.is_object()) throw regsurv::ConfigError("config must be a JSON object");
  if (!f.input.empty()) user["input"] = f.input;
  if (!f.preset.empty()) {
    user["simulation"] = {{"preset", f.preset}};
    user["input"] = nullptr;
  }
  if (f.seed) user["simulation"]["seed"] = *f.seed;
  if (f.n) user["simulation"]["n"] = *f.n;
  if (f.B) user["bootstrap"]["B"] = *f.B;
  if (f.m) user["imputation"]["m"] = *f.m;
  if (!f.bracket.empty()) user["gest"]["options"]["bracket"] = f.bracket;
  if (f.recensor) user["gest"]["options"]["recensor_years"] = *f.recensor;
  if (!f.cutoffs.empty()) user["sweep"]["cutoffs"] = f.cutoffs;
  if (!f.horizons.empty()) user["standardize"]["horizons"] = f.horizons;
  if (!f.estimand.empty()) user["weights"]["estimand"] = f.estimand;
  if (!f.spec.empty()) {
    user["specs"]["outcome"] = f.spec;
    user["gest"]["options"]["spec"] = f.spec;
  }
  if (f.two) user["gest"]["two_parameter"] = true;
  if (f.one) user["gest"]["two_parameter"] = false;
  if (f.no_truth) user["truth"] = false;
  return user;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal survival analysis for registry-based target-trial emulation"};
  app.set_version_flag("--version", regsurv::kVersion);
  app.require_subcommand(1);
  Flags flags;
  for (const auto& name : regsurv::commands()) add_flags(app.add_subcommand(name, "run " + name), flags);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  json user;
  try {
    user = overrides(flags);
    if (flags.print_config) {
      std::cout << regsurv::resolve_config(user).dump(2) << '\n';
      return 0;
    }
  } catch (const regsurv::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return regsurv::run_command(command, user, flags.out, std::cerr);
}
