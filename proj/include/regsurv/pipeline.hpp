#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace regsurv {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

// simulate, describe, km, cif, logrank, ps, ipw, standardize, impute, gest, sweep, pipeline
const std::vector<std::string>& commands();

/// Every configurable value with its default.
json default_config();

/// Merges `user` over the defaults and canonicalizes each section, so that
/// resolving a resolved config is the identity. Unknown keys are a ConfigError.
json resolve_config(const json& user);

/// Reads a config file. A run manifest is accepted too; its recorded config is used.
json load_config_file(const std::string& path);

/// Runs one subcommand into `out_dir` and returns the process exit code:
/// 0 ok, 2 config error, 3 estimation failure, 4 data error. On failure the
/// directory keeps partial artifacts plus error.json and a FAILED marker.
int run_command(const std::string& command, const json& config, const std::filesystem::path& out_dir,
                std::ostream& log);

}  // namespace regsurv
