#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradsed/experiment.hpp"
#include "gradsed/report.hpp"

namespace gradsed::cli {

enum ExitCode { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Base config for --task (an op name or "multitask"), then the config file,
// then key=value overrides, all in manifest key syntax.
experiment::RunConfig resolve_config(const std::string& task, const std::string& config_path,
                                     const std::vector<std::string>& overrides);

// Runs one intervention and records manifest.txt, trace.csv and
// intervention.csv in `dir`.
report::InterventionEntry intervene_to_dir(const experiment::InterventionConfig& icfg, const experiment::RunConfig& cfg,
                                           const std::filesystem::path& dir);

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace gradsed::cli
