#pragma once

#include <string>

#include <json.hpp>

#include "ctlab/config.hpp"

namespace ctlab {

struct RunOutcome {
  int exit_code = 0;  // 0 pass, 2 check failure; errors throw instead
  bool pass = true;
  nlohmann::json report;
  std::string report_path;
};

// Executes one experiment: writes report.json, a resolved config.json copy,
// table.csv, and the kind-specific data files under cfg.output_dir.  Report
// content is deterministic given the config; timestamps and host info live
// only under the report's "meta" key.
RunOutcome run_experiment(const ExperimentConfig& cfg);

// Stable-order listing of fields, noise kinds, distributions, experiments.
std::string catalog_text();

}  // namespace ctlab
