#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctlab/density.hpp"
#include "ctlab/noise.hpp"
#include "ctlab/particles.hpp"

namespace ctlab {

struct TimeSettings {
  double t_end = 0.0;
  double dt = 0.0;   // 0 = unset
  double cfl = 0.0;  // 0 = unset
  std::vector<double> output_times;
};

// One experiment per file.  `params` carries the kind-specific knobs; the
// shared blocks (field, initial, grid, time, noise) are typed here so every
// experiment reads them the same way.
struct ExperimentConfig {
  std::string kind;
  std::string field_name;
  nlohmann::json field_params = nlohmann::json::object();
  std::optional<InitialDist> initial;
  std::optional<GridSpec> grid;
  TimeSettings time;
  std::optional<NoiseSpec> noise;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  int threads = 0;  // 0 = auto
  nlohmann::json params = nlohmann::json::object();
};

// simulate, solve, residual, recover, moments, reynolds, detect, scaling.
const std::vector<std::string>& experiment_kinds();

// Validation failures name the offending key, e.g. "config key 'field.name'".
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig parse_config_file(const std::string& path);
nlohmann::json serialize_config(const ExperimentConfig& c);

// parse(serialize(c)) == c; equality is serialized-form equality.
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);
inline bool operator!=(const ExperimentConfig& a, const ExperimentConfig& b) {
  return !(a == b);
}

nlohmann::json initial_to_json(const InitialDist& d);
InitialDist initial_from_json(const nlohmann::json& j);
nlohmann::json grid_to_json(const GridSpec& g);
GridSpec grid_from_json(const nlohmann::json& j);
nlohmann::json noise_to_json(const NoiseSpec& n);
NoiseSpec noise_from_json(const nlohmann::json& j);

}  // namespace ctlab
