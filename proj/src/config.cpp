#include "ctlab/config.hpp"

#include <algorithm>
#include <fstream>

#include "ctlab/errors.hpp"
#include "ctlab/fields.hpp"

namespace ctlab {

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw ContractViolation("config key '" + key + "': " + why);
}

Mat rows_to_mat(const nlohmann::json& j, const std::string& key) {
  if (!j.is_array()) bad_key(key, "expected a matrix as nested rows");
  Mat m;
  std::size_t width = 0;
  for (const auto& row : j) {
    if (!row.is_array()) bad_key(key, "expected a matrix as nested rows");
    if (width == 0) width = row.size();
    if (row.size() != width || width != j.size())
      bad_key(key, "matrix must be square");
    for (const auto& v : row) m.push_back(v.get<double>());
  }
  return m;
}

nlohmann::json mat_to_rows(const Mat& m, int p) {
  auto rows = nlohmann::json::array();
  for (int r = 0; r < p; ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < p; ++c) row.push_back(m[r * p + c]);
    rows.push_back(row);
  }
  return rows;
}

void expect_keys(const nlohmann::json& j, const std::string& prefix,
                 std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end())
      bad_key(prefix.empty() ? key : prefix + "." + key, "unknown key");
  }
}

}  // namespace

const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds = {
      "simulate", "solve",    "residual", "recover",
      "moments",  "reynolds", "detect",   "scaling"};
  return kinds;
}

nlohmann::json initial_to_json(const InitialDist& d) {
  nlohmann::json j;
  switch (d.kind) {
    case InitialDist::Kind::gaussian:
      j["kind"] = "gaussian";
      j["mean"] = d.mean;
      j["cov"] = mat_to_rows(d.cov, static_cast<int>(d.mean.size()));
      break;
    case InitialDist::Kind::uniform:
      j["kind"] = "uniform";
      j["lo"] = d.lo;
      j["hi"] = d.hi;
      break;
    case InitialDist::Kind::delta_cloud:
      j["kind"] = "delta_cloud";
      j["center"] = d.center;
      j["radius"] = d.radius;
      break;
  }
  return j;
}

InitialDist initial_from_json(const nlohmann::json& j) {
  InitialDist d;
  std::string kind = j.value("kind", "");
  if (kind == "gaussian") {
    expect_keys(j, "initial", {"kind", "mean", "cov"});
    d.kind = InitialDist::Kind::gaussian;
    if (!j.contains("mean")) bad_key("initial.mean", "required");
    if (!j.contains("cov")) bad_key("initial.cov", "required");
    d.mean = j.at("mean").get<Vec>();
    d.cov = rows_to_mat(j.at("cov"), "initial.cov");
    if (d.cov.size() != d.mean.size() * d.mean.size())
      bad_key("initial.cov", "must be dim x dim");
  } else if (kind == "uniform") {
    expect_keys(j, "initial", {"kind", "lo", "hi"});
    d.kind = InitialDist::Kind::uniform;
    d.lo = j.at("lo").get<Vec>();
    d.hi = j.at("hi").get<Vec>();
    if (d.lo.size() != d.hi.size()) bad_key("initial.hi", "must match lo");
  } else if (kind == "delta_cloud") {
    expect_keys(j, "initial", {"kind", "center", "radius"});
    d.kind = InitialDist::Kind::delta_cloud;
    d.center = j.at("center").get<Vec>();
    d.radius = j.value("radius", 0.0);
    if (d.radius < 0.0) bad_key("initial.radius", "must be >= 0");
  } else {
    bad_key("initial.kind", "must be gaussian, uniform, or delta_cloud");
  }
  return d;
}

nlohmann::json grid_to_json(const GridSpec& g) {
  nlohmann::json j;
  auto axes = nlohmann::json::array();
  for (const Axis& a : g.axes)
    axes.push_back({{"lo", a.lo}, {"hi", a.hi}, {"cells", a.cells}});
  j["axes"] = axes;
  j["policy"] = g.policy == OutOfGrid::drop ? "drop" : "clip";
  return j;
}

GridSpec grid_from_json(const nlohmann::json& j) {
  expect_keys(j, "grid", {"axes", "policy"});
  GridSpec g;
  if (!j.contains("axes") || !j.at("axes").is_array() || j.at("axes").empty())
    bad_key("grid.axes", "at least one axis required");
  for (const auto& a : j.at("axes")) {
    expect_keys(a, "grid.axes", {"lo", "hi", "cells"});
    Axis ax{a.at("lo").get<double>(), a.at("hi").get<double>(),
            a.at("cells").get<int>()};
    if (!(ax.hi > ax.lo)) bad_key("grid.axes", "needs hi > lo");
    if (ax.cells < 1) bad_key("grid.axes", "needs cells >= 1");
    g.axes.push_back(ax);
  }
  std::string policy = j.value("policy", "drop");
  if (policy == "drop")
    g.policy = OutOfGrid::drop;
  else if (policy == "clip")
    g.policy = OutOfGrid::clip;
  else
    bad_key("grid.policy", "must be drop or clip");
  return g;
}

nlohmann::json noise_to_json(const NoiseSpec& n) {
  return {{"kind", noise_kind_name(n.kind)},
          {"degree", n.degree},
          {"dim", n.dim},
          {"seed", n.seed}};
}

NoiseSpec noise_from_json(const nlohmann::json& j) {
  expect_keys(j, "noise", {"kind", "degree", "dim", "seed"});
  NoiseSpec n;
  try {
    n.kind = noise_kind_from_name(j.value("kind", ""));
  } catch (const Error&) {
    bad_key("noise.kind", "must be brownian, poly_brownian, or zero");
  }
  n.degree = j.value("degree", 2);
  n.dim = j.value("dim", 1);
  n.seed = j.value("seed", std::uint64_t{0});
  if (n.kind == NoiseKind::poly_brownian &&
      (n.degree < 0 || n.degree % 2 != 0))
    bad_key("noise.degree", "must be even and >= 0");
  if (n.dim < 1) bad_key("noise.dim", "must be >= 1");
  return n;
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractViolation("config must be a JSON object");
  expect_keys(j, "",
              {"kind", "field", "initial", "grid", "time", "noise", "seeds",
               "output_dir", "threads", "params"});

  ExperimentConfig c;
  c.kind = j.value("kind", "");
  const auto& kinds = experiment_kinds();
  if (std::find(kinds.begin(), kinds.end(), c.kind) == kinds.end())
    bad_key("kind", "unknown experiment kind '" + c.kind + "'");

  if (!j.contains("field") || !j.at("field").is_object())
    bad_key("field", "required object with name and params");
  const auto& fj = j.at("field");
  expect_keys(fj, "field", {"name", "params"});
  c.field_name = fj.value("name", "");
  c.field_params = fj.value("params", nlohmann::json::object());
  try {
    make_field(c.field_name, c.field_params);
  } catch (const Error& e) {
    bad_key("field.name", e.what());
  }

  if (j.contains("initial")) c.initial = initial_from_json(j.at("initial"));
  if (j.contains("grid")) c.grid = grid_from_json(j.at("grid"));

  if (j.contains("time")) {
    const auto& tj = j.at("time");
    expect_keys(tj, "time", {"t_end", "dt", "cfl", "output_times"});
    c.time.t_end = tj.value("t_end", 0.0);
    c.time.dt = tj.value("dt", 0.0);
    c.time.cfl = tj.value("cfl", 0.0);
    c.time.output_times =
        tj.value("output_times", std::vector<double>{});
    if (c.time.dt < 0.0) bad_key("time.dt", "must be >= 0");
    if (c.time.cfl < 0.0 || c.time.cfl > 1.0)
      bad_key("time.cfl", "must lie in [0, 1]");
  }

  if (j.contains("noise")) c.noise = noise_from_json(j.at("noise"));

  if (j.contains("seeds")) {
    expect_keys(j.at("seeds"), "seeds", {"sample"});
    c.seed = j.at("seeds").value("sample", std::uint64_t{1});
  }
  c.output_dir = j.value("output_dir", "out");
  if (c.output_dir.empty()) bad_key("output_dir", "must be nonempty");
  c.threads = j.value("threads", 0);
  if (c.threads < 0) bad_key("threads", "must be >= 0");
  c.params = j.value("params", nlohmann::json::object());
  if (!c.params.is_object()) bad_key("params", "must be an object");
  return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

nlohmann::json serialize_config(const ExperimentConfig& c) {
  nlohmann::json j;
  j["kind"] = c.kind;
  j["field"] = {{"name", c.field_name}, {"params", c.field_params}};
  if (c.initial) j["initial"] = initial_to_json(*c.initial);
  if (c.grid) j["grid"] = grid_to_json(*c.grid);
  j["time"] = {{"t_end", c.time.t_end},
               {"dt", c.time.dt},
               {"cfl", c.time.cfl},
               {"output_times", c.time.output_times}};
  if (c.noise) j["noise"] = noise_to_json(*c.noise);
  j["seeds"] = {{"sample", c.seed}};
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["params"] = c.params;
  return j;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

}  // namespace ctlab
