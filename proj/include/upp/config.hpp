#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "upp/device.hpp"
#include "upp/pipeline.hpp"
#include "upp/program.hpp"

namespace upp {

/// Every parameter a CLI pipeline can take, as one flat JSON object.
struct RunConfig {
  // paths
  std::string device = "device.json";
  std::string model = "model.json";
  std::string measurements;          // trainset output; calibrate input when set
  std::string out = "out";           // prefix for reports
  std::string targets_file;

  // device synthesis
  int n_modes = 6;
  std::uint64_t seed = 1;
  double coupler_imperfection = 0.05;
  double crosstalk_strength = 0.05;
  int crosstalk_window = 0;
  double amplitude_noise = 0.01;
  double p2pi_mean_mw = kNominalP2piMw;
  double p2pi_sigma_mw = 2.0;
  bool random_static_phase = true;
  double max_power_mw = 90.0;
  double input_facet_loss_db = 2.17;
  double output_facet_loss_db = 2.18;
  std::vector<double> input_loss_override_db;
  std::vector<double> output_loss_override_db;
  bool drift_enabled = false;
  double drift_rate_per_hour = 5e-5;
  double drift_hours_per_measurement = 0.0;

  // measurement
  int records = 2000;
  double power_lo_mw = 0.0;
  double power_hi_mw = 45.0;
  int fringe_samples = 30;
  double fringe_max_mw = 60.0;
  int heater = -1;                   // fringe: -1 scans every heater
  int input_port = 0;
  int output_port = -1;              // -1: last mode

  // calibration
  bool fringe_scans = true;
  bool route = true;
  int max_iterations = 100;
  double tolerance = 1e-9;
  double validation_fraction = 0.1;
  int minibatch = 0;
  int offset_sweeps = 3;

  // programming and evaluation
  std::string targets = "haar";      // haar | permutation | phase-screen | file
  int count = 200;
  bool compensate_couplers = true;

  DeviceConfig device_config() const {
    DeviceConfig c;
    c.n_modes = n_modes;
    c.seed = seed;
    c.coupler_imperfection = coupler_imperfection;
    c.crosstalk_strength = crosstalk_strength;
    c.crosstalk_window = crosstalk_window;
    c.amplitude_noise = amplitude_noise;
    c.p2pi_mean_mw = p2pi_mean_mw;
    c.p2pi_sigma_mw = p2pi_sigma_mw;
    c.random_static_phase = random_static_phase;
    c.max_power_mw = max_power_mw;
    c.input_facet_loss_db = input_facet_loss_db;
    c.output_facet_loss_db = output_facet_loss_db;
    c.input_loss_override_db = input_loss_override_db;
    c.output_loss_override_db = output_loss_override_db;
    c.drift_enabled = drift_enabled;
    c.drift_rate_per_hour = drift_rate_per_hour;
    c.drift_hours_per_measurement = drift_hours_per_measurement;
    return c;
  }

  CampaignConfig campaign_config() const {
    CampaignConfig c;
    c.records = records;
    c.power_range = {power_lo_mw, power_hi_mw};
    c.seed = seed;
    c.fringe_scans = fringe_scans;
    c.fringe_samples = fringe_samples;
    c.fringe_max_mw = fringe_max_mw;
    c.route = route;
    c.fit.max_iterations = max_iterations;
    c.fit.tolerance = tolerance;
    c.fit.validation_fraction = validation_fraction;
    c.fit.minibatch = minibatch;
    c.fit.offset_sweeps = offset_sweeps;
    c.fit.crosstalk_window = crosstalk_window;
    return c;
  }

  ProgramOptions program_options() const {
    ProgramOptions o;
    o.compensate_couplers = compensate_couplers;
    return o;
  }

  void validate() const {
    detail::require(n_modes >= 2 && n_modes <= 64, "config: n_modes must be in [2, 64]");
    device_config().validate();
    detail::require(records >= 1, "config: records must be >= 1");
    detail::require(power_lo_mw >= 0.0 && power_lo_mw <= power_hi_mw, "config: need 0 <= power_lo_mw <= power_hi_mw");
    detail::require(power_hi_mw <= max_power_mw, "config: power_hi_mw exceeds max_power_mw");
    detail::require(fringe_samples >= 8, "config: fringe_samples must be >= 8");
    detail::require(fringe_max_mw > 0.0 && fringe_max_mw <= max_power_mw, "config: fringe_max_mw must be in (0, max_power_mw]");
    detail::require(heater >= -1, "config: heater must be >= -1");
    detail::require(input_port >= 0, "config: input_port must be >= 0");
    detail::require(output_port >= -1, "config: output_port must be >= -1");
    detail::require(max_iterations >= 1, "config: max_iterations must be >= 1");
    detail::require(tolerance >= 0.0, "config: tolerance must be >= 0");
    detail::require(validation_fraction >= 0.0 && validation_fraction < 1.0, "config: validation_fraction must be in [0, 1)");
    detail::require(minibatch >= 0, "config: minibatch must be >= 0");
    detail::require(offset_sweeps >= 0, "config: offset_sweeps must be >= 0");
    detail::require(targets == "haar" || targets == "permutation" || targets == "phase-screen" || targets == "file",
                    "config: targets must be haar, permutation, phase-screen or file");
    detail::require(targets != "file" || !targets_file.empty(), "config: targets=file needs targets_file");
    detail::require(count >= 1, "config: count must be >= 1");
  }
};

namespace detail {

template <typename F>
void for_each_config_field(RunConfig& c, F&& f) {
  f("device", c.device);
  f("model", c.model);
  f("measurements", c.measurements);
  f("out", c.out);
  f("targets_file", c.targets_file);
  f("n_modes", c.n_modes);
  f("seed", c.seed);
  f("coupler_imperfection", c.coupler_imperfection);
  f("crosstalk_strength", c.crosstalk_strength);
  f("crosstalk_window", c.crosstalk_window);
  f("amplitude_noise", c.amplitude_noise);
  f("p2pi_mean_mw", c.p2pi_mean_mw);
  f("p2pi_sigma_mw", c.p2pi_sigma_mw);
  f("random_static_phase", c.random_static_phase);
  f("max_power_mw", c.max_power_mw);
  f("input_facet_loss_db", c.input_facet_loss_db);
  f("output_facet_loss_db", c.output_facet_loss_db);
  f("input_loss_override_db", c.input_loss_override_db);
  f("output_loss_override_db", c.output_loss_override_db);
  f("drift_enabled", c.drift_enabled);
  f("drift_rate_per_hour", c.drift_rate_per_hour);
  f("drift_hours_per_measurement", c.drift_hours_per_measurement);
  f("records", c.records);
  f("power_lo_mw", c.power_lo_mw);
  f("power_hi_mw", c.power_hi_mw);
  f("fringe_samples", c.fringe_samples);
  f("fringe_max_mw", c.fringe_max_mw);
  f("heater", c.heater);
  f("input_port", c.input_port);
  f("output_port", c.output_port);
  f("fringe_scans", c.fringe_scans);
  f("route", c.route);
  f("max_iterations", c.max_iterations);
  f("tolerance", c.tolerance);
  f("validation_fraction", c.validation_fraction);
  f("minibatch", c.minibatch);
  f("offset_sweeps", c.offset_sweeps);
  f("targets", c.targets);
  f("count", c.count);
  f("compensate_couplers", c.compensate_couplers);
}

template <typename T>
void read_config_value(const nlohmann::json& v, const char* key, T& out) {
  const std::string where = std::string("config: ") + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + " must be a string");
  } else if constexpr (std::is_same_v<T, std::vector<double>>) {
    if (!v.is_array()) throw ConfigError(where + " must be an array of numbers");
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError(where + " must be an array of numbers");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + " must be a number");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) throw ConfigError(where + " must be a nonnegative integer");
  } else {
    if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
  }
  out = v.get<T>();
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& config) {
  nlohmann::json j = nlohmann::json::object();
  RunConfig copy = config;
  detail::for_each_config_field(copy, [&](const char* key, auto& value) { j[key] = value; });
  return j;
}

/// Starts from `base` and overrides the keys present in `j`. Unknown keys
/// and ill-typed or out-of-range values are errors.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  std::set<std::string> known;
  detail::for_each_config_field(base, [&](const char* key, auto& value) {
    known.insert(key);
    if (auto it = j.find(key); it != j.end()) detail::read_config_value(*it, key, value);
  });
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw ConfigError("config: unknown key '" + item.key() + "'");
  }
  base.validate();
  return base;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return config_to_json(a) == config_to_json(b); }

}  // namespace upp
