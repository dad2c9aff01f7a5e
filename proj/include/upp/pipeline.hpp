#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "upp/fit.hpp"
#include "upp/fringe.hpp"
#include "upp/routing.hpp"
#include "upp/trainset.hpp"

namespace upp {

struct CampaignConfig {
  int records = 2000;
  PowerRange power_range;
  std::uint64_t seed = 1;
  bool fringe_scans = true;  // fringe-derived p2pi as the fit starting point
  int fringe_samples = 30;
  double fringe_max_mw = 60.0;
  bool route = true;         // top input to bottom output, reported only
  FitOptions fit;
};

struct CampaignResult {
  CalibrationModel model;
  std::optional<HeaterCharacterization> heaters;
  std::optional<RoutingResult> routing;
  std::vector<MeasurementRecord> records;
};

/// Fringe characterization, routing, random-power training set and model
/// fit, in that order, against one device.
inline CampaignResult run_calibration(SimulatedDevice& dev, const CampaignConfig& config) {
  detail::require(config.records >= 1, "calibrate: record count must be >= 1");
  FitOptions fit = config.fit;
  if (fit.crosstalk_window <= 0) fit.crosstalk_window = dev.crosstalk_window();
  std::optional<HeaterCharacterization> heaters;
  if (config.fringe_scans) {
    heaters = characterize_heaters(dev, PowerVector::Zero(dev.n_heaters()), config.fringe_max_mw,
                                   config.fringe_samples, fit.nominal_p2pi_mw);
    if (!fit.initial_p2pi && !fit.initial_thermal) fit.initial_p2pi = heaters->p2pi_mw;
  }
  std::optional<RoutingResult> routing;
  if (config.route) {
    RoutingOptions ro;
    ro.samples = config.fringe_samples;
    ro.scan_max_mw = config.fringe_max_mw;
    routing = optimize_routing(dev, 0, dev.n_modes() - 1, ro);
  }
  auto records = generate_training_set(dev, config.records, config.power_range, Rng::mix(config.seed, 1));
  fit.seed = Rng::mix(config.seed, 2);
  fit.max_power_mw = dev.max_power();
  CalibrationModel model = fit_model(dev.public_layout(), records, fit);
  return CampaignResult{std::move(model), std::move(heaters), std::move(routing), std::move(records)};
}

}  // namespace upp
