// Build a small imperfect device, calibrate it from random-power data and
// program Haar-random targets through the fitted model.

#include <cstdio>

#include "upp/upp.hpp"

int main() {
  upp::DeviceConfig dc;
  dc.n_modes = 6;
  dc.seed = 3;
  upp::SimulatedDevice dev(upp::synth_device(dc));
  const auto& layout = dev.public_layout();
  std::printf("%d MZIs, %d couplers, %d heaters\n", layout.node_count(), layout.coupler_count(),
              layout.heater_count());

  upp::CampaignConfig cc;
  cc.records = 2000;
  const auto cal = upp::run_calibration(dev, cc);
  std::printf("routing extinction %.1f dB, fit validation rms %.4f\n", cal.routing->extinction_db,
              cal.model.metadata.validation_rms);

  const auto targets = upp::make_targets("haar", dc.n_modes, 50, 11);
  const auto report = upp::evaluate_campaign(cal.model, dev, targets);
  std::printf("mean amplitude fidelity %.5f over %zu targets, mean power %.0f mW\n", report.fidelity.mean,
              targets.size(), report.mean_power_mw);
}
