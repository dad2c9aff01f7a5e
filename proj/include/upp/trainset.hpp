#pragma once

#include <cstdint>
#include <vector>

#include "upp/device.hpp"

namespace upp {

struct PowerRange {
  double lo_mw = 0.0;
  double hi_mw = 45.0;
};

/// Random-power measurement campaign: every heater of every record gets an
/// independent uniform power in [lo, hi].
inline std::vector<MeasurementRecord> generate_training_set(SimulatedDevice& dev, int count,
                                                            PowerRange range, std::uint64_t seed) {
  detail::require(count >= 1, "generate_training_set: count must be >= 1");
  detail::require(range.lo_mw >= 0.0 && range.lo_mw <= range.hi_mw,
                  "generate_training_set: invalid power range");
  detail::require(range.hi_mw <= dev.max_power(),
                  "generate_training_set: power range exceeds device limit");
  Rng rng(seed);
  std::vector<MeasurementRecord> out;
  out.reserve(count);
  PowerVector p(dev.n_heaters());
  for (int r = 0; r < count; ++r) {
    for (int h = 0; h < dev.n_heaters(); ++h) p(h) = rng.uniform(range.lo_mw, range.hi_mw);
    out.push_back(dev.measure_amplitudes(p));
  }
  return out;
}

}  // namespace upp
