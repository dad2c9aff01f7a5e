#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "upp/mesh.hpp"
#include "upp/metrics.hpp"
#include "upp/rng.hpp"
#include "upp/thermal.hpp"

namespace upp {

inline constexpr double kNominalP2piMw = 46.0;

struct DeviceConfig {
  int n_modes = 6;
  std::uint64_t seed = 1;
  double coupler_imperfection = 0.05;  // couplers uniform in [0.5 - d, 0.5 + d]
  double crosstalk_strength = 0.05;    // |c_ij| <= strength * 2π / 46 mW
  int crosstalk_window = 0;            // 0: one neighbour per mode (24 at 24 modes)
  double amplitude_noise = 0.01;       // relative sigma on measured amplitudes
  double p2pi_mean_mw = kNominalP2piMw;
  double p2pi_sigma_mw = 2.0;
  bool random_static_phase = true;     // theta0 uniform in [0, 2π), else 0
  double max_power_mw = 90.0;
  double input_facet_loss_db = 2.17;
  double output_facet_loss_db = 2.18;
  std::vector<double> input_loss_override_db;   // per port, replaces the facet value
  std::vector<double> output_loss_override_db;
  bool drift_enabled = false;
  double drift_rate_per_hour = 5e-5;
  double drift_hours_per_measurement = 0.0;

  int effective_window() const {
    const int heaters = n_modes * (n_modes - 1) + n_modes;
    const int w = crosstalk_window > 0 ? crosstalk_window : n_modes;
    return std::min(w, heaters - 1);
  }

  void validate() const {
    detail::require(n_modes >= 2, "device: n_modes must be >= 2");
    detail::require(coupler_imperfection >= 0.0 && coupler_imperfection <= 0.5,
                    "device: coupler imperfection must be in [0, 0.5]");
    detail::require(crosstalk_strength >= 0.0 && crosstalk_strength <= 1.0,
                    "device: crosstalk strength must be in [0, 1]");
    detail::require(crosstalk_window >= 0, "device: crosstalk window must be >= 0");
    detail::require(amplitude_noise >= 0.0 && amplitude_noise <= 0.2,
                    "device: amplitude noise must be in [0, 0.2]");
    detail::require(p2pi_mean_mw > 0.0 && p2pi_sigma_mw >= 0.0, "device: invalid p2pi distribution");
    detail::require(max_power_mw > 0.0, "device: max power must be positive");
    detail::require(input_facet_loss_db >= 0.0 && output_facet_loss_db >= 0.0,
                    "device: facet losses must be >= 0 dB");
    for (const auto* v : {&input_loss_override_db, &output_loss_override_db}) {
      detail::require(v->empty() || static_cast<int>(v->size()) == n_modes,
                      "device: per-port loss overrides need one entry per mode");
      for (double x : *v) detail::require(x >= 0.0, "device: facet losses must be >= 0 dB");
    }
    detail::require(drift_rate_per_hour >= 0.0 && drift_hours_per_measurement >= 0.0,
                    "device: drift parameters must be >= 0");
  }
};

/// Hidden parameters of a synthetic processor.
struct DeviceGroundTruth {
  MeshLayout layout;  // true, imperfect couplers
  ThermalModel thermal;
  std::vector<double> input_loss_db;
  std::vector<double> output_loss_db;
  double amplitude_noise = 0.0;
  std::uint64_t seed = 0;
  bool drift_enabled = false;
  double drift_rate_per_hour = 0.0;
  double drift_hours_per_measurement = 0.0;
};

inline DeviceGroundTruth synth_device(const DeviceConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const MeshLayout ideal = standard_layout(config.n_modes);
  RealVector t(ideal.coupler_count());
  for (Eigen::Index k = 0; k < t.size(); ++k) {
    t(k) = rng.uniform(0.5 - config.coupler_imperfection, 0.5 + config.coupler_imperfection);
  }
  const int heaters = ideal.heater_count();
  RealVector theta0 = RealVector::Zero(heaters);
  for (int h = 0; h < heaters; ++h) {
    const double draw = rng.uniform(0.0, kTwoPi);
    if (config.random_static_phase) theta0(h) = draw;
  }
  RealVector p2pi(heaters);
  for (int h = 0; h < heaters; ++h) {
    p2pi(h) = std::max(0.25 * config.p2pi_mean_mw, rng.normal(config.p2pi_mean_mw, config.p2pi_sigma_mw));
  }
  const int window = config.effective_window();
  std::vector<double> coeffs;
  coeffs.reserve(static_cast<std::size_t>(heaters * window));
  const double bound = config.crosstalk_strength * kTwoPi / kNominalP2piMw;
  for (int i = 0; i < heaters; ++i) {
    for (int j : crosstalk_window(heaters, window, i)) {
      coeffs.push_back(std::min(rng.uniform(0.0, bound), kTwoPi / p2pi(j)));
    }
  }

  auto per_port = [&](const std::vector<double>& override_db, double facet) {
    return override_db.empty() ? std::vector<double>(config.n_modes, facet) : override_db;
  };
  return DeviceGroundTruth{ideal.with_couplers(t),
                           ThermalModel(std::move(theta0), std::move(p2pi), window, std::move(coeffs),
                                        config.max_power_mw),
                           per_port(config.input_loss_override_db, config.input_facet_loss_db),
                           per_port(config.output_loss_override_db, config.output_facet_loss_db),
                           config.amplitude_noise,
                           config.seed,
                           config.drift_enabled,
                           config.drift_rate_per_hour,
                           config.drift_hours_per_measurement};
}

/// One lab measurement: heater powers and the measured |U_ij|.
struct MeasurementRecord {
  std::int64_t seq = 0;
  PowerVector powers;
  RealMatrix amplitudes;
};

struct OutputDistribution {
  RealVector probabilities;    // normalized over output ports
  double transmission = 0.0;   // absolute, including facet losses
  double insertion_loss_db = 0.0;
};

/// The simulated lab bench. Exposes what an experiment can observe (output
/// amplitudes and intensities for chosen heater powers); complex phases of
/// the transfer matrix are never returned.
///
/// Stateful: owns the noise stream, the sequence counter and the drift clock.
class SimulatedDevice {
 public:
  explicit SimulatedDevice(DeviceGroundTruth truth, std::uint64_t noise_stream = 0)
      : truth_(std::move(truth)),
        public_layout_(truth_.layout.ideal()),
        noise_(Rng::mix(truth_.seed, 0x6e6f697365ULL + noise_stream)) {}

  int n_modes() const noexcept { return truth_.layout.n_modes(); }
  int n_heaters() const noexcept { return truth_.thermal.n_heaters(); }
  double max_power() const noexcept { return truth_.thermal.max_power(); }
  int crosstalk_window() const noexcept { return truth_.thermal.window(); }
  double amplitude_noise() const noexcept { return truth_.amplitude_noise; }

  /// Topology with nominal couplers, which is all a user knows a priori.
  const MeshLayout& public_layout() const noexcept { return public_layout_; }

  /// Hidden parameters; for tests and reporting only.
  const DeviceGroundTruth& ground_truth() const noexcept { return truth_; }

  std::int64_t measurements_taken() const noexcept { return seq_; }
  double clock_hours() const noexcept { return clock_hours_; }

  /// Noiseless transfer matrix at the current drift state.
  Unitary true_unitary(const PowerVector& p) const {
    check_powers(p);
    return mesh_unitary(truth_.layout, phases_from_powers(current_thermal(), p));
  }

  MeasurementRecord measure_amplitudes(const PowerVector& p) {
    const Unitary u = true_unitary(p);
    RealMatrix amp = u.amplitudes();
    apply_noise(amp);
    MeasurementRecord rec{seq_, p, std::move(amp)};
    advance();
    return rec;
  }

  OutputDistribution measure_output_distribution(int input_port, const PowerVector& p) {
    detail::require(input_port >= 0 && input_port < n_modes(), "invalid input port");
    const Unitary u = true_unitary(p);
    RealVector amp = u.matrix().col(input_port).cwiseAbs();
    apply_noise(amp);
    advance();
    const RealVector power = amp.array().square();
    OutputDistribution out;
    const double sum = power.sum();
    out.probabilities = sum > 0.0 ? RealVector(power / sum) : RealVector::Zero(power.size());
    const double t_in = transmission_from_db(truth_.input_loss_db[input_port]);
    double t = 0.0;
    for (int k = 0; k < n_modes(); ++k) t += power(k) * t_in * transmission_from_db(truth_.output_loss_db[k]);
    out.transmission = t;
    out.insertion_loss_db = t > 0.0 ? db_from_transmission(t) : std::numeric_limits<double>::infinity();
    return out;
  }

 private:
  ThermalModel current_thermal() const {
    if (!truth_.drift_enabled) return truth_.thermal;
    return truth_.thermal.drifted(clock_hours_, truth_.drift_rate_per_hour);
  }

  void check_powers(const PowerVector& p) const {
    validate_powers(truth_.thermal, p);
    detail::require((p.array() <= max_power()).all(), "heater power above device limit");
  }

  template <typename Derived>
  void apply_noise(Eigen::MatrixBase<Derived>& amp) {
    if (truth_.amplitude_noise <= 0.0) return;
    for (Eigen::Index j = 0; j < amp.cols(); ++j) {
      for (Eigen::Index i = 0; i < amp.rows(); ++i) {
        amp(i, j) = std::max(0.0, amp(i, j) * (1.0 + noise_.normal(0.0, truth_.amplitude_noise)));
      }
    }
  }

  void advance() {
    ++seq_;
    if (truth_.drift_enabled) clock_hours_ += truth_.drift_hours_per_measurement;
  }

  DeviceGroundTruth truth_;
  MeshLayout public_layout_;
  Rng noise_;
  std::int64_t seq_ = 0;
  double clock_hours_ = 0.0;
};

struct InsertionLossReport {
  std::vector<double> per_port_db;
  double average_db = 0.0;
};

/// Static (all heaters off) fiber-to-fiber loss per input port.
inline InsertionLossReport insertion_loss_report(const SimulatedDevice& dev) {
  const auto& truth = dev.ground_truth();
  const Unitary u = dev.true_unitary(PowerVector::Zero(dev.n_heaters()));
  InsertionLossReport r;
  for (int i = 0; i < dev.n_modes(); ++i) {
    const double t_in = transmission_from_db(truth.input_loss_db[i]);
    double t = 0.0;
    for (int k = 0; k < dev.n_modes(); ++k) {
      t += std::norm(u(k, i)) * t_in * transmission_from_db(truth.output_loss_db[k]);
    }
    r.per_port_db.push_back(db_from_transmission(t));
  }
  double sum = 0.0;
  for (double x : r.per_port_db) sum += x;
  r.average_db = sum / static_cast<double>(r.per_port_db.size());
  return r;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json truth_to_json(const DeviceGroundTruth& t) {
  return {{"layout", layout_to_json(t.layout)},
          {"thermal", thermal_to_json(t.thermal)},
          {"input_loss_db", t.input_loss_db},
          {"output_loss_db", t.output_loss_db},
          {"amplitude_noise", t.amplitude_noise},
          {"seed", t.seed},
          {"drift", {{"enabled", t.drift_enabled},
                     {"rate_per_hour", t.drift_rate_per_hour},
                     {"hours_per_measurement", t.drift_hours_per_measurement}}}};
}

inline DeviceGroundTruth truth_from_json(const nlohmann::json& j) {
  try {
    DeviceGroundTruth t{layout_from_json(j.at("layout")),
                        thermal_from_json(j.at("thermal")),
                        j.at("input_loss_db").get<std::vector<double>>(),
                        j.at("output_loss_db").get<std::vector<double>>(),
                        j.at("amplitude_noise").get<double>(),
                        j.at("seed").get<std::uint64_t>(),
                        j.at("drift").at("enabled").get<bool>(),
                        j.at("drift").at("rate_per_hour").get<double>(),
                        j.at("drift").at("hours_per_measurement").get<double>()};
    const int n = t.layout.n_modes();
    detail::require(t.thermal.n_heaters() == t.layout.heater_count(),
                    "device json: thermal model does not match layout");
    detail::require(static_cast<int>(t.input_loss_db.size()) == n &&
                        static_cast<int>(t.output_loss_db.size()) == n,
                    "device json: loss arrays need one entry per mode");
    detail::require(t.amplitude_noise >= 0.0 && t.amplitude_noise <= 0.2,
                    "device json: amplitude noise outside [0, 0.2]");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("device json: ") + e.what());
  }
}

}  // namespace upp
