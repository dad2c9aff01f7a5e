// upp: command-line front end for the processor twin.
//
//   upp synth --modes 24 --seed 7
//   upp calibrate --device device.json --model model.json
//   upp evaluate --targets haar --count 2000
//
// Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O.

#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "upp/upp.hpp"

namespace {

using upp::RunConfig;
using json = nlohmann::json;

enum ExitCode { kOk = 0, kConfig = 2, kNumerical = 3, kIo = 4 };

// Flags are collected into a JSON overlay so they go through the same
// typing and range checks as config files.
class FlagSet {
 public:
  template <typename T>
  void add(CLI::App* app, const std::string& flag, const char* key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    bindings_.push_back([opt, value, key](json& j) {
      if (opt->count() > 0) j[key] = *value;
    });
  }

  json overlay() const {
    json j = json::object();
    for (const auto& b : bindings_) b(j);
    return j;
  }

 private:
  std::vector<std::function<void(json&)>> bindings_;
};

struct Command {
  CLI::App* app = nullptr;
  FlagSet flags;
};

void add_device_path(Command& c) { c.flags.add<std::string>(c.app, "--device", "device", "device file (JSON)"); }
void add_model_path(Command& c) { c.flags.add<std::string>(c.app, "--model", "model", "calibration model file (JSON)"); }
void add_out(Command& c) { c.flags.add<std::string>(c.app, "--out", "out", "prefix for report files"); }
void add_seed(Command& c) { c.flags.add<std::uint64_t>(c.app, "--seed", "seed", "RNG seed"); }

void add_synth_flags(Command& c) {
  auto* a = c.app;
  c.flags.add<int>(a, "--modes", "n_modes", "mode count (>= 2)");
  c.flags.add<double>(a, "--coupler-imperfection", "coupler_imperfection", "coupler spread d: t in [0.5-d, 0.5+d]");
  c.flags.add<double>(a, "--crosstalk", "crosstalk_strength", "crosstalk strength, fraction of 2pi/46 mW");
  c.flags.add<int>(a, "--crosstalk-window", "crosstalk_window", "crosstalk neighbours per heater (0: one per mode)");
  c.flags.add<double>(a, "--noise", "amplitude_noise", "relative amplitude noise sigma");
  c.flags.add<double>(a, "--p2pi-mean", "p2pi_mean_mw", "mean 2pi power, mW");
  c.flags.add<double>(a, "--p2pi-sigma", "p2pi_sigma_mw", "2pi power spread, mW");
  c.flags.add<bool>(a, "--random-static-phase", "random_static_phase", "draw static phases (true/false)");
  c.flags.add<double>(a, "--max-power", "max_power_mw", "per-heater power limit, mW");
  c.flags.add<double>(a, "--input-loss", "input_facet_loss_db", "input facet loss, dB");
  c.flags.add<double>(a, "--output-loss", "output_facet_loss_db", "output facet loss, dB");
  c.flags.add<std::vector<double>>(a, "--input-loss-ports", "input_loss_override_db", "per input port loss, dB");
  c.flags.add<std::vector<double>>(a, "--output-loss-ports", "output_loss_override_db", "per output port loss, dB");
  c.flags.add<bool>(a, "--drift", "drift_enabled", "enable 2pi-power drift (true/false)");
  c.flags.add<double>(a, "--drift-rate", "drift_rate_per_hour", "relative drift per hour");
  c.flags.add<double>(a, "--drift-hours", "drift_hours_per_measurement", "clock advance per measurement, hours");
}

void add_measure_flags(Command& c) {
  c.flags.add<int>(c.app, "--records", "records", "training records");
  c.flags.add<double>(c.app, "--power-lo", "power_lo_mw", "lowest random power, mW");
  c.flags.add<double>(c.app, "--power-hi", "power_hi_mw", "highest random power, mW");
}

void add_scan_flags(Command& c) {
  c.flags.add<int>(c.app, "--samples", "fringe_samples", "points per fringe scan");
  c.flags.add<double>(c.app, "--scan-max", "fringe_max_mw", "fringe scan range, mW");
}

void add_port_flags(Command& c) {
  c.flags.add<int>(c.app, "--input", "input_port", "input port");
  c.flags.add<int>(c.app, "--output", "output_port", "output port (-1: last)");
}

void add_target_flags(Command& c) {
  c.flags.add<std::string>(c.app, "--targets", "targets", "haar | permutation | phase-screen | file");
  c.flags.add<std::string>(c.app, "--targets-file", "targets_file", "target list (JSON) for --targets file");
  c.flags.add<int>(c.app, "--count", "count", "number of generated targets");
  c.flags.add<bool>(c.app, "--compensate-couplers", "compensate_couplers", "retune phases for fitted couplers (true/false)");
}

// ---------------------------------------------------------------------------

upp::SimulatedDevice load_device(const RunConfig& cfg) {
  return upp::SimulatedDevice(upp::device_from_json(upp::read_json_file(cfg.device)), cfg.seed);
}

upp::CalibrationModel load_model(const RunConfig& cfg) { return upp::model_from_json(upp::read_json_file(cfg.model)); }

int output_port(const RunConfig& cfg, const upp::SimulatedDevice& dev) {
  const int port = cfg.output_port < 0 ? dev.n_modes() - 1 : cfg.output_port;
  upp::detail::require(port < dev.n_modes(), "output port out of range for this device");
  upp::detail::require(cfg.input_port < dev.n_modes(), "input port out of range for this device");
  return port;
}

std::vector<upp::Unitary> load_targets(const RunConfig& cfg, int n) {
  std::vector<upp::Unitary> targets =
      cfg.targets == "file" ? upp::targets_from_json(upp::read_json_file(cfg.targets_file))
                            : upp::make_targets(cfg.targets, n, cfg.count, upp::Rng::mix(cfg.seed, 7));
  for (const auto& t : targets) {
    upp::detail::require(t.size() == n, "target size does not match the device");
  }
  return targets;
}

std::string fmt(double x) { return upp::detail::format_double(x); }

int cmd_synth(const RunConfig& cfg) {
  const upp::DeviceGroundTruth truth = upp::synth_device(cfg.device_config());
  upp::FileLock lock(cfg.device);
  upp::write_json_file(cfg.device, upp::device_to_json(truth));
  const auto& l = truth.layout;
  std::printf("%d MZIs, %d couplers, %d heaters\n", l.node_count(), l.coupler_count(), l.heater_count());
  return kOk;
}

int cmd_characterize(const RunConfig& cfg) {
  upp::SimulatedDevice dev = load_device(cfg);
  const auto il = upp::insertion_loss_report(dev);
  std::string csv = "port,insertion_loss_db\n";
  for (std::size_t i = 0; i < il.per_port_db.size(); ++i) csv += std::to_string(i) + "," + fmt(il.per_port_db[i]) + "\n";
  csv += "average," + fmt(il.average_db) + "\n";
  upp::write_text_file(cfg.out + "_insertion_loss.csv", csv);

  const int n = dev.n_modes();
  std::string dist = "input";
  for (int k = 0; k < n; ++k) dist += ",out_" + std::to_string(k);
  dist += "\n";
  const upp::PowerVector zero = upp::PowerVector::Zero(dev.n_heaters());
  for (int i = 0; i < n; ++i) {
    const auto d = dev.measure_output_distribution(i, zero);
    dist += std::to_string(i);
    for (int k = 0; k < n; ++k) dist += "," + fmt(d.probabilities(k));
    dist += "\n";
  }
  upp::write_text_file(cfg.out + "_static.csv", dist);
  std::printf("average insertion loss %.2f dB over %d ports\n", il.average_db, n);
  return kOk;
}

int cmd_fringe(const RunConfig& cfg) {
  upp::SimulatedDevice dev = load_device(cfg);
  const upp::PowerVector zero = upp::PowerVector::Zero(dev.n_heaters());
  if (cfg.heater >= 0) {
    upp::detail::require(cfg.heater < dev.n_heaters(), "heater out of range for this device");
    const int out = output_port(cfg, dev);
    const auto scan = upp::scan_fringe(dev, cfg.heater, cfg.input_port, out, zero, cfg.fringe_max_mw, cfg.fringe_samples);
    std::string csv = "power_mw,intensity\n";
    for (const auto& s : scan.samples) csv += fmt(s.power_mw) + "," + fmt(s.intensity) + "\n";
    upp::write_text_file(cfg.out + "_fringe.csv", csv);
    const auto fit = upp::fit_fringe(scan);
    upp::write_json_file(cfg.out + "_fringe.json", {{"heater", cfg.heater},
                                                    {"input_port", cfg.input_port},
                                                    {"output_port", out},
                                                    {"p2pi_mw", fit.p2pi_mw},
                                                    {"phase_offset_rad", fit.phase_offset},
                                                    {"visibility", fit.visibility},
                                                    {"residual_rms", fit.residual_rms}});
    std::printf("heater %d: 2pi power %.3f mW, visibility %.3f\n", cfg.heater, fit.p2pi_mw, fit.visibility);
    return kOk;
  }
  const auto ch = upp::characterize_heaters(dev, zero, cfg.fringe_max_mw, cfg.fringe_samples);
  std::string csv = "heater,p2pi_mw,visibility,residual_rms,measured\n";
  int measured = 0;
  for (int h = 0; h < dev.n_heaters(); ++h) {
    const auto& f = ch.fits[h];
    csv += std::to_string(h) + "," + fmt(ch.p2pi_mw(h)) + "," + fmt(f.visibility) + "," + fmt(f.residual_rms) + "," +
           (ch.measured[h] ? "1" : "0") + "\n";
    measured += ch.measured[h] ? 1 : 0;
  }
  upp::write_text_file(cfg.out + "_fringes.csv", csv);
  std::printf("%d of %d heaters show a usable fringe\n", measured, dev.n_heaters());
  return kOk;
}

int cmd_route(const RunConfig& cfg) {
  upp::SimulatedDevice dev = load_device(cfg);
  const int out = output_port(cfg, dev);
  upp::RoutingOptions ro;
  ro.samples = cfg.fringe_samples;
  ro.scan_max_mw = cfg.fringe_max_mw;
  const auto r = upp::optimize_routing(dev, cfg.input_port, out, ro);
  upp::write_json_file(cfg.out + "_route.json",
                       {{"input_port", cfg.input_port},
                        {"output_port", out},
                        {"extinction_db", r.extinction_db},
                        {"target_probability", r.target_probability},
                        {"passes", r.passes},
                        {"converged", r.converged},
                        {"route_nodes", r.route_nodes},
                        {"distribution", std::vector<double>(r.distribution.begin(), r.distribution.end())},
                        {"powers_mw", std::vector<double>(r.powers.begin(), r.powers.end())}});
  std::printf("route %d -> %d: extinction ratio %.2f dB after %d passes%s\n", cfg.input_port, out, r.extinction_db,
              r.passes, r.converged ? "" : " (pass cap reached)");
  return kOk;
}

int cmd_trainset(const RunConfig& cfg) {
  upp::SimulatedDevice dev = load_device(cfg);
  const auto records = upp::generate_training_set(dev, cfg.records, {cfg.power_lo_mw, cfg.power_hi_mw},
                                                  upp::Rng::mix(cfg.seed, 1));
  const std::string path = cfg.measurements.empty() ? cfg.out + "_trainset.csv" : cfg.measurements;
  upp::write_text_file(path, upp::measurements_to_csv(records, dev.n_modes(), dev.n_heaters()));
  std::printf("%d records, %d heaters each -> %s\n", cfg.records, dev.n_heaters(), path.c_str());
  return kOk;
}

int cmd_calibrate(const RunConfig& cfg) {
  const json device_file = upp::read_json_file(cfg.device);
  upp::SimulatedDevice dev(upp::device_from_json(device_file), cfg.seed);
  upp::CampaignConfig campaign = cfg.campaign_config();
  std::optional<upp::CalibrationModel> model;
  if (!cfg.measurements.empty()) {
    const auto layout = upp::device_public_layout(device_file);
    const auto records = upp::measurements_from_csv(upp::read_text_file(cfg.measurements), layout.n_modes(),
                                                    layout.heater_count());
    upp::FitOptions fit = campaign.fit;
    if (fit.crosstalk_window <= 0) fit.crosstalk_window = dev.crosstalk_window();
    fit.seed = upp::Rng::mix(cfg.seed, 2);
    fit.max_power_mw = dev.max_power();
    model = upp::fit_model(layout, records, fit);
  } else {
    auto result = upp::run_calibration(dev, campaign);
    if (result.routing) {
      std::printf("routing 0 -> %d: extinction ratio %.2f dB\n", dev.n_modes() - 1, result.routing->extinction_db);
    }
    model = std::move(result.model);
  }
  {
    upp::FileLock lock(cfg.model);
    upp::write_json_file(cfg.model, upp::model_to_json(*model));
  }
  std::string log = "iteration,loss\n";
  const auto& curve = model->metadata.loss_curve;
  for (std::size_t i = 0; i < curve.size(); ++i) log += std::to_string(i) + "," + fmt(curve[i]) + "\n";
  upp::write_text_file(cfg.out + "_fit_log.csv", log);
  const auto& md = model->metadata;
  std::printf("model: %d offsets, %d ratios, %zu crosstalk terms, %d p2pi values\n", model->thermal.n_heaters(),
              model->layout.coupler_count(), model->thermal.crosstalk().size(), model->thermal.n_heaters());
  std::printf("fit: %s after %d iterations, train rms %.3g, validation rms %.3g\n", md.status.c_str(), md.iterations,
              md.train_rms, md.validation_rms);
  return kOk;
}

int cmd_program(const RunConfig& cfg) {
  const upp::CalibrationModel model = load_model(cfg);
  const auto targets = load_targets(cfg, model.layout.n_modes());
  const upp::Programmer programmer(model, cfg.program_options());
  const int heaters = model.layout.heater_count();
  std::string csv = "target_id";
  for (int h = 0; h < heaters; ++h) csv += ",P_" + std::to_string(h);
  csv += ",total_power_mw\n";
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const upp::PowerVector p = programmer.program(targets[k]);
    csv += std::to_string(k);
    for (int h = 0; h < heaters; ++h) csv += "," + fmt(p(h));
    csv += "," + fmt(upp::total_power(p)) + "\n";
  }
  upp::write_text_file(cfg.out + "_program.csv", csv);
  std::printf("programmed %zu targets -> %s_program.csv\n", targets.size(), cfg.out.c_str());
  return kOk;
}

int cmd_evaluate(const RunConfig& cfg) {
  upp::SimulatedDevice dev = load_device(cfg);
  const upp::CalibrationModel model = load_model(cfg);
  if (model.layout.topology_hash() != dev.public_layout().topology_hash()) {
    throw upp::ConfigError("model and device layouts differ (layout hash mismatch)");
  }
  const auto targets = load_targets(cfg, dev.n_modes());
  const auto report = upp::evaluate_campaign(model, dev, targets, cfg.program_options());
  upp::write_text_file(cfg.out + "_campaign.csv", upp::campaign_to_csv(report));
  upp::write_json_file(cfg.out + "_summary.json",
                       upp::campaign_summary_json(report, model.layout.topology_hash(), cfg.targets));
  std::printf("%zu targets (%s): mean amplitude fidelity %.5f (reference %.3f), min %.5f, failures %d\n",
              report.rows.size(), cfg.targets.c_str(), report.fidelity.mean, upp::kReferenceFidelity,
              report.fidelity.min, report.failures);
  std::printf("total power: mean %.1f mW, max %.1f mW (reference %.0f mW)\n", report.mean_power_mw,
              report.max_power_mw, report.power_reference_mw);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Digital twin and calibration pipeline for a rectangular MZI mesh processor"};
  app.require_subcommand(1);
  std::string config_path;
  std::string dump_path;
  app.add_option("--config", config_path, "JSON run configuration (flags override it)");
  app.add_option("--dump-config", dump_path, "write the effective configuration here");

  std::vector<std::pair<Command, std::function<int(const RunConfig&)>>> commands;
  auto make = [&](const char* name, const char* help, std::function<int(const RunConfig&)> fn) -> Command& {
    commands.push_back({Command{app.add_subcommand(name, help), {}}, std::move(fn)});
    return commands.back().first;
  };
  commands.reserve(8);

  {
    auto& c = make("synth", "create a device file", cmd_synth);
    add_device_path(c);
    add_seed(c);
    add_synth_flags(c);
  }
  {
    auto& c = make("characterize", "insertion loss and static transformation reports", cmd_characterize);
    add_device_path(c);
    add_seed(c);
    add_out(c);
  }
  {
    auto& c = make("fringe", "fringe scan of one heater, or of every heater", cmd_fringe);
    add_device_path(c);
    add_seed(c);
    add_out(c);
    add_scan_flags(c);
    add_port_flags(c);
    c.flags.add<int>(c.app, "--heater", "heater", "heater index (-1: all)");
  }
  {
    auto& c = make("route", "optimize routing between two ports", cmd_route);
    add_device_path(c);
    add_seed(c);
    add_out(c);
    add_scan_flags(c);
    add_port_flags(c);
  }
  {
    auto& c = make("trainset", "random-power measurement campaign to CSV", cmd_trainset);
    add_device_path(c);
    add_seed(c);
    add_out(c);
    add_measure_flags(c);
    c.flags.add<std::string>(c.app, "--measurements", "measurements", "output CSV");
  }
  {
    auto& c = make("calibrate", "fringe scans, routing, training set and model fit", cmd_calibrate);
    add_device_path(c);
    add_model_path(c);
    add_seed(c);
    add_out(c);
    add_measure_flags(c);
    add_scan_flags(c);
    c.flags.add<std::string>(c.app, "--measurements", "measurements", "fit these records instead of measuring");
    c.flags.add<bool>(c.app, "--fringe-scans", "fringe_scans", "start 2pi powers from fringe scans (true/false)");
    c.flags.add<bool>(c.app, "--route", "route", "run routing optimization (true/false)");
    c.flags.add<int>(c.app, "--max-iterations", "max_iterations", "fit iteration cap");
    c.flags.add<double>(c.app, "--tolerance", "tolerance", "relative loss decrease to stop");
    c.flags.add<double>(c.app, "--validation-fraction", "validation_fraction", "held-out record fraction");
    c.flags.add<int>(c.app, "--minibatch", "minibatch", "records per iteration (0: all)");
    c.flags.add<int>(c.app, "--offset-sweeps", "offset_sweeps", "offset grid sweeps before descent");
    c.flags.add<int>(c.app, "--crosstalk-window", "crosstalk_window", "fitted crosstalk neighbours (0: device)");
  }
  {
    auto& c = make("program", "heater powers for target unitaries", cmd_program);
    add_model_path(c);
    add_seed(c);
    add_out(c);
    add_target_flags(c);
  }
  {
    auto& c = make("evaluate", "program targets, measure and score", cmd_evaluate);
    add_device_path(c);
    add_model_path(c);
    add_seed(c);
    add_out(c);
    add_target_flags(c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    for (auto& [cmd, fn] : commands) {
      if (!cmd.app->parsed()) continue;
      RunConfig cfg;
      if (!config_path.empty()) cfg = upp::config_from_json(upp::read_json_file(config_path));
      cfg = upp::config_from_json(cmd.flags.overlay(), cfg);
      if (!dump_path.empty()) upp::write_json_file(dump_path, upp::config_to_json(cfg));
      return fn(cfg);
    }
    return kConfig;
  } catch (const upp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const upp::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const upp::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  }
}
