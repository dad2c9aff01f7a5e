// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "upp/upp.hpp"

using namespace upp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = budget_s <= 0.0 || s < budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("[%s] %d %s: %s; %.2f s", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), s);
  if (budget_s > 0.0) std::printf(" (budget %.0f s)", budget_s);
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Outcome decomposition_round_trip() {
  double worst = 1.0;
  for (int n : {2, 4, 8, 16, 24}) {
    const MeshLayout layout = standard_layout(n);
    for (int k = 0; k < 100; ++k) {
      const Unitary target = haar_random_unitary(n, Rng::mix(1000 + n, k));
      const Unitary u = mesh_unitary(layout, clements_decompose(target, layout));
      worst = std::min(worst, amplitude_fidelity(target, RealMatrix(u.matrix().cwiseAbs())));
    }
  }
  return {worst >= 1.0 - 1e-9, fmt("min fidelity 1 - %.2e over 500 targets", 1.0 - worst)};
}

Outcome fringe_recovery() {
  int good = 0;
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double offset = rng.uniform(0.3, 0.6);
    const double amp = offset * rng.uniform(0.5, 1.0);
    FringeScan scan{0, {}};
    for (int k = 0; k < 30; ++k) {
      const double p = 60.0 * k / 29.0;
      const double clean = offset + amp * std::cos(2.0 * std::numbers::pi * p / 46.0 + phase);
      scan.samples.push_back({p, clean * (1.0 + 0.02 * rng.normal())});
    }
    try {
      if (std::abs(fit_fringe(scan).p2pi_mw / 46.0 - 1.0) <= 0.01) ++good;
    } catch (const NumericalError&) {
    }
  }
  return {good >= 95, std::to_string(good) + "/100 trials within 1% of 46 mW"};
}

Outcome linear_law() {
  const ThermalModel model = ThermalModel::uniform(1, 46.0, 90.0);
  const double phase = phases_from_powers(model, PowerVector::Constant(1, 57.0))(0) / std::numbers::pi;
  const bool anchor = std::abs(phase - 2.478) < 5e-4;
  const bool near = std::abs(phase / 2.5 - 1.0) <= 0.01;
  return {anchor && near, fmt("57 mW -> %.4f pi", phase) + fmt(" (%.2f%% from 2.5 pi)", 100.0 * std::abs(phase / 2.5 - 1.0))};
}

Outcome routing_extinction() {
  DeviceConfig cfg;
  cfg.n_modes = 24;
  cfg.coupler_imperfection = 0.02;
  cfg.amplitude_noise = 0.0;
  SimulatedDevice dev(synth_device(cfg));
  const auto r = optimize_routing(dev, 0, 23);
  return {r.extinction_db >= 24.0,
          fmt("port 1 -> 24 extinction %.2f dB", r.extinction_db) + " after " + std::to_string(r.passes) + " passes"};
}

Outcome desk_campaign() {
  DeviceConfig dc;
  dc.n_modes = 6;
  dc.seed = 5;
  dc.coupler_imperfection = 0.05;
  dc.crosstalk_strength = 0.05;
  dc.amplitude_noise = 0.01;
  SimulatedDevice dev(synth_device(dc));
  CampaignConfig cc;
  cc.records = 2000;
  cc.power_range = {0.0, 45.0};
  cc.seed = 5;
  const auto result = run_calibration(dev, cc);
  const auto targets = make_targets("haar", 6, 200, 0xacce97);
  const auto report = evaluate_campaign(result.model, dev, targets);
  const double mean = report.fidelity.mean;
  return {mean >= 0.995 && report.failures == 0,
          fmt("mean fidelity %.5f", mean) + fmt(" (min %.5f) over 200 targets", report.fidelity.min) +
              fmt(", validation rms %.4f", result.model.metadata.validation_rms)};
}

Outcome gradient_check() {
  double worst = 0.0;
  for (int instance = 0; instance < 20; ++instance) {
    DeviceConfig dc;
    dc.n_modes = 4;
    dc.seed = 500 + instance;
    SimulatedDevice dev(synth_device(dc));
    const auto records = generate_training_set(dev, 5, {0.0, 45.0}, 600 + instance);
    const auto& truth = dev.ground_truth();
    const Parameterization param(truth.layout, truth.thermal, {});
    FitProblem problem(param, records);
    const RealVector x = param.pack_reference();
    const RealMatrix analytic = problem.jacobian(x);
    RealMatrix numeric(analytic.rows(), analytic.cols());
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      RealVector xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      numeric.col(k) = (problem.residuals(xp) - problem.residuals(xm)) / (2.0 * h);
    }
    worst = std::max(worst, (analytic - numeric).norm() / analytic.norm());
  }
  return {worst <= 1e-5, fmt("max relative error %.2e over 20 instances", worst)};
}

Outcome power_accounting() {
  DeviceConfig dc;
  dc.n_modes = 24;
  dc.amplitude_noise = 0.0;
  SimulatedDevice dev(synth_device(dc));
  const CalibrationModel model{dev.ground_truth().layout, dev.ground_truth().thermal, FitMetadata{}};
  const auto report = evaluate_campaign(model, dev, make_targets("haar", 24, 50, 0x7077e2));
  const bool ok = report.failures == 0 && report.max_phase_residual <= 1e-9 &&
                  report.power_reference_mw == kPowerReferenceMw && report.rows.size() == 50;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "50 targets: power mean %.0f mW, min %.0f, max %.0f, %d/50 below the %.0f mW reference; "
                "max phase residual %.1e rad; mean fidelity %.5f",
                report.mean_power_mw, report.min_power_mw, report.max_power_mw, report.below_reference,
                report.power_reference_mw, report.max_phase_residual, report.fidelity.mean);
  return {ok, buf};
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + std::string(UPP_CLI_PATH) + "' " + args +
                          " >> stdout.txt 2>> stderr.txt";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".lock") continue;
    files[e.path().filename().string()] = read_text_file(e.path());
  }
  return files;
}

Outcome cli_determinism() {
  const std::vector<std::string> pipeline{
      "synth --modes 4 --seed 31 --device d.json",
      "characterize --device d.json --seed 31 --out c",
      "fringe --device d.json --seed 31 --out f",
      "route --device d.json --seed 31 --out r",
      "trainset --device d.json --seed 31 --records 200 --out t",
      "calibrate --device d.json --model m.json --seed 31 --records 600 --out cal",
      "program --model m.json --seed 31 --count 5 --out p",
      "evaluate --device d.json --model m.json --seed 31 --count 20 --out e"};
  std::vector<std::map<std::string, std::string>> runs;
  for (int pass = 0; pass < 2; ++pass) {
    const fs::path dir = fs::current_path() / "acceptance_work" / ("run" + std::to_string(pass));
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& step : pipeline) {
      const int code = run_cli(dir, step);
      if (code != 0) return {false, "'" + step + "' exited " + std::to_string(code)};
    }
    runs.push_back(snapshot(dir));
  }
  int differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) ++differing;
  }
  return {differing == 0 && runs[0].size() == runs[1].size(),
          std::to_string(runs[0].size()) + " files over " + std::to_string(pipeline.size()) + " commands, " +
              std::to_string(differing) + " differ"};
}

Outcome haar_statistics() {
  RealMatrix mean = RealMatrix::Zero(4, 4);
  const int samples = 10000;
  for (int k = 0; k < samples; ++k) mean += haar_random_unitary(4, Rng::mix(9, k)).matrix().cwiseAbs2();
  mean /= samples;
  const double dev = (mean.array() - 0.25).abs().maxCoeff();
  return {dev <= 0.01, fmt("max |E|U_ij|^2 - 1/4| = %.4f over 10000 samples", dev)};
}

}  // namespace

int main() {
  criterion(1, "decomposition round trip", 30, decomposition_round_trip);
  criterion(2, "fringe recovery", 1, fringe_recovery);
  criterion(3, "linear-law consistency", 0, linear_law);
  criterion(4, "routing extinction", 60, routing_extinction);
  criterion(5, "desk-scale calibration campaign", 600, desk_campaign);
  criterion(6, "gradient check", 10, gradient_check);
  criterion(7, "power accounting", 0, power_accounting);
  criterion(8, "cli determinism", 0, cli_determinism);
  criterion(9, "haar sampler statistics", 0, haar_statistics);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
