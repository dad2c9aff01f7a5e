#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "upp/fit.hpp"

namespace upp {

struct ProgramOptions {
  // Re-tune the MZI phases against the fitted (imperfect) couplers so the
  // amplitudes of the target are reproduced, starting from the ideal
  // decomposition.
  bool compensate_couplers = true;
  int compensation_iterations = 50;
};

/// Maps target unitaries to heater powers through a calibration model.
/// Holds the factorized thermal inverse, so programming many targets
/// reuses it.
class Programmer {
 public:
  explicit Programmer(CalibrationModel model, ProgramOptions options = {})
      : model_(std::move(model)), options_(options), ideal_(model_.layout.ideal()), inverse_(model_.thermal) {}

  const CalibrationModel& model() const noexcept { return model_; }

  /// Phases the fitted mesh needs to implement `target`.
  PhaseVector phases_for(const Unitary& target) const {
    detail::require(target.size() == model_.layout.n_modes(), "program_unitary: target size does not match layout");
    PhaseVector phases = clements_decompose(target, ideal_);
    if (options_.compensate_couplers && !model_.layout.has_ideal_couplers()) {
      phases = compensate(target, std::move(phases));
    }
    return phases;
  }

  PowerVector program(const Unitary& target) const { return inverse_.solve(phases_for(target)); }

  PowerVector powers_for(const PhaseVector& phases) const { return inverse_.solve(phases); }

  /// Largest |forward(powers) − phases| over heaters, wrapped to (−π, π].
  double phase_residual(const PhaseVector& phases, const PowerVector& powers) const {
    const PhaseVector achieved = phases_from_powers(model_.thermal, powers);
    double worst = 0.0;
    for (Eigen::Index h = 0; h < phases.size(); ++h) {
      worst = std::max(worst, std::abs(std::remainder(achieved(h) - phases(h), kTwoPi)));
    }
    return worst;
  }

 private:
  // Levenberg-Marquardt on the MZI phases minimizing ‖ |U(phases)| − |target| ‖².
  PhaseVector compensate(const Unitary& target, PhaseVector phases) const {
    const MeshLayout& layout = model_.layout;
    const int n = layout.n_modes();
    RealVector goal(n * n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) goal(i + n * j) = std::abs(target(i, j));
    }
    auto residual = [&](const PhaseVector& ph) {
      const ComplexMatrix u = detail::mesh_matrix(layout, ph);
      RealVector r(n * n);
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) r(i + n * j) = std::abs(u(i, j)) - goal(i + n * j);
      }
      return r;
    };
    // Screen heaters do not move amplitudes.
    const int free = 2 * layout.node_count();
    double lambda = 1e-3;
    double loss = residual(phases).squaredNorm();
    for (int it = 0; it < options_.compensation_iterations && loss > 1e-28; ++it) {
      const auto aj = amplitude_jacobian(layout, phases, false);
      const RealVector r = residual(phases);
      const RealMatrix j = aj.d_phase.leftCols(free);
      const RealMatrix jtj = j.transpose() * j;
      const RealVector jtr = j.transpose() * r;
      bool accepted = false;
      for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
        RealMatrix a = jtj;
        a.diagonal().array() += lambda * (jtj.diagonal().array() + 1e-12);
        const RealVector step = a.ldlt().solve(-jtr);
        PhaseVector trial = phases;
        trial.head(free) += step;
        const double trial_loss = residual(trial).squaredNorm();
        if (trial_loss < loss) {
          const double decrease = loss - trial_loss;
          phases = trial;
          loss = trial_loss;
          lambda = std::max(lambda / 3.0, 1e-12);
          accepted = true;
          if (decrease < 1e-14 * std::max(loss, 1e-300)) it = options_.compensation_iterations;
        } else {
          lambda *= 4.0;
        }
      }
      if (!accepted) break;
    }
    for (Eigen::Index h = 0; h < phases.size(); ++h) phases(h) = canonical_phase(phases(h));
    return phases;
  }

  CalibrationModel model_;
  ProgramOptions options_;
  MeshLayout ideal_;
  ThermalInverse inverse_;
};

inline PowerVector program_unitary(const CalibrationModel& model, const Unitary& target,
                                   const ProgramOptions& options = {}) {
  return Programmer(model, options).program(target);
}

// ---------------------------------------------------------------------------
// Evaluation campaign

inline constexpr double kPowerReferenceMw = 10000.0;

struct CampaignRow {
  int target_id = 0;
  double fidelity = std::numeric_limits<double>::quiet_NaN();
  double total_power_mw = std::numeric_limits<double>::quiet_NaN();
  double phase_residual = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct CampaignReport {
  std::vector<CampaignRow> rows;
  FidelityReport fidelity;
  double mean_power_mw = 0.0;
  double min_power_mw = 0.0;
  double max_power_mw = 0.0;
  double power_reference_mw = kPowerReferenceMw;
  int below_reference = 0;
  int failures = 0;
  double max_phase_residual = 0.0;
};

/// Programs each target through the model, measures it on the device and
/// scores amplitude fidelity and total dissipated power. Programming
/// failures are recorded per target.
inline CampaignReport evaluate_campaign(const CalibrationModel& model, SimulatedDevice& dev,
                                        const std::vector<Unitary>& targets, const ProgramOptions& options = {}) {
  detail::require(model.layout.topology_hash() == dev.public_layout().topology_hash(),
                  "evaluate_campaign: model and device layouts differ");
  const Programmer programmer(model, options);
  CampaignReport report;
  std::vector<double> fidelities;
  std::vector<double> powers;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    CampaignRow row;
    row.target_id = static_cast<int>(k);
    try {
      const PhaseVector phases = programmer.phases_for(targets[k]);
      const PowerVector p = programmer.powers_for(phases);
      row.phase_residual = programmer.phase_residual(phases, p);
      row.total_power_mw = total_power(p);
      const auto rec = dev.measure_amplitudes(p);
      row.fidelity = amplitude_fidelity(targets[k], rec.amplitudes);
      fidelities.push_back(row.fidelity);
      powers.push_back(row.total_power_mw);
      report.max_phase_residual = std::max(report.max_phase_residual, row.phase_residual);
    } catch (const InfeasiblePowerError&) {
      row.status = "infeasible";
      ++report.failures;
    } catch (const std::exception&) {
      row.status = "failed";
      ++report.failures;
    }
    report.rows.push_back(row);
  }
  report.fidelity = summarize_fidelities(std::move(fidelities));
  if (!powers.empty()) {
    double sum = 0.0;
    report.min_power_mw = powers.front();
    report.max_power_mw = powers.front();
    for (double p : powers) {
      sum += p;
      report.min_power_mw = std::min(report.min_power_mw, p);
      report.max_power_mw = std::max(report.max_power_mw, p);
      if (p < report.power_reference_mw) ++report.below_reference;
    }
    report.mean_power_mw = sum / static_cast<double>(powers.size());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Target sets

inline Unitary random_permutation_unitary(int n, std::uint64_t seed) {
  detail::require(n >= 1, "random_permutation_unitary: n must be >= 1");
  Rng rng(seed);
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = std::min(i, static_cast<int>(rng.uniform() * (i + 1)));
    std::swap(perm[i], perm[j]);
  }
  ComplexMatrix m = ComplexMatrix::Zero(n, n);
  for (int j = 0; j < n; ++j) m(perm[j], j) = 1.0;
  return Unitary(std::move(m));
}

inline Unitary random_phase_screen(int n, std::uint64_t seed) {
  detail::require(n >= 1, "random_phase_screen: n must be >= 1");
  Rng rng(seed);
  ComplexMatrix m = ComplexMatrix::Zero(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = std::polar(1.0, rng.uniform(0.0, kTwoPi));
  return Unitary(std::move(m));
}

/// `kind` is haar, permutation or phase-screen; target k uses its own
/// seed stream.
inline std::vector<Unitary> make_targets(const std::string& kind, int n, int count, std::uint64_t seed) {
  detail::require(count >= 1, "make_targets: count must be >= 1");
  std::vector<Unitary> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const std::uint64_t s = Rng::mix(seed, static_cast<std::uint64_t>(k));
    if (kind == "haar") {
      out.push_back(haar_random_unitary(n, s));
    } else if (kind == "permutation") {
      out.push_back(random_permutation_unitary(n, s));
    } else if (kind == "phase-screen") {
      out.push_back(random_phase_screen(n, s));
    } else {
      throw ConfigError("make_targets: unknown target kind '" + kind + "'");
    }
  }
  return out;
}

}  // namespace upp
