#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "upp/unitary.hpp"

namespace upp {

/// Reporting ceiling for extinction ratios when the leakage underflows.
inline constexpr double kExtinctionCeilingDb = 60.0;

namespace detail {

inline RealMatrix normalize_columns(const RealMatrix& a, const char* who) {
  RealMatrix out = a;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    const double norm = a.col(j).norm();
    if (!(norm > 0.0)) throw ConfigError(std::string(who) + ": all-zero column");
    out.col(j) /= norm;
  }
  return out;
}

}  // namespace detail

/// Overlap of columnwise-normalized amplitude patterns,
///   F = (1/N) Σ_ij T_ij M_ij,
/// equal to 1 exactly when the normalized amplitudes agree.
inline double amplitude_fidelity(const RealMatrix& target, const RealMatrix& measured) {
  detail::require(target.rows() == measured.rows() && target.cols() == measured.cols(),
                  "amplitude_fidelity: shape mismatch");
  detail::require(target.size() > 0, "amplitude_fidelity: empty matrices");
  detail::require((target.array() >= 0.0).all() && (measured.array() >= 0.0).all(),
                  "amplitude_fidelity: amplitudes must be nonnegative");
  const RealMatrix t = detail::normalize_columns(target, "amplitude_fidelity");
  const RealMatrix m = detail::normalize_columns(measured, "amplitude_fidelity");
  const double f = t.cwiseProduct(m).sum() / static_cast<double>(target.cols());
  return std::clamp(f, 0.0, 1.0);
}

inline double amplitude_fidelity(const Unitary& target, const RealMatrix& measured) {
  return amplitude_fidelity(target.amplitudes(), measured);
}

/// 10 log10(p_target / max_{k≠target} p_k), capped at kExtinctionCeilingDb.
inline double extinction_ratio_db(std::span<const double> distribution, int target_port) {
  detail::require(!distribution.empty(), "extinction_ratio_db: empty distribution");
  detail::require(target_port >= 0 && target_port < static_cast<int>(distribution.size()),
                  "extinction_ratio_db: target port out of range");
  double worst = 0.0;
  for (std::size_t k = 0; k < distribution.size(); ++k) {
    detail::require(distribution[k] >= 0.0, "extinction_ratio_db: negative power");
    if (static_cast<int>(k) != target_port) worst = std::max(worst, distribution[k]);
  }
  const double p = distribution[target_port];
  if (distribution.size() == 1 || worst <= 0.0) return kExtinctionCeilingDb;
  if (p <= 0.0) return -kExtinctionCeilingDb;
  return std::clamp(10.0 * std::log10(p / worst), -kExtinctionCeilingDb, kExtinctionCeilingDb);
}

inline double extinction_ratio_db(const RealVector& distribution, int target_port) {
  return extinction_ratio_db(std::span<const double>(distribution.data(), distribution.size()),
                             target_port);
}

/// Loss in dB of a linear power transmission (positive for t < 1).
inline double db_from_transmission(double t) {
  detail::require(t > 0.0 && std::isfinite(t), "db_from_transmission: transmission must be > 0");
  return -10.0 * std::log10(t);
}

inline double transmission_from_db(double db) {
  detail::require(std::isfinite(db), "transmission_from_db: non-finite dB");
  return std::pow(10.0, -db / 10.0);
}

struct FidelityReport {
  std::vector<double> fidelities;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  double stddev = 0.0;
};

inline FidelityReport summarize_fidelities(std::vector<double> fidelities) {
  FidelityReport r;
  r.fidelities = std::move(fidelities);
  if (r.fidelities.empty()) return r;
  for (double f : r.fidelities) {
    detail::require(f >= 0.0 && f <= 1.0, "FidelityReport: fidelity outside [0, 1]");
  }
  const auto n = static_cast<double>(r.fidelities.size());
  double sum = 0.0;
  for (double f : r.fidelities) sum += f;
  r.mean = sum / n;
  auto [lo, hi] = std::minmax_element(r.fidelities.begin(), r.fidelities.end());
  r.min = *lo;
  r.max = *hi;
  double var = 0.0;
  for (double f : r.fidelities) var += (f - r.mean) * (f - r.mean);
  r.stddev = r.fidelities.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return r;
}

}  // namespace upp
