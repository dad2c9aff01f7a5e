#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "upp/mesh.hpp"

namespace upp {

/// Per-heater dissipated power in milliwatts.
using PowerVector = RealVector;

/// Phase induced on heater `row` per milliwatt dissipated on heater `col`.
struct CrosstalkTerm {
  int row = 0;
  int col = 0;
  double coeff = 0.0;  // rad / mW
};

/// The `window` heater indices nearest to `row` (excluding itself), shifted
/// inward at the ends of the index range so every row has exactly `window`
/// neighbours. Heaters are numbered along the mesh, so index neighbours are
/// physical neighbours.
inline std::vector<int> crosstalk_window(int n_heaters, int window, int row) {
  detail::require(window >= 0 && window <= n_heaters - 1,
                  "crosstalk window must be in [0, n_heaters - 1]");
  int lo = row - window / 2;
  lo = std::clamp(lo, 0, n_heaters - 1 - window);
  std::vector<int> cols;
  cols.reserve(window);
  for (int j = lo; static_cast<int>(cols.size()) < window; ++j) {
    if (j != row) cols.push_back(j);
  }
  return cols;
}

/// Linear power-to-phase law with static offsets and windowed crosstalk:
///   theta_i = theta0_i + 2π P_i / p2pi_i + Σ_{j≠i} c_ij P_j
class ThermalModel {
 public:
  ThermalModel(RealVector theta0, RealVector p2pi, int window, std::vector<double> coefficients,
               double max_power)
      : theta0_(std::move(theta0)), p2pi_(std::move(p2pi)), window_(window), max_power_(max_power) {
    const int n = n_heaters();
    detail::require(n >= 1, "ThermalModel: need at least one heater");
    detail::require(p2pi_.size() == n, "ThermalModel: p2pi length mismatch");
    detail::require(theta0_.allFinite() && p2pi_.allFinite(), "ThermalModel: non-finite parameter");
    detail::require((p2pi_.array() > 0.0).all(), "ThermalModel: p2pi must be positive");
    detail::require(max_power_ > 0.0, "ThermalModel: max_power must be positive");
    detail::require(static_cast<int>(coefficients.size()) == n * window,
                    "ThermalModel: crosstalk count must equal n_heaters * window");
    terms_.reserve(coefficients.size());
    std::size_t k = 0;
    for (int i = 0; i < n; ++i) {
      for (int j : crosstalk_window(n, window, i)) {
        const double c = coefficients[k++];
        detail::require(std::isfinite(c), "ThermalModel: non-finite crosstalk");
        detail::require(std::abs(c) <= kTwoPi / p2pi_(j) * (1.0 + 1e-12),
                        "ThermalModel: crosstalk stronger than self-heating");
        terms_.push_back({i, j, c});
      }
    }
  }

  /// No crosstalk, every heater with the same 2π power.
  static ThermalModel uniform(int n_heaters, double p2pi, double max_power) {
    return ThermalModel(RealVector::Zero(n_heaters), RealVector::Constant(n_heaters, p2pi), 0, {},
                        max_power);
  }

  int n_heaters() const noexcept { return static_cast<int>(theta0_.size()); }
  int window() const noexcept { return window_; }
  double max_power() const noexcept { return max_power_; }
  const RealVector& theta0() const noexcept { return theta0_; }
  const RealVector& p2pi() const noexcept { return p2pi_; }
  const std::vector<CrosstalkTerm>& crosstalk() const noexcept { return terms_; }

  std::vector<double> crosstalk_coefficients() const {
    std::vector<double> c;
    c.reserve(terms_.size());
    for (const auto& t : terms_) c.push_back(t.coeff);
    return c;
  }

  /// Dense d theta / d P.
  RealMatrix response_matrix() const {
    const int n = n_heaters();
    RealMatrix a = RealMatrix::Zero(n, n);
    for (int i = 0; i < n; ++i) a(i, i) = kTwoPi / p2pi_(i);
    for (const auto& t : terms_) a(t.row, t.col) += t.coeff;
    return a;
  }

  /// Resistance drift: p2pi grows by `rate_per_hour` (fractional) per hour.
  ThermalModel drifted(double hours, double rate_per_hour) const {
    ThermalModel out = *this;
    out.p2pi_ *= 1.0 + rate_per_hour * hours;
    return out;
  }

  ThermalModel with_theta0(RealVector theta0) const {
    return ThermalModel(std::move(theta0), p2pi_, window_, crosstalk_coefficients(), max_power_);
  }

 private:
  RealVector theta0_;
  RealVector p2pi_;
  int window_;
  std::vector<CrosstalkTerm> terms_;
  double max_power_;
};

inline void validate_powers(const ThermalModel& model, const PowerVector& p) {
  detail::require(p.size() == model.n_heaters(),
                  "power vector length " + std::to_string(p.size()) + " does not match heater count " +
                      std::to_string(model.n_heaters()));
  detail::require(p.allFinite(), "power vector has non-finite entries");
  detail::require((p.array() >= 0.0).all(), "negative heater power");
}

inline PhaseVector phases_from_powers(const ThermalModel& model, const PowerVector& p) {
  validate_powers(model, p);
  PhaseVector theta = model.theta0().array() + kTwoPi * p.array() / model.p2pi().array();
  for (const auto& t : model.crosstalk()) theta(t.row) += t.coeff * p(t.col);
  return theta;
}

inline double total_power(const PowerVector& p) { return p.sum(); }

/// Inverse of the power-to-phase law with 2π wrap selection.
///
/// The response matrix is factorized once, so one solver can program many
/// targets. Each heater starts at its smallest nonnegative phase increment;
/// heaters that come out negative are bumped by 2π and the system is solved
/// again, up to 4 × n_heaters rounds.
class ThermalInverse {
 public:
  explicit ThermalInverse(const ThermalModel& model)
      : model_(model), lu_(model.response_matrix()) {}

  const ThermalModel& model() const noexcept { return model_; }

  PowerVector solve(const PhaseVector& target) const {
    const int n = model_.n_heaters();
    detail::require(target.size() == n, "powers_for_phases: target length mismatch");
    detail::require(target.allFinite(), "powers_for_phases: non-finite target phase");
    RealVector rhs(n);
    for (int i = 0; i < n; ++i) rhs(i) = canonical_phase(target(i) - model_.theta0()(i));

    const int max_rounds = 4 * n;
    PowerVector p;
    for (int round = 0; round <= max_rounds; ++round) {
      p = lu_.solve(rhs);
      // Snap solver noise at zero.
      for (int i = 0; i < n; ++i) {
        if (p(i) < 0.0 && p(i) > -1e-12 * model_.p2pi()(i)) p(i) = 0.0;
      }
      bool any_negative = false;
      for (int i = 0; i < n; ++i) {
        if (p(i) < 0.0) {
          rhs(i) += kTwoPi;
          any_negative = true;
        }
      }
      if (!any_negative) break;
      if (round == max_rounds) {
        throw NumericalError("powers_for_phases: wrap iteration did not reach nonnegative powers");
      }
    }
    std::vector<int> over;
    for (int i = 0; i < n; ++i) {
      if (p(i) > model_.max_power()) over.push_back(i);
    }
    if (!over.empty()) {
      std::string list;
      for (std::size_t k = 0; k < over.size() && k < 16; ++k) {
        list += (k ? "," : "") + std::to_string(over[k]);
      }
      throw InfeasiblePowerError("powers_for_phases: power limit exceeded on " +
                                     std::to_string(over.size()) + " heater(s): " + list,
                                 std::move(over));
    }
    return p;
  }

 private:
  ThermalModel model_;
  Eigen::PartialPivLU<RealMatrix> lu_;
};

inline PowerVector powers_for_phases(const ThermalModel& model, const PhaseVector& target) {
  return ThermalInverse(model).solve(target);
}

// ---------------------------------------------------------------------------
// JSON: {"n_heaters", "theta0", "p2pi_mw", "xtalk": [[i, j, c], ...], "max_power_mw"}

inline nlohmann::json thermal_to_json(const ThermalModel& m) {
  nlohmann::json xtalk = nlohmann::json::array();
  for (const auto& t : m.crosstalk()) xtalk.push_back({t.row, t.col, t.coeff});
  return {{"n_heaters", m.n_heaters()},
          {"theta0", std::vector<double>(m.theta0().begin(), m.theta0().end())},
          {"p2pi_mw", std::vector<double>(m.p2pi().begin(), m.p2pi().end())},
          {"xtalk", std::move(xtalk)},
          {"max_power_mw", m.max_power()}};
}

inline ThermalModel thermal_from_json(const nlohmann::json& j) {
  try {
    const int n = j.at("n_heaters").get<int>();
    const auto theta0 = j.at("theta0").get<std::vector<double>>();
    const auto p2pi = j.at("p2pi_mw").get<std::vector<double>>();
    detail::require(n >= 1 && static_cast<int>(theta0.size()) == n &&
                        static_cast<int>(p2pi.size()) == n,
                    "thermal json: array lengths do not match n_heaters");
    const auto& xtalk = j.at("xtalk");
    detail::require(xtalk.size() % static_cast<std::size_t>(n) == 0,
                    "thermal json: crosstalk count is not a multiple of n_heaters");
    const int window = static_cast<int>(xtalk.size() / n);
    std::vector<double> coeffs;
    coeffs.reserve(xtalk.size());
    std::size_t k = 0;
    for (int i = 0; i < n; ++i) {
      for (int col : crosstalk_window(n, window, i)) {
        const auto& e = xtalk.at(k++);
        detail::require(e.at(0).get<int>() == i && e.at(1).get<int>() == col,
                        "thermal json: crosstalk entries do not follow the window structure");
        coeffs.push_back(e.at(2).get<double>());
      }
    }
    return ThermalModel(Eigen::Map<const RealVector>(theta0.data(), n),
                        Eigen::Map<const RealVector>(p2pi.data(), n), window, std::move(coeffs),
                        j.at("max_power_mw").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("thermal json: ") + e.what());
  }
}

}  // namespace upp
