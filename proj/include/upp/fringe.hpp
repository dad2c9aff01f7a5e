#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "upp/device.hpp"

namespace upp {

struct FringeSample {
  double power_mw = 0.0;
  double intensity = 0.0;
};

/// Monitor-port intensity recorded while sweeping one heater.
struct FringeScan {
  int heater = 0;
  std::vector<FringeSample> samples;
};

/// I(P) = offset + amplitude · cos(2π P / p2pi + phase_offset), amplitude ≥ 0.
struct FringeFit {
  double p2pi_mw = 0.0;
  double phase_offset = 0.0;  // [0, 2π)
  double offset = 0.0;
  double amplitude = 0.0;
  double visibility = 0.0;    // amplitude / offset
  double residual_rms = 0.0;

  double intensity(double power_mw) const {
    return offset + amplitude * std::cos(kTwoPi * power_mw / p2pi_mw + phase_offset);
  }

  /// Smallest nonnegative power at which the fringe peaks.
  double peak_power() const { return p2pi_mw * canonical_phase(-phase_offset) / kTwoPi; }
};

inline constexpr double kMinFringeVisibility = 0.05;

namespace detail {

struct LinearFringe {
  double offset, a, b, sse;
};

// Best offset + a cos(ωP) + b sin(ωP) for a fixed angular frequency ω.
inline LinearFringe fit_linear_fringe(const std::vector<FringeSample>& s, double omega) {
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d aty = Eigen::Vector3d::Zero();
  for (const auto& x : s) {
    const Eigen::Vector3d row(1.0, std::cos(omega * x.power_mw), std::sin(omega * x.power_mw));
    ata += row * row.transpose();
    aty += row * x.intensity;
  }
  const Eigen::Vector3d c = ata.ldlt().solve(aty);
  double sse = 0.0;
  for (const auto& x : s) {
    const double r = c(0) + c(1) * std::cos(omega * x.power_mw) + c(2) * std::sin(omega * x.power_mw) -
                     x.intensity;
    sse += r * r;
  }
  return {c(0), c(1), c(2), sse};
}

}  // namespace detail

/// Least-squares cosine fit of a heater sweep.
///
/// The frequency is located by a grid search over the variable-projection
/// residual (offset and quadratures solved linearly at each frequency),
/// refined by golden section and finished with Gauss-Newton on all four
/// parameters.
inline FringeFit fit_fringe(const FringeScan& scan) {
  const auto& s = scan.samples;
  detail::require(s.size() >= 8, "fit_fringe: need at least 8 samples");
  double lo = s.front().power_mw;
  double hi = lo;
  for (const auto& x : s) {
    detail::require(std::isfinite(x.power_mw) && std::isfinite(x.intensity),
                    "fit_fringe: non-finite sample");
    detail::require(x.power_mw >= 0.0, "fit_fringe: negative power");
    lo = std::min(lo, x.power_mw);
    hi = std::max(hi, x.power_mw);
  }
  const double span = hi - lo;
  detail::require(span > 0.0, "fit_fringe: samples do not span any power range");

  // Frequencies in cycles per mW, from a period of 2·span up to Nyquist.
  const double f_lo = 0.5 / span;
  const double f_hi = std::max(f_lo * 2.0, 0.5 * static_cast<double>(s.size() - 1) / span);
  const double step = 0.05 / span;
  auto sse_at = [&](double f) { return detail::fit_linear_fringe(s, kTwoPi * f).sse; };

  double best_f = f_lo;
  double best_sse = sse_at(f_lo);
  for (double f = f_lo + step; f <= f_hi; f += step) {
    const double e = sse_at(f);
    if (e < best_sse) {
      best_sse = e;
      best_f = f;
    }
  }

  // Golden section on [best_f - step, best_f + step].
  {
    const double g = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = std::max(best_f - step, 0.5 * f_lo);
    double b = best_f + step;
    double c = b - g * (b - a);
    double d = a + g * (b - a);
    double fc = sse_at(c);
    double fd = sse_at(d);
    for (int it = 0; it < 200 && (b - a) > 1e-15 * b; ++it) {
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - g * (b - a);
        fc = sse_at(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + g * (b - a);
        fd = sse_at(d);
      }
    }
    best_f = 0.5 * (a + b);
  }

  // Gauss-Newton on (offset, a, b, ω).
  auto lin = detail::fit_linear_fringe(s, kTwoPi * best_f);
  Eigen::Vector4d p(lin.offset, lin.a, lin.b, kTwoPi * best_f);
  auto sse_of = [&s](const Eigen::Vector4d& q) {
    double e = 0.0;
    for (const auto& x : s) {
      const double r = q(0) + q(1) * std::cos(q(3) * x.power_mw) + q(2) * std::sin(q(3) * x.power_mw) -
                       x.intensity;
      e += r * r;
    }
    return e;
  };
  double sse = sse_of(p);
  for (int it = 0; it < 20; ++it) {
    Eigen::Matrix4d jtj = Eigen::Matrix4d::Zero();
    Eigen::Vector4d jtr = Eigen::Vector4d::Zero();
    for (const auto& x : s) {
      const double cw = std::cos(p(3) * x.power_mw);
      const double sw = std::sin(p(3) * x.power_mw);
      const double r = p(0) + p(1) * cw + p(2) * sw - x.intensity;
      const Eigen::Vector4d row(1.0, cw, sw, x.power_mw * (-p(1) * sw + p(2) * cw));
      jtj += row * row.transpose();
      jtr += row * r;
    }
    const Eigen::Vector4d delta = jtj.ldlt().solve(-jtr);
    if (!delta.allFinite()) break;
    const Eigen::Vector4d trial = p + delta;
    const double trial_sse = sse_of(trial);
    if (!(trial_sse < sse)) break;
    p = trial;
    sse = trial_sse;
  }

  FringeFit fit;
  fit.offset = p(0);
  fit.amplitude = std::hypot(p(1), p(2));
  fit.p2pi_mw = kTwoPi / p(3);
  // a cos + b sin = B cos(ωP + φ0) with a = B cos φ0, b = -B sin φ0
  fit.phase_offset = canonical_phase(std::atan2(-p(2), p(1)));
  fit.residual_rms = std::sqrt(sse / static_cast<double>(s.size()));
  fit.visibility = fit.offset > 0.0 ? fit.amplitude / fit.offset : 0.0;

  if (!(fit.visibility >= kMinFringeVisibility) || !(fit.amplitude > 0.0)) {
    throw NumericalError("fit_fringe: degenerate scan on heater " + std::to_string(scan.heater) +
                         " (visibility " + std::to_string(fit.visibility) + ")");
  }
  if (!(fit.p2pi_mw > 0.0) || fit.p2pi_mw > span * (1.0 + 1e-9)) {
    throw NumericalError("fit_fringe: period not bracketed by the scan on heater " +
                         std::to_string(scan.heater));
  }
  return fit;
}

/// Sweeps `heater` over `samples` evenly spaced powers in [0, max_power_mw]
/// with the other heaters held at `base`, recording the normalized power at
/// `output_port` for light injected at `input_port`.
inline FringeScan scan_fringe(SimulatedDevice& dev, int heater, int input_port, int output_port,
                              const PowerVector& base, double max_power_mw, int samples = 30) {
  detail::require(heater >= 0 && heater < dev.n_heaters(), "scan_fringe: heater out of range");
  detail::require(output_port >= 0 && output_port < dev.n_modes(), "scan_fringe: invalid output port");
  detail::require(samples >= 8, "scan_fringe: need at least 8 samples");
  detail::require(max_power_mw > 0.0 && max_power_mw <= dev.max_power(),
                  "scan_fringe: scan range exceeds device limit");
  FringeScan scan{heater, {}};
  PowerVector p = base;
  for (int k = 0; k < samples; ++k) {
    p(heater) = max_power_mw * k / (samples - 1);
    const auto out = dev.measure_output_distribution(input_port, p);
    scan.samples.push_back({p(heater), out.probabilities(output_port)});
  }
  return scan;
}

struct HeaterCharacterization {
  RealVector p2pi_mw;          // fitted where a fringe was found, nominal elsewhere
  std::vector<bool> measured;  // false: no usable fringe, nominal kept
  std::vector<FringeFit> fits;
};

/// Sweeps every heater from the base point and fits the fringe on the
/// output element that modulates most. Heaters without a usable fringe,
/// or with a period far from nominal, keep the nominal value.
inline HeaterCharacterization characterize_heaters(SimulatedDevice& dev, const PowerVector& base,
                                                   double max_power_mw, int samples = 30,
                                                   double nominal_p2pi_mw = kNominalP2piMw) {
  detail::require(base.size() == dev.n_heaters(), "characterize_heaters: base power length mismatch");
  detail::require(samples >= 8, "characterize_heaters: need at least 8 samples");
  detail::require(max_power_mw > 0.0 && max_power_mw <= dev.max_power(),
                  "characterize_heaters: scan range exceeds device limit");
  const int n = dev.n_modes();
  const int heaters = dev.n_heaters();
  HeaterCharacterization out{RealVector::Constant(heaters, nominal_p2pi_mw), std::vector<bool>(heaters, false),
                             std::vector<FringeFit>(static_cast<std::size_t>(heaters))};
  for (int h = 0; h < heaters; ++h) {
    PowerVector p = base;
    std::vector<double> powers(static_cast<std::size_t>(samples));
    RealMatrix intensity(n * n, samples);
    for (int k = 0; k < samples; ++k) {
      p(h) = max_power_mw * k / (samples - 1);
      powers[k] = p(h);
      const RealMatrix a = dev.measure_amplitudes(p).amplitudes;
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) intensity(i + n * j, k) = a(i, j) * a(i, j);
      }
    }
    Eigen::Index best = 0;
    (intensity.rowwise().maxCoeff() - intensity.rowwise().minCoeff()).maxCoeff(&best);
    FringeScan scan{h, {}};
    for (int k = 0; k < samples; ++k) scan.samples.push_back({powers[k], intensity(best, k)});
    try {
      const FringeFit fit = fit_fringe(scan);
      out.fits[h] = fit;
      if (fit.p2pi_mw > 0.5 * nominal_p2pi_mw && fit.p2pi_mw < 2.0 * nominal_p2pi_mw) {
        out.p2pi_mw(h) = fit.p2pi_mw;
        out.measured[h] = true;
      }
    } catch (const NumericalError&) {
    }
  }
  return out;
}

}  // namespace upp
