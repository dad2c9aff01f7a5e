#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "upp/device.hpp"
#include "upp/jacobian.hpp"

namespace upp {

/// Which parameter families are free during a fit.
struct ParameterGroups {
  bool theta0 = true;
  bool couplers = true;
  bool crosstalk = true;
  bool p2pi = true;
};

/// Maps a (layout couplers, thermal model) pair to a flat parameter vector
///   [theta0 | couplers | crosstalk | p2pi]
/// keeping only the enabled groups. Disabled groups are frozen at the
/// reference values.
class Parameterization {
 public:
  Parameterization(MeshLayout reference_layout, ThermalModel reference_thermal, ParameterGroups groups)
      : layout_(std::move(reference_layout)), thermal_(std::move(reference_thermal)), groups_(groups) {
    detail::require(thermal_.n_heaters() == layout_.heater_count(),
                    "Parameterization: thermal model does not match layout");
    int offset = 0;
    auto place = [&offset](bool on, int count) {
      const int at = on ? offset : -1;
      if (on) offset += count;
      return at;
    };
    theta0_at_ = place(groups.theta0, heaters());
    coupler_at_ = place(groups.couplers, couplers());
    xtalk_at_ = place(groups.crosstalk, xtalk_count());
    p2pi_at_ = place(groups.p2pi, heaters());
    size_ = offset;
  }

  int size() const noexcept { return size_; }
  int heaters() const noexcept { return layout_.heater_count(); }
  int couplers() const noexcept { return layout_.coupler_count(); }
  int xtalk_count() const noexcept { return static_cast<int>(thermal_.crosstalk().size()); }
  const ParameterGroups& groups() const noexcept { return groups_; }
  const MeshLayout& reference_layout() const noexcept { return layout_; }
  const ThermalModel& reference_thermal() const noexcept { return thermal_; }

  int theta0_index(int h) const { return theta0_at_ < 0 ? -1 : theta0_at_ + h; }
  int coupler_index(int c) const { return coupler_at_ < 0 ? -1 : coupler_at_ + c; }
  int xtalk_index(int t) const { return xtalk_at_ < 0 ? -1 : xtalk_at_ + t; }
  int p2pi_index(int h) const { return p2pi_at_ < 0 ? -1 : p2pi_at_ + h; }

  RealVector pack(const MeshLayout& layout, const ThermalModel& thermal) const {
    RealVector x(size_);
    if (theta0_at_ >= 0) x.segment(theta0_at_, heaters()) = thermal.theta0();
    if (coupler_at_ >= 0) x.segment(coupler_at_, couplers()) = layout.couplers();
    if (xtalk_at_ >= 0) {
      const auto c = thermal.crosstalk_coefficients();
      x.segment(xtalk_at_, xtalk_count()) = Eigen::Map<const RealVector>(c.data(), xtalk_count());
    }
    if (p2pi_at_ >= 0) x.segment(p2pi_at_, heaters()) = thermal.p2pi();
    return x;
  }

  RealVector pack_reference() const { return pack(layout_, thermal_); }

  /// Clamps into the physical domain: 0 < t < 1, p2pi > 0, crosstalk weaker
  /// than self-heating.
  RealVector project(RealVector x) const {
    if (coupler_at_ >= 0) {
      auto t = x.segment(coupler_at_, couplers());
      t = t.cwiseMax(kCouplerMargin).cwiseMin(1.0 - kCouplerMargin);
    }
    if (p2pi_at_ >= 0) {
      auto p = x.segment(p2pi_at_, heaters());
      p = p.cwiseMax(kMinP2pi).cwiseMin(kMaxP2pi);
    }
    if (xtalk_at_ >= 0) {
      const auto& terms = thermal_.crosstalk();
      for (int k = 0; k < xtalk_count(); ++k) {
        const double p2pi_col = p2pi_at_ >= 0 ? x(p2pi_at_ + terms[k].col) : thermal_.p2pi()(terms[k].col);
        const double bound = 0.999 * kTwoPi / p2pi_col;
        x(xtalk_at_ + k) = std::clamp(x(xtalk_at_ + k), -bound, bound);
      }
    }
    return x;
  }

  MeshLayout layout(const RealVector& x) const {
    if (coupler_at_ < 0) return layout_;
    return layout_.with_couplers(x.segment(coupler_at_, couplers()));
  }

  ThermalModel thermal(const RealVector& x) const {
    RealVector theta0 = theta0_at_ >= 0 ? RealVector(x.segment(theta0_at_, heaters())) : thermal_.theta0();
    RealVector p2pi = p2pi_at_ >= 0 ? RealVector(x.segment(p2pi_at_, heaters())) : thermal_.p2pi();
    std::vector<double> c = thermal_.crosstalk_coefficients();
    if (xtalk_at_ >= 0) {
      for (int k = 0; k < xtalk_count(); ++k) c[k] = x(xtalk_at_ + k);
    }
    return ThermalModel(std::move(theta0), std::move(p2pi), thermal_.window(), std::move(c),
                        thermal_.max_power());
  }

  static constexpr double kCouplerMargin = 1e-3;
  static constexpr double kMinP2pi = 1.0;
  static constexpr double kMaxP2pi = 1e4;

 private:
  MeshLayout layout_;
  ThermalModel thermal_;
  ParameterGroups groups_;
  int theta0_at_ = -1, coupler_at_ = -1, xtalk_at_ = -1, p2pi_at_ = -1;
  int size_ = 0;
};

/// Normal equations JᵀJ, Jᵀr and ½-free loss Σr² over a set of records.
struct NormalEquations {
  RealMatrix jtj;
  RealVector jtr;
  double loss = 0.0;
  std::int64_t residual_count = 0;
};

namespace detail {

inline constexpr int kReductionChunks = 8;

// Runs fn(chunk) for every chunk, spread over the available hardware
// threads. Callers reduce per-chunk results in chunk order, so results do
// not depend on the thread count.
inline void for_each_chunk(int chunks, const std::function<void(int)>& fn) {
  const int threads = std::max(1, std::min<int>(chunks, static_cast<int>(std::thread::hardware_concurrency())));
  if (threads == 1) {
    for (int c = 0; c < chunks; ++c) fn(c);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int c = t; c < chunks; c += threads) fn(c);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Least-squares objective
///   L = Σ_records Σ_ij ( |U_model(P)|_ij − A_ij )²
/// with an analytic Jacobian obtained by the chain rule through the heater
/// phases: d theta_h / d theta0_h = 1, d theta_h / d p2pi_h = −2π P_h / p2pi_h²,
/// d theta_h / d c_hj = P_j.
class FitProblem {
 public:
  FitProblem(Parameterization param, std::span<const MeasurementRecord> records, bool intensity = false)
      : param_(std::move(param)), records_(records), intensity_(intensity) {
    const int n = param_.reference_layout().n_modes();
    for (const auto& r : records_) {
      detail::require(r.powers.size() == param_.heaters(), "fit: record power length does not match layout");
      detail::require(r.amplitudes.rows() == n && r.amplitudes.cols() == n,
                      "fit: record amplitude shape does not match layout");
    }
  }

  const Parameterization& parameterization() const noexcept { return param_; }
  std::span<const MeasurementRecord> records() const noexcept { return records_; }
  int residuals_per_record() const {
    const int n = param_.reference_layout().n_modes();
    return n * n;
  }

  std::vector<int> all_indices() const {
    std::vector<int> idx(records_.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }

  RealVector record_residual(const MeshLayout& layout, const ThermalModel& thermal, int r) const {
    const auto& rec = records_[r];
    const ComplexMatrix u = detail::mesh_matrix(layout, phases_from_powers(thermal, rec.powers));
    const int n = layout.n_modes();
    RealVector res(n * n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        const double model = intensity_ ? std::norm(u(i, j)) : std::abs(u(i, j));
        const double meas = intensity_ ? rec.amplitudes(i, j) * rec.amplitudes(i, j) : rec.amplitudes(i, j);
        res(i + n * j) = model - meas;
      }
    }
    return res;
  }

  double loss(const RealVector& x, const std::vector<int>& indices) const {
    const MeshLayout layout = param_.layout(x);
    const ThermalModel thermal = param_.thermal(x);
    std::vector<double> partial(detail::kReductionChunks, 0.0);
    detail::for_each_chunk(detail::kReductionChunks, [&](int c) {
      double s = 0.0;
      for (std::size_t k = c; k < indices.size(); k += detail::kReductionChunks) {
        s += record_residual(layout, thermal, indices[k]).squaredNorm();
      }
      partial[c] = s;
    });
    double total = 0.0;
    for (double s : partial) total += s;
    return total;
  }

  RealVector residuals(const RealVector& x) const {
    const MeshLayout layout = param_.layout(x);
    const ThermalModel thermal = param_.thermal(x);
    const int m = residuals_per_record();
    RealVector out(m * static_cast<Eigen::Index>(records_.size()));
    for (int r = 0; r < static_cast<int>(records_.size()); ++r) {
      out.segment(static_cast<Eigen::Index>(r) * m, m) = record_residual(layout, thermal, r);
    }
    return out;
  }

  /// Dense Jacobian of residuals(x); meant for small instances and checks.
  RealMatrix jacobian(const RealVector& x) const {
    const MeshLayout layout = param_.layout(x);
    const ThermalModel thermal = param_.thermal(x);
    const int m = residuals_per_record();
    RealMatrix jac = RealMatrix::Zero(m * static_cast<Eigen::Index>(records_.size()), param_.size());
    for (int r = 0; r < static_cast<int>(records_.size()); ++r) {
      const auto aj = record_jacobian(layout, thermal, r);
      auto block = jac.middleRows(static_cast<Eigen::Index>(r) * m, m);
      for_each_column(records_[r].powers, thermal, [&](int param, int base, bool coupler, double scale) {
        block.col(param) += scale * (coupler ? aj.d_coupler.col(base) : aj.d_phase.col(base));
      });
    }
    return jac;
  }

  /// JᵀJ and Jᵀr accumulated record by record from the heater-level Gram
  /// matrix, without forming J.
  NormalEquations normal_equations(const RealVector& x, const std::vector<int>& indices) const {
    const MeshLayout layout = param_.layout(x);
    const ThermalModel thermal = param_.thermal(x);
    const int p = param_.size();
    std::vector<NormalEquations> partial(detail::kReductionChunks);
    detail::for_each_chunk(detail::kReductionChunks, [&](int c) {
      NormalEquations ne{RealMatrix::Zero(p, p), RealVector::Zero(p), 0.0, 0};
      std::vector<int> param_idx, base_idx;
      std::vector<double> scales;
      for (std::size_t k = c; k < indices.size(); k += detail::kReductionChunks) {
        const int r = indices[k];
        const auto aj = record_jacobian(layout, thermal, r);
        const RealVector res = residual_from(aj.u, records_[r]);
        // Base columns: heaters then couplers.
        RealMatrix base(res.size(), aj.d_phase.cols() + aj.d_coupler.cols());
        base << aj.d_phase, aj.d_coupler;
        const RealMatrix gram = base.transpose() * base;
        const RealVector gr = base.transpose() * res;
        param_idx.clear();
        base_idx.clear();
        scales.clear();
        const int heater_cols = static_cast<int>(aj.d_phase.cols());
        for_each_column(records_[r].powers, thermal, [&](int param, int b, bool coupler, double scale) {
          param_idx.push_back(param);
          base_idx.push_back(coupler ? heater_cols + b : b);
          scales.push_back(scale);
        });
        const int q = static_cast<int>(param_idx.size());
        for (int a = 0; a < q; ++a) {
          const double sa = scales[a];
          ne.jtr(param_idx[a]) += sa * gr(base_idx[a]);
          for (int b = 0; b < q; ++b) {
            ne.jtj(param_idx[a], param_idx[b]) += sa * scales[b] * gram(base_idx[a], base_idx[b]);
          }
        }
        ne.loss += res.squaredNorm();
        ne.residual_count += res.size();
      }
      partial[c] = std::move(ne);
    });
    NormalEquations total{RealMatrix::Zero(p, p), RealVector::Zero(p), 0.0, 0};
    for (auto& ne : partial) {
      total.jtj += ne.jtj;
      total.jtr += ne.jtr;
      total.loss += ne.loss;
      total.residual_count += ne.residual_count;
    }
    return total;
  }

 private:
  AmplitudeJacobian record_jacobian(const MeshLayout& layout, const ThermalModel& thermal, int r) const {
    return amplitude_jacobian(layout, phases_from_powers(thermal, records_[r].powers),
                              param_.groups().couplers, intensity_);
  }

  RealVector residual_from(const ComplexMatrix& u, const MeasurementRecord& rec) const {
    const Eigen::Index n = u.rows();
    RealVector res(n * n);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double model = intensity_ ? std::norm(u(i, j)) : std::abs(u(i, j));
        const double meas = intensity_ ? rec.amplitudes(i, j) * rec.amplitudes(i, j) : rec.amplitudes(i, j);
        res(i + n * j) = model - meas;
      }
    }
    return res;
  }

  // Calls fn(parameter index, base column, is_coupler, chain-rule scale)
  // for every free parameter.
  template <typename Fn>
  void for_each_column(const PowerVector& powers, const ThermalModel& thermal, Fn&& fn) const {
    const int heaters = param_.heaters();
    if (param_.groups().theta0) {
      for (int h = 0; h < heaters; ++h) fn(param_.theta0_index(h), h, false, 1.0);
    }
    if (param_.groups().couplers) {
      for (int c = 0; c < param_.couplers(); ++c) fn(param_.coupler_index(c), c, true, 1.0);
    }
    if (param_.groups().crosstalk) {
      const auto& terms = thermal.crosstalk();
      for (int k = 0; k < static_cast<int>(terms.size()); ++k) {
        fn(param_.xtalk_index(k), terms[k].row, false, powers(terms[k].col));
      }
    }
    if (param_.groups().p2pi) {
      for (int h = 0; h < heaters; ++h) {
        const double p2pi = thermal.p2pi()(h);
        fn(param_.p2pi_index(h), h, false, -kTwoPi * powers(h) / (p2pi * p2pi));
      }
    }
  }

  Parameterization param_;
  std::span<const MeasurementRecord> records_;
  bool intensity_;
};

// ---------------------------------------------------------------------------
// Gauge
//
// Measured amplitudes do not see input or output phases. A phase vector
// alpha on the inputs propagates through each MZI as
//   T(phi, theta) diag(e^{i a}, e^{i b}) = e^{i b} T(phi + a − b, theta),
// so shifting the static offsets of the external heaters by G·alpha (and
// the output screen arbitrarily) leaves every |U(P)| unchanged.

/// Offset shift produced by input phases `alpha` (one per mode).
inline RealVector input_gauge_shift(const MeshLayout& layout, const RealVector& alpha) {
  detail::require(alpha.size() == layout.n_modes(), "input_gauge_shift: need one phase per mode");
  RealVector shift = RealVector::Zero(layout.heater_count());
  RealVector mode_phase = alpha;
  for (const auto& node : layout.nodes()) {
    const double a = mode_phase(node.top_mode);
    const double b = mode_phase(node.top_mode + 1);
    shift(node.phi_heater) += a - b;
    mode_phase(node.top_mode) = b;
  }
  return shift;
}

/// Heaters whose response is invisible in amplitude data: the output screen
/// and the external heaters of the first layer (pure input phases).
inline std::vector<bool> unobservable_heaters(const MeshLayout& layout) {
  std::vector<bool> out(layout.heater_count(), false);
  for (const auto& node : layout.nodes()) {
    if (node.layer == 0) out[node.phi_heater] = true;
  }
  if (layout.has_output_phase_screen()) {
    for (int m = 0; m < layout.n_modes(); ++m) out[layout.screen_heater(m)] = true;
  }
  return out;
}

/// Representative of theta0 modulo the input/output gauge: external offsets
/// of the first two layers and the output screen are zeroed, the rest is
/// shifted consistently and wrapped into [0, 2π).
inline RealVector canonical_gauge(const MeshLayout& layout, const RealVector& theta0) {
  detail::require(theta0.size() == layout.heater_count(), "canonical_gauge: length mismatch");
  const int n = layout.n_modes();
  std::vector<int> pinned;
  for (const auto& node : layout.nodes()) {
    if (node.layer <= 1) pinned.push_back(node.phi_heater);
  }
  RealMatrix g(layout.heater_count(), n);
  for (int m = 0; m < n; ++m) g.col(m) = input_gauge_shift(layout, RealVector::Unit(n, m));
  RealMatrix gp(pinned.size(), n);
  RealVector rhs(pinned.size());
  for (std::size_t k = 0; k < pinned.size(); ++k) {
    gp.row(k) = g.row(pinned[k]);
    rhs(k) = -theta0(pinned[k]);
  }
  const RealVector alpha = gp.completeOrthogonalDecomposition().solve(rhs);
  RealVector out = theta0 + g * alpha;
  for (int h : pinned) out(h) = 0.0;
  if (layout.has_output_phase_screen()) {
    for (int m = 0; m < n; ++m) out(layout.screen_heater(m)) = 0.0;
  }
  for (Eigen::Index h = 0; h < out.size(); ++h) out(h) = canonical_phase(out(h));
  return out;
}

// ---------------------------------------------------------------------------
// Offset estimation by lock-in detection
//
// With every heater swept at random, the component of the measured
// intensities oscillating as e^{i 2π P_h / p2pi_h} carries e^{i theta0_h}
// times a coefficient that does not depend on the other offsets (their
// contributions average out). The coefficient is obtained by projecting
// a zero-offset model evaluated at the same powers.

struct OffsetEstimate {
  RealVector theta0;
  std::vector<double> coherence;  // |<data, model>| / (|data| |model|) per heater, in [0, 1]
};

inline OffsetEstimate estimate_offsets(const MeshLayout& layout, std::span<const MeasurementRecord> records,
                                       const RealVector& p2pi) {
  detail::require(!records.empty(), "estimate_offsets: no records");
  const int n = layout.n_modes();
  const int heaters = layout.heater_count();
  detail::require(p2pi.size() == heaters, "estimate_offsets: p2pi length mismatch");
  const auto count = static_cast<Eigen::Index>(records.size());
  const int m = n * n;

  RealMatrix data(m, count);
  RealMatrix model(m, count);
  Eigen::MatrixXcd carrier(count, heaters);
  for (Eigen::Index r = 0; r < count; ++r) {
    const auto& rec = records[r];
    detail::require(rec.powers.size() == heaters, "estimate_offsets: record power length mismatch");
    const PhaseVector phases = (kTwoPi * rec.powers.array() / p2pi.array()).matrix();
    const ComplexMatrix u = detail::mesh_matrix(layout, phases);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        data(i + n * j, r) = rec.amplitudes(i, j) * rec.amplitudes(i, j);
        model(i + n * j, r) = std::norm(u(i, j));
      }
    }
    for (int h = 0; h < heaters; ++h) carrier(r, h) = std::polar(1.0, -phases(h));
  }
  data.colwise() -= data.rowwise().mean();
  model.colwise() -= model.rowwise().mean();

  const Eigen::MatrixXcd c_data = data.cast<Complex>() * carrier;   // m × heaters
  const Eigen::MatrixXcd c_model = model.cast<Complex>() * carrier;
  OffsetEstimate out{RealVector::Zero(heaters), std::vector<double>(heaters, 0.0)};
  for (int h = 0; h < heaters; ++h) {
    const Complex overlap = c_model.col(h).dot(c_data.col(h));  // Σ conj(model) data
    const double norm = c_data.col(h).norm() * c_model.col(h).norm();
    if (!(norm > 0.0)) continue;
    out.theta0(h) = canonical_phase(std::arg(overlap));
    out.coherence[h] = std::abs(overlap) / norm;
  }
  return out;
}

/// Coordinate sweeps over heater offsets. Every amplitude is affine in
/// e^{i theta_h}, so two mesh evaluations per record give the exact loss
/// profile of heater h, which is scanned on a grid and the best shift kept.
inline RealVector refine_offsets(const MeshLayout& layout, const ThermalModel& thermal,
                                 std::span<const MeasurementRecord> records, int sweeps, int grid = 32) {
  detail::require(layout.heater_count() == thermal.n_heaters(), "refine_offsets: thermal model does not match layout");
  detail::require(grid >= 4, "refine_offsets: grid must have at least 4 points");
  const int n = layout.n_modes();
  const int heaters = layout.heater_count();
  RealVector theta0 = thermal.theta0();
  std::vector<PhaseVector> phases;
  phases.reserve(records.size());
  for (const auto& rec : records) phases.push_back(phases_from_powers(thermal, rec.powers));
  std::vector<Complex> rotor(static_cast<std::size_t>(grid));
  for (int g = 0; g < grid; ++g) rotor[g] = std::polar(1.0, kTwoPi * g / grid);

  for (int sweep = 0; sweep < sweeps; ++sweep) {
    bool moved = false;
    for (int h = 0; h < heaters; ++h) {
      std::vector<double> profile(static_cast<std::size_t>(grid), 0.0);
      for (std::size_t r = 0; r < records.size(); ++r) {
        PhaseVector ph = phases[r];
        const ComplexMatrix ua = detail::mesh_matrix(layout, ph);
        ph(h) += std::numbers::pi;
        const ComplexMatrix ub = detail::mesh_matrix(layout, ph);
        const ComplexMatrix mid = 0.5 * (ua + ub);
        const ComplexMatrix swing = 0.5 * (ua - ub);
        const RealMatrix& a = records[r].amplitudes;
        for (int g = 0; g < grid; ++g) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) {
            for (int i = 0; i < n; ++i) {
              const double d = std::abs(mid(i, j) + swing(i, j) * rotor[g]) - a(i, j);
              acc += d * d;
            }
          }
          profile[g] += acc;
        }
      }
      const int best = static_cast<int>(std::min_element(profile.begin(), profile.end()) - profile.begin());
      if (best == 0 || !(profile[best] < profile[0])) continue;
      const double shift = kTwoPi * best / grid;
      theta0(h) = canonical_phase(theta0(h) + shift);
      for (auto& ph : phases) ph(h) += shift;
      moved = true;
    }
    if (!moved) break;
  }
  return theta0;
}

// ---------------------------------------------------------------------------
// Model fit

enum class OffsetInit { LockIn, Zero };

struct FitOptions {
  ParameterGroups groups;
  OffsetInit offset_init = OffsetInit::LockIn;  // ignored when initial_thermal is given
  int offset_sweeps = 3;            // grid refinement passes over theta0 before the descent
  int sweep_records = 400;          // training records used by the sweeps
  int max_iterations = 100;
  double tolerance = 1e-9;          // stop when the relative loss decrease falls below this
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;           // record split, restarts, minibatches
  int minibatch = 0;                // records per iteration; 0 uses the full training set
  int restarts = 0;                 // extra random theta0 starts, best kept
  int restart_iterations = 15;      // iteration budget of each exploratory start
  double min_data_ratio = 3.0;      // residuals per free parameter
  bool intensity_residuals = false;
  std::optional<MeshLayout> initial_layout;    // default: ideal couplers
  std::optional<ThermalModel> initial_thermal; // default: estimated offsets, no crosstalk, initial_p2pi
  std::optional<RealVector> initial_p2pi;      // e.g. from fringe scans; default nominal_p2pi_mw
  int crosstalk_window = 0;         // used when initial_thermal is absent; 0: one per mode
  double nominal_p2pi_mw = kNominalP2piMw;
  double max_power_mw = 90.0;
};

struct FitMetadata {
  std::vector<double> loss_curve;  // training loss after each accepted step
  int train_records = 0;
  int validation_records = 0;
  double train_rms = 0.0;
  double validation_rms = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string status;
  std::uint64_t seed = 0;
  int parameter_count = 0;
};

struct CalibrationModel {
  MeshLayout layout;      // fitted couplers
  ThermalModel thermal;   // fitted offsets, p2pi, crosstalk
  FitMetadata metadata;
};

namespace detail {

struct LmResult {
  RealVector x;
  double loss = 0.0;
  int iterations = 0;
  bool converged = false;
  std::string status;
  std::vector<double> curve;
};

// Levenberg-Marquardt with Marquardt scaling. Only steps that lower the
// loss are accepted.
inline LmResult levenberg_marquardt(const FitProblem& problem, RealVector x, const std::vector<int>& train,
                                    int max_iterations, double tolerance, int minibatch, Rng& rng) {
  const auto& param = problem.parameterization();
  LmResult out;
  double lambda = 1e-3;
  int rejected_in_a_row = 0;
  int rising = 0;
  const bool batched = minibatch > 0 && minibatch < static_cast<int>(train.size());
  std::vector<int> batch = train;
  double loss = problem.loss(x, train);
  if (!std::isfinite(loss)) throw NumericalError("fit: non-finite initial loss");
  out.curve.push_back(loss);
  for (int it = 0; it < max_iterations; ++it) {
    out.iterations = it + 1;
    if (batched) {
      for (int k = 0; k < minibatch; ++k) {
        const auto j = k + static_cast<int>(rng.next_u64() % (train.size() - k));
        std::swap(batch[k], batch[j]);
      }
      batch.assign(batch.begin(), batch.begin() + minibatch);
    }
    const NormalEquations ne = problem.normal_equations(x, batched ? batch : train);
    const double batch_loss = ne.loss;
    const RealVector diag = ne.jtj.diagonal();
    const double floor = 1e-12 * std::max(1.0, diag.maxCoeff());
    bool accepted = false;
    while (!accepted) {
      RealMatrix a = ne.jtj;
      for (Eigen::Index k = 0; k < a.rows(); ++k) a(k, k) += lambda * (diag(k) + floor) + floor;
      const RealVector step = a.ldlt().solve(-ne.jtr);
      const RealVector trial = param.project(x + step);
      const double trial_loss = step.allFinite() ? problem.loss(trial, batched ? batch : train)
                                                 : std::numeric_limits<double>::infinity();
      if (trial_loss < batch_loss) {
        const double decrease = (batch_loss - trial_loss) / std::max(batch_loss, 1e-300);
        x = trial;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        rejected_in_a_row = 0;
        const double full = batched ? problem.loss(x, train) : trial_loss;
        out.curve.push_back(full);
        rising = full > loss ? rising + 1 : 0;
        loss = full;
        if (rising >= 10) {
          std::string trace;
          for (std::size_t k = out.curve.size() - 11; k < out.curve.size(); ++k) {
            trace += (trace.empty() ? "" : " ") + std::to_string(out.curve[k]);
          }
          throw NumericalError("fit diverged: loss rose over 10 consecutive accepted steps: " + trace);
        }
        if (!batched && decrease < tolerance) {
          out.converged = true;
          out.status = "converged";
        }
      } else {
        lambda *= 4.0;
        if (++rejected_in_a_row >= 10 || lambda > 1e12) {
          out.converged = true;
          out.status = "stalled: no descent step found";
          break;
        }
      }
    }
    if (batched) batch = train;
    if (out.converged) break;
  }
  if (out.status.empty()) out.status = "iteration cap reached";
  out.x = std::move(x);
  out.loss = loss;
  return out;
}

inline std::vector<int> shuffled(int count, Rng& rng) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = count - 1; k > 0; --k) {
    const auto j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(k + 1));
    std::swap(idx[k], idx[j]);
  }
  return idx;
}

}  // namespace detail

/// Fits offsets, coupler ratios, crosstalk and 2π powers to amplitude-only
/// measurements by damped Gauss-Newton. A fraction of the records is held
/// out and only used to report validation RMS.
inline CalibrationModel fit_model(const MeshLayout& layout, std::span<const MeasurementRecord> records,
                                  const FitOptions& options = {}) {
  if (records.empty()) throw ConfigError("fit_model: no training records");
  detail::require(options.validation_fraction >= 0.0 && options.validation_fraction < 1.0,
                  "fit_model: validation fraction must be in [0, 1)");
  detail::require(options.max_iterations >= 1, "fit_model: max_iterations must be >= 1");

  const MeshLayout init_layout = options.initial_layout.value_or(layout.ideal());
  detail::require(init_layout.topology_hash() == layout.topology_hash(),
                  "fit_model: initial layout topology does not match");
  Rng rng(options.seed);
  const int total = static_cast<int>(records.size());
  const auto order = detail::shuffled(total, rng);
  const int n_val = static_cast<int>(std::floor(options.validation_fraction * total));
  std::vector<int> validation(order.begin(), order.begin() + n_val);
  std::vector<int> train(order.begin() + n_val, order.end());
  std::sort(validation.begin(), validation.end());
  std::sort(train.begin(), train.end());
  if (train.empty()) throw ConfigError("fit_model: no training records after the validation split");

  const ThermalModel init_thermal = [&] {
    if (options.initial_thermal) {
      detail::require(options.initial_thermal->n_heaters() == layout.heater_count(),
                      "fit_model: initial thermal model does not match layout");
      return *options.initial_thermal;
    }
    const int heaters = layout.heater_count();
    const int window =
        std::min(options.crosstalk_window > 0 ? options.crosstalk_window : layout.n_modes(), heaters - 1);
    RealVector p2pi = options.initial_p2pi.value_or(RealVector::Constant(heaters, options.nominal_p2pi_mw));
    detail::require(p2pi.size() == heaters, "fit_model: initial p2pi length mismatch");
    RealVector theta0 = RealVector::Zero(heaters);
    if (options.offset_init == OffsetInit::LockIn) {
      std::vector<MeasurementRecord> subset;
      subset.reserve(train.size());
      for (int r : train) subset.push_back(records[r]);
      theta0 = estimate_offsets(init_layout, subset, p2pi).theta0;
    }
    return ThermalModel(std::move(theta0), std::move(p2pi), window,
                        std::vector<double>(static_cast<std::size_t>(heaters * window), 0.0),
                        options.max_power_mw);
  }();

  const Parameterization param(init_layout, init_thermal, options.groups);
  FitProblem problem(param, records, options.intensity_residuals);


  const double residual_count = static_cast<double>(train.size()) * problem.residuals_per_record();
  if (residual_count < options.min_data_ratio * param.size()) {
    throw ConfigError("fit_model: insufficient data: " + std::to_string(static_cast<long long>(residual_count)) +
                      " residuals for " + std::to_string(param.size()) + " parameters (need " +
                      std::to_string(options.min_data_ratio) + "x)");
  }

  RealVector x0 = param.project(param.pack_reference());
  if (options.groups.theta0 && options.offset_sweeps > 0) {
    std::vector<MeasurementRecord> subset;
    const int take = std::min<int>(static_cast<int>(train.size()), std::max(options.sweep_records, 1));
    subset.reserve(static_cast<std::size_t>(take));
    for (int k = 0; k < take; ++k) subset.push_back(records[train[k]]);
    const RealVector theta0 = refine_offsets(param.layout(x0), param.thermal(x0), subset, options.offset_sweeps);
    for (int h = 0; h < param.heaters(); ++h) x0(param.theta0_index(h)) = theta0(h);
  }

  // Exploratory starts with random offsets on a short budget; the best
  // one seeds the full run.
  if (options.restarts > 0 && options.groups.theta0) {
    double best = problem.loss(x0, train);
    RealVector best_x = x0;
    {
      auto probe = detail::levenberg_marquardt(problem, x0, train, options.restart_iterations,
                                               options.tolerance, options.minibatch, rng);
      if (probe.loss < best) {
        best = probe.loss;
        best_x = probe.x;
      }
    }
    for (int s = 0; s < options.restarts; ++s) {
      RealVector x = x0;
      for (int h = 0; h < param.heaters(); ++h) x(param.theta0_index(h)) = rng.uniform(0.0, kTwoPi);
      auto probe = detail::levenberg_marquardt(problem, x, train, options.restart_iterations,
                                               options.tolerance, options.minibatch, rng);
      if (probe.loss < best) {
        best = probe.loss;
        best_x = probe.x;
      }
    }
    x0 = best_x;
  }

  auto lm = detail::levenberg_marquardt(problem, x0, train, options.max_iterations, options.tolerance,
                                        options.minibatch, rng);

  RealVector x = lm.x;
  if (options.groups.theta0) {
    for (int h = 0; h < param.heaters(); ++h) x(param.theta0_index(h)) = canonical_phase(x(param.theta0_index(h)));
  }
  FitMetadata meta;
  meta.loss_curve = std::move(lm.curve);
  meta.train_records = static_cast<int>(train.size());
  meta.validation_records = static_cast<int>(validation.size());
  meta.train_rms = std::sqrt(lm.loss / residual_count);
  meta.validation_rms =
      validation.empty()
          ? 0.0
          : std::sqrt(problem.loss(x, validation) / (static_cast<double>(validation.size()) * problem.residuals_per_record()));
  meta.iterations = lm.iterations;
  meta.converged = lm.converged;
  meta.status = lm.status;
  meta.seed = options.seed;
  meta.parameter_count = param.size();
  return CalibrationModel{param.layout(x), param.thermal(x), std::move(meta)};
}

// ---------------------------------------------------------------------------
// Calibration model file

inline constexpr int kModelSchemaVersion = 1;

inline nlohmann::json model_to_json(const CalibrationModel& m) {
  const auto& md = m.metadata;
  return {{"schema_version", kModelSchemaVersion},
          {"kind", "upp-calibration-model"},
          {"layout_hash", m.layout.topology_hash()},
          {"layout", layout_to_json(m.layout)},
          {"thermal", thermal_to_json(m.thermal)},
          {"fit", {{"loss_curve", md.loss_curve},
                   {"train_records", md.train_records},
                   {"validation_records", md.validation_records},
                   {"train_rms", md.train_rms},
                   {"validation_rms", md.validation_rms},
                   {"iterations", md.iterations},
                   {"converged", md.converged},
                   {"status", md.status},
                   {"seed", md.seed},
                   {"parameter_count", md.parameter_count},
                   {"rng", std::string(Rng::kAlgorithm)}}}};
}

inline CalibrationModel model_from_json(const nlohmann::json& j) {
  try {
    detail::require(j.at("schema_version").get<int>() == kModelSchemaVersion,
                    "model json: unsupported schema version");
    MeshLayout layout = layout_from_json(j.at("layout"));
    detail::require(j.at("layout_hash").get<std::string>() == layout.topology_hash(),
                    "model json: layout hash mismatch");
    ThermalModel thermal = thermal_from_json(j.at("thermal"));
    detail::require(thermal.n_heaters() == layout.heater_count(), "model json: thermal does not match layout");
    const auto& f = j.at("fit");
    FitMetadata md;
    md.loss_curve = f.at("loss_curve").get<std::vector<double>>();
    md.train_records = f.at("train_records").get<int>();
    md.validation_records = f.at("validation_records").get<int>();
    md.train_rms = f.at("train_rms").get<double>();
    md.validation_rms = f.at("validation_rms").get<double>();
    md.iterations = f.at("iterations").get<int>();
    md.converged = f.at("converged").get<bool>();
    md.status = f.at("status").get<std::string>();
    md.seed = f.at("seed").get<std::uint64_t>();
    md.parameter_count = f.at("parameter_count").get<int>();
    return CalibrationModel{std::move(layout), std::move(thermal), std::move(md)};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model json: ") + e.what());
  }
}

}  // namespace upp
