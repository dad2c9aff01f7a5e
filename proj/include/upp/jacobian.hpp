#pragma once

#include <vector>

#include "upp/mesh.hpp"

namespace upp {

/// Transfer matrix of a mesh and the derivatives of its amplitudes.
///
/// Residuals are flattened column-major (index i + N j). Columns of
/// `d_phase` follow heater indices; columns of `d_coupler` follow coupler
/// indices. With `intensity` set the derivatives are of |U_ij|² instead.
struct AmplitudeJacobian {
  ComplexMatrix u;
  RealMatrix d_phase;    // N² × heaters
  RealMatrix d_coupler;  // N² × couplers (empty unless requested)
};

namespace detail {

// Real derivative of |u| (or |u|²) given the complex derivative du.
inline void amplitude_derivative(const ComplexMatrix& u, const ComplexMatrix& du, bool intensity,
                                 Eigen::Ref<RealVector> out) {
  const Eigen::Index n = u.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double re = (std::conj(u(i, j)) * du(i, j)).real();
      double v;
      if (intensity) {
        v = 2.0 * re;
      } else {
        const double mag = std::abs(u(i, j));
        v = mag > 1e-150 ? re / mag : 0.0;
      }
      out(i + n * j) = v;
    }
  }
}

}  // namespace detail

inline AmplitudeJacobian amplitude_jacobian(const MeshLayout& layout, const PhaseVector& phases,
                                            bool want_couplers, bool intensity = false) {
  detail::require_phase_length(layout, phases);
  const int n = layout.n_modes();
  const int nodes = layout.node_count();
  const auto& nd = layout.nodes();

  std::vector<Matrix2c> m(nodes);
  std::vector<ComplexMatrix> prefix(nodes + 1);
  prefix[0] = ComplexMatrix::Identity(n, n);
  for (int k = 0; k < nodes; ++k) {
    m[k] = mzi_transfer_2x2(phases(nd[k].phi_heater), phases(nd[k].theta_heater), nd[k].t1, nd[k].t2);
    prefix[k + 1] = prefix[k];
    detail::apply_rows(prefix[k + 1], nd[k].top_mode, m[k]);
  }

  ComplexMatrix suffix = ComplexMatrix::Identity(n, n);
  if (layout.has_output_phase_screen()) {
    for (int r = 0; r < n; ++r) suffix(r, r) = std::polar(1.0, phases(layout.screen_heater(r)));
  }

  AmplitudeJacobian out;
  out.u = suffix * prefix[nodes];
  out.d_phase = RealMatrix::Zero(n * n, layout.heater_count());
  if (want_couplers) out.d_coupler = RealMatrix::Zero(n * n, layout.coupler_count());

  const Complex i1(0.0, 1.0);
  ComplexMatrix du(n, n);
  auto emit = [&](const Eigen::Ref<const ComplexMatrix>& left, const Matrix2c& dm, int k,
                  Eigen::Ref<RealVector> column) {
    du.noalias() = (left * dm) * prefix[k].middleRows(nd[k].top_mode, 2);
    detail::amplitude_derivative(out.u, du, intensity, column);
  };

  for (int k = nodes - 1; k >= 0; --k) {
    const auto& node = nd[k];
    const ComplexMatrix left = suffix.middleCols(node.top_mode, 2);
    const double phi = phases(node.phi_heater);
    const double theta = phases(node.theta_heater);

    // M = C2 · P(theta) · C1 · P(phi)
    Matrix2c x = coupler_matrix(node.t1);
    x.col(0) *= std::polar(1.0, phi);
    const Matrix2c c2 = coupler_matrix(node.t2);

    Matrix2c d_theta = Matrix2c::Zero();
    d_theta.row(0) = x.row(0) * (i1 * std::polar(1.0, theta));
    emit(left, c2 * d_theta, k, out.d_phase.col(node.theta_heater));

    Matrix2c d_phi = Matrix2c::Zero();
    d_phi.col(0) = m[k].col(0) * i1;
    emit(left, d_phi, k, out.d_phase.col(node.phi_heater));

    if (want_couplers) {
      Matrix2c y = x;
      y.row(0) *= std::polar(1.0, theta);  // P(theta) C1 P(phi)
      emit(left, coupler_matrix_derivative(node.t2) * y, k, out.d_coupler.col(2 * k + 1));
      Matrix2c c1d = coupler_matrix_derivative(node.t1);
      c1d.col(0) *= std::polar(1.0, phi);
      c1d.row(0) *= std::polar(1.0, theta);
      emit(left, c2 * c1d, k, out.d_coupler.col(2 * k));
    }

    detail::apply_cols(suffix, node.top_mode, m[k]);
  }

  if (layout.has_output_phase_screen()) {
    for (int r = 0; r < n; ++r) {
      du.setZero();
      du.row(r) = out.u.row(r) * i1;
      detail::amplitude_derivative(out.u, du, intensity, out.d_phase.col(layout.screen_heater(r)));
    }
  }
  return out;
}

}  // namespace upp
