#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "upp/unitary.hpp"

namespace upp {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Floored modulo into [0, 2π).
inline double canonical_phase(double phase) {
  double r = std::fmod(phase, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;
  return r;
}

/// One Mach-Zehnder interferometer acting on modes {top_mode, top_mode + 1}.
struct MziNode {
  int layer = 0;
  int top_mode = 0;
  int phi_heater = 0;    // external phase, top input arm
  int theta_heater = 0;  // internal phase, top arm between the couplers
  double t1 = 0.5;       // input coupler power transmissivity
  double t2 = 0.5;       // output coupler power transmissivity
};

/// Per-heater applied phase in radians.
using PhaseVector = RealVector;

/// Topology of a rectangular MZI mesh.
///
/// Heaters are numbered node by node (phi then theta), followed by one
/// heater per mode for the output phase screen. Couplers are numbered the
/// same way: node k owns couplers 2k (t1) and 2k+1 (t2).
class MeshLayout {
 public:
  MeshLayout(int n_modes, std::vector<MziNode> nodes, bool output_phase_screen)
      : n_modes_(n_modes), nodes_(std::move(nodes)), screen_(output_phase_screen) {
    validate();
  }

  int n_modes() const noexcept { return n_modes_; }
  const std::vector<MziNode>& nodes() const noexcept { return nodes_; }
  bool has_output_phase_screen() const noexcept { return screen_; }

  int node_count() const noexcept { return static_cast<int>(nodes_.size()); }
  int coupler_count() const noexcept { return 2 * node_count(); }
  int heater_count() const noexcept { return 2 * node_count() + (screen_ ? n_modes_ : 0); }
  int layer_count() const {
    int layers = 0;
    for (const auto& node : nodes_) layers = std::max(layers, node.layer + 1);
    return layers;
  }

  /// Heater index of the output-screen phase on `mode`.
  int screen_heater(int mode) const {
    detail::require(screen_, "layout has no output phase screen");
    detail::require(mode >= 0 && mode < n_modes_, "screen_heater: mode out of range");
    return 2 * node_count() + mode;
  }

  bool is_screen_heater(int heater) const {
    return screen_ && heater >= 2 * node_count() && heater < heater_count();
  }

  RealVector couplers() const {
    RealVector t(coupler_count());
    for (int k = 0; k < node_count(); ++k) {
      t(2 * k) = nodes_[k].t1;
      t(2 * k + 1) = nodes_[k].t2;
    }
    return t;
  }

  MeshLayout with_couplers(const RealVector& t) const {
    detail::require(t.size() == coupler_count(), "with_couplers: length mismatch");
    auto nodes = nodes_;
    for (int k = 0; k < node_count(); ++k) {
      nodes[k].t1 = t(2 * k);
      nodes[k].t2 = t(2 * k + 1);
    }
    return MeshLayout(n_modes_, std::move(nodes), screen_);
  }

  /// Same topology with every coupler at 0.5.
  MeshLayout ideal() const { return with_couplers(RealVector::Constant(coupler_count(), 0.5)); }

  bool has_ideal_couplers(double tol = 1e-12) const {
    return std::all_of(nodes_.begin(), nodes_.end(), [tol](const MziNode& n) {
      return std::abs(n.t1 - 0.5) <= tol && std::abs(n.t2 - 0.5) <= tol;
    });
  }

  /// FNV-1a over the topology (coupler values excluded), stable across
  /// platforms. Used to tie model and device files together.
  std::string topology_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](std::int64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= static_cast<std::uint64_t>((v >> (8 * b)) & 0xff);
        h *= 0x100000001b3ULL;
      }
    };
    feed(n_modes_);
    feed(screen_ ? 1 : 0);
    for (const auto& n : nodes_) {
      feed(n.layer);
      feed(n.top_mode);
      feed(n.phi_heater);
      feed(n.theta_heater);
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[i] = kHex[h & 0xf];
    return out;
  }

 private:
  void validate() const {
    detail::require(n_modes_ >= 2, "MeshLayout: n_modes must be >= 2");
    const int heaters = heater_count();
    std::vector<int> heater_uses(heaters, 0);
    int previous_layer = 0;
    std::vector<int> mode_layer(n_modes_, -1);
    for (const auto& n : nodes_) {
      detail::require(n.layer >= previous_layer, "MeshLayout: nodes must be ordered by layer");
      previous_layer = n.layer;
      detail::require(n.top_mode >= 0 && n.top_mode <= n_modes_ - 2,
                      "MeshLayout: top_mode out of range");
      detail::require(n.t1 >= 0.0 && n.t1 <= 1.0 && n.t2 >= 0.0 && n.t2 <= 1.0,
                      "MeshLayout: coupler transmissivity outside [0, 1]");
      for (int m : {n.top_mode, n.top_mode + 1}) {
        detail::require(mode_layer[m] != n.layer,
                        "MeshLayout: nodes in one layer must act on disjoint modes");
        mode_layer[m] = n.layer;
      }
      for (int h : {n.phi_heater, n.theta_heater}) {
        detail::require(h >= 0 && h < 2 * node_count(), "MeshLayout: heater index out of range");
        ++heater_uses[h];
      }
    }
    for (int h = 0; h < 2 * node_count(); ++h) {
      detail::require(heater_uses[h] == 1, "MeshLayout: each node heater must be used exactly once");
    }
  }

  int n_modes_;
  std::vector<MziNode> nodes_;
  bool screen_;
};

/// Rectangular mesh: n layers, layer l holds MZIs on pairs (k, k+1) with
/// k ≡ l (mod 2). Nodes are ordered by layer, then by top mode.
inline MeshLayout standard_layout(int n) {
  detail::require(n >= 2, "standard_layout: n must be >= 2");
  std::vector<MziNode> nodes;
  nodes.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (int layer = 0; layer < n; ++layer) {
    for (int top = layer % 2; top <= n - 2; top += 2) {
      const int k = static_cast<int>(nodes.size());
      nodes.push_back(MziNode{layer, top, 2 * k, 2 * k + 1, 0.5, 0.5});
    }
  }
  return MeshLayout(n, std::move(nodes), true);
}

// ---------------------------------------------------------------------------
// MZI transfer: C(t2) · P(theta) · C(t1) · P(phi)
//   C(t)     = [[√t, i√(1−t)], [i√(1−t), √t]]
//   P(theta) = diag(e^{i theta}, 1)

using Matrix2c = Eigen::Matrix2cd;

inline Matrix2c coupler_matrix(double t) {
  const double a = std::sqrt(t);
  const double b = std::sqrt(1.0 - t);
  Matrix2c c;
  c << Complex(a, 0), Complex(0, b), Complex(0, b), Complex(a, 0);
  return c;
}

/// d C(t) / dt
inline Matrix2c coupler_matrix_derivative(double t) {
  const double da = 0.5 / std::sqrt(t);
  const double db = -0.5 / std::sqrt(1.0 - t);
  Matrix2c c;
  c << Complex(da, 0), Complex(0, db), Complex(0, db), Complex(da, 0);
  return c;
}

inline Matrix2c mzi_transfer_2x2(double phi, double theta, double t1, double t2) {
  const Complex ephi = std::polar(1.0, phi);
  const Complex etheta = std::polar(1.0, theta);
  Matrix2c first = coupler_matrix(t1);
  first.col(0) *= ephi;
  Matrix2c second = coupler_matrix(t2);
  second.col(0) *= etheta;
  return second * first;
}

inline ComplexMatrix mzi_transfer(double phi, double theta, double t1, double t2) {
  detail::require(t1 >= 0.0 && t1 <= 1.0 && t2 >= 0.0 && t2 <= 1.0,
                  "mzi_transfer: transmissivity outside [0, 1]");
  return mzi_transfer_2x2(phi, theta, t1, t2);
}

namespace detail {

// rows {r, r+1} of m  <-  block · rows {r, r+1}
inline void apply_rows(ComplexMatrix& m, Eigen::Index r, const Matrix2c& block) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const Complex a = m(r, c);
    const Complex b = m(r + 1, c);
    m(r, c) = block(0, 0) * a + block(0, 1) * b;
    m(r + 1, c) = block(1, 0) * a + block(1, 1) * b;
  }
}

// cols {c, c+1} of m  <-  cols {c, c+1} · block
inline void apply_cols(ComplexMatrix& m, Eigen::Index c, const Matrix2c& block) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Complex a = m(r, c);
    const Complex b = m(r, c + 1);
    m(r, c) = a * block(0, 0) + b * block(1, 0);
    m(r, c + 1) = a * block(0, 1) + b * block(1, 1);
  }
}

inline void require_phase_length(const MeshLayout& layout, const PhaseVector& phases) {
  require(phases.size() == layout.heater_count(),
          "phase vector length " + std::to_string(phases.size()) + " does not match heater count " +
              std::to_string(layout.heater_count()));
  require(phases.allFinite(), "phase vector has non-finite entries");
}

}  // namespace detail

namespace detail {

// Unchecked product used on hot paths.
inline ComplexMatrix mesh_matrix(const MeshLayout& layout, const PhaseVector& phases) {
  const int n = layout.n_modes();
  ComplexMatrix u = ComplexMatrix::Identity(n, n);
  for (const auto& node : layout.nodes()) {
    apply_rows(u, node.top_mode,
               mzi_transfer_2x2(phases(node.phi_heater), phases(node.theta_heater), node.t1, node.t2));
  }
  if (layout.has_output_phase_screen()) {
    for (int m = 0; m < n; ++m) u.row(m) *= std::polar(1.0, phases(layout.screen_heater(m)));
  }
  return u;
}

}  // namespace detail

/// Transfer matrix of the mesh: nodes applied in layout order (inputs on the
/// right), then the output phase screen.
inline Unitary mesh_unitary(const MeshLayout& layout, const PhaseVector& phases) {
  detail::require_phase_length(layout, phases);
  return Unitary(detail::mesh_matrix(layout, phases));
}

// ---------------------------------------------------------------------------
// Decomposition by successive nulling.
//
// With ideal couplers T(phi, theta) = i e^{i theta/2} [[s e^{i phi}, c], [c e^{i phi}, -s]],
// s = sin(theta/2), c = cos(theta/2). Nulling alternates column operations
// (U T^-1, input side) and row operations (T U, output side); the row
// operations are then commuted through the residual diagonal using
//   T(phi, theta)^-1 diag(d1, d2) = diag(d1', d2') T(phi', theta)
// with e^{i phi'} = d1/d2, d1' = -e^{-i(theta+phi)} d2, d2' = -e^{-i theta} d2.

namespace detail {

struct NullingOp {
  int top = 0;
  double phi = 0.0;
  double theta = 0.0;
};

inline Matrix2c ideal_mzi(double phi, double theta) { return mzi_transfer_2x2(phi, theta, 0.5, 0.5); }

}  // namespace detail

inline PhaseVector clements_decompose(const Unitary& target, const MeshLayout& layout) {
  const int n = layout.n_modes();
  detail::require(target.size() == n, "clements_decompose: target size does not match layout");
  detail::require(layout.has_ideal_couplers(),
                  "clements_decompose: layout couplers must be ideal (t = 0.5)");
  detail::require(layout.has_output_phase_screen(),
                  "clements_decompose: layout needs an output phase screen");
  const MeshLayout reference = standard_layout(n);
  detail::require(layout.node_count() == reference.node_count(),
                  "clements_decompose: layout is not a standard rectangular mesh");
  for (int k = 0; k < layout.node_count(); ++k) {
    const auto& a = layout.nodes()[k];
    const auto& b = reference.nodes()[k];
    detail::require(a.layer == b.layer && a.top_mode == b.top_mode,
                    "clements_decompose: layout is not a standard rectangular mesh");
  }

  ComplexMatrix v = target.matrix();
  std::vector<detail::NullingOp> right_ops;
  std::vector<detail::NullingOp> left_ops;

  for (int i = 0; i < n - 1; ++i) {
    if (i % 2 == 0) {
      for (int j = 0; j <= i; ++j) {
        const int row = n - 1 - j;
        const int col = i - j;
        const Complex a = v(row, col);
        const Complex b = v(row, col + 1);
        // a s e^{-i phi} + b c = 0
        const double theta = 2.0 * std::atan2(std::abs(b), std::abs(a));
        const double phi = (std::abs(a) > 0.0 && std::abs(b) > 0.0) ? std::arg(a) - std::arg(-b) : 0.0;
        detail::apply_cols(v, col, detail::ideal_mzi(phi, theta).adjoint());
        v(row, col) = 0.0;
        right_ops.push_back({col, phi, theta});
      }
    } else {
      for (int j = 0; j <= i; ++j) {
        const int row = n + j - i - 1;
        const int col = j;
        const Complex a = v(row - 1, col);
        const Complex b = v(row, col);
        // c e^{i phi} a - s b = 0
        const double theta = 2.0 * std::atan2(std::abs(a), std::abs(b));
        const double phi = (std::abs(a) > 0.0 && std::abs(b) > 0.0) ? std::arg(b) - std::arg(a) : 0.0;
        detail::apply_rows(v, row - 1, detail::ideal_mzi(phi, theta));
        v(row, col) = 0.0;
        left_ops.push_back({row - 1, phi, theta});
      }
    }
  }

  std::vector<Complex> diag(n);
  for (int m = 0; m < n; ++m) diag[m] = v(m, m);

  // Innermost row operation first.
  std::vector<detail::NullingOp> moved(left_ops.size());
  for (int k = static_cast<int>(left_ops.size()) - 1; k >= 0; --k) {
    const auto& op = left_ops[k];
    const Complex d1 = diag[op.top];
    const Complex d2 = diag[op.top + 1];
    const double phi_new = std::arg(d1) - std::arg(d2);
    diag[op.top] = -std::polar(1.0, -(op.theta + op.phi)) * d2;
    diag[op.top + 1] = -std::polar(1.0, -op.theta) * d2;
    moved[k] = {op.top, phi_new, op.theta};
  }

  // Light meets right_ops in recorded order, then moved ops in reverse.
  std::vector<detail::NullingOp> sequence = right_ops;
  sequence.insert(sequence.end(), moved.rbegin(), moved.rend());

  // Operations on the same mode pair keep their relative order, which
  // matches the layer order of the standard layout.
  std::vector<std::deque<int>> slots(n - 1);
  for (int k = 0; k < layout.node_count(); ++k) slots[layout.nodes()[k].top_mode].push_back(k);

  PhaseVector phases = PhaseVector::Zero(layout.heater_count());
  for (const auto& op : sequence) {
    auto& queue = slots[op.top];
    if (queue.empty()) throw NumericalError("clements_decompose: internal slot mismatch");
    const auto& node = layout.nodes()[queue.front()];
    queue.pop_front();
    phases(node.phi_heater) = canonical_phase(op.phi);
    phases(node.theta_heater) = canonical_phase(op.theta);
  }
  for (int m = 0; m < n; ++m) {
    phases(layout.screen_heater(m)) = canonical_phase(std::arg(diag[m]));
  }
  return phases;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json layout_to_json(const MeshLayout& layout) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : layout.nodes()) {
    nodes.push_back({{"layer", n.layer},
                     {"top_mode", n.top_mode},
                     {"phi_heater", n.phi_heater},
                     {"theta_heater", n.theta_heater},
                     {"t1", n.t1},
                     {"t2", n.t2}});
  }
  return {{"n_modes", layout.n_modes()},
          {"output_phase_screen", layout.has_output_phase_screen()},
          {"nodes", std::move(nodes)}};
}

inline MeshLayout layout_from_json(const nlohmann::json& j) {
  try {
    std::vector<MziNode> nodes;
    for (const auto& n : j.at("nodes")) {
      nodes.push_back(MziNode{n.at("layer").get<int>(), n.at("top_mode").get<int>(),
                              n.at("phi_heater").get<int>(), n.at("theta_heater").get<int>(),
                              n.at("t1").get<double>(), n.at("t2").get<double>()});
    }
    return MeshLayout(j.at("n_modes").get<int>(), std::move(nodes),
                      j.at("output_phase_screen").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("layout json: ") + e.what());
  }
}

}  // namespace upp
