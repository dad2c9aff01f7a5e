#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "upp/fringe.hpp"

namespace upp {

struct RoutingResult {
  PowerVector powers;
  double extinction_db = 0.0;
  double target_probability = 0.0;
  RealVector distribution;
  int passes = 0;
  bool converged = false;              // false: pass cap hit, best result returned
  std::vector<int> route_nodes;        // node indices along the path, input to output
  std::map<int, FringeFit> fringes;    // last successful fit per scanned heater
};

/// Mesh nodes a photon can traverse from `input_port` to `output_port`,
/// one per visited MZI. Moves toward the output whenever the remaining
/// layers still allow it.
inline std::vector<int> route_nodes(const MeshLayout& layout, int input_port, int output_port) {
  const int n = layout.n_modes();
  detail::require(input_port >= 0 && input_port < n, "route: invalid input port");
  detail::require(output_port >= 0 && output_port < n, "route: invalid output port");
  const int layers = layout.layer_count();
  // node_at[l][m]: node touching mode m in layer l, or -1
  std::vector<std::vector<int>> node_at(layers, std::vector<int>(n, -1));
  for (int k = 0; k < layout.node_count(); ++k) {
    const auto& nd = layout.nodes()[k];
    node_at[nd.layer][nd.top_mode] = k;
    node_at[nd.layer][nd.top_mode + 1] = k;
  }
  auto partner = [&](int l, int m) {
    const int k = node_at[l][m];
    if (k < 0) return -1;
    const int top = layout.nodes()[k].top_mode;
    return m == top ? top + 1 : top;
  };
  std::vector<std::vector<bool>> reach(layers + 1, std::vector<bool>(n, false));
  reach[layers][output_port] = true;
  for (int l = layers - 1; l >= 0; --l) {
    for (int m = 0; m < n; ++m) {
      const int q = partner(l, m);
      reach[l][m] = reach[l + 1][m] || (q >= 0 && reach[l + 1][q]);
    }
  }
  if (!reach[0][input_port]) throw ConfigError("route: output port unreachable from input port");

  std::vector<int> nodes;
  int m = input_port;
  for (int l = 0; l < layers; ++l) {
    const int q = partner(l, m);
    if (q < 0) continue;
    nodes.push_back(node_at[l][m]);
    const bool toward = std::abs(q - output_port) < std::abs(m - output_port);
    if ((toward && reach[l + 1][q]) || !reach[l + 1][m]) m = q;
  }
  return nodes;
}

struct RoutingOptions {
  int samples = 30;
  double scan_max_mw = 60.0;
  int max_passes = 10;
  double tolerance_db = 0.01;
};

/// Coordinate ascent over the internal heaters of the MZIs on the path from
/// `input_port` to `output_port`: each heater is swept, its fringe fitted,
/// and parked at the fringe maximum. Passes repeat until the normalized
/// target-port power improves by less than `tolerance_db`.
inline RoutingResult optimize_routing(SimulatedDevice& dev, int input_port, int output_port,
                                      const RoutingOptions& options = {}) {
  detail::require(options.max_passes >= 1, "optimize_routing: max_passes must be >= 1");
  const MeshLayout& layout = dev.public_layout();
  const double scan_max = std::min(options.scan_max_mw, dev.max_power());

  RoutingResult result;
  result.route_nodes = route_nodes(layout, input_port, output_port);
  result.powers = PowerVector::Zero(dev.n_heaters());

  auto target_db = [&](const PowerVector& p) {
    const auto out = dev.measure_output_distribution(input_port, p);
    return std::pair{10.0 * std::log10(std::max(out.probabilities(output_port), 1e-300)), out};
  };

  double current = target_db(result.powers).first;
  double best = current;
  PowerVector best_powers = result.powers;
  for (int pass = 1; pass <= options.max_passes; ++pass) {
    result.passes = pass;
    for (int k : result.route_nodes) {
      const int heater = layout.nodes()[k].theta_heater;
      const auto scan = scan_fringe(dev, heater, input_port, output_port, result.powers, scan_max,
                                    options.samples);
      try {
        const FringeFit fit = fit_fringe(scan);
        result.powers(heater) = std::min(fit.peak_power(), scan_max);
        result.fringes[heater] = fit;
      } catch (const NumericalError&) {
        // Flat fringe: the MZI sees no light yet. Retry on the next pass.
      }
    }
    const double next = target_db(result.powers).first;
    if (next > best) {
      best = next;
      best_powers = result.powers;
    }
    const double improvement = next - current;
    current = next;
    if (improvement < options.tolerance_db && pass > 1) {
      result.converged = true;
      break;
    }
  }
  result.powers = best_powers;
  const auto [db, out] = target_db(result.powers);
  result.distribution = out.probabilities;
  result.target_probability = out.probabilities(output_port);
  result.extinction_db = extinction_ratio_db(out.probabilities, output_port);
  return result;
}

}  // namespace upp
