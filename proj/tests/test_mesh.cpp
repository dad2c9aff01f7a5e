#include <catch_amalgamated.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "upp/mesh.hpp"
#include "upp/metrics.hpp"
#include "upp/rng.hpp"

using namespace upp;
using Catch::Matchers::WithinAbs;

namespace {

constexpr double kPi = std::numbers::pi;

// C(t) P(theta) C(t) P(phi) multiplied out by hand.
Eigen::Matrix2cd mzi_oracle(double phi, double theta, double t1, double t2) {
  auto c = [](double t) {
    Eigen::Matrix2cd m;
    const Complex x(0.0, std::sqrt(1.0 - t));
    m << std::sqrt(t), x, x, std::sqrt(t);
    return m;
  };
  Eigen::Matrix2cd p = Eigen::Matrix2cd::Identity();
  p(0, 0) = std::exp(Complex(0.0, theta));
  Eigen::Matrix2cd e = Eigen::Matrix2cd::Identity();
  e(0, 0) = std::exp(Complex(0.0, phi));
  return c(t2) * p * c(t1) * e;
}

// Sequential full-size products, one embedded block per node.
ComplexMatrix mesh_oracle(const MeshLayout& layout, const PhaseVector& phases) {
  const int n = layout.n_modes();
  ComplexMatrix u = ComplexMatrix::Identity(n, n);
  for (const auto& node : layout.nodes()) {
    ComplexMatrix e = ComplexMatrix::Identity(n, n);
    e.block(node.top_mode, node.top_mode, 2, 2) =
        mzi_oracle(phases(node.phi_heater), phases(node.theta_heater), node.t1, node.t2);
    u = e * u;
  }
  if (layout.has_output_phase_screen()) {
    ComplexMatrix d = ComplexMatrix::Identity(n, n);
    for (int m = 0; m < n; ++m) d(m, m) = std::exp(Complex(0.0, phases(layout.screen_heater(m))));
    u = d * u;
  }
  return u;
}

PhaseVector random_phases(int count, std::uint64_t seed) {
  Rng rng(seed);
  PhaseVector p(count);
  for (int i = 0; i < count; ++i) p(i) = rng.uniform(0.0, 2.0 * kPi);
  return p;
}

MeshLayout random_coupler_layout(int n, std::uint64_t seed, double spread) {
  const MeshLayout base = standard_layout(n);
  Rng rng(seed);
  RealVector t(base.coupler_count());
  for (int c = 0; c < t.size(); ++c) t(c) = rng.uniform(0.5 - spread, 0.5 + spread);
  return base.with_couplers(t);
}

}  // namespace

TEST_CASE("standard layout component counts", "[mesh][layout]") {
  const auto l2 = standard_layout(2);
  CHECK(l2.node_count() == 1);
  CHECK(l2.heater_count() == 4);  // 2 * 1 + 2
  const auto l6 = standard_layout(6);
  CHECK(l6.node_count() == 15);
  CHECK(l6.heater_count() == 36);
  const auto l24 = standard_layout(24);
  CHECK(l24.node_count() == 276);
  CHECK(l24.coupler_count() == 552);
  CHECK(l24.heater_count() == 576);
  CHECK(l24.layer_count() == 24);
  CHECK(l24.has_ideal_couplers());
  CHECK_THROWS_AS(standard_layout(1), ConfigError);
}

TEST_CASE("standard layout nodes within a layer are disjoint", "[mesh][layout][property]") {
  for (int n = 2; n <= 24; ++n) {
    const auto l = standard_layout(n);
    std::vector<std::vector<int>> used(l.layer_count(), std::vector<int>(n, 0));
    std::vector<int> heater_use(l.heater_count(), 0);
    for (const auto& node : l.nodes()) {
      CHECK(node.top_mode >= 0);
      CHECK(node.top_mode <= n - 2);
      used[node.layer][node.top_mode]++;
      used[node.layer][node.top_mode + 1]++;
      heater_use[node.phi_heater]++;
      heater_use[node.theta_heater]++;
    }
    for (const auto& layer : used) CHECK(*std::max_element(layer.begin(), layer.end()) <= 1);
    for (int m = 0; m < n; ++m) heater_use[l.screen_heater(m)]++;
    CHECK(std::all_of(heater_use.begin(), heater_use.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("layout validation rejects overlaps and bad couplers", "[mesh][layout]") {
  std::vector<MziNode> overlap{{0, 0, 0, 1, 0.5, 0.5}, {0, 1, 2, 3, 0.5, 0.5}};
  CHECK_THROWS_AS(MeshLayout(3, overlap, true), ConfigError);
  std::vector<MziNode> bad_t{{0, 0, 0, 1, 1.2, 0.5}};
  CHECK_THROWS_AS(MeshLayout(2, bad_t, true), ConfigError);
  std::vector<MziNode> bad_mode{{0, 2, 0, 1, 0.5, 0.5}};
  CHECK_THROWS_AS(MeshLayout(3, bad_mode, true), ConfigError);
  std::vector<MziNode> reused{{0, 0, 0, 1, 0.5, 0.5}, {1, 1, 1, 2, 0.5, 0.5}};
  CHECK_THROWS_AS(MeshLayout(3, reused, true), ConfigError);
}

TEST_CASE("mzi_transfer conventions", "[mesh][mzi]") {
  const auto bar = mzi_transfer(0.0, kPi, 0.5, 0.5);
  CHECK_THAT(std::abs(bar(0, 0)), WithinAbs(1.0, 1e-15));
  CHECK_THAT(std::abs(bar(0, 1)), WithinAbs(0.0, 1e-15));
  const auto cross = mzi_transfer(0.0, 0.0, 0.5, 0.5);
  CHECK_THAT(std::abs(cross(0, 1)), WithinAbs(1.0, 1e-15));
  CHECK_THAT(std::abs(cross(0, 0)), WithinAbs(0.0, 1e-15));

  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    const double phi = rng.uniform(-10.0, 10.0);
    const double theta = rng.uniform(-10.0, 10.0);
    const auto t = mzi_transfer(phi, theta, 0.5, 0.5);
    CHECK_THAT(std::norm(t(0, 0)), WithinAbs(std::pow(std::sin(theta / 2.0), 2), 1e-14));
    const double t1 = rng.uniform(0.0, 1.0);
    const double t2 = rng.uniform(0.0, 1.0);
    const auto g = mzi_transfer(phi, theta, t1, t2);
    CHECK(unitarity_defect(g) <= 1e-14);
    CHECK((g - ComplexMatrix(mzi_oracle(phi, theta, t1, t2))).cwiseAbs().maxCoeff() <= 1e-15);
  }
  CHECK_THROWS_AS(mzi_transfer(0.0, 0.0, -0.1, 0.5), ConfigError);
  CHECK_THROWS_AS(mzi_transfer(0.0, 0.0, 0.5, 1.5), ConfigError);
}

TEST_CASE("mesh_unitary equals the brute-force product", "[mesh][property]") {
  for (int n = 2; n <= 5; ++n) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto layout = random_coupler_layout(n, 10 * n + s, 0.1);
      const auto phases = random_phases(layout.heater_count(), 77 + s);
      const auto u = mesh_unitary(layout, phases);
      CHECK((u.matrix() - mesh_oracle(layout, phases)).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  const auto l2 = standard_layout(2);
  const auto u = mesh_unitary(l2, PhaseVector::Zero(4));
  CHECK_THAT(std::abs(u(1, 0)), WithinAbs(1.0, 1e-15));
  CHECK_THAT(std::abs(u(0, 1)), WithinAbs(1.0, 1e-15));
  CHECK((u.matrix() - ComplexMatrix(mzi_oracle(0, 0, 0.5, 0.5))).norm() <= 1e-15);

  const auto l24 = random_coupler_layout(24, 1, 0.05);
  CHECK(unitarity_defect(mesh_unitary(l24, random_phases(576, 2)).matrix()) <= 1e-10);
  CHECK_THROWS_AS(mesh_unitary(l2, PhaseVector::Zero(3)), ConfigError);
}

TEST_CASE("node order within a layer does not matter", "[mesh][property]") {
  for (int n : {4, 7, 10}) {
    const auto layout = random_coupler_layout(n, n, 0.05);
    const auto phases = random_phases(layout.heater_count(), 5);
    auto nodes = layout.nodes();
    // Reverse each layer's block of nodes.
    auto begin = nodes.begin();
    while (begin != nodes.end()) {
      auto end = std::find_if(begin, nodes.end(), [&](const MziNode& x) { return x.layer != begin->layer; });
      std::reverse(begin, end);
      begin = end;
    }
    const MeshLayout shuffled(n, nodes, true);
    CHECK((mesh_unitary(layout, phases).matrix() - mesh_unitary(shuffled, phases).matrix()).cwiseAbs().maxCoeff() <=
          1e-13);
  }
}

TEST_CASE("clements round trip", "[mesh][clements][property]") {
  const auto id = standard_layout(4);
  const auto p_id = clements_decompose(Unitary::identity(4), id);
  CHECK((mesh_unitary(id, p_id).matrix() - ComplexMatrix::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-10);

  for (int n = 2; n <= 24; ++n) {
    const auto layout = standard_layout(n);
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Unitary target = haar_random_unitary(n, 1000 * n + s);
      const PhaseVector phases = clements_decompose(target, layout);
      CHECK(phases.minCoeff() >= 0.0);
      CHECK(phases.maxCoeff() < 2.0 * kPi);
      const auto back = mesh_unitary(layout, phases);
      CHECK((back.matrix() - target.matrix()).cwiseAbs().maxCoeff() <= 1e-8);
      CHECK(amplitude_fidelity(target, back.amplitudes()) >= 1.0 - 1e-9);
    }
  }
}

TEST_CASE("clements at full scale is fast", "[mesh][clements]") {
  const auto layout = standard_layout(24);
  const Unitary target = haar_random_unitary(24, 8);
  const auto t0 = std::chrono::steady_clock::now();
  const PhaseVector phases = clements_decompose(target, layout);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(seconds < 1.0);
  CHECK(amplitude_fidelity(target, mesh_unitary(layout, phases).amplitudes()) >= 1.0 - 1e-9);
}

TEST_CASE("clements preconditions", "[mesh][clements]") {
  const auto layout = random_coupler_layout(4, 2, 0.05);
  CHECK_THROWS_AS(clements_decompose(haar_random_unitary(4, 1), layout), ConfigError);
  CHECK_THROWS_AS(clements_decompose(haar_random_unitary(5, 1), standard_layout(4)), ConfigError);
  const auto std4 = standard_layout(4);
  const MeshLayout no_screen(4, std4.nodes(), false);
  CHECK_THROWS_AS(clements_decompose(haar_random_unitary(4, 1), no_screen), ConfigError);
}

TEST_CASE("canonical_phase", "[mesh]") {
  CHECK(canonical_phase(0.0) == 0.0);
  CHECK_THAT(canonical_phase(-0.5), WithinAbs(2.0 * kPi - 0.5, 1e-15));
  CHECK_THAT(canonical_phase(7.0), WithinAbs(7.0 - 2.0 * kPi, 1e-15));
  CHECK(canonical_phase(2.0 * kPi) == 0.0);
  Rng rng(1);
  for (int k = 0; k < 1000; ++k) {
    const double x = canonical_phase(rng.uniform(-100.0, 100.0));
    CHECK(x >= 0.0);
    CHECK(x < 2.0 * kPi);
  }
}

TEST_CASE("layout json round trip", "[mesh][json]") {
  const auto layout = random_coupler_layout(6, 4, 0.05);
  const auto back = layout_from_json(nlohmann::json::parse(layout_to_json(layout).dump()));
  CHECK(back.topology_hash() == layout.topology_hash());
  CHECK(back.couplers() == layout.couplers());
  CHECK(back.heater_count() == 36);
  CHECK(standard_layout(6).topology_hash() == layout.topology_hash());
  CHECK(standard_layout(7).topology_hash() != layout.topology_hash());
}
