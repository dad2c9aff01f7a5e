#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "upp/rng.hpp"
#include "upp/thermal.hpp"

using namespace upp;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

constexpr double kPi = std::numbers::pi;

double wrapped_error(double a, double b) { return std::abs(std::remainder(a - b, 2.0 * kPi)); }

ThermalModel random_model(int n, int window, double strength, std::uint64_t seed, double max_power = 1000.0) {
  Rng rng(seed);
  RealVector theta0(n), p2pi(n);
  for (int i = 0; i < n; ++i) {
    theta0(i) = rng.uniform(0.0, 2.0 * kPi);
    p2pi(i) = rng.uniform(40.0, 52.0);
  }
  std::vector<double> c;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < window; ++j) c.push_back(rng.uniform(-strength, strength) * 2.0 * kPi / 52.0);
  }
  return ThermalModel(theta0, p2pi, window, c, max_power);
}

}  // namespace

TEST_CASE("linear law anchors", "[thermal]") {
  const auto m = ThermalModel::uniform(1, 46.0, 100.0);
  CHECK_THAT(phases_from_powers(m, PowerVector::Constant(1, 46.0))(0), WithinAbs(2.0 * kPi, 1e-12));
  const double at57 = phases_from_powers(m, PowerVector::Constant(1, 57.0))(0);
  CHECK_THAT(at57 / kPi, WithinAbs(2.0 * 57.0 / 46.0, 1e-12));
  CHECK_THAT(at57 / kPi, WithinAbs(2.478, 1e-3));
  CHECK_THAT(at57 / kPi, WithinRel(2.5, 0.01));

  const auto r = random_model(8, 3, 0.05, 1);
  CHECK((phases_from_powers(r, PowerVector::Zero(8)) - r.theta0()).norm() == 0.0);
}

TEST_CASE("forward model matches the written-out sum", "[thermal]") {
  const auto m = random_model(12, 4, 0.05, 2);
  Rng rng(9);
  PowerVector p(12);
  for (int i = 0; i < 12; ++i) p(i) = rng.uniform(0.0, 45.0);
  RealVector expect = m.theta0();
  for (int i = 0; i < 12; ++i) expect(i) += 2.0 * kPi * p(i) / m.p2pi()(i);
  for (const auto& t : m.crosstalk()) expect(t.row) += t.coeff * p(t.col);
  CHECK((phases_from_powers(m, p) - expect).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((m.response_matrix() * p + m.theta0() - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("linearity in power", "[thermal][property]") {
  const auto m = random_model(20, 6, 0.05, 3);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    PowerVector p1(20), p2(20);
    for (int i = 0; i < 20; ++i) {
      p1(i) = rng.uniform(0.0, 45.0);
      p2(i) = rng.uniform(0.0, 45.0);
    }
    const double a = rng.uniform(0.0, 2.0);
    const double b = rng.uniform(0.0, 2.0);
    const RealVector lhs = phases_from_powers(m, a * p1 + b * p2) - m.theta0();
    const RealVector rhs =
        a * (phases_from_powers(m, p1) - m.theta0()) + b * (phases_from_powers(m, p2) - m.theta0());
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("forward model rejects bad powers", "[thermal]") {
  const auto m = ThermalModel::uniform(3, 46.0, 90.0);
  CHECK_THROWS_AS(phases_from_powers(m, PowerVector::Constant(3, -1.0)), ConfigError);
  CHECK_THROWS_AS(phases_from_powers(m, PowerVector::Zero(2)), ConfigError);
}

TEST_CASE("inverse without crosstalk", "[thermal][inverse]") {
  const auto m = ThermalModel::uniform(1, 46.0, 90.0);
  // Half a period of a 46 mW heater.
  CHECK_THAT(powers_for_phases(m, PhaseVector::Constant(1, kPi))(0), WithinAbs(23.0, 1e-12));
  CHECK(powers_for_phases(m, PhaseVector::Zero(1))(0) == 0.0);

  const auto r = random_model(30, 0, 0.0, 5);
  CHECK(powers_for_phases(r, r.theta0()).cwiseAbs().maxCoeff() <= 1e-9);

  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    PhaseVector target(30);
    for (int i = 0; i < 30; ++i) target(i) = rng.uniform(-20.0, 20.0);
    const PowerVector p = powers_for_phases(r, target);
    for (int i = 0; i < 30; ++i) {
      const double turns = (target(i) - r.theta0()(i)) / (2.0 * kPi);
      const double expect = r.p2pi()(i) * (turns - std::floor(turns));
      CHECK_THAT(p(i), WithinAbs(expect, 1e-9));
    }
  }
}

TEST_CASE("inverse with crosstalk reproduces phases", "[thermal][inverse][property]") {
  const auto small = random_model(10, 4, 0.05, 7);
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    PhaseVector target(10);
    for (int i = 0; i < 10; ++i) target(i) = rng.uniform(0.0, 2.0 * kPi);
    const PowerVector p = powers_for_phases(small, target);
    CHECK(p.minCoeff() >= 0.0);
    const PhaseVector back = phases_from_powers(small, p);
    for (int i = 0; i < 10; ++i) CHECK(wrapped_error(back(i), target(i)) <= 1e-9);
  }

  const auto big = random_model(576, 24, 0.05, 9, 200.0);
  const ThermalInverse inverse(big);
  for (int trial = 0; trial < 5; ++trial) {
    PhaseVector target(576);
    for (int i = 0; i < 576; ++i) target(i) = rng.uniform(0.0, 2.0 * kPi);
    const PowerVector p = inverse.solve(target);
    CHECK(p.minCoeff() >= 0.0);
    const PhaseVector back = phases_from_powers(big, p);
    double worst = 0.0;
    for (int i = 0; i < 576; ++i) worst = std::max(worst, wrapped_error(back(i), target(i)));
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("infeasible targets name the heaters", "[thermal][inverse]") {
  const auto m = ThermalModel::uniform(4, 46.0, 10.0);
  PhaseVector target = PhaseVector::Zero(4);
  target(2) = kPi;  // needs 23 mW
  try {
    powers_for_phases(m, target);
    FAIL("expected InfeasiblePowerError");
  } catch (const InfeasiblePowerError& e) {
    CHECK(e.heaters() == std::vector<int>{2});
  }
  CHECK_THROWS_AS(powers_for_phases(m, PhaseVector::Constant(4, std::nan(""))), ConfigError);
}

TEST_CASE("total power", "[thermal]") {
  CHECK(total_power(PowerVector::Zero(576)) == 0.0);
  CHECK(total_power(PowerVector::Constant(576, 17.0)) == 9792.0);
  CHECK(total_power(PowerVector::Constant(576, 17.0)) < 10000.0);
  PowerVector p(3);
  p << 1.0, 2.0, 3.0;
  CHECK(total_power(p) == 6.0);
}

TEST_CASE("crosstalk windows", "[thermal]") {
  for (int row : {0, 1, 10, 287, 574, 575}) {
    const auto cols = crosstalk_window(576, 24, row);
    CHECK(cols.size() == 24);
    CHECK(std::find(cols.begin(), cols.end(), row) == cols.end());
    CHECK(std::is_sorted(cols.begin(), cols.end()));
    for (int c : cols) CHECK(std::abs(c - row) <= 24);
  }
  const auto m = random_model(576, 24, 0.05, 11);
  CHECK(m.crosstalk().size() == 13824);
  CHECK_THROWS_AS(crosstalk_window(10, 10, 0), ConfigError);
}

TEST_CASE("model validation", "[thermal]") {
  CHECK_THROWS_AS(ThermalModel(RealVector::Zero(2), RealVector::Constant(2, 0.0), 0, {}, 90.0), ConfigError);
  CHECK_THROWS_AS(ThermalModel(RealVector::Zero(2), RealVector::Constant(2, 46.0), 1, {0.0}, 90.0), ConfigError);
  // |c| above the self-heating slope of its source heater.
  CHECK_THROWS_AS(ThermalModel(RealVector::Zero(2), RealVector::Constant(2, 46.0), 1, {0.2, 0.0}, 90.0), ConfigError);
  CHECK_NOTHROW(ThermalModel(RealVector::Zero(2), RealVector::Constant(2, 46.0), 1, {0.13, -0.13}, 90.0));
}

TEST_CASE("drift scales p2pi", "[thermal]") {
  const auto m = random_model(5, 2, 0.05, 12);
  const auto d = m.drifted(100.0, 5e-5);
  CHECK((d.p2pi() - m.p2pi() * 1.005).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(d.theta0() == m.theta0());
}

TEST_CASE("thermal json round trip", "[thermal][json]") {
  const auto m = random_model(36, 6, 0.05, 13, 90.0);
  const auto j = thermal_to_json(m);
  for (const char* key : {"n_heaters", "theta0", "p2pi_mw", "xtalk", "max_power_mw"}) CHECK(j.contains(key));
  CHECK(j.at("xtalk").size() == 216);
  const auto back = thermal_from_json(nlohmann::json::parse(j.dump()));
  CHECK(back.theta0() == m.theta0());
  CHECK(back.p2pi() == m.p2pi());
  CHECK(back.crosstalk_coefficients() == m.crosstalk_coefficients());
  CHECK(back.window() == 6);
  CHECK(back.max_power() == 90.0);
}
