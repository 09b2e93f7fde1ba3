#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enmpc/integrator.hpp"
#include "test_util.hpp"

using namespace enmpc;
using enmpc_test::rel_err;

namespace {

Function scalar_decay() {
  GraphBuilder gb;
  auto x = gb.inputs("x", 1);
  auto u = gb.inputs("u", 1);
  (void)u;
  return Function(gb, {-x[0]});
}

Function linear_scalar(double a, double b) {
  GraphBuilder gb;
  auto x = gb.inputs("x", 1);
  auto u = gb.inputs("u", 1);
  return Function(gb, {a * x[0] + b * u[0]});
}

// one-step RK4 amplification polynomial for x' = a x
double rk4_poly(double z) { return 1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0; }

}  // namespace

TEST_SUITE("integrator") {
  TEST_CASE("zero vector field is the identity map") {
    GraphBuilder gb;
    auto x = gb.inputs("x", 3);
    auto u = gb.inputs("u", 2);
    (void)u;
    std::vector<Sym> zero(3, gb.constant(0.0));
    Function fc(gb, zero);
    DiscreteDynamics dyn = discretize_rk4(fc, 0.25, 3);
    Vec xs = Vec::Random(3), us = Vec::Random(2);
    CHECK((dyn.step(xs, us) - xs).cwiseAbs().maxCoeff() == 0.0);
    Vec xn;
    Mat A, B;
    dyn.step_with_sensitivities(xs, us, xn, A, B);
    CHECK((A - Mat::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(B.cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("scalar decay matches the exponential") {
    DiscreteDynamics dyn = discretize_rk4(scalar_decay(), 0.1, 5);
    Vec x(1), u(1);
    x << 1.0;
    u << 0.0;
    double ratio = dyn.step(x, u)[0];
    CHECK(std::abs(ratio - std::exp(-0.1)) <= 1e-9);
  }

  TEST_CASE("observed order on the exponential is at least 4.5") {
    Vec x(1), u(1);
    x << 1.0;
    u << 0.0;
    const double dt1 = 0.4, dt2 = 0.2;
    double e1 = std::abs(discretize_rk4(scalar_decay(), dt1, 1).step(x, u)[0] - std::exp(-dt1));
    double e2 = std::abs(discretize_rk4(scalar_decay(), dt2, 1).step(x, u)[0] - std::exp(-dt2));
    double order = std::log2(e1 / e2);
    CHECK(order >= 4.5);
  }

  TEST_CASE("linear dynamics sensitivities equal the RK4 polynomial") {
    const double a = -0.7, b = 0.3, dt = 0.2;
    DiscreteDynamics dyn = discretize_rk4(linear_scalar(a, b), dt, 1);
    Vec x(1), u(1), xn;
    x << 0.4;
    u << -0.2;
    Mat A, B;
    dyn.step_with_sensitivities(x, u, xn, A, B);
    CHECK(A(0, 0) == doctest::Approx(rk4_poly(a * dt)).epsilon(1e-14));
    // B for x' = a x + b u with constant u: e^{a dt}-like series applied to b
    // derived from the same Runge-Kutta weights
    double z = a * dt;
    double bexp = b * dt * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0);
    CHECK(B(0, 0) == doctest::Approx(bexp).epsilon(1e-13));
  }

  TEST_CASE("sensitivities commute with composition") {
    GraphBuilder gb;
    auto x = gb.inputs("x", 2);
    auto u = gb.inputs("u", 1);
    std::vector<Sym> rhs{x[1], -sin(x[0]) - 0.2 * x[1] + u[0]};
    Function fc(gb, rhs);
    const double dt = 0.3;
    DiscreteDynamics full = discretize_rk4(fc, dt, 2);
    DiscreteDynamics half = discretize_rk4(fc, dt / 2.0, 1);
    Vec xs(2), us(1);
    xs << 0.3, -0.1;
    us << 0.05;
    Vec x1, x2, xf;
    Mat A1, B1, A2, B2, Af, Bf;
    half.step_with_sensitivities(xs, us, x1, A1, B1);
    half.step_with_sensitivities(x1, us, x2, A2, B2);
    full.step_with_sensitivities(xs, us, xf, Af, Bf);
    CHECK((x2 - xf).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(rel_err(A2 * A1, Af) < 1e-10);
    CHECK(rel_err(A2 * B1 + B2, Bf) < 1e-10);
  }

  TEST_CASE("sensitivities match finite differences") {
    GraphBuilder gb;
    auto x = gb.inputs("x", 2);
    auto u = gb.inputs("u", 2);
    std::vector<Sym> rhs{x[1] * u[0], -x[0] + exp(0.1 * u[1]) - 1.0};
    Function fc(gb, rhs);
    DiscreteDynamics dyn = discretize_rk4(fc, 0.15, 4);
    Vec xs(2), us(2), xn;
    xs << 0.5, -0.3;
    us << 0.8, 0.2;
    Mat A, B;
    dyn.step_with_sensitivities(xs, us, xn, A, B);
    auto step_x = [&](const Vec& p) { return dyn.step(p, us); };
    auto step_u = [&](const Vec& p) { return dyn.step(xs, p); };
    CHECK(rel_err(A, enmpc_test::fd_jacobian(step_x, xs)) < 1e-6);
    CHECK(rel_err(B, enmpc_test::fd_jacobian(step_u, us)) < 1e-6);
  }

  TEST_CASE("invalid arguments are rejected") {
    Function fc = scalar_decay();
    CHECK_THROWS_AS(discretize_rk4(fc, -1.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(discretize_rk4(fc, 0.1, 0), std::invalid_argument);
  }
}
