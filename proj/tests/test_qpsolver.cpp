#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "enmpc/qp.hpp"
#include "test_util.hpp"

using namespace enmpc;
using enmpc_test::Rng;

namespace {

// Brute-force oracle: enumerate active subsets of the inequalities, solve
// each equality-reduced KKT system, and keep the feasible candidate with
// nonnegative multipliers (unique for strictly convex QPs).
struct OracleResult {
  bool found{false};
  Vec d;
  Vec mu;
};

OracleResult enumeration_oracle(const DenseQp& qp) {
  const int n = static_cast<int>(qp.H.rows());
  const int me = static_cast<int>(qp.E.rows());
  const int mi = static_cast<int>(qp.C.rows());
  OracleResult best;
  double best_obj = std::numeric_limits<double>::infinity();
  for (int mask = 0; mask < (1 << mi); ++mask) {
    std::vector<int> act;
    for (int i = 0; i < mi; ++i)
      if (mask & (1 << i)) act.push_back(i);
    const int ma = static_cast<int>(act.size());
    const int dim = n + me + ma;
    Mat K = Mat::Zero(dim, dim);
    Vec rhs(dim);
    K.topLeftCorner(n, n) = qp.H;
    rhs.head(n) = -qp.g;
    for (int i = 0; i < me; ++i) {
      K.block(n + i, 0, 1, n) = qp.E.row(i);
      K.block(0, n + i, n, 1) = -qp.E.row(i).transpose();
      rhs[n + i] = qp.e[i];
    }
    for (int j = 0; j < ma; ++j) {
      K.block(n + me + j, 0, 1, n) = qp.C.row(act[j]);
      K.block(0, n + me + j, n, 1) = -qp.C.row(act[j]).transpose();
      rhs[n + me + j] = qp.c[act[j]];
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (!lu.isInvertible()) continue;
    Vec sol = lu.solve(rhs);
    Vec d = sol.head(n);
    Vec mu_act = sol.tail(ma);
    bool ok = true;
    for (int j = 0; j < ma && ok; ++j) ok = mu_act[j] >= -1e-9;
    for (int i = 0; i < mi && ok; ++i) {
      if (mask & (1 << i)) continue;
      ok = qp.C.row(i).dot(d) >= qp.c[i] - 1e-9;
    }
    if (!ok) continue;
    double obj = 0.5 * d.dot(qp.H * d) + qp.g.dot(d);
    if (obj < best_obj - 1e-12) {
      best_obj = obj;
      best.found = true;
      best.d = d;
      best.mu = Vec::Zero(mi);
      for (int j = 0; j < ma; ++j) best.mu[act[j]] = std::max(0.0, mu_act[j]);
    }
  }
  return best;
}

DenseQp random_convex_qp(Rng& rng, int n, int me, int mi) {
  DenseQp qp;
  Mat R = rng.mat(n, n, -1.0, 1.0);
  qp.H = R.transpose() * R + 0.2 * Mat::Identity(n, n);
  qp.g = rng.vec(n, -2.0, 2.0);
  qp.E = rng.mat(me, n, -1.0, 1.0);
  qp.C = rng.mat(mi, n, -1.0, 1.0);
  Vec feas = rng.vec(n, -0.5, 0.5);
  qp.e = qp.E * feas;
  qp.c.resize(mi);
  for (int i = 0; i < mi; ++i) qp.c[i] = qp.C.row(i).dot(feas) - rng.uniform(0.0, 1.0);
  return qp;
}

double qp_kkt_residual(const DenseQp& qp, const DenseQpSolution& sol) {
  Vec stat = qp.H * sol.d + qp.g;
  if (qp.E.rows()) stat -= qp.E.transpose() * sol.lam;
  if (qp.C.rows()) stat -= qp.C.transpose() * sol.mu;
  double r = stat.cwiseAbs().maxCoeff();
  if (qp.E.rows()) r = std::max(r, (qp.E * sol.d - qp.e).cwiseAbs().maxCoeff());
  for (int i = 0; i < qp.C.rows(); ++i) {
    double s = qp.C.row(i).dot(sol.d) - qp.c[i];
    r = std::max(r, std::max(0.0, -s));
    r = std::max(r, std::abs(sol.mu[i] * s));
  }
  return r;
}

}  // namespace

TEST_SUITE("qpsolver") {
  TEST_CASE("identity hessian, unconstrained") {
    DenseQp qp;
    qp.H = Mat::Identity(3, 3);
    qp.g = Vec::Ones(3) * 2.0;
    qp.E.resize(0, 3);
    qp.e.resize(0);
    qp.C.resize(0, 3);
    qp.c.resize(0);
    auto sol = solve_dense_qp(qp);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK((sol.d + qp.g).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("scalar bound: min x^2/2 subject to x >= 1") {
    DenseQp qp;
    qp.H = Mat::Identity(1, 1);
    qp.g = Vec::Zero(1);
    qp.E.resize(0, 1);
    qp.e.resize(0);
    qp.C = Mat::Ones(1, 1);
    qp.c = Vec::Ones(1);
    auto sol = solve_dense_qp(qp);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK(sol.d[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sol.mu[0] == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("six variables, four inequalities vs enumeration") {
    Rng rng(2024);
    DenseQp qp = random_convex_qp(rng, 6, 0, 4);
    auto sol = solve_dense_qp(qp);
    auto oracle = enumeration_oracle(qp);
    REQUIRE(sol.status == QpStatus::optimal);
    REQUIRE(oracle.found);
    CHECK((sol.d - oracle.d).norm() < 1e-9);
  }

  TEST_CASE("100 random instances match the enumeration oracle") {
    Rng rng(777);
    for (int trial = 0; trial < 100; ++trial) {
      int n = rng.uniform_int(2, 8);
      int me = rng.uniform_int(0, std::max(0, n / 2 - 1));
      int mi = rng.uniform_int(1, 6);
      DenseQp qp = random_convex_qp(rng, n, me, mi);
      auto sol = solve_dense_qp(qp);
      auto oracle = enumeration_oracle(qp);
      REQUIRE(sol.status == QpStatus::optimal);
      REQUIRE(oracle.found);
      CHECK((sol.d - oracle.d).norm() <= 1e-8);
      CHECK(qp_kkt_residual(qp, sol) <= 1e-9);
      for (int i = 0; i < qp.C.rows(); ++i) CHECK(sol.mu[i] >= -1e-12);
    }
  }

  TEST_CASE("warm start with the optimal active set makes no changes") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
      int n = rng.uniform_int(3, 8);
      DenseQp qp = random_convex_qp(rng, n, 0, 5);
      auto cold = solve_dense_qp(qp);
      REQUIRE(cold.status == QpStatus::optimal);
      auto warm = solve_dense_qp(qp, cold.active);
      REQUIRE(warm.status == QpStatus::optimal);
      CHECK(warm.changes == 0);
      CHECK((warm.d - cold.d).norm() < 1e-10);
    }
  }

  TEST_CASE("inconsistent inequalities are reported infeasible") {
    DenseQp qp;
    qp.H = Mat::Identity(1, 1);
    qp.g = Vec::Zero(1);
    qp.E.resize(0, 1);
    qp.e.resize(0);
    qp.C.resize(2, 1);
    qp.C << 1.0, -1.0;
    qp.c.resize(2);
    qp.c << 1.0, 1.0;  // x >= 1 and -x >= 1
    auto sol = solve_dense_qp(qp);
    CHECK(sol.status == QpStatus::infeasible);
  }

  TEST_CASE("indefinite reduced hessian is flagged, not regularized") {
    ReducedQp qp;
    qp.P.resize(2, 2);
    qp.P << -1.0, 0.0, 0.0, 1.0;
    qp.q = Vec::Zero(2);
    qp.G.resize(0, 2);
    qp.h.resize(0);
    auto sol = solve_reduced_qp(qp);
    CHECK(sol.status == QpStatus::nonconvex_detected);
  }

  TEST_CASE("indefinite hessian with restoring active set solves via working set") {
    // negative curvature direction is excluded once x >= 1 is active
    ReducedQp qp;
    qp.P.resize(2, 2);
    qp.P << -0.5, 0.0, 0.0, 1.0;
    qp.q.resize(2);
    qp.q << 1.0, -1.0;
    qp.G.resize(1, 2);
    qp.G << 1.0, 0.0;
    qp.h = Vec::Ones(1);
    std::vector<int> hint{0};
    auto sol = solve_reduced_qp(qp, hint);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK(sol.y[0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(sol.y[1] == doctest::Approx(1.0).epsilon(1e-10));
  }

  TEST_CASE("equality-constrained reduced rows") {
    ReducedQp qp;
    qp.P = Mat::Identity(2, 2);
    qp.q = Vec::Zero(2);
    qp.G.resize(2, 2);
    qp.G << 1.0, 1.0, 1.0, 0.0;
    qp.h.resize(2);
    qp.h << 2.0, 1.5;  // x+y = 2 (equality), x >= 1.5
    qp.n_eq = 1;
    auto sol = solve_reduced_qp(qp);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK(sol.y[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(sol.y[1] == doctest::Approx(0.5).epsilon(1e-12));
  }

  TEST_CASE("eigenvalue floor clamps only what is below the floor") {
    Mat b(2, 2);
    b << -1.0, 0.0, 0.0, 2.0;
    Mat r = eigenvalue_floor(b, 1e-6);
    Eigen::SelfAdjointEigenSolver<Mat> es(r);
    CHECK(es.eigenvalues()[0] == doctest::Approx(1e-6).epsilon(1e-10));
    CHECK(es.eigenvalues()[1] == doctest::Approx(2.0).epsilon(1e-12));
    Mat pd(2, 2);
    pd << 3.0, 0.5, 0.5, 1.0;
    CHECK((eigenvalue_floor(pd, 1e-6) - pd).cwiseAbs().maxCoeff() == 0.0);
  }
}
