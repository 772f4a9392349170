#include <random>

#include "doctest.h"
#include "kbp/lp.hpp"
#include "lp_oracle.hpp"

using namespace kbp::lp;

TEST_CASE("min -x s.t. x <= 1") {
  LpProblem p;
  p.c = Eigen::VectorXd::Constant(1, -1.0);
  p.G = Eigen::MatrixXd::Constant(1, 1, 1.0);
  p.h = Eigen::VectorXd::Constant(1, 1.0);
  const auto s = simplex_solve(p);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.x(0) == doctest::Approx(1.0));
  CHECK(s.objective == doctest::Approx(-1.0));
  CHECK(s.lambda(0) == doctest::Approx(1.0));
  CHECK(is_certified(s));
}

TEST_CASE("infeasible and unbounded problems are classified") {
  LpProblem infeasible;
  infeasible.c = Eigen::VectorXd::Constant(1, 1.0);
  infeasible.G = Eigen::MatrixXd::Constant(1, 1, 1.0);
  infeasible.h = Eigen::VectorXd::Constant(1, -1.0);
  CHECK(simplex_solve(infeasible).status == LpStatus::Infeasible);

  LpProblem unbounded;
  unbounded.c = Eigen::VectorXd::Constant(2, -1.0);
  unbounded.G = Eigen::MatrixXd(1, 2);
  unbounded.G << 1.0, -1.0;
  unbounded.h = Eigen::VectorXd::Constant(1, 2.0);
  CHECK(simplex_solve(unbounded).status == LpStatus::Unbounded);

  LpProblem contradictory;  // x1 + x2 == 3 and x1 + x2 <= 1
  contradictory.c = Eigen::VectorXd::Ones(2);
  contradictory.G = Eigen::MatrixXd::Ones(1, 2);
  contradictory.h = Eigen::VectorXd::Constant(1, 1.0);
  contradictory.E = Eigen::MatrixXd::Ones(1, 2);
  contradictory.b = Eigen::VectorXd::Constant(1, 3.0);
  CHECK(simplex_solve(contradictory).status == LpStatus::Infeasible);
}

TEST_CASE("free variables and equality rows") {
  // min x - y  s.t. x + y == 1, x free in [-2, inf) via -x <= 2, y <= 4
  LpProblem p;
  p.c = Eigen::Vector2d(1.0, -1.0);
  p.G = Eigen::MatrixXd(2, 2);
  p.G << -1.0, 0.0, 0.0, 1.0;
  p.h = Eigen::Vector2d(2.0, 4.0);
  p.E = Eigen::MatrixXd::Ones(1, 2);
  p.b = Eigen::VectorXd::Constant(1, 1.0);
  p.nonneg = {false, false};
  const auto s = simplex_solve(p);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.x(0) == doctest::Approx(-2.0));
  CHECK(s.x(1) == doctest::Approx(3.0));
  CHECK(s.objective == doctest::Approx(-5.0));
  CHECK(is_certified(s));
}

TEST_CASE("redundant equality rows do not break phase 1") {
  LpProblem p;
  p.c = Eigen::Vector2d(1.0, 2.0);
  p.E = Eigen::MatrixXd(2, 2);
  p.E << 1.0, 1.0, 2.0, 2.0;
  p.b = Eigen::Vector2d(1.0, 2.0);
  const auto s = simplex_solve(p);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.objective == doctest::Approx(1.0));
  CHECK(is_certified(s));
}

TEST_CASE("degenerate problem terminates") {
  // Beale's cycling example (cycles under textbook Dantzig without anti-cycling)
  LpProblem p;
  p.c = Eigen::Vector4d(-0.75, 150.0, -0.02, 6.0);
  p.G = Eigen::MatrixXd(3, 4);
  p.G << 0.25, -60.0, -0.04, 9.0, 0.5, -90.0, -0.02, 3.0, 0.0, 0.0, 1.0, 0.0;
  p.h = Eigen::Vector3d(0.0, 0.0, 1.0);
  SimplexOptions opt;
  opt.bland_after = 1;
  const auto s = simplex_solve(p, opt);
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.objective == doctest::Approx(-0.05));
}

TEST_CASE("random small LPs match vertex enumeration") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const auto p = kbp::testing::random_bounded_lp(rng);
    const auto oracle = kbp::testing::vertex_enumeration(p);
    REQUIRE(oracle.has_value());
    const auto s = simplex_solve(p);
    REQUIRE(s.status == LpStatus::Optimal);
    CHECK(std::abs(s.objective - *oracle) <= 1e-8);
    CHECK(is_certified(s));
  }
}
