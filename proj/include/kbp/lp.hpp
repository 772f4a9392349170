#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kbp::lp {

/// min c'x  s.t.  G x <= h,  E x == b,  x_j >= 0 where nonneg[j]
/// (an empty `nonneg` means every variable is nonnegative).
struct LpProblem {
  Eigen::VectorXd c;
  Eigen::MatrixXd G;
  Eigen::VectorXd h;
  Eigen::MatrixXd E;
  Eigen::VectorXd b;
  std::vector<bool> nonneg;

  Eigen::Index num_vars() const { return c.size(); }
  bool is_nonneg(Eigen::Index j) const { return nonneg.empty() || nonneg[static_cast<std::size_t>(j)]; }
};

enum class LpStatus { Optimal, Infeasible, Unbounded, IterLimit };

const char* to_string(LpStatus s);

/// Residuals of a primal/dual pair against the original problem.
struct LpCertificate {
  double primal_infeasibility = 0.0;
  double dual_infeasibility = 0.0;
  double gap = 0.0;  // |c'x - dual objective|
};

/// Duals follow the Lagrangian c + G'lambda + E'mu = z with lambda >= 0,
/// z_j >= 0 on nonnegative variables and z_j = 0 on free ones; the dual
/// objective is -h'lambda - b'mu.
struct LpSolution {
  LpStatus status = LpStatus::IterLimit;
  Eigen::VectorXd x;
  Eigen::VectorXd lambda;
  Eigen::VectorXd mu;
  double objective = 0.0;
  int iterations = 0;
  LpCertificate certificate;
  std::string diagnostics;
};

struct SimplexOptions {
  int max_iterations = 500000;
  double feasibility_tol = 1e-9;
  double optimality_tol = 1e-9;
  double pivot_tol = 1e-9;
  /// Consecutive degenerate pivots before switching to Bland's rule.
  int bland_after = 50;
  /// Iterations between basis-residual checks (refactorization on drift).
  int check_interval = 100;
};

/// Two-phase revised simplex with an explicit dense basis inverse, Dantzig
/// pricing and Bland's rule on degenerate stalls.
LpSolution simplex_solve(const LpProblem& problem, const SimplexOptions& options = {});

LpCertificate certify(const LpProblem& problem, const Eigen::VectorXd& x, const Eigen::VectorXd& lambda,
                      const Eigen::VectorXd& mu);

/// True when the certificate meets the solver's acceptance tolerances:
/// primal and dual infeasibility <= 1e-7, gap <= 1e-6 (1 + |obj|).
bool is_certified(const LpSolution& s);

}  // namespace kbp::lp
