#include "kbp/lp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/Sparse>

namespace kbp::lp {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class ColumnKind { Positive, Negative, Slack, Artificial };

struct Column {
  ColumnKind kind;
  Index source;  // original variable or row
};

// min cost'x, A x = rhs, x >= 0, rhs >= 0.
struct StandardForm {
  SparseMatrix A;
  VectorXd rhs;
  VectorXd cost;
  std::vector<Column> columns;
  std::vector<double> row_sign;  // +1/-1 applied to each original row
  std::vector<Index> initial_basis;
  Index first_artificial = 0;  // columns at or past this index are artificial
};

StandardForm to_standard_form(const LpProblem& p) {
  const Index n = p.num_vars();
  const Index mg = p.G.rows();
  const Index me = p.E.rows();
  const Index m = mg + me;

  StandardForm sf;
  for (Index j = 0; j < n; ++j) {
    sf.columns.push_back({ColumnKind::Positive, j});
    if (!p.is_nonneg(j)) sf.columns.push_back({ColumnKind::Negative, j});
  }
  for (Index i = 0; i < mg; ++i) sf.columns.push_back({ColumnKind::Slack, i});
  sf.first_artificial = static_cast<Index>(sf.columns.size());

  sf.row_sign.assign(static_cast<std::size_t>(m), 1.0);
  sf.rhs.resize(m);
  for (Index i = 0; i < mg; ++i) {
    if (p.h(i) < 0) sf.row_sign[static_cast<std::size_t>(i)] = -1.0;
    sf.rhs(i) = sf.row_sign[static_cast<std::size_t>(i)] * p.h(i);
  }
  for (Index i = 0; i < me; ++i) {
    if (p.b(i) < 0) sf.row_sign[static_cast<std::size_t>(mg + i)] = -1.0;
    sf.rhs(mg + i) = sf.row_sign[static_cast<std::size_t>(mg + i)] * p.b(i);
  }

  // Rows with a +1 slack start with it basic; the rest get an artificial.
  sf.initial_basis.assign(static_cast<std::size_t>(m), -1);
  const Index slack_offset = sf.first_artificial - mg;
  for (Index i = 0; i < mg; ++i) {
    if (sf.row_sign[static_cast<std::size_t>(i)] > 0) sf.initial_basis[static_cast<std::size_t>(i)] = slack_offset + i;
  }
  for (Index i = 0; i < m; ++i) {
    if (sf.initial_basis[static_cast<std::size_t>(i)] < 0) {
      sf.initial_basis[static_cast<std::size_t>(i)] = static_cast<Index>(sf.columns.size());
      sf.columns.push_back({ColumnKind::Artificial, i});
    }
  }

  const Index N = static_cast<Index>(sf.columns.size());
  sf.cost = VectorXd::Zero(N);
  std::vector<Eigen::Triplet<double>> entries;
  auto sign = [&](Index i) { return sf.row_sign[static_cast<std::size_t>(i)]; };
  for (Index k = 0; k < N; ++k) {
    const Column& col = sf.columns[static_cast<std::size_t>(k)];
    switch (col.kind) {
      case ColumnKind::Positive:
      case ColumnKind::Negative: {
        const double s = col.kind == ColumnKind::Positive ? 1.0 : -1.0;
        for (Index i = 0; i < mg; ++i) {
          const double v = p.G(i, col.source);
          if (v != 0.0) entries.emplace_back(i, k, s * sign(i) * v);
        }
        for (Index i = 0; i < me; ++i) {
          const double v = p.E(i, col.source);
          if (v != 0.0) entries.emplace_back(mg + i, k, s * sign(mg + i) * v);
        }
        sf.cost(k) = s * p.c(col.source);
        break;
      }
      case ColumnKind::Slack:
        entries.emplace_back(col.source, k, sign(col.source));
        break;
      case ColumnKind::Artificial:
        // the artificial identity column stays +1 on flipped rows
        entries.emplace_back(col.source, k, 1.0);
        break;
    }
  }
  sf.A.resize(m, N);
  sf.A.setFromTriplets(entries.begin(), entries.end());
  sf.A.makeCompressed();
  return sf;
}

class RevisedSimplex {
 public:
  RevisedSimplex(const StandardForm& sf, const SimplexOptions& opt)
      : sf_(sf), opt_(opt), m_(sf.A.rows()), n_(sf.A.cols()) {
    basis_ = sf.initial_basis;
    in_basis_.assign(static_cast<std::size_t>(n_), -1);
    for (Index i = 0; i < m_; ++i) in_basis_[static_cast<std::size_t>(basis_[static_cast<std::size_t>(i)])] = i;
    refactor();
  }

  enum class Outcome { Optimal, Unbounded, IterLimit, Breakdown };

  Outcome run(const VectorXd& cost, Index enter_limit) {
    int degenerate_run = 0;
    bool bland = false;
    int since_check = 0;
    VectorXd y(m_), d(n_), u(m_);
    // columns whose only pivots were tiny; cleared after the next real step
    std::vector<char> rejected(static_cast<std::size_t>(n_), 0);
    bool any_rejected = false;
    auto reprice = [&] {
      VectorXd cb(m_);
      for (Index i = 0; i < m_; ++i) cb(i) = cost(basis_[static_cast<std::size_t>(i)]);
      y.noalias() = binv_.transpose() * cb;
    };
    reprice();
    while (true) {
      if (iterations_ >= opt_.max_iterations) return Outcome::IterLimit;
      if (++since_check >= opt_.check_interval) {
        since_check = 0;
        check_drift();
        if (!healthy()) return Outcome::Breakdown;
        reprice();
      }
      d.noalias() = cost.head(n_) - sf_.A.transpose() * y;

      Index q = -1;
      double best = -opt_.optimality_tol;
      for (Index j = 0; j < enter_limit; ++j) {
        if (in_basis_[static_cast<std::size_t>(j)] >= 0 || rejected[static_cast<std::size_t>(j)]) continue;
        if (d(j) < best) {
          q = j;
          if (bland) break;
          best = d(j);
        }
      }
      if (q < 0) return Outcome::Optimal;

      column_image(q, u);
      // Harris two-pass ratio test: bound the step with a small feasibility
      // relaxation, then take the largest pivot among rows within it. Basic
      // artificials sit at zero and leave as soon as the column touches them.
      auto is_art = [&](Index i) { return basis_[static_cast<std::size_t>(i)] >= enter_limit; };
      double bound = std::numeric_limits<double>::infinity();
      for (Index i = 0; i < m_; ++i) {
        if (is_art(i)) {
          if (std::abs(u(i)) > opt_.pivot_tol) bound = 0.0;
        } else if (u(i) > opt_.pivot_tol) {
          bound = std::min(bound, (std::max(xb_(i), 0.0) + opt_.feasibility_tol) / u(i));
        }
      }
      Index r = -1;
      double theta = 0.0;
      for (Index i = 0; i < m_; ++i) {
        double ratio;
        if (is_art(i)) {
          if (std::abs(u(i)) <= opt_.pivot_tol) continue;
          ratio = 0.0;
        } else {
          if (u(i) <= opt_.pivot_tol) continue;
          ratio = std::max(xb_(i), 0.0) / u(i);
        }
        if (ratio > bound) continue;
        bool take = r < 0;
        if (!take) {
          take = bland ? basis_[static_cast<std::size_t>(i)] < basis_[static_cast<std::size_t>(r)]
                       : std::abs(u(i)) > std::abs(u(r));
        }
        if (take) {
          r = i;
          theta = ratio;
        }
      }
      if (r < 0) return Outcome::Unbounded;
      if (std::abs(u(r)) < 1e-7 * std::max(1.0, u.lpNorm<Eigen::Infinity>())) {
        rejected[static_cast<std::size_t>(q)] = 1;
        any_rejected = true;
        continue;
      }

      const double dq = d(q);
      const Eigen::RowVectorXd pr = pivot(r, q, u, theta);
      y.noalias() += dq * pr.transpose();
      ++iterations_;
      if (theta <= 1e-12) {
        if (++degenerate_run >= opt_.bland_after) bland = true;
      } else {
        degenerate_run = 0;
        bland = false;
        if (any_rejected) {
          std::fill(rejected.begin(), rejected.end(), 0);
          any_rejected = false;
        }
      }
    }
  }

  // u = B^-1 a_q
  void column_image(Index q, VectorXd& u) const {
    u.setZero(m_);
    for (SparseMatrix::InnerIterator it(sf_.A, q); it; ++it) u.noalias() += it.value() * binv_.col(it.row());
  }

  // Returns the old pivot row of B^-1 divided by u(r).
  Eigen::RowVectorXd pivot(Index r, Index q, const VectorXd& u, double theta) {
    const double ur = u(r);
    xb_ -= theta * u;
    xb_(r) = theta;
    Eigen::RowVectorXd pr = binv_.row(r) / ur;
    binv_.noalias() -= u * pr;
    binv_.row(r) = pr;
    const Index leaving = basis_[static_cast<std::size_t>(r)];
    in_basis_[static_cast<std::size_t>(leaving)] = -1;
    basis_[static_cast<std::size_t>(r)] = q;
    in_basis_[static_cast<std::size_t>(q)] = r;
    return pr;
  }

  void refactor() {
    MatrixXd B(m_, m_);
    for (Index i = 0; i < m_; ++i) B.col(i) = VectorXd(sf_.A.col(basis_[static_cast<std::size_t>(i)]));
    Eigen::PartialPivLU<MatrixXd> lu(B);
    binv_ = lu.inverse();
    xb_ = binv_ * sf_.rhs;
  }

  bool healthy() const { return binv_.allFinite() && xb_.allFinite(); }

  void check_drift() {
    VectorXd r = -sf_.rhs;
    for (Index i = 0; i < m_; ++i) r += sf_.A.col(basis_[static_cast<std::size_t>(i)]) * xb_(i);
    if (r.lpNorm<Eigen::Infinity>() > 1e-10 * (1.0 + sf_.rhs.lpNorm<Eigen::Infinity>())) refactor();
  }

  // Pivot basic artificials out after phase 1; rows where no structural or
  // slack column has a nonzero entry are redundant and keep their artificial.
  void expel_artificials() {
    for (Index r = 0; r < m_; ++r) {
      if (basis_[static_cast<std::size_t>(r)] < sf_.first_artificial) continue;
      const VectorXd row = sf_.A.leftCols(sf_.first_artificial).transpose() * binv_.row(r).transpose();
      Index q = -1;
      double best = 1e-7;
      for (Index j = 0; j < sf_.first_artificial; ++j) {
        if (in_basis_[static_cast<std::size_t>(j)] >= 0) continue;
        if (std::abs(row(j)) > best) {
          best = std::abs(row(j));
          q = j;
        }
      }
      if (q < 0) continue;
      VectorXd u;
      column_image(q, u);
      // degenerate pivot: the artificial sits at (numerically) zero
      xb_(r) = 0.0;
      const double ur = u(r);
      Eigen::RowVectorXd pr = binv_.row(r) / ur;
      binv_.noalias() -= u * pr;
      binv_.row(r) = pr;
      in_basis_[static_cast<std::size_t>(basis_[static_cast<std::size_t>(r)])] = -1;
      basis_[static_cast<std::size_t>(r)] = q;
      in_basis_[static_cast<std::size_t>(q)] = r;
      ++iterations_;
    }
    refactor();
  }

  const VectorXd& xb() const { return xb_; }
  const std::vector<Index>& basis() const { return basis_; }
  const MatrixXd& binv() const { return binv_; }
  int iterations() const { return iterations_; }

 private:
  const StandardForm& sf_;
  SimplexOptions opt_;
  Index m_, n_;
  std::vector<Index> basis_;
  std::vector<Index> in_basis_;
  MatrixXd binv_;
  VectorXd xb_;
  int iterations_ = 0;
};

}  // namespace

const char* to_string(LpStatus s) {
  switch (s) {
    case LpStatus::Optimal: return "Optimal";
    case LpStatus::Infeasible: return "Infeasible";
    case LpStatus::Unbounded: return "Unbounded";
    case LpStatus::IterLimit: return "IterLimit";
  }
  return "?";
}

LpCertificate certify(const LpProblem& p, const VectorXd& x, const VectorXd& lambda, const VectorXd& mu) {
  LpCertificate cert;
  double pinf = 0.0;
  if (p.G.rows() > 0) pinf = std::max(pinf, (p.G * x - p.h).maxCoeff());
  if (p.E.rows() > 0) pinf = std::max(pinf, (p.E * x - p.b).cwiseAbs().maxCoeff());
  for (Index j = 0; j < x.size(); ++j) {
    if (p.is_nonneg(j)) pinf = std::max(pinf, -x(j));
  }
  cert.primal_infeasibility = std::max(0.0, pinf);

  VectorXd z = p.c;
  if (p.G.rows() > 0) z.noalias() += p.G.transpose() * lambda;
  if (p.E.rows() > 0) z.noalias() += p.E.transpose() * mu;
  double dinf = lambda.size() > 0 ? std::max(0.0, -lambda.minCoeff()) : 0.0;
  for (Index j = 0; j < z.size(); ++j) {
    dinf = std::max(dinf, p.is_nonneg(j) ? -z(j) : std::abs(z(j)));
  }
  cert.dual_infeasibility = std::max(0.0, dinf);

  double dual_obj = 0.0;
  if (p.G.rows() > 0) dual_obj -= p.h.dot(lambda);
  if (p.E.rows() > 0) dual_obj -= p.b.dot(mu);
  cert.gap = std::abs(p.c.dot(x) - dual_obj);
  return cert;
}

bool is_certified(const LpSolution& s) {
  return s.status == LpStatus::Optimal && s.certificate.primal_infeasibility <= 1e-7 &&
         s.certificate.dual_infeasibility <= 1e-7 && s.certificate.gap <= 1e-6 * (1.0 + std::abs(s.objective));
}

LpSolution simplex_solve(const LpProblem& p, const SimplexOptions& options) {
  const Index n = p.num_vars();
  if (p.G.cols() != n && p.G.rows() > 0) throw std::invalid_argument("G column count != number of variables");
  if (p.E.cols() != n && p.E.rows() > 0) throw std::invalid_argument("E column count != number of variables");
  if (p.G.rows() != p.h.size() || p.E.rows() != p.b.size()) throw std::invalid_argument("rhs length mismatch");
  if (!p.nonneg.empty() && static_cast<Index>(p.nonneg.size()) != n) throw std::invalid_argument("nonneg length mismatch");
  if (!p.c.allFinite() || !p.G.allFinite() || !p.h.allFinite() || !p.E.allFinite() || !p.b.allFinite()) {
    throw std::invalid_argument("LP data must be finite");
  }

  LpSolution sol;
  sol.x = VectorXd::Zero(n);
  sol.lambda = VectorXd::Zero(p.G.rows());
  sol.mu = VectorXd::Zero(p.E.rows());

  const StandardForm sf = to_standard_form(p);
  const Index m = sf.A.rows();
  const Index N = sf.A.cols();
  if (m == 0) {
    // no constraints: optimal at 0 unless some cost can decrease forever
    for (Index j = 0; j < n; ++j) {
      if ((p.is_nonneg(j) && p.c(j) < 0) || (!p.is_nonneg(j) && p.c(j) != 0)) {
        sol.status = LpStatus::Unbounded;
        return sol;
      }
    }
    sol.status = LpStatus::Optimal;
    sol.certificate = certify(p, sol.x, sol.lambda, sol.mu);
    return sol;
  }

  RevisedSimplex rs(sf, options);
  std::ostringstream diag;

  // IterLimit and numerical breakdown both surface as IterLimit
  auto stopped = [&](RevisedSimplex::Outcome out, const char* phase) {
    sol.status = LpStatus::IterLimit;
    sol.iterations = rs.iterations();
    diag << phase << ": ";
    if (out == RevisedSimplex::Outcome::Breakdown) {
      diag << "numerical breakdown, basis inverse is not finite";
    } else {
      diag << "iteration limit after " << rs.iterations() << " pivots";
    }
    sol.diagnostics = diag.str();
    return sol;
  };

  if (sf.first_artificial < N) {
    VectorXd phase1 = VectorXd::Zero(N);
    phase1.tail(N - sf.first_artificial).setOnes();
    const auto out = rs.run(phase1, N);
    if (out == RevisedSimplex::Outcome::IterLimit || out == RevisedSimplex::Outcome::Breakdown) {
      return stopped(out, "phase 1");
    }
    rs.refactor();
    double infeas = 0.0;
    for (Index i = 0; i < m; ++i) {
      if (rs.basis()[static_cast<std::size_t>(i)] >= sf.first_artificial) infeas += std::max(0.0, rs.xb()(i));
    }
    if (infeas > options.feasibility_tol * (1.0 + sf.rhs.lpNorm<Eigen::Infinity>()) * 10.0) {
      sol.status = LpStatus::Infeasible;
      sol.iterations = rs.iterations();
      diag << "phase 1 residual " << infeas;
      sol.diagnostics = diag.str();
      return sol;
    }
    rs.expel_artificials();
  }

  VectorXd cost = VectorXd::Zero(N);
  cost.head(sf.first_artificial) = sf.cost.head(sf.first_artificial);
  // The second run polishes on a fresh factorization; a few extra pivots may
  // follow if drift hid a negative reduced cost.
  for (int pass = 0; pass < 2; ++pass) {
    const auto out = rs.run(cost, sf.first_artificial);
    if (out == RevisedSimplex::Outcome::Unbounded) {
      sol.status = LpStatus::Unbounded;
      sol.iterations = rs.iterations();
      return sol;
    }
    if (out != RevisedSimplex::Outcome::Optimal) return stopped(out, "phase 2");
    rs.refactor();
    if (!rs.healthy()) return stopped(RevisedSimplex::Outcome::Breakdown, "phase 2");
  }
  sol.iterations = rs.iterations();

  VectorXd xs = VectorXd::Zero(N);
  for (Index i = 0; i < m; ++i) xs(rs.basis()[static_cast<std::size_t>(i)]) = std::max(0.0, rs.xb()(i));
  VectorXd cb(m);
  for (Index i = 0; i < m; ++i) cb(i) = cost(rs.basis()[static_cast<std::size_t>(i)]);
  const VectorXd y = rs.binv().transpose() * cb;

  for (Index k = 0; k < sf.first_artificial; ++k) {
    const Column& col = sf.columns[static_cast<std::size_t>(k)];
    if (col.kind == ColumnKind::Positive) sol.x(col.source) += xs(k);
    if (col.kind == ColumnKind::Negative) sol.x(col.source) -= xs(k);
  }
  const Index mg = p.G.rows();
  for (Index i = 0; i < mg; ++i) sol.lambda(i) = std::max(0.0, -sf.row_sign[static_cast<std::size_t>(i)] * y(i));
  for (Index i = 0; i < p.E.rows(); ++i) sol.mu(i) = -sf.row_sign[static_cast<std::size_t>(mg + i)] * y(mg + i);

  sol.status = LpStatus::Optimal;
  sol.objective = p.c.dot(sol.x);
  sol.certificate = certify(p, sol.x, sol.lambda, sol.mu);
  return sol;
}

}  // namespace kbp::lp
