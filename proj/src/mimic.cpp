#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Sparse>

#include "kbp/planopt.hpp"

namespace kbp {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Huber-smoothed positive part summed over row increments (leading zero pad).
struct SmoothSpg {
  const std::vector<Beam>* beams;
  double width;

  double value(const VectorXd& w) const {
    double acc = 0.0;
    walk(w, [&](Index, Index, double x) { acc += huber(x); });
    return acc;
  }
  void add_gradient(const VectorXd& w, double scale, VectorXd& grad) const {
    walk(w, [&](Index b, Index prev, double x) {
      const double d = scale * huber_slope(x);
      grad(b) += d;
      if (prev >= 0) grad(prev) -= d;
    });
  }

 private:
  double huber(double x) const {
    if (x <= 0.0) return 0.0;
    return x <= width ? x * x / (2.0 * width) : x - width / 2.0;
  }
  double huber_slope(double x) const { return x <= 0.0 ? 0.0 : std::min(1.0, x / width); }

  template <typename F>
  void walk(const VectorXd& w, F&& f) const {
    Index b0 = 0;
    for (const Beam& beam : *beams) {
      for (int r = 0; r < beam.rows; ++r) {
        for (int c = 0; c < beam.cols; ++c) {
          const Index b = b0 + r * beam.cols + c;
          const Index prev = c > 0 ? b - 1 : -1;
          f(b, prev, w(b) - (prev >= 0 ? w(prev) : 0.0));
        }
      }
      b0 += beam.beamlet_count();
    }
  }
};

// ||A w - d||^2 = w'Qw - 2 g'w + dd with Q = A'A, g = A'd.
struct Quadratic {
  MatrixXd Q;
  VectorXd g;
  double dd = 0.0;
  double lipschitz = 0.0;  // of the gradient 2(Qw - g)
};

Quadratic make_quadratic(const InfluenceMatrix& a, std::span<const double> target) {
  const Index nv = static_cast<Index>(a.num_voxels());
  const Index nb = static_cast<Index>(a.num_beamlets());
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(a.nnz());
  for (Index b = 0; b < nb; ++b) {
    const auto vox = a.column_voxels(static_cast<std::size_t>(b));
    const auto val = a.column_values(static_cast<std::size_t>(b));
    for (std::size_t k = 0; k < vox.size(); ++k) entries.emplace_back(static_cast<Index>(vox[k]), b, val[k]);
  }
  Eigen::SparseMatrix<double> A(nv, nb);
  A.setFromTriplets(entries.begin(), entries.end());

  Quadratic q;
  q.Q = MatrixXd(A.transpose() * A);
  const auto g = a.transpose_multiply(target);
  q.g = Eigen::Map<const VectorXd>(g.data(), nb);
  for (double d : target) q.dd += d * d;
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(q.Q, Eigen::EigenvaluesOnly);
  q.lipschitz = 2.0 * std::max(eig.eigenvalues().maxCoeff(), 1e-12) * 1.0001;
  return q;
}

struct SolveResult {
  VectorXd w;
  int iterations = 0;
};

// Monotone FISTA with adaptive restart on f(w) + mu * smooth_spg(w), w >= 0.
SolveResult penalized_solve(const Quadratic& q, const SmoothSpg& spg, double mu, VectorXd x, const MimicOptions& opt,
                            std::vector<double>* history) {
  const double L = q.lipschitz + mu * 4.0 / spg.width;
  auto objective = [&](const VectorXd& w, const VectorXd& Qw) {
    return w.dot(Qw) - 2.0 * q.g.dot(w) + q.dd + (mu > 0 ? mu * spg.value(w) : 0.0);
  };
  VectorXd Qx = q.Q * x;
  double fx = objective(x, Qx);
  if (history) history->push_back(fx);
  VectorXd x_prev = x, Qx_prev = Qx;
  VectorXd y = x, Qy = Qx;
  double t = 1.0;
  SolveResult out;
  for (int k = 0; k < opt.max_iterations; ++k) {
    VectorXd grad = 2.0 * (Qy - q.g);
    if (mu > 0) spg.add_gradient(y, mu, grad);
    const VectorXd z = (y - grad / L).cwiseMax(0.0);
    const double step = (z - y).norm();
    const VectorXd Qz = q.Q * z;
    const double fz = objective(z, Qz);
    out.iterations = k + 1;

    x_prev = x;
    Qx_prev = Qx;
    const bool accepted = fz <= fx;
    if (accepted) {
      x = z;
      Qx = Qz;
      fx = fz;
      if (history) history->push_back(fx);
    }
    if (step <= opt.tolerance * (1.0 + x.norm())) break;
    if (!accepted) {
      // restart momentum from the last accepted point
      t = 1.0;
      y = x;
      Qy = Qx;
      continue;
    }
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    const double a = (t - 1.0) / t_next;
    y = x + a * (x - x_prev);
    Qy = Qx + a * (Qx - Qx_prev);
    t = t_next;
  }
  out.w = std::move(x);
  return out;
}

}  // namespace

Plan dose_mimic(const ForwardProblem& problem, std::span<const double> target, const MimicOptions& options,
                MimicTrace* trace) {
  const InfluenceMatrix& a = *problem.influence;
  if (target.size() != a.num_voxels()) throw std::invalid_argument("target dose size does not match the problem");
  for (double d : target) {
    if (!std::isfinite(d)) throw std::invalid_argument("target dose must be finite");
  }
  const Index nb = static_cast<Index>(a.num_beamlets());
  const double C = problem.complexity_bound;
  const Quadratic q = make_quadratic(a, target);
  const SmoothSpg spg{&a.beams(), options.huber_width};

  VectorXd best;
  double best_residual2 = std::numeric_limits<double>::infinity();
  int iterations = 0;

  // scale a candidate onto SPG <= C and keep it if it fits better
  auto consider = [&](const VectorXd& w) -> double {
    const std::vector<double> wv(w.data(), w.data() + w.size());
    const double s = spg_complexity(wv, a.beams());
    VectorXd cand = w;
    if (s > C) cand *= s > 0 ? C / s : 0.0;
    const double r2 = std::max(0.0, cand.dot(q.Q * cand) - 2.0 * q.g.dot(cand) + q.dd);
    if (r2 < best_residual2) {
      best_residual2 = r2;
      best = cand;
    }
    return s;
  };
  auto solve = [&](double mu, const VectorXd& start) {
    std::vector<double>* hist = nullptr;
    if (trace) {
      trace->objective_history.emplace_back();
      trace->penalties.push_back(mu);
      hist = &trace->objective_history.back();
    }
    auto r = penalized_solve(q, spg, mu, start, options, hist);
    iterations += r.iterations;
    return r.w;
  };

  VectorXd w = solve(0.0, VectorXd::Zero(nb));
  double s = consider(w);
  if (s > C + 1e-6) {
    // find a multiplier that brings SPG under the bound, then bisect
    double lo = 0.0, hi = 1e-3 * q.lipschitz;
    VectorXd w_hi = w;
    bool bracketed = false;
    for (int k = 0; k < 40 && !bracketed; ++k) {
      w_hi = solve(hi, w_hi);
      s = consider(w_hi);
      if (s <= C + 1e-6) {
        bracketed = true;
      } else {
        lo = hi;
        hi *= 4.0;
      }
    }
    VectorXd w_mid = w_hi;
    for (int k = 0; k < options.bisection_steps && bracketed; ++k) {
      const double mid = lo > 0 ? std::sqrt(lo * hi) : hi / 4.0;
      w_mid = solve(mid, w_mid);
      s = consider(w_mid);
      if (s <= C + 1e-6) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
  }
  if (!best.allFinite()) throw PlanError("dose mimic produced a non-finite fluence");

  Plan plan;
  plan.source = PlanSource::Mimic;
  plan.fluence.assign(best.data(), best.data() + best.size());
  plan.complexity = spg_complexity(plan.fluence, a.beams());
  plan.complexity_bound = C;
  plan.dose = compute_dose(a, plan.fluence).values;
  plan.term_values = term_values(problem, plan.dose);
  double r2 = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) r2 += (plan.dose[i] - target[i]) * (plan.dose[i] - target[i]);
  plan.objective = r2;
  plan.mimic_residual = std::sqrt(r2);
  plan.iterations = iterations;
  return plan;
}

}  // namespace kbp
