#include "kbp/planopt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kbp {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::size_t sidx(StructureId s) { return static_cast<std::size_t>(s); }

std::vector<std::size_t> stride_sample(const std::vector<std::size_t>& voxels, std::size_t cap) {
  if (voxels.size() <= cap) return voxels;
  std::vector<std::size_t> out;
  out.reserve(cap);
  for (std::size_t k = 0; k < cap; ++k) out.push_back(voxels[(2 * k + 1) * voxels.size() / (2 * cap)]);
  return out;
}

// Variable layout of the forward LP: w, then one positive-gradient variable
// per beamlet, then per-term auxiliaries (one for a max term, one per
// optimization voxel for hinge terms, none for mean terms).
struct ForwardLayout {
  Index nb = 0;
  Index num_vars = 0;
  std::vector<Index> aux;  // first auxiliary of each term, -1 when absent
};

bool has_aux(TermKind k) { return k != TermKind::MeanDose; }

struct ForwardLp {
  lp::LpProblem lp;
  ForwardLayout layout;
  MatrixXd term_costs;  // num_vars x num_terms: f_t(A w) = term_costs.col(t)' x at the optimum
};

ForwardLp build_forward_lp(const ForwardProblem& pr, std::span<const double> alpha, bool all_terms) {
  const auto& beams = pr.influence->beams();
  const Index nb = static_cast<Index>(pr.num_beamlets());
  const std::size_t nt = pr.terms.size();

  ForwardLp f;
  ForwardLayout& L = f.layout;
  L.nb = nb;
  Index next = 2 * nb;
  Index num_rows = nb + 1;
  L.aux.assign(nt, -1);
  for (std::size_t t = 0; t < nt; ++t) {
    const ObjectiveTerm& term = pr.terms[t];
    if (!has_aux(term.kind) || (!all_terms && alpha[t] == 0.0)) continue;
    L.aux[t] = next;
    const Index nv = static_cast<Index>(pr.voxels[sidx(term.structure)].size());
    next += term.kind == TermKind::MaxDose ? 1 : nv;
    num_rows += nv;
  }
  L.num_vars = next;

  lp::LpProblem& p = f.lp;
  p.G = MatrixXd::Zero(num_rows, L.num_vars);
  p.h = VectorXd::Zero(num_rows);
  Index row = 0;

  // positive gradients along each fluence-map row
  Index b0 = 0;
  for (const Beam& beam : beams) {
    for (int r = 0; r < beam.rows; ++r) {
      for (int c = 0; c < beam.cols; ++c) {
        const Index b = b0 + r * beam.cols + c;
        p.G(row, b) = 1.0;
        if (c > 0) p.G(row, b - 1) = -1.0;
        p.G(row, nb + b) = -1.0;
        ++row;
      }
    }
    b0 += beam.beamlet_count();
  }
  p.G.row(row).segment(nb, nb).setOnes();
  p.h(row) = pr.complexity_bound;
  ++row;

  f.term_costs = MatrixXd::Zero(L.num_vars, static_cast<Index>(nt));
  for (std::size_t t = 0; t < nt; ++t) {
    const ObjectiveTerm& term = pr.terms[t];
    const std::size_t s = sidx(term.structure);
    auto cost = f.term_costs.col(static_cast<Index>(t));
    if (term.kind == TermKind::MeanDose) {
      cost.head(nb) = pr.mean_rows[s];
      continue;
    }
    const Index a = L.aux[t];
    if (a < 0) continue;
    const MatrixXd& R = pr.rows[s];
    const Index nv = R.rows();
    for (Index v = 0; v < nv; ++v, ++row) {
      switch (term.kind) {
        case TermKind::MaxDose:  // A_v w - t <= 0
          p.G.row(row).head(nb) = R.row(v);
          p.G(row, a) = -1.0;
          break;
        case TermKind::AvgAboveThreshold:
        case TermKind::AvgOverdose:  // A_v w - s_v <= tau
          p.G.row(row).head(nb) = R.row(v);
          p.G(row, a + v) = -1.0;
          p.h(row) = term.threshold;
          break;
        case TermKind::AvgUnderdose:  // -A_v w - u_v <= -rho
          p.G.row(row).head(nb) = -R.row(v);
          p.G(row, a + v) = -1.0;
          p.h(row) = -term.threshold;
          break;
        case TermKind::MeanDose:
          break;
      }
    }
    if (term.kind == TermKind::MaxDose) {
      cost(a) = 1.0;
    } else {
      cost.segment(a, nv).setConstant(1.0 / static_cast<double>(nv));
    }
  }

  p.c = VectorXd::Zero(L.num_vars);
  for (std::size_t t = 0; t < nt; ++t) {
    if (alpha.empty() || alpha[t] == 0.0) continue;
    p.c += alpha[t] * f.term_costs.col(static_cast<Index>(t));
  }
  return f;
}

}  // namespace

std::string_view term_kind_name(TermKind k) {
  switch (k) {
    case TermKind::MeanDose: return "MeanDose";
    case TermKind::MaxDose: return "MaxDose";
    case TermKind::AvgAboveThreshold: return "AvgAboveThreshold";
    case TermKind::AvgUnderdose: return "AvgUnderdose";
    case TermKind::AvgOverdose: return "AvgOverdose";
  }
  return "?";
}

std::string ObjectiveTerm::label() const {
  std::ostringstream os;
  os << structure_name(structure) << ':' << term_kind_name(kind);
  if (kind == TermKind::AvgAboveThreshold) os << '@' << level;
  return os.str();
}

double quantile(std::span<const double> values, double p) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<ObjectiveTerm> build_terms(const Phantom& phantom, std::span<const double> dose) {
  if (dose.size() != phantom.grid.size()) throw std::invalid_argument("dose size does not match the phantom grid");
  std::vector<ObjectiveTerm> terms;
  terms.reserve(kNumTerms);
  for (StructureId o : kOrgansAtRisk) {
    const auto voxels = phantom.grid.voxels_of(o);
    if (voxels.empty()) throw std::invalid_argument("structure " + std::string(structure_name(o)) + " is empty");
    std::vector<double> d;
    d.reserve(voxels.size());
    for (auto v : voxels) d.push_back(dose[v]);
    terms.push_back({o, TermKind::MeanDose});
    terms.push_back({o, TermKind::MaxDose});
    for (double p : kThresholdLevels) terms.push_back({o, TermKind::AvgAboveThreshold, quantile(d, p), p});
  }
  for (StructureId t : kTargets) {
    if (phantom.grid.voxels_of(t).empty()) {
      throw std::invalid_argument("structure " + std::string(structure_name(t)) + " is empty");
    }
    const double rx = prescription_gy(t);
    terms.push_back({t, TermKind::MaxDose});
    terms.push_back({t, TermKind::AvgUnderdose, rx});
    terms.push_back({t, TermKind::AvgOverdose, rx});
  }
  return terms;
}

double term_value(const ObjectiveTerm& term, std::span<const double> dose, std::span<const std::size_t> voxels) {
  if (voxels.empty()) throw std::invalid_argument("term over an empty voxel set");
  double acc = 0.0;
  switch (term.kind) {
    case TermKind::MeanDose:
      for (auto v : voxels) acc += dose[v];
      break;
    case TermKind::MaxDose: {
      double m = dose[voxels.front()];
      for (auto v : voxels) m = std::max(m, dose[v]);
      return m;
    }
    case TermKind::AvgAboveThreshold:
    case TermKind::AvgOverdose:
      for (auto v : voxels) acc += std::max(0.0, dose[v] - term.threshold);
      break;
    case TermKind::AvgUnderdose:
      for (auto v : voxels) acc += std::max(0.0, term.threshold - dose[v]);
      break;
  }
  return acc / static_cast<double>(voxels.size());
}

double spg_complexity(std::span<const double> fluence, std::span<const Beam> beams) {
  std::size_t total = 0;
  for (const Beam& b : beams) total += static_cast<std::size_t>(b.beamlet_count());
  if (total != fluence.size()) throw std::invalid_argument("fluence length does not match the beam partition");
  double spg = 0.0;
  std::size_t b0 = 0;
  for (const Beam& beam : beams) {
    for (int r = 0; r < beam.rows; ++r) {
      double prev = 0.0;
      for (int c = 0; c < beam.cols; ++c) {
        const double w = fluence[b0 + static_cast<std::size_t>(r * beam.cols + c)];
        spg += std::max(0.0, w - prev);
        prev = w;
      }
    }
    b0 += static_cast<std::size_t>(beam.beamlet_count());
  }
  return spg;
}

bool on_simplex(std::span<const double> alpha, double tol) {
  double sum = 0.0;
  for (double a : alpha) {
    if (!(a >= -tol)) return false;
    sum += a;
  }
  return std::abs(sum - 1.0) <= tol;
}

ObjectiveWeights reference_weights() {
  ObjectiveWeights w;
  w.reserve(kNumTerms);
  for (std::size_t o = 0; o < kOrgansAtRisk.size(); ++o) {
    w.push_back(1.0);  // mean
    w.push_back(0.5);  // max
    for (std::size_t k = 0; k < kThresholdLevels.size(); ++k) w.push_back(0.5);
  }
  for (std::size_t t = 0; t < kTargets.size(); ++t) {
    w.push_back(2.0);   // max
    w.push_back(40.0);  // underdose
    w.push_back(5.0);   // overdose
  }
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= sum;
  return w;
}

ForwardProblem make_forward_problem(const Phantom& phantom, const InfluenceMatrix& influence,
                                    std::vector<ObjectiveTerm> terms, double complexity_bound,
                                    const ForwardOptions& options) {
  if (!(complexity_bound >= 0.0) || !std::isfinite(complexity_bound)) {
    throw std::invalid_argument("complexity bound must be finite and nonnegative");
  }
  if (influence.num_voxels() != phantom.grid.size()) throw std::invalid_argument("influence matrix does not match phantom");
  if (options.max_voxels_per_target == 0 || options.max_voxels_per_organ == 0) {
    throw std::invalid_argument("voxel caps must be positive");
  }
  for (const auto& t : terms) {
    if (!std::isfinite(t.threshold)) throw std::invalid_argument("term threshold must be finite");
  }

  ForwardProblem pr;
  pr.influence = &influence;
  pr.terms = std::move(terms);
  pr.complexity_bound = complexity_bound;
  pr.simplex = options.simplex;
  const Index nb = static_cast<Index>(influence.num_beamlets());
  for (std::size_t s = 0; s < kNumStructures; ++s) {
    const auto id = static_cast<StructureId>(s);
    if (id == StructureId::Unclassified) continue;
    pr.all_voxels[s] = phantom.grid.voxels_of(id);
    if (pr.all_voxels[s].empty()) continue;
    pr.voxels[s] =
        stride_sample(pr.all_voxels[s], is_target(id) ? options.max_voxels_per_target : options.max_voxels_per_organ);
    const auto dense = influence.dense_rows(pr.voxels[s]);
    pr.rows[s] = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        dense.data(), static_cast<Index>(pr.voxels[s].size()), nb);
    const auto all = influence.dense_rows(pr.all_voxels[s]);
    pr.mean_rows[s] = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                          all.data(), static_cast<Index>(pr.all_voxels[s].size()), nb)
                          .colwise()
                          .mean()
                          .transpose();
  }
  for (const auto& t : pr.terms) {
    if (pr.all_voxels[sidx(t.structure)].empty()) {
      throw std::invalid_argument("structure " + std::string(structure_name(t.structure)) + " is empty");
    }
  }
  return pr;
}

std::vector<double> term_values(const ForwardProblem& problem, std::span<const double> dose) {
  if (dose.size() != problem.influence->num_voxels()) throw std::invalid_argument("dose size does not match the problem");
  std::vector<double> out;
  out.reserve(problem.terms.size());
  for (const auto& t : problem.terms) {
    const std::size_t s = sidx(t.structure);
    out.push_back(term_value(t, dose, t.kind == TermKind::MeanDose ? problem.all_voxels[s] : problem.voxels[s]));
  }
  return out;
}

double weighted_objective(std::span<const double> alpha, std::span<const double> values) {
  if (alpha.size() != values.size()) throw std::invalid_argument("weights and term values differ in length");
  double acc = 0.0;
  for (std::size_t t = 0; t < alpha.size(); ++t) acc += alpha[t] * values[t];
  return acc;
}

std::string_view plan_source_name(PlanSource s) {
  switch (s) {
    case PlanSource::Clinical: return "clinical";
    case PlanSource::GAN: return "gan";
    case PlanSource::CNN: return "cnn";
    case PlanSource::RF: return "rf";
    case PlanSource::Mimic: return "mimic";
  }
  return "?";
}

PlanSource plan_source_from_name(std::string_view name) {
  for (auto s : {PlanSource::Clinical, PlanSource::GAN, PlanSource::CNN, PlanSource::RF, PlanSource::Mimic}) {
    if (plan_source_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown plan source '" + std::string(name) + "'");
}

Plan solve_forward(const ForwardProblem& problem, std::span<const double> alpha, PlanSource source) {
  if (alpha.size() != problem.terms.size()) throw std::invalid_argument("one weight per term is required");
  if (!on_simplex(alpha)) throw std::invalid_argument("weights must lie on the unit simplex");

  const ForwardLp f = build_forward_lp(problem, alpha, false);
  const lp::LpSolution sol = lp::simplex_solve(f.lp, problem.simplex);
  if (sol.status != lp::LpStatus::Optimal) {
    throw PlanError(std::string("forward LP ") + lp::to_string(sol.status) + ": " + sol.diagnostics);
  }
  if (!lp::is_certified(sol)) {
    std::ostringstream os;
    os << "forward LP certificate failed: primal " << sol.certificate.primal_infeasibility << ", dual "
       << sol.certificate.dual_infeasibility << ", gap " << sol.certificate.gap;
    throw PlanError(os.str());
  }

  Plan plan;
  plan.source = source;
  plan.fluence.resize(problem.num_beamlets());
  for (std::size_t b = 0; b < plan.fluence.size(); ++b) plan.fluence[b] = std::max(0.0, sol.x(static_cast<Index>(b)));
  const auto& beams = problem.influence->beams();
  plan.complexity = spg_complexity(plan.fluence, beams);
  if (plan.complexity > problem.complexity_bound) {
    // LP tolerance only; pull the fluence back onto the bound
    const double k = problem.complexity_bound / plan.complexity;
    for (double& w : plan.fluence) w *= k;
    plan.complexity = spg_complexity(plan.fluence, beams);
  }
  plan.complexity_bound = problem.complexity_bound;
  plan.dose = compute_dose(*problem.influence, plan.fluence).values;
  plan.term_values = term_values(problem, plan.dose);
  plan.alpha.assign(alpha.begin(), alpha.end());
  plan.objective = sol.objective;
  plan.certificate = sol.certificate;
  plan.iterations = sol.iterations;
  return plan;
}

InverseResult inverse_weights(const ForwardProblem& problem, std::span<const double> target_dose) {
  const std::vector<double> f = term_values(problem, target_dose);
  const ForwardLp fwd = build_forward_lp(problem, {}, true);
  const Index nt = static_cast<Index>(problem.terms.size());
  const Index n = fwd.layout.num_vars;
  const Index m = fwd.lp.G.rows();

  // Relative-gap inverse LP: min_alpha sum_t alpha_t f_t(target) subject to
  // the forward optimum at alpha being >= 1 (the absolute gap on the simplex
  // is trivially 0 whenever some term is 0 at the target and at zero fluence).
  // The forward model is homogeneous in (fluence, thresholds, bound), so its
  // LP dual reduces to the forward-shaped
  //   min z  s.t.  f_t(x) <= z f_t(target) for every term, x forward-feasible,
  // alpha is the multiplier vector of the term rows, and z* is the forward
  // optimum over the target objective (1 for an optimal target).
  lp::LpProblem d;
  d.c = VectorXd::Zero(n + 1);
  d.c(n) = 1.0;
  d.G = MatrixXd::Zero(nt + m, n + 1);
  d.G.topLeftCorner(nt, n) = fwd.term_costs.transpose();
  d.G.col(n).head(nt) = -Eigen::Map<const VectorXd>(f.data(), nt);
  d.G.bottomLeftCorner(m, n) = fwd.lp.G;
  d.h = VectorXd::Zero(nt + m);
  d.h.tail(m) = fwd.lp.h;
  d.nonneg.assign(static_cast<std::size_t>(n + 1), true);

  InverseResult out;
  out.lp = lp::simplex_solve(d, problem.simplex);
  if (out.lp.status != lp::LpStatus::Optimal) {
    throw PlanError(std::string("inverse LP ") + lp::to_string(out.lp.status) + ": " + out.lp.diagnostics);
  }
  if (!lp::is_certified(out.lp)) {
    std::ostringstream os;
    os << "inverse LP certificate failed: primal " << out.lp.certificate.primal_infeasibility << ", dual "
       << out.lp.certificate.dual_infeasibility << ", gap " << out.lp.certificate.gap;
    throw PlanError(os.str());
  }
  out.alpha.resize(static_cast<std::size_t>(nt));
  double sum = 0.0;
  for (Index t = 0; t < nt; ++t) sum += out.alpha[static_cast<std::size_t>(t)] = std::max(0.0, out.lp.lambda(t));
  if (!(sum > 0.0)) throw PlanError("inverse LP returned no positive weight");
  for (double& a : out.alpha) a /= sum;
  out.target_objective = weighted_objective(out.alpha, f);
  out.ratio = out.lp.objective;
  out.gap = out.target_objective * (1.0 - out.ratio);
  return out;
}

std::vector<double> template_dose(const Phantom& phantom) {
  const VoxelGrid& g = phantom.grid;
  const auto d56 = distance_to_surface(g, StructureId::PTV56);
  std::vector<double> out(g.size(), 0.0);
  const auto labels = g.labels();
  const auto density = g.density();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (is_target(labels[i])) {
      out[i] = prescription_gy(labels[i]);
    } else if (density[i] > 0.0f) {
      out[i] = prescription_gy(StructureId::PTV56) * std::exp(-d56[i] / 15.0);
    }
  }
  return out;
}

double reference_complexity_bound(std::span<const Beam> beams, double per_row) {
  double rows = 0.0;
  for (const Beam& b : beams) rows += b.rows;
  return per_row * rows;
}

Plan reference_plan(const Phantom& phantom, const InfluenceMatrix& influence, const ForwardOptions& options) {
  const auto tmpl = template_dose(phantom);
  const ForwardProblem pr = make_forward_problem(phantom, influence, build_terms(phantom, tmpl),
                                                 reference_complexity_bound(influence.beams()), options);
  return solve_forward(pr, reference_weights(), PlanSource::Clinical);
}

}  // namespace kbp
