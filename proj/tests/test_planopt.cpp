#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "kbp/planopt.hpp"

using namespace kbp;

namespace {

struct Fixture {
  Phantom phantom;
  InfluenceMatrix influence;
};

const Fixture& small_patient() {
  static const Fixture f = [] {
    Fixture x;
    x.phantom = generate_phantom(21, {{20, 20, 8}, {}});
    x.influence = influence_matrix(x.phantom.grid, make_beams(x.phantom));
    return x;
  }();
  return f;
}

const Plan& small_reference() {
  static const Plan p = reference_plan(small_patient().phantom, small_patient().influence);
  return p;
}

ForwardProblem small_problem() {
  const auto& f = small_patient();
  const Plan& ref = small_reference();
  return make_forward_problem(f.phantom, f.influence, build_terms(f.phantom, ref.dose), ref.complexity);
}

// Two single-beamlet beams over a four-voxel grid; SPG reduces to w1 + w2.
struct Toy {
  Phantom phantom;
  InfluenceMatrix influence;
  std::vector<ObjectiveTerm> terms;
};

Toy toy_problem() {
  Toy t;
  t.phantom.grid = VoxelGrid({4, 1, 1}, {4, 4, 2});
  auto labels = t.phantom.grid.labels();
  labels[0] = StructureId::PTV70;
  labels[1] = StructureId::Larynx;
  labels[2] = StructureId::Brainstem;
  labels[3] = StructureId::Larynx;
  for (auto& d : t.phantom.grid.density()) d = 1.0f;
  std::vector<Beam> beams(2);
  beams[1].gantry_deg = 90.0;
  std::vector<SparseColumn> cols(2);
  cols[0] = {{0, 1, 2, 3}, {5.0f, 3.0f, 0.5f, 1.0f}};
  cols[1] = {{0, 1, 2, 3}, {4.0f, 0.5f, 4.0f, 2.0f}};
  t.influence = InfluenceMatrix({4, 1, 1}, {4, 4, 2}, beams, cols);
  t.terms = {{StructureId::PTV70, TermKind::AvgUnderdose, 70.0},
             {StructureId::PTV70, TermKind::AvgOverdose, 70.0},
             {StructureId::Larynx, TermKind::MeanDose},
             {StructureId::Brainstem, TermKind::MaxDose},
             {StructureId::Larynx, TermKind::AvgAboveThreshold, 20.0, 0.5}};
  return t;
}

double toy_objective(const Toy& t, std::span<const double> alpha, double w1, double w2) {
  const double a[2] = {w1, w2};
  const auto dose = compute_dose(t.influence, a).values;
  double obj = 0.0;
  for (std::size_t k = 0; k < t.terms.size(); ++k) {
    obj += alpha[k] * term_value(t.terms[k], dose, t.phantom.grid.voxels_of(t.terms[k].structure));
  }
  return obj;
}

}  // namespace

TEST_CASE("quantile interpolates between order statistics") {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  CHECK(quantile(v, 0.0) == 1.0);
  CHECK(quantile(v, 1.0) == 4.0);
  CHECK(quantile(v, 0.5) == doctest::Approx(2.5));
  CHECK(quantile(v, 0.25) == doctest::Approx(1.75));
  CHECK_THROWS_AS(quantile(std::vector<double>{}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(quantile(v, 1.5), std::invalid_argument);
}

TEST_CASE("build_terms emits seven terms per organ and three per target") {
  const auto& f = small_patient();
  const auto terms = build_terms(f.phantom, small_reference().dose);
  REQUIRE(terms.size() == 65);
  for (std::size_t o = 0; o < 8; ++o) {
    CHECK(terms[7 * o].kind == TermKind::MeanDose);
    CHECK(terms[7 * o + 1].kind == TermKind::MaxDose);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(terms[7 * o + 2 + k].kind == TermKind::AvgAboveThreshold);
      CHECK(terms[7 * o + 2 + k].level == kThresholdLevels[k]);
      if (k > 0) CHECK(terms[7 * o + 1 + k].threshold <= terms[7 * o + 2 + k].threshold);
    }
  }
  for (std::size_t t = 0; t < 3; ++t) {
    const auto& mx = terms[56 + 3 * t];
    CHECK(mx.kind == TermKind::MaxDose);
    CHECK(terms[57 + 3 * t].threshold == prescription_gy(mx.structure));
    CHECK(terms[58 + 3 * t].kind == TermKind::AvgOverdose);
  }

  std::vector<double> uniform(f.phantom.grid.size(), 30.0);
  for (const auto& t : build_terms(f.phantom, uniform)) {
    if (t.kind == TermKind::AvgAboveThreshold) CHECK(t.threshold == 30.0);
  }

  Phantom missing = f.phantom;
  for (auto& l : missing.grid.labels()) {
    if (l == StructureId::Larynx) l = StructureId::Unclassified;
  }
  CHECK_THROWS_WITH_AS(build_terms(missing, uniform), doctest::Contains("Larynx"), std::invalid_argument);
  CHECK_THROWS_AS(build_terms(f.phantom, std::vector<double>(3, 0.0)), std::invalid_argument);
}

TEST_CASE("term_value formulas") {
  const std::vector<double> dose{40.0, 60.0, 70.0};
  const std::vector<std::size_t> two{0, 1};
  CHECK(term_value({StructureId::Larynx, TermKind::AvgAboveThreshold, 50.0}, dose, two) == 5.0);
  CHECK(term_value({StructureId::Larynx, TermKind::MaxDose}, dose, two) == 60.0);
  CHECK(term_value({StructureId::Larynx, TermKind::MeanDose}, dose, two) == 50.0);
  const std::vector<std::size_t> hot{2};
  CHECK(term_value({StructureId::PTV70, TermKind::AvgUnderdose, 70.0}, dose, hot) == 0.0);
  CHECK(term_value({StructureId::PTV70, TermKind::AvgOverdose, 70.0}, dose, hot) == 0.0);
  CHECK(term_value({StructureId::PTV70, TermKind::AvgUnderdose, 70.0}, dose, two) == 20.0);
  CHECK_THROWS_AS(term_value({StructureId::Larynx, TermKind::MeanDose}, dose, std::vector<std::size_t>{}),
                  std::invalid_argument);
}

TEST_CASE("spg_complexity") {
  std::vector<Beam> one(1);
  one[0].rows = 1;
  one[0].cols = 3;
  CHECK(spg_complexity(std::vector<double>{1, 2, 1}, one) == 2.0);
  CHECK(spg_complexity(std::vector<double>{0, 0, 0}, one) == 0.0);
  CHECK_THROWS_AS(spg_complexity(std::vector<double>{1, 2}, one), std::invalid_argument);

  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  const auto& beams = small_patient().influence.beams();
  std::vector<double> w(small_patient().influence.num_beamlets());
  for (auto& x : w) x = u(rng);
  std::vector<double> w3 = w;
  for (auto& x : w3) x *= 3.0;
  CHECK(spg_complexity(w3, beams) == doctest::Approx(3.0 * spg_complexity(w, beams)));
}

TEST_CASE("reference weights lie on the simplex") {
  const auto a = reference_weights();
  CHECK(a.size() == kNumTerms);
  CHECK(on_simplex(a));
  CHECK(!on_simplex(std::vector<double>{0.5, 0.6}));
  CHECK(!on_simplex(std::vector<double>{1.5, -0.5}));
}

TEST_CASE("solve_forward matches a dense grid search on a two-beamlet problem") {
  const Toy toy = toy_problem();
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<double> alpha(toy.terms.size());
    for (auto& a : alpha) a = u(rng);
    const double sum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
    for (auto& a : alpha) a /= sum;
    const double C = 6.0 + 4.0 * u(rng);  // keeps w1 + w2 <= C inside [0, 10]^2

    ForwardOptions opt;
    opt.max_voxels_per_organ = 16;  // keep every voxel so the oracle sees the same terms
    const auto pr = make_forward_problem(toy.phantom, toy.influence, toy.terms, C, opt);
    const Plan plan = solve_forward(pr, alpha);
    CHECK(plan.complexity <= C + 1e-6);
    CHECK(plan.objective == doctest::Approx(toy_objective(toy, alpha, plan.fluence[0], plan.fluence[1])).epsilon(1e-9));

    // coarse grid, then a fine grid around the coarse minimizer
    double best = INFINITY, b1 = 0, b2 = 0;
    for (int i = 0; i <= 1000; ++i)
      for (int j = 0; j <= 1000; ++j) {
        const double w1 = i * 0.01, w2 = j * 0.01;
        if (w1 + w2 > C) continue;
        const double v = toy_objective(toy, alpha, w1, w2);
        if (v < best) best = v, b1 = w1, b2 = w2;
      }
    const double c1 = b1, c2 = b2;
    for (int i = -200; i <= 200; ++i)
      for (int j = -200; j <= 200; ++j) {
        const double w1 = c1 + i * 1e-4, w2 = c2 + j * 1e-4;
        if (w1 < 0 || w2 < 0 || w1 + w2 > C) continue;
        best = std::min(best, toy_objective(toy, alpha, w1, w2));
      }
    CHECK(plan.objective <= best + 1e-9);
    CHECK(std::abs(plan.objective - best) <= 1e-3);
  }
}

TEST_CASE("solve_forward contract on a synthetic patient") {
  const auto& f = small_patient();
  const ForwardProblem pr = small_problem();

  SUBCASE("reference plan is certified and within its complexity budget") {
    const Plan& ref = small_reference();
    CHECK(ref.complexity <= ref.complexity_bound + 1e-6);
    CHECK(ref.complexity_bound == doctest::Approx(reference_complexity_bound(f.influence.beams())));
    CHECK(ref.certificate.gap <= 1e-6 * (1.0 + std::abs(ref.objective)));
    const auto d = compute_dose(f.influence, ref.fluence).values;
    for (std::size_t v = 0; v < d.size(); ++v) CHECK(ref.dose[v] == doctest::Approx(d[v]).epsilon(1e-6));
  }

  SUBCASE("zero complexity budget forces zero fluence") {
    ForwardProblem zero = pr;
    zero.complexity_bound = 0.0;
    const Plan plan = solve_forward(zero, reference_weights());
    for (double w : plan.fluence) CHECK(w <= 1e-9);
    for (double d : plan.dose) CHECK(d <= 1e-7);
  }

  SUBCASE("all weight on one organ mean gives objective zero") {
    std::vector<double> alpha(kNumTerms, 0.0);
    alpha[0] = 1.0;
    const Plan plan = solve_forward(pr, alpha);
    CHECK(plan.objective == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(plan.term_values[0] <= 1e-7);
  }

  SUBCASE("rescaled weights give the same plan") {
    auto alpha = reference_weights();
    std::vector<double> twice(alpha.size());
    double norm = 0.0;
    for (std::size_t t = 0; t < alpha.size(); ++t) norm += 2.0 * alpha[t];
    for (std::size_t t = 0; t < alpha.size(); ++t) twice[t] = 2.0 * alpha[t] / norm;
    const Plan a = solve_forward(pr, alpha);
    const Plan b = solve_forward(pr, twice);
    CHECK(a.objective == doctest::Approx(b.objective).epsilon(1e-9));
  }

  SUBCASE("invalid weights are rejected") {
    CHECK_THROWS_AS(solve_forward(pr, std::vector<double>(kNumTerms, 0.5)), std::invalid_argument);
    CHECK_THROWS_AS(solve_forward(pr, std::vector<double>(3, 1.0 / 3)), std::invalid_argument);
  }
}

TEST_CASE("inverse_weights recovers weights that make a forward plan optimal") {
  const ForwardProblem pr = small_problem();
  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> alpha0(kNumTerms);
  for (auto& a : alpha0) a = u(rng);
  const double sum = std::accumulate(alpha0.begin(), alpha0.end(), 0.0);
  for (auto& a : alpha0) a /= sum;

  const Plan target = solve_forward(pr, alpha0);
  const InverseResult inv = inverse_weights(pr, target.dose);
  CHECK(on_simplex(inv.alpha));
  CHECK(std::abs(std::accumulate(inv.alpha.begin(), inv.alpha.end(), 0.0) - 1.0) <= 1e-9);
  CHECK(lp::is_certified(inv.lp));

  // the gap at alpha0 is (numerically) zero, so the optimum cannot exceed it
  const double gap0 = weighted_objective(alpha0, term_values(pr, target.dose)) - target.objective;
  CHECK(inv.gap <= gap0 + 1e-9);
  CHECK(std::abs(inv.gap) <= 1e-6 * (1.0 + std::abs(inv.target_objective)));

  const Plan again = solve_forward(pr, inv.alpha);
  CHECK(std::abs(weighted_objective(inv.alpha, again.term_values) - inv.target_objective) <= 1e-5);
  CHECK(inv.ratio == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("inverse_weights never settles on terms that vanish at zero fluence") {
  const auto& f = small_patient();
  const ForwardProblem pr = small_problem();
  const std::vector<double> zero(f.phantom.grid.size(), 0.0);
  const auto at_zero = term_values(pr, zero);

  // a reachable target and a scaled-down (underdosed) one
  for (double scale : {1.0, 0.5}) {
    std::vector<double> target = small_reference().dose;
    for (auto& d : target) d *= scale;
    const InverseResult inv = inverse_weights(pr, target);
    CHECK(lp::is_certified(inv.lp));
    CHECK(weighted_objective(inv.alpha, at_zero) > 1e-3);
    CHECK(inv.ratio > 0.0);
    CHECK(inv.ratio <= 1.0 + 1e-9);
    const Plan plan = solve_forward(pr, inv.alpha);
    CHECK(plan.complexity > 0.0);
  }
}

TEST_CASE("dose_mimic") {
  const auto& f = small_patient();
  const ForwardProblem pr = small_problem();

  SUBCASE("zero target gives zero fluence") {
    const Plan plan = dose_mimic(pr, std::vector<double>(f.phantom.grid.size(), 0.0));
    for (double w : plan.fluence) CHECK(w == 0.0);
    CHECK(plan.mimic_residual == 0.0);
  }

  SUBCASE("an achievable target is reproduced and descent is monotone") {
    std::vector<double> w0 = small_reference().fluence;
    for (auto& w : w0) w *= 0.8;  // strictly inside the budget
    const auto target = compute_dose(f.influence, w0).values;
    double norm = 0.0;
    for (double d : target) norm += d * d;
    MimicTrace trace;
    const Plan plan = dose_mimic(pr, target, {}, &trace);
    CHECK(plan.complexity <= pr.complexity_bound + 1e-6);
    CHECK(plan.mimic_residual <= 1e-4 * std::sqrt(norm));
    REQUIRE(!trace.objective_history.empty());
    for (const auto& h : trace.objective_history)
      for (std::size_t k = 1; k < h.size(); ++k) CHECK(h[k] <= h[k - 1]);
  }

  SUBCASE("an infeasible target is pulled onto the complexity bound") {
    std::vector<double> target = small_reference().dose;
    for (auto& d : target) d *= 1.6;
    const Plan plan = dose_mimic(pr, target);
    CHECK(plan.complexity <= pr.complexity_bound + 1e-6);
    CHECK(plan.mimic_residual > 0.0);
  }

  SUBCASE("size mismatch") {
    CHECK_THROWS_AS(dose_mimic(pr, std::vector<double>(5, 1.0)), std::invalid_argument);
  }
}

TEST_CASE("KBPP plan round trip") {
  const auto& f = small_patient();
  const ForwardProblem pr = small_problem();
  const Plan& ref = small_reference();
  std::stringstream ss;
  write_plan(ss, ref, pr, f.phantom.grid.dims(), f.phantom.grid.spacing());
  const PlanRecord rec = read_plan(ss);
  CHECK(rec.plan.source == PlanSource::Clinical);
  CHECK(rec.plan.alpha == ref.alpha);
  CHECK(rec.plan.complexity_bound == ref.complexity_bound);
  CHECK(rec.terms.size() == 65);
  CHECK(rec.terms[9].label() == pr.terms[9].label());
  CHECK(rec.terms[9].threshold == pr.terms[9].threshold);
  CHECK(rec.beams.size() == 9);
  CHECK(rec.beams[2].cols == f.influence.beams()[2].cols);
  CHECK(rec.dims == f.phantom.grid.dims());
  REQUIRE(rec.plan.dose.size() == ref.dose.size());
  for (std::size_t v = 0; v < ref.dose.size(); ++v) CHECK(rec.plan.dose[v] == static_cast<float>(ref.dose[v]));
  REQUIRE(rec.plan.fluence.size() == ref.fluence.size());

  std::stringstream bad("KBPX");
  CHECK_THROWS(read_plan(bad));
}
