#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "gamma_oracle.hpp"
#include "kbp/planeval.hpp"

using namespace kbp;
using kbp::testing::brute_force_gamma;

namespace {

// One voxel per criterion structure along x, plus one unclassified voxel.
Phantom line_phantom() {
  Phantom p;
  p.grid = VoxelGrid({11, 1, 1}, {});
  auto labels = p.grid.labels();
  const auto& crit = clinical_criteria();
  for (std::size_t i = 0; i < crit.size(); ++i) labels[i] = crit[i].structure;
  labels[10] = StructureId::Unclassified;
  return p;
}

// Doses that meet each criterion with the given margin.
std::vector<double> line_dose(double margin) {
  std::vector<double> d(11, 5.0);
  const auto& crit = clinical_criteria();
  for (std::size_t i = 0; i < crit.size(); ++i) {
    d[i] = crit[i].comparator == Comparator::AtMost ? crit[i].threshold - margin : crit[i].threshold + margin;
  }
  return d;
}

const CriterionResult& find(const CriteriaReport& r, StructureId s) {
  for (const auto& c : r.results)
    if (c.criterion.structure == s) return c;
  throw std::logic_error("criterion missing");
}

}  // namespace

TEST_CASE("dose statistics") {
  const std::vector<std::size_t> two{0, 1};
  const std::vector<double> uniform(5, 70.0);
  const std::vector<std::size_t> all{0, 1, 2, 3, 4};
  const DoseStats u = dose_stats(uniform, all);
  CHECK(u.mean == doctest::Approx(70.0));
  CHECK(u.max == 70.0);
  CHECK(u.d99 == doctest::Approx(70.0));

  const std::vector<double> spread{0.0, 100.0};
  CHECK(dose_stats(spread, two).d99 == doctest::Approx(1.0));
  const std::vector<double> pair{40.0, 60.0};
  CHECK(dose_stats(pair, two).max == 60.0);
  CHECK(dose_stats(pair, two).mean == doctest::Approx(50.0));

  CHECK_THROWS_AS(dose_stats(pair, std::vector<std::size_t>{}), EvalError);
  CHECK_THROWS_AS(dose_stats(pair, std::vector<std::size_t>{2}), EvalError);
}

TEST_CASE("DVH starts at one and is non-increasing") {
  const Phantom p = generate_phantom(4, {{24, 24, 8}, {}});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 75.0);
  std::vector<double> dose(p.grid.size());
  for (auto& d : dose) d = u(rng);
  const DvhCurve c = dvh(dose, p.grid, StructureId::PTV70);
  REQUIRE(c.volume_fraction.size() == 801);
  CHECK(c.volume_fraction.front() == 1.0);
  CHECK(c.volume_fraction.back() == 0.0);
  for (std::size_t k = 1; k < c.volume_fraction.size(); ++k) CHECK(c.volume_fraction[k] <= c.volume_fraction[k - 1]);
  // direct count at 30 Gy
  const auto vox = p.grid.voxels_of(StructureId::PTV70);
  std::size_t above = 0;
  for (auto v : vox) above += dose[v] >= 30.0;
  CHECK(c.volume_fraction[300] == doctest::Approx(static_cast<double>(above) / static_cast<double>(vox.size())));

  Phantom empty = line_phantom();
  CHECK_THROWS_AS(dvh(std::vector<double>(11, 1.0), empty.grid, StructureId::LimPostNeck), EvalError);
  CHECK_THROWS_AS(dvh(std::vector<double>(3, 1.0), empty.grid, StructureId::PTV70), EvalError);
}

TEST_CASE("clinical criteria: margins and inclusive thresholds") {
  const auto& crit = clinical_criteria();
  CHECK(crit.size() == 10);
  int targets = 0;
  for (const auto& c : crit) targets += c.is_target();
  CHECK(targets == 3);
  CHECK(crit[0].label() == "Brainstem Dmax <= 54");

  const Phantom p = line_phantom();
  auto dose = line_dose(1.0);
  dose[0] = 50.0;  // brainstem 50 against a 54 limit
  dose[4] = 46.0;  // larynx 46 against 45
  dose[9] = 66.5;  // PTV70 exactly at the coverage limit
  const CriteriaReport r = criteria_check(dose, p);
  CHECK(find(r, StructureId::Brainstem).margin == doctest::Approx(4.0));
  CHECK(find(r, StructureId::Brainstem).pass);
  CHECK(find(r, StructureId::Larynx).margin == doctest::Approx(-1.0));
  CHECK_FALSE(find(r, StructureId::Larynx).pass);
  CHECK(find(r, StructureId::PTV70).margin == 0.0);
  CHECK(find(r, StructureId::PTV70).pass);
  CHECK(criterion_margin(crit[9], 66.0) == doctest::Approx(-0.5));

  CHECK_THROWS_AS(criteria_check(std::vector<double>(3, 0.0), p), EvalError);
}

TEST_CASE("missing structure is not evaluable and not counted") {
  Phantom p = line_phantom();
  p.grid.labels()[4] = StructureId::Unclassified;  // drop larynx
  const CriteriaReport r = criteria_check(line_dose(1.0), p);
  CHECK_FALSE(find(r, StructureId::Larynx).evaluable);
  const std::vector<CriteriaReport> pop{r};
  const SatisfactionRates s = aggregate_criteria(pop);
  CHECK(s.oar_count == 6);
  CHECK(s.oar == 100.0);
}

TEST_CASE("aggregate satisfaction rates") {
  const Phantom p = line_phantom();
  for (std::size_t n : {1u, 3u, 7u}) {
    std::vector<CriteriaReport> pop(n, criteria_check(line_dose(0.5), p));
    SatisfactionRates s = aggregate_criteria(pop);
    CHECK(s.oar == 100.0);
    CHECK(s.ptv == 100.0);
    CHECK(s.all == 100.0);
    CHECK(s.oar_count == 7 * n);
    CHECK(s.ptv_count == 3 * n);
    auto bad = line_dose(0.5);
    bad[1] = 49.0;  // one spinal cord failure
    pop[0] = criteria_check(bad, p);
    s = aggregate_criteria(pop);
    const double nn = static_cast<double>(n);
    CHECK(s.oar == doctest::Approx(100.0 * (7 * nn - 1) / (7 * nn)));
    CHECK(s.ptv == 100.0);
    CHECK(s.all == doctest::Approx(100.0 * (10 * nn - 1) / (10 * nn)));
  }
  CHECK_THROWS_AS(aggregate_criteria(std::vector<CriteriaReport>{}), EvalError);
}

TEST_CASE("head to head: positive means the KBP plan is better") {
  const Phantom p = line_phantom();
  auto kbp = line_dose(1.0), clin = line_dose(1.0);
  kbp[0] = 46.0;
  clin[0] = 50.0;  // brainstem 4 Gy lower
  kbp[9] = 67.5;
  clin[9] = 67.0;  // PTV70 0.5 Gy more coverage
  const auto h = head_to_head(criteria_check(kbp, p), criteria_check(clin, p));
  REQUIRE(h.size() == 10);
  CHECK(h[0].difference == doctest::Approx(4.0));
  CHECK(h[9].difference == doctest::Approx(0.5));
  CHECK(h[9].target);
  CHECK(h[1].difference == 0.0);

  const auto self = head_to_head(criteria_check(clin, p), criteria_check(clin, p));
  for (const auto& x : self) CHECK(x.difference == 0.0);
  const std::vector<std::vector<HeadToHead>> self_pop{self};
  CHECK(at_least_reference(self_pop).all == 100.0);

  auto worse = clin;
  worse[2] = clin[2] + 1.0;  // one parotid worse
  const std::vector<std::vector<HeadToHead>> pop{head_to_head(criteria_check(worse, p), criteria_check(clin, p))};
  const auto s = at_least_reference(pop);
  CHECK(s.oar == doctest::Approx(600.0 / 7.0));
  CHECK(s.ptv == 100.0);
}

TEST_CASE("normalization to the reference PTV70 D99") {
  const Phantom p = generate_phantom(8, {{24, 24, 8}, {}});
  const auto ptv = p.grid.voxels_of(StructureId::PTV70);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(55.0, 75.0);
  std::vector<double> ref(p.grid.size()), plan(p.grid.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref[i] = u(rng);
    plan[i] = ref[i] / 1.1;
  }
  const Normalized n = normalize_to_reference(plan, ref, p);
  CHECK(n.scale == doctest::Approx(1.1).epsilon(1e-12));
  CHECK(std::abs(dose_stats(n.dose, ptv).d99 - dose_stats(ref, ptv).d99) < 1e-9);
  // idempotent
  const Normalized again = normalize_to_reference(n.dose, ref, p);
  CHECK(again.scale == doctest::Approx(1.0).epsilon(1e-12));
  for (std::size_t i = 0; i < ref.size(); i += 97) CHECK(std::abs(again.dose[i] - n.dose[i]) < 1e-9);

  std::vector<double> zero(p.grid.size(), 0.0);
  CHECK_THROWS_AS(normalize_to_reference(zero, ref, p), EvalError);
  std::vector<double> faint(plan);
  for (auto& d : faint) d *= 1e-9;
  CHECK_THROWS_AS(normalize_to_reference(faint, ref, p), EvalError);
  Phantom no_ptv = line_phantom();
  no_ptv.grid.labels()[9] = StructureId::Unclassified;
  CHECK_THROWS_AS(normalize_to_reference(line_dose(1), line_dose(1), no_ptv), EvalError);
}

TEST_CASE("gamma: uniform fields") {
  const Dims d{10, 10, 6};
  const Spacing sp{};
  const std::vector<double> ref(d.count(), 70.0);
  auto scaled = [&](double f) {
    std::vector<double> e(ref);
    for (auto& x : e) x *= f;
    return e;
  };
  const GammaResult same = gamma_pass_rate(ref, ref, d, sp);
  CHECK(same.rate == 1.0);
  CHECK(same.evaluated == d.count());
  CHECK(gamma_pass_rate(scaled(1.02), ref, d, sp).rate == 1.0);
  const GammaResult far = gamma_pass_rate(scaled(1.10), ref, d, sp);
  CHECK(far.rate == 0.0);
  CHECK(far.gamma[0] == doctest::Approx(7.0 / 2.1));  // no spatial help in a flat field

  GammaOptions local;
  local.normalization = GammaNormalization::Local;
  CHECK(gamma_pass_rate(scaled(1.02), ref, d, sp, local).rate == 1.0);

  // nothing above the cutoff: vacuous pass
  const std::vector<double> zero(d.count(), 0.0);
  const GammaResult vac = gamma_pass_rate(zero, zero, d, sp);
  CHECK(vac.evaluated == 0);
  CHECK(vac.rate == 1.0);
}

TEST_CASE("gamma matches an exhaustive search on random volumes") {
  const Dims d{12, 12, 12};
  const Spacing sp{2.0, 2.5, 3.0};
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const auto [eval, ref] = kbp::testing::random_gamma_pair(d, rng, trial % 3, 2.5);
    GammaOptions o;
    if (trial >= 3) o.normalization = GammaNormalization::Local;
    const GammaResult g = gamma_pass_rate(eval, ref, d, sp, o);
    const auto oracle = brute_force_gamma(eval, ref, d, sp, o);
    std::size_t evaluated = 0, passed = 0;
    for (std::size_t v = 0; v < oracle.size(); ++v) {
      if (oracle[v] < 0) {
        CHECK(g.gamma[v] < 0);
        continue;
      }
      ++evaluated;
      passed += oracle[v] <= 1.0;
      if (oracle[v] <= 2.0) CHECK(g.gamma[v] == doctest::Approx(oracle[v]).epsilon(1e-12));
      else CHECK(g.gamma[v] > 2.0 - 1e-12);
    }
    CHECK(g.evaluated == evaluated);
    CHECK(g.passed == passed);
    CHECK(g.evaluated > 0);
    CHECK(g.passed < g.evaluated);
  }
}

TEST_CASE("gamma is asymmetric and respects masks") {
  const Dims d{9, 9, 5};
  const Spacing sp{};
  std::vector<double> a(d.count(), 0.0), b(d.count(), 0.0);
  // a is a single hot voxel, b is flat at the same level
  a[d.count() / 2] = 70.0;
  std::fill(b.begin(), b.end(), 70.0);
  const double ab = gamma_pass_rate(a, b, d, sp).rate;  // every b voxel evaluated, most fail
  const double ba = gamma_pass_rate(b, a, d, sp).rate;  // only the hot voxel evaluated, passes
  CHECK(ba == 1.0);
  CHECK(ab < 0.1);

  std::vector<std::uint8_t> mask(d.count(), 0);
  mask[d.count() / 2] = 1;
  const GammaResult m = gamma_pass_rate(a, b, d, sp, {}, mask);
  CHECK(m.evaluated == 1);
  CHECK(m.rate == 1.0);

  CHECK_THROWS_AS(gamma_pass_rate(a, std::vector<double>(3), d, sp), EvalError);
  CHECK_THROWS_AS(gamma_pass_rate(a, b, d, sp, {}, std::vector<std::uint8_t>(3)), EvalError);
  GammaOptions bad;
  bad.distance_mm = 0.0;
  CHECK_THROWS_AS(gamma_pass_rate(a, b, d, sp, bad), EvalError);
}

TEST_CASE("gamma neighborhood mode") {
  const Dims d{7, 1, 1};
  const Spacing sp{2.0, 2.0, 2.0};
  const std::vector<double> ref{10, 20, 30, 40, 50, 60, 70};
  std::vector<double> eval{10, 20, 30, 40, 50, 60, 70};
  eval[3] = 50.0;  // matches the reference one voxel away (2 mm)
  GammaOptions o;
  o.mode = GammaMode::Neighborhood;
  GammaResult g = gamma_pass_rate(eval, ref, d, sp, o);
  CHECK(g.gamma[3] == 0.0);
  CHECK(g.rate == 1.0);
  eval[3] = 45.0;  // 5 Gy from every neighbor within 3 mm; tolerance is 2.1 Gy
  g = gamma_pass_rate(eval, ref, d, sp, o);
  CHECK(g.gamma[3] == doctest::Approx(5.0 / 2.1));
  CHECK(g.passed == 6);
  CHECK(gamma_mode_name(o.mode) == "neighborhood");
}

TEST_CASE("structure group masks") {
  const Phantom p = line_phantom();
  const auto oars = group_mask(p.grid, StructureGroup::OARs);
  const auto ptvs = group_mask(p.grid, StructureGroup::PTVs);
  const auto all = group_mask(p.grid, StructureGroup::All);
  for (std::size_t i = 0; i < 11; ++i) {
    CHECK(oars[i] == (i < 7));
    CHECK(ptvs[i] == (i >= 7 && i < 10));
    CHECK(all[i] == (i < 10));
  }
}

TEST_CASE("report writers") {
  CHECK(format_number(-0.0) == "0.000000");
  CHECK(format_number(-1e-9) == "0.000000");
  CHECK(format_number(1.5) == "1.500000");

  std::vector<MethodSummary> methods(2);
  methods[0].method = "reference";
  methods[0].criteria = {90.0, 100.0, 93.0, 7, 3};
  methods[0].versus_reference = {100.0, 100.0, 100.0, 7, 3};
  methods[0].gamma = {1.0, 1.0, 1.0};
  methods[1].method = "gan";
  methods[1].criteria = {80.0, 66.666666666, 76.0, 7, 3};
  methods[1].gamma = {0.9, 0.8, 0.85};

  std::ostringstream crit, gam;
  write_criteria_table(crit, methods);
  CHECK(crit.str() ==
        "criteria,reference,gan\nOAR criteria,90.000000,80.000000\nPTV criteria,100.000000,66.666667\n"
        "All criteria,93.000000,76.000000\n");
  write_gamma_table(gam, methods);
  CHECK(gam.str().rfind("structures,reference,gan\nAll OARs,1.000000,0.900000\n", 0) == 0);

  const auto j = nlohmann::json::parse(summary_json(methods, {}));
  CHECK(j.at("methods").size() == 2);
  CHECK(j["methods"][1]["gamma_pass_rate"]["all_ptvs"].get<double>() == 0.8);
  CHECK(j["gamma_settings"]["normalization"] == "global");

  const std::vector<HeadToHeadRow> rows{{"p000", "gan", {"Brainstem Dmax <= 54", false, 50.0, 52.0, 2.0}},
                                        {"p001", "gan", {"Brainstem Dmax <= 54", false, 53.0, 52.0, -1.0}}};
  std::ostringstream h;
  write_head_to_head(h, rows);
  CHECK(h.str() ==
        "patient,method,criterion,kbp_gy,clinical_gy,difference_gy\n"
        "p000,gan,Brainstem Dmax <= 54,50.000000,52.000000,2.000000\n"
        "p001,gan,Brainstem Dmax <= 54,53.000000,52.000000,-1.000000\n");
  const std::string svg = head_to_head_svg(rows);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(svg.find("<rect") != std::string::npos);

  const Phantom p = line_phantom();
  const std::vector<DvhCurve> curves{dvh(line_dose(1.0), p.grid, StructureId::PTV70, 10.0, 80.0)};
  std::ostringstream dv;
  write_dvh_csv(dv, curves);
  CHECK(dv.str().rfind("dose_gy,PTV70\n0.000000,1.000000\n", 0) == 0);
}
