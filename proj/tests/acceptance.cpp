// Acceptance run: one PASS/FAIL line per criterion. Usage:
//   kbp_acceptance <kbpcli> <scratch dir> [criterion numbers...]
// With no numbers every criterion runs. Exit status is 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "gamma_oracle.hpp"
#include "gradcheck.hpp"
#include "kbp/lp.hpp"
#include "kbp/pipeline.hpp"
#include "kbp/planeval.hpp"
#include "kbp/planopt.hpp"
#include "kbp/predictors.hpp"
#include "kbp/volume_io.hpp"
#include "lp_oracle.hpp"

namespace fs = std::filesystem;
using namespace kbp;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- shared cohort: 30 phantoms at 32x32x8, the first 20 train ----

constexpr int kCohort = 30;
constexpr int kTrain = 20;
constexpr std::uint64_t kCohortSeed = 1;
const Dims kDims{32, 32, 8};

struct Patient {
  std::string id;
  Phantom phantom;
  InfluenceMatrix influence;
  Plan reference;
};

const std::vector<Patient>& cohort() {
  static const std::vector<Patient> patients = [] {
    std::vector<Patient> out;
    for (int i = 0; i < kCohort; ++i) {
      Patient p;
      p.id = patient_id(i);
      p.phantom = generate_phantom(patient_seed(kCohortSeed, i), {kDims, {}});
      p.influence = influence_matrix(p.phantom.grid, make_beams(p.phantom));
      p.reference = reference_plan(p.phantom, p.influence);
      out.push_back(std::move(p));
    }
    return out;
  }();
  return patients;
}

std::vector<const Patient*> test_patients() {
  std::vector<const Patient*> out;
  for (int i = kTrain; i < kCohort; ++i) out.push_back(&cohort()[static_cast<std::size_t>(i)]);
  return out;
}

ForwardProblem reference_problem(const Patient& p) {
  return make_forward_problem(p.phantom, p.influence, build_terms(p.phantom, template_dose(p.phantom)),
                              reference_complexity_bound(p.influence.beams()));
}

// Sorted-sample quantile with plotting positions k/(n-1), written out here
// rather than taken from the library.
double direct_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(std::floor(pos));
  if (k + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(k);
  return v[k] + frac * (v[k + 1] - v[k]);
}

std::vector<double> doses_of(const std::vector<std::uint8_t>& labels, const std::vector<double>& dose, StructureId s) {
  std::vector<double> out;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (labels[v] == static_cast<std::uint8_t>(s)) out.push_back(dose[v]);
  }
  return out;
}

std::vector<std::uint8_t> label_codes(const Phantom& phantom) {
  std::vector<std::uint8_t> out;
  for (StructureId s : phantom.grid.labels()) out.push_back(static_cast<std::uint8_t>(s));
  return out;
}

// ---- criteria ----

Outcome gradient_fidelity() {
  using namespace kbp::testing;
  std::mt19937_64 rng(101);
  double worst32 = 0.0, worst64 = 0.0;
  int checks = 0;
  for (auto kind : all_checked_layers()) {
    for (int trial = 0; trial < 20; ++trial) {
      worst32 = std::max(worst32, random_layer_check<float>(kind, rng, kStepF32).worst());
      worst64 = std::max(worst64, random_layer_check<double>(kind, rng, kStepF64).worst());
      ++checks;
    }
  }
  return {worst32 < 1e-3 && worst64 < 1e-6,
          std::to_string(checks) + " checks per precision over " + std::to_string(all_checked_layers().size()) +
              " layers, worst f32 " + fmt("%.2e", worst32) + ", f64 " + fmt("%.2e", worst64)};
}

Outcome lp_oracle() {
  std::mt19937_64 rng(202);
  double worst = 0.0;
  int mismatched = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = kbp::testing::random_bounded_lp(rng);
    const auto oracle = kbp::testing::vertex_enumeration(p);
    const auto s = lp::simplex_solve(p);
    if (!oracle || s.status != lp::LpStatus::Optimal) {
      ++mismatched;
      continue;
    }
    worst = std::max(worst, std::abs(s.objective - *oracle));
  }

  // infeasible: a random bounded LP plus a cut that excludes the box
  int misclassified = 0;
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = kbp::testing::random_bounded_lp(rng);
    const Eigen::Index n = p.num_vars(), m = p.G.rows();
    p.G.conservativeResize(m + 1, n);
    p.h.conservativeResize(m + 1);
    for (Eigen::Index j = 0; j < n; ++j) p.G(m, j) = -u(rng);
    p.h(m) = -100.0;  // sum of positive multiples of x >= 100 is out of reach of the box x <= 10
    if (lp::simplex_solve(p).status != lp::LpStatus::Infeasible) ++misclassified;
  }
  // unbounded: drop the box, keep a ray along which the cost decreases
  for (int trial = 0; trial < 20; ++trial) {
    lp::LpProblem p;
    const int n = 2 + trial % 2;
    p.c = Eigen::VectorXd::Constant(n, 1.0);
    p.c(0) = -u(rng);
    p.G = Eigen::MatrixXd::Zero(1, n);
    for (int j = 1; j < n; ++j) p.G(0, j) = u(rng);
    p.G(0, 0) = -u(rng);
    p.h = Eigen::VectorXd::Constant(1, u(rng));
    if (lp::simplex_solve(p).status != lp::LpStatus::Unbounded) ++misclassified;
  }
  return {mismatched == 0 && worst <= 1e-8 && misclassified == 0,
          "200 LPs, worst |obj - oracle| " + fmt("%.2e", worst) + ", " + std::to_string(mismatched) +
              " status mismatches, " + std::to_string(misclassified) + "/40 infeasible/unbounded misclassified"};
}

Outcome forward_contract() {
  double worst_spg = -1e300, worst_gap = 0.0;
  int plans = 0, failures = 0;
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const Patient* p : test_patients()) {
    const ForwardProblem pr = reference_problem(*p);
    std::vector<Plan> solved{p->reference};
    // a target-weighted and a uniformly random weight vector
    for (int k = 0; k < 2; ++k) {
      std::vector<double> alpha(kNumTerms);
      for (std::size_t t = 0; t < alpha.size(); ++t) alpha[t] = u(rng) * (k == 0 && t >= 56 ? 20.0 : 1.0);
      const double sum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
      for (auto& a : alpha) a /= sum;
      try {
        solved.push_back(solve_forward(pr, alpha));
      } catch (const std::exception& e) {
        ++failures;
        std::cerr << p->id << ": " << e.what() << '\n';
      }
    }
    for (const Plan& plan : solved) {
      ++plans;
      const double spg = spg_complexity(plan.fluence, p->influence.beams());
      worst_spg = std::max(worst_spg, spg - plan.complexity_bound);
      worst_gap = std::max(worst_gap, std::abs(plan.certificate.gap) / (1.0 + std::abs(plan.objective)));
    }
  }
  return {failures == 0 && worst_spg <= 1e-6 && worst_gap <= 1e-6,
          std::to_string(plans) + " plans on 10 patients, max SPG - C " + fmt("%.2e", worst_spg) +
              ", max gap/(1+|obj|) " + fmt("%.2e", worst_gap) + ", " + std::to_string(failures) + " solver failures"};
}

Outcome inverse_round_trip() {
  double worst_gap = 0.0, worst_trip = 0.0;
  int failures = 0;
  for (const Patient* p : test_patients()) {
    try {
      const ForwardProblem pr = reference_problem(*p);
      const InverseResult inv = inverse_weights(pr, p->reference.dose);
      worst_gap = std::max(worst_gap, std::abs(inv.gap) / (1.0 + std::abs(inv.target_objective)));
      const Plan again = solve_forward(pr, inv.alpha);
      worst_trip =
          std::max(worst_trip, std::abs(weighted_objective(inv.alpha, again.term_values) - inv.target_objective));
    } catch (const std::exception& e) {
      ++failures;
      std::cerr << p->id << ": " << e.what() << '\n';
    }
  }
  return {failures == 0 && worst_gap <= 1e-6 && worst_trip <= 1e-5,
          "10 reference plans, max gap/(1+|obj|) " + fmt("%.2e", worst_gap) + ", max round-trip error " +
              fmt("%.2e", worst_trip) + ", " + std::to_string(failures) + " failures"};
}

Outcome gamma_oracle() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> sp(1.5, 4.0);
  const Dims d{12, 12, 12};
  std::size_t voxel_mismatch = 0, count_mismatch = 0, evaluated = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Spacing spacing{sp(rng), sp(rng), sp(rng)};
    const auto [eval, ref] = kbp::testing::random_gamma_pair(d, rng, trial % 4, 1.0 + 0.1 * (trial % 30));
    GammaOptions o;
    if (trial % 2 == 1) o.normalization = GammaNormalization::Local;
    if (trial % 5 == 4) o.distance_mm = 5.0;
    const GammaResult g = gamma_pass_rate(eval, ref, d, spacing, o);
    const auto oracle = kbp::testing::brute_force_gamma(eval, ref, d, spacing, o);
    std::size_t ev = 0, passed = 0;
    for (std::size_t v = 0; v < oracle.size(); ++v) {
      const bool oracle_eval = oracle[v] >= 0.0;
      const bool ours_eval = g.gamma[v] >= 0.0;
      if (oracle_eval != ours_eval) {
        ++voxel_mismatch;
        continue;
      }
      if (!oracle_eval) continue;
      ++ev;
      const bool oracle_pass = oracle[v] <= 1.0;
      if (oracle_pass != (g.gamma[v] <= 1.0)) ++voxel_mismatch;
      if (oracle_pass) ++passed;
    }
    if (ev != g.evaluated || passed != g.passed) ++count_mismatch;
    evaluated += ev;
  }
  std::mt19937_64 rng2(506);
  const auto same = kbp::testing::smooth_field(d, rng2, 70.0);
  const double identical = gamma_pass_rate(same, same, d, Spacing{}).rate;
  return {voxel_mismatch == 0 && count_mismatch == 0 && identical == 1.0,
          "50 pairs, " + std::to_string(evaluated) + " evaluated voxels, " + std::to_string(voxel_mismatch) +
              " pass/fail mismatches, identical volumes rate " + fmt("%.6f", identical)};
}

Outcome term_audit() {
  double worst = 0.0;
  bool shape_ok = true;
  for (const Patient* p : test_patients()) {
    const auto labels = label_codes(p->phantom);
    const std::vector<double>& dose = p->reference.dose;
    const auto terms = build_terms(p->phantom, dose);
    int oar_terms = 0, target_terms = 0;
    std::set<std::uint8_t> oars, targets;
    for (const auto& t : terms) {
      const auto code = static_cast<std::uint8_t>(t.structure);
      if (is_target(t.structure)) {
        ++target_terms;
        targets.insert(code);
      } else {
        ++oar_terms;
        oars.insert(code);
      }
    }
    shape_ok = shape_ok && terms.size() == 65 && oar_terms == 56 && target_terms == 9 && oars.size() == 8 &&
               targets.size() == 3;

    for (const auto& t : terms) {
      const std::vector<double> d = doses_of(labels, dose, t.structure);
      const double n = static_cast<double>(d.size());
      double direct = 0.0;
      switch (t.kind) {
        case TermKind::MeanDose:
          direct = std::accumulate(d.begin(), d.end(), 0.0) / n;
          break;
        case TermKind::MaxDose:
          direct = *std::max_element(d.begin(), d.end());
          break;
        case TermKind::AvgAboveThreshold: {
          const double tau = direct_quantile(d, t.level);
          worst = std::max(worst, std::abs(tau - t.threshold));
          for (double x : d) direct += std::max(0.0, x - tau);
          direct /= n;
          break;
        }
        case TermKind::AvgUnderdose: {
          const double rho = prescription_gy(t.structure);
          worst = std::max(worst, std::abs(rho - t.threshold));
          for (double x : d) direct += std::max(0.0, rho - x);
          direct /= n;
          break;
        }
        case TermKind::AvgOverdose: {
          const double rho = prescription_gy(t.structure);
          worst = std::max(worst, std::abs(rho - t.threshold));
          for (double x : d) direct += std::max(0.0, x - rho);
          direct /= n;
          break;
        }
      }
      const double ours = term_value(t, dose, p->phantom.grid.voxels_of(t.structure));
      worst = std::max(worst, std::abs(ours - direct));
    }
  }
  return {shape_ok && worst <= 1e-9, std::string(shape_ok ? "65 = 8x7 + 3x3 terms" : "wrong term layout") +
                                         " on 10 patients, max |library - direct| " + fmt("%.2e", worst)};
}

struct NetData {
  SliceDataset train, test;
};

const NetData& net_data() {
  static const NetData data = [] {
    NetData d;
    d.train.size = d.test.size = 64;
    for (int i = 0; i < kCohort; ++i) {
      const Patient& p = cohort()[static_cast<std::size_t>(i)];
      extract_slices(p.phantom, p.reference.dose, i < kTrain ? d.train : d.test);
    }
    return d;
  }();
  return data;
}

Outcome learning_signal() {
  const NetData& data = net_data();
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.lambda = 90.0;
  cfg.unet = {64, 16};
  cfg.seed = 7;
  const TrainResult gan = gan_train(data.train, cfg, &data.test);
  const TrainResult cnn = cnn_train(data.train, cfg, &data.test);
  double worst_decomp = 0.0;
  for (const auto& s : gan.steps) worst_decomp = std::max(worst_decomp, std::abs(s.g_total - (s.g_adv + 90.0 * s.g_l1)));
  const double gan_ratio = gan.epochs.back().validation_l1 / gan.initial_validation_l1;
  const double cnn_ratio = cnn.epochs.back().validation_l1 / cnn.initial_validation_l1;
  return {gan_ratio <= 0.5 && cnn_ratio <= 0.5 && worst_decomp <= 1e-5 && !gan.steps.empty(),
          std::to_string(data.train.pairs.size()) + " train / " + std::to_string(data.test.pairs.size()) +
              " test slices; final/initial test L1 GAN " + fmt("%.3f", gan_ratio) + " (" +
              fmt("%.2f", gan.initial_validation_l1) + " -> " + fmt("%.2f", gan.epochs.back().validation_l1) +
              " Gy), CNN " + fmt("%.3f", cnn_ratio) + " (" + fmt("%.2f", cnn.initial_validation_l1) + " -> " +
              fmt("%.2f", cnn.epochs.back().validation_l1) + " Gy); max |G - (adv + 90 L1)| " +
              fmt("%.2e", worst_decomp) + " over " + std::to_string(gan.steps.size()) + " steps"};
}

Outcome rf_baseline() {
  std::vector<RfFeatures> rows;
  std::vector<double> targets;
  for (int i = 0; i < kTrain; ++i) {
    const Patient& p = cohort()[static_cast<std::size_t>(i)];
    const RfFeatureExtractor fx(p.phantom, p.influence);
    for (std::size_t v : rf_sample_voxels(fx.num_voxels(), 4000)) {
      rows.push_back(fx.features(v));
      targets.push_back(p.reference.dose[v]);
    }
  }
  ForestConfig cfg;
  cfg.trees = 10;
  const RandomForest forest = rf_train(rows, targets, cfg);

  double se = 0.0, sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (const Patient* p : test_patients()) {
    const RfFeatureExtractor fx(p->phantom, p->influence);
    const auto pred = rf_predict_volume(forest, fx);
    for (std::size_t v = 0; v < pred.size(); ++v) {
      const double y = p->reference.dose[v];
      se += (pred[v] - y) * (pred[v] - y);
      sum += y;
      sum2 += y * y;
      ++n;
    }
  }
  const double mse = se / static_cast<double>(n);
  const double mean = sum / static_cast<double>(n);
  const double var = sum2 / static_cast<double>(n) - mean * mean;
  const bool shape = forest.trees.size() == 10 && forest.num_features == 10 && kNumRfFeatures == 10;
  return {shape && mse < var, std::to_string(forest.trees.size()) + " trees, " +
                                  std::to_string(forest.num_features) + " features; test MSE " + fmt("%.2f", mse) +
                                  " Gy^2 vs target variance " + fmt("%.2f", var) + " Gy^2 over " + std::to_string(n) +
                                  " voxels"};
}

// ---- end-to-end ----

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const char* kEndToEndConfig = R"([dataset]
patients = 30
train_fraction = 0.67
seed = 1
nx = 32
ny = 32
nz = 8
slice_size = 64

[training]
epochs = 25
base_channels = 16
)";

struct EndToEnd {
  fs::path scratch;
  std::string cli;
  std::optional<int> first_exit;
};

EndToEnd& e2e() {
  static EndToEnd e;
  return e;
}

int run_cli(const fs::path& out) {
  const fs::path config = e2e().scratch / "e2e.ini";
  std::ofstream(config) << kEndToEndConfig;
  fs::remove_all(out);
  const std::string cmd = "\"" + e2e().cli + "\" --config \"" + config.string() + "\" --out \"" + out.string() +
                          "\" --threads 1 --quiet run > \"" + out.string() + ".log\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome end_to_end_report() {
  const fs::path out = e2e().scratch / "run1";
  const int code = run_cli(out);
  e2e().first_exit = code;
  if (code != 0) return {false, "kbpcli run exited " + std::to_string(code) + ", see " + out.string() + ".log"};

  const fs::path reports = out / "reports";
  const std::vector<std::string> methods{"reference", "gan", "cnn", "rf", "mimic"};
  std::vector<std::string> problems;

  auto check_table = [&](const std::string& name, const std::string& corner, const std::vector<std::string>& rows,
                         const std::string& reference_value) {
    const auto t = read_csv(reports / name);
    std::vector<std::string> header{corner};
    header.insert(header.end(), methods.begin(), methods.end());
    if (t.size() != rows.size() + 1 || t[0] != header) {
      problems.push_back(name + " shape");
      return;
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (t[r + 1].size() != header.size() || t[r + 1][0] != rows[r]) problems.push_back(name + " row " + rows[r]);
      else if (!reference_value.empty() && t[r + 1][1] != reference_value) problems.push_back(name + " reference column");
    }
  };
  const std::vector<std::string> criteria_rows{"OAR criteria", "PTV criteria", "All criteria"};
  check_table("criteria_table.csv", "criteria", criteria_rows, "");
  check_table("versus_reference_table.csv", "criteria", criteria_rows, "100.000000");
  check_table("gamma_table.csv", "structures", {"All OARs", "All PTVs", "All Structures"}, "1.000000");

  const auto h2h = read_csv(reports / "head_to_head.csv");
  std::set<std::string> h2h_methods;
  int reference_rows = 0;
  for (std::size_t r = 1; r < h2h.size(); ++r) {
    h2h_methods.insert(h2h[r][1]);
    if (h2h[r][1] == "reference") {
      ++reference_rows;
      if (std::stod(h2h[r][5]) != 0.0) problems.push_back("nonzero reference head-to-head difference");
    }
  }
  if (h2h.empty() || h2h[0] != std::vector<std::string>{"patient", "method", "criterion", "kbp_gy", "clinical_gy",
                                                         "difference_gy"}) {
    problems.push_back("head_to_head.csv header");
  }
  if (h2h_methods != std::set<std::string>(methods.begin(), methods.end())) problems.push_back("head-to-head methods");
  if (reference_rows == 0) problems.push_back("no reference head-to-head rows");

  const auto gaps = read_csv(reports / "gaps.csv");
  if (gaps.size() != 1) problems.push_back(std::to_string(gaps.size() - 1) + " gaps");

  // normalization, recomputed from the stored plans and labels
  const PatientSplit split = split_patients(30, 0.67);
  std::map<std::pair<std::string, std::string>, double> reported_scale;
  for (const auto& row : read_csv(reports / "normalization.csv")) {
    if (row.size() >= 3 && row[0] != "patient") reported_scale[{row[0], row[1]}] = std::stod(row[2]);
  }
  double worst_d99 = 0.0, worst_scale = 0.0;
  int normalized = 0;
  for (const auto& id : split.test) {
    const fs::path data = out / "data" / id;
    const VolumeFile labels = read_volume_file(data / "labels.kbpv");
    const PlanRecord ref = read_plan_file(data / "reference.kbpp");
    const double ref_d99 = direct_quantile(doses_of(labels.labels, ref.plan.dose, StructureId::PTV70), 0.01);
    for (const auto& m : methods) {
      if (m == "reference") continue;
      const fs::path plan_file = out / "plans" / m / (id + ".kbpp");
      if (!fs::exists(plan_file)) {
        problems.push_back("missing " + m + "/" + id);
        continue;
      }
      const PlanRecord plan = read_plan_file(plan_file);
      const double plan_d99 = direct_quantile(doses_of(labels.labels, plan.plan.dose, StructureId::PTV70), 0.01);
      const double scale = ref_d99 / plan_d99;
      std::vector<double> scaled = plan.plan.dose;
      for (auto& d : scaled) d *= scale;
      const double d99 = direct_quantile(doses_of(labels.labels, scaled, StructureId::PTV70), 0.01);
      worst_d99 = std::max(worst_d99, std::abs(d99 - ref_d99) / ref_d99);
      const auto it = reported_scale.find({id, m});
      if (it == reported_scale.end()) {
        problems.push_back("no normalization row for " + m + "/" + id);
      } else {
        // the report prints six decimals
        worst_scale = std::max(worst_scale, std::abs(it->second - scale) / std::max(1.0, scale));
      }
      ++normalized;
    }
  }
  if (worst_d99 > 1e-9) problems.push_back("normalized D99 off by " + fmt("%.2e", worst_d99));
  if (worst_scale > 1e-6) problems.push_back("reported scale off by " + fmt("%.2e", worst_scale));

  std::string detail = std::to_string(normalized) + " plans normalized, max relative D99 error " +
                       fmt("%.2e", worst_d99) + "; tables 3 rows x {reference, gan, cnn, rf, mimic}";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

Outcome determinism() {
  const fs::path first = e2e().scratch / "run1";
  if (!e2e().first_exit) e2e().first_exit = run_cli(first);
  if (*e2e().first_exit != 0) return {false, "first run exited " + std::to_string(*e2e().first_exit)};
  const fs::path second = e2e().scratch / "run2";
  const int code = run_cli(second);
  if (code != 0) return {false, "second run exited " + std::to_string(code)};

  int files = 0;
  std::vector<std::string> differing;
  const fs::path reports = first / "reports";
  for (const auto& entry : fs::recursive_directory_iterator(reports)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    const fs::path rel = fs::relative(entry.path(), reports);
    ++files;
    const fs::path other = second / "reports" / rel;
    if (!fs::exists(other) || read_text(entry.path()) != read_text(other)) differing.push_back(rel.string());
  }
  std::string detail = std::to_string(files) + " report CSVs compared, " + std::to_string(differing.size()) + " differ";
  for (std::size_t i = 0; i < std::min<std::size_t>(differing.size(), 5); ++i) detail += " " + differing[i];
  return {files > 0 && differing.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: kbp_acceptance <kbpcli> <scratch dir> [criteria...]\n";
    return 2;
  }
  e2e().cli = argv[1];
  e2e().scratch = fs::absolute(argv[2]);
  fs::create_directories(e2e().scratch);
  std::set<int> only;
  for (int i = 3; i < argc; ++i) only.insert(std::atoi(argv[i]));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"LP oracle equivalence", lp_oracle},
      {"forward-plan contract", forward_contract},
      {"inverse round trip", inverse_round_trip},
      {"gamma oracle", gamma_oracle},
      {"65-term audit", term_audit},
      {"GAN/CNN learning signal", learning_signal},
      {"RF baseline", rf_baseline},
      {"end-to-end report", end_to_end_report},
      {"determinism", determinism},
  };
  // runtime limits where the criterion states one (seconds)
  const std::map<int, double> limits{{1, 60.0}, {2, 30.0}, {7, 1800.0}};

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (const auto it = limits.find(number); it != limits.end() && secs > it->second) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", it->second) + " s limit";
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << number << " (" << criteria[i].first
              << "): " << o.detail << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
