#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kbp/dosecalc.hpp"
#include "kbp/lp.hpp"
#include "kbp/phantom.hpp"

namespace kbp {

enum class TermKind { MeanDose, MaxDose, AvgAboveThreshold, AvgUnderdose, AvgOverdose };

std::string_view term_kind_name(TermKind k);

struct ObjectiveTerm {
  StructureId structure = StructureId::Unclassified;
  TermKind kind = TermKind::MeanDose;
  /// tau for AvgAboveThreshold, the prescription for under/overdose terms.
  double threshold = 0.0;
  /// Quantile level that produced tau (AvgAboveThreshold only).
  double level = 0.0;

  std::string label() const;
};

inline constexpr std::size_t kNumTerms = 65;
inline constexpr std::array<double, 5> kThresholdLevels{0.25, 0.50, 0.75, 0.90, 0.975};

/// Linear interpolation between order statistics at positions p (n - 1).
double quantile(std::span<const double> values, double p);

/// Seven terms per organ at risk (mean, max, five tail averages above
/// quantiles of `dose` over the organ), then three per target (max,
/// underdose, overdose against the prescription). Organs come in
/// kOrgansAtRisk order, targets in kTargets order.
std::vector<ObjectiveTerm> build_terms(const Phantom& phantom, std::span<const double> dose);

/// Value of one term over the given voxels of `dose`.
double term_value(const ObjectiveTerm& term, std::span<const double> dose, std::span<const std::size_t> voxels);

/// Sum over fluence-map rows of positive left-to-right increments, starting
/// from an implicit zero before the first column.
double spg_complexity(std::span<const double> fluence, std::span<const Beam> beams);

using ObjectiveWeights = std::vector<double>;

bool on_simplex(std::span<const double> alpha, double tol = 1e-9);

/// Fixed target-heavy weights used to synthesize reference plans.
ObjectiveWeights reference_weights();

class PlanError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ForwardOptions {
  /// Voxels per structure that carry max and hinge constraints in the LP.
  /// Larger structures are subsampled with a fixed stride.
  std::size_t max_voxels_per_target = 32;
  std::size_t max_voxels_per_organ = 10;
  lp::SimplexOptions simplex{};
};

/// Everything needed to pose the forward LP for one patient. Holds a
/// non-owning pointer to the influence matrix, which must outlive it.
struct ForwardProblem {
  const InfluenceMatrix* influence = nullptr;
  std::vector<ObjectiveTerm> terms;
  double complexity_bound = 0.0;
  /// Optimization voxels per structure (indexed by StructureId).
  std::array<std::vector<std::size_t>, kNumStructures> voxels;
  /// All voxels per structure; mean-dose terms use the full structure.
  std::array<std::vector<std::size_t>, kNumStructures> all_voxels;
  /// Dense influence rows of the optimization voxels, per structure.
  std::array<Eigen::MatrixXd, kNumStructures> rows;
  /// Mean influence row over every voxel of each structure.
  std::array<Eigen::VectorXd, kNumStructures> mean_rows;
  lp::SimplexOptions simplex{};

  std::size_t num_beamlets() const { return influence->num_beamlets(); }
};

ForwardProblem make_forward_problem(const Phantom& phantom, const InfluenceMatrix& influence,
                                    std::vector<ObjectiveTerm> terms, double complexity_bound,
                                    const ForwardOptions& options = {});

/// Term values as the LP sees them: mean over every structure voxel, the
/// other kinds over the optimization voxels.
std::vector<double> term_values(const ForwardProblem& problem, std::span<const double> dose);

double weighted_objective(std::span<const double> alpha, std::span<const double> values);

enum class PlanSource { Clinical, GAN, CNN, RF, Mimic };

std::string_view plan_source_name(PlanSource s);
PlanSource plan_source_from_name(std::string_view name);

struct Plan {
  PlanSource source = PlanSource::Clinical;
  std::vector<double> fluence;
  std::vector<double> dose;
  std::vector<double> term_values;
  double complexity = 0.0;
  double complexity_bound = 0.0;
  ObjectiveWeights alpha;       // weights the plan was optimized with (empty for mimic)
  double objective = 0.0;       // forward LP objective, or squared residual for mimic
  double mimic_residual = 0.0;  // ||A w - target||_2 (mimic only)
  lp::LpCertificate certificate;
  int iterations = 0;
};

/// min sum_t alpha_t f_t(A w) s.t. w >= 0, SPG(w) <= C as an LP with
/// positive-gradient, max and hinge auxiliaries. Throws PlanError unless the
/// LP solve is optimal and certified.
Plan solve_forward(const ForwardProblem& problem, std::span<const double> alpha, PlanSource source = PlanSource::Clinical);

struct InverseResult {
  ObjectiveWeights alpha;
  /// sum_t alpha_t f_t(target) minus the forward dual objective at alpha (>= 0 up to tolerance
  /// for achievable targets; 0 when the target is optimal for alpha).
  double gap = 0.0;
  double target_objective = 0.0;  // sum_t alpha_t f_t(target)
  double ratio = 1.0;             // forward optimum at alpha over the target objective
  lp::LpSolution lp;
};

/// Relative-gap inverse LP: alpha minimizes the ratio of the target objective
/// to the forward optimum; alpha is returned on the simplex.
InverseResult inverse_weights(const ForwardProblem& problem, std::span<const double> target_dose);

struct MimicOptions {
  int max_iterations = 4000;     // per penalized solve
  int bisection_steps = 12;
  double tolerance = 1e-12;      // relative step size that ends a solve
  double huber_width = 0.05;     // smoothing of the SPG penalty (fluence units)
};

struct MimicTrace {
  /// Penalized objective at each accepted iterate, one list per solve.
  std::vector<std::vector<double>> objective_history;
  std::vector<double> penalties;
};

/// min ||A w - target||^2 s.t. w >= 0, SPG(w) <= C by monotone accelerated
/// projected gradient on a smoothed SPG penalty, bisecting the penalty
/// multiplier; each candidate is scaled onto SPG <= C before comparison.
Plan dose_mimic(const ForwardProblem& problem, std::span<const double> target, const MimicOptions& options = {},
                MimicTrace* trace = nullptr);

/// Prescription-shaped dose: target prescriptions inside targets and an
/// exponential falloff from PTV56 elsewhere in the body.
std::vector<double> template_dose(const Phantom& phantom);

/// Complexity budget for reference plans: a fixed allowance per fluence-map row.
double reference_complexity_bound(std::span<const Beam> beams, double per_row = 12.0);

/// Reference ("clinical") plan: thresholds from template_dose, reference
/// weights, complexity budget from reference_complexity_bound.
Plan reference_plan(const Phantom& phantom, const InfluenceMatrix& influence, const ForwardOptions& options = {});

struct PlanRecord {
  Plan plan;
  std::vector<Beam> beams;
  std::vector<ObjectiveTerm> terms;
  Dims dims{};
  Spacing spacing{};
};

/// "KBPP" file: u32 version, u32-length JSON header (beams, terms, alpha,
/// C, provenance), a KBPV dose volume, then u32 count + f32 fluence.
void write_plan(std::ostream& os, const Plan& plan, const ForwardProblem& problem, Dims dims, Spacing spacing);
PlanRecord read_plan(std::istream& is);
void write_plan_file(const std::filesystem::path& path, const Plan& plan, const ForwardProblem& problem, Dims dims,
                     Spacing spacing);
PlanRecord read_plan_file(const std::filesystem::path& path);

}  // namespace kbp
