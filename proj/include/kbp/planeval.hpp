#pragma once

// Plan evaluation: dose statistics, DVHs, the clinical criteria, PTV70
// normalization, gamma analysis, and report tables.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbp/geometry.hpp"
#include "kbp/phantom.hpp"

namespace kbp {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DoseStats {
  double mean = 0.0;
  double max = 0.0;
  double d99 = 0.0;  // 0.01-quantile, same interpolation as the LP thresholds
};

DoseStats dose_stats(std::span<const double> dose, std::span<const std::size_t> voxels);

struct DvhCurve {
  StructureId structure = StructureId::Unclassified;
  std::vector<double> sorted_doses;
  double step = 0.1;
  /// volume_fraction[k]: fraction of voxels receiving at least k * step Gy.
  std::vector<double> volume_fraction;
};

DvhCurve dvh(std::span<const double> dose, const VoxelGrid& grid, StructureId s, double step = 0.1,
             double max_dose = 80.0);

// ---- clinical criteria ----

enum class Statistic { Mean, Max, D99 };
enum class Comparator { AtMost, AtLeast };

struct ClinicalCriterion {
  StructureId structure = StructureId::Unclassified;
  Statistic statistic = Statistic::Mean;
  Comparator comparator = Comparator::AtMost;
  double threshold = 0.0;

  bool is_target() const { return kbp::is_target(structure); }
  std::string label() const;  // e.g. "Brainstem Dmax <= 54"
};

/// The ten criteria: seven organ limits, then PTV56, PTV63, PTV70 coverage.
const std::array<ClinicalCriterion, 10>& clinical_criteria();

/// Positive means better than the threshold.
double criterion_margin(const ClinicalCriterion& c, double achieved);

struct CriterionResult {
  ClinicalCriterion criterion;
  bool evaluable = false;
  double achieved = 0.0;
  double margin = 0.0;
  bool pass = false;  // margin >= 0
};

struct CriteriaReport {
  std::vector<CriterionResult> results;
};

double statistic_value(const DoseStats& s, Statistic stat);
CriteriaReport criteria_check(std::span<const double> dose, const Phantom& phantom);

struct SatisfactionRates {
  double oar = 0.0;
  double ptv = 0.0;
  double all = 0.0;
  std::size_t oar_count = 0;
  std::size_t ptv_count = 0;
};

/// Percent of evaluable criteria satisfied over a population of plans.
SatisfactionRates aggregate_criteria(std::span<const CriteriaReport> reports);

struct HeadToHead {
  std::string criterion;
  bool target = false;
  double kbp = 0.0;
  double clinical = 0.0;
  double difference = 0.0;  // positive: the KBP plan is better
};

std::vector<HeadToHead> head_to_head(const CriteriaReport& kbp, const CriteriaReport& clinical);

/// Percent of head-to-head comparisons where the KBP plan is at least as good
/// as the reference (difference >= 0); a plan against itself scores 100.
SatisfactionRates at_least_reference(std::span<const std::vector<HeadToHead>> comparisons);

// ---- normalization ----

struct Normalized {
  std::vector<double> dose;
  double scale = 1.0;
};

/// Plans whose PTV70 D99 is at most this fraction of the reference's are
/// rejected rather than scaled up.
inline constexpr double kMinRelativeD99 = 1e-6;

/// Scales `dose` so its PTV70 D99 equals the reference's.
Normalized normalize_to_reference(std::span<const double> dose, std::span<const double> reference,
                                  const Phantom& phantom);

// ---- gamma ----

enum class GammaNormalization { Global, Local };
/// Full: the gamma index. Neighborhood: pass when some reference voxel within
/// the distance tolerance is within the dose tolerance.
enum class GammaMode { Full, Neighborhood };

std::string_view gamma_normalization_name(GammaNormalization n);
std::string_view gamma_mode_name(GammaMode m);

struct GammaOptions {
  double dose_tolerance = 0.03;  // fraction
  double distance_mm = 3.0;
  double low_dose_cutoff = 0.10;  // fraction of the reference maximum
  GammaNormalization normalization = GammaNormalization::Global;
  GammaMode mode = GammaMode::Full;
};

struct GammaResult {
  /// Gamma per voxel; -1 for voxels that were not evaluated. Values are
  /// exact up to 2 (the search radius is twice the distance tolerance).
  std::vector<double> gamma;
  std::size_t evaluated = 0;
  std::size_t passed = 0;
  double rate = 0.0;
  GammaOptions options;
};

/// `mask`, when nonempty, further restricts the evaluated voxels.
GammaResult gamma_pass_rate(std::span<const double> eval, std::span<const double> ref, const Dims& dims,
                            const Spacing& spacing, const GammaOptions& options = {},
                            std::span<const std::uint8_t> mask = {});

enum class StructureGroup { OARs, PTVs, All };
std::string_view structure_group_name(StructureGroup g);
std::vector<std::uint8_t> group_mask(const VoxelGrid& grid, StructureGroup g);

// ---- report tables ----

struct MethodSummary {
  std::string method;
  SatisfactionRates criteria;
  SatisfactionRates versus_reference;  // at_least_reference
  std::array<double, 3> gamma{};  // OARs, PTVs, All; mean over patients
  std::size_t patients = 0;
};

struct HeadToHeadRow {
  std::string patient;
  std::string method;
  HeadToHead diff;
};

/// rows OAR criteria / PTV criteria / All criteria, one column per method
void write_criteria_table(std::ostream& os, std::span<const MethodSummary> methods);
/// same layout, percent of criteria at least as good as the reference
void write_versus_reference_table(std::ostream& os, std::span<const MethodSummary> methods);
/// rows All OARs / All PTVs / All Structures, one column per method
void write_gamma_table(std::ostream& os, std::span<const MethodSummary> methods);
void write_head_to_head(std::ostream& os, std::span<const HeadToHeadRow> rows);
void write_dvh_csv(std::ostream& os, std::span<const DvhCurve> curves);
std::string summary_json(std::span<const MethodSummary> methods, const GammaOptions& gamma);
/// Box plot of head-to-head differences per criterion, one box per method.
std::string head_to_head_svg(std::span<const HeadToHeadRow> rows);

/// Fixed-precision decimal used in every report file.
std::string format_number(double v);

}  // namespace kbp
