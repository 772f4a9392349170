#include "kbp/planeval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "kbp/planopt.hpp"

namespace kbp {
namespace {

std::string_view statistic_name(Statistic s) {
  switch (s) {
    case Statistic::Mean: return "Dmean";
    case Statistic::Max: return "Dmax";
    case Statistic::D99: return "D99";
  }
  return "?";
}

double percent(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

DoseStats dose_stats(std::span<const double> dose, std::span<const std::size_t> voxels) {
  if (voxels.empty()) throw EvalError("dose statistics of an empty structure");
  std::vector<double> d;
  d.reserve(voxels.size());
  for (auto v : voxels) {
    if (v >= dose.size()) throw EvalError("structure voxel outside the dose grid");
    d.push_back(dose[v]);
  }
  DoseStats s;
  double sum = 0.0;
  for (double x : d) sum += x;
  s.mean = sum / static_cast<double>(d.size());
  s.max = *std::max_element(d.begin(), d.end());
  s.d99 = quantile(d, 0.01);
  return s;
}

DvhCurve dvh(std::span<const double> dose, const VoxelGrid& grid, StructureId s, double step, double max_dose) {
  if (!(step > 0.0) || !(max_dose > 0.0)) throw EvalError("DVH step and range must be positive");
  if (dose.size() != grid.size()) throw EvalError("dose size does not match the grid");
  DvhCurve c;
  c.structure = s;
  c.step = step;
  for (auto v : grid.voxels_of(s)) c.sorted_doses.push_back(dose[v]);
  if (c.sorted_doses.empty()) throw EvalError("DVH of empty structure " + std::string(structure_name(s)));
  std::sort(c.sorted_doses.begin(), c.sorted_doses.end());
  const auto bins = static_cast<std::size_t>(std::llround(max_dose / step));
  const double n = static_cast<double>(c.sorted_doses.size());
  for (std::size_t k = 0; k <= bins; ++k) {
    const double t = static_cast<double>(k) * step;
    const auto first = std::lower_bound(c.sorted_doses.begin(), c.sorted_doses.end(), t);
    c.volume_fraction.push_back(static_cast<double>(c.sorted_doses.end() - first) / n);
  }
  return c;
}

// ---- criteria ----

std::string ClinicalCriterion::label() const {
  char thr[32];
  std::snprintf(thr, sizeof thr, "%g", threshold);
  return std::string(structure_name(structure)) + " " + std::string(statistic_name(statistic)) +
         (comparator == Comparator::AtMost ? " <= " : " >= ") + thr;
}

const std::array<ClinicalCriterion, 10>& clinical_criteria() {
  using S = StructureId;
  static const std::array<ClinicalCriterion, 10> c{{
      {S::Brainstem, Statistic::Max, Comparator::AtMost, 54.0},
      {S::SpinalCord, Statistic::Max, Comparator::AtMost, 48.0},
      {S::RightParotid, Statistic::Mean, Comparator::AtMost, 26.0},
      {S::LeftParotid, Statistic::Mean, Comparator::AtMost, 26.0},
      {S::Larynx, Statistic::Mean, Comparator::AtMost, 45.0},
      {S::Esophagus, Statistic::Mean, Comparator::AtMost, 45.0},
      {S::Mandible, Statistic::Max, Comparator::AtMost, 73.5},
      {S::PTV56, Statistic::D99, Comparator::AtLeast, 53.2},
      {S::PTV63, Statistic::D99, Comparator::AtLeast, 59.9},
      {S::PTV70, Statistic::D99, Comparator::AtLeast, 66.5},
  }};
  return c;
}

double criterion_margin(const ClinicalCriterion& c, double achieved) {
  return c.comparator == Comparator::AtMost ? c.threshold - achieved : achieved - c.threshold;
}

double statistic_value(const DoseStats& s, Statistic stat) {
  switch (stat) {
    case Statistic::Mean: return s.mean;
    case Statistic::Max: return s.max;
    case Statistic::D99: return s.d99;
  }
  return 0.0;
}

CriteriaReport criteria_check(std::span<const double> dose, const Phantom& phantom) {
  if (dose.size() != phantom.grid.size()) throw EvalError("dose size does not match the phantom grid");
  CriteriaReport r;
  for (const auto& c : clinical_criteria()) {
    CriterionResult res;
    res.criterion = c;
    const auto voxels = phantom.grid.voxels_of(c.structure);
    if (!voxels.empty()) {
      res.evaluable = true;
      res.achieved = statistic_value(dose_stats(dose, voxels), c.statistic);
      res.margin = criterion_margin(c, res.achieved);
      res.pass = res.margin >= 0.0;
    }
    r.results.push_back(res);
  }
  return r;
}

SatisfactionRates aggregate_criteria(std::span<const CriteriaReport> reports) {
  if (reports.empty()) throw EvalError("cannot aggregate an empty population");
  std::size_t oar_pass = 0, ptv_pass = 0;
  SatisfactionRates s;
  for (const auto& r : reports) {
    for (const auto& c : r.results) {
      if (!c.evaluable) continue;
      if (c.criterion.is_target()) {
        ++s.ptv_count;
        ptv_pass += c.pass;
      } else {
        ++s.oar_count;
        oar_pass += c.pass;
      }
    }
  }
  s.oar = percent(oar_pass, s.oar_count);
  s.ptv = percent(ptv_pass, s.ptv_count);
  s.all = percent(oar_pass + ptv_pass, s.oar_count + s.ptv_count);
  return s;
}

std::vector<HeadToHead> head_to_head(const CriteriaReport& kbp, const CriteriaReport& clinical) {
  if (kbp.results.size() != clinical.results.size()) throw EvalError("criteria reports differ in length");
  std::vector<HeadToHead> out;
  for (std::size_t i = 0; i < kbp.results.size(); ++i) {
    const auto& a = kbp.results[i];
    const auto& b = clinical.results[i];
    if (!a.evaluable || !b.evaluable) continue;
    // margin difference: clinical - kbp for upper limits, kbp - clinical for coverage
    out.push_back({a.criterion.label(), a.criterion.is_target(), a.achieved, b.achieved, a.margin - b.margin});
  }
  return out;
}

SatisfactionRates at_least_reference(std::span<const std::vector<HeadToHead>> comparisons) {
  if (comparisons.empty()) throw EvalError("cannot aggregate an empty population");
  std::size_t oar_ok = 0, ptv_ok = 0;
  SatisfactionRates s;
  for (const auto& plan : comparisons) {
    for (const auto& h : plan) {
      if (h.target) {
        ++s.ptv_count;
        ptv_ok += h.difference >= 0.0;
      } else {
        ++s.oar_count;
        oar_ok += h.difference >= 0.0;
      }
    }
  }
  s.oar = percent(oar_ok, s.oar_count);
  s.ptv = percent(ptv_ok, s.ptv_count);
  s.all = percent(oar_ok + ptv_ok, s.oar_count + s.ptv_count);
  return s;
}

Normalized normalize_to_reference(std::span<const double> dose, std::span<const double> reference,
                                  const Phantom& phantom) {
  if (dose.size() != phantom.grid.size() || reference.size() != phantom.grid.size()) {
    throw EvalError("dose size does not match the phantom grid");
  }
  const auto ptv = phantom.grid.voxels_of(StructureId::PTV70);
  if (ptv.empty()) throw EvalError("PTV70 is empty; cannot normalize");
  const double plan_d99 = dose_stats(dose, ptv).d99;
  const double ref_d99 = dose_stats(reference, ptv).d99;
  // a plan that leaves PTV70 (numerically) unirradiated has no meaningful scale
  if (!(plan_d99 > kMinRelativeD99 * std::abs(ref_d99))) {
    throw EvalError("plan PTV70 D99 is negligible; cannot normalize");
  }
  Normalized n;
  n.scale = ref_d99 / plan_d99;
  n.dose.assign(dose.begin(), dose.end());
  if (n.scale != 1.0) {
    for (auto& d : n.dose) d *= n.scale;
  }
  return n;
}

// ---- gamma ----

std::string_view gamma_normalization_name(GammaNormalization n) {
  return n == GammaNormalization::Global ? "global" : "local";
}

std::string_view gamma_mode_name(GammaMode m) { return m == GammaMode::Full ? "full" : "neighborhood"; }

GammaResult gamma_pass_rate(std::span<const double> eval, std::span<const double> ref, const Dims& dims,
                            const Spacing& spacing, const GammaOptions& o, std::span<const std::uint8_t> mask) {
  const std::size_t n = dims.count();
  if (eval.size() != n || ref.size() != n) {
    throw EvalError("gamma: dose sizes (" + std::to_string(eval.size()) + ", " + std::to_string(ref.size()) +
                    ") do not match the grid (" + std::to_string(n) + ")");
  }
  if (!mask.empty() && mask.size() != n) throw EvalError("gamma: mask size does not match the grid");
  if (!(o.dose_tolerance > 0.0) || !(o.distance_mm > 0.0)) throw EvalError("gamma tolerances must be positive");

  GammaResult r;
  r.options = o;
  r.gamma.assign(n, -1.0);
  const double ref_max = n ? *std::max_element(ref.begin(), ref.end()) : 0.0;
  const double cutoff = o.low_dose_cutoff * ref_max;
  const double global_dd = o.dose_tolerance * ref_max;
  const double dta2 = o.distance_mm * o.distance_mm;

  // Offsets sorted by distance. Beyond 2 x DTA the spatial term alone is > 4,
  // so no pair there can pass; the neighborhood test only looks within DTA.
  const double radius = o.mode == GammaMode::Full ? 2.0 * o.distance_mm : o.distance_mm;
  struct Offset {
    int dx, dy, dz;
    double d2;
  };
  std::vector<Offset> offsets;
  const int rx = static_cast<int>(std::floor(radius / spacing.x));
  const int ry = static_cast<int>(std::floor(radius / spacing.y));
  const int rz = static_cast<int>(std::floor(radius / spacing.z));
  for (int dz = -rz; dz <= rz; ++dz)
    for (int dy = -ry; dy <= ry; ++dy)
      for (int dx = -rx; dx <= rx; ++dx) {
        const double ex = dx * spacing.x, ey = dy * spacing.y, ez = dz * spacing.z;
        const double d2 = ex * ex + ey * ey + ez * ez;
        if (d2 <= radius * radius) offsets.push_back({dx, dy, dz, d2});
      }
  std::stable_sort(offsets.begin(), offsets.end(), [](const Offset& a, const Offset& b) { return a.d2 < b.d2; });

  for (int z = 0; z < dims.nz; ++z)
    for (int y = 0; y < dims.ny; ++y)
      for (int x = 0; x < dims.nx; ++x) {
        const std::size_t v = static_cast<std::size_t>(x) +
                              static_cast<std::size_t>(dims.nx) * (static_cast<std::size_t>(y) +
                                                                   static_cast<std::size_t>(dims.ny) * z);
        if (!(ref[v] > cutoff)) continue;
        if (!mask.empty() && !mask[v]) continue;
        const double dd = o.normalization == GammaNormalization::Global ? global_dd : o.dose_tolerance * ref[v];
        const double dd2 = dd * dd;
        double best = std::numeric_limits<double>::infinity();
        for (const auto& off : offsets) {
          const double spatial = o.mode == GammaMode::Full ? off.d2 / dta2 : 0.0;
          if (spatial >= best) break;
          const int qx = x + off.dx, qy = y + off.dy, qz = z + off.dz;
          if (qx < 0 || qy < 0 || qz < 0 || qx >= dims.nx || qy >= dims.ny || qz >= dims.nz) continue;
          const std::size_t q = static_cast<std::size_t>(qx) +
                                static_cast<std::size_t>(dims.nx) * (static_cast<std::size_t>(qy) +
                                                                     static_cast<std::size_t>(dims.ny) * qz);
          const double diff = eval[v] - ref[q];
          const double g2 = spatial + diff * diff / dd2;
          best = std::min(best, g2);
        }
        const double g = std::sqrt(best);
        r.gamma[v] = g;
        ++r.evaluated;
        r.passed += best <= 1.0;
      }
  // nothing above the cutoff: vacuously passing
  r.rate = r.evaluated ? static_cast<double>(r.passed) / static_cast<double>(r.evaluated) : 1.0;
  return r;
}

std::string_view structure_group_name(StructureGroup g) {
  switch (g) {
    case StructureGroup::OARs: return "All OARs";
    case StructureGroup::PTVs: return "All PTVs";
    case StructureGroup::All: return "All Structures";
  }
  return "?";
}

std::vector<std::uint8_t> group_mask(const VoxelGrid& grid, StructureGroup g) {
  std::vector<std::uint8_t> m(grid.size(), 0);
  const auto labels = grid.labels();
  for (std::size_t i = 0; i < m.size(); ++i) {
    const StructureId s = labels[i];
    const bool t = is_target(s), o = is_oar(s);
    m[i] = g == StructureGroup::OARs ? o : g == StructureGroup::PTVs ? t : (t || o);
  }
  return m;
}

// ---- report tables ----

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

namespace {

void write_header(std::ostream& os, const char* first, std::span<const MethodSummary> methods) {
  os << first;
  for (const auto& m : methods) os << ',' << m.method;
  os << '\n';
}

void write_rates(std::ostream& os, std::span<const MethodSummary> methods, SatisfactionRates MethodSummary::*field) {
  write_header(os, "criteria", methods);
  const char* rows[3] = {"OAR criteria", "PTV criteria", "All criteria"};
  for (int r = 0; r < 3; ++r) {
    os << rows[r];
    for (const auto& m : methods) {
      const SatisfactionRates& s = m.*field;
      os << ',' << format_number(r == 0 ? s.oar : r == 1 ? s.ptv : s.all);
    }
    os << '\n';
  }
}

}  // namespace

void write_criteria_table(std::ostream& os, std::span<const MethodSummary> methods) {
  write_rates(os, methods, &MethodSummary::criteria);
}

void write_versus_reference_table(std::ostream& os, std::span<const MethodSummary> methods) {
  write_rates(os, methods, &MethodSummary::versus_reference);
}

void write_gamma_table(std::ostream& os, std::span<const MethodSummary> methods) {
  write_header(os, "structures", methods);
  for (int g = 0; g < 3; ++g) {
    os << structure_group_name(static_cast<StructureGroup>(g));
    for (const auto& m : methods) os << ',' << format_number(m.gamma[static_cast<std::size_t>(g)]);
    os << '\n';
  }
}

void write_head_to_head(std::ostream& os, std::span<const HeadToHeadRow> rows) {
  os << "patient,method,criterion,kbp_gy,clinical_gy,difference_gy\n";
  for (const auto& r : rows) {
    os << r.patient << ',' << r.method << ',' << r.diff.criterion << ',' << format_number(r.diff.kbp) << ','
       << format_number(r.diff.clinical) << ',' << format_number(r.diff.difference) << '\n';
  }
}

void write_dvh_csv(std::ostream& os, std::span<const DvhCurve> curves) {
  os << "dose_gy";
  std::size_t rows = 0;
  for (const auto& c : curves) {
    os << ',' << structure_name(c.structure);
    rows = std::max(rows, c.volume_fraction.size());
  }
  os << '\n';
  const double step = curves.empty() ? 0.1 : curves.front().step;
  for (std::size_t k = 0; k < rows; ++k) {
    os << format_number(static_cast<double>(k) * step);
    for (const auto& c : curves) os << ',' << format_number(k < c.volume_fraction.size() ? c.volume_fraction[k] : 0.0);
    os << '\n';
  }
}

std::string summary_json(std::span<const MethodSummary> methods, const GammaOptions& gamma) {
  nlohmann::ordered_json j;
  j["gamma_settings"] = {{"dose_tolerance", gamma.dose_tolerance},
                         {"distance_mm", gamma.distance_mm},
                         {"low_dose_cutoff", gamma.low_dose_cutoff},
                         {"normalization", std::string(gamma_normalization_name(gamma.normalization))},
                         {"mode", std::string(gamma_mode_name(gamma.mode))}};
  auto rates = [](const SatisfactionRates& s) {
    return nlohmann::ordered_json{{"oar_percent", s.oar},
                                  {"ptv_percent", s.ptv},
                                  {"all_percent", s.all},
                                  {"oar_criteria", s.oar_count},
                                  {"ptv_criteria", s.ptv_count}};
  };
  j["methods"] = nlohmann::ordered_json::array();
  for (const auto& m : methods) {
    j["methods"].push_back({{"method", m.method},
                            {"patients", m.patients},
                            {"criteria_satisfaction", rates(m.criteria)},
                            {"at_least_reference", rates(m.versus_reference)},
                            {"gamma_pass_rate",
                             {{"all_oars", m.gamma[0]}, {"all_ptvs", m.gamma[1]}, {"all_structures", m.gamma[2]}}}});
  }
  return j.dump(2) + "\n";
}

std::string head_to_head_svg(std::span<const HeadToHeadRow> rows) {
  std::vector<std::string> criteria, methods;
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  double lo = 0.0, hi = 0.0;
  for (const auto& r : rows) {
    if (std::find(criteria.begin(), criteria.end(), r.diff.criterion) == criteria.end()) criteria.push_back(r.diff.criterion);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    groups[{r.diff.criterion, r.method}].push_back(r.diff.difference);
    lo = std::min(lo, r.diff.difference);
    hi = std::max(hi, r.diff.difference);
  }
  if (hi - lo < 1e-9) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double width = 60.0 + 40.0 * static_cast<double>(criteria.size() * std::max<std::size_t>(methods.size(), 1));
  const double height = 360.0, top = 20.0, plot = 260.0;
  auto ypos = [&](double v) { return top + plot * (hi - v) / (hi - lo); };
  const char* colors[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << format_number(width) << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s << "<line x1=\"50\" x2=\"" << format_number(width - 10) << "\" y1=\"" << format_number(ypos(0.0)) << "\" y2=\""
    << format_number(ypos(0.0)) << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
  s << "<text x=\"4\" y=\"" << format_number(ypos(hi)) << "\">" << format_number(hi) << "</text>\n";
  s << "<text x=\"4\" y=\"" << format_number(ypos(lo)) << "\">" << format_number(lo) << "</text>\n";
  double x = 60.0;
  for (const auto& c : criteria) {
    const double group_left = x;
    for (std::size_t m = 0; m < methods.size(); ++m) {
      auto it = groups.find({c, methods[m]});
      if (it != groups.end()) {
        std::vector<double> v = it->second;
        std::sort(v.begin(), v.end());
        const double q1 = quantile(v, 0.25), med = quantile(v, 0.5), q3 = quantile(v, 0.75);
        const char* col = colors[m % 6];
        const double cx = x + 15.0;
        s << "<line x1=\"" << format_number(cx) << "\" x2=\"" << format_number(cx) << "\" y1=\""
          << format_number(ypos(v.back())) << "\" y2=\"" << format_number(ypos(v.front())) << "\" stroke=\"" << col
          << "\"/>\n";
        s << "<rect x=\"" << format_number(x + 5) << "\" y=\"" << format_number(ypos(q3)) << "\" width=\"20\" height=\""
          << format_number(std::max(ypos(q1) - ypos(q3), 0.5)) << "\" fill=\"" << col
          << "\" fill-opacity=\"0.4\" stroke=\"" << col << "\"/>\n";
        s << "<line x1=\"" << format_number(x + 5) << "\" x2=\"" << format_number(x + 25) << "\" y1=\""
          << format_number(ypos(med)) << "\" y2=\"" << format_number(ypos(med)) << "\" stroke=\"" << col << "\"/>\n";
      }
      x += 40.0;
    }
    s << "<text x=\"" << format_number(group_left) << "\" y=\"" << format_number(top + plot + 14)
      << "\" transform=\"rotate(30 " << format_number(group_left) << ' ' << format_number(top + plot + 14) << ")\">" << c
      << "</text>\n";
  }
  for (std::size_t m = 0; m < methods.size(); ++m) {
    s << "<text x=\"" << format_number(60.0 + 80.0 * static_cast<double>(m)) << "\" y=\"12\" fill=\""
      << colors[m % 6] << "\">" << methods[m] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace kbp
