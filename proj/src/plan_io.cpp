#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"

#include "kbp/binary_io.hpp"
#include "kbp/planopt.hpp"
#include "kbp/volume_io.hpp"

namespace kbp {
namespace {

using nlohmann::json;

constexpr std::uint32_t kPlanVersion = 1;

json beam_to_json(const Beam& b) {
  return {{"gantry_deg", b.gantry_deg},
          {"source_distance_mm", b.source_distance_mm},
          {"rows", b.rows},
          {"cols", b.cols},
          {"beamlet_width_mm", b.beamlet_width_mm},
          {"isocenter", {b.isocenter.x, b.isocenter.y, b.isocenter.z}},
          {"lateral_center_mm", b.lateral_center_mm},
          {"axial_center_mm", b.axial_center_mm}};
}

Beam beam_from_json(const json& j) {
  Beam b;
  b.gantry_deg = j.at("gantry_deg").get<double>();
  b.source_distance_mm = j.at("source_distance_mm").get<double>();
  b.rows = j.at("rows").get<int>();
  b.cols = j.at("cols").get<int>();
  b.beamlet_width_mm = j.at("beamlet_width_mm").get<double>();
  const auto& iso = j.at("isocenter");
  b.isocenter = {iso.at(0).get<double>(), iso.at(1).get<double>(), iso.at(2).get<double>()};
  b.lateral_center_mm = j.at("lateral_center_mm").get<double>();
  b.axial_center_mm = j.at("axial_center_mm").get<double>();
  return b;
}

TermKind term_kind_from_name(std::string_view name) {
  for (auto k : {TermKind::MeanDose, TermKind::MaxDose, TermKind::AvgAboveThreshold, TermKind::AvgUnderdose,
                 TermKind::AvgOverdose}) {
    if (term_kind_name(k) == name) return k;
  }
  throw io::FormatError("unknown term kind '" + std::string(name) + "'");
}

}  // namespace

void write_plan(std::ostream& os, const Plan& plan, const ForwardProblem& problem, Dims dims, Spacing spacing) {
  if (plan.dose.size() != dims.count()) throw std::invalid_argument("plan dose does not match dims");
  json header;
  header["provenance"] = plan_source_name(plan.source);
  header["complexity_bound"] = plan.complexity_bound;
  header["complexity"] = plan.complexity;
  header["objective"] = plan.objective;
  header["mimic_residual"] = plan.mimic_residual;
  header["iterations"] = plan.iterations;
  header["alpha"] = plan.alpha;
  header["term_values"] = plan.term_values;
  header["certificate"] = {{"primal", plan.certificate.primal_infeasibility},
                           {"dual", plan.certificate.dual_infeasibility},
                           {"gap", plan.certificate.gap}};
  json beams = json::array();
  for (const Beam& b : problem.influence->beams()) beams.push_back(beam_to_json(b));
  header["beams"] = std::move(beams);
  json terms = json::array();
  for (const auto& t : problem.terms) {
    terms.push_back({{"structure", structure_name(t.structure)},
                     {"kind", term_kind_name(t.kind)},
                     {"threshold", t.threshold},
                     {"level", t.level}});
  }
  header["terms"] = std::move(terms);

  io::put_magic(os, "KBPP");
  io::put_u32(os, kPlanVersion);
  io::put_string(os, header.dump());
  VolumeFile dose;
  dose.dims = dims;
  dose.spacing = spacing;
  dose.kind = PayloadKind::Dose;
  dose.values.assign(plan.dose.begin(), plan.dose.end());
  write_volume(os, dose);
  io::put_u32(os, static_cast<std::uint32_t>(plan.fluence.size()));
  for (double w : plan.fluence) io::put_f32(os, static_cast<float>(w));
}

PlanRecord read_plan(std::istream& is) {
  io::expect_magic(is, "KBPP");
  const auto version = io::get_u32(is);
  if (version != kPlanVersion) throw io::FormatError("unsupported KBPP version " + std::to_string(version));
  PlanRecord rec;
  try {
    const json h = json::parse(io::get_string(is));
    Plan& p = rec.plan;
    p.source = plan_source_from_name(h.at("provenance").get<std::string>());
    p.complexity_bound = h.at("complexity_bound").get<double>();
    p.complexity = h.at("complexity").get<double>();
    p.objective = h.at("objective").get<double>();
    p.mimic_residual = h.at("mimic_residual").get<double>();
    p.iterations = h.at("iterations").get<int>();
    p.alpha = h.at("alpha").get<std::vector<double>>();
    p.term_values = h.at("term_values").get<std::vector<double>>();
    const auto& c = h.at("certificate");
    p.certificate = {c.at("primal").get<double>(), c.at("dual").get<double>(), c.at("gap").get<double>()};
    for (const auto& b : h.at("beams")) rec.beams.push_back(beam_from_json(b));
    for (const auto& t : h.at("terms")) {
      const auto s = structure_from_name(t.at("structure").get<std::string>());
      if (!s) throw io::FormatError("unknown structure in plan terms");
      rec.terms.push_back(
          {*s, term_kind_from_name(t.at("kind").get<std::string>()), t.at("threshold").get<double>(), t.at("level").get<double>()});
    }
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("bad KBPP header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(std::string("bad KBPP header: ") + e.what());
  }
  const VolumeFile dose = read_volume(is);
  if (dose.kind != PayloadKind::Dose) throw io::FormatError("KBPP dose payload has the wrong kind");
  rec.dims = dose.dims;
  rec.spacing = dose.spacing;
  rec.plan.dose.assign(dose.values.begin(), dose.values.end());
  const auto n = io::get_u32(is);
  rec.plan.fluence.resize(n);
  for (auto& w : rec.plan.fluence) w = io::get_f32(is);
  return rec;
}

void write_plan_file(const std::filesystem::path& path, const Plan& plan, const ForwardProblem& problem, Dims dims,
                     Spacing spacing) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_plan(os, plan, problem, dims, spacing);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

PlanRecord read_plan_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_plan(is);
}

}  // namespace kbp
