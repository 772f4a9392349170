#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "kbp/lp.hpp"
#include "kbp/pipeline.hpp"

namespace py = pybind11;
using namespace kbp;

namespace {

using DoseArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Volumes cross the boundary as (nz, ny, nx) arrays; x varies fastest.
template <typename T>
py::array_t<T> volume_array(const Dims& d, std::span<const T> values) {
  py::array_t<T> a({d.nz, d.ny, d.nx});
  std::copy(values.begin(), values.end(), a.mutable_data());
  return a;
}

std::span<const double> volume_span(const DoseArray& a, const Dims& d, const char* what) {
  if (static_cast<std::size_t>(a.size()) != d.count()) {
    throw std::invalid_argument(std::string(what) + " has " + std::to_string(a.size()) + " values, the grid " +
                                std::to_string(d.count()));
  }
  return {a.data(), static_cast<std::size_t>(a.size())};
}

Dims dims_of(const DoseArray& a) {
  if (a.ndim() != 3) throw std::invalid_argument("expected a 3-d (nz, ny, nx) array");
  return {static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0))};
}

StructureId structure(const std::string& name) {
  const auto s = structure_from_name(name);
  if (!s) throw std::invalid_argument("unknown structure '" + name + "'");
  return *s;
}

py::dict plan_dict(const Plan& p, const Dims& d) {
  py::dict r;
  r["source"] = std::string(plan_source_name(p.source));
  r["dose"] = volume_array<double>(d, p.dose);
  r["fluence"] = py::array_t<double>(static_cast<py::ssize_t>(p.fluence.size()), p.fluence.data());
  r["complexity"] = p.complexity;
  r["complexity_bound"] = p.complexity_bound;
  r["objective"] = p.objective;
  r["alpha"] = p.alpha;
  r["term_values"] = p.term_values;
  r["mimic_residual"] = p.mimic_residual;
  return r;
}

}  // namespace

PYBIND11_MODULE(_kbp, m) {
  m.doc() = "Knowledge-based radiotherapy planning: phantoms, dose, planning, evaluation and the pipeline";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<StageMissingError>(m, "StageMissingError", PyExc_RuntimeError);
  py::register_exception<StageFailedError>(m, "StageFailedError", PyExc_RuntimeError);
  py::register_exception<EvalError>(m, "EvalError", PyExc_ValueError);

  m.def("structure_names", [] {
    std::vector<std::string> n;
    for (std::size_t k = 0; k + 1 < kNumStructures; ++k) n.emplace_back(structure_name(static_cast<StructureId>(k)));
    return n;
  });

  py::class_<Phantom>(m, "Phantom")
      .def_property_readonly("seed", [](const Phantom& p) { return p.seed; })
      .def_property_readonly("shape", [](const Phantom& p) {
        const auto& d = p.grid.dims();
        return py::make_tuple(d.nz, d.ny, d.nx);
      })
      .def_property_readonly("spacing", [](const Phantom& p) {
        const auto& s = p.grid.spacing();
        return py::make_tuple(s.x, s.y, s.z);
      })
      .def_property_readonly("labels", [](const Phantom& p) {
        std::vector<std::uint8_t> v;
        for (auto s : p.grid.labels()) v.push_back(static_cast<std::uint8_t>(s));
        return volume_array<std::uint8_t>(p.grid.dims(), v);
      })
      .def_property_readonly("density", [](const Phantom& p) { return volume_array<float>(p.grid.dims(), p.grid.density()); })
      .def("voxels", [](const Phantom& p, const std::string& name) { return p.grid.voxels_of(structure(name)); },
           py::arg("structure"), "flat indices of a structure's voxels");

  m.def(
      "generate_phantom",
      [](std::uint64_t seed, std::array<int, 3> shape, std::array<double, 3> spacing) {
        return generate_phantom(seed, {{shape[2], shape[1], shape[0]}, {spacing[0], spacing[1], spacing[2]}});
      },
      py::arg("seed"), py::arg("shape") = std::array<int, 3>{16, 32, 32},
      py::arg("spacing") = std::array<double, 3>{4.0, 4.0, 2.0}, "shape is (nz, ny, nx); spacing is (x, y, z) in mm");

  m.def("template_dose", [](const Phantom& p) { return volume_array<double>(p.grid.dims(), template_dose(p)); });

  py::class_<InfluenceMatrix>(m, "InfluenceMatrix")
      .def_property_readonly("num_voxels", &InfluenceMatrix::num_voxels)
      .def_property_readonly("num_beamlets", &InfluenceMatrix::num_beamlets)
      .def_property_readonly("nnz", &InfluenceMatrix::nnz)
      .def("dose", [](const InfluenceMatrix& a, const std::vector<double>& fluence) {
        const DoseDistribution d = compute_dose(a, fluence);
        return volume_array<double>(d.dims, d.values);
      });

  m.def(
      "influence_matrix",
      [](const Phantom& p, int beams, double beamlet_width_mm, double mu_per_mm, int threads) {
        BeamConfig bc;
        bc.count = beams;
        bc.beamlet_width_mm = beamlet_width_mm;
        PhysicsConfig pc;
        pc.mu_per_mm = mu_per_mm;
        py::gil_scoped_release release;
        return influence_matrix(p.grid, make_beams(p, bc), pc, threads);
      },
      py::arg("phantom"), py::arg("beams") = 9, py::arg("beamlet_width_mm") = 8.0, py::arg("mu_per_mm") = 0.005,
      py::arg("threads") = 1);

  m.def(
      "reference_plan",
      [](const Phantom& p, const InfluenceMatrix& a) {
        Plan plan;
        {
          py::gil_scoped_release release;
          plan = reference_plan(p, a);
        }
        return plan_dict(plan, p.grid.dims());
      },
      "the solver-generated clinical reference plan");

  m.def(
      "inverse_plan",
      [](const Phantom& p, const InfluenceMatrix& a, const DoseArray& predicted, double complexity_bound) {
        const auto target = volume_span(predicted, p.grid.dims(), "predicted dose");
        std::vector<double> t(target.begin(), target.end());
        Plan plan;
        double gap = 0.0, ratio = 1.0;
        {
          py::gil_scoped_release release;
          const ForwardProblem pr = make_forward_problem(p, a, build_terms(p, t), complexity_bound);
          const InverseResult inv = inverse_weights(pr, t);
          gap = inv.gap;
          ratio = inv.ratio;
          plan = solve_forward(pr, inv.alpha, PlanSource::GAN);
        }
        py::dict r = plan_dict(plan, p.grid.dims());
        r["inverse_gap"] = gap;
        r["inverse_ratio"] = ratio;
        return r;
      },
      py::arg("phantom"), py::arg("influence"), py::arg("predicted"), py::arg("complexity_bound"),
      "inverse-optimized weights, then the forward plan they produce");

  m.def("objective_terms", [](const Phantom& p, const DoseArray& dose) {
    const auto d = volume_span(dose, p.grid.dims(), "dose");
    std::vector<std::string> labels;
    for (const auto& t : build_terms(p, d)) labels.push_back(t.label());
    return labels;
  });

  m.def(
      "solve_lp",
      [](const Eigen::VectorXd& c, const Eigen::MatrixXd& G, const Eigen::VectorXd& h,
         std::optional<Eigen::MatrixXd> E, std::optional<Eigen::VectorXd> b) {
        lp::LpProblem pr;
        pr.c = c;
        pr.G = G;
        pr.h = h;
        pr.E = E ? *E : Eigen::MatrixXd(0, c.size());
        pr.b = b ? *b : Eigen::VectorXd(0);
        const lp::LpSolution s = lp::simplex_solve(pr);
        py::dict r;
        r["status"] = std::string(lp::to_string(s.status));
        r["x"] = s.x;
        r["objective"] = s.objective;
        r["iterations"] = s.iterations;
        return r;
      },
      py::arg("c"), py::arg("G"), py::arg("h"), py::arg("E") = py::none(), py::arg("b") = py::none(),
      "min c.x subject to G x <= h, E x = b, x >= 0");

  m.def(
      "dose_stats",
      [](const Phantom& p, const DoseArray& dose, const std::string& name) {
        const DoseStats s = dose_stats(volume_span(dose, p.grid.dims(), "dose"), p.grid.voxels_of(structure(name)));
        return py::dict(py::arg("mean") = s.mean, py::arg("max") = s.max, py::arg("d99") = s.d99);
      },
      py::arg("phantom"), py::arg("dose"), py::arg("structure"));

  m.def("criteria_check", [](const Phantom& p, const DoseArray& dose) {
    py::list out;
    for (const auto& r : criteria_check(volume_span(dose, p.grid.dims(), "dose"), p).results) {
      py::dict d;
      d["criterion"] = r.criterion.label();
      d["evaluable"] = r.evaluable;
      d["achieved"] = r.achieved;
      d["margin"] = r.margin;
      d["passed"] = r.pass;
      out.append(d);
    }
    return out;
  });

  m.def("normalize_to_reference", [](const Phantom& p, const DoseArray& dose, const DoseArray& reference) {
    const Normalized n = normalize_to_reference(volume_span(dose, p.grid.dims(), "dose"),
                                                volume_span(reference, p.grid.dims(), "reference"), p);
    return py::make_tuple(volume_array<double>(p.grid.dims(), n.dose), n.scale);
  });

  m.def(
      "gamma_pass_rate",
      [](const DoseArray& eval, const DoseArray& ref, std::array<double, 3> spacing, double dose_tolerance,
         double distance_mm, double low_dose_cutoff, const std::string& normalization, const std::string& mode,
         std::optional<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>> mask) {
        const Dims d = dims_of(ref);
        GammaOptions o;
        o.dose_tolerance = dose_tolerance;
        o.distance_mm = distance_mm;
        o.low_dose_cutoff = low_dose_cutoff;
        if (normalization == "global") o.normalization = GammaNormalization::Global;
        else if (normalization == "local") o.normalization = GammaNormalization::Local;
        else throw std::invalid_argument("normalization must be global or local");
        if (mode == "full") o.mode = GammaMode::Full;
        else if (mode == "neighborhood") o.mode = GammaMode::Neighborhood;
        else throw std::invalid_argument("mode must be full or neighborhood");
        std::span<const std::uint8_t> m;
        if (mask) m = {mask->data(), static_cast<std::size_t>(mask->size())};
        const GammaResult g = gamma_pass_rate(volume_span(eval, d, "eval"), volume_span(ref, d, "ref"), d,
                                              {spacing[0], spacing[1], spacing[2]}, o, m);
        py::dict r;
        r["rate"] = g.rate;
        r["evaluated"] = g.evaluated;
        r["passed"] = g.passed;
        r["gamma"] = volume_array<double>(d, g.gamma);
        return r;
      },
      py::arg("eval"), py::arg("ref"), py::arg("spacing") = std::array<double, 3>{4.0, 4.0, 2.0},
      py::arg("dose_tolerance") = 0.03, py::arg("distance_mm") = 3.0, py::arg("low_dose_cutoff") = 0.10,
      py::arg("normalization") = "global", py::arg("mode") = "full", py::arg("mask") = py::none());

  m.def("split_patients", [](int n, double fraction) {
    const PatientSplit s = split_patients(n, fraction);
    return py::make_tuple(s.train, s.test);
  });
  m.def("config_hash", [](const std::string& text) { return config_hash(parse_config(text)); });
  m.def("canonical_config", [](const std::string& text) { return canonical_config(parse_config(text)); },
        py::arg("text") = "");

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const std::string& config_text, std::filesystem::path out, int threads, bool force) {
             PipelineConfig c = parse_config(config_text);
             c.out = std::move(out);
             c.threads = threads;
             return std::make_unique<Pipeline>(c, force);
           }),
           py::arg("config") = "", py::arg("out") = "kbp_out", py::arg("threads") = 1, py::arg("force") = false)
      .def_property_readonly("hash", &Pipeline::hash)
      .def_property_readonly("out", &Pipeline::out)
      .def("gen_data", &Pipeline::gen_data, py::call_guard<py::gil_scoped_release>())
      .def("train", &Pipeline::train, py::arg("model"), py::call_guard<py::gil_scoped_release>())
      .def("predict", &Pipeline::predict, py::arg("model"), py::arg("patients") = std::vector<std::string>{},
           py::call_guard<py::gil_scoped_release>())
      .def(
          "optimize",
          [](Pipeline& p, const std::string& model, const std::string& mode, std::vector<std::string> ids) {
            const OptimizeMode how = optimize_mode_from_name(mode);
            py::gil_scoped_release release;
            p.optimize(model, how, std::move(ids));
          },
          py::arg("model"), py::arg("mode") = "inverse", py::arg("patients") = std::vector<std::string>{})
      .def("evaluate", &Pipeline::evaluate, py::call_guard<py::gil_scoped_release>())
      .def("run", &Pipeline::run, py::call_guard<py::gil_scoped_release>())
      .def("report", [](const Pipeline& p) {
        std::ostringstream os;
        p.report(os);
        return os.str();
      })
      .def("errors", [](const Pipeline& p) {
        py::list out;
        for (const auto& e : p.errors()) out.append(py::make_tuple(e.stage, e.patient, e.message));
        return out;
      });
}
