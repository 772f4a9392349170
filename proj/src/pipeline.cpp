#include "kbp/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"
#include "kbp/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace kbp {
namespace {

constexpr std::string_view kVersion = "0.1.0";

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// ---- config fields ----

std::string show(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
  bool hashed = true;
};

template <typename T, typename Access>
Field number(std::string key, Access access, bool hashed = true) {
  Field f;
  f.key = key;
  f.hashed = hashed;
  f.get = [access](const PipelineConfig& c) {
    PipelineConfig copy = c;
    const T v = access(copy);
    if constexpr (std::is_floating_point_v<T>) return show(static_cast<double>(v));
    else return std::to_string(v);
  };
  f.set = [access, key](PipelineConfig& c, const std::string& text) { access(c) = parse_number<T>(key, text); };
  return f;
}

template <typename Access>
Field flag(std::string key, Access access) {
  Field f;
  f.key = key;
  f.get = [access](const PipelineConfig& c) {
    PipelineConfig copy = c;
    return std::string(access(copy) ? "true" : "false");
  };
  f.set = [access, key](PipelineConfig& c, const std::string& text) { access(c) = parse_bool(key, text); };
  return f;
}

const std::vector<Field>& fields() {
  using C = PipelineConfig;
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(number<int>("dataset.patients", [](C& c) -> int& { return c.dataset.patients; }));
    v.push_back(number<double>("dataset.train_fraction", [](C& c) -> double& { return c.dataset.train_fraction; }));
    v.push_back(number<std::uint64_t>("dataset.seed", [](C& c) -> std::uint64_t& { return c.dataset.seed; }));
    v.push_back(number<int>("dataset.nx", [](C& c) -> int& { return c.dataset.dims.nx; }));
    v.push_back(number<int>("dataset.ny", [](C& c) -> int& { return c.dataset.dims.ny; }));
    v.push_back(number<int>("dataset.nz", [](C& c) -> int& { return c.dataset.dims.nz; }));
    v.push_back(number<double>("dataset.spacing_x_mm", [](C& c) -> double& { return c.dataset.spacing.x; }));
    v.push_back(number<double>("dataset.spacing_y_mm", [](C& c) -> double& { return c.dataset.spacing.y; }));
    v.push_back(number<double>("dataset.spacing_z_mm", [](C& c) -> double& { return c.dataset.spacing.z; }));
    v.push_back(number<int>("dataset.slice_size", [](C& c) -> int& { return c.dataset.slice_size; }));

    v.push_back(number<double>("physics.mu_per_mm", [](C& c) -> double& { return c.physics.physics.mu_per_mm; }));
    v.push_back(number<double>("physics.f0", [](C& c) -> double& { return c.physics.physics.f0; }));
    v.push_back(number<int>("physics.beams", [](C& c) -> int& { return c.physics.beams.count; }));
    v.push_back(number<double>("physics.beamlet_width_mm",
                               [](C& c) -> double& { return c.physics.beams.beamlet_width_mm; }));
    v.push_back(number<double>("physics.source_distance_mm",
                               [](C& c) -> double& { return c.physics.beams.source_distance_mm; }));

    v.push_back(number<int>("training.epochs", [](C& c) -> int& { return c.training.net.epochs; }));
    v.push_back(number<int>("training.batch_size", [](C& c) -> int& { return c.training.net.batch_size; }));
    v.push_back(number<double>("training.lambda", [](C& c) -> double& { return c.training.net.lambda; }));
    v.push_back(number<std::uint64_t>("training.seed", [](C& c) -> std::uint64_t& { return c.training.net.seed; }));
    v.push_back(number<int>("training.base_channels", [](C& c) -> int& { return c.training.net.unet.base; }));
    v.push_back(number<double>("training.dropout", [](C& c) -> double& { return c.training.net.unet.dropout; }));
    v.push_back(number<double>("training.learning_rate", [](C& c) -> double& { return c.training.net.adam.lr; }));
    v.push_back(number<double>("training.beta1", [](C& c) -> double& { return c.training.net.adam.beta1; }));
    v.push_back(number<double>("training.beta2", [](C& c) -> double& { return c.training.net.adam.beta2; }));
    v.push_back(flag("training.conditional_discriminator",
                     [](C& c) -> bool& { return c.training.net.conditional_discriminator; }));
    v.push_back(flag("training.early_stop", [](C& c) -> bool& { return c.training.net.early_stop; }));
    v.push_back(number<int>("training.rf_trees", [](C& c) -> int& { return c.training.forest.trees; }));
    v.push_back(number<int>("training.rf_features_per_split",
                            [](C& c) -> int& { return c.training.forest.features_per_split; }));
    v.push_back(number<int>("training.rf_min_samples_split",
                            [](C& c) -> int& { return c.training.forest.min_samples_split; }));
    v.push_back(number<std::uint64_t>("training.rf_seed", [](C& c) -> std::uint64_t& { return c.training.forest.seed; }));
    v.push_back(number<std::size_t>("training.rf_voxels_per_patient",
                                    [](C& c) -> std::size_t& { return c.training.rf_voxels_per_patient; }));

    Field mode;
    mode.key = "optimization.mode";
    mode.get = [](const C& c) { return std::string(optimize_mode_name(c.optimization.mode)); };
    mode.set = [](C& c, const std::string& t) { c.optimization.mode = optimize_mode_from_name(t); };
    v.push_back(mode);
    Field mimic_model;
    mimic_model.key = "optimization.mimic_model";
    mimic_model.get = [](const C& c) { return c.optimization.mimic_model; };
    mimic_model.set = [](C& c, const std::string& t) { c.optimization.mimic_model = t; };
    v.push_back(mimic_model);
    v.push_back(number<std::size_t>("optimization.max_voxels_per_target",
                                    [](C& c) -> std::size_t& { return c.optimization.forward.max_voxels_per_target; }));
    v.push_back(number<std::size_t>("optimization.max_voxels_per_organ",
                                    [](C& c) -> std::size_t& { return c.optimization.forward.max_voxels_per_organ; }));
    v.push_back(number<int>("optimization.mimic_iterations",
                            [](C& c) -> int& { return c.optimization.mimic.max_iterations; }));
    v.push_back(number<int>("optimization.mimic_bisection_steps",
                            [](C& c) -> int& { return c.optimization.mimic.bisection_steps; }));

    v.push_back(number<double>("evaluation.gamma_dose_tolerance",
                               [](C& c) -> double& { return c.evaluation.gamma.dose_tolerance; }));
    v.push_back(number<double>("evaluation.gamma_distance_mm",
                               [](C& c) -> double& { return c.evaluation.gamma.distance_mm; }));
    v.push_back(number<double>("evaluation.gamma_low_dose_cutoff",
                               [](C& c) -> double& { return c.evaluation.gamma.low_dose_cutoff; }));
    Field norm;
    norm.key = "evaluation.gamma_normalization";
    norm.get = [](const C& c) { return std::string(gamma_normalization_name(c.evaluation.gamma.normalization)); };
    norm.set = [](C& c, const std::string& t) {
      if (t == "global") c.evaluation.gamma.normalization = GammaNormalization::Global;
      else if (t == "local") c.evaluation.gamma.normalization = GammaNormalization::Local;
      else throw ConfigError("evaluation.gamma_normalization must be global or local, got '" + t + "'");
    };
    v.push_back(norm);
    Field gmode;
    gmode.key = "evaluation.gamma_mode";
    gmode.get = [](const C& c) { return std::string(gamma_mode_name(c.evaluation.gamma.mode)); };
    gmode.set = [](C& c, const std::string& t) {
      if (t == "full") c.evaluation.gamma.mode = GammaMode::Full;
      else if (t == "neighborhood") c.evaluation.gamma.mode = GammaMode::Neighborhood;
      else throw ConfigError("evaluation.gamma_mode must be full or neighborhood, got '" + t + "'");
    };
    v.push_back(gmode);
    v.push_back(flag("evaluation.svg", [](C& c) -> bool& { return c.evaluation.svg; }));
    v.push_back(flag("evaluation.dvh", [](C& c) -> bool& { return c.evaluation.dvh; }));

    Field out;
    out.key = "output.dir";
    out.hashed = false;
    out.get = [](const C& c) { return c.out.string(); };
    out.set = [](C& c, const std::string& t) { c.out = t; };
    v.push_back(out);
    v.push_back(number<int>("runtime.threads", [](C& c) -> int& { return c.threads; }, false));
    std::sort(v.begin(), v.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return v;
  }();
  return f;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

// ---- files ----

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream s;
  s << is.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("failed writing " + p.string());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; exceptions are
// returned per index so the caller can record them in id order.
std::vector<std::string> parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::string> failures(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (const std::exception& e) {
      failures[i] = e.what()[0] ? e.what() : "unknown error";
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(std::max<std::size_t>(n, 1))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) guarded(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return failures;
}

std::vector<double> to_double(const std::vector<float>& v) { return {v.begin(), v.end()}; }

}  // namespace

// ---- config ----

std::string_view optimize_mode_name(OptimizeMode m) { return m == OptimizeMode::Inverse ? "inverse" : "mimic"; }

OptimizeMode optimize_mode_from_name(std::string_view name) {
  if (name == "inverse") return OptimizeMode::Inverse;
  if (name == "mimic") return OptimizeMode::Mimic;
  throw ConfigError("optimization mode must be inverse or mimic, got '" + std::string(name) + "'");
}

PipelineConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ptree_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  PipelineConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' is outside a [section]");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const Field* f = find_field(full);
      if (!f) throw ConfigError("unknown config key '" + full + "'");
      f->set(c, value.get_value<std::string>());
    }
  }
  validate(c);
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

void validate(const PipelineConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  const auto& d = c.dataset;
  require(d.patients >= 2, "dataset.patients must be at least 2");
  require(d.train_fraction > 0.0 && d.train_fraction < 1.0, "dataset.train_fraction must lie in (0, 1)");
  require(d.dims.nx >= 16 && d.dims.ny >= 16 && d.dims.nz >= 8, "dataset grid needs nx, ny >= 16 and nz >= 8");
  require(d.spacing.x > 0 && d.spacing.y > 0 && d.spacing.z > 0, "dataset spacing must be positive");
  require(d.slice_size >= 16 && d.slice_size % 16 == 0, "dataset.slice_size must be a positive multiple of 16");
  require(c.physics.physics.mu_per_mm >= 0.0 && c.physics.physics.f0 > 0.0, "physics.mu_per_mm >= 0 and f0 > 0");
  require(c.physics.beams.count >= 1 && c.physics.beams.beamlet_width_mm > 0.0, "physics needs beams >= 1 and a positive beamlet width");
  const auto& t = c.training;
  require(t.net.epochs >= 1 && t.net.batch_size >= 1, "training.epochs and training.batch_size must be >= 1");
  require(t.net.lambda >= 0.0, "training.lambda must be >= 0");
  require(t.net.unet.base >= 1, "training.base_channels must be >= 1");
  require(t.net.unet.dropout >= 0.0 && t.net.unet.dropout < 1.0, "training.dropout must lie in [0, 1)");
  require(t.net.adam.lr > 0.0, "training.learning_rate must be positive");
  require(t.forest.trees >= 1 && t.forest.features_per_split >= 1 && t.forest.features_per_split <= kNumRfFeatures,
          "training.rf_trees >= 1 and rf_features_per_split in [1, 10]");
  require(t.forest.min_samples_split >= 2, "training.rf_min_samples_split must be >= 2");
  require(t.rf_voxels_per_patient >= 1, "training.rf_voxels_per_patient must be >= 1");
  const auto& models = model_names();
  require(std::find(models.begin(), models.end(), c.optimization.mimic_model) != models.end(),
          "optimization.mimic_model must be gan, cnn or rf");
  require(c.optimization.mimic.max_iterations >= 1 && c.optimization.mimic.bisection_steps >= 0,
          "optimization mimic settings must be positive");
  const auto& g = c.evaluation.gamma;
  require(g.dose_tolerance > 0.0 && g.distance_mm > 0.0, "gamma tolerances must be positive");
  require(g.low_dose_cutoff >= 0.0 && g.low_dose_cutoff < 1.0, "evaluation.gamma_low_dose_cutoff must lie in [0, 1)");
  require(c.threads >= 1, "runtime.threads must be >= 1");
  require(!c.out.empty(), "output.dir must be set");
}

std::string canonical_config(const PipelineConfig& c) {
  std::string s;
  std::string section;
  for (const auto& f : fields()) {
    if (!f.hashed) continue;
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      s += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    s += f.key.substr(dot + 1) + " = " + f.get(c) + "\n";
  }
  return s;
}

std::string config_hash(const PipelineConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_config(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string patient_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%03d", index);
  return buf;
}

std::uint64_t patient_seed(std::uint64_t dataset_seed, int index) {
  return splitmix64(dataset_seed * 1000003ULL + static_cast<std::uint64_t>(index));
}

PatientSplit split_patients(int patients, double train_fraction) {
  if (patients < 2) throw ConfigError("need at least 2 patients to split");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  // the epsilon keeps 30 * 0.6 at 18 despite binary rounding
  int n_train = static_cast<int>(std::floor(patients * train_fraction + 1e-9));
  n_train = std::clamp(n_train, 1, patients - 1);
  PatientSplit s;
  for (int i = 0; i < patients; ++i) (i < n_train ? s.train : s.test).push_back(patient_id(i));
  return s;
}

// ---- pipeline ----

Pipeline::Pipeline(PipelineConfig config, bool force, std::ostream* log)
    : config_(std::move(config)), force_(force), log_(log) {
  validate(config_);
  config_.training.net.unet.size = config_.dataset.slice_size;
  hash_ = config_hash(config_);
  const fs::path stored = config_.out / "config.txt";
  if (fs::exists(stored)) {
    const std::string previous = config_hash(parse_config(read_text(stored)));
    if (previous != hash_) {
      if (!force_) {
        throw ConfigError(config_.out.string() + " holds a run with a different config (hash " + previous +
                          "); rerun with --force to replace it");
      }
      note("config changed; discarding stage markers of hash " + previous);
      fs::remove_all(config_.out / "stages");
    }
  }
}

std::string Pipeline::method_name(const std::string& model, OptimizeMode mode, const std::string& mimic_model) {
  if (mode == OptimizeMode::Inverse) return model;
  return model == mimic_model ? "mimic" : "mimic-" + model;
}

void Pipeline::note(const std::string& message) const {
  if (log_) *log_ << message << '\n';
}

PatientSplit Pipeline::split() const {
  return split_patients(config_.dataset.patients, config_.dataset.train_fraction);
}

bool Pipeline::stage_current(const std::string& stage, const std::string& detail) const {
  const fs::path marker = config_.out / "stages" / (stage + ".json");
  if (!fs::exists(marker)) return false;
  try {
    const auto j = nlohmann::json::parse(read_text(marker));
    return j.at("config_hash") == hash_ && j.at("detail") == detail;
  } catch (const std::exception&) {
    return false;
  }
}

void Pipeline::require_stage(const std::string& stage, const std::string& needed_for) const {
  const fs::path marker = config_.out / "stages" / (stage + ".json");
  bool ok = false;
  if (fs::exists(marker)) {
    try {
      ok = nlohmann::json::parse(read_text(marker)).at("config_hash") == hash_;
    } catch (const std::exception&) {
    }
  }
  if (!ok) {
    throw StageMissingError("stage '" + stage + "' has not completed for this config; run it before " + needed_for);
  }
}

void Pipeline::prepare_stage(const std::string& stage, const std::vector<fs::path>& outputs) {
  const fs::path marker = config_.out / "stages" / (stage + ".json");
  bool ours = false;
  if (fs::exists(marker)) {
    try {
      ours = nlohmann::json::parse(read_text(marker)).at("config_hash") == hash_;
    } catch (const std::exception&) {
    }
  }
  bool leftovers = false;
  for (const auto& o : outputs) leftovers = leftovers || fs::exists(config_.out / o);
  if ((fs::exists(marker) && !ours) || (!fs::exists(marker) && leftovers)) {
    if (!force_) {
      throw ConfigError("stage '" + stage + "' has partial or foreign results in " + config_.out.string() +
                        "; rerun with --force to replace them");
    }
    for (const auto& o : outputs) fs::remove_all(config_.out / o);
    fs::remove(marker);
  }
  fs::create_directories(config_.out / "stages");
  write_text(config_.out / "config.txt", canonical_config(config_));
}

void Pipeline::record_error(const std::string& stage, const std::string& patient, const std::string& message) {
  errors_.push_back({stage, patient, message});
  note("  " + patient + ": " + message);
}

void Pipeline::finish_stage(const std::string& stage, const std::vector<fs::path>& artifacts,
                            const std::string& detail) {
  ordered_json j;
  j["stage"] = stage;
  j["config_hash"] = hash_;
  j["detail"] = detail;
  j["completed_at"] = utc_now();
  j["artifacts"] = ordered_json::array();
  for (const auto& a : artifacts) j["artifacts"].push_back(a.generic_string());
  j["errors"] = ordered_json::array();
  for (const auto& e : errors_) {
    if (e.stage == stage) j["errors"].push_back({{"patient", e.patient}, {"message", e.message}});
  }
  write_text(config_.out / "stages" / (stage + ".json"), j.dump(2) + "\n");
  write_manifest();
}

void Pipeline::write_manifest() const {
  ordered_json m;
  m["config_hash"] = hash_;
  m["config"] = "config.txt";
  m["versions"] = {{"kbp", std::string(kVersion)}, {"volume_format", kVolumeVersion}};
  m["written_at"] = utc_now();
  const PatientSplit s = split();
  m["split"] = {{"train", s.train}, {"test", s.test}};
  m["stages"] = ordered_json::object();
  ordered_json audit = ordered_json::object();
  ordered_json errors = ordered_json::array();
  std::vector<fs::path> markers;
  if (fs::exists(config_.out / "stages")) {
    for (const auto& e : fs::directory_iterator(config_.out / "stages")) markers.push_back(e.path());
  }
  std::sort(markers.begin(), markers.end());
  const std::set<std::string> test(s.test.begin(), s.test.end());
  for (const auto& p : markers) {
    const auto j = ordered_json::parse(read_text(p));
    const std::string name = j.at("stage");
    m["stages"][name] = {{"config_hash", j.at("config_hash")},
                         {"completed_at", j.at("completed_at")},
                         {"artifacts", j.at("artifacts")}};
    for (const auto& e : j.at("errors")) errors.push_back({{"stage", name}, {"patient", e.at("patient")}, {"message", e.at("message")}});
    if (name.rfind("train-", 0) == 0) {
      std::vector<std::string> used;
      std::stringstream ds(j.at("detail").get<std::string>());
      for (std::string id; std::getline(ds, id, ',');) used.push_back(id);
      std::size_t overlap = 0;
      for (const auto& id : used) overlap += test.count(id);
      audit[name] = {{"trained_on", used}, {"test_patients_used", overlap}};
    }
  }
  m["split_audit"] = audit;
  m["errors"] = errors;
  write_text(config_.out / "run_manifest.json", m.dump(2) + "\n");
}

PatientData Pipeline::load_patient(const std::string& id) const {
  const fs::path dir = config_.out / "data" / id;
  if (!fs::exists(dir)) throw StageMissingError("patient " + id + " has no data; run gen-data first");
  PatientData p;
  p.phantom.grid = grid_from_volumes(read_volume_file(dir / "density.kbpv"), read_volume_file(dir / "labels.kbpv"));
  for (auto t : kTargets) p.phantom.prescriptions[t] = prescription_gy(t);
  const auto meta = nlohmann::json::parse(read_text(dir / "patient.json"));
  p.phantom.seed = meta.at("seed").get<std::uint64_t>();
  p.influence = read_influence_file(dir / "influence.kbpi");
  p.reference = read_plan_file(dir / "reference.kbpp");
  return p;
}

void Pipeline::gen_data() {
  const std::string stage = "gen-data";
  if (stage_current(stage)) return note(stage + ": up to date");
  prepare_stage(stage, {"data"});
  note(stage + ": " + std::to_string(config_.dataset.patients) + " patients");
  const int n = config_.dataset.patients;
  const int inner_threads = n >= config_.threads ? 1 : config_.threads;
  const auto failures = parallel_for(static_cast<std::size_t>(n), config_.threads, [&](std::size_t i) {
    const int index = static_cast<int>(i);
    const std::string id = patient_id(index);
    const fs::path dir = config_.out / "data" / id;
    fs::create_directories(dir);
    const std::uint64_t seed = patient_seed(config_.dataset.seed, index);
    const Phantom ph = generate_phantom(seed, {config_.dataset.dims, config_.dataset.spacing});
    const auto beams = make_beams(ph, config_.physics.beams);
    const InfluenceMatrix a = influence_matrix(ph.grid, beams, config_.physics.physics, inner_threads);
    const auto tmpl = template_dose(ph);
    const ForwardProblem pr = make_forward_problem(ph, a, build_terms(ph, tmpl),
                                                   reference_complexity_bound(a.beams()), config_.optimization.forward);
    const Plan ref = solve_forward(pr, reference_weights(), PlanSource::Clinical);
    write_volume_file(dir / "density.kbpv", density_volume(ph.grid));
    write_volume_file(dir / "labels.kbpv", label_volume(ph.grid));
    write_influence_file(dir / "influence.kbpi", a);
    write_plan_file(dir / "reference.kbpp", ref, pr, ph.grid.dims(), ph.grid.spacing());
    write_text(dir / "patient.json", ordered_json{{"id", id}, {"index", index}, {"seed", seed}}.dump(2) + "\n");
  });
  std::vector<fs::path> artifacts;
  std::vector<std::string> ok;
  for (int i = 0; i < n; ++i) {
    const std::string id = patient_id(i);
    if (!failures[static_cast<std::size_t>(i)].empty()) {
      record_error(stage, id, failures[static_cast<std::size_t>(i)]);
      continue;
    }
    ok.push_back(id);
    for (const char* f : {"density.kbpv", "labels.kbpv", "influence.kbpi", "reference.kbpp", "patient.json"}) {
      artifacts.push_back(fs::path("data") / id / f);
    }
  }
  const PatientSplit s = split();
  ordered_json split_json{{"train_fraction", config_.dataset.train_fraction}, {"train", s.train}, {"test", s.test}};
  write_text(config_.out / "data" / "split.json", split_json.dump(2) + "\n");
  artifacts.push_back("data/split.json");
  if (ok.empty()) throw StageFailedError("gen-data: every patient failed");
  finish_stage(stage, artifacts);
}

void Pipeline::train(const std::string& model) {
  if (std::find(model_names().begin(), model_names().end(), model) == model_names().end()) {
    throw ConfigError("unknown model '" + model + "' (expected gan, cnn or rf)");
  }
  const std::string stage = "train-" + model;
  const PatientSplit s = split();
  const std::string detail = join(s.train);
  if (stage_current(stage, detail)) return note(stage + ": up to date");
  require_stage("gen-data", stage);
  const fs::path dir = fs::path("models") / model;
  prepare_stage(stage, {dir});
  fs::create_directories(config_.out / dir);
  note(stage + ": " + std::to_string(s.train.size()) + " training patients");

  std::vector<fs::path> artifacts;
  if (model == "rf") {
    std::vector<RfFeatures> rows;
    std::vector<double> targets;
    for (const auto& id : s.train) {
      const PatientData p = load_patient(id);
      const RfFeatureExtractor fx(p.phantom, p.influence);
      for (auto v : rf_sample_voxels(fx.num_voxels(), config_.training.rf_voxels_per_patient)) {
        rows.push_back(fx.features(v));
        targets.push_back(p.reference.plan.dose[v]);
      }
    }
    ForestConfig fc = config_.training.forest;
    fc.threads = config_.threads;
    RandomForest forest;
    try {
      forest = rf_train(rows, targets, fc);
    } catch (const std::exception& e) {
      throw StageFailedError(stage + ": " + e.what());
    }
    write_text(config_.out / dir / "forest.json", forest_to_json(forest) + "\n");
    artifacts.push_back(dir / "forest.json");
  } else {
    SliceDataset data;
    data.size = config_.dataset.slice_size;
    for (const auto& id : s.train) {
      const PatientData p = load_patient(id);
      extract_slices(p.phantom, p.reference.plan.dose, data);
    }
    TrainResult r;
    try {
      r = model == "gan" ? gan_train(data, config_.training.net) : cnn_train(data, config_.training.net);
    } catch (const std::exception& e) {
      throw StageFailedError(stage + ": " + e.what());
    }
    if (r.diverged) record_error(stage, "*", "training diverged; kept the last good epoch: " + r.message);
    nn::write_archive_file(config_.out / dir / "generator.kbpt", r.generator);
    std::ostringstream log;
    write_training_log(log, r.epochs);
    write_text(config_.out / dir / "training_log.csv", log.str());
    std::ostringstream steps;
    steps << "epoch,step,d_loss,g_adv,g_l1,g_total\n";
    char buf[160];
    for (const auto& st : r.steps) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g\n", st.epoch, st.step, st.d_loss, st.g_adv, st.g_l1,
                    st.g_total);
      steps << buf;
    }
    write_text(config_.out / dir / "steps.csv", steps.str());
    artifacts.insert(artifacts.end(), {dir / "generator.kbpt", dir / "training_log.csv", dir / "steps.csv"});
  }
  finish_stage(stage, artifacts, detail);
}

void Pipeline::predict(const std::string& model, std::vector<std::string> ids) {
  if (std::find(model_names().begin(), model_names().end(), model) == model_names().end()) {
    throw ConfigError("unknown model '" + model + "' (expected gan, cnn or rf)");
  }
  if (ids.empty()) ids = split().test;
  std::sort(ids.begin(), ids.end());
  const std::string stage = "predict-" + model;
  const std::string detail = join(ids);
  if (stage_current(stage, detail)) return note(stage + ": up to date");
  require_stage("gen-data", stage);
  require_stage("train-" + model, stage);
  const fs::path dir = fs::path("predictions") / model;
  prepare_stage(stage, {dir});
  fs::create_directories(config_.out / dir);
  note(stage + ": " + std::to_string(ids.size()) + " patients");

  std::vector<fs::path> artifacts;
  const fs::path model_dir = config_.out / "models" / model;
  std::function<std::vector<double>(const PatientData&)> infer;
  std::optional<UNet> net;
  RandomForest forest;
  if (model == "rf") {
    forest = forest_from_json(read_text(model_dir / "forest.json"));
    infer = [&](const PatientData& p) { return rf_predict_volume(forest, RfFeatureExtractor(p.phantom, p.influence)); };
  } else {
    net.emplace(UNet::from_archive(nn::read_archive_file(model_dir / "generator.kbpt")));
    infer = [&](const PatientData& p) { return predict_volume(*net, p.phantom, nn::Mode::Eval); };
  }
  for (const auto& id : ids) {
    try {
      const PatientData p = load_patient(id);
      const auto dose = infer(p);
      const fs::path file = dir / (id + ".kbpv");
      write_volume_file(config_.out / file, dose_volume(p.phantom.grid, dose));
      artifacts.push_back(file);
    } catch (const std::exception& e) {
      record_error(stage, id, e.what());
    }
  }
  finish_stage(stage, artifacts, detail);
}

void Pipeline::optimize(const std::string& model, OptimizeMode mode, std::vector<std::string> ids) {
  if (std::find(model_names().begin(), model_names().end(), model) == model_names().end()) {
    throw ConfigError("unknown model '" + model + "' (expected gan, cnn or rf)");
  }
  if (ids.empty()) ids = split().test;
  std::sort(ids.begin(), ids.end());
  const std::string method = method_name(model, mode, config_.optimization.mimic_model);
  const std::string stage = "optimize-" + method;
  const std::string detail = join(ids);
  if (stage_current(stage, detail)) return note(stage + ": up to date");
  require_stage("gen-data", stage);
  require_stage("predict-" + model, stage);
  const fs::path dir = fs::path("plans") / method;
  prepare_stage(stage, {dir});
  fs::create_directories(config_.out / dir);
  note(stage + ": " + std::to_string(ids.size()) + " patients, " + std::string(optimize_mode_name(mode)));

  const PlanSource source = mode == OptimizeMode::Mimic ? PlanSource::Mimic : plan_source_from_name(model);
  struct Row {
    double spg = 0, bound = 0, objective = 0, gap = 0, residual = 0;
  };
  std::vector<Row> rows(ids.size());
  const auto failures = parallel_for(ids.size(), config_.threads, [&](std::size_t i) {
    const std::string& id = ids[i];
    const PatientData p = load_patient(id);
    const fs::path pred_file = config_.out / "predictions" / model / (id + ".kbpv");
    if (!fs::exists(pred_file)) throw StageMissingError("no " + model + " prediction for " + id);
    const auto predicted = to_double(read_volume_file(pred_file).values);
    const double bound = p.reference.plan.complexity;
    const ForwardProblem pr = make_forward_problem(p.phantom, p.influence, build_terms(p.phantom, predicted), bound,
                                                   config_.optimization.forward);
    Plan plan;
    Row row;
    if (mode == OptimizeMode::Inverse) {
      const InverseResult inv = inverse_weights(pr, predicted);
      plan = solve_forward(pr, inv.alpha, source);
      row.gap = inv.gap;
    } else {
      plan = dose_mimic(pr, predicted, config_.optimization.mimic);
      plan.source = source;
      row.residual = plan.mimic_residual;
    }
    if (plan.complexity > bound + 1e-6) {
      throw PlanError("plan complexity " + std::to_string(plan.complexity) + " exceeds the bound " + std::to_string(bound));
    }
    write_plan_file(config_.out / dir / (id + ".kbpp"), plan, pr, p.phantom.grid.dims(), p.phantom.grid.spacing());
    row.spg = plan.complexity;
    row.bound = bound;
    row.objective = plan.objective;
    rows[i] = row;
  });

  std::vector<fs::path> artifacts;
  std::ostringstream summary;
  summary << "patient,status,complexity,complexity_bound,objective,inverse_gap,mimic_residual\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!failures[i].empty()) {
      record_error(stage, ids[i], failures[i]);
      summary << ids[i] << ",failed,,,,,\n";
      continue;
    }
    artifacts.push_back(dir / (ids[i] + ".kbpp"));
    const Row& r = rows[i];
    summary << ids[i] << ",ok," << format_number(r.spg) << ',' << format_number(r.bound) << ','
            << format_number(r.objective) << ',' << format_number(r.gap) << ',' << format_number(r.residual) << '\n';
  }
  write_text(config_.out / dir / "summary.csv", summary.str());
  artifacts.push_back(dir / "summary.csv");
  finish_stage(stage, artifacts, detail);
}

void Pipeline::evaluate() {
  const std::string stage = "evaluate";
  const PatientSplit s = split();
  // methods whose plans are current for this config, in a fixed order
  std::vector<std::string> methods;
  std::vector<std::string> candidates{"gan", "cnn", "rf", "mimic"};
  for (const auto& m : model_names()) candidates.push_back("mimic-" + m);
  for (const auto& m : candidates) {
    const fs::path marker = config_.out / "stages" / ("optimize-" + m + ".json");
    if (!fs::exists(marker)) continue;
    if (nlohmann::json::parse(read_text(marker)).at("config_hash") == hash_) methods.push_back(m);
  }
  const std::string detail = join(methods);
  if (stage_current(stage, detail)) return note(stage + ": up to date");
  require_stage("gen-data", stage);
  prepare_stage(stage, {"reports"});
  fs::create_directories(config_.out / "reports");
  note(stage + ": methods [" + detail + "] on " + std::to_string(s.test.size()) + " test patients");

  const GammaOptions& gopt = config_.evaluation.gamma;
  const std::vector<std::string> columns = [&] {
    std::vector<std::string> c{"reference"};
    c.insert(c.end(), methods.begin(), methods.end());
    return c;
  }();
  std::map<std::string, std::vector<CriteriaReport>> reports;
  std::map<std::string, std::vector<std::vector<HeadToHead>>> comparisons;
  std::map<std::string, std::array<double, 3>> gamma_sum;
  std::map<std::string, std::size_t> patients;
  std::vector<HeadToHeadRow> h2h;
  std::ostringstream gaps, norm, per_plan, gamma_rows;
  gaps << "patient,method,reason\n";
  norm << "patient,method,scale,reference_d99,normalized_d99,relative_error\n";
  per_plan << "patient,method,criterion,achieved_gy,margin_gy,pass\n";
  gamma_rows << "patient,method,group,evaluated,passed,rate\n";
  std::vector<fs::path> artifacts;

  for (const auto& id : s.test) {
    PatientData p;
    try {
      p = load_patient(id);
    } catch (const std::exception& e) {
      for (const auto& m : columns) gaps << id << ',' << m << ",missing patient data\n";
      record_error(stage, id, e.what());
      continue;
    }
    const auto& ref = p.reference.plan.dose;
    const CriteriaReport ref_report = criteria_check(ref, p.phantom);
    const auto ptv = p.phantom.grid.voxels_of(StructureId::PTV70);
    const double ref_d99 = dose_stats(ref, ptv).d99;
    std::array<std::vector<std::uint8_t>, 3> masks;
    for (int g = 0; g < 3; ++g) masks[static_cast<std::size_t>(g)] = group_mask(p.phantom.grid, static_cast<StructureGroup>(g));

    for (const auto& m : columns) {
      std::vector<double> dose;
      if (m == "reference") {
        dose = ref;
      } else {
        const fs::path file = config_.out / "plans" / m / (id + ".kbpp");
        if (!fs::exists(file)) {
          gaps << id << ',' << m << ",no plan\n";
          continue;
        }
        try {
          dose = read_plan_file(file).plan.dose;
        } catch (const std::exception& e) {
          gaps << id << ',' << m << ",unreadable plan\n";
          record_error(stage, id, m + ": " + e.what());
          continue;
        }
      }
      Normalized n;
      try {
        n = normalize_to_reference(dose, ref, p.phantom);
      } catch (const std::exception& e) {
        gaps << id << ',' << m << ",normalization failed\n";
        record_error(stage, id, m + ": " + e.what());
        continue;
      }
      const double d99 = dose_stats(n.dose, ptv).d99;
      norm << id << ',' << m << ',' << format_number(n.scale) << ',' << format_number(ref_d99) << ','
           << format_number(d99) << ',';
      char rel[32];
      std::snprintf(rel, sizeof rel, "%.3e", std::abs(d99 - ref_d99) / std::max(std::abs(ref_d99), 1e-300));
      norm << rel << '\n';

      CriteriaReport rep = criteria_check(n.dose, p.phantom);
      for (const auto& r : rep.results) {
        if (!r.evaluable) continue;
        per_plan << id << ',' << m << ',' << r.criterion.label() << ',' << format_number(r.achieved) << ','
                 << format_number(r.margin) << ',' << (r.pass ? 1 : 0) << '\n';
      }
      auto diffs = head_to_head(rep, ref_report);
      for (const auto& d : diffs) h2h.push_back({id, m, d});
      comparisons[m].push_back(std::move(diffs));
      reports[m].push_back(std::move(rep));
      auto& gs = gamma_sum[m];
      for (int g = 0; g < 3; ++g) {
        const GammaResult gr = gamma_pass_rate(n.dose, ref, p.phantom.grid.dims(), p.phantom.grid.spacing(), gopt,
                                               masks[static_cast<std::size_t>(g)]);
        gs[static_cast<std::size_t>(g)] += gr.rate;
        gamma_rows << id << ',' << m << ',' << structure_group_name(static_cast<StructureGroup>(g)) << ','
                   << gr.evaluated << ',' << gr.passed << ',' << format_number(gr.rate) << '\n';
      }
      ++patients[m];

      if (config_.evaluation.dvh) {
        std::vector<DvhCurve> curves;
        for (std::size_t k = 0; k < kNumStructures; ++k) {
          const auto sid = static_cast<StructureId>(k);
          if (sid == StructureId::Unclassified || p.phantom.grid.voxels_of(sid).empty()) continue;
          curves.push_back(dvh(n.dose, p.phantom.grid, sid));
        }
        std::ostringstream os;
        write_dvh_csv(os, curves);
        const fs::path f = fs::path("reports") / "dvh" / (id + "_" + m + ".csv");
        write_text(config_.out / f, os.str());
        artifacts.push_back(f);
      }
    }
  }

  std::vector<MethodSummary> summaries;
  for (const auto& m : columns) {
    MethodSummary ms;
    ms.method = m;
    ms.patients = patients[m];
    if (ms.patients > 0) {
      ms.criteria = aggregate_criteria(reports[m]);
      ms.versus_reference = at_least_reference(comparisons[m]);
      for (int g = 0; g < 3; ++g) {
        ms.gamma[static_cast<std::size_t>(g)] = gamma_sum[m][static_cast<std::size_t>(g)] / static_cast<double>(ms.patients);
      }
    } else {
      ms.gamma = {std::nan(""), std::nan(""), std::nan("")};
      ms.criteria = {std::nan(""), std::nan(""), std::nan(""), 0, 0};
      ms.versus_reference = ms.criteria;
    }
    summaries.push_back(ms);
  }

  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(config_.out / "reports" / name, text);
    artifacts.push_back(fs::path("reports") / name);
  };
  std::ostringstream crit, versus, gam, h2h_csv;
  write_criteria_table(crit, summaries);
  write_versus_reference_table(versus, summaries);
  write_gamma_table(gam, summaries);
  write_head_to_head(h2h_csv, h2h);
  emit("criteria_table.csv", crit.str());
  emit("versus_reference_table.csv", versus.str());
  emit("gamma_table.csv", gam.str());
  emit("head_to_head.csv", h2h_csv.str());
  emit("criteria_per_plan.csv", per_plan.str());
  emit("gamma_per_patient.csv", gamma_rows.str());
  emit("normalization.csv", norm.str());
  emit("gaps.csv", gaps.str());
  emit("summary.json", summary_json(summaries, gopt));
  if (config_.evaluation.svg) emit("head_to_head.svg", head_to_head_svg(h2h));
  finish_stage(stage, artifacts, detail);
}

void Pipeline::report(std::ostream& os) const {
  require_stage("evaluate", "report");
  const fs::path dir = config_.out / "reports";
  const std::pair<const char*, const char*> tables[] = {
      {"Clinical criteria satisfied (%)", "criteria_table.csv"},
      {"Criteria at least as good as the reference (%)", "versus_reference_table.csv"},
      {"Gamma pass rate", "gamma_table.csv"},
  };
  for (const auto& [title, file] : tables) {
    os << title << '\n';
    std::istringstream is(read_text(dir / file));
    for (std::string line; std::getline(is, line);) {
      std::string cell;
      std::istringstream ls(line);
      bool first = true;
      while (std::getline(ls, cell, ',')) {
        char buf[64];
        std::snprintf(buf, sizeof buf, first ? "%-26s" : "%12s", cell.c_str());
        os << buf;
        first = false;
      }
      os << '\n';
    }
    os << '\n';
  }
  std::istringstream gaps(read_text(dir / "gaps.csv"));
  std::string line;
  std::getline(gaps, line);
  std::vector<std::string> missing;
  while (std::getline(gaps, line)) missing.push_back(line);
  if (!missing.empty()) {
    os << "Gaps (patient,method,reason)\n";
    for (const auto& m : missing) os << "  " << m << '\n';
  }
}

void Pipeline::run() {
  gen_data();
  for (const auto& m : model_names()) {
    train(m);
    predict(m);
    optimize(m, OptimizeMode::Inverse);
  }
  optimize(config_.optimization.mimic_model, OptimizeMode::Mimic);
  evaluate();
}

}  // namespace kbp
