#pragma once

// End-to-end pipeline behind the `kbp` command line: dataset generation,
// training, prediction, plan optimization and evaluation, each stage leaving
// artifacts and a completion marker under one output directory.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbp/dosecalc.hpp"
#include "kbp/planeval.hpp"
#include "kbp/planopt.hpp"
#include "kbp/predictors.hpp"

namespace kbp {

/// Bad or conflicting configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stage ran before the stage it depends on (exit code 3).
class StageMissingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or optimization failed (exit code 4).
class StageFailedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSettings {
  int patients = 30;
  double train_fraction = 0.6;
  std::uint64_t seed = 1;
  Dims dims{32, 32, 16};
  Spacing spacing{};
  int slice_size = 64;
};

struct PhysicsSettings {
  PhysicsConfig physics{};
  BeamConfig beams{};
};

struct TrainingSettings {
  TrainConfig net{};  // shared by the GAN and the CNN
  ForestConfig forest{};
  std::size_t rf_voxels_per_patient = 4000;
};

enum class OptimizeMode { Inverse, Mimic };
std::string_view optimize_mode_name(OptimizeMode m);
OptimizeMode optimize_mode_from_name(std::string_view name);

struct OptimizationSettings {
  OptimizeMode mode = OptimizeMode::Inverse;
  std::string mimic_model = "gan";  // prediction the `run` command mimics
  ForwardOptions forward{};
  MimicOptions mimic{};
};

struct EvaluationSettings {
  GammaOptions gamma{};
  bool svg = true;
  bool dvh = true;
};

struct PipelineConfig {
  DatasetSettings dataset;
  PhysicsSettings physics;
  TrainingSettings training;
  OptimizationSettings optimization;
  EvaluationSettings evaluation;
  std::filesystem::path out = "kbp_out";
  int threads = 1;  // not part of the hash: results do not depend on it
};

/// INI-style text: `[section]` headers and `key = value` lines, addressed as
/// section.key. Unknown keys and malformed values are ConfigErrors.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
void validate(const PipelineConfig& config);

/// Every hashed setting as sorted `section.key = value` lines; parse_config
/// of this text reproduces the config.
std::string canonical_config(const PipelineConfig& config);
/// FNV-1a 64 of canonical_config, as 16 hex digits.
std::string config_hash(const PipelineConfig& config);

struct PatientSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// floor(N * fraction) patients train, the rest test, each side at least one.
/// Patients are p000, p001, ... in id order; the first ones train.
PatientSplit split_patients(int patients, double train_fraction);
std::string patient_id(int index);
std::uint64_t patient_seed(std::uint64_t dataset_seed, int index);

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names{"gan", "cnn", "rf"};
  return names;
}

/// Per-patient failure kept in the manifest instead of aborting the cohort.
struct PatientError {
  std::string stage;
  std::string patient;
  std::string message;
};

struct PatientData {
  Phantom phantom;
  InfluenceMatrix influence;
  PlanRecord reference;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, bool force = false, std::ostream* log = nullptr);

  const PipelineConfig& config() const { return config_; }
  const std::filesystem::path& out() const { return config_.out; }
  const std::string& hash() const { return hash_; }

  void gen_data();
  void train(const std::string& model);
  /// Empty ids: the test split.
  void predict(const std::string& model, std::vector<std::string> ids = {});
  /// Plans from `model`'s predictions. Method name: the model for inverse
  /// plans, "mimic" (or "mimic-<model>" for a non-default model) otherwise.
  void optimize(const std::string& model, OptimizeMode mode, std::vector<std::string> ids = {});
  void evaluate();
  /// Prints the report tables of a finished evaluation.
  void report(std::ostream& os) const;
  /// Every stage, then evaluate; mimic plans follow optimization.mimic_model.
  void run();

  PatientSplit split() const;
  PatientData load_patient(const std::string& id) const;
  const std::vector<PatientError>& errors() const { return errors_; }

  static std::string method_name(const std::string& model, OptimizeMode mode, const std::string& mimic_model);

 private:
  bool stage_current(const std::string& stage, const std::string& detail = {}) const;
  void require_stage(const std::string& stage, const std::string& needed_for) const;
  void prepare_stage(const std::string& stage, const std::vector<std::filesystem::path>& outputs);
  void finish_stage(const std::string& stage, const std::vector<std::filesystem::path>& artifacts,
                    const std::string& detail = {});
  void record_error(const std::string& stage, const std::string& patient, const std::string& message);
  void write_manifest() const;
  void note(const std::string& message) const;

  PipelineConfig config_;
  std::string hash_;
  bool force_ = false;
  std::ostream* log_ = nullptr;
  std::vector<PatientError> errors_;
};

}  // namespace kbp
