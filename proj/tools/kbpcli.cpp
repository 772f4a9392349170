#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "kbp/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kConfig = 2, kMissingStage = 3, kFailed = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-based radiotherapy planning pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> mode;
  std::vector<std::string> models;
  std::vector<std::string> patients;
  bool force = false;
  bool quiet = false;
  app.add_option("--config", config_path, "pipeline config file (INI sections, key = value)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "overrides dataset, training and forest seeds");
  app.add_flag("--force", force, "replace partial or foreign results in the output directory");
  app.add_option("--out", out, "output directory");
  app.add_option("--threads", threads, "worker threads; 1 guarantees byte-identical reruns")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", quiet, "no progress messages");

  auto* gen = app.add_subcommand("gen-data", "phantoms, influence matrices and reference plans");
  auto* train = app.add_subcommand("train", "train predictors on the training split");
  auto* predict = app.add_subcommand("predict", "predict dose volumes");
  auto* optimize = app.add_subcommand("optimize", "turn predictions into deliverable plans");
  auto* evaluate = app.add_subcommand("evaluate", "normalize, score and compare plans");
  auto* report = app.add_subcommand("report", "print the evaluation tables");
  auto* run = app.add_subcommand("run", "every stage in order");
  const auto model_check = CLI::IsMember({"gan", "cnn", "rf"});
  for (auto* sub : {train, predict, optimize}) {
    sub->add_option("--model", models, "gan, cnn or rf (default: all)")->check(model_check);
  }
  for (auto* sub : {predict, optimize}) sub->add_option("--patients", patients, "patient ids (default: test split)");
  optimize->add_option("--mode", mode, "inverse or mimic (default: from the config)")
      ->check(CLI::IsMember({"inverse", "mimic"}));
  for (auto* sub : {gen, train, predict, optimize, evaluate, report, run}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    kbp::PipelineConfig cfg = config_path.empty() ? kbp::PipelineConfig{} : kbp::load_config(config_path);
    if (seed) {
      cfg.dataset.seed = *seed;
      cfg.training.net.seed = *seed;
      cfg.training.forest.seed = *seed;
    }
    if (out) cfg.out = *out;
    if (threads) cfg.threads = *threads;
    kbp::Pipeline pipeline(cfg, force, quiet ? nullptr : &std::cerr);
    if (models.empty()) models = kbp::model_names();

    if (*gen) pipeline.gen_data();
    if (*train)
      for (const auto& m : models) pipeline.train(m);
    if (*predict)
      for (const auto& m : models) pipeline.predict(m, patients);
    if (*optimize) {
      const auto how = mode ? kbp::optimize_mode_from_name(*mode) : pipeline.config().optimization.mode;
      for (const auto& m : models) pipeline.optimize(m, how, patients);
    }
    if (*evaluate) pipeline.evaluate();
    if (*report) pipeline.report(std::cout);
    if (*run) pipeline.run();

    if (!pipeline.errors().empty()) {
      std::cerr << pipeline.errors().size() << " patient-level failure(s); see " << (pipeline.out() / "run_manifest.json").string()
                << '\n';
      return kFailed;
    }
    return kOk;
  } catch (const kbp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const kbp::StageMissingError& e) {
    std::cerr << "missing stage: " << e.what() << '\n';
    return kMissingStage;
  } catch (const kbp::StageFailedError& e) {
    std::cerr << "stage failed: " << e.what() << '\n';
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUnexpected;
  }
}
