#pragma once

// Dose predictors: slice datasets, the U-net generator (trained adversarially
// or with L1 only), the patch-free discriminator, and the voxel-feature
// random forest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kbp/dosecalc.hpp"
#include "kbp/phantom.hpp"
#include "kbp/tensornet.hpp"

namespace kbp {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- slices ----

inline constexpr double kDoseMax = 80.0;

/// Gy -> [-1, 1] for the tanh output range.
inline double normalize_dose(double gy, double d_max = kDoseMax) { return 2.0 * gy / d_max - 1.0; }
inline double denormalize_dose(double v, double d_max = kDoseMax) { return (v + 1.0) * 0.5 * d_max; }

struct SlicePair {
  int plane = 0;
  ContouredSlice image;     // 3 x S x S, values in [0, 1]
  std::vector<float> dose;  // S x S, normalized
};

struct SliceDataset {
  int size = 64;
  double d_max = kDoseMax;
  std::vector<SlicePair> pairs;
};

/// Dose of one axial plane resampled to S x S with the same pixel->voxel map
/// as the contoured image.
std::vector<float> sample_dose_plane(const VoxelGrid& grid, std::span<const double> dose, int z, int size);

/// One pair per axial plane, appended to `out` (which fixes S and d_max).
void extract_slices(const Phantom& phantom, std::span<const double> dose, SliceDataset& out);
SliceDataset extract_slices(const Phantom& phantom, std::span<const double> dose, int size = 64);

/// [N, 3, S, S] images and [N, 1, S, S] normalized doses for a batch.
nn::Tensor batch_images(const SliceDataset& data, std::span<const std::size_t> indices);
nn::Tensor batch_doses(const SliceDataset& data, std::span<const std::size_t> indices);

// ---- networks ----

struct UNetConfig {
  int size = 64;  // S; divisible by 16
  int base = 16;  // channels of the first down block
  double dropout = 0.5;
};

/// 4 down blocks (conv 4x4/2, LeakyReLU, BatchNorm), 2 bottleneck blocks
/// (conv 3x3/1), 4 up blocks (deconv 4x4/2, dropout on the first three,
/// ReLU, BatchNorm) with skip concatenation; the last up block is
/// deconv + tanh to one channel.
class UNet {
 public:
  explicit UNet(UNetConfig config = {}, std::uint64_t seed = 0);

  nn::Tensor forward(const nn::Tensor& images, nn::Mode mode);
  /// Gradient w.r.t. the images; accumulates parameter gradients.
  nn::Tensor backward(const nn::Tensor& grad_out);

  std::vector<nn::ParamRef<float>> parameters();
  std::vector<nn::ParamRef<float>> buffers();
  std::size_t parameter_count();
  const UNetConfig& config() const { return cfg_; }

  void reseed_dropout(std::uint64_t seed);
  /// Zero the skip tensor from down block `level` (0-3) in forward; -1 disables.
  void ablate_skip(int level) { ablated_ = level; }

  nn::Archive to_archive();
  static UNet from_archive(const nn::Archive& archive);

 private:
  UNetConfig cfg_;
  std::vector<nn::Sequential<float>> down_, bottleneck_, up_;
  std::vector<int> skip_channels_;
  int ablated_ = -1;
};

struct DiscriminatorConfig {
  int size = 64;
  int base = 16;
  bool conditional = false;  // also sees the contoured image
};

/// Four 4x4/2 convs with LeakyReLU (BatchNorm after the 2nd-4th) and a fifth
/// conv collapsing the remaining extent to one logit per sample.
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig config = {}, std::uint64_t seed = 0);

  /// Pre-sigmoid scores, shape [N, 1, 1, 1].
  nn::Tensor logits(const nn::Tensor& dose, const nn::Tensor& images, nn::Mode mode);
  /// D(x) in [0, 1].
  nn::Tensor probability(const nn::Tensor& dose, const nn::Tensor& images, nn::Mode mode);
  /// Gradient w.r.t. the dose input of the last logits() call.
  nn::Tensor backward(const nn::Tensor& grad_logits);

  std::vector<nn::ParamRef<float>> parameters() { return net_.parameters("d."); }
  void zero_grad();
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  nn::Sequential<float> net_;
};

// ---- training ----

struct TrainConfig {
  double lambda = 90.0;
  int epochs = 25;
  int batch_size = 4;
  std::uint64_t seed = 1;
  nn::AdamConfig adam{};
  UNetConfig unet{};
  bool conditional_discriminator = false;
  bool early_stop = false;  // stop once |log ratio| < 0.1 for 3 epochs
};

/// Generator objective for one step: BCE of D(fake) against label 1 plus
/// lambda times the L1 distance to the real dose.
struct GeneratorObjective {
  double adversarial = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  nn::Tensor grad_logits;  // d adversarial / d logits
  nn::Tensor grad_fake;    // d (lambda * l1) / d fake
};
GeneratorObjective generator_objective(const nn::Tensor& logits, const nn::Tensor& fake, const nn::Tensor& real,
                                       double lambda);

struct StepLog {
  int epoch = 0;
  int step = 0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_l1 = 0.0;
  double g_total = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_l1 = 0.0;
  double ratio = 0.0;        // g_adv / (lambda * g_l1)
  double validation_l1 = -1;  // mean |error| in Gy, -1 without validation data
};

struct TrainResult {
  nn::Archive generator;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
  double initial_validation_l1 = -1;
  bool diverged = false;  // generator holds the last good epoch's parameters
  bool stopped_early = false;
  std::string message;
};

/// Alternating discriminator / generator Adam updates.
TrainResult gan_train(const SliceDataset& train, const TrainConfig& config, const SliceDataset* validation = nullptr);
/// Same generator, L1 loss only.
TrainResult cnn_train(const SliceDataset& train, const TrainConfig& config, const SliceDataset* validation = nullptr);

/// Mean absolute error in Gy over all pixels, eval mode.
double evaluate_l1(UNet& generator, const SliceDataset& data);

/// epoch,d_loss,g_adv,g_l1,ratio
void write_training_log(std::ostream& os, const std::vector<EpochLog>& epochs);

/// Per-plane prediction, denormalized, mapped back onto the voxel grid.
std::vector<double> predict_volume(UNet& generator, const Phantom& phantom, nn::Mode mode = nn::Mode::Eval);

// ---- random forest ----

inline constexpr int kNumRfFeatures = 10;
using RfFeatures = std::array<double, kNumRfFeatures>;

std::array<std::string_view, kNumRfFeatures> rf_feature_names();

/// Precomputes the distance maps and influence row sums of one phantom.
class RfFeatureExtractor {
 public:
  RfFeatureExtractor(const Phantom& phantom, const InfluenceMatrix& influence);
  /// label code, y, z, distances to Larynx, Esophagus, LimPostNeck, PTV56,
  /// PTV63, PTV70 surfaces (mm), influence row sum.
  RfFeatures features(std::size_t voxel) const;
  std::size_t num_voxels() const { return labels_.size(); }

 private:
  std::vector<StructureId> labels_;
  std::vector<Index3> coords_;
  std::array<std::vector<double>, 6> distance_;
  std::vector<double> row_sums_;
};

RfFeatures extract_rf_features(const Phantom& phantom, const InfluenceMatrix& influence, std::size_t voxel);

struct ForestConfig {
  int trees = 10;
  int features_per_split = 4;  // ceil(10 / 3)
  int min_samples_split = 2;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct RegressionTree {
  // node arrays; leaves have feature -1
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left, right;
  std::vector<double> value;

  double predict(const RfFeatures& x) const;
};

struct RandomForest {
  int num_features = kNumRfFeatures;
  std::vector<RegressionTree> trees;

  double predict(const RfFeatures& x) const;
};

RandomForest rf_train(std::span<const RfFeatures> rows, std::span<const double> targets, const ForestConfig& config = {});

std::string forest_to_json(const RandomForest& forest);
RandomForest forest_from_json(const std::string& text);

/// Every `stride`-th voxel (deterministic), at most `cap` of them.
std::vector<std::size_t> rf_sample_voxels(std::size_t num_voxels, std::size_t cap);

std::vector<double> rf_predict_volume(const RandomForest& forest, const RfFeatureExtractor& features);

}  // namespace kbp
