#pragma once

// Minimal layer-wise deep-learning engine: dense NCHW tensors, hand-written
// forward/backward passes, losses and Adam. Every type is templated on the
// scalar; float is the training type and double is the gradient-check mode.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kbp::nn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// backward() called without a matching forward().
class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<int>;

std::string shape_string(const Shape& s);

template <typename T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  T at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<T> grad();
  std::span<const T> grad() const { return grad_; }
  void zero_grad();

  void fill(T v);
  /// Same data under a new shape with the same element count.
  BasicTensor reshaped(Shape shape) const;

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(c)) *
                static_cast<std::size_t>(shape_[2]) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(shape_[3]) +
           static_cast<std::size_t>(w);
  }

  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

enum class Mode { Train, Eval };

enum class LayerKind { Conv, ConvTranspose, BatchNorm, Dropout, LeakyReLU, ReLU, Sigmoid, Tanh };

std::string_view layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 4;
  int stride = 2;
  int pad = 1;
  double slope = 0.2;  // LeakyReLU
  double rate = 0.5;   // Dropout
};

template <typename T>
struct ParamRef {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) = 0;
  /// Returns dL/dx and accumulates parameter gradients. Consumes the cache.
  virtual BasicTensor<T> backward(const BasicTensor<T>& grad_out) = 0;
  virtual std::vector<ParamRef<T>> parameters() { return {}; }
  /// Non-trainable state that belongs in checkpoints (running statistics).
  virtual std::vector<ParamRef<T>> buffers() { return {}; }
  virtual LayerSpec spec() const = 0;

 protected:
  void check_cache(const BasicTensor<T>& grad_out, const char* layer);
  bool cached_ = false;
  Shape out_shape_;
};

/// Cross-correlation with bias; weight [out, in, k, k].
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel = 4, int stride = 2, int pad = 1);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamRef<T>> parameters() override { return {{"weight", &weight}, {"bias", &bias}}; }
  LayerSpec spec() const override { return {LayerKind::Conv, in_, out_, k_, s_, p_}; }

  BasicTensor<T> weight, bias;

 private:
  int in_, out_, k_, s_, p_;
  BasicTensor<T> input_;
};

/// Transposed convolution (gradient of Conv2d w.r.t. its input); weight [in, out, k, k].
template <typename T>
class ConvTranspose2d : public Layer<T> {
 public:
  ConvTranspose2d(int in_channels, int out_channels, int kernel = 4, int stride = 2, int pad = 1);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamRef<T>> parameters() override { return {{"weight", &weight}, {"bias", &bias}}; }
  LayerSpec spec() const override { return {LayerKind::ConvTranspose, in_, out_, k_, s_, p_}; }

  BasicTensor<T> weight, bias;

 private:
  int in_, out_, k_, s_, p_;
  BasicTensor<T> input_;
};

/// Per-channel batch normalization over (N, H, W).
template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamRef<T>> parameters() override { return {{"gamma", &gamma}, {"beta", &beta}}; }
  std::vector<ParamRef<T>> buffers() override { return {{"running_mean", &running_mean}, {"running_var", &running_var}}; }
  LayerSpec spec() const override { return {LayerKind::BatchNorm, c_, c_, 0, 0, 0}; }

  BasicTensor<T> gamma, beta, running_mean, running_var;

 private:
  int c_;
  double eps_, momentum_;
  Mode mode_ = Mode::Train;
  BasicTensor<T> xhat_;
  std::vector<double> inv_std_;
};

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) in train mode.
template <typename T>
class Dropout : public Layer<T> {
 public:
  explicit Dropout(double rate = 0.5, std::uint64_t seed = 0);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  LayerSpec spec() const override {
    LayerSpec s{LayerKind::Dropout};
    s.rate = rate_;
    return s;
  }
  void reseed(std::uint64_t seed) { rng_.seed(seed); }

 private:
  double rate_;
  std::mt19937_64 rng_;
  std::vector<T> mask_;
};

template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  explicit LeakyReLU(double slope = 0.2) : slope_(slope) {}
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  LayerSpec spec() const override {
    LayerSpec s{LayerKind::LeakyReLU};
    s.slope = slope_;
    return s;
  }

 private:
  double slope_;
  BasicTensor<T> input_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  LayerSpec spec() const override { return {LayerKind::ReLU}; }

 private:
  BasicTensor<T> input_;
};

template <typename T>
class Sigmoid : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  LayerSpec spec() const override { return {LayerKind::Sigmoid}; }

 private:
  BasicTensor<T> output_;
};

template <typename T>
class Tanh : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  LayerSpec spec() const override { return {LayerKind::Tanh}; }

 private:
  BasicTensor<T> output_;
};

/// Builds a layer from its spec (parameters zero-initialized).
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, std::uint64_t seed = 0);

/// Layers applied in order.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode);
  BasicTensor<T> backward(const BasicTensor<T>& grad_out);
  std::vector<ParamRef<T>> parameters(const std::string& prefix = "");
  std::vector<ParamRef<T>> buffers(const std::string& prefix = "");
  std::size_t size() const { return layers_.size(); }
  Layer<T>& operator[](std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Concatenate along channels; split_channels is its adjoint.
template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x, int first_channels);

/// Conv/deconv weights ~ N(0, std), biases 0; BatchNorm gamma 1, beta 0.
template <typename T>
void init_normal(std::span<const ParamRef<T>> params, std::mt19937_64& rng, double stddev = 0.02);

template <typename T>
struct LossResult {
  double value = 0.0;
  BasicTensor<T> grad;  // dLoss / d(first argument)
};

/// mean |a - b|
template <typename T>
LossResult<T> l1_loss(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// -mean [y log p + (1 - y) log(1 - p)] for probabilities p.
template <typename T>
LossResult<T> bce_loss(const BasicTensor<T>& p, double label);
/// bce_loss(sigmoid(z), label) computed stably from logits z.
template <typename T>
LossResult<T> bce_with_logits(const BasicTensor<T>& z, double label);

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<ParamRef<T>> params, AdamConfig config = {});
  /// One bias-corrected update from the accumulated gradients.
  void step();
  void zero_grad();
  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<ParamRef<T>> params_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// "KBPT" archive: magic, u32 version, u32-length manifest text, u32 tensor
/// count, then per tensor a u32-length name, u32 rank, u32 extents and the
/// f32 payload.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Archive {
  std::string manifest;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
};

void write_archive(std::ostream& os, const Archive& archive);
Archive read_archive(std::istream& is);
void write_archive_file(const std::filesystem::path& path, const Archive& archive);
Archive read_archive_file(const std::filesystem::path& path);

}  // namespace kbp::nn
