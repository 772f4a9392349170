#include "kbp/predictors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace kbp {
namespace {

using nn::Mode;
using nn::Tensor;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_size(int size) {
  if (size < 16 || size % 16 != 0) {
    throw std::invalid_argument("slice size must be a positive multiple of 16, got " + std::to_string(size));
  }
}

template <typename L, typename... Args>
void add(nn::Sequential<float>& seq, Args&&... args) {
  seq.add(std::make_unique<L>(std::forward<Args>(args)...));
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor scaled(const Tensor& a, double s) {
  Tensor c = a;
  for (auto& v : c.data()) v = static_cast<float>(v * s);
  return c;
}

// Fisher-Yates with raw engine output, independent of the library's shuffle.
void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

// ---- slices ----

std::vector<float> sample_dose_plane(const VoxelGrid& grid, std::span<const double> dose, int z, int size) {
  const Dims d = grid.dims();
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  for (int r = 0; r < size; ++r) {
    const int y = slice_pixel_to_voxel(r, size, d.ny);
    for (int c = 0; c < size; ++c) {
      const int x = slice_pixel_to_voxel(c, size, d.nx);
      out[static_cast<std::size_t>(r) * size + c] = static_cast<float>(dose[grid.index(x, y, z)]);
    }
  }
  return out;
}

void extract_slices(const Phantom& phantom, std::span<const double> dose, SliceDataset& out) {
  check_size(out.size);
  const VoxelGrid& g = phantom.grid;
  if (dose.size() != g.size()) {
    throw std::invalid_argument("dose has " + std::to_string(dose.size()) + " voxels but the phantom has " +
                                std::to_string(g.size()));
  }
  for (int z = 0; z < g.dims().nz; ++z) {
    SlicePair p;
    p.plane = z;
    p.image = render_contoured_slice(phantom, z, out.size);
    p.dose = sample_dose_plane(g, dose, z, out.size);
    for (auto& v : p.dose) v = static_cast<float>(normalize_dose(v, out.d_max));
    out.pairs.push_back(std::move(p));
  }
}

SliceDataset extract_slices(const Phantom& phantom, std::span<const double> dose, int size) {
  SliceDataset data;
  data.size = size;
  extract_slices(phantom, dose, data);
  return data;
}

Tensor batch_images(const SliceDataset& data, std::span<const std::size_t> indices) {
  const int s = data.size;
  const std::size_t plane = 3 * static_cast<std::size_t>(s) * s;
  Tensor t({static_cast<int>(indices.size()), 3, s, s});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& px = data.pairs.at(indices[k]).image.pixels;
    std::copy(px.begin(), px.end(), t.ptr() + k * plane);
  }
  return t;
}

Tensor batch_doses(const SliceDataset& data, std::span<const std::size_t> indices) {
  const int s = data.size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  Tensor t({static_cast<int>(indices.size()), 1, s, s});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& d = data.pairs.at(indices[k]).dose;
    std::copy(d.begin(), d.end(), t.ptr() + k * plane);
  }
  return t;
}

// ---- UNet ----

UNet::UNet(UNetConfig config, std::uint64_t seed) : cfg_(config) {
  check_size(cfg_.size);
  if (cfg_.base < 1) throw std::invalid_argument("base channel count must be positive");
  const int b = cfg_.base;
  skip_channels_ = {b, 2 * b, 4 * b, 8 * b};
  for (int i = 0; i < 4; ++i) {
    nn::Sequential<float> blk;
    add<nn::Conv2d<float>>(blk, i == 0 ? 3 : skip_channels_[static_cast<std::size_t>(i - 1)],
                           skip_channels_[static_cast<std::size_t>(i)]);
    add<nn::LeakyReLU<float>>(blk, 0.2);
    add<nn::BatchNorm2d<float>>(blk, skip_channels_[static_cast<std::size_t>(i)]);
    down_.push_back(std::move(blk));
  }
  for (int i = 0; i < 2; ++i) {
    nn::Sequential<float> blk;
    add<nn::Conv2d<float>>(blk, 8 * b, 8 * b, 3, 1, 1);
    add<nn::LeakyReLU<float>>(blk, 0.2);
    add<nn::BatchNorm2d<float>>(blk, 8 * b);
    bottleneck_.push_back(std::move(blk));
  }
  const int up_in[4] = {16 * b, 8 * b, 4 * b, 2 * b};
  const int up_out[4] = {4 * b, 2 * b, b, 1};
  for (int i = 0; i < 4; ++i) {
    nn::Sequential<float> blk;
    add<nn::ConvTranspose2d<float>>(blk, up_in[i], up_out[i]);
    if (i < 3) {
      add<nn::Dropout<float>>(blk, cfg_.dropout, splitmix64(seed + 101 + static_cast<std::uint64_t>(i)));
      add<nn::ReLU<float>>(blk);
      add<nn::BatchNorm2d<float>>(blk, up_out[i]);
    } else {
      add<nn::Tanh<float>>(blk);
    }
    up_.push_back(std::move(blk));
  }
  std::mt19937_64 rng(seed);
  const auto params = parameters();
  nn::init_normal<float>(params, rng, 0.02);
}

Tensor UNet::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.size || x.dim(3) != cfg_.size) {
    throw nn::ShapeError("unet: expected [N, 3, " + std::to_string(cfg_.size) + ", " + std::to_string(cfg_.size) +
                         "], got " + nn::shape_string(x.shape()));
  }
  std::vector<Tensor> skips;
  Tensor h = x;
  for (auto& blk : down_) {
    h = blk.forward(h, mode);
    skips.push_back(h);
  }
  if (ablated_ >= 0 && ablated_ < 4) skips[static_cast<std::size_t>(ablated_)].fill(0.0f);
  for (auto& blk : bottleneck_) h = blk.forward(h, mode);
  for (int i = 0; i < 4; ++i) h = up_[static_cast<std::size_t>(i)].forward(nn::concat_channels(h, skips[static_cast<std::size_t>(3 - i)]), mode);
  return h;
}

Tensor UNet::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  std::vector<Tensor> skip_grads(4);
  for (int i = 3; i >= 0; --i) {
    const Tensor gin = up_[static_cast<std::size_t>(i)].backward(g);
    const int skip_c = skip_channels_[static_cast<std::size_t>(3 - i)];
    auto [gh, gs] = nn::split_channels(gin, gin.dim(1) - skip_c);
    g = std::move(gh);
    skip_grads[static_cast<std::size_t>(3 - i)] = std::move(gs);
  }
  if (ablated_ >= 0 && ablated_ < 4) skip_grads[static_cast<std::size_t>(ablated_)].fill(0.0f);
  for (auto it = bottleneck_.rbegin(); it != bottleneck_.rend(); ++it) g = it->backward(g);
  for (int i = 3; i >= 0; --i) {
    g = add_tensors(g, skip_grads[static_cast<std::size_t>(i)]);
    g = down_[static_cast<std::size_t>(i)].backward(g);
  }
  return g;
}

std::vector<nn::ParamRef<float>> UNet::parameters() {
  std::vector<nn::ParamRef<float>> out;
  auto append = [&](std::vector<nn::Sequential<float>>& blocks, const char* name) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto p = blocks[i].parameters(std::string(name) + std::to_string(i) + ".");
      out.insert(out.end(), p.begin(), p.end());
    }
  };
  append(down_, "down");
  append(bottleneck_, "bottleneck");
  append(up_, "up");
  return out;
}

std::vector<nn::ParamRef<float>> UNet::buffers() {
  std::vector<nn::ParamRef<float>> out;
  auto append = [&](std::vector<nn::Sequential<float>>& blocks, const char* name) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto p = blocks[i].buffers(std::string(name) + std::to_string(i) + ".");
      out.insert(out.end(), p.begin(), p.end());
    }
  };
  append(down_, "down");
  append(bottleneck_, "bottleneck");
  append(up_, "up");
  return out;
}

std::size_t UNet::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.tensor->size();
  return n;
}

void UNet::reseed_dropout(std::uint64_t seed) {
  for (std::size_t i = 0; i < 3; ++i) {
    auto* drop = dynamic_cast<nn::Dropout<float>*>(&up_[i][1]);
    if (drop) drop->reseed(splitmix64(seed + 101 + i));
  }
}

nn::Archive UNet::to_archive() {
  nn::Archive a;
  std::ostringstream manifest;
  manifest << "unet size=" << cfg_.size << " base=" << cfg_.base << " dropout=" << cfg_.dropout;
  a.manifest = manifest.str();
  for (auto& p : parameters()) a.tensors.push_back({p.name, *p.tensor});
  for (auto& p : buffers()) a.tensors.push_back({p.name, *p.tensor});
  for (auto& t : a.tensors) t.tensor = nn::Tensor(t.tensor.shape(), std::vector<float>(t.tensor.data().begin(), t.tensor.data().end()));
  return a;
}

UNet UNet::from_archive(const nn::Archive& archive) {
  std::istringstream is(archive.manifest);
  std::string kind;
  is >> kind;
  if (kind != "unet") throw std::invalid_argument("archive does not hold a U-net generator");
  UNetConfig cfg;
  std::string field;
  while (is >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "size") cfg.size = std::stoi(value);
    else if (key == "base") cfg.base = std::stoi(value);
    else if (key == "dropout") cfg.dropout = std::stod(value);
  }
  UNet net(cfg, 0);
  auto load = [&](std::vector<nn::ParamRef<float>> refs) {
    for (auto& p : refs) {
      const nn::Tensor& t = archive.get(p.name);
      if (t.shape() != p.tensor->shape()) {
        throw nn::ShapeError("archive tensor '" + p.name + "' has shape " + nn::shape_string(t.shape()) +
                             ", expected " + nn::shape_string(p.tensor->shape()));
      }
      *p.tensor = nn::Tensor(t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
    }
  };
  load(net.parameters());
  load(net.buffers());
  return net;
}

// ---- Discriminator ----

Discriminator::Discriminator(DiscriminatorConfig config, std::uint64_t seed) : cfg_(config) {
  check_size(cfg_.size);
  const int b = cfg_.base;
  add<nn::Conv2d<float>>(net_, cfg_.conditional ? 4 : 1, b);
  add<nn::LeakyReLU<float>>(net_, 0.2);
  int c = b;
  for (int i = 0; i < 3; ++i) {
    add<nn::Conv2d<float>>(net_, c, 2 * c);
    add<nn::LeakyReLU<float>>(net_, 0.2);
    add<nn::BatchNorm2d<float>>(net_, 2 * c);
    c *= 2;
  }
  add<nn::Conv2d<float>>(net_, c, 1, cfg_.size / 16, 1, 0);
  std::mt19937_64 rng(seed);
  const auto params = parameters();
  nn::init_normal<float>(params, rng, 0.02);
}

Tensor Discriminator::logits(const Tensor& dose, const Tensor& images, Mode mode) {
  if (dose.rank() != 4 || dose.dim(1) != 1 || dose.dim(2) != cfg_.size || dose.dim(3) != cfg_.size) {
    throw nn::ShapeError("discriminator: expected [N, 1, " + std::to_string(cfg_.size) + ", " +
                         std::to_string(cfg_.size) + "], got " + nn::shape_string(dose.shape()));
  }
  return net_.forward(cfg_.conditional ? nn::concat_channels(dose, images) : dose, mode);
}

Tensor Discriminator::probability(const Tensor& dose, const Tensor& images, Mode mode) {
  Tensor z = logits(dose, images, mode);
  for (auto& v : z.data()) v = static_cast<float>(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
  return z;
}

Tensor Discriminator::backward(const Tensor& grad_logits) {
  Tensor g = net_.backward(grad_logits);
  if (!cfg_.conditional) return g;
  return nn::split_channels(g, 1).first;
}

void Discriminator::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

// ---- training ----

GeneratorObjective generator_objective(const Tensor& logits, const Tensor& fake, const Tensor& real, double lambda) {
  if (lambda < 0) throw std::invalid_argument("lambda must be nonnegative");
  auto adv = nn::bce_with_logits(logits, 1.0);
  auto l1 = nn::l1_loss(fake, real);
  GeneratorObjective o;
  o.adversarial = adv.value;
  o.l1 = l1.value;
  o.grad_logits = std::move(adv.grad);
  o.grad_fake = scaled(l1.grad, lambda);
  // the combined objective, summed directly from its elements
  double softplus = 0.0, abs_err = 0.0;
  for (float z : logits.data()) softplus += std::max(-static_cast<double>(z), 0.0) + std::log1p(std::exp(-std::abs(static_cast<double>(z))));
  for (std::size_t i = 0; i < fake.size(); ++i) abs_err += std::abs(static_cast<double>(fake[i]) - real[i]);
  o.total = softplus / static_cast<double>(logits.size()) + lambda * abs_err / static_cast<double>(fake.size());
  return o;
}

double evaluate_l1(UNet& generator, const SliceDataset& data) {
  if (data.pairs.empty()) return 0.0;
  double acc = 0.0;
  std::size_t count = 0;
  constexpr std::size_t chunk = 8;
  for (std::size_t start = 0; start < data.pairs.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + chunk, data.pairs.size()); ++i) idx.push_back(i);
    const Tensor pred = generator.forward(batch_images(data, idx), Mode::Eval);
    const Tensor real = batch_doses(data, idx);
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(static_cast<double>(pred[i]) - real[i]);
    count += pred.size();
  }
  return acc / static_cast<double>(count) * 0.5 * data.d_max;
}

namespace {

struct Trainer {
  const SliceDataset& train;
  const TrainConfig& cfg;
  const SliceDataset* validation;
  bool adversarial;

  TrainResult run() {
    if (train.pairs.empty()) throw TrainingError("training dataset is empty");
    if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (cfg.lambda < 0) throw std::invalid_argument("lambda must be nonnegative");
    UNetConfig ucfg = cfg.unet;
    ucfg.size = train.size;
    UNet gen(ucfg, cfg.seed);
    Discriminator disc({train.size, ucfg.base, cfg.conditional_discriminator}, splitmix64(cfg.seed ^ 0xd15c));
    nn::Adam<float> opt_g(gen.parameters(), cfg.adam);
    nn::Adam<float> opt_d(disc.parameters(), cfg.adam);
    std::mt19937_64 rng(splitmix64(cfg.seed));

    TrainResult result;
    if (validation) result.initial_validation_l1 = evaluate_l1(gen, *validation);
    nn::Archive last_good = gen.to_archive();
    std::vector<std::size_t> order(train.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    int balanced = 0;
    int step = 0;

    for (int epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
      shuffle_indices(order, rng);
      double sd = 0, sa = 0, sl = 0;
      int batches = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::span<const std::size_t> idx(order.data() + start,
                                               std::min<std::size_t>(cfg.batch_size, order.size() - start));
        const Tensor x = batch_images(train, idx);
        const Tensor real = batch_doses(train, idx);
        const Tensor fake = gen.forward(x, Mode::Train);
        StepLog log{epoch, ++step};
        opt_g.zero_grad();
        if (adversarial) {
          disc.zero_grad();
          auto lr = nn::bce_with_logits(disc.logits(real, x, Mode::Train), 1.0);
          disc.backward(scaled(lr.grad, 0.5));
          auto lf = nn::bce_with_logits(disc.logits(fake, x, Mode::Train), 0.0);
          disc.backward(scaled(lf.grad, 0.5));
          log.d_loss = 0.5 * (lr.value + lf.value);
          if (finite(log.d_loss)) opt_d.step();

          const GeneratorObjective obj = generator_objective(disc.logits(fake, x, Mode::Train), fake, real, cfg.lambda);
          const Tensor g_adv = disc.backward(obj.grad_logits);
          disc.zero_grad();
          gen.backward(add_tensors(g_adv, obj.grad_fake));
          log.g_adv = obj.adversarial;
          log.g_l1 = obj.l1;
          log.g_total = obj.total;
        } else {
          auto l1 = nn::l1_loss(fake, real);
          gen.backward(l1.grad);
          log.g_l1 = l1.value;
          log.g_total = l1.value;
        }
        if (!finite(log.d_loss) || !finite(log.g_total)) {
          result.diverged = true;
          result.message = "non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           "; keeping parameters from epoch " + std::to_string(epoch - 1);
          break;
        }
        opt_g.step();
        result.steps.push_back(log);
        sd += log.d_loss;
        sa += log.g_adv;
        sl += log.g_l1;
        ++batches;
      }
      if (result.diverged) break;

      EpochLog e;
      e.epoch = epoch;
      e.d_loss = sd / batches;
      e.g_adv = sa / batches;
      e.g_l1 = sl / batches;
      const double denom = cfg.lambda * e.g_l1;
      e.ratio = adversarial ? (denom > 0 ? e.g_adv / denom : std::numeric_limits<double>::infinity()) : 0.0;
      if (validation) e.validation_l1 = evaluate_l1(gen, *validation);
      result.epochs.push_back(e);
      last_good = gen.to_archive();

      if (adversarial && cfg.early_stop) {
        balanced = (std::isfinite(e.ratio) && e.ratio > 0 && std::abs(std::log(e.ratio)) < 0.1) ? balanced + 1 : 0;
        if (balanced >= 3) {
          result.stopped_early = true;
          result.message = "adversarial and L1 terms balanced for 3 epochs; stopped after epoch " + std::to_string(epoch);
          break;
        }
      }
    }
    result.generator = std::move(last_good);
    return result;
  }
};

}  // namespace

TrainResult gan_train(const SliceDataset& train, const TrainConfig& config, const SliceDataset* validation) {
  return Trainer{train, config, validation, true}.run();
}

TrainResult cnn_train(const SliceDataset& train, const TrainConfig& config, const SliceDataset* validation) {
  return Trainer{train, config, validation, false}.run();
}

void write_training_log(std::ostream& os, const std::vector<EpochLog>& epochs) {
  os << "epoch,d_loss,g_adv,g_l1,ratio\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.d_loss, e.g_adv, e.g_l1, e.ratio);
    os << buf;
  }
}

std::vector<double> predict_volume(UNet& generator, const Phantom& phantom, Mode mode) {
  const VoxelGrid& g = phantom.grid;
  const Dims d = g.dims();
  const int s = generator.config().size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  std::vector<double> dose(g.size(), 0.0);
  std::vector<double> sum(static_cast<std::size_t>(d.nx) * d.ny);
  std::vector<int> count(sum.size());
  constexpr int chunk = 8;
  for (int z0 = 0; z0 < d.nz; z0 += chunk) {
    const int nb = std::min(chunk, d.nz - z0);
    Tensor x({nb, 3, s, s});
    for (int k = 0; k < nb; ++k) {
      const auto img = render_contoured_slice(phantom, z0 + k, s);
      std::copy(img.pixels.begin(), img.pixels.end(), x.ptr() + static_cast<std::size_t>(k) * 3 * plane);
    }
    const Tensor y = generator.forward(x, mode);
    for (int k = 0; k < nb; ++k) {
      std::fill(sum.begin(), sum.end(), 0.0);
      std::fill(count.begin(), count.end(), 0);
      const float* p = y.ptr() + static_cast<std::size_t>(k) * plane;
      for (int r = 0; r < s; ++r) {
        const int vy = slice_pixel_to_voxel(r, s, d.ny);
        for (int c = 0; c < s; ++c) {
          const std::size_t cell = static_cast<std::size_t>(vy) * d.nx + slice_pixel_to_voxel(c, s, d.nx);
          sum[cell] += p[static_cast<std::size_t>(r) * s + c];
          ++count[cell];
        }
      }
      for (int vy = 0; vy < d.ny; ++vy)
        for (int vx = 0; vx < d.nx; ++vx) {
          const std::size_t cell = static_cast<std::size_t>(vy) * d.nx + vx;
          double v;
          if (count[cell] > 0) {
            v = sum[cell] / count[cell];
          } else {
            // grid finer than the slice: nearest pixel
            const int r = std::min(s - 1, static_cast<int>((vy + 0.5) * s / d.ny));
            const int c = std::min(s - 1, static_cast<int>((vx + 0.5) * s / d.nx));
            v = p[static_cast<std::size_t>(r) * s + c];
          }
          dose[g.index(vx, vy, z0 + k)] = std::clamp(denormalize_dose(v), 0.0, kDoseMax);
        }
    }
  }
  return dose;
}

}  // namespace kbp
