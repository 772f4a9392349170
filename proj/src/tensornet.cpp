#include "kbp/tensornet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "kbp/binary_io.hpp"

namespace kbp::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

std::size_t shape_count(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + ": expected an [N, C, H, W] tensor, got " + shape_string(s));
}

void require_channels(const Shape& s, int c, const char* what) {
  require_rank4(s, what);
  if (s[1] != c) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(c) + " input channels, got shape " +
                     shape_string(s));
  }
}

// Unit-interval double from the top 53 bits; independent of the standard
// library's distribution implementations.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double standard_normal(std::mt19937_64& rng) {
  double u1 = unit(rng);
  while (u1 <= 0.0) u1 = unit(rng);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct ConvGeom {
  int c, h, w, k, s, p, ho, wo;
};

// col[(c k + i) k + j][oh wo_n + ow] = x[c][oh s - p + i][ow s - p + j]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.k; ++i)
      for (int j = 0; j < g.k; ++j) {
        T* row = col + static_cast<std::ptrdiff_t>(((c * g.k + i) * g.k + j)) * plane;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.s - g.p + i;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.s - g.p + j;
            row[oh * g.wo + ow] = (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w)
                                      ? x[(static_cast<std::ptrdiff_t>(c) * g.h + ih) * g.w + iw]
                                      : T(0);
          }
        }
      }
}

// Adjoint of im2col: accumulates into x.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.c; ++c)
    for (int i = 0; i < g.k; ++i)
      for (int j = 0; j < g.k; ++j) {
        const T* row = col + static_cast<std::ptrdiff_t>(((c * g.k + i) * g.k + j)) * plane;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.s - g.p + i;
          if (ih < 0 || ih >= g.h) continue;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.s - g.p + j;
            if (iw < 0 || iw >= g.w) continue;
            x[(static_cast<std::ptrdiff_t>(c) * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
}

int conv_out(int n, int k, int s, int p) { return (n + 2 * p - k) / s + 1; }

}  // namespace

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

// ---- BasicTensor ----

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (int e : shape_) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
  }
  data_.assign(shape_count(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : BasicTensor(std::move(shape)) {
  if (data.size() != data_.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape_));
  }
  data_ = std::move(data);
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
  return grad_;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  grad_.assign(data_.size(), T(0));
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_count(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return BasicTensor(std::move(shape), data_);
}

// ---- layer plumbing ----

std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::ConvTranspose: return "conv_transpose";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::LeakyReLU: return "leaky_relu";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Sigmoid: return "sigmoid";
    case LayerKind::Tanh: return "tanh";
  }
  return "?";
}

LayerKind layer_kind_from_name(std::string_view name) {
  for (auto k : {LayerKind::Conv, LayerKind::ConvTranspose, LayerKind::BatchNorm, LayerKind::Dropout,
                 LayerKind::LeakyReLU, LayerKind::ReLU, LayerKind::Sigmoid, LayerKind::Tanh}) {
    if (layer_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

template <typename T>
void Layer<T>::check_cache(const BasicTensor<T>& grad_out, const char* layer) {
  if (!cached_) throw StaleCacheError(std::string(layer) + ": backward without a matching forward");
  if (grad_out.shape() != out_shape_) {
    throw ShapeError(std::string(layer) + ": gradient shape " + shape_string(grad_out.shape()) +
                     " does not match forward output " + shape_string(out_shape_));
  }
  cached_ = false;
}

// ---- Conv2d ----

template <typename T>
Conv2d<T>::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : weight({out_channels, in_channels, kernel, kernel}),
      bias({out_channels}),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      s_(stride),
      p_(pad) {
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv stride must be >= 1 and padding >= 0");
}

template <typename T>
BasicTensor<T> Conv2d<T>::forward(const BasicTensor<T>& x, Mode) {
  require_channels(x.shape(), in_, "conv2d");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out(h, k_, s_, p_), wo = conv_out(w, k_, s_, p_);
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: input " + shape_string(x.shape()) + " is smaller than the kernel");
  const ConvGeom g{in_, h, w, k_, s_, p_, ho, wo};
  const int kk = in_ * k_ * k_, plane = ho * wo;
  BasicTensor<T> y({n, out_, ho, wo});
  RowMat<T> col(kk, plane);
  const ConstMapMat<T> W(weight.ptr(), out_, kk);
  for (int b = 0; b < n; ++b) {
    im2col(x.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * h * w, g, col.data());
    MapMat<T> Y(y.ptr() + static_cast<std::ptrdiff_t>(b) * out_ * plane, out_, plane);
    Y.noalias() = W * col;
    for (int c = 0; c < out_; ++c) Y.row(c).array() += bias[static_cast<std::size_t>(c)];
  }
  input_ = x;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> Conv2d<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "conv2d");
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int ho = gy.dim(2), wo = gy.dim(3);
  const ConvGeom g{in_, h, w, k_, s_, p_, ho, wo};
  const int kk = in_ * k_ * k_, plane = ho * wo;
  BasicTensor<T> gx(input_.shape());
  RowMat<T> col(kk, plane), gcol(kk, plane);
  const ConstMapMat<T> W(weight.ptr(), out_, kk);
  MapMat<T> gW(weight.grad().data(), out_, kk);
  auto gb = bias.grad();
  for (int b = 0; b < n; ++b) {
    im2col(input_.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * h * w, g, col.data());
    const ConstMapMat<T> G(gy.ptr() + static_cast<std::ptrdiff_t>(b) * out_ * plane, out_, plane);
    gW.noalias() += G * col.transpose();
    for (int c = 0; c < out_; ++c) gb[static_cast<std::size_t>(c)] += G.row(c).sum();
    gcol.noalias() = W.transpose() * G;
    col2im(gcol.data(), g, gx.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * h * w);
  }
  return gx;
}

// ---- ConvTranspose2d ----

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : weight({in_channels, out_channels, kernel, kernel}),
      bias({out_channels}),
      in_(in_channels),
      out_(out_channels),
      k_(kernel),
      s_(stride),
      p_(pad) {
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv_transpose stride must be >= 1 and padding >= 0");
}

template <typename T>
BasicTensor<T> ConvTranspose2d<T>::forward(const BasicTensor<T>& x, Mode) {
  require_channels(x.shape(), in_, "conv_transpose2d");
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int ho = (h - 1) * s_ - 2 * p_ + k_, wo = (w - 1) * s_ - 2 * p_ + k_;
  if (ho < 1 || wo < 1) throw ShapeError("conv_transpose2d: empty output for input " + shape_string(x.shape()));
  // the output image plays the role of a conv input whose conv output is x
  const ConvGeom g{out_, ho, wo, k_, s_, p_, h, w};
  const int kk = out_ * k_ * k_, plane = h * w;
  BasicTensor<T> y({n, out_, ho, wo});
  RowMat<T> col(kk, plane);
  const ConstMapMat<T> W(weight.ptr(), in_, kk);
  for (int b = 0; b < n; ++b) {
    const ConstMapMat<T> X(x.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * plane, in_, plane);
    col.noalias() = W.transpose() * X;
    T* yb = y.ptr() + static_cast<std::ptrdiff_t>(b) * out_ * ho * wo;
    col2im(col.data(), g, yb);
    for (int c = 0; c < out_; ++c) {
      T* yc = yb + static_cast<std::ptrdiff_t>(c) * ho * wo;
      for (int i = 0; i < ho * wo; ++i) yc[i] += bias[static_cast<std::size_t>(c)];
    }
  }
  input_ = x;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> ConvTranspose2d<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "conv_transpose2d");
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int ho = gy.dim(2), wo = gy.dim(3);
  const ConvGeom g{out_, ho, wo, k_, s_, p_, h, w};
  const int kk = out_ * k_ * k_, plane = h * w;
  BasicTensor<T> gx(input_.shape());
  RowMat<T> gcol(kk, plane);
  const ConstMapMat<T> W(weight.ptr(), in_, kk);
  MapMat<T> gW(weight.grad().data(), in_, kk);
  auto gb = bias.grad();
  for (int b = 0; b < n; ++b) {
    const T* gyb = gy.ptr() + static_cast<std::ptrdiff_t>(b) * out_ * ho * wo;
    im2col(gyb, g, gcol.data());
    const ConstMapMat<T> X(input_.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * plane, in_, plane);
    gW.noalias() += X * gcol.transpose();
    MapMat<T> GX(gx.ptr() + static_cast<std::ptrdiff_t>(b) * in_ * plane, in_, plane);
    GX.noalias() = W * gcol;
    for (int c = 0; c < out_; ++c) {
      const T* gc = gyb + static_cast<std::ptrdiff_t>(c) * ho * wo;
      double acc = 0.0;
      for (int i = 0; i < ho * wo; ++i) acc += gc[i];
      gb[static_cast<std::size_t>(c)] += static_cast<T>(acc);
    }
  }
  return gx;
}

// ---- BatchNorm2d ----

template <typename T>
BatchNorm2d<T>::BatchNorm2d(int channels, double eps, double momentum)
    : gamma({channels}, T(1)),
      beta({channels}, T(0)),
      running_mean({channels}, T(0)),
      running_var({channels}, T(1)),
      c_(channels),
      eps_(eps),
      momentum_(momentum) {}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::forward(const BasicTensor<T>& x, Mode mode) {
  require_channels(x.shape(), c_, "batchnorm2d");
  const int n = x.dim(0), hw = x.dim(2) * x.dim(3);
  const std::size_t m = static_cast<std::size_t>(n) * static_cast<std::size_t>(hw);
  if (mode == Mode::Train && m < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel, got " + shape_string(x.shape()));
  }
  BasicTensor<T> y(x.shape());
  xhat_ = BasicTensor<T>(x.shape());
  inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
  for (int c = 0; c < c_; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* p = x.ptr() + (static_cast<std::ptrdiff_t>(b) * c_ + c) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
      }
      mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* p = x.ptr() + (static_cast<std::ptrdiff_t>(b) * c_ + c) * hw;
        for (int i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / static_cast<double>(m);
      const auto cc = static_cast<std::size_t>(c);
      running_mean[cc] = static_cast<T>((1.0 - momentum_) * running_mean[cc] + momentum_ * mean);
      running_var[cc] = static_cast<T>((1.0 - momentum_) * running_var[cc] +
                                       momentum_ * var * static_cast<double>(m) / static_cast<double>(m - 1));
    } else {
      mean = running_mean[static_cast<std::size_t>(c)];
      var = running_var[static_cast<std::size_t>(c)];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[static_cast<std::size_t>(c)] = inv;
    const double gm = gamma[static_cast<std::size_t>(c)], bt = beta[static_cast<std::size_t>(c)];
    for (int b = 0; b < n; ++b) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * c_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        const double xh = (x.ptr()[off + i] - mean) * inv;
        xhat_.ptr()[off + i] = static_cast<T>(xh);
        y.ptr()[off + i] = static_cast<T>(gm * xh + bt);
      }
    }
  }
  mode_ = mode;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "batchnorm2d");
  const int n = gy.dim(0), hw = gy.dim(2) * gy.dim(3);
  const double m = static_cast<double>(n) * hw;
  BasicTensor<T> gx(gy.shape());
  auto gg = gamma.grad();
  auto gbeta = beta.grad();
  for (int c = 0; c < c_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < n; ++b) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * c_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        sum_g += gy.ptr()[off + i];
        sum_gx += static_cast<double>(gy.ptr()[off + i]) * xhat_.ptr()[off + i];
      }
    }
    const auto cc = static_cast<std::size_t>(c);
    gg[cc] += static_cast<T>(sum_gx);
    gbeta[cc] += static_cast<T>(sum_g);
    const double scale = gamma[cc] * inv_std_[cc];
    for (int b = 0; b < n; ++b) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(b) * c_ + c) * hw;
      for (int i = 0; i < hw; ++i) {
        const double g = gy.ptr()[off + i];
        gx.ptr()[off + i] = static_cast<T>(
            mode_ == Mode::Train ? scale * (g - sum_g / m - xhat_.ptr()[off + i] * sum_gx / m) : scale * g);
      }
    }
  }
  return gx;
}

// ---- Dropout ----

template <typename T>
Dropout<T>::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0, 1)");
}

template <typename T>
BasicTensor<T> Dropout<T>::forward(const BasicTensor<T>& x, Mode mode) {
  BasicTensor<T> y = x;
  mask_.assign(x.size(), T(1));
  if (mode == Mode::Train) {
    const T keep = static_cast<T>(1.0 / (1.0 - rate_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = unit(rng_) < rate_ ? T(0) : keep;
      y[i] = x[i] * mask_[i];
    }
  }
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> Dropout<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "dropout");
  BasicTensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask_[i];
  return gx;
}

// ---- activations ----

template <typename T>
BasicTensor<T> LeakyReLU<T>::forward(const BasicTensor<T>& x, Mode) {
  BasicTensor<T> y = x;
  const T a = static_cast<T>(slope_);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > T(0) ? x[i] : a * x[i];
  input_ = x;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> LeakyReLU<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "leaky_relu");
  BasicTensor<T> gx = gy;
  const T a = static_cast<T>(slope_);
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = input_[i] > T(0) ? gy[i] : a * gy[i];
  return gx;
}

template <typename T>
BasicTensor<T> ReLU<T>::forward(const BasicTensor<T>& x, Mode) {
  BasicTensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(x[i], T(0));
  input_ = x;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> ReLU<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "relu");
  BasicTensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = input_[i] > T(0) ? gy[i] : T(0);
  return gx;
}

template <typename T>
BasicTensor<T> Sigmoid<T>::forward(const BasicTensor<T>& x, Mode) {
  BasicTensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double z = x[i];
    y[i] = static_cast<T>(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  }
  output_ = y;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> Sigmoid<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "sigmoid");
  BasicTensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gy[i] * output_[i] * (T(1) - output_[i]);
  return gx;
}

template <typename T>
BasicTensor<T> Tanh<T>::forward(const BasicTensor<T>& x, Mode) {
  BasicTensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x[i]);
  output_ = y;
  this->out_shape_ = y.shape();
  this->cached_ = true;
  return y;
}

template <typename T>
BasicTensor<T> Tanh<T>::backward(const BasicTensor<T>& gy) {
  this->check_cache(gy, "tanh");
  BasicTensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gy[i] * (T(1) - output_[i] * output_[i]);
  return gx;
}

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& s, std::uint64_t seed) {
  switch (s.kind) {
    case LayerKind::Conv: return std::make_unique<Conv2d<T>>(s.in_channels, s.out_channels, s.kernel, s.stride, s.pad);
    case LayerKind::ConvTranspose:
      return std::make_unique<ConvTranspose2d<T>>(s.in_channels, s.out_channels, s.kernel, s.stride, s.pad);
    case LayerKind::BatchNorm: return std::make_unique<BatchNorm2d<T>>(s.in_channels);
    case LayerKind::Dropout: return std::make_unique<Dropout<T>>(s.rate, seed);
    case LayerKind::LeakyReLU: return std::make_unique<LeakyReLU<T>>(s.slope);
    case LayerKind::ReLU: return std::make_unique<ReLU<T>>();
    case LayerKind::Sigmoid: return std::make_unique<Sigmoid<T>>();
    case LayerKind::Tanh: return std::make_unique<Tanh<T>>();
  }
  throw std::invalid_argument("unknown layer kind");
}

// ---- Sequential ----

template <typename T>
BasicTensor<T> Sequential<T>::forward(const BasicTensor<T>& x, Mode mode) {
  BasicTensor<T> h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  return h;
}

template <typename T>
BasicTensor<T> Sequential<T>::backward(const BasicTensor<T>& grad_out) {
  BasicTensor<T> g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
std::vector<ParamRef<T>> Sequential<T>::parameters(const std::string& prefix) {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& p : layers_[i]->parameters()) out.push_back({prefix + std::to_string(i) + "." + p.name, p.tensor});
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> Sequential<T>::buffers(const std::string& prefix) {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& p : layers_[i]->buffers()) out.push_back({prefix + std::to_string(i) + "." + p.name, p.tensor});
  }
  return out;
}

// ---- channel plumbing ----

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank4(a.shape(), "concat_channels");
  require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ outside the channel axis");
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  BasicTensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + static_cast<std::ptrdiff_t>(i) * ca * hw, ca * hw,
                y.ptr() + static_cast<std::ptrdiff_t>(i) * (ca + cb) * hw);
    std::copy_n(b.ptr() + static_cast<std::ptrdiff_t>(i) * cb * hw, cb * hw,
                y.ptr() + (static_cast<std::ptrdiff_t>(i) * (ca + cb) + ca) * hw);
  }
  return y;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& x, int first) {
  require_rank4(x.shape(), "split_channels");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (first <= 0 || first >= c) throw ShapeError("split_channels: cannot split " + shape_string(x.shape()));
  BasicTensor<T> a({n, first, x.dim(2), x.dim(3)}), b({n, c - first, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.ptr() + static_cast<std::ptrdiff_t>(i) * c * hw, first * hw,
                a.ptr() + static_cast<std::ptrdiff_t>(i) * first * hw);
    std::copy_n(x.ptr() + (static_cast<std::ptrdiff_t>(i) * c + first) * hw, (c - first) * hw,
                b.ptr() + static_cast<std::ptrdiff_t>(i) * (c - first) * hw);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
void init_normal(std::span<const ParamRef<T>> params, std::mt19937_64& rng, double stddev) {
  auto ends_with = [](const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (const auto& p : params) {
    if (ends_with(p.name, "weight")) {
      for (auto& v : p.tensor->data()) v = static_cast<T>(stddev * standard_normal(rng));
    } else if (ends_with(p.name, "gamma")) {
      p.tensor->fill(T(1));
    } else {
      p.tensor->fill(T(0));
    }
  }
}

// ---- losses ----

template <typename T>
LossResult<T> l1_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l1_loss: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  LossResult<T> r{0.0, BasicTensor<T>(a.shape())};
  const double inv_n = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    r.value += std::abs(d);
    r.grad[i] = static_cast<T>(d > 0 ? inv_n : (d < 0 ? -inv_n : 0.0));
  }
  r.value *= inv_n;
  return r;
}

template <typename T>
LossResult<T> bce_loss(const BasicTensor<T>& p, double label) {
  LossResult<T> r{0.0, BasicTensor<T>(p.shape())};
  const double inv_n = 1.0 / static_cast<double>(p.size());
  constexpr double lo = 1e-12;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), lo, 1.0 - lo);
    r.value -= label * std::log(q) + (1.0 - label) * std::log(1.0 - q);
    r.grad[i] = static_cast<T>(inv_n * (-label / q + (1.0 - label) / (1.0 - q)));
  }
  r.value *= inv_n;
  return r;
}

template <typename T>
LossResult<T> bce_with_logits(const BasicTensor<T>& z, double label) {
  LossResult<T> r{0.0, BasicTensor<T>(z.shape())};
  const double inv_n = 1.0 / static_cast<double>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    r.value += std::max(v, 0.0) - v * label + std::log1p(std::exp(-std::abs(v)));
    const double sig = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    r.grad[i] = static_cast<T>(inv_n * (sig - label));
  }
  r.value *= inv_n;
  return r;
}

// ---- Adam ----

template <typename T>
Adam<T>::Adam(std::vector<ParamRef<T>> params, AdamConfig config) : params_(std::move(params)), cfg_(config) {
  for (auto& p : params_) {
    m_.emplace_back(p.tensor->size(), 0.0);
    v_.emplace_back(p.tensor->size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto data = params_[k].tensor->data();
    auto grad = params_[k].tensor->grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      data[i] = static_cast<T>(data[i] - cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

// ---- archive ----

namespace {
constexpr std::uint32_t kArchiveVersion = 1;
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw std::out_of_range("archive has no tensor named '" + name + "'");
}

void write_archive(std::ostream& os, const Archive& a) {
  io::put_magic(os, "KBPT");
  io::put_u32(os, kArchiveVersion);
  io::put_string(os, a.manifest);
  io::put_u32(os, static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) {
    io::put_string(os, t.name);
    io::put_u32(os, static_cast<std::uint32_t>(t.tensor.rank()));
    for (int e : t.tensor.shape()) io::put_u32(os, static_cast<std::uint32_t>(e));
    for (float v : t.tensor.data()) io::put_f32(os, v);
  }
}

Archive read_archive(std::istream& is) {
  io::expect_magic(is, "KBPT");
  const auto version = io::get_u32(is);
  if (version != kArchiveVersion) throw io::FormatError("unsupported KBPT version " + std::to_string(version));
  Archive a;
  a.manifest = io::get_string(is);
  const auto count = io::get_u32(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = io::get_string(is);
    const auto rank = io::get_u32(is);
    if (rank > 8) throw io::FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
      e = static_cast<int>(io::get_u32(is));
      if (e <= 0) throw io::FormatError("tensor '" + t.name + "' has a nonpositive extent");
    }
    t.tensor = Tensor(shape);
    for (auto& v : t.tensor.data()) v = io::get_f32(is);
    a.tensors.push_back(std::move(t));
  }
  return a;
}

void write_archive_file(const std::filesystem::path& path, const Archive& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_archive(os, a);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Archive read_archive_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_archive(is);
}

#define KBP_NN_INSTANTIATE(T)                                                                               \
  template class BasicTensor<T>;                                                                            \
  template class Layer<T>;                                                                                  \
  template class Conv2d<T>;                                                                                 \
  template class ConvTranspose2d<T>;                                                                        \
  template class BatchNorm2d<T>;                                                                            \
  template class Dropout<T>;                                                                                \
  template class LeakyReLU<T>;                                                                              \
  template class ReLU<T>;                                                                                   \
  template class Sigmoid<T>;                                                                                \
  template class Tanh<T>;                                                                                   \
  template class Sequential<T>;                                                                             \
  template class Adam<T>;                                                                                   \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerSpec&, std::uint64_t);                        \
  template BasicTensor<T> concat_channels<T>(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels<T>(const BasicTensor<T>&, int);         \
  template void init_normal<T>(std::span<const ParamRef<T>>, std::mt19937_64&, double);                     \
  template LossResult<T> l1_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template LossResult<T> bce_loss<T>(const BasicTensor<T>&, double);                                        \
  template LossResult<T> bce_with_logits<T>(const BasicTensor<T>&, double);

KBP_NN_INSTANTIATE(float)
KBP_NN_INSTANTIATE(double)

#undef KBP_NN_INSTANTIATE

}  // namespace kbp::nn
