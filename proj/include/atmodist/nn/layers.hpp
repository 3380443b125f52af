#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "atmodist/error.hpp"
#include "atmodist/tensor.hpp"

namespace atmodist::nn {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatrixMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatrixMap = Eigen::Map<const RowMatrix<S>>;

enum class Mode { train, infer };

/// Learnable parameter with its gradient accumulator.
template <typename S>
struct Param {
  std::string name;
  aligned_vector<S> value;
  aligned_vector<S> grad;
  bool decay = true;  // subject to weight decay

  Param() = default;
  Param(std::string n, std::size_t size, bool wd) : name(std::move(n)), value(size, S(0)), grad(size, S(0)), decay(wd) {}
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

/// He (Kaiming) normal initialisation, std = sqrt(2 / fan_in).
template <typename Vec>
void he_normal(Vec& w, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w) v = static_cast<typename Vec::value_type>(normal(rng));
}

template <typename S>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, Mode mode) = 0;
  /// Propagate the output gradient; accumulates into parameter gradients.
  virtual Tensor<S> backward(const Tensor<S>& grad) = 0;
  virtual void collect_params(std::vector<Param<S>*>&) {}
  /// Non-learnable state that belongs in checkpoints (running statistics).
  virtual void collect_buffers(std::vector<aligned_vector<S>*>&) {}
  virtual std::string kind() const = 0;
};

template <typename S>
using LayerPtr = std::unique_ptr<Layer<S>>;

inline int conv_output_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// 2-D convolution via im2col + GEMM on channel-major batches.
template <typename S>
class Conv2d final : public Layer<S> {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, std::string name)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad),
        weight_(name + ".weight", static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel, true) {
    if (in_ch < 1 || out_ch < 1 || kernel < 1 || stride < 1 || pad < 0)
      throw ConfigError("invalid convolution geometry for " + name);
    if (bias) bias_ = Param<S>(name + ".bias", out_ch, false);
  }

  void init_he(std::mt19937_64& rng) { he_normal(weight_.value, in_ * k_ * k_, rng); }

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    if (x.channels() != in_)
      throw InputError("conv expects " + std::to_string(in_) + " channels, got " + x.shape_string());
    in_shape_ = {x.channels(), x.batch(), x.height(), x.width()};
    const int ho = conv_output_size(x.height(), k_, stride_, pad_);
    const int wo = conv_output_size(x.width(), k_, stride_, pad_);
    if (ho < 1 || wo < 1) throw ConfigError("convolution reduces spatial size below 1 (" + weight_.name + ")");
    im2col(x, ho, wo);
    Tensor<S> y(out_, x.batch(), ho, wo);
    const auto m = static_cast<Eigen::Index>(y.row_size());
    MatrixMap<S> ym(y.data(), out_, m);
    ym.noalias() = weights() * ConstMatrixMap<S>(cols_.data(), kdim(), m);
    if (!bias_.value.empty())
      for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[o];
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const auto m = static_cast<Eigen::Index>(g.row_size());
    ConstMatrixMap<S> gm(g.data(), out_, m);
    ConstMatrixMap<S> cols(cols_.data(), kdim(), m);
    MatrixMap<S>(weight_.grad.data(), out_, kdim()).noalias() += gm * cols.transpose();
    if (!bias_.value.empty())
      for (int o = 0; o < out_; ++o) bias_.grad[o] += gm.row(o).sum();
    RowMatrix<S> dcols = weights().transpose() * gm;
    return col2im(dcols, g.height(), g.width());
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    out.push_back(&weight_);
    if (!bias_.value.empty()) out.push_back(&bias_);
  }
  std::string kind() const override { return "conv"; }

  Param<S>& weight() noexcept { return weight_; }
  Param<S>& bias() noexcept { return bias_; }
  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  int kernel() const noexcept { return k_; }

 private:
  Eigen::Index kdim() const noexcept { return static_cast<Eigen::Index>(in_) * k_ * k_; }
  ConstMatrixMap<S> weights() const { return ConstMatrixMap<S>(weight_.value.data(), out_, kdim()); }

  void im2col(const Tensor<S>& x, int ho, int wo) {
    const int n = x.batch(), h = x.height(), w = x.width();
    const std::size_t m = static_cast<std::size_t>(n) * ho * wo;
    cols_.assign(static_cast<std::size_t>(kdim()) * m, S(0));
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          S* dst = cols_.data() + ((static_cast<std::size_t>(c) * k_ + ky) * k_ + kx) * m;
          for (int b = 0; b < n; ++b) {
            const S* src = x.data() + x.index(c, b, 0, 0);
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ + ky - pad_;
              S* row = dst + (static_cast<std::size_t>(b) * ho + oy) * wo;
              if (iy < 0 || iy >= h) continue;
              const S* srow = src + static_cast<std::size_t>(iy) * w;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ + kx - pad_;
                if (ix >= 0 && ix < w) row[ox] = srow[ix];
              }
            }
          }
        }
  }

  Tensor<S> col2im(const RowMatrix<S>& dcols, int ho, int wo) const {
    const auto [c_, n, h, w] = in_shape_;
    Tensor<S> dx(c_, n, h, w);
    const std::size_t m = static_cast<std::size_t>(n) * ho * wo;
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const S* srcrow = dcols.data() + ((static_cast<std::size_t>(c) * k_ + ky) * k_ + kx) * m;
          for (int b = 0; b < n; ++b) {
            S* dst = dx.data() + dx.index(c, b, 0, 0);
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ + ky - pad_;
              if (iy < 0 || iy >= h) continue;
              const S* row = srcrow + (static_cast<std::size_t>(b) * ho + oy) * wo;
              S* drow = dst + static_cast<std::size_t>(iy) * w;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ + kx - pad_;
                if (ix >= 0 && ix < w) drow[ix] += row[ox];
              }
            }
          }
        }
    return dx;
  }

  int in_, out_, k_, stride_, pad_;
  Param<S> weight_;
  Param<S> bias_;
  aligned_vector<S> cols_;
  std::array<int, 4> in_shape_{};
};

/// Per-channel batch normalisation with running statistics for inference.
template <typename S>
class BatchNorm2d final : public Layer<S> {
 public:
  BatchNorm2d(int channels, std::string name, double momentum = 0.1, double eps = 1e-5)
      : c_(channels), momentum_(momentum), eps_(eps),
        gamma_(name + ".gamma", channels, false), beta_(name + ".beta", channels, false),
        running_mean_(channels, S(0)), running_var_(channels, S(1)) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), S(1));
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    if (x.channels() != c_) throw InputError("batch norm channel mismatch: " + x.shape_string());
    mode_ = mode;
    const std::size_t m = x.row_size();
    xhat_ = Tensor<S>(x.channels(), x.batch(), x.height(), x.width());
    inv_std_.assign(c_, S(0));
    Tensor<S> y = xhat_;
    for (int c = 0; c < c_; ++c) {
      const S* xr = x.data() + c * m;
      double mean, var;
      if (mode == Mode::train) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += xr[i];
        mean = s / m;
        double v = 0.0;
        for (std::size_t i = 0; i < m; ++i) v += (xr[i] - mean) * (xr[i] - mean);
        var = v / m;
        const double unbiased = m > 1 ? v / (m - 1) : var;
        running_mean_[c] = static_cast<S>((1 - momentum_) * running_mean_[c] + momentum_ * mean);
        running_var_[c] = static_cast<S>((1 - momentum_) * running_var_[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const S inv = static_cast<S>(1.0 / std::sqrt(var + eps_));
      inv_std_[c] = inv;
      S* xh = xhat_.data() + c * m;
      S* yr = y.data() + c * m;
      const S mu = static_cast<S>(mean), g = gamma_.value[c], b = beta_.value[c];
      for (std::size_t i = 0; i < m; ++i) {
        xh[i] = (xr[i] - mu) * inv;
        yr[i] = g * xh[i] + b;
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const std::size_t m = g.row_size();
    Tensor<S> dx(g.channels(), g.batch(), g.height(), g.width());
    for (int c = 0; c < c_; ++c) {
      const S* gr = g.data() + c * m;
      const S* xh = xhat_.data() + c * m;
      S* dr = dx.data() + c * m;
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        sum_g += gr[i];
        sum_gx += gr[i] * xh[i];
      }
      gamma_.grad[c] += static_cast<S>(sum_gx);
      beta_.grad[c] += static_cast<S>(sum_g);
      const S scale = gamma_.value[c] * inv_std_[c];
      if (mode_ == Mode::train) {
        const S mg = static_cast<S>(sum_g / m), mgx = static_cast<S>(sum_gx / m);
        for (std::size_t i = 0; i < m; ++i) dr[i] = scale * (gr[i] - mg - xh[i] * mgx);
      } else {
        for (std::size_t i = 0; i < m; ++i) dr[i] = scale * gr[i];
      }
    }
    return dx;
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<aligned_vector<S>*>& out) override {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }
  std::string kind() const override { return "batchnorm"; }

 private:
  int c_;
  double momentum_, eps_;
  Param<S> gamma_, beta_;
  aligned_vector<S> running_mean_, running_var_;
  Tensor<S> xhat_;
  std::vector<S> inv_std_;
  Mode mode_ = Mode::train;
};

/// Leaky rectifier; slope 0 gives the plain ReLU.
template <typename S>
class LeakyReLU final : public Layer<S> {
 public:
  explicit LeakyReLU(S slope = S(0)) : slope_(slope) {}

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    Tensor<S> y = x;
    positive_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      positive_[i] = x.data()[i] > S(0);
      if (!positive_[i]) y.data()[i] *= slope_;
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx = g;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!positive_[i]) dx.data()[i] *= slope_;
    return dx;
  }
  std::string kind() const override { return slope_ == S(0) ? "relu" : "leaky_relu"; }

 private:
  S slope_;
  std::vector<unsigned char> positive_;
};

template <typename S>
LayerPtr<S> relu() {
  return std::make_unique<LeakyReLU<S>>(S(0));
}

template <typename S>
class MaxPool2d final : public Layer<S> {
 public:
  MaxPool2d(int kernel, int stride, int pad) : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    const int ho = conv_output_size(x.height(), k_, stride_, pad_);
    const int wo = conv_output_size(x.width(), k_, stride_, pad_);
    if (ho < 1 || wo < 1) throw ConfigError("max-pool reduces spatial size below 1");
    in_shape_ = {x.channels(), x.batch(), x.height(), x.width()};
    Tensor<S> y(x.channels(), x.batch(), ho, wo);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int c = 0; c < x.channels(); ++c)
      for (int b = 0; b < x.batch(); ++b)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox, ++o) {
            S best = -std::numeric_limits<S>::infinity();
            std::size_t arg = 0;
            for (int ky = 0; ky < k_; ++ky) {
              const int iy = oy * stride_ + ky - pad_;
              if (iy < 0 || iy >= x.height()) continue;
              for (int kx = 0; kx < k_; ++kx) {
                const int ix = ox * stride_ + kx - pad_;
                if (ix < 0 || ix >= x.width()) continue;
                const std::size_t idx = x.index(c, b, iy, ix);
                if (x.data()[idx] > best) {
                  best = x.data()[idx];
                  arg = idx;
                }
              }
            }
            y.data()[o] = best;
            argmax_[o] = arg;
          }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < g.size(); ++o) dx.data()[argmax_[o]] += g.data()[o];
    return dx;
  }
  std::string kind() const override { return "maxpool"; }

 private:
  int k_, stride_, pad_;
  std::array<int, 4> in_shape_{};
  std::vector<std::size_t> argmax_;
};

/// Spatial mean: [C, N, H, W] -> [C, N, 1, 1].
template <typename S>
class GlobalAvgPool final : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    h_ = x.height();
    w_ = x.width();
    Tensor<S> y(x.channels(), x.batch(), 1, 1);
    const std::size_t hw = static_cast<std::size_t>(h_) * w_;
    for (std::size_t i = 0; i < y.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += x.data()[i * hw + k];
      y.data()[i] = static_cast<S>(s / hw);
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> dx(g.channels(), g.batch(), h_, w_);
    const std::size_t hw = static_cast<std::size_t>(h_) * w_;
    const S inv = S(1) / static_cast<S>(hw);
    for (std::size_t i = 0; i < g.size(); ++i)
      std::fill_n(dx.data() + i * hw, hw, g.data()[i] * inv);
    return dx;
  }
  std::string kind() const override { return "avgpool"; }

 private:
  int h_ = 0, w_ = 0;
};

/// [C, N, H, W] -> [C*H*W, N, 1, 1] with feature index (c*H + y)*W + x.
template <typename S>
class Flatten final : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    shape_ = {x.channels(), x.batch(), x.height(), x.width()};
    const int hw = x.height() * x.width();
    Tensor<S> y(x.channels() * hw, x.batch(), 1, 1);
    for (int c = 0; c < x.channels(); ++c)
      for (int b = 0; b < x.batch(); ++b)
        for (int k = 0; k < hw; ++k) y.data()[(static_cast<std::size_t>(c) * hw + k) * x.batch() + b] =
            x.data()[(static_cast<std::size_t>(c) * x.batch() + b) * hw + k];
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const auto [c_, n, h, w] = shape_;
    Tensor<S> dx(c_, n, h, w);
    const int hw = h * w;
    for (int c = 0; c < c_; ++c)
      for (int b = 0; b < n; ++b)
        for (int k = 0; k < hw; ++k) dx.data()[(static_cast<std::size_t>(c) * n + b) * hw + k] =
            g.data()[(static_cast<std::size_t>(c) * hw + k) * n + b];
    return dx;
  }
  std::string kind() const override { return "flatten"; }

 private:
  std::array<int, 4> shape_{};
};

/// Fully connected layer on [features, N, 1, 1] tensors.
template <typename S>
class Linear final : public Layer<S> {
 public:
  Linear(int in, int out, std::string name)
      : in_(in), out_(out), weight_(name + ".weight", static_cast<std::size_t>(in) * out, true),
        bias_(name + ".bias", out, false) {
    if (in < 1 || out < 1) throw ConfigError("invalid linear layer size for " + name);
  }

  void init_he(std::mt19937_64& rng) { he_normal(weight_.value, in_, rng); }

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    if (x.channels() != in_ || x.height() != 1 || x.width() != 1)
      throw InputError("linear expects " + std::to_string(in_) + " features, got " + x.shape_string());
    x_ = x;
    Tensor<S> y(out_, x.batch(), 1, 1);
    MatrixMap<S> ym(y.data(), out_, x.batch());
    ym.noalias() = ConstMatrixMap<S>(weight_.value.data(), out_, in_) * ConstMatrixMap<S>(x.data(), in_, x.batch());
    for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[o];
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const int n = g.batch();
    ConstMatrixMap<S> gm(g.data(), out_, n);
    MatrixMap<S>(weight_.grad.data(), out_, in_).noalias() += gm * ConstMatrixMap<S>(x_.data(), in_, n).transpose();
    for (int o = 0; o < out_; ++o) bias_.grad[o] += gm.row(o).sum();
    Tensor<S> dx(in_, n, 1, 1);
    MatrixMap<S>(dx.data(), in_, n).noalias() = ConstMatrixMap<S>(weight_.value.data(), out_, in_).transpose() * gm;
    return dx;
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  std::string kind() const override { return "linear"; }

 private:
  int in_, out_;
  Param<S> weight_, bias_;
  Tensor<S> x_;
};

/// Sub-pixel rearrangement [C*r*r, N, H, W] -> [C, N, H*r, W*r].
template <typename S>
class PixelShuffle final : public Layer<S> {
 public:
  explicit PixelShuffle(int factor) : r_(factor) {
    if (factor < 1) throw ConfigError("pixel shuffle factor must be positive");
  }

  Tensor<S> forward(const Tensor<S>& x, Mode) override {
    if (x.channels() % (r_ * r_) != 0) throw InputError("pixel shuffle channel count not divisible");
    const int c_out = x.channels() / (r_ * r_);
    Tensor<S> y(c_out, x.batch(), x.height() * r_, x.width() * r_);
    for (int c = 0; c < c_out; ++c)
      for (int i = 0; i < r_; ++i)
        for (int j = 0; j < r_; ++j)
          for (int b = 0; b < x.batch(); ++b)
            for (int yy = 0; yy < x.height(); ++yy)
              for (int xx = 0; xx < x.width(); ++xx)
                y(c, b, yy * r_ + i, xx * r_ + j) = x(c * r_ * r_ + i * r_ + j, b, yy, xx);
    return y;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    const int c_out = g.channels();
    Tensor<S> dx(c_out * r_ * r_, g.batch(), g.height() / r_, g.width() / r_);
    for (int c = 0; c < c_out; ++c)
      for (int i = 0; i < r_; ++i)
        for (int j = 0; j < r_; ++j)
          for (int b = 0; b < g.batch(); ++b)
            for (int yy = 0; yy < dx.height(); ++yy)
              for (int xx = 0; xx < dx.width(); ++xx)
                dx(c * r_ * r_ + i * r_ + j, b, yy, xx) = g(c, b, yy * r_ + i, xx * r_ + j);
    return dx;
  }
  std::string kind() const override { return "pixel_shuffle"; }

 private:
  int r_;
};

/// Ordered chain of layers.
template <typename S>
class Sequential final : public Layer<S> {
 public:
  Sequential() = default;

  template <typename L>
  L& add(std::unique_ptr<L> layer) {
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) override {
    Tensor<S> h = x;
    for (auto& l : layers_) h = l->forward(h, mode);
    return h;
  }

  Tensor<S> backward(const Tensor<S>& g) override {
    Tensor<S> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  void collect_params(std::vector<Param<S>*>& out) override {
    for (auto& l : layers_) l->collect_params(out);
  }
  void collect_buffers(std::vector<aligned_vector<S>*>& out) override {
    for (auto& l : layers_) l->collect_buffers(out);
  }
  std::string kind() const override { return "sequential"; }

  std::size_t size() const noexcept { return layers_.size(); }
  Layer<S>& operator[](std::size_t i) { return *layers_[i]; }

 private:
  std::vector<LayerPtr<S>> layers_;
};

/// Sum of elements over all parameters.
template <typename S>
std::size_t count_params(const std::vector<Param<S>*>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <typename S>
void zero_grads(const std::vector<Param<S>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace atmodist::nn
